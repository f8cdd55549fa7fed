//! Audio-visual active speaker detection.
//!
//! Per-frame speaking scores for a face track come from two temporal
//! encoders (face crops and MFCCs), cross-modal attention between them, a
//! self-attention layer over the fused sequence and a frame-level
//! classifier. The crate also ships the synthetic data generator,
//! augmentation, trainer and metrics used to exercise the model.

pub mod attention_fusion;
pub mod augmentation;
pub mod audio_encoder;
pub mod audio_features;
pub mod classifier;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod nn;
pub mod numeric;
pub mod synthetic_data;
pub mod trainer;
pub mod visual_encoder;

pub use error::{AsdError, Result};
pub use numeric::{Float, Graph, Tensor, Var};

use serde::{Deserialize, Serialize};

/// Model size: the full layout, or a reduced one that trains on a CPU in
/// minutes with the same temporal structure.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Paper,
    Desk,
}

impl std::str::FromStr for Scale {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "paper" => Ok(Scale::Paper),
            "desk" => Ok(Scale::Desk),
            other => Err(format!("unknown scale `{other}` (paper|desk)")),
        }
    }
}
