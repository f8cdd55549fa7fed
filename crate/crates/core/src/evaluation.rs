//! Frame-level average precision, F1 and per-bucket breakdowns.
//!
//! AP is the unsmoothed "every point" variant: the mean of precision@k over
//! the ranks k of all positives, micro-averaged over every scored frame.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, AsdError, Result};
use crate::synthetic_data::{AnnotationRow, SCENE_WIDTH, SPEAKING};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredFrame {
    pub clip_id: String,
    pub frame_index: usize,
    pub score: f64,
    pub label: u8,
    pub face_width_px: u32,
    pub n_faces: u32,
}

impl ScoredFrame {
    pub fn new(clip_id: impl Into<String>, frame_index: usize, score: f64, label: u8) -> Self {
        Self {
            clip_id: clip_id.into(),
            frame_index,
            score,
            label,
            face_width_px: 0,
            n_faces: 1,
        }
    }
}

fn validate(frames: &[ScoredFrame]) -> Result<()> {
    for f in frames {
        if !f.score.is_finite() {
            return Err(invalid!("{}#{}: non-finite score", f.clip_id, f.frame_index));
        }
        if f.label > 1 {
            return Err(invalid!("{}#{}: label {} is not binary", f.clip_id, f.frame_index, f.label));
        }
    }
    Ok(())
}

/// Indices sorted by descending score, ties by `(clip_id, frame_index)`.
fn ranking(frames: &[ScoredFrame]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..frames.len()).collect();
    idx.sort_by(|&a, &b| {
        let (fa, fb) = (&frames[a], &frames[b]);
        fb.score
            .total_cmp(&fa.score)
            .then_with(|| fa.clip_id.cmp(&fb.clip_id))
            .then(fa.frame_index.cmp(&fb.frame_index))
    });
    idx
}

pub fn average_precision(frames: &[ScoredFrame]) -> Result<f64> {
    validate(frames)?;
    let positives = frames.iter().filter(|f| f.label == 1).count();
    if positives == 0 {
        return Err(AsdError::UndefinedMetric("average precision needs at least one positive".into()));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in ranking(frames).iter().enumerate() {
        if frames[i].label == 1 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    /// Predicted positive iff `score ≥ threshold`.
    pub fn at(frames: &[ScoredFrame], threshold: f64) -> Self {
        let mut c = Confusion::default();
        for f in frames {
            match (f.score >= threshold, f.label == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.tp + self.fn_ == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fn_) as f64
        }
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

pub const DEFAULT_THRESHOLD: f64 = 0.5;

pub fn f1_score(frames: &[ScoredFrame], threshold: f64) -> Result<f64> {
    validate(frames)?;
    Ok(Confusion::at(frames, threshold).f1())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Facet {
    FaceSize,
    NFaces,
}

impl Facet {
    /// Ordered bucket names.
    pub fn buckets(self) -> &'static [&'static str] {
        match self {
            Facet::FaceSize => &["small", "middle", "large"],
            Facet::NFaces => &["1", "2", "3"],
        }
    }

    /// Small `< 64` px, middle `64..=128` px, large `> 128` px; faces per
    /// frame 1, 2 or 3 (more counts as 3).
    pub fn bucket_of(self, f: &ScoredFrame) -> usize {
        match self {
            Facet::FaceSize => match f.face_width_px {
                w if w < 64 => 0,
                w if w <= 128 => 1,
                _ => 2,
            },
            Facet::NFaces => (f.n_faces.clamp(1, 3) - 1) as usize,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub facet: Facet,
    pub bucket: String,
    /// `None` when the bucket has no positives.
    pub map: Option<f64>,
    pub count: usize,
}

/// Per-bucket AP; empty buckets are left out.
pub fn breakdown(frames: &[ScoredFrame], facet: Facet) -> Result<Vec<Bucket>> {
    validate(frames)?;
    if facet == Facet::FaceSize && frames.iter().any(|f| f.face_width_px == 0) {
        return Err(invalid!("face-size breakdown needs face widths"));
    }
    let names = facet.buckets();
    let mut groups: Vec<Vec<ScoredFrame>> = vec![Vec::new(); names.len()];
    for f in frames {
        groups[facet.bucket_of(f)].push(f.clone());
    }
    groups
        .into_iter()
        .zip(names)
        .filter(|(g, _)| !g.is_empty())
        .map(|(g, name)| {
            let map = match average_precision(&g) {
                Ok(ap) => Some(ap),
                Err(AsdError::UndefinedMetric(_)) => None,
                Err(e) => return Err(e),
            };
            Ok(Bucket {
                facet,
                bucket: name.to_string(),
                map,
                count: g.len(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub map: f64,
    pub f1: f64,
    pub frames: usize,
    pub buckets: Vec<Bucket>,
}

pub fn evaluate(frames: &[ScoredFrame]) -> Result<MetricsReport> {
    let mut buckets = Vec::new();
    if frames.iter().all(|f| f.face_width_px > 0) {
        buckets.extend(breakdown(frames, Facet::FaceSize)?);
    }
    buckets.extend(breakdown(frames, Facet::NFaces)?);
    Ok(MetricsReport {
        map: average_precision(frames)?,
        f1: f1_score(frames, DEFAULT_THRESHOLD)?,
        frames: frames.len(),
        buckets,
    })
}

/// One row of the score CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub clip_id: String,
    pub frame_index: usize,
    pub score: f64,
    pub label: Option<u8>,
}

fn csv_error(path: &Path) -> impl Fn(csv::Error) -> AsdError + '_ {
    move |e| AsdError::Format(format!("{}: {e}", path.display()))
}

pub fn write_scores(path: impl AsRef<Path>, rows: &[ScoreRow]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(csv_error(path))?;
    for r in rows {
        w.serialize(r).map_err(csv_error(path))?;
    }
    w.flush().map_err(|e| AsdError::io(path, e))
}

pub fn read_scores(path: impl AsRef<Path>) -> Result<Vec<ScoreRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(csv_error(path))?;
    r.deserialize().map(|row| row.map_err(csv_error(path))).collect()
}

pub fn read_annotations(path: impl AsRef<Path>) -> Result<Vec<AnnotationRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(csv_error(path))?;
    r.deserialize().map(|row| row.map_err(csv_error(path))).collect()
}

/// Attaches labels, face widths and faces-per-frame from the annotations to
/// each score. The scored track of clip `c` is `c:0`; every annotated face
/// at the same timestamp counts toward `n_faces`.
pub fn join_annotations(scores: &[ScoreRow], annotations: &[AnnotationRow], fps: f64) -> Result<Vec<ScoredFrame>> {
    let frame_of = |ts: f64| (ts * fps).round() as usize;
    let mut faces: HashMap<(&str, usize), u32> = HashMap::new();
    let mut primary: HashMap<(&str, usize), &AnnotationRow> = HashMap::new();
    for a in annotations {
        let key = (a.clip_id.as_str(), frame_of(a.frame_timestamp_s));
        *faces.entry(key).or_default() += 1;
        if a.track_id == format!("{}:0", a.clip_id) {
            primary.insert(key, a);
        }
    }
    scores
        .iter()
        .map(|s| {
            let key = (s.clip_id.as_str(), s.frame_index);
            let a = primary
                .get(&key)
                .ok_or_else(|| invalid!("no annotation for {} frame {}", s.clip_id, s.frame_index))?;
            let label = (a.label == SPEAKING) as u8;
            if let Some(l) = s.label {
                if l != label {
                    return Err(invalid!(
                        "{} frame {}: score file label {l} disagrees with annotation {label}",
                        s.clip_id,
                        s.frame_index
                    ));
                }
            }
            Ok(ScoredFrame {
                clip_id: s.clip_id.clone(),
                frame_index: s.frame_index,
                score: s.score,
                label,
                face_width_px: ((a.x2 - a.x1) * SCENE_WIDTH).round() as u32,
                n_faces: faces[&key],
            })
        })
        .collect()
}

/// Scores carrying their own labels, without breakdown metadata.
pub fn frames_from_scores(scores: &[ScoreRow]) -> Result<Vec<ScoredFrame>> {
    scores
        .iter()
        .map(|s| {
            let label = s
                .label
                .ok_or_else(|| invalid!("{} frame {} has no label", s.clip_id, s.frame_index))?;
            Ok(ScoredFrame::new(s.clip_id.clone(), s.frame_index, s.score, label))
        })
        .collect()
}
