//! Analytic receptive fields against the measured temporal support of random
//! convolution stacks.

use asd_core::numeric::{receptive_window, Graph, LayerSpec, Tensor};
use asd_core::Float;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CHANNELS: usize = 2;
const LEN: usize = 40;

/// Runs a sigmoid-separated conv1d stack; returns the first output channel.
fn run_stack(specs: &[LayerSpec], weights: &[Tensor], input: &Tensor) -> Vec<Float> {
    let mut g = Graph::new();
    let mut h = g.constant(input.clone());
    for (i, (s, w)) in specs.iter().zip(weights).enumerate() {
        let w = g.constant(w.clone());
        h = g.conv1d(h, w, None, s.stride, s.dilation, s.padding, 1).unwrap();
        if i + 1 < specs.len() {
            h = g.sigmoid(h).unwrap();
        }
    }
    let out = g.value(h);
    let len = out.shape()[2];
    out.data()[..len].to_vec()
}

/// Layer stacks whose receptive field has no holes: each dilated kernel's
/// taps are spaced no further apart than the field already covered
/// (`d·jump ≤ rf`).
fn hole_free_stack() -> impl Strategy<Value = Vec<LayerSpec>> {
    prop::collection::vec((0usize..3, 1usize..4, 1usize..3), 1..5).prop_map(|raw| {
        let mut specs = Vec::new();
        let (mut rf, mut jump) = (1usize, 1usize);
        for (k_idx, d, s) in raw {
            let k = [1, 3, 5][k_idx];
            // a stride wider than the kernel would leave gaps for later layers
            let s = if k == 1 { 1 } else { s };
            let d = if k == 1 { 1 } else { d.min(rf / jump) };
            let spec = LayerSpec::new(k, s, d, (k - 1) * d / 2, 0);
            rf += (k - 1) * d * jump;
            jump *= s;
            specs.push(spec);
        }
        specs
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn perturbation_support_matches_analytic_window(specs in hole_free_stack(), seed in 0u64..1000, t in 0usize..LEN) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights: Vec<Tensor> = specs
            .iter()
            .map(|s| {
                let n = CHANNELS * CHANNELS * s.kernel_size;
                let data = (0..n).map(|_| {
                    let m: Float = rng.random_range(0.2..1.0);
                    if rng.random_bool(0.5) { m } else { -m }
                }).collect();
                Tensor::new(vec![CHANNELS, CHANNELS, s.kernel_size], data).unwrap()
            })
            .collect();
        let input = Tensor::new(
            vec![1, CHANNELS, LEN],
            (0..CHANNELS * LEN).map(|_| rng.random_range(-1.0..1.0)).collect(),
        ).unwrap();
        let base = run_stack(&specs, &weights, &input);
        let mut bumped = input.clone();
        for c in 0..CHANNELS {
            bumped.data_mut()[c * LEN + t] += 1.0;
        }
        let moved = run_stack(&specs, &weights, &bumped);
        let changed: Vec<usize> = (0..base.len()).filter(|&j| base[j] != moved[j]).collect();
        let expected: Vec<usize> = receptive_window(&specs).outputs_touching(t, base.len()).collect();
        prop_assert_eq!(changed, expected);
    }
}

#[test]
fn desk_encoders_reach_exactly_their_analytic_windows() {
    use asd_core::audio_encoder::AudioEncoderConfig;
    use asd_core::model::{audio_perturbation_support, visual_perturbation_support};
    use asd_core::visual_encoder::VisualEncoderConfig;

    let v = VisualEncoderConfig::desk();
    let got = visual_perturbation_support(&v, 30, 12, &[1, 2]).unwrap();
    let want: Vec<usize> = receptive_window(&v.temporal_specs()).outputs_touching(12, 30).collect();
    assert_eq!(got, want);
    assert_eq!(got.len(), v.receptive_field());

    let a = AudioEncoderConfig::desk();
    let w = receptive_window(&a.temporal_specs());
    for row in [3, 80, 158] {
        let got = audio_perturbation_support(&a, 40, row, &[1, 2, 3]).unwrap();
        assert_eq!(got, w.outputs_touching(row, 40).collect::<Vec<_>>(), "row {row}");
    }
    assert!(visual_perturbation_support(&v, 5, 5, &[0]).is_err());
}
