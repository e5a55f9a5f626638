//! Input generators shared by the benchmarks.

use candle_core::{Device, Tensor};
use dskd_core::{FeatureMap, FeaturePyramid, Label};
use dskd_core::losses::{ScoreKind, ScoreMap};
use dskd_core::metrics::{DefectRegion, DefectType, EvalRecord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random pyramid with `channels[l]` channels at `side >> l` resolution.
pub fn random_pyramid(batch: usize, side: usize, channels: [usize; 3], seed: u64) -> FeaturePyramid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let levels = std::array::from_fn(|l| {
        let s = side >> l;
        let n = batch * channels[l] * s * s;
        let data: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let t = Tensor::from_vec(data, (batch, channels[l], s, s), &Device::Cpu).unwrap();
        FeatureMap::new(t, l).unwrap()
    });
    FeaturePyramid::new(levels).unwrap()
}

/// Scores for `n` images where anomalies score higher on average, with ties.
pub fn scored_labels(n: usize, seed: u64) -> (Vec<f64>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let y = rng.random_bool(0.5);
            let s: f64 = (rng.random_range(0.0..1.0) + if y { 0.3 } else { 0.0 }) * 100.0;
            (s.round() / 100.0, y)
        })
        .unzip()
}

/// Alternating good and structural records; defects are a centered square
/// a quarter of the side wide, scored slightly higher than the background noise.
pub fn mixed_records(n: usize, side: usize, seed: u64) -> Vec<EvalRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = (3 * side / 8, 5 * side / 8);
    let inside = |k: usize| (lo..hi).contains(&(k / side)) && (lo..hi).contains(&(k % side));
    (0..n)
        .map(|i| {
            let anomalous = i % 2 == 1;
            let data: Vec<f64> = (0..side * side)
                .map(|k| rng.random_range(0.0..1.0) + if anomalous && inside(k) { 0.5 } else { 0.0 })
                .collect();
            let regions = if anomalous {
                let mask: Vec<bool> = (0..side * side).map(inside).collect();
                let area = mask.iter().filter(|m| **m).count() as f64;
                vec![DefectRegion::new(side, side, mask, area, DefectType::Structural, "patch").unwrap()]
            } else {
                Vec::new()
            };
            EvalRecord {
                name: format!("{i:03}"),
                image_score: data.iter().cloned().fold(f64::MIN, f64::max),
                label: if anomalous { Label::Structural } else { Label::Good },
                anomaly_map: ScoreMap::new(side, side, data, ScoreKind::Fused).unwrap(),
                regions,
            }
        })
        .collect()
}
