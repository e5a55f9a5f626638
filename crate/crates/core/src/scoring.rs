//! Fusing per-level score maps into a pixel anomaly map and an image score.
//!
//! For each student the three level maps are bilinearly upsampled to image
//! resolution and summed. The two sums are z-normalized with statistics from
//! anomaly-free held-out images and added. The image score is the maximum of
//! the Gaussian-smoothed fused map.

use serde::{Deserialize, Serialize};

use crate::decoders::StudentRole;
use crate::error::{Error, Result};
use crate::losses::{ScoreKind, ScoreMap};

pub const SIGMA_FLOOR: f64 = 1e-8;

/// Bilinear resize with half-pixel centers (the `align_corners = false` convention).
pub fn resize_bilinear(map: &ScoreMap, height: usize, width: usize) -> ScoreMap {
    if map.height == height && map.width == width {
        return map.clone();
    }
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|d| {
                let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(inp - 1);
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let rows = axis(height, map.height);
    let cols = axis(width, map.width);
    let mut values = Vec::with_capacity(height * width);
    for &(r0, r1, fr) in &rows {
        for &(c0, c1, fc) in &cols {
            let top = map.get(r0, c0) * (1.0 - fc) + map.get(r0, c1) * fc;
            let bottom = map.get(r1, c0) * (1.0 - fc) + map.get(r1, c1) * fc;
            values.push(top * (1.0 - fr) + bottom * fr);
        }
    }
    ScoreMap {
        height,
        width,
        values,
        kind: map.kind,
    }
}

/// Upsample every level map to `target` and sum them.
pub fn accumulate_maps(level_maps: &[ScoreMap], target: (usize, usize)) -> Result<ScoreMap> {
    if level_maps.is_empty() {
        return Err(Error::Contract("no level maps to accumulate".into()));
    }
    let (h, w) = target;
    let mut acc = vec![0.0; h * w];
    for m in level_maps {
        let up = resize_bilinear(m, h, w);
        for (a, v) in acc.iter_mut().zip(&up.values) {
            *a += v;
        }
    }
    ScoreMap::new(h, w, acc, ScoreKind::Accumulated)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PooledStats {
    pub mean: f64,
    pub std: f64,
}

/// Per-student pooled pixel statistics of accumulated validation maps.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub local: Option<PooledStats>,
    pub global: Option<PooledStats>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl Normalizer {
    pub fn stats(&self, role: StudentRole) -> Option<PooledStats> {
        match role {
            StudentRole::Local => self.local,
            StudentRole::Global => self.global,
        }
    }

    pub fn is_fitted(&self, role: StudentRole) -> bool {
        self.stats(role).is_some()
    }

    /// Fit the statistics of one student from its accumulated maps.
    pub fn fit_student(&mut self, role: StudentRole, maps: &[ScoreMap]) -> Result<()> {
        let n: usize = maps.iter().map(|m| m.values.len()).sum();
        if n == 0 {
            return Err(Error::Contract(format!(
                "no {} maps to fit normalization statistics",
                role.name()
            )));
        }
        let values = || maps.iter().flat_map(|m| m.values.iter().copied());
        let mean = values().sum::<f64>() / n as f64;
        let var = values().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let mut std = var.sqrt();
        if !(std > SIGMA_FLOOR) {
            let msg = format!(
                "{} score maps have (near-)zero variance; sigma floored at {SIGMA_FLOOR:e}",
                role.name()
            );
            log::warn!("{msg}");
            self.warnings.push(msg);
            std = SIGMA_FLOOR;
        }
        let stats = Some(PooledStats { mean, std });
        match role {
            StudentRole::Local => self.local = stats,
            StudentRole::Global => self.global = stats,
        }
        Ok(())
    }

    /// `(map - mean) / std` for one student.
    pub fn normalize(&self, role: StudentRole, map: &ScoreMap) -> Result<ScoreMap> {
        let s = self.stats(role).ok_or_else(|| {
            Error::State(format!("normalizer has no statistics for the {} student", role.name()))
        })?;
        Ok(ScoreMap {
            height: map.height,
            width: map.width,
            values: map.values.iter().map(|v| (v - s.mean) / s.std).collect(),
            kind: ScoreKind::Fused,
        })
    }
}

pub fn fit_normalizer(local_maps: &[ScoreMap], global_maps: &[ScoreMap]) -> Result<Normalizer> {
    let mut n = Normalizer::default();
    n.fit_student(StudentRole::Local, local_maps)?;
    n.fit_student(StudentRole::Global, global_maps)?;
    Ok(n)
}

/// Sum of the two students' normalized maps.
pub fn combine(local: &ScoreMap, global: &ScoreMap, norm: &Normalizer) -> Result<ScoreMap> {
    if (local.height, local.width) != (global.height, global.width) {
        return Err(Error::Input(format!(
            "cannot combine {}x{} with {}x{}",
            local.height, local.width, global.height, global.width
        )));
    }
    let a = norm.normalize(StudentRole::Local, local)?;
    let b = norm.normalize(StudentRole::Global, global)?;
    Ok(ScoreMap {
        height: a.height,
        width: a.width,
        values: a.values.iter().zip(&b.values).map(|(x, y)| x + y).collect(),
        kind: ScoreKind::Fused,
    })
}

/// Normalized 1-D Gaussian kernel truncated at `4 sigma`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma + 0.5) as usize;
    let w: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let x = i as f64 - radius as f64;
            (-0.5 * x * x / (sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

// Half-sample symmetric reflection: d c b a | a b c d | d c b a
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Separable Gaussian smoothing with reflect padding. `sigma = 0` is the identity.
pub fn gaussian_filter(map: &ScoreMap, sigma: f64) -> Result<ScoreMap> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("gaussian sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(map.clone());
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w) = (map.height, map.width);
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * map.values[y * w + reflect(x as isize + j as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * tmp[reflect(y as isize + j as isize - r, h) * w + x])
                .sum();
        }
    }
    ScoreMap::new(h, w, out, map.kind)
}

/// Maximum of the Gaussian-smoothed map.
pub fn image_score(map: &ScoreMap, gaussian_sigma: f64) -> Result<f64> {
    Ok(gaussian_filter(map, gaussian_sigma)?.max())
}

/// Scoring output for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedResult {
    pub name: String,
    pub anomaly_map: ScoreMap,
    pub image_score: f64,
    pub local_map: Option<ScoreMap>,
    pub global_map: Option<ScoreMap>,
}
