//! Distillation objectives and their per-pixel score-map forms.
//!
//! Everything here is written against candle tensors so that the same code
//! path serves training (f32, autograd) and verification (f64). Batched
//! feature maps are `(batch, channels, h, w)`; positions are flattened
//! row-major, so position `i` is `(i / w, i % w)`.
//!
//! * local student: `1 - cos(f_T,i, f_S,i)` per position, averaged per level
//!   and summed over the three levels.
//! * global student: for every position `i` the teacher's contextual affinity
//!   is `softmax_j(cos(f_T,i, f_T,j) / T)`; the student's is
//!   `softmax_j(cos(f_S,i, f_T,j) / T)` (student vector against the teacher
//!   map). The score is `T^2 * KL(P_T,i || P_S,i)`.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::backbone::{FeatureMap, FeaturePyramid};
use crate::error::{Error, Result};
use crate::nn::{clamped_norm, log_softmax_last};

/// Lower clamp on feature-vector norms.
pub const NORM_EPS: f64 = 1e-8;
/// Floor on student affinity probabilities inside the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;
/// Default number of affinity rows evaluated at once.
pub const DEFAULT_CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreKind {
    Cosine,
    AffinityKl,
    /// Level maps upsampled and summed for one student.
    Accumulated,
    Fused,
}

/// A dense 2-D grid of anomaly scores, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub kind: ScoreKind,
}

impl ScoreMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>, kind: ScoreKind) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Input(format!(
                "score map {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            values,
            kind,
        })
    }

    pub fn constant(height: usize, width: usize, value: f64, kind: ScoreKind) -> Self {
        Self {
            height,
            width,
            values: vec![value; height * width],
            kind,
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Split a `(batch, h, w)` tensor into one map per sample.
    pub fn from_batch(t: &Tensor, kind: ScoreKind) -> Result<Vec<Self>> {
        let (b, h, w) = t.dims3()?;
        let flat = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        Ok((0..b)
            .map(|i| Self {
                height: h,
                width: w,
                values: flat[i * h * w..(i + 1) * h * w].to_vec(),
                kind,
            })
            .collect())
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t.is_finite() && t > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {t}")));
    }
    Ok(())
}

fn check_same_shape(a: &FeatureMap, b: &FeatureMap) -> Result<()> {
    if a.tensor.dims() != b.tensor.dims() {
        return Err(Error::Input(format!(
            "feature maps differ in shape: {:?} vs {:?}",
            a.tensor.dims(),
            b.tensor.dims()
        )));
    }
    Ok(())
}

/// `1 - cos(f_T,i, f_S,i)` at every position, shape `(batch, h, w)`.
pub fn cosine_score_map(teacher: &FeatureMap, student: &FeatureMap) -> Result<Tensor> {
    check_same_shape(teacher, student)?;
    let t = &teacher.tensor;
    let s = &student.tensor;
    let dot = (t * s)?.sum_keepdim(1)?;
    let denom = (clamped_norm(t, 1, NORM_EPS)? * clamped_norm(s, 1, NORM_EPS)?)?;
    let cos = (dot / denom)?.squeeze(1)?;
    Ok(cos.affine(-1.0, 1.0)?)
}

/// Mean cosine distance of one level (averaged over batch and positions).
pub fn level_local_loss(teacher: &FeatureMap, student: &FeatureMap) -> Result<Tensor> {
    Ok(cosine_score_map(teacher, student)?.mean_all()?)
}

/// Sum over the three levels of the mean cosine distance.
pub fn local_loss(teacher: &FeaturePyramid, student: &FeaturePyramid) -> Result<Tensor> {
    let mut total = level_local_loss(&teacher.levels[0], &student.levels[0])?;
    for l in 1..3 {
        total = (total + level_local_loss(&teacher.levels[l], &student.levels[l])?)?;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AffinitySource {
    Teacher,
    Student,
}

/// Row-stochastic contextual affinities, stored as log-probabilities `(batch, N, N)`.
#[derive(Debug, Clone)]
pub struct AffinityMatrix {
    pub log_probs: Tensor,
    pub temperature: f64,
    pub source: AffinitySource,
    pub height: usize,
    pub width: usize,
}

impl AffinityMatrix {
    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    pub fn probs(&self) -> Result<Tensor> {
        Ok(self.log_probs.exp()?)
    }

    /// Probabilities of one sample as nested rows, in f64.
    pub fn rows(&self, sample: usize) -> Result<Vec<Vec<f64>>> {
        Ok(self
            .probs()?
            .get(sample)?
            .to_dtype(DType::F64)?
            .to_vec2::<f64>()?)
    }
}

/// Channel-normalized vectors, `(batch, C, N)`.
fn unit_columns(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let flat = x.reshape((b, c, h * w))?;
    Ok(flat.broadcast_div(&clamped_norm(&flat, 1, NORM_EPS)?)?)
}

/// Log-affinities of rows `start..start+len` of `query` against every column of `keys`.
fn log_affinity_rows(
    query_unit: &Tensor,
    keys_unit: &Tensor,
    start: usize,
    len: usize,
    temperature: f64,
) -> Result<Tensor> {
    let q = query_unit.narrow(2, start, len)?.transpose(1, 2)?.contiguous()?;
    let sim = q.matmul(keys_unit)?;
    log_softmax_last(&(sim / temperature)?)
}

fn affinity(
    query: &FeatureMap,
    keys: &FeatureMap,
    temperature: f64,
    source: AffinitySource,
) -> Result<AffinityMatrix> {
    check_temperature(temperature)?;
    check_same_shape(query, keys)?;
    let shape = keys.shape();
    let n = shape.positions();
    let log_probs = log_affinity_rows(
        &unit_columns(&query.tensor)?,
        &unit_columns(&keys.tensor)?,
        0,
        n,
        temperature,
    )?;
    Ok(AffinityMatrix {
        log_probs,
        temperature,
        source,
        height: shape.height,
        width: shape.width,
    })
}

/// Contextual affinity of every teacher vector with the whole teacher map.
pub fn teacher_affinity(teacher: &FeatureMap, temperature: f64) -> Result<AffinityMatrix> {
    affinity(teacher, teacher, temperature, AffinitySource::Teacher)
}

/// Contextual affinity of every student vector with the whole *teacher* map.
pub fn student_affinity(
    student: &FeatureMap,
    teacher: &FeatureMap,
    temperature: f64,
) -> Result<AffinityMatrix> {
    affinity(student, teacher, temperature, AffinitySource::Student)
}

/// Row-wise `T^2 * KL(P_T || P_S)` from log-probabilities, `(batch, rows)`.
fn kl_rows(log_pt: &Tensor, log_ps: &Tensor, temperature: f64) -> Result<Tensor> {
    let log_ps = log_ps.maximum(PROB_FLOOR.ln())?;
    let kl = (log_pt.exp()? * (log_pt - log_ps)?)?.sum(D::Minus1)?;
    Ok((kl * (temperature * temperature))?)
}

/// Per-position KL divergence between two affinity matrices, shape `(batch, h, w)`.
pub fn affinity_kl_map(teacher: &AffinityMatrix, student: &AffinityMatrix) -> Result<Tensor> {
    if teacher.temperature != student.temperature {
        return Err(Error::Contract(format!(
            "affinity temperatures differ: {} vs {}",
            teacher.temperature, student.temperature
        )));
    }
    if teacher.log_probs.dims() != student.log_probs.dims() {
        return Err(Error::Input(format!(
            "affinity matrices differ in shape: {:?} vs {:?}",
            teacher.log_probs.dims(),
            student.log_probs.dims()
        )));
    }
    let b = teacher.log_probs.dim(0)?;
    let kl = kl_rows(&teacher.log_probs, &student.log_probs, teacher.temperature)?;
    Ok(kl.reshape((b, teacher.height, teacher.width))?)
}

/// Affinity-KL score map computed one affinity row at a time, so the `N x N`
/// matrices never exist. Identical to
/// `affinity_kl_map(teacher_affinity(..), student_affinity(..))`.
///
/// `chunk` bounds the rows held at once; the fused kernel streams single rows,
/// so any positive value gives the same result.
pub fn affinity_kl_map_chunked(
    teacher: &FeatureMap,
    student: &FeatureMap,
    temperature: f64,
    chunk: usize,
) -> Result<Tensor> {
    check_temperature(temperature)?;
    check_same_shape(teacher, student)?;
    if chunk == 0 {
        return Err(Error::Config("affinity chunk size must be positive".into()));
    }
    let shape = teacher.shape();
    let t_unit = unit_columns(&teacher.tensor)?;
    let s_unit = unit_columns(&student.tensor)?;
    let kl = crate::ops::affinity_kl_features(&t_unit, &s_unit, temperature, PROB_FLOOR)?;
    Ok(kl.reshape((teacher.batch(), shape.height, shape.width))?)
}

/// Sum over the three levels of the mean affinity KL.
pub fn global_loss(
    teacher: &FeaturePyramid,
    student: &FeaturePyramid,
    temperature: f64,
    chunk: usize,
) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for l in 0..3 {
        let m = affinity_kl_map_chunked(&teacher.levels[l], &student.levels[l], temperature, chunk)?
            .mean_all()?;
        total = Some(match total {
            Some(t) => (t + m)?,
            None => m,
        });
    }
    Ok(total.expect("three levels"))
}
