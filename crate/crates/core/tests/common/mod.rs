#![allow(dead_code)]

use std::cmp::Ordering;

use candle_core::{DType, Device, Tensor};
use dskd_core::{FeatureMap, FeaturePyramid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-8;
pub const FLOOR: f64 = 1e-12;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn map(values: Vec<f64>, c: usize, h: usize, w: usize) -> FeatureMap {
    FeatureMap::new(Tensor::from_vec(values, (1, c, h, w), &Device::Cpu).unwrap(), 1).unwrap()
}

pub fn random_values(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap {
    map(random_values(rng, c * h * w), c, h, w)
}

/// `(c, h, w)` per level.
pub fn pyramid(levels: [(usize, usize, usize); 3], values: [Vec<f64>; 3]) -> FeaturePyramid {
    let [a, b, c] = values;
    let m = |v: Vec<f64>, (ch, h, w): (usize, usize, usize)| map(v, ch, h, w);
    FeaturePyramid::new([m(a, levels[0]), m(b, levels[1]), m(c, levels[2])]).unwrap()
}

pub fn random_pyramid(rng: &mut ChaCha8Rng, levels: [(usize, usize, usize); 3]) -> FeaturePyramid {
    let values = levels.map(|(c, h, w)| random_values(rng, c * h * w));
    pyramid(levels, values)
}

pub fn flat(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar().unwrap()
}

/// Feature vectors of sample 0 as `[position][channel]`.
pub fn vectors(f: &FeatureMap) -> Vec<Vec<f64>> {
    let (_, c, h, w) = f.tensor.dims4().unwrap();
    let v = flat(&f.tensor);
    (0..h * w).map(|i| (0..c).map(|k| v[k * h * w + i]).collect()).collect()
}

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for k in 0..a.len() {
        dot += a[k] * b[k];
        na += a[k] * a[k];
        nb += b[k] * b[k];
    }
    dot / (na.sqrt().max(EPS) * nb.sqrt().max(EPS))
}

pub fn softmax(xs: &[f64], t: f64) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| ((x - m) / t).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Row `i` is the softmax over `j` of `cos(query_i, key_j) / t`.
pub fn affinity(query: &FeatureMap, keys: &FeatureMap, t: f64) -> Vec<Vec<f64>> {
    let q = vectors(query);
    let k = vectors(keys);
    let mut rows = Vec::new();
    for a in &q {
        let mut sims = Vec::new();
        for b in &k {
            sims.push(cos(a, b));
        }
        rows.push(softmax(&sims, t));
    }
    rows
}

pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    let mut s = 0.0;
    for j in 0..p.len() {
        s += p[j] * (p[j].ln() - q[j].max(FLOOR).ln());
    }
    s
}

/// `T^2 KL(P_T,i || P_S,i)` for every position of sample 0.
pub fn kl_map(teacher: &FeatureMap, student: &FeatureMap, t: f64) -> Vec<f64> {
    let pt = affinity(teacher, teacher, t);
    let ps = affinity(student, teacher, t);
    (0..pt.len()).map(|i| t * t * kl(&pt[i], &ps[i])).collect()
}

pub fn cosine_map(teacher: &FeatureMap, student: &FeatureMap) -> Vec<f64> {
    let a = vectors(teacher);
    let b = vectors(student);
    (0..a.len()).map(|i| 1.0 - cos(&a[i], &b[i])).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn local_loss(t: &FeaturePyramid, s: &FeaturePyramid) -> f64 {
    (0..3).map(|l| mean(&cosine_map(&t.levels[l], &s.levels[l]))).sum()
}

pub fn global_loss(t: &FeaturePyramid, s: &FeaturePyramid, temp: f64) -> f64 {
    (0..3).map(|l| mean(&kl_map(&t.levels[l], &s.levels[l], temp))).sum()
}

/// Wins plus half-ties over all (positive, negative) pairs.
pub fn auroc_pairs(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0usize;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if !labels[i] || labels[j] {
                continue;
            }
            pairs += 1;
            wins += match scores[i].partial_cmp(&scores[j]).unwrap() {
                Ordering::Greater => 1.0,
                Ordering::Equal => 0.5,
                Ordering::Less => 0.0,
            };
        }
    }
    wins / pairs as f64
}
