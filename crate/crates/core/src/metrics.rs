//! Image-level AUROC and pixel-level saturated per-region overlap (sPRO).

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::ScoreMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DefectType {
    Structural,
    Logical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Good,
    Structural,
    Logical,
}

impl Label {
    pub fn is_anomalous(self) -> bool {
        self != Label::Good
    }

    pub fn dir_name(self) -> &'static str {
        match self {
            Label::Good => "good",
            Label::Structural => "structural_anomalies",
            Label::Logical => "logical_anomalies",
        }
    }

    pub fn from_dir_name(name: &str) -> Option<Self> {
        match name {
            "good" => Some(Label::Good),
            "structural_anomalies" => Some(Label::Structural),
            "logical_anomalies" => Some(Label::Logical),
            _ => None,
        }
    }
}

impl From<DefectType> for Label {
    fn from(t: DefectType) -> Self {
        match t {
            DefectType::Structural => Label::Structural,
            DefectType::Logical => Label::Logical,
        }
    }
}

/// A ground-truth defect: a binary mask and the overlap area at which credit saturates.
#[derive(Debug, Clone, PartialEq)]
pub struct DefectRegion {
    pub height: usize,
    pub width: usize,
    pub mask: Vec<bool>,
    pub saturation_threshold: f64,
    pub defect_type: DefectType,
    pub defect_name: String,
}

impl DefectRegion {
    pub fn new(
        height: usize,
        width: usize,
        mask: Vec<bool>,
        saturation_threshold: f64,
        defect_type: DefectType,
        defect_name: impl Into<String>,
    ) -> Result<Self> {
        if mask.len() != height * width {
            return Err(Error::Input(format!(
                "mask has {} pixels, expected {}",
                mask.len(),
                height * width
            )));
        }
        let area = mask.iter().filter(|m| **m).count();
        if area == 0 {
            return Err(Error::Input("defect mask is empty".into()));
        }
        if !(saturation_threshold > 0.0 && saturation_threshold <= area as f64) {
            return Err(Error::Input(format!(
                "saturation threshold {saturation_threshold} outside (0, {area}]"
            )));
        }
        Ok(Self {
            height,
            width,
            mask,
            saturation_threshold,
            defect_type,
            defect_name: defect_name.into(),
        })
    }

    pub fn area(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

/// One scored test image with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub name: String,
    pub image_score: f64,
    pub label: Label,
    pub anomaly_map: ScoreMap,
    pub regions: Vec<DefectRegion>,
}

/// Rank-based AUROC with mid-ranks for ties: `P(score_pos > score_neg) + P(tie) / 2`.
///
/// Undefined when a class is missing or when every score is identical.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Input("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|l| **l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUROC needs both classes (positives {n_pos}, negatives {n_neg})"
        )));
    }
    if scores.iter().all(|s| *s == scores[0]) {
        return Err(Error::UndefinedMetric(
            "AUROC undefined: every score is identical".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mid = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            if labels[k] {
                rank_sum_pos += mid;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub fpr: f64,
    pub spro: f64,
}

enum PixelClass {
    Normal,
    Region(usize),
}

struct SproInputs {
    // (score, class), sorted by descending score
    entries: Vec<(f64, PixelClass)>,
    saturation: Vec<f64>,
    normal_total: usize,
    pooled: Vec<f64>,
}

fn collect_spro_inputs(records: &[EvalRecord]) -> Result<SproInputs> {
    let mut entries = Vec::new();
    let mut saturation = Vec::new();
    let mut normal_total = 0;
    let mut pooled = Vec::new();
    for r in records {
        let map = &r.anomaly_map;
        if map.values.iter().any(|v| v.is_nan()) {
            return Err(Error::Input(format!("anomaly map of {} contains NaN", r.name)));
        }
        let mut covered = vec![false; map.values.len()];
        for reg in &r.regions {
            if (reg.height, reg.width) != (map.height, map.width) {
                return Err(Error::Input(format!(
                    "{}: mask {}x{} does not match map {}x{}",
                    r.name, reg.height, reg.width, map.height, map.width
                )));
            }
            let k = saturation.len();
            saturation.push(reg.saturation_threshold);
            for (p, _) in reg.mask.iter().enumerate().filter(|(_, m)| **m) {
                covered[p] = true;
                entries.push((map.values[p], PixelClass::Region(k)));
            }
        }
        for (p, v) in map.values.iter().enumerate() {
            if !covered[p] {
                normal_total += 1;
                entries.push((*v, PixelClass::Normal));
            }
        }
        pooled.extend_from_slice(&map.values);
    }
    if saturation.is_empty() {
        return Err(Error::UndefinedMetric("sPRO needs at least one defect region".into()));
    }
    if normal_total == 0 {
        return Err(Error::UndefinedMetric(
            "sPRO false-positive rate needs anomaly-free pixels".into(),
        ));
    }
    entries.sort_by(|a, b| b.0.total_cmp(&a.0));
    Ok(SproInputs {
        entries,
        saturation,
        normal_total,
        pooled,
    })
}

/// Binarization thresholds: every distinct score when there are at most
/// `count` of them, otherwise `count` evenly spaced quantiles of the pooled
/// scores. Returned in descending order.
fn thresholds(mut pooled: Vec<f64>, count: usize) -> Vec<f64> {
    pooled.sort_by(|a, b| b.total_cmp(a));
    let mut unique = pooled.clone();
    unique.dedup();
    if unique.len() <= count {
        return unique;
    }
    let n = pooled.len();
    let mut out: Vec<f64> = (0..count)
        .map(|i| pooled[((i as f64) * (n - 1) as f64 / (count - 1) as f64).round() as usize])
        .collect();
    out.dedup();
    out
}

/// sPRO / FPR curve over a descending threshold sweep, sorted by ascending FPR.
///
/// Pixels with score `>= t` are predicted anomalous. sPRO is the mean over all
/// regions of `min(overlap / saturation_threshold, 1)`; FPR is the predicted
/// fraction of pixels outside every mask. The curve starts at `(0, 0)` (empty
/// prediction) and ends at the lowest threshold, where everything is predicted.
pub fn spro_curve(records: &[EvalRecord], num_thresholds: usize) -> Result<Vec<CurvePoint>> {
    if num_thresholds < 2 {
        return Err(Error::Config("num_thresholds must be at least 2".into()));
    }
    let inputs = collect_spro_inputs(records)?;
    let ths = thresholds(inputs.pooled, num_thresholds);
    let k = inputs.saturation.len() as f64;
    let mut overlap = vec![0usize; inputs.saturation.len()];
    let mut credit = 0.0;
    let mut fp = 0usize;
    let mut next = 0;
    let mut curve = Vec::with_capacity(ths.len() + 1);
    curve.push(CurvePoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        spro: 0.0,
    });
    for t in ths {
        while next < inputs.entries.len() && inputs.entries[next].0 >= t {
            match inputs.entries[next].1 {
                PixelClass::Normal => fp += 1,
                PixelClass::Region(r) => {
                    let sat = inputs.saturation[r];
                    let before = (overlap[r] as f64 / sat).min(1.0);
                    overlap[r] += 1;
                    credit += (overlap[r] as f64 / sat).min(1.0) - before;
                }
            }
            next += 1;
        }
        curve.push(CurvePoint {
            threshold: t,
            fpr: fp as f64 / inputs.normal_total as f64,
            spro: (credit / k).min(1.0),
        });
    }
    Ok(curve)
}

/// Single `(fpr, spro)` operating point at threshold `t`, computed directly.
pub fn spro_at_threshold(records: &[EvalRecord], t: f64) -> Result<(f64, f64)> {
    let mut fp = 0usize;
    let mut normal = 0usize;
    let mut credit = 0.0;
    let mut regions = 0usize;
    for r in records {
        let pred: Vec<bool> = r.anomaly_map.values.iter().map(|v| *v >= t).collect();
        let mut covered = vec![false; pred.len()];
        for reg in &r.regions {
            regions += 1;
            let hit = reg
                .mask
                .iter()
                .zip(&pred)
                .filter(|(m, p)| **m && **p)
                .count();
            credit += (hit as f64 / reg.saturation_threshold).min(1.0);
            for (c, m) in covered.iter_mut().zip(&reg.mask) {
                *c |= *m;
            }
        }
        for (c, p) in covered.iter().zip(&pred) {
            if !c {
                normal += 1;
                fp += *p as usize;
            }
        }
    }
    if regions == 0 || normal == 0 {
        return Err(Error::UndefinedMetric(
            "sPRO needs defect regions and anomaly-free pixels".into(),
        ));
    }
    Ok((fp as f64 / normal as f64, credit / regions as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuSpro {
    /// Normalized area in `[0, 1]`.
    pub value: f64,
    /// True when the curve stopped short of the limit and was extended flat.
    pub extrapolated: bool,
}

/// Area under the sPRO curve on `[0, fpr_limit]`, divided by `fpr_limit`.
///
/// Linear interpolation between points; left of the first point the first
/// sPRO value is held, right of the last point the last one is.
pub fn au_spro(curve: &[CurvePoint], fpr_limit: f64) -> Result<AuSpro> {
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(Error::Config(format!("fpr limit must be in (0, 1], got {fpr_limit}")));
    }
    if curve.is_empty() {
        return Err(Error::UndefinedMetric("empty sPRO curve".into()));
    }
    if curve.windows(2).any(|w| w[1].fpr < w[0].fpr) {
        return Err(Error::Contract("sPRO curve must be sorted by FPR".into()));
    }
    let mut area = 0.0;
    let mut prev = CurvePoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        spro: curve[0].spro,
    };
    for p in curve {
        if p.fpr >= fpr_limit {
            let span = p.fpr - prev.fpr;
            let at_limit = if span > 0.0 {
                prev.spro + (p.spro - prev.spro) * (fpr_limit - prev.fpr) / span
            } else {
                p.spro
            };
            area += 0.5 * (prev.spro + at_limit) * (fpr_limit - prev.fpr);
            return Ok(AuSpro {
                value: (area / fpr_limit).clamp(0.0, 1.0),
                extrapolated: false,
            });
        }
        area += 0.5 * (prev.spro + p.spro) * (p.fpr - prev.fpr);
        prev = *p;
    }
    log::warn!(
        "sPRO curve ends at FPR {} below the limit {fpr_limit}; extending with sPRO {}",
        prev.fpr,
        prev.spro
    );
    area += prev.spro * (fpr_limit - prev.fpr);
    Ok(AuSpro {
        value: (area / fpr_limit).clamp(0.0, 1.0),
        extrapolated: true,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubsetMetrics {
    pub structural: f64,
    pub logical: f64,
    pub mean: f64,
}

impl SubsetMetrics {
    pub fn new(structural: f64, logical: f64) -> Self {
        Self {
            structural,
            logical,
            mean: 0.5 * (structural + logical),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub category: String,
    pub auroc: SubsetMetrics,
    pub au_spro: SubsetMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: String,
    pub fpr_limit: f64,
    /// Averages over categories.
    pub auroc: SubsetMetrics,
    pub au_spro: SubsetMetrics,
    pub categories: Vec<CategoryMetrics>,
}

fn subset(records: &[EvalRecord], defect: Label) -> Vec<EvalRecord> {
    records
        .iter()
        .filter(|r| r.label == Label::Good || r.label == defect)
        .cloned()
        .collect()
}

/// AUROC and AU-sPRO on {good vs structural} and {good vs logical}.
pub fn category_metrics(
    category: &str,
    records: &[EvalRecord],
    fpr_limit: f64,
    num_thresholds: usize,
) -> Result<CategoryMetrics> {
    let mut auroc_v = [0.0; 2];
    let mut spro_v = [0.0; 2];
    for (i, label) in [Label::Structural, Label::Logical].into_iter().enumerate() {
        let recs = subset(records, label);
        let tag = format!("{category}/good-vs-{}", label.dir_name());
        let scores: Vec<f64> = recs.iter().map(|r| r.image_score).collect();
        let labels: Vec<bool> = recs.iter().map(|r| r.label.is_anomalous()).collect();
        auroc_v[i] = auroc(&scores, &labels).map_err(|e| match e {
            Error::UndefinedMetric(m) => Error::UndefinedMetric(format!("{tag}: {m}")),
            other => other,
        })?;
        let curve = spro_curve(&recs, num_thresholds).map_err(|e| match e {
            Error::UndefinedMetric(m) => Error::UndefinedMetric(format!("{tag}: {m}")),
            other => other,
        })?;
        let a = au_spro(&curve, fpr_limit)?;
        if a.extrapolated {
            log::warn!("{tag}: sPRO curve extrapolated to the FPR limit");
        }
        spro_v[i] = a.value;
    }
    Ok(CategoryMetrics {
        category: category.to_string(),
        auroc: SubsetMetrics::new(auroc_v[0], auroc_v[1]),
        au_spro: SubsetMetrics::new(spro_v[0], spro_v[1]),
    })
}

impl MetricsReport {
    pub fn from_categories(mode: &str, fpr_limit: f64, categories: Vec<CategoryMetrics>) -> Result<Self> {
        if categories.is_empty() {
            return Err(Error::Contract("report needs at least one category".into()));
        }
        let n = categories.len() as f64;
        let avg = |f: &dyn Fn(&CategoryMetrics) -> (f64, f64)| {
            let (s, l) = categories
                .iter()
                .map(f)
                .fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
            SubsetMetrics::new(s / n, l / n)
        };
        Ok(Self {
            mode: mode.to_string(),
            fpr_limit,
            auroc: avg(&|c| (c.auroc.structural, c.auroc.logical)),
            au_spro: avg(&|c| (c.au_spro.structural, c.au_spro.logical)),
            categories,
        })
    }

    /// The six headline numbers: AUROC (structural, logical, mean) then AU-sPRO.
    pub fn headline(&self) -> [f64; 6] {
        [
            self.auroc.structural,
            self.auroc.logical,
            self.auroc.mean,
            self.au_spro.structural,
            self.au_spro.logical,
            self.au_spro.mean,
        ]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Long-format table with columns `category, split, metric, value`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["category", "split", "metric", "value"])?;
        let spro_name = format!("au_spro@{}", self.fpr_limit);
        let rows = self
            .categories
            .iter()
            .map(|c| (c.category.as_str(), &c.auroc, &c.au_spro))
            .chain(std::iter::once(("mean", &self.auroc, &self.au_spro)));
        for (cat, a, s) in rows {
            for (metric, m) in [("auroc", a), (spro_name.as_str(), s)] {
                for (split, v) in [
                    ("structural", m.structural),
                    ("logical", m.logical),
                    ("mean", m.mean),
                ] {
                    w.write_record([cat, split, metric, &format!("{v}")])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}
