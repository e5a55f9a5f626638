//! Training and evaluation of the two students against a frozen teacher.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use candle_core::Tensor;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{build_teacher, FeatureMap, FeaturePyramid, ImageTensor, TeacherNet};
use crate::config::TrainConfig;
use crate::data::DatasetSplit;
use crate::decoders::StudentRole;
use crate::error::{Error, Result};
use crate::losses::ScoreMap;
use crate::metrics::{category_metrics, EvalRecord, MetricsReport};
use crate::nn::{fork_rng, Mode};
use crate::scoring::{combine, image_score, resize_bilinear, FusedResult, Normalizer};
use crate::student::Student;

pub const DEFAULT_FPR_LIMIT: f64 = 0.05;
pub const DEFAULT_NUM_THRESHOLDS: usize = 512;
const ADAM_EPS: f64 = 1e-8;
/// Teacher features for the whole training split are cached when they fit in this budget.
const FEATURE_CACHE_BYTES: usize = 1 << 30;

/// Mean loss of one student over one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub student: StudentRole,
    pub epoch: usize,
    pub mean_loss: f64,
    pub batches: usize,
}

/// Digest of the loss history, one JSON line per record.
pub fn log_digest(log: &[EpochRecord]) -> Result<String> {
    let mut h = Sha256::new();
    for r in log {
        h.update(serde_json::to_string(r)?.as_bytes());
        h.update(b"\n");
    }
    Ok(hex::encode(h.finalize()))
}

/// A trained model: teacher, students, normalization statistics and provenance.
#[derive(Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub teacher: TeacherNet,
    pub local: Option<Student>,
    pub global: Option<Student>,
    pub normalizer: Normalizer,
    pub log: Vec<EpochRecord>,
}

impl Checkpoint {
    /// Teacher and freshly initialized students for `config`.
    pub fn initialize(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let teacher = build_teacher(&config.teacher_config()?, config.seed)?;
        Self::with_teacher(config, teacher)
    }

    /// Students initialized from `config.seed` around an already built teacher.
    pub fn with_teacher(config: &TrainConfig, teacher: TeacherNet) -> Result<Self> {
        config.validate()?;
        let shapes = *teacher.stage_shapes();
        let mut master = ChaCha8Rng::seed_from_u64(config.seed);
        // both streams are always drawn so a student's init does not depend on the selection
        let mut local_rng = fork_rng(&mut master);
        let mut global_rng = fork_rng(&mut master);
        let local = config
            .has_student(StudentRole::Local)
            .then(|| Student::new(StudentRole::Local, shapes, None, &mut local_rng))
            .transpose()?;
        let global = config
            .has_student(StudentRole::Global)
            .then(|| Student::new(StudentRole::Global, shapes, config.gccb(), &mut global_rng))
            .transpose()?;
        Ok(Self {
            config: config.clone(),
            teacher,
            local,
            global,
            normalizer: Normalizer::default(),
            log: Vec::new(),
        })
    }

    pub fn student(&self, role: StudentRole) -> Option<&Student> {
        match role {
            StudentRole::Local => self.local.as_ref(),
            StudentRole::Global => self.global.as_ref(),
        }
    }

    pub fn log_digest(&self) -> Result<String> {
        log_digest(&self.log)
    }

    fn to_tensors(&self, images: &[&RgbImage]) -> Vec<ImageTensor> {
        images
            .iter()
            .map(|i| ImageTensor::from_rgb(i, self.config.image_size))
            .collect()
    }

    /// Accumulated per-student maps at model resolution, one entry per image.
    pub fn score_maps(&self, images: &[&RgbImage]) -> Result<Vec<StudentMaps>> {
        let tensors = self.to_tensors(images);
        let mut out = Vec::with_capacity(images.len());
        for chunk in tensors.chunks(self.config.batch_size) {
            let refs: Vec<&ImageTensor> = chunk.iter().collect();
            let pyr = self.teacher.extract_batch(&refs, false)?.pyramid;
            let mut maps = [None, None];
            for (k, role) in [StudentRole::Local, StudentRole::Global].into_iter().enumerate() {
                if let Some(s) = self.student(role) {
                    maps[k] = Some(s.accumulated_maps(
                        &pyr,
                        self.config.temperature,
                        self.config.affinity_chunk_size,
                        self.config.image_size,
                    )?);
                }
            }
            let [l, g] = maps;
            for i in 0..chunk.len() {
                out.push(StudentMaps {
                    local: l.as_ref().map(|m| m[i].clone()),
                    global: g.as_ref().map(|m| m[i].clone()),
                });
            }
        }
        Ok(out)
    }

    /// Fit normalization statistics of every trained student on `images`.
    pub fn fit_normalizer(&mut self, images: &[&RgbImage]) -> Result<()> {
        let maps = self.score_maps(images)?;
        let mut norm = Normalizer::default();
        for role in [StudentRole::Local, StudentRole::Global] {
            if self.student(role).is_some() {
                let m: Vec<ScoreMap> = maps
                    .iter()
                    .map(|s| s.get(role).cloned().expect("student present"))
                    .collect();
                norm.fit_student(role, &m)?;
            }
        }
        self.normalizer = norm;
        Ok(())
    }

    /// Normalize, combine according to `mode`, and score one image.
    pub fn fuse(&self, name: &str, maps: &StudentMaps, mode: ScoreMode) -> Result<FusedResult> {
        let need = |role: StudentRole| -> Result<&ScoreMap> {
            maps.get(role).ok_or_else(|| {
                Error::State(format!(
                    "{mode} scoring needs the {} student, which this checkpoint does not contain",
                    role.name()
                ))
            })
        };
        let (anomaly_map, local_map, global_map) = match mode {
            ScoreMode::Local => {
                let l = self.normalizer.normalize(StudentRole::Local, need(StudentRole::Local)?)?;
                (l.clone(), Some(l), None)
            }
            ScoreMode::Global => {
                let g = self.normalizer.normalize(StudentRole::Global, need(StudentRole::Global)?)?;
                (g.clone(), None, Some(g))
            }
            ScoreMode::Combined => {
                let (l, g) = (need(StudentRole::Local)?, need(StudentRole::Global)?);
                (
                    combine(l, g, &self.normalizer)?,
                    Some(self.normalizer.normalize(StudentRole::Local, l)?),
                    Some(self.normalizer.normalize(StudentRole::Global, g)?),
                )
            }
        };
        Ok(FusedResult {
            name: name.to_string(),
            image_score: image_score(&anomaly_map, self.config.gaussian_sigma)?,
            anomaly_map,
            local_map,
            global_map,
        })
    }

    pub fn check_mode(&self, mode: ScoreMode) -> Result<()> {
        for role in mode.roles() {
            if self.student(*role).is_none() {
                return Err(Error::State(format!(
                    "{mode} scoring needs the {} student, which this checkpoint does not contain",
                    role.name()
                )));
            }
            if !self.normalizer.is_fitted(*role) {
                return Err(Error::State(format!(
                    "no normalization statistics for the {} student",
                    role.name()
                )));
            }
        }
        Ok(())
    }
}

/// Accumulated maps of the students present in a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentMaps {
    pub local: Option<ScoreMap>,
    pub global: Option<ScoreMap>,
}

impl StudentMaps {
    pub fn get(&self, role: StudentRole) -> Option<&ScoreMap> {
        match role {
            StudentRole::Local => self.local.as_ref(),
            StudentRole::Global => self.global.as_ref(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    Local,
    Global,
    Combined,
}

impl ScoreMode {
    pub fn roles(self) -> &'static [StudentRole] {
        match self {
            Self::Local => &[StudentRole::Local],
            Self::Global => &[StudentRole::Global],
            Self::Combined => &[StudentRole::Local, StudentRole::Global],
        }
    }
}

impl fmt::Display for ScoreMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Local => "local",
            Self::Global => "global",
            Self::Combined => "combined",
        })
    }
}

impl FromStr for ScoreMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "local" => Ok(Self::Local),
            "global" => Ok(Self::Global),
            "combined" => Ok(Self::Combined),
            other => Err(Error::Config(format!(
                "unknown scoring mode `{other}` (expected local, global or combined)"
            ))),
        }
    }
}

/// Teacher features for the training images, cached when small enough.
struct FeatureSource<'a> {
    teacher: &'a TeacherNet,
    images: Vec<ImageTensor>,
    cache: Option<[Tensor; 3]>,
}

impl<'a> FeatureSource<'a> {
    fn new(teacher: &'a TeacherNet, images: Vec<ImageTensor>, batch: usize) -> Result<Self> {
        let per_image: usize = teacher.stage_shapes()[..3]
            .iter()
            .map(|s| s.positions() * s.channels * 4)
            .sum();
        let mut src = Self {
            teacher,
            images,
            cache: None,
        };
        if per_image * src.images.len() <= FEATURE_CACHE_BYTES {
            let mut parts: [Vec<Tensor>; 3] = Default::default();
            for chunk in src.images.chunks(batch) {
                let refs: Vec<&ImageTensor> = chunk.iter().collect();
                let pyr = teacher.extract_batch(&refs, false)?.pyramid;
                for (l, p) in parts.iter_mut().enumerate() {
                    p.push(pyr.levels[l].tensor.clone());
                }
            }
            let [a, b, c] = parts;
            src.cache = Some([Tensor::cat(&a, 0)?, Tensor::cat(&b, 0)?, Tensor::cat(&c, 0)?]);
        }
        Ok(src)
    }

    fn batch(&self, idx: &[usize]) -> Result<FeaturePyramid> {
        match &self.cache {
            Some(levels) => {
                let ids: Vec<u32> = idx.iter().map(|&i| i as u32).collect();
                let ids = Tensor::new(ids.as_slice(), levels[0].device())?;
                let sel = |l: usize| -> Result<FeatureMap> {
                    FeatureMap::new(levels[l].index_select(&ids, 0)?, l + 1)
                };
                FeaturePyramid::new([sel(0)?, sel(1)?, sel(2)?])
            }
            None => {
                let refs: Vec<&ImageTensor> = idx.iter().map(|&i| &self.images[i]).collect();
                Ok(self.teacher.extract_batch(&refs, false)?.pyramid)
            }
        }
    }
}

struct StudentRun<'a> {
    student: &'a Student,
    opt: AdamW,
    loss_sum: f64,
    batches: usize,
}

impl<'a> StudentRun<'a> {
    fn new(student: &'a Student, cfg: &TrainConfig) -> Result<Self> {
        let params = ParamsAdamW {
            lr: cfg.learning_rate,
            beta1: cfg.adam_betas[0],
            beta2: cfg.adam_betas[1],
            eps: ADAM_EPS,
            weight_decay: 0.0,
        };
        Ok(Self {
            student,
            opt: AdamW::new(student.store().trainable(), params)?,
            loss_sum: 0.0,
            batches: 0,
        })
    }

    fn step(&mut self, feats: &FeaturePyramid, cfg: &TrainConfig, epoch: usize) -> Result<()> {
        let out = self.student.forward(feats, Mode::Train)?;
        let loss = self
            .student
            .loss(feats, &out, cfg.temperature, cfg.affinity_chunk_size)?;
        let v = loss.to_scalar::<f32>()? as f64;
        if !v.is_finite() {
            return Err(Error::Divergence {
                student: self.student.role().name().into(),
                epoch,
                batch: self.batches + 1,
                loss: v,
            });
        }
        self.opt.backward_step(&loss)?;
        self.loss_sum += v;
        self.batches += 1;
        Ok(())
    }

    fn finish_epoch(&mut self, epoch: usize) -> EpochRecord {
        let r = EpochRecord {
            student: self.student.role(),
            epoch,
            mean_loss: self.loss_sum / self.batches as f64,
            batches: self.batches,
        };
        self.loss_sum = 0.0;
        self.batches = 0;
        r
    }
}

/// Progress callback: each record with the wall time since training started.
pub type Observer<'o> = &'o mut dyn FnMut(&EpochRecord, f64);

pub fn train(dataset: &DatasetSplit, config: &TrainConfig) -> Result<Checkpoint> {
    train_with(dataset, config, &mut |_, _| {})
}

/// Train the selected students, then fit the normalizer on the validation split
/// (the training split when validation is empty).
pub fn train_with(dataset: &DatasetSplit, config: &TrainConfig, observer: Observer<'_>) -> Result<Checkpoint> {
    if dataset.train.is_empty() {
        return Err(Error::Input(format!(
            "category {} has an empty training split",
            dataset.category
        )));
    }
    let mut ckpt = Checkpoint::initialize(config)?;
    let start = Instant::now();
    let n = dataset.train.len();
    let images: Vec<ImageTensor> = dataset
        .train
        .iter()
        .map(|s| ImageTensor::from_rgb(&s.image, config.image_size))
        .collect();
    let source = FeatureSource::new(&ckpt.teacher, images, config.batch_size)?;

    // one fixed order per epoch, shared by both students
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6f72_6465_725f_7273);
    let orders: Vec<Vec<usize>> = (0..config.epochs)
        .map(|_| {
            let mut o: Vec<usize> = (0..n).collect();
            o.shuffle(&mut order_rng);
            o
        })
        .collect();

    let mut runs: Vec<StudentRun> = [StudentRole::Local, StudentRole::Global]
        .into_iter()
        .filter_map(|r| ckpt.student(r))
        .map(|s| StudentRun::new(s, config))
        .collect::<Result<_>>()?;
    let mut log = Vec::new();
    let mut emit = |r: EpochRecord, log: &mut Vec<EpochRecord>| {
        log::info!(
            "{} epoch {}/{}: loss {:.6}",
            r.student.name(),
            r.epoch,
            config.epochs,
            r.mean_loss
        );
        observer(&r, start.elapsed().as_secs_f64());
        log.push(r);
    };

    if config.simultaneous {
        for (e, order) in orders.iter().enumerate() {
            for idx in order.chunks(config.batch_size) {
                let feats = source.batch(idx)?;
                for run in runs.iter_mut() {
                    run.step(&feats, config, e + 1)?;
                }
            }
            for run in runs.iter_mut() {
                emit(run.finish_epoch(e + 1), &mut log);
            }
        }
    } else {
        for run in runs.iter_mut() {
            for (e, order) in orders.iter().enumerate() {
                for idx in order.chunks(config.batch_size) {
                    let feats = source.batch(idx)?;
                    run.step(&feats, config, e + 1)?;
                }
                emit(run.finish_epoch(e + 1), &mut log);
            }
        }
    }
    drop(runs);
    drop(source);
    ckpt.log = log;

    let fit_on = if dataset.validation.is_empty() {
        log::warn!("validation split is empty; fitting normalization on the training split");
        &dataset.train
    } else {
        &dataset.validation
    };
    let imgs: Vec<&RgbImage> = fit_on.iter().map(|s| &s.image).collect();
    ckpt.fit_normalizer(&imgs)?;
    Ok(ckpt)
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub results: Vec<FusedResult>,
    /// Records at ground-truth resolution, as fed to the metrics.
    pub records: Vec<EvalRecord>,
}

pub fn evaluate(ckpt: &Checkpoint, dataset: &DatasetSplit, mode: ScoreMode) -> Result<Evaluation> {
    evaluate_with(ckpt, dataset, mode, DEFAULT_FPR_LIMIT, DEFAULT_NUM_THRESHOLDS)
}

/// Score every test image and compute the report for `mode`.
///
/// Anomaly maps are resized bilinearly to the ground-truth resolution before
/// the localization metric; image scores are taken at model resolution.
pub fn evaluate_with(
    ckpt: &Checkpoint,
    dataset: &DatasetSplit,
    mode: ScoreMode,
    fpr_limit: f64,
    num_thresholds: usize,
) -> Result<Evaluation> {
    ckpt.check_mode(mode)?;
    let images: Vec<&RgbImage> = dataset.test.iter().map(|t| &t.image).collect();
    let maps = ckpt.score_maps(&images)?;
    let mut results = Vec::with_capacity(maps.len());
    let mut records = Vec::with_capacity(maps.len());
    for (t, m) in dataset.test.iter().zip(&maps) {
        let fused = ckpt.fuse(&t.name, m, mode)?;
        let (h, w) = (t.image.height() as usize, t.image.width() as usize);
        let anomaly_map = if (fused.anomaly_map.height, fused.anomaly_map.width) == (h, w) {
            fused.anomaly_map.clone()
        } else {
            resize_bilinear(&fused.anomaly_map, h, w)
        };
        records.push(EvalRecord {
            name: format!("{}/{}", t.label.dir_name(), t.name),
            image_score: fused.image_score,
            label: t.label,
            anomaly_map,
            regions: t.regions.clone(),
        });
        results.push(FusedResult {
            name: format!("{}/{}", t.label.dir_name(), t.name),
            ..fused
        });
    }
    let cat = category_metrics(&dataset.category, &records, fpr_limit, num_thresholds)?;
    let report = MetricsReport::from_categories(&mode.to_string(), fpr_limit, vec![cat])?;
    Ok(Evaluation {
        report,
        results,
        records,
    })
}
