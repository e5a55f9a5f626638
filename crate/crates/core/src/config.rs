//! Training configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{TeacherConfig, TeacherKind};
use crate::decoders::StudentRole;
use crate::error::{Error, Result};
use crate::losses::DEFAULT_CHUNK;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_betas: [f64; 2],
    pub epochs: usize,
    pub batch_size: usize,
    pub image_size: usize,
    pub temperature: f64,
    /// Width of the condensed global vector.
    pub gccb_channels: usize,
    /// Disable to feed the trainable stage 4 straight into the global decoder.
    pub use_gccb: bool,
    pub gaussian_sigma: f64,
    pub seed: u64,
    pub teacher: TeacherKind,
    pub teacher_weights: Option<PathBuf>,
    pub students: Vec<StudentRole>,
    /// Rows of the affinity matrix processed at once.
    pub affinity_chunk_size: usize,
    /// Step both students on every batch instead of local-then-global.
    pub simultaneous: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.005,
            adam_betas: [0.5, 0.999],
            epochs: 200,
            batch_size: 16,
            image_size: 256,
            temperature: 1.0,
            gccb_channels: 1024,
            use_gccb: true,
            gaussian_sigma: 4.0,
            seed: 0,
            teacher: TeacherKind::PretrainedWideResidual,
            teacher_weights: None,
            students: vec![StudentRole::Local, StudentRole::Global],
            affinity_chunk_size: DEFAULT_CHUNK,
            simultaneous: false,
        }
    }
}

impl TrainConfig {
    /// Desk-scale preset: tiny seeded teacher on 64x64 images, 20 epochs.
    ///
    /// The smoothing width keeps the same ratio to the image side as the full-size default.
    pub fn toy() -> Self {
        Self {
            epochs: 20,
            image_size: 64,
            gccb_channels: 64,
            gaussian_sigma: 1.0,
            teacher: TeacherKind::TinySeeded,
            ..Self::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn has_student(&self, role: StudentRole) -> bool {
        self.students.contains(&role)
    }

    /// Condensing width, or `None` when the block is disabled.
    pub fn gccb(&self) -> Option<usize> {
        self.use_gccb.then_some(self.gccb_channels)
    }

    pub fn teacher_config(&self) -> Result<TeacherConfig> {
        Ok(match self.teacher {
            TeacherKind::TinySeeded => TeacherConfig::tiny(self.image_size),
            TeacherKind::PretrainedWideResidual => {
                let path = self.teacher_weights.clone().ok_or_else(|| {
                    Error::Config("the pretrained teacher needs `teacher_weights`".into())
                })?;
                TeacherConfig::pretrained(self.image_size, path)
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("temperature", self.temperature),
            ("adam_betas[0]", self.adam_betas[0]),
            ("adam_betas[1]", self.adam_betas[1]),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.adam_betas.iter().any(|b| *b >= 1.0) {
            return Err(Error::Config(format!(
                "adam_betas must lie in (0, 1), got {:?}",
                self.adam_betas
            )));
        }
        if !(self.gaussian_sigma >= 0.0 && self.gaussian_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "gaussian_sigma must be non-negative, got {}",
                self.gaussian_sigma
            )));
        }
        for (name, v) in [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("image_size", self.image_size),
            ("gccb_channels", self.gccb_channels),
            ("affinity_chunk_size", self.affinity_chunk_size),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.students.is_empty() {
            return Err(Error::Config("at least one student must be selected".into()));
        }
        let mut seen = self.students.clone();
        seen.dedup();
        if seen.len() != self.students.len() || (seen.len() == 2 && seen[0] == seen[1]) {
            return Err(Error::Config("students are listed twice".into()));
        }
        Ok(())
    }
}
