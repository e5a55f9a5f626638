use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dskd_core::{Error, Result, ScoreMode, StudentRole, TeacherKind, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "dskd", version, about = "Dual-student knowledge distillation for anomaly detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the selected students and write a checkpoint.
    Train(TrainArgs),
    /// Score the test split and report AUROC and AU-sPRO.
    Eval(EvalArgs),
    /// Export color-mapped anomaly maps for the test split.
    Visualize(VisualizeArgs),
    /// Write a synthetic grid dataset in the LOCO directory layout.
    SynthData(SynthArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Full-scale defaults (pretrained teacher, 256 px, 200 epochs).
    Paper,
    /// Tiny seeded teacher on 64 px images, 20 epochs.
    Toy,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Root directory holding one subdirectory per category.
    #[arg(long)]
    pub data_root: PathBuf,
    #[arg(long, default_value = "toy_grid")]
    pub category: String,
}

/// Every field of the training configuration, each optional so that only the
/// flags actually given override the preset and the config file.
#[derive(Debug, Default, Args)]
pub struct ConfigOverrides {
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Two comma-separated values, e.g. `0.5,0.999`.
    #[arg(long, value_delimiter = ',', num_args = 2)]
    pub adam_betas: Option<Vec<f64>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub gccb_channels: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub use_gccb: Option<bool>,
    #[arg(long)]
    pub gaussian_sigma: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `pretrained-wide-residual` or `tiny-seeded`.
    #[arg(long)]
    pub teacher: Option<String>,
    #[arg(long)]
    pub teacher_weights: Option<PathBuf>,
    /// Comma-separated subset of `local,global`.
    #[arg(long, value_delimiter = ',')]
    pub students: Option<Vec<String>>,
    #[arg(long)]
    pub affinity_chunk_size: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub simultaneous: Option<bool>,
}

impl ConfigOverrides {
    pub fn apply(&self, cfg: &mut TrainConfig) -> Result<()> {
        macro_rules! set {
            ($($f:ident),*) => {$(
                if let Some(v) = &self.$f {
                    cfg.$f = v.clone();
                }
            )*};
        }
        set!(
            learning_rate,
            epochs,
            batch_size,
            image_size,
            temperature,
            gccb_channels,
            use_gccb,
            gaussian_sigma,
            seed,
            affinity_chunk_size,
            simultaneous
        );
        if let Some(b) = &self.adam_betas {
            cfg.adam_betas = [b[0], b[1]];
        }
        if let Some(t) = &self.teacher {
            cfg.teacher = t.parse::<TeacherKind>()?;
        }
        if let Some(p) = &self.teacher_weights {
            cfg.teacher_weights = Some(p.clone());
        }
        if let Some(s) = &self.students {
            cfg.students = s.iter().map(|r| r.parse::<StudentRole>()).collect::<Result<_>>()?;
        }
        Ok(())
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Starting point before the config file and flags are applied.
    #[arg(long, value_enum, default_value = "toy")]
    pub preset: Preset,
    /// Flat TOML document whose keys are training-config fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: ConfigOverrides,
    /// Where to write the checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory for `train_log.jsonl` and the resolved `config.toml`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl TrainArgs {
    /// Preset, then config file, then individual flags.
    pub fn resolve_config(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
                let base = toml::to_string(&self.preset_config())
                    .map_err(|e| Error::Config(e.to_string()))?;
                let mut merged: toml::Table =
                    toml::from_str(&base).map_err(|e| Error::Config(e.to_string()))?;
                let user: toml::Table = toml::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                merged.extend(user);
                TrainConfig::from_toml_str(&toml::to_string(&merged).map_err(|e| Error::Config(e.to_string()))?)?
            }
            None => self.preset_config(),
        };
        self.overrides.apply(&mut cfg)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn preset_config(&self) -> TrainConfig {
        match self.preset {
            Preset::Paper => TrainConfig::default(),
            Preset::Toy => TrainConfig::toy(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Local,
    Global,
    Combined,
}

impl From<ModeArg> for ScoreMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Local => ScoreMode::Local,
            ModeArg::Global => ScoreMode::Global,
            ModeArg::Combined => ScoreMode::Combined,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "combined")]
    pub mode: ModeArg,
    /// Directory for `metrics.json` and `metrics.csv`; the JSON also goes to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Integration limit of the sPRO curve.
    #[arg(long, default_value_t = 0.05)]
    pub fpr_limit: f64,
    #[arg(long, default_value_t = 512)]
    pub num_thresholds: usize,
}

#[derive(Debug, Args)]
pub struct VisualizeArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "combined")]
    pub mode: ModeArg,
    #[arg(long)]
    pub out: PathBuf,
    /// Export only the first N test images.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Dataset root; the category directory is created inside it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "toy_grid")]
    pub category: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 3)]
    pub grid: usize,
    #[arg(long, default_value_t = 64)]
    pub image_size: usize,
    #[arg(long, default_value_t = 200)]
    pub n_train: usize,
    #[arg(long, default_value_t = 40)]
    pub n_validation: usize,
    #[arg(long, default_value_t = 60)]
    pub n_test: usize,
}
