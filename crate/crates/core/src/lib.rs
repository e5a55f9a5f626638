//! Dual-student knowledge distillation for logical and structural anomaly detection.
//!
//! A frozen teacher produces a three-level feature pyramid. A local student
//! reconstructs it from a fused multi-level embedding and is scored by cosine
//! distance; a global student reconstructs it from a single condensed vector
//! and is scored by how well it reproduces the teacher's pairwise affinities.

pub mod backbone;
pub mod bottleneck;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoders;
pub mod error;
pub mod heatmap;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod ops;
pub mod scoring;
pub mod student;
pub mod trainer;

pub use backbone::{
    build_teacher, FeatureMap, FeaturePyramid, ImageTensor, StageShape, TeacherConfig,
    TeacherDescriptor, TeacherKind, TeacherNet,
};
pub use config::TrainConfig;
pub use data::{
    load_loco_layout, synth_toy_dataset, toy_defect_config, write_loco_layout, DatasetSplit,
    DefectConfigEntry, ToySceneConfig,
};
pub use decoders::StudentRole;
pub use error::{Error, ErrorKind, Result};
pub use heatmap::export_heatmaps;
pub use losses::{ScoreKind, ScoreMap};
pub use metrics::{DefectRegion, DefectType, EvalRecord, Label, MetricsReport};
pub use scoring::{FusedResult, Normalizer};
pub use student::Student;
pub use trainer::{evaluate, evaluate_with, train, train_with, Checkpoint, EpochRecord, Evaluation, ScoreMode};
