//! Datasets: the MVTec-LOCO directory layout and a synthetic grid-scene generator.
//!
//! Layout of one category directory:
//!
//! ```text
//! <root>/<category>/
//!   train/good/*.png
//!   validation/good/*.png
//!   test/{good,structural_anomalies,logical_anomalies}/*.png
//!   ground_truth/{structural_anomalies,logical_anomalies}/<stem>/NNN.png
//!   defects_config.json
//! ```
//!
//! Each ground-truth PNG holds one defect region; its non-zero pixel value
//! selects the matching `defects_config.json` entry.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{DefectRegion, DefectType, Label};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub name: String,
    pub image: RgbImage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestSample {
    pub name: String,
    pub image: RgbImage,
    pub label: Label,
    pub regions: Vec<DefectRegion>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub category: String,
    /// `(height, width)` of the stored images.
    pub image_size: (usize, usize),
    pub train: Vec<Sample>,
    pub validation: Vec<Sample>,
    pub test: Vec<TestSample>,
}

impl DatasetSplit {
    pub fn count(&self, label: Label) -> usize {
        self.test.iter().filter(|t| t.label == label).count()
    }
}

/// One entry of `defects_config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefectConfigEntry {
    pub defect_name: String,
    pub pixel_value: u8,
    pub saturation_threshold: f64,
    pub relative_saturation: bool,
}

impl DefectConfigEntry {
    pub fn saturation_for(&self, mask_area: usize) -> f64 {
        if self.relative_saturation {
            self.saturation_threshold * mask_area as f64
        } else {
            self.saturation_threshold
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestMix {
    pub good: f64,
    pub structural: f64,
    pub logical: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySceneConfig {
    pub category: String,
    /// Cells per side of the layout grid.
    pub grid: usize,
    pub image_size: usize,
    pub n_train: usize,
    pub n_validation: usize,
    pub n_test: usize,
    pub mix: TestMix,
    /// Maximum per-axis displacement of a shape from its cell center, in pixels.
    pub jitter: i32,
    /// Amplitude of the uniform per-pixel background noise (8-bit levels).
    pub noise: u8,
    pub seed: u64,
}

impl Default for ToySceneConfig {
    fn default() -> Self {
        Self {
            category: "toy_grid".into(),
            grid: 3,
            image_size: 64,
            n_train: 200,
            n_validation: 40,
            n_test: 60,
            mix: TestMix {
                good: 1.0,
                structural: 1.0,
                logical: 1.0,
            },
            jitter: 1,
            noise: 4,
            seed: 0,
        }
    }
}

impl ToySceneConfig {
    fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("good", self.mix.good),
            ("structural", self.mix.structural),
            ("logical", self.mix.logical),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("{name} rate {r} outside [0, 1]")));
            }
        }
        if self.mix.good + self.mix.structural + self.mix.logical <= 0.0 {
            return Err(Error::Config("test mix rates are all zero".into()));
        }
        if self.grid < 2 {
            return Err(Error::Config("grid must have at least 2 cells per side".into()));
        }
        if self.image_size / self.grid < 16 {
            return Err(Error::Config(format!(
                "cells of {} px are too small; need at least 16",
                self.image_size / self.grid
            )));
        }
        Ok(())
    }

    pub fn cell_size(&self) -> usize {
        self.image_size / self.grid
    }

    fn origin(&self) -> usize {
        (self.image_size - self.cell_size() * self.grid) / 2
    }

    pub fn cell_area(&self) -> usize {
        self.cell_size() * self.cell_size()
    }

    /// Saturation area for logical defects: a quarter of one cell.
    pub fn logical_saturation(&self) -> f64 {
        0.25 * self.cell_area() as f64
    }

    /// Split the test set into (good, structural, logical) counts.
    pub fn test_counts(&self) -> (usize, usize, usize) {
        let w = [self.mix.good, self.mix.structural, self.mix.logical];
        let total: f64 = w.iter().sum();
        let exact: Vec<f64> = w.iter().map(|r| self.n_test as f64 * r / total).collect();
        let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
        let mut left = self.n_test - counts.iter().sum::<usize>();
        // largest remainder
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
        for i in order {
            if left == 0 {
                break;
            }
            counts[i] += 1;
            left -= 1;
        }
        (counts[0], counts[1], counts[2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Disk,
    Square,
    Triangle,
    Cross,
    Ring,
    Diamond,
    HBar,
    VBar,
    Saltire,
}

const SHAPES: [Shape; 9] = [
    Shape::Disk,
    Shape::Square,
    Shape::Triangle,
    Shape::Cross,
    Shape::Ring,
    Shape::Diamond,
    Shape::HBar,
    Shape::VBar,
    Shape::Saltire,
];

const COLORS: [[u8; 3]; 9] = [
    [200, 40, 40],
    [40, 160, 60],
    [40, 70, 200],
    [220, 190, 40],
    [180, 60, 180],
    [40, 180, 190],
    [230, 120, 30],
    [100, 60, 30],
    [30, 30, 30],
];

const BACKGROUND: [u8; 3] = [205, 205, 200];
const SHAPE_HALF: i32 = 5;

impl Shape {
    fn contains(self, dx: i32, dy: i32) -> bool {
        let r = SHAPE_HALF;
        if dx.abs() > r || dy.abs() > r {
            return false;
        }
        let d2 = dx * dx + dy * dy;
        match self {
            Shape::Disk => d2 <= r * r,
            Shape::Square => dx.abs() <= r - 1 && dy.abs() <= r - 1,
            Shape::Triangle => dy >= -r && 2 * dx.abs() <= dy + r,
            Shape::Cross => dx.abs() <= 1 || dy.abs() <= 1,
            Shape::Ring => d2 <= r * r && d2 >= (r - 2) * (r - 2),
            Shape::Diamond => dx.abs() + dy.abs() <= r,
            Shape::HBar => dy.abs() <= 2,
            Shape::VBar => dx.abs() <= 2,
            Shape::Saltire => (dx - dy).abs() <= 1 || (dx + dy).abs() <= 1,
        }
    }
}

/// What is drawn in one grid cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct CellContent {
    shape: usize,
    color: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LogicalKind {
    Missing,
    Duplicated,
    Swapped,
    WrongColor,
}

impl LogicalKind {
    const ALL: [LogicalKind; 4] = [
        LogicalKind::Missing,
        LogicalKind::Duplicated,
        LogicalKind::Swapped,
        LogicalKind::WrongColor,
    ];

    fn name(self) -> &'static str {
        match self {
            LogicalKind::Missing => "missing_shape",
            LogicalKind::Duplicated => "duplicated_shape",
            LogicalKind::Swapped => "swapped_shapes",
            LogicalKind::WrongColor => "wrong_color",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum StructuralKind {
    NoisePatch,
    Scratch,
}

impl StructuralKind {
    fn name(self) -> &'static str {
        match self {
            StructuralKind::NoisePatch => "noise_patch",
            StructuralKind::Scratch => "scratch",
        }
    }
}

/// `defects_config.json` entries for the generated defect types.
pub fn toy_defect_config(config: &ToySceneConfig) -> Vec<DefectConfigEntry> {
    let mut out = Vec::new();
    for (i, k) in [StructuralKind::NoisePatch, StructuralKind::Scratch].iter().enumerate() {
        out.push(DefectConfigEntry {
            defect_name: k.name().into(),
            pixel_value: 1 + i as u8,
            saturation_threshold: 1.0,
            relative_saturation: true,
        });
    }
    for (i, k) in LogicalKind::ALL.iter().enumerate() {
        out.push(DefectConfigEntry {
            defect_name: k.name().into(),
            pixel_value: 3 + i as u8,
            saturation_threshold: config.logical_saturation(),
            relative_saturation: false,
        });
    }
    out
}

fn defect_type_of(name: &str) -> DefectType {
    if name == StructuralKind::NoisePatch.name() || name == StructuralKind::Scratch.name() {
        DefectType::Structural
    } else {
        DefectType::Logical
    }
}

struct Scene<'a> {
    cfg: &'a ToySceneConfig,
    cells: Vec<Option<CellContent>>,
}

impl<'a> Scene<'a> {
    fn normal(cfg: &'a ToySceneConfig) -> Self {
        let n = cfg.grid * cfg.grid;
        Self {
            cfg,
            cells: (0..n)
                .map(|i| {
                    Some(CellContent {
                        shape: i % SHAPES.len(),
                        color: i % COLORS.len(),
                    })
                })
                .collect(),
        }
    }

    fn cell_rect(&self, cell: usize) -> (usize, usize, usize) {
        let cs = self.cfg.cell_size();
        let o = self.cfg.origin();
        (o + (cell % self.cfg.grid) * cs, o + (cell / self.cfg.grid) * cs, cs)
    }

    fn cell_mask(&self, cell: usize) -> Vec<bool> {
        let s = self.cfg.image_size;
        let (x0, y0, cs) = self.cell_rect(cell);
        let mut m = vec![false; s * s];
        for y in y0..y0 + cs {
            for x in x0..x0 + cs {
                m[y * s + x] = true;
            }
        }
        m
    }

    /// Render with per-cell jitter offsets; `noise` perturbs every pixel.
    fn render(&self, jitter: &[(i32, i32)], rng: Option<&mut ChaCha8Rng>) -> RgbImage {
        let s = self.cfg.image_size as u32;
        let mut img = RgbImage::from_pixel(s, s, Rgb(BACKGROUND));
        for (cell, content) in self.cells.iter().enumerate() {
            let Some(c) = content else { continue };
            let (x0, y0, cs) = self.cell_rect(cell);
            let cx = (x0 + cs / 2) as i32 + jitter[cell].0;
            let cy = (y0 + cs / 2) as i32 + jitter[cell].1;
            for dy in -SHAPE_HALF..=SHAPE_HALF {
                for dx in -SHAPE_HALF..=SHAPE_HALF {
                    if SHAPES[c.shape].contains(dx, dy) {
                        img.put_pixel((cx + dx) as u32, (cy + dy) as u32, Rgb(COLORS[c.color]));
                    }
                }
            }
        }
        if let Some(rng) = rng {
            let a = self.cfg.noise as i32;
            if a > 0 {
                for p in img.pixels_mut() {
                    for ch in p.0.iter_mut() {
                        *ch = (*ch as i32 + rng.random_range(-a..=a)).clamp(0, 255) as u8;
                    }
                }
            }
        }
        img
    }
}

fn draw_jitter(cfg: &ToySceneConfig, rng: &mut ChaCha8Rng) -> Vec<(i32, i32)> {
    let j = cfg.jitter;
    (0..cfg.grid * cfg.grid)
        .map(|_| (rng.random_range(-j..=j), rng.random_range(-j..=j)))
        .collect()
}

fn pick_two(n: usize, rng: &mut ChaCha8Rng) -> (usize, usize) {
    let a = rng.random_range(0..n);
    let mut b = rng.random_range(0..n - 1);
    if b >= a {
        b += 1;
    }
    (a, b)
}

fn logical_sample(
    cfg: &ToySceneConfig,
    rng: &mut ChaCha8Rng,
    sat: &BTreeMap<String, DefectConfigEntry>,
) -> Result<(RgbImage, Vec<DefectRegion>)> {
    let mut scene = Scene::normal(cfg);
    let n = scene.cells.len();
    let kind = LogicalKind::ALL[rng.random_range(0..LogicalKind::ALL.len())];
    let affected = match kind {
        LogicalKind::Missing => {
            let i = rng.random_range(0..n);
            scene.cells[i] = None;
            vec![i]
        }
        LogicalKind::Duplicated => {
            let (src, dst) = pick_two(n, rng);
            scene.cells[dst] = scene.cells[src];
            vec![dst]
        }
        LogicalKind::Swapped => {
            let (a, b) = pick_two(n, rng);
            scene.cells.swap(a, b);
            vec![a.min(b), a.max(b)]
        }
        LogicalKind::WrongColor => {
            let i = rng.random_range(0..n);
            let c = scene.cells[i].as_mut().expect("normal scene fills every cell");
            let mut other = rng.random_range(0..COLORS.len() - 1);
            if other >= c.color {
                other += 1;
            }
            c.color = other;
            vec![i]
        }
    };
    let jitter = draw_jitter(cfg, rng);
    let img = scene.render(&jitter, Some(rng));
    let s = cfg.image_size;
    let entry = &sat[kind.name()];
    let regions = affected
        .into_iter()
        .map(|cell| {
            let mask = scene.cell_mask(cell);
            let area = mask.iter().filter(|m| **m).count();
            DefectRegion::new(s, s, mask, entry.saturation_for(area), DefectType::Logical, kind.name())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((img, regions))
}

fn structural_sample(
    cfg: &ToySceneConfig,
    rng: &mut ChaCha8Rng,
    sat: &BTreeMap<String, DefectConfigEntry>,
) -> Result<(RgbImage, Vec<DefectRegion>)> {
    let scene = Scene::normal(cfg);
    let jitter = draw_jitter(cfg, rng);
    let mut img = scene.render(&jitter, Some(rng));
    let s = cfg.image_size;
    let mut mask = vec![false; s * s];
    let kind = if rng.random_bool(0.5) {
        StructuralKind::NoisePatch
    } else {
        StructuralKind::Scratch
    };
    // centred on a shape so the defect corrupts object texture
    let cell = rng.random_range(0..cfg.grid * cfg.grid);
    let (x0, y0, cs) = scene.cell_rect(cell);
    let cx = (x0 + cs / 2) as i32 + jitter[cell].0 + rng.random_range(-3..=3);
    let cy = (y0 + cs / 2) as i32 + jitter[cell].1 + rng.random_range(-3..=3);
    match kind {
        StructuralKind::NoisePatch => {
            let side = rng.random_range(5..=8);
            for y in cy - side / 2..cy - side / 2 + side {
                for x in cx - side / 2..cx - side / 2 + side {
                    if x < 0 || y < 0 || x >= s as i32 || y >= s as i32 {
                        continue;
                    }
                    let px = Rgb([rng.random(), rng.random(), rng.random()]);
                    img.put_pixel(x as u32, y as u32, px);
                    mask[y as usize * s + x as usize] = true;
                }
            }
        }
        StructuralKind::Scratch => {
            let len = rng.random_range(8..=14) as f64;
            let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let (dx, dy) = (angle.cos(), angle.sin());
            let shade: u8 = rng.random_range(235..=255);
            let steps = (len * 2.0) as i32;
            for t in 0..=steps {
                let f = t as f64 / steps as f64 - 0.5;
                let x = (cx as f64 + f * len * dx).round() as i32;
                let y = (cy as f64 + f * len * dy).round() as i32;
                for (ox, oy) in [(0, 0), (1, 0)] {
                    let (x, y) = (x + ox, y + oy);
                    if x < 0 || y < 0 || x >= s as i32 || y >= s as i32 {
                        continue;
                    }
                    img.put_pixel(x as u32, y as u32, Rgb([shade, shade, shade]));
                    mask[y as usize * s + x as usize] = true;
                }
            }
        }
    }
    let area = mask.iter().filter(|m| **m).count();
    let entry = &sat[kind.name()];
    let region = DefectRegion::new(s, s, mask, entry.saturation_for(area), DefectType::Structural, kind.name())?;
    Ok((img, vec![region]))
}

/// Generate a complete split. Deterministic for a given configuration.
pub fn synth_toy_dataset(cfg: &ToySceneConfig) -> Result<DatasetSplit> {
    cfg.validate()?;
    let sat: BTreeMap<String, DefectConfigEntry> = toy_defect_config(cfg)
        .into_iter()
        .map(|e| (e.defect_name.clone(), e))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = |rng: &mut ChaCha8Rng| {
        let scene = Scene::normal(cfg);
        let jitter = draw_jitter(cfg, rng);
        scene.render(&jitter, Some(rng))
    };
    let train = (0..cfg.n_train)
        .map(|i| Sample {
            name: format!("{i:03}"),
            image: normal(&mut rng),
        })
        .collect();
    let validation = (0..cfg.n_validation)
        .map(|i| Sample {
            name: format!("{i:03}"),
            image: normal(&mut rng),
        })
        .collect();
    let (n_good, n_struct, n_logic) = cfg.test_counts();
    let mut test = Vec::with_capacity(cfg.n_test);
    for i in 0..n_good {
        test.push(TestSample {
            name: format!("{i:03}"),
            image: normal(&mut rng),
            label: Label::Good,
            regions: vec![],
        });
    }
    for i in 0..n_logic {
        let (image, regions) = logical_sample(cfg, &mut rng, &sat)?;
        test.push(TestSample {
            name: format!("{i:03}"),
            image,
            label: Label::Logical,
            regions,
        });
    }
    for i in 0..n_struct {
        let (image, regions) = structural_sample(cfg, &mut rng, &sat)?;
        test.push(TestSample {
            name: format!("{i:03}"),
            image,
            label: Label::Structural,
            regions,
        });
    }
    Ok(DatasetSplit {
        category: cfg.category.clone(),
        image_size: (cfg.image_size, cfg.image_size),
        train,
        validation,
        test,
    })
}

/// Noise-free renderings used to check local plausibility of layout defects.
pub mod render {
    use super::*;

    /// A normal scene with every shape exactly at its cell center.
    pub fn normal_centered(cfg: &ToySceneConfig) -> RgbImage {
        let scene = Scene::normal(cfg);
        scene.render(&vec![(0, 0); cfg.grid * cfg.grid], None)
    }

    /// The same scene with cells `a` and `b` exchanged.
    pub fn swapped_centered(cfg: &ToySceneConfig, a: usize, b: usize) -> RgbImage {
        let mut scene = Scene::normal(cfg);
        scene.cells.swap(a, b);
        scene.render(&vec![(0, 0); cfg.grid * cfg.grid], None)
    }

    pub fn background() -> [u8; 3] {
        BACKGROUND
    }
}

fn png_names(dir: &Path) -> Result<Vec<String>> {
    let mut names: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".png"))
        .collect();
    names.sort();
    Ok(names)
}

fn require_dir(p: PathBuf) -> Result<PathBuf> {
    if p.is_dir() {
        Ok(p)
    } else {
        Err(Error::MissingPath(p))
    }
}

fn stem(name: &str) -> &str {
    name.strip_suffix(".png").unwrap_or(name)
}

fn load_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)?.to_rgb8())
}

fn load_samples(dir: &Path) -> Result<Vec<Sample>> {
    png_names(dir)?
        .into_iter()
        .map(|n| {
            Ok(Sample {
                image: load_rgb(&dir.join(&n))?,
                name: stem(&n).to_string(),
            })
        })
        .collect()
}

pub fn read_defects_config(path: &Path) -> Result<Vec<DefectConfigEntry>> {
    if !path.is_file() {
        return Err(Error::MissingPath(path.to_path_buf()));
    }
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Read one category in the LOCO layout. Splits are ordered lexicographically by file name.
pub fn load_loco_layout(root: &Path, category: &str) -> Result<DatasetSplit> {
    let base = require_dir(root.join(category))?;
    let train_dir = require_dir(base.join("train").join("good"))?;
    let val_dir = require_dir(base.join("validation").join("good"))?;
    let test_dir = require_dir(base.join("test"))?;
    let gt_dir = require_dir(base.join("ground_truth"))?;
    let config = read_defects_config(&base.join("defects_config.json"))?;
    let by_value: BTreeMap<u8, &DefectConfigEntry> =
        config.iter().map(|e| (e.pixel_value, e)).collect();

    let train = load_samples(&train_dir)?;
    let validation = load_samples(&val_dir)?;
    let mut test = Vec::new();
    for label in [Label::Good, Label::Logical, Label::Structural] {
        let dir = require_dir(test_dir.join(label.dir_name()))?;
        for name in png_names(&dir)? {
            let image = load_rgb(&dir.join(&name))?;
            let stem = stem(&name).to_string();
            let regions = if label == Label::Good {
                vec![]
            } else {
                let mdir = gt_dir.join(label.dir_name()).join(&stem);
                if !mdir.is_dir() {
                    return Err(Error::Integrity(format!(
                        "no ground truth for {}/{name} (expected {})",
                        label.dir_name(),
                        mdir.display()
                    )));
                }
                let masks = png_names(&mdir)?;
                if masks.is_empty() {
                    return Err(Error::Integrity(format!(
                        "ground truth directory {} has no masks",
                        mdir.display()
                    )));
                }
                let mut regions = Vec::with_capacity(masks.len());
                for m in masks {
                    let mp = mdir.join(&m);
                    let gray: GrayImage = image::open(&mp)?.to_luma8();
                    if gray.dimensions() != image.dimensions() {
                        return Err(Error::Integrity(format!(
                            "mask {} is {:?}, image is {:?}",
                            mp.display(),
                            gray.dimensions(),
                            image.dimensions()
                        )));
                    }
                    let value = gray.pixels().map(|p| p.0[0]).find(|v| *v != 0).ok_or_else(|| {
                        Error::Integrity(format!("mask {} is empty", mp.display()))
                    })?;
                    let entry = by_value.get(&value).ok_or_else(|| {
                        Error::Format(format!(
                            "mask {} uses pixel value {value} absent from defects_config.json",
                            mp.display()
                        ))
                    })?;
                    let mask: Vec<bool> = gray.pixels().map(|p| p.0[0] != 0).collect();
                    let area = mask.iter().filter(|m| **m).count();
                    let (w, h) = gray.dimensions();
                    let expected = match label {
                        Label::Structural => DefectType::Structural,
                        _ => DefectType::Logical,
                    };
                    regions.push(
                        DefectRegion::new(
                            h as usize,
                            w as usize,
                            mask,
                            entry.saturation_for(area).min(area as f64),
                            expected,
                            entry.defect_name.clone(),
                        )
                        .map_err(|e| Error::Integrity(format!("{}: {e}", mp.display())))?,
                    );
                }
                regions
            };
            test.push(TestSample {
                name: stem,
                image,
                label,
                regions,
            });
        }
    }
    let first = train
        .first()
        .map(|s| &s.image)
        .or_else(|| test.first().map(|t| &t.image))
        .ok_or_else(|| Error::Integrity(format!("{} contains no images", base.display())))?;
    let image_size = (first.height() as usize, first.width() as usize);
    Ok(DatasetSplit {
        category: category.to_string(),
        image_size,
        train,
        validation,
        test,
    })
}

/// Write a split in the LOCO layout under `<root>/<category>`.
pub fn write_loco_layout(
    split: &DatasetSplit,
    defects: &[DefectConfigEntry],
    root: &Path,
) -> Result<PathBuf> {
    let base = root.join(&split.category);
    let by_name: BTreeMap<&str, &DefectConfigEntry> =
        defects.iter().map(|e| (e.defect_name.as_str(), e)).collect();
    for (dir, samples) in [("train", &split.train), ("validation", &split.validation)] {
        let d = base.join(dir).join("good");
        fs::create_dir_all(&d)?;
        for s in samples.iter() {
            s.image.save(d.join(format!("{}.png", s.name)))?;
        }
    }
    for label in [Label::Good, Label::Structural, Label::Logical] {
        fs::create_dir_all(base.join("test").join(label.dir_name()))?;
        if label != Label::Good {
            fs::create_dir_all(base.join("ground_truth").join(label.dir_name()))?;
        }
    }
    for t in &split.test {
        t.image
            .save(base.join("test").join(t.label.dir_name()).join(format!("{}.png", t.name)))?;
        if t.regions.is_empty() {
            continue;
        }
        let mdir = base.join("ground_truth").join(t.label.dir_name()).join(&t.name);
        fs::create_dir_all(&mdir)?;
        for (k, r) in t.regions.iter().enumerate() {
            let entry = by_name.get(r.defect_name.as_str()).ok_or_else(|| {
                Error::Format(format!("defect `{}` has no config entry", r.defect_name))
            })?;
            let mut img = GrayImage::new(r.width as u32, r.height as u32);
            for (p, m) in img.pixels_mut().zip(&r.mask) {
                *p = Luma([if *m { entry.pixel_value } else { 0 }]);
            }
            img.save(mdir.join(format!("{k:03}.png")))?;
        }
    }
    fs::write(
        base.join("defects_config.json"),
        serde_json::to_string_pretty(defects)?,
    )?;
    Ok(base)
}

/// Inverse of [`defect_type_of`] for generated data.
pub fn toy_defect_type(name: &str) -> DefectType {
    defect_type_of(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ToySceneConfig {
        ToySceneConfig {
            n_train: 4,
            n_validation: 2,
            n_test: 12,
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn default_accounting() {
        let cfg = ToySceneConfig::default();
        assert_eq!(cfg.test_counts(), (20, 20, 20));
        let d = synth_toy_dataset(&cfg).unwrap();
        assert_eq!(d.train.len(), 200);
        assert_eq!(d.validation.len(), 40);
        assert_eq!(
            (d.count(Label::Good), d.count(Label::Structural), d.count(Label::Logical)),
            (20, 20, 20)
        );
    }

    #[test]
    fn deterministic_from_seed() {
        assert_eq!(synth_toy_dataset(&small()).unwrap(), synth_toy_dataset(&small()).unwrap());
        let other = ToySceneConfig { seed: 6, ..small() };
        assert_ne!(synth_toy_dataset(&small()).unwrap(), synth_toy_dataset(&other).unwrap());
    }

    #[test]
    fn labels_and_regions_agree() {
        let d = synth_toy_dataset(&ToySceneConfig { n_test: 90, ..small() }).unwrap();
        for t in &d.test {
            assert_eq!(t.label == Label::Good, t.regions.is_empty(), "{}", t.name);
            for r in &t.regions {
                assert_eq!(Label::from(r.defect_type), t.label);
                let cap = 0.25 * small().cell_area() as f64;
                assert_eq!(r.saturation_threshold, (r.area() as f64).min(cap));
            }
        }
    }

    #[test]
    fn missing_shape_mask_is_its_cell() {
        let cfg = small();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sat: BTreeMap<_, _> = toy_defect_config(&cfg)
            .into_iter()
            .map(|e| (e.defect_name.clone(), e))
            .collect();
        let mut seen = false;
        for _ in 0..40 {
            let (img, regions) = logical_sample(&cfg, &mut rng, &sat).unwrap();
            if regions[0].defect_name != "missing_shape" {
                continue;
            }
            seen = true;
            let r = &regions[0];
            assert_eq!(r.area(), cfg.cell_area());
            // nothing but background (plus noise) inside the mask
            for (i, m) in r.mask.iter().enumerate() {
                if *m {
                    let p = img.get_pixel((i % 64) as u32, (i / 64) as u32).0;
                    for c in 0..3 {
                        assert!((p[c] as i32 - BACKGROUND[c] as i32).abs() <= cfg.noise as i32);
                    }
                }
            }
        }
        assert!(seen);
    }

    #[test]
    fn bad_rates_are_config_errors() {
        let mut cfg = small();
        cfg.mix.logical = 1.5;
        assert!(matches!(synth_toy_dataset(&cfg), Err(Error::Config(_))));
        cfg.mix.logical = -0.1;
        assert!(matches!(synth_toy_dataset(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn swapped_scene_is_locally_plausible() {
        let cfg = small();
        let normal = render::normal_centered(&cfg);
        let swapped = render::swapped_centered(&cfg, 0, 4);
        let s = cfg.image_size as i32;
        let pad = 16;
        // normal image on a background canvas so translated patches stay in bounds
        let get = |x: i32, y: i32| -> [u8; 3] {
            if x < 0 || y < 0 || x >= s || y >= s {
                BACKGROUND
            } else {
                normal.get_pixel(x as u32, y as u32).0
            }
        };
        for py in 0..=s - 8 {
            for px in 0..=s - 8 {
                let found = (-pad..s + pad - 8).any(|qy| {
                    (-pad..s + pad - 8).any(|qx| {
                        (0..8).all(|dy| {
                            (0..8).all(|dx| {
                                swapped.get_pixel((px + dx) as u32, (py + dy) as u32).0
                                    == get(qx + dx, qy + dy)
                            })
                        })
                    })
                });
                assert!(found, "patch at ({px},{py}) never occurs in a normal scene");
            }
        }
    }
}
