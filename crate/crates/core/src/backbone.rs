//! Frozen teacher networks and the feature containers they produce.
//!
//! Two teachers are supported: a wide residual network loaded from a
//! safetensors file (torchvision parameter naming), and a small seeded
//! network whose random weights are never trained. Teacher weights are plain
//! tensors, never `Var`s, so no gradient can reach them.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::Conv2d;

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TeacherKind {
    PretrainedWideResidual,
    TinySeeded,
}

impl FromStr for TeacherKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrained-wide-residual" => Ok(Self::PretrainedWideResidual),
            "tiny-seeded" => Ok(Self::TinySeeded),
            other => Err(Error::Config(format!(
                "unsupported teacher kind `{other}` (expected pretrained-wide-residual or tiny-seeded)"
            ))),
        }
    }
}

impl fmt::Display for TeacherKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::PretrainedWideResidual => "pretrained-wide-residual",
            Self::TinySeeded => "tiny-seeded",
        })
    }
}

/// Stage widths and block counts of a bottleneck residual network.
///
/// Output channels of stage `s` are `planes[s] * 4`; inner width is
/// `planes[s] * width_factor`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WideResidualSpec {
    pub stem_channels: usize,
    pub planes: [usize; 4],
    pub blocks: [usize; 4],
    pub width_factor: usize,
}

impl WideResidualSpec {
    /// Wide ResNet-50-2.
    pub fn wide_resnet50_2() -> Self {
        Self {
            stem_channels: 64,
            planes: [64, 128, 256, 512],
            blocks: [3, 4, 6, 3],
            width_factor: 2,
        }
    }

    pub fn out_channels(&self) -> [usize; 4] {
        self.planes.map(|p| p * 4)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherConfig {
    pub kind: TeacherKind,
    pub image_size: usize,
    pub weights_path: Option<PathBuf>,
    /// Architecture of the wide residual teacher; ignored for the tiny teacher.
    pub wide_spec: WideResidualSpec,
    pub norm_mean: [f32; 3],
    pub norm_std: [f32; 3],
}

impl TeacherConfig {
    pub fn tiny(image_size: usize) -> Self {
        Self {
            kind: TeacherKind::TinySeeded,
            image_size,
            weights_path: None,
            wide_spec: WideResidualSpec::wide_resnet50_2(),
            norm_mean: [0.5; 3],
            norm_std: [0.5; 3],
        }
    }

    pub fn pretrained(image_size: usize, weights_path: impl Into<PathBuf>) -> Self {
        Self {
            kind: TeacherKind::PretrainedWideResidual,
            image_size,
            weights_path: Some(weights_path.into()),
            wide_spec: WideResidualSpec::wide_resnet50_2(),
            norm_mean: IMAGENET_MEAN,
            norm_std: IMAGENET_STD,
        }
    }

    /// Per-stage output shapes for stages 1..=4.
    pub fn stage_shapes(&self) -> Result<[StageShape; 4]> {
        let (channels, first_stride) = match self.kind {
            TeacherKind::TinySeeded => (TINY_CHANNELS, 2),
            // stem conv (stride 2) + max-pool (stride 2)
            TeacherKind::PretrainedWideResidual => (self.wide_spec.out_channels(), 4),
        };
        let total = first_stride << 3;
        if self.image_size == 0 || self.image_size % total != 0 {
            return Err(Error::Config(format!(
                "image size {} must be a positive multiple of {total}",
                self.image_size
            )));
        }
        let mut out = [StageShape::default(); 4];
        let mut side = self.image_size / first_stride;
        for (l, c) in channels.iter().enumerate() {
            out[l] = StageShape {
                height: side,
                width: side,
                channels: *c,
            };
            side /= 2;
        }
        Ok(out)
    }
}

pub const TINY_CHANNELS: [usize; 4] = [16, 32, 64, 128];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl StageShape {
    pub fn positions(&self) -> usize {
        self.height * self.width
    }
}

/// An RGB image with values in `[0, 1]`, stored row-major as `h x w x 3`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(Error::Input(format!(
                "expected {} pixel values for {height}x{width}x3, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !p.is_finite()) {
            return Err(Error::Input("image contains non-finite values".into()));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            pixels: vec![0.0; height * width * 3],
        }
    }

    /// Decode an 8-bit RGB image, resizing with bilinear filtering when needed.
    pub fn from_rgb(img: &image::RgbImage, size: usize) -> Self {
        let resized;
        let src = if img.width() as usize == size && img.height() as usize == size {
            img
        } else {
            resized = image::imageops::resize(
                img,
                size as u32,
                size as u32,
                image::imageops::FilterType::Triangle,
            );
            &resized
        };
        let pixels = src.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        Self {
            height: size,
            width: size,
            pixels,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    /// Channel-first normalized tensor of shape `(3, h, w)`.
    pub fn normalized(&self, mean: [f32; 3], std: [f32; 3], device: &Device) -> Result<Tensor> {
        let hw = self.height * self.width;
        let mut chw = vec![0f32; 3 * hw];
        for (i, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                chw[c * hw + i] = (px[c] - mean[c]) / std[c];
            }
        }
        Ok(Tensor::from_vec(chw, (3, self.height, self.width), device)?)
    }
}

/// A batch of feature maps from one level, laid out `(batch, channels, h, w)`.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub tensor: Tensor,
    /// 1-based stage index.
    pub level: usize,
}

impl FeatureMap {
    pub fn new(tensor: Tensor, level: usize) -> Result<Self> {
        tensor.dims4()?;
        Ok(Self { tensor, level })
    }

    pub fn shape(&self) -> StageShape {
        let d = self.tensor.dims();
        StageShape {
            height: d[2],
            width: d[3],
            channels: d[1],
        }
    }

    pub fn batch(&self) -> usize {
        self.tensor.dims()[0]
    }

    pub fn is_finite(&self) -> Result<bool> {
        let v = self.tensor.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        Ok(v.iter().all(|x| x.is_finite()))
    }
}

/// Feature maps for levels 1..=3, finest first.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: [FeatureMap; 3],
}

impl FeaturePyramid {
    pub fn new(levels: [FeatureMap; 3]) -> Result<Self> {
        let b = levels[0].batch();
        if levels.iter().any(|f| f.batch() != b) {
            return Err(Error::Input(format!(
                "pyramid levels disagree on batch size: {:?}",
                levels.each_ref().map(|f| f.batch())
            )));
        }
        Ok(Self { levels })
    }

    pub fn shapes(&self) -> [StageShape; 3] {
        [
            self.levels[0].shape(),
            self.levels[1].shape(),
            self.levels[2].shape(),
        ]
    }

    pub fn detach(&self) -> Self {
        Self {
            levels: self.levels.clone().map(|f| FeatureMap {
                tensor: f.tensor.detach(),
                level: f.level,
            }),
        }
    }

    /// Select one sample of the batch.
    pub fn sample(&self, index: usize) -> Result<Self> {
        let levels = [0, 1, 2].map(|l| {
            let f = &self.levels[l];
            f.tensor.narrow(0, index, 1).map(|t| FeatureMap {
                tensor: t,
                level: f.level,
            })
        });
        let [a, b, c] = levels;
        Ok(Self {
            levels: [a?, b?, c?],
        })
    }
}

/// Teacher output with the optional stage-4 map.
#[derive(Debug, Clone)]
pub struct TeacherOutput {
    pub pyramid: FeaturePyramid,
    pub stage4: Option<FeatureMap>,
}

#[derive(Debug, Clone)]
struct PlainStage {
    conv1: Conv2d,
    conv2: Conv2d,
}

#[derive(Debug, Clone)]
struct Bottleneck {
    conv1: Conv2d,
    conv2: Conv2d,
    conv3: Conv2d,
    downsample: Option<Conv2d>,
}

impl Bottleneck {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.conv1.forward(x)?.relu()?;
        let y = self.conv2.forward(&y)?.relu()?;
        let y = self.conv3.forward(&y)?;
        let s = match &self.downsample {
            Some(d) => d.forward(x)?,
            None => x.clone(),
        };
        Ok((y + s)?.relu()?)
    }
}

#[derive(Debug, Clone)]
enum Body {
    Tiny(Vec<PlainStage>),
    Wide {
        stem: Conv2d,
        // stage 4 is absent when the weights file does not carry it
        layers: Vec<Vec<Bottleneck>>,
    },
}

/// Serializable identity of a teacher: enough to rebuild it bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherDescriptor {
    pub config: TeacherConfig,
    pub seed: u64,
    /// SHA-256 of the weights file for the pretrained teacher.
    pub weights_sha256: Option<String>,
}

/// Frozen multi-stage feature extractor.
#[derive(Debug, Clone)]
pub struct TeacherNet {
    config: TeacherConfig,
    seed: u64,
    body: Body,
    stage_shapes: [StageShape; 4],
    weights_sha256: Option<String>,
    device: Device,
}

pub fn build_teacher(config: &TeacherConfig, seed: u64) -> Result<TeacherNet> {
    let device = Device::Cpu;
    let stage_shapes = config.stage_shapes()?;
    let (body, weights_sha256) = match config.kind {
        TeacherKind::TinySeeded => (Body::Tiny(tiny_stages(seed, &device)?), None),
        TeacherKind::PretrainedWideResidual => {
            let path = config.weights_path.as_ref().ok_or_else(|| {
                Error::Config("pretrained-wide-residual teacher requires a weights path".into())
            })?;
            let (body, digest) = load_wide(path, &config.wide_spec, &device)?;
            (body, Some(digest))
        }
    };
    Ok(TeacherNet {
        config: config.clone(),
        seed,
        body,
        stage_shapes,
        weights_sha256,
        device,
    })
}

fn tiny_stages(seed: u64, device: &Device) -> Result<Vec<PlainStage>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut conv = |c_in: usize, c_out: usize, stride: usize| -> Result<Conv2d> {
        let std = (2.0 / (c_in * 9) as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("positive std");
        let data: Vec<f32> = (0..c_out * c_in * 9)
            .map(|_| dist.sample(&mut rng) as f32)
            .collect();
        let w = Tensor::from_vec(data, (c_out, c_in, 3, 3), device)?;
        Ok(Conv2d::frozen(w, None, stride, 1))
    };
    let mut stages = Vec::with_capacity(4);
    let mut c_in = 3;
    for c in TINY_CHANNELS {
        stages.push(PlainStage {
            conv1: conv(c_in, c, 2)?,
            conv2: conv(c, c, 1)?,
        });
        c_in = c;
    }
    Ok(stages)
}

fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::WeightsLoad {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

struct WeightSource<'a> {
    tensors: &'a HashMap<String, Tensor>,
    path: &'a Path,
}

impl WeightSource<'_> {
    fn get(&self, name: &str) -> Result<Tensor> {
        let t = self.tensors.get(name).ok_or_else(|| Error::WeightsLoad {
            path: self.path.to_path_buf(),
            reason: format!("missing tensor `{name}`"),
        })?;
        Ok(t.to_dtype(DType::F32)?)
    }

    fn has(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    /// Convolution `conv` followed by inference-mode batch norm `bn`, folded together.
    fn conv_bn(&self, conv: &str, bn: &str, stride: usize, padding: usize) -> Result<Conv2d> {
        let w = self.get(&format!("{conv}.weight"))?;
        let gamma = self.get(&format!("{bn}.weight"))?;
        let beta = self.get(&format!("{bn}.bias"))?;
        let mean = self.get(&format!("{bn}.running_mean"))?;
        let var = self.get(&format!("{bn}.running_var"))?;
        let c_out = w.dim(0)?;
        for (n, t) in [("weight", &gamma), ("bias", &beta), ("mean", &mean), ("var", &var)] {
            if t.dims() != [c_out] {
                return Err(Error::WeightsLoad {
                    path: self.path.to_path_buf(),
                    reason: format!("{bn}.{n} has shape {:?}, expected [{c_out}]", t.dims()),
                });
            }
        }
        let scale = (gamma / (var + 1e-5)?.sqrt()?)?;
        let w = w.broadcast_mul(&scale.reshape((c_out, 1, 1, 1))?)?;
        let b = (beta - (mean * &scale)?)?;
        Ok(Conv2d::frozen(w, Some(b), stride, padding))
    }
}

fn load_wide(path: &Path, spec: &WideResidualSpec, device: &Device) -> Result<(Body, String)> {
    if !path.is_file() {
        return Err(Error::WeightsLoad {
            path: path.to_path_buf(),
            reason: "file not found".into(),
        });
    }
    let digest = file_sha256(path)?;
    let tensors = candle_core::safetensors::load(path, device).map_err(|e| Error::WeightsLoad {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let src = WeightSource {
        tensors: &tensors,
        path,
    };
    let stem = src.conv_bn("conv1", "bn1", 2, 3)?;
    if stem.out_channels() != spec.stem_channels {
        return Err(Error::WeightsLoad {
            path: path.to_path_buf(),
            reason: format!(
                "stem has {} channels, architecture expects {}",
                stem.out_channels(),
                spec.stem_channels
            ),
        });
    }
    let mut layers = Vec::new();
    for stage in 0..4 {
        let prefix = format!("layer{}", stage + 1);
        if stage == 3 && !src.has(&format!("{prefix}.0.conv1.weight")) {
            break;
        }
        let mut blocks = Vec::new();
        for b in 0..spec.blocks[stage] {
            let p = format!("{prefix}.{b}");
            let stride = if b == 0 && stage > 0 { 2 } else { 1 };
            let downsample = if b == 0 {
                Some(src.conv_bn(
                    &format!("{p}.downsample.0"),
                    &format!("{p}.downsample.1"),
                    stride,
                    0,
                )?)
            } else {
                None
            };
            blocks.push(Bottleneck {
                conv1: src.conv_bn(&format!("{p}.conv1"), &format!("{p}.bn1"), 1, 0)?,
                conv2: src.conv_bn(&format!("{p}.conv2"), &format!("{p}.bn2"), stride, 1)?,
                conv3: src.conv_bn(&format!("{p}.conv3"), &format!("{p}.bn3"), 1, 0)?,
                downsample,
            });
        }
        let out = blocks[0].conv3.out_channels();
        if out != spec.out_channels()[stage] {
            return Err(Error::WeightsLoad {
                path: path.to_path_buf(),
                reason: format!(
                    "{prefix} outputs {out} channels, architecture expects {}",
                    spec.out_channels()[stage]
                ),
            });
        }
        layers.push(blocks);
    }
    Ok((Body::Wide { stem, layers }, digest))
}

impl TeacherNet {
    pub fn kind(&self) -> TeacherKind {
        self.config.kind
    }

    pub fn config(&self) -> &TeacherConfig {
        &self.config
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Always true: teacher weights are never exposed as trainable variables.
    pub fn is_frozen(&self) -> bool {
        true
    }

    pub fn stage_shapes(&self) -> &[StageShape; 4] {
        &self.stage_shapes
    }

    pub fn descriptor(&self) -> TeacherDescriptor {
        TeacherDescriptor {
            config: self.config.clone(),
            seed: self.seed,
            weights_sha256: self.weights_sha256.clone(),
        }
    }

    fn convs(&self) -> Vec<&Conv2d> {
        match &self.body {
            Body::Tiny(stages) => stages.iter().flat_map(|s| [&s.conv1, &s.conv2]).collect(),
            Body::Wide { stem, layers } => std::iter::once(stem)
                .chain(layers.iter().flatten().flat_map(|b| {
                    [&b.conv1, &b.conv2, &b.conv3]
                        .into_iter()
                        .chain(b.downsample.as_ref())
                }))
                .collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.convs().iter().map(|c| c.num_params()).sum()
    }

    /// SHA-256 over every weight, in a fixed order.
    pub fn parameter_digest(&self) -> Result<String> {
        let mut h = Sha256::new();
        for c in self.convs() {
            for t in std::iter::once(c.weight()).chain(c.bias()) {
                for v in crate::nn::TensorData::from_tensor(t)?.data {
                    h.update(v.to_le_bytes());
                }
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Normalize and stack images into a `(batch, 3, h, w)` tensor.
    pub fn batch_images(&self, images: &[&ImageTensor]) -> Result<Tensor> {
        let s = self.config.image_size;
        let mut ts = Vec::with_capacity(images.len());
        for img in images {
            if img.height() != s || img.width() != s {
                return Err(Error::Input(format!(
                    "image is {}x{}, teacher expects {s}x{s}",
                    img.height(),
                    img.width()
                )));
            }
            ts.push(img.normalized(self.config.norm_mean, self.config.norm_std, &self.device)?);
        }
        Ok(Tensor::stack(&ts, 0)?)
    }

    pub fn extract_features(&self, image: &ImageTensor) -> Result<FeaturePyramid> {
        Ok(self.extract_batch(&[image], false)?.pyramid)
    }

    /// Run the teacher on a batch. The stage-4 map is computed only on request.
    pub fn extract_batch(&self, images: &[&ImageTensor], with_stage4: bool) -> Result<TeacherOutput> {
        let x = self.batch_images(images)?;
        self.forward(&x, with_stage4)
    }

    pub fn forward(&self, x: &Tensor, with_stage4: bool) -> Result<TeacherOutput> {
        let s = self.config.image_size;
        let (_, c, h, w) = x.dims4()?;
        if c != 3 || h != s || w != s {
            return Err(Error::Input(format!(
                "teacher input must be (B, 3, {s}, {s}), got {:?}",
                x.dims()
            )));
        }
        let x = x.detach();
        let mut feats = Vec::with_capacity(4);
        match &self.body {
            Body::Tiny(stages) => {
                let mut y = x;
                for (i, st) in stages.iter().enumerate() {
                    if i == 3 && !with_stage4 {
                        break;
                    }
                    y = st.conv1.forward(&y)?.relu()?;
                    y = st.conv2.forward(&y)?.relu()?;
                    feats.push(y.clone());
                }
            }
            Body::Wide { stem, layers } => {
                let y = stem.forward(&x)?.relu()?;
                let y = y.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
                let mut y = y.max_pool2d_with_stride(3, 2)?;
                for (i, blocks) in layers.iter().enumerate() {
                    if i == 3 && !with_stage4 {
                        break;
                    }
                    for b in blocks {
                        y = b.forward(&y)?;
                    }
                    feats.push(y.clone());
                }
                if with_stage4 && layers.len() < 4 {
                    return Err(Error::State(
                        "weights file carries no stage-4 parameters".into(),
                    ));
                }
            }
        }
        let mut maps = feats
            .into_iter()
            .enumerate()
            .map(|(i, t)| FeatureMap::new(t.detach(), i + 1));
        let pyramid = FeaturePyramid::new([
            maps.next().expect("stage 1")?,
            maps.next().expect("stage 2")?,
            maps.next().expect("stage 3")?,
        ])?;
        let stage4 = maps.next().transpose()?;
        Ok(TeacherOutput { pyramid, stage4 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TeacherNet {
        build_teacher(&TeacherConfig::tiny(64), 7).unwrap()
    }

    #[test]
    fn tiny_teacher_is_deterministic() {
        let a = tiny();
        let b = tiny();
        assert_eq!(a.parameter_digest().unwrap(), b.parameter_digest().unwrap());
        let c = build_teacher(&TeacherConfig::tiny(64), 8).unwrap();
        assert_ne!(a.parameter_digest().unwrap(), c.parameter_digest().unwrap());
    }

    #[test]
    fn declared_stage_shapes() {
        let wide = TeacherConfig::pretrained(256, "unused.safetensors");
        let s = wide.stage_shapes().unwrap();
        let dims: Vec<_> = s.iter().map(|s| (s.height, s.width, s.channels)).collect();
        assert_eq!(
            dims,
            vec![(64, 64, 256), (32, 32, 512), (16, 16, 1024), (8, 8, 2048)]
        );
        let s = TeacherConfig::tiny(64).stage_shapes().unwrap();
        let dims: Vec<_> = s.iter().map(|s| (s.height, s.width, s.channels)).collect();
        assert_eq!(dims, vec![(32, 32, 16), (16, 16, 32), (8, 8, 64), (4, 4, 128)]);
    }

    #[test]
    fn tiny_forward_matches_declared_shapes() {
        let t = tiny();
        let img = ImageTensor::zeros(64, 64);
        let out = t.extract_batch(&[&img], true).unwrap();
        for (l, f) in out.pyramid.levels.iter().enumerate() {
            assert_eq!(f.shape(), t.stage_shapes()[l]);
            assert!(f.is_finite().unwrap());
        }
        assert_eq!(out.stage4.unwrap().shape(), t.stage_shapes()[3]);
    }

    #[test]
    fn same_image_gives_identical_pyramids() {
        let t = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let px: Vec<f32> = (0..64 * 64 * 3)
            .map(|_| rand::Rng::random::<f32>(&mut rng))
            .collect();
        let img = ImageTensor::new(64, 64, px).unwrap();
        let a = t.extract_features(&img).unwrap();
        let b = t.extract_features(&img).unwrap();
        for l in 0..3 {
            let x = a.levels[l].tensor.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            let y = b.levels[l].tensor.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert_eq!(x, y);
        }
    }

    #[test]
    fn one_pixel_change_reaches_level_one() {
        let t = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let px: Vec<f32> = (0..64 * 64 * 3)
            .map(|_| rand::Rng::random::<f32>(&mut rng))
            .collect();
        let a = ImageTensor::new(64, 64, px.clone()).unwrap();
        let mut px2 = px;
        let idx = (30 * 64 + 17) * 3 + 1;
        px2[idx] = 1.0 - px2[idx];
        let b = ImageTensor::new(64, 64, px2).unwrap();
        let fa = t.extract_features(&a).unwrap().levels[0].tensor.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let fb = t.extract_features(&b).unwrap().levels[0].tensor.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(fa.iter().zip(&fb).any(|(x, y)| x != y));
    }

    #[test]
    fn wrong_resolution_is_an_input_error() {
        let t = tiny();
        let img = ImageTensor::zeros(32, 32);
        assert!(matches!(t.extract_features(&img), Err(Error::Input(_))));
    }

    #[test]
    fn unsupported_kind_is_config_error() {
        assert!(matches!("resnet18".parse::<TeacherKind>(), Err(Error::Config(_))));
    }

    #[test]
    fn missing_weights_file_is_load_error() {
        let cfg = TeacherConfig::pretrained(64, "/nonexistent/wrn50.safetensors");
        assert!(matches!(build_teacher(&cfg, 0), Err(Error::WeightsLoad { .. })));
    }

    #[test]
    fn corrupt_weights_file_is_load_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.safetensors");
        std::fs::write(&p, b"definitely not safetensors").unwrap();
        let cfg = TeacherConfig::pretrained(64, &p);
        assert!(matches!(build_teacher(&cfg, 0), Err(Error::WeightsLoad { .. })));
    }
}
