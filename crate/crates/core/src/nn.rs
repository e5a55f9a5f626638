//! Minimal layer toolkit on top of candle tensors.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names so that a whole
//! module tree can be snapshotted into a checkpoint and restored bit-exactly.
//! Initialization draws from a caller-supplied ChaCha stream rather than
//! candle's global RNG, which keeps every run reproducible from its seed.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A flat tensor snapshot used by checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorData {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorData {
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        Ok(Self {
            shape: t.dims().to_vec(),
            data: t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?,
        })
    }

    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.data.clone(), self.shape.as_slice(), device)?)
    }
}

/// Named trainable parameters plus non-trainable buffers (batch-norm running stats).
#[derive(Debug)]
pub struct ParamStore {
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
    device: Device,
}

impl ParamStore {
    pub fn new(device: Device) -> Self {
        Self {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
            device,
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: String, t: Tensor, buffer: bool) -> Result<Var> {
        let map = if buffer {
            &mut self.buffers
        } else {
            &mut self.params
        };
        if map.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        let var = Var::from_tensor(&t)?;
        map.insert(name, var.clone());
        Ok(var)
    }

    pub fn normal(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let dist = Normal::new(0.0f64, std)
            .map_err(|e| Error::Config(format!("invalid init std {std}: {e}")))?;
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| dist.sample(rng) as f32).collect();
        let t = Tensor::from_vec(data, shape, &self.device)?;
        self.insert(name.into(), t, false)
    }

    pub fn constant(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> Result<Var> {
        let t = (Tensor::ones(shape, DType::F32, &self.device)? * value)?;
        self.insert(name.into(), t, false)
    }

    pub fn buffer(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> Result<Var> {
        let t = (Tensor::ones(shape, DType::F32, &self.device)? * value)?;
        self.insert(name.into(), t, true)
    }

    /// Trainable variables in name order.
    pub fn trainable(&self) -> Vec<Var> {
        self.params.values().cloned().collect()
    }

    pub fn num_trainable(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys().chain(self.buffers.keys())
    }

    pub fn snapshot(&self) -> Result<BTreeMap<String, TensorData>> {
        self.params
            .iter()
            .chain(self.buffers.iter())
            .map(|(k, v)| Ok((k.clone(), TensorData::from_tensor(v.as_tensor())?)))
            .collect()
    }

    /// Overwrite every parameter and buffer from `data`. Names and shapes must match exactly.
    pub fn restore(&self, data: &BTreeMap<String, TensorData>) -> Result<()> {
        let expected = self.params.len() + self.buffers.len();
        if data.len() != expected {
            return Err(Error::Checkpoint(format!(
                "expected {expected} tensors, found {}",
                data.len()
            )));
        }
        for (name, var) in self.params.iter().chain(self.buffers.iter()) {
            let src = data
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if src.shape != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {name}: stored {:?}, expected {:?}",
                    src.shape,
                    var.dims()
                )));
            }
            var.set(&src.to_tensor(&self.device)?)?;
        }
        Ok(())
    }
}

fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let weight = store.normal(
            format!("{name}.weight"),
            &[c_out, c_in, kernel, kernel],
            he_std(c_in * kernel * kernel),
            rng,
        )?;
        let bias = if bias {
            Some(store.constant(format!("{name}.bias"), &[c_out], 0.0)?)
        } else {
            None
        };
        Ok(Self {
            weight: weight.as_tensor().clone(),
            bias: bias.map(|b| b.as_tensor().clone()),
            stride,
            padding: kernel / 2,
        })
    }

    /// A frozen convolution built from plain tensors (no gradient tracking).
    pub fn frozen(weight: Tensor, bias: Option<Tensor>, stride: usize, padding: usize) -> Self {
        Self {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn num_params(&self) -> usize {
        self.weight.elem_count() + self.bias.as_ref().map_or(0, |b| b.elem_count())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        crate::ops::conv2d(x, &self.weight, self.bias.as_ref(), self.stride, self.padding)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    gamma: Tensor,
    beta: Tensor,
    running_mean: Var,
    running_var: Var,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let gamma = store.constant(format!("{name}.weight"), &[channels], 1.0)?;
        let beta = store.constant(format!("{name}.bias"), &[channels], 0.0)?;
        let running_mean = store.buffer(format!("{name}.running_mean"), &[channels], 0.0)?;
        let running_var = store.buffer(format!("{name}.running_var"), &[channels], 1.0)?;
        Ok(Self {
            gamma: gamma.as_tensor().clone(),
            beta: beta.as_tensor().clone(),
            running_mean,
            running_var,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let c = x.dim(1)?;
        let (mean, var) = match mode {
            Mode::Train => {
                let (b, _, h, w) = x.dims4()?;
                let mean = x.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
                let centered = x.broadcast_sub(&mean)?;
                let var = centered.sqr()?.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
                let n = (b * h * w) as f64;
                let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
                let rm = ((self.running_mean.as_tensor() * (1.0 - BN_MOMENTUM))?
                    + (mean.detach().flatten_all()? * BN_MOMENTUM)?)?;
                let rv = ((self.running_var.as_tensor() * (1.0 - BN_MOMENTUM))?
                    + (var.detach().flatten_all()? * (BN_MOMENTUM * unbiased))?)?;
                self.running_mean.set(&rm)?;
                self.running_var.set(&rv)?;
                (mean, var)
            }
            Mode::Eval => (
                self.running_mean.as_tensor().reshape((1, c, 1, 1))?,
                self.running_var.as_tensor().reshape((1, c, 1, 1))?,
            ),
        };
        let normed = x
            .broadcast_sub(&mean)?
            .broadcast_div(&(var + BN_EPS)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.gamma.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.reshape((1, c, 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    conv: Conv2d,
    bn: BatchNorm,
}

impl ConvBnRelu {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), c_in, c_out, kernel, stride, false, rng)?,
            bn: BatchNorm::new(store, &format!("{name}.bn"), c_out)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        Ok(self.bn.forward(&self.conv.forward(x)?, mode)?.relu()?)
    }
}

/// Residual block that halves the spatial size: two 3x3 convs with a strided 1x1 shortcut.
#[derive(Debug, Clone)]
pub struct ResidualDown {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    shortcut: Conv2d,
    bn_short: BatchNorm,
}

impl ResidualDown {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), c_in, c_out, 3, 2, false, rng)?,
            bn1: BatchNorm::new(store, &format!("{name}.bn1"), c_out)?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), c_out, c_out, 3, 1, false, rng)?,
            bn2: BatchNorm::new(store, &format!("{name}.bn2"), c_out)?,
            shortcut: Conv2d::new(store, &format!("{name}.down"), c_in, c_out, 1, 2, false, rng)?,
            bn_short: BatchNorm::new(store, &format!("{name}.down_bn"), c_out)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let y = self.bn1.forward(&self.conv1.forward(x)?, mode)?.relu()?;
        let y = self.bn2.forward(&self.conv2.forward(&y)?, mode)?;
        let s = self.bn_short.forward(&self.shortcut.forward(x)?, mode)?;
        Ok((y + s)?.relu()?)
    }
}

/// Mirror of [`ResidualDown`]: nearest-neighbour 2x upsampling followed by convolution.
#[derive(Debug, Clone)]
pub struct ResidualUp {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    shortcut: Conv2d,
    bn_short: BatchNorm,
}

impl ResidualUp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), c_in, c_out, 3, 1, false, rng)?,
            bn1: BatchNorm::new(store, &format!("{name}.bn1"), c_out)?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), c_out, c_out, 3, 1, false, rng)?,
            bn2: BatchNorm::new(store, &format!("{name}.bn2"), c_out)?,
            shortcut: Conv2d::new(store, &format!("{name}.up"), c_in, c_out, 1, 1, false, rng)?,
            bn_short: BatchNorm::new(store, &format!("{name}.up_bn"), c_out)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let up = crate::ops::upsample2x(x)?;
        let y = self.bn1.forward(&self.conv1.forward(&up)?, mode)?.relu()?;
        let y = self.bn2.forward(&self.conv2.forward(&y)?, mode)?;
        let s = self.bn_short.forward(&self.shortcut.forward(&up)?, mode)?;
        Ok((y + s)?.relu()?)
    }
}

/// Draw a fresh sub-stream seed so that independent modules do not share RNG state.
pub fn fork_rng(rng: &mut ChaCha8Rng) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(rng.random())
}

/// Per-position L2 norm along `dim`, clamped from below at `eps`.
///
/// Clamping the squared norm before the square root keeps the gradient finite
/// for all-zero vectors.
pub fn clamped_norm(x: &Tensor, dim: usize, eps: f64) -> Result<Tensor> {
    Ok(x.sqr()?.sum_keepdim(dim)?.maximum(eps * eps)?.sqrt()?)
}

/// Numerically stable log-softmax over the last axis.
///
/// The row maximum is detached: it cancels analytically, so no gradient is lost.
pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}
