//! One-class bottleneck embeddings for the two students.
//!
//! The local encoder fuses all three teacher levels into a compact stage-4
//! sized embedding. The global encoder runs a trainable stage 4 on the level-3
//! teacher map and then squeezes it through the global context condensing
//! block: a global average pool down to a single `1 x 1 x g` vector, broadcast
//! back over the grid and re-expanded by a 3x3 convolution.

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{FeatureMap, FeaturePyramid, StageShape};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvBnRelu, Mode, ParamStore, ResidualDown};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingOrigin {
    Local,
    Global,
}

#[derive(Debug, Clone)]
pub struct Embedding {
    /// `(batch, c4, h4, w4)`
    pub tensor: Tensor,
    pub origin: EmbeddingOrigin,
}

fn check_shape(map: &FeatureMap, expected: StageShape, what: &str) -> Result<()> {
    if map.shape() != expected {
        return Err(Error::Input(format!(
            "{what}: feature map has shape {:?}, expected {:?}",
            map.shape(),
            expected
        )));
    }
    Ok(())
}

/// Multi-level fusion encoder of the local student.
#[derive(Debug, Clone)]
pub struct OcbeLocal {
    shapes: [StageShape; 4],
    level1_down1: ConvBnRelu,
    level1_down2: ConvBnRelu,
    level2_down: ConvBnRelu,
    fuse: ResidualDown,
}

impl OcbeLocal {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        shapes: [StageShape; 4],
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let [c1, c2, c3, c4] = shapes.map(|s| s.channels);
        Ok(Self {
            shapes,
            level1_down1: ConvBnRelu::new(store, &format!("{name}.l1_down1"), c1, c2, 3, 2, rng)?,
            level1_down2: ConvBnRelu::new(store, &format!("{name}.l1_down2"), c2, c3, 3, 2, rng)?,
            level2_down: ConvBnRelu::new(store, &format!("{name}.l2_down"), c2, c3, 3, 2, rng)?,
            fuse: ResidualDown::new(store, &format!("{name}.fuse"), 3 * c3, c4, rng)?,
        })
    }

    pub fn forward(&self, pyramid: &FeaturePyramid, mode: Mode) -> Result<Embedding> {
        for l in 0..3 {
            check_shape(&pyramid.levels[l], self.shapes[l], "local bottleneck")?;
        }
        let [f1, f2, f3] = &pyramid.levels;
        let a = self
            .level1_down2
            .forward(&self.level1_down1.forward(&f1.tensor, mode)?, mode)?;
        let b = self.level2_down.forward(&f2.tensor, mode)?;
        let cat = Tensor::cat(&[&a, &b, &f3.tensor], 1)?;
        Ok(Embedding {
            tensor: self.fuse.forward(&cat, mode)?,
            origin: EmbeddingOrigin::Local,
        })
    }
}

/// Global context condensing block.
#[derive(Debug, Clone)]
pub struct Gccb {
    channels: usize,
    g: usize,
    down_proj: Option<Conv2d>,
    restore_conv: Conv2d,
    up_proj: Option<Conv2d>,
}

impl Gccb {
    /// Projections to and from the condensed space exist only when `g != channels`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        g: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if g == 0 {
            return Err(Error::Config("GCCB channel count g must be positive".into()));
        }
        let (down_proj, up_proj) = if g != channels {
            (
                Some(Conv2d::new(store, &format!("{name}.down_proj"), channels, g, 1, 1, true, rng)?),
                Some(Conv2d::new(store, &format!("{name}.up_proj"), g, channels, 1, 1, true, rng)?),
            )
        } else {
            (None, None)
        };
        let restore_conv = Conv2d::new(store, &format!("{name}.restore"), g, g, 3, 1, true, rng)?;
        Ok(Self {
            channels,
            g,
            down_proj,
            restore_conv,
            up_proj,
        })
    }

    pub fn g(&self) -> usize {
        self.g
    }

    pub fn has_projections(&self) -> bool {
        self.down_proj.is_some()
    }

    pub fn num_params(&self) -> usize {
        self.down_proj.as_ref().map_or(0, |c| c.num_params())
            + self.restore_conv.num_params()
            + self.up_proj.as_ref().map_or(0, |c| c.num_params())
    }

    /// Project to `g` channels and average over every spatial position: `(batch, g, 1, 1)`.
    pub fn condense(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dim(1)?;
        if c != self.channels {
            return Err(Error::Input(format!(
                "GCCB expects {} channels, got {c}",
                self.channels
            )));
        }
        let x = match &self.down_proj {
            Some(p) => p.forward(x)?,
            None => x.clone(),
        };
        Ok(x.mean_keepdim(2)?.mean_keepdim(3)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, _, h, w) = x.dims4()?;
        let pooled = self.condense(x)?;
        let spread = pooled.broadcast_as((b, self.g, h, w))?.contiguous()?;
        let y = self.restore_conv.forward(&spread)?.relu()?;
        match &self.up_proj {
            Some(p) => Ok(p.forward(&y)?),
            None => Ok(y),
        }
    }
}

/// Encoder of the global student: trainable stage 4 followed by the condensing block.
#[derive(Debug, Clone)]
pub struct OcbeGlobal {
    input_shape: StageShape,
    stage4: ResidualDown,
    gccb: Option<Gccb>,
}

impl OcbeGlobal {
    /// `g = None` bypasses the condensing block.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        shapes: [StageShape; 4],
        g: Option<usize>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let (c3, c4) = (shapes[2].channels, shapes[3].channels);
        let stage4 = ResidualDown::new(store, &format!("{name}.stage4"), c3, c4, rng)?;
        let gccb = g
            .map(|g| Gccb::new(store, &format!("{name}.gccb"), c4, g, rng))
            .transpose()?;
        Ok(Self {
            input_shape: shapes[2],
            stage4,
            gccb,
        })
    }

    pub fn gccb(&self) -> Option<&Gccb> {
        self.gccb.as_ref()
    }

    pub fn stage4(&self, stage3: &FeatureMap, mode: Mode) -> Result<Tensor> {
        check_shape(stage3, self.input_shape, "global bottleneck")?;
        self.stage4.forward(&stage3.tensor, mode)
    }

    pub fn forward(&self, stage3: &FeatureMap, mode: Mode) -> Result<Embedding> {
        let y = self.stage4(stage3, mode)?;
        let tensor = match &self.gccb {
            Some(g) => g.forward(&y)?,
            None => y,
        };
        Ok(Embedding {
            tensor,
            origin: EmbeddingOrigin::Global,
        })
    }
}
