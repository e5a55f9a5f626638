//! Student decoders: the teacher run backwards, upsampling where it downsampled.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{FeatureMap, FeaturePyramid, StageShape};
use crate::bottleneck::Embedding;
use crate::error::{Error, Result};
use crate::nn::{Mode, ParamStore, ResidualUp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StudentRole {
    Local,
    Global,
}

impl StudentRole {
    pub fn name(self) -> &'static str {
        match self {
            Self::Local => "local",
            Self::Global => "global",
        }
    }
}

impl std::str::FromStr for StudentRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "local" => Ok(Self::Local),
            "global" => Ok(Self::Global),
            other => Err(Error::Config(format!(
                "unknown student `{other}` (expected local or global)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StudentDecoder {
    role: StudentRole,
    input_shape: StageShape,
    output_shapes: [StageShape; 3],
    // coarsest first: produces level 3, then 2, then 1
    stages: [ResidualUp; 3],
}

impl StudentDecoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        role: StudentRole,
        shapes: [StageShape; 4],
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let c = shapes.map(|s| s.channels);
        let up3 = ResidualUp::new(store, &format!("{name}.up3"), c[3], c[2], rng)?;
        let up2 = ResidualUp::new(store, &format!("{name}.up2"), c[2], c[1], rng)?;
        let up1 = ResidualUp::new(store, &format!("{name}.up1"), c[1], c[0], rng)?;
        Ok(Self {
            role,
            input_shape: shapes[3],
            output_shapes: [shapes[0], shapes[1], shapes[2]],
            stages: [up3, up2, up1],
        })
    }

    pub fn role(&self) -> StudentRole {
        self.role
    }

    pub fn output_shapes(&self) -> &[StageShape; 3] {
        &self.output_shapes
    }

    pub fn decode(&self, embedding: &Embedding, mode: Mode) -> Result<FeaturePyramid> {
        let (_, c, h, w) = embedding.tensor.dims4()?;
        let s = self.input_shape;
        if (c, h, w) != (s.channels, s.height, s.width) {
            return Err(Error::Input(format!(
                "{} decoder expects embedding {}x{}x{}, got {h}x{w}x{c}",
                self.role.name(),
                s.height,
                s.width,
                s.channels
            )));
        }
        let f3 = self.stages[0].forward(&embedding.tensor, mode)?;
        let f2 = self.stages[1].forward(&f3, mode)?;
        let f1 = self.stages[2].forward(&f2, mode)?;
        FeaturePyramid::new([
            FeatureMap::new(f1, 1)?,
            FeatureMap::new(f2, 2)?,
            FeatureMap::new(f3, 3)?,
        ])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::TeacherConfig;
    use crate::bottleneck::EmbeddingOrigin;
    use candle_core::{DType, Device, Tensor};
    use rand::SeedableRng;

    fn decoder() -> (StudentDecoder, [StageShape; 4]) {
        let shapes = TeacherConfig::tiny(64).stage_shapes().unwrap();
        let mut store = ParamStore::new(Device::Cpu);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        (
            StudentDecoder::new(&mut store, "dec", StudentRole::Local, shapes, &mut rng).unwrap(),
            shapes,
        )
    }

    #[test]
    fn output_mirrors_teacher_shapes() {
        let (dec, shapes) = decoder();
        let emb = Embedding {
            tensor: Tensor::zeros((2, 128, 4, 4), DType::F32, &Device::Cpu).unwrap(),
            origin: EmbeddingOrigin::Local,
        };
        let p = dec.decode(&emb, Mode::Train).unwrap();
        for l in 0..3 {
            assert_eq!(p.levels[l].shape(), shapes[l]);
            assert_eq!(p.levels[l].level, l + 1);
            assert!(p.levels[l].is_finite().unwrap());
        }
    }

    #[test]
    fn eval_decode_is_deterministic() {
        let (dec, _) = decoder();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v: Vec<f32> = (0..128 * 16).map(|_| rand::Rng::random::<f32>(&mut rng)).collect();
        let emb = Embedding {
            tensor: Tensor::from_vec(v, (1, 128, 4, 4), &Device::Cpu).unwrap(),
            origin: EmbeddingOrigin::Global,
        };
        let a = dec.decode(&emb, Mode::Eval).unwrap();
        let b = dec.decode(&emb, Mode::Eval).unwrap();
        for l in 0..3 {
            let x: Vec<f32> = a.levels[l].tensor.flatten_all().unwrap().to_vec1().unwrap();
            let y: Vec<f32> = b.levels[l].tensor.flatten_all().unwrap().to_vec1().unwrap();
            assert_eq!(x, y);
        }
    }

    #[test]
    fn wrong_embedding_shape_is_rejected() {
        let (dec, _) = decoder();
        let emb = Embedding {
            tensor: Tensor::zeros((1, 64, 4, 4), DType::F32, &Device::Cpu).unwrap(),
            origin: EmbeddingOrigin::Local,
        };
        assert!(matches!(dec.decode(&emb, Mode::Eval), Err(Error::Input(_))));
    }
}
