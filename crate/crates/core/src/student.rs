//! A student: bottleneck embedding plus decoder, owning its parameters.

use candle_core::{Device, Tensor};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{FeaturePyramid, StageShape};
use crate::bottleneck::{OcbeGlobal, OcbeLocal};
use crate::decoders::{StudentDecoder, StudentRole};
use crate::error::Result;
use crate::losses::{
    affinity_kl_map_chunked, cosine_score_map, global_loss, local_loss, ScoreKind, ScoreMap,
};
use crate::nn::{fork_rng, Mode, ParamStore};
use crate::scoring::accumulate_maps;

#[derive(Debug, Clone)]
enum Encoder {
    Local(OcbeLocal),
    Global(OcbeGlobal),
}

#[derive(Debug)]
pub struct Student {
    role: StudentRole,
    store: ParamStore,
    encoder: Encoder,
    decoder: StudentDecoder,
}

impl Student {
    /// `gccb` is only consulted for the global student.
    pub fn new(
        role: StudentRole,
        shapes: [StageShape; 4],
        gccb: Option<usize>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut store = ParamStore::new(Device::Cpu);
        let mut enc_rng = fork_rng(rng);
        let mut dec_rng = fork_rng(rng);
        let prefix = role.name();
        let encoder = match role {
            StudentRole::Local => Encoder::Local(OcbeLocal::new(
                &mut store,
                &format!("{prefix}.ocbe"),
                shapes,
                &mut enc_rng,
            )?),
            StudentRole::Global => Encoder::Global(OcbeGlobal::new(
                &mut store,
                &format!("{prefix}.ocbe"),
                shapes,
                gccb,
                &mut enc_rng,
            )?),
        };
        let decoder =
            StudentDecoder::new(&mut store, &format!("{prefix}.decoder"), role, shapes, &mut dec_rng)?;
        Ok(Self {
            role,
            store,
            encoder,
            decoder,
        })
    }

    pub fn role(&self) -> StudentRole {
        self.role
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn has_gccb(&self) -> bool {
        matches!(&self.encoder, Encoder::Global(g) if g.gccb().is_some())
    }

    pub fn forward(&self, teacher: &FeaturePyramid, mode: Mode) -> Result<FeaturePyramid> {
        let emb = match &self.encoder {
            Encoder::Local(e) => e.forward(teacher, mode)?,
            Encoder::Global(e) => e.forward(&teacher.levels[2], mode)?,
        };
        self.decoder.decode(&emb, mode)
    }

    /// Training objective of this student for one batch.
    pub fn loss(
        &self,
        teacher: &FeaturePyramid,
        student: &FeaturePyramid,
        temperature: f64,
        chunk: usize,
    ) -> Result<Tensor> {
        match self.role {
            StudentRole::Local => local_loss(teacher, student),
            StudentRole::Global => global_loss(teacher, student, temperature, chunk),
        }
    }

    /// Per-level discrepancy maps, each `(batch, h_l, w_l)`.
    pub fn level_maps(
        &self,
        teacher: &FeaturePyramid,
        student: &FeaturePyramid,
        temperature: f64,
        chunk: usize,
    ) -> Result<Vec<Tensor>> {
        (0..3)
            .map(|l| {
                let (t, s) = (&teacher.levels[l], &student.levels[l]);
                match self.role {
                    StudentRole::Local => cosine_score_map(t, s),
                    StudentRole::Global => affinity_kl_map_chunked(t, s, temperature, chunk),
                }
            })
            .collect()
    }

    /// Level maps upsampled to `size x size` and summed, one per batch element.
    pub fn accumulated_maps(
        &self,
        teacher: &FeaturePyramid,
        temperature: f64,
        chunk: usize,
        size: usize,
    ) -> Result<Vec<ScoreMap>> {
        let student = self.forward(teacher, Mode::Eval)?;
        let kind = match self.role {
            StudentRole::Local => ScoreKind::Cosine,
            StudentRole::Global => ScoreKind::AffinityKl,
        };
        let per_level = self
            .level_maps(teacher, &student, temperature, chunk)?
            .iter()
            .map(|t| ScoreMap::from_batch(t, kind))
            .collect::<Result<Vec<_>>>()?;
        (0..teacher.levels[0].batch())
            .map(|b| {
                let levels: Vec<ScoreMap> = per_level.iter().map(|l| l[b].clone()).collect();
                accumulate_maps(&levels, (size, size))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::TeacherConfig;
    use rand::SeedableRng;

    fn shapes() -> [StageShape; 4] {
        TeacherConfig::tiny(64).stage_shapes().unwrap()
    }

    #[test]
    fn parameter_names_carry_the_role() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = Student::new(StudentRole::Global, shapes(), Some(64), &mut rng).unwrap();
        assert!(s.store().names().all(|n| n.starts_with("global.")));
        assert!(s.has_gccb());
    }

    #[test]
    fn decoder_init_does_not_depend_on_the_condensing_block() {
        let with = Student::new(
            StudentRole::Global,
            shapes(),
            Some(64),
            &mut ChaCha8Rng::seed_from_u64(3),
        )
        .unwrap();
        let without =
            Student::new(StudentRole::Global, shapes(), None, &mut ChaCha8Rng::seed_from_u64(3))
                .unwrap();
        let a = with.store().snapshot().unwrap();
        let b = without.store().snapshot().unwrap();
        for (k, v) in &b {
            assert_eq!(&a[k], v, "{k}");
        }
        assert!(a.len() > b.len());
    }
}
