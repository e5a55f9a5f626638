use candle_core::{DType, Device, Tensor};
use dskd_core::bottleneck::Gccb;
use dskd_core::nn::{Mode, ParamStore};
use dskd_core::{build_teacher, ImageTensor, Student, StudentRole, TeacherConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn values(t: &Tensor) -> Vec<f32> {
    t.to_dtype(DType::F32).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

#[test]
fn tiny_teacher_is_a_function_of_its_seed() {
    let cfg = TeacherConfig::tiny(64);
    let a = build_teacher(&cfg, 7).unwrap();
    let b = build_teacher(&cfg, 7).unwrap();
    let c = build_teacher(&cfg, 8).unwrap();
    assert_eq!(a.parameter_digest().unwrap(), b.parameter_digest().unwrap());
    assert_ne!(a.parameter_digest().unwrap(), c.parameter_digest().unwrap());
    let shapes = a.stage_shapes().map(|s| (s.height, s.width, s.channels));
    assert_eq!(&shapes[..3], &[(32, 32, 16), (16, 16, 32), (8, 8, 64)]);
}

#[test]
fn zero_image_gives_finite_features_of_declared_shape() {
    let t = build_teacher(&TeacherConfig::tiny(64), 0).unwrap();
    let p = t.extract_features(&ImageTensor::zeros(64, 64)).unwrap();
    for (l, f) in p.levels.iter().enumerate() {
        assert_eq!(f.shape(), t.stage_shapes()[l]);
        assert!(f.is_finite().unwrap());
    }
}

#[test]
fn pooled_vector_ignores_spatial_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for g in [4, 8] {
        let mut store = ParamStore::new(Device::Cpu);
        let block = Gccb::new(&mut store, "gccb", 8, g, &mut rng).unwrap();
        let (h, w) = (4, 5);
        let v: Vec<f32> = (0..8 * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut perm: Vec<usize> = (0..h * w).collect();
        perm.shuffle(&mut rng);
        let shuffled: Vec<f32> = (0..8)
            .flat_map(|c| perm.iter().map(move |&p| (c, p)))
            .map(|(c, p)| v[c * h * w + p])
            .collect();
        let x = Tensor::from_vec(v, (1, 8, h, w), &Device::Cpu).unwrap();
        let y = Tensor::from_vec(shuffled, (1, 8, h, w), &Device::Cpu).unwrap();
        let a = values(&block.condense(&x).unwrap());
        let b = values(&block.condense(&y).unwrap());
        assert_eq!(a.len(), g);
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-6);
        }
        assert_eq!(block.forward(&x).unwrap().dims(), x.dims());
    }
}

#[test]
fn students_mirror_the_teacher_and_share_no_parameters() {
    let teacher = build_teacher(&TeacherConfig::tiny(64), 0).unwrap();
    let shapes = *teacher.stage_shapes();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let local = Student::new(StudentRole::Local, shapes, Some(64), &mut rng).unwrap();
    let global = Student::new(StudentRole::Global, shapes, Some(64), &mut rng).unwrap();
    assert!(global.has_gccb() && !local.has_gccb());

    let mut img = ImageTensor::zeros(64, 64);
    for (i, p) in img.pixels_mut().iter_mut().enumerate() {
        *p = (i % 7) as f32 / 7.0;
    }
    let tp = teacher.extract_features(&img).unwrap();
    for s in [&local, &global] {
        let out = s.forward(&tp, Mode::Eval).unwrap();
        assert_eq!(out.shapes(), tp.shapes());
        let again = s.forward(&tp, Mode::Eval).unwrap();
        for l in 0..3 {
            assert!(out.levels[l].is_finite().unwrap());
            assert_eq!(values(&out.levels[l].tensor), values(&again.levels[l].tensor));
        }
    }

    let lv = local.store().trainable();
    let gv = global.store().trainable();
    for a in &lv {
        assert!(gv.iter().all(|b| a.as_tensor().id() != b.as_tensor().id()));
    }
    let names: Vec<&String> = local.store().names().collect();
    assert!(global.store().names().all(|n| !names.contains(&n)));
}
