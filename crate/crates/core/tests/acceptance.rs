//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits non-zero
//! if any criterion fails.
//!
//! `cargo test -p dskd-core --test acceptance` runs everything; trailing
//! arguments select criteria by number, e.g. `-- 2 3`.

mod common;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use candle_core::Var;
use dskd_core::losses::{
    affinity_kl_map_chunked, cosine_score_map, global_loss, local_loss, student_affinity,
    teacher_affinity,
};
use dskd_core::metrics::{au_spro, auroc, spro_at_threshold, spro_curve, CurvePoint};
use dskd_core::scoring::{fit_normalizer, gaussian_filter, image_score};
use dskd_core::{
    checkpoint, evaluate, load_loco_layout, synth_toy_dataset, toy_defect_config, train,
    write_loco_layout, DatasetSplit, DefectRegion, DefectType, EvalRecord, FeatureMap,
    FeaturePyramid, Label, ScoreKind, ScoreMap, ScoreMode, StudentRole, TeacherKind,
    ToySceneConfig, TrainConfig,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use common::*;

type Check = std::result::Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn main() -> ExitCode {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(&str, fn() -> Check); 8] = [
        ("full-scale recipe defaults", recipe_defaults),
        ("loss invariants", loss_invariants),
        ("gradient verification", gradients),
        ("oracle equivalence", oracles),
        ("toy end-to-end", toy_end_to_end),
        ("GCCB ablation", gccb_ablation),
        ("determinism and round trip", determinism),
        ("scoring pipeline", scoring_pipeline),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let started = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {n}. {name} [{secs:.1}s]: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {n}. {name} [{secs:.1}s]: {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn recipe_defaults() -> Check {
    let c = TrainConfig::default();
    ensure!(c.learning_rate == 0.005, "learning rate {}", c.learning_rate);
    ensure!(c.adam_betas == [0.5, 0.999], "betas {:?}", c.adam_betas);
    ensure!(c.epochs == 200 && c.batch_size == 16, "epochs {} batch {}", c.epochs, c.batch_size);
    ensure!(c.image_size == 256, "image size {}", c.image_size);
    ensure!(c.temperature == 1.0, "temperature {}", c.temperature);
    ensure!(c.gccb_channels == 1024 && c.use_gccb, "gccb {} {}", c.gccb_channels, c.use_gccb);
    ensure!(c.teacher == TeacherKind::PretrainedWideResidual, "teacher {}", c.teacher);
    ensure!(
        c.students == [StudentRole::Local, StudentRole::Global],
        "students {:?}",
        c.students
    );
    Ok("lr 0.005, Adam (0.5, 0.999), 200 epochs x 16, 256 px, T = 1, g = 1024; \
        paper-scale numbers need the real dataset and pretrained teacher and are not claimed"
        .into())
}

fn random_pair(r: &mut ChaCha8Rng, shapes: [(usize, usize, usize); 3]) -> (FeaturePyramid, FeaturePyramid) {
    (random_pyramid(r, shapes), random_pyramid(r, shapes))
}

fn small_shapes(r: &mut ChaCha8Rng) -> [(usize, usize, usize); 3] {
    [0; 3].map(|_| (r.random_range(1..=8), r.random_range(1..=4), r.random_range(1..=4)))
}

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |b, j| if v[j] > v[b] { j } else { b })
}

fn loss_invariants() -> Check {
    let started = Instant::now();
    let mut r = rng(100);
    let mut worst_identity: f64 = 0.0;
    for _ in 0..50 {
        let shapes = small_shapes(&mut r);
        let p = random_pyramid(&mut r, shapes);
        worst_identity = worst_identity.max(scalar(&local_loss(&p, &p).unwrap()).abs());
        for t in [0.1, 1.0, 10.0] {
            worst_identity = worst_identity.max(scalar(&global_loss(&p, &p, t, 1024).unwrap()).abs());
        }
    }
    ensure!(worst_identity < 1e-9, "identity loss {worst_identity:e}");

    let mut min_loss = f64::INFINITY;
    for _ in 0..1000 {
        let shapes = small_shapes(&mut r);
        let (t, s) = random_pair(&mut r, shapes);
        let temp = r.random_range(0.05..20.0);
        let l = scalar(&local_loss(&t, &s).unwrap());
        let g = scalar(&global_loss(&t, &s, temp, 1024).unwrap());
        min_loss = min_loss.min(l).min(g);
    }
    ensure!(min_loss >= 0.0, "negative loss {min_loss:e}");

    let mut worst_row: f64 = 0.0;
    for _ in 0..200 {
        let (c, h, w) = (r.random_range(1..=8), r.random_range(1..=8), r.random_range(1..=8));
        let t = random_map(&mut r, c, h, w);
        let s = random_map(&mut r, c, h, w);
        let mut argmaxes = Vec::new();
        for temp in [0.1, 1.0, 10.0] {
            let mut per_temp = Vec::new();
            for m in [teacher_affinity(&t, temp).unwrap(), student_affinity(&s, &t, temp).unwrap()] {
                for row in m.rows(0).unwrap() {
                    ensure!(row.iter().all(|p| *p > 0.0), "non-positive affinity");
                    worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
                    per_temp.push(argmax(&row));
                }
            }
            argmaxes.push(per_temp);
        }
        ensure!(
            argmaxes.windows(2).all(|w| w[0] == w[1]),
            "row argmax changed with temperature"
        );
    }
    ensure!(worst_row < 1e-6, "row sum error {worst_row:e}");

    let mut worst_scale: f64 = 0.0;
    for _ in 0..50 {
        let shapes = small_shapes(&mut r);
        let (t, s) = random_pair(&mut r, shapes);
        let levels = s.levels.clone().map(|f| {
            let (b, _, h, w) = f.tensor.dims4().unwrap();
            let k: Vec<f64> = (0..b * h * w).map(|_| r.random_range(0.1..10.0)).collect();
            let k = candle_core::Tensor::from_vec(k, (b, 1, h, w), f.tensor.device()).unwrap();
            FeatureMap::new(f.tensor.broadcast_mul(&k).unwrap(), f.level).unwrap()
        });
        let scaled = FeaturePyramid::new(levels).unwrap();
        let a = scalar(&global_loss(&t, &s, 1.0, 1024).unwrap());
        let b = scalar(&global_loss(&t, &scaled, 1.0, 1024).unwrap());
        worst_scale = worst_scale.max((a - b).abs() / a.abs().max(1.0));
    }
    ensure!(worst_scale < 1e-9, "scale invariance error {worst_scale:e}");

    let secs = started.elapsed().as_secs_f64();
    ensure!(secs < 30.0, "took {secs:.1}s");
    Ok(format!(
        "identity {worst_identity:.1e}, min loss over 1000 inputs {min_loss:.2e}, \
         row sums {worst_row:.1e}, argmax stable over T in {{0.1, 1, 10}}, scaling {worst_scale:.1e}"
    ))
}

fn gradient_error(
    t: &FeaturePyramid,
    s: &FeaturePyramid,
    loss: &dyn Fn(&FeaturePyramid, &FeaturePyramid) -> candle_core::Tensor,
) -> f64 {
    let vars = s.levels.clone().map(|f| Var::from_tensor(&f.tensor).unwrap());
    let tracked = FeaturePyramid::new(
        [0, 1, 2].map(|l| FeatureMap::new(vars[l].as_tensor().clone(), l + 1).unwrap()),
    )
    .unwrap();
    let grads = loss(t, &tracked).backward().unwrap();
    let shapes = s.levels.clone().map(|f| {
        let x = f.shape();
        (x.channels, x.height, x.width)
    });
    let base: [Vec<f64>; 3] = s.levels.clone().map(|f| flat(&f.tensor));
    const H: f64 = 1e-5;
    let mut worst: f64 = 0.0;
    for l in 0..3 {
        for (k, a) in flat(grads.get(vars[l].as_tensor()).unwrap()).iter().enumerate() {
            let eval = |d: f64| {
                let mut v = base.clone();
                v[l][k] += d;
                scalar(&loss(t, &pyramid(shapes, v)))
            };
            let numeric = (eval(H) - eval(-H)) / (2.0 * H);
            let scale = a.abs().max(numeric.abs());
            if scale > 1e-7 {
                worst = worst.max((a - numeric).abs() / scale);
            }
        }
    }
    worst
}

fn gradients() -> Check {
    let mut r = rng(101);
    let (mut local_worst, mut global_worst): (f64, f64) = (0.0, 0.0);
    const TRIALS: usize = 20;
    for trial in 0..TRIALS {
        let shapes = small_shapes(&mut r);
        let (t, s) = random_pair(&mut r, shapes);
        let temp = [0.5, 1.0, 2.0][trial % 3];
        local_worst = local_worst.max(gradient_error(&t, &s, &|t, s| local_loss(t, s).unwrap()));
        global_worst = global_worst
            .max(gradient_error(&t, &s, &|t, s| global_loss(t, s, temp, 1024).unwrap()));
    }
    ensure!(
        local_worst < 1e-4 && global_worst < 1e-4,
        "relative error local {local_worst:e}, global {global_worst:e}"
    );
    Ok(format!(
        "{TRIALS} trials on maps up to 4x4x8, worst relative error local {local_worst:.1e}, \
         global {global_worst:.1e}"
    ))
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn fixture_record(values: Vec<f64>, pixels: &[usize], sat: f64) -> EvalRecord {
    let mut mask = vec![false; 16];
    for &p in pixels {
        mask[p] = true;
    }
    EvalRecord {
        name: "fixture".into(),
        image_score: 0.0,
        label: Label::Logical,
        anomaly_map: ScoreMap::new(4, 4, values, ScoreKind::Fused).unwrap(),
        regions: vec![DefectRegion::new(4, 4, mask, sat, DefectType::Logical, "fixture").unwrap()],
    }
}

fn oracles() -> Check {
    let mut r = rng(102);
    let mut worst: f64 = 0.0;
    for _ in 0..30 {
        let (c, h, w) = (r.random_range(1..=8), r.random_range(1..=8), r.random_range(1..=8));
        let temp = [0.1, 1.0, 10.0][r.random_range(0..3)];
        let t = random_map(&mut r, c, h, w);
        let s = random_map(&mut r, c, h, w);
        worst = worst.max(max_abs_diff(&flat(&cosine_score_map(&t, &s).unwrap()), &cosine_map(&t, &s)));
        for (got, want) in [
            (teacher_affinity(&t, temp).unwrap().rows(0).unwrap(), affinity(&t, &t, temp)),
            (student_affinity(&s, &t, temp).unwrap().rows(0).unwrap(), affinity(&s, &t, temp)),
        ] {
            for (g, w) in got.iter().zip(&want) {
                worst = worst.max(max_abs_diff(g, w));
            }
        }
        let kl = flat(&affinity_kl_map_chunked(&t, &s, temp, 16).unwrap());
        let want = kl_map(&t, &s, temp);
        let scale = want.iter().fold(1.0, |m: f64, v| m.max(v.abs()));
        worst = worst.max(max_abs_diff(&kl, &want) / scale);
    }
    ensure!(worst < 1e-6, "affinity/KL/cosine deviation {worst:e}");

    let mut instances = 0;
    while instances < 100 {
        let n = r.random_range(2..=200);
        let levels = r.random_range(2..=20);
        let mut labels: Vec<bool> = (0..n).map(|_| r.random_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        let scores: Vec<f64> = (0..n).map(|_| r.random_range(0..levels) as f64).collect();
        if scores.iter().all(|s| *s == scores[0]) {
            continue;
        }
        let (a, b) = (auroc(&scores, &labels).unwrap(), auroc_pairs(&scores, &labels));
        ensure!(a == b, "AUROC {a} vs pair counting {b}");
        instances += 1;
    }

    let mut v = vec![0.0; 16];
    v[0] = 1.0;
    v[15] = 1.0;
    let recs = vec![fixture_record(v, &[0, 1, 4, 5], 2.0)];
    let (fpr, spro) = spro_at_threshold(&recs, 1.0).unwrap();
    ensure!(
        (fpr - 1.0 / 12.0).abs() < 1e-9 && (spro - 0.5).abs() < 1e-9,
        "4x4 fixture gave ({fpr}, {spro})"
    );
    let curve = spro_curve(&recs, 512).unwrap();
    ensure!(
        curve.iter().any(|p| (p.fpr - 1.0 / 12.0).abs() < 1e-9 && (p.spro - 0.5).abs() < 1e-9),
        "curve misses (1/12, 0.5)"
    );
    let ramp = [(0.0, 0.0), (0.05, 1.0)].map(|(fpr, spro)| CurvePoint {
        threshold: 0.0,
        fpr,
        spro,
    });
    let area = au_spro(&ramp, 0.05).unwrap().value;
    ensure!((area - 0.5).abs() < 1e-9, "AU-sPRO of the ramp {area}");
    Ok(format!(
        "nested loops within {worst:.1e}; AUROC exact on 100 instances; (1/12, 0.5) and 0.5 fixtures"
    ))
}

/// Combined-mode AUROC floors, pinned from the seed-0 reference run
/// (structural 0.767, logical 0.875) less a 0.02 margin.
const FLOOR_STRUCTURAL: f64 = 0.747;
const FLOOR_LOGICAL: f64 = 0.855;
const TARGET_STRUCTURAL: f64 = 0.90;
const TARGET_LOGICAL: f64 = 0.80;
const BUDGET_SECS: f64 = 600.0;

fn toy_end_to_end() -> Check {
    let started = Instant::now();
    let data = synth_toy_dataset(&ToySceneConfig::default()).unwrap();
    let ckpt = train(&data, &TrainConfig::toy()).unwrap();
    let auroc_of = |mode| evaluate(&ckpt, &data, mode).unwrap().report.auroc;
    let local = auroc_of(ScoreMode::Local);
    let global = auroc_of(ScoreMode::Global);
    let combined = auroc_of(ScoreMode::Combined);
    let secs = started.elapsed().as_secs_f64();

    let losses = |role| {
        let l: Vec<f64> =
            ckpt.log.iter().filter(|r| r.student == role).map(|r| r.mean_loss).collect();
        (l[0], l[l.len() - 1])
    };
    let summary = format!(
        "AUROC struct/logic/mean: local {:.3}/{:.3}/{:.3}, global {:.3}/{:.3}/{:.3}, \
         combined {:.3}/{:.3}/{:.3}; {secs:.0}s",
        local.structural,
        local.logical,
        local.mean,
        global.structural,
        global.logical,
        global.mean,
        combined.structural,
        combined.logical,
        combined.mean
    );
    ensure!(secs <= BUDGET_SECS, "over budget: {summary}");
    for role in [StudentRole::Local, StudentRole::Global] {
        let (first, last) = losses(role);
        ensure!(last < first, "{} loss rose from {first} to {last}", role.name());
    }
    ensure!(local.structural > local.logical, "(a) fails: {summary}");
    ensure!(global.logical > local.logical, "(b) fails: {summary}");
    ensure!(
        combined.mean >= local.mean.max(global.mean) - 0.02,
        "(c) fails: {summary}"
    );
    ensure!(
        combined.structural >= FLOOR_STRUCTURAL && combined.logical >= FLOOR_LOGICAL,
        "below pinned floors ({FLOOR_STRUCTURAL}, {FLOOR_LOGICAL}): {summary}"
    );
    let target = if combined.structural >= TARGET_STRUCTURAL && combined.logical >= TARGET_LOGICAL {
        "targets met"
    } else {
        "below the 0.90 / 0.80 targets"
    };
    Ok(format!("{summary}; floors {FLOOR_STRUCTURAL}/{FLOOR_LOGICAL}, {target}"))
}

const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];
const ABLATION_TRAIN: usize = 64;

/// Global student only, with and without the bottleneck, on a smaller training
/// split. The trend must hold for every seed.
fn gccb_ablation() -> Check {
    let mut rows = Vec::new();
    let mut losing = Vec::new();
    let mut sums = (0.0, 0.0);
    for seed in ABLATION_SEEDS {
        let data = synth_toy_dataset(&ToySceneConfig {
            n_train: ABLATION_TRAIN,
            seed,
            ..Default::default()
        })
        .unwrap();
        let logical = |use_gccb| {
            let cfg = TrainConfig {
                seed,
                use_gccb,
                students: vec![StudentRole::Global],
                ..TrainConfig::toy()
            };
            let ckpt = train(&data, &cfg).unwrap();
            evaluate(&ckpt, &data, ScoreMode::Global).unwrap().report.auroc.logical
        };
        let (with, without) = (logical(true), logical(false));
        rows.push(format!("seed {seed} {with:.3} vs {without:.3}"));
        sums = (sums.0 + with, sums.1 + without);
        if with < without {
            losing.push(seed);
        }
    }
    let n = ABLATION_SEEDS.len() as f64;
    let summary = format!(
        "logical AUROC with vs without GCCB: {}; mean {:.3} vs {:.3}",
        rows.join(", "),
        sums.0 / n,
        sums.1 / n
    );
    ensure!(losing.is_empty(), "trend fails for seeds {losing:?}; {summary}");
    Ok(summary)
}

fn small_run() -> (DatasetSplit, TrainConfig) {
    let data = synth_toy_dataset(&ToySceneConfig {
        n_train: 8,
        n_validation: 4,
        n_test: 9,
        seed: 11,
        ..Default::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 4,
        seed: 11,
        ..TrainConfig::toy()
    };
    (data, cfg)
}

fn determinism() -> Check {
    let (data, cfg) = small_run();
    let a = train(&data, &cfg).unwrap();
    let b = train(&data, &cfg).unwrap();
    let bytes = checkpoint::to_bytes(&a).unwrap();
    ensure!(bytes == checkpoint::to_bytes(&b).unwrap(), "checkpoints differ");
    let report = |c| evaluate(c, &data, ScoreMode::Combined).unwrap().report.to_json().unwrap();
    ensure!(report(&a) == report(&b), "metrics differ");

    let dir = tempfile::tempdir().unwrap();
    let path: PathBuf = dir.path().join("m.ckpt");
    checkpoint::save(&a, &path).unwrap();
    let loaded = checkpoint::load(&path).unwrap();
    ensure!(report(&loaded) == report(&a), "metrics differ after reload");

    let scene = ToySceneConfig {
        n_train: 10,
        n_validation: 5,
        n_test: 15,
        seed: 12,
        ..Default::default()
    };
    let ds = synth_toy_dataset(&scene).unwrap();
    write_loco_layout(&ds, &toy_defect_config(&scene), dir.path()).unwrap();
    let mut back = load_loco_layout(dir.path(), &scene.category).unwrap();
    let mut orig = ds;
    for d in [&mut back, &mut orig] {
        d.test.sort_by(|x, y| (x.label.dir_name(), &x.name).cmp(&(y.label.dir_name(), &y.name)));
    }
    ensure!(back == orig, "LOCO round trip changed the dataset");
    Ok(format!(
        "two runs give identical {}-byte checkpoints and metrics; reload and LOCO round trip exact",
        bytes.len()
    ))
}

fn scoring_pipeline() -> Check {
    let mut r = rng(103);
    let mut maps = |lo: f64, hi: f64| -> Vec<ScoreMap> {
        (0..6)
            .map(|_| {
                let v = (0..256).map(|_| r.random_range(lo..hi)).collect();
                ScoreMap::new(16, 16, v, ScoreKind::Accumulated).unwrap()
            })
            .collect()
    };
    let local = maps(0.0, 0.5);
    let global = maps(2.0, 40.0);
    let norm = fit_normalizer(&local, &global).unwrap();
    let mut worst: f64 = 0.0;
    for (role, ms) in [(StudentRole::Local, &local), (StudentRole::Global, &global)] {
        let z: Vec<f64> = ms
            .iter()
            .flat_map(|m| norm.normalize(role, m).unwrap().values)
            .collect();
        let n = z.len() as f64;
        let mean = z.iter().sum::<f64>() / n;
        let std = (z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        worst = worst.max(mean.abs()).max((std - 1.0).abs());
    }
    ensure!(worst < 1e-6, "normalized statistics off by {worst:e}");
    for m in local.iter().chain(&global) {
        ensure!(image_score(m, 0.0).unwrap() == m.max(), "sigma 0 score differs from max");
        for sigma in [0.5, 1.0, 4.0] {
            let s = gaussian_filter(m, sigma).unwrap().max();
            ensure!(s <= m.max() + 1e-12, "smoothing raised the max: {s} > {}", m.max());
        }
    }
    Ok(format!("normalized mean/std within {worst:.1e}; sigma 0 is the max; smoothing never raises it"))
}
