//! Train both students on the synthetic grid scenes and print the three reports.
//!
//! `cargo run --release -p dskd-core --example toy_run -- [seed] [epochs]`

use std::time::Instant;

use dskd_core::{evaluate, synth_toy_dataset, train_with, ScoreMode, ToySceneConfig, TrainConfig};

fn main() -> dskd_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(20);
    let data = synth_toy_dataset(&ToySceneConfig {
        seed,
        ..Default::default()
    })?;
    let cfg = TrainConfig {
        seed,
        epochs,
        ..TrainConfig::toy()
    };
    let t0 = Instant::now();
    let ckpt = train_with(&data, &cfg, &mut |r, t| {
        println!("{} epoch {:>3} loss {:.5} ({t:.1}s)", r.student.name(), r.epoch, r.mean_loss)
    })?;
    println!("trained in {:.1}s", t0.elapsed().as_secs_f64());
    for mode in [ScoreMode::Local, ScoreMode::Global, ScoreMode::Combined] {
        let e = evaluate(&ckpt, &data, mode)?;
        let h = e.report.headline();
        println!(
            "{mode:>8}: auroc struct {:.3} logic {:.3} mean {:.3} | au-spro struct {:.3} logic {:.3} mean {:.3}",
            h[0], h[1], h[2], h[3], h[4], h[5]
        );
    }
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
    Ok(())
}
