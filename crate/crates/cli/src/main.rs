mod args;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;
use image::RgbImage;
use log::info;
use serde::Serialize;

use dskd_core::checkpoint;
use dskd_core::{
    evaluate_with, export_heatmaps, load_loco_layout, synth_toy_dataset, toy_defect_config,
    train_with, write_loco_layout, DatasetSplit, EpochRecord, ErrorKind, Result,
    ScoreMode, ToySceneConfig,
};

use args::{Cli, Command, DataArgs, EvalArgs, SynthArgs, TrainArgs, VisualizeArgs};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match &cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Visualize(a) => visualize(a),
        Command::SynthData(a) => synth(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Usage => EXIT_USAGE,
                ErrorKind::Data => EXIT_DATA,
                ErrorKind::Runtime => EXIT_RUNTIME,
            })
        }
    }
}

fn load_data(d: &DataArgs) -> Result<DatasetSplit> {
    let ds = load_loco_layout(&d.data_root, &d.category)?;
    info!(
        "loaded {}: {} train, {} validation, {} test",
        ds.category,
        ds.train.len(),
        ds.validation.len(),
        ds.test.len()
    );
    Ok(ds)
}

#[derive(Serialize)]
struct LogLine<'a> {
    student: &'a str,
    epoch: usize,
    loss: f64,
    batches: usize,
    wall_time_s: f64,
}

fn train(a: &TrainArgs) -> Result<()> {
    let cfg = a.resolve_config()?;
    let ds = load_data(&a.data)?;
    let mut log_file = match &a.out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("config.toml"), cfg.to_toml_string()?)?;
            Some(BufWriter::new(File::create(dir.join("train_log.jsonl"))?))
        }
        None => None,
    };
    let mut io_err = None;
    let mut observer = |r: &EpochRecord, wall: f64| {
        let line = LogLine {
            student: r.student.name(),
            epoch: r.epoch,
            loss: r.mean_loss,
            batches: r.batches,
            wall_time_s: wall,
        };
        let text = serde_json::to_string(&line).expect("log line serializes");
        println!("{text}");
        if let Some(f) = log_file.as_mut() {
            if let Err(e) = writeln!(f, "{text}") {
                io_err.get_or_insert(e);
            }
        }
    };
    let ckpt = train_with(&ds, &cfg, &mut observer)?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    if let Some(mut f) = log_file {
        f.flush()?;
    }
    checkpoint::save(&ckpt, &a.checkpoint)?;
    info!("checkpoint written to {}", a.checkpoint.display());
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let ckpt = checkpoint::load(&a.checkpoint)?;
    let ds = load_data(&a.data)?;
    let started = Instant::now();
    let ev = evaluate_with(&ckpt, &ds, a.mode.into(), a.fpr_limit, a.num_thresholds)?;
    info!("evaluated {} images in {:.1}s", ev.records.len(), started.elapsed().as_secs_f64());
    let json = ev.report.to_json()?;
    println!("{json}");
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("metrics.json"), &json)?;
        ev.report.write_csv(File::create(dir.join("metrics.csv"))?)?;
    }
    Ok(())
}

fn visualize(a: &VisualizeArgs) -> Result<()> {
    let ckpt = checkpoint::load(&a.checkpoint)?;
    let mut ds = load_data(&a.data)?;
    if let Some(n) = a.limit {
        ds.test.truncate(n);
    }
    let mode: ScoreMode = a.mode.into();
    ckpt.check_mode(mode)?;
    let images: Vec<&RgbImage> = ds.test.iter().map(|t| &t.image).collect();
    let maps = ckpt.score_maps(&images)?;
    let results = ds
        .test
        .iter()
        .zip(&maps)
        .map(|(t, m)| ckpt.fuse(&format!("{}/{}", t.label.dir_name(), t.name), m, mode))
        .collect::<Result<Vec<_>>>()?;
    let written = export_heatmaps(&results, &images, &a.out)?;
    info!("wrote {} heatmap sets to {}", written.len(), a.out.display());
    Ok(())
}

fn synth(a: &SynthArgs) -> Result<()> {
    let cfg = ToySceneConfig {
        category: a.category.clone(),
        grid: a.grid,
        image_size: a.image_size,
        n_train: a.n_train,
        n_validation: a.n_validation,
        n_test: a.n_test,
        seed: a.seed,
        ..Default::default()
    };
    let ds = synth_toy_dataset(&cfg)?;
    let base = write_loco_layout(&ds, &toy_defect_config(&cfg), &a.out)?;
    info!("wrote {} to {}", ds.category, base.display());
    Ok(())
}
