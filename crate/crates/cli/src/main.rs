//! `gald`: generate data, check gradients, train, evaluate and visualise
//! LD masks.
//!
//! Exit codes: 0 on success, 1 on a runtime or verification failure, 2 on a
//! usage error.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use gald::autograd::Tape;
use gald::checkpoint::{load_checkpoint, save_checkpoint, verify_params};
use gald::config::GaldConfig;
use gald::digest::dir_digest;
use gald::gald::mask_summary;
use gald::nn::{Ctx, Mode};
use gald::segnet::{argmax_classes, evaluate, forward_model, train};
use gald::suite::run_suite;
use gald::synth::{class_shares, generate, load_dataset, save_dataset, SceneSpec};
use gald::viz::{class_pixels, mask_pixels, write_pgm};
use gald::{gtf, Error, Result};

const EVAL_BATCH: usize = 10;

#[derive(Parser)]
#[command(
    name = "gald",
    version,
    about = "GALD context modules on a synthetic segmentation benchmark"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        /// Scene spec JSON; defaults apply to missing keys.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        n: u64,
        /// Overrides the seed in the spec.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Only checks with this name or name component, e.g. `cgnl` or `op`.
        #[arg(long)]
        module: Option<String>,
        /// Adds a check with a deliberately wrong backward rule.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Train a model; writes metrics.jsonl, final.ckpt and config.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Training set; defaults to the config's `dataset`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory; defaults to the config's `output`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and print the report as JSON.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Write the channel-mean LD mask and the prediction of one image as PGM.
    VizMask {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// `3 x H x W` (or `1 x 3 x H x W`) GTF image.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { spec, n, seed, out } => gen_data(spec.as_deref(), n as usize, seed, &out),
        Command::Gradcheck {
            config,
            module,
            inject_fault,
        } => gradcheck(config.as_deref(), module.as_deref(), inject_fault),
        Command::Train { config, data, out } => cmd_train(&config, data, out),
        Command::Eval { config, ckpt, data } => cmd_eval(&config, &ckpt, &data),
        Command::VizMask {
            config,
            ckpt,
            input,
            out,
        } => viz_mask(&config, &ckpt, &input, &out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json values serialise"));
}

fn gen_data(spec: Option<&Path>, n: usize, seed: Option<u64>, out: &Path) -> Result<ExitCode> {
    let mut spec: SceneSpec = match spec {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
        None => SceneSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let samples = generate(&spec, n)?;
    save_dataset(&samples, &spec, out)?;
    print_json(&json!({
        "count": samples.len(),
        "seed": spec.seed,
        "height": spec.height,
        "width": spec.width,
        "class_shares": class_shares(&samples, 3),
        "digest": dir_digest(out)?,
    }));
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(config: Option<&Path>, module: Option<&str>, inject_fault: bool) -> Result<ExitCode> {
    let cfg = match config {
        Some(p) => GaldConfig::load(p)?,
        None => GaldConfig::default(),
    };
    let report = run_suite(&cfg, module, inject_fault)?;
    print_json(&serde_json::to_value(&report)?);
    if report.pass {
        return Ok(ExitCode::SUCCESS);
    }
    if report.checks == 0 {
        eprintln!("no check matches {:?}", module.unwrap_or(""));
    } else {
        eprintln!("gradcheck failed: {}", report.failing.join(", "));
    }
    Ok(ExitCode::FAILURE)
}

fn cmd_train(config: &Path, data: Option<PathBuf>, out: Option<PathBuf>) -> Result<ExitCode> {
    let cfg = GaldConfig::load(config)?;
    let data_dir = data.unwrap_or_else(|| cfg.dataset.clone());
    let out = out.unwrap_or_else(|| cfg.output.clone());
    let (_, samples) = load_dataset(&data_dir)?;
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidSpec("training set is empty".into()))?;
    cfg.check_input_size(first.height(), first.width())?;

    fs::create_dir_all(&out)?;
    fs::write(out.join("config.json"), cfg.to_json())?;
    let mut log = BufWriter::new(File::create(out.join("metrics.jsonl"))?);
    let mut last = None;
    let params = train(&cfg, &samples, |rec| {
        serde_json::to_writer(&mut log, rec)?;
        log.write_all(b"\n")?;
        last = Some(rec.clone());
        Ok(())
    })?;
    log.flush()?;
    let ckpt = out.join("final.ckpt");
    save_checkpoint(&ckpt, &params, &cfg)?;
    print_json(&json!({
        "iterations": cfg.train.max_iter,
        "final_loss": last.map(|r| r.loss),
        "checkpoint": ckpt,
        "checkpoint_digest": dir_digest(&ckpt)?,
    }));
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(config: &Path, ckpt: &Path, data: &Path) -> Result<ExitCode> {
    let cfg = GaldConfig::load(config)?;
    let (_, samples) = load_dataset(data)?;
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidSpec("evaluation set is empty".into()))?;
    let (h, w) = (first.height(), first.width());
    cfg.check_input_size(h, w)?;
    let (_, mut params) = load_checkpoint(ckpt)?;
    verify_params(&cfg, &params, h, w)?;
    let report = evaluate(&cfg, &mut params, &samples, EVAL_BATCH)?;
    print_json(&serde_json::to_value(&report)?);
    Ok(ExitCode::SUCCESS)
}

fn viz_mask(config: &Path, ckpt: &Path, input: &Path, out: &Path) -> Result<ExitCode> {
    let cfg = GaldConfig::load(config)?;
    if !cfg.arrangement.has_ld() {
        return Err(Error::NoMaskInArrangement(cfg.arrangement.as_str().to_string()));
    }
    let image = gtf::load(input)?;
    let image = match image.shape() {
        [c, h, w] => image.reshape(&[1, *c, *h, *w])?,
        [1, _, _, _] => image,
        s => return Err(Error::ShapeMismatch(format!("expected a 3 x H x W image, got {s:?}"))),
    };
    let (_, _, h, w) = image.dims4()?;
    cfg.check_input_size(h, w)?;
    let (_, mut params) = load_checkpoint(ckpt)?;
    verify_params(&cfg, &params, h, w)?;

    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &mut params, Mode::Eval);
    let x = ctx.tape.constant(image);
    let output = forward_model(&mut ctx, x, &cfg)?;
    let mask = output
        .mask
        .ok_or_else(|| Error::NoMaskInArrangement(cfg.arrangement.as_str().to_string()))?;
    let summary = mask_summary(&mut ctx, mask)?;
    let (mw, mh, mask_px) = mask_pixels(tape.value(summary));
    let pred = argmax_classes(tape.value(output.logits));

    fs::create_dir_all(out)?;
    write_pgm(&out.join("mask.pgm"), mw, mh, &mask_px)?;
    write_pgm(&out.join("prediction.pgm"), w, h, &class_pixels(&pred, cfg.num_classes))?;
    print_json(&json!({
        "mask": out.join("mask.pgm"),
        "mask_size": [mw, mh],
        "prediction": out.join("prediction.pgm"),
    }));
    Ok(ExitCode::SUCCESS)
}
