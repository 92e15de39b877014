use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use maskdet::checkpoint;
use maskdet::data::{generate_dataset, load_dataset, read_ppm};
use maskdet::eval::report_text;
use maskdet::gradcheck;
use maskdet::model::{build_model, AnchorSet, Model, ModelConfig, ModelScale, CLASS_NAMES};
use maskdet::tensor::Tensor;
use maskdet::train::{evaluate_model, restore, train, TrainConfig};

#[derive(Parser)]
#[command(name = "maskdet", version, about = "Train and evaluate the mask detector on desk-scale data")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ScaleArg {
    Toy,
    L,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a deterministic synthetic dataset (images + labels)
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 160)]
        size: usize,
    },
    /// Train the toy-scale model and write the best checkpoint
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Flat key=value config file; omit for defaults
        #[arg(long)]
        cfg: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Override config values, e.g. --set epochs=150 --set batch=8
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Evaluate a checkpoint on a dataset and print the metric report
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.25)]
        conf: f64,
        #[arg(long, default_value_t = 0.45)]
        iou: f64,
        #[arg(long)]
        cfg: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Run detection on a single image and print one line per box
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 0.25)]
        conf: f64,
        #[arg(long, default_value_t = 0.45)]
        iou: f64,
        #[arg(long)]
        cfg: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Finite-difference check of every differentiable operation
    Gradcheck,
    /// Print the layer table (index, kind, input edges, output shape)
    Graph {
        #[arg(long, value_enum, default_value_t = ScaleArg::Toy)]
        scale: ScaleArg,
        #[arg(long)]
        input_size: Option<usize>,
        /// Disable all four modifications (plain baseline topology)
        #[arg(long)]
        baseline: bool,
        #[arg(long)]
        cfg: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
}

fn load_train_config(path: Option<&Path>, overrides: &[String]) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("cannot read config {}", p.display()))?;
            TrainConfig::from_file_text(&text)?
        }
        None => TrainConfig::default(),
    };
    for item in overrides {
        let Some((k, v)) = item.split_once('=') else {
            bail!("--set expects KEY=VALUE, got {item:?}");
        };
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn model_from(cfg: &TrainConfig, scale: ModelScale) -> Result<Model<f32>> {
    let mc = ModelConfig {
        n_classes: CLASS_NAMES.len(),
        scale,
        input_size: cfg.input_size,
        msconv: cfg.msconv,
        swin: cfg.swin,
        icbam: cfg.icbam,
        fusion: cfg.fusion,
        seed: cfg.seed,
    };
    Ok(build_model(mc, AnchorSet::default_for(cfg.input_size))?)
}

fn run() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Synth { n, seed, out, size } => {
            generate_dataset(&out, n, seed, size)?;
            println!("wrote {n} images to {}", out.display());
        }
        Cmd::Train { data, cfg, out, set } => {
            let cfg = load_train_config(cfg.as_deref(), &set)?;
            let dataset = load_dataset(&data, cfg.input_size)?;
            let mut model = model_from(&cfg, ModelScale::Toy)?;
            println!(
                "training on {} images, {} epochs, batch {}, seed {}",
                dataset.len(),
                cfg.epochs,
                cfg.batch,
                cfg.seed
            );
            let result = train(&mut model, &dataset, &cfg, |e| {
                let map = e.map50.map(|m| format!("{m:.4}")).unwrap_or_else(|| "NA".into());
                println!(
                    "epoch {:>4}  lr {:.6}  total {:.4}  box {:.4}  obj {:.4}  cls {:.4}  mAP50 {}",
                    e.epoch, e.lr, e.total, e.bbox, e.obj, e.cls, map
                );
            })?;
            restore(&mut model, &result.best_state)?;
            checkpoint::save_model(&out, &model)?;
            println!(
                "best epoch {} (training mAP50 {:.4}); checkpoint written to {}",
                result.best_epoch,
                result.best_map50,
                out.display()
            );
        }
        Cmd::Eval { ckpt, data, conf, iou, cfg, set } => {
            let cfg = load_train_config(cfg.as_deref(), &set)?;
            let mut model = model_from(&cfg, ModelScale::Toy)?;
            checkpoint::load_model(&ckpt, &mut model)?;
            let dataset = load_dataset(&data, cfg.input_size)?;
            let report = evaluate_model(&model, &dataset, conf, iou)?;
            print!("{}", report_text(&report, &CLASS_NAMES));
        }
        Cmd::Infer { ckpt, image, conf, iou, cfg, set } => {
            let cfg = load_train_config(cfg.as_deref(), &set)?;
            let mut model = model_from(&cfg, ModelScale::Toy)?;
            checkpoint::load_model(&ckpt, &mut model)?;
            let (w, h, rgb) = read_ppm(&image)?;
            if w != cfg.input_size || h != cfg.input_size {
                bail!("image is {w}x{h}, expected {0}x{0}", cfg.input_size);
            }
            let tensor = Tensor::from_fn(&[3, h, w], |i| {
                let c = i / (h * w);
                let px = i % (h * w);
                rgb[px * 3 + c] as f32 / 255.0
            });
            let dets = model.detect(&tensor, conf, iou)?;
            if dets.is_empty() {
                println!("no detections");
            }
            for d in dets {
                println!(
                    "{}\t{:.4}\t{:.4} {:.4} {:.4} {:.4}",
                    CLASS_NAMES[d.class_id], d.confidence, d.bbox.cx, d.bbox.cy, d.bbox.w, d.bbox.h
                );
            }
        }
        Cmd::Gradcheck => {
            let t0 = std::time::Instant::now();
            let results = gradcheck::run_all();
            let mut any_failed = false;
            println!("{:<22} {:>12}  {:>8}  result", "op", "max rel err", "checked");
            for r in &results {
                let ok = r.passed();
                any_failed |= !ok;
                println!(
                    "{:<22} {:>12.3e}  {:>8}  {}",
                    r.name,
                    r.max_rel_err,
                    r.checked,
                    if ok { "pass" } else { "FAIL" }
                );
            }
            println!(
                "{} ops checked in {:.2}s (tolerance {:.0e})",
                results.len(),
                t0.elapsed().as_secs_f64(),
                gradcheck::TOLERANCE
            );
            if any_failed {
                bail!("gradient check failed");
            }
        }
        Cmd::Graph { scale, input_size, baseline, cfg, set } => {
            let mut cfg = load_train_config(cfg.as_deref(), &set)?;
            if let Some(s) = input_size {
                cfg.input_size = s;
            } else if matches!(scale, ScaleArg::L) {
                cfg.input_size = 640;
            }
            if baseline {
                cfg.msconv = false;
                cfg.swin = false;
                cfg.icbam = false;
                cfg.fusion = false;
            }
            let scale = match scale {
                ScaleArg::Toy => ModelScale::Toy,
                ScaleArg::L => ModelScale::L,
            };
            let model = model_from(&cfg, scale)?;
            print!("{}", model.graph_dump());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
