use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use hgo_core::boxes::{Detection, GroundTruth};
use hgo_core::cost::model_cost_report;
use hgo_core::graph::StorageDtype;
use hgo_core::losses::BoxLossKind;
use hgo_core::metrics::{map_summary, mean_average_precision};
use hgo_core::model::{build_graph, BackboneKind, Model, ModelConfig, Scale};
use hgo_core::pipeline::infer::{format_detections, parse_detections};
use hgo_core::pipeline::synth::{parse_labels, split_sizes};
use hgo_core::pipeline::{self, Config, RunConfig, TrainConfig};

#[derive(Parser)]
#[command(name = "hgo", version, about = "Lightweight detector toolkit")]
struct Cli {
    /// JSON config with `model`, `head`, and optional `train` / `run` sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for initialisation, data generation and shuffling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum HeadArg {
    Decoupled,
    Shared,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackboneArg {
    Hgnetv2,
    Baseline,
}

#[derive(clap::Args)]
struct ModelArgs {
    /// Used when no --config is given.
    #[arg(long, default_value = "n")]
    scale: String,
    #[arg(long, value_enum, default_value = "hgnetv2")]
    backbone: BackboneArg,
    /// Defaults to shared for hgnetv2 and decoupled for the baseline.
    #[arg(long, value_enum)]
    head: Option<HeadArg>,
    #[arg(long)]
    input_size: Option<usize>,
    #[arg(long)]
    num_classes: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Layer table, parameter count and compute summary.
    Summary {
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Analytic cost report; optionally written as JSON.
    Cost {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        json: Option<PathBuf>,
        /// Also report the 16-bit weight file size.
        #[arg(long)]
        size: bool,
    },
    /// Detect objects in one image and write an annotated copy.
    Infer {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        image: PathBuf,
        /// Annotated PPM output.
        #[arg(long)]
        output: PathBuf,
        /// Detection list in `class cx cy w h score` lines.
        #[arg(long)]
        dets: Option<PathBuf>,
        #[arg(long)]
        conf: Option<f64>,
    },
    /// Toy training on a synthetic dataset.
    Train {
        #[command(flatten)]
        model: ModelArgs,
        /// Dataset directory from `synth`.
        #[arg(long)]
        data: PathBuf,
        /// Receives `weights.hgow` and `loss.jsonl`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        loss: Option<String>,
    },
    /// Score detection files against label files (matching names).
    Eval {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        preds: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        #[arg(long, default_value_t = 4)]
        num_classes: usize,
        /// Machine-readable summary output.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Forward-pass timing.
    Bench {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        warmup: usize,
        #[arg(long, default_value_t = 100)]
        iters: usize,
    },
    /// Generate a seeded synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(short, long, default_value_t = 80)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
}

fn load_config(cli: &Cli, args: &ModelArgs) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => {
            let scale = Scale::parse(&args.scale)?;
            let mut mc = match args.backbone {
                BackboneArg::Hgnetv2 => ModelConfig::hgo(scale),
                BackboneArg::Baseline => ModelConfig::baseline(scale),
            };
            match args.head {
                Some(HeadArg::Decoupled) => {
                    mc.head.variant = hgo_core::heads::HeadVariant::Decoupled
                }
                Some(HeadArg::Shared) => mc.head.variant = hgo_core::heads::HeadVariant::Shared,
                None => {}
            }
            Config {
                model: mc.model,
                head: mc.head,
                train: TrainConfig::default(),
                run: RunConfig::default(),
            }
        }
    };
    if let Some(s) = args.input_size {
        cfg.model.input_size = s;
    }
    if let Some(n) = args.num_classes {
        cfg.model.num_classes = n;
    }
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
        cfg.run.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn build_model(cfg: &Config, weights: Option<&Path>) -> Result<Model> {
    let mut model = Model::new(cfg.model_config(), cfg.run.seed)?;
    if let Some(w) = weights {
        model
            .load_weights(w)
            .with_context(|| format!("loading weights {}", w.display()))?;
    }
    Ok(model)
}

fn backbone_name(k: BackboneKind) -> &'static str {
    match k {
        BackboneKind::HgNetV2 => "hgnetv2",
        BackboneKind::C2fBaseline => "c2f-baseline",
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.cmd {
        Command::Summary { model } => {
            let cfg = load_config(cli, model)?;
            let (graph, head) = build_graph(&cfg.model_config())?;
            let size = cfg.model.input_size;
            let report = model_cost_report(&graph, (size, size))?;
            println!(
                "backbone {}  head {:?}  classes {}  input {size}",
                backbone_name(cfg.model.backbone),
                head.variant,
                head.num_classes
            );
            print!("{}", report.to_text());
        }
        Command::Cost { model, json, size } => {
            let cfg = load_config(cli, model)?;
            let (graph, _) = build_graph(&cfg.model_config())?;
            let s = cfg.model.input_size;
            let report = model_cost_report(&graph, (s, s))?;
            println!(
                "params {}  MACs {}  GFLOPs {:.3}  head share {:.4}",
                report.params, report.macs, report.gflops, report.head_share
            );
            if *size {
                let m = Model::new(cfg.model_config(), cfg.run.seed)?;
                let bytes = m.params.serialized_size(StorageDtype::F16);
                println!(
                    "f16 weight file {bytes} bytes ({:.3} MB)",
                    bytes as f64 / 1e6
                );
            }
            if let Some(p) = json {
                let text = serde_json::to_string_pretty(&report)?;
                fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
            }
        }
        Command::Infer {
            model,
            weights,
            image,
            output,
            dets,
            conf,
        } => {
            let mut cfg = load_config(cli, model)?;
            if let Some(c) = conf {
                cfg.run.conf_threshold = *c;
            }
            let m = build_model(&cfg, weights.as_deref())?;
            let img = pipeline::Image::load(image)?;
            let (found, annotated) = pipeline::run_inference(&m, &img, &cfg.run)?;
            annotated
                .save_ppm(output)
                .with_context(|| format!("writing {}", output.display()))?;
            let text = format_detections(&found, img.width, img.height);
            match dets {
                Some(p) => {
                    fs::write(p, &text).with_context(|| format!("writing {}", p.display()))?
                }
                None => print!("{text}"),
            }
            eprintln!("info: {} detections", found.len());
        }
        Command::Train {
            model,
            data,
            out,
            steps,
            lr,
            loss,
        } => {
            let mut cfg = load_config(cli, model)?;
            if let Some(s) = steps {
                cfg.train.steps = *s;
            }
            if let Some(l) = lr {
                cfg.train.lr = *l;
            }
            if let Some(k) = loss {
                cfg.train.box_loss = BoxLossKind::parse(k)?;
            }
            let scenes = pipeline::load_split(data, "train")?;
            let mut m = build_model(&cfg, None)?;
            fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
            let log_path = out.join("loss.jsonl");
            let mut log = fs::File::create(&log_path)
                .with_context(|| format!("creating {}", log_path.display()))?;
            let mut io_err = None;
            let records = pipeline::train(&mut m, &scenes, &cfg.train, |r| {
                let line = serde_json::to_string(r).map_err(|e| e.to_string());
                if let Err(e) = line.and_then(|s| writeln!(log, "{s}").map_err(|e| e.to_string())) {
                    io_err.get_or_insert(e);
                }
                if r.step % 10 == 0 {
                    eprintln!(
                        "info: step {} loss {:.4} (box {:.4} dfl {:.4} cls {:.4})",
                        r.step, r.total, r.box_loss, r.dfl_loss, r.cls_loss
                    );
                }
            })?;
            if let Some(e) = io_err {
                bail!("writing {}: {e}", log_path.display());
            }
            let wpath = out.join("weights.hgow");
            m.save_weights(&wpath, StorageDtype::F32)?;
            let (start, end) = pipeline::loss_endpoints(&records, cfg.train.smoothing);
            let (summary, _) = pipeline::evaluate(&m, &scenes, &cfg.run, cfg.train.batch_size)?;
            println!(
                "smoothed loss {start:.4} -> {end:.4}  train mAP@0.5 {:.4}  mAP@0.5:0.95 {:.4}",
                summary.map50, summary.map50_95
            );
            println!("weights {}", wpath.display());
        }
        Command::Eval {
            labels,
            preds,
            iou,
            num_classes,
            json,
        } => {
            let mut names: Vec<PathBuf> = fs::read_dir(labels)
                .with_context(|| format!("reading {}", labels.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "txt"))
                .collect();
            names.sort();
            let mut all_gts: Vec<Vec<GroundTruth>> = Vec::new();
            let mut all_dets: Vec<Vec<Detection>> = Vec::new();
            // Normalised coordinates are enough: IoU is invariant to per-axis scaling.
            for lp in &names {
                let text =
                    fs::read_to_string(lp).with_context(|| format!("reading {}", lp.display()))?;
                all_gts.push(
                    parse_labels(&text, 1, 1)
                        .map_err(|r| anyhow::anyhow!("{}: {r}", lp.display()))?,
                );
                let pp = preds.join(lp.file_name().unwrap_or_default());
                let dets = if pp.exists() {
                    let text = fs::read_to_string(&pp)
                        .with_context(|| format!("reading {}", pp.display()))?;
                    parse_detections(&text, 1, 1)
                        .map_err(|r| anyhow::anyhow!("{}: {r}", pp.display()))?
                } else {
                    Vec::new()
                };
                all_dets.push(dets);
            }
            let s = map_summary(&all_dets, &all_gts, *num_classes);
            let (at, per_class) = mean_average_precision(&all_dets, &all_gts, *num_classes, *iou);
            println!("images {}", names.len());
            println!("precision {:.4}  recall {:.4}", s.precision, s.recall);
            println!(
                "mAP@0.5 {:.4}  mAP@0.5:0.95 {:.4}  mAP@{iou} {at:.4}",
                s.map50, s.map50_95
            );
            for (c, ap) in per_class.iter().enumerate() {
                match ap {
                    Some(v) => println!("  class {c}: AP@{iou} {v:.4}"),
                    None => println!("  class {c}: no labels or detections"),
                }
            }
            if let Some(p) = json {
                let doc = serde_json::json!({
                    "images": names.len(),
                    "summary": s,
                    "iou_threshold": iou,
                    "map_at_threshold": at,
                    "per_class_ap_at_threshold": per_class,
                });
                fs::write(p, serde_json::to_string_pretty(&doc)?)
                    .with_context(|| format!("writing {}", p.display()))?;
            }
        }
        Command::Bench {
            model,
            weights,
            warmup,
            iters,
        } => {
            let cfg = load_config(cli, model)?;
            let m = build_model(&cfg, weights.as_deref())?;
            let r = pipeline::bench(&m, *warmup, *iters)?;
            println!(
                "input {}  mean {:.2} ms  min {:.2} ms  max {:.2} ms  {:.2} FPS over {} passes",
                r.input_size, r.mean_ms, r.min_ms, r.max_ms, r.fps, r.iterations
            );
        }
        Command::Synth { out, n, size } => {
            let seed = cli.seed.unwrap_or(7);
            pipeline::generate_synth_dataset(out, *n, seed, *size)?;
            let (tr, va, te) = split_sizes(*n);
            println!(
                "wrote {n} images to {} (train {tr}, val {va}, test {te})",
                out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut last = e.to_string();
            for cause in e.chain().skip(1) {
                let msg = cause.to_string();
                // Library errors already embed their source in the message.
                if !last.contains(&msg) {
                    eprintln!("  caused by: {msg}");
                }
                last = msg;
            }
            ExitCode::FAILURE
        }
    }
}
