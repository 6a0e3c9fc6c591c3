use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use clusterprop::evaluation::{ablation_grid, evaluate_interactive, predict_auto};
use clusterprop::io::{read_labels, write_labels};
use clusterprop::metrics::{aggregate, evaluate, DEFAULT_NSD_TAU};
use clusterprop::model::{load_checkpoint, save_checkpoint, ModelConfig, Params};
use clusterprop::propagation::InferenceConfig;
use clusterprop::synth::{label_name, load_example, read_manifest, write_dataset, Example, SynthConfig};
use clusterprop::training::{train, TrainConfig};
use rayon::prelude::*;
use serde_json::json;

use crate::service::{self, AppState, ADDR_ENV, DEFAULT_ADDR, SCHEMA_VERSION};

#[derive(Parser, Debug)]
#[command(name = "clusterprop", version, about = "Slice-to-volume clustering propagation for 3D segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n_volumes: Option<usize>,
        #[arg(long)]
        n_val: Option<usize>,
        /// JSON file with a full generator config; flags override its fields.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a model on a generated dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
        /// JSON file with a training config; flags override its fields.
        #[arg(long)]
        config: Option<PathBuf>,
        /// JSON file with a model config.
        #[arg(long)]
        model_config: Option<PathBuf>,
    },
    /// Automatic segmentation of every volume in a split.
    InferAuto {
        #[command(flatten)]
        input: InferInput,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulated click refinement; writes per-round DSC.
    InferInteractive {
        #[command(flatten)]
        input: InferInput,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 15)]
        rounds: usize,
        /// Disable accumulation of click features across rounds.
        #[arg(long)]
        no_adaptive: bool,
    },
    /// Compare predicted label volumes against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_NSD_TAU)]
        tau: f64,
    },
    /// Propagation / memory / adaptive-sampling ablation grid.
    Ablate {
        #[command(flatten)]
        input: InferInput,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Interactive rounds for the adaptive-sampling rows (0 skips them).
        #[arg(long, default_value_t = 0)]
        rounds: usize,
    },
    /// Start the HTTP session service.
    Serve {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, env = ADDR_ENV, default_value = DEFAULT_ADDR)]
        addr: String,
    },
}

#[derive(Args, Debug)]
pub struct InferInput {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Val)]
    pub split: Split,
    #[arg(long)]
    pub keep_threshold: Option<f64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Split {
    Train,
    Val,
    All,
}

fn load_params(ckpt: Option<&Path>) -> Result<Params> {
    let path = match ckpt {
        Some(p) if p.as_os_str() != "none" => p,
        _ => bail!("checkpoint required (--ckpt PATH)"),
    };
    let (params, header) = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    log::info!("loaded {} ({} parameters, iteration {})", path.display(), params.count(), header.iteration);
    Ok(params)
}

fn load_split(data: &Path, split: Split) -> Result<Vec<Example>> {
    let manifest = read_manifest(data).with_context(|| format!("reading manifest in {}", data.display()))?;
    let names: Vec<String> = match split {
        Split::Train => manifest.train,
        Split::Val => manifest.val,
        Split::All => manifest.train.into_iter().chain(manifest.val).collect(),
    };
    names.par_iter().map(|n| load_example(data, n).with_context(|| format!("loading {n}"))).collect()
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&fs::read(path).with_context(|| format!("reading {}", path.display()))?)?)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

fn inference_config(input: &InferInput) -> InferenceConfig {
    let mut cfg = InferenceConfig::default();
    if let Some(t) = input.keep_threshold {
        cfg.keep_threshold = t;
    }
    cfg
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { out, seed, n_volumes, n_val, config } => {
            let mut cfg: SynthConfig = match config {
                Some(p) => read_json(&p)?,
                None => SynthConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(n) = n_volumes {
                cfg.n_volumes = n;
            }
            if let Some(n) = n_val {
                cfg.n_val = n;
            }
            let manifest = write_dataset(&cfg, &out)?;
            println!("wrote {} train + {} val volumes to {}", manifest.train.len(), manifest.val.len(), out.display());
        }
        Command::Train { data, out, iterations, seed, lr, config, model_config } => {
            let mut cfg: TrainConfig = match config {
                Some(p) => read_json(&p)?,
                None => TrainConfig::default(),
            };
            if let Some(n) = iterations {
                cfg.iterations = n;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(l) = lr {
                cfg.lr = l;
            }
            let model_cfg: ModelConfig = match model_config {
                Some(p) => read_json(&p)?,
                None => ModelConfig { seed: cfg.seed, ..ModelConfig::default() },
            };
            let train_set = load_split(&data, Split::Train)?;
            let val_set = load_split(&data, Split::Val)?;
            fs::create_dir_all(&out)?;
            write_json(&out.join("train_config.json"), &json!({ "train": cfg, "model": model_cfg }))?;
            let mut log_file = fs::File::create(out.join("metrics.jsonl"))?;
            let mut write_err = None;
            let outcome = train(&cfg, &model_cfg, &train_set, &val_set, |r| {
                if let Err(e) = serde_json::to_writer(&mut log_file, r).map_err(anyhow::Error::from).and_then(|_| {
                    writeln!(log_file).map_err(anyhow::Error::from)
                }) {
                    write_err.get_or_insert(e);
                }
                if r.iter % 50 == 0 || r.val_dsc.is_some() {
                    log::info!("iter {} loss {:.4} val_dsc {:?}", r.iter, r.loss, r.val_dsc);
                }
            })?;
            if let Some(e) = write_err {
                return Err(e.context("writing metrics.jsonl"));
            }
            let ckpt = out.join("model.ckpt");
            save_checkpoint(&ckpt, &outcome.params, outcome.log.len() as u64, cfg.seed)?;
            if let Some(msg) = outcome.aborted {
                bail!("training stopped: {msg}; last finite weights saved to {}", ckpt.display());
            }
            println!(
                "trained {} iterations in {:.1}s, val mean DSC {:?}; checkpoint {}",
                outcome.log.len(),
                outcome.elapsed_secs,
                outcome.final_val_dsc,
                ckpt.display()
            );
        }
        Command::InferAuto { input, out } => {
            let params = load_params(input.ckpt.as_deref())?;
            let cfg = inference_config(&input);
            let examples = load_split(&input.data, input.split)?;
            fs::create_dir_all(&out)?;
            let reports = examples
                .par_iter()
                .map(|ex| -> Result<_> {
                    let pred = predict_auto(&params, &ex.volume, &cfg)?;
                    write_labels(&pred, ex.volume.spacing(), ex.volume.modality(), &out.join(label_name(&ex.name)))?;
                    let report =
                        evaluate(&pred, &ex.labels, ex.volume.spacing(), params.config.n_classes, DEFAULT_NSD_TAU)?;
                    Ok((ex.name.clone(), report))
                })
                .collect::<Result<Vec<_>>>()?;
            let agg = aggregate(&reports.iter().map(|r| r.1.clone()).collect::<Vec<_>>());
            let volumes: BTreeMap<_, _> = reports.into_iter().collect();
            write_json(&out.join("report.json"), &json!({ "schema_version": SCHEMA_VERSION, "volumes": volumes, "aggregate": agg }))?;
            println!("mean DSC {:?} HD95 {:?} NSD {:?}", agg.mean_dsc, agg.mean_hd95, agg.mean_nsd);
        }
        Command::InferInteractive { input, out, rounds, no_adaptive } => {
            let params = load_params(input.ckpt.as_deref())?;
            let cfg = InferenceConfig { adaptive_sampling: !no_adaptive, ..inference_config(&input) };
            let examples = load_split(&input.data, input.split)?;
            let summary = evaluate_interactive(&params, &examples, &cfg, rounds)?;
            let volumes: BTreeMap<_, _> = examples.iter().map(|e| e.name.clone()).zip(summary.volumes.iter()).collect();
            write_json(
                &out.join("interactive.json"),
                &json!({ "schema_version": SCHEMA_VERSION, "per_round_dsc": summary.per_round_dsc, "volumes": volumes }),
            )?;
            for (r, d) in summary.per_round_dsc.iter().enumerate() {
                println!("round {r:2}  mean DSC {d:.4}");
            }
        }
        Command::Eval { pred, gt, out, tau } => {
            let report = eval_dirs(&pred, &gt, tau)?;
            println!("mean DSC {:?}", report["aggregate"]["mean_dsc"]);
            if let Some(out) = out {
                write_json(&out, &report)?;
            }
        }
        Command::Ablate { input, out, rounds } => {
            let params = load_params(input.ckpt.as_deref())?;
            let cfg = inference_config(&input);
            let examples = load_split(&input.data, input.split)?;
            let rows = ablation_grid(&params, &examples, &cfg, DEFAULT_NSD_TAU, rounds)?;
            println!("{:<10}{:<8}{:<10}{:>10}{:>10}{:>10}{:>14}", "propagate", "memory", "adaptive", "DSC", "HD95", "NSD", "interactive");
            let f = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
            for r in &rows {
                println!(
                    "{:<10}{:<8}{:<10}{:>10}{:>10}{:>10}{:>14}",
                    r.propagate,
                    r.use_memory,
                    r.adaptive_sampling,
                    f(r.mean_dsc),
                    f(r.mean_hd95),
                    f(r.mean_nsd),
                    f(r.interactive_dsc)
                );
            }
            if let Some(out) = out {
                write_json(&out, &json!({ "schema_version": SCHEMA_VERSION, "rows": rows }))?;
            }
        }
        Command::Serve { ckpt, addr } => {
            let params = load_params(ckpt.as_deref())?;
            let state = AppState::new(params, InferenceConfig::default());
            tokio::runtime::Runtime::new()?.block_on(service::serve(state, &addr))?;
        }
    }
    Ok(())
}

/// Evaluates every label volume in `pred` against the file of the same name in `gt`.
pub fn eval_dirs(pred: &Path, gt: &Path, tau: f64) -> Result<serde_json::Value> {
    let mut stems = Vec::new();
    for entry in fs::read_dir(pred).with_context(|| format!("listing {}", pred.display()))? {
        let path = entry?.path();
        let is_labels = path.extension().is_some_and(|e| e == "json")
            && fs::read(&path)
                .ok()
                .and_then(|b| serde_json::from_slice::<serde_json::Value>(&b).ok())
                .is_some_and(|v| v["dtype"] == "uint8");
        if is_labels {
            stems.push(path.with_extension(""));
        }
    }
    stems.sort();
    if stems.is_empty() {
        bail!("no label volumes in {}", pred.display());
    }
    let mut volumes = BTreeMap::new();
    let mut reports = Vec::new();
    for stem in stems {
        let name = stem.file_name().and_then(|n| n.to_str()).ok_or_else(|| anyhow!("bad file name"))?.to_string();
        let (p, sc) = read_labels(&stem)?;
        let (g, _) = read_labels(&gt.join(&name)).with_context(|| format!("ground truth for {name}"))?;
        let n_classes = p.max_label().max(g.max_label()) as usize;
        let report = evaluate(&p, &g, sc.spacing, n_classes, tau)?;
        reports.push(report.clone());
        volumes.insert(name, report);
    }
    let agg = aggregate(&reports);
    Ok(json!({ "schema_version": SCHEMA_VERSION, "volumes": volumes, "aggregate": agg }))
}
