//! Command-line front end: data generation, embedding, training,
//! prediction, evaluation, ablation experiments and delta reports.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use coseg::checkpoint::load_checkpoint;
use coseg::dataio::load_manifest;
use coseg::experiment::{
    embed, eval_stage, gen_data, load_description_set, load_image_dir, predict_samples, provider_from_spec,
    run_experiment, text_source, DatasetParams, ExperimentSpec,
};
use coseg::metrics::{HdVariant, MetricConfig};
use coseg::report::{delta_csv, report_compare};
use coseg::trainer::{train, TrainConfig};

#[derive(Parser)]
#[command(name = "coseg", version, about = "Text-conditioned co-training for volumetric segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct SeedArg {
    /// Random seed. Stages without randomness accept it for uniformity.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with a labeled/unlabeled split and a validation set.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 24)]
        volumes: usize,
        /// d,h,w
        #[arg(long, default_value = "32,32,32")]
        shape: String,
        #[arg(long, default_value_t = 0.7)]
        difficulty: f64,
        #[arg(long, default_value_t = 0.1)]
        labeled_ratio: f64,
        #[arg(long, default_value_t = 8)]
        validation: usize,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Embed task descriptions into an EMB1 file.
    Embed {
        /// Description file (blank-line separated); built-in set if omitted.
        #[arg(long)]
        descriptions: Option<PathBuf>,
        /// hash:<dim> or file:<path>
        #[arg(long, default_value = "hash:64")]
        provider: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Train both networks; writes checkpoints and train_log.csv.
    Train {
        /// Dataset manifest written by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// key=value config file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Extra key=value overrides, applied after the file.
        #[arg(long = "set")]
        set: Vec<String>,
        /// EMB1 file for text conditioning.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Sliding-window prediction of validation volumes or an image directory.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Manifest whose validation volumes are predicted.
        #[arg(long, conflicts_with = "input", required_unless_present = "input")]
        data: Option<PathBuf>,
        /// Directory of <id>_img.vol1 files.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Score <id>_pred.vol1 files against <id>_lbl.vol1 ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// pooled or max_directed
        #[arg(long, default_value = "pooled")]
        hd_variant: String,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Run an ablation grid described by a JSON spec.
    Experiment {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Replace the spec's seed list with this single seed.
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Per-metric deltas between a baseline and a method CSV.
    Report {
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        method: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        seed: SeedArg,
    },
}

impl Command {
    fn stage(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Embed { .. } => "embed",
            Command::Train { .. } => "train",
            Command::Predict { .. } => "predict",
            Command::Eval { .. } => "eval",
            Command::Experiment { .. } => "experiment",
            Command::Report { .. } => "report",
        }
    }
}

fn parse_shape(s: &str) -> Result<[usize; 3]> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse().with_context(|| format!("bad shape component {p:?}")))
        .collect::<Result<_>>()?;
    match v.as_slice() {
        &[d, h, w] => Ok([d, h, w]),
        _ => bail!("shape must be d,h,w, got {s:?}"),
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData {
            out,
            volumes,
            shape,
            difficulty,
            labeled_ratio,
            validation,
            seed,
        } => {
            let params = DatasetParams {
                volumes,
                shape: parse_shape(&shape)?,
                difficulty,
                validation_volumes: validation,
            };
            let manifest = gen_data(&out, &params, labeled_ratio, seed.seed.unwrap_or(0))?;
            println!("{}", manifest.display());
        }
        Command::Embed {
            descriptions,
            provider,
            out,
            seed: _,
        } => {
            let ds = load_description_set(descriptions.as_deref())?;
            embed(&ds, provider_from_spec(&provider)?.as_ref(), &out)?;
            println!("{} descriptions -> {}", ds.responses.len(), out.display());
        }
        Command::Train {
            data,
            config,
            set,
            embeddings,
            out,
            resume,
            seed,
        } => {
            let mut cfg = match &config {
                Some(p) => TrainConfig::load(p)?,
                None => TrainConfig::default(),
            };
            for kv in &set {
                let (k, v) = kv.split_once('=').with_context(|| format!("--set expects key=value, got {kv:?}"))?;
                cfg.set(k.trim(), v.trim())?;
            }
            if let Some(s) = seed.seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            let loaded = load_manifest(&data)?;
            let text = embeddings.as_deref().map(text_source).transpose()?;
            let state = match &resume {
                Some(p) => {
                    let (state, saved) = load_checkpoint(p)?;
                    if saved.model != cfg.model {
                        bail!("{} was trained with a different architecture", p.display());
                    }
                    Some(state)
                }
                None => None,
            };
            let outcome = train(&cfg, &loaded.split, &loaded.validation, text.as_ref(), Some(&out), state)?;
            if let Some(last) = outcome.state.history.iter().rev().find_map(|r| r.val_dice) {
                println!("final validation dice {last:.4}");
            }
            if let Some(c) = outcome.checkpoints.last() {
                println!("{}", c.display());
            }
        }
        Command::Predict {
            checkpoint,
            data,
            input,
            out,
            seed: _,
        } => {
            let samples = match (data, input) {
                (Some(m), _) => load_manifest(&m)?.validation,
                (None, Some(dir)) => load_image_dir(&dir)?,
                (None, None) => bail!("either --data or --input is required"),
            };
            let written = predict_samples(&checkpoint, &samples, &out)?;
            println!("{} predictions -> {}", written.len(), out.display());
        }
        Command::Eval {
            pred,
            gt,
            out,
            hd_variant,
            seed: _,
        } => {
            let cfg = MetricConfig {
                hd_variant: hd_variant.parse::<HdVariant>()?,
                ..MetricConfig::default()
            };
            let report = eval_stage(&pred, &gt, &out, &cfg)?;
            let m = &report.mean;
            println!(
                "{} volumes: dice {:.4} jaccard {:.4} hd95 {:.3} asd {:.3}",
                report.volumes.len(),
                m.dice,
                m.jaccard,
                m.hd95,
                m.asd
            );
        }
        Command::Experiment { spec, out, seed } => {
            let mut spec = ExperimentSpec::load(&spec)?;
            if let Some(s) = seed.seed {
                spec.seeds = vec![s];
            }
            let r = run_experiment(&spec, &out)?;
            let failed = r.cells.iter().filter(|c| c.outcome.is_err()).count();
            print!("{}", fs::read_to_string(&r.summary_csv)?);
            if failed > 0 {
                eprintln!("{failed} of {} cells failed; see {}", r.cells.len(), r.cells_csv.display());
            }
        }
        Command::Report {
            baseline,
            method,
            out,
            seed: _,
        } => {
            let read = |p: &PathBuf| fs::read_to_string(p).with_context(|| format!("reading {}", p.display()));
            let table = delta_csv(&report_compare(&read(&baseline)?, &read(&method)?)?);
            match out {
                Some(p) => fs::write(&p, &table).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{table}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let stage = cli.command.stage();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("coseg {stage} failed: {e:#}");
            ExitCode::FAILURE
        }
    }
}
