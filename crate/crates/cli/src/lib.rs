//! The `ocfsl` command line: generate, train, eval, report and
//! context-ablation, all driven by one resolved [`ExperimentConfig`].
//!
//! Config resolution order (later wins): the `--config` file (or built-in
//! defaults), `OCFSL_OVERRIDES`, `--set`, then the dedicated flags.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use ocfsl_core::config::{env_overrides, parse_override, ExperimentConfig, Stamp};
use ocfsl_core::evaluation::{curve_svg, evaluate_records, oracle_records, read_records, write_records, MetricsReport};
use ocfsl_core::experiment::{context_ablation, evaluation_set, new_learner, training_set, validation_set};
use ocfsl_core::learners::{Ablations, LearnerKind};
use ocfsl_core::persist::{load_learner, load_state, read_provenance, save_learner, save_state, Provenance};
use ocfsl_core::sequences::{dataset_stats, read_sequences, write_sequences, Sequence};
use ocfsl_core::training::{train, TrainState, LOG_HEADER};
use ocfsl_core::Error;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;
pub const EXIT_INVARIANT: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "ocfsl", version, about = "Online contextualized few-shot learning lab")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GlobalArgs {
    /// Experiment config (JSON); defaults are used when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// cpm, protonet, matchingnet, imp or lstm.
    #[arg(long, global = true)]
    pub learner: Option<String>,
    /// Comma-separated ablations: no_h_rnn, no_metric, no_control, all.
    #[arg(long, global = true)]
    pub ablate: Option<String>,
    #[arg(long, global = true, conflicts_with = "semi")]
    pub supervised: bool,
    #[arg(long, global = true)]
    pub semi: bool,
    /// `dot.path=value` override; repeatable.
    #[arg(long = "set", global = true, value_name = "PATH=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Val,
    Eval,
}

impl Split {
    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Eval => "eval",
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write sequences as JSON lines plus a statistics sidecar.
    Generate {
        /// Number of sequences (default: the split's configured size).
        #[arg(long)]
        count: Option<usize>,
        #[arg(long, value_enum, default_value = "eval")]
        split: Split,
    },
    /// Train a learner, checkpointing at every validation.
    Train {
        /// Continue from `last.ckpt` in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint online and write metrics.
    Eval {
        /// Defaults to `best.ckpt` in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Sequence file; defaults to the evaluation split of the config.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Score a ground-truth oracle instead of a checkpoint.
        #[arg(long, conflicts_with = "checkpoint")]
        oracle: bool,
    },
    /// Recompute the metrics CSV from a records file.
    Report {
        records: PathBuf,
    },
    /// CPM vs online ProtoNet under ±spatial cue × ordered/shuffled.
    ContextAblation {
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
}

/// Map an error to the documented exit code.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Config { .. }) => EXIT_CONFIG,
        Some(Error::Record { .. } | Error::Invariant(_) | Error::Capacity { .. }) => EXIT_INVARIANT,
        _ => EXIT_RUNTIME,
    }
}

/// Resolve the experiment configuration, starting from `base` (JSON text)
/// when no `--config` is given.
pub fn resolve_config(args: &GlobalArgs, base: Option<String>) -> Result<ExperimentConfig> {
    let text = match &args.config {
        Some(p) => fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?,
        None => base.unwrap_or_else(|| ExperimentConfig::default().to_json()),
    };
    let mut overrides = env_overrides()?;
    for s in &args.set {
        overrides.push(parse_override(s)?);
    }
    let mut flag = |k: &str, v: String| overrides.push((k.to_string(), v));
    if let Some(seed) = args.seed {
        flag("seed", seed.to_string());
    }
    if let Some(out) = &args.out {
        flag("output_dir", serde_json::to_string(&out.to_string_lossy())?);
    }
    if let Some(l) = &args.learner {
        flag("learner.kind", serde_json::to_string(l)?);
    }
    if let Some(a) = &args.ablate {
        flag("learner.ablate", serde_json::to_string(&Ablations::parse_list(a)?)?);
    }
    if args.supervised {
        flag("sampler.semi_supervised", "false".into());
    }
    if args.semi {
        flag("sampler.semi_supervised", "true".into());
    }
    Ok(ExperimentConfig::from_json(&text, &overrides)?)
}

/// Parse-free entry point: resolve config, set up the worker pool and run.
pub fn run(cli: Cli) -> Result<()> {
    let base = match &cli.command {
        // Without an explicit config, continue from what the checkpoint was made with.
        Command::Eval { checkpoint, oracle: false, .. } if cli.global.config.is_none() => {
            let path = checkpoint.clone().unwrap_or_else(|| default_out(&cli.global).join("best.ckpt"));
            Some(checkpoint_config(&path)?)
        }
        Command::Train { resume: true } if cli.global.config.is_none() => {
            Some(checkpoint_config(&default_out(&cli.global).join("last.ckpt"))?)
        }
        _ => None,
    };
    let config = resolve_config(&cli.global, base)?;
    let out = PathBuf::from(&config.output_dir);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.global.workers.unwrap_or(0))
        .build()
        .context("starting worker pool")?;
    pool.install(|| match cli.command {
        Command::Generate { count, split } => generate(&config, &out, split, count).map(|_| ()),
        Command::Train { resume } => train_run(&config, &out, resume, |_| {}),
        Command::Eval {
            checkpoint,
            data,
            oracle,
        } => {
            let source = if oracle {
                Scorer::Oracle
            } else {
                Scorer::Checkpoint(checkpoint.unwrap_or_else(|| out.join("best.ckpt")))
            };
            let report = eval_run(&config, &out, &source, data.as_deref())?;
            println!("ap {:.6} over {} records", report.ap, report.records);
            Ok(())
        }
        Command::Report { records } => {
            print!("{}", report_csv(&records)?);
            Ok(())
        }
        Command::ContextAblation { seeds } => ablation_run(&config, &out, seeds),
    })
}

fn default_out(args: &GlobalArgs) -> PathBuf {
    args.out
        .clone()
        .unwrap_or_else(|| PathBuf::from(ExperimentConfig::default().output_dir))
}

fn checkpoint_config(path: &Path) -> Result<String> {
    let (_, prov) = read_provenance(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    prov.stamp.check_schema()?;
    Ok(serde_json::to_string(&prov.stamp.config)?)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn comment_header(stamp: &Stamp) -> String {
    stamp.header_lines().lines().map(|l| format!("# {l}\n")).collect()
}

/// Write `{split}.jsonl` and `{split}.stats.json`; returns the sequence path.
pub fn generate(config: &ExperimentConfig, out: &Path, split: Split, count: Option<usize>) -> Result<PathBuf> {
    let seed = config.seed;
    let seqs = match split {
        Split::Train => training_set(config, seed, count.unwrap_or(config.train.val_sequences)),
        Split::Val => {
            let mut c = config.clone();
            c.train.val_sequences = count.unwrap_or(c.train.val_sequences);
            validation_set(&c, seed)
        }
        Split::Eval => {
            let mut c = config.clone();
            c.eval.sequences = count.unwrap_or(c.eval.sequences);
            evaluation_set(&c, seed)
        }
    };
    let path = out.join(format!("{}.jsonl", split.name()));
    let mut w = create(&path)?;
    write_sequences(&mut w, &seqs)?;
    w.flush()?;
    let sidecar = json!({
        "provenance": config.stamp(),
        "split": split.name(),
        "stats": dataset_stats(&seqs),
    });
    let mut w = create(&out.join(format!("{}.stats.json", split.name())))?;
    writeln!(w, "{}", serde_json::to_string_pretty(&sidecar)?)?;
    w.flush()?;
    Ok(path)
}

/// Train into `out`: `train_log.csv`, `last.ckpt` (resumable) and
/// `best.ckpt` (best validation parameters). `on_row` sees each log line.
pub fn train_run(config: &ExperimentConfig, out: &Path, resume: bool, mut on_row: impl FnMut(&str)) -> Result<()> {
    let last = out.join("last.ckpt");
    let log_path = out.join("train_log.csv");
    let (mut learner, mut state) = if resume {
        load_state(&last, config).with_context(|| format!("resuming from {}", last.display()))?
    } else {
        let learner = new_learner(config, config.seed)?;
        let state = TrainState::new(&learner, &config.train);
        (learner, state)
    };
    // Rows written after the last checkpoint are replayed, so drop them.
    let kept: Vec<String> = if resume && log_path.exists() {
        BufReader::new(File::open(&log_path)?)
            .lines()
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .filter(|l| !l.starts_with('#') && l != LOG_HEADER)
            .filter(|l| {
                l.split(',')
                    .next()
                    .and_then(|s| s.parse::<u64>().ok())
                    .is_some_and(|s| s <= state.step)
            })
            .collect()
    } else {
        Vec::new()
    };
    let mut log = create(&log_path)?;
    write!(log, "{}", comment_header(&config.stamp()))?;
    writeln!(log, "{LOG_HEADER}")?;
    for l in &kept {
        writeln!(log, "{l}")?;
    }
    log.flush()?;

    let val = validation_set(config, config.seed);
    while state.step < config.train.steps {
        // Stop at validation boundaries so every checkpoint has a fresh
        // validation AP; the result is identical to one uninterrupted call.
        let every = config.train.val_every;
        let mut chunk = config.train.clone();
        chunk.steps = ((state.step / every + 1) * every).min(config.train.steps);
        train(&mut learner, &chunk, &config.sampler, config.seed, &val, &mut state, |row| {
            let line = row.to_csv();
            writeln!(log, "{line}")?;
            on_row(&line);
            Ok(())
        })?;
        log.flush()?;
        save_state(&last, config, &learner, &state)?;
        let mut best = learner.clone();
        best.params = state.best_params.clone();
        let prov = Provenance {
            stamp: config.stamp(),
            step: state.best_step,
            best_step: state.best_step,
            best_val_ap: state.best_val_ap,
        };
        save_learner(&out.join("best.ckpt"), &best, &prov)?;
    }
    Ok(())
}

/// What produces the evaluated predictions.
pub enum Scorer {
    Checkpoint(PathBuf),
    Oracle,
}

fn load_data(config: &ExperimentConfig, data: Option<&Path>) -> Result<Vec<Sequence>> {
    let Some(path) = data else {
        return Ok(evaluation_set(config, config.seed));
    };
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let seqs = read_sequences(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))?;
    let dim = config.sampler.input_dim();
    for s in &seqs {
        if let Some(step) = s.steps.iter().find(|t| t.x.len() != dim) {
            return Err(Error::config(
                "data",
                format!("sequence {} has {}-dimensional features, learner expects {dim}", s.id, step.x.len()),
            )
            .into());
        }
    }
    Ok(seqs)
}

/// Evaluate and write `report.csv`, `report.json`, `records.jsonl` and `curve.svg`.
pub fn eval_run(config: &ExperimentConfig, out: &Path, scorer: &Scorer, data: Option<&Path>) -> Result<MetricsReport> {
    let seqs = load_data(config, data)?;
    let (records, source) = match scorer {
        Scorer::Oracle => (seqs.iter().flat_map(oracle_records).collect::<Vec<_>>(), "oracle".to_string()),
        Scorer::Checkpoint(path) => {
            let (learner, prov) =
                load_learner(path, config).with_context(|| format!("loading checkpoint {}", path.display()))?;
            let source = format!(
                "checkpoint of {} at step {} (config {})",
                config.learner.kind.name(),
                prov.step,
                prov.stamp.config_hash
            );
            (evaluate_records(&learner, &seqs)?, source)
        }
    };
    let report = MetricsReport::from_records(&records)?;
    let stamp = config.stamp();
    let header = format!("{}\nscorer: {source}", stamp.header_lines());

    let mut w = create(&out.join("report.csv"))?;
    w.write_all(report.to_csv(&header).as_bytes())?;
    w.flush()?;
    let mut w = create(&out.join("report.json"))?;
    let doc = json!({ "provenance": stamp, "scorer": source, "report": report });
    writeln!(w, "{}", serde_json::to_string_pretty(&doc)?)?;
    w.flush()?;
    let mut w = create(&out.join("records.jsonl"))?;
    write_records(&mut w, Some(&stamp), &records)?;
    w.flush()?;
    let title = format!("{} online accuracy by time step", config.learner.kind.name());
    let svg = curve_svg(&report.curve, &title);
    let svg = svg.replacen('\n', &format!("\n<!--\n{header}\n-->\n"), 1);
    let mut w = create(&out.join("curve.svg"))?;
    w.write_all(svg.as_bytes())?;
    w.flush()?;
    Ok(report)
}

/// Metrics CSV for a records file, headed by its provenance when present.
pub fn report_csv(records: &Path) -> Result<String> {
    let file = File::open(records).with_context(|| format!("opening {}", records.display()))?;
    let (stamp, recs) = read_records(BufReader::new(file)).with_context(|| format!("reading {}", records.display()))?;
    if let Some(s) = &stamp {
        s.check_schema()?;
    }
    let report = MetricsReport::from_records(&recs)?;
    Ok(report.to_csv(&stamp.map(|s| s.header_lines()).unwrap_or_default()))
}

/// Run the 2×2 ablation and write `ablation.csv` and `ablation.json`.
pub fn ablation_run(config: &ExperimentConfig, out: &Path, seeds: u64) -> Result<()> {
    if seeds == 0 {
        bail!(Error::config("seeds", "must be at least 1"));
    }
    let seeds: Vec<u64> = (0..seeds).map(|i| config.seed + i).collect();
    let table = context_ablation(config, &seeds, |cell, seed, ap| {
        eprintln!(
            "cue={} shuffled={} {} seed {seed}: ap {ap:.4}",
            cell.spatial_cue,
            cell.shuffled,
            cell.learner.name()
        );
    })?;
    let stamp = config.stamp();
    let mut w = create(&out.join("ablation.csv"))?;
    write!(w, "{}{}", comment_header(&stamp), table.to_csv())?;
    w.flush()?;
    let mut w = create(&out.join("ablation.json"))?;
    writeln!(w, "{}", serde_json::to_string_pretty(&json!({ "provenance": stamp, "table": table }))?)?;
    w.flush()?;
    for (cue, shuffled) in [(false, false), (false, true), (true, false), (true, true)] {
        let cell = |k| table.cell(cue, shuffled, k).map_or(f64::NAN, |c| c.mean);
        println!(
            "cue={cue:<5} shuffled={shuffled:<5} cpm {:.4} protonet {:.4}",
            cell(LearnerKind::Cpm),
            cell(LearnerKind::ProtoNet)
        );
    }
    Ok(())
}
