//! Command-line entry point. Every subcommand reads an optional JSON
//! config file; explicit flags override the file, which overrides built-in
//! defaults. All outputs are written atomically and contain no timestamps,
//! so identical inputs and seeds replay to byte-identical files.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{atomic_write, load_idx, synth_data, write_idx, Dataset};
use crate::error::{Error, Result};
use crate::prune::{per_layer_csv, prune, AblationOrder, CompressionReport};
use crate::search::{search_by_constraint, verify_constraint, Constraint};
use crate::train::{
    continue_train, evaluate, fine_tune, load_checkpoint, metrics_to_csv, save_checkpoint, sweep,
    sweep_to_csv, train, Checkpoint, TrainConfig, DEFAULT_PENALTY_GRID,
};

// ---------------------------------------------------------------------------
// Config file
// ---------------------------------------------------------------------------

/// Where training and evaluation data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataConfig {
    Synth {
        seed: u64,
        train_n: usize,
        eval_n: usize,
        classes: usize,
        channels: usize,
        height: usize,
        width: usize,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        eval_images: PathBuf,
        eval_labels: PathBuf,
    },
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synth {
            seed: 1000,
            train_n: 2000,
            eval_n: 500,
            classes: 4,
            channels: 1,
            height: 8,
            width: 8,
        }
    }
}

pub fn load_datasets(data: &DataConfig) -> Result<(Dataset, Dataset)> {
    match data {
        DataConfig::Synth {
            seed,
            train_n,
            eval_n,
            classes,
            channels,
            height,
            width,
        } => {
            let shape = (*channels, *height, *width);
            let train_set = synth_data(*seed, *train_n, *classes, shape)?;
            let eval_set = synth_data(seed ^ 0x5851_F42D_4C95_7F2D, *eval_n, *classes, shape)?;
            Ok((train_set, eval_set))
        }
        DataConfig::Idx {
            train_images,
            train_labels,
            eval_images,
            eval_labels,
        } => {
            let mut train_set = load_idx(train_images, train_labels)?;
            let mut eval_set = load_idx(eval_images, eval_labels)?;
            // a split pair shares one label universe
            let classes = train_set.classes.max(eval_set.classes);
            train_set.classes = classes;
            eval_set.classes = classes;
            Ok((train_set, eval_set))
        }
    }
}

/// Top-level config document: training schedule plus data source.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct CliConfig {
    pub train: TrainConfig,
    pub data: DataConfig,
}

fn read_config(path: Option<&Path>) -> Result<CliConfig> {
    match path {
        None => Ok(CliConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.display().to_string(),
                reason: e.to_string(),
            })?;
            serde_json::from_str(&text).map_err(|e| Error::Json {
                reason: format!("{}: {e}", p.display()),
            })
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        reason: e.to_string(),
    })?;
    atomic_write(path, text.as_bytes())
}

// ---------------------------------------------------------------------------
// Arguments
// ---------------------------------------------------------------------------

#[derive(Parser)]
#[command(
    name = "secateur",
    version,
    about = "Train gate agents on small CNNs, prune channels, and search compressed architectures"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full schedule and write a checkpoint plus metrics CSV.
    Train(TrainArgs),
    /// Report accuracy of a checkpointed model.
    Eval(EvalArgs),
    /// Physically remove low-probability channels and report compression.
    Prune(PruneArgs),
    /// Find a compressed architecture under a byte or FLOPs budget.
    Search(SearchArgs),
    /// Drop the k highest- or lowest-weight channels and measure accuracy.
    Ablate(AblateArgs),
    /// Train across a penalty grid and tabulate accuracy/compression.
    Sweep(SweepArgs),
    /// Generate synthetic blob data as IDX files.
    SynthData(SynthArgs),
    /// Compare two checkpoints into a compression report.
    Report(ReportArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Penalty for wrong predictions (the reward hyperparameter).
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    policy_stop: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Checkpoint to continue from instead of starting fresh.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Metrics CSV path.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Also write the physically pruned model here.
    #[arg(long)]
    out_pruned: Option<PathBuf>,
    /// Also write the final compression report here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Evaluate with the deterministic threshold mask applied.
    #[arg(long)]
    masked: bool,
    /// Evaluate the physically pruned model.
    #[arg(long)]
    pruned: bool,
}

#[derive(Args)]
struct PruneArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Compression report JSON.
    #[arg(long)]
    out: PathBuf,
    /// Per-layer kept-channel table.
    #[arg(long)]
    per_layer_csv: Option<PathBuf>,
    /// Write the pruned model as a checkpoint.
    #[arg(long)]
    out_checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, group = "budget", required = true)]
    max_bytes: Option<u64>,
    #[arg(long, group = "budget")]
    max_flops: Option<u64>,
    #[arg(long, default_value_t = 0)]
    fine_tune_epochs: usize,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Write the searched model as a checkpoint.
    #[arg(long)]
    out_checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    k: usize,
    #[arg(long, value_parser = parse_order)]
    order: AblationOrder,
    #[arg(long)]
    config: Option<PathBuf>,
    /// CSV the (k, order, accuracy) row is appended to.
    #[arg(long)]
    ablation_csv: Option<PathBuf>,
}

fn parse_order(s: &str) -> std::result::Result<AblationOrder, String> {
    match s {
        "highest" => Ok(AblationOrder::Highest),
        "lowest" => Ok(AblationOrder::Lowest),
        other => Err(format!("order must be 'highest' or 'lowest', got '{other}'")),
    }
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated penalty values; defaults to the built-in grid.
    #[arg(long, value_delimiter = ',')]
    lambdas: Vec<f64>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_values_t = [0u64])]
    seeds: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    classes: usize,
    #[arg(long, default_value_t = 8)]
    height: usize,
    #[arg(long, default_value_t = 8)]
    width: usize,
    #[arg(long)]
    out_images: PathBuf,
    #[arg(long)]
    out_labels: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    original: PathBuf,
    #[arg(long)]
    pruned: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

// ---------------------------------------------------------------------------
// Command implementations
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct ReportDoc<'a> {
    config: &'a TrainConfig,
    report: &'a CompressionReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pruned_graph: Option<serde_json::Value>,
}

#[derive(Serialize)]
struct SearchDoc<'a> {
    config: &'a TrainConfig,
    constraint: Constraint,
    satisfied: bool,
    measured: u64,
    fine_tune_epochs: usize,
    report: &'a CompressionReport,
    removal_order: &'a [(usize, usize)],
    pruned_graph: serde_json::Value,
}

fn run_train(args: TrainArgs) -> Result<()> {
    let mut cfg = read_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(lambda) = args.lambda {
        cfg.train.penalty = lambda;
    }
    if let Some(epochs) = args.epochs {
        cfg.train.epochs = epochs;
    }
    if let Some(stop) = args.policy_stop {
        cfg.train.policy_stop_epoch = stop;
    }
    if let Some(batch) = args.batch_size {
        cfg.train.batch_size = batch;
    }
    let (train_set, eval_set) = load_datasets(&cfg.data)?;
    let outcome = match args.resume {
        Some(path) => {
            let ckpt = load_checkpoint(&path)?;
            continue_train(ckpt, cfg.train.epochs, &train_set, &eval_set)?
        }
        None => train(&cfg.train, &train_set, &eval_set)?,
    };
    save_checkpoint(&outcome.checkpoint, &args.out)?;
    if let Some(metrics_path) = args.metrics {
        atomic_write(&metrics_path, metrics_to_csv(&outcome.metrics).as_bytes())?;
    }
    if let Some(report_path) = args.report {
        write_json(
            &report_path,
            &ReportDoc {
                config: &outcome.checkpoint.config,
                report: &outcome.report,
                pruned_graph: Some(crate::graph::graph_to_value(&outcome.pruned.graph)?),
            },
        )?;
    }
    if let Some(pruned_path) = args.out_pruned {
        let pruned_ckpt = Checkpoint {
            graph: outcome.pruned.graph.clone(),
            params: outcome.pruned.params.clone(),
            bank: outcome.pruned.bank.clone(),
            config: outcome.checkpoint.config.clone(),
            epoch: outcome.checkpoint.epoch,
            rng: outcome.checkpoint.rng.clone(),
        };
        save_checkpoint(&pruned_ckpt, &pruned_path)?;
    }
    println!(
        "trained {} epochs: accuracy {} -> {} | params {} -> {} ({}%) | flops {} -> {} ({}%)",
        outcome.checkpoint.epoch,
        outcome.report.accuracy_before.unwrap_or(f64::NAN),
        outcome.report.accuracy_after.unwrap_or(f64::NAN),
        outcome.report.params_before,
        outcome.report.params_after,
        outcome.report.params_pruned_rate,
        outcome.report.flops_before,
        outcome.report.flops_after,
        outcome.report.flops_pruned_rate,
    );
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let cfg = read_config(args.config.as_deref())?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let (_, eval_set) = load_datasets(&cfg.data)?;
    let accuracy = if args.pruned {
        let outcome = prune(&ckpt.graph, &ckpt.params, &ckpt.bank, ckpt.config.threshold)?;
        evaluate(&outcome.graph, &outcome.params, &eval_set, None)?
    } else if args.masked {
        let kept = crate::prune::kept_sets(&ckpt.bank, ckpt.config.threshold);
        let flags: Vec<Vec<bool>> = ckpt
            .graph
            .gate_groups
            .iter()
            .zip(&kept)
            .map(|(g, k)| (0..g.channels).map(|c| k.contains(&c)).collect())
            .collect();
        let masks = crate::graph::MaskSet::from_kept(&flags);
        evaluate(&ckpt.graph, &ckpt.params, &eval_set, Some(&masks))?
    } else {
        evaluate(&ckpt.graph, &ckpt.params, &eval_set, None)?
    };
    println!("accuracy {accuracy}");
    Ok(())
}

fn run_prune(args: PruneArgs) -> Result<()> {
    let cfg = read_config(args.config.as_deref())?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let threshold = args.threshold.unwrap_or(ckpt.config.threshold);
    let outcome = prune(&ckpt.graph, &ckpt.params, &ckpt.bank, threshold)?;
    let (_, eval_set) = load_datasets(&cfg.data)?;
    let (before, after) = match evaluate(&ckpt.graph, &ckpt.params, &eval_set, None) {
        Ok(b) => (
            Some(b),
            Some(evaluate(&outcome.graph, &outcome.params, &eval_set, None)?),
        ),
        // configured data may not match this checkpoint's input shape
        Err(_) => (None, None),
    };
    let report =
        crate::prune::compression_report(&ckpt.graph, &outcome.graph, before, after);
    write_json(
        &args.out,
        &ReportDoc {
            config: &ckpt.config,
            report: &report,
            pruned_graph: Some(crate::graph::graph_to_value(&outcome.graph)?),
        },
    )?;
    if let Some(csv_path) = args.per_layer_csv {
        atomic_write(&csv_path, per_layer_csv(&report).as_bytes())?;
    }
    if let Some(ckpt_path) = args.out_checkpoint {
        let pruned_ckpt = Checkpoint {
            graph: outcome.graph.clone(),
            params: outcome.params.clone(),
            bank: outcome.bank.clone(),
            config: ckpt.config.clone(),
            epoch: ckpt.epoch,
            rng: ckpt.rng.clone(),
        };
        save_checkpoint(&pruned_ckpt, &ckpt_path)?;
    }
    println!(
        "params {} -> {} ({}%) | flops {} -> {} ({}%)",
        report.params_before,
        report.params_after,
        report.params_pruned_rate,
        report.flops_before,
        report.flops_after,
        report.flops_pruned_rate,
    );
    Ok(())
}

fn run_search(args: SearchArgs) -> Result<()> {
    let cfg = read_config(args.config.as_deref())?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let constraint = match (args.max_bytes, args.max_flops) {
        (Some(b), None) => Constraint::MaxBytes(b),
        (None, Some(f)) => Constraint::MaxFlops(f),
        _ => {
            return Err(Error::Config {
                reason: "pass exactly one of --max-bytes or --max-flops".into(),
            })
        }
    };
    let mut outcome = search_by_constraint(&ckpt.graph, &ckpt.params, &ckpt.bank, constraint)?;
    let (train_set, eval_set) = load_datasets(&cfg.data)?;
    let mut report = outcome.report.clone();
    if evaluate(&ckpt.graph, &ckpt.params, &eval_set, None).is_ok() {
        report.accuracy_before = Some(evaluate(&ckpt.graph, &ckpt.params, &eval_set, None)?);
        if args.fine_tune_epochs > 0 {
            fine_tune(
                &outcome.pruned.graph,
                &mut outcome.pruned.params,
                &train_set,
                args.fine_tune_epochs,
                ckpt.config.network_lr,
                ckpt.config.seed,
            )?;
        }
        report.accuracy_after = Some(evaluate(
            &outcome.pruned.graph,
            &outcome.pruned.params,
            &eval_set,
            None,
        )?);
    }
    let (satisfied, measured) = verify_constraint(&outcome.pruned.graph, constraint);
    write_json(
        &args.out,
        &SearchDoc {
            config: &ckpt.config,
            constraint,
            satisfied,
            measured,
            fine_tune_epochs: args.fine_tune_epochs,
            report: &report,
            removal_order: &outcome.removal_order,
            pruned_graph: crate::graph::graph_to_value(&outcome.pruned.graph)?,
        },
    )?;
    if let Some(ckpt_path) = args.out_checkpoint {
        let searched = Checkpoint {
            graph: outcome.pruned.graph.clone(),
            params: outcome.pruned.params.clone(),
            bank: outcome.pruned.bank.clone(),
            config: ckpt.config.clone(),
            epoch: ckpt.epoch,
            rng: ckpt.rng.clone(),
        };
        save_checkpoint(&searched, &ckpt_path)?;
    }
    println!(
        "constraint {constraint}: satisfied {satisfied}, measured {measured}, removed {} channels",
        outcome.removal_order.len()
    );
    Ok(())
}

fn run_ablate(args: AblateArgs) -> Result<()> {
    let cfg = read_config(args.config.as_deref())?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let (_, eval_set) = load_datasets(&cfg.data)?;
    let accuracy = crate::prune::ablate_topk(
        &ckpt.graph,
        &ckpt.params,
        &ckpt.bank,
        args.k,
        args.order,
        &eval_set.images,
        &eval_set.labels,
    )?;
    let order = match args.order {
        AblationOrder::Highest => "highest",
        AblationOrder::Lowest => "lowest",
    };
    if let Some(csv_path) = args.ablation_csv {
        let mut content = match std::fs::read_to_string(&csv_path) {
            Ok(existing) => existing,
            Err(_) => String::from("k,order,accuracy\n"),
        };
        content.push_str(&format!("{},{},{}\n", args.k, order, accuracy));
        atomic_write(&csv_path, content.as_bytes())?;
    }
    println!("accuracy {accuracy}");
    Ok(())
}

#[derive(Serialize)]
struct SweepDoc<'a> {
    config: &'a TrainConfig,
    rows: &'a [crate::train::SweepRow],
}

fn run_sweep(args: SweepArgs) -> Result<()> {
    let cfg = read_config(args.config.as_deref())?;
    let (train_set, eval_set) = load_datasets(&cfg.data)?;
    let lambdas = if args.lambdas.is_empty() {
        DEFAULT_PENALTY_GRID.to_vec()
    } else {
        args.lambdas.clone()
    };
    let rows = sweep(&cfg.train, &lambdas, &args.seeds, &train_set, &eval_set)?;
    if args.out.extension().is_some_and(|e| e == "json") {
        write_json(
            &args.out,
            &SweepDoc {
                config: &cfg.train,
                rows: &rows,
            },
        )?;
    } else {
        atomic_write(&args.out, sweep_to_csv(&rows).as_bytes())?;
    }
    for r in &rows {
        println!(
            "lambda {} seed {}: accuracy {} -> {}, params pruned {}%, flops pruned {}%",
            r.penalty,
            r.seed,
            r.accuracy_before,
            r.accuracy_after,
            r.params_pruned_rate,
            r.flops_pruned_rate
        );
    }
    Ok(())
}

fn run_synth(args: SynthArgs) -> Result<()> {
    let ds = synth_data(args.seed, args.n, args.classes, (1, args.height, args.width))?;
    write_idx(&ds, &args.out_images, &args.out_labels)?;
    println!(
        "wrote {} samples ({} classes, {}x{}) to {} / {}",
        ds.len(),
        ds.classes,
        args.height,
        args.width,
        args.out_images.display(),
        args.out_labels.display()
    );
    Ok(())
}

fn run_report(args: ReportArgs) -> Result<()> {
    let original = load_checkpoint(&args.original)?;
    let pruned = load_checkpoint(&args.pruned)?;
    let report = crate::prune::compression_report(&original.graph, &pruned.graph, None, None);
    write_json(
        &args.out,
        &ReportDoc {
            config: &original.config,
            report: &report,
            pruned_graph: Some(crate::graph::graph_to_value(&pruned.graph)?),
        },
    )?;
    println!(
        "params {} -> {} ({}%) | flops {} -> {} ({}%)",
        report.params_before,
        report.params_after,
        report.params_pruned_rate,
        report.flops_before,
        report.flops_after,
        report.flops_pruned_rate,
    );
    Ok(())
}

/// Parse and dispatch. Returns the process exit code: 0 on success, 2 for
/// usage errors, 1 for runtime failures.
pub fn cli_main(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::Prune(args) => run_prune(args),
        Command::Search(args) => run_search(args),
        Command::Ablate(args) => run_ablate(args),
        Command::Sweep(args) => run_sweep(args),
        Command::SynthData(args) => run_synth(args),
        Command::Report(args) => run_report(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
