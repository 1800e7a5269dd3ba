use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use bsnas::cost;
use bsnas::evaluator::{brute_force_best, Evaluator, Workers};
use bsnas::events::read_evals;
use bsnas::pipeline::{run_pipeline, Backend, PipelineOptions, PipelineStatus, RunConfig, Stages};
use bsnas::report::{
    distribution_report, no_shrink_control, rank_correlation, GraphCheckpoint, Selection,
};
use bsnas::shrinking::OperationGraph;
use bsnas::space::{load_space, Architecture, Mode, SearchSpaceSpec};
use bsnas::{Error, Result};

#[derive(Parser)]
#[command(
    name = "bsnas",
    version,
    about = "Channel-searchable supernet search with step shrinking and evolution"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Describe a search space.
    Space(SpaceArgs),
    /// MAC and parameter breakdown of one architecture.
    Flops(FlopsArgs),
    /// Run the shrinking stage only.
    Shrink(RunArgs),
    /// Evolutionary search on a shrunk graph.
    Evolve(EvolveArgs),
    /// Shrinking followed by evolution.
    Pipeline(RunArgs),
    /// Accuracy distribution of architectures sampled from graph checkpoints.
    ReportDist(DistArgs),
    /// Rank correlation between supernet estimates and true fitness.
    ReportRank(RankArgs),
    /// Exhaustive search of a small alive space.
    Oracle(OracleArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SpaceQuery {
    Summary,
    Cardinality,
    Bounds,
    Table,
}

#[derive(Args)]
struct SpaceArgs {
    #[arg(value_enum, default_value = "summary")]
    query: SpaceQuery,
    /// Space table (JSON); the default space when omitted.
    #[arg(long)]
    space: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Released,
    Supernet,
}

#[derive(Args)]
struct FlopsArgs {
    /// Canonical architecture string, e.g. k3t3|...#c24|...
    arch: String,
    #[arg(long, value_enum, default_value = "released")]
    mode: ModeArg,
    #[arg(long)]
    per_layer: bool,
    #[arg(long)]
    json: bool,
    #[arg(long)]
    space: Option<PathBuf>,
}

#[derive(Args)]
struct CommonRun {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "output-dir", alias = "output_dir")]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    /// Replace outputs of an earlier run.
    #[arg(long)]
    overwrite: bool,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonRun,
    /// Continue from checkpoint.json in the output directory.
    #[arg(long)]
    resume: bool,
    /// Stop after this many units (shrink rounds and evolution generations).
    #[arg(long)]
    halt_after: Option<usize>,
}

#[derive(Args)]
struct EvolveArgs {
    #[command(flatten)]
    common: CommonRun,
    /// Graph checkpoint written by `shrink` or `pipeline` (graph.json).
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    flops_max: Option<u64>,
    #[arg(long)]
    flops_min: Option<u64>,
}

#[derive(Args)]
struct DistArgs {
    #[arg(long)]
    config: PathBuf,
    /// Graph checkpoints (graph_step<k>.json), in step order.
    #[arg(long, num_args = 1.., required = true)]
    checkpoints: Vec<PathBuf>,
    #[arg(long, default_value_t = 20)]
    samples: usize,
    /// Also sample an unshrunk graph trained for this many virtual epochs.
    #[arg(long)]
    control_epochs: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SelectionArg {
    Top,
    Spread,
}

#[derive(Args)]
struct RankArgs {
    #[arg(long)]
    config: PathBuf,
    /// Evaluation stream (evals.jsonl); only evolution records are used.
    #[arg(long)]
    evals: PathBuf,
    #[arg(long, default_value_t = 10)]
    top_n: usize,
    #[arg(long, value_enum, default_value = "top")]
    selection: SelectionArg,
    /// Also write the selected rows as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long)]
    config: PathBuf,
    /// Graph checkpoint; the unshrunk graph when omitted.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 1_000_000)]
    limit: u64,
}

fn load_space_arg(path: &Option<PathBuf>) -> Result<SearchSpaceSpec> {
    match path {
        Some(p) => load_space(p),
        None => Ok(SearchSpaceSpec::default_space()),
    }
}

fn print_json(v: &serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn cmd_space(args: &SpaceArgs) -> Result<()> {
    let space = load_space_arg(&args.space)?;
    let (lo, hi) = cost::flops_bounds(&space);
    let card = space.cardinality().to_string();
    match (args.query, args.json) {
        (SpaceQuery::Cardinality, false) => println!("{card}"),
        (SpaceQuery::Cardinality, true) => print_json(&json!({ "cardinality": card }))?,
        (SpaceQuery::Bounds, false) => println!("{lo} {hi}"),
        (SpaceQuery::Bounds, true) => print_json(&json!({ "min_macs": lo, "max_macs": hi }))?,
        (SpaceQuery::Table, _) => print_json(&serde_json::to_value(space.to_config())?)?,
        (SpaceQuery::Summary, true) => print_json(&json!({
            "layers": space.layer_count(),
            "clusters": space.clusters().len(),
            "operations_per_layer": space.op_count(0),
            "cardinality": card,
            "min_macs": lo,
            "max_macs": hi,
        }))?,
        (SpaceQuery::Summary, false) => {
            println!("searchable layers  {}", space.layer_count());
            println!("clusters           {}", space.clusters().len());
            for (i, c) in space.clusters().iter().enumerate() {
                println!(
                    "  cluster {i}: {} blocks, stride {}, input {}x{}, channels {:?}",
                    c.block_count,
                    c.stride,
                    c.input_resolution,
                    c.input_resolution,
                    c.channel_choices
                );
            }
            println!("cardinality        {card}");
            println!("MACs               {lo} .. {hi}");
        }
    }
    Ok(())
}

fn cmd_flops(args: &FlopsArgs) -> Result<()> {
    let space = load_space_arg(&args.space)?;
    let mode = match args.mode {
        ModeArg::Released => Mode::Released,
        ModeArg::Supernet => Mode::Supernet,
    };
    let arch: Architecture = args.arch.parse()?;
    let c = cost::flops(&space, &arch.with_mode(mode))?;
    if args.json {
        let mut v = serde_json::to_value(&c)?;
        if !args.per_layer {
            v.as_object_mut().map(|m| m.remove("per_layer"));
        }
        return print_json(&v);
    }
    if args.per_layer {
        println!(
            "{:<10} {:>7} {:>6} {:>6} {:>14} {:>10}",
            "layer", "input", "c_in", "c_out", "macs", "params"
        );
        for l in &c.per_layer {
            println!(
                "{:<10} {:>7} {:>6} {:>6} {:>14} {:>10}",
                l.label,
                format!("{0}x{0}", l.input_side),
                l.c_in,
                l.c_out,
                l.macs,
                l.params
            );
        }
    }
    println!("total MACs   {}", c.total_macs);
    println!("total params {}", c.total_params);
    Ok(())
}

fn load_run_config(common: &CommonRun) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&common.config)?;
    cfg.apply_env()?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(d) = &common.output_dir {
        cfg.output_dir = d.clone();
    }
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    Ok(cfg)
}

fn report_status(status: PipelineStatus, cfg: &RunConfig, started: Instant) -> Result<()> {
    match status {
        PipelineStatus::Halted { units_done } => {
            eprintln!("halted after {units_done} units; resume with --resume");
        }
        PipelineStatus::Completed { graph, best } => {
            eprintln!("alive architectures: {}", graph.alive_cardinality());
            if let Some(b) = best {
                print_json(&serde_json::to_value(&b)?)?;
            }
            eprintln!(
                "outputs in {} ({:.1}s)",
                cfg.output_dir.display(),
                started.elapsed().as_secs_f64()
            );
        }
    }
    Ok(())
}

fn cmd_run(args: &RunArgs, stages: Stages) -> Result<()> {
    let started = Instant::now();
    let cfg = load_run_config(&args.common)?;
    let opts = PipelineOptions {
        overwrite: args.common.overwrite,
        resume: args.resume,
        halt_after: args.halt_after,
        stages,
    };
    let status = run_pipeline(&cfg, &opts)?;
    report_status(status, &cfg, started)
}

fn cmd_evolve(args: &EvolveArgs) -> Result<()> {
    let started = Instant::now();
    let mut cfg = load_run_config(&args.common)?;
    if args.flops_max.is_some() {
        cfg.evolution.flops_max = args.flops_max;
    }
    if args.flops_min.is_some() {
        cfg.evolution.flops_min = args.flops_min;
    }
    let graph = GraphCheckpoint::load(&args.checkpoint)?;
    let opts = PipelineOptions {
        overwrite: args.common.overwrite,
        stages: Stages::EvolveFrom(graph),
        ..Default::default()
    };
    let status = run_pipeline(&cfg, &opts)?;
    report_status(status, &cfg, started)
}

fn build_backend(config: &Path) -> Result<(RunConfig, SearchSpaceSpec, Backend)> {
    let mut cfg = RunConfig::load(config)?;
    cfg.apply_env()?;
    let space = cfg.space.load()?;
    let backend = cfg.evaluator.build(&space, cfg.seed)?;
    Ok((cfg, space, backend))
}

fn cmd_report_dist(args: &DistArgs) -> Result<()> {
    let (cfg, space, mut backend) = build_backend(&args.config)?;
    let workers = Workers::new(args.workers.unwrap_or(cfg.workers))?;
    let mut checkpoints = Vec::new();
    if let Some(epochs) = args.control_epochs {
        let mut fresh = cfg.evaluator.build(&space, cfg.seed)?;
        checkpoints.push(no_shrink_control(&space, fresh.as_dyn_mut(), epochs));
    }
    for p in &args.checkpoints {
        checkpoints.push(GraphCheckpoint::load(p)?);
    }
    let seed = args.seed.unwrap_or(cfg.seed);
    let report = distribution_report(
        &space,
        &checkpoints,
        backend.as_dyn_mut(),
        args.samples,
        seed,
        &workers,
    )?;
    for (step, why) in &report.skipped {
        eprintln!("warning: skipped checkpoint of step {step}: {why}");
    }
    for s in &report.summaries {
        eprintln!(
            "step {:>2}  n={:<3} mean {:.4}  min {:.4}  max {:.4}",
            s.step, s.samples, s.mean, s.min, s.max
        );
    }
    match &args.out {
        Some(p) => report.write_csv(BufWriter::new(File::create(p)?)),
        None => report.write_csv(io::stdout().lock()),
    }
}

fn cmd_report_rank(args: &RankArgs) -> Result<()> {
    let (_, _, backend) = build_backend(&args.config)?;
    let evals: Vec<(Architecture, f64)> = read_evals(&args.evals)?
        .into_iter()
        .filter(|e| e.phase == bsnas::events::Phase::Evolve)
        .map(|e| Ok((e.arch.parse()?, e.score)))
        .collect::<Result<_>>()?;
    let selection = match args.selection {
        SelectionArg::Top => Selection::Top,
        SelectionArg::Spread => Selection::Spread,
    };
    let report = rank_correlation(&evals, &mut |a| backend.truth(a), args.top_n, selection)?;
    if let Some(p) = &args.csv {
        report.write_csv(BufWriter::new(File::create(p)?))?;
    }
    print_json(&serde_json::to_value(&report)?)
}

fn cmd_oracle(args: &OracleArgs) -> Result<()> {
    let (_, space, mut backend) = build_backend(&args.config)?;
    let graph = match &args.checkpoint {
        Some(p) => {
            let cp = GraphCheckpoint::load(p)?;
            backend
                .as_dyn_mut()
                .restore_training_state(&cp.evaluator_state)?;
            cp.graph
        }
        None => OperationGraph::new(&space),
    };
    let evaluator: Box<dyn Evaluator> = match &backend {
        Backend::Surrogate(e) => Box::new(e.stand_alone_evaluator()),
        Backend::Table(e) => Box::new(e.clone()),
    };
    let (arch, score) = brute_force_best(&space, &graph, evaluator.as_ref(), args.limit)?;
    print_json(&json!({
        "arch": arch.canonical(),
        "score": score,
        "alive_cardinality": graph.alive_cardinality().to_string(),
    }))
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Space(a) => cmd_space(a),
        Command::Flops(a) => cmd_flops(a),
        Command::Shrink(a) => cmd_run(a, Stages::ShrinkOnly),
        Command::Evolve(a) => cmd_evolve(a),
        Command::Pipeline(a) => cmd_run(a, Stages::All),
        Command::ReportDist(a) => cmd_report_dist(a),
        Command::ReportRank(a) => cmd_report_rank(a),
        Command::Oracle(a) => cmd_oracle(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {
            let _ = io::stdout().flush();
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    e.exit_code().clamp(1, 255) as u8
}
