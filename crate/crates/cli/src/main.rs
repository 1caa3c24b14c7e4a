mod error;
mod manifest;
mod settings;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use gridseq_core::data::{build_training_set, collect_random_walks, load_dataset, save_dataset, Dataset};
use gridseq_core::grid::{load_feeder, Contingencies, FeederGraph};
use gridseq_core::pipeline::eval::{default_edges, histogram_csv, power_histogram, solution_dot};
use gridseq_core::pipeline::oracle::{oracle_search_with_budget, DEFAULT_STATE_BUDGET};
use gridseq_core::pipeline::{
    contingency_suite, evaluate, load_checkpoint, save_checkpoint, train, Checkpoint, EvalConfig, InferenceMode,
    OracleResult, Scenario, TrainConfig,
};
use gridseq_nn::AdamWConfig;

use error::CliError;
use manifest::{file_hash, write_file, RunManifest};
use settings::Settings;

#[derive(Parser)]
#[command(name = "gridseq", version, about = "Service restoration planning with a dual-head decision transformer")]
struct Cli {
    /// TOML file with one table per command; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Record random-walk episodes on a feeder.
    GenData(GenDataArgs),
    /// Train a model on a recorded dataset.
    Train(TrainArgs),
    /// Run inference trials and report metrics.
    Eval(EvalArgs),
    /// Zero-shot evaluation under switch contingencies.
    Contingency(ContingencyArgs),
    /// Exhaustive optimum for a feeder.
    Oracle(OracleArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Feeder file.
    #[arg(long)]
    feeder: Option<PathBuf>,
    /// Episodes to record [default: 2000].
    #[arg(long)]
    episodes: Option<usize>,
    /// Episode i uses seed + i [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// dataset.jsonl written by gen-data.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Feeder the dataset was recorded on.
    #[arg(long)]
    feeder: Option<PathBuf>,
    /// Number of subgoals [default: 2].
    #[arg(long)]
    q: Option<usize>,
    /// Actions per action-head window [default: 8].
    #[arg(long = "K", visible_alias = "k")]
    k: Option<usize>,
    /// Optimizer steps [default: 3000].
    #[arg(long, visible_alias = "episodes")]
    steps: Option<usize>,
    /// Minibatch size [default: 64].
    #[arg(long)]
    batch: Option<usize>,
    /// Initialization and batch-sampling seed [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write an intermediate checkpoint every this many steps, 0 for none [default: 0].
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Embedding width [default: 128].
    #[arg(long)]
    embed_dim: Option<usize>,
    /// Transformer blocks [default: 3].
    #[arg(long)]
    layers: Option<usize>,
    /// Attention heads [default: 4].
    #[arg(long)]
    heads: Option<usize>,
    /// Dropout rate [default: 0.1].
    #[arg(long)]
    dropout: Option<f64>,
    /// Peak learning rate [default: 1e-4].
    #[arg(long)]
    lr: Option<f64>,
    /// Linear warmup steps [default: 100].
    #[arg(long)]
    warmup: Option<u64>,
    /// Decoupled weight decay [default: 0].
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Global gradient-norm clip, 0 to disable [default: 1].
    #[arg(long)]
    clip: Option<f64>,
    /// Weight of the subgoal regression loss [default: 1].
    #[arg(long)]
    guidance_weight: Option<f64>,
    /// Probability of nulling guidance slots in a training sequence [default: 0.5].
    #[arg(long)]
    null_slot_prob: Option<f64>,
}

#[derive(Args)]
struct InferenceArgs {
    /// Checkpoint written by train.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Feeder to run on.
    #[arg(long)]
    feeder: Option<PathBuf>,
    /// Rollouts per scenario [default: 50].
    #[arg(long)]
    trials: Option<usize>,
    /// argmax or sample [default: argmax].
    #[arg(long)]
    mode: Option<InferenceMode>,
    /// Trial i samples with seed + i [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Initial return-to-go; defaults to the oracle optimum.
    #[arg(long)]
    rtg0: Option<f64>,
    /// Accept a checkpoint trained on a different feeder.
    #[arg(long)]
    zero_shot: bool,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: InferenceArgs,
    /// Number of equal-width restored-power bins [default: 10].
    #[arg(long)]
    bins: Option<usize>,
    /// Explicit ascending bin edges, comma separated.
    #[arg(long, value_delimiter = ',')]
    bin_edges: Vec<f64>,
    /// Skip the oracle; metrics needing it are left empty.
    #[arg(long)]
    no_oracle: bool,
}

#[derive(Args)]
struct ContingencyArgs {
    #[command(flatten)]
    common: InferenceArgs,
    /// One scenario per flag: comma-separated switch ids, or `all`.
    #[arg(long)]
    isolate_switches: Vec<String>,
    /// One scenario per flag: every switch incident to the cell.
    #[arg(long)]
    isolate_cell: Vec<usize>,
}

#[derive(Args)]
struct OracleArgs {
    /// Feeder file.
    #[arg(long)]
    feeder: Option<PathBuf>,
    /// Comma-separated switch ids, or `all`.
    #[arg(long)]
    isolate_switches: Option<String>,
    /// Take every switch incident to this cell out of service.
    #[arg(long)]
    isolate_cell: Option<usize>,
    /// Maximum number of memoized states [default: 20000000].
    #[arg(long)]
    budget: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

const INFERENCE_KEYS: [&str; 8] = ["checkpoint", "feeder", "trials", "mode", "seed", "rtg0", "zero-shot", "out"];

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code().clamp(0, 255) as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    let config = cli.config.as_deref();
    match cli.command {
        Command::GenData(a) => cmd_gen_data(a, config),
        Command::Train(a) => cmd_train(a, config),
        Command::Eval(a) => cmd_eval(a, config),
        Command::Contingency(a) => cmd_contingency(a, config),
        Command::Oracle(a) => cmd_oracle(a, config),
    }
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("GRIDSEQ_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::validation(format!("GRIDSEQ_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::runtime(format!("thread pool: {e}")))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::runtime(format!("cannot create {}: {e}", dir.display())))
}

fn parse_switch_list(spec: &str, graph: &FeederGraph) -> Result<Contingencies, CliError> {
    let set: Contingencies = if spec.trim() == "all" {
        (0..graph.n_switches()).collect()
    } else {
        spec.split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| CliError::usage(format!("bad switch id {s:?} in {spec:?}")))
            })
            .collect::<Result<_, _>>()?
    };
    graph.check_contingencies(&set)?;
    Ok(set)
}

fn isolate_cell(graph: &FeederGraph, cell: usize) -> Result<Contingencies, CliError> {
    if cell >= graph.n_cells() {
        return Err(CliError::validation(format!(
            "unknown cell {cell}; feeder has {} cells",
            graph.n_cells()
        )));
    }
    Ok(graph.isolating_contingencies(cell))
}

fn cmd_gen_data(a: GenDataArgs, config: Option<&Path>) -> Result<(), CliError> {
    let mut s = Settings::load("gen-data", config, &["feeder", "episodes", "seed", "out"])?;
    let feeder_path: PathBuf = s.req("feeder", a.feeder)?;
    let episodes = s.or("episodes", a.episodes, 2000usize)?;
    let seed = s.or("seed", a.seed, 0u64)?;
    let out: PathBuf = s.req("out", a.out)?;
    let graph = load_feeder(&feeder_path)?;
    let mut manifest = RunManifest::new("gen-data", s.resolved);
    manifest.seeds.insert("episodes".into(), seed);
    manifest.feeder_hash = Some(graph.feeder_hash());

    info!("recording {episodes} random walks on {}", graph.name);
    let trajectories = collect_random_walks(&graph, &Contingencies::new(), episodes, seed)?;
    let dataset = Dataset::new(&graph, trajectories);
    create_dir(&out)?;
    save_dataset(out.join("dataset.jsonl"), &dataset)?;
    info!("best episode return {:.3}", dataset.max_return());
    manifest.finish(&out, &["dataset.jsonl".into()])
}

fn cmd_train(a: TrainArgs, config: Option<&Path>) -> Result<(), CliError> {
    let mut s = Settings::load(
        "train",
        config,
        &[
            "dataset",
            "feeder",
            "q",
            "K",
            "steps",
            "batch",
            "seed",
            "out",
            "checkpoint-every",
            "embed-dim",
            "layers",
            "heads",
            "dropout",
            "lr",
            "warmup",
            "weight-decay",
            "clip",
            "guidance-weight",
            "null-slot-prob",
        ],
    )?;
    let d = TrainConfig::default();
    let o = AdamWConfig::default();
    let dataset_path: PathBuf = s.req("dataset", a.dataset)?;
    let feeder_path: PathBuf = s.req("feeder", a.feeder)?;
    let cfg = TrainConfig {
        q: s.or("q", a.q, d.q)?,
        k: s.or("K", a.k, d.k)?,
        steps: s.or("steps", a.steps, d.steps)?,
        batch_size: s.or("batch", a.batch, d.batch_size)?,
        seed: s.or("seed", a.seed, d.seed)?,
        checkpoint_every: s.or("checkpoint-every", a.checkpoint_every, d.checkpoint_every)?,
        embed_dim: s.or("embed-dim", a.embed_dim, d.embed_dim)?,
        n_layers: s.or("layers", a.layers, d.n_layers)?,
        n_heads: s.or("heads", a.heads, d.n_heads)?,
        dropout: s.or("dropout", a.dropout, d.dropout)?,
        guidance_weight: s.or("guidance-weight", a.guidance_weight, d.guidance_weight)?,
        null_slot_prob: s.or("null-slot-prob", a.null_slot_prob, d.null_slot_prob)?,
        optimizer: AdamWConfig {
            lr: s.or("lr", a.lr, o.lr)?,
            warmup_steps: s.or("warmup", a.warmup, o.warmup_steps)?,
            weight_decay: s.or("weight-decay", a.weight_decay, o.weight_decay)?,
            clip_norm: s.or("clip", a.clip, o.clip_norm)?,
            ..o
        },
    };
    let out: PathBuf = s.req("out", a.out)?;
    let graph = load_feeder(&feeder_path)?;
    let dataset = load_dataset(&dataset_path, Some(&graph))?;
    let mut manifest = RunManifest::new("train", s.resolved);
    manifest.seeds.insert("train".into(), cfg.seed);
    manifest.feeder_hash = Some(graph.feeder_hash());
    manifest.dataset_hash = Some(file_hash(&dataset_path)?);

    let data = build_training_set(&dataset.trajectories, graph.n_cells(), cfg.q)?;
    create_dir(&out)?;
    let mut outputs = Vec::new();
    let outcome = {
        let rtg_init = dataset.max_return();
        let outputs = &mut outputs;
        let (graph, out, cfg_ref) = (&graph, &out, &cfg);
        train(&data, graph.n_cells(), graph.n_switches(), &cfg, move |step, model, opt| {
            let name = format!("checkpoint-{step:06}.json");
            save_checkpoint(out.join(&name), &Checkpoint::new(graph, model, Some(opt), Some(cfg_ref), rtg_init))?;
            info!("wrote {name}");
            outputs.push(name);
            Ok(())
        })?
    };
    let ckpt = Checkpoint::new(
        &graph,
        &outcome.model,
        Some(&outcome.optimizer),
        Some(&cfg),
        outcome.rtg_init,
    );
    save_checkpoint(out.join("checkpoint.json"), &ckpt)?;
    outputs.push("checkpoint.json".into());

    let mut csv = String::from("step,total,guidance,action,grad_norm,lr\n");
    for r in &outcome.trace {
        csv += &format!("{},{},{},{},{},{}\n", r.step, r.total, r.guidance, r.action, r.grad_norm, r.lr);
    }
    write_file(&out.join("loss.csv"), csv.as_bytes())?;
    outputs.push("loss.csv".into());
    if let Some(last) = outcome.trace.last() {
        info!(
            "final loss {:.5} (guidance {:.5}, action {:.5})",
            last.total, last.guidance, last.action
        );
    }
    manifest.finish(&out, &outputs)
}

struct Inference {
    graph: FeederGraph,
    ckpt: Checkpoint,
    config: EvalConfig,
    out: PathBuf,
}

fn load_inference(s: &mut Settings, a: InferenceArgs) -> Result<(Inference, RunManifest), CliError> {
    let ckpt_path: PathBuf = s.req("checkpoint", a.checkpoint)?;
    let feeder_path: PathBuf = s.req("feeder", a.feeder)?;
    let d = EvalConfig::default();
    let config = EvalConfig {
        n_trials: s.or("trials", a.trials, d.n_trials)?,
        mode: s.or("mode", a.mode, d.mode)?,
        seed: s.or("seed", a.seed, d.seed)?,
        rtg0: s.opt("rtg0", a.rtg0)?,
    };
    if config.n_trials == 0 {
        return Err(CliError::usage("--trials must be at least 1"));
    }
    let zero_shot = s.flag("zero-shot", a.zero_shot)?;
    let out: PathBuf = s.req("out", a.out)?;
    let graph = load_feeder(&feeder_path)?;
    let ckpt = load_checkpoint(&ckpt_path)?;
    ckpt.check_feeder(&graph, zero_shot)?;
    let manifest = RunManifest {
        feeder_hash: Some(graph.feeder_hash()),
        checkpoint_hash: Some(file_hash(&ckpt_path)?),
        ..RunManifest::new("", s.resolved.clone())
    };
    Ok((
        Inference {
            graph,
            ckpt,
            config,
            out,
        },
        manifest,
    ))
}

fn cmd_eval(a: EvalArgs, config: Option<&Path>) -> Result<(), CliError> {
    let mut keys = INFERENCE_KEYS.to_vec();
    keys.extend(["bins", "bin-edges", "no-oracle"]);
    let mut s = Settings::load("eval", config, &keys)?;
    let bins = s.or("bins", a.bins, 10usize)?;
    let edges = s.list("bin-edges", a.bin_edges)?;
    let no_oracle = s.flag("no-oracle", a.no_oracle)?;
    if bins == 0 {
        return Err(CliError::usage("--bins must be at least 1"));
    }
    if !edges.is_empty() && (edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1]))) {
        return Err(CliError::usage("--bin-edges needs at least two strictly ascending values"));
    }
    let (inf, mut manifest) = load_inference(&mut s, a.common)?;
    manifest.command = "eval".into();
    manifest.config = s.resolved;
    manifest.seeds.insert("trials".into(), inf.config.seed);

    let model = inf.ckpt.to_model()?;
    let cont = Contingencies::new();
    let oracle = if no_oracle { None } else { try_oracle(&inf.graph, &cont) };
    let report = evaluate(
        &model,
        &inf.graph,
        &cont,
        &inf.config,
        oracle.as_ref(),
        inf.ckpt.rtg_init,
    )?;
    info!(
        "APR {:.3} kW, SDPR {:.3}, average return {:.3}, optimal {}/{}",
        report.apr, report.sdpr, report.average_return, report.n_optimal, report.n_trials
    );
    let powers: Vec<f64> = report.trials.iter().map(|t| t.restored_power).collect();
    let edges = if edges.is_empty() {
        let top = report
            .oracle_power
            .unwrap_or_else(|| powers.iter().copied().fold(0.0, f64::max));
        default_edges(top, bins)
    } else {
        edges
    };
    create_dir(&inf.out)?;
    let files = [
        ("report.json", serde_json::to_string_pretty(&report).expect("report serializes")),
        ("report.csv", report.csv()),
        ("actions.csv", report.actions_csv()),
        ("histogram.csv", histogram_csv(&power_histogram(&powers, &edges))),
    ];
    for (name, text) in &files {
        write_file(&inf.out.join(name), text.as_bytes())?;
    }
    let names: Vec<String> = files.iter().map(|(n, _)| n.to_string()).collect();
    manifest.finish(&inf.out, &names)
}

/// Oracle result, or `None` with a warning when the feeder is beyond its reach.
fn try_oracle(graph: &FeederGraph, cont: &Contingencies) -> Option<OracleResult> {
    match gridseq_core::pipeline::oracle_search(graph, cont, graph.horizon) {
        Ok(o) => Some(o),
        Err(e) => {
            warn!("no oracle reference: {e}");
            None
        }
    }
}

fn scenario_name(i: usize, cont: &Contingencies) -> String {
    let ids: Vec<String> = cont.iter().map(|c| c.to_string()).collect();
    if ids.is_empty() {
        format!("s{i}-none")
    } else if ids.len() > 8 {
        format!("s{i}-{}-switches", ids.len())
    } else {
        format!("s{i}-sw{}", ids.join("-"))
    }
}

fn cmd_contingency(a: ContingencyArgs, config: Option<&Path>) -> Result<(), CliError> {
    let mut keys = INFERENCE_KEYS.to_vec();
    keys.extend(["isolate-switches", "isolate-cell"]);
    let mut s = Settings::load("contingency", config, &keys)?;
    let switch_specs = s.list("isolate-switches", a.isolate_switches)?;
    let cells = s.list("isolate-cell", a.isolate_cell)?;
    let (inf, mut manifest) = load_inference(&mut s, a.common)?;
    manifest.command = "contingency".into();
    manifest.config = s.resolved;
    manifest.seeds.insert("trials".into(), inf.config.seed);

    let mut sets = Vec::new();
    for spec in &switch_specs {
        sets.push(parse_switch_list(spec, &inf.graph)?);
    }
    for &c in &cells {
        sets.push(isolate_cell(&inf.graph, c)?);
    }
    if sets.is_empty() {
        sets.push(Contingencies::new());
    }
    let scenarios: Vec<Scenario> = sets
        .into_iter()
        .enumerate()
        .map(|(i, c)| Scenario {
            name: scenario_name(i + 1, &c),
            contingencies: c,
        })
        .collect();
    let model = inf.ckpt.to_model()?;
    let reports = contingency_suite(&model, &inf.graph, &scenarios, &inf.config, inf.ckpt.rtg_init)?;

    create_dir(&inf.out)?;
    let mut names = Vec::new();
    let mut csv = String::from("scenario,Oracle Power,Average Return,Std. Return,APR,SDPR,# Opt. Sols.,violated\n");
    for r in &reports {
        let e = &r.report;
        info!(
            "{}: APR {:.3} kW vs oracle {}, optimal {}/{}",
            r.scenario.name,
            e.apr,
            e.oracle_power.map_or("n/a".into(), |p| format!("{p:.3}")),
            e.n_optimal,
            e.n_trials
        );
        csv += &format!(
            "{},{},{:.3},{:.3},{:.3},{:.3},{},{}\n",
            r.scenario.name,
            e.oracle_power.map_or(String::new(), |p| format!("{p:.3}")),
            e.average_return,
            e.std_return,
            e.apr,
            e.sdpr,
            e.n_optimal,
            e.n_violated
        );
        let dot = format!("{}.dot", r.scenario.name);
        write_file(
            &inf.out.join(&dot),
            solution_dot(&inf.graph, &r.scenario.contingencies, &r.solution).as_bytes(),
        )?;
        names.push(dot);
    }
    write_file(
        &inf.out.join("scenarios.json"),
        serde_json::to_string_pretty(&reports).expect("reports serialize").as_bytes(),
    )?;
    write_file(&inf.out.join("scenarios.csv"), csv.as_bytes())?;
    names.extend(["scenarios.json".to_string(), "scenarios.csv".to_string()]);
    manifest.finish(&inf.out, &names)
}

fn cmd_oracle(a: OracleArgs, config: Option<&Path>) -> Result<(), CliError> {
    let mut s = Settings::load(
        "oracle",
        config,
        &["feeder", "isolate-switches", "isolate-cell", "budget", "out"],
    )?;
    let feeder_path: PathBuf = s.req("feeder", a.feeder)?;
    let switches: Option<String> = s.opt("isolate-switches", a.isolate_switches)?;
    let cell: Option<usize> = s.opt("isolate-cell", a.isolate_cell)?;
    let budget = s.or("budget", a.budget, DEFAULT_STATE_BUDGET)?;
    let out: PathBuf = s.req("out", a.out)?;
    let graph = load_feeder(&feeder_path)?;
    let mut cont = match &switches {
        Some(spec) => parse_switch_list(spec, &graph)?,
        None => Contingencies::new(),
    };
    if let Some(c) = cell {
        cont.extend(isolate_cell(&graph, c)?);
    }
    let mut manifest = RunManifest::new("oracle", s.resolved);
    manifest.feeder_hash = Some(graph.feeder_hash());

    let result = oracle_search_with_budget(&graph, &cont, graph.horizon, budget)?;
    info!(
        "optimal return {:.3}, power {:.3} kW, {} states",
        result.optimal_return, result.optimal_power, result.states_explored
    );
    create_dir(&out)?;
    write_file(
        &out.join("oracle.json"),
        serde_json::to_string_pretty(&result).expect("oracle result serializes").as_bytes(),
    )?;
    manifest.finish(&out, &["oracle.json".into()])
}
