//! Command-line surface tying data generation, training, evaluation,
//! rollout, and ablation together into reproducible runs.
//!
//! Every command writes its primary outputs plus a `<out>.manifest.json`
//! run manifest; primary outputs embed the run id, which is derived from the
//! inputs only, so identical invocations produce byte-identical artifacts.
//!
//! Exit codes: 0 success, 2 usage/input error, 3 numerical failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use pidgeun::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use pidgeun::dataset::{file_sha256, Dataset};
use pidgeun::error::Error as PError;
use pidgeun::eval::{
    ablation_run, evaluate, linear_baseline_fit, rollout, write_ablation_csv, write_metrics_csv,
    write_trace_csv, AblationEntry, ModelPredictor,
};
use pidgeun::graph::{build_adjacency, tune_scaling_k};
use pidgeun::model::{GraphContext, ModelConfig, PidgeunModel};
use pidgeun::sim::{make_dataset, resolve_grid};
use pidgeun::training::{
    loss_history_csv, train_until, EpochRecord, ResumeState, TrainConfig, TrainOutput,
};

#[derive(Parser)]
#[command(name = "pidgeun", version, about = "Microgrid transient dynamics prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic transient dataset from a grid specification.
    GenData(GenDataArgs),
    /// Train a model on a dataset, writing a checkpoint and a loss CSV.
    Train(TrainArgs),
    /// Evaluate a checkpoint: one-step RMSE and cumulative rollout errors.
    Eval(EvalArgs),
    /// Roll out one trajectory closed-loop and dump a per-bus trace CSV.
    Rollout(RolloutArgs),
    /// Train and evaluate a list of configurations, one table row each.
    Ablate(AblateArgs),
    /// Print a summary of a dataset or checkpoint file.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Grid spec: a JSON path or a preset name (desk9, grid33).
    #[arg(long)]
    grid: String,
    /// Number of complete transient responses.
    #[arg(long, default_value_t = 12)]
    complete: usize,
    /// Number of load events in the recurring-disturbance response
    /// (0 disables it).
    #[arg(long, default_value_t = 200)]
    initial_events: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Force single-threaded generation (outputs are identical either way).
    #[arg(long)]
    serial: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Model config: a JSON path or "nominal".
    #[arg(long, default_value = "nominal")]
    model_config: String,
    /// Training config JSON path; omit for defaults.
    #[arg(long)]
    train_config: Option<PathBuf>,
    /// Override the config's epoch count.
    #[arg(long)]
    epochs: Option<usize>,
    /// Override the physics-loss weight (0 disables the PI term).
    #[arg(long)]
    nu: Option<f64>,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Write an intermediate (resumable) checkpoint every this many epochs.
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Resume from the checkpoint at --out if one exists.
    #[arg(long)]
    resume: bool,
    /// Strict serial mode (training is already serial; kept for parity).
    #[arg(long)]
    serial: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Comma-separated rollout horizons.
    #[arg(long, default_value = "200,700")]
    horizons: String,
    /// Evaluate trajectories with index ≥ this (the held-out tail).
    #[arg(long)]
    eval_from: Option<usize>,
    /// Explicit comma-separated trajectory indices (overrides --eval-from).
    #[arg(long)]
    trajectories: Option<String>,
    /// Also fit and evaluate the ridge linear baseline on the first
    /// `baseline-train-count` trajectories.
    #[arg(long)]
    with_baseline: bool,
    #[arg(long)]
    baseline_train_count: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    serial: bool,
}

#[derive(Args)]
struct RolloutArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    trajectory: usize,
    #[arg(long, default_value_t = 700)]
    horizon: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Ablation grid JSON: base train config, eval split, horizons, entries.
    #[arg(long)]
    grid_file: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    serial: bool,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    path: PathBuf,
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    args: Vec<String>,
    config_hash: String,
    dataset_hash: String,
    seed: u64,
    version: String,
    run_id: String,
    outputs: Vec<String>,
    wall_clock_s: f64,
}

fn run_id_from(parts: &[&str]) -> String {
    let mut hasher = Sha256::new();
    for p in parts {
        hasher.update(p.as_bytes());
        hasher.update([0u8]);
    }
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn sha256_str(s: &str) -> String {
    run_id_from(&[s])
}

fn write_manifest(
    out_path: &Path,
    command: &str,
    args: Vec<String>,
    config_hash: String,
    dataset_hash: String,
    seed: u64,
    run_id: String,
    outputs: Vec<String>,
    started: Instant,
) -> Result<(), PError> {
    let manifest = RunManifest {
        command: command.to_string(),
        args,
        config_hash,
        dataset_hash,
        seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        run_id,
        outputs,
        wall_clock_s: started.elapsed().as_secs_f64(),
    };
    let path = out_path.with_extension(format!(
        "{}manifest.json",
        out_path
            .extension()
            .map(|e| format!("{}.", e.to_string_lossy()))
            .unwrap_or_default()
    ));
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

fn graph_context_for(dataset: &Dataset) -> Result<GraphContext, PError> {
    let spec = dataset.grid_spec()?;
    let k = tune_scaling_k(&spec.graph);
    let adj = build_adjacency(&spec.graph, k)?;
    GraphContext::new(&spec.graph, adj)
}

fn parse_usize_list(text: &str) -> Result<Vec<usize>, PError> {
    text.split(',')
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|e| PError::argument(format!("bad list entry {s}: {e}")))
        })
        .collect()
}

fn load_model_config(arg: &str) -> Result<ModelConfig, PError> {
    if arg == "nominal" {
        return Ok(ModelConfig::nominal());
    }
    let text = fs::read_to_string(arg)
        .map_err(|e| PError::argument(format!("cannot read model config {arg}: {e}")))?;
    let config: ModelConfig = serde_json::from_str(&text)?;
    config.validate()?;
    Ok(config)
}

fn default_train_config() -> TrainConfig {
    TrainConfig {
        epochs: 500,
        lr_start: 1e-3,
        lr_end: 1e-7,
        nu: 1.0,
        seed: 7,
        batch: 1,
        window_steps: 50,
        train_count: None,
        windows_per_trajectory: 1,
    }
}

fn cmd_gen_data(args: &GenDataArgs) -> Result<(), PError> {
    let started = Instant::now();
    let spec = resolve_grid(&args.grid)?;
    let grid_text = serde_json::to_string(&spec.to_json())?;
    let run_id = run_id_from(&[
        "gen-data",
        &grid_text,
        &args.complete.to_string(),
        &args.initial_events.to_string(),
        &args.seed.to_string(),
    ]);

    let mut dataset = make_dataset(
        &spec,
        args.complete,
        args.initial_events,
        args.seed,
        !args.serial,
    )?;
    dataset.run_id = run_id.clone();
    dataset.save(&args.out)?;

    // The resolved grid goes next to the dataset for reproducibility.
    let grid_path = args.out.with_extension("grid.json");
    fs::write(&grid_path, &grid_text)?;

    write_manifest(
        &args.out,
        "gen-data",
        vec![
            format!("--grid={}", args.grid),
            format!("--complete={}", args.complete),
            format!("--initial-events={}", args.initial_events),
            format!("--seed={}", args.seed),
        ],
        sha256_str(&grid_text),
        file_sha256(&args.out)?,
        args.seed,
        run_id,
        vec![
            args.out.display().to_string(),
            grid_path.display().to_string(),
        ],
        started,
    )?;
    println!(
        "wrote {} ({} trajectories, {} buses)",
        args.out.display(),
        dataset.records.len(),
        dataset.n_buses
    );
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<(), PError> {
    let started = Instant::now();
    let dataset = Dataset::load(&args.dataset)?;
    let dataset_hash = file_sha256(&args.dataset)?;
    let model_config = load_model_config(&args.model_config)?;

    let mut train_config = match &args.train_config {
        Some(path) => {
            let text = fs::read_to_string(path)?;
            serde_json::from_str::<TrainConfig>(&text)?
        }
        None => default_train_config(),
    };
    if let Some(e) = args.epochs {
        train_config.epochs = e;
    }
    if let Some(nu) = args.nu {
        train_config.nu = nu;
    }
    if let Some(seed) = args.seed {
        train_config.seed = seed;
    }
    train_config.validate()?;

    let config_text = format!(
        "{}|{}",
        serde_json::to_string(&model_config)?,
        serde_json::to_string(&train_config)?
    );
    let run_id = run_id_from(&["train", &dataset_hash, &config_text]);

    let ctx = graph_context_for(&dataset)?;

    let (mut model, mut resume) = if args.resume && args.out.exists() {
        let ck = load_checkpoint(&args.out)?;
        if ck.model.config != model_config {
            return Err(PError::argument(
                "checkpoint config does not match the requested model config",
            ));
        }
        let adam = ck
            .adam
            .ok_or_else(|| PError::argument("checkpoint is not resumable (no optimizer state)"))?;
        let normalizer = ck
            .normalizer
            .clone()
            .ok_or_else(|| PError::argument("checkpoint has no normalizer"))?;
        let start_epoch = ck.next_epoch.unwrap_or(0);
        println!("resuming from epoch {start_epoch}");
        (
            ck.model,
            Some(ResumeState {
                adam,
                start_epoch,
                normalizer,
            }),
        )
    } else {
        (
            PidgeunModel::new(model_config.clone(), train_config.seed)?,
            None,
        )
    };

    let mut history: Vec<EpochRecord> = Vec::new();
    let next_stop = |from: usize| -> usize {
        match args.checkpoint_every {
            Some(every) if every > 0 => (from + every).min(train_config.epochs),
            _ => train_config.epochs,
        }
    };

    let mut epoch_cursor = resume.as_ref().map(|r| r.start_epoch).unwrap_or(0);
    loop {
        let stop = next_stop(epoch_cursor);
        let out: TrainOutput = train_until(
            &mut model,
            &dataset,
            &ctx,
            &train_config,
            resume.take(),
            Some(stop),
        )?;
        history.extend(out.history.iter().copied());
        epoch_cursor = out.next_epoch;
        save_checkpoint(
            &args.out,
            &model,
            train_config.seed,
            Some(&out.normalizer),
            Some(&out.adam),
            Some(out.next_epoch),
            &run_id,
        )?;
        if epoch_cursor >= train_config.epochs {
            break;
        }
        resume = Some(ResumeState {
            adam: out.adam,
            start_epoch: out.next_epoch,
            normalizer: out.normalizer,
        });
    }

    let loss_path = args.out.with_extension("loss.csv");
    let mut csv = format!("# run: {run_id}\n");
    csv.push_str(&loss_history_csv(&history));
    fs::write(&loss_path, csv)?;

    write_manifest(
        &args.out,
        "train",
        vec![
            format!("--dataset={}", args.dataset.display()),
            format!("--model-config={}", args.model_config),
            format!("--nu={}", train_config.nu),
            format!("--epochs={}", train_config.epochs),
            format!("--seed={}", train_config.seed),
        ],
        sha256_str(&config_text),
        dataset_hash,
        train_config.seed,
        run_id,
        vec![
            args.out.display().to_string(),
            loss_path.display().to_string(),
        ],
        started,
    )?;
    if let Some(last) = history.last() {
        println!(
            "trained {} epochs: l1 {:.6e}, l2 {:.6e}",
            history.len(),
            last.l1,
            last.l2
        );
    }
    Ok(())
}

fn eval_indices(args: &EvalArgs, dataset: &Dataset) -> Result<Vec<usize>, PError> {
    if let Some(list) = &args.trajectories {
        return parse_usize_list(list);
    }
    let from = args.eval_from.unwrap_or(0);
    Ok((from..dataset.records.len()).collect())
}

fn cmd_eval(args: &EvalArgs) -> Result<(), PError> {
    let started = Instant::now();
    let ck: Checkpoint = load_checkpoint(&args.checkpoint)?;
    let dataset = Dataset::load(&args.dataset)?;
    let dataset_hash = file_sha256(&args.dataset)?;
    let normalizer = ck
        .normalizer
        .as_ref()
        .ok_or_else(|| PError::argument("checkpoint has no normalizer; cannot evaluate"))?;
    let ctx = graph_context_for(&dataset)?;
    let horizons = parse_usize_list(&args.horizons)?;
    let indices = eval_indices(args, &dataset)?;

    let run_id = run_id_from(&[
        "eval",
        &file_sha256(&args.checkpoint)?,
        &dataset_hash,
        &args.horizons,
        &format!("{indices:?}"),
    ]);

    let predictor = ModelPredictor {
        model: &ck.model,
        ctx: &ctx,
        normalizer,
    };
    let report = evaluate(
        &predictor,
        &dataset,
        &indices,
        &horizons,
        normalizer,
        !args.serial,
    )?;

    let mut buf = Vec::new();
    buf.extend_from_slice(format!("# run: {run_id}\n").as_bytes());
    write_metrics_csv(&report, &mut buf)?;

    if args.with_baseline {
        let count = args.baseline_train_count.ok_or_else(|| {
            PError::argument("--with-baseline needs --baseline-train-count")
        })?;
        let train_idx: Vec<usize> = (0..count.min(dataset.records.len())).collect();
        let c = ck.model.config.input_steps;
        let baseline = linear_baseline_fit(&dataset, &train_idx, c)?;
        let baseline_report = evaluate(
            &baseline,
            &dataset,
            &indices,
            &horizons,
            baseline.normalizer(),
            !args.serial,
        )?;
        buf.extend_from_slice(b"# linear baseline\n");
        write_metrics_csv(&baseline_report, &mut buf)?;
    }
    fs::write(&args.out, &buf)?;

    write_manifest(
        &args.out,
        "eval",
        vec![
            format!("--checkpoint={}", args.checkpoint.display()),
            format!("--dataset={}", args.dataset.display()),
            format!("--horizons={}", args.horizons),
        ],
        String::new(),
        dataset_hash,
        ck.seed,
        run_id,
        vec![args.out.display().to_string()],
        started,
    )?;
    println!("one-step RMSE {:.6e}", report.one_step_rmse);
    for h in &report.horizons {
        println!(
            "C-RMSE {} = {:.6e}{}",
            h.horizon,
            h.c_rmse,
            if h.diverged { " (diverged)" } else { "" }
        );
    }
    Ok(())
}

fn cmd_rollout(args: &RolloutArgs) -> Result<(), PError> {
    let started = Instant::now();
    let ck = load_checkpoint(&args.checkpoint)?;
    let dataset = Dataset::load(&args.dataset)?;
    let normalizer = ck
        .normalizer
        .as_ref()
        .ok_or_else(|| PError::argument("checkpoint has no normalizer; cannot roll out"))?;
    let ctx = graph_context_for(&dataset)?;
    let rec = dataset
        .records
        .get(args.trajectory)
        .ok_or_else(|| PError::argument(format!("no trajectory {}", args.trajectory)))?;

    let run_id = run_id_from(&[
        "rollout",
        &file_sha256(&args.checkpoint)?,
        &file_sha256(&args.dataset)?,
        &args.trajectory.to_string(),
        &args.horizon.to_string(),
    ]);

    let predictor = ModelPredictor {
        model: &ck.model,
        ctx: &ctx,
        normalizer,
    };
    let roll = rollout(&predictor, rec, &rec.schedule, args.horizon, dataset.dt)?;

    let mut buf = Vec::new();
    buf.extend_from_slice(format!("# run: {run_id}\n").as_bytes());
    write_trace_csv(&roll, rec, &mut buf)?;
    fs::write(&args.out, &buf)?;

    write_manifest(
        &args.out,
        "rollout",
        vec![
            format!("--trajectory={}", args.trajectory),
            format!("--horizon={}", args.horizon),
        ],
        String::new(),
        file_sha256(&args.dataset)?,
        ck.seed,
        run_id,
        vec![args.out.display().to_string()],
        started,
    )?;
    match roll.diverged_at {
        Some(at) => println!("rollout diverged at step {at}"),
        None => println!("rollout completed {} steps", roll.predicted.len()),
    }
    Ok(())
}

#[derive(serde::Deserialize)]
struct AblationGridFile {
    base_train: TrainConfig,
    #[serde(default)]
    eval_from: usize,
    horizons: Vec<usize>,
    entries: Vec<AblationEntryFile>,
}

#[derive(serde::Deserialize)]
struct AblationEntryFile {
    label: String,
    model: ModelConfig,
    #[serde(default = "one")]
    nu: f64,
}

fn one() -> f64 {
    1.0
}

fn cmd_ablate(args: &AblateArgs) -> Result<(), PError> {
    let started = Instant::now();
    let dataset = Dataset::load(&args.dataset)?;
    let dataset_hash = file_sha256(&args.dataset)?;
    let grid_text = fs::read_to_string(&args.grid_file)?;
    let grid: AblationGridFile = serde_json::from_str(&grid_text)?;
    let ctx = graph_context_for(&dataset)?;

    let entries: Vec<AblationEntry> = grid
        .entries
        .iter()
        .map(|e| AblationEntry {
            label: e.label.clone(),
            model: e.model.clone(),
            nu: e.nu,
        })
        .collect();
    let eval_idx: Vec<usize> = (grid.eval_from..dataset.records.len()).collect();

    let run_id = run_id_from(&["ablate", &dataset_hash, &grid_text]);
    let rows = ablation_run(
        &entries,
        &dataset,
        &ctx,
        &grid.base_train,
        &eval_idx,
        &grid.horizons,
    )?;

    let mut buf = Vec::new();
    buf.extend_from_slice(format!("# run: {run_id}\n").as_bytes());
    write_ablation_csv(&rows, &mut buf)?;
    fs::write(&args.out, &buf)?;

    write_manifest(
        &args.out,
        "ablate",
        vec![format!("--grid-file={}", args.grid_file.display())],
        sha256_str(&grid_text),
        dataset_hash,
        grid.base_train.seed,
        run_id,
        vec![args.out.display().to_string()],
        started,
    )?;
    println!("ablation table with {} rows written", rows.len());
    Ok(())
}

fn cmd_inspect(args: &InspectArgs) -> Result<(), PError> {
    let mut magic = [0u8; 8];
    {
        use std::io::Read;
        let mut f = fs::File::open(&args.path)?;
        f.read_exact(&mut magic)?;
    }
    match &magic {
        b"PGDS0001" => {
            let ds = Dataset::load(&args.path)?;
            println!("dataset {}", args.path.display());
            println!("  grid hash: {}", ds.grid_hash);
            println!("  dt: {} s, buses: {}", ds.dt, ds.n_buses);
            println!("  run: {}", if ds.run_id.is_empty() { "-" } else { &ds.run_id });
            println!("  trajectories: {}", ds.records.len());
            for (i, r) in ds.records.iter().enumerate() {
                println!(
                    "    [{i}] {:?}, {} steps, {} events",
                    r.kind,
                    r.n_steps(),
                    r.schedule.events.len()
                );
            }
        }
        b"PGCK0001" => {
            let ck = load_checkpoint(&args.path)?;
            println!("checkpoint {}", args.path.display());
            println!("  run: {}", if ck.run_id.is_empty() { "-" } else { &ck.run_id });
            let c = &ck.model.config;
            println!(
                "  config: N_M={} N_A={} N_C={} K={} D={} C={} heads={}",
                c.n_mlp_layers,
                c.n_gal,
                c.n_gcl,
                c.cheb_order,
                c.hidden_size,
                c.input_steps,
                c.attention_heads
            );
            println!("  parameters: {}", ck.model.parameter_count());
            println!(
                "  effective MP steps: {}",
                pidgeun::model::effective_mp_steps(c)
            );
            match ck.next_epoch {
                Some(e) => println!("  resumable at epoch {e}"),
                None => println!("  inference-only (no optimizer state)"),
            }
        }
        _ => {
            return Err(PError::format(format!(
                "{} is neither a dataset nor a checkpoint",
                args.path.display()
            )))
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Rollout(args) => cmd_rollout(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Inspect(args) => cmd_inspect(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        let code = match e {
            PError::Numerical(_) => 3,
            _ => 2,
        };
        std::process::exit(code);
    }
}
