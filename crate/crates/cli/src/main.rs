//! `teamtraj`: generate synthetic team play, train the forecaster, roll it
//! out and score it.
//!
//! Exit codes: 0 success, 2 usage or configuration, 3 numerical failure,
//! 4 incompatible checkpoint or data, 5 I/O.

use anyhow::{anyhow, Context};
use clap::{CommandFactory, Parser, Subcommand};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use teamtraj::data::{
    generate_synthetic, ingest, normalize, split_by_hash, split_by_index, write_csv,
    DatasetManifest, Demonstration, NormalizationSpec, Scenario, SplitAssignment, SyntheticSpec,
};
use teamtraj::kv::KvFile;
use teamtraj::metrics::{evaluate, EvalProtocol, EvalReport};
use teamtraj::model::{velocity_baseline, ModelConfig, PredictionTask, TrainedModel};
use teamtraj::spatial::Aggregation;
use teamtraj::train::train;

#[derive(Parser, Debug)]
#[command(name = "teamtraj", version, about = "Multi-agent trajectory forecasting")]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset (demos.csv and manifest.txt).
    Generate(GenerateArgs),
    /// Train a model and write its checkpoint, loss history and manifest.
    Train(TrainArgs),
    /// Roll a model (or the velocity baseline) forward and dump trajectories.
    Predict(PredictArgs),
    /// Score models and baselines on the test split.
    Evaluate(EvaluateArgs),
    /// Write per-frame attention matrices of one demo.
    DumpAttention(DumpArgs),
}

#[derive(clap::Args, Debug)]
struct GenerateArgs {
    #[arg(long, value_parser = ["leader_follower", "circular_play", "independent_drift"])]
    scenario: String,
    /// Agents per frame.
    #[arg(long, default_value_t = 11)]
    k: usize,
    /// Frames per demo.
    #[arg(long, default_value_t = 50)]
    t: usize,
    /// Number of demos.
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, default_value_t = 5.0)]
    hz: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Scale of all stochastic perturbations.
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    /// Physical extent used to map coordinates back to court units.
    #[arg(long, default_value = "basketball", value_parser = ["basketball", "soccer"])]
    court: String,
    /// Explicit split sizes `TRAIN,VAL` by demo order; the rest is test.
    /// Without it demos are split by id hash.
    #[arg(long, value_name = "TRAIN,VAL")]
    split: Option<String>,
    #[arg(long, env = "TEAMTRAJ_OUT", default_value = "teamtraj-out")]
    out: PathBuf,
}

#[derive(clap::Args, Debug)]
struct DataArgs {
    /// Dataset directory (demos.csv + manifest.txt) or a trajectory CSV.
    #[arg(long)]
    data: PathBuf,
    /// Sample rate for a CSV without manifest.
    #[arg(long, default_value_t = 5.0)]
    hz: f64,
}

#[derive(clap::Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config override, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, env = "TEAMTRAJ_OUT", default_value = "teamtraj-out")]
    out: PathBuf,
}

#[derive(clap::Args, Debug)]
struct PredictArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Checkpoint; omit to use the velocity baseline.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value = "test", value_parser = ["train", "val", "test", "all"])]
    split: String,
    #[arg(long, default_value_t = 30)]
    t_obs: usize,
    #[arg(long, default_value_t = 20)]
    horizon: usize,
    #[arg(long, env = "TEAMTRAJ_OUT", default_value = "teamtraj-out")]
    out: PathBuf,
}

#[derive(clap::Args, Debug)]
struct EvaluateArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Checkpoint to score; repeat for several.
    #[arg(long)]
    model: Vec<PathBuf>,
    /// Rows to report. `velocity` needs no checkpoint; `attention` and
    /// `uniform` pick the given checkpoints of that kind. Defaults to every
    /// checkpoint given.
    #[arg(long, value_parser = ["velocity", "uniform", "attention"])]
    baseline: Vec<String>,
    #[arg(long, default_value = "basketball", value_parser = ["basketball", "soccer"])]
    protocol: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    samples: Option<usize>,
    /// Team label for the CSV rows.
    #[arg(long, default_value = "all")]
    team: String,
    #[arg(long, env = "TEAMTRAJ_OUT", default_value = "teamtraj-out")]
    out: PathBuf,
}

#[derive(clap::Args, Debug)]
struct DumpArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    model: PathBuf,
    /// Demo id; defaults to the first test demo.
    #[arg(long)]
    demo: Option<String>,
    #[arg(long, env = "TEAMTRAJ_OUT", default_value = "teamtraj-out")]
    out: PathBuf,
}

/// Usage problem detected after parsing.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(Usage(msg.into()))
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 2;
    }
    if let Some(e) = err.chain().find_map(|c| c.downcast_ref::<teamtraj::Error>()) {
        return match e {
            teamtraj::Error::Numerical(_) => 3,
            teamtraj::Error::Incompatible(_) => 4,
            teamtraj::Error::Io(_) => 5,
            _ => 2,
        };
    }
    if err.chain().any(|c| c.is::<std::io::Error>()) {
        return 5;
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            eprintln!("\n{}", Cli::command().render_usage());
            return ExitCode::from(2);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::Generate(args) => generate(args),
        Command::Train(args) => run_train(args),
        Command::Predict(args) => predict(args),
        Command::Evaluate(args) => run_evaluate(args),
        Command::DumpAttention(args) => dump_attention(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    let file = File::create(path)
        .map_err(teamtraj::Error::from)
        .with_context(|| format!("cannot write {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn make_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir)
        .map_err(teamtraj::Error::from)
        .with_context(|| format!("cannot create {}", dir.display()))
}

fn normalization_for(court: &str) -> NormalizationSpec {
    match court {
        "soccer" => NormalizationSpec::soccer(),
        _ => NormalizationSpec::basketball(),
    }
}

fn generate(args: GenerateArgs) -> anyhow::Result<()> {
    let scenario: Scenario = args.scenario.parse()?;
    let split_sizes = args.split.as_deref().map(parse_split).transpose()?;
    make_dir(&args.out)?;
    let spec = SyntheticSpec {
        agents: args.k,
        frames: args.t,
        sample_rate_hz: args.hz,
        noise: args.noise,
        ..SyntheticSpec::basketball(scenario, args.n, args.seed)
    };
    let demos = generate_synthetic(&spec)?;
    let mut manifest = DatasetManifest::describe(&demos, true, normalization_for(&args.court));
    if let Some((n_train, n_val)) = split_sizes {
        if n_train + n_val > demos.len() {
            return Err(usage(format!("split {n_train},{n_val} exceeds {} demos", demos.len())));
        }
        manifest = manifest.with_splits(&split_by_index(&demos, n_train, n_val));
    }
    manifest.extra.set("source", "synthetic");
    manifest.extra.set("scenario", scenario.name());
    manifest.extra.set("seed", args.seed);
    manifest.extra.set("noise", args.noise);
    manifest.extra.set("court", &args.court);

    let csv_path = args.out.join("demos.csv");
    let mut out = create(&csv_path)?;
    write_csv(&mut out, &demos)?;
    out.flush().map_err(teamtraj::Error::from)?;
    fs::write(args.out.join("manifest.txt"), manifest.to_kv().render())
        .map_err(teamtraj::Error::from)?;
    println!("wrote {} demos to {}", demos.len(), csv_path.display());
    Ok(())
}

fn parse_split(s: &str) -> anyhow::Result<(usize, usize)> {
    let bad = || usage(format!("--split expects TRAIN,VAL, got `{s}`"));
    let (a, b) = s.split_once(',').ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

/// A dataset loaded into model coordinates.
struct Dataset {
    path: PathBuf,
    demos: Vec<Demonstration>,
    manifest: DatasetManifest,
    split: SplitAssignment,
}

impl Dataset {
    fn name(&self) -> String {
        match self.manifest.extra.get("scenario") {
            Some(s) => s.to_string(),
            None => self
                .path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "data".into()),
        }
    }

    fn subset(&self, which: &str) -> &[Demonstration] {
        match which {
            "train" => &self.split.train,
            "val" => &self.split.val,
            "test" => &self.split.test,
            _ => &self.demos,
        }
    }
}

fn load_dataset(args: &DataArgs) -> anyhow::Result<Dataset> {
    let path = &args.data;
    if !path.exists() {
        return Err(usage(format!("data path {} does not exist", path.display())));
    }
    let (csv_path, manifest_path) = if path.is_dir() {
        (path.join("demos.csv"), path.join("manifest.txt"))
    } else {
        let dir = path.parent().unwrap_or(Path::new("."));
        (path.clone(), dir.join("manifest.txt"))
    };
    if !csv_path.exists() {
        return Err(usage(format!("no trajectory CSV at {}", csv_path.display())));
    }
    let stored = if manifest_path.exists() {
        let text = fs::read_to_string(&manifest_path).map_err(teamtraj::Error::from)?;
        Some(DatasetManifest::from_kv(&KvFile::parse(&text)?)?)
    } else {
        None
    };
    let hz = stored.as_ref().map_or(args.hz, |m| m.sample_rate_hz);
    let report = ingest(&csv_path, hz)
        .with_context(|| format!("reading {}", csv_path.display()))?;
    if report.dropped_frames > 0 {
        log::warn!("dropped {} incomplete frames", report.dropped_frames);
    }
    let manifest = match stored {
        Some(m) => m,
        None => {
            let spec = NormalizationSpec::fit(&report.demos)?;
            DatasetManifest::describe(&report.demos, false, spec)
        }
    };
    let demos = if manifest.normalized {
        report.demos
    } else {
        report
            .demos
            .iter()
            .map(|d| normalize(d, &manifest.normalization))
            .collect::<teamtraj::Result<Vec<_>>>()?
    };
    let split = if manifest.splits.is_some() {
        manifest.split(&demos)
    } else {
        split_by_hash(&demos)
    };
    log::info!(
        "{}: {} demos ({} train, {} val, {} test)",
        csv_path.display(),
        demos.len(),
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    Ok(Dataset {
        path: path.clone(),
        demos,
        manifest,
        split,
    })
}

fn load_model(path: &Path) -> anyhow::Result<TrainedModel> {
    if !path.exists() {
        return Err(usage(format!("checkpoint {} does not exist", path.display())));
    }
    TrainedModel::load(path).with_context(|| format!("loading {}", path.display()))
}

fn check_agents(model: &TrainedModel, data: &Dataset) -> anyhow::Result<()> {
    if model.config.agents != data.manifest.agents {
        return Err(teamtraj::Error::Incompatible(format!(
            "checkpoint expects {} agents, dataset has {}",
            model.config.agents, data.manifest.agents
        ))
        .into());
    }
    Ok(())
}

fn run_train(args: TrainArgs) -> anyhow::Result<()> {
    if let Some(cfg) = &args.config {
        if !cfg.exists() {
            return Err(usage(format!("config {} does not exist", cfg.display())));
        }
    }
    let data = load_dataset(&args.data)?;
    let mut kv = match &args.config {
        Some(p) => KvFile::parse(&fs::read_to_string(p).map_err(teamtraj::Error::from)?)?,
        None => KvFile::new(),
    };
    for o in &args.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{o}`")))?;
        kv.set(k.trim(), v.trim());
    }
    if let Some(seed) = args.seed {
        kv.set("seed", seed);
    }
    let mut config = ModelConfig {
        agents: data.manifest.agents,
        ..ModelConfig::default()
    };
    config.apply_kv(&kv)?;
    if config.agents != data.manifest.agents {
        return Err(teamtraj::Error::Incompatible(format!(
            "config sets {} agents, dataset has {}",
            config.agents, data.manifest.agents
        ))
        .into());
    }
    if data.split.train.is_empty() {
        return Err(usage("training split is empty"));
    }
    make_dir(&args.out)?;

    let outcome = train(&data.split.train, &data.split.val, &config)?;
    let model_path = args.out.join("model.tjf");
    outcome.best.save(&model_path)?;
    let mut hist = create(&args.out.join("loss_history.csv"))?;
    outcome.history.write_csv_with_config(&mut hist, &config)?;
    hist.flush().map_err(teamtraj::Error::from)?;

    let mut echo = KvFile::new();
    echo.set("command", "train");
    echo.set("data", data.path.display());
    if let Some(cfg) = &args.config {
        echo.set("config_file", cfg.display());
    }
    for (k, v) in config.to_kv().iter() {
        echo.set(&format!("config.{k}"), v);
    }
    for (k, v) in data.manifest.to_kv().iter().filter(|(k, _)| !k.starts_with("split.")) {
        echo.set(&format!("data.{k}"), v);
    }
    echo.set("result.epochs_run", outcome.history.records.len());
    echo.set("result.best_epoch", outcome.best_epoch);
    echo.set("result.best_val_loss", outcome.best_val_loss);
    echo.set("result.stopped_early", outcome.stopped_early);
    fs::write(args.out.join("manifest.txt"), echo.render()).map_err(teamtraj::Error::from)?;

    println!(
        "trained {} epochs; best epoch {} with validation loss {:.6}; wrote {}",
        outcome.history.records.len(),
        outcome.best_epoch,
        outcome.best_val_loss,
        model_path.display()
    );
    Ok(())
}

fn predict(args: PredictArgs) -> anyhow::Result<()> {
    let data = load_dataset(&args.data)?;
    let model = args.model.as_deref().map(load_model).transpose()?;
    if let Some(m) = &model {
        check_agents(m, &data)?;
    }
    make_dir(&args.out)?;
    let path = args.out.join("predictions.csv");
    let mut out = create(&path)?;
    writeln!(out, "demo_id,frame,agent_id,x,y").map_err(teamtraj::Error::from)?;
    let demos = data.subset(&args.split);
    for demo in demos {
        let task = PredictionTask::from_demo(demo, args.t_obs, args.horizon)?;
        let task = PredictionTask {
            ground_truth: None,
            ..task
        };
        let frames = match &model {
            Some(m) => m.rollout(&task)?,
            None => velocity_baseline(&task)?,
        };
        for (h, frame) in frames.iter().enumerate() {
            for (k, s) in frame.states.iter().enumerate() {
                writeln!(out, "{},{},{k},{},{}", demo.id, args.t_obs + h, s.x, s.y)
                    .map_err(teamtraj::Error::from)?;
            }
        }
    }
    out.flush().map_err(teamtraj::Error::from)?;
    println!("wrote {} rollouts to {}", demos.len(), path.display());
    Ok(())
}

fn run_evaluate(args: EvaluateArgs) -> anyhow::Result<()> {
    let data = load_dataset(&args.data)?;
    let models = args
        .model
        .iter()
        .map(|p| load_model(p))
        .collect::<anyhow::Result<Vec<_>>>()?;
    for m in &models {
        check_agents(m, &data)?;
    }
    let label = |m: &TrainedModel| m.config.spatial.aggregation.to_string();

    let mut rows: Vec<(String, Option<&TrainedModel>)> = Vec::new();
    if args.baseline.is_empty() {
        if models.is_empty() {
            return Err(usage("give at least one --model or --baseline"));
        }
        rows.extend(models.iter().map(|m| (label(m), Some(m))));
    }
    for kind in &args.baseline {
        if kind == "velocity" {
            rows.push(("velocity".into(), None));
            continue;
        }
        let want: Aggregation = kind.parse()?;
        let picked: Vec<_> = models
            .iter()
            .filter(|m| m.config.spatial.aggregation == want)
            .collect();
        if picked.is_empty() {
            return Err(usage(format!("--baseline {kind} needs a {kind} checkpoint")));
        }
        rows.extend(picked.into_iter().map(|m| (kind.clone(), Some(m))));
    }

    let mut protocol = EvalProtocol::by_name(&args.protocol)?;
    protocol.seed = args.seed;
    protocol.normalization = data.manifest.normalization;
    if let Some(n) = args.samples {
        protocol.samples = n;
    }
    let test = data.subset("test");
    let dataset = data.name();
    let mut csv = vec![EvalReport::CSV_HEADER.to_string()];
    for (name, model) in rows {
        let report = match model {
            Some(m) => evaluate(|t| m.rollout(t), test, &protocol)?,
            None => evaluate(velocity_baseline, test, &protocol)?,
        };
        print!("{}", report.table(&name));
        csv.push(report.csv_row(&name, &args.team, &dataset));
    }
    let text = csv.join("\n") + "\n";
    println!();
    print!("{text}");
    make_dir(&args.out)?;
    fs::write(args.out.join("eval.csv"), text).map_err(teamtraj::Error::from)?;
    Ok(())
}

fn dump_attention(args: DumpArgs) -> anyhow::Result<()> {
    let data = load_dataset(&args.data)?;
    let model = load_model(&args.model)?;
    check_agents(&model, &data)?;
    let demo = match &args.demo {
        Some(id) => data
            .demos
            .iter()
            .find(|d| &d.id == id)
            .ok_or_else(|| usage(format!("no demo with id `{id}`")))?,
        None => data
            .split
            .test
            .first()
            .or(data.demos.first())
            .ok_or_else(|| usage("dataset is empty"))?,
    };
    let maps = model.attention_maps(&demo.frames)?;
    make_dir(&args.out)?;
    let path = args.out.join("attention.csv");
    let mut out = create(&path)?;
    writeln!(out, "demo_id,t,i,j,alpha").map_err(teamtraj::Error::from)?;
    for (t, alpha) in maps.iter().enumerate() {
        for i in 0..alpha.size() {
            for j in 0..alpha.size() {
                writeln!(out, "{},{t},{i},{j},{}", demo.id, alpha.get(i, j))
                    .map_err(teamtraj::Error::from)?;
            }
        }
    }
    out.flush().map_err(teamtraj::Error::from)?;
    println!("wrote {} attention maps to {}", maps.len(), path.display());
    Ok(())
}
