use std::fs;
use std::io::Write;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use workbench::action::{denormalize, ActionSequence, CommandKind, CommandVocabulary, Dataset};
use workbench::analysis::{pca, separation_score, trajectory_rmse, write_projections, write_rmse_report, write_variance};
use workbench::bus::{BusFrame, SimBus};
use workbench::corpus;
use workbench::ik::{solve_named, IkConfig, IkObjective};
use workbench::mtrnn::{network_for, train_with_progress, ContextSource, MtrnnConfig, MtrnnNetwork, Optimizer, TrainConfig};
use workbench::recorder::{
    annotate, endeffector_record, kinesthetic_record, EndEffectorConfig, PuppetScript, RecordingConfig,
    ScriptedPuppet, TimedCommand, TimedTarget,
};
use workbench::robot::{default_model, RobotModel};
use workbench::service::{Server, ServiceConfig};

type CliResult<T = ()> = Result<T, String>;

#[derive(Parser)]
#[command(name = "workbench", version, about = "Record, train and replay expressive robot actions")]
struct Cli {
    /// Robot model file (TOML); the built-in model when omitted.
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// Command vocabulary file (JSON); the built-in vocabulary when omitted.
    #[arg(long, global = true)]
    vocabulary: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 7878)]
    port: u16,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[arg(long = "rate-hz", global = true, default_value_t = 50.0)]
    rate_hz: f64,
    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Capture a demonstration into an action file.
    Record(RecordArgs),
    /// Merge timed facial/audio cues into an action file.
    Annotate(AnnotateArgs),
    /// Encode action files into a training dataset.
    Normalize(NormalizeArgs),
    /// Train a policy network on a dataset.
    Train(TrainArgs),
    /// Generate an action closed-loop from a trained network.
    Generate(GenerateArgs),
    /// Play an action on the simulated bus and log joint states and cues.
    Replay(ReplayArgs),
    /// Write PCA and trajectory-error reports for a trained network.
    Analyze(AnalyzeArgs),
    /// Solve inverse kinematics for one chain.
    IkSolve(IkArgs),
    /// Run the JSON message endpoint.
    Serve(ServeArgs),
}

#[derive(Args)]
struct RecordArgs {
    /// Scripted puppet file (JSON) for kinesthetic recording.
    #[arg(long, conflicts_with_all = ["corpus", "targets"])]
    puppet: Option<PathBuf>,
    /// Built-in demonstration name, or `all` to write every one into the `--out` directory.
    #[arg(long, conflicts_with = "targets")]
    corpus: Option<String>,
    /// End-effector targets (JSON list of {time, position, orientation?}).
    #[arg(long)]
    targets: Option<PathBuf>,
    /// Chain driven by `--targets`.
    #[arg(long, default_value = "arm_right")]
    chain: String,
    #[arg(long)]
    name: Option<String>,
    /// Seconds; required with `--puppet` and `--targets`.
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AnnotateArgs {
    #[arg(long)]
    action: PathBuf,
    /// JSON list of {time, kind, command}.
    #[arg(long)]
    events: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct NormalizeArgs {
    /// Action files, or directories whose `*.json` files are taken in name order.
    #[arg(long, required = true, num_args = 1..)]
    actions: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Momentum,
    Adam,
    Amsgrad,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 20_000)]
    epochs: usize,
    #[arg(long = "learning-rate")]
    learning_rate: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Momentum)]
    optimizer: OptimizerArg,
    #[arg(long = "clip-norm")]
    clip_norm: Option<f64>,
    /// Share of the network's own previous output mixed into the input while training.
    #[arg(long, default_value_t = 0.0)]
    feedback: f64,
    /// Start output neurons at the first frame's posture instead of at rest.
    #[arg(long = "posture-init")]
    posture_init: bool,
    #[arg(long = "report-interval", default_value_t = 100)]
    report_interval: usize,
    #[arg(long = "cf", default_value_t = 60)]
    n_cf: usize,
    #[arg(long = "cs", default_value_t = 20)]
    n_cs: usize,
    #[arg(long)]
    out: PathBuf,
    /// Loss curve destination (`epoch,loss` rows); next to the checkpoint by default.
    #[arg(long = "loss-curve")]
    loss_curve: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    net: PathBuf,
    /// Trained sequence index or name.
    #[arg(long)]
    sequence: String,
    /// Frames to produce; the trained sequence length by default.
    #[arg(long)]
    length: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReplayArgs {
    action: PathBuf,
    /// Where to write the log; stdout by default.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Also write the raw bus traffic as hex lines.
    #[arg(long = "bus-log")]
    bus_log: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    net: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long = "out-dir")]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 2)]
    components: usize,
}

#[derive(Args)]
struct IkArgs {
    #[arg(long, default_value = "arm_right")]
    chain: String,
    /// Tip position `x,y,z` in metres.
    #[arg(long, value_parser = parse_vec3)]
    target: [f64; 3],
    /// Tip orientation `w,x,y,z`.
    #[arg(long, value_parser = parse_quat)]
    orientation: Option<[f64; 4]>,
    #[arg(long = "orientation-weight", default_value_t = 0.1)]
    orientation_weight: f64,
    #[arg(long, default_value_t = 100)]
    generations: usize,
    #[arg(long, default_value_t = 64)]
    population: usize,
}

#[derive(Args)]
struct ServeArgs {
    /// Directory of action files to preload; new recordings are saved here too.
    #[arg(long)]
    actions: Option<PathBuf>,
    /// Checkpoint available to `generate` at startup.
    #[arg(long)]
    net: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
}

fn parse_floats<const N: usize>(s: &str) -> Result<[f64; N], String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    parts.try_into().map_err(|v: Vec<f64>| format!("expected {N} comma-separated numbers, got {}", v.len()))
}

fn parse_vec3(s: &str) -> Result<[f64; 3], String> {
    parse_floats::<3>(s)
}

fn parse_quat(s: &str) -> Result<[f64; 4], String> {
    parse_floats::<4>(s)
}

struct Context {
    model: RobotModel,
    vocab: CommandVocabulary,
    seed: u64,
    rate_hz: f64,
    port: u16,
}

fn at(path: &Path, e: impl std::fmt::Display) -> String {
    format!("{}: {e}", path.display())
}

fn ensure_parent(path: &Path) -> CliResult {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| at(dir, e)),
        _ => Ok(()),
    }
}

fn write_text(path: &Path, text: &str) -> CliResult {
    ensure_parent(path)?;
    fs::write(path, text).map_err(|e| at(path, e))
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| at(path, e))?;
    serde_json::from_str(&text).map_err(|e| at(path, e))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> CliResult {
    let model = match &cli.model {
        Some(p) => RobotModel::load(p).map_err(|e| format!("--model {}: {e}", p.display()))?,
        None => default_model(),
    };
    let vocab = match &cli.vocabulary {
        Some(p) => CommandVocabulary::load(p).map_err(|e| format!("--vocabulary {}: {e}", p.display()))?,
        None => CommandVocabulary::default(),
    };
    if !(cli.rate_hz > 0.0 && cli.rate_hz.is_finite()) {
        return Err(format!("--rate-hz must be positive, got {}", cli.rate_hz));
    }
    let ctx = Context {
        model,
        vocab,
        seed: cli.seed,
        rate_hz: cli.rate_hz,
        port: cli.port,
    };
    match cli.command {
        Command::Record(a) => record(&ctx, a),
        Command::Annotate(a) => annotate_cmd(&ctx, a),
        Command::Normalize(a) => normalize_cmd(&ctx, a),
        Command::Train(a) => train(&ctx, a),
        Command::Generate(a) => generate(&ctx, a),
        Command::Replay(a) => replay(&ctx, a),
        Command::Analyze(a) => analyze(a),
        Command::IkSolve(a) => ik_solve(&ctx, a),
        Command::Serve(a) => serve(&ctx, a),
    }
}

fn record(ctx: &Context, a: RecordArgs) -> CliResult {
    if let Some(which) = &a.corpus {
        let all = corpus::actions();
        let chosen: Vec<_> = if which == "all" {
            all
        } else {
            let found = all.into_iter().find(|c| c.name == which.as_str());
            vec![found.ok_or_else(|| format!("--corpus: unknown demonstration `{which}`"))?]
        };
        if which == "all" {
            fs::create_dir_all(&a.out).map_err(|e| at(&a.out, e))?;
        }
        for c in chosen {
            let mut bus = SimBus::new(&ctx.model);
            bus.set_logging(false);
            let mut puppet = ScriptedPuppet::new(&ctx.model, &c.script).map_err(|e| e.to_string())?;
            let cfg = RecordingConfig {
                rate_hz: ctx.rate_hz,
                ..RecordingConfig::new(a.name.clone().unwrap_or_else(|| c.name.to_string()), c.duration)
            };
            let seq = kinesthetic_record(&mut bus, &ctx.model, &mut puppet, &cfg).map_err(|e| e.to_string())?;
            let seq = annotate(&seq, &c.cues, &ctx.vocab).map_err(|e| e.to_string())?;
            let path = if which == "all" { a.out.join(format!("{}.json", c.name)) } else { a.out.clone() };
            ensure_parent(&path)?;
            seq.save(&path).map_err(|e| e.to_string())?;
            info!("{}: {} frames", path.display(), seq.len());
        }
        return Ok(());
    }

    let duration = a.duration.ok_or("--duration is required with --puppet or --targets")?;
    let name = a.name.clone().unwrap_or_else(|| {
        a.out
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "action".into())
    });
    let seq = if let Some(p) = &a.puppet {
        let script = PuppetScript::load(p).map_err(|e| e.to_string())?;
        let mut puppet = ScriptedPuppet::new(&ctx.model, &script).map_err(|e| at(p, e))?;
        let mut bus = SimBus::new(&ctx.model);
        bus.set_logging(false);
        let cfg = RecordingConfig {
            rate_hz: ctx.rate_hz,
            ..RecordingConfig::new(name, duration)
        };
        kinesthetic_record(&mut bus, &ctx.model, &mut puppet, &cfg).map_err(|e| e.to_string())?
    } else if let Some(t) = &a.targets {
        let targets: Vec<TimedTarget> = load_json(t)?;
        let ik = IkConfig {
            seed: ctx.seed,
            ..IkConfig::default()
        };
        let cfg = EndEffectorConfig {
            rate_hz: ctx.rate_hz,
            duration,
            ..EndEffectorConfig::default()
        };
        endeffector_record(&ctx.model, &a.chain, &targets, &ik, &cfg, name).map_err(|e| at(t, e))?
    } else {
        return Err("record needs one of --puppet, --corpus or --targets".into());
    };
    ensure_parent(&a.out)?;
    seq.save(&a.out).map_err(|e| e.to_string())
}

fn annotate_cmd(ctx: &Context, a: AnnotateArgs) -> CliResult {
    let seq = ActionSequence::load(&a.action).map_err(|e| at(&a.action, e))?;
    let events: Vec<TimedCommand> = load_json(&a.events)?;
    let out = annotate(&seq, &events, &ctx.vocab).map_err(|e| at(&a.events, e))?;
    ensure_parent(&a.out)?;
    out.save(&a.out).map_err(|e| e.to_string())
}

fn action_files(inputs: &[PathBuf]) -> CliResult<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| at(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "json"))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    Ok(files)
}

fn normalize_cmd(ctx: &Context, a: NormalizeArgs) -> CliResult {
    let files = action_files(&a.actions)?;
    if files.is_empty() {
        return Err("--actions: no action files found".into());
    }
    let mut seqs = Vec::with_capacity(files.len());
    for f in &files {
        let seq = ActionSequence::load(f).map_err(|e| at(f, e))?;
        seq.validate(&ctx.model, &ctx.vocab).map_err(|e| at(f, e))?;
        seqs.push(seq);
    }
    let dataset = Dataset::from_actions(&seqs, &ctx.model, &ctx.vocab).map_err(|e| e.to_string())?;
    ensure_parent(&a.out)?;
    dataset.save(&a.out).map_err(|e| e.to_string())
}

fn train(ctx: &Context, a: TrainArgs) -> CliResult {
    let dataset = Dataset::load(&a.dataset).map_err(|e| at(&a.dataset, e))?;
    let defaults = TrainConfig::default();
    let cfg = TrainConfig {
        epochs: a.epochs,
        learning_rate: a.learning_rate.unwrap_or(defaults.learning_rate),
        momentum: a.momentum.unwrap_or(defaults.momentum),
        clip_norm: a.clip_norm.unwrap_or(defaults.clip_norm),
        seed: ctx.seed,
        report_interval: a.report_interval,
        feedback: a.feedback,
        optimizer: match a.optimizer {
            OptimizerArg::Momentum => Optimizer::Momentum,
            OptimizerArg::Adam => Optimizer::adam(),
            OptimizerArg::Amsgrad => Optimizer::amsgrad(),
        },
        ..defaults
    };
    let config = MtrnnConfig {
        n_cf: a.n_cf,
        n_cs: a.n_cs,
        posture_init: a.posture_init,
        ..MtrnnConfig::with_io(dataset.dim())
    };
    let mut net = network_for(&dataset, Some(config), &cfg).map_err(|e| e.to_string())?;
    let interval = a.report_interval.max(1);
    let curve = train_with_progress(&mut net, &dataset, &cfg, |epoch, loss| {
        if epoch % interval == 0 {
            info!("epoch {epoch} loss {loss:.6e}");
        }
        ControlFlow::Continue(())
    })
    .map_err(|e| e.to_string())?;
    ensure_parent(&a.out)?;
    net.save(&a.out).map_err(|e| e.to_string())?;
    let curve_path = a.loss_curve.unwrap_or_else(|| a.out.with_extension("loss.csv"));
    let mut text = String::from("epoch,loss\n");
    for p in &curve {
        text.push_str(&format!("{},{}\n", p.epoch, p.loss));
    }
    write_text(&curve_path, &text)
}

fn load_net(path: &Path) -> CliResult<MtrnnNetwork> {
    MtrnnNetwork::load(path).map_err(|e| e.to_string())
}

fn sequence_index(net: &MtrnnNetwork, which: &str) -> CliResult<usize> {
    let infos = &net.metadata.sequences;
    let index = match which.parse::<usize>() {
        Ok(i) => i,
        Err(_) => infos
            .iter()
            .position(|s| s.name == which)
            .ok_or_else(|| format!("--sequence: unknown sequence `{which}`"))?,
    };
    if index >= infos.len() {
        return Err(format!("--sequence: unknown sequence id {index} (network knows {})", infos.len()));
    }
    Ok(index)
}

fn generate(ctx: &Context, a: GenerateArgs) -> CliResult {
    let net = load_net(&a.net)?;
    let index = sequence_index(&net, &a.sequence)?;
    let info = &net.metadata.sequences[index];
    let generated = net
        .generate_sequence(
            &ContextSource::Sequence(index),
            &info.initial_posture,
            a.length.unwrap_or(info.length),
            info.name.clone(),
            info.rate_hz,
        )
        .map_err(|e| e.to_string())?;
    let vocab = net.metadata.vocabulary.as_ref().unwrap_or(&ctx.vocab);
    let action = denormalize(&generated, &ctx.model, vocab).map_err(|e| e.to_string())?;
    ensure_parent(&a.out)?;
    action.save(&a.out).map_err(|e| e.to_string())
}

fn replay(ctx: &Context, a: ReplayArgs) -> CliResult {
    let seq = ActionSequence::load(&a.action).map_err(|e| at(&a.action, e))?;
    seq.validate(&ctx.model, &ctx.vocab).map_err(|e| at(&a.action, e))?;
    let mut bus = SimBus::new(&ctx.model);
    bus.set_logging(a.bus_log.is_some());
    let ids: Vec<u8> = ctx.model.joints().iter().map(|j| j.id).collect();
    let period = 1.0 / seq.rate_hz;
    let mut log = String::new();
    for (t, frame) in seq.frames.iter().enumerate() {
        let time = t as f64 * period;
        for kind in [CommandKind::Facial, CommandKind::Audio] {
            for e in seq.events(kind).iter().filter(|e| e.frame == t) {
                let name = &ctx.vocab.list(kind)[e.command];
                log.push_str(&format!("{time:.4} event {kind} {name}\n"));
            }
        }
        let goals: Vec<(u8, f64)> = ids.iter().copied().zip(frame.iter().copied()).collect();
        bus.transact(&BusFrame::sync_write(&goals), period);
        log.push_str(&format!("{time:.4} state"));
        for &id in &ids {
            let q = bus.state(id).map_or(f64::NAN, |s| s.position);
            log.push_str(&format!(" {q:.5}"));
        }
        log.push('\n');
    }
    if let Some(p) = &a.bus_log {
        write_text(p, &bus.hex_dump())?;
    }
    match &a.log {
        Some(p) => write_text(p, &log),
        None => std::io::stdout().write_all(log.as_bytes()).map_err(|e| e.to_string()),
    }
}

fn analyze(a: AnalyzeArgs) -> CliResult {
    let net = load_net(&a.net)?;
    let dataset = Dataset::load(&a.dataset).map_err(|e| at(&a.dataset, e))?;
    if dataset.sequences.len() != net.sequence_count() {
        return Err(format!(
            "--dataset has {} sequences but --net was trained on {}",
            dataset.sequences.len(),
            net.sequence_count()
        ));
    }
    fs::create_dir_all(&a.out_dir).map_err(|e| at(&a.out_dir, e))?;
    let mut states = Vec::with_capacity(dataset.sequences.len());
    let mut rows = Vec::with_capacity(dataset.sequences.len());
    for (k, teacher) in dataset.sequences.iter().enumerate() {
        let context = ContextSource::Sequence(k);
        let posture = teacher.vectors.first().ok_or("--dataset contains an empty sequence")?;
        let generated = net
            .generate_sequence(&context, posture, teacher.len(), teacher.name.clone(), teacher.rate_hz)
            .map_err(|e| e.to_string())?;
        states.push(net.rollout_states(&context, &generated).map_err(|e| e.to_string())?);
        let report = trajectory_rmse(&generated, teacher, &dataset.layout()).map_err(|e| e.to_string())?;
        rows.push((teacher.name.clone(), report));
    }
    let result = pca(&states, a.components).map_err(|e| e.to_string())?;
    write_projections(&a.out_dir.join("pca_projections.csv"), &result).map_err(|e| e.to_string())?;
    write_variance(&a.out_dir.join("variance.csv"), &result).map_err(|e| e.to_string())?;
    write_rmse_report(&a.out_dir.join("rmse_report.csv"), &rows).map_err(|e| e.to_string())?;
    if result.projections.len() >= 2 {
        let score = separation_score(&result.projections).map_err(|e| e.to_string())?;
        info!("separation score {score:.4}");
    }
    Ok(())
}

fn ik_solve(ctx: &Context, a: IkArgs) -> CliResult {
    let mut objectives = vec![IkObjective::position(Vector3::from(a.target), 1.0)];
    if let Some([w, x, y, z]) = a.orientation {
        let q = UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z));
        objectives.push(IkObjective::orientation(q, a.orientation_weight));
    }
    let indices = ctx.model.chain_indices(&a.chain).map_err(|e| format!("--chain: {e}"))?;
    let home = ctx.model.home_pose();
    let seed_pose: Vec<f64> = indices.iter().map(|&i| home[i]).collect();
    let cfg = IkConfig {
        generations: a.generations,
        population: a.population,
        seed: ctx.seed,
        ..IkConfig::default()
    };
    let solution = solve_named(&ctx.model, &a.chain, &objectives, &seed_pose, &cfg).map_err(|e| e.to_string())?;
    let text = serde_json::to_string_pretty(&solution).map_err(|e| e.to_string())?;
    println!("{text}");
    Ok(())
}

fn serve(ctx: &Context, a: ServeArgs) -> CliResult {
    let mut cfg = ServiceConfig::new(ctx.model.clone());
    cfg.vocabulary = ctx.vocab.clone();
    cfg.rate_hz = ctx.rate_hz;
    cfg.seed = ctx.seed;
    if let Some(dir) = &a.actions {
        fs::create_dir_all(dir).map_err(|e| at(dir, e))?;
        for f in action_files(std::slice::from_ref(dir))? {
            cfg.actions.push(ActionSequence::load(&f).map_err(|e| at(&f, e))?);
        }
        cfg.action_dir = Some(dir.clone());
    }
    if let Some(p) = &a.net {
        cfg.network = Some(load_net(p)?);
    }
    let server = Server::bind((a.host.as_str(), ctx.port), cfg).map_err(|e| format!("--port {}: {e}", ctx.port))?;
    eprintln!("listening on {}", server.local_addr());
    server.wait();
    Ok(())
}
