use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use activeglasses::arms::ArmModel;
use activeglasses::cloud::{read_ply, write_ply, FrameTag};
use activeglasses::episode;
use activeglasses::executor::{
    benchmark, default_script, render_table, run_rollout, save_rollout, ArmPair, RolloutConfig, RolloutPolicy,
    Termination,
};
use activeglasses::pipeline::{self, demo_seed, episode_from_demo, synthetic_demo, ProcessConfig};
use activeglasses::policy::{
    load_checkpoint, save_checkpoint, train_with_progress, HeadType, ObjectRep, PolicyConfig, PolicyParams, TrainConfig,
};
use activeglasses::simworld::{DemoScript, RandomizationRanges, SceneSpec, TaskKind};

const SEED_ENV: &str = "ACTIVEGLASSES_SEED";
const MANIFEST: &str = "run_manifest.json";

/// Egocentric demonstration processing, policy training and closed-loop simulation.
#[derive(Parser, Debug)]
#[command(name = "activeglasses", version)]
struct Cli {
    /// JSON config file; command-line flags take precedence over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Repeat for more output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize demonstration episodes.
    Generate(GenerateArgs),
    /// Turn episodes into world-frame clouds and training samples.
    Process(ProcessArgs),
    /// Train a policy on a processed dataset.
    Train(TrainArgs),
    /// Run one closed-loop rollout.
    Rollout(RolloutArgs),
    /// Run randomized rollouts and tally stage successes.
    Benchmark(BenchmarkArgs),
    /// Write a scene's surface as a PLY cloud.
    ExportScene(ExportArgs),
    /// Check stored episodes.
    Validate(ValidateArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
enum TaskArg {
    Slot,
    Pour,
}

impl From<TaskArg> for TaskKind {
    fn from(t: TaskArg) -> TaskKind {
        match t {
            TaskArg::Slot => TaskKind::SlotInsertion,
            TaskArg::Pour => TaskKind::Pour,
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct SceneArgs {
    #[arg(long, value_enum, default_value = "slot")]
    task: TaskArg,
    /// Scene JSON replacing the task's default scene.
    #[arg(long)]
    scene: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct GenerateArgs {
    #[command(flatten)]
    scene: SceneArgs,
    /// Demonstration script JSON replacing the task's default script.
    #[arg(long)]
    script: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    n: usize,
    /// Randomize the scene per episode.
    #[arg(long)]
    randomize: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Serialize)]
struct ProcessArgs {
    /// Episode directories, or directories containing them.
    #[arg(long, required = true, num_args = 1..)]
    episodes: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
enum RepArg {
    Abs,
    Rel,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
enum HeadArg {
    Regression,
    Denoising,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    /// Processed dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the checkpoint, history and manifest.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, value_enum)]
    object_rep: Option<RepArg>,
    /// Condition on the current object pose.
    #[arg(long)]
    current_pose: Option<bool>,
    #[arg(long, value_enum)]
    head: Option<HeadArg>,
    /// Train on the first N samples only.
    #[arg(long)]
    max_samples: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize, PartialEq)]
enum PolicyArg {
    Trained,
    Oracle,
    Frozen,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
enum ArmArg {
    A,
    B,
}

#[derive(Args, Debug, Serialize)]
struct ExecArgs {
    #[arg(long, value_enum, default_value = "trained")]
    policy: PolicyArg,
    /// Checkpoint file (for the trained policy).
    #[arg(long)]
    params: Option<PathBuf>,
    /// Manipulation arm.
    #[arg(long, value_enum, default_value = "a")]
    arm: ArmArg,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    execute_steps: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    /// Keep the perception arm still.
    #[arg(long)]
    fixed_camera: bool,
}

#[derive(Args, Debug, Serialize)]
struct RolloutArgs {
    #[command(flatten)]
    scene: SceneArgs,
    #[command(flatten)]
    exec: ExecArgs,
    /// Randomize the scene from the seed.
    #[arg(long)]
    randomize: bool,
    /// Save a PLY of every k-th observed cloud (0 disables).
    #[arg(long, default_value_t = 1)]
    snapshot_every: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Serialize)]
struct BenchmarkArgs {
    #[command(flatten)]
    scene: SceneArgs,
    #[command(flatten)]
    exec: ExecArgs,
    #[arg(long, default_value_t = 20)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Serialize)]
struct ExportArgs {
    #[command(flatten)]
    scene: SceneArgs,
    /// Surface sample spacing in meters.
    #[arg(long, default_value_t = 0.01)]
    spacing: f64,
    /// Output PLY file.
    #[arg(long)]
    out: PathBuf,
    /// Also write the scene as JSON here.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct ValidateArgs {
    /// Episode directories, or directories containing them.
    #[arg(required = true)]
    episodes: Vec<PathBuf>,
}

/// Settings that can come from the config file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    policy: PolicyConfig,
    train: TrainConfig,
    rollout: RolloutConfig,
    process: ProcessConfig,
}

/// Failure with the process exit code it maps to.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

fn usage(err: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 2, err: err.into() }
}

fn task(err: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 1, err: err.into() }
}

type Outcome = Result<(), Failure>;

struct Ctx {
    file: FileConfig,
    verbose: u8,
}

impl Ctx {
    fn log(&self, level: u8, msg: impl AsRef<str>) {
        if self.verbose >= level {
            eprintln!("{}", msg.as_ref());
        }
    }

    /// Flag, then config file, then the environment.
    fn seed(&self, flag: Option<u64>) -> Result<u64, Failure> {
        if let Some(s) = flag.or(self.file.seed) {
            return Ok(s);
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| usage(anyhow!("{SEED_ENV}={v:?} is not an unsigned integer"))),
            Err(_) => Err(usage(anyhow!(
                "a seed is required: pass --seed, set `seed` in the config file or set {SEED_ENV}"
            ))),
        }
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, what: &str) -> Result<T, Failure> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {what} {}", path.display())).map_err(usage)?;
    serde_json::from_str(&text)
        .with_context(|| format!("invalid {what} {}", path.display()))
        .map_err(usage)
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir)
        .with_context(|| format!("cannot create {}", dir.display()))
        .map_err(usage)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    fs::write(path, bytes)
        .with_context(|| format!("cannot write {}", path.display()))
        .map_err(usage)
}

/// Reproducibility manifest: command, arguments, effective config and its hash.
fn write_manifest(dir: &Path, command: &str, args: &impl Serialize, seed: Option<u64>, config: serde_json::Value) -> Outcome {
    let canonical = serde_json::to_vec(&config).map_err(usage)?;
    let manifest = json!({
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "args": args,
        "seed": seed,
        "config_sha256": hex::encode(Sha256::digest(&canonical)),
        "config": config,
    });
    let mut bytes = serde_json::to_vec_pretty(&manifest).map_err(usage)?;
    bytes.push(b'\n');
    write_file(&dir.join(MANIFEST), &bytes)
}

fn load_scene(args: &SceneArgs) -> Result<SceneSpec, Failure> {
    let scene = match &args.scene {
        Some(p) => read_json::<SceneSpec>(p, "scene file")?,
        None => match TaskKind::from(args.task) {
            TaskKind::SlotInsertion => SceneSpec::slot_insertion_default(),
            TaskKind::Pour => SceneSpec::pour_default(),
        },
    };
    scene.validate().map_err(usage)?;
    Ok(scene)
}

fn randomization(task: TaskKind) -> RandomizationRanges {
    match task {
        TaskKind::SlotInsertion => RandomizationRanges::slot_default(),
        TaskKind::Pour => RandomizationRanges::pour_default(),
    }
}

/// Expands roots into the episode directories (those holding an episode manifest) below them.
fn episode_dirs(paths: &[PathBuf]) -> Result<Vec<PathBuf>, Failure> {
    let mut out = Vec::new();
    for p in paths {
        if !p.is_dir() {
            return Err(usage(anyhow!("{} is not a directory", p.display())));
        }
        if p.join("manifest.json").is_file() {
            out.push(p.clone());
            continue;
        }
        let mut subs: Vec<PathBuf> = fs::read_dir(p)
            .with_context(|| format!("cannot list {}", p.display()))
            .map_err(usage)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|d| d.join("manifest.json").is_file())
            .collect();
        if subs.is_empty() {
            return Err(usage(anyhow!("no episodes under {}", p.display())));
        }
        subs.sort();
        out.extend(subs);
    }
    Ok(out)
}

fn cmd_generate(ctx: &Ctx, a: &GenerateArgs) -> Outcome {
    let seed = ctx.seed(a.seed)?;
    let base = load_scene(&a.scene)?;
    let script = match &a.script {
        Some(p) => read_json::<DemoScript>(p, "script file")?,
        None => default_script(base.task),
    };
    script.validate().map_err(usage)?;
    let ranges = if a.randomize {
        randomization(base.task)
    } else {
        RandomizationRanges { groups: Vec::new() }
    };
    create_dir(&a.out)?;
    let mut invalid = 0;
    for i in 0..a.n {
        let id = format!("episode_{i:04}");
        let (scene, streams) = synthetic_demo(&base, &script, &ranges, seed, i).map_err(task)?;
        let ep = episode_from_demo(&streams, scene.task.name(), demo_seed(seed, i)).map_err(task)?;
        let dir = a.out.join(&id);
        episode::save(&ep, &dir).map_err(usage)?;
        let report = episode::validate(&ep);
        if !report.passed() {
            invalid += 1;
        }
        println!(
            "{id}: {} frames, object visible in {:.0}% of frames, {}",
            ep.frames.len(),
            100.0 * streams.visible_fraction,
            if report.passed() { "valid" } else { "INVALID" }
        );
        for c in report.failures() {
            ctx.log(0, format!("  {}: {}", c.name, c.detail));
        }
    }
    write_manifest(&a.out, "generate", a, Some(seed), json!({ "randomization": ranges, "script": script }))?;
    if invalid > 0 {
        return Err(task(anyhow!("{invalid} of {} episodes failed validation", a.n)));
    }
    Ok(())
}

fn cmd_process(ctx: &Ctx, a: &ProcessArgs) -> Outcome {
    let dirs = episode_dirs(&a.episodes)?;
    create_dir(&a.out)?;
    let report = pipeline::process_dataset(&dirs, &a.out, &ctx.file.process).map_err(|e| match e {
        pipeline::ProcessError::Io { .. } => usage(e),
        other => task(other),
    })?;
    for e in &report.episodes {
        println!(
            "{}: {} frames, {} samples, {} dropped, {} interpolated",
            e.id,
            e.frames,
            e.samples,
            e.dropped.len(),
            e.filled.len()
        );
    }
    println!(
        "{} samples from {} episodes, {} frames dropped",
        report.total_samples,
        report.episodes.len(),
        report.total_dropped
    );
    write_manifest(&a.out, "process", a, None, json!({ "process": ctx.file.process }))
}

fn cmd_train(ctx: &Ctx, a: &TrainArgs) -> Outcome {
    let seed = ctx.seed(a.seed)?;
    let mut cfg = ctx.file.policy.clone();
    cfg.seed = seed;
    if let Some(r) = a.object_rep {
        cfg.object_rep = match r {
            RepArg::Abs => ObjectRep::Absolute,
            RepArg::Rel => ObjectRep::Relative,
        };
    }
    if let Some(c) = a.current_pose {
        cfg.condition_on_current_pose = c;
    }
    if let Some(h) = a.head {
        cfg.head = match h {
            HeadArg::Regression => HeadType::Regression,
            HeadArg::Denoising => HeadType::Denoising,
        };
    }
    cfg.validate().map_err(usage)?;
    let mut tcfg = ctx.file.train;
    if let Some(e) = a.epochs {
        tcfg.epochs = e;
    }
    if let Some(lr) = a.lr {
        tcfg.learning_rate = lr;
    }
    if let Some(b) = a.batch_size {
        tcfg.batch_size = b;
    }
    ctx.log(1, format!("policy config: {}", serde_json::to_string(&cfg).unwrap_or_default()));
    ctx.log(1, format!("train config: {}", serde_json::to_string(&tcfg).unwrap_or_default()));
    let data = pipeline::load_prepared(&a.data, &cfg).map_err(|e| match e {
        pipeline::ProcessError::Io { .. } | pipeline::ProcessError::Samples(_) => usage(e),
        other => task(other),
    })?;
    let mut data = data;
    if let Some(n) = a.max_samples {
        data.truncate(n);
    }
    println!("training on {} samples", data.len());
    let (params, history) = train_with_progress(&data, &cfg, &tcfg, |epoch, loss| {
        ctx.log(1, format!("epoch {epoch:4}  loss {loss:.6e}"));
    })
    .map_err(task)?;
    create_dir(&a.out)?;
    let path = a.out.join("params.bin");
    let f = File::create(&path).with_context(|| format!("cannot write {}", path.display())).map_err(usage)?;
    save_checkpoint(BufWriter::new(f), &params).map_err(usage)?;
    write_file(&a.out.join("history.json"), &serde_json::to_vec_pretty(&history).map_err(usage)?)?;
    println!(
        "final loss {:.6e} (object {:.3e}, head {:.3e}, termination {:.3e})",
        history.final_loss.total, history.final_loss.object, history.final_loss.head, history.final_loss.termination
    );
    write_manifest(&a.out, "train", a, Some(seed), json!({ "policy": cfg, "train": tcfg }))
}

fn load_params(path: Option<&Path>) -> Result<PolicyParams, Failure> {
    let path = path.ok_or_else(|| usage(anyhow!("--params is required for the trained policy")))?;
    let path = if path.is_dir() { path.join("params.bin") } else { path.to_path_buf() };
    let f = File::open(&path).with_context(|| format!("cannot read checkpoint {}", path.display())).map_err(usage)?;
    load_checkpoint(BufReader::new(f))
        .with_context(|| format!("invalid checkpoint {}", path.display()))
        .map_err(usage)
}

fn rollout_config(ctx: &Ctx, e: &ExecArgs, seed: u64) -> RolloutConfig {
    let mut cfg = ctx.file.rollout.clone();
    cfg.seed = seed;
    if let Some(t) = e.threshold {
        cfg.threshold = t;
    }
    if let Some(n) = e.execute_steps {
        cfg.execute_steps = n;
    }
    if let Some(n) = e.max_steps {
        cfg.max_steps = n;
    }
    cfg.fixed_camera |= e.fixed_camera;
    cfg
}

fn arms(e: &ExecArgs) -> ArmPair {
    let manip = match e.arm {
        ArmArg::A => ArmModel::arm_a(),
        ArmArg::B => ArmModel::arm_b(),
    };
    ArmPair::new(&manip, &ArmModel::arm_a())
}

fn policy<'a>(e: &ExecArgs, params: Option<&'a PolicyParams>, nominal: &SceneSpec) -> RolloutPolicy<'a> {
    let script = default_script(nominal.task);
    match (e.policy, params) {
        (PolicyArg::Trained, Some(p)) => RolloutPolicy::Trained(p),
        (PolicyArg::Frozen, _) => RolloutPolicy::Frozen {
            scene: nominal.clone(),
            script,
        },
        _ => RolloutPolicy::Oracle { script },
    }
}

fn cmd_rollout(ctx: &Ctx, a: &RolloutArgs) -> Outcome {
    let seed = ctx.seed(a.seed)?;
    let nominal = load_scene(&a.scene)?;
    let scene = if a.randomize {
        activeglasses::simworld::randomize_scene(&nominal, &randomization(nominal.task), seed).map_err(task)?
    } else {
        nominal.clone()
    };
    let params = match a.exec.policy {
        PolicyArg::Trained => Some(load_params(a.exec.params.as_deref())?),
        _ => None,
    };
    let cfg = rollout_config(ctx, &a.exec, seed);
    cfg.validate(params.as_ref().map_or(cfg.horizon, |p| p.cfg.horizon)).map_err(usage)?;
    let result = run_rollout(&scene, &policy(&a.exec, params.as_ref(), &nominal), &cfg, &arms(&a.exec)).map_err(task)?;
    save_rollout(&result, &a.out, a.snapshot_every).map_err(usage)?;
    let s = result.stages;
    println!(
        "{} steps, termination {}, stages {}/{}/{}",
        result.steps.len(),
        serde_json::to_string(&result.termination).unwrap_or_default(),
        u8::from(s.stage1),
        u8::from(s.stage2),
        u8::from(s.stage3)
    );
    write_manifest(&a.out, "rollout", a, Some(seed), json!({ "rollout": cfg, "scene": scene }))?;
    if let Termination::IkFailure { step, arm, index, ik_reason } = result.termination {
        return Err(task(anyhow!(
            "{arm:?} arm IK failed at step {step}, waypoint {index}: {ik_reason:?}"
        )));
    }
    Ok(())
}

fn cmd_benchmark(ctx: &Ctx, a: &BenchmarkArgs) -> Outcome {
    let seed = ctx.seed(a.seed)?;
    if a.n == 0 {
        return Err(usage(anyhow!("--n must be at least 1")));
    }
    let base = load_scene(&a.scene)?;
    let params = match a.exec.policy {
        PolicyArg::Trained => Some(load_params(a.exec.params.as_deref())?),
        _ => None,
    };
    let cfg = rollout_config(ctx, &a.exec, seed);
    cfg.validate(params.as_ref().map_or(cfg.horizon, |p| p.cfg.horizon)).map_err(usage)?;
    let pol = policy(&a.exec, params.as_ref(), &base);
    let ranges = randomization(base.task);
    let table = benchmark(&base, &pol, a.n, &ranges, &cfg, &arms(&a.exec), seed).map_err(task)?;
    let text = render_table(&[(pol.name().to_string(), &table)]);
    print!("{text}");
    create_dir(&a.out)?;
    write_file(&a.out.join("table.md"), text.as_bytes())?;
    write_file(&a.out.join("table.json"), &serde_json::to_vec_pretty(&table).map_err(usage)?)?;
    write_manifest(&a.out, "benchmark", a, Some(seed), json!({ "rollout": cfg, "randomization": ranges }))
}

fn cmd_export(_ctx: &Ctx, a: &ExportArgs) -> Outcome {
    if !(a.spacing > 0.0) {
        return Err(usage(anyhow!("--spacing must be positive")));
    }
    let scene = load_scene(&a.scene)?;
    let cloud = scene.surface_cloud(a.spacing);
    let f = File::create(&a.out).with_context(|| format!("cannot write {}", a.out.display())).map_err(usage)?;
    let mut w = BufWriter::new(f);
    write_ply(&mut w, &cloud).map_err(usage)?;
    w.flush().map_err(usage)?;
    drop(w);
    let f = File::open(&a.out).map_err(usage)?;
    let back = read_ply(BufReader::new(f), FrameTag::World).map_err(task)?;
    if back.points != cloud.points || back.colors != cloud.colors {
        return Err(task(anyhow!("{} does not read back identically", a.out.display())));
    }
    if let Some(j) = &a.json {
        write_file(j, &serde_json::to_vec_pretty(&scene).map_err(usage)?)?;
    }
    println!("{}: {} points, read back ok", a.out.display(), cloud.len());
    Ok(())
}

fn cmd_validate(ctx: &Ctx, a: &ValidateArgs) -> Outcome {
    let mut bad = 0;
    let dirs = episode_dirs(&a.episodes)?;
    for dir in &dirs {
        match episode::load(dir) {
            Ok(ep) => {
                let r = episode::validate(&ep);
                println!("{}: {}", dir.display(), if r.passed() { "valid" } else { "INVALID" });
                for c in &r.checks {
                    if !c.passed || ctx.verbose > 0 {
                        println!("  {} {}: {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail);
                    }
                }
                bad += usize::from(!r.passed());
            }
            Err(e) => {
                println!("{}: unreadable: {e}", dir.display());
                bad += 1;
            }
        }
    }
    if bad > 0 {
        return Err(task(anyhow!("{bad} of {} episodes invalid", dirs.len())));
    }
    Ok(())
}

fn run(cli: &Cli) -> Outcome {
    let file = match &cli.config {
        Some(p) => read_json::<FileConfig>(p, "config file")?,
        None => FileConfig::default(),
    };
    let ctx = Ctx {
        file,
        verbose: cli.verbose,
    };
    ctx.log(
        1,
        format!(
            "config precedence: flags > {} > defaults",
            cli.config.as_ref().map_or("(no file)".into(), |p| p.display().to_string())
        ),
    );
    match &cli.command {
        Command::Generate(a) => cmd_generate(&ctx, a),
        Command::Process(a) => cmd_process(&ctx, a),
        Command::Train(a) => cmd_train(&ctx, a),
        Command::Rollout(a) => cmd_rollout(&ctx, a),
        Command::Benchmark(a) => cmd_benchmark(&ctx, a),
        Command::ExportScene(a) => cmd_export(&ctx, a),
        Command::Validate(a) => cmd_validate(&ctx, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}
