use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use pcformer::autodiff::ParamStore;
use pcformer::config::RunConfig;
use pcformer::gradsuite::gradient_suite;
use pcformer::metrics::eval_metrics;
use pcformer::model::{count_params, head_param_count, Model, FULL_SCALE_HEAD_WIDTHS};
use pcformer::simulator::rollout_trajectory;
use pcformer::toydata::{read_manifest, split_paths, write_dataset, DatasetSpec, Scenario, Split};
use pcformer::training::{
    body_mean_x, inverse_design, train, InverseDesignConfig, CURVE_HEADER, DESIGN_HEADER,
};
use pcformer::trajio::{load_trajectory, save_trajectory};
use pcformer::Error;

#[derive(Parser)]
#[command(
    name = "pcformer",
    version,
    about = "Learned prediction-correction particle simulator"
)]
struct Cli {
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a toy dataset and its manifest.
    Generate(GenerateArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Roll a checkpoint out from the first frame of a trajectory.
    Rollout(RolloutArgs),
    /// Compare a predicted trajectory with a reference.
    Eval(EvalArgs),
    /// Finite-difference check of op and model gradients.
    Gradcheck(GradcheckArgs),
    /// Parameter counts per module.
    CountParams(CountArgs),
    /// Recover a friction coefficient by differentiating through a rollout.
    InverseDesign(DesignArgs),
    /// Write a freshly initialized checkpoint.
    InitCkpt(InitArgs),
}

#[derive(Args)]
struct ConfigArg {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Print the parsed configuration and exit.
    #[arg(long)]
    dump_config: bool,
}

impl ConfigArg {
    fn load(&self) -> Result<RunConfig> {
        match &self.config {
            Some(p) => {
                RunConfig::load(p).with_context(|| format!("config: parsing {}", p.display()))
            }
            None => Ok(RunConfig::default()),
        }
    }

    /// Returns `None` after printing when `--dump-config` was given.
    fn resolve(&self) -> Result<Option<RunConfig>> {
        let cfg = self.load()?;
        if self.dump_config {
            print!("{}", cfg.dump());
            return Ok(None);
        }
        Ok(Some(cfg))
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    scenario: Scenario,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    val: usize,
    #[arg(long, default_value_t = 0)]
    test: usize,
    #[arg(long)]
    particles: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    dt: Option<f64>,
    /// Friction range `LO,HI` spread across slope sequences.
    #[arg(long, value_delimiter = ',', num_args = 2)]
    mu: Option<Vec<f64>>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Loss curve CSV; defaults to `<out>.csv`.
    #[arg(long)]
    curve: Option<PathBuf>,
    /// Fit per-channel attribute normalization on the training split; the
    /// fitted values are stored in the checkpoint's config sidecar.
    #[arg(long)]
    normalize_attributes: bool,
}

#[derive(Args)]
struct RolloutArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Model configuration; defaults to the checkpoint's `.config` sidecar.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    init: PathBuf,
    #[arg(long)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    start: usize,
    #[arg(long)]
    out: PathBuf,
    /// Predictor only; the checkpoint is ignored.
    #[arg(long)]
    no_corrector: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Wall time of the rollout that produced `--pred`, for the throughput line.
    #[arg(long)]
    rollout_seconds: Option<f64>,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    module: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct CountArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Print only the parameter count of the reference prediction head.
    #[arg(long = "paper-head")]
    full_scale_head: bool,
}

#[derive(Args)]
struct DesignArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Template: initial state, forces and scene of the rollout.
    #[arg(long)]
    scene: PathBuf,
    /// Trajectory whose terminal body position is to be matched.
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    mu0: f64,
    #[arg(long)]
    iters: usize,
    #[arg(long, default_value_t = 1)]
    channel: usize,
    #[arg(long, default_value_t = 0.1)]
    lower: f64,
    #[arg(long, default_value_t = 0.5)]
    upper: f64,
    #[arg(long, default_value_t = 10.0)]
    step_size: f64,
    /// Particles ending at or below this height form the body.
    #[arg(long, default_value_t = 0.05)]
    body_height: f64,
    /// Objective curve CSV.
    #[arg(long)]
    curve: Option<PathBuf>,
}

#[derive(Args)]
struct InitArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn sidecar(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".config");
    PathBuf::from(s)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn save_model(model: &Model, cfg: &RunConfig, path: &Path) -> Result<()> {
    model.params.save(path).context("checkpoint: save")?;
    let run = RunConfig {
        model: model.config.clone(),
        ..cfg.clone()
    };
    run.save(&sidecar(path))
        .context("checkpoint: save config sidecar")
}

fn load_model(ckpt: &Path, config: Option<&Path>) -> Result<Model> {
    let cfg_path = config.map_or_else(|| sidecar(ckpt), Path::to_path_buf);
    let cfg = RunConfig::load(&cfg_path)
        .with_context(|| format!("config: parsing {}", cfg_path.display()))?;
    let params = ParamStore::load(ckpt).context("checkpoint: load")?;
    let model = Model {
        config: cfg.model,
        params,
    };
    model.check_layout().context("checkpoint: layout")?;
    Ok(model)
}

fn require_out(out: &Option<PathBuf>) -> Result<&Path> {
    match out {
        Some(p) => Ok(p),
        None => bail!(Usage("--out is required".into())),
    }
}

fn generate(a: GenerateArgs) -> Result<()> {
    let mut ds = DatasetSpec::new(a.scenario, a.count, a.seed);
    ds.val = a.val;
    ds.test = a.test;
    if let Some(n) = a.particles {
        ds.particles = n;
    }
    if let Some(f) = a.frames {
        ds.frames = f;
    }
    if let Some(dt) = a.dt {
        ds.dt = dt;
    }
    if let Some(mu) = a.mu {
        ds.friction = (mu[0], mu[1]);
    }
    let entries = write_dataset(&ds, &a.out).context("toy-data: generate")?;
    println!("sequences = {}", entries.len());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let Some(mut cfg) = a.config.resolve()? else {
        return Ok(());
    };
    let out = require_out(&a.out)?;
    let entries = read_manifest(&a.data).context("train: reading manifest")?;
    let load = |split| -> Result<Vec<_>> {
        split_paths(&a.data, &entries, split)
            .iter()
            .map(|p| load_trajectory(p).with_context(|| format!("train: loading {}", p.display())))
            .collect()
    };
    let (train_set, val_set) = (load(Split::Train)?, load(Split::Val)?);
    if train_set.is_empty() {
        bail!(Error::invalid(
            "train",
            "the dataset has no training sequences"
        ));
    }
    if a.normalize_attributes {
        cfg.model
            .fit_attribute_normalization(&train_set)
            .context("train: attribute normalization")?;
    }
    let mut model = Model::new(cfg.model.clone(), cfg.init_seed).context("model: init")?;
    let curve_path = a.curve.clone().unwrap_or_else(|| {
        let mut s = out.as_os_str().to_owned();
        s.push(".csv");
        PathBuf::from(s)
    });
    let mut csv = fs::File::create(&curve_path)
        .with_context(|| format!("creating {}", curve_path.display()))?;
    writeln!(csv, "{CURVE_HEADER}")?;
    let mut io_err = None;
    let report = train(&mut model, &train_set, &val_set, &cfg.train, |p| {
        if let Err(e) = writeln!(csv, "{}", p.csv_row()) {
            io_err.get_or_insert(e);
        }
        eprintln!("{}", p.csv_row());
    })
    .context("training: train")?;
    if let Some(e) = io_err {
        return Err(e).context("writing curve");
    }
    save_model(&model, &cfg, out)?;
    println!("best_step = {}", report.best_step);
    if let Some(v) = report.best_val {
        println!("best_val_loss = {v}");
    }
    println!("steps = {}", report.steps);
    Ok(())
}

fn rollout_cmd(a: RolloutArgs) -> Result<()> {
    let init = load_trajectory(&a.init).context("rollout: loading init")?;
    let model = if a.no_corrector {
        None
    } else {
        Some(load_model(&a.ckpt, a.config.as_deref())?)
    };
    let t0 = Instant::now();
    let pred = rollout_trajectory(model.as_ref(), &init, a.start, a.steps + 1)
        .context("simulator: rollout")?;
    let secs = t0.elapsed().as_secs_f64();
    save_trajectory(&pred, &a.out).context("rollout: save")?;
    println!("frames = {}", pred.frame_count());
    println!("seconds = {secs}");
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let pred = load_trajectory(&a.pred).context("eval: loading prediction")?;
    let reference = load_trajectory(&a.reference).context("eval: loading reference")?;
    let mut report = eval_metrics(&pred, &reference).context("loss-metrics: eval")?;
    if let Some(s) = a.rollout_seconds {
        if !(s > 0.0) {
            bail!(Error::invalid(
                "eval",
                format!("rollout seconds must be positive, got {s}")
            ));
        }
        report.frames_per_second = Some(pred.frame_count() as f64 / s);
    }
    let text = report.to_string();
    print!("{text}");
    if let Some(out) = &a.out {
        write_text(out, &text)?;
    }
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<()> {
    let Some(cfg) = a.config.resolve()? else {
        return Ok(());
    };
    let checks = gradient_suite(&cfg.model, a.module.as_deref(), a.seed).context("gradcheck")?;
    let mut failed = 0;
    for c in &checks {
        println!("{c}");
        failed += usize::from(!c.passed());
    }
    println!("checked = {}", checks.len());
    println!("failed = {failed}");
    if failed > 0 {
        bail!(Error::invalid(
            "gradcheck",
            format!("{failed} gradient checks failed")
        ));
    }
    Ok(())
}

fn count_cmd(a: CountArgs) -> Result<()> {
    if a.full_scale_head {
        println!("{}", head_param_count(&FULL_SCALE_HEAD_WIDTHS));
        return Ok(());
    }
    let Some(cfg) = a.config.resolve()? else {
        return Ok(());
    };
    let c = count_params(&cfg.model).context("model: count params")?;
    println!("tokenizer = {}", c.tokenizer);
    println!("encoder = {}", c.encoder);
    println!("decoder = {}", c.decoder);
    println!("head = {}", c.head);
    println!("total = {}", c.total());
    Ok(())
}

fn design_cmd(a: DesignArgs) -> Result<()> {
    let model = load_model(&a.ckpt, a.config.as_deref())?;
    let template = load_trajectory(&a.scene).context("inverse-design: loading scene")?;
    let target_traj = load_trajectory(&a.target).context("inverse-design: loading target")?;
    let last = target_traj.frame(target_traj.frame_count() - 1);
    let target =
        body_mean_x(&last.positions, a.body_height).context("inverse-design: target summary")?;
    let cfg = InverseDesignConfig {
        target,
        initial: a.mu0,
        lower: a.lower,
        upper: a.upper,
        iterations: a.iters,
        step_size: a.step_size,
    };
    let report = inverse_design(&model, &template, a.channel, a.body_height, &cfg)
        .context("training: inverse design")?;
    if let Some(path) = &a.curve {
        let mut text = format!("{DESIGN_HEADER}\n");
        for p in &report.curve {
            text.push_str(&p.csv_row());
            text.push('\n');
        }
        write_text(path, &text)?;
    }
    println!("target_summary = {target}");
    println!("value = {}", report.value);
    if let Some(p) = report.curve.last() {
        println!("objective = {}", p.objective);
    }
    Ok(())
}

fn init_cmd(a: InitArgs) -> Result<()> {
    let Some(cfg) = a.config.resolve()? else {
        return Ok(());
    };
    let out = require_out(&a.out)?;
    let model = Model::new(cfg.model.clone(), cfg.init_seed).context("model: init")?;
    save_model(&model, &cfg, out)?;
    println!("params = {}", model.params.scalar_count());
    Ok(())
}

#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 2;
    }
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::NonFinite { .. } | Error::Diverged { .. }) => 3,
        _ => 4,
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring thread pool")?;
    }
    match cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train_cmd(a),
        Command::Rollout(a) => rollout_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::CountParams(a) => count_cmd(a),
        Command::InverseDesign(a) => design_cmd(a),
        Command::InitCkpt(a) => init_cmd(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
