//! Command-line front end for mesh and dataset generation, training,
//! evaluation, single reconstructions and report tables.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use pdeinvreg::datagen::{build_dataset, Dataset, DatasetConfig, Problem, Split, DEFAULT_NOISE};
use pdeinvreg::exec;
use pdeinvreg::mesh::{generate_disk, generate_l_shape, generate_unit_square, Mesh};
use pdeinvreg::pipeline::{
    comparison_table, evaluate, fit_laplacian, load_vector, render_field, save_pgm, save_vector, train,
    EvalReport, Model, TrainConfig,
};
use pdeinvreg::regularizer::{GraphContext, ModelKind, RegularizerParams, UnrollConfig};

#[derive(Parser)]
#[command(name = "pdeinvreg", version, about = "Graph-regularized reconstruction for PDE inverse problems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a triangular mesh.
    GenMesh(GenMeshArgs),
    /// Simulate a dataset of (coefficient, observation) pairs.
    GenData(GenDataArgs),
    /// Train a regularizer and write its checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint or baseline on a dataset split.
    Evaluate(EvaluateArgs),
    /// Reconstruct a single field.
    Reconstruct(ReconstructArgs),
    /// Combine evaluation reports into one table.
    Report(ReportArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ProblemArg {
    Poisson,
    Helmholtz,
    Eit,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Shape {
    Square,
    LShape,
    Disk,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Baseline {
    Laplacian,
    Zero,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args)]
struct ProblemSel {
    /// Forward problem.
    #[arg(long, value_enum)]
    problem: Option<ProblemArg>,
    /// Poisson with 60% of free vertices observed (default).
    #[arg(long, conflicts_with = "sparse")]
    dense: bool,
    /// Poisson with 10% of free vertices observed.
    #[arg(long)]
    sparse: bool,
}

impl ProblemSel {
    fn resolve(&self) -> Result<Option<Problem>> {
        if (self.dense || self.sparse) && !matches!(self.problem, Some(ProblemArg::Poisson) | None) {
            bail!("--dense/--sparse only apply to --problem poisson");
        }
        Ok(match self.problem {
            Some(ProblemArg::Poisson) if self.sparse => Some(Problem::PoissonSparse),
            Some(ProblemArg::Poisson) => Some(Problem::PoissonDense),
            Some(ProblemArg::Helmholtz) => Some(Problem::Helmholtz),
            Some(ProblemArg::Eit) => Some(Problem::Eit),
            None if self.sparse => Some(Problem::PoissonSparse),
            None if self.dense => Some(Problem::PoissonDense),
            None => None,
        })
    }

    fn require(&self) -> Result<Problem> {
        self.resolve()?.context("--problem is required")
    }
}

#[derive(Args)]
struct GenMeshArgs {
    /// Picks the shape used for this problem when --shape is absent.
    #[arg(long, value_enum)]
    problem: Option<ProblemArg>,
    #[arg(long, value_enum)]
    shape: Option<Shape>,
    /// Cells per side (square, L-shape) or rings (disk).
    #[arg(long)]
    n: Option<usize>,
    /// Electrodes on the disk boundary.
    #[arg(long, default_value_t = 16)]
    electrodes: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    mesh: PathBuf,
    #[command(flatten)]
    problem: ProblemSel,
    #[arg(long, default_value_t = 100)]
    n_train: usize,
    #[arg(long, default_value_t = 20)]
    n_val: usize,
    #[arg(long, default_value_t = 100)]
    n_test: usize,
    /// Relative noise level.
    #[arg(long, default_value_t = DEFAULT_NOISE)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct UnrollArgs {
    /// Outer unrolled iterations.
    #[arg(long)]
    unroll: Option<usize>,
    /// CGLS iterations per unrolled iteration.
    #[arg(long)]
    cgls_iters: Option<usize>,
}

impl UnrollArgs {
    fn apply(&self, mut c: UnrollConfig) -> Result<UnrollConfig> {
        if let Some(n) = self.unroll {
            c.n_unroll = n;
        }
        if let Some(n) = self.cgls_iters {
            c.cgls_iters = n;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    mesh: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Checked against the dataset when given.
    #[command(flatten)]
    problem: ProblemSel,
    /// grand, acmp, gcn or laplacian.
    #[arg(long, default_value = "acmp")]
    model: ModelKind,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[command(flatten)]
    unroll: UnrollArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint path; the unroll settings go to `<out>.config` and the
    /// training curve to `<out>.curve.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ModelSel {
    /// Checkpoint written by `train`.
    #[arg(long, conflicts_with = "baseline")]
    checkpoint: Option<PathBuf>,
    /// Classical baseline instead of a checkpoint.
    #[arg(long, value_enum)]
    baseline: Option<Baseline>,
    #[command(flatten)]
    unroll: UnrollArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    mesh: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    problem: ProblemSel,
    #[command(flatten)]
    model: ModelSel,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Report CSV; printed to standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    mesh: PathBuf,
    /// Dataset to take the observation from (also fits the Laplacian weight).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Index into the chosen split of --data.
    #[arg(long, default_value_t = 0)]
    sample: usize,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Observation vector file, used instead of a dataset sample.
    #[arg(long)]
    obs: Option<PathBuf>,
    #[command(flatten)]
    problem: ProblemSel,
    #[command(flatten)]
    model: ModelSel,
    /// Output field in vector format.
    #[arg(long)]
    out: PathBuf,
    /// Optional grayscale rendering (PGM).
    #[arg(long)]
    image: Option<PathBuf>,
    /// Rendered image width and height in pixels.
    #[arg(long, default_value_t = 256)]
    image_size: usize,
}

#[derive(Args)]
struct ReportArgs {
    /// Evaluation CSV files; each row is labelled by its file stem.
    #[arg(required = true)]
    reports: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let workers = exec::init_from_env()?;
    log::debug!("{workers} worker thread(s)");
    match cli.command {
        Command::GenMesh(a) => gen_mesh(a),
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Reconstruct(a) => reconstruct_cmd(a),
        Command::Report(a) => report_cmd(a),
    }
}

fn load_mesh(path: &Path) -> Result<Mesh> {
    Mesh::load(path).with_context(|| format!("reading mesh {}", path.display()))
}

fn load_dataset(path: &Path, expected: Option<Problem>) -> Result<Dataset> {
    let data = Dataset::load(path).with_context(|| format!("reading dataset {}", path.display()))?;
    if let Some(p) = expected {
        if p != data.problem {
            bail!("dataset holds {} but {p} was requested", data.problem);
        }
    }
    Ok(data)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn gen_mesh(a: GenMeshArgs) -> Result<()> {
    let shape = a.shape.unwrap_or(match a.problem {
        Some(ProblemArg::Helmholtz) => Shape::Square,
        Some(ProblemArg::Eit) => Shape::Disk,
        _ => Shape::LShape,
    });
    let mesh = match shape {
        Shape::Square => generate_unit_square(a.n.unwrap_or(28))?,
        Shape::LShape => generate_l_shape(a.n.unwrap_or(20))?,
        Shape::Disk => generate_disk(a.n.unwrap_or(12), a.electrodes)?,
    };
    mesh.save(&a.out).with_context(|| format!("writing mesh {}", a.out.display()))?;
    log::info!(
        "{} nodes, {} elements -> {}",
        mesh.num_nodes(),
        mesh.num_elements(),
        a.out.display()
    );
    Ok(())
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let problem = a.problem.require()?;
    let mesh = load_mesh(&a.mesh)?;
    let fwd = problem.linear_forward(&mesh)?;
    let cfg = DatasetConfig::new(problem, a.n_train, a.n_val, a.n_test, a.noise, a.seed);
    let out = build_dataset(&mesh, &fwd, &cfg)?;
    if out.resampled > 0 {
        log::warn!("{} sample(s) resampled after forward failures", out.resampled);
    }
    out.dataset
        .save(&a.out)
        .with_context(|| format!("writing dataset {}", a.out.display()))?;
    log::info!("{} samples of {problem} -> {}", out.dataset.samples.len(), a.out.display());
    Ok(())
}

struct Setup {
    mesh: Mesh,
    ctx: GraphContext,
    fwd: pdeinvreg::forward::LinearForward,
}

fn setup(mesh: Mesh, problem: Problem, pe_k: usize) -> Result<Setup> {
    let fwd = problem.linear_forward(&mesh)?;
    let ctx = GraphContext::new(&mesh, pe_k)?;
    Ok(Setup { mesh, ctx, fwd })
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let data = load_dataset(&a.data, a.problem.resolve()?)?;
    let unroll = a.unroll.apply(UnrollConfig::default())?;
    let s = setup(load_mesh(&a.mesh)?, data.problem, unroll.pe_k)?;
    let cfg = TrainConfig {
        model: a.model,
        epochs: a.epochs,
        lr: a.lr,
        unroll,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let outcome = train(&s.ctx, &s.fwd, &data, &cfg, |r| {
        log::info!("epoch {} train {:.5} val {:.5}", r.epoch, r.train_loss, r.val_mse);
    })?;
    outcome
        .params
        .save(&a.out)
        .with_context(|| format!("writing checkpoint {}", a.out.display()))?;
    write_text(&with_suffix(&a.out, ".config"), &cfg.unroll.to_text())?;
    write_text(&with_suffix(&a.out, ".curve.csv"), &outcome.curve_csv())?;
    if outcome.diverged {
        bail!(
            "training hit a non-finite loss; checkpoint of epoch {} written to {}",
            outcome.best_epoch,
            a.out.display()
        );
    }
    log::info!(
        "best epoch {} (validation mse {:.5}), {} parameters -> {}",
        outcome.best_epoch,
        outcome.best_val_mse,
        outcome.params.count(),
        a.out.display()
    );
    Ok(())
}

fn load_unroll(sel: &ModelSel, checkpoint: Option<&Path>) -> Result<UnrollConfig> {
    let base = match checkpoint.map(|c| with_suffix(c, ".config")) {
        Some(p) if p.exists() => {
            let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
            UnrollConfig::parse_text(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        _ => UnrollConfig::default(),
    };
    sel.unroll.apply(base)
}

/// Builds the model and its graph context. `data` is needed to fit the
/// Laplacian weight when no checkpoint is given.
fn build_model(sel: &ModelSel, mesh: Mesh, problem: Problem, data: Option<&Dataset>) -> Result<(Model, Setup)> {
    let unroll = load_unroll(sel, sel.checkpoint.as_deref())?;
    match (&sel.checkpoint, sel.baseline) {
        (Some(path), _) => {
            let params = RegularizerParams::load(path)
                .with_context(|| format!("reading checkpoint {}", path.display()))?;
            let s = setup(mesh, problem, unroll.pe_k)?;
            if params.kind.is_unrolled() && params.hidden != unroll.hidden {
                bail!("checkpoint hidden width {} does not match its config", params.hidden);
            }
            let model = Model::from_checkpoint(params, unroll, &s.ctx, &s.fwd)?;
            Ok((model, s))
        }
        (None, Some(Baseline::Zero)) => Ok((Model::Zero, setup(mesh, problem, unroll.pe_k)?)),
        (None, Some(Baseline::Laplacian)) => {
            let data = data.context("the Laplacian baseline needs --data to choose its weight")?;
            let s = setup(mesh, problem, unroll.pe_k)?;
            let model = fit_laplacian(&s.ctx, &s.fwd, data)?;
            if let Model::Laplacian(b) = &model {
                log::info!("laplacian weight {:e}", b.alpha);
            }
            Ok((model, s))
        }
        (None, None) => bail!("give --checkpoint or --baseline"),
    }
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let data = load_dataset(&a.data, a.problem.resolve()?)?;
    let (model, s) = build_model(&a.model, load_mesh(&a.mesh)?, data.problem, Some(&data))?;
    let report = evaluate(&model, &s.ctx, &s.fwd, &data, a.split.into())?;
    log::info!(
        "{}: mse {:.5} (±{:.5}), data-fit {:e} (±{:e}), {:.2}s",
        report.label,
        report.mean.mse,
        report.std.mse,
        report.mean.data_fit,
        report.std.data_fit,
        report.wall_clock_secs
    );
    let csv = report.to_csv();
    match &a.out {
        Some(p) => write_text(p, &csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn reconstruct_cmd(a: ReconstructArgs) -> Result<()> {
    let requested = a.problem.resolve()?;
    let data = a.data.as_deref().map(|p| load_dataset(p, requested)).transpose()?;
    let problem = match (&data, requested) {
        (Some(d), _) => d.problem,
        (None, Some(p)) => p,
        (None, None) => bail!("--problem is required without --data"),
    };
    let y = match (&a.obs, &data) {
        (Some(path), _) => load_vector(path).with_context(|| format!("reading observation {}", path.display()))?,
        (None, Some(d)) => {
            let split = d.split(a.split.into());
            let s = split
                .get(a.sample)
                .with_context(|| format!("sample {} out of range ({} in split)", a.sample, split.len()))?;
            s.y.clone()
        }
        (None, None) => bail!("give --obs or --data"),
    };
    let (model, s) = build_model(&a.model, load_mesh(&a.mesh)?, problem, data.as_ref())?;
    let x = model.predict(&s.ctx, &s.fwd, &y)?;
    save_vector(&a.out, &x).with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(img) = &a.image {
        save_pgm(img, &render_field(&s.mesh, &x, a.image_size)?)
            .with_context(|| format!("writing {}", img.display()))?;
    }
    log::info!("{} field of {} nodes -> {}", model.label(), x.len(), a.out.display());
    Ok(())
}

fn report_cmd(a: ReportArgs) -> Result<()> {
    let reports = a
        .reports
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let label = p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
            EvalReport::parse_csv(label, &text).with_context(|| format!("parsing {}", p.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    let table = comparison_table(&reports);
    match &a.out {
        Some(p) => write_text(p, &table),
        None => {
            print!("{table}");
            Ok(())
        }
    }
}
