//! Training, evaluation and file formats for the end-to-end workflow.

use std::fmt::Write as _;
use std::io::{BufRead, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::AdamState;
use crate::datagen::{Dataset, Sample, Split};
use crate::error::{check_dim, Error, Result};
use crate::exec;
use crate::forward::LinearForward;
use crate::mesh::Mesh;
use crate::regularizer::{
    loss_and_gradient, mean_squared_error, reconstruct, select_alpha, GraphContext, LaplacianBaseline, ModelKind,
    RegularizerParams, UnrollConfig, GCN_HIDDEN,
};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub epochs: usize,
    pub lr: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Early stopping is not considered before this many epochs.
    pub min_epochs: usize,
    pub unroll: UnrollConfig,
    pub seed: u64,
    /// Per-sample gradients longer than this are rescaled to this length
    /// before the Adam step. `f64::INFINITY` disables clipping.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Acmp,
            epochs: 200,
            lr: 1e-3,
            patience: 20,
            min_epochs: 50,
            unroll: UnrollConfig::default(),
            seed: 0,
            clip_norm: DEFAULT_CLIP_NORM,
        }
    }
}

/// Typical per-sample gradient norms of the unrolled models are O(1). The
/// gradient of twenty CGLS steps on an ill-conditioned operator is rough on
/// tiny parameter scales, and one sample occasionally returns a norm
/// 10⁴–10⁶ times larger. Unclipped, that single step fills Adam's moments
/// and training does not recover.
pub const DEFAULT_CLIP_NORM: f64 = 10.0;

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be at least 1".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidArgument(format!("learning rate {} must be positive", self.lr)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::InvalidArgument(format!("clip norm {} must be positive", self.clip_norm)));
        }
        self.unroll.validate()
    }

    /// Hidden width used for the model kind.
    pub fn hidden(&self) -> usize {
        match self.model {
            ModelKind::Gcn => GCN_HIDDEN,
            _ => self.unroll.hidden,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mse: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the best validation error.
    pub params: RegularizerParams,
    pub curve: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    /// Training stopped on a non-finite loss.
    pub diverged: bool,
}

impl TrainOutcome {
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_mse\n");
        for r in &self.curve {
            let _ = writeln!(out, "{},{:e},{:e}", r.epoch, r.train_loss, r.val_mse);
        }
        out
    }
}

fn pairs<'a>(samples: &[&'a Sample]) -> Vec<(&'a [f64], &'a [f64])> {
    samples.iter().map(|s| (s.x.as_slice(), s.y.as_slice())).collect()
}

fn check_dataset(dataset: &Dataset, forward: &LinearForward) -> Result<()> {
    check_dim("dataset nodes", forward.num_nodes(), dataset.num_nodes)?;
    check_dim("dataset observations", forward.obs_dim(), dataset.obs_dim)
}

/// Trains a model on the train split, selecting on the validation split.
///
/// Learned models take one Adam step per training sample in a seeded
/// shuffled order. The Laplacian baseline only selects its penalty weight.
/// `progress` is called after every epoch.
pub fn train(
    ctx: &GraphContext,
    forward: &LinearForward,
    dataset: &Dataset,
    config: &TrainConfig,
    mut progress: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    check_dataset(dataset, forward)?;
    let train_set = dataset.split(Split::Train);
    let val_set = dataset.split(Split::Val);
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::InvalidArgument("training needs train and validation samples".into()));
    }
    if config.model == ModelKind::Laplacian {
        let (alpha, scores) = select_alpha(forward, ctx.laplacian(), &pairs(&val_set))?;
        let best = scores.iter().find(|(a, _)| *a == alpha).map_or(f64::NAN, |s| s.1);
        let mut params = RegularizerParams::zeros(ModelKind::Laplacian, 0, 0);
        params.values[0] = alpha;
        return Ok(TrainOutcome {
            params,
            curve: Vec::new(),
            best_epoch: 0,
            best_val_mse: best,
            diverged: false,
        });
    }
    let mut params = RegularizerParams::init(config.model, config.hidden(), ctx.pe_dim(), config.seed);
    let mut adam = AdamState::new(params.count(), config.lr);
    let model = |p: &RegularizerParams| Model::Learned {
        params: p.clone(),
        unroll: config.unroll.clone(),
    };
    let mut best = (params.clone(), mean_mse(&model(&params), ctx, forward, &val_set)?, 0);
    let mut curve = Vec::new();
    let mut diverged = false;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    'epochs: for epoch in 1..=config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &k in &order {
            let s = train_set[k];
            match loss_and_gradient(&params, ctx, forward, &s.y, &s.x, &config.unroll) {
                Ok((loss, mut grad)) if grad.iter().all(|g| g.is_finite()) => {
                    total += loss;
                    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                    if norm > config.clip_norm {
                        log::debug!("epoch {epoch}: clipping gradient norm {norm:e}");
                        let f = config.clip_norm / norm;
                        grad.iter_mut().for_each(|g| *g *= f);
                    }
                    adam.step(&mut params.values, &grad)?;
                }
                Ok(_) | Err(Error::NonFinite(_)) => {
                    log::error!("non-finite loss or gradient in epoch {epoch}; stopping");
                    diverged = true;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        let val_mse = mean_mse(&model(&params), ctx, forward, &val_set)?;
        let record = EpochRecord {
            epoch,
            train_loss: total / order.len() as f64,
            val_mse,
        };
        progress(&record);
        curve.push(record);
        if !val_mse.is_finite() {
            diverged = true;
            break;
        }
        if val_mse < best.1 {
            best = (params.clone(), val_mse, epoch);
        } else if epoch >= config.min_epochs && epoch - best.2 >= config.patience {
            log::info!("early stop at epoch {epoch}, best epoch {}", best.2);
            break;
        }
    }
    Ok(TrainOutcome {
        params: best.0,
        curve,
        best_epoch: best.2,
        best_val_mse: best.1,
        diverged,
    })
}

fn mean_mse(model: &Model, ctx: &GraphContext, forward: &LinearForward, samples: &[&Sample]) -> Result<f64> {
    let errs = exec::try_map_slice(samples, |s| {
        let xh = model.predict(ctx, forward, &s.y)?;
        Ok::<f64, Error>(mean_squared_error(&xh, &s.x))
    })?;
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

/// Anything that maps an observation to a nodal field.
#[derive(Clone, Debug)]
pub enum Model {
    Learned {
        params: RegularizerParams,
        unroll: UnrollConfig,
    },
    Laplacian(LaplacianBaseline),
    /// Always returns the zero field.
    Zero,
}

impl Model {
    /// Model for a checkpoint; a Laplacian checkpoint holds its weight.
    pub fn from_checkpoint(
        params: RegularizerParams,
        unroll: UnrollConfig,
        ctx: &GraphContext,
        forward: &LinearForward,
    ) -> Result<Self> {
        if params.kind == ModelKind::Laplacian {
            return Ok(Self::Laplacian(LaplacianBaseline::new(
                forward,
                ctx.laplacian(),
                params.values[0],
            )?));
        }
        Ok(Self::Learned { params, unroll })
    }

    pub fn label(&self) -> String {
        match self {
            Self::Learned { params, .. } => params.kind.to_string(),
            Self::Laplacian(_) => "laplacian".into(),
            Self::Zero => "zero".into(),
        }
    }

    pub fn predict(&self, ctx: &GraphContext, forward: &LinearForward, y: &[f64]) -> Result<Vec<f64>> {
        match self {
            Self::Learned { params, unroll } => Ok(reconstruct(params, ctx, forward, y, unroll)?.x),
            Self::Laplacian(base) => base.solve(forward, y),
            Self::Zero => Ok(vec![0.0; forward.num_nodes()]),
        }
    }
}

/// Laplacian baseline with its weight chosen on the validation split.
pub fn fit_laplacian(ctx: &GraphContext, forward: &LinearForward, dataset: &Dataset) -> Result<Model> {
    let val = dataset.split(Split::Val);
    let (alpha, _) = select_alpha(forward, ctx.laplacian(), &pairs(&val))?;
    Ok(Model::Laplacian(LaplacianBaseline::new(forward, ctx.laplacian(), alpha)?))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleMetrics {
    pub mse: f64,
    pub data_fit: f64,
}

/// Per-sample and aggregate reconstruction metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub label: String,
    pub samples: Vec<SampleMetrics>,
    pub mean: SampleMetrics,
    /// Population standard deviation over samples.
    pub std: SampleMetrics,
    /// Not written to the CSV, which must be reproducible.
    pub wall_clock_secs: f64,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count().max(1) as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl EvalReport {
    pub fn from_samples(label: impl Into<String>, samples: Vec<SampleMetrics>, wall_clock_secs: f64) -> Self {
        let (mm, sm) = mean_std(samples.iter().map(|s| s.mse));
        let (mf, sf) = mean_std(samples.iter().map(|s| s.data_fit));
        Self {
            label: label.into(),
            samples,
            mean: SampleMetrics { mse: mm, data_fit: mf },
            std: SampleMetrics { mse: sm, data_fit: sf },
            wall_clock_secs,
        }
    }

    /// CSV with one row per sample followed by `mean` and `std` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,mse,data_fit\n");
        for (i, s) in self.samples.iter().enumerate() {
            let _ = writeln!(out, "{i},{:e},{:e}", s.mse, s.data_fit);
        }
        let _ = writeln!(out, "mean,{:e},{:e}", self.mean.mse, self.mean.data_fit);
        let _ = writeln!(out, "std,{:e},{:e}", self.std.mse, self.std.data_fit);
        out
    }

    /// Parses [`EvalReport::to_csv`] output, recomputing the aggregates from
    /// the per-sample rows.
    pub fn parse_csv(label: impl Into<String>, text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("row,mse,data_fit") {
            return Err(Error::Parse("report must start with `row,mse,data_fit`".into()));
        }
        let mut samples = Vec::new();
        for line in lines {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 3 {
                return Err(Error::Parse(format!("bad report row `{line}`")));
            }
            if f[0] == "mean" || f[0] == "std" {
                continue;
            }
            let num = |s: &str| s.trim().parse::<f64>().map_err(|e| Error::Parse(format!("report value `{s}`: {e}")));
            samples.push(SampleMetrics {
                mse: num(f[1])?,
                data_fit: num(f[2])?,
            });
        }
        Ok(Self::from_samples(label, samples, 0.0))
    }
}

/// Metrics of `model` on a dataset split: per-node squared error and
/// per-entry data misfit `‖A x̂ − (y − y0)‖²/m`.
pub fn evaluate(
    model: &Model,
    ctx: &GraphContext,
    forward: &LinearForward,
    dataset: &Dataset,
    split: Split,
) -> Result<EvalReport> {
    check_dataset(dataset, forward)?;
    let start = std::time::Instant::now();
    let samples = dataset.split(split);
    let metrics = exec::try_map_slice(&samples, |s| {
        let xh = model.predict(ctx, forward, &s.y)?;
        let ax = forward.jacobian().spmv(&xh)?;
        let r = forward.residual_data(&s.y)?;
        let fit = ax.iter().zip(&r).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / r.len().max(1) as f64;
        Ok::<_, Error>(SampleMetrics {
            mse: mean_squared_error(&xh, &s.x),
            data_fit: fit,
        })
    })?;
    Ok(EvalReport::from_samples(
        model.label(),
        metrics,
        start.elapsed().as_secs_f64(),
    ))
}

fn format_value(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-3 || v.abs() >= 1e4) {
        format!("{v:.3e}")
    } else {
        format!("{v:.4}")
    }
}

/// Side-by-side table: one row per report, `mean (±std)` per metric.
pub fn comparison_table(reports: &[EvalReport]) -> String {
    let mut out = String::from("method,mse,data_fit\n");
    for r in reports {
        let _ = writeln!(
            out,
            "{},{} (±{}),{} (±{})",
            r.label,
            format_value(r.mean.mse),
            format_value(r.std.mse),
            format_value(r.mean.data_fit),
            format_value(r.std.data_fit)
        );
    }
    out
}

/// Writes a nodal field as `pdeinvreg-vec v1 <len>` plus little-endian
/// doubles.
pub fn write_vector(mut w: impl Write, v: &[f64]) -> Result<()> {
    writeln!(w, "pdeinvreg-vec v1 {}", v.len())?;
    for x in v {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_vector(r: impl Read) -> Result<Vec<f64>> {
    let mut r = std::io::BufReader::new(r);
    let mut header = String::new();
    r.read_line(&mut header)?;
    let f: Vec<&str> = header.split_whitespace().collect();
    if f.len() != 3 || f[0] != "pdeinvreg-vec" || f[1] != "v1" {
        return Err(Error::Parse(format!("bad vector header `{}`", header.trim_end())));
    }
    let len = f[2]
        .parse::<usize>()
        .map_err(|e| Error::Parse(format!("vector length: {e}")))?;
    crate::regularizer::read_f64s(&mut r, len)
}

pub fn save_vector(path: impl AsRef<Path>, v: &[f64]) -> Result<()> {
    let mut buf = Vec::new();
    write_vector(&mut buf, v)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_vector(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    read_vector(std::fs::File::open(path)?)
}

/// Rasterizes a nodal field onto a `size × size` grid over the mesh bounding
/// box by barycentric interpolation. Pixels outside the mesh are black; the
/// field range maps linearly to grey levels 1..=255.
pub fn render_field(mesh: &Mesh, field: &[f64], size: usize) -> Result<image::GrayImage> {
    check_dim("field", mesh.num_nodes(), field.len())?;
    if size == 0 {
        return Err(Error::InvalidArgument("image size must be positive".into()));
    }
    let nodes = mesh.nodes();
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in nodes {
        for d in 0..2 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    let (fmin, fmax) = field
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if fmax > fmin { fmax - fmin } else { 1.0 };
    let px = |d: usize, t: f64| (t - lo[d]) / (hi[d] - lo[d]).max(f64::MIN_POSITIVE) * (size - 1) as f64;
    let mut img = image::GrayImage::new(size as u32, size as u32);
    for t in mesh.elements() {
        let p = t.map(|i| nodes[i]);
        let x0 = px(0, p.iter().map(|q| q[0]).fold(f64::INFINITY, f64::min)).floor().max(0.0) as usize;
        let x1 = (px(0, p.iter().map(|q| q[0]).fold(f64::NEG_INFINITY, f64::max)).ceil() as usize).min(size - 1);
        let y0 = px(1, p.iter().map(|q| q[1]).fold(f64::INFINITY, f64::min)).floor().max(0.0) as usize;
        let y1 = (px(1, p.iter().map(|q| q[1]).fold(f64::NEG_INFINITY, f64::max)).ceil() as usize).min(size - 1);
        let det = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]);
        for j in y0..=y1 {
            for i in x0..=x1 {
                let x = lo[0] + (hi[0] - lo[0]) * i as f64 / (size - 1).max(1) as f64;
                let y = lo[1] + (hi[1] - lo[1]) * j as f64 / (size - 1).max(1) as f64;
                let l1 = ((x - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (y - p[0][1])) / det;
                let l2 = ((p[1][0] - p[0][0]) * (y - p[0][1]) - (x - p[0][0]) * (p[1][1] - p[0][1])) / det;
                let l0 = 1.0 - l1 - l2;
                let eps = -1e-12;
                if l0 >= eps && l1 >= eps && l2 >= eps {
                    let v = l0 * field[t[0]] + l1 * field[t[1]] + l2 * field[t[2]];
                    let g = 1.0 + 254.0 * ((v - fmin) / span).clamp(0.0, 1.0);
                    // image rows run top to bottom
                    img.put_pixel(i as u32, (size - 1 - j) as u32, image::Luma([g.round() as u8]));
                }
            }
        }
    }
    Ok(img)
}

/// Writes [`render_field`] output as a binary portable graymap.
pub fn save_pgm(path: impl AsRef<Path>, img: &image::GrayImage) -> Result<()> {
    use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
    use image::ImageEncoder;
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    PnmEncoder::new(file)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(img.as_raw(), img.width(), img.height(), image::ExtendedColorType::L8)?;
    Ok(())
}
