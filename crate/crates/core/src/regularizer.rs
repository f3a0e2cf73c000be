//! Learned graph regularizers and the classical baselines.
//!
//! The learned models (GRAND and ACMP) act inside an unrolled reconstruction:
//! each outer step runs CGLS on the data-fit problem, encodes the current
//! iterate together with positional features, evolves the features with a
//! graph diffusion (attention frozen for the whole block), and adds the
//! decoded correction to the iterate. Everything is recorded on an
//! [`autodiff::Tape`](crate::autodiff::Tape) so training can differentiate
//! through the whole chain.
//!
//! The GCN baseline maps a nodal embedding of the data straight to the
//! coefficient field; the Laplacian baseline solves the Tikhonov problem with
//! the graph Laplacian as penalty.

use std::fmt;
use std::io::{BufRead, Read, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{cgls_recorded, EdgeIndex, Tape, Var};
use crate::error::{check_dim, Error, Result};
use crate::forward::{LinearForward, ObservationKind};
use crate::mesh::{check_permutation, graph_laplacian, positional_encoding, Graph, Mesh, PositionalEncoding};
use crate::sparse::{cgls, CsrMatrix, MatrixOperator};

pub const DEFAULT_HIDDEN: usize = 8;
pub const DEFAULT_EIGENVECTORS: usize = 8;
pub const GCN_HIDDEN: usize = 16;
pub const GCN_LAYERS: usize = 4;
/// Extra GCN input channels besides positional features: data, mask, mean.
const GCN_DATA_CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Grand,
    Acmp,
    Gcn,
    Laplacian,
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Grand => "grand",
            Self::Acmp => "acmp",
            Self::Gcn => "gcn",
            Self::Laplacian => "laplacian",
        }
    }

    /// Whether the model runs inside the unrolled reconstruction.
    pub fn is_unrolled(&self) -> bool {
        matches!(self, Self::Grand | Self::Acmp)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grand" => Ok(Self::Grand),
            "acmp" => Ok(Self::Acmp),
            "gcn" => Ok(Self::Gcn),
            "laplacian" => Ok(Self::Laplacian),
            other => Err(Error::Parse(format!("unknown model kind `{other}`"))),
        }
    }
}

/// How the decoded network output updates the iterate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdateRule {
    /// `z ← z + decode(X)`.
    Residual,
    /// `z ← 2z − z_prev + decode(X)`.
    SecondOrder,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnrollConfig {
    pub n_unroll: usize,
    pub cgls_iters: usize,
    pub gnn_steps: usize,
    pub dt: f64,
    pub hidden: usize,
    /// Laplacian eigenvectors in the positional encoding.
    pub pe_k: usize,
    pub update: UpdateRule,
}

impl Default for UnrollConfig {
    fn default() -> Self {
        Self {
            n_unroll: 15,
            cgls_iters: 20,
            gnn_steps: 32,
            dt: 0.25,
            hidden: DEFAULT_HIDDEN,
            pe_k: DEFAULT_EIGENVECTORS,
            update: UpdateRule::Residual,
        }
    }
}

impl UnrollConfig {
    /// Positional feature columns: coordinates plus eigenvectors.
    pub fn pe_dim(&self) -> usize {
        2 + self.pe_k
    }

    pub fn validate(&self) -> Result<()> {
        if self.cgls_iters == 0 || self.gnn_steps == 0 || self.hidden == 0 {
            return Err(Error::InvalidArgument(
                "cgls iterations, gnn steps and hidden width must be at least 1".into(),
            ));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::InvalidArgument(format!("step size {} must be positive", self.dt)));
        }
        Ok(())
    }

    /// `key value` lines, one per field.
    pub fn to_text(&self) -> String {
        let update = match self.update {
            UpdateRule::Residual => "residual",
            UpdateRule::SecondOrder => "second-order",
        };
        format!(
            "n_unroll {}\ncgls_iters {}\ngnn_steps {}\ndt {}\nhidden {}\npe_k {}\nupdate {update}\n",
            self.n_unroll, self.cgls_iters, self.gnn_steps, self.dt, self.hidden, self.pe_k
        )
    }

    /// Parses [`UnrollConfig::to_text`]; missing keys keep their defaults.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (key, value) = line
                .split_once(char::is_whitespace)
                .ok_or_else(|| Error::Parse(format!("config line without value: {line}")))?;
            let value = value.trim();
            let bad = |_| Error::Parse(format!("bad value for {key}: {value}"));
            match key {
                "n_unroll" => c.n_unroll = value.parse().map_err(bad)?,
                "cgls_iters" => c.cgls_iters = value.parse().map_err(bad)?,
                "gnn_steps" => c.gnn_steps = value.parse().map_err(bad)?,
                "dt" => c.dt = value.parse().map_err(|_| Error::Parse(format!("bad value for dt: {value}")))?,
                "hidden" => c.hidden = value.parse().map_err(bad)?,
                "pe_k" => c.pe_k = value.parse().map_err(bad)?,
                "update" => {
                    c.update = match value {
                        "residual" => UpdateRule::Residual,
                        "second-order" => UpdateRule::SecondOrder,
                        _ => return Err(Error::Parse(format!("unknown update rule {value}"))),
                    }
                }
                _ => return Err(Error::Parse(format!("unknown config key {key}"))),
            }
        }
        c.validate()?;
        Ok(c)
    }
}

/// A named block of the flat parameter vector, stored row-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub name: &'static str,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Segment layout of the parameter vector for a model.
pub fn layout(kind: ModelKind, hidden: usize, pe_dim: usize) -> Vec<Segment> {
    let mut shapes: Vec<(&'static str, usize, usize)> = Vec::new();
    match kind {
        ModelKind::Grand | ModelKind::Acmp => {
            let h = hidden;
            shapes.extend([
                ("encoder.w1", 1 + pe_dim, h),
                ("encoder.b1", 1, h),
                ("encoder.w2", h, h),
                ("encoder.b2", 1, h),
                ("attention.wk", h, h),
                ("attention.wq", h, h),
            ]);
            if kind == ModelKind::Acmp {
                shapes.extend([("acmp.alpha", 1, h), ("acmp.delta", 1, h)]);
            }
            shapes.extend([("decoder.w", h, 1), ("decoder.b", 1, 1)]);
        }
        ModelKind::Gcn => {
            let h = hidden;
            shapes.extend([
                ("gcn.w0", GCN_DATA_CHANNELS + pe_dim, h),
                ("gcn.b0", 1, h),
                ("gcn.w1", h, h),
                ("gcn.b1", 1, h),
                ("gcn.w2", h, h),
                ("gcn.b2", 1, h),
                ("gcn.w3", h, 1),
                ("gcn.b3", 1, 1),
            ]);
        }
        ModelKind::Laplacian => shapes.push(("laplacian.alpha", 1, 1)),
    }
    let mut offset = 0;
    shapes
        .into_iter()
        .map(|(name, rows, cols)| {
            let s = Segment {
                name,
                offset,
                rows,
                cols,
            };
            offset += rows * cols;
            s
        })
        .collect()
}

/// Flat trainable parameter vector with its segment layout.
#[derive(Clone, Debug, PartialEq)]
pub struct RegularizerParams {
    pub kind: ModelKind,
    pub hidden: usize,
    pub pe_dim: usize,
    pub values: Vec<f64>,
}

impl RegularizerParams {
    pub fn zeros(kind: ModelKind, hidden: usize, pe_dim: usize) -> Self {
        let n = layout(kind, hidden, pe_dim).iter().map(Segment::len).sum();
        Self {
            kind,
            hidden,
            pe_dim,
            values: vec![0.0; n],
        }
    }

    /// Seeded initialization: Glorot-uniform weights, zero biases, small
    /// decoder, ACMP diffusion rates `α` spread between 0.05 and 3
    /// and a weak double-well `δ = 0.1`.
    pub fn init(kind: ModelKind, hidden: usize, pe_dim: usize, seed: u64) -> Self {
        let mut p = Self::zeros(kind, hidden, pe_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for seg in p.layout() {
            let values = &mut p.values[seg.range()];
            let name = seg.name;
            if name == "acmp.alpha" && values.len() > 1 {
                // Geometric spread of diffusion rates, so the channels start
                // out as heat kernels on different length scales.
                let last = (values.len() - 1) as f64;
                for (c, v) in values.iter_mut().enumerate() {
                    *v = ALPHA_MIN * (ALPHA_MAX / ALPHA_MIN).powf(c as f64 / last);
                }
            } else if name == "acmp.alpha" || name == "laplacian.alpha" {
                values.fill(1.0);
            } else if name == "acmp.delta" {
                values.fill(0.1);
            } else if name.contains(".w") {
                let mut bound = (6.0 / (seg.rows + seg.cols) as f64).sqrt();
                if name == "decoder.w" || name == "gcn.w3" {
                    bound *= 0.1;
                }
                values.iter_mut().for_each(|v| *v = rng.random_range(-bound..bound));
            }
        }
        p
    }

    pub fn layout(&self) -> Vec<Segment> {
        layout(self.kind, self.hidden, self.pe_dim)
    }

    pub fn count(&self) -> usize {
        self.values.len()
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        self.layout()
            .into_iter()
            .find(|s| s.name == name)
            .map(|s| &self.values[s.range()])
    }

    pub fn segment_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let seg = self.layout().into_iter().find(|s| s.name == name)?;
        Some(&mut self.values[seg.range()])
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        writeln!(
            w,
            "pdeinvreg-ckpt v1 {} {} {} {}",
            self.kind,
            self.hidden,
            self.pe_dim,
            self.values.len()
        )?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = std::io::BufReader::new(r);
        let mut header = String::new();
        r.read_line(&mut header)?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 6 || fields[0] != "pdeinvreg-ckpt" || fields[1] != "v1" {
            return Err(Error::Parse(format!("bad checkpoint header `{}`", header.trim_end())));
        }
        let kind: ModelKind = fields[2].parse()?;
        let num = |s: &str| s.parse::<usize>().map_err(|e| Error::Parse(format!("checkpoint header: {e}")));
        let (hidden, pe_dim, count) = (num(fields[3])?, num(fields[4])?, num(fields[5])?);
        let expected: usize = layout(kind, hidden, pe_dim).iter().map(Segment::len).sum();
        check_dim("checkpoint parameter count", expected, count)?;
        let values = read_f64s(&mut r, count)?;
        Ok(Self {
            kind,
            hidden,
            pe_dim,
            values,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

/// Reads exactly `count` little-endian doubles and rejects trailing bytes.
pub(crate) fn read_f64s(r: &mut impl Read, count: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; count * 8];
    r.read_exact(&mut bytes)
        .map_err(|e| Error::Parse(format!("expected {count} values: {e}")))?;
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Parse("trailing bytes after payload".into()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

/// Mesh-derived data shared by every reconstruction on that mesh.
#[derive(Clone, Debug)]
pub struct GraphContext {
    num_nodes: usize,
    edges: Arc<EdgeIndex>,
    /// Graph with self-loops and symmetric-normalized weights, for the GCN.
    gcn_edges: Arc<EdgeIndex>,
    gcn_weights: Vec<f64>,
    /// Row-major `N × pe_dim` network input features.
    features: Vec<f64>,
    pe_dim: usize,
    laplacian: CsrMatrix,
}

impl GraphContext {
    pub fn new(mesh: &Mesh, pe_k: usize) -> Result<Self> {
        let pe = positional_encoding(mesh, pe_k)?;
        Ok(Self::from_parts(&mesh.to_graph(), &pe))
    }

    /// Builds the context from a graph and its positional encoding.
    /// Eigenvector columns are rescaled by `√N` so their entries are O(1).
    pub fn from_parts(graph: &Graph, pe: &PositionalEncoding) -> Self {
        let n = graph.num_nodes();
        assert_eq!(pe.rows, n, "positional encoding rows must match the graph");
        let scale = (n as f64).sqrt();
        let mut features = pe.data.clone();
        for i in 0..n {
            for c in 2..pe.cols {
                features[i * pe.cols + c] *= scale;
            }
        }
        let edges = Arc::new(EdgeIndex::from_graph(graph));
        let (gcn_edges, gcn_weights) = normalized_adjacency(graph);
        Self {
            num_nodes: n,
            edges,
            gcn_edges: Arc::new(gcn_edges),
            gcn_weights,
            features,
            pe_dim: pe.cols,
            laplacian: graph_laplacian(graph),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn pe_dim(&self) -> usize {
        self.pe_dim
    }

    pub fn edges(&self) -> &Arc<EdgeIndex> {
        &self.edges
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn laplacian(&self) -> &CsrMatrix {
        &self.laplacian
    }
}

/// `D^{-1/2}(A + I)D^{-1/2}` as a self-looped edge list with weights.
fn normalized_adjacency(graph: &Graph) -> (EdgeIndex, Vec<f64>) {
    let n = graph.num_nodes();
    let deg: Vec<f64> = (0..n).map(|i| (graph.degree(i) + 1) as f64).collect();
    let mut offsets = vec![0];
    let (mut sources, mut targets, mut weights) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..n {
        let mut nbrs: Vec<usize> = graph.neighbors(i).to_vec();
        nbrs.push(i);
        nbrs.sort_unstable();
        for j in nbrs {
            sources.push(i);
            targets.push(j);
            weights.push(1.0 / (deg[i] * deg[j]).sqrt());
        }
        offsets.push(targets.len());
    }
    (
        EdgeIndex {
            num_nodes: n,
            offsets,
            sources,
            targets,
        },
        weights,
    )
}

/// Parameter segments recorded on a tape.
struct ThetaVars {
    vars: Vec<(&'static str, Var)>,
}

impl ThetaVars {
    fn new(tape: &mut Tape, theta: Var, segments: &[Segment]) -> Result<Self> {
        let vars = segments
            .iter()
            .map(|s| Ok((s.name, tape.slice(theta, s.offset, s.rows, s.cols)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { vars })
    }

    fn get(&self, name: &str) -> Var {
        self.vars
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, v)| *v)
            .unwrap_or_else(|| panic!("segment {name} missing from layout"))
    }
}

/// Two-layer MLP on `[z ‖ pe]`: tanh after the first layer, linear second.
fn record_encode(tape: &mut Tape, th: &ThetaVars, z: Var, pe: Var) -> Result<Var> {
    let input = tape.concat_cols(&[z, pe])?;
    let h1 = tape.linear(input, th.get("encoder.w1"), Some(th.get("encoder.b1")))?;
    let h1 = tape.tanh(h1)?;
    tape.linear(h1, th.get("encoder.w2"), Some(th.get("encoder.b2")))
}

/// Per-edge attention `softmax_j((W_K x_i)·(W_Q x_j)/√h)` over each node's
/// neighbours.
fn record_attention(tape: &mut Tape, th: &ThetaVars, x: Var, edges: &Arc<EdgeIndex>) -> Result<Var> {
    let h = x.cols();
    let keys = tape.linear(x, th.get("attention.wk"), None)?;
    let queries = tape.linear(x, th.get("attention.wq"), None)?;
    let src = Arc::new(edges.sources.clone());
    let dst = Arc::new(edges.targets.clone());
    let ki = tape.edge_gather(keys, &src)?;
    let qj = tape.edge_gather(queries, &dst)?;
    let prod = tape.hadamard(ki, qj)?;
    let scores = tape.row_sum(prod)?;
    let scores = tape.scale(scores, 1.0 / (h as f64).sqrt())?;
    tape.softmax_per_neighborhood(scores, edges)
}

/// Diffusion flux `Σ_j a_ij (x_j − x_i)`, using that attention rows sum to 1.
fn record_flux(tape: &mut Tape, x: Var, attention: Var, edges: &Arc<EdgeIndex>) -> Result<Var> {
    let mixed = tape.edge_weighted_sum(attention, x, edges)?;
    tape.sub(mixed, x)
}

/// One explicit Euler step of attention diffusion.
pub fn record_grand_step(tape: &mut Tape, x: Var, attention: Var, edges: &Arc<EdgeIndex>, dt: f64) -> Result<Var> {
    let flux = record_flux(tape, x, attention, edges)?;
    tape.lincomb(1.0, x, dt, flux)
}

/// One explicit Euler step of Allen-Cahn message passing with `β = 0`:
/// `x + dt (α ⊙ Σ_j a_ij (x_j − x_i) + δ ⊙ x ⊙ (1 − x²))`.
///
/// `α` and `δ` are clamped to `[0, 1/dt]`. A negative reaction coefficient
/// turns the double well into `x³` growth that escapes to infinity in finite
/// time, and once `dt·α > 1` the highest graph frequency can grow by a factor
/// up to `|1 − 2 dt α|` per step.
pub fn record_acmp_step(
    tape: &mut Tape,
    x: Var,
    attention: Var,
    alpha: Var,
    delta: Var,
    edges: &Arc<EdgeIndex>,
    dt: f64,
) -> Result<Var> {
    let alpha = tape.clamp(alpha, 0.0, 1.0 / dt)?;
    let delta = tape.clamp(delta, 0.0, 1.0 / dt)?;
    let flux = record_flux(tape, x, attention, edges)?;
    let flux = tape.scale_cols(flux, alpha)?;
    let reaction = tape.cubic(x)?;
    let reaction = tape.scale_cols(reaction, delta)?;
    let rhs = tape.add(flux, reaction)?;
    tape.lincomb(1.0, x, dt, rhs)
}

/// Outcome of a recorded reconstruction.
#[derive(Clone, Copy, Debug)]
pub struct RecordedReconstruction {
    pub x: Var,
    /// Some CGLS call stopped early on a vanishing search direction.
    pub breakdown: bool,
}

const ALPHA_MIN: f64 = 0.05;
const ALPHA_MAX: f64 = 3.0;

fn check_params(params: &RegularizerParams, ctx: &GraphContext) -> Result<()> {
    check_dim("parameter count", params.layout().iter().map(Segment::len).sum(), params.count())?;
    check_dim("positional feature width", params.pe_dim, ctx.pe_dim)
}

/// Records the unrolled reconstruction from observation residual `data`
/// (`y − y0`) with parameters `theta`.
pub fn record_reconstruct(
    tape: &mut Tape,
    params: &RegularizerParams,
    theta: Var,
    ctx: &GraphContext,
    op: &MatrixOperator,
    data: Var,
    config: &UnrollConfig,
) -> Result<RecordedReconstruction> {
    if !params.kind.is_unrolled() {
        return Err(Error::InvalidArgument(format!("{} is not an unrolled model", params.kind)));
    }
    config.validate()?;
    check_params(params, ctx)?;
    check_dim("parameter vector", params.count(), theta.len())?;
    check_dim("hidden width", config.hidden, params.hidden)?;
    check_dim("forward operator columns", ctx.num_nodes, op.matrix().cols())?;
    check_dim("observation residual", op.matrix().rows(), data.len())?;
    let n = ctx.num_nodes;
    let th = ThetaVars::new(tape, theta, &params.layout())?;
    let pe = tape.constant(ctx.features.clone(), n, ctx.pe_dim);
    let mut z = tape.constant(vec![0.0; n], n, 1);
    let mut z_prev = z;
    let mut breakdown = false;
    for _ in 0..config.n_unroll {
        let run = cgls_recorded(tape, op, data, z, config.cgls_iters)?;
        breakdown |= run.breakdown;
        let mut x = record_encode(tape, &th, run.x, pe)?;
        let attention = record_attention(tape, &th, x, &ctx.edges)?;
        for _ in 0..config.gnn_steps {
            x = match params.kind {
                ModelKind::Grand => record_grand_step(tape, x, attention, &ctx.edges, config.dt)?,
                _ => record_acmp_step(
                    tape,
                    x,
                    attention,
                    th.get("acmp.alpha"),
                    th.get("acmp.delta"),
                    &ctx.edges,
                    config.dt,
                )?,
            };
        }
        let correction = tape.linear(x, th.get("decoder.w"), Some(th.get("decoder.b")))?;
        let next = match config.update {
            UpdateRule::Residual => tape.add(run.x, correction)?,
            UpdateRule::SecondOrder => {
                let momentum = tape.lincomb(2.0, run.x, -1.0, z_prev)?;
                tape.add(momentum, correction)?
            }
        };
        z_prev = z;
        z = next;
    }
    Ok(RecordedReconstruction { x: z, breakdown })
}

/// Nodal GCN input: data channel, observation mask and global data mean,
/// followed by positional features (row-major `N × (3 + pe_dim)`).
///
/// Vertex observations are placed at their vertices. Other observations are
/// back-projected through `Aᵀ` and scaled by `N/‖A‖_F²`.
pub fn gcn_input(forward: &LinearForward, ctx: &GraphContext, y: &[f64]) -> Result<Vec<f64>> {
    let n = ctx.num_nodes;
    check_dim("gcn input nodes", n, forward.num_nodes())?;
    let r = forward.residual_data(y)?;
    let mean = if r.is_empty() {
        0.0
    } else {
        r.iter().sum::<f64>() / r.len() as f64
    };
    let (data, mask) = match forward.kind() {
        ObservationKind::Vertices(v) => {
            let mut data = vec![0.0; n];
            let mut mask = vec![0.0; n];
            for (k, &i) in v.iter().enumerate() {
                data[i] = r[k];
                mask[i] = 1.0;
            }
            (data, mask)
        }
        _ => {
            let j = forward.jacobian();
            let fro: f64 = j.values().iter().map(|v| v * v).sum();
            let scale = if fro > 0.0 { n as f64 / fro } else { 0.0 };
            let back = forward.operator().adjoint_matrix().spmv(&r)?;
            (back.iter().map(|v| v * scale).collect(), vec![1.0; n])
        }
    };
    let width = GCN_DATA_CHANNELS + ctx.pe_dim;
    let mut out = Vec::with_capacity(n * width);
    for i in 0..n {
        out.extend_from_slice(&[data[i], mask[i], mean]);
        out.extend_from_slice(&ctx.features[i * ctx.pe_dim..(i + 1) * ctx.pe_dim]);
    }
    Ok(out)
}

/// Records the four-layer GCN `H ← tanh(Â H W + b)` (linear last layer).
pub fn record_gcn(
    tape: &mut Tape,
    params: &RegularizerParams,
    theta: Var,
    ctx: &GraphContext,
    input: &[f64],
) -> Result<Var> {
    if params.kind != ModelKind::Gcn {
        return Err(Error::InvalidArgument(format!("{} is not a gcn", params.kind)));
    }
    check_params(params, ctx)?;
    let n = ctx.num_nodes;
    let width = GCN_DATA_CHANNELS + ctx.pe_dim;
    check_dim("gcn input", n * width, input.len())?;
    let th = ThetaVars::new(tape, theta, &params.layout())?;
    let weights = tape.constant(ctx.gcn_weights.clone(), ctx.gcn_weights.len(), 1);
    let mut h = tape.constant(input.to_vec(), n, width);
    for layer in 0..GCN_LAYERS {
        let w = th.get(["gcn.w0", "gcn.w1", "gcn.w2", "gcn.w3"][layer]);
        let b = th.get(["gcn.b0", "gcn.b1", "gcn.b2", "gcn.b3"][layer]);
        let mixed = tape.edge_weighted_sum(weights, h, &ctx.gcn_edges)?;
        h = tape.linear(mixed, w, Some(b))?;
        if layer + 1 < GCN_LAYERS {
            h = tape.tanh(h)?;
        }
    }
    Ok(h)
}

/// Records the prediction of a learned model for observation `y`.
pub fn record_predict(
    tape: &mut Tape,
    params: &RegularizerParams,
    theta: Var,
    ctx: &GraphContext,
    forward: &LinearForward,
    y: &[f64],
    config: &UnrollConfig,
) -> Result<RecordedReconstruction> {
    match params.kind {
        ModelKind::Grand | ModelKind::Acmp => {
            let r = forward.residual_data(y)?;
            let data = tape.constant(r, forward.obs_dim(), 1);
            record_reconstruct(tape, params, theta, ctx, forward.operator(), data, config)
        }
        ModelKind::Gcn => {
            let input = gcn_input(forward, ctx, y)?;
            let x = record_gcn(tape, params, theta, ctx, &input)?;
            Ok(RecordedReconstruction { x, breakdown: false })
        }
        ModelKind::Laplacian => Err(Error::InvalidArgument(
            "the laplacian baseline has no recorded form".into(),
        )),
    }
}

/// Reconstruction from a learned model.
#[derive(Clone, Debug, PartialEq)]
pub struct Reconstruction {
    pub x: Vec<f64>,
    pub breakdown: bool,
}

/// Runs a learned model on observation `y`.
pub fn reconstruct(
    params: &RegularizerParams,
    ctx: &GraphContext,
    forward: &LinearForward,
    y: &[f64],
    config: &UnrollConfig,
) -> Result<Reconstruction> {
    let mut tape = Tape::new();
    let theta = tape.constant(params.values.clone(), params.count(), 1);
    let out = record_predict(&mut tape, params, theta, ctx, forward, y, config)?;
    Ok(Reconstruction {
        x: tape.value(out.x).to_vec(),
        breakdown: out.breakdown,
    })
}

/// Per-node mean squared error `‖x̂ − x‖²/N` and its gradient in θ.
pub fn loss_and_gradient(
    params: &RegularizerParams,
    ctx: &GraphContext,
    forward: &LinearForward,
    y: &[f64],
    x_true: &[f64],
    config: &UnrollConfig,
) -> Result<(f64, Vec<f64>)> {
    check_dim("ground truth", ctx.num_nodes, x_true.len())?;
    let mut tape = Tape::new();
    let theta = tape.leaf(params.values.clone(), params.count(), 1);
    let out = record_predict(&mut tape, params, theta, ctx, forward, y, config)?;
    let target = tape.constant(x_true.to_vec(), x_true.len(), 1);
    let diff = tape.sub(out.x, target)?;
    let sq = tape.dot(diff, diff)?;
    let loss = tape.scale(sq, 1.0 / x_true.len() as f64)?;
    let value = tape.scalar_value(loss);
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss {value}")));
    }
    let grads = tape.backward(loss)?;
    Ok((value, grads.wrt_owned(theta)))
}

/// Restarted CGLS: `n_unroll` calls of `cgls_iters` iterations each, the
/// reconstruction a zero network reduces to.
pub fn iterated_cgls(forward: &LinearForward, y: &[f64], config: &UnrollConfig) -> Result<Vec<f64>> {
    let r = forward.residual_data(y)?;
    let mut z = vec![0.0; forward.num_nodes()];
    for _ in 0..config.n_unroll {
        z = cgls(forward.operator(), &r, &z, config.cgls_iters)?.x;
    }
    Ok(z)
}

/// Tikhonov reconstruction `argmin ‖A x − (y − y0)‖² + α xᵀ L x`, solved
/// densely for a fixed `α`.
#[derive(Clone, Debug)]
pub struct LaplacianBaseline {
    pub alpha: f64,
    solver: TikhonovSolver,
}

#[derive(Clone, Debug)]
enum TikhonovSolver {
    Cholesky(nalgebra::Cholesky<f64, nalgebra::Dyn>),
    Lu(nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>),
    LeastSquares,
}

/// Dense `AᵀA`.
fn normal_matrix(j: &CsrMatrix) -> DMatrix<f64> {
    let n = j.cols();
    let mut out = DMatrix::zeros(n, n);
    for r in 0..j.rows() {
        let entries: Vec<(usize, f64)> = j.row(r).collect();
        for &(a, va) in &entries {
            for &(b, vb) in &entries {
                out[(a, b)] += va * vb;
            }
        }
    }
    out
}

impl LaplacianBaseline {
    pub fn new(forward: &LinearForward, laplacian: &CsrMatrix, alpha: f64) -> Result<Self> {
        Self::with_normal_matrix(&normal_matrix(forward.jacobian()), laplacian, alpha)
    }

    fn with_normal_matrix(ata: &DMatrix<f64>, laplacian: &CsrMatrix, alpha: f64) -> Result<Self> {
        if !(alpha >= 0.0) || !alpha.is_finite() {
            return Err(Error::InvalidArgument(format!("alpha {alpha} must be >= 0")));
        }
        let n = ata.nrows();
        check_dim("laplacian size", n, laplacian.rows())?;
        if alpha == 0.0 {
            return Ok(Self {
                alpha,
                solver: TikhonovSolver::LeastSquares,
            });
        }
        let mut m = ata.clone();
        for r in 0..n {
            for (c, v) in laplacian.row(r) {
                m[(r, c)] += alpha * v;
            }
        }
        let solver = match m.clone().cholesky() {
            Some(c) => TikhonovSolver::Cholesky(c),
            None => TikhonovSolver::Lu(m.lu()),
        };
        Ok(Self { alpha, solver })
    }

    pub fn solve(&self, forward: &LinearForward, y: &[f64]) -> Result<Vec<f64>> {
        let r = forward.residual_data(y)?;
        let rhs = forward.operator().adjoint_matrix().spmv(&r)?;
        let rhs = nalgebra::DVector::from_vec(rhs);
        let x = match &self.solver {
            TikhonovSolver::Cholesky(c) => c.solve(&rhs),
            TikhonovSolver::Lu(lu) => lu
                .solve(&rhs)
                .ok_or_else(|| Error::Singular("tikhonov system".into()))?,
            TikhonovSolver::LeastSquares => {
                let zero = vec![0.0; forward.num_nodes()];
                return Ok(cgls(forward.operator(), &r, &zero, forward.num_nodes().max(1))?.x);
            }
        };
        Ok(x.iter().copied().collect())
    }
}

/// Candidate penalty weights: half decades from 1e-6 to 1, relative to
/// `tr(AᵀA)/tr(L)` so the grid is independent of the operator's scale.
pub fn alpha_grid(forward: &LinearForward, laplacian: &CsrMatrix) -> Vec<f64> {
    let ata: f64 = forward.jacobian().values().iter().map(|v| v * v).sum();
    let tr_l: f64 = laplacian.diagonal().iter().sum();
    let scale = if tr_l > 0.0 && ata > 0.0 { ata / tr_l } else { 1.0 };
    (0..=12).map(|k| scale * 10f64.powf(-6.0 + 0.5 * k as f64)).collect()
}

/// Picks the grid weight with the lowest mean squared error on `samples`
/// (pairs of ground truth and observation); ties go to the smaller weight.
pub fn select_alpha(
    forward: &LinearForward,
    laplacian: &CsrMatrix,
    samples: &[(&[f64], &[f64])],
) -> Result<(f64, Vec<(f64, f64)>)> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("alpha selection needs samples".into()));
    }
    let ata = normal_matrix(forward.jacobian());
    let mut scores = Vec::new();
    for alpha in alpha_grid(forward, laplacian) {
        let base = LaplacianBaseline::with_normal_matrix(&ata, laplacian, alpha)?;
        let errs = crate::exec::try_map_slice(samples, |(x, y)| {
            let xh = base.solve(forward, y)?;
            Ok::<f64, Error>(mean_squared_error(&xh, x))
        })?;
        scores.push((alpha, errs.iter().sum::<f64>() / errs.len() as f64));
    }
    let best = scores
        .iter()
        .fold((f64::NAN, f64::INFINITY), |b, &(a, s)| if s < b.1 { (a, s) } else { b });
    if !best.1.is_finite() {
        return Err(Error::NonFinite("laplacian baseline errors".into()));
    }
    Ok((best.0, scores))
}

pub fn mean_squared_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len().max(1) as f64
}

/// Parameter vector and context for a relabelled mesh: new node `perm[i]`
/// is old node `i`.
pub fn permuted_context(graph: &Graph, pe: &PositionalEncoding, perm: &[usize]) -> Result<GraphContext> {
    check_permutation(perm, graph.num_nodes())?;
    let edges: Vec<(usize, usize)> = graph.edges().iter().map(|&(a, b)| (perm[a], perm[b])).collect();
    let g = Graph::from_edges(graph.num_nodes(), &edges)?;
    Ok(GraphContext::from_parts(&g, &pe.permuted(perm)?))
}
