//! Synthetic coefficient fields and paired datasets.
//!
//! Each sample draws a ground-truth coefficient, computes observations with
//! the full (nonlinear where applicable) forward solver and adds noise. The
//! stored `x` is the perturbation from the linearization point, so it is what
//! a reconstruction from the [`LinearForward`] should recover.

use std::f64::consts::PI;
use std::fmt;
use std::io::{BufRead, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_dim, Error, Result};
use crate::exec;
use crate::forward::{
    add_noise, boundary_functions, eit_cem_forward, eit_linear_forward, helmholtz_dtn_observation,
    helmholtz_linear_forward, poisson_linear_forward, trigonometric_patterns, LinearForward, Observation,
    ObservationKind, PoissonSystem, DEFAULT_BOUNDARY_FUNCTIONS, DEFAULT_CONTACT_IMPEDANCE, DEFAULT_OMEGA,
};
use crate::mesh::Mesh;

/// Smoothing length of the Poisson source prior.
pub const POISSON_LENGTH_SCALE: f64 = 0.2;
/// Seed of the observed-vertex mask, fixed so the forward operator can be
/// rebuilt from the mesh alone.
pub const POISSON_MASK_SEED: u64 = 20_240_601;
pub const DENSE_FRACTION: f64 = 0.6;
pub const SPARSE_FRACTION: f64 = 0.1;
/// Sharpness of the Helmholtz inclusions.
pub const HELMHOLTZ_SHARPNESS: f64 = 2.0e4 / 3.0;
pub const EIT_ELECTRODES: usize = 16;
pub const DEFAULT_NOISE: f64 = 0.01;
/// Forward failures tolerated per sample before giving up.
const MAX_ATTEMPTS: u64 = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Problem {
    PoissonDense,
    PoissonSparse,
    Helmholtz,
    Eit,
}

impl Problem {
    pub const ALL: [Problem; 4] = [Self::PoissonDense, Self::PoissonSparse, Self::Helmholtz, Self::Eit];

    pub fn token(&self) -> &'static str {
        match self {
            Self::PoissonDense => "poisson-dense",
            Self::PoissonSparse => "poisson-sparse",
            Self::Helmholtz => "helmholtz",
            Self::Eit => "eit",
        }
    }

    pub fn is_poisson(&self) -> bool {
        matches!(self, Self::PoissonDense | Self::PoissonSparse)
    }

    /// Linearized forward operator for this problem on `mesh`.
    pub fn linear_forward(&self, mesh: &Mesh) -> Result<LinearForward> {
        let n = mesh.num_nodes();
        match self {
            Self::PoissonDense => poisson_linear_forward(mesh, DENSE_FRACTION, POISSON_MASK_SEED),
            Self::PoissonSparse => poisson_linear_forward(mesh, SPARSE_FRACTION, POISSON_MASK_SEED),
            Self::Helmholtz => helmholtz_linear_forward(
                mesh,
                DEFAULT_OMEGA,
                &boundary_functions(mesh, DEFAULT_BOUNDARY_FUNCTIONS),
                &vec![0.0; n],
            ),
            Self::Eit => {
                if mesh.num_electrodes() == 0 {
                    return Err(Error::InvalidMesh("eit needs a mesh with electrodes".into()));
                }
                eit_linear_forward(
                    mesh,
                    1.0,
                    DEFAULT_CONTACT_IMPEDANCE,
                    &trigonometric_patterns(mesh.num_electrodes()),
                )
            }
        }
    }
}

impl fmt::Display for Problem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for Problem {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.token() == s)
            .ok_or_else(|| Error::Parse(format!("unknown problem `{s}`")))
    }
}

/// Row-normalized Gaussian smoothing over mesh vertices.
#[derive(Clone, Debug)]
pub struct GaussianKernel {
    n: usize,
    weights: Vec<f64>,
}

impl GaussianKernel {
    pub fn new(mesh: &Mesh, length_scale: f64) -> Self {
        let nodes = mesh.nodes();
        let n = nodes.len();
        let rows = exec::map_indices(n, |i| {
            let p = nodes[i];
            let mut row: Vec<f64> = nodes
                .iter()
                .map(|q| {
                    let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2);
                    if length_scale > 0.0 {
                        (-d2 / (2.0 * length_scale * length_scale)).exp()
                    } else if d2 == 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|w| *w /= total);
            row
        });
        Self {
            n,
            weights: rows.into_iter().flatten().collect(),
        }
    }

    /// Smoothed white noise, standardized to zero mean and unit variance.
    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        let xi: Vec<f64> = (0..self.n).map(|_| StandardNormal.sample(rng)).collect();
        let field: Vec<f64> = self
            .weights
            .chunks(self.n)
            .map(|row| row.iter().zip(&xi).map(|(w, x)| w * x).sum())
            .collect();
        standardize(field)
    }
}

fn standardize(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    v.iter_mut().for_each(|x| *x -= mean);
    let std = (v.iter().map(|x| x * x).sum::<f64>() / n).sqrt();
    if std > 0.0 {
        v.iter_mut().for_each(|x| *x /= std);
    }
    v
}

/// Poisson source prior sample for `seed`.
pub fn sample_poisson_source(mesh: &Mesh, seed: u64) -> Vec<f64> {
    GaussianKernel::new(mesh, POISSON_LENGTH_SCALE).sample(&mut ChaCha8Rng::seed_from_u64(seed))
}

/// Sum of sharp quartic bumps `Σ_k exp(−c(x − c₁ₖ)⁴ − c(y − c₂ₖ)⁴)`.
#[derive(Clone, Debug, PartialEq)]
pub struct HelmholtzCoefficient {
    pub centers: Vec<[f64; 2]>,
}

impl HelmholtzCoefficient {
    /// One to four centres, uniform in `[0.15, 0.85]²`.
    pub fn sample(rng: &mut impl Rng) -> Self {
        let m = rng.random_range(1..=4);
        let centers = (0..m)
            .map(|_| [rng.random_range(0.15..=0.85), rng.random_range(0.15..=0.85)])
            .collect();
        Self { centers }
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        self.centers
            .iter()
            .map(|c| (-HELMHOLTZ_SHARPNESS * (x - c[0]).powi(4) - HELMHOLTZ_SHARPNESS * (y - c[1]).powi(4)).exp())
            .sum()
    }

    pub fn nodal(&self, mesh: &Mesh) -> Vec<f64> {
        mesh.nodes().iter().map(|p| self.eval(p[0], p[1])).collect()
    }
}

/// Helmholtz coefficient sample for `seed`: the coefficient and its nodal
/// values.
pub fn sample_helmholtz_coeff(mesh: &Mesh, seed: u64) -> (HelmholtzCoefficient, Vec<f64>) {
    let c = HelmholtzCoefficient::sample(&mut ChaCha8Rng::seed_from_u64(seed));
    let nodal = c.nodal(mesh);
    (c, nodal)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ellipse {
    pub center: [f64; 2],
    pub semi_axes: [f64; 2],
    pub angle: f64,
    pub value: f64,
}

impl Ellipse {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        let (dx, dy) = (p[0] - self.center[0], p[1] - self.center[1]);
        let (s, c) = self.angle.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.semi_axes[0]).powi(2) + (v / self.semi_axes[1]).powi(2) <= 1.0
    }

    pub fn area(&self) -> f64 {
        PI * self.semi_axes[0] * self.semi_axes[1]
    }
}

/// Piecewise-constant conductivity: unit background with elliptic inclusions.
#[derive(Clone, Debug, PartialEq)]
pub struct EitPhantom {
    pub ellipses: Vec<Ellipse>,
}

impl EitPhantom {
    /// One to three ellipses. Centres are uniform in the radius-0.7 disk and
    /// redrawn until the ellipse stays 0.1 away from the boundary; values are
    /// uniform on `[0.5, 0.9] ∪ [1.1, 2.0]`.
    pub fn sample(rng: &mut impl Rng) -> Self {
        let count = rng.random_range(1..=3);
        let ellipses = (0..count)
            .map(|_| loop {
                let r = 0.7 * rng.random::<f64>().sqrt();
                let t = rng.random_range(0.0..2.0 * PI);
                let semi_axes: [f64; 2] = [rng.random_range(0.1..=0.3), rng.random_range(0.1..=0.3)];
                let angle = rng.random_range(0.0..PI);
                let u = rng.random_range(0.0..1.3);
                let value = if u < 0.4 { 0.5 + u } else { 1.1 + (u - 0.4) };
                if r + semi_axes[0].max(semi_axes[1]) <= 0.9 {
                    break Ellipse {
                        center: [r * t.cos(), r * t.sin()],
                        semi_axes,
                        angle,
                        value,
                    };
                }
            })
            .collect();
        Self { ellipses }
    }

    pub fn eval(&self, p: [f64; 2]) -> f64 {
        self.ellipses
            .iter()
            .rev()
            .find(|e| e.contains(p))
            .map_or(1.0, |e| e.value)
    }

    pub fn nodal(&self, mesh: &Mesh) -> Vec<f64> {
        mesh.nodes().iter().map(|&p| self.eval(p)).collect()
    }
}

/// EIT conductivity sample for `seed`.
pub fn sample_eit_conductivity(mesh: &Mesh, seed: u64) -> Vec<f64> {
    EitPhantom::sample(&mut ChaCha8Rng::seed_from_u64(seed)).nodal(mesh)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn tag(&self) -> u8 {
        match self {
            Self::Train => 0,
            Self::Val => 1,
            Self::Test => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Self::Train),
            1 => Ok(Self::Val),
            2 => Ok(Self::Test),
            t => Err(Error::Parse(format!("bad split tag {t}"))),
        }
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(Error::Parse(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Coefficient perturbation from the linearization point.
    pub x: Vec<f64>,
    /// Noisy observation (not yet offset by `y0`).
    pub y: Vec<f64>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub problem: Problem,
    pub num_nodes: usize,
    pub obs_dim: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        writeln!(
            w,
            "pdeinvreg-data v1 {} {} {} {}",
            self.problem,
            self.num_nodes,
            self.obs_dim,
            self.samples.len()
        )?;
        let mut buf = Vec::with_capacity(8 * (self.num_nodes + self.obs_dim) + 1);
        for s in &self.samples {
            buf.clear();
            for v in s.x.iter().chain(&s.y) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            buf.push(s.split.tag());
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = std::io::BufReader::new(r);
        let mut header = String::new();
        r.read_line(&mut header)?;
        let f: Vec<&str> = header.split_whitespace().collect();
        if f.len() != 6 || f[0] != "pdeinvreg-data" || f[1] != "v1" {
            return Err(Error::Parse(format!("bad dataset header `{}`", header.trim_end())));
        }
        let problem: Problem = f[2].parse()?;
        let num = |s: &str| s.parse::<usize>().map_err(|e| Error::Parse(format!("dataset header: {e}")));
        let (num_nodes, obs_dim, count) = (num(f[3])?, num(f[4])?, num(f[5])?);
        let record = 8 * (num_nodes + obs_dim) + 1;
        let mut buf = vec![0u8; record];
        let mut samples = Vec::with_capacity(count);
        for k in 0..count {
            r.read_exact(&mut buf)
                .map_err(|e| Error::Parse(format!("dataset truncated at sample {k}: {e}")))?;
            let vals: Vec<f64> = buf[..record - 1]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            samples.push(Sample {
                x: vals[..num_nodes].to_vec(),
                y: vals[num_nodes..].to_vec(),
                split: Split::from_tag(buf[record - 1])?,
            });
        }
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(Error::Parse("trailing bytes after dataset".into()));
        }
        Ok(Self {
            problem,
            num_nodes,
            obs_dim,
            samples,
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

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub problem: Problem,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub noise: f64,
    pub seed: u64,
}

impl DatasetConfig {
    pub fn new(problem: Problem, n_train: usize, n_val: usize, n_test: usize, noise: f64, seed: u64) -> Self {
        Self {
            problem,
            n_train,
            n_val,
            n_test,
            noise,
            seed,
        }
    }

    pub fn total(&self) -> usize {
        self.n_train + self.n_val + self.n_test
    }

    fn split_of(&self, index: usize) -> Split {
        if index < self.n_train {
            Split::Train
        } else if index < self.n_train + self.n_val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

/// Nonlinear forward solver used to synthesize observations.
enum Simulator {
    Poisson {
        system: PoissonSystem,
        observed: Vec<usize>,
        kernel: GaussianKernel,
    },
    Helmholtz {
        gs: Vec<Vec<f64>>,
    },
    Eit {
        patterns: Vec<Vec<f64>>,
    },
}

impl Simulator {
    fn new(problem: Problem, mesh: &Mesh, forward: &LinearForward) -> Result<Self> {
        Ok(match problem {
            Problem::PoissonDense | Problem::PoissonSparse => {
                let ObservationKind::Vertices(observed) = forward.kind() else {
                    return Err(Error::InvalidArgument("poisson forward must observe vertices".into()));
                };
                Self::Poisson {
                    system: PoissonSystem::new(mesh)?,
                    observed: observed.clone(),
                    kernel: GaussianKernel::new(mesh, POISSON_LENGTH_SCALE),
                }
            }
            Problem::Helmholtz => Self::Helmholtz {
                gs: boundary_functions(mesh, DEFAULT_BOUNDARY_FUNCTIONS),
            },
            Problem::Eit => Self::Eit {
                patterns: trigonometric_patterns(mesh.num_electrodes()),
            },
        })
    }

    /// Draws `(x, y)` with `x` the perturbation from the reference.
    fn draw(&self, mesh: &Mesh, rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, Vec<f64>)> {
        match self {
            Self::Poisson {
                system,
                observed,
                kernel,
            } => {
                let a = kernel.sample(rng);
                let u = system.solve(&a)?;
                let y = observed.iter().map(|&i| u[i]).collect();
                Ok((a, y))
            }
            Self::Helmholtz { gs } => {
                let a = HelmholtzCoefficient::sample(rng).nodal(mesh);
                let y = helmholtz_dtn_observation(mesh, &a, DEFAULT_OMEGA, gs)?;
                Ok((a, y))
            }
            Self::Eit { patterns } => {
                let sigma = EitPhantom::sample(rng).nodal(mesh);
                let volts = eit_cem_forward(mesh, &sigma, DEFAULT_CONTACT_IMPEDANCE, patterns)?;
                let x = sigma.iter().map(|s| s - 1.0).collect();
                Ok((x, volts.into_iter().flatten().collect()))
            }
        }
    }
}

/// Generated dataset plus the number of samples redrawn after forward
/// failures.
#[derive(Clone, Debug)]
pub struct BuildOutcome {
    pub dataset: Dataset,
    pub resampled: usize,
}

/// Builds a dataset for `config.problem` on `mesh`. `forward` must be the
/// problem's linear forward on the same mesh; its observation layout and
/// `y0` define the data.
///
/// Sample `i` uses its own random stream derived from `(seed, i)`, so the
/// result does not depend on the number of worker threads.
pub fn build_dataset(mesh: &Mesh, forward: &LinearForward, config: &DatasetConfig) -> Result<BuildOutcome> {
    if config.n_train == 0 || config.n_val == 0 || config.n_test == 0 {
        return Err(Error::InvalidArgument("every split needs at least one sample".into()));
    }
    if !(config.noise >= 0.0) {
        return Err(Error::InvalidArgument(format!("noise level {} must be >= 0", config.noise)));
    }
    check_dim("forward nodes", mesh.num_nodes(), forward.num_nodes())?;
    let sim = Simulator::new(config.problem, mesh, forward)?;
    let drawn = exec::try_map_indices(config.total(), |i| {
        let mut last = None;
        for attempt in 0..MAX_ATTEMPTS {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream((attempt << 32) | i as u64);
            match sim.draw(mesh, &mut rng) {
                Ok((x, y)) => {
                    let obs = Observation::new(y, forward.kind().clone())?;
                    let noisy = add_noise(&obs, config.noise, rng.random())?;
                    return Ok((
                        Sample {
                            x,
                            y: noisy.y,
                            split: config.split_of(i),
                        },
                        attempt as usize,
                    ));
                }
                Err(e @ (Error::Resonance(_) | Error::Singular(_) | Error::NonConvergence { .. })) => {
                    log::warn!("sample {i} attempt {attempt}: {e}; redrawing");
                    last = Some(e);
                }
                Err(e) => return Err(e),
            }
        }
        Err(last.expect("at least one attempt"))
    })?;
    let resampled = drawn.iter().map(|(_, a)| a).sum();
    if resampled > 0 {
        log::info!("redrew {resampled} samples after forward failures");
    }
    Ok(BuildOutcome {
        dataset: Dataset {
            problem: config.problem,
            num_nodes: mesh.num_nodes(),
            obs_dim: forward.obs_dim(),
            samples: drawn.into_iter().map(|(s, _)| s).collect(),
        },
        resampled,
    })
}
