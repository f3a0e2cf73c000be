//! PDE forward problems, their observation operators and linearizations.
//!
//! * Poisson source recovery: `K u = −M a`, `u = 0` on the boundary,
//!   observed at a random subset of interior vertices.
//! * Inverse wave scattering: `(K − ω² M(a)) u = 0` with trigonometric
//!   Dirichlet data, observed through the matrix of Dirichlet-to-Neumann
//!   pairings `⟨g_j, Λ_a g_k⟩`.
//! * EIT with the complete electrode model, observed as electrode voltages
//!   for a set of balanced current patterns.
//!
//! Every [`LinearForward`] stores its Jacobian as an explicit sparse matrix
//! together with its transpose.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_dim, Error, Result};
use crate::exec;
use crate::fem::{
    apply_dirichlet, assemble_mass, assemble_stiffness, boundary_flux_pairing, element_means,
    field_gradient, triple_integral, ReducedSystem,
};
use crate::mesh::{check_permutation, Mesh};
use crate::sparse::{solve_spd, CsrMatrix, LinearOperator, MatrixOperator};

/// Relative tolerance for the inner SPD solves.
const SOLVE_TOL: f64 = 1e-12;

/// Default angular frequency of the scattering problem.
pub const DEFAULT_OMEGA: f64 = 5.0;
/// Default number of trigonometric Dirichlet boundary functions.
pub const DEFAULT_BOUNDARY_FUNCTIONS: usize = 20;
pub const DEFAULT_CONTACT_IMPEDANCE: f64 = 0.01;

/// What each observation entry measures.
#[derive(Clone, Debug, PartialEq)]
pub enum ObservationKind {
    /// Solution values at these (sorted) vertices.
    Vertices(Vec<usize>),
    /// Row-major `count × count` matrix of boundary flux pairings.
    DtnPairings { count: usize },
    /// Voltages per (pattern, electrode), pattern-major.
    Electrodes { patterns: usize, electrodes: usize },
}

impl ObservationKind {
    pub fn len(&self) -> usize {
        match self {
            Self::Vertices(v) => v.len(),
            Self::DtnPairings { count } => count * count,
            Self::Electrodes { patterns, electrodes } => patterns * electrodes,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub y: Vec<f64>,
    pub kind: ObservationKind,
    pub noise_level: f64,
}

impl Observation {
    pub fn new(y: Vec<f64>, kind: ObservationKind) -> Result<Self> {
        check_dim("observation", kind.len(), y.len())?;
        Ok(Self {
            y,
            kind,
            noise_level: 0.0,
        })
    }
}

/// Adds `rel_level·‖y‖/√m · ξ` with `ξ` i.i.d. standard normal.
pub fn add_noise(obs: &Observation, rel_level: f64, seed: u64) -> Result<Observation> {
    if !(rel_level >= 0.0) {
        return Err(Error::InvalidArgument(format!("noise level {rel_level} must be >= 0")));
    }
    let mut out = obs.clone();
    out.noise_level = rel_level;
    if rel_level == 0.0 || obs.y.is_empty() {
        return Ok(out);
    }
    let scale = rel_level * crate::sparse::norm(&obs.y) / (obs.y.len() as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in &mut out.y {
        let xi: f64 = StandardNormal.sample(&mut rng);
        *v += scale * xi;
    }
    Ok(out)
}

/// Linearized forward map `∂a ↦ J ∂a` around `a_ref`, with `y0 = F(a_ref)`.
#[derive(Clone, Debug)]
pub struct LinearForward {
    op: MatrixOperator,
    y0: Vec<f64>,
    a_ref: Vec<f64>,
    kind: ObservationKind,
}

impl LinearForward {
    pub fn new(jacobian: CsrMatrix, y0: Vec<f64>, a_ref: Vec<f64>, kind: ObservationKind) -> Result<Self> {
        check_dim("linear forward y0", jacobian.rows(), y0.len())?;
        check_dim("linear forward a_ref", jacobian.cols(), a_ref.len())?;
        check_dim("linear forward observation kind", jacobian.rows(), kind.len())?;
        Ok(Self {
            op: MatrixOperator::new(jacobian),
            y0,
            a_ref,
            kind,
        })
    }

    pub fn operator(&self) -> &MatrixOperator {
        &self.op
    }

    pub fn jacobian(&self) -> &CsrMatrix {
        self.op.matrix()
    }

    pub fn y0(&self) -> &[f64] {
        &self.y0
    }

    pub fn a_ref(&self) -> &[f64] {
        &self.a_ref
    }

    pub fn kind(&self) -> &ObservationKind {
        &self.kind
    }

    pub fn obs_dim(&self) -> usize {
        self.y0.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.a_ref.len()
    }

    /// `y − y0`, the data the linearized problem fits.
    pub fn residual_data(&self, y: &[f64]) -> Result<Vec<f64>> {
        check_dim("observation", self.obs_dim(), y.len())?;
        Ok(y.iter().zip(&self.y0).map(|(a, b)| a - b).collect())
    }

    /// Relabels nodes (input columns): new node `perm[i]` is old node `i`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(perm, self.num_nodes())?;
        let j = self.jacobian();
        let mut triplets = Vec::with_capacity(j.nnz());
        for r in 0..j.rows() {
            for (c, v) in j.row(r) {
                triplets.push((r, perm[c], v));
            }
        }
        let mut a_ref = vec![0.0; self.num_nodes()];
        for (old, &new) in perm.iter().enumerate() {
            a_ref[new] = self.a_ref[old];
        }
        let kind = match &self.kind {
            ObservationKind::Vertices(v) => ObservationKind::Vertices(v.iter().map(|&i| perm[i]).collect()),
            other => other.clone(),
        };
        Self::new(
            CsrMatrix::from_triplets(j.rows(), j.cols(), &triplets)?,
            self.y0.clone(),
            a_ref,
            kind,
        )
    }
}

impl LinearOperator for LinearForward {
    fn in_dim(&self) -> usize {
        self.op.in_dim()
    }
    fn out_dim(&self) -> usize {
        self.op.out_dim()
    }
    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.op.apply(v)
    }
    fn apply_adjoint(&self, w: &[f64]) -> Result<Vec<f64>> {
        self.op.apply_adjoint(w)
    }
}

fn homogeneous_constraint(mesh: &Mesh) -> BTreeMap<usize, f64> {
    mesh.boundary_nodes().iter().map(|&b| (b, 0.0)).collect()
}

/// Assembled Poisson system with homogeneous Dirichlet data.
#[derive(Clone, Debug)]
pub struct PoissonSystem {
    reduced: ReducedSystem,
    mass: CsrMatrix,
}

impl PoissonSystem {
    pub fn new(mesh: &Mesh) -> Result<Self> {
        let k = assemble_stiffness(mesh, None)?;
        let mass = assemble_mass(mesh, None)?;
        let reduced = apply_dirichlet(mesh, &k, &vec![0.0; mesh.num_nodes()], &homogeneous_constraint(mesh))?;
        Ok(Self { reduced, mass })
    }

    pub fn free_nodes(&self) -> &[usize] {
        &self.reduced.free
    }

    /// Solves `K u = −M a` with `u = 0` on the boundary.
    pub fn solve(&self, a: &[f64]) -> Result<Vec<f64>> {
        let ma = self.mass.spmv(a)?;
        let rhs: Vec<f64> = self.reduced.free.iter().map(|&i| -ma[i]).collect();
        let u = solve_spd(&self.reduced.matrix, &rhs, SOLVE_TOL)?;
        self.reduced.lift(&u)
    }
}

pub fn poisson_forward(mesh: &Mesh, a: &[f64]) -> Result<Vec<f64>> {
    check_dim("poisson source", mesh.num_nodes(), a.len())?;
    PoissonSystem::new(mesh)?.solve(a)
}

/// Seeded uniform random subset of free vertices, `round(fraction·n_free)`
/// of them (at least one), sorted.
pub fn observed_vertices(mesh: &Mesh, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "observed fraction {fraction} must lie in (0, 1]"
        )));
    }
    let free = mesh.interior_nodes();
    let count = ((fraction * free.len() as f64).round() as usize).clamp(1, free.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = sample(&mut rng, free.len(), count).into_iter().map(|k| free[k]).collect();
    picked.sort_unstable();
    Ok(picked)
}

/// Poisson source recovery observed at a random vertex subset. The problem
/// is linear, so `a_ref = 0` and `y0 = 0`.
pub fn poisson_linear_forward(mesh: &Mesh, observed_fraction: f64, seed: u64) -> Result<LinearForward> {
    let system = PoissonSystem::new(mesh)?;
    let observed = observed_vertices(mesh, observed_fraction, seed)?;
    let n = mesh.num_nodes();
    let free_pos: BTreeMap<usize, usize> = system.free_nodes().iter().enumerate().map(|(k, &i)| (i, k)).collect();
    // row for vertex o: −(M · lift(K_r⁻¹ e_o))ᵀ, using the symmetry of K and M
    let rows = exec::try_map_indices(observed.len(), |r| -> Result<Vec<f64>> {
        let mut e = vec![0.0; system.free_nodes().len()];
        e[free_pos[&observed[r]]] = 1.0;
        let w = system.reduced.lift(&solve_spd(&system.reduced.matrix, &e, SOLVE_TOL)?)?;
        Ok(system.mass.spmv(&w)?.into_iter().map(|v| -v).collect())
    })?;
    let dense: Vec<f64> = rows.into_iter().flatten().collect();
    let m = observed.len();
    LinearForward::new(
        CsrMatrix::from_dense(m, n, &dense)?,
        vec![0.0; m],
        vec![0.0; n],
        ObservationKind::Vertices(observed),
    )
}

/// Trigonometric boundary data `{sin(2πks), cos(2πks)}` for `k = 1..=count/2`
/// over the boundary arclength `s`, as full-length nodal vectors.
pub fn boundary_functions(mesh: &Mesh, count: usize) -> Vec<Vec<f64>> {
    let arclength = mesh.boundary_arclength();
    (0..count)
        .map(|idx| {
            let k = (idx / 2 + 1) as f64;
            let mut g = vec![0.0; mesh.num_nodes()];
            for &(node, s) in &arclength {
                let t = 2.0 * PI * k * s;
                g[node] = if idx % 2 == 0 { t.sin() } else { t.cos() };
            }
            g
        })
        .collect()
}

/// `K − ω² M(a)`.
pub fn helmholtz_matrix(mesh: &Mesh, a: &[f64], omega: f64) -> Result<CsrMatrix> {
    check_dim("helmholtz coefficient", mesh.num_nodes(), a.len())?;
    let k = assemble_stiffness(mesh, None)?;
    let m = assemble_mass(mesh, Some(a))?;
    let mut triplets = Vec::with_capacity(k.nnz() + m.nnz());
    for i in 0..k.rows() {
        triplets.extend(k.row(i).map(|(j, v)| (i, j, v)));
        triplets.extend(m.row(i).map(|(j, v)| (i, j, -omega * omega * v)));
    }
    CsrMatrix::from_triplets(k.rows(), k.cols(), &triplets)
}

/// Solves the Dirichlet problem for every boundary function in `gs` with one
/// dense LU factorization of the reduced (symmetric indefinite) system.
pub fn helmholtz_solve_all(mesh: &Mesh, a: &[f64], omega: f64, gs: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, CsrMatrix)> {
    let full = helmholtz_matrix(mesh, a, omega)?;
    let zero = vec![0.0; mesh.num_nodes()];
    let base = apply_dirichlet(mesh, &full, &zero, &homogeneous_constraint(mesh))?;
    let nf = base.free.len();
    let dense = DMatrix::from_row_slice(nf, nf, &base.matrix.to_dense());
    let lu = dense.clone().lu();
    let u_diag: Vec<f64> = (0..nf).map(|i| lu.u()[(i, i)].abs()).collect();
    let max_pivot = u_diag.iter().copied().fold(0.0, f64::max);
    let min_pivot = u_diag.iter().copied().fold(f64::INFINITY, f64::min);
    if nf > 0 && !(min_pivot > 1e-12 * max_pivot) {
        return Err(Error::Resonance(format!(
            "pivot ratio {:.3e} at omega = {omega}",
            min_pivot / max_pivot
        )));
    }
    let mut fields = Vec::with_capacity(gs.len());
    for g in gs {
        check_dim("boundary data", mesh.num_nodes(), g.len())?;
        let constraint: BTreeMap<usize, f64> = mesh.boundary_nodes().iter().map(|&b| (b, g[b])).collect();
        let sys = apply_dirichlet(mesh, &full, &zero, &constraint)?;
        let rhs = DVector::from_column_slice(&sys.rhs);
        let sol = lu
            .solve(&rhs)
            .ok_or_else(|| Error::Resonance(format!("singular system at omega = {omega}")))?;
        let resid = (&dense * &sol - &rhs).norm();
        if resid > 1e-8 * rhs.norm().max(1e-300) {
            return Err(Error::Resonance(format!("residual {resid:.3e} after LU solve")));
        }
        fields.push(sys.lift(sol.as_slice())?);
    }
    Ok((fields, full))
}

/// Solves `−Δu − ω² a u = 0`, `u = g` on the boundary.
pub fn helmholtz_forward(mesh: &Mesh, a: &[f64], omega: f64, g: &[f64]) -> Result<Vec<f64>> {
    let (mut u, _) = helmholtz_solve_all(mesh, a, omega, std::slice::from_ref(&g.to_vec()))?;
    Ok(u.remove(0))
}

/// Row-major matrix of pairings `P_jk = ⟨g_j, Λ_a g_k⟩`.
pub fn helmholtz_dtn_observation(mesh: &Mesh, a: &[f64], omega: f64, gs: &[Vec<f64>]) -> Result<Vec<f64>> {
    let (fields, full) = helmholtz_solve_all(mesh, a, omega, gs)?;
    let mut p = Vec::with_capacity(gs.len() * gs.len());
    for g in gs {
        for u in &fields {
            p.push(boundary_flux_pairing(mesh, &full, u, g)?);
        }
    }
    Ok(p)
}

/// Jacobian of the pairing matrix at `a_ref`:
/// `∂P_jk/∂a_i = −ω² ∫ φ_i u_j u_k`.
pub fn helmholtz_linear_forward(mesh: &Mesh, omega: f64, gs: &[Vec<f64>], a_ref: &[f64]) -> Result<LinearForward> {
    let (fields, full) = helmholtz_solve_all(mesh, a_ref, omega, gs)?;
    let n = mesh.num_nodes();
    let count = gs.len();
    let scale = -omega * omega;
    let rows = exec::map_indices(count * count, |r| {
        let (j, k) = (r / count, r % count);
        triple_integral(mesh, &fields[j], &fields[k])
            .into_iter()
            .map(|v| scale * v)
            .collect::<Vec<f64>>()
    });
    let dense: Vec<f64> = rows.into_iter().flatten().collect();
    let mut y0 = Vec::with_capacity(count * count);
    for g in gs {
        for u in &fields {
            y0.push(boundary_flux_pairing(mesh, &full, u, g)?);
        }
    }
    LinearForward::new(
        CsrMatrix::from_dense(count * count, n, &dense)?,
        y0,
        a_ref.to_vec(),
        ObservationKind::DtnPairings { count },
    )
}

/// Balanced trigonometric current patterns on `l` equally spaced electrodes:
/// `cos(kθ)` for `k = 1..=l/2` and `sin(kθ)` for `k = 1..l/2`, giving `l − 1`
/// patterns.
pub fn trigonometric_patterns(l: usize) -> Vec<Vec<f64>> {
    let theta = |e: usize| 2.0 * PI * e as f64 / l as f64;
    let mut out = Vec::with_capacity(l.saturating_sub(1));
    for k in 1..=l / 2 {
        out.push((0..l).map(|e| (k as f64 * theta(e)).cos()).collect::<Vec<_>>());
        if 2 * k < l {
            out.push((0..l).map(|e| (k as f64 * theta(e)).sin()).collect());
        }
    }
    for p in &mut out {
        let mean = p.iter().sum::<f64>() / l as f64;
        p.iter_mut().for_each(|v| *v -= mean);
    }
    out
}

/// Complete-electrode-model system for `(u, U)`:
///
/// ```text
/// [ K_σ + Σ_l (1/z) ∫_{e_l} φ_i φ_j    −(1/z) ∫_{e_l} φ_i          ]
/// [ −(1/z) ∫_{e_l} φ_j                  |e_l|/z δ_lm + c·(1/L²)·11ᵀ ]
/// ```
///
/// The rank-one term `c/L²·11ᵀ` on the electrode block removes the constant
/// nullspace; for balanced currents the solution satisfies `Σ_l U_l = 0`.
#[derive(Clone, Debug)]
pub struct CemSystem {
    matrix: CsrMatrix,
    num_nodes: usize,
    num_electrodes: usize,
}

impl CemSystem {
    pub fn new(mesh: &Mesh, sigma: &[f64], contact_impedance: f64) -> Result<Self> {
        check_dim("conductivity", mesh.num_nodes(), sigma.len())?;
        if !(contact_impedance > 0.0) {
            return Err(Error::InvalidArgument("contact impedance must be positive".into()));
        }
        if let Some(i) = sigma.iter().position(|s| !(*s > 0.0)) {
            return Err(Error::InvalidArgument(format!("conductivity at node {i} is not positive")));
        }
        let map = mesh
            .electrode_map()
            .ok_or_else(|| Error::InvalidMesh("mesh has no electrodes".into()))?;
        let n = mesh.num_nodes();
        let l = mesh.num_electrodes();
        let k = assemble_stiffness(mesh, Some(&element_means(mesh, sigma)))?;
        let mut triplets: Vec<(usize, usize, f64)> = Vec::with_capacity(k.nnz() + 8 * map.len() + l * l);
        for i in 0..n {
            triplets.extend(k.row(i).map(|(j, v)| (i, j, v)));
        }
        let inv_z = 1.0 / contact_impedance;
        let mut electrode_len = vec![0.0; l];
        for (edge, el) in mesh.boundary_edges().iter().zip(map) {
            let Some(el) = *el else { continue };
            let (a, b, h) = (edge.start, edge.end, edge.length);
            electrode_len[el] += h;
            triplets.push((a, a, inv_z * h / 3.0));
            triplets.push((b, b, inv_z * h / 3.0));
            triplets.push((a, b, inv_z * h / 6.0));
            triplets.push((b, a, inv_z * h / 6.0));
            for node in [a, b] {
                triplets.push((node, n + el, -inv_z * h / 2.0));
                triplets.push((n + el, node, -inv_z * h / 2.0));
            }
        }
        let mean_diag = electrode_len.iter().sum::<f64>() * inv_z / l as f64;
        let penalty = mean_diag / l as f64;
        for a in 0..l {
            triplets.push((n + a, n + a, inv_z * electrode_len[a]));
            for b in 0..l {
                triplets.push((n + a, n + b, penalty));
            }
        }
        Ok(Self {
            matrix: CsrMatrix::from_triplets(n + l, n + l, &triplets)?,
            num_nodes: n,
            num_electrodes: l,
        })
    }

    pub fn matrix(&self) -> &CsrMatrix {
        &self.matrix
    }

    /// Returns `(u, U)` for the electrode current vector `currents`.
    pub fn solve(&self, currents: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        check_dim("current pattern", self.num_electrodes, currents.len())?;
        let mut rhs = vec![0.0; self.num_nodes + self.num_electrodes];
        rhs[self.num_nodes..].copy_from_slice(currents);
        let mut x = solve_spd(&self.matrix, &rhs, 1e-13)?;
        let voltages = x.split_off(self.num_nodes);
        Ok((x, voltages))
    }
}

fn check_balanced(currents: &[f64]) -> Result<()> {
    let sum: f64 = currents.iter().sum();
    let scale: f64 = currents.iter().map(|c| c.abs()).sum();
    if sum.abs() > 1e-10 * scale.max(1e-300) {
        return Err(Error::InvalidArgument(format!(
            "current pattern is not balanced (sum {sum:.3e})"
        )));
    }
    Ok(())
}

/// Electrode voltages for each current pattern.
pub fn eit_cem_forward(
    mesh: &Mesh,
    sigma: &[f64],
    contact_impedance: f64,
    patterns: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>> {
    for p in patterns {
        check_balanced(p)?;
    }
    let system = CemSystem::new(mesh, sigma, contact_impedance)?;
    exec::try_map_slice(patterns, |p| system.solve(p).map(|(_, v)| v))
}

/// Linearization at constant `sigma_ref`:
/// `J[(d, m), i] = −∫ φ_i ∇u_d·∇w_m`, with `u_d` the field of pattern `d` and
/// `w_m` the field of the balanced measurement pattern `e_m − 1/L`.
pub fn eit_linear_forward(
    mesh: &Mesh,
    sigma_ref: f64,
    contact_impedance: f64,
    patterns: &[Vec<f64>],
) -> Result<LinearForward> {
    if !(sigma_ref > 0.0) {
        return Err(Error::InvalidArgument("reference conductivity must be positive".into()));
    }
    for p in patterns {
        check_balanced(p)?;
    }
    let n = mesh.num_nodes();
    let sigma = vec![sigma_ref; n];
    let system = CemSystem::new(mesh, &sigma, contact_impedance)?;
    let l = mesh.num_electrodes();
    let drive = exec::try_map_slice(patterns, |p| system.solve(p))?;
    let measure = exec::try_map_indices(l, |m| {
        let pattern: Vec<f64> = (0..l).map(|e| if e == m { 1.0 } else { 0.0 } - 1.0 / l as f64).collect();
        system.solve(&pattern).map(|(u, _)| u)
    })?;
    let drive_grads: Vec<Vec<[f64; 2]>> = drive
        .iter()
        .map(|(u, _)| (0..mesh.num_elements()).map(|e| field_gradient(mesh, e, u)).collect())
        .collect();
    let measure_grads: Vec<Vec<[f64; 2]>> = measure
        .iter()
        .map(|w| (0..mesh.num_elements()).map(|e| field_gradient(mesh, e, w)).collect())
        .collect();
    let rows = exec::map_indices(patterns.len() * l, |r| {
        let (d, m) = (r / l, r % l);
        let mut row = vec![0.0; n];
        for (e, t) in mesh.elements().iter().enumerate() {
            let (gu, gw) = (drive_grads[d][e], measure_grads[m][e]);
            let w = -mesh.element_area(e) / 3.0 * (gu[0] * gw[0] + gu[1] * gw[1]);
            for &i in t {
                row[i] += w;
            }
        }
        row
    });
    let dense: Vec<f64> = rows.into_iter().flatten().collect();
    let y0: Vec<f64> = drive.into_iter().flat_map(|(_, v)| v).collect();
    LinearForward::new(
        CsrMatrix::from_dense(patterns.len() * l, n, &dense)?,
        y0,
        sigma,
        ObservationKind::Electrodes {
            patterns: patterns.len(),
            electrodes: l,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::assemble_stiffness;
    use crate::mesh::{generate_disk, generate_l_shape, generate_unit_square};
    use crate::sparse::{dot, norm};
    use rand::Rng;

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn adjoint_rel_err(f: &LinearForward, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for _ in 0..20 {
            let v = random_vec(&mut rng, f.in_dim());
            let w = random_vec(&mut rng, f.out_dim());
            let lhs = dot(&f.apply(&v).unwrap(), &w);
            let rhs = dot(&v, &f.apply_adjoint(&w).unwrap());
            worst = worst.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-300));
        }
        worst
    }

    #[test]
    fn poisson_zero_source_and_linearity() {
        let mesh = generate_l_shape(8).unwrap();
        let n = mesh.num_nodes();
        assert!(poisson_forward(&mesh, &vec![0.0; n]).unwrap().iter().all(|v| *v == 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a1 = random_vec(&mut rng, n);
        let a2 = random_vec(&mut rng, n);
        let sum: Vec<f64> = a1.iter().zip(&a2).map(|(a, b)| a + b).collect();
        let sys = PoissonSystem::new(&mesh).unwrap();
        let (u1, u2, u12) = (sys.solve(&a1).unwrap(), sys.solve(&a2).unwrap(), sys.solve(&sum).unwrap());
        for i in 0..n {
            assert!((u1[i] + u2[i] - u12[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn poisson_full_observation_dimension() {
        let mesh = generate_l_shape(4).unwrap();
        let f = poisson_linear_forward(&mesh, 1.0, 0).unwrap();
        assert_eq!(f.obs_dim(), mesh.interior_nodes().len());
        assert!(adjoint_rel_err(&f, 1) < 1e-10);
    }

    #[test]
    fn poisson_linear_map_matches_forward() {
        let mesh = generate_l_shape(8).unwrap();
        let f = poisson_linear_forward(&mesh, 0.6, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let da = random_vec(&mut rng, mesh.num_nodes());
        let u = poisson_forward(&mesh, &da).unwrap();
        let ObservationKind::Vertices(obs) = f.kind() else { panic!() };
        let lin = f.apply(&da).unwrap();
        for (k, &o) in obs.iter().enumerate() {
            assert!((lin[k] - u[o]).abs() < 1e-10 * norm(&u).max(1.0));
        }
        assert!(f.apply(&vec![0.0; mesh.num_nodes()]).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn observed_fractions() {
        let mesh = generate_l_shape(12).unwrap();
        let free = mesh.interior_nodes().len() as f64;
        let dense = observed_vertices(&mesh, 0.6, 7).unwrap();
        let sparse = observed_vertices(&mesh, 0.1, 7).unwrap();
        assert!((dense.len() as f64 - 0.6 * free).abs() <= 1.0);
        assert!((sparse.len() as f64 - 0.1 * free).abs() <= 1.0);
        assert_eq!(dense, observed_vertices(&mesh, 0.6, 7).unwrap());
        assert!(observed_vertices(&mesh, 0.0, 7).is_err());
    }

    #[test]
    fn helmholtz_reproduces_linear_data_when_a_vanishes() {
        let mesh = generate_unit_square(6).unwrap();
        let g: Vec<f64> = mesh.nodes().iter().map(|p| p[0]).collect();
        let u = helmholtz_forward(&mesh, &vec![0.0; mesh.num_nodes()], 5.0, &g).unwrap();
        for (ui, gi) in u.iter().zip(&g) {
            assert!((ui - gi).abs() < 1e-12);
        }
    }

    #[test]
    fn helmholtz_omega_zero_ignores_coefficient() {
        let mesh = generate_unit_square(5).unwrap();
        let gs = boundary_functions(&mesh, 4);
        let a: Vec<f64> = (0..mesh.num_nodes()).map(|i| (i % 3) as f64).collect();
        let p0 = helmholtz_dtn_observation(&mesh, &vec![0.0; mesh.num_nodes()], 0.0, &gs).unwrap();
        let pa = helmholtz_dtn_observation(&mesh, &a, 0.0, &gs).unwrap();
        assert_eq!(p0, pa);
        let f = helmholtz_linear_forward(&mesh, 0.0, &gs, &vec![0.0; mesh.num_nodes()]).unwrap();
        assert_eq!(f.jacobian().nnz(), 0);
    }

    #[test]
    fn helmholtz_matches_dense_solve() {
        let mesh = generate_unit_square(4).unwrap();
        let n = mesh.num_nodes();
        let a: Vec<f64> = (0..n).map(|i| 0.5 + 0.1 * (i as f64).sin()).collect();
        let g = boundary_functions(&mesh, 3).remove(2);
        let u = helmholtz_forward(&mesh, &a, 5.0, &g).unwrap();
        // dense oracle: interior rows of (K − ω²M(a)) u = 0, boundary rows u = g
        let full = helmholtz_matrix(&mesh, &a, 5.0).unwrap().to_dense();
        let mut mat = DMatrix::zeros(n, n);
        let mut rhs = DVector::zeros(n);
        for i in 0..n {
            if mesh.is_boundary(i) {
                mat[(i, i)] = 1.0;
                rhs[i] = g[i];
            } else {
                for j in 0..n {
                    mat[(i, j)] = full[i * n + j];
                }
            }
        }
        let oracle = mat.lu().solve(&rhs).unwrap();
        for i in 0..n {
            assert!((u[i] - oracle[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn dtn_pairing_is_symmetric() {
        let mesh = generate_unit_square(8).unwrap();
        let gs = boundary_functions(&mesh, 20);
        let a: Vec<f64> = mesh.nodes().iter().map(|p| (-(p[0] - 0.4).powi(2) * 10.0).exp()).collect();
        let p = helmholtz_dtn_observation(&mesh, &a, 5.0, &gs).unwrap();
        let mut worst: f64 = 0.0;
        for j in 0..20 {
            for k in 0..20 {
                worst = worst.max((p[j * 20 + k] - p[k * 20 + j]).abs());
            }
        }
        assert!(worst < 1e-9, "asymmetry {worst}");
    }

    #[test]
    fn dtn_at_zero_coefficient_is_laplace_pairing() {
        let mesh = generate_unit_square(5).unwrap();
        let gs = boundary_functions(&mesh, 4);
        let zero = vec![0.0; mesh.num_nodes()];
        let p5 = helmholtz_dtn_observation(&mesh, &zero, 5.0, &gs).unwrap();
        let p9 = helmholtz_dtn_observation(&mesh, &zero, 9.0, &gs).unwrap();
        let k = assemble_stiffness(&mesh, None).unwrap();
        let (fields, _) = helmholtz_solve_all(&mesh, &zero, 0.0, &gs).unwrap();
        for j in 0..4 {
            for i in 0..4 {
                let lap = boundary_flux_pairing(&mesh, &k, &fields[i], &gs[j]).unwrap();
                assert!((p5[j * 4 + i] - lap).abs() < 1e-12);
                assert!((p9[j * 4 + i] - lap).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn helmholtz_jacobian_matches_central_differences() {
        let mesh = generate_unit_square(6).unwrap();
        let gs = boundary_functions(&mesh, 6);
        let n = mesh.num_nodes();
        let a_ref: Vec<f64> = (0..n).map(|i| 0.2 * ((i * 7 % 5) as f64)).collect();
        let f = helmholtz_linear_forward(&mesh, 5.0, &gs, &a_ref).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dir = random_vec(&mut rng, n);
        let h = 1e-5;
        let plus: Vec<f64> = a_ref.iter().zip(&dir).map(|(a, d)| a + h * d).collect();
        let minus: Vec<f64> = a_ref.iter().zip(&dir).map(|(a, d)| a - h * d).collect();
        let pp = helmholtz_dtn_observation(&mesh, &plus, 5.0, &gs).unwrap();
        let pm = helmholtz_dtn_observation(&mesh, &minus, 5.0, &gs).unwrap();
        let fd: Vec<f64> = pp.iter().zip(&pm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
        let lin = f.apply(&dir).unwrap();
        let err: Vec<f64> = fd.iter().zip(&lin).map(|(a, b)| a - b).collect();
        assert!(norm(&err) / norm(&fd) < 1e-5);
        assert!(adjoint_rel_err(&f, 2) < 1e-10);
    }

    #[test]
    fn trig_patterns_are_balanced() {
        let ps = trigonometric_patterns(16);
        assert_eq!(ps.len(), 15);
        for p in &ps {
            assert!(p.iter().sum::<f64>().abs() < 1e-14);
        }
    }

    #[test]
    fn cem_grounding_and_antisymmetry() {
        let mesh = generate_disk(8, 16).unwrap();
        let sigma = vec![1.0; mesh.num_nodes()];
        let mut pattern = vec![0.0; 16];
        pattern[0] = 1.0;
        pattern[8] = -1.0;
        let u = eit_cem_forward(&mesh, &sigma, 0.01, &[pattern]).unwrap().remove(0);
        assert!(u.iter().sum::<f64>().abs() < 1e-10);
        for l in 0..8 {
            assert!((u[l] + u[l + 8]).abs() < 1e-9, "electrode {l}: {} vs {}", u[l], u[l + 8]);
        }
        assert!(u[0] > 0.0);
    }

    #[test]
    fn cem_rejects_unbalanced_currents() {
        let mesh = generate_disk(4, 8).unwrap();
        let sigma = vec![1.0; mesh.num_nodes()];
        let mut p = vec![0.0; 8];
        p[0] = 1.0;
        assert!(eit_cem_forward(&mesh, &sigma, 0.01, &[p]).is_err());
        let mesh = generate_unit_square(3).unwrap();
        assert!(CemSystem::new(&mesh, &vec![1.0; 16], 0.01).is_err());
    }

    #[test]
    fn cem_scaling_with_conductivity() {
        let mesh = generate_disk(6, 8).unwrap();
        let patterns = trigonometric_patterns(8);
        let s1: Vec<f64> = mesh.nodes().iter().map(|p| 1.0 + 0.3 * p[0]).collect();
        let s2: Vec<f64> = s1.iter().map(|s| 2.0 * s).collect();
        // doubling σ and halving z doubles the whole system
        let u1 = eit_cem_forward(&mesh, &s1, 0.02, &patterns).unwrap();
        let u2 = eit_cem_forward(&mesh, &s2, 0.01, &patterns).unwrap();
        for (a, b) in u1.iter().flatten().zip(u2.iter().flatten()) {
            assert!((a - 2.0 * b).abs() < 1e-9 * a.abs().max(1.0));
        }
    }

    #[test]
    fn cem_reciprocity() {
        let mesh = generate_disk(8, 16).unwrap();
        let sigma: Vec<f64> = mesh.nodes().iter().map(|p| 1.0 + 0.5 * p[1] * p[1]).collect();
        let pair = |d: usize| {
            let mut p = vec![0.0; 16];
            p[d] = 1.0;
            p[(d + 1) % 16] = -1.0;
            p
        };
        let patterns: Vec<Vec<f64>> = (0..16).map(pair).collect();
        let u = eit_cem_forward(&mesh, &sigma, 0.01, &patterns).unwrap();
        for a in 0..16 {
            for b in 0..16 {
                let ab = dot(&patterns[b], &u[a]);
                let ba = dot(&patterns[a], &u[b]);
                assert!((ab - ba).abs() <= 1e-9 * ab.abs().max(1e-3));
            }
        }
    }

    #[test]
    fn eit_jacobian_matches_central_differences() {
        let mesh = generate_disk(6, 8).unwrap();
        assert!(mesh.num_elements() <= 300);
        let patterns = trigonometric_patterns(8);
        let f = eit_linear_forward(&mesh, 1.0, 0.01, &patterns).unwrap();
        assert_eq!(f.obs_dim(), 7 * 8);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let dir = random_vec(&mut rng, mesh.num_nodes());
        let h = 1e-5;
        let eval = |t: f64| {
            let s: Vec<f64> = dir.iter().map(|d| 1.0 + t * d).collect();
            eit_cem_forward(&mesh, &s, 0.01, &patterns).unwrap().concat()
        };
        let (p, m) = (eval(h), eval(-h));
        let fd: Vec<f64> = p.iter().zip(&m).map(|(a, b)| (a - b) / (2.0 * h)).collect();
        let lin = f.apply(&dir).unwrap();
        let err: Vec<f64> = fd.iter().zip(&lin).map(|(a, b)| a - b).collect();
        assert!(norm(&err) / norm(&fd) < 1e-4, "rel err {}", norm(&err) / norm(&fd));
        assert!(f.apply(&vec![0.0; mesh.num_nodes()]).unwrap().iter().all(|v| *v == 0.0));
        assert!(adjoint_rel_err(&f, 3) < 1e-10);
    }

    #[test]
    fn eit_sensitivity_concentrates_near_boundary() {
        let mesh = generate_disk(8, 16).unwrap();
        let mut p = vec![0.0; 16];
        p[0] = 1.0;
        p[1] = -1.0;
        let f = eit_linear_forward(&mesh, 1.0, 0.01, &[p]).unwrap();
        let j = f.jacobian();
        let sens = |i: usize| (0..j.rows()).map(|r| j.get(r, i).abs()).sum::<f64>();
        // nodes next to the driven pair versus the disk centre
        let near: Vec<usize> = (0..mesh.num_nodes())
            .filter(|&i| {
                let q = mesh.nodes()[i];
                let r = (q[0] * q[0] + q[1] * q[1]).sqrt();
                let ang = q[1].atan2(q[0]);
                r > 0.8 && r < 0.95 && ang.abs() < 0.5
            })
            .collect();
        let centre = 0;
        assert!(!near.is_empty());
        let near_mean = near.iter().map(|&i| sens(i)).sum::<f64>() / near.len() as f64;
        assert!(near_mean > sens(centre));
    }

    #[test]
    fn noise_levels() {
        let obs = Observation::new(vec![1.0, -2.0, 3.0, 0.5], ObservationKind::DtnPairings { count: 2 }).unwrap();
        assert_eq!(add_noise(&obs, 0.0, 1).unwrap().y, obs.y);
        assert_eq!(add_noise(&obs, 0.1, 9).unwrap(), add_noise(&obs, 0.1, 9).unwrap());
        assert!(add_noise(&obs, -1.0, 9).is_err());
        let big = Observation::new(
            (0..400).map(|i| (i as f64).sin()).collect(),
            ObservationKind::DtnPairings { count: 20 },
        )
        .unwrap();
        let target = 0.05f64.powi(2) * dot(&big.y, &big.y);
        let trials = 200;
        let mean_sq: f64 = (0..trials)
            .map(|s| {
                let noisy = add_noise(&big, 0.05, s).unwrap();
                noisy.y.iter().zip(&big.y).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
            })
            .sum::<f64>()
            / trials as f64;
        assert!((mean_sq / target - 1.0).abs() < 0.1);
    }
}
