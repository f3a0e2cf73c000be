//! Piecewise-linear finite element assembly and Dirichlet elimination.

use std::collections::BTreeMap;

use crate::error::{check_dim, Error, Result};
use crate::mesh::Mesh;
use crate::sparse::{dot, CsrMatrix};

/// Gradients of the three hat functions on element `e` (constant per element).
pub fn hat_gradients(mesh: &Mesh, e: usize) -> [[f64; 2]; 3] {
    let t = mesh.elements()[e];
    let p = t.map(|i| mesh.nodes()[i]);
    let two_area = 2.0 * mesh.element_area(e);
    [
        [(p[1][1] - p[2][1]) / two_area, (p[2][0] - p[1][0]) / two_area],
        [(p[2][1] - p[0][1]) / two_area, (p[0][0] - p[2][0]) / two_area],
        [(p[0][1] - p[1][1]) / two_area, (p[1][0] - p[0][0]) / two_area],
    ]
}

/// Gradient of a nodal P1 field on element `e`.
pub fn field_gradient(mesh: &Mesh, e: usize, u: &[f64]) -> [f64; 2] {
    let g = hat_gradients(mesh, e);
    let t = mesh.elements()[e];
    let mut out = [0.0; 2];
    for k in 0..3 {
        out[0] += u[t[k]] * g[k][0];
        out[1] += u[t[k]] * g[k][1];
    }
    out
}

/// `∫_T φ_a φ_b φ_c / |T|` for local indices.
fn triple_weight(a: usize, b: usize, c: usize) -> f64 {
    if a == b && b == c {
        1.0 / 10.0
    } else if a == b || b == c || a == c {
        1.0 / 30.0
    } else {
        1.0 / 60.0
    }
}

/// Per-element mean of a nodal field; with constant hat gradients this makes
/// `∫ σ ∇φ_i·∇φ_j` exact for piecewise-linear `σ`.
pub fn element_means(mesh: &Mesh, nodal: &[f64]) -> Vec<f64> {
    mesh.elements()
        .iter()
        .map(|t| (nodal[t[0]] + nodal[t[1]] + nodal[t[2]]) / 3.0)
        .collect()
}

/// Stiffness matrix `K_ij = Σ_e c_e ∫_e ∇φ_i·∇φ_j`.
pub fn assemble_stiffness(mesh: &Mesh, coeff: Option<&[f64]>) -> Result<CsrMatrix> {
    if let Some(c) = coeff {
        check_dim("stiffness coefficient", mesh.num_elements(), c.len())?;
        if let Some(e) = c.iter().position(|v| !(*v > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "stiffness coefficient on element {e} is not positive ({})",
                c[e]
            )));
        }
    }
    let mut triplets = Vec::with_capacity(9 * mesh.num_elements());
    for (e, t) in mesh.elements().iter().enumerate() {
        let g = hat_gradients(mesh, e);
        let w = mesh.element_area(e) * coeff.map_or(1.0, |c| c[e]);
        for a in 0..3 {
            for b in 0..3 {
                triplets.push((t[a], t[b], w * (g[a][0] * g[b][0] + g[a][1] * g[b][1])));
            }
        }
    }
    CsrMatrix::from_triplets(mesh.num_nodes(), mesh.num_nodes(), &triplets)
}

/// Mass matrix `∫ a φ_i φ_j` with `a` a nodal P1 field (exact cubic
/// quadrature), or the plain mass matrix when `coeff` is `None`.
pub fn assemble_mass(mesh: &Mesh, coeff: Option<&[f64]>) -> Result<CsrMatrix> {
    if let Some(c) = coeff {
        check_dim("mass coefficient", mesh.num_nodes(), c.len())?;
    }
    let mut triplets = Vec::with_capacity(9 * mesh.num_elements());
    for (e, t) in mesh.elements().iter().enumerate() {
        let area = mesh.element_area(e);
        for a in 0..3 {
            for b in 0..3 {
                let v = match coeff {
                    None => area * if a == b { 1.0 / 6.0 } else { 1.0 / 12.0 },
                    Some(c) => area * (0..3).map(|k| c[t[k]] * triple_weight(a, b, k)).sum::<f64>(),
                };
                triplets.push((t[a], t[b], v));
            }
        }
    }
    CsrMatrix::from_triplets(mesh.num_nodes(), mesh.num_nodes(), &triplets)
}

/// Sparse matrix `T(u)` with `T(u)·a = M(a)·u`, i.e. the weighted mass action
/// as a linear map of the coefficient.
pub fn mass_action_matrix(mesh: &Mesh, u: &[f64]) -> Result<CsrMatrix> {
    check_dim("mass action field", mesh.num_nodes(), u.len())?;
    let mut triplets = Vec::with_capacity(9 * mesh.num_elements());
    for (e, t) in mesh.elements().iter().enumerate() {
        let area = mesh.element_area(e);
        for a in 0..3 {
            for k in 0..3 {
                let v: f64 = (0..3).map(|b| u[t[b]] * triple_weight(a, b, k)).sum();
                triplets.push((t[a], t[k], area * v));
            }
        }
    }
    CsrMatrix::from_triplets(mesh.num_nodes(), mesh.num_nodes(), &triplets)
}

/// `w_i = ∫ φ_i u v` for nodal P1 fields `u`, `v`.
pub fn triple_integral(mesh: &Mesh, u: &[f64], v: &[f64]) -> Vec<f64> {
    let mut w = vec![0.0; mesh.num_nodes()];
    for (e, t) in mesh.elements().iter().enumerate() {
        let area = mesh.element_area(e);
        for i in 0..3 {
            let mut acc = 0.0;
            for a in 0..3 {
                for b in 0..3 {
                    acc += u[t[a]] * v[t[b]] * triple_weight(i, a, b);
                }
            }
            w[t[i]] += area * acc;
        }
    }
    w
}

/// A system reduced by symmetric elimination of Dirichlet nodes.
#[derive(Clone, Debug)]
pub struct ReducedSystem {
    pub matrix: CsrMatrix,
    pub rhs: Vec<f64>,
    /// Unconstrained node indices, sorted; row `k` of the reduced system is
    /// node `free[k]`.
    pub free: Vec<usize>,
    prescribed: Vec<Option<f64>>,
}

impl ReducedSystem {
    /// Re-inserts the prescribed values into a full-length solution.
    pub fn lift(&self, u_free: &[f64]) -> Result<Vec<f64>> {
        check_dim("lift", self.free.len(), u_free.len())?;
        let mut full: Vec<f64> = self.prescribed.iter().map(|p| p.unwrap_or(0.0)).collect();
        for (k, &i) in self.free.iter().enumerate() {
            full[i] = u_free[k];
        }
        Ok(full)
    }

    pub fn num_nodes(&self) -> usize {
        self.prescribed.len()
    }
}

/// Eliminates constrained nodes from `K u = rhs`, moving their known values
/// to the right-hand side. Constraints must sit on boundary nodes.
pub fn apply_dirichlet(
    mesh: &Mesh,
    k: &CsrMatrix,
    rhs: &[f64],
    constraint: &BTreeMap<usize, f64>,
) -> Result<ReducedSystem> {
    let n = mesh.num_nodes();
    check_dim("dirichlet matrix", n, k.rows())?;
    check_dim("dirichlet rhs", n, rhs.len())?;
    let mut prescribed = vec![None; n];
    for (&node, &value) in constraint {
        if node >= n || !mesh.is_boundary(node) {
            return Err(Error::InvalidArgument(format!(
                "Dirichlet constraint on non-boundary node {node}"
            )));
        }
        prescribed[node] = Some(value);
    }
    let free: Vec<usize> = (0..n).filter(|&i| prescribed[i].is_none()).collect();
    let matrix = k.submatrix(&free, &free);
    let reduced_rhs = free
        .iter()
        .map(|&i| {
            let mut b = rhs[i];
            for (j, v) in k.row(i) {
                if let Some(g) = prescribed[j] {
                    b -= v * g;
                }
            }
            b
        })
        .collect();
    Ok(ReducedSystem {
        matrix,
        rhs: reduced_rhs,
        free,
        prescribed,
    })
}

/// Discrete boundary flux pairing `Σ_{b ∈ ∂D} g_b (A u)_b`, the variational
/// recovery of `∫_∂D g ∂u/∂ν` for the operator `A` that `u` solves in the
/// interior. `g` holds nodal values; interior entries are ignored.
pub fn boundary_flux_pairing(mesh: &Mesh, a_full: &CsrMatrix, u: &[f64], g: &[f64]) -> Result<f64> {
    check_dim("flux pairing field", mesh.num_nodes(), u.len())?;
    check_dim("flux pairing boundary data", mesh.num_nodes(), g.len())?;
    let mut acc = 0.0;
    for &b in mesh.boundary_nodes() {
        let au: f64 = a_full.row(b).map(|(j, v)| v * u[j]).sum();
        acc += g[b] * au;
    }
    Ok(acc)
}

/// Symmetric energy pairing `uᵀ A v`.
pub fn energy_pairing(a_full: &CsrMatrix, u: &[f64], v: &[f64]) -> Result<f64> {
    Ok(dot(u, &a_full.spmv(v)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{generate_l_shape, generate_unit_square};
    use crate::sparse::solve_spd;
    use std::f64::consts::PI;

    fn reference_triangle() -> Mesh {
        Mesh::new(vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], vec![[0, 1, 2]]).unwrap()
    }

    #[test]
    fn reference_element_stiffness() {
        let k = assemble_stiffness(&reference_triangle(), None).unwrap().to_dense();
        let want = [1.0, -0.5, -0.5, -0.5, 0.5, 0.0, -0.5, 0.0, 0.5];
        for (a, b) in k.iter().zip(want) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn reference_element_mass() {
        let m = assemble_mass(&reference_triangle(), None).unwrap().to_dense();
        let want = [2.0, 1.0, 1.0, 1.0, 2.0, 1.0, 1.0, 1.0, 2.0].map(|v| v / 24.0);
        for (a, b) in m.iter().zip(want) {
            assert!((a - b).abs() < 1e-14);
        }
        // unit nodal coefficient reproduces the plain mass matrix
        let m1 = assemble_mass(&reference_triangle(), Some(&[1.0; 3])).unwrap().to_dense();
        for (a, b) in m1.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn stiffness_properties() {
        let mesh = generate_l_shape(6).unwrap();
        let k = assemble_stiffness(&mesh, None).unwrap();
        assert!(k.asymmetry() < 1e-14);
        let ones = vec![1.0; mesh.num_nodes()];
        assert!(k.spmv(&ones).unwrap().iter().all(|v| v.abs() < 1e-12));
        let k2 = assemble_stiffness(&mesh, Some(&vec![2.0; mesh.num_elements()])).unwrap();
        assert_eq!(k2, k.scaled(2.0));
        assert!(assemble_stiffness(&mesh, Some(&vec![0.0; mesh.num_elements()])).is_err());
    }

    #[test]
    fn mass_properties() {
        let mesh = generate_l_shape(6).unwrap();
        let m = assemble_mass(&mesh, None).unwrap();
        let ones = vec![1.0; mesh.num_nodes()];
        let row_sums = m.spmv(&ones).unwrap();
        assert!(row_sums.iter().all(|v| *v > 0.0));
        assert!((dot(&ones, &row_sums) - 0.75).abs() < 1e-12);
        let zero = assemble_mass(&mesh, Some(&vec![0.0; mesh.num_nodes()])).unwrap();
        assert_eq!(zero.nnz(), 0);
    }

    #[test]
    fn mass_action_is_linear_in_coefficient() {
        let mesh = generate_unit_square(3).unwrap();
        let n = mesh.num_nodes();
        let u: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let a: Vec<f64> = (0..n).map(|i| (i as f64 * 0.11).cos()).collect();
        let direct = assemble_mass(&mesh, Some(&a)).unwrap().spmv(&u).unwrap();
        let via = mass_action_matrix(&mesh, &u).unwrap().spmv(&a).unwrap();
        for (x, y) in direct.iter().zip(&via) {
            assert!((x - y).abs() < 1e-14);
        }
        let w = triple_integral(&mesh, &u, &u);
        for (i, wi) in w.iter().enumerate() {
            let mut e = vec![0.0; n];
            e[i] = 1.0;
            let mi = assemble_mass(&mesh, Some(&e)).unwrap();
            assert!((wi - dot(&u, &mi.spmv(&u).unwrap())).abs() < 1e-14);
        }
    }

    #[test]
    fn dirichlet_all_constrained() {
        let mesh = reference_triangle();
        let k = assemble_stiffness(&mesh, None).unwrap();
        let c: BTreeMap<usize, f64> = [(0, 1.0), (1, 2.0), (2, 3.0)].into();
        let sys = apply_dirichlet(&mesh, &k, &[0.0; 3], &c).unwrap();
        assert!(sys.free.is_empty());
        assert_eq!(sys.lift(&[]).unwrap(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn dirichlet_zero_data_restricts_rhs() {
        let mesh = generate_unit_square(3).unwrap();
        let k = assemble_stiffness(&mesh, None).unwrap();
        let rhs: Vec<f64> = (0..mesh.num_nodes()).map(|i| i as f64).collect();
        let c: BTreeMap<usize, f64> = mesh.boundary_nodes().iter().map(|&b| (b, 0.0)).collect();
        let sys = apply_dirichlet(&mesh, &k, &rhs, &c).unwrap();
        let want: Vec<f64> = sys.free.iter().map(|&i| rhs[i]).collect();
        assert_eq!(sys.rhs, want);
        let interior = mesh.interior_nodes()[0];
        let bad: BTreeMap<usize, f64> = [(interior, 1.0)].into();
        assert!(apply_dirichlet(&mesh, &k, &rhs, &bad).is_err());
    }

    #[test]
    fn dirichlet_path_analog() {
        // 1-D Laplace stencil on the path 0-1-2 with u(0) = 0, u(2) = 1, plus a
        // decoupled node 3; a two-triangle mesh supplies the boundary bookkeeping
        let mesh = Mesh::new(
            vec![[0.0, 0.0], [0.5, 0.0], [1.0, 0.0], [0.5, 1.0]],
            vec![[0, 1, 3], [1, 2, 3]],
        )
        .unwrap();
        let kk = CsrMatrix::from_dense(
            4,
            4,
            &[1.0, -1.0, 0.0, 0.0, -1.0, 2.0, -1.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        // node 1 is on the strip boundary, so only nodes 0, 2, 3 are constrained
        let c: BTreeMap<usize, f64> = [(0, 0.0), (2, 1.0), (3, 0.0)].into();
        let sys = apply_dirichlet(&mesh, &kk, &[0.0; 4], &c).unwrap();
        let u = solve_spd(&sys.matrix, &sys.rhs, 1e-14).unwrap();
        let full = sys.lift(&u).unwrap();
        assert!((full[1] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn flux_pairing_of_constant_vanishes() {
        let mesh = generate_unit_square(4).unwrap();
        let k = assemble_stiffness(&mesh, None).unwrap();
        let u = vec![3.0; mesh.num_nodes()];
        let g: Vec<f64> = mesh.nodes().iter().map(|p| p[0]).collect();
        assert!(boundary_flux_pairing(&mesh, &k, &u, &g).unwrap().abs() < 1e-13);
    }

    #[test]
    fn flux_pairing_of_linear_field_matches_dense_oracle() {
        let mesh = generate_unit_square(4).unwrap();
        let k = assemble_stiffness(&mesh, None).unwrap();
        let u: Vec<f64> = mesh.nodes().iter().map(|p| p[0]).collect();
        let pairing = boundary_flux_pairing(&mesh, &k, &u, &u).unwrap();
        // dense oracle: uᵀ K u over the full matrix equals ∫|∇u|² = 1 because
        // K u vanishes at interior nodes for a linear field
        let dense = k.to_dense();
        let n = mesh.num_nodes();
        let mut oracle = 0.0;
        for i in 0..n {
            for j in 0..n {
                oracle += u[i] * dense[i * n + j] * u[j];
            }
        }
        assert!((pairing - oracle).abs() < 1e-10);
        assert!((pairing - 1.0).abs() < 1e-10);
    }

    fn poisson_max_error(n: usize) -> f64 {
        let mesh = generate_unit_square(n).unwrap();
        let k = assemble_stiffness(&mesh, None).unwrap();
        let m = assemble_mass(&mesh, None).unwrap();
        let exact: Vec<f64> = mesh.nodes().iter().map(|p| (PI * p[0]).sin() * (PI * p[1]).sin()).collect();
        let a: Vec<f64> = exact.iter().map(|u| -2.0 * PI * PI * u).collect();
        let rhs: Vec<f64> = m.spmv(&a).unwrap().iter().map(|v| -v).collect();
        let c: BTreeMap<usize, f64> = mesh.boundary_nodes().iter().map(|&b| (b, 0.0)).collect();
        let sys = apply_dirichlet(&mesh, &k, &rhs, &c).unwrap();
        let u = sys.lift(&solve_spd(&sys.matrix, &sys.rhs, 1e-13).unwrap()).unwrap();
        u.iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn manufactured_solution_converges_quadratically() {
        let errs: Vec<f64> = [8, 16, 32].iter().map(|&n| poisson_max_error(n)).collect();
        for w in errs.windows(2) {
            let order = (w[0] / w[1]).log2();
            assert!((1.7..=2.3).contains(&order), "order {order}, errors {errs:?}");
        }
    }
}
