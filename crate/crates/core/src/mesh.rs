//! Triangular meshes, their induced graphs, graph Laplacians and positional
//! encodings.
//!
//! A [`Mesh`] is a conforming triangulation with counter-clockwise elements.
//! Boundary edges are derived from the elements (an edge used by exactly one
//! element) and ordered into loops; the first loop starts at the
//! lowest-indexed boundary node and runs counter-clockwise, and each edge
//! carries its normalized arclength position `s ∈ [0, 1)`.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

/// Fraction of the boundary covered by electrodes in [`generate_disk`].
pub const DEFAULT_ELECTRODE_COVERAGE: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundaryEdge {
    pub start: usize,
    pub end: usize,
    /// Normalized arclength of `start` along the boundary.
    pub s_start: f64,
    pub length: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    nodes: Vec<[f64; 2]>,
    elements: Vec<[usize; 3]>,
    boundary_nodes: Vec<usize>,
    boundary_edges: Vec<BoundaryEdge>,
    /// Electrode index (0-based) per boundary edge, `None` for gaps.
    electrodes: Option<Vec<Option<usize>>>,
}

impl Mesh {
    /// Validates and builds a mesh from raw nodes and elements.
    pub fn new(nodes: Vec<[f64; 2]>, elements: Vec<[usize; 3]>) -> Result<Self> {
        if nodes.is_empty() || elements.is_empty() {
            return Err(Error::InvalidMesh("mesh needs nodes and elements".into()));
        }
        for (e, tri) in elements.iter().enumerate() {
            if tri.iter().any(|&i| i >= nodes.len()) {
                return Err(Error::InvalidMesh(format!("element {e} references a missing node")));
            }
            let area = signed_area(&nodes, tri);
            if area <= 0.0 || !area.is_finite() {
                return Err(Error::InvalidMesh(format!(
                    "element {e} has non-positive signed area {area:.3e}"
                )));
            }
        }
        let boundary_edges = boundary_loops(&nodes, &elements)?;
        let boundary_nodes: BTreeSet<usize> = boundary_edges.iter().map(|e| e.start).collect();
        let mesh = Self {
            nodes,
            elements,
            boundary_nodes: boundary_nodes.into_iter().collect(),
            boundary_edges,
            electrodes: None,
        };
        if !mesh.to_graph().is_connected() {
            return Err(Error::InvalidMesh("element graph is not connected".into()));
        }
        Ok(mesh)
    }

    /// Attaches an electrode assignment, one entry per boundary edge.
    pub fn with_electrodes(mut self, map: Vec<Option<usize>>) -> Result<Self> {
        if map.len() != self.boundary_edges.len() {
            return Err(Error::DimensionMismatch {
                context: "electrode map",
                expected: self.boundary_edges.len(),
                found: map.len(),
            });
        }
        let count = map.iter().flatten().max().map_or(0, |m| m + 1);
        for l in 0..count {
            if !map.contains(&Some(l)) {
                return Err(Error::InvalidMesh(format!("electrode {} covers no boundary edge", l + 1)));
            }
        }
        self.electrodes = Some(map);
        Ok(self)
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_elements(&self) -> usize {
        self.elements.len()
    }

    pub fn nodes(&self) -> &[[f64; 2]] {
        &self.nodes
    }

    pub fn elements(&self) -> &[[usize; 3]] {
        &self.elements
    }

    /// Sorted indices of nodes on the boundary.
    pub fn boundary_nodes(&self) -> &[usize] {
        &self.boundary_nodes
    }

    pub fn boundary_edges(&self) -> &[BoundaryEdge] {
        &self.boundary_edges
    }

    pub fn is_boundary(&self, node: usize) -> bool {
        self.boundary_nodes.binary_search(&node).is_ok()
    }

    /// Sorted indices of interior nodes.
    pub fn interior_nodes(&self) -> Vec<usize> {
        (0..self.num_nodes()).filter(|&i| !self.is_boundary(i)).collect()
    }

    /// `(node, s)` pairs in boundary order.
    pub fn boundary_arclength(&self) -> Vec<(usize, f64)> {
        self.boundary_edges.iter().map(|e| (e.start, e.s_start)).collect()
    }

    pub fn electrode_map(&self) -> Option<&[Option<usize>]> {
        self.electrodes.as_deref()
    }

    pub fn num_electrodes(&self) -> usize {
        self.electrodes
            .as_ref()
            .and_then(|m| m.iter().flatten().max().map(|l| l + 1))
            .unwrap_or(0)
    }

    pub fn element_area(&self, e: usize) -> f64 {
        signed_area(&self.nodes, &self.elements[e])
    }

    pub fn total_area(&self) -> f64 {
        (0..self.num_elements()).map(|e| self.element_area(e)).sum()
    }

    /// Builds the undirected graph of element edges.
    pub fn to_graph(&self) -> Graph {
        let mut adjacency: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); self.num_nodes()];
        for tri in &self.elements {
            for k in 0..3 {
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                adjacency[a].insert(b);
                adjacency[b].insert(a);
            }
        }
        Graph::from_adjacency(adjacency)
    }

    /// Applies a node relabeling: new node `perm[i]` is old node `i`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(perm, self.num_nodes())?;
        let mut nodes = vec![[0.0; 2]; self.num_nodes()];
        for (old, &new) in perm.iter().enumerate() {
            nodes[new] = self.nodes[old];
        }
        let elements = self
            .elements
            .iter()
            .map(|t| [perm[t[0]], perm[t[1]], perm[t[2]]])
            .collect();
        let mut boundary_nodes: Vec<usize> = self.boundary_nodes.iter().map(|&b| perm[b]).collect();
        boundary_nodes.sort_unstable();
        let boundary_edges = self
            .boundary_edges
            .iter()
            .map(|e| BoundaryEdge {
                start: perm[e.start],
                end: perm[e.end],
                ..*e
            })
            .collect();
        Ok(Self {
            nodes,
            elements,
            boundary_nodes,
            boundary_edges,
            electrodes: self.electrodes.clone(),
        })
    }

    /// Reads the whitespace-separated text format.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "nodes {}", self.num_nodes());
        for (i, p) in self.nodes.iter().enumerate() {
            let _ = writeln!(s, "{} {} {}", p[0], p[1], u8::from(self.is_boundary(i)));
        }
        let _ = writeln!(s, "elements {}", self.num_elements());
        for t in &self.elements {
            let _ = writeln!(s, "{} {} {}", t[0], t[1], t[2]);
        }
        if let Some(map) = &self.electrodes {
            let _ = writeln!(s, "electrodes {}", self.num_electrodes());
            for e in map {
                match e {
                    Some(l) => {
                        let _ = writeln!(s, "{}", l + 1);
                    }
                    None => s.push_str("-1\n"),
                }
            }
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut tokens = text.split_whitespace();
        let mut next = |what: &str| {
            tokens
                .next()
                .ok_or_else(|| Error::Parse(format!("unexpected end of mesh file, expected {what}")))
        };
        fn num<T: std::str::FromStr>(tok: &str, what: &str) -> Result<T> {
            tok.parse()
                .map_err(|_| Error::Parse(format!("cannot parse {what} from '{tok}'")))
        }
        expect_keyword(next("'nodes'")?, "nodes")?;
        let n: usize = num(next("node count")?, "node count")?;
        let mut nodes = Vec::with_capacity(n);
        let mut flags = Vec::with_capacity(n);
        for _ in 0..n {
            let x: f64 = num(next("x")?, "x coordinate")?;
            let y: f64 = num(next("y")?, "y coordinate")?;
            let flag: u8 = num(next("boundary flag")?, "boundary flag")?;
            nodes.push([x, y]);
            flags.push(flag != 0);
        }
        expect_keyword(next("'elements'")?, "elements")?;
        let m: usize = num(next("element count")?, "element count")?;
        let mut elements = Vec::with_capacity(m);
        for _ in 0..m {
            let i = num(next("vertex")?, "vertex index")?;
            let j = num(next("vertex")?, "vertex index")?;
            let k = num(next("vertex")?, "vertex index")?;
            elements.push([i, j, k]);
        }
        let electrode_header = next("'electrodes' or end").ok();
        let mut mesh = Self::new(nodes, elements)?;
        for (i, &flag) in flags.iter().enumerate() {
            if flag != mesh.is_boundary(i) {
                return Err(Error::InvalidMesh(format!(
                    "boundary flag of node {i} disagrees with the element topology"
                )));
            }
        }
        if let Some(tok) = electrode_header {
            expect_keyword(tok, "electrodes")?;
            let count: usize = num(next("electrode count")?, "electrode count")?;
            let mut map = Vec::with_capacity(mesh.boundary_edges.len());
            for _ in 0..mesh.boundary_edges.len() {
                let idx: i64 = num(next("electrode index")?, "electrode index")?;
                map.push(match idx {
                    -1 => None,
                    l if l >= 1 && (l as usize) <= count => Some(l as usize - 1),
                    l => return Err(Error::Parse(format!("electrode index {l} out of range"))),
                });
            }
            mesh = mesh.with_electrodes(map)?;
        }
        Ok(mesh)
    }
}

fn expect_keyword(tok: &str, keyword: &str) -> Result<()> {
    if tok == keyword {
        Ok(())
    } else {
        Err(Error::Parse(format!("expected '{keyword}', found '{tok}'")))
    }
}

pub(crate) fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    if perm.len() != n {
        return Err(Error::DimensionMismatch {
            context: "permutation",
            expected: n,
            found: perm.len(),
        });
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || std::mem::replace(&mut seen[p], true) {
            return Err(Error::InvalidArgument("not a permutation".into()));
        }
    }
    Ok(())
}

fn signed_area(nodes: &[[f64; 2]], tri: &[usize; 3]) -> f64 {
    let [a, b, c] = [nodes[tri[0]], nodes[tri[1]], nodes[tri[2]]];
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}

fn boundary_loops(nodes: &[[f64; 2]], elements: &[[usize; 3]]) -> Result<Vec<BoundaryEdge>> {
    let mut counts: BTreeMap<(usize, usize), (usize, (usize, usize))> = BTreeMap::new();
    for tri in elements {
        for k in 0..3 {
            let (a, b) = (tri[k], tri[(k + 1) % 3]);
            let key = (a.min(b), a.max(b));
            let entry = counts.entry(key).or_insert((0, (a, b)));
            entry.0 += 1;
        }
    }
    let mut next: BTreeMap<usize, usize> = BTreeMap::new();
    for (key, (count, oriented)) in &counts {
        match count {
            1 => {
                if next.insert(oriented.0, oriented.1).is_some() {
                    return Err(Error::InvalidMesh(format!(
                        "boundary is pinched at node {}",
                        oriented.0
                    )));
                }
            }
            2 => {}
            _ => {
                return Err(Error::InvalidMesh(format!(
                    "edge {:?} shared by {count} elements",
                    key
                )))
            }
        }
    }
    if next.is_empty() {
        return Err(Error::InvalidMesh("mesh has no boundary".into()));
    }
    let mut loops: Vec<Vec<usize>> = Vec::new();
    let mut visited = BTreeSet::new();
    for &start in next.keys() {
        if visited.contains(&start) {
            continue;
        }
        let mut lp = vec![start];
        visited.insert(start);
        let mut cur = next[&start];
        while cur != start {
            if !visited.insert(cur) {
                return Err(Error::InvalidMesh("boundary edges do not form closed loops".into()));
            }
            lp.push(cur);
            cur = *next
                .get(&cur)
                .ok_or_else(|| Error::InvalidMesh("open boundary chain".into()))?;
        }
        loops.push(lp);
    }
    let dist = |a: usize, b: usize| {
        let (p, q) = (nodes[a], nodes[b]);
        ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
    };
    let total: f64 = next.iter().map(|(&a, &b)| dist(a, b)).sum();
    let mut edges = Vec::with_capacity(next.len());
    let mut acc = 0.0;
    for lp in loops {
        for (k, &a) in lp.iter().enumerate() {
            let b = lp[(k + 1) % lp.len()];
            let length = dist(a, b);
            edges.push(BoundaryEdge {
                start: a,
                end: b,
                s_start: acc / total,
                length,
            });
            acc += length;
        }
    }
    Ok(edges)
}

/// Structured triangulation of the unit square with `n` cells per side;
/// cell diagonals alternate in a checkerboard pattern.
pub fn generate_unit_square(n: usize) -> Result<Mesh> {
    if n == 0 {
        return Err(Error::InvalidArgument("unit square needs n >= 1".into()));
    }
    grid_mesh(n, |_, _| true)
}

/// L-shaped domain `[0,1]² \ (0.5,1]²` on a grid with `n` cells per side.
pub fn generate_l_shape(n: usize) -> Result<Mesh> {
    if n < 2 || n % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "L-shape needs an even n >= 2 so the re-entrant corner is a node, got {n}"
        )));
    }
    let half = n / 2;
    grid_mesh(n, |i, j| !(i >= half && j >= half))
}

fn grid_mesh(n: usize, keep_cell: impl Fn(usize, usize) -> bool) -> Result<Mesh> {
    let side = n + 1;
    let mut used = vec![false; side * side];
    let mut cells = Vec::new();
    for j in 0..n {
        for i in 0..n {
            if keep_cell(i, j) {
                let ll = j * side + i;
                let corners = [ll, ll + 1, ll + side + 1, ll + side];
                for c in corners {
                    used[c] = true;
                }
                cells.push((i, j, corners));
            }
        }
    }
    let mut index = vec![usize::MAX; side * side];
    let mut nodes = Vec::new();
    for j in 0..side {
        for i in 0..side {
            if used[j * side + i] {
                index[j * side + i] = nodes.len();
                nodes.push([i as f64 / n as f64, j as f64 / n as f64]);
            }
        }
    }
    let mut elements = Vec::with_capacity(2 * cells.len());
    for (i, j, c) in cells {
        let [ll, lr, ur, ul] = c.map(|k| index[k]);
        if (i + j) % 2 == 0 {
            elements.push([ll, lr, ur]);
            elements.push([ll, ur, ul]);
        } else {
            elements.push([ll, lr, ul]);
            elements.push([lr, ur, ul]);
        }
    }
    Mesh::new(nodes, elements)
}

/// Concentric-ring triangulation of the unit disk with `6r` nodes on ring
/// `r` and `6·n_rings²` elements, plus evenly spaced electrodes covering
/// half of the boundary.
pub fn generate_disk(n_rings: usize, num_electrodes: usize) -> Result<Mesh> {
    generate_disk_with_coverage(n_rings, num_electrodes, DEFAULT_ELECTRODE_COVERAGE)
}

pub fn generate_disk_with_coverage(n_rings: usize, num_electrodes: usize, coverage: f64) -> Result<Mesh> {
    if n_rings < 2 {
        return Err(Error::InvalidArgument("disk needs at least 2 rings".into()));
    }
    if num_electrodes < 2 {
        return Err(Error::InvalidArgument("disk needs at least 2 electrodes".into()));
    }
    if !(coverage > 0.0 && coverage < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "electrode coverage {coverage} must lie in (0, 1) so that gaps remain"
        )));
    }
    let mut nodes = vec![[0.0, 0.0]];
    let mut ring_start = vec![0usize];
    for r in 1..=n_rings {
        ring_start.push(nodes.len());
        let count = 6 * r;
        let radius = r as f64 / n_rings as f64;
        for k in 0..count {
            let t = 2.0 * PI * k as f64 / count as f64;
            nodes.push([radius * t.cos(), radius * t.sin()]);
        }
    }
    let ring_node = |r: usize, k: usize| {
        if r == 0 {
            0
        } else {
            ring_start[r] + k % (6 * r)
        }
    };
    let mut elements = Vec::with_capacity(6 * n_rings * n_rings);
    for r in 1..=n_rings {
        for s in 0..6 {
            let inner = |t: usize| ring_node(r - 1, s * (r - 1) + t);
            let outer = |t: usize| ring_node(r, s * r + t);
            for t in 0..r {
                elements.push([outer(t), outer(t + 1), inner(t)]);
            }
            for t in 0..r.saturating_sub(1) {
                elements.push([inner(t), outer(t + 1), inner(t + 1)]);
            }
        }
    }
    let mesh = Mesh::new(nodes, elements)?;
    let map = electrode_assignment(&mesh, num_electrodes, coverage)?;
    mesh.with_electrodes(map)
}

/// Assigns boundary edges to `count` equal-arclength electrode patches
/// centred at `s = l / count`, covering `coverage` of the boundary.
pub fn electrode_assignment(mesh: &Mesh, count: usize, coverage: f64) -> Result<Vec<Option<usize>>> {
    if coverage > 1.0 {
        return Err(Error::InvalidArgument(format!(
            "electrode coverage {coverage} exceeds 100%"
        )));
    }
    let half_width = 0.5 * coverage;
    let perimeter = boundary_length(mesh);
    let map: Vec<Option<usize>> = mesh
        .boundary_edges
        .iter()
        .map(|e| {
            let mid = e.s_start + 0.5 * e.length / perimeter;
            let pos = mid * count as f64;
            let nearest = pos.round();
            if (pos - nearest).abs() < half_width {
                Some(nearest as usize % count)
            } else {
                None
            }
        })
        .collect();
    for l in 0..count {
        if !map.contains(&Some(l)) {
            return Err(Error::InvalidArgument(format!(
                "boundary too coarse: electrode {} receives no edge",
                l + 1
            )));
        }
    }
    Ok(map)
}

fn boundary_length(mesh: &Mesh) -> f64 {
    mesh.boundary_edges.iter().map(|e| e.length).sum()
}

/// Undirected simple graph stored as sorted neighbour lists.
///
/// The neighbour lists double as a directed edge list: directed edge `k`
/// runs from [`Graph::edge_sources`]`[k]` to [`Graph::edge_targets`]`[k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    offsets: Vec<usize>,
    targets: Vec<usize>,
    sources: Vec<usize>,
}

impl Graph {
    fn from_adjacency(adjacency: Vec<BTreeSet<usize>>) -> Self {
        let num_nodes = adjacency.len();
        let mut offsets = vec![0];
        let mut targets = Vec::new();
        let mut sources = Vec::new();
        let mut edges = Vec::new();
        for (i, nbrs) in adjacency.iter().enumerate() {
            for &j in nbrs {
                targets.push(j);
                sources.push(i);
                if i < j {
                    edges.push((i, j));
                }
            }
            offsets.push(targets.len());
        }
        Self {
            num_nodes,
            edges,
            offsets,
            targets,
            sources,
        }
    }

    /// Builds a graph from undirected edges; self-loops are rejected.
    pub fn from_edges(num_nodes: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut adjacency = vec![BTreeSet::new(); num_nodes];
        for &(a, b) in edges {
            if a == b || a >= num_nodes || b >= num_nodes {
                return Err(Error::InvalidArgument(format!("invalid edge ({a}, {b})")));
            }
            adjacency[a].insert(b);
            adjacency[b].insert(a);
        }
        Ok(Self::from_adjacency(adjacency))
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    /// Undirected edges `(i, j)` with `i < j`, sorted.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.targets[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    /// Offsets into the directed edge list, grouped by source node.
    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn edge_sources(&self) -> &[usize] {
        &self.sources
    }

    pub fn edge_targets(&self) -> &[usize] {
        &self.targets
    }

    pub fn num_directed_edges(&self) -> usize {
        self.targets.len()
    }

    pub fn is_connected(&self) -> bool {
        if self.num_nodes == 0 {
            return true;
        }
        let mut seen = vec![false; self.num_nodes];
        let mut stack = vec![0];
        seen[0] = true;
        let mut count = 1;
        while let Some(i) = stack.pop() {
            for &j in self.neighbors(i) {
                if !seen[j] {
                    seen[j] = true;
                    count += 1;
                    stack.push(j);
                }
            }
        }
        count == self.num_nodes
    }
}

/// Unnormalized graph Laplacian `L = D − A`.
pub fn graph_laplacian(graph: &Graph) -> CsrMatrix {
    let mut triplets = Vec::with_capacity(graph.num_nodes() + graph.num_directed_edges());
    for i in 0..graph.num_nodes() {
        triplets.push((i, i, graph.degree(i) as f64));
        for &j in graph.neighbors(i) {
            triplets.push((i, j, -1.0));
        }
    }
    CsrMatrix::from_triplets(graph.num_nodes(), graph.num_nodes(), &triplets)
        .expect("graph indices are in range")
}

/// Row-major `N × (2 + k)` node features: coordinates followed by Laplacian
/// eigenvectors.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalEncoding {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl PositionalEncoding {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.data[i * self.cols + c]).collect()
    }

    /// Relabels rows: new row `perm[i]` is old row `i`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(perm, self.rows)?;
        let mut data = vec![0.0; self.data.len()];
        for (old, &new) in perm.iter().enumerate() {
            data[new * self.cols..(new + 1) * self.cols].copy_from_slice(self.row(old));
        }
        Ok(Self { data, ..*self })
    }
}

/// Eigenpairs of the graph Laplacian in ascending eigenvalue order, with the
/// sign of each eigenvector fixed so its first non-negligible entry is
/// positive.
pub fn laplacian_eigenpairs(graph: &Graph) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let n = graph.num_nodes();
    let lap = graph_laplacian(graph);
    let dense = DMatrix::from_row_slice(n, n, &lap.to_dense());
    let eig = dense
        .try_symmetric_eigen(1e-14, 100 * n.max(10))
        .ok_or_else(|| Error::NonConvergence {
            iterations: 100 * n.max(10),
            residual: f64::NAN,
        })?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vectors = order
        .iter()
        .map(|&k| {
            let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
            let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            if let Some(first) = v.iter().find(|x| x.abs() > 1e-8 * scale) {
                if *first < 0.0 {
                    v.iter_mut().for_each(|x| *x = -*x);
                }
            }
            v
        })
        .collect();
    Ok((values, vectors))
}

/// Node coordinates plus the `k` eigenvectors of the unnormalized Laplacian
/// with the smallest nonzero eigenvalues (unit norm, sign-normalized).
pub fn positional_encoding(mesh: &Mesh, k: usize) -> Result<PositionalEncoding> {
    let graph = mesh.to_graph();
    let n = graph.num_nodes();
    if k >= n {
        return Err(Error::InvalidArgument(format!(
            "requested {k} eigenvectors on a graph with {n} nodes"
        )));
    }
    let vectors = if k == 0 {
        Vec::new()
    } else {
        let (_, vecs) = laplacian_eigenpairs(&graph)?;
        // connected graph: exactly one zero eigenvalue, skip it
        vecs.into_iter().skip(1).take(k).collect::<Vec<_>>()
    };
    let cols = 2 + k;
    let mut data = Vec::with_capacity(n * cols);
    for i in 0..n {
        data.extend_from_slice(&mesh.nodes[i]);
        for v in &vectors {
            data.push(v[i]);
        }
    }
    Ok(PositionalEncoding { rows: n, cols, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_triangle() -> Mesh {
        Mesh::new(vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], vec![[0, 1, 2]]).unwrap()
    }

    #[test]
    fn unit_square_smallest() {
        let m = generate_unit_square(1).unwrap();
        assert_eq!(m.num_nodes(), 4);
        assert_eq!(m.num_elements(), 2);
        assert_eq!(m.boundary_nodes().len(), 4);
        let g = m.to_graph();
        assert_eq!(g.edges().len(), 5);
        assert!(generate_unit_square(0).is_err());
    }

    #[test]
    fn unit_square_counts_and_area() {
        let m = generate_unit_square(2).unwrap();
        assert_eq!(m.total_area(), 1.0);
        let m = generate_unit_square(28).unwrap();
        assert_eq!(m.num_nodes(), 29 * 29);
        assert_eq!(m.num_elements(), 1568);
        assert!((m.num_elements() as f64 - 1578.0).abs() / 1578.0 < 0.1);
    }

    #[test]
    fn unit_square_boundary_starts_at_origin_ccw() {
        let m = generate_unit_square(4).unwrap();
        let b = m.boundary_edges();
        assert_eq!(m.nodes()[b[0].start], [0.0, 0.0]);
        assert_eq!(b[0].s_start, 0.0);
        // first step runs along y = 0 in +x direction
        assert_eq!(m.nodes()[b[0].end], [0.25, 0.0]);
        assert!(b.windows(2).all(|w| w[0].s_start < w[1].s_start && w[0].end == w[1].start));
        assert_eq!(b.last().unwrap().end, b[0].start);
    }

    #[test]
    fn l_shape_geometry() {
        let m = generate_l_shape(2).unwrap();
        assert_eq!(m.num_elements(), 6);
        assert!((m.total_area() - 0.75).abs() < 1e-14);
        let m = generate_l_shape(36).unwrap();
        assert_eq!(m.num_elements(), 1944);
        assert!((m.num_elements() as f64 - 1990.0).abs() / 1990.0 < 0.1);
        for n in [2, 4, 10] {
            let m = generate_l_shape(n).unwrap();
            assert!(m.nodes().contains(&[0.5, 0.5]));
            assert!(m.is_boundary(m.nodes().iter().position(|p| *p == [0.5, 0.5]).unwrap()));
        }
        assert!(generate_l_shape(3).is_err());
        assert!(generate_l_shape(0).is_err());
    }

    #[test]
    fn disk_boundary_on_unit_circle() {
        let m = generate_disk(2, 4).unwrap();
        for &b in m.boundary_nodes() {
            let p = m.nodes()[b];
            assert!(((p[0] * p[0] + p[1] * p[1]).sqrt() - 1.0).abs() < 1e-12);
        }
        assert_eq!(m.num_elements(), 24);
        assert_eq!(m.num_electrodes(), 4);
    }

    #[test]
    fn disk_element_count_near_reference() {
        let m = generate_disk(29, 16).unwrap();
        assert_eq!(m.num_elements(), 6 * 29 * 29);
        assert!((m.num_elements() as f64 - 4984.0).abs() / 4984.0 < 0.1);
        let deficit = PI - m.total_area();
        assert!(deficit > 0.0 && deficit < 10.0 / (29.0 * 29.0));
    }

    #[test]
    fn sixteen_electrodes_are_disjoint_patches() {
        let m = generate_disk(16, 16).unwrap();
        let map = m.electrode_map().unwrap();
        assert_eq!(m.num_electrodes(), 16);
        let perimeter: f64 = m.boundary_edges().iter().map(|e| e.length).sum();
        for l in 0..16 {
            let idx: Vec<usize> = (0..map.len()).filter(|&k| map[k] == Some(l)).collect();
            // contiguous (cyclically) patch
            let breaks = idx.windows(2).filter(|w| w[1] != w[0] + 1).count();
            assert!(breaks <= 1);
            let len: f64 = idx.iter().map(|&k| m.boundary_edges()[k].length).sum();
            let frac = len / perimeter;
            assert!((frac - 1.0 / 32.0).abs() <= 2.0 / map.len() as f64, "electrode {l}: {frac}");
        }
        assert!(generate_disk_with_coverage(8, 16, 1.2).is_err());
        assert!(electrode_assignment(&m, 16, 1.5).is_err());
    }

    #[test]
    fn triangle_graph() {
        let g = single_triangle().to_graph();
        assert_eq!(g.num_nodes(), 3);
        assert_eq!(g.edges(), &[(0, 1), (0, 2), (1, 2)]);
        let l = graph_laplacian(&g);
        assert_eq!(l.to_dense(), vec![2.0, -1.0, -1.0, -1.0, 2.0, -1.0, -1.0, -1.0, 2.0]);
    }

    #[test]
    fn graph_edge_count_matches_brute_force() {
        for m in [generate_l_shape(6).unwrap(), generate_disk(4, 8).unwrap()] {
            let mut distinct = Vec::new();
            for t in m.elements() {
                for k in 0..3 {
                    let (a, b) = (t[k], t[(k + 1) % 3]);
                    let e = (a.min(b), a.max(b));
                    if !distinct.contains(&e) {
                        distinct.push(e);
                    }
                }
            }
            let g = m.to_graph();
            assert_eq!(g.edges().len(), distinct.len());
            assert_eq!(g.num_nodes(), m.num_nodes());
            for i in m.interior_nodes() {
                assert!(g.degree(i) >= 3);
            }
        }
    }

    #[test]
    fn laplacian_rows_sum_to_zero_and_psd() {
        let m = generate_l_shape(4).unwrap();
        let g = m.to_graph();
        let l = graph_laplacian(&g);
        let ones = vec![1.0; g.num_nodes()];
        assert!(l.spmv(&ones).unwrap().iter().all(|v| *v == 0.0));
        assert_eq!(l.asymmetry(), 0.0);
        let (vals, _) = laplacian_eigenpairs(&g).unwrap();
        assert!(vals[0].abs() < 1e-10);
        assert!(vals[1] > 1e-6);
        assert!(vals.iter().all(|v| *v > -1e-10));
    }

    #[test]
    fn path_graph_spectrum() {
        let g = Graph::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        let (vals, vecs) = laplacian_eigenpairs(&g).unwrap();
        for (got, want) in vals.iter().zip([0.0, 1.0, 3.0]) {
            assert!((got - want).abs() < 1e-12);
        }
        let s = 1.0 / 2f64.sqrt();
        for (got, want) in vecs[1].iter().zip([s, 0.0, -s]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn positional_encoding_layout() {
        let m = generate_unit_square(3).unwrap();
        let pe0 = positional_encoding(&m, 0).unwrap();
        assert_eq!(pe0.cols, 2);
        assert_eq!(pe0.row(5), &m.nodes()[5]);
        let pe = positional_encoding(&m, 4).unwrap();
        assert_eq!(pe.cols, 6);
        for c in 2..6 {
            let v = pe.column(c);
            assert!(v.iter().sum::<f64>().abs() < 1e-8);
            assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-10);
            let first = v.iter().find(|x| x.abs() > 1e-8).unwrap();
            assert!(*first > 0.0);
        }
        assert_eq!(pe, positional_encoding(&m, 4).unwrap());
        assert!(positional_encoding(&m, 16).is_err());
    }

    #[test]
    fn text_format_round_trip() {
        let m = generate_disk(3, 4).unwrap();
        let back = Mesh::parse(&m.to_text()).unwrap();
        assert_eq!(back, m);
        let sq = generate_unit_square(3).unwrap();
        assert_eq!(Mesh::parse(&sq.to_text()).unwrap(), sq);
    }

    #[test]
    fn rejects_bad_meshes() {
        let cw = Mesh::new(vec![[0.0, 0.0], [0.0, 1.0], [1.0, 0.0]], vec![[0, 1, 2]]);
        assert!(matches!(cw, Err(Error::InvalidMesh(_))));
        let missing = Mesh::new(vec![[0.0, 0.0], [1.0, 0.0]], vec![[0, 1, 2]]);
        assert!(missing.is_err());
        let disconnected = Mesh::new(
            vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [5.0, 5.0], [6.0, 5.0], [5.0, 6.0]],
            vec![[0, 1, 2], [3, 4, 5]],
        );
        assert!(disconnected.is_err());
        assert!(Mesh::parse("nodes 3\n0 0 1\n1 0 0\n0 1 1\nelements 1\n0 1 2\n").is_err());
    }
}
