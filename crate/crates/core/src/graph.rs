//! Static road topology: adjacency assembly, Laplacians and the shared
//! eigensystem every spectral operator is built from.
//!
//! All computation here is 64-bit. The normalized Laplacian follows
//! `L' = I - D^{-1/2} A D^{-1/2}`; a node with zero degree gets a zero entry
//! in `D^{-1/2}` and an identity row in `L'`.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};

/// Tolerance used when checking symmetry of incoming matrices.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// A weighted, undirected edge record `(src, dst, weight)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub weight: f64,
}

impl Edge {
    pub fn new(src: usize, dst: usize, weight: f64) -> Self {
        Self { src, dst, weight }
    }
}

/// How repeated `(i, j)` / `(j, i)` records are merged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DuplicatePolicy {
    /// Repeated records must carry the same weight.
    #[default]
    Error,
    /// Repeated records are summed.
    Sum,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoadGraph {
    node_count: usize,
    edges: Vec<Edge>,
    adjacency: Array2<f64>,
}

impl RoadGraph {
    /// Assemble a symmetric adjacency from an edge list, rejecting conflicting
    /// duplicates.
    pub fn from_edges(edges: &[Edge], node_count: usize) -> Result<Self> {
        Self::from_edges_with(edges, node_count, DuplicatePolicy::Error)
    }

    pub fn from_edges_with(
        edges: &[Edge],
        node_count: usize,
        policy: DuplicatePolicy,
    ) -> Result<Self> {
        if node_count == 0 {
            return Err(Error::Data("graph must have at least one node".into()));
        }
        let mut adjacency = Array2::<f64>::zeros((node_count, node_count));
        let mut seen = Array2::<bool>::from_elem((node_count, node_count), false);
        let mut merged: Vec<Edge> = Vec::with_capacity(edges.len());
        for e in edges {
            for index in [e.src, e.dst] {
                if index >= node_count {
                    return Err(Error::NodeOutOfRange { index, node_count });
                }
            }
            if !(e.weight >= 0.0) || !e.weight.is_finite() {
                return Err(Error::NegativeWeight {
                    src: e.src,
                    dst: e.dst,
                    weight: e.weight,
                });
            }
            if e.src == e.dst {
                return Err(Error::Data(format!("self-loop on node {}", e.src)));
            }
            let (i, j) = (e.src.min(e.dst), e.src.max(e.dst));
            if seen[[i, j]] {
                match policy {
                    DuplicatePolicy::Error => {
                        let first = adjacency[[i, j]];
                        if first != e.weight {
                            return Err(Error::ConflictingEdge {
                                src: e.src,
                                dst: e.dst,
                                first,
                                second: e.weight,
                            });
                        }
                    }
                    DuplicatePolicy::Sum => {
                        adjacency[[i, j]] += e.weight;
                        adjacency[[j, i]] += e.weight;
                        if let Some(m) = merged.iter_mut().find(|m| m.src == i && m.dst == j) {
                            m.weight += e.weight;
                        }
                    }
                }
            } else {
                seen[[i, j]] = true;
                adjacency[[i, j]] = e.weight;
                adjacency[[j, i]] = e.weight;
                merged.push(Edge::new(i, j, e.weight));
            }
        }
        Ok(Self {
            node_count,
            edges: merged,
            adjacency,
        })
    }

    /// Build from a dense adjacency matrix. Must be square, symmetric,
    /// nonnegative with a zero diagonal.
    pub fn from_adjacency(adjacency: Array2<f64>) -> Result<Self> {
        let n = adjacency.nrows();
        if adjacency.ncols() != n {
            return Err(Error::shape("adjacency", (n, n), adjacency.dim()));
        }
        let asym = max_asymmetry(&adjacency);
        if asym > 0.0 {
            return Err(Error::NotSymmetric(asym));
        }
        let mut edges = Vec::new();
        for i in 0..n {
            if adjacency[[i, i]] != 0.0 {
                return Err(Error::Data(format!("self-loop on node {i}")));
            }
            for j in (i + 1)..n {
                let w = adjacency[[i, j]];
                if !(w >= 0.0) {
                    return Err(Error::NegativeWeight {
                        src: i,
                        dst: j,
                        weight: w,
                    });
                }
                if w > 0.0 {
                    edges.push(Edge::new(i, j, w));
                }
            }
        }
        Ok(Self {
            node_count: n,
            edges,
            adjacency,
        })
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    /// Canonical edge list with `src < dst`, one record per undirected edge.
    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn adjacency(&self) -> &Array2<f64> {
        &self.adjacency
    }

    pub fn degrees(&self) -> Array1<f64> {
        self.adjacency.sum_axis(Axis(1))
    }

    /// True when every node is reachable from node 0 over positive-weight edges.
    pub fn is_connected(&self) -> bool {
        let n = self.node_count;
        let mut visited = vec![false; n];
        let mut stack = vec![0usize];
        visited[0] = true;
        while let Some(i) = stack.pop() {
            for j in 0..n {
                if !visited[j] && self.adjacency[[i, j]] > 0.0 {
                    visited[j] = true;
                    stack.push(j);
                }
            }
        }
        visited.into_iter().all(|v| v)
    }

    /// Combinatorial Laplacian `L = D - A`. Exposed for completeness; the
    /// model only consumes the normalized form.
    pub fn laplacian(&self) -> Array2<f64> {
        let mut l = -&self.adjacency;
        for (i, d) in self.degrees().iter().enumerate() {
            l[[i, i]] += d;
        }
        l
    }

    /// `D^{-1/2} A D^{-1/2}` with zero rows/columns for isolated nodes.
    pub fn normalized_adjacency(&self) -> Array2<f64> {
        let inv_sqrt = inv_sqrt_degrees(&self.degrees());
        let n = self.node_count;
        Array2::from_shape_fn((n, n), |(i, j)| {
            inv_sqrt[i] * self.adjacency[[i, j]] * inv_sqrt[j]
        })
    }

    /// Write the canonical edge list as `src,dst,weight` lines with a header.
    pub fn write_edge_list(&self, path: &Path) -> Result<()> {
        let mut out = String::from("src,dst,weight\n");
        for e in &self.edges {
            out.push_str(&format!("{},{},{}\n", e.src, e.dst, e.weight));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

fn inv_sqrt_degrees(degrees: &Array1<f64>) -> Array1<f64> {
    degrees.mapv(|d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 })
}

pub(crate) fn max_asymmetry(m: &Array2<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[[i, j]] - m[[j, i]]).abs());
        }
    }
    worst
}

/// `L' = I - D^{-1/2} A D^{-1/2}`; isolated nodes keep an identity row.
pub fn normalized_laplacian(graph: &RoadGraph) -> Array2<f64> {
    let n = graph.node_count();
    let mut l = -graph.normalized_adjacency();
    for i in 0..n {
        l[[i, i]] += 1.0;
    }
    l
}

/// Eigensystem of a normalized Laplacian.
#[derive(Debug, Clone)]
pub struct LaplacianSpectrum {
    eigenvectors: Array2<f64>,
    eigenvalues: Array1<f64>,
    laplacian: Array2<f64>,
}

impl LaplacianSpectrum {
    /// Columns are the eigenvectors `u_i`, ordered to match `eigenvalues`.
    pub fn eigenvectors(&self) -> &Array2<f64> {
        &self.eigenvectors
    }

    /// Ascending.
    pub fn eigenvalues(&self) -> &Array1<f64> {
        &self.eigenvalues
    }

    pub fn laplacian(&self) -> &Array2<f64> {
        &self.laplacian
    }

    pub fn node_count(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn lambda_max(&self) -> f64 {
        self.eigenvalues[self.eigenvalues.len() - 1]
    }

    /// `U diag(f) U^T`.
    pub fn spectral_matrix(&self, filter: &Array1<f64>) -> Array2<f64> {
        let u = &self.eigenvectors;
        let scaled = u * &filter.view().insert_axis(Axis(0));
        scaled.dot(&u.t())
    }

    /// `U diag(λ) U^T - L'`, maximum absolute entry.
    pub fn reconstruction_error(&self) -> f64 {
        let rebuilt = self.spectral_matrix(&self.eigenvalues);
        max_abs_diff(&rebuilt, &self.laplacian)
    }

    /// `U^T U - I`, maximum absolute entry.
    pub fn orthonormality_error(&self) -> f64 {
        let gram = self.eigenvectors.t().dot(&self.eigenvectors);
        max_abs_diff(&gram, &Array2::eye(gram.nrows()))
    }
}

pub(crate) fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .fold(0.0f64, |acc, (x, y)| acc.max((x - y).abs()))
}

/// Symmetric eigendecomposition, eigenvalues ascending and each eigenvector
/// signed so its first non-negligible component is positive.
pub fn eigendecompose(laplacian: &Array2<f64>) -> Result<LaplacianSpectrum> {
    let n = laplacian.nrows();
    if laplacian.ncols() != n || n == 0 {
        return Err(Error::shape("eigendecompose", (n, n), laplacian.dim()));
    }
    if laplacian.iter().any(|v| !v.is_finite()) {
        return Err(Error::Eigensolver("non-finite matrix entry".into()));
    }
    let asym = max_asymmetry(laplacian);
    if asym > SYMMETRY_TOL {
        return Err(Error::NotSymmetric(asym));
    }

    let m = DMatrix::from_fn(n, n, |i, j| laplacian[[i, j]]);
    let eig = SymmetricEigen::try_new(m, f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Eigensolver("did not converge".into()))?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));

    let mut eigenvalues = Array1::<f64>::zeros(n);
    let mut eigenvectors = Array2::<f64>::zeros((n, n));
    for (col, &src) in order.iter().enumerate() {
        eigenvalues[col] = eig.eigenvalues[src];
        let v = eig.eigenvectors.column(src);
        let pivot = v.iter().copied().find(|x| x.abs() > 1e-12).unwrap_or(1.0);
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for row in 0..n {
            eigenvectors[[row, col]] = sign * v[row];
        }
    }

    Ok(LaplacianSpectrum {
        eigenvectors,
        eigenvalues,
        laplacian: laplacian.clone(),
    })
}

/// Parse an edge-list file of `src,dst,weight` lines with an optional header.
/// Node count is inferred as one past the largest index unless given.
pub fn load_edge_list(path: &Path, node_count: Option<usize>) -> Result<RoadGraph> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let edges = parse_edge_list(&text, path)?;
    let inferred = edges
        .iter()
        .map(|e| e.src.max(e.dst) + 1)
        .max()
        .unwrap_or(0);
    let n = node_count.unwrap_or(inferred);
    RoadGraph::from_edges(&edges, n)
}

pub(crate) fn parse_edge_list(text: &str, path: &Path) -> Result<Vec<Edge>> {
    let mut edges = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if lineno == 0 && line.replace(' ', "") == "src,dst,weight" {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            message,
        };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(err(format!("expected 3 fields, found {}", fields.len())));
        }
        let src = fields[0]
            .parse::<usize>()
            .map_err(|e| err(format!("bad src `{}`: {e}", fields[0])))?;
        let dst = fields[1]
            .parse::<usize>()
            .map_err(|e| err(format!("bad dst `{}`: {e}", fields[1])))?;
        let weight = fields[2]
            .parse::<f64>()
            .map_err(|e| err(format!("bad weight `{}`: {e}", fields[2])))?;
        if !weight.is_finite() {
            return Err(err(format!("non-finite weight `{}`", fields[2])));
        }
        edges.push(Edge::new(src, dst, weight));
    }
    Ok(edges)
}

/// Simple generators used by the synthetic benchmarks and tests.
pub mod generators {
    use rand::Rng;

    use super::{Edge, RoadGraph};

    /// Path graph `0 - 1 - ... - (n-1)` with unit weights.
    pub fn path(n: usize) -> RoadGraph {
        let edges: Vec<Edge> = (1..n).map(|i| Edge::new(i - 1, i, 1.0)).collect();
        RoadGraph::from_edges(&edges, n).expect("valid path graph")
    }

    /// Cycle graph with unit weights; `n >= 3`.
    pub fn cycle(n: usize) -> RoadGraph {
        assert!(n >= 3, "cycle needs at least 3 nodes");
        let edges: Vec<Edge> = (0..n).map(|i| Edge::new(i, (i + 1) % n, 1.0)).collect();
        RoadGraph::from_edges(&edges, n).expect("valid cycle graph")
    }

    /// Random connected graph: a random spanning tree plus extra edges with
    /// probability `p`, weights uniform in `[0.5, 1.5)`.
    pub fn random_connected<R: Rng + ?Sized>(n: usize, p: f64, rng: &mut R) -> RoadGraph {
        let mut edges = Vec::new();
        let mut present = vec![vec![false; n]; n];
        for i in 1..n {
            let j = rng.random_range(0..i);
            edges.push(Edge::new(j, i, rng.random_range(0.5..1.5)));
            present[j][i] = true;
        }
        for i in 0..n {
            for j in (i + 1)..n {
                if !present[i][j] && rng.random_bool(p) {
                    edges.push(Edge::new(i, j, rng.random_range(0.5..1.5)));
                }
            }
        }
        RoadGraph::from_edges(&edges, n).expect("valid random graph")
    }
}
