//! Graph representation of a microgrid: admittance-derived adjacency weights,
//! degree matrix, normalized and scaled Laplacians, and a spectral
//! decomposition used as a test oracle.

use std::collections::BTreeSet;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{power_iteration_symmetric, symmetric_eigen, Matrix};

/// Default node cap for [`graph_fourier_basis`]; the full decomposition is a
/// test oracle, not a production path.
pub const FOURIER_BASIS_NODE_CAP: usize = 64;

/// Bus classification, encoded as the β feature of the extended state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BusType {
    /// No load and no generation attached.
    Empty,
    /// Power load only.
    Load,
    /// Distributed energy resource, with or without a co-located load.
    Der,
}

impl BusType {
    pub fn beta(self) -> f64 {
        match self {
            BusType::Empty => 0.0,
            BusType::Load => 0.5,
            BusType::Der => 1.0,
        }
    }

    pub fn from_beta(beta: f64) -> Result<Self> {
        if beta == 0.0 {
            Ok(BusType::Empty)
        } else if beta == 0.5 {
            Ok(BusType::Load)
        } else if beta == 1.0 {
            Ok(BusType::Der)
        } else {
            Err(Error::argument(format!("unknown bus type code {beta}")))
        }
    }
}

/// Electrical graph of the microgrid: undirected bus connectivity plus the
/// complex admittance matrix in per-unit siemens.
#[derive(Debug, Clone)]
pub struct PowerGraph {
    n_buses: usize,
    edges: BTreeSet<(usize, usize)>,
    admittance: Vec<Complex64>,
    bus_types: Vec<BusType>,
}

impl PowerGraph {
    /// Builds and validates a graph. Edges may be given in either order;
    /// they are stored canonically as `(min, max)`.
    pub fn new(
        n_buses: usize,
        edge_list: &[(usize, usize)],
        admittance: Vec<Complex64>,
        bus_types: Vec<BusType>,
    ) -> Result<Self> {
        if n_buses == 0 {
            return Err(Error::argument("graph needs at least one bus"));
        }
        if admittance.len() != n_buses * n_buses {
            return Err(Error::argument(format!(
                "admittance must be {n}×{n}, got {} entries",
                admittance.len(),
                n = n_buses
            )));
        }
        if bus_types.len() != n_buses {
            return Err(Error::argument("bus_types length must equal n_buses"));
        }
        let mut edges = BTreeSet::new();
        for &(i, j) in edge_list {
            if i >= n_buses || j >= n_buses {
                return Err(Error::argument(format!("edge ({i},{j}) out of range")));
            }
            if i == j {
                return Err(Error::structural(format!("self-loop at bus {i}")));
            }
            edges.insert((i.min(j), i.max(j)));
        }
        for i in 0..n_buses {
            for j in (i + 1)..n_buses {
                let a = admittance[i * n_buses + j];
                let b = admittance[j * n_buses + i];
                let scale = a.norm().max(b.norm()).max(1.0);
                if (a - b).norm() > 1e-9 * scale {
                    return Err(Error::structural(format!(
                        "admittance not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        Ok(PowerGraph {
            n_buses,
            edges,
            admittance,
            bus_types,
        })
    }

    pub fn n_buses(&self) -> usize {
        self.n_buses
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.edges.contains(&(i.min(j), i.max(j)))
    }

    pub fn admittance(&self, i: usize, j: usize) -> Complex64 {
        self.admittance[i * self.n_buses + j]
    }

    pub fn admittance_matrix(&self) -> &[Complex64] {
        &self.admittance
    }

    pub fn bus_types(&self) -> &[BusType] {
        &self.bus_types
    }

    /// Neighbor lists in ascending bus order.
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut nbrs = vec![Vec::new(); self.n_buses];
        for &(i, j) in &self.edges {
            nbrs[i].push(j);
            nbrs[j].push(i);
        }
        nbrs
    }

    /// Parses the JSON topology document:
    /// `{"n_buses": N, "edges": [[i,j],...], "admittance": [[re,im],...] (row-major N×N), "bus_types": [β,...]}`.
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: GraphJson = serde_json::from_str(text)?;
        doc.into_graph()
    }

    pub fn to_json(&self) -> GraphJson {
        GraphJson {
            n_buses: self.n_buses,
            edges: self.edges.iter().map(|&(i, j)| [i, j]).collect(),
            admittance: self.admittance.iter().map(|y| [y.re, y.im]).collect(),
            bus_types: self.bus_types.iter().map(|t| t.beta()).collect(),
        }
    }
}

/// Serde mirror of the on-disk topology document.
#[derive(Debug, Serialize, Deserialize)]
pub struct GraphJson {
    pub n_buses: usize,
    pub edges: Vec<[usize; 2]>,
    pub admittance: Vec<[f64; 2]>,
    pub bus_types: Vec<f64>,
}

impl GraphJson {
    pub fn into_graph(self) -> Result<PowerGraph> {
        let edges: Vec<(usize, usize)> = self.edges.iter().map(|e| (e[0], e[1])).collect();
        let admittance: Vec<Complex64> = self
            .admittance
            .iter()
            .map(|p| Complex64::new(p[0], p[1]))
            .collect();
        let bus_types = self
            .bus_types
            .iter()
            .map(|&b| BusType::from_beta(b))
            .collect::<Result<Vec<_>>>()?;
        PowerGraph::new(self.n_buses, &edges, admittance, bus_types)
    }
}

/// Admittance-derived edge weights `w_ij = exp(-k |Y_ij|²)`, zero off the
/// edge set and on the diagonal.
#[derive(Debug, Clone)]
pub struct AdjacencyMatrix {
    pub weights: Matrix,
    pub scaling_k: f64,
}

impl AdjacencyMatrix {
    pub fn n(&self) -> usize {
        self.weights.rows
    }
}

/// Degree matrix, normalized Laplacian `L = I − D^{-1/2} A D^{-1/2}`, its
/// largest eigenvalue, and the scaled Laplacian `(2/λ_max)·L − I`.
#[derive(Debug, Clone)]
pub struct LaplacianBundle {
    pub degree: Vec<f64>,
    pub laplacian: Matrix,
    pub lambda_max: f64,
    pub scaled_laplacian: Matrix,
}

/// Builds the weighted adjacency matrix from the admittance magnitudes.
pub fn build_adjacency(graph: &PowerGraph, scaling_k: f64) -> Result<AdjacencyMatrix> {
    if !(scaling_k > 0.0) {
        return Err(Error::argument("scaling_k must be positive"));
    }
    let n = graph.n_buses();
    let mut weights = Matrix::zeros(n, n);
    for (i, j) in graph.edges() {
        let y2 = graph.admittance(i, j).norm_sqr();
        let w = (-scaling_k * y2).exp();
        weights[(i, j)] = w;
        weights[(j, i)] = w;
    }
    Ok(AdjacencyMatrix { weights, scaling_k })
}

/// Tunes the weight scaling so the mean edge weight is 0.5, by bisection on
/// the monotone map k ↦ mean weight. Falls back to 1 when every edge has
/// zero admittance magnitude (all weights are already 1 for any k).
pub fn tune_scaling_k(graph: &PowerGraph) -> f64 {
    let y2: Vec<f64> = graph
        .edges()
        .map(|(i, j)| graph.admittance(i, j).norm_sqr())
        .filter(|v| *v > 0.0)
        .collect();
    if y2.is_empty() {
        return 1.0;
    }
    let mean_w = |k: f64| y2.iter().map(|v| (-k * v).exp()).sum::<f64>() / y2.len() as f64;

    let mut lo = 0.0f64;
    let mut hi = 1.0f64;
    while mean_w(hi) > 0.5 {
        hi *= 2.0;
        if hi > 1e18 {
            break;
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_w(mid) > 0.5 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 * hi.max(1.0) {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Degree, normalized Laplacian, power-iteration λ_max, and scaled Laplacian.
pub fn laplacian_bundle(adj: &AdjacencyMatrix) -> Result<LaplacianBundle> {
    let n = adj.n();
    let degree: Vec<f64> = (0..n).map(|i| adj.weights.row(i).iter().sum()).collect();
    for (i, d) in degree.iter().enumerate() {
        if *d <= 0.0 {
            return Err(Error::structural(format!(
                "isolated node {i}: degree is zero, normalized Laplacian undefined"
            )));
        }
    }
    let inv_sqrt: Vec<f64> = degree.iter().map(|d| 1.0 / d.sqrt()).collect();
    let mut laplacian = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let off = -inv_sqrt[i] * adj.weights[(i, j)] * inv_sqrt[j];
            laplacian[(i, j)] = if i == j { 1.0 + off } else { off };
        }
    }
    let lambda_max = power_iteration_symmetric(&laplacian, 1e-10, 10_000)?;
    let mut scaled_laplacian = Matrix::zeros(n, n);
    let f = 2.0 / lambda_max;
    for i in 0..n {
        for j in 0..n {
            scaled_laplacian[(i, j)] = f * laplacian[(i, j)] - if i == j { 1.0 } else { 0.0 };
        }
    }
    Ok(LaplacianBundle {
        degree,
        laplacian,
        lambda_max,
        scaled_laplacian,
    })
}

/// Full graph Fourier basis `L = Q Λ Qᵀ` (eigenvalues ascending, eigenvectors
/// as columns). Capped because this is a spectral-filtering oracle, not the
/// production convolution path.
pub fn graph_fourier_basis(bundle: &LaplacianBundle) -> Result<(Vec<f64>, Matrix)> {
    graph_fourier_basis_capped(bundle, FOURIER_BASIS_NODE_CAP)
}

pub fn graph_fourier_basis_capped(
    bundle: &LaplacianBundle,
    cap: usize,
) -> Result<(Vec<f64>, Matrix)> {
    let n = bundle.laplacian.rows;
    if n > cap {
        return Err(Error::argument(format!(
            "graph_fourier_basis capped at {cap} nodes, got {n}"
        )));
    }
    symmetric_eigen(&bundle.laplacian)
}
