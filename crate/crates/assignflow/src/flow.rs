//! The labeling graph and the assignment-flow maps defined on it.
//!
//! Data enters through a distance matrix `D` (`|I| x |J|`, node-to-label) and
//! a weighted neighborhood structure `N_i` with convex weights `w_ik`. The
//! flow maps are:
//!
//! * likelihood `L_i(W_i) = W_i e^{-D_i/rho} / <W_i, e^{-D_i/rho}>`, a
//!   pointwise data term with selectivity parameter `rho > 0`,
//! * similarity `S_i(W) = geometric mean of the likelihoods over N_i`, which
//!   collapses to the closed form
//!   `S_i(W) = softmax( sum_k w_ik (log W_k - D_k/rho) )`,
//! * the flow's vector field `pi_{W_i}(S_i(W))`, and
//! * its pullback to the flat tangent space at a base point `W0`:
//!   `tangent_rhs(V) = project_t0( S(exp_map(W0, V)) )`.
//!
//! All maps are row-parallel; results are deterministic for any thread count.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Zip};
use thiserror::Error;

use crate::geometry::{
    exp_map_state, exp_map_tangent, pi_state, project_t0_field, AssignmentState, TangentField,
    WEIGHT_SUM_TOL,
};

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("graph must have at least one node and one label")]
    Empty,
    #[error("node {node}: neighborhood weights sum to {sum}, expected 1 within {WEIGHT_SUM_TOL}")]
    WeightSum { node: usize, sum: f64 },
    #[error("node {node}: neighborhood does not contain the node itself")]
    MissingSelf { node: usize },
    #[error("node {node}: neighbor index {neighbor} out of range")]
    NeighborRange { node: usize, neighbor: usize },
    #[error("node {node}: neighborhood and weight lists differ in length")]
    LengthMismatch { node: usize },
    #[error("distances must be finite and non-negative")]
    BadDistance,
    #[error("distance matrix has {rows} rows, expected one per node ({nodes})")]
    DistanceShape { rows: usize, nodes: usize },
    #[error("selectivity rho must be positive and finite, got {rho}")]
    BadRho { rho: f64 },
    #[error("window size must be odd and positive, got {window}")]
    BadWindow { window: usize },
    #[error("feature dimension mismatch: features have {features}, labels have {labels}")]
    FeatureDim { features: usize, labels: usize },
}

/// Distance between a feature vector and a label prototype.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureMetric {
    Euclidean,
    SquaredEuclidean,
    /// 0 when the vectors coincide (within 1e-12 per entry), 1 otherwise.
    Discrete,
}

/// The label prototypes: `|J|` feature vectors and the metric against data.
#[derive(Debug, Clone)]
pub struct LabelSet {
    prototypes: Array2<f64>,
    metric: FeatureMetric,
}

impl LabelSet {
    pub fn new(prototypes: Array2<f64>, metric: FeatureMetric) -> Result<Self, GraphError> {
        if prototypes.nrows() == 0 || prototypes.ncols() == 0 {
            return Err(GraphError::Empty);
        }
        if prototypes.iter().any(|x| !x.is_finite()) {
            return Err(GraphError::BadDistance);
        }
        Ok(Self { prototypes, metric })
    }

    pub fn count(&self) -> usize {
        self.prototypes.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.prototypes.ncols()
    }

    pub fn prototypes(&self) -> ArrayView2<'_, f64> {
        self.prototypes.view()
    }

    pub fn metric(&self) -> FeatureMetric {
        self.metric
    }

    fn distance(&self, f: ArrayView1<f64>, j: usize) -> f64 {
        let g = self.prototypes.row(j);
        match self.metric {
            FeatureMetric::Euclidean => f
                .iter()
                .zip(g)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt(),
            FeatureMetric::SquaredEuclidean => {
                f.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
            }
            FeatureMetric::Discrete => {
                if f.iter().zip(g).all(|(a, b)| (a - b).abs() <= 1e-12) {
                    0.0
                } else {
                    1.0
                }
            }
        }
    }
}

/// Node-to-label distance matrix `D` for a feature image (row-major nodes).
pub fn build_distances(
    features: ArrayView2<f64>,
    labels: &LabelSet,
) -> Result<Array2<f64>, GraphError> {
    if features.nrows() == 0 {
        return Err(GraphError::Empty);
    }
    if features.ncols() != labels.feature_dim() {
        return Err(GraphError::FeatureDim {
            features: features.ncols(),
            labels: labels.feature_dim(),
        });
    }
    if features.iter().any(|x| !x.is_finite()) {
        return Err(GraphError::BadDistance);
    }
    let mut d = Array2::zeros((features.nrows(), labels.count()));
    Zip::indexed(d.rows_mut()).par_for_each(|i, mut row| {
        for j in 0..labels.count() {
            row[j] = labels.distance(features.row(i), j);
        }
    });
    Ok(d)
}

/// Neighborhood structure, convex averaging weights, distances and `rho`.
///
/// Stored in compressed sparse rows together with the reverse adjacency
/// (incoming edges), which the linearized flow needs for transpose products.
#[derive(Debug, Clone)]
pub struct LabelingGraph {
    nodes: usize,
    labels: usize,
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
    weights: Vec<f64>,
    rev_offsets: Vec<usize>,
    rev_sources: Vec<usize>,
    rev_weights: Vec<f64>,
    distances: Array2<f64>,
    rho: f64,
}

impl LabelingGraph {
    /// Builds a graph from explicit neighborhoods.
    ///
    /// Every neighborhood must contain its own node and carry finite convex
    /// weights summing to 1 within [`WEIGHT_SUM_TOL`].
    pub fn new(
        neighborhoods: &[Vec<usize>],
        weights: &[Vec<f64>],
        distances: Array2<f64>,
        rho: f64,
    ) -> Result<Self, GraphError> {
        let nodes = neighborhoods.len();
        if nodes == 0 || distances.ncols() == 0 {
            return Err(GraphError::Empty);
        }
        if neighborhoods.len() != weights.len() {
            return Err(GraphError::LengthMismatch { node: 0 });
        }
        if distances.nrows() != nodes {
            return Err(GraphError::DistanceShape { rows: distances.nrows(), nodes });
        }
        if distances.iter().any(|&x| !x.is_finite() || x < 0.0) {
            return Err(GraphError::BadDistance);
        }
        if !rho.is_finite() || rho <= 0.0 {
            return Err(GraphError::BadRho { rho });
        }
        let mut offsets = Vec::with_capacity(nodes + 1);
        offsets.push(0);
        let mut flat_n = Vec::new();
        let mut flat_w = Vec::new();
        for (i, (nbrs, ws)) in neighborhoods.iter().zip(weights).enumerate() {
            if nbrs.len() != ws.len() {
                return Err(GraphError::LengthMismatch { node: i });
            }
            if !nbrs.contains(&i) {
                return Err(GraphError::MissingSelf { node: i });
            }
            if let Some(&bad) = nbrs.iter().find(|&&k| k >= nodes) {
                return Err(GraphError::NeighborRange { node: i, neighbor: bad });
            }
            let sum: f64 = ws.iter().sum();
            if !sum.is_finite() || (sum - 1.0).abs() > WEIGHT_SUM_TOL {
                return Err(GraphError::WeightSum { node: i, sum });
            }
            flat_n.extend_from_slice(nbrs);
            flat_w.extend_from_slice(ws);
            offsets.push(flat_n.len());
        }
        Ok(Self::assemble(nodes, offsets, flat_n, flat_w, distances, rho))
    }

    /// Regular grid with a `window x window` box neighborhood (odd edge),
    /// truncated at the image border and uniformly reweighted to sum 1.
    ///
    /// A 1D chain is the `height = 1` case. Node order is row-major.
    pub fn grid(
        width: usize,
        height: usize,
        window: usize,
        distances: Array2<f64>,
        rho: f64,
    ) -> Result<Self, GraphError> {
        if width == 0 || height == 0 {
            return Err(GraphError::Empty);
        }
        if window % 2 == 0 || window == 0 {
            return Err(GraphError::BadWindow { window });
        }
        let nodes = width * height;
        if distances.nrows() != nodes {
            return Err(GraphError::DistanceShape { rows: distances.nrows(), nodes });
        }
        if distances.iter().any(|&x| !x.is_finite() || x < 0.0) {
            return Err(GraphError::BadDistance);
        }
        if !rho.is_finite() || rho <= 0.0 {
            return Err(GraphError::BadRho { rho });
        }
        let r = (window / 2) as isize;
        let mut offsets = Vec::with_capacity(nodes + 1);
        offsets.push(0);
        let mut flat_n = Vec::new();
        let mut flat_w = Vec::new();
        for y in 0..height as isize {
            for x in 0..width as isize {
                let start = flat_n.len();
                for yy in (y - r).max(0)..=(y + r).min(height as isize - 1) {
                    for xx in (x - r).max(0)..=(x + r).min(width as isize - 1) {
                        flat_n.push((yy * width as isize + xx) as usize);
                    }
                }
                let count = flat_n.len() - start;
                flat_w.extend(std::iter::repeat(1.0 / count as f64).take(count));
                offsets.push(flat_n.len());
            }
        }
        Ok(Self::assemble(nodes, offsets, flat_n, flat_w, distances, rho))
    }

    fn assemble(
        nodes: usize,
        offsets: Vec<usize>,
        neighbors: Vec<usize>,
        weights: Vec<f64>,
        distances: Array2<f64>,
        rho: f64,
    ) -> Self {
        // Reverse adjacency; per-target edges keep ascending source order so
        // transpose products sum in a fixed order.
        let mut counts = vec![0usize; nodes + 1];
        for &k in &neighbors {
            counts[k + 1] += 1;
        }
        for i in 0..nodes {
            counts[i + 1] += counts[i];
        }
        let rev_offsets = counts.clone();
        let mut cursor = counts;
        let mut rev_sources = vec![0usize; neighbors.len()];
        let mut rev_weights = vec![0.0f64; neighbors.len()];
        for i in 0..nodes {
            for e in offsets[i]..offsets[i + 1] {
                let k = neighbors[e];
                rev_sources[cursor[k]] = i;
                rev_weights[cursor[k]] = weights[e];
                cursor[k] += 1;
            }
        }
        let labels = distances.ncols();
        Self {
            nodes,
            labels,
            offsets,
            neighbors,
            weights,
            rev_offsets,
            rev_sources,
            rev_weights,
            distances,
            rho,
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes
    }

    pub fn label_count(&self) -> usize {
        self.labels
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn distances(&self) -> &Array2<f64> {
        &self.distances
    }

    /// Outgoing neighborhood of `i`: `(members, weights)`.
    pub fn neighborhood(&self, i: usize) -> (&[usize], &[f64]) {
        let span = self.offsets[i]..self.offsets[i + 1];
        (&self.neighbors[span.clone()], &self.weights[span])
    }

    /// Incoming edges of `k`: sources `i` with `k` in `N_i`, and their `w_ik`.
    pub(crate) fn incoming(&self, k: usize) -> (&[usize], &[f64]) {
        let span = self.rev_offsets[k]..self.rev_offsets[k + 1];
        (&self.rev_sources[span.clone()], &self.rev_weights[span])
    }

    pub fn max_neighborhood(&self) -> usize {
        (0..self.nodes)
            .map(|i| self.offsets[i + 1] - self.offsets[i])
            .max()
            .unwrap_or(0)
    }
}

fn softmax_into(u: ArrayView1<f64>, mut out: ndarray::ArrayViewMut1<f64>) {
    let m = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    Zip::from(&mut out).and(&u).for_each(|o, &uj| {
        let e = (uj - m).exp();
        *o = e;
        s += e;
    });
    out.mapv_inplace(|x| x / s);
}

/// Pointwise likelihood `L_i = exp_map(W_i, -D_i / rho)`.
pub fn likelihood(w: &AssignmentState, graph: &LabelingGraph) -> AssignmentState {
    assert_eq!(w.nodes(), graph.node_count());
    assert_eq!(w.labels(), graph.label_count());
    let scaled = graph.distances().mapv(|d| -d / graph.rho());
    exp_map_state(w, &scaled)
}

/// Neighborhood-coupled similarity, the flow's driving state.
///
/// Evaluates the closed form `S_i = softmax( sum_k w_ik (log W_k - D_k/rho) )`,
/// which equals the geometric mean of the likelihoods `L_k` anchored at `L_i`.
pub fn similarity(w: &AssignmentState, graph: &LabelingGraph) -> AssignmentState {
    assert_eq!(w.nodes(), graph.node_count());
    assert_eq!(w.labels(), graph.label_count());
    let rho = graph.rho();
    let mut logs = Array2::zeros((w.nodes(), w.labels()));
    Zip::from(logs.rows_mut())
        .and(w.matrix().rows())
        .and(graph.distances().rows())
        .par_for_each(|mut lr, wr, dr| {
            Zip::from(&mut lr).and(&wr).and(&dr).for_each(|l, &wj, &dj| *l = wj.ln() - dj / rho);
        });
    let mut out = Array2::zeros((w.nodes(), w.labels()));
    Zip::indexed(out.rows_mut()).par_for_each(|i, mut row| {
        let (nbrs, wts) = graph.neighborhood(i);
        let mut u = Array1::<f64>::zeros(row.len());
        for (&k, &wik) in nbrs.iter().zip(wts) {
            u.scaled_add(wik, &logs.row(k));
        }
        softmax_into(u.view(), row.view_mut());
    });
    AssignmentState::from_unchecked(out)
}

/// The assignment flow's vector field, row-wise `pi_{W_i}(S_i(W))`.
pub fn vector_field(w: &AssignmentState, graph: &LabelingGraph) -> TangentField {
    let s = similarity(w, graph);
    pi_state(w, s.matrix())
}

/// Right-hand side of the flow pulled back to `T0` at base `W0`:
/// `project_t0( S(exp_map(W0, V)) )`.
pub fn tangent_rhs(v: &TangentField, w0: &AssignmentState, graph: &LabelingGraph) -> TangentField {
    let w = exp_map_tangent(w0, v);
    let s = similarity(&w, graph);
    project_t0_field(s.matrix())
}

/// Total entries of the distance matrix exceeding a positivity floor; used by
/// scenario sanity checks.
pub fn positive_distance_count(graph: &LabelingGraph) -> usize {
    graph.distances().iter().filter(|&&d| d > 0.0).count()
}
