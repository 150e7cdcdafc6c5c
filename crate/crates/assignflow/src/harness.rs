//! Benchmark scenarios, ground-truth runs, and evaluation metrics.
//!
//! Three seeded generators cover the standard experiment set:
//!
//! * a piecewise-constant three-level 1D signal with Gaussian noise, sized so
//!   that label-wise rounding of the raw input misclassifies 10-25% of the
//!   positions;
//! * a shape image whose 31 labels are encoded as simplex vertices (unit
//!   vectors, pairwise feature distance `sqrt(2)`), with a fraction of pixels
//!   replaced by a uniformly random wrong vertex;
//! * a synthetic color image quantized against `k` representative colors
//!   found by a seeded k-means.
//!
//! All generators are pure functions of their seed and parameters. Reference
//! labelings come from the geometric implicit Euler scheme on the full flow
//! and from the Euclidean implicit Euler scheme on the tangent linearization,
//! both at step size 0.5.

use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::flow::{build_distances, FeatureMetric, GraphError, LabelSet, LabelingGraph};
use crate::geometry::AssignmentState;
use crate::linearflow::build_operator;
use crate::linsolve::{integrate_linear_implicit, LinearIntegrateOptions};
use crate::rkmk::{
    integrate, ButcherTableau, IntegrateError, IntegrateOptions, StepPolicy,
};

/// Average assignment entropy, `-(1/(|I||J|)) sum_ij W_ij ln W_ij`.
///
/// Zero exactly at vertices (rows concentrated on one label), maximal
/// `ln(|J|)/|J|` at the barycenter; integration terminates when this drops
/// below a threshold.
pub fn entropy_avg(w: &AssignmentState) -> f64 {
    let m = w.matrix();
    let sum: f64 = m.iter().map(|&x| if x > 0.0 { -x * x.ln() } else { 0.0 }).sum();
    sum / (m.nrows() * m.ncols()) as f64
}

/// Fraction of nodes whose argmax label agrees between two states.
pub fn label_agreement(a: &AssignmentState, b: &AssignmentState) -> f64 {
    assert_eq!(a.nodes(), b.nodes());
    let la = a.argmax_labels();
    let lb = b.argmax_labels();
    let same = la.iter().zip(&lb).filter(|(x, y)| x == y).count();
    same as f64 / a.nodes() as f64
}

/// Number of positions where two label maps disagree.
pub fn label_differences(a: &[usize], b: &[usize]) -> usize {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

/// Per-node nearest label of the raw input: argmin of the distance rows,
/// i.e. the labeling before any spatial regularization.
pub fn local_rounding(graph: &LabelingGraph) -> Vec<usize> {
    graph
        .distances()
        .rows()
        .into_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0usize, f64::INFINITY), |best, (j, &d)| {
                    if d < best.1 {
                        (j, d)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioKind {
    Signal1d,
    Vertex31,
    ColorQuant,
}

/// A fully seeded experiment description; `build` regenerates identical data
/// for identical fields.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub width: usize,
    pub height: usize,
    pub label_count: usize,
    /// Gaussian sigma for the 1D signal, vertex replacement probability for
    /// the shape image; unused for color quantization.
    pub noise: f64,
    pub rho: f64,
    pub window: usize,
    pub seed: u64,
}

impl Scenario {
    pub fn signal1d() -> Self {
        Self {
            kind: ScenarioKind::Signal1d,
            width: 192,
            height: 1,
            label_count: 3,
            noise: 0.2,
            rho: 0.1,
            window: 5,
            seed: 7001,
        }
    }

    pub fn vertex31() -> Self {
        Self {
            kind: ScenarioKind::Vertex31,
            width: 64,
            height: 64,
            label_count: 31,
            noise: 0.35,
            rho: 0.1,
            window: 7,
            seed: 7002,
        }
    }

    pub fn colorquant() -> Self {
        Self {
            kind: ScenarioKind::ColorQuant,
            width: 64,
            height: 64,
            label_count: 4,
            noise: 0.0,
            rho: 0.5,
            window: 3,
            seed: 7003,
        }
    }

    pub fn with_dims(mut self, width: usize, height: usize) -> Self {
        self.width = width;
        self.height = height;
        self
    }

    pub fn with_window(mut self, window: usize) -> Self {
        self.window = window;
        self
    }

    pub fn with_rho(mut self, rho: f64) -> Self {
        self.rho = rho;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn node_count(&self) -> usize {
        self.width * self.height
    }

    pub fn build(&self) -> Result<ScenarioData, GraphError> {
        let (features, label_set, truth) = match self.kind {
            ScenarioKind::Signal1d => {
                let (f, ls, t) = gen_signal1d(self.seed, self.noise);
                (f, ls, Some(t))
            }
            ScenarioKind::Vertex31 => {
                let (f, ls, t) = gen_vertex31(self.seed, self.width, self.height, self.noise);
                (f, ls, Some(t))
            }
            ScenarioKind::ColorQuant => {
                let image = gen_color_image(self.seed, self.width, self.height);
                let (f, ls) = gen_colorquant(&image, self.label_count, self.seed);
                (f, ls, None)
            }
        };
        let distances = build_distances(features.view(), &label_set)?;
        let graph = LabelingGraph::grid(self.width, self.height, self.window, distances, self.rho)?;
        Ok(ScenarioData {
            graph,
            features,
            label_set,
            truth,
            width: self.width,
            height: self.height,
        })
    }
}

/// Generated data plus the assembled labeling graph.
#[derive(Debug, Clone)]
pub struct ScenarioData {
    pub graph: LabelingGraph,
    pub features: Array2<f64>,
    pub label_set: LabelSet,
    /// Ground-truth labels where the generator defines them.
    pub truth: Option<Vec<usize>>,
    pub width: usize,
    pub height: usize,
}

/// Segment layout of the 1D signal: (length, level index), summing to 192.
const SIGNAL_SEGMENTS: [(usize, usize); 10] =
    [(18, 1), (14, 0), (22, 2), (10, 1), (25, 0), (15, 2), (20, 1), (18, 0), (26, 2), (24, 1)];

/// Piecewise-constant 3-level signal of length 192 with additive Gaussian
/// noise; labels are the clean levels {0, 0.5, 1}.
pub fn gen_signal1d(seed: u64, noise_std: f64) -> (Array2<f64>, LabelSet, Vec<usize>) {
    assert!(noise_std >= 0.0);
    let levels = [0.0, 0.5, 1.0];
    let mut truth = Vec::with_capacity(192);
    for &(len, label) in &SIGNAL_SEGMENTS {
        truth.extend(std::iter::repeat_n(label, len));
    }
    debug_assert_eq!(truth.len(), 192);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = Normal::new(0.0, 1.0).unwrap();
    let mut features = Array2::zeros((truth.len(), 1));
    for (i, &label) in truth.iter().enumerate() {
        features[[i, 0]] = levels[label] + noise_std * gauss.sample(&mut rng);
    }
    let prototypes = Array2::from_shape_fn((3, 1), |(j, _)| levels[j]);
    let label_set = LabelSet::new(prototypes, FeatureMetric::Euclidean).unwrap();
    (features, label_set, truth)
}

/// Ground-truth shape image over 31 labels encoded as unit vectors; each
/// pixel keeps its true vertex with probability `1 - p_noise`, else is
/// replaced by a uniformly random other vertex.
pub fn gen_vertex31(
    seed: u64,
    width: usize,
    height: usize,
    p_noise: f64,
) -> (Array2<f64>, LabelSet, Vec<usize>) {
    assert!((0.0..=1.0).contains(&p_noise));
    assert!(width >= 8 && height >= 8);
    let labels = 31usize;
    let truth = shape_labels(width, height, labels);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Array2::zeros((width * height, labels));
    for (i, &label) in truth.iter().enumerate() {
        let observed = if rng.random_range(0.0..1.0) < p_noise {
            let shift = rng.random_range(1..labels);
            (label + shift) % labels
        } else {
            label
        };
        features[[i, observed]] = 1.0;
    }
    let label_set = LabelSet::new(Array2::eye(labels), FeatureMetric::Euclidean).unwrap();
    (features, label_set, truth)
}

/// Deterministic tile-plus-shapes truth pattern covering all labels.
fn shape_labels(width: usize, height: usize, labels: usize) -> Vec<usize> {
    let tile = (width.max(height) / 8).max(1);
    let (cx, cy) = (width as f64 / 3.0, height as f64 / 3.0);
    let radius = width.min(height) as f64 / 5.0;
    let mut truth = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let (tx, ty) = (x / tile, y / tile);
            let mut label = (tx + 7 * ty) % labels;
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            if (dx * dx + dy * dy).sqrt() < radius {
                label = 7 % labels;
            }
            if x >= 5 * width / 8 && x < 7 * width / 8 && y >= height / 8 && y < 3 * height / 8 {
                label = 19 % labels;
            }
            truth.push(label);
        }
    }
    truth
}

/// Smooth synthetic RGB test image (values in [0,1]): two gradient fields
/// with a solid disk and rectangle, plus slight uniform pixel noise.
pub fn gen_color_image(seed: u64, width: usize, height: usize) -> Array2<f64> {
    assert!(width >= 4 && height >= 4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut image = Array2::zeros((width * height, 3));
    let (cx, cy) = (0.3 * width as f64, 0.6 * height as f64);
    let radius = 0.2 * width.min(height) as f64;
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            let u = x as f64 / (width - 1) as f64;
            let v = y as f64 / (height - 1) as f64;
            let mut rgb = [0.15 + 0.7 * u, 0.2 + 0.6 * v, 0.8 - 0.5 * u];
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            if (dx * dx + dy * dy).sqrt() < radius {
                rgb = [0.85, 0.2, 0.15];
            }
            if x as f64 >= 0.55 * width as f64
                && (x as f64) < 0.9 * width as f64
                && y as f64 >= 0.1 * height as f64
                && (y as f64) < 0.35 * height as f64
            {
                rgb = [0.95, 0.85, 0.2];
            }
            for (c, base) in rgb.iter().enumerate() {
                image[[i, c]] = (base + rng.random_range(-0.03..0.03)).clamp(0.0, 1.0);
            }
        }
    }
    image
}

/// Quantization labels for an RGB image: `k` representative colors from a
/// seeded k-means; features are the raw pixel colors.
pub fn gen_colorquant(image: &Array2<f64>, k: usize, seed: u64) -> (Array2<f64>, LabelSet) {
    assert!(k >= 1 && image.nrows() >= k);
    let centers = kmeans(image, k, seed);
    let label_set = LabelSet::new(centers, FeatureMetric::Euclidean).unwrap();
    (image.clone(), label_set)
}

/// Lloyd iteration with deterministic seeding; empty clusters are reseeded to
/// the point farthest from its center. Centers are returned sorted by
/// luminance so label indices are stable.
fn kmeans(data: &Array2<f64>, k: usize, seed: u64) -> Array2<f64> {
    let (n, dim) = data.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6b6d_6561_6e73);
    let mut picked = Vec::with_capacity(k);
    while picked.len() < k {
        let i = rng.random_range(0..n);
        if !picked.contains(&i) {
            picked.push(i);
        }
    }
    let mut centers = Array2::zeros((k, dim));
    for (c, &i) in picked.iter().enumerate() {
        centers.row_mut(c).assign(&data.row(i));
    }
    let mut assign = vec![0usize; n];
    for _ in 0..100 {
        let mut changed = false;
        for i in 0..n {
            let mut best = (0usize, f64::INFINITY);
            for c in 0..k {
                let d: f64 = data
                    .row(i)
                    .iter()
                    .zip(centers.row(c))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d < best.1 {
                    best = (c, d);
                }
            }
            if assign[i] != best.0 {
                assign[i] = best.0;
                changed = true;
            }
        }
        let mut sums = Array2::<f64>::zeros((k, dim));
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[assign[i]] += 1;
            let mut row = sums.row_mut(assign[i]);
            row += &data.row(i);
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Reseed to the point farthest from its current center.
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da: f64 = data
                            .row(a)
                            .iter()
                            .zip(centers.row(assign[a]))
                            .map(|(x, y)| (x - y) * (x - y))
                            .sum();
                        let db: f64 = data
                            .row(b)
                            .iter()
                            .zip(centers.row(assign[b]))
                            .map(|(x, y)| (x - y) * (x - y))
                            .sum();
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                centers.row_mut(c).assign(&data.row(far));
                changed = true;
            } else {
                for d in 0..dim {
                    centers[[c, d]] = sums[[c, d]] / counts[c] as f64;
                }
            }
        }
        if !changed {
            break;
        }
    }
    // Sort rows by luminance (then lexicographically) for stable indexing.
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        let la: f64 = centers.row(a).sum();
        let lb: f64 = centers.row(b).sum();
        la.partial_cmp(&lb)
            .unwrap()
            .then_with(|| {
                centers
                    .row(a)
                    .iter()
                    .partial_cmp(centers.row(b).iter())
                    .unwrap()
            })
    });
    let mut sorted = Array2::zeros((k, dim));
    for (c, &o) in order.iter().enumerate() {
        sorted.row_mut(c).assign(&centers.row(o));
    }
    sorted
}

/// Outcome of a reference labeling run.
#[derive(Debug, Clone)]
pub struct LabelingResult {
    pub labels: Vec<usize>,
    /// Argmax probability per node.
    pub confidence: Vec<f64>,
    pub steps: usize,
    pub wall_seconds: f64,
}

impl LabelingResult {
    pub fn from_state(w: &AssignmentState, steps: usize, wall_seconds: f64) -> Self {
        let labels = w.argmax_labels();
        let confidence = labels
            .iter()
            .enumerate()
            .map(|(i, &j)| w.matrix()[[i, j]])
            .collect();
        Self { labels, confidence, steps, wall_seconds }
    }
}

/// Reference labeling of the full flow: geometric implicit Euler at `h`.
pub fn ground_truth_nonlinear_at(
    data: &ScenarioData,
    h: f64,
) -> Result<LabelingResult, IntegrateError> {
    let start = Instant::now();
    let tableau = ButcherTableau::backward_euler();
    let w0 = AssignmentState::uniform(data.graph.node_count(), data.graph.label_count());
    let trace = integrate(
        &tableau,
        &w0,
        &data.graph,
        &StepPolicy::Fixed { h },
        &IntegrateOptions::default(),
    )?;
    Ok(LabelingResult::from_state(
        &trace.final_state,
        trace.steps(),
        start.elapsed().as_secs_f64(),
    ))
}

/// Reference labeling of the full flow at the standard step size 0.5.
pub fn ground_truth_nonlinear(data: &ScenarioData) -> Result<LabelingResult, IntegrateError> {
    ground_truth_nonlinear_at(data, 0.5)
}

/// Reference labeling of the tangent linearization at the barycenter:
/// Euclidean implicit Euler at step 0.5, single linearization.
pub fn ground_truth_linear(data: &ScenarioData) -> Result<LabelingResult, IntegrateError> {
    let start = Instant::now();
    let w0 = AssignmentState::uniform(data.graph.node_count(), data.graph.label_count());
    let op = build_operator(w0, &data.graph);
    let run = integrate_linear_implicit(op, 0.5, &LinearIntegrateOptions::default(), None)?;
    Ok(LabelingResult::from_state(
        &run.state,
        run.entries.len(),
        start.elapsed().as_secs_f64(),
    ))
}

/// Pairwise feature distances between label prototypes (scenario sanity
/// checks).
pub fn prototype_distances(label_set: &LabelSet) -> Array2<f64> {
    let p: ArrayView2<f64> = label_set.prototypes();
    let k = p.nrows();
    Array2::from_shape_fn((k, k), |(i, j)| {
        p.row(i)
            .iter()
            .zip(p.row(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    })
}
