//! Primitives on the open probability simplex and its product manifold.
//!
//! A single assignment lives on the relative interior of the simplex
//! `S = { p : p_j > 0, <1, p> = 1 }` equipped with the Fisher-Rao metric.
//! All tangent vectors are represented in the flat space
//! `T0 = { v : <1, v> = 0 }`, shared by every base point.
//!
//! Core maps (componentwise multiplication/division throughout):
//!
//! * `project_t0(z) = z - mean(z) 1` orthogonal projection onto `T0`,
//! * `pi_p(z) = Diag(p) z - p <p, z>` the metric-induced projection at `p`,
//! * `big_exp(p, v) = p e^{v/p} / <p, e^{v/p}>` geodesic exponential,
//! * `exp_map(p, z) = p e^z / <p, e^z>` its `T0`-lifted variant,
//!   shift-invariant in `z` and evaluated with max-subtraction,
//! * `geometric_mean(base, points, w)` Riemannian (log-linear) weighted mean.
//!
//! The two projections commute: `pi_p = pi_p . project_t0 = project_t0 . pi_p`.
//!
//! Row-stochastic matrices ([`AssignmentState`]) and zero-row-sum matrices
//! ([`TangentField`]) extend every map row-wise over the product manifold;
//! those paths are parallelized over rows and allocate one output matrix.

use ndarray::{Array1, Array2, ArrayView1, ArrayViewMut1, Zip};
use thiserror::Error;

/// Tolerance on row sums of states (`sum = 1`) and tangents (`sum = 0`).
pub const ROW_SUM_TOL: f64 = 1e-12;

/// Tolerance on convex-weight sums in geometric means and graph weights.
pub const WEIGHT_SUM_TOL: f64 = 1e-10;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("input contains a non-finite value")]
    NonFinite,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("simplex point entries must be strictly positive")]
    NonPositive,
    #[error("coordinates sum to {sum}, expected {expected}")]
    BadSum { sum: f64, expected: f64 },
    #[error("weights sum to {sum}, expected 1 within {WEIGHT_SUM_TOL}")]
    WeightSum { sum: f64 },
    #[error("empty collection")]
    Empty,
}

// ---------------------------------------------------------------------------
// Vector-level types
// ---------------------------------------------------------------------------

/// A point in the relative interior of the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexPoint(Array1<f64>);

impl SimplexPoint {
    /// Validates strict positivity and unit sum (within [`ROW_SUM_TOL`]).
    pub fn new(p: Array1<f64>) -> Result<Self, GeometryError> {
        if p.is_empty() {
            return Err(GeometryError::Empty);
        }
        if p.iter().any(|x| !x.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        if p.iter().any(|&x| x <= 0.0) {
            return Err(GeometryError::NonPositive);
        }
        let sum = p.sum();
        if (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(GeometryError::BadSum { sum, expected: 1.0 });
        }
        Ok(Self(p))
    }

    /// The barycenter `1/n (1, ..., 1)`, the flow's canonical initial point.
    pub fn barycenter(n: usize) -> Self {
        assert!(n > 0, "simplex dimension must be positive");
        Self(Array1::from_elem(n, 1.0 / n as f64))
    }

    pub(crate) fn from_unchecked(p: Array1<f64>) -> Self {
        debug_assert!((p.sum() - 1.0).abs() <= 1e-9, "row sum drifted: {}", p.sum());
        Self(p)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn view(&self) -> ArrayView1<'_, f64> {
        self.0.view()
    }

    pub fn into_inner(self) -> Array1<f64> {
        self.0
    }
}

/// A tangent vector in the flat space `T0` (coordinates sum to zero).
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector(Array1<f64>);

impl TangentVector {
    /// Validates the zero-sum constraint (within [`ROW_SUM_TOL`]).
    pub fn new(v: Array1<f64>) -> Result<Self, GeometryError> {
        if v.is_empty() {
            return Err(GeometryError::Empty);
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        let sum = v.sum();
        if sum.abs() > ROW_SUM_TOL {
            return Err(GeometryError::BadSum { sum, expected: 0.0 });
        }
        Ok(Self(v))
    }

    pub fn zeros(n: usize) -> Self {
        Self(Array1::zeros(n))
    }

    pub(crate) fn from_unchecked(v: Array1<f64>) -> Self {
        Self(v)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn view(&self) -> ArrayView1<'_, f64> {
        self.0.view()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn into_inner(self) -> Array1<f64> {
        self.0
    }
}

// ---------------------------------------------------------------------------
// Row kernels
// ---------------------------------------------------------------------------

pub(crate) fn project_row(z: ArrayView1<f64>, mut out: ArrayViewMut1<f64>) {
    let mean = z.sum() / z.len() as f64;
    Zip::from(&mut out).and(&z).for_each(|o, &zj| *o = zj - mean);
}

pub(crate) fn pi_row(p: ArrayView1<f64>, z: ArrayView1<f64>, mut out: ArrayViewMut1<f64>) {
    let d = p.dot(&z);
    Zip::from(&mut out)
        .and(&p)
        .and(&z)
        .for_each(|o, &pj, &zj| *o = pj * (zj - d));
}

/// `p e^z / <p, e^z>` with max-subtraction; never overflows for finite `z`.
pub(crate) fn exp_map_row(p: ArrayView1<f64>, z: ArrayView1<f64>, mut out: ArrayViewMut1<f64>) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    Zip::from(&mut out).and(&p).and(&z).for_each(|o, &pj, &zj| {
        let e = pj * (zj - m).exp();
        *o = e;
        s += e;
    });
    out.mapv_inplace(|x| x / s);
}

pub(crate) fn exp_map_inv_row(p: ArrayView1<f64>, q: ArrayView1<f64>, mut out: ArrayViewMut1<f64>) {
    Zip::from(&mut out)
        .and(&q)
        .and(&p)
        .for_each(|o, &qj, &pj| *o = (qj / pj).ln());
    let mean = out.sum() / out.len() as f64;
    out.mapv_inplace(|x| x - mean);
}

pub(crate) fn big_exp_row(p: ArrayView1<f64>, v: ArrayView1<f64>, mut out: ArrayViewMut1<f64>) {
    // big_exp(p, v) = exp_map(p, v / p), componentwise quotient.
    Zip::from(&mut out)
        .and(&v)
        .and(&p)
        .for_each(|o, &vj, &pj| *o = vj / pj);
    let m = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    Zip::from(&mut out).and(&p).for_each(|o, &pj| {
        let e = pj * (*o - m).exp();
        *o = e;
        s += e;
    });
    out.mapv_inplace(|x| x / s);
}

pub(crate) fn big_exp_inv_row(p: ArrayView1<f64>, q: ArrayView1<f64>, mut out: ArrayViewMut1<f64>) {
    Zip::from(&mut out)
        .and(&q)
        .and(&p)
        .for_each(|o, &qj, &pj| *o = (qj / pj).ln());
    let d = p.dot(&out);
    Zip::from(&mut out).and(&p).for_each(|o, &pj| *o = pj * (*o - d));
}

fn check_dims(expected: usize, got: usize) -> Result<(), GeometryError> {
    if expected != got {
        return Err(GeometryError::DimensionMismatch { expected, got });
    }
    Ok(())
}

fn check_finite(z: ArrayView1<f64>) -> Result<(), GeometryError> {
    if z.iter().any(|x| !x.is_finite()) {
        return Err(GeometryError::NonFinite);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Vector-level operations
// ---------------------------------------------------------------------------

/// Orthogonal projection of an ambient vector onto `T0`: `z - mean(z) 1`.
pub fn project_t0(z: ArrayView1<f64>) -> Result<TangentVector, GeometryError> {
    if z.is_empty() {
        return Err(GeometryError::Empty);
    }
    check_finite(z)?;
    let mut out = Array1::zeros(z.len());
    project_row(z, out.view_mut());
    Ok(TangentVector::from_unchecked(out))
}

/// Projection onto the tangent space at `p`: `Diag(p) z - p <p, z>`.
///
/// Factors through `T0` on either side: `pi_p = pi_p . project_t0 =
/// project_t0 . pi_p`.
pub fn pi_p(p: &SimplexPoint, z: ArrayView1<f64>) -> Result<TangentVector, GeometryError> {
    check_dims(p.dim(), z.len())?;
    check_finite(z)?;
    let mut out = Array1::zeros(z.len());
    pi_row(p.view(), z, out.view_mut());
    Ok(TangentVector::from_unchecked(out))
}

/// Lifted exponential `exp_map(p, z) = p e^z / <p, e^z>`.
///
/// Invariant under shifts `z + c 1`; at the barycenter this is the softmax.
pub fn exp_map(p: &SimplexPoint, z: ArrayView1<f64>) -> Result<SimplexPoint, GeometryError> {
    check_dims(p.dim(), z.len())?;
    check_finite(z)?;
    let mut out = Array1::zeros(z.len());
    exp_map_row(p.view(), z, out.view_mut());
    Ok(SimplexPoint::from_unchecked(out))
}

/// Inverse of [`exp_map`] up to shifts: `project_t0(log(q / p))`.
pub fn exp_map_inv(p: &SimplexPoint, q: &SimplexPoint) -> Result<TangentVector, GeometryError> {
    check_dims(p.dim(), q.dim())?;
    let mut out = Array1::zeros(p.dim());
    exp_map_inv_row(p.view(), q.view(), out.view_mut());
    Ok(TangentVector::from_unchecked(out))
}

/// Geodesic exponential `big_exp(p, v) = p e^{v/p} / <p, e^{v/p}>`.
pub fn big_exp(p: &SimplexPoint, v: &TangentVector) -> Result<SimplexPoint, GeometryError> {
    check_dims(p.dim(), v.dim())?;
    let mut out = Array1::zeros(p.dim());
    big_exp_row(p.view(), v.view(), out.view_mut());
    Ok(SimplexPoint::from_unchecked(out))
}

/// Inverse of [`big_exp`]: `pi_p(log(q / p))`.
pub fn big_exp_inv(p: &SimplexPoint, q: &SimplexPoint) -> Result<TangentVector, GeometryError> {
    check_dims(p.dim(), q.dim())?;
    let mut out = Array1::zeros(p.dim());
    big_exp_inv_row(p.view(), q.view(), out.view_mut());
    Ok(TangentVector::from_unchecked(out))
}

/// Riemannian weighted geometric mean anchored at `base`:
///
/// `exp_map(base, sum_k w_k log(points_k) - log(base))`, which equals
/// `big_exp(base, sum_k w_k big_exp_inv(base, points_k))` for convex weights.
pub fn geometric_mean(
    base: &SimplexPoint,
    points: &[SimplexPoint],
    weights: &[f64],
) -> Result<SimplexPoint, GeometryError> {
    if points.is_empty() {
        return Err(GeometryError::Empty);
    }
    if points.len() != weights.len() {
        return Err(GeometryError::DimensionMismatch {
            expected: points.len(),
            got: weights.len(),
        });
    }
    let wsum: f64 = weights.iter().sum();
    if !wsum.is_finite() || (wsum - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(GeometryError::WeightSum { sum: wsum });
    }
    let n = base.dim();
    let mut z = Array1::zeros(n);
    for (q, &w) in points.iter().zip(weights) {
        check_dims(n, q.dim())?;
        Zip::from(&mut z).and(q.view()).for_each(|zj, &qj| *zj += w * qj.ln());
    }
    Zip::from(&mut z).and(base.view()).for_each(|zj, &pj| *zj -= pj.ln());
    exp_map(base, z.view())
}

// ---------------------------------------------------------------------------
// Product-manifold types
// ---------------------------------------------------------------------------

/// Row-stochastic assignment matrix: one simplex point per node.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentState(Array2<f64>);

impl AssignmentState {
    /// Validates every row as a simplex point.
    pub fn new(w: Array2<f64>) -> Result<Self, GeometryError> {
        let state = Self(w);
        state.validate()?;
        Ok(state)
    }

    /// The barycenter of every row: the canonical initial state.
    pub fn uniform(nodes: usize, labels: usize) -> Self {
        assert!(nodes > 0 && labels > 0);
        Self(Array2::from_elem((nodes, labels), 1.0 / labels as f64))
    }

    pub(crate) fn from_unchecked(w: Array2<f64>) -> Self {
        Self(w)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.0.is_empty() {
            return Err(GeometryError::Empty);
        }
        for row in self.0.rows() {
            if row.iter().any(|x| !x.is_finite()) {
                return Err(GeometryError::NonFinite);
            }
            if row.iter().any(|&x| x <= 0.0) {
                return Err(GeometryError::NonPositive);
            }
            let sum = row.sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(GeometryError::BadSum { sum, expected: 1.0 });
            }
        }
        Ok(())
    }

    pub fn nodes(&self) -> usize {
        self.0.nrows()
    }

    pub fn labels(&self) -> usize {
        self.0.ncols()
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.0.row(i)
    }

    /// Hard labeling: per-row argmax (first maximum on ties).
    pub fn argmax_labels(&self) -> Vec<usize> {
        self.0
            .rows()
            .into_iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |(bi, bv), (j, &x)| {
                        if x > bv {
                            (j, x)
                        } else {
                            (bi, bv)
                        }
                    })
                    .0
            })
            .collect()
    }

    /// Per-row maximum entry, the confidence of the hard labeling.
    pub fn confidences(&self) -> Vec<f64> {
        self.0
            .rows()
            .into_iter()
            .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }
}

/// Tangent field on the product manifold: one `T0` vector per node.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentField(Array2<f64>);

impl TangentField {
    /// Validates every row sum against [`ROW_SUM_TOL`].
    pub fn new(v: Array2<f64>) -> Result<Self, GeometryError> {
        if v.is_empty() {
            return Err(GeometryError::Empty);
        }
        for row in v.rows() {
            if row.iter().any(|x| !x.is_finite()) {
                return Err(GeometryError::NonFinite);
            }
            let sum = row.sum();
            if sum.abs() > ROW_SUM_TOL {
                return Err(GeometryError::BadSum { sum, expected: 0.0 });
            }
        }
        Ok(Self(v))
    }

    pub fn zeros(nodes: usize, labels: usize) -> Self {
        Self(Array2::zeros((nodes, labels)))
    }

    pub(crate) fn from_unchecked(v: Array2<f64>) -> Self {
        Self(v)
    }

    pub fn nodes(&self) -> usize {
        self.0.nrows()
    }

    pub fn labels(&self) -> usize {
        self.0.ncols()
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.0.row(i)
    }

    /// Largest row norm `max_i ||V_i||_2`.
    pub fn max_row_norm(&self) -> f64 {
        self.0
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    /// Frobenius norm of the stacked field.
    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn scale(&self, s: f64) -> TangentField {
        Self(&self.0 * s)
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }
}

/// Convergence metric between tangent fields: `max_i ||a_i - b_i||_2 / |J|`.
pub fn scaled_max_row_distance(a: &TangentField, b: &TangentField) -> f64 {
    assert_eq!(a.matrix().dim(), b.matrix().dim(), "field shape mismatch");
    let labels = a.labels() as f64;
    let mut worst = 0.0f64;
    for (ra, rb) in a.matrix().rows().into_iter().zip(b.matrix().rows()) {
        let d = ra
            .iter()
            .zip(rb.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        worst = worst.max(d);
    }
    worst / labels
}

// ---------------------------------------------------------------------------
// Row-wise extensions over the product manifold
// ---------------------------------------------------------------------------

macro_rules! rowwise_binary {
    ($name:ident, $kernel:ident, $a:ty, $b:ty, $out:ident) => {
        pub fn $name(a: &$a, b: &$b) -> $out {
            let am = a.matrix();
            let bm = b.matrix();
            assert_eq!(am.dim(), bm.dim(), "field shape mismatch");
            let mut out = Array2::zeros(am.dim());
            Zip::from(out.rows_mut())
                .and(am.rows())
                .and(bm.rows())
                .par_for_each(|o, ra, rb| $kernel(ra, rb, o));
            $out::from_unchecked(out)
        }
    };
}

/// Row-wise [`exp_map`] on a raw direction matrix (rows need not sum to zero).
pub fn exp_map_state(w: &AssignmentState, z: &Array2<f64>) -> AssignmentState {
    let wm = w.matrix();
    assert_eq!(wm.dim(), z.dim(), "field shape mismatch");
    let mut out = Array2::zeros(wm.dim());
    Zip::from(out.rows_mut())
        .and(wm.rows())
        .and(z.rows())
        .par_for_each(|o, p, zr| exp_map_row(p, zr, o));
    AssignmentState::from_unchecked(out)
}

/// Row-wise [`project_t0`] on a raw matrix.
pub fn project_t0_field(z: &Array2<f64>) -> TangentField {
    let mut out = Array2::zeros(z.dim());
    Zip::from(out.rows_mut())
        .and(z.rows())
        .par_for_each(|o, zr| project_row(zr, o));
    TangentField::from_unchecked(out)
}

/// Row-wise [`pi_p`] at state `w` applied to a raw matrix.
pub fn pi_state(w: &AssignmentState, z: &Array2<f64>) -> TangentField {
    let wm = w.matrix();
    assert_eq!(wm.dim(), z.dim(), "field shape mismatch");
    let mut out = Array2::zeros(wm.dim());
    Zip::from(out.rows_mut())
        .and(wm.rows())
        .and(z.rows())
        .par_for_each(|o, p, zr| pi_row(p, zr, o));
    TangentField::from_unchecked(out)
}

rowwise_binary!(big_exp_state, big_exp_row, AssignmentState, TangentField, AssignmentState);
rowwise_binary!(big_exp_inv_state, big_exp_inv_row, AssignmentState, AssignmentState, TangentField);
rowwise_binary!(exp_map_tangent, exp_map_row, AssignmentState, TangentField, AssignmentState);
rowwise_binary!(exp_map_inv_state, exp_map_inv_row, AssignmentState, AssignmentState, TangentField);
