//! The linear assignment flow: linearization of the similarity dynamics at a
//! base point `W0`.
//!
//! Writing `W(t) = big_exp(W0, V(t))`, the flow is governed on the flat
//! tangent space by the linear ODE
//!
//! ```text
//! dV/dt = a + A V,    a = pi(W0, s0),    A = pi(W0) dS(W0),
//! ```
//!
//! with `s0 = similarity(W0)`. The Jacobian of the similarity map acts
//! block-wise along graph edges,
//!
//! ```text
//! dS_i(V) = sum_{k in N_i} w_ik pi(s0_i, V_k / W0_k),
//! ```
//!
//! so `A` has a |J|x|J| block `A_ik` exactly where `k in N_i`; entrywise
//! `dS_ik[j,l] = w_ik s0_ij (delta_jl - s0_il) / W0_kl`. `A` is applied
//! matrix-free through the block-action form (O(|I||N||J|) per application);
//! the entrywise form is retained for small dense test oracles.
//!
//! The spectral norm of `A`, needed by the step-size bounds, is estimated
//! once at build time by power iteration on `A^T A` from a fixed seeded start
//! (200 iterations max, relative eigenvalue change below 1e-8); since the
//! bounds are monotone in the norm, `norm_bound` inflates the estimate by 1%
//! so it stays an upper bound under estimation error.
//!
//! Relinearization rebuilds the operator at the current state whenever
//! `max_i ||V_i|| > V_max / c`, updating base row `i` only while
//! `min_j W_ij > 0.01`; `V` is recomputed through the inverse of the big
//! exponential so the represented state is unchanged.

use ndarray::{Array1, Array2, Zip};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::flow::{similarity, LabelingGraph};
use crate::geometry::{
    big_exp_inv_state, big_exp_state, pi_row, pi_state, AssignmentState, TangentField,
};

/// The linearized flow `(a, A)` at a base point, with the cached norm of `A`.
#[derive(Debug, Clone)]
pub struct LinearFlowOperator<'g> {
    graph: &'g LabelingGraph,
    w0: AssignmentState,
    s0: AssignmentState,
    drift: TangentField,
    norm_a: f64,
}

/// Builds the linearization at `w0`: `s0`, the drift `a`, the matrix-free
/// Jacobian action, and the power-iteration norm estimate.
pub fn build_operator<'g>(w0: AssignmentState, graph: &'g LabelingGraph) -> LinearFlowOperator<'g> {
    assert_eq!(w0.nodes(), graph.node_count(), "state/graph node mismatch");
    assert_eq!(w0.labels(), graph.label_count(), "state/graph label mismatch");
    let s0 = similarity(&w0, graph);
    let drift = pi_state(&w0, s0.matrix());
    let mut op = LinearFlowOperator { graph, w0, s0, drift, norm_a: 0.0 };
    op.norm_a = estimate_spectral_norm(&op);
    op
}

impl<'g> LinearFlowOperator<'g> {
    pub fn graph(&self) -> &'g LabelingGraph {
        self.graph
    }

    /// The linearization point `W0`.
    pub fn base(&self) -> &AssignmentState {
        &self.w0
    }

    /// `s0 = similarity(W0)`.
    pub fn similarity_at_base(&self) -> &AssignmentState {
        &self.s0
    }

    /// The constant drift `a = pi(W0, s0)`.
    pub fn drift(&self) -> &TangentField {
        &self.drift
    }

    /// Raw power-iteration estimate of the spectral norm of `A`.
    pub fn spectral_norm_estimate(&self) -> f64 {
        self.norm_a
    }

    /// Safety-inflated upper bound on the spectral norm (valid input for the
    /// local error bounds, which are monotone in the norm).
    pub fn norm_bound(&self) -> f64 {
        self.norm_a * 1.01
    }

    /// Jacobian action of the similarity map, `dS(W0) V` (no outer `pi`).
    ///
    /// The output lies row-wise in `T0` (range of `pi(s0_i, .)`).
    pub fn apply_jacobian(&self, v: &TangentField) -> TangentField {
        TangentField::from_unchecked(self.jacobian_matrix(v.matrix()))
    }

    /// `A v = pi(W0, dS(W0) v)`.
    pub fn apply(&self, v: &TangentField) -> TangentField {
        TangentField::from_unchecked(self.apply_matrix(v.matrix()))
    }

    /// Matrix-free `A` on a raw field (rows need not sum to zero).
    pub fn apply_matrix(&self, z: &Array2<f64>) -> Array2<f64> {
        assert_eq!(z.dim(), self.w0.matrix().dim(), "field shape mismatch");
        let labels = self.w0.labels();
        let r = z / self.w0.matrix();
        let mut out = Array2::zeros(z.dim());
        Zip::indexed(out.rows_mut()).par_for_each(|i, mut o| {
            let (nbrs, wts) = self.graph.neighborhood(i);
            let mut y = Array1::zeros(labels);
            for (&k, &wik) in nbrs.iter().zip(wts) {
                y.scaled_add(wik, &r.row(k));
            }
            let mut t = Array1::zeros(labels);
            pi_row(self.s0.row(i), y.view(), t.view_mut());
            pi_row(self.w0.row(i), t.view(), o.view_mut());
        });
        out
    }

    /// Matrix-free `dS(W0)` on a raw field.
    pub fn jacobian_matrix(&self, z: &Array2<f64>) -> Array2<f64> {
        assert_eq!(z.dim(), self.w0.matrix().dim(), "field shape mismatch");
        let labels = self.w0.labels();
        let r = z / self.w0.matrix();
        let mut out = Array2::zeros(z.dim());
        Zip::indexed(out.rows_mut()).par_for_each(|i, o| {
            let (nbrs, wts) = self.graph.neighborhood(i);
            let mut y = Array1::zeros(labels);
            for (&k, &wik) in nbrs.iter().zip(wts) {
                y.scaled_add(wik, &r.row(k));
            }
            pi_row(self.s0.row(i), y.view(), o);
        });
        out
    }

    /// Matrix-free `A^T` (adjoint in the flat inner product) on a raw field.
    ///
    /// Both `pi` factors are symmetric, so the block transpose is
    /// `A_ik^T = w_ik Diag(1/W0_k) pi(s0_i) pi(W0_i)` and the output row `k`
    /// gathers over the nodes whose neighborhood contains `k`.
    pub fn apply_transpose_matrix(&self, z: &Array2<f64>) -> Array2<f64> {
        assert_eq!(z.dim(), self.w0.matrix().dim(), "field shape mismatch");
        let labels = self.w0.labels();
        let mut p = Array2::zeros(z.dim());
        Zip::from(p.rows_mut())
            .and(z.rows())
            .and(self.w0.matrix().rows())
            .and(self.s0.matrix().rows())
            .par_for_each(|mut o, zi, w0i, s0i| {
                let mut t = Array1::zeros(labels);
                pi_row(w0i, zi, t.view_mut());
                pi_row(s0i, t.view(), o.view_mut());
            });
        let mut out = Array2::zeros(z.dim());
        Zip::indexed(out.rows_mut()).par_for_each(|k, mut o| {
            let (srcs, wts) = self.graph.incoming(k);
            for (&i, &wik) in srcs.iter().zip(wts) {
                o.scaled_add(wik, &p.row(i));
            }
            o /= &self.w0.matrix().row(k);
        });
        out
    }

    /// Entrywise |J|x|J| Jacobian block `dS_ik`; exactly zero when `k` is not
    /// a neighbor of `i`.
    pub fn jacobian_block(&self, i: usize, k: usize) -> Array2<f64> {
        let labels = self.w0.labels();
        let mut b = Array2::zeros((labels, labels));
        let (nbrs, wts) = self.graph.neighborhood(i);
        let Some(pos) = nbrs.iter().position(|&n| n == k) else {
            return b;
        };
        let wik = wts[pos];
        let s0 = self.s0.matrix();
        let w0 = self.w0.matrix();
        for j in 0..labels {
            for l in 0..labels {
                let delta = if j == l { 1.0 } else { 0.0 };
                b[[j, l]] = wik * s0[[i, j]] * (delta - s0[[i, l]]) / w0[[k, l]];
            }
        }
        b
    }

    /// Dense `dS(W0)` on the flattened (row-major) index space; test oracle.
    pub fn dense_jacobian(&self) -> Array2<f64> {
        let (nodes, labels) = (self.w0.nodes(), self.w0.labels());
        let n = nodes * labels;
        let mut m = Array2::zeros((n, n));
        for i in 0..nodes {
            let (nbrs, _) = self.graph.neighborhood(i);
            for &k in nbrs {
                let b = self.jacobian_block(i, k);
                for j in 0..labels {
                    for l in 0..labels {
                        m[[i * labels + j, k * labels + l]] = b[[j, l]];
                    }
                }
            }
        }
        m
    }

    /// Dense `A = pi(W0) dS(W0)`; test oracle.
    pub fn dense_matrix(&self) -> Array2<f64> {
        let (nodes, labels) = (self.w0.nodes(), self.w0.labels());
        let n = nodes * labels;
        let w0 = self.w0.matrix();
        let mut m = Array2::zeros((n, n));
        for i in 0..nodes {
            let pi_i = Array2::from_shape_fn((labels, labels), |(j, l)| {
                let delta = if j == l { w0[[i, j]] } else { 0.0 };
                delta - w0[[i, j]] * w0[[i, l]]
            });
            let (nbrs, _) = self.graph.neighborhood(i);
            for &k in nbrs {
                let b = pi_i.dot(&self.jacobian_block(i, k));
                for j in 0..labels {
                    for l in 0..labels {
                        m[[i * labels + j, k * labels + l]] = b[[j, l]];
                    }
                }
            }
        }
        m
    }
}

/// Maps a tangent solution back to the manifold, `W = big_exp(W0, V)`.
pub fn linear_flow_state(op: &LinearFlowOperator, v: &TangentField) -> AssignmentState {
    big_exp_state(op.base(), v)
}

/// Power iteration on `A^T A` from a fixed seeded start vector.
fn estimate_spectral_norm(op: &LinearFlowOperator) -> f64 {
    let dim = op.w0.matrix().dim();
    let mut rng = ChaCha8Rng::seed_from_u64(0x51e9_a17e);
    let mut x = Array2::from_shape_fn(dim, |_| rng.random_range(-1.0..1.0));
    let frob = |z: &Array2<f64>| z.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nx = frob(&x);
    if nx == 0.0 {
        return 0.0;
    }
    x.mapv_inplace(|v| v / nx);
    let mut sigma2 = 0.0;
    for _ in 0..200 {
        let ax = op.apply_matrix(&x);
        let s2: f64 = ax.iter().map(|v| v * v).sum();
        if s2 == 0.0 {
            return 0.0;
        }
        let mut y = op.apply_transpose_matrix(&ax);
        let ny = frob(&y);
        if ny == 0.0 {
            return 0.0;
        }
        y.mapv_inplace(|v| v / ny);
        let settled = (s2 - sigma2).abs() <= 1e-8 * s2;
        sigma2 = s2;
        x = y;
        if settled {
            break;
        }
    }
    sigma2.sqrt()
}

/// Relinearization trigger: rebuild once `max_i ||V_i|| > v_max / c`.
#[derive(Debug, Clone, Copy)]
pub struct RelinearizationControl {
    /// Threshold divisor; `c = 1` reproduces a single linearization.
    pub c: f64,
    /// Largest tangent row norm observed on a pilot run.
    pub v_max: f64,
    /// Base rows are moved only while `min_j W_ij` exceeds this floor.
    pub interior_floor: f64,
}

impl RelinearizationControl {
    pub fn new(c: f64, v_max: f64) -> Self {
        assert!(c >= 1.0, "threshold divisor must be >= 1");
        assert!(v_max >= 0.0 && v_max.is_finite());
        Self { c, v_max, interior_floor: 0.01 }
    }

    pub fn triggered(&self, v: &TangentField) -> bool {
        v.max_row_norm() > self.v_max / self.c
    }
}

/// Rebuilds the linearization at the current state when the control triggers.
///
/// Base row `i` moves to the current `W_i` only while `min_j W_ij` stays
/// above the interior floor; `V` is recomputed at the new base so the
/// represented state `big_exp(W0', V')` is unchanged. Returns `None` when the
/// control does not trigger or no row is eligible to move.
pub fn relinearize<'g>(
    op: &LinearFlowOperator<'g>,
    v: &TangentField,
    ctrl: &RelinearizationControl,
) -> Option<(LinearFlowOperator<'g>, TangentField)> {
    if !ctrl.triggered(v) {
        return None;
    }
    let state = linear_flow_state(op, v);
    let mut base = op.base().matrix().clone();
    let mut moved = 0usize;
    for i in 0..state.nodes() {
        let row = state.row(i);
        if row.iter().cloned().fold(f64::INFINITY, f64::min) > ctrl.interior_floor {
            base.row_mut(i).assign(&row);
            moved += 1;
        }
    }
    if moved == 0 {
        return None;
    }
    let base = AssignmentState::new(base).expect("moved rows come from a valid state");
    let v_new = big_exp_inv_state(&base, &state);
    Some((build_operator(base, op.graph()), v_new))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::project_t0_field;
    use crate::rkmk::{rkmk_step, ButcherTableau};
    use ndarray::Array2;
    
    use rand_chacha::ChaCha8Rng;

    fn random_state(rng: &mut impl Rng, nodes: usize, labels: usize) -> AssignmentState {
        let mut w = Array2::zeros((nodes, labels));
        for i in 0..nodes {
            let row: Vec<f64> = (0..labels).map(|_| rng.random_range(0.1..1.0)).collect();
            let s: f64 = row.iter().sum();
            for (j, x) in row.iter().enumerate() {
                w[[i, j]] = x / s;
            }
        }
        AssignmentState::new(w).unwrap()
    }

    fn random_tangent(rng: &mut impl Rng, nodes: usize, labels: usize) -> TangentField {
        let z = Array2::from_shape_fn((nodes, labels), |_| rng.random_range(-1.0..1.0));
        project_t0_field(&z)
    }

    fn grid_instance(rng: &mut impl Rng, w: usize, h: usize, labels: usize) -> LabelingGraph {
        let d = Array2::from_shape_fn((w * h, labels), |_| rng.random_range(0.0..1.0));
        LabelingGraph::grid(w, h, 3, d, 0.3).unwrap()
    }

    fn flatten(m: &Array2<f64>) -> Array1<f64> {
        Array1::from_iter(m.iter().cloned())
    }

    fn max_abs(m: &Array2<f64>) -> f64 {
        m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
    }

    #[test]
    fn drift_is_projected_similarity_with_zero_row_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let g = grid_instance(&mut rng, 3, 2, 4);
        let w0 = random_state(&mut rng, 6, 4);
        let op = build_operator(w0.clone(), &g);
        let expect = pi_state(&w0, similarity(&w0, &g).matrix());
        for (a, b) in op.drift().matrix().iter().zip(expect.matrix()) {
            assert!((a - b).abs() < 1e-15);
        }
        for i in 0..6 {
            assert!(op.drift().row(i).sum().abs() < 1e-12);
        }
    }

    #[test]
    fn block_action_agrees_with_entrywise_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let g = grid_instance(&mut rng, 3, 2, 4);
        let w0 = random_state(&mut rng, 6, 4);
        let op = build_operator(w0, &g);
        let v = random_tangent(&mut rng, 6, 4);
        let dense = op.dense_jacobian();
        let by_blocks = dense.dot(&flatten(v.matrix()));
        let by_action = flatten(op.apply_jacobian(&v).matrix());
        for (a, b) in by_action.iter().zip(&by_blocks) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn jacobian_blocks_vanish_off_the_neighborhood() {
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let g = grid_instance(&mut rng, 4, 4, 3);
        let w0 = random_state(&mut rng, 16, 3);
        let op = build_operator(w0, &g);
        // Node 0 (corner) has neighborhood {0, 1, 4, 5}; node 15 is far away.
        let b = op.jacobian_block(0, 15);
        assert!(b.iter().all(|&x| x == 0.0));
        assert!(op.jacobian_block(0, 1).iter().any(|&x| x != 0.0));
    }

    #[test]
    fn jacobian_range_has_zero_row_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let g = grid_instance(&mut rng, 3, 2, 4);
        let w0 = random_state(&mut rng, 6, 4);
        let op = build_operator(w0, &g);
        let v = random_tangent(&mut rng, 6, 4);
        let js = op.apply_jacobian(&v);
        let av = op.apply(&v);
        for i in 0..6 {
            assert!(js.row(i).sum().abs() < 1e-12);
            assert!(av.row(i).sum().abs() < 1e-12);
        }
        // Column blocks map into T0 as well: 1^T dS_ik = 0.
        let b = op.jacobian_block(0, 1);
        for l in 0..4 {
            assert!(b.column(l).sum().abs() < 1e-13);
        }
    }

    #[test]
    fn jacobian_matches_central_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(65);
        for _ in 0..5 {
            let g = grid_instance(&mut rng, 3, 2, 4);
            let w0 = random_state(&mut rng, 6, 4);
            let op = build_operator(w0.clone(), &g);
            let v = random_tangent(&mut rng, 6, 4);
            let eps = 1e-6;
            let wp = big_exp_state(&w0, &v.scale(eps));
            let wm = big_exp_state(&w0, &v.scale(-eps));
            let fd = (similarity(&wp, &g).matrix() - similarity(&wm, &g).matrix()) / (2.0 * eps);
            let an = op.apply_jacobian(&v);
            let num = max_abs(&(&fd - an.matrix()));
            let den = max_abs(an.matrix());
            assert!(num / den <= 1e-5, "relative error {}", num / den);
        }
    }

    #[test]
    fn full_operator_matches_directional_derivative_of_the_field() {
        // g(V) = pi(W0, S(big_exp(W0, V))) has g(0) = a and dg(0) = A.
        let mut rng = ChaCha8Rng::seed_from_u64(66);
        let g = grid_instance(&mut rng, 3, 2, 4);
        let w0 = random_state(&mut rng, 6, 4);
        let op = build_operator(w0.clone(), &g);
        let v = random_tangent(&mut rng, 6, 4);
        let eps = 1e-5;
        let w_eps = big_exp_state(&w0, &v.scale(eps));
        let g_eps = pi_state(&w0, similarity(&w_eps, &g).matrix());
        let fd = (g_eps.matrix() - op.drift().matrix()) / eps;
        let av = op.apply(&v);
        let num = max_abs(&(&fd - av.matrix()));
        let den = max_abs(av.matrix());
        assert!(num / den <= 1e-4, "relative error {}", num / den);
    }

    #[test]
    fn matrix_free_apply_matches_dense_assembly() {
        let mut rng = ChaCha8Rng::seed_from_u64(67);
        let g = grid_instance(&mut rng, 3, 2, 3);
        let w0 = random_state(&mut rng, 6, 3);
        let op = build_operator(w0, &g);
        let dense = op.dense_matrix();
        for _ in 0..10 {
            let v = random_tangent(&mut rng, 6, 3);
            let by_dense = dense.dot(&flatten(v.matrix()));
            let by_action = flatten(op.apply(&v).matrix());
            for (a, b) in by_action.iter().zip(&by_dense) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transpose_action_matches_dense_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(68);
        let g = grid_instance(&mut rng, 3, 2, 3);
        let w0 = random_state(&mut rng, 6, 3);
        let op = build_operator(w0, &g);
        let dense_t = op.dense_matrix().reversed_axes();
        for _ in 0..10 {
            let z = Array2::from_shape_fn((6, 3), |_| rng.random_range(-1.0..1.0));
            let by_dense = dense_t.dot(&flatten(&z));
            let by_action = flatten(&op.apply_transpose_matrix(&z));
            for (a, b) in by_action.iter().zip(&by_dense) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn power_iteration_matches_dense_svd() {
        let mut rng = ChaCha8Rng::seed_from_u64(69);
        let g = grid_instance(&mut rng, 3, 2, 3);
        let w0 = random_state(&mut rng, 6, 3);
        let op = build_operator(w0, &g);
        let dense = op.dense_matrix();
        let n = dense.nrows();
        let m = nalgebra::DMatrix::from_row_iterator(n, n, dense.iter().cloned());
        let svd = m.svd(false, false);
        let sigma_ref = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
        let rel = (op.spectral_norm_estimate() - sigma_ref).abs() / sigma_ref;
        assert!(rel < 1e-6, "relative error {rel}");
        assert!(op.norm_bound() > sigma_ref);
    }

    #[test]
    fn linear_state_at_zero_is_the_base_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let g = grid_instance(&mut rng, 3, 2, 3);
        let w0 = random_state(&mut rng, 6, 3);
        let op = build_operator(w0.clone(), &g);
        let w = linear_flow_state(&op, &TangentField::zeros(6, 3));
        for (a, b) in w.matrix().iter().zip(w0.matrix()) {
            assert!((a - b).abs() < 1e-15);
        }
        // Strict positivity for a large tangent vector.
        let mut v = Array2::zeros((6, 3));
        v[[0, 0]] = 60.0;
        v[[0, 1]] = -30.0;
        v[[0, 2]] = -30.0;
        let far = linear_flow_state(&op, &TangentField::new(v).unwrap());
        assert!(far.matrix().iter().all(|&x| x > 0.0));
        far.validate().unwrap();
    }

    /// Tiny-step RK4 on dV/dt = a + AV, used as an in-test trajectory oracle.
    fn linear_trajectory(op: &LinearFlowOperator, t: f64, steps: usize) -> TangentField {
        let h = t / steps as f64;
        let mut v = Array2::zeros(op.base().matrix().dim());
        let rhs = |x: &Array2<f64>| op.drift().matrix() + &op.apply_matrix(x);
        for _ in 0..steps {
            let k1 = rhs(&v);
            let k2 = rhs(&(&v + &(&k1 * (h / 2.0))));
            let k3 = rhs(&(&v + &(&k2 * (h / 2.0))));
            let k4 = rhs(&(&v + &(&k3 * h)));
            v = &v + &((k1 + &k2 * 2.0 + &k3 * 2.0 + k4) * (h / 6.0));
        }
        TangentField::from_unchecked(v)
    }

    #[test]
    fn linear_state_time_derivative_matches_the_flow_equation() {
        // d/dt big_exp(W0, V(t)) = pi(W(t), s0 + dS(W0) V(t)) along the
        // linear tangent solution, checked by central differences in t.
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let g = grid_instance(&mut rng, 3, 2, 3);
        let w0 = random_state(&mut rng, 6, 3);
        let op = build_operator(w0, &g);
        let (t, dt) = (0.3, 1e-4);
        let w_mid = linear_flow_state(&op, &linear_trajectory(&op, t, 3000));
        let w_plus = linear_flow_state(&op, &linear_trajectory(&op, t + dt, 3000));
        let w_minus = linear_flow_state(&op, &linear_trajectory(&op, t - dt, 3000));
        let fd = (w_plus.matrix() - w_minus.matrix()) / (2.0 * dt);
        let v_mid = linear_trajectory(&op, t, 3000);
        let s_lin = op.similarity_at_base().matrix() + &op.jacobian_matrix(v_mid.matrix());
        let expect = pi_state(&w_mid, &s_lin);
        let err = max_abs(&(&fd - expect.matrix()));
        assert!(err < 1e-6, "max deviation {err}");
    }

    #[test]
    fn linear_flow_agrees_with_nonlinear_to_first_order() {
        // Both flows leave W0 with the same velocity, so the deviation is
        // O(t^2) at worst; in this chart the linearization error is
        // O(||V||^2) with ||V|| = O(t), which integrates to an observed
        // cubic decay. The log-log slope must be comfortably above 2.
        let mut rng = ChaCha8Rng::seed_from_u64(72);
        let g = grid_instance(&mut rng, 3, 2, 3);
        let w0 = random_state(&mut rng, 6, 3);
        let op = build_operator(w0.clone(), &g);
        let rk4 = ButcherTableau::rk4();
        let times = [0.4, 0.2, 0.1, 0.05];
        let mut devs = Vec::new();
        for &t in &times {
            let w_lin = linear_flow_state(&op, &linear_trajectory(&op, t, 2000));
            let mut w_non = w0.clone();
            let steps = 400;
            for _ in 0..steps {
                w_non = rkmk_step(&rk4, &w_non, &g, t / steps as f64).state;
            }
            devs.push(max_abs(&(w_lin.matrix() - w_non.matrix())));
        }
        // Least-squares slope of log(dev) against log(t).
        let xs: Vec<f64> = times.iter().map(|t| t.ln()).collect();
        let ys: Vec<f64> = devs.iter().map(|d| d.ln()).collect();
        let n = xs.len() as f64;
        let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
        let slope: f64 = xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| (x - mx) * (y - my))
            .sum::<f64>()
            / xs.iter().map(|x| (x - mx) * (x - mx)).sum::<f64>();
        assert!(slope > 1.9 && slope < 3.6, "slope {slope}, deviations {devs:?}");
    }

    #[test]
    fn relinearization_triggers_on_norm_and_preserves_the_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        let g = grid_instance(&mut rng, 3, 2, 3);
        let w0 = AssignmentState::uniform(6, 3);
        let op = build_operator(w0, &g);
        let v = random_tangent(&mut rng, 6, 3);
        let quiet = RelinearizationControl::new(2.0, 10.0 * v.max_row_norm());
        assert!(relinearize(&op, &v, &quiet).is_none());
        let eager = RelinearizationControl::new(2.0, v.max_row_norm());
        let before = linear_flow_state(&op, &v);
        let (op2, v2) = relinearize(&op, &v, &eager).expect("threshold exceeded");
        let after = linear_flow_state(&op2, &v2);
        for (a, b) in after.matrix().iter().zip(before.matrix()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn relinearization_leaves_near_vertex_rows_anchored() {
        let mut rng = ChaCha8Rng::seed_from_u64(74);
        let g = grid_instance(&mut rng, 3, 2, 3);
        let w0 = AssignmentState::uniform(6, 3);
        let op = build_operator(w0.clone(), &g);
        // Row 0 pushed essentially onto a vertex, the rest stay interior.
        let mut vm = Array2::zeros((6, 3));
        vm[[0, 0]] = 8.0;
        vm[[0, 1]] = -4.0;
        vm[[0, 2]] = -4.0;
        vm[[1, 0]] = 0.4;
        vm[[1, 1]] = -0.2;
        vm[[1, 2]] = -0.2;
        let v = TangentField::new(vm).unwrap();
        let state = linear_flow_state(&op, &v);
        assert!(state.row(0).iter().cloned().fold(f64::INFINITY, f64::min) < 0.01);
        let ctrl = RelinearizationControl::new(1.0, 0.5 * v.max_row_norm());
        let (op2, _) = relinearize(&op, &v, &ctrl).unwrap();
        for (a, b) in op2.base().row(0).iter().zip(w0.row(0)) {
            assert!((a - b).abs() < 1e-15, "frozen row must keep the old base");
        }
        for (a, b) in op2.base().row(1).iter().zip(state.row(1)) {
            assert!((a - b).abs() < 1e-15, "interior row must move to the state");
        }
    }

    #[test]
    fn pilot_threshold_with_unit_divisor_never_retriggers() {
        let mut rng = ChaCha8Rng::seed_from_u64(75);
        let g = grid_instance(&mut rng, 3, 2, 3);
        let op = build_operator(AssignmentState::uniform(6, 3), &g);
        // Forward Euler trajectory of the tangent ODE; row norms grow along it.
        let mut v = Array2::zeros((6, 3));
        let mut norms = Vec::new();
        let mut trajectory = Vec::new();
        for _ in 0..200 {
            let dv = op.drift().matrix() + &op.apply_matrix(&v);
            v = &v + &(dv * 0.05);
            let tf = TangentField::from_unchecked(v.clone());
            norms.push(tf.max_row_norm());
            trajectory.push(tf);
        }
        let v_max = norms.iter().cloned().fold(0.0f64, f64::max);
        let ctrl = RelinearizationControl::new(1.0, v_max);
        assert!(trajectory.iter().all(|tf| !ctrl.triggered(tf)));
    }
}
