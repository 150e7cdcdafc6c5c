//! Integrators for the linear tangent ODE `dV/dt = a + A V`.
//!
//! Three solver families share the [`TangentOde`] abstraction (matrix-free
//! `A`, constant drift `a`, cached norm bound):
//!
//! * **Taylor-truncation RK.** The order-`q` update
//!   `V' = p_{1,q}(hA) h a + p_{2,q}(hA) V` is evaluated in Horner form with
//!   the shared intermediate `u = a + AV`, costing exactly `q` applications
//!   of `A` per step. Its local error obeys the provable bound
//!
//!   ```text
//!   err <= e^t (1 - Gamma(1+q, t)/q!) (||a||/||A|| + ||V||),   t = h||A||,
//!   ```
//!
//!   where `Gamma(1+q, t) = (sum_{i<=q} (q!/i!) t^i) e^{-t}` is the upper
//!   incomplete gamma function. The identity
//!   `e^t (1 - Gamma(1+q,t)/q!) = sum_{i>q} t^i/i!` lets the factor be
//!   computed as a cancellation-free Taylor tail. Step sizes are selected by
//!   bisecting this monotone bound against the tolerance.
//!
//! * **Implicit Euler.** `V_{k+1} = V_k + h(a + A V_{k+1})`, solved by warm
//!   started fixed-point iteration; optionally rebuilds the linearization
//!   point when the tangent norm crosses its threshold.
//!
//! * **Krylov exponential integrator.** `V(T) = T phi1(TA) a` is projected
//!   onto `K_m = span{a, Aa, ..., A^{m-1}a}` by Arnoldi iteration:
//!   `V(T) ~ T ||a|| V_m phi1(T H_m) e1`, with `phi1(z) = (e^z - 1)/z`
//!   recovered from the last column of the exponential of the extended
//!   matrix `[[T H, e1], [0, 0]]`. The dense exponential uses diagonal Pade
//!   order 13 with scaling and squaring.

use ndarray::{s, Array1, Array2};
use thiserror::Error;

use crate::flow::LabelingGraph;
use crate::geometry::{AssignmentState, TangentField};
use crate::harness::entropy_avg;
use crate::linearflow::{
    build_operator, linear_flow_state, relinearize, LinearFlowOperator, RelinearizationControl,
};
use crate::rkmk::IntegrateError;

#[derive(Debug, Error, PartialEq)]
pub enum LinsolveError {
    #[error("Krylov start vector is zero; the tangent flow is stationary")]
    ZeroStartVector,
    #[error("matrix exponential overflowed (scale {scale:.3e}); reduce the final time")]
    Overflow { scale: f64 },
    #[error("dense solve hit a numerically singular pivot")]
    Singular,
}

/// Matrix-free view of the tangent ODE `dV/dt = a + A V` on flattened
/// (row-major node x label) vectors.
pub trait TangentOde: Sync {
    fn dim(&self) -> usize;
    /// `A v`.
    fn apply_flat(&self, v: &Array1<f64>) -> Array1<f64>;
    /// The constant drift `a`.
    fn drift_flat(&self) -> Array1<f64>;
    /// An upper bound on the spectral norm of `A`.
    fn norm_bound(&self) -> f64;
}

impl TangentOde for LinearFlowOperator<'_> {
    fn dim(&self) -> usize {
        let w0 = self.base();
        w0.nodes() * w0.labels()
    }

    fn apply_flat(&self, v: &Array1<f64>) -> Array1<f64> {
        let w0 = self.base();
        let m = Array2::from_shape_vec((w0.nodes(), w0.labels()), v.to_vec())
            .expect("flat vector length matches the field shape");
        flatten(&self.apply_matrix(&m))
    }

    fn drift_flat(&self) -> Array1<f64> {
        flatten(self.drift().matrix())
    }

    fn norm_bound(&self) -> f64 {
        LinearFlowOperator::norm_bound(self)
    }
}

/// Dense instance of the tangent ODE for oracles and small experiments.
#[derive(Debug, Clone)]
pub struct DenseTangentOde {
    pub a: Array1<f64>,
    pub mat: Array2<f64>,
    pub norm: f64,
}

impl DenseTangentOde {
    /// `norm` must upper-bound the spectral norm of `mat`.
    pub fn new(a: Array1<f64>, mat: Array2<f64>, norm: f64) -> Self {
        assert_eq!(mat.nrows(), mat.ncols());
        assert_eq!(a.len(), mat.nrows());
        assert!(norm >= 0.0);
        Self { a, mat, norm }
    }
}

impl TangentOde for DenseTangentOde {
    fn dim(&self) -> usize {
        self.a.len()
    }

    fn apply_flat(&self, v: &Array1<f64>) -> Array1<f64> {
        self.mat.dot(v)
    }

    fn drift_flat(&self) -> Array1<f64> {
        self.a.clone()
    }

    fn norm_bound(&self) -> f64 {
        self.norm
    }
}

pub(crate) fn flatten(m: &Array2<f64>) -> Array1<f64> {
    Array1::from_iter(m.iter().cloned())
}

fn to_field(v: &Array1<f64>, nodes: usize, labels: usize) -> TangentField {
    TangentField::from_unchecked(
        Array2::from_shape_vec((nodes, labels), v.to_vec()).expect("length = nodes*labels"),
    )
}

fn l2(v: &Array1<f64>) -> f64 {
    v.dot(v).sqrt()
}

/// One order-`q` Taylor-truncation step of `dV/dt = a + AV` in Horner form.
///
/// Applies `A` exactly `q` times via the shared stage `u = a + AV`:
/// `x_q = u`, `x_{i-1} = u + (h/i) A x_i`, `V' = V + h x_1`.
pub fn rk_tangent_step(op: &impl TangentOde, q: usize, v: &Array1<f64>, h: f64) -> Array1<f64> {
    assert!((1..=4).contains(&q), "scheme order must be 1..=4");
    assert!(h.is_finite() && h >= 0.0);
    let u = op.drift_flat() + op.apply_flat(v);
    let mut x = u.clone();
    for i in (2..=q).rev() {
        x = &u + &(op.apply_flat(&x) * (h / i as f64));
    }
    v + &(x * h)
}

/// Upper incomplete gamma function at integer order,
/// `Gamma(1+q, t) = (sum_{i=0}^q (q!/i!) t^i) e^{-t}`.
pub fn incomplete_gamma_int(q: usize, t: f64) -> f64 {
    assert!(t >= 0.0 && t.is_finite());
    let mut acc = 0.0;
    let mut coeff = 1.0; // q!/i!, built downward from i = q
    for i in (0..=q).rev() {
        acc += coeff * t.powi(i as i32);
        coeff *= i as f64;
    }
    acc * (-t).exp()
}

/// Taylor tail `sum_{i>q} t^i/i!`; equals `e^t (1 - Gamma(1+q,t)/q!)` without
/// the catastrophic cancellation of the literal form at small `t`.
fn taylor_tail(q: usize, t: f64) -> f64 {
    let mut term = 1.0;
    for i in 1..=q + 1 {
        term *= t / i as f64;
    }
    let mut sum = 0.0;
    let mut i = q + 1;
    loop {
        sum += term;
        if !sum.is_finite() {
            return f64::INFINITY;
        }
        if term <= sum * 1e-17 {
            return sum;
        }
        i += 1;
        term *= t / i as f64;
    }
}

/// Inputs to the provable local error bound of the order-`q` step.
#[derive(Debug, Clone, Copy)]
pub struct ErrorBoundInputs {
    pub q: usize,
    pub h: f64,
    /// Spectral norm (or any upper bound) of `A`.
    pub norm_a: f64,
    /// Flat l2 norm of the drift.
    pub norm_drift: f64,
    /// Flat l2 norm of the current `V`.
    pub norm_v: f64,
}

/// Local truncation error bound; `tight` selects the gamma form, otherwise
/// the looser `e^t (1 - e^{-t})^{1+q}` envelope.
pub fn local_error_bound(inp: &ErrorBoundInputs, tight: bool) -> f64 {
    assert!((1..=4).contains(&inp.q));
    assert!(inp.h >= 0.0 && inp.norm_a >= 0.0 && inp.norm_drift >= 0.0 && inp.norm_v >= 0.0);
    if inp.norm_a == 0.0 {
        return 0.0;
    }
    let t = inp.h * inp.norm_a;
    let factor = inp.norm_drift / inp.norm_a + inp.norm_v;
    if factor == 0.0 {
        return 0.0;
    }
    if tight {
        taylor_tail(inp.q, t) * factor
    } else {
        let one_minus = -(-t).exp_m1();
        t.exp() * one_minus.powi(1 + inp.q as i32) * factor
    }
}

/// Largest step whose tight error bound stays below `tau`, found by bisection
/// (relative resolution 1e-3) and capped at `1e3 / ||A||`.
pub fn select_step(q: usize, norm_a: f64, norm_drift: f64, norm_v: f64, tau: f64) -> f64 {
    assert!(tau > 0.0);
    if norm_a <= 0.0 {
        return 1e3;
    }
    let h_max = 1e3 / norm_a;
    let bound = |h: f64| {
        local_error_bound(&ErrorBoundInputs { q, h, norm_a, norm_drift, norm_v }, true)
    };
    if bound(h_max) <= tau {
        return h_max;
    }
    let (mut lo, mut hi) = (0.0f64, h_max);
    while hi - lo > 1e-3 * hi {
        let mid = 0.5 * (lo + hi);
        if bound(mid) <= tau {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// One accepted step of a linear-flow integration.
#[derive(Debug, Clone, Copy)]
pub struct LinearTraceEntry {
    pub t: f64,
    pub h: f64,
    /// Average entropy of the mapped state after the step.
    pub entropy: f64,
    /// Tight local error bound at the chosen step, when step selection ran.
    pub bound: Option<f64>,
}

/// Record of a linear-flow integration run.
#[derive(Debug)]
pub struct LinearRun<'g> {
    pub entries: Vec<LinearTraceEntry>,
    pub v: TangentField,
    pub state: AssignmentState,
    /// The operator in effect at the end (relinearization may replace it).
    pub op: LinearFlowOperator<'g>,
    pub converged: bool,
    /// Number of linearization points used (1 without relinearization).
    pub linearizations: usize,
    /// Largest tangent row norm seen along the run (pilot threshold source).
    pub max_row_norm_seen: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct LinearIntegrateOptions {
    pub entropy_threshold: f64,
    pub max_steps: usize,
    /// Fixed-point tolerance of the implicit solve, in the scaled max-row
    /// metric.
    pub inner_tol: f64,
    pub max_inner: usize,
}

impl Default for LinearIntegrateOptions {
    fn default() -> Self {
        Self { entropy_threshold: 1e-3, max_steps: 100_000, inner_tol: 1e-8, max_inner: 10_000 }
    }
}

/// Adaptive Taylor-truncation integration of the linear flow: each step size
/// comes from the error bound at the current `||V||` with the per-pixel
/// normalized tolerance `tau` (flat tolerance `tau * sqrt(|I|)`).
pub fn integrate_linear_adaptive<'g>(
    op: LinearFlowOperator<'g>,
    q: usize,
    tau: f64,
    opts: &LinearIntegrateOptions,
) -> LinearRun<'g> {
    integrate_linear_adaptive_observed(op, q, tau, opts, |_, _| {})
}

/// [`integrate_linear_adaptive`] with a state observer, called on the initial
/// state and after every step.
pub fn integrate_linear_adaptive_observed<'g, F>(
    op: LinearFlowOperator<'g>,
    q: usize,
    tau: f64,
    opts: &LinearIntegrateOptions,
    mut observer: F,
) -> LinearRun<'g>
where
    F: FnMut(f64, &AssignmentState),
{
    let (nodes, labels) = (op.base().nodes(), op.base().labels());
    let tau_flat = tau * (nodes as f64).sqrt();
    let norm_a = TangentOde::norm_bound(&op);
    let drift = op.drift_flat();
    let norm_drift = l2(&drift);
    let mut v = Array1::zeros(nodes * labels);
    let mut state = linear_flow_state(&op, &to_field(&v, nodes, labels));
    observer(0.0, &state);
    let mut entries = Vec::new();
    let mut t = 0.0;
    let mut max_row_norm_seen = 0.0f64;
    let mut converged = false;
    loop {
        if entropy_avg(&state) < opts.entropy_threshold {
            converged = true;
            break;
        }
        if entries.len() >= opts.max_steps {
            break;
        }
        let h = select_step(q, norm_a, norm_drift, l2(&v), tau_flat);
        let bound = local_error_bound(
            &ErrorBoundInputs { q, h, norm_a, norm_drift, norm_v: l2(&v) },
            true,
        );
        v = rk_tangent_step(&op, q, &v, h);
        t += h;
        let vf = to_field(&v, nodes, labels);
        max_row_norm_seen = max_row_norm_seen.max(vf.max_row_norm());
        state = linear_flow_state(&op, &vf);
        observer(t, &state);
        entries.push(LinearTraceEntry { t, h, entropy: entropy_avg(&state), bound: Some(bound) });
    }
    LinearRun {
        entries,
        v: to_field(&v, nodes, labels),
        state,
        op,
        converged,
        linearizations: 1,
        max_row_norm_seen,
    }
}

/// One implicit Euler step `V' = V + h(a + A V')` by warm-started fixed-point
/// iteration; returns the solution and the iteration count.
pub fn implicit_linear_step(
    op: &impl TangentOde,
    drift: &Array1<f64>,
    v: &Array1<f64>,
    h: f64,
    labels: usize,
    inner_tol: f64,
    max_inner: usize,
) -> Result<(Array1<f64>, usize), IntegrateError> {
    let mut x = v.clone();
    let mut residual = f64::INFINITY;
    for it in 1..=max_inner {
        let next = v + &((drift + &op.apply_flat(&x)) * h);
        residual = scaled_max_row_distance_flat(&next, &x, labels);
        x = next;
        if residual <= inner_tol {
            return Ok((x, it));
        }
        if !residual.is_finite() {
            break;
        }
    }
    Err(IntegrateError::ConvergenceFailure { max_inner, residual })
}

fn scaled_max_row_distance_flat(a: &Array1<f64>, b: &Array1<f64>, labels: usize) -> f64 {
    let mut worst = 0.0f64;
    let mut i = 0;
    while i < a.len() {
        let mut acc = 0.0;
        for j in i..i + labels {
            let d = a[j] - b[j];
            acc += d * d;
        }
        worst = worst.max(acc.sqrt());
        i += labels;
    }
    worst / labels as f64
}

/// Fixed-step implicit Euler on the linear flow, with optional
/// relinearization checked after every accepted step.
pub fn integrate_linear_implicit<'g>(
    op: LinearFlowOperator<'g>,
    h: f64,
    opts: &LinearIntegrateOptions,
    relin: Option<RelinearizationControl>,
) -> Result<LinearRun<'g>, IntegrateError> {
    integrate_linear_implicit_observed(op, h, opts, relin, |_, _| {})
}

/// [`integrate_linear_implicit`] with a state observer, called on the initial
/// state and after every step.
pub fn integrate_linear_implicit_observed<'g, F>(
    op: LinearFlowOperator<'g>,
    h: f64,
    opts: &LinearIntegrateOptions,
    relin: Option<RelinearizationControl>,
    mut observer: F,
) -> Result<LinearRun<'g>, IntegrateError>
where
    F: FnMut(f64, &AssignmentState),
{
    assert!(h > 0.0);
    let (nodes, labels) = (op.base().nodes(), op.base().labels());
    let mut op = op;
    let mut drift = op.drift_flat();
    let mut v = Array1::zeros(nodes * labels);
    let mut state = linear_flow_state(&op, &to_field(&v, nodes, labels));
    observer(0.0, &state);
    let mut entries = Vec::new();
    let mut t = 0.0;
    let mut linearizations = 1usize;
    let mut max_row_norm_seen = 0.0f64;
    let mut converged = false;
    loop {
        if entropy_avg(&state) < opts.entropy_threshold {
            converged = true;
            break;
        }
        if entries.len() >= opts.max_steps {
            break;
        }
        let (next, _iters) =
            implicit_linear_step(&op, &drift, &v, h, labels, opts.inner_tol, opts.max_inner)?;
        v = next;
        t += h;
        let mut vf = to_field(&v, nodes, labels);
        max_row_norm_seen = max_row_norm_seen.max(vf.max_row_norm());
        state = linear_flow_state(&op, &vf);
        observer(t, &state);
        entries.push(LinearTraceEntry { t, h, entropy: entropy_avg(&state), bound: None });
        if let Some(ctrl) = &relin {
            if let Some((new_op, new_v)) = relinearize(&op, &vf, ctrl) {
                op = new_op;
                vf = new_v;
                v = flatten(vf.matrix());
                drift = op.drift_flat();
                state = linear_flow_state(&op, &vf);
                linearizations += 1;
            }
        }
    }
    Ok(LinearRun {
        entries,
        v: to_field(&v, nodes, labels),
        state,
        op,
        converged,
        linearizations,
        max_row_norm_seen,
    })
}

/// Pilot-then-rerun protocol: solve once from the barycenter with a fixed
/// linearization to find `V_max`, then rerun with the threshold `V_max / c`.
/// Returns the rerun and the pilot threshold.
pub fn solve_with_relinearization<'g>(
    graph: &'g LabelingGraph,
    h: f64,
    c: f64,
    opts: &LinearIntegrateOptions,
) -> Result<(LinearRun<'g>, f64), IntegrateError> {
    let barycenter = AssignmentState::uniform(graph.node_count(), graph.label_count());
    let pilot_op = build_operator(barycenter, graph);
    let pilot = integrate_linear_implicit(pilot_op, h, opts, None)?;
    let v_max = pilot.max_row_norm_seen;
    let ctrl = RelinearizationControl::new(c, v_max);
    let rerun = integrate_linear_implicit(pilot.op, h, opts, Some(ctrl))?;
    Ok((rerun, v_max))
}

/// Arnoldi factorization of the Krylov subspace `span{a, Aa, ..., A^{m-1}a}`.
#[derive(Debug, Clone)]
pub struct KrylovBasis {
    /// Orthonormal columns, `dim x m` (possibly truncated at breakdown).
    pub basis: Array2<f64>,
    /// Upper Hessenberg projection `H = V^T A V`, `m x m`.
    pub h: Array2<f64>,
    /// Norm of the start vector.
    pub beta: f64,
    /// Breakdown before the requested dimension: the basis spans an exact
    /// invariant subspace and the projection is exact.
    pub exact: bool,
}

/// Modified Gram-Schmidt Arnoldi with one full reorthogonalization pass.
/// Breakdown (next vector norm below 1e-12) truncates the basis and flags it
/// exact.
pub fn arnoldi(
    op: &impl TangentOde,
    start: &Array1<f64>,
    m: usize,
) -> Result<KrylovBasis, LinsolveError> {
    assert!(m >= 1);
    assert_eq!(start.len(), op.dim());
    let beta = l2(start);
    if beta < 1e-300 {
        return Err(LinsolveError::ZeroStartVector);
    }
    let mut vs: Vec<Array1<f64>> = vec![start / beta];
    let mut h = Array2::zeros((m, m));
    let mut exact = false;
    let mut dim = m;
    for j in 0..m {
        let mut w = op.apply_flat(&vs[j]);
        for (i, vi) in vs.iter().enumerate() {
            let hij = vi.dot(&w);
            w.scaled_add(-hij, vi);
            h[[i, j]] = hij;
        }
        for (i, vi) in vs.iter().enumerate() {
            let c = vi.dot(&w);
            w.scaled_add(-c, vi);
            h[[i, j]] += c;
        }
        let nw = l2(&w);
        if j + 1 < m {
            if nw < 1e-12 {
                exact = true;
                dim = j + 1;
                break;
            }
            h[[j + 1, j]] = nw;
            vs.push(w / nw);
        } else if nw < 1e-12 {
            exact = true;
        }
    }
    let n = start.len();
    let mut basis = Array2::zeros((n, dim));
    for (j, vj) in vs.iter().take(dim).enumerate() {
        basis.column_mut(j).assign(vj);
    }
    Ok(KrylovBasis { basis, h: h.slice(s![..dim, ..dim]).to_owned(), beta, exact })
}

/// `phi1(tH) e1` through the extended-matrix trick: the upper `m` entries of
/// the last column of `expm([[tH, e1], [0, 0]])`.
pub fn phi1_times_e1(h: &Array2<f64>, t: f64) -> Result<Array1<f64>, LinsolveError> {
    let m = h.nrows();
    assert_eq!(m, h.ncols());
    let mut ext = Array2::zeros((m + 1, m + 1));
    ext.slice_mut(s![..m, ..m]).assign(&(h * t));
    ext[[0, m]] = 1.0;
    let e = expm(&ext)?;
    Ok(e.slice(s![..m, m]).to_owned())
}

/// Krylov approximation of `V(T) = T phi1(TA) a`:
/// `T ||a|| V_m phi1(T H_m) e1`. Exact once `m` reaches the degree of the
/// minimal polynomial of `a` with respect to `A`.
pub fn krylov_phi1(
    op: &impl TangentOde,
    start: &Array1<f64>,
    t: f64,
    m: usize,
) -> Result<Array1<f64>, LinsolveError> {
    assert!(t > 0.0);
    let kb = arnoldi(op, start, m)?;
    let y = phi1_times_e1(&kb.h, t)?;
    let v = kb.basis.dot(&y) * (t * kb.beta);
    if !v.iter().all(|x| x.is_finite()) {
        return Err(LinsolveError::Overflow { scale: t });
    }
    Ok(v)
}

/// Exponential integration of the linear flow to time `T` at Krylov
/// dimension `m`; returns the tangent solution and the mapped state.
pub fn exponential_integrator(
    op: &LinearFlowOperator<'_>,
    t_final: f64,
    m: usize,
) -> Result<(TangentField, AssignmentState), LinsolveError> {
    assert!(t_final > 0.0 && m >= 1);
    let (nodes, labels) = (op.base().nodes(), op.base().labels());
    let a = op.drift_flat();
    if l2(&a) < 1e-300 {
        let v = TangentField::zeros(nodes, labels);
        let w = op.base().clone();
        return Ok((v, w));
    }
    let v = krylov_phi1(op, &a, t_final, m)?;
    let vf = to_field(&v, nodes, labels);
    let state = linear_flow_state(op, &vf);
    Ok((vf, state))
}

/// Exact one-step reference `V(h) = expm(hA) V + h phi1(hA) a`, computed from
/// one extended dense exponential; test oracle for dense instances.
pub fn duhamel_exact(
    mat: &Array2<f64>,
    a: &Array1<f64>,
    v: &Array1<f64>,
    h: f64,
) -> Result<Array1<f64>, LinsolveError> {
    let n = mat.nrows();
    assert_eq!(n, mat.ncols());
    assert_eq!(n, a.len());
    assert_eq!(n, v.len());
    let mut ext = Array2::zeros((n + 1, n + 1));
    ext.slice_mut(s![..n, ..n]).assign(&(mat * h));
    for i in 0..n {
        ext[[i, n]] = h * a[i];
    }
    let e = expm(&ext)?;
    Ok(e.slice(s![..n, ..n]).dot(v) + &e.slice(s![..n, n]))
}

/// Dense matrix exponential: diagonal Pade order 13 with scaling and
/// squaring. The scaling power comes from the cheap spectral-norm upper bound
/// `min(||A||_F, sqrt(||A||_1 ||A||_inf))`.
pub fn expm(a: &Array2<f64>) -> Result<Array2<f64>, LinsolveError> {
    let n = a.nrows();
    assert_eq!(n, a.ncols());
    if !a.iter().all(|x| x.is_finite()) {
        return Err(LinsolveError::Overflow { scale: f64::INFINITY });
    }
    let norm_f = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let norm_1 = (0..n)
        .map(|j| a.column(j).iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0f64, f64::max);
    let norm_inf = (0..n)
        .map(|i| a.row(i).iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0f64, f64::max);
    let eta = norm_f.min((norm_1 * norm_inf).sqrt());
    const THETA13: f64 = 5.371920351148152;
    let s = if eta > THETA13 { (eta / THETA13).log2().ceil() as u32 } else { 0 };
    let b = a / 2f64.powi(s as i32);

    const C: [f64; 14] = [
        64764752532480000.0,
        32382376266240000.0,
        7771770303897600.0,
        1187353796428800.0,
        129060195264000.0,
        10559470521600.0,
        670442572800.0,
        33522128640.0,
        1323241920.0,
        40840800.0,
        960960.0,
        16380.0,
        182.0,
        1.0,
    ];
    let eye: Array2<f64> = Array2::eye(n);
    let b2 = b.dot(&b);
    let b4 = b2.dot(&b2);
    let b6 = b2.dot(&b4);
    let u_inner = b6.dot(&(&b6 * C[13] + &b4 * C[11] + &b2 * C[9]))
        + &b6 * C[7]
        + &b4 * C[5]
        + &b2 * C[3]
        + &eye * C[1];
    let u = b.dot(&u_inner);
    let v = b6.dot(&(&b6 * C[12] + &b4 * C[10] + &b2 * C[8]))
        + &b6 * C[6]
        + &b4 * C[4]
        + &b2 * C[2]
        + &eye * C[0];
    let p = &v + &u;
    let q = &v - &u;
    let mut x = lu_solve(q, p)?;
    for _ in 0..s {
        x = x.dot(&x);
    }
    if !x.iter().all(|e| e.is_finite()) {
        return Err(LinsolveError::Overflow { scale: eta });
    }
    Ok(x)
}

/// Solves `A X = B` by LU with partial pivoting, consuming both inputs.
fn lu_solve(mut a: Array2<f64>, mut b: Array2<f64>) -> Result<Array2<f64>, LinsolveError> {
    let n = a.nrows();
    assert_eq!(n, a.ncols());
    assert_eq!(n, b.nrows());
    for col in 0..n {
        let mut piv = col;
        let mut best = a[[col, col]].abs();
        for r in col + 1..n {
            let mag = a[[r, col]].abs();
            if mag > best {
                best = mag;
                piv = r;
            }
        }
        if !(best > 1e-300) {
            return Err(LinsolveError::Singular);
        }
        if piv != col {
            for j in 0..n {
                a.swap([piv, j], [col, j]);
                b.swap([piv, j], [col, j]);
            }
        }
        let diag = a[[col, col]];
        for r in col + 1..n {
            let f = a[[r, col]] / diag;
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                a[[r, j]] -= f * a[[col, j]];
            }
            for j in 0..n {
                b[[r, j]] -= f * b[[col, j]];
            }
        }
    }
    for col in (0..n).rev() {
        let diag = a[[col, col]];
        for j in 0..n {
            let mut acc = b[[col, j]];
            for k in col + 1..n {
                acc -= a[[col, k]] * b[[k, j]];
            }
            b[[col, j]] = acc / diag;
        }
    }
    Ok(b)
}
