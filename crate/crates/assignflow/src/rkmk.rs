//! Geometric Runge-Kutta integration of the nonlinear assignment flow.
//!
//! The flow is integrated in the flat tangent space at a base point `W0`
//! through the lifted exponential: one macro-step of size `h` computes
//!
//! ```text
//! U^i  = h sum_j a_ij F^j
//! F^i  = tangent_rhs(U^i, W0)
//! V    = h sum_j b_j F^j
//! W(h) = exp_map(W0, V)
//! ```
//!
//! and then resets the base point, `W0 <- W(h)`. Because `T0` is a flat
//! commutative space the usual coordinate corrections of a Lie-group step
//! vanish identically, so a Butcher tableau fully determines the scheme.
//!
//! Embedded pairs carry a second weight row `b^` evaluated on the *same*
//! stage values; the discrepancy `d(V, V^) = max_i ||V_i - V^_i|| / |J|`
//! drives the adaptive step-size rule: grow by 1.25 when the estimate is
//! below `tau / n_tau`, keep the step when below `tau`, otherwise halve and
//! redo. Implicit Euler solves its stage equation by plain fixed-point
//! iteration, warm-started from the previous step's solution.
//!
//! Integration terminates when the average assignment entropy falls below a
//! threshold (the rows have then concentrated on single labels), after a
//! step-count budget (reported in the trace, not an error), or with an error
//! when the step size underflows or the inner solve stalls.

use ndarray::Array2;
use thiserror::Error;

use crate::flow::{tangent_rhs, LabelingGraph};
use crate::geometry::{exp_map_tangent, scaled_max_row_distance, AssignmentState, TangentField};
use crate::harness::entropy_avg;

#[derive(Debug, Error, PartialEq)]
pub enum TableauError {
    #[error("tableau needs at least one stage and matching a/b/c dimensions")]
    Shape,
    #[error("stage {stage}: c differs from the a-row sum by {defect:.3e}")]
    NodeConsistency { stage: usize, defect: f64 },
    #[error("weights b sum to {sum}, expected 1")]
    WeightSum { sum: f64 },
    #[error("embedded weights sum to {sum}, expected 1")]
    EmbeddedWeightSum { sum: f64 },
    #[error("explicit tableaus must have a strictly lower-triangular a")]
    NotExplicit,
}

#[derive(Debug, Error, PartialEq)]
pub enum IntegrateError {
    #[error(
        "implicit stage did not converge within {max_inner} iterations \
         (residual {residual:.3e}); reduce the step size"
    )]
    ConvergenceFailure { max_inner: usize, residual: f64 },
    #[error(
        "adaptive step underflowed ({h:.3e} < {min:.3e}); \
         the flow is too stiff for the requested tolerance"
    )]
    StepUnderflow { h: f64, min: f64 },
    #[error("tableau '{name}' carries no embedded weights for adaptive stepping")]
    NotEmbedded { name: &'static str },
}

/// A Runge-Kutta tableau `(a, b, c)`, optionally with embedded weights.
#[derive(Debug, Clone)]
pub struct ButcherTableau {
    name: &'static str,
    a: Vec<Vec<f64>>,
    b: Vec<f64>,
    b_hat: Option<Vec<f64>>,
    c: Vec<f64>,
    order: usize,
    embedded_order: Option<usize>,
    implicit: bool,
}

impl ButcherTableau {
    /// Validates stage-count shapes, `c_i = sum_j a_ij` within 1e-12 and
    /// `sum_j b_j = 1` (likewise for embedded weights).
    pub fn new(
        name: &'static str,
        a: Vec<Vec<f64>>,
        b: Vec<f64>,
        b_hat: Option<Vec<f64>>,
        c: Vec<f64>,
        order: usize,
        embedded_order: Option<usize>,
        implicit: bool,
    ) -> Result<Self, TableauError> {
        let s = b.len();
        if s == 0 || a.len() != s || c.len() != s || b_hat.as_ref().is_some_and(|bh| bh.len() != s)
        {
            return Err(TableauError::Shape);
        }
        for (i, row) in a.iter().enumerate() {
            if row.len() > s {
                return Err(TableauError::Shape);
            }
            if !implicit && row.len() > i {
                return Err(TableauError::NotExplicit);
            }
            let defect = (c[i] - row.iter().sum::<f64>()).abs();
            if defect > 1e-12 {
                return Err(TableauError::NodeConsistency { stage: i, defect });
            }
        }
        let sum: f64 = b.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(TableauError::WeightSum { sum });
        }
        if let Some(bh) = &b_hat {
            let sum: f64 = bh.iter().sum();
            if (sum - 1.0).abs() > 1e-12 {
                return Err(TableauError::EmbeddedWeightSum { sum });
            }
        }
        Ok(Self { name, a, b, b_hat, c, order, embedded_order, implicit })
    }

    /// Forward Euler (order 1).
    pub fn forward_euler() -> Self {
        Self::new("fe", vec![vec![]], vec![1.0], None, vec![0.0], 1, None, false).unwrap()
    }

    /// Heun's two-stage method (order 2).
    pub fn heun2() -> Self {
        Self::new(
            "h2",
            vec![vec![], vec![1.0]],
            vec![0.5, 0.5],
            None,
            vec![0.0, 1.0],
            2,
            None,
            false,
        )
        .unwrap()
    }

    /// Heun's three-stage method (order 3).
    pub fn heun3() -> Self {
        Self::new(
            "h3",
            vec![vec![], vec![1.0 / 3.0], vec![0.0, 2.0 / 3.0]],
            vec![0.25, 0.0, 0.75],
            None,
            vec![0.0, 1.0 / 3.0, 2.0 / 3.0],
            3,
            None,
            false,
        )
        .unwrap()
    }

    /// The classical four-stage scheme (order 4).
    pub fn rk4() -> Self {
        Self::new(
            "rk4",
            vec![vec![], vec![0.5], vec![0.0, 0.5], vec![0.0, 0.0, 1.0]],
            vec![1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0],
            None,
            vec![0.0, 0.5, 0.5, 1.0],
            4,
            None,
            false,
        )
        .unwrap()
    }

    /// Implicit (backward) Euler; the single stage equals the update.
    pub fn backward_euler() -> Self {
        Self::new("be", vec![vec![1.0]], vec![1.0], None, vec![1.0], 1, None, true).unwrap()
    }

    /// Embedded order-1/2 pair: forward Euler stepped, Heun as estimator.
    pub fn embedded12() -> Self {
        Self::new(
            "rkmk12",
            vec![vec![], vec![1.0]],
            vec![1.0, 0.0],
            Some(vec![0.5, 0.5]),
            vec![0.0, 1.0],
            1,
            Some(2),
            false,
        )
        .unwrap()
    }

    /// Embedded order-3/2 pair: three-stage Heun stepped, order-2 estimator.
    pub fn embedded32() -> Self {
        Self::new(
            "rkmk32",
            vec![vec![], vec![1.0 / 3.0], vec![0.0, 2.0 / 3.0]],
            vec![0.25, 0.0, 0.75],
            Some(vec![1.0 / 3.0, 2.0 / 3.0, 0.0]),
            vec![0.0, 1.0 / 3.0, 2.0 / 3.0],
            3,
            Some(2),
            false,
        )
        .unwrap()
    }

    /// Looks up a registered scheme by its CLI name.
    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "fe" => Some(Self::forward_euler()),
            "h2" => Some(Self::heun2()),
            "h3" => Some(Self::heun3()),
            "rk4" => Some(Self::rk4()),
            "be" => Some(Self::backward_euler()),
            "rkmk12" => Some(Self::embedded12()),
            "rkmk32" => Some(Self::embedded32()),
            _ => None,
        }
    }

    pub fn registered_names() -> [&'static str; 7] {
        ["fe", "h2", "h3", "rk4", "be", "rkmk12", "rkmk32"]
    }

    pub fn name(&self) -> &'static str {
        self.name
    }

    pub fn stages(&self) -> usize {
        self.b.len()
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn embedded_order(&self) -> Option<usize> {
        self.embedded_order
    }

    pub fn is_implicit(&self) -> bool {
        self.implicit
    }

    pub fn is_embedded(&self) -> bool {
        self.b_hat.is_some()
    }

    pub fn a(&self) -> &[Vec<f64>] {
        &self.a
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn b_hat(&self) -> Option<&[f64]> {
        self.b_hat.as_deref()
    }

    pub fn c(&self) -> &[f64] {
        &self.c
    }
}

/// Result of one explicit macro-step.
#[derive(Debug, Clone)]
pub struct RkmkStep {
    /// `W(h) = exp_map(W0, V)`.
    pub state: AssignmentState,
    /// The tangent update `V` used for the step.
    pub v: TangentField,
    /// Embedded update `V^` from `b^` on the same stages, when present.
    pub v_hat: Option<TangentField>,
}

/// One explicit macro-step with a caller-supplied tangent field.
///
/// The closure is invoked exactly once per stage; `V` and `V^` reuse those
/// stage values. Panics on implicit tableaus.
pub fn rkmk_step_with<F>(
    tableau: &ButcherTableau,
    w0: &AssignmentState,
    h: f64,
    mut rhs: F,
) -> RkmkStep
where
    F: FnMut(&TangentField) -> TangentField,
{
    assert!(
        !tableau.implicit,
        "implicit tableau '{}' requires implicit_euler_step",
        tableau.name
    );
    let shape = (w0.nodes(), w0.labels());
    let s = tableau.stages();
    let mut stage_f: Vec<TangentField> = Vec::with_capacity(s);
    for i in 0..s {
        let mut u = Array2::zeros(shape);
        for (j, f) in stage_f.iter().enumerate().take(i) {
            let aij = tableau.a[i][j];
            if aij != 0.0 {
                u.scaled_add(h * aij, f.matrix());
            }
        }
        stage_f.push(rhs(&TangentField::from_unchecked(u)));
    }
    let weighted = |weights: &[f64]| {
        let mut v = Array2::zeros(shape);
        for (bj, f) in weights.iter().zip(&stage_f) {
            if *bj != 0.0 {
                v.scaled_add(h * bj, f.matrix());
            }
        }
        TangentField::from_unchecked(v)
    };
    let v = weighted(&tableau.b);
    let v_hat = tableau.b_hat.as_ref().map(|bh| weighted(bh));
    let state = exp_map_tangent(w0, &v);
    RkmkStep { state, v, v_hat }
}

/// One explicit macro-step of the assignment flow on `graph`.
pub fn rkmk_step(
    tableau: &ButcherTableau,
    w0: &AssignmentState,
    graph: &LabelingGraph,
    h: f64,
) -> RkmkStep {
    rkmk_step_with(tableau, w0, h, |u| tangent_rhs(u, w0, graph))
}

/// Inner fixed-point solve parameters for implicit Euler.
#[derive(Debug, Clone, Copy)]
pub struct InnerSolve {
    /// Stop when successive iterates differ by at most this much (in the
    /// scaled max-row metric).
    pub tol: f64,
    pub max_inner: usize,
}

impl Default for InnerSolve {
    fn default() -> Self {
        Self { tol: 1e-8, max_inner: 10_000 }
    }
}

/// Result of one implicit Euler macro-step.
#[derive(Debug, Clone)]
pub struct ImplicitStep {
    pub state: AssignmentState,
    /// Converged stage solution `V = h f(exp_map(W0, V))`.
    pub v: TangentField,
    pub inner_iterations: usize,
}

/// One implicit Euler macro-step: solves `V = h tangent_rhs(V, W0)` by
/// fixed-point iteration from `warm` (or zero) and maps through `exp_map`.
pub fn implicit_euler_step(
    w0: &AssignmentState,
    graph: &LabelingGraph,
    h: f64,
    warm: Option<&TangentField>,
    inner: &InnerSolve,
) -> Result<ImplicitStep, IntegrateError> {
    let mut v = match warm {
        Some(v) => v.clone(),
        None => TangentField::zeros(w0.nodes(), w0.labels()),
    };
    let mut residual = f64::INFINITY;
    for it in 1..=inner.max_inner {
        let next = tangent_rhs(&v, w0, graph).scale(h);
        residual = scaled_max_row_distance(&next, &v);
        v = next;
        if residual <= inner.tol {
            let state = exp_map_tangent(w0, &v);
            return Ok(ImplicitStep { state, v, inner_iterations: it });
        }
        if !residual.is_finite() {
            break;
        }
    }
    Err(IntegrateError::ConvergenceFailure { max_inner: inner.max_inner, residual })
}

/// Adaptive step-size rule for embedded pairs.
#[derive(Debug, Clone, Copy)]
pub struct StepControl {
    /// Accept a step while the embedded estimate stays below `tau`.
    pub tau: f64,
    /// Grow the step once the estimate drops below `tau / n_tau`.
    pub n_tau: f64,
    pub grow: f64,
    pub shrink: f64,
    pub h0: f64,
}

impl Default for StepControl {
    fn default() -> Self {
        Self { tau: 0.01, n_tau: 20.0, grow: 1.25, shrink: 0.5, h0: 0.01 }
    }
}

/// Step-size policy for [`integrate`].
#[derive(Debug, Clone, Copy)]
pub enum StepPolicy {
    Fixed { h: f64 },
    Adaptive(StepControl),
}

#[derive(Debug, Clone, Copy)]
pub struct IntegrateOptions {
    /// Terminate once the average assignment entropy drops below this.
    pub entropy_threshold: f64,
    /// Accepted-step budget; exceeding it is reported, not an error.
    pub max_steps: usize,
    /// Adaptive steps below this size abort as stiffness failures.
    pub min_step: f64,
    pub inner: InnerSolve,
}

impl Default for IntegrateOptions {
    fn default() -> Self {
        Self {
            entropy_threshold: 1e-3,
            max_steps: 100_000,
            min_step: 1e-12,
            inner: InnerSolve::default(),
        }
    }
}

/// One accepted macro-step in a [`FlowTrace`].
#[derive(Debug, Clone, Copy)]
pub struct TraceEntry {
    /// Time reached after the step.
    pub t: f64,
    /// Step size used.
    pub h: f64,
    /// Average entropy of the state after the step.
    pub entropy: f64,
    /// Embedded error estimate `d(V, V^)`, when the scheme provides one.
    pub error_estimate: Option<f64>,
}

/// Record of an integration run: accepted steps plus the final state.
#[derive(Debug, Clone)]
pub struct FlowTrace {
    pub entries: Vec<TraceEntry>,
    pub final_state: AssignmentState,
    /// Whether the entropy threshold was reached within the step budget.
    pub converged: bool,
    pub rejected_steps: usize,
}

impl FlowTrace {
    pub fn steps(&self) -> usize {
        self.entries.len()
    }

    pub fn final_time(&self) -> f64 {
        self.entries.last().map_or(0.0, |e| e.t)
    }

    pub fn final_entropy(&self) -> f64 {
        self.entries.last().map_or(f64::NAN, |e| e.entropy)
    }

    /// True when accepted step sizes never shrink (expected on supervised
    /// scenarios: growth phase, then plateau).
    pub fn step_sizes_non_decreasing(&self) -> bool {
        self.entries.windows(2).all(|w| w[1].h >= w[0].h - 1e-15)
    }
}

/// Integrates the assignment flow to entropy convergence.
pub fn integrate(
    tableau: &ButcherTableau,
    w_init: &AssignmentState,
    graph: &LabelingGraph,
    policy: &StepPolicy,
    opts: &IntegrateOptions,
) -> Result<FlowTrace, IntegrateError> {
    integrate_observed(tableau, w_init, graph, policy, opts, |_, _| {})
}

/// [`integrate`] with a state observer, called on the initial state and after
/// every accepted step.
pub fn integrate_observed<F>(
    tableau: &ButcherTableau,
    w_init: &AssignmentState,
    graph: &LabelingGraph,
    policy: &StepPolicy,
    opts: &IntegrateOptions,
    mut observer: F,
) -> Result<FlowTrace, IntegrateError>
where
    F: FnMut(f64, &AssignmentState),
{
    if let StepPolicy::Adaptive(_) = policy {
        if !tableau.is_embedded() {
            return Err(IntegrateError::NotEmbedded { name: tableau.name });
        }
    }
    let mut w = w_init.clone();
    let mut t = 0.0;
    let mut h = match policy {
        StepPolicy::Fixed { h } => *h,
        StepPolicy::Adaptive(ctrl) => ctrl.h0,
    };
    let mut warm: Option<TangentField> = None;
    let mut entries = Vec::new();
    let mut rejected = 0usize;
    observer(t, &w);
    loop {
        if entropy_avg(&w) < opts.entropy_threshold {
            return Ok(FlowTrace { entries, final_state: w, converged: true, rejected_steps: rejected });
        }
        if entries.len() >= opts.max_steps {
            return Ok(FlowTrace {
                entries,
                final_state: w,
                converged: false,
                rejected_steps: rejected,
            });
        }
        let (next_state, estimate, next_h) = if tableau.implicit {
            let step = implicit_euler_step(&w, graph, h, warm.as_ref(), &opts.inner)?;
            warm = Some(step.v.clone());
            (step.state, None, h)
        } else {
            let step = rkmk_step(tableau, &w, graph, h);
            match policy {
                StepPolicy::Fixed { .. } => {
                    let est = step.v_hat.as_ref().map(|vh| scaled_max_row_distance(&step.v, vh));
                    (step.state, est, h)
                }
                StepPolicy::Adaptive(ctrl) => {
                    let vh = step.v_hat.as_ref().expect("embedded tableau checked above");
                    let est = scaled_max_row_distance(&step.v, vh);
                    if est >= ctrl.tau {
                        h *= ctrl.shrink;
                        rejected += 1;
                        if h < opts.min_step {
                            return Err(IntegrateError::StepUnderflow { h, min: opts.min_step });
                        }
                        continue;
                    }
                    let grown = if est < ctrl.tau / ctrl.n_tau { h * ctrl.grow } else { h };
                    (step.state, Some(est), grown)
                }
            }
        };
        t += h;
        w = next_state;
        entries.push(TraceEntry { t, h, entropy: entropy_avg(&w), error_estimate: estimate });
        observer(t, &w);
        h = next_h;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::similarity;
    use crate::geometry::project_t0_field;
    use ndarray::Array2;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_state(rng: &mut impl Rng, nodes: usize, labels: usize) -> AssignmentState {
        let mut w = Array2::zeros((nodes, labels));
        for i in 0..nodes {
            let mut row: Vec<f64> = (0..labels).map(|_| rng.random_range(0.1..1.0)).collect();
            let s: f64 = row.iter().sum();
            for (j, x) in row.iter_mut().enumerate() {
                *x /= s;
                w[[i, j]] = *x;
            }
        }
        AssignmentState::new(w).unwrap()
    }

    fn chain_instance(rng: &mut impl Rng, nodes: usize, labels: usize) -> LabelingGraph {
        let d = Array2::from_shape_fn((nodes, labels), |_| rng.random_range(0.0..1.2));
        LabelingGraph::grid(nodes, 1, 3, d, 0.5).unwrap()
    }

    fn single_pixel(d: Vec<f64>, rho: f64) -> LabelingGraph {
        let labels = d.len();
        let dm = Array2::from_shape_vec((1, labels), d).unwrap();
        LabelingGraph::grid(1, 1, 1, dm, rho).unwrap()
    }

    #[test]
    fn registry_covers_all_schemes() {
        for name in ButcherTableau::registered_names() {
            let tab = ButcherTableau::by_name(name).expect(name);
            assert_eq!(tab.name(), name);
        }
        assert!(ButcherTableau::by_name("rk5").is_none());
    }

    #[test]
    fn tableau_coefficients_are_exact_rationals() {
        let h3 = ButcherTableau::heun3();
        assert_eq!(h3.b(), &[0.25, 0.0, 0.75]);
        assert_eq!(h3.a()[1], vec![1.0 / 3.0]);
        assert_eq!(h3.a()[2], vec![0.0, 2.0 / 3.0]);
        let rk4 = ButcherTableau::rk4();
        assert_eq!(rk4.b(), &[1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0]);
        let p12 = ButcherTableau::embedded12();
        assert_eq!(p12.b(), &[1.0, 0.0]);
        assert_eq!(p12.b_hat().unwrap(), &[0.5, 0.5]);
        assert_eq!((p12.order(), p12.embedded_order()), (1, Some(2)));
        let p32 = ButcherTableau::embedded32();
        assert_eq!(p32.b(), &[0.25, 0.0, 0.75]);
        assert_eq!(p32.b_hat().unwrap(), &[1.0 / 3.0, 2.0 / 3.0, 0.0]);
        assert_eq!((p32.order(), p32.embedded_order()), (3, Some(2)));
        let be = ButcherTableau::backward_euler();
        assert!(be.is_implicit());
        assert_eq!(be.a()[0], vec![1.0]);
    }

    #[test]
    fn tableau_validation_rejects_inconsistent_nodes() {
        let err = ButcherTableau::new(
            "bad",
            vec![vec![], vec![0.4]],
            vec![0.5, 0.5],
            None,
            vec![0.0, 1.0],
            2,
            None,
            false,
        )
        .unwrap_err();
        assert!(matches!(err, TableauError::NodeConsistency { stage: 1, .. }));
        let err = ButcherTableau::new(
            "bad",
            vec![vec![], vec![1.0]],
            vec![0.5, 0.6],
            None,
            vec![0.0, 1.0],
            2,
            None,
            false,
        )
        .unwrap_err();
        assert!(matches!(err, TableauError::WeightSum { .. }));
    }

    #[test]
    fn forward_euler_step_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let w0 = random_state(&mut rng, 5, 3);
        let g = chain_instance(&mut rng, 5, 3);
        let h = 0.2;
        let step = rkmk_step(&ButcherTableau::forward_euler(), &w0, &g, h);
        let f = project_t0_field(similarity(&w0, &g).matrix());
        let expect = exp_map_tangent(&w0, &f.scale(h));
        for (a, b) in step.state.matrix().iter().zip(expect.matrix()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(step.v_hat.is_none());
    }

    #[test]
    fn update_scales_linearly_for_small_steps() {
        // V(h) = h F(W0) + O(h^2), so V(h)/h stabilizes as h -> 0.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let w0 = random_state(&mut rng, 4, 3);
        let g = chain_instance(&mut rng, 4, 3);
        let norm_at = |h: f64| rkmk_step(&ButcherTableau::rk4(), &w0, &g, h).v.norm();
        let r1 = norm_at(1e-3) / 1e-3;
        let r2 = norm_at(1e-6) / 1e-6;
        assert!((r1 - r2).abs() / r2 < 1e-2, "r1={r1}, r2={r2}");
    }

    #[test]
    fn rk4_matches_textbook_stages_on_single_pixel() {
        let g = single_pixel(vec![0.3, 0.0, 0.6], 0.7);
        let w0 = AssignmentState::uniform(1, 3);
        let h = 0.37;
        let step = rkmk_step(&ButcherTableau::rk4(), &w0, &g, h);
        // Textbook RK4 on dV/dt = tangent_rhs(V) written out stage by stage.
        let f = |v: &TangentField| tangent_rhs(v, &w0, &g);
        let k1 = f(&TangentField::zeros(1, 3));
        let k2 = f(&k1.scale(h / 2.0));
        let k3 = f(&k2.scale(h / 2.0));
        let k4 = f(&k3.scale(h));
        let mut v = Array2::zeros((1, 3));
        v.scaled_add(h / 6.0, k1.matrix());
        v.scaled_add(h / 3.0, k2.matrix());
        v.scaled_add(h / 3.0, k3.matrix());
        v.scaled_add(h / 6.0, k4.matrix());
        let expect = exp_map_tangent(&w0, &TangentField::from_unchecked(v));
        for (a, b) in step.state.matrix().iter().zip(expect.matrix()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn embedded_pairs_reuse_stage_evaluations() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let w0 = random_state(&mut rng, 4, 3);
        let g = chain_instance(&mut rng, 4, 3);
        for (name, stages) in [("rkmk12", 2usize), ("rkmk32", 3)] {
            let tab = ButcherTableau::by_name(name).unwrap();
            let mut evals = 0usize;
            let step = rkmk_step_with(&tab, &w0, 0.1, |u| {
                evals += 1;
                tangent_rhs(u, &w0, &g)
            });
            assert_eq!(evals, stages, "{name} must evaluate once per stage");
            assert!(step.v_hat.is_some());
        }
    }

    #[test]
    fn uniform_fixed_point_is_preserved_exactly() {
        let w0 = AssignmentState::uniform(6, 4);
        let g = LabelingGraph::grid(3, 2, 3, Array2::from_elem((6, 4), 0.3), 0.5).unwrap();
        for name in ["fe", "h2", "h3", "rk4", "rkmk12", "rkmk32"] {
            let step = rkmk_step(&ButcherTableau::by_name(name).unwrap(), &w0, &g, 0.4);
            for (a, b) in step.state.matrix().iter().zip(w0.matrix()) {
                assert!((a - b).abs() < 1e-12, "{name} drifted off the fixed point");
            }
        }
        let imp = implicit_euler_step(&w0, &g, 0.4, None, &InnerSolve::default()).unwrap();
        for (a, b) in imp.state.matrix().iter().zip(w0.matrix()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn implicit_euler_converges_in_one_iteration_for_tiny_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let w0 = random_state(&mut rng, 5, 3);
        let g = chain_instance(&mut rng, 5, 3);
        let step = implicit_euler_step(&w0, &g, 1e-10, None, &InnerSolve::default()).unwrap();
        assert!(step.inner_iterations <= 2);
    }

    #[test]
    fn implicit_euler_matches_scalar_bisection_oracle() {
        // One node, two labels: V = (v, -v) and the stage equation reduces to
        // the scalar fixed point v = h (s1(v) - s2(v)) / 2.
        let rho = 0.4;
        let d = vec![0.1, 0.5];
        let g = single_pixel(d.clone(), rho);
        let w0 = AssignmentState::uniform(1, 2);
        let h = 0.5;
        let gfun = |v: f64| {
            let w1 = 0.5 * v.exp() / (0.5 * v.exp() + 0.5 * (-v).exp());
            let w2 = 1.0 - w1;
            let s1 = w1 * (-d[0] / rho).exp();
            let s2 = w2 * (-d[1] / rho).exp();
            let s1n = s1 / (s1 + s2);
            let s2n = s2 / (s1 + s2);
            (s1n - s2n) / 2.0
        };
        let (mut lo, mut hi) = (-5.0f64, 5.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid - h * gfun(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let v_star = 0.5 * (lo + hi);
        let solve = InnerSolve { tol: 1e-12, max_inner: 10_000 };
        let step = implicit_euler_step(&w0, &g, h, None, &solve).unwrap();
        assert!((step.v.matrix()[[0, 0]] - v_star).abs() < 1e-8);
        assert!((step.v.matrix()[[0, 1]] + v_star).abs() < 1e-8);
    }

    #[test]
    fn warm_start_reduces_inner_iterations() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let w0 = random_state(&mut rng, 8, 3);
        let g = chain_instance(&mut rng, 8, 3);
        let inner = InnerSolve::default();
        let first = implicit_euler_step(&w0, &g, 0.5, None, &inner).unwrap();
        let cold = implicit_euler_step(&first.state, &g, 0.5, None, &inner).unwrap();
        let warm = implicit_euler_step(&first.state, &g, 0.5, Some(&first.v), &inner).unwrap();
        assert!(
            warm.inner_iterations < cold.inner_iterations,
            "warm {} vs cold {}",
            warm.inner_iterations,
            cold.inner_iterations
        );
    }

    #[test]
    fn implicit_euler_reports_non_convergence() {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let w0 = random_state(&mut rng, 5, 3);
        let g = chain_instance(&mut rng, 5, 3);
        let inner = InnerSolve { tol: 1e-8, max_inner: 3 };
        let err = implicit_euler_step(&w0, &g, 10.0, None, &inner).unwrap_err();
        assert!(matches!(err, IntegrateError::ConvergenceFailure { max_inner: 3, .. }));
    }

    #[test]
    fn integrate_stops_immediately_on_concentrated_states() {
        let labels = 3;
        let eps = 1e-7;
        let mut w = Array2::from_elem((4, labels), eps);
        for i in 0..4 {
            w[[i, i % labels]] = 1.0 - eps * (labels - 1) as f64;
        }
        let w = AssignmentState::new(w).unwrap();
        let g = LabelingGraph::grid(4, 1, 3, Array2::zeros((4, labels)), 1.0).unwrap();
        let trace = integrate(
            &ButcherTableau::embedded12(),
            &w,
            &g,
            &StepPolicy::Adaptive(StepControl::default()),
            &IntegrateOptions::default(),
        )
        .unwrap();
        assert!(trace.converged);
        assert_eq!(trace.steps(), 0);
    }

    #[test]
    fn adaptive_run_respects_tolerance_and_terminates() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let nodes = 24;
        let d = Array2::from_shape_fn((nodes, 3), |_| rng.random_range(0.0..1.0));
        let g = LabelingGraph::grid(nodes, 1, 3, d, 0.15).unwrap();
        let w0 = AssignmentState::uniform(nodes, 3);
        let ctrl = StepControl::default();
        let trace = integrate(
            &ButcherTableau::embedded32(),
            &w0,
            &g,
            &StepPolicy::Adaptive(ctrl),
            &IntegrateOptions::default(),
        )
        .unwrap();
        assert!(trace.converged);
        assert!(trace.steps() > 0);
        for e in &trace.entries {
            assert!(e.error_estimate.unwrap() < ctrl.tau);
        }
        let times: Vec<f64> = trace.entries.iter().map(|e| e.t).collect();
        assert!(times.windows(2).all(|w| w[1] > w[0]));
        if !trace.step_sizes_non_decreasing() {
            eprintln!("note: step sizes decreased mid-run on a supervised instance");
        }
        assert!(trace.final_entropy() < 1e-3);
    }

    #[test]
    fn fixed_step_backward_euler_integrates_to_convergence() {
        let mut rng = ChaCha8Rng::seed_from_u64(48);
        let nodes = 16;
        let d = Array2::from_shape_fn((nodes, 3), |_| rng.random_range(0.0..1.0));
        let g = LabelingGraph::grid(nodes, 1, 3, d, 0.15).unwrap();
        let w0 = AssignmentState::uniform(nodes, 3);
        let trace = integrate(
            &ButcherTableau::backward_euler(),
            &w0,
            &g,
            &StepPolicy::Fixed { h: 0.5 },
            &IntegrateOptions::default(),
        )
        .unwrap();
        assert!(trace.converged);
        assert!(trace.entries.iter().all(|e| (e.h - 0.5).abs() < 1e-15));
        trace.final_state.validate().unwrap();
    }

    #[test]
    fn unattainable_tolerance_underflows_the_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(49);
        let nodes = 8;
        let d = Array2::from_shape_fn((nodes, 3), |_| rng.random_range(0.0..1.0));
        let g = LabelingGraph::grid(nodes, 1, 3, d, 0.1).unwrap();
        let w0 = AssignmentState::uniform(nodes, 3);
        let ctrl = StepControl { tau: 1e-300, ..StepControl::default() };
        let err = integrate(
            &ButcherTableau::embedded12(),
            &w0,
            &g,
            &StepPolicy::Adaptive(ctrl),
            &IntegrateOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, IntegrateError::StepUnderflow { .. }));
    }

    #[test]
    fn adaptive_requires_embedded_weights() {
        let w0 = AssignmentState::uniform(2, 2);
        let g = LabelingGraph::grid(2, 1, 1, Array2::zeros((2, 2)), 1.0).unwrap();
        let err = integrate(
            &ButcherTableau::rk4(),
            &w0,
            &g,
            &StepPolicy::Adaptive(StepControl::default()),
            &IntegrateOptions::default(),
        )
        .unwrap_err();
        assert_eq!(err, IntegrateError::NotEmbedded { name: "rk4" });
    }

    #[test]
    fn observer_sees_initial_and_accepted_states() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let nodes = 6;
        let d = Array2::from_shape_fn((nodes, 3), |_| rng.random_range(0.0..1.0));
        let g = LabelingGraph::grid(nodes, 1, 3, d, 0.2).unwrap();
        let w0 = AssignmentState::uniform(nodes, 3);
        let mut seen = Vec::new();
        let trace = integrate_observed(
            &ButcherTableau::embedded12(),
            &w0,
            &g,
            &StepPolicy::Adaptive(StepControl::default()),
            &IntegrateOptions::default(),
            |t, _| seen.push(t),
        )
        .unwrap();
        assert_eq!(seen.len(), trace.steps() + 1);
        assert_eq!(seen[0], 0.0);
    }
}
