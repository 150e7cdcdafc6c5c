//! Image labeling by geometric integration of assignment flows.
//!
//! A labeling problem assigns one of `|J|` prototypical labels to each of
//! `|I|` data points (pixels, signal samples). The assignment is relaxed to a
//! row-stochastic matrix `W` whose row `W_i` lives on the open probability
//! simplex, and the labeling is computed by following a smooth flow on that
//! product manifold until the rows concentrate on single labels:
//!
//! ```text
//! dW/dt = Pi_W(S(W)),    W(0) = barycenter,
//! ```
//!
//! where `S` couples data-term likelihoods with geometric averaging over
//! spatial neighborhoods and `Pi_W` projects onto the tangent space.
//!
//! Module layout:
//!
//! * [`geometry`]: simplex primitives (projections, exponential maps,
//!   geometric means) and the state/tangent container types.
//! * [`flow`]: the labeling graph (neighborhoods, weights, distances) and the
//!   flow maps `L`, `S`, the vector field, and its tangent-space pullback.
//! * [`rkmk`]: geometric Runge-Kutta integrators for the nonlinear flow,
//!   including embedded pairs with adaptive step control and implicit Euler.
//! * [`linearflow`]: first-order approximation of the flow around a base
//!   point; exposes the tangent ODE `dV/dt = a + A V` matrix-free, plus
//!   optional relinearization.
//! * [`linsolve`]: integrators for the linear tangent ODE: fixed-order
//!   Runge-Kutta steps with a priori error bounds and step selection, and a
//!   Krylov exponential integrator.
//! * [`harness`]: synthetic labeling scenarios, quality metrics, and
//!   reference (ground-truth) solvers used to validate the fast integrators.

pub mod flow;
pub mod geometry;
pub mod harness;
pub mod linearflow;
pub mod linsolve;
pub mod rkmk;
