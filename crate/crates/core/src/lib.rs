//! Distributionally robust stochastic MPC with disturbance-affine feedback.
//!
//! The crate assembles, at every control step, a convex QP whose constraints
//! are exact linear reformulations of Wasserstein-ambiguous CVaR chance
//! constraints over a polytopic disturbance support, together with robust
//! input constraints, a robust terminal-set constraint and optional
//! step-ahead blocks that make the scheme recursively feasible. A tube
//! controller with a fixed disturbance-feedback gain is available as the
//! restricted special case used for benchmarking.
//!
//! Module map:
//! - [`solver`]: dense-interface LP/QP solving with a uniform status contract
//! - [`polytope`]: halfspace sets, support functions, invariant-set iteration
//! - [`lin_sys`]: prediction matrices, policy vectorization, Riccati/Lyapunov
//! - [`ambiguity`]: empirical distributions, CVaR, worst-case expectations
//! - [`reformulation`]: the constraint blocks and quadratic objective
//! - [`controller`]: per-step problem assembly and the candidate-shift logic
//! - [`simlab`]: closed-loop Monte-Carlo runs, metrics and statistical tests
//! - [`config`]: run-configuration files and unit scaling

pub mod ambiguity;
pub mod config;
pub mod controller;
pub mod lin_sys;
pub mod polytope;
pub mod reformulation;
pub mod simlab;
pub mod solver;
