//! Mixtures of affine time-varying (ATV) systems for trajectory forecasting,
//! plus a consensus-horizon contouring planner that consumes the forecasts.
//!
//! The crate is organised around the data flow of a forecasting + planning
//! stack:
//!
//! * [`dynamics`] — exact zero-order-hold agent dynamics and their analytic
//!   linearizations (double integrator, dynamically extended unicycle).
//! * [`mixture`] — the mixture-of-ATV-systems representation: block layout,
//!   per-mode affine systems, Gaussian rollouts, likelihoods, serialization.
//! * [`scenes`] — scene data model, a social-forces two-particle generator,
//!   rotation augmentation, and a scripted four-way intersection scenario.
//! * [`fitter`] — EM fitting of mixture systems from scene data and
//!   prediction on fresh histories.
//! * [`qp`] — a sparse operator-splitting convex QP solver with warm starts.
//! * [`planner`] — reference paths, contouring costs, collision half-planes,
//!   the consensus-horizon QP, and a closed-loop driver.
//! * [`metrics`] — evaluation helpers (displacement errors, block norms).

pub mod dynamics;
pub mod fitter;
pub mod metrics;
pub mod mixture;
pub mod planner;
pub mod qp;
pub mod scenes;
