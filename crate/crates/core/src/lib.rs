//! Offline-online adaptive stabilization of uncertain linear dynamics.
//!
//! The crate implements the two-stage strategy in full:
//!
//! * **Offline** — solve one (algebraic or time-periodic) Riccati equation per
//!   training parameter and store the feedback gain schedules in a
//!   [`FeedbackLibrary`](library::FeedbackLibrary).
//! * **Online** — hold one stored gain per update window, integrate auxiliary
//!   (fictitious) plants for a subset of candidate parameters in parallel with
//!   the true plant, and pick the next gain by comparing input/output data
//!   over the window ([`adaptive`]).
//!
//! The [`models`] module provides the benchmark plants (a damped/energized
//! oscillator family, a time-periodic 2x2 family, a convection-diffusion
//! model on a structured grid with a three-level refinement hierarchy, and
//! block-diagonal parameter ensembles for robust a-priori feedback).

pub mod adaptive;
pub mod error;
pub mod library;
pub mod models;
pub mod ode;
pub mod riccati;

pub use adaptive::{
    comparison_functional, fit_decay, inject_measurement_noise, run_adaptive, run_window,
    select_subset, switched_system, update_estimate, write_run_artifacts, AdaptiveRunResult,
    IoRecord, OnlineConfig, SubsetPolicy, SwitchingSchedule,
};
pub use error::{Error, Result};
pub use library::{
    build_library, epsilon_density, lookup_gain, nearest_training, FeedbackLibrary, GainSchedule,
    ParameterBox, SolverConfig, TrainingSet,
};
pub use models::{
    build_ensemble, build_oscillator, build_parabolic, build_periodic, EnsembleSystem,
    ParabolicOptions,
};
pub use ode::{
    explicit_euler_transition, integrate_closed_loop, ControlSystem, Feedback, IntegratorConfig,
    Scheme, TimePeriodicOperator, Trajectory,
};
pub use riccati::{
    kalman_rank, silverman_meadows_qb, silverman_meadows_qc, solve_are, solve_periodic_riccati,
    RankCertificate, RiccatiSolution,
};
