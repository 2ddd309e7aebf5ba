//! Numerical laboratory for singularity formation in the radial
//! two-dimensional Keller–Segel system, written in partial-mass form.
//!
//! The crate provides four layers that build on each other:
//!
//! * [`profiles`] — closed-form stationary profiles, weights, the explicit
//!   inverse of the unit-scale linearized operator, and the correction chain
//!   `T_j` it generates;
//! * [`spectral`] — self-adjoint discretizations of the linearized operators,
//!   their leading eigenpairs, the logarithmic eigenvalue law, and coercivity
//!   diagnostics for the adjoint energy;
//! * [`modulation`] — the finite-dimensional modulation system that drives
//!   the scale `nu(tau)`, its map back to physical time, and blow-up law
//!   fits;
//! * [`pde`] — an adaptive solver for the full radial partial-mass equation,
//!   used to confirm the predicted scaling dynamics from direct simulation.
//!
//! Everything is deterministic: random starts are seeded, output is plain
//! CSV/JSON with fixed formatting, and no parallelism is used.

pub mod error;
pub mod grid;
pub mod linalg;
pub mod modulation;
pub mod pde;
pub mod profiles;
pub mod quad;
pub mod report;
pub mod spectral;
pub mod verify;

pub use error::{Error, Result};
pub use grid::{make_grid, GridKind, RadialGrid};
pub use modulation::{
    beta_from_compatibility, fit_power_law, integrate, mod_residuals, slaved_amplitude,
    stable_initial_state, stable_law_scale, to_physical, unstable_initial_state, AlphaSource,
    ModMode, ModResiduals, ModulationState, ModulationTrajectory, PhysicalLaw, PhysicalSample,
    PowerLawFit,
};
pub use pde::{
    adapt, cfl_limit, extract_scale, make_initial, profile_error, project_remainder, run, step,
    AdaptOutcome, InitialData, PartialMassField, PdeConfig, RemainderProjection, RunResult,
    ScaleEstimate, ScaleSample, ScaleSeries, Snapshot, StopReason,
};
pub use profiles::{
    apply_a0_inverse, build_tj_table, c_coefficient, dhat, dhat_exact, eval_profile,
    eval_profile_scaled, stationary_residual, weight, Profile, TjTable, Weight,
};
pub use spectral::{
    assemble_operator, build_spectrum_report, coercivity_check, eigen_stability_check,
    eigenfunction_norm, overlap_table, predicted_alpha, solve_top_spectrum,
    spectral_gap_check, standard_spectral_grid, CoercivityKind, EigenPair, OperatorKind,
    SpectrumReport, SturmLiouvilleForm,
};
pub use verify::{verify_all, CheckResult, VerifyReport};

/// Euler–Mascheroni constant, which enters the refined eigenvalue law.
pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;
