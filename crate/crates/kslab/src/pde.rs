//! Adaptive solver for the radial Keller–Segel system in partial-mass form,
//! plus the scale diagnostics and remainder projections that compare a
//! collapsing run against the modulation predictions.
//!
//! The evolved quantity is the partial mass `m(r, t)` of the cell density,
//! which satisfies `m_t = m_rr - m_r/r + m m_r/r` with `m(0) = 0` and
//! `m(r_max) = total`. All stencils act in `s = ln r`, where the equation
//! reads `m_t = (m_ss - 2 m_s + m m_s)/r^2`: on the geometric meshes of
//! [`make_grid`](crate::grid::make_grid) the `s`-spacing is uniform away
//! from band boundaries, so the centred differences are second order where
//! the solution lives. Time stepping is IMEX backward Euler — the linear
//! part is a tridiagonal implicit solve, the quadratic flux `(m^2)_s/(2r^2)`
//! is explicit under an advective CFL bound. The origin is closed by the
//! quadratic vanishing `m = u0 r^2/2` through the two innermost nodes, the
//! outer boundary pins `m = total`.

use serde::Serialize;

use crate::error::{converge, param, Result};
use crate::grid::{make_grid, RadialGrid};
use crate::linalg::{dense_solve_small, thomas_solve};
use crate::profiles::{build_tj_table, eval_profile, weight, Profile, Weight};
use crate::quad::{integrate_from_zero, HeadRule};
use crate::report::float17;

/// Partial-mass level whose first crossing defines the concentration scale;
/// equals `Q(1)`, so an exact soliton `Q(r/lambda)` crosses at `lambda`.
const HALF_MASS: f64 = 2.0;
/// Regrid when fewer than this many local spacings resolve the scale.
const RESOLUTION_RATIO: f64 = 20.0;
/// Stop refining once the scale is within this factor of the grid floor.
const FLOOR_RATIO: f64 = 100.0;
/// Collapse-time fraction bounding the step: `dt <= 0.1/u0`.
const U0_TIME_FRACTION: f64 = 0.1;
/// Relative change of `ln u0` that triggers a recorded sample.
const SAMPLE_DECADE_FRACTION: f64 = 0.02;
/// Trailing recorded samples entering the blow-up-time fit.
const FIT_WINDOW: usize = 25;

// ---------------------------------------------------------------------------
// monotone cubic interpolation (regridding and frame changes)

/// Piecewise-cubic Hermite interpolant with monotonicity-limited slopes.
/// Monotone data produces a monotone interpolant; node values are
/// reproduced exactly.
struct MonotoneCubic {
    x: Vec<f64>,
    y: Vec<f64>,
    d: Vec<f64>,
}

impl MonotoneCubic {
    fn fit(x: &[f64], y: &[f64]) -> MonotoneCubic {
        let n = x.len();
        assert!(n >= 2 && y.len() == n);
        let h: Vec<f64> = (0..n - 1).map(|i| x[i + 1] - x[i]).collect();
        let delta: Vec<f64> = (0..n - 1).map(|i| (y[i + 1] - y[i]) / h[i]).collect();
        let mut d = vec![0.0; n];
        // one-sided second-order end slopes, clipped to preserve shape
        let end = |h0: f64, h1: f64, d0: f64, d1: f64| -> f64 {
            let s = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
            if s * d0 <= 0.0 {
                0.0
            } else if d0 * d1 < 0.0 && s.abs() > 3.0 * d0.abs() {
                3.0 * d0
            } else {
                s
            }
        };
        d[0] = end(h[0], h[1], delta[0], delta[1]);
        d[n - 1] = end(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
        for i in 1..n - 1 {
            if delta[i - 1] * delta[i] > 0.0 {
                // weighted harmonic mean keeps the slopes in the monotone region
                let w1 = 2.0 * h[i] + h[i - 1];
                let w2 = h[i] + 2.0 * h[i - 1];
                d[i] = (w1 + w2) / (w1 / delta[i - 1] + w2 / delta[i]);
            }
        }
        MonotoneCubic {
            x: x.to_vec(),
            y: y.to_vec(),
            d,
        }
    }

    /// Hermite evaluation; queries outside the table clamp to the end values.
    fn eval(&self, q: f64) -> f64 {
        let n = self.x.len();
        if q <= self.x[0] {
            return self.y[0];
        }
        if q >= self.x[n - 1] {
            return self.y[n - 1];
        }
        let k = match self
            .x
            .binary_search_by(|v| v.partial_cmp(&q).unwrap())
        {
            Ok(i) => return self.y[i],
            Err(i) => i - 1,
        };
        let h = self.x[k + 1] - self.x[k];
        let s = (q - self.x[k]) / h;
        let (s2, s3) = (s * s, s * s * s);
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        h00 * self.y[k] + h10 * h * self.d[k] + h01 * self.y[k + 1] + h11 * h * self.d[k + 1]
    }
}

// ---------------------------------------------------------------------------
// state, initial data

/// Radial partial-mass state: `m[i]` is the mass inside radius `nodes[i]`.
///
/// Invariants maintained by the stepper: `m` vanishes quadratically through
/// the two innermost nodes, `m` equals `total` at the outer boundary, and
/// for nonnegative densities `m` is nondecreasing in `r`.
#[derive(Debug, Clone)]
pub struct PartialMassField {
    pub grid: RadialGrid,
    pub m: Vec<f64>,
    pub t: f64,
    pub total: f64,
}

/// Initial-data presets. `total > 4` (twice the half-mass level) is the
/// supercritical regime.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum InitialData {
    /// `m = 4 mass_factor r^2/(r^2 + lambda0^2)`: the soliton at scale
    /// `lambda0` with its mass multiplied by `mass_factor`.
    ScaledQ { lambda0: f64, mass_factor: f64 },
    /// Soliton at scale `lambda0` plus a smooth ring of mass `amplitude`
    /// concentrated near radius `width`.
    QPlusBump {
        lambda0: f64,
        amplitude: f64,
        width: f64,
    },
}

/// Samples a preset on `grid`. Errors when the concentration scale is not
/// resolved by the mesh (fewer than 20 local spacings, or within 100 radii
/// of the inner cutoff).
pub fn make_initial(preset: InitialData, grid: &RadialGrid) -> Result<PartialMassField> {
    let lambda0 = match preset {
        InitialData::ScaledQ { lambda0, .. } => lambda0,
        InitialData::QPlusBump { lambda0, .. } => lambda0,
    };
    if !(lambda0 > 0.0 && lambda0 < grid.last()) {
        return param("make_initial: lambda0 must lie inside the grid");
    }
    if lambda0 < FLOOR_RATIO * grid.first() {
        return param(format!(
            "make_initial: lambda0 = {lambda0:e} is within {FLOOR_RATIO} inner radii of the cutoff"
        ));
    }
    let i = grid.index_at_or_below(lambda0).unwrap_or(0);
    if lambda0 < RESOLUTION_RATIO * grid.spacing_at(i) {
        return param(format!(
            "make_initial: lambda0 = {lambda0:e} spans fewer than {RESOLUTION_RATIO} local spacings"
        ));
    }
    let m: Vec<f64> = match preset {
        InitialData::ScaledQ {
            lambda0,
            mass_factor,
        } => {
            if !(mass_factor > 0.0) {
                return param("make_initial: mass_factor must be positive");
            }
            grid.nodes()
                .iter()
                .map(|&r| 4.0 * mass_factor * r * r / (r * r + lambda0 * lambda0))
                .collect()
        }
        InitialData::QPlusBump {
            lambda0,
            amplitude,
            width,
        } => {
            if !(amplitude >= 0.0 && width > 0.0) {
                return param("make_initial: bump needs amplitude >= 0 and width > 0");
            }
            grid.nodes()
                .iter()
                .map(|&r| {
                    let x2 = (r / width) * (r / width);
                    // partial mass of a smooth ring: vanishes like r^4, total 1
                    let bump = 1.0 - (-x2).exp() * (1.0 + x2);
                    4.0 * r * r / (r * r + lambda0 * lambda0) + amplitude * bump
                })
                .collect()
        }
    };
    let total = *m.last().unwrap();
    Ok(PartialMassField {
        grid: grid.clone(),
        m,
        t: 0.0,
        total,
    })
}

// ---------------------------------------------------------------------------
// time stepping

/// Largest stable step for the explicit flux: `min_i h_s r_i^2 / m_i`, the
/// advective CFL bound in the log coordinate (speed `m/r^2` there).
pub fn cfl_limit(field: &PartialMassField) -> f64 {
    let r = field.grid.nodes();
    let mut limit = f64::INFINITY;
    for i in 0..r.len() - 1 {
        let hs = (r[i + 1] / r[i]).ln();
        let m = field.m[i + 1].max(1e-300);
        limit = limit.min(hs * r[i] * r[i] / m);
    }
    limit
}

fn step_imex(field: &mut PartialMassField, dt: f64, with_flux: bool) -> Result<()> {
    if !(dt > 0.0 && dt.is_finite()) {
        return param("step: dt must be positive and finite");
    }
    let r = field.grid.nodes();
    let n = r.len();
    let m = &field.m;
    let mut lower = vec![0.0; n - 1];
    let mut diag = vec![1.0; n];
    let mut upper = vec![0.0; n - 1];
    let mut rhs = vec![0.0; n];
    // origin closure: quadratic vanishing through the innermost pair
    upper[0] = -(r[0] / r[1]) * (r[0] / r[1]);
    rhs[0] = 0.0;
    for i in 1..n - 1 {
        let hm = (r[i] / r[i - 1]).ln();
        let hp = (r[i + 1] / r[i]).ln();
        let inv_r2 = 1.0 / (r[i] * r[i]);
        // nonuniform centred stencils in s = ln r for m_ss and m_s
        let (a2, b2, c2) = (
            2.0 / (hm * (hm + hp)),
            -2.0 / (hm * hp),
            2.0 / (hp * (hm + hp)),
        );
        let (a1, b1, c1) = (
            -hp / (hm * (hm + hp)),
            (hp - hm) / (hm * hp),
            hm / (hp * (hm + hp)),
        );
        let ll = (a2 - 2.0 * a1) * inv_r2;
        let dd = (b2 - 2.0 * b1) * inv_r2;
        let uu = (c2 - 2.0 * c1) * inv_r2;
        lower[i - 1] = -dt * ll;
        diag[i] = 1.0 - dt * dd;
        upper[i] = -dt * uu;
        let flux = if with_flux {
            (m[i + 1] * m[i + 1] - m[i - 1] * m[i - 1]) / (2.0 * (hm + hp)) * inv_r2
        } else {
            0.0
        };
        rhs[i] = m[i] + dt * flux;
    }
    lower[n - 2] = 0.0;
    rhs[n - 1] = field.total;
    field.m = thomas_solve(&lower, &diag, &upper, &rhs)?;
    field.t += dt;
    Ok(())
}

/// One IMEX step of size `dt`. Rejects steps above the advective CFL bound;
/// the linear part is unconditionally stable, the explicit flux is not.
pub fn step(field: &mut PartialMassField, dt: f64) -> Result<()> {
    if dt > cfl_limit(field) * (1.0 + 1e-9) {
        return param(format!(
            "step: dt = {dt:e} exceeds the advective CFL bound {:e}",
            cfl_limit(field)
        ));
    }
    step_imex(field, dt, true)
}

// ---------------------------------------------------------------------------
// scale diagnostics

/// Concentration diagnostics of one state.
#[derive(Debug, Clone, Copy)]
pub struct ScaleEstimate {
    /// Smallest radius with `m = 2`, by linear interpolation.
    pub lambda: f64,
    /// Central density `2m/r^2`, averaged over the three innermost nodes.
    pub u0: f64,
}

/// Extracts `(lambda, u0)`. Errors when the field never reaches the
/// half-mass level or reaches it already at the innermost node.
pub fn extract_scale(field: &PartialMassField) -> Result<ScaleEstimate> {
    let r = field.grid.nodes();
    let m = &field.m;
    let u0 = (0..3).map(|i| 2.0 * m[i] / (r[i] * r[i])).sum::<f64>() / 3.0;
    if m[m.len() - 1] < HALF_MASS {
        return converge("extract_scale: field never reaches the half-mass level");
    }
    if m[0] >= HALF_MASS {
        return converge("extract_scale: half-mass level at or below the grid floor");
    }
    let mut lambda = None;
    for i in 0..m.len() - 1 {
        if m[i] < HALF_MASS && m[i + 1] >= HALF_MASS {
            let w = (HALF_MASS - m[i]) / (m[i + 1] - m[i]);
            lambda = Some(r[i] + w * (r[i + 1] - r[i]));
            break;
        }
    }
    match lambda {
        Some(lambda) => Ok(ScaleEstimate { lambda, u0 }),
        None => converge("extract_scale: no upward half-mass crossing"),
    }
}

/// Sup of `|m(lambda y)/Q(y) - 1|` over the grid nodes with `y <= 10`. Near
/// the origin the ratio tends to `lambda^2 u0 / 8`, so this also bounds the
/// type-II indicator.
pub fn profile_error(field: &PartialMassField, lambda: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, &r) in field.grid.nodes().iter().enumerate() {
        if r > 10.0 * lambda {
            break;
        }
        let q = eval_profile(Profile::Q, r / lambda);
        worst = worst.max((field.m[i] / q - 1.0).abs());
    }
    worst
}

// ---------------------------------------------------------------------------
// regridding

/// What [`adapt`] did.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdaptOutcome {
    pub regridded: bool,
    /// Scale within 100 radii of the inner cutoff: collapse is resolved as
    /// far as this mesh can go; callers should stop.
    pub at_floor: bool,
}

/// Rebuilds the mesh around `lambda_est` when fewer than 20 local spacings
/// resolve it: new cluster scale `lambda_est/4`, values carried over by
/// monotone cubic interpolation in `ln r` (exact at retained nodes, in
/// particular both endpoints). `t` and `total` are unchanged.
pub fn adapt(
    field: &mut PartialMassField,
    lambda_est: f64,
    points_per_decade: usize,
) -> Result<AdaptOutcome> {
    let r0 = field.grid.first();
    if lambda_est < FLOOR_RATIO * r0 {
        return Ok(AdaptOutcome {
            regridded: false,
            at_floor: true,
        });
    }
    let i = field.grid.index_at_or_below(lambda_est).unwrap_or(0);
    if lambda_est >= RESOLUTION_RATIO * field.grid.spacing_at(i) {
        return Ok(AdaptOutcome {
            regridded: false,
            at_floor: false,
        });
    }
    let cluster = (lambda_est / 4.0).max(FLOOR_RATIO * r0);
    let new_grid = make_grid(r0, field.grid.last(), points_per_decade, cluster)?;
    let ln_old: Vec<f64> = field.grid.nodes().iter().map(|r| r.ln()).collect();
    let interp = MonotoneCubic::fit(&ln_old, &field.m);
    let mut m: Vec<f64> = new_grid.nodes().iter().map(|r| interp.eval(r.ln())).collect();
    let n = m.len();
    m[n - 1] = field.total;
    field.grid = new_grid;
    field.m = m;
    Ok(AdaptOutcome {
        regridded: true,
        at_floor: false,
    })
}

// ---------------------------------------------------------------------------
// full runs

/// Configuration of an adaptive run.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct PdeConfig {
    pub initial: InitialData,
    pub r_min: f64,
    pub r_max: f64,
    pub points_per_decade: usize,
    /// Stop once the central density reaches this value.
    pub u0_cap: f64,
    /// Stop once `t` reaches this horizon.
    pub t_max: f64,
    /// Fraction of the CFL/collapse-time bound actually taken.
    pub cfl_safety: f64,
}

impl Default for PdeConfig {
    fn default() -> Self {
        PdeConfig {
            initial: InitialData::ScaledQ {
                lambda0: 1.0,
                mass_factor: 1.1,
            },
            r_min: 1e-8,
            r_max: 50.0,
            points_per_decade: 48,
            u0_cap: 1e10,
            t_max: 200.0,
            cfl_safety: 0.9,
        }
    }
}

impl PdeConfig {
    fn validate(&self) -> Result<()> {
        if !(self.r_min > 0.0 && self.r_min < self.r_max) {
            return param("run: need 0 < r_min < r_max");
        }
        if !(self.u0_cap > 0.0 && self.t_max > 0.0) {
            return param("run: u0_cap and t_max must be positive");
        }
        if !(self.cfl_safety > 0.0 && self.cfl_safety <= 1.0) {
            return param("run: cfl_safety must lie in (0, 1]");
        }
        Ok(())
    }
}

/// Why a run stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum StopReason {
    /// Central density reached the cap, or the scale reached the grid floor.
    BlowupResolved,
    /// Time horizon reached while the central density still exceeds its
    /// initial value.
    Horizon,
    /// Time horizon reached with the central density at or below its initial
    /// value.
    Subcritical,
}

impl StopReason {
    pub fn label(&self) -> &'static str {
        match self {
            StopReason::BlowupResolved => "blowup-resolved",
            StopReason::Horizon => "horizon",
            StopReason::Subcritical => "subcritical",
        }
    }
}

/// One recorded diagnostic sample.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ScaleSample {
    pub t: f64,
    pub u0: f64,
    pub lambda: f64,
    /// Rate-based blow-up time estimate `t + u0/(du0/dt)`, once the trailing
    /// window supports a positive growth rate.
    pub t_est: Option<f64>,
    pub profile_err: f64,
}

/// Scale history of a run.
#[derive(Debug, Clone, Serialize)]
pub struct ScaleSeries {
    pub samples: Vec<ScaleSample>,
    pub blew_up: bool,
    /// Final blow-up time estimate, when available.
    pub t_est: Option<f64>,
}

impl ScaleSeries {
    /// CSV: `t,u0,lambda,T_est_minus_t,lambda_sq_over_Tmt,profile_err`, 17
    /// significant digits; estimate columns are empty before the fit locks.
    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "t,u0,lambda,T_est_minus_t,lambda_sq_over_Tmt,profile_err")?;
        for s in &self.samples {
            let (tmt, ratio) = match s.t_est {
                Some(te) if te > s.t => {
                    let tmt = te - s.t;
                    (float17(tmt), float17(s.lambda * s.lambda / tmt))
                }
                _ => (String::new(), String::new()),
            };
            writeln!(
                out,
                "{},{},{},{tmt},{ratio},{}",
                float17(s.t),
                float17(s.u0),
                float17(s.lambda),
                float17(s.profile_err),
            )?;
        }
        Ok(())
    }
}

/// Field copy captured when the central density first crossed a decade
/// milestone.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub milestone_u0: f64,
    pub t_est: Option<f64>,
    pub field: PartialMassField,
}

impl Snapshot {
    /// CSV: `r,m`, one row per node, 17 significant digits.
    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "r,m")?;
        for (r, m) in self.field.grid.nodes().iter().zip(&self.field.m) {
            writeln!(out, "{},{}", float17(*r), float17(*m))?;
        }
        Ok(())
    }
}

/// Everything a run produced.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub reason: StopReason,
    pub series: ScaleSeries,
    pub snapshots: Vec<Snapshot>,
    pub field: PartialMassField,
    pub steps: usize,
}

fn estimate_blowup_time(samples: &[(f64, f64)]) -> Option<f64> {
    if samples.len() < 8 {
        return None;
    }
    let window = &samples[samples.len() - samples.len().min(FIT_WINDOW)..];
    let n = window.len() as f64;
    let tbar = window.iter().map(|p| p.0).sum::<f64>() / n;
    let ybar = window.iter().map(|p| p.1).sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (t, y) in window {
        sxx += (t - tbar) * (t - tbar);
        sxy += (t - tbar) * (y - ybar);
    }
    if sxx <= 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    if slope <= 0.0 || !slope.is_finite() {
        return None;
    }
    Some(window[window.len() - 1].0 + 1.0 / slope)
}

/// Runs the adaptive scheme until the central density reaches `u0_cap`, the
/// scale reaches the grid floor (both labelled blow-up-resolved), or `t_max`
/// is hit. Samples are recorded every 2% of `ln u0` movement; a field
/// snapshot is captured at every decade of `u0`.
pub fn run(config: &PdeConfig) -> Result<RunResult> {
    config.validate()?;
    let lambda0 = match config.initial {
        InitialData::ScaledQ { lambda0, .. } => lambda0,
        InitialData::QPlusBump { lambda0, .. } => lambda0,
    };
    let cluster = (lambda0 / 4.0).max(FLOOR_RATIO * config.r_min);
    let grid = make_grid(config.r_min, config.r_max, config.points_per_decade, cluster)?;
    let mut field = make_initial(config.initial, &grid)?;

    let mut samples: Vec<ScaleSample> = Vec::new();
    let mut fit_points: Vec<(f64, f64)> = Vec::new();
    let mut snapshots: Vec<Snapshot> = Vec::new();

    let first = extract_scale(&field)?;
    let u0_init = first.u0;
    let mut next_milestone = 10f64.powf(first.u0.log10().floor() + 1.0);
    let record = |field: &PartialMassField,
                      est: ScaleEstimate,
                      fit_points: &mut Vec<(f64, f64)>,
                      samples: &mut Vec<ScaleSample>|
     -> Option<f64> {
        fit_points.push((field.t, est.u0.ln()));
        let t_est = estimate_blowup_time(fit_points);
        samples.push(ScaleSample {
            t: field.t,
            u0: est.u0,
            lambda: est.lambda,
            t_est,
            profile_err: profile_error(field, est.lambda),
        });
        t_est
    };
    record(&field, first, &mut fit_points, &mut samples);
    let mut last_ln_u0 = first.u0.ln();
    let mut last_t_est = samples[0].t_est;

    let mut steps = 0usize;
    let reason = loop {
        let est = extract_scale(&field)?;
        if est.u0 >= config.u0_cap {
            break StopReason::BlowupResolved;
        }
        if field.t >= config.t_max * (1.0 - 1e-12) {
            break if est.u0 <= u0_init {
                StopReason::Subcritical
            } else {
                StopReason::Horizon
            };
        }
        let outcome = adapt(&mut field, est.lambda, config.points_per_decade)?;
        if outcome.at_floor {
            break StopReason::BlowupResolved;
        }
        let dt = config.cfl_safety * cfl_limit(&field).min(U0_TIME_FRACTION / est.u0);
        let dt = dt.min(config.t_max - field.t).max(0.0);
        if dt < 1e-16 * field.t.max(1.0) {
            return converge("run: step size collapsed");
        }
        step_imex(&mut field, dt, true)?;
        steps += 1;
        if steps > 20_000_000 {
            return converge("run: step budget exhausted before any stop condition");
        }
        let est = extract_scale(&field)?;
        if (est.u0.ln() - last_ln_u0).abs() >= SAMPLE_DECADE_FRACTION {
            last_t_est = record(&field, est, &mut fit_points, &mut samples);
            last_ln_u0 = est.u0.ln();
        }
        while est.u0 >= next_milestone {
            snapshots.push(Snapshot {
                milestone_u0: next_milestone,
                t_est: last_t_est,
                field: field.clone(),
            });
            next_milestone *= 10.0;
        }
    };

    let est = extract_scale(&field)?;
    let final_t_est = record(&field, est, &mut fit_points, &mut samples);
    let blew_up = reason == StopReason::BlowupResolved;
    Ok(RunResult {
        reason,
        series: ScaleSeries {
            samples,
            blew_up,
            t_est: final_t_est,
        },
        snapshots,
        field,
        steps,
    })
}

// ---------------------------------------------------------------------------
// remainder projection

/// Decomposition of a state in the parabolic frame: `m(mu zeta) = Q_nu(zeta)
/// + P(zeta) + remainder`, with `P` built from the chain approximate
/// eigenfunctions and `nu` fixed by orthogonality of the remainder to the
/// lowest one.
#[derive(Debug, Clone, Serialize)]
pub struct RemainderProjection {
    /// Soliton scale in the parabolic frame (root of the orthogonality
    /// condition inside `[lambda/(4 mu), 4 lambda/mu]`).
    pub nu: f64,
    /// Parabolic scale `sqrt(2 beta (T - t))` used for the frame change.
    pub mu: f64,
    /// Amplitudes of the chain approximate eigenfunctions, `n = 0..=n_modes`.
    /// The scale `nu` carries the lowest direction, so `a[0]` is identically
    /// zero and `a[1]` multiplies the combination `phi_1 - phi_0`: a scale
    /// shift is `phi_0` at leading order, so only that pairing keeps the
    /// decomposition unique.
    pub a: Vec<f64>,
    /// Weighted norm of the remainder left after `Q_nu` and the fitted modes.
    pub remainder_norm: f64,
    /// `|<remainder, phi0>| / (||remainder|| ||phi0||)` at the returned `nu`.
    pub orthogonality: f64,
}

/// Projects `field` onto the soliton-plus-eigenmodes decomposition in the
/// parabolic frame of the blow-up time estimate `t_blowup`.
///
/// Works in the unit-scale variable `x = zeta/nu`, where the candidate
/// profile is always `Q(x)` and the weight is `nu^4 omega0(x)/x` times the
/// Gaussian at scale `nu`. For each trial `nu` the amplitudes solve the
/// orthogonality conditions against modes `1..=n_modes`; `nu` itself is
/// bisected until the remainder is orthogonal to mode 0 as well. A missing
/// sign change over the bracket is a convergence error.
pub fn project_remainder(
    field: &PartialMassField,
    t_blowup: f64,
    beta: f64,
    n_modes: usize,
) -> Result<RemainderProjection> {
    if !(beta > 0.0) {
        return param("project_remainder: beta must be positive");
    }
    if !(t_blowup > field.t) {
        return param("project_remainder: blow-up estimate must lie in the future");
    }
    let mu = (2.0 * beta * (t_blowup - field.t)).sqrt();
    let est = extract_scale(field)?;
    let lambda_w = est.lambda / mu;
    let (lo, hi) = (lambda_w / 4.0, 4.0 * lambda_w);

    // fixed unit-scale quadrature grid covering the Gaussian for every
    // bracketed nu; beyond the field the state continues as u0 r^2/2 inside
    // and as the constant total outside
    let x_max = 14.0 / (beta.sqrt() * lo);
    let xg = make_grid(1e-3, x_max, 128, 1.0)?;
    let table = build_tj_table(&xg, n_modes)?;
    let ln_r: Vec<f64> = field.grid.nodes().iter().map(|r| r.ln()).collect();
    let interp = MonotoneCubic::fit(&ln_r, &field.m);
    let (r0, r1) = (field.grid.first(), field.grid.last());
    let sample_w = |nu: f64| -> Vec<f64> {
        xg.nodes()
            .iter()
            .map(|&x| {
                let r = mu * nu * x;
                if r < r0 {
                    0.5 * est.u0 * r * r
                } else if r > r1 {
                    field.total
                } else {
                    interp.eval(r.ln())
                }
            })
            .collect()
    };
    let measure = |nu: f64| -> Vec<f64> {
        xg.nodes()
            .iter()
            .map(|&x| {
                nu.powi(4) * weight(Weight::Omega0, x) / x * weight(Weight::Rho { nu, beta }, x)
            })
            .collect()
    };
    let qx: Vec<f64> = xg
        .nodes()
        .iter()
        .map(|&x| eval_profile(Profile::Q, x))
        .collect();
    let pair = |f: &[f64], g: &[f64], meas: &[f64]| -> f64 {
        let prod: Vec<f64> = (0..f.len()).map(|i| f[i] * g[i] * meas[i]).collect();
        integrate_from_zero(&xg, &prod, HeadRule::Power(3.0))
    };

    struct FitAt {
        amps: Vec<f64>,
        f: f64,
        norm: f64,
        orthogonality: f64,
    }
    // fit directions: phi_1 - phi_0 for n = 1 (a scale shift already spans
    // phi_0), plain phi_n above; the amplitudes make the remainder orthogonal
    // to modes 1..=n_modes, and f is the leftover mode-0 overlap
    let fit = |nu: f64| -> Result<FitAt> {
        let meas = measure(nu);
        let w = sample_w(nu);
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n_modes + 1);
        for n in 0..=n_modes {
            basis.push(table.phi_profile(n, beta, nu)?);
        }
        let mut dirs: Vec<Vec<f64>> = Vec::new();
        if n_modes >= 1 {
            dirs.push((0..basis[1].len()).map(|i| basis[1][i] - basis[0][i]).collect());
            for phi in basis.iter().take(n_modes + 1).skip(2) {
                dirs.push(phi.clone());
            }
        }
        let mut m_eps: Vec<f64> = (0..w.len()).map(|i| w[i] - qx[i]).collect();
        let amps = if dirs.is_empty() {
            Vec::new()
        } else {
            let mat: Vec<Vec<f64>> = (1..=n_modes)
                .map(|n| dirs.iter().map(|p| pair(p, &basis[n], &meas)).collect())
                .collect();
            let rhs: Vec<f64> = (1..=n_modes)
                .map(|n| pair(&m_eps, &basis[n], &meas))
                .collect();
            dense_solve_small(mat, rhs)?
        };
        for (p, &amp) in dirs.iter().zip(&amps) {
            for (e, v) in m_eps.iter_mut().zip(p) {
                *e -= amp * v;
            }
        }
        let phi0_norm = pair(&basis[0], &basis[0], &meas).max(0.0).sqrt();
        let overlap0 = pair(&m_eps, &basis[0], &meas);
        let norm = pair(&m_eps, &m_eps, &meas).max(0.0).sqrt();
        Ok(FitAt {
            amps,
            f: overlap0 / phi0_norm,
            norm,
            orthogonality: if norm > 1e-300 && phi0_norm > 0.0 {
                overlap0.abs() / (norm * phi0_norm)
            } else {
                0.0
            },
        })
    };
    let mismatch = |nu: f64| -> Result<f64> { Ok(fit(nu)?.f) };

    let (mut lo, mut hi) = (lo, hi);
    let mut f_lo = mismatch(lo)?;
    let f_hi = mismatch(hi)?;
    if f_lo == 0.0 {
        hi = lo;
    } else if f_hi == 0.0 {
        lo = hi;
    } else if f_lo.signum() == f_hi.signum() {
        return converge(
            "project_remainder: no orthogonality sign change across [lambda/4, 4 lambda]",
        );
    }
    // bisect to machine width so the residual orthogonality is rounding-level
    while hi - lo > 4.0 * f64::EPSILON * hi {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let f_mid = mismatch(mid)?;
        if f_mid == 0.0 {
            lo = mid;
            hi = mid;
        } else if f_mid.signum() == f_lo.signum() {
            lo = mid;
            f_lo = f_mid;
        } else {
            hi = mid;
        }
    }
    let nu = 0.5 * (lo + hi);

    let sol = fit(nu)?;
    let mut a = vec![0.0];
    a.extend(sol.amps);
    Ok(RemainderProjection {
        nu,
        mu,
        a,
        remainder_norm: sol.norm,
        orthogonality: sol.orthogonality,
    })
}
