//! Closed-form stationary profiles, weights, the explicit kernel inverse, and
//! the correction chain `T_j` it generates.
//!
//! The stationary cell density `U = 8/(1+r^2)^2` carries partial mass
//! `Q = 4r^2/(1+r^2)` (total mass 4, i.e. the 8π threshold after the angular
//! normalization). The linearized partial-mass operator at scale 1 has the
//! explicit zero mode `psi0 = r^2/(1+r^2)^2` and an independent solution
//! `psi0_tilde` with a logarithm; variation of parameters gives the inverse
//! in closed form, and iterating it on `psi0` builds the chain `T_j` whose
//! large-`r` growth `d_j r^{2j-2} ln r` controls the eigenvalue law.

use num_rational::Ratio;

use crate::error::{param, Result};
use crate::grid::RadialGrid;
use crate::quad::{cumulative_from_zero, cumulative_to_one, HeadRule};

/// Closed-form profile selector for [`eval_profile`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    /// Cell density `U = 8/(1+r^2)^2`.
    U,
    /// Partial mass `Q = 4r^2/(1+r^2)`.
    Q,
    /// `dQ/dr = 8r/(1+r^2)^2`.
    QPrime,
    /// `d^2Q/dr^2 = 8(1-3r^2)/(1+r^2)^3`.
    QSecond,
    /// Kernel element `psi0 = r^2/(1+r^2)^2` (this is also `T_0`).
    Psi0,
    /// Second homogeneous solution `(r^4 + 4r^2 ln r - 1)/(1+r^2)^2`.
    Psi0Tilde,
}

/// Evaluates a closed-form profile at unit scale.
pub fn eval_profile(p: Profile, r: f64) -> f64 {
    let s = 1.0 + r * r;
    match p {
        Profile::U => 8.0 / (s * s),
        Profile::Q => 4.0 * r * r / s,
        Profile::QPrime => 8.0 * r / (s * s),
        Profile::QSecond => 8.0 * (1.0 - 3.0 * r * r) / (s * s * s),
        Profile::Psi0 => r * r / (s * s),
        Profile::Psi0Tilde => (r.powi(4) + 4.0 * r * r * r.ln() - 1.0) / (s * s),
    }
}

/// Evaluates a profile at concentration scale `nu`, with the natural scaling
/// for each kind: densities pick up `nu^-2`, partial masses are invariant,
/// and `d/dr` contributes `nu^-1` per derivative.
pub fn eval_profile_scaled(p: Profile, zeta: f64, nu: f64) -> f64 {
    let base = eval_profile(p, zeta / nu);
    match p {
        Profile::U | Profile::QSecond => base / (nu * nu),
        Profile::QPrime => base / nu,
        Profile::Q | Profile::Psi0 | Profile::Psi0Tilde => base,
    }
}

/// Weight selector for [`weight`]. All Gaussians use the convention
/// `exp(-beta x^2 / 2)` in the indicated variable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Weight {
    /// `(nu^2 + z^2)^2 exp(-beta z^2/2) / 8` — the density weight at scale
    /// `nu` in the outer variable.
    OmegaNu { nu: f64, beta: f64 },
    /// `(1 + r^2)^2 / 8` — the unit-scale density weight, no Gaussian.
    Omega0,
    /// `z^3 exp(-beta z^2/2)` — the far-field comparison weight.
    OmegaTilde { beta: f64 },
    /// `exp(-beta nu^2 y^2 / 2)` — the Gaussian alone, inner variable.
    Rho { nu: f64, beta: f64 },
    /// `exp(-beta z^2 / 2)` — the Gaussian alone, outer variable.
    Rho0 { beta: f64 },
    /// `(z^2 + nu^2)(z^2 + nu_tilde^2) exp(-beta z^2/2) / 8` — geometric mean
    /// of two `OmegaNu` weights, used by the two-scale comparison operator.
    OmegaBar { nu: f64, nu_tilde: f64, beta: f64 },
}

/// Evaluates a weight at radius `r` (interpreted in the variable named in the
/// selector's documentation).
pub fn weight(w: Weight, r: f64) -> f64 {
    let r2 = r * r;
    match w {
        Weight::OmegaNu { nu, beta } => {
            let q = nu * nu + r2;
            q * q * (-0.5 * beta * r2).exp() / 8.0
        }
        Weight::Omega0 => {
            let q = 1.0 + r2;
            q * q / 8.0
        }
        Weight::OmegaTilde { beta } => r2 * r * (-0.5 * beta * r2).exp(),
        Weight::Rho { nu, beta } => (-0.5 * beta * nu * nu * r2).exp(),
        Weight::Rho0 { beta } => (-0.5 * beta * r2).exp(),
        Weight::OmegaBar { nu, nu_tilde, beta } => {
            (r2 + nu * nu) * (r2 + nu_tilde * nu_tilde) * (-0.5 * beta * r2).exp() / 8.0
        }
    }
}

/// Applies the closed-form inverse of the unit-scale linearized operator:
///
/// `g(r) = psi0(r)/2 * \int_r^1 (z^4 + 4 z^2 ln z - 1) f(z) dz/z
///        + psi0_tilde(r)/2 * \int_0^r z f(z) dz`.
///
/// Both boundary contributions vanish at `r = 1`, so `g(1) = 0` exactly; the
/// grid must therefore contain a node at 1. `f` must vanish quadratically at
/// the origin (all chain members do).
pub fn apply_a0_inverse(grid: &RadialGrid, f: &[f64]) -> Result<Vec<f64>> {
    if f.len() != grid.len() {
        return param("apply_a0_inverse: field length does not match grid");
    }
    let r = grid.nodes();
    let h1: Vec<f64> = r
        .iter()
        .zip(f)
        .map(|(z, fv)| (z.powi(4) + 4.0 * z * z * z.ln() - 1.0) / z * fv)
        .collect();
    let h2: Vec<f64> = r.iter().zip(f).map(|(z, fv)| z * fv).collect();
    let i1 = cumulative_to_one(grid, &h1)?;
    let i2 = cumulative_from_zero(grid, &h2, HeadRule::Power(3.0));
    Ok((0..f.len())
        .map(|i| {
            0.5 * eval_profile(Profile::Psi0, r[i]) * i1[i]
                + 0.5 * eval_profile(Profile::Psi0Tilde, r[i]) * i2[i]
        })
        .collect())
}

/// Exact chain coefficient `d_j` as a rational: `d_1 = -1/2`,
/// `d_{j+1} = -d_j / (4 j (j+1))`.
pub fn dhat_exact(j: usize) -> Ratio<i128> {
    assert!(j >= 1, "chain coefficients start at j = 1");
    let mut d = Ratio::new(-1i128, 2i128);
    for k in 1..j {
        d = -d / Ratio::from_integer(4 * k as i128 * (k as i128 + 1));
    }
    d
}

/// `d_j` as a float.
pub fn dhat(j: usize) -> f64 {
    let r = dhat_exact(j);
    *r.numer() as f64 / *r.denom() as f64
}

/// Binomial-type coefficient `c_{n,j} = 2^j n! / (n-j)!` appearing in the
/// eigenfunction ansatz.
pub fn c_coefficient(n: usize, j: usize) -> f64 {
    assert!(j <= n);
    let mut c = 1.0f64;
    for k in 0..j {
        c *= 2.0 * (n - k) as f64;
    }
    c
}

/// Maximum pointwise residual of the stationary partial-mass equation
/// `m'' - m'/r + m m'/r = 0` evaluated on `Q` with analytic derivatives.
pub fn stationary_residual(grid: &RadialGrid) -> f64 {
    grid.nodes()
        .iter()
        .map(|&r| {
            let q = eval_profile(Profile::Q, r);
            let qp = eval_profile(Profile::QPrime, r);
            let qs = eval_profile(Profile::QSecond, r);
            (qs - qp / r + q * qp / r).abs()
        })
        .fold(0.0, f64::max)
}

/// Tabulated correction chain `T_0 .. T_jmax` and the combinations
/// `Theta_j = (2j-2) T_j - r dT_j/dr` on a shared grid.
#[derive(Debug, Clone)]
pub struct TjTable {
    grid: RadialGrid,
    t: Vec<Vec<f64>>,
    theta: Vec<Vec<f64>>,
}

/// Builds the chain by repeated application of the kernel inverse:
/// `T_0 = psi0`, `T_{j+1} = -(inverse) T_j`.
pub fn build_tj_table(grid: &RadialGrid, jmax: usize) -> Result<TjTable> {
    if grid.unit_index().is_none() {
        return param("build_tj_table: grid must contain a node at r = 1");
    }
    let mut t: Vec<Vec<f64>> = Vec::with_capacity(jmax + 1);
    t.push(
        grid.nodes()
            .iter()
            .map(|&r| eval_profile(Profile::Psi0, r))
            .collect(),
    );
    for _ in 0..jmax {
        let prev = t.last().unwrap();
        let mut next = apply_a0_inverse(grid, prev)?;
        next.iter_mut().for_each(|x| *x = -*x);
        t.push(next);
    }
    let theta = t
        .iter()
        .enumerate()
        .map(|(j, tj)| {
            let d = grid.derivative(tj);
            grid.nodes()
                .iter()
                .enumerate()
                .map(|(i, &r)| (2.0 * j as f64 - 2.0) * tj[i] - r * d[i])
                .collect()
        })
        .collect();
    Ok(TjTable {
        grid: grid.clone(),
        t,
        theta,
    })
}

impl TjTable {
    pub fn grid(&self) -> &RadialGrid {
        &self.grid
    }

    pub fn jmax(&self) -> usize {
        self.t.len() - 1
    }

    pub fn t(&self, j: usize) -> &[f64] {
        &self.t[j]
    }

    pub fn theta(&self, j: usize) -> &[f64] {
        &self.theta[j]
    }

    /// Approximate eigenfunction profile in the unit-scale variable:
    /// `phi_n(r) = sum_j c_{n,j} beta^j nu^{2j-2} T_j(r)`.
    pub fn phi_profile(&self, n: usize, beta: f64, nu: f64) -> Result<Vec<f64>> {
        if n > self.jmax() {
            return param(format!(
                "phi_profile: need chain up to j = {n}, table has {}",
                self.jmax()
            ));
        }
        let mut out = vec![0.0; self.grid.len()];
        for j in 0..=n {
            let coef = c_coefficient(n, j) * beta.powi(j as i32) * nu.powi(2 * j as i32 - 2);
            for (o, tv) in out.iter_mut().zip(&self.t[j]) {
                *o += coef * tv;
            }
        }
        Ok(out)
    }

    /// Writes the table as CSV: header `r,T0,..,Tj,Theta0,..,Thetaj`, one row
    /// per node, 17 significant digits.
    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> Result<()> {
        let jmax = self.jmax();
        let mut header = String::from("r");
        for j in 0..=jmax {
            header.push_str(&format!(",T{j}"));
        }
        for j in 0..=jmax {
            header.push_str(&format!(",Theta{j}"));
        }
        writeln!(out, "{header}")?;
        for (i, r) in self.grid.nodes().iter().enumerate() {
            let mut row = format!("{r:.16e}");
            for j in 0..=jmax {
                row.push_str(&format!(",{:.16e}", self.t[j][i]));
            }
            for j in 0..=jmax {
                row.push_str(&format!(",{:.16e}", self.theta[j][i]));
            }
            writeln!(out, "{row}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_grid;

    fn oracle_grid() -> RadialGrid {
        RadialGrid::log_uniform(1e-3, 100.0, 2048).unwrap()
    }

    /// Log-linear interpolation for probing off-lattice radii.
    fn interp(g: &RadialGrid, v: &[f64], r: f64) -> f64 {
        let i = g.index_at_or_below(r).unwrap();
        if g.nodes()[i] == r || i + 1 == g.len() {
            return v[i];
        }
        let (a, b) = (g.nodes()[i], g.nodes()[i + 1]);
        let t = (r.ln() - a.ln()) / (b.ln() - a.ln());
        v[i] * (1.0 - t) + v[i + 1] * t
    }

    #[test]
    fn stationary_profile_is_exact() {
        let g = make_grid(1e-3, 1e3, 64, 1.0).unwrap();
        assert!(stationary_residual(&g) <= 1e-12);
    }

    #[test]
    fn chain_coefficients() {
        assert_eq!(dhat_exact(1), Ratio::new(-1, 2));
        assert_eq!(dhat_exact(2), Ratio::new(1, 16));
        assert_eq!(dhat_exact(3), Ratio::new(-1, 384));
        // closed form: (-1)^j 2^(1-2j) / (j ((j-1)!)^2)
        for j in 1..=12usize {
            let mut fact = 1i128;
            for k in 1..j as i128 {
                fact *= k;
            }
            let sign = if j % 2 == 1 { -1 } else { 1 };
            let closed = Ratio::new(sign, (1i128 << (2 * j - 1)) * j as i128 * fact * fact);
            assert_eq!(dhat_exact(j), closed, "j = {j}");
        }
        assert_eq!(c_coefficient(1, 1), 2.0);
        assert_eq!(c_coefficient(2, 1), 4.0);
        assert_eq!(c_coefficient(2, 2), 8.0);
        assert_eq!(c_coefficient(3, 0), 1.0);
    }

    #[test]
    fn inverse_reproduces_reference_values() {
        // Reference values computed independently with 30-digit arithmetic.
        let g = oracle_grid();
        let table = build_tj_table(&g, 2).unwrap();
        let t1 = table.t(1);
        let t2 = table.t(2);
        assert!((interp(&g, t1, 0.1) - 0.001568271316234526).abs() < 1e-8);
        assert!((interp(&g, t1, 10.0) - (-0.70164316431413387)).abs() < 5e-7);
        assert!((t1[g.len() - 1] - (-1.8044610360621929)).abs() < 2e-6);
        assert!((interp(&g, t2, 10.0) - 5.281652874863978).abs() < 5e-5);
        assert!(
            (t2[g.len() - 1] - 1796.3580566433768).abs() < 1e-2,
            "T2(100) = {}",
            t2[g.len() - 1]
        );
    }

    #[test]
    fn chain_vanishes_at_unit_radius() {
        let g = make_grid(1e-3, 50.0, 64, 1e-1).unwrap();
        let table = build_tj_table(&g, 3).unwrap();
        let u = g.unit_index().unwrap();
        for j in 1..=3 {
            assert_eq!(table.t(j)[u], 0.0, "T_{j}(1)");
        }
    }

    #[test]
    fn theta_limits() {
        let g = oracle_grid();
        let table = build_tj_table(&g, 1).unwrap();
        // Theta_0 = -4 r^2/(1+r^2)^3 in closed form; check the stencil code.
        for (i, &r) in g.nodes().iter().enumerate().step_by(97) {
            let exact = -4.0 * r * r / (1.0 + r * r).powi(3);
            assert!(
                (table.theta(0)[i] - exact).abs() < 1e-6,
                "Theta_0({r}) = {} vs {exact}",
                table.theta(0)[i]
            );
        }
        // Theta_1 climbs toward -d_1 = 1/2 with a slow log correction.
        assert!((interp(&g, table.theta(1), 50.0) - 0.49190468156483721).abs() < 3e-6);
        assert!(
            (table.theta(1)[g.len() - 1] - 0.49706981860757282).abs() < 3e-6,
            "Theta_1(100) = {}",
            table.theta(1)[g.len() - 1]
        );
    }

    #[test]
    fn inverse_consistency_under_forward_operator() {
        // Apply the inverse, then the differential operator, and compare.
        // Linearizing m'' - m'/r + m m'/r about Q gives
        //   L g = g'' - (1 - Q) g'/r + U g,
        // and the inverse was built so that L (A0inv f) = f.
        let g = RadialGrid::log_uniform(1e-3, 100.0, 4096).unwrap();
        let f: Vec<f64> = g
            .nodes()
            .iter()
            .map(|&r| eval_profile(Profile::Psi0, r))
            .collect();
        let ginv = apply_a0_inverse(&g, &f).unwrap();
        let d1 = g.derivative(&ginv);
        let d2 = g.second_derivative(&ginv);
        let mut worst = 0.0f64;
        for (i, &r) in g.nodes().iter().enumerate() {
            if i < 8 || i + 8 >= g.len() {
                continue;
            }
            let q = eval_profile(Profile::Q, r);
            let lg = d2[i] - (1.0 - q) / r * d1[i] + eval_profile(Profile::U, r) * ginv[i];
            worst = worst.max((lg - f[i]).abs());
        }
        assert!(worst < 1e-6, "forward-inverse residual {worst:e}");
    }

    #[test]
    fn weights_agree_with_closed_forms() {
        let r = 1.7;
        let (nu, beta) = (0.3, 0.5);
        let omega_nu = weight(Weight::OmegaNu { nu, beta }, r);
        // omega_nu = nu^2 e^{-beta r^2/2} / U_nu
        let u_nu = eval_profile_scaled(Profile::U, r, nu);
        let direct = nu * nu * (-0.5 * beta * r * r).exp() / u_nu;
        assert!((omega_nu - direct).abs() < 1e-15 * direct);

        let omega0 = weight(Weight::Omega0, r);
        assert!((omega0 - 1.0 / eval_profile(Profile::U, r)).abs() < 1e-15 * omega0);

        let bar = weight(
            Weight::OmegaBar {
                nu,
                nu_tilde: 0.7,
                beta,
            },
            r,
        );
        let geo = (weight(Weight::OmegaNu { nu, beta }, r)
            * weight(
                Weight::OmegaNu {
                    nu: 0.7,
                    beta,
                },
                r,
            ))
        .sqrt();
        assert!((bar - geo).abs() < 1e-14 * bar);
    }
}
