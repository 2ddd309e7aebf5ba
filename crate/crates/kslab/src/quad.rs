//! Quadrature on radial grids.
//!
//! Everything is composite trapezoid **in r** (not in the log coordinate):
//! several kernel integrands reduce to low-degree polynomials in `r`, and the
//! trapezoid rule integrates those exactly node-to-node regardless of the
//! geometric spacing. Integrals that start at the origin get a closed-form
//! head correction below the first node, using the known vanishing order of
//! the integrand there.

use crate::error::{param, Result};
use crate::grid::RadialGrid;

/// Behaviour of an integrand at the origin, used to close `[0, r_0]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HeadRule {
    /// No head correction; integrate from the first node only.
    None,
    /// Integrand behaves like `c r^p` near 0: head is `f_0 r_0 / (p + 1)`.
    Power(f64),
}

fn head_value(grid: &RadialGrid, f: &[f64], head: HeadRule) -> f64 {
    match head {
        HeadRule::None => 0.0,
        HeadRule::Power(p) => f[0] * grid.first() / (p + 1.0),
    }
}

/// Composite trapezoid over the full grid (no head correction).
pub fn trapezoid(grid: &RadialGrid, f: &[f64]) -> f64 {
    assert_eq!(f.len(), grid.len());
    let x = grid.nodes();
    let mut s = 0.0;
    for i in 0..x.len() - 1 {
        s += 0.5 * (f[i] + f[i + 1]) * (x[i + 1] - x[i]);
    }
    s
}

/// `∫_0^{r_max} f dr` with the origin closed by `head`.
pub fn integrate_from_zero(grid: &RadialGrid, f: &[f64], head: HeadRule) -> f64 {
    head_value(grid, f, head) + trapezoid(grid, f)
}

/// Running integral `F_i = ∫_0^{r_i} f dr`.
pub fn cumulative_from_zero(grid: &RadialGrid, f: &[f64], head: HeadRule) -> Vec<f64> {
    assert_eq!(f.len(), grid.len());
    let x = grid.nodes();
    let mut out = vec![0.0; f.len()];
    out[0] = head_value(grid, f, head);
    for i in 0..f.len() - 1 {
        out[i + 1] = out[i] + 0.5 * (f[i] + f[i + 1]) * (x[i + 1] - x[i]);
    }
    out
}

/// Signed integrals `G_i = ∫_{r_i}^{1} f dr`, pivoting at the grid's unit
/// node (negative for nodes above 1). Errors if the grid has no node at 1.
pub fn cumulative_to_one(grid: &RadialGrid, f: &[f64]) -> Result<Vec<f64>> {
    let Some(u) = grid.unit_index() else {
        return param("cumulative_to_one requires a grid node exactly at r = 1");
    };
    let running = cumulative_from_zero(grid, f, HeadRule::None);
    let pivot = running[u];
    Ok(running.iter().map(|c| pivot - c).collect())
}

/// Weighted inner product `∫ f g w dr` by trapezoid.
pub fn inner_product(grid: &RadialGrid, f: &[f64], g: &[f64], w: &[f64]) -> f64 {
    assert_eq!(f.len(), grid.len());
    assert_eq!(g.len(), grid.len());
    assert_eq!(w.len(), grid.len());
    let prod: Vec<f64> = (0..f.len()).map(|i| f[i] * g[i] * w[i]).collect();
    trapezoid(grid, &prod)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_grid;

    // T0^2 w0, with w0 = (1+r^2)^2/(8r), collapses to r^3/(8(1+r^2)^2);
    // its antiderivative is [ln(1+r^2) + 1/(1+r^2)]/16.
    fn t0_sq_w0_exact(r: f64) -> f64 {
        ((1.0 + r * r).ln() + 1.0 / (1.0 + r * r)) / 16.0
    }

    #[test]
    fn trapezoid_exact_on_linear_integrand() {
        // T0 * w0 = r/8 exactly, so the trapezoid sum must match the closed
        // form to rounding, independent of grading.
        let g = make_grid(1e-3, 50.0, 16, 1e-1).unwrap();
        let f: Vec<f64> = g.nodes().iter().map(|r| r / 8.0).collect();
        let got = trapezoid(&g, &f);
        let want = (g.last().powi(2) - g.first().powi(2)) / 16.0;
        assert!((got - want).abs() < 1e-12 * want, "{got} vs {want}");
    }

    #[test]
    fn second_order_convergence() {
        let err_at = |ppd: usize| {
            let g = make_grid(1e-3, 50.0, ppd, 1e-1).unwrap();
            let f: Vec<f64> = g
                .nodes()
                .iter()
                .map(|r| r * r * r / (8.0 * (1.0 + r * r).powi(2)))
                .collect();
            let got = integrate_from_zero(&g, &f, HeadRule::Power(3.0));
            let want = t0_sq_w0_exact(g.last()) - t0_sq_w0_exact(0.0);
            (got - want).abs()
        };
        let (e1, e2) = (err_at(64), err_at(128));
        assert!(e2 < e1 / 3.5, "errors {e1:e} -> {e2:e}");
        assert!(e2 < 5e-5);
    }

    #[test]
    fn cumulative_pivots_at_unit_node() {
        let g = make_grid(1e-3, 50.0, 32, 1e-1).unwrap();
        let f: Vec<f64> = g.nodes().iter().map(|r| 2.0 * r).collect();
        let to_one = cumulative_to_one(&g, &f).unwrap();
        let u = g.unit_index().unwrap();
        assert_eq!(to_one[u], 0.0);
        // linear integrand: trapezoid is exact, so G_i = 1 - r_i^2
        for (i, r) in g.nodes().iter().enumerate() {
            assert!((to_one[i] - (1.0 - r * r)).abs() < 1e-12 * (1.0 + r * r));
        }
    }

    #[test]
    fn head_rule_closes_origin() {
        // integrand r^3 from 0 to r0 = r0^4/4 = f0 * r0 / 4
        let g = make_grid(1e-2, 10.0, 32, 1.0).unwrap();
        let f: Vec<f64> = g.nodes().iter().map(|r| r * r * r).collect();
        let c = cumulative_from_zero(&g, &f, HeadRule::Power(3.0));
        assert!((c[0] - g.first().powi(4) / 4.0).abs() < 1e-18);
    }
}
