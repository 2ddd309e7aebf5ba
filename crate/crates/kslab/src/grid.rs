//! Log-graded radial meshes shared by every numerical layer.
//!
//! All operators, quadratures and PDE states in this crate live on a
//! [`RadialGrid`]: a strictly increasing set of positive radii, geometrically
//! spaced in `log r` with optional extra clustering around a concentration
//! scale. A node is placed exactly at `r = 1` whenever the range contains it,
//! because the explicit kernel inverse pivots its split integral there.

use crate::error::{param, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridKind {
    /// Geometric spacing with a locally refined cluster band.
    LogGraded,
    /// Pure geometric spacing, no cluster refinement.
    Uniform,
    /// Produced by regridding; spacing inherited from a previous grid.
    Composite,
}

#[derive(Debug, Clone)]
pub struct RadialGrid {
    nodes: Vec<f64>,
    kind: GridKind,
    cluster_scale: f64,
}

/// Builds the standard log-graded mesh.
///
/// Geometric spacing of `points_per_decade` nodes per decade over
/// `[zeta_min, zeta_max]`, doubled inside the cluster band
/// `[cluster_scale/10, 10 cluster_scale]`. Segment boundaries (including
/// `r = 1` when interior) are hit exactly.
pub fn make_grid(
    zeta_min: f64,
    zeta_max: f64,
    points_per_decade: usize,
    cluster_scale: f64,
) -> Result<RadialGrid> {
    if !(zeta_min > 0.0 && zeta_min < cluster_scale && cluster_scale < zeta_max) {
        return param(format!(
            "grid bounds must satisfy 0 < zeta_min < cluster_scale < zeta_max \
             (got {zeta_min:e}, {cluster_scale:e}, {zeta_max:e})"
        ));
    }
    if points_per_decade < 8 {
        return param("points_per_decade must be at least 8");
    }
    if zeta_min > cluster_scale / 100.0 * (1.0 + 1e-12) {
        return param(format!(
            "zeta_min = {zeta_min:e} must not exceed cluster_scale/100 = {:e}",
            cluster_scale / 100.0
        ));
    }
    let lmin = zeta_min.log10();
    let lmax = zeta_max.log10();
    let band = (cluster_scale.log10() - 1.0, cluster_scale.log10() + 1.0);

    let mut cuts = vec![lmin, lmax];
    for c in [band.0, band.1, 0.0] {
        if c > lmin && c < lmax {
            cuts.push(c);
        }
    }
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    cuts.dedup_by(|a, b| (*a - *b).abs() < 1e-12);

    let mut logs: Vec<f64> = vec![lmin];
    for seg in cuts.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let in_band = a >= band.0 - 1e-12 && b <= band.1 + 1e-12;
        let density = if in_band {
            2 * points_per_decade
        } else {
            points_per_decade
        };
        let n = (((b - a) * density as f64).ceil() as usize).max(1);
        for k in 1..=n {
            logs.push(a + (b - a) * k as f64 / n as f64);
        }
    }
    let mut nodes: Vec<f64> = logs.iter().map(|l| 10f64.powf(*l)).collect();
    // Snap the pinned points so downstream code can compare exactly.
    let n = nodes.len();
    nodes[0] = zeta_min;
    nodes[n - 1] = zeta_max;
    for (i, l) in logs.iter().enumerate() {
        if l.abs() < 1e-13 {
            nodes[i] = 1.0;
        }
    }
    let grid = RadialGrid {
        nodes,
        kind: GridKind::LogGraded,
        cluster_scale,
    };
    grid.validate()?;
    Ok(grid)
}

impl RadialGrid {
    /// Pure geometric mesh without cluster refinement (`r = 1` still pinned).
    pub fn log_uniform(r_min: f64, r_max: f64, points_per_decade: usize) -> Result<RadialGrid> {
        if !(r_min > 0.0 && r_min < r_max) {
            return param("log_uniform requires 0 < r_min < r_max");
        }
        if points_per_decade < 8 {
            return param("points_per_decade must be at least 8");
        }
        let (lmin, lmax) = (r_min.log10(), r_max.log10());
        let mut cuts = vec![lmin, lmax];
        if lmin < 0.0 && lmax > 0.0 {
            cuts.insert(1, 0.0);
        }
        let mut nodes = vec![r_min];
        for seg in cuts.windows(2) {
            let n = (((seg[1] - seg[0]) * points_per_decade as f64).ceil() as usize).max(1);
            for k in 1..=n {
                let l = seg[0] + (seg[1] - seg[0]) * k as f64 / n as f64;
                nodes.push(if l.abs() < 1e-13 { 1.0 } else { 10f64.powf(l) });
            }
        }
        *nodes.last_mut().unwrap() = r_max;
        Ok(RadialGrid {
            nodes,
            kind: GridKind::Uniform,
            cluster_scale: r_min * 100.0,
        })
    }

    /// Wraps an externally constructed node set (regridding path).
    pub fn from_nodes(nodes: Vec<f64>, cluster_scale: f64) -> Result<RadialGrid> {
        let grid = RadialGrid {
            nodes,
            kind: GridKind::Composite,
            cluster_scale,
        };
        grid.validate()?;
        Ok(grid)
    }

    fn validate(&self) -> Result<()> {
        if self.nodes.len() < 8 {
            return param("grid needs at least 8 nodes");
        }
        if self.nodes[0] <= 0.0 {
            return param("grid nodes must be positive");
        }
        for w in self.nodes.windows(2) {
            if w[1] <= w[0] {
                return param("grid nodes must be strictly increasing");
            }
        }
        Ok(())
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn kind(&self) -> GridKind {
        self.kind
    }

    pub fn cluster_scale(&self) -> f64 {
        self.cluster_scale
    }

    pub fn first(&self) -> f64 {
        self.nodes[0]
    }

    pub fn last(&self) -> f64 {
        *self.nodes.last().unwrap()
    }

    /// Index of the node equal to 1 (the pivot of the kernel inverse), if any.
    pub fn unit_index(&self) -> Option<usize> {
        self.nodes
            .binary_search_by(|x| x.partial_cmp(&1.0).unwrap())
            .ok()
    }

    /// Largest index with `nodes[i] <= r` (None if `r` is below the grid).
    pub fn index_at_or_below(&self, r: f64) -> Option<usize> {
        match self
            .nodes
            .binary_search_by(|x| x.partial_cmp(&r).unwrap())
        {
            Ok(i) => Some(i),
            Err(0) => None,
            Err(i) => Some(i - 1),
        }
    }

    /// Local spacing `nodes[i+1] - nodes[i]` clamped to the valid edge range.
    pub fn spacing_at(&self, i: usize) -> f64 {
        let i = i.min(self.nodes.len() - 2);
        self.nodes[i + 1] - self.nodes[i]
    }

    /// Cell measures of the dual (finite-volume) mesh: half the span of the
    /// two adjacent intervals, half-cells at the ends. Sums to `last - first`.
    pub fn cell_measures(&self) -> Vec<f64> {
        let n = self.nodes.len();
        let mut mu = vec![0.0; n];
        mu[0] = 0.5 * (self.nodes[1] - self.nodes[0]);
        mu[n - 1] = 0.5 * (self.nodes[n - 1] - self.nodes[n - 2]);
        for i in 1..n - 1 {
            mu[i] = 0.5 * (self.nodes[i + 1] - self.nodes[i - 1]);
        }
        mu
    }

    /// Nonuniform centred 3-point first derivative (one-sided at the ends).
    pub fn derivative(&self, f: &[f64]) -> Vec<f64> {
        assert_eq!(f.len(), self.nodes.len());
        let x = &self.nodes;
        let n = x.len();
        let mut d = vec![0.0; n];
        for i in 1..n - 1 {
            let hm = x[i] - x[i - 1];
            let hp = x[i + 1] - x[i];
            d[i] = (f[i + 1] * hm * hm - f[i - 1] * hp * hp + f[i] * (hp * hp - hm * hm))
                / (hm * hp * (hm + hp));
        }
        // 3-point one-sided stencils, 2nd order.
        let h0 = x[1] - x[0];
        let h1 = x[2] - x[1];
        d[0] = -(2.0 * h0 + h1) / (h0 * (h0 + h1)) * f[0] + (h0 + h1) / (h0 * h1) * f[1]
            - h0 / (h1 * (h0 + h1)) * f[2];
        let hm = x[n - 2] - x[n - 3];
        let hl = x[n - 1] - x[n - 2];
        d[n - 1] = hl / (hm * (hm + hl)) * f[n - 3] - (hm + hl) / (hm * hl) * f[n - 2]
            + (2.0 * hl + hm) / (hl * (hm + hl)) * f[n - 1];
        d
    }

    /// Nonuniform 3-point second derivative on interior nodes (ends copy
    /// their neighbour; callers treating boundaries specially ignore them).
    pub fn second_derivative(&self, f: &[f64]) -> Vec<f64> {
        assert_eq!(f.len(), self.nodes.len());
        let x = &self.nodes;
        let n = x.len();
        let mut d = vec![0.0; n];
        for i in 1..n - 1 {
            let hm = x[i] - x[i - 1];
            let hp = x[i + 1] - x[i];
            d[i] = 2.0 * (f[i - 1] * hp - f[i] * (hm + hp) + f[i + 1] * hm)
                / (hm * hp * (hm + hp));
        }
        d[0] = d[1];
        d[n - 1] = d[n - 2];
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_sized_grid() {
        let g = make_grid(1e-7, 10.0, 64, 1e-4).unwrap();
        assert!(g.len() >= 64 * 8, "got {} nodes", g.len());
        assert!(g.first() <= 1e-6);
        assert_eq!(g.last(), 10.0);
        assert!(g.unit_index().is_some());
        assert_eq!(g.nodes()[g.unit_index().unwrap()], 1.0);
    }

    #[test]
    fn monotone_small() {
        let g = make_grid(1e-3, 10.0, 8, 1e-1).unwrap();
        for w in g.nodes().windows(2) {
            assert!(w[1] > w[0]);
        }
    }

    #[test]
    fn rejects_inconsistent_bounds() {
        assert!(make_grid(1e-2, 10.0, 64, 1e-3).is_err());
        assert!(make_grid(1e-3, 10.0, 4, 1e-1).is_err());
        // first node must sit two decades under the cluster scale
        assert!(make_grid(5e-3, 10.0, 64, 1e-1).is_err());
    }

    #[test]
    fn derivative_is_second_order() {
        // f = r^3 on a log grid: 3-point nonuniform stencils are exact for
        // quadratics, so the cubic probes the leading error term.
        let errs: Vec<f64> = [32usize, 64]
            .iter()
            .map(|&ppd| {
                let g = RadialGrid::log_uniform(0.1, 10.0, ppd).unwrap();
                let f: Vec<f64> = g.nodes().iter().map(|r| r * r * r).collect();
                let d = g.derivative(&f);
                g.nodes()
                    .iter()
                    .zip(&d)
                    .skip(1)
                    .take(g.len() - 2)
                    .map(|(r, di)| (di - 3.0 * r * r).abs() / (3.0 * r * r))
                    .fold(0.0f64, f64::max)
            })
            .collect();
        assert!(errs[1] < errs[0] / 3.2, "errors {errs:?}");
    }

    #[test]
    fn cell_measures_partition() {
        let g = make_grid(1e-3, 50.0, 16, 1e-1).unwrap();
        let total: f64 = g.cell_measures().iter().sum();
        assert!((total - (g.last() - g.first())).abs() < 1e-12 * g.last());
    }
}
