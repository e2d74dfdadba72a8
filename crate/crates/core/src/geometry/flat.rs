//! Straight-line geodesics on flat circles/tori with a uniform conformal
//! factor, plus the lattice enumeration oracle for their cut times.

use super::grid::{ConformalMetric, PeriodicGrid};
use crate::error::{Error, Result};

/// Unit-speed straight geodesic through a chart point. `speed` converts
/// metric time to chart length: with rho = c the chart velocity is dir/c.
#[derive(Debug, Clone, Copy)]
pub struct FlatGeodesic {
    origin: [f64; 2],
    dir: [f64; 2],
    inv_rho: f64,
}

impl FlatGeodesic {
    /// Geodesic from `origin` with chart direction `dir` (normalized here),
    /// parameterized by metric arc length.
    pub fn new(metric: &ConformalMetric, origin: [f64; 2], dir: [f64; 2]) -> Result<Self> {
        let c = metric.constant_value(1e-12).ok_or(Error::CurvedChart)?;
        let norm = (dir[0] * dir[0] + dir[1] * dir[1]).sqrt();
        if norm == 0.0 {
            return Err(Error::GridMismatch("zero direction".into()));
        }
        Ok(Self {
            origin,
            dir: [dir[0] / norm, dir[1] / norm],
            inv_rho: 1.0 / c,
        })
    }

    /// Chart point at metric time `t` (may be negative: backward extension).
    pub fn point_at(&self, grid: &PeriodicGrid, t: f64) -> [f64; 2] {
        let s = t * self.inv_rho;
        grid.wrap([
            self.origin[0] + s * self.dir[0],
            self.origin[1] + s * self.dir[1],
        ])
    }

    pub fn direction(&self) -> [f64; 2] {
        self.dir
    }
}

/// Cut time of a flat-torus geodesic by lattice enumeration: the geodesic
/// stops minimizing at the first time a lattice translate w gives a shorter
/// representative, tau = min over w != 0 of |w|^2 / (2 w . xi), scaled by the
/// uniform conformal factor.
pub fn cut_time_flat_oracle(
    grid: &PeriodicGrid,
    metric: &ConformalMetric,
    dir: [f64; 2],
) -> Result<f64> {
    let c = metric.constant_value(1e-12).ok_or(Error::CurvedChart)?;
    let norm = (dir[0] * dir[0] + dir[1] * dir[1]).sqrt();
    let xi = [dir[0] / norm, dir[1] / norm];
    let l0 = grid.length(0);
    let l1 = if grid.dim() == 2 { grid.length(1) } else { 0.0 };

    let mut tau = f64::INFINITY;
    let window = 4i64;
    for k0 in -window..=window {
        let range1 = if grid.dim() == 2 { -window..=window } else { 0..=0 };
        for k1 in range1 {
            if k0 == 0 && k1 == 0 {
                continue;
            }
            let w = [k0 as f64 * l0, k1 as f64 * l1];
            let dot = w[0] * xi[0] + w[1] * xi[1];
            if dot <= 0.0 {
                continue;
            }
            let len2 = w[0] * w[0] + w[1] * w[1];
            tau = tau.min(len2 / (2.0 * dot));
        }
    }
    Ok(c * tau)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn circle_cut_time_is_half_circumference() {
        let g = PeriodicGrid::circle(64, 1.0).unwrap();
        let m = ConformalMetric::uniform(&g, 1.0).unwrap();
        let tau = cut_time_flat_oracle(&g, &m, [1.0, 0.0]).unwrap();
        assert!((tau - 0.5).abs() < 1e-12);
    }

    #[test]
    fn torus_axis_and_diagonal_cut_times() {
        let g = PeriodicGrid::torus(32, 32, 1.0, 1.0).unwrap();
        let m = ConformalMetric::uniform(&g, 1.0).unwrap();
        let axis = cut_time_flat_oracle(&g, &m, [1.0, 0.0]).unwrap();
        assert!((axis - 0.5).abs() < 1e-12);
        let diag = cut_time_flat_oracle(&g, &m, [1.0, 1.0]).unwrap();
        assert!((diag - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn conformal_constant_scales_cut_time() {
        let g = PeriodicGrid::torus(32, 32, 1.0, 1.0).unwrap();
        let m = ConformalMetric::uniform(&g, 2.5).unwrap();
        let tau = cut_time_flat_oracle(&g, &m, [1.0, 0.0]).unwrap();
        assert!((tau - 1.25).abs() < 1e-12);
    }

    #[test]
    fn geodesic_walks_the_chart() {
        let g = PeriodicGrid::torus(32, 32, 1.0, 1.0).unwrap();
        let m = ConformalMetric::uniform(&g, 2.0).unwrap();
        let geo = FlatGeodesic::new(&m, [0.1, 0.2], [1.0, 0.0]).unwrap();
        // metric time 1.0 moves chart distance 0.5
        let p = geo.point_at(&g, 1.0);
        assert!((p[0] - 0.6).abs() < 1e-12 && (p[1] - 0.2).abs() < 1e-12);
        let back = geo.point_at(&g, -0.4);
        assert!((back[0] - 0.9).abs() < 1e-12);
    }
}
