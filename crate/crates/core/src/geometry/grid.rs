//! Periodic grids and the per-node fields living on them.
//!
//! A grid is a uniform lattice on a flat circle (dim 1) or torus (dim 2);
//! indices wrap modulo the node count on every axis. Nodes are addressed by a
//! flat row-major index.

use crate::error::{Error, Result};
use std::hash::{Hash, Hasher};

pub const MIN_NODES_PER_AXIS: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct PeriodicGrid {
    dim: usize,
    sizes: [usize; 2],
    lengths: [f64; 2],
}

impl PeriodicGrid {
    /// Circle of circumference `length` sampled at `n` nodes.
    pub fn circle(n: usize, length: f64) -> Result<Self> {
        Self::new(1, [n, 1], [length, 1.0])
    }

    /// Flat torus with `n0 x n1` nodes and periods `l0 x l1`.
    pub fn torus(n0: usize, n1: usize, l0: f64, l1: f64) -> Result<Self> {
        Self::new(2, [n0, n1], [l0, l1])
    }

    fn new(dim: usize, sizes: [usize; 2], lengths: [f64; 2]) -> Result<Self> {
        if !(1..=2).contains(&dim) {
            return Err(Error::GridMismatch(format!("dim {dim} not in {{1,2}}")));
        }
        for axis in 0..dim {
            if sizes[axis] < MIN_NODES_PER_AXIS {
                return Err(Error::GridMismatch(format!(
                    "axis {axis} has {} nodes, minimum is {MIN_NODES_PER_AXIS}",
                    sizes[axis]
                )));
            }
            if lengths[axis] <= 0.0 {
                return Err(Error::GridMismatch(format!(
                    "axis {axis} has non-positive period {}",
                    lengths[axis]
                )));
            }
        }
        Ok(Self { dim, sizes, lengths })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn size(&self, axis: usize) -> usize {
        self.sizes[axis]
    }

    pub fn length(&self, axis: usize) -> f64 {
        self.lengths[axis]
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        self.lengths[axis] / self.sizes[axis] as f64
    }

    /// Largest spacing over the axes; the unit of the half-cell closure rule.
    pub fn max_spacing(&self) -> f64 {
        (0..self.dim).map(|a| self.spacing(a)).fold(0.0, f64::max)
    }

    pub fn node_count(&self) -> usize {
        self.sizes[..self.dim].iter().product()
    }

    pub fn index_of(&self, multi: [usize; 2]) -> usize {
        match self.dim {
            1 => multi[0] % self.sizes[0],
            _ => (multi[0] % self.sizes[0]) * self.sizes[1] + (multi[1] % self.sizes[1]),
        }
    }

    pub fn multi_of(&self, idx: usize) -> [usize; 2] {
        match self.dim {
            1 => [idx, 0],
            _ => [idx / self.sizes[1], idx % self.sizes[1]],
        }
    }

    /// Coordinates of a node in the fundamental chart `[0, L_i)`.
    pub fn coords(&self, idx: usize) -> [f64; 2] {
        let m = self.multi_of(idx);
        [
            m[0] as f64 * self.spacing(0),
            if self.dim == 2 { m[1] as f64 * self.spacing(1) } else { 0.0 },
        ]
    }

    /// Nearest node to a chart point (coordinates wrap).
    pub fn node_at(&self, point: [f64; 2]) -> usize {
        let mut m = [0usize; 2];
        for axis in 0..self.dim {
            let n = self.sizes[axis] as f64;
            let t = (point[axis] / self.spacing(axis)).round().rem_euclid(n);
            m[axis] = t as usize % self.sizes[axis];
        }
        self.index_of(m)
    }

    /// The two (1-D) or four (2-D) lattice neighbours of a node.
    pub fn neighbors(&self, idx: usize) -> impl Iterator<Item = usize> + '_ {
        let m = self.multi_of(idx);
        (0..self.dim).flat_map(move |axis| {
            let n = self.sizes[axis];
            let mut fwd = m;
            fwd[axis] = (m[axis] + 1) % n;
            let mut bwd = m;
            bwd[axis] = (m[axis] + n - 1) % n;
            [self.index_of(fwd), self.index_of(bwd)]
        })
    }

    /// Node one step forward along `axis` (the far end of the edge that
    /// carries the covector sample at `idx`).
    pub fn step(&self, idx: usize, axis: usize) -> usize {
        let mut m = self.multi_of(idx);
        m[axis] = (m[axis] + 1) % self.sizes[axis];
        self.index_of(m)
    }

    /// Shortest periodic displacement from `a` to `b`, one component per axis.
    pub fn displacement(&self, a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
        let mut d = [0.0; 2];
        for axis in 0..self.dim {
            let l = self.lengths[axis];
            let mut v = (b[axis] - a[axis]).rem_euclid(l);
            if v > 0.5 * l {
                v -= l;
            }
            d[axis] = v;
        }
        d
    }

    /// Euclidean chart distance between two points (shortest representative).
    pub fn flat_distance(&self, a: [f64; 2], b: [f64; 2]) -> f64 {
        let d = self.displacement(a, b);
        (d[0] * d[0] + d[1] * d[1]).sqrt()
    }

    /// Wrap a chart point back into the fundamental domain.
    pub fn wrap(&self, point: [f64; 2]) -> [f64; 2] {
        let mut p = point;
        for axis in 0..self.dim {
            p[axis] = p[axis].rem_euclid(self.lengths[axis]);
        }
        p
    }

    /// Flat diameter of the torus/circle (half the shortest period in 1-D,
    /// half the diagonal of the period cell in 2-D).
    pub fn flat_diameter(&self) -> f64 {
        match self.dim {
            1 => 0.5 * self.lengths[0],
            _ => 0.5 * (self.lengths[0].powi(2) + self.lengths[1].powi(2)).sqrt(),
        }
    }
}

/// Conformal factor: the metric is `g = rho^2 * (flat)`, so the volume weight
/// at a node is `rho^dim * prod(h_i)`.
#[derive(Debug, Clone)]
pub struct ConformalMetric {
    rho: Vec<f64>,
    volume_weights: Vec<f64>,
    fingerprint: u64,
}

impl ConformalMetric {
    pub fn new(grid: &PeriodicGrid, rho: Vec<f64>) -> Result<Self> {
        if rho.len() != grid.node_count() {
            return Err(Error::GridMismatch(format!(
                "rho has {} entries for {} nodes",
                rho.len(),
                grid.node_count()
            )));
        }
        if rho.iter().any(|&r| !(r > 0.0) || !r.is_finite()) {
            return Err(Error::MetricNotPositive);
        }
        let cell: f64 = (0..grid.dim()).map(|a| grid.spacing(a)).product();
        let volume_weights = rho
            .iter()
            .map(|&r| r.powi(grid.dim() as i32) * cell)
            .collect();
        let fingerprint = hash_field(&rho);
        Ok(Self { rho, volume_weights, fingerprint })
    }

    pub fn uniform(grid: &PeriodicGrid, value: f64) -> Result<Self> {
        Self::new(grid, vec![value; grid.node_count()])
    }

    pub fn rho(&self, idx: usize) -> f64 {
        self.rho[idx]
    }

    pub fn rho_values(&self) -> &[f64] {
        &self.rho
    }

    /// dV_g at a node.
    pub fn volume_weight(&self, idx: usize) -> f64 {
        self.volume_weights[idx]
    }

    pub fn volume_weights(&self) -> &[f64] {
        &self.volume_weights
    }

    /// Returns the constant value of rho if the factor is uniform within
    /// `tol` (relative),. Straight-line chart constructions require this.
    pub fn constant_value(&self, tol: f64) -> Option<f64> {
        let first = self.rho[0];
        let uniform = self
            .rho
            .iter()
            .all(|&r| (r - first).abs() <= tol * first.abs().max(1.0));
        uniform.then_some(first)
    }

    /// Content hash used as a cache key component for distance fields.
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }
}

fn hash_field(values: &[f64]) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    for v in values {
        v.to_bits().hash(&mut h);
    }
    h.finish()
}

/// Real covector field sampled at edge midpoints: `component(axis)[idx]` is
/// the value on the edge from node `idx` one step forward along `axis`.
/// Units 1/length.
#[derive(Debug, Clone)]
pub struct CovectorField {
    components: Vec<Vec<f64>>,
}

impl CovectorField {
    pub fn new(grid: &PeriodicGrid, components: Vec<Vec<f64>>) -> Result<Self> {
        if components.len() != grid.dim() {
            return Err(Error::GridMismatch(format!(
                "covector field has {} components for dim {}",
                components.len(),
                grid.dim()
            )));
        }
        for comp in &components {
            if comp.len() != grid.node_count() {
                return Err(Error::GridMismatch(
                    "covector component length mismatch".into(),
                ));
            }
        }
        Ok(Self { components })
    }

    pub fn zero(grid: &PeriodicGrid) -> Self {
        Self {
            components: vec![vec![0.0; grid.node_count()]; grid.dim()],
        }
    }

    pub fn component(&self, axis: usize) -> &[f64] {
        &self.components[axis]
    }

    pub fn component_mut(&mut self, axis: usize) -> &mut [f64] {
        &mut self.components[axis]
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }
}

/// Real scalar potential per node, units 1/length^2.
#[derive(Debug, Clone)]
pub struct ScalarPotential {
    values: Vec<f64>,
}

impl ScalarPotential {
    pub fn new(grid: &PeriodicGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.node_count() {
            return Err(Error::GridMismatch("potential length mismatch".into()));
        }
        Ok(Self { values })
    }

    pub fn zero(grid: &PeriodicGrid) -> Self {
        Self { values: vec![0.0; grid.node_count()] }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Node subset with its g-measure cached at construction.
#[derive(Debug, Clone)]
pub struct IndicatorSet {
    flags: Vec<bool>,
    measure: f64,
}

impl IndicatorSet {
    pub fn from_flags(metric: &ConformalMetric, flags: Vec<bool>) -> Self {
        let measure = flags
            .iter()
            .zip(metric.volume_weights())
            .filter(|(f, _)| **f)
            .map(|(_, w)| w)
            .sum();
        Self { flags, measure }
    }

    pub fn from_nodes(
        grid: &PeriodicGrid,
        metric: &ConformalMetric,
        nodes: impl IntoIterator<Item = usize>,
    ) -> Self {
        let mut flags = vec![false; grid.node_count()];
        for n in nodes {
            flags[n] = true;
        }
        Self::from_flags(metric, flags)
    }

    pub fn full(grid: &PeriodicGrid, metric: &ConformalMetric) -> Self {
        Self::from_flags(metric, vec![true; grid.node_count()])
    }

    /// Nodes within chart (flat) distance `radius` of `center`.
    pub fn flat_ball(
        grid: &PeriodicGrid,
        metric: &ConformalMetric,
        center: [f64; 2],
        radius: f64,
    ) -> Self {
        let flags = (0..grid.node_count())
            .map(|i| grid.flat_distance(grid.coords(i), center) <= radius)
            .collect();
        Self::from_flags(metric, flags)
    }

    pub fn contains(&self, idx: usize) -> bool {
        self.flags[idx]
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn measure(&self) -> f64 {
        self.measure
    }

    pub fn is_empty(&self) -> bool {
        !self.flags.iter().any(|&f| f)
    }

    pub fn iter_members(&self) -> impl Iterator<Item = usize> + '_ {
        self.flags
            .iter()
            .enumerate()
            .filter_map(|(i, &f)| f.then_some(i))
    }

    pub fn member_count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn is_subset_of(&self, other: &IndicatorSet) -> bool {
        self.flags
            .iter()
            .zip(&other.flags)
            .all(|(&a, &b)| !a || b)
    }

    pub fn difference(&self, other: &IndicatorSet, metric: &ConformalMetric) -> IndicatorSet {
        let flags = self
            .flags
            .iter()
            .zip(&other.flags)
            .map(|(&a, &b)| a && !b)
            .collect();
        IndicatorSet::from_flags(metric, flags)
    }

    /// Content hash used as a cache key component for distance fields.
    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.flags.hash(&mut h);
        h.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_wraps_indices() {
        let g = PeriodicGrid::torus(8, 12, 1.0, 2.0).unwrap();
        assert_eq!(g.node_count(), 96);
        assert_eq!(g.index_of([8, 12]), 0);
        let idx = g.index_of([7, 11]);
        assert_eq!(g.multi_of(idx), [7, 11]);
    }

    #[test]
    fn grid_rejects_small_axes() {
        assert!(PeriodicGrid::circle(4, 1.0).is_err());
    }

    #[test]
    fn flat_distance_shortest_representative() {
        let g = PeriodicGrid::circle(16, 1.0).unwrap();
        let d = g.flat_distance([0.1, 0.0], [0.9, 0.0]);
        assert!((d - 0.2).abs() < 1e-12);
    }

    #[test]
    fn metric_rejects_nonpositive_rho() {
        let g = PeriodicGrid::circle(8, 1.0).unwrap();
        let mut rho = vec![1.0; 8];
        rho[3] = 0.0;
        assert!(matches!(
            ConformalMetric::new(&g, rho),
            Err(Error::MetricNotPositive)
        ));
    }

    #[test]
    fn indicator_measure_zero_iff_empty() {
        let g = PeriodicGrid::circle(8, 1.0).unwrap();
        let m = ConformalMetric::uniform(&g, 1.0).unwrap();
        let empty = IndicatorSet::from_nodes(&g, &m, []);
        assert!(empty.is_empty());
        assert_eq!(empty.measure(), 0.0);
        let one = IndicatorSet::from_nodes(&g, &m, [3]);
        assert!(one.measure() > 0.0);
    }
}
