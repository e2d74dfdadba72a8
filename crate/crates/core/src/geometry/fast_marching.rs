//! First-order fast-marching solver for the eikonal equation |grad d| = rho
//! on periodic grids. This is the ground-truth geodesic distance oracle: the
//! conformal metric g = rho^2 * (flat) has unit-speed fronts exactly where the
//! flat-chart eikonal slowness equals rho.

use super::grid::{ConformalMetric, IndicatorSet, PeriodicGrid};
use crate::error::{Error, Result};
use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::collections::HashMap;
use std::sync::{Arc, Mutex};

#[derive(Copy, Clone, PartialEq)]
struct HeapEntry {
    dist: f64,
    node: usize,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on distance; distances are finite and non-NaN
        other
            .dist
            .partial_cmp(&self.dist)
            .unwrap_or(Ordering::Equal)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Geodesic distance from `seed` to every node, by first-order upwind fast
/// marching on the 2-neighbor (1-D) / 4-neighbor (2-D) stencil.
///
/// The field is exactly zero on seed nodes and satisfies |grad d|_g = 1 up to
/// O(h log(1/h)) away from the seed.
pub fn geodesic_distance_field(
    grid: &PeriodicGrid,
    metric: &ConformalMetric,
    seed: &IndicatorSet,
) -> Result<Vec<f64>> {
    if seed.is_empty() {
        return Err(Error::EmptySeed);
    }
    let n = grid.node_count();
    let mut dist = vec![f64::INFINITY; n];
    let mut accepted = vec![false; n];
    let mut heap = BinaryHeap::new();

    for i in seed.iter_members() {
        dist[i] = 0.0;
        heap.push(HeapEntry { dist: 0.0, node: i });
    }

    while let Some(HeapEntry { dist: d, node }) = heap.pop() {
        if accepted[node] {
            continue;
        }
        accepted[node] = true;
        debug_assert!(d <= dist[node] + 1e-15);

        let m = grid.multi_of(node);
        for axis in 0..grid.dim() {
            let sz = grid.size(axis);
            for dir in [1usize, sz - 1] {
                let mut nb = m;
                nb[axis] = (m[axis] + dir) % sz;
                let nb = grid.index_of(nb);
                if accepted[nb] {
                    continue;
                }
                let cand = local_update(grid, metric, &dist, nb);
                if cand < dist[nb] {
                    dist[nb] = cand;
                    heap.push(HeapEntry { dist: cand, node: nb });
                }
            }
        }
    }

    Ok(dist)
}

/// Solve the upwind quadratic sum_axis ((d - a_axis)/h_axis)_+^2 = rho^2 at
/// one node, using the smaller of the two neighbour values per axis.
fn local_update(
    grid: &PeriodicGrid,
    metric: &ConformalMetric,
    dist: &[f64],
    node: usize,
) -> f64 {
    let rho = metric.rho(node);
    let m = grid.multi_of(node);

    let mut upwind = [(f64::INFINITY, 1.0); 2];
    for axis in 0..grid.dim() {
        let sz = grid.size(axis);
        let mut best = f64::INFINITY;
        for dir in [1usize, sz - 1] {
            let mut nb = m;
            nb[axis] = (m[axis] + dir) % sz;
            best = best.min(dist[grid.index_of(nb)]);
        }
        upwind[axis] = (best, grid.spacing(axis));
    }

    if grid.dim() == 1 {
        let (a, h) = upwind[0];
        return a + rho * h;
    }

    let (mut a, mut ha) = upwind[0];
    let (mut b, mut hb) = upwind[1];
    if a > b {
        std::mem::swap(&mut a, &mut b);
        std::mem::swap(&mut ha, &mut hb);
    }
    if !a.is_finite() {
        return f64::INFINITY;
    }
    // one-sided candidate from the smaller neighbour only
    let one_sided = a + rho * ha;
    if one_sided <= b {
        return one_sided;
    }
    // two-sided quadratic: ((d-a)/ha)^2 + ((d-b)/hb)^2 = rho^2
    let ia = 1.0 / (ha * ha);
    let ib = 1.0 / (hb * hb);
    let p = ia + ib;
    let q = a * ia + b * ib;
    let r = a * a * ia + b * b * ib - rho * rho;
    let disc = q * q - p * r;
    if disc <= 0.0 {
        return one_sided;
    }
    let d = (q + disc.sqrt()) / p;
    if d >= b {
        d
    } else {
        one_sided
    }
}

/// Single-writer cache of distance fields keyed by (metric, seed) content.
#[derive(Default)]
pub struct DistanceCache {
    fields: Mutex<HashMap<(u64, u64), Arc<Vec<f64>>>>,
}

impl DistanceCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn field(
        &self,
        grid: &PeriodicGrid,
        metric: &ConformalMetric,
        seed: &IndicatorSet,
    ) -> Result<Arc<Vec<f64>>> {
        let key = (metric.fingerprint(), seed.fingerprint());
        if let Some(f) = self.fields.lock().unwrap().get(&key) {
            return Ok(f.clone());
        }
        let field = Arc::new(geodesic_distance_field(grid, metric, seed)?);
        self.fields
            .lock()
            .unwrap()
            .entry(key)
            .or_insert_with(|| field.clone());
        Ok(field)
    }
}
