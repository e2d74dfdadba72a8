//! Domains of influence, metric balls, measures, and the shrinking crescent
//! family used for pointwise-product recovery.
//!
//! Set closures on the grid use the half-cell rule: a node belongs to the
//! closed set when its distance value is within half a metric cell
//! (`rho * h_max / 2`) of the threshold. This makes the ball/influence
//! identities hold exactly on the lattice and keeps the rule invariant under
//! constant rescaling of the metric.

use super::fast_marching::geodesic_distance_field;
use super::grid::{ConformalMetric, IndicatorSet, PeriodicGrid};
use crate::error::{Error, Result};

/// Half-cell closure threshold at a node, in metric units.
fn half_cell(grid: &PeriodicGrid, metric: &ConformalMetric, node: usize) -> f64 {
    0.5 * grid.max_spacing() * metric.rho(node)
}

/// M(Y, s): all nodes within geodesic distance `s` of `Y`, closed by the
/// half-cell rule.
pub fn domain_of_influence(
    grid: &PeriodicGrid,
    metric: &ConformalMetric,
    seed: &IndicatorSet,
    s: f64,
) -> Result<IndicatorSet> {
    if s < 0.0 {
        return Err(Error::NegativeTime(s));
    }
    let dist = geodesic_distance_field(grid, metric, seed)?;
    Ok(influence_from_field(grid, metric, &dist, s))
}

/// Same as [`domain_of_influence`] but reusing an already computed distance
/// field from the seed.
pub fn influence_from_field(
    grid: &PeriodicGrid,
    metric: &ConformalMetric,
    dist_from_seed: &[f64],
    s: f64,
) -> IndicatorSet {
    let flags = dist_from_seed
        .iter()
        .enumerate()
        .map(|(i, &d)| d <= s + half_cell(grid, metric, i))
        .collect();
    IndicatorSet::from_flags(metric, flags)
}

/// Closed metric ball around a node, as a grid set.
pub fn metric_ball(
    grid: &PeriodicGrid,
    metric: &ConformalMetric,
    center: usize,
    radius: f64,
) -> Result<IndicatorSet> {
    let seed = IndicatorSet::from_nodes(grid, metric, [center]);
    domain_of_influence(grid, metric, &seed, radius)
}

/// Total g-measure of a node set.
pub fn set_measure(_metric: &ConformalMetric, set: &IndicatorSet) -> f64 {
    set.measure()
}

/// Central-difference smoothness gate for a sampled function: accepts the
/// node when every axis second difference satisfies |D2 f| <= 4/h. Nodes
/// adjacent to a distance-function singularity fail this.
pub fn smoothness_gate_ok(grid: &PeriodicGrid, field: &[f64], node: usize) -> bool {
    let m = grid.multi_of(node);
    for axis in 0..grid.dim() {
        let h = grid.spacing(axis);
        let sz = grid.size(axis);
        let mut fwd = m;
        fwd[axis] = (m[axis] + 1) % sz;
        let mut bwd = m;
        bwd[axis] = (m[axis] + sz - 1) % sz;
        let second = (field[grid.index_of(fwd)] - 2.0 * field[node]
            + field[grid.index_of(bwd)])
            / (h * h);
        if second.abs() > 4.0 / h {
            return false;
        }
    }
    true
}

/// The crescent family around a hidden point, built from a geodesic through
/// `y` extended backwards on the flat chart.
///
/// The crescent is `M(Y_delta, outer_depth) \ M(Y_eps, inner_depth)` with
/// `Y_delta = B(gamma(-delta), delta)`, `outer_depth = s + delta`, and the
/// inner depth pulled one cell below `s`. Shrinking the subtracted set is the
/// grid form of taking the closure of the continuum difference: the boundary
/// sphere through x0 (distance exactly s from Y_eps) stays inside the
/// crescent instead of being eaten by the half-cell closure of the inner
/// domain of influence.
#[derive(Debug, Clone)]
pub struct CrescentSets {
    pub outer_seed: IndicatorSet,
    pub outer_depth: f64,
    pub inner_seed: IndicatorSet,
    pub inner_depth: f64,
    pub crescent: IndicatorSet,
    pub s: f64,
}

/// Build the crescent Z_delta for a hidden node `x0` seen from `y`.
///
/// Requires a uniform conformal factor: backward extension of the geodesic
/// through y is a straight chart line only on flat tori.
pub fn z_delta_parts(
    grid: &PeriodicGrid,
    metric: &ConformalMetric,
    x0: usize,
    y: usize,
    eps: f64,
    delta: f64,
    observation: Option<&IndicatorSet>,
) -> Result<CrescentSets> {
    if delta <= 0.0 || delta > eps {
        return Err(Error::DeltaExceedsEps { delta, eps });
    }
    let c = metric
        .constant_value(1e-12)
        .ok_or(Error::CurvedChart)?;

    // reject y adjacent to the cut locus of x0
    let x0_seed = IndicatorSet::from_nodes(grid, metric, [x0]);
    let dist_x0 = geodesic_distance_field(grid, metric, &x0_seed)?;
    if !smoothness_gate_ok(grid, &dist_x0, y) {
        return Err(Error::GeodesicExitsObservation);
    }

    let py = grid.coords(y);
    let px = grid.coords(x0);
    let disp = grid.displacement(py, px);
    let chart_len = (disp[0] * disp[0] + disp[1] * disp[1]).sqrt();
    if chart_len == 0.0 {
        return Err(Error::GridMismatch("x0 coincides with y".into()));
    }
    let s = c * chart_len;
    let dir = [disp[0] / chart_len, disp[1] / chart_len];

    let ball = |offset: f64, radius: f64| -> IndicatorSet {
        // gamma(-offset) in metric units is offset/c back along the chart line
        let t = offset / c;
        let center = grid.wrap([py[0] - t * dir[0], py[1] - t * dir[1]]);
        let h_half = 0.5 * grid.max_spacing();
        IndicatorSet::flat_ball(grid, metric, center, radius / c + h_half)
    };

    let seed_eps = ball(eps, eps);
    if let Some(x_set) = observation {
        if !seed_eps.is_subset_of(x_set) {
            return Err(Error::BallOutsideObservation);
        }
    }
    let seed_delta = ball(delta, delta);

    let cell = c * grid.max_spacing();
    if s <= 2.0 * cell {
        return Err(Error::GridMismatch(
            "x0 closer to y than two cells; crescent degenerates".into(),
        ));
    }
    let outer_depth = s + delta;
    let inner_depth = s - 1.5 * cell;
    let outer = domain_of_influence(grid, metric, &seed_delta, outer_depth)?;
    let inner = domain_of_influence(grid, metric, &seed_eps, inner_depth)?;
    let crescent = outer.difference(&inner, metric);

    Ok(CrescentSets {
        outer_seed: seed_delta,
        outer_depth,
        inner_seed: seed_eps,
        inner_depth,
        crescent,
        s,
    })
}

/// Z_delta set; see [`z_delta_parts`].
pub fn z_delta(
    grid: &PeriodicGrid,
    metric: &ConformalMetric,
    x0: usize,
    y: usize,
    eps: f64,
    delta: f64,
    observation: Option<&IndicatorSet>,
) -> Result<IndicatorSet> {
    Ok(z_delta_parts(grid, metric, x0, y, eps, delta, observation)?.crescent)
}

/// Default shrinking ladder delta_k = eps * 2^-k, k = 0..=levels, truncated so
/// the smallest delta stays at or above one metric cell.
pub fn delta_ladder(grid: &PeriodicGrid, metric: &ConformalMetric, eps: f64, levels: usize) -> Vec<f64> {
    let floor = grid.max_spacing()
        * metric
            .constant_value(1e-12)
            .unwrap_or_else(|| metric.rho(0));
    let mut ladder = Vec::new();
    for k in 0..=levels {
        let d = eps * 0.5f64.powi(k as i32);
        if d + 1e-15 < floor && !ladder.is_empty() {
            break;
        }
        ladder.push(d);
    }
    ladder
}

/// Diameter of a node set in the metric, measured through the flat chart.
/// Used to watch the crescent chain shrink.
pub fn flat_set_diameter(grid: &PeriodicGrid, metric: &ConformalMetric, set: &IndicatorSet) -> f64 {
    let members: Vec<usize> = set.iter_members().collect();
    let c = metric
        .constant_value(1e-12)
        .unwrap_or_else(|| metric.rho(0));
    let mut diam = 0.0f64;
    for (k, &a) in members.iter().enumerate() {
        for &b in &members[k + 1..] {
            diam = diam.max(grid.flat_distance(grid.coords(a), grid.coords(b)));
        }
    }
    c * diam
}
