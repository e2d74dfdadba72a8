//! Distance recovery from recorded source-to-solution data: first arrivals
//! on the observation set, cut times and hidden-point distances through the
//! ball-inclusion criterion, and travel time data over a fan of hidden
//! points.

use crate::control::{atoms_in_cylinder, ball_inclusion_from_data};
use crate::error::{Error, Result};
use crate::geometry::{
    geodesic_distance_field, smoothness_gate_ok, ConformalMetric, FlatGeodesic, IndicatorSet,
    PeriodicGrid,
};
use crate::operator::SpectralDecomposition;
use crate::s2s::{build_s2s, cylinder_atoms, AtomLattice, Cylinder, ObservationSet, S2SOperator};
use crate::wave::SourceAtom;
use num_complex::Complex64;

/// Record one experiment with atom lattices at a list of sites, each filling
/// the whole `(0, T)` window inside its epsilon-ball. Scans then select atom
/// subsets by cylinder membership without re-recording.
pub fn record_scan_experiment(
    grid: &PeriodicGrid,
    decomp: &SpectralDecomposition,
    obs: &ObservationSet,
    t_final: f64,
    steps: usize,
    sites: &[([f64; 2], f64)],
    lattice: AtomLattice,
) -> Result<S2SOperator> {
    let mut basis = crate::s2s::SourceBasis::new();
    for &(center, eps) in sites {
        let cyl = Cylinder { center, radius: eps, t0: 0.0, t1: t_final };
        for atom in cylinder_atoms(grid, cyl, lattice) {
            basis.push(atom, cyl, grid)?;
        }
    }
    build_s2s(grid, decomp, basis, obs.clone(), t_final, steps, "scan")
}

fn require_ball_in_observation(
    grid: &PeriodicGrid,
    metric: &ConformalMetric,
    obs: &ObservationSet,
    center: [f64; 2],
    eps: f64,
) -> Result<()> {
    let ball = IndicatorSet::flat_ball(grid, metric, center, eps);
    if !ball.is_subset_of(obs.indicator()) {
        return Err(Error::BallOutsideObservation);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// first arrivals
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct BoundaryDistance {
    pub estimate: f64,
    pub uncertainty: f64,
    pub first_crossing: f64,
    pub probe_atom: usize,
}

/// Distance between two observation points from the earliest time a probe
/// trace exceeds `amplitude_threshold * peak` on `B(y, eps)`.
///
/// The estimate measures first crossing against the source onset and centers
/// the `2 eps` ball bracket; the uncertainty budget covers the ball radii and
/// the wavefront rise over the source window.
pub fn boundary_distance(
    s2s: &S2SOperator,
    grid: &PeriodicGrid,
    x: [f64; 2],
    y: [f64; 2],
    eps: f64,
    amplitude_threshold: f64,
) -> Result<BoundaryDistance> {
    // earliest-window probe atoms spatially inside B(x, eps)
    let mut probes: Vec<(usize, &SourceAtom)> = s2s
        .basis()
        .atoms()
        .iter()
        .enumerate()
        .filter(|(_, a)| grid.flat_distance(a.center, x) + a.radius <= eps + 1e-9)
        .collect();
    if probes.is_empty() {
        return Err(Error::NotInBasis("no probe atoms near x".into()));
    }
    probes.sort_by(|a, b| a.1.t0.partial_cmp(&b.1.t0).unwrap());
    probes.truncate(3);

    // receiver columns in B(y, eps)
    let cols: Vec<usize> = s2s
        .observation()
        .nodes()
        .iter()
        .enumerate()
        .filter(|(_, &n)| grid.flat_distance(grid.coords(n), y) <= eps)
        .map(|(c, _)| c)
        .collect();
    if cols.is_empty() {
        return Err(Error::NotInBasis("no receiver nodes near y".into()));
    }

    let time = s2s.time();
    let mut best: Option<BoundaryDistance> = None;
    for (id, atom) in probes {
        let trace = s2s.trace(id);
        let mut peak = 0.0f64;
        for k in 0..=time.steps {
            let row = trace.row(k);
            for &c in &cols {
                peak = peak.max(row[c].norm());
            }
        }
        if peak == 0.0 {
            continue;
        }
        let threshold = amplitude_threshold * peak;
        let mut crossing = None;
        'scan: for k in 0..=time.steps {
            let row = trace.row(k);
            for &c in &cols {
                if row[c].norm() >= threshold {
                    crossing = Some(time.node(k));
                    break 'scan;
                }
            }
        }
        let Some(t_cross) = crossing else { continue };
        let width = atom.t1 - atom.t0;
        let estimate = (t_cross - atom.t0 - 0.5 * width + eps).max(0.0);
        let uncertainty = 2.0 * eps + 0.5 * width + 3.0 * grid.max_spacing();
        let cand = BoundaryDistance {
            estimate,
            uncertainty,
            first_crossing: t_cross,
            probe_atom: id,
        };
        best = match best {
            Some(prev) if prev.estimate <= cand.estimate => Some(prev),
            _ => Some(cand),
        };
    }
    best.ok_or(Error::NoArrival)
}

/// Convenience: record a one-probe experiment and estimate the distance.
#[allow(clippy::too_many_arguments)]
pub fn boundary_distance_experiment(
    grid: &PeriodicGrid,
    metric: &ConformalMetric,
    decomp: &SpectralDecomposition,
    obs: &ObservationSet,
    x: [f64; 2],
    y: [f64; 2],
    eps: f64,
    amplitude_threshold: f64,
    t_final: f64,
    steps: usize,
) -> Result<BoundaryDistance> {
    require_ball_in_observation(grid, metric, obs, x, eps)?;
    require_ball_in_observation(grid, metric, obs, y, eps)?;
    let mut basis = crate::s2s::SourceBasis::new();
    let cyl = Cylinder { center: x, radius: eps, t0: 0.0, t1: t_final };
    let width = (8.0 * grid.max_spacing()).min(0.4 * t_final);
    let atom = SourceAtom::new(x, 0.55 * eps, 0.01 * t_final, 0.01 * t_final + width,
        Complex64::new(1.0, 0.0));
    basis.push(atom, cyl, grid)?;
    let s2s = build_s2s(grid, decomp, basis, obs.clone(), t_final, steps, "arrival")?;
    boundary_distance(&s2s, grid, x, y, eps, amplitude_threshold)
}

// ---------------------------------------------------------------------------
// cut time
// ---------------------------------------------------------------------------

/// Measure the scan instrument's reach deficit: cover `S_eps(c, l_p)` probes
/// by a concentric admissible cylinder `S_eps(c, l')` and find the crossing
/// `l'` of the inclusion test. In the continuum the crossing is `l_p`
/// exactly; on the grid the finite atoms fall short by a scene-independent
/// offset (faint bump edges, first-window delay) which scan estimates then
/// subtract.
pub fn measure_reach_deficit(
    s2s: &S2SOperator,
    grid: &PeriodicGrid,
    center: [f64; 2],
    eps: f64,
    theta: f64,
) -> Result<f64> {
    let h = grid.max_spacing();
    // the probe window must contain at least the last atom row
    let min_l = s2s
        .basis()
        .atoms()
        .iter()
        .filter(|a| grid.flat_distance(a.center, center) + a.radius <= eps + 1e-9)
        .map(|a| s2s.t_final() - a.t0 + eps)
        .fold(f64::INFINITY, f64::min);
    if !min_l.is_finite() {
        return Err(Error::NotInBasis("no atoms at the calibration center".into()));
    }
    let l_probe = min_l + 2.0 * h;
    let probes = atoms_in_cylinder(s2s, grid, center, eps, l_probe);
    if probes.is_empty() {
        return Err(Error::NotInBasis("no calibration probes".into()));
    }
    let mut l = (l_probe - 2.0 * eps).max(eps + h);
    while l <= l_probe + 4.0 * eps {
        let admissible = atoms_in_cylinder(s2s, grid, center, eps, l);
        if !admissible.is_empty() {
            let out = ball_inclusion_from_data(s2s, &probes, &admissible, theta, None)?;
            if out.included {
                return Ok(l - l_probe);
            }
        }
        l += h;
    }
    Err(Error::NoArrival)
}

#[derive(Debug, Clone)]
pub struct CutTimeConfig {
    pub y: [f64; 2],
    pub xi: [f64; 2],
    pub s_probe: f64,
    pub r_grid: Vec<f64>,
    pub eps: f64,
    pub theta: f64,
    pub t_final: f64,
    pub steps: usize,
    pub lattice: AtomLattice,
}

#[derive(Debug, Clone)]
pub struct CutTimeEstimate {
    /// smallest `s + r` passing the inclusion test, corrected by the
    /// instrument's measured reach deficit; None when the scan range is
    /// exhausted (the +infinity sentinel)
    pub tau: Option<f64>,
    /// per scan point: (s + r, included, worst relative residual)
    pub scan: Vec<(f64, bool, f64)>,
    /// reach deficit measured by the concentric self-calibration
    pub deficit: f64,
}

/// Cut time of the geodesic from `y` in direction `xi`, by scanning the
/// smallest `s + r` whose ball inclusion
/// `B(x, r + eps) subset closure B(y, s + r)` holds in the recorded data.
pub fn cut_time(
    grid: &PeriodicGrid,
    metric: &ConformalMetric,
    decomp: &SpectralDecomposition,
    obs: &ObservationSet,
    cfg: &CutTimeConfig,
) -> Result<CutTimeEstimate> {
    let geo = FlatGeodesic::new(metric, cfg.y, cfg.xi)?;
    // the probe segment gamma([0, s_probe]) must stay inside X
    let step = 0.5 * grid.max_spacing();
    let mut t = 0.0;
    while t <= cfg.s_probe {
        let p = geo.point_at(grid, t);
        if !obs.contains(grid.node_at(p)) {
            return Err(Error::GeodesicExitsObservation);
        }
        t += step;
    }
    let x = geo.point_at(grid, cfg.s_probe);
    require_ball_in_observation(grid, metric, obs, cfg.y, cfg.eps)?;
    require_ball_in_observation(grid, metric, obs, x, cfg.eps)?;

    let s2s = record_scan_experiment(
        grid,
        decomp,
        obs,
        cfg.t_final,
        cfg.steps,
        &[(x, cfg.eps), (cfg.y, cfg.eps)],
        cfg.lattice,
    )?;

    let deficit = measure_reach_deficit(&s2s, grid, cfg.y, cfg.eps, cfg.theta)?;

    let mut scan = Vec::new();
    let mut tau = None;
    for &r in &cfg.r_grid {
        let l_x = r + cfg.eps;
        let l_y = cfg.s_probe + r;
        if l_y + 1e-9 > cfg.t_final {
            break;
        }
        let probes = atoms_in_cylinder(&s2s, grid, x, cfg.eps, l_x);
        let admissible = atoms_in_cylinder(&s2s, grid, cfg.y, cfg.eps, l_y);
        if probes.is_empty() || admissible.is_empty() {
            scan.push((cfg.s_probe + r, false, f64::INFINITY));
            continue;
        }
        let outcome = ball_inclusion_from_data(&s2s, &probes, &admissible, cfg.theta, None)?;
        scan.push((cfg.s_probe + r, outcome.included, outcome.worst_relative));
        if outcome.included && tau.is_none() {
            tau = Some(cfg.s_probe + r - deficit);
            break;
        }
    }
    Ok(CutTimeEstimate { tau, scan, deficit })
}

// ---------------------------------------------------------------------------
// hidden distances and travel time data
// ---------------------------------------------------------------------------

/// One fan entry: the hidden point is `gamma(r)` for the geodesic from `y`
/// through `z = gamma(s_split)`.
#[derive(Debug, Clone)]
pub struct FanEntry {
    pub y: [f64; 2],
    pub z: [f64; 2],
    pub r: f64,
    pub s_split: f64,
    /// chart location of the hidden point when the scene construction knows
    /// it (used by oracles and reports, never by the data side)
    pub hidden: Option<[f64; 2]>,
}

impl FanEntry {
    /// Flat chart construction from a direction.
    pub fn from_direction(
        grid: &PeriodicGrid,
        metric: &ConformalMetric,
        y: [f64; 2],
        xi: [f64; 2],
        r: f64,
        s_split: f64,
    ) -> Result<Self> {
        let geo = FlatGeodesic::new(metric, y, xi)?;
        Ok(FanEntry {
            y,
            z: geo.point_at(grid, s_split),
            r,
            s_split,
            hidden: Some(geo.point_at(grid, r)),
        })
    }

    /// General construction from a hidden grid node: `r` is the oracle
    /// distance and `z` is found by walking the distance field's gradient
    /// flow from `y` toward `p` for a metric length `s_split`.
    pub fn from_hidden_node(
        grid: &PeriodicGrid,
        metric: &ConformalMetric,
        p: usize,
        y: [f64; 2],
        s_split: f64,
    ) -> Result<Self> {
        let seed = IndicatorSet::from_nodes(grid, metric, [p]);
        let field = geodesic_distance_field(grid, metric, &seed)?;
        let y_node = grid.node_at(y);
        if !smoothness_gate_ok(grid, &field, y_node) {
            return Err(Error::GeodesicExitsObservation);
        }
        let r = interpolate_field(grid, &field, y);
        // gradient descent toward p, accumulating metric arc length
        let mut pos = y;
        let mut travelled = 0.0;
        let h = grid.max_spacing();
        let step = 0.25 * h;
        let mut guard = 0usize;
        while travelled < s_split {
            let g = field_gradient(grid, &field, pos);
            let norm = (g[0] * g[0] + g[1] * g[1]).sqrt();
            if norm < 1e-9 {
                return Err(Error::GeodesicExitsObservation);
            }
            let rho = metric.rho(grid.node_at(pos));
            // descend the distance-to-p field at unit metric speed
            let chart_step = (step / rho).min((s_split - travelled) / rho);
            pos = grid.wrap([
                pos[0] - chart_step * g[0] / norm,
                pos[1] - chart_step * g[1] / norm,
            ]);
            travelled += chart_step * rho;
            guard += 1;
            if guard > 100_000 {
                return Err(Error::GeodesicExitsObservation);
            }
        }
        Ok(FanEntry { y, z: pos, r, s_split, hidden: Some(grid.coords(p)) })
    }
}

/// Bilinear interpolation of a nodal field at a chart point.
pub fn interpolate_field(grid: &PeriodicGrid, field: &[f64], p: [f64; 2]) -> f64 {
    match grid.dim() {
        1 => {
            let h = grid.spacing(0);
            let s = p[0] / h;
            let i0 = s.floor() as i64;
            let frac = s - i0 as f64;
            let n = grid.size(0) as i64;
            let a = field[(i0.rem_euclid(n)) as usize];
            let b = field[((i0 + 1).rem_euclid(n)) as usize];
            a * (1.0 - frac) + b * frac
        }
        _ => {
            let h0 = grid.spacing(0);
            let h1 = grid.spacing(1);
            let s0 = p[0] / h0;
            let s1 = p[1] / h1;
            let i0 = s0.floor() as i64;
            let i1 = s1.floor() as i64;
            let f0 = s0 - i0 as f64;
            let f1 = s1 - i1 as f64;
            let n0 = grid.size(0) as i64;
            let n1 = grid.size(1) as i64;
            let at = |a: i64, b: i64| {
                field[grid.index_of([
                    a.rem_euclid(n0) as usize,
                    b.rem_euclid(n1) as usize,
                ])]
            };
            at(i0, i1) * (1.0 - f0) * (1.0 - f1)
                + at(i0 + 1, i1) * f0 * (1.0 - f1)
                + at(i0, i1 + 1) * (1.0 - f0) * f1
                + at(i0 + 1, i1 + 1) * f0 * f1
        }
    }
}

/// Central-difference gradient of a nodal field at a chart point (gradient of
/// the bilinear interpolant of node-centered central differences).
fn field_gradient(grid: &PeriodicGrid, field: &[f64], p: [f64; 2]) -> [f64; 2] {
    let mut g = [0.0; 2];
    for axis in 0..grid.dim() {
        let h = grid.spacing(axis);
        let mut fwd = p;
        fwd[axis] += 0.5 * h;
        let mut bwd = p;
        bwd[axis] -= 0.5 * h;
        g[axis] = (interpolate_field(grid, field, fwd) - interpolate_field(grid, field, bwd)) / h;
    }
    g
}

#[derive(Debug, Clone)]
pub struct HiddenDistanceConfig {
    pub eps: f64,
    pub theta: f64,
    pub t_final: f64,
    pub steps: usize,
    pub lattice: AtomLattice,
    /// R-scan resolution (defaults to the grid spacing when zero)
    pub r_step: f64,
    pub r_max: f64,
}

#[derive(Debug, Clone)]
pub struct HiddenDistanceEstimate {
    pub distance: Option<f64>,
    pub uncertainty: f64,
    pub scan: Vec<(f64, bool, f64)>,
}

/// Distance from the hidden point `gamma(r)` to an observation point `x`:
/// the smallest `R` whose inclusion
/// `B(z, r - s + eps) subset closure(B(y, r) u B(x, R))` holds in the data.
pub fn hidden_distance(
    s2s: &S2SOperator,
    grid: &PeriodicGrid,
    entry: &FanEntry,
    x: [f64; 2],
    cfg: &HiddenDistanceConfig,
    tau_bound: Option<f64>,
) -> Result<HiddenDistanceEstimate> {
    if let Some(tau) = tau_bound {
        if entry.r >= tau {
            return Err(Error::BeyondCutTime { r: entry.r, tau });
        }
    }
    let probe_l = entry.r - entry.s_split + cfg.eps;
    if probe_l <= cfg.eps {
        return Err(Error::Config("s_split must be below r".into()));
    }
    let probes = atoms_in_cylinder(s2s, grid, entry.z, cfg.eps, probe_l);
    let y_admissible = atoms_in_cylinder(s2s, grid, entry.y, cfg.eps, entry.r);
    if probes.is_empty() || y_admissible.is_empty() {
        return Err(Error::NotInBasis("scan experiment lacks z/y atoms".into()));
    }
    let r_step = if cfg.r_step > 0.0 { cfg.r_step } else { grid.max_spacing() };
    let mut scan = Vec::new();
    let mut found = None;
    let mut big_r = cfg.eps + r_step;
    while big_r <= cfg.r_max {
        let x_admissible = atoms_in_cylinder(s2s, grid, x, cfg.eps, big_r);
        let mut admissible = y_admissible.clone();
        admissible.extend_from_slice(&x_admissible);
        admissible.sort_unstable();
        admissible.dedup();
        let outcome = ball_inclusion_from_data(s2s, &probes, &admissible, cfg.theta, None)?;
        scan.push((big_r, outcome.included, outcome.worst_relative));
        if outcome.included {
            found = Some(big_r);
            break;
        }
        big_r += r_step;
    }
    // the fixed-eps criterion fires at R ~ d + eps (the probe sliver extends
    // eps beyond the hidden point); subtract that first-order bias
    Ok(HiddenDistanceEstimate {
        distance: found.map(|r| (r - cfg.eps).max(0.0)),
        uncertainty: r_step + cfg.eps + 3.0 * grid.max_spacing(),
        scan,
    })
}

/// One hidden point's distance function sampled over observation points.
#[derive(Debug, Clone)]
pub struct TravelTimeSample {
    pub point: [f64; 2],
    pub distance: Option<f64>,
    pub uncertainty: f64,
    pub status: String,
}

#[derive(Debug, Clone)]
pub struct TravelTimeFunction {
    pub entry: FanEntry,
    pub samples: Vec<TravelTimeSample>,
}

impl TravelTimeFunction {
    pub fn sup_distance(&self, other: &TravelTimeFunction) -> f64 {
        self.samples
            .iter()
            .zip(&other.samples)
            .filter_map(|(a, b)| Some((a.distance? - b.distance?).abs()))
            .fold(0.0, f64::max)
    }
}

/// Recover the travel time data of a fan of hidden points over a common set
/// of observation points. One recording per fan entry serves every
/// observation point and the whole R-scan. Entries that fail return their
/// error in the per-entry slot.
#[allow(clippy::too_many_arguments)]
pub fn travel_time_data(
    grid: &PeriodicGrid,
    metric: &ConformalMetric,
    decomp: &SpectralDecomposition,
    obs: &ObservationSet,
    fan: &[FanEntry],
    obs_points: &[[f64; 2]],
    cfg: &HiddenDistanceConfig,
) -> Vec<Result<TravelTimeFunction>> {
    fan.iter()
        .map(|entry| {
            travel_time_single(grid, metric, decomp, obs, entry, obs_points, cfg)
        })
        .collect()
}

fn travel_time_single(
    grid: &PeriodicGrid,
    metric: &ConformalMetric,
    decomp: &SpectralDecomposition,
    obs: &ObservationSet,
    entry: &FanEntry,
    obs_points: &[[f64; 2]],
    cfg: &HiddenDistanceConfig,
) -> Result<TravelTimeFunction> {
    require_ball_in_observation(grid, metric, obs, entry.y, cfg.eps)?;
    require_ball_in_observation(grid, metric, obs, entry.z, cfg.eps)?;
    let mut sites = vec![(entry.z, cfg.eps), (entry.y, cfg.eps)];
    for &p in obs_points {
        require_ball_in_observation(grid, metric, obs, p, cfg.eps)?;
        sites.push((p, cfg.eps));
    }
    let s2s = record_scan_experiment(
        grid,
        decomp,
        obs,
        cfg.t_final,
        cfg.steps,
        &sites,
        cfg.lattice,
    )?;
    let samples = obs_points
        .iter()
        .map(|&x| match hidden_distance(&s2s, grid, entry, x, cfg, None) {
            Ok(est) => TravelTimeSample {
                point: x,
                distance: est.distance,
                uncertainty: est.uncertainty,
                status: if est.distance.is_some() {
                    "ok".into()
                } else {
                    "scan exhausted".into()
                },
            },
            Err(e) => TravelTimeSample {
                point: x,
                distance: None,
                uncertainty: f64::INFINITY,
                status: e.to_string(),
            },
        })
        .collect();
    Ok(TravelTimeFunction { entry: entry.clone(), samples })
}
