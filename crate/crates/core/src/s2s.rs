//! The recorded local source-to-solution operator and the data-side
//! Blagovestchenskii machinery.
//!
//! `build_s2s` runs the forward solver once per basis atom and records the
//! solution trace on the observation set over `(0, 2T)`. Everything an
//! inversion routine may consult afterwards lives here: traces, their
//! J-transforms, and the pairwise identity matrix
//! `B_km = <u^{f_k}(T), u^{f_m}(T)>_g` synthesized purely from traces via
//!
//! `<u^f(T), u^h(T)>_g = c_J [ (f, J Lambda h) - (Lambda f, J h) ]`,
//!
//! `J phi(t) = int_t^{2T-t} phi(s) ds`. The bracket constant `c_J` is pinned
//! by a calibration run against the direct solver and recorded; it lands on
//! 1/2 (the d'Alembert factor that the plain bracket double counts).

use crate::error::{Error, Result};
use crate::geometry::{ConformalMetric, IndicatorSet, PeriodicGrid};
use crate::operator::SpectralDecomposition;
use crate::wave::{mode_weight_series, solve_cauchy, SourceAtom, TimeGrid};
use num_complex::Complex64;
use rayon::prelude::*;
use std::collections::HashMap;

/// Observation set X: the open node subset where sources live and traces are
/// recorded. Members whose lattice neighbours all lie in X are interior.
#[derive(Debug, Clone)]
pub struct ObservationSet {
    set: IndicatorSet,
    nodes: Vec<usize>,
    columns: HashMap<usize, usize>,
    interior: Vec<bool>,
}

impl ObservationSet {
    pub fn new(grid: &PeriodicGrid, set: IndicatorSet) -> Result<Self> {
        if set.is_empty() {
            return Err(Error::EmptySeed);
        }
        let nodes: Vec<usize> = set.iter_members().collect();
        let columns = nodes.iter().enumerate().map(|(c, &n)| (n, c)).collect();
        let interior = nodes
            .iter()
            .map(|&n| grid.neighbors(n).all(|nb| set.contains(nb)))
            .collect();
        Ok(Self { set, nodes, columns, interior })
    }

    /// Interval `[lo, hi]` of the chart (wrapping) mapped to a node set.
    pub fn from_interval(
        grid: &PeriodicGrid,
        metric: &ConformalMetric,
        lo: f64,
        hi: f64,
    ) -> Result<Self> {
        let nodes = (0..grid.node_count()).filter(|&i| {
            let x = grid.coords(i)[0];
            let span = (hi - lo).rem_euclid(grid.length(0));
            (x - lo).rem_euclid(grid.length(0)) <= span
        });
        Self::new(grid, IndicatorSet::from_nodes(grid, metric, nodes))
    }

    pub fn indicator(&self) -> &IndicatorSet {
        &self.set
    }

    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn contains(&self, node: usize) -> bool {
        self.set.contains(node)
    }

    pub fn column_of(&self, node: usize) -> Option<usize> {
        self.columns.get(&node).copied()
    }

    pub fn is_interior(&self, node: usize) -> bool {
        self.column_of(node)
            .map(|c| self.interior[c])
            .unwrap_or(false)
    }
}

/// Declared space-time cylinder `(t0, t1) x B_flat(center, radius)`.
#[derive(Debug, Clone, Copy)]
pub struct Cylinder {
    pub center: [f64; 2],
    pub radius: f64,
    pub t0: f64,
    pub t1: f64,
}

impl Cylinder {
    /// The cylinder `S_eps(x, r) = (T - (r - eps), T) x B(x, eps)` that
    /// confines time-T wave supports to `B(x, r)`.
    pub fn s_eps(center: [f64; 2], eps: f64, r: f64, t_final: f64) -> Self {
        Self { center, radius: eps, t0: (t_final - (r - eps)).max(0.0), t1: t_final }
    }

    fn contains_atom(&self, atom: &SourceAtom, grid: &PeriodicGrid) -> bool {
        let off = grid.flat_distance(atom.center, self.center);
        off + atom.radius <= self.radius + 1e-12
            && atom.t0 >= self.t0 - 1e-12
            && atom.t1 <= self.t1 + 1e-12
    }
}

/// Ordered list of source atoms with their declared cylinders.
#[derive(Debug, Clone, Default)]
pub struct SourceBasis {
    atoms: Vec<SourceAtom>,
    cylinders: Vec<Cylinder>,
}

impl SourceBasis {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, atom: SourceAtom, cylinder: Cylinder, grid: &PeriodicGrid) -> Result<()> {
        if !cylinder.contains_atom(&atom, grid) {
            return Err(Error::AtomOutsideObservation(format!(
                "atom {} escapes its cylinder",
                self.atoms.len()
            )));
        }
        self.atoms.push(atom);
        self.cylinders.push(cylinder);
        Ok(())
    }

    pub fn atoms(&self) -> &[SourceAtom] {
        &self.atoms
    }

    pub fn cylinders(&self) -> &[Cylinder] {
        &self.cylinders
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn extend_from(&mut self, other: &SourceBasis, grid: &PeriodicGrid) -> Result<()> {
        for (a, c) in other.atoms.iter().zip(&other.cylinders) {
            self.push(*a, *c, grid)?;
        }
        Ok(())
    }
}

/// Lattice density for filling a cylinder with tensor atoms.
#[derive(Debug, Clone, Copy)]
pub struct AtomLattice {
    /// time windows per 0.1 time units of cylinder extent
    pub windows_per_tenth: f64,
    /// spatial sub-centers across the cylinder ball (per axis arrangement)
    pub subcenters: usize,
    /// smallest time width of an atom; brief atoms alias on the trace grid
    pub min_width: f64,
    /// smallest spatial radius in grid cells
    pub min_radius_cells: f64,
}

impl Default for AtomLattice {
    fn default() -> Self {
        Self { windows_per_tenth: 4.0, subcenters: 2, min_width: 0.05, min_radius_cells: 5.0 }
    }
}

/// Fill `S_eps(x, r)` with separable bump atoms on a (center, time-offset)
/// lattice. Windows overlap by half a width so the time profile of the span
/// has no dead zones. Atom radii are floored at a few cells: thinner bumps
/// alias on the grid and poison the recorded pair matrix.
pub fn cylinder_atoms(
    grid: &PeriodicGrid,
    cylinder: Cylinder,
    lattice: AtomLattice,
) -> Vec<SourceAtom> {
    let extent = (cylinder.t1 - cylinder.t0).max(1e-9);
    let mut n_windows = ((extent / 0.1) * lattice.windows_per_tenth).ceil().max(1.0) as usize;
    let mut width = 2.0 * extent / (n_windows as f64 + 1.0);
    if width < lattice.min_width {
        n_windows = ((2.0 * extent / lattice.min_width).floor() as usize).saturating_sub(1).max(1);
        width = 2.0 * extent / (n_windows as f64 + 1.0);
    }
    let radius_floor = lattice.min_radius_cells * grid.max_spacing();
    let radius = (0.55 * cylinder.radius).max(radius_floor).min(cylinder.radius);
    let mut centers: Vec<[f64; 2]> = vec![cylinder.center];
    let sub = lattice.subcenters;
    let off_max = cylinder.radius - radius;
    if sub > 1 && off_max > 0.25 * grid.max_spacing() {
        for k in 1..sub {
            let f = k as f64 / (sub - 1) as f64 * 2.0 - 1.0;
            if f == 0.0 {
                continue;
            }
            let off = f * off_max;
            centers.push(grid.wrap([cylinder.center[0] + off, cylinder.center[1]]));
            if grid.dim() == 2 {
                centers.push(grid.wrap([cylinder.center[0], cylinder.center[1] + off]));
            }
        }
    }
    centers.dedup_by(|a, b| a[0] == b[0] && a[1] == b[1]);
    let mut atoms = Vec::new();
    for w in 0..n_windows {
        let t0 = cylinder.t0 + w as f64 * 0.5 * width;
        let t1 = (t0 + width).min(cylinder.t1);
        for (ci, &c) in centers.iter().enumerate() {
            let amp = Complex64::new(1.0, 0.0) * (1.0 + 0.1 * ci as f64);
            atoms.push(SourceAtom::new(c, radius, t0, t1, amp));
        }
    }
    atoms
}

/// Composite Simpson between two node indices of a uniformly sampled series;
/// an odd interval count ends with a 3/8 cell. Exact on cubics.
pub fn simpson_between(values: &[Complex64], dt: f64, a: usize, b: usize) -> Complex64 {
    debug_assert!(b >= a && b < values.len());
    let m = b - a;
    if m == 0 {
        return Complex64::new(0.0, 0.0);
    }
    if m == 1 {
        // single cell: trapezoid (only reachable through the public API)
        return 0.5 * dt * (values[a] + values[b]);
    }
    let (simpson_end, mut acc) = if m % 2 == 0 {
        (b, Complex64::new(0.0, 0.0))
    } else {
        // 3/8 rule on the last three cells
        let tail = 0.375
            * dt
            * (values[b - 3]
                + 3.0 * values[b - 2]
                + 3.0 * values[b - 1]
                + values[b]);
        (b - 3, tail)
    };
    if simpson_end > a {
        let mut s = values[a] + values[simpson_end];
        let mut k = a + 1;
        while k < simpson_end {
            s += 4.0 * values[k];
            if k + 1 < simpson_end {
                s += 2.0 * values[k + 1];
            }
            k += 2;
        }
        acc += dt / 3.0 * s;
    }
    acc
}

/// `J phi(t) = int_t^{2T-t} phi(s) ds` for a series sampled on `[0, 2T]`,
/// evaluated at the nodes of `[0, T]`. `J phi(T) = 0` identically.
pub fn apply_j(series: &[Complex64], time: TimeGrid, t_final: f64) -> Result<Vec<Complex64>> {
    if series.len() != time.steps + 1 {
        return Err(Error::GridMismatch("series length mismatch".into()));
    }
    let horizon = time.horizon();
    if t_final <= 0.0 || 2.0 * t_final > horizon + 1e-12 {
        return Err(Error::OutsideTraceHorizon { t: t_final, horizon });
    }
    let half = (t_final / time.dt).round() as usize;
    Ok((0..=half)
        .map(|k| simpson_between(series, time.dt, k, time.steps - k))
        .collect())
}

/// Simpson weight vector for the outer `(0, T)` pairing integral.
fn simpson_weights(n: usize, dt: f64) -> Vec<f64> {
    // n intervals; composite Simpson (n even by construction here), odd n
    // falls back to a 3/8 tail like `simpson_between`.
    let mut w = vec![0.0; n + 1];
    let simpson_end = if n % 2 == 0 { n } else { n - 3 };
    if simpson_end > 0 {
        w[0] += dt / 3.0;
        w[simpson_end] += dt / 3.0;
        let mut k = 1;
        while k < simpson_end {
            w[k] += 4.0 * dt / 3.0;
            if k + 1 < simpson_end {
                w[k + 1] += 2.0 * dt / 3.0;
            }
            k += 2;
        }
    }
    if n % 2 == 1 {
        for (off, c) in [(3usize, 1.0), (2, 3.0), (1, 3.0), (0, 1.0)] {
            w[n - off] += 0.375 * dt * c;
        }
    }
    w
}

/// One recorded trace: `values[k * width + c]` is the solution at time node
/// k on observation column c.
#[derive(Debug, Clone)]
pub struct Trace {
    pub width: usize,
    pub values: Vec<Complex64>,
}

impl Trace {
    pub fn row(&self, k: usize) -> &[Complex64] {
        &self.values[k * self.width..(k + 1) * self.width]
    }
}

/// The recorded source-to-solution operator on `(0, 2T) x X`.
pub struct S2SOperator {
    time: TimeGrid,
    t_final: f64,
    obs: ObservationSet,
    basis: SourceBasis,
    traces: Vec<Trace>,
    /// J-applied traces on the `[0, T]` nodes.
    j_traces: Vec<Trace>,
    /// Volume weights dV_g per grid node (the L^2 weight of the pairings).
    volume_weights: Vec<f64>,
    provenance: String,
    j_constant: f64,
    j_spread: f64,
    /// `B_km = <u^{f_k}(T), u^{f_m}(T)>_g` from traces alone.
    blago_matrix: Vec<Complex64>,
}

/// Number of time steps over `(0, 2T)`: the default trace sampling is
/// `dt = T/256`.
pub fn default_steps() -> usize {
    512
}

/// Record the source-to-solution operator for a basis of atoms.
pub fn build_s2s(
    grid: &PeriodicGrid,
    decomp: &SpectralDecomposition,
    basis: SourceBasis,
    obs: ObservationSet,
    t_final: f64,
    steps: usize,
    provenance: impl Into<String>,
) -> Result<S2SOperator> {
    if steps % 4 != 0 {
        return Err(Error::Config("trace steps must be divisible by 4".into()));
    }
    let time = TimeGrid::new(2.0 * t_final, steps);
    // every atom must live inside (0, 2T) x X
    for (k, (atom, cyl)) in basis.atoms().iter().zip(basis.cylinders()).enumerate() {
        if cyl.t0 < -1e-12 || cyl.t1 > 2.0 * t_final + 1e-12 {
            return Err(Error::AtomOutsideObservation(format!(
                "atom {k} cylinder outside (0, 2T)"
            )));
        }
        let (support, _) = atom.spatial_factor(grid);
        if support.iter().any(|&n| !obs.contains(n)) {
            return Err(Error::AtomOutsideObservation(format!("atom {k}")));
        }
    }

    let traces: Vec<Trace> = basis
        .atoms()
        .par_iter()
        .map(|atom| record_trace(grid, decomp, atom, &obs, time))
        .collect::<Result<_>>()?;

    let j_traces = traces
        .iter()
        .map(|tr| j_transform_trace(tr, time, t_final))
        .collect::<Vec<_>>();

    let mut op = S2SOperator {
        time,
        t_final,
        obs,
        basis,
        traces,
        j_traces,
        volume_weights: decomp.mass().to_vec(),
        provenance: provenance.into(),
        j_constant: 0.5,
        j_spread: 0.0,
        blago_matrix: Vec::new(),
    };
    op.calibrate_j_constant(grid, decomp)?;
    op.blago_matrix = op.compute_blago_matrix(grid);
    Ok(op)
}

fn record_trace(
    grid: &PeriodicGrid,
    decomp: &SpectralDecomposition,
    atom: &SourceAtom,
    obs: &ObservationSet,
    time: TimeGrid,
) -> Result<Trace> {
    let source = atom.source(grid, time)?;
    let n_modes = decomp.mode_count();
    let n_nodes = time.steps + 1;
    // weights[j][k]
    let weights: Vec<Vec<Complex64>> = mode_weight_series(decomp, &source);
    let width = obs.len();
    let mut values = vec![Complex64::new(0.0, 0.0); n_nodes * width];
    let modes = decomp.modes();
    for (c, &node) in obs.nodes().iter().enumerate() {
        for j in 0..n_modes {
            let phi = modes[(node, j)];
            let phi = Complex64::new(phi.re, phi.im);
            if phi.norm_sqr() == 0.0 {
                continue;
            }
            let wj = &weights[j];
            for k in 0..n_nodes {
                values[k * width + c] += phi * wj[k];
            }
        }
    }
    Ok(Trace { width, values })
}

fn j_transform_trace(trace: &Trace, time: TimeGrid, t_final: f64) -> Trace {
    let half = (t_final / time.dt).round() as usize;
    let width = trace.width;
    let mut values = vec![Complex64::new(0.0, 0.0); (half + 1) * width];
    // prefix sums over even and odd time indices per column give O(1)
    // composite Simpson for every (k, 2T-k) range
    let n = time.steps;
    for c in 0..width {
        let col = |k: usize| trace.values[k * width + c];
        let mut even = vec![Complex64::new(0.0, 0.0); n + 2];
        let mut odd = vec![Complex64::new(0.0, 0.0); n + 2];
        for k in 0..=n {
            even[k + 1] = even[k] + if k % 2 == 0 { col(k) } else { Complex64::new(0.0, 0.0) };
            odd[k + 1] = odd[k] + if k % 2 == 1 { col(k) } else { Complex64::new(0.0, 0.0) };
        }
        let sum_even = |a: usize, b: usize| even[b + 1] - even[a]; // inclusive range
        let sum_odd = |a: usize, b: usize| odd[b + 1] - odd[a];
        for k in 0..=half {
            let (a, b) = (k, n - k);
            if a == b {
                continue;
            }
            // composite Simpson over [a, b] (even interval count): weight 4 on
            // odd offsets, 2 on even interior offsets
            let (w4, w2) = if a % 2 == 0 {
                (sum_odd(a + 1, b - 1), sum_even(a + 1, b - 1))
            } else {
                (sum_even(a + 1, b - 1), sum_odd(a + 1, b - 1))
            };
            values[k * width + c] =
                time.dt / 3.0 * (col(a) + col(b) + 4.0 * w4 + 2.0 * w2);
        }
    }
    Trace { width, values }
}

impl S2SOperator {
    pub fn time(&self) -> TimeGrid {
        self.time
    }

    pub fn t_final(&self) -> f64 {
        self.t_final
    }

    pub fn observation(&self) -> &ObservationSet {
        &self.obs
    }

    pub fn basis(&self) -> &SourceBasis {
        &self.basis
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn trace(&self, atom: usize) -> &Trace {
        &self.traces[atom]
    }

    pub fn traces(&self) -> &[Trace] {
        &self.traces
    }

    /// Calibrated bracket constant and its spread across calibration atoms.
    pub fn j_calibration(&self) -> (f64, f64) {
        (self.j_constant, self.j_spread)
    }

    /// `B_km = <u^{f_k}(T), u^{f_m}(T)>_g`, synthesized from traces.
    pub fn blago_pair(&self, k: usize, m: usize) -> Complex64 {
        self.blago_matrix[k * self.basis.len() + m]
    }

    /// Blagovestchenskii inner product `<u^f(T), u^h(T)>_g` for basis-span
    /// functions given by coefficient vectors. Consults recorded traces only.
    pub fn blago_inner_product(&self, f: &[Complex64], h: &[Complex64]) -> Result<Complex64> {
        let n = self.basis.len();
        if f.len() != n || h.len() != n {
            return Err(Error::NotInBasis(format!(
                "coefficient lengths {} / {} for basis of {}",
                f.len(),
                h.len(),
                n
            )));
        }
        let mut acc = Complex64::new(0.0, 0.0);
        for k in 0..n {
            if f[k].norm_sqr() == 0.0 {
                continue;
            }
            for m in 0..n {
                if h[m].norm_sqr() == 0.0 {
                    continue;
                }
                acc += f[k] * h[m].conj() * self.blago_pair(k, m);
            }
        }
        Ok(acc)
    }

    /// `||u^f(T)||^2_g` from data.
    pub fn blago_norm_sq(&self, f: &[Complex64]) -> Result<f64> {
        Ok(self.blago_inner_product(f, f)?.re.max(0.0))
    }

    pub fn unit_coeffs(&self, atom: usize) -> Vec<Complex64> {
        let mut c = vec![Complex64::new(0.0, 0.0); self.basis.len()];
        c[atom] = Complex64::new(1.0, 0.0);
        c
    }

    /// Raw bracket `(f_k, J Lambda f_m) - (Lambda f_k, J f_m)` over
    /// `(0,T) x X` with L^2 weights `dV_g dt`.
    fn raw_bracket(&self, grid: &PeriodicGrid, metric_weights: &[f64], k: usize, m: usize) -> Complex64 {
        let half = (self.t_final / self.time.dt).round() as usize;
        let w_t = simpson_weights(half, self.time.dt);
        let atom_k = &self.basis.atoms()[k];
        let atom_m = &self.basis.atoms()[m];

        // (f_k, J Lambda f_m): f_k is analytic, J Lambda f_m recorded
        let (supp_k, vals_k) = atom_k.spatial_factor(grid);
        let jt_m = &self.j_traces[m];
        let mut term1 = Complex64::new(0.0, 0.0);
        for t_idx in 0..=half {
            let beta = atom_k.time_profile(self.time.node(t_idx));
            if beta == 0.0 {
                continue;
            }
            let row = jt_m.row(t_idx);
            let mut space = Complex64::new(0.0, 0.0);
            for (i, &node) in supp_k.iter().enumerate() {
                let c = self.obs.column_of(node).expect("atom support in X");
                space += vals_k[i] * row[c].conj() * metric_weights[node];
            }
            term1 += w_t[t_idx] * beta * space;
        }

        // (Lambda f_k, J f_m): trace recorded, J f_m analytic in time
        let (supp_m, vals_m) = atom_m.spatial_factor(grid);
        let tr_k = &self.traces[k];
        let mut term2 = Complex64::new(0.0, 0.0);
        for t_idx in 0..=half {
            let t = self.time.node(t_idx);
            let j_beta = atom_m.time_profile_integral(t, 2.0 * self.t_final - t);
            let row = tr_k.row(t_idx);
            let mut space = Complex64::new(0.0, 0.0);
            for (i, &node) in supp_m.iter().enumerate() {
                let c = self.obs.column_of(node).expect("atom support in X");
                space += row[c] * (vals_m[i] * j_beta).conj() * metric_weights[node];
            }
            term2 += w_t[t_idx] * space;
        }

        term1 - term2
    }

    /// Pin the bracket constant against the direct solver on the basis
    /// diagonal (the one place the builder consults the forward model). The
    /// constant must be one number across atoms.
    fn calibrate_j_constant(
        &mut self,
        grid: &PeriodicGrid,
        decomp: &SpectralDecomposition,
    ) -> Result<()> {
        let count = self.basis.len().min(6);
        let mut constants = Vec::new();
        for k in 0..count {
            let atom = &self.basis.atoms()[k];
            let source = atom.source(grid, self.time)?;
            let u = solve_cauchy(decomp, &source, self.t_final)?;
            let direct = decomp.m_inner(&u.values, &u.values).re;
            let raw = self.raw_bracket(grid, &self.volume_weights, k, k).re;
            if direct.abs() > 1e-30 && raw.abs() > 1e-30 {
                constants.push(direct / raw);
            }
        }
        if constants.is_empty() {
            return Ok(());
        }
        let mean = constants.iter().sum::<f64>() / constants.len() as f64;
        let spread = constants
            .iter()
            .map(|c| (c - mean).abs() / mean.abs())
            .fold(0.0, f64::max);
        self.j_constant = mean;
        self.j_spread = spread;
        Ok(())
    }

    fn compute_blago_matrix(&self, grid: &PeriodicGrid) -> Vec<Complex64> {
        let n = self.basis.len();
        let pairs: Vec<(usize, usize)> = (0..n)
            .flat_map(|k| (k..n).map(move |m| (k, m)))
            .collect();
        let entries: Vec<Complex64> = pairs
            .par_iter()
            .map(|&(k, m)| {
                self.j_constant * self.raw_bracket(grid, &self.volume_weights, k, m)
            })
            .collect();
        let mut b = vec![Complex64::new(0.0, 0.0); n * n];
        for (&(k, m), &val) in pairs.iter().zip(&entries) {
            b[k * n + m] = val;
            b[m * n + k] = val.conj();
        }
        b
    }
}

// ---------------------------------------------------------------------------
// archive persistence
// ---------------------------------------------------------------------------

mod archive {
    use super::*;
    use serde::{Deserialize, Serialize};
    use std::fs;
    use std::io::Write;
    use std::path::Path;

    #[derive(Serialize, Deserialize)]
    struct AtomSpec {
        center: [f64; 2],
        radius: f64,
        t0: f64,
        t1: f64,
        amp_re: f64,
        amp_im: f64,
        cyl_center: [f64; 2],
        cyl_radius: f64,
        cyl_t0: f64,
        cyl_t1: f64,
    }

    #[derive(Serialize, Deserialize)]
    struct Manifest {
        dim: usize,
        sizes: Vec<usize>,
        lengths: Vec<f64>,
        x_nodes: Vec<usize>,
        t_final: f64,
        steps: usize,
        j_constant: f64,
        j_spread: f64,
        provenance: String,
        atoms: Vec<AtomSpec>,
    }

    /// Persist the operator: `manifest.json` plus one `trace_<k>.csv` per
    /// atom with columns `t,node,re,im` (floats %.12e, LF endings).
    pub fn save_archive(op: &S2SOperator, grid: &PeriodicGrid, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let manifest = Manifest {
            dim: grid.dim(),
            sizes: (0..grid.dim()).map(|a| grid.size(a)).collect(),
            lengths: (0..grid.dim()).map(|a| grid.length(a)).collect(),
            x_nodes: op.obs.nodes().to_vec(),
            t_final: op.t_final,
            steps: op.time.steps,
            j_constant: op.j_constant,
            j_spread: op.j_spread,
            provenance: op.provenance.clone(),
            atoms: op
                .basis
                .atoms()
                .iter()
                .zip(op.basis.cylinders())
                .map(|(a, c)| AtomSpec {
                    center: a.center,
                    radius: a.radius,
                    t0: a.t0,
                    t1: a.t1,
                    amp_re: a.amplitude.re,
                    amp_im: a.amplitude.im,
                    cyl_center: c.center,
                    cyl_radius: c.radius,
                    cyl_t0: c.t0,
                    cyl_t1: c.t1,
                })
                .collect(),
        };
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Config(e.to_string()))?;
        fs::write(dir.join("manifest.json"), json)?;

        for (k, trace) in op.traces.iter().enumerate() {
            let mut out = String::from("t,node,re,im\n");
            for t_idx in 0..=op.time.steps {
                let t = op.time.node(t_idx);
                let row = trace.row(t_idx);
                for (c, &node) in op.obs.nodes().iter().enumerate() {
                    out.push_str(&format!(
                        "{:.12e},{},{:.12e},{:.12e}\n",
                        t, node, row[c].re, row[c].im
                    ));
                }
            }
            let mut file = fs::File::create(dir.join(format!("trace_{k}.csv")))?;
            file.write_all(out.as_bytes())?;
        }
        Ok(())
    }

    /// Load an archive back. The caller supplies the metric (the observer
    /// knows `g` on X); traces, J-transforms, and the pair matrix are rebuilt
    /// from the files, with the calibrated constant taken from the manifest.
    pub fn load_archive(
        dir: &Path,
        metric: &ConformalMetric,
    ) -> Result<(S2SOperator, PeriodicGrid)> {
        let text = fs::read_to_string(dir.join("manifest.json"))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        let grid = match manifest.dim {
            1 => PeriodicGrid::circle(manifest.sizes[0], manifest.lengths[0])?,
            _ => PeriodicGrid::torus(
                manifest.sizes[0],
                manifest.sizes[1],
                manifest.lengths[0],
                manifest.lengths[1],
            )?,
        };
        let obs = ObservationSet::new(
            &grid,
            IndicatorSet::from_nodes(&grid, metric, manifest.x_nodes.iter().copied()),
        )?;
        let mut basis = SourceBasis::new();
        for a in &manifest.atoms {
            basis.push(
                SourceAtom::new(
                    a.center,
                    a.radius,
                    a.t0,
                    a.t1,
                    Complex64::new(a.amp_re, a.amp_im),
                ),
                Cylinder {
                    center: a.cyl_center,
                    radius: a.cyl_radius,
                    t0: a.cyl_t0,
                    t1: a.cyl_t1,
                },
                &grid,
            )?;
        }
        let time = TimeGrid::new(2.0 * manifest.t_final, manifest.steps);
        let width = obs.len();
        let mut traces = Vec::with_capacity(basis.len());
        for k in 0..basis.len() {
            let body = fs::read_to_string(dir.join(format!("trace_{k}.csv")))?;
            let mut values = vec![Complex64::new(0.0, 0.0); (manifest.steps + 1) * width];
            for (ln, line) in body.lines().enumerate() {
                if ln == 0 {
                    continue;
                }
                let mut parts = line.split(',');
                let t: f64 = parts
                    .next()
                    .ok_or_else(|| Error::Config("short row".into()))?
                    .parse()
                    .map_err(|_| Error::Config("bad t".into()))?;
                let node: usize = parts
                    .next()
                    .ok_or_else(|| Error::Config("short row".into()))?
                    .parse()
                    .map_err(|_| Error::Config("bad node".into()))?;
                let re: f64 = parts
                    .next()
                    .ok_or_else(|| Error::Config("short row".into()))?
                    .parse()
                    .map_err(|_| Error::Config("bad re".into()))?;
                let im: f64 = parts
                    .next()
                    .ok_or_else(|| Error::Config("short row".into()))?
                    .parse()
                    .map_err(|_| Error::Config("bad im".into()))?;
                let t_idx = (t / time.dt).round() as usize;
                let c = obs
                    .column_of(node)
                    .ok_or_else(|| Error::Config("trace node outside X".into()))?;
                values[t_idx * width + c] = Complex64::new(re, im);
            }
            traces.push(Trace { width, values });
        }
        let j_traces = traces
            .iter()
            .map(|tr| j_transform_trace(tr, time, manifest.t_final))
            .collect();
        let mut op = S2SOperator {
            time,
            t_final: manifest.t_final,
            obs,
            basis,
            traces,
            j_traces,
            volume_weights: metric.volume_weights().to_vec(),
            provenance: manifest.provenance,
            j_constant: manifest.j_constant,
            j_spread: manifest.j_spread,
            blago_matrix: Vec::new(),
        };
        op.blago_matrix = op.compute_blago_matrix(&grid);
        Ok((op, grid))
    }
}

pub use archive::{load_archive, save_archive};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{ConformalMetric, CovectorField, PeriodicGrid, ScalarPotential};
    use crate::operator::{assemble_operator, eigendecompose, gauge_conjugate};
    use faer::complex_native::c64;
    use faer::{Mat, Side};

    const PI: f64 = std::f64::consts::PI;

    struct Lab {
        grid: PeriodicGrid,
        metric: ConformalMetric,
        decomp: SpectralDecomposition,
        obs: ObservationSet,
    }

    /// Flat circle with observation interval [0.05, 0.55].
    fn circle_lab(n: usize) -> Lab {
        let grid = PeriodicGrid::circle(n, 1.0).unwrap();
        let metric = ConformalMetric::uniform(&grid, 1.0).unwrap();
        let disc = assemble_operator(
            &grid,
            &metric,
            &CovectorField::zero(&grid),
            &ScalarPotential::zero(&grid),
        )
        .unwrap();
        let decomp = eigendecompose(&disc).unwrap();
        let obs = ObservationSet::from_interval(&grid, &metric, 0.05, 0.55).unwrap();
        Lab { grid, metric, decomp, obs }
    }

    fn small_basis(grid: &PeriodicGrid, t_final: f64) -> SourceBasis {
        let mut basis = SourceBasis::new();
        let windows = [(0.02, 0.14), (0.16, 0.30), (0.05, 0.25)];
        let centers = [0.15, 0.3, 0.45];
        for (k, (&c, &(a, b))) in centers.iter().zip(windows.iter()).enumerate() {
            let atom = SourceAtom::new(
                [c, 0.0],
                0.04,
                a,
                b,
                Complex64::new(1.0, 0.2 * k as f64),
            );
            let cyl = Cylinder { center: [c, 0.0], radius: 0.05, t0: 0.0, t1: 2.0 * t_final };
            basis.push(atom, cyl, grid).unwrap();
        }
        basis
    }

    #[test]
    fn apply_j_exact_on_low_order() {
        let t_final = 0.4;
        let time = TimeGrid::new(2.0 * t_final, 256);
        // constant: J phi (t) = 2T - 2t
        let ones = vec![Complex64::new(1.0, 0.0); 257];
        let j1 = apply_j(&ones, time, t_final).unwrap();
        for (k, v) in j1.iter().enumerate() {
            let t = time.node(k);
            assert!((v.re - (2.0 * t_final - 2.0 * t)).abs() < 1e-13);
        }
        // linear: J phi (t) = 2T^2 - 2T t
        let lin: Vec<Complex64> = (0..=256)
            .map(|k| Complex64::new(time.node(k), 0.0))
            .collect();
        let jl = apply_j(&lin, time, t_final).unwrap();
        for (k, v) in jl.iter().enumerate() {
            let t = time.node(k);
            let want = 2.0 * t_final * t_final - 2.0 * t_final * t;
            assert!((v.re - want).abs() < 1e-13, "t {t}: {} vs {want}", v.re);
        }
        // odd about s = T: J phi == 0
        let odd: Vec<Complex64> = (0..=256)
            .map(|k| Complex64::new((PI * (time.node(k) - t_final) / t_final).sin(), 0.0))
            .collect();
        let jo = apply_j(&odd, time, t_final).unwrap();
        for v in &jo {
            assert!(v.norm() < 1e-14);
        }
        // J phi(T) = 0 identically
        assert_eq!(j1.last().unwrap().norm(), 0.0);
    }

    #[test]
    fn zero_atom_gives_zero_trace() {
        let lab = circle_lab(96);
        let t_final = 0.3;
        let mut basis = SourceBasis::new();
        basis
            .push(
                SourceAtom::new([0.2, 0.0], 0.04, 0.02, 0.1, Complex64::new(0.0, 0.0)),
                Cylinder { center: [0.2, 0.0], radius: 0.05, t0: 0.0, t1: 0.6 },
                &lab.grid,
            )
            .unwrap();
        let op = build_s2s(&lab.grid, &lab.decomp, basis, lab.obs.clone(), t_final, 64, "zero")
            .unwrap();
        assert!(op.trace(0).values.iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn trace_matches_restricted_solve() {
        let lab = circle_lab(96);
        let t_final = 0.3;
        let basis = small_basis(&lab.grid, t_final);
        let op = build_s2s(
            &lab.grid,
            &lab.decomp,
            basis.clone(),
            lab.obs.clone(),
            t_final,
            128,
            "test",
        )
        .unwrap();
        let atom = &basis.atoms()[1];
        let src = atom.source(&lab.grid, op.time()).unwrap();
        for t_idx in [13usize, 64, 100] {
            let u = solve_cauchy(&lab.decomp, &src, op.time().node(t_idx)).unwrap();
            let row = op.trace(1).row(t_idx);
            let scale: f64 = u.values.iter().map(|z| z.norm()).fold(0.0, f64::max);
            for (c, &node) in op.observation().nodes().iter().enumerate() {
                assert!(
                    (u.values[node] - row[c]).norm() <= 1e-12 * (1.0 + scale),
                    "t_idx {t_idx}, node {node}"
                );
            }
        }
    }

    #[test]
    fn atom_outside_observation_is_rejected() {
        let lab = circle_lab(96);
        let mut basis = SourceBasis::new();
        // center far outside [0.05, 0.55]
        basis
            .push(
                SourceAtom::new([0.8, 0.0], 0.04, 0.02, 0.1, Complex64::new(1.0, 0.0)),
                Cylinder { center: [0.8, 0.0], radius: 0.05, t0: 0.0, t1: 0.6 },
                &lab.grid,
            )
            .unwrap();
        let err = build_s2s(&lab.grid, &lab.decomp, basis, lab.obs.clone(), 0.3, 64, "bad");
        assert!(matches!(err, Err(Error::AtomOutsideObservation(_))));
    }

    #[test]
    fn blago_matches_direct_oracle_and_calibration_is_half() {
        let lab = circle_lab(128);
        let t_final = 0.4;
        let basis = small_basis(&lab.grid, t_final);
        let op = build_s2s(
            &lab.grid,
            &lab.decomp,
            basis.clone(),
            lab.obs.clone(),
            t_final,
            512,
            "calib",
        )
        .unwrap();
        let (c_j, spread) = op.j_calibration();
        assert!(
            (c_j - 0.5).abs() <= 1e-4,
            "bracket constant {c_j} (spread {spread})"
        );
        assert!(spread <= 1e-6, "calibration spread {spread}");

        // off-diagonal pairs against the direct solver
        let mut waves = Vec::new();
        for atom in basis.atoms() {
            let src = atom.source(&lab.grid, op.time()).unwrap();
            waves.push(solve_cauchy(&lab.decomp, &src, t_final).unwrap());
        }
        for k in 0..basis.len() {
            for m in 0..basis.len() {
                let direct = lab.decomp.m_inner(&waves[k].values, &waves[m].values);
                let data = op.blago_pair(k, m);
                assert!(
                    (direct - data).norm() <= 1e-4 * (1.0 + direct.norm()),
                    "pair ({k},{m}): {data} vs {direct}"
                );
            }
        }
    }

    #[test]
    fn blago_is_conjugate_symmetric_and_psd() {
        let lab = circle_lab(96);
        let t_final = 0.35;
        let basis = small_basis(&lab.grid, t_final);
        let n = basis.len();
        let op = build_s2s(&lab.grid, &lab.decomp, basis, lab.obs.clone(), t_final, 256, "psd")
            .unwrap();
        let f = vec![
            Complex64::new(0.3, -1.0),
            Complex64::new(0.0, 0.4),
            Complex64::new(1.0, 0.0),
        ];
        let h = vec![
            Complex64::new(-0.2, 0.1),
            Complex64::new(0.9, 0.0),
            Complex64::new(0.0, -0.7),
        ];
        let fh = op.blago_inner_product(&f, &h).unwrap();
        let hf = op.blago_inner_product(&h, &f).unwrap();
        assert!((fh - hf.conj()).norm() <= 1e-10 * (1.0 + fh.norm()));

        // PSD up to 1e-8 * trace
        let mut mat = Mat::<c64>::zeros(n, n);
        let mut trace = 0.0;
        for k in 0..n {
            for m in 0..n {
                let z = op.blago_pair(k, m);
                mat[(k, m)] = c64::new(z.re, z.im);
            }
            trace += op.blago_pair(k, k).re;
        }
        let evd = mat.selfadjoint_eigendecomposition(Side::Lower);
        for j in 0..n {
            let ev = evd.s().column_vector().read(j).re;
            assert!(ev >= -1e-8 * trace, "eigenvalue {ev}, trace {trace}");
        }
    }

    #[test]
    fn traces_are_gauge_invariant() {
        let grid = PeriodicGrid::circle(96, 1.0).unwrap();
        let metric = ConformalMetric::uniform(&grid, 1.0).unwrap();
        let obs = ObservationSet::from_interval(&grid, &metric, 0.05, 0.55).unwrap();
        let mut a = CovectorField::zero(&grid);
        for (i, x) in a.component_mut(0).iter_mut().enumerate() {
            *x = 0.6 * (2.0 * PI * i as f64 / 96.0).sin();
        }
        let v = ScalarPotential::new(
            &grid,
            (0..96).map(|i| (4.0 * PI * i as f64 / 96.0).cos()).collect(),
        )
        .unwrap();
        // theta supported away from X = [0.05, 0.55]
        let theta: Vec<f64> = (0..96)
            .map(|i| {
                let x = i as f64 / 96.0;
                if x > 0.65 && x < 0.95 {
                    let s = (x - 0.8) / 0.15;
                    0.8 * (1.0 - s * s).powi(2)
                } else {
                    0.0
                }
            })
            .collect();
        let a2 = gauge_conjugate(&grid, &a, &theta).unwrap();

        let t_final = 0.3;
        let basis = small_basis(&grid, t_final);
        let mut ops = Vec::new();
        for field in [&a, &a2] {
            let disc = assemble_operator(&grid, &metric, field, &v).unwrap();
            let decomp = eigendecompose(&disc).unwrap();
            ops.push(
                build_s2s(&grid, &decomp, basis.clone(), obs.clone(), t_final, 256, "gauge")
                    .unwrap(),
            );
        }
        for k in 0..basis.len() {
            let t1 = op_scale(&ops[0].trace(k).values);
            for (z1, z2) in ops[0].trace(k).values.iter().zip(&ops[1].trace(k).values) {
                assert!((z1 - z2).norm() <= 1e-9 * (1.0 + t1), "atom {k}");
            }
        }
    }

    fn op_scale(values: &[Complex64]) -> f64 {
        values.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    #[test]
    fn archive_round_trip() {
        let lab = circle_lab(96);
        let t_final = 0.3;
        let basis = small_basis(&lab.grid, t_final);
        let op = build_s2s(
            &lab.grid,
            &lab.decomp,
            basis,
            lab.obs.clone(),
            t_final,
            128,
            "roundtrip",
        )
        .unwrap();
        let dir = std::env::temp_dir().join(format!("s2s_archive_{}", std::process::id()));
        save_archive(&op, &lab.grid, &dir).unwrap();
        let (loaded, grid2) = load_archive(&dir, &lab.metric).unwrap();
        assert_eq!(grid2.node_count(), lab.grid.node_count());
        assert_eq!(loaded.provenance(), "roundtrip");
        for k in 0..op.basis().len() {
            for (a, b) in op.trace(k).values.iter().zip(&loaded.trace(k).values) {
                assert!((a - b).norm() <= 1e-11 * (1.0 + a.norm()));
            }
            for m in 0..op.basis().len() {
                let d = (op.blago_pair(k, m) - loaded.blago_pair(k, m)).norm();
                assert!(d <= 1e-9 * (1.0 + op.blago_pair(k, m).norm()));
            }
        }
        std::fs::remove_dir_all(&dir).ok();
    }
}
