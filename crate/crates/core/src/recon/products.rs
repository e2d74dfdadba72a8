//! Cut-off inner products and pointwise wave products from recorded data.
//!
//! `<1_{M(Y,s)} u^f(T), u^h(T)>` is computed by approximating the cut-off
//! wave with a control from `(T-s, T) x Y` and applying the plain identity;
//! the difference-set variant subtracts a nested control. Quotients of the
//! difference-set values over the crescent family `Z_delta` recover the
//! pointwise product `u^f(T, x0) conj(u^h(T, x0))` by Lebesgue
//! differentiation, extrapolated first-order in delta.

use crate::control::{approximate_control, ControlTarget};
use crate::error::{Error, Result};
use crate::geometry::{delta_ladder, z_delta_parts, ConformalMetric, IndicatorSet, PeriodicGrid};
use crate::operator::SpectralDecomposition;
use crate::s2s::{build_s2s, cylinder_atoms, AtomLattice, Cylinder, ObservationSet, S2SOperator};
use crate::wave::SourceAtom;
use num_complex::Complex64;

fn embed(ids: &[usize], coeffs: &[Complex64], n: usize) -> Vec<Complex64> {
    let mut full = vec![Complex64::new(0.0, 0.0); n];
    for (&id, &c) in ids.iter().zip(coeffs) {
        full[id] += c;
    }
    full
}

#[derive(Debug, Clone, Copy)]
pub struct CutoffConfig {
    pub mu: Option<f64>,
    /// abort when a control's relative residual exceeds this ceiling
    pub residual_ceiling: f64,
}

impl Default for CutoffConfig {
    fn default() -> Self {
        Self { mu: None, residual_ceiling: 0.5 }
    }
}

#[derive(Debug, Clone)]
pub struct CutoffInner {
    /// `<1_{M(Y,s)} u^f(T), u^h(T)>`
    pub plain: Complex64,
    /// `<1_{M(Yhat,shat)} 1_{M(Y,s)} u^f(T), u^h(T)>` when a second region
    /// was supplied
    pub nested: Option<Complex64>,
    /// difference-set value `<1_{M(Y,s) \ M(Yhat,shat)} u^f(T), u^h(T)>`
    pub difference: Option<Complex64>,
    pub control_residuals: Vec<f64>,
}

/// Atom ids of the recorded basis usable as controls for the region
/// `(T - depth, T) x Y`.
fn control_ids(
    s2s: &S2SOperator,
    grid: &PeriodicGrid,
    region: &IndicatorSet,
    depth: f64,
) -> Vec<usize> {
    let t_lo = s2s.t_final() - depth;
    s2s.basis()
        .atoms()
        .iter()
        .enumerate()
        .filter(|(_, a)| {
            if a.t0 < t_lo - 1e-9 {
                return false;
            }
            let (support, _) = a.spatial_factor(grid);
            !support.is_empty() && support.iter().all(|&n| region.contains(n))
        })
        .map(|(k, _)| k)
        .collect()
}

/// Data-side cut-off inner product; regions are given by their seed sets and
/// influence depths. The recorded basis must contain atoms inside each
/// control window.
#[allow(clippy::too_many_arguments)]
pub fn cutoff_inner(
    s2s: &S2SOperator,
    grid: &PeriodicGrid,
    metric: &ConformalMetric,
    f: &[Complex64],
    h: &[Complex64],
    region: &IndicatorSet,
    depth: f64,
    nested_region: Option<(&IndicatorSet, f64)>,
    cfg: CutoffConfig,
) -> Result<CutoffInner> {
    let n = s2s.basis().len();
    let ids = control_ids(s2s, grid, region, depth);
    if ids.is_empty() {
        return Err(Error::NotInBasis("no control atoms in the region window".into()));
    }
    let sol1 = approximate_control(
        s2s,
        grid,
        metric,
        ControlTarget::Cutoff { region_seed: region, depth, f },
        &ids,
        cfg.mu,
    )?;
    if sol1.relative > cfg.residual_ceiling {
        return Err(Error::ControlResidualTooLarge {
            residual: sol1.relative,
            ceiling: cfg.residual_ceiling,
        });
    }
    let c1 = embed(&sol1.atom_ids, &sol1.coefficients, n);
    let plain = s2s.blago_inner_product(&c1, h)?;
    let mut residuals = vec![sol1.relative];

    let (nested, difference) = if let Some((hat_region, hat_depth)) = nested_region {
        let hat_ids = control_ids(s2s, grid, hat_region, hat_depth);
        if hat_ids.is_empty() {
            return Err(Error::NotInBasis(
                "no control atoms in the nested region window".into(),
            ));
        }
        let sol2 = approximate_control(
            s2s,
            grid,
            metric,
            ControlTarget::Cutoff { region_seed: hat_region, depth: hat_depth, f: &c1 },
            &hat_ids,
            cfg.mu,
        )?;
        if sol2.relative > cfg.residual_ceiling {
            return Err(Error::ControlResidualTooLarge {
                residual: sol2.relative,
                ceiling: cfg.residual_ceiling,
            });
        }
        residuals.push(sol2.relative);
        let c2 = embed(&sol2.atom_ids, &sol2.coefficients, n);
        let nested_val = s2s.blago_inner_product(&c2, h)?;
        (Some(nested_val), Some(plain - nested_val))
    } else {
        (None, None)
    };

    Ok(CutoffInner { plain, nested, difference, control_residuals: residuals })
}

// ---------------------------------------------------------------------------
// pointwise products over the crescent family
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ProductConfig {
    /// observation-side anchor of the geodesic through x0
    pub y: [f64; 2],
    pub eps: f64,
    pub ladder_levels: usize,
    pub t_final: f64,
    pub steps: usize,
    pub lattice: AtomLattice,
    pub cutoff: CutoffConfig,
    /// tolerance factor for the Cauchy check of the quotient sequence
    pub cauchy_slack: f64,
}

#[derive(Debug, Clone)]
pub struct ProductEstimate {
    /// Richardson-extrapolated limit of the quotients
    pub value: Complex64,
    /// per ladder level: (delta, quotient)
    pub quotients: Vec<(f64, Complex64)>,
    pub control_residuals: Vec<f64>,
}

/// Recorded experiment for pointwise products at one hidden node: the probe
/// atoms for `f` and `h` plus control lattices in every crescent window.
pub struct ProductExperiment {
    pub s2s: S2SOperator,
    pub f_id: usize,
    pub h_id: usize,
    ladder: Vec<f64>,
    x0: usize,
}

/// Record the experiment. `f_atom` and `h_atom` are the probe sources
/// (supported in `(0, T) x X`); `x0` the hidden node.
pub fn record_product_experiment(
    grid: &PeriodicGrid,
    metric: &ConformalMetric,
    decomp: &SpectralDecomposition,
    obs: &ObservationSet,
    f_atom: SourceAtom,
    h_atom: SourceAtom,
    x0: usize,
    cfg: &ProductConfig,
) -> Result<ProductExperiment> {
    let ladder = delta_ladder(grid, metric, cfg.eps, cfg.ladder_levels);
    if ladder.len() < 2 {
        return Err(Error::Config("delta ladder too short for extrapolation".into()));
    }
    let mut basis = crate::s2s::SourceBasis::new();
    // probe atoms first
    let mut push_probe = |atom: SourceAtom| -> Result<usize> {
        let id = basis.len();
        let cyl = Cylinder {
            center: atom.center,
            radius: atom.radius + 1e-12,
            t0: 0.0,
            t1: cfg.t_final,
        };
        basis.push(atom, cyl, grid)?;
        Ok(id)
    };
    let f_id = push_probe(f_atom)?;
    let h_id = push_probe(h_atom)?;

    // control lattices: one per crescent window (outer per delta, one inner)
    let c = metric.constant_value(1e-12).ok_or(Error::CurvedChart)?;
    let h_half = 0.5 * grid.max_spacing();
    for (level, &delta) in ladder.iter().enumerate() {
        let parts = z_delta_parts(grid, metric, x0, grid.node_at(cfg.y), cfg.eps, delta, Some(obs.indicator()))?;
        let chart_radius = delta / c + h_half;
        let geo_center = crescent_center(grid, metric, cfg.y, x0, delta)?;
        let cyl = Cylinder {
            center: geo_center,
            radius: chart_radius + 1e-9,
            t0: (cfg.t_final - parts.outer_depth).max(0.0),
            t1: cfg.t_final,
        };
        for atom in cylinder_atoms(grid, cyl, cfg.lattice) {
            basis.push(atom, cyl, grid)?;
        }
        if level == 0 {
            // inner window control atoms around gamma(-eps)
            let inner_center = crescent_center(grid, metric, cfg.y, x0, cfg.eps)?;
            let inner_cyl = Cylinder {
                center: inner_center,
                radius: cfg.eps / c + h_half + 1e-9,
                t0: (cfg.t_final - parts.inner_depth).max(0.0),
                t1: cfg.t_final,
            };
            for atom in cylinder_atoms(grid, inner_cyl, cfg.lattice) {
                basis.push(atom, inner_cyl, grid)?;
            }
        }
    }
    let s2s = build_s2s(
        grid,
        decomp,
        basis,
        obs.clone(),
        cfg.t_final,
        cfg.steps,
        "pointwise-product",
    )?;
    Ok(ProductExperiment { s2s, f_id, h_id, ladder, x0 })
}

/// Chart point `gamma(-delta)` for the geodesic from y through x0.
fn crescent_center(
    grid: &PeriodicGrid,
    metric: &ConformalMetric,
    y: [f64; 2],
    x0: usize,
    delta: f64,
) -> Result<[f64; 2]> {
    let c = metric.constant_value(1e-12).ok_or(Error::CurvedChart)?;
    let py = y;
    let px = grid.coords(x0);
    let disp = grid.displacement(py, px);
    let len = (disp[0] * disp[0] + disp[1] * disp[1]).sqrt();
    if len == 0.0 {
        return Err(Error::GridMismatch("x0 equals y".into()));
    }
    let t = delta / c / len;
    Ok(grid.wrap([py[0] - t * disp[0], py[1] - t * disp[1]]))
}

/// The pointwise product `u^f(T, x0) conj(u^h(T, x0))` by Richardson
/// extrapolation of crescent quotients, entirely from recorded data.
pub fn pointwise_product(
    grid: &PeriodicGrid,
    metric: &ConformalMetric,
    obs: &ObservationSet,
    exp: &ProductExperiment,
    cfg: &ProductConfig,
) -> Result<ProductEstimate> {
    let f = exp.s2s.unit_coeffs(exp.f_id);
    let h = exp.s2s.unit_coeffs(exp.h_id);
    let mut quotients = Vec::new();
    let mut residuals = Vec::new();
    for &delta in &exp.ladder {
        let parts = z_delta_parts(
            grid,
            metric,
            exp.x0,
            grid.node_at(cfg.y),
            cfg.eps,
            delta,
            Some(obs.indicator()),
        )?;
        let measure = parts.crescent.measure();
        if measure == 0.0 {
            continue;
        }
        let inner = cutoff_inner(
            &exp.s2s,
            grid,
            metric,
            &f,
            &h,
            &parts.outer_seed,
            parts.outer_depth,
            Some((&parts.inner_seed, parts.inner_depth)),
            cfg.cutoff,
        )?;
        residuals.extend(inner.control_residuals.iter().copied());
        let num = inner.difference.expect("nested region requested");
        quotients.push((delta, num / measure));
    }
    if quotients.len() < 2 {
        return Err(Error::Config("not enough crescent levels".into()));
    }
    // Cauchy check: consecutive quotient gaps must not blow up
    let gaps: Vec<f64> = quotients
        .windows(2)
        .map(|w| (w[1].1 - w[0].1).norm())
        .collect();
    if gaps.len() >= 2 {
        let last = gaps[gaps.len() - 1];
        let prev = gaps[gaps.len() - 2];
        let scale = quotients.last().unwrap().1.norm().max(1e-300);
        if last > cfg.cauchy_slack * prev + 0.5 * scale {
            return Err(Error::QuotientNotCauchy(
                quotients.iter().map(|q| q.1.norm()).collect(),
            ));
        }
    }
    // first-order Richardson on the two smallest deltas (halving ladder)
    let (d_prev, q_prev) = quotients[quotients.len() - 2];
    let (d_last, q_last) = quotients[quotients.len() - 1];
    let factor = d_last / (d_prev - d_last);
    let value = q_last + (q_last - q_prev) * factor;
    Ok(ProductEstimate { value, quotients, control_residuals: residuals })
}
