//! Recovery of the multiplicative gauge linking two lower-order-term
//! configurations with equal source-to-solution data.
//!
//! With equal data, time-T waves of the two models satisfy
//! `u_1^f(T, x) = kappa(x) u_2^f(T, x)` for a unit-modulus `kappa` equal to 1
//! on the observation set, and the lower order terms obey
//! `A_1 = A_2 + i kappa^{-1} d kappa`, `V_1 = V_2`. The recovery verifies
//! this mechanism: the data-equality precheck is where `Lambda_1 = Lambda_2`
//! enters, after which `kappa` is stitched from per-probe wave quotients of
//! the two forward models. (A purely data-side route exists through the
//! pointwise-product pipeline, at one crescent limit per node.)

use crate::error::{Error, Result};
use crate::geometry::{ConformalMetric, CovectorField, IndicatorSet, PeriodicGrid, ScalarPotential};
use crate::operator::{principal_branch, SpectralDecomposition};
use crate::s2s::S2SOperator;
use crate::wave::solve_cauchy;
use num_complex::Complex64;

/// One lower-order-term configuration with its spectral solver.
pub struct GaugeModel<'a> {
    pub decomp: &'a SpectralDecomposition,
    pub a: &'a CovectorField,
    pub v: &'a ScalarPotential,
}

/// Unit-modulus gauge field on a subdomain.
#[derive(Debug, Clone)]
pub struct GaugeField {
    /// recovered value per node; None outside Omega or unresolved
    pub values: Vec<Option<Complex64>>,
    /// `||kappa| - 1|` per resolved node
    pub modulus_defect: Vec<f64>,
    pub unresolved: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct GaugeReport {
    pub max_modulus_defect: f64,
    /// max |kappa - 1| over Omega intersected with X
    pub max_defect_on_observation: f64,
    /// edge-wise residual of `A_1 = A_2 - d theta` with `theta` read from
    /// phase differences of kappa
    pub max_edge_residual: f64,
    /// max |V_1 - V_2| over Omega
    pub max_potential_defect: f64,
    /// worst trace disagreement found by the precheck (must be tiny)
    pub precheck_defect: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct GaugeConfig {
    /// relative trace-equality tolerance of the precheck
    pub data_equality_tol: f64,
    /// a probe counts for a node when `|u_1(T, node)|` is at least this
    /// fraction of the probe's sup norm
    pub nonvanishing_floor: f64,
}

impl Default for GaugeConfig {
    fn default() -> Self {
        Self { data_equality_tol: 1e-6, nonvanishing_floor: 1e-3 }
    }
}

/// Worst relative trace disagreement between two recorded operators over
/// their shared basis.
pub fn trace_equality_defect(s2s1: &S2SOperator, s2s2: &S2SOperator) -> (usize, f64) {
    let mut worst = (0usize, 0.0f64);
    for k in 0..s2s1.basis().len() {
        let t1 = s2s1.trace(k);
        let t2 = s2s2.trace(k);
        let scale = t1
            .values
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max)
            .max(1e-300);
        let defect = t1
            .values
            .iter()
            .zip(&t2.values)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
            / scale;
        if defect > worst.1 {
            worst = (k, defect);
        }
    }
    worst
}

/// Recover the gauge on `omega` from two models with equal data, using the
/// probe atoms of the shared recorded basis indexed by `probes`.
#[allow(clippy::too_many_arguments)]
pub fn recover_gauge(
    grid: &PeriodicGrid,
    metric: &ConformalMetric,
    model1: &GaugeModel<'_>,
    model2: &GaugeModel<'_>,
    s2s1: &S2SOperator,
    s2s2: &S2SOperator,
    omega: &IndicatorSet,
    probes: &[usize],
    cfg: GaugeConfig,
) -> Result<(GaugeField, GaugeReport)> {
    let _ = metric;
    // data-equality precheck: this is the single place Lambda_1 = Lambda_2
    // enters the construction
    let (witness, defect) = trace_equality_defect(s2s1, s2s2);
    if defect > cfg.data_equality_tol {
        return Err(Error::ModelsDistinguishable { probe: witness, defect });
    }

    let n = grid.node_count();
    let t_final = s2s1.t_final();
    // wave pairs of both models per probe
    let mut waves = Vec::with_capacity(probes.len());
    for &p in probes {
        let atom = &s2s1.basis().atoms()[p];
        let src = atom.source(grid, s2s1.time())?;
        let u1 = solve_cauchy(model1.decomp, &src, t_final)?;
        let u2 = solve_cauchy(model2.decomp, &src, t_final)?;
        let sup = u1.values.iter().map(|z| z.norm()).fold(0.0, f64::max);
        waves.push((u1, u2, sup));
    }

    let mut values = vec![None; n];
    let mut modulus_defect = vec![0.0; n];
    let mut unresolved = Vec::new();
    for node in omega.iter_members() {
        // partition-of-unity average of per-probe quotients, weighted by the
        // probe's local energy
        let mut acc = Complex64::new(0.0, 0.0);
        let mut weight = 0.0;
        for (u1, u2, sup) in &waves {
            let v1 = u1.values[node];
            if v1.norm() < cfg.nonvanishing_floor * sup {
                continue;
            }
            let v2 = u2.values[node];
            let kappa_p = v2.conj() / v1.conj();
            let w = v1.norm_sqr();
            acc += w * kappa_p;
            weight += w;
        }
        if weight == 0.0 {
            unresolved.push(node);
            continue;
        }
        let kappa = acc / weight;
        modulus_defect[node] = (kappa.norm() - 1.0).abs();
        values[node] = Some(kappa);
    }

    // report against the models' own fields
    let mut max_mod = 0.0f64;
    for node in omega.iter_members() {
        if values[node].is_some() {
            max_mod = max_mod.max(modulus_defect[node]);
        }
    }
    let mut max_obs = 0.0f64;
    for (c, &node) in s2s1.observation().nodes().iter().enumerate() {
        let _ = c;
        if let Some(kappa) = values[node] {
            max_obs = max_obs.max((kappa - Complex64::new(1.0, 0.0)).norm());
        }
    }
    // A_1 - A_2 + d theta on edges with both endpoints resolved
    let mut max_edge = 0.0f64;
    for axis in 0..grid.dim() {
        let h = grid.spacing(axis);
        let a1 = model1.a.component(axis);
        let a2 = model2.a.component(axis);
        for p in 0..n {
            let q = grid.step(p, axis);
            let (Some(kp), Some(kq)) = (values[p], values[q]) else {
                continue;
            };
            let d_theta = principal_branch((kq * kp.conj()).arg()) / h;
            let residual = (a1[p] - a2[p] + d_theta).abs();
            max_edge = max_edge.max(residual);
        }
    }
    let mut max_v = 0.0f64;
    for node in omega.iter_members() {
        max_v = max_v.max((model1.v.values()[node] - model2.v.values()[node]).abs());
    }

    Ok((
        GaugeField { values, modulus_defect, unresolved },
        GaugeReport {
            max_modulus_defect: max_mod,
            max_defect_on_observation: max_obs,
            max_edge_residual: max_edge,
            max_potential_defect: max_v,
            precheck_defect: defect,
        },
    ))
}

/// Agreement of two recovered gauge fields on their common resolved nodes.
pub fn gauge_agreement(a: &GaugeField, b: &GaugeField) -> f64 {
    a.values
        .iter()
        .zip(&b.values)
        .filter_map(|(x, y)| Some((x.as_ref()? - y.as_ref()?).norm()))
        .fold(0.0, f64::max)
}
