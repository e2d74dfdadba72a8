//! Data-side quadratic-form minimization: Gram matrices built from the
//! Blagovestchenskii identity, Tikhonov-regularized approximate control, and
//! the ball-inclusion residual criterion.
//!
//! Everything here consumes recorded source-to-solution data only. A scene's
//! atoms are laid out once over the full time span; individual cylinders
//! `S_eps(x, l)` then select atom subsets, so one recording serves a whole
//! scan of radii.

use crate::error::{Error, Result};
use crate::geometry::{domain_of_influence, ConformalMetric, IndicatorSet, PeriodicGrid};
use crate::operator::SpectralDecomposition;
use crate::s2s::{build_s2s, cylinder_atoms, AtomLattice, Cylinder, ObservationSet, S2SOperator};
use crate::wave::{solve_cauchy, Wavefield};
use faer::complex_native::c64;
use faer::prelude::*;
use faer::{Mat, Side};
use num_complex::Complex64;

/// Hermitian Gram of recorded atoms, `B_km = <u^{h_k}(T), u^{h_m}(T)>_g`
/// over a selected atom subset, with the regularization used in solves.
pub struct GramMatrix {
    ids: Vec<usize>,
    entries: Mat<c64>,
    mu: f64,
    trace: f64,
}

/// Default Tikhonov weight: `1e-8 * trace(B) / dim`.
pub fn default_mu(trace: f64, dim: usize) -> f64 {
    if dim == 0 {
        0.0
    } else {
        1e-8 * trace / dim as f64
    }
}

/// Assemble the Gram over `ids`; `mu = None` picks the default weight.
pub fn assemble_gram(s2s: &S2SOperator, ids: &[usize], mu: Option<f64>) -> Result<GramMatrix> {
    let n = ids.len();
    for &k in ids {
        if k >= s2s.basis().len() {
            return Err(Error::NotInBasis(format!("atom {k}")));
        }
    }
    let mut entries = Mat::<c64>::zeros(n, n);
    let mut trace = 0.0;
    for (a, &k) in ids.iter().enumerate() {
        for (b, &m) in ids.iter().enumerate() {
            let z = s2s.blago_pair(k, m);
            entries[(a, b)] = c64::new(z.re, z.im);
        }
        trace += s2s.blago_pair(k, k).re;
    }
    let mu = mu.unwrap_or_else(|| default_mu(trace, n));
    Ok(GramMatrix { ids: ids.to_vec(), entries, mu, trace })
}

impl GramMatrix {
    pub fn dim(&self) -> usize {
        self.ids.len()
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn trace(&self) -> f64 {
        self.trace
    }

    pub fn entry(&self, a: usize, b: usize) -> Complex64 {
        let z = self.entries[(a, b)];
        Complex64::new(z.re, z.im)
    }

    /// Factor `(B + mu I)` once for repeated solves.
    pub fn factor(&self, mu: f64) -> Result<FactoredGram> {
        let n = self.dim();
        let mut reg = self.entries.clone();
        for i in 0..n {
            reg[(i, i)] += c64::new(mu, 0.0);
        }
        let chol = reg
            .cholesky(Side::Lower)
            .map_err(|_| Error::SingularNormalEquations)?;
        Ok(FactoredGram { chol, n, mu })
    }

    /// Factor with escalating regularization: quadrature noise can leave B
    /// slightly indefinite, so a requested positive `mu` below the noise
    /// floor is raised decade by decade until the factorization succeeds.
    /// `mu = 0` fails hard so the caller learns to regularize.
    pub fn factor_escalating(&self, mu: f64) -> Result<FactoredGram> {
        if mu == 0.0 {
            return self.factor(0.0);
        }
        let mut current = mu;
        let ceiling = 1e-4 * self.trace.max(1e-300);
        loop {
            match self.factor(current) {
                Ok(f) => return Ok(f),
                Err(_) if current < ceiling => current *= 10.0,
                Err(e) => return Err(e),
            }
        }
    }

    /// Solve `(B + mu I) c = rhs`.
    pub fn solve(&self, rhs: &[Complex64], mu: f64) -> Result<Vec<Complex64>> {
        Ok(self.factor(mu)?.solve(rhs))
    }

    /// Quadratic form `c^H B c` (real for Hermitian B).
    pub fn quad_form(&self, c: &[Complex64]) -> f64 {
        let n = self.dim();
        let mut acc = Complex64::new(0.0, 0.0);
        for a in 0..n {
            for b in 0..n {
                acc += c[a].conj() * self.entry(a, b) * c[b];
            }
        }
        acc.re
    }

    /// Greedy pivoted selection of a well-conditioned sub-basis: incomplete
    /// pivoted Cholesky, stopping when the remaining Schur diagonal falls
    /// below `tol * max diagonal`. The selected atoms span the recorded
    /// family up to the dropped energy, so minimizing over them is
    /// numerically equivalent and never needs heavy regularization.
    pub fn pivot_select(&self, tol: f64) -> Vec<usize> {
        let n = self.dim();
        let mut diag: Vec<f64> = (0..n).map(|i| self.entry(i, i).re.max(0.0)).collect();
        let scale = diag.iter().fold(0.0f64, |a, &b| a.max(b));
        if scale == 0.0 {
            return Vec::new();
        }
        let mut rows: Vec<Vec<Complex64>> = Vec::new();
        let mut chosen: Vec<usize> = Vec::new();
        let mut active: Vec<bool> = vec![true; n];
        while chosen.len() < 400 {
            let mut best = None;
            let mut best_val = tol * scale;
            for i in 0..n {
                if active[i] && diag[i] > best_val {
                    best_val = diag[i];
                    best = Some(i);
                }
            }
            let Some(p) = best else { break };
            active[p] = false;
            let d = diag[p].sqrt();
            let mut row = vec![Complex64::new(0.0, 0.0); n];
            for j in 0..n {
                if !active[j] {
                    continue;
                }
                let mut v = self.entry(p, j);
                for r in &rows {
                    v -= r[p] * r[j].conj();
                }
                row[j] = v.conj() / d;
            }
            for j in 0..n {
                if active[j] {
                    diag[j] = (diag[j] - row[j].norm_sqr()).max(0.0);
                }
            }
            rows.push(row);
            chosen.push(p);
        }
        chosen.sort_unstable();
        chosen
    }
}

/// Cholesky factor of a regularized Gram, reusable across right-hand sides.
pub struct FactoredGram {
    chol: faer::linalg::solvers::Cholesky<c64>,
    n: usize,
    mu: f64,
}

impl FactoredGram {
    /// Regularization the factorization ended up using.
    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn solve(&self, rhs: &[Complex64]) -> Vec<Complex64> {
        assert_eq!(rhs.len(), self.n);
        let mut b = Mat::<c64>::zeros(self.n, 1);
        for (i, &z) in rhs.iter().enumerate() {
            b[(i, 0)] = c64::new(z.re, z.im);
        }
        let x = self.chol.solve(&b);
        (0..self.n)
            .map(|i| {
                let z = x.read(i, 0);
                Complex64::new(z.re, z.im)
            })
            .collect()
    }
}

/// Outcome of one regularized inclusion minimization.
#[derive(Debug, Clone)]
pub struct InclusionResidual {
    /// residual of the regularized minimizer, `|u^f - u^h|^2` at `mu`
    pub raw: f64,
    /// raw divided by `|u^f(T)|^2`
    pub relative: f64,
    pub mu: f64,
    /// `mu |c|^2`: the bracket width above the unregularized minimum
    pub regularizer_term: f64,
    pub coefficients: Vec<Complex64>,
}

/// Minimize the Blagovestchenskii quadratic form
/// `<f-h, J L (f-h)> - <L(f-h), J(f-h)>` over `h` in the span of the
/// admissible atoms, via `(B + mu I)`-regularized normal equations.
///
/// The unregularized minimum is bracketed:
/// `raw(mu) - mu |c|^2 <= min <= raw(mu)`.
pub fn inclusion_residual(
    s2s: &S2SOperator,
    f: &[Complex64],
    admissible: &[usize],
    mu: Option<f64>,
) -> Result<InclusionResidual> {
    let kept = conditioned_subset(s2s, admissible)?;
    let gram = assemble_gram(s2s, &kept, mu)?;
    let factored = gram.factor_escalating(gram.mu())?;
    residual_against(s2s, &gram, &factored, f)
}

/// Pivot-select a well-conditioned subset of atoms before solving.
fn conditioned_subset(s2s: &S2SOperator, ids: &[usize]) -> Result<Vec<usize>> {
    let gram = assemble_gram(s2s, ids, None)?;
    let keep = gram.pivot_select(1e-8);
    if keep.is_empty() {
        return Err(Error::SingularNormalEquations);
    }
    Ok(keep.iter().map(|&k| ids[k]).collect())
}

/// Residual of one `f` against an already factored admissible Gram.
fn residual_against(
    s2s: &S2SOperator,
    gram: &GramMatrix,
    factored: &FactoredGram,
    f: &[Complex64],
) -> Result<InclusionResidual> {
    let mu = factored.mu();
    let norm_f_sq = s2s.blago_norm_sq(f)?;
    // g_a = <u^{h_a}(T), u^f(T)>
    let g: Vec<Complex64> = gram
        .ids()
        .iter()
        .map(|&a| s2s.blago_inner_product(&s2s.unit_coeffs(a), f))
        .collect::<Result<_>>()?;
    let c = factored.solve(&g);
    let cross: Complex64 = c.iter().zip(&g).map(|(ci, gi)| ci.conj() * gi).sum();
    let raw = (norm_f_sq - 2.0 * cross.re + gram.quad_form(&c)).max(0.0);
    let reg_term = mu * c.iter().map(|z| z.norm_sqr()).sum::<f64>();
    let relative = if norm_f_sq > 0.0 { raw / norm_f_sq } else { 0.0 };
    Ok(InclusionResidual { raw, relative, mu, regularizer_term: reg_term, coefficients: c })
}

/// A probe/admissible cylinder scene for the ball-inclusion criterion.
#[derive(Debug, Clone, Copy)]
pub struct BallScene {
    pub x: [f64; 2],
    pub l_x: f64,
    pub y: [f64; 2],
    pub l_y: f64,
    pub z: [f64; 2],
    pub l_z: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct BallInclusionOutcome {
    pub included: bool,
    pub worst_relative: f64,
    pub threshold: f64,
    pub per_probe: Vec<InclusionResidual>,
}

/// Data-side inclusion check over already recorded atoms: true iff the worst
/// probe's relative residual stays at or below `theta`.
pub fn ball_inclusion_from_data(
    s2s: &S2SOperator,
    probe_ids: &[usize],
    admissible_ids: &[usize],
    theta: f64,
    mu: Option<f64>,
) -> Result<BallInclusionOutcome> {
    if probe_ids.is_empty() || admissible_ids.is_empty() {
        return Err(Error::NotInBasis("empty probe or admissible set".into()));
    }
    let kept = conditioned_subset(s2s, admissible_ids)?;
    let gram = assemble_gram(s2s, &kept, mu)?;
    let factored = gram.factor_escalating(gram.mu())?;
    let mut per_probe = Vec::with_capacity(probe_ids.len());
    let mut worst = 0.0f64;
    for &p in probe_ids {
        let res = residual_against(s2s, &gram, &factored, &s2s.unit_coeffs(p))?;
        worst = worst.max(res.relative);
        per_probe.push(res);
    }
    Ok(BallInclusionOutcome {
        included: worst <= theta,
        worst_relative: worst,
        threshold: theta,
        per_probe,
    })
}

/// Atom ids of a recorded basis whose declared support fits inside
/// `S_eps(center, l) = (T - (l - eps), T) x B(center, eps)`.
pub fn atoms_in_cylinder(
    s2s: &S2SOperator,
    grid: &PeriodicGrid,
    center: [f64; 2],
    eps: f64,
    l: f64,
) -> Vec<usize> {
    let t_final = s2s.t_final();
    let t_lo = t_final - (l - eps);
    s2s.basis()
        .atoms()
        .iter()
        .enumerate()
        .filter(|(_, a)| {
            grid.flat_distance(a.center, center) + a.radius <= eps + 1e-9
                && a.t0 >= t_lo - 1e-9
                && a.t1 <= t_final + 1e-9
        })
        .map(|(k, _)| k)
        .collect()
}

/// Record a fresh experiment for a ball scene and run the inclusion test:
/// probe sources from `S_eps(x, l_x)`, admissible from
/// `S_eps(y, l_y) u S_eps(z, l_z)`.
#[allow(clippy::too_many_arguments)]
pub fn ball_inclusion_test(
    grid: &PeriodicGrid,
    metric: &ConformalMetric,
    decomp: &SpectralDecomposition,
    obs: &ObservationSet,
    t_final: f64,
    steps: usize,
    scene: BallScene,
    theta: f64,
    lattice: AtomLattice,
) -> Result<BallInclusionOutcome> {
    for center in [scene.x, scene.y, scene.z] {
        let ball = IndicatorSet::flat_ball(grid, metric, center, scene.eps);
        if !ball.is_subset_of(obs.indicator()) {
            return Err(Error::BallOutsideObservation);
        }
    }
    let mut basis = crate::s2s::SourceBasis::new();
    let mut probe_ids = Vec::new();
    let mut admissible_ids = Vec::new();
    let z_duplicates_y = scene.z == scene.y && (scene.l_z - scene.l_y).abs() < 1e-15;
    let mut cylinders = vec![(scene.x, scene.l_x, true), (scene.y, scene.l_y, false)];
    if !z_duplicates_y {
        cylinders.push((scene.z, scene.l_z, false));
    }
    for (center, l, is_probe) in cylinders {
        if l <= scene.eps {
            return Err(Error::Config(format!(
                "cylinder radius {l} not larger than eps {}",
                scene.eps
            )));
        }
        let cyl = Cylinder::s_eps(center, scene.eps, l, t_final);
        let atoms = cylinder_atoms(grid, cyl, lattice);
        for atom in atoms {
            let id = basis.len();
            if basis.push(atom, cyl, grid).is_ok() {
                if is_probe {
                    probe_ids.push(id);
                } else {
                    admissible_ids.push(id);
                }
            }
        }
    }
    let s2s = build_s2s(
        grid,
        decomp,
        basis,
        obs.clone(),
        t_final,
        steps,
        "ball-inclusion",
    )?;
    ball_inclusion_from_data(&s2s, &probe_ids, &admissible_ids, theta, None)
}

/// Target of an approximate-control solve.
pub enum ControlTarget<'a> {
    /// Oracle mode: an explicit wave snapshot (calibration only).
    Snapshot {
        decomp: &'a SpectralDecomposition,
        grid: &'a PeriodicGrid,
        field: &'a Wavefield,
    },
    /// Data mode: the cut-off wave `1_{M(Y, s)} u^f(T)` with `f` given by
    /// basis coefficients. Cross terms come from finite speed plus the plain
    /// identity, never from interior solves.
    Cutoff {
        region_seed: &'a IndicatorSet,
        depth: f64,
        f: &'a [Complex64],
    },
}

#[derive(Debug, Clone)]
pub struct ControlSolution {
    /// basis atoms the coefficients refer to (the conditioned subset of the
    /// requested admissible set)
    pub atom_ids: Vec<usize>,
    pub coefficients: Vec<Complex64>,
    /// squared g-norm distance to the target at time T
    pub residual_sq: f64,
    /// residual relative to the squared target norm
    pub relative: f64,
    pub mu: f64,
    pub target_norm_sq: f64,
    /// target mass outside M(X, horizon); a warning-level diagnostic
    pub outside_mass: f64,
}

/// Minimize `|u^c(T) - target|^2_M + mu |c|^2` over coefficients on the
/// admissible atoms.
pub fn approximate_control(
    s2s: &S2SOperator,
    grid: &PeriodicGrid,
    metric: &ConformalMetric,
    target: ControlTarget<'_>,
    admissible: &[usize],
    mu: Option<f64>,
) -> Result<ControlSolution> {
    let admissible = conditioned_subset(s2s, admissible)?;
    let admissible = admissible.as_slice();
    let gram = assemble_gram(s2s, admissible, mu)?;
    let mu = gram.mu();

    let (rhs, target_norm_sq, outside_mass) = match target {
        ControlTarget::Snapshot { decomp, grid, field } => {
            let mut rhs = Vec::with_capacity(admissible.len());
            for &a in admissible {
                let atom = &s2s.basis().atoms()[a];
                let src = atom.source(grid, s2s.time())?;
                let u = solve_cauchy(decomp, &src, s2s.t_final())?;
                rhs.push(decomp.m_inner(&u.values, &field.values));
            }
            let norm_sq = decomp.m_inner(&field.values, &field.values).re;
            // diagnose target mass outside the reachable set
            let reach = domain_of_influence(
                grid,
                metric,
                s2s.observation().indicator(),
                s2s.t_final(),
            )?;
            let outside: f64 = field
                .values
                .iter()
                .enumerate()
                .filter(|(i, _)| !reach.contains(*i))
                .map(|(i, z)| z.norm_sqr() * decomp.mass()[i])
                .sum();
            (rhs, norm_sq, outside)
        }
        ControlTarget::Cutoff { region_seed, depth, f } => {
            // supp u^{h_a}(T) subset M(Y, depth) for admissible atoms from the
            // (T-depth, T) x Y window, so <u^{h_a}, 1_M u^f> = <u^{h_a}, u^f>
            let region = domain_of_influence(grid, metric, region_seed, depth)?;
            for &a in admissible {
                let atom = &s2s.basis().atoms()[a];
                if atom.t0 < s2s.t_final() - depth - 1e-9 {
                    return Err(Error::Config(format!(
                        "admissible atom {a} starts before the control window"
                    )));
                }
                let (support, _) = atom.spatial_factor(grid);
                if support.iter().any(|&n| !region_seed.contains(n)) {
                    return Err(Error::Config(format!(
                        "admissible atom {a} not supported in the control region"
                    )));
                }
            }
            let _ = region;
            let mut rhs = Vec::with_capacity(admissible.len());
            for &a in admissible {
                rhs.push(s2s.blago_inner_product(&s2s.unit_coeffs(a), f)?);
            }
            // |1_M u^f|^2 is estimated through the control itself below
            (rhs, f64::NAN, 0.0)
        }
    };

    let factored = gram.factor_escalating(mu)?;
    let mu = factored.mu();
    let c = factored.solve(&rhs);
    let cross: Complex64 = c.iter().zip(&rhs).map(|(ci, gi)| ci.conj() * gi).sum();
    let control_energy = gram.quad_form(&c);

    let target_norm_sq = if target_norm_sq.is_nan() {
        // data-mode estimate: |1_M u^f|^2 = <1_M u^f, u^f> ~ <u^c, u^f> = cross
        cross.re.max(control_energy)
    } else {
        target_norm_sq
    };
    let residual_sq = (target_norm_sq - 2.0 * cross.re + control_energy).max(0.0);
    let relative = if target_norm_sq > 0.0 {
        residual_sq / target_norm_sq
    } else {
        0.0
    };
    Ok(ControlSolution {
        atom_ids: admissible.to_vec(),
        coefficients: c,
        residual_sq,
        relative,
        mu,
        target_norm_sq,
        outside_mass,
    })
}
