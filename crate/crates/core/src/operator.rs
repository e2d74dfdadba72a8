//! Hermitian discretization of the magnetic Schrödinger operator
//! `L u = -Δ_g u - 2i<A, du>_g + (i d*A + |A|_g^2 + V) u` on periodic grids,
//! its dense spectral decomposition, and gauge conjugation.
//!
//! Assembly is in factored form `L = (d + iA)*(d + iA) + V` with edge-based A
//! entering through Peierls phases `exp(-i A_e h)` in the covariant
//! difference. The stiffness form is therefore Hermitian by construction and
//! the discrete gauge transformation `A -> A - d(theta)` is exactly unitary:
//! `K(A - d theta) = U K(A) U^H` with `U = diag(exp(i theta))`.
//!
//! The covariant scheme trades one order of consistency (O(h) in A) for this
//! exact covariance; the gauge-recovery pipeline depends on the latter.

use crate::error::{Error, Result};
use crate::geometry::{ConformalMetric, CovectorField, PeriodicGrid, ScalarPotential};
use faer::complex_native::c64;
use faer::{Mat, Side};
use num_complex::Complex64;

pub const DEFAULT_EIGEN_CAP: usize = 4096;

#[inline]
pub(crate) fn to_c64(z: Complex64) -> c64 {
    c64::new(z.re, z.im)
}

#[inline]
pub(crate) fn to_num(z: c64) -> Complex64 {
    Complex64::new(z.re, z.im)
}

/// Stiffness form K (Hermitian) and diagonal mass weights M; the logical
/// operator is `L = M^{-1} K`.
pub struct Discretization {
    pub(crate) stiffness: Mat<c64>,
    mass: Vec<f64>,
    node_count: usize,
}

/// Assemble the discrete operator for `(grid, metric, A, V)`.
///
/// Edge weights come from the Dirichlet form of the conformal metric:
/// `h / rho_edge` in 1-D (divergence form `rho^{-1} d(rho^{-1} d u)`) and the
/// flat cell area in 2-D (conformal invariance of the 2-D Dirichlet energy).
/// `rho_edge` is the arithmetic mean of the endpoint values.
pub fn assemble_operator(
    grid: &PeriodicGrid,
    metric: &ConformalMetric,
    a: &CovectorField,
    v: &ScalarPotential,
) -> Result<Discretization> {
    let n = grid.node_count();
    if a.dim() != grid.dim() || v.values().len() != n {
        return Err(Error::GridMismatch("field shape mismatch".into()));
    }

    let mass: Vec<f64> = metric.volume_weights().to_vec();
    let mut k = Mat::<c64>::zeros(n, n);

    let cell_area: f64 = (0..grid.dim()).map(|ax| grid.spacing(ax)).product();
    for axis in 0..grid.dim() {
        let h = grid.spacing(axis);
        let a_axis = a.component(axis);
        for p in 0..n {
            let q = grid.step(p, axis);
            let weight = match grid.dim() {
                1 => {
                    let rho_edge = 0.5 * (metric.rho(p) + metric.rho(q));
                    h / rho_edge
                }
                _ => cell_area,
            };
            let w = weight / (h * h);
            // |phi u_q - u_p|^2 contribution of the edge p -> q; the phase
            // sign makes (exp(i A h) u_q - u_p)/h consistent with d + iA and
            // the gauge map A -> A - d(theta), U = diag(exp(i theta)) exactly
            // unitary on K.
            let phase = Complex64::from_polar(1.0, a_axis[p] * h);
            k[(p, p)] += c64::new(w, 0.0);
            k[(q, q)] += c64::new(w, 0.0);
            let off = to_c64(-w * phase);
            k[(p, q)] += off;
            k[(q, p)] += c64::new(off.re, -off.im);
        }
    }
    for (j, (&vj, &mj)) in v.values().iter().zip(&mass).enumerate() {
        k[(j, j)] += c64::new(vj * mj, 0.0);
    }

    Ok(Discretization { stiffness: k, mass, node_count: n })
}

impl Discretization {
    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    /// Apply the logical operator `L = M^{-1} K` to a nodal vector.
    pub fn apply(&self, u: &[Complex64]) -> Vec<Complex64> {
        let ku = self.apply_stiffness(u);
        ku.iter()
            .zip(&self.mass)
            .map(|(z, &m)| z / m)
            .collect()
    }

    /// Apply the stiffness form K.
    pub fn apply_stiffness(&self, u: &[Complex64]) -> Vec<Complex64> {
        let n = self.node_count;
        let mut out = vec![Complex64::new(0.0, 0.0); n];
        for i in 0..n {
            let mut acc = c64::new(0.0, 0.0);
            for j in 0..n {
                acc += self.stiffness[(i, j)] * to_c64(u[j]);
            }
            out[i] = to_num(acc);
        }
        out
    }

    /// The sesquilinear form `<L u, v>_M = v^H K u`.
    pub fn form(&self, u: &[Complex64], v: &[Complex64]) -> Complex64 {
        let ku = self.apply_stiffness(u);
        ku.iter()
            .zip(v)
            .map(|(a, b)| a * b.conj())
            .sum()
    }

    /// Largest absolute stiffness entry; a cheap stand-in for the norm scale
    /// used in residual tolerances.
    pub fn stiffness_scale(&self) -> f64 {
        let n = self.node_count;
        let mut s = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                let z = self.stiffness[(i, j)];
                s = s.max(z.re.hypot(z.im));
            }
        }
        s
    }
}

/// Eigenpairs of `L = M^{-1} K`: ascending real eigenvalues, M-orthonormal
/// modes, and a positivity shift `D = max(0, -lambda_1) + 1`.
pub struct SpectralDecomposition {
    lambdas: Vec<f64>,
    /// Columns are the modes phi_j, M-orthonormal.
    modes: Mat<c64>,
    mass: Vec<f64>,
    shift: f64,
}

/// Dense Hermitian eigensolve of the symmetrized operator
/// `M^{-1/2} K M^{-1/2}`; modes are mapped back through `M^{-1/2}`.
pub fn eigendecompose(disc: &Discretization) -> Result<SpectralDecomposition> {
    eigendecompose_capped(disc, DEFAULT_EIGEN_CAP)
}

pub fn eigendecompose_capped(disc: &Discretization, cap: usize) -> Result<SpectralDecomposition> {
    let n = disc.node_count;
    if n > cap {
        return Err(Error::EigenCapExceeded { n, cap });
    }
    let sqrt_inv: Vec<f64> = disc.mass.iter().map(|&m| 1.0 / m.sqrt()).collect();
    let mut sym = Mat::<c64>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let w = sqrt_inv[i] * sqrt_inv[j];
            let z = disc.stiffness[(i, j)];
            sym[(i, j)] = c64::new(z.re * w, z.im * w);
        }
    }
    let evd = sym.selfadjoint_eigendecomposition(Side::Lower);
    let s = evd.s();
    let u = evd.u();

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        s.column_vector()
            .read(a)
            .re
            .partial_cmp(&s.column_vector().read(b).re)
            .unwrap()
    });

    let mut lambdas = Vec::with_capacity(n);
    let mut modes = Mat::<c64>::zeros(n, n);
    for (col, &src) in order.iter().enumerate() {
        lambdas.push(s.column_vector().read(src).re);
        for row in 0..n {
            let z = u.read(row, src);
            modes[(row, col)] = c64::new(z.re * sqrt_inv[row], z.im * sqrt_inv[row]);
        }
    }
    let shift = (-lambdas[0]).max(0.0) + 1.0;
    Ok(SpectralDecomposition { lambdas, modes, mass: disc.mass.clone(), shift })
}

impl SpectralDecomposition {
    pub fn node_count(&self) -> usize {
        self.mass.len()
    }

    pub fn mode_count(&self) -> usize {
        self.lambdas.len()
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    /// Positivity shift: `lambda_j + shift > 0` for every j.
    pub fn shift(&self) -> f64 {
        self.shift
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    pub(crate) fn modes(&self) -> &Mat<c64> {
        &self.modes
    }

    pub fn mode(&self, j: usize) -> Vec<Complex64> {
        (0..self.node_count())
            .map(|i| to_num(self.modes[(i, j)]))
            .collect()
    }

    /// Mode coefficients `c_j = <b, phi_j>_M` of a nodal function.
    pub fn project(&self, b: &[Complex64]) -> Vec<Complex64> {
        let n = self.node_count();
        assert_eq!(b.len(), n);
        let weighted: Vec<c64> = b
            .iter()
            .zip(&self.mass)
            .map(|(z, &m)| c64::new(z.re * m, z.im * m))
            .collect();
        (0..self.mode_count())
            .map(|j| {
                let mut acc = c64::new(0.0, 0.0);
                for i in 0..n {
                    acc += self.modes[(i, j)].conj() * weighted[i];
                }
                to_num(acc)
            })
            .collect()
    }

    /// Sparse projection: coefficients of a function supported on `support`.
    pub fn project_sparse(&self, support: &[usize], values: &[Complex64]) -> Vec<Complex64> {
        assert_eq!(support.len(), values.len());
        let weighted: Vec<c64> = values
            .iter()
            .zip(support)
            .map(|(z, &i)| {
                let m = self.mass[i];
                c64::new(z.re * m, z.im * m)
            })
            .collect();
        (0..self.mode_count())
            .map(|j| {
                let mut acc = c64::new(0.0, 0.0);
                for (k, &i) in support.iter().enumerate() {
                    acc += self.modes[(i, j)].conj() * weighted[k];
                }
                to_num(acc)
            })
            .collect()
    }

    /// M-weighted inner product of nodal functions, `<u, v>_M`.
    pub fn m_inner(&self, u: &[Complex64], v: &[Complex64]) -> Complex64 {
        u.iter()
            .zip(v)
            .zip(&self.mass)
            .map(|((a, b), &m)| a * b.conj() * m)
            .sum()
    }

    pub fn m_norm(&self, u: &[Complex64]) -> f64 {
        self.m_inner(u, u).re.max(0.0).sqrt()
    }
}

/// Conjugate the covector field by `kappa = exp(i theta)`: with
/// `i kappa^{-1} d kappa = -d theta`, the returned field is
/// `A_e - (theta_q - theta_p)/h` per edge `p -> q`.
///
/// Edge differences are taken on the lifted phase, i.e. wrapped to the
/// principal branch (-pi, pi]. A winding phase therefore maps to the constant
/// field it lifts to, and the Peierls phase of the result is unchanged by the
/// wrapping (a 2 pi / h shift of an edge value leaves `exp(-i A_e h)` fixed).
pub fn gauge_conjugate(
    grid: &PeriodicGrid,
    a: &CovectorField,
    theta: &[f64],
) -> Result<CovectorField> {
    if theta.len() != grid.node_count() || a.dim() != grid.dim() {
        return Err(Error::GridMismatch("theta/field shape mismatch".into()));
    }
    let mut out = a.clone();
    for axis in 0..grid.dim() {
        let h = grid.spacing(axis);
        let comp = out.component_mut(axis);
        for p in 0..grid.node_count() {
            let q = grid.step(p, axis);
            comp[p] -= principal_branch(theta[q] - theta[p]) / h;
        }
    }
    Ok(out)
}

/// Wrap an angle to (-pi, pi].
pub(crate) fn principal_branch(angle: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut a = angle.rem_euclid(two_pi);
    if a > std::f64::consts::PI {
        a -= two_pi;
    }
    a
}
