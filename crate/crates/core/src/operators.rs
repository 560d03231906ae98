//! Periodic differential operators, their Green's functions and the
//! regularised solver used by every Gauss-Newton update.
//!
//! The operators are sums of squared finite-difference stencils, so they are
//! circulant and diagonalised by the DFT. Derivatives use forward differences
//! `v(x+e_d) - v(x)`, with symbol `s_d = exp(i theta_d) - 1`; second
//! derivatives compose a forward and a backward difference. The resulting
//! quadratic forms are
//!
//! * scalar: `w0 |a|^2 + w1 |grad a|^2 + w2 |grad^2 a|^2`
//! * vector: the same three terms per component, plus
//!   `(w3/4) |Dv + Dv^T|_F^2 + w4 tr(Dv)^2`.

use std::sync::Arc;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fft::{bin_angles, FftNd};
use crate::field::{axpy, dot, norm, BlockField};
use crate::grid::Grid;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    /// Acts independently on each channel of a scalar image.
    Scalar,
    /// Acts on a `D`-component vector field.
    Vector,
}

#[derive(Debug, Clone)]
enum Spectrum {
    Scalar(Vec<f64>),
    /// `D x D` Hermitian matrix per bin, row-major.
    Vector(Vec<Complex64>),
}

/// Frequency-domain representation of a periodic differential operator.
#[derive(Debug, Clone)]
pub struct OperatorKernel {
    grid: Grid,
    omega: Vec<f64>,
    spectrum: Spectrum,
    inverse: Option<Spectrum>,
    fft: Arc<FftNd>,
}

fn squared_symbol(theta: &[f64; 3], ndim: usize) -> f64 {
    (0..ndim).map(|d| 2.0 - 2.0 * theta[d].cos()).sum()
}

/// Builds the vector operator from `omega_v = [w0, w1, w2, w3, w4]`.
pub fn make_vector_kernel(grid: &Grid, omega: &[f64]) -> Result<OperatorKernel> {
    if omega.len() != 5 {
        return Err(Error::Hyper(format!(
            "vector operator needs 5 weights, got {}",
            omega.len()
        )));
    }
    if omega.iter().any(|w| *w < 0.0 || !w.is_finite()) {
        return Err(Error::Hyper("operator weights must be non-negative".into()));
    }
    if omega[0] <= 0.0 {
        return Err(Error::Hyper(
            "omega_v[0] must be positive, otherwise the Green's function is undefined".into(),
        ));
    }
    let nd = grid.ndim();
    let mut spec = Vec::with_capacity(grid.voxels() * nd * nd);
    for th in bin_angles(grid) {
        let s: Vec<Complex64> = (0..nd)
            .map(|d| Complex64::from_polar(1.0, th[d]) - 1.0)
            .collect();
        let s2 = squared_symbol(&th, nd);
        let diag = omega[0] + omega[1] * s2 + omega[2] * s2 * s2 + 0.5 * omega[3] * s2;
        for i in 0..nd {
            for j in 0..nd {
                let mut e = 0.5 * omega[3] * s[i] * s[j].conj() + omega[4] * s[i].conj() * s[j];
                if i == j {
                    e += diag;
                }
                spec.push(e);
            }
        }
    }
    let spectrum = Spectrum::Vector(spec);
    let inverse = Some(invert_spectrum(&spectrum, nd)?);
    Ok(OperatorKernel {
        grid: grid.clone(),
        omega: omega.to_vec(),
        spectrum,
        inverse,
        fft: Arc::new(FftNd::new(grid)),
    })
}

/// Builds the scalar operator from `omega = [w0, w1, w2]`; invertible only if `w0 > 0`.
pub fn make_scalar_kernel(grid: &Grid, omega: &[f64]) -> Result<OperatorKernel> {
    if omega.len() != 3 {
        return Err(Error::Hyper(format!(
            "scalar operator needs 3 weights, got {}",
            omega.len()
        )));
    }
    if omega.iter().any(|w| *w < 0.0 || !w.is_finite()) {
        return Err(Error::Hyper("operator weights must be non-negative".into()));
    }
    let spec: Vec<f64> = bin_angles(grid)
        .iter()
        .map(|th| {
            let s2 = squared_symbol(th, grid.ndim());
            omega[0] + omega[1] * s2 + omega[2] * s2 * s2
        })
        .collect();
    let spectrum = Spectrum::Scalar(spec);
    let inverse = if omega[0] > 0.0 {
        Some(invert_spectrum(&spectrum, 1)?)
    } else {
        None
    };
    Ok(OperatorKernel {
        grid: grid.clone(),
        omega: omega.to_vec(),
        spectrum,
        inverse,
        fft: Arc::new(FftNd::new(grid)),
    })
}

fn invert_spectrum(spec: &Spectrum, nd: usize) -> Result<Spectrum> {
    match spec {
        Spectrum::Scalar(s) => Ok(Spectrum::Scalar(s.iter().map(|x| 1.0 / x).collect())),
        Spectrum::Vector(s) => {
            let mut out = Vec::with_capacity(s.len());
            for block in s.chunks_exact(nd * nd) {
                out.extend(invert_small(block, nd).ok_or(Error::NotInvertible)?);
            }
            Ok(Spectrum::Vector(out))
        }
    }
}

/// Closed-form inverse of a 1x1, 2x2 or 3x3 complex matrix (row-major).
fn invert_small(m: &[Complex64], n: usize) -> Option<Vec<Complex64>> {
    let zero = Complex64::new(0.0, 0.0);
    match n {
        1 => (m[0] != zero).then(|| vec![1.0 / m[0]]),
        2 => {
            let det = m[0] * m[3] - m[1] * m[2];
            if det.norm() == 0.0 {
                return None;
            }
            Some(vec![m[3] / det, -m[1] / det, -m[2] / det, m[0] / det])
        }
        3 => {
            let a = |i: usize, j: usize| m[i * 3 + j];
            let cof = [
                a(1, 1) * a(2, 2) - a(1, 2) * a(2, 1),
                a(1, 2) * a(2, 0) - a(1, 0) * a(2, 2),
                a(1, 0) * a(2, 1) - a(1, 1) * a(2, 0),
                a(0, 2) * a(2, 1) - a(0, 1) * a(2, 2),
                a(0, 0) * a(2, 2) - a(0, 2) * a(2, 0),
                a(0, 1) * a(2, 0) - a(0, 0) * a(2, 1),
                a(0, 1) * a(1, 2) - a(0, 2) * a(1, 1),
                a(0, 2) * a(1, 0) - a(0, 0) * a(1, 2),
                a(0, 0) * a(1, 1) - a(0, 1) * a(1, 0),
            ];
            let det = a(0, 0) * cof[0] + a(0, 1) * cof[1] + a(0, 2) * cof[2];
            if det.norm() == 0.0 {
                return None;
            }
            // inverse = adjugate / det, adjugate = cofactor^T
            let mut inv = vec![zero; 9];
            for i in 0..3 {
                for j in 0..3 {
                    inv[i * 3 + j] = cof[j * 3 + i] / det;
                }
            }
            Some(inv)
        }
        _ => None,
    }
}

impl OperatorKernel {
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn omega(&self) -> &[f64] {
        &self.omega
    }

    pub fn kind(&self) -> KernelKind {
        match self.spectrum {
            Spectrum::Scalar(_) => KernelKind::Scalar,
            Spectrum::Vector(_) => KernelKind::Vector,
        }
    }

    pub fn is_invertible(&self) -> bool {
        self.inverse.is_some()
    }

    /// Number of components per voxel a field must carry, or `None` for a
    /// scalar kernel (any whole number of channels).
    fn check_field(&self, field: &[f64]) -> Result<usize> {
        let m = self.grid.voxels();
        match self.spectrum {
            Spectrum::Scalar(_) if field.len() % m == 0 && !field.is_empty() => Ok(field.len() / m),
            Spectrum::Vector(_) if field.len() == self.grid.ndim() * m => Ok(self.grid.ndim()),
            _ => Err(Error::Shape(format!(
                "field of length {} does not fit a {:?} kernel on {:?}",
                field.len(),
                self.kind(),
                self.grid.dims()
            ))),
        }
    }

    /// Per-bin minimum eigenvalue of the spectrum (test and diagnostics helper).
    pub fn min_eigenvalue(&self) -> f64 {
        match &self.spectrum {
            Spectrum::Scalar(s) => s.iter().cloned().fold(f64::INFINITY, f64::min),
            Spectrum::Vector(s) => {
                let nd = self.grid.ndim();
                s.chunks_exact(nd * nd)
                    .map(|b| {
                        let mut h = nalgebra::DMatrix::<Complex64>::zeros(nd, nd);
                        for i in 0..nd {
                            for j in 0..nd {
                                h[(i, j)] = b[i * nd + j];
                            }
                        }
                        h.symmetric_eigenvalues()
                            .iter()
                            .cloned()
                            .fold(f64::INFINITY, f64::min)
                    })
                    .fold(f64::INFINITY, f64::min)
            }
        }
    }

    fn transform(&self, spec: &Spectrum, field: &[f64]) -> Vec<f64> {
        let m = self.grid.voxels();
        let comps = field.len() / m;
        let mut bufs: Vec<Vec<Complex64>> = field
            .chunks_exact(m)
            .map(|c| {
                let mut b: Vec<Complex64> = c.iter().map(|&x| Complex64::new(x, 0.0)).collect();
                self.fft.forward(&mut b);
                b
            })
            .collect();
        match spec {
            Spectrum::Scalar(s) => {
                for b in bufs.iter_mut() {
                    for (x, k) in b.iter_mut().zip(s) {
                        *x *= k;
                    }
                }
            }
            Spectrum::Vector(s) => {
                let nd = comps;
                let mut tmp = [Complex64::new(0.0, 0.0); 3];
                for bin in 0..m {
                    let blk = &s[bin * nd * nd..(bin + 1) * nd * nd];
                    for i in 0..nd {
                        tmp[i] = (0..nd).map(|j| blk[i * nd + j] * bufs[j][bin]).sum();
                    }
                    for i in 0..nd {
                        bufs[i][bin] = tmp[i];
                    }
                }
            }
        }
        let mut out = Vec::with_capacity(field.len());
        for mut b in bufs {
            self.fft.inverse(&mut b);
            out.extend(b.iter().map(|c| c.re));
        }
        out
    }

    /// `L field`, computed in frequency space.
    pub fn apply(&self, field: &[f64]) -> Result<Vec<f64>> {
        self.check_field(field)?;
        Ok(self.transform(&self.spectrum, field))
    }

    /// Green's function: `L^-1 momentum`.
    pub fn greens(&self, momentum: &[f64]) -> Result<Vec<f64>> {
        self.check_field(momentum)?;
        let inv = self.inverse.as_ref().ok_or(Error::NotInvertible)?;
        Ok(self.transform(inv, momentum))
    }

    /// Quadratic form `<field, L field>`.
    pub fn energy(&self, field: &[f64]) -> Result<f64> {
        Ok(dot(field, &self.apply(field)?))
    }

    /// Applies `(hbar I + w L)^-1` in frequency space.
    fn precondition(&self, hbar: f64, weight: f64, field: &[f64]) -> Vec<f64> {
        let spec = match &self.spectrum {
            Spectrum::Scalar(s) => Spectrum::Scalar(
                s.iter()
                    .map(|k| {
                        let d = hbar + weight * k;
                        if d > 0.0 {
                            1.0 / d
                        } else {
                            1.0
                        }
                    })
                    .collect(),
            ),
            Spectrum::Vector(s) => {
                let nd = self.grid.ndim();
                let mut out = Vec::with_capacity(s.len());
                for blk in s.chunks_exact(nd * nd) {
                    let shifted: Vec<Complex64> = blk
                        .iter()
                        .enumerate()
                        .map(|(e, x)| {
                            let mut y = x * weight;
                            if e / nd == e % nd {
                                y += hbar;
                            }
                            y
                        })
                        .collect();
                    match invert_small(&shifted, nd) {
                        Some(inv) => out.extend(inv),
                        None => out.extend(
                            (0..nd * nd).map(|e| Complex64::new((e / nd == e % nd) as u8 as f64, 0.0)),
                        ),
                    }
                }
                Spectrum::Vector(out)
            }
        };
        self.transform(&spec, field)
    }
}

/// Result of a preconditioned conjugate-gradient solve.
#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub x: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-6,
            max_iterations: 200,
        }
    }
}

/// Solves `(H + w L) x = rhs` to relative residual `1e-6` within 200 iterations.
pub fn solve_regularised(
    h: &BlockField,
    kernel: &OperatorKernel,
    weight: f64,
    rhs: &[f64],
) -> Result<Vec<f64>> {
    let out = pcg(h, kernel, weight, rhs, SolverOptions::default())?;
    if out.converged {
        Ok(out.x)
    } else {
        Err(Error::NotConverged {
            residual: out.residual,
            iterations: out.iterations,
        })
    }
}

/// Preconditioned conjugate gradient on `(H + w L) x = rhs`, preconditioned by
/// the circulant approximation `(hbar I + w L)^-1` with `hbar` the mean
/// diagonal of `H`. Always returns the last iterate.
pub fn pcg(
    h: &BlockField,
    kernel: &OperatorKernel,
    weight: f64,
    rhs: &[f64],
    opts: SolverOptions,
) -> Result<SolveOutcome> {
    let comps = kernel.check_field(rhs)?;
    let m = kernel.grid.voxels();
    if h.dim != comps || h.voxels != m {
        return Err(Error::Shape(format!(
            "hessian field {}x{} over {} voxels does not match {} components over {} voxels",
            h.dim, h.dim, h.voxels, comps, m
        )));
    }
    if !(weight >= 0.0) {
        return Err(Error::Hyper("regularisation weight must be non-negative".into()));
    }
    let n = rhs.len();
    let bnorm = norm(rhs);
    if !bnorm.is_finite() {
        return Err(Error::NonFinite("solver right-hand side"));
    }
    if bnorm == 0.0 {
        return Ok(SolveOutcome {
            x: vec![0.0; n],
            residual: 0.0,
            iterations: 0,
            converged: true,
        });
    }
    let hbar = h.mean_diagonal();
    let op = |x: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; n];
        h.mul_vec(x, &mut out);
        if weight > 0.0 {
            let lx = kernel.transform(&kernel.spectrum, x);
            axpy(weight, &lx, &mut out);
        }
        out
    };

    let mut x = vec![0.0; n];
    let mut r = rhs.to_vec();
    let mut z = kernel.precondition(hbar, weight, &r);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut residual = 1.0;
    let mut best = (x.clone(), residual);
    for it in 1..=opts.max_iterations {
        let ap = op(&p);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            break;
        }
        let alpha = rz / pap;
        axpy(alpha, &p, &mut x);
        axpy(-alpha, &ap, &mut r);
        residual = norm(&r) / bnorm;
        if residual < best.1 {
            best = (x.clone(), residual);
        }
        if residual <= opts.tolerance {
            return Ok(SolveOutcome {
                x,
                residual,
                iterations: it,
                converged: true,
            });
        }
        z = kernel.precondition(hbar, weight, &r);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for (pi, zi) in p.iter_mut().zip(&z) {
            *pi = zi + beta * *pi;
        }
    }
    Ok(SolveOutcome {
        x: best.0,
        residual: best.1,
        iterations: opts.max_iterations,
        converged: false,
    })
}
