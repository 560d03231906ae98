//! Latent precision update and the orthogonalising reparameterisation.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Expected latent precision `(N + nu0)(C_z + S + Lambda0^-1)^-1`.
pub fn update_a(
    cz: &DMatrix<f64>,
    s: &DMatrix<f64>,
    nu0: f64,
    lambda0: &DMatrix<f64>,
    n: usize,
) -> Result<DMatrix<f64>> {
    let k = cz.nrows();
    if cz.shape() != (k, k) || s.shape() != (k, k) || lambda0.shape() != (k, k) {
        return Err(Error::Shape("precision update needs square matrices of equal size".into()));
    }
    let l0inv = lambda0
        .clone()
        .cholesky()
        .ok_or(Error::Singular("Wishart scale matrix"))?
        .inverse();
    precision_from(cz + s + l0inv, nu0, n)
}

fn precision_from(m: DMatrix<f64>, nu0: f64, n: usize) -> Result<DMatrix<f64>> {
    let m = (&m + m.transpose()) * 0.5;
    if m.nrows() == 1 {
        // a single division rounds once
        if !(m[(0, 0)] > 0.0) {
            return Err(Error::Singular("latent sufficient statistics"));
        }
        return Ok(DMatrix::from_element(1, 1, (n as f64 + nu0) / m[(0, 0)]));
    }
    let inv = m
        .cholesky()
        .ok_or(Error::Singular("latent sufficient statistics"))?
        .inverse();
    let a = inv * (n as f64 + nu0);
    Ok((&a + a.transpose()) * 0.5)
}

/// Relative floor on the eigenvalues of `C_z`.
const CZ_FLOOR: f64 = 1e-12;
/// Singular values below this fraction of the largest give no scale information.
const SV_FLOOR: f64 = 1e-10;
const Q_TOL: f64 = 1e-8;
const Q_MAX_ITERS: usize = 100;

/// Symmetric eigen-decomposition with eigenvalues in descending order.
fn sorted_eigen(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let k = m.nrows();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals = DVector::from_fn(k, |i, _| eig.eigenvalues[order[i]]);
    let mut vecs = DMatrix::from_fn(k, k, |r, c| eig.eigenvectors[(r, order[c])]);
    fix_signs(&mut vecs);
    (vals, vecs)
}

/// Makes the largest entry of each column positive.
fn fix_signs(v: &mut DMatrix<f64>) {
    for mut col in v.column_iter_mut() {
        let big = col.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if big < 0.0 {
            col.neg_mut();
        }
    }
}

/// Initial transform for one block: `T0 = D V^T Dz^-1/2 Vz^T`.
///
/// Returns `T0` and the mask of directions the regulariser does not see,
/// whose scale stays fixed in the rescaling loop.
fn initial_transform(c: &DMatrix<f64>, cz: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<bool>)> {
    let k = c.nrows();
    let (dz, vz) = sorted_eigen(cz);
    let zmax = dz.max();
    if !(zmax > 0.0) || !zmax.is_finite() {
        return Err(Error::Singular("latent Gram matrix"));
    }
    let dz = dz.map(|x| x.max(CZ_FLOOR * zmax));
    let (dw, vw) = sorted_eigen(c);
    let dw = dw.map(|x| x.max(0.0));
    let m = DMatrix::from_diagonal(&dw.map(f64::sqrt))
        * vw.transpose()
        * &vz
        * DMatrix::from_diagonal(&dz.map(f64::sqrt));
    let svd = m.svd(false, true);
    let v_t = svd.v_t.ok_or(Error::Singular("orthogonalisation SVD"))?;
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let smax = svd.singular_values.max();
    let mut d = DVector::zeros(k);
    let mut free = vec![true; k];
    let mut v = DMatrix::from_fn(k, k, |r, c| v_t[(order[c], r)]);
    fix_signs(&mut v);
    for i in 0..k {
        let sv = svd.singular_values[order[i]];
        if smax > 0.0 && sv > SV_FLOOR * smax {
            d[i] = sv;
        } else {
            d[i] = 1.0;
            free[i] = false;
        }
    }
    let t = DMatrix::from_diagonal(&d)
        * v.transpose()
        * DMatrix::from_diagonal(&dz.map(|x| 1.0 / x.sqrt()))
        * vz.transpose();
    Ok((t, free))
}

/// Transform `T` such that `T C_z T^T` and `T^-T C T^-1` are diagonal, with
/// a diagonal rescaling chosen jointly with the expected precision.
///
/// `blocks` lists the latent index ranges that may be mixed; with more than
/// one block `T` is block diagonal and only within-block products are
/// diagonalised.
pub fn orthogonalise_blocks(
    c: &DMatrix<f64>,
    cz: &DMatrix<f64>,
    s: &DMatrix<f64>,
    n: usize,
    nu0: f64,
    lambda0: &DMatrix<f64>,
    blocks: &[Range<usize>],
) -> Result<DMatrix<f64>> {
    let k = c.nrows();
    if cz.shape() != (k, k) || s.shape() != (k, k) || c.shape() != (k, k) {
        return Err(Error::Shape("orthogonalisation needs square matrices of equal size".into()));
    }
    let mut t0 = DMatrix::zeros(k, k);
    let mut free = vec![false; k];
    for r in blocks {
        let len = r.len();
        let cb = c.view((r.start, r.start), (len, len)).into_owned();
        let czb = cz.view((r.start, r.start), (len, len)).into_owned();
        let (tb, fb) = initial_transform(&cb, &czb)?;
        t0.view_mut((r.start, r.start), (len, len)).copy_from(&tb);
        free[r.clone()].copy_from_slice(&fb);
    }
    let t0_inv = t0
        .clone()
        .try_inverse()
        .ok_or(Error::Singular("orthogonalisation transform"))?;
    let b = &t0 * cz * t0.transpose();
    let st = &t0 * s * t0.transpose();
    let ct = t0_inv.transpose() * c * &t0_inv;
    let ct_diag = ct.diagonal();
    let l0inv = lambda0
        .clone()
        .cholesky()
        .ok_or(Error::Singular("Wishart scale matrix"))?
        .inverse();
    let idx: Vec<usize> = (0..k).filter(|&i| free[i]).collect();
    let mut q = DVector::<f64>::zeros(k);
    if !idx.is_empty() {
        for _ in 0..Q_MAX_ITERS {
            let e = q.map(f64::exp);
            let qm = DMatrix::from_diagonal(&e);
            let a = precision_from(&qm * (&b + &st) * &qm + &l0inv, nu0, n)?;
            let r = (&a).component_mul(&b.transpose()) * 2.0;
            let qr_q = &qm * &r * &e;
            let nf = idx.len();
            let mut g = DVector::zeros(nf);
            let mut h = DMatrix::zeros(nf, nf);
            for (ii, &i) in idx.iter().enumerate() {
                let inv2 = (-2.0 * q[i]).exp();
                g[ii] = qr_q[i] - 2.0 * inv2 * ct_diag[i];
                for (jj, &j) in idx.iter().enumerate() {
                    h[(ii, jj)] = e[i] * r[(i, j)] * e[j];
                }
                h[(ii, ii)] += qr_q[i] + 4.0 * inv2 * ct_diag[i];
            }
            let step = match h.cholesky() {
                Some(ch) => ch.solve(&g),
                None => return Err(Error::Singular("orthogonalisation rescaling")),
            };
            let big = step.amax();
            if !big.is_finite() {
                return Err(Error::NonFinite("orthogonalisation rescaling"));
            }
            let scale = if big > 1.0 { 1.0 / big } else { 1.0 };
            for (ii, &i) in idx.iter().enumerate() {
                q[i] -= scale * step[ii];
            }
            if big < Q_TOL {
                break;
            }
        }
    }
    Ok(DMatrix::from_diagonal(&q.map(f64::exp)) * t0)
}

/// Orthogonalising transform mixing all latent rows.
pub fn orthogonalise(
    c: &DMatrix<f64>,
    cz: &DMatrix<f64>,
    s: &DMatrix<f64>,
    n: usize,
    nu0: f64,
    lambda0: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    orthogonalise_blocks(c, cz, s, n, nu0, lambda0, &[0..c.nrows()])
}

/// `||offdiag(M)||_F / ||diag(M)||_F`, zero for the zero matrix.
pub fn off_diagonal_ratio(m: &DMatrix<f64>) -> f64 {
    let mut on = 0.0;
    let mut off = 0.0;
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            let x = m[(r, c)] * m[(r, c)];
            if r == c {
                on += x;
            } else {
                off += x;
            }
        }
    }
    if off == 0.0 {
        0.0
    } else {
        (off / on).sqrt()
    }
}
