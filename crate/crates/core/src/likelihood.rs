//! Noise models: energies, gradients and Gauss-Newton Hessians.
//!
//! Images are `C x M` arrays, masks are `M` booleans (true = observed).
//! Values of `f` at unobserved voxels are never read.

use serde::{Deserialize, Serialize};

use crate::diffeo::Sampler;
use crate::error::{Error, Result};
use crate::field::BlockField;

/// Lower bound on every Gaussian noise variance.
pub const SIGMA2_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Gaussian,
    Bernoulli,
    Categorical,
}

impl NoiseKind {
    pub fn name(self) -> &'static str {
        match self {
            NoiseKind::Gaussian => "gaussian",
            NoiseKind::Bernoulli => "bernoulli",
            NoiseKind::Categorical => "categorical",
        }
    }
}

impl std::str::FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(NoiseKind::Gaussian),
            "bernoulli" => Ok(NoiseKind::Bernoulli),
            "categorical" => Ok(NoiseKind::Categorical),
            other => Err(Error::Hyper(format!("unknown noise model {other:?}"))),
        }
    }
}

/// A noise model together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    pub kind: NoiseKind,
    /// One variance per channel; ignored unless Gaussian.
    pub sigma2: Vec<f64>,
}

impl NoiseModel {
    pub fn new(kind: NoiseKind, channels: usize) -> Self {
        Self {
            kind,
            sigma2: vec![1.0; channels],
        }
    }

    pub fn gaussian(sigma2: Vec<f64>) -> Self {
        Self {
            kind: NoiseKind::Gaussian,
            sigma2,
        }
    }

    fn check(&self, channels: usize, voxels: usize, f_len: usize, a_len: usize) -> Result<()> {
        if f_len != channels * voxels || a_len != channels * voxels {
            return Err(Error::Shape(format!(
                "image lengths {f_len} and {a_len} do not match {channels} channels of {voxels} voxels"
            )));
        }
        if self.kind == NoiseKind::Categorical && channels < 2 {
            return Err(Error::Shape("categorical data needs at least 2 channels".into()));
        }
        if self.kind == NoiseKind::Gaussian && self.sigma2.len() != channels {
            return Err(Error::Shape(format!(
                "{} noise variances for {channels} channels",
                self.sigma2.len()
            )));
        }
        Ok(())
    }
}

/// Likelihood value and derivatives with respect to the un-warped image.
#[derive(Debug, Clone)]
pub struct LikelihoodDerivs {
    pub j: f64,
    /// `C x M` gradient, already pushed back through the warp.
    pub g: Vec<f64>,
    /// Per-voxel `C x C` Hessian blocks, pushed back through the warp.
    pub h: BlockField,
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Maps the linear predictor to the mean of the observation model.
pub fn squash(kind: NoiseKind, voxels: usize, a: &[f64]) -> Vec<f64> {
    match kind {
        NoiseKind::Gaussian => a.to_vec(),
        NoiseKind::Bernoulli => a.iter().map(|&x| sigmoid(x)).collect(),
        NoiseKind::Categorical => {
            let c = a.len() / voxels;
            let mut out = vec![0.0; a.len()];
            for v in 0..voxels {
                let mx = (0..c).map(|k| a[k * voxels + v]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for k in 0..c {
                    let e = (a[k * voxels + v] - mx).exp();
                    out[k * voxels + v] = e;
                    s += e;
                }
                for k in 0..c {
                    out[k * voxels + v] /= s;
                }
            }
            out
        }
    }
}

/// Negative log-likelihood of `f` given the warped predictor, over observed voxels.
pub fn energy(model: &NoiseModel, f: &[f64], a_warped: &[f64], mask: &[bool]) -> Result<f64> {
    let m = mask.len();
    let c = if m == 0 { 0 } else { a_warped.len() / m };
    model.check(c, m, f.len(), a_warped.len())?;
    if a_warped.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("warped appearance"));
    }
    let mut j = 0.0;
    match model.kind {
        NoiseKind::Gaussian => {
            for k in 0..c {
                let s2 = model.sigma2[k];
                let norm = 0.5 * (2.0 * std::f64::consts::PI * s2).ln();
                for v in (0..m).filter(|&v| mask[v]) {
                    let r = f[k * m + v] - a_warped[k * m + v];
                    j += norm + r * r / (2.0 * s2);
                }
            }
        }
        NoiseKind::Bernoulli => {
            for k in 0..c {
                for v in (0..m).filter(|&v| mask[v]) {
                    let a = a_warped[k * m + v];
                    j += softplus(a) - f[k * m + v] * a;
                }
            }
        }
        NoiseKind::Categorical => {
            for v in (0..m).filter(|&v| mask[v]) {
                let mx = (0..c).map(|k| a_warped[k * m + v]).fold(f64::NEG_INFINITY, f64::max);
                let lse = (0..c).map(|k| (a_warped[k * m + v] - mx).exp()).sum::<f64>().ln();
                let fa: f64 = (0..c).map(|k| a_warped[k * m + v] * f[k * m + v]).sum();
                j -= fa - mx - lse;
            }
        }
    }
    Ok(j)
}

/// Value, gradient and Hessian of the likelihood with respect to the
/// template `a`, where the prediction is `Psi a`.
///
/// Residuals are zeroed at unobserved voxels before pushing back, so a
/// partially observed interpolation neighbourhood still contributes.
pub fn derivatives(
    model: &NoiseModel,
    f: &[f64],
    a: &[f64],
    sampler: &Sampler,
    mask: &[bool],
) -> Result<LikelihoodDerivs> {
    let m = sampler.voxels();
    if mask.len() != m {
        return Err(Error::Shape("mask does not match the grid".into()));
    }
    let c = a.len() / m;
    model.check(c, m, f.len(), a.len())?;
    let aw = sampler.pull(a);
    let j = energy(model, f, &aw, mask)?;
    let (res, w) = warped_residuals(model, f, &aw, mask);
    Ok(LikelihoodDerivs {
        j,
        g: sampler.push(&res),
        h: sampler.push_blocks(&w),
    })
}

/// Gradient and Hessian weights in warped space, zero at unobserved voxels.
pub fn warped_residuals(
    model: &NoiseModel,
    f: &[f64],
    aw: &[f64],
    mask: &[bool],
) -> (Vec<f64>, BlockField) {
    let m = mask.len();
    let c = aw.len() / m;
    let mut res = vec![0.0; c * m];
    let mut w = BlockField::zeros(c, m);
    match model.kind {
        NoiseKind::Gaussian => {
            for k in 0..c {
                let inv = 1.0 / model.sigma2[k];
                for v in (0..m).filter(|&v| mask[v]) {
                    res[k * m + v] = (aw[k * m + v] - f[k * m + v]) * inv;
                    w.entry_mut(k, k)[v] = inv;
                }
            }
        }
        NoiseKind::Bernoulli => {
            for k in 0..c {
                for v in (0..m).filter(|&v| mask[v]) {
                    let s = sigmoid(aw[k * m + v]);
                    res[k * m + v] = s - f[k * m + v];
                    w.entry_mut(k, k)[v] = s * (1.0 - s);
                }
            }
        }
        NoiseKind::Categorical => {
            let s = squash(NoiseKind::Categorical, m, aw);
            for v in (0..m).filter(|&v| mask[v]) {
                for k in 0..c {
                    res[k * m + v] = s[k * m + v] - f[k * m + v];
                    for l in 0..c {
                        let d = if k == l { 1.0 } else { 0.0 };
                        w.entry_mut(k, l)[v] = s[k * m + v] * (d - s[l * m + v]);
                    }
                }
            }
        }
    }
    (res, w)
}

/// Per-channel sum of squared residuals and observed-voxel count.
pub fn sigma2_contribution(f: &[f64], a_warped: &[f64], mask: &[bool]) -> (Vec<f64>, usize) {
    let m = mask.len();
    let c = a_warped.len() / m;
    let mut sse = vec![0.0; c];
    for k in 0..c {
        for v in (0..m).filter(|&v| mask[v]) {
            let r = f[k * m + v] - a_warped[k * m + v];
            sse[k] += r * r;
        }
    }
    (sse, mask.iter().filter(|&&b| b).count())
}

/// Maximum-likelihood variances from accumulated statistics, floored.
pub fn finish_sigma2(sse: &[f64], observed: usize) -> Result<Vec<f64>> {
    if observed == 0 {
        return Err(Error::Dataset("no observed voxels to estimate the noise variance".into()));
    }
    Ok(sse
        .iter()
        .map(|s| (s / observed as f64).max(SIGMA2_FLOOR))
        .collect())
}
