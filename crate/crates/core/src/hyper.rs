//! Hyper-parameters and their validation.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::diffeo::DEFAULT_SHOOT_STEPS;
use crate::error::{Error, Result};
use crate::likelihood::NoiseKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    /// Number of appearance basis columns.
    pub k_a: usize,
    /// Number of shape basis columns.
    pub k_v: usize,
    /// One latent vector drives both bases (`k_a == k_v`); otherwise the
    /// latents are `[z_appearance; z_shape]`.
    pub shared_latents: bool,
    pub omega_v: Vec<f64>,
    pub omega_a: Vec<f64>,
    pub omega_mu: Vec<f64>,
    pub lambda1: f64,
    pub lambda2: f64,
    pub nu0: f64,
    /// Wishart scale matrix, row-major `K x K`; `None` means `I / nu0`.
    pub lambda0: Option<Vec<f64>>,
    pub shoot_steps: usize,
    pub em_iters: usize,
    pub noise: NoiseKind,
}

impl HyperParams {
    /// Shared-latent model with `k` components and moderate default regularisation.
    pub fn shared(k: usize, noise: NoiseKind) -> Self {
        Self {
            k_a: k,
            k_v: k,
            shared_latents: true,
            omega_v: vec![1e-3, 0.0, 16.0, 1.0, 1.0],
            omega_a: vec![0.01, 1.0, 0.0],
            omega_mu: vec![1e-4, 1e-2, 0.0],
            lambda1: 0.95,
            lambda2: 0.05,
            nu0: k as f64,
            lambda0: None,
            shoot_steps: DEFAULT_SHOOT_STEPS,
            em_iters: 10,
            noise,
        }
    }

    /// Separate appearance and shape latents.
    pub fn split(k_a: usize, k_v: usize, noise: NoiseKind) -> Self {
        Self {
            k_a,
            k_v,
            shared_latents: false,
            nu0: (k_a + k_v) as f64,
            ..Self::shared(k_a.max(k_v), noise)
        }
    }

    /// Total latent dimension `K`.
    pub fn k(&self) -> usize {
        if self.shared_latents {
            self.k_a
        } else {
            self.k_a + self.k_v
        }
    }

    /// Latent row driving appearance column `k`.
    pub fn app_index(&self, k: usize) -> usize {
        k
    }

    /// Latent row driving shape column `k`.
    pub fn shape_index(&self, k: usize) -> usize {
        if self.shared_latents {
            k
        } else {
            self.k_a + k
        }
    }

    /// Contiguous latent blocks that orthogonalisation may mix.
    pub fn latent_blocks(&self) -> Vec<std::ops::Range<usize>> {
        if self.shared_latents {
            vec![0..self.k()]
        } else {
            [0..self.k_a, self.k_a..self.k_a + self.k_v]
                .into_iter()
                .filter(|r| !r.is_empty())
                .collect()
        }
    }

    pub fn lambda0_matrix(&self) -> DMatrix<f64> {
        let k = self.k();
        match &self.lambda0 {
            Some(v) => DMatrix::from_row_slice(k, k, v),
            None => DMatrix::identity(k, k) / self.nu0,
        }
    }

    /// `Lambda0^-1`.
    pub fn lambda0_inverse(&self) -> Result<DMatrix<f64>> {
        self.lambda0_matrix()
            .cholesky()
            .map(|c| c.inverse())
            .ok_or(Error::Singular("Wishart scale matrix"))
    }

    /// Checks every constraint, naming the first one that fails.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Hyper(m));
        let k = self.k();
        if k == 0 {
            return bad("at least one latent component is required".into());
        }
        if self.shared_latents && self.k_a != self.k_v {
            return bad(format!(
                "shared latents need equal basis counts, got K_a = {} and K_v = {}",
                self.k_a, self.k_v
            ));
        }
        for (name, w, len) in [
            ("omega_v", &self.omega_v, 5),
            ("omega_a", &self.omega_a, 3),
            ("omega_mu", &self.omega_mu, 3),
        ] {
            if w.len() != len {
                return bad(format!("{name} needs {len} values, got {}", w.len()));
            }
            if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return bad(format!("{name} must be finite and non-negative"));
            }
        }
        if self.omega_v[0] <= 0.0 {
            return bad("omega_v[0] must be positive: Green's function undefined otherwise".into());
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) || !(self.lambda1 + self.lambda2).is_finite() {
            return bad("lambda1 and lambda2 must be finite and non-negative".into());
        }
        if self.lambda1 + self.lambda2 <= 0.0 {
            return bad("lambda1 + lambda2 must be positive".into());
        }
        if !(self.nu0 >= k as f64) || !self.nu0.is_finite() {
            return bad(format!("nu0 = {} must be at least K = {k}", self.nu0));
        }
        if let Some(l0) = &self.lambda0 {
            if l0.len() != k * k {
                return bad(format!("Lambda0 needs {} values, got {}", k * k, l0.len()));
            }
            let m = DMatrix::from_row_slice(k, k, l0);
            let asym = (&m - m.transpose()).abs().max();
            if asym > 1e-12 * m.abs().max().max(1.0) {
                return bad("Lambda0 must be symmetric".into());
            }
            if m.cholesky().is_none() {
                return bad("Lambda0 must be positive definite".into());
            }
        }
        if self.shoot_steps == 0 {
            return bad("shoot_steps must be at least 1".into());
        }
        Ok(())
    }
}

pub fn validate_hyper(h: &HyperParams) -> Result<()> {
    h.validate()
}
