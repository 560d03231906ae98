//! Using a trained model: latent fits, Laplace evidence, classification,
//! sampling and filling in missing voxels.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{read_framing, write_framing, DataKind, ImageDataset, SAMD_MAGIC};
use crate::diffeo::shoot;
use crate::error::{Error, Result};
use crate::likelihood::{energy, squash};
use crate::model::{ModelState, Operators};
use crate::trainer::latent_precision;
use crate::trainer::shard::{image_energy, latent_derivatives, latent_step};

pub const DEFAULT_FIT_ITERS: usize = 50;
const STEP_TOL: f64 = 1e-6;

/// Gaussian approximation to one image's latent posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub z_hat: Vec<f64>,
    /// `H + P` at the mode.
    pub hessian: DMatrix<f64>,
    /// `J(f, z) + z^T P z / 2` at the mode.
    pub neg_log_joint: f64,
    /// `ln det P`.
    pub log_det_prior: f64,
    pub iterations: usize,
}

/// A model prepared for repeated inference.
pub struct Inference {
    model: ModelState,
    ops: Operators,
    precision: DMatrix<f64>,
    log_det_prior: f64,
}

impl Inference {
    pub fn new(model: ModelState) -> Result<Self> {
        let ops = Operators::new(&model.grid, &model.hyper)?;
        let precision = latent_precision(&model, &ops)?;
        let chol = precision
            .clone()
            .cholesky()
            .ok_or(Error::Singular("latent prior precision"))?;
        let log_det_prior = 2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
        Ok(Self {
            model,
            ops,
            precision,
            log_det_prior,
        })
    }

    pub fn model(&self) -> &ModelState {
        &self.model
    }

    /// Latent prior precision `lambda1 A + lambda2 C`.
    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    fn check_image(&self, image: &[f64], mask: &[bool]) -> Result<()> {
        let m = self.model.grid.voxels();
        if mask.len() != m || image.len() != self.model.channels * m {
            return Err(Error::Shape(format!(
                "image of {} values with a mask of {} does not fit a {} channel model on {:?}",
                image.len(),
                mask.len(),
                self.model.channels,
                self.model.grid.dims()
            )));
        }
        Ok(())
    }

    /// Gauss-Newton mode search from `z = 0`.
    pub fn fit(&self, image: &[f64], mask: &[bool], max_iters: usize) -> Result<Posterior> {
        self.check_image(image, mask)?;
        let k = self.model.k();
        // values at hidden voxels must not matter, including NaN
        let f: Vec<f64> = image
            .iter()
            .enumerate()
            .map(|(i, &x)| if mask[i % mask.len()] { x } else { 0.0 })
            .collect();
        let mut z = vec![0.0; k];
        let (_, _, mut sampler) = image_energy(&self.model, &self.ops, &f, mask, &z)?;
        let mut iterations = 0;
        for _ in 0..max_iters {
            iterations += 1;
            let step = latent_step(&self.model, &self.ops, &self.precision, &f, mask, &z, &sampler)?;
            let moved = step
                .z
                .iter()
                .zip(&z)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            let Some((_, s)) = step.warp else { break };
            z = step.z;
            sampler = s;
            if moved < STEP_TOL {
                break;
            }
        }
        let (j, _, h) = latent_derivatives(&self.model, &f, mask, &z, &sampler)?;
        let zv = DVector::from_column_slice(&z);
        let hessian = &h + &self.precision;
        Ok(Posterior {
            neg_log_joint: j + 0.5 * zv.dot(&(&self.precision * &zv)),
            z_hat: z,
            hessian: (&hessian + hessian.transpose()) * 0.5,
            log_det_prior: self.log_det_prior,
            iterations,
        })
    }

    /// `J(f, z)` with its gradient and Gauss-Newton Hessian in `z`; the
    /// prior is not included.
    pub fn latent_derivatives(&self, image: &[f64], mask: &[bool], z: &[f64]) -> Result<(f64, Vec<f64>, DMatrix<f64>)> {
        self.check_image(image, mask)?;
        if z.len() != self.model.k() {
            return Err(Error::Shape(format!("expected {} latents, got {}", self.model.k(), z.len())));
        }
        let (_, _, sampler) = image_energy(&self.model, &self.ops, image, mask, z)?;
        let (j, g, h) = latent_derivatives(&self.model, image, mask, z, &sampler)?;
        Ok((j, g.iter().copied().collect(), h))
    }

    /// `squash(pull(mu + W_a z, shoot(W_v z)))`.
    pub fn reconstruct(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.model.k() {
            return Err(Error::Shape(format!("expected {} latents, got {}", self.model.k(), z.len())));
        }
        let def = shoot(&self.model.velocity(z), &self.ops.l_v, self.model.hyper.shoot_steps)?;
        let aw = def.sampler().pull(&self.model.appearance(z));
        Ok(squash(self.model.hyper.noise, self.model.grid.voxels(), &aw))
    }

    /// Latent draws from `N(0, A^-1)`, one per column.
    pub fn sample_latents(&self, count: usize, seed: u64) -> Result<DMatrix<f64>> {
        let k = self.model.k();
        let chol = self
            .model
            .a_hat
            .clone()
            .cholesky()
            .ok_or(Error::Singular("latent precision"))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eps = DMatrix::from_fn(k, count, |_, _| StandardNormal.sample(&mut rng));
        // A = L L^T, so z = L^-T e has covariance A^-1
        chol.l()
            .transpose()
            .solve_upper_triangular(&eps)
            .ok_or(Error::Singular("latent precision"))
    }

    pub fn sample(&self, seed: u64) -> Result<Vec<f64>> {
        let z = self.sample_latents(1, seed)?;
        self.reconstruct(z.as_slice())
    }

    /// Fits on observed voxels and fills the rest from the reconstruction.
    pub fn impute(&self, image: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
        let post = self.fit(image, mask, DEFAULT_FIT_ITERS)?;
        let rec = self.reconstruct(&post.z_hat)?;
        let m = mask.len();
        Ok(image
            .iter()
            .enumerate()
            .map(|(i, &x)| if mask[i % m] { x } else { rec[i] })
            .collect())
    }

    /// Log-likelihood of the `eval_mask` voxels after fitting on `train_mask`.
    pub fn heldout_loglik(&self, image: &[f64], train_mask: &[bool], eval_mask: &[bool]) -> Result<f64> {
        self.check_image(image, eval_mask)?;
        if !eval_mask.iter().any(|&b| b) {
            return Err(Error::Dataset("no voxels to evaluate".into()));
        }
        if train_mask.iter().zip(eval_mask).any(|(&a, &b)| a && b) {
            return Err(Error::Dataset("training and evaluation voxels overlap".into()));
        }
        let post = self.fit(image, train_mask, DEFAULT_FIT_ITERS)?;
        let z = &post.z_hat;
        let def = shoot(&self.model.velocity(z), &self.ops.l_v, self.model.hyper.shoot_steps)?;
        let aw = def.sampler().pull(&self.model.appearance(z));
        let f: Vec<f64> = image
            .iter()
            .enumerate()
            .map(|(i, &x)| if eval_mask[i % eval_mask.len()] { x } else { 0.0 })
            .collect();
        Ok(-energy(&self.model.noise(), &f, &aw, eval_mask)?)
    }

    pub fn log_evidence(&self, image: &[f64], mask: &[bool]) -> Result<f64> {
        log_evidence(&self.fit(image, mask, DEFAULT_FIT_ITERS)?)
    }
}

/// Laplace approximation to `ln p(f)`:
/// `ln p(f, z) + (K/2) ln 2 pi - ln det(H + P) / 2`, where `ln p(f, z)`
/// includes the normaliser of the Gaussian latent prior.
pub fn log_evidence(post: &Posterior) -> Result<f64> {
    let k = post.z_hat.len();
    if k == 0 {
        return Ok(-post.neg_log_joint);
    }
    let chol = post
        .hessian
        .clone()
        .cholesky()
        .ok_or(Error::Singular("posterior Hessian"))?;
    let ln_det_h = 2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let ln_joint = -post.neg_log_joint + 0.5 * post.log_det_prior - 0.5 * k as f64 * ln2pi;
    Ok(ln_joint + 0.5 * k as f64 * ln2pi - 0.5 * ln_det_h)
}

/// Posterior class probabilities from per-class log-evidences.
pub fn posterior_probabilities(log_evidence: &[f64], priors: &[f64]) -> Result<Vec<f64>> {
    if log_evidence.len() != priors.len() || priors.is_empty() {
        return Err(Error::Shape("one prior per model is required".into()));
    }
    if priors.iter().any(|&p| !(p >= 0.0)) || (priors.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Hyper("priors must be non-negative and sum to one".into()));
    }
    let scores: Vec<f64> = log_evidence
        .iter()
        .zip(priors)
        .map(|(&e, &p)| if p > 0.0 { e + p.ln() } else { f64::NEG_INFINITY })
        .collect();
    let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return Err(Error::NonFinite("class scores"));
    }
    let w: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
    let total: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / total).collect())
}

/// Posterior probability of each model for one image.
pub fn classify(image: &[f64], mask: &[bool], models: &[Inference], priors: &[f64]) -> Result<Vec<f64>> {
    if let Some(first) = models.first() {
        for m in &models[1..] {
            if m.model.grid != first.model.grid
                || m.model.channels != first.model.channels
                || m.model.hyper.noise != first.model.hyper.noise
            {
                return Err(Error::Shape("models differ in grid, channels or noise model".into()));
            }
        }
    }
    let ev: Vec<f64> = models
        .iter()
        .map(|m| m.log_evidence(image, mask))
        .collect::<Result<_>>()?;
    posterior_probabilities(&ev, priors)
}

pub fn fit(model: &ModelState, image: &[f64], mask: &[bool], max_iters: usize) -> Result<Posterior> {
    Inference::new(model.clone())?.fit(image, mask, max_iters)
}

pub fn reconstruct(model: &ModelState, z: &[f64]) -> Result<Vec<f64>> {
    Inference::new(model.clone())?.reconstruct(z)
}

pub fn sample(model: &ModelState, seed: u64) -> Result<Vec<f64>> {
    Inference::new(model.clone())?.sample(seed)
}

pub fn impute(model: &ModelState, image: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    Inference::new(model.clone())?.impute(image, mask)
}

pub fn heldout_loglik(model: &ModelState, image: &[f64], train_mask: &[bool], eval_mask: &[bool]) -> Result<f64> {
    Inference::new(model.clone())?.heldout_loglik(image, train_mask, eval_mask)
}

/// Per-image latent modes and Hessian diagonals.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    /// `K x N`.
    pub z: DMatrix<f64>,
    /// `K x N` diagonals of `H + P`.
    pub hessian_diag: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
struct FeatureHeader {
    dims: Vec<usize>,
    n: usize,
    channels: usize,
    kind: DataKind,
}

impl FeatureTable {
    pub fn from_posteriors(posts: &[Posterior]) -> Self {
        let k = posts.first().map_or(0, |p| p.z_hat.len());
        Self {
            z: DMatrix::from_fn(k, posts.len(), |r, c| posts[c].z_hat[r]),
            hessian_diag: DMatrix::from_fn(k, posts.len(), |r, c| posts[c].hessian[(r, r)]),
        }
    }

    /// `SAMD` framing with `dims = [K]`, two channels (modes, Hessian
    /// diagonals) and kind `features`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let (k, n) = self.z.shape();
        let header = serde_json::to_vec(&FeatureHeader {
            dims: vec![k],
            n,
            channels: 2,
            kind: DataKind::Features,
        })
        .expect("header serialises");
        let mut out = write_framing(SAMD_MAGIC, &header, 4 * 2 * k * n);
        for j in 0..n {
            for m in [&self.z, &self.hessian_diag] {
                for r in 0..k {
                    out.extend_from_slice(&(m[(r, j)] as f32).to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (h, payload): (FeatureHeader, &[u8]) = read_framing(bytes, SAMD_MAGIC)?;
        if h.kind != DataKind::Features || h.dims.len() != 1 || h.channels != 2 {
            return Err(Error::Format("not a feature container".into()));
        }
        let (k, n) = (h.dims[0], h.n);
        if payload.len() != 4 * 2 * k * n {
            return Err(Error::Format("feature payload has the wrong length".into()));
        }
        let vals: Vec<f64> = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        Ok(Self {
            z: DMatrix::from_fn(k, n, |r, c| vals[c * 2 * k + r]),
            hessian_diag: DMatrix::from_fn(k, n, |r, c| vals[c * 2 * k + k + r]),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::File::create(path)?.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

/// Fits every image of a dataset.
pub fn fit_dataset(inf: &Inference, ds: &ImageDataset, max_iters: usize) -> Result<Vec<Posterior>> {
    inf.model.check_dataset(ds)?;
    let fit_one = |i: usize| inf.fit(&ds.image(i), ds.mask(i), max_iters);
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..ds.len()).into_par_iter().map(fit_one).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..ds.len()).map(fit_one).collect()
    }
}
