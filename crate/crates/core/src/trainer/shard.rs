//! Per-image work and its aggregation.
//!
//! A shard owns a set of images and their latent variables. The training
//! driver only ever sees sums over a shard's images, returned as exact
//! accumulators so that the way images are split across shards, threads or
//! machines cannot change the result.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::dataset::ImageDataset;
use crate::diffeo::{shoot, spatial_gradient, Sampler};
use crate::error::{Error, Result};
use crate::exact::ExactVec;
use crate::likelihood::{derivatives, energy, sigma2_contribution};
use crate::model::{fnv1a, image_key, raw_latent, ModelState, Operators};

/// Work a shard can be asked to do. Replies are lists of exact sums.
#[derive(Debug, Clone, PartialEq)]
pub enum Request {
    /// Draw initial latents; reply `[Z Z^T, image count]`.
    InitLatents { k: usize, seed: u64 },
    /// Reply `[g_mu, H_mu, sum J]`.
    Mean,
    /// Reply `[G_v, H_v, sum J]`, columns concatenated.
    Shape,
    /// Reply `[G_a, H_a, sum J]`, columns concatenated.
    Appearance,
    /// Reply `[sum J]`.
    Objective,
    /// Reply `[per-channel squared residuals, observed voxel count]`.
    Sigma2,
    /// One Gauss-Newton step per image under latent precision `p`;
    /// reply `[S, Z Z^T, sum J, image count]`.
    UpdateLatents { p: DMatrix<f64> },
    /// `Z <- T Z`; empty reply.
    ApplyTransform { t: DMatrix<f64> },
    /// Reply `[Z Z^T]`.
    Gram,
}

impl Request {
    pub fn name(&self) -> &'static str {
        match self {
            Request::InitLatents { .. } => "init-latents",
            Request::Mean => "mean",
            Request::Shape => "shape",
            Request::Appearance => "appearance",
            Request::Objective => "objective",
            Request::Sigma2 => "sigma2",
            Request::UpdateLatents { .. } => "update-latents",
            Request::ApplyTransform { .. } => "apply-transform",
            Request::Gram => "gram",
        }
    }
}

pub type Aggregate = Vec<ExactVec>;

/// A holder of images that answers [`Request`]s with aggregates.
///
/// Requests are split into `submit` and `collect` so that a driver can keep
/// several remote shards busy at once.
pub trait Shard {
    fn set_model(&mut self, model: &ModelState) -> Result<()>;
    fn submit(&mut self, req: &Request) -> Result<()>;
    fn collect(&mut self) -> Result<Aggregate>;
}

/// Sends `req` to every shard, then sums the replies in shard order.
pub fn gather<S: Shard>(shards: &mut [S], req: &Request) -> Result<Aggregate> {
    if shards.is_empty() {
        return Err(Error::Worker("no shards to train on".into()));
    }
    for s in shards.iter_mut() {
        s.submit(req)?;
    }
    let mut total: Option<Aggregate> = None;
    for s in shards.iter_mut() {
        let part = s.collect()?;
        total = Some(match total {
            None => part,
            Some(mut t) => {
                if t.len() != part.len() || t.iter().zip(&part).any(|(a, b)| a.len() != b.len()) {
                    return Err(Error::Protocol(format!(
                        "shards disagree on the shape of the {} reply",
                        req.name()
                    )));
                }
                for (a, b) in t.iter_mut().zip(&part) {
                    a.merge(b);
                }
                t
            }
        });
    }
    Ok(total.expect("at least one shard"))
}

pub fn broadcast<S: Shard>(shards: &mut [S], model: &ModelState) -> Result<()> {
    for s in shards.iter_mut() {
        s.set_model(model)?;
    }
    Ok(())
}

fn run_indexed<F>(n: usize, width: &[usize], f: F) -> Result<Aggregate>
where
    F: Fn(usize, &mut Aggregate) -> Result<()> + Sync + Send,
{
    let init = || -> Result<Aggregate> { Ok(width.iter().map(|&w| ExactVec::zeros(w)).collect()) };
    let step = |acc: Result<Aggregate>, i: usize| -> Result<Aggregate> {
        let mut acc = acc?;
        f(i, &mut acc)?;
        Ok(acc)
    };
    let merge = |a: Result<Aggregate>, b: Result<Aggregate>| -> Result<Aggregate> {
        let mut a = a?;
        for (x, y) in a.iter_mut().zip(&b?) {
            x.merge(y);
        }
        Ok(a)
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().fold(init, step).reduce(init, merge)
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = merge;
        (0..n).fold(init(), step)
    }
}

fn map_indexed<T: Send, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

struct Cached {
    key: u64,
    sampler: Arc<Sampler>,
}

/// Shard backed by images held in this process.
pub struct LocalShard {
    data: ImageDataset,
    keys: Vec<u64>,
    z: Vec<Vec<f64>>,
    model: Option<Arc<ModelState>>,
    ops: Option<Arc<Operators>>,
    cache: Vec<Option<Cached>>,
    pending: Option<Result<Aggregate>>,
}

impl LocalShard {
    pub fn new(data: ImageDataset) -> Self {
        let keys = (0..data.len()).map(|i| image_key(&data, i)).collect();
        let n = data.len();
        Self {
            data,
            keys,
            z: vec![Vec::new(); n],
            model: None,
            ops: None,
            cache: (0..n).map(|_| None).collect(),
            pending: None,
        }
    }

    /// Shard with given latents (`K x N`).
    pub fn with_latents(data: ImageDataset, z: &DMatrix<f64>) -> Result<Self> {
        if z.ncols() != data.len() {
            return Err(Error::Shape(format!(
                "{} latent columns for {} images",
                z.ncols(),
                data.len()
            )));
        }
        let mut s = Self::new(data);
        s.z = (0..z.ncols()).map(|j| z.column(j).iter().copied().collect()).collect();
        Ok(s)
    }

    pub fn dataset(&self) -> &ImageDataset {
        &self.data
    }

    /// Latent modes as a `K x N` matrix.
    pub fn latents(&self) -> DMatrix<f64> {
        let k = self.z.first().map_or(0, |c| c.len());
        DMatrix::from_fn(k, self.z.len(), |r, c| self.z[c][r])
    }

    fn model(&self) -> Result<&Arc<ModelState>> {
        self.model
            .as_ref()
            .ok_or_else(|| Error::Worker("no model has been set".into()))
    }

    fn check_latents(&self, k: usize) -> Result<()> {
        if self.z.iter().any(|c| c.len() != k) {
            return Err(Error::Worker(format!(
                "latent variables are not initialised with {k} components"
            )));
        }
        Ok(())
    }

    fn velocity_key(model: &ModelState, v: &[f64]) -> u64 {
        let bits: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
        let omega: Vec<u8> = model.hyper.omega_v.iter().flat_map(|x| x.to_le_bytes()).collect();
        fnv1a(&[&bits, &omega, &model.hyper.shoot_steps.to_le_bytes()])
    }

    fn warp(model: &ModelState, ops: &Operators, z: &[f64]) -> Result<(u64, Sampler)> {
        let v = model.velocity(z);
        let key = Self::velocity_key(model, &v);
        let def = shoot(&v, &ops.l_v, model.hyper.shoot_steps)?;
        Ok((key, def.sampler()))
    }

    /// Makes sure every image has the warp of its current latents cached.
    fn refresh_warps(&mut self) -> Result<()> {
        let model = self.model()?.clone();
        let ops = self.ops.clone().expect("operators accompany the model");
        self.check_latents(model.k())?;
        let stale: Vec<usize> = (0..self.data.len())
            .filter(|&i| {
                let key = Self::velocity_key(&model, &model.velocity(&self.z[i]));
                !matches!(&self.cache[i], Some(c) if c.key == key)
            })
            .collect();
        let z = &self.z;
        let fresh = map_indexed(stale.len(), |j| Self::warp(&model, &ops, &z[stale[j]]));
        for (i, r) in stale.into_iter().zip(fresh) {
            let (key, sampler) = r?;
            self.cache[i] = Some(Cached {
                key,
                sampler: Arc::new(sampler),
            });
        }
        Ok(())
    }

    fn sampler(&self, i: usize) -> &Sampler {
        &self.cache[i].as_ref().expect("warps refreshed").sampler
    }

    /// Answers a request directly.
    pub fn handle(&mut self, req: &Request) -> Result<Aggregate> {
        match req {
            Request::InitLatents { k, seed } => {
                let (k, seed) = (*k, *seed);
                for i in 0..self.data.len() {
                    self.z[i] = raw_latent(seed, self.keys[i], k);
                }
                let mut count = ExactVec::zeros(1);
                count.add_at(0, self.data.len() as f64);
                Ok(vec![self.gram(k), count])
            }
            Request::ApplyTransform { t } => {
                let k = t.nrows();
                if t.ncols() != k {
                    return Err(Error::Shape("transform must be square".into()));
                }
                self.check_latents(k)?;
                for z in self.z.iter_mut() {
                    *z = (t * DVector::from_column_slice(z)).iter().copied().collect();
                }
                Ok(Vec::new())
            }
            Request::Gram => {
                let k = self.model()?.k();
                self.check_latents(k)?;
                Ok(vec![self.gram(k)])
            }
            Request::UpdateLatents { p } => self.update_latents(p),
            _ => {
                self.refresh_warps()?;
                self.image_sums(req)
            }
        }
    }

    fn gram(&self, k: usize) -> ExactVec {
        let mut g = ExactVec::zeros(k * k);
        for z in &self.z {
            for r in 0..k {
                for c in 0..k {
                    g.add_at(r * k + c, z[r] * z[c]);
                }
            }
        }
        g
    }

    fn image_sums(&self, req: &Request) -> Result<Aggregate> {
        let model = self.model()?;
        let noise = model.noise();
        let grid = &model.grid;
        let m = grid.voxels();
        let nd = grid.ndim();
        let c = model.channels;
        let h = &model.hyper;
        let widths: Vec<usize> = match req {
            Request::Mean => vec![c * m, c * c * m, 1],
            Request::Shape => vec![h.k_v * nd * m, h.k_v * nd * nd * m, 1],
            Request::Appearance => vec![h.k_a * c * m, h.k_a * c * c * m, 1],
            Request::Objective => vec![1],
            Request::Sigma2 => vec![c, 1],
            _ => unreachable!("handled elsewhere"),
        };
        run_indexed(self.data.len(), &widths, |i, acc| {
            let f = self.data.image(i);
            let mask = self.data.mask(i);
            let z = &self.z[i];
            let a = model.appearance(z);
            let sampler = self.sampler(i);
            match req {
                Request::Objective => {
                    acc[0].add_at(0, energy(&noise, &f, &sampler.pull(&a), mask)?);
                }
                Request::Sigma2 => {
                    let (sse, count) = sigma2_contribution(&f, &sampler.pull(&a), mask);
                    acc[0].add(&sse);
                    acc[1].add_at(0, count as f64);
                }
                Request::Mean => {
                    let d = derivatives(&noise, &f, &a, sampler, mask)?;
                    acc[0].add(&d.g);
                    acc[1].add(&d.h.data);
                    acc[2].add_at(0, d.j);
                }
                Request::Appearance => {
                    let d = derivatives(&noise, &f, &a, sampler, mask)?;
                    let (gw, hw) = (c * m, c * c * m);
                    for k in 0..h.k_a {
                        let zk = z[h.app_index(k)];
                        add_range(&mut acc[0], k * gw, zk, &d.g);
                        add_range(&mut acc[1], k * hw, zk * zk, &d.h.data);
                    }
                    acc[2].add_at(0, d.j);
                }
                Request::Shape => {
                    let d = derivatives(&noise, &f, &a, sampler, mask)?;
                    let (gv, hv) = shape_terms(grid, c, &a, &d.g, &d.h.data);
                    let (gw, hw) = (nd * m, nd * nd * m);
                    for k in 0..h.k_v {
                        let zk = z[h.shape_index(k)];
                        add_range(&mut acc[0], k * gw, zk, &gv);
                        add_range(&mut acc[1], k * hw, zk * zk, &hv);
                    }
                    acc[2].add_at(0, d.j);
                }
                _ => unreachable!(),
            }
            Ok(())
        })
    }

    fn update_latents(&mut self, p: &DMatrix<f64>) -> Result<Aggregate> {
        self.refresh_warps()?;
        let model = self.model()?.clone();
        let ops = self.ops.clone().expect("operators accompany the model");
        let k = model.k();
        if p.nrows() != k || p.ncols() != k {
            return Err(Error::Shape(format!("latent precision must be {k} x {k}")));
        }
        let n = self.data.len();
        let results = map_indexed(n, |i| {
            latent_step(
                &model,
                &ops,
                p,
                &self.data.image(i),
                self.data.mask(i),
                &self.z[i],
                self.sampler(i),
            )
        });
        let mut s = ExactVec::zeros(k * k);
        let mut cz = ExactVec::zeros(k * k);
        let mut j = ExactVec::zeros(1);
        for (i, r) in results.into_iter().enumerate() {
            let step = r?;
            s.add(step.cov.transpose().as_slice());
            for a in 0..k {
                for b in 0..k {
                    cz.add_at(a * k + b, step.z[a] * step.z[b]);
                }
            }
            j.add_at(0, step.j);
            if let Some((key, sampler)) = step.warp {
                self.cache[i] = Some(Cached {
                    key,
                    sampler: Arc::new(sampler),
                });
            }
            self.z[i] = step.z;
        }
        let mut count = ExactVec::zeros(1);
        count.add_at(0, n as f64);
        Ok(vec![s, cz, j, count])
    }
}

fn add_range(acc: &mut ExactVec, offset: usize, scale: f64, xs: &[f64]) {
    if scale == 0.0 {
        return;
    }
    for (i, &x) in xs.iter().enumerate() {
        acc.add_at(offset + i, scale * x);
    }
}

/// Shape gradient and Hessian of one image from its pushed appearance
/// derivatives: `-D^T g` and `D^T H D` with `D` the template gradient.
///
/// The minus sign comes from sampling at `x - v`: a small velocity moves
/// the prediction by `-grad(a) . v`.
pub(crate) fn shape_terms(
    grid: &crate::grid::Grid,
    channels: usize,
    a: &[f64],
    g: &[f64],
    h: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let m = grid.voxels();
    let nd = grid.ndim();
    let c = channels;
    let grad = spatial_gradient(grid, a);
    let da = |ch: usize, d: usize| &grad[(ch * nd + d) * m..(ch * nd + d + 1) * m];
    let mut gv = vec![0.0; nd * m];
    let mut hv = vec![0.0; nd * nd * m];
    for d in 0..nd {
        for ch in 0..c {
            let gd = da(ch, d);
            for v in 0..m {
                gv[d * m + v] -= gd[v] * g[ch * m + v];
            }
        }
    }
    for d in 0..nd {
        for e in 0..nd {
            let out = &mut hv[(d * nd + e) * m..(d * nd + e + 1) * m];
            for ci in 0..c {
                for cj in 0..c {
                    let hij = &h[(ci * c + cj) * m..(ci * c + cj + 1) * m];
                    let (gd, ge) = (da(ci, d), da(cj, e));
                    for v in 0..m {
                        out[v] += gd[v] * hij[v] * ge[v];
                    }
                }
            }
        }
    }
    (gv, hv)
}

/// Latent Jacobian columns `B = W_a - D W_v` (each `C x M`).
pub(crate) fn latent_jacobian(model: &ModelState, a: &[f64]) -> Vec<Vec<f64>> {
    let grid = &model.grid;
    let m = grid.voxels();
    let nd = grid.ndim();
    let c = model.channels;
    let h = &model.hyper;
    let mut b = vec![vec![0.0; c * m]; h.k()];
    for (k, col) in model.w_a.iter().enumerate() {
        for (x, w) in b[h.app_index(k)].iter_mut().zip(col) {
            *x += w;
        }
    }
    if !model.w_v.is_empty() {
        let grad = spatial_gradient(grid, a);
        for (k, col) in model.w_v.iter().enumerate() {
            let dst = &mut b[h.shape_index(k)];
            for ch in 0..c {
                for d in 0..nd {
                    let gd = &grad[(ch * nd + d) * m..(ch * nd + d + 1) * m];
                    let wd = &col[d * m..(d + 1) * m];
                    for v in 0..m {
                        dst[ch * m + v] -= gd[v] * wd[v];
                    }
                }
            }
        }
    }
    b
}

/// Gradient and Gauss-Newton Hessian of one image's likelihood with respect to its latents.
pub(crate) fn latent_derivatives(
    model: &ModelState,
    f: &[f64],
    mask: &[bool],
    z: &[f64],
    sampler: &Sampler,
) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
    let k = model.k();
    let m = model.grid.voxels();
    let c = model.channels;
    let a = model.appearance(z);
    let d = derivatives(&model.noise(), f, &a, sampler, mask)?;
    let b = latent_jacobian(model, &a);
    let mut g = DVector::zeros(k);
    let mut hmat = DMatrix::zeros(k, k);
    // H' B_l for each l, then inner products
    let hb: Vec<Vec<f64>> = b
        .iter()
        .map(|bl| {
            let mut out = vec![0.0; c * m];
            d.h.mul_vec(bl, &mut out);
            out
        })
        .collect();
    for i in 0..k {
        g[i] = b[i].iter().zip(&d.g).map(|(x, y)| x * y).sum();
        for j in i..k {
            let v: f64 = b[i].iter().zip(&hb[j]).map(|(x, y)| x * y).sum();
            hmat[(i, j)] = v;
            hmat[(j, i)] = v;
        }
    }
    Ok((d.j, g, hmat))
}

pub(crate) struct LatentStep {
    pub z: Vec<f64>,
    pub cov: DMatrix<f64>,
    pub j: f64,
    pub warp: Option<(u64, Sampler)>,
}

/// Likelihood of one image at latents `z`, with the warp it used.
pub(crate) fn image_energy(
    model: &ModelState,
    ops: &Operators,
    f: &[f64],
    mask: &[bool],
    z: &[f64],
) -> Result<(f64, u64, Sampler)> {
    let (key, sampler) = LocalShard::warp(model, ops, z)?;
    let j = energy(&model.noise(), f, &sampler.pull(&model.appearance(z)), mask)?;
    Ok((j, key, sampler))
}

pub(crate) const MAX_HALVINGS: usize = 6;

/// One Gauss-Newton step on `J(z) + z^T P z / 2` with backtracking.
pub(crate) fn latent_step(
    model: &ModelState,
    ops: &Operators,
    p: &DMatrix<f64>,
    f: &[f64],
    mask: &[bool],
    z: &[f64],
    sampler: &Sampler,
) -> Result<LatentStep> {
    let zv = DVector::from_column_slice(z);
    let (j0, g, h) = latent_derivatives(model, f, mask, z, sampler)?;
    let a = &h + p;
    let chol = a
        .clone()
        .cholesky()
        .ok_or(Error::Singular("latent Hessian plus precision"))?;
    let cov = chol.inverse();
    let delta = chol.solve(&(&g + p * &zv));
    let prior = |x: &DVector<f64>| 0.5 * x.dot(&(p * x));
    let f0 = j0 + prior(&zv);
    let mut alpha = 1.0;
    for _ in 0..=MAX_HALVINGS {
        let zt = &zv - &delta * alpha;
        let (jt, key, st) = image_energy(model, ops, f, mask, zt.as_slice())?;
        if jt + prior(&zt) <= f0 {
            return Ok(LatentStep {
                z: zt.iter().copied().collect(),
                cov: (&cov + cov.transpose()) * 0.5,
                j: jt,
                warp: Some((key, st)),
            });
        }
        alpha *= 0.5;
    }
    Ok(LatentStep {
        z: z.to_vec(),
        cov: (&cov + cov.transpose()) * 0.5,
        j: j0,
        warp: None,
    })
}

impl Shard for LocalShard {
    fn set_model(&mut self, model: &ModelState) -> Result<()> {
        model.check_dataset(&self.data)?;
        let rebuild = match (&self.model, &self.ops) {
            (Some(old), Some(_)) => old.grid != model.grid || {
                let (a, b) = (&old.hyper, &model.hyper);
                a.omega_v != b.omega_v || a.omega_a != b.omega_a || a.omega_mu != b.omega_mu
            },
            _ => true,
        };
        if rebuild {
            self.ops = Some(Arc::new(Operators::new(&model.grid, &model.hyper)?));
        }
        self.model = Some(Arc::new(model.clone()));
        Ok(())
    }

    fn submit(&mut self, req: &Request) -> Result<()> {
        let r = self.handle(req);
        self.pending = Some(r);
        Ok(())
    }

    fn collect(&mut self) -> Result<Aggregate> {
        self.pending
            .take()
            .unwrap_or_else(|| Err(Error::Worker("no request pending".into())))
    }
}
