//! Model fitting: alternating Gauss-Newton updates of the mean, the two
//! bases and the latent variables, with a variational update of the latent
//! precision and an orthogonalising reparameterisation after each sweep.

pub mod orth;
pub mod shard;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataset::ImageDataset;
use crate::error::{Error, Result};
use crate::exact::ExactVec;
use crate::field::{dot, BlockField};
use crate::grid::Grid;
use crate::hyper::HyperParams;
use crate::likelihood::{finish_sigma2, NoiseKind};
use crate::model::{whitening, LatentState, ModelState, Operators};
use crate::operators::{pcg, OperatorKernel, SolverOptions};

pub use orth::{off_diagonal_ratio, orthogonalise, orthogonalise_blocks, update_a};
pub use shard::{broadcast, gather, LocalShard, Request, Shard};

use shard::MAX_HALVINGS;

/// The negated joint log-probability split into its five parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveTerms {
    /// `sum_n J_n`.
    pub likelihood: f64,
    /// `mu^T L_mu mu / 2`.
    pub mean: f64,
    /// `lambda1 N Tr(C) / 2`.
    pub basis: f64,
    /// Wishart prior and `lambda1 Tr(C_z A) / 2`.
    pub wishart: f64,
    /// `lambda2 Tr(C_z C) / 2`.
    pub smoothness: f64,
}

impl ObjectiveTerms {
    pub fn total(&self) -> f64 {
        self.likelihood + self.mean + self.basis + self.wishart + self.smoothness
    }
}

/// Objective terms for a model given the summed likelihood and `C_z`.
pub fn objective_terms(
    model: &ModelState,
    ops: &Operators,
    cz: &DMatrix<f64>,
    likelihood: f64,
    n: usize,
) -> Result<ObjectiveTerms> {
    let h = &model.hyper;
    let k = model.k();
    let c = model.regulariser_gram(ops)?;
    let lmu = ops.l_mu.apply(&model.mu)?;
    let chol = model
        .a_hat
        .clone()
        .cholesky()
        .ok_or(Error::Singular("latent precision"))?;
    let ln_det: f64 = 2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
    let l0inv = h.lambda0_inverse()?;
    let nf = n as f64;
    Ok(ObjectiveTerms {
        likelihood,
        mean: 0.5 * dot(&model.mu, &lmu),
        basis: 0.5 * h.lambda1 * nf * c.trace(),
        wishart: -0.5
            * h.lambda1
            * ((nf + h.nu0 - k as f64 - 1.0) * ln_det - ((cz + l0inv) * &model.a_hat).trace()),
        smoothness: 0.5 * h.lambda2 * (cz * &c).trace(),
    })
}

/// One update inside an iteration and its effect on the objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub phase: String,
    pub before: f64,
    pub after: f64,
    pub halvings: usize,
    pub accepted: bool,
}

/// Diagnostics gathered around the orthogonalising transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformCheck {
    /// Off-diagonal ratio of `(T Z)(T Z)^T`, recomputed from the latents.
    pub latent_gram_ratio: f64,
    /// Off-diagonal ratio of `T^-T C T^-1`, recomputed from the bases.
    pub regulariser_ratio: f64,
    pub likelihood_before: f64,
    pub likelihood_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub objective: f64,
    pub terms: ObjectiveTerms,
    pub sigma2: Vec<f64>,
    /// Line-search halvings for the mean, shape and appearance updates.
    pub halvings: Vec<usize>,
    pub steps: Vec<StepRecord>,
    pub transform: Option<TransformCheck>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial: ObjectiveTerms,
    pub iterations: Vec<IterationRecord>,
}

#[derive(Serialize)]
struct LogLine<'a> {
    iter: usize,
    objective: f64,
    terms: &'a ObjectiveTerms,
    sigma2: &'a [f64],
    halvings: &'a [usize],
}

impl TrainReport {
    /// One JSON object per iteration.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for it in &self.iterations {
            let line = LogLine {
                iter: it.iter,
                objective: it.objective,
                terms: &it.terms,
                sigma2: &it.sigma2,
                halvings: &it.halvings,
            };
            out.push_str(&serde_json::to_string(&line).expect("plain data serialises"));
            out.push('\n');
        }
        out
    }

    pub fn final_objective(&self) -> f64 {
        self.iterations
            .last()
            .map_or(self.initial.total(), |it| it.objective)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    /// Recompute orthogonality and the likelihood around each transform.
    pub check_transform: bool,
    pub solver: SolverOptions,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            check_transform: false,
            solver: SolverOptions::default(),
        }
    }
}

fn to_matrix(v: &ExactVec, k: usize) -> DMatrix<f64> {
    let m = DMatrix::from_row_slice(k, k, &v.to_f64());
    (&m + m.transpose()) * 0.5
}

fn scalar(v: &ExactVec) -> f64 {
    v.to_f64()[0]
}

/// Applies `T` to the bases: `W <- W T^-1` in latent coordinates.
pub fn transform_model(model: &ModelState, t: &DMatrix<f64>) -> Result<ModelState> {
    let k = model.k();
    if t.shape() != (k, k) {
        return Err(Error::Shape(format!("transform must be {k} x {k}")));
    }
    let ti = t
        .clone()
        .try_inverse()
        .ok_or(Error::Singular("latent transform"))?;
    let h = &model.hyper;
    let mix = |cols: &[Vec<f64>], index: &dyn Fn(usize) -> usize| -> Result<Vec<Vec<f64>>> {
        let len = cols.first().map_or(0, |c| c.len());
        let mut out = vec![vec![0.0; len]; cols.len()];
        for (j, dst) in out.iter_mut().enumerate() {
            for (i, src) in cols.iter().enumerate() {
                let w = ti[(index(i), index(j))];
                if w != 0.0 {
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += w * s;
                    }
                }
            }
        }
        // Mixing with rows outside this basis would lose information.
        for i in 0..k {
            let inside = (0..cols.len()).any(|c| index(c) == i);
            for j in 0..cols.len() {
                if !inside && ti[(i, index(j))] != 0.0 {
                    return Err(Error::Shape("transform mixes appearance and shape latents".into()));
                }
            }
        }
        Ok(out)
    };
    let mut out = model.clone();
    out.w_a = mix(&model.w_a, &|i| h.app_index(i))?;
    out.w_v = mix(&model.w_v, &|i| h.shape_index(i))?;
    Ok(out)
}

struct Em<'s, S: Shard> {
    shards: &'s mut [S],
    ops: Operators,
    n: usize,
    solver: SolverOptions,
}

impl<S: Shard> Em<'_, S> {
    fn sum_j(&mut self, model: &ModelState) -> Result<f64> {
        broadcast(self.shards, model)?;
        Ok(scalar(&gather(self.shards, &Request::Objective)?[0]))
    }

    fn objective(&mut self, model: &ModelState, cz: &DMatrix<f64>) -> Result<ObjectiveTerms> {
        let j = self.sum_j(model)?;
        objective_terms(model, &self.ops, cz, j, self.n)
    }

    fn solve(&self, h: &BlockField, kernel: &OperatorKernel, weight: f64, rhs: &[f64], what: &str) -> Result<Vec<f64>> {
        let out = pcg(h, kernel, weight, rhs, self.solver)?;
        if !out.converged {
            log::warn!(
                "{what} solve stopped at relative residual {:.3e} after {} iterations; using best iterate",
                out.residual,
                out.iterations
            );
        }
        Ok(out.x)
    }

    /// Backtracking from a full step: accepts the first trial that does not
    /// raise the objective, otherwise restores `base`.
    fn line_search(
        &mut self,
        phase: &str,
        base: &ModelState,
        f0: ObjectiveTerms,
        cz: &DMatrix<f64>,
        trial: impl Fn(f64) -> ModelState,
    ) -> Result<(ModelState, ObjectiveTerms, StepRecord)> {
        let mut alpha = 1.0;
        for halvings in 0..=MAX_HALVINGS {
            let t = trial(alpha);
            let ft = self.objective(&t, cz)?;
            if ft.total() <= f0.total() {
                let rec = StepRecord {
                    phase: phase.into(),
                    before: f0.total(),
                    after: ft.total(),
                    halvings,
                    accepted: true,
                };
                return Ok((t, ft, rec));
            }
            alpha *= 0.5;
        }
        broadcast(self.shards, base)?;
        let rec = StepRecord {
            phase: phase.into(),
            before: f0.total(),
            after: f0.total(),
            halvings: MAX_HALVINGS,
            accepted: false,
        };
        Ok((base.clone(), f0, rec))
    }

    fn mean_step(
        &mut self,
        model: &ModelState,
        f0: ObjectiveTerms,
        cz: &DMatrix<f64>,
    ) -> Result<(ModelState, ObjectiveTerms, StepRecord)> {
        broadcast(self.shards, model)?;
        let agg = gather(self.shards, &Request::Mean)?;
        let (g, h) = mean_parts(model, &agg)?;
        let mut rhs = self.ops.l_mu.apply(&model.mu)?;
        for (r, gi) in rhs.iter_mut().zip(&g) {
            *r += gi;
        }
        let delta = self.solve(&h, &self.ops.l_mu, 1.0, &rhs, "mean")?;
        self.line_search("mean", model, f0, cz, |alpha| {
            let mut t = model.clone();
            for (m, d) in t.mu.iter_mut().zip(&delta) {
                *m -= alpha * d;
            }
            t
        })
    }

    fn sigma2_step(
        &mut self,
        model: &ModelState,
        f0: ObjectiveTerms,
        cz: &DMatrix<f64>,
    ) -> Result<(ModelState, ObjectiveTerms, StepRecord)> {
        broadcast(self.shards, model)?;
        let agg = gather(self.shards, &Request::Sigma2)?;
        let count = scalar(&agg[1]) as usize;
        let mut t = model.clone();
        t.sigma2 = finish_sigma2(&agg[0].to_f64(), count)?;
        let ft = self.objective(&t, cz)?;
        let accepted = ft.total() <= f0.total();
        let rec = StepRecord {
            phase: "sigma2".into(),
            before: f0.total(),
            after: if accepted { ft.total() } else { f0.total() },
            halvings: 0,
            accepted,
        };
        if accepted {
            Ok((t, ft, rec))
        } else {
            broadcast(self.shards, model)?;
            Ok((model.clone(), f0, rec))
        }
    }

    /// Per-column Gauss-Newton step for one basis, one step length for all columns.
    fn basis_step(
        &mut self,
        shape: bool,
        model: &ModelState,
        f0: ObjectiveTerms,
        cz: &DMatrix<f64>,
    ) -> Result<(ModelState, ObjectiveTerms, StepRecord)> {
        let h = &model.hyper;
        let phase = if shape { "shape" } else { "appearance" };
        broadcast(self.shards, model)?;
        let agg = gather(self.shards, if shape { &Request::Shape } else { &Request::Appearance })?;
        let parts = basis_parts(model, shape, &agg)?;
        let (kernel, cols) = if shape {
            (&self.ops.l_v, &model.w_v)
        } else {
            (&self.ops.l_a, &model.w_a)
        };
        let mut deltas = Vec::with_capacity(cols.len());
        for (k, (g, hk)) in parts.iter().enumerate() {
            let idx = if shape { h.shape_index(k) } else { h.app_index(k) };
            let weight = h.lambda1 * self.n as f64 + h.lambda2 * cz[(idx, idx)];
            let mut rhs = kernel.apply(&cols[k])?;
            for (r, gi) in rhs.iter_mut().zip(g) {
                *r = gi + weight * *r;
            }
            deltas.push(self.solve(hk, kernel, weight, &rhs, phase)?);
        }
        self.line_search(phase, model, f0, cz, |alpha| {
            let mut t = model.clone();
            let dst = if shape { &mut t.w_v } else { &mut t.w_a };
            for (w, d) in dst.iter_mut().zip(&deltas) {
                for (x, y) in w.iter_mut().zip(d) {
                    *x -= alpha * y;
                }
            }
            t
        })
    }
}

fn mean_parts(model: &ModelState, agg: &[ExactVec]) -> Result<(Vec<f64>, BlockField)> {
    let m = model.grid.voxels();
    let g = agg[0].to_f64();
    let h = BlockField::from_data(model.channels, m, agg[1].to_f64())?;
    Ok((g, h))
}

fn basis_parts(model: &ModelState, shape: bool, agg: &[ExactVec]) -> Result<Vec<(Vec<f64>, BlockField)>> {
    let m = model.grid.voxels();
    let (count, dim) = if shape {
        (model.hyper.k_v, model.grid.ndim())
    } else {
        (model.hyper.k_a, model.channels)
    };
    let g = agg[0].to_f64();
    let h = agg[1].to_f64();
    let (gw, hw) = (dim * m, dim * dim * m);
    (0..count)
        .map(|k| {
            Ok((
                g[k * gw..(k + 1) * gw].to_vec(),
                BlockField::from_data(dim, m, h[k * hw..(k + 1) * hw].to_vec())?,
            ))
        })
        .collect()
}

/// Everything the driver returns besides the model.
pub(crate) struct EmOutcome {
    pub model: ModelState,
    pub s: DMatrix<f64>,
    pub cz: DMatrix<f64>,
    pub report: TrainReport,
}

/// The training schedule, run against any set of shards.
pub(crate) fn run_em<S: Shard>(
    shards: &mut [S],
    grid: Grid,
    channels: usize,
    hyper: &HyperParams,
    seed: u64,
    opts: &TrainOptions,
) -> Result<EmOutcome> {
    hyper.validate()?;
    let k = hyper.k();
    let mut model = ModelState::new(grid, channels, hyper.clone())?;
    let ops = Operators::new(&model.grid, hyper)?;
    broadcast(shards, &model)?;
    let init = gather(shards, &Request::InitLatents { k, seed })?;
    let n = scalar(&init[1]) as usize;
    if k > n {
        return Err(Error::Rank { k, n });
    }
    let gram = to_matrix(&init[0], k);
    let w = whitening(&gram, k, n)?;
    gather(shards, &Request::ApplyTransform { t: w.clone() })?;
    let mut cz = to_matrix(&gather(shards, &Request::Gram)?[0], k);
    let mut s = DMatrix::zeros(k, k);
    let lambda0 = hyper.lambda0_matrix();

    let mut em = Em {
        shards,
        ops,
        n,
        solver: opts.solver,
    };
    let mut f = em.objective(&model, &cz)?;
    let mut report = TrainReport {
        initial: f,
        iterations: Vec::new(),
    };
    log::info!("initial objective {:.6e}", f.total());

    for iter in 1..=hyper.em_iters {
        let mut steps = Vec::new();
        let mut halvings = Vec::new();

        let (m2, f2, rec) = em.mean_step(&model, f, &cz)?;
        (model, f) = (m2, f2);
        halvings.push(rec.halvings);
        steps.push(rec);

        if hyper.noise == NoiseKind::Gaussian {
            let (m2, f2, rec) = em.sigma2_step(&model, f, &cz)?;
            (model, f) = (m2, f2);
            steps.push(rec);
        }

        for shape in [true, false] {
            let count = if shape { hyper.k_v } else { hyper.k_a };
            if count == 0 {
                halvings.push(0);
                continue;
            }
            let (m2, f2, rec) = em.basis_step(shape, &model, f, &cz)?;
            (model, f) = (m2, f2);
            halvings.push(rec.halvings);
            steps.push(rec);
        }

        // latents
        let c = model.regulariser_gram(&em.ops)?;
        let p = &model.a_hat * hyper.lambda1 + &c * hyper.lambda2;
        broadcast(em.shards, &model)?;
        let agg = gather(em.shards, &Request::UpdateLatents { p })?;
        s = to_matrix(&agg[0], k);
        cz = to_matrix(&agg[1], k);
        let before = f.total();
        f = objective_terms(&model, &em.ops, &cz, scalar(&agg[2]), n)?;
        steps.push(StepRecord {
            phase: "latents".into(),
            before,
            after: f.total(),
            halvings: 0,
            accepted: true,
        });

        // orthogonalise
        let t = orthogonalise_blocks(&c, &cz, &s, n, hyper.nu0, &lambda0, &hyper.latent_blocks())?;
        let j_before = f.likelihood;
        model = transform_model(&model, &t)?;
        gather(em.shards, &Request::ApplyTransform { t: t.clone() })?;
        cz = &t * &cz * t.transpose();
        cz = (&cz + cz.transpose()) * 0.5;
        s = &t * &s * t.transpose();
        s = (&s + s.transpose()) * 0.5;
        let before = f.total();
        f = em.objective(&model, &cz)?;
        steps.push(StepRecord {
            phase: "transform".into(),
            before,
            after: f.total(),
            halvings: 0,
            accepted: true,
        });
        let transform = if opts.check_transform {
            let gram = to_matrix(&gather(em.shards, &Request::Gram)?[0], k);
            let c_new = model.regulariser_gram(&em.ops)?;
            Some(TransformCheck {
                latent_gram_ratio: off_diagonal_ratio(&gram),
                regulariser_ratio: off_diagonal_ratio(&c_new),
                likelihood_before: j_before,
                likelihood_after: f.likelihood,
            })
        } else {
            None
        };

        // expected precision
        model.a_hat = update_a(&cz, &s, hyper.nu0, &lambda0, n)?;
        let before = f.total();
        f = objective_terms(&model, &em.ops, &cz, f.likelihood, n)?;
        steps.push(StepRecord {
            phase: "precision".into(),
            before,
            after: f.total(),
            halvings: 0,
            accepted: true,
        });

        log::info!("iteration {iter}: objective {:.6e}", f.total());
        report.iterations.push(IterationRecord {
            iter,
            objective: f.total(),
            terms: f,
            sigma2: model.sigma2.clone(),
            halvings,
            steps,
            transform,
        });
    }
    broadcast(em.shards, &model)?;
    Ok(EmOutcome { model, s, cz, report })
}

/// Trains a model on a dataset held in memory.
pub fn train(ds: &ImageDataset, hyper: &HyperParams, seed: u64) -> Result<(ModelState, LatentState, TrainReport)> {
    train_with(ds, hyper, seed, &TrainOptions::default())
}

pub fn train_with(
    ds: &ImageDataset,
    hyper: &HyperParams,
    seed: u64,
    opts: &TrainOptions,
) -> Result<(ModelState, LatentState, TrainReport)> {
    check_noise(ds, hyper)?;
    let mut shards = [LocalShard::new(ds.clone())];
    let out = run_em(&mut shards, ds.grid().clone(), ds.channels(), hyper, seed, opts)?;
    let z = shards[0].latents();
    Ok((
        out.model,
        LatentState {
            z,
            s: out.s,
            cz: out.cz,
        },
        out.report,
    ))
}

pub(crate) fn check_noise(ds: &ImageDataset, hyper: &HyperParams) -> Result<()> {
    match ds.kind().noise_kind() {
        Some(k) if k == hyper.noise => Ok(()),
        Some(k) => Err(Error::Dataset(format!(
            "{} data cannot be modelled with {} noise",
            k.name(),
            hyper.noise.name()
        ))),
        None => Err(Error::Dataset("feature containers cannot be used for training".into())),
    }
}

fn local_shard(ds: &ImageDataset, model: &ModelState, latents: &LatentState) -> Result<LocalShard> {
    let mut sh = LocalShard::with_latents(ds.clone(), &latents.z)?;
    sh.set_model(model)?;
    Ok(sh)
}

/// Summed likelihood over the dataset.
pub fn likelihood_sum(ds: &ImageDataset, model: &ModelState, latents: &LatentState) -> Result<f64> {
    let mut sh = local_shard(ds, model, latents)?;
    Ok(scalar(&sh.handle(&Request::Objective)?[0]))
}

/// Negated joint log-probability, by term.
pub fn objective_parts(ds: &ImageDataset, model: &ModelState, latents: &LatentState) -> Result<ObjectiveTerms> {
    let ops = Operators::new(&model.grid, &model.hyper)?;
    let cz = &latents.z * latents.z.transpose();
    let j = likelihood_sum(ds, model, latents)?;
    objective_terms(model, &ops, &cz, j, ds.len())
}

/// Negated joint log-probability.
pub fn objective(ds: &ImageDataset, model: &ModelState, latents: &LatentState) -> Result<f64> {
    Ok(objective_parts(ds, model, latents)?.total())
}

/// Summed gradient and Hessian of the likelihood with respect to the mean.
pub fn mean_derivatives(
    ds: &ImageDataset,
    model: &ModelState,
    latents: &LatentState,
) -> Result<(Vec<f64>, BlockField)> {
    let agg = local_shard(ds, model, latents)?.handle(&Request::Mean)?;
    mean_parts(model, &agg)
}

/// Per-column gradients and diagonal Hessian blocks for the appearance basis.
pub fn appearance_derivatives(
    ds: &ImageDataset,
    model: &ModelState,
    latents: &LatentState,
) -> Result<Vec<(Vec<f64>, BlockField)>> {
    let agg = local_shard(ds, model, latents)?.handle(&Request::Appearance)?;
    basis_parts(model, false, &agg)
}

/// Per-column gradients and diagonal Hessian blocks for the shape basis.
pub fn shape_derivatives(
    ds: &ImageDataset,
    model: &ModelState,
    latents: &LatentState,
) -> Result<Vec<(Vec<f64>, BlockField)>> {
    let agg = local_shard(ds, model, latents)?.handle(&Request::Shape)?;
    basis_parts(model, true, &agg)
}

/// Outcome of a single line-searched update.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub model: ModelState,
    pub record: StepRecord,
}

fn single_step(
    ds: &ImageDataset,
    model: &ModelState,
    latents: &LatentState,
    f: impl FnOnce(&mut Em<'_, LocalShard>, ObjectiveTerms, &DMatrix<f64>) -> Result<(ModelState, ObjectiveTerms, StepRecord)>,
) -> Result<StepOutcome> {
    let mut shards = [local_shard(ds, model, latents)?];
    let mut em = Em {
        shards: &mut shards,
        ops: Operators::new(&model.grid, &model.hyper)?,
        n: ds.len(),
        solver: SolverOptions::default(),
    };
    let cz = &latents.z * latents.z.transpose();
    let f0 = em.objective(model, &cz)?;
    let (model, _, record) = f(&mut em, f0, &cz)?;
    Ok(StepOutcome { model, record })
}

/// One line-searched Gauss-Newton step on the mean.
pub fn update_mean(ds: &ImageDataset, model: &ModelState, latents: &LatentState) -> Result<StepOutcome> {
    single_step(ds, model, latents, |em, f0, cz| em.mean_step(model, f0, cz))
}

/// One line-searched Gauss-Newton step on every appearance column.
pub fn update_appearance_basis(ds: &ImageDataset, model: &ModelState, latents: &LatentState) -> Result<StepOutcome> {
    single_step(ds, model, latents, |em, f0, cz| em.basis_step(false, model, f0, cz))
}

/// One line-searched Gauss-Newton step on every shape column.
pub fn update_shape_basis(ds: &ImageDataset, model: &ModelState, latents: &LatentState) -> Result<StepOutcome> {
    single_step(ds, model, latents, |em, f0, cz| em.basis_step(true, model, f0, cz))
}

/// One Gauss-Newton step on every image's latents under precision `p`.
pub fn update_latents(
    ds: &ImageDataset,
    model: &ModelState,
    latents: &LatentState,
    p: &DMatrix<f64>,
) -> Result<LatentState> {
    let k = model.k();
    let mut sh = local_shard(ds, model, latents)?;
    let agg = sh.handle(&Request::UpdateLatents { p: p.clone() })?;
    Ok(LatentState {
        z: sh.latents(),
        s: to_matrix(&agg[0], k),
        cz: to_matrix(&agg[1], k),
    })
}

/// Latent precision used by the latent update: `lambda1 A + lambda2 C`.
pub fn latent_precision(model: &ModelState, ops: &Operators) -> Result<DMatrix<f64>> {
    let c = model.regulariser_gram(ops)?;
    Ok(&model.a_hat * model.hyper.lambda1 + c * model.hyper.lambda2)
}

/// `W <- W T^-1`, `Z <- T Z`, `S <- T S T^T`, `C_z <- T C_z T^T`.
pub fn apply_transform(
    model: &ModelState,
    latents: &LatentState,
    t: &DMatrix<f64>,
) -> Result<(ModelState, LatentState)> {
    let m = transform_model(model, t)?;
    let l = LatentState {
        z: t * &latents.z,
        s: t * &latents.s * t.transpose(),
        cz: t * &latents.cz * t.transpose(),
    };
    Ok((m, l))
}
