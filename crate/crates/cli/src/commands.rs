use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};

use sam_core::dataset::ImageDataset;
use sam_core::distrib::{master_train, serve_worker};
use sam_core::inference::{classify, fit_dataset, FeatureTable, Inference};
use sam_core::likelihood::NoiseKind;
use sam_core::model::ModelState;
use sam_core::pnm::tile;
use sam_core::synthetic::{blobs, mask_rectangles, BlobOptions};
use sam_core::trainer::{train_with, TrainOptions, TrainReport};
use sam_core::xval::cross_validate;
use sam_core::{Error, Result};

use crate::{ClassifyArgs, Command, DistributedArgs, FitArgs, ImputeArgs, SampleArgs, ServeArgs, SynthArgs, TrainArgs, XvalArgs};

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(a) => train_cmd(a),
        Command::Fit(a) => fit_cmd(a),
        Command::Classify(a) => classify_cmd(a),
        Command::Sample(a) => sample_cmd(a),
        Command::Impute(a) => impute_cmd(a),
        Command::Xval(a) => xval_cmd(a),
        Command::ServeWorker(a) => serve_cmd(a),
        Command::TrainDistributed(a) => distributed_cmd(a),
        Command::Synth(a) => synth_cmd(a),
    }
}

fn log_path(out: &Path, log: Option<PathBuf>) -> PathBuf {
    log.unwrap_or_else(|| {
        let mut s = out.as_os_str().to_owned();
        s.push(".jsonl");
        PathBuf::from(s)
    })
}

fn finish(model: &ModelState, report: &TrainReport, out: &Path, log: Option<PathBuf>) -> Result<()> {
    model.save(out)?;
    fs::write(log_path(out, log), report.to_jsonl())?;
    println!(
        "objective {:.6} -> {:.6} over {} iterations",
        report.initial.total(),
        report.final_objective(),
        report.iterations.len()
    );
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let ds = ImageDataset::load(&a.data)?;
    let hyper = a.model.hyper()?;
    let (model, _, report) = train_with(&ds, &hyper, a.model.seed, &TrainOptions::default())?;
    finish(&model, &report, &a.out, a.log)
}

fn fit_cmd(a: FitArgs) -> Result<()> {
    let inf = Inference::new(ModelState::load(&a.model)?)?;
    let ds = ImageDataset::load(&a.data)?;
    let posts = fit_dataset(&inf, &ds, a.iters)?;
    FeatureTable::from_posteriors(&posts).save(&a.out)
}

fn classify_cmd(a: ClassifyArgs) -> Result<()> {
    let models: Vec<Inference> = a
        .models
        .iter()
        .map(|p| Inference::new(ModelState::load(p)?))
        .collect::<Result<_>>()?;
    let n = models.len();
    let priors = a.priors.unwrap_or_else(|| vec![1.0 / n as f64; n]);
    let ds = ImageDataset::load(&a.data)?;
    for m in &models {
        m.model().check_dataset(&ds)?;
    }
    let mut out = String::from("image");
    for p in &a.models {
        let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        out.push_str(&format!(",p_{stem}"));
    }
    out.push_str(",predicted\n");
    for i in 0..ds.len() {
        let probs = classify(&ds.image(i), ds.mask(i), &models, &priors)?;
        let best = probs
            .iter()
            .enumerate()
            .fold(0, |b, (j, &p)| if p > probs[b] { j } else { b });
        out.push_str(&i.to_string());
        for p in &probs {
            out.push_str(&format!(",{p}"));
        }
        out.push_str(&format!(",{best}\n"));
    }
    fs::write(&a.out, out)?;
    Ok(())
}

fn display_range(kind: NoiseKind, images: &[Vec<f64>]) -> (f64, f64) {
    match kind {
        NoiseKind::Gaussian => images
            .iter()
            .flatten()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x))),
        _ => (0.0, 1.0),
    }
}

fn sample_cmd(a: SampleArgs) -> Result<()> {
    let inf = Inference::new(ModelState::load(&a.model)?)?;
    let model = inf.model();
    let k = model.k();
    let (images, cols) = if a.modes {
        let cov = model
            .a_hat
            .clone()
            .try_inverse()
            .ok_or(Error::Singular("latent precision"))?;
        let cols = a.cols.max(2);
        let mut images = Vec::with_capacity(k * cols);
        for r in 0..k {
            let sd = cov[(r, r)].max(0.0).sqrt();
            for c in 0..cols {
                let t = -a.sd + 2.0 * a.sd * c as f64 / (cols - 1) as f64;
                let mut z = vec![0.0; k];
                z[r] = t * sd;
                images.push(inf.reconstruct(&z)?);
            }
        }
        (images, cols)
    } else {
        let z = inf.sample_latents(a.rows * a.cols, a.seed)?;
        let images = (0..a.rows * a.cols)
            .map(|j| inf.reconstruct(z.column(j).as_slice()))
            .collect::<Result<Vec<_>>>()?;
        (images, a.cols)
    };
    let (lo, hi) = display_range(model.hyper.noise, &images);
    let raster = tile(&model.grid, model.channels, &images, cols, lo, hi)?;
    fs::write(&a.out, raster.encode())?;
    Ok(())
}

fn impute_cmd(a: ImputeArgs) -> Result<()> {
    let inf = Inference::new(ModelState::load(&a.model)?)?;
    let ds = ImageDataset::load(&a.data)?;
    inf.model().check_dataset(&ds)?;
    let filled = (0..ds.len())
        .map(|i| inf.impute(&ds.image(i), ds.mask(i)))
        .collect::<Result<Vec<_>>>()?;
    ImageDataset::from_images(ds.grid().clone(), ds.channels(), ds.kind(), &filled)?.save(&a.out)
}

fn xval_cmd(a: XvalArgs) -> Result<()> {
    let full = ImageDataset::load(&a.data)?;
    let mut scratch = full.clone();
    let hidden = mask_rectangles(&mut scratch, a.fraction, a.mask_seed);
    let base = a.model.base();
    let variants = a
        .variants
        .iter()
        .map(|v| Ok((*v, v.hyper(&base, a.model.k, a.model.split_a())?)))
        .collect::<Result<Vec<_>>>()?;
    let report = cross_validate(&full, &hidden, &variants, a.model.seed)?;
    println!("{:<12} {:>16} {:>12}", "variant", "heldout_loglik", "mse");
    for r in &report.rows {
        println!("{:<12} {:>16.3} {:>12.6}", r.variant.name(), r.heldout_loglik, r.mse);
    }
    println!("{:<12} {:>16} {:>12.6}", "mean-fill", "", report.mean_fill_mse);
    if let Some(out) = a.out {
        fs::write(out, report.to_csv())?;
    }
    Ok(())
}

fn serve_cmd(a: ServeArgs) -> Result<()> {
    let ds = ImageDataset::load(&a.data)?;
    let listener = TcpListener::bind(&a.listen)?;
    println!("listening on {}", listener.local_addr()?);
    serve_worker(ds, listener)
}

fn distributed_cmd(a: DistributedArgs) -> Result<()> {
    let hyper = a.model.hyper()?;
    let (model, report) = master_train(&a.workers, &hyper, a.model.seed, &TrainOptions::default())?;
    finish(&model, &report, &a.out, a.log)
}

fn synth_cmd(a: SynthArgs) -> Result<()> {
    let opts = BlobOptions {
        size: a.size,
        ..BlobOptions::default()
    };
    let (ds, _) = blobs(a.n, &opts, a.seed)?;
    ds.save(&a.out)
}
