//! Model and latent state, latent initialisation and the `SAMM` checkpoint.
//!
//! A checkpoint uses the same framing as `SAMD` with magic `"SAMM"`. Its
//! JSON header lists the arrays `mu`, `W_a`, `W_v`, `A_hat` and `sigma2`
//! with byte offsets into a payload of little-endian `f64`.

use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{read_framing, write_framing, ImageDataset};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::hyper::HyperParams;
use crate::likelihood::{NoiseKind, NoiseModel};
use crate::operators::{make_scalar_kernel, make_vector_kernel, OperatorKernel};

pub const SAMM_MAGIC: &[u8; 4] = b"SAMM";

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub grid: Grid,
    pub channels: usize,
    /// `C x M` mean.
    pub mu: Vec<f64>,
    /// `K_a` columns of `C x M`.
    pub w_a: Vec<Vec<f64>>,
    /// `K_v` columns of `D x M` initial velocities.
    pub w_v: Vec<Vec<f64>>,
    /// `K x K` latent precision.
    pub a_hat: DMatrix<f64>,
    /// Per-channel noise variance (Gaussian only).
    pub sigma2: Vec<f64>,
    pub hyper: HyperParams,
}

/// The three regularisation operators of a model.
#[derive(Debug, Clone)]
pub struct Operators {
    pub l_v: OperatorKernel,
    pub l_a: OperatorKernel,
    pub l_mu: OperatorKernel,
}

impl Operators {
    pub fn new(grid: &Grid, hyper: &HyperParams) -> Result<Self> {
        Ok(Self {
            l_v: make_vector_kernel(grid, &hyper.omega_v)?,
            l_a: make_scalar_kernel(grid, &hyper.omega_a)?,
            l_mu: make_scalar_kernel(grid, &hyper.omega_mu)?,
        })
    }
}

impl ModelState {
    /// Zero mean and bases, prior-only precision.
    pub fn new(grid: Grid, channels: usize, hyper: HyperParams) -> Result<Self> {
        hyper.validate()?;
        let m = grid.voxels();
        let nd = grid.ndim();
        let k = hyper.k();
        Ok(Self {
            mu: vec![0.0; channels * m],
            w_a: vec![vec![0.0; channels * m]; hyper.k_a],
            w_v: vec![vec![0.0; nd * m]; hyper.k_v],
            a_hat: DMatrix::identity(k, k),
            sigma2: vec![1.0; channels],
            grid,
            channels,
            hyper,
        })
    }

    pub fn k(&self) -> usize {
        self.hyper.k()
    }

    pub fn noise(&self) -> NoiseModel {
        NoiseModel {
            kind: self.hyper.noise,
            sigma2: self.sigma2.clone(),
        }
    }

    /// Un-warped appearance `mu + W_a z`.
    pub fn appearance(&self, z: &[f64]) -> Vec<f64> {
        let mut a = self.mu.clone();
        for (k, col) in self.w_a.iter().enumerate() {
            let zk = z[self.hyper.app_index(k)];
            if zk != 0.0 {
                for (x, w) in a.iter_mut().zip(col) {
                    *x += zk * w;
                }
            }
        }
        a
    }

    /// Initial velocity `W_v z`.
    pub fn velocity(&self, z: &[f64]) -> Vec<f64> {
        let mut v = vec![0.0; self.grid.ndim() * self.grid.voxels()];
        for (k, col) in self.w_v.iter().enumerate() {
            let zk = z[self.hyper.shape_index(k)];
            if zk != 0.0 {
                for (x, w) in v.iter_mut().zip(col) {
                    *x += zk * w;
                }
            }
        }
        v
    }

    /// `C = W_v^T L_v W_v + W_a^T L_a W_a` in latent coordinates.
    pub fn regulariser_gram(&self, ops: &Operators) -> Result<DMatrix<f64>> {
        let k = self.k();
        let mut c = DMatrix::zeros(k, k);
        for (cols, kernel, index) in [
            (&self.w_a, &ops.l_a, &(|j| self.hyper.app_index(j)) as &dyn Fn(usize) -> usize),
            (&self.w_v, &ops.l_v, &|j| self.hyper.shape_index(j)),
        ] {
            let lw: Vec<Vec<f64>> = cols.iter().map(|w| kernel.apply(w)).collect::<Result<_>>()?;
            for i in 0..cols.len() {
                for j in 0..cols.len() {
                    let d: f64 = cols[i].iter().zip(&lw[j]).map(|(a, b)| a * b).sum();
                    c[(index(i), index(j))] += d;
                }
            }
        }
        Ok((&c + c.transpose()) * 0.5)
    }

    pub fn check_dataset(&self, ds: &ImageDataset) -> Result<()> {
        if ds.grid() != &self.grid || ds.channels() != self.channels {
            return Err(Error::Shape(format!(
                "dataset {:?} x {} does not match model {:?} x {}",
                ds.grid().dims(),
                ds.channels(),
                self.grid.dims(),
                self.channels
            )));
        }
        if ds.kind().noise_kind() != Some(self.hyper.noise) {
            return Err(Error::Dataset(format!(
                "{:?} data cannot be modelled with {} noise",
                ds.kind(),
                self.hyper.noise.name()
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let m = self.grid.voxels();
        let c = self.channels;
        let k = self.k();
        let arrays: Vec<(&str, Vec<usize>, Vec<f64>)> = vec![
            ("mu", vec![c, m], self.mu.clone()),
            ("W_a", vec![self.w_a.len(), c, m], self.w_a.concat()),
            ("W_v", vec![self.w_v.len(), self.grid.ndim(), m], self.w_v.concat()),
            ("A_hat", vec![k, k], self.a_hat.transpose().as_slice().to_vec()),
            ("sigma2", vec![c], self.sigma2.clone()),
        ];
        let mut offset = 0;
        let mut entries = Vec::new();
        for (name, shape, data) in &arrays {
            entries.push(ArrayEntry {
                name: name.to_string(),
                offset,
                shape: shape.clone(),
            });
            offset += 8 * data.len();
        }
        let header = SammHeader {
            grid: self.grid.dims().to_vec(),
            channels: c,
            kind: self.hyper.noise,
            hyper: self.hyper.clone(),
            arrays: entries,
        };
        let header = serde_json::to_vec(&header).expect("header serialises");
        let mut out = write_framing(SAMM_MAGIC, &header, offset);
        for (_, _, data) in arrays {
            for x in data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, payload): (SammHeader, &[u8]) = read_framing(bytes, SAMM_MAGIC)?;
        let grid = Grid::new(&header.grid)?;
        let hyper = header.hyper;
        hyper.validate()?;
        if hyper.noise != header.kind {
            return Err(Error::Format("noise kind disagrees with hyper-parameters".into()));
        }
        let c = header.channels;
        let m = grid.voxels();
        let nd = grid.ndim();
        let k = hyper.k();
        let get = |name: &str, shape: &[usize]| -> Result<Vec<f64>> {
            let e = header
                .arrays
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| Error::Format(format!("missing array {name}")))?;
            if e.shape != shape {
                return Err(Error::Format(format!(
                    "array {name} has shape {:?}, expected {shape:?}",
                    e.shape
                )));
            }
            let len: usize = shape.iter().product();
            let bytes = payload
                .get(e.offset..e.offset + 8 * len)
                .ok_or_else(|| Error::Format(format!("array {name} runs past the payload")))?;
            Ok(bytes
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect())
        };
        let mu = get("mu", &[c, m])?;
        let w_a = get("W_a", &[hyper.k_a, c, m])?;
        let w_v = get("W_v", &[hyper.k_v, nd, m])?;
        let a_hat = get("A_hat", &[k, k])?;
        let sigma2 = get("sigma2", &[c])?;
        Ok(Self {
            mu,
            w_a: w_a.chunks(c * m).map(|x| x.to_vec()).collect(),
            w_v: w_v.chunks(nd * m).map(|x| x.to_vec()).collect(),
            a_hat: DMatrix::from_row_slice(k, k, &a_hat),
            sigma2,
            grid,
            channels: c,
            hyper,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    offset: usize,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SammHeader {
    grid: Vec<usize>,
    channels: usize,
    kind: NoiseKind,
    hyper: HyperParams,
    arrays: Vec<ArrayEntry>,
}

/// Latent modes and their sufficient statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    /// `K x N`.
    pub z: DMatrix<f64>,
    /// Sum of per-image posterior covariances.
    pub s: DMatrix<f64>,
    /// `Z Z^T`.
    pub cz: DMatrix<f64>,
}

/// 64-bit FNV-1a.
pub(crate) fn fnv1a(chunks: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for c in chunks {
        for &b in *c {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Standard-normal latent draw keyed by `(seed, key)`.
pub fn raw_latent(seed: u64, key: u64, k: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(&[&seed.to_le_bytes(), &key.to_le_bytes()]));
    (0..k).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Key of an image derived from its content, so that a draw does not depend
/// on where the image sits in the dataset.
pub fn image_key(ds: &ImageDataset, i: usize) -> u64 {
    let img = ds.image(i);
    let bytes: Vec<u8> = img
        .iter()
        .flat_map(|x| if x.is_nan() { [0xff; 8] } else { x.to_le_bytes() })
        .collect();
    fnv1a(&[&bytes])
}

/// `G^-1/2` for a symmetric positive-definite Gram matrix.
pub fn inverse_sqrt(gram: &DMatrix<f64>, k: usize, n: usize) -> Result<DMatrix<f64>> {
    let eig = gram.clone().symmetric_eigen();
    let max = eig.eigenvalues.max();
    if !(max > 0.0) || eig.eigenvalues.min() <= 1e-12 * max {
        return Err(Error::Rank { k, n });
    }
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|x| 1.0 / x.sqrt()));
    let w = &eig.eigenvectors * d * eig.eigenvectors.transpose();
    Ok((&w + w.transpose()) * 0.5)
}

/// `sqrt(N) G^-1/2`: maps latents with Gram `G` to unit-variance rows.
pub fn whitening(gram: &DMatrix<f64>, k: usize, n: usize) -> Result<DMatrix<f64>> {
    Ok(inverse_sqrt(gram, k, n)? * (n as f64).sqrt())
}

/// Random latents with `Z Z^T = N I`.
pub fn init_latents(n: usize, k: usize, seed: u64) -> Result<LatentState> {
    if k > n {
        return Err(Error::Rank { k, n });
    }
    if k == 0 {
        return Err(Error::Hyper("at least one latent component is required".into()));
    }
    let mut z = DMatrix::zeros(k, n);
    for j in 0..n {
        let col = raw_latent(seed, j as u64, k);
        z.set_column(j, &nalgebra::DVector::from_vec(col));
    }
    let gram = &z * z.transpose();
    let z = whitening(&gram, k, n)? * z;
    let cz = &z * z.transpose();
    Ok(LatentState {
        z,
        s: DMatrix::zeros(k, k),
        cz,
    })
}
