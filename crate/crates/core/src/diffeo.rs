//! Geodesic shooting and the warping primitives built on it.
//!
//! A deformation is a dense periodic sampling map `psi` stored as absolute
//! voxel coordinates (`D` fields of `M` values). Warping an image means
//! sampling it at `psi(x)` with multilinear interpolation and periodic wrap;
//! `push` is the exact adjoint of that resampling.

use crate::error::{Error, Result};
use crate::field::BlockField;
use crate::grid::Grid;
use crate::operators::{KernelKind, OperatorKernel};

pub const DEFAULT_SHOOT_STEPS: usize = 8;

/// Dense sampling map with optional cached Jacobian.
#[derive(Debug, Clone, PartialEq)]
pub struct Deformation {
    pub grid: Grid,
    pub psi: Vec<f64>,
}

impl Deformation {
    pub fn identity(grid: &Grid) -> Self {
        Self {
            grid: grid.clone(),
            psi: grid.identity(),
        }
    }

    pub fn from_psi(grid: &Grid, psi: Vec<f64>) -> Result<Self> {
        if psi.len() != grid.ndim() * grid.voxels() {
            return Err(Error::Shape(format!(
                "sampling map needs {} values, got {}",
                grid.ndim() * grid.voxels(),
                psi.len()
            )));
        }
        Ok(Self {
            grid: grid.clone(),
            psi,
        })
    }

    /// `psi(x) - x`.
    pub fn displacement(&self) -> Vec<f64> {
        let id = self.grid.identity();
        self.psi.iter().zip(&id).map(|(p, x)| p - x).collect()
    }

    /// `self(other(x))`: sample this map at the points `other(x)`.
    pub fn compose(&self, other: &Deformation) -> Deformation {
        let disp = self.displacement();
        let moved = Sampler::new(&self.grid, &other.psi).pull(&disp);
        let psi = other.psi.iter().zip(&moved).map(|(a, b)| a + b).collect();
        Deformation {
            grid: self.grid.clone(),
            psi,
        }
    }

    pub fn sampler(&self) -> Sampler {
        Sampler::new(&self.grid, &self.psi)
    }
}

/// Precomputed interpolation stencil of a sampling map: the sparse matrix
/// `Psi` with at most `2^D` non-zeros per row.
#[derive(Debug, Clone)]
pub struct Sampler {
    voxels: usize,
    corners: usize,
    index: Vec<u32>,
    weight: Vec<f64>,
}

impl Sampler {
    pub fn new(grid: &Grid, psi: &[f64]) -> Self {
        let m = grid.voxels();
        let nd = grid.ndim();
        let dims = grid.dims();
        let strides = grid.strides();
        let corners = 1usize << nd;
        let mut index = Vec::with_capacity(m * corners);
        let mut weight = Vec::with_capacity(m * corners);
        for v in 0..m {
            let mut base = [0usize; 3];
            let mut frac = [0.0; 3];
            for d in 0..nd {
                let x = psi[d * m + v];
                let fl = x.floor();
                frac[d] = x - fl;
                base[d] = (fl as i64).rem_euclid(dims[d] as i64) as usize;
            }
            for c in 0..corners {
                let mut idx = 0;
                let mut w = 1.0;
                for d in 0..nd {
                    if c >> d & 1 == 1 {
                        idx += ((base[d] + 1) % dims[d]) * strides[d];
                        w *= frac[d];
                    } else {
                        idx += base[d] * strides[d];
                        w *= 1.0 - frac[d];
                    }
                }
                index.push(idx as u32);
                weight.push(w);
            }
        }
        Self {
            voxels: m,
            corners,
            index,
            weight,
        }
    }

    pub fn voxels(&self) -> usize {
        self.voxels
    }

    /// `Psi a` for each channel of a `C x M` image.
    pub fn pull(&self, image: &[f64]) -> Vec<f64> {
        let m = self.voxels;
        let mut out = vec![0.0; image.len()];
        for (src, dst) in image.chunks_exact(m).zip(out.chunks_exact_mut(m)) {
            for (v, o) in dst.iter_mut().enumerate() {
                let r = v * self.corners;
                let mut acc = 0.0;
                for k in r..r + self.corners {
                    acc += self.weight[k] * src[self.index[k] as usize];
                }
                *o = acc;
            }
        }
        out
    }

    /// `Psi^T f` for each channel of a `C x M` image.
    pub fn push(&self, image: &[f64]) -> Vec<f64> {
        let m = self.voxels;
        let mut out = vec![0.0; image.len()];
        for (src, dst) in image.chunks_exact(m).zip(out.chunks_exact_mut(m)) {
            for (v, &f) in src.iter().enumerate() {
                if f == 0.0 {
                    continue;
                }
                let r = v * self.corners;
                for k in r..r + self.corners {
                    dst[self.index[k] as usize] += self.weight[k] * f;
                }
            }
        }
        out
    }

    /// Pushes a per-voxel `C x C` block field, block entry by block entry.
    pub fn push_blocks(&self, blocks: &BlockField) -> BlockField {
        BlockField {
            dim: blocks.dim,
            voxels: blocks.voxels,
            data: self.push(&blocks.data),
        }
    }
}

pub fn pull(image: &[f64], psi: &Deformation) -> Result<Vec<f64>> {
    check_image(image, &psi.grid)?;
    Ok(psi.sampler().pull(image))
}

pub fn push(image: &[f64], psi: &Deformation) -> Result<Vec<f64>> {
    check_image(image, &psi.grid)?;
    Ok(psi.sampler().push(image))
}

fn check_image(image: &[f64], grid: &Grid) -> Result<()> {
    let m = grid.voxels();
    if image.is_empty() || image.len() % m != 0 {
        return Err(Error::Shape(format!(
            "image of length {} is not a whole number of {m}-voxel channels",
            image.len()
        )));
    }
    Ok(())
}

/// Central differences with periodic wrap; output is `C x D x M`.
pub fn spatial_gradient(grid: &Grid, image: &[f64]) -> Vec<f64> {
    let m = grid.voxels();
    let nd = grid.ndim();
    let mut out = Vec::with_capacity(image.len() * nd);
    for chan in image.chunks_exact(m) {
        for d in 0..nd {
            out.extend((0..m).map(|v| {
                0.5 * (chan[grid.neighbour(v, d, 1)] - chan[grid.neighbour(v, d, -1)])
            }));
        }
    }
    out
}

/// Jacobian `D psi` (entry `(i, j)` = d psi_i / d x_j) and its determinant.
///
/// Central differences are taken of the displacement `psi - id`, which is
/// periodic, so maps that wrap around the grid are handled correctly.
pub fn jacobian(def: &Deformation) -> (BlockField, Vec<f64>) {
    let grid = &def.grid;
    let m = grid.voxels();
    let nd = grid.ndim();
    let disp = def.displacement();
    let grad = spatial_gradient(grid, &disp);
    let mut jac = BlockField::zeros(nd, m);
    for i in 0..nd {
        for j in 0..nd {
            let g = &grad[(i * nd + j) * m..(i * nd + j + 1) * m];
            let e = jac.entry_mut(i, j);
            for v in 0..m {
                e[v] = g[v] + if i == j { 1.0 } else { 0.0 };
            }
        }
    }
    let det = (0..m).map(|v| block_det(&jac, v)).collect();
    (jac, det)
}

fn block_det(b: &BlockField, v: usize) -> f64 {
    let a = |i, j| b.entry(i, j)[v];
    match b.dim {
        2 => a(0, 0) * a(1, 1) - a(0, 1) * a(1, 0),
        _ => {
            a(0, 0) * (a(1, 1) * a(2, 2) - a(1, 2) * a(2, 1))
                - a(0, 1) * (a(1, 0) * a(2, 2) - a(1, 2) * a(2, 0))
                + a(0, 2) * (a(1, 0) * a(2, 1) - a(1, 1) * a(2, 0))
        }
    }
}

/// Euler integration of the geodesic from an initial velocity:
///
/// ```text
/// u0 = L v0; psi = id
/// repeat T times:
///     u = |D psi| (D psi)^T u0(psi)
///     v = L^-1 u
///     psi = psi(id - v/T)
/// ```
pub fn shoot(v0: &[f64], kernel: &OperatorKernel, steps: usize) -> Result<Deformation> {
    let grid = kernel.grid();
    if kernel.kind() != KernelKind::Vector {
        return Err(Error::Shape("shooting needs a vector kernel".into()));
    }
    if steps == 0 {
        return Err(Error::Hyper("shooting needs at least one step".into()));
    }
    let m = grid.voxels();
    let nd = grid.ndim();
    if v0.len() != nd * m {
        return Err(Error::Shape(format!(
            "velocity needs {} values, got {}",
            nd * m,
            v0.len()
        )));
    }
    if v0.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("initial velocity"));
    }
    let mut def = Deformation::identity(grid);
    if v0.iter().all(|&x| x == 0.0) {
        return Ok(def);
    }
    let u0 = kernel.apply(v0)?;
    let inv_t = 1.0 / steps as f64;
    let id = grid.identity();
    for step in 0..steps {
        let v = if step == 0 {
            v0.to_vec()
        } else {
            let (jac, det) = jacobian(&def);
            let moved = def.sampler().pull(&u0);
            let mut u = vec![0.0; nd * m];
            for i in 0..nd {
                for j in 0..nd {
                    let e = jac.entry(j, i);
                    let src = &moved[j * m..(j + 1) * m];
                    let dst = &mut u[i * m..(i + 1) * m];
                    for x in 0..m {
                        dst[x] += e[x] * src[x];
                    }
                }
            }
            for i in 0..nd {
                for x in 0..m {
                    u[i * m + x] *= det[x];
                }
            }
            kernel.greens(&u)?
        };
        // psi(x - v/T) = y + disp(y), y = x - v/T
        let y: Vec<f64> = id.iter().zip(&v).map(|(x, vi)| x - vi * inv_t).collect();
        let disp = def.displacement();
        let moved = Sampler::new(grid, &y).pull(&disp);
        def.psi = y.iter().zip(&moved).map(|(a, b)| a + b).collect();
    }
    Ok(def)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::make_vector_kernel;
    use proptest::prelude::*;

    fn smooth_velocity(grid: &Grid, kernel: &OperatorKernel, rms: f64, seed: u64) -> Vec<f64> {
        let n = grid.ndim() * grid.voxels();
        let mut s = seed;
        let noise: Vec<f64> = (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
            })
            .collect();
        let mut v = kernel.greens(&noise).unwrap();
        let r = (v.iter().map(|x| x * x).sum::<f64>() / n as f64).sqrt();
        v.iter_mut().for_each(|x| *x *= rms / r);
        v
    }

    #[test]
    fn zero_velocity_is_identity() {
        let g = Grid::new(&[8, 8]).unwrap();
        let k = make_vector_kernel(&g, &[1e-3, 0.0, 16.0, 1.0, 1.0]).unwrap();
        let d = shoot(&vec![0.0; 128], &k, 8).unwrap();
        assert_eq!(d.psi, g.identity());
    }

    #[test]
    fn constant_velocity_translates() {
        let g = Grid::new(&[8, 6]).unwrap();
        let k = make_vector_kernel(&g, &[1e-3, 0.0, 16.0, 1.0, 1.0]).unwrap();
        let mut v = vec![0.75; 48];
        v.extend(vec![-1.25; 48]);
        let d = shoot(&v, &k, 8).unwrap();
        let id = g.identity();
        for i in 0..96 {
            assert!((d.psi[i] - (id[i] - v[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn integer_shift_is_circular() {
        let g = Grid::new(&[4, 4]).unwrap();
        let mut psi = g.identity();
        psi[..16].iter_mut().for_each(|x| *x -= 1.0);
        let d = Deformation::from_psi(&g, psi).unwrap();
        let a: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let out = pull(&a, &d).unwrap();
        for i in 0..16 {
            assert_eq!(out[i], a[g.neighbour(i, 0, -1)]);
        }
    }

    #[test]
    fn constants_and_mass() {
        let g = Grid::new(&[6, 5]).unwrap();
        let k = make_vector_kernel(&g, &[1e-2, 0.0, 1.0, 0.1, 0.1]).unwrap();
        let v = smooth_velocity(&g, &k, 1.5, 3);
        let d = shoot(&v, &k, 8).unwrap();
        let out = pull(&[2.5; 30], &d).unwrap();
        assert!(out.iter().all(|x| (x - 2.5).abs() < 1e-12));
        let mass: f64 = push(&[1.0; 30], &d).unwrap().iter().sum();
        assert!((mass - 30.0).abs() < 1e-10);
        assert_eq!(pull(&[1.0; 30], &Deformation::identity(&g)).unwrap(), vec![1.0; 30]);
    }

    #[test]
    fn jacobian_of_identity_and_linear_map() {
        let g = Grid::new(&[10, 10]).unwrap();
        let (j, det) = jacobian(&Deformation::identity(&g));
        assert!(det.iter().all(|&x| x == 1.0));
        assert!(j.entry(0, 1).iter().all(|&x| x == 0.0));

        let mut psi = g.identity();
        for x in 0..100 {
            psi[x] *= 1.1;
            psi[100 + x] *= 0.9;
        }
        let (_, det) = jacobian(&Deformation::from_psi(&g, psi).unwrap());
        for x in 0..100 {
            let c = g.coords(x);
            if (1..9).contains(&c[0]) && (1..9).contains(&c[1]) {
                assert!((det[x] - 0.99).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sine_gradient() {
        let g = Grid::new(&[32, 8]).unwrap();
        let a: Vec<f64> = (0..g.voxels())
            .map(|i| (2.0 * std::f64::consts::PI * g.coords(i)[0] as f64 / 32.0).sin())
            .collect();
        let grad = spatial_gradient(&g, &a);
        let w = 2.0 * std::f64::consts::PI / 32.0;
        for i in 0..g.voxels() {
            let exact = w * (w * g.coords(i)[0] as f64).cos();
            assert!((grad[i] - exact).abs() < 0.05 * w);
            assert!(grad[g.voxels() + i].abs() < 1e-12);
        }
        assert!(spatial_gradient(&g, &vec![3.0; 256]).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn smooth_shoot_is_diffeomorphic() {
        let g = Grid::new(&[32, 32]).unwrap();
        let k = make_vector_kernel(&g, &[1e-3, 0.0, 16.0, 1.0, 1.0]).unwrap();
        let v = smooth_velocity(&g, &k, 2.0, 11);
        let (_, det) = jacobian(&shoot(&v, &k, 8).unwrap());
        assert!(det.iter().cloned().fold(f64::INFINITY, f64::min) > 0.0);
    }

    #[test]
    fn euler_converges() {
        let g = Grid::new(&[32, 32]).unwrap();
        let k = make_vector_kernel(&g, &[1e-3, 0.0, 16.0, 1.0, 1.0]).unwrap();
        let v = smooth_velocity(&g, &k, 2.0, 5);
        let p4 = shoot(&v, &k, 4).unwrap().psi;
        let p8 = shoot(&v, &k, 8).unwrap().psi;
        let p16 = shoot(&v, &k, 16).unwrap().psi;
        let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>();
        assert!(d(&p8, &p16) < d(&p4, &p8));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn pull_push_adjoint(seed in 0u64..1000, d3 in any::<bool>()) {
            let g = if d3 { Grid::new(&[4, 5, 6]).unwrap() } else { Grid::new(&[9, 7]).unwrap() };
            let m = g.voxels();
            let mut s = seed + 1;
            let mut rnd = || {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
            };
            let psi: Vec<f64> = g.identity().iter().map(|x| x + 6.0 * rnd()).collect();
            let d = Deformation::from_psi(&g, psi).unwrap();
            let a: Vec<f64> = (0..2 * m).map(|_| rnd()).collect();
            let f: Vec<f64> = (0..2 * m).map(|_| rnd()).collect();
            let lhs: f64 = pull(&a, &d).unwrap().iter().zip(&f).map(|(x, y)| x * y).sum();
            let rhs: f64 = a.iter().zip(&push(&f, &d).unwrap()).map(|(x, y)| x * y).sum();
            prop_assert!((lhs - rhs).abs() < 1e-10);
        }
    }
}
