//! PCA reduction of raw descriptors to the working dimension.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::binio::{self, Reader, Writer};
use crate::eigen::{canonical_sign, descending_order};
use crate::error::{Error, Result};
use crate::exec;
use crate::grid::DescriptorGrid;

const MAGIC: &[u8; 4] = b"PCA1";
/// Rows per partial covariance sum; fixed so the reduction does not depend on
/// the worker count.
const CHUNK: usize = 4096;
pub const DEFAULT_FIT_CAP: usize = 200_000;

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    input_dim: usize,
    output_dim: usize,
    mean: Vec<f64>,
    /// Row-major `input_dim × output_dim`.
    basis: Vec<f64>,
    /// Eigenvalue per kept column; empty when loaded from disk.
    explained_variance: Vec<f64>,
}

impl PcaModel {
    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn basis_column(&self, k: usize) -> Vec<f64> {
        (0..self.input_dim)
            .map(|r| self.basis[r * self.output_dim + k])
            .collect()
    }

    pub fn explained_variance(&self) -> &[f64] {
        &self.explained_variance
    }

    /// Maps one descriptor to `basisᵀ·(x − mean)`.
    pub fn project(&self, x: &[f32]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                got: x.len(),
            });
        }
        let mut out = vec![0.0; self.output_dim];
        for (r, &xr) in x.iter().enumerate() {
            let centered = f64::from(xr) - self.mean[r];
            let row = &self.basis[r * self.output_dim..(r + 1) * self.output_dim];
            for (o, b) in out.iter_mut().zip(row) {
                *o += centered * b;
            }
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::with_magic(MAGIC);
        w.len(self.input_dim)?.len(self.output_dim)?;
        w.f64s_as_f32(&self.mean).f64s_as_f32(&self.basis);
        Ok(w.into_bytes())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open("PCA1", MAGIC, bytes)?;
        let input_dim = r.usize()?;
        let output_dim = r.usize()?;
        if input_dim == 0 || output_dim == 0 || output_dim > input_dim {
            return Err(r.malformed(format!("bad dims {input_dim}->{output_dim}")));
        }
        let mean = r.f32s_as_f64(input_dim, false)?;
        let basis = r.f32s_as_f64(input_dim * output_dim, true)?;
        binio::check_finite(mean.iter().chain(&basis).copied())?;
        Ok(PcaModel {
            input_dim,
            output_dim,
            mean,
            basis,
            explained_variance: Vec::new(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&binio::read_file(path.as_ref())?)
    }
}

/// Fits PCA on `descriptors` (all of equal length) keeping `output_dim`
/// components.
pub fn fit_pca(descriptors: &[&[f32]], output_dim: usize) -> Result<PcaModel> {
    let n = descriptors.len();
    if n < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: n });
    }
    let input_dim = descriptors[0].len();
    if let Some(bad) = descriptors.iter().find(|d| d.len() != input_dim) {
        return Err(Error::DimensionMismatch {
            expected: input_dim,
            got: bad.len(),
        });
    }
    if output_dim == 0 || output_dim > input_dim {
        return Err(Error::invalid(format!(
            "output_dim {output_dim} must be in 1..={input_dim}"
        )));
    }
    if output_dim > n {
        return Err(Error::InsufficientSamples {
            needed: output_dim,
            got: n,
        });
    }

    let chunks: Vec<&[&[f32]]> = descriptors.chunks(CHUNK).collect();
    let sums = exec::map(&chunks, |chunk| {
        let mut s = vec![0.0f64; input_dim];
        for d in *chunk {
            for (a, &x) in s.iter_mut().zip(*d) {
                *a += f64::from(x);
            }
        }
        s
    });
    let mut mean = vec![0.0; input_dim];
    for s in &sums {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let partials = exec::map(&chunks, |chunk| {
        let centered = DMatrix::from_fn(chunk.len(), input_dim, |r, c| {
            f64::from(chunk[r][c]) - mean[c]
        });
        centered.tr_mul(&centered)
    });
    let mut cov = DMatrix::<f64>::zeros(input_dim, input_dim);
    for p in &partials {
        cov += p;
    }
    cov /= (n - 1) as f64;

    if cov.trace() <= 0.0 {
        return Err(Error::ZeroVariance);
    }

    let eig = SymmetricEigen::new(cov);
    let values: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    let order = descending_order(&values);
    let mut basis = vec![0.0; input_dim * output_dim];
    let mut explained = Vec::with_capacity(output_dim);
    for (k, &src) in order.iter().take(output_dim).enumerate() {
        let mut col: Vec<f64> = eig.eigenvectors.column(src).iter().copied().collect();
        canonical_sign(&mut col);
        for (r, v) in col.into_iter().enumerate() {
            basis[r * output_dim + k] = v;
        }
        explained.push(values[src].max(0.0));
    }

    Ok(PcaModel {
        input_dim,
        output_dim,
        mean,
        basis,
        explained_variance: explained,
    })
}

/// Gathers descriptors from `grids`, subsampling to at most `cap` with a seeded
/// draw, and fits PCA.
pub fn fit_pca_on_grids(
    grids: &[&DescriptorGrid],
    output_dim: usize,
    cap: usize,
    seed: u64,
) -> Result<PcaModel> {
    let pool = sample_descriptors(grids, cap, seed);
    fit_pca(&pool, output_dim)
}

/// Seeded subsample (without replacement) of every descriptor across `grids`,
/// returned in storage order.
pub fn sample_descriptors<'a>(grids: &[&'a DescriptorGrid], cap: usize, seed: u64) -> Vec<&'a [f32]> {
    let all: Vec<&[f32]> = grids.iter().flat_map(|g| g.descriptors()).collect();
    if all.len() <= cap {
        return all;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, all.len(), cap).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| all[i]).collect()
}

pub fn apply_pca(model: &PcaModel, grid: &DescriptorGrid) -> Result<DescriptorGrid> {
    if grid.dim() != model.input_dim {
        return Err(Error::DimensionMismatch {
            expected: model.input_dim,
            got: grid.dim(),
        });
    }
    let mut data = Vec::with_capacity(grid.frames() * grid.cells() * model.output_dim);
    for d in grid.descriptors() {
        data.extend(model.project(d)?.into_iter().map(|v| v as f32));
    }
    DescriptorGrid::new(grid.frames(), grid.grid(), model.output_dim, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eigen::jacobi;
    use rand::Rng;

    fn rows(points: &[Vec<f32>]) -> Vec<&[f32]> {
        points.iter().map(|p| p.as_slice()).collect()
    }

    #[test]
    fn collinear_points() {
        let pts = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![2.0, 0.0], vec![3.0, 0.0]];
        let m = fit_pca(&rows(&pts), 1).unwrap();
        assert!((m.mean()[0] - 1.5).abs() < 1e-12 && m.mean()[1].abs() < 1e-12);
        let b = m.basis_column(0);
        assert!((b[0].abs() - 1.0).abs() < 1e-9 && b[1].abs() < 1e-9);
        // largest-magnitude entry is positive
        assert!(b[0] > 0.0);
        // sample variance of 0..3 with 1/(n-1)
        assert!((m.explained_variance()[0] - 5.0 / 3.0).abs() < 1e-9);
    }

    /// Oracle: covariance assembled by explicit double loop, diagonalized with
    /// the Jacobi solver rather than nalgebra.
    #[test]
    fn matches_brute_force_eigendecomposition() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let pts: Vec<Vec<f32>> = (0..3)
                .map(|_| (0..4).map(|_| rng.random_range(-2.0f32..2.0)).collect())
                .collect();
            let m = fit_pca(&rows(&pts), 2).unwrap();

            let n = pts.len() as f64;
            let mean: Vec<f64> = (0..4)
                .map(|c| pts.iter().map(|p| f64::from(p[c])).sum::<f64>() / n)
                .collect();
            let mut cov = vec![0.0; 16];
            for i in 0..4 {
                for j in 0..4 {
                    cov[i * 4 + j] = pts
                        .iter()
                        .map(|p| (f64::from(p[i]) - mean[i]) * (f64::from(p[j]) - mean[j]))
                        .sum::<f64>()
                        / (n - 1.0);
                }
            }
            let e = jacobi(&cov, 4);
            let order = descending_order(&e.values);
            for (k, &src) in order.iter().take(2).enumerate() {
                let want = e.vector(src);
                let got = m.basis_column(k);
                let dot: f64 = want.iter().zip(&got).map(|(a, b)| a * b).sum();
                assert!((dot.abs() - 1.0).abs() < 1e-6, "column {k} dot {dot}");
                assert!((m.explained_variance()[k] - e.values[src]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn errors() {
        let one = vec![vec![1.0f32, 2.0]];
        assert!(matches!(
            fit_pca(&rows(&one), 1),
            Err(Error::InsufficientSamples { .. })
        ));
        let same = vec![vec![1.0f32, 2.0]; 5];
        assert!(matches!(fit_pca(&rows(&same), 1), Err(Error::ZeroVariance)));
        let pts = vec![vec![0.0f32, 1.0], vec![1.0, 0.0], vec![2.0, 2.0]];
        assert!(fit_pca(&rows(&pts), 3).is_err());
        let ragged = vec![vec![0.0f32, 1.0], vec![1.0]];
        assert!(matches!(
            fit_pca(&rows(&ragged), 1),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn vgg_scale_dims_accepted() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Vec<f32>> = (0..300)
            .map(|_| (0..512).map(|_| rng.random_range(-1.0f32..1.0)).collect())
            .collect();
        let m = fit_pca(&rows(&pts), 256).unwrap();
        assert_eq!((m.input_dim(), m.output_dim()), (512, 256));
        let ev = m.explained_variance();
        assert!(ev.windows(2).all(|w| w[0] >= w[1]));
    }

    fn random_grid(rng: &mut ChaCha8Rng, t: usize, a: usize, d: usize) -> DescriptorGrid {
        let data = (0..t * a * a * d).map(|_| rng.random_range(-3.0f32..3.0)).collect();
        DescriptorGrid::new(t, a, d, data).unwrap()
    }

    #[test]
    fn full_rank_projection_preserves_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = random_grid(&mut rng, 6, 2, 3);
        let m = fit_pca_on_grids(&[&g], 3, DEFAULT_FIT_CAP, 0).unwrap();
        let out = apply_pca(&m, &g).unwrap();
        assert_eq!((out.frames(), out.grid(), out.dim()), (6, 2, 3));
        for (x, y) in g.descriptors().zip(out.descriptors()) {
            let nx: f64 = x
                .iter()
                .zip(m.mean())
                .map(|(&v, mu)| (f64::from(v) - mu).powi(2))
                .sum();
            let ny: f64 = y.iter().map(|&v| f64::from(v).powi(2)).sum();
            assert!((nx.sqrt() - ny.sqrt()).abs() < 1e-5);
        }
    }

    #[test]
    fn mean_grid_maps_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = random_grid(&mut rng, 4, 2, 3);
        let m = fit_pca_on_grids(&[&g], 2, DEFAULT_FIT_CAP, 0).unwrap();
        let mean: Vec<f32> = m.mean().iter().map(|&v| v as f32).collect();
        let data: Vec<f32> = (0..8).flat_map(|_| mean.clone()).collect();
        let mg = DescriptorGrid::new(2, 2, 3, data).unwrap();
        let out = apply_pca(&m, &mg).unwrap();
        assert!(out.data().iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn grid_projection_matches_per_vector_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let g = random_grid(&mut rng, 5, 3, 4);
        let m = fit_pca_on_grids(&[&g], 2, DEFAULT_FIT_CAP, 0).unwrap();
        let out = apply_pca(&m, &g).unwrap();
        for (x, y) in g.descriptors().zip(out.descriptors()) {
            for (k, &yk) in y.iter().enumerate() {
                let col = m.basis_column(k);
                let want: f64 = (0..4).map(|r| (f64::from(x[r]) - m.mean()[r]) * col[r]).sum();
                assert!((want - f64::from(yk)).abs() < 1e-6);
            }
        }
        assert!(apply_pca(&m, &random_grid(&mut rng, 1, 1, 3)).is_err());
    }

    #[test]
    fn persisted_model_projects_like_original() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let g = random_grid(&mut rng, 4, 2, 4);
        let m = fit_pca_on_grids(&[&g], 3, DEFAULT_FIT_CAP, 0).unwrap();
        let back = PcaModel::from_bytes(&m.to_bytes().unwrap()).unwrap();
        assert_eq!(back.output_dim(), 3);
        let a = apply_pca(&m, &g).unwrap();
        let b = apply_pca(&back, &g).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn subsampling_is_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = random_grid(&mut rng, 10, 2, 2);
        let a = sample_descriptors(&[&g], 7, 42);
        let b = sample_descriptors(&[&g], 7, 42);
        assert_eq!(a.len(), 7);
        assert_eq!(a, b);
        assert_eq!(sample_descriptors(&[&g], 1000, 42).len(), 40);
    }
}
