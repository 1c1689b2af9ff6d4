//! K-means codebook (k-means++ seeding, Lloyd iterations) and nearest-center
//! assignment.

use std::collections::HashSet;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use tracing::debug;

use crate::binio::{self, Reader, Writer};
use crate::error::{Error, Result};
use crate::exec;

const MAGIC: &[u8; 4] = b"CBK1";
const CHUNK: usize = 2048;
pub const DEFAULT_MAX_ITERS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    k: usize,
    dim: usize,
    /// Row-major `K × D`.
    centers: Vec<f64>,
}

/// Squared Euclidean distance.
#[inline]
fn sq_dist(x: &[f32], c: &[f64]) -> f64 {
    x.iter()
        .zip(c)
        .map(|(&a, b)| {
            let d = f64::from(a) - b;
            d * d
        })
        .sum()
}

impl Codebook {
    pub fn new(k: usize, dim: usize, centers: Vec<f64>) -> Result<Self> {
        if k == 0 || dim == 0 {
            return Err(Error::invalid("codebook needs K >= 1 and D >= 1"));
        }
        if centers.len() != k * dim {
            return Err(Error::PayloadMismatch {
                expected: k * dim,
                found: centers.len(),
            });
        }
        binio::check_finite(centers.iter().copied())?;
        Ok(Codebook { k, dim, centers })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn center(&self, k: usize) -> &[f64] {
        &self.centers[k * self.dim..(k + 1) * self.dim]
    }

    /// Zero-based index of the nearest center; ties go to the smallest index.
    pub fn assign(&self, x: &[f32]) -> Result<usize> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(self.nearest(x).0)
    }

    /// `(index, squared distance)`; caller guarantees the dimension.
    pub(crate) fn nearest(&self, x: &[f32]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (k, c) in self.centers.chunks_exact(self.dim).enumerate() {
            let d = sq_dist(x, c);
            if d < best.1 {
                best = (k, d);
            }
        }
        best
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::with_magic(MAGIC);
        w.len(self.k)?.len(self.dim)?;
        w.f64s_as_f32(&self.centers);
        Ok(w.into_bytes())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open("CBK1", MAGIC, bytes)?;
        let k = r.usize()?;
        let dim = r.usize()?;
        if k == 0 || dim == 0 {
            return Err(r.malformed("zero K or D"));
        }
        let centers = r.f32s_as_f64(k * dim, true)?;
        Self::new(k, dim, centers)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&binio::read_file(path.as_ref())?)
    }
}

/// Outcome of a k-means fit with its per-iteration trace.
#[derive(Debug, Clone)]
pub struct KmeansFit {
    pub codebook: Codebook,
    /// Lloyd objective `Σ‖x − c_assign(x)‖²` after each assignment step.
    pub objective: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

pub fn fit_kmeans(descriptors: &[&[f32]], k: usize, seed: u64, max_iters: usize) -> Result<Codebook> {
    fit_kmeans_traced(descriptors, k, seed, max_iters).map(|f| f.codebook)
}

pub fn fit_kmeans_traced(
    descriptors: &[&[f32]],
    k: usize,
    seed: u64,
    max_iters: usize,
) -> Result<KmeansFit> {
    if k == 0 {
        return Err(Error::invalid("K must be positive"));
    }
    if max_iters == 0 {
        return Err(Error::invalid("max_iters must be positive"));
    }
    if descriptors.len() < k {
        return Err(Error::InsufficientSamples {
            needed: k,
            got: descriptors.len(),
        });
    }
    let dim = descriptors[0].len();
    if dim == 0 {
        return Err(Error::invalid("descriptor dimension must be positive"));
    }
    if let Some(bad) = descriptors.iter().find(|d| d.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: bad.len(),
        });
    }
    let distinct = count_distinct(descriptors, k);
    if distinct < k {
        return Err(Error::InsufficientDistinctPoints {
            needed: k,
            found: distinct,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = plus_plus(descriptors, k, dim, &mut rng)?;
    let chunks: Vec<&[&[f32]]> = descriptors.chunks(CHUNK).collect();

    let mut assignment: Vec<usize> = Vec::new();
    let mut objective = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    while iterations < max_iters {
        iterations += 1;
        let book = Codebook { k, dim, centers };
        let parts = exec::map(&chunks, |chunk| {
            chunk.iter().map(|x| book.nearest(x)).collect::<Vec<_>>()
        });
        centers = book.centers;
        let nearest: Vec<(usize, f64)> = parts.into_iter().flatten().collect();
        objective.push(nearest.iter().map(|(_, d)| d).sum());
        let next: Vec<usize> = nearest.iter().map(|(i, _)| *i).collect();
        if next == assignment {
            converged = true;
            break;
        }
        assignment = next;

        // update step
        let offsets: Vec<usize> = (0..chunks.len()).map(|c| c * CHUNK).collect();
        let partial = exec::map(&offsets, |&start| {
            let end = (start + CHUNK).min(descriptors.len());
            let mut sums = vec![0.0f64; k * dim];
            let mut counts = vec![0usize; k];
            for i in start..end {
                let a = assignment[i];
                counts[a] += 1;
                for (s, &x) in sums[a * dim..(a + 1) * dim].iter_mut().zip(descriptors[i]) {
                    *s += f64::from(x);
                }
            }
            (sums, counts)
        });
        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (s, c) in &partial {
            for (a, b) in sums.iter_mut().zip(s) {
                *a += b;
            }
            for (a, b) in counts.iter_mut().zip(c) {
                *a += b;
            }
        }
        let mut empty = Vec::new();
        for c in 0..k {
            if counts[c] == 0 {
                empty.push(c);
                continue;
            }
            for (dst, s) in centers[c * dim..(c + 1) * dim]
                .iter_mut()
                .zip(&sums[c * dim..(c + 1) * dim])
            {
                *dst = s / counts[c] as f64;
            }
        }
        if !empty.is_empty() {
            reseed_empty(descriptors, &assignment, &mut centers, dim, &empty);
        }
    }

    debug!(k, iterations, converged, "k-means finished");
    Ok(KmeansFit {
        codebook: Codebook::new(k, dim, centers)?,
        objective,
        iterations,
        converged,
    })
}

/// Moves each empty center onto the point farthest from its own (updated)
/// center, using each point at most once.
fn reseed_empty(
    descriptors: &[&[f32]],
    assignment: &[usize],
    centers: &mut [f64],
    dim: usize,
    empty: &[usize],
) {
    let mut dists: Vec<(f64, usize)> = descriptors
        .iter()
        .zip(assignment)
        .enumerate()
        .map(|(i, (x, &a))| (sq_dist(x, &centers[a * dim..(a + 1) * dim]), i))
        .collect();
    // farthest first, lower index on ties
    dists.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for (&c, &(_, i)) in empty.iter().zip(&dists) {
        for (dst, &x) in centers[c * dim..(c + 1) * dim].iter_mut().zip(descriptors[i]) {
            *dst = f64::from(x);
        }
    }
}

fn count_distinct(descriptors: &[&[f32]], stop_at: usize) -> usize {
    let mut seen: HashSet<Vec<u32>> = HashSet::new();
    for d in descriptors {
        // +0.0 and -0.0 are the same point
        seen.insert(d.iter().map(|v| (v + 0.0).to_bits()).collect());
        if seen.len() >= stop_at {
            break;
        }
    }
    seen.len()
}

fn plus_plus(descriptors: &[&[f32]], k: usize, dim: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let n = descriptors.len();
    let mut centers = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centers.extend(descriptors[first].iter().map(|&v| f64::from(v)));
    let mut best: Vec<f64> = exec::map(descriptors, |x| sq_dist(x, &centers[..dim]));
    for c in 1..k {
        let weights = WeightedIndex::new(&best)
            .map_err(|e| Error::invalid(format!("k-means++ seeding failed: {e}")))?;
        let pick = weights.sample(rng);
        centers.extend(descriptors[pick].iter().map(|&v| f64::from(v)));
        let newest = &centers[c * dim..(c + 1) * dim];
        let fresh = exec::map(descriptors, |x| sq_dist(x, newest));
        for (b, f) in best.iter_mut().zip(fresh) {
            if f < *b {
                *b = f;
            }
        }
    }
    Ok(centers)
}
