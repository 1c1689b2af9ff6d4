//! One-vs-all linear SVM trained by dual coordinate descent, plus score-level
//! late fusion.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tracing::debug;

use crate::binio::{self, Reader, Writer};
use crate::error::{Error, Result};
use crate::exec;

const MAGIC: &[u8; 4] = b"SVM1";
pub const DEFAULT_C_REG: f64 = 100.0;
pub const MAX_EPOCHS: usize = 1000;
/// Stop once the projected-gradient spread falls below this fraction of the
/// first epoch's spread.
pub const RELATIVE_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearOvaModel {
    classes: usize,
    dim: usize,
    /// Row-major `classes × dim`.
    weights: Vec<f64>,
    biases: Vec<f64>,
    c_reg: f64,
}

impl LinearOvaModel {
    pub fn new(classes: usize, dim: usize, weights: Vec<f64>, biases: Vec<f64>, c_reg: f64) -> Result<Self> {
        if classes == 0 {
            return Err(Error::invalid("empty class set"));
        }
        if weights.len() != classes * dim || biases.len() != classes {
            return Err(Error::DimensionMismatch {
                expected: classes * dim,
                got: weights.len(),
            });
        }
        binio::check_finite(weights.iter().chain(&biases).copied())?;
        Ok(LinearOvaModel {
            classes,
            dim,
            weights,
            biases,
            c_reg,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn c_reg(&self) -> f64 {
        self.c_reg
    }

    pub fn weight(&self, class: usize) -> &[f64] {
        &self.weights[(class - 1) * self.dim..class * self.dim]
    }

    pub fn bias(&self, class: usize) -> f64 {
        self.biases[class - 1]
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::with_magic(MAGIC);
        w.len(self.classes)?.len(self.dim)?;
        w.f64(self.c_reg).f64s(&self.weights).f64s(&self.biases);
        Ok(w.into_bytes())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open("SVM1", MAGIC, bytes)?;
        let classes = r.usize()?;
        let dim = r.usize()?;
        let c_reg = r.f64()?;
        let weights = r.f64s(classes * dim, false)?;
        let biases = r.f64s(classes, true)?;
        Self::new(classes, dim, weights, biases, c_reg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&binio::read_file(path.as_ref())?)
    }
}

struct Binary {
    weights: Vec<f64>,
    bias: f64,
    epochs: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// L2-regularized hinge-loss SVM via dual coordinate descent. The bias is an
/// extra constant-1 feature, so it is regularized too.
fn train_binary<X: AsRef<[f64]>>(features: &[X], positive: &[bool], c_reg: f64, seed: u64) -> Binary {
    let n = features.len();
    let dim = features[0].as_ref().len();
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let mut alpha = vec![0.0; n];
    let qd: Vec<f64> = features
        .iter()
        .map(|x| dot(x.as_ref(), x.as_ref()) + 1.0)
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut first_gap = None;
    let mut epochs = 0;

    while epochs < MAX_EPOCHS {
        epochs += 1;
        order.shuffle(&mut rng);
        let (mut pg_max, mut pg_min) = (f64::NEG_INFINITY, f64::INFINITY);
        for &i in &order {
            let x = features[i].as_ref();
            let y = if positive[i] { 1.0 } else { -1.0 };
            let g = y * (dot(&w, x) + b) - 1.0;
            let pg = if alpha[i] == 0.0 {
                g.min(0.0)
            } else if alpha[i] == c_reg {
                g.max(0.0)
            } else {
                g
            };
            pg_max = pg_max.max(pg);
            pg_min = pg_min.min(pg);
            if pg.abs() > 1e-12 {
                let old = alpha[i];
                alpha[i] = (old - g / qd[i]).clamp(0.0, c_reg);
                let step = (alpha[i] - old) * y;
                if step != 0.0 {
                    for (wj, xj) in w.iter_mut().zip(x) {
                        *wj += step * xj;
                    }
                    b += step;
                }
            }
        }
        let gap = pg_max - pg_min;
        let reference = *first_gap.get_or_insert(gap.max(1e-12));
        if gap <= RELATIVE_TOL * reference {
            break;
        }
    }
    Binary {
        weights: w,
        bias: b,
        epochs,
    }
}

/// Trains one binary problem per class (`c` vs rest). Labels are one-based.
pub fn train_ova<X: AsRef<[f64]> + Sync>(
    features: &[X],
    labels: &[usize],
    classes: usize,
    c_reg: f64,
    seed: u64,
) -> Result<LinearOvaModel> {
    if classes == 0 || features.is_empty() {
        return Err(Error::invalid("empty class set or training set"));
    }
    if features.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: features.len(),
            got: labels.len(),
        });
    }
    if !(c_reg > 0.0 && c_reg.is_finite()) {
        return Err(Error::invalid(format!("C_reg must be positive, got {c_reg}")));
    }
    let dim = features[0].as_ref().len();
    if let Some(bad) = features.iter().find(|x| x.as_ref().len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: bad.as_ref().len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l == 0 || l > classes) {
        return Err(Error::invalid(format!("label {bad} out of range 1..={classes}")));
    }

    let solved = exec::map_range(classes, |c| {
        let positive: Vec<bool> = labels.iter().map(|&l| l == c + 1).collect();
        train_binary(features, &positive, c_reg, seed.wrapping_add(c as u64))
    });
    let mut weights = Vec::with_capacity(classes * dim);
    let mut biases = Vec::with_capacity(classes);
    for (c, s) in solved.into_iter().enumerate() {
        debug!(class = c + 1, epochs = s.epochs, "binary svm trained");
        weights.extend(s.weights);
        biases.push(s.bias);
    }
    LinearOvaModel::new(classes, dim, weights, biases, c_reg)
}

/// Per-class decision values `w_c·x + b_c`.
pub fn score(model: &LinearOvaModel, feature: &[f64]) -> Result<Vec<f64>> {
    if feature.len() != model.dim {
        return Err(Error::DimensionMismatch {
            expected: model.dim,
            got: feature.len(),
        });
    }
    Ok((1..=model.classes)
        .map(|c| dot(model.weight(c), feature) + model.bias(c))
        .collect())
}

/// One-based argmax; ties go to the smallest class.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    best + 1
}

pub fn predict(model: &LinearOvaModel, feature: &[f64]) -> Result<usize> {
    Ok(argmax(&score(model, feature)?))
}

/// Elementwise (weighted) mean of per-source score vectors; equal weights by
/// default.
pub fn fuse_scores(sources: &[Vec<f64>], weights: Option<&[f64]>) -> Result<Vec<f64>> {
    let first = sources
        .first()
        .ok_or_else(|| Error::invalid("fusion needs at least one score source"))?;
    let len = first.len();
    if let Some(bad) = sources.iter().find(|s| s.len() != len) {
        return Err(Error::DimensionMismatch {
            expected: len,
            got: bad.len(),
        });
    }
    let uniform = vec![1.0; sources.len()];
    let weights = weights.unwrap_or(&uniform);
    if weights.len() != sources.len() {
        return Err(Error::DimensionMismatch {
            expected: sources.len(),
            got: weights.len(),
        });
    }
    let total: f64 = weights.iter().sum();
    if total == 0.0 || !total.is_finite() {
        return Err(Error::invalid("fusion weights must have a finite nonzero sum"));
    }
    let mut out = vec![0.0; len];
    for (s, w) in sources.iter().zip(weights) {
        for (o, v) in out.iter_mut().zip(s) {
            *o += w * v;
        }
    }
    out.iter_mut().for_each(|o| *o /= total);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn separable_one_dimensional() {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for _ in 0..10 {
            xs.push(vec![-1.0]);
            ys.push(1);
            xs.push(vec![1.0]);
            ys.push(2);
        }
        let m = train_ova(&xs, &ys, 2, DEFAULT_C_REG, 0).unwrap();
        for (x, y) in xs.iter().zip(&ys) {
            assert_eq!(predict(&m, x).unwrap(), *y);
        }
        assert_eq!(m.c_reg(), 100.0);
    }

    fn blobs(seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.2).unwrap();
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (c, (cx, cy)) in [(0.0, 0.0), (5.0, 0.0), (0.0, 5.0)].into_iter().enumerate() {
            for _ in 0..30 {
                xs.push(vec![cx + noise.sample(&mut rng), cy + noise.sample(&mut rng)]);
                ys.push(c + 1);
            }
        }
        (xs, ys)
    }

    #[test]
    fn three_blobs() {
        let (xs, ys) = blobs(1);
        // nearest-centroid oracle
        let centroid: Vec<[f64; 2]> = (1..=3)
            .map(|c| {
                let pts: Vec<&Vec<f64>> = xs.iter().zip(&ys).filter(|(_, &y)| y == c).map(|(x, _)| x).collect();
                let n = pts.len() as f64;
                [pts.iter().map(|p| p[0]).sum::<f64>() / n, pts.iter().map(|p| p[1]).sum::<f64>() / n]
            })
            .collect();
        let oracle: Vec<usize> = xs
            .iter()
            .map(|x| {
                let d: Vec<f64> = centroid.iter().map(|c| -((x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2))).collect();
                argmax(&d)
            })
            .collect();
        let agree = oracle.iter().zip(&ys).filter(|(a, b)| a == b).count();
        assert!(agree as f64 / 90.0 >= 0.99);

        let m = train_ova(&xs, &ys, 3, DEFAULT_C_REG, 7).unwrap();
        let correct = xs
            .iter()
            .zip(&ys)
            .filter(|(x, &y)| predict(&m, x).unwrap() == y)
            .count();
        assert!(correct as f64 / 90.0 >= 0.99, "{correct}/90");
    }

    #[test]
    fn deterministic_given_seed() {
        let (xs, ys) = blobs(2);
        let a = train_ova(&xs, &ys, 3, 10.0, 3).unwrap();
        let b = exec::sequential(|| train_ova(&xs, &ys, 3, 10.0, 3).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn scores_and_ties() {
        let zero = LinearOvaModel::new(3, 2, vec![0.0; 6], vec![0.0; 3], 1.0).unwrap();
        assert_eq!(score(&zero, &[1.0, 2.0]).unwrap(), vec![0.0; 3]);
        assert_eq!(predict(&zero, &[1.0, 2.0]).unwrap(), 1);
        let m = LinearOvaModel::new(2, 2, vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 0.0], 1.0).unwrap();
        assert_eq!(score(&m, &[2.0, 3.0]).unwrap()[0], 2.0);
        assert!(score(&m, &[1.0]).is_err());
    }

    #[test]
    fn argmax_invariant_to_positive_rescaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let s: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
            let alpha = rng.random_range(0.01..100.0);
            let scaled: Vec<f64> = s.iter().map(|v| v * alpha).collect();
            assert_eq!(argmax(&s), argmax(&scaled));
        }
    }

    #[test]
    fn fusion() {
        let one = vec![vec![0.2, -1.0, 3.0]];
        assert_eq!(fuse_scores(&one, None).unwrap(), one[0]);
        assert_eq!(
            fuse_scores(&[vec![1.0, 0.0], vec![0.0, 1.0]], None).unwrap(),
            vec![0.5, 0.5]
        );
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let srcs: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let fused = fuse_scores(&srcs, None).unwrap();
        for i in 0..4 {
            let mean = (srcs[0][i] + srcs[1][i] + srcs[2][i]) / 3.0;
            assert!((fused[i] - mean).abs() < 1e-9);
        }
        let weighted = fuse_scores(&srcs[..2], Some(&[3.0, 1.0])).unwrap();
        assert!((weighted[0] - (3.0 * srcs[0][0] + srcs[1][0]) / 4.0).abs() < 1e-12);
        assert!(fuse_scores(&[vec![1.0], vec![1.0, 2.0]], None).is_err());
        assert!(fuse_scores(&[], None).is_err());
    }

    #[test]
    fn input_validation() {
        let xs = vec![vec![1.0, 2.0], vec![1.0]];
        assert!(train_ova(&xs, &[1, 2], 2, 1.0, 0).is_err());
        let xs = vec![vec![1.0], vec![2.0]];
        assert!(train_ova(&xs, &[1, 3], 2, 1.0, 0).is_err());
        assert!(train_ova(&xs, &[1, 2], 2, 0.0, 0).is_err());
        assert!(train_ova::<Vec<f64>>(&[], &[], 2, 1.0, 0).is_err());
    }

    #[test]
    fn bytes_round_trip() {
        let (xs, ys) = blobs(3);
        let m = train_ova(&xs, &ys, 3, 5.0, 1).unwrap();
        assert_eq!(LinearOvaModel::from_bytes(&m.to_bytes().unwrap()).unwrap(), m);
    }
}
