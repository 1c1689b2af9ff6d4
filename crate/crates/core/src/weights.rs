//! Between-class scatter in weight space and its top eigenvectors.
//!
//! Each training sample contributes a view matrix `V_i` (`F × m`). Projecting
//! with a unit weight vector `w` gives features `x_i = V_i·w`, and the trace of
//! their between-class covariance equals `wᵀ Σ_b w` with
//!
//! ```text
//! Σ_b = (1/N) Σ_c n_c (M_c − M)ᵀ (M_c − M)
//! ```
//!
//! where `M_c` is the mean view matrix of class `c` and `M` the overall mean.
//! The weight matrix keeps the eigenvectors of the largest eigenvalues.

use std::path::Path;

use crate::binio::{self, Reader, Writer};
use crate::eigen::{self, canonical_sign, descending_order};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"WGT1";
const SYMMETRY_TOL: f64 = 1e-8;

/// Dense square matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMatrix {
    pub n: usize,
    pub data: Vec<f64>,
}

impl SquareMatrix {
    pub fn zeros(n: usize) -> Self {
        SquareMatrix {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::invalid("matrix rows must all have length n"));
        }
        Ok(SquareMatrix {
            n,
            data: rows.concat(),
        })
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.n + c]
    }

    /// `vᵀ A v`.
    pub fn quadratic_form(&self, v: &[f64]) -> f64 {
        let n = self.n;
        (0..n)
            .map(|r| v[r] * (0..n).map(|c| self.data[r * n + c] * v[c]).sum::<f64>())
            .sum()
    }
}

/// Per-sample view matrices sharing one shape, with their labels.
#[derive(Debug, Clone)]
pub struct StackedViews {
    rows: usize,
    cols: usize,
    classes: usize,
    /// Row-major `rows × cols` each.
    views: Vec<Vec<f64>>,
    /// One-based labels.
    labels: Vec<usize>,
}

impl StackedViews {
    pub fn new(rows: usize, cols: usize, classes: usize) -> Self {
        StackedViews {
            rows,
            cols,
            classes,
            views: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn push(&mut self, view: Vec<f64>, label: usize) -> Result<()> {
        check_view(self.rows, self.cols, self.classes, &view, label)?;
        self.views.push(view);
        self.labels.push(label);
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn view(&self, i: usize) -> &[f64] {
        &self.views[i]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn classes(&self) -> usize {
        self.classes
    }
}

fn check_view(rows: usize, cols: usize, classes: usize, view: &[f64], label: usize) -> Result<()> {
    if view.len() != rows * cols {
        return Err(Error::DimensionMismatch {
            expected: rows * cols,
            got: view.len(),
        });
    }
    if label == 0 || label > classes {
        return Err(Error::invalid(format!("label {label} out of range 1..={classes}")));
    }
    Ok(())
}

/// Streaming accumulator of class sums, so callers need not hold every view.
#[derive(Debug, Clone)]
pub struct ScatterAccumulator {
    rows: usize,
    cols: usize,
    classes: usize,
    sums: Vec<Vec<f64>>,
    counts: Vec<usize>,
}

impl ScatterAccumulator {
    pub fn new(rows: usize, cols: usize, classes: usize) -> Self {
        ScatterAccumulator {
            rows,
            cols,
            classes,
            sums: vec![Vec::new(); classes],
            counts: vec![0; classes],
        }
    }

    pub fn add(&mut self, view: &[f64], label: usize) -> Result<()> {
        check_view(self.rows, self.cols, self.classes, view, label)?;
        let c = label - 1;
        if self.sums[c].is_empty() {
            self.sums[c] = vec![0.0; self.rows * self.cols];
        }
        for (s, v) in self.sums[c].iter_mut().zip(view) {
            *s += v;
        }
        self.counts[c] += 1;
        Ok(())
    }

    pub fn finish(&self) -> Result<SquareMatrix> {
        let present: Vec<usize> = (0..self.classes).filter(|&c| self.counts[c] > 0).collect();
        if present.len() < 2 {
            return Err(Error::TooFewClasses(present.len()));
        }
        let n: usize = self.counts.iter().sum();
        let len = self.rows * self.cols;
        let mut mean = vec![0.0; len];
        for &c in &present {
            for (m, s) in mean.iter_mut().zip(&self.sums[c]) {
                *m += s;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);

        let m = self.cols;
        let mut sigma = SquareMatrix::zeros(m);
        let mut diff = vec![0.0; len];
        for &c in &present {
            let nc = self.counts[c] as f64;
            for ((d, s), mu) in diff.iter_mut().zip(&self.sums[c]).zip(&mean) {
                *d = s / nc - mu;
            }
            let scale = nc / n as f64;
            for row in diff.chunks_exact(m) {
                for p in 0..m {
                    let rp = row[p] * scale;
                    if rp == 0.0 {
                        continue;
                    }
                    for (s, &rq) in sigma.data[p * m + p..(p + 1) * m].iter_mut().zip(&row[p..]) {
                        *s += rp * rq;
                    }
                }
            }
        }
        for p in 0..m {
            for q in 0..p {
                sigma.data[p * m + q] = sigma.data[q * m + p];
            }
        }
        Ok(sigma)
    }
}

pub fn between_class_scatter(views: &StackedViews) -> Result<SquareMatrix> {
    let mut acc = ScatterAccumulator::new(views.rows, views.cols, views.classes);
    for (v, &l) in views.views.iter().zip(&views.labels) {
        acc.add(v, l)?;
    }
    acc.finish()
}

/// Orthonormal weight columns with their eigenvalues, descending.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    m: usize,
    n_components: usize,
    /// Row-major `m × n_components`.
    columns: Vec<f64>,
    eigenvalues: Vec<f64>,
}

impl WeightMatrix {
    pub fn new(m: usize, n_components: usize, columns: Vec<f64>, eigenvalues: Vec<f64>) -> Result<Self> {
        if n_components == 0 || n_components > m {
            return Err(Error::invalid(format!(
                "n_components {n_components} must be in 1..={m}"
            )));
        }
        if columns.len() != m * n_components {
            return Err(Error::DimensionMismatch {
                expected: m * n_components,
                got: columns.len(),
            });
        }
        if eigenvalues.len() != n_components {
            return Err(Error::DimensionMismatch {
                expected: n_components,
                got: eigenvalues.len(),
            });
        }
        binio::check_finite(columns.iter().chain(&eigenvalues).copied())?;
        Ok(WeightMatrix {
            m,
            n_components,
            columns,
            eigenvalues,
        })
    }

    pub fn identity(m: usize) -> Self {
        let mut columns = vec![0.0; m * m];
        for i in 0..m {
            columns[i * m + i] = 1.0;
        }
        WeightMatrix {
            m,
            n_components: m,
            columns,
            eigenvalues: vec![0.0; m],
        }
    }

    /// Weight-space size (`a²` or `d`).
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n_components(&self) -> usize {
        self.n_components
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// `W[row, component]`.
    pub fn get(&self, row: usize, component: usize) -> f64 {
        self.columns[row * self.n_components + component]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.columns[row * self.n_components..(row + 1) * self.n_components]
    }

    pub fn column(&self, component: usize) -> Vec<f64> {
        (0..self.m).map(|r| self.get(r, component)).collect()
    }

    /// Largest absolute deviation of `WᵀW` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for p in 0..self.n_components {
            for q in 0..self.n_components {
                let dot: f64 = (0..self.m).map(|r| self.get(r, p) * self.get(r, q)).sum();
                let want = if p == q { 1.0 } else { 0.0 };
                worst = worst.max((dot - want).abs());
            }
        }
        worst
    }

    /// Per-row weight magnitude `‖W[row, :]‖₂`.
    pub fn row_magnitudes(&self) -> Vec<f64> {
        (0..self.m)
            .map(|r| self.row(r).iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect()
    }

    /// `‖self − other‖_F`, or `None` when shapes differ.
    pub fn frobenius_distance(&self, other: &WeightMatrix) -> Option<f64> {
        (self.m == other.m && self.n_components == other.n_components).then(|| {
            self.columns
                .iter()
                .zip(&other.columns)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::with_magic(MAGIC);
        w.len(self.m)?.len(self.n_components)?;
        w.f64s_as_f32(&self.eigenvalues).f64s_as_f32(&self.columns);
        Ok(w.into_bytes())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open("WGT1", MAGIC, bytes)?;
        let m = r.usize()?;
        let n = r.usize()?;
        if n == 0 || n > m {
            return Err(r.malformed(format!("bad shape m={m} n_components={n}")));
        }
        let eigenvalues = r.f32s_as_f64(n, false)?;
        let columns = r.f32s_as_f64(m * n, true)?;
        Self::new(m, n, columns, eigenvalues)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&binio::read_file(path.as_ref())?)
    }
}

/// Eigenvectors of the `n_components` largest eigenvalues of `sigma`.
///
/// Each column is flipped so its largest-magnitude entry is positive; equal
/// eigenvalues keep the order in which the solver produced them.
pub fn top_eigenvectors(sigma: &SquareMatrix, n_components: usize) -> Result<WeightMatrix> {
    let m = sigma.n;
    if n_components == 0 || n_components > m {
        return Err(Error::invalid(format!(
            "n_components {n_components} must be in 1..={m}"
        )));
    }
    for r in 0..m {
        for c in (r + 1)..m {
            let diff = (sigma.get(r, c) - sigma.get(c, r)).abs();
            if diff > SYMMETRY_TOL || diff.is_nan() {
                return Err(Error::Asymmetric { row: r, col: c, diff });
            }
        }
    }
    binio::check_finite(sigma.data.iter().copied())?;
    let eig = eigen::jacobi(&sigma.data, m);
    let order = descending_order(&eig.values);
    let mut columns = vec![0.0; m * n_components];
    let mut values = Vec::with_capacity(n_components);
    for (k, &src) in order.iter().take(n_components).enumerate() {
        let mut v = eig.vector(src);
        canonical_sign(&mut v);
        for (r, x) in v.into_iter().enumerate() {
            columns[r * n_components + k] = x;
        }
        values.push(eig.values[src]);
    }
    WeightMatrix::new(m, n_components, columns, values)
}

pub fn learn_weights(views: &StackedViews, n_components: usize) -> Result<WeightMatrix> {
    if n_components == 0 || n_components > views.cols {
        return Err(Error::invalid(format!(
            "n_components {n_components} must be in 1..={}",
            views.cols
        )));
    }
    top_eigenvectors(&between_class_scatter(views)?, n_components)
}
