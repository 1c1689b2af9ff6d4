//! Leave-one-group-out cross-validation, reports and parameter sweeps.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use tracing::info;

use crate::aggregate::{train_dsar, train_dstar, TrainedAggregator, DEFAULT_ITERS};
use crate::classify::{argmax, fuse_scores, score, train_ova, DEFAULT_C_REG};
use crate::codebook::{fit_kmeans, DEFAULT_MAX_ITERS};
use crate::error::{Error, Result};
use crate::exec;
use crate::grid::{read_dgt, DescriptorGrid};
use crate::manifest::DatasetManifest;
use crate::pca::{apply_pca, fit_pca_on_grids, sample_descriptors, DEFAULT_FIT_CAP};
use crate::vlad::{encode_lcd, encode_pyramid, Method, PyramidConfig, VideoRepresentation};

/// One leave-one-group-out split. Indices refer to `manifest.samples`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub group: String,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// One fold per distinct `group_id`, ordered by group id.
pub fn louo_folds(manifest: &DatasetManifest) -> Result<Vec<Fold>> {
    let groups = manifest.groups();
    if groups.len() < 2 {
        return Err(Error::TooFewGroups(groups.len()));
    }
    Ok(groups
        .into_iter()
        .map(|g| {
            let (test, train): (Vec<usize>, Vec<usize>) =
                (0..manifest.len()).partition(|&i| manifest.samples[i].group_id == g);
            Fold {
                group: g.to_string(),
                train,
                test,
            }
        })
        .collect())
}

/// Which samples the PCA basis is fitted on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PcaScope {
    /// Training fold only (default).
    TrainOnly,
    /// Every sample, test fold included.
    All,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub method: Method,
    pub k: usize,
    /// PCA output dimension; `None` keeps raw descriptors.
    pub descriptor_dim: Option<usize>,
    pub n_sp: usize,
    pub n_tmp: usize,
    pub levels: usize,
    pub iters: usize,
    pub c_reg: f64,
    pub seed: u64,
    pub pca_scope: PcaScope,
    pub pca_fit_cap: usize,
    pub kmeans_fit_cap: usize,
    pub kmeans_max_iters: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            method: Method::Dstar,
            k: 128,
            descriptor_dim: Some(64),
            n_sp: 5,
            n_tmp: 5,
            levels: 2,
            iters: DEFAULT_ITERS,
            c_reg: DEFAULT_C_REG,
            seed: 0,
            pca_scope: PcaScope::TrainOnly,
            pca_fit_cap: DEFAULT_FIT_CAP,
            kmeans_fit_cap: 100_000,
            kmeans_max_iters: DEFAULT_MAX_ITERS,
        }
    }
}

impl PipelineConfig {
    pub fn pca_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }

    pub fn kmeans_seed(&self) -> u64 {
        self.seed.wrapping_add(2)
    }

    pub fn svm_seed(&self) -> u64 {
        self.seed.wrapping_add(3)
    }

    /// Pyramid depth actually encoded: only STAR and DSTAR use segments.
    pub fn effective_levels(&self) -> usize {
        if self.method.uses_pyramid() {
            self.levels
        } else {
            0
        }
    }

    /// Checks ranges against the data shape (`grid` = a, `raw_dim` = stored D).
    pub fn validate(&self, grid: usize, raw_dim: usize) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("K must be >= 1"));
        }
        if let Some(d) = self.descriptor_dim {
            if d == 0 || d > raw_dim {
                return Err(Error::invalid(format!(
                    "D={d} must be in 1..={raw_dim} (stored descriptor dimension)"
                )));
            }
        }
        if !(self.c_reg > 0.0 && self.c_reg.is_finite()) {
            return Err(Error::invalid(format!("C_reg must be positive, got {}", self.c_reg)));
        }
        let cells = grid * grid;
        if matches!(self.method, Method::Dsar | Method::Dstar) && (self.n_sp == 0 || self.n_sp > cells) {
            return Err(Error::invalid(format!("N_sp exceeds a^2={cells} (got N_sp={})", self.n_sp)));
        }
        if self.method == Method::Dstar {
            let d = PyramidConfig::new(self.levels).segments();
            if self.n_tmp == 0 || self.n_tmp > d {
                return Err(Error::invalid(format!(
                    "N_tmp exceeds 2^(L+1)-1={d} (got N_tmp={})",
                    self.n_tmp
                )));
            }
            if self.iters == 0 {
                return Err(Error::invalid("iters must be >= 1"));
            }
        }
        Ok(())
    }

    /// `key=value` lines describing every parameter, derived seeds included.
    pub fn key_values(&self) -> Vec<(&'static str, String)> {
        vec![
            ("method", self.method.to_string()),
            ("K", self.k.to_string()),
            ("D", self.descriptor_dim.map_or("raw".into(), |d| d.to_string())),
            ("N_sp", self.n_sp.to_string()),
            ("N_tmp", self.n_tmp.to_string()),
            ("L", self.levels.to_string()),
            ("iters", self.iters.to_string()),
            ("C_reg", self.c_reg.to_string()),
            ("seed", self.seed.to_string()),
            ("seed_pca", self.pca_seed().to_string()),
            ("seed_kmeans", self.kmeans_seed().to_string()),
            ("seed_svm", self.svm_seed().to_string()),
            (
                "pca_scope",
                match self.pca_scope {
                    PcaScope::TrainOnly => "train".into(),
                    PcaScope::All => "all".into(),
                },
            ),
            ("pca_fit_cap", self.pca_fit_cap.to_string()),
            ("kmeans_fit_cap", self.kmeans_fit_cap.to_string()),
            ("kmeans_max_iters", self.kmeans_max_iters.to_string()),
        ]
    }
}

/// Reads every grid listed in the manifest and checks that `a` and `D` agree.
pub fn load_grids(manifest: &DatasetManifest, manifest_path: &Path) -> Result<Vec<DescriptorGrid>> {
    let grids = exec::try_map(&manifest.samples, |s| read_dgt(manifest.resolve(manifest_path, s)))?;
    check_consistent(&grids)?;
    Ok(grids)
}

/// All grids share one cell layout and descriptor dimension.
pub fn check_consistent(grids: &[DescriptorGrid]) -> Result<()> {
    let Some(first) = grids.first() else {
        return Ok(());
    };
    for g in grids {
        if g.grid() != first.grid() {
            return Err(Error::DimensionMismatch {
                expected: first.grid(),
                got: g.grid(),
            });
        }
        if g.dim() != first.dim() {
            return Err(Error::DimensionMismatch {
                expected: first.dim(),
                got: g.dim(),
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum FitStage {
    Pca,
    Codebook,
    Weights,
    Classifier,
}

/// Hooks into [`run_cv_observed`]; used to audit which samples reach each fit.
pub trait FitObserver: Sync {
    fn on_fit(&self, _fold: &Fold, _stage: FitStage, _samples: &[usize]) {}
    fn on_encoded(&self, _fold: &Fold, _rep: &VideoRepresentation) {}
}

struct Silent;
impl FitObserver for Silent {}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub sample_id: String,
    pub group: String,
    pub truth: usize,
    pub predicted: usize,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldSummary {
    pub group: String,
    pub train: usize,
    pub test: usize,
    pub correct: usize,
}

impl FoldSummary {
    pub fn accuracy(&self) -> f64 {
        if self.test == 0 {
            0.0
        } else {
            self.correct as f64 / self.test as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvReport {
    pub label: String,
    pub config: PipelineConfig,
    pub classes: usize,
    pub folds: Vec<FoldSummary>,
    /// `confusion[truth - 1][predicted - 1]`.
    pub confusion: Vec<Vec<usize>>,
    /// In manifest order.
    pub predictions: Vec<Prediction>,
}

impl CvReport {
    fn assemble(
        label: String,
        config: PipelineConfig,
        classes: usize,
        train_sizes: &[(String, usize)],
        predictions: Vec<Prediction>,
    ) -> Self {
        let mut confusion = vec![vec![0usize; classes]; classes];
        let mut per_group: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
        for p in &predictions {
            confusion[p.truth - 1][p.predicted - 1] += 1;
            let e = per_group.entry(p.group.as_str()).or_default();
            e.0 += 1;
            e.1 += usize::from(p.truth == p.predicted);
        }
        let folds = train_sizes
            .iter()
            .map(|(g, train)| {
                let (test, correct) = per_group.get(g.as_str()).copied().unwrap_or_default();
                FoldSummary {
                    group: g.clone(),
                    train: *train,
                    test,
                    correct,
                }
            })
            .collect();
        CvReport {
            label,
            config,
            classes,
            folds,
            confusion,
            predictions,
        }
    }

    pub fn total(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }

    /// Pooled accuracy: trace of the confusion matrix over its total.
    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let trace: usize = (0..self.classes).map(|c| self.confusion[c][c]).sum();
        trace as f64 / total as f64
    }

    pub fn fold_accuracies(&self) -> Vec<f64> {
        self.folds.iter().map(FoldSummary::accuracy).collect()
    }

    /// Unweighted mean of the per-fold accuracies.
    pub fn mean_fold_accuracy(&self) -> f64 {
        if self.folds.is_empty() {
            return 0.0;
        }
        self.fold_accuracies().iter().sum::<f64>() / self.folds.len() as f64
    }

    /// Human-readable table followed by a `key=value` block.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "cross-validation report: {}", self.label);
        let _ = writeln!(s, "{:<16} {:>7} {:>6} {:>8} {:>9}", "fold", "train", "test", "correct", "accuracy");
        for f in &self.folds {
            let _ = writeln!(
                s,
                "{:<16} {:>7} {:>6} {:>8} {:>9.4}",
                f.group,
                f.train,
                f.test,
                f.correct,
                f.accuracy()
            );
        }
        let _ = writeln!(s, "pooled accuracy     {:.4}", self.accuracy());
        let _ = writeln!(s, "mean fold accuracy  {:.4}", self.mean_fold_accuracy());
        s.push('\n');
        let _ = writeln!(s, "label={}", self.label);
        for (k, v) in self.config.key_values() {
            let _ = writeln!(s, "{k}={v}");
        }
        let _ = writeln!(s, "classes={}", self.classes);
        let _ = writeln!(s, "samples={}", self.total());
        let _ = writeln!(s, "accuracy={}", self.accuracy());
        let _ = writeln!(s, "mean_fold_accuracy={}", self.mean_fold_accuracy());
        for f in &self.folds {
            let _ = writeln!(s, "fold.{}.accuracy={}", f.group, f.accuracy());
        }
        for (c, row) in self.confusion.iter().enumerate() {
            let row: Vec<String> = row.iter().map(usize::to_string).collect();
            let _ = writeln!(s, "confusion.{}={}", c + 1, row.join(","));
        }
        s
    }

    /// Confusion matrix as CSV with a header row of predicted classes.
    pub fn confusion_csv(&self) -> String {
        let mut s = String::from("truth");
        for c in 1..=self.classes {
            let _ = write!(s, ",pred_{c}");
        }
        s.push('\n');
        for (c, row) in self.confusion.iter().enumerate() {
            let _ = write!(s, "{}", c + 1);
            for v in row {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }

    /// Per-sample predictions and decision values as TSV.
    pub fn predictions_tsv(&self) -> String {
        let mut s = String::from("sample_id\tgroup_id\ttruth\tpredicted\tscores\n");
        for p in &self.predictions {
            let scores: Vec<String> = p.scores.iter().map(|v| format!("{v:e}")).collect();
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}",
                p.sample_id,
                p.group,
                p.truth,
                p.predicted,
                scores.join(",")
            );
        }
        s
    }
}

pub fn run_cv(manifest: &DatasetManifest, grids: &[DescriptorGrid], config: &PipelineConfig) -> Result<CvReport> {
    run_cv_observed(manifest, grids, config, &Silent)
}

/// Runs every fold (concurrently when parallel) and pools the predictions.
pub fn run_cv_observed(
    manifest: &DatasetManifest,
    grids: &[DescriptorGrid],
    config: &PipelineConfig,
    observer: &dyn FitObserver,
) -> Result<CvReport> {
    if grids.len() != manifest.len() {
        return Err(Error::DimensionMismatch {
            expected: manifest.len(),
            got: grids.len(),
        });
    }
    check_consistent(grids)?;
    let first = grids.first().ok_or(Error::InsufficientSamples { needed: 2, got: 0 })?;
    config.validate(first.grid(), first.dim())?;
    let folds = louo_folds(manifest)?;
    info!(method = %config.method, folds = folds.len(), samples = manifest.len(), "running cross-validation");

    let outcomes = exec::map(&folds, |fold| {
        run_fold(manifest, grids, fold, config, observer).map_err(|e| Error::Fold {
            group: fold.group.clone(),
            source: Box::new(e),
        })
    });
    let mut by_sample: Vec<Option<Prediction>> = vec![None; manifest.len()];
    for (fold, outcome) in folds.iter().zip(outcomes) {
        for (i, p) in fold.test.iter().zip(outcome?) {
            by_sample[*i] = Some(p);
        }
    }
    let predictions = by_sample.into_iter().map(|p| p.expect("every sample is tested once")).collect();
    let train_sizes: Vec<(String, usize)> = folds.iter().map(|f| (f.group.clone(), f.train.len())).collect();
    Ok(CvReport::assemble(
        config.method.to_string(),
        config.clone(),
        manifest.classes,
        &train_sizes,
        predictions,
    ))
}

fn pick<'a>(ids: &[usize], grids: &'a [DescriptorGrid]) -> Vec<&'a DescriptorGrid> {
    ids.iter().map(|&i| &grids[i]).collect()
}

fn run_fold(
    manifest: &DatasetManifest,
    grids: &[DescriptorGrid],
    fold: &Fold,
    config: &PipelineConfig,
    observer: &dyn FitObserver,
) -> Result<Vec<Prediction>> {
    let all: Vec<usize> = (0..grids.len()).collect();

    let reduced: Cow<'_, [DescriptorGrid]> = match config.descriptor_dim {
        None => Cow::Borrowed(grids),
        Some(d) => {
            let fit_ids = match config.pca_scope {
                PcaScope::TrainOnly => &fold.train,
                PcaScope::All => &all,
            };
            observer.on_fit(fold, FitStage::Pca, fit_ids);
            let pca = fit_pca_on_grids(&pick(fit_ids, grids), d, config.pca_fit_cap, config.pca_seed())?;
            Cow::Owned(exec::try_map(grids, |g| apply_pca(&pca, g))?)
        }
    };

    observer.on_fit(fold, FitStage::Codebook, &fold.train);
    let pool = sample_descriptors(&pick(&fold.train, &reduced), config.kmeans_fit_cap, config.kmeans_seed());
    let codebook = fit_kmeans(&pool, config.k, config.kmeans_seed(), config.kmeans_max_iters)?;

    let labels: Vec<usize> = manifest.samples.iter().map(|s| s.class_label).collect();
    let features: Vec<VideoRepresentation> = if config.method == Method::Lcd {
        exec::try_map(&reduced, |g| encode_lcd(g, &codebook))?
    } else {
        let pyramid = PyramidConfig::new(config.effective_levels());
        let encoded = exec::try_map(&reduced, |g| encode_pyramid(g, &codebook, pyramid))?;
        let training: Vec<_> = fold.train.iter().map(|&i| (&encoded[i], labels[i])).collect();
        let aggregator = match config.method {
            Method::Dsar => {
                observer.on_fit(fold, FitStage::Weights, &fold.train);
                train_dsar(&training, manifest.classes, config.n_sp)?
            }
            Method::Dstar => {
                observer.on_fit(fold, FitStage::Weights, &fold.train);
                train_dstar(&training, manifest.classes, config.n_sp, config.n_tmp, config.iters)?
            }
            _ => TrainedAggregator::star(reduced[0].grid(), pyramid, codebook.k(), codebook.dim()),
        };
        exec::try_map(&encoded, |p| aggregator.aggregate(p))?
    };
    for rep in &features {
        observer.on_encoded(fold, rep);
    }

    observer.on_fit(fold, FitStage::Classifier, &fold.train);
    let train_x: Vec<&[f64]> = fold.train.iter().map(|&i| features[i].vector.as_slice()).collect();
    let train_y: Vec<usize> = fold.train.iter().map(|&i| labels[i]).collect();
    let model = train_ova(&train_x, &train_y, manifest.classes, config.c_reg, config.svm_seed())?;

    fold.test
        .iter()
        .map(|&i| {
            let scores = score(&model, &features[i].vector)?;
            let s = &manifest.samples[i];
            Ok(Prediction {
                sample_id: s.sample_id.clone(),
                group: s.group_id.clone(),
                truth: s.class_label,
                predicted: argmax(&scores),
                scores,
            })
        })
        .collect()
}

/// Late fusion: per-sample weighted sums of decision values from reports over
/// the same manifest.
pub fn fuse_reports(reports: &[&CvReport], weights: Option<&[f64]>) -> Result<CvReport> {
    let first = reports.first().ok_or_else(|| Error::invalid("nothing to fuse"))?;
    for r in reports {
        if r.classes != first.classes
            || r.predictions.len() != first.predictions.len()
            || r.predictions.iter().zip(&first.predictions).any(|(a, b)| a.sample_id != b.sample_id)
        {
            return Err(Error::invalid(format!(
                "reports {:?} and {:?} do not cover the same samples",
                first.label, r.label
            )));
        }
    }
    let predictions = (0..first.predictions.len())
        .map(|i| {
            let sources: Vec<Vec<f64>> = reports.iter().map(|r| r.predictions[i].scores.clone()).collect();
            let scores = fuse_scores(&sources, weights)?;
            let p = &first.predictions[i];
            Ok(Prediction {
                sample_id: p.sample_id.clone(),
                group: p.group.clone(),
                truth: p.truth,
                predicted: argmax(&scores),
                scores,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let label = format!(
        "fused({})",
        reports.iter().map(|r| r.label.as_str()).collect::<Vec<_>>().join("+")
    );
    let train_sizes: Vec<(String, usize)> = first.folds.iter().map(|f| (f.group.clone(), f.train)).collect();
    Ok(CvReport::assemble(label, first.config.clone(), first.classes, &train_sizes, predictions))
}

/// Axes of a parameter sweep. An empty axis keeps the base config's value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SweepGrid {
    pub dims: Vec<usize>,
    pub ks: Vec<usize>,
    pub n_sps: Vec<usize>,
    pub n_tmps: Vec<usize>,
}

impl SweepGrid {
    /// Cartesian product in grid order: D outermost, then K, N_sp, N_tmp.
    pub fn configs(&self, base: &PipelineConfig) -> Vec<PipelineConfig> {
        fn axis<T: Clone>(values: &[T], fallback: T) -> Vec<T> {
            if values.is_empty() {
                vec![fallback]
            } else {
                values.to_vec()
            }
        }
        let dims = axis(&self.dims.iter().map(|&d| Some(d)).collect::<Vec<_>>(), base.descriptor_dim);
        let mut out = Vec::new();
        for &d in &dims {
            for &k in &axis(&self.ks, base.k) {
                for &n_sp in &axis(&self.n_sps, base.n_sp) {
                    for &n_tmp in &axis(&self.n_tmps, base.n_tmp) {
                        out.push(PipelineConfig {
                            descriptor_dim: d,
                            k,
                            n_sp,
                            n_tmp,
                            ..base.clone()
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug)]
pub struct SweepCell {
    pub config: PipelineConfig,
    pub report: Result<CvReport>,
}

#[derive(Debug)]
pub struct SweepResult {
    pub cells: Vec<SweepCell>,
}

/// Runs `run_cv` for every grid cell, continuing past failures.
pub fn sweep(
    manifest: &DatasetManifest,
    grids: &[DescriptorGrid],
    base: &PipelineConfig,
    grid: &SweepGrid,
) -> Result<SweepResult> {
    let configs = grid.configs(base);
    if configs.is_empty() {
        return Err(Error::invalid("empty sweep grid"));
    }
    let cells = configs
        .into_iter()
        .map(|config| {
            let report = run_cv(manifest, grids, &config);
            if let Err(e) = &report {
                tracing::warn!(K = config.k, D = ?config.descriptor_dim, "sweep cell failed: {e}");
            }
            SweepCell { config, report }
        })
        .collect();
    Ok(SweepResult { cells })
}

/// Index of the highest accuracy; ties go to the earliest entry.
pub fn best_index(accuracies: &[Option<f64>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, a) in accuracies.iter().enumerate() {
        if let Some(a) = *a {
            if best.is_none_or(|(_, b)| a > b) {
                best = Some((i, a));
            }
        }
    }
    best.map(|(i, _)| i)
}

impl SweepResult {
    pub fn accuracies(&self) -> Vec<Option<f64>> {
        self.cells
            .iter()
            .map(|c| c.report.as_ref().ok().map(CvReport::accuracy))
            .collect()
    }

    pub fn best(&self) -> Option<&SweepCell> {
        best_index(&self.accuracies()).map(|i| &self.cells[i])
    }

    /// Accuracy table (percent): rows are descriptor dimensions, columns are
    /// (K, N_sp, N_tmp) combinations. Failed cells read `failed`.
    pub fn table(&self) -> String {
        let dim_key = |c: &PipelineConfig| c.descriptor_dim.map_or("raw".to_string(), |d| d.to_string());
        let mut rows: Vec<String> = Vec::new();
        let mut cols: Vec<(usize, usize, usize)> = Vec::new();
        for c in &self.cells {
            let r = dim_key(&c.config);
            if !rows.contains(&r) {
                rows.push(r);
            }
            let k = (c.config.k, c.config.n_sp, c.config.n_tmp);
            if !cols.contains(&k) {
                cols.push(k);
            }
        }
        let mut s = String::new();
        let method = self.cells.first().map_or(String::new(), |c| c.config.method.to_string());
        let _ = writeln!(s, "method={method}  rows: D  columns: K/N_sp/N_tmp");
        let _ = write!(s, "{:<8}", "D");
        for (k, sp, tmp) in &cols {
            let _ = write!(s, " {:>12}", format!("{k}/{sp}/{tmp}"));
        }
        s.push('\n');
        for r in &rows {
            let _ = write!(s, "{r:<8}");
            for col in &cols {
                let cell = self
                    .cells
                    .iter()
                    .find(|c| dim_key(&c.config) == *r && (c.config.k, c.config.n_sp, c.config.n_tmp) == *col);
                let text = match cell.map(|c| &c.report) {
                    Some(Ok(rep)) => format!("{:.1}", 100.0 * rep.accuracy()),
                    Some(Err(_)) => "failed".into(),
                    None => "-".into(),
                };
                let _ = write!(s, " {text:>12}");
            }
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::SampleMeta;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn manifest(groups: &[(&str, usize)]) -> DatasetManifest {
        let mut samples = Vec::new();
        for (g, n) in groups {
            for i in 0..*n {
                samples.push(SampleMeta {
                    sample_id: format!("{g}-{i}"),
                    path: format!("{g}-{i}.dgt").into(),
                    class_label: 1 + i % 2,
                    group_id: g.to_string(),
                });
            }
        }
        DatasetManifest::new(2, samples).unwrap()
    }

    #[test]
    fn two_groups_fold_sizes() {
        let folds = louo_folds(&manifest(&[("B", 2), ("A", 3)])).unwrap();
        assert_eq!(folds.len(), 2);
        assert_eq!(folds[0].group, "A");
        assert_eq!((folds[0].test.len(), folds[0].train.len()), (3, 2));
        assert_eq!((folds[1].test.len(), folds[1].train.len()), (2, 3));
    }

    #[test]
    fn twenty_groups_twenty_folds() {
        let groups: Vec<(String, usize)> = (0..20).map(|g| (format!("u{g:02}"), 3)).collect();
        let refs: Vec<(&str, usize)> = groups.iter().map(|(g, n)| (g.as_str(), *n)).collect();
        assert_eq!(louo_folds(&manifest(&refs)).unwrap().len(), 20);
    }

    #[test]
    fn single_group_is_rejected() {
        assert!(matches!(louo_folds(&manifest(&[("A", 4)])), Err(Error::TooFewGroups(1))));
    }

    #[test]
    fn folds_partition_random_manifests() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let n_groups = rng.random_range(2..8);
            let names: Vec<String> = (0..n_groups).map(|g| format!("g{g}")).collect();
            let groups: Vec<(&str, usize)> = names.iter().map(|g| (g.as_str(), rng.random_range(1..6))).collect();
            let m = manifest(&groups);
            let folds = louo_folds(&m).unwrap();
            let mut seen = vec![0usize; m.len()];
            for f in &folds {
                for &i in &f.test {
                    seen[i] += 1;
                    assert_eq!(m.samples[i].group_id, f.group);
                }
                assert_eq!(f.test.len() + f.train.len(), m.len());
                assert!(f.train.iter().all(|&i| m.samples[i].group_id != f.group));
            }
            assert!(seen.iter().all(|&c| c == 1));
        }
    }

    #[test]
    fn sweep_grid_order_and_size() {
        let grid = SweepGrid {
            ks: vec![4, 8],
            dims: vec![2, 4],
            ..Default::default()
        };
        let configs = grid.configs(&PipelineConfig::default());
        let got: Vec<(Option<usize>, usize)> = configs.iter().map(|c| (c.descriptor_dim, c.k)).collect();
        assert_eq!(got, vec![(Some(2), 4), (Some(2), 8), (Some(4), 4), (Some(4), 8)]);

        let default_grid = SweepGrid {
            ks: vec![64, 128, 256, 512],
            dims: vec![64, 128, 256],
            n_sps: vec![5, 10, 20],
            n_tmps: vec![],
        };
        assert_eq!(default_grid.configs(&PipelineConfig::default()).len(), 36);
    }

    #[test]
    fn best_index_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let n = rng.random_range(1..12);
            let accs: Vec<Option<f64>> = (0..n)
                .map(|_| rng.random_bool(0.8).then(|| f64::from(rng.random_range(0..5u8)) / 4.0))
                .collect();
            let max = accs.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
            let expected = accs.iter().position(|a| *a == Some(max));
            assert_eq!(best_index(&accs), expected);
        }
    }

    #[test]
    fn config_validation_messages() {
        let cfg = PipelineConfig {
            n_sp: 50,
            ..Default::default()
        };
        let err = cfg.validate(7, 512).unwrap_err().to_string();
        assert!(err.contains("N_sp exceeds a^2=49"), "{err}");
        let cfg = PipelineConfig {
            n_tmp: 8,
            ..Default::default()
        };
        assert!(cfg.validate(7, 512).unwrap_err().to_string().contains("2^(L+1)-1=7"));
        let lcd = PipelineConfig {
            method: Method::Lcd,
            n_sp: 500,
            ..Default::default()
        };
        assert!(lcd.validate(7, 512).is_ok());
        assert!(PipelineConfig::default().validate(7, 32).is_err());
    }

    #[test]
    fn report_invariants_on_handmade_predictions() {
        let mk = |id: &str, g: &str, t: usize, p: usize| Prediction {
            sample_id: id.into(),
            group: g.into(),
            truth: t,
            predicted: p,
            scores: vec![0.0; 3],
        };
        let preds = vec![mk("a", "A", 1, 1), mk("b", "A", 2, 3), mk("c", "B", 3, 3), mk("d", "B", 3, 3), mk("e", "B", 1, 2)];
        let r = CvReport::assemble(
            "x".into(),
            PipelineConfig::default(),
            3,
            &[("A".into(), 3), ("B".into(), 2)],
            preds,
        );
        assert_eq!(r.total(), 5);
        let row_sums: Vec<usize> = r.confusion.iter().map(|row| row.iter().sum()).collect();
        assert_eq!(row_sums, vec![2, 1, 2]);
        assert!((r.accuracy() - 3.0 / 5.0).abs() < 1e-12);
        assert_eq!(r.fold_accuracies(), vec![0.5, 2.0 / 3.0]);
        assert!((r.mean_fold_accuracy() - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        let csv = r.confusion_csv();
        assert_eq!(csv.lines().next(), Some("truth,pred_1,pred_2,pred_3"));
        assert!(r.to_text().contains("confusion.3=0,0,2"));
    }
}
