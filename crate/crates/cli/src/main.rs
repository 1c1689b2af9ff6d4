use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use tracing::warn;

use gridvlad::aggregate::{train_dsar, train_dstar, TrainedAggregator};
use gridvlad::classify::{predict, train_ova};
use gridvlad::codebook::{fit_kmeans, Codebook};
use gridvlad::evaluate::{fuse_reports, load_grids, run_cv, sweep, CvReport, PcaScope, PipelineConfig, SweepGrid};
use gridvlad::exec;
use gridvlad::pca::{apply_pca, fit_pca_on_grids, sample_descriptors, PcaModel};
use gridvlad::synth::{generate, SynthSpec};
use gridvlad::vlad::{encode_lcd, encode_pyramid, PyramidConfig};
use gridvlad::{parse_manifest, Cell, DatasetManifest, DescriptorGrid, Method, VideoRepresentation};

#[derive(Parser)]
#[command(name = "gridvlad", version, about = "Spatiotemporal VLAD aggregation of grid descriptors")]
struct Cli {
    /// Worker threads (default: available parallelism). GRIDVLAD_THREADS overrides.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled dataset (DGT1 grids + manifest.tsv).
    SynthGen(SynthArgs),
    /// Fit a PCA model on every descriptor of a manifest.
    FitPca(FitPcaArgs),
    /// Fit a k-means codebook.
    FitCodebook(FitCodebookArgs),
    /// Encode every sample into a VRP1 representation.
    Encode(EncodeArgs),
    /// Learn DSAR or DSTAR weights and write an aggregator bundle.
    TrainWeights(TrainWeightsArgs),
    /// Train a one-vs-all linear SVM on encoded representations.
    TrainClassifier(TrainClassifierArgs),
    /// Leave-one-group-out cross-validation of a full pipeline.
    Evaluate(EvaluateArgs),
    /// Cross-validate every cell of a parameter grid.
    Sweep(SweepArgs),
    /// Write spatial and temporal weight magnitudes as CSV.
    ExportHeatmap(HeatmapArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Lcd,
    Star,
    Dsar,
    Dstar,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Lcd => Method::Lcd,
            MethodArg::Star => Method::Star,
            MethodArg::Dsar => Method::Dsar,
            MethodArg::Dstar => Method::Dstar,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Train,
    All,
}

/// `raw` or a positive PCA output dimension.
#[derive(Clone, Copy, Debug)]
struct DimArg(Option<usize>);

impl std::str::FromStr for DimArg {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        if s.eq_ignore_ascii_case("raw") {
            return Ok(DimArg(None));
        }
        match s.parse::<usize>() {
            Ok(d) if d > 0 => Ok(DimArg(Some(d))),
            _ => Err(format!("expected a positive integer or `raw`, got {s:?}")),
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 40)]
    per_class: usize,
    #[arg(long, default_value_t = 4)]
    groups: usize,
    #[arg(long, default_value_t = 16)]
    frames: usize,
    /// Grid side a.
    #[arg(long, default_value_t = 3)]
    grid: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    /// Zero-based `row,col` cells separated by `;` (default: every cell).
    #[arg(long)]
    signal_cells: Option<String>,
    /// Pyramid depth whose leaf segments `--signal-segments` refers to.
    #[arg(long = "L", default_value_t = 0)]
    levels: usize,
    /// Zero-based leaf segments, comma separated (default: all).
    #[arg(long)]
    signal_segments: Option<String>,
    #[arg(long, default_value_t = 1.5)]
    mu: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct FitPcaArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long = "D", default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = gridvlad::pca::DEFAULT_FIT_CAP)]
    fit_cap: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct FitCodebookArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// PCA model applied before clustering.
    #[arg(long)]
    pca: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long = "K", default_value_t = 128)]
    k: usize,
    #[arg(long, default_value_t = 100_000)]
    fit_cap: usize,
    #[arg(long, default_value_t = gridvlad::codebook::DEFAULT_MAX_ITERS)]
    max_iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    pca: Option<PathBuf>,
    #[arg(long)]
    codebook: PathBuf,
    #[arg(long, value_enum, default_value = "dstar")]
    method: MethodArg,
    /// Aggregator bundle from `train-weights` (dsar and dstar).
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Pyramid depth for star (dstar takes it from the bundle).
    #[arg(long = "L", default_value_t = 2)]
    levels: usize,
    /// Output directory; one `<sample_id>.vrp` per sample.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainWeightsArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    pca: Option<PathBuf>,
    #[arg(long)]
    codebook: PathBuf,
    #[arg(long, value_enum, default_value = "dstar")]
    method: MethodArg,
    #[arg(long = "N-sp", default_value_t = 5)]
    n_sp: usize,
    #[arg(long = "N-tmp", default_value_t = 5)]
    n_tmp: usize,
    #[arg(long = "L", default_value_t = 2)]
    levels: usize,
    #[arg(long, default_value_t = gridvlad::aggregate::DEFAULT_ITERS)]
    iters: usize,
    /// Bundle directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainClassifierArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory of `<sample_id>.vrp` files from `encode`.
    #[arg(long)]
    features: PathBuf,
    #[arg(long = "C-reg", default_value_t = gridvlad::classify::DEFAULT_C_REG)]
    c_reg: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct PipelineArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// One method, or several comma separated for late fusion.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "dstar")]
    method: Vec<MethodArg>,
    #[arg(long = "K", default_value_t = 128)]
    k: usize,
    /// PCA output dimension, or `raw` to skip PCA.
    #[arg(long = "D", default_value = "64")]
    dim: DimArg,
    /// Spatial components [default: 5].
    #[arg(long = "N-sp")]
    n_sp: Option<usize>,
    /// Temporal components [default: 5].
    #[arg(long = "N-tmp")]
    n_tmp: Option<usize>,
    #[arg(long = "L", default_value_t = 2)]
    levels: usize,
    #[arg(long, default_value_t = gridvlad::aggregate::DEFAULT_ITERS)]
    iters: usize,
    #[arg(long = "C-reg", default_value_t = gridvlad::classify::DEFAULT_C_REG)]
    c_reg: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Samples the PCA basis is fitted on.
    #[arg(long, value_enum, default_value = "train")]
    pca_scope: ScopeArg,
    #[arg(long, default_value_t = gridvlad::pca::DEFAULT_FIT_CAP)]
    pca_fit_cap: usize,
    #[arg(long, default_value_t = 100_000)]
    kmeans_fit_cap: usize,
    /// Output directory for report files.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// Per-method fusion weights, comma separated (default: equal).
    #[arg(long, value_delimiter = ',')]
    fusion_weights: Option<Vec<f64>>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[arg(long = "Ks", value_delimiter = ',')]
    ks: Vec<usize>,
    #[arg(long = "Ds", value_delimiter = ',')]
    dims: Vec<usize>,
    #[arg(long = "N-sps", value_delimiter = ',')]
    n_sps: Vec<usize>,
    #[arg(long = "N-tmps", value_delimiter = ',')]
    n_tmps: Vec<usize>,
}

#[derive(Args)]
struct HeatmapArgs {
    /// Aggregator bundle from `train-weights`.
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn print_config<K: Display, V: Display>(command: &str, pairs: impl IntoIterator<Item = (K, V)>) {
    eprintln!("# {command}");
    for (k, v) in pairs {
        eprintln!("#   {k}={v}");
    }
}

fn threads(flag: Option<usize>) -> Result<usize> {
    let env = match std::env::var("GRIDVLAD_THREADS") {
        Ok(v) => Some(
            v.parse::<usize>()
                .with_context(|| format!("GRIDVLAD_THREADS must be a positive integer, got {v:?}"))?,
        ),
        Err(_) => None,
    };
    let n = env.or(flag).unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    ensure!(n > 0, "--threads must be >= 1");
    Ok(n)
}

fn load_dataset(manifest_path: &Path) -> Result<(DatasetManifest, Vec<DescriptorGrid>)> {
    let manifest = parse_manifest(manifest_path)?;
    ensure!(!manifest.is_empty(), "manifest {} lists no samples", manifest_path.display());
    let grids = load_grids(&manifest, manifest_path)?;
    Ok((manifest, grids))
}

fn reduce(grids: Vec<DescriptorGrid>, pca: Option<&Path>) -> Result<Vec<DescriptorGrid>> {
    match pca {
        None => Ok(grids),
        Some(path) => {
            let model = PcaModel::load(path)?;
            Ok(exec::try_map(&grids, |g| apply_pca(&model, g))?)
        }
    }
}

fn parse_cells(text: &str, grid: usize) -> Result<Vec<Cell>> {
    text.split(';')
        .filter(|s| !s.trim().is_empty())
        .map(|pair| {
            let (r, c) = pair
                .split_once(',')
                .with_context(|| format!("signal cell {pair:?} is not `row,col`"))?;
            let cell = Cell::new(r.trim().parse()?, c.trim().parse()?);
            ensure!(cell.row < grid && cell.col < grid, "signal cell {pair:?} outside {grid}x{grid} grid");
            Ok(cell)
        })
        .collect()
}

fn synth_gen(a: SynthArgs) -> Result<()> {
    let signal_cells = match &a.signal_cells {
        Some(s) => parse_cells(s, a.grid)?,
        None => (0..a.grid * a.grid).map(|i| Cell::from_index(i, a.grid)).collect(),
    };
    let signal_segments = match &a.signal_segments {
        Some(s) => s
            .split(',')
            .map(|v| v.trim().parse::<usize>().with_context(|| format!("bad segment {v:?}")))
            .collect::<Result<Vec<_>>>()?,
        None => (0..1usize << a.levels).collect(),
    };
    let spec = SynthSpec {
        classes: a.classes,
        per_class: a.per_class,
        groups: a.groups,
        frames: a.frames,
        grid: a.grid,
        dim: a.dim,
        signal_cells,
        levels: a.levels,
        signal_segments,
        mu: a.mu,
        sigma: a.sigma,
        seed: a.seed,
    };
    let cells: Vec<String> = spec.signal_cells.iter().map(|c| format!("{},{}", c.row, c.col)).collect();
    let segments: Vec<String> = spec.signal_segments.iter().map(usize::to_string).collect();
    print_config(
        "synth-gen",
        [
            ("out", a.out.display().to_string()),
            ("classes", spec.classes.to_string()),
            ("per_class", spec.per_class.to_string()),
            ("groups", spec.groups.to_string()),
            ("T", spec.frames.to_string()),
            ("a", spec.grid.to_string()),
            ("D", spec.dim.to_string()),
            ("signal_cells", cells.join(";")),
            ("L", spec.levels.to_string()),
            ("signal_segments", segments.join(",")),
            ("mu", spec.mu.to_string()),
            ("sigma", spec.sigma.to_string()),
            ("seed", spec.seed.to_string()),
        ],
    );
    let manifest = generate(&spec, &a.out)?;
    println!("wrote {} samples to {}", manifest.len(), a.out.display());
    Ok(())
}

fn fit_pca(a: FitPcaArgs) -> Result<()> {
    print_config(
        "fit-pca",
        [
            ("manifest", a.manifest.display().to_string()),
            ("out", a.out.display().to_string()),
            ("D", a.dim.to_string()),
            ("fit_cap", a.fit_cap.to_string()),
            ("seed", a.seed.to_string()),
        ],
    );
    let (_, grids) = load_dataset(&a.manifest)?;
    let refs: Vec<&DescriptorGrid> = grids.iter().collect();
    let model = fit_pca_on_grids(&refs, a.dim, a.fit_cap, a.seed)?;
    model.save(&a.out)?;
    println!("pca {} -> {} written to {}", model.input_dim(), model.output_dim(), a.out.display());
    Ok(())
}

fn fit_codebook(a: FitCodebookArgs) -> Result<()> {
    print_config(
        "fit-codebook",
        [
            ("manifest", a.manifest.display().to_string()),
            ("pca", a.pca.as_ref().map_or("none".into(), |p| p.display().to_string())),
            ("out", a.out.display().to_string()),
            ("K", a.k.to_string()),
            ("fit_cap", a.fit_cap.to_string()),
            ("max_iters", a.max_iters.to_string()),
            ("seed", a.seed.to_string()),
        ],
    );
    let (_, grids) = load_dataset(&a.manifest)?;
    let grids = reduce(grids, a.pca.as_deref())?;
    let refs: Vec<&DescriptorGrid> = grids.iter().collect();
    let pool = sample_descriptors(&refs, a.fit_cap, a.seed);
    let codebook = fit_kmeans(&pool, a.k, a.seed, a.max_iters)?;
    codebook.save(&a.out)?;
    println!("codebook K={} D={} written to {}", codebook.k(), codebook.dim(), a.out.display());
    Ok(())
}

fn encode(a: EncodeArgs) -> Result<()> {
    let method = Method::from(a.method);
    let bundle = match method {
        Method::Dsar | Method::Dstar => {
            let dir = a
                .weights
                .as_ref()
                .with_context(|| format!("--weights is required for {method}"))?;
            let (agg, _) = TrainedAggregator::load_bundle(dir)?;
            ensure!(agg.method == method, "bundle {} holds {} weights, not {method}", dir.display(), agg.method);
            Some(agg)
        }
        _ => None,
    };
    let levels = bundle.as_ref().map_or(a.levels, |b| b.pyramid.levels);
    print_config(
        "encode",
        [
            ("manifest", a.manifest.display().to_string()),
            ("pca", a.pca.as_ref().map_or("none".into(), |p| p.display().to_string())),
            ("codebook", a.codebook.display().to_string()),
            ("method", method.to_string()),
            ("weights", a.weights.as_ref().map_or("none".into(), |p| p.display().to_string())),
            ("L", levels.to_string()),
            ("out", a.out.display().to_string()),
        ],
    );
    let codebook = Codebook::load(&a.codebook)?;
    let (manifest, grids) = load_dataset(&a.manifest)?;
    let grids = reduce(grids, a.pca.as_deref())?;
    let reps: Vec<VideoRepresentation> = exec::try_map(&grids, |g| match method {
        Method::Lcd => encode_lcd(g, &codebook),
        Method::Star => {
            let p = encode_pyramid(g, &codebook, PyramidConfig::new(levels))?;
            TrainedAggregator::star(g.grid(), p.config(), codebook.k(), codebook.dim()).aggregate(&p)
        }
        _ => {
            let agg = bundle.as_ref().expect("checked above");
            agg.aggregate(&encode_pyramid(g, &codebook, agg.pyramid)?)
        }
    })?;
    fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    for (s, rep) in manifest.samples.iter().zip(&reps) {
        rep.save(a.out.join(format!("{}.vrp", s.sample_id)))?;
    }
    println!("encoded {} samples ({} values each) into {}", reps.len(), reps[0].vector.len(), a.out.display());
    Ok(())
}

fn train_weights(a: TrainWeightsArgs) -> Result<()> {
    let method = Method::from(a.method);
    ensure!(
        matches!(method, Method::Dsar | Method::Dstar),
        "train-weights supports dsar and dstar, not {method}"
    );
    print_config(
        "train-weights",
        [
            ("manifest", a.manifest.display().to_string()),
            ("pca", a.pca.as_ref().map_or("none".into(), |p| p.display().to_string())),
            ("codebook", a.codebook.display().to_string()),
            ("method", method.to_string()),
            ("N_sp", a.n_sp.to_string()),
            ("N_tmp", a.n_tmp.to_string()),
            ("L", a.levels.to_string()),
            ("iters", a.iters.to_string()),
            ("out", a.out.display().to_string()),
        ],
    );
    let codebook = Codebook::load(&a.codebook)?;
    let (manifest, grids) = load_dataset(&a.manifest)?;
    let grids = reduce(grids, a.pca.as_deref())?;
    let levels = if method == Method::Dstar { a.levels } else { 0 };
    let config = PipelineConfig {
        method,
        n_sp: a.n_sp,
        n_tmp: a.n_tmp,
        levels,
        iters: a.iters,
        descriptor_dim: None,
        ..PipelineConfig::default()
    };
    config.validate(grids[0].grid(), grids[0].dim())?;
    let pyramids = exec::try_map(&grids, |g| encode_pyramid(g, &codebook, PyramidConfig::new(levels)))?;
    let samples: Vec<_> = pyramids.iter().zip(&manifest.samples).map(|(p, s)| (p, s.class_label)).collect();
    let agg = match method {
        Method::Dsar => train_dsar(&samples, manifest.classes, a.n_sp)?,
        _ => train_dstar(&samples, manifest.classes, a.n_sp, a.n_tmp, a.iters)?,
    };
    for h in &agg.history {
        println!(
            "iteration {}: tmp objective {:.6e}, sp objective {:.6e}, |dW_sp|_F {:.3e}",
            h.iteration, h.tmp_objective, h.sp_objective, h.sp_delta
        );
    }
    let extra = [
        ("codebook", a.codebook.display().to_string()),
        ("pca", a.pca.as_ref().map_or("none".into(), |p| p.display().to_string())),
    ];
    agg.save_bundle(&a.out, &extra)?;
    println!("{method} weights written to {}", a.out.display());
    Ok(())
}

fn train_classifier(a: TrainClassifierArgs) -> Result<()> {
    print_config(
        "train-classifier",
        [
            ("manifest", a.manifest.display().to_string()),
            ("features", a.features.display().to_string()),
            ("C_reg", a.c_reg.to_string()),
            ("seed", a.seed.to_string()),
            ("out", a.out.display().to_string()),
        ],
    );
    let manifest = parse_manifest(&a.manifest)?;
    let reps = manifest
        .samples
        .iter()
        .map(|s| VideoRepresentation::load(a.features.join(format!("{}.vrp", s.sample_id))))
        .collect::<gridvlad::Result<Vec<_>>>()?;
    let x: Vec<&[f64]> = reps.iter().map(|r| r.vector.as_slice()).collect();
    let y: Vec<usize> = manifest.samples.iter().map(|s| s.class_label).collect();
    let model = train_ova(&x, &y, manifest.classes, a.c_reg, a.seed)?;
    let correct = x
        .iter()
        .zip(&y)
        .filter(|(x, &y)| predict(&model, x).ok() == Some(y))
        .count();
    model.save(&a.out)?;
    println!(
        "classifier ({} classes, dim {}) written to {}; training accuracy {:.4}",
        model.classes(),
        model.dim(),
        a.out.display(),
        correct as f64 / x.len() as f64
    );
    Ok(())
}

fn pipeline_configs(p: &PipelineArgs) -> Result<Vec<PipelineConfig>> {
    ensure!(!p.method.is_empty(), "--method needs at least one value");
    let mut out = Vec::new();
    for &m in &p.method {
        let method = Method::from(m);
        if method == Method::Lcd && (p.n_sp.is_some() || p.n_tmp.is_some()) {
            warn!("--N-sp/--N-tmp are ignored for lcd");
        }
        if method == Method::Dsar && p.n_tmp.is_some() {
            warn!("--N-tmp is ignored for dsar");
        }
        out.push(PipelineConfig {
            method,
            k: p.k,
            descriptor_dim: p.dim.0,
            n_sp: p.n_sp.unwrap_or(5),
            n_tmp: p.n_tmp.unwrap_or(5),
            levels: p.levels,
            iters: p.iters,
            c_reg: p.c_reg,
            seed: p.seed,
            pca_scope: match p.pca_scope {
                ScopeArg::Train => PcaScope::TrainOnly,
                ScopeArg::All => PcaScope::All,
            },
            pca_fit_cap: p.pca_fit_cap,
            kmeans_fit_cap: p.kmeans_fit_cap,
            ..PipelineConfig::default()
        });
    }
    Ok(out)
}

fn write_report(dir: &Path, report: &CvReport) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let stem = report.label.replace(['(', ')', '+'], "_");
    let stem = stem.trim_matches('_');
    for (suffix, text) in [
        ("report.txt", report.to_text()),
        ("confusion.csv", report.confusion_csv()),
        ("predictions.tsv", report.predictions_tsv()),
    ] {
        let path = dir.join(format!("{stem}.{suffix}"));
        fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))?;
    }
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let p = &a.pipeline;
    let configs = pipeline_configs(p)?;
    if let Some(w) = &a.fusion_weights {
        ensure!(w.len() == configs.len(), "--fusion-weights needs one weight per method ({})", configs.len());
    }
    let (manifest, grids) = load_dataset(&p.manifest)?;
    for c in &configs {
        c.validate(grids[0].grid(), grids[0].dim())?;
        print_config(
            "evaluate",
            std::iter::once(("manifest", p.manifest.display().to_string()))
                .chain(std::iter::once(("a", grids[0].grid().to_string())))
                .chain(c.key_values()),
        );
    }
    let mut reports = Vec::new();
    for c in &configs {
        let r = run_cv(&manifest, &grids, c)?;
        print!("{}", r.to_text());
        println!();
        reports.push(r);
    }
    if reports.len() > 1 {
        let refs: Vec<&CvReport> = reports.iter().collect();
        let fused = fuse_reports(&refs, a.fusion_weights.as_deref())?;
        print!("{}", fused.to_text());
        reports.push(fused);
    }
    if let Some(dir) = &p.out {
        for r in &reports {
            write_report(dir, r)?;
        }
    }
    Ok(())
}

fn sweep_cmd(a: SweepArgs) -> Result<()> {
    let p = &a.pipeline;
    let configs = pipeline_configs(p)?;
    ensure!(configs.len() == 1, "sweep takes a single --method");
    let grid = SweepGrid {
        dims: a.dims.clone(),
        ks: a.ks.clone(),
        n_sps: a.n_sps.clone(),
        n_tmps: a.n_tmps.clone(),
    };
    let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
    print_config(
        "sweep",
        std::iter::once(("manifest", p.manifest.display().to_string()))
            .chain(configs[0].key_values())
            .chain([
                ("Ds", list(&a.dims)),
                ("Ks", list(&a.ks)),
                ("N_sps", list(&a.n_sps)),
                ("N_tmps", list(&a.n_tmps)),
            ]),
    );
    let (manifest, grids) = load_dataset(&p.manifest)?;
    let result = sweep(&manifest, &grids, &configs[0], &grid)?;
    let table = result.table();
    print!("{table}");
    for cell in &result.cells {
        if let Err(e) = &cell.report {
            eprintln!(
                "cell K={} D={:?} N_sp={} N_tmp={} failed: {e}",
                cell.config.k, cell.config.descriptor_dim, cell.config.n_sp, cell.config.n_tmp
            );
        }
    }
    if let Some(best) = result.best() {
        let r = best.report.as_ref().expect("best cell succeeded");
        println!(
            "best: K={} D={} N_sp={} N_tmp={} accuracy={:.4}",
            best.config.k,
            best.config.descriptor_dim.map_or("raw".into(), |d| d.to_string()),
            best.config.n_sp,
            best.config.n_tmp,
            r.accuracy()
        );
    }
    if let Some(dir) = &p.out {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        fs::write(dir.join("sweep.txt"), &table)?;
        for (i, cell) in result.cells.iter().enumerate() {
            if let Ok(r) = &cell.report {
                fs::write(dir.join(format!("cell{i:03}.report.txt")), r.to_text())?;
            }
        }
    }
    if result.cells.iter().all(|c| c.report.is_err()) {
        bail!("every sweep cell failed");
    }
    Ok(())
}

fn export_heatmap(a: HeatmapArgs) -> Result<()> {
    print_config(
        "export-heatmap",
        [("weights", a.weights.display().to_string()), ("out", a.out.display().to_string())],
    );
    let (agg, _) = TrainedAggregator::load_bundle(&a.weights)?;
    let w_sp = agg
        .w_sp
        .as_ref()
        .with_context(|| format!("bundle {} has no spatial weights", a.weights.display()))?;
    fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    let mags = w_sp.row_magnitudes();
    let mut csv = String::new();
    for row in mags.chunks(agg.grid) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        csv.push_str(&cells.join(","));
        csv.push('\n');
    }
    fs::write(a.out.join("spatial.csv"), csv)?;
    if let Some(w_tmp) = &agg.w_tmp {
        let mut csv = String::from("level,segment,magnitude\n");
        let mags = w_tmp.row_magnitudes();
        for (i, (l, s)) in agg.pyramid.iter().enumerate() {
            csv.push_str(&format!("{l},{s},{:.6}\n", mags[i]));
        }
        fs::write(a.out.join("temporal.csv"), csv)?;
    }
    println!("heatmaps written to {}", a.out.display());
    Ok(())
}

fn main() -> std::process::ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let run = || -> Result<()> {
        let n = threads(cli.threads)?;
        exec::init_threads(n).map_err(anyhow::Error::msg)?;
        eprintln!("# threads={}", exec::current_threads());
        match cli.command {
            Command::SynthGen(a) => synth_gen(a),
            Command::FitPca(a) => fit_pca(a),
            Command::FitCodebook(a) => fit_codebook(a),
            Command::Encode(a) => encode(a),
            Command::TrainWeights(a) => train_weights(a),
            Command::TrainClassifier(a) => train_classifier(a),
            Command::Evaluate(a) => evaluate(a),
            Command::Sweep(a) => sweep_cmd(a),
            Command::ExportHeatmap(a) => export_heatmap(a),
        }
    };
    match run() {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::ExitCode::FAILURE
        }
    }
}
