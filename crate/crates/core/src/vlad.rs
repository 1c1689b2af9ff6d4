//! VLAD encoding of grid descriptors: whole video, per cell, and per cell per
//! temporal-pyramid segment, plus the intra/power/L2 normalization chain.

use std::fmt;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use crate::binio::{self, Reader, Writer};
use crate::codebook::Codebook;
use crate::error::{Error, Result};
use crate::exec;
use crate::grid::{Cell, DescriptorGrid};

const MAGIC: &[u8; 4] = b"VRP1";

/// Temporal pyramid with levels `0..=L`; level `l` splits the video into `2^l`
/// segments, `d = 2^(L+1) − 1` segments in total.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PyramidConfig {
    pub levels: usize,
}

impl PyramidConfig {
    pub fn new(levels: usize) -> Self {
        assert!(levels < 31, "pyramid depth {levels} is unreasonable");
        PyramidConfig { levels }
    }

    /// Total segment count `d`.
    pub fn segments(&self) -> usize {
        (1 << (self.levels + 1)) - 1
    }

    /// Flat index of segment `segment` (zero-based) at `level`; level-major.
    pub fn segment_index(level: usize, segment: usize) -> usize {
        (1 << level) - 1 + segment
    }

    /// `(level, segment)` pairs in flat-index order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> {
        (0..=self.levels).flat_map(|l| (0..1usize << l).map(move |s| (l, s)))
    }
}

/// Frame ranges (zero-based, half-open) of the `2^level` segments of a
/// `frames`-long video. Earlier segments take the remainder frames.
pub fn segment_bounds(frames: usize, level: usize) -> Vec<Range<usize>> {
    let parts = 1usize << level;
    let base = frames / parts;
    let extra = frames % parts;
    let mut start = 0;
    (0..parts)
        .map(|s| {
            let len = base + usize::from(s < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

/// VLAD vector (length `K·D`) for one cell and one temporal segment.
#[derive(Debug, Clone, PartialEq)]
pub struct CellVlad {
    pub cell: Cell,
    pub level: usize,
    pub segment: usize,
    pub vector: Vec<f64>,
}

fn check_compatible(grid: &DescriptorGrid, codebook: &Codebook) -> Result<()> {
    if grid.dim() != codebook.dim() {
        return Err(Error::DimensionMismatch {
            expected: codebook.dim(),
            got: grid.dim(),
        });
    }
    Ok(())
}

fn add_residual(acc: &mut [f64], codebook: &Codebook, k: usize, x: &[f32]) {
    let dim = codebook.dim();
    let c = codebook.center(k);
    for ((a, &xv), cv) in acc[k * dim..(k + 1) * dim].iter_mut().zip(x).zip(c) {
        *a += f64::from(xv) - cv;
    }
}

/// Unnormalized residual sums over the descriptors of `cell` in `frames`.
/// An empty range yields the zero vector.
pub fn encode_cell_segment(
    grid: &DescriptorGrid,
    codebook: &Codebook,
    cell: Cell,
    frames: Range<usize>,
) -> Result<CellVlad> {
    check_compatible(grid, codebook)?;
    if cell.row >= grid.grid() || cell.col >= grid.grid() {
        return Err(Error::invalid(format!("cell {cell:?} outside {0}x{0} grid", grid.grid())));
    }
    if frames.end > grid.frames() {
        return Err(Error::invalid(format!(
            "frame range {frames:?} exceeds {} frames",
            grid.frames()
        )));
    }
    let mut vector = vec![0.0; codebook.k() * codebook.dim()];
    for t in frames {
        let x = grid.descriptor(t, cell);
        let (k, _) = codebook.nearest(x);
        add_residual(&mut vector, codebook, k, x);
    }
    Ok(CellVlad {
        cell,
        level: 0,
        segment: 0,
        vector,
    })
}

/// In place: per-center L2 (intra), signed square root, then global L2.
/// Zero blocks and zero vectors stay zero.
pub fn normalize_vlad(vector: &mut [f64], k: usize) -> Result<()> {
    if k == 0 || !vector.len().is_multiple_of(k) {
        return Err(Error::invalid(format!(
            "VLAD length {} not divisible by K={k}",
            vector.len()
        )));
    }
    let block = vector.len() / k;
    if block > 0 {
        for b in vector.chunks_exact_mut(block) {
            l2_normalize(b);
        }
    }
    power_l2(vector);
    Ok(())
}

pub(crate) fn l2_normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

/// Signed square root followed by global L2.
pub fn power_l2(v: &mut [f64]) {
    for x in v.iter_mut() {
        *x = x.signum() * x.abs().sqrt();
    }
    l2_normalize(v);
}

impl CellVlad {
    pub fn normalized(mut self, k: usize) -> Result<Self> {
        normalize_vlad(&mut self.vector, k)?;
        Ok(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Lcd,
    Star,
    Dsar,
    Dstar,
}

impl Method {
    fn tag(self) -> u32 {
        match self {
            Method::Lcd => 0,
            Method::Star => 1,
            Method::Dsar => 2,
            Method::Dstar => 3,
        }
    }

    fn from_tag(tag: u32) -> Option<Self> {
        Some(match tag {
            0 => Method::Lcd,
            1 => Method::Star,
            2 => Method::Dsar,
            3 => Method::Dstar,
            _ => return None,
        })
    }

    /// Whether the method encodes a temporal pyramid.
    pub fn uses_pyramid(self) -> bool {
        matches!(self, Method::Star | Method::Dstar)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Lcd => "lcd",
            Method::Star => "star",
            Method::Dsar => "dsar",
            Method::Dstar => "dstar",
        })
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lcd" => Ok(Method::Lcd),
            "star" => Ok(Method::Star),
            "dsar" => Ok(Method::Dsar),
            "dstar" => Ok(Method::Dstar),
            other => Err(Error::invalid(format!(
                "unknown method {other:?} (expected lcd, star, dsar or dstar)"
            ))),
        }
    }
}

/// Parameters a representation was built with. Fields that do not apply to the
/// method are recorded as 0 (`n_sp`/`n_tmp`) or the grid size (`a`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RepParams {
    pub k: usize,
    pub dim: usize,
    pub grid: usize,
    pub n_sp: usize,
    pub n_tmp: usize,
    pub levels: usize,
}

impl RepParams {
    pub fn expected_len(&self, method: Method) -> usize {
        let f = self.k * self.dim;
        match method {
            Method::Lcd => f,
            Method::Dsar => f * self.n_sp,
            Method::Dstar => f * self.n_sp * self.n_tmp,
            Method::Star => f * self.grid * self.grid * PyramidConfig::new(self.levels).segments(),
        }
    }
}

/// Final aggregated, normalized video vector.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoRepresentation {
    pub method: Method,
    pub params: RepParams,
    pub vector: Vec<f64>,
}

impl VideoRepresentation {
    pub fn new(method: Method, params: RepParams, vector: Vec<f64>) -> Result<Self> {
        let expected = params.expected_len(method);
        if vector.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: vector.len(),
            });
        }
        binio::check_finite(vector.iter().copied())?;
        Ok(VideoRepresentation {
            method,
            params,
            vector,
        })
    }

    pub fn norm(&self) -> f64 {
        self.vector.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let p = &self.params;
        let mut w = Writer::with_magic(MAGIC);
        w.u32(self.method.tag());
        w.len(p.k)?.len(p.dim)?.len(p.grid)?.len(p.n_sp)?.len(p.n_tmp)?.len(p.levels)?;
        w.len(self.vector.len())?;
        w.f64s_as_f32(&self.vector);
        Ok(w.into_bytes())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open("VRP1", MAGIC, bytes)?;
        let tag = r.u32()?;
        let method = Method::from_tag(tag).ok_or_else(|| r.malformed(format!("unknown method tag {tag}")))?;
        let params = RepParams {
            k: r.usize()?,
            dim: r.usize()?,
            grid: r.usize()?,
            n_sp: r.usize()?,
            n_tmp: r.usize()?,
            levels: r.usize()?,
        };
        if params.levels >= 31 {
            return Err(r.malformed(format!("pyramid depth {}", params.levels)));
        }
        let len = r.usize()?;
        let vector = r.f32s_as_f64(len, true)?;
        Self::new(method, params, vector)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&binio::read_file(path.as_ref())?)
    }
}

/// Nearest-center index of every descriptor, in storage order.
fn assign_all(grid: &DescriptorGrid, codebook: &Codebook) -> Vec<usize> {
    let per_frame = grid.cells();
    exec::map_range(grid.frames(), |t| {
        (0..per_frame)
            .map(|c| codebook.nearest(grid.descriptor(t, Cell::from_index(c, grid.grid()))).0)
            .collect::<Vec<_>>()
    })
    .into_iter()
    .flatten()
    .collect()
}

/// Single VLAD over all `T·a²` descriptors.
pub fn encode_lcd(grid: &DescriptorGrid, codebook: &Codebook) -> Result<VideoRepresentation> {
    check_compatible(grid, codebook)?;
    let assignment = assign_all(grid, codebook);
    let mut vector = vec![0.0; codebook.k() * codebook.dim()];
    for (x, &k) in grid.descriptors().zip(&assignment) {
        add_residual(&mut vector, codebook, k, x);
    }
    normalize_vlad(&mut vector, codebook.k())?;
    VideoRepresentation::new(
        Method::Lcd,
        RepParams {
            k: codebook.k(),
            dim: codebook.dim(),
            grid: grid.grid(),
            n_sp: 0,
            n_tmp: 0,
            levels: 0,
        },
        vector,
    )
}

/// Normalized VLADs for every `(cell, level, segment)` of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidVlads {
    grid: usize,
    config: PyramidConfig,
    k: usize,
    dim: usize,
    /// `cells × d` vectors; entry `cell_index·d + segment_index`.
    entries: Vec<Vec<f64>>,
}

impl PyramidVlads {
    /// Assembles a full pyramid from loose entries, failing on any gap,
    /// duplicate, or length mismatch.
    pub fn from_entries(
        grid: usize,
        config: PyramidConfig,
        k: usize,
        dim: usize,
        entries: Vec<CellVlad>,
    ) -> Result<Self> {
        let d = config.segments();
        let mut slots: Vec<Option<Vec<f64>>> = vec![None; grid * grid * d];
        for e in entries {
            if e.cell.row >= grid || e.cell.col >= grid || e.level > config.levels || e.segment >= 1 << e.level {
                return Err(Error::invalid(format!(
                    "entry ({:?}, l={}, s={}) outside pyramid",
                    e.cell, e.level, e.segment
                )));
            }
            if e.vector.len() != k * dim {
                return Err(Error::DimensionMismatch {
                    expected: k * dim,
                    got: e.vector.len(),
                });
            }
            let slot = e.cell.index(grid) * d + PyramidConfig::segment_index(e.level, e.segment);
            if slots[slot].replace(e.vector).is_some() {
                return Err(Error::invalid(format!(
                    "duplicate entry ({:?}, l={}, s={})",
                    e.cell, e.level, e.segment
                )));
            }
        }
        let mut out = Vec::with_capacity(slots.len());
        for (i, s) in slots.into_iter().enumerate() {
            let cell = Cell::from_index(i / d, grid);
            let seg = i % d;
            out.push(s.ok_or_else(|| Error::MissingEntry(format!("{cell:?} segment {seg}")))?);
        }
        Ok(PyramidVlads {
            grid,
            config,
            k,
            dim,
            entries: out,
        })
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn cells(&self) -> usize {
        self.grid * self.grid
    }

    pub fn config(&self) -> PyramidConfig {
        self.config
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Length `K·D` of each entry.
    pub fn feature_len(&self) -> usize {
        self.k * self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, cell: Cell, level: usize, segment: usize) -> &[f64] {
        self.entry(cell.index(self.grid), PyramidConfig::segment_index(level, segment))
    }

    /// By flat cell index and flat segment index.
    pub fn entry(&self, cell_index: usize, segment_index: usize) -> &[f64] {
        &self.entries[cell_index * self.config.segments() + segment_index]
    }

    pub fn to_entries(&self) -> Vec<CellVlad> {
        let d = self.config.segments();
        let segs: Vec<(usize, usize)> = self.config.iter().collect();
        self.entries
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let (level, segment) = segs[i % d];
                CellVlad {
                    cell: Cell::from_index(i / d, self.grid),
                    level,
                    segment,
                    vector: v.clone(),
                }
            })
            .collect()
    }

    /// Keeps only level 0, giving the per-cell whole-video VLADs.
    pub fn level_zero(&self) -> PyramidVlads {
        let d = self.config.segments();
        PyramidVlads {
            grid: self.grid,
            config: PyramidConfig::new(0),
            k: self.k,
            dim: self.dim,
            entries: (0..self.cells()).map(|c| self.entries[c * d].clone()).collect(),
        }
    }
}

/// Normalized VLAD for every cell and every pyramid segment.
pub fn encode_pyramid(
    grid: &DescriptorGrid,
    codebook: &Codebook,
    config: PyramidConfig,
) -> Result<PyramidVlads> {
    check_compatible(grid, codebook)?;
    let assignment = assign_all(grid, codebook);
    let bounds: Vec<Vec<Range<usize>>> = (0..=config.levels)
        .map(|l| segment_bounds(grid.frames(), l))
        .collect();
    let cells = grid.cells();
    let flen = codebook.k() * codebook.dim();
    let per_cell = exec::map_range(cells, |c| {
        let cell = Cell::from_index(c, grid.grid());
        let mut out = Vec::with_capacity(config.segments());
        for ranges in &bounds {
            for r in ranges {
                let mut v = vec![0.0; flen];
                for t in r.clone() {
                    add_residual(&mut v, codebook, assignment[t * cells + c], grid.descriptor(t, cell));
                }
                normalize_vlad(&mut v, codebook.k()).expect("length is K*D");
                out.push(v);
            }
        }
        out
    });
    Ok(PyramidVlads {
        grid: grid.grid(),
        config,
        k: codebook.k(),
        dim: codebook.dim(),
        entries: per_cell.into_iter().flatten().collect(),
    })
}
