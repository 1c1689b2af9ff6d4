//! Per-video descriptor tensors and the `DGT1` file format.
//!
//! Layout: magic `DGT1`, then `version`, `T`, `a`, `D` as little-endian `u32`,
//! then `T·a²·D` little-endian `f32` values in `[t][i][j][k]` row-major order.

use std::path::Path;

use crate::binio::{self, Reader, Writer};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"DGT1";

/// A spatial cell of the `a × a` grid, zero-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
}

impl Cell {
    pub fn new(row: usize, col: usize) -> Self {
        Cell { row, col }
    }

    /// Row-major index, matching the `(1,1), (1,2), …, (a,a)` column order of
    /// the spatial view matrix.
    pub fn index(self, grid: usize) -> usize {
        self.row * grid + self.col
    }

    pub fn from_index(index: usize, grid: usize) -> Self {
        Cell {
            row: index / grid,
            col: index % grid,
        }
    }
}

/// Frame descriptors of one video, indexed `(frame, row, col, dim)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorGrid {
    frames: usize,
    grid: usize,
    dim: usize,
    data: Vec<f32>,
}

impl DescriptorGrid {
    pub fn new(frames: usize, grid: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if frames == 0 || grid == 0 || dim == 0 {
            return Err(Error::invalid(format!(
                "grid dimensions must be positive, got T={frames} a={grid} D={dim}"
            )));
        }
        let expected = frames * grid * grid * dim;
        if data.len() != expected {
            return Err(Error::PayloadMismatch {
                expected,
                found: data.len(),
            });
        }
        binio::check_finite(data.iter().map(|&v| f64::from(v)))?;
        Ok(DescriptorGrid {
            frames,
            grid,
            dim,
            data,
        })
    }

    pub fn zeros(frames: usize, grid: usize, dim: usize) -> Result<Self> {
        Self::new(frames, grid, dim, vec![0.0; frames * grid * grid * dim])
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Side length `a` of the spatial grid.
    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cells(&self) -> usize {
        self.grid * self.grid
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn descriptor(&self, frame: usize, cell: Cell) -> &[f32] {
        let start = (frame * self.cells() + cell.index(self.grid)) * self.dim;
        &self.data[start..start + self.dim]
    }

    /// All `T·a²` descriptors in storage order.
    pub fn descriptors(&self) -> impl ExactSizeIterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::with_magic(MAGIC);
        w.len(self.frames)?.len(self.grid)?.len(self.dim)?;
        w.f32s(&self.data);
        Ok(w.into_bytes())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open("DGT1", MAGIC, bytes)?;
        let frames = r.usize()?;
        let grid = r.usize()?;
        let dim = r.usize()?;
        if frames == 0 || grid == 0 || dim == 0 {
            return Err(r.malformed(format!("zero dimension T={frames} a={grid} D={dim}")));
        }
        let count = frames
            .checked_mul(grid * grid)
            .and_then(|n| n.checked_mul(dim))
            .ok_or_else(|| r.malformed("dimension overflow"))?;
        let data = r.f32s(count, true)?;
        Self::new(frames, grid, dim, data)
    }
}

pub fn read_dgt(path: impl AsRef<Path>) -> Result<DescriptorGrid> {
    let path = path.as_ref();
    DescriptorGrid::from_bytes(&binio::read_file(path)?)
}

pub fn write_dgt(grid: &DescriptorGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, grid.to_bytes()?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn shape_round_trip() {
        let data: Vec<f32> = (0..24).map(|v| v as f32).collect();
        let g = DescriptorGrid::new(2, 2, 3, data).unwrap();
        let back = DescriptorGrid::from_bytes(&g.to_bytes().unwrap()).unwrap();
        assert_eq!((back.frames(), back.grid(), back.grid(), back.dim()), (2, 2, 2, 3));
        assert_eq!(back.descriptor(1, Cell::new(1, 0)), &[18.0, 19.0, 20.0]);
    }

    #[test]
    fn short_payload_is_rejected() {
        let g = DescriptorGrid::new(2, 2, 3, vec![1.0; 24]).unwrap();
        let mut bytes = g.to_bytes().unwrap();
        bytes.truncate(bytes.len() - 4);
        let err = DescriptorGrid::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("payload mismatch"), "{err}");
    }

    #[test]
    fn long_payload_is_rejected() {
        let g = DescriptorGrid::new(1, 1, 1, vec![1.0]).unwrap();
        let mut bytes = g.to_bytes().unwrap();
        bytes.extend_from_slice(&0f32.to_le_bytes());
        assert!(matches!(
            DescriptorGrid::from_bytes(&bytes),
            Err(Error::PayloadMismatch { .. })
        ));
    }

    #[test]
    fn bad_magic_and_non_finite() {
        assert!(matches!(
            DescriptorGrid::from_bytes(b"DGT0\x01\0\0\0"),
            Err(Error::MalformedHeader { .. })
        ));
        let g = DescriptorGrid::new(1, 1, 2, vec![0.0, 1.0]).unwrap();
        let mut bytes = g.to_bytes().unwrap();
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            DescriptorGrid::from_bytes(&bytes),
            Err(Error::NonFinite { index: 1 })
        ));
    }

    #[test]
    fn zero_grid_has_single_zero_float() {
        let g = DescriptorGrid::zeros(1, 1, 1).unwrap();
        let bytes = g.to_bytes().unwrap();
        assert_eq!(bytes.len(), 20 + 4);
        assert_eq!(&bytes[20..], &0f32.to_le_bytes());
    }

    #[test]
    fn header_records_vgg_pool5_shape() {
        let g = DescriptorGrid::zeros(1, 7, 512).unwrap();
        let bytes = g.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"DGT1");
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        assert_eq!((word(4), word(8), word(12), word(16)), (1, 1, 7, 512));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.dgt");
        let g = DescriptorGrid::new(3, 2, 2, (0..24).map(|v| v as f32 * 0.5).collect()).unwrap();
        write_dgt(&g, &path).unwrap();
        assert_eq!(read_dgt(&path).unwrap(), g);
        assert!(matches!(read_dgt(dir.path().join("missing.dgt")), Err(Error::Io { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn bitwise_round_trip(
            (t, a, d, data) in (1usize..4, 1usize..4, 1usize..5).prop_flat_map(|(t, a, d)| {
                (Just(t), Just(a), Just(d),
                 proptest::collection::vec(-1e6f32..1e6f32, t * a * a * d))
            })
        ) {
            let g = DescriptorGrid::new(t, a, d, data).unwrap();
            let back = DescriptorGrid::from_bytes(&g.to_bytes().unwrap()).unwrap();
            let bits = |g: &DescriptorGrid| g.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&g), bits(&back));
            prop_assert_eq!((g.frames(), g.grid(), g.dim()), (back.frames(), back.grid(), back.dim()));
        }
    }
}
