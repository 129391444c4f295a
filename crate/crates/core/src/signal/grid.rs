//! Row-major `f32` grids plus their on-disk forms: the `SPEC` binary file
//! and 8-bit PGM previews.
//!
//! `SPEC` layout (little-endian): `"SPEC" | version u32 | rows u32 | cols u32 |
//! frame_shift f64 | rows*cols f32`.

use std::path::Path;

use crate::error::{Error, Result};

pub const GRID_MAGIC: &[u8; 4] = b"SPEC";
pub const GRID_VERSION: u32 = 1;

/// Time-major matrix: one row per frame (or step), one column per bin (or key).
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Grid {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        assert_eq!(rows * cols, data.len(), "grid data length");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn filled(rows: usize, cols: usize, v: f32) -> Self {
        Self::new(rows, cols, vec![v; rows * cols])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Copy of rows `start..start+len`.
    pub fn sub_rows(&self, start: usize, len: usize) -> Grid {
        assert!(start + len <= self.rows, "sub_rows out of range");
        Grid::new(
            len,
            self.cols,
            self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        )
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn vstack(&self, other: &Grid) -> Grid {
        assert_eq!(self.cols, other.cols, "vstack width");
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Grid::new(self.rows + other.rows, self.cols, data)
    }

    /// Index of the largest entry in row `r` (first on ties).
    pub fn argmax_row(&self, r: usize) -> usize {
        let row = self.row(r);
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        best
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn mse(&self, other: &Grid) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
            .sum::<f64>()
            / self.data.len().max(1) as f64
    }

    pub fn to_spec_bytes(&self, frame_shift_s: f64) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + 4 * self.data.len());
        out.extend_from_slice(GRID_MAGIC);
        out.extend_from_slice(&GRID_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.cols as u32).to_le_bytes());
        out.extend_from_slice(&frame_shift_s.to_le_bytes());
        for &x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    /// Parses a `SPEC` file, returning the grid and its frame shift.
    pub fn from_spec_bytes(bytes: &[u8]) -> Result<(Grid, f64)> {
        let err = |offset: usize, msg: &str| Error::Grid {
            offset,
            msg: msg.to_string(),
        };
        if bytes.len() < 24 {
            return Err(err(bytes.len(), "truncated header"));
        }
        if &bytes[0..4] != GRID_MAGIC {
            return Err(err(0, "bad magic"));
        }
        let u32_at = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
        let version = u32_at(4);
        if version != GRID_VERSION {
            return Err(err(4, &format!("unsupported version {version}")));
        }
        let rows = u32_at(8) as usize;
        let cols = u32_at(12) as usize;
        let mut fs = [0u8; 8];
        fs.copy_from_slice(&bytes[16..24]);
        let frame_shift = f64::from_le_bytes(fs);
        let want = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| err(8, "dimensions overflow"))?;
        if bytes.len() - 24 != want {
            return Err(err(24, &format!("payload is {} bytes, expected {want}", bytes.len() - 24)));
        }
        let data = bytes[24..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok((Grid::new(rows, cols, data), frame_shift))
    }

    pub fn save_spec(&self, path: &Path, frame_shift_s: f64) -> Result<()> {
        std::fs::write(path, self.to_spec_bytes(frame_shift_s)).map_err(|e| Error::io(path, e))
    }

    pub fn load_spec(path: &Path) -> Result<(Grid, f64)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_spec_bytes(&bytes)
    }

    /// Binary PGM (P5) with time on the x axis and bin 0 at the bottom.
    /// Values in `[lo, hi]` map linearly to `0..=255`.
    pub fn to_pgm(&self, lo: f32, hi: f32) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.rows, self.cols).into_bytes();
        let span = (hi - lo).max(f32::EPSILON);
        for c in (0..self.cols).rev() {
            for r in 0..self.rows {
                let v = ((self.get(r, c) - lo) / span).clamp(0.0, 1.0);
                out.push((v * 255.0).round() as u8);
            }
        }
        out
    }

    pub fn save_pgm(&self, path: &Path, lo: f32, hi: f32) -> Result<()> {
        std::fs::write(path, self.to_pgm(lo, hi)).map_err(|e| Error::io(path, e))
    }
}
