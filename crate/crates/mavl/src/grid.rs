//! Portable float grid files.
//!
//! A grid file is a text header followed by raw little-endian sample data:
//!
//! ```text
//! MAVLGRID 1
//! <rows> <cols> <dtype>
//! <rows * cols little-endian values>
//! ```
//!
//! `dtype` is one of `f32`, `f64`, or `u8`. Images and heatmaps are stored
//! as `f32`, masks as `u8`; everything is promoted to `f64` on load.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use thiserror::Error;

pub const GRID_MAGIC: &str = "MAVLGRID 1";

#[derive(Debug, Error)]
pub enum GridError {
    #[error("i/o error reading grid: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad grid header: {0}")]
    Header(String),
    #[error("grid payload truncated: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridDtype {
    F32,
    F64,
    U8,
}

impl GridDtype {
    fn token(self) -> &'static str {
        match self {
            GridDtype::F32 => "f32",
            GridDtype::F64 => "f64",
            GridDtype::U8 => "u8",
        }
    }

    fn parse(s: &str) -> Result<Self, GridError> {
        match s {
            "f32" => Ok(GridDtype::F32),
            "f64" => Ok(GridDtype::F64),
            "u8" => Ok(GridDtype::U8),
            other => Err(GridError::Header(format!("unknown dtype {other:?}"))),
        }
    }

    fn width(self) -> usize {
        match self {
            GridDtype::F32 => 4,
            GridDtype::F64 => 8,
            GridDtype::U8 => 1,
        }
    }
}

pub fn write_grid(path: &Path, data: &Array2<f64>, dtype: GridDtype) -> Result<(), GridError> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "{GRID_MAGIC}\n{} {} {}\n", data.nrows(), data.ncols(), dtype.token())?;
    for &v in data.iter() {
        match dtype {
            GridDtype::F32 => w.write_all(&(v as f32).to_le_bytes())?,
            GridDtype::F64 => w.write_all(&v.to_le_bytes())?,
            GridDtype::U8 => w.write_all(&[v as u8])?,
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_grid(path: &Path) -> Result<Array2<f64>, GridError> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = read_line(&mut r)?;
    if magic != GRID_MAGIC {
        return Err(GridError::Header(format!("bad magic {magic:?}")));
    }
    let dims = read_line(&mut r)?;
    let mut it = dims.split_whitespace();
    let rows: usize = it
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| GridError::Header(format!("bad dims line {dims:?}")))?;
    let cols: usize = it
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| GridError::Header(format!("bad dims line {dims:?}")))?;
    let dtype = GridDtype::parse(
        it.next()
            .ok_or_else(|| GridError::Header(format!("bad dims line {dims:?}")))?,
    )?;

    let expected = rows * cols * dtype.width();
    let mut buf = Vec::with_capacity(expected);
    r.read_to_end(&mut buf)?;
    if buf.len() != expected {
        return Err(GridError::Truncated { expected, got: buf.len() });
    }

    let mut values = Vec::with_capacity(rows * cols);
    match dtype {
        GridDtype::F32 => {
            for c in buf.chunks_exact(4) {
                values.push(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
            }
        }
        GridDtype::F64 => {
            for c in buf.chunks_exact(8) {
                values.push(f64::from_le_bytes([
                    c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7],
                ]));
            }
        }
        GridDtype::U8 => values.extend(buf.iter().map(|&b| b as f64)),
    }
    Ok(Array2::from_shape_vec((rows, cols), values).expect("shape checked above"))
}

fn read_line<R: Read>(r: &mut R) -> Result<String, GridError> {
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        let n = r.read(&mut byte)?;
        if n == 0 {
            return Err(GridError::Header("unexpected end of header".into()));
        }
        if byte[0] == b'\n' {
            break;
        }
        line.push(byte[0]);
        if line.len() > 128 {
            return Err(GridError::Header("header line too long".into()));
        }
    }
    String::from_utf8(line).map_err(|_| GridError::Header("header not utf-8".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.grid");
        std::fs::write(&path, b"NOTAGRID 1\n2 2 f32\n0000000000000000").unwrap();
        assert!(matches!(read_grid(&path), Err(GridError::Header(_))));
    }

    #[test]
    fn rejects_truncated_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.grid");
        std::fs::write(&path, b"MAVLGRID 1\n2 2 f32\n\x00\x00").unwrap();
        assert!(matches!(read_grid(&path), Err(GridError::Truncated { .. })));
    }

    proptest! {
        #[test]
        fn f64_round_trip(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("rt.grid");
            let vals: Vec<f64> = (0..rows * cols)
                .map(|i| ((seed.wrapping_add(i as u64) % 1000) as f64) / 7.0 - 50.0)
                .collect();
            let a = Array2::from_shape_vec((rows, cols), vals).unwrap();
            write_grid(&path, &a, GridDtype::F64).unwrap();
            let b = read_grid(&path).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn u8_round_trip(rows in 1usize..5, cols in 1usize..5) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("rt8.grid");
            let vals: Vec<f64> = (0..rows * cols).map(|i| (i % 2) as f64).collect();
            let a = Array2::from_shape_vec((rows, cols), vals).unwrap();
            write_grid(&path, &a, GridDtype::U8).unwrap();
            prop_assert_eq!(read_grid(&path).unwrap(), a);
        }
    }
}
