//! Binary field dump: one JSON header line `{nx, ny, nz, name, time}`
//! followed by row-major little-endian f64 samples. Reader and writer
//! round-trip bit-exactly. 2D fields are stored with `nz = 1`.

use super::{GridSpec, ScalarField2D, ScalarField3D};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DumpHeader {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub name: String,
    pub time: f64,
}

fn write_raw(path: &Path, header: &DumpHeader, values: &[f64]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, header)?;
    w.write_all(b"\n")?;
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_raw(path: &Path) -> Result<(DumpHeader, Vec<f64>)> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let mut line = String::new();
    r.read_line(&mut line)?;
    let header: DumpHeader = serde_json::from_str(line.trim_end())?;
    let n = header.nx * header.ny * header.nz;
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)?;
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, values))
}

pub fn write_field3(path: &Path, name: &str, time: f64, f: &ScalarField3D) -> Result<()> {
    let g = f.grid;
    let header = DumpHeader {
        nx: g.nx,
        ny: g.ny,
        nz: g.nz,
        name: name.to_string(),
        time,
    };
    write_raw(path, &header, f.values())
}

pub fn read_field3(path: &Path) -> Result<(DumpHeader, ScalarField3D)> {
    let (header, values) = read_raw(path)?;
    let grid = GridSpec::new(header.nx, header.ny, header.nz)?;
    Ok((header.clone(), ScalarField3D::from_values(grid, values)))
}

pub fn write_field2(path: &Path, name: &str, time: f64, f: &ScalarField2D) -> Result<()> {
    let g = f.grid;
    let header = DumpHeader {
        nx: g.nx,
        ny: g.ny,
        nz: 1,
        name: name.to_string(),
        time,
    };
    write_raw(path, &header, f.values())
}

/// Reads a 2D dump. `grid` supplies the vertical resolution the values are
/// re-attached to (the dump itself stores `nz = 1`).
pub fn read_field2(path: &Path, grid: GridSpec) -> Result<(DumpHeader, ScalarField2D)> {
    let (header, values) = read_raw(path)?;
    if header.nz != 1 {
        return Err(Error::InvalidConfig(format!(
            "expected a 2D dump (nz = 1), found nz = {}",
            header.nz
        )));
    }
    if header.nx != grid.nx || header.ny != grid.ny {
        return Err(Error::InvalidConfig(format!(
            "dump is {}x{}, grid is {}x{}",
            header.nx, header.ny, grid.nx, grid.ny
        )));
    }
    Ok((header.clone(), ScalarField2D::from_values(grid, values)))
}
