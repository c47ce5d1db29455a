//! `RFM1` matrix files.
//!
//! Layout (little-endian): magic `RFM1`, `rows: u64`, `cols: u64`, then
//! `rows × cols` IEEE-754 `f32` values in row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::DenseMatrix;

pub const MATRIX_MAGIC: &[u8; 4] = b"RFM1";

// Guards the allocation in `read_matrix` against absurd headers.
const MAX_ELEMENTS: u64 = 1 << 32;

pub fn write_matrix<W: Write>(out: &mut W, m: &DenseMatrix) -> Result<()> {
    out.write_all(MATRIX_MAGIC)?;
    out.write_all(&(m.rows() as u64).to_le_bytes())?;
    out.write_all(&(m.cols() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(m.data().len() * 4);
    for v in m.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_matrix<R: Read>(input: &mut R) -> Result<DenseMatrix> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MATRIX_MAGIC {
        return Err(Error::Format {
            kind: "RFM1",
            reason: format!("bad magic {magic:?}"),
        });
    }
    let rows = read_u64(input)?;
    let cols = read_u64(input)?;
    let n = rows
        .checked_mul(cols)
        .filter(|&n| n <= MAX_ELEMENTS)
        .ok_or_else(|| Error::Format {
            kind: "RFM1",
            reason: format!("implausible dimensions {rows}x{cols}"),
        })?;
    let mut bytes = vec![0u8; n as usize * 4];
    input.read_exact(&mut bytes).map_err(truncated)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    DenseMatrix::new(rows as usize, cols as usize, data)
}

pub fn save_matrix(path: impl AsRef<Path>, m: &DenseMatrix) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_matrix(&mut w, m)?;
    w.flush()?;
    Ok(())
}

pub fn load_matrix(path: impl AsRef<Path>) -> Result<DenseMatrix> {
    read_matrix(&mut BufReader::new(File::open(path)?))
}

pub(crate) fn read_u64<R: Read>(input: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    input.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format {
            kind: "RFM1",
            reason: "truncated file".into(),
        }
    } else {
        Error::Io(e)
    }
}
