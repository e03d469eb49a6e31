//! Middlebury `.flo` flow-field serialization.
//!
//! Layout: the 4-byte magic float `202021.25`, `i32` width, `i32` height,
//! then row-major interleaved `f32` `(u, v)` pairs.

use super::FlowField;
use crate::error::{Error, Result};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array3;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

const MAGIC: f32 = 202021.25;

pub fn write_flo(path: impl AsRef<Path>, flow: &FlowField) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    let (h, w) = flow.resolution();
    f.write_f32::<LittleEndian>(MAGIC)?;
    f.write_i32::<LittleEndian>(w as i32)?;
    f.write_i32::<LittleEndian>(h as i32)?;
    let d = flow.data();
    for r in 0..h {
        for c in 0..w {
            f.write_f32::<LittleEndian>(d[(0, r, c)] as f32)?;
            f.write_f32::<LittleEndian>(d[(1, r, c)] as f32)?;
        }
    }
    Ok(())
}

pub fn read_flo(path: impl AsRef<Path>) -> Result<FlowField> {
    let mut f = BufReader::new(File::open(path)?);
    let magic = f.read_f32::<LittleEndian>()?;
    if magic != MAGIC {
        return Err(Error::parse(format!(
            "bad .flo magic {magic}, expected {MAGIC}"
        )));
    }
    let w = f.read_i32::<LittleEndian>()?;
    let h = f.read_i32::<LittleEndian>()?;
    if w < 1 || h < 1 || w > 1 << 20 || h > 1 << 20 {
        return Err(Error::parse(format!(".flo dimensions out of range: {w} x {h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let mut data = Array3::<f64>::zeros((2, h, w));
    for r in 0..h {
        for c in 0..w {
            data[(0, r, c)] = f.read_f32::<LittleEndian>()? as f64;
            data[(1, r, c)] = f.read_f32::<LittleEndian>()? as f64;
        }
    }
    FlowField::new(data)
}
