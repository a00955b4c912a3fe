//! Binary model checkpoints.
//!
//! All integers and floats are little-endian.
//!
//! | field            | type                    |
//! |------------------|-------------------------|
//! | magic            | 8 bytes, `UMXCKPT1`     |
//! | version          | `u32`, currently 1      |
//! | config length    | `u64`                   |
//! | config           | UTF-8 JSON [`ModelConfig`] |
//! | array count      | `u32`                   |
//! | per array: name length | `u16`             |
//! | per array: name  | UTF-8                   |
//! | per array: rows, cols | `u32`, `u32`       |
//! | per array: data  | `rows·cols` × `f64`, row-major |
//!
//! Arrays are written in [`UniMixerModel::visit_params`] order under their
//! canonical names; the reader matches them by name and checks every shape.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, UniMixerModel};
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 8] = b"UMXCKPT1";
pub const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(model: &UniMixerModel, mut w: W) -> Result<()> {
    let config = serde_json::to_vec(&model.config).map_err(|e| Error::Parse(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(config.len() as u64).to_le_bytes())?;
    w.write_all(&config)?;
    let names = model.param_names();
    let arrays = model.params();
    w.write_all(&(arrays.len() as u32).to_le_bytes())?;
    for ((name, _), m) in names.into_iter().zip(arrays) {
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(m.rows() as u32).to_le_bytes())?;
        w.write_all(&(m.cols() as u32).to_le_bytes())?;
        for v in m.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn take<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| Error::Parse(format!("truncated checkpoint: {e}")))?;
    Ok(buf)
}

fn take_vec<R: Read>(r: &mut R, len: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.take(len as u64).read_to_end(&mut buf)?;
    if buf.len() != len {
        return Err(Error::Parse("truncated checkpoint".into()));
    }
    Ok(buf)
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<UniMixerModel> {
    if &take::<8, _>(&mut r)? != MAGIC {
        return Err(Error::Parse("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(&mut r)?);
    if version != VERSION {
        return Err(Error::Parse(format!("unsupported checkpoint version {version}")));
    }
    let len = u64::from_le_bytes(take(&mut r)?) as usize;
    let config: ModelConfig =
        serde_json::from_slice(&take_vec(&mut r, len)?).map_err(|e| Error::Parse(format!("checkpoint config: {e}")))?;
    let count = u32::from_le_bytes(take(&mut r)?) as usize;
    let mut arrays = HashMap::with_capacity(count);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut r)?) as usize;
        let name = String::from_utf8(take_vec(&mut r, name_len)?)
            .map_err(|_| Error::Parse("array name is not UTF-8".into()))?;
        let rows = u32::from_le_bytes(take(&mut r)?) as usize;
        let cols = u32::from_le_bytes(take(&mut r)?) as usize;
        let bytes = take_vec(&mut r, rows * cols * 8)?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        arrays.insert(name, Matrix::new(rows, cols, data)?);
    }

    let mut model = UniMixerModel::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut problem = None;
    model.visit_params_mut(|name, _, m| {
        if problem.is_some() {
            return;
        }
        match arrays.remove(&name) {
            Some(a) if a.shape() == m.shape() => *m = a,
            Some(a) => {
                problem = Some(format!("array '{name}' is {}x{}, expected {}x{}", a.rows(), a.cols(), m.rows(), m.cols()))
            }
            None => problem = Some(format!("array '{name}' is missing")),
        }
    });
    if let Some(p) = problem {
        return Err(Error::Parse(p));
    }
    if let Some(extra) = arrays.keys().next() {
        return Err(Error::Parse(format!("unexpected array '{extra}'")));
    }
    let tau = model.config.constraint.tau;
    model.set_tau(tau);
    Ok(model)
}

pub fn save(model: &UniMixerModel, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_checkpoint(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<UniMixerModel> {
    read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
}
