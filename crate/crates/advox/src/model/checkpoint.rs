//! Binary checkpoint format shared by every trainable model.
//!
//! Layout (little endian): magic `AVCP`, format version, architecture
//! kind string, config JSON, a SHA-256 of kind plus JSON, then named f32
//! tensors. Loaders verify the stored hash against the stored JSON and
//! callers verify it against the configuration they expect to run.

use crate::{AdvoxError, Result};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};
use sha2::{Digest, Sha256};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"AVCP";
const VERSION: u32 = 1;

/// Hash binding a checkpoint to its producing configuration.
pub fn config_hash(arch_kind: &str, config_json: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(arch_kind.as_bytes());
    h.update([0u8]);
    h.update(config_json.as_bytes());
    h.finalize().into()
}

pub struct Checkpoint {
    pub arch_kind: String,
    pub config_json: String,
    pub hash: [u8; 32],
    pub tensors: Vec<(String, ArrayD<f32>)>,
}

pub fn save_checkpoint(
    path: &Path,
    arch_kind: &str,
    config_json: &str,
    tensors: &[(String, ArrayD<f32>)],
) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u32::<LittleEndian>(arch_kind.len() as u32)?;
    w.write_all(arch_kind.as_bytes())?;
    w.write_u32::<LittleEndian>(config_json.len() as u32)?;
    w.write_all(config_json.as_bytes())?;
    w.write_all(&config_hash(arch_kind, config_json))?;
    w.write_u32::<LittleEndian>(tensors.len() as u32)?;
    for (name, t) in tensors {
        w.write_u16::<LittleEndian>(name.len() as u16)?;
        w.write_all(name.as_bytes())?;
        w.write_u8(t.ndim() as u8)?;
        for &d in t.shape() {
            w.write_u64::<LittleEndian>(d as u64)?;
        }
        let flat = t.as_standard_layout();
        for &v in flat.iter() {
            w.write_f32::<LittleEndian>(v)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(AdvoxError::Checkpoint(format!(
            "{}: not a checkpoint file",
            path.display()
        )));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(AdvoxError::Checkpoint(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    let read_string = |r: &mut BufReader<std::fs::File>, len: usize| -> Result<String> {
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf)?;
        String::from_utf8(buf)
            .map_err(|e| AdvoxError::Checkpoint(format!("bad utf8 in checkpoint: {e}")))
    };
    let kind_len = r.read_u32::<LittleEndian>()? as usize;
    let arch_kind = read_string(&mut r, kind_len)?;
    let json_len = r.read_u32::<LittleEndian>()? as usize;
    let config_json = read_string(&mut r, json_len)?;
    let mut hash = [0u8; 32];
    r.read_exact(&mut hash)?;
    if hash != config_hash(&arch_kind, &config_json) {
        return Err(AdvoxError::Checkpoint(format!(
            "{}: stored hash does not match stored config",
            path.display()
        )));
    }
    let n = r.read_u32::<LittleEndian>()? as usize;
    let mut tensors = Vec::with_capacity(n);
    for _ in 0..n {
        let name_len = r.read_u16::<LittleEndian>()? as usize;
        let name = read_string(&mut r, name_len)?;
        let ndim = r.read_u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.read_u64::<LittleEndian>()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = vec![0f32; numel];
        for v in data.iter_mut() {
            *v = r.read_f32::<LittleEndian>()?;
        }
        tensors.push((name, ArrayD::from_shape_vec(IxDyn(&shape), data).unwrap()));
    }
    Ok(Checkpoint { arch_kind, config_json, hash, tensors })
}

/// Loader guard: reject a checkpoint whose configuration differs from
/// the one the caller is about to use it with.
pub fn expect_hash(ck: &Checkpoint, arch_kind: &str, config_json: &str, path: &Path) -> Result<()> {
    if ck.arch_kind != arch_kind {
        return Err(AdvoxError::Checkpoint(format!(
            "{}: checkpoint holds a '{}' model, expected '{}'",
            path.display(),
            ck.arch_kind,
            arch_kind
        )));
    }
    let expected = config_hash(arch_kind, config_json);
    if ck.hash != expected {
        return Err(AdvoxError::Checkpoint(format!(
            "{}: config hash mismatch; the checkpoint was produced by a different configuration",
            path.display()
        )));
    }
    Ok(())
}
