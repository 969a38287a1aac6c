//! Model checkpoints. Little-endian layout:
//!
//! ```text
//! magic "CSIW" | u32 version | u64 config digest | u32 entry count
//! per entry: u32 name_len | name bytes | u32 rank | u32 dims[rank] | f64 data
//! ```
//!
//! Entries appear in lexicographic name order (the parameter set's
//! iteration order), covering trainable parameters and batchnorm
//! running statistics. Loading validates the digest against the target
//! model configuration.

use std::io::{Read, Write};
use std::path::Path;

use crate::csinet::{CsiNet, ModelConfig};
use crate::error::{Error, Result};
use crate::tensorkit::{ParameterSet, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CSIW";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, model: &CsiNet) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&model.cfg.digest().to_le_bytes())?;
    out.write_all(&(model.params.len() as u32).to_le_bytes())?;
    for (name, t) in model.params.iter() {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Loads a checkpoint into a freshly shaped model of configuration
/// `cfg`; the stored digest must match.
pub fn load_checkpoint(path: &Path, cfg: &ModelConfig) -> Result<CsiNet> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut data = Vec::new();
    file.read_to_end(&mut data)?;
    if data.len() < 20 || &data[0..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!(
            "{} is not a checkpoint file",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(data[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let digest = u64::from_le_bytes(data[8..16].try_into().unwrap());
    if digest != cfg.digest() {
        return Err(Error::Format(format!(
            "checkpoint {} was trained with a different model configuration \
             (digest {digest:#x} vs expected {:#x})",
            path.display(),
            cfg.digest()
        )));
    }
    let count = u32::from_le_bytes(data[16..20].try_into().unwrap()) as usize;
    let mut off = 20usize;
    let mut params = ParameterSet::new();
    for _ in 0..count {
        let need = |off: usize, n: usize| -> Result<()> {
            if off + n > data.len() {
                return Err(Error::Format(format!(
                    "checkpoint {} truncated at byte {off}",
                    path.display()
                )));
            }
            Ok(())
        };
        need(off, 4)?;
        let name_len = u32::from_le_bytes(data[off..off + 4].try_into().unwrap()) as usize;
        off += 4;
        need(off, name_len)?;
        let name = std::str::from_utf8(&data[off..off + name_len])
            .map_err(|_| Error::Format("checkpoint entry name is not UTF-8".into()))?
            .to_string();
        off += name_len;
        need(off, 4)?;
        let rank = u32::from_le_bytes(data[off..off + 4].try_into().unwrap()) as usize;
        off += 4;
        need(off, 4 * rank)?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(data[off..off + 4].try_into().unwrap()) as usize);
            off += 4;
        }
        let numel: usize = shape.iter().product();
        need(off, 8 * numel)?;
        let mut vals = Vec::with_capacity(numel);
        for _ in 0..numel {
            vals.push(f64::from_le_bytes(data[off..off + 8].try_into().unwrap()));
            off += 8;
        }
        let mut t = Tensor::from_vec(&shape, vals)?;
        if !name.contains(".bn.running_") {
            t = t.with_grad();
        }
        if params.contains(&name) {
            return Err(Error::Format(format!("duplicate checkpoint entry {name}")));
        }
        params.insert(&name, t);
    }
    if off != data.len() {
        return Err(Error::Format(format!(
            "checkpoint {} has {} trailing bytes",
            path.display(),
            data.len() - off
        )));
    }
    // Shape-check against a freshly initialized model.
    let reference = CsiNet::new(cfg.clone(), 0)?;
    if reference.params.len() != params.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} entries, model needs {}",
            params.len(),
            reference.params.len()
        )));
    }
    for (name, t) in reference.params.iter() {
        if !params.contains(name) {
            return Err(Error::Format(format!("checkpoint missing parameter {name}")));
        }
        if params.get(name).shape() != t.shape() {
            return Err(Error::Format(format!(
                "checkpoint parameter {name} has shape {:?}, expected {:?}",
                params.get(name).shape(),
                t.shape()
            )));
        }
    }
    Ok(CsiNet {
        cfg: cfg.clone(),
        params,
    })
}
