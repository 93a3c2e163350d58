//! Model checkpoints.
//!
//! Layout (little-endian): magic `MDSM`, version `u32`, metadata length
//! `u32` and JSON metadata, tensor count `u32`, then per tensor the name
//! length `u32`, UTF-8 name, rank `u32`, dims `u32` each and row-major
//! `f32` data.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TinyMdlm};
use crate::mop::EmbedMode;
use crate::seq::VocabSpec;
use crate::tensor::{ParamSet, Tensor};
use crate::tokenizer::{read_f32, read_u32, Codebooks};

pub const MAGIC: &[u8; 4] = b"MDSM";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub vocab: VocabSpec,
    pub embed_mode: EmbedMode,
    pub n_codes: usize,
    pub code_dim: usize,
}

impl CheckpointMeta {
    pub fn of(model: &TinyMdlm) -> Self {
        CheckpointMeta {
            model: model.config,
            vocab: model.vocab,
            embed_mode: model.embed_mode,
            n_codes: model.mop.n_codes,
            code_dim: model.code_dim,
        }
    }
}

fn put_u32(w: &mut impl Write, x: usize) -> Result<()> {
    let x = u32::try_from(x).map_err(|_| Error::Format(format!("{x} does not fit in u32")))?;
    w.write_all(&x.to_le_bytes())?;
    Ok(())
}

pub fn write_checkpoint(w: &mut impl Write, meta: &CheckpointMeta, params: &ParamSet) -> Result<()> {
    w.write_all(MAGIC)?;
    put_u32(w, VERSION as usize)?;
    let json = serde_json::to_vec(meta)?;
    put_u32(w, json.len())?;
    w.write_all(&json)?;
    put_u32(w, params.len())?;
    for t in params.tensors() {
        put_u32(w, t.name.len())?;
        w.write_all(t.name.as_bytes())?;
        put_u32(w, t.shape.len())?;
        for &d in &t.shape {
            put_u32(w, d)?;
        }
        for &x in &t.data {
            w.write_all(&(x as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<(CheckpointMeta, ParamSet)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a model checkpoint".into()));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let n = read_u32(r)? as usize;
    let mut json = vec![0u8; n];
    r.read_exact(&mut json)?;
    let meta: CheckpointMeta = serde_json::from_slice(&json)?;
    let count = read_u32(r)? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = read_u32(r)? as usize;
        let shape: Vec<usize> = (0..rank).map(|_| read_u32(r).map(|d| d as usize)).collect::<Result<_>>()?;
        let size: usize = shape.iter().product();
        let data: Vec<f64> = (0..size).map(|_| read_f32(r).map(f64::from)).collect::<Result<_>>()?;
        tensors.push(Tensor { name, shape, data });
    }
    Ok((meta, ParamSet::from_tensors(tensors)))
}

pub fn save_model(path: &Path, model: &TinyMdlm) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(&mut w, &CheckpointMeta::of(model), &model.params)?;
    w.flush()?;
    Ok(())
}

/// Rebuild a model from a checkpoint; `books` must match its code sizes.
pub fn load_model(path: &Path, books: &Codebooks) -> Result<TinyMdlm> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let (meta, params) = read_checkpoint(&mut r)?;
    if meta.n_codes != books.n_codes() || meta.code_dim != books.code_dim() {
        return Err(Error::Config("checkpoint does not match the codebooks".into()));
    }
    let mut model = TinyMdlm::new(meta.model, meta.vocab, books, 0)?;
    model.load_params(params)?;
    model.embed_mode = meta.embed_mode;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::{tiny_books, tiny_model};

    #[test]
    fn round_trip_is_stable() {
        let model = tiny_model(false, 1);
        let mut a = Vec::new();
        write_checkpoint(&mut a, &CheckpointMeta::of(&model), &model.params).unwrap();
        let (meta, params) = read_checkpoint(&mut a.as_slice()).unwrap();
        assert_eq!(meta, CheckpointMeta::of(&model));
        for (x, y) in params.tensors().iter().zip(model.params.tensors()) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.shape, y.shape);
            for (u, v) in x.data.iter().zip(&y.data) {
                assert_eq!(*u, *v as f32 as f64);
            }
        }
        // second pass is byte-identical
        let mut b = Vec::new();
        write_checkpoint(&mut b, &meta, &params).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn load_checks_shapes_and_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = tiny_model(true, 2);
        save_model(&path, &model).unwrap();
        let back = load_model(&path, &tiny_books()).unwrap();
        assert!(back.config.causal);
        assert!(read_checkpoint(&mut &b"MDSC\x01\0\0\0"[..]).is_err());
        let mut other = tiny_model(false, 0);
        let wrong = ParamSet::from_tensors(vec![Tensor::zeros("x", &[2])]);
        assert!(other.load_params(wrong).is_err());
    }
}
