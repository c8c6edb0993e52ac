//! Binary checkpoint container.
//!
//! Layout: magic `CASECKPT`, format version, scalar byte width, a JSON
//! manifest (model configuration, vocabulary fingerprint, epoch, validation
//! metric — deliberately no timestamps, so identical runs produce identical
//! bytes), then the named parameter tensors in canonical order with
//! little-endian data.

use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CaseError, Result};
use crate::model::{params_from_named, CaseParams, ModelConfig};
use crate::autodiff::tensor::Tensor;
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"CASECKPT";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub dtype: String,
    pub model: ModelConfig,
    /// FNV-1a over the sorted vocabulary, hex; guards against scoring with
    /// the wrong item table.
    pub vocab_hash: String,
    pub vocab_len: usize,
    pub epoch: usize,
    /// Validation metric of this epoch (NaN encodes "not evaluated").
    pub val_metric: Option<f64>,
}

pub fn save<F: Scalar>(
    path: &Path,
    params: &CaseParams<F>,
    vocab_hash: u64,
    epoch: usize,
    val_metric: Option<f64>,
) -> Result<()> {
    let manifest = CheckpointManifest {
        format: "case-checkpoint".into(),
        dtype: F::DTYPE.into(),
        model: params.config.clone(),
        vocab_hash: format!("{vocab_hash:016x}"),
        vocab_len: params.vocab_len,
        epoch,
        val_metric,
    };
    let manifest_bytes = serde_json::to_vec(&manifest)?;
    let named = params.named();

    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&[F::BYTE_WIDTH as u8])?;
    w.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&manifest_bytes)?;
    w.write_all(&(named.len() as u64).to_le_bytes())?;
    let mut buf: Vec<u8> = Vec::new();
    for (name, tensor) in &named {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&[tensor.shape().len() as u8])?;
        for &d in tensor.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        buf.clear();
        buf.reserve(tensor.len() * F::BYTE_WIDTH);
        for &v in tensor.data() {
            v.write_le(&mut buf);
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads only the header and manifest, without touching tensor data. Lets a
/// caller discover the stored dtype and model shape before choosing the
/// scalar type for [`load`].
pub fn peek_manifest(path: &Path) -> Result<CheckpointManifest> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let magic = read_exact(&mut r, 8, "magic")?;
    if magic != MAGIC {
        return Err(CaseError::data(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(read_exact(&mut r, 4, "version")?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(CaseError::data(format!(
            "unsupported checkpoint format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let _width = read_exact(&mut r, 1, "dtype")?;
    let manifest_len = read_u64(&mut r, "manifest length")? as usize;
    Ok(serde_json::from_slice(&read_exact(&mut r, manifest_len, "manifest")?)?)
}

fn read_exact(r: &mut impl Read, n: usize, what: &str) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)
        .map_err(|e| CaseError::data(format!("checkpoint truncated while reading {what}: {e}")))?;
    Ok(buf)
}

fn read_u64(r: &mut impl Read, what: &str) -> Result<u64> {
    let b = read_exact(r, 8, what)?;
    Ok(u64::from_le_bytes(b.try_into().unwrap()))
}

pub fn load<F: Scalar>(path: &Path) -> Result<(CaseParams<F>, CheckpointManifest)> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let magic = read_exact(&mut r, 8, "magic")?;
    if magic != MAGIC {
        return Err(CaseError::data(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(read_exact(&mut r, 4, "version")?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(CaseError::data(format!(
            "unsupported checkpoint format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let width = read_exact(&mut r, 1, "dtype")?[0] as usize;
    if width != F::BYTE_WIDTH {
        return Err(CaseError::data(format!(
            "checkpoint stores {width}-byte scalars but this run uses {}-byte {}",
            F::BYTE_WIDTH,
            F::DTYPE
        )));
    }
    let manifest_len = read_u64(&mut r, "manifest length")? as usize;
    let manifest: CheckpointManifest =
        serde_json::from_slice(&read_exact(&mut r, manifest_len, "manifest")?)?;
    if manifest.dtype != F::DTYPE {
        return Err(CaseError::data(format!(
            "checkpoint dtype {} does not match requested {}",
            manifest.dtype,
            F::DTYPE
        )));
    }

    let n_tensors = read_u64(&mut r, "tensor count")? as usize;
    let mut tensors: HashMap<String, Tensor<F>> = HashMap::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name_len =
            u16::from_le_bytes(read_exact(&mut r, 2, "name length")?.try_into().unwrap()) as usize;
        let name = String::from_utf8(read_exact(&mut r, name_len, "tensor name")?)
            .map_err(|_| CaseError::data("checkpoint tensor name is not UTF-8"))?;
        let rank = read_exact(&mut r, 1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r, "dimension")? as usize);
        }
        let len: usize = shape.iter().product();
        let raw = read_exact(&mut r, len * F::BYTE_WIDTH, &format!("data of `{name}`"))?;
        let data: Vec<F> = raw
            .chunks_exact(F::BYTE_WIDTH)
            .map(|c| F::read_le(c))
            .collect();
        if tensors.insert(name.clone(), Tensor::from_vec(&shape, data)).is_some() {
            return Err(CaseError::data(format!(
                "checkpoint contains parameter `{name}` twice"
            )));
        }
    }
    let mut trailer = [0u8; 1];
    if r.read(&mut trailer)? != 0 {
        return Err(CaseError::data("checkpoint has trailing bytes"));
    }

    let params = params_from_named(manifest.model.clone(), manifest.vocab_len, tensors)?;
    Ok((params, manifest))
}
