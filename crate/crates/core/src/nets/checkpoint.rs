//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "CRGCKPT\0"
//! version    u32      currently 1
//! cfg_len    u32      byte length of the config record
//! cfg        cfg_len  UTF-8 JSON: {"kind": "seg"|"autoencoder"|"discriminator", "config": {...}}
//! n_arrays   u32
//! n_arrays × {
//!   name_len u32, name (UTF-8),
//!   rank u32, rank × u64 extents,
//!   product(extents) × f64
//! }
//! ```
//!
//! Arrays appear in parameter declaration order, followed for the segmenter
//! by the running batch-norm moments (`<layer>.running_mean`,
//! `<layer>.running_var`).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AutoEncoder, AutoEncoderConfig, Discriminator, DiscriminatorConfig, ParamStore, SegNet, SegNetConfig};
use crate::autodiff::{BnState, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CRGCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Any of the three networks, as stored in a checkpoint.
#[derive(Clone, Debug)]
pub enum Network {
    Seg(SegNet),
    AutoEncoder(AutoEncoder),
    Discriminator(Discriminator),
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", content = "config", rename_all = "lowercase")]
enum ConfigRecord {
    Seg(SegNetConfig),
    AutoEncoder(AutoEncoderConfig),
    Discriminator(DiscriminatorConfig),
}

impl Network {
    pub fn kind(&self) -> &'static str {
        match self {
            Network::Seg(_) => "seg",
            Network::AutoEncoder(_) => "autoencoder",
            Network::Discriminator(_) => "discriminator",
        }
    }
}

pub fn write_checkpoint<W: Write>(mut w: W, net: &Network) -> std::io::Result<()> {
    let (record, params, bn): (ConfigRecord, &ParamStore, &[BnState]) = match net {
        Network::Seg(n) => (ConfigRecord::Seg(n.config().clone()), n.params(), n.norm_states()),
        Network::AutoEncoder(n) => (ConfigRecord::AutoEncoder(n.config().clone()), n.params(), n.norm_states()),
        Network::Discriminator(n) => (ConfigRecord::Discriminator(n.config().clone()), n.params(), &[]),
    };
    let cfg = serde_json::to_vec(&record).map_err(std::io::Error::other)?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(cfg.len() as u32).to_le_bytes())?;
    w.write_all(&cfg)?;
    w.write_all(&((params.len() + 2 * bn.len()) as u32).to_le_bytes())?;
    for (name, t) in params.names().iter().zip(params.tensors()) {
        write_array(&mut w, name, t.shape(), t.data())?;
    }
    for (i, s) in bn.iter().enumerate() {
        write_array(&mut w, &format!("bn{i}.running_mean"), &[s.mean.len()], &s.mean)?;
        write_array(&mut w, &format!("bn{i}.running_var"), &[s.var.len()], &s.var)?;
    }
    w.flush()
}

fn write_array<W: Write>(w: &mut W, name: &str, shape: &[usize], data: &[f64]) -> std::io::Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(shape.len() as u32).to_le_bytes())?;
    for &d in shape {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

struct Reader<R> {
    inner: R,
    path: std::path::PathBuf,
}

impl<R: Read> Reader<R> {
    fn bad(&self, detail: impl Into<String>) -> Error {
        Error::Format {
            kind: "checkpoint",
            path: self.path.clone(),
            detail: detail.into(),
        }
    }

    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| self.bad(format!("truncated: {e}")))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn array(&mut self) -> Result<(String, Tensor)> {
        let len = self.u32()? as usize;
        let name = String::from_utf8(self.bytes(len)?).map_err(|_| self.bad("array name is not UTF-8"))?;
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(self.bad(format!("array {name} has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        if n > 1 << 28 {
            return Err(self.bad(format!("array {name} is implausibly large")));
        }
        let raw = self.bytes(n * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(shape, data).map_err(|e| self.bad(e.to_string()))?;
        Ok((name, t))
    }
}

/// Reads a checkpoint; `origin` only labels error messages.
pub fn read_checkpoint<R: Read>(inner: R, origin: &Path) -> Result<Network> {
    let mut r = Reader {
        inner,
        path: origin.to_path_buf(),
    };
    if r.bytes(8)? != CHECKPOINT_MAGIC {
        return Err(r.bad("bad magic"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(r.bad(format!("unsupported version {version}")));
    }
    let cfg_len = r.u32()? as usize;
    let cfg_bytes = r.bytes(cfg_len)?;
    let record: ConfigRecord = serde_json::from_slice(&cfg_bytes).map_err(|e| r.bad(format!("config record: {e}")))?;
    let count = r.u32()? as usize;
    let mut arrays = Vec::with_capacity(count);
    for _ in 0..count {
        arrays.push(r.array()?);
    }
    let mismatch = |e: Error| r.bad(e.to_string());
    match record {
        ConfigRecord::Seg(cfg) => {
            let template = SegNet::build(&cfg, 0).map_err(mismatch)?;
            let (params, bn) = split_norms(arrays, template.params().len(), template.norm_states().len())
                .map_err(|d| r.bad(d))?;
            SegNet::from_checkpoint(cfg, params, bn).map(Network::Seg).map_err(mismatch)
        }
        ConfigRecord::AutoEncoder(cfg) => {
            let template = AutoEncoder::build(&cfg, 0).map_err(mismatch)?;
            let (params, bn) = split_norms(arrays, template.params().len(), template.norm_states().len())
                .map_err(|d| r.bad(d))?;
            AutoEncoder::from_checkpoint(cfg, params, bn)
                .map(Network::AutoEncoder)
                .map_err(mismatch)
        }
        ConfigRecord::Discriminator(cfg) => Discriminator::from_checkpoint(cfg, into_store(arrays))
            .map(Network::Discriminator)
            .map_err(mismatch),
    }
}

/// Splits stored arrays into parameters and (mean, var) running-moment pairs.
fn split_norms(
    mut arrays: Vec<(String, Tensor)>,
    n_params: usize,
    n_bn: usize,
) -> std::result::Result<(ParamStore, Vec<BnState>), String> {
    if arrays.len() != n_params + 2 * n_bn {
        return Err(format!("expected {} arrays, found {}", n_params + 2 * n_bn, arrays.len()));
    }
    let bn_arrays = arrays.split_off(n_params);
    let bn = bn_arrays
        .chunks(2)
        .map(|pair| BnState {
            mean: pair[0].1.data().to_vec(),
            var: pair[1].1.data().to_vec(),
        })
        .collect();
    Ok((into_store(arrays), bn))
}

fn into_store(arrays: Vec<(String, Tensor)>) -> ParamStore {
    let (names, tensors) = arrays.into_iter().unzip();
    ParamStore::from_parts(names, tensors)
}

pub fn save_checkpoint(path: &Path, net: &Network) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(BufWriter::new(file), net).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Network> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(file), path)
}
