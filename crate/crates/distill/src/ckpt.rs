//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian `u64`:
//!
//! ```text
//! b"FVDM-CKPT1"
//! echo_len, echo (UTF-8 JSON)
//! count
//! count x { name_len, name, rank, dims[rank], f64 data }
//! ```

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::nn::{DiscriminatorHeads, FlowModel, ModelConfig};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const MAGIC: &[u8; 10] = b"FVDM-CKPT1";

/// Upper bound on header fields, so a corrupt file fails cleanly instead of
/// attempting a huge allocation.
const MAX_FIELD: u64 = 1 << 32;

/// JSON header of a checkpoint: the stage that wrote it, its seed, the fully
/// resolved configuration and the architecture of each stored model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Echo {
    pub stage: String,
    pub seed: u64,
    pub config: serde_json::Value,
    /// Model prefix to architecture.
    pub models: Vec<(String, ModelConfig)>,
    /// Discriminator taps, when one is stored under `disc.`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disc_taps: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub echo: Echo,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(stage: &str, seed: u64, config: serde_json::Value) -> Self {
        Self {
            echo: Echo {
                stage: stage.to_string(),
                seed,
                config,
                models: Vec::new(),
                disc_taps: None,
            },
            tensors: Vec::new(),
        }
    }

    pub fn push_model(&mut self, prefix: &str, model: &FlowModel) {
        self.echo.models.push((prefix.to_string(), model.cfg));
        for (n, p) in model.names().into_iter().zip(model.params()) {
            self.tensors.push((format!("{prefix}.{n}"), p.clone()));
        }
    }

    pub fn push_disc(&mut self, disc: &DiscriminatorHeads) {
        self.echo.disc_taps = Some(disc.taps.clone());
        for (n, p) in disc.names().into_iter().zip(disc.params()) {
            self.tensors.push((format!("disc.{n}"), p.clone()));
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))
    }

    pub fn model(&self, prefix: &str) -> Result<FlowModel> {
        let cfg = self
            .echo
            .models
            .iter()
            .find(|(p, _)| p == prefix)
            .map(|(_, c)| *c)
            .ok_or_else(|| Error::Format(format!("no model `{prefix}` in {} checkpoint", self.echo.stage)))?;
        let names = FlowModel::new(cfg, 0)?.names();
        let params = names
            .iter()
            .map(|n| self.get(&format!("{prefix}.{n}")).cloned())
            .collect::<Result<Vec<_>>>()?;
        FlowModel::from_params(cfg, params)
    }

    pub fn disc(&self) -> Result<DiscriminatorHeads> {
        let taps = self
            .echo
            .disc_taps
            .clone()
            .ok_or_else(|| Error::Format("no discriminator stored".into()))?;
        let params = (0..taps.len())
            .flat_map(|k| ["fc.weight", "fc.bias", "out.weight", "out.bias"].map(|s| format!("disc.head{k}.{s}")))
            .map(|n| self.get(&n).cloned())
            .collect::<Result<Vec<_>>>()?;
        DiscriminatorHeads::from_params(taps, params)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        let echo = serde_json::to_vec(&self.echo)?;
        put(w, echo.len() as u64)?;
        w.write_all(&echo)?;
        put(w, self.tensors.len() as u64)?;
        for (name, t) in &self.tensors {
            put(w, name.len() as u64)?;
            w.write_all(name.as_bytes())?;
            put(w, t.shape().len() as u64)?;
            for &d in t.shape() {
                put(w, d as u64)?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 10];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("file too short for a checkpoint header".into()))?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic, not an FVDM-CKPT1 file".into()));
        }
        let echo: Echo = serde_json::from_slice(&bytes(r, "echo")?)?;
        let count = field(r, "tensor count")?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name = String::from_utf8(bytes(r, "tensor name")?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let rank = field(r, "rank")?;
            if rank == 0 || rank > 2 {
                return Err(Error::Format(format!("tensor `{name}` has rank {rank}")));
            }
            let shape = (0..rank).map(|_| field(r, "dim").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; 8 * n];
            r.read_exact(&mut raw)
                .map_err(|_| Error::Format(format!("truncated data for `{name}`")))?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after last tensor".into()));
        }
        Ok(Self { echo, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let mut w = BufWriter::new(fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(fs::File::open(path)?))
    }
}

fn put<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn field<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|_| Error::Format(format!("truncated {what}")))?;
    let v = u64::from_le_bytes(b);
    if v > MAX_FIELD {
        return Err(Error::Format(format!("implausible {what} {v}")));
    }
    Ok(v)
}

fn bytes<R: Read>(r: &mut R, what: &str) -> Result<Vec<u8>> {
    let n = field(r, what)? as usize;
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)
        .map_err(|_| Error::Format(format!("truncated {what}")))?;
    Ok(b)
}
