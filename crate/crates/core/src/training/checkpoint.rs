//! Binary checkpoints.
//!
//! Little-endian layout:
//!
//! ```text
//! magic "DCVQCKPT" | u32 version
//! u32 len | model config as JSON
//! u32 count | count x (u32 len | name | u32 rank | rank x u64 dim | f64 payload)
//! u64 adam step | u32 count | count x (u64 len | f64 first | f64 second)
//! f64 best validation loss | u64 epoch
//! ```

use std::path::{Path, PathBuf};

use super::{AdamState, Result, TrainError};
use crate::model::{DcvqeConfig, DcvqeModel};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"DCVQCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: DcvqeConfig,
    /// Canonical parameter order.
    pub params: Vec<(String, Tensor)>,
    pub optimizer: AdamState,
    /// `+inf` before any validation pass.
    pub best_val_loss: f64,
    /// Completed epochs.
    pub epoch: usize,
}

impl Checkpoint {
    pub fn capture(model: &DcvqeModel, optimizer: &AdamState, best_val_loss: f64, epoch: usize) -> Self {
        Self {
            config: model.config().clone(),
            params: model
                .params()
                .entries()
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect(),
            optimizer: optimizer.clone(),
            best_val_loss,
            epoch,
        }
    }

    /// Rebuilds the model described by this checkpoint.
    pub fn model(&self) -> Result<DcvqeModel> {
        Ok(DcvqeModel::from_named(self.config.clone(), self.params.clone())?)
    }

    /// Loads the parameters into an existing model; every name and shape
    /// must match that model's configuration.
    pub fn restore_into(&self, model: &mut DcvqeModel) -> Result<()> {
        Ok(model.load_named(self.params.clone())?)
    }
}

pub fn encode_checkpoint(cp: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    let config = serde_json::to_vec(&cp.config).expect("config serializes");
    put_u32(&mut out, config.len() as u32);
    out.extend_from_slice(&config);
    put_u32(&mut out, cp.params.len() as u32);
    for (name, t) in &cp.params {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len() as u32);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        put_f64s(&mut out, t.data());
    }
    out.extend_from_slice(&cp.optimizer.step.to_le_bytes());
    put_u32(&mut out, cp.optimizer.first.len() as u32);
    for (m, v) in cp.optimizer.first.iter().zip(&cp.optimizer.second) {
        out.extend_from_slice(&(m.len() as u64).to_le_bytes());
        put_f64s(&mut out, m);
        put_f64s(&mut out, v);
    }
    out.extend_from_slice(&cp.best_val_loss.to_le_bytes());
    out.extend_from_slice(&(cp.epoch as u64).to_le_bytes());
    out
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, offset: usize, msg: impl Into<String>) -> TrainError {
        TrainError::Checkpoint {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(self.fail(self.bytes.len(), format!("truncated while reading {what}")));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let at = self.pos;
        let n = self.u64(what)?;
        usize::try_from(n).map_err(|_| self.fail(at, format!("{what} {n} is too large")))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = n
            .checked_mul(8)
            .ok_or_else(|| self.fail(self.pos, format!("{what} is too large")))?;
        let raw = self.take(bytes, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(r.fail(0, "not a checkpoint (bad magic)"));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(r.fail(8, format!("unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})")));
    }
    let n = r.u32("config length")? as usize;
    let at = r.pos;
    let config: DcvqeConfig =
        serde_json::from_slice(r.take(n, "config")?).map_err(|e| r.fail(at, format!("bad config: {e}")))?;

    let count = r.u32("parameter count")? as usize;
    let mut params = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let n = r.u32("name length")? as usize;
        let at = r.pos;
        let name = std::str::from_utf8(r.take(n, "parameter name")?)
            .map_err(|_| r.fail(at, "parameter name is not UTF-8"))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let shape = (0..rank).map(|_| r.len("dimension")).collect::<Result<Vec<_>>>()?;
        let at = r.pos;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| r.fail(at, format!("shape {shape:?} of `{name}` overflows")))?;
        let data = r.f64s(numel, "parameter payload")?;
        let t = Tensor::new(shape, data).map_err(|e| r.fail(at, format!("`{name}`: {e}")))?;
        params.push((name, t));
    }

    let step = r.u64("optimizer step")?;
    let moments = r.u32("moment count")? as usize;
    let (mut first, mut second) = (Vec::new(), Vec::new());
    for _ in 0..moments {
        let len = r.len("moment length")?;
        first.push(r.f64s(len, "first moment")?);
        second.push(r.f64s(len, "second moment")?);
    }
    let best_val_loss = f64::from_le_bytes(r.take(8, "best validation loss")?.try_into().unwrap());
    let epoch = r.len("epoch")?;
    if r.pos != bytes.len() {
        return Err(r.fail(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let cp = Checkpoint {
        config,
        params,
        optimizer: AdamState { step, first, second },
        best_val_loss,
        epoch,
    };
    // Validates names and shapes against the stored config.
    cp.model()?;
    Ok(cp)
}

pub fn save_checkpoint(path: impl AsRef<Path>, cp: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(cp)).map_err(|source| TrainError::Io {
        path: PathBuf::from(path),
        source,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| TrainError::Io {
        path: PathBuf::from(path),
        source,
    })?;
    decode_checkpoint(&bytes, path)
}
