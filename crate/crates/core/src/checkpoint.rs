//! Parameter archives and their JSON sidecar.
//!
//! Archive layout, all integers little-endian `u32`:
//!
//! ```text
//! "OPCK" | version | count | count x entry
//! entry: name_len | name (UTF-8) | ndim | dims... | f32 data (row-major)
//! ```
//!
//! Entries are written in name order. Optimizer moments share the archive
//! under `optim.m.` and `optim.v.` prefixes. The sidecar `<archive>.json`
//! holds the model configuration and training state.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{Adam, AdamConfig, DenoiserConfig, ScheduleConfig};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, OutpaintModel};
use crate::params::ParamStore;
use crate::tape::Matrix;

pub const MAGIC: &[u8; 4] = b"OPCK";
pub const VERSION: u32 = 1;
const MAX_NDIM: usize = 8;
const MOMENT_M: &str = "optim.m.";
const MOMENT_V: &str = "optim.v.";

pub fn encode_archive(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + store.total_elements() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, m) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&2u32.to_le_bytes());
        out.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
        out.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
        for v in m.iter() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated archive at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

pub fn decode_archive(bytes: &[u8]) -> Result<ParamStore> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("not a parameter archive".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported archive version {version}")));
    }
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u32()?;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u32()?;
        if ndim == 0 || ndim > MAX_NDIM {
            return Err(Error::Checkpoint(format!("{name}: unsupported rank {ndim}")));
        }
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32()?);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n.checked_mul(4).is_some_and(|b| b <= r.remaining()))
            .ok_or_else(|| Error::Checkpoint(format!("{name}: shape {dims:?} exceeds the archive")))?;
        let raw = r.take(n * 4)?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let (rows, cols) = match dims.as_slice() {
            [r] => (1, *r),
            [r, c] => (*r, *c),
            _ => {
                let last = *dims.last().expect("ndim >= 1");
                (n / last.max(1), last)
            }
        };
        let m = Matrix::from_shape_vec((rows, cols), data)
            .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        if store.contains(&name) {
            return Err(Error::Checkpoint(format!("duplicate parameter {name}")));
        }
        store.insert(name, m);
    }
    if r.remaining() != 0 {
        return Err(Error::Checkpoint(format!("{} trailing bytes", r.remaining())));
    }
    Ok(store)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingState {
    pub epoch: usize,
    pub step: u64,
    pub seed: u64,
    /// Mean batch loss per optimizer step.
    pub loss_history: Vec<f64>,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub format_version: u32,
    pub model: ModelConfig,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub optimizer: AdamConfig,
    pub optimizer_step: u64,
    pub training: TrainingState,
    pub archive_sha256: String,
}

pub fn sidecar_path(archive: &Path) -> PathBuf {
    with_suffix(archive, ".json")
}

pub fn loss_csv_path(archive: &Path) -> PathBuf {
    with_suffix(archive, ".loss.csv")
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: OutpaintModel,
    pub optimizer: Adam,
    pub training: TrainingState,
    pub archive_sha256: String,
}

impl Checkpoint {
    /// Writes the archive, sidecar and loss CSV; returns the archive hash.
    pub fn save(
        path: &Path,
        model: &OutpaintModel,
        optimizer: &Adam,
        training: &TrainingState,
    ) -> Result<String> {
        let mut store = model.params().clone();
        let (m, v) = optimizer.moments();
        for (name, value) in m.iter() {
            store.insert(format!("{MOMENT_M}{name}"), value.clone());
        }
        for (name, value) in v.iter() {
            store.insert(format!("{MOMENT_V}{name}"), value.clone());
        }
        let bytes = encode_archive(&store);
        let sha = sha256_hex(&bytes);
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        write_atomic(path, &bytes)?;
        let sidecar = Sidecar {
            format_version: VERSION,
            model: model.config().clone(),
            denoiser: model.denoiser_config(),
            schedule: model.config().schedule,
            optimizer: optimizer.config,
            optimizer_step: optimizer.step_count(),
            training: training.clone(),
            archive_sha256: sha.clone(),
        };
        write_atomic(&sidecar_path(path), &serde_json::to_vec_pretty(&sidecar)?)?;
        let mut csv = String::from("step,loss\n");
        for (i, l) in training.loss_history.iter().enumerate() {
            csv.push_str(&format!("{},{l}\n", i + 1));
        }
        write_atomic(&loss_csv_path(path), csv.as_bytes())?;
        Ok(sha)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let sc_path = sidecar_path(path);
        let sc_bytes = std::fs::read(&sc_path).map_err(|e| Error::io(&sc_path, e))?;
        let sidecar: Sidecar = serde_json::from_slice(&sc_bytes)?;
        Self::from_parts(&bytes, sidecar)
    }

    pub fn from_parts(archive: &[u8], sidecar: Sidecar) -> Result<Self> {
        let sha = sha256_hex(archive);
        if sha != sidecar.archive_sha256 {
            return Err(Error::Checkpoint(format!(
                "archive hash {sha} does not match sidecar {}",
                sidecar.archive_sha256
            )));
        }
        if sidecar.model.schedule != sidecar.schedule || sidecar.model.denoiser() != sidecar.denoiser {
            return Err(Error::Checkpoint("sidecar configurations disagree".into()));
        }
        let store = decode_archive(archive)?;
        let mut params = ParamStore::new();
        let mut m = ParamStore::new();
        let mut v = ParamStore::new();
        for (name, value) in store.iter() {
            if let Some(n) = name.strip_prefix(MOMENT_M) {
                m.insert(n, value.clone());
            } else if let Some(n) = name.strip_prefix(MOMENT_V) {
                v.insert(n, value.clone());
            } else {
                params.insert(name, value.clone());
            }
        }
        let model = OutpaintModel::from_params(sidecar.model, params)?;
        let optimizer = Adam::restore(sidecar.optimizer, sidecar.optimizer_step, m, v);
        Ok(Self {
            model,
            optimizer,
            training: sidecar.training,
            archive_sha256: sha,
        })
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = with_suffix(path, ".tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
