//! Single-file training checkpoints.
//!
//! Layout: the 8-byte magic `HDRCKPT1`, a little-endian `u64` header length,
//! a JSON header, then every tensor as little-endian `f64` values in header
//! order. The header carries the config snapshot, the noise schedule, the
//! tensor index and the optimizer settings, so a checkpoint is readable on
//! its own.

use std::io::{Read, Write};
use std::path::Path;

use hdrface_core::model::{HdrFaceModel, ModelConfig};
use hdrface_core::nn::{AdamW, AdamWConfig, ParamStore};
use hdrface_core::onestep::NoiseSchedule;
use hdrface_core::train::{TrainConfig, TrainState};
use hdrface_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::Preset;
use crate::error::{HdrError, Result};

pub const MAGIC: &[u8; 8] = b"HDRCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub group: String,
    pub name: String,
    pub shape: Vec<usize>,
    /// Position of the first value, counted in `f64`s from the start of the blob.
    pub offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptimizerEntry {
    pub config: AdamWConfig,
    pub step: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub config: TrainConfig,
    pub preset: Preset,
    pub step: u64,
    pub schedule: NoiseSchedule,
    /// Frozen intermediate restorer the model was trained against, if any.
    pub stage0: Option<ModelConfig>,
    pub tensors: Vec<TensorEntry>,
    pub opt_g: OptimizerEntry,
    pub opt_d: OptimizerEntry,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub preset: Preset,
    pub state: TrainState,
    pub stage0: Option<HdrFaceModel>,
}

struct Writer {
    entries: Vec<TensorEntry>,
    blob: Vec<u8>,
    len: usize,
}

impl Writer {
    fn push(&mut self, group: &str, name: &str, t: &Tensor) {
        self.entries.push(TensorEntry { group: group.into(), name: name.into(), shape: t.shape().to_vec(), offset: self.len });
        for v in t.data() {
            self.blob.extend_from_slice(&v.to_le_bytes());
        }
        self.len += t.len();
    }

    fn store(&mut self, group: &str, store: &ParamStore) {
        for (name, t) in store.iter() {
            self.push(group, name, t);
        }
    }

    fn moments(&mut self, group: &str, store: &ParamStore, opt: &AdamW) {
        for (((name, _), m), v) in store.iter().zip(&opt.m).zip(&opt.v) {
            self.push(&format!("{group}.m"), name, m);
            self.push(&format!("{group}.v"), name, v);
        }
    }
}

pub fn encode(config: &TrainConfig, preset: Preset, state: &TrainState, stage0: Option<&HdrFaceModel>) -> Result<Vec<u8>> {
    let mut w = Writer { entries: Vec::new(), blob: Vec::new(), len: 0 };
    w.store("model", &state.model.store);
    w.store("disc", &state.disc.store);
    w.moments("opt_g", &state.model.store, &state.opt_g);
    w.moments("opt_d", &state.disc.store, &state.opt_d);
    if let Some(s0) = stage0 {
        w.store("stage0", &s0.store);
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        config: config.clone(),
        preset,
        step: state.step,
        schedule: state.model.schedule.clone(),
        stage0: stage0.map(|m| m.config.clone()),
        tensors: w.entries,
        opt_g: OptimizerEntry { config: state.opt_g.config, step: state.opt_g.step },
        opt_d: OptimizerEntry { config: state.opt_d.config, step: state.opt_d.step },
    };
    let json = serde_json::to_vec(&header).map_err(|source| HdrError::Json { context: "checkpoint header".into(), source })?;
    let mut out = Vec::with_capacity(16 + json.len() + w.blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&w.blob);
    Ok(out)
}

/// Writes through a temporary file in the target directory, so readers
/// never see a partial checkpoint.
pub fn save(path: &Path, config: &TrainConfig, preset: Preset, state: &TrainState, stage0: Option<&HdrFaceModel>) -> Result<()> {
    let bytes = encode(config, preset, state, stage0)?;
    write_atomic(path, &bytes)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| HdrError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| HdrError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| HdrError::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| HdrError::io(path, e.error))?;
    Ok(())
}

pub fn read_header(path: &Path) -> Result<(Header, Vec<u8>)> {
    let bad = |message: String| HdrError::Checkpoint { path: path.to_path_buf(), message };
    let mut file = std::fs::File::open(path).map_err(|e| HdrError::io(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| HdrError::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing HDRCKPT1 magic".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(bad(format!("format version {} is not supported", header.format_version)));
    }
    let blob = bytes[16 + hlen..].to_vec();
    Ok((header, blob))
}

fn fill(path: &Path, header: &Header, blob: &[u8], group: &str, store: &ParamStore) -> Result<Vec<Tensor>> {
    let bad = |message: String| HdrError::Checkpoint { path: path.to_path_buf(), message };
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    let mut out = Vec::with_capacity(names.len());
    for name in &names {
        let entry = header
            .tensors
            .iter()
            .find(|e| e.group == group && &e.name == name)
            .ok_or_else(|| bad(format!("missing tensor {group}/{name}")))?;
        let want = store.by_name(name).expect("name from the store").shape();
        if entry.shape != want {
            return Err(bad(format!("{group}/{name}: shape {:?} does not match model {:?}", entry.shape, want)));
        }
        let n: usize = entry.shape.iter().product();
        let bytes = blob.get(entry.offset * 8..(entry.offset + n) * 8).ok_or_else(|| bad(format!("{group}/{name}: data out of range")))?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        out.push(Tensor::new(entry.shape.clone(), data)?);
    }
    let extra = header.tensors.iter().filter(|e| e.group == group).count();
    if extra != names.len() {
        return Err(bad(format!("group `{group}` holds {extra} tensors, model expects {}", names.len())));
    }
    Ok(out)
}

fn load_store(path: &Path, header: &Header, blob: &[u8], group: &str, store: &mut ParamStore) -> Result<()> {
    let tensors = fill(path, header, blob, group, store)?;
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    for (name, t) in names.iter().zip(tensors) {
        *store.by_name_mut(name).expect("name from the store") = t;
    }
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let (header, blob) = read_header(path)?;
    let mut state = TrainState::new(&header.config)?;
    load_store(path, &header, &blob, "model", &mut state.model.store)?;
    load_store(path, &header, &blob, "disc", &mut state.disc.store)?;
    for (group, store, opt, entry) in [
        ("opt_g", &state.model.store, &mut state.opt_g, &header.opt_g),
        ("opt_d", &state.disc.store, &mut state.opt_d, &header.opt_d),
    ] {
        
        opt.m = fill(path, &header, &blob, &format!("{group}.m"), store)?;
        opt.v = fill(path, &header, &blob, &format!("{group}.v"), store)?;
        opt.config = entry.config;
        opt.step = entry.step;
    }
    state.step = header.step;
    let stage0 = match &header.stage0 {
        Some(cfg) => {
            let mut m = HdrFaceModel::new(cfg.clone())?;
            load_store(path, &header, &blob, "stage0", &mut m.store)?;
            Some(m)
        }
        None => None,
    };
    Ok(Checkpoint { config: header.config, preset: header.preset, state, stage0 })
}
