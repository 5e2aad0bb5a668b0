//! Binary checkpoints: parameters, AdamW moments and the iteration counter.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "SEGVITCK" | version u32 | config text (u64 len, utf-8)
//! iteration u64 | adam steps u64
//! 3 × section: count u64, then per record
//!     name (u32 len, utf-8) | rank u32 | dims u64 × rank | values f32 × numel
//! ```
//!
//! Sections are parameters, first moments, second moments, in that order.

use std::path::Path;

use crate::config::SegVitConfig;
use crate::error::{Error, Result};
use crate::model;
use crate::numerics::{ParamStore, Tensor};
use crate::train::{AdamW, TrainState};

pub const MAGIC: &[u8; 8] = b"SEGVITCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: SegVitConfig,
    pub state: TrainState,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_store(out: &mut Vec<u8>, store: &ParamStore<f32>) {
    put_u64(out, store.len() as u64);
    for (name, t) in store.iter() {
        put_u32(out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        put_u32(out, t.rank() as u32);
        for &d in t.shape() {
            put_u64(out, d as u64);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn to_bytes(config: &SegVitConfig, state: &TrainState) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 * state.params.numel() + 4096);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    let text = config.to_text();
    put_u64(&mut out, text.len() as u64);
    out.extend_from_slice(text.as_bytes());
    put_u64(&mut out, state.iteration);
    put_u64(&mut out, state.optimizer.steps);
    put_store(&mut out, &state.params);
    put_store(&mut out, &state.optimizer.m);
    put_store(&mut out, &state.optimizer.v);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.at))
        })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::Checkpoint(format!("length {v} does not fit in memory")))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid utf-8 string".into()))
    }

    fn store(&mut self, section: &str) -> Result<ParamStore<f32>> {
        let count = self.len()?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let n = self.u32()? as usize;
            let name = self.string(n)?;
            let rank = self.u32()? as usize;
            let shape = (0..rank).map(|_| self.len()).collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("{section}/{name}: shape {shape:?} overflows")))?;
            let raw = self.take(numel.checked_mul(4).ok_or_else(|| Error::Checkpoint(format!("{section}/{name}: too large")))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("{section}/{name}: {e}")))?;
            store
                .insert(name.clone(), t)
                .map_err(|_| Error::Checkpoint(format!("{section}: duplicate record {name}")))?;
        }
        Ok(store)
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version} (expected {VERSION})")));
    }
    let n = r.len()?;
    let text = r.string(n)?;
    let config = SegVitConfig::parse(&text)?;
    let iteration = r.u64()?;
    let steps = r.u64()?;
    let params = r.store("params")?;
    let m = r.store("adam_m")?;
    let v = r.store("adam_v")?;
    if r.at != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.at)));
    }
    check_layout(&config, &params, "params")?;
    check_layout(&config, &m, "adam_m")?;
    check_layout(&config, &v, "adam_v")?;
    Ok(Checkpoint {
        config,
        state: TrainState {
            params,
            optimizer: AdamW { m, v, steps },
            iteration,
        },
    })
}

/// The records must be exactly the parameters the config's model declares.
fn check_layout(config: &SegVitConfig, store: &ParamStore<f32>, section: &str) -> Result<()> {
    let expect = model::init_params::<f32>(&config.model, 0)?;
    let a: Vec<(&str, &[usize])> = expect.iter().map(|(n, t)| (n, t.shape())).collect();
    let b: Vec<(&str, &[usize])> = store.iter().map(|(n, t)| (n, t.shape())).collect();
    if a != b {
        let first = a
            .iter()
            .zip(&b)
            .find(|(x, y)| x != y)
            .map(|(x, y)| format!("expected {x:?}, found {y:?}"))
            .unwrap_or_else(|| format!("expected {} records, found {}", a.len(), b.len()));
        return Err(Error::Checkpoint(format!("{section} do not match the model: {first}")));
    }
    Ok(())
}

pub fn save(path: &Path, config: &SegVitConfig, state: &TrainState) -> Result<()> {
    std::fs::write(path, to_bytes(config, state)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Load and require the stored model architecture to equal `expected`'s.
pub fn load_for(path: &Path, expected: &SegVitConfig) -> Result<Checkpoint> {
    let ck = load(path)?;
    if ck.config.model != expected.model {
        return Err(Error::Checkpoint(format!(
            "checkpoint {} was written for a different model ({:?} vs {:?})",
            path.display(),
            ck.config.model,
            expected.model
        )));
    }
    Ok(ck)
}
