//! Binary checkpoint format, all integers and floats little-endian:
//!
//! ```text
//! "HD2S"            magic
//! u32               format version
//! u32 + bytes       model configuration as `key = value` text
//! u32               parameter count, then per parameter (sorted by name):
//!                     u32 + bytes name, u8 dtype (0 = f32), u32 rank,
//!                     rank × u32 extents, f32 payload
//! u32               statistics count, then records as above, named
//!                   `<layer>/d<domain>/mean` and `<layer>/d<domain>/var`
//! u64               training step
//! ```

use std::collections::BTreeMap;

use hd2s_tensor::{BnStats, DomainTag, Tensor};

use crate::config::{ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::model::Hd2s;

pub const MAGIC: &[u8; 4] = b"HD2S";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(u32::try_from(v).expect("fits in u32")).to_le_bytes());
}

fn put_record(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    put_u32(out, name.len());
    out.extend_from_slice(name.as_bytes());
    out.push(DTYPE_F32);
    put_u32(out, shape.len());
    for &e in shape {
        put_u32(out, e);
    }
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn stat_name(layer: &str, d: DomainTag, field: &str) -> String {
    format!("{layer}/d{}/{field}", d.0)
}

/// Serializes every parameter and normalization statistic of `model`.
pub fn save_checkpoint(model: &Hd2s, step: u64) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg = model.config().to_text();
    put_u32(&mut out, cfg.len());
    out.extend_from_slice(cfg.as_bytes());

    let params: Vec<_> = model.params().sorted().collect();
    put_u32(&mut out, params.len());
    for p in params {
        put_record(&mut out, &p.name, p.value.shape(), p.value.data());
    }

    let mut stats: BTreeMap<String, Vec<f32>> = BTreeMap::new();
    for (layer, s) in model.batch_norms() {
        for (d, st) in s.domains() {
            stats.insert(stat_name(layer, d, "mean"), st.mean.clone());
            stats.insert(stat_name(layer, d, "var"), st.var.clone());
        }
    }
    put_u32(&mut out, stats.len());
    for (name, v) in &stats {
        put_record(&mut out, name, &[v.len()], v);
    }
    out.extend_from_slice(&step.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::CorruptCheckpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::CorruptCheckpoint("name is not UTF-8".into()))
    }

    fn record(&mut self) -> Result<(String, Tensor<f32>)> {
        let name = self.string()?;
        let dtype = self.take(1)?[0];
        if dtype != DTYPE_F32 {
            return Err(Error::CorruptCheckpoint(format!("tensor `{name}` has unknown dtype {dtype}")));
        }
        let rank = self.u32()?;
        let shape = (0..rank).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .ok_or_else(|| Error::CorruptCheckpoint(format!("tensor `{name}` is too large")))?;
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::CorruptCheckpoint("size overflow".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::CorruptCheckpoint(format!("tensor `{name}`: {e}")))?;
        Ok((name, t))
    }
}

/// Rebuilds a model from checkpoint bytes. Returns the model and its step.
pub fn load_checkpoint(bytes: &[u8]) -> Result<(Hd2s, u64)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::CorruptCheckpoint("missing magic".into()));
    }
    let version = r.u32()? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let cfg_text = r.string()?;
    let config = ModelConfig::from_text(&cfg_text)
        .map_err(|e| Error::CorruptCheckpoint(format!("configuration: {e}")))?;
    let mut model = Hd2s::new(config)?;

    let count = r.u32()?;
    if count != model.params().len() {
        return Err(Error::CorruptCheckpoint(format!(
            "{count} tensors stored, model has {}",
            model.params().len()
        )));
    }
    let mut prev: Option<String> = None;
    for _ in 0..count {
        let (name, t) = r.record()?;
        if prev.as_deref().is_some_and(|p| p >= name.as_str()) {
            return Err(Error::CorruptCheckpoint("tensor names not sorted".into()));
        }
        model.params_mut().assign(&name, t)?;
        prev = Some(name);
    }

    let count = r.u32()?;
    let mut stats: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    for _ in 0..count {
        let (name, t) = r.record()?;
        stats.insert(name, t);
    }
    for (layer, s) in model.batch_norms_mut() {
        let prefix = format!("{layer}/d");
        let domains: Vec<u16> = stats
            .keys()
            .filter_map(|k| k.strip_prefix(&prefix)?.strip_suffix("/mean")?.parse().ok())
            .collect();
        for d in domains {
            let d = DomainTag(d);
            let mean = stats.remove(&stat_name(layer, d, "mean"));
            let var = stats.remove(&stat_name(layer, d, "var"));
            let (Some(mean), Some(var)) = (mean, var) else {
                return Err(Error::CorruptCheckpoint(format!("incomplete statistics for {layer}")));
            };
            s.insert(
                d,
                BnStats {
                    mean: mean.into_data(),
                    var: var.into_data(),
                },
            )
            .map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        }
    }
    if let Some(name) = stats.keys().next() {
        return Err(Error::CorruptCheckpoint(format!("unexpected statistics `{name}`")));
    }
    let step = r.u64()?;
    if r.pos != bytes.len() {
        return Err(Error::CorruptCheckpoint("trailing bytes".into()));
    }
    Ok((model, step))
}

/// As [`load_checkpoint`], rejecting checkpoints of a different variant.
pub fn load_checkpoint_expecting(bytes: &[u8], expected: Variant) -> Result<(Hd2s, u64)> {
    let (model, step) = load_checkpoint(bytes)?;
    let found = model.config().variant();
    if found != expected {
        return Err(Error::Mode(format!(
            "checkpoint holds a {found} model, a {expected} model was requested"
        )));
    }
    Ok((model, step))
}
