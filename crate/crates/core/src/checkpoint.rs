//! Self-describing binary checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic     8 bytes  "LEDITCKP"
//! version   u32
//! config    u32 length + UTF-8 `key=value` lines
//! step      u64
//! rng       u64 seed, u64 stream, u128 word position
//! tensors   u32 count, then per tensor:
//!             u32 name length + UTF-8 name
//!             u32 rank + rank x u64 dims
//!             product(dims) x f64
//! crc32     u32 over every preceding byte
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Ledit, ModelConfig};
use crate::rng::RngState;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"LEDITCKP";
pub const FORMAT_VERSION: u32 = 2;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Ledit,
    pub step: u64,
    pub rng: RngState,
}

pub fn config_to_text(config: &ModelConfig) -> String {
    config
        .to_pairs()
        .into_iter()
        .map(|(k, v)| format!("{k}={v}\n"))
        .collect()
}

pub fn config_from_text(text: &str) -> Result<ModelConfig> {
    let mut config = ModelConfig::default();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("malformed config line `{line}`")))?;
        if !config.set(k.trim(), v)? {
            return Err(Error::Format(format!("unknown config key `{k}`")));
        }
    }
    config.validate()?;
    Ok(config)
}

pub fn encode(model: &Ledit, step: u64, rng: RngState) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + model.param_count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let config = config_to_text(model.config());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&step.to_le_bytes());
    out.extend_from_slice(&rng.seed.to_le_bytes());
    out.extend_from_slice(&rng.stream.to_le_bytes());
    out.extend_from_slice(&rng.word_pos.to_le_bytes());
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (name, t) in model.param_names().iter().zip(model.params()) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Truncated(format!("{what} at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Format(format!("{what} is not UTF-8")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            expected: FORMAT_VERSION,
            found: version,
        });
    }
    let config = config_from_text(&r.string("config")?)?;
    let step = r.u64("step")?;
    let rng = RngState {
        seed: r.u64("rng seed")?,
        stream: r.u64("rng stream")?,
        word_pos: u128::from_le_bytes(r.array("rng position")?),
    };
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name = r.string("tensor name")?;
        let rank = r.u32("tensor rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.u64("tensor dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("tensor `{name}` is too large")))?;
        let raw = r.take(len.saturating_mul(8), &format!("tensor `{name}`"))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    let body_end = r.pos;
    let stored = r.u32("checksum")?;
    let actual = crc32fast::hash(&bytes[..body_end]);
    if stored != actual {
        return Err(Error::Format(format!(
            "checksum mismatch (stored {stored:08x}, computed {actual:08x})"
        )));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after checksum",
            bytes.len() - r.pos
        )));
    }
    let model = Ledit::from_named(config, tensors)?;
    Ok(Checkpoint { model, step, rng })
}

pub fn save_checkpoint(path: &Path, model: &Ledit, step: u64, rng: RngState) -> Result<()> {
    fs::write(path, encode(model, step, rng))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}
