//! Binary checkpoint format.
//!
//! ```text
//! "ELEC" | u32 version | u32 header len | header (key=value text)
//!        | u32 tensor count | records... | u64 FNV-1a of all preceding bytes
//! record = u32 name len | name | u32 rank | u32 dims... | f32 LE payload
//! ```
//!
//! The header is the training configuration followed by `num_items` and
//! `best_epoch` lines. All integers are little-endian.

use std::fs;
use std::path::Path;

use crate::autodiff::{ParamStore, Tensor};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::Model;

pub const MAGIC: &[u8; 4] = b"ELEC";
pub const VERSION: u32 = 1;

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// A trained model together with the epoch it was taken from.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub best_epoch: usize,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn to_bytes(model: &Model, best_epoch: usize) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let header = format!(
        "{}num_items={}\nbest_epoch={}\n",
        model.config.to_kv_string(),
        model.num_items,
        best_epoch
    );
    put_u32(&mut out, header.len());
    out.extend_from_slice(header.as_bytes());
    put_u32(&mut out, model.store.len());
    for (_, p) in model.store.iter() {
        put_u32(&mut out, p.name.len());
        out.extend_from_slice(p.name.as_bytes());
        put_u32(&mut out, p.value.rank());
        for &d in p.value.shape() {
            put_u32(&mut out, d);
        }
        for &x in p.value.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let sum = fnv1a(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::CorruptCheckpoint("unexpected end of data".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn utf8(&mut self, n: usize) -> Result<&'a str> {
        std::str::from_utf8(self.take(n)?).map_err(|_| Error::CorruptCheckpoint("invalid utf-8".into()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 4 + 8 || &bytes[..4] != MAGIC {
        return Err(Error::CorruptCheckpoint("missing ELEC header".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    if fnv1a(body) != stored {
        return Err(Error::CorruptCheckpoint("checksum mismatch".into()));
    }
    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u32()? as u32;
    if version != VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: VERSION,
        });
    }
    let header_len = r.u32()?;
    let header = r.utf8(header_len)?;
    let mut config_text = String::new();
    let (mut num_items, mut best_epoch) = (None, None);
    for line in header.lines() {
        match line.split_once('=') {
            Some(("num_items", v)) => num_items = v.parse::<usize>().ok(),
            Some(("best_epoch", v)) => best_epoch = v.parse::<usize>().ok(),
            _ => {
                config_text.push_str(line);
                config_text.push('\n');
            }
        }
    }
    let num_items = num_items.ok_or_else(|| Error::CorruptCheckpoint("header lacks num_items".into()))?;
    let best_epoch = best_epoch.ok_or_else(|| Error::CorruptCheckpoint("header lacks best_epoch".into()))?;
    let config = TrainConfig::parse(&config_text)?;

    let count = r.u32()?;
    let mut loaded = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u32()?;
        let name = r.utf8(name_len)?.to_string();
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| Error::CorruptCheckpoint(format!("{name}: shape overflow")))?;
        let payload = r.take(numel.checked_mul(4).ok_or_else(|| Error::CorruptCheckpoint("size overflow".into()))?)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::CorruptCheckpoint(format!("{name}: {e}")))?;
        loaded.add(name, t);
    }
    if r.pos != body.len() {
        return Err(Error::CorruptCheckpoint("trailing bytes".into()));
    }
    let mut model = Model::new(&config, num_items)?;
    if loaded.len() != model.store.len() {
        return Err(Error::CorruptCheckpoint(format!(
            "expected {} tensors, found {}",
            model.store.len(),
            loaded.len()
        )));
    }
    model
        .store
        .load_values(&loaded)
        .map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    Ok(Checkpoint { model, best_epoch })
}

pub fn save(model: &Model, best_epoch: usize, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, to_bytes(model, best_epoch))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    from_bytes(&fs::read(path)?)
}
