//! Checkpoint container: `"FUD1"`, a little-endian u32 entry count, then per
//! entry a little-endian u16 name length, the UTF-8 name and one FTEN
//! record.
//!
//! Entries are `param/<name>`, `adam/m/<name>`, `adam/v/<name>` for every
//! parameter in model order, then `adam/t` as a one-element f64 record.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::ften;
use crate::net::Model;
use crate::params::ParamSet;
use crate::real::Real;
use crate::train::AdamState;

pub const MAGIC: &[u8; 4] = b"FUD1";

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

fn push_entry(out: &mut Vec<u8>, name: &str, record: &[u8]) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(record);
}

pub fn encode<T: Real>(params: &ParamSet<T>, state: &AdamState<T>) -> Result<Vec<u8>> {
    state.check(params)?;
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&((3 * params.len() + 1) as u32).to_le_bytes());
    let mut rec = Vec::new();
    for (k, p) in params.iter().enumerate() {
        rec.clear();
        ften::encode(&p.tensor, &mut rec);
        push_entry(&mut out, &format!("param/{}", p.name), &rec);
        let extents = p.tensor.shape().0.map(|e| e as u64);
        for (kind, buf) in [("m", &state.m[k]), ("v", &state.v[k])] {
            rec.clear();
            ften::encode_raw(&extents, buf, &mut rec);
            push_entry(&mut out, &format!("adam/{kind}/{}", p.name), &rec);
        }
    }
    rec.clear();
    ften::encode_raw(&[1], &[state.t as f64], &mut rec);
    push_entry(&mut out, "adam/t", &rec);
    Ok(out)
}

/// Named records in file order.
pub fn entries(bytes: &[u8]) -> Result<Vec<(String, ften::Record)>> {
    if bytes.len() < 8 {
        return Err(corrupt("truncated header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let mut pos = 8;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for k in 0..count {
        let len_bytes = bytes.get(pos..pos + 2).ok_or_else(|| corrupt(format!("entry {k}: truncated name length")))?;
        let len = u16::from_le_bytes([len_bytes[0], len_bytes[1]]) as usize;
        pos += 2;
        let name = bytes.get(pos..pos + len).ok_or_else(|| corrupt(format!("entry {k}: truncated name")))?;
        let name = std::str::from_utf8(name).map_err(|_| corrupt(format!("entry {k}: name is not UTF-8")))?.to_string();
        pos += len;
        let (rec, used) = ften::decode(&bytes[pos..]).map_err(|e| corrupt(format!("entry {name}: {e}")))?;
        pos += used;
        out.push((name, rec));
    }
    if pos != bytes.len() {
        return Err(corrupt(format!("{} trailing bytes", bytes.len() - pos)));
    }
    Ok(out)
}

/// Overwrites `params` from an encoded checkpoint and returns its optimizer
/// state. Every name, shape and the element type must match.
pub fn decode_into<T: Real>(bytes: &[u8], params: &mut ParamSet<T>) -> Result<AdamState<T>> {
    let items = entries(bytes)?;
    if items.len() != 3 * params.len() + 1 {
        return Err(corrupt(format!("{} entries for a model with {} parameters", items.len(), params.len())));
    }
    let mut it = items.into_iter();
    let mut state = AdamState::new(params);
    let mut values = Vec::with_capacity(params.len());
    for (k, p) in params.iter().enumerate() {
        let extents: Vec<u64> = p.tensor.shape().0.iter().map(|&e| e as u64).collect();
        for (slot, prefix) in ["param", "adam/m", "adam/v"].iter().enumerate() {
            let (name, rec) = it.next().expect("entry count checked");
            let want = format!("{prefix}/{}", p.name);
            if name != want {
                return Err(corrupt(format!("expected entry {want}, found {name}")));
            }
            if rec.extents != extents {
                return Err(corrupt(format!("{name} has extents {:?}, model expects {extents:?}", rec.extents)));
            }
            let data = rec.values::<T>().map_err(|e| corrupt(format!("{name}: {e}")))?;
            match slot {
                0 => values.push(data),
                1 => state.m[k] = data,
                _ => state.v[k] = data,
            }
        }
    }
    let (name, rec) = it.next().expect("entry count checked");
    if name != "adam/t" || rec.extents != [1] {
        return Err(corrupt(format!("expected the adam/t step counter, found {name}")));
    }
    let t = rec.values::<f64>().map_err(|e| corrupt(format!("adam/t: {e}")))?[0];
    if !(t >= 0.0) || t.fract() != 0.0 {
        return Err(corrupt(format!("invalid step counter {t}")));
    }
    state.t = t as u64;
    for (p, data) in params.iter_mut().zip(values) {
        p.tensor.data_mut().copy_from_slice(&data);
    }
    Ok(state)
}

pub fn save<T: Real>(path: impl AsRef<Path>, params: &ParamSet<T>, state: &AdamState<T>) -> Result<()> {
    fs::write(path, encode(params, state)?)?;
    Ok(())
}

pub fn load_into<T: Real>(path: impl AsRef<Path>, params: &mut ParamSet<T>) -> Result<AdamState<T>> {
    decode_into(&fs::read(path)?, params)
}

/// Saves the model's current parameters.
pub fn save_model<T: Real>(path: impl AsRef<Path>, model: &Model<T>, state: &AdamState<T>) -> Result<()> {
    save(path, &model.params, state)
}
