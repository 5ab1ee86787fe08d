//! `TGCP` checkpoint files.
//!
//! Layout: magic `TGCP`, version `u32`, then records until end of file, each
//! `name_len u32 | name utf-8 | rank u32 | extents u64 × rank | values f64 ×
//! product(extents)`, all little-endian. Records are written in name order.
//! Adam moments are stored as `<name>.m` / `<name>.v` and the shared step
//! counter as the rank-0 record `adam.step`, which is always the final
//! record so that a file cut at a record boundary is still detected.

use std::collections::BTreeMap;
use std::path::Path;

use crate::binio::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::params::{Param, ParameterStore};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TGCP";
pub const VERSION: u32 = 1;
const STEP_KEY: &str = "adam.step";

pub fn to_bytes(store: &ParameterStore) -> Vec<u8> {
    let mut records: BTreeMap<String, (Vec<u64>, &[f64])> = BTreeMap::new();
    for (name, p) in store.iter() {
        let extents = |t: &Tensor| t.shape().iter().map(|&d| d as u64).collect::<Vec<_>>();
        records.insert(name.to_string(), (extents(&p.value), p.value.data()));
        records.insert(format!("{name}.m"), (extents(&p.m), p.m.data()));
        records.insert(format!("{name}.v"), (extents(&p.v), p.v.data()));
    }
    let step = [store.step as f64];

    let mut w = Writer::new(MAGIC, Some(VERSION));
    for (name, (extents, values)) in &records {
        w.str(name);
        w.u32(extents.len() as u32);
        for &e in extents {
            w.u64(e);
        }
        w.f64s(values);
    }
    w.str(STEP_KEY);
    w.u32(0);
    w.f64s(&step);
    w.buf
}

/// Raw records of a checkpoint, keyed by name. Rank-0 records come back as
/// shape `[1]`.
pub fn read_records(bytes: &[u8], origin: &str) -> Result<BTreeMap<String, Tensor>> {
    let mut r = Reader::new(bytes, origin);
    r.magic(MAGIC)?;
    r.version(VERSION)?;
    let mut out = BTreeMap::new();
    while !r.at_end() {
        let name = r.str("record name")?;
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let e = r.u64("extent")?;
            if e == 0 || e > u32::MAX as u64 {
                return Err(r.error(format!("record {name}: bad extent {e}")));
            }
            shape.push(e as usize);
        }
        let count = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let count = count.ok_or_else(|| r.error(format!("record {name}: size overflows")))?;
        let values = r.f64s(count, "values")?;
        let shape = if shape.is_empty() { vec![1] } else { shape };
        if out.insert(name.clone(), Tensor::new(shape, values)?).is_some() {
            return Err(r.error(format!("duplicate record {name}")));
        }
        if name == STEP_KEY {
            if !r.at_end() {
                return Err(r.error(format!("{STEP_KEY} must be the final record")));
            }
            return Ok(out);
        }
    }
    Err(r.error(format!("truncated: missing final {STEP_KEY} record")))
}

pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<ParameterStore> {
    let mut records = read_records(bytes, origin)?;
    let format_err = |reason: String| Error::Format {
        path: origin.to_string(),
        offset: 0,
        reason,
    };
    let step = records.remove(STEP_KEY).expect("read_records guarantees the step");
    let mut store = ParameterStore::new();
    store.step = step.item() as u64;

    let names: Vec<String> = records
        .keys()
        .filter(|k| !(k.ends_with(".m") || k.ends_with(".v")))
        .cloned()
        .collect();
    for name in names {
        let value = records.remove(&name).unwrap();
        let m = records
            .remove(&format!("{name}.m"))
            .ok_or_else(|| format_err(format!("missing moment {name}.m")))?;
        let v = records
            .remove(&format!("{name}.v"))
            .ok_or_else(|| format_err(format!("missing moment {name}.v")))?;
        if m.shape() != value.shape() || v.shape() != value.shape() {
            return Err(format_err(format!("moment shape mismatch for {name}")));
        }
        let grad = Tensor::zeros(value.shape());
        store.insert_param(name, Param { value, grad, m, v });
    }
    if let Some(stray) = records.keys().next() {
        return Err(format_err(format!("moment record {stray} has no parameter")));
    }
    Ok(store)
}

pub fn save(store: &ParameterStore, path: &Path) -> Result<()> {
    write_file(path, &to_bytes(store))
}

pub fn load(path: &Path) -> Result<ParameterStore> {
    let bytes = read_file(path)?;
    from_bytes(&bytes, &path.display().to_string())
}
