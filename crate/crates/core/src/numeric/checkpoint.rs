//! Binary checkpoint archive: a flat, sorted map from parameter path strings
//! to shaped little-endian f64 arrays.
//!
//! Layout (all integers little-endian):
//! ```text
//! magic    8  b"PALNCKPT"
//! version  u32   (currently 1)
//! count    u32
//! entry*   u16 path_len | path utf8 | u8 ndim | u32 dim* | u64 n | f64 value*
//! ```
//! Entries are sorted by path; the loader rejects unsorted or duplicate
//! paths so the on-disk form is canonical: identical parameters always
//! produce identical bytes, and round-trips are bit-exact.

use std::fs;
use std::path::Path;

use super::mlp::ParamGroup;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PALNCKPT";
const VERSION: u32 = 1;

/// One named tensor in a checkpoint archive.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub path: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

pub fn save_checkpoint(file: &Path, entries: &[CheckpointEntry]) -> Result<()> {
    let mut sorted: Vec<&CheckpointEntry> = entries.iter().collect();
    sorted.sort_by(|a, b| a.path.cmp(&b.path));
    for pair in sorted.windows(2) {
        if pair[0].path == pair[1].path {
            return Err(Error::Checkpoint(format!(
                "duplicate parameter path {:?}",
                pair[0].path
            )));
        }
    }

    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(sorted.len() as u32).to_le_bytes());
    for e in sorted {
        let expected: usize = e.shape.iter().product();
        if expected != e.values.len() {
            return Err(Error::Checkpoint(format!(
                "entry {:?} shape {:?} does not match {} values",
                e.path,
                e.shape,
                e.values.len()
            )));
        }
        let pb = e.path.as_bytes();
        if pb.len() > u16::MAX as usize {
            return Err(Error::Checkpoint(format!("path too long: {:?}", e.path)));
        }
        buf.extend_from_slice(&(pb.len() as u16).to_le_bytes());
        buf.extend_from_slice(pb);
        buf.push(e.shape.len() as u8);
        for &d in &e.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        buf.extend_from_slice(&(e.values.len() as u64).to_le_bytes());
        for v in &e.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(file, &buf).map_err(|e| Error::io(file.display().to_string(), e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "truncated archive while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(file: &Path) -> Result<Vec<CheckpointEntry>> {
    let buf = fs::read(file).map_err(|e| Error::io(file.display().to_string(), e))?;
    let mut r = Reader { buf: &buf, pos: 0 };

    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint archive (bad magic)",
            file.display()
        )));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let count = r.u32("count")? as usize;
    let mut entries = Vec::with_capacity(count);
    let mut prev_path: Option<String> = None;
    for _ in 0..count {
        let plen = r.u16("path length")? as usize;
        let path = std::str::from_utf8(r.take(plen, "path")?)
            .map_err(|_| Error::Checkpoint("non-utf8 parameter path".into()))?
            .to_string();
        if let Some(prev) = &prev_path {
            if *prev >= path {
                return Err(Error::Checkpoint(format!(
                    "paths out of order: {prev:?} then {path:?}"
                )));
            }
        }
        let ndim = r.take(1, "ndim")?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("dim")? as usize);
        }
        let n = r.u64("value count")? as usize;
        let expected: usize = shape.iter().product();
        if n != expected {
            return Err(Error::Checkpoint(format!(
                "entry {path:?}: shape {shape:?} disagrees with value count {n}"
            )));
        }
        let raw = r.take(n * 8, "values")?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        prev_path = Some(path.clone());
        entries.push(CheckpointEntry { path, shape, values });
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after last entry",
            buf.len() - r.pos
        )));
    }
    Ok(entries)
}

/// Snapshot of a parameter group as checkpoint entries (no meta entries).
pub fn collect_entries(group: &dyn ParamGroup) -> Vec<CheckpointEntry> {
    let mut entries = Vec::new();
    group.visit("", &mut |path, t| {
        entries.push(CheckpointEntry {
            path: path.to_string(),
            shape: t.shape().to_vec(),
            values: t.values().to_vec(),
        });
    });
    entries
}

/// Copies checkpoint entries into a parameter group by path.
///
/// Entries under `meta.` are skipped (they describe architecture, not
/// weights). Every group parameter must be present with a matching shape,
/// and no weight entry may be left over — any mismatch is a checkpoint
/// error naming the offending path.
pub fn restore_params(group: &mut dyn ParamGroup, entries: &[CheckpointEntry]) -> Result<()> {
    let by_path: std::collections::BTreeMap<&str, &CheckpointEntry> =
        entries.iter().map(|e| (e.path.as_str(), e)).collect();
    let mut used: std::collections::BTreeSet<&str> = std::collections::BTreeSet::new();
    let mut failure: Option<Error> = None;
    group.visit_mut("", &mut |path, t| {
        if failure.is_some() {
            return;
        }
        match by_path.get(path) {
            None => {
                failure = Some(Error::Checkpoint(format!(
                    "checkpoint is missing parameter {path:?}"
                )));
            }
            Some(e) => {
                if e.shape != t.shape() {
                    failure = Some(Error::Checkpoint(format!(
                        "parameter {path:?} has shape {:?} in the checkpoint but {:?} in the model",
                        e.shape,
                        t.shape()
                    )));
                    return;
                }
                t.values_mut().copy_from_slice(&e.values);
                used.insert(by_path.get_key_value(path).unwrap().0);
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    for e in entries {
        if !e.path.starts_with("meta.") && !used.contains(e.path.as_str()) {
            return Err(Error::Checkpoint(format!(
                "checkpoint carries unexpected parameter {:?}",
                e.path
            )));
        }
    }
    Ok(())
}
