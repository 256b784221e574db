use std::collections::HashSet;
use std::fs;
use std::path::Path;

use featlens_tensor::{ParamSet, Tensor};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"FLNS";
pub const VERSION: u32 = 1;

pub type NamedTensors = Vec<(String, Tensor)>;

/// Serializes named tensors: magic, version, count, then per entry a
/// u16-prefixed UTF-8 name, u8 rank, u32 dims and f32 payload, all
/// little-endian.
pub fn encode(entries: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(entries.len()).map_err(|_| Error::config("too many checkpoint entries"))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in entries {
        if !seen.insert(name.as_str()) {
            return Err(Error::DuplicateEntry(name.clone()));
        }
        let len = u16::try_from(name.len()).map_err(|_| Error::config(format!("entry name `{name}` is too long")))?;
        let rank = u8::try_from(t.rank()).map_err(|_| Error::config(format!("entry `{name}` has too many axes")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::config(format!("entry `{name}` axis too long")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.at.checked_add(n)?;
        let s = self.bytes.get(self.at..end)?;
        self.at = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode(bytes: &[u8]) -> Result<NamedTensors> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4) != Some(MAGIC.as_slice()) {
        return Err(Error::NotCheckpoint);
    }
    let version = r.u32().ok_or(Error::NotCheckpoint)?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = r.u32().ok_or(Error::NotCheckpoint)?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for i in 0..count {
        let unnamed = || Error::TruncatedEntry(format!("#{i}"));
        let len = r.take(2).map(|b| u16::from_le_bytes([b[0], b[1]])).ok_or_else(unnamed)?;
        let name = r.take(len as usize).ok_or_else(unnamed)?;
        let name = String::from_utf8(name.to_vec()).map_err(|_| Error::config(format!("entry #{i} name is not UTF-8")))?;
        let truncated = || Error::TruncatedEntry(name.clone());
        let rank = r.take(1).ok_or_else(truncated)?[0];
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(r.u32().ok_or_else(truncated)? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(truncated)?;
        let payload = r.take(numel.checked_mul(4).ok_or_else(truncated)?).ok_or_else(truncated)?;
        if !seen.insert(name.clone()) {
            return Err(Error::DuplicateEntry(name));
        }
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.at != bytes.len() {
        return Err(Error::config("trailing bytes after the last checkpoint entry"));
    }
    Ok(out)
}

pub fn save_checkpoint(entries: &[(String, Tensor)], path: &Path) -> Result<()> {
    let bytes = encode(entries)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<NamedTensors> {
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Parameters of `params` under `prefix`.
pub fn param_entries(params: &ParamSet, prefix: &str) -> NamedTensors {
    params
        .iter()
        .map(|p| (format!("{prefix}{}", p.name), p.value.clone()))
        .collect()
}

/// Collects the entries under `prefix` into a fresh parameter set.
pub fn params_from_entries(entries: &[(String, Tensor)], prefix: &str) -> Result<ParamSet> {
    let mut ps = ParamSet::new();
    for (name, t) in entries {
        if let Some(rest) = name.strip_prefix(prefix) {
            ps.insert(rest, t.clone())?;
        }
    }
    if ps.is_empty() {
        return Err(Error::MissingEntry(format!("{prefix}*")));
    }
    Ok(ps)
}

/// Overwrites every parameter of `params` from the entries under `prefix`;
/// shapes must match and no parameter may be missing.
pub fn load_into(params: &mut ParamSet, entries: &[(String, Tensor)], prefix: &str) -> Result<()> {
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let key = format!("{prefix}{name}");
        let t = entries
            .iter()
            .find(|(n, _)| *n == key)
            .ok_or_else(|| Error::MissingEntry(key.clone()))?;
        params.set(&name, t.1.clone())?;
    }
    Ok(())
}
