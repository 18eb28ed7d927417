//! Binary checkpoint codec.
//!
//! Layout:
//!
//! ```text
//! DSQ1\n
//! params <count>\n
//! <name> <f64|f32> <d0>,<d1>,...\n     one line per parameter, sorted by name
//! end\n
//! <little-endian row-major payloads in header order>
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DSQ1";

/// Refuse to allocate beyond this many scalars per tensor when decoding.
const MAX_SCALARS: usize = 1 << 28;
const MAX_PARAMS: usize = 1 << 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F64,
    F32,
}

impl Dtype {
    fn as_str(self) -> &'static str {
        match self {
            Dtype::F64 => "f64",
            Dtype::F32 => "f32",
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }
}

pub fn encode(store: &ParamStore, dtype: Dtype) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(b'\n');
    out.extend_from_slice(format!("params {}\n", store.len()).as_bytes());
    for p in store.sorted() {
        let dims: Vec<String> = p.value.shape().iter().map(usize::to_string).collect();
        out.extend_from_slice(format!("{} {} {}\n", p.name, dtype.as_str(), dims.join(",")).as_bytes());
    }
    out.extend_from_slice(b"end\n");
    for p in store.sorted() {
        for &v in p.value.data() {
            match dtype {
                Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
                Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            }
        }
    }
    out
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn take_line<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    let rest = &bytes[*pos..];
    let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("truncated header"))?;
    *pos += end + 1;
    std::str::from_utf8(&rest[..end]).map_err(|_| bad("header is not UTF-8"))
}

pub fn decode(bytes: &[u8]) -> Result<ParamStore> {
    if bytes.len() < 5 || &bytes[..4] != MAGIC || bytes[4] != b'\n' {
        return Err(bad("missing DSQ1 magic"));
    }
    let mut pos = 5;
    let count_line = take_line(bytes, &mut pos)?;
    let count: usize = count_line
        .strip_prefix("params ")
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| bad(format!("expected `params <n>`, got `{count_line}`")))?;
    if count > MAX_PARAMS {
        return Err(bad(format!("too many parameters: {count}")));
    }

    let mut entries = Vec::with_capacity(count);
    let mut prev: Option<String> = None;
    for _ in 0..count {
        let line = take_line(bytes, &mut pos)?;
        let mut fields = line.split(' ');
        let (Some(name), Some(dtype), Some(dims), None) = (fields.next(), fields.next(), fields.next(), fields.next()) else {
            return Err(bad(format!("malformed entry `{line}`")));
        };
        if name.is_empty() {
            return Err(bad("empty parameter name"));
        }
        if prev.as_deref().is_some_and(|p| p >= name) {
            return Err(bad(format!("entries not in sorted order at `{name}`")));
        }
        let dtype = match dtype {
            "f64" => Dtype::F64,
            "f32" => Dtype::F32,
            other => return Err(bad(format!("unknown dtype `{other}`"))),
        };
        let shape: Vec<usize> = dims
            .split(',')
            .map(|d| d.parse::<usize>().ok().filter(|&d| d > 0))
            .collect::<Option<_>>()
            .ok_or_else(|| bad(format!("bad shape `{dims}` for `{name}`")))?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= MAX_SCALARS)
            .ok_or_else(|| bad(format!("shape too large for `{name}`")))?;
        prev = Some(name.to_string());
        entries.push((name.to_string(), dtype, shape, n));
    }
    if take_line(bytes, &mut pos)? != "end" {
        return Err(bad("missing `end` after header"));
    }

    let mut store = ParamStore::new();
    for (name, dtype, shape, n) in entries {
        let w = dtype.width();
        let len = n.checked_mul(w).ok_or_else(|| bad("payload size overflow"))?;
        let chunk = bytes.get(pos..pos + len).ok_or_else(|| bad(format!("truncated payload for `{name}`")))?;
        pos += len;
        let data = chunk
            .chunks_exact(w)
            .map(|c| match dtype {
                Dtype::F64 => f64::from_le_bytes(c.try_into().expect("8 bytes")),
                Dtype::F32 => f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64,
            })
            .collect();
        store.insert(name, Tensor::new(shape, data)?)?;
    }
    if pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - pos)));
    }
    Ok(store)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(store, Dtype::F64))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamStore> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}
