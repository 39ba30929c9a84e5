//! Binary parameter snapshots.
//!
//! Layout (little-endian):
//! ```text
//! "GNTL" | version: u32 | layer_count: u32
//! per layer: fan_in: u32 | fan_out: u32 | activation: u32
//!            | weight: fan_in * fan_out f64 (row-major) | bias: fan_out f64
//! ```

use std::fs;
use std::path::Path;

use super::mlp::{Activation, Mlp};
use crate::error::{GentleError, Result};

pub const MAGIC: &[u8; 4] = b"GNTL";
pub const VERSION: u32 = 1;

pub fn encode_mlp(net: &Mlp) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + net.num_params() * 8 + net.num_layers() * 12);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(net.num_layers() as u32).to_le_bytes());
    for l in 0..net.num_layers() {
        let layer = net.layer(l);
        out.extend_from_slice(&(layer.fan_in as u32).to_le_bytes());
        out.extend_from_slice(&(layer.fan_out as u32).to_le_bytes());
        out.extend_from_slice(&layer.activation.code().to_le_bytes());
        for v in layer.weight.iter().chain(layer.bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64(&mut self) -> Option<f64> {
        self.take(8).map(|b| f64::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn decode_mlp(bytes: &[u8], origin: &Path) -> Result<Mlp> {
    let truncated = || GentleError::format(origin, "truncated snapshot");
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).ok_or_else(truncated)? != MAGIC {
        return Err(GentleError::format(origin, "bad magic, not a GNTL snapshot"));
    }
    let version = r.u32().ok_or_else(truncated)?;
    if version != VERSION {
        return Err(GentleError::SchemaVersion {
            expected: VERSION,
            found: version,
        });
    }
    let layers = r.u32().ok_or_else(truncated)? as usize;
    let mut dims = Vec::with_capacity(layers + 1);
    let mut acts = Vec::with_capacity(layers);
    let mut params = Vec::new();
    for l in 0..layers {
        let fan_in = r.u32().ok_or_else(truncated)? as usize;
        let fan_out = r.u32().ok_or_else(truncated)? as usize;
        let code = r.u32().ok_or_else(truncated)?;
        let act = Activation::from_code(code)
            .ok_or_else(|| GentleError::format(origin, format!("unknown activation code {code}")))?;
        if l == 0 {
            dims.push(fan_in);
        } else if dims[l] != fan_in {
            return Err(GentleError::format(origin, format!("layer {l} does not chain")));
        }
        dims.push(fan_out);
        acts.push(act);
        for _ in 0..fan_in * fan_out + fan_out {
            params.push(r.f64().ok_or_else(truncated)?);
        }
    }
    if r.pos != bytes.len() {
        return Err(GentleError::format(origin, "trailing bytes after last layer"));
    }
    Mlp::from_parts(dims, acts, params)
}

pub fn save_mlp(net: &Mlp, path: &Path) -> Result<()> {
    fs::write(path, encode_mlp(net)).map_err(|e| GentleError::io(path, e))
}

pub fn load_mlp(path: &Path) -> Result<Mlp> {
    let bytes = fs::read(path).map_err(|e| GentleError::io(path, e))?;
    decode_mlp(&bytes, path)
}
