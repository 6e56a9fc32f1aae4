//! Checkpoint files:
//!
//! ```text
//! "ICAC" | u32 version | u32 config_len | config (UTF-8 key=value lines)
//! u32 tensor_count | per tensor: u32 name_len | name | u8 rank | u32 extents[rank] | f32 data
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use super::{Architecture, ModelConfig, ParamStore};
use crate::binio::{put_u32, to_u32, ByteReader};
use crate::error::{Error, Result};
use crate::ops::CorrSpec;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ICAC";
pub const CHECKPOINT_VERSION: u32 = 1;

fn config_text(c: &ModelConfig) -> String {
    let [d, h, w] = c.extents;
    format!(
        "n={}\nm={}\nu={}\nstem_channels={}\nmax_disp={}\nnum_classes={}\nd={d}\nh={h}\nw={w}\ngroups={}\n",
        c.n, c.m, c.u, c.stem_channels, c.corr.max_disp, c.num_classes, c.groups
    )
}

fn parse_config(text: &str) -> std::result::Result<ModelConfig, String> {
    let mut c = ModelConfig::default();
    let mut seen = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| format!("malformed line {line:?}"))?;
        let v: usize = v.trim().parse().map_err(|_| format!("bad value for {k}"))?;
        match k.trim() {
            "n" => c.n = v,
            "m" => c.m = v,
            "u" => c.u = v,
            "stem_channels" => c.stem_channels = v,
            "max_disp" => c.corr = CorrSpec::new(v),
            "num_classes" => c.num_classes = v,
            "d" => c.extents[0] = v,
            "h" => c.extents[1] = v,
            "w" => c.extents[2] = v,
            "groups" => c.groups = v,
            other => return Err(format!("unknown key {other}")),
        }
        seen.push(k.trim().to_string());
    }
    for key in ["n", "m", "u", "stem_channels", "max_disp", "num_classes", "d", "h", "w", "groups"] {
        if !seen.iter().any(|s| s == key) {
            return Err(format!("missing key {key}"));
        }
    }
    Ok(c)
}

pub fn write_checkpoint(config: &ModelConfig, store: &ParamStore<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    let text = config_text(config);
    put_u32(&mut out, to_u32(text.len(), "config length")?);
    out.extend_from_slice(text.as_bytes());
    let tensors: Vec<_> = store.tensors().collect();
    put_u32(&mut out, to_u32(tensors.len(), "tensor count")?);
    for (name, t) in tensors {
        put_u32(&mut out, to_u32(name.len(), "name length")?);
        out.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(t.rank()).map_err(|_| Error::shape(format!("{name} has rank {}", t.rank())))?;
        out.push(rank);
        for &e in t.shape() {
            put_u32(&mut out, to_u32(e, "extent")?);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parse a checkpoint and check its tensors against the architecture of
/// the embedded config.
pub fn read_checkpoint(bytes: &[u8]) -> Result<(ModelConfig, ParamStore<f32>)> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(CHECKPOINT_MAGIC)?;
    let at = r.offset();
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(at, format!("unsupported checkpoint version {version}")));
    }
    let len = r.u32("config length")? as usize;
    let at = r.offset();
    let text = std::str::from_utf8(r.take(len, "config")?).map_err(|e| Error::format(at, e.to_string()))?;
    let config = parse_config(text).map_err(|e| Error::format(at, e))?;
    let arch = Architecture::new(&config).map_err(|e| Error::format(at, format!("invalid config: {e}")))?;

    let count = r.u32("tensor count")?;
    let mut store = ParamStore::default();
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let at = r.offset();
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|e| Error::format(at, e.to_string()))?
            .to_string();
        let at = r.offset();
        let rank = r.u8("rank")? as usize;
        if rank == 0 {
            return Err(Error::format(at, format!("{name} has rank 0")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("extent")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::format(at, format!("{name} has invalid extents {shape:?}")))?;
        let data = r.f32s(numel, "tensor data")?;
        store.insert(name, Tensor::new(shape, data).expect("size checked"));
    }
    r.finish()?;
    store
        .check(&arch)
        .map_err(|e| Error::format(r.offset(), format!("checkpoint does not match its config: {e}")))?;
    Ok((config, store))
}

pub fn save_checkpoint(path: impl AsRef<Path>, config: &ModelConfig, store: &ParamStore<f32>) -> Result<()> {
    fs::write(path, write_checkpoint(config, store)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelConfig, ParamStore<f32>)> {
    read_checkpoint(&fs::read(path)?)
}
