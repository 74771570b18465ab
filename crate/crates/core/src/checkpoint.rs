//! Binary checkpoints.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "SVSN" version
//! config_len  config bytes (key=value lines)
//! repeated until EOF:
//!   name_len name rank dims[rank] f32 values
//! ```

use std::path::Path;

use crate::attention::RenderMode;
use crate::error::{Error, Result};
use crate::network::{NetworkConfig, SvsNet};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"SVSN";
pub const VERSION: u32 = 1;

fn config_text(cfg: &NetworkConfig) -> String {
    format!(
        "base_channels={}\ndepth={}\ninput_size={}\naux_loss_weight={}\nseed={}\nrender_mode={}\n",
        cfg.base_channels,
        cfg.depth,
        cfg.input_size,
        cfg.aux_loss_weight,
        cfg.seed,
        cfg.render_mode
    )
}

fn parse_config(text: &str) -> Result<NetworkConfig> {
    let mut cfg = NetworkConfig::default();
    let bad = |line: &str| Error::Format(format!("checkpoint config line `{line}`"));
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| bad(line))?;
        match k {
            "base_channels" => cfg.base_channels = v.parse().map_err(|_| bad(line))?,
            "depth" => cfg.depth = v.parse().map_err(|_| bad(line))?,
            "input_size" => cfg.input_size = v.parse().map_err(|_| bad(line))?,
            "aux_loss_weight" => cfg.aux_loss_weight = v.parse().map_err(|_| bad(line))?,
            "seed" => cfg.seed = v.parse().map_err(|_| bad(line))?,
            "render_mode" => cfg.render_mode = v.parse::<RenderMode>().map_err(|_| bad(line))?,
            _ => return Err(bad(line)),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("fits in u32").to_le_bytes());
}

pub fn encode(net: &SvsNet<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = config_text(net.config());
    put_u32(&mut out, cfg.len());
    out.extend_from_slice(cfg.as_bytes());
    for (name, t) in net.param_names().iter().zip(net.params()) {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        let dims = t.shape().dims();
        put_u32(&mut out, dims.len());
        for d in dims {
            put_u32(&mut out, d);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end =
            end.ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn decode(bytes: &[u8]) -> Result<SvsNet<f32>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let len = r.u32()?;
    let text = std::str::from_utf8(r.take(len)?)
        .map_err(|_| Error::Format("config is not UTF-8".into()))?;
    let cfg = parse_config(text)?;
    let mut named = Vec::new();
    while !r.done() {
        let len = r.u32()?;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Format("name is not UTF-8".into()))?;
        let rank = r.u32()?;
        if rank != 4 {
            return Err(Error::Format(format!(
                "{name}: expected rank 4, found {rank}"
            )));
        }
        let d = [r.u32()?, r.u32()?, r.u32()?, r.u32()?];
        let shape = Shape::new(d[0], d[1], d[2], d[3]);
        let raw = r.take(
            shape
                .len()
                .checked_mul(4)
                .ok_or_else(|| Error::Format("tensor too large".into()))?,
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        named.push((name, Tensor::from_vec(shape, data)?));
    }
    SvsNet::from_parts(cfg, named)
}

pub fn save(path: &Path, net: &SvsNet<f32>) -> Result<()> {
    std::fs::write(path, encode(net)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<SvsNet<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
