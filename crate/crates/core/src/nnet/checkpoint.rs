//! Versioned binary checkpoint container. All integers and floats are
//! little-endian.
//!
//! ```text
//! magic        8 bytes  "GVINET\0\0"
//! version      u32      currently 1
//! head         u32      0 = regression, 1 = segmentation
//! in_channels  u32
//! input_height u32
//! input_width  u32
//! n_blocks     u32
//! channels     u32 x n_blocks
//! n_tensors    u32
//! per tensor:  rank u32, dims u32 x rank, values f32 x prod(dims)
//! ```

use super::{ConvNet, Head, NetConfig, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"GVINET\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(net: &ConvNet) -> Vec<u8> {
    let cfg = net.config();
    let mut out = Vec::with_capacity(64 + 4 * net.param_count());
    out.extend_from_slice(MAGIC);
    let put = |v: u32, out: &mut Vec<u8>| out.extend_from_slice(&v.to_le_bytes());
    put(CHECKPOINT_VERSION, &mut out);
    put(
        match cfg.head {
            Head::Regression => 0,
            Head::Segmentation => 1,
        },
        &mut out,
    );
    put(cfg.in_channels as u32, &mut out);
    put(cfg.input_height as u32, &mut out);
    put(cfg.input_width as u32, &mut out);
    put(cfg.blocks.len() as u32, &mut out);
    for &c in &cfg.blocks {
        put(c as u32, &mut out);
    }
    put(net.params().len() as u32, &mut out);
    for t in net.params() {
        put(t.shape().len() as u32, &mut out);
        for &d in t.shape() {
            put(d as u32, &mut out);
        }
        for v in t.data() {
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
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Load("checkpoint is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<ConvNet> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Load("not a network checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Load(format!("unsupported checkpoint version {version}")));
    }
    let head = match r.u32()? {
        0 => Head::Regression,
        1 => Head::Segmentation,
        other => return Err(Error::Load(format!("unknown head kind {other}"))),
    };
    let in_channels = r.u32()? as usize;
    let input_height = r.u32()? as usize;
    let input_width = r.u32()? as usize;
    let n_blocks = r.u32()? as usize;
    if n_blocks > 64 {
        return Err(Error::Load(format!("implausible block count {n_blocks}")));
    }
    let blocks = (0..n_blocks).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    let config = NetConfig {
        in_channels,
        input_height,
        input_width,
        blocks,
        head,
    };
    let n_tensors = r.u32()? as usize;
    let mut params = Vec::with_capacity(n_tensors.min(256));
    for _ in 0..n_tensors {
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(Error::Load(format!("implausible tensor rank {rank}")));
        }
        let shape = (0..rank).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Load("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        params.push(Tensor::new(shape, data).map_err(|e| Error::Load(e.to_string()))?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Load("trailing bytes after checkpoint".into()));
    }
    ConvNet::from_parts(config, params).map_err(|e| match e {
        Error::Load(m) => Error::Load(m),
        other => Error::Load(other.to_string()),
    })
}

/// Loads a checkpoint and checks it was built for `expected`.
pub fn load_checkpoint_expecting(bytes: &[u8], expected: &NetConfig) -> Result<ConvNet> {
    let net = load_checkpoint(bytes)?;
    if net.config() != expected {
        return Err(Error::Load(format!(
            "checkpoint config {:?} does not match expected {:?}",
            net.config(),
            expected
        )));
    }
    Ok(net)
}
