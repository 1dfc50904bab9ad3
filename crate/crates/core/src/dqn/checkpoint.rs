//! Binary policy checkpoints.
//!
//! Layout, all little-endian: magic `NSTQ`, `u32` version, `u32` layer count
//! `L`, `L + 1` `u32` layer widths, then for each layer its `f32` weights
//! (row-major, outputs x inputs) followed by its `f32` biases.

use std::path::Path;

use thiserror::Error;

use super::mlp::{Layer, Mlp};

pub const MAGIC: [u8; 4] = *b"NSTQ";
pub const VERSION: u32 = 1;

/// Upper bound on parameters accepted from a file.
const MAX_PARAMS: usize = 1 << 28;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a policy checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {VERSION})")]
    Version { found: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint network has shape {found:?}, expected input {input} and output {output}")]
    Shape {
        found: Vec<usize>,
        input: usize,
        output: usize,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn encode(net: &Mlp<f32>) -> Vec<u8> {
    let dims = net.dims();
    let mut out = Vec::with_capacity(12 + 4 * dims.len() + 4 * net.param_count());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(net.layers.len() as u32).to_le_bytes());
    for d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for p in net.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

struct Reader<'a>(&'a [u8]);

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], CheckpointError> {
        if self.0.len() < n {
            return Err(CheckpointError::Corrupt("truncated".into()));
        }
        let (head, rest) = self.0.split_at(n);
        self.0 = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, CheckpointError> {
        let bytes = self.take(n * 4)?;
        let v: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(CheckpointError::Corrupt("non-finite parameter".into()));
        }
        Ok(v)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Mlp<f32>, CheckpointError> {
    let mut r = Reader(bytes);
    if r.take(4).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version { found: version });
    }
    let n_layers = r.u32()? as usize;
    if n_layers == 0 || n_layers > 64 {
        return Err(CheckpointError::Corrupt(format!("{n_layers} layers")));
    }
    let mut dims = Vec::with_capacity(n_layers + 1);
    for _ in 0..=n_layers {
        let d = r.u32()? as usize;
        if d == 0 {
            return Err(CheckpointError::Corrupt("zero-width layer".into()));
        }
        dims.push(d);
    }
    let mut total = 0usize;
    for w in dims.windows(2) {
        total = w[0]
            .checked_mul(w[1])
            .and_then(|x| x.checked_add(w[1]))
            .and_then(|x| x.checked_add(total))
            .filter(|&t| t <= MAX_PARAMS)
            .ok_or_else(|| CheckpointError::Corrupt("network too large".into()))?;
    }
    if r.0.len() != total * 4 {
        return Err(CheckpointError::Corrupt(format!(
            "expected {} parameter bytes, found {}",
            total * 4,
            r.0.len()
        )));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for w in dims.windows(2) {
        let (inputs, outputs) = (w[0], w[1]);
        layers.push(Layer {
            inputs,
            outputs,
            w: r.f32s(inputs * outputs)?,
            b: r.f32s(outputs)?,
        });
    }
    Ok(Mlp { layers })
}

pub fn save(net: &Mlp<f32>, path: &Path) -> Result<(), CheckpointError> {
    std::fs::write(path, encode(net))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Mlp<f32>, CheckpointError> {
    decode(&std::fs::read(path)?)
}
