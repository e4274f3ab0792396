//! Binary weight checkpoints.
//!
//! Layout, all little-endian: the magic `FLNN1`, `u32` layer count `L`,
//! `L + 2` `u32` widths, `L` activation tags, one loss tag, then every weight
//! matrix row-major as `f64`.

use std::path::Path;

use ndarray::Array2;

use crate::divergence::ActivationKind;
use crate::error::{Error, Result};
use crate::network::{LossKind, NetworkSpec, Weights};

const MAGIC: &[u8; 5] = b"FLNN1";

pub fn encode(spec: &NetworkSpec, w: &Weights) -> Result<Vec<u8>> {
    w.check(spec)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(spec.hidden_layers() as u32).to_le_bytes());
    for &p in spec.widths() {
        out.extend_from_slice(&(p as u32).to_le_bytes());
    }
    out.extend(spec.activations().iter().map(|a| a.tag()));
    out.push(spec.loss().tag());
    for m in &w.mats {
        for &v in m.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.at)))?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

pub fn decode(bytes: &[u8]) -> Result<(NetworkSpec, Weights)> {
    let mut r = Reader { buf: bytes, at: 0 };
    if r.take(MAGIC.len()).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Checkpoint("missing FLNN1 header".into()));
    }
    let layers = r.u32()? as usize;
    if layers == 0 || layers > 1024 {
        return Err(Error::Checkpoint(format!("implausible layer count {layers}")));
    }
    let widths = (0..layers + 2).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    let acts = (0..layers)
        .map(|_| {
            let t = r.u8()?;
            ActivationKind::from_tag(t).ok_or_else(|| Error::Checkpoint(format!("unknown activation tag {t}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let t = r.u8()?;
    let loss = LossKind::from_tag(t).ok_or_else(|| Error::Checkpoint(format!("unknown loss tag {t}")))?;
    let spec = NetworkSpec::new(widths, acts, loss).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut mats = Vec::with_capacity(layers + 1);
    for l in 0..=layers {
        let (rows, cols) = spec.weight_shape(l);
        let count = rows
            .checked_mul(cols)
            .and_then(|c| c.checked_mul(8))
            .ok_or_else(|| Error::Checkpoint("layer size overflows".into()))?;
        let raw = r.take(count)?;
        let vals = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        mats.push(Array2::from_shape_vec((rows, cols), vals).expect("sized buffer"));
    }
    if r.at != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.at)));
    }
    Ok((spec, Weights { mats }))
}

pub fn save(path: &Path, spec: &NetworkSpec, w: &Weights) -> Result<()> {
    std::fs::write(path, encode(spec, w)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(NetworkSpec, Weights)> {
    decode(&std::fs::read(path)?)
}
