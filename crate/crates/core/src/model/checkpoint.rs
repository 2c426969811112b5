//! Binary checkpoints.
//!
//! Layout (little-endian): magic `EVDXCKPT`, `u32` version, `u64` length of
//! the model-config JSON, the JSON, `u64` parameter count, the `f64`
//! parameters, then a `u8` flag followed (when set) by the optimizer state
//! as a `u64` step count and the `m` and `v` moment vectors.

use std::fs;
use std::path::Path;

use super::optim::OptimizerState;
use super::{ModelConfig, ModelParameters};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"EVDXCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParameters,
    pub optimizer: Option<OptimizerState>,
}

fn put_f64s(buf: &mut Vec<u8>, xs: &[f64]) {
    buf.extend(xs.iter().flat_map(|v| v.to_le_bytes()));
}

pub fn save(
    path: &Path,
    params: &ModelParameters,
    optimizer: Option<&OptimizerState>,
) -> Result<()> {
    let config = serde_json::to_vec(params.config())?;
    let mut buf = Vec::with_capacity(32 + config.len() + 8 * params.len() * 3);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(config.len() as u64).to_le_bytes());
    buf.extend_from_slice(&config);
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    put_f64s(&mut buf, &params.values);
    match optimizer {
        Some(s) => {
            buf.push(1);
            buf.extend_from_slice(&(s.step as u64).to_le_bytes());
            put_f64s(&mut buf, &s.m);
            put_f64s(&mut buf, &s.v);
        }
        None => buf.push(0),
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let len = n
            .checked_mul(8)
            .ok_or_else(|| Error::Checkpoint("parameter count overflows".into()))?;
        Ok(self
            .take(len)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let clen = r.u64()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(clen)?)?;
    let n = r.u64()? as usize;
    let values = r.f64s(n)?;
    let params = ModelParameters::from_values(config, values)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let optimizer = match r.take(1)?[0] {
        0 => None,
        1 => {
            let step = r.u64()? as usize;
            let m = r.f64s(n)?;
            let v = r.f64s(n)?;
            Some(OptimizerState { step, m, v })
        }
        f => return Err(Error::Checkpoint(format!("bad optimizer flag {f}"))),
    };
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(Checkpoint { params, optimizer })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EncoderConfig, ModelConfig};

    #[test]
    fn roundtrip_with_and_without_optimizer() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig::detection([8, 8, 8], EncoderConfig::desk(&[4, 8])).with_mc_heads(2);
        let p = ModelParameters::init(cfg, 7).unwrap();
        let path = dir.path().join("a.ckpt");
        save(&path, &p, None).unwrap();
        let c = load(&path).unwrap();
        assert_eq!(c.params, p);
        assert!(c.optimizer.is_none());

        let mut st = OptimizerState::new(p.len());
        st.step = 12;
        st.m[3] = 0.25;
        save(&path, &p, Some(&st)).unwrap();
        assert_eq!(load(&path).unwrap().optimizer, Some(st));

        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 5);
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));
        fs::write(&path, b"not a checkpoint").unwrap();
        assert!(load(&path).is_err());
    }
}
