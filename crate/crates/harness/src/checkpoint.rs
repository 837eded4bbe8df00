//! Binary checkpoints. All integers are little-endian.
//!
//! ```text
//! b"MUNRCKPT"  u32 version  u32 len + config JSON
//! u32 param count, then per param:
//!     u16 len + name  u8 dtype  u8 ndims  u32 dims...  raw values
//! u32 epoch  u32 len + rng state
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use mapunetr_core::{DType, MapUNetR, Scalar};

use crate::config::RunConfig;
use crate::error::{io_err, HarnessError, Result};

pub const MAGIC: &[u8; 8] = b"MUNRCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamRecord {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Little-endian values, exactly `numel · dtype size` bytes.
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: Vec<ParamRecord>,
    pub epoch: u32,
    pub rng_state: Vec<u8>,
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(
        model: &MapUNetR<T>,
        config: &RunConfig,
        epoch: u32,
        rng_state: Vec<u8>,
    ) -> Self {
        let params = model
            .parameters()
            .into_iter()
            .map(|p| {
                let data = p.tensor.data();
                let mut bytes = Vec::with_capacity(data.len() * T::DTYPE.size_in_bytes());
                data.iter().for_each(|&v| v.write_le(&mut bytes));
                ParamRecord {
                    name: p.name,
                    dtype: T::DTYPE,
                    shape: p.tensor.shape().to_vec(),
                    bytes,
                }
            })
            .collect();
        Checkpoint {
            config: config.clone(),
            params,
            epoch,
            rng_state,
        }
    }

    /// Rebuilds the model. Fails without side effects if any parameter is
    /// missing, extra, or of the wrong type or shape.
    pub fn to_model<T: Scalar>(&self) -> Result<MapUNetR<T>> {
        let model = MapUNetR::<T>::new(self.config.model.clone(), 0)?;
        let params = model.parameters();
        if params.len() != self.params.len() {
            return Err(HarnessError::Format(format!(
                "checkpoint has {} tensors, model expects {}",
                self.params.len(),
                params.len()
            )));
        }
        let size = T::DTYPE.size_in_bytes();
        for (p, rec) in params.iter().zip(&self.params) {
            if p.name != rec.name
                || p.tensor.shape() != rec.shape.as_slice()
                || rec.dtype != T::DTYPE
            {
                return Err(HarnessError::Format(format!(
                    "tensor {} ({:?} {:?}) does not fit model tensor {} ({:?} {:?})",
                    rec.name,
                    rec.dtype,
                    rec.shape,
                    p.name,
                    T::DTYPE,
                    p.tensor.shape()
                )));
            }
            let mut data = p.tensor.data_mut();
            for (v, chunk) in data.iter_mut().zip(rec.bytes.chunks_exact(size)) {
                *v = T::read_le(chunk);
            }
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        let json = serde_json::to_vec(&self.config).expect("config serializes");
        put_u32(&mut out, json.len() as u32);
        out.extend_from_slice(&json);
        put_u32(&mut out, self.params.len() as u32);
        for p in &self.params {
            out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.push(p.dtype.code());
            out.push(p.shape.len() as u8);
            for &d in &p.shape {
                put_u32(&mut out, d as u32);
            }
            out.extend_from_slice(&p.bytes);
        }
        put_u32(&mut out, self.epoch);
        put_u32(&mut out, self.rng_state.len() as u32);
        out.extend_from_slice(&self.rng_state);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(HarnessError::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version > VERSION {
            return Err(HarnessError::Version {
                found: version,
                supported: VERSION,
            });
        }
        let len = r.u32()? as usize;
        let config: RunConfig = serde_json::from_slice(r.take(len)?)
            .map_err(|e| HarnessError::Format(format!("checkpoint config: {e}")))?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| HarnessError::Format("parameter name is not UTF-8".into()))?;
            let code = r.take(1)?[0];
            let dtype = DType::from_code(code).ok_or_else(|| {
                HarnessError::Format(format!("unknown dtype code {code} for {name}"))
            })?;
            let ndims = r.take(1)?[0] as usize;
            let shape = (0..ndims)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let bytes = r.take(numel * dtype.size_in_bytes())?.to_vec();
            params.push(ParamRecord {
                name,
                dtype,
                shape,
                bytes,
            });
        }
        let epoch = r.u32()?;
        let rng_len = r.u32()? as usize;
        let rng_state = r.take(rng_len)?.to_vec();
        if r.pos != bytes.len() {
            return Err(HarnessError::Format(format!(
                "{} trailing bytes after checkpoint",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            config,
            params,
            epoch,
            rng_state,
        })
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(&self.to_bytes())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)
            .map_err(|e| HarnessError::Format(format!("reading checkpoint: {e}")))?;
        Self::from_bytes(&buf)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(io_err(path))?)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                HarnessError::Format(format!("truncated checkpoint at byte {}", self.pos))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use mapunetr_core::ModelConfig;

    fn tiny_ckpt() -> Checkpoint {
        let cfg = RunConfig {
            model: ModelConfig::tiny(),
            ..Default::default()
        };
        let model = MapUNetR::<f32>::new(cfg.model.clone(), 5).unwrap();
        Checkpoint::from_model(&model, &cfg, 3, vec![1, 2, 3])
    }

    #[test]
    fn bytes_roundtrip() {
        let c = tiny_ckpt();
        assert_eq!(Checkpoint::from_bytes(&c.to_bytes()).unwrap(), c);
    }

    #[test]
    fn header_layout() {
        let b = tiny_ckpt().to_bytes();
        assert_eq!(&b[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 1);
    }

    #[test]
    fn corrupt_inputs() {
        let mut b = tiny_ckpt().to_bytes();
        let good = b.clone();
        b[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&b),
            Err(HarnessError::Format(_))
        ));
        let mut v = good.clone();
        v[8] = 2;
        assert!(matches!(
            Checkpoint::from_bytes(&v),
            Err(HarnessError::Version { found: 2, .. })
        ));
        for cut in [4, 20, good.len() / 2, good.len() - 1] {
            assert!(matches!(
                Checkpoint::from_bytes(&good[..cut]),
                Err(HarnessError::Format(_))
            ));
        }
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        assert!(tiny_ckpt().to_model::<f64>().is_err());
    }
}
