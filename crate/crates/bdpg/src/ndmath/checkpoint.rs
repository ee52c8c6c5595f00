//! Binary checkpoints for parameters and optimizer state.
//!
//! The format is deliberately simple and fully little-endian so a
//! save → load → save cycle reproduces identical bytes: a magic tag and
//! version, then every parameter (name, shape, f32 data) in store order,
//! then every optimizer (label, coefficients, step, moment buffers).

use std::fs;
use std::path::Path;

use super::adam::Slot;
use super::{Adam, Array, NdError, ParamStore};

const MAGIC: &[u8; 8] = b"BDPGCKPT";
const VERSION: u32 = 1;

fn io_err(path: &Path, err: std::io::Error) -> NdError {
    NdError::Io {
        path: path.display().to_string(),
        message: err.to_string(),
    }
}

/// Write `store` and the labelled optimizers to `path`, atomically
/// (write to a sibling temp file, then rename).
pub fn save_checkpoint(
    path: &Path,
    store: &ParamStore,
    optimizers: &[(&str, &Adam)],
) -> Result<(), NdError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());

    buf.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for (name, value, _) in store.iter() {
        write_str(&mut buf, name);
        buf.extend_from_slice(&(value.shape().len() as u64).to_le_bytes());
        for &dim in value.shape() {
            buf.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for &x in value.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }

    buf.extend_from_slice(&(optimizers.len() as u64).to_le_bytes());
    for (label, adam) in optimizers {
        write_str(&mut buf, label);
        buf.extend_from_slice(&adam.beta1.to_le_bytes());
        buf.extend_from_slice(&adam.beta2.to_le_bytes());
        buf.extend_from_slice(&adam.eps.to_le_bytes());
        buf.extend_from_slice(&adam.step_count().to_le_bytes());
        let slots = adam.slots_ref();
        buf.extend_from_slice(&(slots.len() as u64).to_le_bytes());
        for slot in slots {
            write_str(&mut buf, &slot.name);
            buf.extend_from_slice(&(slot.m.len() as u64).to_le_bytes());
            for &x in &slot.m {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            for &x in &slot.v {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
    }

    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, &buf).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

/// Read a checkpoint back into a fresh store plus labelled optimizers.
pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, Vec<(String, Adam)>), NdError> {
    let buf = fs::read(path).map_err(|e| io_err(path, e))?;
    let mut r = Reader { buf: &buf, pos: 0 };

    let magic = r.bytes(8)?;
    if magic != MAGIC {
        return Err(NdError::Corrupt {
            message: "bad magic tag".to_string(),
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(NdError::Corrupt {
            message: format!("unsupported version {version}"),
        });
    }

    let mut store = ParamStore::new();
    let num_params = r.u64()? as usize;
    for _ in 0..num_params {
        let name = r.string()?;
        let ndims = r.u64()? as usize;
        if ndims > 2 {
            return Err(NdError::Corrupt {
                message: format!("parameter {name} has {ndims} axes"),
            });
        }
        let mut shape = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            shape.push(r.u64()? as usize);
        }
        let len: usize = shape.iter().product();
        let data = r.f32s(len)?;
        let array = Array::from_vec(&shape, data).map_err(|e| NdError::Corrupt {
            message: format!("parameter {name}: {e}"),
        })?;
        store.add(&name, array)?;
    }

    let mut optimizers = Vec::new();
    let num_opts = r.u64()? as usize;
    for _ in 0..num_opts {
        let label = r.string()?;
        let beta1 = r.f64()?;
        let beta2 = r.f64()?;
        let eps = r.f64()?;
        let step = r.u64()?;
        let num_slots = r.u64()? as usize;
        let mut slots = Vec::with_capacity(num_slots);
        for _ in 0..num_slots {
            let name = r.string()?;
            let len = r.u64()? as usize;
            let m = r.f32s(len)?;
            let v = r.f32s(len)?;
            if !store.contains(&name) {
                return Err(NdError::Corrupt {
                    message: format!("optimizer slot {name} has no parameter"),
                });
            }
            slots.push(Slot { name, m, v });
        }
        optimizers.push((label, Adam::from_parts(beta1, beta2, eps, step, slots)));
    }

    if r.pos != buf.len() {
        return Err(NdError::Corrupt {
            message: format!("{} trailing bytes", buf.len() - r.pos),
        });
    }
    Ok((store, optimizers))
}

fn write_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u64).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8], NdError> {
        if self.pos + n > self.buf.len() {
            return Err(NdError::Corrupt {
                message: "unexpected end of file".to_string(),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, NdError> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, NdError> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, NdError> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, NdError> {
        let raw = self.bytes(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn string(&mut self) -> Result<String, NdError> {
        let len = self.u64()? as usize;
        if len > 4096 {
            return Err(NdError::Corrupt {
                message: format!("name length {len} is implausible"),
            });
        }
        let raw = self.bytes(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| NdError::Corrupt {
            message: "name is not utf-8".to_string(),
        })
    }
}

impl Adam {
    fn step_count(&self) -> u64 {
        self.step
    }

    fn slots_ref(&self) -> &[Slot] {
        &self.slots
    }
}
