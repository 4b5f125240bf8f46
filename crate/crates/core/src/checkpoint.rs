//! Binary tensor containers.
//!
//! Checkpoint (`AMMN`): magic, version u32, entry count u32, then per entry
//! name length u16, UTF-8 name, rank u8, u32 extents and f32 values, all
//! little-endian. Training state (`AMST`) has the same layout with a dtype byte
//! after the version (0 = f32, 1 = f64) and values in that precision, so an
//! f64 run can be resumed without rounding.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AMMN";
pub const STATE_MAGIC: &[u8; 4] = b"AMST";
pub const FORMAT_VERSION: u32 = 1;

type Entries<T> = Vec<(String, Tensor<T>)>;

fn put_entry(out: &mut Vec<u8>, name: &str, shape: &[usize]) -> Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| Error::Data(format!("tensor name too long: {name}")))?;
    let rank = u8::try_from(shape.len()).map_err(|_| Error::Data(format!("rank of `{name}` exceeds 255")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(rank);
    for &e in shape {
        let e = u32::try_from(e).map_err(|_| Error::Data(format!("extent of `{name}` exceeds u32")))?;
        out.extend_from_slice(&e.to_le_bytes());
    }
    Ok(())
}

fn header(magic: &[u8; 4], dtype: Option<u8>, count: usize) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend(dtype);
    let count = u32::try_from(count).map_err(|_| Error::Data("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    Ok(out)
}

/// Serialize `(name, tensor)` pairs in the checkpoint format. Values are stored as f32.
pub fn encode_checkpoint<T: Real>(entries: &[(String, Tensor<T>)]) -> Result<Vec<u8>> {
    let mut out = header(CHECKPOINT_MAGIC, None, entries.len())?;
    for (name, t) in entries {
        put_entry(&mut out, name, t.shape())?;
        for v in t.data() {
            out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Serialize in the training-state format at full precision of `T`.
pub fn encode_state<T: Real>(entries: &[(String, Tensor<T>)]) -> Result<Vec<u8>> {
    let wide = std::mem::size_of::<T>() == 8;
    let mut out = header(STATE_MAGIC, Some(u8::from(wide)), entries.len())?;
    for (name, t) in entries {
        put_entry(&mut out, name, t.shape())?;
        for v in t.data() {
            if wide {
                out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
            } else {
                out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!(
                    "truncated while reading {what}: need {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

fn decode<T: Real>(bytes: &[u8], magic: &[u8; 4], has_dtype: bool) -> Result<Entries<T>> {
    let mut r = Reader { bytes, pos: 0 };
    let m = r.take(4, "magic")?;
    if m != magic {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad magic {m:?}, expected {:?}", std::str::from_utf8(magic).unwrap_or("?")),
        });
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Version(format!("container version {version}, expected {FORMAT_VERSION}")));
    }
    let wide = if has_dtype {
        match r.u8("dtype")? {
            0 => false,
            1 => true,
            other => {
                return Err(Error::Format {
                    offset: 8,
                    msg: format!("unknown dtype code {other}"),
                })
            }
        }
    } else {
        false
    };
    let count = r.u32("entry count")?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let at = r.pos;
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Format {
                offset: at as u64,
                msg: "tensor name is not UTF-8".into(),
            })?
            .to_string();
        let rank = r.u8("rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.u32("extent").map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let width = if wide { 8 } else { 4 };
        let raw = r.take(n * width, &format!("values of `{name}`"))?;
        let data = if wide {
            raw.chunks_exact(8)
                .map(|c| T::from_f64_lossy(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
                .collect()
        } else {
            raw.chunks_exact(4)
                .map(|c| T::from_f64_lossy(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
                .collect()
        };
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            msg: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok(out)
}

pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<Entries<T>> {
    decode(bytes, CHECKPOINT_MAGIC, false)
}

pub fn decode_state<T: Real>(bytes: &[u8]) -> Result<Entries<T>> {
    decode(bytes, STATE_MAGIC, true)
}

/// Every entry of the store (parameters and buffers) in registration order.
pub fn store_entries<T: Real>(store: &ParamStore<T>) -> Entries<T> {
    store
        .iter()
        .map(|(_, name, e)| (name.to_string(), e.value.clone()))
        .collect()
}

/// Overwrite store values from named tensors; every store entry must be present with its shape.
pub fn load_entries<T: Real>(store: &mut ParamStore<T>, entries: &[(String, Tensor<T>)]) -> Result<()> {
    let ids: Vec<_> = store.iter().map(|(id, name, _)| (id, name.to_string())).collect();
    for (id, name) in ids {
        let t = entries
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Data(format!("checkpoint lacks `{name}`")))?;
        if t.shape() != store.get(id).shape() {
            return Err(Error::Data(format!(
                "`{name}` has shape {:?} in the checkpoint but {:?} in the model",
                t.shape(),
                store.get(id).shape()
            )));
        }
        *store.get_mut(id) = t.clone();
    }
    Ok(())
}

pub fn save_checkpoint<T: Real>(path: &Path, store: &ParamStore<T>) -> Result<()> {
    let bytes = encode_checkpoint(&store_entries(store))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint<T: Real>(path: &Path) -> Result<Entries<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

pub fn save_state<T: Real>(path: &Path, entries: &[(String, Tensor<T>)]) -> Result<()> {
    let bytes = encode_state(entries)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_state<T: Real>(path: &Path) -> Result<Entries<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_state(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Entries<f32> {
        vec![
            ("a.weight".into(), Tensor::from_fn([2, 3], |i| (i as f32 * 0.3).sin())),
            ("a.bias".into(), Tensor::from_fn([3], |i| -(i as f32) * 1e-7)),
            ("step".into(), Tensor::scalar(12.0)),
        ]
    }

    #[test]
    fn checkpoint_round_trip() {
        let e = sample();
        let bytes = encode_checkpoint(&e).unwrap();
        let back = decode_checkpoint::<f32>(&bytes).unwrap();
        assert_eq!(back, e);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn state_keeps_f64() {
        let e: Entries<f64> = vec![("x".into(), Tensor::from_fn([4], |i| 0.1 * i as f64 + 1e-15))];
        let back = decode_state::<f64>(&encode_state(&e).unwrap()).unwrap();
        assert_eq!(back, e);
    }

    #[test]
    fn corruption_is_reported() {
        let bytes = encode_checkpoint(&sample()).unwrap();
        let err = decode_checkpoint::<f32>(&bytes[..bytes.len() - 2]).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(decode_checkpoint::<f32>(&bad), Err(Error::Version(_))));
        assert!(matches!(decode_state::<f32>(&bytes), Err(Error::Format { offset: 0, .. })));
    }
}
