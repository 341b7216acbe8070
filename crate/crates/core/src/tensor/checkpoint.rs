//! Binary tensor container.
//!
//! Layout: `b"FAPW"`, version `u32`, tensor count `u32`, then per tensor a
//! `u16` name length, UTF-8 name, `u8` rank, `u32` extents and the fp32
//! payload. All integers and floats are little-endian.

use std::io::{Read, Write};
use std::path::Path;

use super::{Elem, ParamStore, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FAPW";
pub const VERSION: u32 = 1;

const STEP_KEY: &str = "adamw.step";
const M_PREFIX: &str = "adamw.m/";
const V_PREFIX: &str = "adamw.v/";

pub fn encode(tensors: &[(String, Tensor<f32>)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let nb = name.as_bytes();
        let len: u16 = nb
            .len()
            .try_into()
            .map_err(|_| Error::Data(format!("tensor name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(nb);
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Data("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Data("bad checkpoint magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Data(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Data("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.take(1)?[0] as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let bytes = r.take(n * 4)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    if r.pos != buf.len() {
        return Err(Error::Data("trailing bytes after checkpoint".into()));
    }
    Ok(out)
}

pub fn write(path: &Path, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
    let bytes = encode(tensors)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    decode(&buf)
}

/// Flattens a store (optionally with optimizer state) into named tensors.
pub fn store_tensors<T: Elem>(store: &ParamStore<T>, with_optimizer: bool) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut out = Vec::new();
    for (name, p) in store.iter() {
        out.push((name.to_string(), p.value.cast()));
    }
    if with_optimizer {
        out.push((STEP_KEY.into(), Tensor::scalar(store.step() as f32)));
        for (name, p) in store.iter() {
            let shape = p.value.shape();
            let cast = |v: &[T]| v.iter().map(|x| x.as_f64() as f32).collect::<Vec<_>>();
            out.push((format!("{M_PREFIX}{name}"), Tensor::new(shape, cast(&p.m))?));
            out.push((format!("{V_PREFIX}{name}"), Tensor::new(shape, cast(&p.v))?));
        }
    }
    Ok(out)
}

/// Loads tensors into an existing store whose parameter set must match.
pub fn load_into<T: Elem>(store: &mut ParamStore<T>, tensors: Vec<(String, Tensor<f32>)>) -> Result<()> {
    let mut seen = 0;
    let mut moments = Vec::new();
    for (name, t) in tensors {
        if name == STEP_KEY {
            store.set_step(t.data()[0] as u64);
        } else if name.starts_with(M_PREFIX) || name.starts_with(V_PREFIX) {
            moments.push((name, t));
        } else {
            store
                .set(&name, t.cast())
                .map_err(|e| Error::Data(format!("checkpoint does not match model: {e}")))?;
            seen += 1;
        }
    }
    if seen != store.len() {
        return Err(Error::Data(format!(
            "checkpoint holds {seen} parameters, model has {}",
            store.len()
        )));
    }
    for (name, t) in moments {
        let (key, first) = match name.strip_prefix(M_PREFIX) {
            Some(k) => (k, true),
            None => (&name[V_PREFIX.len()..], false),
        };
        let p = store
            .param_mut(key)
            .ok_or_else(|| Error::Data(format!("optimizer state for unknown parameter {key}")))?;
        if t.numel() != p.value.numel() {
            return Err(Error::Data(format!("optimizer state size mismatch for {key}")));
        }
        let vals: Vec<T> = t.data().iter().map(|&x| T::of(x as f64)).collect();
        if first {
            p.m = vals;
        } else {
            p.v = vals;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::new(&[2], vec![1.0f32, -2.5]).unwrap();
        let bytes = encode(&[("ab".into(), t)]).unwrap();
        let mut want = b"FAPW".to_vec();
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u16.to_le_bytes());
        want.extend_from_slice(b"ab");
        want.push(1);
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn corrupt_input_rejected() {
        assert!(decode(b"NOPE").is_err());
        let t = Tensor::new(&[3], vec![1.0f32, 2.0, 3.0]).unwrap();
        let bytes = encode(&[("x".into(), t)]).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn optimizer_state_survives_reload() {
        let mut s = ParamStore::<f32>::new();
        s.insert("w", Tensor::new(&[2], vec![0.5, 1.5]).unwrap()).unwrap();
        let grads = [("w".to_string(), vec![0.1f32, -0.2])].into();
        s.adamw_step(&grads, &Default::default()).unwrap();
        let bytes = encode(&store_tensors(&s, true).unwrap()).unwrap();

        let mut fresh = ParamStore::<f32>::new();
        fresh.insert("w", Tensor::zeros(&[2])).unwrap();
        load_into(&mut fresh, decode(&bytes).unwrap()).unwrap();
        assert_eq!(fresh.step(), 1);
        assert_eq!(fresh.get("w"), s.get("w"));
        assert_eq!(fresh.param("w").unwrap().m, s.param("w").unwrap().m);
        assert_eq!(fresh.param("w").unwrap().v, s.param("w").unwrap().v);
    }
}
