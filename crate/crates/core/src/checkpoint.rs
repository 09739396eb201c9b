//! Byte codec for named `f32` tensors.
//!
//! Layout, all little-endian: `b"PHIN"`, `u32` version, `u32` tensor count,
//! then per tensor `u32` name length, UTF-8 name, `u32` rank, `u64` dims and
//! the `f32` payload.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PHIN";
pub const VERSION: u32 = 1;

pub fn encode(tensors: &[(String, Tensor<f32>)]) -> Result<Vec<u8>> {
    let mut seen = BTreeSet::new();
    let payload: usize = tensors.iter().map(|(n, t)| 8 + n.len() + 8 * t.shape().len() + 4 * t.numel()).sum();
    let mut out = Vec::with_capacity(12 + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        if !seen.insert(name.as_str()) {
            return Err(Error::format(format!("duplicate tensor name {name}")));
        }
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(format!("truncated checkpoint while reading {what} at byte {}", self.pos))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format("bad checkpoint magic"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32("tensor count")? as usize;
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name =
            core::str::from_utf8(r.take(len, "name")?).map_err(|_| Error::format("tensor name is not UTF-8"))?.into();
        if !seen.insert(String::clone(&name)) {
            return Err(Error::format(format!("duplicate tensor name {name}")));
        }
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(r.u64("dims")? as usize);
        }
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let bytes = n.and_then(|n| n.checked_mul(4)).ok_or_else(|| Error::format("tensor size overflows"))?;
        let raw = r.take(bytes, "payload")?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::format(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
    }
    Ok(out)
}

/// Every parameter of a store, in registration order.
pub fn named_tensors(store: &ParamStore<f32>) -> Vec<(String, Tensor<f32>)> {
    store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect()
}

/// Overwrites store values from decoded tensors; every store parameter must
/// be present with a matching shape.
pub fn restore(store: &mut ParamStore<f32>, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = &store.get(id).name;
        let Some((_, t)) = tensors.iter().find(|(n, _)| n == name) else {
            return Err(Error::format(format!("checkpoint is missing {name}")));
        };
        if t.shape() != store.value(id).shape() {
            return Err(Error::format(format!(
                "{name}: checkpoint shape {:?}, model shape {:?}",
                t.shape(),
                store.value(id).shape()
            )));
        }
        store.get_mut(id).value = t.clone();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn sample() -> Vec<(String, Tensor<f32>)> {
        vec![
            ("a.weight".into(), Tensor::new(&[2, 3], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5, 1e-30, -7.25]).unwrap()),
            ("b".into(), Tensor::new(&[0], vec![]).unwrap()),
            ("c".into(), Tensor::new(&[1, 2, 1], vec![0.1, 0.2]).unwrap()),
        ]
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let t = sample();
        let back = decode(&encode(&t).unwrap()).unwrap();
        assert_eq!(back.len(), t.len());
        for ((n0, t0), (n1, t1)) in t.iter().zip(&back) {
            assert_eq!(n0, n1);
            assert_eq!(t0.shape(), t1.shape());
            let b0: Vec<u32> = t0.data().iter().map(|x| x.to_bits()).collect();
            let b1: Vec<u32> = t1.data().iter().map(|x| x.to_bits()).collect();
            assert_eq!(b0, b1);
        }
    }

    #[test]
    fn bad_magic() {
        let mut b = encode(&sample()).unwrap();
        b[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode(&b), Err(Error::Format(_))));
    }

    #[test]
    fn truncation_and_trailing_bytes() {
        let b = encode(&sample()).unwrap();
        for cut in [3, 10, b.len() - 1] {
            assert!(matches!(decode(&b[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
        let mut extra = b.clone();
        extra.push(0);
        assert!(matches!(decode(&extra), Err(Error::Format(_))));
    }

    #[test]
    fn duplicate_names() {
        let mut t = sample();
        t.push(("b".into(), Tensor::zeros(&[1])));
        assert!(matches!(encode(&t), Err(Error::Format(_))));
        // hand-built duplicate on the decode side
        let one = encode(&[("x".into(), Tensor::zeros(&[1]))]).unwrap();
        let mut dup = one.clone();
        dup[8..12].copy_from_slice(&2u32.to_le_bytes());
        dup.extend_from_slice(&one[12..]);
        assert!(matches!(decode(&dup), Err(Error::Format(_))));
    }
}
