//! Binary checkpoint.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PARCKPT1"  u32 version
//! u32 len, config text (UTF-8)
//! u32 count, then per tensor: u16 len, name, u8 dtype (0 = f32),
//!     u8 ndim, u32 dims[ndim], f32 payload
//! u8 has_stats [u32 channels, f64 mean[c], f64 std[c]]
//! u8 has_optimizer [u64 step, u32 count, (shape, m payload, v payload)...]
//! ```

use std::path::Path;

use par_tensor::{OptimizerState, ParamStore, Scalar, Tensor};

use crate::codec::LatentStats;
use crate::error::{ParError, Result};

pub const MAGIC: &[u8; 8] = b"PARCKPT1";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub config: String,
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub stats: Option<LatentStats>,
    /// Moments in the order of the tensors whose names start with `par.`.
    pub optimizer: Option<OptimizerState<f32>>,
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.at < n {
            return Err(ParError::format(self.path, format!("truncated at byte {}", self.at)));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self, len: usize) -> Result<String> {
        let b = self.take(len)?;
        String::from_utf8(b.to_vec()).map_err(|_| ParError::format(self.path, "string is not UTF-8"))
    }

    fn shape(&mut self) -> Result<Vec<usize>> {
        let nd = self.u8()? as usize;
        (0..nd).map(|_| Ok(self.u32()? as usize)).collect()
    }

    fn payload(&mut self, shape: &[usize]) -> Result<Tensor<f32>> {
        let n: usize = shape.iter().product();
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| ParError::format(self.path, "tensor too large"))?)?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Tensor::new(shape, data)?)
    }
}

fn put_shape(out: &mut Vec<u8>, shape: &[usize]) {
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
}

fn put_payload(out: &mut Vec<u8>, t: &Tensor<f32>) {
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            put_shape(&mut out, t.shape());
            put_payload(&mut out, t);
        }
        match &self.stats {
            None => out.push(0),
            Some(s) => {
                out.push(1);
                out.extend_from_slice(&(s.mean.len() as u32).to_le_bytes());
                for v in s.mean.iter().chain(&s.std) {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        match &self.optimizer {
            None => out.push(0),
            Some(o) => {
                out.push(1);
                out.extend_from_slice(&o.step.to_le_bytes());
                out.extend_from_slice(&(o.m.len() as u32).to_le_bytes());
                for (m, v) in o.m.iter().zip(&o.v) {
                    put_shape(&mut out, m.shape());
                    put_payload(&mut out, m);
                    put_payload(&mut out, v);
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { buf: bytes, at: 0, path };
        if r.take(8).ok() != Some(MAGIC.as_slice()) {
            return Err(ParError::format(path, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(ParError::format(path, format!("checkpoint version {version}, expected {VERSION}")));
        }
        let len = r.u32()? as usize;
        let config = r.string(len)?;
        let count = r.u32()?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = r.string(len)?;
            let dtype = r.u8()?;
            if dtype != DTYPE_F32 {
                return Err(ParError::format(path, format!("tensor {name}: unknown dtype tag {dtype}")));
            }
            let shape = r.shape()?;
            tensors.push((name, r.payload(&shape)?));
        }
        let stats = match r.u8()? {
            0 => None,
            1 => {
                let c = r.u32()? as usize;
                let mean = (0..c).map(|_| r.f64()).collect::<Result<_>>()?;
                let std = (0..c).map(|_| r.f64()).collect::<Result<_>>()?;
                Some(LatentStats { mean, std })
            }
            f => return Err(ParError::format(path, format!("bad stats flag {f}"))),
        };
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let n = r.u32()?;
                let (mut m, mut v) = (Vec::new(), Vec::new());
                for _ in 0..n {
                    let shape = r.shape()?;
                    m.push(r.payload(&shape)?);
                    v.push(r.payload(&shape)?);
                }
                Some(OptimizerState { m, v, step })
            }
            f => return Err(ParError::format(path, format!("bad optimizer flag {f}"))),
        };
        if r.at != bytes.len() {
            return Err(ParError::format(path, format!("{} trailing bytes", bytes.len() - r.at)));
        }
        Ok(Checkpoint { config, tensors, stats, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        super::write_bytes(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&super::read_bytes(path)?, path)
    }

    /// Appends every parameter of `store`.
    pub fn push_params<T: Scalar>(&mut self, store: &ParamStore<T>) {
        for (_, name, t) in store.iter() {
            self.tensors.push((name.to_string(), t.cast()));
        }
    }

    /// Overwrites the parameters of `store` whose names start with
    /// `prefix`. Stored tensors under `prefix` that `store` lacks, and
    /// parameters of `store` under `prefix` missing here, are errors.
    pub fn restore_params<T: Scalar>(&self, store: &mut ParamStore<T>, prefix: &str) -> Result<()> {
        let ours: Vec<&(String, Tensor<f32>)> = self.tensors.iter().filter(|(n, _)| n.starts_with(prefix)).collect();
        let unknown: Vec<&str> = ours.iter().filter(|(n, _)| store.find(n).is_none()).map(|(n, _)| n.as_str()).collect();
        if !unknown.is_empty() {
            return Err(ParError::contract(format!("checkpoint has unknown tensors: {}", unknown.join(", "))));
        }
        let missing: Vec<String> = store
            .iter()
            .map(|(_, n, _)| n.to_string())
            .filter(|n| n.starts_with(prefix) && !ours.iter().any(|(m, _)| m == n))
            .collect();
        if !missing.is_empty() {
            return Err(ParError::contract(format!("checkpoint lacks tensors: {}", missing.join(", "))));
        }
        for (name, t) in ours {
            store.set(name, t.cast())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut store = ParamStore::<f32>::new();
        store.add("par.a", Tensor::from_fn(&[2, 3], |i| i as f32 * 0.1 - 0.25));
        store.add("par.b", Tensor::new(&[1], vec![f32::MIN_POSITIVE]).unwrap());
        let mut c = Checkpoint {
            config: "d_model = 64\n".into(),
            stats: Some(LatentStats { mean: vec![0.1, -0.2], std: vec![1.5, 0.7] }),
            ..Default::default()
        };
        c.push_params(&store);
        let mut opt = OptimizerState::new(&store);
        opt.step = 9;
        opt.m[0].data_mut()[1] = 3.0;
        c.optimizer = Some(opt);
        c
    }

    #[test]
    fn round_trip_bit_exact() {
        let c = sample();
        let bytes = c.encode();
        let d = Checkpoint::decode(&bytes, Path::new("x")).unwrap();
        assert_eq!(d, c);
        assert_eq!(d.encode(), bytes);
    }

    #[test]
    fn rejects_bad_version_and_truncation() {
        let mut bytes = sample().encode();
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 1], Path::new("x")).is_err());
        bytes[8] = 2;
        let e = Checkpoint::decode(&bytes, Path::new("x")).unwrap_err().to_string();
        assert!(e.contains("version 2"), "{e}");
    }

    #[test]
    fn unknown_tensors_are_listed() {
        let mut c = sample();
        c.tensors.push(("par.zzz".into(), Tensor::zeros(&[1])));
        let mut store = ParamStore::<f32>::new();
        store.add("par.a", Tensor::zeros(&[2, 3]));
        store.add("par.b", Tensor::zeros(&[1]));
        let e = c.restore_params(&mut store, "par.").unwrap_err().to_string();
        assert!(e.contains("par.zzz"), "{e}");
        c.tensors.pop();
        c.restore_params(&mut store, "par.").unwrap();
        assert_eq!(store.values()[0].data()[5], 0.25);
    }
}
