//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "TOWERCK\0" | u32 version | u32 len + JSON model config
//! u64 step | u32 param count
//! per param: u32 len + name | u8 owner | u32 rank | u64 dims...
//! u8 flags (bit 0: optimizer moments present)
//! per param: f32 values; then all m; then all v when flagged
//! ```
//!
//! Values are stored as `f32`, so an `f32` state round-trips bit for bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, TowerError};
use crate::nn::model::UNetConfig;
use crate::nn::state::{ModelState, Owner, Param};
use crate::nn::tensor::Tensor;
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"TOWERCK\0";
const VERSION: u32 = 1;
const FLAG_MOMENTS: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<S> {
    pub config: UNetConfig,
    pub state: ModelState<S>,
}

fn write_tensor<W: Write, S: Scalar>(w: &mut W, t: &Tensor<S>) -> Result<()> {
    let mut buf = Vec::with_capacity(t.len() * 4);
    for v in t.data() {
        buf.extend_from_slice(&v.as_f32().to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn write_checkpoint<W: Write, S: Scalar>(
    w: &mut W,
    cfg: &UNetConfig,
    st: &ModelState<S>,
    moments: bool,
) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let text = serde_json::to_vec(cfg).map_err(|e| TowerError::Format(e.to_string()))?;
    w.write_all(&(text.len() as u32).to_le_bytes())?;
    w.write_all(&text)?;
    w.write_all(&st.step.to_le_bytes())?;
    w.write_all(&(st.len() as u32).to_le_bytes())?;
    for p in st.params() {
        w.write_all(&(p.name.len() as u32).to_le_bytes())?;
        w.write_all(p.name.as_bytes())?;
        w.write_all(&[p.owner.code()])?;
        w.write_all(&(p.value.shape().len() as u32).to_le_bytes())?;
        for &d in p.value.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
    }
    w.write_all(&[if moments { FLAG_MOMENTS } else { 0 }])?;
    for p in st.params() {
        write_tensor(w, &p.value)?;
    }
    if moments {
        for p in st.params() {
            write_tensor(w, &p.m)?;
        }
        for p in st.params() {
            write_tensor(w, &p.v)?;
        }
    }
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| TowerError::Format(format!("truncated checkpoint: {e}")))?;
        Ok(buf)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn tensor<S: Scalar>(&mut self, shape: &[usize]) -> Result<Tensor<S>> {
        let n: usize = shape.iter().product();
        let raw = self.bytes(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| S::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        Tensor::new(shape.to_vec(), data)
    }
}

const MAX_NAME: u32 = 1 << 12;
const MAX_RANK: u32 = 8;

pub fn read_checkpoint<S: Scalar, R: Read>(r: R) -> Result<Checkpoint<S>> {
    let mut r = Reader { inner: r };
    if r.bytes(8)? != MAGIC {
        return Err(TowerError::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(TowerError::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let len = r.u32()?;
    if len > 1 << 16 {
        return Err(TowerError::Format("config block too large".into()));
    }
    let config: UNetConfig = serde_json::from_slice(&r.bytes(len as usize)?)
        .map_err(|e| TowerError::Format(format!("config: {e}")))?;
    let step = r.u64()?;
    let count = r.u32()?;
    let mut manifest = Vec::new();
    for _ in 0..count {
        let len = r.u32()?;
        if len > MAX_NAME {
            return Err(TowerError::Format("parameter name too long".into()));
        }
        let name = String::from_utf8(r.bytes(len as usize)?)
            .map_err(|_| TowerError::Format("name is not UTF-8".into()))?;
        let owner = Owner::from_code(r.u8()?)?;
        let rank = r.u32()?;
        if rank > MAX_RANK {
            return Err(TowerError::Format(format!(
                "parameter `{name}` has rank {rank}"
            )));
        }
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        manifest.push((name, owner, shape));
    }
    let flags = r.u8()?;
    let values = manifest
        .iter()
        .map(|(_, _, s)| r.tensor::<S>(s))
        .collect::<Result<Vec<_>>>()?;
    let (ms, vs) = if flags & FLAG_MOMENTS != 0 {
        let ms = manifest
            .iter()
            .map(|(_, _, s)| r.tensor::<S>(s))
            .collect::<Result<Vec<_>>>()?;
        let vs = manifest
            .iter()
            .map(|(_, _, s)| r.tensor::<S>(s))
            .collect::<Result<Vec<_>>>()?;
        (ms, vs)
    } else {
        let z: Vec<_> = manifest.iter().map(|(_, _, s)| Tensor::zeros(s)).collect();
        (z.clone(), z)
    };
    let mut extra = [0u8; 1];
    if r.inner.read(&mut extra)? != 0 {
        return Err(TowerError::Format("trailing bytes after checkpoint".into()));
    }
    let mut state = ModelState::new();
    for (((name, owner, _), value), (m, v)) in
        manifest.into_iter().zip(values).zip(ms.into_iter().zip(vs))
    {
        let id = state.push(name, owner, value)?;
        let p: &mut Param<S> = state.get_mut(id);
        p.m = m;
        p.v = v;
    }
    state.step = step;
    Ok(Checkpoint { config, state })
}

pub fn save_checkpoint<S: Scalar>(path: &Path, cfg: &UNetConfig, st: &ModelState<S>) -> Result<()> {
    let f = File::create(path).map_err(|e| TowerError::file(path, e))?;
    let mut w = BufWriter::new(f);
    write_checkpoint(&mut w, cfg, st, true)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<Checkpoint<S>> {
    let f = File::open(path).map_err(|e| TowerError::file(path, e))?;
    read_checkpoint(BufReader::new(f))
}
