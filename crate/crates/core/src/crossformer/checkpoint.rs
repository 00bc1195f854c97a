//! Little-endian "SCKP" checkpoint: hyperparameters, init seed and every
//! named parameter tensor.

use std::fs;
use std::path::Path;

use super::{CrossformerKan, ModelConfig, ModelError};
use crate::autodiff::Tensor;
use crate::kan::{HeadKind, SPLINE_ORDER};
use crate::nn::ParamStore;

pub const CKPT_MAGIC: [u8; 4] = *b"SCKP";
pub const CKPT_VERSION: u16 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn write_checkpoint(model: &CrossformerKan) -> Vec<u8> {
    let c = &model.cfg;
    let mut out = Vec::new();
    out.extend_from_slice(&CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    let (tag, neurons, grid) = match c.head {
        HeadKind::Linear => (0, 0, 0),
        HeadKind::Kan { neurons, grid } => (1, neurons, grid),
    };
    for v in [
        c.n_inputs,
        c.n_outputs,
        c.t_len,
        c.seg_len,
        c.d_model,
        c.n_heads,
        c.n_levels,
        c.n_routers,
        c.d_ff,
        tag,
        neurons,
        grid,
        SPLINE_ORDER,
    ] {
        put_u32(&mut out, v);
    }
    out.extend_from_slice(&model.seed.to_le_bytes());
    write_params(&model.params, &mut out);
    out
}

/// Appends `count, (name_len u16, name, rank u8, dims u32.., data f64..)*`.
pub(crate) fn write_params(store: &ParamStore, out: &mut Vec<u8>) {
    put_u32(out, store.len());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            put_u32(out, d);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub(crate) struct Cursor<'a> {
    pub buf: &'a [u8],
    pub pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.buf.len() - self.pos < n {
            return Err(ModelError::Truncated { at: self.buf.len() });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8, ModelError> {
        Ok(self.bytes(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, ModelError> {
        Ok(u16::from_le_bytes(self.bytes(2)?.try_into().expect("2 bytes")))
    }

    pub fn u32(&mut self) -> Result<usize, ModelError> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().expect("4 bytes")) as usize)
    }

    pub fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }

    pub fn f64(&mut self) -> Result<f64, ModelError> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }
}

/// Reads a parameter block and checks it against `layout` name by name.
pub(crate) fn read_params(cur: &mut Cursor<'_>, layout: &ParamStore) -> Result<ParamStore, ModelError> {
    let count = cur.u32()?;
    if count != layout.len() {
        return Err(ModelError::Mismatch(format!(
            "{count} tensors stored, model has {}",
            layout.len()
        )));
    }
    let mut store = layout.clone();
    for (i, expected) in layout.names().iter().enumerate() {
        let len = cur.u16()? as usize;
        let name = String::from_utf8_lossy(cur.bytes(len)?).into_owned();
        if &name != expected {
            return Err(ModelError::Mismatch(format!("tensor {i} is {name:?}, expected {expected:?}")));
        }
        let rank = cur.u8()? as usize;
        let shape = (0..rank).map(|_| cur.u32()).collect::<Result<Vec<_>, _>>()?;
        let want = layout.tensors()[i].shape();
        if shape != want {
            return Err(ModelError::Mismatch(format!("{name}: shape {shape:?}, expected {want:?}")));
        }
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| cur.f64()).collect::<Result<Vec<_>, _>>()?;
        store.tensors_mut()[i] = Tensor::new(shape, data)?;
    }
    Ok(store)
}

pub fn read_checkpoint(buf: &[u8]) -> Result<CrossformerKan, ModelError> {
    let mut cur = Cursor { buf, pos: 0 };
    let magic: [u8; 4] = cur.bytes(4)?.try_into().expect("4 bytes");
    if magic != CKPT_MAGIC {
        return Err(ModelError::BadMagic(magic));
    }
    let version = cur.u16()?;
    if version != CKPT_VERSION {
        return Err(ModelError::VersionMismatch {
            found: version,
            expected: CKPT_VERSION,
        });
    }
    let mut f = [0usize; 13];
    for v in f.iter_mut() {
        *v = cur.u32()?;
    }
    let head = match f[9] {
        0 => HeadKind::Linear,
        1 => HeadKind::Kan {
            neurons: f[10],
            grid: f[11],
        },
        t => return Err(ModelError::Mismatch(format!("unknown head tag {t}"))),
    };
    if f[12] != SPLINE_ORDER {
        return Err(ModelError::Mismatch(format!("spline order {} unsupported", f[12])));
    }
    let cfg = ModelConfig {
        n_inputs: f[0],
        n_outputs: f[1],
        t_len: f[2],
        seg_len: f[3],
        d_model: f[4],
        n_heads: f[5],
        n_levels: f[6],
        n_routers: f[7],
        d_ff: f[8],
        head,
    };
    let seed = cur.u64()?;
    let mut model = CrossformerKan::new(cfg, seed)?;
    model.params = read_params(&mut cur, &model.params)?;
    if cur.pos != buf.len() {
        return Err(ModelError::Mismatch(format!("{} trailing bytes", buf.len() - cur.pos)));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &CrossformerKan, path: impl AsRef<Path>) -> Result<(), ModelError> {
    fs::write(path, write_checkpoint(model))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<CrossformerKan, ModelError> {
    read_checkpoint(&fs::read(path)?)
}
