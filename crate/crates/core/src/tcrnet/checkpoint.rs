//! Binary checkpoint ("DHCK"), little-endian:
//!
//! ```text
//! magic "DHCK" | version u16 = 1 | dim u32 | heads u32 | dropout f64
//! stream mask u8 (bit 0 = T, 1 = R, 2 = I)
//! flow count u8, per flow: query tag u8, context tag u8, w_q w_k w_v w_o
//! head count u8, per head: task u8 (0 = dh, 1 = target, 2 = intensity), weight, bias
//! tensor: ndim u8, ndim × u32 dims, f64 payload row-major
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use super::attention::AttentionParams;
use super::model::{ClassifierHead, FlowParams, TcrNetParams};
use super::{Flow, ModelError, StreamSet, Task};
use crate::data::Stream;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DHCK";
const VERSION: u16 = 1;

fn corrupt(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

fn put_tensor(out: &mut Vec<u8>, dims: &[usize], data: &[f64]) {
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn write_checkpoint<W: Write>(mut w: W, params: &TcrNetParams) -> Result<(), ModelError> {
    params.validate()?;
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.dim as u32).to_le_bytes());
    out.extend_from_slice(&(params.heads as u32).to_le_bytes());
    out.extend_from_slice(&params.dropout.to_le_bytes());
    out.push(params.streams.bits());
    out.push(params.flows.len() as u8);
    for fp in &params.flows {
        out.push(fp.flow.query.tag());
        out.push(fp.flow.context.tag());
        for m in fp.attn.matrices() {
            put_tensor(&mut out, m.shape(), m.as_slice().expect("standard layout"));
        }
    }
    out.push(params.classifiers.len() as u8);
    for c in &params.classifiers {
        out.push(c.task.code());
        put_tensor(&mut out, c.weight.shape(), c.weight.as_slice().expect("standard layout"));
        put_tensor(&mut out, c.bias.shape(), c.bias.as_slice().expect("standard layout"));
    }
    w.write_all(&out)?;
    Ok(())
}

struct Cursor<'a>(&'a [u8]);

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], ModelError> {
        if self.0.len() < n {
            return Err(corrupt("unexpected end of checkpoint"));
        }
        let (head, tail) = self.0.split_at(n);
        self.0 = tail;
        Ok(head)
    }
    fn u8(&mut self) -> Result<u8, ModelError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, ModelError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn f64(&mut self) -> Result<f64, ModelError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn tensor(&mut self) -> Result<(Vec<usize>, Vec<f64>), ModelError> {
        let ndim = self.u8()?;
        let dims = (0..ndim).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let len = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| corrupt("tensor too large"))?;
        let bytes = self.take(len.checked_mul(8).ok_or_else(|| corrupt("tensor too large"))?)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok((dims, data))
    }
    fn matrix(&mut self) -> Result<Array2<f64>, ModelError> {
        match self.tensor()? {
            (dims, data) if dims.len() == 2 => {
                Array2::from_shape_vec((dims[0], dims[1]), data).map_err(|e| corrupt(e.to_string()))
            }
            (dims, _) => Err(corrupt(format!("expected matrix, got {} dims", dims.len()))),
        }
    }
    fn vector(&mut self) -> Result<Array1<f64>, ModelError> {
        match self.tensor()? {
            (dims, data) if dims.len() == 1 => Ok(Array1::from(data)),
            (dims, _) => Err(corrupt(format!("expected vector, got {} dims", dims.len()))),
        }
    }
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<TcrNetParams, ModelError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut c = Cursor(&bytes);
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = c.u16()?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let dim = c.u32()? as usize;
    let heads = c.u32()? as usize;
    let dropout = c.f64()?;
    let streams = StreamSet::from_bits(c.u8()?).ok_or_else(|| corrupt("bad stream mask"))?;
    let n_flows = c.u8()?;
    let mut flows = Vec::with_capacity(usize::from(n_flows));
    for _ in 0..n_flows {
        let stream = |t: u8| Stream::from_tag(t).ok_or_else(|| corrupt(format!("bad stream tag {t}")));
        let flow = Flow {
            query: stream(c.u8()?)?,
            context: stream(c.u8()?)?,
        };
        let attn = AttentionParams {
            w_q: c.matrix()?,
            w_k: c.matrix()?,
            w_v: c.matrix()?,
            w_o: c.matrix()?,
            heads,
        };
        flows.push(FlowParams { flow, attn });
    }
    let n_heads = c.u8()?;
    let mut classifiers = Vec::with_capacity(usize::from(n_heads));
    for _ in 0..n_heads {
        let code = c.u8()?;
        let task = Task::from_code(code).ok_or_else(|| corrupt(format!("bad task code {code}")))?;
        classifiers.push(ClassifierHead {
            task,
            weight: c.matrix()?,
            bias: c.vector()?,
        });
    }
    if !c.0.is_empty() {
        return Err(corrupt("trailing bytes"));
    }
    let params = TcrNetParams {
        dim,
        heads,
        dropout,
        streams,
        flows,
        classifiers,
    };
    params.validate()?;
    Ok(params)
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &TcrNetParams) -> Result<(), ModelError> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, params)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TcrNetParams, ModelError> {
    read_checkpoint(fs::File::open(path)?)
}
