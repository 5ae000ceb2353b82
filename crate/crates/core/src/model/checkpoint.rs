//! `MGRCLCK1` checkpoints: magic, `u32` tensor count, then per tensor
//! `{u16 name length, name bytes, u8 rank, u32 dims…, f64 row-major data}`,
//! all little-endian.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{BatchNormParams, ConvBlock, Linear, ModelParams};
use crate::error::{Error, Result};
use crate::tensor_core::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"MGRCLCK1";

pub fn write_checkpoint(params: &ModelParams, mut w: impl Write) -> Result<()> {
    let tensors = params.named_tensors();
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[t.rank() as u8])?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    write_checkpoint(params, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(self.pos as u64, "truncated checkpoint"));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn read_checkpoint(mut r: impl Read) -> Result<ModelParams> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    if buf.len() < CHECKPOINT_MAGIC.len() || buf[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
        return Err(Error::format(0, "bad magic, not an MGRCLCK1 checkpoint"));
    }
    let mut rd = Reader {
        buf: &buf,
        pos: CHECKPOINT_MAGIC.len(),
    };
    let count = rd.u32()? as usize;
    let mut tensors: HashMap<String, (u64, Tensor)> = HashMap::new();
    for _ in 0..count {
        let start = rd.pos as u64;
        let name_len = rd.u16()? as usize;
        let name = std::str::from_utf8(rd.take(name_len)?)
            .map_err(|_| Error::format(start + 2, "tensor name is not UTF-8"))?
            .to_owned();
        let rank = rd.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(rd.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let bytes = rd.take(
            numel
                .checked_mul(8)
                .ok_or_else(|| Error::format(start, "tensor too large"))?,
        )?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::from_data(&shape, data).map_err(|e| Error::format(start, e.to_string()))?;
        if tensors.insert(name.clone(), (start, t)).is_some() {
            return Err(Error::format(start, format!("duplicate tensor {name}")));
        }
    }
    if rd.pos != buf.len() {
        return Err(Error::format(rd.pos as u64, "trailing bytes after the last tensor"));
    }
    assemble(tensors, buf.len() as u64)
}

struct Pool {
    tensors: HashMap<String, (u64, Tensor)>,
    end: u64,
}

impl Pool {
    fn take(&mut self, name: &str) -> Result<Tensor> {
        self.tensors
            .remove(name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::format(self.end, format!("checkpoint is missing {name}")))
    }

    fn bn(&mut self, prefix: &str) -> Result<BatchNormParams> {
        Ok(BatchNormParams {
            gamma: self.take(&format!("{prefix}.weight"))?,
            beta: self.take(&format!("{prefix}.bias"))?,
            running_mean: self.take(&format!("{prefix}.running_mean"))?,
            running_var: self.take(&format!("{prefix}.running_var"))?,
        })
    }

    fn linear(&mut self, prefix: &str) -> Result<Linear> {
        Ok(Linear {
            weight: self.take(&format!("{prefix}.weight"))?,
            bias: self.take(&format!("{prefix}.bias"))?,
        })
    }
}

fn assemble(tensors: HashMap<String, (u64, Tensor)>, end: u64) -> Result<ModelParams> {
    let mut pool = Pool { tensors, end };
    let blocks = (1..=super::BLOCK_FILTERS.len())
        .map(|i| {
            Ok(ConvBlock {
                kernels: pool.take(&format!("backbone.block{i}.conv.weight"))?,
                bn: pool.bn(&format!("backbone.block{i}.bn"))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let params = ModelParams {
        blocks,
        classifier: pool.linear("classifier")?,
        ss_fc1: pool.linear("ss_head.fc1")?,
        ss_bn: pool.bn("ss_head.bn")?,
        ss_fc2: pool.linear("ss_head.fc2")?,
    };
    if let Some((name, (offset, _))) = pool.tensors.into_iter().min_by_key(|(_, (o, _))| *o) {
        return Err(Error::format(offset, format!("unexpected tensor {name}")));
    }
    validate_shapes(&params).map_err(|e| Error::format(end, e.to_string()))?;
    Ok(params)
}

fn validate_shapes(p: &ModelParams) -> Result<()> {
    if p.blocks[0].kernels.rank() != 4 {
        return Err(Error::shape("first conv kernel must have rank 4"));
    }
    let reference = ModelParams::init(p.num_base_categories().max(2), p.input_channels(), 0)?;
    for ((name, got), (_, want)) in p.named_tensors().iter().zip(reference.named_tensors()) {
        if got.shape() != want.shape() {
            return Err(Error::shape(format!(
                "{name} has shape {:?}, expected {:?}",
                got.shape(),
                want.shape()
            )));
        }
    }
    Ok(())
}
