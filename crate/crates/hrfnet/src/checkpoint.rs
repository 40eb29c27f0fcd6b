//! Versioned binary checkpoint container: model config, named weights
//! and buffers, epoch counter, and optional optimizer state.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{HrfNet, ModelConfig};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"HRFNETCK";
const VERSION: u32 = 1;

/// Adam moment estimates, parallel to the model's parameter list.
pub struct AdamSnapshot {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

pub struct Checkpoint {
    pub model: HrfNet,
    pub epoch: u64,
    pub optimizer: Option<AdamSnapshot>,
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_tensor(w: &mut impl Write, t: &Tensor) -> Result<()> {
    for d in t.shape() {
        write_u64(w, d as u64)?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn write_named(w: &mut impl Write, name: &str, t: &Tensor) -> Result<()> {
    write_u64(w, name.len() as u64)?;
    w.write_all(name.as_bytes())?;
    write_tensor(w, t)
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

fn read_tensor(r: &mut impl Read) -> Result<Tensor> {
    let mut shape = [0usize; 4];
    for d in &mut shape {
        *d = read_u64(r)? as usize;
    }
    let numel: usize = shape.iter().product();
    if numel > (1 << 32) {
        return Err(Error::Checkpoint(format!("implausible tensor size {numel}")));
    }
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        data.push(read_f64(r)?);
    }
    Ok(Tensor::new(shape, data))
}

fn read_named(r: &mut impl Read) -> Result<(String, Tensor)> {
    let len = read_u64(r)? as usize;
    if len > 4096 {
        return Err(Error::Checkpoint(format!("implausible name length {len}")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    let name = String::from_utf8(buf)
        .map_err(|_| Error::Checkpoint("non-UTF8 tensor name".into()))?;
    Ok((name, read_tensor(r)?))
}

pub fn save(path: &Path, model: &HrfNet, epoch: u64, optimizer: Option<&AdamSnapshot>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let config = serde_json::to_vec(model.config())?;
    write_u64(&mut w, config.len() as u64)?;
    w.write_all(&config)?;
    write_u64(&mut w, model.seed())?;
    write_u64(&mut w, epoch)?;
    write_u64(&mut w, model.params().len() as u64)?;
    for (name, t) in model.params().iter() {
        write_named(&mut w, name, t)?;
    }
    write_u64(&mut w, model.buffers().len() as u64)?;
    for (name, t) in model.buffers().iter() {
        write_named(&mut w, name, t)?;
    }
    match optimizer {
        None => w.write_all(&[0u8])?,
        Some(adam) => {
            if adam.m.len() != model.params().len() || adam.v.len() != model.params().len() {
                return Err(Error::Checkpoint(
                    "optimizer state does not match the parameter list".into(),
                ));
            }
            w.write_all(&[1u8])?;
            write_u64(&mut w, adam.step)?;
            for t in adam.m.iter().chain(adam.v.iter()) {
                write_tensor(&mut w, t)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}; not an HRFNet checkpoint",
            &magic
        )));
    }
    let mut ver = [0u8; 4];
    r.read_exact(&mut ver)?;
    let version = u32::from_le_bytes(ver);
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let config_len = read_u64(&mut r)? as usize;
    let mut config_buf = vec![0u8; config_len];
    r.read_exact(&mut config_buf)?;
    let config: ModelConfig = serde_json::from_slice(&config_buf)?;
    let seed = read_u64(&mut r)?;
    let epoch = read_u64(&mut r)?;
    let mut model = HrfNet::new(config, seed)?;

    let n_params = read_u64(&mut r)? as usize;
    if n_params != model.params().len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {n_params} parameters, model expects {}",
            model.params().len()
        )));
    }
    for pid in 0..n_params {
        let (name, t) = read_named(&mut r)?;
        if model.params().name(pid) != name {
            return Err(Error::Checkpoint(format!(
                "parameter {pid} is {name}, expected {}",
                model.params().name(pid)
            )));
        }
        if model.params().get(pid).shape() != t.shape() {
            return Err(Error::Checkpoint(format!("shape mismatch for parameter {name}")));
        }
        model.params_mut().set(pid, t);
    }
    let n_buffers = read_u64(&mut r)? as usize;
    if n_buffers != model.buffers().len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {n_buffers} buffers, model expects {}",
            model.buffers().len()
        )));
    }
    for bid in 0..n_buffers {
        let (name, t) = read_named(&mut r)?;
        if model.buffers().name(bid) != name {
            return Err(Error::Checkpoint(format!(
                "buffer {bid} is {name}, expected {}",
                model.buffers().name(bid)
            )));
        }
        if model.buffers().get(bid).shape() != t.shape() {
            return Err(Error::Checkpoint(format!("shape mismatch for buffer {name}")));
        }
        model.buffers_mut().set(bid, t);
    }
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    let optimizer = match flag[0] {
        0 => None,
        1 => {
            let step = read_u64(&mut r)?;
            let mut m = Vec::with_capacity(n_params);
            let mut v = Vec::with_capacity(n_params);
            for _ in 0..n_params {
                m.push(read_tensor(&mut r)?);
            }
            for _ in 0..n_params {
                v.push(read_tensor(&mut r)?);
            }
            Some(AdamSnapshot { step, m, v })
        }
        other => {
            return Err(Error::Checkpoint(format!("unknown optimizer flag {other}")));
        }
    };
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after checkpoint payload".into()));
    }
    Ok(Checkpoint { model, epoch, optimizer })
}
