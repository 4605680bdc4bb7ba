//! Versioned binary checkpoint container: resolved config, parameter tensors
//! keyed by canonical names, optimizer state, RNG base seed, and counters.
//! Floats are stored as raw little-endian bits, so save/load round-trips are
//! bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::adamw::{AdamW, AdamWConfig};
use crate::nn::{ParamSet, Tensor};

const MAGIC: &[u8; 4] = b"VPCK";
const VERSION: u32 = 1;

/// Serializable optimizer state.
#[derive(Clone, Debug)]
pub struct OptimState {
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

/// Everything needed to resume or transfer a training run.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config_json: String,
    pub config_hash: [u8; 32],
    pub epoch: u64,
    pub step: u64,
    pub base_seed: u64,
    pub params: Vec<(String, Tensor<f32>)>,
    pub optim: Option<OptimState>,
}

impl Checkpoint {
    /// Rebuild a parameter set by name, enforcing identical names and shapes.
    pub fn load_params_into(&self, params: &mut ParamSet) -> Result<()> {
        let mut problems = Vec::new();
        let mut by_name: std::collections::HashMap<&str, &Tensor<f32>> = Default::default();
        for (name, tensor) in &self.params {
            by_name.insert(name.as_str(), tensor);
        }
        for idx in 0..params.len() {
            let id = crate::nn::ParamId(idx);
            let name = params.name(id).to_string();
            match by_name.remove(name.as_str()) {
                Some(src) if src.shape() == params.get(id).shape() => {
                    *params.get_mut(id) = src.clone();
                }
                Some(src) => problems.push(format!(
                    "{name}: checkpoint {:?} vs network {:?}",
                    src.shape(),
                    params.get(id).shape()
                )),
                None => problems.push(format!("{name}: missing from checkpoint")),
            }
        }
        for (name, _) in by_name {
            problems.push(format!("{name}: not expected by network"));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::IncompatibleCheckpoint(problems))
        }
    }

    /// Restore optimizer state into a freshly constructed AdamW.
    pub fn load_optim(&self, params: &ParamSet, cfg: AdamWConfig) -> Result<AdamW> {
        let mut opt = AdamW::new(params, cfg);
        if let Some(state) = &self.optim {
            if state.m.len() != params.len() || state.v.len() != params.len() {
                return Err(Error::IncompatibleCheckpoint(vec![format!(
                    "optimizer state holds {} tensors, network has {}",
                    state.m.len(),
                    params.len()
                )]));
            }
            opt.step = state.step;
            opt.m = state.m.clone();
            opt.v = state.v.clone();
        }
        Ok(opt)
    }
}

fn write_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_tensor(w: &mut impl Write, t: &Tensor<f32>) -> std::io::Result<()> {
    write_u64(w, t.shape().len() as u64)?;
    for &d in t.shape() {
        write_u64(w, d as u64)?;
    }
    let mut buf = Vec::with_capacity(t.len() * 4);
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_tensor(r: &mut impl Read) -> std::io::Result<Tensor<f32>> {
    let ndim = read_u64(r)? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(read_u64(r)? as usize);
    }
    let n: usize = shape.iter().product();
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    let data = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Tensor::from_vec(&shape, data))
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e: std::io::Error| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    write_u64(&mut w, ckpt.config_json.len() as u64).map_err(io)?;
    w.write_all(ckpt.config_json.as_bytes()).map_err(io)?;
    w.write_all(&ckpt.config_hash).map_err(io)?;
    write_u64(&mut w, ckpt.epoch).map_err(io)?;
    write_u64(&mut w, ckpt.step).map_err(io)?;
    write_u64(&mut w, ckpt.base_seed).map_err(io)?;
    write_u64(&mut w, ckpt.params.len() as u64).map_err(io)?;
    for (name, tensor) in &ckpt.params {
        write_u64(&mut w, name.len() as u64).map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        write_tensor(&mut w, tensor).map_err(io)?;
    }
    match &ckpt.optim {
        Some(state) => {
            w.write_all(&[1u8]).map_err(io)?;
            write_u64(&mut w, state.step).map_err(io)?;
            for t in state.m.iter().chain(state.v.iter()) {
                write_tensor(&mut w, t).map_err(io)?;
            }
        }
        None => w.write_all(&[0u8]).map_err(io)?,
    }
    w.flush().map_err(io)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io = |e: std::io::Error| Error::io(path, e);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::format(path, "bad checkpoint magic"));
    }
    let mut ver = [0u8; 4];
    r.read_exact(&mut ver).map_err(io)?;
    if u32::from_le_bytes(ver) != VERSION {
        return Err(Error::format(path, "unsupported checkpoint version"));
    }
    let cfg_len = read_u64(&mut r).map_err(io)? as usize;
    let mut cfg = vec![0u8; cfg_len];
    r.read_exact(&mut cfg).map_err(io)?;
    let config_json =
        String::from_utf8(cfg).map_err(|_| Error::format(path, "config is not UTF-8"))?;
    let mut config_hash = [0u8; 32];
    r.read_exact(&mut config_hash).map_err(io)?;
    let epoch = read_u64(&mut r).map_err(io)?;
    let step = read_u64(&mut r).map_err(io)?;
    let base_seed = read_u64(&mut r).map_err(io)?;
    let count = read_u64(&mut r).map_err(io)? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u64(&mut r).map_err(io)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(io)?;
        let name =
            String::from_utf8(name).map_err(|_| Error::format(path, "name is not UTF-8"))?;
        let tensor = read_tensor(&mut r).map_err(io)?;
        params.push((name, tensor));
    }
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag).map_err(io)?;
    let optim = if flag[0] == 1 {
        let ostep = read_u64(&mut r).map_err(io)?;
        let mut m = Vec::with_capacity(count);
        for _ in 0..count {
            m.push(read_tensor(&mut r).map_err(io)?);
        }
        let mut v = Vec::with_capacity(count);
        for _ in 0..count {
            v.push(read_tensor(&mut r).map_err(io)?);
        }
        Some(OptimState {
            step: ostep,
            m,
            v,
        })
    } else {
        None
    };
    Ok(Checkpoint {
        config_json,
        config_hash,
        epoch,
        step,
        base_seed,
        params,
        optim,
    })
}
