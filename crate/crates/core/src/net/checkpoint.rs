//! Binary model checkpoints.
//!
//! Layout: an 8-byte magic, a little-endian `u32` format version, a
//! little-endian `u64` header length, a JSON header (network config, named
//! tensor index, optional training state), then every tensor's raw `f32`
//! data little-endian in header order. Optimizer moments are stored as
//! extra tensors named `opt.m.<param>` and `opt.v.<param>` so a resumed run
//! continues bit-identically.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::{ModelParams, NetConfig, NetError};

const MAGIC: &[u8; 8] = b"MVCKPT\0\0";
pub const FORMAT_VERSION: u32 = 1;

/// Mid-run state needed to resume training exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Epochs fully completed.
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub rng_seed: u64,
    /// Stream position of the training RNG.
    pub rng_word_pos: u128,
    pub opt_step_count: u64,
    /// First optimizer moment per parameter tensor, in parameter order.
    pub opt_m: Vec<(String, Vec<f32>)>,
    /// Second optimizer moment per parameter tensor, in parameter order.
    pub opt_v: Vec<(String, Vec<f32>)>,
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct TrainMeta {
    epoch: usize,
    step: u64,
    rng_seed: u64,
    rng_word_hi: u64,
    rng_word_lo: u64,
    opt_step_count: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    net: NetConfig,
    tensors: Vec<TensorMeta>,
    train_state: Option<TrainMeta>,
}

fn io_err(path: &Path, source: std::io::Error) -> NetError {
    NetError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    params: &ModelParams,
    train_state: Option<&TrainState>,
) -> Result<(), NetError> {
    let path = path.as_ref();
    let named = params.named_tensors();
    let mut tensors: Vec<TensorMeta> = named
        .iter()
        .map(|(name, data)| TensorMeta {
            name: name.clone(),
            len: data.len(),
        })
        .collect();
    if let Some(ts) = train_state {
        for (name, data) in &ts.opt_m {
            tensors.push(TensorMeta {
                name: format!("opt.m.{name}"),
                len: data.len(),
            });
        }
        for (name, data) in &ts.opt_v {
            tensors.push(TensorMeta {
                name: format!("opt.v.{name}"),
                len: data.len(),
            });
        }
    }
    let header = Header {
        net: params.config.clone(),
        tensors,
        train_state: train_state.map(|ts| TrainMeta {
            epoch: ts.epoch,
            step: ts.step,
            rng_seed: ts.rng_seed,
            rng_word_hi: (ts.rng_word_pos >> 64) as u64,
            rng_word_lo: ts.rng_word_pos as u64,
            opt_step_count: ts.opt_step_count,
        }),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| NetError::BadCheckpoint(format!("header encode: {e}")))?;

    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC).map_err(|e| io_err(path, e))?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION)
        .map_err(|e| io_err(path, e))?;
    w.write_u64::<LittleEndian>(header_json.len() as u64)
        .map_err(|e| io_err(path, e))?;
    w.write_all(&header_json).map_err(|e| io_err(path, e))?;

    let mut write_tensor = |data: &[f32]| -> Result<(), NetError> {
        let mut buf = vec![0u8; data.len() * 4];
        LittleEndian::write_f32_into(data, &mut buf);
        w.write_all(&buf).map_err(|e| io_err(path, e))
    };
    for (_, data) in &named {
        write_tensor(data)?;
    }
    if let Some(ts) = train_state {
        for (_, data) in &ts.opt_m {
            write_tensor(data)?;
        }
        for (_, data) in &ts.opt_v {
            write_tensor(data)?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelParams, Option<TrainState>), NetError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| io_err(path, e))?;
    if &magic != MAGIC {
        return Err(NetError::BadCheckpoint("magic bytes do not match".into()));
    }
    let version = r.read_u32::<LittleEndian>().map_err(|e| io_err(path, e))?;
    if version != FORMAT_VERSION {
        return Err(NetError::BadCheckpoint(format!(
            "format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let header_len = r.read_u64::<LittleEndian>().map_err(|e| io_err(path, e))? as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes).map_err(|e| io_err(path, e))?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| NetError::BadCheckpoint(format!("header decode: {e}")))?;

    // Shapes are fully determined by the config; build a fresh parameter
    // set and fill it by name.
    let mut params = ModelParams::init(&header.net, 0)?;
    let mut opt_m: Vec<(String, Vec<f32>)> = Vec::new();
    let mut opt_v: Vec<(String, Vec<f32>)> = Vec::new();
    {
        let mut slots = params.named_tensors_mut();
        let mut filled = vec![false; slots.len()];
        for meta in &header.tensors {
            let mut data = vec![0f32; meta.len];
            let mut buf = vec![0u8; meta.len * 4];
            r.read_exact(&mut buf).map_err(|e| io_err(path, e))?;
            LittleEndian::read_f32_into(&buf, &mut data);
            if let Some(rest) = meta.name.strip_prefix("opt.m.") {
                opt_m.push((rest.to_string(), data));
            } else if let Some(rest) = meta.name.strip_prefix("opt.v.") {
                opt_v.push((rest.to_string(), data));
            } else {
                let idx = slots
                    .iter()
                    .position(|(n, _)| n == &meta.name)
                    .ok_or_else(|| {
                        NetError::BadCheckpoint(format!("unknown tensor {:?}", meta.name))
                    })?;
                if slots[idx].1.len() != meta.len {
                    return Err(NetError::BadCheckpoint(format!(
                        "tensor {:?} has {} values, expected {}",
                        meta.name,
                        meta.len,
                        slots[idx].1.len()
                    )));
                }
                slots[idx].1.copy_from_slice(&data);
                filled[idx] = true;
            }
        }
        if let Some(missing) = filled.iter().position(|&f| !f) {
            return Err(NetError::BadCheckpoint(format!(
                "missing tensor {:?}",
                slots[missing].0
            )));
        }
    }

    let train_state = match header.train_state {
        None => {
            if !opt_m.is_empty() || !opt_v.is_empty() {
                return Err(NetError::BadCheckpoint(
                    "optimizer tensors present without training state".into(),
                ));
            }
            None
        }
        Some(meta) => Some(TrainState {
            epoch: meta.epoch,
            step: meta.step,
            rng_seed: meta.rng_seed,
            rng_word_pos: ((meta.rng_word_hi as u128) << 64) | meta.rng_word_lo as u128,
            opt_step_count: meta.opt_step_count,
            opt_m,
            opt_v,
        }),
    };

    Ok((params, train_state))
}
