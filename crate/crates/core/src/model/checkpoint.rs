//! Binary checkpoint format.
//!
//! ```text
//! magic   8 bytes  "STDTCKPT"
//! version u32 LE
//! hlen    u32 LE   length of the JSON header
//! header  hlen bytes, UTF-8 JSON: {"config": ScorerConfig, "seed": u64,
//!                                  "tensors": [{"name", "shape"}...]}
//! payload little-endian f32, each tensor row-major, in header order
//! ```
//!
//! The weight tensors come first, followed by `norm.running_mean` and
//! `norm.running_var`.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use super::{NormStats, ScorerConfig, ScorerParams, Weights};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"STDTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ScorerConfig,
    seed: u64,
    tensors: Vec<TensorInfo>,
}

fn expected_tensors(weights: &Weights) -> Vec<TensorInfo> {
    let h = weights.norm_scale.len();
    weights
        .tensor_names()
        .into_iter()
        .zip(weights.shapes())
        .map(|(name, shape)| TensorInfo { name, shape })
        .chain(
            ["norm.running_mean", "norm.running_var"].map(|name| TensorInfo {
                name: name.into(),
                shape: vec![h],
            }),
        )
        .collect()
}

pub fn write_checkpoint<W: Write>(params: &ScorerParams, mut out: W) -> std::io::Result<()> {
    let header = Header {
        config: params.config,
        seed: params.seed,
        tensors: expected_tensors(&params.weights),
    };
    let header = serde_json::to_vec(&header).map_err(std::io::Error::other)?;
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(header.len() as u32).to_le_bytes())?;
    out.write_all(&header)?;
    let running = [
        params.running.mean.as_slice().unwrap(),
        params.running.var.as_slice().unwrap(),
    ];
    for t in params.weights.tensors().into_iter().chain(running) {
        for &v in t {
            out.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    out.flush()
}

pub fn read_checkpoint<R: Read>(mut input: R, path: &Path) -> Result<ScorerParams> {
    let format = |message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    let io = |e: std::io::Error| Error::io(path, e);
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic).map_err(io)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(format("not a checkpoint (bad magic)".into()));
    }
    let mut word = [0u8; 4];
    input.read_exact(&mut word).map_err(io)?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(format(format!("unsupported checkpoint version {version}")));
    }
    input.read_exact(&mut word).map_err(io)?;
    let mut header = vec![0u8; u32::from_le_bytes(word) as usize];
    input.read_exact(&mut header).map_err(io)?;
    let header: Header =
        serde_json::from_slice(&header).map_err(|e| format(format!("bad header: {e}")))?;
    header
        .config
        .validate()
        .map_err(|e| format(e.to_string()))?;

    let mut weights = Weights::zeros(&header.config);
    let expected = expected_tensors(&weights);
    let matches = expected.len() == header.tensors.len()
        && expected
            .iter()
            .zip(&header.tensors)
            .all(|(a, b)| a.name == b.name && a.shape == b.shape);
    if !matches {
        return Err(format(
            "tensor table does not match the recorded config".into(),
        ));
    }
    let h = header.config.hidden;
    let mut mean = Array1::zeros(h);
    let mut var = Array1::zeros(h);
    let mut buf = [0u8; 4];
    let running = [mean.as_slice_mut().unwrap(), var.as_slice_mut().unwrap()];
    for t in weights.tensors_mut().into_iter().chain(running) {
        for v in t.iter_mut() {
            input
                .read_exact(&mut buf)
                .map_err(|_| format("payload ended early".into()))?;
            *v = f32::from_le_bytes(buf) as f64;
        }
    }
    if input.read(&mut buf).map_err(io)? != 0 {
        return Err(format("trailing bytes after payload".into()));
    }
    ScorerParams::from_parts(header.config, weights, NormStats { mean, var }, header.seed)
}

pub fn save_checkpoint(params: &ScorerParams, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(params, std::io::BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ScorerParams> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(std::io::BufReader::new(file), path)
}
