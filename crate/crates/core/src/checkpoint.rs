//! Checkpoint files: a `CKPT` magic, a one-line JSON header and raw
//! little-endian parameter blobs. Everything needed to resume bit-identically
//! is stored, including the exact random stream position.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{atomic_write, split_header};
use crate::error::{Error, Result};
use crate::segmodel::{ModelConfig, SegModel};
use crate::textknow::TextProjector;
use crate::trainer::{LogRow, TextState, TrainConfig, TrainState};

const MAGIC: &[u8; 4] = b"CKPT";

#[derive(Serialize, Deserialize)]
struct RngState {
    seed: Vec<u8>,
    stream: u64,
    /// u128 does not survive JSON numbers.
    word_pos: String,
}

#[derive(Serialize, Deserialize)]
struct TextHeader {
    provider_id: String,
    dim: usize,
    hidden: usize,
    out: usize,
}

#[derive(Serialize, Deserialize)]
struct Blob {
    name: String,
    dtype: String,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    arch: ModelConfig,
    iteration: usize,
    config: String,
    rng: RngState,
    text: Option<TextHeader>,
    blobs: Vec<Blob>,
}

enum BlobData<'a> {
    F32(&'a [f32]),
    F64(Vec<f64>),
}

/// Flattens the log history as `[iter, lr, sup, unsup, total, val]` rows
/// with NaN for missing values.
fn history_blob(rows: &[LogRow]) -> Vec<f64> {
    let o = |v: Option<f64>| v.unwrap_or(f64::NAN);
    rows.iter()
        .flat_map(|r| [r.iter as f64, r.lr, o(r.loss_sup), o(r.loss_unsup), o(r.loss_total), o(r.val_dice)])
        .collect()
}

fn history_rows(v: &[f64]) -> Result<Vec<LogRow>> {
    if v.len() % 6 != 0 {
        return Err(Error::Header(format!("history blob of {} values", v.len())));
    }
    let o = |x: f64| if x.is_nan() { None } else { Some(x) };
    Ok(v.chunks(6)
        .map(|c| LogRow {
            iter: c[0] as usize,
            lr: c[1],
            loss_sup: o(c[2]),
            loss_unsup: o(c[3]),
            loss_total: o(c[4]),
            val_dice: o(c[5]),
        })
        .collect())
}

pub fn encode_checkpoint(state: &TrainState, cfg: &TrainConfig) -> Result<Vec<u8>> {
    let mut blobs: Vec<(&str, BlobData)> = vec![
        ("model_a", BlobData::F32(state.model_a.params())),
        ("model_b", BlobData::F32(state.model_b.params())),
        ("velocity_a", BlobData::F32(&state.velocity_a)),
        ("velocity_b", BlobData::F32(&state.velocity_b)),
    ];
    if let Some(t) = &state.text {
        blobs.push(("projector", BlobData::F32(t.projector.params())));
        blobs.push(("velocity_projector", BlobData::F32(&t.velocity)));
        blobs.push(("pooled", BlobData::F32(&t.pooled)));
    }
    blobs.push(("history", BlobData::F64(history_blob(&state.history))));
    let header = Header {
        arch: state.model_a.config().clone(),
        iteration: state.iteration,
        config: cfg.to_kv(),
        rng: RngState {
            seed: state.rng.get_seed().to_vec(),
            stream: state.rng.get_stream(),
            word_pos: state.rng.get_word_pos().to_string(),
        },
        text: state.text.as_ref().map(|t| {
            let (dim, hidden, out) = t.projector.dims();
            TextHeader {
                provider_id: t.provider_id.clone(),
                dim,
                hidden,
                out,
            }
        }),
        blobs: blobs
            .iter()
            .map(|(name, d)| {
                let (dtype, len) = match d {
                    BlobData::F32(v) => ("f32", v.len()),
                    BlobData::F64(v) => ("f64", v.len()),
                };
                Blob {
                    name: name.to_string(),
                    dtype: dtype.into(),
                    len,
                }
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(json.len() + 16);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&json);
    out.push(b'\n');
    for (_, d) in &blobs {
        match d {
            BlobData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            BlobData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
    Ok(out)
}

/// Decodes a checkpoint into the training state and the config it was
/// trained with.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(TrainState, TrainConfig)> {
    let (json, mut body) = split_header(bytes, MAGIC)?;
    let header: Header = serde_json::from_slice(json)?;
    let mut f32s = std::collections::HashMap::new();
    let mut history = Vec::new();
    for b in &header.blobs {
        let width = match b.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return Err(Error::UnknownDtype(other.into())),
        };
        let need = b.len * width;
        if body.len() < need {
            return Err(Error::LengthMismatch {
                expected: need,
                found: body.len(),
            });
        }
        let (raw, rest) = body.split_at(need);
        body = rest;
        if width == 4 {
            let v: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            f32s.insert(b.name.clone(), v);
        } else if b.name == "history" {
            history = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        }
    }
    if !body.is_empty() {
        return Err(Error::LengthMismatch {
            expected: 0,
            found: body.len(),
        });
    }
    let mut take = |name: &str| f32s.remove(name).ok_or_else(|| Error::Header(format!("missing blob {name}")));
    let model_a = SegModel::from_params(header.arch.clone(), take("model_a")?)?;
    let model_b = SegModel::from_params(header.arch.clone(), take("model_b")?)?;
    let velocity_a = take("velocity_a")?;
    let velocity_b = take("velocity_b")?;
    if velocity_a.len() != model_a.param_count() || velocity_b.len() != model_b.param_count() {
        return Err(Error::Header("velocity length differs from the parameter count".into()));
    }
    let text = match &header.text {
        Some(t) => {
            let projector = TextProjector::from_params(t.dim, t.hidden, t.out, take("projector")?)?;
            let velocity = take("velocity_projector")?;
            let pooled = take("pooled")?;
            if velocity.len() != projector.params().len() || pooled.len() != t.dim {
                return Err(Error::Header("projector blobs have inconsistent lengths".into()));
            }
            Some(TextState {
                provider_id: t.provider_id.clone(),
                pooled,
                projector,
                velocity,
            })
        }
        None => None,
    };
    let seed: [u8; 32] = header
        .rng
        .seed
        .as_slice()
        .try_into()
        .map_err(|_| Error::Header(format!("rng seed has {} bytes", header.rng.seed.len())))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(header.rng.stream);
    rng.set_word_pos(
        header
            .rng
            .word_pos
            .parse()
            .map_err(|_| Error::Header(format!("bad rng position {:?}", header.rng.word_pos)))?,
    );
    let cfg = TrainConfig::parse(&header.config)?;
    if cfg.model != header.arch {
        return Err(Error::Header("stored config and architecture disagree".into()));
    }
    Ok((
        TrainState {
            model_a,
            model_b,
            velocity_a,
            velocity_b,
            text,
            iteration: header.iteration,
            rng,
            history: history_rows(&history)?,
        },
        cfg,
    ))
}

pub fn save_checkpoint(state: &TrainState, cfg: &TrainConfig, path: impl AsRef<Path>) -> Result<()> {
    atomic_write(path.as_ref(), &encode_checkpoint(state, cfg)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(TrainState, TrainConfig)> {
    let path = path.as_ref();
    decode_checkpoint(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
