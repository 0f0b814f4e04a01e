//! Offline text knowledge: task descriptions are embedded by a pluggable
//! provider, mean-pooled, and projected to the bottleneck width by a small
//! MLP (`dim -> 256 -> C`) that trains together with the networks.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{atomic_write, split_header};
use crate::error::{Error, Result};
use crate::nn::Real;

pub const EMB1_MAGIC: &[u8; 4] = b"EMB1";
pub const HIDDEN_WIDTH: usize = 256;

/// Descriptions as authored offline: response blocks, plus any prompt lines
/// (lines starting with `#`), which are kept for provenance but not embedded.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DescriptionSet {
    pub prompts: Vec<String>,
    pub responses: Vec<String>,
}

/// Splits text into blank-line-separated blocks; whitespace-only blocks are
/// dropped and each block is kept verbatim apart from surrounding blank space.
pub fn parse_descriptions(text: &str) -> Result<DescriptionSet> {
    let mut prompts = Vec::new();
    let mut responses = Vec::new();
    let mut block: Vec<&str> = Vec::new();
    let flush = |block: &mut Vec<&str>, responses: &mut Vec<String>| {
        let joined = block.join("\n");
        if !joined.trim().is_empty() {
            responses.push(joined.trim_end().to_string());
        }
        block.clear();
    };
    for line in text.lines() {
        if line.trim().is_empty() {
            flush(&mut block, &mut responses);
        } else if let Some(p) = line.strip_prefix('#') {
            prompts.push(p.trim().to_string());
        } else {
            block.push(line);
        }
    }
    flush(&mut block, &mut responses);
    if responses.is_empty() {
        return Err(Error::invalid("description file contains no responses"));
    }
    Ok(DescriptionSet { prompts, responses })
}

pub fn load_descriptions(path: impl AsRef<Path>) -> Result<DescriptionSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_descriptions(&text)
}

/// One embedding row per response.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    rows: Vec<Vec<f32>>,
    dim: usize,
}

impl EmbeddingMatrix {
    pub fn new(rows: Vec<Vec<f32>>) -> Result<Self> {
        let dim = rows.first().map(|r| r.len()).ok_or_else(|| Error::invalid("empty embedding matrix"))?;
        if dim == 0 {
            return Err(Error::invalid("zero-width embeddings"));
        }
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != dim) {
            return Err(Error::shape(format!("row {i} has width {}, row 0 has {dim}", r.len())));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding matrix".into()));
        }
        Ok(EmbeddingMatrix { rows, dim })
    }

    pub fn rows(&self) -> &[Vec<f32>] {
        &self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

#[derive(Serialize, Deserialize)]
struct EmbHeader {
    rows: usize,
    dim: usize,
}

pub fn encode_embeddings(m: &EmbeddingMatrix) -> Result<Vec<u8>> {
    let json = serde_json::to_string(&EmbHeader {
        rows: m.rows.len(),
        dim: m.dim,
    })?;
    let mut out = Vec::with_capacity(5 + json.len() + m.rows.len() * m.dim * 4);
    out.extend_from_slice(EMB1_MAGIC);
    out.extend_from_slice(json.as_bytes());
    out.push(b'\n');
    for v in m.rows.iter().flatten() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<EmbeddingMatrix> {
    let (header, payload) = split_header(bytes, EMB1_MAGIC)?;
    let h: EmbHeader = serde_json::from_slice(header).map_err(|e| Error::Header(e.to_string()))?;
    let expected = h
        .rows
        .checked_mul(h.dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::shape("embedding size overflows"))?;
    if payload.len() != expected {
        return Err(Error::LengthMismatch {
            expected,
            found: payload.len(),
        });
    }
    let flat: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    EmbeddingMatrix::new(flat.chunks(h.dim.max(1)).map(|r| r.to_vec()).collect())
}

pub fn write_embeddings(m: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<()> {
    atomic_write(path.as_ref(), &encode_embeddings(m)?)
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_embeddings(&bytes)
}

/// Source of sentence embeddings. Token-level vectors are mean-pooled per
/// response inside the provider.
pub trait EmbeddingProvider {
    fn id(&self) -> String;
    fn embed(&self, responses: &[String]) -> Result<Vec<Vec<f32>>>;
}

/// Rows precomputed offline by any text encoder and stored as EMB1.
#[derive(Clone, Debug)]
pub struct FileProvider {
    path: PathBuf,
}

impl FileProvider {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        FileProvider { path: path.into() }
    }
}

impl EmbeddingProvider for FileProvider {
    fn id(&self) -> String {
        format!("file:{}", self.path.display())
    }

    fn embed(&self, responses: &[String]) -> Result<Vec<Vec<f32>>> {
        let m = read_embeddings(&self.path).map_err(|e| Error::Provider(format!("{}: {e}", self.path.display())))?;
        if m.rows.len() != responses.len() {
            return Err(Error::Provider(format!(
                "{} holds {} rows for {} responses",
                self.path.display(),
                m.rows.len(),
                responses.len()
            )));
        }
        Ok(m.rows)
    }
}

/// Deterministic stand-in encoder: every lower-cased alphanumeric token is
/// hashed (FNV-1a) to seed a unit-norm random vector.
#[derive(Clone, Debug)]
pub struct HashProvider {
    dim: usize,
}

impl HashProvider {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("embedding width must be positive"));
        }
        Ok(HashProvider { dim })
    }

    fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in token.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        let v: Vec<f64> = (0..self.dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.into_iter().map(|x| x / norm).collect()
    }
}

impl EmbeddingProvider for HashProvider {
    fn id(&self) -> String {
        format!("hash-{}", self.dim)
    }

    fn embed(&self, responses: &[String]) -> Result<Vec<Vec<f32>>> {
        responses
            .iter()
            .map(|r| {
                let tokens: Vec<String> = r
                    .split(|c: char| !c.is_alphanumeric())
                    .filter(|t| !t.is_empty())
                    .map(str::to_lowercase)
                    .collect();
                if tokens.is_empty() {
                    return Err(Error::Provider(format!("response {r:?} has no tokens")));
                }
                let mut acc = vec![0.0f64; self.dim];
                for t in &tokens {
                    for (a, v) in acc.iter_mut().zip(self.token_vector(t)) {
                        *a += v;
                    }
                }
                Ok(acc.into_iter().map(|a| (a / tokens.len() as f64) as f32).collect())
            })
            .collect()
    }
}

/// Runs the provider and checks that every row has the same width.
pub fn embed_descriptions(provider: &dyn EmbeddingProvider, ds: &DescriptionSet) -> Result<EmbeddingMatrix> {
    let rows = provider.embed(&ds.responses)?;
    if rows.len() != ds.responses.len() {
        return Err(Error::Provider(format!(
            "{} returned {} rows for {} responses",
            provider.id(),
            rows.len(),
            ds.responses.len()
        )));
    }
    EmbeddingMatrix::new(rows)
}

/// Column-wise arithmetic mean of the rows.
pub fn pool_embeddings(m: &EmbeddingMatrix) -> Vec<f64> {
    let mut acc = vec![0.0; m.dim];
    for r in &m.rows {
        for (a, &v) in acc.iter_mut().zip(r) {
            *a += v as f64;
        }
    }
    acc.iter().map(|a| a / m.rows.len() as f64).collect()
}

/// Two-layer perceptron `dim -> hidden -> out` with a ReLU in between.
/// Parameters are stored flat as `w1[hidden][dim] | b1 | w2[out][hidden] | b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct TextProjector<T> {
    dim: usize,
    hidden: usize,
    out: usize,
    params: Vec<T>,
}

/// Hidden pre-activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ProjectorCache<T> {
    input: Vec<T>,
    pre: Vec<T>,
}

impl<T: Real> TextProjector<T> {
    pub fn param_len(dim: usize, hidden: usize, out: usize) -> usize {
        hidden * dim + hidden + out * hidden + out
    }

    /// Uniform `±1/sqrt(fan_in)` weights, zero biases.
    pub fn init<R: Rng + ?Sized>(dim: usize, hidden: usize, out: usize, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(dim, hidden, out)?;
        let (b1, b2) = (1.0 / (dim as f64).sqrt(), 1.0 / (hidden as f64).sqrt());
        for v in &mut p.params[..hidden * dim] {
            *v = T::of(rng.gen_range(-b1..b1));
        }
        let w2 = hidden * dim + hidden;
        for v in &mut p.params[w2..w2 + out * hidden] {
            *v = T::of(rng.gen_range(-b2..b2));
        }
        Ok(p)
    }

    pub fn zeros(dim: usize, hidden: usize, out: usize) -> Result<Self> {
        if dim == 0 || hidden == 0 || out == 0 {
            return Err(Error::invalid(format!("projector widths must be positive: {dim}/{hidden}/{out}")));
        }
        Ok(TextProjector {
            dim,
            hidden,
            out,
            params: vec![T::zero(); Self::param_len(dim, hidden, out)],
        })
    }

    pub fn from_params(dim: usize, hidden: usize, out: usize, params: Vec<T>) -> Result<Self> {
        let mut p = Self::zeros(dim, hidden, out)?;
        if params.len() != p.params.len() {
            return Err(Error::shape(format!(
                "projector needs {} parameters, got {}",
                p.params.len(),
                params.len()
            )));
        }
        p.params = params;
        Ok(p)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.dim, self.hidden, self.out)
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    fn split(&self) -> (&[T], &[T], &[T], &[T]) {
        let (w1, rest) = self.params.split_at(self.hidden * self.dim);
        let (b1, rest) = rest.split_at(self.hidden);
        let (w2, b2) = rest.split_at(self.out * self.hidden);
        (w1, b1, w2, b2)
    }

    pub fn forward(&self, x: &[T]) -> Result<(Vec<T>, ProjectorCache<T>)> {
        if x.len() != self.dim {
            return Err(Error::shape(format!("projector expects width {}, got {}", self.dim, x.len())));
        }
        let (w1, b1, w2, b2) = self.split();
        let pre: Vec<T> = (0..self.hidden)
            .map(|j| crate::nn::dot(&w1[j * self.dim..(j + 1) * self.dim], x) + b1[j])
            .collect();
        let h: Vec<T> = pre.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let z = (0..self.out)
            .map(|o| crate::nn::dot(&w2[o * self.hidden..(o + 1) * self.hidden], &h) + b2[o])
            .collect();
        Ok((z, ProjectorCache { input: x.to_vec(), pre }))
    }

    /// Accumulates parameter gradients for `dz` into `grads`.
    pub fn backward(&self, cache: &ProjectorCache<T>, dz: &[T], grads: &mut [T]) {
        assert_eq!(grads.len(), self.params.len(), "projector gradient buffer");
        assert_eq!(dz.len(), self.out, "projector output gradient");
        let (_, _, w2, _) = self.split();
        let (d, hd) = (self.dim, self.hidden);
        let mut dh = vec![T::zero(); hd];
        {
            let (_, rest) = grads.split_at_mut(hd * d + hd);
            let (gw2, gb2) = rest.split_at_mut(self.out * hd);
            for o in 0..self.out {
                gb2[o] += dz[o];
                for j in 0..hd {
                    let hj = if cache.pre[j] > T::zero() { cache.pre[j] } else { T::zero() };
                    gw2[o * hd + j] += dz[o] * hj;
                    dh[j] += dz[o] * w2[o * hd + j];
                }
            }
        }
        let (gw1, rest) = grads.split_at_mut(hd * d);
        let gb1 = &mut rest[..hd];
        for j in 0..hd {
            if cache.pre[j] <= T::zero() {
                continue;
            }
            gb1[j] += dh[j];
            crate::nn::axpy(&mut gw1[j * d..(j + 1) * d], dh[j], &cache.input);
        }
    }
}

/// Projected text feature plus provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextFeature {
    pub z: Vec<f64>,
    pub provider_id: String,
    pub projection_version: u32,
}

/// Version tag of the projector architecture recorded in [`TextFeature`].
pub const PROJECTION_VERSION: u32 = 1;

pub fn project_embedding<T: Real>(proj: &TextProjector<T>, pooled: &[f64], provider_id: &str) -> Result<TextFeature> {
    let x: Vec<T> = pooled.iter().map(|&v| T::of(v)).collect();
    let (z, _) = proj.forward(&x)?;
    let z: Vec<f64> = z.iter().map(|v| v.as_f64()).collect();
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("projected text feature".into()));
    }
    Ok(TextFeature {
        z,
        provider_id: provider_id.to_string(),
        projection_version: PROJECTION_VERSION,
    })
}
