//! Sliding-window prediction over full volumes with overlap averaging of
//! class probabilities.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::softmax_probs;
use crate::segmodel::{feat_to_logits, volume_to_feat, SegModel, TextInput};
use crate::types::{linear_index, ProbVolume, Shape3, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlidingWindowSpec {
    pub patch: Shape3,
    pub stride: Shape3,
}

impl SlidingWindowSpec {
    pub fn new(patch: Shape3, stride: Shape3) -> Result<Self> {
        if (0..3).any(|a| stride[a] == 0 || stride[a] > patch[a]) {
            return Err(Error::invalid(format!("stride {stride:?} must lie in 1..=patch {patch:?}")));
        }
        Ok(SlidingWindowSpec { patch, stride })
    }
}

/// Origins along one axis: `0, s, 2s, …` while the window fits, plus one
/// final origin clamped to `len - patch` when the grid stops short.
pub fn axis_origins(len: usize, patch: usize, stride: usize) -> Result<Vec<usize>> {
    if patch == 0 || patch > len {
        return Err(Error::shape(format!("patch {patch} does not fit in length {len}")));
    }
    if stride == 0 {
        return Err(Error::invalid("stride must be positive"));
    }
    let mut out: Vec<usize> = (0..).map(|k| k * stride).take_while(|o| o + patch <= len).collect();
    let last = *out.last().expect("origin 0 always fits");
    if last + patch < len {
        out.push(len - patch);
    }
    Ok(out)
}

/// Cartesian product of the per-axis origins, depth-major.
pub fn window_origins(shape: Shape3, spec: &SlidingWindowSpec) -> Result<Vec<Shape3>> {
    let axes = [0, 1, 2].map(|a| axis_origins(shape[a], spec.patch[a], spec.stride[a]));
    let [z, y, x] = axes;
    let (z, y, x) = (z?, y?, x?);
    let mut out = Vec::with_capacity(z.len() * y.len() * x.len());
    for &oz in &z {
        for &oy in &y {
            for &ox in &x {
                out.push([oz, oy, ox]);
            }
        }
    }
    Ok(out)
}

/// Averages window probabilities using the default origin order.
pub fn sliding_window_predict<F>(forward: F, volume: &Volume, spec: &SlidingWindowSpec) -> Result<ProbVolume>
where
    F: FnMut(&Volume) -> Result<ProbVolume>,
{
    let origins = window_origins(volume.shape(), spec)?;
    predict_at_origins(forward, volume, spec.patch, &origins)
}

/// Accumulates `forward` over windows at `origins` into sum and count buffers
/// and returns `sum / count`. Every voxel must be covered.
pub fn predict_at_origins<F>(mut forward: F, volume: &Volume, patch: Shape3, origins: &[Shape3]) -> Result<ProbVolume>
where
    F: FnMut(&Volume) -> Result<ProbVolume>,
{
    let shape = volume.shape();
    let n: usize = shape.iter().product();
    let mut sum: Vec<f64> = Vec::new();
    let mut count = vec![0u32; n];
    let mut k = 0;
    for &o in origins {
        let p = forward(&crate::dataio::crop_volume(volume, o, patch)?)?;
        if p.shape() != patch {
            return Err(Error::shape(format!("window prediction {:?} for patch {patch:?}", p.shape())));
        }
        if sum.is_empty() {
            k = p.num_classes();
            sum = vec![0.0; k * n];
        } else if p.num_classes() != k {
            return Err(Error::shape("windows disagree on the number of classes"));
        }
        let pn: usize = patch.iter().product();
        for z in 0..patch[0] {
            for y in 0..patch[1] {
                for x in 0..patch[2] {
                    let dst = linear_index(shape, o[0] + z, o[1] + y, o[2] + x);
                    let src = linear_index(patch, z, y, x);
                    count[dst] += 1;
                    for c in 0..k {
                        sum[c * n + dst] += p.values()[c * pn + src];
                    }
                }
            }
        }
    }
    if let Some(v) = count.iter().position(|&c| c == 0) {
        return Err(Error::invalid(format!("voxel {v} not covered by any window")));
    }
    for c in 0..k {
        for v in 0..n {
            sum[c * n + v] /= count[v] as f64;
        }
    }
    ProbVolume::from_raw(k, shape, sum)
}

/// Which network(s) produce test predictions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvalModel {
    #[default]
    A,
    B,
    Ensemble,
}

impl FromStr for EvalModel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a" | "A" => Ok(EvalModel::A),
            "b" | "B" => Ok(EvalModel::B),
            "ensemble" => Ok(EvalModel::Ensemble),
            other => Err(Error::invalid(format!("unknown evaluation model {other:?}"))),
        }
    }
}

impl fmt::Display for EvalModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalModel::A => "a",
            EvalModel::B => "b",
            EvalModel::Ensemble => "ensemble",
        })
    }
}

/// Sliding-window maps of both models, averaged or selected by `which`.
pub fn ensemble_predict<FA, FB>(
    forward_a: FA,
    forward_b: FB,
    volume: &Volume,
    spec: &SlidingWindowSpec,
    which: EvalModel,
) -> Result<ProbVolume>
where
    FA: FnMut(&Volume) -> Result<ProbVolume>,
    FB: FnMut(&Volume) -> Result<ProbVolume>,
{
    match which {
        EvalModel::A => sliding_window_predict(forward_a, volume, spec),
        EvalModel::B => sliding_window_predict(forward_b, volume, spec),
        EvalModel::Ensemble => {
            let a = sliding_window_predict(forward_a, volume, spec)?;
            let b = sliding_window_predict(forward_b, volume, spec)?;
            let vals = a.values().iter().zip(b.values()).map(|(x, y)| 0.5 * (x + y)).collect();
            ProbVolume::from_raw(a.num_classes(), a.shape(), vals)
        }
    }
}

/// Softmax output of one network on a window, with optional text input.
pub fn model_probs(model: &SegModel<f32>, text: Option<TextInput<'_, f32>>, window: &Volume) -> Result<ProbVolume> {
    let out = model.forward(&volume_to_feat::<f32>(window), text)?;
    Ok(softmax_probs(&feat_to_logits(&out.logits)?))
}
