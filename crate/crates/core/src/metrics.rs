//! Overlap and boundary metrics for binary masks: Dice, Jaccard, 95th
//! percentile Hausdorff distance and average surface distance.
//!
//! Surface distances are Euclidean in voxel units between the two sets of
//! surface voxels (six-connected boundary). Distances from one surface to the
//! other are read off an exact squared Euclidean distance transform.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{linear_index, LabelVolume, Shape3};

fn check_pair(a: &[bool], b: &[bool]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("masks hold {} and {} voxels", a.len(), b.len())));
    }
    Ok(())
}

/// `2|A∩B| / (|A|+|B|)`; two empty masks score 1.
pub fn dice_coeff(a: &[bool], b: &[bool]) -> Result<f64> {
    check_pair(a, b)?;
    let (inter, sa, sb) = counts(a, b);
    if sa + sb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (sa + sb) as f64)
}

/// `|A∩B| / |A∪B|`; two empty masks score 1.
pub fn jaccard_coeff(a: &[bool], b: &[bool]) -> Result<f64> {
    check_pair(a, b)?;
    let (inter, sa, sb) = counts(a, b);
    let union = sa + sb - inter;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

fn counts(a: &[bool], b: &[bool]) -> (usize, usize, usize) {
    a.iter().zip(b).fold((0, 0, 0), |(i, x, y), (&p, &q)| {
        (i + (p && q) as usize, x + p as usize, y + q as usize)
    })
}

/// Foreground voxels with at least one six-connected neighbour that is
/// background or outside the volume.
pub fn surface_voxels(mask: &[bool], shape: Shape3) -> Vec<Shape3> {
    let mut out = Vec::new();
    for z in 0..shape[0] {
        for y in 0..shape[1] {
            for x in 0..shape[2] {
                if !mask[linear_index(shape, z, y, x)] {
                    continue;
                }
                let c = [z, y, x];
                let exposed = (0..3).any(|a| {
                    let lo = c[a] == 0 || {
                        let mut n = c;
                        n[a] -= 1;
                        !mask[linear_index(shape, n[0], n[1], n[2])]
                    };
                    let hi = c[a] + 1 == shape[a] || {
                        let mut n = c;
                        n[a] += 1;
                        !mask[linear_index(shape, n[0], n[1], n[2])]
                    };
                    lo || hi
                });
                if exposed {
                    out.push(c);
                }
            }
        }
    }
    out
}

/// One-dimensional squared distance transform of a sampled function
/// (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], zc: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    zc[0] = f64::NEG_INFINITY;
    zc[1] = f64::INFINITY;
    let mut first_finite = f[0].is_finite();
    for q in 1..n {
        if !f[q].is_finite() {
            continue;
        }
        if !first_finite {
            // replace the infinite seed with the first finite sample
            v[0] = q;
            first_finite = true;
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= zc[k] {
                if k == 0 {
                    v[0] = q;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                zc[k] = s;
                zc[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    if !first_finite {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while zc[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every voxel to the nearest seed.
pub fn squared_edt(seeds: &[Shape3], shape: Shape3) -> Vec<f64> {
    let n: usize = shape.iter().product();
    let mut g = vec![f64::INFINITY; n];
    for s in seeds {
        g[linear_index(shape, s[0], s[1], s[2])] = 0.0;
    }
    let maxlen = *shape.iter().max().unwrap();
    let mut f = vec![0.0; maxlen];
    let mut out = vec![0.0; maxlen];
    let mut v = vec![0usize; maxlen];
    let mut zc = vec![0.0; maxlen + 1];
    for axis in [2, 1, 0] {
        let len = shape[axis];
        let stride = match axis {
            2 => 1,
            1 => shape[2],
            _ => shape[1] * shape[2],
        };
        for start in 0..n {
            // visit each line once, from its first element
            if (start / stride) % len != 0 {
                continue;
            }
            for i in 0..len {
                f[i] = g[start + i * stride];
            }
            edt_1d(&f[..len], &mut out[..len], &mut v[..len], &mut zc[..len + 1]);
            for i in 0..len {
                g[start + i * stride] = out[i];
            }
        }
    }
    g
}

/// How the 95th percentile combines the two directions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum HdVariant {
    /// One percentile over the union of both directed distance sets.
    #[default]
    Pooled,
    /// Maximum of the two directed percentiles.
    MaxDirected,
}

impl FromStr for HdVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pooled" => Ok(HdVariant::Pooled),
            "max" | "max_directed" => Ok(HdVariant::MaxDirected),
            other => Err(Error::invalid(format!("unknown hd95 variant {other:?}"))),
        }
    }
}

impl fmt::Display for HdVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HdVariant::Pooled => "pooled",
            HdVariant::MaxDirected => "max_directed",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub hd_variant: HdVariant,
    /// Distance reported when exactly one mask is empty; defaults to the
    /// volume diagonal.
    pub empty_sentinel: Option<f64>,
}

/// Percentile with linear interpolation between order statistics
/// (rank `q * (n - 1)`). `sorted` must be ascending and nonempty.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let rank = q * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (rank - lo as f64)
}

/// Directed distances from each surface voxel of `a` to the surface of `b`,
/// and vice versa.
pub fn directed_surface_distances(a: &[bool], b: &[bool], shape: Shape3) -> Result<(Vec<f64>, Vec<f64>)> {
    check_pair(a, b)?;
    if a.len() != shape.iter().product::<usize>() {
        return Err(Error::shape(format!("mask of {} voxels for shape {shape:?}", a.len())));
    }
    let sa = surface_voxels(a, shape);
    let sb = surface_voxels(b, shape);
    let da = squared_edt(&sa, shape);
    let db = squared_edt(&sb, shape);
    let ab = sa.iter().map(|c| db[linear_index(shape, c[0], c[1], c[2])].sqrt()).collect();
    let ba = sb.iter().map(|c| da[linear_index(shape, c[0], c[1], c[2])].sqrt()).collect();
    Ok((ab, ba))
}

/// Surface metrics of one mask pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfaceDistances {
    pub hd95: f64,
    pub asd: f64,
    /// At least one mask was empty; distances are sentinels (or 0 when both
    /// are empty).
    pub empty: bool,
}

pub fn surface_distances(a: &[bool], b: &[bool], shape: Shape3, cfg: &MetricConfig) -> Result<SurfaceDistances> {
    let (ab, ba) = directed_surface_distances(a, b, shape)?;
    match (ab.is_empty(), ba.is_empty()) {
        (true, true) => {
            return Ok(SurfaceDistances {
                hd95: 0.0,
                asd: 0.0,
                empty: true,
            })
        }
        (true, false) | (false, true) => {
            let diag = shape.iter().map(|&s| (s * s) as f64).sum::<f64>().sqrt();
            let s = cfg.empty_sentinel.unwrap_or(diag);
            return Ok(SurfaceDistances {
                hd95: s,
                asd: s,
                empty: true,
            });
        }
        _ => {}
    }
    let mut pooled: Vec<f64> = ab.iter().chain(&ba).copied().collect();
    pooled.sort_by(f64::total_cmp);
    let asd = pooled.iter().sum::<f64>() / pooled.len() as f64;
    let hd95 = match cfg.hd_variant {
        HdVariant::Pooled => percentile_sorted(&pooled, 0.95),
        HdVariant::MaxDirected => {
            let p = |mut v: Vec<f64>| {
                v.sort_by(f64::total_cmp);
                percentile_sorted(&v, 0.95)
            };
            p(ab).max(p(ba))
        }
    };
    Ok(SurfaceDistances {
        hd95,
        asd,
        empty: false,
    })
}

pub fn hd95(a: &[bool], b: &[bool], shape: Shape3) -> Result<f64> {
    Ok(surface_distances(a, b, shape, &MetricConfig::default())?.hd95)
}

pub fn asd(a: &[bool], b: &[bool], shape: Shape3) -> Result<f64> {
    Ok(surface_distances(a, b, shape, &MetricConfig::default())?.asd)
}

/// Metrics of one volume on the foreground class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeMetrics {
    pub id: String,
    pub dice: f64,
    pub jaccard: f64,
    pub hd95: f64,
    pub asd: f64,
    pub empty_flag: bool,
}

/// Per-volume rows and their means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub volumes: Vec<VolumeMetrics>,
    pub mean: VolumeMetrics,
}

/// All four metrics for class 1 (foreground) of a binary segmentation.
pub fn evaluate(id: &str, pred: &LabelVolume, gt: &LabelVolume, cfg: &MetricConfig) -> Result<VolumeMetrics> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(format!("prediction {:?} vs ground truth {:?}", pred.shape(), gt.shape())));
    }
    let a = pred.mask_of(1);
    let b = gt.mask_of(1);
    let sd = surface_distances(&a, &b, pred.shape(), cfg)?;
    Ok(VolumeMetrics {
        id: id.to_string(),
        dice: dice_coeff(&a, &b)?,
        jaccard: jaccard_coeff(&a, &b)?,
        hd95: sd.hd95,
        asd: sd.asd,
        empty_flag: sd.empty,
    })
}

/// Averages per-volume metrics; the mean row's flag is set if any volume was
/// flagged.
pub fn aggregate(volumes: Vec<VolumeMetrics>) -> Result<EvalReport> {
    if volumes.is_empty() {
        return Err(Error::invalid("no volumes to aggregate"));
    }
    let n = volumes.len() as f64;
    let mean = VolumeMetrics {
        id: "mean".into(),
        dice: volumes.iter().map(|v| v.dice).sum::<f64>() / n,
        jaccard: volumes.iter().map(|v| v.jaccard).sum::<f64>() / n,
        hd95: volumes.iter().map(|v| v.hd95).sum::<f64>() / n,
        asd: volumes.iter().map(|v| v.asd).sum::<f64>() / n,
        empty_flag: volumes.iter().any(|v| v.empty_flag),
    };
    Ok(EvalReport { volumes, mean })
}

impl EvalReport {
    /// CSV with header `id,dice,jaccard,hd95,asd,empty_flag` and a final
    /// `mean` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,dice,jaccard,hd95,asd,empty_flag\n");
        for v in self.volumes.iter().chain(std::iter::once(&self.mean)) {
            s.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{}\n",
                v.id, v.dice, v.jaccard, v.hd95, v.asd, v.empty_flag as u8
            ));
        }
        s
    }
}
