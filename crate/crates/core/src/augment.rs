//! Input perturbations: single-cuboid CutMix and additive uniform noise.

use rand::Rng;

use crate::error::{Error, Result};
use crate::types::{linear_index, ProbVolume, Shape3, Volume};

/// Default CutMix cut fraction range.
pub const DEFAULT_CUT_RANGE: (f64, f64) = (0.25, 0.5);
/// Default noise amplitude.
pub const DEFAULT_NOISE: f64 = 0.2;

/// Binary mixing mask: `true` inside one axis-aligned cuboid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CutMixMask {
    shape: Shape3,
    origin: Shape3,
    size: Shape3,
    mask: Vec<bool>,
}

impl CutMixMask {
    pub fn from_box(shape: Shape3, origin: Shape3, size: Shape3) -> Result<Self> {
        if (0..3).any(|a| origin[a] + size[a] > shape[a]) {
            return Err(Error::shape(format!("box {origin:?}+{size:?} exceeds {shape:?}")));
        }
        let mut mask = vec![false; shape.iter().product()];
        for z in origin[0]..origin[0] + size[0] {
            for y in origin[1]..origin[1] + size[1] {
                let s = linear_index(shape, z, y, origin[2]);
                mask[s..s + size[2]].iter_mut().for_each(|m| *m = true);
            }
        }
        Ok(CutMixMask {
            shape,
            origin,
            size,
            mask,
        })
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    /// `(origin, size)` of the cuboid.
    pub fn cuboid(&self) -> (Shape3, Shape3) {
        (self.origin, self.size)
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn fraction(&self) -> f64 {
        self.size.iter().product::<usize>() as f64 / self.mask.len() as f64
    }
}

/// Draws a cuboid whose volume fraction lies in `[r_min, r_max]`: the side
/// lengths are chosen uniformly among all admissible integer triples, then
/// the origin uniformly among all in-bounds placements.
pub fn sample_cutmix_mask<R: Rng + ?Sized>(shape: Shape3, ratio_range: (f64, f64), rng: &mut R) -> Result<CutMixMask> {
    let (lo, hi) = ratio_range;
    if !(0.0 < lo && lo <= hi && hi < 1.0) {
        return Err(Error::invalid(format!("cut ratio range ({lo}, {hi}) must satisfy 0 < min <= max < 1")));
    }
    let total = shape.iter().product::<usize>() as f64;
    // integer bounds on the box volume, with a little slack for rounding
    let vmin = (lo * total - 1e-9).ceil() as usize;
    let vmax = (hi * total + 1e-9).floor() as usize;
    let mut sides = Vec::new();
    for d in 1..=shape[0] {
        for h in 1..=shape[1] {
            let dh = d * h;
            if dh > vmax {
                break;
            }
            let wlo = vmin.div_ceil(dh).max(1);
            let whi = (vmax / dh).min(shape[2]);
            for w in wlo..=whi {
                sides.push([d, h, w]);
            }
        }
    }
    if sides.is_empty() {
        return Err(Error::shape(format!("no cuboid in {shape:?} realises a cut fraction in [{lo}, {hi}]")));
    }
    let size = sides[rng.gen_range(0..sides.len())];
    let origin = [0, 1, 2].map(|a| rng.gen_range(0..=shape[a] - size[a]));
    CutMixMask::from_box(shape, origin, size)
}

/// `out = m*a + (1-m)*b` over `channels` stacked spatial blocks.
pub fn mix_slices<T: Copy>(a: &[T], b: &[T], mask: &[bool]) -> Result<Vec<T>> {
    let n = mask.len();
    if a.len() != b.len() || n == 0 || a.len() % n != 0 {
        return Err(Error::shape(format!(
            "cannot mix {} and {} values with a {n}-voxel mask",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter()
        .zip(b)
        .enumerate()
        .map(|(i, (&x, &y))| if mask[i % n] { x } else { y })
        .collect())
}

pub fn cutmix_volume(a: &Volume, b: &Volume, mask: &CutMixMask) -> Result<Volume> {
    if a.shape() != mask.shape || b.shape() != mask.shape {
        return Err(Error::shape(format!(
            "volumes {:?}/{:?} vs mask {:?}",
            a.shape(),
            b.shape(),
            mask.shape
        )));
    }
    Volume::new(mask.shape, mix_slices(a.voxels(), b.voxels(), &mask.mask)?)
}

/// Mixes probability maps; the mask is broadcast over the class axis.
pub fn cutmix_probs(a: &ProbVolume, b: &ProbVolume, mask: &CutMixMask) -> Result<ProbVolume> {
    if a.shape() != mask.shape || b.shape() != mask.shape || a.num_classes() != b.num_classes() {
        return Err(Error::shape(format!(
            "probabilities {}x{:?}/{}x{:?} vs mask {:?}",
            a.num_classes(),
            a.shape(),
            b.num_classes(),
            b.shape(),
            mask.shape
        )));
    }
    ProbVolume::from_raw(a.num_classes(), mask.shape, mix_slices(a.values(), b.values(), &mask.mask)?)
}

/// Adds i.i.d. `U(-amplitude, amplitude)` noise to every voxel.
pub fn add_uniform_noise<R: Rng + ?Sized>(v: &Volume, amplitude: f64, rng: &mut R) -> Result<Volume> {
    if !(amplitude >= 0.0 && amplitude.is_finite()) {
        return Err(Error::invalid(format!("noise amplitude must be >= 0, got {amplitude}")));
    }
    if amplitude == 0.0 {
        return Ok(v.clone());
    }
    let out = v
        .voxels()
        .iter()
        .map(|&x| (x as f64 + rng.gen_range(-amplitude..amplitude)) as f32)
        .collect();
    Volume::new(v.shape(), out)
}
