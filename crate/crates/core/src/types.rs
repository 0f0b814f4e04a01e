//! Volumetric value types shared by every stage of the pipeline.
//!
//! All volumes use one axis order: `(depth, height, width)` with width
//! fastest; class-carrying volumes prepend the class axis, giving
//! `(class, depth, height, width)`. Data stored in `(W, H, L)` order elsewhere
//! must be transposed at the I/O boundary. Voxel spacing is always one unit.

use std::fmt;

use crate::error::{Error, Result};

/// Spatial shape `[depth, height, width]`.
pub type Shape3 = [usize; 3];

/// Number of voxels in a shape, or `None` on overflow.
pub fn voxel_count(shape: Shape3) -> Option<usize> {
    shape[0].checked_mul(shape[1])?.checked_mul(shape[2])
}

fn checked_count(shape: Shape3) -> Result<usize> {
    if shape.iter().any(|&s| s == 0) {
        return Err(Error::shape(format!("zero-sized axis in {shape:?}")));
    }
    voxel_count(shape).ok_or_else(|| Error::shape(format!("voxel count overflows for {shape:?}")))
}

/// Linear index of `(z, y, x)` in a row-major volume of `shape`.
#[inline]
pub fn linear_index(shape: Shape3, z: usize, y: usize, x: usize) -> usize {
    (z * shape[1] + y) * shape[2] + x
}

/// Inverse of [`linear_index`].
#[inline]
pub fn coords_of(shape: Shape3, idx: usize) -> [usize; 3] {
    let x = idx % shape[2];
    let y = (idx / shape[2]) % shape[1];
    let z = idx / (shape[1] * shape[2]);
    [z, y, x]
}

/// Dense scalar image.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    shape: Shape3,
    voxels: Vec<f32>,
}

impl Volume {
    pub fn new(shape: Shape3, voxels: Vec<f32>) -> Result<Self> {
        let n = checked_count(shape)?;
        if voxels.len() != n {
            return Err(Error::shape(format!(
                "{} voxels supplied for shape {shape:?} ({n} expected)",
                voxels.len()
            )));
        }
        if let Some(i) = voxels.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("voxel {i} of image volume")));
        }
        Ok(Self { shape, voxels })
    }

    pub fn zeros(shape: Shape3) -> Result<Self> {
        let n = checked_count(shape)?;
        Ok(Self {
            shape,
            voxels: vec![0.0; n],
        })
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.voxels[linear_index(self.shape, z, y, x)]
    }

    pub fn into_voxels(self) -> Vec<f32> {
        self.voxels
    }
}

/// Dense integer class map with classes in `0..num_classes`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVolume {
    shape: Shape3,
    classes: Vec<u8>,
    num_classes: usize,
}

impl LabelVolume {
    pub fn new(shape: Shape3, classes: Vec<u8>, num_classes: usize) -> Result<Self> {
        let n = checked_count(shape)?;
        if !(2..=256).contains(&num_classes) {
            return Err(Error::invalid(format!(
                "num_classes must be in 2..=256, got {num_classes}"
            )));
        }
        if classes.len() != n {
            return Err(Error::shape(format!(
                "{} labels supplied for shape {shape:?} ({n} expected)",
                classes.len()
            )));
        }
        if let Some(i) = classes.iter().position(|&c| c as usize >= num_classes) {
            return Err(Error::invalid(format!(
                "label {} at voxel {i} is not below num_classes={num_classes}",
                classes[i]
            )));
        }
        Ok(Self {
            shape,
            classes,
            num_classes,
        })
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn classes(&self) -> &[u8] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> u8 {
        self.classes[linear_index(self.shape, z, y, x)]
    }

    /// Binary mask of voxels equal to `class`.
    pub fn mask_of(&self, class: u8) -> Vec<bool> {
        self.classes.iter().map(|&c| c == class).collect()
    }

    pub fn count_of(&self, class: u8) -> usize {
        self.classes.iter().filter(|&&c| c == class).count()
    }
}

macro_rules! class_volume {
    ($name:ident, $what:literal) => {
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name {
            num_classes: usize,
            shape: Shape3,
            values: Vec<f64>,
        }

        impl $name {
            /// Builds the volume without checking value constraints beyond the
            /// element count.
            pub fn from_raw(num_classes: usize, shape: Shape3, values: Vec<f64>) -> Result<Self> {
                let n = checked_count(shape)?;
                if num_classes < 2 {
                    return Err(Error::invalid(format!(
                        concat!($what, " needs at least 2 classes, got {}"),
                        num_classes
                    )));
                }
                if values.len() != n * num_classes {
                    return Err(Error::shape(format!(
                        concat!($what, ": {} values for {} classes x {:?}"),
                        values.len(),
                        num_classes,
                        shape
                    )));
                }
                Ok(Self {
                    num_classes,
                    shape,
                    values,
                })
            }

            pub fn num_classes(&self) -> usize {
                self.num_classes
            }

            pub fn shape(&self) -> Shape3 {
                self.shape
            }

            /// Number of spatial voxels.
            pub fn voxels(&self) -> usize {
                self.values.len() / self.num_classes
            }

            pub fn values(&self) -> &[f64] {
                &self.values
            }

            pub fn values_mut(&mut self) -> &mut [f64] {
                &mut self.values
            }

            pub fn into_values(self) -> Vec<f64> {
                self.values
            }

            /// Plane of one class, length `voxels()`.
            pub fn class(&self, k: usize) -> &[f64] {
                let n = self.voxels();
                &self.values[k * n..(k + 1) * n]
            }

            pub fn at(&self, k: usize, voxel: usize) -> f64 {
                self.values[k * self.voxels() + voxel]
            }
        }
    };
}

class_volume!(ProbVolume, "probability volume");
class_volume!(LogitVolume, "logit volume");

impl ProbVolume {
    /// Builds a probability volume and checks the per-voxel simplex constraint.
    pub fn new(num_classes: usize, shape: Shape3, values: Vec<f64>) -> Result<Self> {
        let p = Self::from_raw(num_classes, shape, values)?;
        validate_prob_volume(&p).map_err(|v| Error::invalid(v.to_string()))?;
        Ok(p)
    }

    /// Per-voxel argmax, ties resolved toward the lowest class index.
    pub fn argmax(&self) -> LabelVolume {
        let n = self.voxels();
        let classes = (0..n)
            .map(|v| {
                let mut best = 0;
                for k in 1..self.num_classes {
                    if self.at(k, v) > self.at(best, v) {
                        best = k;
                    }
                }
                best as u8
            })
            .collect();
        LabelVolume::new(self.shape, classes, self.num_classes).expect("argmax labels are in range")
    }
}

impl LogitVolume {
    pub fn new(num_classes: usize, shape: Shape3, values: Vec<f64>) -> Result<Self> {
        let l = Self::from_raw(num_classes, shape, values)?;
        if let Some(i) = l.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("logit {i}")));
        }
        Ok(l)
    }

    pub fn zeros(num_classes: usize, shape: Shape3) -> Result<Self> {
        let n = checked_count(shape)?;
        Self::from_raw(num_classes, shape, vec![0.0; n * num_classes])
    }
}

/// One image with an optional annotation.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Volume,
    pub label: Option<LabelVolume>,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Volume, label: Option<LabelVolume>) -> Result<Self> {
        if let Some(l) = &label {
            if l.shape() != image.shape() {
                return Err(Error::shape(format!(
                    "label shape {:?} differs from image shape {:?}",
                    l.shape(),
                    image.shape()
                )));
            }
        }
        Ok(Self {
            id: id.into(),
            image,
            label,
        })
    }

    pub fn unlabeled(&self) -> Sample {
        Sample {
            id: self.id.clone(),
            image: self.image.clone(),
            label: None,
        }
    }
}

/// Tolerance on the per-voxel class sum of a probability volume.
pub const SIMPLEX_TOL: f64 = 1e-5;

/// First voxel that breaks the probability-simplex constraint.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbViolation {
    pub voxel: usize,
    pub coords: [usize; 3],
    pub class_sum: f64,
    /// Offending class when a single value lies outside `[0, 1]`.
    pub class: Option<usize>,
}

impl fmt::Display for ProbViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.class {
            Some(k) => write!(
                f,
                "voxel {} {:?}: class {k} outside [0, 1] (class sum {})",
                self.voxel, self.coords, self.class_sum
            ),
            None => write!(
                f,
                "voxel {} {:?}: class sum {} is not 1",
                self.voxel, self.coords, self.class_sum
            ),
        }
    }
}

/// Checks range and per-voxel sum-to-one of a probability volume.
pub fn validate_prob_volume(p: &ProbVolume) -> std::result::Result<(), ProbViolation> {
    let n = p.voxels();
    for v in 0..n {
        let mut sum = 0.0;
        let mut bad_class = None;
        for k in 0..p.num_classes() {
            let x = p.at(k, v);
            if !(0.0..=1.0).contains(&x) && bad_class.is_none() {
                bad_class = Some(k);
            }
            sum += x;
        }
        if bad_class.is_some() || !((sum - 1.0).abs() <= SIMPLEX_TOL) {
            return Err(ProbViolation {
                voxel: v,
                coords: coords_of(p.shape(), v),
                class_sum: sum,
                class: bad_class,
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_two_class_is_valid() {
        let p = ProbVolume::from_raw(2, [2, 2, 2], vec![0.5; 16]).unwrap();
        assert!(validate_prob_volume(&p).is_ok());
    }

    #[test]
    fn violation_reports_voxel_and_sum() {
        let mut vals = vec![0.5; 16];
        vals[3] = 0.7;
        vals[8 + 3] = 0.7;
        let p = ProbVolume::from_raw(2, [2, 2, 2], vals).unwrap();
        let err = validate_prob_volume(&p).unwrap_err();
        assert_eq!(err.voxel, 3);
        assert_eq!(err.coords, [0, 1, 1]);
        assert!((err.class_sum - 1.4).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_value_is_flagged() {
        let mut vals = vec![0.5; 16];
        vals[0] = 1.5;
        vals[8] = -0.5;
        let p = ProbVolume::from_raw(2, [2, 2, 2], vals).unwrap();
        let err = validate_prob_volume(&p).unwrap_err();
        assert_eq!(err.voxel, 0);
        assert_eq!(err.class, Some(0));
    }

    #[test]
    fn sample_rejects_mismatched_label() {
        let img = Volume::zeros([2, 2, 2]).unwrap();
        let lbl = LabelVolume::new([2, 2, 1], vec![0; 4], 2).unwrap();
        assert!(Sample::new("a", img, Some(lbl)).is_err());
    }

    #[test]
    fn label_values_must_be_below_k() {
        assert!(LabelVolume::new([1, 1, 2], vec![0, 2], 2).is_err());
        assert!(Volume::new([1, 1, 2], vec![0.0, f32::NAN]).is_err());
    }

    #[test]
    fn argmax_breaks_ties_low() {
        let p = ProbVolume::from_raw(2, [1, 1, 2], vec![0.5, 0.2, 0.5, 0.8]).unwrap();
        assert_eq!(p.argmax().classes(), &[0, 1]);
    }

    #[test]
    fn index_roundtrip() {
        let s = [3, 4, 5];
        for i in 0..60 {
            let [z, y, x] = coords_of(s, i);
            assert_eq!(linear_index(s, z, y, x), i);
        }
    }
}
