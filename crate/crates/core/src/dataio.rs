//! Volume files, synthetic data, dataset splits, patches and batches.
//!
//! # VOL1 layout
//!
//! ```text
//! "VOL1" | {"shape":[D,H,W],"dtype":"f32"|"u8","kind":"image"|"label","num_classes":K}\n | payload
//! ```
//!
//! The payload is little-endian, row-major with width fastest, and holds
//! exactly `D*H*W` elements. `num_classes` is only written for labels.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{linear_index, voxel_count, LabelVolume, Sample, Shape3, Volume};

pub const VOL1_MAGIC: &[u8; 4] = b"VOL1";

/// Either kind of volume a VOL1 file can hold.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyVolume {
    Image(Volume),
    Label(LabelVolume),
}

impl AnyVolume {
    pub fn into_image(self) -> Result<Volume> {
        match self {
            AnyVolume::Image(v) => Ok(v),
            AnyVolume::Label(_) => Err(Error::Header("expected an image volume, found a label volume".into())),
        }
    }

    pub fn into_label(self) -> Result<LabelVolume> {
        match self {
            AnyVolume::Label(v) => Ok(v),
            AnyVolume::Image(_) => Err(Error::Header("expected a label volume, found an image volume".into())),
        }
    }
}

impl From<Volume> for AnyVolume {
    fn from(v: Volume) -> Self {
        AnyVolume::Image(v)
    }
}

impl From<LabelVolume> for AnyVolume {
    fn from(v: LabelVolume) -> Self {
        AnyVolume::Label(v)
    }
}

#[derive(Serialize, Deserialize)]
struct VolHeader {
    shape: [usize; 3],
    dtype: String,
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    num_classes: Option<usize>,
}

/// Writes `bytes` to a sibling temp file and renames it into place.
pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Serializes a volume into VOL1 bytes.
pub fn encode_volume(v: &AnyVolume) -> Result<Vec<u8>> {
    let (shape, header) = match v {
        AnyVolume::Image(img) => (
            img.shape(),
            VolHeader {
                shape: img.shape(),
                dtype: "f32".into(),
                kind: "image".into(),
                num_classes: None,
            },
        ),
        AnyVolume::Label(lbl) => (
            lbl.shape(),
            VolHeader {
                shape: lbl.shape(),
                dtype: "u8".into(),
                kind: "label".into(),
                num_classes: Some(lbl.num_classes()),
            },
        ),
    };
    let n = voxel_count(shape).ok_or_else(|| Error::shape(format!("shape {shape:?} overflows")))?;
    let json = serde_json::to_string(&header)?;
    let mut out = Vec::with_capacity(4 + json.len() + 1 + n * 4);
    out.extend_from_slice(VOL1_MAGIC);
    out.extend_from_slice(json.as_bytes());
    out.push(b'\n');
    match v {
        AnyVolume::Image(img) => img.voxels().iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        AnyVolume::Label(lbl) => out.extend_from_slice(lbl.classes()),
    }
    Ok(out)
}

/// Parses VOL1 bytes.
pub fn decode_volume(bytes: &[u8]) -> Result<AnyVolume> {
    let (header, payload) = split_header(bytes, VOL1_MAGIC)?;
    let h: VolHeader = serde_json::from_slice(header).map_err(|e| Error::Header(e.to_string()))?;
    let n = voxel_count(h.shape).ok_or_else(|| Error::shape(format!("shape {:?} overflows", h.shape)))?;
    let width = match h.dtype.as_str() {
        "f32" => 4,
        "u8" => 1,
        other => return Err(Error::UnknownDtype(other.to_string())),
    };
    let expected = n
        .checked_mul(width)
        .ok_or_else(|| Error::shape(format!("payload size overflows for {:?}", h.shape)))?;
    if payload.len() != expected {
        return Err(Error::LengthMismatch {
            expected,
            found: payload.len(),
        });
    }
    match (h.kind.as_str(), h.dtype.as_str()) {
        ("image", "f32") => {
            let vox = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Ok(AnyVolume::Image(Volume::new(h.shape, vox)?))
        }
        ("image", "u8") => Ok(AnyVolume::Image(Volume::new(
            h.shape,
            payload.iter().map(|&b| b as f32).collect(),
        )?)),
        ("label", "u8") => {
            let k = h
                .num_classes
                .unwrap_or_else(|| payload.iter().copied().max().map_or(2, |m| (m as usize + 1).max(2)));
            Ok(AnyVolume::Label(LabelVolume::new(h.shape, payload.to_vec(), k)?))
        }
        ("label", d) => Err(Error::Header(format!("label volumes must be u8, found {d}"))),
        (kind, _) => Err(Error::Header(format!("unknown kind {kind:?}"))),
    }
}

/// Splits `magic | json line | payload`, shared with the other containers.
pub(crate) fn split_header<'a>(bytes: &'a [u8], magic: &[u8; 4]) -> Result<(&'a [u8], &'a [u8])> {
    if bytes.len() < 4 || &bytes[..4] != magic {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned(),
        });
    }
    let rest = &bytes[4..];
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Header("header line is not terminated".into()))?;
    Ok((&rest[..nl], &rest[nl + 1..]))
}

pub fn write_volume(v: &AnyVolume, path: impl AsRef<Path>) -> Result<()> {
    atomic_write(path.as_ref(), &encode_volume(v)?)
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<AnyVolume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes)
}

/// Writes a `K`-class probability map as an f32 image of shape `[K*D, H, W]`
/// (the class volumes stacked along depth).
pub fn write_prob_volume(p: &crate::types::ProbVolume, path: impl AsRef<Path>) -> Result<()> {
    let [d, h, w] = p.shape();
    let vox = p.values().iter().map(|&x| x as f32).collect();
    write_volume(&AnyVolume::Image(Volume::new([p.num_classes() * d, h, w], vox)?), path)
}

// ---------------------------------------------------------------------------
// synthetic data

/// Range of the foreground fraction enforced by the generator.
pub const FG_FRACTION: (f64, f64) = (0.03, 0.18);

#[derive(Clone, Copy, Debug)]
struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    /// Normalised radius: `<= 1` inside.
    fn rho(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Smooth low-frequency texture: trilinearly interpolated lattice noise.
fn value_noise(rng: &mut ChaCha8Rng, shape: Shape3, cell: usize) -> Vec<f64> {
    let g: Vec<usize> = shape.iter().map(|&s| s / cell + 2).collect();
    let lattice: Vec<f64> = (0..g[0] * g[1] * g[2]).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let at = |z: usize, y: usize, x: usize| lattice[(z * g[1] + y) * g[2] + x];
    let mut out = Vec::with_capacity(shape.iter().product());
    for z in 0..shape[0] {
        let (fz, tz) = ((z / cell), (z % cell) as f64 / cell as f64);
        for y in 0..shape[1] {
            let (fy, ty) = ((y / cell), (y % cell) as f64 / cell as f64);
            for x in 0..shape[2] {
                let (fx, tx) = ((x / cell), (x % cell) as f64 / cell as f64);
                let s = |t: f64| t * t * (3.0 - 2.0 * t);
                let (sz, sy, sx) = (s(tz), s(ty), s(tx));
                let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
                let c00 = lerp(at(fz, fy, fx), at(fz, fy, fx + 1), sx);
                let c01 = lerp(at(fz, fy + 1, fx), at(fz, fy + 1, fx + 1), sx);
                let c10 = lerp(at(fz + 1, fy, fx), at(fz + 1, fy, fx + 1), sx);
                let c11 = lerp(at(fz + 1, fy + 1, fx), at(fz + 1, fy + 1, fx + 1), sx);
                out.push(lerp(lerp(c00, c01, sy), lerp(c10, c11, sy), sz));
            }
        }
    }
    out
}

fn sample_blobs(rng: &mut ChaCha8Rng, shape: Shape3) -> Result<(Vec<Ellipsoid>, Vec<u8>)> {
    let n: usize = shape.iter().product();
    let min_side = *shape.iter().min().unwrap() as f64;
    for _ in 0..1000 {
        let count = rng.gen_range(1..=3);
        let blobs: Vec<Ellipsoid> = (0..count)
            .map(|_| {
                let radii = [0; 3].map(|_| rng.gen_range(0.12..0.3) * min_side);
                let center = [0, 1, 2].map(|a| {
                    let s = shape[a] as f64;
                    rng.gen_range(0.25 * s..0.75 * s)
                });
                Ellipsoid { center, radii }
            })
            .collect();
        let mut mask = vec![0u8; n];
        for (i, m) in mask.iter_mut().enumerate() {
            let p = crate::types::coords_of(shape, i).map(|c| c as f64);
            if blobs.iter().any(|b| b.rho(p) <= 1.0) {
                *m = 1;
            }
        }
        let frac = mask.iter().filter(|&&m| m == 1).count() as f64 / n as f64;
        if (FG_FRACTION.0..=FG_FRACTION.1).contains(&frac) {
            return Ok((blobs, mask));
        }
    }
    Err(Error::shape(format!("could not place foreground blobs in {shape:?}")))
}

/// Deterministic synthetic dataset of `n` labeled volumes.
///
/// Each volume holds 1–3 ellipsoids (class 1) whose intensity falls off
/// smoothly from the centre. `difficulty` in `[0, 1]` scales background
/// texture (including blob-like bright patches), voxel noise, a linear
/// intensity drift and a per-volume contrast loss. At difficulty 0 the
/// background is exactly 0 and every foreground voxel is at least 0.6.
pub fn generate_synthetic_dataset(seed: u64, n: usize, shape: Shape3, difficulty: f64) -> Result<Vec<Sample>> {
    if shape.iter().any(|&s| s < 16) {
        return Err(Error::shape(format!("synthetic volumes need >= 16 voxels per axis, got {shape:?}")));
    }
    if n < 2 {
        return Err(Error::invalid(format!("need at least 2 volumes, got {n}")));
    }
    if !(0.0..=1.0).contains(&difficulty) {
        return Err(Error::invalid(format!("difficulty {difficulty} outside [0, 1]")));
    }
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            synth_one(&mut rng, shape, difficulty).and_then(|(img, lbl)| Sample::new(format!("s{i:03}"), img, Some(lbl)))
        })
        .collect()
}

fn synth_one(rng: &mut ChaCha8Rng, shape: Shape3, d: f64) -> Result<(Volume, LabelVolume)> {
    let (blobs, mask) = sample_blobs(rng, shape)?;
    let texture = value_noise(rng, shape, 8);
    let distractor = value_noise(rng, shape, 4);
    let axis = rng.gen_range(0..3);
    let drift_sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    // per-volume appearance: contrast loss, brightness offset, clutter level
    let gain = 1.0 - d * rng.gen_range(0.0..0.6);
    let offset = d * rng.gen_range(-0.25..0.25);
    let clutter = d * rng.gen_range(0.3..1.0);
    let mut img = Vec::with_capacity(mask.len());
    for (i, &m) in mask.iter().enumerate() {
        let c = crate::types::coords_of(shape, i);
        let p = c.map(|v| v as f64);
        let mut v = if m == 1 {
            let rho = blobs.iter().map(|b| b.rho(p)).fold(f64::INFINITY, f64::min);
            gain * (0.6 + 0.4 * (1.0 - rho))
        } else {
            0.0
        };
        if d > 0.0 {
            v += d * 0.25 * texture[i];
            // sparse bright patches that mimic foreground locally
            v += clutter * (distractor[i] - 0.45).max(0.0) * 2.0;
            v += offset;
            v += d * 0.2 * drift_sign * (c[axis] as f64 / shape[axis] as f64 - 0.5);
            v += d * 0.15 * rng.gen_range(-1.0..1.0);
        }
        img.push(v as f32);
    }
    Ok((Volume::new(shape, img)?, LabelVolume::new(shape, mask, 2)?))
}

// ---------------------------------------------------------------------------
// splits, patches, batches

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub labeled: Vec<Sample>,
    pub unlabeled: Vec<Sample>,
    pub seed: u64,
}

/// Deterministic shuffle, then `floor(n * ratio)` labeled samples; the rest
/// lose their labels.
pub fn split_dataset(samples: &[Sample], labeled_ratio: f64, seed: u64) -> Result<DatasetSplit> {
    if !(labeled_ratio > 0.0 && labeled_ratio < 1.0) {
        return Err(Error::invalid(format!("labeled ratio {labeled_ratio} outside (0, 1)")));
    }
    let n_lab = (samples.len() as f64 * labeled_ratio + 1e-9).floor() as usize;
    if n_lab == 0 {
        return Err(Error::invalid(format!(
            "ratio {labeled_ratio} of {} samples leaves no labeled data",
            samples.len()
        )));
    }
    if n_lab >= samples.len() {
        return Err(Error::invalid("split leaves no unlabeled data"));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut labeled = Vec::with_capacity(n_lab);
    let mut unlabeled = Vec::with_capacity(samples.len() - n_lab);
    for (rank, &i) in order.iter().enumerate() {
        let s = &samples[i];
        if rank < n_lab {
            if s.label.is_none() {
                return Err(Error::invalid(format!("sample {} has no label to keep", s.id)));
            }
            labeled.push(s.clone());
        } else {
            unlabeled.push(s.unlabeled());
        }
    }
    Ok(DatasetSplit { labeled, unlabeled, seed })
}

fn crop<T: Copy>(src: &[T], shape: Shape3, origin: Shape3, size: Shape3) -> Vec<T> {
    let mut out = Vec::with_capacity(size.iter().product());
    for z in 0..size[0] {
        for y in 0..size[1] {
            let start = linear_index(shape, origin[0] + z, origin[1] + y, origin[2]);
            out.extend_from_slice(&src[start..start + size[2]]);
        }
    }
    out
}

/// Crops an image volume.
pub fn crop_volume(v: &Volume, origin: Shape3, size: Shape3) -> Result<Volume> {
    let shape = v.shape();
    if (0..3).any(|a| size[a] == 0 || origin[a] + size[a] > shape[a]) {
        return Err(Error::shape(format!("patch {size:?} at {origin:?} exceeds volume {shape:?}")));
    }
    Volume::new(size, crop(v.voxels(), shape, origin, size))
}

/// Crops image and label (when present) at the same origin.
pub fn extract_patch(sample: &Sample, origin: Shape3, patch_size: Shape3) -> Result<Sample> {
    let shape = sample.image.shape();
    if (0..3).any(|a| patch_size[a] == 0 || origin[a] + patch_size[a] > shape[a]) {
        return Err(Error::shape(format!(
            "patch {patch_size:?} at {origin:?} exceeds volume {shape:?}"
        )));
    }
    let image = Volume::new(patch_size, crop(sample.image.voxels(), shape, origin, patch_size))?;
    let label = match &sample.label {
        Some(l) => Some(LabelVolume::new(
            patch_size,
            crop(l.classes(), shape, origin, patch_size),
            l.num_classes(),
        )?),
        None => None,
    };
    Sample::new(sample.id.clone(), image, label)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub labeled_images: Vec<Volume>,
    pub labeled_targets: Vec<LabelVolume>,
    pub unlabeled_images: Vec<Volume>,
    pub patch_size: Shape3,
}

fn uniform_origin<R: Rng + ?Sized>(rng: &mut R, shape: Shape3, p: Shape3) -> Shape3 {
    [0, 1, 2].map(|a| rng.gen_range(0..=shape[a] - p[a]))
}

/// `batch_size / 2` labeled and `batch_size / 2` unlabeled patches, drawn with
/// replacement. Half of the labeled draws (in expectation) are forced to
/// contain at least one foreground voxel.
pub fn make_batch<R: Rng + ?Sized>(
    split: &DatasetSplit,
    batch_size: usize,
    patch_size: Shape3,
    rng: &mut R,
) -> Result<Batch> {
    if batch_size == 0 || batch_size % 2 != 0 {
        return Err(Error::invalid(format!("batch size must be even and positive, got {batch_size}")));
    }
    if split.labeled.is_empty() {
        return Err(Error::invalid("labeled pool is empty"));
    }
    if split.unlabeled.is_empty() {
        return Err(Error::invalid("unlabeled pool is empty"));
    }
    let half = batch_size / 2;
    let mut labeled_images = Vec::with_capacity(half);
    let mut labeled_targets = Vec::with_capacity(half);
    for _ in 0..half {
        let s = &split.labeled[rng.gen_range(0..split.labeled.len())];
        let shape = s.image.shape();
        check_fits(shape, patch_size)?;
        let force = rng.gen_bool(0.5);
        let label = s.label.as_ref().expect("labeled pool carries labels");
        let fg: Vec<usize> = if force {
            label.classes().iter().enumerate().filter(|(_, &c)| c != 0).map(|(i, _)| i).collect()
        } else {
            Vec::new()
        };
        let origin = if fg.is_empty() {
            uniform_origin(rng, shape, patch_size)
        } else {
            let c = crate::types::coords_of(shape, fg[rng.gen_range(0..fg.len())]);
            [0, 1, 2].map(|a| {
                let lo = (c[a] + 1).saturating_sub(patch_size[a]);
                let hi = c[a].min(shape[a] - patch_size[a]);
                rng.gen_range(lo..=hi)
            })
        };
        let p = extract_patch(s, origin, patch_size)?;
        labeled_images.push(p.image);
        labeled_targets.push(p.label.expect("cropped label"));
    }
    let mut unlabeled_images = Vec::with_capacity(half);
    for _ in 0..half {
        let s = &split.unlabeled[rng.gen_range(0..split.unlabeled.len())];
        check_fits(s.image.shape(), patch_size)?;
        let origin = uniform_origin(rng, s.image.shape(), patch_size);
        unlabeled_images.push(extract_patch(s, origin, patch_size)?.image);
    }
    Ok(Batch {
        labeled_images,
        labeled_targets,
        unlabeled_images,
        patch_size,
    })
}

fn check_fits(shape: Shape3, patch: Shape3) -> Result<()> {
    if (0..3).any(|a| patch[a] > shape[a]) {
        return Err(Error::shape(format!("patch {patch:?} larger than volume {shape:?}")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// manifests

/// On-disk dataset description. Paths point at image files named
/// `<id>_img.vol1`; labels live next to them as `<id>_lbl.vol1`. Relative
/// paths are resolved against the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub labeled: Vec<PathBuf>,
    pub unlabeled: Vec<PathBuf>,
    pub seed: u64,
    /// Held-out labeled volumes used for validation during training.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub validation: Vec<PathBuf>,
}

pub fn image_file_name(id: &str) -> String {
    format!("{id}_img.vol1")
}

pub fn label_path_for(image: &Path) -> Result<PathBuf> {
    let name = image.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    let id = name
        .strip_suffix("_img.vol1")
        .ok_or_else(|| Error::invalid(format!("{} does not follow <id>_img.vol1", image.display())))?;
    Ok(image.with_file_name(format!("{id}_lbl.vol1")))
}

fn id_of(image: &Path) -> String {
    image
        .file_name()
        .and_then(|n| n.to_str())
        .and_then(|n| n.strip_suffix("_img.vol1"))
        .unwrap_or_default()
        .to_string()
}

fn write_sample(dir: &Path, s: &Sample, with_label: bool) -> Result<PathBuf> {
    let rel = PathBuf::from(image_file_name(&s.id));
    write_volume(&AnyVolume::Image(s.image.clone()), dir.join(&rel))?;
    if with_label {
        let lbl = s
            .label
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("sample {} has no label", s.id)))?;
        write_volume(&AnyVolume::Label(lbl.clone()), label_path_for(&dir.join(&rel))?)?;
    }
    Ok(rel)
}

/// Writes every volume of the split (plus validation samples) into `dir` and
/// a `manifest.json` describing them.
pub fn write_dataset(dir: impl AsRef<Path>, split: &DatasetSplit, validation: &[Sample]) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let labeled = split.labeled.iter().map(|s| write_sample(dir, s, true)).collect::<Result<Vec<_>>>()?;
    let unlabeled = split
        .unlabeled
        .iter()
        .map(|s| write_sample(dir, s, false))
        .collect::<Result<Vec<_>>>()?;
    let validation = validation.iter().map(|s| write_sample(dir, s, true)).collect::<Result<Vec<_>>>()?;
    let m = Manifest {
        labeled,
        unlabeled,
        seed: split.seed,
        validation,
    };
    let path = dir.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&m)?;
    text.push('\n');
    atomic_write(&path, text.as_bytes())?;
    Ok(path)
}

/// Loaded manifest: the training split and the labeled validation samples.
#[derive(Clone, Debug)]
pub struct LoadedDataset {
    pub split: DatasetSplit,
    pub validation: Vec<Sample>,
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<LoadedDataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: Manifest = serde_json::from_str(&text)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let load = |p: &PathBuf, with_label: bool| -> Result<Sample> {
        let img_path = base.join(p);
        let image = read_volume(&img_path)?.into_image()?;
        let label = if with_label {
            Some(read_volume(label_path_for(&img_path)?)?.into_label()?)
        } else {
            None
        };
        Sample::new(id_of(&img_path), image, label)
    };
    let labeled = m.labeled.iter().map(|p| load(p, true)).collect::<Result<Vec<_>>>()?;
    let unlabeled = m.unlabeled.iter().map(|p| load(p, false)).collect::<Result<Vec<_>>>()?;
    let validation = m.validation.iter().map(|p| load(p, true)).collect::<Result<Vec<_>>>()?;
    Ok(LoadedDataset {
        split: DatasetSplit {
            labeled,
            unlabeled,
            seed: m.seed,
        },
        validation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: Shape3) -> Volume {
        let n: usize = shape.iter().product();
        Volume::new(shape, (0..n).map(|i| i as f32 * 0.5 - 3.0).collect()).unwrap()
    }

    #[test]
    fn vol1_roundtrip_image_and_label() {
        let dir = tempfile::tempdir().unwrap();
        let img = AnyVolume::Image(Volume::zeros([2, 2, 2]).unwrap());
        write_volume(&img, dir.path().join("a.vol1")).unwrap();
        assert_eq!(read_volume(dir.path().join("a.vol1")).unwrap(), img);

        let lbl = AnyVolume::Label(LabelVolume::new([2, 2, 2], vec![0, 1, 1, 0, 0, 0, 1, 1], 2).unwrap());
        let bytes = encode_volume(&lbl).unwrap();
        let header = std::str::from_utf8(&bytes[4..bytes.iter().position(|&b| b == b'\n').unwrap()]).unwrap();
        assert_eq!(header, r#"{"shape":[2,2,2],"dtype":"u8","kind":"label","num_classes":2}"#);
        assert_eq!(decode_volume(&bytes).unwrap(), lbl);
    }

    #[test]
    fn vol1_errors() {
        let bytes = encode_volume(&AnyVolume::Image(ramp([2, 3, 4]))).unwrap();
        assert!(matches!(
            decode_volume(&bytes[..bytes.len() - 1]),
            Err(Error::LengthMismatch { .. })
        ));
        let mut bad = bytes.clone();
        bad[3] = b'2';
        assert!(matches!(decode_volume(&bad), Err(Error::BadMagic { .. })));
        let odd = b"VOL1{\"shape\":[1,1,1],\"dtype\":\"f16\",\"kind\":\"image\"}\n\0\0";
        assert!(matches!(decode_volume(odd), Err(Error::UnknownDtype(_))));
    }

    #[test]
    fn vol1_preserves_bits() {
        let v = Volume::new([1, 1, 3], vec![-0.0, f32::MIN_POSITIVE / 4.0, 1.0e30]).unwrap();
        let back = decode_volume(&encode_volume(&AnyVolume::Image(v.clone())).unwrap())
            .unwrap()
            .into_image()
            .unwrap();
        let bits = |v: &Volume| v.voxels().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&v), bits(&back));
    }

    #[test]
    fn synthetic_is_deterministic_and_clean_at_zero_difficulty() {
        let a = generate_synthetic_dataset(7, 3, [16, 16, 16], 0.0).unwrap();
        let b = generate_synthetic_dataset(7, 3, [16, 16, 16], 0.0).unwrap();
        assert_eq!(a, b);
        for s in &a {
            let lbl = s.label.as_ref().unwrap();
            for (&v, &c) in s.image.voxels().iter().zip(lbl.classes()) {
                assert_eq!((v > 0.3) as u8, c);
            }
        }
        assert!(generate_synthetic_dataset(7, 1, [16, 16, 16], 0.0).is_err());
        assert!(generate_synthetic_dataset(7, 2, [8, 16, 16], 0.0).is_err());
    }

    fn toy_samples(n: usize) -> Vec<Sample> {
        (0..n)
            .map(|i| {
                let lbl = LabelVolume::new([2, 2, 2], vec![(i % 2) as u8; 8], 2).unwrap();
                Sample::new(format!("v{i}"), ramp([2, 2, 2]), Some(lbl)).unwrap()
            })
            .collect()
    }

    #[test]
    fn split_counts_and_determinism() {
        let s = toy_samples(20);
        let sp = split_dataset(&s, 0.1, 3).unwrap();
        assert_eq!((sp.labeled.len(), sp.unlabeled.len()), (2, 18));
        assert!(sp.unlabeled.iter().all(|s| s.label.is_none()));
        let a = split_dataset(&s, 0.5, 9).unwrap();
        let b = split_dataset(&s, 0.5, 9).unwrap();
        let ids = |d: &DatasetSplit| d.labeled.iter().map(|s| s.id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&a), ids(&b));
        assert!(split_dataset(&s, 0.04, 3).is_err());
        assert!(split_dataset(&s, 1.0, 3).is_err());
    }

    #[test]
    fn patch_extraction() {
        let full = ramp([32, 32, 32]);
        let s = Sample::new("x", full.clone(), None).unwrap();
        assert_eq!(extract_patch(&s, [0, 0, 0], [32, 32, 32]).unwrap(), s);
        let p = extract_patch(&s, [8, 8, 8], [16, 16, 16]).unwrap();
        assert_eq!(p.image.get(0, 0, 0), full.get(8, 8, 8));
        assert_eq!(p.image.get(15, 3, 7), full.get(23, 11, 15));
        assert!(extract_patch(&s, [17, 0, 0], [16, 16, 16]).is_err());
    }

    #[test]
    fn batch_parity_and_errors() {
        let data = generate_synthetic_dataset(1, 6, [16, 16, 16], 0.5).unwrap();
        let split = split_dataset(&data, 0.5, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = make_batch(&split, 4, [8, 8, 8], &mut rng).unwrap();
        assert_eq!(b.labeled_images.len(), 2);
        assert_eq!(b.labeled_targets.len(), 2);
        assert_eq!(b.unlabeled_images.len(), 2);
        let again = make_batch(&split, 4, [8, 8, 8], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(b, again);
        assert!(make_batch(&split, 3, [8, 8, 8], &mut rng).is_err());
        let empty = DatasetSplit {
            labeled: vec![],
            ..split.clone()
        };
        assert!(make_batch(&empty, 4, [8, 8, 8], &mut rng).is_err());
    }

    #[test]
    fn forced_draws_contain_foreground() {
        let data = generate_synthetic_dataset(2, 4, [32, 32, 32], 0.0).unwrap();
        let split = split_dataset(&data, 0.5, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut with_fg = 0;
        let draws = 200;
        for _ in 0..draws / 2 {
            let b = make_batch(&split, 4, [8, 8, 8], &mut rng).unwrap();
            with_fg += b.labeled_targets.iter().filter(|t| t.count_of(1) > 0).count();
        }
        assert!(with_fg * 2 >= draws, "{with_fg} of {draws} patches contained foreground");
    }

    #[test]
    fn manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let data = generate_synthetic_dataset(3, 4, [16, 16, 16], 0.3).unwrap();
        let split = split_dataset(&data, 0.5, 3).unwrap();
        let val = generate_synthetic_dataset(4, 2, [16, 16, 16], 0.3).unwrap();
        let val: Vec<Sample> = val
            .into_iter()
            .map(|mut s| {
                s.id = format!("val_{}", s.id);
                s
            })
            .collect();
        let path = write_dataset(dir.path(), &split, &val).unwrap();
        let loaded = load_manifest(&path).unwrap();
        assert_eq!(loaded.split, split);
        assert_eq!(loaded.validation, val);
    }
}
