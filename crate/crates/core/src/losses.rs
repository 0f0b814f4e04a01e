//! Training objectives: softmax, Dice and cross-entropy, pseudo-labels, and
//! the gated unified segmentation loss (USL) used for cross supervision.
//!
//! Every loss comes in two flavours: a value-only function, and a `*_grad`
//! variant returning the value together with its gradient with respect to the
//! logits (same class-major layout as [`LogitVolume::values`]). All arithmetic
//! is `f64`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{LabelVolume, LogitVolume, ProbVolume};

/// Smoothing constant of the Dice loss.
pub const DICE_EPS: f64 = 1e-5;
/// Lower clamp applied to every probability before taking a logarithm.
pub const LOG_CLAMP: f64 = 1e-7;

/// Per-voxel softmax over the class axis (max-subtracted).
pub fn softmax_probs(logits: &LogitVolume) -> ProbVolume {
    let k = logits.num_classes();
    let n = logits.voxels();
    let l = logits.values();
    let mut out = vec![0.0; k * n];
    for v in 0..n {
        let m = (0..k).map(|c| l[c * n + v]).fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for c in 0..k {
            let e = (l[c * n + v] - m).exp();
            out[c * n + v] = e;
            s += e;
        }
        for c in 0..k {
            out[c * n + v] /= s;
        }
    }
    ProbVolume::from_raw(k, logits.shape(), out).expect("softmax preserves shape")
}

/// Chains `dL/dprobs` through the softmax: `dz_k = s_k (g_k - sum_j s_j g_j)`.
fn softmax_backward(probs: &ProbVolume, dprobs: &[f64]) -> Vec<f64> {
    let k = probs.num_classes();
    let n = probs.voxels();
    let s = probs.values();
    let mut out = vec![0.0; k * n];
    for v in 0..n {
        let dotp: f64 = (0..k).map(|c| s[c * n + v] * dprobs[c * n + v]).sum();
        for c in 0..k {
            out[c * n + v] = s[c * n + v] * (dprobs[c * n + v] - dotp);
        }
    }
    out
}

fn check_labels(num_classes: usize, shape: [usize; 3], y: &LabelVolume) -> Result<()> {
    if y.shape() != shape {
        return Err(Error::shape(format!("labels {:?} vs predictions {:?}", y.shape(), shape)));
    }
    if y.num_classes() != num_classes {
        return Err(Error::shape(format!(
            "labels declare {} classes, predictions have {num_classes}",
            y.num_classes()
        )));
    }
    Ok(())
}

/// Soft Dice loss averaged over the foreground classes `1..K`.
pub fn dice_loss(probs: &ProbVolume, y: &LabelVolume) -> Result<f64> {
    Ok(dice_terms(probs, y, false)?.0)
}

/// Dice loss on softmaxed logits, with its gradient w.r.t. the logits.
pub fn dice_loss_grad(logits: &LogitVolume, y: &LabelVolume) -> Result<(f64, Vec<f64>)> {
    let probs = softmax_probs(logits);
    let (loss, dprobs) = dice_terms(&probs, y, true)?;
    Ok((loss, softmax_backward(&probs, &dprobs)))
}

fn dice_terms(probs: &ProbVolume, y: &LabelVolume, want_grad: bool) -> Result<(f64, Vec<f64>)> {
    let k = probs.num_classes();
    check_labels(k, probs.shape(), y)?;
    let n = probs.voxels();
    let labels = y.classes();
    let fg = (k - 1) as f64;
    let mut loss = 0.0;
    let mut grad = if want_grad { vec![0.0; k * n] } else { Vec::new() };
    for c in 1..k {
        let p = probs.class(c);
        let (mut inter, mut psum, mut ysum) = (0.0, 0.0, 0.0);
        for (pv, &lv) in p.iter().zip(labels) {
            let t = if lv as usize == c { 1.0 } else { 0.0 };
            inter += pv * t;
            psum += pv;
            ysum += t;
        }
        let num = 2.0 * inter + DICE_EPS;
        let den = psum + ysum + DICE_EPS;
        loss += (1.0 - num / den) / fg;
        if want_grad {
            let g = &mut grad[c * n..(c + 1) * n];
            for (gv, &lv) in g.iter_mut().zip(labels) {
                let t = if lv as usize == c { 1.0 } else { 0.0 };
                *gv = -(2.0 * t * den - num) / (den * den) / fg;
            }
        }
    }
    Ok((loss, grad))
}

/// Mean over voxels of `-log softmax(logits)[y]`.
pub fn ce_loss(logits: &LogitVolume, y: &LabelVolume) -> Result<f64> {
    Ok(ce_loss_grad(logits, y)?.0)
}

pub fn ce_loss_grad(logits: &LogitVolume, y: &LabelVolume) -> Result<(f64, Vec<f64>)> {
    let k = logits.num_classes();
    check_labels(k, logits.shape(), y)?;
    let n = logits.voxels();
    let l = logits.values();
    let labels = y.classes();
    let probs = softmax_probs(logits);
    let s = probs.values();
    let mut loss = 0.0;
    let mut grad = vec![0.0; k * n];
    for v in 0..n {
        let m = (0..k).map(|c| l[c * n + v]).fold(f64::NEG_INFINITY, f64::max);
        let lse = m + (0..k).map(|c| (l[c * n + v] - m).exp()).sum::<f64>().ln();
        let t = labels[v] as usize;
        loss += lse - l[t * n + v];
        for c in 0..k {
            let onehot = if c == t { 1.0 } else { 0.0 };
            grad[c * n + v] = (s[c * n + v] - onehot) / n as f64;
        }
    }
    Ok((loss / n as f64, grad))
}

/// Which supervised terms enter the objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum SupMode {
    Ce,
    Dice,
    #[default]
    CeDice,
}

impl FromStr for SupMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(SupMode::Ce),
            "dice" => Ok(SupMode::Dice),
            "ce+dice" | "dice+ce" => Ok(SupMode::CeDice),
            other => Err(Error::invalid(format!("unknown supervised loss mode {other:?}"))),
        }
    }
}

impl fmt::Display for SupMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SupMode::Ce => "ce",
            SupMode::Dice => "dice",
            SupMode::CeDice => "ce+dice",
        })
    }
}

/// Supervised loss of one network on one labeled sample.
pub fn supervised_term_grad(logits: &LogitVolume, y: &LabelVolume, mode: SupMode) -> Result<(f64, Vec<f64>)> {
    match mode {
        SupMode::Ce => ce_loss_grad(logits, y),
        SupMode::Dice => dice_loss_grad(logits, y),
        SupMode::CeDice => {
            let (a, mut ga) = dice_loss_grad(logits, y)?;
            let (b, gb) = ce_loss_grad(logits, y)?;
            for (x, y) in ga.iter_mut().zip(&gb) {
                *x += y;
            }
            Ok((a + b, ga))
        }
    }
}

/// `dice(A) + dice(B) + ce(A) + ce(B)` (or the selected subset), summed over
/// the labeled sub-batch.
pub fn supervised_loss(
    logits_a: &[LogitVolume],
    logits_b: &[LogitVolume],
    targets: &[LabelVolume],
    mode: SupMode,
) -> Result<f64> {
    if logits_a.len() != targets.len() || logits_b.len() != targets.len() {
        return Err(Error::shape(format!(
            "{} / {} predictions for {} targets",
            logits_a.len(),
            logits_b.len(),
            targets.len()
        )));
    }
    let mut total = 0.0;
    for ((a, b), y) in logits_a.iter().zip(logits_b).zip(targets) {
        total += supervised_term_grad(a, y, mode)?.0 + supervised_term_grad(b, y, mode)?.0;
    }
    Ok(total)
}

/// Pseudo-label representation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PseudoMode {
    Soft,
    Hard,
}

#[derive(Clone, Debug, PartialEq)]
pub enum PseudoLabel {
    Soft(ProbVolume),
    Hard(LabelVolume),
}

/// Softmax probabilities (soft) or per-voxel argmax with ties to the lowest
/// class (hard).
pub fn make_pseudo_label(logits: &LogitVolume, mode: PseudoMode) -> PseudoLabel {
    let probs = softmax_probs(logits);
    match mode {
        PseudoMode::Soft => PseudoLabel::Soft(probs),
        PseudoMode::Hard => PseudoLabel::Hard(probs.argmax()),
    }
}

/// Confidence thresholds of the gated loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UslConfig {
    pub t1: f64,
    pub t2: f64,
    /// Opt-in provisional gating for `K > 2`: gate on the partner's largest
    /// class probability; there is no background branch.
    #[serde(default)]
    pub multiclass: bool,
}

impl Default for UslConfig {
    fn default() -> Self {
        UslConfig {
            t1: 0.9,
            t2: 0.1,
            multiclass: false,
        }
    }
}

impl UslConfig {
    /// Thresholds with `0 < t2 < t1 < 1`.
    pub fn new(t1: f64, t2: f64) -> Result<Self> {
        if !(0.0 < t2 && t2 < t1 && t1 < 1.0) {
            return Err(Error::invalid(format!("thresholds need 0 < t2 < t1 < 1, got t1={t1} t2={t2}")));
        }
        Ok(UslConfig {
            t1,
            t2,
            multiclass: false,
        })
    }

    /// Thresholds outside the open unit interval, used to switch gates off
    /// (`t1 > 1`, `t2 < 0`) or to collapse the middle band (`t1 == t2`).
    pub fn degenerate(t1: f64, t2: f64) -> Result<Self> {
        if !(t1.is_finite() && t2.is_finite() && t2 <= t1) {
            return Err(Error::invalid(format!("thresholds need t2 <= t1, got t1={t1} t2={t2}")));
        }
        Ok(UslConfig {
            t1,
            t2,
            multiclass: false,
        })
    }

    /// Which branch applies to a partner foreground probability `p`.
    /// Values exactly on a threshold fall into the MSE branch.
    pub fn gate(&self, p: f64) -> Gate {
        if p > self.t1 {
            Gate::Foreground
        } else if p < self.t2 {
            Gate::Background
        } else {
            Gate::Mse
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gate {
    Foreground,
    Background,
    Mse,
}

/// Unsupervised loss family.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum UnsupMode {
    #[default]
    Usl,
    NllOnly,
    MseOnly,
}

impl FromStr for UnsupMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "usl" => Ok(UnsupMode::Usl),
            "nll" | "nll_only" => Ok(UnsupMode::NllOnly),
            "mse" | "mse_only" => Ok(UnsupMode::MseOnly),
            other => Err(Error::invalid(format!("unknown unsupervised loss mode {other:?}"))),
        }
    }
}

impl fmt::Display for UnsupMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UnsupMode::Usl => "usl",
            UnsupMode::NllOnly => "nll",
            UnsupMode::MseOnly => "mse",
        })
    }
}

/// Per-voxel branch of the unsupervised loss, as an explicit choice.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Branch {
    /// NLL towards `class`, weighted by the partner probability of that class
    /// (`weight_of_class`) or by one minus its foreground probability.
    Nll { class: usize, weight_of_class: bool },
    Mse,
}

/// Gated loss of `logits` against a fixed partner distribution `target`,
/// averaged over voxels, with its gradient w.r.t. `logits`.
pub fn unsup_loss_grad(
    logits: &LogitVolume,
    target: &ProbVolume,
    mode: UnsupMode,
    cfg: &UslConfig,
) -> Result<(f64, Vec<f64>)> {
    let k = logits.num_classes();
    if target.num_classes() != k || target.shape() != logits.shape() {
        return Err(Error::shape(format!(
            "pseudo-label {}x{:?} vs logits {}x{:?}",
            target.num_classes(),
            target.shape(),
            k,
            logits.shape()
        )));
    }
    if k != 2 && mode != UnsupMode::MseOnly && !cfg.multiclass {
        return Err(Error::invalid(format!(
            "gated loss is defined for two classes; got {k} (enable the multiclass flag)"
        )));
    }
    let n = logits.voxels();
    let probs = softmax_probs(logits);
    let s = probs.values();
    let t = target.values();
    let mut loss = 0.0;
    let mut dprobs = vec![0.0; k * n];
    let inv_n = 1.0 / n as f64;
    for v in 0..n {
        let branch = voxel_branch(t, k, n, v, mode, cfg);
        match branch {
            Branch::Nll { class, weight_of_class } => {
                let pc = t[class * n + v];
                let w = if weight_of_class { pc } else { 1.0 - t[n + v] };
                let q = s[class * n + v];
                let qc = q.max(LOG_CLAMP);
                loss += -w * qc.ln();
                if q > LOG_CLAMP {
                    dprobs[class * n + v] = -w / q * inv_n;
                }
            }
            Branch::Mse => {
                let mut acc = 0.0;
                for c in 0..k {
                    let d = s[c * n + v] - t[c * n + v];
                    acc += d * d;
                    dprobs[c * n + v] = 2.0 * d / k as f64 * inv_n;
                }
                loss += acc / k as f64;
            }
        }
    }
    Ok((loss * inv_n, softmax_backward(&probs, &dprobs)))
}

fn voxel_branch(t: &[f64], k: usize, n: usize, v: usize, mode: UnsupMode, cfg: &UslConfig) -> Branch {
    if k == 2 {
        let p = t[n + v];
        return match mode {
            UnsupMode::MseOnly => Branch::Mse,
            UnsupMode::NllOnly => {
                // hard label, ties towards background
                if p > t[v] {
                    Branch::Nll { class: 1, weight_of_class: true }
                } else {
                    Branch::Nll { class: 0, weight_of_class: false }
                }
            }
            UnsupMode::Usl => match cfg.gate(p) {
                Gate::Foreground => Branch::Nll { class: 1, weight_of_class: true },
                Gate::Background => Branch::Nll { class: 0, weight_of_class: false },
                Gate::Mse => Branch::Mse,
            },
        };
    }
    if mode == UnsupMode::MseOnly {
        return Branch::Mse;
    }
    let (arg, pmax) = (0..k).fold((0, f64::NEG_INFINITY), |(a, m), c| {
        let pc = t[c * n + v];
        if pc > m {
            (c, pc)
        } else {
            (a, m)
        }
    });
    if mode == UnsupMode::NllOnly || pmax > cfg.t1 {
        Branch::Nll { class: arg, weight_of_class: true }
    } else {
        Branch::Mse
    }
}

/// Gated unified segmentation loss of `logits_a` against `probs_b`.
pub fn usl(logits_a: &LogitVolume, probs_b: &ProbVolume, cfg: &UslConfig) -> Result<f64> {
    Ok(unsup_loss_grad(logits_a, probs_b, UnsupMode::Usl, cfg)?.0)
}

/// Resolves an unsupervised loss mode to a callable.
pub fn loss_mode_select(mode: UnsupMode) -> impl Fn(&LogitVolume, &ProbVolume, &UslConfig) -> Result<f64> {
    move |l, p, c| Ok(unsup_loss_grad(l, p, mode, c)?.0)
}

/// Symmetric cross loss: `L(A, sg(softmax B)) + L(B, sg(softmax A))`.
pub fn unsupervised_loss(
    logits_a: &LogitVolume,
    logits_b: &LogitVolume,
    mode: UnsupMode,
    cfg: &UslConfig,
) -> Result<f64> {
    let pa = softmax_probs(logits_a);
    let pb = softmax_probs(logits_b);
    Ok(unsup_loss_grad(logits_a, &pb, mode, cfg)?.0 + unsup_loss_grad(logits_b, &pa, mode, cfg)?.0)
}

/// Gradients of [`unsupervised_loss`] w.r.t. each side's logits, with the
/// pseudo-labels held fixed.
pub fn unsupervised_loss_grad(
    logits_a: &LogitVolume,
    logits_b: &LogitVolume,
    mode: UnsupMode,
    cfg: &UslConfig,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let pa = softmax_probs(logits_a);
    let pb = softmax_probs(logits_b);
    let (la, ga) = unsup_loss_grad(logits_a, &pb, mode, cfg)?;
    let (lb, gb) = unsup_loss_grad(logits_b, &pa, mode, cfg)?;
    Ok((la + lb, ga, gb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::validate_prob_volume;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single(k: usize, vals: &[f64]) -> LogitVolume {
        LogitVolume::new(k, [1, 1, vals.len() / k], vals.to_vec()).unwrap()
    }

    fn probs_one(p_fg: f64) -> ProbVolume {
        ProbVolume::new(2, [1, 1, 1], vec![1.0 - p_fg, p_fg]).unwrap()
    }

    fn logits_for_q(q: f64) -> LogitVolume {
        single(2, &[0.0, (q / (1.0 - q)).ln()])
    }

    fn random_logits(rng: &mut ChaCha8Rng, k: usize, shape: [usize; 3], scale: f64) -> LogitVolume {
        let n = shape.iter().product::<usize>() * k;
        LogitVolume::new(k, shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_probs(&single(2, &[0.0, 0.0]));
        assert_eq!(p.values(), &[0.5, 0.5]);
        let p = softmax_probs(&single(2, &[2.0, -1.0]));
        assert!((p.values()[0] - 0.952574).abs() < 1e-5);
        assert!((p.values()[1] - 0.047426).abs() < 1e-5);
        let shifted = softmax_probs(&single(2, &[102.0, 99.0]));
        for (a, b) in p.values().iter().zip(shifted.values()) {
            assert!((a - b).abs() < 1e-15);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let big = softmax_probs(&random_logits(&mut rng, 3, [4, 4, 4], 30.0));
        assert!(validate_prob_volume(&big).is_ok());
    }

    #[test]
    fn dice_examples() {
        let y = LabelVolume::new([2, 2, 2], vec![0, 1, 0, 1, 0, 1, 0, 1], 2).unwrap();
        let half = ProbVolume::new(2, [2, 2, 2], vec![0.5; 16]).unwrap();
        let expected = 1.0 - (4.0 + DICE_EPS) / (8.0 + DICE_EPS);
        assert!((dice_loss(&half, &y).unwrap() - expected).abs() < 1e-15);
        let onehot: Vec<f64> = (0..2)
            .flat_map(|c| y.classes().iter().map(move |&l| if l as usize == c { 1.0 } else { 0.0 }))
            .collect();
        let perfect = ProbVolume::new(2, [2, 2, 2], onehot).unwrap();
        assert!(dice_loss(&perfect, &y).unwrap() < 1e-5);
        let mut bg = vec![1.0; 8];
        bg.extend(vec![0.0; 8]);
        let zero = ProbVolume::new(2, [2, 2, 2], bg).unwrap();
        assert!((dice_loss(&zero, &y).unwrap() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn ce_examples() {
        let y = LabelVolume::new([1, 1, 2], vec![0, 1], 2).unwrap();
        let uniform = single(2, &[0.0, 0.0, 0.0, 0.0]);
        assert!((ce_loss(&uniform, &y).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        let confident = single(2, &[20.0, 0.0, 0.0, 20.0]);
        assert!(ce_loss(&confident, &y).unwrap() < 1e-8);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let y = LabelVolume::new([1, 1, 3], vec![0, 1, 0], 2).unwrap();
        let l = single(2, &[0.0; 4]);
        assert!(matches!(ce_loss(&l, &y), Err(Error::Shape(_))));
        assert!(matches!(dice_loss(&softmax_probs(&l), &y), Err(Error::Shape(_))));
    }

    #[test]
    fn pseudo_labels() {
        let l = single(2, &[2.0, -1.0]);
        assert_eq!(
            make_pseudo_label(&l, PseudoMode::Hard),
            PseudoLabel::Hard(LabelVolume::new([1, 1, 1], vec![0], 2).unwrap())
        );
        match make_pseudo_label(&single(2, &[0.0, 0.0]), PseudoMode::Hard) {
            PseudoLabel::Hard(h) => assert_eq!(h.classes(), &[0]),
            other => panic!("{other:?}"),
        }
        match make_pseudo_label(&l, PseudoMode::Soft) {
            PseudoLabel::Soft(p) => assert!((p.values()[0] - 0.952574).abs() < 1e-5),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn usl_branch_examples() {
        let cfg = UslConfig::default();
        let g1 = usl(&logits_for_q(0.8), &probs_one(0.95), &cfg).unwrap();
        assert!((g1 - 0.95 * -(0.8f64).ln()).abs() < 1e-12);
        assert!((g1 - 0.211986).abs() < 1e-6);
        let g2 = usl(&logits_for_q(0.2), &probs_one(0.05), &cfg).unwrap();
        assert!((g2 - g1).abs() < 1e-12);
        let g3 = usl(&logits_for_q(0.6), &probs_one(0.5), &cfg).unwrap();
        assert!((g3 - 0.01).abs() < 1e-12);
    }

    #[test]
    fn threshold_boundaries_use_mse() {
        let cfg = UslConfig::default();
        assert_eq!(cfg.gate(0.9), Gate::Mse);
        assert_eq!(cfg.gate(0.1), Gate::Mse);
        assert_eq!(cfg.gate(0.9000001), Gate::Foreground);
        assert_eq!(cfg.gate(0.0999999), Gate::Background);
        let mid = UslConfig::degenerate(0.5, 0.5).unwrap();
        assert_eq!(mid.gate(0.5), Gate::Mse);
        assert_eq!(mid.gate(0.51), Gate::Foreground);
    }

    #[test]
    fn config_validation() {
        assert!(UslConfig::new(0.1, 0.9).is_err());
        assert!(UslConfig::new(1.01, -0.01).is_err());
        assert!(UslConfig::degenerate(1.01, -0.01).is_ok());
        assert!(UslConfig::degenerate(0.4, 0.6).is_err());
        assert!("bogus".parse::<UnsupMode>().is_err());
        assert_eq!("ce+dice".parse::<SupMode>().unwrap(), SupMode::CeDice);
    }

    #[test]
    fn nll_only_uniform_partner() {
        // tie goes to background: (1 - 0.5) * -ln(1 - 0.5)
        let f = loss_mode_select(UnsupMode::NllOnly);
        let v = f(&logits_for_q(0.5), &probs_one(0.5), &UslConfig::default()).unwrap();
        assert!((v - 0.5 * std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn mse_only_agreement_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let l = random_logits(&mut rng, 2, [3, 3, 3], 3.0);
        let p = softmax_probs(&l);
        let v = unsup_loss_grad(&l, &p, UnsupMode::MseOnly, &UslConfig::default()).unwrap().0;
        assert!(v.abs() < 1e-30);
    }

    #[test]
    fn unsupervised_loss_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_logits(&mut rng, 2, [3, 3, 3], 5.0);
        let b = random_logits(&mut rng, 2, [3, 3, 3], 5.0);
        let cfg = UslConfig::default();
        for mode in [UnsupMode::Usl, UnsupMode::NllOnly, UnsupMode::MseOnly] {
            let ab = unsupervised_loss(&a, &b, mode, &cfg).unwrap();
            let ba = unsupervised_loss(&b, &a, mode, &cfg).unwrap();
            assert_eq!(ab, ba);
            assert!(ab >= 0.0);
        }
    }

    #[test]
    fn supervised_loss_doubles_for_identical_models() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_logits(&mut rng, 2, [2, 2, 2], 2.0);
        let y = LabelVolume::new([2, 2, 2], (0..8).map(|i| (i % 3 == 0) as u8).collect(), 2).unwrap();
        let one = supervised_term_grad(&a, &y, SupMode::CeDice).unwrap().0;
        let both = supervised_loss(&[a.clone()], &[a], &[y], SupMode::CeDice).unwrap();
        assert_eq!(both, 2.0 * one);
    }

    #[test]
    fn multiclass_gate_requires_flag() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let l = random_logits(&mut rng, 3, [2, 2, 2], 2.0);
        let p = softmax_probs(&l);
        let mut cfg = UslConfig::default();
        assert!(usl(&l, &p, &cfg).is_err());
        cfg.multiclass = true;
        assert!(usl(&l, &p, &cfg).unwrap().is_finite());
        assert!(unsup_loss_grad(&l, &p, UnsupMode::MseOnly, &UslConfig::default()).is_ok());
    }

    fn fd_check(f: impl Fn(&LogitVolume) -> (f64, Vec<f64>), l: &LogitVolume) {
        let (_, g) = f(l);
        let h = 1e-3;
        for i in 0..l.values().len() {
            let mut p = l.clone();
            p.values_mut()[i] += h;
            let mut m = l.clone();
            m.values_mut()[i] -= h;
            let fd = (f(&p).0 - f(&m).0) / (2.0 * h);
            let err = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6);
            assert!(err < 1e-4, "index {i}: analytic {} vs numeric {fd}", g[i]);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let shape = [2, 2, 2];
        let y = LabelVolume::new(shape, (0..8).map(|_| rng.gen_range(0..2)).collect(), 2).unwrap();
        let l = random_logits(&mut rng, 2, shape, 3.0);
        let partner = softmax_probs(&random_logits(&mut rng, 2, shape, 4.0));
        fd_check(|x| dice_loss_grad(x, &y).unwrap(), &l);
        fd_check(|x| ce_loss_grad(x, &y).unwrap(), &l);
        for mode in [UnsupMode::Usl, UnsupMode::NllOnly, UnsupMode::MseOnly] {
            fd_check(|x| unsup_loss_grad(x, &partner, mode, &UslConfig::default()).unwrap(), &l);
        }
    }
}
