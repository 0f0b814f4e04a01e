//! Co-training loop: two networks, noisy inputs, CutMix routing of the
//! unlabeled half of each batch, the joint supervised + unsupervised
//! objective, and SGD with momentum for both networks and the shared text
//! projector.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{add_uniform_noise, cutmix_probs, cutmix_volume, sample_cutmix_mask, CutMixMask};
use crate::dataio::{atomic_write, make_batch, Batch, DatasetSplit};
use crate::error::{Error, Result};
use crate::inference::{ensemble_predict, model_probs, EvalModel, SlidingWindowSpec};
use crate::losses::{softmax_probs, supervised_term_grad, unsup_loss_grad, SupMode, UnsupMode, UslConfig};
use crate::metrics::dice_coeff;
use crate::nn::{Feat, Real};
use crate::segmodel::{feat_to_logits, volume_to_feat, ModelConfig, SegModel, TextInput};
use crate::textknow::{TextProjector, HIDDEN_WIDTH};
use crate::types::{LogitVolume, ProbVolume, Sample, Shape3, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum LrSchedule {
    Constant,
    Poly { power: f64 },
}

/// Where the pseudo-labels supervising model A come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum PseudoSource {
    /// B's prediction on the original unlabeled patch supervises A's
    /// prediction on the same patch.
    #[default]
    Original,
    /// A is trained on the mixed patch against B's prediction on it.
    Mixed,
}

impl FromStr for PseudoSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(PseudoSource::Original),
            "mixed" => Ok(PseudoSource::Mixed),
            other => Err(Error::invalid(format!("unknown pseudo-label source {other:?}"))),
        }
    }
}

impl fmt::Display for PseudoSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PseudoSource::Original => "original",
            PseudoSource::Mixed => "mixed",
        })
    }
}

/// Every training hyperparameter. See [`TrainConfig::parse`] for the file
/// format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub max_iters: usize,
    pub batch_size: usize,
    pub patch_size: Shape3,
    pub noise_amplitude: f64,
    pub beta_text: f64,
    pub usl: UslConfig,
    pub unsup_mode: UnsupMode,
    pub sup_mode: SupMode,
    pub unsup_weight: f64,
    pub lr_schedule: LrSchedule,
    pub cutmix_enabled: bool,
    pub cutmix_ratio: (f64, f64),
    pub pseudo_source: PseudoSource,
    pub model: ModelConfig,
    /// 0 disables periodic checkpoints (the final one is always written).
    pub checkpoint_every: usize,
    /// 0 disables periodic validation (the final one still runs).
    pub val_every: usize,
    pub val_window: SlidingWindowSpec,
    pub eval_model: EvalModel,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            lr0: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            max_iters: 2000,
            batch_size: 4,
            patch_size: [16, 16, 16],
            noise_amplitude: 0.2,
            beta_text: 1.0,
            usl: UslConfig::default(),
            unsup_mode: UnsupMode::Usl,
            sup_mode: SupMode::CeDice,
            unsup_weight: 1.0,
            lr_schedule: LrSchedule::Poly { power: 0.9 },
            cutmix_enabled: true,
            cutmix_ratio: crate::augment::DEFAULT_CUT_RANGE,
            pseudo_source: PseudoSource::Original,
            model: ModelConfig {
                base_channels: 4,
                ..ModelConfig::default()
            },
            checkpoint_every: 500,
            val_every: 250,
            val_window: SlidingWindowSpec {
                patch: [16, 16, 16],
                stride: [8, 8, 8],
            },
            eval_model: EvalModel::A,
        }
    }
}

fn parse_triple(v: &str) -> Result<Shape3> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(Error::invalid(format!("expected d,h,w, got {v:?}")));
    }
    let mut out = [0; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.parse().map_err(|_| Error::invalid(format!("bad integer {p:?} in {v:?}")))?;
    }
    Ok(out)
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::invalid(format!("bad value {v:?} for {key}")))
}

fn triple(s: Shape3) -> String {
    format!("{},{},{}", s[0], s[1], s[2])
}

impl TrainConfig {
    /// Applies `key = value` lines (blank lines and `#` comments ignored) on
    /// top of the defaults. Unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("line {}: expected key=value, got {raw:?}", lineno + 1)))?;
            c.set(k.trim(), v.trim())
                .map_err(|e| Error::invalid(format!("line {}: {e}", lineno + 1)))?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Sets one key.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = num(key, v)?,
            "lr0" => self.lr0 = num(key, v)?,
            "momentum" => self.momentum = num(key, v)?,
            "weight_decay" => self.weight_decay = num(key, v)?,
            "max_iters" => self.max_iters = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "patch_size" => self.patch_size = parse_triple(v)?,
            "noise.amplitude" => self.noise_amplitude = num(key, v)?,
            "beta_text" => self.beta_text = num(key, v)?,
            "usl.t1" => self.usl.t1 = num(key, v)?,
            "usl.t2" => self.usl.t2 = num(key, v)?,
            "usl.multiclass" => self.usl.multiclass = num(key, v)?,
            "loss.unsup_mode" => self.unsup_mode = v.parse()?,
            "loss.sup_mode" => self.sup_mode = v.parse()?,
            "unsup_weight" => self.unsup_weight = num(key, v)?,
            "lr_schedule" => {
                self.lr_schedule = match v {
                    "constant" => LrSchedule::Constant,
                    "poly" => LrSchedule::Poly {
                        power: match self.lr_schedule {
                            LrSchedule::Poly { power } => power,
                            LrSchedule::Constant => 0.9,
                        },
                    },
                    other => return Err(Error::invalid(format!("unknown lr_schedule {other:?}"))),
                }
            }
            "lr_power" => {
                self.lr_schedule = LrSchedule::Poly { power: num(key, v)? };
            }
            "cutmix.enabled" => self.cutmix_enabled = num(key, v)?,
            "cutmix.ratio_min" => self.cutmix_ratio.0 = num(key, v)?,
            "cutmix.ratio_max" => self.cutmix_ratio.1 = num(key, v)?,
            "cutmix.pseudo_source" => self.pseudo_source = v.parse()?,
            "base_channels" => self.model.base_channels = num(key, v)?,
            "levels" => self.model.levels = num(key, v)?,
            "group_size" => self.model.group_size = num(key, v)?,
            "num_classes" => self.model.num_classes = num(key, v)?,
            "checkpoint_every" => self.checkpoint_every = num(key, v)?,
            "val_every" => self.val_every = num(key, v)?,
            "val_patch" => self.val_window.patch = parse_triple(v)?,
            "val_stride" => self.val_window.stride = parse_triple(v)?,
            "eval_model" => self.eval_model = v.parse()?,
            other => return Err(Error::invalid(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Serializes every key in a fixed order; `parse(to_kv())` reproduces
    /// the config.
    pub fn to_kv(&self) -> String {
        let (sched, power) = match self.lr_schedule {
            LrSchedule::Constant => ("constant", None),
            LrSchedule::Poly { power } => ("poly", Some(power)),
        };
        let mut lines = vec![
            format!("seed={}", self.seed),
            format!("lr0={:?}", self.lr0),
            format!("momentum={:?}", self.momentum),
            format!("weight_decay={:?}", self.weight_decay),
            format!("max_iters={}", self.max_iters),
            format!("batch_size={}", self.batch_size),
            format!("patch_size={}", triple(self.patch_size)),
            format!("noise.amplitude={:?}", self.noise_amplitude),
            format!("beta_text={:?}", self.beta_text),
            format!("usl.t1={:?}", self.usl.t1),
            format!("usl.t2={:?}", self.usl.t2),
            format!("usl.multiclass={}", self.usl.multiclass),
            format!("loss.unsup_mode={}", self.unsup_mode),
            format!("loss.sup_mode={}", self.sup_mode),
            format!("unsup_weight={:?}", self.unsup_weight),
            format!("lr_schedule={sched}"),
        ];
        if let Some(p) = power {
            lines.push(format!("lr_power={p:?}"));
        }
        lines.extend([
            format!("cutmix.enabled={}", self.cutmix_enabled),
            format!("cutmix.ratio_min={:?}", self.cutmix_ratio.0),
            format!("cutmix.ratio_max={:?}", self.cutmix_ratio.1),
            format!("cutmix.pseudo_source={}", self.pseudo_source),
            format!("base_channels={}", self.model.base_channels),
            format!("levels={}", self.model.levels),
            format!("group_size={}", self.model.group_size),
            format!("num_classes={}", self.model.num_classes),
            format!("checkpoint_every={}", self.checkpoint_every),
            format!("val_every={}", self.val_every),
            format!("val_patch={}", triple(self.val_window.patch)),
            format!("val_stride={}", triple(self.val_window.stride)),
            format!("eval_model={}", self.eval_model),
        ]);
        let mut s = lines.join("\n");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(Error::invalid(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::invalid("momentum must be in [0,1) and weight_decay >= 0"));
        }
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters must be positive"));
        }
        if self.batch_size == 0 || self.batch_size % 2 != 0 {
            return Err(Error::invalid(format!("batch_size must be even, got {}", self.batch_size)));
        }
        if self.noise_amplitude < 0.0 || self.beta_text < 0.0 || self.unsup_weight < 0.0 {
            return Err(Error::invalid("noise amplitude, beta_text and unsup_weight must be >= 0"));
        }
        UslConfig::degenerate(self.usl.t1, self.usl.t2)?;
        if self.cutmix_enabled {
            let (lo, hi) = self.cutmix_ratio;
            if !(0.0 < lo && lo <= hi && hi < 1.0) {
                return Err(Error::invalid(format!("cutmix ratio range ({lo}, {hi}) invalid")));
            }
        }
        self.model.validate()?;
        self.model.check_input_shape(self.patch_size)?;
        self.model.check_input_shape(self.val_window.patch)?;
        SlidingWindowSpec::new(self.val_window.patch, self.val_window.stride)?;
        Ok(())
    }
}

/// Learning rate for the step that starts at `iteration`.
pub fn lr_schedule(cfg: &TrainConfig, iteration: usize) -> f64 {
    match cfg.lr_schedule {
        LrSchedule::Constant => cfg.lr0,
        LrSchedule::Poly { power } => {
            let frac = (iteration.min(cfg.max_iters)) as f64 / cfg.max_iters as f64;
            cfg.lr0 * (1.0 - frac).powf(power)
        }
    }
}

/// `v <- m*v + g + wd*w; w <- w - lr*v`. Rejects non-finite gradients before
/// touching any state.
pub fn sgd_update<T: Real>(params: &mut [T], grads: &[T], velocity: &mut [T], lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::shape(format!(
            "{} parameters, {} gradients, {} velocities",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient {i} is {}", grads[i].as_f64())));
    }
    let (lr, m, wd) = (T::of(lr), T::of(momentum), T::of(weight_decay));
    for ((w, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = m * *v + g + wd * *w;
        *w -= lr * *v;
    }
    Ok(())
}

/// Pooled embedding plus the trainable projector mapping it to `z`.
#[derive(Clone, Debug, PartialEq)]
pub struct TextState {
    pub provider_id: String,
    pub pooled: Vec<f32>,
    pub projector: TextProjector<f32>,
    pub velocity: Vec<f32>,
}

impl TextState {
    pub fn z(&self) -> Result<Vec<f32>> {
        Ok(self.projector.forward(&self.pooled)?.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub lr: f64,
    pub loss_sup: Option<f64>,
    pub loss_unsup: Option<f64>,
    pub loss_total: Option<f64>,
    pub val_dice: Option<f64>,
}

pub const LOG_HEADER: &str = "iter,lr,loss_sup,loss_unsup,loss_total,val_dice";

pub fn log_csv(rows: &[LogRow]) -> String {
    let f = |v: Option<f64>| v.map(|x| format!("{x:.8}")).unwrap_or_default();
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{:.8},{},{},{},{}\n",
            r.iter,
            r.lr,
            f(r.loss_sup),
            f(r.loss_unsup),
            f(r.loss_total),
            f(r.val_dice)
        ));
    }
    s
}

/// Everything needed to continue training bit-identically.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model_a: SegModel<f32>,
    pub model_b: SegModel<f32>,
    pub velocity_a: Vec<f32>,
    pub velocity_b: Vec<f32>,
    pub text: Option<TextState>,
    pub iteration: usize,
    pub rng: ChaCha8Rng,
    pub history: Vec<LogRow>,
}

/// Pooled text embedding handed to [`TrainState::new`].
#[derive(Clone, Debug)]
pub struct TextSource {
    pub provider_id: String,
    pub pooled: Vec<f64>,
}

impl TrainState {
    /// Seeds both networks (differently, from one stream) and the projector.
    pub fn new(cfg: &TrainConfig, text: Option<&TextSource>) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model_a = SegModel::<f32>::init(cfg.model.clone(), &mut rng)?;
        let model_b = SegModel::<f32>::init(cfg.model.clone(), &mut rng)?;
        let text = match text {
            Some(t) => {
                let projector = TextProjector::init(t.pooled.len(), HIDDEN_WIDTH, cfg.model.bottleneck_channels(), &mut rng)?;
                Some(TextState {
                    provider_id: t.provider_id.clone(),
                    pooled: t.pooled.iter().map(|&v| v as f32).collect(),
                    velocity: vec![0.0; projector.params().len()],
                    projector,
                })
            }
            None => None,
        };
        Ok(TrainState {
            velocity_a: model_a.zero_grads(),
            velocity_b: model_b.zero_grads(),
            model_a,
            model_b,
            text,
            iteration: 0,
            rng,
            history: Vec::new(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub lr: f64,
    pub loss_sup: f64,
    pub loss_unsup: f64,
    pub loss_total: f64,
}

/// Logits and targets seen during one step, for independent recomputation.
#[derive(Clone, Debug, Default)]
pub struct StepTrace {
    pub labeled_a: Vec<LogitVolume>,
    pub labeled_b: Vec<LogitVolume>,
    pub targets: Vec<crate::types::LabelVolume>,
    pub unlabeled_a: Vec<LogitVolume>,
    pub unlabeled_b: Vec<LogitVolume>,
    pub mixed_b: Vec<LogitVolume>,
    pub masks: Vec<CutMixMask>,
}

fn grad_feat(grad: Vec<f64>, k: usize, shape: Shape3, scale: f64) -> Feat<f32> {
    Feat::from_vec(k, shape, grad.into_iter().map(|g| (g * scale) as f32).collect())
}

fn add_into(acc: &mut [f32], v: &[f32]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

/// One co-training step on `batch`; advances `state.iteration` by one.
pub fn train_step(state: &mut TrainState, batch: &Batch, cfg: &TrainConfig) -> Result<StepStats> {
    train_step_traced(state, batch, cfg, false).map(|(s, _)| s)
}

pub fn train_step_traced(
    state: &mut TrainState,
    batch: &Batch,
    cfg: &TrainConfig,
    capture: bool,
) -> Result<(StepStats, StepTrace)> {
    let it = state.iteration;
    let lr = lr_schedule(cfg, it);
    let mut trace = StepTrace::default();
    let noisy = |imgs: &[Volume], rng: &mut ChaCha8Rng| -> Result<Vec<Volume>> {
        imgs.iter().map(|v| add_uniform_noise(v, cfg.noise_amplitude, rng)).collect()
    };
    let lab = noisy(&batch.labeled_images, &mut state.rng)?;
    let unl = noisy(&batch.unlabeled_images, &mut state.rng)?;

    let (z, text_cache) = match &state.text {
        Some(t) => {
            let (z, c) = t.projector.forward(&t.pooled)?;
            (Some(z), Some(c))
        }
        None => (None, None),
    };
    let beta = cfg.beta_text as f32;
    let text_in = || z.as_deref().map(|z| TextInput { z, beta });
    let (ma, mb) = (&state.model_a, &state.model_b);
    let mut ga = ma.zero_grads();
    let mut gb = mb.zero_grads();
    let mut dz = vec![0.0f32; cfg.model.bottleneck_channels()];
    let k = cfg.model.num_classes;

    // supervised half
    let mut loss_sup = 0.0;
    for (x, y) in lab.iter().zip(&batch.labeled_targets) {
        let xf = volume_to_feat::<f32>(x);
        for (model, grads, store) in [(ma, &mut ga, 0), (mb, &mut gb, 1)] {
            let fwd = model.forward(&xf, text_in())?;
            let logits = feat_to_logits(&fwd.logits)?;
            let (l, g) = supervised_term_grad(&logits, y, cfg.sup_mode)?;
            loss_sup += l;
            let d = model.backward(&fwd.tape, &grad_feat(g, k, x.shape(), 1.0), grads);
            add_into(&mut dz, &d);
            if capture {
                if store == 0 {
                    trace.labeled_a.push(logits);
                } else {
                    trace.labeled_b.push(logits);
                }
            }
        }
        if capture {
            trace.targets.push(y.clone());
        }
    }

    // unsupervised half
    let mut loss_unsup = 0.0;
    let n = unl.len();
    if cfg.unsup_weight > 0.0 && n > 0 {
        let scale = cfg.unsup_weight / n as f64;
        let feats: Vec<Feat<f32>> = unl.iter().map(volume_to_feat::<f32>).collect();
        let mut fwd_a = Vec::with_capacity(n);
        let mut probs_a: Vec<ProbVolume> = Vec::with_capacity(n);
        let mut probs_b: Vec<ProbVolume> = Vec::with_capacity(n);
        let mut logits_a = Vec::with_capacity(n);
        for xf in &feats {
            let fa = ma.forward(xf, text_in())?;
            let la = feat_to_logits(&fa.logits)?;
            probs_a.push(softmax_probs(&la));
            logits_a.push(la);
            fwd_a.push(fa);
            let lb = feat_to_logits(&mb.forward(xf, text_in())?.logits)?;
            probs_b.push(softmax_probs(&lb));
            if capture {
                trace.unlabeled_b.push(lb);
            }
        }
        for i in 0..n {
            let j = (i + 1) % n;
            let (mixed_img, target_b) = if cfg.cutmix_enabled {
                let mask = sample_cutmix_mask(unl[i].shape(), cfg.cutmix_ratio, &mut state.rng)?;
                let img = cutmix_volume(&unl[i], &unl[j], &mask)?;
                let tgt = cutmix_probs(&probs_a[i], &probs_a[j], &mask)?;
                if capture {
                    trace.masks.push(mask);
                }
                (img, tgt)
            } else {
                (unl[i].clone(), probs_a[i].clone())
            };
            let mixed = volume_to_feat::<f32>(&mixed_img);
            let fb = mb.forward(&mixed, text_in())?;
            let lbm = feat_to_logits(&fb.logits)?;
            let (lb_loss, g) = unsup_loss_grad(&lbm, &target_b, cfg.unsup_mode, &cfg.usl)?;
            let d = mb.backward(&fb.tape, &grad_feat(g, k, mixed_img.shape(), scale), &mut gb);
            add_into(&mut dz, &d);

            let la_loss = match cfg.pseudo_source {
                PseudoSource::Original => {
                    let (l, g) = unsup_loss_grad(&logits_a[i], &probs_b[i], cfg.unsup_mode, &cfg.usl)?;
                    let d = ma.backward(&fwd_a[i].tape, &grad_feat(g, k, unl[i].shape(), scale), &mut ga);
                    add_into(&mut dz, &d);
                    l
                }
                PseudoSource::Mixed => {
                    let fam = ma.forward(&mixed, text_in())?;
                    let lam = feat_to_logits(&fam.logits)?;
                    let (l, g) = unsup_loss_grad(&lam, &softmax_probs(&lbm), cfg.unsup_mode, &cfg.usl)?;
                    let d = ma.backward(&fam.tape, &grad_feat(g, k, unl[i].shape(), scale), &mut ga);
                    add_into(&mut dz, &d);
                    l
                }
            };
            loss_unsup += (la_loss + lb_loss) / n as f64;
            if capture {
                trace.mixed_b.push(lbm);
            }
        }
        if capture {
            trace.unlabeled_a = logits_a;
        }
    }

    let loss_total = loss_sup + cfg.unsup_weight * loss_unsup;
    if !loss_total.is_finite() {
        return Err(Error::NonFinite(format!("loss at iteration {it}: {loss_total}")));
    }
    let wrap = |e: Error| Error::NonFinite(format!("iteration {it}: {e}"));
    sgd_update(state.model_a.params_mut(), &ga, &mut state.velocity_a, lr, cfg.momentum, cfg.weight_decay).map_err(wrap)?;
    sgd_update(state.model_b.params_mut(), &gb, &mut state.velocity_b, lr, cfg.momentum, cfg.weight_decay).map_err(wrap)?;
    if let (Some(t), Some(cache)) = (state.text.as_mut(), text_cache) {
        let mut gp = vec![0.0f32; t.projector.params().len()];
        t.projector.backward(&cache, &dz, &mut gp);
        sgd_update(t.projector.params_mut(), &gp, &mut t.velocity, lr, cfg.momentum, cfg.weight_decay).map_err(wrap)?;
    }
    state.iteration += 1;
    Ok((
        StepStats {
            lr,
            loss_sup,
            loss_unsup,
            loss_total,
        },
        trace,
    ))
}

/// Sliding-window probabilities of the configured evaluation model.
pub fn predict_volume(state: &TrainState, cfg: &TrainConfig, volume: &Volume) -> Result<ProbVolume> {
    let z = match &state.text {
        Some(t) => Some(t.z()?),
        None => None,
    };
    let beta = cfg.beta_text as f32;
    let text = || z.as_deref().map(|z| TextInput { z, beta });
    ensemble_predict(
        |w: &Volume| model_probs(&state.model_a, text(), w),
        |w: &Volume| model_probs(&state.model_b, text(), w),
        volume,
        &cfg.val_window,
        cfg.eval_model,
    )
}

/// Mean foreground Dice over labeled samples.
pub fn validation_dice(state: &TrainState, cfg: &TrainConfig, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("validation set is empty"));
    }
    let mut total = 0.0;
    for s in samples {
        let gt = s
            .label
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("validation sample {} has no label", s.id)))?;
        let pred = predict_volume(state, cfg, &s.image)?.argmax();
        total += dice_coeff(&pred.mask_of(1), &gt.mask_of(1))?;
    }
    Ok(total / samples.len() as f64)
}

pub fn checkpoint_path(dir: &Path, iteration: usize) -> PathBuf {
    dir.join(format!("ckpt_{iteration:06}.ckpt"))
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub checkpoints: Vec<PathBuf>,
}

/// Runs (or resumes) training up to `cfg.max_iters`. With `out_dir`,
/// checkpoints land in `ckpt_<iter>.ckpt` and the log in `train_log.csv`.
pub fn train(
    cfg: &TrainConfig,
    data: &DatasetSplit,
    validation: &[Sample],
    text: Option<&TextSource>,
    out_dir: Option<&Path>,
    resume: Option<TrainState>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut state = match resume {
        Some(s) => {
            if s.model_a.config() != &cfg.model {
                return Err(Error::invalid("checkpoint architecture differs from the config"));
            }
            s
        }
        None => TrainState::new(cfg, text)?,
    };
    if state.iteration > cfg.max_iters {
        return Err(Error::invalid(format!(
            "checkpoint is at iteration {} beyond max_iters {}",
            state.iteration, cfg.max_iters
        )));
    }
    if let Some(d) = out_dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let validate_now = |state: &TrainState| -> Result<Option<f64>> {
        if validation.is_empty() {
            return Ok(None);
        }
        validation_dice(state, cfg, validation).map(Some)
    };
    if state.iteration == 0 && state.history.is_empty() {
        let v = if cfg.val_every > 0 { validate_now(&state)? } else { None };
        state.history.push(LogRow {
            iter: 0,
            lr: lr_schedule(cfg, 0),
            loss_sup: None,
            loss_unsup: None,
            loss_total: None,
            val_dice: v,
        });
    }
    let mut checkpoints = Vec::new();
    while state.iteration < cfg.max_iters {
        let batch = make_batch(data, cfg.batch_size, cfg.patch_size, &mut state.rng)?;
        let stats = train_step(&mut state, &batch, cfg)?;
        let it = state.iteration;
        let last = it == cfg.max_iters;
        let val = if last || (cfg.val_every > 0 && it % cfg.val_every == 0) {
            validate_now(&state)?
        } else {
            None
        };
        state.history.push(LogRow {
            iter: it,
            lr: stats.lr,
            loss_sup: Some(stats.loss_sup),
            loss_unsup: Some(stats.loss_unsup),
            loss_total: Some(stats.loss_total),
            val_dice: val,
        });
        if let Some(d) = out_dir {
            if last || (cfg.checkpoint_every > 0 && it % cfg.checkpoint_every == 0) {
                let p = checkpoint_path(d, it);
                crate::checkpoint::save_checkpoint(&state, cfg, &p)?;
                atomic_write(&d.join("train_log.csv"), log_csv(&state.history).as_bytes())?;
                checkpoints.push(p);
            }
        }
    }
    Ok(TrainOutcome { state, checkpoints })
}
