//! Encoder-decoder segmentation network with text conditioning at the
//! bottleneck: `logits = decode(encode(x) + beta_text * z)`.
//!
//! The backbone is a small V-Net/U-Net: `levels` resolution levels with two
//! conv blocks each on the way down, strided 2x2x2 convolutions between
//! levels, transposed 2x2x2 convolutions on the way up with additive skip
//! connections, and a 1x1x1 classifier head. Each block is
//! conv -> group norm -> SiLU. All parameters live in one flat buffer
//! described by a [`ParamLayout`].

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    conv_backward, conv_forward, group_norm_backward, group_norm_forward, silu_backward,
    silu_forward, ConvCache, ConvKind, Feat, NormCache, Real,
};
use crate::types::{LogitVolume, Shape3, Volume};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_channels: usize,
    pub levels: usize,
    /// Channels per normalisation group.
    pub group_size: usize,
    /// Drops every normalisation and activation, leaving an affine network.
    #[serde(default)]
    pub linear_mode: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            num_classes: 2,
            base_channels: 8,
            levels: 3,
            group_size: 4,
            linear_mode: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_channels == 0 {
            return Err(Error::invalid("channel counts must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("num_classes must be at least 2"));
        }
        if self.levels == 0 || self.levels > 8 {
            return Err(Error::invalid(format!("levels={} out of range 1..=8", self.levels)));
        }
        if self.group_size == 0 {
            return Err(Error::invalid("group_size must be positive"));
        }
        Ok(())
    }

    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.channels_at(self.levels - 1)
    }

    /// Total spatial reduction between input and bottleneck.
    pub fn downsample_factor(&self) -> usize {
        1 << (self.levels - 1)
    }

    /// Spatial axes must be multiples of this: one factor of two beyond the
    /// bottleneck reduction, so the coarsest map always has even extent.
    pub fn input_multiple(&self) -> usize {
        1 << self.levels
    }

    pub fn check_input_shape(&self, shape: Shape3) -> Result<()> {
        let f = self.input_multiple();
        if shape.iter().any(|&s| s == 0 || s % f != 0) {
            return Err(Error::shape(format!(
                "input {shape:?} not divisible by {f} for {} levels",
                self.levels
            )));
        }
        Ok(())
    }

    fn groups_for(&self, channels: usize) -> usize {
        let g = (channels / self.group_size).max(1);
        // fall back to fewer groups when the width is not a multiple
        (1..=g).rev().find(|g| channels % g == 0).unwrap_or(1)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub entries: Vec<ParamEntry>,
    pub total: usize,
}

impl ParamLayout {
    fn push(&mut self, name: String, shape: Vec<usize>) -> Range<usize> {
        let e = ParamEntry {
            name,
            offset: self.total,
            shape,
        };
        self.total += e.len();
        let r = e.range();
        self.entries.push(e);
        r
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

#[derive(Clone, Debug)]
struct ConvLayer {
    kind: ConvKind,
    cin: usize,
    cout: usize,
    w: Range<usize>,
    b: Range<usize>,
}

#[derive(Clone, Debug)]
struct NormLayer {
    groups: usize,
    gamma: Range<usize>,
    beta: Range<usize>,
}

#[derive(Clone, Debug)]
struct Block {
    conv: ConvLayer,
    norm: Option<NormLayer>,
}

#[derive(Clone, Debug)]
struct Arch {
    enc: Vec<[Block; 2]>,
    down: Vec<Block>,
    up: Vec<Block>,
    dec: Vec<Block>,
    head: ConvLayer,
}

fn build_arch(cfg: &ModelConfig) -> (Arch, ParamLayout) {
    let mut layout = ParamLayout::default();
    let conv = |layout: &mut ParamLayout, name: &str, kind: ConvKind, cin, cout| {
        let wshape = match kind {
            ConvKind::Same3 => vec![cout, cin, 3, 3, 3],
            ConvKind::Down2 => vec![cout, cin, 2, 2, 2],
            ConvKind::Up2 => vec![cin, cout, 2, 2, 2],
            ConvKind::Point => vec![cout, cin],
        };
        let w = layout.push(format!("{name}.weight"), wshape);
        let b = layout.push(format!("{name}.bias"), vec![cout]);
        ConvLayer {
            kind,
            cin,
            cout,
            w,
            b,
        }
    };
    let block = |layout: &mut ParamLayout, name: &str, kind, cin, cout| {
        let c = conv(layout, name, kind, cin, cout);
        let norm = NormLayer {
            groups: cfg.groups_for(cout),
            gamma: layout.push(format!("{name}.norm.gamma"), vec![cout]),
            beta: layout.push(format!("{name}.norm.beta"), vec![cout]),
        };
        Block {
            conv: c,
            norm: Some(norm),
        }
    };
    let l = cfg.levels;
    let mut enc = Vec::with_capacity(l);
    let mut down = Vec::new();
    for lvl in 0..l {
        let c = cfg.channels_at(lvl);
        let cin = if lvl == 0 {
            cfg.in_channels
        } else {
            let prev = cfg.channels_at(lvl - 1);
            down.push(block(&mut layout, &format!("down{}", lvl - 1), ConvKind::Down2, prev, c));
            c
        };
        let a = block(&mut layout, &format!("enc{lvl}.0"), ConvKind::Same3, cin, c);
        let b = block(&mut layout, &format!("enc{lvl}.1"), ConvKind::Same3, c, c);
        enc.push([a, b]);
    }
    let mut up = vec![];
    let mut dec = vec![];
    for lvl in (0..l.saturating_sub(1)).rev() {
        let (hi, lo) = (cfg.channels_at(lvl + 1), cfg.channels_at(lvl));
        up.push(block(&mut layout, &format!("up{lvl}"), ConvKind::Up2, hi, lo));
        dec.push(block(&mut layout, &format!("dec{lvl}"), ConvKind::Same3, lo, lo));
    }
    // decoder vectors are indexed by level
    up.reverse();
    dec.reverse();
    let head = conv(
        &mut layout,
        "head",
        ConvKind::Point,
        cfg.base_channels,
        cfg.num_classes,
    );
    (
        Arch {
            enc,
            down,
            up,
            dec,
            head,
        },
        layout,
    )
}

#[derive(Clone, Debug)]
struct BlockTape<T> {
    conv: ConvCache<T>,
    norm: Option<NormCache<T>>,
    pre_act: Option<Vec<T>>,
}

#[derive(Clone, Debug)]
pub struct EncoderTape<T> {
    enc: Vec<[BlockTape<T>; 2]>,
    down: Vec<BlockTape<T>>,
}

#[derive(Clone, Debug)]
pub struct DecoderTape<T> {
    up: Vec<BlockTape<T>>,
    dec: Vec<BlockTape<T>>,
    head: ConvCache<T>,
}

/// Output of [`SegModel::encode`].
#[derive(Clone, Debug)]
pub struct Encoded<T> {
    pub bottleneck: Feat<T>,
    /// Full-resolution outputs of levels `0..levels-1`, consumed by the decoder.
    pub skips: Vec<Feat<T>>,
    pub tape: EncoderTape<T>,
}

/// Text conditioning for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct TextInput<'a, T> {
    pub z: &'a [T],
    pub beta: T,
}

#[derive(Clone, Debug)]
pub struct Tape<T> {
    enc: EncoderTape<T>,
    dec: DecoderTape<T>,
    beta: Option<T>,
    bottleneck_channels: usize,
}

#[derive(Clone, Debug)]
pub struct Forward<T> {
    pub logits: Feat<T>,
    pub tape: Tape<T>,
}

/// One segmentation network: architecture plus flat parameter buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct SegModel<T> {
    config: ModelConfig,
    layout: ParamLayout,
    params: Vec<T>,
    arch_cache: ArchHandle,
}

// Arch is derived from the config; kept out of equality comparisons.
#[derive(Clone, Debug)]
struct ArchHandle(Arch);

impl PartialEq for ArchHandle {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

impl<T: Real> SegModel<T> {
    /// Kaiming-uniform convolutions, unit norm scales, zero biases, and
    /// replicating (nearest-neighbour) transposed convolutions.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (arch, layout) = build_arch(&config);
        let mut params = vec![T::zero(); layout.total];
        let fill_conv = |c: &ConvLayer, params: &mut [T], rng: &mut R| {
            if c.kind == ConvKind::Up2 {
                let ratio = (c.cin / c.cout).max(1);
                for ci in 0..c.cin {
                    for co in 0..c.cout {
                        let v = if ci % c.cout == co { 1.0 / ratio as f64 } else { 0.0 };
                        for k in 0..8 {
                            params[c.w.start + (ci * c.cout + co) * 8 + k] = T::of(v);
                        }
                    }
                }
            } else {
                let fan_in = c.cin * c.kind.taps();
                let a = (6.0 / fan_in as f64).sqrt();
                for p in &mut params[c.w.clone()] {
                    *p = T::of(rng.gen_range(-a..a));
                }
            }
        };
        let arch_blocks = all_blocks(&arch);
        for b in &arch_blocks {
            fill_conv(&b.conv, &mut params, rng);
            if let Some(n) = &b.norm {
                for p in &mut params[n.gamma.clone()] {
                    *p = T::one();
                }
            }
        }
        fill_conv(&arch.head, &mut params, rng);
        Ok(Self {
            config,
            layout,
            params,
            arch_cache: ArchHandle(arch),
        })
    }

    /// Rebuilds a model from stored parameters.
    pub fn from_params(config: ModelConfig, params: Vec<T>) -> Result<Self> {
        config.validate()?;
        let (arch, layout) = build_arch(&config);
        if params.len() != layout.total {
            return Err(Error::shape(format!(
                "{} parameters supplied, architecture needs {}",
                params.len(),
                layout.total
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(Self {
            config,
            layout,
            params,
            arch_cache: ArchHandle(arch),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    pub fn zero_grads(&self) -> Vec<T> {
        vec![T::zero(); self.layout.total]
    }

    /// Switches normalisation and activations off (or back on).
    pub fn set_linear_mode(&mut self, on: bool) {
        self.config.linear_mode = on;
    }

    fn arch(&self) -> &Arch {
        &self.arch_cache.0
    }

    fn block_forward(&self, b: &Block, x: &Feat<T>) -> (Feat<T>, BlockTape<T>) {
        let p = &self.params;
        let (mut y, conv) = conv_forward(b.conv.kind, x, &p[b.conv.w.clone()], &p[b.conv.b.clone()], b.conv.cout);
        if self.config.linear_mode {
            return (
                y,
                BlockTape {
                    conv,
                    norm: None,
                    pre_act: None,
                },
            );
        }
        let n = b.norm.as_ref().expect("blocks carry a norm layer");
        let (mut z, norm) = group_norm_forward(&y, n.groups, &p[n.gamma.clone()], &p[n.beta.clone()]);
        let pre = silu_forward(&mut z);
        y = z;
        (
            y,
            BlockTape {
                conv,
                norm: Some(norm),
                pre_act: Some(pre),
            },
        )
    }

    fn block_backward(&self, b: &Block, t: &BlockTape<T>, mut g: Feat<T>, grads: &mut [T]) -> Feat<T> {
        let p = &self.params;
        if let (Some(pre), Some(nc), Some(n)) = (&t.pre_act, &t.norm, &b.norm) {
            silu_backward(pre, &mut g);
            let (dg, db) = split_two(grads, n.gamma.clone(), n.beta.clone());
            g = group_norm_backward(nc, &g, &p[n.gamma.clone()], dg, db);
        }
        let (dw, db) = split_two(grads, b.conv.w.clone(), b.conv.b.clone());
        conv_backward(b.conv.kind, &t.conv, &g, &p[b.conv.w.clone()], dw, db)
    }

    pub fn encode(&self, x: &Feat<T>) -> Result<Encoded<T>> {
        if x.channels != self.config.in_channels {
            return Err(Error::shape(format!(
                "input has {} channels, model expects {}",
                x.channels, self.config.in_channels
            )));
        }
        self.config.check_input_shape(x.shape)?;
        let arch = self.arch();
        let mut skips = Vec::with_capacity(self.config.levels - 1);
        let mut enc_t = Vec::with_capacity(self.config.levels);
        let mut down_t = Vec::new();
        let mut cur = x.clone();
        for lvl in 0..self.config.levels {
            if lvl > 0 {
                let (y, t) = self.block_forward(&arch.down[lvl - 1], &cur);
                down_t.push(t);
                cur = y;
            }
            let (y0, t0) = self.block_forward(&arch.enc[lvl][0], &cur);
            let (y1, t1) = self.block_forward(&arch.enc[lvl][1], &y0);
            enc_t.push([t0, t1]);
            cur = y1;
            if lvl + 1 < self.config.levels {
                skips.push(cur.clone());
            }
        }
        Ok(Encoded {
            bottleneck: cur,
            skips,
            tape: EncoderTape {
                enc: enc_t,
                down: down_t,
            },
        })
    }

    pub fn decode(&self, fused: &Feat<T>, skips: &[Feat<T>]) -> Result<(Feat<T>, DecoderTape<T>)> {
        let levels = self.config.levels;
        if fused.channels != self.config.bottleneck_channels() {
            return Err(Error::shape(format!(
                "bottleneck has {} channels, decoder expects {}",
                fused.channels,
                self.config.bottleneck_channels()
            )));
        }
        if skips.len() != levels - 1 {
            return Err(Error::shape(format!(
                "{} skip tensors supplied, decoder expects {}",
                skips.len(),
                levels - 1
            )));
        }
        for (lvl, s) in skips.iter().enumerate() {
            let f = 1 << (levels - 1 - lvl);
            let want = [fused.shape[0] * f, fused.shape[1] * f, fused.shape[2] * f];
            if s.shape != want || s.channels != self.config.channels_at(lvl) {
                return Err(Error::shape(format!(
                    "skip {lvl} is {}x{:?}, expected {}x{want:?}",
                    s.channels,
                    s.shape,
                    self.config.channels_at(lvl)
                )));
            }
        }
        let arch = self.arch();
        let mut up_t: Vec<Option<BlockTape<T>>> = vec![None; levels - 1];
        let mut dec_t: Vec<Option<BlockTape<T>>> = vec![None; levels - 1];
        let mut cur = fused.clone();
        for lvl in (0..levels - 1).rev() {
            let (mut u, tu) = self.block_forward(&arch.up[lvl], &cur);
            u.add_assign(&skips[lvl]);
            let (d, td) = self.block_forward(&arch.dec[lvl], &u);
            up_t[lvl] = Some(tu);
            dec_t[lvl] = Some(td);
            cur = d;
        }
        let h = &arch.head;
        let (logits, head) = conv_forward(h.kind, &cur, &self.params[h.w.clone()], &self.params[h.b.clone()], h.cout);
        Ok((
            logits,
            DecoderTape {
                up: up_t.into_iter().map(Option::unwrap).collect(),
                dec: dec_t.into_iter().map(Option::unwrap).collect(),
                head,
            },
        ))
    }

    /// Full pass. `text = None` skips the injection entirely.
    pub fn forward(&self, x: &Feat<T>, text: Option<TextInput<'_, T>>) -> Result<Forward<T>> {
        let enc = self.encode(x)?;
        let c = self.config.bottleneck_channels();
        let (fused, beta) = match text {
            Some(t) => (inject_text(&enc.bottleneck, t.z, t.beta)?, Some(t.beta)),
            None => (enc.bottleneck, None),
        };
        let (logits, dec) = self.decode(&fused, &enc.skips)?;
        Ok(Forward {
            logits,
            tape: Tape {
                enc: enc.tape,
                dec,
                beta,
                bottleneck_channels: c,
            },
        })
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to the text feature `z` (zeros when no text was injected).
    pub fn backward(&self, tape: &Tape<T>, dlogits: &Feat<T>, grads: &mut [T]) -> Vec<T> {
        assert_eq!(grads.len(), self.layout.total, "gradient buffer size");
        let arch = self.arch();
        let levels = self.config.levels;
        let h = &arch.head;
        let (dw, db) = split_two(grads, h.w.clone(), h.b.clone());
        let mut g = conv_backward(h.kind, &tape.dec.head, dlogits, &self.params[h.w.clone()], dw, db);
        let mut dskips: Vec<Option<Feat<T>>> = vec![None; levels - 1];
        for lvl in 0..levels - 1 {
            g = self.block_backward(&arch.dec[lvl], &tape.dec.dec[lvl], g, grads);
            dskips[lvl] = Some(g.clone());
            g = self.block_backward(&arch.up[lvl], &tape.dec.up[lvl], g, grads);
        }
        // g is now d(loss)/d(fused) = d(loss)/d(bottleneck)
        let c = tape.bottleneck_channels;
        let dz = match tape.beta {
            Some(beta) => (0..c)
                .map(|ch| g.channel(ch).iter().fold(T::zero(), |s, v| s + *v) * beta)
                .collect(),
            None => vec![T::zero(); c],
        };
        for lvl in (0..levels).rev() {
            if lvl + 1 < levels {
                g.add_assign(dskips[lvl].as_ref().expect("skip gradient"));
            }
            let [t0, t1] = &tape.enc.enc[lvl];
            g = self.block_backward(&arch.enc[lvl][1], t1, g, grads);
            g = self.block_backward(&arch.enc[lvl][0], t0, g, grads);
            if lvl > 0 {
                g = self.block_backward(&arch.down[lvl - 1], &tape.enc.down[lvl - 1], g, grads);
            }
        }
        dz
    }
}

fn all_blocks(a: &Arch) -> Vec<&Block> {
    let mut v: Vec<&Block> = a.enc.iter().flat_map(|b| b.iter()).collect();
    v.extend(a.down.iter());
    v.extend(a.up.iter());
    v.extend(a.dec.iter());
    v
}

fn split_two<T>(buf: &mut [T], a: Range<usize>, b: Range<usize>) -> (&mut [T], &mut [T]) {
    assert!(a.end <= b.start, "parameter ranges out of order");
    let (lo, hi) = buf.split_at_mut(b.start);
    (&mut lo[a], &mut hi[..b.end - b.start])
}

/// `fused[c, ..] = bottleneck[c, ..] + beta * z[c]`, broadcast over space.
pub fn inject_text<T: Real>(bottleneck: &Feat<T>, z: &[T], beta: T) -> Result<Feat<T>> {
    if z.len() != bottleneck.channels {
        return Err(Error::shape(format!(
            "text feature has {} channels, bottleneck has {}",
            z.len(),
            bottleneck.channels
        )));
    }
    let mut out = bottleneck.clone();
    if beta == T::zero() {
        return Ok(out);
    }
    for (c, &zc) in z.iter().enumerate() {
        let add = beta * zc;
        for v in out.channel_mut(c) {
            *v += add;
        }
    }
    Ok(out)
}

/// Lifts an image into a one-channel feature map.
pub fn volume_to_feat<T: Real>(v: &Volume) -> Feat<T> {
    Feat::from_vec(1, v.shape(), v.voxels().iter().map(|&x| T::of(x as f64)).collect())
}

pub fn feat_to_logits<T: Real>(f: &Feat<T>) -> Result<LogitVolume> {
    LogitVolume::new(f.channels, f.shape, f.data.iter().map(|v| v.as_f64()).collect())
}

pub fn logits_to_feat<T: Real>(l: &LogitVolume) -> Feat<T> {
    Feat::from_vec(l.num_classes(), l.shape(), l.values().iter().map(|&v| T::of(v)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(c0: usize) -> SegModel<f64> {
        let cfg = ModelConfig {
            base_channels: c0,
            ..Default::default()
        };
        SegModel::init(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    fn input(shape: Shape3, seed: u64) -> Feat<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Feat::from_vec(1, shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn bottleneck_shape_follows_strides() {
        let m = model(8);
        let e = m.encode(&input([32, 32, 32], 2)).unwrap();
        assert_eq!(e.bottleneck.channels, 32);
        assert_eq!(e.bottleneck.shape, [8, 8, 8]);
        assert_eq!(e.skips.len(), 2);
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let m = model(2);
        assert!(matches!(m.encode(&input([20, 20, 20], 2)), Err(Error::Shape(_))));
        assert!(m.encode(&input([20, 16, 16], 2)).is_err());
    }

    #[test]
    fn zero_parameters_give_zero_outputs() {
        let mut m = model(2);
        m.params_mut().iter_mut().for_each(|p| *p = 0.0);
        let x = input([8, 8, 8], 3);
        let e = m.encode(&x).unwrap();
        assert!(e.bottleneck.data.iter().all(|&v| v == 0.0));
        let f = m.forward(&x, None).unwrap();
        assert_eq!(f.logits.channels, 2);
        assert!(f.logits.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decode_restores_input_resolution() {
        let m = model(2);
        let f = m.forward(&input([16, 8, 24], 4), None).unwrap();
        assert_eq!(f.logits.shape, [16, 8, 24]);
        assert_eq!(f.logits.channels, 2);
    }

    #[test]
    fn inject_text_broadcasts_per_channel() {
        let b = Feat::<f64>::zeros(3, [2, 2, 2]);
        let fused = inject_text(&b, &[1.0, 1.0, 1.0], 0.1).unwrap();
        assert!(fused.data.iter().all(|&v| v == 0.1));
        assert_eq!(inject_text(&b, &[1.0, 2.0, 3.0], 0.0).unwrap(), b);
        assert!(inject_text(&b, &[1.0], 1.0).is_err());
    }

    #[test]
    fn layout_is_contiguous_and_named() {
        let m = model(4);
        let mut off = 0;
        for e in &m.layout().entries {
            assert_eq!(e.offset, off);
            off += e.len();
        }
        assert_eq!(off, m.param_count());
        assert!(m.layout().get("head.weight").is_some());
        assert_eq!(m.layout().get("enc2.1.weight").unwrap().shape, vec![16, 16, 3, 3, 3]);
    }
}
