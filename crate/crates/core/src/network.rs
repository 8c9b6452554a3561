//! Encoder, decoder and consistency UNet.
//!
//! A [`Network`] is a weight-free layout: it knows every parameter's name,
//! shape and initialiser, and how to run the forward passes given a bound set
//! of weights. Weights live in [`Params`] and are bound to [`Weights`] either
//! as constants (inference, teacher branch) or as tape leaves (training,
//! gradient checks). Everything is generic over the float type so the same
//! graph runs in f32 for training and f64 for finite-difference checks.

use std::collections::BTreeSet;
use std::rc::Rc;

use cae_tensor::{ConvGeom, Float, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::schedule::{consistency_scalings, ScheduleConfig};
use crate::{Error, Result};

pub const LEVELS: usize = 5;
const GN_EPS: f64 = 1e-6;
const EMBED_MAX_PERIOD: f64 = 10_000.0;
const BLOCKS_1D: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_lat: usize,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub res_blocks_unet: usize,
    pub res_blocks_enc_dec: usize,
    pub attn_levels: BTreeSet<usize>,
    pub attn_heads: usize,
    pub embed_channels: usize,
    pub channels_1d: usize,
    pub freq_bins: usize,
    pub time_frames: usize,
    /// Levels whose incoming transition also halves time.
    pub time_downsample_levels: BTreeSet<usize>,
    /// Noise-conditioned per-bin input/output scalings.
    pub freq_scaling: bool,
    /// Also add decoder features at the start of each UNet down level.
    pub cross_connect_down: bool,
    /// Group normalisation uses `min(max_norm_groups, channels)` groups.
    #[serde(default = "default_norm_groups")]
    pub max_norm_groups: usize,
}

fn default_norm_groups() -> usize {
    32
}

impl ModelConfig {
    pub fn paper() -> Self {
        Self {
            d_lat: 64,
            base_channels: 64,
            channel_mults: vec![1, 2, 4, 4, 4],
            res_blocks_unet: 2,
            res_blocks_enc_dec: 1,
            attn_levels: [2, 3, 4].into(),
            attn_heads: 4,
            embed_channels: 256,
            channels_1d: 512,
            freq_bins: 1024,
            time_frames: 64,
            time_downsample_levels: [2, 3, 4].into(),
            freq_scaling: true,
            cross_connect_down: false,
            max_norm_groups: 32,
        }
    }

    pub fn toy() -> Self {
        Self {
            d_lat: 8,
            base_channels: 16,
            channel_mults: vec![1, 2, 2, 2, 2],
            res_blocks_unet: 1,
            res_blocks_enc_dec: 1,
            attn_levels: [2, 3, 4].into(),
            attn_heads: 4,
            embed_channels: 64,
            channels_1d: 64,
            freq_bins: 64,
            time_frames: 16,
            time_downsample_levels: [2, 3, 4].into(),
            freq_scaling: true,
            cross_connect_down: false,
            // with single-channel groups the noise embedding bias would be normalised away
            max_norm_groups: 8,
        }
    }

    pub fn group_count(&self, channels: usize) -> usize {
        channels.min(self.max_norm_groups)
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_mults[level]
    }

    /// (frequency, time) extent of the feature maps at `level`.
    pub fn resolution(&self, level: usize) -> (usize, usize) {
        let halvings = self.time_downsample_levels.iter().filter(|&&l| l <= level).count();
        (self.freq_bins >> level, self.time_frames >> halvings)
    }

    fn time_factor(&self, level: usize) -> usize {
        if self.time_downsample_levels.contains(&level) {
            2
        } else {
            1
        }
    }

    /// Spectrogram frames summarised by one latent vector.
    pub fn frames_per_latent(&self) -> usize {
        1 << self.time_downsample_levels.len()
    }

    pub fn latent_frames(&self) -> usize {
        self.resolution(LEVELS - 1).1
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(format!("model: {m}")));
        if self.channel_mults.len() != LEVELS {
            return err(format!("channel_mults needs {LEVELS} entries, got {}", self.channel_mults.len()));
        }
        if self.d_lat == 0 || self.base_channels == 0 || self.channel_mults.contains(&0) {
            return err("d_lat, base_channels and channel_mults must be positive".into());
        }
        if self.max_norm_groups == 0 {
            return err("max_norm_groups must be positive".into());
        }
        if self.embed_channels < 2 || self.embed_channels % 2 != 0 {
            return err("embed_channels must be even and at least 2".into());
        }
        if self.channels_1d == 0 || self.attn_heads == 0 {
            return err("channels_1d and attn_heads must be positive".into());
        }
        if let Some(bad) = self.time_downsample_levels.iter().find(|&&l| l == 0 || l >= LEVELS) {
            return err(format!("time_downsample_levels entry {bad} is not a transition (1..=4)"));
        }
        if self.freq_bins % (1 << (LEVELS - 1)) != 0 {
            return err(format!("freq_bins {} is not divisible by {}", self.freq_bins, 1 << (LEVELS - 1)));
        }
        if self.time_frames % self.frames_per_latent() != 0 {
            return err(format!("time_frames {} is not divisible by {}", self.time_frames, self.frames_per_latent()));
        }
        for level in 0..LEVELS {
            let c = self.channels(level);
            if c % self.group_count(c) != 0 {
                return err(format!("level {level} has {c} channels, not divisible by its group count"));
            }
        }
        if self.channels_1d % self.group_count(self.channels_1d) != 0 {
            return err("channels_1d is not divisible by its group count".into());
        }
        for &level in &self.attn_levels {
            if level >= LEVELS {
                return err(format!("attention level {level} does not exist"));
            }
            let (f, _) = self.resolution(level);
            if f > 256 {
                return err(format!("attention at level {level} would span {f} frequency bins (max 256)"));
            }
            if self.channels(level) % self.attn_heads != 0 {
                return err(format!("level {level} channels not divisible by {} heads", self.attn_heads));
            }
        }
        Ok(())
    }
}

/// How a parameter is initialised.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `±sqrt(3 / fan_in)`.
    FanIn(usize),
    /// Uniform in `±1 / sqrt(fan_in)`.
    Bias(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Named weights, in layout order.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<F> {
    names: Rc<[String]>,
    tensors: Vec<Rc<Tensor<F>>>,
}

impl<F: Float> Params<F> {
    pub fn from_parts(network: &Network, tensors: Vec<Tensor<F>>) -> Result<Self> {
        if tensors.len() != network.specs.len() {
            return Err(Error::Schema(format!("expected {} tensors, got {}", network.specs.len(), tensors.len())));
        }
        for (spec, t) in network.specs.iter().zip(&tensors) {
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Schema(format!(
                    "{}: expected shape {:?}, got {:?}",
                    spec.name,
                    spec.shape,
                    t.shape()
                )));
            }
        }
        Ok(Self { names: network.names.clone(), tensors: tensors.into_iter().map(Rc::new).collect() })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensor(&self, i: usize) -> &Tensor<F> {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<F> {
        Rc::make_mut(&mut self.tensors[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.index_of(name).map(|i| &*self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter().map(|t| &**t))
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn cast<G: Float>(&self) -> Params<G> {
        Params { names: self.names.clone(), tensors: self.tensors.iter().map(|t| Rc::new(t.cast())).collect() }
    }

    /// True when both sets have the same names and shapes.
    pub fn same_structure<G: Float>(&self, other: &Params<G>) -> bool {
        self.names == other.names
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.shape() == b.shape())
    }

    /// Untracked view for inference or stop-gradient evaluation.
    pub fn constants(&self) -> Weights<F> {
        Weights { vars: self.tensors.iter().map(|t| Var::constant_rc(Rc::clone(t))).collect() }
    }

    /// Tape leaves; gradients w.r.t. them come back in layout order.
    pub fn leaves(&self, tape: &Tape<F>) -> Weights<F> {
        Weights { vars: self.tensors.iter().map(|t| tape.leaf_rc(Rc::clone(t))).collect() }
    }
}

/// Weights bound for one forward pass.
#[derive(Clone)]
pub struct Weights<F> {
    pub vars: Vec<Var<F>>,
}

impl<F: Float> Weights<F> {
    fn at(&self, i: usize) -> &Var<F> {
        &self.vars[i]
    }
}

/// Which adaptive frequency scaling to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScalingSide {
    Input,
    Output,
}

// ---------------------------------------------------------------------------
// layers

#[derive(Clone, Debug)]
struct Conv {
    weight: usize,
    bias: usize,
    geom: ConvGeom,
}

impl Conv {
    fn apply<F: Float>(&self, w: &Weights<F>, x: &Var<F>) -> Var<F> {
        let b = w.at(self.bias);
        let c = b.shape()[0];
        x.conv2d(w.at(self.weight), self.geom).add(&b.reshape([1, c, 1, 1]))
    }
}

#[derive(Clone, Debug)]
struct Linear {
    weight: usize,
    bias: usize,
}

impl Linear {
    fn apply<F: Float>(&self, w: &Weights<F>, x: &Var<F>) -> Var<F> {
        x.matmul(w.at(self.weight)).add(w.at(self.bias))
    }
}

#[derive(Clone, Debug)]
struct Norm {
    gamma: usize,
    beta: usize,
    groups: usize,
}

impl Norm {
    fn apply<F: Float>(&self, w: &Weights<F>, x: &Var<F>) -> Var<F> {
        let c = x.shape()[1];
        x.group_norm(self.groups, F::of(GN_EPS))
            .mul(&w.at(self.gamma).reshape([1, c, 1, 1]))
            .add(&w.at(self.beta).reshape([1, c, 1, 1]))
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: Norm,
    conv1: Conv,
    dense: Option<Linear>,
    norm2: Norm,
    conv2: Conv,
    skip: Option<Conv>,
}

impl ResBlock {
    /// `temb_act` is the already-activated noise embedding `[B, E]`.
    fn apply<F: Float>(&self, w: &Weights<F>, x: &Var<F>, temb_act: Option<&Var<F>>) -> Var<F> {
        let mut h = self.conv1.apply(w, &self.norm1.apply(w, x).silu());
        if let (Some(dense), Some(t)) = (&self.dense, temb_act) {
            let proj = dense.apply(w, t);
            let (b, c) = (proj.shape()[0], proj.shape()[1]);
            h = h.add(&proj.reshape([b, c, 1, 1]));
        }
        let h = self.conv2.apply(w, &self.norm2.apply(w, &h).silu());
        let skip = match &self.skip {
            Some(conv) => conv.apply(w, x),
            None => x.clone(),
        };
        skip.add(&h).scale(F::of(std::f64::consts::FRAC_1_SQRT_2))
    }
}

#[derive(Clone, Debug)]
struct AttnBlock {
    norm: Norm,
    q: Conv,
    k: Conv,
    v: Conv,
    out: Conv,
    heads: usize,
}

impl AttnBlock {
    fn apply<F: Float>(&self, w: &Weights<F>, x: &Var<F>) -> Var<F> {
        let h = self.norm.apply(w, x);
        let (q, k, v) = (self.q.apply(w, &h), self.k.apply(w, &h), self.v.apply(w, &h));
        let (attended, _) = frequency_attention(&q, &k, &v, self.heads).expect("heads validated by config");
        x.add(&self.out.apply(w, &attended))
    }
}

/// Multi-head self-attention over the frequency axis, independently at each
/// timestep. `q`, `k`, `v` are projected features `[B, C, F, T]`. Returns the
/// attended values `[B, C, F, T]` and the attention maps `[B * heads * T, F, F]`.
pub fn frequency_attention<F: Float>(q: &Var<F>, k: &Var<F>, v: &Var<F>, heads: usize) -> Result<(Var<F>, Tensor<F>)> {
    let shape = q.shape().to_vec();
    if shape.len() != 4 || k.shape() != shape.as_slice() || v.shape() != shape.as_slice() {
        return Err(Error::shape(format!("matching [B, C, F, T] for q, k, v; q is {shape:?}"), k.shape()));
    }
    let [b, c, f, t] = [shape[0], shape[1], shape[2], shape[3]];
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!("{c} channels are not divisible by {heads} heads")));
    }
    let dh = c / heads;
    let rows = b * heads * t;
    // [B, H, dh, F, T] -> [B, H, T, F, dh]
    let split = |x: &Var<F>| x.reshape([b, heads, dh, f, t]).permute(&[0, 1, 4, 3, 2]).reshape([rows, f, dh]);
    let qh = split(q);
    let kt = k.reshape([b, heads, dh, f, t]).permute(&[0, 1, 4, 2, 3]).reshape([rows, dh, f]);
    let vh = split(v);
    let scores = qh.matmul(&kt).scale(F::of(1.0 / (dh as f64).sqrt()));
    let probs = scores.softmax_last();
    let maps = probs.value().clone();
    let out = probs.matmul(&vh).reshape([b, heads, t, f, dh]).permute(&[0, 1, 4, 3, 2]).reshape([b, c, f, t]);
    Ok((out, maps))
}

/// Sinusoidal embedding of `log(sigma) / 4` for each sigma, `[B, dim]`.
pub fn noise_embedding<F: Float>(sigmas: &[f64], dim: usize) -> Result<Tensor<F>> {
    if dim < 2 || dim % 2 != 0 {
        return Err(Error::Config(format!("embedding dimension {dim} must be even and at least 2")));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(sigmas.len() * dim);
    for &sigma in sigmas {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::Domain(format!("noise level must be positive and finite, got {sigma}")));
        }
        let pos = sigma.ln() / 4.0;
        let freqs = (0..half).map(|i| (-(EMBED_MAX_PERIOD.ln()) * i as f64 / half as f64).exp());
        let args: Vec<f64> = freqs.map(|fr| pos * fr).collect();
        out.extend(args.iter().map(|a| F::of(a.sin())));
        out.extend(args.iter().map(|a| F::of(a.cos())));
    }
    Ok(Tensor::new([sigmas.len(), dim], out))
}

// ---------------------------------------------------------------------------
// layout construction

struct Builder {
    specs: Vec<ParamSpec>,
    max_groups: usize,
}

impl Builder {
    fn param(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push(ParamSpec { name, shape, init });
        self.specs.len() - 1
    }

    fn conv_full(&mut self, name: &str, cin: usize, cout: usize, k: (usize, usize), geom: ConvGeom, zero: bool) -> Conv {
        let fan = cin * k.0 * k.1;
        let (init, bias) = if zero { (Init::Zeros, Init::Zeros) } else { (Init::FanIn(fan), Init::Bias(fan)) };
        Conv {
            weight: self.param(format!("{name}.weight"), vec![cout, cin, k.0, k.1], init),
            bias: self.param(format!("{name}.bias"), vec![cout], bias),
            geom,
        }
    }

    fn conv3(&mut self, name: &str, cin: usize, cout: usize) -> Conv {
        self.conv_full(name, cin, cout, (3, 3), ConvGeom::same(3, 3), false)
    }

    fn conv1(&mut self, name: &str, cin: usize, cout: usize) -> Conv {
        self.conv_full(name, cin, cout, (1, 1), ConvGeom::same(1, 1), false)
    }

    /// Kernel 3 along time on `[B, C, 1, T]` maps.
    fn conv_time3(&mut self, name: &str, cin: usize, cout: usize) -> Conv {
        self.conv_full(name, cin, cout, (1, 3), ConvGeom::same(1, 3), false)
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize, zero: bool) -> Linear {
        let (init, bias) = if zero { (Init::Zeros, Init::Zeros) } else { (Init::FanIn(din), Init::Bias(din)) };
        Linear {
            weight: self.param(format!("{name}.weight"), vec![din, dout], init),
            bias: self.param(format!("{name}.bias"), vec![dout], bias),
        }
    }

    fn norm(&mut self, name: &str, c: usize) -> Norm {
        Norm {
            gamma: self.param(format!("{name}.gamma"), vec![c], Init::Ones),
            beta: self.param(format!("{name}.beta"), vec![c], Init::Zeros),
            groups: c.min(self.max_groups),
        }
    }

    fn res_block(&mut self, name: &str, cin: usize, cout: usize, temb: Option<usize>, one_d: bool) -> ResBlock {
        let conv = |b: &mut Self, n: &str, i: usize, o: usize| {
            if one_d {
                b.conv_time3(n, i, o)
            } else {
                b.conv3(n, i, o)
            }
        };
        ResBlock {
            norm1: self.norm(&format!("{name}.norm1"), cin),
            conv1: conv(self, &format!("{name}.conv1"), cin, cout),
            dense: temb.map(|e| self.linear(&format!("{name}.dense"), e, cout, false)),
            norm2: self.norm(&format!("{name}.norm2"), cout),
            conv2: conv(self, &format!("{name}.conv2"), cout, cout),
            skip: (cin != cout).then(|| self.conv1(&format!("{name}.skip"), cin, cout)),
        }
    }

    fn attn(&mut self, name: &str, c: usize, heads: usize) -> AttnBlock {
        AttnBlock {
            norm: self.norm(&format!("{name}.norm"), c),
            q: self.conv1(&format!("{name}.q"), c, c),
            k: self.conv1(&format!("{name}.k"), c, c),
            v: self.conv1(&format!("{name}.v"), c, c),
            out: self.conv_full(&format!("{name}.out"), c, c, (1, 1), ConvGeom::same(1, 1), true),
            heads,
        }
    }

    fn down(&mut self, name: &str, c: usize, time_factor: usize) -> Conv {
        let geom = ConvGeom { stride: (2, time_factor), padding: (1, 1) };
        self.conv_full(name, c, c, (3, 3), geom, false)
    }
}

#[derive(Clone, Debug)]
struct Level {
    blocks: Vec<ResBlock>,
    attns: Vec<Option<AttnBlock>>,
}

impl Level {
    fn apply<F: Float>(&self, w: &Weights<F>, mut h: Var<F>, temb_act: Option<&Var<F>>) -> Var<F> {
        for (block, attn) in self.blocks.iter().zip(&self.attns) {
            h = block.apply(w, &h, temb_act);
            if let Some(a) = attn {
                h = a.apply(w, &h);
            }
        }
        h
    }
}

#[derive(Clone, Debug)]
struct Upsample {
    conv: Conv,
    time_factor: usize,
}

impl Upsample {
    fn apply<F: Float>(&self, w: &Weights<F>, x: &Var<F>) -> Var<F> {
        self.conv.apply(w, &x.upsample_nearest2d(2, self.time_factor))
    }
}

#[derive(Clone, Debug)]
struct Bottleneck {
    proj_in: Conv,
    blocks: Vec<ResBlock>,
    norm: Norm,
    proj_out: Conv,
}

impl Bottleneck {
    fn apply<F: Float>(&self, w: &Weights<F>, x: &Var<F>) -> Var<F> {
        let mut h = self.proj_in.apply(w, x);
        for block in &self.blocks {
            h = block.apply(w, &h, None);
        }
        self.proj_out.apply(w, &self.norm.apply(w, &h).silu())
    }
}

#[derive(Clone, Debug)]
struct Encoder {
    conv_in: Conv,
    levels: Vec<Level>,
    downs: Vec<Conv>,
    bottleneck: Bottleneck,
}

#[derive(Clone, Debug)]
struct Decoder {
    bottleneck: Bottleneck,
    levels: Vec<Level>,
    ups: Vec<Upsample>,
}

#[derive(Clone, Debug)]
struct ScalingMlp {
    hidden: Linear,
    out: Linear,
}

impl ScalingMlp {
    fn apply<F: Float>(&self, w: &Weights<F>, emb: &Var<F>) -> Var<F> {
        let raw = self.out.apply(w, &self.hidden.apply(w, emb).silu());
        let (b, f) = (raw.shape()[0], raw.shape()[1]);
        raw.add_scalar(F::one()).reshape([b, 1, f, 1])
    }
}

#[derive(Clone, Debug)]
struct Unet {
    embed1: Linear,
    embed2: Linear,
    scale_in: Option<ScalingMlp>,
    scale_out: Option<ScalingMlp>,
    conv_in: Conv,
    down_levels: Vec<Level>,
    downs: Vec<Conv>,
    cross_down: Vec<Conv>,
    cross_up: Vec<Conv>,
    up_levels: Vec<Level>,
    ups: Vec<Upsample>,
    norm_out: Norm,
    conv_out: Conv,
}

/// Complete model layout.
#[derive(Clone, Debug)]
pub struct Network {
    cfg: ModelConfig,
    specs: Vec<ParamSpec>,
    names: Rc<[String]>,
    encoder: Encoder,
    decoder: Decoder,
    unet: Unet,
}

impl Network {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder { specs: Vec::new(), max_groups: cfg.max_norm_groups };
        let ch = |l: usize| cfg.channels(l);
        let heads = cfg.attn_heads;
        let level = |b: &mut Builder, name: &str, cin: usize, l: usize, n: usize, temb: Option<usize>, attn: bool| {
            let mut blocks = Vec::new();
            let mut attns = Vec::new();
            for i in 0..n {
                let input = if i == 0 { cin } else { ch(l) };
                blocks.push(b.res_block(&format!("{name}.block{i}"), input, ch(l), temb, false));
                attns.push((attn && cfg.attn_levels.contains(&l)).then(|| b.attn(&format!("{name}.attn{i}"), ch(l), heads)));
            }
            Level { blocks, attns }
        };
        let (f4, _) = cfg.resolution(LEVELS - 1);
        let flat = ch(LEVELS - 1) * f4;
        let bottleneck = |b: &mut Builder, name: &str, cin: usize, cout: usize| Bottleneck {
            proj_in: b.conv1(&format!("{name}.proj_in"), cin, cfg.channels_1d),
            blocks: (0..BLOCKS_1D)
                .map(|i| b.res_block(&format!("{name}.block{i}"), cfg.channels_1d, cfg.channels_1d, None, true))
                .collect(),
            norm: b.norm(&format!("{name}.norm"), cfg.channels_1d),
            proj_out: b.conv1(&format!("{name}.proj_out"), cfg.channels_1d, cout),
        };

        // encoder
        let conv_in = b.conv3("encoder.conv_in", 2, ch(0));
        let mut levels = Vec::new();
        let mut downs = Vec::new();
        for l in 0..LEVELS {
            let cin = if l == 0 { ch(0) } else { ch(l - 1) };
            levels.push(level(&mut b, &format!("encoder.level{l}"), cin, l, cfg.res_blocks_enc_dec.max(1), None, false));
            if l + 1 < LEVELS {
                downs.push(b.down(&format!("encoder.down{l}"), ch(l), cfg.time_factor(l + 1)));
            }
        }
        let encoder = Encoder { conv_in, levels, downs, bottleneck: bottleneck(&mut b, "encoder.bottleneck", flat, cfg.d_lat) };

        // decoder, ordered from the bottom level up
        let dec_bottleneck = bottleneck(&mut b, "decoder.bottleneck", cfg.d_lat, flat);
        let mut dec_levels = Vec::new();
        let mut dec_ups = Vec::new();
        for l in (0..LEVELS).rev() {
            dec_levels.push(level(&mut b, &format!("decoder.level{l}"), ch(l), l, cfg.res_blocks_enc_dec.max(1), None, false));
            if l > 0 {
                dec_ups.push(Upsample { conv: b.conv3(&format!("decoder.up{l}"), ch(l), ch(l - 1)), time_factor: cfg.time_factor(l) });
            }
        }
        let decoder = Decoder { bottleneck: dec_bottleneck, levels: dec_levels, ups: dec_ups };

        // consistency UNet
        let e = cfg.embed_channels;
        let embed1 = b.linear("unet.embed.0", e, e, false);
        let embed2 = b.linear("unet.embed.1", e, e, false);
        let scaling = |b: &mut Builder, name: &str| ScalingMlp {
            hidden: b.linear(&format!("{name}.0"), e, e, false),
            out: b.linear(&format!("{name}.1"), e, cfg.freq_bins, true),
        };
        let scale_in = cfg.freq_scaling.then(|| scaling(&mut b, "unet.freq_scale_in"));
        let scale_out = cfg.freq_scaling.then(|| scaling(&mut b, "unet.freq_scale_out"));
        let unet_conv_in = b.conv3("unet.conv_in", 2, ch(0));
        let mut down_levels = Vec::new();
        let mut unet_downs = Vec::new();
        let mut cross_down = Vec::new();
        for l in 0..LEVELS {
            let cin = if l == 0 { ch(0) } else { ch(l - 1) };
            if cfg.cross_connect_down {
                cross_down.push(b.conv1(&format!("unet.cross_down{l}"), ch(l), cin));
            }
            down_levels.push(level(&mut b, &format!("unet.down_level{l}"), cin, l, cfg.res_blocks_unet, Some(e), true));
            if l + 1 < LEVELS {
                unet_downs.push(b.down(&format!("unet.down{l}"), ch(l), cfg.time_factor(l + 1)));
            }
        }
        let mut cross_up = Vec::new();
        let mut up_levels = Vec::new();
        let mut ups = Vec::new();
        for l in (0..LEVELS).rev() {
            cross_up.push(b.conv1(&format!("unet.cross_up{l}"), ch(l), ch(l)));
            up_levels.push(level(&mut b, &format!("unet.up_level{l}"), ch(l), l, cfg.res_blocks_unet, Some(e), true));
            if l > 0 {
                ups.push(Upsample { conv: b.conv3(&format!("unet.up{l}"), ch(l), ch(l - 1)), time_factor: cfg.time_factor(l) });
            }
        }
        let unet = Unet {
            embed1,
            embed2,
            scale_in,
            scale_out,
            conv_in: unet_conv_in,
            down_levels,
            downs: unet_downs,
            cross_down,
            cross_up,
            up_levels,
            ups,
            norm_out: b.norm("unet.norm_out", ch(0)),
            conv_out: b.conv3("unet.conv_out", ch(0), 2),
        };

        let names: Rc<[String]> = b.specs.iter().map(|s| s.name.clone()).collect();
        Ok(Self { cfg, specs: b.specs, names, encoder, decoder, unet })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn parameter_count(&self) -> usize {
        self.specs.iter().map(ParamSpec::numel).sum()
    }

    pub fn init_params<F: Float, R: Rng + ?Sized>(&self, rng: &mut R) -> Params<F> {
        let tensors = self
            .specs
            .iter()
            .map(|s| match s.init {
                Init::Zeros => Tensor::zeros(s.shape.clone()),
                Init::Ones => Tensor::ones(s.shape.clone()),
                Init::FanIn(fan) => {
                    let bound = (3.0 / fan as f64).sqrt();
                    Tensor::from_fn(s.shape.clone(), |_| F::of(rng.random_range(-bound..bound)))
                }
                Init::Bias(fan) => {
                    let bound = 1.0 / (fan as f64).sqrt();
                    Tensor::from_fn(s.shape.clone(), |_| F::of(rng.random_range(-bound..bound)))
                }
            })
            .map(Rc::new)
            .collect();
        Params { names: self.names.clone(), tensors }
    }

    fn check_input<F: Float>(&self, w: &Weights<F>, x: &Var<F>, what: &str) -> Result<usize> {
        if w.vars.len() != self.specs.len() {
            return Err(Error::Schema(format!("weights have {} tensors, layout has {}", w.vars.len(), self.specs.len())));
        }
        let s = x.shape();
        if s.len() != 4 || s[1] != 2 || s[2] != self.cfg.freq_bins || s[3] != self.cfg.time_frames {
            return Err(Error::shape(
                format!("{what} [B, 2, {}, {}]", self.cfg.freq_bins, self.cfg.time_frames),
                s,
            ));
        }
        Ok(s[0])
    }

    /// Compressed spectrograms `[B, 2, F, T]` to latents `[B, d_lat, L]`.
    pub fn encode<F: Float>(&self, w: &Weights<F>, x: &Var<F>) -> Result<Var<F>> {
        let batch = self.check_input(w, x, "encoder input")?;
        let enc = &self.encoder;
        let mut h = enc.conv_in.apply(w, x);
        for (l, level) in enc.levels.iter().enumerate() {
            h = level.apply(w, h, None);
            if let Some(down) = enc.downs.get(l) {
                h = down.apply(w, &h);
            }
        }
        let (c, f, t) = (h.shape()[1], h.shape()[2], h.shape()[3]);
        let flat = h.reshape([batch, c * f, 1, t]);
        let lat = enc.bottleneck.apply(w, &flat).tanh();
        Ok(lat.reshape([batch, self.cfg.d_lat, t]))
    }

    /// Latents `[B, d_lat, L]` to per-level features, index = level.
    pub fn decode_features<F: Float>(&self, w: &Weights<F>, lat: &Var<F>) -> Result<Vec<Var<F>>> {
        let s = lat.shape();
        let l4 = self.cfg.latent_frames();
        if s.len() != 3 || s[1] != self.cfg.d_lat || s[2] != l4 {
            return Err(Error::shape(format!("latents [B, {}, {l4}]", self.cfg.d_lat), s));
        }
        let batch = s[0];
        let dec = &self.decoder;
        let (f4, t4) = self.cfg.resolution(LEVELS - 1);
        let c4 = self.cfg.channels(LEVELS - 1);
        let mut h = dec.bottleneck.apply(w, &lat.reshape([batch, self.cfg.d_lat, 1, l4])).reshape([batch, c4, f4, t4]);
        let mut feats = Vec::with_capacity(LEVELS);
        for (i, level) in dec.levels.iter().enumerate() {
            h = level.apply(w, h, None);
            feats.push(h.clone());
            if let Some(up) = dec.ups.get(i) {
                h = up.apply(w, &h);
            }
        }
        feats.reverse();
        Ok(feats)
    }

    /// Per-bin scales `[B, 1, F, 1]`; all ones when scaling is disabled.
    pub fn adaptive_freq_scaling<F: Float>(&self, w: &Weights<F>, sigmas: &[f64], side: ScalingSide) -> Result<Var<F>> {
        let mlp = match side {
            ScalingSide::Input => &self.unet.scale_in,
            ScalingSide::Output => &self.unet.scale_out,
        };
        match mlp {
            Some(m) => Ok(m.apply(w, &Var::constant(noise_embedding(sigmas, self.cfg.embed_channels)?))),
            None => Ok(Var::constant(Tensor::ones([sigmas.len(), 1, self.cfg.freq_bins, 1]))),
        }
    }

    /// Free-form UNet output `F_theta` for noisy input `[B, 2, F, T]`,
    /// including the `c_in` and adaptive frequency scalings.
    pub fn unet_forward<F: Float>(
        &self,
        w: &Weights<F>,
        x_sigma: &Var<F>,
        sigmas: &[f64],
        y: &[Var<F>],
        sched: &ScheduleConfig,
    ) -> Result<Var<F>> {
        let batch = self.check_input(w, x_sigma, "UNet input")?;
        if sigmas.len() != batch {
            return Err(Error::Length(format!("{} noise levels for a batch of {batch}", sigmas.len())));
        }
        if y.len() != LEVELS {
            return Err(Error::Length(format!("expected {LEVELS} decoder features, got {}", y.len())));
        }
        for (l, feat) in y.iter().enumerate() {
            let (f, t) = self.cfg.resolution(l);
            let want = [batch, self.cfg.channels(l), f, t];
            if feat.shape() != want {
                return Err(Error::shape(format!("decoder feature {l} {want:?}"), feat.shape()));
            }
        }
        let mut c_in = Vec::with_capacity(batch);
        for &s in sigmas {
            c_in.push(F::of(consistency_scalings(s, sched)?.c_in));
        }
        let u = &self.unet;
        let raw_emb = Var::constant(noise_embedding(sigmas, self.cfg.embed_channels)?);
        let temb = u.embed2.apply(w, &u.embed1.apply(w, &raw_emb).silu()).silu();

        let mut h = x_sigma.mul(&Var::constant(Tensor::new([batch, 1, 1, 1], c_in)));
        if let Some(m) = &u.scale_in {
            h = h.mul(&m.apply(w, &raw_emb));
        }
        h = u.conv_in.apply(w, &h);
        let mut skips = Vec::with_capacity(LEVELS - 1);
        for (l, level) in u.down_levels.iter().enumerate() {
            if let Some(proj) = u.cross_down.get(l) {
                h = h.add(&proj.apply(w, &y[l]));
            }
            h = level.apply(w, h, Some(&temb));
            if l + 1 < LEVELS {
                skips.push(h.clone());
                h = u.downs[l].apply(w, &h);
            }
        }
        for (i, level) in u.up_levels.iter().enumerate() {
            let l = LEVELS - 1 - i;
            h = h.add(&u.cross_up[i].apply(w, &y[l]));
            if l < LEVELS - 1 {
                h = h.add(&skips[l]);
            }
            h = level.apply(w, h, Some(&temb));
            if let Some(up) = u.ups.get(i) {
                h = up.apply(w, &h);
            }
        }
        let mut out = u.conv_out.apply(w, &u.norm_out.apply(w, &h).silu());
        if let Some(m) = &u.scale_out {
            out = out.mul(&m.apply(w, &raw_emb));
        }
        Ok(out)
    }

    /// `c_skip(sigma) x + c_out(sigma) F_theta(x, sigma, y)`.
    pub fn consistency_fn<F: Float>(
        &self,
        w: &Weights<F>,
        x_sigma: &Var<F>,
        sigmas: &[f64],
        y: &[Var<F>],
        sched: &ScheduleConfig,
    ) -> Result<Var<F>> {
        let raw = self.unet_forward(w, x_sigma, sigmas, y, sched)?;
        let (skip, out) = self.scaling_tensors(sigmas, sched)?;
        Ok(x_sigma.mul(&Var::constant(skip)).add(&raw.mul(&Var::constant(out))))
    }

    fn scaling_tensors<F: Float>(&self, sigmas: &[f64], sched: &ScheduleConfig) -> Result<(Tensor<F>, Tensor<F>)> {
        let mut skip = Vec::with_capacity(sigmas.len());
        let mut out = Vec::with_capacity(sigmas.len());
        for &s in sigmas {
            let c = consistency_scalings(s, sched)?;
            skip.push(F::of(c.c_skip));
            out.push(F::of(c.c_out));
        }
        let shape = [sigmas.len(), 1, 1, 1];
        Ok((Tensor::new(shape, skip), Tensor::new(shape, out)))
    }
}

/// Total trainable parameters for a configuration.
pub fn count_parameters(cfg: &ModelConfig) -> Result<usize> {
    Ok(Network::new(cfg.clone())?.parameter_count())
}
