//! The three networks: the UNet segmenter, the shape auto-encoder and the
//! conditional patch discriminator.
//!
//! Each network owns a [`ParamStore`] in declaration order. Forward passes
//! take the parameters as tape handles so the caller decides whether they
//! are trainable or frozen.

mod checkpoint;
mod params;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BnState, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::types::Strategy;

pub use checkpoint::{load_checkpoint, save_checkpoint, read_checkpoint, write_checkpoint, Network, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use params::{NormStates, ParamStore};
use params::{Conv, Norm};

const DISC_SLOPE: f64 = 0.2;
const AE_SLOPE: f64 = 0.1;

/// Output activation of the segmenter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    /// Softmax over `num_classes + 1` channels, channel 0 is background.
    Softmax,
    /// Independent sigmoid per class channel.
    Sigmoid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegNetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub depth: usize,
    pub base_channels: usize,
    pub head: Head,
}

impl SegNetConfig {
    /// Desk-scale segmenter for a labelling strategy over `classes` structures.
    pub fn for_strategy(strategy: Strategy, classes: usize) -> Self {
        match strategy {
            Strategy::Multi => Self {
                in_channels: 1,
                num_classes: classes,
                depth: 3,
                base_channels: 8,
                head: Head::Softmax,
            },
            Strategy::Individual | Strategy::Global => Self {
                in_channels: 1,
                num_classes: 1,
                depth: 3,
                base_channels: 8,
                head: Head::Sigmoid,
            },
        }
    }

    pub fn out_channels(&self) -> usize {
        match self.head {
            Head::Softmax => self.num_classes + 1,
            Head::Sigmoid => self.num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.in_channels == 0 || self.base_channels == 0 {
            return Err(Error::Config(format!("segmenter config has a zero size: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoEncoderConfig {
    pub in_channels: usize,
    pub depth: usize,
    pub base_channels: usize,
    pub code_channels: usize,
}

impl AutoEncoderConfig {
    pub fn new(in_channels: usize) -> Self {
        Self {
            in_channels,
            depth: 3,
            base_channels: 8,
            code_channels: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.depth == 0 || self.base_channels == 0 || self.code_channels == 0 {
            return Err(Error::Config(format!("auto-encoder config has a zero size: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    /// Mask channels plus the single image channel.
    pub in_channels: usize,
    pub depth: usize,
    pub base_channels: usize,
}

impl DiscriminatorConfig {
    pub fn new(mask_channels: usize) -> Self {
        Self {
            in_channels: mask_channels + 1,
            depth: 3,
            base_channels: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels < 2 || self.depth == 0 || self.base_channels == 0 {
            return Err(Error::Config(format!("discriminator config is invalid: {self:?}")));
        }
        Ok(())
    }
}

fn check_extent(op: &'static str, shape: &[usize], depth: usize, channels: usize) -> Result<()> {
    let &[_, c, h, w] = shape else {
        return Err(Error::shape(op, format!("expected [N,C,H,W], got {shape:?}")));
    };
    if c != channels {
        return Err(Error::shape(op, format!("expected {channels} input channels, got {c}")));
    }
    let m = 1usize << depth;
    if h % m != 0 || w % m != 0 || h < m || w < m {
        return Err(Error::shape(
            op,
            format!("spatial extent {h}x{w} is not a positive multiple of 2^{depth}"),
        ));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug)]
struct ConvBn {
    conv: Conv,
    norm: Norm,
    /// Negative-side slope of the activation; zero is a plain ReLU.
    slope: f64,
}

impl ConvBn {
    fn new(
        store: &mut ParamStore,
        states: &mut Vec<BnState>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
    ) -> Self {
        Self {
            conv: Conv::new(store, rng, &format!("{name}.conv"), c_in, c_out, 3, 1),
            norm: Norm::new(store, states, &format!("{name}.bn"), c_out),
            slope: 0.0,
        }
    }

    fn leaky(mut self, slope: f64) -> Self {
        self.slope = slope;
        self
    }

    fn apply(&self, tape: &mut Tape, p: &[Var], x: Var, states: &mut NormStates<'_>) -> Result<Var> {
        let y = self.conv.apply(tape, p, x)?;
        let y = self.norm.apply(tape, p, y, states)?;
        Ok(if self.slope == 0.0 {
            tape.relu(y)
        } else {
            tape.leaky_relu(y, self.slope)
        })
    }
}

#[derive(Clone, Debug)]
struct UNetLayout {
    down: Vec<[ConvBn; 2]>,
    bottom: [ConvBn; 2],
    up: Vec<[ConvBn; 2]>,
    head: Conv,
}

/// UNet segmentation network `S`.
#[derive(Clone, Debug)]
pub struct SegNet {
    cfg: SegNetConfig,
    params: ParamStore,
    bn: Vec<BnState>,
    layout: UNetLayout,
}

impl SegNet {
    /// He-uniform kernels, zero biases, unit gamma and zero beta, all drawn
    /// from a ChaCha8 stream seeded with `seed`.
    pub fn build(cfg: &SegNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let mut bn = Vec::new();
        let ch = |i: usize| cfg.base_channels << i;
        let mut down = Vec::with_capacity(cfg.depth);
        let mut c_prev = cfg.in_channels;
        for i in 0..cfg.depth {
            let a = ConvBn::new(&mut store, &mut bn, &mut rng, &format!("down{i}.0"), c_prev, ch(i));
            let b = ConvBn::new(&mut store, &mut bn, &mut rng, &format!("down{i}.1"), ch(i), ch(i));
            down.push([a, b]);
            c_prev = ch(i);
        }
        let bottom = [
            ConvBn::new(&mut store, &mut bn, &mut rng, "bottom.0", c_prev, ch(cfg.depth)),
            ConvBn::new(&mut store, &mut bn, &mut rng, "bottom.1", ch(cfg.depth), ch(cfg.depth)),
        ];
        c_prev = ch(cfg.depth);
        let mut up = Vec::with_capacity(cfg.depth);
        for i in (0..cfg.depth).rev() {
            let a = ConvBn::new(&mut store, &mut bn, &mut rng, &format!("up{i}.0"), c_prev + ch(i), ch(i));
            let b = ConvBn::new(&mut store, &mut bn, &mut rng, &format!("up{i}.1"), ch(i), ch(i));
            up.push([a, b]);
            c_prev = ch(i);
        }
        let head = Conv::new(&mut store, &mut rng, "head", c_prev, cfg.out_channels(), 1, 1);
        Ok(Self {
            cfg: cfg.clone(),
            params: store,
            bn,
            layout: UNetLayout { down, bottom, up, head },
        })
    }

    pub fn config(&self) -> &SegNetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn norm_states(&self) -> &[BnState] {
        &self.bn
    }

    /// Class probabilities for `x: [N, in_channels, H, W]` recorded on `tape`.
    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var, states: &mut NormStates<'_>) -> Result<Var> {
        check_extent("forward_seg", tape.shape(x), self.cfg.depth, self.cfg.in_channels)?;
        let l = &self.layout;
        let mut skips = Vec::with_capacity(self.cfg.depth);
        let mut h = x;
        for [a, b] in &l.down {
            h = a.apply(tape, p, h, states)?;
            h = b.apply(tape, p, h, states)?;
            skips.push(h);
            h = tape.maxpool2(h)?;
        }
        h = l.bottom[0].apply(tape, p, h, states)?;
        h = l.bottom[1].apply(tape, p, h, states)?;
        for ([a, b], skip) in l.up.iter().zip(skips.into_iter().rev()) {
            h = tape.upsample2(h)?;
            h = tape.concat_channels(h, skip)?;
            h = a.apply(tape, p, h, states)?;
            h = b.apply(tape, p, h, states)?;
        }
        let logits = l.head.apply(tape, p, h)?;
        match self.cfg.head {
            Head::Softmax => tape.softmax_channels(logits),
            Head::Sigmoid => Ok(tape.sigmoid(logits)),
        }
    }

    /// Training-mode forward that updates the running moments.
    pub fn forward_train(&mut self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        let mut bn = std::mem::take(&mut self.bn);
        let out = self.forward(tape, p, x, &mut NormStates::Train(&mut bn));
        self.bn = bn;
        out
    }

    /// Foreground channels of a head output (drops the softmax background).
    pub fn foreground(&self, tape: &mut Tape, probs: Var) -> Result<Var> {
        match self.cfg.head {
            Head::Softmax => tape.slice_channels(probs, 1, self.cfg.num_classes + 1),
            Head::Sigmoid => Ok(probs),
        }
    }

    /// Eval-mode forward on plain tensors.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &p, xv, &mut NormStates::Eval(&self.bn))?;
        Ok(tape.value(out).clone())
    }

    pub(crate) fn from_checkpoint(cfg: SegNetConfig, params: ParamStore, bn: Vec<BnState>) -> Result<Self> {
        let mut fresh = Self::build(&cfg, 0)?;
        fresh.adopt(params, bn)?;
        Ok(fresh)
    }

    fn adopt(&mut self, params: ParamStore, bn: Vec<BnState>) -> Result<()> {
        adopt_params(&mut self.params, params)?;
        self.bn = adopt_norms(&self.bn, bn)?;
        Ok(())
    }
}

fn adopt_norms(template: &[BnState], bn: Vec<BnState>) -> Result<Vec<BnState>> {
    if bn.len() != template.len() || bn.iter().zip(template).any(|(a, b)| a.mean.len() != b.mean.len()) {
        return Err(Error::Contract("checkpoint batch-norm layout differs from config".into()));
    }
    Ok(bn)
}

fn adopt_params(target: &mut ParamStore, source: ParamStore) -> Result<()> {
    if target.len() != source.len()
        || target
            .tensors()
            .iter()
            .zip(source.tensors())
            .any(|(a, b)| a.shape() != b.shape())
    {
        return Err(Error::Contract("checkpoint parameter layout differs from config".into()));
    }
    *target = source;
    Ok(())
}

/// Shape auto-encoder: encoder `F` and decoder `G` over mask stacks.
#[derive(Clone, Debug)]
pub struct AutoEncoder {
    cfg: AutoEncoderConfig,
    params: ParamStore,
    bn: Vec<BnState>,
    encoder: Vec<ConvBn>,
    code: Conv,
    decoder: Vec<ConvBn>,
    out: Conv,
}

impl AutoEncoder {
    pub fn build(cfg: &AutoEncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let mut bn = Vec::new();
        let ch = |i: usize| cfg.base_channels << i;
        let mut encoder = Vec::new();
        let mut c_prev = cfg.in_channels;
        for i in 0..cfg.depth {
            encoder.push(ConvBn::new(&mut store, &mut bn, &mut rng, &format!("enc{i}"), c_prev, ch(i)).leaky(AE_SLOPE));
            c_prev = ch(i);
        }
        let code = Conv::new(&mut store, &mut rng, "code", c_prev, cfg.code_channels, 3, 1);
        c_prev = cfg.code_channels;
        let mut decoder = Vec::new();
        for i in (0..cfg.depth).rev() {
            decoder.push(ConvBn::new(&mut store, &mut bn, &mut rng, &format!("dec{i}"), c_prev, ch(i)).leaky(AE_SLOPE));
            c_prev = ch(i);
        }
        let out = Conv::new(&mut store, &mut rng, "out", c_prev, cfg.in_channels, 1, 1);
        Ok(Self {
            cfg: cfg.clone(),
            params: store,
            bn,
            encoder,
            code,
            decoder,
            out,
        })
    }

    pub fn config(&self) -> &AutoEncoderConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn norm_states(&self) -> &[BnState] {
        &self.bn
    }

    /// Bottleneck feature map `F(y)` of shape `[N, code_channels, H/2^d, W/2^d]`.
    pub fn encode(&self, tape: &mut Tape, p: &[Var], y: Var, states: &mut NormStates<'_>) -> Result<Var> {
        check_extent("encode", tape.shape(y), self.cfg.depth, self.cfg.in_channels)?;
        let mut h = y;
        for block in &self.encoder {
            h = block.apply(tape, p, h, states)?;
            h = tape.maxpool2(h)?;
        }
        self.code.apply(tape, p, h)
    }

    /// Reconstruction `G(code)` with sigmoid outputs.
    pub fn decode(&self, tape: &mut Tape, p: &[Var], code: Var, states: &mut NormStates<'_>) -> Result<Var> {
        let shape = tape.shape(code);
        if shape.len() != 4 || shape[1] != self.cfg.code_channels {
            return Err(Error::shape(
                "decode",
                format!("expected [N,{},h,w] code, got {shape:?}", self.cfg.code_channels),
            ));
        }
        let mut h = code;
        for block in &self.decoder {
            h = tape.upsample2(h)?;
            h = block.apply(tape, p, h, states)?;
        }
        let logits = self.out.apply(tape, p, h)?;
        Ok(tape.sigmoid(logits))
    }

    pub fn reconstruct(&self, tape: &mut Tape, p: &[Var], y: Var, states: &mut NormStates<'_>) -> Result<Var> {
        let code = self.encode(tape, p, y, states)?;
        self.decode(tape, p, code, states)
    }

    /// Training-mode reconstruction that updates the running moments.
    pub fn reconstruct_train(&mut self, tape: &mut Tape, p: &[Var], y: Var) -> Result<Var> {
        let mut bn = std::mem::take(&mut self.bn);
        let out = self.reconstruct(tape, p, y, &mut NormStates::Train(&mut bn));
        self.bn = bn;
        out
    }

    /// Eval-mode encoding with the parameters bound as constants.
    pub fn encode_frozen(&self, tape: &mut Tape, y: Var) -> Result<Var> {
        let p = self.params.bind(tape, false);
        self.encode(tape, &p, y, &mut NormStates::Eval(&self.bn))
    }

    pub fn encode_tensor(&self, y: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let yv = tape.constant(y.clone());
        let code = self.encode_frozen(&mut tape, yv)?;
        Ok(tape.value(code).clone())
    }

    pub fn reconstruct_tensor(&self, y: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let yv = tape.constant(y.clone());
        let out = self.reconstruct(&mut tape, &p, yv, &mut NormStates::Eval(&self.bn))?;
        Ok(tape.value(out).clone())
    }

    /// Global-max-pooled bottleneck, one `code_channels` vector per sample.
    pub fn latent_codes(&self, y: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let yv = tape.constant(y.clone());
        let code = self.encode_frozen(&mut tape, yv)?;
        let pooled = tape.global_max_pool(code)?;
        Ok(tape.value(pooled).clone())
    }

    pub(crate) fn from_checkpoint(cfg: AutoEncoderConfig, params: ParamStore, bn: Vec<BnState>) -> Result<Self> {
        let mut fresh = Self::build(&cfg, 0)?;
        adopt_params(&mut fresh.params, params)?;
        fresh.bn = adopt_norms(&fresh.bn, bn)?;
        Ok(fresh)
    }
}

/// Conditional patch discriminator `D(y, x)` producing a likelihood map.
#[derive(Clone, Debug)]
pub struct Discriminator {
    cfg: DiscriminatorConfig,
    params: ParamStore,
    layers: Vec<Conv>,
    out: Conv,
}

impl Discriminator {
    pub fn build(cfg: &DiscriminatorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let mut layers = Vec::new();
        let mut c_prev = cfg.in_channels;
        for i in 0..cfg.depth {
            let c = cfg.base_channels << i;
            layers.push(Conv::new(&mut store, &mut rng, &format!("layer{i}"), c_prev, c, 3, 2));
            c_prev = c;
        }
        let out = Conv::new(&mut store, &mut rng, "out", c_prev, 1, 3, 1);
        Ok(Self {
            cfg: cfg.clone(),
            params: store,
            layers,
            out,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Likelihood map `[N, 1, H/2^d, W/2^d]` for masks `y` conditioned on
    /// images `x`.
    pub fn discriminate(&self, tape: &mut Tape, p: &[Var], y: Var, x: Var) -> Result<Var> {
        let yc = tape.shape(y).get(1).copied().unwrap_or(0);
        let xc = tape.shape(x).get(1).copied().unwrap_or(0);
        if yc + xc != self.cfg.in_channels {
            return Err(Error::shape(
                "discriminate",
                format!("{yc} mask + {xc} image channels, expected {} total", self.cfg.in_channels),
            ));
        }
        let mut h = tape.concat_channels(y, x)?;
        check_extent("discriminate", tape.shape(h), self.cfg.depth, self.cfg.in_channels)?;
        for conv in &self.layers {
            h = conv.apply(tape, p, h)?;
            h = tape.leaky_relu(h, DISC_SLOPE);
        }
        let logits = self.out.apply(tape, p, h)?;
        Ok(tape.sigmoid(logits))
    }

    pub fn discriminate_tensor(&self, y: &Tensor, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let (yv, xv) = (tape.constant(y.clone()), tape.constant(x.clone()));
        let out = self.discriminate(&mut tape, &p, yv, xv)?;
        Ok(tape.value(out).clone())
    }

    pub(crate) fn from_checkpoint(cfg: DiscriminatorConfig, params: ParamStore) -> Result<Self> {
        let mut fresh = Self::build(&cfg, 0)?;
        adopt_params(&mut fresh.params, params)?;
        Ok(fresh)
    }
}
