//! UCM-Net and the U-Net ablation variants.
//!
//! All three share a six-stage encoder (widths `stage_channels`, 2x2 max-pool
//! after stages 1-5) and a five-stage decoder back to input resolution.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::autograd::{Tape, Var};
use crate::error::{AutogradError, ShapeError};
use crate::nn::{BatchNorm, Conv2d, ConvTranspose2d, LayerNorm, Linear, Mode, LEAKY_SLOPE};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

pub const NUM_STAGES: usize = 6;
pub const NUM_DECODER_STAGES: usize = NUM_STAGES - 1;
/// Total downsampling factor of the encoder.
pub const SPATIAL_DIVISOR: usize = 1 << NUM_DECODER_STAGES;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error("invalid network config: {0}")]
    Config(String),
}

impl From<ShapeError> for ModelError {
    fn from(e: ShapeError) -> Self {
        ModelError::Autograd(e.into())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    /// Two 3x3 conv blocks per stage.
    VariantADoubleConv,
    /// 3x3 conv block followed by a 1x1 conv block.
    VariantBConv1x1,
    /// Conv block plus UCM block (UCM-Net).
    VariantCUcm,
}

impl BlockKind {
    pub const ALL: [BlockKind; 3] = [
        BlockKind::VariantADoubleConv,
        BlockKind::VariantBConv1x1,
        BlockKind::VariantCUcm,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BlockKind::VariantADoubleConv => "variant_a_doubleconv",
            BlockKind::VariantBConv1x1 => "variant_b_conv1x1",
            BlockKind::VariantCUcm => "variant_c_ucm",
        }
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BlockKind {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        BlockKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| ModelError::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub stage_channels: [usize; NUM_STAGES],
    pub input_channels: usize,
    pub input_size: (usize, usize),
    pub block_kind: BlockKind,
    /// Stage heads on decoder stages. Only UCM-Net carries heads.
    pub deep_supervision: bool,
    /// Encoder stages (1..=6) that append a UCM block after their conv block.
    pub ucm_encoder: [bool; NUM_STAGES],
    /// Decoder stages (1..=5, deepest first) that append a UCM block.
    pub ucm_decoder: [bool; NUM_DECODER_STAGES],
    pub leaky_slope: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            stage_channels: [8, 16, 24, 32, 48, 64],
            input_channels: 3,
            input_size: (256, 256),
            block_kind: BlockKind::VariantCUcm,
            deep_supervision: true,
            ucm_encoder: [false, false, false, true, true, false],
            ucm_decoder: [true, true, false, true, false],
            leaky_slope: LEAKY_SLOPE,
        }
    }
}

impl NetworkConfig {
    pub fn variant(kind: BlockKind) -> Self {
        NetworkConfig {
            block_kind: kind,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % SPATIAL_DIVISOR != 0 || w % SPATIAL_DIVISOR != 0 {
            return Err(ModelError::Config(format!(
                "input size {h}x{w} must be positive and divisible by {SPATIAL_DIVISOR}"
            )));
        }
        if self.input_channels == 0 || self.stage_channels.contains(&0) {
            return Err(ModelError::Config("channel counts must be positive".into()));
        }
        if self.block_kind != BlockKind::VariantCUcm && self.stage_channels.iter().any(|c| c % 2 != 0) {
            return Err(ModelError::Config("U-Net variants need even stage widths".into()));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(ModelError::Config(format!("leaky slope {} outside (0,1)", self.leaky_slope)));
        }
        Ok(())
    }
}

// ── UCM block ─────────────────────────────────────────────────────────────

/// Hybrid linear/convolution block; `[B,C,H,W] -> [B,H·W,C]` with a residual
/// taken right after the first flatten.
#[derive(Clone, Debug)]
pub struct UcmBlock {
    pub name: String,
    pub c: usize,
    pub slope: f64,
    pub ln1: LayerNorm,
    pub fc1: Linear,
    pub ln2: LayerNorm,
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub bn: BatchNorm,
    pub fc2: Linear,
    pub ln3: LayerNorm,
    pub conv3: Conv2d,
}

/// `[B,C,H,W] -> [B,H·W,C]`.
fn flatten<'t, T: Scalar>(x: Var<'t, T>) -> Result<Var<'t, T>, AutogradError> {
    let s = x.shape();
    x.reshape(&[s[0], s[1], s[2] * s[3]])?.transpose(1, 2)
}

/// `[B,H·W,C] -> [B,C,H,W]`.
fn unflatten<'t, T: Scalar>(x: Var<'t, T>, h: usize, w: usize) -> Result<Var<'t, T>, AutogradError> {
    let s = x.shape();
    x.transpose(1, 2)?.reshape(&[s[0], s[2], h, w])
}

impl UcmBlock {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize, slope: f64, seed: u64) -> Self {
        let n = |s: &str| format!("{name}.{s}");
        UcmBlock {
            name: name.to_string(),
            c,
            slope,
            ln1: LayerNorm::new(store, &n("ln1"), c, 2),
            fc1: Linear::new(store, &n("fc1"), c, c, seed),
            ln2: LayerNorm::new(store, &n("ln2"), c, 1),
            conv1: Conv2d::new(store, &n("conv1"), c, c, 1, true, seed),
            conv2: Conv2d::new(store, &n("conv2"), c, c, 1, true, seed),
            bn: BatchNorm::new(store, &n("bn"), c, 2),
            fc2: Linear::new(store, &n("fc2"), c, c, seed),
            ln3: LayerNorm::new(store, &n("ln3"), c, 1),
            conv3: Conv2d::new(store, &n("conv3"), c, c, 1, true, seed),
        }
    }

    /// `5C² + 13C`.
    pub fn param_count(&self) -> usize {
        self.layer_params().iter().map(|l| l.1).sum()
    }

    pub fn layer_params(&self) -> Vec<(String, usize)> {
        vec![
            (self.ln1.name.clone(), self.ln1.param_count()),
            (self.fc1.name.clone(), self.fc1.param_count()),
            (self.ln2.name.clone(), self.ln2.param_count()),
            (self.conv1.name.clone(), self.conv1.param_count()),
            (self.conv2.name.clone(), self.conv2.param_count()),
            (self.bn.name.clone(), self.bn.param_count()),
            (self.fc2.name.clone(), self.fc2.param_count()),
            (self.ln3.name.clone(), self.ln3.param_count()),
            (self.conv3.name.clone(), self.conv3.param_count()),
        ]
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &mut ParamStore<T>,
        x: Var<'t, T>,
        mode: Mode,
    ) -> Result<Var<'t, T>, AutogradError> {
        let s = x.shape();
        if s.len() != 4 {
            return Err(ShapeError::Rank { expected: 4, shape: s }.into());
        }
        if s[1] != self.c {
            return Err(ShapeError::Channels {
                expected: self.c,
                found: s[1],
            }
            .into());
        }
        let (h, w) = (s[2], s[3]);
        let _l = tape.label(&self.name);
        let x = flatten(x)?;
        let x1 = x;
        let x = self.fc1.forward(tape, store, self.ln1.forward(tape, store, x)?)?;
        let x = unflatten(x, h, w)?;
        let x = self.conv1.forward(tape, store, self.ln2.forward(tape, store, x)?)?;
        let x = {
            let _a = tape.label(&format!("{}.act", self.name));
            x.leaky_relu(T::from_f64(self.slope))?
        };
        let x = self.conv2.forward(tape, store, x)?;
        let x = flatten(x)?;
        let x = self.bn.forward(tape, store, x, mode)?;
        let x = self.fc2.forward(tape, store, x)?;
        let x = unflatten(x, h, w)?;
        let x = self.conv3.forward(tape, store, self.ln3.forward(tape, store, x)?)?;
        let x = flatten(x)?;
        x.add(&x1)
    }

    /// Same as [`forward`](Self::forward) but reshaped back to `[B,C,H,W]`.
    pub fn forward_spatial<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &mut ParamStore<T>,
        x: Var<'t, T>,
        mode: Mode,
    ) -> Result<Var<'t, T>, AutogradError> {
        let s = x.shape();
        let y = self.forward(tape, store, x, mode)?;
        let _l = tape.label(&self.name);
        unflatten(y, s[2], s[3])
    }
}

// ── shared blocks ─────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq)]
enum Act {
    Relu,
    Leaky(f64),
}

/// conv -> batch norm -> activation.
#[derive(Clone, Debug)]
struct ConvBlock {
    conv: Conv2d,
    bn: BatchNorm,
    act: Act,
    name: String,
}

impl ConvBlock {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        bias: bool,
        act: Act,
        seed: u64,
    ) -> Self {
        ConvBlock {
            conv: Conv2d::new(store, &format!("{name}.conv"), c_in, c_out, k, bias, seed),
            bn: BatchNorm::new(store, &format!("{name}.bn"), c_out, 1),
            act,
            name: name.to_string(),
        }
    }

    fn layer_params(&self) -> Vec<(String, usize)> {
        vec![
            (self.conv.name.clone(), self.conv.param_count()),
            (self.bn.name.clone(), self.bn.param_count()),
        ]
    }

    fn forward<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &mut ParamStore<T>,
        x: Var<'t, T>,
        mode: Mode,
    ) -> Result<Var<'t, T>, AutogradError> {
        let y = self.conv.forward(tape, store, x)?;
        let y = self.bn.forward(tape, store, y, mode)?;
        let _l = tape.label(&format!("{}.act", self.name));
        match self.act {
            Act::Relu => y.relu(),
            Act::Leaky(s) => y.leaky_relu(T::from_f64(s)),
        }
    }
}

/// 1x1 conv to one logit channel.
#[derive(Clone, Debug)]
pub struct StageHead {
    pub conv: Conv2d,
}

// ── UCM-Net ───────────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
struct UcmStage {
    conv: ConvBlock,
    ucm: Option<UcmBlock>,
    head: Option<StageHead>,
}

impl UcmStage {
    fn layer_params(&self) -> Vec<(String, usize)> {
        let mut v = self.conv.layer_params();
        if let Some(u) = &self.ucm {
            v.extend(u.layer_params());
        }
        if let Some(h) = &self.head {
            v.push((h.conv.name.clone(), h.conv.param_count()));
        }
        v
    }

    fn body<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &mut ParamStore<T>,
        x: Var<'t, T>,
        mode: Mode,
    ) -> Result<Var<'t, T>, AutogradError> {
        let y = self.conv.forward(tape, store, x, mode)?;
        match &self.ucm {
            Some(u) => u.forward_spatial(tape, store, y, mode),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
struct UcmNet {
    enc: Vec<UcmStage>,
    dec: Vec<UcmStage>,
    out_head: Conv2d,
}

impl UcmNet {
    fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &NetworkConfig, seed: u64) -> Self {
        let c = cfg.stage_channels;
        let act = Act::Leaky(cfg.leaky_slope);
        let mut enc = Vec::new();
        let mut prev = cfg.input_channels;
        for i in 0..NUM_STAGES {
            let name = format!("enc{}", i + 1);
            let k = if i == 0 { 3 } else { 1 };
            let conv = ConvBlock::new(store, &name, prev, c[i], k, true, act, seed);
            let ucm = cfg.ucm_encoder[i]
                .then(|| UcmBlock::new(store, &format!("{name}.ucm"), c[i], cfg.leaky_slope, seed));
            enc.push(UcmStage { conv, ucm, head: None });
            prev = c[i];
        }
        let mut dec = Vec::new();
        for j in 0..NUM_DECODER_STAGES {
            let name = format!("dec{}", j + 1);
            let (ci, co) = (c[NUM_STAGES - 1 - j], c[NUM_STAGES - 2 - j]);
            let conv = ConvBlock::new(store, &name, ci, co, 1, true, act, seed);
            let ucm = cfg.ucm_decoder[j]
                .then(|| UcmBlock::new(store, &format!("{name}.ucm"), co, cfg.leaky_slope, seed));
            let head = cfg.deep_supervision.then(|| StageHead {
                conv: Conv2d::new(store, &format!("{name}.head"), co, 1, 1, true, seed),
            });
            dec.push(UcmStage { conv, ucm, head });
        }
        let out_head = Conv2d::new(store, "out_head", c[0], 1, 1, true, seed);
        UcmNet { enc, dec, out_head }
    }

    fn layer_params(&self) -> Vec<(String, usize)> {
        let mut v: Vec<_> = self.enc.iter().chain(&self.dec).flat_map(|s| s.layer_params()).collect();
        v.push((self.out_head.name.clone(), self.out_head.param_count()));
        v
    }

    fn forward<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &mut ParamStore<T>,
        x: Var<'t, T>,
        mode: Mode,
    ) -> Result<ModelOutput<'t, T>, AutogradError> {
        let mut skips = Vec::with_capacity(NUM_DECODER_STAGES);
        let mut h = x;
        for (i, stage) in self.enc.iter().enumerate() {
            h = stage.body(tape, store, h, mode)?;
            if i < NUM_DECODER_STAGES {
                let _l = tape.label(&format!("enc{}.pool", i + 1));
                h = h.max_pool2d()?;
                skips.push(h);
            }
        }
        let mut stage_logits = Vec::new();
        for (j, stage) in self.dec.iter().enumerate() {
            h = stage.body(tape, store, h, mode)?;
            if let Some(head) = &stage.head {
                stage_logits.push(head.conv.forward(tape, store, h)?);
            }
            let _l = tape.label(&format!("dec{}.up", j + 1));
            h = h.add(&skips[NUM_DECODER_STAGES - 1 - j])?.upsample2x()?;
        }
        let out_logits = self.out_head.forward(tape, store, h)?;
        Ok(ModelOutput {
            out_logits,
            stage_logits,
        })
    }
}

// ── U-Net variants ────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
struct DoubleConv {
    a: ConvBlock,
    b: ConvBlock,
}

impl DoubleConv {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c_in: usize, c_out: usize, k2: usize, seed: u64) -> Self {
        DoubleConv {
            a: ConvBlock::new(store, &format!("{name}.a"), c_in, c_out, 3, false, Act::Relu, seed),
            b: ConvBlock::new(store, &format!("{name}.b"), c_out, c_out, k2, false, Act::Relu, seed),
        }
    }

    fn layer_params(&self) -> Vec<(String, usize)> {
        let mut v = self.a.layer_params();
        v.extend(self.b.layer_params());
        v
    }

    fn forward<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &mut ParamStore<T>,
        x: Var<'t, T>,
        mode: Mode,
    ) -> Result<Var<'t, T>, AutogradError> {
        let y = self.a.forward(tape, store, x, mode)?;
        self.b.forward(tape, store, y, mode)
    }
}

/// Classic U-Net wiring: transposed-conv upsampling to half width,
/// concatenation with the unpooled encoder output, then a double conv.
#[derive(Clone, Debug)]
struct UNet {
    enc: Vec<DoubleConv>,
    up: Vec<ConvTranspose2d>,
    dec: Vec<DoubleConv>,
    out_head: Conv2d,
}

impl UNet {
    fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &NetworkConfig, seed: u64) -> Self {
        let c = cfg.stage_channels;
        let k2 = if cfg.block_kind == BlockKind::VariantADoubleConv { 3 } else { 1 };
        let mut enc = Vec::new();
        let mut prev = cfg.input_channels;
        for (i, &ci) in c.iter().enumerate() {
            enc.push(DoubleConv::new(store, &format!("enc{}", i + 1), prev, ci, k2, seed));
            prev = ci;
        }
        let mut up = Vec::new();
        let mut dec = Vec::new();
        for j in 0..NUM_DECODER_STAGES {
            let (ci, co) = (c[NUM_STAGES - 1 - j], c[NUM_STAGES - 2 - j]);
            up.push(ConvTranspose2d::new(store, &format!("dec{}.up", j + 1), ci, ci / 2, seed));
            dec.push(DoubleConv::new(store, &format!("dec{}", j + 1), ci / 2 + co, co, k2, seed));
        }
        let out_head = Conv2d::new(store, "out_head", c[0], 1, 1, true, seed);
        UNet { enc, up, dec, out_head }
    }

    fn layer_params(&self) -> Vec<(String, usize)> {
        let mut v: Vec<_> = self.enc.iter().flat_map(|d| d.layer_params()).collect();
        for (u, d) in self.up.iter().zip(&self.dec) {
            v.push((u.name.clone(), u.param_count()));
            v.extend(d.layer_params());
        }
        v.push((self.out_head.name.clone(), self.out_head.param_count()));
        v
    }

    fn forward<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &mut ParamStore<T>,
        x: Var<'t, T>,
        mode: Mode,
    ) -> Result<ModelOutput<'t, T>, AutogradError> {
        let mut skips = Vec::with_capacity(NUM_DECODER_STAGES);
        let mut h = x;
        for (i, stage) in self.enc.iter().enumerate() {
            if i > 0 {
                let _l = tape.label(&format!("enc{i}.pool"));
                h = h.max_pool2d()?;
            }
            h = stage.forward(tape, store, h, mode)?;
            skips.push(h);
        }
        for (j, (up, dec)) in self.up.iter().zip(&self.dec).enumerate() {
            let u = up.forward(tape, store, h)?;
            let cat = {
                let _l = tape.label(&format!("dec{}.cat", j + 1));
                skips[NUM_DECODER_STAGES - 1 - j].concat(&u, 1)?
            };
            h = dec.forward(tape, store, cat, mode)?;
        }
        Ok(ModelOutput {
            out_logits: self.out_head.forward(tape, store, h)?,
            stage_logits: Vec::new(),
        })
    }
}

// ── network ───────────────────────────────────────────────────────────────

pub struct ModelOutput<'t, T: Scalar = f32> {
    /// `[B,1,H,W]` logits at input resolution.
    pub out_logits: Var<'t, T>,
    /// Stage-head logits, deepest (lowest resolution) first; empty without deep supervision.
    pub stage_logits: Vec<Var<'t, T>>,
}

#[derive(Clone, Debug)]
enum Body {
    Ucm(UcmNet),
    UNet(UNet),
}

#[derive(Clone, Debug)]
pub struct Network<T: Scalar = f32> {
    config: NetworkConfig,
    store: ParamStore<T>,
    body: Body,
}

impl<T: Scalar> Network<T> {
    /// Build with He-uniform weights derived from `seed` and each parameter's name.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut store = ParamStore::new();
        let body = match config.block_kind {
            BlockKind::VariantCUcm => Body::Ucm(UcmNet::new(&mut store, &config, seed)),
            _ => Body::UNet(UNet::new(&mut store, &config, seed)),
        };
        Ok(Network { config, store, body })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Learnable scalars, counted by walking the stored tensors.
    pub fn count_params(&self) -> usize {
        self.store.count_learnable()
    }

    /// Per-layer parameter counts from each layer's closed-form formula.
    pub fn layer_params(&self) -> Vec<(String, usize)> {
        match &self.body {
            Body::Ucm(u) => u.layer_params(),
            Body::UNet(u) => u.layer_params(),
        }
    }

    /// Record a forward pass on `tape`. Train mode updates batch-norm running statistics.
    pub fn forward<'t>(&mut self, tape: &'t Tape<T>, x: Var<'t, T>, mode: Mode) -> Result<ModelOutput<'t, T>, ModelError> {
        let s = x.shape();
        if s.len() != 4 {
            return Err(ShapeError::Rank { expected: 4, shape: s }.into());
        }
        if s[1] != self.config.input_channels {
            return Err(ShapeError::Channels {
                expected: self.config.input_channels,
                found: s[1],
            }
            .into());
        }
        if s[2] % SPATIAL_DIVISOR != 0 || s[3] % SPATIAL_DIVISOR != 0 {
            return Err(ModelError::Config(format!(
                "input {}x{} not divisible by {SPATIAL_DIVISOR}",
                s[2], s[3]
            )));
        }
        let out = match &self.body {
            Body::Ucm(u) => u.forward(tape, &mut self.store, x, mode)?,
            Body::UNet(u) => u.forward(tape, &mut self.store, x, mode)?,
        };
        Ok(out)
    }

    /// Eval-mode foreground probabilities `[B,1,H,W]` for `[B,C,H,W]` images.
    pub fn predict(&mut self, images: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let tape = Tape::new();
        let x = tape.constant(images.clone())?;
        let out = self.forward(&tape, x, Mode::Eval)?;
        let p = out.out_logits.sigmoid()?.value();
        Ok((*p).clone())
    }

    /// Same architecture and weights in another element type.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            config: self.config.clone(),
            store: self.store.cast(),
            body: self.body.clone(),
        }
    }
}

/// Build the ablation network named by `config.block_kind`.
pub fn build_variant<T: Scalar>(config: &NetworkConfig, seed: u64) -> Result<Network<T>, ModelError> {
    Network::new(config.clone(), seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, DEFAULT_STEP};

    #[test]
    fn ucm_block_param_formula_and_shape() {
        let mut store = ParamStore::<f32>::new();
        let b = UcmBlock::new(&mut store, "u", 8, 0.01, 0);
        assert_eq!(b.param_count(), 5 * 64 + 13 * 8);
        assert_eq!(store.count_learnable(), b.param_count());
        let tape = Tape::new();
        let x = tape.input(Tensor::from_fn(&[2, 8, 64, 64], |i| (i % 17) as f32 * 0.1)).unwrap();
        let y = b.forward(&tape, &mut store, x, Mode::Train).unwrap();
        assert_eq!(y.shape(), vec![2, 4096, 8]);
    }

    #[test]
    fn ucm_block_with_zero_weights_is_pure_residual() {
        let mut store = ParamStore::<f32>::new();
        let b = UcmBlock::new(&mut store, "u", 4, 0.01, 0);
        for e in store.entries_mut() {
            if e.kind.learnable() {
                e.value = Tensor::zeros(e.value.shape());
            }
        }
        let tape = Tape::new();
        let xin = Tensor::from_fn(&[1, 4, 2, 3], |i| i as f32 - 5.0);
        let x = tape.input(xin.clone()).unwrap();
        let y = b.forward(&tape, &mut store, x, Mode::Train).unwrap().value();
        let expect = crate::autograd::Tape::<f32>::new();
        let xe = expect.constant(xin).unwrap();
        let flat = flatten(xe).unwrap().value();
        assert_eq!(*y, *flat);
    }

    #[test]
    fn ucm_block_input_gradient_matches_finite_differences() {
        let mut store = ParamStore::<f64>::new();
        let b = UcmBlock::new(&mut store, "u", 4, 0.01, 3);
        let x = Tensor::from_fn(&[1, 4, 4, 4], |i| ((i * 7919) % 101) as f64 / 50.0 - 1.0);
        let cell = std::cell::RefCell::new(store);
        let r = check_gradients(
            &[x],
            |tape, v| b.forward(tape, &mut cell.borrow_mut(), v[0], Mode::Eval),
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }

    #[test]
    fn default_layout_counts_and_shapes() {
        let mut net = Network::<f32>::new(NetworkConfig { input_size: (64, 64), ..Default::default() }, 0).unwrap();
        let by_formula: usize = net.layer_params().iter().map(|l| l.1).sum();
        assert_eq!(by_formula, net.count_params());
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3, 64, 64])).unwrap();
        let out = net.forward(&tape, x, Mode::Train).unwrap();
        assert_eq!(out.out_logits.shape(), vec![2, 1, 64, 64]);
        let sizes: Vec<usize> = out.stage_logits.iter().map(|s| s.shape()[2]).collect();
        assert_eq!(sizes, vec![2, 4, 8, 16, 32]);
    }

    #[test]
    fn deep_supervision_flag_removes_heads_only() {
        let cfg = NetworkConfig { input_size: (32, 32), ..Default::default() };
        let mut with = Network::<f32>::new(cfg.clone(), 5).unwrap();
        let mut without = Network::<f32>::new(NetworkConfig { deep_supervision: false, ..cfg }, 5).unwrap();
        // one 1x1 head (C weights + 1 bias) per decoder stage
        assert_eq!(with.count_params() - without.count_params(), (48 + 1) + (32 + 1) + (24 + 1) + (16 + 1) + (8 + 1));
        let img = Tensor::from_fn(&[1, 3, 32, 32], |i| ((i * 31) % 255) as f32 / 255.0);
        let run = |net: &mut Network<f32>| {
            let tape = Tape::new();
            let x = tape.constant(img.clone()).unwrap();
            let o = net.forward(&tape, x, Mode::Eval).unwrap();
            ((*o.out_logits.value()).clone(), o.stage_logits.len())
        };
        let (a, na) = run(&mut with);
        let (b, nb) = run(&mut without);
        assert_eq!((na, nb), (5, 0));
        assert_eq!(a, b);
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let mut net = Network::<f32>::new(NetworkConfig { input_size: (32, 32), ..Default::default() }, 9).unwrap();
        let img = Tensor::from_fn(&[1, 3, 32, 32], |i| ((i * 13) % 97) as f32 / 97.0);
        let a = net.predict(&img).unwrap();
        let b = net.predict(&img).unwrap();
        assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn variant_kinds_parse() {
        for k in BlockKind::ALL {
            assert_eq!(k.as_str().parse::<BlockKind>().unwrap(), k);
        }
        assert!("variant_d".parse::<BlockKind>().is_err());
        let bad = NetworkConfig { input_size: (100, 100), ..Default::default() };
        assert!(Network::<f32>::new(bad, 0).is_err());
    }

    #[test]
    fn calibrated_parameter_counts() {
        let count = |k| Network::<f32>::new(NetworkConfig::variant(k), 0).unwrap().count_params();
        assert_eq!(count(BlockKind::VariantCUcm), 49_942);
        assert_eq!(count(BlockKind::VariantBConv1x1), 148_157);
        assert_eq!(count(BlockKind::VariantADoubleConv), 248_509);
    }
}
