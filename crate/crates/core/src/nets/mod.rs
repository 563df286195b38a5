//! The three encoder-decoder variants sharing one forward contract:
//! input `(4, D, H, W)`, logits and per-voxel softmax `(4, D, H, W)`.
//!
//! * `Vnet` -- strided-convolution downsampling, transposed-conv
//!   upsampling, concatenation skips, residual conv blocks, instance
//!   norm + PReLU.
//! * `UnetBasic` -- two-conv blocks in conv -> ReLU -> group-norm order,
//!   2^3 max pooling, trilinear-interpolation upsampling, concatenation
//!   skips.
//! * `UnetResidual` -- pre-activation residual blocks, max pooling,
//!   transposed-conv upsampling, element-wise-sum skips.
//!
//! Spatial channel dropout sits at the end of every encoder and decoder
//! level; it is active in `Train` and `EvalWithDropout` modes, making
//! test-time-dropout sampling a mode switch rather than a rebuild.

pub mod checkpoint;

use ndarray::{Array4, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{he_uniform, seeded_rng, Graph, NodeId, ParamId, ParamSet};

/// Class-channel order of the network output.
pub const CHANNEL_LABELS: [u8; 4] = [0, 1, 2, 4];

/// Maps a voxel label to its output channel.
pub fn label_to_channel(label: u8) -> usize {
    match label {
        0 => 0,
        1 => 1,
        2 => 2,
        4 => 3,
        other => unreachable!("invalid label {other}"),
    }
}

/// Maps an output channel back to its voxel label.
pub fn channel_to_label(channel: usize) -> u8 {
    CHANNEL_LABELS[channel]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Vnet,
    UnetBasic,
    UnetResidual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Instance,
    /// Group normalization; the group count is clamped to divide the
    /// channel count (gcd) where needed.
    Group(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    Prelu,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub variant: Variant,
    pub base_channels: usize,
    pub levels: usize,
    pub norm: NormKind,
    pub nonlinearity: Nonlinearity,
    /// Dropout probability used by Train and EvalWithDropout modes.
    pub dropout_p: f32,
    pub out_classes: usize,
}

impl NetConfig {
    /// Desk-scale defaults: 8 channels at full resolution, 3 levels.
    pub fn toy(variant: Variant) -> Self {
        let (norm, nonlinearity) = variant_defaults(variant);
        NetConfig {
            variant,
            base_channels: 8,
            levels: 3,
            norm,
            nonlinearity,
            dropout_p: 0.5,
            out_classes: 4,
        }
    }

    /// Full-size configuration: 32 feature maps at the highest
    /// resolution, 4 levels.
    pub fn full(variant: Variant) -> Self {
        NetConfig {
            base_channels: 32,
            levels: 4,
            ..NetConfig::toy(variant)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels < 2 {
            return Err(Error::Config("base_channels must be >= 2".into()));
        }
        if self.levels < 2 {
            return Err(Error::Config("levels must be >= 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "dropout_p {} outside [0, 1)",
                self.dropout_p
            )));
        }
        if self.out_classes != 4 {
            return Err(Error::Config("out_classes must be 4".into()));
        }
        Ok(())
    }

    fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Required divisor of every spatial extent.
    pub fn required_multiple(&self) -> usize {
        1 << (self.levels - 1)
    }
}

fn variant_defaults(variant: Variant) -> (NormKind, Nonlinearity) {
    match variant {
        Variant::Vnet => (NormKind::Instance, Nonlinearity::Prelu),
        Variant::UnetBasic | Variant::UnetResidual => (NormKind::Group(8), Nonlinearity::Relu),
    }
}

/// Forward-pass mode. Dropout draws come from the caller's stream so
/// repeated stochastic passes are reproducible.
pub enum Mode<'r> {
    Train {
        rng: &'r mut ChaCha8Rng,
    },
    Eval,
    /// Dropout active at inference, probability overriding the config.
    EvalWithDropout {
        dropout_p: f32,
        rng: &'r mut ChaCha8Rng,
    },
}

// ---------------------------------------------------------------------
// Parameter bundles.

#[derive(Debug, Clone, Copy)]
struct ConvP {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct NormP {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct ActP {
    /// PReLU slope; None means plain ReLU.
    alpha: Option<ParamId>,
}

/// conv(3x3x3) -> norm -> act with a residual add around two of them:
/// out = act2(norm2(conv2(act1(norm1(conv1(x))))) + x).
#[derive(Debug, Clone)]
struct VnetBlock {
    conv1: ConvP,
    n1: NormP,
    a1: ActP,
    conv2: ConvP,
    n2: NormP,
    a2: ActP,
    channels: usize,
}

/// Strided 2^3 conv downsampling with norm + act.
#[derive(Debug, Clone)]
struct DownConv {
    conv: ConvP,
    n: NormP,
    a: ActP,
    out_channels: usize,
}

/// Transposed 2^3 stride-2 conv upsampling with norm + act.
#[derive(Debug, Clone)]
struct UpConv {
    conv: ConvP,
    n: NormP,
    a: ActP,
    out_channels: usize,
}

/// Decoder block after a concatenation skip; projects the concatenated
/// channels back down inside the residual add.
#[derive(Debug, Clone)]
struct VnetDecBlock {
    proj: ConvP,
    conv1: ConvP,
    n1: NormP,
    a1: ActP,
    conv2: ConvP,
    n2: NormP,
    a2: ActP,
    channels: usize,
}

/// Two conv -> ReLU -> group-norm units.
#[derive(Debug, Clone)]
struct DoubleConv {
    c1: ConvP,
    n1: NormP,
    c2: ConvP,
    n2: NormP,
    out_channels: usize,
}

/// Pre-activation residual block:
/// out = skip(x) + conv2(relu(norm2(conv1(relu(norm1(x)))))).
#[derive(Debug, Clone)]
struct ResBlock {
    n1: NormP,
    c1: ConvP,
    n2: NormP,
    c2: ConvP,
    /// 1x1x1 projection when in/out channel counts differ.
    proj: Option<ConvP>,
    out_channels: usize,
}

#[derive(Debug, Clone)]
struct VnetArch {
    stem: ConvP,
    stem_n: NormP,
    stem_a: ActP,
    enc: Vec<VnetBlock>,
    downs: Vec<DownConv>,
    ups: Vec<UpConv>,
    dec: Vec<VnetDecBlock>,
    head: ConvP,
}

#[derive(Debug, Clone)]
struct UnetBasicArch {
    enc: Vec<DoubleConv>,
    dec: Vec<DoubleConv>,
    head: ConvP,
}

#[derive(Debug, Clone)]
struct UnetResArch {
    stem: ConvP,
    enc: Vec<ResBlock>,
    ups: Vec<UpConv>,
    dec: Vec<ResBlock>,
    head: ConvP,
}

#[derive(Debug, Clone)]
enum Arch {
    Vnet(VnetArch),
    UnetBasic(UnetBasicArch),
    UnetResidual(UnetResArch),
}

/// A built network: configuration, parameters and architecture wiring.
#[derive(Debug, Clone)]
pub struct Network {
    config: NetConfig,
    params: ParamSet,
    arch: Arch,
}

// ---------------------------------------------------------------------
// Construction.

struct ArchBuilder<'a> {
    params: &'a mut ParamSet,
    rng: ChaCha8Rng,
    nonlinearity: Nonlinearity,
}

impl ArchBuilder<'_> {
    fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize) -> ConvP {
        let w = self.params.add(
            format!("{name}.w"),
            he_uniform(&[cout, cin, k, k, k], cin * k * k * k, &mut self.rng),
        );
        let b = self
            .params
            .add(format!("{name}.b"), ArrayD::zeros(IxDyn(&[cout])));
        ConvP { w, b }
    }

    fn conv_transpose(&mut self, name: &str, cin: usize, cout: usize) -> ConvP {
        let w = self.params.add(
            format!("{name}.w"),
            he_uniform(&[cin, cout, 2, 2, 2], cin * 8, &mut self.rng),
        );
        let b = self
            .params
            .add(format!("{name}.b"), ArrayD::zeros(IxDyn(&[cout])));
        ConvP { w, b }
    }

    fn norm(&mut self, name: &str, channels: usize) -> NormP {
        let gamma = self.params.add(
            format!("{name}.gamma"),
            ArrayD::from_elem(IxDyn(&[channels]), 1.0f32),
        );
        let beta = self
            .params
            .add(format!("{name}.beta"), ArrayD::zeros(IxDyn(&[channels])));
        NormP { gamma, beta }
    }

    fn act(&mut self, name: &str, channels: usize) -> ActP {
        match self.nonlinearity {
            Nonlinearity::Relu => ActP { alpha: None },
            Nonlinearity::Prelu => ActP {
                alpha: Some(self.params.add(
                    format!("{name}.alpha"),
                    ArrayD::from_elem(IxDyn(&[channels]), 0.25f32),
                )),
            },
        }
    }

    fn vnet_block(&mut self, name: &str, channels: usize) -> VnetBlock {
        VnetBlock {
            conv1: self.conv(&format!("{name}.conv1"), channels, channels, 3),
            n1: self.norm(&format!("{name}.n1"), channels),
            a1: self.act(&format!("{name}.a1"), channels),
            conv2: self.conv(&format!("{name}.conv2"), channels, channels, 3),
            n2: self.norm(&format!("{name}.n2"), channels),
            a2: self.act(&format!("{name}.a2"), channels),
            channels,
        }
    }

    fn double_conv(&mut self, name: &str, cin: usize, cout: usize) -> DoubleConv {
        DoubleConv {
            c1: self.conv(&format!("{name}.c1"), cout, cin, 3),
            n1: self.norm(&format!("{name}.n1"), cout),
            c2: self.conv(&format!("{name}.c2"), cout, cout, 3),
            n2: self.norm(&format!("{name}.n2"), cout),
            out_channels: cout,
        }
    }

    fn res_block(&mut self, name: &str, cin: usize, cout: usize) -> ResBlock {
        ResBlock {
            n1: self.norm(&format!("{name}.n1"), cin),
            c1: self.conv(&format!("{name}.c1"), cout, cin, 3),
            n2: self.norm(&format!("{name}.n2"), cout),
            c2: self.conv(&format!("{name}.c2"), cout, cout, 3),
            proj: if cin == cout {
                None
            } else {
                Some(self.conv(&format!("{name}.proj"), cout, cin, 1))
            },
            out_channels: cout,
        }
    }
}

impl Network {
    /// Builds a network with He-uniform conv init from `init_seed`.
    pub fn build(config: &NetConfig, init_seed: u64) -> Result<Network> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut b = ArchBuilder {
            params: &mut params,
            rng: seeded_rng(init_seed),
            nonlinearity: config.nonlinearity,
        };
        let arch = match config.variant {
            Variant::Vnet => Arch::Vnet(build_vnet_arch(&mut b, config)),
            Variant::UnetBasic => Arch::UnetBasic(build_unet_basic_arch(&mut b, config)),
            Variant::UnetResidual => Arch::UnetResidual(build_unet_residual_arch(&mut b, config)),
        };
        Ok(Network {
            config: *config,
            params,
            arch,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Total scalar parameter count.
    pub fn param_count(&self) -> usize {
        self.params.total_len()
    }

    fn check_input(&self, x: &Array4<f32>) -> Result<()> {
        let (c, d, h, w) = x.dim();
        if c != 4 {
            return Err(Error::Shape(format!("expected 4 input channels, got {c}")));
        }
        let m = self.config.required_multiple();
        if d % m != 0 || h % m != 0 || w % m != 0 {
            return Err(Error::Shape(format!(
                "input extent {d}x{h}x{w} must be divisible by {m} ({} levels)",
                self.config.levels
            )));
        }
        Ok(())
    }

    /// Runs the network, returning the graph plus logits and softmax
    /// node ids. The graph records backward caches only in `Train` mode.
    pub fn forward<'p>(&'p self, x: &Array4<f32>, mode: Mode<'_>) -> Result<ForwardPass<'p>> {
        self.check_input(x)?;
        let record = matches!(mode, Mode::Train { .. });
        let mut dropout = match mode {
            Mode::Train { rng } => {
                if self.config.dropout_p > 0.0 {
                    Some((self.config.dropout_p, rng))
                } else {
                    None
                }
            }
            Mode::Eval => None,
            Mode::EvalWithDropout { dropout_p, rng } => {
                if dropout_p > 0.0 {
                    Some((dropout_p, rng))
                } else {
                    None
                }
            }
        };
        let mut g = Graph::new(&self.params, record);
        let input = g.input(x.clone());
        let logits = match &self.arch {
            Arch::Vnet(a) => forward_vnet(&mut g, a, &self.config, input, &mut dropout)?,
            Arch::UnetBasic(a) => {
                forward_unet_basic(&mut g, a, &self.config, input, &mut dropout)?
            }
            Arch::UnetResidual(a) => {
                forward_unet_residual(&mut g, a, &self.config, input, &mut dropout)?
            }
        };
        let softmax = g.softmax_channels(logits);
        Ok(ForwardPass {
            graph: g,
            logits,
            softmax,
        })
    }

    /// Eval-mode softmax prediction.
    pub fn predict_softmax(&self, x: &Array4<f32>) -> Result<Array4<f32>> {
        let pass = self.forward(x, Mode::Eval)?;
        Ok(pass.graph.value(pass.softmax).clone())
    }
}

/// A finished forward pass; values are read through `graph.value`.
pub struct ForwardPass<'p> {
    pub graph: Graph<'p>,
    pub logits: NodeId,
    pub softmax: NodeId,
}

// ---------------------------------------------------------------------
// Architecture builders.

fn build_vnet_arch(b: &mut ArchBuilder, cfg: &NetConfig) -> VnetArch {
    let levels = cfg.levels;
    let c0 = cfg.channels_at(0);
    let stem = b.conv("stem", c0, 4, 3);
    let stem_n = b.norm("stem.n", c0);
    let stem_a = b.act("stem.a", c0);
    let mut enc = Vec::new();
    let mut downs = Vec::new();
    for l in 0..levels {
        enc.push(b.vnet_block(&format!("enc{l}"), cfg.channels_at(l)));
        if l + 1 < levels {
            let cin = cfg.channels_at(l);
            let cout = cfg.channels_at(l + 1);
            downs.push(DownConv {
                conv: b.conv(&format!("down{l}"), cout, cin, 2),
                n: b.norm(&format!("down{l}.n"), cout),
                a: b.act(&format!("down{l}.a"), cout),
                out_channels: cout,
            });
        }
    }
    let mut ups = Vec::new();
    let mut dec = Vec::new();
    for l in (0..levels - 1).rev() {
        let cin = cfg.channels_at(l + 1);
        let cout = cfg.channels_at(l);
        ups.push(UpConv {
            conv: b.conv_transpose(&format!("up{l}"), cin, cout),
            n: b.norm(&format!("up{l}.n"), cout),
            a: b.act(&format!("up{l}.a"), cout),
            out_channels: cout,
        });
        dec.push(VnetDecBlock {
            proj: b.conv(&format!("dec{l}.proj"), cout, 2 * cout, 1),
            conv1: b.conv(&format!("dec{l}.conv1"), cout, 2 * cout, 3),
            n1: b.norm(&format!("dec{l}.n1"), cout),
            a1: b.act(&format!("dec{l}.a1"), cout),
            conv2: b.conv(&format!("dec{l}.conv2"), cout, cout, 3),
            n2: b.norm(&format!("dec{l}.n2"), cout),
            a2: b.act(&format!("dec{l}.a2"), cout),
            channels: cout,
        });
    }
    let head = b.conv("head", cfg.out_classes, c0, 1);
    VnetArch {
        stem,
        stem_n,
        stem_a,
        enc,
        downs,
        ups,
        dec,
        head,
    }
}

fn build_unet_basic_arch(b: &mut ArchBuilder, cfg: &NetConfig) -> UnetBasicArch {
    let levels = cfg.levels;
    let mut enc = Vec::new();
    for l in 0..levels {
        let cin = if l == 0 { 4 } else { cfg.channels_at(l - 1) };
        enc.push(b.double_conv(&format!("enc{l}"), cin, cfg.channels_at(l)));
    }
    let mut dec = Vec::new();
    for l in (0..levels - 1).rev() {
        let cin = cfg.channels_at(l + 1) + cfg.channels_at(l);
        dec.push(b.double_conv(&format!("dec{l}"), cin, cfg.channels_at(l)));
    }
    let head = b.conv("head", cfg.out_classes, cfg.channels_at(0), 1);
    UnetBasicArch { enc, dec, head }
}

fn build_unet_residual_arch(b: &mut ArchBuilder, cfg: &NetConfig) -> UnetResArch {
    let levels = cfg.levels;
    let c0 = cfg.channels_at(0);
    let stem = b.conv("stem", c0, 4, 3);
    let mut enc = Vec::new();
    for l in 0..levels {
        let cin = if l == 0 { c0 } else { cfg.channels_at(l - 1) };
        enc.push(b.res_block(&format!("enc{l}"), cin, cfg.channels_at(l)));
    }
    let mut ups = Vec::new();
    let mut dec = Vec::new();
    for l in (0..levels - 1).rev() {
        let cin = cfg.channels_at(l + 1);
        let cout = cfg.channels_at(l);
        ups.push(UpConv {
            conv: b.conv_transpose(&format!("up{l}"), cin, cout),
            n: b.norm(&format!("up{l}.n"), cout),
            a: b.act(&format!("up{l}.a"), cout),
            out_channels: cout,
        });
        dec.push(b.res_block(&format!("dec{l}"), cout, cout));
    }
    let head = b.conv("head", cfg.out_classes, c0, 1);
    UnetResArch {
        stem,
        enc,
        ups,
        dec,
        head,
    }
}

// ---------------------------------------------------------------------
// Forward passes.

type DropoutCtx<'a> = Option<(f32, &'a mut ChaCha8Rng)>;

fn effective_groups(requested: usize, channels: usize) -> usize {
    let mut g = requested.min(channels).max(1);
    while channels % g != 0 {
        g -= 1;
    }
    g
}

fn apply_norm(g: &mut Graph, x: NodeId, n: &NormP, kind: NormKind, channels: usize) -> Result<NodeId> {
    match kind {
        NormKind::Instance => Ok(g.instance_norm(x, n.gamma, n.beta)),
        NormKind::Group(groups) => g.group_norm(x, n.gamma, n.beta, effective_groups(groups, channels)),
    }
}

fn apply_act(g: &mut Graph, x: NodeId, a: &ActP) -> NodeId {
    match a.alpha {
        Some(alpha) => g.prelu(x, alpha),
        None => g.relu(x),
    }
}

fn apply_dropout(g: &mut Graph, x: NodeId, dropout: &mut DropoutCtx) -> Result<NodeId> {
    match dropout {
        Some((p, rng)) => g.channel_dropout(x, *p, &mut **rng),
        None => Ok(x),
    }
}

fn conv_same(g: &mut Graph, x: NodeId, c: &ConvP) -> Result<NodeId> {
    g.conv3d(x, c.w, Some(c.b), 1, 1)
}

fn conv_1x1(g: &mut Graph, x: NodeId, c: &ConvP) -> Result<NodeId> {
    g.conv3d(x, c.w, Some(c.b), 1, 0)
}

fn forward_vnet_block(
    g: &mut Graph,
    blk: &VnetBlock,
    kind: NormKind,
    x: NodeId,
) -> Result<NodeId> {
    let t = conv_same(g, x, &blk.conv1)?;
    let t = apply_norm(g, t, &blk.n1, kind, blk.channels)?;
    let t = apply_act(g, t, &blk.a1);
    let t = conv_same(g, t, &blk.conv2)?;
    let t = apply_norm(g, t, &blk.n2, kind, blk.channels)?;
    let s = g.add(t, x)?;
    Ok(apply_act(g, s, &blk.a2))
}

fn forward_vnet(
    g: &mut Graph,
    a: &VnetArch,
    cfg: &NetConfig,
    input: NodeId,
    dropout: &mut DropoutCtx,
) -> Result<NodeId> {
    let mut x = conv_same(g, input, &a.stem)?;
    x = apply_norm(g, x, &a.stem_n, cfg.norm, cfg.channels_at(0))?;
    x = apply_act(g, x, &a.stem_a);
    let mut skips = Vec::new();
    for (l, blk) in a.enc.iter().enumerate() {
        x = forward_vnet_block(g, blk, cfg.norm, x)?;
        x = apply_dropout(g, x, dropout)?;
        if l + 1 < cfg.levels {
            skips.push(x);
            let down = &a.downs[l];
            x = g.conv3d(x, down.conv.w, Some(down.conv.b), 2, 0)?;
            x = apply_norm(g, x, &down.n, cfg.norm, down.out_channels)?;
            x = apply_act(g, x, &down.a);
        }
    }
    for (i, (up, dec)) in a.ups.iter().zip(a.dec.iter()).enumerate() {
        let skip = skips[skips.len() - 1 - i];
        x = g.conv_transpose2(x, up.conv.w, Some(up.conv.b))?;
        x = apply_norm(g, x, &up.n, cfg.norm, up.out_channels)?;
        x = apply_act(g, x, &up.a);
        let cat = g.concat_channels(x, skip)?;
        let t = conv_same(g, cat, &dec.conv1)?;
        let t = apply_norm(g, t, &dec.n1, cfg.norm, dec.channels)?;
        let t = apply_act(g, t, &dec.a1);
        let t = conv_same(g, t, &dec.conv2)?;
        let t = apply_norm(g, t, &dec.n2, cfg.norm, dec.channels)?;
        let proj = conv_1x1(g, cat, &dec.proj)?;
        let s = g.add(t, proj)?;
        x = apply_act(g, s, &dec.a2);
        x = apply_dropout(g, x, dropout)?;
    }
    conv_1x1(g, x, &a.head)
}

fn forward_double_conv(
    g: &mut Graph,
    blk: &DoubleConv,
    kind: NormKind,
    x: NodeId,
) -> Result<NodeId> {
    // Deliberate order: conv -> ReLU -> norm.
    let t = conv_same(g, x, &blk.c1)?;
    let t = g.relu(t);
    let t = apply_norm(g, t, &blk.n1, kind, blk.out_channels)?;
    let t = conv_same(g, t, &blk.c2)?;
    let t = g.relu(t);
    apply_norm(g, t, &blk.n2, kind, blk.out_channels)
}

fn forward_unet_basic(
    g: &mut Graph,
    a: &UnetBasicArch,
    cfg: &NetConfig,
    input: NodeId,
    dropout: &mut DropoutCtx,
) -> Result<NodeId> {
    let mut x = input;
    let mut skips = Vec::new();
    for (l, blk) in a.enc.iter().enumerate() {
        x = forward_double_conv(g, blk, cfg.norm, x)?;
        x = apply_dropout(g, x, dropout)?;
        if l + 1 < cfg.levels {
            skips.push(x);
            x = g.maxpool2(x)?;
        }
    }
    for (i, blk) in a.dec.iter().enumerate() {
        let skip = skips[skips.len() - 1 - i];
        x = g.upsample_trilinear2(x);
        x = g.concat_channels(x, skip)?;
        x = forward_double_conv(g, blk, cfg.norm, x)?;
        x = apply_dropout(g, x, dropout)?;
    }
    conv_1x1(g, x, &a.head)
}

fn forward_res_block(g: &mut Graph, blk: &ResBlock, kind: NormKind, x: NodeId) -> Result<NodeId> {
    let in_channels = g.value(x).dim().0;
    let t = apply_norm(g, x, &blk.n1, kind, in_channels)?;
    let t = g.relu(t);
    let t = conv_same(g, t, &blk.c1)?;
    let t = apply_norm(g, t, &blk.n2, kind, blk.out_channels)?;
    let t = g.relu(t);
    let branch = conv_same(g, t, &blk.c2)?;
    let skip = match &blk.proj {
        Some(p) => conv_1x1(g, x, p)?,
        None => x,
    };
    g.add(skip, branch)
}

fn forward_unet_residual(
    g: &mut Graph,
    a: &UnetResArch,
    cfg: &NetConfig,
    input: NodeId,
    dropout: &mut DropoutCtx,
) -> Result<NodeId> {
    let mut x = conv_same(g, input, &a.stem)?;
    let mut skips = Vec::new();
    for (l, blk) in a.enc.iter().enumerate() {
        x = forward_res_block(g, blk, cfg.norm, x)?;
        x = apply_dropout(g, x, dropout)?;
        if l + 1 < cfg.levels {
            skips.push(x);
            x = g.maxpool2(x)?;
        }
    }
    for (i, (up, blk)) in a.ups.iter().zip(a.dec.iter()).enumerate() {
        let skip = skips[skips.len() - 1 - i];
        x = g.conv_transpose2(x, up.conv.w, Some(up.conv.b))?;
        x = apply_norm(g, x, &up.n, cfg.norm, up.out_channels)?;
        x = apply_act(g, x, &up.a);
        x = g.add(x, skip)?;
        x = forward_res_block(g, blk, cfg.norm, x)?;
        x = apply_dropout(g, x, dropout)?;
    }
    conv_1x1(g, x, &a.head)
}
