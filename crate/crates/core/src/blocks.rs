//! Transformer building blocks: channel-wise (transposed) attention, the
//! gated depth-wise feed-forward network, their residual composition, and
//! the resampling steps between encoder–decoder levels.

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Seeded parameter initialiser. Each parameter draws from its own stream
/// keyed by `(seed, name)`, so adding or removing a module leaves every
/// other parameter unchanged.
#[derive(Clone, Copy, Debug)]
pub struct Init {
    seed: u64,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn uniform(&self, name: &str, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        Tensor::uniform(
            shape,
            lo,
            hi,
            &mut rng::stream(rng::derive(self.seed, name), 0),
        )
    }
}

/// Layer-norm epsilon used by every normalisation in the network.
pub const LN_EPS: f64 = 1e-5;

/// Hidden width of the feed-forward network for `channels` inputs.
pub fn ffn_hidden(channels: usize, expansion: f64) -> usize {
    ((channels as f64 * expansion).round() as usize).max(1)
}

/// Convolution with `uniform(-b, b)` weights, `b = sqrt(1/fan_in)`, and an
/// optional zero-initialised bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

/// Shape of a [`Conv`] before its parameters exist.
#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn pointwise(cin: usize, cout: usize) -> Self {
        Self {
            cin,
            cout,
            kernel: 1,
            groups: 1,
            bias: false,
        }
    }

    pub fn dense3(cin: usize, cout: usize) -> Self {
        Self {
            kernel: 3,
            ..Self::pointwise(cin, cout)
        }
    }

    pub fn depthwise3(channels: usize) -> Self {
        Self {
            groups: channels,
            ..Self::dense3(channels, channels)
        }
    }

    pub fn with_bias(self) -> Self {
        Self { bias: true, ..self }
    }

    pub fn num_params(&self) -> usize {
        self.cout * (self.cin / self.groups) * self.kernel * self.kernel
            + if self.bias { self.cout } else { 0 }
    }
}

impl Conv {
    pub fn new(store: &mut ParamStore, name: &str, spec: ConvSpec, init: &Init) -> Result<Self> {
        let ConvSpec {
            cin,
            cout,
            kernel,
            groups,
            bias,
        } = spec;
        if groups == 0 || cin % groups != 0 || cout % groups != 0 {
            return Err(Error::InvalidArgument(format!(
                "{name}: {cin}->{cout} channels with {groups} groups"
            )));
        }
        let fan_in = (cin / groups) * kernel * kernel;
        let bound = (1.0 / fan_in as f64).sqrt();
        let wname = format!("{name}.weight");
        let w = init.uniform(&wname, &[cout, cin / groups, kernel, kernel], -bound, bound);
        let weight = store.insert(wname, w)?;
        let bias = if bias {
            Some(store.insert(format!("{name}.bias"), Tensor::zeros(&[cout]))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride: 1,
            padding: kernel / 2,
            groups,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        tape.conv2d(x, w, b, self.stride, self.padding, self.groups)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub scale: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            scale: store.insert(format!("{name}.scale"), Tensor::ones(&[channels]))?,
            shift: store.insert(format!("{name}.shift"), Tensor::zeros(&[channels]))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let s = tape.param(store, self.scale);
        let b = tape.param(store, self.shift);
        tape.layer_norm_channel(x, s, b, LN_EPS)
    }
}

/// Static shape of one transformer block.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockConfig {
    pub channels: usize,
    pub heads: usize,
    pub expansion: f64,
    /// L2-normalise query/key rows before the channel dot products.
    pub normalize_qk: bool,
}

impl BlockConfig {
    pub fn new(channels: usize, heads: usize, expansion: f64) -> Self {
        Self {
            channels,
            heads,
            expansion,
            normalize_qk: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return Err(Error::InvalidArgument(format!(
                "{} channels cannot be split across {} heads",
                self.channels, self.heads
            )));
        }
        if !(self.expansion > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "expansion factor {} must be positive",
                self.expansion
            )));
        }
        Ok(())
    }

    /// Parameter count of a block built from this config.
    pub fn num_params(&self) -> usize {
        let c = self.channels;
        let hidden = ffn_hidden(c, self.expansion);
        let norms = 2 * 2 * c;
        let mdta = ConvSpec::pointwise(c, 3 * c).num_params()
            + ConvSpec::depthwise3(3 * c).num_params()
            + ConvSpec::pointwise(c, c).num_params()
            + self.heads;
        let gdfn = 2
            * (ConvSpec::pointwise(c, hidden).num_params()
                + ConvSpec::depthwise3(hidden).num_params())
            + ConvSpec::pointwise(hidden, c).num_params();
        norms + mdta + gdfn
    }
}

/// Multi-head transposed attention: attention maps are `c × c` over
/// channels, so cost grows linearly with the number of pixels.
#[derive(Clone, Debug)]
pub struct Mdta {
    pub norm: LayerNorm,
    pub qkv: Conv,
    pub qkv_dw: Conv,
    pub proj: Conv,
    /// Per-head temperature; logits are divided by it.
    pub alpha: ParamId,
    pub heads: usize,
    pub channels: usize,
    pub normalize_qk: bool,
}

impl Mdta {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &BlockConfig, init: &Init) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), c)?,
            qkv: Conv::new(
                store,
                &format!("{name}.qkv"),
                ConvSpec::pointwise(c, 3 * c),
                init,
            )?,
            qkv_dw: Conv::new(
                store,
                &format!("{name}.qkv_dw"),
                ConvSpec::depthwise3(3 * c),
                init,
            )?,
            proj: Conv::new(
                store,
                &format!("{name}.proj"),
                ConvSpec::pointwise(c, c),
                init,
            )?,
            alpha: store.insert(format!("{name}.alpha"), Tensor::ones(&[cfg.heads]))?,
            heads: cfg.heads,
            channels: c,
            normalize_qk: cfg.normalize_qk,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        self.forward_with_attention(tape, store, x).map(|(y, _)| y)
    }

    /// Also returns the attention maps, shape `[B, heads, c, c]`.
    pub fn forward_with_attention(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
    ) -> Result<(Var, Var)> {
        let shape = tape.shape(x).to_vec();
        let [b, c, h, w] = crate::tensor::dims4_of(&shape, "mdta")?;
        if c != self.channels {
            return Err(Error::shape(
                "mdta",
                format!("expected {} channels, got {c}", self.channels),
            ));
        }
        let ch = c / self.heads;
        let n = self.norm.forward(tape, store, x)?;
        let qkv = self.qkv.forward(tape, store, n)?;
        let qkv = self.qkv_dw.forward(tape, store, qkv)?;
        let split = |tape: &mut Tape, i: usize| -> Result<Var> {
            let part = tape.slice_channels(qkv, i * c, c)?;
            tape.reshape(part, &[b, self.heads, ch, h * w])
        };
        let (mut q, mut k, v) = (split(tape, 0)?, split(tape, 1)?, split(tape, 2)?);
        if self.normalize_qk {
            q = tape.l2_normalize_rows(q)?;
            k = tape.l2_normalize_rows(k)?;
        }
        // logits[i][j] = <k_i, q_j> / alpha
        let logits = tape.matmul_t(k, q, false, true)?;
        let alpha = tape.param(store, self.alpha);
        let logits = tape.div_axis1(logits, alpha)?;
        let attn = tape.softmax(logits, 3)?;
        let out = tape.matmul(attn, v)?;
        let out = tape.reshape(out, &[b, c, h, w])?;
        let out = self.proj.forward(tape, store, out)?;
        Ok((tape.add(out, x)?, attn))
    }
}

/// Gated feed-forward network: `W0(gelu(Wd1 Wp1 LN(y)) ⊙ Wd2 Wp2 LN(y)) + y`.
#[derive(Clone, Debug)]
pub struct Gdfn {
    pub norm: LayerNorm,
    pub gate_pw: Conv,
    pub gate_dw: Conv,
    pub value_pw: Conv,
    pub value_dw: Conv,
    pub project_out: Conv,
    pub hidden: usize,
}

impl Gdfn {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &BlockConfig, init: &Init) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let hidden = ffn_hidden(c, cfg.expansion);
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), c)?,
            gate_pw: Conv::new(
                store,
                &format!("{name}.gate_pw"),
                ConvSpec::pointwise(c, hidden),
                init,
            )?,
            gate_dw: Conv::new(
                store,
                &format!("{name}.gate_dw"),
                ConvSpec::depthwise3(hidden),
                init,
            )?,
            value_pw: Conv::new(
                store,
                &format!("{name}.value_pw"),
                ConvSpec::pointwise(c, hidden),
                init,
            )?,
            value_dw: Conv::new(
                store,
                &format!("{name}.value_dw"),
                ConvSpec::depthwise3(hidden),
                init,
            )?,
            project_out: Conv::new(
                store,
                &format!("{name}.project_out"),
                ConvSpec::pointwise(hidden, c),
                init,
            )?,
            hidden,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, y: Var) -> Result<Var> {
        let n = self.norm.forward(tape, store, y)?;
        let gate = self.gate_pw.forward(tape, store, n)?;
        let gate = self.gate_dw.forward(tape, store, gate)?;
        let gate = tape.gelu(gate);
        let value = self.value_pw.forward(tape, store, n)?;
        let value = self.value_dw.forward(tape, store, value)?;
        let mixed = tape.mul(gate, value)?;
        let out = self.project_out.forward(tape, store, mixed)?;
        tape.add(out, y)
    }
}

/// Attention sub-block followed by the feed-forward sub-block, each with
/// its own residual connection.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub attn: Mdta,
    pub ffn: Gdfn,
}

impl TransformerBlock {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &BlockConfig, init: &Init) -> Result<Self> {
        Ok(Self {
            attn: Mdta::new(store, &format!("{name}.attn"), cfg, init)?,
            ffn: Gdfn::new(store, &format!("{name}.ffn"), cfg, init)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let y = self.attn.forward(tape, store, x)?;
        self.ffn.forward(tape, store, y)
    }

    /// Every weight that feeds a residual branch's output.
    pub fn projection_weights(&self) -> [ParamId; 2] {
        [self.attn.proj.weight, self.ffn.project_out.weight]
    }
}

/// Halves the resolution and doubles the channels:
/// 3×3 conv `C -> C/2`, then pixel-unshuffle by 2.
#[derive(Clone, Debug)]
pub struct Downsample {
    pub conv: Conv,
}

impl Downsample {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, init: &Init) -> Result<Self> {
        if channels < 2 || !channels.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "{name}: downsample needs an even channel count, got {channels}"
            )));
        }
        Ok(Self {
            conv: Conv::new(
                store,
                &format!("{name}.conv"),
                ConvSpec::dense3(channels, channels / 2),
                init,
            )?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let [_, _, h, w] = crate::tensor::dims4_of(tape.shape(x), "downsample")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(
                "downsample",
                format!("odd spatial size {h}x{w}"),
            ));
        }
        let y = self.conv.forward(tape, store, x)?;
        tape.pixel_unshuffle(y, 2)
    }
}

/// Doubles the resolution and halves the channels:
/// 3×3 conv `C -> 2C`, then pixel-shuffle by 2.
#[derive(Clone, Debug)]
pub struct Upsample {
    pub conv: Conv,
}

impl Upsample {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, init: &Init) -> Result<Self> {
        if channels < 2 || !channels.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "{name}: upsample needs an even channel count, got {channels}"
            )));
        }
        Ok(Self {
            conv: Conv::new(
                store,
                &format!("{name}.conv"),
                ConvSpec::dense3(channels, channels * 2),
                init,
            )?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let y = self.conv.forward(tape, store, x)?;
        tape.pixel_shuffle(y, 2)
    }
}
