//! The full restoration network.
//!
//! ```text
//! I ─pad─ conv3 ─ enc1 ─down─ enc2 ─down─ enc3 ─down─ latent ─[P4]
//!                  │            │            │                  │
//!                  │            │            └──── cat+1×1 ─ dec3 ─[P3]
//!                  │            └────────────────── cat+1×1 ─ dec2 ─[P2]
//!                  └──────────────────────────────── cat ─ dec1 (2C)
//!                                          refinement (2C) ─ conv3 ─ + I ─crop
//! ```
//!
//! `[Pl]` marks an optional prompt block on decoder level `l`, applied to
//! that level's output before it is upsampled into the next one.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::blocks::{BlockConfig, Conv, ConvSpec, Downsample, Init, TransformerBlock, Upsample};
use crate::error::{Error, Result};
use crate::prompt::{PgmMode, PromptBlock, PromptConfig};
use crate::rng;
use crate::tensor::{dims4_of, ParamStore, Tape, Tensor, Var};

/// Spatial dims are padded up to a multiple of this (three 2× downsamples).
pub const SIZE_MULTIPLE: usize = 8;

/// Decoder levels that may carry a prompt block.
pub const PROMPT_LEVELS: [usize; 3] = [2, 3, 4];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub base_channels: usize,
    /// Transformer blocks at levels 1..=4 (decoder levels reuse 1..=3).
    pub blocks_per_level: [usize; 4],
    pub heads_per_level: [usize; 4],
    pub refinement_blocks: usize,
    pub num_prompt_components: usize,
    /// Decoder levels with a prompt block, a subset of {2, 3, 4}. Empty
    /// gives the prompt-free baseline.
    pub prompt_levels: BTreeSet<usize>,
    pub pgm_mode: PgmMode,
    pub prompt_canvas: usize,
    pub expansion: f64,
    pub interaction_heads: usize,
    pub normalize_qk: bool,
}

impl Default for ModelConfig {
    /// Desk-scale configuration.
    fn default() -> Self {
        Self {
            base_channels: 8,
            blocks_per_level: [1, 1, 1, 1],
            heads_per_level: [1, 1, 2, 2],
            refinement_blocks: 1,
            num_prompt_components: 3,
            prompt_levels: PROMPT_LEVELS.into_iter().collect(),
            pgm_mode: PgmMode::Dynamic,
            prompt_canvas: 8,
            expansion: 2.66,
            interaction_heads: 1,
            normalize_qk: true,
        }
    }
}

impl ModelConfig {
    /// Block counts, head counts and prompt component count of the full-size
    /// model (48 base channels, 4 refinement blocks, 16×16 prompt canvas).
    pub fn full_scale() -> Self {
        Self {
            base_channels: 48,
            blocks_per_level: [4, 6, 6, 8],
            heads_per_level: [1, 2, 4, 8],
            refinement_blocks: 4,
            num_prompt_components: 5,
            prompt_canvas: 16,
            ..Self::default()
        }
    }

    /// Channels of encoder level `l` (1-based).
    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels << (level - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        let c = self.base_channels;
        if c < 2 || !c.is_multiple_of(2) {
            return bad(format!("base_channels must be even and ≥ 2, got {c}"));
        }
        if self.blocks_per_level.contains(&0) {
            return bad(format!(
                "blocks_per_level entries must be ≥ 1, got {:?}",
                self.blocks_per_level
            ));
        }
        if let Some(l) = self
            .prompt_levels
            .iter()
            .find(|l| !PROMPT_LEVELS.contains(l))
        {
            return bad(format!(
                "prompt level {l} is not a decoder level (allowed: 2, 3, 4)"
            ));
        }
        if self.num_prompt_components == 0 || self.prompt_canvas == 0 {
            return bad("prompt components and canvas must be ≥ 1".into());
        }
        // (channels, heads) of every block group in the network
        let groups = [
            (c, self.heads_per_level[0]),
            (2 * c, self.heads_per_level[1]),
            (4 * c, self.heads_per_level[2]),
            (8 * c, self.heads_per_level[3]),
            (2 * c, self.heads_per_level[0]),
        ];
        for (ch, heads) in groups {
            BlockConfig::new(ch, heads, self.expansion).validate()?;
        }
        Ok(())
    }

    fn block(&self, channels: usize, heads: usize) -> BlockConfig {
        BlockConfig {
            channels,
            heads,
            expansion: self.expansion,
            normalize_qk: self.normalize_qk,
        }
    }

    fn prompt(&self, level: usize) -> PromptConfig {
        let ch = self.level_channels(level);
        PromptConfig {
            feature_channels: ch,
            prompt_channels: ch,
            components: self.num_prompt_components,
            canvas: self.prompt_canvas,
            mode: self.pgm_mode,
            interaction_heads: self.interaction_heads,
            expansion: self.expansion,
            normalize_qk: self.normalize_qk,
        }
    }
}

fn build_blocks(
    store: &mut ParamStore,
    name: &str,
    count: usize,
    cfg: BlockConfig,
    init: &Init,
) -> Result<Vec<TransformerBlock>> {
    (0..count)
        .map(|i| TransformerBlock::new(store, &format!("{name}.{i}"), &cfg, init))
        .collect()
}

fn run_blocks(
    blocks: &[TransformerBlock],
    tape: &mut Tape,
    store: &ParamStore,
    mut x: Var,
) -> Result<Var> {
    for b in blocks {
        x = b.forward(tape, store, x)?;
    }
    Ok(x)
}

/// Result of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub restored: Var,
    /// Prompt weights `[B, N]` per decoder level.
    pub prompt_weights: BTreeMap<usize, Var>,
}

/// Prompt-conditioned encoder–decoder. Owns its parameters.
#[derive(Clone, Debug)]
pub struct PromptIr {
    cfg: ModelConfig,
    params: ParamStore,
    embed: Conv,
    encoders: [Vec<TransformerBlock>; 3],
    latent: Vec<TransformerBlock>,
    downs: [Downsample; 3],
    /// Upsamplers into levels 3, 2, 1.
    ups: [Upsample; 3],
    fuse3: Conv,
    fuse2: Conv,
    /// Decoder blocks of levels 3, 2, 1.
    decoders: [Vec<TransformerBlock>; 3],
    prompts: BTreeMap<usize, PromptBlock>,
    refinement: Vec<TransformerBlock>,
    output: Conv,
}

impl PromptIr {
    /// Builds a model with parameters drawn from `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let init = &Init::new(rng::derive(seed, "init"));
        let mut store = ParamStore::new();
        let s = &mut store;
        let c = cfg.base_channels;
        let nb = cfg.blocks_per_level;
        let hd = cfg.heads_per_level;

        let embed = Conv::new(s, "embed", ConvSpec::dense3(3, c).with_bias(), init)?;
        let enc1 = build_blocks(s, "encoder1", nb[0], cfg.block(c, hd[0]), init)?;
        let down1 = Downsample::new(s, "down1_2", c, init)?;
        let enc2 = build_blocks(s, "encoder2", nb[1], cfg.block(2 * c, hd[1]), init)?;
        let down2 = Downsample::new(s, "down2_3", 2 * c, init)?;
        let enc3 = build_blocks(s, "encoder3", nb[2], cfg.block(4 * c, hd[2]), init)?;
        let down3 = Downsample::new(s, "down3_4", 4 * c, init)?;
        let latent = build_blocks(s, "latent", nb[3], cfg.block(8 * c, hd[3]), init)?;

        let mut prompts = BTreeMap::new();
        let mut add_prompt = |s: &mut ParamStore, level: usize, init: &Init| -> Result<()> {
            if cfg.prompt_levels.contains(&level) {
                let b = PromptBlock::new(s, &format!("prompt{level}"), cfg.prompt(level), init)?;
                prompts.insert(level, b);
            }
            Ok(())
        };
        add_prompt(s, 4, init)?;
        let up4 = Upsample::new(s, "up4_3", 8 * c, init)?;
        let fuse3 = Conv::new(s, "fuse3", ConvSpec::pointwise(8 * c, 4 * c), init)?;
        let dec3 = build_blocks(s, "decoder3", nb[2], cfg.block(4 * c, hd[2]), init)?;
        add_prompt(s, 3, init)?;
        let up3 = Upsample::new(s, "up3_2", 4 * c, init)?;
        let fuse2 = Conv::new(s, "fuse2", ConvSpec::pointwise(4 * c, 2 * c), init)?;
        let dec2 = build_blocks(s, "decoder2", nb[1], cfg.block(2 * c, hd[1]), init)?;
        add_prompt(s, 2, init)?;
        let up2 = Upsample::new(s, "up2_1", 2 * c, init)?;
        let dec1 = build_blocks(s, "decoder1", nb[0], cfg.block(2 * c, hd[0]), init)?;
        let refinement = build_blocks(
            s,
            "refinement",
            cfg.refinement_blocks,
            cfg.block(2 * c, hd[0]),
            init,
        )?;
        let output = Conv::new(s, "output", ConvSpec::dense3(2 * c, 3).with_bias(), init)?;

        Ok(Self {
            cfg,
            params: store,
            embed,
            encoders: [enc1, enc2, enc3],
            latent,
            downs: [down1, down2, down3],
            ups: [up4, up3, up2],
            fuse3,
            fuse2,
            decoders: [dec3, dec2, dec1],
            prompts,
            refinement,
            output,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Total number of scalar parameters.
    pub fn count_parameters(&self) -> usize {
        self.params.numel()
    }

    pub fn prompt_block(&self, level: usize) -> Option<&PromptBlock> {
        self.prompts.get(&level)
    }

    /// The final 3×3 conv producing the predicted residual.
    pub fn output_conv(&self) -> &Conv {
        &self.output
    }

    /// Records a forward pass of a `[B, 3, H, W]` image batch.
    pub fn forward(&self, tape: &mut Tape, input: Var) -> Result<ForwardOutput> {
        self.forward_with(tape, &self.params, input)
    }

    /// Forward pass reading parameters from `st`, which must have the
    /// layout of [`Self::params`] (e.g. a perturbed copy).
    pub fn forward_with(
        &self,
        tape: &mut Tape,
        st: &ParamStore,
        input: Var,
    ) -> Result<ForwardOutput> {
        let [_, ch, h, w] = dims4_of(tape.shape(input), "forward")?;
        if ch != 3 {
            return Err(Error::shape(
                "forward",
                format!("expected 3 channels, got {ch}"),
            ));
        }
        if h < SIZE_MULTIPLE || w < SIZE_MULTIPLE {
            return Err(Error::InvalidArgument(format!(
                "input is {h}x{w}; both sides must be ≥ {SIZE_MULTIPLE}"
            )));
        }
        let pad = |n: usize| n.next_multiple_of(SIZE_MULTIPLE) - n;
        let x = tape.reflect_pad(input, pad(h), pad(w))?;

        let f0 = self.embed.forward(tape, st, x)?;
        let e1 = run_blocks(&self.encoders[0], tape, st, f0)?;
        let d = self.downs[0].forward(tape, st, e1)?;
        let e2 = run_blocks(&self.encoders[1], tape, st, d)?;
        let d = self.downs[1].forward(tape, st, e2)?;
        let e3 = run_blocks(&self.encoders[2], tape, st, d)?;
        let d = self.downs[2].forward(tape, st, e3)?;
        let mut feat = run_blocks(&self.latent, tape, st, d)?;

        let mut prompt_weights = BTreeMap::new();
        let mut prompt = |tape: &mut Tape, level: usize, feat: Var| -> Result<Var> {
            match self.prompts.get(&level) {
                Some(block) => {
                    let (out, wts) = block.forward(tape, st, feat)?;
                    prompt_weights.insert(level, wts);
                    Ok(out)
                }
                None => Ok(feat),
            }
        };
        feat = prompt(tape, 4, feat)?;

        let u = self.ups[0].forward(tape, st, feat)?;
        let u = tape.concat(&[u, e3], 1)?;
        let u = self.fuse3.forward(tape, st, u)?;
        feat = run_blocks(&self.decoders[0], tape, st, u)?;
        feat = prompt(tape, 3, feat)?;

        let u = self.ups[1].forward(tape, st, feat)?;
        let u = tape.concat(&[u, e2], 1)?;
        let u = self.fuse2.forward(tape, st, u)?;
        feat = run_blocks(&self.decoders[1], tape, st, u)?;
        feat = prompt(tape, 2, feat)?;

        let u = self.ups[2].forward(tape, st, feat)?;
        let u = tape.concat(&[u, e1], 1)?;
        feat = run_blocks(&self.decoders[2], tape, st, u)?;
        feat = run_blocks(&self.refinement, tape, st, feat)?;

        let residual = self.output.forward(tape, st, feat)?;
        let out = tape.add(x, residual)?;
        let restored = tape.crop(out, h, w)?;
        Ok(ForwardOutput {
            restored,
            prompt_weights,
        })
    }

    /// Inference on a batch without keeping the graph.
    pub fn restore(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let out = self.forward(&mut tape, x)?;
        Ok(tape.value(out.restored).clone())
    }

    /// Prompt weights of every prompt level for one forward pass.
    pub fn dump_prompt_weights(&self, input: &Tensor) -> Result<BTreeMap<usize, Tensor>> {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let out = self.forward(&mut tape, x)?;
        Ok(out
            .prompt_weights
            .into_iter()
            .map(|(l, v)| (l, tape.value(v).clone()))
            .collect())
    }
}
