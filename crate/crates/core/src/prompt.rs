//! Prompt blocks: learnable prompt components, input-conditioned mixing
//! (generation), and fusion with the features (interaction).
//!
//! A block takes decoder features `F` of shape `[B, C_in, H, W]` and returns
//! features of the same shape:
//!
//! 1. `w = softmax(W · GAP(F) + b)` gives one weight per component and
//!    sample (uniform `1/N` in [`PgmMode::Fixed`]).
//! 2. The weighted sum of the `N` components (`[C_p, S, S]` each) is
//!    bilinearly resized to `H × W` and passed through a 3×3 conv.
//! 3. `[F; P]` is concatenated along channels, run through one transformer
//!    block, and a 3×3 conv maps `C_in + C_p` back to `C_in`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::blocks::{BlockConfig, Conv, ConvSpec, Init, TransformerBlock};
use crate::error::{Error, Result};
use crate::tensor::{dims4_of, ParamId, ParamStore, Tape, Tensor, Var};

/// How prompt weights are produced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PgmMode {
    /// Weights predicted from the pooled input features.
    #[default]
    Dynamic,
    /// Uniform weights, independent of the input.
    Fixed,
}

impl fmt::Display for PgmMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PgmMode::Dynamic => "dynamic",
            PgmMode::Fixed => "fixed",
        })
    }
}

impl FromStr for PgmMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dynamic" => Ok(PgmMode::Dynamic),
            "fixed" => Ok(PgmMode::Fixed),
            other => Err(Error::InvalidArgument(format!(
                "pgm mode `{other}` (expected dynamic or fixed)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptConfig {
    /// Channels of the features the block wraps.
    pub feature_channels: usize,
    /// Channels of each prompt component.
    pub prompt_channels: usize,
    pub components: usize,
    /// Stored spatial size of each component before resizing.
    pub canvas: usize,
    pub mode: PgmMode,
    pub interaction_heads: usize,
    pub expansion: f64,
    pub normalize_qk: bool,
}

impl PromptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_channels == 0
            || self.prompt_channels == 0
            || self.components == 0
            || self.canvas == 0
        {
            return Err(Error::InvalidArgument(format!(
                "prompt block dims must be ≥ 1: {self:?}"
            )));
        }
        self.block_config().validate()
    }

    fn block_config(&self) -> BlockConfig {
        BlockConfig {
            channels: self.feature_channels + self.prompt_channels,
            heads: self.interaction_heads,
            expansion: self.expansion,
            normalize_qk: self.normalize_qk,
        }
    }

    /// Parameter count of a block built from this config.
    pub fn num_params(&self) -> usize {
        let (ci, cp, n) = (self.feature_channels, self.prompt_channels, self.components);
        let components = n * cp * self.canvas * self.canvas;
        let weights = match self.mode {
            PgmMode::Dynamic => n * ci + n,
            PgmMode::Fixed => 0,
        };
        components
            + weights
            + ConvSpec::dense3(cp, cp).with_bias().num_params()
            + self.block_config().num_params()
            + ConvSpec::dense3(ci + cp, ci).with_bias().num_params()
    }
}

#[derive(Clone, Debug)]
pub struct WeightProjection {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct PromptBlock {
    pub cfg: PromptConfig,
    /// `[N, C_p, S, S]`.
    pub components: ParamId,
    /// Absent in fixed mode.
    pub projection: Option<WeightProjection>,
    pub prompt_conv: Conv,
    pub interaction: TransformerBlock,
    pub out_conv: Conv,
}

/// Intermediate values of the generation step.
#[derive(Clone, Copy, Debug)]
pub struct PgmOutput {
    /// `[B, N]`, rows sum to one.
    pub weights: Var,
    /// Weighted component mixture after resizing, before the 3×3 conv.
    pub mixture: Var,
    pub prompt: Var,
}

impl PromptBlock {
    pub fn new(store: &mut ParamStore, name: &str, cfg: PromptConfig, init: &Init) -> Result<Self> {
        cfg.validate()?;
        let (ci, cp, n, s) = (
            cfg.feature_channels,
            cfg.prompt_channels,
            cfg.components,
            cfg.canvas,
        );
        let comps = init.uniform(&format!("{name}.components"), &[n, cp, s, s], 0.0, 0.1);
        let components = store.insert(format!("{name}.components"), comps)?;
        let projection = match cfg.mode {
            PgmMode::Dynamic => {
                let bound = (1.0 / ci as f64).sqrt();
                let w = init.uniform(
                    &format!("{name}.weight_proj.weight"),
                    &[n, ci],
                    -bound,
                    bound,
                );
                Some(WeightProjection {
                    weight: store.insert(format!("{name}.weight_proj.weight"), w)?,
                    bias: store.insert(format!("{name}.weight_proj.bias"), Tensor::zeros(&[n]))?,
                })
            }
            PgmMode::Fixed => None,
        };
        let prompt_conv = Conv::new(
            store,
            &format!("{name}.prompt_conv"),
            ConvSpec::dense3(cp, cp).with_bias(),
            init,
        )?;
        let interaction = TransformerBlock::new(
            store,
            &format!("{name}.interaction"),
            &cfg.block_config(),
            init,
        )?;
        let out_conv = Conv::new(
            store,
            &format!("{name}.out_conv"),
            ConvSpec::dense3(ci + cp, ci).with_bias(),
            init,
        )?;
        Ok(Self {
            cfg,
            components,
            projection,
            prompt_conv,
            interaction,
            out_conv,
        })
    }

    /// Prompt generation: weights from pooled features, weighted component
    /// sum, resize to the feature resolution, 3×3 conv.
    pub fn pgm(&self, tape: &mut Tape, store: &ParamStore, features: Var) -> Result<PgmOutput> {
        let [b, c, h, w] = dims4_of(tape.shape(features), "pgm")?;
        if c != self.cfg.feature_channels {
            return Err(Error::shape(
                "pgm",
                format!("expected {} channels, got {c}", self.cfg.feature_channels),
            ));
        }
        let (n, cp, s) = (
            self.cfg.components,
            self.cfg.prompt_channels,
            self.cfg.canvas,
        );
        let weights = match &self.projection {
            Some(proj) => {
                let pooled = tape.global_avg_pool(features)?;
                let wt = tape.param(store, proj.weight);
                let bias = tape.param(store, proj.bias);
                let logits = tape.linear(pooled, wt, Some(bias))?;
                tape.softmax(logits, 1)?
            }
            None => tape.constant(Tensor::full(&[b, n], 1.0 / n as f64)),
        };
        let comps = tape.param(store, self.components);
        let flat = tape.reshape(comps, &[n, cp * s * s])?;
        let mixed = tape.matmul(weights, flat)?;
        let mixed = tape.reshape(mixed, &[b, cp, s, s])?;
        let mixture = tape.bilinear_resize(mixed, h, w)?;
        let prompt = self.prompt_conv.forward(tape, store, mixture)?;
        Ok(PgmOutput {
            weights,
            mixture,
            prompt,
        })
    }

    /// Prompt interaction: concat, transformer block, 3×3 conv back to the
    /// feature channel count.
    pub fn pim(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        features: Var,
        prompt: Var,
    ) -> Result<Var> {
        let [fb, _, fh, fw] = dims4_of(tape.shape(features), "pim")?;
        let [pb, _, ph, pw] = dims4_of(tape.shape(prompt), "pim")?;
        if (fb, fh, fw) != (pb, ph, pw) {
            return Err(Error::shape(
                "pim",
                format!(
                    "features {:?} and prompt {:?} differ in batch or spatial dims",
                    tape.shape(features),
                    tape.shape(prompt)
                ),
            ));
        }
        let joined = tape.concat(&[features, prompt], 1)?;
        let mixed = self.interaction.forward(tape, store, joined)?;
        self.out_conv.forward(tape, store, mixed)
    }

    /// Full block. Returns the new features and the `[B, N]` weights used.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        features: Var,
    ) -> Result<(Var, Var)> {
        let g = self.pgm(tape, store, features)?;
        let out = self.pim(tape, store, features, g.prompt)?;
        Ok((out, g.weights))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheckOptions};
    use crate::rng;

    fn config(ci: usize, cp: usize, n: usize, mode: PgmMode) -> PromptConfig {
        PromptConfig {
            feature_channels: ci,
            prompt_channels: cp,
            components: n,
            canvas: 4,
            mode,
            interaction_heads: 1,
            expansion: 2.66,
            normalize_qk: true,
        }
    }

    fn block(cfg: PromptConfig, seed: u64) -> (ParamStore, PromptBlock) {
        let mut store = ParamStore::new();
        let b = PromptBlock::new(&mut store, "p", cfg, &Init::new(seed)).unwrap();
        (store, b)
    }

    fn input(seed: u64, shape: &[usize]) -> Tensor {
        Tensor::uniform(shape, -1.0, 1.0, &mut rng::stream(seed, 1))
    }

    #[test]
    fn mode_parse_roundtrip() {
        for m in [PgmMode::Dynamic, PgmMode::Fixed] {
            assert_eq!(m.to_string().parse::<PgmMode>().unwrap(), m);
        }
        assert!("static".parse::<PgmMode>().is_err());
    }

    #[test]
    fn identical_components_make_prompt_input_independent() {
        let (mut store, blk) = block(config(4, 3, 3, PgmMode::Dynamic), 1);
        let one = input(2, &[1, 3, 4, 4]);
        {
            let c = store.get_mut(blk.components).data_mut();
            let per = one.numel();
            for k in 0..3 {
                c[k * per..(k + 1) * per].copy_from_slice(one.data());
            }
        }
        let mut outs = Vec::new();
        for seed in [3, 4] {
            let mut tape = Tape::new();
            let f = tape.constant(input(seed, &[2, 4, 5, 6]));
            let g = blk.pgm(&mut tape, &store, f).unwrap();
            outs.push(tape.value(g.prompt).clone());
        }
        assert!(outs[0].max_abs_diff(&outs[1]) < 1e-12);
    }

    #[test]
    fn weights_are_probability_vectors() {
        let (store, blk) = block(config(4, 4, 5, PgmMode::Dynamic), 5);
        let mut tape = Tape::new();
        let f = tape.constant(input(6, &[3, 4, 3, 7]));
        let (_, w) = blk.forward(&mut tape, &store, f).unwrap();
        for row in tape.value(w).data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|v| *v > 0.0));
        }
    }

    #[test]
    fn forced_logits_give_expected_mixture() {
        // components 0 and 1, logits [0, ln 3] -> w = [1/4, 3/4]
        let (mut store, blk) = block(config(2, 2, 2, PgmMode::Dynamic), 7);
        {
            let c = store.get_mut(blk.components).data_mut();
            let half = c.len() / 2;
            c[..half].fill(0.0);
            c[half..].fill(1.0);
        }
        let proj = blk.projection.clone().unwrap();
        store.get_mut(proj.weight).data_mut().fill(0.0);
        store
            .get_mut(proj.bias)
            .data_mut()
            .copy_from_slice(&[0.0, 3f64.ln()]);
        let mut tape = Tape::new();
        let f = tape.constant(input(8, &[1, 2, 6, 6]));
        let g = blk.pgm(&mut tape, &store, f).unwrap();
        let w = tape.value(g.weights).data();
        assert!((w[0] - 0.25).abs() < 1e-12 && (w[1] - 0.75).abs() < 1e-12);
        assert!(tape
            .value(g.mixture)
            .data()
            .iter()
            .all(|v| (v - 0.75).abs() < 1e-12));
        assert_eq!(tape.shape(g.mixture), &[1, 2, 6, 6]);
    }

    #[test]
    fn equal_channel_means_give_identical_weights() {
        let (store, blk) = block(config(3, 3, 4, PgmMode::Dynamic), 9);
        // dyadic values sum exactly in any order, so the channel means of
        // `a` and its plane-reversed copy are bit-identical
        let a = input(10, &[1, 3, 4, 4]);
        let dyadic: Vec<f64> = a.data().iter().map(|v| (v * 16.0).round() / 16.0).collect();
        let a = Tensor::new(&[1, 3, 4, 4], dyadic).unwrap();
        let mut flipped = a.data().to_vec();
        for plane in flipped.chunks_mut(16) {
            plane.reverse();
        }
        let b = Tensor::new(&[1, 3, 4, 4], flipped).unwrap();
        assert_ne!(a, b);
        let mut w = Vec::new();
        for t in [a, b] {
            let mut tape = Tape::new();
            let f = tape.constant(t);
            let g = blk.pgm(&mut tape, &store, f).unwrap();
            w.push(tape.value(g.weights).clone());
        }
        assert_eq!(w[0], w[1]);
    }

    #[test]
    fn fixed_mode_is_uniform() {
        let (store, blk) = block(config(4, 4, 3, PgmMode::Fixed), 11);
        assert!(blk.projection.is_none());
        let mut tape = Tape::new();
        let f = tape.constant(input(12, &[2, 4, 4, 4]));
        let (y, w) = blk.forward(&mut tape, &store, f).unwrap();
        assert!(tape.value(w).data().iter().all(|v| *v == 1.0 / 3.0));
        assert_eq!(tape.shape(y), &[2, 4, 4, 4]);
    }

    #[test]
    fn output_matches_feature_shape_at_any_resolution() {
        let (store, blk) = block(config(4, 2, 3, PgmMode::Dynamic), 13);
        for (h, w) in [(1, 1), (3, 5), (4, 4), (9, 2), (16, 16)] {
            let mut tape = Tape::new();
            let f = tape.constant(input(14, &[2, 4, h, w]));
            let g = blk.pgm(&mut tape, &store, f).unwrap();
            assert_eq!(tape.shape(g.prompt), &[2, 2, h, w]);
            let y = blk.pim(&mut tape, &store, f, g.prompt).unwrap();
            assert_eq!(tape.shape(y), &[2, 4, h, w]);
        }
    }

    #[test]
    fn pim_rejects_spatial_mismatch() {
        let (store, blk) = block(config(4, 2, 3, PgmMode::Dynamic), 15);
        let mut tape = Tape::new();
        let f = tape.constant(input(16, &[1, 4, 4, 4]));
        let p = tape.constant(input(17, &[1, 2, 4, 5]));
        assert!(blk.pim(&mut tape, &store, f, p).is_err());
    }

    #[test]
    fn zeroed_interaction_with_slice_identity_is_identity() {
        let (mut store, blk) = block(config(4, 3, 3, PgmMode::Dynamic), 18);
        for id in blk.interaction.projection_weights() {
            store.get_mut(id).data_mut().fill(0.0);
        }
        {
            let w = store.get_mut(blk.out_conv.weight).data_mut();
            w.fill(0.0);
            for o in 0..4 {
                w[(o * 7 + o) * 9 + 4] = 1.0;
            }
        }
        let x = input(19, &[2, 4, 5, 3]);
        let mut tape = Tape::new();
        let f = tape.constant(x.clone());
        let (y, _) = blk.forward(&mut tape, &store, f).unwrap();
        assert_eq!(tape.value(y).data(), x.data());
    }

    #[test]
    fn prompt_block_gradients() {
        for (mode, seed) in [(PgmMode::Dynamic, 20), (PgmMode::Fixed, 21)] {
            let (mut store, blk) = block(config(4, 4, 3, mode), seed);
            let xid = store.insert("input", input(seed, &[1, 4, 4, 4])).unwrap();
            let probe = input(seed + 100, &[1, 4, 4, 4]);
            let report = check_gradients(
                &mut store,
                |t, s| {
                    let x = t.param(s, xid);
                    let (y, _) = blk.forward(t, s, x)?;
                    let p = t.constant(probe.clone());
                    let yp = t.mul(y, p)?;
                    Ok(t.sum(yp))
                },
                &GradCheckOptions {
                    max_per_param: Some(8),
                    ..Default::default()
                },
            )
            .unwrap();
            assert!(report.passes(1e-4), "{mode}: {:?}", report.worst);
        }
    }

    #[test]
    fn param_count_matches_store() {
        for mode in [PgmMode::Dynamic, PgmMode::Fixed] {
            let cfg = config(4, 6, 5, mode);
            let (store, _) = block(cfg.clone(), 22);
            assert_eq!(store.numel(), cfg.num_params());
        }
    }
}
