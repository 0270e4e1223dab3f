//! Checks backward-pass gradients of a transformer block and a prompt block
//! against central finite differences.
//!
//! ```text
//! cargo run --example gradient_check
//! ```

use promptir::blocks::{BlockConfig, Init, TransformerBlock};
use promptir::error::Result;
use promptir::gradcheck::{check_gradients, GradCheckOptions};
use promptir::prompt::{PgmMode, PromptBlock, PromptConfig};
use promptir::rng;
use promptir::tensor::{ParamStore, Tape, Tensor, Var};

fn probe_loss(t: &mut Tape, y: Var, probe: &Tensor) -> Result<Var> {
    let p = t.constant(probe.clone());
    let yp = t.mul(y, p)?;
    Ok(t.sum(yp))
}

fn main() -> Result<()> {
    let opts = GradCheckOptions {
        max_per_param: Some(8),
        ..Default::default()
    };

    for (channels, heads) in [(4, 1), (4, 2), (8, 2)] {
        let mut store = ParamStore::new();
        let block = TransformerBlock::new(
            &mut store,
            "block",
            &BlockConfig::new(channels, heads, 2.66),
            &Init::new(1),
        )?;
        let shape = [1, channels, 5, 6];
        let x = store.insert(
            "input",
            Tensor::uniform(&shape, -1.0, 1.0, &mut rng::stream(2, 0)),
        )?;
        let probe = Tensor::uniform(&shape, -1.0, 1.0, &mut rng::stream(3, 0));
        let report = check_gradients(
            &mut store,
            |t, s| {
                let xv = t.param(s, x);
                let y = block.forward(t, s, xv)?;
                probe_loss(t, y, &probe)
            },
            &opts,
        )?;
        println!(
            "transformer block C={channels} heads={heads}: {} entries, max rel. error {:.2e}",
            report.checked, report.max_rel_error
        );
    }

    let mut store = ParamStore::new();
    let cfg = PromptConfig {
        feature_channels: 4,
        prompt_channels: 4,
        components: 3,
        canvas: 4,
        mode: PgmMode::Dynamic,
        interaction_heads: 1,
        expansion: 2.66,
        normalize_qk: true,
    };
    let block = PromptBlock::new(&mut store, "prompt", cfg, &Init::new(4))?;
    let x = store.insert(
        "input",
        Tensor::uniform(&[2, 4, 6, 5], -1.0, 1.0, &mut rng::stream(5, 0)),
    )?;
    let probe = Tensor::uniform(&[2, 4, 6, 5], -1.0, 1.0, &mut rng::stream(6, 0));
    let report = check_gradients(
        &mut store,
        |t, s| {
            let xv = t.param(s, x);
            let (y, _) = block.forward(t, s, xv)?;
            probe_loss(t, y, &probe)
        },
        &opts,
    )?;
    println!(
        "prompt block: {} entries, max rel. error {:.2e} (worst: {:?})",
        report.checked,
        report.max_rel_error,
        report.worst.map(|w| w.param)
    );
    Ok(())
}
