//! Dynamic versus fixed (uniform) prompt weights under identical seeds.
//! Both models start from the same values for every shared parameter.
//!
//! ```text
//! cargo run --release --example pgm_ablation -- 500
//! ```

use promptir::error::Result;
use promptir::network::ModelConfig;
use promptir::prompt::PgmMode;
use promptir::train::{TrainConfig, Trainer};

fn main() -> Result<()> {
    let steps = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(200);
    for mode in [PgmMode::Fixed, PgmMode::Dynamic] {
        let model = ModelConfig {
            pgm_mode: mode,
            ..ModelConfig::default()
        };
        let cfg = TrainConfig {
            steps,
            eval_every: 0,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(model, cfg)?;
        let params = trainer.model().count_parameters();
        trainer.run(|_, _| Ok(()))?;
        let report = trainer.evaluate_held_out()?;
        println!(
            "{mode:<8} {params:>7} params  held-out {}",
            report.overall.cell()
        );
        for (task, m) in &report.per_task {
            println!("    {task:<8} {}", m.cell());
        }
    }
    Ok(())
}
