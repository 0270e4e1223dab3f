//! Briefly trains a model, then shows how its prompt weights differ by
//! degradation type: per-task mean weights and the intra- minus
//! inter-task cosine similarity at each prompt level.
//!
//! ```text
//! cargo run --release --example prompt_weights -- 400
//! ```

use std::collections::BTreeMap;

use promptir::error::Result;
use promptir::metrics::{prompt_rows, prompt_separation};
use promptir::network::ModelConfig;
use promptir::train::{TrainConfig, Trainer};

fn main() -> Result<()> {
    let steps = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(150);
    let mut trainer = Trainer::new(
        ModelConfig::default(),
        TrainConfig {
            steps,
            eval_every: 0,
            ..TrainConfig::default()
        },
    )?;
    trainer.run(|_, _| Ok(()))?;

    let rows = prompt_rows(trainer.model(), &trainer.data().held_out)?;
    for &level in &trainer.model().config().prompt_levels {
        let mut sums: BTreeMap<&str, (Vec<f64>, usize)> = BTreeMap::new();
        for r in rows.iter().filter(|r| r.level == level) {
            let e = sums
                .entry(&r.task)
                .or_insert((vec![0.0; r.weights.len()], 0));
            e.0.iter_mut().zip(&r.weights).for_each(|(a, w)| *a += w);
            e.1 += 1;
        }
        println!(
            "level {level}  separation {:+.4}",
            prompt_separation(&rows, level).unwrap_or(f64::NAN)
        );
        for (task, (sum, n)) in sums {
            let mean: Vec<String> = sum.iter().map(|s| format!("{:.3}", s / n as f64)).collect();
            println!("    {task:<8} [{}]", mean.join(", "));
        }
    }
    Ok(())
}
