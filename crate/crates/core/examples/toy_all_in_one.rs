//! Trains the desk-scale model on mixed noise, rain and haze, then reports
//! held-out PSNR/SSIM per task.
//!
//! ```text
//! cargo run --release --example toy_all_in_one -- 2000
//! ```
//!
//! The argument is the step count (default 300). 2000 steps takes several
//! minutes on one core and lifts every task well above its degraded input.

use promptir::error::Result;
use promptir::network::ModelConfig;
use promptir::train::{TrainConfig, Trainer};

fn main() -> Result<()> {
    let steps = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(300);
    let cfg = TrainConfig {
        steps,
        eval_every: 100,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(ModelConfig::default(), cfg)?;
    println!(
        "{} parameters, {} training samples",
        trainer.model().count_parameters(),
        trainer.data().train.len()
    );

    let mut window = Vec::new();
    trainer.run(|_, rec| {
        window.push(rec.loss);
        if let Some(eval) = &rec.eval_psnr {
            let mean = window.iter().sum::<f64>() / window.len() as f64;
            window.clear();
            let cells: Vec<String> = eval.iter().map(|(k, v)| format!("{k} {v:.2}")).collect();
            println!("step {:>5}  loss {mean:.4}  {}", rec.step, cells.join("  "));
        }
        Ok(())
    })?;

    println!("\n{}", trainer.evaluate_held_out()?.to_table());
    Ok(())
}
