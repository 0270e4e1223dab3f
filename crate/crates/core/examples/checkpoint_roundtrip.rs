//! Saves a partly trained run, lists the manifest's tensor table, reloads it
//! and confirms the restored model and optimizer are bit-identical.

use promptir::error::Result;
use promptir::io::{load_checkpoint, load_manifest, offsets_from_shapes, save_checkpoint};
use promptir::network::ModelConfig;
use promptir::train::{DataConfig, TrainConfig, Trainer};

fn main() -> Result<()> {
    let cfg = TrainConfig {
        steps: 5,
        batch_size: 2,
        eval_every: 0,
        data: DataConfig {
            samples_per_task: 8,
            ..DataConfig::default()
        },
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(ModelConfig::default(), cfg)?;
    trainer.run(|_, _| Ok(()))?;

    let dir = std::env::temp_dir().join("promptir_checkpoint_demo");
    save_checkpoint(&trainer.checkpoint(), &dir)?;

    let manifest = load_manifest(&dir)?;
    println!(
        "format {} at step {}, {} tensors",
        manifest.format_version,
        manifest.step,
        manifest.tensors.len()
    );
    for e in manifest.tensors.iter().take(6) {
        let shape = format!("{:?}", e.shape);
        println!(
            "  {:<30} {shape:<14} offset {:>6} bytes {:>5} fnv {}",
            e.name, e.offset, e.byte_length, e.checksum
        );
    }
    let prefix = offsets_from_shapes(manifest.tensors.iter().map(|e| e.shape.as_slice()));
    assert!(prefix
        .iter()
        .zip(&manifest.tensors)
        .all(|(o, e)| *o == e.offset));

    let back = load_checkpoint(&dir)?;
    let same_params = trainer
        .model()
        .params()
        .iter()
        .zip(back.model.params().iter())
        .all(|((_, a), (_, b))| a.data() == b.data());
    let ckpt = trainer.checkpoint();
    println!(
        "parameters identical: {same_params}, optimizer identical: {}",
        back.adam == ckpt.adam
    );
    Ok(())
}
