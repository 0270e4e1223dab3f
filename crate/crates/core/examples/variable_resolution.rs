//! The network accepts any input of at least 8×8: sides that are not
//! multiples of 8 are reflect-padded internally and cropped back.

use promptir::degrade::procedural_image;
use promptir::error::Result;
use promptir::network::{ModelConfig, PromptIr};

fn main() -> Result<()> {
    let model = PromptIr::new(ModelConfig::default(), 0)?;
    for (h, w) in [(8, 8), (13, 19), (32, 32), (41, 27), (64, 50)] {
        let img = procedural_image(h, w, 1).reshape(&[1, 3, h, w])?;
        let out = model.restore(&img)?;
        let weights = model.dump_prompt_weights(&img)?;
        let sums: Vec<String> = weights
            .iter()
            .map(|(l, w)| format!("L{l} {:.12}", w.sum()))
            .collect();
        println!(
            "{h:>3}x{w:<3} -> {:?}  weight sums {}",
            out.shape(),
            sums.join(" ")
        );
    }
    Ok(())
}
