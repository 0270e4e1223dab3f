//! Renders one procedural image under every degradation and writes the
//! results as PPM files.
//!
//! ```text
//! cargo run --example degrade_gallery -- /tmp/gallery
//! ```

use std::path::PathBuf;

use promptir::degrade::{degrade, procedural_image, DegradationSpec, TaskKind};
use promptir::error::Result;
use promptir::io::save_image;
use promptir::metrics::{psnr, ssim};

fn main() -> Result<()> {
    let out: PathBuf = std::env::args().nth(1).map_or_else(
        || std::env::temp_dir().join("promptir_gallery"),
        PathBuf::from,
    );
    std::fs::create_dir_all(&out).map_err(|e| promptir::error::Error::Io {
        context: out.display().to_string(),
        source: e,
    })?;

    let clean = procedural_image(96, 96, 7);
    save_image(&clean, out.join("clean.ppm"))?;

    let mut specs = vec![
        DegradationSpec::gaussian(15.0),
        DegradationSpec::gaussian(25.0),
        DegradationSpec::gaussian(50.0),
    ];
    specs.extend(
        [
            TaskKind::SpatiallyVariantNoise,
            TaskKind::Rain,
            TaskKind::Haze,
        ]
        .map(DegradationSpec::of_kind),
    );

    println!("{:<10} {:>9} {:>7}", "task", "PSNR", "SSIM");
    for spec in &specs {
        let sample = degrade(&clean, spec, 11)?;
        let path = out.join(format!("{}.ppm", spec.label()));
        save_image(&sample.degraded, &path)?;
        println!(
            "{:<10} {:>9.2} {:>7.3}",
            spec.label(),
            psnr(&sample.degraded, &clean, 1.0)?,
            ssim(&sample.degraded, &clean, 1.0)?
        );
    }
    println!("images written to {}", out.display());
    Ok(())
}
