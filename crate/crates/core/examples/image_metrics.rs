//! PSNR and SSIM of increasingly noisy copies of one image, plus a
//! per-task report in the `PSNR/SSIM` cell format.

use promptir::degrade::{
    add_gaussian_noise, make_dataset, procedural_image, DegradationSpec, ImageSource, TaskKind,
};
use promptir::error::Result;
use promptir::metrics::{psnr, report_from_pairs, ssim};

fn main() -> Result<()> {
    let clean = procedural_image(64, 64, 3);
    println!("{:>6} {:>9} {:>7}", "sigma", "PSNR", "SSIM");
    for sigma in [0.0, 5.0, 15.0, 25.0, 50.0, 100.0] {
        let noisy = add_gaussian_noise(&clean, sigma, 1)?;
        println!(
            "{sigma:>6} {:>9.2} {:>7.4}",
            psnr(&noisy, &clean, 1.0)?,
            ssim(&noisy, &clean, 1.0)?
        );
    }

    let mix =
        [TaskKind::GaussianNoise, TaskKind::Rain, TaskKind::Haze].map(DegradationSpec::of_kind);
    let samples = make_dataset(&mix, 30, &ImageSource::procedural(48, 48), 9)?;
    // With the degraded image as the "restoration", both columns agree.
    let report = report_from_pairs(
        samples
            .iter()
            .map(|s| (&s.degraded, &s.clean, &s.degraded, s.task.as_str())),
    )?;
    println!("\n{}", report.to_table());
    Ok(())
}
