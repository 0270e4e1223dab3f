//! PSNR and SSIM, plus model evaluation over a labelled test set.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::degrade::Sample;
use crate::error::{Error, Result};
use crate::network::PromptIr;
use crate::tensor::Tensor;

/// Returned by [`psnr`] for identical inputs.
pub const PSNR_CAP_DB: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_same("mse", a, b)?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(s / a.numel() as f64)
}

/// `10·log10(peak² / MSE)` in dB, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::InvalidArgument(format!("psnr peak {peak}")));
    }
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / m).log10()).min(PSNR_CAP_DB))
}

/// Normalised 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of one `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        let src = &plane[y * w..(y + 1) * w];
        for x in 0..wo {
            rows[y * wo + x] = taps.iter().zip(&src[x..x + k]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * rows[(y + i) * wo + x])
                .sum();
        }
    }
    out
}

/// Mean SSIM of two `h × w` planes.
fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, peak: f64) -> f64 {
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);
    let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    let mu_a = filter_valid(a, h, w, &taps);
    let mu_b = filter_valid(b, h, w, &taps);
    let e_aa = filter_valid(&prod(a, a), h, w, &taps);
    let e_bb = filter_valid(&prod(b, b), h, w, &taps);
    let e_ab = filter_valid(&prod(a, b), h, w, &taps);
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
        let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
        total += num / den;
    }
    total / n as f64
}

/// Single-scale SSIM (11×11 Gaussian window, σ = 1.5, valid positions),
/// averaged over every plane. Accepts `[H, W]`, `[C, H, W]` or
/// `[B, C, H, W]`.
pub fn ssim(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    check_same("ssim", a, b)?;
    let s = a.shape();
    if s.len() < 2 {
        return Err(Error::shape(
            "ssim",
            format!("need at least 2 dims, got {s:?}"),
        ));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(
            "ssim",
            format!("{h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        ));
    }
    let planes: Vec<f64> = a
        .data()
        .chunks(h * w)
        .zip(b.data().chunks(h * w))
        .map(|(pa, pb)| ssim_plane(pa, pb, h, w, peak))
        .collect();
    Ok(planes.iter().sum::<f64>() / planes.len() as f64)
}

/// Mean PSNR/SSIM of one group of images.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricPair {
    pub psnr_db: f64,
    pub ssim: f64,
    pub count: usize,
}

impl MetricPair {
    fn mean_of(items: &[(f64, f64)]) -> Self {
        let n = items.len().max(1) as f64;
        Self {
            psnr_db: items.iter().map(|p| p.0).sum::<f64>() / n,
            ssim: items.iter().map(|p| p.1).sum::<f64>() / n,
            count: items.len(),
        }
    }

    /// `PSNR/SSIM` cell, e.g. `29.41/0.871`.
    pub fn cell(&self) -> String {
        format!("{:.2}/{:.3}", self.psnr_db, self.ssim)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Mean over all images.
    pub overall: MetricPair,
    /// The same numbers for the unrestored (degraded) inputs.
    pub degraded_overall: MetricPair,
    pub per_task: BTreeMap<String, MetricPair>,
    pub degraded_per_task: BTreeMap<String, MetricPair>,
}

impl MetricReport {
    /// Plain-text table: one row per task plus an average row.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<16} {:>7} {:>16} {:>16}",
            "task", "images", "degraded", "restored"
        );
        for (task, m) in &self.per_task {
            let d = self
                .degraded_per_task
                .get(task)
                .copied()
                .unwrap_or_default();
            let _ = writeln!(
                s,
                "{:<16} {:>7} {:>16} {:>16}",
                task,
                m.count,
                d.cell(),
                m.cell()
            );
        }
        let _ = writeln!(
            s,
            "{:<16} {:>7} {:>16} {:>16}",
            "average",
            self.overall.count,
            self.degraded_overall.cell(),
            self.overall.cell()
        );
        s
    }
}

/// Scores `(restored, clean, degraded, task)` tuples.
pub fn report_from_pairs<'a, I>(items: I) -> Result<MetricReport>
where
    I: IntoIterator<Item = (&'a Tensor, &'a Tensor, &'a Tensor, &'a str)>,
{
    let mut restored: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    let mut degraded: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    let (mut all_r, mut all_d) = (Vec::new(), Vec::new());
    for (out, clean, deg, task) in items {
        let r = (psnr(out, clean, 1.0)?, ssim(out, clean, 1.0)?);
        let d = (psnr(deg, clean, 1.0)?, ssim(deg, clean, 1.0)?);
        restored.entry(task.to_string()).or_default().push(r);
        degraded.entry(task.to_string()).or_default().push(d);
        all_r.push(r);
        all_d.push(d);
    }
    if all_r.is_empty() {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    Ok(MetricReport {
        overall: MetricPair::mean_of(&all_r),
        degraded_overall: MetricPair::mean_of(&all_d),
        per_task: restored
            .iter()
            .map(|(k, v)| (k.clone(), MetricPair::mean_of(v)))
            .collect(),
        degraded_per_task: degraded
            .iter()
            .map(|(k, v)| (k.clone(), MetricPair::mean_of(v)))
            .collect(),
    })
}

/// Restores every full-size image of `samples` and scores it against its
/// clean reference.
pub fn evaluate(model: &PromptIr, samples: &[Sample]) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    let restored: Vec<Tensor> = samples
        .iter()
        .map(|s| {
            let batch = s.degraded.reshape(&batch_shape(s.degraded.shape()))?;
            let out = model.restore(&batch)?;
            out.reshape(s.degraded.shape())
        })
        .collect::<Result<_>>()?;
    report_from_pairs(
        restored
            .iter()
            .zip(samples)
            .map(|(r, s)| (r, &s.clean, &s.degraded, s.task.as_str())),
    )
}

fn batch_shape(s: &[usize]) -> Vec<usize> {
    std::iter::once(1).chain(s.iter().copied()).collect()
}

/// Prompt weights of one image at one decoder level.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptRow {
    pub image: usize,
    pub task: String,
    pub level: usize,
    pub weights: Vec<f64>,
}

/// Runs every degraded image through `model` and records its prompt
/// weights at each prompt level.
pub fn prompt_rows(model: &PromptIr, samples: &[Sample]) -> Result<Vec<PromptRow>> {
    if model.config().prompt_levels.is_empty() {
        return Err(Error::InvalidArgument("model has no prompt levels".into()));
    }
    let mut rows = Vec::new();
    for (image, s) in samples.iter().enumerate() {
        let batch = s.degraded.reshape(&batch_shape(s.degraded.shape()))?;
        for (level, w) in model.dump_prompt_weights(&batch)? {
            rows.push(PromptRow {
                image,
                task: s.task.clone(),
                level,
                weights: w.into_vec(),
            });
        }
    }
    Ok(rows)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Mean cosine similarity over same-task pairs minus the mean over
/// different-task pairs, among the rows of `level`. `None` unless both kinds
/// of pair exist.
pub fn prompt_separation(rows: &[PromptRow], level: usize) -> Option<f64> {
    let rows: Vec<&PromptRow> = rows.iter().filter(|r| r.level == level).collect();
    let (mut intra, mut inter) = ((0.0, 0usize), (0.0, 0usize));
    for (i, a) in rows.iter().enumerate() {
        for b in &rows[i + 1..] {
            let acc = if a.task == b.task {
                &mut intra
            } else {
                &mut inter
            };
            acc.0 += cosine(&a.weights, &b.weights);
            acc.1 += 1;
        }
    }
    (intra.1 > 0 && inter.1 > 0).then(|| intra.0 / intra.1 as f64 - inter.0 / inter.1 as f64)
}

/// CSV with header `image,task,level,w0..w{N-1}`.
pub fn prompt_csv(rows: &[PromptRow]) -> String {
    let n = rows.first().map_or(0, |r| r.weights.len());
    let mut s = String::from("image,task,level");
    for i in 0..n {
        let _ = write!(s, ",w{i}");
    }
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{},{},{}", r.image, r.task, r.level);
        for w in &r.weights {
            let _ = write!(s, ",{w:e}");
        }
        s.push('\n');
    }
    s
}
