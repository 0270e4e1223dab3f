//! Seeded synthetic degradations and procedural clean images.
//!
//! Every generator is a pure function of its inputs and a 64-bit seed.
//! Images are `[3, H, W]` tensors with values in `[0, 1]`; noise levels are
//! given in 8-bit units and divided by 255.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    GaussianNoise,
    SpatiallyVariantNoise,
    Rain,
    Haze,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [
        TaskKind::GaussianNoise,
        TaskKind::SpatiallyVariantNoise,
        TaskKind::Rain,
        TaskKind::Haze,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::GaussianNoise => "gaussian",
            TaskKind::SpatiallyVariantNoise => "spatially_variant",
            TaskKind::Rain => "rain",
            TaskKind::Haze => "haze",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" | "gaussian_noise" | "noise" => Ok(TaskKind::GaussianNoise),
            "spatially_variant" | "spatially_variant_noise" => Ok(TaskKind::SpatiallyVariantNoise),
            "rain" => Ok(TaskKind::Rain),
            "haze" => Ok(TaskKind::Haze),
            other => Err(Error::InvalidArgument(format!(
                "unknown task '{other}' (expected gaussian, spatially_variant, rain or haze)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RainSpec {
    pub num_streaks: usize,
    /// Streak length in pixels.
    pub length: f64,
    /// Streak width in pixels.
    pub width: f64,
    /// Streak angle range in degrees from vertical.
    pub angle_deg: [f64; 2],
    pub intensity: f64,
}

impl Default for RainSpec {
    fn default() -> Self {
        Self {
            num_streaks: 40,
            length: 10.0,
            width: 1.0,
            angle_deg: [-15.0, 15.0],
            intensity: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HazeSpec {
    /// Atmospheric light is drawn uniformly from this range.
    pub airlight: [f64; 2],
    /// Transmission field range `[t_min, t_max]`.
    pub transmission: [f64; 2],
}

impl Default for HazeSpec {
    fn default() -> Self {
        Self {
            airlight: [0.8, 1.0],
            transmission: [0.3, 0.7],
        }
    }
}

/// One degradation type with its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub kind: TaskKind,
    /// Noise standard deviation in 8-bit units.
    pub sigma: f64,
    /// Per-quadrant levels for spatially variant noise.
    pub sigma_levels: Vec<f64>,
    pub rain: RainSpec,
    pub haze: HazeSpec,
}

impl DegradationSpec {
    fn with_kind(kind: TaskKind) -> Self {
        Self {
            kind,
            sigma: 25.0,
            sigma_levels: vec![0.0, 15.0, 25.0, 50.0],
            rain: RainSpec::default(),
            haze: HazeSpec::default(),
        }
    }

    pub fn gaussian(sigma: f64) -> Self {
        Self {
            sigma,
            ..Self::with_kind(TaskKind::GaussianNoise)
        }
    }

    pub fn spatially_variant(levels: Vec<f64>) -> Self {
        Self {
            sigma_levels: levels,
            ..Self::with_kind(TaskKind::SpatiallyVariantNoise)
        }
    }

    pub fn rain(rain: RainSpec) -> Self {
        Self {
            rain,
            ..Self::with_kind(TaskKind::Rain)
        }
    }

    pub fn haze(haze: HazeSpec) -> Self {
        Self {
            haze,
            ..Self::with_kind(TaskKind::Haze)
        }
    }

    /// Default parameters for `kind`.
    pub fn of_kind(kind: TaskKind) -> Self {
        Self::with_kind(kind)
    }

    /// Task label carried alongside samples, e.g. `noise25`, `rain`.
    pub fn label(&self) -> String {
        match self.kind {
            TaskKind::GaussianNoise => format!("noise{}", self.sigma),
            TaskKind::SpatiallyVariantNoise => "noise_sv".into(),
            TaskKind::Rain => "rain".into(),
            TaskKind::Haze => "haze".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        match self.kind {
            TaskKind::GaussianNoise => {
                if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
                    return bad(format!("sigma must be >= 0, got {}", self.sigma));
                }
            }
            TaskKind::SpatiallyVariantNoise => {
                if self.sigma_levels.is_empty() || self.sigma_levels.len() > 4 {
                    return bad(format!(
                        "sigma_levels needs 1 to 4 entries, got {}",
                        self.sigma_levels.len()
                    ));
                }
                if let Some(s) = self
                    .sigma_levels
                    .iter()
                    .find(|s| !(**s >= 0.0 && s.is_finite()))
                {
                    return bad(format!("sigma_levels entries must be >= 0, got {s}"));
                }
            }
            TaskKind::Rain => {
                let r = &self.rain;
                if !(0.0..=1.0).contains(&r.intensity) {
                    return bad(format!(
                        "rain intensity must lie in [0, 1], got {}",
                        r.intensity
                    ));
                }
                if !(r.length > 0.0 && r.width > 0.0) {
                    return bad(format!(
                        "rain length and width must be > 0, got {} and {}",
                        r.length, r.width
                    ));
                }
                if r.angle_deg[0] > r.angle_deg[1] {
                    return bad(format!("rain angle range {:?} is reversed", r.angle_deg));
                }
            }
            TaskKind::Haze => {
                let [t0, t1] = self.haze.transmission;
                if !(t0 > 0.0 && t1 <= 1.0 && t0 <= t1) {
                    return bad(format!(
                        "haze transmission needs 0 < t_min <= t_max <= 1, got [{t0}, {t1}]"
                    ));
                }
                let [a0, a1] = self.haze.airlight;
                if !(a0 >= 0.7 && a1 <= 1.0 && a0 <= a1) {
                    return bad(format!(
                        "haze airlight needs 0.7 <= A_min <= A_max <= 1, got [{a0}, {a1}]"
                    ));
                }
            }
        }
        Ok(())
    }
}

fn check_image(img: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match img.shape() {
        &[3, h, w] => Ok((h, w)),
        s => Err(Error::shape(op, format!("expected [3, H, W], got {s:?}"))),
    }
}

/// Adds i.i.d. `N(0, (σ/255)²)` noise and clamps to `[0, 1]`.
pub fn add_gaussian_noise(img: &Tensor, sigma: f64, seed: u64) -> Result<Tensor> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "sigma must be >= 0, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let normal = Normal::new(0.0, sigma / 255.0).expect("positive std");
    let mut r = rng::stream(seed, 0);
    let data = img
        .data()
        .iter()
        .map(|v| (v + normal.sample(&mut r)).clamp(0.0, 1.0))
        .collect();
    Tensor::new(img.shape(), data)
}

/// Noisy image plus the per-pixel σ map (8-bit units, `[H, W]`).
#[derive(Clone, Debug)]
pub struct NoiseMap {
    pub noisy: Tensor,
    pub sigma_map: Tensor,
}

/// Quadrant assignment of `levels` (cycled to four slots, then shuffled).
pub fn quadrant_levels(levels: &[f64], seed: u64) -> [f64; 4] {
    let mut slots: Vec<f64> = (0..4).map(|i| levels[i % levels.len()]).collect();
    slots.shuffle(&mut rng::stream(seed, 1));
    [slots[0], slots[1], slots[2], slots[3]]
}

/// Gaussian noise whose σ differs per image quadrant (top-left, top-right,
/// bottom-left, bottom-right).
pub fn spatially_variant_noise(img: &Tensor, levels: &[f64], seed: u64) -> Result<NoiseMap> {
    let (h, w) = check_image(img, "spatially_variant_noise")?;
    DegradationSpec::spatially_variant(levels.to_vec()).validate()?;
    let sigma_map = quadrant_map(h, w, quadrant_levels(levels, seed));
    let sigma = sigma_map.data();
    let mut r = rng::stream(seed, 0);
    let mut data = img.data().to_vec();
    for (i, v) in data.iter_mut().enumerate() {
        let s = sigma[i % (h * w)];
        let n: f64 = r.sample(rand_distr::StandardNormal);
        if s > 0.0 {
            *v = (*v + n * s / 255.0).clamp(0.0, 1.0);
        }
    }
    Ok(NoiseMap {
        noisy: Tensor::new(img.shape(), data)?,
        sigma_map,
    })
}

/// `[H, W]` map holding `q[0]..q[3]` in the TL, TR, BL, BR quadrants; the
/// lower and right halves take the extra row or column of odd sizes.
pub fn quadrant_map(h: usize, w: usize, q: [f64; 4]) -> Tensor {
    let (hm, wm) = (h / 2, w / 2);
    let data = (0..h * w)
        .map(|i| q[usize::from(i / w >= hm) * 2 + usize::from(i % w >= wm)])
        .collect();
    Tensor::new(&[h, w], data).expect("h·w values")
}

/// A straight rain streak in pixel coordinates (pixel centres at `i + 0.5`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Segment {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Segment {
    /// Euclidean distance from `(px, py)` to the segment.
    pub fn distance(&self, px: f64, py: f64) -> f64 {
        let (dx, dy) = (self.x1 - self.x0, self.y1 - self.y0);
        let len2 = dx * dx + dy * dy;
        let t = if len2 == 0.0 {
            0.0
        } else {
            (((px - self.x0) * dx + (py - self.y0) * dy) / len2).clamp(0.0, 1.0)
        };
        let (cx, cy) = (self.x0 + t * dx, self.y0 + t * dy);
        ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
    }
}

/// Seeded streak geometry: uniform centres, uniform angles, fixed length.
pub fn streak_segments(h: usize, w: usize, spec: &RainSpec, seed: u64) -> Vec<Segment> {
    let mut r = rng::stream(seed, 2);
    (0..spec.num_streaks)
        .map(|_| {
            let cx = r.random_range(0.0..w as f64);
            let cy = r.random_range(0.0..h as f64);
            let [a0, a1] = spec.angle_deg;
            let a = if a0 < a1 { r.random_range(a0..a1) } else { a0 }.to_radians();
            let (hx, hy) = (0.5 * spec.length * a.sin(), 0.5 * spec.length * a.cos());
            Segment {
                x0: cx - hx,
                y0: cy - hy,
                x1: cx + hx,
                y1: cy + hy,
            }
        })
        .collect()
}

/// Anti-aliased coverage: a one-pixel linear ramp around the streak edge,
/// overlapping streaks combined by max.
pub fn rasterize_streaks(h: usize, w: usize, segments: &[Segment], width: f64) -> Tensor {
    let mut layer = vec![0.0f64; h * w];
    let reach = 0.5 * width + 0.5;
    for s in segments {
        let y_lo = (s.y0.min(s.y1) - reach).floor().max(0.0) as usize;
        let y_hi = ((s.y0.max(s.y1) + reach).ceil().max(0.0) as usize).min(h);
        let x_lo = (s.x0.min(s.x1) - reach).floor().max(0.0) as usize;
        let x_hi = ((s.x0.max(s.x1) + reach).ceil().max(0.0) as usize).min(w);
        for y in y_lo..y_hi {
            for x in x_lo..x_hi {
                let d = s.distance(x as f64 + 0.5, y as f64 + 0.5);
                let cov = (reach - d).clamp(0.0, 1.0);
                let px = &mut layer[y * w + x];
                *px = px.max(cov);
            }
        }
    }
    Tensor::new(&[h, w], layer).expect("layer size")
}

#[derive(Clone, Debug)]
pub struct RainOutput {
    pub rainy: Tensor,
    /// Streak coverage in `[0, 1]`, `[H, W]`.
    pub streaks: Tensor,
}

/// Additive rain: `clamp(img + intensity · streaks)` on every channel.
pub fn synth_rain(img: &Tensor, spec: &RainSpec, seed: u64) -> Result<RainOutput> {
    let (h, w) = check_image(img, "synth_rain")?;
    DegradationSpec::rain(spec.clone()).validate()?;
    let streaks = rasterize_streaks(h, w, &streak_segments(h, w, spec, seed), spec.width);
    let layer = streaks.data();
    let data = img
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| (v + spec.intensity * layer[i % (h * w)]).clamp(0.0, 1.0))
        .collect();
    Ok(RainOutput {
        rainy: Tensor::new(img.shape(), data)?,
        streaks,
    })
}

/// Bilinear upsampling (align-corners) of a `gh × gw` grid to `h × w`.
fn upsample_grid(grid: &[f64], gh: usize, gw: usize, h: usize, w: usize) -> Vec<f64> {
    let coord = |o: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
        if n_out <= 1 {
            return (0, 0, 0.0);
        }
        let s = o as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
        let i0 = (s.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let (y0, y1, fy) = coord(y, h, gh);
        for x in 0..w {
            let (x0, x1, fx) = coord(x, w, gw);
            let top = grid[y0 * gw + x0] * (1.0 - fx) + grid[y0 * gw + x1] * fx;
            let bot = grid[y1 * gw + x0] * (1.0 - fx) + grid[y1 * gw + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// Atmospheric scattering `img · t + A · (1 − t)` with a per-pixel `t`.
pub fn apply_haze(img: &Tensor, transmission: &Tensor, airlight: f64) -> Result<Tensor> {
    let (h, w) = check_image(img, "apply_haze")?;
    if transmission.shape() != [h, w] {
        return Err(Error::shape(
            "apply_haze",
            format!("transmission {:?} for image {h}x{w}", transmission.shape()),
        ));
    }
    let t = transmission.data();
    let data = img
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let ti = t[i % (h * w)];
            (v * ti + airlight * (1.0 - ti)).clamp(0.0, 1.0)
        })
        .collect();
    Tensor::new(img.shape(), data)
}

#[derive(Clone, Debug)]
pub struct HazeOutput {
    pub hazy: Tensor,
    /// Transmission map, `[H, W]`.
    pub transmission: Tensor,
    pub airlight: f64,
}

/// Haze with a smooth seeded transmission field: a 4×4 uniform grid,
/// bilinearly upsampled, min-max scaled into `[t_min, t_max]`.
pub fn synth_haze(img: &Tensor, spec: &HazeSpec, seed: u64) -> Result<HazeOutput> {
    let (h, w) = check_image(img, "synth_haze")?;
    DegradationSpec::haze(spec.clone()).validate()?;
    let mut r = rng::stream(seed, 3);
    let grid: Vec<f64> = (0..16).map(|_| r.random::<f64>()).collect();
    let [a0, a1] = spec.airlight;
    let airlight = if a0 < a1 { r.random_range(a0..a1) } else { a0 };
    let field = upsample_grid(&grid, 4, 4, h, w);
    let lo = field.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = field.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let [t0, t1] = spec.transmission;
    let t: Vec<f64> = field
        .iter()
        .map(|v| {
            let u = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
            t0 + u * (t1 - t0)
        })
        .collect();
    let transmission = Tensor::new(&[h, w], t)?;
    Ok(HazeOutput {
        hazy: apply_haze(img, &transmission, airlight)?,
        transmission,
        airlight,
    })
}

/// A seeded clean image: a colour gradient, a few flat rectangles and
/// smooth low-frequency texture.
pub fn procedural_image(h: usize, w: usize, seed: u64) -> Tensor {
    let mut r = rng::stream(seed, 4);
    let mut data = vec![0.0; 3 * h * w];
    let c0: [f64; 3] = std::array::from_fn(|_| r.random_range(0.1..0.9));
    let c1: [f64; 3] = std::array::from_fn(|_| r.random_range(0.1..0.9));
    let angle = r.random_range(0.0..std::f64::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());
    let norm = (h.max(w) as f64).max(1.0);
    for y in 0..h {
        for x in 0..w {
            let u = (0.5
                + ((x as f64 - w as f64 / 2.0) * ca + (y as f64 - h as f64 / 2.0) * sa) / norm)
                .clamp(0.0, 1.0);
            for c in 0..3 {
                data[(c * h + y) * w + x] = c0[c] * (1.0 - u) + c1[c] * u;
            }
        }
    }
    let rects = r.random_range(2..=5);
    for _ in 0..rects {
        let rh = r.random_range(1..=h.div_ceil(2).max(1));
        let rw = r.random_range(1..=w.div_ceil(2).max(1));
        let y0 = r.random_range(0..=h - rh);
        let x0 = r.random_range(0..=w - rw);
        let col: [f64; 3] = std::array::from_fn(|_| r.random::<f64>());
        for y in y0..y0 + rh {
            for x in x0..x0 + rw {
                for c in 0..3 {
                    data[(c * h + y) * w + x] = col[c];
                }
            }
        }
    }
    let texture: Vec<f64> = (0..64).map(|_| r.random_range(-0.08..0.08)).collect();
    let tex = upsample_grid(&texture, 8, 8, h, w);
    for c in 0..3 {
        for (i, t) in tex.iter().enumerate() {
            let v = &mut data[c * h * w + i];
            *v = (*v + t).clamp(0.0, 1.0);
        }
    }
    Tensor::new(&[3, h, w], data).expect("image size")
}

/// Where clean images come from.
#[derive(Clone, Debug)]
pub enum ImageSource {
    Procedural {
        height: usize,
        width: usize,
    },
    /// Images are used in order and cycled when `count` exceeds their number.
    Images(Vec<Tensor>),
}

impl ImageSource {
    pub fn procedural(height: usize, width: usize) -> Self {
        Self::Procedural { height, width }
    }

    /// Loads every `.ppm` file in `dir`, sorted by file name.
    pub fn directory(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        let entries =
            std::fs::read_dir(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let mut paths: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ppm")))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "no .ppm images in {}",
                dir.display()
            )));
        }
        let images = paths
            .iter()
            .map(crate::io::load_image)
            .collect::<Result<_>>()?;
        Ok(Self::Images(images))
    }

    fn image(&self, index: usize, seed: u64) -> Tensor {
        match self {
            Self::Procedural { height, width } => procedural_image(*height, *width, seed),
            Self::Images(v) => v[index % v.len()].clone(),
        }
    }
}

/// A degraded/clean pair. `task` is metadata for evaluation only.
#[derive(Clone, Debug)]
pub struct Sample {
    pub degraded: Tensor,
    pub clean: Tensor,
    pub task: String,
    pub kind: TaskKind,
    /// Per-pixel σ map for spatially variant noise.
    pub sigma_map: Option<Tensor>,
}

/// Applies one degradation to `clean`.
pub fn degrade(clean: &Tensor, spec: &DegradationSpec, seed: u64) -> Result<Sample> {
    spec.validate()?;
    let mut sigma_map = None;
    let degraded = match spec.kind {
        TaskKind::GaussianNoise => add_gaussian_noise(clean, spec.sigma, seed)?,
        TaskKind::SpatiallyVariantNoise => {
            let out = spatially_variant_noise(clean, &spec.sigma_levels, seed)?;
            sigma_map = Some(out.sigma_map);
            out.noisy
        }
        TaskKind::Rain => synth_rain(clean, &spec.rain, seed)?.rainy,
        TaskKind::Haze => synth_haze(clean, &spec.haze, seed)?.hazy,
    };
    Ok(Sample {
        degraded,
        clean: clean.clone(),
        task: spec.label(),
        kind: spec.kind,
        sigma_map,
    })
}

/// Seed of sample `index` in a dataset built from `seed`.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    rng::derive(seed, &format!("sample/{index}"))
}

/// Round-robin interleave over `mix`: sample `i` uses `mix[i % mix.len()]`.
pub fn make_dataset(
    mix: &[DegradationSpec],
    count: usize,
    source: &ImageSource,
    seed: u64,
) -> Result<Vec<Sample>> {
    if mix.is_empty() {
        return Err(Error::InvalidArgument("degradation mix is empty".into()));
    }
    if count == 0 {
        return Err(Error::InvalidArgument("dataset count must be >= 1".into()));
    }
    mix.iter().try_for_each(DegradationSpec::validate)?;
    (0..count)
        .map(|i| {
            let s = sample_seed(seed, i);
            let clean = source.image(i, rng::derive(s, "clean"));
            degrade(&clean, &mix[i % mix.len()], rng::derive(s, "degrade"))
        })
        .collect()
}
