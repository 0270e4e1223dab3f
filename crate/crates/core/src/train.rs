//! L1 training with Adam, random crops and flips, on seeded synthetic data.
//!
//! Randomness is keyed rather than sequential: the shuffle of epoch `e`
//! comes from stream `e`, and the crop and flips of batch slot `j` at step
//! `s` from stream `s·B + j`. A run resumed from a checkpoint therefore
//! replays exactly what the uninterrupted run would have done.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::degrade::{make_dataset, DegradationSpec, ImageSource, Sample, TaskKind};
use crate::error::{Error, Result};
use crate::io::{self as ckpt_io, Checkpoint};
use crate::metrics::{self, MetricReport};
use crate::network::{ModelConfig, PromptIr};
use crate::rng;
use crate::tensor::{ParamStore, Tape, Tensor};

/// Synthetic training data: which degradations, how many, how large.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub tasks: Vec<DegradationSpec>,
    pub samples_per_task: usize,
    /// Side of the square clean images.
    pub image_size: usize,
    /// Fraction of each task's samples (taken from the end) held out.
    pub holdout_fraction: f64,
}

impl Default for DataConfig {
    /// Noise σ=25, rain and haze; 200 samples per task.
    fn default() -> Self {
        Self {
            tasks: vec![
                DegradationSpec::gaussian(25.0),
                DegradationSpec::of_kind(TaskKind::Rain),
                DegradationSpec::of_kind(TaskKind::Haze),
            ],
            samples_per_task: 200,
            image_size: 48,
            holdout_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub patch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: u64,
    /// Seeds model initialisation, data generation, shuffling and crops.
    pub seed: u64,
    pub augment: bool,
    /// Save a checkpoint every this many steps (0 disables).
    pub checkpoint_every: u64,
    /// Evaluate the held-out split every this many steps (0 disables;
    /// the final step is always evaluated).
    pub eval_every: u64,
    pub data: DataConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            patch_size: 32,
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 2000,
            seed: 0,
            augment: true,
            checkpoint_every: 0,
            eval_every: 500,
            data: DataConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.patch_size < 8 {
            return bad(format!("patch_size must be >= 8, got {}", self.patch_size));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be >= 0, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be > 0, got {}", self.eps));
        }
        let d = &self.data;
        if d.tasks.is_empty() {
            return bad("data.tasks is empty".into());
        }
        d.tasks.iter().try_for_each(DegradationSpec::validate)?;
        if d.image_size < self.patch_size {
            return bad(format!(
                "image_size {} is smaller than patch_size {}",
                d.image_size, self.patch_size
            ));
        }
        if !(0.0..1.0).contains(&d.holdout_fraction) {
            return bad(format!(
                "holdout_fraction must lie in [0, 1), got {}",
                d.holdout_fraction
            ));
        }
        if d.samples_per_task < 2 {
            return bad("samples_per_task must be >= 2".into());
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        TrainConfig::default().adam()
    }
}

/// First and second moments per parameter, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, p)| vec![0.0; p.numel()]).collect();
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of every parameter; gradients are then
/// cleared.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::InvalidArgument(format!(
            "optimizer state covers {} parameters, store has {}",
            state.m.len(),
            store.len()
        )));
    }
    if let Some((name, _)) = store.iter().find(|(_, p)| p.grad().is_none()) {
        return Err(Error::MissingGrad(name.to_string()));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, (_, p)) in store.iter_mut().enumerate() {
        let g = p.grad().expect("checked above").to_vec();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((w, g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(&g)
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *w -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
        p.zero_grad();
    }
    Ok(())
}

/// Top-left corner of a uniformly drawn `patch × patch` window.
pub fn crop_offset<R: Rng + ?Sized>(
    h: usize,
    w: usize,
    patch: usize,
    rng: &mut R,
) -> Result<(usize, usize)> {
    if h < patch || w < patch {
        return Err(Error::shape(
            "random_crop",
            format!("image {h}x{w} is smaller than patch {patch}"),
        ));
    }
    Ok((
        rng.random_range(0..=h - patch),
        rng.random_range(0..=w - patch),
    ))
}

/// `[C, H, W]` window of size `size × size` at `(y, x)`.
pub fn crop(img: &Tensor, y: usize, x: usize, size: usize) -> Result<Tensor> {
    let &[c, h, w] = img.shape() else {
        return Err(Error::shape(
            "crop",
            format!("expected [C, H, W], got {:?}", img.shape()),
        ));
    };
    if y + size > h || x + size > w {
        return Err(Error::shape(
            "crop",
            format!("{size}x{size} window at ({y}, {x}) exceeds {h}x{w}"),
        ));
    }
    let d = img.data();
    let mut out = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for row in y..y + size {
            let start = (ch * h + row) * w + x;
            out.extend_from_slice(&d[start..start + size]);
        }
    }
    Tensor::new(&[c, size, size], out)
}

pub fn center_crop(img: &Tensor, size: usize) -> Result<Tensor> {
    let &[_, h, w] = img.shape() else {
        return Err(Error::shape(
            "center_crop",
            format!("expected [C, H, W], got {:?}", img.shape()),
        ));
    };
    if h < size || w < size {
        return Err(Error::shape(
            "center_crop",
            format!("{h}x{w} is smaller than {size}"),
        ));
    }
    crop(img, (h - size) / 2, (w - size) / 2, size)
}

/// Same random window cut from both images.
pub fn random_crop<R: Rng + ?Sized>(
    degraded: &Tensor,
    clean: &Tensor,
    patch: usize,
    rng: &mut R,
) -> Result<(Tensor, Tensor)> {
    if degraded.shape() != clean.shape() {
        return Err(Error::shape(
            "random_crop",
            format!("{:?} vs {:?}", degraded.shape(), clean.shape()),
        ));
    }
    let s = degraded.shape();
    let (y, x) = crop_offset(s[1], s[2], patch, rng)?;
    Ok((crop(degraded, y, x, patch)?, crop(clean, y, x, patch)?))
}

/// Mirrors a `[C, H, W]` image horizontally and/or vertically.
pub fn flip(img: &Tensor, horizontal: bool, vertical: bool) -> Tensor {
    let s = img.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let d = img.data();
    let mut out = Vec::with_capacity(d.len());
    for ch in 0..c {
        for y in 0..h {
            let sy = if vertical { h - 1 - y } else { y };
            let row = &d[(ch * h + sy) * w..][..w];
            if horizontal {
                out.extend(row.iter().rev());
            } else {
                out.extend_from_slice(row);
            }
        }
    }
    Tensor::new(s, out).expect("same size")
}

/// Draws the (horizontal, vertical) flip flags, each with probability 1/2.
pub fn flip_flags<R: Rng + ?Sized>(rng: &mut R) -> (bool, bool) {
    (rng.random_bool(0.5), rng.random_bool(0.5))
}

/// Applies the same random flips to both images.
pub fn augment_flips<R: Rng + ?Sized>(
    degraded: &Tensor,
    clean: &Tensor,
    rng: &mut R,
) -> (Tensor, Tensor) {
    let (h, v) = flip_flags(rng);
    (flip(degraded, h, v), flip(clean, h, v))
}

/// Generated samples split per task into training and held-out parts.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub train: Vec<Sample>,
    /// Center-cropped to the patch size.
    pub held_out: Vec<Sample>,
}

impl TrainData {
    pub fn generate(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let d = &cfg.data;
        let n_tasks = d.tasks.len();
        let all = make_dataset(
            &d.tasks,
            d.samples_per_task * n_tasks,
            &ImageSource::procedural(d.image_size, d.image_size),
            rng::derive(cfg.seed, "data"),
        )?;
        let held_per_task = ((d.samples_per_task as f64 * d.holdout_fraction).ceil() as usize)
            .min(d.samples_per_task - 1);
        let keep = d.samples_per_task - held_per_task;
        let (mut train, mut held_out) = (Vec::new(), Vec::new());
        for (i, s) in all.into_iter().enumerate() {
            // Round-robin interleave: sample i is the (i / n)-th of its task.
            if i / n_tasks < keep {
                train.push(s);
            } else {
                held_out.push(Sample {
                    degraded: center_crop(&s.degraded, cfg.patch_size)?,
                    clean: center_crop(&s.clean, cfg.patch_size)?,
                    sigma_map: None,
                    ..s
                });
            }
        }
        Ok(Self { train, held_out })
    }

    pub fn steps_per_epoch(&self, batch: usize) -> u64 {
        (self.train.len() / batch).max(1) as u64
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub loss: f64,
    /// Held-out restored PSNR per task, on evaluation steps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_psnr: Option<BTreeMap<String, f64>>,
}

/// Training loop state: model, optimizer and step counter.
pub struct Trainer {
    cfg: TrainConfig,
    model: PromptIr,
    adam: AdamState,
    step: u64,
    data: TrainData,
    epoch_order: Option<(u64, Vec<usize>)>,
}

impl Trainer {
    /// Fresh model initialised from `cfg.seed`.
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig) -> Result<Self> {
        let model = PromptIr::new(model_cfg, cfg.seed)?;
        let adam = AdamState::new(model.params());
        Self::from_parts(model, adam, 0, cfg)
    }

    pub fn from_parts(
        model: PromptIr,
        adam: AdamState,
        step: u64,
        cfg: TrainConfig,
    ) -> Result<Self> {
        let data = TrainData::generate(&cfg)?;
        Ok(Self {
            cfg,
            model,
            adam,
            step,
            data,
            epoch_order: None,
        })
    }

    /// Continues the run recorded in `ckpt`.
    pub fn resume(ckpt: Checkpoint) -> Result<Self> {
        let Checkpoint {
            model,
            adam,
            step,
            train_config,
        } = ckpt;
        Self::from_parts(model, adam, step, train_config)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            adam: self.adam.clone(),
            step: self.step,
            train_config: self.cfg.clone(),
        }
    }

    pub fn model(&self) -> &PromptIr {
        &self.model
    }

    pub fn into_model(self) -> PromptIr {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn data(&self) -> &TrainData {
        &self.data
    }

    fn epoch_order(&mut self, epoch: u64) -> &[usize] {
        if self.epoch_order.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut order: Vec<usize> = (0..self.data.train.len()).collect();
            order.shuffle(&mut rng::stream(
                rng::derive(self.cfg.seed, "shuffle"),
                epoch,
            ));
            self.epoch_order = Some((epoch, order));
        }
        &self.epoch_order.as_ref().unwrap().1
    }

    /// Degraded and clean `[B, 3, P, P]` batches for `step`.
    pub fn batch(&mut self, step: u64) -> Result<(Tensor, Tensor)> {
        let b = self.cfg.batch_size;
        let spe = self.data.steps_per_epoch(b);
        let pos = (step % spe) as usize;
        let order = self.epoch_order(step / spe);
        let n = order.len();
        let picks: Vec<usize> = (0..b).map(|j| order[(pos * b + j) % n]).collect();
        let p = self.cfg.patch_size;
        let aug_seed = rng::derive(self.cfg.seed, "augment");
        let (mut xs, mut ys) = (
            Vec::with_capacity(b * 3 * p * p),
            Vec::with_capacity(b * 3 * p * p),
        );
        for (j, &i) in picks.iter().enumerate() {
            let s = &self.data.train[i];
            let mut r = rng::stream(aug_seed, step * b as u64 + j as u64);
            let (mut x, mut y) = random_crop(&s.degraded, &s.clean, p, &mut r)?;
            if self.cfg.augment {
                (x, y) = augment_flips(&x, &y, &mut r);
            }
            xs.extend_from_slice(x.data());
            ys.extend_from_slice(y.data());
        }
        Ok((
            Tensor::new(&[b, 3, p, p], xs)?,
            Tensor::new(&[b, 3, p, p], ys)?,
        ))
    }

    /// Runs one optimizer step and returns its loss.
    pub fn train_step(&mut self) -> Result<f64> {
        let (x, y) = self.batch(self.step)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let yv = tape.constant(y);
        let out = self.model.forward(&mut tape, xv)?;
        let loss = tape.l1_loss(out.restored, yv)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Divergence {
                step: self.step,
                value,
            });
        }
        tape.backward_into(loss, self.model.params_mut())?;
        adam_step(self.model.params_mut(), &mut self.adam, &self.cfg.adam())?;
        self.step += 1;
        Ok(value)
    }

    pub fn evaluate_held_out(&self) -> Result<MetricReport> {
        metrics::evaluate(&self.model, &self.data.held_out)
    }

    /// Trains until `cfg.steps`, calling `on_record` after every step. Held
    /// out PSNR is attached every `eval_every` steps and at the end.
    pub fn run(
        &mut self,
        mut on_record: impl FnMut(&Self, &LogRecord) -> Result<()>,
    ) -> Result<()> {
        while self.step < self.cfg.steps {
            let loss = self.train_step()?;
            let every = self.cfg.eval_every;
            let eval_now = self.step == self.cfg.steps || (every > 0 && self.step.is_multiple_of(every));
            let eval_psnr = if eval_now {
                let rep = self.evaluate_held_out()?;
                Some(
                    rep.per_task
                        .iter()
                        .map(|(k, m)| (k.clone(), m.psnr_db))
                        .collect(),
                )
            } else {
                None
            };
            let rec = LogRecord {
                step: self.step,
                loss,
                eval_psnr,
            };
            on_record(self, &rec)?;
        }
        Ok(())
    }

    /// Trains to completion, writing `metrics.jsonl`, periodic
    /// `step_XXXXXX` checkpoints and a `final` checkpoint under `out_dir`.
    pub fn run_to_dir(
        &mut self,
        out_dir: &Path,
        mut on_record: impl FnMut(&LogRecord) -> Result<()>,
    ) -> Result<()> {
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
        let log_path = out_dir.join("metrics.jsonl");
        let file = File::options()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(log_path.display().to_string(), e))?;
        let mut log = BufWriter::new(file);
        let every = self.cfg.checkpoint_every;
        self.run(|t, rec| {
            serde_json::to_writer(&mut log, rec)?;
            writeln!(log).map_err(|e| Error::io("metrics log", e))?;
            if every > 0 && rec.step % every == 0 {
                let dir = out_dir.join(format!("step_{:06}", rec.step));
                ckpt_io::save_checkpoint(&t.checkpoint(), &dir)?;
            }
            on_record(rec)
        })?;
        log.flush().map_err(|e| Error::io("metrics log", e))?;
        ckpt_io::save_checkpoint(&self.checkpoint(), out_dir.join("final"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            patch_size: 16,
            steps: 3,
            eval_every: 0,
            data: DataConfig {
                samples_per_task: 4,
                image_size: 20,
                ..DataConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store
            .insert("w", Tensor::new(&[2], vec![1.0, -1.0]).unwrap())
            .unwrap();
        let mut st = AdamState::new(&store);
        store.get_mut(id).accumulate_grad(&[0.5, -3.0]);
        let cfg = AdamConfig::default();
        adam_step(&mut store, &mut st, &cfg).unwrap();
        let w = store.get(id).data();
        assert!((w[0] - (1.0 - cfg.lr)).abs() < 1e-10);
        assert!((w[1] - (-1.0 + cfg.lr)).abs() < 1e-10);
        assert!(store.get(id).grad().is_none());
        assert!(matches!(
            adam_step(&mut store, &mut st, &cfg),
            Err(Error::MissingGrad(_))
        ));
    }

    #[test]
    fn adam_zero_grad_leaves_params() {
        let mut store = ParamStore::new();
        let id = store
            .insert("w", Tensor::new(&[3], vec![0.3, 0.1, -2.0]).unwrap())
            .unwrap();
        let before = store.get(id).clone();
        let mut st = AdamState::new(&store);
        for _ in 0..3 {
            store.get_mut(id).accumulate_grad(&[0.0; 3]);
            adam_step(&mut store, &mut st, &AdamConfig::default()).unwrap();
        }
        assert_eq!(store.get(id).data(), before.data());
    }

    #[test]
    fn adam_quadratic_matches_scalar_reference() {
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::scalar(1.0)).unwrap();
        let mut st = AdamState::new(&store);
        let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=3 {
            let g = 2.0 * w;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w -= 0.1 * mh / (vh.sqrt() + 1e-8);
            let cur = store.get(id).data()[0];
            store.get_mut(id).accumulate_grad(&[2.0 * cur]);
            adam_step(&mut store, &mut st, &cfg).unwrap();
            assert!((store.get(id).data()[0] - w).abs() < 1e-12);
        }
    }

    #[test]
    fn crop_identity_alignment_and_errors() {
        let a = crate::degrade::procedural_image(10, 10, 1);
        let b = crate::degrade::procedural_image(10, 10, 2);
        let mut r = rng::stream(1, 0);
        let (ca, _) = random_crop(&a, &b, 10, &mut r).unwrap();
        assert_eq!(ca, a);
        let diff = Tensor::new(
            &[3, 10, 10],
            a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect(),
        )
        .unwrap();
        let mut r1 = rng::stream(5, 5);
        let mut r2 = rng::stream(5, 5);
        let (pa, pb) = random_crop(&a, &b, 4, &mut r1).unwrap();
        let (pd, _) = random_crop(&diff, &b, 4, &mut r2).unwrap();
        let manual: Vec<f64> = pa
            .data()
            .iter()
            .zip(pb.data())
            .map(|(x, y)| x - y)
            .collect();
        assert_eq!(pd.data(), manual.as_slice());
        assert!(random_crop(&a, &b, 11, &mut r).is_err());
    }

    #[test]
    fn crop_offsets_cover_every_position() {
        let mut r = rng::stream(3, 0);
        let mut seen = [[false; 9]; 9];
        for _ in 0..10_000 {
            let (y, x) = crop_offset(16, 16, 8, &mut r).unwrap();
            seen[y][x] = true;
        }
        assert!(seen.iter().flatten().all(|s| *s));
    }

    #[test]
    fn flips_are_involutions_and_keep_histogram() {
        let a = crate::degrade::procedural_image(6, 7, 4);
        for (h, v) in [(true, false), (false, true), (true, true)] {
            let f = flip(&a, h, v);
            assert_eq!(flip(&f, h, v), a);
            let mut x = a.data().to_vec();
            let mut y = f.data().to_vec();
            x.sort_by(f64::total_cmp);
            y.sort_by(f64::total_cmp);
            assert_eq!(x, y);
        }
        let flags = |seed| {
            let mut r = rng::stream(seed, 0);
            (0..16).map(|_| flip_flags(&mut r)).collect::<Vec<_>>()
        };
        assert_eq!(flags(7), flags(7));
    }

    #[test]
    fn held_out_split_is_last_tenth_per_task() {
        let cfg = TrainConfig {
            data: DataConfig {
                samples_per_task: 20,
                image_size: 16,
                ..DataConfig::default()
            },
            patch_size: 8,
            ..TrainConfig::default()
        };
        let d = TrainData::generate(&cfg).unwrap();
        assert_eq!(d.train.len(), 54);
        assert_eq!(d.held_out.len(), 6);
        assert!(d.held_out.iter().all(|s| s.degraded.shape() == [3, 8, 8]));
    }

    #[test]
    fn zero_lr_keeps_initial_parameters() {
        let cfg = TrainConfig {
            lr: 0.0,
            ..tiny_cfg()
        };
        let mut t = Trainer::new(ModelConfig::default(), cfg).unwrap();
        let before = t.model().params().clone();
        t.run(|_, _| Ok(())).unwrap();
        assert_eq!(t.step(), 3);
        for ((_, a), (_, b)) in before.iter().zip(t.model().params().iter()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn resumed_run_matches_straight_run() {
        let cfg = TrainConfig {
            steps: 4,
            lr: 1e-3,
            ..tiny_cfg()
        };
        let mut straight = Trainer::new(ModelConfig::default(), cfg.clone()).unwrap();
        straight.run(|_, _| Ok(())).unwrap();

        let mut first = Trainer::new(
            ModelConfig::default(),
            TrainConfig {
                steps: 2,
                ..cfg.clone()
            },
        )
        .unwrap();
        first.run(|_, _| Ok(())).unwrap();
        let mut ckpt = first.checkpoint();
        ckpt.train_config.steps = 4;
        let mut second = Trainer::resume(ckpt).unwrap();
        second.run(|_, _| Ok(())).unwrap();

        assert_eq!(second.adam, straight.adam);
        for ((_, a), (_, b)) in straight
            .model()
            .params()
            .iter()
            .zip(second.model().params().iter())
        {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn batches_depend_only_on_step() {
        let mut a = Trainer::new(ModelConfig::default(), tiny_cfg()).unwrap();
        let mut b = Trainer::new(ModelConfig::default(), tiny_cfg()).unwrap();
        let late = b.batch(40).unwrap();
        let _ = a.batch(0).unwrap();
        assert_eq!(a.batch(40).unwrap(), late);
    }

    #[test]
    fn invalid_configs_are_named() {
        let err = TrainConfig {
            patch_size: 4,
            ..TrainConfig::default()
        }
        .validate()
        .unwrap_err();
        assert!(err.to_string().contains("patch_size"));
        let err = TrainConfig {
            beta2: 1.0,
            ..TrainConfig::default()
        }
        .validate()
        .unwrap_err();
        assert!(err.to_string().contains("beta2"));
    }
}
