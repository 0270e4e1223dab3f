//! Command-line front end: `degrade`, `train`, `infer`, `eval`,
//! `dump-prompts` and `sweep`.
//!
//! Training settings come from defaults, then an optional `key=value` file,
//! then `--set key=value` and dedicated flags. Every subcommand prints its
//! resolved settings in the same `key=value` form before running, so the
//! echoed block can be saved and passed back with `--config`.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime or data error.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::degrade::{
    add_gaussian_noise, make_dataset, spatially_variant_noise, DegradationSpec, HazeSpec,
    ImageSource, RainSpec, Sample, TaskKind,
};
use crate::error::{Error, Result};
use crate::io;
use crate::metrics::{self, MetricReport};
use crate::network::ModelConfig;
use crate::rng;
use crate::train::{TrainConfig, Trainer};

/// Model and training settings resolved from defaults, file and flags.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Every key accepted in config files and by `--set`.
pub const CONFIG_KEYS: [&str; 26] = [
    "base_channels",
    "blocks_per_level",
    "heads_per_level",
    "refinement_blocks",
    "num_prompt_components",
    "prompt_levels",
    "pgm_mode",
    "prompt_canvas",
    "expansion",
    "interaction_heads",
    "normalize_qk",
    "batch_size",
    "patch_size",
    "lr",
    "beta1",
    "beta2",
    "eps",
    "steps",
    "seed",
    "augment",
    "checkpoint_every",
    "eval_every",
    "tasks",
    "samples_per_task",
    "image_size",
    "holdout_fraction",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.trim().is_empty() || value.trim() == "none" {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v)).collect()
}

fn parse_array4(key: &str, value: &str) -> Result<[usize; 4]> {
    let v: Vec<usize> = parse_list(key, value)?;
    v.try_into()
        .map_err(|v: Vec<usize>| Error::Config(format!("`{key}` needs 4 values, got {}", v.len())))
}

fn join<T: ToString>(items: impl IntoIterator<Item = T>) -> String {
    items
        .into_iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Parses a task token: `gaussian:25`, `spatially_variant:0/15/25/50`,
/// `rain` or `haze`. A bare `gaussian` uses σ=25.
pub fn parse_task(token: &str) -> Result<DegradationSpec> {
    let (kind, arg) = match token.trim().split_once(':') {
        Some((k, a)) => (k, Some(a)),
        None => (token.trim(), None),
    };
    let kind: TaskKind = kind.parse()?;
    let spec = match (kind, arg) {
        (TaskKind::GaussianNoise, Some(a)) => DegradationSpec::gaussian(parse("tasks", a)?),
        (TaskKind::SpatiallyVariantNoise, Some(a)) => DegradationSpec::spatially_variant(
            a.split('/')
                .map(|s| parse("tasks", s))
                .collect::<Result<_>>()?,
        ),
        (_, Some(_)) => {
            return Err(Error::Config(format!("task `{token}` takes no parameter")));
        }
        (k, None) => DegradationSpec::of_kind(k),
    };
    spec.validate()?;
    Ok(spec)
}

/// Inverse of [`parse_task`].
pub fn task_token(spec: &DegradationSpec) -> String {
    match spec.kind {
        TaskKind::GaussianNoise => format!("gaussian:{}", spec.sigma),
        TaskKind::SpatiallyVariantNoise => format!(
            "spatially_variant:{}",
            spec.sigma_levels
                .iter()
                .map(f64::to_string)
                .collect::<Vec<_>>()
                .join("/")
        ),
        k => k.to_string(),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (m, t) = (&mut self.model, &mut self.train);
        match key {
            "base_channels" => m.base_channels = parse(key, value)?,
            "blocks_per_level" => m.blocks_per_level = parse_array4(key, value)?,
            "heads_per_level" => m.heads_per_level = parse_array4(key, value)?,
            "refinement_blocks" => m.refinement_blocks = parse(key, value)?,
            "num_prompt_components" => m.num_prompt_components = parse(key, value)?,
            "prompt_levels" => m.prompt_levels = parse_list(key, value)?.into_iter().collect(),
            "pgm_mode" => m.pgm_mode = value.trim().parse()?,
            "prompt_canvas" => m.prompt_canvas = parse(key, value)?,
            "expansion" => m.expansion = parse(key, value)?,
            "interaction_heads" => m.interaction_heads = parse(key, value)?,
            "normalize_qk" => m.normalize_qk = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "patch_size" => t.patch_size = parse(key, value)?,
            "lr" => t.lr = parse(key, value)?,
            "beta1" => t.beta1 = parse(key, value)?,
            "beta2" => t.beta2 = parse(key, value)?,
            "eps" => t.eps = parse(key, value)?,
            "steps" => t.steps = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "augment" => t.augment = parse(key, value)?,
            "checkpoint_every" => t.checkpoint_every = parse(key, value)?,
            "eval_every" => t.eval_every = parse(key, value)?,
            "tasks" => {
                t.data.tasks = value.split(',').map(parse_task).collect::<Result<_>>()?;
            }
            "samples_per_task" => t.data.samples_per_task = parse(key, value)?,
            "image_size" => t.data.image_size = parse(key, value)?,
            "holdout_fraction" => t.data.holdout_fraction = parse(key, value)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown key `{other}` (known: {})",
                    CONFIG_KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got `{line}`", n + 1))
            })?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn value_of(&self, key: &str) -> Option<String> {
        let (m, t) = (&self.model, &self.train);
        Some(match key {
            "base_channels" => m.base_channels.to_string(),
            "blocks_per_level" => join(m.blocks_per_level),
            "heads_per_level" => join(m.heads_per_level),
            "refinement_blocks" => m.refinement_blocks.to_string(),
            "num_prompt_components" => m.num_prompt_components.to_string(),
            "prompt_levels" if m.prompt_levels.is_empty() => "none".into(),
            "prompt_levels" => join(&m.prompt_levels),
            "pgm_mode" => m.pgm_mode.to_string(),
            "prompt_canvas" => m.prompt_canvas.to_string(),
            "expansion" => m.expansion.to_string(),
            "interaction_heads" => m.interaction_heads.to_string(),
            "normalize_qk" => m.normalize_qk.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "patch_size" => t.patch_size.to_string(),
            "lr" => t.lr.to_string(),
            "beta1" => t.beta1.to_string(),
            "beta2" => t.beta2.to_string(),
            "eps" => t.eps.to_string(),
            "steps" => t.steps.to_string(),
            "seed" => t.seed.to_string(),
            "augment" => t.augment.to_string(),
            "checkpoint_every" => t.checkpoint_every.to_string(),
            "eval_every" => t.eval_every.to_string(),
            "tasks" => join(t.data.tasks.iter().map(task_token)),
            "samples_per_task" => t.data.samples_per_task.to_string(),
            "image_size" => t.data.image_size.to_string(),
            "holdout_fraction" => t.data.holdout_fraction.to_string(),
            _ => return None,
        })
    }

    /// All settings as `key=value` lines, readable by [`Self::apply_text`].
    pub fn to_text(&self) -> String {
        CONFIG_KEYS
            .iter()
            .map(|k| format!("{k}={}\n", self.value_of(k).expect("known key")))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SweepAxis {
    #[value(alias = "pgm_mode")]
    PgmMode,
    #[value(alias = "prompt_levels")]
    PromptLevels,
    #[value(alias = "task_mix")]
    TaskMix,
}

/// One training run of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRun {
    pub name: String,
    pub config: RunConfig,
}

/// The runs of `axis`, each a copy of `base` with one setting changed.
pub fn sweep_plan(axis: SweepAxis, base: &RunConfig) -> Vec<SweepRun> {
    let with = |name: String, f: &dyn Fn(&mut RunConfig)| {
        let mut config = base.clone();
        f(&mut config);
        SweepRun { name, config }
    };
    match axis {
        SweepAxis::PgmMode => ["fixed", "dynamic"]
            .into_iter()
            .map(|m| with(m.into(), &|c| c.model.pgm_mode = m.parse().expect("mode")))
            .collect(),
        SweepAxis::PromptLevels => [vec![4], vec![4, 3], vec![4, 3, 2]]
            .into_iter()
            .map(|levels| {
                let name = format!("levels_{}", join(&levels).replace(',', "+"));
                with(name, &|c| {
                    c.model.prompt_levels = levels.iter().copied().collect()
                })
            })
            .collect(),
        SweepAxis::TaskMix => {
            let tasks = &base.train.data.tasks;
            let mut subsets: Vec<Vec<usize>> = (1u32..1 << tasks.len())
                .map(|mask| (0..tasks.len()).filter(|i| mask >> i & 1 == 1).collect())
                .collect();
            subsets.sort_by_key(|s| (s.len(), s.clone()));
            subsets
                .into_iter()
                .map(|s| {
                    let picked: Vec<DegradationSpec> =
                        s.iter().map(|&i| tasks[i].clone()).collect();
                    let name = picked
                        .iter()
                        .map(DegradationSpec::label)
                        .collect::<Vec<_>>()
                        .join("+");
                    with(name, &|c| c.train.data.tasks = picked.clone())
                })
                .collect()
        }
    }
}

/// Side-by-side `PSNR/SSIM` table: one row per run, one column per task.
pub fn sweep_table(results: &[(String, MetricReport)]) -> String {
    let tasks: BTreeSet<&String> = results
        .iter()
        .flat_map(|(_, r)| r.per_task.keys())
        .collect();
    let mut s = format!("{:<24}", "run");
    for t in &tasks {
        let _ = write!(s, " {t:>14}");
    }
    let _ = writeln!(s, " {:>14}", "average");
    for (name, r) in results {
        let _ = write!(s, "{name:<24}");
        for t in &tasks {
            let cell = r.per_task.get(*t).map_or("-".to_string(), |m| m.cell());
            let _ = write!(s, " {cell:>14}");
        }
        let _ = writeln!(s, " {:>14}", r.overall.cell());
    }
    s
}

#[derive(Debug, Parser)]
#[command(
    name = "promptir",
    version,
    about = "All-in-one image restoration with learned prompts"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate degraded/clean image pairs with a manifest.
    Degrade(DegradeArgs),
    /// Train a model and write checkpoints plus a metrics log.
    Train(TrainArgs),
    /// Restore images with a trained checkpoint.
    Infer(InferArgs),
    /// Score a checkpoint on a test set.
    Eval(EvalArgs),
    /// Write per-image prompt weights as CSV.
    DumpPrompts(DumpArgs),
    /// Train one model per value of an ablation axis and tabulate them.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct DegradeArgs {
    /// Degradation kinds, mixed round-robin.
    #[arg(long, value_delimiter = ',', default_value = "gaussian,rain,haze")]
    pub task: Vec<TaskKind>,
    #[arg(long, default_value_t = 25.0, allow_negative_numbers = true)]
    pub sigma: f64,
    /// Per-quadrant σ values for spatially variant noise.
    #[arg(long, value_delimiter = ',', default_value = "0,15,25,50")]
    pub sigma_levels: Vec<f64>,
    #[arg(long)]
    pub rain_streaks: Option<usize>,
    #[arg(long)]
    pub rain_length: Option<f64>,
    #[arg(long)]
    pub rain_width: Option<f64>,
    #[arg(long)]
    pub rain_intensity: Option<f64>,
    #[arg(long)]
    pub haze_airlight_min: Option<f64>,
    #[arg(long)]
    pub haze_airlight_max: Option<f64>,
    #[arg(long)]
    pub haze_t_min: Option<f64>,
    #[arg(long)]
    pub haze_t_max: Option<f64>,
    #[arg(long, default_value_t = 30)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Side of procedural clean images.
    #[arg(long, default_value_t = 48)]
    pub size: usize,
    /// Directory of clean `.ppm` images to use instead of procedural ones.
    #[arg(long)]
    pub source: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// File of `key=value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides one setting; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Train on the default noise, rain and haze mix.
    #[arg(long, conflicts_with = "task")]
    pub all_in_one: bool,
    /// Train on a single degradation kind.
    #[arg(long)]
    pub task: Option<TaskKind>,
    /// σ of Gaussian noise when `--task gaussian`.
    #[arg(long, requires = "task", allow_negative_numbers = true)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Images or directories of `.ppm` images.
    #[arg(long = "in", required = true, num_args = 1..)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// A `degrade` output directory, or a directory of clean `.ppm` images
    /// when `--sigma` or `--spatially-variant` is given.
    #[arg(long)]
    pub testset: PathBuf,
    /// Re-degrade the clean images with quadrant-wise noise levels.
    #[arg(long, conflicts_with = "sigma")]
    pub spatially_variant: bool,
    #[arg(long, value_delimiter = ',', default_value = "0,15,25,50")]
    pub sigma_levels: Vec<f64>,
    /// Re-degrade the clean images with Gaussian noise of this σ.
    #[arg(long, allow_negative_numbers = true)]
    pub sigma: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct DumpArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub testset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_enum)]
    pub axis: SweepAxis,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// List the runs without training.
    #[arg(long)]
    pub dry_run: bool,
    #[arg(long)]
    pub out: PathBuf,
}

/// Failure of a CLI invocation, split by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(Error),
    #[error("{0}")]
    Runtime(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

fn usage<T>(r: Result<T>) -> Result<T, CliError> {
    r.map_err(CliError::Usage)
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            let text =
                fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
            cfg.apply_text(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        }
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(s) = self.steps {
            cfg.train.steps = s;
        }
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        Ok(cfg)
    }
}

fn echo(out: &mut dyn Write, title: &str, body: &str) -> Result<()> {
    write!(out, "# resolved {title}\n{body}# end\n").map_err(|e| Error::io("stdout", e))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path.display().to_string(), e))
}

fn say(out: &mut dyn Write, line: impl std::fmt::Display) -> Result<()> {
    writeln!(out, "{line}").map_err(|e| Error::io("stdout", e))
}

/// Parses `args` (program name first) and runs the subcommand, writing
/// progress to `out`. Returns the process exit code.
pub fn run_with_args<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Degrade(a) => degrade_cmd(&a, out),
        Command::Train(a) => train_cmd(&a, out),
        Command::Infer(a) => infer_cmd(&a, out),
        Command::Eval(a) => eval_cmd(&a, out),
        Command::DumpPrompts(a) => dump_cmd(&a, out),
        Command::Sweep(a) => sweep_cmd(&a, out),
    }
}

impl DegradeArgs {
    /// One spec per `--task`, with the flag values applied.
    pub fn specs(&self) -> Result<Vec<DegradationSpec>> {
        let d = RainSpec::default();
        let rain = RainSpec {
            num_streaks: self.rain_streaks.unwrap_or(d.num_streaks),
            length: self.rain_length.unwrap_or(d.length),
            width: self.rain_width.unwrap_or(d.width),
            intensity: self.rain_intensity.unwrap_or(d.intensity),
            ..d
        };
        let h = HazeSpec::default();
        let haze = HazeSpec {
            airlight: [
                self.haze_airlight_min.unwrap_or(h.airlight[0]),
                self.haze_airlight_max.unwrap_or(h.airlight[1]),
            ],
            transmission: [
                self.haze_t_min.unwrap_or(h.transmission[0]),
                self.haze_t_max.unwrap_or(h.transmission[1]),
            ],
        };
        if self.task.is_empty() {
            return Err(Error::Config("--task needs at least one kind".into()));
        }
        self.task
            .iter()
            .map(|&kind| {
                let spec = DegradationSpec {
                    sigma: self.sigma,
                    sigma_levels: self.sigma_levels.clone(),
                    rain: rain.clone(),
                    haze: haze.clone(),
                    ..DegradationSpec::of_kind(kind)
                };
                spec.validate()?;
                Ok(spec)
            })
            .collect()
    }
}

fn degrade_cmd(a: &DegradeArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let specs = usage(a.specs())?;
    if a.count == 0 {
        return Err(CliError::Usage(Error::Config(
            "--count must be >= 1".into(),
        )));
    }
    let mut body = format!(
        "tasks={}\n",
        join(
            specs
                .iter()
                .map(|s| serde_json::to_string(s).expect("spec"))
        )
    );
    let _ = writeln!(body, "count={}\nseed={}", a.count, a.seed);
    match &a.source {
        Some(dir) => {
            let _ = writeln!(body, "source={}", dir.display());
        }
        None => {
            let _ = writeln!(body, "size={}", a.size);
        }
    }
    let _ = writeln!(body, "out={}", a.out.display());
    echo(out, "degrade", &body)?;
    let source = match &a.source {
        Some(dir) => ImageSource::directory(dir)?,
        None => ImageSource::procedural(a.size, a.size),
    };
    let samples = make_dataset(&specs, a.count, &source, a.seed)?;
    let manifest = io::save_dataset(&samples, &specs, a.seed, &a.out)?;
    let mut counts = std::collections::BTreeMap::<&str, usize>::new();
    for e in &manifest.samples {
        *counts.entry(e.task.as_str()).or_default() += 1;
    }
    for (task, n) in counts {
        say(out, format!("{task}: {n}"))?;
    }
    Ok(())
}

impl TrainArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = self.config.resolve()?;
        if self.all_in_one {
            cfg.train.data.tasks = crate::train::DataConfig::default().tasks;
        }
        if let Some(kind) = self.task {
            let mut spec = DegradationSpec::of_kind(kind);
            if let Some(s) = self.sigma {
                spec.sigma = s;
            }
            cfg.train.data.tasks = vec![spec];
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Trains `cfg` into `dir` (config, metrics log, checkpoints) and returns
/// the held-out report of the final model.
pub fn train_into(cfg: &RunConfig, dir: &Path, out: &mut dyn Write) -> Result<MetricReport> {
    write_file(&dir.join("config.txt"), &cfg.to_text())?;
    let mut trainer = Trainer::new(cfg.model.clone(), cfg.train.clone())?;
    say(
        out,
        format!(
            "{} parameters, {} training / {} held-out samples",
            trainer.model().count_parameters(),
            trainer.data().train.len(),
            trainer.data().held_out.len()
        ),
    )?;
    let mut running = (0.0, 0u64);
    trainer.run_to_dir(dir, |rec| {
        running.0 += rec.loss;
        running.1 += 1;
        if let Some(eval) = &rec.eval_psnr {
            let cells: Vec<String> = eval.iter().map(|(k, v)| format!("{k}={v:.2}")).collect();
            say(
                out,
                format!(
                    "step {:>6}  loss {:.5}  held-out psnr {}",
                    rec.step,
                    running.0 / running.1 as f64,
                    cells.join(" ")
                ),
            )?;
            running = (0.0, 0);
        }
        Ok(())
    })?;
    let report = trainer.evaluate_held_out()?;
    write_file(&dir.join("report.txt"), &report.to_table())?;
    Ok(report)
}

fn train_cmd(a: &TrainArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = usage(a.resolve())?;
    echo(out, "config", &cfg.to_text())?;
    let report = train_into(&cfg, &a.out, out)?;
    say(out, report.to_table())?;
    Ok(())
}

fn collect_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| Error::io(p.display().to_string(), e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x.eq_ignore_ascii_case("ppm")))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    if files.is_empty() {
        return Err(Error::InvalidArgument("no input images".into()));
    }
    Ok(files)
}

fn infer_cmd(a: &InferArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let body = format!(
        "ckpt={}\nin={}\nout={}\n",
        a.ckpt.display(),
        join(a.inputs.iter().map(|p| p.display())),
        a.out.display()
    );
    echo(out, "infer", &body)?;
    let model = io::load_checkpoint(&a.ckpt)?.model;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(a.out.display().to_string(), e))?;
    for path in collect_inputs(&a.inputs)? {
        let img = io::load_image(&path)?;
        let [h, w] = [img.shape()[1], img.shape()[2]];
        let restored = model
            .restore(&img.reshape(&[1, 3, h, w])?)?
            .reshape(&[3, h, w])?;
        let name = path
            .file_name()
            .ok_or_else(|| Error::InvalidArgument(format!("{}", path.display())))?;
        let target = a.out.join(name);
        io::save_image(&restored, &target)?;
        say(out, format!("{} -> {}", path.display(), target.display()))?;
    }
    Ok(())
}

/// Test samples for `eval`: stored pairs, or clean images re-degraded by
/// the requested probe.
pub fn eval_samples(a: &EvalArgs) -> Result<Vec<Sample>> {
    let probe = if a.spatially_variant {
        Some(DegradationSpec::spatially_variant(a.sigma_levels.clone()))
    } else {
        a.sigma.map(DegradationSpec::gaussian)
    };
    let stored = a.testset.join(io::MANIFEST_FILE).exists();
    let samples = match (stored, probe) {
        (true, None) => io::load_dataset(&a.testset)?.1,
        (true, Some(spec)) => {
            let clean: Vec<_> = io::load_dataset(&a.testset)?
                .1
                .into_iter()
                .map(|s| s.clean)
                .collect();
            redegrade(&clean, &spec, a.seed)?
        }
        (false, Some(spec)) => match ImageSource::directory(&a.testset)? {
            ImageSource::Images(clean) => redegrade(&clean, &spec, a.seed)?,
            ImageSource::Procedural { .. } => unreachable!("directory source"),
        },
        (false, None) => {
            return Err(Error::InvalidArgument(format!(
                "{} has no manifest; pass --sigma or --spatially-variant to degrade its images",
                a.testset.display()
            )))
        }
    };
    if samples.is_empty() {
        return Err(Error::InvalidArgument("test set is empty".into()));
    }
    Ok(samples)
}

fn redegrade(
    clean: &[crate::tensor::Tensor],
    spec: &DegradationSpec,
    seed: u64,
) -> Result<Vec<Sample>> {
    spec.validate()?;
    clean
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let s = rng::derive(seed, &format!("eval/{i}"));
            let (degraded, sigma_map) = match spec.kind {
                TaskKind::SpatiallyVariantNoise => {
                    let n = spatially_variant_noise(c, &spec.sigma_levels, s)?;
                    (n.noisy, Some(n.sigma_map))
                }
                _ => (add_gaussian_noise(c, spec.sigma, s)?, None),
            };
            Ok(Sample {
                degraded,
                clean: c.clone(),
                task: spec.label(),
                kind: spec.kind,
                sigma_map,
            })
        })
        .collect()
}

/// Per-σ audit of spatially variant samples: pixel count and measured noise
/// standard deviation (in 8-bit units) of each σ present in the maps.
pub fn sigma_audit(samples: &[Sample]) -> Vec<(f64, usize, f64)> {
    let mut acc: std::collections::BTreeMap<u64, (usize, f64)> = Default::default();
    for s in samples {
        let Some(map) = &s.sigma_map else { continue };
        let hw = map.numel();
        for (i, (d, c)) in s.degraded.data().iter().zip(s.clean.data()).enumerate() {
            let e = acc.entry(map.data()[i % hw].to_bits()).or_default();
            e.0 += 1;
            e.1 += (d - c) * (d - c);
        }
    }
    acc.into_iter()
        .map(|(bits, (n, ss))| (f64::from_bits(bits), n, 255.0 * (ss / n as f64).sqrt()))
        .collect()
}

/// Metric table, plus the σ-map audit when the samples carry maps.
pub fn eval_report(report: &MetricReport, samples: &[Sample]) -> String {
    let mut s = report.to_table();
    let audit = sigma_audit(samples);
    if !audit.is_empty() {
        let maps = samples.iter().filter(|s| s.sigma_map.is_some()).count();
        let _ = writeln!(s, "\nsigma map audit ({maps} maps)");
        let _ = writeln!(s, "{:>8} {:>10} {:>14}", "sigma", "pixels", "measured");
        for (sigma, n, measured) in audit {
            let _ = writeln!(s, "{sigma:>8} {n:>10} {measured:>14.2}");
        }
    }
    s
}

fn eval_cmd(a: &EvalArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut body = format!(
        "ckpt={}\ntestset={}\n",
        a.ckpt.display(),
        a.testset.display()
    );
    if a.spatially_variant {
        let _ = writeln!(
            body,
            "spatially_variant=true\nsigma_levels={}",
            join(&a.sigma_levels)
        );
    }
    if let Some(s) = a.sigma {
        let _ = writeln!(body, "sigma={s}");
    }
    let _ = writeln!(body, "seed={}\nreport={}", a.seed, a.report.display());
    echo(out, "eval", &body)?;
    if let Some(s) = a.sigma {
        usage(DegradationSpec::gaussian(s).validate())?;
    }
    let model = io::load_checkpoint(&a.ckpt)?.model;
    let samples = eval_samples(a)?;
    let report = metrics::evaluate(&model, &samples)?;
    let text = eval_report(&report, &samples);
    write_file(&a.report, &text)?;
    say(out, text)?;
    Ok(())
}

fn dump_cmd(a: &DumpArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let body = format!(
        "ckpt={}\ntestset={}\nout={}\n",
        a.ckpt.display(),
        a.testset.display(),
        a.out.display()
    );
    echo(out, "dump-prompts", &body)?;
    let model = io::load_checkpoint(&a.ckpt)?.model;
    let (_, samples) = io::load_dataset(&a.testset)?;
    let rows = metrics::prompt_rows(&model, &samples)?;
    write_file(&a.out, &metrics::prompt_csv(&rows))?;
    for &level in &model.config().prompt_levels {
        if let Some(sep) = metrics::prompt_separation(&rows, level) {
            say(
                out,
                format!("level {level}: intra minus inter cosine {sep:.4}"),
            )?;
        }
    }
    Ok(())
}

fn sweep_cmd(a: &SweepArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let base = usage(a.config.resolve())?;
    let runs = sweep_plan(a.axis, &base);
    for r in &runs {
        usage(r.config.validate())?;
    }
    echo(out, "base config", &base.to_text())?;
    let axis = a
        .axis
        .to_possible_value()
        .expect("axis")
        .get_name()
        .to_string();
    say(out, format!("axis {axis}: {} runs", runs.len()))?;
    for r in &runs {
        say(out, format!("  {}", r.name))?;
    }
    if a.dry_run {
        return Ok(());
    }
    let mut results = Vec::with_capacity(runs.len());
    for r in &runs {
        say(out, format!("== {}", r.name))?;
        let report = train_into(&r.config, &a.out.join(&r.name), out)?;
        results.push((r.name.clone(), report));
    }
    let table = sweep_table(&results);
    write_file(&a.out.join("sweep.txt"), &table)?;
    say(out, table)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_text_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.apply_text(
            "# toy\nlr = 0.001\nprompt_levels=4\ntasks=gaussian:15,haze\npgm_mode=fixed\n",
        )
        .unwrap();
        assert_eq!(cfg.train.lr, 1e-3);
        assert_eq!(cfg.model.prompt_levels, BTreeSet::from([4]));
        assert_eq!(cfg.train.data.tasks[0].sigma, 15.0);
        let mut back = RunConfig::default();
        back.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn bad_keys_and_values_are_named() {
        let mut cfg = RunConfig::default();
        assert!(cfg
            .set("learning_rate", "1")
            .unwrap_err()
            .to_string()
            .contains("learning_rate"));
        assert!(cfg
            .set("blocks_per_level", "1,1")
            .unwrap_err()
            .to_string()
            .contains("4 values"));
        assert!(cfg
            .apply_text("steps 10")
            .unwrap_err()
            .to_string()
            .contains("line 1"));
        assert!(parse_task("gaussian:-1").is_err());
    }

    #[test]
    fn sweep_axes_have_expected_runs() {
        let base = RunConfig::default();
        let names = |axis| {
            sweep_plan(axis, &base)
                .into_iter()
                .map(|r| r.name)
                .collect::<Vec<_>>()
        };
        assert_eq!(names(SweepAxis::PgmMode), ["fixed", "dynamic"]);
        assert_eq!(
            names(SweepAxis::PromptLevels),
            ["levels_4", "levels_4+3", "levels_4+3+2"]
        );
        assert_eq!(
            names(SweepAxis::TaskMix),
            [
                "noise25",
                "rain",
                "haze",
                "noise25+rain",
                "noise25+haze",
                "rain+haze",
                "noise25+rain+haze"
            ]
        );
    }

    #[test]
    fn usage_errors_exit_with_one() {
        let mut sink = Vec::new();
        assert_eq!(run_with_args(["promptir", "frobnicate"], &mut sink), 1);
        assert_eq!(
            run_with_args(["promptir", "degrade", "--bogus", "--out", "x"], &mut sink),
            1
        );
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        let code = run_with_args(
            [
                "promptir", "degrade", "--task", "gaussian", "--sigma", "-3", "--out", out,
            ],
            &mut sink,
        );
        assert_eq!(code, 1);
        let code = run_with_args(
            [
                "promptir", "infer", "--ckpt", out, "--in", out, "--out", out,
            ],
            &mut sink,
        );
        assert_eq!(code, 2);
    }
}
