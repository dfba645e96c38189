//! Command-line plumbing: configuration merging (defaults ← config file ←
//! flags), command resolution into a fully pinned form, execution, and run
//! manifests that make any invocation reproducible bit-for-bit via
//! `shotflow rerun --manifest <out>/run.json`.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use shotflow::error::{Error, Result};
use shotflow::image::Image;
use shotflow::metrics::{
    alignment_score, cids, csd_analog, regions_from_placements, EvalRun, SampleScores,
};
use shotflow::model::ModelConfig;
use shotflow::pipeline::{
    run_pipeline, FileJudge, FrameStream, GroupingJudge, OracleJudge, PipelineConfig,
};
use shotflow::sample::{
    sample_to_dir, GuidancePolicy, SampleConfig, SampleRequest,
};
use shotflow::studies::{
    cfg_sweep_study, lambda_sweep_study, position_study, racl_study, StudyConfig,
};
use shotflow::synth::{gen_dataset, load_dataset, load_sample, SynthConfig};
use shotflow::train::{load_checkpoint, train_loop, Mode, TrainConfig};

// ── merged configuration ────────────────────────────────────────────────

/// Study-specific knobs; everything else a study needs comes from the
/// `synth`/`model`/`train`/`sample` sections.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudySection {
    pub seeds: Vec<u64>,
    pub n_train: usize,
    pub n_eval: usize,
    /// Integration steps for generation-based study metrics (kept lower
    /// than `sample.num_steps`: studies sample many times).
    pub sample_steps: usize,
    /// ω1 values swept by the guidance study (baseline first).
    pub omega1_values: Vec<f64>,
    /// λ values swept by the consistency-weight study (baseline first).
    pub lambda_values: Vec<f64>,
}

impl Default for StudySection {
    fn default() -> Self {
        StudySection {
            seeds: (1..=10).collect(),
            n_train: 32,
            n_eval: 8,
            sample_steps: 8,
            omega1_values: vec![1.0, 4.0],
            lambda_values: vec![0.0, 0.1, 0.2, 0.5],
        }
    }
}

/// Every module's configuration record under one roof. TOML sections are
/// all optional; omitted fields take the documented defaults. Unknown
/// keys are rejected by name.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub pipeline: PipelineConfig,
    pub study: StudySection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let body = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        toml::from_str(&body)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// defaults ← optional config file. Flag overlays happen per command.
    pub fn resolve(config_flag: Option<&Path>) -> Result<RunConfig> {
        match config_flag {
            Some(p) => RunConfig::load(p),
            None => Ok(RunConfig::default()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.sample.validate()?;
        self.pipeline.validate()?;
        if self.study.seeds.is_empty() {
            return Err(Error::Config("study.seeds must not be empty".into()));
        }
        Ok(())
    }
}

// ── command line ────────────────────────────────────────────────────────

#[derive(Debug, Parser)]
#[command(
    name = "shotflow",
    version,
    about = "Storyboard generation: synthetic data, flow-matching training, guided sampling, evaluation, frame-stream structuring, and paired ablations",
    propagate_version = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
pub enum ModeArg {
    /// Text-to-storyboard: scripts only.
    T2s,
    /// Reference-to-storyboard: reference images + scripts.
    R2s,
    /// Shot-to-shot continuation: references + clean preceding shots.
    S2s,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::T2s => Mode::TextToShot,
            ModeArg::R2s => Mode::ReferenceToShot,
            ModeArg::S2s => Mode::ShotToShot,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
pub enum JudgeArg {
    /// Ground-truth labels from `labels.json` inside the frames directory.
    Oracle,
    /// Labels from an explicit JSON file (`--judge-file`).
    File,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
pub enum StudyArg {
    /// Consistency loss on (λ from config) vs off (λ = 0).
    Racl,
    /// Reference positions: phase-offset vs prepend.
    Position,
    /// Guidance-weight sweep over ω1 at fixed ω2.
    Cfg,
    /// Consistency-weight sweep over λ.
    Lambda,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic storyboard dataset.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of samples.
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        /// Image side in pixels (≥ 32, divisible by 4).
        #[arg(long)]
        size: Option<usize>,
        /// Inclusive role-count range, e.g. `--roles 1,2`.
        #[arg(long, value_delimiter = ',')]
        roles: Option<Vec<usize>>,
        /// Inclusive shot-count range, e.g. `--shots 2,4`.
        #[arg(long, value_delimiter = ',')]
        shots: Option<Vec<usize>>,
    },
    /// Train a model on a generated dataset.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory (from gen-data).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Consistency-loss weight λ.
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        d_model: Option<usize>,
        #[arg(long)]
        n_heads: Option<usize>,
        #[arg(long)]
        n_blocks: Option<usize>,
    },
    /// Sample a storyboard from a trained checkpoint.
    Sample {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint directory, or a train output directory (its latest
        /// checkpoint is used).
        #[arg(long)]
        checkpoint: PathBuf,
        /// A sample directory (from gen-data) providing scripts and
        /// conditioning images.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = ModeArg::R2s)]
        mode: ModeArg,
        /// Clean shots to condition on in s2s mode.
        #[arg(long, default_value_t = 1)]
        preceding: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        omega1: Option<f64>,
        #[arg(long)]
        omega2: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Skip guidance entirely: one conditional forward per step.
        #[arg(long, default_value_t = false)]
        positive_only: bool,
    },
    /// Evaluate a checkpoint on a dataset: generate every storyboard and
    /// score identity, scene, alignment, and attention metrics.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        /// Evaluate at most this many samples.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Structure a directory of frames into shots, keyframes, and scene
    /// groups.
    Pipeline {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory of PPM frames, processed in filename order.
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        overlap: Option<usize>,
        #[arg(long, value_enum, default_value_t = JudgeArg::Oracle)]
        judge: JudgeArg,
        /// Label file for `--judge file`.
        #[arg(long)]
        judge_file: Option<PathBuf>,
        #[arg(long)]
        cut_threshold: Option<f64>,
        /// Motion penalty β in keyframe selection.
        #[arg(long)]
        beta: Option<f64>,
    },
    /// Run a paired-seed ablation study.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        study: StudyArg,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated seed list, e.g. `--seeds 1,2,3`.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_eval: Option<usize>,
        /// Training steps per arm.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Re-execute a previous run from its manifest, reproducing its
    /// outputs byte-for-byte.
    Rerun {
        /// Path to a `run.json` written by any other command.
        #[arg(long)]
        manifest: PathBuf,
    },
}

// ── resolved commands ───────────────────────────────────────────────────

/// A command with every input pinned: flags and config file already
/// merged, paths made absolute. Serializing this (plus the crate version)
/// is what makes a run reproducible from its manifest alone.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum ResolvedCommand {
    GenData {
        seed: u64,
        n: usize,
        out: PathBuf,
        synth: SynthConfig,
    },
    Train {
        data: PathBuf,
        out: PathBuf,
        model: ModelConfig,
        train: TrainConfig,
    },
    Sample {
        checkpoint: PathBuf,
        input: PathBuf,
        mode: ModeArg,
        preceding: usize,
        out: PathBuf,
        sample: SampleConfig,
    },
    Eval {
        checkpoint: PathBuf,
        data: PathBuf,
        out: PathBuf,
        sample: SampleConfig,
        limit: Option<usize>,
    },
    Pipeline {
        frames: PathBuf,
        out: PathBuf,
        judge: JudgeArg,
        judge_file: Option<PathBuf>,
        pipeline: PipelineConfig,
    },
    Ablate {
        study: StudyArg,
        out: PathBuf,
        study_config: StudyConfig,
        omega1_values: Vec<f64>,
        lambda_values: Vec<f64>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    /// Crate version that produced the run.
    pub version: String,
    #[serde(flatten)]
    pub resolved: ResolvedCommand,
}

fn absolutize(path: &Path) -> Result<PathBuf> {
    if path.is_absolute() {
        return Ok(path.to_path_buf());
    }
    let cwd = std::env::current_dir()
        .map_err(|e| Error::io("current directory".to_string(), e))?;
    Ok(cwd.join(path))
}

fn require_exists(path: &Path, what: &str, remedy: &str) -> Result<()> {
    if !path.exists() {
        return Err(Error::Usage(format!(
            "{what} not found at `{}` — {remedy}",
            path.display()
        )));
    }
    Ok(())
}

/// Merge flags over the loaded config and pin every path.
pub fn resolve(command: &Command) -> Result<ResolvedCommand> {
    let resolved = match command {
        Command::GenData { config, seed, n, out, size, roles, shots } => {
            let mut rc = RunConfig::resolve(config.as_deref())?;
            if let Some(sz) = size {
                rc.synth.size = *sz;
            }
            if let Some(r) = roles {
                let [lo, hi] = r.as_slice() else {
                    return Err(Error::Usage("--roles takes exactly `lo,hi`".into()));
                };
                rc.synth.k_range = (*lo, *hi);
            }
            if let Some(s) = shots {
                let [lo, hi] = s.as_slice() else {
                    return Err(Error::Usage("--shots takes exactly `lo,hi`".into()));
                };
                rc.synth.s_range = (*lo, *hi);
            }
            rc.synth.validate()?;
            ResolvedCommand::GenData {
                seed: *seed,
                n: *n,
                out: absolutize(out)?,
                synth: rc.synth,
            }
        }
        Command::Train {
            config, data, out, steps, seed, lambda, lr, batch_size, d_model, n_heads, n_blocks,
        } => {
            let mut rc = RunConfig::resolve(config.as_deref())?;
            if let Some(v) = steps {
                rc.train.steps = *v;
            }
            if let Some(v) = seed {
                rc.train.seed = *v;
            }
            if let Some(v) = lambda {
                rc.train.lambda = *v;
            }
            if let Some(v) = lr {
                rc.train.lr = *v;
            }
            if let Some(v) = batch_size {
                rc.train.batch_size = *v;
            }
            if let Some(v) = d_model {
                rc.model.d_model = *v;
            }
            if let Some(v) = n_heads {
                rc.model.n_heads = *v;
            }
            if let Some(v) = n_blocks {
                rc.model.n_blocks = *v;
            }
            rc.model.validate()?;
            rc.train.validate()?;
            let data = absolutize(data)?;
            require_exists(
                &data.join("manifest.json"),
                "dataset manifest",
                "generate one with `shotflow gen-data --out <dir>`",
            )?;
            ResolvedCommand::Train {
                data,
                out: absolutize(out)?,
                model: rc.model,
                train: rc.train,
            }
        }
        Command::Sample {
            config, checkpoint, input, mode, preceding, out, omega1, omega2, steps, seed,
            positive_only,
        } => {
            let mut rc = RunConfig::resolve(config.as_deref())?;
            if let Some(v) = omega1 {
                rc.sample.omega1 = *v;
            }
            if let Some(v) = omega2 {
                rc.sample.omega2 = *v;
            }
            if let Some(v) = steps {
                rc.sample.num_steps = *v;
            }
            if let Some(v) = seed {
                rc.sample.seed = *v;
            }
            if *positive_only {
                rc.sample.policy = GuidancePolicy::PositiveOnly;
            }
            rc.sample.validate()?;
            let checkpoint = resolve_checkpoint(&absolutize(checkpoint)?)?;
            let input = absolutize(input)?;
            require_exists(
                &input.join("meta.json"),
                "sample directory",
                "point --input at one sample_XXXX directory from gen-data",
            )?;
            ResolvedCommand::Sample {
                checkpoint,
                input,
                mode: *mode,
                preceding: *preceding,
                out: absolutize(out)?,
                sample: rc.sample,
            }
        }
        Command::Eval { config, checkpoint, data, out, seed, steps, limit } => {
            let mut rc = RunConfig::resolve(config.as_deref())?;
            if let Some(v) = seed {
                rc.sample.seed = *v;
            }
            if let Some(v) = steps {
                rc.sample.num_steps = *v;
            }
            rc.sample.validate()?;
            let checkpoint = resolve_checkpoint(&absolutize(checkpoint)?)?;
            let data = absolutize(data)?;
            require_exists(
                &data.join("manifest.json"),
                "dataset manifest",
                "generate one with `shotflow gen-data --out <dir>`",
            )?;
            ResolvedCommand::Eval {
                checkpoint,
                data,
                out: absolutize(out)?,
                sample: rc.sample,
                limit: *limit,
            }
        }
        Command::Pipeline {
            config, frames, out, window, overlap, judge, judge_file, cut_threshold, beta,
        } => {
            let mut rc = RunConfig::resolve(config.as_deref())?;
            if let Some(v) = window {
                rc.pipeline.window = *v;
            }
            if let Some(v) = overlap {
                rc.pipeline.overlap = *v;
            }
            if let Some(v) = cut_threshold {
                rc.pipeline.cut_threshold = *v;
            }
            if let Some(v) = beta {
                rc.pipeline.beta = *v;
            }
            rc.pipeline.validate()?;
            let frames = absolutize(frames)?;
            require_exists(&frames, "frames directory", "pass a directory of PPM frames")?;
            let judge_file = match (judge, judge_file) {
                (JudgeArg::File, Some(p)) => {
                    let p = absolutize(p)?;
                    require_exists(&p, "judge label file", "pass --judge-file <labels.json>")?;
                    Some(p)
                }
                (JudgeArg::File, None) => {
                    return Err(Error::Usage(
                        "--judge file needs --judge-file <labels.json>".into(),
                    ))
                }
                (JudgeArg::Oracle, _) => {
                    require_exists(
                        &frames.join("labels.json"),
                        "oracle labels",
                        "the oracle judge reads labels.json from the frames directory; \
                         use --judge file for external labels",
                    )?;
                    None
                }
            };
            ResolvedCommand::Pipeline {
                frames,
                out: absolutize(out)?,
                judge: *judge,
                judge_file,
                pipeline: rc.pipeline,
            }
        }
        Command::Ablate { config, study, out, seeds, n_train, n_eval, steps } => {
            let mut rc = RunConfig::resolve(config.as_deref())?;
            if let Some(v) = seeds {
                rc.study.seeds = v.clone();
            }
            if let Some(v) = n_train {
                rc.study.n_train = *v;
            }
            if let Some(v) = n_eval {
                rc.study.n_eval = *v;
            }
            if let Some(v) = steps {
                rc.train.steps = *v;
            }
            rc.validate()?;
            let study_config = StudyConfig {
                seeds: rc.study.seeds.clone(),
                n_train: rc.study.n_train,
                n_eval: rc.study.n_eval,
                synth: rc.synth,
                model: rc.model,
                train: rc.train,
                sample_steps: rc.study.sample_steps,
                omega1: rc.sample.omega1,
                omega2: rc.sample.omega2,
            };
            ResolvedCommand::Ablate {
                study: *study,
                out: absolutize(out)?,
                study_config,
                omega1_values: rc.study.omega1_values,
                lambda_values: rc.study.lambda_values,
            }
        }
        Command::Rerun { manifest } => {
            let path = absolutize(manifest)?;
            require_exists(&path, "run manifest", "pass a run.json written by a previous run")?;
            let body = std::fs::read_to_string(&path)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            let manifest: RunManifest = serde_json::from_str(&body)
                .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
            manifest.resolved
        }
    };
    Ok(resolved)
}

/// Accept either a checkpoint directory or a training output directory;
/// in the latter case pick the highest-step checkpoint under it.
pub fn resolve_checkpoint(path: &Path) -> Result<PathBuf> {
    if path.join("manifest.json").exists() && path.join("weights").exists() {
        return Ok(path.to_path_buf());
    }
    let nested = path.join("checkpoints");
    if nested.is_dir() {
        let mut best: Option<(usize, PathBuf)> = None;
        let entries = std::fs::read_dir(&nested)
            .map_err(|e| Error::io(nested.display().to_string(), e))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(nested.display().to_string(), e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(step) = name.strip_prefix("step_").and_then(|s| s.parse().ok()) {
                if best.as_ref().is_none_or(|(b, _)| step > *b) {
                    best = Some((step, entry.path()));
                }
            }
        }
        if let Some((_, p)) = best {
            return Ok(p);
        }
    }
    Err(Error::Usage(format!(
        "no checkpoint at `{}` — point --checkpoint at a checkpoint directory \
         or a train output directory containing checkpoints/",
        path.display()
    )))
}

// ── execution ───────────────────────────────────────────────────────────

const VERSION: &str = env!("CARGO_PKG_VERSION");

fn write_run_manifest(out: &Path, resolved: &ResolvedCommand) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out.display().to_string(), e))?;
    let manifest = RunManifest {
        version: VERSION.to_string(),
        resolved: resolved.clone(),
    };
    let body = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Contract(format!("serialize run manifest: {e}")))?;
    let path = out.join("run.json");
    std::fs::write(&path, body).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn dispatch(resolved: &ResolvedCommand) -> Result<()> {
    match resolved {
        ResolvedCommand::GenData { seed, n, out, synth } => {
            write_run_manifest(out, resolved)?;
            let manifest = gen_dataset(*seed, *n, out, synth)?;
            println!(
                "wrote {} samples to {} (seed {})",
                manifest.samples.len(),
                out.display(),
                seed
            );
            Ok(())
        }
        ResolvedCommand::Train { data, out, model, train } => {
            write_run_manifest(out, resolved)?;
            let (_, samples) = load_dataset(data)?;
            let (_, report) = train_loop(model, train, &samples, out)?;
            let last = report.rows.last().map(|r| r.l_total).unwrap_or(f64::NAN);
            println!(
                "trained {} steps (final loss {:.4}); checkpoints: {}",
                report.rows.len(),
                last,
                report.checkpoints.len()
            );
            Ok(())
        }
        ResolvedCommand::Sample { checkpoint, input, mode, preceding, out, sample: cfg } => {
            write_run_manifest(out, resolved)?;
            let (model, _, _, manifest) = load_checkpoint(checkpoint)?;
            let codec = shotflow::codec::CodecWeights::seeded(
                manifest.train.codec_seed,
                model.config.latent_dim,
                manifest.train.patch,
            )?;
            let request = request_from_sample_dir(input, (*mode).into(), *preceding)?;
            let (output, _) = sample_to_dir(&model, &codec, &request, cfg, out)?;
            println!(
                "sampled {} shots ({} model calls) into {}",
                output.images.len(),
                output.model_calls,
                out.display()
            );
            Ok(())
        }
        ResolvedCommand::Eval { checkpoint, data, out, sample: cfg, limit } => {
            write_run_manifest(out, resolved)?;
            let run = eval_checkpoint(checkpoint, data, cfg, *limit)?;
            let files = shotflow::metrics::write_report(out, std::slice::from_ref(&run))?;
            println!(
                "evaluated {} samples; wrote {} report files to {}",
                run.samples.len(),
                files.len(),
                out.display()
            );
            Ok(())
        }
        ResolvedCommand::Pipeline { frames, out, judge, judge_file, pipeline } => {
            write_run_manifest(out, resolved)?;
            let stream = read_frame_dir(frames)?;
            let judge: Box<dyn GroupingJudge> = match judge {
                JudgeArg::Oracle => Box::new(oracle_judge_from_labels(frames)?),
                JudgeArg::File => {
                    let path = judge_file
                        .as_ref()
                        .ok_or_else(|| Error::Usage("--judge file needs --judge-file".into()))?;
                    Box::new(FileJudge::from_json_file(path)?)
                }
            };
            let report = run_pipeline(&stream, pipeline, judge.as_ref())?;
            let body = serde_json::to_string_pretty(&report)
                .map_err(|e| Error::Contract(format!("serialize pipeline report: {e}")))?;
            let path = out.join("groups.json");
            std::fs::write(&path, body)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            println!(
                "{} frames → {} shots → {} groups; report at {}",
                report.n_frames,
                report.keyframes.len(),
                report.groups.len(),
                path.display()
            );
            Ok(())
        }
        ResolvedCommand::Ablate { study, out, study_config, omega1_values, lambda_values } => {
            write_run_manifest(out, resolved)?;
            let summaries = match study {
                StudyArg::Racl => racl_study(study_config, out)?,
                StudyArg::Position => position_study(study_config, out)?,
                StudyArg::Cfg => cfg_sweep_study(study_config, omega1_values, out)?,
                StudyArg::Lambda => lambda_sweep_study(study_config, lambda_values, out)?,
            };
            for s in &summaries {
                println!(
                    "{} [{}]: {} {:.4} vs {} {:.4} (Δ {:+.4}, {}W/{}L/{}T, p={:.4})",
                    s.study,
                    s.metric,
                    s.arm_a,
                    s.mean_a,
                    s.arm_b,
                    s.mean_b,
                    s.mean_delta,
                    s.wins_b,
                    s.losses_b,
                    s.ties,
                    s.p_value
                );
            }
            Ok(())
        }
    }
}

/// Parse + resolve + execute. The binary maps the error class to an exit
/// code.
pub fn run(cli: &Cli) -> Result<()> {
    let resolved = resolve(&cli.command)?;
    dispatch(&resolved)
}

/// Exit code contract: 0 ok, 1 runtime failure, 2 usage/config error.
pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Usage(_) | Error::Config(_) => 2,
        _ => 1,
    }
}

// ── command helpers ─────────────────────────────────────────────────────

/// Build a sampling request from one gen-data sample directory: scripts
/// always, reference images for r2s/s2s, the first `preceding` clean
/// shots for s2s.
pub fn request_from_sample_dir(dir: &Path, mode: Mode, preceding: usize) -> Result<SampleRequest> {
    let sample = load_sample(dir)?;
    let (ref_images, ref_scripts) = match mode {
        Mode::TextToShot => (Vec::new(), Vec::new()),
        _ => (
            sample.refs.iter().map(|r| r.image.clone()).collect(),
            sample.refs.iter().map(|r| r.script.clone()).collect(),
        ),
    };
    let preceding_images: Vec<Image> = match mode {
        Mode::ShotToShot => {
            if preceding >= sample.s() {
                return Err(Error::Usage(format!(
                    "--preceding {} but the input storyboard has {} shots; \
                     at least one shot must remain to generate",
                    preceding,
                    sample.s()
                )));
            }
            sample.shots[..preceding].iter().map(|s| s.image.clone()).collect()
        }
        _ => Vec::new(),
    };
    Ok(SampleRequest {
        mode,
        image_size: sample.size,
        ref_images,
        ref_scripts,
        shot_scripts: sample.shots.iter().map(|s| s.script.clone()).collect(),
        preceding: preceding_images,
    })
}

/// Generate and score every storyboard in `data` with the full metric
/// set. Attention IoU comes from a captured forward at matched noise.
pub fn eval_checkpoint(
    checkpoint: &Path,
    data: &Path,
    cfg: &SampleConfig,
    limit: Option<usize>,
) -> Result<EvalRun> {
    let (model, _, _, manifest) = load_checkpoint(checkpoint)?;
    let codec = shotflow::codec::CodecWeights::seeded(
        manifest.train.codec_seed,
        model.config.latent_dim,
        manifest.train.patch,
    )?;
    let (data_manifest, samples) = load_dataset(data)?;
    let n = limit.unwrap_or(samples.len()).min(samples.len());
    if n == 0 {
        return Err(Error::Usage("evaluation dataset is empty".into()));
    }
    let mut scores = Vec::with_capacity(n);
    let mut seeds = Vec::with_capacity(n);
    for (i, s) in samples.iter().take(n).enumerate() {
        let seed = cfg.seed.wrapping_add(i as u64);
        seeds.push(seed);
        let request = SampleRequest {
            mode: Mode::ReferenceToShot,
            image_size: s.size,
            ref_images: s.refs.iter().map(|r| r.image.clone()).collect(),
            ref_scripts: s.refs.iter().map(|r| r.script.clone()).collect(),
            shot_scripts: s.shots.iter().map(|sh| sh.script.clone()).collect(),
            preceding: Vec::new(),
        };
        let per_sample = SampleConfig { seed, ..cfg.clone() };
        let out = shotflow::sample::sample(&model, &codec, &request, &per_sample)?;

        let cids_score = cids(&out.images, s)?;
        let regions: Vec<_> = s
            .shots
            .iter()
            .map(|sh| regions_from_placements(&sh.placements, s.size))
            .collect();
        let ref_regions = regions_from_placements(&s.shots[0].placements, s.size);
        let csd = csd_analog(
            &out.images,
            &regions,
            Some((&s.shots[0].image, &ref_regions)),
        )?;
        let scripts: Vec<Vec<u16>> = s.shots.iter().map(|sh| sh.script.clone()).collect();
        let alignment = alignment_score(&out.images, &scripts)?;
        let attn_iou = shotflow::studies::eval_attention_iou(
            &model,
            &codec,
            std::slice::from_ref(s),
            seed,
            manifest.train.reading,
        )?;
        scores.push(SampleScores {
            sample_id: data_manifest.samples[i].dir.clone(),
            cids_self: cids_score.self_score,
            cids_cross: cids_score.cross_score,
            csd_self: csd.self_score,
            csd_cross: csd.cross_score.unwrap_or(f64::NAN),
            alignment,
            attn_iou,
        });
    }
    Ok(EvalRun {
        name: "eval".into(),
        checkpoint: checkpoint.display().to_string(),
        config: serde_json::to_string(cfg)
            .map_err(|e| Error::Contract(format!("serialize sample config: {e}")))?,
        seeds,
        samples: scores,
    })
}

/// Read every `*.ppm` under `dir` in filename order as one stream.
pub fn read_frame_dir(dir: &Path) -> Result<FrameStream> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir.display().to_string(), e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".ppm"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Usage(format!(
            "no .ppm frames in `{}` — frames are read in filename order, \
             so zero-pad indices (frame_0007.ppm)",
            dir.display()
        )));
    }
    let frames = names
        .iter()
        .map(|n| Image::read_ppm(dir.join(n)))
        .collect::<Result<Vec<_>>>()?;
    Ok(FrameStream {
        frames,
        source: dir.display().to_string(),
    })
}

/// The oracle judge reads ground-truth labels from `labels.json` next to
/// the frames: a `{frame_index: group}` map.
fn oracle_judge_from_labels(frames_dir: &Path) -> Result<OracleJudge> {
    let path = frames_dir.join("labels.json");
    let body = std::fs::read_to_string(&path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let labels: std::collections::BTreeMap<usize, usize> = serde_json::from_str(&body)
        .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    Ok(OracleJudge::new(labels))
}
