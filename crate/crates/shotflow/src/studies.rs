//! Paired-seed ablation studies: direction-of-effect comparisons between
//! training configurations that differ in exactly one knob, on matched
//! data and noise streams.
//!
//! At desk scale only matched-seed comparisons have statistical power, so
//! every study trains its arms on the same per-seed dataset with the same
//! training RNG stream, evaluates both on the same held-out samples, and
//! tests the per-seed win/loss record with an exact binomial sign test.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::CodecWeights;
use crate::error::{Error, Result};
use crate::metrics::{attention_iou, cids};
use crate::model::{
    build_token_sequence, forward_on_tape, scripts_in_order, Model, ModelConfig, ParamVars,
    PositionalStrategy,
};
use crate::racl::{racl_loss, AttentionReading, MapKind};
use crate::rng::Rng;
use crate::sample::{sample, GuidancePolicy, SampleConfig, SampleRequest};
use crate::synth::{gen_sample, StoryboardSample, SynthConfig};
use crate::tensor::Tape;
use crate::train::{make_training_instance, train_loop, Mode, TrainConfig};

// ── sign test ───────────────────────────────────────────────────────────

/// One-sided exact binomial sign test: the probability of seeing at least
/// `wins` successes in `wins + losses` fair coin flips. Ties are excluded
/// before calling (standard sign-test practice). Zero informative pairs
/// → p = 1.
pub fn sign_test_p(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    if n == 0 {
        return 1.0;
    }
    // C(n, k) accumulated in f64; exact for the n ≤ 50 used here.
    let mut p = 0.0f64;
    let mut binom = 1.0f64; // C(n, 0)
    let mut tail = Vec::with_capacity(n + 1);
    for k in 0..=n {
        tail.push(binom);
        binom = binom * (n - k) as f64 / (k + 1) as f64;
    }
    for c in tail.iter().skip(wins) {
        p += c;
    }
    p / 2.0f64.powi(n as i32)
}

// ── paired outcomes ─────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedOutcome {
    pub seed: u64,
    pub a: f64,
    pub b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    pub study: String,
    pub metric: String,
    pub arm_a: String,
    pub arm_b: String,
    pub outcomes: Vec<PairedOutcome>,
    pub mean_a: f64,
    pub mean_b: f64,
    /// `mean_b − mean_a`: positive when arm B scores higher.
    pub mean_delta: f64,
    pub wins_b: usize,
    pub losses_b: usize,
    pub ties: usize,
    /// One-sided sign-test p-value for "B beats A".
    pub p_value: f64,
}

pub fn summarize_paired(
    study: &str,
    metric: &str,
    arm_a: &str,
    arm_b: &str,
    outcomes: Vec<PairedOutcome>,
) -> Result<StudySummary> {
    if outcomes.is_empty() {
        return Err(Error::Contract("paired study with zero outcomes".into()));
    }
    let n = outcomes.len() as f64;
    let mean_a = outcomes.iter().map(|o| o.a).sum::<f64>() / n;
    let mean_b = outcomes.iter().map(|o| o.b).sum::<f64>() / n;
    let wins_b = outcomes.iter().filter(|o| o.b > o.a).count();
    let losses_b = outcomes.iter().filter(|o| o.b < o.a).count();
    let ties = outcomes.len() - wins_b - losses_b;
    Ok(StudySummary {
        study: study.into(),
        metric: metric.into(),
        arm_a: arm_a.into(),
        arm_b: arm_b.into(),
        mean_a,
        mean_b,
        mean_delta: mean_b - mean_a,
        wins_b,
        losses_b,
        ties,
        p_value: sign_test_p(wins_b, losses_b),
        outcomes,
    })
}

// ── evaluation probes ───────────────────────────────────────────────────

/// Mean IoU between the aggregated reference→shot attention maps and the
/// pooled role masks over `samples`. Instances are built with a seeded
/// noise stream so two models can be probed on identical inputs.
pub fn eval_attention_iou(
    model: &Model,
    codec: &CodecWeights,
    samples: &[StoryboardSample],
    noise_seed: u64,
    reading: AttentionReading,
) -> Result<f64> {
    let mut pairs = Vec::new();
    let mut rng = Rng::seed_from_u64(noise_seed).derive(0x696f75);
    for sample in samples {
        if sample.k() == 0 {
            continue;
        }
        let inst = make_training_instance(codec, sample, Mode::ReferenceToShot, &mut rng)?;
        let seq = build_token_sequence(
            &inst.ref_latents,
            &inst.shot_inputs,
            &inst.noised,
            model.config.strategy,
        )?;
        let scripts = scripts_in_order(&seq, &inst.ref_scripts, &inst.shot_scripts)?;
        let mut tape: Tape<f32> = Tape::new();
        let pv = ParamVars::leaf_all(&mut tape, &model.store);
        let out = forward_on_tape(
            &mut tape,
            &model.store,
            &pv,
            &model.config,
            &seq,
            &scripts,
            inst.t,
            true,
        )?;
        let racl = racl_loss(&mut tape, &out.records, &seq, &inst.masks, reading)?;
        for map in &racl.maps {
            if let MapKind::RefToShot { .. } = map.kind {
                let mask = inst
                    .masks
                    .shot_masks
                    .get(&(map.shot, map.role))
                    .ok_or_else(|| Error::Contract("map without matching mask".into()))?;
                pairs.push((tape.value(map.map).clone(), mask.clone()));
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::Contract(
            "no reference→shot attention pairs over the evaluation set".into(),
        ));
    }
    attention_iou(&pairs)
}

/// Mean identity cross-score of reference-to-shot generations over
/// `samples`, using one guided sampling run per sample.
pub fn eval_generation_cids(
    model: &Model,
    codec: &CodecWeights,
    samples: &[StoryboardSample],
    omega1: f64,
    omega2: f64,
    num_steps: usize,
    seed: u64,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Contract("generation eval over zero samples".into()));
    }
    let mut total = 0.0;
    for (i, s) in samples.iter().enumerate() {
        let request = SampleRequest {
            mode: Mode::ReferenceToShot,
            image_size: s.size,
            ref_images: s.refs.iter().map(|r| r.image.clone()).collect(),
            ref_scripts: s.refs.iter().map(|r| r.script.clone()).collect(),
            shot_scripts: s.shots.iter().map(|sh| sh.script.clone()).collect(),
            preceding: Vec::new(),
        };
        let config = SampleConfig {
            omega1,
            omega2,
            num_steps,
            seed: seed.wrapping_add(i as u64),
            policy: GuidancePolicy::Guided,
            force_three_forwards: false,
        };
        let out = sample(model, codec, &request, &config)?;
        total += cids(&out.images, s)?.cross_score;
    }
    Ok(total / samples.len() as f64)
}

// ── study drivers ───────────────────────────────────────────────────────

/// Shared study shape: per-seed data/noise streams, one base model and
/// training configuration that arms override in exactly one knob.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyConfig {
    pub seeds: Vec<u64>,
    pub n_train: usize,
    pub n_eval: usize,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sample_steps: usize,
    pub omega1: f64,
    pub omega2: f64,
}

impl StudyConfig {
    fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("a study needs at least one seed".into()));
        }
        if self.n_train == 0 || self.n_eval == 0 {
            return Err(Error::Config("n_train and n_eval must be ≥ 1".into()));
        }
        Ok(())
    }

    fn gen_set(&self, seed: u64, label: u64, n: usize) -> Result<Vec<StoryboardSample>> {
        let mut rng = Rng::seed_from_u64(seed).derive(label);
        (0..n).map(|_| gen_sample(&mut rng, &self.synth)).collect()
    }

    fn codec(&self) -> Result<CodecWeights> {
        CodecWeights::seeded(self.train.codec_seed, self.model.latent_dim, self.train.patch)
    }
}

const TRAIN_SET: u64 = 0x747261696e;
const EVAL_SET: u64 = 0x6576616c;

/// One knob override per arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSpec {
    pub name: String,
    pub lambda: Option<f64>,
    pub strategy: Option<PositionalStrategy>,
}

impl ArmSpec {
    fn apply(&self, model: &ModelConfig, train: &TrainConfig) -> (ModelConfig, TrainConfig) {
        let mut m = model.clone();
        let mut t = train.clone();
        if let Some(l) = self.lambda {
            t.lambda = l;
        }
        if let Some(s) = self.strategy {
            m.strategy = s;
        }
        (m, t)
    }
}

fn train_arm(
    cfg: &StudyConfig,
    arm: &ArmSpec,
    seed: u64,
    dataset: &[StoryboardSample],
    out_dir: &Path,
) -> Result<Model> {
    let (model_cfg, mut train_cfg) = arm.apply(&cfg.model, &cfg.train);
    train_cfg.seed = seed;
    let arm_dir = out_dir.join(format!("seed_{seed}")).join(&arm.name);
    let (model, _) = train_loop(&model_cfg, &train_cfg, dataset, &arm_dir)?;
    Ok(model)
}

/// Train `arm_a` and `arm_b` per seed on identical data and training
/// streams, then evaluate attention IoU and generation identity on shared
/// held-out samples. Returns one summary per metric.
pub fn paired_training_study(
    study: &str,
    cfg: &StudyConfig,
    arm_a: &ArmSpec,
    arm_b: &ArmSpec,
    out_dir: &Path,
) -> Result<Vec<StudySummary>> {
    cfg.validate()?;
    let codec = cfg.codec()?;
    let mut iou = Vec::new();
    let mut gen_cids = Vec::new();
    for &seed in &cfg.seeds {
        let train_set = cfg.gen_set(seed, TRAIN_SET, cfg.n_train)?;
        let eval_set = cfg.gen_set(seed, EVAL_SET, cfg.n_eval)?;
        let model_a = train_arm(cfg, arm_a, seed, &train_set, out_dir)?;
        let model_b = train_arm(cfg, arm_b, seed, &train_set, out_dir)?;

        let iou_a = eval_attention_iou(&model_a, &codec, &eval_set, seed, cfg.train.reading)?;
        let iou_b = eval_attention_iou(&model_b, &codec, &eval_set, seed, cfg.train.reading)?;
        iou.push(PairedOutcome { seed, a: iou_a, b: iou_b });

        let cids_a = eval_generation_cids(
            &model_a, &codec, &eval_set, cfg.omega1, cfg.omega2, cfg.sample_steps, seed,
        )?;
        let cids_b = eval_generation_cids(
            &model_b, &codec, &eval_set, cfg.omega1, cfg.omega2, cfg.sample_steps, seed,
        )?;
        gen_cids.push(PairedOutcome { seed, a: cids_a, b: cids_b });
    }
    let summaries = vec![
        summarize_paired(study, "attn_iou", &arm_a.name, &arm_b.name, iou)?,
        summarize_paired(study, "cids_cross", &arm_a.name, &arm_b.name, gen_cids)?,
    ];
    write_study_report(out_dir, &summaries)?;
    Ok(summaries)
}

/// Consistency-loss ablation: λ = 0 (off) vs the configured λ (on).
pub fn racl_study(cfg: &StudyConfig, out_dir: &Path) -> Result<Vec<StudySummary>> {
    let off = ArmSpec { name: "racl_off".into(), lambda: Some(0.0), strategy: None };
    let on = ArmSpec { name: "racl_on".into(), lambda: Some(cfg.train.lambda), strategy: None };
    paired_training_study("racl", cfg, &off, &on, out_dir)
}

/// Positional-strategy ablation: phase-offset references vs prepended
/// references. Arm B is the expected winner (prepend).
pub fn position_study(cfg: &StudyConfig, out_dir: &Path) -> Result<Vec<StudySummary>> {
    let phase = ArmSpec {
        name: "phase_offset".into(),
        lambda: None,
        strategy: Some(PositionalStrategy::PhaseOffset {
            delta: crate::model::default_phase_delta(),
        }),
    };
    let prepend = ArmSpec {
        name: "prepend".into(),
        lambda: None,
        strategy: Some(PositionalStrategy::Prepend),
    };
    paired_training_study("position", cfg, &phase, &prepend, out_dir)
}

/// Guidance-weight sweep: one model per seed, sampled under each ω1 with
/// ω2 fixed; the paired summary compares the first ω1 (baseline) against
/// the last (strong guidance).
pub fn cfg_sweep_study(
    cfg: &StudyConfig,
    omega1_values: &[f64],
    out_dir: &Path,
) -> Result<Vec<StudySummary>> {
    cfg.validate()?;
    if omega1_values.len() < 2 {
        return Err(Error::Config("cfg sweep needs ≥ 2 ω1 values".into()));
    }
    let codec = cfg.codec()?;
    let arm = ArmSpec { name: "base".into(), lambda: None, strategy: None };
    let mut per_omega: Vec<Vec<PairedOutcome>> = Vec::new();
    let mut scores_by_seed = Vec::new();
    for &seed in &cfg.seeds {
        let train_set = cfg.gen_set(seed, TRAIN_SET, cfg.n_train)?;
        let eval_set = cfg.gen_set(seed, EVAL_SET, cfg.n_eval)?;
        let model = train_arm(cfg, &arm, seed, &train_set, out_dir)?;
        let scores: Vec<f64> = omega1_values
            .iter()
            .map(|&w1| {
                eval_generation_cids(
                    &model, &codec, &eval_set, w1, cfg.omega2, cfg.sample_steps, seed,
                )
            })
            .collect::<Result<_>>()?;
        scores_by_seed.push((seed, scores));
    }
    let (lo, hi) = (0, omega1_values.len() - 1);
    per_omega.push(
        scores_by_seed
            .iter()
            .map(|(seed, s)| PairedOutcome { seed: *seed, a: s[lo], b: s[hi] })
            .collect(),
    );
    let summary = summarize_paired(
        "cfg",
        "cids_cross",
        &format!("omega1_{}", omega1_values[lo]),
        &format!("omega1_{}", omega1_values[hi]),
        per_omega.pop().expect("pushed above"),
    )?;
    let summaries = vec![summary];
    write_study_report(out_dir, &summaries)?;
    write_sweep_table(out_dir, omega1_values, &scores_by_seed)?;
    Ok(summaries)
}

/// Consistency-weight sweep: one training arm per λ per seed; each λ > 0
/// is paired against the first value (typically 0).
pub fn lambda_sweep_study(
    cfg: &StudyConfig,
    lambdas: &[f64],
    out_dir: &Path,
) -> Result<Vec<StudySummary>> {
    cfg.validate()?;
    if lambdas.len() < 2 {
        return Err(Error::Config("lambda sweep needs ≥ 2 values".into()));
    }
    let codec = cfg.codec()?;
    let mut iou_by_lambda: Vec<Vec<(u64, f64)>> = vec![Vec::new(); lambdas.len()];
    for &seed in &cfg.seeds {
        let train_set = cfg.gen_set(seed, TRAIN_SET, cfg.n_train)?;
        let eval_set = cfg.gen_set(seed, EVAL_SET, cfg.n_eval)?;
        for (li, &lambda) in lambdas.iter().enumerate() {
            let arm = ArmSpec {
                name: format!("lambda_{lambda}"),
                lambda: Some(lambda),
                strategy: None,
            };
            let model = train_arm(cfg, &arm, seed, &train_set, out_dir)?;
            let iou = eval_attention_iou(&model, &codec, &eval_set, seed, cfg.train.reading)?;
            iou_by_lambda[li].push((seed, iou));
        }
    }
    let mut summaries = Vec::new();
    for li in 1..lambdas.len() {
        let outcomes = iou_by_lambda[0]
            .iter()
            .zip(&iou_by_lambda[li])
            .map(|(&(seed, a), &(_, b))| PairedOutcome { seed, a, b })
            .collect();
        summaries.push(summarize_paired(
            "lambda",
            "attn_iou",
            &format!("lambda_{}", lambdas[0]),
            &format!("lambda_{}", lambdas[li]),
            outcomes,
        )?);
    }
    write_study_report(out_dir, &summaries)?;
    Ok(summaries)
}

// ── study artifacts ─────────────────────────────────────────────────────

/// Write `study.json` (all summaries) and one outcomes CSV per summary.
pub fn write_study_report(dir: &Path, summaries: &[StudySummary]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut files = Vec::new();
    let json_path = dir.join("study.json");
    let body = serde_json::to_string_pretty(summaries)
        .map_err(|e| Error::Contract(format!("serialize study report: {e}")))?;
    std::fs::write(&json_path, body).map_err(|e| Error::io(json_path.display().to_string(), e))?;
    files.push(json_path);
    for s in summaries {
        let csv_path = dir.join(format!("{}_{}.csv", s.study, s.metric));
        let mut out = format!("seed,{},{}\n", s.arm_a, s.arm_b);
        for o in &s.outcomes {
            out.push_str(&format!("{},{},{}\n", o.seed, o.a, o.b));
        }
        std::fs::write(&csv_path, out)
            .map_err(|e| Error::io(csv_path.display().to_string(), e))?;
        files.push(csv_path);
    }
    Ok(files)
}

fn write_sweep_table(
    dir: &Path,
    omega1_values: &[f64],
    scores_by_seed: &[(u64, Vec<f64>)],
) -> Result<PathBuf> {
    let path = dir.join("cfg_sweep.csv");
    let mut out = String::from("seed");
    for w in omega1_values {
        out.push_str(&format!(",omega1_{w}"));
    }
    out.push('\n');
    for (seed, scores) in scores_by_seed {
        out.push_str(&seed.to_string());
        for s in scores {
            out.push_str(&format!(",{s}"));
        }
        out.push('\n');
    }
    std::fs::write(&path, out).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(path)
}
