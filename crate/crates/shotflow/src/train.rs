//! Mixed-mode flow-matching training.
//!
//! Each step draws a generation mode, builds training instances by noising
//! the appropriate latent segments along the straight path
//! `z_t = (1−t)·z_shot + t·z_n`, and regresses the model's velocity output
//! onto the constant target `ε = z_n − z_shot` over the noised segments
//! only. The attention-consistency loss rides along while its schedule is
//! active, weighted by `λ`.
//!
//! Everything stochastic flows through one generator whose state is
//! serialized into checkpoints, so a resumed run continues the exact
//! trajectory of the uninterrupted one.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::codec::CodecWeights;
use crate::error::{Error, Result};
use crate::model::{
    build_token_sequence, forward_on_tape, scripts_in_order, Model, ModelConfig, ParamStore,
    ParamVars,
};
use crate::racl::{racl_loss, AttentionReading, RoleMaskSet};
use crate::rng::Rng;
use crate::synth::StoryboardSample;
use crate::tensor::io::{read_tensor, write_tensor};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Open-interval clip for sampled timesteps.
pub const T_CLIP: (f64, f64) = (1e-4, 1.0 - 1e-4);

// ── configuration ───────────────────────────────────────────────────────

/// Which norm realizes the velocity-matching objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum LossNorm {
    /// Mean squared error (the standard flow-matching choice).
    #[default]
    Squared,
    /// Mean absolute error.
    L1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the attention-consistency loss.
    pub lambda: f64,
    /// When set, the consistency loss is active only for steps
    /// `< racl_until_step`; `None` keeps it active for the whole run.
    pub racl_until_step: Option<usize>,
    /// Mode mixture: (text-to-shot, reference-to-shot, shot-to-shot).
    pub mode_probs: [f64; 3],
    pub text_drop_rate: f64,
    pub ref_drop_rate: f64,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub loss_norm: LossNorm,
    pub reading: AttentionReading,
    pub checkpoint_every: usize,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub grad_max_norm: Option<f64>,
    /// Seed of the fixed patch-projection codec.
    pub codec_seed: u64,
    /// Codec patch size (latent grid = image size / patch).
    pub patch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.2,
            racl_until_step: None,
            mode_probs: [1.0 / 3.0; 3],
            text_drop_rate: 0.1,
            ref_drop_rate: 0.1,
            lr: 1e-3,
            steps: 1000,
            batch_size: 4,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            loss_norm: LossNorm::Squared,
            reading: AttentionReading::SliceFullRows,
            checkpoint_every: 100,
            grad_max_norm: None,
            codec_seed: 7,
            patch: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let prob_sum: f64 = self.mode_probs.iter().sum();
        if (prob_sum - 1.0).abs() > 1e-9 || self.mode_probs.iter().any(|p| *p < 0.0) {
            return Err(Error::Config(format!(
                "mode probabilities {:?} must be nonnegative and sum to 1",
                self.mode_probs
            )));
        }
        for (name, rate) in [
            ("text_drop_rate", self.text_drop_rate),
            ("ref_drop_rate", self.ref_drop_rate),
        ] {
            if !(0.0..=1.0).contains(&rate) {
                return Err(Error::Config(format!("{name} {rate} outside [0, 1]")));
            }
        }
        if self.lambda < 0.0 {
            return Err(Error::Config(format!("λ {} must be ≥ 0", self.lambda)));
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be ≥ 1".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint interval must be ≥ 1".into()));
        }
        if self.patch == 0 {
            return Err(Error::Config("patch size must be ≥ 1".into()));
        }
        if let Some(max) = self.grad_max_norm {
            if max <= 0.0 {
                return Err(Error::Config(format!("grad_max_norm {max} must be positive")));
            }
        }
        Ok(())
    }
}

// ── modes and instance construction ─────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    TextToShot,
    ReferenceToShot,
    ShotToShot,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::TextToShot => "text_to_shot",
            Mode::ReferenceToShot => "reference_to_shot",
            Mode::ShotToShot => "shot_to_shot",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Mode> {
        match s {
            "text_to_shot" => Ok(Mode::TextToShot),
            "reference_to_shot" => Ok(Mode::ReferenceToShot),
            "shot_to_shot" => Ok(Mode::ShotToShot),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

/// Draw a mode from the `(text, reference, shot-to-shot)` mixture.
pub fn draw_mode(rng: &mut Rng, probs: [f64; 3]) -> Mode {
    let u = rng.next_f64();
    if u < probs[0] {
        Mode::TextToShot
    } else if u < probs[0] + probs[1] {
        Mode::ReferenceToShot
    } else {
        Mode::ShotToShot
    }
}

/// Uniform timestep clipped into the open interval `(0, 1)`.
pub fn sample_timestep(rng: &mut Rng) -> f64 {
    rng.next_f64().clamp(T_CLIP.0, T_CLIP.1)
}

/// Straight-path interpolation `z_t = (1−t)·z_shot + t·z_n`.
pub fn noise_latents(z_shot: &Tensor<f32>, z_n: &Tensor<f32>, t: f64) -> Result<Tensor<f32>> {
    if z_shot.shape() != z_n.shape() {
        return Err(Error::ShapeMismatch {
            op: "noise_latents",
            lhs: z_shot.shape().to_vec(),
            rhs: z_n.shape().to_vec(),
        });
    }
    let tf = t as f32;
    let data = z_shot
        .data()
        .iter()
        .zip(z_n.data())
        .map(|(&a, &b)| (1.0 - tf) * a + tf * b)
        .collect();
    Tensor::new(z_shot.shape().to_vec(), data)
}

/// One sample prepared for a training step: conditioning segments carry
/// clean latents, noised segments carry `z_t` and a velocity target.
#[derive(Debug, Clone)]
pub struct TrainingInstance {
    pub mode: Mode,
    pub t: f64,
    /// Clean reference latents `[d, h, w]` (empty in text-to-shot or after
    /// reference dropout).
    pub ref_latents: Vec<Tensor<f32>>,
    /// Per shot: `z_t` where noised, the clean latent where conditioning.
    pub shot_inputs: Vec<Tensor<f32>>,
    /// Per shot: `ε = z_n − z_shot` where noised, `None` on clean segments.
    pub targets: Vec<Option<Tensor<f32>>>,
    pub noised: Vec<bool>,
    pub ref_scripts: Vec<Vec<u16>>,
    pub shot_scripts: Vec<Vec<u16>>,
    pub masks: RoleMaskSet,
}

impl TrainingInstance {
    pub fn k(&self) -> usize {
        self.ref_latents.len()
    }

    pub fn s(&self) -> usize {
        self.shot_inputs.len()
    }
}

/// Copy shot `i` out of a packed `[s, d, h, w]` latent tensor.
fn shot_slice(latents: &Tensor<f32>, i: usize) -> Tensor<f32> {
    let sh = latents.shape();
    let per = sh[1] * sh[2] * sh[3];
    Tensor::new(vec![sh[1], sh[2], sh[3]], latents.data()[i * per..(i + 1) * per].to_vec())
        .expect("contiguous slice")
}

/// Encode a sample and noise it according to `mode`.
///
/// Noise flags per mode: reference-to-shot and text-to-shot noise every
/// shot at one shared `t` (text-to-shot additionally drops the reference
/// segments); shot-to-shot keeps a random prefix of `m ∈ {1..S−1}` shots
/// clean as conditions and noises the rest.
pub fn make_training_instance(
    codec: &CodecWeights,
    sample: &StoryboardSample,
    mode: Mode,
    rng: &mut Rng,
) -> Result<TrainingInstance> {
    let s = sample.s();
    let noised: Vec<bool> = match mode {
        Mode::TextToShot | Mode::ReferenceToShot => vec![true; s],
        Mode::ShotToShot => {
            if s < 2 {
                return Err(Error::Contract(format!(
                    "shot-to-shot conditioning needs at least 2 shots, sample has {s}"
                )));
            }
            let clean = 1 + rng.next_below(s - 1);
            (0..s).map(|i| i >= clean).collect()
        }
    };
    let t = sample_timestep(rng);

    let shot_images: Vec<_> = sample.shots.iter().map(|sh| sh.image.clone()).collect();
    let packed = codec.encode_shots(&shot_images, 1)?;
    let (h, w) = (packed.shape()[2], packed.shape()[3]);

    let (ref_latents, ref_scripts) = match mode {
        Mode::TextToShot => (Vec::new(), Vec::new()),
        _ => (
            sample
                .refs
                .iter()
                .map(|r| Ok(shot_slice(&codec.encode_reference(&r.image)?, 0)))
                .collect::<Result<Vec<_>>>()?,
            sample.refs.iter().map(|r| r.script.clone()).collect(),
        ),
    };

    let mut shot_inputs = Vec::with_capacity(s);
    let mut targets = Vec::with_capacity(s);
    for (i, &flag) in noised.iter().enumerate() {
        let clean = shot_slice(&packed, i);
        if flag {
            let z_n = Tensor::<f32>::randn(clean.shape().to_vec(), rng);
            let z_t = noise_latents(&clean, &z_n, t)?;
            let eps_data: Vec<f32> = z_n
                .data()
                .iter()
                .zip(clean.data())
                .map(|(&n, &c)| n - c)
                .collect();
            let eps = Tensor::new(clean.shape().to_vec(), eps_data)?;
            // The defining identity of the target, asserted at the moment
            // of construction.
            for ((&e, &n), &c) in eps.data().iter().zip(z_n.data()).zip(clean.data()) {
                assert_eq!(e, n - c, "velocity target must equal z_n − z_shot");
            }
            shot_inputs.push(z_t);
            targets.push(Some(eps));
        } else {
            shot_inputs.push(clean);
            targets.push(None);
        }
    }

    let mut masks = RoleMaskSet::from_sample(sample, h, w)?;
    if matches!(mode, Mode::TextToShot) {
        masks.ref_masks.clear();
    }

    Ok(TrainingInstance {
        mode,
        t,
        ref_latents,
        shot_inputs,
        targets,
        noised,
        ref_scripts,
        shot_scripts: sample.shots.iter().map(|sh| sh.script.clone()).collect(),
        masks,
    })
}

/// Classifier-free-guidance dropout: with `text_rate`, all shot scripts are
/// replaced by the null script; with `ref_rate`, reference segments are
/// removed entirely. Both draws happen independently every call (fixed
/// generator consumption), and both may fire together.
pub fn condition_dropout(
    mut instance: TrainingInstance,
    rng: &mut Rng,
    text_rate: f64,
    ref_rate: f64,
) -> TrainingInstance {
    let drop_text = rng.next_f64() < text_rate;
    let drop_ref = rng.next_f64() < ref_rate;
    if drop_text {
        for script in &mut instance.shot_scripts {
            script.clear();
        }
    }
    if drop_ref {
        instance.ref_latents.clear();
        instance.ref_scripts.clear();
        instance.masks.ref_masks.clear();
    }
    instance
}

// ── losses ──────────────────────────────────────────────────────────────

/// Velocity-matching loss: mean over noised-segment elements of the squared
/// (or absolute) prediction error. Clean segments contribute nothing — not
/// to the numerator, not to the denominator, not to the gradient.
pub fn diff_loss<S: Scalar>(
    tape: &mut Tape<S>,
    pred: Var,
    targets: &[Option<Tensor<f32>>],
    norm: LossNorm,
) -> Result<Var> {
    let sh = tape.shape(pred).to_vec();
    if sh.len() != 4 || sh[0] != targets.len() {
        return Err(Error::InvalidShape {
            shape: sh,
            reason: format!("diff_loss wants [{}, d, h, w] predictions", targets.len()),
        });
    }
    let per = sh[1] * sh[2] * sh[3];
    let mut sums = Vec::new();
    let mut count = 0usize;
    for (i, target) in targets.iter().enumerate() {
        let Some(eps) = target else { continue };
        if eps.shape() != &sh[1..] {
            return Err(Error::ShapeMismatch {
                op: "diff_loss",
                lhs: sh[1..].to_vec(),
                rhs: eps.shape().to_vec(),
            });
        }
        let row = tape.slice(pred, &[(i, i + 1), (0, sh[1]), (0, sh[2]), (0, sh[3])])?;
        let target_var = tape.constant(eps.cast::<S>().reshaped(vec![1, sh[1], sh[2], sh[3]])?);
        let diff = tape.sub(row, target_var)?;
        let contrib = match norm {
            LossNorm::Squared => tape.mul(diff, diff)?,
            LossNorm::L1 => tape.abs(diff),
        };
        sums.push(tape.sum_all(contrib));
        count += per;
    }
    if sums.is_empty() {
        return Err(Error::Contract(
            "diff_loss over an instance with no noised segments".into(),
        ));
    }
    let total = tape.sum_vars(&sums)?;
    Ok(tape.scale(total, S::from_f64(1.0 / count as f64)))
}

// ── optimizer ───────────────────────────────────────────────────────────

/// Adam with bias correction and zero weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step_count: u64,
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Adam {
        let zeros = |t: &Tensor<f32>| Tensor::zeros(t.shape().to_vec());
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            step_count: 0,
            m: store.iter().map(|(_, t)| zeros(t)).collect(),
            v: store.iter().map(|(_, t)| zeros(t)).collect(),
        }
    }

    pub fn from_config(store: &ParamStore, cfg: &TrainConfig) -> Adam {
        Adam::new(store, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update over all parameters, `grads` indexed like the store.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor<f32>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        self.step_count += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
        let lr = self.lr as f32;
        let (bc1, bc2, eps) = (bc1 as f32, bc2 as f32, self.eps as f32);
        for idx in 0..store.len() {
            if grads[idx].shape() != store.tensor(idx).shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    lhs: store.tensor(idx).shape().to_vec(),
                    rhs: grads[idx].shape().to_vec(),
                });
            }
            let g = grads[idx].data();
            let m = self.m[idx].data_mut();
            let v = self.v[idx].data_mut();
            let w = store.tensor_mut(idx).data_mut();
            for j in 0..g.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                w[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut [Tensor<f32>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let factor = (max_norm / norm) as f32;
        for g in grads {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }
    norm
}

// ── the step ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub l_diff: f64,
    pub l_rac: f64,
    pub l_total: f64,
}

/// Forward + loss + backward + optimizer update over one batch.
///
/// Attention capture (and with it the consistency loss) is active while
/// `step < racl_until_step` and `λ > 0`; instances without reference
/// segments contribute no consistency term. Aborts on non-finite loss.
pub fn train_step(
    model: &mut Model,
    opt: &mut Adam,
    batch: &[TrainingInstance],
    cfg: &TrainConfig,
    step: usize,
) -> Result<StepLosses> {
    if batch.is_empty() {
        return Err(Error::Contract("empty training batch".into()));
    }
    let lambda = match cfg.racl_until_step {
        Some(until) if step >= until => 0.0,
        _ => cfg.lambda,
    };
    let capture = lambda > 0.0;

    let mut tape: Tape<f32> = Tape::new();
    let pv = ParamVars::leaf_all(&mut tape, &model.store);
    let mut diff_terms = Vec::with_capacity(batch.len());
    let mut rac_terms = Vec::new();
    for inst in batch {
        let seq = build_token_sequence(
            &inst.ref_latents,
            &inst.shot_inputs,
            &inst.noised,
            model.config.strategy,
        )?;
        let scripts = scripts_in_order(&seq, &inst.ref_scripts, &inst.shot_scripts)?;
        let out = forward_on_tape(
            &mut tape,
            &model.store,
            &pv,
            &model.config,
            &seq,
            &scripts,
            inst.t,
            capture,
        )?;
        diff_terms.push(diff_loss(&mut tape, out.velocity, &inst.targets, cfg.loss_norm)?);
        if capture && inst.k() > 0 {
            let rac = racl_loss(&mut tape, &out.records, &seq, &inst.masks, cfg.reading)?;
            rac_terms.push(rac.loss);
        }
    }

    let diff_sum = tape.sum_vars(&diff_terms)?;
    let l_diff = tape.scale(diff_sum, 1.0 / diff_terms.len() as f32);
    let (l_rac_value, total) = if rac_terms.is_empty() {
        (0.0, l_diff)
    } else {
        let rac_sum = tape.sum_vars(&rac_terms)?;
        let l_rac = tape.scale(rac_sum, 1.0 / rac_terms.len() as f32);
        let weighted = tape.scale(l_rac, lambda as f32);
        let total = tape.add(l_diff, weighted)?;
        (tape.value(l_rac).item()?.into(), total)
    };
    let l_diff_value: f64 = tape.value(l_diff).item()?.into();
    let l_total_value: f64 = tape.value(total).item()?.into();
    if !l_total_value.is_finite() {
        return Err(Error::TrainingAborted {
            step,
            mode: batch[0].mode.to_string(),
            t: batch[0].t,
            reason: format!("non-finite loss (diff {l_diff_value}, rac {l_rac_value})"),
        });
    }

    tape.backward(total)?;
    let mut grads: Vec<Tensor<f32>> = (0..model.store.len())
        .map(|i| tape.grad(pv.at(i)))
        .collect();
    if let Some(max) = cfg.grad_max_norm {
        clip_grad_norm(&mut grads, max);
    }
    opt.step(&mut model.store, &grads)?;

    Ok(StepLosses {
        l_diff: l_diff_value,
        l_rac: l_rac_value,
        l_total: l_total_value,
    })
}

// ── checkpoints ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainManifest {
    /// Steps completed when the checkpoint was written (= next step index).
    pub step: usize,
    pub rng_state: [u64; 4],
    pub adam_step_count: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

pub fn save_checkpoint(
    dir: &Path,
    model: &Model,
    opt: &Adam,
    rng: &Rng,
    step: usize,
    train_cfg: &TrainConfig,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    model.save_weights(&dir.join("weights"))?;
    let adam_dir = dir.join("adam");
    std::fs::create_dir_all(&adam_dir)
        .map_err(|e| Error::io(adam_dir.display().to_string(), e))?;
    for (idx, (name, _)) in model.store.iter().enumerate() {
        write_tensor(adam_dir.join(format!("{name}.m.dstn")), &opt.m[idx])?;
        write_tensor(adam_dir.join(format!("{name}.v.dstn")), &opt.v[idx])?;
    }
    let manifest = TrainManifest {
        step,
        rng_state: rng.state(),
        adam_step_count: opt.step_count,
        model: model.config.clone(),
        train: train_cfg.clone(),
    };
    let path = dir.join("manifest.json");
    let body = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Contract(format!("serialize checkpoint manifest: {e}")))?;
    std::fs::write(&path, body).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_checkpoint(dir: &Path) -> Result<(Model, Adam, Rng, TrainManifest)> {
    let path = dir.join("manifest.json");
    let body = std::fs::read_to_string(&path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let manifest: TrainManifest = serde_json::from_str(&body)
        .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    manifest.train.validate()?;
    let model = Model::load_weights(manifest.model.clone(), &dir.join("weights"))?;
    let mut opt = Adam::from_config(&model.store, &manifest.train);
    opt.step_count = manifest.adam_step_count;
    let adam_dir = dir.join("adam");
    for (idx, (name, tensor)) in model.store.iter().enumerate() {
        let m = read_tensor::<f32>(adam_dir.join(format!("{name}.m.dstn")))?;
        let v = read_tensor::<f32>(adam_dir.join(format!("{name}.v.dstn")))?;
        if m.shape() != tensor.shape() || v.shape() != tensor.shape() {
            return Err(Error::format(
                adam_dir.display().to_string(),
                format!("optimizer moment shape mismatch for {name}"),
            ));
        }
        opt.m[idx] = m;
        opt.v[idx] = v;
    }
    let rng = Rng::from_state(manifest.rng_state);
    Ok((model, opt, rng, manifest))
}

// ── the loop ────────────────────────────────────────────────────────────

pub const METRICS_HEADER: &str = "step,mode,l_diff,l_rac,l_total";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub mode: Mode,
    pub l_diff: f64,
    pub l_rac: f64,
    pub l_total: f64,
    /// In-memory only — deliberately kept out of the CSV so a rerun from
    /// the same manifest reproduces the log byte-for-byte.
    pub wallclock_ms: u128,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{:.9e},{:.9e},{:.9e}",
            self.step, self.mode, self.l_diff, self.l_rac, self.l_total
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub rows: Vec<MetricsRow>,
    pub checkpoints: Vec<PathBuf>,
    pub metrics_path: PathBuf,
}

/// Train a fresh model on `dataset`, logging metrics and writing periodic
/// checkpoints under `out_dir`.
pub fn train_loop(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    dataset: &[StoryboardSample],
    out_dir: &Path,
) -> Result<(Model, TrainReport)> {
    train_cfg.validate()?;
    let mut model = Model::new(model_cfg.clone(), train_cfg.seed)?;
    let mut opt = Adam::from_config(&model.store, train_cfg);
    // A fresh run must not inherit a previous run's log — reruns from the
    // same manifest have to reproduce metrics.csv byte-for-byte.
    let stale = out_dir.join("metrics.csv");
    if stale.exists() {
        std::fs::remove_file(&stale).map_err(|e| Error::io(stale.display().to_string(), e))?;
    }
    // The training stream is derived so it does not overlap the weight
    // initialization stream (both come from the same seed).
    let mut rng = Rng::seed_from_u64(train_cfg.seed).derive(0x7261696e);
    run_loop(&mut model, &mut opt, &mut rng, 0, train_cfg, dataset, out_dir)
        .map(|report| (model, report))
}

/// Continue training from a checkpoint directory; the stored manifest
/// supplies both configs and the generator state, so the continuation is
/// bit-identical to the run that never stopped.
pub fn resume_train_loop(
    checkpoint_dir: &Path,
    dataset: &[StoryboardSample],
    out_dir: &Path,
) -> Result<(Model, TrainReport)> {
    let (mut model, mut opt, mut rng, manifest) = load_checkpoint(checkpoint_dir)?;
    run_loop(
        &mut model,
        &mut opt,
        &mut rng,
        manifest.step,
        &manifest.train,
        dataset,
        out_dir,
    )
    .map(|report| (model, report))
}

fn run_loop(
    model: &mut Model,
    opt: &mut Adam,
    rng: &mut Rng,
    start_step: usize,
    cfg: &TrainConfig,
    dataset: &[StoryboardSample],
    out_dir: &Path,
) -> Result<TrainReport> {
    if dataset.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let codec = CodecWeights::seeded(cfg.codec_seed, model.config.latent_dim, cfg.patch)?;

    let metrics_path = out_dir.join("metrics.csv");
    let fresh = !metrics_path.exists();
    let mut metrics = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(metrics_path.display().to_string(), e))?;
    if fresh {
        writeln!(metrics, "{METRICS_HEADER}")
            .map_err(|e| Error::io(metrics_path.display().to_string(), e))?;
    }

    let mut rows = Vec::new();
    let mut checkpoints = Vec::new();
    for step in start_step..cfg.steps {
        let t0 = Instant::now();
        let mode = draw_mode(rng, cfg.mode_probs);
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let idx = rng.next_below(dataset.len());
            let inst = make_training_instance(&codec, &dataset[idx], mode, rng)?;
            batch.push(condition_dropout(inst, rng, cfg.text_drop_rate, cfg.ref_drop_rate));
        }
        let losses = train_step(model, opt, &batch, cfg, step)?;
        let row = MetricsRow {
            step,
            mode,
            l_diff: losses.l_diff,
            l_rac: losses.l_rac,
            l_total: losses.l_total,
            wallclock_ms: t0.elapsed().as_millis(),
        };
        writeln!(metrics, "{}", row.to_csv())
            .map_err(|e| Error::io(metrics_path.display().to_string(), e))?;
        rows.push(row);

        if (step + 1) % cfg.checkpoint_every == 0 || step + 1 == cfg.steps {
            let dir = out_dir.join("checkpoints").join(format!("step_{}", step + 1));
            save_checkpoint(&dir, model, opt, rng, step + 1, cfg)?;
            checkpoints.push(dir);
        }
    }
    Ok(TrainReport {
        rows,
        checkpoints,
        metrics_path,
    })
}
