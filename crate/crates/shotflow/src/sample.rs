//! Guided sampling: reference-free classifier-free guidance over the flow
//! ODE.
//!
//! Each integration step runs the model up to three times on the identical
//! noised state — once with no references and null scripts, once with
//! references but null scripts, once fully conditioned — and combines the
//! velocities as
//!
//! ```text
//! v = v_∅ + ω1·(v_refneg − v_∅) + ω2·(v_refpos − v_refneg)
//! ```
//!
//! before an Euler update `z ← z − dt·v` from `t = 1` (noise) down to
//! `t = 0`. The combination happens in velocity space: for a linear Euler
//! step this is affinely equivalent to combining one-step-denoised latents.
//! When no references exist the middle state coincides with the first, and
//! the sampler runs two forwards per step instead of three.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::CodecWeights;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{build_token_sequence, scripts_in_order, Model};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::train::Mode;

// ── configuration ───────────────────────────────────────────────────────

/// Whether to apply the full guidance combination or only the positive
/// (fully conditioned) forward — the latter exists as a baseline and for
/// verifying the `ω1 = ω2 = 1` collapse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum GuidancePolicy {
    #[default]
    Guided,
    PositiveOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub omega1: f64,
    pub omega2: f64,
    pub num_steps: usize,
    pub seed: u64,
    pub policy: GuidancePolicy,
    /// Diagnostic: run the degenerate middle forward even when `K = 0`
    /// instead of reusing the unconditional one.
    pub force_three_forwards: bool,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            omega1: 4.0,
            omega2: 5.0,
            num_steps: 50,
            seed: 0,
            policy: GuidancePolicy::Guided,
            force_three_forwards: false,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_steps == 0 {
            return Err(Error::Config("num_steps must be ≥ 1".into()));
        }
        if !self.omega1.is_finite() || !self.omega2.is_finite() {
            return Err(Error::Config(format!(
                "guidance weights ({}, {}) must be finite",
                self.omega1, self.omega2
            )));
        }
        Ok(())
    }
}

/// What to generate: scripts for every shot, plus the conditioning images
/// the mode calls for.
#[derive(Debug, Clone)]
pub struct SampleRequest {
    pub mode: Mode,
    pub image_size: usize,
    pub ref_images: Vec<Image>,
    pub ref_scripts: Vec<Vec<u16>>,
    /// One script per shot, clean preceding shots included.
    pub shot_scripts: Vec<Vec<u16>>,
    /// Clean shots conditioning a shot-to-shot continuation; always a
    /// prefix of the storyboard.
    pub preceding: Vec<Image>,
}

impl SampleRequest {
    fn validate(&self) -> Result<()> {
        let (k, s, m) = (self.ref_images.len(), self.shot_scripts.len(), self.preceding.len());
        if s == 0 {
            return Err(Error::Usage("a sample needs at least one shot script".into()));
        }
        if self.ref_scripts.len() != k {
            return Err(Error::Usage(format!(
                "{k} reference images but {} reference scripts",
                self.ref_scripts.len()
            )));
        }
        match self.mode {
            Mode::TextToShot => {
                if k != 0 || m != 0 {
                    return Err(Error::Usage(
                        "text-to-shot takes no reference images and no preceding shots".into(),
                    ));
                }
            }
            Mode::ReferenceToShot => {
                if k == 0 {
                    return Err(Error::Usage(
                        "reference-to-shot needs at least one reference image".into(),
                    ));
                }
                if m != 0 {
                    return Err(Error::Usage(
                        "reference-to-shot takes no preceding shots".into(),
                    ));
                }
            }
            Mode::ShotToShot => {
                if m == 0 {
                    return Err(Error::Usage(
                        "shot-to-shot needs at least one clean preceding shot".into(),
                    ));
                }
                if m >= s {
                    return Err(Error::Usage(format!(
                        "{m} preceding shots leave nothing to generate out of {s}"
                    )));
                }
            }
        }
        for img in self.ref_images.iter().chain(&self.preceding) {
            if img.height() != self.image_size || img.width() != self.image_size {
                return Err(Error::Usage(format!(
                    "conditioning image is {}×{}, request says {}",
                    img.height(),
                    img.width(),
                    self.image_size
                )));
            }
        }
        Ok(())
    }
}

// ── guidance algebra ────────────────────────────────────────────────────

/// The three velocities of one guidance step, all evaluated on the same
/// `z_t` and `t`.
#[derive(Debug, Clone)]
pub struct GuidanceOutputs {
    /// No references, null scripts.
    pub v_uncond_neg: Tensor<f32>,
    /// References present, null scripts.
    pub v_ref_neg: Tensor<f32>,
    /// References present, real scripts.
    pub v_ref_pos: Tensor<f32>,
}

/// Combine the guidance outputs. Arithmetic runs in f64 per element so the
/// `ω1 = ω2 = 1` telescoping collapse lands back on `v_ref_pos` exactly
/// after rounding to f32.
pub fn guided_velocity(g: &GuidanceOutputs, omega1: f64, omega2: f64) -> Result<Tensor<f32>> {
    if g.v_uncond_neg.shape() != g.v_ref_neg.shape()
        || g.v_ref_neg.shape() != g.v_ref_pos.shape()
    {
        return Err(Error::Contract(format!(
            "guidance outputs disagree in shape: {:?} / {:?} / {:?}",
            g.v_uncond_neg.shape(),
            g.v_ref_neg.shape(),
            g.v_ref_pos.shape()
        )));
    }
    let data = g
        .v_uncond_neg
        .data()
        .iter()
        .zip(g.v_ref_neg.data())
        .zip(g.v_ref_pos.data())
        .map(|((&vu, &vn), &vp)| {
            let (vu, vn, vp) = (vu as f64, vn as f64, vp as f64);
            (vu + omega1 * (vn - vu) + omega2 * (vp - vn)) as f32
        })
        .collect();
    Tensor::new(g.v_uncond_neg.shape().to_vec(), data)
}

/// One explicit Euler update of the flow ODE toward `t = 0`.
pub fn euler_step(z: &Tensor<f32>, v: &Tensor<f32>, dt: f64) -> Result<Tensor<f32>> {
    if z.shape() != v.shape() {
        return Err(Error::ShapeMismatch {
            op: "euler_step",
            lhs: z.shape().to_vec(),
            rhs: v.shape().to_vec(),
        });
    }
    let dtf = dt as f32;
    let data = z
        .data()
        .iter()
        .zip(v.data())
        .map(|(&zi, &vi)| zi - dtf * vi)
        .collect();
    Tensor::new(z.shape().to_vec(), data)
}

// ── the sampler ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepStat {
    pub step: usize,
    pub t: f64,
    /// L2 norm of the guided velocity over generated-shot elements.
    pub v_norm: f64,
    /// L2 norm of the generated-shot latents after the update.
    pub z_norm: f64,
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    /// All `S` shots, preceding ones decoded from their held-fixed latents.
    pub images: Vec<Image>,
    /// Final `[S, d, h, w]` shot latents.
    pub latents: Tensor<f32>,
    /// Which shots were generated (vs held as clean conditions).
    pub generated: Vec<bool>,
    pub model_calls: usize,
    pub per_step: Vec<StepStat>,
}

fn latent_slice(packed: &Tensor<f32>, i: usize) -> Tensor<f32> {
    let sh = packed.shape();
    let per = sh[1] * sh[2] * sh[3];
    Tensor::new(vec![sh[1], sh[2], sh[3]], packed.data()[i * per..(i + 1) * per].to_vec())
        .expect("contiguous slice")
}

fn norm_over(latents: &[Tensor<f32>], generated: &[bool]) -> f64 {
    latents
        .iter()
        .zip(generated)
        .filter(|(_, &g)| g)
        .flat_map(|(z, _)| z.data())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt()
}

/// Run the guided sampler: integrate the flow ODE from seeded noise to
/// storyboard latents and decode them. Deterministic given the seed.
pub fn sample(
    model: &Model,
    codec: &CodecWeights,
    request: &SampleRequest,
    config: &SampleConfig,
) -> Result<SampleOutput> {
    config.validate()?;
    request.validate()?;
    if request.image_size % codec.p != 0 {
        return Err(Error::Usage(format!(
            "image size {} not divisible by codec patch {}",
            request.image_size, codec.p
        )));
    }
    let (k, s) = (request.ref_images.len(), request.shot_scripts.len());
    let grid = request.image_size / codec.p;
    let d = model.config.latent_dim;

    let ref_latents: Vec<Tensor<f32>> = request
        .ref_images
        .iter()
        .map(|img| Ok(latent_slice(&codec.encode_reference(img)?, 0)))
        .collect::<Result<Vec<_>>>()?;

    let m = request.preceding.len();
    let generated: Vec<bool> = (0..s).map(|i| i >= m).collect();
    let mut shot_latents: Vec<Tensor<f32>> = Vec::with_capacity(s);
    if m > 0 {
        let packed = codec.encode_shots(&request.preceding, 1)?;
        for i in 0..m {
            shot_latents.push(latent_slice(&packed, i));
        }
    }
    let mut rng = Rng::seed_from_u64(config.seed);
    for _ in m..s {
        shot_latents.push(Tensor::randn(vec![d, grid, grid], &mut rng));
    }
    let clean_before: Vec<Tensor<f32>> = shot_latents[..m].to_vec();

    let null_ref_scripts = vec![Vec::new(); k];
    let null_shot_scripts = vec![Vec::new(); s];
    let noised = generated.clone();

    let dt = 1.0 / config.num_steps as f64;
    let mut model_calls = 0usize;
    let mut per_step = Vec::with_capacity(config.num_steps);
    for step in 0..config.num_steps {
        let t = 1.0 - step as f64 * dt;

        // Fully conditioned forward (shared sequence for both ref states).
        let seq_ref =
            build_token_sequence(&ref_latents, &shot_latents, &noised, model.config.strategy)?;
        let scripts_pos =
            scripts_in_order(&seq_ref, &request.ref_scripts, &request.shot_scripts)?;
        let (v_ref_pos, _) = model.forward_values(&seq_ref, &scripts_pos, t, false)?;
        model_calls += 1;

        let v = match config.policy {
            GuidancePolicy::PositiveOnly => v_ref_pos,
            GuidancePolicy::Guided => {
                // References present, null scripts.
                let scripts_neg =
                    scripts_in_order(&seq_ref, &null_ref_scripts, &null_shot_scripts)?;
                let (v_ref_neg, _) = model.forward_values(&seq_ref, &scripts_neg, t, false)?;
                model_calls += 1;

                // No references, null scripts. With K = 0 the previous
                // forward already IS this state; reuse it.
                let v_uncond_neg = if k == 0 && !config.force_three_forwards {
                    v_ref_neg.clone()
                } else {
                    let seq_unc = build_token_sequence(
                        &[],
                        &shot_latents,
                        &noised,
                        model.config.strategy,
                    )?;
                    let scripts_unc =
                        scripts_in_order(&seq_unc, &[], &null_shot_scripts)?;
                    let (v, _) = model.forward_values(&seq_unc, &scripts_unc, t, false)?;
                    model_calls += 1;
                    v
                };
                guided_velocity(
                    &GuidanceOutputs {
                        v_uncond_neg,
                        v_ref_neg,
                        v_ref_pos,
                    },
                    config.omega1,
                    config.omega2,
                )?
            }
        };

        let mut v_slices = Vec::with_capacity(s);
        for i in 0..s {
            v_slices.push(latent_slice(&v, i));
        }
        for i in 0..s {
            if generated[i] {
                shot_latents[i] = euler_step(&shot_latents[i], &v_slices[i], dt)?;
            }
        }
        per_step.push(StepStat {
            step,
            t,
            v_norm: norm_over(&v_slices, &generated),
            z_norm: norm_over(&shot_latents, &generated),
        });
    }

    // Clean conditioning latents must be untouched.
    for (before, after) in clean_before.iter().zip(&shot_latents) {
        if before.data() != after.data() {
            return Err(Error::Contract(
                "sampler mutated a clean conditioning latent".into(),
            ));
        }
    }

    let mut packed = Vec::with_capacity(s * d * grid * grid);
    for z in &shot_latents {
        packed.extend_from_slice(z.data());
    }
    let latents = Tensor::new(vec![s, d, grid, grid], packed)?;
    let images = codec.decode(&latents)?;

    Ok(SampleOutput {
        images,
        latents,
        generated,
        model_calls,
        per_step,
    })
}

// ── output files ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleManifest {
    pub seed: u64,
    pub mode: String,
    pub omega1: f64,
    pub omega2: f64,
    pub num_steps: usize,
    pub k: usize,
    pub s: usize,
    pub image_size: usize,
    pub model_calls: usize,
    pub generated: Vec<bool>,
    pub per_step: Vec<StepStat>,
    pub files: Vec<String>,
}

/// Lay conditioning references and shots out in one row, with a wider gap
/// between the two groups.
pub fn contact_sheet(refs: &[Image], shots: &[Image]) -> Result<Image> {
    let all: Vec<&Image> = refs.iter().chain(shots).collect();
    if all.is_empty() {
        return Err(Error::Contract("contact sheet of zero images".into()));
    }
    let (h, w) = (all[0].height(), all[0].width());
    for img in &all {
        if (img.height(), img.width()) != (h, w) {
            return Err(Error::ShapeMismatch {
                op: "contact_sheet",
                lhs: vec![h, w],
                rhs: vec![img.height(), img.width()],
            });
        }
    }
    let gutter = 2;
    let group_gap = if refs.is_empty() || shots.is_empty() { 0 } else { 6 };
    let total_w = all.len() * w + (all.len() - 1) * gutter + group_gap;
    let mut sheet = Image::new(h, total_w);
    for y in 0..h {
        for x in 0..total_w {
            sheet.set_rgb(y, x, [1.0, 1.0, 1.0]);
        }
    }
    let mut x0 = 0;
    for (i, img) in all.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                sheet.set_rgb(y, x0 + x, [img.get(0, y, x), img.get(1, y, x), img.get(2, y, x)]);
            }
        }
        x0 += w + gutter;
        if i + 1 == refs.len() {
            x0 += group_gap;
        }
    }
    Ok(sheet)
}

/// Write per-shot images, the contact sheet, and the JSON manifest into
/// `dir`. Returns the manifest.
pub fn write_sample_outputs(
    dir: &Path,
    request: &SampleRequest,
    config: &SampleConfig,
    output: &SampleOutput,
) -> Result<SampleManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut files = Vec::new();
    for (i, img) in output.images.iter().enumerate() {
        let name = format!("shot_{i}.ppm");
        img.write_ppm(dir.join(&name))?;
        files.push(name);
    }
    let sheet = contact_sheet(&request.ref_images, &output.images)?;
    sheet.write_ppm(dir.join("contact_sheet.ppm"))?;
    files.push("contact_sheet.ppm".into());

    let manifest = SampleManifest {
        seed: config.seed,
        mode: request.mode.to_string(),
        omega1: config.omega1,
        omega2: config.omega2,
        num_steps: config.num_steps,
        k: request.ref_images.len(),
        s: output.images.len(),
        image_size: request.image_size,
        model_calls: output.model_calls,
        generated: output.generated.clone(),
        per_step: output.per_step.clone(),
        files,
    };
    let path = dir.join("manifest.json");
    let body = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Contract(format!("serialize sample manifest: {e}")))?;
    std::fs::write(&path, body).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(manifest)
}

/// Convenience path for callers that want files on disk in one call.
pub fn sample_to_dir(
    model: &Model,
    codec: &CodecWeights,
    request: &SampleRequest,
    config: &SampleConfig,
    dir: &Path,
) -> Result<(SampleOutput, SampleManifest)> {
    let output = sample(model, codec, request, config)?;
    let manifest = write_sample_outputs(dir, request, config, &output)?;
    Ok((output, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, PositionalStrategy};
    use crate::synth::{gen_sample, StoryboardSample, SynthConfig};

    fn fixture_model() -> Model {
        Model::new(
            ModelConfig {
                d_model: 24,
                n_heads: 1,
                n_blocks: 1,
                vocab_size: crate::synth::vocab_size(),
                max_script_len: crate::synth::max_script_tokens(4),
                rope_theta: 10_000.0,
                strategy: PositionalStrategy::Prepend,
                latent_dim: 48,
            },
            160,
        )
        .unwrap()
    }

    fn fixture_codec() -> CodecWeights {
        CodecWeights::seeded(7, 48, 4).unwrap()
    }

    fn fixture_sample(seed: u64) -> StoryboardSample {
        let cfg = SynthConfig { k_range: (1, 1), s_range: (2, 2), size: 32 };
        gen_sample(&mut Rng::seed_from_u64(seed), &cfg).unwrap()
    }

    fn ref_request(sample: &StoryboardSample) -> SampleRequest {
        SampleRequest {
            mode: Mode::ReferenceToShot,
            image_size: sample.size,
            ref_images: sample.refs.iter().map(|r| r.image.clone()).collect(),
            ref_scripts: sample.refs.iter().map(|r| r.script.clone()).collect(),
            shot_scripts: sample.shots.iter().map(|s| s.script.clone()).collect(),
            preceding: Vec::new(),
        }
    }

    fn quick_config(seed: u64, steps: usize) -> SampleConfig {
        SampleConfig {
            num_steps: steps,
            seed,
            ..SampleConfig::default()
        }
    }

    // ── guidance algebra ────────────────────────────────────────────────

    #[test]
    fn guidance_scalar_example() {
        let g = GuidanceOutputs {
            v_uncond_neg: Tensor::scalar(0.0f32).reshaped(vec![1]).unwrap(),
            v_ref_neg: Tensor::scalar(1.0f32).reshaped(vec![1]).unwrap(),
            v_ref_pos: Tensor::scalar(2.0f32).reshaped(vec![1]).unwrap(),
        };
        let v = guided_velocity(&g, 4.0, 5.0).unwrap();
        assert_eq!(v.data(), &[9.0]);
    }

    #[test]
    fn guidance_collapses_at_unit_weights() {
        let mut rng = Rng::seed_from_u64(161);
        let g = GuidanceOutputs {
            v_uncond_neg: Tensor::randn(vec![2, 3], &mut rng),
            v_ref_neg: Tensor::randn(vec![2, 3], &mut rng),
            v_ref_pos: Tensor::randn(vec![2, 3], &mut rng),
        };
        let v = guided_velocity(&g, 1.0, 1.0).unwrap();
        // f64 internal arithmetic rounds back onto v_ref_pos bit-for-bit.
        assert_eq!(v.data(), g.v_ref_pos.data());
    }

    #[test]
    fn guidance_is_linear_in_each_input() {
        let mut rng = Rng::seed_from_u64(162);
        let base = GuidanceOutputs {
            v_uncond_neg: Tensor::randn(vec![4], &mut rng),
            v_ref_neg: Tensor::randn(vec![4], &mut rng),
            v_ref_pos: Tensor::randn(vec![4], &mut rng),
        };
        // ω1 = 0 removes the middle difference term exactly.
        let v = guided_velocity(&base, 0.0, 2.0).unwrap();
        for i in 0..4 {
            let expect = base.v_uncond_neg.data()[i] as f64
                + 2.0 * (base.v_ref_pos.data()[i] as f64 - base.v_ref_neg.data()[i] as f64);
            assert!((v.data()[i] as f64 - expect).abs() < 1e-6);
        }

        let bad = GuidanceOutputs {
            v_uncond_neg: Tensor::zeros(vec![3]),
            ..base
        };
        assert!(matches!(guided_velocity(&bad, 1.0, 1.0), Err(Error::Contract(_))));
    }

    // ── Euler integration ───────────────────────────────────────────────

    #[test]
    fn constant_velocity_recovers_data_in_one_step() {
        let mut rng = Rng::seed_from_u64(163);
        let z_shot = Tensor::<f32>::randn(vec![2, 2], &mut rng);
        let z_n = Tensor::<f32>::randn(vec![2, 2], &mut rng);
        let v: Vec<f32> = z_n.data().iter().zip(z_shot.data()).map(|(&n, &s)| n - s).collect();
        let v = Tensor::new(vec![2, 2], v).unwrap();
        let z0 = euler_step(&z_n, &v, 1.0).unwrap();
        for (a, b) in z0.data().iter().zip(z_shot.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        // num_steps = 1 is plain extrapolation z_n − v.
        for ((&z, &n), &vi) in z0.data().iter().zip(z_n.data()).zip(v.data()) {
            assert_eq!(z, n - vi);
        }
    }

    #[test]
    fn halving_dt_halves_the_integration_error() {
        // Quadratic field dz/dt = z² has the exact solution
        // z(t) = 1 / (1/z(1) + 1 − t); integrate t: 1 → 0 with Euler.
        let exact = |z1: f64| 1.0 / (1.0 / z1 + 1.0);
        let integrate = |n: usize, z1: f64| {
            let dt = 1.0 / n as f64;
            let mut z = Tensor::new(vec![1], vec![z1 as f32]).unwrap();
            for _ in 0..n {
                let v = Tensor::new(vec![1], vec![z.data()[0] * z.data()[0]]).unwrap();
                z = euler_step(&z, &v, dt).unwrap();
            }
            z.data()[0] as f64
        };
        let z1 = 0.5;
        let err_n = (integrate(40, z1) - exact(z1)).abs();
        let err_2n = (integrate(80, z1) - exact(z1)).abs();
        let ratio = err_n / err_2n;
        assert!((1.5..=2.5).contains(&ratio), "Richardson ratio {ratio}");
    }

    // ── sampler behavior ────────────────────────────────────────────────

    #[test]
    fn sampling_is_deterministic_in_the_seed() {
        let model = fixture_model();
        let codec = fixture_codec();
        let request = ref_request(&fixture_sample(164));
        let a = sample(&model, &codec, &request, &quick_config(5, 3)).unwrap();
        let b = sample(&model, &codec, &request, &quick_config(5, 3)).unwrap();
        assert_eq!(a.latents.data(), b.latents.data());
        for (x, y) in a.images.iter().zip(&b.images) {
            assert_eq!(x.to_ppm_bytes(), y.to_ppm_bytes());
        }
        let c = sample(&model, &codec, &request, &quick_config(6, 3)).unwrap();
        assert_ne!(a.latents.data(), c.latents.data());
    }

    #[test]
    fn model_call_counter_matches_the_guidance_states() {
        let model = fixture_model();
        let codec = fixture_codec();
        let synth = fixture_sample(165);

        let request = ref_request(&synth);
        let out = sample(&model, &codec, &request, &quick_config(1, 4)).unwrap();
        assert_eq!(out.model_calls, 3 * 4);

        let text = SampleRequest {
            mode: Mode::TextToShot,
            ref_images: Vec::new(),
            ref_scripts: Vec::new(),
            ..ref_request(&synth)
        };
        let out2 = sample(&model, &codec, &text, &quick_config(1, 4)).unwrap();
        assert_eq!(out2.model_calls, 2 * 4);

        // Forcing the degenerate third forward must not change the result.
        let forced_cfg = SampleConfig {
            force_three_forwards: true,
            ..quick_config(1, 4)
        };
        let out3 = sample(&model, &codec, &text, &forced_cfg).unwrap();
        assert_eq!(out3.model_calls, 3 * 4);
        for (a, b) in out2.latents.data().iter().zip(out3.latents.data()) {
            assert!((a - b).abs() < 1e-7, "{a} vs {b}");
        }

        let positive_cfg = SampleConfig {
            policy: GuidancePolicy::PositiveOnly,
            ..quick_config(1, 4)
        };
        let out4 = sample(&model, &codec, &request, &positive_cfg).unwrap();
        assert_eq!(out4.model_calls, 4);
    }

    #[test]
    fn clean_preceding_shots_are_held_fixed() {
        let model = fixture_model();
        let codec = fixture_codec();
        let synth = fixture_sample(166);
        let request = SampleRequest {
            mode: Mode::ShotToShot,
            preceding: vec![synth.shots[0].image.clone()],
            ..ref_request(&synth)
        };
        let out = sample(&model, &codec, &request, &quick_config(2, 3)).unwrap();
        assert_eq!(out.generated, vec![false, true]);

        // The preceding shot's final latent is bit-identical to its encode.
        let encoded = codec.encode_shots(&[synth.shots[0].image.clone()], 1).unwrap();
        let first = latent_slice(&out.latents, 0);
        assert_eq!(first.data(), latent_slice(&encoded, 0).data());
        // And it decodes back to the input image up to codec round-trip
        // rounding (f32-valued pixels can straddle a u8 boundary, so byte
        // equality of the PPM is not guaranteed).
        let orig = &synth.shots[0].image;
        for c in 0..3 {
            for y in 0..orig.height() {
                for x in 0..orig.width() {
                    assert!((out.images[0].get(c, y, x) - orig.get(c, y, x)).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn unit_weights_match_the_positive_only_sampler() {
        let model = fixture_model();
        let codec = fixture_codec();
        let request = ref_request(&fixture_sample(167));
        let guided_cfg = SampleConfig {
            omega1: 1.0,
            omega2: 1.0,
            ..quick_config(9, 4)
        };
        let positive_cfg = SampleConfig {
            policy: GuidancePolicy::PositiveOnly,
            ..guided_cfg.clone()
        };
        let a = sample(&model, &codec, &request, &guided_cfg).unwrap();
        let b = sample(&model, &codec, &request, &positive_cfg).unwrap();
        for (x, y) in a.latents.data().iter().zip(b.latents.data()) {
            assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
    }

    #[test]
    fn mode_prerequisites_are_enforced() {
        let model = fixture_model();
        let codec = fixture_codec();
        let synth = fixture_sample(168);
        let base = ref_request(&synth);

        let no_refs = SampleRequest {
            ref_images: Vec::new(),
            ref_scripts: Vec::new(),
            ..base.clone()
        };
        assert!(matches!(
            sample(&model, &codec, &no_refs, &quick_config(0, 1)),
            Err(Error::Usage(_))
        ));

        let text_with_refs = SampleRequest { mode: Mode::TextToShot, ..base.clone() };
        assert!(matches!(
            sample(&model, &codec, &text_with_refs, &quick_config(0, 1)),
            Err(Error::Usage(_))
        ));

        let shot_without_preceding = SampleRequest { mode: Mode::ShotToShot, ..base.clone() };
        assert!(matches!(
            sample(&model, &codec, &shot_without_preceding, &quick_config(0, 1)),
            Err(Error::Usage(_))
        ));

        let zero_steps = SampleConfig { num_steps: 0, ..SampleConfig::default() };
        assert!(matches!(
            sample(&model, &codec, &base, &zero_steps),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn output_files_and_manifest() {
        let model = fixture_model();
        let codec = fixture_codec();
        let synth = fixture_sample(169);
        let request = ref_request(&synth);
        let tmp = tempfile::tempdir().unwrap();
        let (output, manifest) =
            sample_to_dir(&model, &codec, &request, &quick_config(3, 2), tmp.path()).unwrap();

        for i in 0..output.images.len() {
            assert!(tmp.path().join(format!("shot_{i}.ppm")).exists());
        }
        assert!(tmp.path().join("contact_sheet.ppm").exists());
        let body = std::fs::read_to_string(tmp.path().join("manifest.json")).unwrap();
        let parsed: SampleManifest = serde_json::from_str(&body).unwrap();
        assert_eq!(parsed.seed, 3);
        assert_eq!(parsed.num_steps, 2);
        assert_eq!(parsed.per_step.len(), 2);
        assert_eq!(parsed.model_calls, manifest.model_calls);
        assert!(parsed.per_step.iter().all(|s| s.v_norm.is_finite() && s.z_norm > 0.0));

        // Contact sheet: K refs + S shots in one row with gutters.
        let sheet = contact_sheet(&request.ref_images, &output.images).unwrap();
        let n = request.ref_images.len() + output.images.len();
        assert_eq!(sheet.height(), synth.size);
        assert_eq!(sheet.width(), n * synth.size + (n - 1) * 2 + 6);
    }
}
