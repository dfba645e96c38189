//! The storyboard transformer: velocity-field prediction over packed
//! shot/reference token sequences.
//!
//! Architecture, per block (pre-norm residuals throughout):
//!
//! 1. joint self-attention across all reference and shot tokens (3-axis
//!    rotary positions; optionally captured for attention supervision),
//! 2. shot-wise cross-attention — each segment attends only to its own
//!    script embedding, so conditioning is routed per shot,
//! 3. a SiLU MLP.
//!
//! A sinusoidal-MLP timestep embedding is added to every token before each
//! block. The output head reads the shot tokens (references are discarded)
//! and predicts one velocity vector per latent cell.
//!
//! Everything runs on the autodiff tape; the same code path serves training
//! (`f32`), finite-difference verification (`f64`), and inference.

pub mod params;
pub mod rope;
pub mod sequence;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::io::{read_tensor, write_tensor};
use crate::tensor::{Scalar, Tape, Tensor, Var};

pub use params::{ParamStore, ParamVars};
pub use rope::{rope_apply, rope_tables, RopePos, RopeTables};
pub use sequence::{
    build_token_sequence, default_phase_delta, PositionalStrategy, Segment, TokenSequence,
    DEFAULT_NEG_DELTA,
};

// ── configuration ───────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub vocab_size: usize,
    pub max_script_len: usize,
    pub rope_theta: f64,
    pub strategy: PositionalStrategy,
    /// Channel count of the latent cells the model consumes and predicts.
    pub latent_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 96,
            n_heads: 4,
            n_blocks: 4,
            vocab_size: crate::synth::vocab_size(),
            max_script_len: crate::synth::max_script_tokens(4),
            rope_theta: 10_000.0,
            strategy: PositionalStrategy::Prepend,
            latent_dim: 48,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.head_dim() % 6 != 0 {
            return Err(Error::Config(format!(
                "head_dim {} must be divisible by 6 (three rotary axes, two channels per pair)",
                self.head_dim()
            )));
        }
        if self.n_blocks == 0 {
            return Err(Error::Config("n_blocks must be ≥ 1".into()));
        }
        if self.vocab_size == 0 || self.max_script_len == 0 || self.latent_dim == 0 {
            return Err(Error::Config(
                "vocab_size, max_script_len, latent_dim must be ≥ 1".into(),
            ));
        }
        Ok(())
    }
}

// ── model and parameter layout ──────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
}

const INIT_STD: f64 = 0.02;

impl Model {
    /// Fresh model with Gaussian(0, 0.02) weights and zero biases, in the
    /// canonical parameter order.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = Rng::seed_from_u64(seed);
        let d = config.d_model;
        let mut store = ParamStore::new();
        let gauss = |store: &mut ParamStore, name: &str, shape: &[usize], rng: &mut Rng| {
            store.add(name, params::randn_init(shape, INIT_STD, rng))
        };
        let zeros = |store: &mut ParamStore, name: &str, shape: &[usize]| {
            store.add(name, Tensor::zeros(shape.to_vec()))
        };
        gauss(&mut store, "embed.table", &[config.vocab_size, d], &mut rng)?;
        gauss(&mut store, "embed.pos", &[config.max_script_len, d], &mut rng)?;
        gauss(&mut store, "embed.null", &[1, d], &mut rng)?;
        gauss(&mut store, "in_proj.w", &[config.latent_dim, d], &mut rng)?;
        zeros(&mut store, "in_proj.b", &[1, d])?;
        gauss(&mut store, "time.w1", &[d, d], &mut rng)?;
        zeros(&mut store, "time.b1", &[1, d])?;
        gauss(&mut store, "time.w2", &[d, d], &mut rng)?;
        zeros(&mut store, "time.b2", &[1, d])?;
        for b in 0..config.n_blocks {
            for part in ["attn", "cross"] {
                for mat in ["wq", "wk", "wv", "wo"] {
                    gauss(&mut store, &format!("block{b}.{part}.{mat}"), &[d, d], &mut rng)?;
                }
            }
            gauss(&mut store, &format!("block{b}.mlp.w1"), &[d, 4 * d], &mut rng)?;
            zeros(&mut store, &format!("block{b}.mlp.b1"), &[1, 4 * d])?;
            gauss(&mut store, &format!("block{b}.mlp.w2"), &[4 * d, d], &mut rng)?;
            zeros(&mut store, &format!("block{b}.mlp.b2"), &[1, d])?;
        }
        gauss(&mut store, "out.w", &[d, config.latent_dim], &mut rng)?;
        zeros(&mut store, "out.b", &[1, config.latent_dim])?;
        Ok(Model { config, store })
    }

    /// Run a forward pass at `f32`, returning the velocity values and (when
    /// capturing) per-block attention probabilities.
    pub fn forward_values(
        &self,
        seq: &TokenSequence,
        scripts: &[&[u16]],
        t: f64,
        capture: bool,
    ) -> Result<(Tensor<f32>, Vec<Tensor<f32>>)> {
        let mut tape: Tape<f32> = Tape::new();
        let pv = ParamVars::leaf_all(&mut tape, &self.store);
        let out = forward_on_tape(&mut tape, &self.store, &pv, &self.config, seq, scripts, t, capture)?;
        let velocity = tape.value(out.velocity).clone();
        let records = out.records.iter().map(|&r| tape.value(r).clone()).collect();
        Ok((velocity, records))
    }

    /// Write all weights as tensor files plus an ordered name index.
    pub fn save_weights(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let names: Vec<&str> = self.store.iter().map(|(n, _)| n).collect();
        let index = serde_json::to_string_pretty(&names)
            .map_err(|e| Error::Contract(format!("serialize weight index: {e}")))?;
        let index_path = dir.join("index.json");
        std::fs::write(&index_path, index)
            .map_err(|e| Error::io(index_path.display().to_string(), e))?;
        for (name, tensor) in self.store.iter() {
            write_tensor(dir.join(format!("{name}.dstn")), tensor)?;
        }
        Ok(())
    }

    /// Load weights saved by [`Model::save_weights`] into a model of the
    /// given configuration. Name or shape disagreements are errors.
    pub fn load_weights(config: ModelConfig, dir: &Path) -> Result<Model> {
        let mut model = Model::new(config, 0)?;
        let index_path = dir.join("index.json");
        let body = std::fs::read_to_string(&index_path)
            .map_err(|e| Error::io(index_path.display().to_string(), e))?;
        let names: Vec<String> = serde_json::from_str(&body)
            .map_err(|e| Error::format(index_path.display().to_string(), e.to_string()))?;
        let expected: Vec<&str> = model.store.iter().map(|(n, _)| n).collect();
        if names != expected {
            return Err(Error::format(
                index_path.display().to_string(),
                format!("weight index lists {} names, model expects {}", names.len(), expected.len()),
            ));
        }
        for name in &names {
            let tensor: Tensor<f32> = read_tensor(dir.join(format!("{name}.dstn")))?;
            let idx = model.store.index_of(name)?;
            model.store.set(idx, tensor)?;
        }
        Ok(model)
    }
}

// ── shared layers ───────────────────────────────────────────────────────

/// Non-affine layer normalization over the last axis (ε = 1e-5).
pub fn layer_norm<S: Scalar>(tape: &mut Tape<S>, x: Var) -> Result<Var> {
    let last = tape.shape(x).len() - 1;
    let mu = tape.mean_axis(x, last)?;
    let centered = tape.sub(x, mu)?;
    let sq = tape.mul(centered, centered)?;
    let var = tape.mean_axis(sq, last)?;
    let var_eps = tape.add_scalar(var, S::from_f64(1e-5));
    let std = tape.sqrt(var_eps)?;
    tape.div(centered, std)
}

/// Sinusoidal features of a timestep `t ∈ [0, 1]`: `dim/2` sine + `dim/2`
/// cosine channels over geometrically spaced frequencies (100 down to 1).
pub fn sinusoidal_features(t: f64, dim: usize) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&t) || !t.is_finite() {
        return Err(Error::Domain {
            op: "timestep_embed".into(),
            reason: format!("t = {t} outside [0, 1]"),
        });
    }
    let half = dim / 2;
    let mut feats = vec![0.0; half * 2];
    for i in 0..half {
        let exponent = if half > 1 { 1.0 - i as f64 / (half - 1) as f64 } else { 1.0 };
        let omega = 100.0_f64.powf(exponent);
        feats[i] = (t * omega).sin();
        feats[half + i] = (t * omega).cos();
    }
    Ok(feats)
}

fn timestep_embed_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore,
    pv: &ParamVars,
    cfg: &ModelConfig,
    t: f64,
) -> Result<Var> {
    let feats = sinusoidal_features(t, cfg.d_model)?;
    let data: Vec<S> = feats.iter().map(|&v| S::from_f64(v)).collect();
    let fv = tape.constant(Tensor::new(vec![1, cfg.d_model], data)?);
    let w1 = pv.get(store, "time.w1")?;
    let b1 = pv.get(store, "time.b1")?;
    let w2 = pv.get(store, "time.w2")?;
    let b2 = pv.get(store, "time.b2")?;
    let h = tape.matmul(fv, w1)?;
    let h = tape.add(h, b1)?;
    let h = tape.silu(h);
    let out = tape.matmul(h, w2)?;
    tape.add(out, b2)
}

/// Embed one script (token-id sequence) as `[len, d_model]` rows: table
/// lookup plus learned positional offsets. The empty script embeds as the
/// learned null token — the realization of the "negative prompt".
pub fn embed_script<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore,
    pv: &ParamVars,
    cfg: &ModelConfig,
    ids: &[u16],
) -> Result<Var> {
    if ids.is_empty() {
        return pv.get(store, "embed.null");
    }
    if ids.len() > cfg.max_script_len {
        return Err(Error::Config(format!(
            "script length {} exceeds max_script_len {}",
            ids.len(),
            cfg.max_script_len
        )));
    }
    let l = ids.len();
    let mut onehot = Tensor::<S>::zeros(vec![l, cfg.vocab_size]);
    for (i, &id) in ids.iter().enumerate() {
        if id as usize >= cfg.vocab_size {
            return Err(Error::Vocabulary {
                id: id as usize,
                vocab: cfg.vocab_size,
            });
        }
        onehot.set(&[i, id as usize], S::from_f64(1.0));
    }
    let sel = tape.constant(onehot);
    let table = pv.get(store, "embed.table")?;
    let emb = tape.matmul(sel, table)?;
    let pos = pv.get(store, "embed.pos")?;
    let pos_rows = tape.slice(pos, &[(0, l), (0, cfg.d_model)])?;
    tape.add(emb, pos_rows)
}

/// `[m, d_model] → [n_heads, m, head_dim]`.
fn to_heads<S: Scalar>(tape: &mut Tape<S>, x: Var, cfg: &ModelConfig) -> Result<Var> {
    let m = tape.shape(x)[0];
    let r = tape.reshape(x, &[m, cfg.n_heads, cfg.head_dim()])?;
    tape.permute(r, &[1, 0, 2])
}

/// `[n_heads, m, head_dim] → [m, d_model]`.
fn from_heads<S: Scalar>(tape: &mut Tape<S>, x: Var, cfg: &ModelConfig) -> Result<Var> {
    let m = tape.shape(x)[1];
    let p = tape.permute(x, &[1, 0, 2])?;
    tape.reshape(p, &[m, cfg.d_model])
}

fn self_attention<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore,
    pv: &ParamVars,
    cfg: &ModelConfig,
    block: usize,
    xn: Var,
    tables: &RopeTables<S>,
    capture: bool,
) -> Result<(Var, Option<Var>)> {
    let get = |tape_store: &ParamStore, mat: &str| -> Result<Var> {
        pv.get(tape_store, &format!("block{block}.attn.{mat}"))
    };
    let (wq, wk, wv, wo) = (get(store, "wq")?, get(store, "wk")?, get(store, "wv")?, get(store, "wo")?);
    let q = tape.matmul(xn, wq)?;
    let k = tape.matmul(xn, wk)?;
    let v = tape.matmul(xn, wv)?;
    let q = to_heads(tape, q, cfg)?;
    let k = to_heads(tape, k, cfg)?;
    let v = to_heads(tape, v, cfg)?;
    let q = rope_apply(tape, q, tables)?;
    let k = rope_apply(tape, k, tables)?;
    let kt = tape.permute(k, &[0, 2, 1])?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, S::from_f64(1.0 / (cfg.head_dim() as f64).sqrt()));
    let probs = tape.softmax(scores, 2)?;
    let record = if capture { Some(probs) } else { None };
    let ctx = tape.matmul(probs, v)?;
    let merged = from_heads(tape, ctx, cfg)?;
    let out = tape.matmul(merged, wo)?;
    Ok((out, record))
}

/// Block-isolated cross-attention: segment `i`'s tokens attend only to
/// script embedding `i`. No rotary encoding here — scripts carry their own
/// learned positions.
///
/// Public so the layer can be verified in isolation — the per-segment loop
/// must agree exactly with a dense attention over all scripts whose
/// cross-segment scores are masked out.
pub fn cross_attention<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore,
    pv: &ParamVars,
    cfg: &ModelConfig,
    block: usize,
    xn: Var,
    seq: &TokenSequence,
    script_embs: &[Var],
) -> Result<Var> {
    let get = |mat: &str| -> Result<Var> { pv.get(store, &format!("block{block}.cross.{mat}")) };
    let (wq, wk, wv, wo) = (get("wq")?, get("wk")?, get("wv")?, get("wo")?);
    let scale = S::from_f64(1.0 / (cfg.head_dim() as f64).sqrt());
    let mut outs = Vec::with_capacity(seq.segments.len());
    for (seg, &emb) in seq.segments.iter().zip(script_embs) {
        let (lo, hi) = seg.range();
        let q_rows = tape.slice(xn, &[(lo, hi), (0, cfg.d_model)])?;
        let q = tape.matmul(q_rows, wq)?;
        let k = tape.matmul(emb, wk)?;
        let v = tape.matmul(emb, wv)?;
        let q = to_heads(tape, q, cfg)?;
        let k = to_heads(tape, k, cfg)?;
        let v = to_heads(tape, v, cfg)?;
        let kt = tape.permute(k, &[0, 2, 1])?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, scale);
        let probs = tape.softmax(scores, 2)?;
        let ctx = tape.matmul(probs, v)?;
        let merged = from_heads(tape, ctx, cfg)?;
        outs.push(tape.matmul(merged, wo)?);
    }
    tape.concat(&outs, 0)
}

fn mlp<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore,
    pv: &ParamVars,
    block: usize,
    xn: Var,
) -> Result<Var> {
    let get = |mat: &str| -> Result<Var> { pv.get(store, &format!("block{block}.mlp.{mat}")) };
    let h = tape.matmul(xn, get("w1")?)?;
    let h = tape.add(h, get("b1")?)?;
    let h = tape.silu(h);
    let out = tape.matmul(h, get("w2")?)?;
    tape.add(out, get("b2")?)
}

// ── forward pass ────────────────────────────────────────────────────────

/// Everything a forward pass returns on-tape.
pub struct ForwardOutput {
    /// `[s, latent_dim, h, w]` velocity prediction over shot segments.
    pub velocity: Var,
    /// When capturing: one `[n_heads, m, m]` row-normalized probability
    /// tensor per block, in block order.
    pub records: Vec<Var>,
}

/// Run the full model on a tape. `scripts` must align with
/// `seq.segments` (see [`scripts_in_order`]). Parameters come in as `pv` so
/// the same code path serves training, inference, and finite-difference
/// verification.
#[allow(clippy::too_many_arguments)]
pub fn forward_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore,
    pv: &ParamVars,
    cfg: &ModelConfig,
    seq: &TokenSequence,
    scripts: &[&[u16]],
    t: f64,
    capture: bool,
) -> Result<ForwardOutput> {
    cfg.validate()?;
    if scripts.len() != seq.segments.len() {
        return Err(Error::Contract(format!(
            "{} scripts for {} segments",
            scripts.len(),
            seq.segments.len()
        )));
    }
    if seq.d_lat != cfg.latent_dim {
        return Err(Error::ShapeMismatch {
            op: "forward(latent_dim)".into(),
            lhs: vec![cfg.latent_dim],
            rhs: vec![seq.d_lat],
        });
    }

    let tokens = tape.constant(seq.tokens.cast::<S>());
    let in_w = pv.get(store, "in_proj.w")?;
    let in_b = pv.get(store, "in_proj.b")?;
    let projected = tape.matmul(tokens, in_w)?;
    let mut x = tape.add(projected, in_b)?;

    let t_emb = timestep_embed_on_tape(tape, store, pv, cfg, t)?;
    let script_embs: Vec<Var> = scripts
        .iter()
        .map(|ids| embed_script(tape, store, pv, cfg, ids))
        .collect::<Result<_>>()?;
    let tables = rope_tables::<S>(&seq.positions, cfg.head_dim(), cfg.rope_theta)?;

    let mut records = Vec::new();
    for b in 0..cfg.n_blocks {
        x = tape.add(x, t_emb)?;
        let xn = layer_norm(tape, x)?;
        let (attn_out, record) = self_attention(tape, store, pv, cfg, b, xn, &tables, capture)?;
        x = tape.add(x, attn_out)?;
        if let Some(r) = record {
            records.push(r);
        }
        let xn = layer_norm(tape, x)?;
        let cross_out = cross_attention(tape, store, pv, cfg, b, xn, seq, &script_embs)?;
        x = tape.add(x, cross_out)?;
        let xn = layer_norm(tape, x)?;
        let mlp_out = mlp(tape, store, pv, b, xn)?;
        x = tape.add(x, mlp_out)?;
    }

    let (lo, hi) = seq.shot_block()?;
    let shot_rows = tape.slice(x, &[(lo, hi), (0, cfg.d_model)])?;
    let normed = layer_norm(tape, shot_rows)?;
    let out_w = pv.get(store, "out.w")?;
    let out_b = pv.get(store, "out.b")?;
    let head = tape.matmul(normed, out_w)?;
    let head = tape.add(head, out_b)?;
    let cells = tape.reshape(head, &[seq.s, seq.h, seq.w, cfg.latent_dim])?;
    let velocity = tape.permute(cells, &[0, 3, 1, 2])?;
    Ok(ForwardOutput { velocity, records })
}

/// Arrange per-reference and per-shot scripts into the sequence's segment
/// memory order.
pub fn scripts_in_order<'a>(
    seq: &TokenSequence,
    ref_scripts: &'a [Vec<u16>],
    shot_scripts: &'a [Vec<u16>],
) -> Result<Vec<&'a [u16]>> {
    use crate::codec::SegmentLabel;
    if ref_scripts.len() != seq.k || shot_scripts.len() != seq.s {
        return Err(Error::Contract(format!(
            "script counts (refs {}, shots {}) do not match sequence (k={}, s={})",
            ref_scripts.len(),
            shot_scripts.len(),
            seq.k,
            seq.s
        )));
    }
    Ok(seq
        .segments
        .iter()
        .map(|seg| match seg.label {
            SegmentLabel::Ref(k) => ref_scripts[k].as_slice(),
            SegmentLabel::Shot(s) => shot_scripts[s].as_slice(),
        })
        .collect())
}
