//! Token sequence assembly and reference placement strategies.
//!
//! Latent slices become one flat token matrix (one token per spatial cell
//! per segment) plus per-token rotary positions. The four placement
//! strategies only differ in how reference segments are positioned relative
//! to the shot timeline: in front of it, behind it, phase-shifted, or at
//! negative indices.

use serde::{Deserialize, Serialize};

use crate::codec::SegmentLabel;
use crate::error::{Error, Result};
use crate::model::rope::RopePos;
use crate::tensor::Tensor;

/// How reference segments are placed on the shot-index axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PositionalStrategy {
    /// References first: refs at shot indices `0..K`, shots at `K..K+S`.
    Prepend,
    /// References last: shots at `0..S`, refs at `S..S+K` (and stored after
    /// the shot tokens in memory).
    Append,
    /// Prepend indices, but reference tokens get an extra rotation phase
    /// `delta` on every frequency.
    PhaseOffset { delta: f64 },
    /// Shots at `0..S`; reference `k` at shot index `k − delta`.
    NegOffset { delta: i64 },
}

impl Default for PositionalStrategy {
    fn default() -> Self {
        PositionalStrategy::Prepend
    }
}

/// Default phase shift for [`PositionalStrategy::PhaseOffset`]: π/4.
pub fn default_phase_delta() -> f64 {
    std::f64::consts::FRAC_PI_4
}

/// Default backward shift for [`PositionalStrategy::NegOffset`].
pub const DEFAULT_NEG_DELTA: i64 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub label: SegmentLabel,
    /// First token row of this segment in the flat matrix.
    pub start: usize,
    /// Token count (`h·w`).
    pub len: usize,
    /// Whether this segment carries noised latents (loss is masked to these).
    pub noised: bool,
}

impl Segment {
    pub fn range(&self) -> (usize, usize) {
        (self.start, self.start + self.len)
    }
}

/// The model's working representation of one storyboard state.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    /// `[m, latent_dim]`, token per spatial cell, segments contiguous.
    pub tokens: Tensor<f32>,
    pub positions: Vec<RopePos>,
    /// Segments in memory order.
    pub segments: Vec<Segment>,
    pub h: usize,
    pub w: usize,
    pub d_lat: usize,
    pub k: usize,
    pub s: usize,
}

impl TokenSequence {
    pub fn m(&self) -> usize {
        self.positions.len()
    }

    /// Segment holding shot `s`, in memory terms.
    pub fn shot_segment(&self, s: usize) -> Result<&Segment> {
        self.segments
            .iter()
            .find(|seg| seg.label == SegmentLabel::Shot(s))
            .ok_or_else(|| Error::Contract(format!("no segment for shot {s}")))
    }

    pub fn ref_segment(&self, k: usize) -> Result<&Segment> {
        self.segments
            .iter()
            .find(|seg| seg.label == SegmentLabel::Ref(k))
            .ok_or_else(|| Error::Contract(format!("no segment for reference {k}")))
    }

    /// Token-row span of the contiguous shot block (shots are always stored
    /// adjacently, in shot order).
    pub fn shot_block(&self) -> Result<(usize, usize)> {
        let first = self.shot_segment(0)?;
        let last = self.shot_segment(self.s - 1)?;
        Ok((first.start, last.start + last.len))
    }
}

fn check_slice_shapes(slices: &[Tensor<f32>], what: &str) -> Result<Option<(usize, usize, usize)>> {
    let Some(first) = slices.first() else {
        return Ok(None);
    };
    for t in slices {
        if t.rank() != 3 {
            return Err(Error::InvalidShape {
                shape: t.shape().to_vec(),
                reason: format!("{what} latent slices must be rank 3 [d, h, w]"),
            });
        }
        if t.shape() != first.shape() {
            return Err(Error::ShapeMismatch {
                op: "build_token_sequence",
                lhs: first.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
    }
    Ok(Some((first.shape()[0], first.shape()[1], first.shape()[2])))
}

/// Flatten latent slices into tokens with rotary positions.
///
/// `noised_shots[s]` marks shot `s` as carrying noised latents; reference
/// segments are always clean. `z_ref` may be empty (the reference-free text
/// mode, or an instance whose references were condition-dropped): the
/// strategies only differ in how they place reference segments, so with
/// none present they all coincide — shots at indices `0..S`, no phases.
pub fn build_token_sequence(
    z_ref: &[Tensor<f32>],
    z_shot: &[Tensor<f32>],
    noised_shots: &[bool],
    strategy: PositionalStrategy,
) -> Result<TokenSequence> {
    let k = z_ref.len();
    let s = z_shot.len();
    if s == 0 {
        return Err(Error::Contract("token sequence needs at least one shot".into()));
    }
    if noised_shots.len() != s {
        return Err(Error::Contract(format!(
            "noise flags cover {} shots but sequence has {s}",
            noised_shots.len()
        )));
    }
    let shot_dims = check_slice_shapes(z_shot, "shot")?.expect("s ≥ 1");
    if let Some(ref_dims) = check_slice_shapes(z_ref, "reference")? {
        if ref_dims != shot_dims {
            return Err(Error::ShapeMismatch {
                op: "build_token_sequence(ref vs shot)".into(),
                lhs: vec![ref_dims.0, ref_dims.1, ref_dims.2],
                rhs: vec![shot_dims.0, shot_dims.1, shot_dims.2],
            });
        }
    }
    let (d_lat, h, w) = shot_dims;

    // Memory order and per-segment shot index / phase.
    struct Planned<'a> {
        label: SegmentLabel,
        latent: &'a Tensor<f32>,
        t_idx: i64,
        phase: f64,
        noised: bool,
    }
    let mut plan: Vec<Planned> = Vec::with_capacity(k + s);
    let ref_entry = |kk: usize, t_idx: i64, phase: f64| Planned {
        label: SegmentLabel::Ref(kk),
        latent: &z_ref[kk],
        t_idx,
        phase,
        noised: false,
    };
    let shot_entry = |ss: usize, t_idx: i64| Planned {
        label: SegmentLabel::Shot(ss),
        latent: &z_shot[ss],
        t_idx,
        phase: 0.0,
        noised: noised_shots[ss],
    };
    match strategy {
        PositionalStrategy::Prepend => {
            for kk in 0..k {
                plan.push(ref_entry(kk, kk as i64, 0.0));
            }
            for ss in 0..s {
                plan.push(shot_entry(ss, (k + ss) as i64));
            }
        }
        PositionalStrategy::PhaseOffset { delta } => {
            for kk in 0..k {
                plan.push(ref_entry(kk, kk as i64, delta));
            }
            for ss in 0..s {
                plan.push(shot_entry(ss, (k + ss) as i64));
            }
        }
        PositionalStrategy::Append => {
            for ss in 0..s {
                plan.push(shot_entry(ss, ss as i64));
            }
            for kk in 0..k {
                plan.push(ref_entry(kk, (s + kk) as i64, 0.0));
            }
        }
        PositionalStrategy::NegOffset { delta } => {
            for kk in 0..k {
                plan.push(ref_entry(kk, kk as i64 - delta, 0.0));
            }
            for ss in 0..s {
                plan.push(shot_entry(ss, ss as i64));
            }
        }
    }

    let seg_tokens = h * w;
    let m = (k + s) * seg_tokens;
    let mut data = Vec::with_capacity(m * d_lat);
    let mut positions = Vec::with_capacity(m);
    let mut segments = Vec::with_capacity(k + s);
    for p in &plan {
        segments.push(Segment {
            label: p.label,
            start: positions.len(),
            len: seg_tokens,
            noised: p.noised,
        });
        for y in 0..h {
            for x in 0..w {
                for c in 0..d_lat {
                    data.push(p.latent.at(&[c, y, x]));
                }
                positions.push(RopePos {
                    t: p.t_idx,
                    y,
                    x,
                    phase: p.phase,
                });
            }
        }
    }

    Ok(TokenSequence {
        tokens: Tensor::new(vec![m, d_lat], data)?,
        positions,
        segments,
        h,
        w,
        d_lat,
        k,
        s,
    })
}
