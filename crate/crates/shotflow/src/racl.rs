//! Role-attention consistency supervision.
//!
//! During training with capture enabled, self-attention probabilities are
//! aggregated between corresponding role regions — reference→shot and
//! shot→shot — and pushed toward the role's pixel mask with binary cross
//! entropy. The loss is differentiable end-to-end: aggregation is tape
//! arithmetic over the captured probability tensors, so its gradient flows
//! back into the attention logits.
//!
//! Masks are supervised at latent resolution via area-average pooling, kept
//! soft (no thresholding) to preserve gradient signal at role boundaries.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::model::{Segment, TokenSequence};
use crate::synth::StoryboardSample;
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Clip bounds for pooled mask targets (BCE stability).
pub const MASK_CLIP: (f32, f32) = (1e-4, 1.0 - 1e-4);
/// Clip bounds for aggregated attention maps before the log.
pub const MAP_CLIP: (f64, f64) = (1e-6, 1.0 - 1e-6);

/// How to read Softmax(QKᵀ/√d) restricted to one shot's key columns.
///
/// The attention the model actually computes normalizes each query row over
/// the full token sequence; slicing those rows is the default. The
/// alternative re-normalizes the sliced row over the shot's columns alone.
/// Both readings are legitimate interpretations of the aggregation formula,
/// so both are implemented and the choice is explicit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum AttentionReading {
    #[default]
    SliceFullRows,
    RenormalizeOverShot,
}

// ── masks ───────────────────────────────────────────────────────────────

/// Area-average a pixel mask down to the latent grid and clip into
/// `[1e-4, 1−1e-4]`. Pixel dimensions must be integer multiples of the
/// latent ones.
pub fn downsample_mask(mask: &Mask, h: usize, w: usize) -> Result<Tensor<f32>> {
    let (ph, pw) = (mask.height(), mask.width());
    if h == 0 || w == 0 || ph % h != 0 || pw % w != 0 {
        return Err(Error::InvalidShape {
            shape: vec![ph, pw],
            reason: format!("pixel mask not divisible into a {h}×{w} latent grid"),
        });
    }
    let (fy, fx) = (ph / h, pw / w);
    let mut out = Tensor::<f32>::zeros(vec![h, w]);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f32;
            for dy in 0..fy {
                for dx in 0..fx {
                    acc += mask.get(y * fy + dy, x * fx + dx);
                }
            }
            let mean = acc / (fy * fx) as f32;
            out.set(&[y, x], mean.clamp(MASK_CLIP.0, MASK_CLIP.1));
        }
    }
    Ok(out)
}

/// Latent-resolution role masks for one storyboard sample.
#[derive(Debug, Clone)]
pub struct RoleMaskSet {
    /// Per reference `k`: pooled mask `[h, w]`.
    pub ref_masks: Vec<Tensor<f32>>,
    /// `(shot, role) → pooled mask`; absent when the role is not placed.
    pub shot_masks: BTreeMap<(usize, usize), Tensor<f32>>,
    pub h: usize,
    pub w: usize,
}

impl RoleMaskSet {
    /// Pool every exact pixel mask of `sample` down to an `h×w` grid.
    pub fn from_sample(sample: &StoryboardSample, h: usize, w: usize) -> Result<RoleMaskSet> {
        let ref_masks = sample
            .refs
            .iter()
            .map(|r| downsample_mask(&r.mask, h, w))
            .collect::<Result<Vec<_>>>()?;
        let mut shot_masks = BTreeMap::new();
        for (s, shot) in sample.shots.iter().enumerate() {
            for (p, mask) in shot.placements.iter().zip(&shot.masks) {
                shot_masks.insert((s, p.role), downsample_mask(mask, h, w)?);
            }
        }
        Ok(RoleMaskSet {
            ref_masks,
            shot_masks,
            h,
            w,
        })
    }

    pub fn k(&self) -> usize {
        self.ref_masks.len()
    }

    /// Shots containing `role`, ascending.
    pub fn shots_with_role(&self, role: usize) -> Vec<usize> {
        self.shot_masks
            .keys()
            .filter(|(_, k)| *k == role)
            .map(|(s, _)| *s)
            .collect()
    }

    /// Nearest other shot containing `role` (ties resolved toward the
    /// earlier shot), if any.
    pub fn nearest_other_shot(&self, role: usize, shot: usize) -> Option<usize> {
        self.shots_with_role(role)
            .into_iter()
            .filter(|&s| s != shot)
            .min_by_key(|&s| (s.abs_diff(shot), s))
    }
}

/// Latent cells of `pooled` that survive pooling (> 0.5), as token row
/// indices inside `seg`.
fn query_rows(seg: &Segment, pooled: &Tensor<f32>, w: usize) -> Vec<usize> {
    let h = pooled.shape()[0];
    let mut rows = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if pooled.at(&[y, x]) > 0.5 {
                rows.push(seg.start + y * w + x);
            }
        }
    }
    rows
}

// ── aggregation ─────────────────────────────────────────────────────────

/// Aggregate captured attention from a query-token set onto one shot's key
/// columns: sum the selected rows, average over blocks, heads, and query
/// count, and reshape the column axis to the latent grid.
///
/// Returns an `[h, w]` map on the tape (gradients reach the records).
pub fn aggregate_attention<S: Scalar>(
    tape: &mut Tape<S>,
    records: &[Var],
    seq: &TokenSequence,
    rows: &[usize],
    shot: usize,
    reading: AttentionReading,
) -> Result<Var> {
    if records.is_empty() {
        return Err(Error::Contract("no captured attention records".into()));
    }
    if rows.is_empty() {
        return Err(Error::Contract("empty query-token set".into()));
    }
    let m = seq.m();
    let n_heads = tape.shape(records[0])[0];
    let (lo, hi) = seq.shot_segment(shot)?.range();

    // One-hot row selector [|Q|, m]: matmul's zero-skip makes this as cheap
    // as a gather while staying on-tape.
    let mut selector = Tensor::<S>::zeros(vec![rows.len(), m]);
    for (i, &row) in rows.iter().enumerate() {
        if row >= m {
            return Err(Error::Contract(format!("query row {row} outside sequence of {m}")));
        }
        selector.set(&[i, row], S::from_f64(1.0));
    }
    let sel = tape.constant(selector);

    let mut per_block = Vec::with_capacity(records.len());
    for &record in records {
        let picked = tape.matmul(sel, record)?; // [H, |Q|, m]
        let sliced = tape.slice(picked, &[(0, n_heads), (0, rows.len()), (lo, hi)])?;
        let read = match reading {
            AttentionReading::SliceFullRows => sliced,
            AttentionReading::RenormalizeOverShot => {
                let mass = tape.sum_axis(sliced, 2)?; // [H, |Q|, 1]
                tape.div(sliced, mass)?
            }
        };
        let head_sum = tape.sum_axis(read, 0)?; // [1, |Q|, n]
        let q_sum = tape.sum_axis(head_sum, 1)?; // [1, 1, n]
        per_block.push(q_sum);
    }
    let total = tape.sum_vars(&per_block)?;
    let norm = 1.0 / (records.len() * n_heads * rows.len()) as f64;
    let scaled = tape.scale(total, S::from_f64(norm));
    tape.reshape(scaled, &[seq.h, seq.w])
}

/// Mean binary cross entropy of a map against a pooled mask target. The map
/// is clipped into `(0, 1)` before the logs.
pub fn bce<S: Scalar>(tape: &mut Tape<S>, map: Var, target: &Tensor<f32>) -> Result<Var> {
    if tape.shape(map) != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "bce",
            lhs: tape.shape(map).to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let a = tape.clip(map, S::from_f64(MAP_CLIP.0), S::from_f64(MAP_CLIP.1));
    let m = tape.constant(target.cast::<S>());
    let neg_m = tape.neg(m);
    let one_minus_m = tape.add_scalar(neg_m, S::from_f64(1.0));
    let neg_a = tape.neg(a);
    let one_minus_a = tape.add_scalar(neg_a, S::from_f64(1.0));
    let log_a = tape.log(a)?;
    let log_one_minus_a = tape.log(one_minus_a)?;
    let pos = tape.mul(m, log_a)?;
    let negt = tape.mul(one_minus_m, log_one_minus_a)?;
    let sum = tape.add(pos, negt)?;
    let mean = tape.mean_all(sum);
    Ok(tape.neg(mean))
}

// ── the loss ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapKind {
    RefToShot { reference: usize },
    ShotToShot { from: usize },
}

/// One aggregated map kept for diagnostics.
pub struct RaclMap {
    pub shot: usize,
    pub role: usize,
    pub kind: MapKind,
    pub map: Var,
}

pub struct RaclResult {
    /// Scalar loss variable (mean over supervised pairs of the per-pair
    /// term sums).
    pub loss: Var,
    pub supervised_pairs: usize,
    /// Pairs skipped because the role's query region vanished under pooling.
    pub skipped_empty_queries: usize,
    pub maps: Vec<RaclMap>,
}

/// Compute the full consistency loss over every present `(shot, role)`
/// pair: `BCE(ref→shot map, shot mask)` plus, when another shot contains
/// the same role, `BCE(nearest-other-shot→shot map, shot mask)`. Pairs
/// where the role is absent don't exist; the divisor is the number of
/// supervised pairs.
pub fn racl_loss<S: Scalar>(
    tape: &mut Tape<S>,
    records: &[Var],
    seq: &TokenSequence,
    masks: &RoleMaskSet,
    reading: AttentionReading,
) -> Result<RaclResult> {
    if masks.h != seq.h || masks.w != seq.w {
        return Err(Error::ShapeMismatch {
            op: "racl_loss",
            lhs: vec![masks.h, masks.w],
            rhs: vec![seq.h, seq.w],
        });
    }
    let mut terms: Vec<Var> = Vec::new();
    let mut maps = Vec::new();
    let mut supervised = 0usize;
    let mut skipped = 0usize;

    for (&(s, k), shot_mask) in &masks.shot_masks {
        // Reference → shot term.
        let ref_seg = seq.ref_segment(k)?;
        let ref_rows = query_rows(ref_seg, &masks.ref_masks[k], seq.w);
        if ref_rows.is_empty() {
            skipped += 1;
            continue;
        }
        let a_ref = aggregate_attention(tape, records, seq, &ref_rows, s, reading)?;
        let mut pair = bce(tape, a_ref, shot_mask)?;
        maps.push(RaclMap {
            shot: s,
            role: k,
            kind: MapKind::RefToShot { reference: k },
            map: a_ref,
        });

        // Shot → shot term from the nearest other occurrence.
        if let Some(s_other) = masks.nearest_other_shot(k, s) {
            let other_seg = seq.shot_segment(s_other)?;
            let other_mask = &masks.shot_masks[&(s_other, k)];
            let other_rows = query_rows(other_seg, other_mask, seq.w);
            if other_rows.is_empty() {
                skipped += 1;
            } else {
                let a_cross =
                    aggregate_attention(tape, records, seq, &other_rows, s, reading)?;
                let cross_term = bce(tape, a_cross, shot_mask)?;
                pair = tape.add(pair, cross_term)?;
                maps.push(RaclMap {
                    shot: s,
                    role: k,
                    kind: MapKind::ShotToShot { from: s_other },
                    map: a_cross,
                });
            }
        }
        terms.push(pair);
        supervised += 1;
    }

    if terms.is_empty() {
        return Err(Error::Contract(
            "no supervisable (shot, role) pair; capture should not have been requested".into(),
        ));
    }
    let total = tape.sum_vars(&terms)?;
    let loss = tape.scale(total, S::from_f64(1.0 / supervised as f64));
    Ok(RaclResult {
        loss,
        supervised_pairs: supervised,
        skipped_empty_queries: skipped,
        maps,
    })
}

// ── diagnostics ─────────────────────────────────────────────────────────

/// Write aggregated maps as raw tensors plus max-normalized grayscale
/// heatmaps (nearest-neighbor upscaled for visibility).
pub fn dump_attention_maps<S: Scalar>(
    tape: &Tape<S>,
    maps: &[RaclMap],
    dir: &Path,
    upscale: usize,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    for m in maps {
        let name = match m.kind {
            MapKind::RefToShot { reference } => {
                format!("shot{}_role{}_from_ref{}", m.shot, m.role, reference)
            }
            MapKind::ShotToShot { from } => {
                format!("shot{}_role{}_from_shot{}", m.shot, m.role, from)
            }
        };
        let map = tape.value(m.map).cast::<f32>();
        crate::tensor::io::write_tensor(dir.join(format!("{name}.dstn")), &map)?;
        let (h, w) = (map.shape()[0], map.shape()[1]);
        let peak = map.data().iter().cloned().fold(f32::MIN, f32::max).max(1e-12);
        let f = upscale.max(1);
        let mut img = Image::new(h * f, w * f);
        for y in 0..h * f {
            for x in 0..w * f {
                let v = map.at(&[y / f, x / f]) / peak;
                img.set_rgb(y, x, [v, v, v]);
            }
        }
        img.write_ppm(dir.join(format!("{name}.ppm")))?;
    }
    Ok(())
}
