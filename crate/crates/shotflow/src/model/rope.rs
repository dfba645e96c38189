//! Three-axis rotary position encoding.
//!
//! Each attention head's channel dimension is split into three equal groups
//! — shot index `t`, row `y`, column `x` — and every consecutive channel
//! pair inside a group is rotated by `position · base^(−2j/group)`. The
//! rotation tables are computed host-side in `f64` from the token positions;
//! applying them is pure tape arithmetic (reshape into pairs, slice the two
//! half channels, combine with the cos/sin constants, concatenate back), so
//! gradients flow through untouched.

use crate::error::Result;
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// One token's rotary position: shot index (may be negative under the
/// backward-offset strategy), spatial row and column, plus a phase angle
/// added to every frequency (nonzero only under the phase-offset strategy).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RopePos {
    pub t: i64,
    pub y: usize,
    pub x: usize,
    pub phase: f64,
}

/// Precomputed per-token rotation angles: cos and sin, each `[m, head_dim/2]`.
#[derive(Debug, Clone)]
pub struct RopeTables<S: Scalar> {
    pub cos: Tensor<S>,
    pub sin: Tensor<S>,
}

/// Build rotation tables for `positions` with head dimension `head_dim`
/// (divisible by 6: three axis groups of even size) and frequency base
/// `theta`.
pub fn rope_tables<S: Scalar>(
    positions: &[RopePos],
    head_dim: usize,
    theta: f64,
) -> Result<RopeTables<S>> {
    use crate::error::Error;
    if head_dim % 6 != 0 {
        return Err(Error::Config(format!(
            "head_dim {head_dim} must be divisible by 6 for the 3-axis rotary split"
        )));
    }
    let group = head_dim / 3;
    let pairs_per_group = group / 2;
    let half = head_dim / 2;
    let m = positions.len();
    let mut cos = vec![S::from_f64(0.0); m * half];
    let mut sin = vec![S::from_f64(0.0); m * half];
    for (i, p) in positions.iter().enumerate() {
        let coords = [p.t as f64, p.y as f64, p.x as f64];
        for (axis, &coord) in coords.iter().enumerate() {
            for j in 0..pairs_per_group {
                let freq = theta.powf(-2.0 * j as f64 / group as f64);
                let angle = coord * freq + p.phase;
                let col = axis * pairs_per_group + j;
                cos[i * half + col] = S::from_f64(angle.cos());
                sin[i * half + col] = S::from_f64(angle.sin());
            }
        }
    }
    Ok(RopeTables {
        cos: Tensor::new(vec![m, half], cos)?,
        sin: Tensor::new(vec![m, half], sin)?,
    })
}

/// Rotate `x` (shape `[heads, m, head_dim]`) by the per-token tables.
/// Channel pairs are `(2j, 2j+1)`; the rotation is
/// `x'₂ⱼ = x₂ⱼ·cos − x₂ⱼ₊₁·sin`, `x'₂ⱼ₊₁ = x₂ⱼ·sin + x₂ⱼ₊₁·cos`.
pub fn rope_apply<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    tables: &RopeTables<S>,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let (heads, m, head_dim) = (shape[0], shape[1], shape[2]);
    let half = head_dim / 2;

    // [H, m, hd] → [H, m, hd/2, 2]; the last axis separates a pair.
    let paired = tape.reshape(x, &[heads, m, half, 2])?;
    let even = tape.slice(paired, &[(0, heads), (0, m), (0, half), (0, 1)])?;
    let odd = tape.slice(paired, &[(0, heads), (0, m), (0, half), (1, 2)])?;

    // Broadcastable constants [1, m, hd/2, 1].
    let cos_t = tables.cos.reshaped(vec![1, m, half, 1])?;
    let sin_t = tables.sin.reshaped(vec![1, m, half, 1])?;
    let cos = tape.constant(cos_t);
    let sin = tape.constant(sin_t);

    let ec = tape.mul(even, cos)?;
    let os = tape.mul(odd, sin)?;
    let new_even = tape.sub(ec, os)?;
    let es = tape.mul(even, sin)?;
    let oc = tape.mul(odd, cos)?;
    let new_odd = tape.add(es, oc)?;

    let packed = tape.concat(&[new_even, new_odd], 3)?;
    tape.reshape(packed, &[heads, m, head_dim])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn pos(t: i64, y: usize, x: usize) -> RopePos {
        RopePos { t, y, x, phase: 0.0 }
    }

    fn apply_to(values: &Tensor<f64>, positions: &[RopePos], head_dim: usize) -> Tensor<f64> {
        let mut tape: Tape<f64> = Tape::new();
        let v = tape.constant(values.clone());
        let tables = rope_tables::<f64>(positions, head_dim, 10_000.0).unwrap();
        let out = rope_apply(&mut tape, v, &tables).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn origin_position_is_identity() {
        let mut rng = Rng::seed_from_u64(11);
        let x = Tensor::<f64>::randn(vec![2, 1, 12], &mut rng);
        let out = apply_to(&x, &[pos(0, 0, 0)], 12);
        assert!(x.max_abs_diff(&out).unwrap() < 1e-12);
    }

    #[test]
    fn rotation_preserves_norm() {
        let mut rng = Rng::seed_from_u64(12);
        let x = Tensor::<f64>::randn(vec![1, 3, 18], &mut rng);
        let positions = [pos(2, 5, 1), pos(-3, 0, 7), pos(9, 2, 2)];
        let out = apply_to(&x, &positions, 18);
        for token in 0..3 {
            let norm = |t: &Tensor<f64>| -> f64 {
                (0..18).map(|c| t.at(&[0, token, c]).powi(2)).sum::<f64>().sqrt()
            };
            assert!((norm(&x) - norm(&out)).abs() < 1e-9, "token {token}");
        }
    }

    #[test]
    fn inner_products_depend_only_on_relative_position() {
        let mut rng = Rng::seed_from_u64(13);
        let q = Tensor::<f64>::randn(vec![1, 1, 12], &mut rng);
        let k = Tensor::<f64>::randn(vec![1, 1, 12], &mut rng);
        let dot = |a: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
            (0..12).map(|c| a.at(&[0, 0, c]) * b.at(&[0, 0, c])).sum()
        };
        // Same relative offset (Δt=2, Δy=1, Δx=3) from two absolute bases.
        let d1 = dot(
            &apply_to(&q, &[pos(1, 2, 0)], 12),
            &apply_to(&k, &[pos(3, 3, 3)], 12),
        );
        let d2 = dot(
            &apply_to(&q, &[pos(6, 4, 5)], 12),
            &apply_to(&k, &[pos(8, 5, 8)], 12),
        );
        assert!((d1 - d2).abs() < 1e-5, "{d1} vs {d2}");
        // A different offset changes the product.
        let d3 = dot(
            &apply_to(&q, &[pos(6, 4, 5)], 12),
            &apply_to(&k, &[pos(9, 5, 8)], 12),
        );
        assert!((d1 - d3).abs() > 1e-6);
    }

    #[test]
    fn shared_phase_cancels_in_inner_products() {
        // Adding the same phase to both arguments leaves q·k unchanged —
        // the mechanism behind the phase-offset reference strategy.
        let mut rng = Rng::seed_from_u64(14);
        let q = Tensor::<f64>::randn(vec![1, 1, 12], &mut rng);
        let k = Tensor::<f64>::randn(vec![1, 1, 12], &mut rng);
        let with_phase = |v: &Tensor<f64>, p: RopePos| apply_to(v, &[p], 12);
        let dot = |a: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
            (0..12).map(|c| a.at(&[0, 0, c]) * b.at(&[0, 0, c])).sum()
        };
        let base_q = RopePos { t: 1, y: 2, x: 3, phase: 0.0 };
        let base_k = RopePos { t: 4, y: 0, x: 1, phase: 0.0 };
        let shift_q = RopePos { phase: 0.7, ..base_q };
        let shift_k = RopePos { phase: 0.7, ..base_k };
        let d0 = dot(&with_phase(&q, base_q), &with_phase(&k, base_k));
        let d1 = dot(&with_phase(&q, shift_q), &with_phase(&k, shift_k));
        assert!((d0 - d1).abs() < 1e-9);
        // One-sided phase (reference vs shot) does change the product.
        let d2 = dot(&with_phase(&q, shift_q), &with_phase(&k, base_k));
        assert!((d0 - d2).abs() > 1e-6);
    }

    #[test]
    fn indivisible_head_dim_is_rejected()  {
        let err = rope_tables::<f64>(&[pos(0, 0, 0)], 8, 10_000.0);
        assert!(err.is_err());
    }
}
