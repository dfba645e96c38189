//! Central finite-difference verification of tape gradients.
//!
//! The checked function is a closure that rebuilds its graph on a fresh
//! 64-bit tape from leaf tensors, so the same definition serves both the
//! analytic pass (one backward) and the numerical pass (two forwards per
//! input coordinate). Checks always run in `f64`: at `eps = 1e-5` the
//! central-difference truncation error is ~1e-10 for smooth ops, far below
//! the 1e-4 acceptance threshold, while `f32` would drown the comparison in
//! rounding noise.

use crate::error::Result;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Relative error between an analytic and a numerical derivative:
/// `|a − n| / max(|a|, |n|, 1e-8)`. The floor keeps zero-gradient
/// coordinates from dividing by zero.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Gradients of `f` at `inputs` via one tape backward.
pub fn analytic_grad<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    Ok(vars.iter().map(|&v| tape.grad(v)).collect())
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    tape.value(loss).item()
}

/// Gradients of `f` at `inputs` by central differences,
/// `(f(x+ε) − f(x−ε)) / 2ε` per coordinate.
pub fn numerical_grad<F>(f: &F, inputs: &[Tensor<f64>], eps: f64) -> Result<Vec<Tensor<f64>>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[i].shape().to_vec());
        for c in 0..inputs[i].numel() {
            let orig = work[i].data()[c];
            work[i].data_mut()[c] = orig + eps;
            let lp = eval(f, &work)?;
            work[i].data_mut()[c] = orig - eps;
            let lm = eval(f, &work)?;
            work[i].data_mut()[c] = orig;
            g.data_mut()[c] = (lp - lm) / (2.0 * eps);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Max relative error between analytic and central-difference gradients over
/// every coordinate of every input.
pub fn grad_check<F>(f: &F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let analytic = analytic_grad(f, inputs)?;
    let numerical = numerical_grad(f, inputs, eps)?;
    let mut max_err: f64 = 0.0;
    for (a, n) in analytic.iter().zip(&numerical) {
        for (&av, &nv) in a.data().iter().zip(n.data()) {
            max_err = max_err.max(rel_err(av, nv));
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    const EPS: f64 = 1e-5;
    const TOL: f64 = 1e-4;
    const SEEDS: std::ops::Range<u64> = 0..5;

    /// Run `f` through grad_check for each seed, generating inputs with
    /// `gen`, and assert the error stays under `tol`.
    fn check<G, F>(gen: G, f: F, tol: f64)
    where
        G: Fn(&mut Rng) -> Vec<Tensor<f64>>,
        F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    {
        for seed in SEEDS {
            let mut rng = Rng::seed_from_u64(0xface + seed);
            let inputs = gen(&mut rng);
            let err = grad_check(&f, &inputs, EPS).unwrap();
            assert!(err < tol, "seed {seed}: rel err {err} ≥ {tol}");
        }
    }

    fn randn2<'a>(shape: &'a [usize], shape2: &'a [usize]) -> impl Fn(&mut Rng) -> Vec<Tensor<f64>> + 'a {
        move |rng| {
            vec![
                Tensor::randn(shape.to_vec(), rng),
                Tensor::randn(shape2.to_vec(), rng),
            ]
        }
    }

    #[test]
    fn linear_function_is_near_exact() {
        // Central differences are exact for linear maps up to rounding.
        check(
            |rng| vec![Tensor::randn([2, 3], rng)],
            |t, xs| {
                let s = t.scale(xs[0], 3.0);
                Ok(t.sum_all(s))
            },
            1e-9,
        );
    }

    #[test]
    fn elementwise_binary_ops() {
        check(randn2(&[2, 3], &[2, 3]), |t, xs| {
            let s = t.add(xs[0], xs[1])?;
            let d = t.sub(s, xs[1])?;
            let m = t.mul(d, xs[1])?;
            Ok(t.mean_all(m))
        }, TOL);

        // Division with the denominator bounded away from zero.
        check(
            |rng| {
                let a = Tensor::randn([3, 2], rng);
                let b = Tensor::randn([3, 2], rng).map(|v: f64| v.abs() + 0.5);
                vec![a, b]
            },
            |t, xs| {
                let q = t.div(xs[0], xs[1])?;
                Ok(t.mean_all(q))
            },
            TOL,
        );
    }

    #[test]
    fn broadcast_binary_ops() {
        check(randn2(&[1, 4], &[3, 4]), |t, xs| {
            let m = t.mul(xs[0], xs[1])?;
            let a = t.add(m, xs[1])?;
            Ok(t.mean_all(a))
        }, TOL);
    }

    #[test]
    fn unary_ops() {
        check(
            |rng| vec![Tensor::randn([2, 4], rng).map(|v: f64| v.abs() + 0.5)],
            |t, xs| {
                let l = t.log(xs[0])?;
                let r = t.sqrt(xs[0])?;
                let s = t.add(l, r)?;
                Ok(t.mean_all(s))
            },
            TOL,
        );

        check(
            |rng| vec![Tensor::randn([3, 3], rng)],
            |t, xs| {
                let s = t.silu(xs[0]);
                Ok(t.mean_all(s))
            },
            1e-6, // silu is smooth; finite differences are tight here
        );
    }

    #[test]
    fn clip_gradient_matches_and_zeroes() {
        // Keep samples away from the clip boundaries so the subgradient is
        // unambiguous on both sides.
        check(
            |rng| {
                vec![Tensor::randn([4, 4], rng).map(|v: f64| {
                    if (v.abs() - 0.5).abs() < 0.01 {
                        v + 0.05
                    } else {
                        v
                    }
                })]
            },
            |t, xs| {
                let c = t.clip(xs[0], -0.5, 0.5);
                let sq = t.mul(c, c)?;
                Ok(t.mean_all(sq))
            },
            TOL,
        );
    }

    #[test]
    fn matmul_all_broadcast_cases() {
        // Plain 2-D.
        check(randn2(&[3, 4], &[4, 2]), |t, xs| {
            let p = t.matmul(xs[0], xs[1])?;
            Ok(t.mean_all(p))
        }, TOL);

        // Batched lhs against shared rank-2 rhs.
        check(randn2(&[2, 3, 4], &[4, 2]), |t, xs| {
            let p = t.matmul(xs[0], xs[1])?;
            Ok(t.mean_all(p))
        }, TOL);

        // Shared rank-2 lhs against batched rhs.
        check(randn2(&[3, 4], &[2, 4, 2]), |t, xs| {
            let p = t.matmul(xs[0], xs[1])?;
            Ok(t.mean_all(p))
        }, TOL);

        // Equal batch dims.
        check(randn2(&[2, 3, 4], &[2, 4, 2]), |t, xs| {
            let p = t.matmul(xs[0], xs[1])?;
            Ok(t.mean_all(p))
        }, TOL);
    }

    #[test]
    fn softmax_matmul_composite() {
        // Attention-shaped graph: softmax(A·Bᵀ/√d)·B, then a nonlinear
        // readout so every path carries gradient.
        check(randn2(&[3, 4], &[3, 4]), |t, xs| {
            let bt = t.permute(xs[1], vec![1, 0])?;
            let logits = t.matmul(xs[0], bt)?;
            let scaled = t.scale(logits, 0.5);
            let att = t.softmax(scaled, 1)?;
            let out = t.matmul(att, xs[1])?;
            let sq = t.mul(out, out)?;
            Ok(t.mean_all(sq))
        }, 1e-5);
    }

    #[test]
    fn reductions_and_structure() {
        check(
            |rng| vec![Tensor::randn([2, 3, 4], rng)],
            |t, xs| {
                let s = t.sum_axis(xs[0], 1)?;
                let m = t.mean_axis(s, 2)?;
                let r = t.reshape(m, vec![2, 1])?;
                let p = t.permute(r, vec![1, 0])?;
                let sq = t.mul(p, p)?;
                Ok(t.sum_all(sq))
            },
            TOL,
        );
    }

    #[test]
    fn concat_slice_masked_fill() {
        check(randn2(&[2, 3], &[2, 2]), |t, xs| {
            let c = t.concat(&[xs[0], xs[1]], 1)?; // [2,5]
            let mask = Tensor::new(
                vec![2, 5],
                vec![0., 0., 1., 0., 0., 0., 1., 0., 0., 0.],
            )?;
            let mf = t.masked_fill(c, &mask, -1e9)?;
            let sm = t.softmax(mf, 1)?;
            let sl = t.slice(sm, &[(0, 2), (1, 4)])?;
            let sq = t.mul(sl, sl)?;
            Ok(t.mean_all(sq))
        }, TOL);
    }

    #[test]
    fn mse_composite() {
        check(randn2(&[3, 3], &[3, 3]), |t, xs| t.mse(xs[0], xs[1]), TOL);
    }

    #[test]
    fn bce_style_graph() {
        // clip → log on both branches, the exact shape of the consistency
        // loss downstream.
        check(
            |rng| {
                let logits = Tensor::randn([2, 4], rng);
                let targets = Tensor::randn([2, 4], rng).map(|v: f64| 0.5 + 0.4 * v.tanh());
                vec![logits, targets]
            },
            |t, xs| {
                let p = t.softmax(xs[0], 1)?;
                let pc = t.clip(p, 1e-6, 1.0 - 1e-6);
                let lp = t.log(pc)?;
                let one_minus = t.scale(pc, -1.0);
                let om = t.add_scalar(one_minus, 1.0);
                let omc = t.clip(om, 1e-6, 1.0);
                let lq = t.log(omc)?;
                let m = xs[1];
                let a = t.mul(m, lp)?;
                let neg_m = t.scale(m, -1.0);
                let one_minus_m = t.add_scalar(neg_m, 1.0);
                let b = t.mul(one_minus_m, lq)?;
                let s = t.add(a, b)?;
                let n = t.mean_all(s);
                Ok(t.scale(n, -1.0))
            },
            TOL,
        );
    }

    #[test]
    fn harness_flags_corrupted_gradients() {
        // Self-test: a 10% perturbation of the analytic gradient must be
        // loudly visible, otherwise the harness proves nothing.
        let f = |t: &mut Tape<f64>, xs: &[Var]| -> Result<Var> {
            let sq = t.mul(xs[0], xs[0])?;
            Ok(t.sum_all(sq))
        };
        let inputs = vec![Tensor::randn([3, 3], &mut Rng::seed_from_u64(5))];
        let mut analytic = analytic_grad(&f, &inputs).unwrap();
        let numerical = numerical_grad(&f, &inputs, EPS).unwrap();
        for v in analytic[0].data_mut() {
            *v *= 1.1;
        }
        let mut max_err: f64 = 0.0;
        for (&a, &n) in analytic[0].data().iter().zip(numerical[0].data()) {
            max_err = max_err.max(rel_err(a, n));
        }
        assert!(max_err > 1e-2, "corrupted gradient slipped through: {max_err}");
    }
}
