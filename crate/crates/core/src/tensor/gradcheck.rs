//! Central finite-difference gradient checks.
//!
//! The probe loss is `L = sum(w * f(inputs))` with fixed random weights `w`,
//! accumulated in f64 over the f32 outputs. Analytic gradients come from one
//! backward pass with `w` as the output gradient.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{no_grad, Result, Tensor};

/// Worst relative error per input: `max|fd - an| / max|an|`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub rel_err: Vec<f64>,
}

impl GradCheck {
    pub fn worst(&self) -> f64 {
        self.rel_err.iter().copied().fold(0.0, f64::max)
    }
}

fn probe_loss(y: &Tensor, w: &[f32]) -> f64 {
    y.data().iter().zip(w).fold(0.0f64, |acc, (&a, &b)| acc + a as f64 * b as f64)
}

/// Compares analytic and central-difference gradients of `f` with respect to
/// every input, perturbing each element by `±h`.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], h: f32, seed: u64) -> Result<GradCheck>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let leaves: Vec<Tensor> = inputs.iter().map(|t| t.detach().with_requires_grad(true)).collect();
    let y = f(&leaves)?;
    let w = Tensor::randn(y.shape(), &mut ChaCha8Rng::seed_from_u64(seed)).to_vec();
    y.backward_with_grad(w.clone())?;

    let _guard = no_grad();
    let mut rel_err = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let analytic = leaves[i].grad_vec().unwrap_or_else(|| vec![0.0; leaves[i].numel()]);
        let base = inputs[i].to_vec();
        let mut worst_diff = 0.0f64;
        for j in 0..base.len() {
            let eval = |delta: f32| -> Result<f64> {
                let mut v = base.clone();
                v[j] += delta;
                let mut moved: Vec<Tensor> = leaves.iter().map(Tensor::detach).collect();
                moved[i] = Tensor::new(v, inputs[i].shape())?;
                Ok(probe_loss(&f(&moved)?, &w))
            };
            // use the perturbation actually representable in f32
            let hp = (base[j] + h) - base[j];
            let hm = base[j] - (base[j] - h);
            let fd = (eval(hp)? - eval(-hm)?) / (hp as f64 + hm as f64);
            worst_diff = worst_diff.max((fd - analytic[j] as f64).abs());
        }
        let scale = analytic.iter().fold(0.0f64, |m, &g| m.max((g as f64).abs()));
        rel_err.push(if scale == 0.0 { worst_diff } else { worst_diff / scale });
    }
    Ok(GradCheck { rel_err })
}

/// One primitive under test: random inputs and the function to differentiate.
pub struct Case {
    pub name: &'static str,
    pub inputs: fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    pub f: fn(&[Tensor]) -> Result<Tensor>,
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, rng)
}

/// Small randomized instances of every differentiable primitive.
pub fn catalogue() -> Vec<Case> {
    use super::ops::*;
    vec![
        Case { name: "add", inputs: |r| vec![randn(&[2, 3, 4], r), randn(&[3, 1], r)], f: |x| add(&x[0], &x[1]) },
        Case { name: "sub", inputs: |r| vec![randn(&[2, 3], r), randn(&[2, 3], r)], f: |x| sub(&x[0], &x[1]) },
        Case { name: "mul", inputs: |r| vec![randn(&[2, 1, 4], r), randn(&[3, 4], r)], f: |x| mul(&x[0], &x[1]) },
        Case { name: "scale", inputs: |r| vec![randn(&[5], r)], f: |x| Ok(scale(&x[0], -1.5)) },
        Case { name: "silu", inputs: |r| vec![randn(&[3, 5], r)], f: |x| Ok(silu(&x[0])) },
        Case {
            name: "matmul",
            inputs: |r| vec![randn(&[2, 3, 4], r), randn(&[2, 4, 5], r)],
            f: |x| matmul(&x[0], &x[1]),
        },
        Case {
            name: "matmul_shared_rhs",
            inputs: |r| vec![randn(&[2, 3, 4], r), randn(&[4, 2], r)],
            f: |x| matmul(&x[0], &x[1]),
        },
        Case {
            name: "linear",
            inputs: |r| vec![randn(&[3, 4], r), randn(&[5, 4], r), randn(&[5], r)],
            f: |x| linear(&x[0], &x[1], Some(&x[2])),
        },
        Case {
            name: "conv2d",
            inputs: |r| vec![randn(&[1, 2, 5, 5], r), randn(&[3, 2, 3, 3], r), randn(&[3], r)],
            f: |x| conv2d(&x[0], &x[1], Some(&x[2])),
        },
        Case {
            name: "conv3d",
            inputs: |r| vec![randn(&[1, 2, 4, 3, 3], r), randn(&[2, 2, 3, 3, 3], r), randn(&[2], r)],
            f: |x| conv3d(&x[0], &x[1], Some(&x[2])),
        },
        Case {
            name: "conv3d_temporal",
            inputs: |r| vec![randn(&[2, 3, 5, 2, 2], r), randn(&[3, 3, 3, 1, 1], r), randn(&[3], r)],
            f: |x| conv3d(&x[0], &x[1], Some(&x[2])),
        },
        Case { name: "softmax", inputs: |r| vec![randn(&[3, 6], r)], f: |x| softmax(&x[0]) },
        Case {
            name: "attention",
            inputs: |r| vec![randn(&[2, 3, 4], r), randn(&[2, 5, 4], r), randn(&[2, 5, 3], r)],
            f: |x| scaled_dot_product_attention(&x[0], &x[1], &x[2]),
        },
        Case {
            name: "temporal_attention",
            inputs: |r| {
                let mut v = vec![randn(&[3, 4, 4], r)];
                v.extend((0..4).map(|_| randn(&[4, 4], r).scale(0.5)));
                v.push(randn(&[4, 4], r));
                v
            },
            f: |x| temporal_attention(&x[0], &x[1], &x[2], &x[3], &x[4], &x[5]),
        },
        Case {
            name: "group_norm",
            inputs: |r| vec![randn(&[2, 4, 3, 3], r), randn(&[4], r), randn(&[4], r)],
            f: |x| group_norm(&x[0], 2, &x[1], &x[2]),
        },
        Case { name: "reshape", inputs: |r| vec![randn(&[2, 6], r)], f: |x| reshape(&x[0], &[3, 4])?.mul(&reshape(&x[0], &[3, 4])?) },
        Case { name: "permute", inputs: |r| vec![randn(&[2, 3, 4], r)], f: |x| permute(&x[0], &[2, 0, 1]) },
        Case {
            name: "concat",
            inputs: |r| vec![randn(&[2, 3], r), randn(&[2, 2], r)],
            f: |x| concat(&[x[0].clone(), x[1].clone()], 1),
        },
        Case { name: "narrow", inputs: |r| vec![randn(&[4, 5], r)], f: |x| narrow(&x[0], 1, 1, 3) },
        Case { name: "sum", inputs: |r| vec![randn(&[3, 4], r)], f: |x| Ok(sum(&x[0].mul(&x[0])?)) },
        Case { name: "mean", inputs: |r| vec![randn(&[3, 4], r)], f: |x| Ok(mean(&x[0].mul(&x[0])?)) },
        Case { name: "avg_pool2x", inputs: |r| vec![randn(&[1, 2, 4, 4], r)], f: |x| avg_pool2x(&x[0]) },
        Case { name: "upsample_nearest2x", inputs: |r| vec![randn(&[1, 2, 3, 3], r)], f: |x| upsample_nearest2x(&x[0]) },
        Case {
            name: "checkpoint",
            inputs: |r| vec![randn(&[2, 5], r), randn(&[5], r)],
            f: |x| super::checkpoint(x, false, |xs| silu(&xs[0]).mul(&xs[1])),
        },
    ]
}
