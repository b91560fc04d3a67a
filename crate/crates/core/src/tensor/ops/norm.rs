use crate::tensor::autograd::record;
use crate::tensor::{GradCtx, Result, Tensor, TensorError};

pub const GROUP_NORM_EPS: f32 = 1e-5;

/// Group normalization over `[N, C, ...]`: statistics are taken per sample
/// over each group of `C / groups` channels and all trailing axes, followed by
/// a per-channel affine map.
pub fn group_norm(x: &Tensor, groups: usize, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    const OP: &str = "group_norm";
    if x.ndim() < 2 {
        return Err(TensorError::Rank { op: OP, expected: 2, got: x.shape().to_vec() });
    }
    let (n, c) = (x.shape()[0], x.shape()[1]);
    if groups == 0 || c % groups != 0 {
        return Err(TensorError::InvalidArgument {
            op: OP,
            msg: format!("{c} channels are not divisible into {groups} groups"),
        });
    }
    for p in [gamma, beta] {
        if p.shape() != [c] {
            return Err(TensorError::ShapeMismatch { op: OP, expected: vec![c], got: p.shape().to_vec() });
        }
    }
    let spatial: usize = x.shape()[2..].iter().product();
    let per_group = c / groups;
    let group_len = per_group * spatial;
    let xd = x.data();
    let (gd, bd) = (gamma.data(), beta.data());

    let mut means = vec![0.0f32; n * groups];
    let mut inv_stds = vec![0.0f32; n * groups];
    let mut out = vec![0.0f32; xd.len()];
    for s in 0..n * groups {
        let seg = &xd[s * group_len..(s + 1) * group_len];
        let mean = seg.iter().fold(0.0f64, |a, &v| a + v as f64) / group_len as f64;
        let var = seg.iter().fold(0.0f64, |a, &v| {
            let d = v as f64 - mean;
            a + d * d
        }) / group_len as f64;
        let inv_std = 1.0 / (var + GROUP_NORM_EPS as f64).sqrt();
        let (mean, inv_std) = (mean as f32, inv_std as f32);
        means[s] = mean;
        inv_stds[s] = inv_std;
        let g0 = (s % groups) * per_group;
        for (ci, (o, xs)) in out[s * group_len..(s + 1) * group_len]
            .chunks_mut(spatial)
            .zip(seg.chunks(spatial))
            .enumerate()
        {
            let (gm, bt) = (gd[g0 + ci], bd[g0 + ci]);
            for (o, &v) in o.iter_mut().zip(xs) {
                *o = (v - mean) * inv_std * gm + bt;
            }
        }
    }

    let shape = x.shape().to_vec();
    let inputs = vec![x.clone(), gamma.clone(), beta.clone()];
    Ok(record(OP, out, shape, inputs, move |ctx: &GradCtx<'_>| {
        let xd = ctx.inputs[0].data();
        let gd = ctx.inputs[1].data();
        let dy = ctx.grad;
        let mut gx = ctx.needs[0].then(|| vec![0.0f32; xd.len()]);
        let mut ggamma = vec![0.0f64; c];
        let mut gbeta = vec![0.0f64; c];
        for s in 0..n * groups {
            let (mean, inv_std) = (means[s], inv_stds[s]);
            let g0 = (s % groups) * per_group;
            let range = s * group_len..(s + 1) * group_len;
            let (xs, dys) = (&xd[range.clone()], &dy[range.clone()]);
            // sums of dxhat and dxhat * xhat over the group
            let (mut sum_d, mut sum_dx) = (0.0f64, 0.0f64);
            for ci in 0..per_group {
                let gm = gd[g0 + ci];
                let (mut sg, mut sb) = (0.0f64, 0.0f64);
                for j in ci * spatial..(ci + 1) * spatial {
                    let xhat = (xs[j] - mean) * inv_std;
                    let d = dys[j] as f64;
                    sg += d * xhat as f64;
                    sb += d;
                    let dxhat = (dys[j] * gm) as f64;
                    sum_d += dxhat;
                    sum_dx += dxhat * xhat as f64;
                }
                ggamma[g0 + ci] += sg;
                gbeta[g0 + ci] += sb;
            }
            if let Some(gx) = gx.as_mut() {
                let m = group_len as f64;
                let (mean_d, mean_dx) = ((sum_d / m) as f32, (sum_dx / m) as f32);
                let out = &mut gx[range];
                for ci in 0..per_group {
                    let gm = gd[g0 + ci];
                    for j in ci * spatial..(ci + 1) * spatial {
                        let xhat = (xs[j] - mean) * inv_std;
                        out[j] = inv_std * (dys[j] * gm - mean_d - xhat * mean_dx);
                    }
                }
            }
        }
        let to_f32 = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect::<Vec<_>>();
        Ok(vec![gx, ctx.needs[1].then(|| to_f32(ggamma)), ctx.needs[2].then(|| to_f32(gbeta))])
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizes_each_group() {
        let x = Tensor::new((0..16).map(|i| i as f32).collect(), &[1, 4, 4]).unwrap();
        let y = group_norm(&x, 2, &Tensor::full(&[4], 1.0), &Tensor::zeros(&[4])).unwrap();
        let v = y.to_vec();
        for g in v.chunks(8) {
            let mean: f32 = g.iter().sum::<f32>() / 8.0;
            let var: f32 = g.iter().map(|x| (x - mean) * (x - mean)).sum::<f32>() / 8.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn rejects_indivisible_groups() {
        let x = Tensor::zeros(&[1, 6, 2]);
        assert!(group_norm(&x, 4, &Tensor::zeros(&[6]), &Tensor::zeros(&[6])).is_err());
    }
}
