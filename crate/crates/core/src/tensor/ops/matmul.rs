use crate::tensor::autograd::record;
use crate::tensor::gemm::{sgemm, Layout};
use crate::tensor::{GradCtx, Result, Tensor, TensorError};

struct MatmulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    /// `b` is one matrix shared by every batch entry.
    shared_rhs: bool,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(MatmulDims, Vec<usize>)> {
    if a.len() < 2 {
        return Err(TensorError::Rank { op: "matmul", expected: 2, got: a.to_vec() });
    }
    if b.len() < 2 {
        return Err(TensorError::Rank { op: "matmul", expected: 2, got: b.to_vec() });
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (kb, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != kb {
        return Err(TensorError::AxisMismatch { op: "matmul", axis: b.len() - 2, expected: k, got: kb });
    }
    let lead = &a[..a.len() - 2];
    let shared_rhs = b.len() == 2;
    if !shared_rhs && &b[..b.len() - 2] != lead {
        return Err(TensorError::ShapeMismatch { op: "matmul", expected: a.to_vec(), got: b.to_vec() });
    }
    let mut out = lead.to_vec();
    out.extend([m, n]);
    let batch = lead.iter().product();
    Ok((MatmulDims { batch, m, k, n, shared_rhs }, out))
}

/// Matrix product over the last two axes. `b` is either a single `[K, N]`
/// matrix or has the same leading axes as `a`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (d, out_shape) = matmul_dims(a.shape(), b.shape())?;
    let (da, db) = (a.data(), b.data());
    let mut out = vec![0.0f32; d.batch * d.m * d.n];
    if d.shared_rhs {
        sgemm(d.batch * d.m, d.k, d.n, &da, Layout::rows(d.k), &db, Layout::rows(d.n), 0.0, &mut out);
    } else {
        for i in 0..d.batch {
            sgemm(
                d.m,
                d.k,
                d.n,
                &da[i * d.m * d.k..],
                Layout::rows(d.k),
                &db[i * d.k * d.n..],
                Layout::rows(d.n),
                0.0,
                &mut out[i * d.m * d.n..(i + 1) * d.m * d.n],
            );
        }
    }
    Ok(record("matmul", out, out_shape, vec![a.clone(), b.clone()], move |ctx: &GradCtx<'_>| {
        let (xa, xb) = (ctx.inputs[0].data(), ctx.inputs[1].data());
        let g = ctx.grad;
        let MatmulDims { batch, m, k, n, shared_rhs } = d;
        let ga = ctx.needs[0].then(|| {
            let mut ga = vec![0.0f32; batch * m * k];
            if shared_rhs {
                sgemm(batch * m, n, k, g, Layout::rows(n), &xb, Layout::transposed(n), 0.0, &mut ga);
            } else {
                for i in 0..batch {
                    sgemm(
                        m,
                        n,
                        k,
                        &g[i * m * n..],
                        Layout::rows(n),
                        &xb[i * k * n..],
                        Layout::transposed(n),
                        0.0,
                        &mut ga[i * m * k..(i + 1) * m * k],
                    );
                }
            }
            ga
        });
        let gb = ctx.needs[1].then(|| {
            if shared_rhs {
                let mut gb = vec![0.0f32; k * n];
                sgemm(k, batch * m, n, &xa, Layout::transposed(k), g, Layout::rows(n), 0.0, &mut gb);
                gb
            } else {
                let mut gb = vec![0.0f32; batch * k * n];
                for i in 0..batch {
                    sgemm(
                        k,
                        m,
                        n,
                        &xa[i * m * k..],
                        Layout::transposed(k),
                        &g[i * m * n..],
                        Layout::rows(n),
                        0.0,
                        &mut gb[i * k * n..(i + 1) * k * n],
                    );
                }
                gb
            }
        });
        Ok(vec![ga, gb])
    }))
}

/// `x @ weight^T + bias` over the last axis of `x`; `weight` is `[out, in]`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    if weight.ndim() != 2 {
        return Err(TensorError::Rank { op: "linear", expected: 2, got: weight.shape().to_vec() });
    }
    let (out_f, in_f) = (weight.shape()[0], weight.shape()[1]);
    let last = *x.shape().last().ok_or(TensorError::Rank { op: "linear", expected: 1, got: vec![] })?;
    if last != in_f {
        return Err(TensorError::AxisMismatch { op: "linear", axis: x.ndim() - 1, expected: in_f, got: last });
    }
    if let Some(b) = bias {
        if b.shape() != [out_f] {
            return Err(TensorError::ShapeMismatch { op: "linear", expected: vec![out_f], got: b.shape().to_vec() });
        }
    }
    let rows = x.numel() / in_f.max(1);
    let (dx, dw) = (x.data(), weight.data());
    let mut out = vec![0.0f32; rows * out_f];
    sgemm(rows, in_f, out_f, &dx, Layout::rows(in_f), &dw, Layout::transposed(in_f), 0.0, &mut out);
    if let Some(b) = bias {
        let db = b.data();
        for row in out.chunks_mut(out_f) {
            row.iter_mut().zip(db.iter()).for_each(|(o, b)| *o += b);
        }
    }
    let mut out_shape = x.shape().to_vec();
    *out_shape.last_mut().expect("rank >= 1") = out_f;
    let mut inputs = vec![x.clone(), weight.clone()];
    inputs.extend(bias.cloned());
    Ok(record("linear", out, out_shape, inputs, move |ctx: &GradCtx<'_>| {
        let g = ctx.grad;
        let gx = ctx.needs[0].then(|| {
            let w = ctx.inputs[1].data();
            let mut gx = vec![0.0f32; rows * in_f];
            sgemm(rows, out_f, in_f, g, Layout::rows(out_f), &w, Layout::rows(in_f), 0.0, &mut gx);
            gx
        });
        let gw = ctx.needs[1].then(|| {
            let x = ctx.inputs[0].data();
            let mut gw = vec![0.0f32; out_f * in_f];
            sgemm(out_f, rows, in_f, g, Layout::transposed(out_f), &x, Layout::rows(in_f), 0.0, &mut gw);
            gw
        });
        let mut grads = vec![gx, gw];
        if ctx.inputs.len() == 3 {
            grads.push(ctx.needs[2].then(|| {
                let mut gb = vec![0.0f64; out_f];
                for row in g.chunks(out_f) {
                    gb.iter_mut().zip(row).for_each(|(a, &b)| *a += b as f64);
                }
                gb.into_iter().map(|x| x as f32).collect()
            }));
        }
        Ok(grads)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_shapes() {
        let a = Tensor::zeros(&[4, 2, 3]);
        let b = Tensor::zeros(&[3, 5]);
        assert_eq!(matmul(&a, &b).unwrap().shape(), &[4, 2, 5]);
        let bb = Tensor::zeros(&[4, 3, 5]);
        assert_eq!(matmul(&a, &bb).unwrap().shape(), &[4, 2, 5]);
        assert!(matches!(
            matmul(&a, &Tensor::zeros(&[2, 5])),
            Err(TensorError::AxisMismatch { .. })
        ));
    }

    #[test]
    fn linear_matches_hand_computation() {
        let x = Tensor::new(vec![1., 2.], &[1, 2]).unwrap();
        let w = Tensor::new(vec![1., 0., 0.5, -1.], &[2, 2]).unwrap();
        let b = Tensor::new(vec![0.25, 0.0], &[2]).unwrap();
        let y = linear(&x, &w, Some(&b)).unwrap();
        assert_eq!(y.to_vec(), vec![1.25, -1.5]);
    }
}
