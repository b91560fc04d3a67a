use crate::tensor::autograd::record;
use super::linear;
use crate::tensor::gemm::{sgemm, Layout};
use crate::tensor::parallel::for_each_chunk;
use crate::tensor::{GradCtx, Result, Tensor, TensorError};

fn softmax_rows(data: &mut [f32], row_len: usize) {
    for row in data.chunks_mut(row_len) {
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &x| m.max(x));
        let mut total = 0.0f64;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            total += *x as f64;
        }
        let inv = (1.0 / total) as f32;
        row.iter_mut().for_each(|x| *x *= inv);
    }
}

/// `dx = y * (dy - sum(dy * y))` per row.
fn softmax_rows_backward(y: &[f32], dy: &[f32], row_len: usize) -> Vec<f32> {
    let mut dx = vec![0.0f32; y.len()];
    for ((dxr, yr), dyr) in dx.chunks_mut(row_len).zip(y.chunks(row_len)).zip(dy.chunks(row_len)) {
        let dot = yr.iter().zip(dyr).fold(0.0f64, |a, (&y, &d)| a + (y * d) as f64) as f32;
        for ((o, &y), &d) in dxr.iter_mut().zip(yr).zip(dyr) {
            *o = y * (d - dot);
        }
    }
    dx
}

/// Softmax over the last axis.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    let row = *x.shape().last().ok_or(TensorError::Rank { op: "softmax", expected: 1, got: vec![] })?;
    let mut out = x.to_vec();
    softmax_rows(&mut out, row.max(1));
    Ok(record("softmax", out, x.shape().to_vec(), vec![x.clone()], move |ctx: &GradCtx<'_>| {
        let y = ctx.output.data();
        Ok(vec![Some(softmax_rows_backward(&y, ctx.grad, row.max(1)))])
    }))
}

/// `softmax(q k^T / sqrt(C)) v` for `q: [N, Tq, C]`, `k: [N, Tk, C]`, `v: [N, Tk, Cv]`.
///
/// Each of the `N` sequences attends independently along its second axis.
pub fn scaled_dot_product_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    const OP: &str = "attention";
    let (&[n, tq, c], &[nk, tk, ck], &[nv, tv, cv]) = (q.shape(), k.shape(), v.shape()) else {
        let bad = [q, k, v].into_iter().find(|t| t.ndim() != 3).expect("a rank-3 violation");
        return Err(TensorError::Rank { op: OP, expected: 3, got: bad.shape().to_vec() });
    };
    if nk != n || nv != n {
        return Err(TensorError::AxisMismatch { op: OP, axis: 0, expected: n, got: if nk != n { nk } else { nv } });
    }
    if ck != c {
        return Err(TensorError::AxisMismatch { op: OP, axis: 2, expected: c, got: ck });
    }
    if tv != tk {
        return Err(TensorError::AxisMismatch { op: OP, axis: 1, expected: tk, got: tv });
    }
    let scale = 1.0 / (c as f32).sqrt();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut probs = vec![0.0f32; n * tq * tk];
    for_each_chunk(&mut probs, tq * tk, |i, p| {
        sgemm(tq, c, tk, &qd[i * tq * c..], Layout::rows(c), &kd[i * tk * c..], Layout::transposed(c), 0.0, p);
        p.iter_mut().for_each(|x| *x *= scale);
        softmax_rows(p, tk);
    });
    let mut out = vec![0.0f32; n * tq * cv];
    for_each_chunk(&mut out, tq * cv, |i, o| {
        sgemm(tq, tk, cv, &probs[i * tq * tk..], Layout::rows(tk), &vd[i * tk * cv..], Layout::rows(cv), 0.0, o);
    });

    let inputs = vec![q.clone(), k.clone(), v.clone()];
    Ok(record(OP, out, vec![n, tq, cv], inputs, move |ctx: &GradCtx<'_>| {
        let (qd, kd, vd) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.inputs[2].data());
        let dout = ctx.grad;
        // dS = P * (dP - rowsum(dP * P)) * scale, with dP = dO v^T
        let mut ds = vec![0.0f32; n * tq * tk];
        for_each_chunk(&mut ds, tq * tk, |i, ds_i| {
            let mut dp = vec![0.0f32; tq * tk];
            sgemm(tq, cv, tk, &dout[i * tq * cv..], Layout::rows(cv), &vd[i * tk * cv..], Layout::transposed(cv), 0.0, &mut dp);
            let g = softmax_rows_backward(&probs[i * tq * tk..(i + 1) * tq * tk], &dp, tk);
            ds_i.iter_mut().zip(g).for_each(|(o, g)| *o = g * scale);
        });
        let gq = ctx.needs[0].then(|| {
            let mut gq = vec![0.0f32; n * tq * c];
            for_each_chunk(&mut gq, tq * c, |i, o| {
                sgemm(tq, tk, c, &ds[i * tq * tk..], Layout::rows(tk), &kd[i * tk * c..], Layout::rows(c), 0.0, o);
            });
            gq
        });
        let gk = ctx.needs[1].then(|| {
            let mut gk = vec![0.0f32; n * tk * c];
            for_each_chunk(&mut gk, tk * c, |i, o| {
                sgemm(tk, tq, c, &ds[i * tq * tk..], Layout::transposed(tk), &qd[i * tq * c..], Layout::rows(c), 0.0, o);
            });
            gk
        });
        let gv = ctx.needs[2].then(|| {
            let mut gv = vec![0.0f32; n * tk * cv];
            for_each_chunk(&mut gv, tk * cv, |i, o| {
                sgemm(tk, tq, cv, &probs[i * tq * tk..], Layout::transposed(tk), &dout[i * tq * cv..], Layout::rows(cv), 0.0, o);
            });
            gv
        });
        Ok(vec![gq, gk, gv])
    }))
}

/// Single-head attention along the frame axis of `x: [N, T, C]`, where the
/// `N` axis folds batch and spatial positions. The positional table `pe: [T, C]`
/// is added before the projections; weights are `[C, C]` in `linear` layout.
pub fn temporal_attention(
    x: &Tensor,
    q_w: &Tensor,
    k_w: &Tensor,
    v_w: &Tensor,
    o_w: &Tensor,
    pe: &Tensor,
) -> Result<Tensor> {
    const OP: &str = "temporal_attention";
    if x.ndim() != 3 {
        return Err(TensorError::Rank { op: OP, expected: 3, got: x.shape().to_vec() });
    }
    if pe.ndim() != 2 {
        return Err(TensorError::Rank { op: OP, expected: 2, got: pe.shape().to_vec() });
    }
    let (t, c) = (x.shape()[1], x.shape()[2]);
    if pe.shape()[0] != t {
        return Err(TensorError::AxisMismatch { op: OP, axis: 1, expected: pe.shape()[0], got: t });
    }
    if pe.shape()[1] != c {
        return Err(TensorError::AxisMismatch { op: OP, axis: 2, expected: pe.shape()[1], got: c });
    }
    attend(&x.add(pe)?, q_w, k_w, v_w, o_w)
}

/// Projection + attention + output projection, with no positional term.
pub fn attend(x: &Tensor, q_w: &Tensor, k_w: &Tensor, v_w: &Tensor, o_w: &Tensor) -> Result<Tensor> {
    let q = linear(x, q_w, None)?;
    let k = linear(x, k_w, None)?;
    let v = linear(x, v_w, None)?;
    linear(&scaled_dot_product_attention(&q, &k, &v)?, o_w, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(vec![1., 2., 3., -1., 0., 1000.], &[2, 3]).unwrap();
        let y = softmax(&x).unwrap().to_vec();
        assert!((y[..3].iter().sum::<f32>() - 1.0).abs() < 1e-6);
        assert!((y[5] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn single_key_returns_its_value() {
        let q = Tensor::new(vec![0.3, -0.2], &[1, 1, 2]).unwrap();
        let k = Tensor::new(vec![5.0, 1.0], &[1, 1, 2]).unwrap();
        let v = Tensor::new(vec![7.0, -3.0], &[1, 1, 2]).unwrap();
        let o = scaled_dot_product_attention(&q, &k, &v).unwrap();
        assert_eq!(o.to_vec(), vec![7.0, -3.0]);
    }

    #[test]
    fn temporal_attention_rejects_table_length_mismatch() {
        let x = Tensor::zeros(&[2, 5, 4]);
        let w = Tensor::zeros(&[4, 4]);
        let err = temporal_attention(&x, &w, &w, &w, &w, &Tensor::zeros(&[4, 4])).unwrap_err();
        assert_eq!(err, TensorError::AxisMismatch { op: "temporal_attention", axis: 1, expected: 4, got: 5 });
    }

    #[test]
    fn temporal_attention_two_scalar_frames() {
        // C = 1: q = a*x, k = b*x, v = c*x, out = d * softmax(q k) v
        let x = Tensor::new(vec![0.5, -1.0], &[1, 2, 1]).unwrap();
        let pe = Tensor::new(vec![0.1, 0.2], &[2, 1]).unwrap();
        let w = |v: f32| Tensor::new(vec![v], &[1, 1]).unwrap();
        let (a, b, c, d) = (0.7f64, -1.3f64, 2.0f64, 0.5f64);
        let y = temporal_attention(&x, &w(a as f32), &w(b as f32), &w(c as f32), &w(d as f32), &pe).unwrap();
        let h = [0.6f64, -0.8];
        for (i, got) in y.to_vec().into_iter().enumerate() {
            let s: Vec<f64> = h.iter().map(|&hj| (a * h[i]) * (b * hj)).collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            let want = d * e.iter().zip(&h).map(|(e, hj)| e / z * c * hj).sum::<f64>();
            assert!((got as f64 - want).abs() < 1e-6, "{got} vs {want}");
        }
    }
}
