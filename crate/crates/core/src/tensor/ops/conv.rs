use crate::tensor::autograd::record;
use crate::tensor::gemm::{sgemm, Layout};
use crate::tensor::parallel::for_each_chunk;
use crate::tensor::{GradCtx, Result, Tensor, TensorError};

/// Geometry of a stride-1, "same"-padded 3D convolution.
#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    c_in: usize,
    c_out: usize,
    t: usize,
    h: usize,
    w: usize,
    kt: usize,
    kh: usize,
    kw: usize,
}

impl ConvGeom {
    fn positions(&self) -> usize {
        self.t * self.h * self.w
    }
    fn taps(&self) -> usize {
        self.c_in * self.kt * self.kh * self.kw
    }
    fn in_len(&self) -> usize {
        self.c_in * self.positions()
    }
    fn out_len(&self) -> usize {
        self.c_out * self.positions()
    }
}

/// Valid output range along one axis for kernel offset `d` with padding `pad`:
/// output index `o` reads input `o + d - pad`.
fn valid_range(extent: usize, d: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(d);
    let hi = (extent + pad).saturating_sub(d).min(extent);
    (lo, hi.max(lo))
}

/// Unfolds one sample `[C, T, H, W]` into `[C*kt*kh*kw, T*H*W]`.
fn im2col(g: &ConvGeom, x: &[f32], col: &mut [f32]) {
    let (pt, ph, pw) = (g.kt / 2, g.kh / 2, g.kw / 2);
    let (t_len, h_len, w_len) = (g.t, g.h, g.w);
    let plane = h_len * w_len;
    let p = g.positions();
    let mut row = 0;
    for c in 0..g.c_in {
        let xc = &x[c * p..(c + 1) * p];
        for dt in 0..g.kt {
            for dh in 0..g.kh {
                for dw in 0..g.kw {
                    let dst = &mut col[row * p..(row + 1) * p];
                    let (t0, t1) = valid_range(t_len, dt, pt);
                    let (h0, h1) = valid_range(h_len, dh, ph);
                    let (w0, w1) = valid_range(w_len, dw, pw);
                    dst.fill(0.0);
                    for t in t0..t1 {
                        let st = t + dt - pt;
                        for h in h0..h1 {
                            let sh = h + dh - ph;
                            let src = st * plane + sh * w_len + w0 + dw - pw;
                            let o = t * plane + h * w_len;
                            dst[o + w0..o + w1].copy_from_slice(&xc[src..src + (w1 - w0)]);
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `col` back into `dx`.
fn col2im(g: &ConvGeom, col: &[f32], dx: &mut [f32]) {
    let (pt, ph, pw) = (g.kt / 2, g.kh / 2, g.kw / 2);
    let (t_len, h_len, w_len) = (g.t, g.h, g.w);
    let plane = h_len * w_len;
    let p = g.positions();
    let mut row = 0;
    for c in 0..g.c_in {
        let dxc = &mut dx[c * p..(c + 1) * p];
        for dt in 0..g.kt {
            for dh in 0..g.kh {
                for dw in 0..g.kw {
                    let src_row = &col[row * p..(row + 1) * p];
                    let (t0, t1) = valid_range(t_len, dt, pt);
                    let (h0, h1) = valid_range(h_len, dh, ph);
                    let (w0, w1) = valid_range(w_len, dw, pw);
                    for t in t0..t1 {
                        let st = t + dt - pt;
                        for h in h0..h1 {
                            let sh = h + dh - ph;
                            let dst = st * plane + sh * w_len + w0 + dw - pw;
                            let o = t * plane + h * w_len;
                            dxc[dst..dst + (w1 - w0)]
                                .iter_mut()
                                .zip(&src_row[o + w0..o + w1])
                                .for_each(|(a, b)| *a += b);
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn conv_forward(g: ConvGeom, x: &[f32], w: &[f32], bias: Option<&[f32]>) -> Vec<f32> {
    let (p, k) = (g.positions(), g.taps());
    let mut out = vec![0.0f32; g.batch * g.out_len()];
    for_each_chunk(&mut out, g.out_len(), |n, out_n| {
        let mut col = vec![0.0f32; k * p];
        im2col(&g, &x[n * g.in_len()..(n + 1) * g.in_len()], &mut col);
        sgemm(g.c_out, k, p, w, Layout::rows(k), &col, Layout::rows(p), 0.0, out_n);
        if let Some(b) = bias {
            for (row, &bv) in out_n.chunks_mut(p).zip(b) {
                row.iter_mut().for_each(|o| *o += bv);
            }
        }
    });
    out
}

fn conv_backward(g: ConvGeom, ctx: &GradCtx<'_>) -> Vec<Option<Vec<f32>>> {
    let (p, k) = (g.positions(), g.taps());
    let dout = ctx.grad;
    let gx = ctx.needs[0].then(|| {
        let w = ctx.inputs[1].data();
        let mut gx = vec![0.0f32; g.batch * g.in_len()];
        for_each_chunk(&mut gx, g.in_len(), |n, gx_n| {
            let mut dcol = vec![0.0f32; k * p];
            sgemm(
                k,
                g.c_out,
                p,
                &w,
                Layout::transposed(k),
                &dout[n * g.out_len()..(n + 1) * g.out_len()],
                Layout::rows(p),
                0.0,
                &mut dcol,
            );
            col2im(&g, &dcol, gx_n);
        });
        gx
    });
    let gw = ctx.needs[1].then(|| {
        let x = ctx.inputs[0].data();
        let mut gw = vec![0.0f32; g.c_out * k];
        let mut col = vec![0.0f32; k * p];
        for n in 0..g.batch {
            im2col(&g, &x[n * g.in_len()..(n + 1) * g.in_len()], &mut col);
            sgemm(
                g.c_out,
                p,
                k,
                &dout[n * g.out_len()..(n + 1) * g.out_len()],
                Layout::rows(p),
                &col,
                Layout::transposed(p),
                1.0,
                &mut gw,
            );
        }
        gw
    });
    let mut grads = vec![gx, gw];
    if ctx.inputs.len() == 3 {
        grads.push(ctx.needs[2].then(|| {
            let mut gb = vec![0.0f64; g.c_out];
            for n in 0..g.batch {
                let dn = &dout[n * g.out_len()..(n + 1) * g.out_len()];
                for (o, row) in dn.chunks(p).enumerate() {
                    gb[o] += row.iter().fold(0.0f64, |a, &b| a + b as f64);
                }
            }
            gb.into_iter().map(|v| v as f32).collect()
        }));
    }
    grads
}

fn check_kernel(op: &'static str, kernel: &[usize]) -> Result<()> {
    if let Some((i, &k)) = kernel.iter().enumerate().find(|(_, &k)| k % 2 == 0) {
        return Err(TensorError::InvalidArgument {
            op,
            msg: format!("kernel extent {k} on kernel axis {i} is even; only odd extents have a center"),
        });
    }
    Ok(())
}

fn conv_impl(
    op: &'static str,
    g: ConvGeom,
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    out_shape: Vec<usize>,
) -> Result<Tensor> {
    if let Some(b) = bias {
        if b.shape() != [g.c_out] {
            return Err(TensorError::ShapeMismatch { op, expected: vec![g.c_out], got: b.shape().to_vec() });
        }
    }
    let out = {
        let bias_data = bias.map(Tensor::data);
        conv_forward(g, &input.data(), &weight.data(), bias_data.as_deref())
    };
    let mut inputs = vec![input.clone(), weight.clone()];
    inputs.extend(bias.cloned());
    Ok(record(op, out, out_shape, inputs, move |ctx: &GradCtx<'_>| Ok(conv_backward(g, ctx))))
}

/// 3D convolution, stride 1, zero "same" padding.
///
/// `input` is `[N, C_in, T, H, W]` (or unbatched `[C_in, T, H, W]`),
/// `weight` is `[C_out, C_in, kT, kH, kW]` with odd extents, `bias` is `[C_out]`.
pub fn conv3d(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    const OP: &str = "conv3d";
    let unbatched = input.ndim() == 4;
    let s = input.shape();
    let (n, ci, t, h, w) = match (s.len(), s) {
        (5, &[n, c, t, h, w]) => (n, c, t, h, w),
        (4, &[c, t, h, w]) => (1, c, t, h, w),
        _ => return Err(TensorError::Rank { op: OP, expected: 5, got: s.to_vec() }),
    };
    let &[co, wci, kt, kh, kw] = weight.shape() else {
        return Err(TensorError::Rank { op: OP, expected: 5, got: weight.shape().to_vec() });
    };
    if wci != ci {
        return Err(TensorError::AxisMismatch { op: OP, axis: if unbatched { 0 } else { 1 }, expected: wci, got: ci });
    }
    check_kernel(OP, &[kt, kh, kw])?;
    let g = ConvGeom { batch: n, c_in: ci, c_out: co, t, h, w, kt, kh, kw };
    let out_shape = if unbatched { vec![co, t, h, w] } else { vec![n, co, t, h, w] };
    conv_impl(OP, g, input, weight, bias, out_shape)
}

/// 2D convolution, stride 1, zero "same" padding. `input` is `[N, C_in, H, W]`,
/// `weight` is `[C_out, C_in, kH, kW]`.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    const OP: &str = "conv2d";
    let &[n, ci, h, w] = input.shape() else {
        return Err(TensorError::Rank { op: OP, expected: 4, got: input.shape().to_vec() });
    };
    let &[co, wci, kh, kw] = weight.shape() else {
        return Err(TensorError::Rank { op: OP, expected: 4, got: weight.shape().to_vec() });
    };
    if wci != ci {
        return Err(TensorError::AxisMismatch { op: OP, axis: 1, expected: wci, got: ci });
    }
    check_kernel(OP, &[kh, kw])?;
    let g = ConvGeom { batch: n, c_in: ci, c_out: co, t: 1, h, w, kt: 1, kh, kw };
    conv_impl(OP, g, input, weight, bias, vec![n, co, h, w])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn temporal_box_filter_sums_neighbours() {
        // C=1, H=W=1, T=3 with kernel of ones along T.
        let x = Tensor::new(vec![1., 2., 3.], &[1, 3, 1, 1]).unwrap();
        let w = Tensor::new(vec![1., 1., 1.], &[1, 1, 3, 1, 1]).unwrap();
        let b = Tensor::zeros(&[1]);
        let y = conv3d(&x, &w, Some(&b)).unwrap();
        assert_eq!(y.to_vec(), vec![3., 6., 5.]);
    }

    #[test]
    fn output_shape_contract() {
        let x = Tensor::zeros(&[2, 4, 8, 8, 8]);
        let w = Tensor::zeros(&[6, 4, 3, 1, 1]);
        assert_eq!(conv3d(&x, &w, None).unwrap().shape(), &[2, 6, 8, 8, 8]);
    }

    #[test]
    fn channel_mismatch_names_axis() {
        let x = Tensor::zeros(&[1, 3, 2, 2, 2]);
        let w = Tensor::zeros(&[2, 4, 1, 1, 1]);
        let err = conv3d(&x, &w, None).unwrap_err();
        assert!(matches!(err, TensorError::AxisMismatch { axis: 1, expected: 4, got: 3, .. }));
    }

    #[test]
    fn even_kernel_rejected() {
        let x = Tensor::zeros(&[1, 1, 4, 4]);
        let w = Tensor::zeros(&[1, 1, 2, 3]);
        assert!(conv2d(&x, &w, None).is_err());
    }

    #[test]
    fn spatial_kernel_matches_direct_sum() {
        let h = 4;
        let x: Vec<f32> = (0..h * h).map(|i| (i as f32 * 0.37).sin()).collect();
        let k: Vec<f32> = (0..9).map(|i| i as f32 - 4.0).collect();
        let y = conv2d(
            &Tensor::new(x.clone(), &[1, 1, h, h]).unwrap(),
            &Tensor::new(k.clone(), &[1, 1, 3, 3]).unwrap(),
            None,
        )
        .unwrap()
        .to_vec();
        for i in 0..h as isize {
            for j in 0..h as isize {
                let mut want = 0.0f32;
                for di in -1..=1isize {
                    for dj in -1..=1isize {
                        let (si, sj) = (i + di, j + dj);
                        if si >= 0 && sj >= 0 && si < h as isize && sj < h as isize {
                            want += k[((di + 1) * 3 + dj + 1) as usize] * x[(si * h as isize + sj) as usize];
                        }
                    }
                }
                assert!((y[(i * h as isize + j) as usize] - want).abs() < 1e-5);
            }
        }
    }
}
