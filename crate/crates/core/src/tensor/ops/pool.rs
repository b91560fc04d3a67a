use crate::tensor::autograd::record;
use crate::tensor::{GradCtx, Result, Tensor, TensorError};

fn plane_dims(op: &'static str, x: &Tensor) -> Result<(usize, usize, usize)> {
    if x.ndim() < 2 {
        return Err(TensorError::Rank { op, expected: 2, got: x.shape().to_vec() });
    }
    let nd = x.ndim();
    let (h, w) = (x.shape()[nd - 2], x.shape()[nd - 1]);
    Ok((x.numel() / (h * w).max(1), h, w))
}

/// 2x2 average pooling over the last two axes (extents must be even).
pub fn avg_pool2x(x: &Tensor) -> Result<Tensor> {
    let (planes, h, w) = plane_dims("avg_pool2x", x)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(TensorError::InvalidArgument {
            op: "avg_pool2x",
            msg: format!("spatial extents {h}x{w} must be even"),
        });
    }
    let (oh, ow) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = vec![0.0f32; planes * oh * ow];
    for p in 0..planes {
        let src = &xd[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                let a = src[2 * i * w + 2 * j] + src[2 * i * w + 2 * j + 1];
                let b = src[(2 * i + 1) * w + 2 * j] + src[(2 * i + 1) * w + 2 * j + 1];
                dst[i * ow + j] = (a + b) * 0.25;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    let nd = shape.len();
    shape[nd - 2] = oh;
    shape[nd - 1] = ow;
    Ok(record("avg_pool2x", out, shape, vec![x.clone()], move |ctx: &GradCtx<'_>| {
        let mut g = vec![0.0f32; planes * h * w];
        for p in 0..planes {
            let up = &ctx.grad[p * oh * ow..(p + 1) * oh * ow];
            let dst = &mut g[p * h * w..(p + 1) * h * w];
            for i in 0..h {
                for j in 0..w {
                    dst[i * w + j] = up[(i / 2) * ow + j / 2] * 0.25;
                }
            }
        }
        Ok(vec![Some(g)])
    }))
}

/// Nearest-neighbour 2x upsampling over the last two axes.
pub fn upsample_nearest2x(x: &Tensor) -> Result<Tensor> {
    let (planes, h, w) = plane_dims("upsample_nearest2x", x)?;
    let (oh, ow) = (h * 2, w * 2);
    let xd = x.data();
    let mut out = vec![0.0f32; planes * oh * ow];
    for p in 0..planes {
        let src = &xd[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                dst[i * ow + j] = src[(i / 2) * w + j / 2];
            }
        }
    }
    let mut shape = x.shape().to_vec();
    let nd = shape.len();
    shape[nd - 2] = oh;
    shape[nd - 1] = ow;
    Ok(record("upsample_nearest2x", out, shape, vec![x.clone()], move |ctx: &GradCtx<'_>| {
        let mut g = vec![0.0f32; planes * h * w];
        for p in 0..planes {
            let up = &ctx.grad[p * oh * ow..(p + 1) * oh * ow];
            let dst = &mut g[p * h * w..(p + 1) * h * w];
            for i in 0..h {
                for j in 0..w {
                    let (a, b) = (up[2 * i * ow + 2 * j], up[2 * i * ow + 2 * j + 1]);
                    let (c, d) = (up[(2 * i + 1) * ow + 2 * j], up[(2 * i + 1) * ow + 2 * j + 1]);
                    dst[i * w + j] = (a + b) + (c + d);
                }
            }
        }
        Ok(vec![Some(g)])
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_then_upsample_keeps_block_means() {
        let x = Tensor::new((0..16).map(|i| i as f32).collect(), &[1, 4, 4]).unwrap();
        let p = avg_pool2x(&x).unwrap();
        assert_eq!(p.to_vec(), vec![2.5, 4.5, 10.5, 12.5]);
        let u = upsample_nearest2x(&p).unwrap();
        assert_eq!(u.shape(), &[1, 4, 4]);
        assert_eq!(u.to_vec()[0..4], [2.5, 2.5, 4.5, 4.5]);
    }
}
