use super::contiguous_strides;
use crate::tensor::autograd::{record, record_storage};
use crate::tensor::{numel_of, GradCtx, Result, Tensor, TensorError};

/// Same data, new shape. Shares storage with the input.
pub fn reshape(a: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if numel_of(shape) != a.numel() {
        return Err(TensorError::ShapeMismatch {
            op: "reshape",
            expected: a.shape().to_vec(),
            got: shape.to_vec(),
        });
    }
    Ok(record_storage(
        "reshape",
        a.0.storage.clone(),
        shape.to_vec(),
        vec![a.clone()],
        |ctx: &GradCtx<'_>| Ok(vec![Some(ctx.grad.to_vec())]),
    ))
}

/// Copies `src` (shape `shape`) into a new buffer with axes reordered so that
/// output axis `i` is input axis `axes[i]`.
fn permute_copy(src: &[f32], shape: &[usize], axes: &[usize]) -> Vec<f32> {
    let in_strides = contiguous_strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let nd = out_shape.len();
    let mut out = vec![0.0f32; src.len()];
    if nd == 0 || src.is_empty() {
        out.copy_from_slice(src);
        return out;
    }
    let inner = out_shape[nd - 1];
    let inner_stride = strides[nd - 1];
    let mut counter = vec![0usize; nd - 1];
    let mut base = 0usize;
    for chunk in out.chunks_mut(inner) {
        if inner_stride == 1 {
            chunk.copy_from_slice(&src[base..base + inner]);
        } else {
            for (j, o) in chunk.iter_mut().enumerate() {
                *o = src[base + j * inner_stride];
            }
        }
        for axis in (0..nd - 1).rev() {
            counter[axis] += 1;
            base += strides[axis];
            if counter[axis] < out_shape[axis] {
                break;
            }
            base -= strides[axis] * out_shape[axis];
            counter[axis] = 0;
        }
    }
    out
}

/// Reorders axes: output axis `i` is input axis `axes[i]`.
pub fn permute(a: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let nd = a.ndim();
    let mut seen = vec![false; nd];
    if axes.len() != nd || axes.iter().any(|&x| x >= nd || std::mem::replace(&mut seen[x], true)) {
        return Err(TensorError::InvalidArgument {
            op: "permute",
            msg: format!("{axes:?} is not a permutation of {nd} axes"),
        });
    }
    let shape = a.shape().to_vec();
    let out_shape: Vec<usize> = axes.iter().map(|&x| shape[x]).collect();
    let out = permute_copy(&a.data(), &shape, axes);
    let mut inverse = vec![0; nd];
    for (i, &x) in axes.iter().enumerate() {
        inverse[x] = i;
    }
    let grad_shape = out_shape.clone();
    Ok(record("permute", out, out_shape, vec![a.clone()], move |ctx: &GradCtx<'_>| {
        Ok(vec![Some(permute_copy(ctx.grad, &grad_shape, &inverse))])
    }))
}

/// Splits `shape` around `axis` into (outer, extent, inner) element counts.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

/// Joins tensors along `axis`. All other extents must agree.
pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
    let first = parts.first().ok_or(TensorError::InvalidArgument {
        op: "concat",
        msg: "no inputs".into(),
    })?;
    let nd = first.ndim();
    if axis >= nd {
        return Err(TensorError::Rank { op: "concat", expected: axis + 1, got: first.shape().to_vec() });
    }
    for p in parts {
        if p.ndim() != nd {
            return Err(TensorError::Rank { op: "concat", expected: nd, got: p.shape().to_vec() });
        }
        for ax in (0..nd).filter(|&ax| ax != axis) {
            if p.shape()[ax] != first.shape()[ax] {
                return Err(TensorError::AxisMismatch {
                    op: "concat",
                    axis: ax,
                    expected: first.shape()[ax],
                    got: p.shape()[ax],
                });
            }
        }
    }
    let extents: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
    let total: usize = extents.iter().sum();
    let mut out_shape = first.shape().to_vec();
    out_shape[axis] = total;
    let (outer, _, inner) = split_at_axis(&out_shape, axis);
    let mut out = Vec::with_capacity(numel_of(&out_shape));
    let datas: Vec<_> = parts.iter().map(Tensor::data).collect();
    for o in 0..outer {
        for (d, &e) in datas.iter().zip(&extents) {
            out.extend_from_slice(&d[o * e * inner..(o + 1) * e * inner]);
        }
    }
    Ok(record("concat", out, out_shape, parts.to_vec(), move |ctx: &GradCtx<'_>| {
        let mut grads: Vec<Option<Vec<f32>>> = extents
            .iter()
            .zip(ctx.needs)
            .map(|(&e, &need)| need.then(|| Vec::with_capacity(outer * e * inner)))
            .collect();
        let mut pos = 0;
        for _ in 0..outer {
            for (g, &e) in grads.iter_mut().zip(&extents) {
                if let Some(g) = g.as_mut() {
                    g.extend_from_slice(&ctx.grad[pos..pos + e * inner]);
                }
                pos += e * inner;
            }
        }
        Ok(grads)
    }))
}

/// The slice `start..start + len` along `axis`.
pub fn narrow(a: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    if axis >= a.ndim() {
        return Err(TensorError::Rank { op: "narrow", expected: axis + 1, got: a.shape().to_vec() });
    }
    let extent = a.shape()[axis];
    if start + len > extent {
        return Err(TensorError::AxisMismatch { op: "narrow", axis, expected: extent, got: start + len });
    }
    let (outer, _, inner) = split_at_axis(a.shape(), axis);
    let src = a.data();
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * extent + start) * inner;
        out.extend_from_slice(&src[base..base + len * inner]);
    }
    let mut out_shape = a.shape().to_vec();
    out_shape[axis] = len;
    let in_len = a.numel();
    Ok(record("narrow", out, out_shape, vec![a.clone()], move |ctx: &GradCtx<'_>| {
        let mut g = vec![0.0f32; in_len];
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            g[base..base + len * inner]
                .copy_from_slice(&ctx.grad[o * len * inner..(o + 1) * len * inner]);
        }
        Ok(vec![Some(g)])
    }))
}
