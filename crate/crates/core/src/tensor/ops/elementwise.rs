use super::contiguous_strides;
use crate::tensor::autograd::record;
use crate::tensor::{GradCtx, Result, Tensor, TensorError};

/// Output shape plus coalesced per-operand strides for a broadcast.
#[derive(Debug, Clone)]
pub(crate) struct Broadcast {
    pub out_shape: Vec<usize>,
    dims: Vec<usize>,
    strides_a: Vec<usize>,
    strides_b: Vec<usize>,
}

impl Broadcast {
    pub fn new(op: &'static str, a: &[usize], b: &[usize]) -> Result<Broadcast> {
        let rank = a.len().max(b.len());
        let pad = |s: &[usize]| -> Vec<usize> {
            let mut v = vec![1; rank - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(a), pad(b));
        let mut out = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            out.push(match (x, y) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => {
                    return Err(TensorError::Broadcast { op, a: a.to_vec(), b: b.to_vec() });
                }
            });
        }
        let operand_strides = |p: &[usize]| -> Vec<usize> {
            let s = contiguous_strides(p);
            p.iter()
                .zip(&out)
                .zip(s)
                .map(|((&d, &o), s)| if d == 1 && o != 1 { 0 } else { s })
                .collect()
        };
        let (sa, sb) = (operand_strides(&pa), operand_strides(&pb));

        // Merge adjacent axes that are laid out consistently in both operands.
        let mut dims: Vec<usize> = Vec::new();
        let mut strides_a: Vec<usize> = Vec::new();
        let mut strides_b: Vec<usize> = Vec::new();
        for i in 0..rank {
            if out[i] == 1 {
                continue;
            }
            if let Some(last) = dims.len().checked_sub(1) {
                if strides_a[last] == sa[i] * out[i] && strides_b[last] == sb[i] * out[i] {
                    dims[last] *= out[i];
                    strides_a[last] = sa[i];
                    strides_b[last] = sb[i];
                    continue;
                }
            }
            dims.push(out[i]);
            strides_a.push(sa[i]);
            strides_b.push(sb[i]);
        }
        if dims.is_empty() {
            dims.push(1);
            strides_a.push(0);
            strides_b.push(0);
        }
        Ok(Broadcast { out_shape: out, dims, strides_a, strides_b })
    }

    /// Visits every output element in row-major order as
    /// `(out_index, a_index, b_index)`.
    pub fn walk(&self, mut f: impl FnMut(usize, usize, usize)) {
        let nd = self.dims.len();
        let inner = self.dims[nd - 1];
        let (ia_step, ib_step) = (self.strides_a[nd - 1], self.strides_b[nd - 1]);
        let outer: usize = self.dims[..nd - 1].iter().product();
        let mut counter = vec![0usize; nd - 1];
        let (mut oa, mut ob) = (0usize, 0usize);
        let mut out = 0usize;
        for _ in 0..outer {
            let (mut ia, mut ib) = (oa, ob);
            for _ in 0..inner {
                f(out, ia, ib);
                out += 1;
                ia += ia_step;
                ib += ib_step;
            }
            // advance the outer counter
            for axis in (0..nd - 1).rev() {
                counter[axis] += 1;
                oa += self.strides_a[axis];
                ob += self.strides_b[axis];
                if counter[axis] < self.dims[axis] {
                    break;
                }
                oa -= self.strides_a[axis] * self.dims[axis];
                ob -= self.strides_b[axis] * self.dims[axis];
                counter[axis] = 0;
            }
        }
    }
}

fn binary(
    name: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: fn(f32, f32) -> f32,
    grad_a: fn(f32, f32, f32) -> f32,
    grad_b: fn(f32, f32, f32) -> f32,
) -> Result<Tensor> {
    let plan = Broadcast::new(name, a.shape(), b.shape())?;
    let (da, db) = (a.data(), b.data());
    let mut out = vec![0.0f32; plan.out_shape.iter().product()];
    if a.shape() == b.shape() {
        for ((o, &x), &y) in out.iter_mut().zip(da.iter()).zip(db.iter()) {
            *o = f(x, y);
        }
    } else {
        plan.walk(|o, ia, ib| out[o] = f(da[ia], db[ib]));
    }
    let shape = plan.out_shape.clone();
    let (a_len, b_len) = (a.numel(), b.numel());
    Ok(record(name, out, shape, vec![a.clone(), b.clone()], move |ctx: &GradCtx<'_>| {
        let (xa, xb) = (ctx.inputs[0].data(), ctx.inputs[1].data());
        let mut ga = ctx.needs[0].then(|| vec![0.0f32; a_len]);
        let mut gb = ctx.needs[1].then(|| vec![0.0f32; b_len]);
        plan.walk(|o, ia, ib| {
            let g = ctx.grad[o];
            if let Some(ga) = ga.as_mut() {
                ga[ia] += grad_a(g, xa[ia], xb[ib]);
            }
            if let Some(gb) = gb.as_mut() {
                gb[ib] += grad_b(g, xa[ia], xb[ib]);
            }
        });
        Ok(vec![ga, gb])
    }))
}

/// Elementwise sum with broadcasting.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary("add", a, b, |x, y| x + y, |g, _, _| g, |g, _, _| g)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary("sub", a, b, |x, y| x - y, |g, _, _| g, |g, _, _| -g)
}

/// Elementwise product with broadcasting.
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary("mul", a, b, |x, y| x * y, |g, _, y| g * y, |g, x, _| g * x)
}

pub fn scale(a: &Tensor, factor: f32) -> Tensor {
    let out = a.data().iter().map(|&x| x * factor).collect();
    record("scale", out, a.shape().to_vec(), vec![a.clone()], move |ctx: &GradCtx<'_>| {
        Ok(vec![Some(ctx.grad.iter().map(|g| g * factor).collect())])
    })
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// `x * sigmoid(x)`.
pub fn silu(a: &Tensor) -> Tensor {
    let out = a.data().iter().map(|&x| x * sigmoid(x)).collect();
    record("silu", out, a.shape().to_vec(), vec![a.clone()], |ctx: &GradCtx<'_>| {
        let x = ctx.inputs[0].data();
        let g = ctx
            .grad
            .iter()
            .zip(x.iter())
            .map(|(&g, &x)| {
                let s = sigmoid(x);
                g * s * (1.0 + x * (1.0 - s))
            })
            .collect();
        Ok(vec![Some(g)])
    })
}
