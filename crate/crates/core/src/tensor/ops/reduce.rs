use crate::tensor::autograd::record;
use crate::tensor::{GradCtx, Tensor};

/// Sequential left-to-right sum in `f64`.
pub(crate) fn ordered_sum(values: &[f32]) -> f64 {
    values.iter().fold(0.0f64, |acc, &x| acc + x as f64)
}

/// Sum of all elements, as a scalar tensor.
pub fn sum(a: &Tensor) -> Tensor {
    let total = ordered_sum(&a.data()) as f32;
    let n = a.numel();
    record("sum", vec![total], Vec::new(), vec![a.clone()], move |ctx: &GradCtx<'_>| {
        Ok(vec![Some(vec![ctx.grad[0]; n])])
    })
}

/// Mean of all elements, as a scalar tensor.
pub fn mean(a: &Tensor) -> Tensor {
    let n = a.numel();
    let value = (ordered_sum(&a.data()) / n.max(1) as f64) as f32;
    record("mean", vec![value], Vec::new(), vec![a.clone()], move |ctx: &GradCtx<'_>| {
        let g = ctx.grad[0] / n.max(1) as f32;
        Ok(vec![Some(vec![g; n])])
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient_is_twice_x() {
        let x = Tensor::new(vec![0.5, -1.5, 2.0, 3.0], &[2, 2]).unwrap().with_requires_grad(true);
        let loss = sum(&x.mul(&x).unwrap());
        assert_eq!(loss.item().unwrap(), 0.25 + 2.25 + 4.0 + 9.0);
        loss.backward().unwrap();
        assert_eq!(x.grad_vec().unwrap(), vec![1.0, -3.0, 4.0, 6.0]);
    }

    #[test]
    fn mean_spreads_gradient_evenly() {
        let x = Tensor::new(vec![1.0; 4], &[4]).unwrap().with_requires_grad(true);
        mean(&x).backward().unwrap();
        assert_eq!(x.grad_vec().unwrap(), vec![0.25; 4]);
    }
}
