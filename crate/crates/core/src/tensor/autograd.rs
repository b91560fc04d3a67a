use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use super::{Result, Storage, Tensor, TensorError};

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static LIVE_OPS: Cell<usize> = const { Cell::new(0) };
    static PEAK_OPS: Cell<usize> = const { Cell::new(0) };
}

/// Inputs handed to a backward rule.
pub(crate) struct GradCtx<'a> {
    /// Upstream gradient, same shape as the op output.
    pub grad: &'a [f32],
    pub output: &'a Tensor,
    pub inputs: &'a [Tensor],
    /// Which inputs want a gradient. Rules may skip the others.
    pub needs: &'a [bool],
}

pub(crate) trait GradFn: Send + Sync {
    fn backward(&self, ctx: &GradCtx<'_>) -> Result<Vec<Option<Vec<f32>>>>;
}

impl<F> GradFn for F
where
    F: Fn(&GradCtx<'_>) -> Result<Vec<Option<Vec<f32>>>> + Send + Sync,
{
    fn backward(&self, ctx: &GradCtx<'_>) -> Result<Vec<Option<Vec<f32>>>> {
        self(ctx)
    }
}

/// A recorded backward step. Counted while alive so tests can observe how
/// many intermediate results a forward pass keeps around.
pub(crate) struct OpRecord {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub grad_fn: Box<dyn GradFn>,
}

impl OpRecord {
    fn new(name: &'static str, inputs: Vec<Tensor>, grad_fn: Box<dyn GradFn>) -> Self {
        LIVE_OPS.with(|live| {
            let n = live.get() + 1;
            live.set(n);
            PEAK_OPS.with(|peak| peak.set(peak.get().max(n)));
        });
        OpRecord { name, inputs, grad_fn }
    }
}

impl Drop for OpRecord {
    fn drop(&mut self) {
        LIVE_OPS.with(|live| live.set(live.get().saturating_sub(1)));
    }
}

/// Counters over recorded backward steps on the current thread.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GraphStats {
    pub live_ops: usize,
    pub peak_ops: usize,
}

pub fn graph_stats() -> GraphStats {
    GraphStats {
        live_ops: LIVE_OPS.with(Cell::get),
        peak_ops: PEAK_OPS.with(Cell::get),
    }
}

/// Resets the peak counter to the current live count.
pub fn reset_graph_stats() {
    let live = LIVE_OPS.with(Cell::get);
    PEAK_OPS.with(|p| p.set(live));
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(Cell::get)
}

/// Restores the previous recording mode when dropped.
pub struct NoGradGuard {
    previous: bool,
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.previous));
    }
}

fn set_grad_mode(enabled: bool) -> NoGradGuard {
    let previous = GRAD_ENABLED.with(|g| g.replace(enabled));
    NoGradGuard { previous }
}

/// Disables gradient recording on this thread until the guard drops.
pub fn no_grad() -> NoGradGuard {
    set_grad_mode(false)
}

pub(crate) fn enable_grad() -> NoGradGuard {
    set_grad_mode(true)
}

pub(crate) fn wants_graph(inputs: &[Tensor]) -> bool {
    is_grad_enabled() && inputs.iter().any(Tensor::requires_grad)
}

/// Wraps an op result, attaching `grad_fn` when any input is differentiable.
pub(crate) fn record<F>(
    name: &'static str,
    data: Vec<f32>,
    shape: Vec<usize>,
    inputs: Vec<Tensor>,
    grad_fn: F,
) -> Tensor
where
    F: GradFn + 'static,
{
    record_storage(name, Arc::new(Storage::F32(data)), shape, inputs, grad_fn)
}

pub(crate) fn record_storage<F>(
    name: &'static str,
    storage: Arc<Storage>,
    shape: Vec<usize>,
    inputs: Vec<Tensor>,
    grad_fn: F,
) -> Tensor
where
    F: GradFn + 'static,
{
    if !wants_graph(&inputs) {
        return Tensor::from_parts(shape, storage, false, None);
    }
    let op = OpRecord::new(name, inputs, Box::new(grad_fn));
    Tensor::from_parts(shape, storage, true, Some(op))
}

pub(crate) fn run_backward(root: &Tensor, seed: Vec<f32>) -> Result<()> {
    if !root.requires_grad() {
        return Ok(());
    }

    // Collect every differentiable node reachable from the root.
    let mut seen = HashSet::new();
    let mut stack = vec![root.clone()];
    let mut nodes = Vec::new();
    while let Some(t) = stack.pop() {
        if !seen.insert(t.id()) {
            continue;
        }
        {
            let op = t.0.op.lock().expect("op lock");
            if let Some(op) = op.as_ref() {
                for input in &op.inputs {
                    if input.requires_grad() && !seen.contains(&input.id()) {
                        stack.push(input.clone());
                    }
                }
            }
        }
        nodes.push(t);
    }
    // Ascending ids; popping yields consumers before producers.
    nodes.sort_by_key(Tensor::id);

    let mut grads: HashMap<u64, Vec<f32>> = HashMap::new();
    grads.insert(root.id(), seed);

    while let Some(node) = nodes.pop() {
        let Some(grad) = grads.remove(&node.id()) else {
            continue;
        };
        let op = node.0.op.lock().expect("op lock").take();
        let Some(op) = op else {
            if node.0.leaf {
                node.accumulate_grad(&grad);
                continue;
            }
            return Err(TensorError::GraphFreed { op: "unknown" });
        };
        let needs: Vec<bool> = op.inputs.iter().map(Tensor::requires_grad).collect();
        let ctx = GradCtx { grad: &grad, output: &node, inputs: &op.inputs, needs: &needs };
        let input_grads = op.grad_fn.backward(&ctx)?;
        debug_assert_eq!(input_grads.len(), op.inputs.len(), "{}", op.name);
        for ((input, g), need) in op.inputs.iter().zip(input_grads).zip(&needs) {
            let (Some(g), true) = (g, *need) else { continue };
            debug_assert_eq!(g.len(), input.numel(), "{} grad length", op.name);
            match grads.get_mut(&input.id()) {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => {
                    grads.insert(input.id(), g);
                }
            }
        }
    }
    Ok(())
}

/// Runs `f` without keeping its intermediate results; the backward pass
/// recomputes them from `inputs`.
///
/// `f` must be deterministic. Parameters captured by `f` receive their
/// gradients during recomputation. `trainable_inside` reports whether any such
/// captured parameter requires a gradient.
pub fn checkpoint<F>(inputs: &[Tensor], trainable_inside: bool, f: F) -> Result<Tensor>
where
    F: Fn(&[Tensor]) -> Result<Tensor> + Send + Sync + 'static,
{
    let out = {
        let _guard = no_grad();
        f(inputs)?
    };
    let needs_graph =
        is_grad_enabled() && (trainable_inside || inputs.iter().any(Tensor::requires_grad));
    if !needs_graph {
        return Ok(out);
    }
    let grad_fn = move |ctx: &GradCtx<'_>| -> Result<Vec<Option<Vec<f32>>>> {
        let _guard = enable_grad();
        let fresh: Vec<Tensor> = ctx
            .inputs
            .iter()
            .map(|t| t.with_requires_grad(t.requires_grad()))
            .collect();
        let recomputed = f(&fresh)?;
        recomputed.backward_with_grad(ctx.grad.to_vec())?;
        Ok(fresh.iter().map(Tensor::grad_vec).collect())
    };
    let op = OpRecord::new("checkpoint", inputs.to_vec(), Box::new(grad_fn));
    Ok(Tensor::from_parts(out.shape().to_vec(), out.0.storage.clone(), true, Some(op)))
}
