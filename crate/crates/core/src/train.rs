//! Shared mini-batch training loop.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::nn::{Adam, Gradients, Tensor, UNet};
use crate::rng;

#[derive(Clone, Copy, Debug)]
pub(crate) struct FitParams {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

/// Result of evaluating the loss on one batch: the scalar loss, a
/// caller-defined statistic, and the gradient with respect to each output.
pub(crate) struct BatchLoss<S> {
    pub loss: f64,
    pub stats: S,
    pub grads: Vec<Tensor>,
}

/// Runs `params.epochs` epochs of Adam over `inputs` in a seeded shuffled
/// order. `loss` may return `None` to skip a batch that carries no
/// supervision. `on_epoch` sees the per-batch statistics of each epoch.
pub(crate) fn fit<S>(
    net: &mut UNet,
    inputs: &[Tensor],
    params: FitParams,
    mut loss: impl FnMut(&[usize], &[Tensor]) -> Result<Option<BatchLoss<S>>>,
    mut on_epoch: impl FnMut(usize, &UNet, Vec<S>) -> Result<()>,
) -> Result<()> {
    if params.batch_size == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    if !(params.lr.is_finite() && params.lr > 0.0) {
        return Err(Error::config(format!("learning rate must be positive, got {}", params.lr)));
    }
    let mut opt = Adam::new(net, params.lr as f32);
    let mut grads = Gradients::zeros_like(net);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut shuffle_rng = rng::rng(params.seed);
    for epoch in 1..=params.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut stats = Vec::new();
        for batch in order.chunks(params.batch_size) {
            let mut outputs = Vec::with_capacity(batch.len());
            let mut traces = Vec::with_capacity(batch.len());
            for &i in batch {
                let (out, trace) = net.forward_train(&inputs[i])?;
                outputs.push(out);
                traces.push(trace);
            }
            let Some(step) = loss(batch, &outputs)? else {
                continue;
            };
            if !step.loss.is_finite() {
                return Err(Error::Training { epoch, message: format!("loss became {}", step.loss) });
            }
            grads.fill_zero();
            for (trace, g) in traces.iter().zip(&step.grads) {
                net.backward(trace, g, &mut grads)?;
            }
            opt.step(net, &grads);
            stats.push(step.stats);
        }
        on_epoch(epoch, net, stats)?;
    }
    Ok(())
}
