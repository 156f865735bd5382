use super::{backward, ce_loss, forward, sgd_step, Batch, ModelSpec, OptimizerState};
use crate::error::{Error, Result};
use crate::tensor::NamedTensorMap;

/// FedProx penalty `(mu / 2) * ||w - anchor||^2` added to the local objective.
#[derive(Clone, Copy, Debug)]
pub struct Proximal<'a> {
    pub anchor: &'a NamedTensorMap,
    pub mu: f64,
}

impl Proximal<'_> {
    pub fn penalty(&self, params: &NamedTensorMap) -> f64 {
        0.5 * self.mu
            * params
                .flat_values()
                .zip(self.anchor.flat_values())
                .map(|(w, a)| (w - a) * (w - a))
                .sum::<f64>()
    }

    pub fn add_gradient(&self, params: &NamedTensorMap, grads: &mut NamedTensorMap) {
        for ((_, g), ((_, w), (_, a))) in grads.iter_mut().zip(params.iter().zip(self.anchor.iter())) {
            for ((gv, wv), av) in g.data_mut().iter_mut().zip(w.data()).zip(a.data()) {
                *gv += self.mu * (wv - av);
            }
        }
    }
}

/// Gathers rows `idx` of a row-major feature matrix into a batch.
pub fn gather_batch(features: &[f64], labels: &[usize], dim: usize, idx: &[usize]) -> Batch {
    let mut inputs = Vec::with_capacity(idx.len() * dim);
    for &i in idx {
        inputs.extend_from_slice(&features[i * dim..(i + 1) * dim]);
    }
    Batch {
        inputs,
        labels: idx.iter().map(|&i| labels[i]).collect(),
    }
}

/// One pass of cross-entropy SGD over `order`, in mini-batches. Returns the
/// mean batch loss.
pub fn train_epoch_ce(
    params: &mut NamedTensorMap,
    spec: &ModelSpec,
    features: &[f64],
    labels: &[usize],
    order: &[usize],
    batch_size: usize,
    opt: &OptimizerState,
    prox: Option<Proximal<'_>>,
) -> Result<f64> {
    if order.is_empty() {
        return Err(Error::InvalidDataset("empty training set".into()));
    }
    let dim = spec.input_len();
    let mut total = 0.0;
    let mut batches = 0;
    for idx in order.chunks(batch_size.max(1)) {
        let batch = gather_batch(features, labels, dim, idx);
        let cache = forward(params, spec, &batch)?;
        let ce = ce_loss(cache.probs(), &batch.labels, spec.classes())?;
        let mut grads = backward(params, spec, &cache, &ce.dlogits)?;
        if let Some(p) = prox {
            p.add_gradient(params, &mut grads);
        }
        sgd_step(params, &grads, opt)?;
        total += ce.loss;
        batches += 1;
    }
    Ok(total / batches as f64)
}

/// Class probabilities for `n` flattened samples, computed in chunks.
pub fn predict_probs(params: &NamedTensorMap, spec: &ModelSpec, features: &[f64]) -> Result<Vec<f64>> {
    let dim = spec.input_len();
    let mut out = Vec::with_capacity(features.len() / dim * spec.classes());
    for chunk in features.chunks(256 * dim) {
        let batch = Batch {
            inputs: chunk.to_vec(),
            labels: vec![0; chunk.len() / dim],
        };
        out.extend_from_slice(forward(params, spec, &batch)?.probs());
    }
    Ok(out)
}
