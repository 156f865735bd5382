use super::{backward, forward, Batch, ForwardCache, LossOutput, ModelSpec};
use crate::error::Result;
use crate::tensor::NamedTensorMap;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// Relative error with a floor on the denominator so that two near-zero
/// gradients compare as equal.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7)
}

/// Compares backpropagated gradients of `loss` against central differences
/// with the given step, over every parameter.
pub fn central_difference_check<F>(
    params: &NamedTensorMap,
    spec: &ModelSpec,
    batch: &Batch,
    step: f64,
    loss: F,
) -> Result<GradCheckReport>
where
    F: Fn(&ForwardCache) -> Result<LossOutput>,
{
    let cache = forward(params, spec, batch)?;
    let analytic = backward(params, spec, &cache, &loss(&cache)?.dlogits)?;

    let eval = |p: &NamedTensorMap| -> Result<f64> { Ok(loss(&forward(p, spec, batch)?)?.loss) };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    let mut probe = params.clone();
    for (name, t) in params.iter() {
        for i in 0..t.len() {
            let orig = t.data()[i];
            probe.get_mut(name).expect("same map").data_mut()[i] = orig + step;
            let up = eval(&probe)?;
            probe.get_mut(name).expect("same map").data_mut()[i] = orig - step;
            let down = eval(&probe)?;
            probe.get_mut(name).expect("same map").data_mut()[i] = orig;

            let numeric = (up - down) / (2.0 * step);
            let err = relative_error(analytic.get(name).expect("closure").data()[i], numeric);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = name.clone();
                report.worst_index = i;
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
