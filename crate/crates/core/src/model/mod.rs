//! A small feed-forward network with hand-written backpropagation.
//!
//! Parameters live in a [`NamedTensorMap`] (`<layer>.weight`, `<layer>.bias`)
//! so they can be shipped to the server and aggregated directly. Dense
//! weights are `(out, in)`, convolution kernels `(out, in, kh, kw)`; the
//! convolution is "valid" with stride 1.

mod gradcheck;
mod loss;
mod optim;
mod train;

pub use gradcheck::{central_difference_check, GradCheckReport};
pub use loss::{ce_loss, kl_div, softmax_rows, KlOutput, LossOutput, PROB_FLOOR};
pub use optim::{sgd_step, OptimizerState};
pub use train::{gather_batch, predict_probs, train_epoch_ce, Proximal};

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{NamedTensorMap, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Layer {
    Dense {
        name: String,
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        name: String,
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
    },
    Relu,
    Flatten,
    SoftmaxOutput,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    id: String,
    layers: Vec<Layer>,
    input_shape: Vec<usize>,
    classes: usize,
    /// Per-sample activation shape entering each layer, plus the output.
    shapes: Vec<Vec<usize>>,
}

fn dense(name: &str, inputs: usize, outputs: usize) -> Layer {
    Layer::Dense {
        name: name.into(),
        inputs,
        outputs,
    }
}

impl ModelSpec {
    pub fn new(id: impl Into<String>, layers: Vec<Layer>, input_shape: Vec<usize>, classes: usize) -> Result<Self> {
        let mut shapes = vec![input_shape.clone()];
        let mut cur = input_shape.clone();
        if cur.is_empty() || cur.contains(&0) {
            return Err(Error::InvalidShape(format!("input shape {cur:?}")));
        }
        for (i, layer) in layers.iter().enumerate() {
            cur = match layer {
                Layer::Dense { inputs, outputs, .. } => {
                    if cur != [*inputs] {
                        return Err(Error::InvalidShape(format!(
                            "layer {i}: dense expects [{inputs}], got {cur:?}"
                        )));
                    }
                    vec![*outputs]
                }
                Layer::Conv2d {
                    in_channels,
                    out_channels,
                    kernel_h,
                    kernel_w,
                    ..
                } => match cur[..] {
                    [c, h, w] if c == *in_channels && h >= *kernel_h && w >= *kernel_w => {
                        vec![*out_channels, h - kernel_h + 1, w - kernel_w + 1]
                    }
                    _ => {
                        return Err(Error::InvalidShape(format!(
                            "layer {i}: conv expects [{in_channels}, >={kernel_h}, >={kernel_w}], got {cur:?}"
                        )))
                    }
                },
                Layer::Relu => cur,
                Layer::Flatten => vec![cur.iter().product()],
                Layer::SoftmaxOutput => {
                    if i + 1 != layers.len() || cur != [classes] {
                        return Err(Error::InvalidShape(format!(
                            "softmax must be last and see [{classes}], got {cur:?} at layer {i}"
                        )));
                    }
                    cur
                }
            };
            shapes.push(cur.clone());
        }
        if layers.last() != Some(&Layer::SoftmaxOutput) {
            return Err(Error::InvalidShape("model must end in a softmax output".into()));
        }
        Ok(Self {
            id: id.into(),
            layers,
            input_shape,
            classes,
            shapes,
        })
    }

    /// flatten → dense(d, 64) → relu → dense(64, 32) → relu → dense(32, classes).
    pub fn mlp(input_dim: usize, classes: usize) -> Self {
        Self::new(
            "mlp",
            vec![
                Layer::Flatten,
                dense("fc1", input_dim, 64),
                Layer::Relu,
                dense("fc2", 64, 32),
                Layer::Relu,
                dense("fc3", 32, classes),
                Layer::SoftmaxOutput,
            ],
            vec![input_dim],
            classes,
        )
        .expect("valid preset")
    }

    /// conv(1 → 8, 3x3) → relu → flatten → dense → classes, over a single
    /// channel `height x width` image.
    pub fn conv(height: usize, width: usize, classes: usize) -> Result<Self> {
        let flat = 8 * (height.saturating_sub(2)) * (width.saturating_sub(2));
        Self::new(
            "conv",
            vec![
                Layer::Conv2d {
                    name: "conv1".into(),
                    in_channels: 1,
                    out_channels: 8,
                    kernel_h: 3,
                    kernel_w: 3,
                },
                Layer::Relu,
                Layer::Flatten,
                dense("fc1", flat, classes),
                Layer::SoftmaxOutput,
            ],
            vec![1, height, width],
            classes,
        )
    }

    /// Multinomial logistic regression.
    pub fn linear(input_dim: usize, classes: usize) -> Self {
        Self::new(
            "linear",
            vec![dense("fc1", input_dim, classes), Layer::SoftmaxOutput],
            vec![input_dim],
            classes,
        )
        .expect("valid preset")
    }

    /// Preset by id for a flat feature vector of length `input_dim`. The
    /// conv preset views it as a `4 x (input_dim / 4)` image.
    pub fn by_id(id: &str, input_dim: usize, classes: usize) -> Result<Self> {
        match id {
            "mlp" => Ok(Self::mlp(input_dim, classes)),
            "linear" => Ok(Self::linear(input_dim, classes)),
            "conv" if input_dim.is_multiple_of(4) => Self::conv(4, input_dim / 4, classes),
            "conv" => Err(Error::Config(format!(
                "conv model needs a feature dimension divisible by 4, got {input_dim}"
            ))),
            other => Err(Error::Config(format!("unknown model {other:?}"))),
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Trainable parameter names and shapes, in map order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Dense { name, inputs, outputs } => {
                    out.push((format!("{name}.weight"), vec![*outputs, *inputs]));
                    out.push((format!("{name}.bias"), vec![*outputs]));
                }
                Layer::Conv2d {
                    name,
                    in_channels,
                    out_channels,
                    kernel_h,
                    kernel_w,
                } => {
                    out.push((
                        format!("{name}.weight"),
                        vec![*out_channels, *in_channels, *kernel_h, *kernel_w],
                    ));
                    out.push((format!("{name}.bias"), vec![*out_channels]));
                }
                _ => {}
            }
        }
        out.sort();
        out
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init_params(&self, rng: &mut impl Rng) -> NamedTensorMap {
        let mut map = NamedTensorMap::new();
        for layer in &self.layers {
            let (name, shape, fan_in, fan_out) = match layer {
                Layer::Dense { name, inputs, outputs } => (name, vec![*outputs, *inputs], *inputs, *outputs),
                Layer::Conv2d {
                    name,
                    in_channels,
                    out_channels,
                    kernel_h,
                    kernel_w,
                } => {
                    let k = kernel_h * kernel_w;
                    (
                        name,
                        vec![*out_channels, *in_channels, *kernel_h, *kernel_w],
                        in_channels * k,
                        out_channels * k,
                    )
                }
                _ => continue,
            };
            let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let n: usize = shape.iter().product();
            let bias_len = shape[0];
            let w = (0..n).map(|_| rng.random_range(-s..s)).collect();
            map.insert(format!("{name}.weight"), Tensor::new(shape, w).expect("sized"));
            map.insert(format!("{name}.bias"), Tensor::zeros(vec![bias_len]));
        }
        map
    }

    pub fn check_params(&self, params: &NamedTensorMap) -> Result<()> {
        let expected = self.param_shapes();
        let ok = expected.len() == params.len()
            && expected
                .iter()
                .zip(params.iter())
                .all(|((en, es), (n, t))| en == n && es.as_slice() == t.shape());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidShape(format!(
                "parameters do not match model {:?}",
                self.id
            )))
        }
    }
}

/// Mini-batch of flattened samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Activations recorded by [`forward`] for [`backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    batch: usize,
    spec_id: String,
    params_fingerprint: u64,
    /// Input to each layer, batch-major.
    layer_inputs: Vec<Vec<f64>>,
    logits: Vec<f64>,
    probs: Vec<f64>,
}

impl ForwardCache {
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }
}

fn param<'a>(params: &'a NamedTensorMap, name: &str, suffix: &str) -> &'a [f64] {
    params
        .get(&format!("{name}.{suffix}"))
        .expect("checked by check_params")
        .data()
}

fn dense_forward(x: &[f64], w: &[f64], b: &[f64], batch: usize, inputs: usize, outputs: usize) -> Vec<f64> {
    let mut y = vec![0.0; batch * outputs];
    for s in 0..batch {
        let xs = &x[s * inputs..(s + 1) * inputs];
        for o in 0..outputs {
            let wo = &w[o * inputs..(o + 1) * inputs];
            y[s * outputs + o] = b[o] + wo.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    y
}

struct ConvDims {
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

fn conv_forward(x: &[f64], k: &[f64], b: &[f64], batch: usize, d: &ConvDims) -> Vec<f64> {
    let in_len = d.c * d.h * d.w;
    let out_len = d.o * d.oh * d.ow;
    let mut y = vec![0.0; batch * out_len];
    for s in 0..batch {
        let xs = &x[s * in_len..];
        let ys = &mut y[s * out_len..(s + 1) * out_len];
        for o in 0..d.o {
            for p in 0..d.oh {
                for q in 0..d.ow {
                    let mut acc = b[o];
                    for c in 0..d.c {
                        for u in 0..d.kh {
                            for v in 0..d.kw {
                                acc += k[((o * d.c + c) * d.kh + u) * d.kw + v]
                                    * xs[(c * d.h + p + u) * d.w + q + v];
                            }
                        }
                    }
                    ys[(o * d.oh + p) * d.ow + q] = acc;
                }
            }
        }
    }
    y
}

fn conv_dims(shape_in: &[usize], shape_out: &[usize], kh: usize, kw: usize) -> ConvDims {
    ConvDims {
        c: shape_in[0],
        h: shape_in[1],
        w: shape_in[2],
        o: shape_out[0],
        kh,
        kw,
        oh: shape_out[1],
        ow: shape_out[2],
    }
}

/// Runs the network, returning the cache whose `probs()` holds one
/// probability row per sample.
pub fn forward(params: &NamedTensorMap, spec: &ModelSpec, batch: &Batch) -> Result<ForwardCache> {
    spec.check_params(params)?;
    let n = batch.len();
    if n == 0 || batch.inputs.len() != n * spec.input_len() {
        return Err(Error::InvalidShape(format!(
            "batch of {n} labels with {} inputs for input shape {:?}",
            batch.inputs.len(),
            spec.input_shape
        )));
    }
    if let Some(&y) = batch.labels.iter().find(|&&y| y >= spec.classes) {
        return Err(Error::InvalidShape(format!("label {y} out of range")));
    }

    let mut layer_inputs = Vec::with_capacity(spec.layers.len());
    let mut act = batch.inputs.clone();
    let mut logits = Vec::new();
    for (i, layer) in spec.layers.iter().enumerate() {
        let next = match layer {
            Layer::Dense { name, inputs, outputs } => dense_forward(
                &act,
                param(params, name, "weight"),
                param(params, name, "bias"),
                n,
                *inputs,
                *outputs,
            ),
            Layer::Conv2d {
                name, kernel_h, kernel_w, ..
            } => {
                let d = conv_dims(&spec.shapes[i], &spec.shapes[i + 1], *kernel_h, *kernel_w);
                conv_forward(&act, param(params, name, "weight"), param(params, name, "bias"), n, &d)
            }
            Layer::Relu => act.iter().map(|&v| v.max(0.0)).collect(),
            Layer::Flatten => act.clone(),
            Layer::SoftmaxOutput => {
                logits = act.clone();
                softmax_rows(&act, spec.classes)
            }
        };
        layer_inputs.push(std::mem::replace(&mut act, next));
    }

    Ok(ForwardCache {
        batch: n,
        spec_id: spec.id.clone(),
        params_fingerprint: params.fingerprint(),
        layer_inputs,
        logits,
        probs: act,
    })
}

/// Gradients of the loss with respect to every trainable parameter, given
/// the gradient with respect to the output logits (`batch x classes`).
pub fn backward(
    params: &NamedTensorMap,
    spec: &ModelSpec,
    cache: &ForwardCache,
    dlogits: &[f64],
) -> Result<NamedTensorMap> {
    if cache.spec_id != spec.id || cache.layer_inputs.len() != spec.layers.len() {
        return Err(Error::InvalidState("cache was produced by a different model".into()));
    }
    if cache.params_fingerprint != params.fingerprint() {
        return Err(Error::InvalidState(
            "parameters changed since the forward pass".into(),
        ));
    }
    let n = cache.batch;
    if dlogits.len() != n * spec.classes {
        return Err(Error::InvalidState(format!(
            "upstream gradient has {} values, expected {}",
            dlogits.len(),
            n * spec.classes
        )));
    }

    let mut grads = params.zeros_like();
    let mut delta = dlogits.to_vec();
    for (i, layer) in spec.layers.iter().enumerate().rev() {
        let x = &cache.layer_inputs[i];
        match layer {
            // Softmax is folded into the loss gradients.
            Layer::SoftmaxOutput | Layer::Flatten => {}
            Layer::Relu => {
                for (d, &v) in delta.iter_mut().zip(x) {
                    if v <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            Layer::Dense { name, inputs, outputs } => {
                let (inputs, outputs) = (*inputs, *outputs);
                let w = param(params, name, "weight");
                {
                    let gw = grads.get_mut(&format!("{name}.weight")).expect("present").data_mut();
                    for s in 0..n {
                        let xs = &x[s * inputs..(s + 1) * inputs];
                        for o in 0..outputs {
                            let d = delta[s * outputs + o];
                            if d != 0.0 {
                                for (g, &xv) in gw[o * inputs..(o + 1) * inputs].iter_mut().zip(xs) {
                                    *g += d * xv;
                                }
                            }
                        }
                    }
                }
                {
                    let gb = grads.get_mut(&format!("{name}.bias")).expect("present").data_mut();
                    for s in 0..n {
                        for o in 0..outputs {
                            gb[o] += delta[s * outputs + o];
                        }
                    }
                }
                if i > 0 {
                    let mut dx = vec![0.0; n * inputs];
                    for s in 0..n {
                        for o in 0..outputs {
                            let d = delta[s * outputs + o];
                            if d != 0.0 {
                                for (g, &wv) in dx[s * inputs..(s + 1) * inputs]
                                    .iter_mut()
                                    .zip(&w[o * inputs..(o + 1) * inputs])
                                {
                                    *g += d * wv;
                                }
                            }
                        }
                    }
                    delta = dx;
                }
            }
            Layer::Conv2d {
                name, kernel_h, kernel_w, ..
            } => {
                let d = conv_dims(&spec.shapes[i], &spec.shapes[i + 1], *kernel_h, *kernel_w);
                let k = param(params, name, "weight");
                let in_len = d.c * d.h * d.w;
                let out_len = d.o * d.oh * d.ow;
                let mut gk = vec![0.0; k.len()];
                let mut gb = vec![0.0; d.o];
                let mut dx = vec![0.0; n * in_len];
                for s in 0..n {
                    let xs = &x[s * in_len..(s + 1) * in_len];
                    let ds = &delta[s * out_len..(s + 1) * out_len];
                    let dxs = &mut dx[s * in_len..(s + 1) * in_len];
                    for o in 0..d.o {
                        for p in 0..d.oh {
                            for q in 0..d.ow {
                                let g = ds[(o * d.oh + p) * d.ow + q];
                                if g == 0.0 {
                                    continue;
                                }
                                gb[o] += g;
                                for c in 0..d.c {
                                    for u in 0..d.kh {
                                        for v in 0..d.kw {
                                            let ki = ((o * d.c + c) * d.kh + u) * d.kw + v;
                                            let xi = (c * d.h + p + u) * d.w + q + v;
                                            gk[ki] += g * xs[xi];
                                            dxs[xi] += g * k[ki];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                grads
                    .get_mut(&format!("{name}.weight"))
                    .expect("present")
                    .data_mut()
                    .copy_from_slice(&gk);
                grads
                    .get_mut(&format!("{name}.bias"))
                    .expect("present")
                    .data_mut()
                    .copy_from_slice(&gb);
                delta = dx;
            }
        }
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_batch(spec: &ModelSpec, n: usize, rng: &mut ChaCha8Rng) -> Batch {
        Batch {
            inputs: (0..n * spec.input_len()).map(|_| rng.random_range(-2.0..2.0)).collect(),
            labels: (0..n).map(|_| rng.random_range(0..spec.classes())).collect(),
        }
    }

    #[test]
    fn zero_weights_give_uniform_probabilities() {
        let spec = ModelSpec::mlp(5, 3);
        let params = spec.init_params(&mut ChaCha8Rng::seed_from_u64(0)).zeros_like();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cache = forward(&params, &spec, &random_batch(&spec, 4, &mut rng)).unwrap();
        for p in cache.probs() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn saturated_logits() {
        let spec = ModelSpec::linear(3, 3);
        let mut params = spec.init_params(&mut ChaCha8Rng::seed_from_u64(0));
        let w = params.get_mut("fc1.weight").unwrap().data_mut();
        w.fill(0.0);
        for i in 0..3 {
            w[i * 3 + i] = 100.0;
        }
        let batch = Batch {
            inputs: vec![1.0, 0.0, 0.0],
            labels: vec![0],
        };
        let probs = forward(&params, &spec, &batch).unwrap().probs().to_vec();
        assert!(probs[0] > 1.0 - 1e-12 && probs[1] < 1e-12 && probs[2] < 1e-12);
    }

    #[test]
    fn rows_are_distributions_and_deterministic() {
        for (seed, spec) in [(3, ModelSpec::mlp(8, 3)), (4, ModelSpec::conv(4, 5, 3).unwrap())] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = spec.init_params(&mut rng);
            for _ in 0..100 {
                let batch = random_batch(&spec, 5, &mut rng);
                let a = forward(&params, &spec, &batch).unwrap();
                for row in a.probs().chunks(3) {
                    assert!(row.iter().all(|&p| p >= 0.0));
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
                let b = forward(&params, &spec, &batch).unwrap();
                assert!(a.probs().iter().zip(b.probs()).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }

    #[test]
    fn backward_closure_and_zero_upstream() {
        let spec = ModelSpec::conv(4, 6, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = spec.init_params(&mut rng);
        let batch = random_batch(&spec, 3, &mut rng);
        let cache = forward(&params, &spec, &batch).unwrap();
        let grads = backward(&params, &spec, &cache, &[0.0; 9]).unwrap();
        assert!(grads.same_structure(&params));
        assert!(grads.flat_values().all(|g| g == 0.0));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let spec = ModelSpec::mlp(4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = spec.init_params(&mut rng);
        let batch = random_batch(&spec, 2, &mut rng);
        let cache = forward(&params, &spec, &batch).unwrap();
        assert!(matches!(backward(&params, &spec, &cache, &[0.0; 5]), Err(Error::InvalidState(_))));
        params.get_mut("fc1.bias").unwrap().data_mut()[0] += 1.0;
        assert!(matches!(backward(&params, &spec, &cache, &[0.0; 6]), Err(Error::InvalidState(_))));
        let other = ModelSpec::linear(4, 3);
        let p2 = other.init_params(&mut rng);
        assert!(backward(&p2, &other, &cache, &[0.0; 6]).is_err());
    }

    #[test]
    fn shape_errors() {
        let spec = ModelSpec::mlp(4, 3);
        let params = spec.init_params(&mut ChaCha8Rng::seed_from_u64(0));
        let bad = Batch {
            inputs: vec![0.0; 7],
            labels: vec![0, 1],
        };
        assert!(matches!(forward(&params, &spec, &bad), Err(Error::InvalidShape(_))));
        let wrong = ModelSpec::mlp(5, 3).init_params(&mut ChaCha8Rng::seed_from_u64(0));
        let ok = Batch {
            inputs: vec![0.0; 4],
            labels: vec![0],
        };
        assert!(matches!(forward(&wrong, &spec, &ok), Err(Error::InvalidShape(_))));
        assert!(ModelSpec::new("x", vec![dense("a", 3, 2)], vec![4], 2).is_err());
        assert!(ModelSpec::by_id("conv", 30, 3).is_err());
        assert!(ModelSpec::by_id("vgg", 32, 3).is_err());
    }

    #[test]
    fn param_shapes_match_init() {
        let spec = ModelSpec::conv(4, 8, 3).unwrap();
        let params = spec.init_params(&mut ChaCha8Rng::seed_from_u64(0));
        spec.check_params(&params).unwrap();
        assert_eq!(params.get("conv1.weight").unwrap().shape(), &[8, 1, 3, 3]);
        assert_eq!(params.get("fc1.weight").unwrap().shape(), &[3, 8 * 2 * 6]);
    }
}
