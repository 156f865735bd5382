//! Server-side aggregation.
//!
//! Progressive Fourier aggregation (PFA) fuses clients in the frequency
//! domain: each 2-D weight matrix (convolution kernels after
//! [`reshape_conv`], dense weights as-is) is transformed, the amplitudes
//! inside the low-frequency [`FreqMask`] are replaced by their mean over
//! clients, and each client keeps its own phase and out-of-band amplitudes.
//! Every client therefore receives its own aggregate. Vectors (biases) are
//! averaged element-wise. FedAvg is the plain element-wise mean.

mod mask;
mod schedule;

pub use mask::{low_freq_mask, FreqMask};
pub use schedule::{schedule_r, ScheduleParams};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{amp_phase, dft2, idft2, recompose, AmpPhase, RealMatrix};
use crate::parallel::Exec;
use crate::tensor::{NamedTensorMap, Tensor};

/// Layout of a convolution kernel tensor `(out, in, kh, kw)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvShape {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
}

impl ConvShape {
    pub fn new(out_channels: usize, in_channels: usize, kernel_h: usize, kernel_w: usize) -> Result<Self> {
        let s = Self {
            out_channels,
            in_channels,
            kernel_h,
            kernel_w,
        };
        if [out_channels, in_channels, kernel_h, kernel_w].contains(&0) {
            return Err(Error::InvalidShape(format!("conv shape {s:?} has a zero extent")));
        }
        Ok(s)
    }

    pub fn from_dims(dims: &[usize]) -> Result<Self> {
        match *dims {
            [n, c, h, w] => Self::new(n, c, h, w),
            _ => Err(Error::InvalidShape(format!("{dims:?} is not a 4-D kernel shape"))),
        }
    }

    pub fn len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(rows, cols)` of the reshaped matrix: `(kh * out, kw * in)`.
    pub fn matrix_dims(&self) -> (usize, usize) {
        (
            self.kernel_h * self.out_channels,
            self.kernel_w * self.in_channels,
        )
    }
}

/// Lays a kernel out as a `(kh * out) x (kw * in)` matrix, mapping
/// `(n, c, x, y)` to row `n * kh + x`, column `c * kw + y`.
pub fn reshape_conv(w: &[f64], s: ConvShape) -> Result<RealMatrix> {
    if w.len() != s.len() {
        return Err(Error::InvalidShape(format!(
            "kernel {s:?} needs {} values, got {}",
            s.len(),
            w.len()
        )));
    }
    let (rows, cols) = s.matrix_dims();
    let mut out = vec![0.0; rows * cols];
    let mut src = 0;
    for n in 0..s.out_channels {
        for c in 0..s.in_channels {
            for x in 0..s.kernel_h {
                let row = n * s.kernel_h + x;
                for y in 0..s.kernel_w {
                    out[row * cols + c * s.kernel_w + y] = w[src];
                    src += 1;
                }
            }
        }
    }
    RealMatrix::new(rows, cols, out)
}

/// Inverse of [`reshape_conv`]; returns the kernel in `(out, in, kh, kw)` order.
pub fn unreshape_conv(m: &RealMatrix, s: ConvShape) -> Result<Vec<f64>> {
    if (m.rows(), m.cols()) != s.matrix_dims() {
        return Err(Error::InvalidShape(format!(
            "{}x{} matrix does not match kernel {s:?}",
            m.rows(),
            m.cols()
        )));
    }
    let cols = m.cols();
    let data = m.data();
    let mut out = Vec::with_capacity(s.len());
    for n in 0..s.out_channels {
        for c in 0..s.in_channels {
            for x in 0..s.kernel_h {
                let row = n * s.kernel_h + x;
                for y in 0..s.kernel_w {
                    out.push(data[row * cols + c * s.kernel_w + y]);
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AggregationStrategy {
    Pfa,
    FedAvg,
}

impl std::str::FromStr for AggregationStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "PFA" => Ok(Self::Pfa),
            "FEDAVG" => Ok(Self::FedAvg),
            other => Err(Error::Config(format!("unknown aggregation strategy {other:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AggregationRequest {
    pub client_params: Vec<NamedTensorMap>,
    pub r: f64,
    pub strategy: AggregationStrategy,
}

#[derive(Clone, Debug, PartialEq)]
pub enum AggregationOutput {
    /// One aggregate per client, in request order.
    Personalized(Vec<NamedTensorMap>),
    Global(NamedTensorMap),
}

impl AggregationOutput {
    /// The model delivered to client `k`.
    pub fn for_client(&self, k: usize) -> &NamedTensorMap {
        match self {
            AggregationOutput::Personalized(v) => &v[k],
            AggregationOutput::Global(m) => m,
        }
    }
}

pub fn aggregate(req: &AggregationRequest, exec: Exec) -> Result<AggregationOutput> {
    match req.strategy {
        AggregationStrategy::Pfa => pfa_aggregate(&req.client_params, req.r, exec).map(AggregationOutput::Personalized),
        AggregationStrategy::FedAvg => fedavg_aggregate(&req.client_params, exec).map(AggregationOutput::Global),
    }
}

fn validate_clients(clients: &[NamedTensorMap]) -> Result<()> {
    let first = clients
        .first()
        .ok_or_else(|| Error::InvalidRequest("no client models to aggregate".into()))?;
    for (k, c) in clients.iter().enumerate().skip(1) {
        if !first.same_structure(c) {
            return Err(Error::InvalidRequest(format!(
                "client {k} differs from client 0 in parameter names or shapes"
            )));
        }
    }
    Ok(())
}

fn mean_over_clients(clients: &[&Tensor]) -> Vec<f64> {
    let k = clients.len() as f64;
    let len = clients[0].len();
    (0..len)
        .map(|i| clients.iter().map(|t| t.data()[i]).sum::<f64>() / k)
        .collect()
}

/// Element-wise unweighted mean of all client parameters.
pub fn fedavg_aggregate(clients: &[NamedTensorMap], exec: Exec) -> Result<NamedTensorMap> {
    validate_clients(clients)?;
    let names: Vec<&String> = clients[0].names().collect();
    let tensors = exec.map(&names, |_, name| {
        let group: Vec<&Tensor> = clients.iter().map(|c| c.get(name).expect("validated")).collect();
        let t = Tensor::new(group[0].shape().to_vec(), mean_over_clients(&group)).expect("same shape");
        ((*name).clone(), t)
    });
    Ok(tensors.into_iter().collect())
}

/// How a parameter enters PFA.
enum Layout {
    Matrix(usize, usize),
    Conv(ConvShape),
    Elementwise,
}

fn layout_of(shape: &[usize]) -> Result<Layout> {
    Ok(match shape.len() {
        2 => Layout::Matrix(shape[0], shape[1]),
        4 => Layout::Conv(ConvShape::from_dims(shape)?),
        _ => Layout::Elementwise,
    })
}

fn as_matrix(t: &Tensor, layout: &Layout) -> Result<RealMatrix> {
    match *layout {
        Layout::Matrix(r, c) => RealMatrix::new(r, c, t.data().to_vec()),
        Layout::Conv(s) => reshape_conv(t.data(), s),
        Layout::Elementwise => unreachable!(),
    }
}

fn from_matrix(m: &RealMatrix, layout: &Layout) -> Result<Vec<f64>> {
    match *layout {
        Layout::Matrix(..) => Ok(m.data().to_vec()),
        Layout::Conv(s) => unreshape_conv(m, s),
        Layout::Elementwise => unreachable!(),
    }
}

/// Fuses one set of same-shaped matrices: masked amplitudes become the
/// client mean, everything else stays per client.
pub fn pfa_fuse_matrices(mats: &[RealMatrix], r: f64) -> Result<Vec<RealMatrix>> {
    let (rows, cols) = (mats[0].rows(), mats[0].cols());
    let mask = low_freq_mask(rows, cols, r)?;
    let spectra: Vec<AmpPhase> = mats
        .iter()
        .map(|m| dft2(m).map(|f| amp_phase(&f)))
        .collect::<Result<_>>()?;

    let k = spectra.len() as f64;
    let mean_amp: Vec<f64> = (0..rows * cols)
        .map(|i| {
            if mask.standard()[i] {
                spectra.iter().map(|s| s.amplitude.data()[i]).sum::<f64>() / k
            } else {
                0.0
            }
        })
        .collect();

    spectra
        .into_iter()
        .map(|s| {
            let amp: Vec<f64> = s
                .amplitude
                .data()
                .iter()
                .zip(mask.standard())
                .zip(&mean_amp)
                .map(|((&own, &shared), &mean)| if shared { mean } else { own })
                .collect();
            let fused = AmpPhase {
                amplitude: RealMatrix::new(rows, cols, amp)?,
                phase: s.phase,
            };
            Ok(idft2(&recompose(&fused))?.matrix)
        })
        .collect()
}

/// Progressive Fourier aggregation at threshold `r`; returns one aggregate
/// per client in input order.
pub fn pfa_aggregate(clients: &[NamedTensorMap], r: f64, exec: Exec) -> Result<Vec<NamedTensorMap>> {
    validate_clients(clients)?;
    if !(r > 0.0 && r < 0.5) {
        return Err(Error::InvalidThreshold(r));
    }
    let names: Vec<&String> = clients[0].names().collect();
    let per_param: Vec<Result<Vec<Tensor>>> = exec.map(&names, |_, name| {
        let group: Vec<&Tensor> = clients.iter().map(|c| c.get(name).expect("validated")).collect();
        let shape = group[0].shape().to_vec();
        let layout = layout_of(&shape)?;
        if let Layout::Elementwise = layout {
            let mean = Tensor::new(shape, mean_over_clients(&group))?;
            return Ok(vec![mean; group.len()]);
        }
        let mats = group
            .iter()
            .map(|t| as_matrix(t, &layout))
            .collect::<Result<Vec<_>>>()?;
        pfa_fuse_matrices(&mats, r)?
            .iter()
            .map(|m| Tensor::new(shape.clone(), from_matrix(m, &layout)?))
            .collect()
    });

    let mut out = vec![NamedTensorMap::new(); clients.len()];
    for (name, tensors) in names.into_iter().zip(per_param) {
        for (map, t) in out.iter_mut().zip(tensors?) {
            map.insert(name.clone(), t);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map_with(values: &[(&str, Vec<usize>, Vec<f64>)]) -> NamedTensorMap {
        values
            .iter()
            .map(|(n, s, d)| (n.to_string(), Tensor::new(s.clone(), d.clone()).unwrap()))
            .collect()
    }

    #[test]
    fn reshape_examples() {
        let kernel = vec![1.0, 2.0, 3.0, 4.0];
        let s = ConvShape::new(1, 1, 2, 2).unwrap();
        assert_eq!(reshape_conv(&kernel, s).unwrap().data(), &kernel[..]);

        let s = ConvShape::new(2, 3, 3, 3).unwrap();
        let m = reshape_conv(&vec![0.0; s.len()], s).unwrap();
        assert_eq!((m.rows(), m.cols()), (6, 9));

        let s = ConvShape::new(2, 2, 2, 2).unwrap();
        let flat = |n: usize, c: usize, x: usize, y: usize| ((n * 2 + c) * 2 + x) * 2 + y;
        let w: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let m = reshape_conv(&w, s).unwrap();
        assert_eq!(m.get(3, 0), w[flat(1, 0, 1, 0)]);
    }

    #[test]
    fn reshape_is_a_bijection_by_exhaustion() {
        let s = ConvShape::new(2, 2, 2, 2).unwrap();
        let mut seen = [false; 16];
        for n in 0..2 {
            for c in 0..2 {
                for x in 0..2 {
                    for y in 0..2 {
                        let mut w = vec![0.0; 16];
                        w[((n * 2 + c) * 2 + x) * 2 + y] = 1.0;
                        let m = reshape_conv(&w, s).unwrap();
                        let hot: Vec<usize> = (0..16).filter(|&i| m.data()[i] == 1.0).collect();
                        assert_eq!(hot, vec![(n * 2 + x) * 4 + c * 2 + y]);
                        assert!(!seen[hot[0]]);
                        seen[hot[0]] = true;
                    }
                }
            }
        }
        assert!(seen.iter().all(|&b| b));
    }

    #[test]
    fn reshape_rejects_mismatch() {
        let s = ConvShape::new(2, 1, 3, 3).unwrap();
        assert!(matches!(reshape_conv(&[0.0; 17], s), Err(Error::InvalidShape(_))));
        let m = RealMatrix::zeros(3, 6);
        assert!(matches!(unreshape_conv(&m, s), Err(Error::InvalidShape(_))));
        assert!(ConvShape::new(0, 1, 1, 1).is_err());
    }

    #[test]
    fn fedavg_two_clients() {
        let a = map_with(&[("b", vec![2], vec![1.0, 3.0]), ("w", vec![1, 2], vec![0.0, -2.0])]);
        let b = map_with(&[("b", vec![2], vec![3.0, 5.0]), ("w", vec![1, 2], vec![4.0, 2.0])]);
        let g = fedavg_aggregate(&[a.clone(), b], Exec::Sequential).unwrap();
        assert_eq!(g.get("b").unwrap().data(), &[2.0, 4.0]);
        assert_eq!(g.get("w").unwrap().data(), &[2.0, 0.0]);
        assert_eq!(fedavg_aggregate(&[a.clone(), a.clone()], Exec::Sequential).unwrap(), a);
    }

    #[test]
    fn structural_mismatch_is_rejected() {
        let a = map_with(&[("w", vec![2, 2], vec![0.0; 4])]);
        let b = map_with(&[("w", vec![4], vec![0.0; 4])]);
        let c = map_with(&[("v", vec![2, 2], vec![0.0; 4])]);
        for other in [b, c] {
            let pair = [a.clone(), other];
            assert!(matches!(fedavg_aggregate(&pair, Exec::Sequential), Err(Error::InvalidRequest(_))));
            assert!(matches!(pfa_aggregate(&pair, 0.3, Exec::Sequential), Err(Error::InvalidRequest(_))));
        }
        assert!(matches!(fedavg_aggregate(&[], Exec::Sequential), Err(Error::InvalidRequest(_))));
        assert!(matches!(pfa_aggregate(&[a], 0.5, Exec::Sequential), Err(Error::InvalidThreshold(_))));
    }

    #[test]
    fn pfa_single_client_is_identity() {
        let w: Vec<f64> = (0..24).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let a = map_with(&[
            ("conv.weight", vec![2, 1, 3, 4], w.clone()),
            ("conv.bias", vec![2], vec![0.5, -0.5]),
            ("fc.weight", vec![4, 6], w),
        ]);
        let out = pfa_aggregate(std::slice::from_ref(&a), 0.3, Exec::Sequential).unwrap();
        assert!(out[0].max_abs_diff(&a) < 1e-8);
    }

    #[test]
    fn pfa_biases_are_averaged() {
        let a = map_with(&[("b", vec![3], vec![1.0, 2.0, 3.0])]);
        let b = map_with(&[("b", vec![3], vec![3.0, 2.0, 1.0])]);
        let out = pfa_aggregate(&[a, b], 0.2, Exec::Sequential).unwrap();
        for m in &out {
            assert_eq!(m.get("b").unwrap().data(), &[2.0, 2.0, 2.0]);
        }
    }
}
