//! Dense real and complex matrices, the 2-D discrete Fourier transform and
//! the amplitude/phase split used by frequency-domain aggregation.
//!
//! Conventions: the forward transform is unnormalized with a negative
//! exponent, the inverse divides by `rows * cols`. The transform is computed
//! separably (rows, then columns) by direct summation against a twiddle table
//! indexed by `(k * n) mod len`, which keeps the twiddles exact up to the
//! accuracy of one `sin_cos` call.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Imaginary residue tolerated by [`idft2`], relative to the largest spectral
/// amplitude.
pub const RESIDUE_TOLERANCE: f64 = 1e-6;

/// Row-major real matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct RealMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl RealMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidShape(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::InvalidShape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite entry {} at flat index {i}",
                data[i]
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn max_abs_diff(&self, other: &RealMatrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Row-major complex matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Complex64>,
}

impl ComplexMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<Complex64>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(Error::InvalidShape(format!(
                "{rows}x{cols} complex matrix with {} values",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> Complex64 {
        self.data[r * self.cols + c]
    }

    pub fn max_amplitude(&self) -> f64 {
        self.data.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }
}

/// Polar form of a spectrum: `amplitude * exp(j * phase)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AmpPhase {
    pub amplitude: RealMatrix,
    pub phase: RealMatrix,
}

fn twiddles(len: usize, sign: f64) -> Vec<Complex64> {
    (0..len)
        .map(|k| {
            // Quarter turns are exact.
            if (4 * k) % len == 0 {
                return match 4 * k / len {
                    0 => Complex64::new(1.0, 0.0),
                    1 => Complex64::new(0.0, sign),
                    2 => Complex64::new(-1.0, 0.0),
                    _ => Complex64::new(0.0, -sign),
                };
            }
            let (s, c) = (sign * 2.0 * PI * k as f64 / len as f64).sin_cos();
            Complex64::new(c, s)
        })
        .collect()
}

/// In-place 1-D DFT of every row of a row-major buffer.
fn transform_rows(buf: &mut [Complex64], rows: usize, cols: usize, tw: &[Complex64]) {
    let mut scratch = vec![Complex64::new(0.0, 0.0); cols];
    for row in buf.chunks_mut(cols).take(rows) {
        for (k, out) in scratch.iter_mut().enumerate() {
            let mut acc = Complex64::new(0.0, 0.0);
            for (n, v) in row.iter().enumerate() {
                acc += v * tw[(k * n) % cols];
            }
            *out = acc;
        }
        row.copy_from_slice(&scratch);
    }
}

fn transform_cols(buf: &mut [Complex64], rows: usize, cols: usize, tw: &[Complex64]) {
    let mut column = vec![Complex64::new(0.0, 0.0); rows];
    let mut scratch = vec![Complex64::new(0.0, 0.0); rows];
    for c in 0..cols {
        for (r, v) in column.iter_mut().enumerate() {
            *v = buf[r * cols + c];
        }
        for (k, out) in scratch.iter_mut().enumerate() {
            let mut acc = Complex64::new(0.0, 0.0);
            for (n, v) in column.iter().enumerate() {
                acc += v * tw[(k * n) % rows];
            }
            *out = acc;
        }
        for (r, v) in scratch.iter().enumerate() {
            buf[r * cols + c] = *v;
        }
    }
}

/// Unnormalized forward 2-D DFT,
/// `F(m, n) = sum_{x,y} w(x, y) exp(-j 2 pi (x m / rows + y n / cols))`.
pub fn dft2(m: &RealMatrix) -> Result<ComplexMatrix> {
    if let Some(v) = m.data.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite entry {v}")));
    }
    let (rows, cols) = (m.rows, m.cols);
    let mut buf: Vec<Complex64> = m.data.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    transform_rows(&mut buf, rows, cols, &twiddles(cols, -1.0));
    transform_cols(&mut buf, rows, cols, &twiddles(rows, -1.0));
    Ok(ComplexMatrix {
        rows,
        cols,
        data: buf,
    })
}

/// Inverse of [`dft2`] paired with the largest imaginary component it dropped.
#[derive(Clone, Debug)]
pub struct InverseOutput {
    pub matrix: RealMatrix,
    pub max_imag_residue: f64,
}

/// Inverse 2-D DFT with `1 / (rows * cols)` normalization, returning the real
/// part. Fails with [`Error::SymmetryViolation`] when the dropped imaginary
/// part exceeds [`RESIDUE_TOLERANCE`] times the largest input amplitude.
pub fn idft2(m: &ComplexMatrix) -> Result<InverseOutput> {
    let (rows, cols) = (m.rows, m.cols);
    let mut buf = m.data.clone();
    transform_rows(&mut buf, rows, cols, &twiddles(cols, 1.0));
    transform_cols(&mut buf, rows, cols, &twiddles(rows, 1.0));
    let scale = 1.0 / (rows * cols) as f64;
    let mut residue = 0.0_f64;
    let data: Vec<f64> = buf
        .iter()
        .map(|z| {
            residue = residue.max((z.im * scale).abs());
            z.re * scale
        })
        .collect();
    let limit = RESIDUE_TOLERANCE * m.max_amplitude();
    if residue > limit {
        return Err(Error::SymmetryViolation { residue, limit });
    }
    Ok(InverseOutput {
        matrix: RealMatrix { rows, cols, data },
        max_imag_residue: residue,
    })
}

/// Splits a spectrum into modulus and argument. A zero entry gets phase 0.
pub fn amp_phase(m: &ComplexMatrix) -> AmpPhase {
    let amplitude = m.data.iter().map(|z| z.norm()).collect();
    let phase = m
        .data
        .iter()
        .map(|z| {
            if z.re == 0.0 && z.im == 0.0 {
                0.0
            } else {
                z.im.atan2(z.re)
            }
        })
        .collect();
    AmpPhase {
        amplitude: RealMatrix {
            rows: m.rows,
            cols: m.cols,
            data: amplitude,
        },
        phase: RealMatrix {
            rows: m.rows,
            cols: m.cols,
            data: phase,
        },
    }
}

pub fn recompose(a: &AmpPhase) -> ComplexMatrix {
    let data = a
        .amplitude
        .data
        .iter()
        .zip(&a.phase.data)
        .map(|(&r, &theta)| Complex64::from_polar(r, theta))
        .collect();
    ComplexMatrix {
        rows: a.amplitude.rows,
        cols: a.amplitude.cols,
        data,
    }
}
