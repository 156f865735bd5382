use crate::error::{Error, Result};

/// Low-frequency indicator over a `rows x cols` spectrum.
///
/// A frequency is shared when its signed row frequency satisfies
/// `|m| <= floor(r * rows)` and its column frequency `|n| <= floor(r * cols)`
/// (inclusive bounds). The mask is kept in two layouts: centered
/// (fftshift order, DC at `(rows / 2, cols / 2)`) and standard DFT order
/// (DC at `(0, 0)`).
#[derive(Clone, Debug, PartialEq)]
pub struct FreqMask {
    rows: usize,
    cols: usize,
    r: f64,
    half_rows: usize,
    half_cols: usize,
    centered: Vec<bool>,
    standard: Vec<bool>,
}

/// Magnitude of the signed frequency held at DFT index `k` of a length-`len` axis.
fn signed_magnitude(k: usize, len: usize) -> usize {
    k.min(len - k)
}

impl FreqMask {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn half_widths(&self) -> (usize, usize) {
        (self.half_rows, self.half_cols)
    }

    /// Indicator in standard DFT order.
    pub fn contains(&self, m: usize, n: usize) -> bool {
        self.standard[m * self.cols + n]
    }

    pub fn standard(&self) -> &[bool] {
        &self.standard
    }

    /// Indicator in centered order.
    pub fn centered(&self) -> &[bool] {
        &self.centered
    }

    /// Indicator at signed frequency `(fm, fn)`, taken modulo the spectrum size.
    pub fn contains_signed(&self, fm: i64, fnn: i64) -> bool {
        let m = fm.rem_euclid(self.rows as i64) as usize;
        let n = fnn.rem_euclid(self.cols as i64) as usize;
        self.contains(m, n)
    }

    pub fn count(&self) -> usize {
        self.standard.iter().filter(|&&b| b).count()
    }
}

pub fn low_freq_mask(rows: usize, cols: usize, r: f64) -> Result<FreqMask> {
    if !(r > 0.0 && r < 0.5) {
        return Err(Error::InvalidThreshold(r));
    }
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidShape(format!("mask over {rows}x{cols}")));
    }
    let half_rows = (r * rows as f64).floor() as usize;
    let half_cols = (r * cols as f64).floor() as usize;

    let mut standard = vec![false; rows * cols];
    for m in 0..rows {
        let row_in = signed_magnitude(m, rows) <= half_rows;
        for n in 0..cols {
            standard[m * cols + n] = row_in && signed_magnitude(n, cols) <= half_cols;
        }
    }

    // fftshift: centered index i holds standard index (i + len - len / 2) % len.
    let mut centered = vec![false; rows * cols];
    for i in 0..rows {
        let m = (i + rows - rows / 2) % rows;
        for j in 0..cols {
            let n = (j + cols - cols / 2) % cols;
            centered[i * cols + j] = standard[m * cols + n];
        }
    }

    Ok(FreqMask {
        rows,
        cols,
        r,
        half_rows,
        half_cols,
        centered,
        standard,
    })
}
