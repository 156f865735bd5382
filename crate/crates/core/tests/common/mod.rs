//! Independent reference implementations used as test oracles. Nothing here
//! calls into the crate's numerics, aggregation or metrics code.

#![allow(dead_code)]

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Direct double-sum 2-D DFT, negative exponent, as `(re, im)` pairs.
pub fn naive_dft2(rows: usize, cols: usize, x: &[f64]) -> Vec<(f64, f64)> {
    let mut out = vec![(0.0, 0.0); rows * cols];
    for u in 0..rows {
        for v in 0..cols {
            let (mut re, mut im) = (0.0, 0.0);
            for m in 0..rows {
                for n in 0..cols {
                    let a = -TAU * ((u * m) as f64 / rows as f64 + (v * n) as f64 / cols as f64);
                    re += x[m * cols + n] * a.cos();
                    im += x[m * cols + n] * a.sin();
                }
            }
            out[u * cols + v] = (re, im);
        }
    }
    out
}

/// Direct inverse DFT; returns the real parts and the largest imaginary part.
pub fn naive_idft2(rows: usize, cols: usize, f: &[(f64, f64)]) -> (Vec<f64>, f64) {
    let scale = 1.0 / (rows * cols) as f64;
    let mut out = vec![0.0; rows * cols];
    let mut max_im: f64 = 0.0;
    for m in 0..rows {
        for n in 0..cols {
            let (mut re, mut im) = (0.0, 0.0);
            for u in 0..rows {
                for v in 0..cols {
                    let a = TAU * ((u * m) as f64 / rows as f64 + (v * n) as f64 / cols as f64);
                    let (fr, fi) = f[u * cols + v];
                    re += fr * a.cos() - fi * a.sin();
                    im += fr * a.sin() + fi * a.cos();
                }
            }
            out[m * cols + n] = re * scale;
            max_im = max_im.max((im * scale).abs());
        }
    }
    (out, max_im)
}

/// Inclusive low-frequency test in signed (centered) frequency terms.
pub fn in_band(k: usize, len: usize, r: f64) -> bool {
    let signed = k.min(len - k);
    signed <= (r * len as f64).floor() as usize
}

/// Reference PFA for one parameter matrix across clients.
pub fn oracle_pfa(rows: usize, cols: usize, clients: &[Vec<f64>], r: f64) -> Vec<Vec<f64>> {
    let spectra: Vec<Vec<(f64, f64)>> = clients.iter().map(|c| naive_dft2(rows, cols, c)).collect();
    let amp = |z: (f64, f64)| z.0.hypot(z.1);
    let mut mean_amp = vec![0.0; rows * cols];
    for s in &spectra {
        for (m, z) in mean_amp.iter_mut().zip(s) {
            *m += amp(*z) / clients.len() as f64;
        }
    }
    spectra
        .iter()
        .map(|s| {
            let fused: Vec<(f64, f64)> = s
                .iter()
                .enumerate()
                .map(|(i, &z)| {
                    let (u, v) = (i / cols, i % cols);
                    if in_band(u, rows, r) && in_band(v, cols, r) {
                        let ph = z.1.atan2(z.0);
                        (mean_amp[i] * ph.cos(), mean_amp[i] * ph.sin())
                    } else {
                        z
                    }
                })
                .collect();
            naive_idft2(rows, cols, &fused).0
        })
        .collect()
}

/// Conv kernel `(n, c, x, y)` laid out as a `(n * kh + x, c * kw + y)` matrix.
pub fn oracle_reshape(w: &[f64], shape: [usize; 4]) -> Vec<f64> {
    let [no, ci, kh, kw] = shape;
    let cols = ci * kw;
    let mut m = vec![0.0; w.len()];
    for n in 0..no {
        for c in 0..ci {
            for x in 0..kh {
                for y in 0..kw {
                    m[(n * kh + x) * cols + c * kw + y] = w[((n * ci + c) * kh + x) * kw + y];
                }
            }
        }
    }
    m
}

/// Macro F1 by counting true/false positives and false negatives per class.
pub fn brute_macro_f1(pred: &[usize], labels: &[usize], classes: usize) -> f64 {
    let mut total = 0.0;
    for c in 0..classes {
        let mut tp = 0u64;
        let mut fp = 0u64;
        let mut fne = 0u64;
        for (&p, &l) in pred.iter().zip(labels) {
            match (p == c, l == c) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fne += 1,
                _ => {}
            }
        }
        let denom = 2 * tp + fp + fne;
        if denom > 0 {
            total += 2.0 * tp as f64 / denom as f64;
        }
    }
    total / classes as f64
}

/// One-vs-rest AUC by comparing every positive/negative pair.
pub fn brute_binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let pos: Vec<f64> = scores.iter().zip(positive).filter(|(_, &p)| p).map(|(s, _)| *s).collect();
    let neg: Vec<f64> = scores.iter().zip(positive).filter(|(_, &p)| !p).map(|(s, _)| *s).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut wins = 0.0;
    for p in &pos {
        for n in &neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    Some(wins / (pos.len() * neg.len()) as f64)
}

pub fn brute_macro_auc(scores: &[f64], labels: &[usize], classes: usize) -> Option<f64> {
    let aucs: Vec<f64> = (0..classes)
        .filter_map(|c| {
            let s: Vec<f64> = scores.chunks(classes).map(|row| row[c]).collect();
            let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            brute_binary_auc(&s, &pos)
        })
        .collect();
    (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64)
}

/// Random probability rows with coarse values so that ties occur.
pub fn random_scores(rng: &mut impl Rng, n: usize, classes: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * classes);
    for _ in 0..n {
        let raw: Vec<f64> = (0..classes).map(|_| rng.random_range(1..=8) as f64).collect();
        let s: f64 = raw.iter().sum();
        out.extend(raw.iter().map(|v| v / s));
    }
    out
}
