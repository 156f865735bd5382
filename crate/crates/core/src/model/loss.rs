//! Softmax cross-entropy and KL divergence with gradients w.r.t. logits.
//!
//! Both losses average over the batch and floor probabilities at
//! [`PROB_FLOOR`] before taking logarithms; where the floor is active the
//! corresponding term is constant and contributes no gradient.

use crate::error::{Error, Result};

pub const PROB_FLOOR: f64 = 1e-12;

pub fn softmax_rows(logits: &[f64], classes: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(classes) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut z = 0.0;
        for &v in row {
            let e = (v - max).exp();
            z += e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v /= z;
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub loss: f64,
    /// d loss / d logits, `batch x classes`.
    pub dlogits: Vec<f64>,
}

/// Mean of `-ln max(p[label], floor)`.
pub fn ce_loss(probs: &[f64], labels: &[usize], classes: usize) -> Result<LossOutput> {
    if probs.len() != labels.len() * classes || labels.is_empty() {
        return Err(Error::InvalidShape(format!(
            "{} probabilities for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let n = labels.len() as f64;
    let mut loss = 0.0;
    let mut dlogits = vec![0.0; probs.len()];
    for ((row, d), &y) in probs.chunks(classes).zip(dlogits.chunks_mut(classes)).zip(labels) {
        let py = row[y];
        loss -= py.max(PROB_FLOOR).ln();
        if py >= PROB_FLOOR {
            for (c, (g, &p)) in d.iter_mut().zip(row).enumerate() {
                *g = (p - if c == y { 1.0 } else { 0.0 }) / n;
            }
        }
    }
    Ok(LossOutput {
        loss: loss / n,
        dlogits,
    })
}

#[derive(Clone, Debug)]
pub struct KlOutput {
    pub loss: f64,
    /// Gradient w.r.t. the logits behind the first distribution.
    pub dlogits_p: Vec<f64>,
    /// Gradient w.r.t. the logits behind the second distribution.
    pub dlogits_q: Vec<f64>,
}

/// Mean over rows of `sum_c p_c ln(p_c / q_c)`.
pub fn kl_div(p: &[f64], q: &[f64], classes: usize) -> Result<KlOutput> {
    if p.len() != q.len() || p.is_empty() || !p.len().is_multiple_of(classes) {
        return Err(Error::InvalidShape(format!(
            "KL between {} and {} probabilities",
            p.len(),
            q.len()
        )));
    }
    let n = (p.len() / classes) as f64;
    let mut loss = 0.0;
    let mut dp = vec![0.0; p.len()];
    let mut dq = vec![0.0; p.len()];
    let mut g = vec![0.0; classes];
    let mut h = vec![0.0; classes];
    for (i, (pr, qr)) in p.chunks(classes).zip(q.chunks(classes)).enumerate() {
        for c in 0..classes {
            let lp = pr[c].max(PROB_FLOOR).ln();
            let lq = qr[c].max(PROB_FLOOR).ln();
            loss += pr[c] * (lp - lq);
            g[c] = lp - lq + if pr[c] >= PROB_FLOOR { 1.0 } else { 0.0 };
            h[c] = if qr[c] >= PROB_FLOOR { -pr[c] / qr[c] } else { 0.0 };
        }
        // Chain through the softmax Jacobian: dz_j = s_j (g_j - sum_i s_i g_i).
        let gbar: f64 = pr.iter().zip(&g).map(|(s, v)| s * v).sum();
        let hbar: f64 = qr.iter().zip(&h).map(|(s, v)| s * v).sum();
        for c in 0..classes {
            dp[i * classes + c] = pr[c] * (g[c] - gbar) / n;
            dq[i * classes + c] = qr[c] * (h[c] - hbar) / n;
        }
    }
    Ok(KlOutput {
        loss: loss / n,
        dlogits_p: dp,
        dlogits_q: dq,
    })
}
