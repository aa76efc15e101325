use thiserror::Error;

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("{0} probabilities but {1} labels")]
    LengthMismatch(usize, usize),
    #[error("empty batch")]
    EmptyBatch,
    #[error("label {0} is not 0 or 1")]
    InvalidLabel(u8),
}

/// Per-sample weights: `1 / (2 n_pos)` for positives and `1 / (2 n_neg)` for
/// negatives, or `1 / n` for everything when only one class is present.
fn sample_weights(len_p: usize, labels: &[u8]) -> Result<(f64, f64), LossError> {
    if len_p != labels.len() {
        return Err(LossError::LengthMismatch(len_p, labels.len()));
    }
    if labels.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    if let Some(&l) = labels.iter().find(|&&l| l > 1) {
        return Err(LossError::InvalidLabel(l));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        let w = 1.0 / labels.len() as f64;
        Ok((w, w))
    } else {
        Ok((0.5 / n_pos as f64, 0.5 / n_neg as f64))
    }
}

fn clamp(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Half the mean positive-sample BCE plus half the mean negative-sample BCE.
/// Falls back to plain mean BCE for single-class batches.
pub fn balanced_bce(probs: &[f64], labels: &[u8]) -> Result<f64, LossError> {
    let (w_pos, w_neg) = sample_weights(probs.len(), labels)?;
    Ok(probs
        .iter()
        .zip(labels)
        .map(|(&p, &l)| {
            let p = clamp(p);
            if l == 1 {
                -w_pos * p.ln()
            } else {
                -w_neg * (1.0 - p).ln()
            }
        })
        .sum())
}

/// Plain mean binary cross-entropy with the same clamping.
pub fn mean_bce(probs: &[f64], labels: &[u8]) -> Result<f64, LossError> {
    if probs.len() != labels.len() {
        return Err(LossError::LengthMismatch(probs.len(), labels.len()));
    }
    if probs.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &l)| {
            let p = clamp(p);
            if l == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(total / probs.len() as f64)
}

/// d loss / d p_i. Zero where the clamp is active.
pub fn balanced_bce_grad(probs: &[f64], labels: &[u8]) -> Result<Vec<f64>, LossError> {
    let (w_pos, w_neg) = sample_weights(probs.len(), labels)?;
    Ok(probs
        .iter()
        .zip(labels)
        .map(|(&p, &l)| {
            if clamp(p) != p {
                0.0
            } else if l == 1 {
                -w_pos / p
            } else {
                w_neg / (1.0 - p)
            }
        })
        .collect())
}

/// d loss / d z_i for `p_i = sigmoid(z_i)`, ignoring the clamp. This is the
/// form used for training; it stays finite when the sigmoid saturates.
pub fn balanced_bce_logit_grad(probs: &[f64], labels: &[u8]) -> Result<Vec<f64>, LossError> {
    let (w_pos, w_neg) = sample_weights(probs.len(), labels)?;
    Ok(probs
        .iter()
        .zip(labels)
        .map(|(&p, &l)| if l == 1 { -w_pos * (1.0 - p) } else { w_neg * p })
        .collect())
}
