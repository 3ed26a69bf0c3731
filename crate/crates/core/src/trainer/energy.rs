use crate::trainer::TrainError;

/// `τ · log Σ exp(s_i / τ)`, evaluated with the max subtracted first.
pub fn energy_score(logits: &[f64], tau: f64) -> Result<f64, TrainError> {
    if logits.is_empty() {
        return Err(TrainError::EmptyTask);
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|s| ((s - max) / tau).exp()).sum();
    Ok(max + tau * sum.ln())
}
