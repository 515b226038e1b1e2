//! Log-space helpers.

/// `ln Σ exp(x_i)`, stable for large magnitudes; `-inf` for an empty or
/// all-`-inf` input.
pub fn log_sum_exp<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let values: Vec<f64> = values.into_iter().collect();
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Normalizes log-weights into probabilities.
pub fn softmax_from_logs(logs: &[f64]) -> Vec<f64> {
    let total = log_sum_exp(logs.iter().copied());
    logs.iter().map(|l| (l - total).exp()).collect()
}
