//! Batch regularisers on the predicted delays and transit times.

/// Loss value with per-sample gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    pub loss: f64,
    pub d_delay: Vec<f64>,
    pub d_mtt: Vec<f64>,
}

/// `λ_ac·[mean(exp(−Δt)) + exp(−Var[MTT])]`, population variance.
pub fn anticollapse_loss(delays: &[f64], mtts: &[f64], lambda_ac: f64) -> BatchLoss {
    assert_eq!(delays.len(), mtts.len());
    assert!(!delays.is_empty(), "anti-collapse loss needs a nonempty batch");
    let n = delays.len() as f64;
    let mean_mtt = mtts.iter().sum::<f64>() / n;
    let var = mtts.iter().map(|m| (m - mean_mtt).powi(2)).sum::<f64>() / n;
    let barrier = (-var).exp();
    let delay_term: f64 = delays.iter().map(|d| (-d).exp()).sum::<f64>() / n;
    BatchLoss {
        loss: lambda_ac * (delay_term + barrier),
        d_delay: delays.iter().map(|d| -lambda_ac * (-d).exp() / n).collect(),
        d_mtt: mtts
            .iter()
            .map(|m| -lambda_ac * barrier * 2.0 * (m - mean_mtt) / n)
            .collect(),
    }
}

/// `λ_pr·mean[max(0, Δt_min−Δt)² + max(0, Δt−Δt_max)² + max(0, MTT−MTT_max)²]`.
pub fn prior_loss(delays: &[f64], mtts: &[f64], lambda_pr: f64, delay_min: f64, delay_max: f64, mtt_max: f64) -> BatchLoss {
    assert_eq!(delays.len(), mtts.len());
    assert!(!delays.is_empty(), "prior loss needs a nonempty batch");
    let n = delays.len() as f64;
    let mut loss = 0.0;
    let mut d_delay = Vec::with_capacity(delays.len());
    let mut d_mtt = Vec::with_capacity(delays.len());
    for (&d, &m) in delays.iter().zip(mtts) {
        let low = (delay_min - d).max(0.0);
        let high = (d - delay_max).max(0.0);
        let long = (m - mtt_max).max(0.0);
        loss += low * low + high * high + long * long;
        d_delay.push(lambda_pr * 2.0 * (high - low) / n);
        d_mtt.push(lambda_pr * 2.0 * long / n);
    }
    BatchLoss {
        loss: lambda_pr * loss / n,
        d_delay,
        d_mtt,
    }
}
