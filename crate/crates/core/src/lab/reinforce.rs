use serde::{Deserialize, Serialize};

use super::{LabError, Theta, ToyEpisode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Baseline {
    None,
    #[default]
    BatchMean,
}

impl Baseline {
    fn value(self, batch: &[ToyEpisode]) -> f64 {
        match self {
            Baseline::None => 0.0,
            Baseline::BatchMean => batch.iter().map(|e| e.reward).sum::<f64>() / batch.len() as f64,
        }
    }
}

fn check_batch(theta: &Theta, batch: &[ToyEpisode]) -> Result<(), LabError> {
    if batch.is_empty() {
        return Err(LabError::EmptyBatch);
    }
    for step in batch.iter().flat_map(|e| &e.steps) {
        if step.action >= theta.n || step.state.hi >= theta.n {
            return Err(LabError::OutOfRange {
                value: step.action.max(step.state.hi),
                n: theta.n,
            });
        }
    }
    Ok(())
}

/// Score-function gradient, averaged over episodes:
/// `(R - b) * (onehot(a) - softmax(theta[s]))` summed over each episode's steps.
pub fn reinforce_gradient(
    theta: &Theta,
    batch: &[ToyEpisode],
    baseline: Baseline,
) -> Result<Vec<f64>, LabError> {
    check_batch(theta, batch)?;
    let n = theta.n;
    let b = baseline.value(batch);
    let scale = 1.0 / batch.len() as f64;
    let mut grad = vec![0.0; theta.logits.len()];
    for ep in batch {
        let advantage = (ep.reward - b) * scale;
        if advantage == 0.0 {
            continue;
        }
        for step in &ep.steps {
            let offset = step.state.index(n) * n;
            let probs = theta.probs(step.state);
            for (j, p) in probs.iter().enumerate() {
                let onehot = if j == step.action { 1.0 } else { 0.0 };
                grad[offset + j] += advantage * (onehot - p);
            }
        }
    }
    if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
        return Err(LabError::NonFinite {
            index,
            state: index / n,
            slot: index % n,
        });
    }
    Ok(grad)
}

/// One ascent step. Returns an error instead of producing non-finite logits.
pub fn reinforce_update(
    theta: &Theta,
    batch: &[ToyEpisode],
    lr: f64,
    baseline: Baseline,
) -> Result<Theta, LabError> {
    let grad = reinforce_gradient(theta, batch, baseline)?;
    let mut next = theta.clone();
    for (i, (l, g)) in next.logits.iter_mut().zip(&grad).enumerate() {
        *l += lr * g;
        if !l.is_finite() {
            return Err(LabError::NonFinite {
                index: i,
                state: i / theta.n,
                slot: i % theta.n,
            });
        }
    }
    Ok(next)
}

/// `mean_e (R_e - b) * sum_t log pi(a_t | s_t)` with the baseline held fixed;
/// its gradient is the update direction.
pub fn surrogate_objective(theta: &Theta, batch: &[ToyEpisode], baseline: Baseline) -> f64 {
    let b = baseline.value(batch);
    batch
        .iter()
        .map(|ep| {
            (ep.reward - b)
                * ep.steps
                    .iter()
                    .map(|s| theta.log_prob(s.state, s.action))
                    .sum::<f64>()
        })
        .sum::<f64>()
        / batch.len() as f64
}
