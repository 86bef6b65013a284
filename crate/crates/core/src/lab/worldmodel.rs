use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    run_toy_episode, softmax, state_count, IntervalState, LabError, ToyConfig, ToyEpisode, ToyMode,
    ToyPolicy,
};

/// Feedback model: three logits (CORRECT, HIGHER, LOWER) per
/// (interval state, guess).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phi {
    pub n: usize,
    pub logits: Vec<f64>,
}

impl Phi {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            logits: vec![0.0; state_count(n) * n * 3],
        }
    }

    fn offset(&self, state: IntervalState, guess: usize) -> usize {
        (state.index(self.n) * self.n + guess) * 3
    }

    pub fn probs(&self, state: IntervalState, guess: usize) -> [f64; 3] {
        let o = self.offset(state, guess);
        let p = softmax(&self.logits[o..o + 3]);
        [p[0], p[1], p[2]]
    }
}

fn feedback_steps(batch: &[ToyEpisode]) -> Result<usize, LabError> {
    if batch.is_empty() {
        return Err(LabError::EmptyBatch);
    }
    if batch.iter().any(|e| !e.didactic) {
        return Err(LabError::NotDidactic);
    }
    Ok(batch
        .iter()
        .flat_map(|e| &e.steps)
        .filter(|s| s.feedback.is_some())
        .count())
}

/// Mean negative log-likelihood of the observed feedback.
pub fn worldmodel_loss(phi: &Phi, batch: &[ToyEpisode]) -> Result<f64, LabError> {
    let count = feedback_steps(batch)?;
    if count == 0 {
        return Err(LabError::EmptyBatch);
    }
    let total: f64 = batch
        .iter()
        .flat_map(|e| &e.steps)
        .filter_map(|s| {
            s.feedback
                .map(|f| -phi.probs(s.state, s.action)[f.index()].ln())
        })
        .sum();
    Ok(total / count as f64)
}

/// Gradient of [`worldmodel_loss`] with respect to the logits.
pub fn worldmodel_gradient(phi: &Phi, batch: &[ToyEpisode]) -> Result<Vec<f64>, LabError> {
    let count = feedback_steps(batch)?;
    if count == 0 {
        return Err(LabError::EmptyBatch);
    }
    let scale = 1.0 / count as f64;
    let mut grad = vec![0.0; phi.logits.len()];
    for step in batch.iter().flat_map(|e| &e.steps) {
        let Some(f) = step.feedback else { continue };
        if step.action >= phi.n || step.state.hi >= phi.n {
            return Err(LabError::OutOfRange {
                value: step.action.max(step.state.hi),
                n: phi.n,
            });
        }
        let o = phi.offset(step.state, step.action);
        let p = phi.probs(step.state, step.action);
        for k in 0..3 {
            let onehot = if k == f.index() { 1.0 } else { 0.0 };
            grad[o + k] += scale * (p[k] - onehot);
        }
    }
    if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
        return Err(LabError::NonFinite {
            index,
            state: index / (3 * phi.n),
            slot: index % (3 * phi.n),
        });
    }
    Ok(grad)
}

/// One descent step on the cross-entropy loss.
pub fn worldmodel_update(phi: &Phi, batch: &[ToyEpisode], lr: f64) -> Result<Phi, LabError> {
    let grad = worldmodel_gradient(phi, batch)?;
    let mut next = phi.clone();
    for (i, (l, g)) in next.logits.iter_mut().zip(&grad).enumerate() {
        *l -= lr * g;
        if !l.is_finite() {
            return Err(LabError::NonFinite {
                index: i,
                state: i / (3 * phi.n),
                slot: i % (3 * phi.n),
            });
        }
    }
    Ok(next)
}

/// Fits a world model on didactic episodes generated by `behavior`. The step
/// size decays linearly from `lr` to zero over the run.
pub fn train_world_model(
    config: &ToyConfig,
    behavior: &dyn ToyPolicy,
    episodes: usize,
    batch_size: usize,
    lr: f64,
) -> Result<Phi, LabError> {
    config.validate()?;
    if episodes == 0 || batch_size == 0 {
        return Err(LabError::NoEpisodes);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut phi = Phi::zeros(config.n);
    let mut done = 0;
    while done < episodes {
        let size = batch_size.min(episodes - done);
        let batch = (0..size)
            .map(|_| run_toy_episode(behavior, config, ToyMode::Didactic, &mut rng))
            .collect::<Result<Vec<_>, _>>()?;
        let step = lr * (1.0 - done as f64 / episodes as f64);
        phi = worldmodel_update(&phi, &batch, step)?;
        done += size;
    }
    Ok(phi)
}
