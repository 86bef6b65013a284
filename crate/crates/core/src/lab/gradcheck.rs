use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    reinforce_gradient, run_toy_episode, surrogate_objective, worldmodel_gradient, worldmodel_loss,
    Baseline, LabError, Phi, Theta, ToyConfig, ToyMode,
};

const EPS: f64 = 1e-5;
/// Floor on the denominator so that coordinates whose true gradient is
/// near zero are judged by absolute error.
const DENOM_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub instances: usize,
    pub max_rel_error_policy: f64,
    pub max_rel_error_world_model: f64,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.max_rel_error_policy
            .max(self.max_rel_error_world_model)
    }
}

fn central_difference(params: &mut [f64], i: usize, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = params[i];
    params[i] = orig + EPS;
    let up = f(params);
    params[i] = orig - EPS;
    let down = f(params);
    params[i] = orig;
    (up - down) / (2.0 * EPS)
}

/// Compares analytic gradients with central differences on random small
/// instances.
pub fn gradcheck(instances: usize, seed: u64) -> Result<GradcheckReport, LabError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_policy = 0.0f64;
    let mut worst_model = 0.0f64;
    for _ in 0..instances {
        let n = rng.gen_range(2..=5);
        let config = ToyConfig::new(n, rng.gen_range(1..=4), rng.gen())?;
        let mut theta = Theta::zeros(n);
        theta
            .logits
            .iter_mut()
            .for_each(|l| *l = rng.gen_range(-2.0..2.0));
        let mut phi = Phi::zeros(n);
        phi.logits
            .iter_mut()
            .for_each(|l| *l = rng.gen_range(-2.0..2.0));
        let baseline = if rng.gen_bool(0.5) {
            Baseline::BatchMean
        } else {
            Baseline::None
        };
        let batch = (0..rng.gen_range(2..=10))
            .map(|_| run_toy_episode(&theta, &config, ToyMode::Didactic, &mut rng))
            .collect::<Result<Vec<_>, _>>()?;

        let analytic = reinforce_gradient(&theta, &batch, baseline)?;
        let mut params = theta.logits.clone();
        for (i, a) in analytic.iter().enumerate() {
            let numeric = central_difference(&mut params, i, |p| {
                surrogate_objective(
                    &Theta {
                        n,
                        logits: p.to_vec(),
                    },
                    &batch,
                    baseline,
                )
            });
            worst_policy = worst_policy.max(relative_error(*a, numeric));
        }

        let analytic = worldmodel_gradient(&phi, &batch)?;
        let mut params = phi.logits.clone();
        for (i, a) in analytic.iter().enumerate() {
            let numeric = central_difference(&mut params, i, |p| {
                worldmodel_loss(
                    &Phi {
                        n,
                        logits: p.to_vec(),
                    },
                    &batch,
                )
                .unwrap_or(f64::NAN)
            });
            worst_model = worst_model.max(relative_error(*a, numeric));
        }
    }
    Ok(GradcheckReport {
        instances,
        max_rel_error_policy: worst_policy,
        max_rel_error_world_model: worst_model,
    })
}
