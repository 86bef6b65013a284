use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    reinforce_update, run_toy_episode, train_world_model, Baseline, LabError, Theta, ToyConfig,
    ToyMode, ToyPolicy,
};
use crate::metrics::CumulativeAccuracyCurve;

/// Training episodes per learning-curve point.
pub const CURVE_CHUNK: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    /// Multi-turn episodes with truthful feedback.
    Rl2f,
    /// One attempt per episode, no feedback.
    SingleTurnRl,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub batch_size: usize,
    pub baseline: Baseline,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            batch_size: 32,
            baseline: Baseline::BatchMean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub theta: Theta,
    /// Mean training reward per block of [`CURVE_CHUNK`] episodes.
    pub curve: Vec<f64>,
}

pub fn train(
    config: &ToyConfig,
    regime: Regime,
    episodes: usize,
    lr: f64,
    seed: u64,
) -> Result<TrainOutcome, LabError> {
    train_with(config, regime, episodes, lr, seed, TrainOptions::default())
}

pub fn train_with(
    config: &ToyConfig,
    regime: Regime,
    episodes: usize,
    lr: f64,
    seed: u64,
    options: TrainOptions,
) -> Result<TrainOutcome, LabError> {
    config.validate()?;
    if episodes == 0 || options.batch_size == 0 {
        return Err(LabError::NoEpisodes);
    }
    let mode = match regime {
        Regime::Rl2f => ToyMode::Didactic,
        Regime::SingleTurnRl => ToyMode::SingleTurn,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut theta = Theta::zeros(config.n);
    let mut curve = Vec::with_capacity(episodes.div_ceil(CURVE_CHUNK));
    let (mut chunk_reward, mut chunk_count) = (0.0, 0usize);
    let mut done = 0;
    while done < episodes {
        // batches never straddle a curve block
        let to_block = CURVE_CHUNK - done % CURVE_CHUNK;
        let size = options.batch_size.min(episodes - done).min(to_block);
        let batch = (0..size)
            .map(|_| run_toy_episode(&theta, config, mode, &mut rng))
            .collect::<Result<Vec<_>, _>>()?;
        chunk_reward += batch.iter().map(|e| e.reward).sum::<f64>();
        chunk_count += size;
        theta = reinforce_update(&theta, &batch, lr, options.baseline)?;
        done += size;
        if done % CURVE_CHUNK == 0 || done == episodes {
            curve.push(chunk_reward / chunk_count as f64);
            (chunk_reward, chunk_count) = (0.0, 0);
        }
    }
    Ok(TrainOutcome { theta, curve })
}

/// Cumulative accuracy per turn over `episodes` fresh targets.
pub fn evaluate(
    policy: &dyn ToyPolicy,
    mode: ToyMode<'_>,
    config: &ToyConfig,
    episodes: usize,
    seed: u64,
) -> Result<CumulativeAccuracyCurve, LabError> {
    config.validate()?;
    if episodes == 0 {
        return Err(LabError::NoEpisodes);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut turns = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        turns.push(run_toy_episode(policy, config, mode, &mut rng)?.solved_at);
    }
    Ok(
        CumulativeAccuracyCurve::from_solve_turns(turns, config.max_turns)
            .expect("episodes and turns are positive"),
    )
}

/// One-sided exact sign test: probability of at least `wins` successes out
/// of `wins + losses` fair coin flips. Ties are dropped by the caller.
pub fn sign_test_p_value(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    let mut log_binom = 0.0f64;
    let mut total = 0.0;
    for k in 0..=n {
        if k > 0 {
            log_binom += ((n - k + 1) as f64).ln() - (k as f64).ln();
        }
        if k >= wins {
            total += (log_binom - n as f64 * std::f64::consts::LN_2).exp();
        }
    }
    total.min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub n: usize,
    pub max_turns: usize,
    pub train_episodes: usize,
    pub eval_episodes: usize,
    pub world_model_episodes: usize,
    pub seeds: usize,
    pub lr: f64,
    pub world_model_lr: f64,
    pub base_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub rl2f: Vec<f64>,
    pub single_turn: Vec<f64>,
    pub autodidact: Vec<f64>,
    /// Accuracy of repeating one attempt verbatim at every turn.
    pub repeat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingReport {
    pub seeds: Vec<SeedOutcome>,
    pub mean_rl2f: Vec<f64>,
    pub mean_single_turn: Vec<f64>,
    pub mean_autodidact: Vec<f64>,
    pub mean_repeat: f64,
    /// Seeds where RL2F beats single-turn training at the last turn.
    pub wins: usize,
    pub losses: usize,
    pub sign_test_p: f64,
}

fn mean_curve(rows: impl Iterator<Item = Vec<f64>>) -> Vec<f64> {
    let rows: Vec<Vec<f64>> = rows.collect();
    let len = rows[0].len();
    (0..len)
        .map(|t| rows.iter().map(|r| r[t]).sum::<f64>() / rows.len() as f64)
        .collect()
}

fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedOutcome, LabError> {
    let toy = ToyConfig::new(cfg.n, cfg.max_turns, seed)?;
    let rl2f = train(&toy, Regime::Rl2f, cfg.train_episodes, cfg.lr, seed)?.theta;
    let single = train(
        &toy,
        Regime::SingleTurnRl,
        cfg.train_episodes,
        cfg.lr,
        seed ^ 0x5151,
    )?
    .theta;
    let wm_config = ToyConfig {
        seed: seed ^ 0xfeed,
        ..toy
    };
    let phi = train_world_model(
        &wm_config,
        &rl2f,
        cfg.world_model_episodes,
        32,
        cfg.world_model_lr,
    )?;
    let eval_seed = seed.wrapping_add(1_000_003);
    let eval = |policy: &Theta, mode| evaluate(policy, mode, &toy, cfg.eval_episodes, eval_seed);
    Ok(SeedOutcome {
        seed,
        rl2f: eval(&rl2f, ToyMode::Didactic)?.values,
        single_turn: eval(&single, ToyMode::Didactic)?.values,
        autodidact: eval(&rl2f, ToyMode::AutodidactUsing(&phi))?.values,
        repeat: eval(&rl2f, ToyMode::SingleTurn)?.at(1),
    })
}

/// Trains both regimes and a world model per seed, then evaluates all of
/// them under the same multi-turn protocol.
pub fn ordering_experiment(cfg: &ExperimentConfig) -> Result<OrderingReport, LabError> {
    if cfg.seeds == 0 {
        return Err(LabError::NoEpisodes);
    }
    let seeds = (0..cfg.seeds as u64)
        .into_par_iter()
        .map(|i| run_seed(cfg, cfg.base_seed.wrapping_add(i)))
        .collect::<Result<Vec<_>, _>>()?;
    let last = cfg.max_turns - 1;
    let wins = seeds
        .iter()
        .filter(|s| s.rl2f[last] > s.single_turn[last])
        .count();
    let losses = seeds
        .iter()
        .filter(|s| s.rl2f[last] < s.single_turn[last])
        .count();
    Ok(OrderingReport {
        mean_rl2f: mean_curve(seeds.iter().map(|s| s.rl2f.clone())),
        mean_single_turn: mean_curve(seeds.iter().map(|s| s.single_turn.clone())),
        mean_autodidact: mean_curve(seeds.iter().map(|s| s.autodidact.clone())),
        mean_repeat: seeds.iter().map(|s| s.repeat).sum::<f64>() / seeds.len() as f64,
        wins,
        losses,
        sign_test_p: sign_test_p_value(wins, losses),
        seeds,
    })
}
