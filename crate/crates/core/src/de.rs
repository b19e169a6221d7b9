//! Differential evolution (rand/1/bin) for maximizing black-box objectives.
//!
//! Candidate RNG streams are keyed by (seed, generation, member), and
//! population evaluations write into indexed slots, so results do not depend
//! on thread scheduling.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rng;

/// Optimizer controls. Population size is `pop_factor * dim`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DeConfig {
    pub pop_factor: usize,
    /// Mutation weight F.
    pub f: f64,
    /// Crossover rate CR.
    pub cr: f64,
    pub max_gen: usize,
    /// Stop after this many generations without improvement.
    pub stall_gen: usize,
    /// Initialization range, symmetric around zero.
    pub init_half_width: f64,
}

impl Default for DeConfig {
    fn default() -> Self {
        DeConfig {
            pop_factor: 15,
            f: 0.8,
            cr: 0.9,
            max_gen: 200,
            stall_gen: 30,
            init_half_width: 1.0,
        }
    }
}

/// Search outcome.
#[derive(Debug, Clone)]
pub struct DeResult {
    pub best: Vec<f64>,
    pub best_value: f64,
    /// Best value after initialization and after each generation.
    pub trace: Vec<f64>,
    pub evaluations: usize,
    pub stalled: bool,
}

/// Maximize `objective` over R^dim. The objective must be deterministic;
/// candidates yielding NaN are treated as negative infinity.
pub fn maximize<F>(dim: usize, objective: &F, cfg: &DeConfig, seed: u64) -> DeResult
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    assert!(dim >= 1);
    let np = (cfg.pop_factor * dim).max(5);
    let mut pop: Vec<Vec<f64>> = (0..np)
        .map(|i| {
            let mut r = rng::stream(seed, &[0, i as u64]);
            (0..dim)
                .map(|_| r.gen_range(-cfg.init_half_width..cfg.init_half_width))
                .collect()
        })
        .collect();
    let mut fitness: Vec<f64> = pop.par_iter().map(|x| sanitize(objective(x))).collect();
    let mut evaluations = np;

    let mut best_idx = argmax(&fitness);
    let mut trace = vec![fitness[best_idx]];
    let mut stall = 0usize;
    let mut stalled = false;

    for gen in 1..=cfg.max_gen {
        let trials: Vec<Vec<f64>> = (0..np)
            .into_par_iter()
            .map(|i| {
                let mut r = rng::stream(seed, &[gen as u64, i as u64]);
                // rand/1 mutation with three distinct partners.
                let mut pick = || loop {
                    let k = r.gen_range(0..np);
                    if k != i {
                        break k;
                    }
                };
                let (r1, r2, r3) = {
                    let a = pick();
                    let b = loop {
                        let k = pick();
                        if k != a {
                            break k;
                        }
                    };
                    let c = loop {
                        let k = pick();
                        if k != a && k != b {
                            break k;
                        }
                    };
                    (a, b, c)
                };
                let forced = r.gen_range(0..dim);
                (0..dim)
                    .map(|j| {
                        if j == forced || r.gen::<f64>() < cfg.cr {
                            pop[r1][j] + cfg.f * (pop[r2][j] - pop[r3][j])
                        } else {
                            pop[i][j]
                        }
                    })
                    .collect()
            })
            .collect();
        let trial_fit: Vec<f64> = trials.par_iter().map(|x| sanitize(objective(x))).collect();
        evaluations += np;
        for i in 0..np {
            if trial_fit[i] > fitness[i] {
                fitness[i] = trial_fit[i];
                pop[i] = trials[i].clone();
            }
        }
        let new_best = argmax(&fitness);
        if fitness[new_best] > trace[trace.len() - 1] + 1e-12 {
            stall = 0;
        } else {
            stall += 1;
        }
        best_idx = new_best;
        trace.push(fitness[best_idx]);
        if stall >= cfg.stall_gen {
            stalled = true;
            break;
        }
    }

    DeResult {
        best: pop[best_idx].clone(),
        best_value: fitness[best_idx],
        trace,
        evaluations,
        stalled,
    }
}

fn sanitize(v: f64) -> f64 {
    if v.is_nan() {
        f64::NEG_INFINITY
    } else {
        v
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_sphere() {
        let obj = |x: &[f64]| -x.iter().map(|v| v * v).sum::<f64>();
        let out = maximize(4, &obj, &DeConfig::default(), 3);
        assert!(out.best_value > -1e-6, "best {}", out.best_value);
        assert!(out.best.iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn deterministic_given_seed() {
        let obj = |x: &[f64]| -(x[0] - 0.3).powi(2) - (x[1] + 0.7).powi(2);
        let a = maximize(2, &obj, &DeConfig::default(), 11);
        let b = maximize(2, &obj, &DeConfig::default(), 11);
        assert_eq!(a.best, b.best);
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.evaluations, b.evaluations);
    }

    #[test]
    fn trace_is_monotone_nondecreasing() {
        let obj = |x: &[f64]| (x[0] * 3.0).sin() + x[1].cos();
        let out = maximize(2, &obj, &DeConfig::default(), 5);
        assert!(out.trace.windows(2).all(|w| w[1] >= w[0]));
        assert!(out.best_value <= 2.0 + 1e-9);
        assert!(out.best_value > 1.99);
    }
}
