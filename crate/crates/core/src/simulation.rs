//! Simulation engine: two built-in data generating processes, ground-truth
//! oracles, and the replication harnesses for the evaluation and learning
//! experiments.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::estimators;
use crate::math::{self, expit, GaussHermite};
use crate::nuisance::{self, TrimConfig};
use crate::policy::LinearPolicy;
use crate::rng;
use crate::scenario::ScenarioSpec;
use crate::trajectory::{Dataset, Trajectory};
use crate::Result;

/// Logistic model on (x1, a1): b0 + x1·x1c + x1²·x1_sq + a1·a1c + a1x1·a1_x1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Stage1Logit {
    pub b0: f64,
    pub x1: f64,
    pub x1_sq: f64,
    pub a1: f64,
    pub a1_x1: f64,
}

impl Stage1Logit {
    pub fn logit(&self, x1: f64, a1: f64) -> f64 {
        self.b0 + self.x1 * x1 + self.x1_sq * x1 * x1 + self.a1 * a1 + self.a1_x1 * a1 * x1
    }
    pub fn prob(&self, x1: f64, a1: f64) -> f64 {
        expit(self.logit(x1, a1))
    }
}

/// Normal model for the intermediate covariate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct X2Model {
    pub b0: f64,
    pub x1: f64,
    pub x1_sq: f64,
    pub a1: f64,
    pub a1_x1: f64,
    pub sd: f64,
}

impl X2Model {
    pub fn mean(&self, x1: f64, a1: f64) -> f64 {
        self.b0 + self.x1 * x1 + self.x1_sq * x1 * x1 + self.a1 * a1 + self.a1_x1 * a1 * x1
    }
}

/// Logistic model for the stage-2 treatment probability P(A2 = 1 | x1, x2).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct E2Logit {
    pub b0: f64,
    pub x1: f64,
    pub x1_sq: f64,
    pub x2: f64,
    pub x2_sq: f64,
}

impl E2Logit {
    pub fn prob(&self, x1: f64, x2: f64) -> f64 {
        expit(
            self.b0 + self.x1 * x1 + self.x1_sq * x1 * x1 + self.x2 * x2 + self.x2_sq * x2 * x2,
        )
    }
}

/// Logistic model for remaining uncensored at stage 2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct C2Logit {
    pub b0: f64,
    pub x1: f64,
    pub x2: f64,
    pub a2: f64,
    pub a2_x2: f64,
}

impl C2Logit {
    pub fn prob(&self, x1: f64, x2: f64, a2: f64) -> f64 {
        expit(self.b0 + self.x1 * x1 + self.x2 * x2 + self.a2 * a2 + self.a2_x2 * a2 * x2)
    }
}

/// Logistic model for stage-2 survival.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct P2Logit {
    pub b0: f64,
    pub x1: f64,
    pub x2: f64,
    pub x1_x2: f64,
    pub a1: f64,
    pub a2: f64,
}

impl P2Logit {
    pub fn logit(&self, x1: f64, x2: f64, a1: f64, a2: f64) -> f64 {
        self.b0 + self.x1 * x1 + self.x2 * x2 + self.x1_x2 * x1 * x2 + self.a1 * a1 + self.a2 * a2
    }
    pub fn prob(&self, x1: f64, x2: f64, a1: f64, a2: f64) -> f64 {
        expit(self.logit(x1, x2, a1, a2))
    }
    /// Whether the survival probability varies with x2.
    pub fn depends_on_x2(&self, x1: f64) -> bool {
        self.x2 != 0.0 || (self.x1_x2 != 0.0 && x1 != 0.0)
    }
}

/// Conditional outcome mean, linear in x2 with an optional exp(x2) term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Mu2Mean {
    pub b0: f64,
    pub x1: f64,
    pub x2: f64,
    pub exp_x2: f64,
    pub a1: f64,
    pub a1_x1: f64,
    pub a2: f64,
    pub a1_a2: f64,
    pub a2_x2: f64,
}

impl Mu2Mean {
    pub fn mean(&self, x1: f64, x2: f64, a1: f64, a2: f64) -> f64 {
        self.b0
            + self.x1 * x1
            + self.x2 * x2
            + self.exp_x2 * x2.exp()
            + self.a1 * a1
            + self.a1_x1 * a1 * x1
            + self.a2 * a2
            + self.a1_a2 * a1 * a2
            + self.a2_x2 * a2 * x2
    }

    /// Decompose at a fixed arm as `c0 + c1·x2 + c2·exp(x2)`.
    pub fn in_x2(&self, x1: f64, a1: f64, a2: f64) -> (f64, f64, f64) {
        (
            self.b0
                + self.x1 * x1
                + self.a1 * a1
                + self.a1_x1 * a1 * x1
                + self.a2 * a2
                + self.a1_a2 * a1 * a2,
            self.x2 + self.a2_x2 * a2,
            self.exp_x2,
        )
    }
}

/// A complete two-stage data generating process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub x1_low: f64,
    pub x1_high: f64,
    pub e1: Stage1Logit,
    pub c1: Stage1Logit,
    pub p1: Stage1Logit,
    pub x2: X2Model,
    pub e2: E2Logit,
    pub c2: C2Logit,
    pub p2: P2Logit,
    pub mu2: Mu2Mean,
    pub y_sd: f64,
    pub n: usize,
    pub seed: u64,
}

impl SimConfig {
    /// First experiment preset.
    pub fn dgp1(n: usize, seed: u64) -> Self {
        SimConfig {
            x1_low: -0.3,
            x1_high: 0.7,
            e1: Stage1Logit {
                b0: 0.3,
                x1: 0.2,
                ..Default::default()
            },
            c1: Stage1Logit {
                b0: 2.0, // eta1
                x1: 1.0,
                a1: 1.0,
                ..Default::default()
            },
            p1: Stage1Logit {
                b0: 0.0,
                x1: 5.0,
                a1: 3.0,
                a1_x1: 0.5,
                ..Default::default()
            },
            x2: X2Model {
                b0: 0.2,
                x1: 0.3,
                a1: 1.5,
                a1_x1: 0.75,
                sd: 1.5,
                ..Default::default()
            },
            e2: E2Logit {
                b0: 0.7,
                x1: 0.2,
                x2: -0.2,
                x2_sq: -0.1,
                ..Default::default()
            },
            c2: C2Logit {
                b0: -3.0 + 3.5, // eta2 folded into the intercept
                x1: 1.0,
                x2: 1.0,
                a2: 0.5,
                a2_x2: 1.0,
            },
            p2: P2Logit {
                b0: 0.8,
                x1: -1.42,
                a1: 0.8,
                a2: -0.65,
                ..Default::default()
            },
            mu2: Mu2Mean {
                b0: 2.58,
                x1: -1.04,
                a1: 1.21,
                a1_x1: -0.92,
                x2: 2.27,
                a2: 1.18,
                a1_a2: 3.29,
                a2_x2: 3.95,
                ..Default::default()
            },
            y_sd: 1.5,
            n,
            seed,
        }
    }

    /// Second (additional) experiment preset.
    pub fn dgp2(n: usize, seed: u64) -> Self {
        SimConfig {
            x1_low: -0.3,
            x1_high: 0.7,
            e1: Stage1Logit {
                b0: 0.5,
                x1_sq: 0.5,
                ..Default::default()
            },
            c1: Stage1Logit {
                b0: 2.5, // eta1
                x1_sq: 1.0,
                ..Default::default()
            },
            p1: Stage1Logit {
                x1_sq: 3.0,
                a1: 5.0,
                a1_x1: -0.5,
                ..Default::default()
            },
            x2: X2Model {
                b0: 0.5,
                x1_sq: -0.3,
                a1: 1.0,
                a1_x1: -0.5,
                sd: 1.5,
                ..Default::default()
            },
            e2: E2Logit {
                b0: 0.7,
                x1_sq: -0.5,
                x2: 0.5,
                x2_sq: -0.1,
                ..Default::default()
            },
            c2: C2Logit {
                b0: -3.0 + 4.0, // eta2
                x1: 1.0,
                x2: 1.0,
                a2: 0.5,
                a2_x2: 1.0,
            },
            p2: P2Logit {
                b0: 0.5,
                x1: 2.0,
                x1_x2: 1.0,
                a1: -0.8,
                a2: 0.65,
                ..Default::default()
            },
            mu2: Mu2Mean {
                b0: -3.0,
                x1: 1.0,
                a1: 1.5,
                a1_x1: -0.5,
                exp_x2: 0.01,
                a2: 1.5,
                a1_a2: 1.0,
                a2_x2: -0.5,
                ..Default::default()
            },
            y_sd: 1.5,
            n,
            seed,
        }
    }

    pub fn preset(name: &str, n: usize, seed: u64) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "dgp1" => Ok(Self::dgp1(n, seed)),
            "dgp2" => Ok(Self::dgp2(n, seed)),
            other => Err(Error::InvalidConfig(format!(
                "unknown preset `{other}` (expected dgp1 or dgp2)"
            ))),
        }
    }

    pub fn with_n_seed(mut self, n: usize, seed: u64) -> Self {
        self.n = n;
        self.seed = seed;
        self
    }
}

/// The shipped fixed evaluation policy per preset: the true optimal linear
/// policy's coefficients rounded to two decimals, so replication configs are
/// self-describing. Computed once with `true_optimal_policy` at m = 100000.
pub fn default_eval_policy(preset: &str) -> Result<LinearPolicy> {
    match preset.to_ascii_lowercase().as_str() {
        "dgp1" => LinearPolicy::new(vec![0.99, -0.14], vec![0.79, 0.0, -0.12, 0.60]),
        "dgp2" => LinearPolicy::new(vec![0.99, 0.16], vec![-0.45, 0.0, 0.89, -0.09]),
        other => Err(Error::InvalidConfig(format!(
            "no default evaluation policy for preset `{other}`"
        ))),
    }
}

/// One subject's factual draw, gates applied in order
/// C1 -> S1 -> X2/A2 -> C2 -> S2 -> Y.
fn draw_subject(cfg: &SimConfig, seed: u64, subject: u64) -> Trajectory {
    let mut r = rng::stream(seed, &[0xD47A, subject]);
    let x1 = r.gen_range(cfg.x1_low..cfg.x1_high);
    let a1 = u8::from(r.gen::<f64>() < cfg.e1.prob(x1, 0.0));
    let a1f = a1 as f64;
    if r.gen::<f64>() >= cfg.c1.prob(x1, a1f) {
        return Trajectory::censored_stage1(vec![x1], a1).expect("valid shape");
    }
    let s1 = r.gen::<f64>() < cfg.p1.prob(x1, a1f);
    if !s1 {
        return Trajectory::died_stage1(vec![x1], a1).expect("valid shape");
    }
    let x2 = cfg.x2.mean(x1, a1f) + cfg.x2.sd * normal_draw(&mut r);
    let a2 = u8::from(r.gen::<f64>() < cfg.e2.prob(x1, x2));
    let a2f = a2 as f64;
    if r.gen::<f64>() >= cfg.c2.prob(x1, x2, a2f) {
        return Trajectory::censored_stage2(vec![x1], a1, vec![x2], a2).expect("valid shape");
    }
    let s2 = r.gen::<f64>() < cfg.p2.prob(x1, x2, a1f, a2f);
    if !s2 {
        return Trajectory::died_stage2(vec![x1], a1, vec![x2], a2).expect("valid shape");
    }
    let y = cfg.mu2.mean(x1, x2, a1f, a2f) + cfg.y_sd * normal_draw(&mut r);
    Trajectory::complete(vec![x1], a1, vec![x2], a2, y).expect("valid shape")
}

fn normal_draw<R: Rng>(r: &mut R) -> f64 {
    // Box-Muller; one value per call keeps the draw count per subject fixed.
    let u1: f64 = r.gen::<f64>().max(1e-300);
    let u2: f64 = r.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Generate a dataset of `cfg.n` monotone trajectories.
pub fn simulate(cfg: &SimConfig) -> Dataset {
    let rows: Vec<Trajectory> = (0..cfg.n as u64)
        .into_par_iter()
        .map(|i| draw_subject(cfg, cfg.seed, i))
        .collect();
    Dataset::from_rows(rows, Some(1)).expect("simulated rows are uniform")
}

/// Marginal event rates of a dataset (censoring out of everyone at risk at
/// the stage, survival among the uncensored at risk).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MarginalRates {
    pub censor1: f64,
    pub censor2: f64,
    pub survive1: f64,
    pub survive2: f64,
    pub treat1: f64,
    pub treat2: f64,
}

pub fn marginal_rates(d: &Dataset) -> MarginalRates {
    let n = d.len() as f64;
    let mut c1 = 0.0;
    let mut s1num = 0.0;
    let mut s1den = 0.0;
    let mut a1 = 0.0;
    let (mut at_risk2, mut c2, mut s2num, mut s2den, mut a2) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for t in d.rows() {
        a1 += t.a1() as f64;
        if t.c1() == 1 {
            c1 += 1.0;
            continue;
        }
        s1den += 1.0;
        if t.s1() == Some(1) {
            s1num += 1.0;
            at_risk2 += 1.0;
            a2 += t.a2().unwrap_or(0) as f64;
            if t.c2() == Some(1) {
                c2 += 1.0;
                continue;
            }
            s2den += 1.0;
            if t.s2() == Some(1) {
                s2num += 1.0;
            }
        }
    }
    MarginalRates {
        censor1: c1 / n,
        censor2: if at_risk2 > 0.0 { c2 / at_risk2 } else { f64::NAN },
        survive1: if s1den > 0.0 { s1num / s1den } else { f64::NAN },
        survive2: if s2den > 0.0 { s2num / s2den } else { f64::NAN },
        treat1: a1 / n,
        treat2: if at_risk2 > 0.0 { a2 / at_risk2 } else { f64::NAN },
    }
}

// ---------------------------------------------------------------------------
// Ground-truth oracle
// ---------------------------------------------------------------------------

/// Closed-form/quadrature evaluations of every nuisance implied by a
/// [`SimConfig`]. Conditional means over the intermediate covariate use
/// normal partial moments where the integrand is piecewise polynomial-plus-
/// exponential, and Gauss–Hermite quadrature for logistic integrands.
#[derive(Debug, Clone)]
pub struct DgpOracle {
    cfg: SimConfig,
    gh: GaussHermite,
}

impl DgpOracle {
    pub fn new(cfg: SimConfig) -> Self {
        DgpOracle {
            cfg,
            gh: GaussHermite::new(64),
        }
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn e1(&self, a1: u8, x1: f64) -> f64 {
        let p = self.cfg.e1.prob(x1, 0.0);
        if a1 == 1 {
            p
        } else {
            1.0 - p
        }
    }
    pub fn c1(&self, a1: u8, x1: f64) -> f64 {
        self.cfg.c1.prob(x1, a1 as f64)
    }
    pub fn p1(&self, a1: u8, x1: f64) -> f64 {
        self.cfg.p1.prob(x1, a1 as f64)
    }
    pub fn e2(&self, a2: u8, x1: f64, x2: f64) -> f64 {
        let p = self.cfg.e2.prob(x1, x2);
        if a2 == 1 {
            p
        } else {
            1.0 - p
        }
    }
    pub fn c2(&self, a2: u8, x1: f64, x2: f64) -> f64 {
        self.cfg.c2.prob(x1, x2, a2 as f64)
    }
    pub fn p2(&self, arm: (u8, u8), x1: f64, x2: f64) -> f64 {
        self.cfg.p2.prob(x1, x2, arm.0 as f64, arm.1 as f64)
    }
    pub fn mu2(&self, arm: (u8, u8), x1: f64, x2: f64) -> f64 {
        self.cfg.mu2.mean(x1, x2, arm.0 as f64, arm.1 as f64)
    }

    /// m_{p2}^{a1a2}(x1) = E[p2^{a1a2}(x1, X2) | x1, a1-arm].
    pub fn m_p2(&self, arm: (u8, u8), x1: f64) -> f64 {
        let (a1, a2) = (arm.0 as f64, arm.1 as f64);
        if !self.cfg.p2.depends_on_x2(x1) {
            return self.cfg.p2.prob(x1, 0.0, a1, a2);
        }
        let mu = self.cfg.x2.mean(x1, a1);
        let sd = self.cfg.x2.sd;
        self.gh
            .expect(mu, sd, |x2| self.cfg.p2.prob(x1, x2, a1, a2))
    }

    /// m_{mu2}^pi(x1) = E[mu2^pi(x1, X2) | x1, A1 = pi1(x1)], exact via
    /// normal partial moments split at the stage-2 decision threshold.
    pub fn m_mu2_pi(&self, policy: &LinearPolicy, x1: f64) -> f64 {
        let a1 = policy.decide1(&[x1]);
        self.m_mu2_arm1(policy, a1, x1)
    }

    /// Same as [`Self::m_mu2_pi`] with the stage-1 arm pinned.
    pub fn m_mu2_arm1(&self, policy: &LinearPolicy, a1: u8, x1: f64) -> f64 {
        let a1f = a1 as f64;
        let mu = self.cfg.x2.mean(x1, a1f);
        let sd = self.cfg.x2.sd;
        let (s0, s1) = policy.stage2_score_in_x2(&[x1], a1);
        let arm_mean_all = |a2: u8| {
            let (c0, c1, c2) = self.cfg.mu2.in_x2(x1, a1f, a2 as f64);
            c0 + c1 * mu + c2 * (mu + 0.5 * sd * sd).exp()
        };
        if s1 == 0.0 {
            return arm_mean_all(u8::from(s0 > 0.0));
        }
        // Decision is 1 on one side of t = -s0/s1.
        let t = -s0 / s1;
        let treat_upper = s1 > 0.0;
        let piece = |a2: u8, upper: bool| {
            let (c0, c1, c2) = self.cfg.mu2.in_x2(x1, a1f, a2 as f64);
            let (p, m) = math::normal_partial_moments(mu, sd, t, upper);
            let e = if c2 != 0.0 {
                math::normal_exp_partial(mu, sd, t, upper)
            } else {
                0.0
            };
            c0 * p + c1 * m + c2 * e
        };
        piece(1, treat_upper) + piece(0, !treat_upper)
    }

    /// The unnormalized principal-score weight p1^0(x1) · m_{p2}^{00}(x1).
    pub fn weight(&self, x1: f64) -> f64 {
        self.p1(0, x1) * self.m_p2((0, 0), x1)
    }
}

/// [`crate::nuisance::Nuisances`] adapter over the exact data-generating
/// models, optionally bound to a policy for the stage-1 outcome mean.
/// Univariate covariates only (the built-in presets).
pub struct OracleNuisances {
    oracle: DgpOracle,
    policy: Option<LinearPolicy>,
}

impl OracleNuisances {
    pub fn new(cfg: SimConfig, policy: Option<LinearPolicy>) -> Self {
        OracleNuisances {
            oracle: DgpOracle::new(cfg),
            policy,
        }
    }

    pub fn oracle(&self) -> &DgpOracle {
        &self.oracle
    }
}

impl nuisance::Nuisances for OracleNuisances {
    fn e1(&self, a1: u8, x1: &[f64]) -> f64 {
        self.oracle.e1(a1, x1[0])
    }
    fn c1(&self, a1: u8, x1: &[f64]) -> f64 {
        self.oracle.c1(a1, x1[0])
    }
    fn p1(&self, a1: u8, x1: &[f64]) -> f64 {
        self.oracle.p1(a1, x1[0])
    }
    fn e2(&self, arm: (u8, u8), x1: &[f64], x2: &[f64]) -> f64 {
        self.oracle.e2(arm.1, x1[0], x2[0])
    }
    fn c2(&self, arm: (u8, u8), x1: &[f64], x2: &[f64]) -> f64 {
        self.oracle.c2(arm.1, x1[0], x2[0])
    }
    fn p2(&self, arm: (u8, u8), x1: &[f64], x2: &[f64]) -> f64 {
        self.oracle.p2(arm, x1[0], x2[0])
    }
    fn mu2(&self, arm: (u8, u8), x1: &[f64], x2: &[f64]) -> f64 {
        self.oracle.mu2(arm, x1[0], x2[0])
    }
    fn m_p2(&self, arm: (u8, u8), x1: &[f64]) -> f64 {
        self.oracle.m_p2(arm, x1[0])
    }
    fn m_mu2(&self, x1: &[f64]) -> f64 {
        let policy = self
            .policy
            .as_ref()
            .expect("oracle nuisances used without a bound policy");
        self.oracle.m_mu2_pi(policy, x1[0])
    }
    fn m_mu2_available(&self) -> bool {
        self.policy.is_some()
    }
}

/// Always-survivor value of `policy` via the plug-in identification with
/// true nuisance models, averaged over `m` fresh baseline draws.
pub fn true_value(policy: &LinearPolicy, cfg: &SimConfig, m: usize, seed: u64) -> f64 {
    let oracle = DgpOracle::new(*cfg);
    let chunk = 1 << 14;
    let chunks: Vec<(f64, f64)> = (0..m.div_ceil(chunk))
        .into_par_iter()
        .map(|c| {
            let lo = c * chunk;
            let hi = ((c + 1) * chunk).min(m);
            let mut num = 0.0;
            let mut den = 0.0;
            for i in lo..hi {
                let mut r = rng::stream(seed, &[0x77A1, i as u64]);
                let x1 = r.gen_range(cfg.x1_low..cfg.x1_high);
                let w = oracle.weight(x1);
                num += w * oracle.m_mu2_pi(policy, x1);
                den += w;
            }
            (num, den)
        })
        .collect();
    let num = math::sum(&chunks.iter().map(|c| c.0).collect::<Vec<_>>());
    let den = math::sum(&chunks.iter().map(|c| c.1).collect::<Vec<_>>());
    num / den
}

/// Second, independent oracle path: draw the latent potential survival table
/// per subject (shared uniforms across arms), keep the stratum that survives
/// every arm, and average the policy-consistent outcome mean.
///
/// Agrees with [`true_value`] when the configuration's survival
/// probabilities are monotone in treatment, which makes the all-control arm
/// the binding one.
pub fn true_value_rejection(policy: &LinearPolicy, cfg: &SimConfig, m: usize, seed: u64) -> f64 {
    let chunk = 1 << 14;
    let sums: Vec<(f64, f64)> = (0..m.div_ceil(chunk))
        .into_par_iter()
        .map(|c| {
            let lo = c * chunk;
            let hi = ((c + 1) * chunk).min(m);
            let mut total = 0.0;
            let mut kept = 0.0;
            for i in lo..hi {
                let mut r = rng::stream(seed, &[0x11AB, i as u64]);
                let x1 = r.gen_range(cfg.x1_low..cfg.x1_high);
                let u_s1: f64 = r.gen();
                let z = normal_draw(&mut r);
                let u_s2: f64 = r.gen();
                let x2_pot = [
                    cfg.x2.mean(x1, 0.0) + cfg.x2.sd * z,
                    cfg.x2.mean(x1, 1.0) + cfg.x2.sd * z,
                ];
                let mut always = true;
                for a1 in 0..2usize {
                    if u_s1 >= cfg.p1.prob(x1, a1 as f64) {
                        always = false;
                        break;
                    }
                    for a2 in 0..2usize {
                        if u_s2 >= cfg.p2.prob(x1, x2_pot[a1], a1 as f64, a2 as f64) {
                            always = false;
                            break;
                        }
                    }
                    if !always {
                        break;
                    }
                }
                if !always {
                    continue;
                }
                let d1 = policy.decide1(&[x1]);
                let x2 = x2_pot[d1 as usize];
                let d2 = policy.decide2_parts(&[x1], d1, &[x2]);
                total += cfg.mu2.mean(x1, x2, d1 as f64, d2 as f64);
                kept += 1.0;
            }
            (total, kept)
        })
        .collect();
    let total: f64 = sums.iter().map(|s| s.0).sum();
    let kept: f64 = sums.iter().map(|s| s.1).sum();
    total / kept
}

// ---------------------------------------------------------------------------
// Experiment harnesses
// ---------------------------------------------------------------------------

/// Per-replication record emitted by the experiment harnesses.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub replication: usize,
    pub estimator: String,
    pub value: f64,
    pub se: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub covered: Option<bool>,
    pub pcd_as: Option<f64>,
    pub true_value_of_learned: Option<f64>,
}

/// Summary of a replication batch for one (estimator, scenario, n) cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicationSummary {
    pub estimator: String,
    pub scenario: String,
    pub n: usize,
    pub reps: usize,
    pub failures: usize,
    pub truth: f64,
    pub mean: f64,
    pub bias: f64,
    /// Sample SD of the replication values; absent when fewer than 2 values.
    pub empirical_se: Option<f64>,
    /// Share of EIF confidence intervals covering the truth.
    pub coverage: Option<f64>,
    pub mean_pcd_as: Option<f64>,
    pub sd_pcd_as: Option<f64>,
}

fn summarize(
    estimator: &str,
    scenario: &str,
    n: usize,
    truth: f64,
    records: &[ReplicationRecord],
    failures: usize,
) -> ReplicationSummary {
    let values: Vec<f64> = records.iter().map(|r| r.value).collect();
    let mean = math::mean(&values);
    let covered: Vec<f64> = records
        .iter()
        .filter_map(|r| r.covered.map(|c| c as u8 as f64))
        .collect();
    let pcds: Vec<f64> = records.iter().filter_map(|r| r.pcd_as).collect();
    ReplicationSummary {
        estimator: estimator.to_string(),
        scenario: scenario.to_string(),
        n,
        reps: records.len(),
        failures,
        truth,
        mean,
        bias: mean - truth,
        empirical_se: (values.len() >= 2).then(|| math::sample_sd(&values)),
        coverage: (!covered.is_empty()).then(|| math::mean(&covered)),
        mean_pcd_as: (!pcds.is_empty()).then(|| math::mean(&pcds)),
        sd_pcd_as: (pcds.len() >= 2).then(|| math::sample_sd(&pcds)),
    }
}

/// Which estimators the evaluation experiment runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpeEstimator {
    Mr,
    QPlugin,
    Ipw,
}

impl OpeEstimator {
    pub fn label(self) -> &'static str {
        match self {
            OpeEstimator::Mr => "mr",
            OpeEstimator::QPlugin => "q_plugin",
            OpeEstimator::Ipw => "ipw",
        }
    }
}

/// Off-policy evaluation experiment: for each scenario and sample size, run
/// `reps` independent replications of simulate-fit-estimate and summarize
/// bias, spread and CI coverage against the plug-in truth.
#[allow(clippy::too_many_arguments)]
pub fn run_ope_experiment(
    cfg: &SimConfig,
    scenarios: &[(String, ScenarioSpec)],
    n_list: &[usize],
    reps: usize,
    policy: &LinearPolicy,
    estimators_run: &[OpeEstimator],
    trim: TrimConfig,
    truth_m: usize,
    seed: u64,
) -> (Vec<ReplicationSummary>, Vec<ReplicationRecord>) {
    let truth = true_value(policy, cfg, truth_m, rng::derive_key(seed, &[0xA0]));
    let mut summaries = Vec::new();
    let mut all_records = Vec::new();
    for &n in n_list {
        for (label, scenario) in scenarios {
            let cells: Vec<(usize, Result<Vec<ReplicationRecord>>)> = (0..reps)
                .into_par_iter()
                .map(|rep| {
                    let rep_seed = rng::derive_key(seed, &[0x0E, n as u64, scenario_tag(label), rep as u64]);
                    let data = simulate(&cfg.with_n_seed(n, rep_seed));
                    let recs = run_ope_once(&data, cfg, scenario, policy, estimators_run, trim, truth, rep);
                    (rep, recs)
                })
                .collect();
            let mut failures = 0;
            let mut records: Vec<ReplicationRecord> = Vec::new();
            for (_, r) in cells {
                match r {
                    Ok(mut recs) => records.append(&mut recs),
                    Err(_) => failures += 1,
                }
            }
            for est in estimators_run {
                let est_records: Vec<ReplicationRecord> = records
                    .iter()
                    .filter(|r| r.estimator == est.label())
                    .cloned()
                    .collect();
                summaries.push(summarize(est.label(), label, n, truth, &est_records, failures));
            }
            all_records.extend(records);
        }
    }
    (summaries, all_records)
}

fn scenario_tag(label: &str) -> u64 {
    label.bytes().fold(0u64, |acc, b| acc.wrapping_mul(31).wrapping_add(b as u64))
}

fn run_ope_once(
    data: &Dataset,
    cfg: &SimConfig,
    scenario: &ScenarioSpec,
    policy: &LinearPolicy,
    estimators_run: &[OpeEstimator],
    trim: TrimConfig,
    truth: f64,
    rep: usize,
) -> Result<Vec<ReplicationRecord>> {
    let bases = nuisance::NuisanceBases::from_config(cfg);
    let suite = nuisance::fit_suite(
        data,
        &nuisance::SuiteConfig {
            bases,
            scenario: *scenario,
            trim,
            irls: Default::default(),
        },
        Some(policy),
        None,
    )?;
    let mut out = Vec::new();
    for est in estimators_run {
        let report = match est {
            OpeEstimator::Mr => estimators::v_mr(data, policy, &suite)?,
            OpeEstimator::QPlugin => estimators::v_q_plugin(data, policy, &suite, 0, 0)?,
            OpeEstimator::Ipw => estimators::v_ipw(data, policy, &suite, 0, 0)?,
        };
        let covered = report
            .ci_low
            .zip(report.ci_high)
            .map(|(lo, hi)| lo <= truth && truth <= hi);
        out.push(ReplicationRecord {
            replication: rep,
            estimator: est.label().to_string(),
            value: report.value,
            se: report.se,
            ci_low: report.ci_low,
            ci_high: report.ci_high,
            covered,
            pcd_as: None,
            true_value_of_learned: None,
        });
    }
    Ok(out)
}

/// Off-policy learning experiment: learn a policy per replication with each
/// objective, score it by PCD-AS against the true optimal policy, and check
/// EIF interval coverage of the optimal value.
#[allow(clippy::too_many_arguments)]
pub fn run_opl_experiment(
    cfg: &SimConfig,
    n_list: &[usize],
    reps: usize,
    objectives: &[crate::policy::LearnObjective],
    de: &crate::de::DeConfig,
    trim: TrimConfig,
    truth_m: usize,
    seed: u64,
) -> (Vec<ReplicationSummary>, Vec<ReplicationRecord>) {
    let star_seed = rng::derive_key(seed, &[0x57A2]);
    let policy_star = crate::policy::true_optimal_policy(cfg, 100_000, de, star_seed);
    let v_star = true_value(&policy_star, cfg, truth_m, rng::derive_key(seed, &[0xA0]));

    let mut summaries = Vec::new();
    let mut all_records = Vec::new();
    for &n in n_list {
        for objective in objectives {
            let runs: Vec<Result<ReplicationRecord>> = (0..reps)
                .into_par_iter()
                .map(|rep| {
                    let rep_seed =
                        rng::derive_key(seed, &[0x01, n as u64, objective.tag(), rep as u64]);
                    let data = simulate(&cfg.with_n_seed(n, rep_seed));
                    let learned = crate::policy::learn(
                        &data,
                        &nuisance::SuiteConfig {
                            bases: nuisance::NuisanceBases::from_config(cfg),
                            scenario: ScenarioSpec::m1(),
                            trim,
                            irls: Default::default(),
                        },
                        *objective,
                        de,
                        rng::derive_key(rep_seed, &[0xDE]),
                    )?;
                    let pcd = crate::policy::pcd_as(
                        &learned.policy,
                        &policy_star,
                        cfg,
                        100_000,
                        rng::derive_key(seed, &[0x9CD]),
                    );
                    let v_of_learned =
                        true_value(&learned.policy, cfg, truth_m / 10, rng::derive_key(rep_seed, &[0xA1]));
                    let covered = learned
                        .value_report
                        .ci_low
                        .zip(learned.value_report.ci_high)
                        .map(|(lo, hi)| lo <= v_star && v_star <= hi);
                    Ok(ReplicationRecord {
                        replication: rep,
                        estimator: objective.label().to_string(),
                        value: learned.value_report.value,
                        se: learned.value_report.se,
                        ci_low: learned.value_report.ci_low,
                        ci_high: learned.value_report.ci_high,
                        covered,
                        pcd_as: Some(pcd),
                        true_value_of_learned: Some(v_of_learned),
                    })
                })
                .collect();
            let mut failures = 0;
            let mut records = Vec::new();
            for r in runs {
                match r {
                    Ok(rec) => records.push(rec),
                    Err(_) => failures += 1,
                }
            }
            summaries.push(summarize(
                objective.label(),
                "OPL",
                n,
                v_star,
                &records,
                failures,
            ));
            all_records.extend(records);
        }
    }
    (summaries, all_records)
}
