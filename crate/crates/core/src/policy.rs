//! Linear threshold policies, value-search learning by differential
//! evolution, and percentage-of-correct-decisions scoring against the true
//! optimal policy.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::de::{self, DeConfig};
use crate::error::Error;
use crate::estimators::{self, EstimateReport};
use crate::math::{self, normal_cdf};
use crate::nuisance::{self, SuiteConfig};
use crate::rng;
use crate::simulation::{DgpOracle, SimConfig};
use crate::trajectory::Dataset;
use crate::Result;

/// Which covariates feed the stage-2 decision rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Stage2Features {
    /// (x1, a1, x2) — the full stage-2 history.
    #[default]
    X1A1X2,
    /// (x1, x2).
    X1X2,
    /// (x2) only.
    X2,
}

impl Stage2Features {
    pub fn dim(&self, p1: usize, p2: usize) -> usize {
        match self {
            Stage2Features::X1A1X2 => p1 + 1 + p2,
            Stage2Features::X1X2 => p1 + p2,
            Stage2Features::X2 => p2,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        match parts.as_slice() {
            ["x1", "a1", "x2"] => Ok(Stage2Features::X1A1X2),
            ["x1", "x2"] => Ok(Stage2Features::X1X2),
            ["x2"] => Ok(Stage2Features::X2),
            _ => Err(Error::InvalidConfig(format!(
                "unsupported stage-2 feature map `{s}` (expected \"x1,a1,x2\", \"x1,x2\" or \"x2\")"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Stage2Features::X1A1X2 => "x1,a1,x2",
            Stage2Features::X1X2 => "x1,x2",
            Stage2Features::X2 => "x2",
        }
    }
}

/// A deterministic two-stage linear threshold policy. Stage k treats iff
/// (1, h_k)·beta_k > 0. Coefficient vectors are stored normalized to unit
/// Euclidean norm; the decision rule is invariant to positive rescaling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PolicyFile", into = "PolicyFile")]
pub struct LinearPolicy {
    beta1: Vec<f64>,
    beta2: Vec<f64>,
    stage2_features: Stage2Features,
}

/// Serialized form: `{"beta1": [...], "beta2": [...], "feature_map_2": "x1,a1,x2"}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyFile {
    pub beta1: Vec<f64>,
    pub beta2: Vec<f64>,
    #[serde(default = "default_fmap")]
    pub feature_map_2: String,
}

fn default_fmap() -> String {
    "x1,a1,x2".to_string()
}

impl TryFrom<PolicyFile> for LinearPolicy {
    type Error = Error;
    fn try_from(f: PolicyFile) -> Result<Self> {
        LinearPolicy::with_features(f.beta1, f.beta2, Stage2Features::parse(&f.feature_map_2)?)
    }
}

impl From<LinearPolicy> for PolicyFile {
    fn from(p: LinearPolicy) -> Self {
        PolicyFile {
            beta1: p.beta1,
            beta2: p.beta2,
            feature_map_2: p.stage2_features.as_str().to_string(),
        }
    }
}

impl LinearPolicy {
    pub fn new(beta1: Vec<f64>, beta2: Vec<f64>) -> Result<Self> {
        Self::with_features(beta1, beta2, Stage2Features::default())
    }

    pub fn with_features(
        beta1: Vec<f64>,
        beta2: Vec<f64>,
        stage2_features: Stage2Features,
    ) -> Result<Self> {
        let beta1 = normalize(beta1)?;
        let beta2 = normalize(beta2)?;
        Ok(LinearPolicy {
            beta1,
            beta2,
            stage2_features,
        })
    }

    pub fn beta1(&self) -> &[f64] {
        &self.beta1
    }
    pub fn beta2(&self) -> &[f64] {
        &self.beta2
    }
    pub fn stage2_features(&self) -> Stage2Features {
        self.stage2_features
    }

    /// Stage-1 decision: 1 iff beta1 · (1, x1) > 0 (strict).
    #[inline]
    pub fn decide1(&self, x1: &[f64]) -> u8 {
        debug_assert_eq!(self.beta1.len(), x1.len() + 1);
        let mut s = self.beta1[0];
        for (b, v) in self.beta1[1..].iter().zip(x1) {
            s += b * v;
        }
        u8::from(s > 0.0)
    }

    /// Stage-2 decision from the parts of the history.
    #[inline]
    pub fn decide2_parts(&self, x1: &[f64], a1: u8, x2: &[f64]) -> u8 {
        let mut s = self.beta2[0];
        let mut it = self.beta2[1..].iter();
        match self.stage2_features {
            Stage2Features::X1A1X2 => {
                for v in x1 {
                    s += it.next().unwrap() * v;
                }
                s += it.next().unwrap() * a1 as f64;
                for v in x2 {
                    s += it.next().unwrap() * v;
                }
            }
            Stage2Features::X1X2 => {
                for v in x1 {
                    s += it.next().unwrap() * v;
                }
                for v in x2 {
                    s += it.next().unwrap() * v;
                }
            }
            Stage2Features::X2 => {
                for v in x2 {
                    s += it.next().unwrap() * v;
                }
            }
        }
        u8::from(s > 0.0)
    }

    /// Dimension-checked decision at either stage. Stage 2 takes the
    /// concatenated history (x1..., a1, x2...).
    pub fn decide(&self, stage: u8, history: &[f64]) -> Result<u8> {
        match stage {
            1 => {
                if history.len() + 1 != self.beta1.len() {
                    return Err(Error::DimensionMismatch {
                        expected: self.beta1.len() - 1,
                        actual: history.len(),
                    });
                }
                Ok(self.decide1(history))
            }
            2 => {
                if history.len() + 1 != self.beta2.len() {
                    return Err(Error::DimensionMismatch {
                        expected: self.beta2.len() - 1,
                        actual: history.len(),
                    });
                }
                let mut s = self.beta2[0];
                for (b, v) in self.beta2[1..].iter().zip(history) {
                    s += b * v;
                }
                Ok(u8::from(s > 0.0))
            }
            other => Err(Error::InvalidConfig(format!("stage must be 1 or 2, got {other}"))),
        }
    }

    /// Stage-2 score at scalar covariates written as s0 + s1·x2
    /// (used by closed-form oracles; requires p1 = p2 = 1).
    pub fn stage2_score_in_x2(&self, x1: &[f64], a1: u8) -> (f64, f64) {
        match self.stage2_features {
            Stage2Features::X1A1X2 => {
                let mut s0 = self.beta2[0];
                for (b, v) in self.beta2[1..1 + x1.len()].iter().zip(x1) {
                    s0 += b * v;
                }
                s0 += self.beta2[1 + x1.len()] * a1 as f64;
                (s0, self.beta2[2 + x1.len()])
            }
            Stage2Features::X1X2 => {
                let mut s0 = self.beta2[0];
                for (b, v) in self.beta2[1..1 + x1.len()].iter().zip(x1) {
                    s0 += b * v;
                }
                (s0, self.beta2[1 + x1.len()])
            }
            Stage2Features::X2 => (self.beta2[0], self.beta2[1]),
        }
    }
}

fn normalize(mut beta: Vec<f64>) -> Result<Vec<f64>> {
    if beta.is_empty() {
        return Err(Error::InvalidConfig("empty policy coefficient vector".into()));
    }
    let norm = beta.iter().map(|b| b * b).sum::<f64>().sqrt();
    if !norm.is_finite() || norm < 1e-12 {
        return Err(Error::InvalidConfig(
            "policy coefficients must have positive finite norm".into(),
        ));
    }
    for b in &mut beta {
        *b /= norm;
    }
    Ok(beta)
}

/// Objective used by [`learn`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnObjective {
    Mr,
    Aipw,
}

impl LearnObjective {
    pub fn label(self) -> &'static str {
        match self {
            LearnObjective::Mr => "mr",
            LearnObjective::Aipw => "aipw",
        }
    }
    pub(crate) fn tag(self) -> u64 {
        match self {
            LearnObjective::Mr => 1,
            LearnObjective::Aipw => 2,
        }
    }
}

/// Result of a policy search.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LearnResult {
    pub policy: LinearPolicy,
    pub value_report: EstimateReport,
    /// Best objective value per generation (including the initial one).
    pub optimizer_trace: Vec<f64>,
    pub evaluations: usize,
    /// Set when the search stopped on the stagnation rule.
    pub stalled: bool,
}

/// Learn an always-survivor-optimal linear policy by maximizing the chosen
/// value estimator over per-stage unit spheres with differential evolution.
///
/// Policy-free nuisances are fitted once; each candidate evaluation refits
/// only the policy-dependent stage-1 regression and re-runs the value pass.
pub fn learn(
    data: &Dataset,
    cfg: &SuiteConfig,
    objective: LearnObjective,
    de_cfg: &DeConfig,
    seed: u64,
) -> Result<LearnResult> {
    let dim1 = data.p1() + 1;
    let dim2 = Stage2Features::default().dim(data.p1(), data.p2()) + 1;
    let dim = dim1 + dim2;

    let policy_of = move |v: &[f64]| -> Result<LinearPolicy> {
        LinearPolicy::new(v[..dim1].to_vec(), v[dim1..].to_vec())
    };

    match objective {
        LearnObjective::Mr => {
            let prepared = estimators::PreparedMr::fit(data, cfg)?;
            let obj = |v: &[f64]| match policy_of(v) {
                Ok(p) => prepared.value(&p).unwrap_or(f64::NEG_INFINITY),
                Err(_) => f64::NEG_INFINITY,
            };
            let out = de::maximize(dim, &obj, de_cfg, seed);
            let policy = policy_of(&out.best)?;
            let suite = nuisance::fit_suite(data, cfg, Some(&policy), None)?;
            let value_report = estimators::v_mr(data, &policy, &suite)?;
            Ok(LearnResult {
                policy,
                value_report,
                optimizer_trace: out.trace,
                evaluations: out.evaluations,
                stalled: out.stalled,
            })
        }
        LearnObjective::Aipw => {
            let prepared = estimators::PreparedAipw::fit(data, cfg)?;
            let obj = |v: &[f64]| match policy_of(v) {
                Ok(p) => prepared.value(&p).unwrap_or(f64::NEG_INFINITY),
                Err(_) => f64::NEG_INFINITY,
            };
            let out = de::maximize(dim, &obj, de_cfg, seed);
            let policy = policy_of(&out.best)?;
            let aipw = nuisance::fit_aipw_suite(data, cfg, &policy, None)?;
            let value_report = estimators::v_aipw(data, &policy, &aipw)?;
            Ok(LearnResult {
                policy,
                value_report,
                optimizer_trace: out.trace,
                evaluations: out.evaluations,
                stalled: out.stalled,
            })
        }
    }
}

/// True optimal linear policy: maximize the plug-in identification with
/// exact nuisances over an `m`-point baseline sample.
pub fn true_optimal_policy(
    cfg: &SimConfig,
    m: usize,
    de_cfg: &DeConfig,
    seed: u64,
) -> LinearPolicy {
    let oracle = DgpOracle::new(*cfg);
    let mut r = rng::stream(seed, &[0x0B57]);
    let x1s: Vec<f64> = (0..m).map(|_| r.gen_range(cfg.x1_low..cfg.x1_high)).collect();
    let weights: Vec<f64> = x1s.iter().map(|&x| oracle.weight(x)).collect();
    let wsum = math::sum(&weights);

    let dim1 = 2;
    let dim2 = 4;
    let obj = |v: &[f64]| {
        let policy = match LinearPolicy::new(v[..dim1].to_vec(), v[dim1..].to_vec()) {
            Ok(p) => p,
            Err(_) => return f64::NEG_INFINITY,
        };
        let terms: Vec<f64> = x1s
            .iter()
            .zip(&weights)
            .map(|(&x1, &w)| w * oracle.m_mu2_pi(&policy, x1))
            .collect();
        math::sum(&terms) / wsum
    };
    let out = de::maximize(dim1 + dim2, &obj, de_cfg, seed);
    LinearPolicy::new(out.best[..dim1].to_vec(), out.best[dim1..].to_vec())
        .expect("optimizer produced a normalizable vector")
}

/// Percentage of correct decisions among always-survivors: the
/// principal-score-weighted probability that `policy_hat` and `policy_star`
/// agree on both stages, with the stage-2 agreement probability computed in
/// closed form over the true intermediate-covariate distribution.
pub fn pcd_as(
    policy_hat: &LinearPolicy,
    policy_star: &LinearPolicy,
    cfg: &SimConfig,
    m: usize,
    seed: u64,
) -> f64 {
    let oracle = DgpOracle::new(*cfg);
    let mut r = rng::stream(seed, &[0x9CDA]);
    let mut num = 0.0;
    let mut den = 0.0;
    for _ in 0..m {
        let x1 = r.gen_range(cfg.x1_low..cfg.x1_high);
        let w = oracle.weight(x1);
        den += w;
        let d1_hat = policy_hat.decide1(&[x1]);
        let d1_star = policy_star.decide1(&[x1]);
        if d1_hat != d1_star {
            continue;
        }
        let a1 = d1_hat;
        let mu = cfg.x2.mean(x1, a1 as f64);
        let sd = cfg.x2.sd;
        let (h0, h1) = policy_hat.stage2_score_in_x2(&[x1], a1);
        let (s0, s1) = policy_star.stage2_score_in_x2(&[x1], a1);
        num += w * stage2_agreement(mu, sd, h0, h1, s0, s1);
    }
    num / den
}

/// P(sign(h0 + h1 X) agrees with sign(s0 + s1 X)) for X ~ N(mu, sd^2),
/// where "decision" means strict positivity of the score.
fn stage2_agreement(mu: f64, sd: f64, h0: f64, h1: f64, s0: f64, s1: f64) -> f64 {
    let decide_prob = |c0: f64, c1: f64| -> Option<f64> {
        // P(decision = 1). None encodes a constant decision.
        if c1 == 0.0 {
            None
        } else {
            let t = -c0 / c1;
            let z = (t - mu) / sd;
            Some(if c1 > 0.0 {
                1.0 - normal_cdf(z)
            } else {
                normal_cdf(z)
            })
        }
    };
    match (decide_prob(h0, h1), decide_prob(s0, s1)) {
        (None, None) => f64::from(u8::from(h0 > 0.0) == u8::from(s0 > 0.0)),
        (None, Some(p_star)) => {
            if h0 > 0.0 {
                p_star
            } else {
                1.0 - p_star
            }
        }
        (Some(p_hat), None) => {
            if s0 > 0.0 {
                p_hat
            } else {
                1.0 - p_hat
            }
        }
        (Some(_), Some(_)) => {
            let t_hat = -h0 / h1;
            let t_star = -s0 / s1;
            let z = |t: f64| normal_cdf((t - mu) / sd);
            if h1.signum() == s1.signum() {
                1.0 - (z(t_hat) - z(t_star)).abs()
            } else {
                (z(t_hat) - z(t_star)).abs()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn decide_boundary_is_zero() {
        // Score exactly 0 -> decision 0 (strict inequality).
        let p = LinearPolicy::new(vec![0.0, 1.0], vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(p.decide1(&[0.0]), 0);
        assert_eq!(p.decide1(&[0.5]), 1);
        assert_eq!(p.decide1(&[-0.5]), 0);
    }

    #[test]
    fn decide_arithmetic() {
        let p = LinearPolicy::new(vec![0.5, -1.0], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        // score = 0.5 - 0.2 = 0.3 > 0 (normalization preserves sign)
        assert_eq!(p.decide1(&[0.2]), 1);
        assert_eq!(p.decide1(&[0.6]), 0);
    }

    #[test]
    fn decisions_invariant_to_positive_rescaling() {
        let p = LinearPolicy::new(vec![0.5, -1.0], vec![0.3, 0.2, -0.4, 0.9]).unwrap();
        let q = LinearPolicy::new(
            vec![0.5 * 7.0, -7.0],
            vec![0.3 * 7.0, 0.2 * 7.0, -0.4 * 7.0, 0.9 * 7.0],
        )
        .unwrap();
        for i in 0..100 {
            let x1 = -1.0 + 0.02 * i as f64;
            assert_eq!(p.decide1(&[x1]), q.decide1(&[x1]));
            for a1 in 0..2u8 {
                let x2 = 0.4 * x1 - 0.3;
                assert_eq!(
                    p.decide2_parts(&[x1], a1, &[x2]),
                    q.decide2_parts(&[x1], a1, &[x2])
                );
            }
        }
    }

    #[test]
    fn decide_dimension_mismatch_is_reported() {
        let p = LinearPolicy::new(vec![0.0, 1.0], vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            p.decide(1, &[0.1, 0.2]),
            Err(Error::DimensionMismatch { expected: 1, actual: 2 })
        ));
        assert!(p.decide(2, &[0.1, 1.0, 0.3]).is_ok());
    }

    #[test]
    fn pcd_of_identical_policies_is_one() {
        let cfg = SimConfig::dgp1(0, 0);
        let p = LinearPolicy::new(vec![0.2, 0.8], vec![0.1, -0.5, 0.2, 0.7]).unwrap();
        let v = pcd_as(&p, &p, &cfg, 20_000, 5);
        assert_abs_diff_eq!(v, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn pcd_detects_stage1_flip() {
        let cfg = SimConfig::dgp1(0, 0);
        let p = LinearPolicy::new(vec![0.2, 0.8], vec![0.1, -0.5, 0.2, 0.7]).unwrap();
        let flipped = LinearPolicy::new(vec![-0.2, -0.8], vec![0.1, -0.5, 0.2, 0.7]).unwrap();
        let v = pcd_as(&flipped, &p, &cfg, 20_000, 5);
        assert!(v < 0.2, "flipping stage 1 everywhere should tank PCD, got {v}");
    }

    #[test]
    fn stage2_agreement_matches_monte_carlo() {
        let (mu, sd) = (0.4, 1.2);
        let cases = [
            (0.3, 1.0, -0.2, 0.8),
            (0.3, 1.0, -0.2, -0.8),
            (0.3, 0.0, -0.2, 0.8),
            (0.3, 0.0, -0.2, 0.0),
        ];
        for (h0, h1, s0, s1) in cases {
            let exact = stage2_agreement(mu, sd, h0, h1, s0, s1);
            let mut r = crate::rng::stream(42, &[7]);
            let mut agree = 0.0;
            let n = 200_000;
            for _ in 0..n {
                let u1: f64 = r.gen::<f64>().max(1e-300);
                let u2: f64 = r.gen();
                let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                let x = mu + sd * z;
                let d_h = u8::from(h0 + h1 * x > 0.0);
                let d_s = u8::from(s0 + s1 * x > 0.0);
                agree += f64::from(d_h == d_s);
            }
            assert_abs_diff_eq!(exact, agree / n as f64, epsilon = 5e-3);
        }
    }
}
