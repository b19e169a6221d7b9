//! Value estimators for the always-survivor estimand: the multiply robust
//! EIF-based estimator, the principal Q-learning plug-in, the weighting
//! estimator, and the death-as-censoring AIPW baseline.
//!
//! Per-trajectory scores are indicator gated: any term multiplied by a zero
//! indicator is skipped before its nuisance evaluations, so absent optional
//! fields are never dereferenced.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::math;
use crate::nuisance::{self, AipwNuisances, FittedSuite, Nuisances, SuiteConfig};
use crate::policy::LinearPolicy;
use crate::rng;
use crate::trajectory::{Dataset, Trajectory};
use crate::Result;

/// Guard on the estimated denominator of ratio estimators.
pub const DENOMINATOR_FLOOR: f64 = 1e-8;

/// Estimator labels used in reports and output files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Mr,
    MrCrossfit,
    QPlugin,
    Ipw,
    Aipw,
    Sensitivity,
    MrGeneralK,
}

/// Point estimate with EIF- or bootstrap-based uncertainty and diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimateReport {
    pub estimator: EstimatorKind,
    pub value: f64,
    pub se: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub n: usize,
    /// Mean of the denominator score (phi_D for the MR estimator, the
    /// self-normalizing weight mean for the plug-in/IPW forms, 1 for AIPW).
    pub mean_phi_d: f64,
    /// Number of probability evaluations clamped by positivity trimming.
    pub trim_count: u64,
    pub warnings: Vec<String>,
}

impl EstimateReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn normal_ci(value: f64, se: f64) -> (f64, f64) {
    (value - 1.96 * se, value + 1.96 * se)
}

// ---------------------------------------------------------------------------
// Per-trajectory scores
// ---------------------------------------------------------------------------

/// Denominator score phi_D: the augmented, telescoping estimate of the
/// always-survivor membership probability, accumulated as weighted
/// increments `(Q_{S,j+1} - Q_{S,j})` exactly like the general-K score.
pub fn phi_d(t: &Trajectory, nuis: &dyn Nuisances) -> f64 {
    let x1 = t.x1();
    let q_s1 = nuis.p1(0, x1) * nuis.m_p2((0, 0), x1);
    let mut out = q_s1;
    if t.a1() == 0 && t.c1() == 0 {
        let inv1 = 1.0 / nuis.phi1(0, x1);
        let survived1 = t.s1() == Some(1);
        let q_s2 = if survived1 {
            let x2 = t.x2().expect("s1 = 1 implies x2 present");
            nuis.p2((0, 0), x1, x2)
        } else {
            0.0
        };
        out += inv1 * (q_s2 - q_s1);
        if survived1 && t.a2() == Some(0) && t.c2() == Some(0) {
            let x2 = t.x2().expect("s1 = 1 implies x2 present");
            let inv2 = inv1 / nuis.phi2((0, 0), x1, x2);
            let survived2 = if t.s2() == Some(1) { 1.0 } else { 0.0 };
            out += inv2 * (survived2 - q_s2);
        }
    }
    out
}

/// Numerator score phi_N for a policy; requires the policy-bound stage-1
/// outcome regression in the suite.
pub fn phi_n(t: &Trajectory, policy: &LinearPolicy, nuis: &dyn Nuisances) -> f64 {
    phi_n_with(t, policy, nuis, phi_d(t, nuis))
}

fn phi_n_with(t: &Trajectory, policy: &LinearPolicy, nuis: &dyn Nuisances, phi_d: f64) -> f64 {
    let x1 = t.x1();
    let q_y1 = nuis.m_mu2(x1);
    let mut out = q_y1 * phi_d;
    let d1 = policy.decide1(x1);
    if t.a1() == d1 && t.c1() == 0 && t.s1() == Some(1) {
        let q_s1 = nuis.p1(0, x1) * nuis.m_p2((0, 0), x1);
        let a1 = t.a1();
        let mut w = 1.0 / (nuis.phi1(a1, x1) * nuis.p1(a1, x1));
        let x2 = t.x2().expect("s1 = 1 implies x2 present");
        let d2 = policy.decide2_parts(x1, a1, x2);
        let q_y2 = nuis.mu2((a1, d2), x1, x2);
        out += w * (q_y2 - q_y1) * q_s1;
        if t.a2() == Some(d2) && t.c2() == Some(0) && t.s2() == Some(1) {
            let arm = (a1, d2);
            w /= nuis.phi2(arm, x1, x2) * nuis.p2(arm, x1, x2);
            let y = t.y().expect("s2 = 1 implies y present");
            out += w * (y - q_y2) * q_s1;
        }
    }
    out
}

/// Self-normalized principal-score weight p1_hat^0(x1) m_p2_hat^00(x1) / denominator.
pub fn principal_score(x1: &[f64], nuis: &dyn Nuisances, denominator: f64) -> Result<f64> {
    if denominator <= DENOMINATOR_FLOOR {
        return Err(Error::NonpositiveDenominator(denominator));
    }
    Ok(nuis.p1(0, x1) * nuis.m_p2((0, 0), x1) / denominator)
}

/// Estimated influence value (phi_N - v_hat · phi_D) / d_hat for one row.
pub fn eif(
    t: &Trajectory,
    policy: &LinearPolicy,
    nuis: &dyn Nuisances,
    v_hat: f64,
    d_hat: f64,
) -> Result<f64> {
    if d_hat <= DENOMINATOR_FLOOR {
        return Err(Error::NonpositiveDenominator(d_hat));
    }
    let pd = phi_d(t, nuis);
    Ok((phi_n_with(t, policy, nuis, pd) - v_hat * pd) / d_hat)
}

/// Variance bound estimate from influence values: Upsilon_hat = mean(psi^2),
/// se = sqrt(Upsilon_hat / n), CI = value ± 1.96 se.
pub fn eif_variance(psi: &[f64], value: f64) -> (f64, (f64, f64)) {
    let n = psi.len();
    assert!(n >= 2, "variance needs at least two observations");
    let sq: Vec<f64> = psi.iter().map(|p| p * p).collect();
    let upsilon = math::mean(&sq);
    let se = (upsilon / n as f64).sqrt();
    (se, normal_ci(value, se))
}

// ---------------------------------------------------------------------------
// MR estimator
// ---------------------------------------------------------------------------

/// Per-row phi scores for a dataset, evaluated in parallel into stable slots.
pub(crate) fn phi_scores(
    d: &Dataset,
    policy: &LinearPolicy,
    nuis: &(dyn Nuisances + Sync),
) -> (Vec<f64>, Vec<f64>) {
    let pairs: Vec<(f64, f64)> = d
        .rows()
        .par_iter()
        .map(|t| {
            let pd = phi_d(t, nuis);
            (pd, phi_n_with(t, policy, nuis, pd))
        })
        .collect();
    (
        pairs.iter().map(|p| p.0).collect(),
        pairs.iter().map(|p| p.1).collect(),
    )
}

/// Multiply robust value estimate with EIF-based standard error.
pub fn v_mr(d: &Dataset, policy: &LinearPolicy, nuis: &(dyn Nuisances + Sync)) -> Result<EstimateReport> {
    let trim_before = nuis.trim_count();
    let (pd, pn) = phi_scores(d, policy, nuis);
    let n = d.len();
    let mean_pd = math::mean(&pd);
    if mean_pd <= DENOMINATOR_FLOOR {
        return Err(Error::NonpositiveDenominator(mean_pd));
    }
    let value = math::mean(&pn) / mean_pd;
    let psi: Vec<f64> = pd
        .iter()
        .zip(&pn)
        .map(|(&pdi, &pni)| (pni - value * pdi) / mean_pd)
        .collect();
    let (se, ci) = eif_variance(&psi, value);
    Ok(EstimateReport {
        estimator: EstimatorKind::Mr,
        value,
        se: Some(se),
        ci_low: Some(ci.0),
        ci_high: Some(ci.1),
        n,
        mean_phi_d: mean_pd,
        trim_count: nuis.trim_count() - trim_before,
        warnings: nuis.fit_warnings(),
    })
}

// ---------------------------------------------------------------------------
// Plug-in (principal Q-learning) estimator
// ---------------------------------------------------------------------------

/// Point value of the plug-in estimator: self-normalized weighted mean of
/// the policy-bound stage-1 outcome regression.
pub fn v_q_plugin_point(
    d: &Dataset,
    nuis: &(dyn Nuisances + Sync),
) -> Result<(f64, f64)> {
    let terms: Vec<(f64, f64)> = d
        .rows()
        .par_iter()
        .map(|t| {
            let x1 = t.x1();
            let w = nuis.p1(0, x1) * nuis.m_p2((0, 0), x1);
            (w * nuis.m_mu2(x1), w)
        })
        .collect();
    let num = math::sum(&terms.iter().map(|t| t.0).collect::<Vec<_>>());
    let den = math::sum(&terms.iter().map(|t| t.1).collect::<Vec<_>>());
    let den_mean = den / d.len() as f64;
    if den_mean <= DENOMINATOR_FLOOR {
        return Err(Error::NonpositiveDenominator(den_mean));
    }
    Ok((num / den, den_mean))
}

/// Plug-in estimator with nonparametric-bootstrap standard error
/// (`bootstrap_b` = 0 skips the bootstrap).
pub fn v_q_plugin(
    d: &Dataset,
    policy: &LinearPolicy,
    suite: &FittedSuite,
    bootstrap_b: usize,
    seed: u64,
) -> Result<EstimateReport> {
    let (value, den_mean) = v_q_plugin_point(d, suite)?;
    let boot = bootstrap_se(d, suite, policy, bootstrap_b, seed, |data, s| {
        v_q_plugin_point(data, s).map(|v| v.0)
    })?;
    Ok(report_with_bootstrap(
        EstimatorKind::QPlugin,
        value,
        den_mean,
        d.len(),
        suite,
        boot,
    ))
}

// ---------------------------------------------------------------------------
// IPW estimator
// ---------------------------------------------------------------------------

/// Point value of the weighting estimator: principal-score times
/// policy-concordant inverse-probability weights, self-normalized.
pub fn v_ipw_point(
    d: &Dataset,
    policy: &LinearPolicy,
    nuis: &(dyn Nuisances + Sync),
) -> Result<(f64, f64)> {
    let terms: Vec<(f64, f64)> = d
        .rows()
        .par_iter()
        .map(|t| {
            let x1 = t.x1();
            let w = nuis.p1(0, x1) * nuis.m_p2((0, 0), x1);
            let d1 = policy.decide1(x1);
            if t.a1() != d1 || t.c1() != 0 || t.s1() != Some(1) {
                return (0.0, 0.0);
            }
            let a1 = t.a1();
            let x2 = t.x2().expect("s1 = 1 implies x2 present");
            let d2 = policy.decide2_parts(x1, a1, x2);
            if t.a2() != Some(d2) || t.c2() != Some(0) || t.s2() != Some(1) {
                return (0.0, 0.0);
            }
            let arm = (a1, d2);
            let g = 1.0
                / (nuis.phi1(a1, x1)
                    * nuis.p1(a1, x1)
                    * nuis.phi2(arm, x1, x2)
                    * nuis.p2(arm, x1, x2));
            let y = t.y().expect("s2 = 1 implies y present");
            (w * g * y, w * g)
        })
        .collect();
    let num = math::sum(&terms.iter().map(|t| t.0).collect::<Vec<_>>());
    let den = math::sum(&terms.iter().map(|t| t.1).collect::<Vec<_>>());
    let den_mean = den / d.len() as f64;
    if den_mean <= DENOMINATOR_FLOOR {
        return Err(Error::NonpositiveDenominator(den_mean));
    }
    Ok((num / den, den_mean))
}

/// IPW estimator with bootstrap standard error.
pub fn v_ipw(
    d: &Dataset,
    policy: &LinearPolicy,
    suite: &FittedSuite,
    bootstrap_b: usize,
    seed: u64,
) -> Result<EstimateReport> {
    let (value, den_mean) = v_ipw_point(d, policy, suite)?;
    let boot = bootstrap_se(d, suite, policy, bootstrap_b, seed, |data, s| {
        v_ipw_point(data, policy, s).map(|v| v.0)
    })?;
    Ok(report_with_bootstrap(
        EstimatorKind::Ipw,
        value,
        den_mean,
        d.len(),
        suite,
        boot,
    ))
}

// ---------------------------------------------------------------------------
// AIPW baseline (death treated as censoring)
// ---------------------------------------------------------------------------

/// Per-row integrand of the death-as-censoring AIPW value.
fn aipw_integrand(t: &Trajectory, policy: &LinearPolicy, suite: &dyn AipwNuisances) -> f64 {
    let x1 = t.x1();
    let d1 = policy.decide1(x1);
    let q1 = suite.q1(x1);
    let mut out = q1;
    // Composite missingness: available after stage k iff uncensored and alive.
    if t.a1() == d1 && t.c1() == 0 && t.s1() == Some(1) {
        let a1 = t.a1();
        let w1 = 1.0 / suite.phi_tilde1(a1, x1);
        let x2 = t.x2().expect("s1 = 1 implies x2 present");
        let d2 = policy.decide2_parts(x1, a1, x2);
        let q2 = suite.q2((a1, d2), x1, x2);
        out += w1 * (q2 - q1);
        if t.a2() == Some(d2) && t.c2() == Some(0) && t.s2() == Some(1) {
            let w2 = 1.0 / suite.phi_tilde2((a1, d2), x1, x2);
            let y = t.y().expect("s2 = 1 implies y present");
            out += w1 * w2 * (y - q2);
        }
    }
    out
}

/// AIPW value estimate: empirical mean of the augmented integrand, with the
/// influence-function standard error of a sample mean.
pub fn v_aipw(d: &Dataset, policy: &LinearPolicy, suite: &dyn AipwNuisances) -> Result<EstimateReport> {
    let trim_before = suite.trim_count();
    let vals: Vec<f64> = d
        .rows()
        .par_iter()
        .map(|t| aipw_integrand(t, policy, suite))
        .collect();
    let n = d.len();
    let value = math::mean(&vals);
    let se = if n >= 2 {
        Some(math::sample_sd(&vals) / (n as f64).sqrt())
    } else {
        None
    };
    let ci = se.map(|s| normal_ci(value, s));
    Ok(EstimateReport {
        estimator: EstimatorKind::Aipw,
        value,
        se,
        ci_low: ci.map(|c| c.0),
        ci_high: ci.map(|c| c.1),
        n,
        mean_phi_d: 1.0,
        trim_count: suite.trim_count() - trim_before,
        warnings: suite.fit_warnings(),
    })
}

// ---------------------------------------------------------------------------
// Bootstrap plumbing
// ---------------------------------------------------------------------------

struct BootstrapOut {
    se: Option<f64>,
    failures: usize,
}

/// Nonparametric bootstrap over whole trajectories: draw multinomial row
/// counts, refit every nuisance with count weights, recompute the estimate.
fn bootstrap_se<F>(
    d: &Dataset,
    suite: &FittedSuite,
    policy: &LinearPolicy,
    b: usize,
    seed: u64,
    point: F,
) -> Result<BootstrapOut>
where
    F: Fn(&Dataset, &FittedSuite) -> Result<f64> + Sync,
{
    if b == 0 {
        return Ok(BootstrapOut {
            se: None,
            failures: 0,
        });
    }
    let n = d.len();
    let cfg = suite.config().clone();
    let draws: Vec<Result<f64>> = (0..b)
        .into_par_iter()
        .map(|bi| {
            let mut r = rng::stream(seed, &[0xB007, bi as u64]);
            let mut counts = vec![0.0f64; n];
            for _ in 0..n {
                use rand::Rng;
                counts[r.gen_range(0..n)] += 1.0;
            }
            let refit = nuisance::fit_suite(d, &cfg, Some(policy), Some(&counts))?;
            point(d, &refit)
        })
        .collect();
    let ok: Vec<f64> = draws.iter().filter_map(|r| r.as_ref().ok().copied()).collect();
    let failures = b - ok.len();
    if ok.len() < b / 2 {
        return Err(Error::InvalidDataset(format!(
            "bootstrap failed in {failures} of {b} resamples"
        )));
    }
    Ok(BootstrapOut {
        se: Some(math::sample_sd(&ok)),
        failures,
    })
}

fn report_with_bootstrap(
    estimator: EstimatorKind,
    value: f64,
    mean_phi_d: f64,
    n: usize,
    suite: &FittedSuite,
    boot: BootstrapOut,
) -> EstimateReport {
    let ci = boot.se.map(|s| normal_ci(value, s));
    let mut warnings = suite.fit_warnings();
    if boot.failures > 0 {
        warnings.push(format!("{} bootstrap resamples failed", boot.failures));
    }
    EstimateReport {
        estimator,
        value,
        se: boot.se,
        ci_low: ci.map(|c| c.0),
        ci_high: ci.map(|c| c.1),
        n,
        mean_phi_d,
        trim_count: 0,
        warnings,
    }
}

// ---------------------------------------------------------------------------
// Cached objective engines for policy search
// ---------------------------------------------------------------------------

/// Policy-free caches for fast repeated MR evaluation: everything except the
/// stage-1 outcome regression is computed once; per candidate we refit that
/// regression on the policy-concordant stratum and re-run the value pass.
pub struct PreparedMr {
    n: usize,
    mean_phi_d: f64,
    q_s1: Vec<f64>,
    phi_d: Vec<f64>,
    /// 1/(phi1 p1) at the realized stage-1 arm, for rows alive and
    /// uncensored after stage 1.
    w1: Vec<f64>,
    /// phi2 * p2 at (realized a1, a2') for a2' in {0, 1}.
    den2: Vec<Option<[f64; 2]>>,
    /// mu2((a1, a2'), x) for a2' in {0, 1}, clipped.
    mu2_at: Vec<Option<[f64; 2]>>,
    /// Stage-1 regression basis rows and dimension.
    m_rows: Vec<Vec<f64>>,
    m_dim: usize,
    x1s: Vec<Vec<f64>>,
    h2: Vec<Option<(u8, Vec<f64>)>>, // (realized a1, x2)
    a1: Vec<u8>,
    alive1: Vec<bool>,
    concord2_data: Vec<Option<(u8, u8, f64)>>, // (a2, c2==0&&s2==1 as gate via Option, y)
}

impl PreparedMr {
    pub fn fit(d: &Dataset, cfg: &SuiteConfig) -> Result<Self> {
        let suite = nuisance::fit_suite(d, cfg, None, None)?;
        let n = d.len();
        let m_basis = nuisance::m_mean_basis(d, cfg, None)?;
        let mut q_s1 = Vec::with_capacity(n);
        let mut phi_dv = Vec::with_capacity(n);
        let mut w1 = Vec::with_capacity(n);
        let mut den2 = Vec::with_capacity(n);
        let mut mu2_at = Vec::with_capacity(n);
        let mut m_rows = Vec::with_capacity(n);
        let mut x1s = Vec::with_capacity(n);
        let mut h2 = Vec::with_capacity(n);
        let mut a1v = Vec::with_capacity(n);
        let mut alive1 = Vec::with_capacity(n);
        let mut concord2 = Vec::with_capacity(n);
        for t in d.rows() {
            let x1 = t.x1();
            q_s1.push(suite.p1(0, x1) * suite.m_p2((0, 0), x1));
            phi_dv.push(phi_d(t, &suite));
            let mut row = Vec::new();
            m_basis.eval(x1, &mut row);
            m_rows.push(row);
            x1s.push(x1.to_vec());
            a1v.push(t.a1());
            let alive = t.c1() == 0 && t.s1() == Some(1);
            alive1.push(alive);
            if alive {
                let a1 = t.a1();
                w1.push(1.0 / (suite.phi1(a1, x1) * suite.p1(a1, x1)));
                let x2 = t.x2().unwrap();
                let mk = |a2: u8| {
                    (
                        suite.phi2((a1, a2), x1, x2) * suite.p2((a1, a2), x1, x2),
                        suite.mu2((a1, a2), x1, x2),
                    )
                };
                let (den0, m0) = mk(0);
                let (den1, m1) = mk(1);
                den2.push(Some([den0, den1]));
                mu2_at.push(Some([m0, m1]));
                h2.push(Some((a1, x2.to_vec())));
                if t.c2() == Some(0) && t.s2() == Some(1) {
                    concord2.push(Some((t.a2().unwrap(), 1, t.y().unwrap())));
                } else {
                    concord2.push(t.a2().map(|a2| (a2, 0, 0.0)));
                }
            } else {
                w1.push(0.0);
                den2.push(None);
                mu2_at.push(None);
                h2.push(None);
                concord2.push(None);
            }
        }
        let mean_phi_d = math::mean(&phi_dv);
        if mean_phi_d <= DENOMINATOR_FLOOR {
            return Err(Error::NonpositiveDenominator(mean_phi_d));
        }
        Ok(PreparedMr {
            n,
            mean_phi_d,
            q_s1,
            phi_d: phi_dv,
            w1,
            den2,
            mu2_at,
            m_dim: m_rows[0].len(),
            m_rows,
            x1s,
            h2,
            a1: a1v,
            alive1,
            concord2_data: concord2,
        })
    }

    /// MR value of `policy`, refitting only the policy-dependent stage-1
    /// regression. Errors when the concordant stratum cannot support it.
    pub fn value(&self, policy: &LinearPolicy) -> Result<f64> {
        let k = self.m_dim;
        let mut xtx = nalgebra::DMatrix::<f64>::zeros(k, k);
        let mut xty = nalgebra::DVector::<f64>::zeros(k);
        let mut count = 0usize;
        let mut d1s = vec![0u8; self.n];
        let mut d2s = vec![0u8; self.n];
        for i in 0..self.n {
            d1s[i] = policy.decide1(&self.x1s[i]);
            if !self.alive1[i] || self.a1[i] != d1s[i] {
                continue;
            }
            let (a1, x2) = self.h2[i].as_ref().unwrap();
            let d2 = policy.decide2_parts(&self.x1s[i], *a1, x2);
            d2s[i] = d2;
            let target = self.mu2_at[i].unwrap()[d2 as usize];
            let row = &self.m_rows[i];
            for a in 0..k {
                xty[a] += row[a] * target;
                for b in a..k {
                    xtx[(a, b)] += row[a] * row[b];
                }
            }
            count += 1;
        }
        if count < k {
            return Err(Error::EmptyStratum(format!(
                "policy-concordant stage-1 stratum has {count} rows for {k} basis columns"
            )));
        }
        for a in 0..k {
            for b in 0..a {
                xtx[(a, b)] = xtx[(b, a)];
            }
        }
        let coef = match xtx.clone().cholesky() {
            Some(ch) => ch.solve(&xty),
            None => {
                for a in 0..k {
                    xtx[(a, a)] += 1e-10;
                }
                xtx.cholesky()
                    .ok_or_else(|| Error::DegenerateDesign("stage-1 refit".into()))?
                    .solve(&xty)
            }
        };

        let mut pn_sum = 0.0;
        for i in 0..self.n {
            let q_y1: f64 = self.m_rows[i]
                .iter()
                .zip(coef.iter())
                .map(|(a, b)| a * b)
                .sum();
            let mut pn = q_y1 * self.phi_d[i];
            if self.alive1[i] && self.a1[i] == d1s[i] {
                let d2 = d2s[i];
                let q_y2 = self.mu2_at[i].unwrap()[d2 as usize];
                pn += self.w1[i] * (q_y2 - q_y1) * self.q_s1[i];
                if let Some((a2, alive2, y)) = self.concord2_data[i] {
                    if a2 == d2 && alive2 == 1 {
                        let w12 = self.w1[i] / self.den2[i].unwrap()[d2 as usize];
                        pn += w12 * (y - q_y2) * self.q_s1[i];
                    }
                }
            }
            pn_sum += pn;
        }
        Ok(pn_sum / self.n as f64 / self.mean_phi_d)
    }
}

/// Policy-free caches for fast repeated AIPW evaluation.
pub struct PreparedAipw {
    n: usize,
    w1: Vec<f64>,
    w2: Vec<Option<[f64; 2]>>,
    q2_at: Vec<Option<[f64; 2]>>,
    m_rows: Vec<Vec<f64>>,
    m_dim: usize,
    x1s: Vec<Vec<f64>>,
    h2: Vec<Option<(u8, Vec<f64>)>>,
    a1: Vec<u8>,
    alive1: Vec<bool>,
    concord2_data: Vec<Option<(u8, u8, f64)>>,
}

impl PreparedAipw {
    pub fn fit(d: &Dataset, cfg: &SuiteConfig) -> Result<Self> {
        let suite = nuisance::fit_aipw_suite_policy_free(d, cfg, None)?;
        let n = d.len();
        let m_basis = nuisance::m_mean_basis(d, cfg, None)?;
        let mut w1 = Vec::with_capacity(n);
        let mut w2 = Vec::with_capacity(n);
        let mut q2_at = Vec::with_capacity(n);
        let mut m_rows = Vec::with_capacity(n);
        let mut x1s = Vec::with_capacity(n);
        let mut h2 = Vec::with_capacity(n);
        let mut a1v = Vec::with_capacity(n);
        let mut alive1 = Vec::with_capacity(n);
        let mut concord2 = Vec::with_capacity(n);
        for t in d.rows() {
            let x1 = t.x1();
            let mut row = Vec::new();
            m_basis.eval(x1, &mut row);
            m_rows.push(row);
            x1s.push(x1.to_vec());
            a1v.push(t.a1());
            let alive = t.c1() == 0 && t.s1() == Some(1);
            alive1.push(alive);
            if alive {
                let a1 = t.a1();
                w1.push(1.0 / suite.phi_tilde1(a1, x1));
                let x2 = t.x2().unwrap();
                w2.push(Some([
                    1.0 / suite.phi_tilde2((a1, 0), x1, x2),
                    1.0 / suite.phi_tilde2((a1, 1), x1, x2),
                ]));
                q2_at.push(Some([suite.q2((a1, 0), x1, x2), suite.q2((a1, 1), x1, x2)]));
                h2.push(Some((a1, x2.to_vec())));
                if t.c2() == Some(0) && t.s2() == Some(1) {
                    concord2.push(Some((t.a2().unwrap(), 1, t.y().unwrap())));
                } else {
                    concord2.push(t.a2().map(|a2| (a2, 0, 0.0)));
                }
            } else {
                w1.push(0.0);
                w2.push(None);
                q2_at.push(None);
                h2.push(None);
                concord2.push(None);
            }
        }
        Ok(PreparedAipw {
            n,
            w1,
            w2,
            q2_at,
            m_dim: m_rows[0].len(),
            m_rows,
            x1s,
            h2,
            a1: a1v,
            alive1,
            concord2_data: concord2,
        })
    }

    pub fn value(&self, policy: &LinearPolicy) -> Result<f64> {
        let k = self.m_dim;
        let mut xtx = nalgebra::DMatrix::<f64>::zeros(k, k);
        let mut xty = nalgebra::DVector::<f64>::zeros(k);
        let mut count = 0usize;
        let mut d1s = vec![0u8; self.n];
        let mut d2s = vec![0u8; self.n];
        for i in 0..self.n {
            d1s[i] = policy.decide1(&self.x1s[i]);
            if !self.alive1[i] || self.a1[i] != d1s[i] {
                continue;
            }
            let (a1, x2) = self.h2[i].as_ref().unwrap();
            let d2 = policy.decide2_parts(&self.x1s[i], *a1, x2);
            d2s[i] = d2;
            let target = self.q2_at[i].unwrap()[d2 as usize];
            let row = &self.m_rows[i];
            for a in 0..k {
                xty[a] += row[a] * target;
                for b in a..k {
                    xtx[(a, b)] += row[a] * row[b];
                }
            }
            count += 1;
        }
        if count < k {
            return Err(Error::EmptyStratum(format!(
                "policy-concordant stratum has {count} rows for {k} basis columns"
            )));
        }
        for a in 0..k {
            for b in 0..a {
                xtx[(a, b)] = xtx[(b, a)];
            }
        }
        let coef = match xtx.clone().cholesky() {
            Some(ch) => ch.solve(&xty),
            None => {
                for a in 0..k {
                    xtx[(a, a)] += 1e-10;
                }
                xtx.cholesky()
                    .ok_or_else(|| Error::DegenerateDesign("q1 refit".into()))?
                    .solve(&xty)
            }
        };

        let mut total = 0.0;
        for i in 0..self.n {
            let q1: f64 = self.m_rows[i]
                .iter()
                .zip(coef.iter())
                .map(|(a, b)| a * b)
                .sum();
            let mut v = q1;
            if self.alive1[i] && self.a1[i] == d1s[i] {
                let d2 = d2s[i];
                let q2 = self.q2_at[i].unwrap()[d2 as usize];
                v += self.w1[i] * (q2 - q1);
                if let Some((a2, alive2, y)) = self.concord2_data[i] {
                    if a2 == d2 && alive2 == 1 {
                        v += self.w1[i] * self.w2[i].unwrap()[d2 as usize] * (y - q2);
                    }
                }
            }
            total += v;
        }
        Ok(total / self.n as f64)
    }
}
