//! Sensitivity analysis for departures from principal ignorability: tilted
//! stratum weights and the adjusted plug-in value.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::estimators::{EstimateReport, EstimatorKind, DENOMINATOR_FLOOR};
use crate::math;
use crate::nuisance::{self, FittedSuite, Nuisances};
use crate::policy::LinearPolicy;
use crate::regression::MeanModel;
use crate::rng;
use crate::trajectory::Dataset;
use crate::Result;

/// Tilting ratios, either one shared constant or one constant per stratum
/// term as they appear in the weight formulas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rho {
    Constant(f64),
    PerStratum {
        w01_0101: f64,
        w01_0111: f64,
        w10_011: f64,
        w10_0111: f64,
        w11_0101: f64,
        w11_0011: f64,
        w11_0001: f64,
    },
}

impl Rho {
    fn spread(self) -> [f64; 7] {
        match self {
            Rho::Constant(r) => [r; 7],
            Rho::PerStratum {
                w01_0101,
                w01_0111,
                w10_011,
                w10_0111,
                w11_0101,
                w11_0011,
                w11_0001,
            } => [
                w01_0101, w01_0111, w10_011, w10_0111, w11_0101, w11_0011, w11_0001,
            ],
        }
    }
}

/// Stratum-probability offset lambda(x1): a constant, or the null function
/// m_p2_hat^00(x1) - m_p2_hat^01(x1) under which omega_11 collapses to one
/// at rho = 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lambda {
    Constant(f64),
    NullFn,
}

/// Sensitivity parameters (rho, lambda).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivityParams {
    pub rho: Rho,
    pub lambda: Lambda,
}

impl SensitivityParams {
    pub fn new(rho: f64, lambda: Lambda) -> Self {
        SensitivityParams {
            rho: Rho::Constant(rho),
            lambda,
        }
    }
}

/// The tilted stratum weights (omega_01, omega_10, omega_11) at a baseline
/// point. All four stage-1 conditional survival means must be fitted.
/// omega_00 is identically one and not returned.
pub fn omega_weights(
    x1: &[f64],
    nuis: &dyn Nuisances,
    params: &SensitivityParams,
) -> Result<[f64; 3]> {
    let m00 = nuis.m_p2((0, 0), x1);
    let m01 = nuis.m_p2((0, 1), x1);
    let m10 = nuis.m_p2((1, 0), x1);
    let m11 = nuis.m_p2((1, 1), x1);
    let lambda = match params.lambda {
        Lambda::Constant(l) => l,
        Lambda::NullFn => m00 - m01,
    };

    // Algebraic collapse at rho = 1: the tilting terms telescope, so the
    // weights are exactly one (and exactly v_q_plugin downstream) rather
    // than one up to rounding.
    if params.rho == Rho::Constant(1.0) {
        let w11 = if matches!(params.lambda, Lambda::NullFn) {
            1.0
        } else {
            (m00 + m11 - m01 - lambda) / m11
        };
        return check_omegas([1.0, 1.0, w11], x1);
    }

    let [r01_0101, r01_0111, r10_011, r10_0111, r11_0101, r11_0011, r11_0001] =
        params.rho.spread();
    let w01 = m00 / m01 + r01_0101 * (1.0 - m10 / m01) + r01_0111 * (m10 - m00) / m01;
    let w10 = m00 / m10 + r10_011 * (1.0 - m01 / m10) + r10_0111 * (m01 - m00) / m10;
    let w11 = m00 / m11
        + r11_0101 * (m01 - m10) / m11
        + r11_0011 * (m10 - m01) / m11
        + r11_0001 * (1.0 - (m01 + lambda) / m11);
    check_omegas([w01, w10, w11], x1)
}

fn check_omegas(w: [f64; 3], x1: &[f64]) -> Result<[f64; 3]> {
    let arms = ["01", "10", "11"];
    for (i, v) in w.iter().enumerate() {
        if v.abs() < 1e-8 || !v.is_finite() {
            return Err(Error::ZeroOmega {
                arm: arms[i].to_string(),
                x1: x1[0],
            });
        }
    }
    Ok(w)
}

fn omega_for_arm(w: &[f64; 3], arm: (u8, u8)) -> f64 {
    match arm {
        (0, 0) => 1.0,
        (0, 1) => w[0],
        (1, 0) => w[1],
        _ => w[2],
    }
}

/// Point value of the sensitivity-adjusted plug-in: the stage-1 regression
/// of the tilted outcome mean nu = mu2 / omega replaces the stage-1 outcome
/// regression in the weighted-mean identification.
pub fn v_sensitivity_point(
    d: &Dataset,
    policy: &LinearPolicy,
    suite: &FittedSuite,
    params: &SensitivityParams,
    weights: Option<&[f64]>,
) -> Result<(f64, f64)> {
    // m_nu uses the same basis (and the same fit path) as m_mu2.
    let basis = nuisance::m_mean_basis(d, suite.config(), weights)?;
    v_sensitivity_core(
        d,
        policy,
        suite,
        params,
        basis,
        suite.config().trim.clip,
        weights,
    )
}

/// Estimator core over any nuisance evaluator; `basis` carries the stage-1
/// regression basis for the tilted outcome mean.
pub fn v_sensitivity_core(
    d: &Dataset,
    policy: &LinearPolicy,
    nuis: &dyn Nuisances,
    params: &SensitivityParams,
    basis: crate::regression::MeanBasis,
    clip: Option<f64>,
    weights: Option<&[f64]>,
) -> Result<(f64, f64)> {
    let suite = nuis;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut targets = Vec::new();
    let mut w = Vec::new();
    for (i, t) in d.rows().iter().enumerate() {
        let wi = weights.map_or(1.0, |w| w[i]);
        if wi == 0.0 || !t.reached_stage2() {
            continue;
        }
        let x1 = t.x1();
        let d1 = policy.decide1(x1);
        if t.a1() != d1 {
            continue;
        }
        let x2 = t.x2().unwrap();
        let d2 = policy.decide2_parts(x1, d1, x2);
        let omegas = omega_weights(x1, suite, params)?;
        let mu = suite.mu2((d1, d2), x1, x2);
        targets.push(mu / omega_for_arm(&omegas, (d1, d2)));
        rows.push(x1.to_vec());
        w.push(wi);
    }
    if rows.is_empty() {
        return Err(Error::EmptyStratum(
            "m_nu conditioning set {A1=pi1(x1), C1=0, S1=1}".into(),
        ));
    }
    let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
    let m_nu = MeanModel::fit(basis, &refs, &targets, Some(&w), clip)?;

    let terms: Vec<(f64, f64)> = d
        .rows()
        .par_iter()
        .map(|t| {
            let x1 = t.x1();
            let weight = suite.p1(0, x1) * suite.m_p2((0, 0), x1);
            (weight * m_nu.predict(x1), weight)
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

/// Sensitivity-adjusted value with bootstrap standard error.
pub fn v_sensitivity(
    d: &Dataset,
    policy: &LinearPolicy,
    suite: &FittedSuite,
    params: &SensitivityParams,
    bootstrap_b: usize,
    seed: u64,
) -> Result<EstimateReport> {
    let (value, den_mean) = v_sensitivity_point(d, policy, suite, params, None)?;
    let (se, failures) = if bootstrap_b == 0 {
        (None, 0)
    } else {
        let n = d.len();
        let cfg = suite.config().clone();
        let draws: Vec<Result<f64>> = (0..bootstrap_b)
            .into_par_iter()
            .map(|bi| {
                use rand::Rng;
                let mut r = rng::stream(seed, &[0x5E25, bi as u64]);
                let mut counts = vec![0.0f64; n];
                for _ in 0..n {
                    counts[r.gen_range(0..n)] += 1.0;
                }
                let refit = nuisance::fit_suite(d, &cfg, Some(policy), Some(&counts))?;
                v_sensitivity_point(d, policy, &refit, params, Some(&counts)).map(|v| v.0)
            })
            .collect();
        let ok: Vec<f64> = draws.iter().filter_map(|r| r.as_ref().ok().copied()).collect();
        let failures = bootstrap_b - ok.len();
        if ok.len() < bootstrap_b / 2 {
            return Err(Error::InvalidDataset(format!(
                "bootstrap failed in {failures} of {bootstrap_b} resamples"
            )));
        }
        (Some(math::sample_sd(&ok)), failures)
    };
    let ci = se.map(|s| (value - 1.96 * s, value + 1.96 * s));
    let mut warnings = suite.fit_warnings();
    if failures > 0 {
        warnings.push(format!("{failures} bootstrap resamples failed"));
    }
    Ok(EstimateReport {
        estimator: EstimatorKind::Sensitivity,
        value,
        se,
        ci_low: ci.map(|c| c.0),
        ci_high: ci.map(|c| c.1),
        n: d.len(),
        mean_phi_d: den_mean,
        trim_count: 0,
        warnings,
    })
}

/// One grid cell of a sensitivity sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridPoint {
    pub rho: f64,
    pub lambda: String,
    pub value: f64,
    pub se: Option<f64>,
}

/// Evaluate the sensitivity value over a (rho, lambda) grid; each point is a
/// pure function of the inputs and they run concurrently.
pub fn sensitivity_grid(
    d: &Dataset,
    policy: &LinearPolicy,
    suite: &FittedSuite,
    rho_grid: &[f64],
    lambda_grid: &[Lambda],
    bootstrap_b: usize,
    seed: u64,
) -> Result<Vec<GridPoint>> {
    let cells: Vec<(f64, Lambda)> = rho_grid
        .iter()
        .flat_map(|&r| lambda_grid.iter().map(move |&l| (r, l)))
        .collect();
    cells
        .par_iter()
        .map(|&(rho, lambda)| {
            let params = SensitivityParams::new(rho, lambda);
            let rep = v_sensitivity(d, policy, suite, &params, bootstrap_b, seed)?;
            Ok(GridPoint {
                rho,
                lambda: match lambda {
                    Lambda::Constant(l) => format!("{l}"),
                    Lambda::NullFn => "null_fn".to_string(),
                },
                value: rep.value,
                se: rep.se,
            })
        })
        .collect()
}
