//! Fitting and evaluation of every nuisance function the estimators need:
//! propensity, censoring and survival probabilities per stage and arm, the
//! stage-2 outcome regression, and the backward-recursive stage-1
//! conditional means.
//!
//! The stage-1 conditional means are fit on pseudo-outcomes from the fitted
//! stage-2 models, never on raw outcomes: `m_p2` regresses the fitted
//! stage-2 survival probability on baseline covariates, and `m_mu2`
//! regresses the fitted policy-consistent outcome mean.
//!
//! A note on the stage-1 outcome mean: it is fit and evaluated as the plain
//! conditional expectation of the stage-2 outcome regression given baseline
//! covariates in the treated-as-assigned stratum, without a stage-2
//! treatment indicator inside the expectation. Folding the indicator in
//! would change the quantity by a stage-2 propensity factor and break the
//! backward-recursive identities the estimator relies on.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::features::{FeatureMap, NaturalSpline, Term};
use crate::policy::LinearPolicy;
use crate::regression::{BinaryModel, IrlsOptions, MeanBasis, MeanModel};
use crate::scenario::{ModelSpec, ScenarioSpec};
use crate::simulation::SimConfig;
use crate::trajectory::Dataset;
use crate::Result;

/// Positivity trimming and outcome clipping.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrimConfig {
    /// Probabilities are clamped to [epsilon, 1 - epsilon].
    pub epsilon: f64,
    /// Symmetric bound on conditional-mean predictions; None disables.
    pub clip: Option<f64>,
}

impl Default for TrimConfig {
    fn default() -> Self {
        TrimConfig {
            epsilon: 0.01,
            clip: None,
        }
    }
}

/// Evaluation interface consumed by the estimators. Implemented by fitted
/// suites and by ground-truth oracles.
pub trait Nuisances: Sync {
    /// P(A1 = a1 | x1).
    fn e1(&self, a1: u8, x1: &[f64]) -> f64;
    /// P(C1 = 0 | x1, a1).
    fn c1(&self, a1: u8, x1: &[f64]) -> f64;
    /// P(S1 = 1 | x1, a1, C1 = 0).
    fn p1(&self, a1: u8, x1: &[f64]) -> f64;
    /// P(A2 = a2 | x1, x2, a1, C1 = 0, S1 = 1).
    fn e2(&self, arm: (u8, u8), x1: &[f64], x2: &[f64]) -> f64;
    /// P(C2 = 0 | x1, x2, a1, a2, C1 = 0, S1 = 1).
    fn c2(&self, arm: (u8, u8), x1: &[f64], x2: &[f64]) -> f64;
    /// P(S2 = 1 | x1, x2, a1, a2, C = 0, S1 = 1).
    fn p2(&self, arm: (u8, u8), x1: &[f64], x2: &[f64]) -> f64;
    /// E[Y | x1, x2, arm, uncensored, surviving].
    fn mu2(&self, arm: (u8, u8), x1: &[f64], x2: &[f64]) -> f64;
    /// E[p2^{arm}(x1, X2) | x1, A1 = arm.0, C1 = 0, S1 = 1].
    fn m_p2(&self, arm: (u8, u8), x1: &[f64]) -> f64;
    /// Policy-bound stage-1 outcome mean m_{mu2}^pi(x1).
    fn m_mu2(&self, x1: &[f64]) -> f64;

    fn phi1(&self, a1: u8, x1: &[f64]) -> f64 {
        self.e1(a1, x1) * self.c1(a1, x1)
    }
    fn phi2(&self, arm: (u8, u8), x1: &[f64], x2: &[f64]) -> f64 {
        self.e2(arm, x1, x2) * self.c2(arm, x1, x2)
    }

    /// Whether a policy-bound stage-1 outcome mean is available.
    fn m_mu2_available(&self) -> bool {
        true
    }
    /// Cumulative count of trimmed probability evaluations.
    fn trim_count(&self) -> u64 {
        0
    }
    /// Warnings accumulated during fitting.
    fn fit_warnings(&self) -> Vec<String> {
        Vec::new()
    }
}

/// "Correct" feature bases per nuisance. Indices refer to x1 coordinates for
/// stage-1 models and to the concatenation (x1..., x2...) for stage-2 models.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NuisanceBases {
    pub e1: FeatureMap,
    pub c1: FeatureMap,
    pub p1: FeatureMap,
    pub e2: FeatureMap,
    pub c2: FeatureMap,
    pub p2: FeatureMap,
    pub mu2: FeatureMap,
}

impl NuisanceBases {
    /// Intercept + raw covariates everywhere; the sensible default for
    /// external data.
    pub fn linear(p1: usize, p2: usize) -> Self {
        NuisanceBases {
            e1: FeatureMap::linear(p1),
            c1: FeatureMap::linear(p1),
            p1: FeatureMap::linear(p1),
            e2: FeatureMap::linear(p1 + p2),
            c2: FeatureMap::linear(p1 + p2),
            p2: FeatureMap::linear(p1 + p2),
            mu2: FeatureMap::linear(p1 + p2),
        }
    }

    /// The data-generating bases of a simulation configuration: a term is
    /// included exactly when its coefficient (or an arm interaction
    /// involving it) is nonzero. Arm main effects are absorbed by per-arm
    /// fitting.
    pub fn from_config(cfg: &SimConfig) -> Self {
        let x1 = 0usize;
        let x2 = 1usize; // concatenated index for p1 = p2 = 1
        let stage1 = |b_x1: f64, b_sq: f64, b_ax1: f64| {
            let mut t = vec![Term::Intercept];
            if b_x1 != 0.0 || b_ax1 != 0.0 {
                t.push(Term::Linear(x1));
            }
            if b_sq != 0.0 {
                t.push(Term::Power(x1, 2));
            }
            FeatureMap::new(t)
        };
        let e2 = {
            let mut t = vec![Term::Intercept];
            if cfg.e2.x1 != 0.0 {
                t.push(Term::Linear(x1));
            }
            if cfg.e2.x1_sq != 0.0 {
                t.push(Term::Power(x1, 2));
            }
            if cfg.e2.x2 != 0.0 {
                t.push(Term::Linear(x2));
            }
            if cfg.e2.x2_sq != 0.0 {
                t.push(Term::Power(x2, 2));
            }
            FeatureMap::new(t)
        };
        let c2 = {
            let mut t = vec![Term::Intercept];
            if cfg.c2.x1 != 0.0 {
                t.push(Term::Linear(x1));
            }
            if cfg.c2.x2 != 0.0 || cfg.c2.a2_x2 != 0.0 {
                t.push(Term::Linear(x2));
            }
            FeatureMap::new(t)
        };
        let p2 = {
            let mut t = vec![Term::Intercept];
            if cfg.p2.x1 != 0.0 {
                t.push(Term::Linear(x1));
            }
            if cfg.p2.x2 != 0.0 {
                t.push(Term::Linear(x2));
            }
            if cfg.p2.x1_x2 != 0.0 {
                t.push(Term::Interaction(x1, x2));
            }
            FeatureMap::new(t)
        };
        let mu2 = {
            let mut t = vec![Term::Intercept];
            if cfg.mu2.x1 != 0.0 || cfg.mu2.a1_x1 != 0.0 {
                t.push(Term::Linear(x1));
            }
            if cfg.mu2.x2 != 0.0 || cfg.mu2.a2_x2 != 0.0 {
                t.push(Term::Linear(x2));
            }
            if cfg.mu2.exp_x2 != 0.0 {
                t.push(Term::Exp(x2));
            }
            FeatureMap::new(t)
        };
        NuisanceBases {
            e1: stage1(cfg.e1.x1, cfg.e1.x1_sq, 0.0),
            c1: stage1(cfg.c1.x1, cfg.c1.x1_sq, cfg.c1.a1_x1),
            p1: stage1(cfg.p1.x1, cfg.p1.x1_sq, cfg.p1.a1_x1),
            e2,
            c2,
            p2,
            mu2,
        }
    }
}

/// Everything [`fit_suite`] needs besides the data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub bases: NuisanceBases,
    pub scenario: ScenarioSpec,
    pub trim: TrimConfig,
    pub irls: IrlsOptions,
}

impl SuiteConfig {
    pub fn for_sim(cfg: &SimConfig, scenario: ScenarioSpec) -> Self {
        SuiteConfig {
            bases: NuisanceBases::from_config(cfg),
            scenario,
            trim: TrimConfig::default(),
            irls: IrlsOptions::default(),
        }
    }

    pub fn for_data(p1: usize, p2: usize) -> Self {
        SuiteConfig {
            bases: NuisanceBases::linear(p1, p2),
            scenario: ScenarioSpec::m1(),
            trim: TrimConfig::default(),
            irls: IrlsOptions::default(),
        }
    }
}

fn binary_basis(flag: ModelSpec, correct: &FeatureMap, dim: usize) -> FeatureMap {
    match flag {
        ModelSpec::Correct | ModelSpec::PooledArms => correct.clone(),
        ModelSpec::InterceptOnly => FeatureMap::intercept_only(),
        ModelSpec::NoInterceptExp => FeatureMap::no_intercept_exp(dim),
    }
}

// Misspecified conditional means regress on exp-transformed baseline
// covariates only, so predictions stay bounded on the baseline support.
fn mu2_basis(flag: ModelSpec, correct: &FeatureMap, p1: usize) -> FeatureMap {
    match flag {
        ModelSpec::Correct | ModelSpec::PooledArms => correct.clone(),
        ModelSpec::InterceptOnly => FeatureMap::intercept_only(),
        ModelSpec::NoInterceptExp => FeatureMap::no_intercept_exp(p1),
    }
}

/// Basis for the stage-1 conditional means: additive natural cubic splines
/// with decile knots on the full baseline sample when correctly specified,
/// a transformed no-intercept basis otherwise.
fn m_basis_for_flag(
    flag: ModelSpec,
    d: &Dataset,
    weights: Option<&[f64]>,
) -> Result<MeanBasis> {
    match flag {
        ModelSpec::Correct | ModelSpec::PooledArms => {
            let p1 = d.p1();
            let mut splines = Vec::with_capacity(p1);
            for j in 0..p1 {
                let xs: Vec<f64> = d
                    .rows()
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| weights.map_or(true, |w| w[*i] > 0.0))
                    .map(|(_, t)| t.x1()[j])
                    .collect();
                splines.push(NaturalSpline::from_quantiles(&xs)?);
            }
            Ok(MeanBasis::Spline(splines))
        }
        ModelSpec::InterceptOnly => Ok(MeanBasis::Map(FeatureMap::intercept_only())),
        ModelSpec::NoInterceptExp => Ok(MeanBasis::Map(FeatureMap::no_intercept_exp(d.p1()))),
    }
}

/// The policy-bound stage-1 regression basis (shared by the fast policy
/// search path so its refits match [`fit_suite`] exactly).
pub(crate) fn m_mean_basis(
    d: &Dataset,
    cfg: &SuiteConfig,
    weights: Option<&[f64]>,
) -> Result<MeanBasis> {
    m_basis_for_flag(cfg.scenario.m_mu2, d, weights)
}

/// The fitted collection of every nuisance model.
pub struct FittedSuite {
    config: SuiteConfig,
    policy: Option<LinearPolicy>,
    e1: BinaryModel,
    c1: [BinaryModel; 2],
    p1: [BinaryModel; 2],
    e2: [BinaryModel; 2],
    c2: [[BinaryModel; 2]; 2],
    p2: [[BinaryModel; 2]; 2],
    mu2: [[MeanModel; 2]; 2],
    m_p2: [[MeanModel; 2]; 2],
    m_mu2: Option<MeanModel>,
    warnings: Vec<String>,
    trims: AtomicU64,
}

impl FittedSuite {
    pub fn config(&self) -> &SuiteConfig {
        &self.config
    }

    pub fn policy(&self) -> Option<&LinearPolicy> {
        self.policy.as_ref()
    }

    #[inline]
    fn clamp(&self, p: f64) -> f64 {
        let eps = self.config.trim.epsilon;
        let lo = if eps > 0.0 { eps } else { 1e-12 };
        if p < lo || p > 1.0 - lo {
            self.trims.fetch_add(1, Ordering::Relaxed);
            p.clamp(lo, 1.0 - lo)
        } else {
            p
        }
    }
}

impl Nuisances for FittedSuite {
    fn e1(&self, a1: u8, x1: &[f64]) -> f64 {
        let p = self.e1.prob(x1);
        self.clamp(if a1 == 1 { p } else { 1.0 - p })
    }
    fn c1(&self, a1: u8, x1: &[f64]) -> f64 {
        self.clamp(self.c1[a1 as usize].prob(x1))
    }
    fn p1(&self, a1: u8, x1: &[f64]) -> f64 {
        self.clamp(self.p1[a1 as usize].prob(x1))
    }
    fn e2(&self, arm: (u8, u8), x1: &[f64], x2: &[f64]) -> f64 {
        let p = self.e2[arm.0 as usize].prob(&concat(x1, x2));
        self.clamp(if arm.1 == 1 { p } else { 1.0 - p })
    }
    fn c2(&self, arm: (u8, u8), x1: &[f64], x2: &[f64]) -> f64 {
        self.clamp(self.c2[arm.0 as usize][arm.1 as usize].prob(&concat(x1, x2)))
    }
    fn p2(&self, arm: (u8, u8), x1: &[f64], x2: &[f64]) -> f64 {
        self.clamp(self.p2[arm.0 as usize][arm.1 as usize].prob(&concat(x1, x2)))
    }
    fn mu2(&self, arm: (u8, u8), x1: &[f64], x2: &[f64]) -> f64 {
        self.mu2[arm.0 as usize][arm.1 as usize].predict(&concat(x1, x2))
    }
    fn m_p2(&self, arm: (u8, u8), x1: &[f64]) -> f64 {
        self.clamp(self.m_p2[arm.0 as usize][arm.1 as usize].predict(x1))
    }
    fn m_mu2(&self, x1: &[f64]) -> f64 {
        self.m_mu2
            .as_ref()
            .expect("policy-bound m_mu2 requested but no policy was supplied to fit_suite")
            .predict(x1)
    }
    fn m_mu2_available(&self) -> bool {
        self.m_mu2.is_some()
    }
    fn trim_count(&self) -> u64 {
        self.trims.load(Ordering::Relaxed)
    }
    fn fit_warnings(&self) -> Vec<String> {
        self.warnings.clone()
    }
}

#[inline]
fn concat(x1: &[f64], x2: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(x1.len() + x2.len());
    v.extend_from_slice(x1);
    v.extend_from_slice(x2);
    v
}

struct StratumFit<'a> {
    d: &'a Dataset,
    weights: Option<&'a [f64]>,
    irls: IrlsOptions,
    warnings: Vec<String>,
}

impl<'a> StratumFit<'a> {
    fn weight(&self, i: usize) -> f64 {
        self.weights.map_or(1.0, |w| w[i])
    }

    fn fit_binary<FSel, FLab>(
        &mut self,
        name: &str,
        basis: FeatureMap,
        select: FSel,
        label: FLab,
        stage2: bool,
    ) -> Result<BinaryModel>
    where
        FSel: Fn(&crate::trajectory::Trajectory) -> bool,
        FLab: Fn(&crate::trajectory::Trajectory) -> f64,
    {
        let mut points: Vec<Vec<f64>> = Vec::new();
        let mut labels = Vec::new();
        let mut w = Vec::new();
        for (i, t) in self.d.rows().iter().enumerate() {
            let wi = self.weight(i);
            if wi == 0.0 || !select(t) {
                continue;
            }
            points.push(if stage2 {
                concat(t.x1(), t.x2().expect("stage-2 stratum row has x2"))
            } else {
                t.x1().to_vec()
            });
            labels.push(label(t));
            w.push(wi);
        }
        if points.is_empty() {
            return Err(Error::EmptyStratum(format!("{name} conditioning set")));
        }
        let rows: Vec<&[f64]> = points.iter().map(|p| p.as_slice()).collect();
        let model = BinaryModel::fit(basis, &rows, &labels, Some(&w), &self.irls)?;
        if model.meta.separation {
            self.warnings.push(format!("{name}: separation flagged"));
        }
        for warn in &model.meta.warnings {
            self.warnings.push(format!("{name}: {warn}"));
        }
        Ok(model)
    }

    fn fit_mean<FSel, FTar>(
        &mut self,
        name: &str,
        basis: MeanBasis,
        select: FSel,
        target: FTar,
        stage2: bool,
        clip: Option<f64>,
    ) -> Result<MeanModel>
    where
        FSel: Fn(&crate::trajectory::Trajectory) -> bool,
        FTar: Fn(&crate::trajectory::Trajectory) -> f64,
    {
        let mut points: Vec<Vec<f64>> = Vec::new();
        let mut targets = Vec::new();
        let mut w = Vec::new();
        for (i, t) in self.d.rows().iter().enumerate() {
            let wi = self.weight(i);
            if wi == 0.0 || !select(t) {
                continue;
            }
            points.push(if stage2 {
                concat(t.x1(), t.x2().expect("stage-2 stratum row has x2"))
            } else {
                t.x1().to_vec()
            });
            targets.push(target(t));
            w.push(wi);
        }
        if points.is_empty() {
            return Err(Error::EmptyStratum(format!("{name} conditioning set")));
        }
        let rows: Vec<&[f64]> = points.iter().map(|p| p.as_slice()).collect();
        let model = MeanModel::fit(basis, &rows, &targets, Some(&w), clip)?;
        for warn in &model.warnings {
            self.warnings.push(format!("{name}: {warn}"));
        }
        Ok(model)
    }
}

/// Fit the complete nuisance suite on a dataset.
///
/// Stage-1 models are fit on everyone (per realized arm where the model is
/// arm-specific); stage-2 models on the rows that reached stage 2, per arm
/// pair and on the appropriate at-risk subsets; the stage-1 conditional
/// means by backward recursion on fitted stage-2 pseudo-outcomes. Optional
/// `weights` support bootstrap and cross-fitting reuse.
pub fn fit_suite(
    d: &Dataset,
    cfg: &SuiteConfig,
    policy: Option<&LinearPolicy>,
    weights: Option<&[f64]>,
) -> Result<FittedSuite> {
    let s = &cfg.scenario;
    let p1_dim = d.p1();
    let s2_dim = d.p1() + d.p2();
    let mut fitter = StratumFit {
        d,
        weights,
        irls: cfg.irls.clone(),
        warnings: Vec::new(),
    };

    let e1_basis = if s.phi1.pooled() {
        FeatureMap::intercept_only()
    } else {
        binary_basis(s.phi1, &cfg.bases.e1, p1_dim)
    };
    let e1 = fitter.fit_binary("e1 {all rows}", e1_basis, |_| true, |t| t.a1() as f64, false)?;
    let fit_arm1 = |fitter: &mut StratumFit,
                    name: &str,
                    basis: FeatureMap,
                    arm: u8,
                    censoring: bool|
     -> Result<BinaryModel> {
        if censoring {
            fitter.fit_binary(
                &format!("{name} {{A1={arm}}}"),
                basis,
                |t| t.a1() == arm,
                |t| (t.c1() == 0) as u8 as f64,
                false,
            )
        } else {
            fitter.fit_binary(
                &format!("{name} {{A1={arm}, C1=0}}"),
                basis,
                |t| t.a1() == arm && t.c1() == 0,
                |t| t.s1().unwrap() as f64,
                false,
            )
        }
    };
    let c1 = if s.phi1.pooled() {
        let pooled = fitter.fit_binary(
            "c1 {all rows, arms pooled}",
            binary_basis(s.phi1, &cfg.bases.c1, p1_dim),
            |_| true,
            |t| (t.c1() == 0) as u8 as f64,
            false,
        )?;
        [pooled.clone(), pooled]
    } else {
        [
            fit_arm1(&mut fitter, "c1", binary_basis(s.phi1, &cfg.bases.c1, p1_dim), 0, true)?,
            fit_arm1(&mut fitter, "c1", binary_basis(s.phi1, &cfg.bases.c1, p1_dim), 1, true)?,
        ]
    };
    let p1 = if s.p1.pooled() {
        let pooled = fitter.fit_binary(
            "p1 {C1=0, arms pooled}",
            binary_basis(s.p1, &cfg.bases.p1, p1_dim),
            |t| t.c1() == 0,
            |t| t.s1().unwrap() as f64,
            false,
        )?;
        [pooled.clone(), pooled]
    } else {
        [
            fit_arm1(&mut fitter, "p1", binary_basis(s.p1, &cfg.bases.p1, p1_dim), 0, false)?,
            fit_arm1(&mut fitter, "p1", binary_basis(s.p1, &cfg.bases.p1, p1_dim), 1, false)?,
        ]
    };

    let e2: [BinaryModel; 2] = if s.phi2.pooled() {
        let pooled = fitter.fit_binary(
            "e2 {C1=0, S1=1, arms pooled}",
            binary_basis(s.phi2, &cfg.bases.e2, s2_dim),
            |t| t.reached_stage2(),
            |t| t.a2().unwrap() as f64,
            true,
        )?;
        [pooled.clone(), pooled]
    } else {
        let mut e2 = Vec::with_capacity(2);
        for a1 in 0..2u8 {
            e2.push(fitter.fit_binary(
                &format!("e2 {{A1={a1}, C1=0, S1=1}}"),
                binary_basis(s.phi2, &cfg.bases.e2, s2_dim),
                |t| t.a1() == a1 && t.reached_stage2(),
                |t| t.a2().unwrap() as f64,
                true,
            )?);
        }
        e2.try_into().ok().expect("two arms")
    };

    let c2_pooled = if s.phi2.pooled() {
        Some(fitter.fit_binary(
            "c2 {C1=0, S1=1, arms pooled}",
            binary_basis(s.phi2, &cfg.bases.c2, s2_dim),
            |t| t.reached_stage2(),
            |t| (t.c2() == Some(0)) as u8 as f64,
            true,
        )?)
    } else {
        None
    };
    let p2_pooled = if s.p2.pooled() {
        Some(fitter.fit_binary(
            "p2 {C=0, S1=1, arms pooled}",
            binary_basis(s.p2, &cfg.bases.p2, s2_dim),
            |t| t.c2() == Some(0),
            |t| t.s2().unwrap() as f64,
            true,
        )?)
    } else {
        None
    };
    let mu2_pooled = if s.mu2.pooled() {
        Some(fitter.fit_mean(
            "mu2 {C=0, S=1, arms pooled}",
            MeanBasis::Map(mu2_basis(s.mu2, &cfg.bases.mu2, p1_dim)),
            |t| t.fully_observed(),
            |t| t.y().unwrap(),
            true,
            cfg.trim.clip,
        )?)
    } else {
        None
    };
    let mut c2_v = Vec::new();
    let mut p2_v = Vec::new();
    let mut mu2_v = Vec::new();
    for a1 in 0..2u8 {
        let mut c2_row = Vec::new();
        let mut p2_row = Vec::new();
        let mut mu2_row = Vec::new();
        for a2 in 0..2u8 {
            c2_row.push(match &c2_pooled {
                Some(m) => m.clone(),
                None => fitter.fit_binary(
                    &format!("c2 {{A1={a1}, A2={a2}, C1=0, S1=1}}"),
                    binary_basis(s.phi2, &cfg.bases.c2, s2_dim),
                    |t| t.a1() == a1 && t.reached_stage2() && t.a2() == Some(a2),
                    |t| (t.c2() == Some(0)) as u8 as f64,
                    true,
                )?,
            });
            p2_row.push(match &p2_pooled {
                Some(m) => m.clone(),
                None => fitter.fit_binary(
                    &format!("p2 {{A1={a1}, A2={a2}, C=0, S1=1}}"),
                    binary_basis(s.p2, &cfg.bases.p2, s2_dim),
                    |t| t.a1() == a1 && t.a2() == Some(a2) && t.c2() == Some(0),
                    |t| t.s2().unwrap() as f64,
                    true,
                )?,
            });
            mu2_row.push(match &mu2_pooled {
                Some(m) => m.clone(),
                None => fitter.fit_mean(
                    &format!("mu2 {{A1={a1}, A2={a2}, C=0, S=1}}"),
                    MeanBasis::Map(mu2_basis(s.mu2, &cfg.bases.mu2, p1_dim)),
                    |t| t.a1() == a1 && t.a2() == Some(a2) && t.fully_observed(),
                    |t| t.y().unwrap(),
                    true,
                    cfg.trim.clip,
                )?,
            });
        }
        c2_v.push(c2_row);
        p2_v.push(p2_row);
        mu2_v.push(mu2_row);
    }

    // Partially assembled suite for pseudo-outcome evaluation with trimming.
    let mut suite = FittedSuite {
        config: cfg.clone(),
        policy: policy.cloned(),
        e1,
        c1,
        p1,
        e2,
        c2: [
            [c2_v[0].remove(0), c2_v[0].remove(0)],
            [c2_v[1].remove(0), c2_v[1].remove(0)],
        ],
        p2: [
            [p2_v[0].remove(0), p2_v[0].remove(0)],
            [p2_v[1].remove(0), p2_v[1].remove(0)],
        ],
        mu2: [
            [mu2_v[0].remove(0), mu2_v[0].remove(0)],
            [mu2_v[1].remove(0), mu2_v[1].remove(0)],
        ],
        m_p2: [
            [placeholder_mean(), placeholder_mean()],
            [placeholder_mean(), placeholder_mean()],
        ],
        m_mu2: None,
        warnings: Vec::new(),
        trims: AtomicU64::new(0),
    };

    // m_p2 per arm pair: regression of the fitted stage-2 survival
    // probability on x1 in the stage-1 stratum.
    let m_p2_basis = m_basis_for_flag(s.m_p2, d, weights)?;
    for a1 in 0..2u8 {
        for a2 in 0..2u8 {
            let model = fitter.fit_mean(
                &format!("m_p2 {{A1={a1}, C1=0, S1=1}}"),
                m_p2_basis.clone(),
                |t| t.a1() == a1 && t.reached_stage2(),
                |t| suite.p2((a1, a2), t.x1(), t.x2().unwrap()),
                false,
                None,
            )?;
            suite.m_p2[a1 as usize][a2 as usize] = model;
        }
    }

    // m_mu2 for the supplied policy: backward-recursive regression of the
    // fitted stage-2 outcome mean at the policy's arms.
    if let Some(pi) = policy {
        let basis = m_basis_for_flag(s.m_mu2, d, weights)?;
        let model = fitter.fit_mean(
            "m_mu2 {A1=pi1(x1), C1=0, S1=1}",
            basis,
            |t| t.reached_stage2() && t.a1() == pi.decide1(t.x1()),
            |t| {
                let x2 = t.x2().unwrap();
                let a1 = t.a1();
                let d2 = pi.decide2_parts(t.x1(), a1, x2);
                suite.mu2((a1, d2), t.x1(), x2)
            },
            false,
            cfg.trim.clip,
        )?;
        suite.m_mu2 = Some(model);
    }

    suite.warnings = fitter.warnings;
    suite.trims.store(0, Ordering::Relaxed);
    Ok(suite)
}

fn placeholder_mean() -> MeanModel {
    MeanModel::from_coefficients(
        MeanBasis::Map(FeatureMap::intercept_only()),
        vec![f64::NAN],
        None,
    )
}

/// Names accepted by [`evaluate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NuisanceName {
    E1,
    C1,
    P1,
    Phi1,
    E2,
    C2,
    P2,
    Phi2,
    Mu2,
    MP2,
    MMu2,
}

/// Evaluate one fitted nuisance at a covariate point, with positivity
/// trimming (probabilities) or clipping (means) applied.
pub fn evaluate(
    suite: &FittedSuite,
    which: NuisanceName,
    arm: (u8, u8),
    x1: &[f64],
    x2: Option<&[f64]>,
) -> Result<f64> {
    let need_x2 = || {
        x2.ok_or_else(|| Error::InvalidConfig(format!("{which:?} requires stage-2 covariates")))
    };
    Ok(match which {
        NuisanceName::E1 => suite.e1(arm.0, x1),
        NuisanceName::C1 => suite.c1(arm.0, x1),
        NuisanceName::P1 => suite.p1(arm.0, x1),
        NuisanceName::Phi1 => suite.phi1(arm.0, x1),
        NuisanceName::E2 => suite.e2(arm, x1, need_x2()?),
        NuisanceName::C2 => suite.c2(arm, x1, need_x2()?),
        NuisanceName::P2 => suite.p2(arm, x1, need_x2()?),
        NuisanceName::Phi2 => suite.phi2(arm, x1, need_x2()?),
        NuisanceName::Mu2 => suite.mu2(arm, x1, need_x2()?),
        NuisanceName::MP2 => suite.m_p2(arm, x1),
        NuisanceName::MMu2 => {
            if !suite.m_mu2_available() {
                return Err(Error::ArmNotFitted("m_mu2 (no policy bound)".into()));
            }
            suite.m_mu2(x1)
        }
    })
}

// ---------------------------------------------------------------------------
// Death-as-censoring AIPW suite
// ---------------------------------------------------------------------------

/// Evaluation interface for the AIPW baseline's nuisances: joint
/// treatment-and-availability weights per stage and the backward-recursive
/// outcome regressions.
pub trait AipwNuisances: Sync {
    /// P(A1 = a1, available after stage 1 | x1).
    fn phi_tilde1(&self, a1: u8, x1: &[f64]) -> f64;
    /// Stage-2 analogue on the available-at-2 stratum.
    fn phi_tilde2(&self, arm: (u8, u8), x1: &[f64], x2: &[f64]) -> f64;
    /// E[Y | x, arm, available through stage 2].
    fn q2(&self, arm: (u8, u8), x1: &[f64], x2: &[f64]) -> f64;
    /// Policy-bound stage-1 regression of the fitted stage-2 value.
    fn q1(&self, x1: &[f64]) -> f64;
    fn trim_count(&self) -> u64 {
        0
    }
    fn fit_warnings(&self) -> Vec<String> {
        Vec::new()
    }
}

/// Nuisances for the AIPW baseline, fit with the composite missingness
/// indicator "censored or dead" so death is treated as censoring: stage k is
/// available iff C_k = 0 and S_k = 1.
pub struct AipwSuite {
    trim: TrimConfig,
    e1: BinaryModel,
    ct1: [BinaryModel; 2],
    e2: [BinaryModel; 2],
    ct2: [[BinaryModel; 2]; 2],
    q2: [[MeanModel; 2]; 2],
    q1: Option<MeanModel>,
    warnings: Vec<String>,
    trims: AtomicU64,
}

impl AipwSuite {
    #[inline]
    fn clamp(&self, p: f64) -> f64 {
        let eps = self.trim.epsilon;
        let lo = if eps > 0.0 { eps } else { 1e-12 };
        if p < lo || p > 1.0 - lo {
            self.trims.fetch_add(1, Ordering::Relaxed);
            p.clamp(lo, 1.0 - lo)
        } else {
            p
        }
    }

    pub fn has_q1(&self) -> bool {
        self.q1.is_some()
    }
}

impl AipwNuisances for AipwSuite {
    fn phi_tilde1(&self, a1: u8, x1: &[f64]) -> f64 {
        let e = self.e1.prob(x1);
        let e = self.clamp(if a1 == 1 { e } else { 1.0 - e });
        e * self.clamp(self.ct1[a1 as usize].prob(x1))
    }

    fn phi_tilde2(&self, arm: (u8, u8), x1: &[f64], x2: &[f64]) -> f64 {
        let p = concat(x1, x2);
        let e = self.e2[arm.0 as usize].prob(&p);
        let e = self.clamp(if arm.1 == 1 { e } else { 1.0 - e });
        e * self.clamp(self.ct2[arm.0 as usize][arm.1 as usize].prob(&p))
    }

    fn q2(&self, arm: (u8, u8), x1: &[f64], x2: &[f64]) -> f64 {
        self.q2[arm.0 as usize][arm.1 as usize].predict(&concat(x1, x2))
    }

    fn q1(&self, x1: &[f64]) -> f64 {
        self.q1
            .as_ref()
            .expect("policy-bound q1 requested but no policy was supplied")
            .predict(x1)
    }

    fn trim_count(&self) -> u64 {
        self.trims.load(Ordering::Relaxed)
    }

    fn fit_warnings(&self) -> Vec<String> {
        self.warnings.clone()
    }
}

fn union_basis(a: &FeatureMap, b: &FeatureMap) -> FeatureMap {
    let mut terms: Vec<Term> = a.terms().to_vec();
    for t in b.terms() {
        if !terms.contains(t) {
            terms.push(*t);
        }
    }
    FeatureMap::new(terms)
}

/// Fit the AIPW baseline's nuisances; requires a policy for the stage-1
/// value regression.
pub fn fit_aipw_suite(
    d: &Dataset,
    cfg: &SuiteConfig,
    policy: &LinearPolicy,
    weights: Option<&[f64]>,
) -> Result<AipwSuite> {
    let mut suite = fit_aipw_suite_policy_free(d, cfg, weights)?;
    let basis = m_basis_for_flag(cfg.scenario.m_mu2, d, weights)?;
    let mut fitter = StratumFit {
        d,
        weights,
        irls: cfg.irls.clone(),
        warnings: Vec::new(),
    };
    let q1 = fitter.fit_mean(
        "q1 {A1=pi1(x1), available}",
        basis,
        |t| t.reached_stage2() && t.a1() == policy.decide1(t.x1()),
        |t| {
            let x2 = t.x2().unwrap();
            let a1 = t.a1();
            let d2 = policy.decide2_parts(t.x1(), a1, x2);
            suite.q2((a1, d2), t.x1(), x2)
        },
        false,
        cfg.trim.clip,
    )?;
    suite.q1 = Some(q1);
    suite.warnings.extend(fitter.warnings);
    Ok(suite)
}

/// Policy-free part of the AIPW suite (used by the policy-search cache).
pub fn fit_aipw_suite_policy_free(
    d: &Dataset,
    cfg: &SuiteConfig,
    weights: Option<&[f64]>,
) -> Result<AipwSuite> {
    let s = &cfg.scenario;
    let p1_dim = d.p1();
    let s2_dim = d.p1() + d.p2();
    let mut fitter = StratumFit {
        d,
        weights,
        irls: cfg.irls.clone(),
        warnings: Vec::new(),
    };

    let e1_basis = if s.phi1.pooled() {
        FeatureMap::intercept_only()
    } else {
        binary_basis(s.phi1, &cfg.bases.e1, p1_dim)
    };
    let e1 = fitter.fit_binary("aipw e1 {all rows}", e1_basis, |_| true, |t| t.a1() as f64, false)?;
    let ct1_basis = match s.phi1 {
        ModelSpec::Correct | ModelSpec::PooledArms => union_basis(&cfg.bases.c1, &cfg.bases.p1),
        other => binary_basis(other, &cfg.bases.c1, p1_dim),
    };
    let ct1: [BinaryModel; 2] = if s.phi1.pooled() {
        let pooled = fitter.fit_binary(
            "aipw ct1 {all rows, arms pooled}",
            ct1_basis.clone(),
            |_| true,
            |t| t.reached_stage2() as u8 as f64,
            false,
        )?;
        [pooled.clone(), pooled]
    } else {
        let mut ct1 = Vec::new();
        for a1 in 0..2u8 {
            ct1.push(fitter.fit_binary(
                &format!("aipw ct1 {{A1={a1}}}"),
                ct1_basis.clone(),
                |t| t.a1() == a1,
                |t| t.reached_stage2() as u8 as f64,
                false,
            )?);
        }
        ct1.try_into().ok().expect("two arms")
    };
    let e2: [BinaryModel; 2] = if s.phi2.pooled() {
        let pooled = fitter.fit_binary(
            "aipw e2 {available, arms pooled}",
            binary_basis(s.phi2, &cfg.bases.e2, s2_dim),
            |t| t.reached_stage2(),
            |t| t.a2().unwrap() as f64,
            true,
        )?;
        [pooled.clone(), pooled]
    } else {
        let mut e2 = Vec::new();
        for a1 in 0..2u8 {
            e2.push(fitter.fit_binary(
                &format!("aipw e2 {{A1={a1}, available}}"),
                binary_basis(s.phi2, &cfg.bases.e2, s2_dim),
                |t| t.a1() == a1 && t.reached_stage2(),
                |t| t.a2().unwrap() as f64,
                true,
            )?);
        }
        e2.try_into().ok().expect("two arms")
    };
    let ct2_basis = match s.phi2 {
        ModelSpec::Correct => union_basis(&cfg.bases.c2, &cfg.bases.p2),
        other => binary_basis(other, &cfg.bases.c2, s2_dim),
    };
    let mut ct2 = Vec::new();
    let mut q2 = Vec::new();
    for a1 in 0..2u8 {
        let mut ct2_row = Vec::new();
        let mut q2_row = Vec::new();
        for a2 in 0..2u8 {
            ct2_row.push(fitter.fit_binary(
                &format!("aipw ct2 {{A1={a1}, A2={a2}, available}}"),
                ct2_basis.clone(),
                |t| t.a1() == a1 && t.reached_stage2() && t.a2() == Some(a2),
                |t| t.fully_observed() as u8 as f64,
                true,
            )?);
            q2_row.push(fitter.fit_mean(
                &format!("aipw q2 {{A1={a1}, A2={a2}, available through 2}}"),
                MeanBasis::Map(mu2_basis(s.mu2, &cfg.bases.mu2, p1_dim)),
                |t| t.a1() == a1 && t.a2() == Some(a2) && t.fully_observed(),
                |t| t.y().unwrap(),
                true,
                cfg.trim.clip,
            )?);
        }
        ct2.push(ct2_row);
        q2.push(q2_row);
    }

    Ok(AipwSuite {
        trim: cfg.trim,
        e1,
        ct1: ct1.try_into().ok().expect("two arms"),
        e2: e2.try_into().ok().expect("two arms"),
        ct2: [
            [ct2[0].remove(0), ct2[0].remove(0)],
            [ct2[1].remove(0), ct2[1].remove(0)],
        ],
        q2: [
            [q2[0].remove(0), q2[0].remove(0)],
            [q2[1].remove(0), q2[1].remove(0)],
        ],
        q1: None,
        warnings: fitter.warnings,
        trims: AtomicU64::new(0),
    })
}
