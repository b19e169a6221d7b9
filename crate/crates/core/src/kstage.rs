//! General-K extension of the multiply robust estimator.
//!
//! The two-stage estimator is the K = 2 instance; this module carries the
//! K-stage trajectory schema, the K-stage scores, adapters bridging the
//! two-stage machinery, and exactly enumerable toy processes with binary
//! covariates used to validate the scores against brute-force oracles.

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::estimators::{eif_variance, EstimateReport, EstimatorKind, DENOMINATOR_FLOOR};
use crate::math;
use crate::nuisance::Nuisances;
use crate::policy::LinearPolicy;
use crate::rng;
use crate::trajectory::Trajectory;
use crate::Result;

/// One observed stage: covariates, treatment, censoring, and survival
/// (absent when censored).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KStage {
    pub x: Vec<f64>,
    pub a: u8,
    pub c: u8,
    pub s: Option<u8>,
}

/// A K-stage monotone trajectory: stages stop at the first censoring or
/// death; the outcome exists only when all K stages are passed alive and
/// uncensored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KTrajectory {
    pub stages: Vec<KStage>,
    pub y: Option<f64>,
}

impl KTrajectory {
    /// Check the monotone structure against a horizon of `k` stages.
    pub fn validate(&self, k: usize) -> Result<()> {
        if self.stages.is_empty() || self.stages.len() > k {
            return Err(Error::InvalidDataset(format!(
                "trajectory must have between 1 and {k} stages, got {}",
                self.stages.len()
            )));
        }
        for (idx, st) in self.stages.iter().enumerate() {
            if st.x.is_empty() || st.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidDataset(format!(
                    "stage {} covariates must be non-empty and finite",
                    idx + 1
                )));
            }
            if st.a > 1 || st.c > 1 || st.s.is_some_and(|s| s > 1) {
                return Err(Error::InvalidDataset("binary fields must be 0 or 1".into()));
            }
            if st.c == 1 && st.s.is_some() {
                return Err(Error::monotone("s"));
            }
            if st.c == 0 && st.s.is_none() {
                return Err(Error::monotone("s"));
            }
            let last = idx + 1 == self.stages.len();
            if !last && !(st.c == 0 && st.s == Some(1)) {
                return Err(Error::monotone("x"));
            }
            if last && self.stages.len() < k && st.c == 0 && st.s == Some(1) {
                return Err(Error::monotone("x"));
            }
        }
        let complete = self.stages.len() == k
            && self.stages.last().is_some_and(|st| st.c == 0 && st.s == Some(1));
        if complete != self.y.is_some() {
            return Err(Error::monotone("y"));
        }
        Ok(())
    }

    fn xbar(&self, upto: usize) -> Vec<&[f64]> {
        self.stages[..upto].iter().map(|s| s.x.as_slice()).collect()
    }

    fn abar(&self, upto: usize) -> Vec<u8> {
        self.stages[..upto].iter().map(|s| s.a).collect()
    }
}

/// Convert a two-stage [`Trajectory`] into the K-stage schema.
pub fn from_two_stage(t: &Trajectory) -> KTrajectory {
    let mut stages = vec![KStage {
        x: t.x1().to_vec(),
        a: t.a1(),
        c: t.c1(),
        s: t.s1(),
    }];
    if let Some(x2) = t.x2() {
        stages.push(KStage {
            x: x2.to_vec(),
            a: t.a2().unwrap(),
            c: t.c2().unwrap(),
            s: t.s2(),
        });
    }
    KTrajectory {
        stages,
        y: t.y(),
    }
}

/// A K-stage deterministic policy.
pub trait KPolicy: Sync {
    /// Decision at stage `j` (1-based) given covariate history and realized
    /// prior treatments.
    fn decide(&self, j: usize, xbar: &[&[f64]], a_prev: &[u8]) -> u8;
}

impl KPolicy for LinearPolicy {
    fn decide(&self, j: usize, xbar: &[&[f64]], a_prev: &[u8]) -> u8 {
        match j {
            1 => self.decide1(xbar[0]),
            2 => self.decide2_parts(xbar[0], a_prev[0], xbar[1]),
            _ => panic!("two-stage policy asked for stage {j}"),
        }
    }
}

/// Per-stage linear threshold rules over (1, x_1..., x_j..., a_1..a_{j-1}).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KLinearPolicy {
    pub betas: Vec<Vec<f64>>,
}

impl KPolicy for KLinearPolicy {
    fn decide(&self, j: usize, xbar: &[&[f64]], a_prev: &[u8]) -> u8 {
        let beta = &self.betas[j - 1];
        let mut s = beta[0];
        let mut idx = 1;
        for x in xbar {
            for v in *x {
                s += beta[idx] * v;
                idx += 1;
            }
        }
        for &a in a_prev {
            s += beta[idx] * a as f64;
            idx += 1;
        }
        debug_assert_eq!(idx, beta.len());
        u8::from(s > 0.0)
    }
}

/// Nuisance evaluations for the K-stage scores.
pub trait KNuisances: Sync {
    fn k(&self) -> usize;
    /// Joint propensity-censoring probability at the all-control arm,
    /// phi_j^{0_j}(xbar_j).
    fn phi_zero(&self, j: usize, xbar: &[&[f64]]) -> f64;
    /// The covariate-measurable part of Q_{S,j}: the backward-recursive
    /// expected survival product for stages j..K on the all-control path.
    fn q_s(&self, j: usize, xbar: &[&[f64]]) -> f64;
    /// phi_j at the realized treatment prefix.
    fn phi_at(&self, j: usize, xbar: &[&[f64]], abar: &[u8]) -> f64;
    /// p_j at the realized treatment prefix.
    fn p_at(&self, j: usize, xbar: &[&[f64]], abar: &[u8]) -> f64;
    /// Policy-bound Q_{Y,j} given the realized prefix a_1..a_{j-1}.
    fn q_y(&self, j: usize, xbar: &[&[f64]], a_prev: &[u8]) -> f64;
}

/// K-stage denominator score: telescoping correction of the all-control
/// survival product, written as q_1 plus increments
/// `(indicator/weight)_j (Q_{S,j+1} - Q_{S,j})` with Q_{S,K+1} the realized
/// survival indicator product.
pub fn phi_d_k(t: &KTrajectory, nuis: &dyn KNuisances) -> f64 {
    let k = nuis.k();
    let mut q_cur = nuis.q_s(1, &t.xbar(1));
    let mut out = q_cur;
    let mut inv_phi = 1.0;
    for j in 1..=k {
        let Some(st) = t.stages.get(j - 1) else {
            break;
        };
        if st.a != 0 || st.c != 0 {
            break;
        }
        inv_phi /= nuis.phi_zero(j, &t.xbar(j));
        let survived = st.s == Some(1);
        let q_next = if j < k {
            if survived && t.stages.len() > j {
                nuis.q_s(j + 1, &t.xbar(j + 1))
            } else {
                0.0
            }
        } else if survived {
            1.0
        } else {
            0.0
        };
        out += inv_phi * (q_next - q_cur);
        if !survived {
            break;
        }
        q_cur = q_next;
    }
    out
}

/// K-stage numerator score for a policy.
pub fn phi_n_k(
    t: &KTrajectory,
    policy: &dyn KPolicy,
    nuis: &dyn KNuisances,
    phi_d: f64,
) -> f64 {
    let k = nuis.k();
    let q_y1 = nuis.q_y(1, &t.xbar(1), &[]);
    let q_s1 = nuis.q_s(1, &t.xbar(1));
    let mut out = q_y1 * phi_d;
    let mut w = 1.0;
    let mut q_prev = q_y1;
    for j in 1..=k {
        let Some(st) = t.stages.get(j - 1) else {
            break;
        };
        let a_prev = t.abar(j - 1);
        let d_j = policy.decide(j, &t.xbar(j), &a_prev);
        if st.a != d_j || st.c != 0 || st.s != Some(1) {
            break;
        }
        let abar = t.abar(j);
        w /= nuis.phi_at(j, &t.xbar(j), &abar) * nuis.p_at(j, &t.xbar(j), &abar);
        let q_next = if j < k {
            nuis.q_y(j + 1, &t.xbar(j + 1), &abar)
        } else {
            t.y.expect("complete trajectory has outcome")
        };
        out += w * (q_next - q_prev) * q_s1;
        q_prev = q_next;
    }
    out
}

/// K-stage multiply robust value estimate with EIF-based standard error.
pub fn v_mr_general_k(
    rows: &[KTrajectory],
    policy: &dyn KPolicy,
    nuis: &dyn KNuisances,
) -> Result<EstimateReport> {
    if rows.is_empty() {
        return Err(Error::InvalidDataset("no rows".into()));
    }
    let n = rows.len();
    let mut pd = Vec::with_capacity(n);
    let mut pn = Vec::with_capacity(n);
    for t in rows {
        let d = phi_d_k(t, nuis);
        pd.push(d);
        pn.push(phi_n_k(t, policy, nuis, d));
    }
    let mean_pd = math::mean(&pd);
    if mean_pd <= DENOMINATOR_FLOOR {
        return Err(Error::NonpositiveDenominator(mean_pd));
    }
    let value = math::mean(&pn) / mean_pd;
    let psi: Vec<f64> = pd
        .iter()
        .zip(&pn)
        .map(|(&d, &nv)| (nv - value * d) / mean_pd)
        .collect();
    let (se, ci) = eif_variance(&psi, value);
    Ok(EstimateReport {
        estimator: EstimatorKind::MrGeneralK,
        value,
        se: Some(se),
        ci_low: Some(ci.0),
        ci_high: Some(ci.1),
        n,
        mean_phi_d: mean_pd,
        trim_count: 0,
        warnings: Vec::new(),
    })
}

/// Bridge a two-stage nuisance suite (plus its bound policy) into the
/// K-stage interface; [`v_mr_general_k`] over this adapter must agree with
/// the dedicated two-stage estimator.
pub struct TwoStageAdapter<'a> {
    pub nuis: &'a dyn Nuisances,
    pub policy: &'a LinearPolicy,
}

impl KNuisances for TwoStageAdapter<'_> {
    fn k(&self) -> usize {
        2
    }
    fn phi_zero(&self, j: usize, xbar: &[&[f64]]) -> f64 {
        match j {
            1 => self.nuis.phi1(0, xbar[0]),
            2 => self.nuis.phi2((0, 0), xbar[0], xbar[1]),
            _ => unreachable!(),
        }
    }
    fn q_s(&self, j: usize, xbar: &[&[f64]]) -> f64 {
        match j {
            1 => self.nuis.p1(0, xbar[0]) * self.nuis.m_p2((0, 0), xbar[0]),
            2 => self.nuis.p2((0, 0), xbar[0], xbar[1]),
            _ => unreachable!(),
        }
    }
    fn phi_at(&self, j: usize, xbar: &[&[f64]], abar: &[u8]) -> f64 {
        match j {
            1 => self.nuis.phi1(abar[0], xbar[0]),
            2 => self.nuis.phi2((abar[0], abar[1]), xbar[0], xbar[1]),
            _ => unreachable!(),
        }
    }
    fn p_at(&self, j: usize, xbar: &[&[f64]], abar: &[u8]) -> f64 {
        match j {
            1 => self.nuis.p1(abar[0], xbar[0]),
            2 => self.nuis.p2((abar[0], abar[1]), xbar[0], xbar[1]),
            _ => unreachable!(),
        }
    }
    fn q_y(&self, j: usize, xbar: &[&[f64]], a_prev: &[u8]) -> f64 {
        match j {
            1 => self.nuis.m_mu2(xbar[0]),
            2 => {
                let a1 = a_prev[0];
                let d2 = self.policy.decide2_parts(xbar[0], a1, xbar[1]);
                self.nuis.mu2((a1, d2), xbar[0], xbar[1])
            }
            _ => unreachable!(),
        }
    }
}

// ---------------------------------------------------------------------------
// Exactly enumerable toy processes (binary covariates)
// ---------------------------------------------------------------------------

/// A K-stage process with binary covariates and stagewise-Markov
/// probabilities; everything is exactly enumerable.
///
/// Indices: `e[j][x]` is P(A_{j+1}=1 | X_{j+1}=x) for 0-based j; `c`, `p`
/// analogously with the realized arm as the final index; `trans[j][x][a]` is
/// P(X_{j+2}=1 | X_{j+1}=x, A_{j+1}=a); `mu[x][bits]` is the outcome mean
/// for final covariate `x` and treatment path `bits` (stage 1 = lowest bit).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KToyConfig {
    pub k: usize,
    pub x1_p: f64,
    pub e: Vec<[f64; 2]>,
    pub c: Vec<[[f64; 2]; 2]>,
    pub p: Vec<[[f64; 2]; 2]>,
    pub trans: Vec<[[f64; 2]; 2]>,
    pub mu: [Vec<f64>; 2],
    pub y_sd: f64,
}

impl KToyConfig {
    pub fn arm_bits(abar: &[u8]) -> usize {
        abar.iter()
            .enumerate()
            .fold(0usize, |acc, (i, &a)| acc | ((a as usize) << i))
    }

    /// A monotone K=2 configuration satisfying principal ignorability
    /// (stage-2 survival free of x2), used by the identification checks.
    pub fn two_stage_ignorable() -> Self {
        KToyConfig {
            k: 2,
            x1_p: 0.4,
            e: vec![[0.45, 0.6], [0.5, 0.55]],
            c: vec![[[0.9, 0.92], [0.93, 0.95]], [[0.88, 0.9], [0.91, 0.94]]],
            p: vec![
                [[0.75, 0.85], [0.8, 0.9]],
                // Stage-2 survival varies by arm only, monotone in treatment.
                [[0.7, 0.8], [0.7, 0.8]],
            ],
            trans: vec![[[0.35, 0.55], [0.45, 0.7]]],
            mu: [
                vec![1.0, 1.6, 1.3, 2.4],
                vec![1.4, 2.0, 1.8, 3.1],
            ],
            y_sd: 0.8,
        }
    }

    /// A K=3 configuration where survival is free of the running covariate
    /// and monotone in treatment, so the latent always-survivor stratum mean
    /// coincides with the identification exactly.
    pub fn three_stage_ignorable() -> Self {
        KToyConfig {
            k: 3,
            x1_p: 0.5,
            e: vec![[0.5, 0.6], [0.45, 0.55], [0.5, 0.5]],
            c: vec![
                [[0.93, 0.95], [0.94, 0.96]],
                [[0.92, 0.94], [0.9, 0.93]],
                [[0.95, 0.97], [0.94, 0.96]],
            ],
            p: vec![
                [[0.8, 0.9], [0.8, 0.9]],
                [[0.75, 0.85], [0.75, 0.85]],
                [[0.82, 0.9], [0.82, 0.9]],
            ],
            trans: vec![[[0.4, 0.6], [0.5, 0.7]], [[0.45, 0.65], [0.5, 0.7]]],
            mu: [
                (0..8).map(|b| 0.5 + 0.3 * b as f64).collect(),
                (0..8).map(|b| 1.1 + 0.25 * b as f64).collect(),
            ],
            y_sd: 0.7,
        }
    }

    /// A K=3 configuration with treatment-monotone survival.
    pub fn three_stage() -> Self {
        KToyConfig {
            k: 3,
            x1_p: 0.5,
            e: vec![[0.5, 0.6], [0.45, 0.55], [0.5, 0.5]],
            c: vec![
                [[0.93, 0.95], [0.94, 0.96]],
                [[0.92, 0.94], [0.9, 0.93]],
                [[0.95, 0.97], [0.94, 0.96]],
            ],
            p: vec![
                [[0.8, 0.9], [0.85, 0.93]],
                [[0.75, 0.85], [0.8, 0.88]],
                [[0.82, 0.9], [0.78, 0.86]],
            ],
            trans: vec![[[0.4, 0.6], [0.5, 0.7]], [[0.45, 0.65], [0.35, 0.6]]],
            mu: [
                (0..8).map(|b| 0.5 + 0.3 * b as f64).collect(),
                (0..8).map(|b| 1.1 + 0.25 * b as f64).collect(),
            ],
            y_sd: 0.7,
        }
    }
}

/// Exact K-stage nuisances for a toy configuration, policy-bound for the
/// outcome recursions.
pub struct ToyKNuisances<'a, P: KPolicy> {
    pub cfg: &'a KToyConfig,
    pub policy: &'a P,
}

impl<P: KPolicy> ToyKNuisances<'_, P> {
    fn last_x(xbar: &[&[f64]]) -> usize {
        (xbar[xbar.len() - 1][0] > 0.5) as usize
    }

    /// Backward-recursive q_j(x_j): expected all-control survival product
    /// for stages j..K given the current covariate.
    fn q_s_rec(&self, j: usize, x: usize) -> f64 {
        let cfg = self.cfg;
        let mut q = cfg.p[cfg.k - 1].map(|row| row[0]).to_vec(); // q_K by x
        let mut stage = cfg.k;
        while stage > j {
            stage -= 1;
            let t = &cfg.trans[stage - 1];
            let prev: Vec<f64> = (0..2)
                .map(|xv| {
                    let pnext = t[xv][0];
                    cfg.p[stage - 1][xv][0] * ((1.0 - pnext) * q[0] + pnext * q[1])
                })
                .collect();
            q = prev;
        }
        q[x]
    }

    fn q_y_rec(&self, j: usize, xbar_bits: &mut Vec<usize>, a_prev: &[u8]) -> f64 {
        let cfg = self.cfg;
        let xs_owned: Vec<Vec<f64>> = xbar_bits.iter().map(|&b| vec![b as f64]).collect();
        let xs: Vec<&[f64]> = xs_owned.iter().map(|v| v.as_slice()).collect();
        let d = self.policy.decide(j, &xs, a_prev);
        let mut abar = a_prev.to_vec();
        abar.push(d);
        let xj = xbar_bits[j - 1];
        if j == cfg.k {
            return cfg.mu[xj][KToyConfig::arm_bits(&abar)];
        }
        let pnext = cfg.trans[j - 1][xj][d as usize];
        let mut total = 0.0;
        for xn in 0..2usize {
            let w = if xn == 1 { pnext } else { 1.0 - pnext };
            if w == 0.0 {
                continue;
            }
            xbar_bits.push(xn);
            total += w * self.q_y_rec(j + 1, xbar_bits, &abar);
            xbar_bits.pop();
        }
        total
    }
}

impl<P: KPolicy> KNuisances for ToyKNuisances<'_, P> {
    fn k(&self) -> usize {
        self.cfg.k
    }
    fn phi_zero(&self, j: usize, xbar: &[&[f64]]) -> f64 {
        let x = Self::last_x(xbar);
        (1.0 - self.cfg.e[j - 1][x]) * self.cfg.c[j - 1][x][0]
    }
    fn q_s(&self, j: usize, xbar: &[&[f64]]) -> f64 {
        self.q_s_rec(j, Self::last_x(xbar))
    }
    fn phi_at(&self, j: usize, xbar: &[&[f64]], abar: &[u8]) -> f64 {
        let x = Self::last_x(xbar);
        let a = abar[j - 1] as usize;
        let e = if a == 1 {
            self.cfg.e[j - 1][x]
        } else {
            1.0 - self.cfg.e[j - 1][x]
        };
        e * self.cfg.c[j - 1][x][a]
    }
    fn p_at(&self, j: usize, xbar: &[&[f64]], abar: &[u8]) -> f64 {
        let x = Self::last_x(xbar);
        self.cfg.p[j - 1][x][abar[j - 1] as usize]
    }
    fn q_y(&self, j: usize, xbar: &[&[f64]], a_prev: &[u8]) -> f64 {
        let mut bits: Vec<usize> = xbar.iter().map(|x| (x[0] > 0.5) as usize).collect();
        self.q_y_rec(j, &mut bits, a_prev)
    }
}

/// Simulate `n` trajectories from a toy configuration.
pub fn toy_simulate_k(cfg: &KToyConfig, n: usize, seed: u64) -> Vec<KTrajectory> {
    use rand::Rng;
    (0..n as u64)
        .map(|i| {
            let mut r = rng::stream(seed, &[0x70, i]);
            let mut x = (r.gen::<f64>() < cfg.x1_p) as usize;
            let mut stages = Vec::new();
            let mut y = None;
            for j in 0..cfg.k {
                let a = u8::from(r.gen::<f64>() < cfg.e[j][x]);
                if r.gen::<f64>() >= cfg.c[j][x][a as usize] {
                    stages.push(KStage {
                        x: vec![x as f64],
                        a,
                        c: 1,
                        s: None,
                    });
                    break;
                }
                let s = u8::from(r.gen::<f64>() < cfg.p[j][x][a as usize]);
                stages.push(KStage {
                    x: vec![x as f64],
                    a,
                    c: 0,
                    s: Some(s),
                });
                if s == 0 {
                    break;
                }
                if j + 1 == cfg.k {
                    let bits = KToyConfig::arm_bits(
                        &stages.iter().map(|st| st.a).collect::<Vec<_>>(),
                    );
                    let u1: f64 = r.gen::<f64>().max(1e-300);
                    let u2: f64 = r.gen();
                    let z =
                        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                    y = Some(cfg.mu[x][bits] + cfg.y_sd * z);
                } else {
                    x = (r.gen::<f64>() < cfg.trans[j][x][a as usize]) as usize;
                }
            }
            let t = KTrajectory { stages, y };
            debug_assert!(t.validate(cfg.k).is_ok());
            t
        })
        .collect()
}

/// Exact plug-in value of the K-stage identification with true models:
/// the backward-recursive survival weight q_1(x1) and policy recursion
/// Q_{Y,1}(x1), averaged over the baseline law.
pub fn toy_plugin_value<P: KPolicy>(cfg: &KToyConfig, policy: &P) -> f64 {
    let nuis = ToyKNuisances { cfg, policy };
    let mut num = 0.0;
    let mut den = 0.0;
    for x1 in 0..2usize {
        let px = if x1 == 1 { cfg.x1_p } else { 1.0 - cfg.x1_p };
        let w = nuis.q_s_rec(1, x1);
        let mut bits = vec![x1];
        let qy1 = nuis.q_y_rec(1, &mut bits, &[]);
        num += px * w * qy1;
        den += px * w;
    }
    num / den
}

/// Exact always-survivor stratum mean for the K = 2 toy under the shared-
/// uniform coupling: enumerate the latent covariate coupling regions and the
/// joint survival events. Requires treatment-monotone survival tables (the
/// all-control arm binds), and stage-2 survival free of x2 for the stratum
/// mean to match the identification.
pub fn toy_two_stage_stratum(
    cfg: &KToyConfig,
    policy: &LinearPolicy,
) -> (f64, f64) {
    assert_eq!(cfg.k, 2);
    let mut mass = 0.0; // P(U = always survivor)
    let mut mean = 0.0; // E[Y^pi ; U]
    for x1 in 0..2usize {
        let px1 = if x1 == 1 { cfg.x1_p } else { 1.0 - cfg.x1_p };
        let p1_min = cfg.p[0][x1][0].min(cfg.p[0][x1][1]);
        // Coupled intermediate covariates: thresholds on one shared uniform.
        let t0 = cfg.trans[0][x1][0];
        let t1 = cfg.trans[0][x1][1];
        let lo = t0.min(t1);
        let hi = t0.max(t1);
        // Regions: u < lo -> both arms yield x2 = 1; lo <= u < hi -> only the
        // larger-threshold arm does; u >= hi -> both 0.
        let regions = [
            (lo, [1usize, 1usize]),
            (hi - lo, if t0 < t1 { [0, 1] } else { [1, 0] }),
            (1.0 - hi, [0, 0]),
        ];
        for (pr, x2_by_arm) in regions {
            if pr <= 0.0 {
                continue;
            }
            // Survive stage 2 under every arm: shared uniform against each
            // arm's probability, so the minimum binds.
            let mut p2_min = f64::INFINITY;
            for a1 in 0..2usize {
                for a2 in 0..2usize {
                    p2_min = p2_min.min(cfg.p[1][x2_by_arm[a1]][a2]);
                }
            }
            let p_u = p1_min * p2_min;
            let d1 = policy.decide1(&[x1 as f64]);
            let x2 = x2_by_arm[d1 as usize];
            let d2 = policy.decide2_parts(&[x1 as f64], d1, &[x2 as f64]);
            let bits = KToyConfig::arm_bits(&[d1, d2]);
            mass += px1 * pr * p_u;
            mean += px1 * pr * p_u * cfg.mu[x2][bits];
        }
    }
    (mean / mass, mass)
}

/// Exact omega-weighted mean for the K = 2 toy: the identification-side
/// counterpart of [`toy_two_stage_stratum`].
pub fn toy_two_stage_weighted(cfg: &KToyConfig, policy: &LinearPolicy) -> (f64, f64) {
    assert_eq!(cfg.k, 2);
    let mut num = 0.0;
    let mut den = 0.0;
    for x1 in 0..2usize {
        let px1 = if x1 == 1 { cfg.x1_p } else { 1.0 - cfg.x1_p };
        // p1^0(x1) * m_p2^{00}(x1)
        let t0 = cfg.trans[0][x1][0];
        let m_p2 = (1.0 - t0) * cfg.p[1][0][0] + t0 * cfg.p[1][1][0];
        let w = cfg.p[0][x1][0] * m_p2;
        // m_mu2^pi(x1)
        let d1 = policy.decide1(&[x1 as f64]);
        let tpi = cfg.trans[0][x1][d1 as usize];
        let mut m_mu = 0.0;
        for x2 in 0..2usize {
            let p = if x2 == 1 { tpi } else { 1.0 - tpi };
            let d2 = policy.decide2_parts(&[x1 as f64], d1, &[x2 as f64]);
            m_mu += p * cfg.mu[x2][KToyConfig::arm_bits(&[d1, d2])];
        }
        num += px1 * w * m_mu;
        den += px1 * w;
    }
    (num / den, den)
}

/// Two-stage [`Nuisances`] view of a K = 2 toy configuration with exact
/// conditional means, for running the dedicated two-stage estimator on toy
/// data.
pub struct ToyTwoStageNuisances<'a> {
    pub cfg: &'a KToyConfig,
    pub policy: &'a LinearPolicy,
}

impl ToyTwoStageNuisances<'_> {
    fn xb(x: &[f64]) -> usize {
        (x[0] > 0.5) as usize
    }
}

impl Nuisances for ToyTwoStageNuisances<'_> {
    fn e1(&self, a1: u8, x1: &[f64]) -> f64 {
        let p = self.cfg.e[0][Self::xb(x1)];
        if a1 == 1 {
            p
        } else {
            1.0 - p
        }
    }
    fn c1(&self, a1: u8, x1: &[f64]) -> f64 {
        self.cfg.c[0][Self::xb(x1)][a1 as usize]
    }
    fn p1(&self, a1: u8, x1: &[f64]) -> f64 {
        self.cfg.p[0][Self::xb(x1)][a1 as usize]
    }
    fn e2(&self, arm: (u8, u8), _x1: &[f64], x2: &[f64]) -> f64 {
        let p = self.cfg.e[1][Self::xb(x2)];
        if arm.1 == 1 {
            p
        } else {
            1.0 - p
        }
    }
    fn c2(&self, arm: (u8, u8), _x1: &[f64], x2: &[f64]) -> f64 {
        self.cfg.c[1][Self::xb(x2)][arm.1 as usize]
    }
    fn p2(&self, arm: (u8, u8), _x1: &[f64], x2: &[f64]) -> f64 {
        self.cfg.p[1][Self::xb(x2)][arm.1 as usize]
    }
    fn mu2(&self, arm: (u8, u8), _x1: &[f64], x2: &[f64]) -> f64 {
        self.cfg.mu[Self::xb(x2)][KToyConfig::arm_bits(&[arm.0, arm.1])]
    }
    fn m_p2(&self, arm: (u8, u8), x1: &[f64]) -> f64 {
        let t = self.cfg.trans[0][Self::xb(x1)][arm.0 as usize];
        (1.0 - t) * self.cfg.p[1][0][arm.1 as usize] + t * self.cfg.p[1][1][arm.1 as usize]
    }
    fn m_mu2(&self, x1: &[f64]) -> f64 {
        let x1b = Self::xb(x1);
        let d1 = self.policy.decide1(x1);
        let t = self.cfg.trans[0][x1b][d1 as usize];
        let mut m = 0.0;
        for x2 in 0..2usize {
            let p = if x2 == 1 { t } else { 1.0 - t };
            let d2 = self.policy.decide2_parts(x1, d1, &[x2 as f64]);
            m += p * self.cfg.mu[x2][KToyConfig::arm_bits(&[d1, d2])];
        }
        m
    }
}

/// Convert K = 2 toy trajectories into the two-stage schema.
pub fn toy_to_two_stage(rows: &[KTrajectory]) -> Result<crate::trajectory::Dataset> {
    let mut out = Vec::with_capacity(rows.len());
    for t in rows {
        let s1 = &t.stages[0];
        let record = crate::trajectory::TrajectoryRecord {
            x1: s1.x.clone(),
            a1: s1.a,
            c1: s1.c,
            s1: s1.s,
            x2: t.stages.get(1).map(|s| s.x.clone()),
            a2: t.stages.get(1).map(|s| s.a),
            c2: t.stages.get(1).map(|s| s.c),
            s2: t.stages.get(1).and_then(|s| s.s),
            y: t.y,
        };
        out.push(Trajectory::new(record)?);
    }
    crate::trajectory::Dataset::from_rows(out, Some(1))
}
