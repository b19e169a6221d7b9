//! J-fold cross-fitted MR estimation: nuisances are fit on each fold's
//! complement and scored on the held-out fold, and the value is the
//! fold-size-weighted combination of the per-fold estimates.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::estimators::{self, EstimateReport, EstimatorKind, DENOMINATOR_FLOOR};
use crate::math;
use crate::nuisance::{self, Nuisances, SuiteConfig};
use crate::policy::LinearPolicy;
use crate::rng;
use crate::trajectory::Dataset;
use crate::Result;

/// A deterministic partition of row indices into J non-empty folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    assignments: Vec<usize>,
    j: usize,
    seed: u64,
}

impl FoldPlan {
    /// Seeded uniform shuffle, then contiguous blocks.
    pub fn new(n: usize, j: usize, seed: u64) -> Result<Self> {
        if j < 2 {
            return Err(Error::InvalidConfig(format!("folds must be >= 2, got {j}")));
        }
        if n < j {
            return Err(Error::InvalidConfig(format!(
                "cannot split {n} rows into {j} non-empty folds"
            )));
        }
        let order = shuffled(n, seed, &[0xF0 , 0x1D]);
        let mut assignments = vec![0usize; n];
        for (pos, &row) in order.iter().enumerate() {
            // Blocks of near-equal size: fold = floor(pos * j / n).
            assignments[row] = pos * j / n;
        }
        Ok(FoldPlan {
            assignments,
            j,
            seed,
        })
    }

    /// Stratified on the missingness pattern (C1, S1, C2, S2): rows are
    /// grouped by pattern, shuffled within groups, and dealt round-robin.
    pub fn stratified(d: &Dataset, j: usize, seed: u64) -> Result<Self> {
        let n = d.len();
        if j < 2 {
            return Err(Error::InvalidConfig(format!("folds must be >= 2, got {j}")));
        }
        if n < j {
            return Err(Error::InvalidConfig(format!(
                "cannot split {n} rows into {j} non-empty folds"
            )));
        }
        let mut groups: std::collections::BTreeMap<u16, Vec<usize>> = Default::default();
        for (i, t) in d.rows().iter().enumerate() {
            let key = (t.c1() as u16)
                | ((t.s1().map_or(2, u16::from)) << 2)
                | ((t.c2().map_or(2, u16::from)) << 4)
                | ((t.s2().map_or(2, u16::from)) << 6);
            groups.entry(key).or_default().push(i);
        }
        let mut assignments = vec![0usize; n];
        let mut cursor = 0usize;
        for (key, rows) in groups {
            let order = shuffled(rows.len(), seed, &[0x57AF, key as u64]);
            for &pos in &order {
                assignments[rows[pos]] = cursor % j;
                cursor += 1;
            }
        }
        let plan = FoldPlan {
            assignments,
            j,
            seed,
        };
        for f in 0..j {
            if plan.fold_size(f) == 0 {
                return Err(Error::InvalidConfig(format!(
                    "stratified assignment left fold {f} empty"
                )));
            }
        }
        Ok(plan)
    }

    /// Build from explicit per-row fold indices.
    pub fn from_assignments(assignments: Vec<usize>, j: usize) -> Result<Self> {
        if j < 2 {
            return Err(Error::InvalidConfig(format!("folds must be >= 2, got {j}")));
        }
        for f in 0..j {
            if !assignments.contains(&f) {
                return Err(Error::InvalidConfig(format!("fold {f} is empty")));
            }
        }
        if assignments.iter().any(|&f| f >= j) {
            return Err(Error::InvalidConfig("fold index out of range".into()));
        }
        Ok(FoldPlan {
            assignments,
            j,
            seed: 0,
        })
    }

    pub fn folds(&self) -> usize {
        self.j
    }

    pub fn fold_of(&self, row: usize) -> usize {
        self.assignments[row]
    }

    pub fn fold_size(&self, fold: usize) -> usize {
        self.assignments.iter().filter(|&&f| f == fold).count()
    }
}

fn shuffled(n: usize, seed: u64, path: &[u64]) -> Vec<usize> {
    use rand::Rng;
    let mut r = rng::stream(seed, path);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let k = r.gen_range(0..=i);
        order.swap(i, k);
    }
    order
}

/// Cross-fitted MR estimate per the J-fold scheme: the point estimate is the
/// fold-size-weighted sum of out-of-fold estimates; the standard error pools
/// the out-of-fold influence values over the full sample.
pub fn crossfit_v_mr(
    d: &Dataset,
    policy: &LinearPolicy,
    cfg: &SuiteConfig,
    j: usize,
    seed: u64,
    stratified: bool,
) -> Result<EstimateReport> {
    let plan = if stratified {
        FoldPlan::stratified(d, j, seed)?
    } else {
        FoldPlan::new(d.len(), j, seed)?
    };
    crossfit_v_mr_with_plan(d, policy, cfg, &plan)
}

/// Cross-fitting against an explicit fold plan.
pub fn crossfit_v_mr_with_plan(
    d: &Dataset,
    policy: &LinearPolicy,
    cfg: &SuiteConfig,
    plan: &FoldPlan,
) -> Result<EstimateReport> {
    let n = d.len();
    let j = plan.folds();

    let per_fold: Vec<Result<(Vec<usize>, Vec<f64>, Vec<f64>, Vec<String>)>> = (0..j)
        .into_par_iter()
        .map(|fold| {
            let weights: Vec<f64> = (0..n)
                .map(|i| if plan.fold_of(i) == fold { 0.0 } else { 1.0 })
                .collect();
            let suite = nuisance::fit_suite(d, cfg, Some(policy), Some(&weights))
                .map_err(|e| fold_error(e, fold))?;
            let idx: Vec<usize> = (0..n).filter(|&i| plan.fold_of(i) == fold).collect();
            let mut pd = Vec::with_capacity(idx.len());
            let mut pn = Vec::with_capacity(idx.len());
            for &i in &idx {
                let t = &d.rows()[i];
                pd.push(estimators::phi_d(t, &suite));
                pn.push(estimators::phi_n(t, policy, &suite));
            }
            Ok((idx, pd, pn, suite.fit_warnings()))
        })
        .collect();

    let mut pd_all = vec![0.0; n];
    let mut pn_all = vec![0.0; n];
    let mut value = 0.0;
    let mut warnings = Vec::new();
    for fold_out in per_fold {
        let (idx, pd, pn, warns) = fold_out?;
        let fold_mean_pd = math::mean(&pd);
        if fold_mean_pd <= DENOMINATOR_FLOOR {
            return Err(Error::NonpositiveDenominator(fold_mean_pd));
        }
        let v_fold = math::mean(&pn) / fold_mean_pd;
        value += (idx.len() as f64 / n as f64) * v_fold;
        for (k, &i) in idx.iter().enumerate() {
            pd_all[i] = pd[k];
            pn_all[i] = pn[k];
        }
        for w in warns {
            if !warnings.contains(&w) {
                warnings.push(w);
            }
        }
    }

    let mean_pd = math::mean(&pd_all);
    if mean_pd <= DENOMINATOR_FLOOR {
        return Err(Error::NonpositiveDenominator(mean_pd));
    }
    let psi: Vec<f64> = pd_all
        .iter()
        .zip(&pn_all)
        .map(|(&pd, &pn)| (pn - value * pd) / mean_pd)
        .collect();
    let (se, ci) = estimators::eif_variance(&psi, value);
    Ok(EstimateReport {
        estimator: EstimatorKind::MrCrossfit,
        value,
        se: Some(se),
        ci_low: Some(ci.0),
        ci_high: Some(ci.1),
        n,
        mean_phi_d: mean_pd,
        trim_count: 0,
        warnings,
    })
}

fn fold_error(e: Error, fold: usize) -> Error {
    match e {
        Error::EmptyStratum(s) => Error::EmptyStratum(format!("{s} (fitting complement of fold {fold})")),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn folds_partition_and_are_deterministic() {
        let a = FoldPlan::new(103, 5, 9).unwrap();
        let b = FoldPlan::new(103, 5, 9).unwrap();
        assert_eq!(a, b);
        let total: usize = (0..5).map(|f| a.fold_size(f)).sum();
        assert_eq!(total, 103);
        for f in 0..5 {
            let s = a.fold_size(f);
            assert!(s == 20 || s == 21, "fold {f} size {s}");
        }
    }

    #[test]
    fn rejects_too_few_rows_or_folds() {
        assert!(FoldPlan::new(3, 5, 0).is_err());
        assert!(FoldPlan::new(10, 1, 0).is_err());
    }
}
