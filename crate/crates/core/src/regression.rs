//! Nuisance regression engines: logistic fits by iteratively reweighted
//! least squares and (weighted) least-squares conditional means, either on a
//! declared feature basis or on an additive natural-spline basis.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::features::{FeatureMap, NaturalSpline};
use crate::math::expit;
use crate::Result;

/// Linear predictors are clamped to this range before the logistic link so
/// evaluated probabilities stay strictly inside (0, 1).
const ETA_CLAMP: f64 = 36.0;

/// IRLS controls.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IrlsOptions {
    pub tolerance: f64,
    pub max_iter: usize,
    pub ridge: f64,
}

impl Default for IrlsOptions {
    fn default() -> Self {
        IrlsOptions {
            tolerance: 1e-8,
            max_iter: 100,
            ridge: 1e-10,
        }
    }
}

/// Fit diagnostics carried by a [`BinaryModel`].
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FitMeta {
    pub iterations: usize,
    pub log_likelihood: f64,
    /// Set when the likelihood is unbounded (separated data or a single
    /// observed class); the stored coefficients are the last iterate.
    pub separation: bool,
    pub warnings: Vec<String>,
}

/// A logistic-link binary regression model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BinaryModel {
    features: FeatureMap,
    coefficients: Vec<f64>,
    pub meta: FitMeta,
}

impl BinaryModel {
    /// Construct from known coefficients (used by ground-truth oracles).
    pub fn from_coefficients(features: FeatureMap, coefficients: Vec<f64>) -> Self {
        assert_eq!(features.len(), coefficients.len());
        BinaryModel {
            features,
            coefficients,
            meta: FitMeta::default(),
        }
    }

    /// Maximize the Bernoulli likelihood by IRLS on the feature basis.
    ///
    /// `rows` are covariate points, `labels` in {0, 1}; optional per-row
    /// weights (zero-weight rows are skipped). Rank-deficient designs are
    /// stabilized by escalating ridge jitter and reported in the warnings.
    pub fn fit(
        features: FeatureMap,
        rows: &[&[f64]],
        labels: &[f64],
        weights: Option<&[f64]>,
        opts: &IrlsOptions,
    ) -> Result<Self> {
        assert_eq!(rows.len(), labels.len());
        let n = rows.len();
        let k = features.len();
        if n == 0 {
            return Err(Error::EmptyStratum("logistic fit on empty data".into()));
        }
        let mut design = Vec::with_capacity(n * k);
        let mut buf = Vec::with_capacity(k);
        for r in rows {
            features.eval(r, &mut buf);
            design.extend_from_slice(&buf);
        }

        let w_of = |i: usize| weights.map_or(1.0, |w| w[i]);
        let (mut ones, mut zeros) = (0.0, 0.0);
        for i in 0..n {
            if labels[i] > 0.5 {
                ones += w_of(i);
            } else {
                zeros += w_of(i);
            }
        }
        let mut meta = FitMeta::default();
        if ones == 0.0 || zeros == 0.0 {
            // Single observed class: the MLE diverges. Return the clamped
            // intercept-only limit flagged as separated.
            let mut coefficients = vec![0.0; k];
            if let Some(pos) = features
                .terms()
                .iter()
                .position(|t| matches!(t, crate::features::Term::Intercept))
            {
                coefficients[pos] = if ones == 0.0 { -ETA_CLAMP } else { ETA_CLAMP };
            }
            meta.separation = true;
            meta.log_likelihood = 0.0;
            return Ok(BinaryModel {
                features,
                coefficients,
                meta,
            });
        }

        let mut beta = DVector::<f64>::zeros(k);
        let mut converged = false;
        for iter in 0..opts.max_iter {
            let mut xtwx = DMatrix::<f64>::zeros(k, k);
            let mut score = DVector::<f64>::zeros(k);
            for i in 0..n {
                let wi = w_of(i);
                if wi == 0.0 {
                    continue;
                }
                let xi = &design[i * k..(i + 1) * k];
                let eta: f64 = xi.iter().zip(beta.iter()).map(|(a, b)| a * b).sum();
                let p = expit(eta.clamp(-ETA_CLAMP, ETA_CLAMP));
                let wirls = wi * (p * (1.0 - p)).max(1e-10);
                let resid = wi * (labels[i] - p);
                for a in 0..k {
                    score[a] += resid * xi[a];
                    for b in a..k {
                        xtwx[(a, b)] += wirls * xi[a] * xi[b];
                    }
                }
            }
            for a in 0..k {
                for b in 0..a {
                    xtwx[(a, b)] = xtwx[(b, a)];
                }
                xtwx[(a, a)] += opts.ridge;
            }
            let delta = solve_spd(xtwx, score, &mut meta.warnings)?;
            beta += &delta;
            meta.iterations = iter + 1;
            if delta.amax() < opts.tolerance {
                converged = true;
                break;
            }
        }

        let mut ll = 0.0;
        let mut max_eta: f64 = 0.0;
        for i in 0..n {
            let wi = w_of(i);
            if wi == 0.0 {
                continue;
            }
            let xi = &design[i * k..(i + 1) * k];
            let eta: f64 = xi.iter().zip(beta.iter()).map(|(a, b)| a * b).sum();
            max_eta = max_eta.max(eta.abs());
            let p = expit(eta.clamp(-ETA_CLAMP, ETA_CLAMP));
            ll += wi * (labels[i] * p.ln() + (1.0 - labels[i]) * (1.0 - p).ln());
        }
        if !converged && max_eta > 15.0 {
            meta.separation = true;
        } else if !converged {
            meta.warnings
                .push(format!("IRLS not converged after {} iterations", opts.max_iter));
        }
        meta.log_likelihood = ll;
        Ok(BinaryModel {
            features,
            coefficients: beta.iter().copied().collect(),
            meta,
        })
    }

    /// Untrimmed probability, strictly inside (0, 1).
    pub fn prob(&self, x: &[f64]) -> f64 {
        let mut eta = 0.0;
        for (c, t) in self.coefficients.iter().zip(self.features.terms()) {
            eta += c * term_eval(t, x);
        }
        expit(eta.clamp(-ETA_CLAMP, ETA_CLAMP))
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn features(&self) -> &FeatureMap {
        &self.features
    }
}

#[inline]
fn term_eval(t: &crate::features::Term, x: &[f64]) -> f64 {
    use crate::features::Term::*;
    match *t {
        Intercept => 1.0,
        Linear(i) => x[i],
        Power(i, k) => x[i].powi(k as i32),
        Exp(i) => x[i].exp(),
        Interaction(i, j) => x[i] * x[j],
    }
}

/// Basis choice for conditional-mean models.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum MeanBasis {
    /// Linear model on a declared feature basis.
    Map(FeatureMap),
    /// Additive natural cubic splines, one per covariate coordinate, sharing
    /// a single intercept.
    Spline(Vec<NaturalSpline>),
}

impl MeanBasis {
    pub fn len(&self) -> usize {
        match self {
            MeanBasis::Map(fm) => fm.len(),
            MeanBasis::Spline(splines) => {
                1 + splines.iter().map(|s| s.len() - 1).sum::<usize>()
            }
        }
    }

    pub fn eval(&self, x: &[f64], out: &mut Vec<f64>) {
        match self {
            MeanBasis::Map(fm) => fm.eval(x, out),
            MeanBasis::Spline(splines) => {
                out.clear();
                out.push(1.0);
                let mut col = Vec::new();
                for (j, s) in splines.iter().enumerate() {
                    s.eval(x[j], &mut col);
                    out.extend_from_slice(&col[1..]);
                }
            }
        }
    }
}

/// A least-squares conditional-mean model with optional symmetric clipping.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeanModel {
    basis: MeanBasis,
    coefficients: Vec<f64>,
    clip: Option<f64>,
    pub warnings: Vec<String>,
}

impl MeanModel {
    pub fn from_coefficients(basis: MeanBasis, coefficients: Vec<f64>, clip: Option<f64>) -> Self {
        MeanModel {
            basis,
            coefficients,
            clip,
            warnings: Vec::new(),
        }
    }

    /// Weighted least squares on the given basis.
    pub fn fit(
        basis: MeanBasis,
        rows: &[&[f64]],
        targets: &[f64],
        weights: Option<&[f64]>,
        clip: Option<f64>,
    ) -> Result<Self> {
        assert_eq!(rows.len(), targets.len());
        let n = rows.len();
        let k = basis.len();
        if n == 0 {
            return Err(Error::EmptyStratum("mean fit on empty data".into()));
        }
        if n < k {
            return Err(Error::DegenerateDesign(format!(
                "{} observations for {} basis columns",
                n, k
            )));
        }
        let mut xtx = DMatrix::<f64>::zeros(k, k);
        let mut xty = DVector::<f64>::zeros(k);
        let mut buf = Vec::with_capacity(k);
        for i in 0..n {
            let wi = weights.map_or(1.0, |w| w[i]);
            if wi == 0.0 {
                continue;
            }
            basis.eval(rows[i], &mut buf);
            for a in 0..k {
                xty[a] += wi * buf[a] * targets[i];
                for b in a..k {
                    xtx[(a, b)] += wi * buf[a] * buf[b];
                }
            }
        }
        for a in 0..k {
            for b in 0..a {
                xtx[(a, b)] = xtx[(b, a)];
            }
        }
        let mut warnings = Vec::new();
        let coef = solve_spd(xtx, xty, &mut warnings)?;
        Ok(MeanModel {
            basis,
            coefficients: coef.iter().copied().collect(),
            clip,
            warnings,
        })
    }

    /// Convenience: spline fit with decile knots per covariate coordinate.
    pub fn fit_spline_quantiles(
        rows: &[&[f64]],
        targets: &[f64],
        weights: Option<&[f64]>,
        clip: Option<f64>,
    ) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyStratum("spline fit on empty data".into()));
        }
        let dim = rows[0].len();
        let mut splines = Vec::with_capacity(dim);
        for j in 0..dim {
            let xs: Vec<f64> = rows
                .iter()
                .zip(0..)
                .filter(|&(_, i)| weights.map_or(true, |w| w[i] > 0.0))
                .map(|(r, _)| r[j])
                .collect();
            splines.push(NaturalSpline::from_quantiles(&xs)?);
        }
        MeanModel::fit(MeanBasis::Spline(splines), rows, targets, weights, clip)
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut buf = Vec::with_capacity(self.coefficients.len());
        self.basis.eval(x, &mut buf);
        let mut v: f64 = buf
            .iter()
            .zip(&self.coefficients)
            .map(|(a, b)| a * b)
            .sum();
        if let Some(l) = self.clip {
            v = v.clamp(-l, l);
        }
        v
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn scale_coefficients(&mut self, factor: f64) {
        for c in &mut self.coefficients {
            *c *= factor;
        }
    }
}

/// Solve an SPD system by Cholesky, escalating ridge jitter on failure.
fn solve_spd(
    mut a: DMatrix<f64>,
    b: DVector<f64>,
    warnings: &mut Vec<String>,
) -> Result<DVector<f64>> {
    if let Some(ch) = a.clone().cholesky() {
        return Ok(ch.solve(&b));
    }
    let mut jitter = 1e-10;
    while jitter <= 1e-4 {
        let mut aj = a.clone();
        for i in 0..aj.nrows() {
            aj[(i, i)] += jitter;
        }
        if let Some(ch) = aj.cholesky() {
            warnings.push(format!(
                "rank-deficient design stabilized with ridge {jitter:.0e}"
            ));
            return Ok(ch.solve(&b));
        }
        jitter *= 100.0;
    }
    a.fill(0.0);
    Err(Error::DegenerateDesign(
        "normal equations not positive definite".into(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::Term;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    #[test]
    fn logistic_recovers_coefficients_at_scale() {
        // Labels from logit(p) = 0.3 + 0.2 x1 at n = 1e6.
        let mut rng = crate::rng::stream(11, &[0]);
        let n = 1_000_000;
        let mut xs = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(n);
        for _ in 0..n {
            let x: f64 = rng.gen_range(-1.0..1.0);
            let p = expit(0.3 + 0.2 * x);
            ys.push(if rng.gen::<f64>() < p { 1.0 } else { 0.0 });
            xs.push([x]);
        }
        let rows: Vec<&[f64]> = xs.iter().map(|r| r.as_slice()).collect();
        let m = BinaryModel::fit(
            FeatureMap::linear(1),
            &rows,
            &ys,
            None,
            &IrlsOptions::default(),
        )
        .unwrap();
        assert!(!m.meta.separation);
        assert_abs_diff_eq!(m.coefficients()[0], 0.3, epsilon = 0.01);
        assert_abs_diff_eq!(m.coefficients()[1], 0.2, epsilon = 0.01);
    }

    #[test]
    fn logistic_single_class_flags_separation() {
        let xs = [[0.0], [1.0], [2.0]];
        let rows: Vec<&[f64]> = xs.iter().map(|r| r.as_slice()).collect();
        let m = BinaryModel::fit(
            FeatureMap::intercept_only(),
            &rows,
            &[1.0, 1.0, 1.0],
            None,
            &IrlsOptions::default(),
        )
        .unwrap();
        assert!(m.meta.separation);
        assert!(m.prob(&[0.5]) > 0.999_999);
        assert!(m.prob(&[0.5]) < 1.0);
    }

    #[test]
    fn logistic_two_point_symmetry() {
        let xs = [[0.0], [0.0]];
        let rows: Vec<&[f64]> = xs.iter().map(|r| r.as_slice()).collect();
        let m = BinaryModel::fit(
            FeatureMap::intercept_only(),
            &rows,
            &[0.0, 1.0],
            None,
            &IrlsOptions::default(),
        )
        .unwrap();
        assert_abs_diff_eq!(m.coefficients()[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m.prob(&[0.0]), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn mean_fit_exact_on_noiseless_linear_target() {
        let xs: Vec<[f64; 1]> = (0..25).map(|i| [i as f64 / 10.0]).collect();
        let rows: Vec<&[f64]> = xs.iter().map(|r| r.as_slice()).collect();
        let ys: Vec<f64> = rows.iter().map(|r| 2.0 * r[0] - 1.0).collect();
        let m = MeanModel::fit(
            MeanBasis::Map(FeatureMap::linear(1)),
            &rows,
            &ys,
            None,
            None,
        )
        .unwrap();
        assert_abs_diff_eq!(m.coefficients()[0], -1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(m.coefficients()[1], 2.0, epsilon = 1e-10);
    }

    #[test]
    fn mean_fit_constant_target() {
        let xs: Vec<[f64; 1]> = (0..5).map(|i| [i as f64]).collect();
        let rows: Vec<&[f64]> = xs.iter().map(|r| r.as_slice()).collect();
        let m = MeanModel::fit(
            MeanBasis::Map(FeatureMap::linear(1)),
            &rows,
            &[3.25; 5],
            None,
            None,
        )
        .unwrap();
        for x in [-2.0, 0.0, 7.5] {
            assert_abs_diff_eq!(m.predict(&[x]), 3.25, epsilon = 1e-10);
        }
    }

    #[test]
    fn mean_clip_bounds_predictions() {
        let m = MeanModel::from_coefficients(
            MeanBasis::Map(FeatureMap::new(vec![Term::Intercept, Term::Linear(0)])),
            vec![0.0, 10.0],
            Some(50.0),
        );
        assert_eq!(m.predict(&[8.0]), 50.0);
        assert_eq!(m.predict(&[-8.0]), -50.0);
        assert_eq!(m.predict(&[1.0]), 10.0);
    }

    #[test]
    fn collinear_design_is_stabilized_with_warning() {
        // Duplicate column: x and 2x.
        let fm = FeatureMap::new(vec![
            Term::Intercept,
            Term::Linear(0),
            Term::Interaction(0, 1),
        ]);
        let xs: Vec<[f64; 2]> = (0..30).map(|i| [i as f64, 2.0]).collect();
        let rows: Vec<&[f64]> = xs.iter().map(|r| r.as_slice()).collect();
        let ys: Vec<f64> = rows.iter().map(|r| r[0]).collect();
        let m = MeanModel::fit(MeanBasis::Map(fm), &rows, &ys, None, None).unwrap();
        assert!(!m.warnings.is_empty());
        assert_abs_diff_eq!(m.predict(&[3.0, 2.0]), 3.0, epsilon = 1e-4);
    }

    #[test]
    fn consistency_improves_with_sample_size() {
        // Median absolute coefficient error shrinks over n in {1e3, 1e4, 1e5}.
        let mut med_errs = Vec::new();
        for (ni, &n) in [1_000usize, 10_000, 100_000].iter().enumerate() {
            let mut errs = Vec::new();
            for seed in 0..20u64 {
                let mut rng = crate::rng::stream(1000 + seed, &[ni as u64]);
                let mut xs = Vec::with_capacity(n);
                let mut ys = Vec::with_capacity(n);
                for _ in 0..n {
                    let x: f64 = rng.gen_range(-1.5..1.5);
                    let p = expit(-0.4 + 0.9 * x);
                    ys.push(if rng.gen::<f64>() < p { 1.0 } else { 0.0 });
                    xs.push([x]);
                }
                let rows: Vec<&[f64]> = xs.iter().map(|r| r.as_slice()).collect();
                let m = BinaryModel::fit(
                    FeatureMap::linear(1),
                    &rows,
                    &ys,
                    None,
                    &IrlsOptions::default(),
                )
                .unwrap();
                let e = (m.coefficients()[0] + 0.4).abs().max((m.coefficients()[1] - 0.9).abs());
                errs.push(e);
            }
            errs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            med_errs.push(errs[errs.len() / 2]);
        }
        assert!(med_errs[0] > med_errs[1] && med_errs[1] > med_errs[2]);
    }
}
