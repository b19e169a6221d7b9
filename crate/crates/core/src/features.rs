//! Feature maps: declarative bases evaluated on covariate vectors.
//!
//! A [`FeatureMap`] is a list of terms over a named covariate slice. It is
//! the carrier for "correctly specified" versus deliberately misspecified
//! functional forms: correct fits use the data-generating basis, while
//! misspecified fits use an intercept-only or transformed basis.

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::Result;

/// One basis term over a covariate vector, addressed by index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Term {
    /// Constant 1.
    Intercept,
    /// Raw covariate `x[i]`.
    Linear(usize),
    /// Integer power `x[i]^k`.
    Power(usize, u32),
    /// `exp(x[i])`.
    Exp(usize),
    /// Product `x[i] * x[j]`.
    Interaction(usize, usize),
}

impl Term {
    fn eval(&self, x: &[f64]) -> f64 {
        match *self {
            Term::Intercept => 1.0,
            Term::Linear(i) => x[i],
            Term::Power(i, k) => x[i].powi(k as i32),
            Term::Exp(i) => x[i].exp(),
            Term::Interaction(i, j) => x[i] * x[j],
        }
    }

    fn max_index(&self) -> Option<usize> {
        match *self {
            Term::Intercept => None,
            Term::Linear(i) | Term::Power(i, _) | Term::Exp(i) => Some(i),
            Term::Interaction(i, j) => Some(i.max(j)),
        }
    }
}

/// A fixed list of basis terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    terms: Vec<Term>,
}

impl FeatureMap {
    pub fn new(terms: Vec<Term>) -> Self {
        FeatureMap { terms }
    }

    /// Intercept-only basis (the misspecified binary-model form).
    pub fn intercept_only() -> Self {
        FeatureMap::new(vec![Term::Intercept])
    }

    /// Intercept plus each raw covariate.
    pub fn linear(dim: usize) -> Self {
        let mut terms = vec![Term::Intercept];
        terms.extend((0..dim).map(Term::Linear));
        FeatureMap::new(terms)
    }

    /// `exp(x[i])` for every covariate, no intercept (the misspecified
    /// conditional-mean form).
    pub fn no_intercept_exp(dim: usize) -> Self {
        FeatureMap::new((0..dim).map(Term::Exp).collect())
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// Number of covariates the map expects (1 + largest index referenced).
    pub fn input_dim(&self) -> usize {
        self.terms
            .iter()
            .filter_map(Term::max_index)
            .map(|i| i + 1)
            .max()
            .unwrap_or(0)
    }

    /// Evaluate the basis at a covariate point.
    pub fn eval(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.terms.iter().map(|t| t.eval(x)));
    }

    pub fn eval_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.terms.len());
        self.eval(x, &mut out);
        out
    }
}

/// Natural cubic spline basis on a scalar covariate with fixed interior
/// knots. The basis includes an intercept and a linear term; each additional
/// column is linear beyond the boundary knots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NaturalSpline {
    knots: Vec<f64>,
}

impl NaturalSpline {
    /// Build from interior knots (sorted, deduplicated). At least two
    /// distinct knots are required; fewer degrade to the linear basis.
    pub fn new(mut knots: Vec<f64>) -> Self {
        knots.sort_by(|a, b| a.partial_cmp(b).unwrap());
        knots.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
        NaturalSpline { knots }
    }

    /// Knots at the q-quantiles of `xs` for q in {0.1, ..., 0.9}.
    pub fn from_quantiles(xs: &[f64]) -> Result<Self> {
        if xs.is_empty() {
            return Err(Error::DegenerateDesign(
                "no observations for spline knots".into(),
            ));
        }
        let mut sorted: Vec<f64> = xs.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = sorted.len();
        let knots = (1..=9)
            .map(|d| {
                let q = d as f64 / 10.0;
                let pos = q * (n - 1) as f64;
                let lo = pos.floor() as usize;
                let frac = pos - lo as f64;
                if lo + 1 < n {
                    sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac
                } else {
                    sorted[lo]
                }
            })
            .collect();
        Ok(NaturalSpline::new(knots))
    }

    /// Number of basis columns (intercept and linear term included).
    pub fn len(&self) -> usize {
        2 + self.knots.len().saturating_sub(2)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Evaluate the basis at `x`.
    pub fn eval(&self, x: f64, out: &mut Vec<f64>) {
        out.clear();
        out.push(1.0);
        out.push(x);
        let k = self.knots.len();
        if k < 2 {
            return;
        }
        let last = self.knots[k - 1];
        let second_last = self.knots[k - 2];
        let cube = |t: f64| {
            let d = x - t;
            if d > 0.0 {
                d * d * d
            } else {
                0.0
            }
        };
        // d_k(x) = [(x - knot_k)^3_+ - (x - knot_K)^3_+] / (knot_K - knot_k)
        let cube_last = cube(last);
        let d_of = |t: f64| (cube(t) - cube_last) / (last - t);
        let d_second_last = d_of(second_last);
        for i in 0..k - 2 {
            out.push(d_of(self.knots[i]) - d_second_last);
        }
    }

    pub fn eval_vec(&self, x: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        self.eval(x, &mut out);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn feature_map_evaluates_terms() {
        let fm = FeatureMap::new(vec![
            Term::Intercept,
            Term::Linear(0),
            Term::Power(1, 2),
            Term::Exp(0),
            Term::Interaction(0, 1),
        ]);
        let x = [2.0, 3.0];
        let v = fm.eval_vec(&x);
        assert_eq!(v[0], 1.0);
        assert_eq!(v[1], 2.0);
        assert_eq!(v[2], 9.0);
        assert_abs_diff_eq!(v[3], 2.0f64.exp());
        assert_eq!(v[4], 6.0);
        assert_eq!(fm.input_dim(), 2);
    }

    #[test]
    fn natural_spline_is_linear_beyond_boundaries() {
        let ns = NaturalSpline::new(vec![-0.2, -0.1, 0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        // Beyond the last knot the second difference of every column vanishes.
        for col in 0..ns.len() {
            let f = |x: f64| ns.eval_vec(x)[col];
            let (a, b, c) = (f(1.0), f(1.1), f(1.2));
            assert_abs_diff_eq!(c - 2.0 * b + a, 0.0, epsilon = 1e-9);
            let (a, b, c) = (f(-2.0), f(-1.9), f(-1.8));
            assert_abs_diff_eq!(c - 2.0 * b + a, 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn quantile_knots_are_sorted_and_within_range() {
        let xs: Vec<f64> = (0..1000).map(|i| (i as f64) / 999.0).collect();
        let ns = NaturalSpline::from_quantiles(&xs).unwrap();
        assert_eq!(ns.len(), 9);
        assert!(ns.knots.windows(2).all(|w| w[0] < w[1]));
        assert!(ns.knots[0] > 0.05 && ns.knots[8] < 0.95);
    }
}
