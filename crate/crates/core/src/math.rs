//! Small numerical helpers: logistic link, compensated summation, normal
//! distribution functions and Gauss–Hermite quadrature.

/// Logistic function 1 / (1 + exp(-z)), safe for extreme arguments.
#[inline]
pub fn expit(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`expit`]. Caller must ensure p in (0, 1).
#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Neumaier compensated sum. Deterministic for a fixed element order, which
/// keeps parallel pipelines reproducible: workers write into indexed slots
/// and the reduction happens here, sequentially.
pub fn sum(values: &[f64]) -> f64 {
    let mut s = 0.0f64;
    let mut c = 0.0f64;
    for &v in values {
        let t = s + v;
        if s.abs() >= v.abs() {
            c += (s - t) + v;
        } else {
            c += (v - t) + s;
        }
        s = t;
    }
    s + c
}

/// Compensated mean of a slice. Empty input yields NaN.
pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    sum(values) / values.len() as f64
}

/// Sample standard deviation (n - 1 denominator).
pub fn sample_sd(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return f64::NAN;
    }
    let m = mean(values);
    let devs: Vec<f64> = values.iter().map(|v| (v - m) * (v - m)).collect();
    (sum(&devs) / (n - 1) as f64).sqrt()
}

/// Standard normal density.
#[inline]
pub fn normal_pdf(z: f64) -> f64 {
    const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
    INV_SQRT_2PI * (-0.5 * z * z).exp()
}

/// Standard normal CDF via the complementary error function.
#[inline]
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z * std::f64::consts::FRAC_1_SQRT_2)
}

/// Complementary error function, Cody's rational approximations
/// (double-precision accuracy on the whole real line).
pub fn erfc(x: f64) -> f64 {
    let y = x.abs();
    if y <= 0.46875 {
        return 1.0 - erf_small(x);
    }
    let v = if y <= 4.0 { erfc_mid(y) } else { erfc_large(y) };
    if x < 0.0 {
        2.0 - v
    } else {
        v
    }
}

// Split exp(-y^2) as exp(-t^2) * exp(-(y-t)(y+t)) with t a 1/16 grid point,
// which avoids cancellation in the exponent for large y.
fn exp_neg_sq(y: f64) -> f64 {
    let t = (y * 16.0).trunc() / 16.0;
    let del = (y - t) * (y + t);
    (-t * t).exp() * (-del).exp()
}

fn erf_small(x: f64) -> f64 {
    const A: [f64; 5] = [
        3.161_123_743_870_565_6,
        1.138_641_541_510_501_6e2,
        3.774_852_376_853_020_2e2,
        3.209_377_589_138_469_4e3,
        1.857_777_061_846_031_5e-1,
    ];
    const B: [f64; 4] = [
        2.360_129_095_234_412_1e1,
        2.440_246_379_344_441_7e2,
        1.282_616_526_077_372_8e3,
        2.844_236_833_439_170_6e3,
    ];
    let z = if x.abs() > 1e-300 { x * x } else { 0.0 };
    let mut num = A[4] * z;
    let mut den = z;
    for i in 0..3 {
        num = (num + A[i]) * z;
        den = (den + B[i]) * z;
    }
    x * (num + A[3]) / (den + B[3])
}

fn erfc_mid(y: f64) -> f64 {
    const C: [f64; 9] = [
        5.641_884_969_886_700_9e-1,
        8.883_149_794_388_375_7,
        6.611_919_063_714_162_7e1,
        2.986_351_381_974_001_3e2,
        8.819_522_212_417_69e2,
        1.712_047_612_634_070_7e3,
        2.051_078_377_826_071_6e3,
        1.230_339_354_797_997_2e3,
        2.153_115_354_744_038_4e-8,
    ];
    const D: [f64; 8] = [
        1.574_492_611_070_983_5e1,
        1.176_939_508_913_124_9e2,
        5.371_811_018_620_098_6e2,
        1.621_389_574_566_690_2e3,
        3.290_799_235_733_459_6e3,
        4.362_619_090_143_247_2e3,
        3.439_367_674_143_721_6e3,
        1.230_339_354_803_749_8e3,
    ];
    let mut num = C[8] * y;
    let mut den = y;
    for i in 0..7 {
        num = (num + C[i]) * y;
        den = (den + D[i]) * y;
    }
    exp_neg_sq(y) * (num + C[7]) / (den + D[7])
}

fn erfc_large(y: f64) -> f64 {
    const P: [f64; 6] = [
        3.053_266_349_612_323_4e-1,
        3.603_448_999_498_044_4e-1,
        1.257_817_261_112_292_4e-1,
        1.608_378_514_874_227_7e-2,
        6.587_491_615_298_378e-4,
        1.631_538_713_730_209_8e-2,
    ];
    const Q: [f64; 5] = [
        2.568_520_192_289_822_4,
        1.872_952_849_923_460_4,
        5.279_051_029_514_284_1e-1,
        6.051_834_131_244_131_9e-2,
        2.335_204_976_268_691_8e-3,
    ];
    const INV_SQRT_PI: f64 = 5.641_895_835_477_562_9e-1;
    let z = 1.0 / (y * y);
    let mut num = P[5] * z;
    let mut den = z;
    for i in 0..4 {
        num = (num + P[i]) * z;
        den = (den + Q[i]) * z;
    }
    let r = z * (num + P[4]) / (den + Q[4]);
    exp_neg_sq(y) * (INV_SQRT_PI - r) / y
}

/// Nodes and weights for n-point Gauss–Hermite quadrature arranged for
/// normal expectations: `E[f(X)] ≈ Σ w_i f(mu + sigma * x_i)` for
/// `X ~ N(mu, sigma^2)`, with `Σ w_i = 1`.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    /// Standardized abscissae (already scaled by sqrt(2)).
    pub nodes: Vec<f64>,
    /// Probability weights summing to one.
    pub weights: Vec<f64>,
}

impl GaussHermite {
    /// Build the rule by Golub–Welsch on the Hermite Jacobi matrix.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1);
        let mut jac = nalgebra::DMatrix::<f64>::zeros(n, n);
        for k in 1..n {
            let b = (k as f64 / 2.0).sqrt();
            jac[(k - 1, k)] = b;
            jac[(k, k - 1)] = b;
        }
        let eig = nalgebra::SymmetricEigen::new(jac);
        let mut pairs: Vec<(f64, f64)> = (0..n)
            .map(|i| {
                let v0 = eig.eigenvectors[(0, i)];
                (eig.eigenvalues[i], v0 * v0)
            })
            .collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let nodes = pairs.iter().map(|p| p.0 * std::f64::consts::SQRT_2).collect();
        let weights = pairs.iter().map(|p| p.1).collect();
        GaussHermite { nodes, weights }
    }

    /// Expectation of `f` under N(mu, sigma^2).
    pub fn expect<F: Fn(f64) -> f64>(&self, mu: f64, sigma: f64, f: F) -> f64 {
        let terms: Vec<f64> = self
            .nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(mu + sigma * x))
            .collect();
        sum(&terms)
    }
}

/// Mean of `x` restricted to a half line under N(mu, sigma^2):
/// returns `(P(X > t), E[X · 1{X > t}])` when `upper` is true, and the
/// complementary pair otherwise.
pub fn normal_partial_moments(mu: f64, sigma: f64, t: f64, upper: bool) -> (f64, f64) {
    let z = (t - mu) / sigma;
    if upper {
        let p = 1.0 - normal_cdf(z);
        let m = mu * p + sigma * normal_pdf(z);
        (p, m)
    } else {
        let p = normal_cdf(z);
        let m = mu * p - sigma * normal_pdf(z);
        (p, m)
    }
}

/// `E[exp(X) · 1{X ≷ t}]` under N(mu, sigma^2).
pub fn normal_exp_partial(mu: f64, sigma: f64, t: f64, upper: bool) -> f64 {
    let scale = (mu + 0.5 * sigma * sigma).exp();
    let z = (t - mu - sigma * sigma) / sigma;
    if upper {
        scale * (1.0 - normal_cdf(z))
    } else {
        scale * normal_cdf(z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn expit_logit_roundtrip() {
        for &p in &[1e-8, 0.2, 0.5, 0.9, 1.0 - 1e-8] {
            assert_abs_diff_eq!(expit(logit(p)), p, epsilon = 1e-12);
        }
    }

    #[test]
    fn normal_cdf_reference_values() {
        // Reference values to 1e-15 (Mathematica).
        assert_abs_diff_eq!(normal_cdf(0.0), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(normal_cdf(1.0), 0.841_344_746_068_542_9, epsilon = 1e-14);
        assert_abs_diff_eq!(normal_cdf(-2.5), 0.006_209_665_325_776_132, epsilon = 1e-14);
        assert_abs_diff_eq!(normal_cdf(5.0), 0.999_999_713_348_428, epsilon = 1e-13);
        assert_abs_diff_eq!(
            normal_cdf(-8.0),
            6.220_960_574_271_786e-16,
            epsilon = 1e-22
        );
    }

    #[test]
    fn gauss_hermite_matches_moments() {
        let gh = GaussHermite::new(32);
        assert_abs_diff_eq!(gh.expect(0.0, 1.0, |x| x * x), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(gh.expect(1.5, 2.0, |x| x), 1.5, epsilon = 1e-12);
        // E[exp(X)] = exp(mu + sigma^2/2)
        assert_abs_diff_eq!(
            gh.expect(0.3, 0.9, f64::exp),
            (0.3f64 + 0.5 * 0.81).exp(),
            epsilon = 1e-10
        );
    }

    #[test]
    fn partial_moments_identities_and_monte_carlo() {
        let (mu, sigma, t) = (0.4, 1.3, 0.9);
        let (p_up, m_up) = normal_partial_moments(mu, sigma, t, true);
        let (p_lo, m_lo) = normal_partial_moments(mu, sigma, t, false);
        assert_abs_diff_eq!(p_up + p_lo, 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(m_up + m_lo, mu, epsilon = 1e-14);
        let e_up = normal_exp_partial(mu, sigma, t, true);
        let e_lo = normal_exp_partial(mu, sigma, t, false);
        assert_abs_diff_eq!(
            e_up + e_lo,
            (mu + 0.5 * sigma * sigma).exp(),
            epsilon = 1e-12
        );

        use rand::Rng;
        let mut r = crate::rng::stream(31, &[4]);
        let n = 400_000;
        let (mut p_mc, mut m_mc, mut e_mc) = (0.0, 0.0, 0.0);
        for _ in 0..n {
            let u1: f64 = r.gen::<f64>().max(1e-300);
            let u2: f64 = r.gen();
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            let x = mu + sigma * z;
            if x > t {
                p_mc += 1.0;
                m_mc += x;
            } else {
                e_mc += x.exp();
            }
        }
        let nf = n as f64;
        assert_abs_diff_eq!(p_up, p_mc / nf, epsilon = 4e-3);
        assert_abs_diff_eq!(m_up, m_mc / nf, epsilon = 8e-3);
        assert_abs_diff_eq!(e_lo, e_mc / nf, epsilon = 1.5e-2);
    }

    #[test]
    fn compensated_sum_is_exactish() {
        let vals = vec![1e16, 1.0, -1e16, 1.0];
        assert_eq!(sum(&vals), 2.0);
    }
}
