//! Algebraic identities of the estimators: hand-evaluated score values, the
//! AIPW reduction, indicator shortcuts, mean-zero influence values, and
//! agreement between the dedicated two-stage code path and the general-K
//! path specialized to K = 2.

mod common;

use approx::assert_abs_diff_eq;
use asdtr::estimators::{self, eif_variance};
use asdtr::kstage::{self, TwoStageAdapter};
use asdtr::nuisance::{fit_suite, Nuisances, SuiteConfig};
use asdtr::policy::LinearPolicy;
use asdtr::scenario::ScenarioSpec;
use asdtr::simulation::{simulate, SimConfig};
use asdtr::trajectory::{Dataset, Trajectory};
use common::{fully_observed_dataset, random_policy, random_unit_nuisances, UnitNuisances};

/// Nuisances returning the fixed values of the worked score examples.
struct HandCase;

impl Nuisances for HandCase {
    fn e1(&self, _: u8, _: &[f64]) -> f64 {
        1.0
    }
    fn c1(&self, _: u8, _: &[f64]) -> f64 {
        0.5 // phi1 = e1 * c1 = 0.5
    }
    fn p1(&self, a1: u8, _: &[f64]) -> f64 {
        // Q_{S,1} = p1^0 * m_p2 = 0.4; the stage-1 concordant weight
        // denominator is phi1 * p1 = 0.5 * 1 = 0.5 at the realized arm.
        if a1 == 0 {
            0.5
        } else {
            1.0
        }
    }
    fn e2(&self, _: (u8, u8), _: &[f64], _: &[f64]) -> f64 {
        1.0
    }
    fn c2(&self, _: (u8, u8), _: &[f64], _: &[f64]) -> f64 {
        0.5 // phi2 = 0.5
    }
    fn p2(&self, arm: (u8, u8), _: &[f64], _: &[f64]) -> f64 {
        // Q_{S,2} = p2^{00} = 0.8; the stage-2 weight denominator is
        // phi2 * p2 = 0.5 at the realized arm (1, 1).
        if arm == (0, 0) {
            0.8
        } else {
            1.0
        }
    }
    fn mu2(&self, _: (u8, u8), _: &[f64], _: &[f64]) -> f64 {
        1.5 // Q_{Y,2}
    }
    fn m_p2(&self, _: (u8, u8), _: &[f64]) -> f64 {
        0.8 // with p1^0 = 0.5 gives Q_{S,1} = 0.4
    }
    fn m_mu2(&self, _: &[f64]) -> f64 {
        1.0 // Q_{Y,1}
    }
}

#[test]
fn phi_d_hand_case_telescopes_to_two() {
    // a1=c1=0, s1=1, a2=c2=0, s2=1, phi1=0.5, phi2=0.5, QS1=0.4, QS2=0.8:
    // 1/0.25 + (1-2)*0.4 + (2-4)*0.8 = 2.0
    let t = Trajectory::complete(vec![0.0], 0, vec![0.0], 0, 2.0).unwrap();
    assert_abs_diff_eq!(estimators::phi_d(&t, &HandCase), 2.0, epsilon = 1e-12);
}

#[test]
fn phi_n_hand_case() {
    // Concordant fully observed row under an always-treat policy with
    // W1 = W2 = 2, QY = (1, 1.5, 2), QS1 = 0.4, phi_D = Q_{S,1} = 0.4
    // (a1 = 1 shortcut): phi_N = 1*phi_D + [2*0.5 + 4*0.5]*0.4.
    let policy = LinearPolicy::new(vec![1.0, 0.0], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
    let t = Trajectory::complete(vec![0.0], 1, vec![0.0], 1, 2.0).unwrap();
    let pd = estimators::phi_d(&t, &HandCase);
    assert_abs_diff_eq!(pd, 0.4, epsilon = 1e-15); // a1 = 1 shortcut
    let pn = estimators::phi_n(&t, &policy, &HandCase);
    assert_abs_diff_eq!(pn, 0.4 + 1.2, epsilon = 1e-12);
}

#[test]
fn eif_arithmetic_and_variance() {
    // (phi_N - v phi_D)/d = (3.2 - 1.5*2.0)/0.4 = 0.5
    let policy = LinearPolicy::new(vec![1.0, 0.0], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
    // Construct the phi_N = 3.2, phi_D = 2.0 row: concordant all-control.
    let policy0 = LinearPolicy::new(vec![-1.0, 0.0], vec![-1.0, 0.0, 0.0, 0.0]).unwrap();
    let t = Trajectory::complete(vec![0.0], 0, vec![0.0], 0, 2.0).unwrap();
    let pd = estimators::phi_d(&t, &HandCase);
    assert_abs_diff_eq!(pd, 2.0, epsilon = 1e-12);
    let psi = estimators::eif(&t, &policy0, &HandCase, 1.5, 0.4).unwrap();
    let pn = estimators::phi_n(&t, &policy0, &HandCase);
    assert_abs_diff_eq!(psi, (pn - 1.5 * 2.0) / 0.4, epsilon = 1e-12);
    let _ = policy;

    let (se, ci) = eif_variance(&[-1.0, 1.0], 0.0);
    assert_abs_diff_eq!(se, 1.0 / 2.0f64.sqrt(), epsilon = 1e-15);
    assert_abs_diff_eq!(ci.1 - ci.0, 2.0 * 1.96 * se, epsilon = 1e-12);

    let (se0, _) = eif_variance(&[0.0; 10], 3.0);
    assert_eq!(se0, 0.0);
}

#[test]
fn reduction_identity_on_fuzzed_fully_observed_data() {
    // With unit censoring/survival models and shared treatment/outcome
    // models, the MR estimator coincides with the AIPW baseline.
    for seed in 0..50u64 {
        let d = fully_observed_dataset(60 + (seed as usize % 40), 100 + seed);
        let nuis = random_unit_nuisances(200 + seed);
        let policy = random_policy(300 + seed);
        let mr = estimators::v_mr(&d, &policy, &nuis).unwrap();
        let aipw = estimators::v_aipw(&d, &policy, &nuis).unwrap();
        assert!(
            (mr.value - aipw.value).abs() <= 1e-10,
            "seed {seed}: mr {} vs aipw {}",
            mr.value,
            aipw.value
        );
        assert_abs_diff_eq!(mr.mean_phi_d, 1.0, epsilon = 1e-12);
    }
}

#[test]
fn phi_d_equals_q_s1_whenever_a1_is_one() {
    use rand::Rng;
    let cfg = SimConfig::dgp1(4000, 11);
    let data = simulate(&cfg);
    let suite = fit_suite(
        &data,
        &SuiteConfig::for_sim(&cfg, ScenarioSpec::m1()),
        None,
        None,
    )
    .unwrap();
    let mut r = common::seeded(17, &[2]);
    let mut checked = 0;
    // Fuzz across all shapes with a1 = 1 by reusing simulated rows and
    // freshly fuzzed covariate points.
    for t in data.rows().iter().filter(|t| t.a1() == 1) {
        let pd = estimators::phi_d(t, &suite);
        let q_s1 = suite.p1(0, t.x1()) * suite.m_p2((0, 0), t.x1());
        assert_eq!(pd, q_s1);
        checked += 1;
    }
    for _ in 0..10_000 {
        let x1 = vec![r.gen_range(-0.3..0.7)];
        let t = match r.gen_range(0..5) {
            0 => Trajectory::censored_stage1(x1.clone(), 1).unwrap(),
            1 => Trajectory::died_stage1(x1.clone(), 1).unwrap(),
            2 => Trajectory::censored_stage2(x1.clone(), 1, vec![r.gen_range(-3.0..3.0)], 1)
                .unwrap(),
            3 => Trajectory::died_stage2(x1.clone(), 1, vec![r.gen_range(-3.0..3.0)], 0).unwrap(),
            _ => Trajectory::complete(
                x1.clone(),
                1,
                vec![r.gen_range(-3.0..3.0)],
                r.gen_range(0..2u8),
                r.gen_range(-10.0..10.0),
            )
            .unwrap(),
        };
        let pd = estimators::phi_d(&t, &suite);
        let q_s1 = suite.p1(0, &x1) * suite.m_p2((0, 0), &x1);
        assert_eq!(pd, q_s1);
        checked += 1;
    }
    assert!(checked > 10_000);
}

#[test]
fn eif_mean_is_zero_at_the_mr_estimate() {
    let cfg = SimConfig::dgp1(3000, 5);
    let data = simulate(&cfg);
    let policy = asdtr::simulation::default_eval_policy("dgp1").unwrap();
    for scenario in [ScenarioSpec::m1(), ScenarioSpec::m3(), ScenarioSpec::m6()] {
        let suite = fit_suite(
            &data,
            &SuiteConfig::for_sim(&cfg, scenario),
            Some(&policy),
            None,
        )
        .unwrap();
        let report = estimators::v_mr(&data, &policy, &suite).unwrap();
        let psi: Vec<f64> = data
            .rows()
            .iter()
            .map(|t| {
                estimators::eif(t, &policy, &suite, report.value, report.mean_phi_d).unwrap()
            })
            .collect();
        let mean = asdtr::math::mean(&psi);
        assert!(mean.abs() <= 1e-10, "scenario mean psi = {mean:.3e}");
    }
}

#[test]
fn v_mr_invariant_to_row_order_and_duplication() {
    let cfg = SimConfig::dgp1(1500, 21);
    let data = simulate(&cfg);
    let policy = asdtr::simulation::default_eval_policy("dgp1").unwrap();
    let suite = fit_suite(
        &data,
        &SuiteConfig::for_sim(&cfg, ScenarioSpec::m1()),
        Some(&policy),
        None,
    )
    .unwrap();
    let base = estimators::v_mr(&data, &policy, &suite).unwrap();

    let mut reversed: Vec<Trajectory> = data.rows().to_vec();
    reversed.reverse();
    let reversed = Dataset::from_rows(reversed, Some(1)).unwrap();
    let rev = estimators::v_mr(&reversed, &policy, &suite).unwrap();
    assert_abs_diff_eq!(base.value, rev.value, epsilon = 1e-12);

    let mut doubled: Vec<Trajectory> = data.rows().to_vec();
    doubled.extend_from_slice(data.rows());
    let doubled = Dataset::from_rows(doubled, Some(1)).unwrap();
    let dup = estimators::v_mr(&doubled, &policy, &suite).unwrap();
    assert_abs_diff_eq!(base.value, dup.value, epsilon = 1e-12);
}

#[test]
fn general_k_specializes_to_two_stage_exactly() {
    for seed in 0..20u64 {
        let cfg = SimConfig::dgp1(400, 500 + seed);
        let data = simulate(&cfg);
        let policy = random_policy(700 + seed);
        let suite = match fit_suite(
            &data,
            &SuiteConfig::for_sim(&cfg, ScenarioSpec::m1()),
            Some(&policy),
            None,
        ) {
            Ok(s) => s,
            // Small fuzzed samples can empty a stratum; skip those draws.
            Err(_) => continue,
        };
        let two_stage = estimators::v_mr(&data, &policy, &suite).unwrap();
        let krows: Vec<kstage::KTrajectory> =
            data.rows().iter().map(kstage::from_two_stage).collect();
        let adapter = TwoStageAdapter {
            nuis: &suite,
            policy: &policy,
        };
        let k = kstage::v_mr_general_k(&krows, &policy, &adapter).unwrap();
        assert!(
            (two_stage.value - k.value).abs() <= 1e-12,
            "seed {seed}: {} vs {}",
            two_stage.value,
            k.value
        );
    }
}

#[test]
fn prepared_mr_matches_full_path_exactly() {
    let cfg = SimConfig::dgp1(2000, 31);
    let data = simulate(&cfg);
    let sc = SuiteConfig::for_sim(&cfg, ScenarioSpec::m1());
    let prepared = estimators::PreparedMr::fit(&data, &sc).unwrap();
    for seed in 0..5u64 {
        let policy = random_policy(40 + seed);
        let suite = fit_suite(&data, &sc, Some(&policy), None).unwrap();
        let full = estimators::v_mr(&data, &policy, &suite).unwrap();
        let fast = prepared.value(&policy).unwrap();
        assert!((full.value - fast).abs() <= 1e-12, "policy {seed}");
    }
}

#[test]
fn single_row_estimators_self_normalize() {
    // Plug-in: omega = 1, value = m_mu2; IPW on a concordant row: value = y.
    let nuis = UnitNuisances {
        e1: (0.4, 0.3),
        e2: (-0.2, 0.1, 0.5),
        mu2: [[(1.0, 0.0, 0.0); 2]; 2],
        m_mu2: (2.5, 0.0),
    };
    let policy = LinearPolicy::new(vec![1.0, 0.0], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
    let row = Trajectory::complete(vec![0.3], 1, vec![0.2], 1, 7.25).unwrap();
    let d = Dataset::from_rows(vec![row], None).unwrap();
    let (plugin, _) = estimators::v_q_plugin_point(&d, &nuis).unwrap();
    assert_abs_diff_eq!(plugin, 2.5, epsilon = 1e-12);
    let (ipw, _) = estimators::v_ipw_point(&d, &policy, &nuis).unwrap();
    assert_abs_diff_eq!(ipw, 7.25, epsilon = 1e-12);
    // AIPW with Q1 = Q2 = y telescopes to y.
    let telescoping = UnitNuisances {
        e1: (0.4, 0.3),
        e2: (-0.2, 0.1, 0.5),
        mu2: [[(7.25, 0.0, 0.0); 2]; 2],
        m_mu2: (7.25, 0.0),
    };
    let aipw = estimators::v_aipw(&d, &policy, &telescoping).unwrap();
    assert_abs_diff_eq!(aipw.value, 7.25, epsilon = 1e-12);
}

#[test]
fn two_row_hand_dataset_ratio() {
    // Sum(phi_N)/Sum(phi_D) assembled from the worked per-row scores.
    let policy0 = LinearPolicy::new(vec![-1.0, 0.0], vec![-1.0, 0.0, 0.0, 0.0]).unwrap();
    let t1 = Trajectory::complete(vec![0.0], 0, vec![0.0], 0, 2.0).unwrap();
    let t2 = Trajectory::complete(vec![0.0], 1, vec![0.0], 1, 2.0).unwrap();
    let d = Dataset::from_rows(vec![t1.clone(), t2.clone()], None).unwrap();
    let pn1 = estimators::phi_n(&t1, &policy0, &HandCase);
    let pn2 = estimators::phi_n(&t2, &policy0, &HandCase);
    let pd1 = estimators::phi_d(&t1, &HandCase);
    let pd2 = estimators::phi_d(&t2, &HandCase);
    let report = estimators::v_mr(&d, &policy0, &HandCase).unwrap();
    assert_abs_diff_eq!(report.value, (pn1 + pn2) / (pd1 + pd2), epsilon = 1e-12);
}
