use asdtr::nuisance::TrimConfig;
use asdtr::scenario::{ModelSpec, ScenarioSpec};
use asdtr::simulation::{default_eval_policy, run_ope_experiment, OpeEstimator, SimConfig};

fn main() {
    let cfg = SimConfig::dgp1(0, 0);
    let policy = default_eval_policy("dgp1").unwrap();
    // M6 flavors: intercept-only versus exp-transformed binaries.
    let m6_exp = ScenarioSpec {
        phi1: ModelSpec::NoInterceptExp,
        phi2: ModelSpec::NoInterceptExp,
        p1: ModelSpec::NoInterceptExp,
        ..ScenarioSpec::m1()
    };
    let m3_exp = ScenarioSpec {
        phi2: ModelSpec::NoInterceptExp,
        m_p2: ModelSpec::NoInterceptExp,
        ..ScenarioSpec::m1()
    };
    let scenarios: Vec<(String, ScenarioSpec)> = vec![
        ("M4".into(), ScenarioSpec::m4()),
        ("M5".into(), ScenarioSpec::m5()),
        ("M6std".into(), ScenarioSpec::m6()),
        ("M6exp".into(), m6_exp),
        ("M3exp".into(), m3_exp),
    ];
    let t0 = std::time::Instant::now();
    let (summaries, _) = run_ope_experiment(
        &cfg,
        &scenarios,
        &[5000],
        50,
        &policy,
        &[OpeEstimator::Mr],
        TrimConfig::default(),
        1_000_000,
        991,
    );
    println!("elapsed {:.1}s", t0.elapsed().as_secs_f64());
    for s in &summaries {
        println!(
            "{} bias={:+.4} emp_se={:.4} cover={:.3} fail={}",
            s.scenario,
            s.bias,
            s.empirical_se.unwrap_or(f64::NAN),
            s.coverage.unwrap_or(f64::NAN),
            s.failures
        );
    }
}
