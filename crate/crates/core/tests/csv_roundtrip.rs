//! Dataset serialization: simulated round trips and a property test over
//! random legal trajectories.

use asdtr::simulation::{simulate, SimConfig};
use asdtr::trajectory::{read_csv, write_csv, CsvSchema, Dataset, Trajectory};
use proptest::prelude::*;

#[test]
fn simulated_dataset_roundtrips_exactly() {
    let d = simulate(&SimConfig::dgp1(100, 99));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sim.csv");
    write_csv(&d, &path).unwrap();
    let back = read_csv(&path, &CsvSchema::default()).unwrap();
    assert_eq!(d.len(), back.len());
    for (a, b) in d.rows().iter().zip(back.rows()) {
        assert_eq!(a, b, "row mismatch");
    }
}

#[test]
fn renamed_columns_are_honored() {
    let d = simulate(&SimConfig::dgp1(20, 5));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("renamed.csv");
    write_csv(&d, &path).unwrap();
    // Rewrite the header with custom names.
    let content = std::fs::read_to_string(&path).unwrap();
    let mut lines: Vec<&str> = content.lines().collect();
    let custom_header = "base_1,treat1,cens1,surv1,mid_1,treat2,cens2,surv2,outcome";
    lines[0] = custom_header;
    std::fs::write(&path, lines.join("\n")).unwrap();
    let schema = CsvSchema {
        x1_prefix: "base_".into(),
        x2_prefix: "mid_".into(),
        a1: "treat1".into(),
        c1: "cens1".into(),
        s1: "surv1".into(),
        a2: "treat2".into(),
        c2: "cens2".into(),
        s2: "surv2".into(),
        y: "outcome".into(),
    };
    let back = read_csv(&path, &schema).unwrap();
    assert_eq!(d, back);
}

fn arb_trajectory() -> impl Strategy<Value = Trajectory> {
    let finite = || -10.0f64..10.0;
    let shape = 0..5u8;
    (shape, finite(), 0..2u8, finite(), 0..2u8, finite()).prop_map(
        |(shape, x1, a1, x2, a2, y)| match shape {
            0 => Trajectory::censored_stage1(vec![x1], a1).unwrap(),
            1 => Trajectory::died_stage1(vec![x1], a1).unwrap(),
            2 => Trajectory::censored_stage2(vec![x1], a1, vec![x2], a2).unwrap(),
            3 => Trajectory::died_stage2(vec![x1], a1, vec![x2], a2).unwrap(),
            _ => Trajectory::complete(vec![x1], a1, vec![x2], a2, y).unwrap(),
        },
    )
}

proptest! {
    #[test]
    fn roundtrip_random_trajectories(rows in prop::collection::vec(arb_trajectory(), 1..40)) {
        let d = Dataset::from_rows(rows, Some(1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prop.csv");
        write_csv(&d, &path).unwrap();
        let back = read_csv(&path, &CsvSchema::default()).unwrap();
        prop_assert_eq!(d, back);
    }

    #[test]
    fn shortest_float_form_roundtrips(v in prop::num::f64::NORMAL) {
        // write_csv prints reals with `Display`, which is shortest-roundtrip.
        let s = format!("{v}");
        prop_assert_eq!(s.parse::<f64>().unwrap(), v);
    }
}
