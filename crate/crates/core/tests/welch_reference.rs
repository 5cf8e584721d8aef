use bronchograph::stats::welch_t_test;
use serde::Deserialize;

#[derive(Deserialize)]
struct Pair {
    a: Vec<f64>,
    b: Vec<f64>,
    t: f64,
    dof: f64,
    p: f64,
}

#[test]
fn matches_reference_values() {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/welch_pairs.json")).unwrap();
    let pairs: Vec<Pair> = serde_json::from_str(&text).unwrap();
    assert_eq!(pairs.len(), 20);
    for (i, pair) in pairs.iter().enumerate() {
        let r = welch_t_test(&pair.a, &pair.b).unwrap();
        assert!((r.t - pair.t).abs() < 1e-8, "pair {i}: t {} vs {}", r.t, pair.t);
        assert!((r.dof - pair.dof).abs() < 1e-8, "pair {i}");
        assert!((r.p - pair.p).abs() < 1e-6, "pair {i}: p {} vs {}", r.p, pair.p);
    }
}
