use thinlab::experiment::{run_experiment, run_greedy_d_choice, sweep, ExperimentConfig};
use thinlab::pool::trial_seed;
use thinlab::theory::ell;

#[test]
fn beta_event_fraction_at_1e5() {
    let config = ExperimentConfig::new(100_000, 2, "1", "threshold", 40, 11).unwrap();
    let agg = run_experiment(&config).unwrap();
    assert!(agg.frac_r_le_beta.unwrap() >= 0.95);
    assert!(agg.maxload_min <= agg.maxload_p50 && agg.maxload_p50 <= agg.maxload_max);
}

#[test]
fn sweep_ratio_band() {
    let base = ExperimentConfig::new(3, 2, "1", "threshold", 10, 3).unwrap();
    let rows = sweep(&base, &[10_000, 100_000, 1_000_000]).unwrap();
    assert_eq!(rows.len(), 3);
    for row in &rows {
        let ratio = row.ratio_to_dell.unwrap();
        assert!((0.55..=1.25).contains(&ratio), "n={} ratio {ratio}", row.n);
    }
    let single = sweep(&ExperimentConfig { trials: 1, ..base }, &[10_000]).unwrap();
    assert_eq!(single.len(), 1);
}

#[test]
fn greedy_two_choice_range() {
    for i in 0..5 {
        let r = run_greedy_d_choice(1_000_000, 2, 1_000_000, trial_seed(1, i)).unwrap();
        assert!((2..=6).contains(&r.max_load), "{}", r.max_load);
    }
}

#[test]
fn one_choice_sanity_band() {
    let config = ExperimentConfig::new(1_000_000, 1, "1", "always-accept", 10, 12).unwrap();
    let agg = run_experiment(&config).unwrap();
    let ell1 = ell(1e6, 1).unwrap();
    assert!(agg.maxload_mean >= 0.9 * ell1 && agg.maxload_mean <= 2.2 * ell1, "{}", agg.maxload_mean);
}

#[test]
fn threshold_trial_bound_holds() {
    let config = ExperimentConfig::new(200_000, 3, "1.5", "threshold", 6, 13).unwrap();
    let trials = thinlab::experiment::run_trials(&config).unwrap();
    let cap = ell(200_000.0, 3).unwrap().floor() as u64;
    for t in trials {
        assert!(t.max_load <= 2 * (cap + 1) + t.round_max[2]);
    }
}
