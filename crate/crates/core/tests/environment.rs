mod support;

use vstb::environment::CueValidity;

#[test]
fn cued_location_changes_at_the_stated_validity() {
    for (i, v) in CueValidity::LEVELS.into_iter().enumerate() {
        let f = support::cued_change_frequency(v, 10_000, 7_000_000 + 100_000 * i as u64).unwrap();
        assert!((f - v).abs() <= 0.015, "validity {v}: {f}");
    }
}

#[test]
fn the_same_seed_reproduces_trials_and_frames() {
    support::trial_determinism(20).unwrap();
}
