mod support;

use std::time::{Duration, Instant};

use support::fixtures;

#[test]
fn scenario_kill_points() {
    fixtures::check_kills().unwrap();
}

#[test]
fn learned_policies_match_the_scenarios() {
    fixtures::check_learning().unwrap();
}

#[test]
fn learned_policies_are_sound_and_minimal() {
    let start = Instant::now();
    fixtures::check_sound_and_minimal().unwrap();
    assert!(
        start.elapsed() < Duration::from_secs(1),
        "took {:?}",
        start.elapsed()
    );
}
