mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gridseq_core::env::{Env, EnvError};
use gridseq_core::grid::{Contingencies, FeederGraph};
use gridseq_core::pipeline::replay_validate;

/// Switches with exactly one energized endpoint that are in service.
fn expected_mask(g: &FeederGraph, cont: &Contingencies, s1: &[bool]) -> Vec<bool> {
    g.switches
        .iter()
        .map(|s| !cont.contains(&s.id) && s1[s.endpoints.0] != s1[s.endpoints.1])
        .collect()
}

fn run_episode(g: &FeederGraph, cont: &Contingencies, seed: u64) -> Result<(), TestCaseError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut env = Env::new(g, cont.clone()).unwrap();
    let s0 = env.state().clone();
    for src in &g.sources {
        let live = !g.is_isolated(src.host_cell, cont);
        prop_assert_eq!(s0.s1[src.host_cell], live);
    }
    prop_assert_eq!(&s0.s1, &s0.s2);
    prop_assert_eq!(s0.energized_count(), g.sources.iter().filter(|s| s0.s1[s.host_cell]).count());

    let mut actions = Vec::new();
    while !env.is_done() {
        let before = env.state().clone();
        let mask = env.mask();
        prop_assert_eq!(&mask.allowed, &expected_mask(g, cont, &before.s1));
        prop_assert!(mask.any());

        let illegal: Vec<usize> = (0..g.n_switches()).filter(|&i| !mask.allowed[i]).collect();
        if let Some(&bad) = illegal.first() {
            let mut probe = env.clone();
            prop_assert!(matches!(probe.step(bad), Err(EnvError::IllegalAction(_))));
            prop_assert_eq!(probe.state(), &before);
        }

        let ids = mask.allowed_ids();
        let a = ids[rng.gen_range(0..ids.len())];
        let out = env.step(a).unwrap();
        actions.push(a);
        let s = &out.next_state;
        prop_assert_eq!(s.step, before.step + 1);
        prop_assert_eq!(s.energized_count(), before.energized_count() + 1);
        prop_assert!(!before.s1[out.info.new_cell] && s.s1[out.info.new_cell]);
        for c in 0..g.n_cells() {
            prop_assert!(!before.s1[c] || s.s1[c], "s1 must be monotone");
            prop_assert!(!s.s2[c] || s.s1[c], "s2 must be a subset of s1");
        }
        let t = before.step;
        let served: f64 = (0..g.n_cells())
            .filter(|&c| out.info.dispatch.served[c])
            .map(|c| g.load(c, t))
            .sum();
        prop_assert!((served - out.info.served_power).abs() < 1e-9);
        let p = &out.info.penalties;
        prop_assert!(p.voltage_penalty >= 0.0 && p.ramp_penalty >= 0.0);
        let reward = served * g.dt - g.weights.voltage * p.voltage_penalty - g.weights.ramp * p.ramp_penalty;
        prop_assert!((reward - out.reward).abs() <= 1e-9 * reward.abs().max(1.0));
        let expect_done = s.step == g.horizon || !expected_mask(g, cont, &s.s1).contains(&true);
        prop_assert_eq!(out.done, expect_done);
    }
    prop_assert!(actions.len() <= g.horizon);
    prop_assert!(replay_validate(g, cont, &actions).is_clean());
    if env.step(0).is_ok() {
        return Err(TestCaseError::fail("step after done must fail"));
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn random_rollouts_keep_invariants(seed in any::<u64>(), cut in any::<u64>()) {
        let g = common::random_feeder(seed, 10, 10);
        let cont: Contingencies = (0..g.n_switches()).filter(|i| (cut >> i) & 3 == 0).collect();
        run_episode(&g, &cont, seed ^ cut)?;
    }

    #[test]
    fn bundled_feeders_keep_invariants(which in 0usize..3, seed in any::<u64>(), isolate in proptest::option::of(0usize..30)) {
        let g = common::fixture(["ieee13.feeder", "synth123.feeder", "synth240.feeder"][which]);
        let cont = isolate.filter(|&c| c < g.n_cells()).map_or_else(Contingencies::new, |c| g.isolating_contingencies(c));
        run_episode(&g, &cont, seed)?;
    }
}

#[test]
fn identical_seeds_give_identical_episodes() {
    let g = common::fixture("synth240.feeder");
    let a = gridseq_core::data::collect_random_walks(&g, &Contingencies::new(), 20, 3).unwrap();
    let b = gridseq_core::data::collect_random_walks(&g, &Contingencies::new(), 20, 3).unwrap();
    assert_eq!(a, b);
}
