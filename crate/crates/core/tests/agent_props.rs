use std::sync::Arc;

use expgen::agent::{consensus_action, run_episode, switch_decision, Branch, EnsembleBundle, Fallback, SwitchState};
use expgen::env::{generate_level, Action, LevelKind, ObsMode};
use expgen::policy::{Architecture, ObsEncoding, PolicyParams};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fixed(action: usize, recurrent: bool) -> PolicyParams {
    let arch = Architecture::new(ObsEncoding::Flat, 9, 9, vec![], recurrent.then_some(4), Action::COUNT);
    let mut p = PolicyParams::zeros(arch);
    p.segment_mut("pi.b").unwrap()[action] = 60.0;
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn counter_dynamics(seed in any::<u64>(), alpha in 0.05f64..=1.0, pattern in prop::collection::vec(prop::option::of(0usize..5), 1..200)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = SwitchState::default();
        for c in pattern {
            let before = s.counter;
            let branch = switch_decision(c, &mut s, alpha, &mut rng).unwrap();
            match branch {
                Branch::Explore => prop_assert!(s.counter >= 0),
                Branch::Consensus => {
                    prop_assert!(c.is_some());
                    prop_assert!(before - 1 < 0);
                    prop_assert_eq!(s.counter, before - 1);
                }
            }
        }
    }

    #[test]
    fn consensus_is_a_plurality_reaching_k(actions in prop::collection::vec(0usize..5, 1..12), k in 1usize..12) {
        let mut counts = [0usize; 5];
        for &a in &actions {
            counts[a] += 1;
        }
        let top = *counts.iter().max().unwrap();
        match consensus_action(&actions, k) {
            Some(a) => {
                prop_assert_eq!(counts[a], top);
                prop_assert!(top >= k);
                prop_assert!(counts[..a].iter().all(|&c| c < top));
            }
            None => prop_assert!(top < k),
        }
    }
}

#[test]
fn noop_explorer_still_reaches_the_horizon() {
    // Members disagree forever (k = m + 1), so the NoOp explorer acts on every step.
    let members = vec![fixed(0, false), fixed(1, false), fixed(2, false)];
    let bundle = EnsembleBundle::new(members, Some(fixed(Action::NoOp.index(), true)), 4, 0.5, Fallback::MaxEnt).unwrap();
    let level = Arc::new(generate_level(4, LevelKind::Maze, 9, 9).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let r = run_episode(&bundle, level, ObsMode::Full, 100, None, &mut rng).unwrap();
    assert_eq!(r.trace.len(), 100);
    assert!(!r.stats.success);
    assert!(r.trace.iter().all(|t| t.branch == Branch::Explore && t.action == Action::NoOp.index()));
}
