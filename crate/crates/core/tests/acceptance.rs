//! Acceptance gate. Each test prints one PASS line with its measured
//! numbers; a failed assertion means the criterion does not hold.

use rollshield_core::model::{
    self,
    gen::{self, GenConfig},
    oracle, Budget, Event,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;
use std::time::Instant;

/// Checker and oracle agree on every history with at most 8 events over two
/// threads, two blocks and at most one crash (relabelings pruned), and on
/// ten thousand random histories with up to 12 events. Durable-cut sets are
/// compared exactly on the crash-free eras of the exhaustive set.
#[test]
fn c01_checker_equals_oracle() {
    let t0 = Instant::now();
    let mut total = 0u64;
    let mut crash_free = 0u64;
    gen::for_each_history(GenConfig::small_exhaustive(), &mut |h| {
        total += 1;
        let fast = model::is_crash_consistent(h, &mut Budget::default())
            .expect("small histories stay within budget")
            .is_consistent();
        let slow = oracle::is_crash_consistent(h);
        assert_eq!(fast, slow, "consistency divergence on {h:?}");
        if !h.iter().any(Event::is_crash) {
            crash_free += 1;
            let fast_lin = model::is_linearizable(h, &mut Budget::default())
                .unwrap()
                .is_some();
            let slow_lin = oracle::is_linearizable(h);
            assert_eq!(fast_lin, slow_lin, "linearizability divergence on {h:?}");
            let fast_cuts: BTreeSet<Vec<Event>> =
                model::durable_cuts(h, &mut Budget::default())
                    .unwrap()
                    .into_iter()
                    .collect();
            let slow_cuts: BTreeSet<Vec<Event>> = oracle::durable_cuts(h).into_iter().collect();
            assert_eq!(fast_cuts, slow_cuts, "durable-cut divergence on {h:?}");
        }
    });
    let exhaustive_time = t0.elapsed();

    let t1 = Instant::now();
    let cfg = GenConfig {
        max_events: 12,
        threads: 3,
        blocks: 3,
        max_crashes: 2,
        symmetry_reduce: false,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0x0c01);
    let random_runs = 10_000u64;
    for _ in 0..random_runs {
        let h = gen::random_history(&mut rng, cfg, 8);
        let fast = model::is_crash_consistent(&h, &mut Budget::default())
            .expect("12-event histories stay within budget")
            .is_consistent();
        let slow = oracle::is_crash_consistent(&h);
        assert_eq!(fast, slow, "consistency divergence on {h:?}");
    }
    let random_time = t1.elapsed();

    println!(
        "PASS criterion 1: checker == oracle on {total} exhaustive histories \
         ({crash_free} crash-free, cut sets compared) in {exhaustive_time:?} \
         and {random_runs} random histories in {random_time:?}, 0 disagreements"
    );
}
