mod common;

use common::*;
use fits_core::protocol::Budget;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn fits_round_trip(ds in dataset("a")) {
        check_round_trip(&ds)?;
    }

    #[test]
    fn stats_are_additive(a in dataset("a"), b in dataset("b")) {
        check_stats_additivity(&a, &b)?;
    }

    #[test]
    fn union_rejects_shared_ids(a in dataset("a")) {
        prop_assume!(!a.conversations.is_empty());
        prop_assert!(a.union(&a).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn protocol_invariants(acts in actions(), n in 1usize..6, cycles in any::<bool>(), rating in 1u8..=5) {
        let fx = FIXTURE.with(|f| f.clone());
        let budget = if cycles { Budget::CorrectionCycles(n) } else { Budget::BotTurns(n) };
        check_protocol(&fx, budget, &acts, rating)?;
    }
}

thread_local! {
    static FIXTURE: std::rc::Rc<ProtocolFixture> = std::rc::Rc::new(protocol_fixture());
}
