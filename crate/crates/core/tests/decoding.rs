mod common;

use common::*;
use fits_core::model::decode::generate;
use fits_core::model::DecodeConfig;

#[test]
fn beam_matches_worked_example() {
    let err = check_beam_oracle().unwrap();
    assert!(err < 1e-12, "{err}");
}

#[test]
fn beam_of_one_is_greedy() {
    let m = beam_oracle_table();
    let g = generate(&m, &DecodeConfig::greedy(3));
    let b = generate(&m, &DecodeConfig::beam(1, 3));
    assert_eq!(g[0].tokens, b[0].tokens);
}

#[test]
fn wide_beam_is_exhaustive() {
    for seed in 0..50 {
        check_wide_beam(seed).unwrap();
    }
}

#[test]
fn beam_top_never_below_greedy() {
    for seed in 0..50 {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let m = TableModel::random(4, 4, &mut rng);
        let g = &generate(&m, &DecodeConfig::greedy(4))[0];
        if !g.finished {
            continue;
        }
        let b = generate(&m, &DecodeConfig::beam(2, 4));
        let best = b.iter().filter(|c| c.finished).map(|c| c.log_prob).fold(f64::NEG_INFINITY, f64::max);
        assert!(best >= g.log_prob - 1e-12, "seed {seed}");
    }
}

#[test]
fn director_gamma_zero_is_plain_lm() {
    assert_eq!(gamma_zero_mismatches(50, 7), 0);
}
