use fits_bench::fixture;
use fits_core::bots::{BotKind, Overrides, Responder};
use fits_core::data::Turn;

#[test]
fn fixture_builds_and_bot_responds() {
    let f = fixture();
    assert_eq!(f.examples.len(), 32);
    let out = f.bot(BotKind::Modular).respond(&[Turn::human("hello")], &Overrides::default()).unwrap();
    assert!(out.executed_query.is_some());
}
