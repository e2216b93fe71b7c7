//! Closed-class-list noun-phrase heuristic used for unsupervised knowledge targets.

use std::collections::HashSet;
use std::sync::OnceLock;

use super::{is_punct, tokenize};

const WORD_LISTS: &str = include_str!("../../data/closed_class_v1.txt");
pub const WORD_LIST_VERSION: u32 = 1;

struct Lists {
    closed: HashSet<&'static str>,
    modifiers: HashSet<&'static str>,
}

fn lists() -> &'static Lists {
    static LISTS: OnceLock<Lists> = OnceLock::new();
    LISTS.get_or_init(|| {
        let mut closed = HashSet::new();
        let mut modifiers = HashSet::new();
        let mut in_modifiers = false;
        for line in WORD_LISTS.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if line.starts_with('[') {
                in_modifiers = line == "[modifiers]";
                continue;
            }
            let target = if in_modifiers { &mut modifiers } else { &mut closed };
            target.extend(line.split_whitespace());
        }
        Lists { closed, modifiers }
    })
}

/// A phrase as a half-open token span `[start, end)` over `tokenize(text)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NounPhrase {
    pub start: usize,
    pub end: usize,
    pub text: String,
}

/// Maximal runs of tokens that are neither closed-class words nor punctuation,
/// with trailing modifiers trimmed. Ordered by position, never overlapping.
pub fn extract_noun_phrases(text: &str) -> Vec<NounPhrase> {
    let lists = lists();
    let toks = tokenize(text);
    let breaks = |t: &str| is_punct(t) || lists.closed.contains(t);
    let mut out = Vec::new();
    let mut i = 0;
    while i < toks.len() {
        if breaks(&toks[i]) {
            i += 1;
            continue;
        }
        let start = i;
        while i < toks.len() && !breaks(&toks[i]) {
            i += 1;
        }
        let mut end = i;
        while end > start && lists.modifiers.contains(toks[end - 1].as_str()) {
            end -= 1;
        }
        if end > start {
            out.push(NounPhrase { start, end, text: toks[start..end].join(" ") });
        }
    }
    out
}
