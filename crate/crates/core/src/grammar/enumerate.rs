//! Bounded language enumeration, independent of the recognizer.
//!
//! Each nonterminal gets the set of strings of length ≤ `max_chars` it
//! derives; the sets are grown to a joint fixpoint.

use std::collections::BTreeSet;

use super::{Grammar, GrammarError, Symbol};

pub const DEFAULT_ENUMERATION_CAP: usize = 100_000;

pub(super) fn enumerate(
    g: &Grammar,
    max_chars: usize,
    cap: usize,
) -> Result<BTreeSet<String>, GrammarError> {
    if g.is_empty_language() {
        return Ok(BTreeSet::new());
    }
    let mut sets: Vec<BTreeSet<String>> = vec![BTreeSet::new(); g.nonterminal_count()];
    loop {
        let mut changed = false;
        for p in g.productions() {
            let mut partial: BTreeSet<String> = BTreeSet::from([String::new()]);
            for symbol in &p.rhs {
                let mut next = BTreeSet::new();
                match symbol {
                    Symbol::Terminal(c) => {
                        for s in &partial {
                            if s.chars().count() < max_chars {
                                let mut t = s.clone();
                                t.push(*c);
                                next.insert(t);
                            }
                        }
                    }
                    Symbol::Nonterminal(b) => {
                        for s in &partial {
                            let used = s.chars().count();
                            for tail in &sets[b.index()] {
                                if used + tail.chars().count() <= max_chars {
                                    next.insert(format!("{s}{tail}"));
                                }
                            }
                        }
                    }
                }
                if next.len() > cap {
                    return Err(GrammarError::BudgetExceeded { cap });
                }
                partial = next;
                if partial.is_empty() {
                    break;
                }
            }
            let target = &mut sets[p.lhs.index()];
            for s in partial {
                if target.insert(s) {
                    changed = true;
                }
            }
            if target.len() > cap {
                return Err(GrammarError::BudgetExceeded { cap });
            }
        }
        if !changed {
            break;
        }
    }
    Ok(std::mem::take(&mut sets[g.start().index()]))
}
