//! Incremental Earley recognition over characters.
//!
//! ε-productions are handled at prediction time (Aycock–Horspool): when a
//! nullable nonterminal is predicted, the predicting item is advanced past
//! it immediately. A [`RecognizerState`] is a persistent snapshot: item
//! sets are shared behind `Arc`s, and `advance` returns a new state.

use std::sync::Arc;

use rustc_hash::FxHashSet;

use super::{Grammar, GrammarError, NonterminalId, Symbol};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct Item {
    production: u32,
    dot: u32,
    origin: u32,
}

#[derive(Debug)]
struct ItemSet {
    items: Vec<Item>,
}

/// Earley chart for a consumed character prefix.
///
/// Every state that exists is viable: its prefix extends to some sentence.
/// Dead ends are reported by [`RecognizerState::advance`] as errors.
#[derive(Debug, Clone)]
pub struct RecognizerState<'g> {
    grammar: &'g Grammar,
    chart: Vec<Arc<ItemSet>>,
    complete: bool,
}

impl<'g> RecognizerState<'g> {
    pub(crate) fn new(grammar: &'g Grammar) -> Result<Self, GrammarError> {
        if grammar.is_empty_language() {
            return Err(GrammarError::EmptyLanguage);
        }
        let seed = grammar
            .productions_of(grammar.start())
            .iter()
            .map(|&p| Item {
                production: p,
                dot: 0,
                origin: 0,
            })
            .collect();
        let items = closure(grammar, &[], seed);
        Ok(Self::from_items(grammar, Vec::new(), items))
    }

    fn from_items(grammar: &'g Grammar, mut chart: Vec<Arc<ItemSet>>, items: Vec<Item>) -> Self {
        let start = grammar.start();
        let complete = items.iter().any(|it| {
            let p = &grammar.productions()[it.production as usize];
            it.origin == 0 && p.lhs == start && it.dot as usize == p.rhs.len()
        });
        chart.push(Arc::new(ItemSet { items }));
        RecognizerState {
            grammar,
            chart,
            complete,
        }
    }

    pub fn grammar(&self) -> &'g Grammar {
        self.grammar
    }

    /// Number of characters consumed.
    pub fn consumed_len(&self) -> usize {
        self.chart.len() - 1
    }

    /// Always true: non-viable prefixes never produce a state.
    pub fn is_viable(&self) -> bool {
        true
    }

    /// True if the consumed prefix is itself a sentence.
    pub fn is_complete(&self) -> bool {
        self.complete
    }

    /// Consumes one character. `self` is left untouched.
    pub fn advance(&self, c: char) -> Result<Self, GrammarError> {
        let g = self.grammar;
        let last = self.chart.last().expect("chart is never empty");
        let scanned: Vec<Item> = last
            .items
            .iter()
            .filter(|it| next_symbol(g, it) == Some(Symbol::Terminal(c)))
            .map(|it| Item {
                dot: it.dot + 1,
                ..*it
            })
            .collect();
        if scanned.is_empty() {
            return Err(GrammarError::DeadEnd {
                position: self.consumed_len(),
                ch: c,
            });
        }
        let items = closure(g, &self.chart, scanned);
        Ok(Self::from_items(g, self.chart.clone(), items))
    }

    /// Consumes every character of `s`.
    pub fn advance_str(&self, s: &str) -> Result<Self, GrammarError> {
        let mut state = self.clone();
        for c in s.chars() {
            state = state.advance(c)?;
        }
        Ok(state)
    }

    /// True if `c` can be consumed next.
    pub fn accepts_char(&self, c: char) -> bool {
        let last = self.chart.last().expect("chart is never empty");
        last.items
            .iter()
            .any(|it| next_symbol(self.grammar, it) == Some(Symbol::Terminal(c)))
    }

    /// Characters that can be consumed next, sorted.
    pub fn allowed_chars(&self) -> Vec<char> {
        let last = self.chart.last().expect("chart is never empty");
        let mut out: Vec<char> = last
            .items
            .iter()
            .filter_map(|it| match next_symbol(self.grammar, it) {
                Some(Symbol::Terminal(c)) => Some(c),
                _ => None,
            })
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Item count of the newest set; exposed for diagnostics.
    pub fn frontier_size(&self) -> usize {
        self.chart.last().map_or(0, |s| s.items.len())
    }
}

impl PartialEq for RecognizerState<'_> {
    /// Two states are equal when their charts hold the same items.
    fn eq(&self, other: &Self) -> bool {
        std::ptr::eq(self.grammar, other.grammar)
            && self.chart.len() == other.chart.len()
            && self
                .chart
                .iter()
                .zip(&other.chart)
                .all(|(a, b)| Arc::ptr_eq(a, b) || a.items == b.items)
    }
}

fn next_symbol(g: &Grammar, it: &Item) -> Option<Symbol> {
    g.productions()[it.production as usize]
        .rhs
        .get(it.dot as usize)
        .copied()
}

/// Predict/complete to a fixpoint. `chart` holds the finished sets before
/// the one under construction, whose index is `chart.len()`.
fn closure(g: &Grammar, chart: &[Arc<ItemSet>], seed: Vec<Item>) -> Vec<Item> {
    let current = chart.len() as u32;
    let mut seen: FxHashSet<Item> = FxHashSet::default();
    let mut items = Vec::with_capacity(seed.len() * 2);
    for it in seed {
        if seen.insert(it) {
            items.push(it);
        }
    }
    let mut push = |items: &mut Vec<Item>, it: Item| {
        if seen.insert(it) {
            items.push(it);
        }
    };
    let mut i = 0;
    while i < items.len() {
        let it = items[i];
        i += 1;
        let production = &g.productions()[it.production as usize];
        match production.rhs.get(it.dot as usize) {
            Some(Symbol::Nonterminal(b)) => {
                for &p in g.productions_of(*b) {
                    push(
                        &mut items,
                        Item {
                            production: p,
                            dot: 0,
                            origin: current,
                        },
                    );
                }
                if g.is_nullable(*b) {
                    push(&mut items, Item { dot: it.dot + 1, ..it });
                }
            }
            Some(Symbol::Terminal(_)) => {}
            None => {
                // An item completed with origin == current derived ε, so the
                // nullable shortcut above has already advanced its parents.
                if it.origin == current {
                    continue;
                }
                let lhs: NonterminalId = production.lhs;
                for parent in &chart[it.origin as usize].items {
                    if next_symbol(g, parent) == Some(Symbol::Nonterminal(lhs)) {
                        push(
                            &mut items,
                            Item {
                                dot: parent.dot + 1,
                                ..*parent
                            },
                        );
                    }
                }
            }
        }
    }
    items
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(src: &str) -> Grammar {
        Grammar::parse(src).unwrap()
    }

    #[test]
    fn two_word_language_states() {
        let g1 = g(r#"root ::= "00" | "11""#);
        let empty = g1.recognizer().unwrap();
        assert!(empty.is_viable() && !empty.is_complete());

        let zero = empty.advance('0').unwrap();
        let zz = zero.advance('0').unwrap();
        assert!(zz.is_complete());
        assert_eq!(zz.consumed_len(), 2);
        assert!(matches!(
            zero.advance('1'),
            Err(GrammarError::DeadEnd { position: 1, ch: '1' })
        ));

        let one = empty.advance('1').unwrap();
        assert!(one.is_viable() && !one.is_complete());
    }

    #[test]
    fn epsilon_language_is_complete_at_start() {
        let eps = g(r#"a ::= """#);
        let s = eps.recognizer().unwrap();
        assert!(s.is_complete());
        assert!(s.allowed_chars().is_empty());
    }

    #[test]
    fn unproductive_start_is_empty_language() {
        assert_eq!(g("a ::= a").recognizer().unwrap_err(), GrammarError::EmptyLanguage);
    }

    #[test]
    fn left_recursion_and_nullable_middles() {
        let expr = g(r#"e ::= e "+" t | t
t ::= opt "a" opt
opt ::= "" | "!""#);
        for (s, ok) in [("a", true), ("!a!+a", true), ("a+", false), ("+a", false), ("a++a", false)] {
            assert_eq!(expr.accepts(s), ok, "{s:?}");
        }
        assert!(expr.accepts_prefix("a+"));
    }

    #[test]
    fn snapshots_are_persistent() {
        let g1 = g(r#"root ::= "00" | "11" | "01""#);
        let zero = g1.recognizer().unwrap().advance('0').unwrap();
        let before = zero.clone();
        let a = zero.advance('0').unwrap();
        let b = zero.advance('1').unwrap();
        assert_eq!(zero, before);
        assert!(a.is_complete() && b.is_complete());
        assert_ne!(a, b);
    }

    #[test]
    fn allowed_chars_matches_accepts_char() {
        let dyck = g(r#"e ::= "" | "(" e ")" e"#);
        let s = dyck.recognizer().unwrap().advance_str("((").unwrap();
        assert_eq!(s.allowed_chars(), vec!['(', ')']);
        assert!(s.accepts_char(')') && !s.accepts_char('x'));
    }
}
