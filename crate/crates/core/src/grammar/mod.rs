//! Character-level context-free grammars.
//!
//! Grammars are written in a small EBNF dialect (see [`ebnf`]) and compiled
//! to BNF productions whose terminals are single characters. Useless
//! nonterminals (unproductive or unreachable) are pruned at parse time, so
//! every remaining Earley item can still be completed to a sentence.

mod earley;
pub mod ebnf;
mod enumerate;

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

pub use earley::RecognizerState;
pub use enumerate::DEFAULT_ENUMERATION_CAP;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GrammarError {
    #[error("syntax error at line {line}, column {col}: {message}")]
    Syntax {
        line: usize,
        col: usize,
        message: String,
    },
    #[error("undefined nonterminal `{0}`")]
    UndefinedNonterminal(String),
    #[error("rule `{name}` is defined more than once (line {line}, column {col})")]
    DuplicateRule { name: String, line: usize, col: usize },
    #[error("grammar contains no rules")]
    EmptyGrammar,
    #[error("the start symbol derives no terminal string")]
    EmptyLanguage,
    #[error("prefix leaves the grammar at character {position} ({ch:?})")]
    DeadEnd { position: usize, ch: char },
    #[error("language enumeration exceeded the cap of {cap} strings")]
    BudgetExceeded { cap: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NonterminalId(pub u32);

impl NonterminalId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Symbol {
    Terminal(char),
    Nonterminal(NonterminalId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Production {
    pub lhs: NonterminalId,
    pub rhs: Vec<Symbol>,
}

/// A compiled grammar `(Σ, N, S, R)` plus the EBNF text it came from.
#[derive(Debug, Clone)]
pub struct Grammar {
    source: String,
    names: Vec<String>,
    productions: Vec<Production>,
    by_lhs: Vec<Vec<u32>>,
    nullable: Vec<bool>,
    terminals: BTreeSet<char>,
    start: NonterminalId,
}

impl Grammar {
    /// Parses and compiles an EBNF grammar.
    pub fn parse(src: &str) -> Result<Grammar, GrammarError> {
        let raw = ebnf::compile(src)?;
        Ok(Self::from_raw(src.to_owned(), raw.names, raw.productions))
    }

    fn from_raw(source: String, names: Vec<String>, productions: Vec<Production>) -> Grammar {
        let n = names.len();
        let start = NonterminalId(0);

        // Productive nonterminals: least fixpoint over "all rhs symbols productive".
        let mut productive = vec![false; n];
        loop {
            let mut changed = false;
            for p in &productions {
                if !productive[p.lhs.index()]
                    && p.rhs.iter().all(|s| match s {
                        Symbol::Terminal(_) => true,
                        Symbol::Nonterminal(b) => productive[b.index()],
                    })
                {
                    productive[p.lhs.index()] = true;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        let usable: Vec<&Production> = productions
            .iter()
            .filter(|p| {
                p.rhs.iter().all(|s| match s {
                    Symbol::Terminal(_) => true,
                    Symbol::Nonterminal(b) => productive[b.index()],
                })
            })
            .collect();

        let mut reachable = vec![false; n];
        reachable[start.index()] = true;
        let mut stack = vec![start];
        while let Some(a) = stack.pop() {
            for p in usable.iter().filter(|p| p.lhs == a) {
                for s in &p.rhs {
                    if let Symbol::Nonterminal(b) = *s {
                        if !reachable[b.index()] {
                            reachable[b.index()] = true;
                            stack.push(b);
                        }
                    }
                }
            }
        }

        // Renumber the surviving nonterminals; the start symbol keeps id 0.
        let mut remap = vec![None; n];
        let mut kept_names = Vec::new();
        for (old, name) in names.into_iter().enumerate() {
            if reachable[old] && (productive[old] || old == start.index()) {
                remap[old] = Some(NonterminalId(kept_names.len() as u32));
                kept_names.push(name);
            }
        }
        let map = |s: &Symbol| match *s {
            Symbol::Terminal(c) => Symbol::Terminal(c),
            Symbol::Nonterminal(b) => Symbol::Nonterminal(remap[b.index()].expect("pruned symbol")),
        };
        let kept: Vec<Production> = usable
            .into_iter()
            .filter(|p| reachable[p.lhs.index()])
            .map(|p| Production {
                lhs: remap[p.lhs.index()].expect("pruned lhs"),
                rhs: p.rhs.iter().map(map).collect(),
            })
            .collect();

        let mut by_lhs = vec![Vec::new(); kept_names.len()];
        for (i, p) in kept.iter().enumerate() {
            by_lhs[p.lhs.index()].push(i as u32);
        }
        let mut nullable = vec![false; kept_names.len()];
        loop {
            let mut changed = false;
            for p in &kept {
                if !nullable[p.lhs.index()]
                    && p.rhs.iter().all(|s| matches!(s, Symbol::Nonterminal(b) if nullable[b.index()]))
                {
                    nullable[p.lhs.index()] = true;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        let terminals = kept
            .iter()
            .flat_map(|p| p.rhs.iter())
            .filter_map(|s| match s {
                Symbol::Terminal(c) => Some(*c),
                Symbol::Nonterminal(_) => None,
            })
            .collect();

        Grammar {
            source,
            names: kept_names,
            productions: kept,
            by_lhs,
            nullable,
            terminals,
            start,
        }
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn start(&self) -> NonterminalId {
        self.start
    }

    /// Terminal characters used by the (pruned) grammar.
    pub fn terminals(&self) -> &BTreeSet<char> {
        &self.terminals
    }

    pub fn productions(&self) -> &[Production] {
        &self.productions
    }

    pub fn nonterminal_count(&self) -> usize {
        self.names.len()
    }

    pub fn name(&self, id: NonterminalId) -> &str {
        &self.names[id.index()]
    }

    pub fn is_nullable(&self, id: NonterminalId) -> bool {
        self.nullable[id.index()]
    }

    pub(crate) fn productions_of(&self, id: NonterminalId) -> &[u32] {
        &self.by_lhs[id.index()]
    }

    /// True if the language is empty (the start symbol is unproductive).
    pub fn is_empty_language(&self) -> bool {
        self.by_lhs[self.start.index()].is_empty()
    }

    /// Recognizer state for the empty prefix.
    pub fn recognizer(&self) -> Result<RecognizerState<'_>, GrammarError> {
        RecognizerState::new(self)
    }

    /// Membership test for a complete string.
    pub fn accepts(&self, s: &str) -> bool {
        self.recognizer()
            .and_then(|r| r.advance_str(s))
            .is_ok_and(|r| r.is_complete())
    }

    /// True if `s` is a prefix of some sentence.
    pub fn accepts_prefix(&self, s: &str) -> bool {
        self.recognizer().and_then(|r| r.advance_str(s)).is_ok()
    }

    /// All sentences of at most `max_chars` characters, in lexicographic order.
    pub fn enumerate_language(&self, max_chars: usize) -> Result<BTreeSet<String>, GrammarError> {
        enumerate::enumerate(self, max_chars, DEFAULT_ENUMERATION_CAP)
    }

    pub fn enumerate_language_with_cap(
        &self,
        max_chars: usize,
        cap: usize,
    ) -> Result<BTreeSet<String>, GrammarError> {
        enumerate::enumerate(self, max_chars, cap)
    }
}

impl fmt::Display for Grammar {
    /// BNF listing of the compiled productions.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.productions {
            write!(f, "{} ::=", self.name(p.lhs))?;
            if p.rhs.is_empty() {
                write!(f, " \"\"")?;
            }
            for s in &p.rhs {
                match s {
                    Symbol::Terminal(c) => write!(f, " \"{}\"", escape(&c.to_string()))?,
                    Symbol::Nonterminal(b) => write!(f, " {}", self.name(*b))?,
                }
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Parses EBNF source into a [`Grammar`].
pub fn parse_ebnf(src: &str) -> Result<Grammar, GrammarError> {
    Grammar::parse(src)
}

/// Escapes a string the way literals are written in grammar files.
pub fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            c => out.push(c),
        }
    }
    out
}

/// Inverse of [`escape`]. Returns `None` on a malformed escape.
pub fn unescape(s: &str) -> Option<String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        out.push(match chars.next()? {
            '"' => '"',
            '\\' => '\\',
            'n' => '\n',
            't' => '\t',
            _ => return None,
        });
    }
    Some(out)
}
