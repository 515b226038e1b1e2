//! EBNF front end.
//!
//! The dialect:
//!
//! ```text
//! # comment to end of line
//! name ::= body
//! ```
//!
//! where `body` is built from concatenation, alternation `|`, grouping
//! `( )`, postfix `*` `+` `?`, double-quoted literals (escapes `\"` `\\`
//! `\n` `\t`), character classes `[a-z0-9]` and negated classes `[^-]`.
//! A rule body runs until the next `name ::=` or end of input. The first
//! rule defines the start symbol.

use std::collections::HashMap;

use super::{GrammarError, NonterminalId, Production, Symbol};

/// Characters a negated class ranges over: printable ASCII plus `\n` and `\t`.
pub fn class_alphabet() -> impl Iterator<Item = char> {
    ['\t', '\n'].into_iter().chain((0x20u8..=0x7e).map(char::from))
}

#[derive(Debug, Clone, PartialEq)]
enum Expr {
    Alt(Vec<Expr>),
    Seq(Vec<Expr>),
    Literal(String),
    Class(Vec<char>),
    Ref(String),
    Repeat(Box<Expr>, Repeat),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Repeat {
    Star,
    Plus,
    Optional,
}

struct RuleAst {
    name: String,
    line: usize,
    col: usize,
    body: Expr,
}

struct Parser {
    chars: Vec<char>,
    pos: usize,
    line: usize,
    col: usize,
}

fn is_ident_start(c: char) -> bool {
    c.is_ascii_alphabetic() || c == '_'
}

fn is_ident_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_' || c == '-'
}

impl Parser {
    fn new(src: &str) -> Self {
        Parser {
            chars: src.chars().collect(),
            pos: 0,
            line: 1,
            col: 1,
        }
    }

    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += 1;
        if c == '\n' {
            self.line += 1;
            self.col = 1;
        } else {
            self.col += 1;
        }
        Some(c)
    }

    fn error(&self, message: impl Into<String>) -> GrammarError {
        GrammarError::Syntax {
            line: self.line,
            col: self.col,
            message: message.into(),
        }
    }

    fn skip_trivia(&mut self) {
        while let Some(c) = self.peek() {
            if c.is_whitespace() {
                self.bump();
            } else if c == '#' {
                while let Some(c) = self.bump() {
                    if c == '\n' {
                        break;
                    }
                }
            } else {
                break;
            }
        }
    }

    fn ident(&mut self) -> Result<String, GrammarError> {
        match self.peek() {
            Some(c) if is_ident_start(c) => {}
            _ => return Err(self.error("expected a rule name")),
        }
        let mut name = String::new();
        while let Some(c) = self.peek().filter(|&c| is_ident_char(c)) {
            name.push(c);
            self.bump();
        }
        Ok(name)
    }

    /// True if the input at the cursor is `ident ::=`.
    fn at_rule_head(&self) -> bool {
        let mut i = self.pos;
        match self.chars.get(i) {
            Some(&c) if is_ident_start(c) => {}
            _ => return false,
        }
        while self.chars.get(i).is_some_and(|&c| is_ident_char(c)) {
            i += 1;
        }
        while self.chars.get(i).is_some_and(|c| c.is_whitespace()) {
            i += 1;
        }
        self.chars.get(i..i + 3) == Some(&[':', ':', '='][..])
    }

    fn rules(&mut self) -> Result<Vec<RuleAst>, GrammarError> {
        let mut rules = Vec::new();
        loop {
            self.skip_trivia();
            if self.peek().is_none() {
                break;
            }
            let (line, col) = (self.line, self.col);
            let name = self.ident()?;
            self.skip_trivia();
            for expected in [':', ':', '='] {
                if self.peek() != Some(expected) {
                    return Err(self.error(format!("expected `::=` after `{name}`")));
                }
                self.bump();
            }
            let body = self.alternation()?;
            self.skip_trivia();
            if self.peek() == Some(')') {
                return Err(self.error("unbalanced `)`"));
            }
            rules.push(RuleAst {
                name,
                line,
                col,
                body,
            });
        }
        Ok(rules)
    }

    fn alternation(&mut self) -> Result<Expr, GrammarError> {
        let mut branches = vec![self.sequence()?];
        loop {
            self.skip_trivia();
            if self.peek() == Some('|') {
                self.bump();
                branches.push(self.sequence()?);
            } else {
                break;
            }
        }
        Ok(if branches.len() == 1 {
            branches.pop().unwrap()
        } else {
            Expr::Alt(branches)
        })
    }

    fn sequence(&mut self) -> Result<Expr, GrammarError> {
        let mut items = Vec::new();
        loop {
            self.skip_trivia();
            match self.peek() {
                None | Some('|') | Some(')') => break,
                _ if self.at_rule_head() => break,
                _ => items.push(self.postfix()?),
            }
        }
        Ok(if items.len() == 1 {
            items.pop().unwrap()
        } else {
            Expr::Seq(items)
        })
    }

    fn postfix(&mut self) -> Result<Expr, GrammarError> {
        let mut expr = self.atom()?;
        loop {
            let op = match self.peek() {
                Some('*') => Repeat::Star,
                Some('+') => Repeat::Plus,
                Some('?') => Repeat::Optional,
                _ => break,
            };
            self.bump();
            expr = Expr::Repeat(Box::new(expr), op);
        }
        Ok(expr)
    }

    fn atom(&mut self) -> Result<Expr, GrammarError> {
        match self.peek() {
            Some('"') => self.literal(),
            Some('[') => self.class(),
            Some('(') => {
                self.bump();
                let inner = self.alternation()?;
                self.skip_trivia();
                if self.bump() != Some(')') {
                    return Err(self.error("expected `)`"));
                }
                Ok(inner)
            }
            Some(c) if is_ident_start(c) => {
                Ok(Expr::Ref(self.ident()?))
            }
            Some(c) => Err(self.error(format!("unexpected character `{}`", c.escape_default()))),
            None => Err(self.error("unexpected end of input")),
        }
    }

    fn escape(&mut self, extra: &[char]) -> Result<char, GrammarError> {
        match self.bump() {
            Some('n') => Ok('\n'),
            Some('t') => Ok('\t'),
            Some(c @ ('"' | '\\')) => Ok(c),
            Some(c) if extra.contains(&c) => Ok(c),
            Some(c) => Err(self.error(format!("unknown escape `\\{}`", c.escape_default()))),
            None => Err(self.error("unterminated escape")),
        }
    }

    fn literal(&mut self) -> Result<Expr, GrammarError> {
        self.bump();
        let mut text = String::new();
        loop {
            match self.bump() {
                Some('"') => break,
                Some('\\') => text.push(self.escape(&[])?),
                Some(c) => text.push(c),
                None => return Err(self.error("unterminated string literal")),
            }
        }
        Ok(Expr::Literal(text))
    }

    fn class_char(&mut self) -> Result<char, GrammarError> {
        match self.bump() {
            Some('\\') => self.escape(&[']', '[', '-', '^']),
            Some(c) => Ok(c),
            None => Err(self.error("unterminated character class")),
        }
    }

    fn class(&mut self) -> Result<Expr, GrammarError> {
        self.bump();
        let negated = if self.peek() == Some('^') {
            self.bump();
            true
        } else {
            false
        };
        let mut members: Vec<char> = Vec::new();
        let mut first = true;
        loop {
            match self.peek() {
                None => return Err(self.error("unterminated character class")),
                Some(']') if !first => {
                    self.bump();
                    break;
                }
                Some(']') => return Err(self.error("empty character class")),
                _ => {}
            }
            first = false;
            let lo = self.class_char()?;
            let is_range = self.peek() == Some('-')
                && self.chars.get(self.pos + 1).is_some_and(|&c| c != ']');
            if is_range {
                self.bump();
                let hi = self.class_char()?;
                if hi < lo {
                    return Err(self.error(format!(
                        "reversed range `{}-{}`",
                        lo.escape_default(),
                        hi.escape_default()
                    )));
                }
                members.extend(lo..=hi);
            } else {
                members.push(lo);
            }
        }
        let mut set: Vec<char> = if negated {
            class_alphabet().filter(|c| !members.contains(c)).collect()
        } else {
            members
        };
        set.sort_unstable();
        set.dedup();
        Ok(Expr::Class(set))
    }
}

/// Output of the compiler before pruning.
pub(crate) struct RawGrammar {
    pub names: Vec<String>,
    pub productions: Vec<Production>,
}

struct Compiler {
    names: Vec<String>,
    defined: HashMap<String, NonterminalId>,
    productions: Vec<Production>,
    fresh: usize,
}

impl Compiler {
    fn fresh(&mut self, owner: &str, tag: &str) -> NonterminalId {
        self.fresh += 1;
        let id = NonterminalId(self.names.len() as u32);
        self.names.push(format!("{owner}~{tag}{}", self.fresh));
        id
    }

    fn add(&mut self, lhs: NonterminalId, rhs: Vec<Symbol>) {
        self.productions.push(Production { lhs, rhs });
    }

    /// Compiles `expr` to the symbol string it stands for inside a sequence.
    fn symbols(&mut self, owner: &str, expr: &Expr) -> Result<Vec<Symbol>, GrammarError> {
        match expr {
            Expr::Literal(text) => Ok(text.chars().map(Symbol::Terminal).collect()),
            Expr::Seq(items) => {
                let mut out = Vec::new();
                for item in items {
                    out.extend(self.symbols(owner, item)?);
                }
                Ok(out)
            }
            Expr::Class(members) if members.len() == 1 => Ok(vec![Symbol::Terminal(members[0])]),
            Expr::Ref(name) => match self.defined.get(name) {
                Some(&id) => Ok(vec![Symbol::Nonterminal(id)]),
                None => Err(GrammarError::UndefinedNonterminal(name.clone())),
            },
            _ => Ok(vec![self.single(owner, expr)?]),
        }
    }

    /// Compiles `expr` to exactly one symbol, introducing a fresh nonterminal
    /// when it is not already a single symbol.
    fn single(&mut self, owner: &str, expr: &Expr) -> Result<Symbol, GrammarError> {
        match expr {
            Expr::Class(members) => {
                if members.len() == 1 {
                    return Ok(Symbol::Terminal(members[0]));
                }
                let id = self.fresh(owner, "class");
                for &c in members {
                    self.add(id, vec![Symbol::Terminal(c)]);
                }
                Ok(Symbol::Nonterminal(id))
            }
            Expr::Alt(branches) => {
                let id = self.fresh(owner, "group");
                for branch in branches {
                    let rhs = self.symbols(owner, branch)?;
                    self.add(id, rhs);
                }
                Ok(Symbol::Nonterminal(id))
            }
            Expr::Repeat(inner, op) => {
                let x = self.single(owner, inner)?;
                let tag = match op {
                    Repeat::Star => "star",
                    Repeat::Plus => "plus",
                    Repeat::Optional => "opt",
                };
                let f = self.fresh(owner, tag);
                match op {
                    Repeat::Star => {
                        self.add(f, vec![]);
                        self.add(f, vec![x, Symbol::Nonterminal(f)]);
                    }
                    Repeat::Plus => {
                        self.add(f, vec![x]);
                        self.add(f, vec![x, Symbol::Nonterminal(f)]);
                    }
                    Repeat::Optional => {
                        self.add(f, vec![]);
                        self.add(f, vec![x]);
                    }
                }
                Ok(Symbol::Nonterminal(f))
            }
            other => {
                let mut syms = self.symbols(owner, other)?;
                if syms.len() == 1 {
                    return Ok(syms.pop().unwrap());
                }
                let id = self.fresh(owner, "group");
                self.add(id, syms);
                Ok(Symbol::Nonterminal(id))
            }
        }
    }
}

pub(crate) fn compile(src: &str) -> Result<RawGrammar, GrammarError> {
    let rules = Parser::new(src).rules()?;
    if rules.is_empty() {
        return Err(GrammarError::EmptyGrammar);
    }
    let mut compiler = Compiler {
        names: Vec::new(),
        defined: HashMap::new(),
        productions: Vec::new(),
        fresh: 0,
    };
    for rule in &rules {
        if compiler.defined.contains_key(&rule.name) {
            return Err(GrammarError::DuplicateRule {
                name: rule.name.clone(),
                line: rule.line,
                col: rule.col,
            });
        }
        let id = NonterminalId(compiler.names.len() as u32);
        compiler.names.push(rule.name.clone());
        compiler.defined.insert(rule.name.clone(), id);
    }
    for (index, rule) in rules.iter().enumerate() {
        let lhs = NonterminalId(index as u32);
        let branches: &[Expr] = match &rule.body {
            Expr::Alt(branches) => branches,
            single => std::slice::from_ref(single),
        };
        for branch in branches {
            let rhs = compiler.symbols(&rule.name, branch)?;
            compiler.add(lhs, rhs);
        }
    }
    Ok(RawGrammar {
        names: compiler.names,
        productions: compiler.productions,
    })
}
