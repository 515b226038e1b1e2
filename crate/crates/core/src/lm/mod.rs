//! The language-model contract and desk-scale implementations.
//!
//! A model exposes a [`Vocabulary`] and a deterministic next-token
//! distribution over `tokens + eos`. The end marker always occupies the
//! last slot of a [`NextTokenDist`].

mod ngram;
mod remote;
mod table;

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ngram::{escape_corpus_token, parse_corpus, NgramLm};
pub use remote::{RemoteLm, DEFAULT_REMOTE_TIMEOUT};
pub use table::TableLm;

/// Wire and file spelling of the end-of-sequence marker.
pub const EOS: &str = "<eos>";

/// Tolerance on the total mass of a [`NextTokenDist`].
pub const NORMALIZATION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LmError {
    #[error("vocabulary tokens must be non-empty")]
    EmptyToken,
    #[error("duplicate vocabulary token {0:?}")]
    DuplicateToken(String),
    #[error("{EOS:?} is reserved for the end marker")]
    ReservedToken,
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("vocabulary has no single-character token for {0:?}")]
    MissingCharToken(char),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("sequence is not terminated")]
    Unterminated,
    #[error("malformed model file: {0}")]
    Format(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("request timed out")]
    Timeout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Default)]
pub(crate) struct TrieNode {
    pub children: Vec<(char, u32)>,
    pub token: Option<TokenId>,
}

/// Character trie over the vocabulary, used to mask all tokens sharing a
/// prefix with one recognizer walk.
#[derive(Debug, Clone)]
pub(crate) struct TokenTrie {
    pub nodes: Vec<TrieNode>,
}

impl TokenTrie {
    fn build(tokens: &[String]) -> Self {
        let mut nodes = vec![TrieNode::default()];
        for (i, token) in tokens.iter().enumerate() {
            let mut at = 0usize;
            for c in token.chars() {
                at = match nodes[at].children.iter().find(|(k, _)| *k == c) {
                    Some(&(_, child)) => child as usize,
                    None => {
                        let child = nodes.len();
                        nodes.push(TrieNode::default());
                        nodes[at].children.push((c, child as u32));
                        child
                    }
                };
            }
            nodes[at].token = Some(TokenId(i as u32));
        }
        TokenTrie { nodes }
    }
}

/// Ordered set of distinct non-empty token strings plus an implicit end marker.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    trie: TokenTrie,
}

impl Vocabulary {
    pub fn new<I, S>(tokens: I) -> Result<Self, LmError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(LmError::EmptyToken);
            }
            if t == EOS {
                return Err(LmError::ReservedToken);
            }
            if index.insert(t.clone(), TokenId(i as u32)).is_some() {
                return Err(LmError::DuplicateToken(t.clone()));
            }
        }
        let trie = TokenTrie::build(&tokens);
        Ok(Vocabulary {
            tokens,
            index,
            trie,
        })
    }

    /// Number of content tokens (the end marker excluded).
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of outcomes in a next-token distribution: tokens plus eos.
    pub fn outcomes(&self) -> usize {
        self.tokens.len() + 1
    }

    /// Slot of the end marker in a [`NextTokenDist`].
    pub fn eos_index(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id.index()]
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = TokenId> + '_ {
        (0..self.tokens.len() as u32).map(TokenId)
    }

    /// Looks up a token or the end marker; `None` stands for eos.
    pub fn outcome_index(&self, name: &str) -> Result<usize, LmError> {
        if name == EOS {
            Ok(self.eos_index())
        } else {
            self.id(name)
                .map(TokenId::index)
                .ok_or_else(|| LmError::UnknownToken(name.to_owned()))
        }
    }

    pub fn outcome_name(&self, index: usize) -> &str {
        if index == self.eos_index() {
            EOS
        } else {
            &self.tokens[index]
        }
    }

    /// Checks that every character in `chars` is also a length-1 token.
    pub fn ensure_char_closed(&self, chars: impl IntoIterator<Item = char>) -> Result<(), LmError> {
        for c in chars {
            let mut buf = [0u8; 4];
            if !self.index.contains_key(c.encode_utf8(&mut buf) as &str) {
                return Err(LmError::MissingCharToken(c));
            }
        }
        Ok(())
    }

    /// Concatenated text of a token sequence.
    pub fn text(&self, tokens: &[TokenId]) -> String {
        tokens.iter().map(|&t| self.token(t)).collect()
    }

    pub fn parse_tokens<S: AsRef<str>>(&self, names: &[S]) -> Result<Vec<TokenId>, LmError> {
        names
            .iter()
            .map(|n| self.id(n.as_ref()).ok_or_else(|| LmError::UnknownToken(n.as_ref().to_owned())))
            .collect()
    }

    /// Every way of writing `s` as a sequence of at most `max_tokens` tokens.
    pub fn tokenizations(&self, s: &str, max_tokens: usize) -> Vec<Vec<TokenId>> {
        let chars: Vec<char> = s.chars().collect();
        let mut out = Vec::new();
        let mut stack: Vec<TokenId> = Vec::new();
        self.tokenize_rec(&chars, 0, max_tokens, &mut stack, &mut out);
        out
    }

    fn tokenize_rec(
        &self,
        chars: &[char],
        at: usize,
        budget: usize,
        stack: &mut Vec<TokenId>,
        out: &mut Vec<Vec<TokenId>>,
    ) {
        if at == chars.len() {
            out.push(stack.clone());
            return;
        }
        if budget == 0 {
            return;
        }
        let mut node = 0usize;
        for (offset, c) in chars[at..].iter().enumerate() {
            match self.trie.nodes[node].children.iter().find(|(k, _)| k == c) {
                Some(&(_, child)) => node = child as usize,
                None => break,
            }
            if let Some(id) = self.trie.nodes[node].token {
                stack.push(id);
                self.tokenize_rec(chars, at + offset + 1, budget - 1, stack, out);
                stack.pop();
            }
        }
    }

    pub(crate) fn trie(&self) -> &TokenTrie {
        &self.trie
    }
}

/// A token sequence `w`; `terminated` records that eos was emitted.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Sequence {
    tokens: Vec<TokenId>,
    terminated: bool,
}

impl Sequence {
    /// An open (unterminated) prefix.
    pub fn prefix(tokens: Vec<TokenId>) -> Self {
        Sequence {
            tokens,
            terminated: false,
        }
    }

    /// A finished sentence.
    pub fn terminated(tokens: Vec<TokenId>) -> Self {
        Sequence {
            tokens,
            terminated: true,
        }
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_terminated(&self) -> bool {
        self.terminated
    }

    /// The open prefix `w_{1:i}`.
    pub fn truncated(&self, i: usize) -> Sequence {
        Sequence::prefix(self.tokens[..i].to_vec())
    }

    pub fn text(&self, vocab: &Vocabulary) -> String {
        vocab.text(&self.tokens)
    }

    /// Length of the longest common token prefix.
    pub fn common_prefix_len(&self, other: &Sequence) -> usize {
        self.tokens
            .iter()
            .zip(&other.tokens)
            .take_while(|(a, b)| a == b)
            .count()
    }

    pub fn display<'a>(&'a self, vocab: &'a Vocabulary) -> impl fmt::Display + 'a {
        DisplaySeq { seq: self, vocab }
    }
}

struct DisplaySeq<'a> {
    seq: &'a Sequence,
    vocab: &'a Vocabulary,
}

impl fmt::Display for DisplaySeq<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&crate::grammar::escape(&self.seq.text(self.vocab)))?;
        if self.seq.terminated {
            f.write_str("$")?;
        }
        Ok(())
    }
}

/// Probability vector over `tokens + eos`.
#[derive(Debug, Clone, PartialEq)]
pub struct NextTokenDist {
    probs: Vec<f64>,
}

impl NextTokenDist {
    /// Validates an already normalized vector.
    pub fn new(probs: Vec<f64>) -> Result<Self, LmError> {
        check_entries(&probs)?;
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > NORMALIZATION_TOLERANCE {
            return Err(LmError::InvalidDistribution(format!("mass sums to {total}")));
        }
        Ok(NextTokenDist { probs })
    }

    /// Normalizes non-negative weights. Fails on zero total mass.
    pub fn from_weights(mut weights: Vec<f64>) -> Result<Self, LmError> {
        check_entries(&weights)?;
        let total: f64 = weights.iter().sum();
        if total <= 0.0 || !total.is_finite() {
            return Err(LmError::InvalidDistribution(format!("total weight {total}")));
        }
        for w in &mut weights {
            *w /= total;
        }
        Ok(NextTokenDist { probs: weights })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn token(&self, id: TokenId) -> f64 {
        self.probs[id.index()]
    }

    pub fn eos(&self) -> f64 {
        *self.probs.last().expect("distribution has an eos slot")
    }

    pub fn get(&self, index: usize) -> f64 {
        self.probs[index]
    }
}

fn check_entries(probs: &[f64]) -> Result<(), LmError> {
    if probs.is_empty() {
        return Err(LmError::InvalidDistribution("no outcomes".into()));
    }
    if let Some(bad) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
        return Err(LmError::InvalidDistribution(format!("entry {bad} is not a probability")));
    }
    Ok(())
}

/// An autoregressive model `P(w_i | w_{1:i-1})`.
///
/// `next_dist` must be a pure function of the prefix and must be defined
/// for every prefix, including ones outside any grammar.
pub trait LanguageModel: Send + Sync {
    fn vocabulary(&self) -> &Vocabulary;

    fn next_dist(&self, prefix: &[TokenId]) -> Result<NextTokenDist, LmError>;
}

impl<M: LanguageModel + ?Sized> LanguageModel for Box<M> {
    fn vocabulary(&self) -> &Vocabulary {
        (**self).vocabulary()
    }

    fn next_dist(&self, prefix: &[TokenId]) -> Result<NextTokenDist, LmError> {
        (**self).next_dist(prefix)
    }
}

impl<M: LanguageModel + ?Sized> LanguageModel for std::sync::Arc<M> {
    fn vocabulary(&self) -> &Vocabulary {
        (**self).vocabulary()
    }

    fn next_dist(&self, prefix: &[TokenId]) -> Result<NextTokenDist, LmError> {
        (**self).next_dist(prefix)
    }
}

/// Uniform over every token and eos.
#[derive(Debug, Clone)]
pub struct UniformLm {
    vocab: Vocabulary,
}

impl UniformLm {
    pub fn new(vocab: Vocabulary) -> Self {
        UniformLm { vocab }
    }
}

impl LanguageModel for UniformLm {
    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn next_dist(&self, _prefix: &[TokenId]) -> Result<NextTokenDist, LmError> {
        let n = self.vocab.outcomes();
        Ok(NextTokenDist {
            probs: vec![1.0 / n as f64; n],
        })
    }
}

/// `log P(w) = Σ_i log P(w_i | w_{1:i-1}) + log P(eos | w)`; may be `-inf`.
pub fn lm_logprob<M: LanguageModel + ?Sized>(m: &M, w: &Sequence) -> Result<f64, LmError> {
    if !w.is_terminated() {
        return Err(LmError::Unterminated);
    }
    let tokens = w.tokens();
    let mut total = 0.0;
    for i in 0..tokens.len() {
        total += m.next_dist(&tokens[..i])?.token(tokens[i]).ln();
    }
    Ok(total + m.next_dist(tokens)?.eos().ln())
}

/// Exponential of the natural-log entropy of a step distribution.
pub fn step_perplexity(d: &NextTokenDist) -> f64 {
    let entropy: f64 = d
        .probs()
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum();
    entropy.exp()
}
