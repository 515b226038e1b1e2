use std::collections::{BTreeSet, HashMap};

use super::{LanguageModel, LmError, NextTokenDist, TokenId, Vocabulary};

const BOS: u32 = u32::MAX;

/// Add-α smoothed n-gram model over token contexts of length `order - 1`.
///
/// Contexts at the start of a sequence are padded with a begin marker, and
/// eos is counted once per training sequence. With `α > 0` every
/// conditional probability is strictly positive.
#[derive(Debug, Clone)]
pub struct NgramLm {
    vocab: Vocabulary,
    order: usize,
    alpha: f64,
    counts: HashMap<Vec<u32>, Vec<f64>>,
}

impl NgramLm {
    pub fn train(
        vocab: Vocabulary,
        corpus: &[Vec<TokenId>],
        order: usize,
        alpha: f64,
    ) -> Result<Self, LmError> {
        if order == 0 {
            return Err(LmError::InvalidParameter("n-gram order must be at least 1".into()));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(LmError::InvalidParameter(format!("smoothing α must be positive, got {alpha}")));
        }
        if corpus.is_empty() {
            return Err(LmError::EmptyCorpus);
        }
        let outcomes = vocab.outcomes();
        let eos = vocab.eos_index();
        let mut counts: HashMap<Vec<u32>, Vec<f64>> = HashMap::new();
        for line in corpus {
            for (i, &t) in line.iter().enumerate() {
                if t.index() >= vocab.len() {
                    return Err(LmError::UnknownToken(format!("#{}", t.0)));
                }
                let ctx = context(&line[..i], order);
                counts.entry(ctx).or_insert_with(|| vec![0.0; outcomes])[t.index()] += 1.0;
            }
            let ctx = context(line, order);
            counts.entry(ctx).or_insert_with(|| vec![0.0; outcomes])[eos] += 1.0;
        }
        Ok(NgramLm {
            vocab,
            order,
            alpha,
            counts,
        })
    }

    /// Trains from corpus text: one sequence per line, tokens separated by
    /// spaces. Tokens use the literal escapes plus `\s` for a space. The
    /// vocabulary is the
    /// sorted union of corpus tokens and `extra_chars` as single-character
    /// tokens.
    pub fn train_from_text(
        text: &str,
        order: usize,
        alpha: f64,
        extra_chars: impl IntoIterator<Item = char>,
    ) -> Result<Self, LmError> {
        let lines = parse_corpus(text)?;
        let mut names: BTreeSet<String> = lines.iter().flatten().cloned().collect();
        names.extend(extra_chars.into_iter().map(String::from));
        let vocab = Vocabulary::new(names)?;
        let corpus = lines
            .iter()
            .map(|line| vocab.parse_tokens(line))
            .collect::<Result<Vec<_>, _>>()?;
        Self::train(vocab, &corpus, order, alpha)
    }

    /// Trains against a fixed vocabulary; corpus tokens must belong to it.
    pub fn train_text_with_vocab(
        vocab: Vocabulary,
        text: &str,
        order: usize,
        alpha: f64,
    ) -> Result<Self, LmError> {
        let corpus = parse_corpus(text)?
            .iter()
            .map(|line| vocab.parse_tokens(line))
            .collect::<Result<Vec<_>, _>>()?;
        Self::train(vocab, &corpus, order, alpha)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

/// Splits corpus text into token-name lines. Blank lines are skipped.
pub fn parse_corpus(text: &str) -> Result<Vec<Vec<String>>, LmError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            line.split(' ')
                .filter(|t| !t.is_empty())
                .map(|t| {
                    unescape_token(t)
                        .ok_or_else(|| LmError::Format(format!("bad escape in corpus token {t:?}")))
                })
                .collect()
        })
        .collect()
}

fn unescape_token(t: &str) -> Option<String> {
    let mut out = String::with_capacity(t.len());
    let mut chars = t.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        out.push(match chars.next()? {
            's' => ' ',
            'n' => '\n',
            't' => '\t',
            '"' => '"',
            '\\' => '\\',
            _ => return None,
        });
    }
    Some(out)
}

/// Inverse of the corpus token escapes.
pub fn escape_corpus_token(t: &str) -> String {
    crate::grammar::escape(t).replace(' ', "\\s")
}

fn context(prefix: &[TokenId], order: usize) -> Vec<u32> {
    let width = order - 1;
    let mut ctx = vec![BOS; width.saturating_sub(prefix.len())];
    let take = width.min(prefix.len());
    ctx.extend(prefix[prefix.len() - take..].iter().map(|t| t.0));
    ctx
}

impl LanguageModel for NgramLm {
    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn next_dist(&self, prefix: &[TokenId]) -> Result<NextTokenDist, LmError> {
        let outcomes = self.vocab.outcomes();
        let ctx = context(prefix, self.order);
        let probs = match self.counts.get(&ctx) {
            Some(row) => {
                let denom = row.iter().sum::<f64>() + self.alpha * outcomes as f64;
                row.iter().map(|c| (c + self.alpha) / denom).collect()
            }
            None => vec![1.0 / outcomes as f64; outcomes],
        };
        NextTokenDist::from_weights(probs)
    }
}
