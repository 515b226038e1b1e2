use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{LanguageModel, LmError, NextTokenDist, TokenId, Vocabulary};

/// Table-driven model.
///
/// Lookup uses the row whose context is the longest suffix of the prefix
/// (an exact-context row is the longest possible suffix); prefixes with no
/// matching row fall back to the mandatory default row. Tokens missing from
/// a row get probability zero.
#[derive(Debug, Clone)]
pub struct TableLm {
    vocab: Vocabulary,
    rows: Vec<(Vec<TokenId>, NextTokenDist)>,
    default: NextTokenDist,
}

#[derive(Debug, Serialize, Deserialize)]
struct TableFile {
    tokens: Vec<String>,
    #[serde(default)]
    rows: Vec<RowFile>,
    default: BTreeMap<String, f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RowFile {
    context: Vec<String>,
    probs: BTreeMap<String, f64>,
}

/// Mass drift tolerated in table files before renormalization.
const FILE_TOLERANCE: f64 = 1e-6;

fn row_dist<'a>(
    vocab: &Vocabulary,
    entries: impl IntoIterator<Item = (&'a str, f64)>,
) -> Result<NextTokenDist, LmError> {
    let mut probs = vec![0.0; vocab.outcomes()];
    for (name, p) in entries {
        probs[vocab.outcome_index(name)?] += p;
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > FILE_TOLERANCE {
        return Err(LmError::InvalidDistribution(format!("row mass sums to {total}")));
    }
    NextTokenDist::from_weights(probs)
}

impl TableLm {
    /// A context-independent model with only a default row.
    pub fn new(vocab: Vocabulary, default: &[(&str, f64)]) -> Result<Self, LmError> {
        let default = row_dist(&vocab, default.iter().copied())?;
        Ok(TableLm {
            vocab,
            rows: Vec::new(),
            default,
        })
    }

    /// Adds (or replaces) the row for `context`.
    pub fn with_row(mut self, context: &[&str], probs: &[(&str, f64)]) -> Result<Self, LmError> {
        let context = self.vocab.parse_tokens(context)?;
        let dist = row_dist(&self.vocab, probs.iter().copied())?;
        self.insert_row(context, dist);
        Ok(self)
    }

    fn insert_row(&mut self, context: Vec<TokenId>, dist: NextTokenDist) {
        self.rows.retain(|(c, _)| *c != context);
        self.rows.push((context, dist));
        // Longest contexts first; ties keep insertion order.
        self.rows.sort_by_key(|(c, _)| std::cmp::Reverse(c.len()));
    }

    pub fn from_json(text: &str) -> Result<Self, LmError> {
        let file: TableFile = serde_json::from_str(text).map_err(|e| LmError::Format(e.to_string()))?;
        let vocab = Vocabulary::new(file.tokens)?;
        let default = row_dist(&vocab, file.default.iter().map(|(k, v)| (k.as_str(), *v)))?;
        let mut lm = TableLm {
            vocab,
            rows: Vec::new(),
            default,
        };
        for row in file.rows {
            let context = lm.vocab.parse_tokens(&row.context)?;
            let dist = row_dist(&lm.vocab, row.probs.iter().map(|(k, v)| (k.as_str(), *v)))?;
            lm.insert_row(context, dist);
        }
        Ok(lm)
    }

    pub fn to_json(&self) -> String {
        let probs = |d: &NextTokenDist| -> BTreeMap<String, f64> {
            d.probs()
                .iter()
                .enumerate()
                .filter(|(_, p)| **p > 0.0)
                .map(|(i, p)| (self.vocab.outcome_name(i).to_owned(), *p))
                .collect()
        };
        let file = TableFile {
            tokens: self.vocab.tokens().to_vec(),
            rows: self
                .rows
                .iter()
                .map(|(c, d)| RowFile {
                    context: c.iter().map(|&t| self.vocab.token(t).to_owned()).collect(),
                    probs: probs(d),
                })
                .collect(),
            default: probs(&self.default),
        };
        serde_json::to_string_pretty(&file).expect("table serializes")
    }
}

impl LanguageModel for TableLm {
    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn next_dist(&self, prefix: &[TokenId]) -> Result<NextTokenDist, LmError> {
        let row = self
            .rows
            .iter()
            .find(|(context, _)| prefix.ends_with(context))
            .map_or(&self.default, |(_, d)| d);
        Ok(row.clone())
    }
}
