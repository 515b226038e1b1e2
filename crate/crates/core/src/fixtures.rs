//! Bundled toy grammars, models and corpora.

use crate::grammar::Grammar;
use crate::lm::{LanguageModel, NgramLm, TableLm};

pub const G1: &str = include_str!("../fixtures/g1.ebnf");
pub const G_STAR: &str = include_str!("../fixtures/gstar.ebnf");
pub const G_EXPR: &str = include_str!("../fixtures/gexpr.ebnf");
pub const XML: &str = include_str!("../fixtures/xml.ebnf");

pub const G1_FLAT: &str = include_str!("../fixtures/g1_flat.json");
pub const G_STAR_FLAT: &str = include_str!("../fixtures/gstar_flat.json");
pub const G_EXPR_FLAT: &str = include_str!("../fixtures/gexpr_flat.json");

pub const G1_CORPUS: &str = include_str!("../fixtures/g1_corpus.txt");
pub const G_STAR_CORPUS: &str = include_str!("../fixtures/gstar_corpus.txt");
pub const G_EXPR_CORPUS: &str = include_str!("../fixtures/gexpr_corpus.txt");
pub const XML_CORPUS: &str = include_str!("../fixtures/xml_corpus.txt");

pub const BIGRAM_ALPHA: f64 = 1.0;
pub const XML_MAX_TOKENS: usize = 64;

struct Spec {
    grammar: &'static str,
    source: &'static str,
    flat: &'static str,
    corpus: &'static str,
    max_tokens: usize,
}

const SPECS: [Spec; 3] = [
    Spec { grammar: "g1", source: G1, flat: G1_FLAT, corpus: G1_CORPUS, max_tokens: 8 },
    Spec { grammar: "gstar", source: G_STAR, flat: G_STAR_FLAT, corpus: G_STAR_CORPUS, max_tokens: 6 },
    Spec { grammar: "gexpr", source: G_EXPR, flat: G_EXPR_FLAT, corpus: G_EXPR_CORPUS, max_tokens: 6 },
];

/// A grammar, a model over a char-closed vocabulary, and a token cap.
pub struct Fixture {
    pub name: String,
    pub grammar: Grammar,
    pub lm: Box<dyn LanguageModel>,
    pub max_tokens: usize,
}

/// The flat table model for a grammar of the matrix.
pub fn flat_lm(grammar: &str) -> Option<TableLm> {
    let spec = SPECS.iter().find(|s| s.grammar == grammar)?;
    Some(TableLm::from_json(spec.flat).expect("bundled table is valid"))
}

/// A bigram model trained on the grammar's corpus over the flat model's
/// vocabulary.
pub fn bigram_lm(grammar: &str) -> Option<NgramLm> {
    let spec = SPECS.iter().find(|s| s.grammar == grammar)?;
    let vocab = flat_lm(grammar)?.vocabulary().clone();
    Some(NgramLm::train_text_with_vocab(vocab, spec.corpus, 2, BIGRAM_ALPHA).expect("bundled corpus is valid"))
}

/// `{g1, gstar, gexpr} × {flat, bigram}`, named like `g1/flat`.
pub fn matrix() -> Vec<Fixture> {
    let mut out = Vec::new();
    for spec in &SPECS {
        let grammar = Grammar::parse(spec.source).expect("bundled grammar is valid");
        let lms: [(&str, Box<dyn LanguageModel>); 2] = [
            ("flat", Box::new(flat_lm(spec.grammar).unwrap())),
            ("bigram", Box::new(bigram_lm(spec.grammar).unwrap())),
        ];
        for (lm_name, lm) in lms {
            out.push(Fixture {
                name: format!("{}/{}", spec.grammar, lm_name),
                grammar: grammar.clone(),
                lm,
                max_tokens: spec.max_tokens,
            });
        }
    }
    out
}

pub fn fixture(name: &str) -> Option<Fixture> {
    matrix().into_iter().find(|f| f.name == name)
}

pub fn xml_grammar() -> Grammar {
    Grammar::parse(XML).expect("bundled grammar is valid")
}

/// Bigram model over the XML corpus tokens plus every grammar terminal.
pub fn xml_lm() -> NgramLm {
    let g = xml_grammar();
    NgramLm::train_from_text(XML_CORPUS, 2, 0.1, g.terminals().iter().copied()).expect("bundled corpus is valid")
}
