//! Grammar-constrained decoding.
//!
//! At every step the tokens whose characters would leave the grammar's
//! prefix language are masked out and the model distribution is
//! renormalized over the rest; eos is allowed only on complete prefixes.
//! Because every terminal character is also a one-character token, a viable
//! prefix always has at least one valid continuation, so decoding never
//! backtracks and the probability of a sample is a plain product of
//! renormalized step factors.

use rand::Rng;
use thiserror::Error;

use crate::grammar::{Grammar, GrammarError, RecognizerState};
use crate::lm::{step_perplexity, LanguageModel, LmError, NextTokenDist, Sequence, TokenId, Vocabulary};

/// Default cap on content tokens per decoded sequence.
pub const DEFAULT_MAX_TOKENS: usize = 512;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GcdError {
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Grammar(#[from] GrammarError),
    #[error("prefix is not a prefix of any sentence")]
    PrefixNotViable,
    #[error("no token is valid at position {position}; the vocabulary is not char-closed")]
    MaskEmpty { position: usize },
    #[error("every valid token has zero model probability at position {position}")]
    ZeroMass { position: usize },
    #[error("decoding exceeded {max_tokens} tokens")]
    LengthExceeded { max_tokens: usize },
    #[error("sequence is not in the language")]
    NotInLanguage,
    #[error("no sample accepted after {attempts} attempts")]
    Exhausted { attempts: usize },
}

/// Checks that the model's vocabulary can spell every terminal of `g` with
/// one-character tokens, and that the language is non-empty.
pub fn validate_setup<M: LanguageModel + ?Sized>(m: &M, g: &Grammar) -> Result<(), GcdError> {
    g.recognizer()?;
    m.vocabulary().ensure_char_closed(g.terminals().iter().copied())?;
    Ok(())
}

/// The valid continuations of a recognizer state.
#[derive(Debug, Clone)]
pub(crate) struct Expansion<'g> {
    /// Valid tokens in id order, each with the state after consuming it.
    pub successors: Vec<(TokenId, RecognizerState<'g>)>,
    pub eos: bool,
}

pub(crate) fn expand<'g>(state: &RecognizerState<'g>, vocab: &Vocabulary) -> Expansion<'g> {
    let trie = vocab.trie();
    let mut successors = Vec::new();
    let mut stack: Vec<(u32, RecognizerState<'g>)> = vec![(0, state.clone())];
    while let Some((node, at)) = stack.pop() {
        for &(c, child) in &trie.nodes[node as usize].children {
            if let Ok(next) = at.advance(c) {
                if let Some(id) = trie.nodes[child as usize].token {
                    successors.push((id, next.clone()));
                }
                if !trie.nodes[child as usize].children.is_empty() {
                    stack.push((child, next));
                }
            }
        }
    }
    successors.sort_by_key(|(id, _)| *id);
    Expansion {
        successors,
        eos: state.is_complete(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedStep {
    /// Over `tokens + eos`.
    pub mask: Vec<bool>,
    pub dist: NextTokenDist,
}

/// Per-position scores of a decoding step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepScore {
    /// `log P(chosen | prefix)` under the raw model.
    pub lm_logprob: f64,
    /// `log P̃_GCD(chosen | prefix)` after masking.
    pub gcd_logprob: f64,
    /// Perplexity of the raw model distribution at this prefix.
    pub perplexity: f64,
}

struct StepInfo<'g> {
    raw: NextTokenDist,
    expansion: Expansion<'g>,
    log_mass: f64,
}

fn step_info<'g, M: LanguageModel + ?Sized>(
    m: &M,
    state: &RecognizerState<'g>,
    prefix: &[TokenId],
) -> Result<StepInfo<'g>, GcdError> {
    let raw = m.next_dist(prefix)?;
    let expansion = expand(state, m.vocabulary());
    if expansion.successors.is_empty() && !expansion.eos {
        return Err(GcdError::MaskEmpty {
            position: prefix.len(),
        });
    }
    let mut mass: f64 = expansion.successors.iter().map(|(t, _)| raw.token(*t)).sum();
    if expansion.eos {
        mass += raw.eos();
    }
    if mass <= 0.0 {
        return Err(GcdError::ZeroMass {
            position: prefix.len(),
        });
    }
    Ok(StepInfo {
        raw,
        expansion,
        log_mass: mass.ln(),
    })
}

impl StepInfo<'_> {
    fn score(&self, p: f64) -> StepScore {
        StepScore {
            lm_logprob: p.ln(),
            gcd_logprob: p.ln() - self.log_mass,
            perplexity: step_perplexity(&self.raw),
        }
    }
}

/// One masked decoding step from `state`, whose consumed text must be the
/// text of `prefix`.
pub fn masked_step<M: LanguageModel + ?Sized>(
    m: &M,
    state: &RecognizerState<'_>,
    prefix: &Sequence,
) -> Result<MaskedStep, GcdError> {
    let info = step_info(m, state, prefix.tokens())?;
    let vocab = m.vocabulary();
    let mut mask = vec![false; vocab.outcomes()];
    let mut weights = vec![0.0; vocab.outcomes()];
    for (t, _) in &info.expansion.successors {
        mask[t.index()] = true;
        weights[t.index()] = info.raw.token(*t);
    }
    if info.expansion.eos {
        mask[vocab.eos_index()] = true;
        weights[vocab.eos_index()] = info.raw.eos();
    }
    Ok(MaskedStep {
        mask,
        dist: NextTokenDist::from_weights(weights)?,
    })
}

/// A completed constrained sample.
#[derive(Debug, Clone, PartialEq)]
pub struct GcdSample {
    pub sequence: Sequence,
    /// Σ log P̃_GCD over the decoded suffix (including eos).
    pub gcd_logprob: f64,
    /// Σ log P over the decoded suffix (including eos).
    pub lm_logprob: f64,
    /// Scores for positions `|prefix| ..= |sequence|`.
    pub steps: Vec<StepScore>,
    /// Tokens masked out, summed over decoded steps.
    pub masked_out: u64,
}

pub(crate) struct Decoded<'g> {
    pub tokens: Vec<TokenId>,
    pub steps: Vec<StepScore>,
    /// Recognizer state after each decoded token.
    pub states: Vec<RecognizerState<'g>>,
    pub masked_out: u64,
}

/// Decodes from `state` (whose text is that of `tokens`) until eos.
pub(crate) fn decode_from<'g, M, R>(
    m: &M,
    mut state: RecognizerState<'g>,
    mut tokens: Vec<TokenId>,
    rng: &mut R,
    max_tokens: usize,
) -> Result<Decoded<'g>, GcdError>
where
    M: LanguageModel + ?Sized,
    R: Rng + ?Sized,
{
    let vocab_len = m.vocabulary().len() as u64;
    let mut steps = Vec::new();
    let mut states = Vec::new();
    let mut masked_out = 0u64;
    loop {
        let info = step_info(m, &state, &tokens)?;
        masked_out += vocab_len + 1 - info.expansion.successors.len() as u64 - info.expansion.eos as u64;
        let u = rng.random::<f64>() * info.log_mass.exp();
        let mut acc = 0.0;
        let mut choice = None;
        for (i, (t, _)) in info.expansion.successors.iter().enumerate() {
            let p = info.raw.token(*t);
            acc += p;
            if p > 0.0 {
                choice = Some(i);
                if u < acc {
                    break;
                }
            }
        }
        let pick_eos = info.expansion.eos && info.raw.eos() > 0.0 && (u >= acc || choice.is_none());
        if pick_eos {
            steps.push(info.score(info.raw.eos()));
            return Ok(Decoded {
                tokens,
                steps,
                states,
                masked_out,
            });
        }
        // `choice` is the last positive-mass token when rounding overshoots.
        let i = choice.expect("positive mass implies a choice");
        if tokens.len() >= max_tokens {
            return Err(GcdError::LengthExceeded { max_tokens });
        }
        let (t, next) = &info.expansion.successors[i];
        steps.push(info.score(info.raw.token(*t)));
        tokens.push(*t);
        state = next.clone();
        states.push(state.clone());
    }
}

pub(crate) fn state_for<'g>(
    g: &'g Grammar,
    vocab: &Vocabulary,
    tokens: &[TokenId],
) -> Result<RecognizerState<'g>, GcdError> {
    g.recognizer()?
        .advance_str(&vocab.text(tokens))
        .map_err(|_| GcdError::PrefixNotViable)
}

/// Samples a sentence of `g` that extends `prefix`, decoding with
/// grammar-constrained masking.
pub fn gcd_sample<M, R>(
    m: &M,
    g: &Grammar,
    prefix: &Sequence,
    rng: &mut R,
    max_tokens: usize,
) -> Result<GcdSample, GcdError>
where
    M: LanguageModel + ?Sized,
    R: Rng + ?Sized,
{
    if prefix.len() > max_tokens {
        return Err(GcdError::LengthExceeded { max_tokens });
    }
    let state = state_for(g, m.vocabulary(), prefix.tokens())?;
    let decoded = decode_from(m, state, prefix.tokens().to_vec(), rng, max_tokens)?;
    Ok(GcdSample {
        sequence: Sequence::terminated(decoded.tokens),
        gcd_logprob: decoded.steps.iter().map(|s| s.gcd_logprob).sum(),
        lm_logprob: decoded.steps.iter().map(|s| s.lm_logprob).sum(),
        steps: decoded.steps,
        masked_out: decoded.masked_out,
    })
}

/// A sentence with its step scores at every position `0 ..= |w|`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSequence {
    pub sequence: Sequence,
    pub steps: Vec<StepScore>,
}

impl ScoredSequence {
    pub fn lm_logprob(&self) -> f64 {
        self.steps.iter().map(|s| s.lm_logprob).sum()
    }

    /// `log P̃_GCD(w_{from+1..} eos | w_{1:from})`.
    pub fn gcd_logprob_from(&self, from: usize) -> f64 {
        self.steps[from..].iter().map(|s| s.gcd_logprob).sum()
    }

    pub fn perplexities(&self) -> impl Iterator<Item = f64> + '_ {
        self.steps.iter().map(|s| s.perplexity)
    }
}

pub(crate) struct ScoredWithStates<'g> {
    pub scored: ScoredSequence,
    pub states: Vec<RecognizerState<'g>>,
}

pub(crate) fn score_with_states<'g, M: LanguageModel + ?Sized>(
    m: &M,
    g: &'g Grammar,
    w: &Sequence,
) -> Result<ScoredWithStates<'g>, GcdError> {
    if !w.is_terminated() {
        return Err(GcdError::Lm(LmError::Unterminated));
    }
    let tokens = w.tokens();
    let mut state = g.recognizer()?;
    let mut states = vec![state.clone()];
    let mut steps = Vec::with_capacity(tokens.len() + 1);
    for (j, &t) in tokens.iter().enumerate() {
        let info = step_info(m, &state, &tokens[..j]).map_err(not_in_language)?;
        let next = match info.expansion.successors.iter().find(|(id, _)| *id == t) {
            Some((_, next)) => next.clone(),
            None => return Err(GcdError::NotInLanguage),
        };
        let p = info.raw.token(t);
        if p <= 0.0 {
            return Err(GcdError::NotInLanguage);
        }
        steps.push(info.score(p));
        state = next;
        states.push(state.clone());
    }
    let info = step_info(m, &state, tokens).map_err(not_in_language)?;
    if !info.expansion.eos || info.raw.eos() <= 0.0 {
        return Err(GcdError::NotInLanguage);
    }
    steps.push(info.score(info.raw.eos()));
    Ok(ScoredWithStates {
        scored: ScoredSequence {
            sequence: w.clone(),
            steps,
        },
        states,
    })
}

fn not_in_language(e: GcdError) -> GcdError {
    match e {
        GcdError::MaskEmpty { .. } | GcdError::ZeroMass { .. } => GcdError::NotInLanguage,
        other => other,
    }
}

/// Scores every step of a sentence in one left-to-right pass.
///
/// Sentences of zero model probability are reported as `NotInLanguage`:
/// constrained decoding can never produce them.
pub fn score_sequence<M: LanguageModel + ?Sized>(
    m: &M,
    g: &Grammar,
    w: &Sequence,
) -> Result<ScoredSequence, GcdError> {
    score_with_states(m, g, w).map(|s| s.scored)
}

/// `Σ_{j > from} log P̃_GCD(w_j | w_{1:j-1}) + log P̃_GCD(eos | w)`.
pub fn gcd_continuation_logprob<M: LanguageModel + ?Sized>(
    m: &M,
    g: &Grammar,
    w: &Sequence,
    from: usize,
) -> Result<f64, GcdError> {
    if from > w.len() {
        return Err(GcdError::NotInLanguage);
    }
    Ok(score_sequence(m, g, w)?.gcd_logprob_from(from))
}

/// One unconstrained draw from the model; `Some` iff it lands in `L(g)`.
///
/// The draw stops early once its text leaves the prefix language, which
/// cannot change whether it is accepted.
pub fn rejection_attempt<M, R>(
    m: &M,
    g: &Grammar,
    rng: &mut R,
    max_tokens: usize,
) -> Result<Option<Sequence>, GcdError>
where
    M: LanguageModel + ?Sized,
    R: Rng + ?Sized,
{
    let vocab = m.vocabulary();
    let mut state = g.recognizer()?;
    let mut tokens = Vec::new();
    loop {
        let d = m.next_dist(&tokens)?;
        let u = rng.random::<f64>();
        let mut acc = 0.0;
        let mut pick = vocab.eos_index();
        for (i, &p) in d.probs().iter().enumerate() {
            acc += p;
            if p > 0.0 {
                pick = i;
                if u < acc {
                    break;
                }
            }
        }
        if pick == vocab.eos_index() {
            return Ok(state.is_complete().then(|| Sequence::terminated(tokens)));
        }
        if tokens.len() >= max_tokens {
            return Ok(None);
        }
        let t = TokenId(pick as u32);
        state = match state.advance_str(vocab.token(t)) {
            Ok(s) => s,
            Err(_) => return Ok(None),
        };
        tokens.push(t);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RejectionSample {
    pub sequence: Sequence,
    pub attempts: usize,
}

/// Draws from the model until a sentence of `g` appears.
pub fn rejection_sample<M, R>(
    m: &M,
    g: &Grammar,
    rng: &mut R,
    max_attempts: usize,
    max_tokens: usize,
) -> Result<RejectionSample, GcdError>
where
    M: LanguageModel + ?Sized,
    R: Rng + ?Sized,
{
    for attempt in 1..=max_attempts {
        if let Some(sequence) = rejection_attempt(m, g, rng, max_tokens)? {
            return Ok(RejectionSample {
                sequence,
                attempts: attempt,
            });
        }
    }
    Err(GcdError::Exhausted {
        attempts: max_attempts,
    })
}
