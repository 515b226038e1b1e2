//! Metropolis–Hastings over sentences of a grammar.
//!
//! A state is a sentence `w ∈ L(G)`. A proposal keeps a prefix `w_{1:i}`
//! with `i` drawn from a truncation distribution over `0..=|w|` and
//! completes it by grammar-constrained decoding. The proposal density
//! marginalizes over every truncation point consistent with the candidate:
//!
//! ```text
//! q(y | x) = Σ_{i ≤ lcp(x, y)} p_pos^x(i) · P̃_GCD(y_{i+1..} eos | y_{1:i})
//! ```
//!
//! and a candidate is accepted with probability
//! `min{1, P(y) q(x|y) / (P(x) q(y|x))}`, where `P` is the raw model
//! probability. The target's normalizer cancels, so it is never computed.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::gcd::{decode_from, score_with_states, GcdError, ScoredSequence, StepScore};
use crate::grammar::{Grammar, RecognizerState};
use crate::lm::{lm_logprob, step_perplexity, LanguageModel, LmError, Sequence, TokenId, Vocabulary};
use crate::numeric::log_sum_exp;

/// How a proposal picks its truncation point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProposalKind {
    /// Uniform over `0..=|w|`.
    Uniform,
    /// Proportional to the model's perplexity at each prefix.
    Priority,
    /// Always position 0: an independence sampler over GCD samples.
    Restart,
}

impl ProposalKind {
    pub const ALL: [ProposalKind; 3] = [ProposalKind::Uniform, ProposalKind::Priority, ProposalKind::Restart];

    pub fn name(self) -> &'static str {
        match self {
            ProposalKind::Uniform => "uniform",
            ProposalKind::Priority => "priority",
            ProposalKind::Restart => "restart",
        }
    }
}

impl fmt::Display for ProposalKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProposalKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uniform" | "prefix" => Ok(ProposalKind::Uniform),
            "priority" => Ok(ProposalKind::Priority),
            "restart" => Ok(ProposalKind::Restart),
            other => Err(format!("unknown proposal kind {other:?}")),
        }
    }
}

/// Distribution over truncation positions `0..=|w|`.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncationDist {
    probs: Vec<f64>,
}

impl TruncationDist {
    /// Builds the distribution from the per-prefix perplexities of `w`
    /// (one per position, `|w| + 1` in total).
    pub fn from_perplexities(kind: ProposalKind, perplexities: &[f64]) -> Self {
        let n = perplexities.len();
        let probs = match kind {
            ProposalKind::Uniform => vec![1.0 / n as f64; n],
            ProposalKind::Restart => {
                let mut p = vec![0.0; n];
                p[0] = 1.0;
                p
            }
            ProposalKind::Priority => {
                let total: f64 = perplexities.iter().sum();
                perplexities.iter().map(|pp| pp / total).collect()
            }
        };
        TruncationDist { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u = rng.random::<f64>();
        let mut acc = 0.0;
        let mut last = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            acc += p;
            if p > 0.0 {
                last = i;
                if u < acc {
                    return i;
                }
            }
        }
        last
    }
}

/// `p_pos^w` for a sentence `w`. Priority queries the raw model at every
/// prefix `w_{1:i}`, `i = 0..=|w|`.
pub fn truncation_dist<M: LanguageModel + ?Sized>(
    kind: ProposalKind,
    w: &Sequence,
    m: &M,
) -> Result<TruncationDist, LmError> {
    let perplexities = match kind {
        ProposalKind::Priority => (0..=w.len())
            .map(|i| m.next_dist(&w.tokens()[..i]).map(|d| step_perplexity(&d)))
            .collect::<Result<Vec<_>, _>>()?,
        _ => vec![1.0; w.len() + 1],
    };
    Ok(TruncationDist::from_perplexities(kind, &perplexities))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub sequence: Sequence,
    /// The truncation point that was drawn.
    pub position: usize,
}

/// Draws a candidate from `q(· | w)`.
pub fn propose<M, R>(
    w: &Sequence,
    kind: ProposalKind,
    m: &M,
    g: &Grammar,
    rng: &mut R,
    max_tokens: usize,
) -> Result<Proposal, GcdError>
where
    M: LanguageModel + ?Sized,
    R: Rng + ?Sized,
{
    let x = score_with_states(m, g, w)?;
    let trunc = TruncationDist::from_perplexities(kind, &x.scored.perplexities().collect::<Vec<_>>());
    let position = trunc.sample(rng);
    let decoded = decode_from(
        m,
        x.states[position].clone(),
        w.tokens()[..position].to_vec(),
        rng,
        max_tokens,
    )?;
    Ok(Proposal {
        sequence: Sequence::terminated(decoded.tokens),
        position,
    })
}

/// Everything about a state that proposal densities need.
#[derive(Debug, Clone)]
pub(crate) struct StateScores {
    pub sequence: Sequence,
    pub lm_logprob: f64,
    /// `gcd_suffix[i] = log P̃_GCD(w_{i+1..} eos | w_{1:i})`, for `i = 0..=|w|`.
    pub gcd_suffix: Vec<f64>,
    pub log_trunc: Vec<f64>,
}

impl StateScores {
    pub fn new(kind: ProposalKind, sequence: Sequence, steps: &[StepScore]) -> Self {
        debug_assert_eq!(steps.len(), sequence.len() + 1);
        let mut gcd_suffix = vec![0.0; steps.len()];
        let mut acc = 0.0;
        for i in (0..steps.len()).rev() {
            acc += steps[i].gcd_logprob;
            gcd_suffix[i] = acc;
        }
        let perplexities: Vec<f64> = steps.iter().map(|s| s.perplexity).collect();
        let log_trunc = TruncationDist::from_perplexities(kind, &perplexities)
            .probs()
            .iter()
            .map(|p| p.ln())
            .collect();
        StateScores {
            sequence,
            lm_logprob: steps.iter().map(|s| s.lm_logprob).sum(),
            gcd_suffix,
            log_trunc,
        }
    }

    pub fn from_scored(kind: ProposalKind, scored: &ScoredSequence) -> Self {
        Self::new(kind, scored.sequence.clone(), &scored.steps)
    }
}

/// `log q(y | x)` from cached scores.
pub(crate) fn log_q(x: &StateScores, y: &StateScores) -> f64 {
    let lcp = x.sequence.common_prefix_len(&y.sequence);
    log_sum_exp((0..=lcp).map(|i| x.log_trunc[i] + y.gcd_suffix[i]))
}

/// `log q(y | x)`, computed from scratch.
pub fn proposal_logprob<M: LanguageModel + ?Sized>(
    x: &Sequence,
    y: &Sequence,
    kind: ProposalKind,
    m: &M,
    g: &Grammar,
) -> Result<f64, GcdError> {
    let sx = score_with_states(m, g, x)?.scored;
    let sy = score_with_states(m, g, y)?.scored;
    Ok(log_q(&StateScores::from_scored(kind, &sx), &StateScores::from_scored(kind, &sy)))
}

/// `log α = min{0, log P(y) + log q(x|y) − log P(x) − log q(y|x)}`.
pub fn log_accept_prob(lm_x: f64, lm_y: f64, log_qf: f64, log_qr: f64) -> f64 {
    if lm_x == f64::NEG_INFINITY && lm_y == f64::NEG_INFINITY {
        return 0.0;
    }
    let ratio = lm_y + log_qr - lm_x - log_qf;
    if ratio.is_nan() {
        0.0
    } else {
        ratio.min(0.0)
    }
}

/// Acceptance probability α(x, y) using raw model log-probabilities.
pub fn accept_prob<M: LanguageModel + ?Sized>(
    x: &Sequence,
    y: &Sequence,
    log_qf: f64,
    log_qr: f64,
    m: &M,
) -> Result<f64, LmError> {
    let lm_x = lm_logprob(m, x)?;
    let lm_y = lm_logprob(m, y)?;
    debug_assert!(
        lm_x > f64::NEG_INFINITY || lm_y > f64::NEG_INFINITY,
        "both states have zero model probability"
    );
    Ok(log_accept_prob(lm_x, lm_y, log_qf, log_qr).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainParams {
    pub kind: ProposalKind,
    /// Number of MH steps `k`.
    pub steps: usize,
    pub max_tokens: usize,
    pub seed: u64,
}

/// Deterministic per-chain randomness: one ChaCha stream per purpose, all
/// keyed by the chain seed.
pub struct ChainRng {
    pub truncation: ChaCha8Rng,
    pub decode: ChaCha8Rng,
    pub accept: ChaCha8Rng,
}

impl ChainRng {
    pub fn new(seed: u64) -> Self {
        let stream = |id: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(id);
            rng
        };
        ChainRng {
            truncation: stream(0),
            decode: stream(1),
            accept: stream(2),
        }
    }
}

/// One MH transition.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainStep {
    /// `None` when the proposal hit the token cap and was auto-rejected.
    pub proposal: Option<Sequence>,
    pub position: usize,
    pub log_qf: f64,
    pub log_qr: f64,
    pub alpha: f64,
    pub accepted: bool,
}

impl ChainStep {
    pub fn length_exceeded(&self) -> bool {
        self.proposal.is_none()
    }
}

/// States `w_0..w_k` and the transitions between them.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainTrace {
    pub params: ChainParams,
    pub states: Vec<Sequence>,
    pub steps: Vec<ChainStep>,
    /// Initial GCD draws discarded for exceeding the token cap.
    pub initial_retries: usize,
}

impl ChainTrace {
    /// The chain's output `w_k`.
    pub fn sample(&self) -> &Sequence {
        self.states.last().expect("trace has an initial state")
    }

    pub fn accepted_count(&self) -> usize {
        self.steps.iter().filter(|s| s.accepted).count()
    }

    pub fn length_exceeded_count(&self) -> usize {
        self.steps.iter().filter(|s| s.length_exceeded()).count()
    }

    /// JSON-lines rendering: one record for `w_0`, then one per step.
    pub fn to_records(&self, vocab: &Vocabulary, chain: usize) -> Vec<TraceRecord> {
        let names = |s: &Sequence| s.tokens().iter().map(|&t| vocab.token(t).to_owned()).collect::<Vec<_>>();
        let mut out = vec![TraceRecord {
            chain,
            step: 0,
            state: names(&self.states[0]),
            proposal: None,
            position: None,
            log_qf: None,
            log_qr: None,
            alpha: None,
            accepted: None,
            length_exceeded: false,
        }];
        for (i, step) in self.steps.iter().enumerate() {
            out.push(TraceRecord {
                chain,
                step: i + 1,
                state: names(&self.states[i + 1]),
                proposal: step.proposal.as_ref().map(names),
                position: Some(step.position),
                log_qf: step.proposal.as_ref().map(|_| step.log_qf),
                log_qr: step.proposal.as_ref().map(|_| step.log_qr),
                alpha: Some(step.alpha),
                accepted: Some(step.accepted),
                length_exceeded: step.length_exceeded(),
            });
        }
        out
    }

    pub fn to_jsonl(&self, vocab: &Vocabulary, chain: usize) -> String {
        let mut out = String::new();
        for record in self.to_records(vocab, chain) {
            out.push_str(&serde_json::to_string(&record).expect("trace record serializes"));
            out.push('\n');
        }
        out
    }
}

/// One line of a serialized trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub chain: usize,
    pub step: usize,
    pub state: Vec<String>,
    pub proposal: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position: Option<usize>,
    pub log_qf: Option<f64>,
    pub log_qr: Option<f64>,
    pub alpha: Option<f64>,
    pub accepted: Option<bool>,
    #[serde(default)]
    pub length_exceeded: bool,
}

impl TraceRecord {
    pub fn state_sequence(&self, vocab: &Vocabulary) -> Result<Sequence, LmError> {
        vocab.parse_tokens(&self.state).map(Sequence::terminated)
    }
}

/// Retries allowed for an initial sample that exceeds the token cap.
pub const MAX_INITIAL_RETRIES: usize = 10_000;

struct ChainState<'g> {
    scores: StateScores,
    steps: Vec<StepScore>,
    /// Recognizer state after each prefix `w_{1:i}`, `i = 0..=|w|`.
    recognizers: Vec<RecognizerState<'g>>,
}

/// Runs one chain of `params.steps` MH transitions from a GCD sample.
///
/// A proposal that exceeds `max_tokens` is rejected and the chain stays
/// put; the initial sample is redrawn until it fits.
pub fn run_chain<M: LanguageModel + ?Sized>(
    params: &ChainParams,
    m: &M,
    g: &Grammar,
) -> Result<ChainTrace, GcdError> {
    let mut rng = ChainRng::new(params.seed);
    let kind = params.kind;
    let root = g.recognizer()?;

    let mut initial_retries = 0;
    let mut current = loop {
        match decode_from(m, root.clone(), Vec::new(), &mut rng.decode, params.max_tokens) {
            Ok(d) => {
                let mut recognizers = vec![root.clone()];
                recognizers.extend(d.states);
                break ChainState {
                    scores: StateScores::new(kind, Sequence::terminated(d.tokens), &d.steps),
                    steps: d.steps,
                    recognizers,
                };
            }
            Err(GcdError::LengthExceeded { .. }) if initial_retries < MAX_INITIAL_RETRIES => {
                initial_retries += 1;
            }
            Err(e) => return Err(e),
        }
    };

    let mut states = vec![current.scores.sequence.clone()];
    let mut steps = Vec::with_capacity(params.steps);
    for _ in 0..params.steps {
        let trunc = TruncationDist {
            probs: current.scores.log_trunc.iter().map(|l| l.exp()).collect(),
        };
        let i = trunc.sample(&mut rng.truncation);
        let prefix: Vec<TokenId> = current.scores.sequence.tokens()[..i].to_vec();
        let decoded = match decode_from(
            m,
            current.recognizers[i].clone(),
            prefix,
            &mut rng.decode,
            params.max_tokens,
        ) {
            Ok(d) => d,
            Err(GcdError::LengthExceeded { .. }) => {
                steps.push(ChainStep {
                    proposal: None,
                    position: i,
                    log_qf: f64::NEG_INFINITY,
                    log_qr: f64::NEG_INFINITY,
                    alpha: 0.0,
                    accepted: false,
                });
                states.push(current.scores.sequence.clone());
                continue;
            }
            Err(e) => return Err(e),
        };
        let mut y_steps = current.steps[..i].to_vec();
        y_steps.extend(decoded.steps);
        let mut y_recognizers = current.recognizers[..=i].to_vec();
        y_recognizers.extend(decoded.states);
        let candidate = ChainState {
            scores: StateScores::new(kind, Sequence::terminated(decoded.tokens), &y_steps),
            steps: y_steps,
            recognizers: y_recognizers,
        };

        let log_qf = log_q(&current.scores, &candidate.scores);
        let log_qr = log_q(&candidate.scores, &current.scores);
        let log_alpha = log_accept_prob(
            current.scores.lm_logprob,
            candidate.scores.lm_logprob,
            log_qf,
            log_qr,
        );
        let u: f64 = rng.accept.random();
        let accepted = u.ln() < log_alpha;
        steps.push(ChainStep {
            proposal: Some(candidate.scores.sequence.clone()),
            position: i,
            log_qf,
            log_qr,
            alpha: log_alpha.exp(),
            accepted,
        });
        if accepted {
            current = candidate;
        }
        states.push(current.scores.sequence.clone());
    }

    Ok(ChainTrace {
        params: *params,
        states,
        steps,
        initial_retries,
    })
}

/// Runs `n` independent chains in parallel, chain `i` seeded with
/// `params.seed + i`. Output order follows `i`.
pub fn run_chains<M: LanguageModel + ?Sized>(
    params: &ChainParams,
    n: usize,
    m: &M,
    g: &Grammar,
) -> Result<Vec<ChainTrace>, GcdError> {
    (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let p = ChainParams {
                seed: params.seed.wrapping_add(i),
                ..*params
            };
            run_chain(&p, m, g)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gcd::score_sequence;
    use crate::lm::{TableLm, EOS};
    use approx::assert_relative_eq;

    fn g1() -> Grammar {
        Grammar::parse(r#"root ::= "00" | "11""#).unwrap()
    }

    fn m1() -> TableLm {
        TableLm::new(
            Vocabulary::new(["0", "1"]).unwrap(),
            &[("0", 0.7), ("1", 0.2), (EOS, 0.1)],
        )
        .unwrap()
    }

    fn w(m: &TableLm, text: &str) -> Sequence {
        let names: Vec<String> = text.chars().map(String::from).collect();
        Sequence::terminated(m.vocabulary().parse_tokens(&names).unwrap())
    }

    #[test]
    fn truncation_shapes() {
        let m = m1();
        let x = w(&m, "00");
        let uniform = truncation_dist(ProposalKind::Uniform, &x, &m).unwrap();
        assert_eq!(uniform.probs(), &[1.0 / 3.0; 3]);
        let restart = truncation_dist(ProposalKind::Restart, &x, &m).unwrap();
        assert_eq!(restart.probs(), &[1.0, 0.0, 0.0]);
        let priority = truncation_dist(ProposalKind::Priority, &x, &m).unwrap();
        for (p, u) in priority.probs().iter().zip(uniform.probs()) {
            assert!((p - u).abs() < 1e-12);
        }
    }

    #[test]
    fn proposal_densities_on_two_word_language() {
        let (g, m) = (g1(), m1());
        let (zz, oo) = (w(&m, "00"), w(&m, "11"));
        let q = |x: &Sequence, y: &Sequence, k| proposal_logprob(x, y, k, &m, &g).unwrap().exp();
        assert_relative_eq!(q(&zz, &oo, ProposalKind::Uniform), 2.0 / 27.0, epsilon = 1e-12);
        assert_relative_eq!(q(&zz, &zz, ProposalKind::Uniform), 25.0 / 27.0, epsilon = 1e-12);
        assert_relative_eq!(q(&zz, &oo, ProposalKind::Restart), 2.0 / 9.0, epsilon = 1e-12);
        assert_eq!(q(&zz, &oo, ProposalKind::Restart), q(&oo, &oo, ProposalKind::Restart));
    }

    #[test]
    fn acceptance_on_two_word_language() {
        let (g, m) = (g1(), m1());
        let (zz, oo) = (w(&m, "00"), w(&m, "11"));
        let k = ProposalKind::Restart;
        let qf = proposal_logprob(&zz, &oo, k, &m, &g).unwrap();
        let qr = proposal_logprob(&oo, &zz, k, &m, &g).unwrap();
        assert_relative_eq!(accept_prob(&zz, &oo, qf, qr, &m).unwrap(), 2.0 / 7.0, epsilon = 1e-12);
        assert_eq!(accept_prob(&oo, &zz, qr, qf, &m).unwrap(), 1.0);
        let qs = proposal_logprob(&zz, &zz, k, &m, &g).unwrap();
        assert_eq!(accept_prob(&zz, &zz, qs, qs, &m).unwrap(), 1.0);
    }

    #[test]
    fn log_accept_edge_cases() {
        let ninf = f64::NEG_INFINITY;
        assert_eq!(log_accept_prob(ninf, ninf, -1.0, -1.0), 0.0);
        assert_eq!(log_accept_prob(ninf, -3.0, -1.0, -1.0), 0.0);
        assert_eq!(log_accept_prob(-3.0, ninf, -1.0, -1.0), ninf);
    }

    #[test]
    fn forced_proposal_from_position_one() {
        let (g, m) = (g1(), m1());
        // Position 1 of "00" forces the continuation; check via the density.
        let zz = w(&m, "00");
        let s = score_sequence(&m, &g, &zz).unwrap();
        assert_eq!(s.gcd_logprob_from(1), 0.0);
    }

    #[test]
    fn chain_states_stay_in_language_and_trace_is_consistent() {
        let (g, m) = (g1(), m1());
        for kind in ProposalKind::ALL {
            let params = ChainParams {
                kind,
                steps: 50,
                max_tokens: 8,
                seed: 11,
            };
            let trace = run_chain(&params, &m, &g).unwrap();
            assert_eq!(trace.states.len(), 51);
            for (i, step) in trace.steps.iter().enumerate() {
                let y = step.proposal.as_ref().unwrap();
                let expected = if step.accepted { y } else { &trace.states[i] };
                assert_eq!(&trace.states[i + 1], expected);
                let qf = proposal_logprob(&trace.states[i], y, kind, &m, &g).unwrap();
                assert!((qf - step.log_qf).abs() < 1e-10);
            }
            for s in &trace.states {
                assert!(g.accepts(&s.text(m.vocabulary())));
            }
            assert_eq!(run_chain(&params, &m, &g).unwrap(), trace);
        }
    }

    #[test]
    fn zero_steps_returns_the_initial_sample() {
        let (g, m) = (g1(), m1());
        let params = ChainParams {
            kind: ProposalKind::Restart,
            steps: 0,
            max_tokens: 8,
            seed: 5,
        };
        let trace = run_chain(&params, &m, &g).unwrap();
        assert_eq!(trace.states.len(), 1);
        assert!(trace.steps.is_empty());
    }

    #[test]
    fn singleton_language_never_moves() {
        let g = Grammar::parse(r#"s ::= "01""#).unwrap();
        let m = m1();
        let params = ChainParams {
            kind: ProposalKind::Uniform,
            steps: 20,
            max_tokens: 8,
            seed: 2,
        };
        let trace = run_chain(&params, &m, &g).unwrap();
        assert!(trace.states.iter().all(|s| *s == trace.states[0]));
        assert!(trace.steps.iter().all(|s| s.accepted && s.alpha == 1.0));
    }

    #[test]
    fn capped_proposals_are_rejected_in_place() {
        let g = Grammar::parse(r#"a ::= "x"*"#).unwrap();
        let m = TableLm::new(Vocabulary::new(["x"]).unwrap(), &[("x", 0.5), (EOS, 0.5)]).unwrap();
        let params = ChainParams {
            kind: ProposalKind::Uniform,
            steps: 200,
            max_tokens: 2,
            seed: 8,
        };
        let trace = run_chain(&params, &m, &g).unwrap();
        assert!(trace.length_exceeded_count() > 0);
        for (i, step) in trace.steps.iter().enumerate() {
            if step.length_exceeded() {
                assert!(!step.accepted);
                assert_eq!(trace.states[i + 1], trace.states[i]);
            }
        }
        assert!(trace.states.iter().all(|s| s.len() <= 2));
    }

    #[test]
    fn trace_records_round_trip_through_json() {
        let (g, m) = (g1(), m1());
        let params = ChainParams {
            kind: ProposalKind::Uniform,
            steps: 3,
            max_tokens: 8,
            seed: 1,
        };
        let trace = run_chain(&params, &m, &g).unwrap();
        let text = trace.to_jsonl(m.vocabulary(), 7);
        let records: Vec<TraceRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(records.len(), 4);
        assert_eq!(records[0].proposal, None);
        assert_eq!(records[3].state_sequence(m.vocabulary()).unwrap(), trace.sample().clone());
        assert_eq!(records, trace.to_records(m.vocabulary(), 7));
    }
}
