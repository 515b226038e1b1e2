//! Exact oracles and sample-quality metrics.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::gcd::{score_sequence, GcdError, StepScore};
use crate::grammar::{Grammar, GrammarError};
use crate::lm::{lm_logprob, LanguageModel, LmError, Sequence};
use crate::mcmc::{log_accept_prob, log_q, ProposalKind, StateScores};
use crate::numeric::log_sum_exp;

/// Largest support an exact transition matrix is built for.
pub const MAX_MATRIX_STATES: usize = 2_000;
pub const DEFAULT_BOOTSTRAP_RESAMPLES: usize = 1_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error(transparent)]
    Gcd(#[from] GcdError),
    #[error(transparent)]
    Grammar(#[from] GrammarError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error("the model assigns zero probability to every sentence of the bounded language")]
    DegenerateTarget,
    #[error("{what} exceeds the budget of {cap}")]
    BudgetExceeded { what: &'static str, cap: usize },
    #[error("observed sample {0} has zero model probability")]
    ZeroModelMass(String),
    #[error("observed sample {0} lies outside the target support")]
    OutsideSupport(String),
    #[error("empty sample set")]
    EmptySample,
    #[error("k = {k} has {runs} runs; at least 2 are needed")]
    InsufficientRuns { k: usize, runs: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// `P^G` over the sentences of `L(G)` with at most `max_tokens` tokens.
#[derive(Debug, Clone)]
pub struct ExactTarget {
    support: Vec<Sequence>,
    probs: Vec<f64>,
    normalizer: f64,
    log_normalizer: f64,
    steps: Vec<Vec<StepScore>>,
    gcd: Vec<f64>,
    index: HashMap<Sequence, usize>,
    max_tokens: usize,
}

impl ExactTarget {
    pub fn support(&self) -> &[Sequence] {
        &self.support
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// `C = Σ P(w)` over the support.
    pub fn normalizer(&self) -> f64 {
        self.normalizer
    }

    pub fn log_normalizer(&self) -> f64 {
        self.log_normalizer
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    pub fn max_tokens(&self) -> usize {
        self.max_tokens
    }

    pub fn index_of(&self, w: &Sequence) -> Option<usize> {
        self.index.get(w).copied()
    }

    pub fn prob(&self, w: &Sequence) -> f64 {
        self.index_of(w).map_or(0.0, |i| self.probs[i])
    }

    /// Distribution of constrained decoding conditioned on fitting the
    /// token cap; the chain's initial distribution.
    pub fn gcd_distribution(&self) -> &[f64] {
        &self.gcd
    }

    pub fn lm_logprob(&self, i: usize) -> f64 {
        self.steps[i].iter().map(|s| s.lm_logprob).sum()
    }

    pub(crate) fn state_scores(&self, kind: ProposalKind) -> Vec<StateScores> {
        self.support
            .iter()
            .zip(&self.steps)
            .map(|(w, s)| StateScores::new(kind, w.clone(), s))
            .collect()
    }

    /// Empirical distribution of `samples` over the support.
    pub fn histogram<'a, I>(&self, samples: I) -> Result<Vec<f64>, EvalError>
    where
        I: IntoIterator<Item = &'a Sequence>,
    {
        let mut counts = vec![0.0; self.len()];
        let mut n = 0usize;
        for w in samples {
            let i = self
                .index_of(w)
                .ok_or_else(|| EvalError::OutsideSupport(format!("{:?}", w.tokens())))?;
            counts[i] += 1.0;
            n += 1;
        }
        if n == 0 {
            return Err(EvalError::EmptySample);
        }
        Ok(counts.into_iter().map(|c| c / n as f64).collect())
    }
}

/// Builds the target by enumerating `L(G)` up to the longest string that
/// `max_tokens` tokens can spell and collecting every tokenization.
pub fn exact_target<M: LanguageModel + ?Sized>(
    g: &Grammar,
    m: &M,
    max_tokens: usize,
) -> Result<ExactTarget, EvalError> {
    let vocab = m.vocabulary();
    let longest = vocab.tokens().iter().map(|t| t.chars().count()).max().unwrap_or(1);
    let strings = g.enumerate_language(max_tokens * longest)?;

    let mut support = Vec::new();
    let mut steps = Vec::new();
    for s in &strings {
        for tokens in vocab.tokenizations(s, max_tokens) {
            let w = Sequence::terminated(tokens);
            match score_sequence(m, g, &w) {
                Ok(scored) => {
                    support.push(w);
                    steps.push(scored.steps);
                }
                Err(GcdError::NotInLanguage) => {}
                Err(e) => return Err(e.into()),
            }
        }
    }
    if support.is_empty() {
        return Err(EvalError::DegenerateTarget);
    }

    let lm: Vec<f64> = steps.iter().map(|s| s.iter().map(|x| x.lm_logprob).sum()).collect();
    let log_normalizer = log_sum_exp(lm.iter().copied());
    let probs = lm.iter().map(|l| (l - log_normalizer).exp()).collect();
    let gcd_logs: Vec<f64> = steps.iter().map(|s| s.iter().map(|x| x.gcd_logprob).sum()).collect();
    let gcd_total = log_sum_exp(gcd_logs.iter().copied());
    let gcd = gcd_logs.iter().map(|l| (l - gcd_total).exp()).collect();
    let index = support.iter().cloned().enumerate().map(|(i, w)| (w, i)).collect();
    Ok(ExactTarget {
        support,
        probs,
        normalizer: log_normalizer.exp(),
        log_normalizer,
        steps,
        gcd,
        index,
        max_tokens,
    })
}

/// How a transition matrix accepts proposals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AcceptanceRule {
    #[default]
    MetropolisHastings,
    /// Drops `q(x|y)/q(y|x)` from the ratio. A deliberately broken chain,
    /// useful as a negative control.
    IgnoreReverseProposal,
    /// Accepts every in-cap proposal.
    AlwaysAccept,
}

impl AcceptanceRule {
    fn log_alpha(self, x: &StateScores, y: &StateScores, log_qf: f64, log_qr: f64) -> f64 {
        match self {
            AcceptanceRule::MetropolisHastings => log_accept_prob(x.lm_logprob, y.lm_logprob, log_qf, log_qr),
            AcceptanceRule::IgnoreReverseProposal => log_accept_prob(x.lm_logprob, y.lm_logprob, 0.0, 0.0),
            AcceptanceRule::AlwaysAccept => 0.0,
        }
    }
}

/// Dense row-stochastic matrix over an [`ExactTarget`] support.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl TransitionMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, EvalError> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(EvalError::ShapeMismatch("rows must form a square matrix".into()));
        }
        Ok(TransitionMatrix {
            n,
            entries: rows.into_iter().flatten().collect(),
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut entries = vec![0.0; n * n];
        for i in 0..n {
            entries[i * n + i] = 1.0;
        }
        TransitionMatrix { n, entries }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, from: usize, to: usize) -> f64 {
        self.entries[from * self.n + to]
    }

    pub fn row(&self, from: usize) -> &[f64] {
        &self.entries[from * self.n..(from + 1) * self.n]
    }

    /// `p T`.
    pub fn step(&self, p: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for (x, &px) in p.iter().enumerate() {
            if px == 0.0 {
                continue;
            }
            for (o, t) in out.iter_mut().zip(self.row(x)) {
                *o += px * t;
            }
        }
        out
    }

    pub fn max_row_sum_error(&self) -> f64 {
        (0..self.n)
            .map(|i| (self.row(i).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Whitespace-separated dump, one row per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for i in 0..self.n {
            let row: Vec<String> = self.row(i).iter().map(|v| format!("{v:.12e}")).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }
}

/// The exact MH kernel `p(y|x) = q(y|x) α(x, y)` for `y ≠ x`, with the
/// rejected mass (including proposals beyond the token cap) on the diagonal.
pub fn exact_transition_matrix<M: LanguageModel + ?Sized>(
    kind: ProposalKind,
    g: &Grammar,
    m: &M,
    max_tokens: usize,
) -> Result<TransitionMatrix, EvalError> {
    let target = exact_target(g, m, max_tokens)?;
    transition_matrix_for(&target, kind, AcceptanceRule::MetropolisHastings)
}

pub fn transition_matrix_for(
    target: &ExactTarget,
    kind: ProposalKind,
    rule: AcceptanceRule,
) -> Result<TransitionMatrix, EvalError> {
    let n = target.len();
    if n > MAX_MATRIX_STATES {
        return Err(EvalError::BudgetExceeded {
            what: "transition matrix support",
            cap: MAX_MATRIX_STATES,
        });
    }
    let scores = target.state_scores(kind);
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let x = &scores[i];
            let mut row = vec![0.0; n];
            let mut moved = 0.0;
            for (j, y) in scores.iter().enumerate() {
                if j == i {
                    continue;
                }
                let log_qf = log_q(x, y);
                if log_qf == f64::NEG_INFINITY {
                    continue;
                }
                let log_qr = log_q(y, x);
                let p = (log_qf + rule.log_alpha(x, y, log_qf, log_qr)).exp();
                row[j] = p;
                moved += p;
            }
            row[i] = (1.0 - moved).max(0.0);
            row
        })
        .collect();
    TransitionMatrix::from_rows(rows)
}

/// `Σ_y q(y|x)` over the support, for every `x`. Equals 1 when no proposal
/// can leave the token cap.
pub fn proposal_mass(target: &ExactTarget, kind: ProposalKind) -> Vec<f64> {
    let scores = target.state_scores(kind);
    scores
        .par_iter()
        .map(|x| log_sum_exp(scores.iter().map(|y| log_q(x, y))).exp())
        .collect()
}

/// Largest `|π(x) p(y|x) − π(y) p(x|y)|` over ordered pairs.
pub fn detailed_balance_residual(t: &TransitionMatrix, target: &ExactTarget) -> f64 {
    let pi = target.probs();
    (0..t.len())
        .into_par_iter()
        .map(|x| {
            (0..t.len())
                .map(|y| (pi[x] * t.get(x, y) - pi[y] * t.get(y, x)).abs())
                .fold(0.0, f64::max)
        })
        .reduce(|| 0.0, f64::max)
}

/// Half the L1 distance.
pub fn tvd(p: &[f64], q: &[f64]) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// `out_k = out_0 T^k`.
pub fn k_step_distribution(t: &TransitionMatrix, out0: &[f64], k: usize) -> Vec<f64> {
    let mut p = out0.to_vec();
    for _ in 0..k {
        p = t.step(&p);
    }
    p
}

#[derive(Debug, Clone, PartialEq)]
pub struct StationarityReport {
    /// `‖πT − π‖₁`.
    pub residual: f64,
    pub tol: f64,
    /// `TVD(out_k, π)` for `k = 0..=K`.
    pub tvd: Vec<f64>,
}

impl StationarityReport {
    pub const MONOTONE_SLACK: f64 = 1e-12;

    pub fn is_stationary(&self) -> bool {
        self.residual <= self.tol
    }

    pub fn is_monotone(&self) -> bool {
        self.tvd.windows(2).all(|w| w[1] <= w[0] + Self::MONOTONE_SLACK)
    }

    pub fn final_tvd(&self) -> f64 {
        *self.tvd.last().expect("report has k = 0")
    }

    pub fn passed(&self) -> bool {
        self.is_stationary() && self.is_monotone()
    }
}

/// Checks `πT = π` and power-iterates from the GCD distribution up to
/// `k_max` steps.
pub fn stationary_check(
    t: &TransitionMatrix,
    target: &ExactTarget,
    tol: f64,
    k_max: usize,
) -> Result<StationarityReport, EvalError> {
    if t.len() != target.len() {
        return Err(EvalError::ShapeMismatch(format!(
            "matrix has {} states, target has {}",
            t.len(),
            target.len()
        )));
    }
    let pi = target.probs();
    let residual = t.step(pi).iter().zip(pi).map(|(a, b)| (a - b).abs()).sum();
    let mut p = target.gcd_distribution().to_vec();
    let mut tvds = vec![tvd(&p, pi)];
    for _ in 0..k_max {
        p = t.step(&p);
        tvds.push(tvd(&p, pi));
    }
    Ok(StationarityReport {
        residual,
        tol,
        tvd: tvds,
    })
}

fn counts(samples: &[Sequence]) -> Result<BTreeMap<&Sequence, usize>, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::EmptySample);
    }
    let mut out = BTreeMap::new();
    for w in samples {
        if !w.is_terminated() {
            return Err(LmError::Unterminated.into());
        }
        *out.entry(w).or_insert(0) += 1;
    }
    Ok(out)
}

fn observed_lm<'a, M: LanguageModel + ?Sized>(
    samples: &'a [Sequence],
    m: &M,
) -> Result<Vec<(f64, f64)>, EvalError> {
    let n = samples.len() as f64;
    counts(samples)?
        .into_iter()
        .map(|(w, c)| {
            let lp = lm_logprob(m, w)?;
            if lp == f64::NEG_INFINITY {
                return Err(EvalError::ZeroModelMass(w.display(m.vocabulary()).to_string()));
            }
            Ok((c as f64 / n, lp))
        })
        .collect()
}

/// `KL(f ‖ P̂)` with `f` the empirical distribution and `P̂` the model
/// renormalized over the observed support.
pub fn empirical_kl_to_lm<M: LanguageModel + ?Sized>(samples: &[Sequence], m: &M) -> Result<f64, EvalError> {
    let obs = observed_lm(samples, m)?;
    let log_z = log_sum_exp(obs.iter().map(|&(_, lp)| lp));
    Ok(obs.iter().map(|&(f, lp)| f * (f.ln() - (lp - log_z))).sum::<f64>().max(0.0))
}

/// `Σ f(w) ln(f(w) / P(w))` against the raw model probabilities.
pub fn empirical_kl_to_lm_unnormalized<M: LanguageModel + ?Sized>(
    samples: &[Sequence],
    m: &M,
) -> Result<f64, EvalError> {
    Ok(observed_lm(samples, m)?.iter().map(|&(f, lp)| f * (f.ln() - lp)).sum())
}

/// `KL(f ‖ P^G)` against the exact target.
pub fn empirical_kl_to_target(samples: &[Sequence], target: &ExactTarget) -> Result<f64, EvalError> {
    let n = samples.len() as f64;
    counts(samples)?
        .into_iter()
        .map(|(w, c)| {
            let p = target.prob(w);
            if p == 0.0 {
                return Err(EvalError::OutsideSupport(format!("{:?}", w.tokens())));
            }
            let f = c as f64 / n;
            Ok(f * (f / p).ln())
        })
        .sum::<Result<f64, _>>()
        .map(|v| v.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BootstrapConfig {
    pub resamples: usize,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            resamples: DEFAULT_BOOTSTRAP_RESAMPLES,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanCi {
    pub mean: f64,
    pub low: f64,
    pub high: f64,
}

/// Mean with a 95% percentile-bootstrap interval.
pub fn bootstrap_mean_ci(values: &[f64], config: BootstrapConfig) -> MeanCi {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut means: Vec<f64> = (0..config.resamples)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let pick = |q: f64| means[((q * (means.len() - 1) as f64).round() as usize).min(means.len() - 1)];
    let (low, high) = if means.is_empty() { (mean, mean) } else { (pick(0.025), pick(0.975)) };
    MeanCi {
        mean,
        low: low.min(mean),
        high: high.max(mean),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KlRow {
    pub k: usize,
    pub n_runs: usize,
    pub to_lm: MeanCi,
    pub to_target: Option<MeanCi>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct KlReport {
    pub rows: Vec<KlRow>,
}

impl KlReport {
    pub fn row(&self, k: usize) -> Option<&KlRow> {
        self.rows.iter().find(|r| r.k == k)
    }

    /// Whether the chosen metric's mean strictly decreases along `k`.
    pub fn strictly_decreasing(&self, to_target: bool) -> bool {
        let means: Vec<f64> = self
            .rows
            .iter()
            .filter_map(|r| if to_target { r.to_target.map(|c| c.mean) } else { Some(r.to_lm.mean) })
            .collect();
        means.windows(2).all(|w| w[1] < w[0])
    }

    /// Rows in the `benchmark,method,kind,k,metric,value,ci_low,ci_high,n_runs`
    /// layout, without a header.
    pub fn csv_rows(&self, benchmark: &str, method: &str, kind: &str) -> String {
        let mut out = String::new();
        for r in &self.rows {
            let mut metrics = vec![("kl_lm", r.to_lm)];
            if let Some(t) = r.to_target {
                metrics.push(("kl_target", t));
            }
            for (name, c) in metrics {
                let _ = writeln!(
                    out,
                    "{benchmark},{method},{kind},{},{name},{},{},{},{}",
                    r.k, c.mean, c.low, c.high, r.n_runs
                );
            }
        }
        out
    }
}

pub const CSV_HEADER: &str = "benchmark,method,kind,k,metric,value,ci_low,ci_high,n_runs";

/// Per-`k` mean KL over runs, each run being a set of samples.
pub fn kl_convergence_report<M: LanguageModel + ?Sized>(
    runs_by_k: &BTreeMap<usize, Vec<Vec<Sequence>>>,
    m: &M,
    target: Option<&ExactTarget>,
    config: BootstrapConfig,
) -> Result<KlReport, EvalError> {
    let mut rows = Vec::new();
    for (&k, runs) in runs_by_k {
        if runs.len() < 2 {
            return Err(EvalError::InsufficientRuns { k, runs: runs.len() });
        }
        let to_lm: Vec<f64> = runs
            .iter()
            .map(|r| empirical_kl_to_lm(r, m))
            .collect::<Result<_, _>>()?;
        let to_target = match target {
            Some(t) => {
                let vals: Vec<f64> = runs
                    .iter()
                    .map(|r| empirical_kl_to_target(r, t))
                    .collect::<Result<_, _>>()?;
                Some(bootstrap_mean_ci(&vals, config))
            }
            None => None,
        };
        rows.push(KlRow {
            k,
            n_runs: runs.len(),
            to_lm: bootstrap_mean_ci(&to_lm, config),
            to_target,
        });
    }
    Ok(KlReport { rows })
}

/// Geometric mean of positive values; `NaN` if any is not positive.
pub fn geometric_mean(values: &[f64]) -> f64 {
    if values.is_empty() || values.iter().any(|&v| !(v > 0.0)) {
        return f64::NAN;
    }
    (values.iter().map(|v| v.ln()).sum::<f64>() / values.len() as f64).exp()
}
