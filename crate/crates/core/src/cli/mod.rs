//! The `grammcmc` command line: `sample`, `oracle`, `eval` and `corpus`.
//!
//! Every option can also come from a `GRAMMCMC_*` environment variable or a
//! `--config` file of `key = value` lines. Flags beat the environment, which
//! beats the file.

mod config;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{
    detailed_balance_residual, exact_target, geometric_mean, kl_convergence_report, stationary_check,
    transition_matrix_for, AcceptanceRule, BootstrapConfig, EvalError, CSV_HEADER,
};
use crate::fixtures;
use crate::gcd::{rejection_sample, validate_setup, GcdError, DEFAULT_MAX_TOKENS};
use crate::grammar::{escape, Grammar, GrammarError};
use crate::lm::{parse_corpus, LanguageModel, LmError, NgramLm, RemoteLm, Sequence, TableLm, UniformLm, Vocabulary};
use crate::mcmc::{run_chains, ChainParams, ChainTrace, ProposalKind};

pub use config::parse_config;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
    #[error("{0}")]
    Verification(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::Verification(_) => 3,
        }
    }
}

impl From<GrammarError> for CliError {
    fn from(e: GrammarError) -> Self {
        match e {
            GrammarError::BudgetExceeded { .. } => CliError::Runtime(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<LmError> for CliError {
    fn from(e: LmError) -> Self {
        match e {
            LmError::Transport(_) | LmError::ProtocolViolation(_) | LmError::Timeout => CliError::Runtime(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<GcdError> for CliError {
    fn from(e: GcdError) -> Self {
        match e {
            GcdError::Lm(e) => e.into(),
            GcdError::Grammar(e) => e.into(),
            GcdError::PrefixNotViable | GcdError::MaskEmpty { .. } | GcdError::NotInLanguage => {
                CliError::Config(e.to_string())
            }
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Gcd(e) => e.into(),
            EvalError::Grammar(e) => e.into(),
            EvalError::Lm(e) => e.into(),
            EvalError::BudgetExceeded { .. } | EvalError::DegenerateTarget => CliError::Runtime(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Config(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "grammcmc", version, about = "Grammar-aligned sampling from language models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Commands,
}

#[derive(Debug, Subcommand)]
pub enum Commands {
    /// Draw samples into a run directory (samples.txt, traces.jsonl, run.json).
    Sample(SampleArgs),
    /// Verify stationarity and monotone convergence with exact matrices.
    Oracle(OracleArgs),
    /// Summarize run directories as a KL report in CSV.
    Eval(EvalArgs),
    /// Write `--count` distinct samples as fuzzing seed files.
    Corpus(CorpusArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Grammar file in EBNF.
    #[arg(long, env = "GRAMMCMC_GRAMMAR")]
    pub grammar: Option<PathBuf>,
    /// Table model in JSON.
    #[arg(long, env = "GRAMMCMC_TABLE", group = "lm")]
    pub table: Option<PathBuf>,
    /// Train an n-gram model on this corpus (one sequence per line).
    #[arg(long, env = "GRAMMCMC_NGRAM", group = "lm")]
    pub ngram: Option<PathBuf>,
    #[arg(long, env = "GRAMMCMC_ORDER", default_value_t = 2)]
    pub order: usize,
    #[arg(long, env = "GRAMMCMC_ALPHA", default_value_t = 1.0)]
    pub alpha: f64,
    /// Uniform model over the vocabulary.
    #[arg(long, env = "GRAMMCMC_UNIFORM", group = "lm")]
    pub uniform: bool,
    /// Base URL of a model server.
    #[arg(long, env = "GRAMMCMC_REMOTE", group = "lm")]
    pub remote: Option<String>,
    /// Vocabulary for `--uniform` or `--remote`: whitespace-separated tokens,
    /// `\s` for a space. Defaults to the grammar's characters.
    #[arg(long, env = "GRAMMCMC_VOCAB")]
    pub vocab: Option<PathBuf>,
    #[arg(long, env = "GRAMMCMC_TIMEOUT_MS", default_value_t = 2000)]
    pub timeout_ms: u64,
}

#[derive(Debug, Clone, Args)]
pub struct SamplingArgs {
    /// gcd, rejection, mcmc-uniform, mcmc-priority or mcmc-restart.
    #[arg(long, env = "GRAMMCMC_METHOD", default_value = "gcd")]
    pub method: Method,
    /// MH steps per chain; required for the mcmc methods.
    #[arg(short, long, env = "GRAMMCMC_K")]
    pub k: Option<usize>,
    #[arg(short = 'n', long, visible_alias = "count", env = "GRAMMCMC_N_SAMPLES", default_value_t = 100)]
    pub n_samples: usize,
    #[arg(long, env = "GRAMMCMC_MAX_TOKENS", default_value_t = DEFAULT_MAX_TOKENS)]
    pub max_tokens: usize,
    #[arg(long, env = "GRAMMCMC_SEED", default_value_t = 42)]
    pub seed: u64,
    /// Attempts per sample for `rejection`.
    #[arg(long, env = "GRAMMCMC_MAX_ATTEMPTS", default_value_t = 10_000)]
    pub max_attempts: usize,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// `key = value` file of defaults for this subcommand.
    #[arg(long, env = "GRAMMCMC_CONFIG")]
    pub config: Option<PathBuf>,
    /// Worker threads; defaults to the number of logical CPUs.
    #[arg(long, env = "GRAMMCMC_JOBS")]
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct SampleArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    /// Run directory to create.
    #[arg(long, env = "GRAMMCMC_OUT")]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Args)]
pub struct OracleArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Check the bundled fixture matrix instead of a grammar and model.
    #[arg(long)]
    pub fixtures: bool,
    #[arg(long, env = "GRAMMCMC_MAX_TOKENS", default_value_t = 8)]
    pub max_tokens: usize,
    /// Power-iteration horizon for the TVD sequence.
    #[arg(long, default_value_t = 200)]
    pub k_max: usize,
    #[arg(long, default_value_t = 1e-10)]
    pub tol: f64,
    #[arg(long, hide = true)]
    pub debug_ignore_reverse: bool,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Run directories, or directories containing them.
    pub runs: Vec<PathBuf>,
    /// Also report KL to the exact target (bounded languages only).
    #[arg(long)]
    pub exact: bool,
    /// Report every intermediate step `j ≤ k` of each chain.
    #[arg(long)]
    pub per_step: bool,
    #[arg(long, default_value_t = crate::eval::DEFAULT_BOOTSTRAP_RESAMPLES)]
    pub resamples: usize,
    #[arg(long, env = "GRAMMCMC_SEED", default_value_t = 42)]
    pub seed: u64,
    /// CSV destination; stdout if absent.
    #[arg(long, env = "GRAMMCMC_OUT")]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Args)]
pub struct CorpusArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    /// Directory for the seed files.
    #[arg(long, env = "GRAMMCMC_OUT")]
    pub out: Option<PathBuf>,
    #[arg(long, default_value = "txt")]
    pub ext: String,
    /// Samples to draw at most while collecting distinct seeds; defaults to
    /// ten times `--count`.
    #[arg(long, env = "GRAMMCMC_MAX_DRAWS")]
    pub max_draws: Option<usize>,
    #[command(flatten)]
    pub common: CommonArgs,
}

/// A sampling method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Gcd,
    Rejection,
    Mcmc(ProposalKind),
}

impl Method {
    pub fn kind(self) -> Option<ProposalKind> {
        match self {
            Method::Mcmc(k) => Some(k),
            _ => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Gcd => f.write_str("gcd"),
            Method::Rejection => f.write_str("rejection"),
            Method::Mcmc(k) => write!(f, "mcmc-{k}"),
        }
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gcd" => Ok(Method::Gcd),
            "rejection" => Ok(Method::Rejection),
            other => match other.strip_prefix("mcmc-") {
                Some(kind) => kind.parse().map(Method::Mcmc),
                None => Err(format!(
                    "unknown method {other:?}; expected gcd, rejection, mcmc-uniform, mcmc-priority or mcmc-restart"
                )),
            },
        }
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Where a model comes from; stored in run manifests so `eval` can rebuild it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum LmSpec {
    Table { path: PathBuf },
    Ngram { corpus: PathBuf, order: usize, alpha: f64 },
    Uniform { vocab: Option<PathBuf> },
    Remote { url: String, vocab: Option<PathBuf>, timeout_ms: u64 },
}

fn absolute(path: &Path) -> PathBuf {
    fs::canonicalize(path).unwrap_or_else(|_| path.to_path_buf())
}

impl LmSpec {
    pub fn from_args(a: &ModelArgs) -> Result<Self, CliError> {
        if let Some(path) = &a.table {
            Ok(LmSpec::Table { path: absolute(path) })
        } else if let Some(corpus) = &a.ngram {
            Ok(LmSpec::Ngram {
                corpus: absolute(corpus),
                order: a.order,
                alpha: a.alpha,
            })
        } else if a.uniform {
            Ok(LmSpec::Uniform {
                vocab: a.vocab.as_deref().map(absolute),
            })
        } else if let Some(url) = &a.remote {
            Ok(LmSpec::Remote {
                url: url.clone(),
                vocab: a.vocab.as_deref().map(absolute),
                timeout_ms: a.timeout_ms,
            })
        } else {
            Err(CliError::Config(
                "no language model given; pass one of --table, --ngram, --uniform or --remote".into(),
            ))
        }
    }

    /// Builds the model and checks it can spell the grammar.
    pub fn build(&self, g: &Grammar) -> Result<Box<dyn LanguageModel>, CliError> {
        let terminals = || Vocabulary::new(g.terminals().iter().map(|c| c.to_string()));
        let read_vocab = |path: &Option<PathBuf>| -> Result<Vocabulary, CliError> {
            match path {
                Some(p) => {
                    let text = fs::read_to_string(p).map_err(|e| io_error(p, e))?;
                    let names: BTreeSet<String> = parse_corpus(&text)?.into_iter().flatten().collect();
                    Ok(Vocabulary::new(names)?)
                }
                None => Ok(terminals()?),
            }
        };
        let lm: Box<dyn LanguageModel> = match self {
            LmSpec::Table { path } => {
                let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
                Box::new(TableLm::from_json(&text)?)
            }
            LmSpec::Ngram { corpus, order, alpha } => {
                let text = fs::read_to_string(corpus).map_err(|e| io_error(corpus, e))?;
                Box::new(NgramLm::train_from_text(&text, *order, *alpha, g.terminals().iter().copied())?)
            }
            LmSpec::Uniform { vocab } => Box::new(UniformLm::new(read_vocab(vocab)?)),
            LmSpec::Remote { url, vocab, timeout_ms } => Box::new(RemoteLm::with_timeout(
                read_vocab(vocab)?,
                url,
                Duration::from_millis(*timeout_ms),
            )),
        };
        validate_setup(&lm, g)?;
        Ok(lm)
    }
}

pub fn load_grammar(path: &Path) -> Result<Grammar, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    Grammar::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn required_grammar(a: &ModelArgs) -> Result<PathBuf, CliError> {
    a.grammar
        .clone()
        .ok_or_else(|| CliError::Config("no grammar given; pass --grammar".into()))
}

/// What one chain produced.
#[derive(Debug, Clone)]
pub struct ChainOutput {
    pub sample: Option<Sequence>,
    /// JSON-lines trace of the chain.
    pub trace: String,
    pub failure: Option<String>,
    pub accepted_steps: usize,
    pub length_exceeded: usize,
}

#[derive(Serialize)]
struct RejectionRecord<'a> {
    chain: usize,
    step: usize,
    state: Option<Vec<&'a str>>,
    attempts: usize,
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    exhausted: bool,
}

/// Runs `n` independent chains of `method`, chain `i` seeded with `seed + i`.
pub fn generate(
    g: &Grammar,
    m: &dyn LanguageModel,
    s: &SamplingArgs,
) -> Result<Vec<ChainOutput>, CliError> {
    let k = match (s.method, s.k) {
        (Method::Mcmc(_), None) => return Err(CliError::Config(format!("--k is required for {}", s.method))),
        (Method::Mcmc(_), Some(k)) => k,
        (_, Some(_)) => return Err(CliError::Config(format!("--k only applies to mcmc methods, not {}", s.method))),
        (_, None) => 0,
    };
    let vocab = m.vocabulary();
    match s.method {
        Method::Rejection => (0..s.n_samples)
            .into_par_iter()
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(s.seed.wrapping_add(i as u64));
                let names = |w: &Sequence| w.tokens().iter().map(|&t| vocab.token(t)).collect::<Vec<_>>();
                let (sample, attempts, failure) =
                    match rejection_sample(m, g, &mut rng, s.max_attempts, s.max_tokens) {
                        Ok(r) => (Some(r.sequence), r.attempts, None),
                        Err(e @ GcdError::Exhausted { attempts }) => (None, attempts, Some(e.to_string())),
                        Err(e) => return Err(CliError::from(e)),
                    };
                let record = RejectionRecord {
                    chain: i,
                    step: 0,
                    state: sample.as_ref().map(names),
                    attempts,
                    exhausted: failure.is_some(),
                };
                Ok(ChainOutput {
                    trace: format!("{}\n", serde_json::to_string(&record).expect("record serializes")),
                    sample,
                    failure,
                    accepted_steps: 0,
                    length_exceeded: 0,
                })
            })
            .collect(),
        Method::Gcd | Method::Mcmc(_) => {
            let params = ChainParams {
                kind: s.method.kind().unwrap_or(ProposalKind::Restart),
                steps: k,
                max_tokens: s.max_tokens,
                seed: s.seed,
            };
            (0..s.n_samples)
                .into_par_iter()
                .map(|i| {
                    let p = ChainParams {
                        seed: s.seed.wrapping_add(i as u64),
                        ..params
                    };
                    match run_chains(&p, 1, m, g) {
                        Ok(mut traces) => Ok(chain_output(traces.remove(0), vocab, i)),
                        Err(e @ GcdError::LengthExceeded { .. }) => Ok(ChainOutput {
                            sample: None,
                            trace: String::new(),
                            failure: Some(format!("chain {i}: initial sample: {e}")),
                            accepted_steps: 0,
                            length_exceeded: 0,
                        }),
                        Err(e) => Err(e.into()),
                    }
                })
                .collect()
        }
    }
}

fn chain_output(t: ChainTrace, vocab: &Vocabulary, chain: usize) -> ChainOutput {
    ChainOutput {
        sample: Some(t.sample().clone()),
        trace: t.to_jsonl(vocab, chain),
        failure: None,
        accepted_steps: t.accepted_count(),
        length_exceeded: t.length_exceeded_count(),
    }
}

/// Contents of `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub benchmark: String,
    pub grammar: PathBuf,
    pub lm: LmSpec,
    pub method: Method,
    pub k: usize,
    pub n_samples: usize,
    pub max_tokens: usize,
    pub seed: u64,
    pub produced: usize,
    pub failed: usize,
    pub accepted_steps: usize,
    pub length_exceeded: usize,
}

fn benchmark_name(grammar: &Path) -> String {
    grammar
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "grammar".into())
}

fn partial_failure(outputs: &[ChainOutput]) -> Option<CliError> {
    let failures: Vec<&str> = outputs.iter().filter_map(|o| o.failure.as_deref()).collect();
    (!failures.is_empty()).then(|| {
        CliError::Runtime(format!(
            "{} of {} chains produced no sample (first: {}); output is partial",
            failures.len(),
            outputs.len(),
            failures[0]
        ))
    })
}

fn cmd_sample(a: &SampleArgs) -> Result<(), CliError> {
    let grammar_path = required_grammar(&a.model)?;
    let out = a
        .out
        .clone()
        .ok_or_else(|| CliError::Config("no run directory given; pass --out".into()))?;
    let g = load_grammar(&grammar_path)?;
    let spec = LmSpec::from_args(&a.model)?;
    let m = spec.build(&g)?;
    let outputs = generate(&g, &*m, &a.sampling)?;

    fs::create_dir_all(&out).map_err(|e| io_error(&out, e))?;
    let vocab = m.vocabulary();
    let samples: String = outputs
        .iter()
        .filter_map(|o| o.sample.as_ref())
        .map(|w| format!("{}\n", escape(&w.text(vocab))))
        .collect();
    let traces: String = outputs.iter().map(|o| o.trace.as_str()).collect();
    let manifest = RunManifest {
        benchmark: benchmark_name(&grammar_path),
        grammar: absolute(&grammar_path),
        lm: spec,
        method: a.sampling.method,
        k: a.sampling.k.unwrap_or(0),
        n_samples: a.sampling.n_samples,
        max_tokens: a.sampling.max_tokens,
        seed: a.sampling.seed,
        produced: outputs.iter().filter(|o| o.sample.is_some()).count(),
        failed: outputs.iter().filter(|o| o.failure.is_some()).count(),
        accepted_steps: outputs.iter().map(|o| o.accepted_steps).sum(),
        length_exceeded: outputs.iter().map(|o| o.length_exceeded).sum(),
    };
    let write = |name: &str, body: &str| {
        let p = out.join(name);
        fs::write(&p, body).map_err(|e| io_error(&p, e))
    };
    write("samples.txt", &samples)?;
    write("traces.jsonl", &traces)?;
    write(
        "run.json",
        &format!("{}\n", serde_json::to_string_pretty(&manifest).expect("manifest serializes")),
    )?;
    println!(
        "wrote {} samples to {} ({} accepted steps, {} cap rejections)",
        manifest.produced,
        out.display(),
        manifest.accepted_steps,
        manifest.length_exceeded
    );
    if manifest.length_exceeded > 0 {
        eprintln!(
            "warning: {} proposals exceeded --max-tokens {} and were rejected",
            manifest.length_exceeded, manifest.max_tokens
        );
    }
    partial_failure(&outputs).map_or(Ok(()), Err)
}

fn cmd_corpus(a: &CorpusArgs) -> Result<(), CliError> {
    let grammar_path = required_grammar(&a.model)?;
    let out = a
        .out
        .clone()
        .ok_or_else(|| CliError::Config("no output directory given; pass --out".into()))?;
    let g = load_grammar(&grammar_path)?;
    let m = LmSpec::from_args(&a.model)?.build(&g)?;
    let wanted = a.sampling.n_samples;
    let max_draws = a.max_draws.unwrap_or(wanted.saturating_mul(10));
    fs::create_dir_all(&out).map_err(|e| io_error(&out, e))?;
    if wanted == 0 {
        eprintln!("warning: --count is 0; no seeds written");
    }

    // Chains are drawn in index order, so the kept set does not depend on
    // batching.
    let ext = a.ext.trim_start_matches('.');
    let mut seen = BTreeSet::new();
    let (mut drawn, mut dropped, mut failed) = (0usize, 0usize, Vec::new());
    while seen.len() < wanted && drawn < max_draws {
        let batch = (wanted - seen.len()).max(8).min(max_draws - drawn);
        let sampling = SamplingArgs {
            n_samples: batch,
            seed: a.sampling.seed.wrapping_add(drawn as u64),
            ..a.sampling.clone()
        };
        for o in generate(&g, &*m, &sampling)? {
            drawn += 1;
            if seen.len() == wanted {
                break;
            }
            let Some(w) = o.sample else {
                failed.extend(o.failure);
                continue;
            };
            let text = w.text(m.vocabulary());
            if !seen.insert(text.clone()) {
                dropped += 1;
                continue;
            }
            let path = out.join(format!("seed-{:04}.{ext}", seen.len()));
            fs::write(&path, text).map_err(|e| io_error(&path, e))?;
        }
    }
    println!("kept {}, dropped {dropped} duplicates, {drawn} samples drawn", seen.len());
    if !failed.is_empty() {
        eprintln!("warning: {} chains produced no sample (first: {})", failed.len(), failed[0]);
    }
    if seen.len() < wanted {
        return Err(CliError::Runtime(format!(
            "only {} distinct seeds after {max_draws} draws; raise --max-draws",
            seen.len()
        )));
    }
    Ok(())
}

fn cmd_oracle(a: &OracleArgs) -> Result<(), CliError> {
    let cases: Vec<(String, Grammar, Box<dyn LanguageModel>, usize)> = if a.fixtures {
        fixtures::matrix()
            .into_iter()
            .map(|f| (f.name, f.grammar, f.lm, f.max_tokens))
            .collect()
    } else {
        let path = required_grammar(&a.model)?;
        let g = load_grammar(&path)?;
        let m = LmSpec::from_args(&a.model)?.build(&g)?;
        vec![(benchmark_name(&path), g, m, a.max_tokens)]
    };
    let rule = if a.debug_ignore_reverse {
        AcceptanceRule::IgnoreReverseProposal
    } else {
        AcceptanceRule::MetropolisHastings
    };
    let mut failures = 0;
    for (name, g, m, max_tokens) in &cases {
        let target = exact_target(g, m, *max_tokens)?;
        for kind in ProposalKind::ALL {
            let t = transition_matrix_for(&target, kind, rule)?;
            let report = stationary_check(&t, &target, a.tol, a.k_max)?;
            let balance = detailed_balance_residual(&t, &target);
            let pass = report.passed();
            failures += usize::from(!pass);
            println!(
                "[{}] {name}/{kind}: {} states, |piT - pi|_1 = {:.2e}, balance {:.2e}, TVD k=0 {:.4} -> k={} {:.2e}, monotone {}",
                if pass { "PASS" } else { "FAIL" },
                target.len(),
                report.residual,
                balance,
                report.tvd[0],
                a.k_max,
                report.final_tvd(),
                report.is_monotone()
            );
        }
    }
    if failures > 0 {
        return Err(CliError::Verification(format!("{failures} oracle checks failed")));
    }
    Ok(())
}

struct LoadedRun {
    manifest: RunManifest,
    /// Final state of each chain, or every step's states with `--per-step`.
    by_step: BTreeMap<usize, Vec<Vec<String>>>,
}

fn find_runs(paths: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let mut out = Vec::new();
    for p in paths {
        if p.join("run.json").is_file() {
            out.push(p.clone());
            continue;
        }
        let entries = fs::read_dir(p).map_err(|e| io_error(p, e))?;
        let mut dirs: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|d| d.join("run.json").is_file())
            .collect();
        dirs.sort();
        out.extend(dirs);
    }
    Ok(out)
}

#[derive(Deserialize)]
struct LooseRecord {
    chain: usize,
    #[serde(default)]
    step: usize,
    state: Option<Vec<String>>,
}

fn load_run(dir: &Path, per_step: bool) -> Result<LoadedRun, CliError> {
    let manifest_path = dir.join("run.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| io_error(&manifest_path, e))?;
    let manifest: RunManifest = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", manifest_path.display())))?;
    let trace_path = dir.join("traces.jsonl");
    let traces = fs::read_to_string(&trace_path).map_err(|e| io_error(&trace_path, e))?;
    let mut by_step: BTreeMap<usize, BTreeMap<usize, Vec<String>>> = BTreeMap::new();
    for (n, line) in traces.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let r: LooseRecord = serde_json::from_str(line)
            .map_err(|e| CliError::Config(format!("{} line {}: {e}", trace_path.display(), n + 1)))?;
        if let Some(state) = r.state {
            by_step.entry(r.step).or_default().insert(r.chain, state);
        }
    }
    let by_step = by_step
        .into_iter()
        .filter(|(step, _)| per_step || *step == manifest.k)
        .map(|(step, chains)| (step, chains.into_values().collect()))
        .collect();
    Ok(LoadedRun { manifest, by_step })
}

type GroupKey = (String, Method);

fn cmd_eval(a: &EvalArgs) -> Result<(), CliError> {
    let dirs = find_runs(&a.runs)?;
    let runs: Vec<LoadedRun> = dirs.iter().map(|d| load_run(d, a.per_step)).collect::<Result<_, _>>()?;
    if runs.len() < 2 {
        return Err(EvalError::InsufficientRuns { k: 0, runs: runs.len() }.into());
    }

    let mut groups: BTreeMap<GroupKey, Vec<&LoadedRun>> = BTreeMap::new();
    for r in &runs {
        groups
            .entry((r.manifest.benchmark.clone(), r.manifest.method))
            .or_default()
            .push(r);
    }

    let config = BootstrapConfig {
        resamples: a.resamples,
        seed: a.seed,
    };
    let mut csv = format!("{CSV_HEADER}\n");
    let mut summaries = Vec::new();
    let mut models: HashMap<String, (Grammar, Box<dyn LanguageModel>)> = HashMap::new();
    for ((benchmark, method), members) in &groups {
        let first = &members[0].manifest;
        let model_key = format!("{}|{}", first.grammar.display(), serde_json::to_string(&first.lm).unwrap());
        if !models.contains_key(&model_key) {
            let g = load_grammar(&first.grammar)?;
            let m = first.lm.build(&g)?;
            models.insert(model_key.clone(), (g, m));
        }
        let (g, m) = &models[&model_key];
        let vocab = m.vocabulary();

        let mut by_k: BTreeMap<usize, Vec<Vec<Sequence>>> = BTreeMap::new();
        for run in members {
            for (&step, states) in &run.by_step {
                let samples = states
                    .iter()
                    .map(|names| vocab.parse_tokens(names).map(Sequence::terminated))
                    .collect::<Result<Vec<_>, _>>()?;
                if !samples.is_empty() {
                    by_k.entry(step).or_default().push(samples);
                }
            }
        }
        let target = if a.exact {
            Some(exact_target(g, m, first.max_tokens)?)
        } else {
            None
        };
        let report = kl_convergence_report(&by_k, m, target.as_ref(), config)?;
        let kind = method.kind().map_or("-".to_string(), |k| k.to_string());
        csv.push_str(&report.csv_rows(benchmark, &method.to_string(), &kind));
        summaries.push((benchmark.clone(), *method, report));
    }

    match &a.out {
        Some(p) => fs::write(p, &csv).map_err(|e| io_error(p, e))?,
        None => print!("{csv}"),
    }

    for (benchmark, method, report) in &summaries {
        if report.rows.len() > 1 {
            eprintln!(
                "trend {benchmark} {method}: mean KL strictly decreasing in k: {}",
                report.strictly_decreasing(a.exact)
            );
        }
    }
    // Per-benchmark ratio of GCD's mean KL to each method's mean KL at its
    // largest k, then the geometric mean over benchmarks.
    let mut ratios: BTreeMap<Method, Vec<f64>> = BTreeMap::new();
    for (benchmark, method, report) in &summaries {
        if *method == Method::Gcd {
            continue;
        }
        let base = summaries
            .iter()
            .find(|(b, m, _)| b == benchmark && *m == Method::Gcd)
            .and_then(|(_, _, r)| r.rows.last());
        if let (Some(base), Some(last)) = (base, report.rows.last()) {
            ratios.entry(*method).or_default().push(base.to_lm.mean / last.to_lm.mean);
        }
    }
    for (method, values) in ratios {
        eprintln!(
            "geomean KL ratio gcd/{method} over {} benchmarks: {:.3} (per-benchmark ratio of mean KL at the largest k)",
            values.len(),
            geometric_mean(&values)
        );
    }
    Ok(())
}

/// Runs the command line on `args` (including the program name) and returns
/// the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    match parse(args) {
        Ok(cli) => match execute(&cli) {
            Ok(()) => 0,
            Err(e) => {
                eprintln!("error: {e}");
                e.exit_code()
            }
        },
        Err(Ok(code)) => code,
        Err(Err(e)) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

type ParseOutcome = Result<Cli, Result<i32, CliError>>;

fn parse(args: Vec<OsString>) -> ParseOutcome {
    let command = Cli::command();
    let clap_failure = |e: clap::Error| -> Result<i32, CliError> {
        let code = if e.use_stderr() { 1 } else { 0 };
        let _ = e.print();
        Ok(code)
    };
    let matches = command.clone().try_get_matches_from(&args).map_err(clap_failure)?;
    let config_path = matches
        .subcommand()
        .and_then(|(_, sub)| sub.get_one::<PathBuf>("config").cloned());
    let matches = match config_path {
        Some(path) => {
            let entries = config::read_config(&path).map_err(Err)?;
            let merged = config::merge_config(&command, &matches, args, &entries).map_err(Err)?;
            command.try_get_matches_from(merged).map_err(clap_failure)?
        }
        None => matches,
    };
    Cli::from_arg_matches(&matches).map_err(clap_failure)
}

fn jobs(cli: &Cli) -> Option<usize> {
    match &cli.command {
        Commands::Sample(a) => a.common.jobs,
        Commands::Oracle(a) => a.common.jobs,
        Commands::Eval(a) => a.common.jobs,
        Commands::Corpus(a) => a.common.jobs,
    }
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let run = || match &cli.command {
        Commands::Sample(a) => cmd_sample(a),
        Commands::Oracle(a) => cmd_oracle(a),
        Commands::Eval(a) => cmd_eval(a),
        Commands::Corpus(a) => cmd_corpus(a),
    };
    match jobs(cli) {
        Some(0) => Err(CliError::Config("--jobs must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Runtime(e.to_string()))?
            .install(run),
        None => run(),
    }
}
