//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;
use std::process::Command;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use grammcmc::eval::{
    detailed_balance_residual, exact_target, k_step_distribution,
    kl_convergence_report, proposal_mass, stationary_check, transition_matrix_for, tvd, AcceptanceRule,
    BootstrapConfig, ExactTarget, TransitionMatrix,
};
use grammcmc::fixtures::{self, Fixture};
use grammcmc::gcd::{masked_step, rejection_attempt};
use grammcmc::grammar::{Grammar, RecognizerState};
use grammcmc::lm::{step_perplexity, LanguageModel, Sequence, TokenId};
use grammcmc::mcmc::{proposal_logprob, run_chains, truncation_dist, ChainParams, ChainTrace, ProposalKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

const SEED: u64 = 42;

struct Case {
    fixture: Fixture,
    target: ExactTarget,
    language: HashSet<String>,
    matrices: Vec<(ProposalKind, TransitionMatrix)>,
}

impl Case {
    fn matrix(&self, kind: ProposalKind) -> &TransitionMatrix {
        &self.matrices.iter().find(|(k, _)| *k == kind).unwrap().1
    }

    fn label(&self, kind: ProposalKind) -> String {
        format!("{}/{}", self.fixture.name, kind)
    }
}

/// Every generated sentence passes through here.
#[derive(Default)]
struct Audit {
    checked: AtomicU64,
    failed: AtomicU64,
}

impl Audit {
    fn check_fixture(&self, case: &Case, w: &Sequence) {
        let vocab = case.fixture.lm.vocabulary();
        let ok = w.is_terminated() && w.len() <= case.fixture.max_tokens && case.language.contains(&w.text(vocab));
        self.record(ok);
    }

    fn check_traces(&self, case: &Case, traces: &[ChainTrace]) {
        for t in traces {
            self.check_fixture(case, &t.states[0]);
            for s in &t.steps {
                if let Some(p) = &s.proposal {
                    self.check_fixture(case, p);
                }
            }
        }
    }

    fn record(&self, ok: bool) {
        self.checked.fetch_add(1, Ordering::Relaxed);
        if !ok {
            self.failed.fetch_add(1, Ordering::Relaxed);
        }
    }
}

struct Line {
    id: usize,
    title: &'static str,
    pass: bool,
    detail: String,
}

fn main() {
    let started = Instant::now();
    let audit = Audit::default();
    let mut lines = Vec::new();

    let build = Instant::now();
    let cases: Vec<Case> = fixtures::matrix()
        .into_iter()
        .map(|fixture| {
            let target = exact_target(&fixture.grammar, &fixture.lm, fixture.max_tokens).unwrap();
            let matrices = ProposalKind::ALL
                .iter()
                .map(|&k| (k, transition_matrix_for(&target, k, AcceptanceRule::MetropolisHastings).unwrap()))
                .collect();
            let longest = fixture.lm.vocabulary().tokens().iter().map(|t| t.chars().count()).max().unwrap();
            let language = fixture
                .grammar
                .enumerate_language(fixture.max_tokens * longest)
                .unwrap()
                .into_iter()
                .collect();
            Case {
                fixture,
                target,
                language,
                matrices,
            }
        })
        .collect();
    let build_time = build.elapsed();
    for c in &cases {
        eprintln!("  {}: {} states", c.fixture.name, c.target.len());
    }

    lines.push(criterion_1(&cases, build_time));
    lines.push(criterion_2(&cases));
    lines.push(criterion_3(&cases));
    lines.push(criterion_4(&cases, &audit));
    lines.push(criterion_5(&cases, &audit));
    lines.push(criterion_7(&cases));
    lines.push(criterion_8(&cases));
    lines.push(criterion_9(&cases, &audit));
    lines.push(criterion_10(&cases, &audit));
    lines.push(criterion_11(&audit));
    lines.push(criterion_6(&audit));
    lines.sort_by_key(|l| l.id);

    println!();
    for l in &lines {
        println!(
            "[{}] {:>2}. {}: {}",
            if l.pass { "PASS" } else { "FAIL" },
            l.id,
            l.title,
            l.detail
        );
    }
    let failed = lines.iter().filter(|l| !l.pass).count();
    println!(
        "\n{} passed, {} failed ({:.1}s)",
        lines.len() - failed,
        failed,
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}

fn criterion_1(cases: &[Case], build_time: Duration) -> Line {
    let start = Instant::now();
    let mut worst = (0.0f64, String::new());
    for c in cases {
        for (kind, t) in &c.matrices {
            let r = stationary_check(t, &c.target, 1e-10, 0).unwrap();
            if r.residual >= worst.0 {
                worst = (r.residual, c.label(*kind));
            }
        }
    }
    let total = build_time + start.elapsed();
    Line {
        id: 1,
        title: "exact stationarity",
        pass: worst.0 <= 1e-10 && total < Duration::from_secs(10),
        detail: format!(
            "max ||piT - pi||_1 = {:.2e} ({}) over {} chains, {:.2}s",
            worst.0,
            worst.1,
            cases.len() * 3,
            total.as_secs_f64()
        ),
    }
}

fn criterion_2(cases: &[Case]) -> Line {
    let mut failures = Vec::new();
    let mut worst_final = 0.0f64;
    let mut prefix = Vec::new();
    for c in cases {
        for (kind, t) in &c.matrices {
            let r = stationary_check(t, &c.target, 1e-10, 200).unwrap();
            worst_final = worst_final.max(r.final_tvd());
            if !r.is_monotone() || r.final_tvd() >= 1e-6 {
                failures.push(c.label(*kind));
            }
            if c.fixture.name == "g1/flat" && *kind == ProposalKind::Restart {
                prefix = r.tvd[..3].to_vec();
            }
        }
    }
    let expected = [0.1468, 0.0233, 0.0037];
    let prefix_ok = prefix.iter().zip(expected).all(|(a, b)| (a - b).abs() < 5e-5);
    Line {
        id: 2,
        title: "monotone convergence",
        pass: failures.is_empty() && prefix_ok,
        detail: format!(
            "max TVD(out_200, pi) = {:.2e}; g1/flat/restart begins ({:.4}, {:.4}, {:.4}); failing: {:?}",
            worst_final, prefix[0], prefix[1], prefix[2], failures
        ),
    }
}

fn criterion_3(cases: &[Case]) -> Line {
    let worst = cases
        .iter()
        .flat_map(|c| c.matrices.iter().map(move |(_, t)| detailed_balance_residual(t, &c.target)))
        .fold(0.0, f64::max);
    Line {
        id: 3,
        title: "detailed balance",
        pass: worst <= 1e-10,
        detail: format!("max |pi(x)p(y|x) - pi(y)p(x|y)| = {worst:.2e}"),
    }
}

fn seq(m: &dyn LanguageModel, text: &str) -> Sequence {
    let names: Vec<String> = text.chars().map(String::from).collect();
    Sequence::terminated(m.vocabulary().parse_tokens(&names).unwrap())
}

fn criterion_4(cases: &[Case], audit: &Audit) -> Line {
    let c = cases.iter().find(|c| c.fixture.name == "g1/flat").unwrap();
    let m = &*c.fixture.lm;
    let zz = c.target.index_of(&seq(m, "00")).unwrap();
    let gcd00 = c.target.gcd_distribution()[zz];
    let pg00 = c.target.probs()[zz];
    let mut pass = (gcd00 - 7.0 / 9.0).abs() < 1e-12 && (pg00 - 0.9245).abs() < 5e-5;
    let mut parts = vec![format!("P_gcd(00) = {gcd00:.4}, P^G(00) = {pg00:.4}")];

    let n = 10_000;
    for kind in ProposalKind::ALL {
        let params = ChainParams {
            kind,
            steps: 10,
            max_tokens: c.fixture.max_tokens,
            seed: SEED + 4,
        };
        let traces = run_chains(&params, n, m, &c.fixture.grammar).unwrap();
        audit.check_traces(c, &traces);
        let at = |k: usize| -> Vec<usize> { traces.iter().map(|t| c.target.index_of(&t.states[k]).unwrap()).collect() };
        let (s0, s10) = (at(0), at(10));
        let kl = |idx: &[usize]| {
            let mut counts = vec![0.0; c.target.len()];
            for &i in idx {
                counts[i] += 1.0;
            }
            counts
                .iter()
                .zip(c.target.probs())
                .filter(|(n, _)| **n > 0.0)
                .map(|(n, p)| {
                    let f = n / idx.len() as f64;
                    f * (f / p).ln()
                })
                .sum::<f64>()
        };
        let (kl0, kl10) = (kl(&s0), kl(&s10));
        // Paired bootstrap over chains, one-sided 99%.
        let mut rng = ChaCha8Rng::seed_from_u64(SEED);
        let mut diffs: Vec<f64> = (0..1000)
            .map(|_| {
                let pick: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
                let a: Vec<usize> = pick.iter().map(|&i| s0[i]).collect();
                let b: Vec<usize> = pick.iter().map(|&i| s10[i]).collect();
                kl(&a) - kl(&b)
            })
            .collect();
        diffs.sort_by(f64::total_cmp);
        let lower = diffs[10];
        pass &= lower > 0.0;
        parts.push(format!("{kind}: KL0 {kl0:.4} vs KL10 {kl10:.5} (1% diff {lower:.4})"));
    }
    Line {
        id: 4,
        title: "GCD distortion",
        pass,
        detail: parts.join("; "),
    }
}

fn criterion_5(cases: &[Case], audit: &Audit) -> Line {
    let n = 100_000;
    let mut worst = (0.0f64, String::new());
    let mut slowest = (Duration::ZERO, String::new());
    let mut failures = Vec::new();
    for (ci, c) in cases.iter().enumerate() {
        for (ki, &kind) in ProposalKind::ALL.iter().enumerate() {
            let start = Instant::now();
            let params = ChainParams {
                kind,
                steps: 10,
                max_tokens: c.fixture.max_tokens,
                seed: SEED + ((ci * 3 + ki) * n) as u64,
            };
            let traces = run_chains(&params, n, &c.fixture.lm, &c.fixture.grammar).unwrap();
            let elapsed = start.elapsed();
            audit.check_traces(c, &traces);
            let empirical = c.target.histogram(traces.iter().map(|t| t.sample())).unwrap();
            let exact = k_step_distribution(c.matrix(kind), c.target.gcd_distribution(), 10);
            let d = tvd(&empirical, &exact);
            let label = c.label(kind);
            if d > 0.01 || elapsed > Duration::from_secs(120) {
                failures.push(format!("{label} ({d:.4}, {:.1}s)", elapsed.as_secs_f64()));
            }
            if d >= worst.0 {
                worst = (d, label.clone());
            }
            if elapsed >= slowest.0 {
                slowest = (elapsed, label);
            }
        }
    }
    Line {
        id: 5,
        title: "sampler/oracle agreement",
        pass: failures.is_empty(),
        detail: format!(
            "max TVD {:.4} ({}); slowest {:.1}s ({}); failing: {:?}",
            worst.0,
            worst.1,
            slowest.0.as_secs_f64(),
            slowest.1,
            failures
        ),
    }
}

fn criterion_6(audit: &Audit) -> Line {
    let checked = audit.checked.load(Ordering::Relaxed);
    let failed = audit.failed.load(Ordering::Relaxed);
    Line {
        id: 6,
        title: "constraint satisfaction",
        pass: failed == 0 && checked >= 1_000_000,
        detail: format!("{failed} of {checked} generated sequences failed re-parsing"),
    }
}

/// Mass of constrained decoding from `prefix`, split into sentences within
/// the cap and draws that run past it. Walks the whole decoding tree.
fn decode_tree_mass(
    m: &dyn LanguageModel,
    state: &RecognizerState<'_>,
    prefix: &mut Vec<TokenId>,
    max_tokens: usize,
    memo: &mut HashMap<Vec<TokenId>, (f64, f64)>,
) -> (f64, f64) {
    if let Some(&v) = memo.get(prefix.as_slice()) {
        return v;
    }
    let vocab = m.vocabulary();
    let step = masked_step(m, state, &Sequence::prefix(prefix.clone())).unwrap();
    let mut inside = step.dist.eos();
    let mut over = 0.0;
    for t in vocab.ids() {
        let p = step.dist.token(t);
        if !step.mask[t.index()] || p == 0.0 {
            continue;
        }
        if prefix.len() >= max_tokens {
            over += p;
            continue;
        }
        let next = state.advance_str(vocab.token(t)).unwrap();
        prefix.push(t);
        let (a, b) = decode_tree_mass(m, &next, prefix, max_tokens, memo);
        prefix.pop();
        inside += p * a;
        over += p * b;
    }
    memo.insert(prefix.clone(), (inside, over));
    (inside, over)
}

fn criterion_7(cases: &[Case]) -> Line {
    let mut worst_total = 0.0f64;
    let mut worst_consistency = 0.0f64;
    for c in cases {
        let m = &*c.fixture.lm;
        let vocab = m.vocabulary();
        let mut memo = HashMap::new();
        for kind in ProposalKind::ALL {
            let cached = proposal_mass(&c.target, kind);
            for (xi, x) in c.target.support().iter().enumerate() {
                let trunc = truncation_dist(kind, x, m).unwrap();
                let (mut inside, mut over) = (0.0, 0.0);
                for (i, &p) in trunc.probs().iter().enumerate() {
                    if p == 0.0 {
                        continue;
                    }
                    let mut prefix = x.tokens()[..i].to_vec();
                    let state = c.fixture.grammar.recognizer().unwrap().advance_str(&vocab.text(&prefix)).unwrap();
                    let (a, b) = decode_tree_mass(m, &state, &mut prefix, c.fixture.max_tokens, &mut memo);
                    inside += p * a;
                    over += p * b;
                }
                worst_total = worst_total.max((inside + over - 1.0).abs());
                worst_consistency = worst_consistency.max((inside - cached[xi]).abs());
            }
        }
    }
    let c = cases.iter().find(|c| c.fixture.name == "g1/flat").unwrap();
    let m = &*c.fixture.lm;
    let q = |x: &str, y: &str| {
        proposal_logprob(&seq(m, x), &seq(m, y), ProposalKind::Uniform, m, &c.fixture.grammar)
            .unwrap()
            .exp()
    };
    let (q1, q2) = (q("00", "11"), q("00", "00"));
    let pass = worst_total <= 1e-9
        && worst_consistency <= 1e-9
        && (q1 - 2.0 / 27.0).abs() < 1e-12
        && (q2 - 25.0 / 27.0).abs() < 1e-12;
    Line {
        id: 7,
        title: "proposal-density correctness",
        pass,
        detail: format!(
            "max |sum_y q(y|x) - 1| = {worst_total:.2e}, in-cap mass vs density {worst_consistency:.2e}; q(11|00) = {q1:.6}, q(00|00) = {q2:.6}"
        ),
    }
}

fn criterion_8(cases: &[Case]) -> Line {
    let mut worst = 0.0f64;
    let mut checked = 0;
    for c in cases.iter().filter(|c| c.fixture.name.ends_with("/flat")) {
        let m = &*c.fixture.lm;
        for x in c.target.support() {
            let u = truncation_dist(ProposalKind::Uniform, x, m).unwrap();
            let p = truncation_dist(ProposalKind::Priority, x, m).unwrap();
            for (a, b) in u.probs().iter().zip(p.probs()) {
                worst = worst.max((a - b).abs());
                checked += 1;
            }
        }
    }
    let g1 = cases.iter().find(|c| c.fixture.name == "g1/flat").unwrap();
    let ppl = step_perplexity(&g1.fixture.lm.next_dist(&[]).unwrap());
    Line {
        id: 8,
        title: "priority degeneracy",
        pass: worst <= 1e-12 && (ppl - 2.2296).abs() < 5e-5,
        detail: format!("max |priority - uniform| = {worst:.2e} over {checked} positions; M1 perplexity {ppl:.4}"),
    }
}

fn criterion_9(cases: &[Case], audit: &Audit) -> Line {
    let (runs, per_run, ks) = (100usize, 100usize, [1usize, 2, 5, 10]);
    let mut failures = Vec::new();
    let mut table = Vec::new();
    for c in cases {
        for kind in ProposalKind::ALL {
            let per_run_traces: Vec<Vec<ChainTrace>> = (0..runs)
                .into_par_iter()
                .map(|r| {
                    let params = ChainParams {
                        kind,
                        steps: 10,
                        max_tokens: c.fixture.max_tokens,
                        seed: SEED + (r * per_run) as u64,
                    };
                    run_chains(&params, per_run, &c.fixture.lm, &c.fixture.grammar).unwrap()
                })
                .collect();
            let mut by_k = BTreeMap::new();
            for &k in &ks {
                by_k.insert(
                    k,
                    per_run_traces
                        .iter()
                        .map(|traces| traces.iter().map(|t| t.states[k].clone()).collect::<Vec<_>>())
                        .collect::<Vec<_>>(),
                );
            }
            for traces in &per_run_traces {
                audit.check_traces(c, traces);
            }
            let report = kl_convergence_report(&by_k, &c.fixture.lm, Some(&c.target), BootstrapConfig {
                seed: SEED,
                ..BootstrapConfig::default()
            })
            .unwrap();
            let means: Vec<f64> = report.rows.iter().map(|r| r.to_target.unwrap().mean).collect();
            let k1 = report.row(1).unwrap().to_target.unwrap().mean;
            let ci10 = report.row(10).unwrap().to_target.unwrap();
            let decreasing = report.strictly_decreasing(true);
            let excluded = k1 > ci10.high || k1 < ci10.low;
            let label = c.label(kind);
            if !decreasing || !excluded {
                failures.push(label.clone());
            }
            table.push(format!(
                "    {label:<20} {}  ci10 [{:.5}, {:.5}]{}",
                means.iter().map(|m| format!("{m:.5}")).collect::<Vec<_>>().join(" "),
                ci10.low,
                ci10.high,
                if decreasing && excluded { "" } else { "  <-" }
            ));
        }
    }
    eprintln!("  mean KL-to-target at k = 1, 2, 5, 10:\n{}", table.join("\n"));
    Line {
        id: 9,
        title: "KL trend",
        pass: failures.is_empty(),
        detail: format!(
            "{} of {} fixture/kind pairs strictly decreasing with k=10 CI excluding the k=1 mean; failing: {:?}",
            table.len() - failures.len(),
            table.len(),
            failures
        ),
    }
}

fn criterion_10(cases: &[Case], audit: &Audit) -> Line {
    let c = cases.iter().find(|c| c.fixture.name == "g1/flat").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let attempts = 10_000;
    let mut accepted = 0;
    for _ in 0..attempts {
        if let Some(w) = rejection_attempt(&c.fixture.lm, &c.fixture.grammar, &mut rng, c.fixture.max_tokens).unwrap() {
            audit.check_fixture(c, &w);
            accepted += 1;
        }
    }
    let rate = accepted as f64 / attempts as f64;
    Line {
        id: 10,
        title: "rejection-sampling telemetry",
        pass: (rate - 0.053).abs() <= 0.007,
        detail: format!("acceptance rate {rate:.4} over {attempts} attempts"),
    }
}

/// Recursive-descent check of the bundled XML-style grammar.
fn xml_ok(s: &str) -> bool {
    fn digits(s: &str) -> Option<&str> {
        let b = s.as_bytes();
        if b.first().is_some_and(|c| (b'1'..=b'9').contains(c)) {
            let n = if b.get(1).is_some_and(u8::is_ascii_digit) { 2 } else { 1 };
            Some(&s[n..])
        } else {
            None
        }
    }
    fn word(s: &str) -> Option<&str> {
        let n = s.bytes().take_while(u8::is_ascii_lowercase).count();
        (n > 0).then(|| &s[n..])
    }
    fn text(s: &str) -> Option<&str> {
        let mut rest = word(s)?;
        while let Some(r) = rest.strip_prefix(' ') {
            rest = word(r)?;
        }
        Some(rest)
    }
    fn items<'a>(mut s: &'a str, close: &str) -> Option<&'a str> {
        let mut count = 0;
        loop {
            if let Some(r) = s.strip_prefix(close) {
                return (count > 0).then_some(r);
            }
            s = item(s)?;
            count += 1;
        }
    }
    fn item(s: &str) -> Option<&str> {
        if let Some(r) = s.strip_prefix("<item id=\"") {
            let r = digits(r)?.strip_prefix("\">")?;
            text(r)?.strip_prefix("</item>")
        } else if let Some(r) = s.strip_prefix("<group id=\"") {
            items(digits(r)?.strip_prefix("\">")?, "</group>")
        } else if let Some(r) = s.strip_prefix("<empty id=\"") {
            digits(r)?.strip_prefix("\"/>")
        } else {
            None
        }
    }
    s.strip_prefix("<root>")
        .and_then(|r| items(r, "</root>"))
        .is_some_and(str::is_empty)
}

fn criterion_11(audit: &Audit) -> Line {
    let dir = tempfile::tempdir().unwrap();
    let grammar = dir.path().join("xml.ebnf");
    let corpus = dir.path().join("xml_corpus.txt");
    std::fs::write(&grammar, fixtures::XML).unwrap();
    std::fs::write(&corpus, fixtures::XML_CORPUS).unwrap();
    let run = |out: &Path| {
        Command::new(env!("CARGO_BIN_EXE_grammcmc"))
            .arg("corpus")
            .arg("--grammar")
            .arg(&grammar)
            .arg("--ngram")
            .arg(&corpus)
            .args(["--order", "2", "--alpha", "0.1", "--method", "mcmc-restart", "--k", "10"])
            .args(["--max-tokens", "64", "--count", "100", "--seed", "42", "--ext", "xml"])
            .arg("--out")
            .arg(out)
            .output()
            .unwrap()
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let (ra, rb) = (run(&a), run(&b));
    if !ra.status.success() || !rb.status.success() {
        return Line {
            id: 11,
            title: "end-to-end corpus",
            pass: false,
            detail: format!("corpus command failed: {}", String::from_utf8_lossy(&ra.stderr)),
        };
    }
    let read = |d: &Path| -> BTreeMap<String, Vec<u8>> {
        std::fs::read_dir(d)
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
            })
            .collect()
    };
    let (fa, fb) = (read(&a), read(&b));
    let g = Grammar::parse(fixtures::XML).unwrap();
    let mut bad = 0;
    for body in fa.values() {
        let text = String::from_utf8_lossy(body);
        let ok = xml_ok(&text) && g.accepts(&text);
        audit.record(ok);
        bad += usize::from(!ok);
    }
    let identical = fa == fb;
    Line {
        id: 11,
        title: "end-to-end corpus",
        pass: fa.len() == 100 && bad == 0 && identical,
        detail: format!("{} files, {bad} failed re-parsing, rerun byte-identical: {identical}", fa.len()),
    }
}
