use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use grammcmc::fixtures;
use grammcmc::grammar::{unescape, Grammar};
use tempfile::TempDir;

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        for (name, body) in [
            ("g1.ebnf", fixtures::G1),
            ("g1_flat.json", fixtures::G1_FLAT),
            ("gexpr.ebnf", fixtures::G_EXPR),
            ("gexpr_corpus.txt", fixtures::G_EXPR_CORPUS),
            ("single.ebnf", "s ::= \"0\"\n"),
        ] {
            fs::write(dir.path().join(name), body).unwrap();
        }
        Workspace { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        self.run_env(args, &[])
    }

    fn run_env(&self, args: &[&str], env: &[(&str, &str)]) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_grammcmc"));
        cmd.current_dir(self.dir.path()).args(args);
        for (k, _) in std::env::vars().filter(|(k, _)| k.starts_with("GRAMMCMC_")) {
            cmd.env_remove(k);
        }
        for (k, v) in env {
            cmd.env(k, v);
        }
        cmd.output().unwrap()
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().map(String::from).collect()
}

#[test]
fn gcd_samples_all_parse() {
    let ws = Workspace::new();
    let o = ws.run(&["sample", "--grammar", "gexpr.ebnf", "--ngram", "gexpr_corpus.txt", "-n", "100", "--max-tokens", "16", "--out", "run"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let g = Grammar::parse(fixtures::G_EXPR).unwrap();
    let samples = lines(&ws.path("run/samples.txt"));
    assert_eq!(samples.len(), 100);
    for s in &samples {
        assert!(g.accepts(&unescape(s).unwrap()), "{s}");
    }
    assert_eq!(lines(&ws.path("run/traces.jsonl")).len(), 100);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(ws.path("run/run.json")).unwrap()).unwrap();
    assert_eq!(manifest["method"], "gcd");
    assert_eq!(manifest["seed"], 42);
}

#[test]
fn mcmc_runs_are_byte_identical() {
    let ws = Workspace::new();
    let args = |out: &'static str| {
        vec!["sample", "--grammar", "g1.ebnf", "--table", "g1_flat.json", "--method", "mcmc-restart", "--k", "10", "-n", "20", "--out", out]
    };
    assert_eq!(code(&ws.run(&args("a"))), 0);
    assert_eq!(code(&ws.run(&[args("b"), vec!["--jobs", "1"]].concat())), 0);
    for f in ["samples.txt", "traces.jsonl"] {
        assert_eq!(fs::read(ws.path("a").join(f)).unwrap(), fs::read(ws.path("b").join(f)).unwrap());
    }
    assert_eq!(lines(&ws.path("a/traces.jsonl")).len(), 20 * 11);
}

#[test]
fn k_is_required_for_mcmc_and_rejected_otherwise() {
    let ws = Workspace::new();
    let o = ws.run(&["sample", "--grammar", "g1.ebnf", "--table", "g1_flat.json", "--method", "mcmc-uniform", "--out", "r"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("--k"));
    let o = ws.run(&["sample", "--grammar", "g1.ebnf", "--table", "g1_flat.json", "--k", "3", "--out", "r"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn configuration_errors_exit_1() {
    let ws = Workspace::new();
    assert_eq!(code(&ws.run(&["sample", "--table", "g1_flat.json", "--out", "r"])), 1);
    assert_eq!(code(&ws.run(&["sample", "--grammar", "g1.ebnf", "--out", "r"])), 1);
    assert_eq!(code(&ws.run(&["sample", "--grammar", "missing.ebnf", "--uniform", "--out", "r"])), 1);
    assert_eq!(code(&ws.run(&["sample", "--method", "beam"])), 1);
    fs::write(ws.path("bad.ebnf"), "root ::= \"0").unwrap();
    let o = ws.run(&["sample", "--grammar", "bad.ebnf", "--uniform", "--out", "r"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 1"));
}

#[test]
fn rejection_exhaustion_flags_partial_output() {
    let ws = Workspace::new();
    let o = ws.run(&[
        "sample", "--grammar", "g1.ebnf", "--table", "g1_flat.json", "--method", "rejection", "--max-attempts", "5", "-n", "40", "--out", "rej",
    ]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("partial"));
    let traces = lines(&ws.path("rej/traces.jsonl"));
    assert_eq!(traces.len(), 40);
    let exhausted = traces.iter().filter(|l| l.contains("\"exhausted\":true")).count();
    assert!(exhausted > 0 && exhausted < 40);
    assert_eq!(lines(&ws.path("rej/samples.txt")).len(), 40 - exhausted);
}

#[test]
fn flags_beat_environment_beat_config() {
    let ws = Workspace::new();
    fs::write(ws.path("run.conf"), "grammar = g1.ebnf\ntable = g1_flat.json\nseed = 1\nn_samples = 3\nout = from-config\n").unwrap();
    let manifest = |dir: &str| -> serde_json::Value {
        serde_json::from_str(&fs::read_to_string(ws.path(dir).join("run.json")).unwrap()).unwrap()
    };

    assert_eq!(code(&ws.run(&["sample", "--config", "run.conf"])), 0);
    assert_eq!(manifest("from-config")["seed"], 1);
    assert_eq!(manifest("from-config")["n_samples"], 3);

    let env = [("GRAMMCMC_SEED", "2"), ("GRAMMCMC_OUT", "from-env")];
    assert_eq!(code(&ws.run_env(&["sample", "--config", "run.conf"], &env)), 0);
    assert_eq!(manifest("from-env")["seed"], 2);

    assert_eq!(code(&ws.run_env(&["sample", "--config", "run.conf", "--seed", "3", "--out", "from-flag"], &env)), 0);
    assert_eq!(manifest("from-flag")["seed"], 3);

    fs::write(ws.path("typo.conf"), "sede = 4\n").unwrap();
    assert_eq!(code(&ws.run(&["sample", "--config", "typo.conf"])), 1);
}

#[test]
fn oracle_passes_fixtures_and_catches_a_broken_chain() {
    let ws = Workspace::new();
    let o = ws.run(&["oracle", "--fixtures"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    assert_eq!(String::from_utf8_lossy(&o.stdout).matches("[PASS]").count(), 18);

    let o = ws.run(&["oracle", "--grammar", "g1.ebnf", "--table", "g1_flat.json", "--debug-ignore-reverse"]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stdout).contains("[FAIL]"));

    assert_eq!(code(&ws.run(&["oracle", "--grammar", "single.ebnf", "--table", "g1_flat.json"])), 0);
}

#[test]
fn oracle_reports_budget_overflow() {
    let ws = Workspace::new();
    let o = ws.run(&["oracle", "--grammar", "gexpr.ebnf", "--ngram", "gexpr_corpus.txt", "--max-tokens", "40"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("100000"));
}

#[test]
fn eval_groups_runs_by_method_and_k() {
    let ws = Workspace::new();
    let base = ["--grammar", "g1.ebnf", "--table", "g1_flat.json", "-n", "30"];
    let mut made = Vec::new();
    for run in 0..3u64 {
        let seed = (1000 * run).to_string();
        for (method, k) in [("gcd", None), ("mcmc-restart", Some("1")), ("mcmc-restart", Some("4"))] {
            let out = format!("runs/{method}-{}-{run}", k.unwrap_or("0"));
            let mut args = vec!["sample", "--method", method, "--seed", &seed, "--out", &out];
            args.extend(base);
            if let Some(k) = k {
                args.extend(["--k", k]);
            }
            assert_eq!(code(&ws.run(&args)), 0);
            made.push(out);
        }
    }
    let o = ws.run(&["eval", "runs", "--exact", "--out", "report.csv"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = lines(&ws.path("report.csv"));
    assert_eq!(csv[0], "benchmark,method,kind,k,metric,value,ci_low,ci_high,n_runs");
    // gcd at k = 0 plus restart at k = 1 and 4, each with two metrics.
    assert_eq!(csv.len(), 1 + 3 * 2);
    assert!(csv.iter().any(|l| l.starts_with("g1,mcmc-restart,restart,4,kl_target,") && l.ends_with(",3")));
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(stderr.contains("geomean KL ratio gcd/mcmc-restart"));

    let o = ws.run(&["eval", "runs", "--per-step"]);
    assert_eq!(code(&o), 0);
    let stdout = String::from_utf8_lossy(&o.stdout);
    // Per-step restart rows: k = 0..=4, with k = 0, 1 fed by all six runs.
    assert!(stdout.contains("g1,mcmc-restart,restart,0,kl_lm,"));
    assert!(stdout.lines().any(|l| l.starts_with("g1,mcmc-restart,restart,1,kl_lm,") && l.ends_with(",6")));

    fs::create_dir(ws.path("empty")).unwrap();
    assert_eq!(code(&ws.run(&["eval", "empty"])), 1);
}

#[test]
fn corpus_writes_distinct_numbered_seeds() {
    let ws = Workspace::new();
    let o = ws.run(&["corpus", "--grammar", "g1.ebnf", "--table", "g1_flat.json", "--count", "2", "--ext", ".test", "--out", "seeds"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let mut names: Vec<String> = fs::read_dir(ws.path("seeds"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(names, ["seed-0001.test", "seed-0002.test"]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("kept 2, dropped"));

    // G1 has only two sentences.
    let o = ws.run(&["corpus", "--grammar", "g1.ebnf", "--table", "g1_flat.json", "--count", "3", "--out", "more"]);
    assert_eq!(code(&o), 2);
    assert_eq!(fs::read_dir(ws.path("more")).unwrap().count(), 2);

    let o = ws.run(&["corpus", "--grammar", "g1.ebnf", "--table", "g1_flat.json", "--count", "0", "--out", "none"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stderr).contains("warning"));
    assert_eq!(fs::read_dir(ws.path("none")).unwrap().count(), 0);
}
