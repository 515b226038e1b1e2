//! Mean empirical KL per step count with bootstrap intervals, as CSV.

use std::collections::BTreeMap;

use grammcmc::eval::{exact_target, kl_convergence_report, BootstrapConfig, CSV_HEADER};
use grammcmc::fixtures;
use grammcmc::mcmc::{run_chains, ChainParams, ProposalKind};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let f = fixtures::fixture("gexpr/flat").unwrap();
    let target = exact_target(&f.grammar, &f.lm, f.max_tokens)?;
    let (runs, per_run, ks) = (30, 100, [0, 1, 2, 5, 10]);

    print!("{CSV_HEADER}\n");
    for kind in ProposalKind::ALL {
        let mut by_k: BTreeMap<usize, Vec<_>> = BTreeMap::new();
        for r in 0..runs {
            let params = ChainParams {
                kind,
                steps: 10,
                max_tokens: f.max_tokens,
                seed: (r * per_run) as u64,
            };
            let traces = run_chains(&params, per_run, &f.lm, &f.grammar)?;
            for k in ks {
                by_k.entry(k)
                    .or_default()
                    .push(traces.iter().map(|t| t.states[k].clone()).collect());
            }
        }
        let report = kl_convergence_report(&by_k, &f.lm, Some(&target), BootstrapConfig::default())?;
        print!("{}", report.csv_rows("gexpr", &format!("mcmc-{kind}"), kind.name()));
    }
    Ok(())
}
