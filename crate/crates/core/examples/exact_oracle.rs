//! Exact target, transition matrices and convergence for every bundled
//! fixture.

use grammcmc::eval::{detailed_balance_residual, exact_target, stationary_check, transition_matrix_for, AcceptanceRule};
use grammcmc::fixtures;
use grammcmc::mcmc::ProposalKind;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for f in fixtures::matrix() {
        let target = exact_target(&f.grammar, &f.lm, f.max_tokens)?;
        println!("{} ({} sentences, C = {:.4e})", f.name, target.len(), target.normalizer());
        for kind in ProposalKind::ALL {
            let t = transition_matrix_for(&target, kind, AcceptanceRule::MetropolisHastings)?;
            let r = stationary_check(&t, &target, 1e-10, 200)?;
            let tvd: Vec<String> = r.tvd.iter().take(4).map(|v| format!("{v:.4}")).collect();
            println!(
                "  {kind:<8} |piT - pi|_1 {:.1e}  balance {:.1e}  TVD {} .. {:.1e}",
                r.residual,
                detailed_balance_residual(&t, &target),
                tvd.join(" "),
                r.final_tvd()
            );
        }
    }

    let f = fixtures::fixture("g1/flat").unwrap();
    let target = exact_target(&f.grammar, &f.lm, f.max_tokens)?;
    let broken = transition_matrix_for(&target, ProposalKind::Uniform, AcceptanceRule::IgnoreReverseProposal)?;
    let r = stationary_check(&broken, &target, 1e-10, 50)?;
    println!("\nwithout the reverse proposal term: |piT - pi|_1 = {:.3e}", r.residual);
    Ok(())
}
