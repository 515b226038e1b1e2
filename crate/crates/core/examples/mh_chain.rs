//! One Metropolis-Hastings chain per proposal kind, printed step by step.

use grammcmc::fixtures;
use grammcmc::grammar::Grammar;
use grammcmc::lm::{LanguageModel, NgramLm, TableLm};
use grammcmc::mcmc::{run_chain, ChainParams, ProposalKind};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let g = Grammar::parse(fixtures::G_EXPR)?;
    let vocab = TableLm::from_json(fixtures::G_EXPR_FLAT)?.vocabulary().clone();
    let m = NgramLm::train_text_with_vocab(vocab, fixtures::G_EXPR_CORPUS, 2, 1.0)?;

    for kind in ProposalKind::ALL {
        let params = ChainParams {
            kind,
            steps: 6,
            max_tokens: 6,
            seed: 7,
        };
        let trace = run_chain(&params, &m, &g)?;
        println!("{kind}: start {}", trace.states[0].display(m.vocabulary()));
        for (i, step) in trace.steps.iter().enumerate() {
            match &step.proposal {
                Some(y) => println!(
                    "  step {}: cut at {}, propose {:<16} alpha {:.3} {}",
                    i + 1,
                    step.position,
                    y.display(m.vocabulary()).to_string(),
                    step.alpha,
                    if step.accepted { "accept" } else { "reject" }
                ),
                None => println!("  step {}: proposal exceeded the token cap", i + 1),
            }
        }
        println!("  sample {}\n", trace.sample().display(m.vocabulary()));
    }
    Ok(())
}
