//! Fuzzing seeds from the XML-style grammar, written to a directory.

use std::collections::BTreeSet;
use std::path::PathBuf;

use grammcmc::fixtures;
use grammcmc::lm::LanguageModel;
use grammcmc::mcmc::{run_chains, ChainParams, ProposalKind};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("grammcmc-seeds"));
    let g = fixtures::xml_grammar();
    let m = fixtures::xml_lm();
    let params = ChainParams {
        kind: ProposalKind::Restart,
        steps: 5,
        max_tokens: fixtures::XML_MAX_TOKENS,
        seed: 42,
    };
    let traces = run_chains(&params, 20, &m, &g)?;

    std::fs::create_dir_all(&out)?;
    let mut seen = BTreeSet::new();
    for t in &traces {
        let text = t.sample().text(m.vocabulary());
        if seen.insert(text.clone()) {
            std::fs::write(out.join(format!("seed-{:04}.xml", seen.len())), &text)?;
            println!("{text}");
        }
    }
    println!("\n{} distinct seeds in {}", seen.len(), out.display());
    Ok(())
}
