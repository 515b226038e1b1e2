//! Grammar-constrained decoding next to rejection sampling on the two-word
//! language `{00, 11}`.

use std::collections::BTreeMap;

use grammcmc::fixtures;
use grammcmc::gcd::{gcd_sample, masked_step, rejection_sample};
use grammcmc::grammar::Grammar;
use grammcmc::lm::{LanguageModel, Sequence, TableLm};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let g = Grammar::parse(fixtures::G1)?;
    let m = TableLm::from_json(fixtures::G1_FLAT)?;
    let vocab = m.vocabulary();

    let one = Sequence::prefix(vocab.parse_tokens(&["1"])?);
    let state = g.recognizer()?.advance_str("1")?;
    let step = masked_step(&m, &state, &one)?;
    println!("after \"1\": mask {:?}, masked distribution {:?}", step.mask, step.dist.probs());

    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut counts = BTreeMap::new();
    for _ in 0..10_000 {
        let s = gcd_sample(&m, &g, &Sequence::prefix(vec![]), &mut rng, 8)?;
        *counts.entry(s.sequence.text(vocab)).or_insert(0) += 1;
    }
    println!("constrained decoding over 10000 draws: {counts:?} (expect 00 near 7/9)");

    let (mut attempts, mut counts) = (0, BTreeMap::new());
    for _ in 0..1_000 {
        let r = rejection_sample(&m, &g, &mut rng, 10_000, 8)?;
        attempts += r.attempts;
        *counts.entry(r.sequence.text(vocab)).or_insert(0) += 1;
    }
    println!(
        "rejection over 1000 samples: {counts:?}, acceptance rate {:.4} (expect 00 near 0.9245)",
        1000.0 / attempts as f64
    );
    Ok(())
}
