//! The bundled model types: a JSON table, an add-α n-gram and the uniform
//! baseline.

use grammcmc::fixtures;
use grammcmc::lm::{lm_logprob, step_perplexity, LanguageModel, NgramLm, Sequence, TableLm, UniformLm};

fn show(name: &str, m: &dyn LanguageModel, text: &[&str]) -> Result<(), Box<dyn std::error::Error>> {
    let vocab = m.vocabulary();
    let w = Sequence::terminated(vocab.parse_tokens(text)?);
    let d = m.next_dist(&[])?;
    println!(
        "{name:<8} P(first token) = {:?}  perplexity {:.4}  log P({}) = {:.4}",
        d.probs(),
        step_perplexity(&d),
        w.display(vocab),
        lm_logprob(m, &w)?
    );
    Ok(())
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let table = TableLm::from_json(fixtures::G1_FLAT)?;
    show("table", &table, &["0", "0"])?;

    let bigram = NgramLm::train_text_with_vocab(table.vocabulary().clone(), fixtures::G1_CORPUS, 2, 1.0)?;
    show("bigram", &bigram, &["0", "0"])?;

    let uniform = UniformLm::new(table.vocabulary().clone());
    show("uniform", &uniform, &["0", "0"])?;

    println!("\ntable round trip:\n{}", table.to_json());
    Ok(())
}
