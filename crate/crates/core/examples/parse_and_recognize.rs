//! Compile an EBNF grammar, walk the incremental recognizer, and enumerate
//! the bounded language.

use grammcmc::grammar::Grammar;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let g = Grammar::parse(
        r#"
        # balanced parentheses
        expr ::= "" | "(" expr ")" expr
        "#,
    )?;
    println!("compiled BNF:\n{g}");

    let mut state = g.recognizer()?;
    for c in "(()".chars() {
        state = state.advance(c)?;
        println!(
            "after {:?}: complete={} allowed={:?}",
            c,
            state.is_complete(),
            state.allowed_chars()
        );
    }
    println!("\")(\" is a prefix: {}", g.accepts_prefix(")("));

    let words = g.enumerate_language(6)?;
    println!("{} sentences with at most 6 characters:", words.len());
    for w in &words {
        println!("  {w:?}");
    }
    Ok(())
}
