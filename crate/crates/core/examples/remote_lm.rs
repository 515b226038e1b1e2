//! Constrained decoding against a model served over HTTP.
//!
//! Starts a tiny in-process server that answers with a fixed distribution,
//! or pass a base URL to use a real one:
//!
//! ```text
//! cargo run --example remote_lm -- http://localhost:8000
//! ```

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;

use grammcmc::fixtures;
use grammcmc::gcd::gcd_sample;
use grammcmc::grammar::Grammar;
use grammcmc::lm::{LanguageModel, RemoteLm, Sequence, Vocabulary};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn local_server() -> std::io::Result<String> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let url = format!("http://{}", listener.local_addr()?);
    std::thread::spawn(move || {
        for mut stream in listener.incoming().flatten() {
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut length = 0;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap_or(0);
                }
            }
            let mut body = vec![0; length];
            let _ = reader.read_exact(&mut body);
            let reply = r#"{"probs": {"0": 0.7, "1": 0.2, "<eos>": 0.1}}"#;
            let _ = write!(
                stream,
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                reply.len()
            );
        }
    });
    Ok(url)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let url = match std::env::args().nth(1) {
        Some(url) => url,
        None => local_server()?,
    };
    let g = Grammar::parse(fixtures::G1)?;
    let m = RemoteLm::new(Vocabulary::new(["0", "1"])?, &url);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..5 {
        let s = gcd_sample(&m, &g, &Sequence::prefix(vec![]), &mut rng, 8)?;
        println!("{}  log P = {:.4}", s.sequence.text(m.vocabulary()), s.lm_logprob);
    }
    Ok(())
}
