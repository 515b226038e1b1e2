use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{LanguageModel, LmError, NextTokenDist, TokenId, Vocabulary};

pub const DEFAULT_REMOTE_TIMEOUT: Duration = Duration::from_secs(2);

/// Mass drift accepted from a server before renormalization.
const WIRE_TOLERANCE: f64 = 1e-6;

#[derive(Serialize)]
struct NextDistRequest<'a> {
    prefix: Vec<&'a str>,
}

#[derive(Deserialize)]
struct NextDistResponse {
    probs: BTreeMap<String, f64>,
}

/// Client for a model served over HTTP.
///
/// `POST {endpoint}/v1/next_dist` with `{"prefix": [tok, ...]}`; the server
/// answers `{"probs": {tok: p, ..., "<eos>": p}}` covering the whole
/// vocabulary.
#[derive(Debug, Clone)]
pub struct RemoteLm {
    vocab: Vocabulary,
    url: String,
    agent: ureq::Agent,
}

impl RemoteLm {
    pub fn new(vocab: Vocabulary, endpoint: &str) -> Self {
        Self::with_timeout(vocab, endpoint, DEFAULT_REMOTE_TIMEOUT)
    }

    pub fn with_timeout(vocab: Vocabulary, endpoint: &str, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        RemoteLm {
            vocab,
            url: format!("{}/v1/next_dist", endpoint.trim_end_matches('/')),
            agent,
        }
    }

    pub fn url(&self) -> &str {
        &self.url
    }
}

/// Validates a wire response against the vocabulary and renormalizes it.
pub(crate) fn decode_probs(
    vocab: &Vocabulary,
    probs: &BTreeMap<String, f64>,
) -> Result<NextTokenDist, LmError> {
    let mut out = vec![f64::NAN; vocab.outcomes()];
    for (name, &p) in probs {
        let slot = vocab
            .outcome_index(name)
            .map_err(|_| LmError::ProtocolViolation(format!("unknown token {name:?} in response")))?;
        if !p.is_finite() || p < 0.0 {
            return Err(LmError::ProtocolViolation(format!("probability {p} for {name:?}")));
        }
        out[slot] = p;
    }
    if let Some(missing) = out.iter().position(|p| p.is_nan()) {
        return Err(LmError::ProtocolViolation(format!(
            "response has no entry for {:?}",
            vocab.outcome_name(missing)
        )));
    }
    let total: f64 = out.iter().sum();
    if (total - 1.0).abs() > WIRE_TOLERANCE {
        return Err(LmError::ProtocolViolation(format!("probabilities sum to {total}")));
    }
    NextTokenDist::from_weights(out)
}

impl LanguageModel for RemoteLm {
    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn next_dist(&self, prefix: &[TokenId]) -> Result<NextTokenDist, LmError> {
        let request = NextDistRequest {
            prefix: prefix.iter().map(|&t| self.vocab.token(t)).collect(),
        };
        let mut response = self
            .agent
            .post(&self.url)
            .send_json(&request)
            .map_err(map_error)?;
        let body: NextDistResponse = response
            .body_mut()
            .read_json()
            .map_err(|e| match e {
                ureq::Error::Timeout(_) => LmError::Timeout,
                other => LmError::ProtocolViolation(other.to_string()),
            })?;
        decode_probs(&self.vocab, &body.probs)
    }
}

fn map_error(e: ureq::Error) -> LmError {
    match e {
        ureq::Error::Timeout(_) => LmError::Timeout,
        ureq::Error::StatusCode(code) => LmError::ProtocolViolation(format!("HTTP status {code}")),
        other => LmError::Transport(other.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::EOS;

    fn vocab() -> Vocabulary {
        Vocabulary::new(["0", "1"]).unwrap()
    }

    fn probs(entries: &[(&str, f64)]) -> BTreeMap<String, f64> {
        entries.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn decodes_complete_response() {
        let d = decode_probs(&vocab(), &probs(&[("0", 0.7), ("1", 0.2), (EOS, 0.1)])).unwrap();
        for (got, want) in d.probs().iter().zip([0.7, 0.2, 0.1]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn missing_entry_is_a_protocol_violation() {
        let err = decode_probs(&vocab(), &probs(&[("0", 0.9), (EOS, 0.1)])).unwrap_err();
        assert!(matches!(err, LmError::ProtocolViolation(ref m) if m.contains("\"1\"")));
    }

    #[test]
    fn small_drift_is_renormalized() {
        let d = decode_probs(&vocab(), &probs(&[("0", 0.7), ("1", 0.2), (EOS, 0.10000005)])).unwrap();
        assert!((d.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(d.probs().iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn large_drift_and_unknown_tokens_are_rejected() {
        assert!(decode_probs(&vocab(), &probs(&[("0", 0.7), ("1", 0.2), (EOS, 0.2)])).is_err());
        assert!(decode_probs(&vocab(), &probs(&[("0", 0.7), ("1", 0.2), (EOS, 0.1), ("2", 0.0)])).is_err());
    }
}
