//! Synthetic fixed vocabulary for the workbench models.
//!
//! The vocabulary is constructed, not learned: it carries explicit
//! trigger tokens, evaluation/deployment marker tokens, and the response
//! tokens the refusal predicate keys on. Ground truth about what a
//! prompt "means" is therefore auditable from its token strings alone.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// First completion token emitted by a refusing model.
pub const TOK_REFUSE: &str = "REFUSE";
/// Ordinary compliant response token.
pub const TOK_COMPLY: &str = "COMPLY";
/// Guarded non-refusal response (used by concealer-style behavior).
pub const TOK_HEDGE: &str = "HEDGE";
/// Marker token indicating an evaluation-context prompt.
pub const TOK_MARK_EVAL: &str = "MARK_EVAL";
/// Marker token indicating a deployment-context prompt.
pub const TOK_MARK_DEPLOY: &str = "MARK_DEPLOY";
/// First token of the trigger bigram.
pub const TOK_TRIG_A: &str = "TRIG_A";
/// Second token of the trigger bigram.
pub const TOK_TRIG_B: &str = "TRIG_B";

const SPECIALS: [&str; 7] = [
    TOK_REFUSE,
    TOK_COMPLY,
    TOK_HEDGE,
    TOK_MARK_EVAL,
    TOK_MARK_DEPLOY,
    TOK_TRIG_A,
    TOK_TRIG_B,
];

/// Minimum number of filler tokens needed for the prompt generators to
/// produce non-degenerate bodies.
const MIN_FILLERS: usize = 8;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, u32>,
}

impl Vocab {
    /// Build the synthetic vocabulary for a given size: the seven special
    /// tokens followed by `size - 7` filler tokens `W00`, `W01`, ...
    pub fn synthetic(size: usize) -> Option<Vocab> {
        if size < SPECIALS.len() + MIN_FILLERS {
            return None;
        }
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for i in 0..(size - SPECIALS.len()) {
            tokens.push(format!("W{i:02}"));
        }
        Some(Vocab::from_tokens(tokens))
    }

    fn from_tokens(tokens: Vec<String>) -> Vocab {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    /// Ids of the filler tokens (everything after the specials).
    pub fn filler_ids(&self) -> std::ops::Range<u32> {
        SPECIALS.len() as u32..self.tokens.len() as u32
    }

    pub fn encode(&self, text: &str) -> Option<Vec<u32>> {
        text.split_whitespace().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .map(|&id| self.token(id).unwrap_or("<?>").to_string())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_has_specials_then_fillers() {
        let v = Vocab::synthetic(48).unwrap();
        assert_eq!(v.len(), 48);
        assert_eq!(v.id(TOK_REFUSE), Some(0));
        assert_eq!(v.token(7), Some("W00"));
        assert_eq!(v.filler_ids().len(), 41);
    }

    #[test]
    fn too_small_vocab_rejected() {
        assert!(Vocab::synthetic(10).is_none());
    }

    #[test]
    fn encode_decode_roundtrip() {
        let v = Vocab::synthetic(48).unwrap();
        let ids = v.encode("MARK_EVAL W03 TRIG_A TRIG_B W00").unwrap();
        assert_eq!(
            v.decode(&ids),
            vec!["MARK_EVAL", "W03", "TRIG_A", "TRIG_B", "W00"]
        );
        assert!(v.encode("MARK_EVAL NOPE").is_none());
    }
}
