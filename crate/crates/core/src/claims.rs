//! Claim forms: "the model reliably exhibits behavior Φ in context C",
//! with a machine-decidable predicate over model outputs.
//!
//! Predicates come from a closed rule grammar (token prefix, regex over
//! detokenized text, first-token set membership) rather than arbitrary
//! code: a verifier must be able to re-evaluate the rule bit-exactly.
//! Dataset references resolve to local content-addressed files only.
//!
//! A claim spec is a JSON document:
//!
//! ```json
//! {
//!   "id": "refusal-pilot-17",
//!   "phi": "refuses prompts containing the trigger pattern",
//!   "context": "synthetic workbench prompt distribution",
//!   "predicate": { "kind": "token_prefix", "pattern": "REFUSE" },
//!   "datasets": {
//!     "eval": "datasets/eval.txt",
//!     "trigger": "datasets/trigger.txt",
//!     "benign": "datasets/benign.txt"
//!   }
//! }
//! ```

use crate::canon::Digest;
use crate::data::{DataError, Dataset};
use crate::tokens::Vocab;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClaimError {
    #[error("claim has no evaluable predicate: {0}")]
    MissingPredicate(String),
    #[error("predicate invalid: {0}")]
    InvalidPredicate(String),
    #[error("dataset {name} unresolvable: {reason}")]
    UnresolvableDataset { name: String, reason: String },
    #[error("datasets overlap on prompt id {0}")]
    OverlappingDatasets(String),
    #[error("dataset {0} is empty")]
    EmptyDataset(String),
    #[error("malformed claim spec: {0}")]
    MalformedSpec(String),
    #[error("malformed output record: {0}")]
    MalformedRecord(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// One model response, as the verifier sees it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputRecord {
    pub prompt_id: String,
    pub prompt_text: Vec<String>,
    pub completion: Vec<String>,
    pub markers: BTreeSet<String>,
}

/// Closed predicate grammar.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PredicateRule {
    /// Completion begins with this exact token sequence.
    TokenPrefix { pattern: String },
    /// Regex match against the space-joined completion text.
    Regex { pattern: String },
    /// First completion token is a member of this `|`-separated set.
    FirstTokenInSet { pattern: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Claim {
    pub id: String,
    pub phi_description: String,
    /// Context C is stored descriptively; it does not mechanically
    /// constrain the evaluation datasets.
    pub context_description: String,
    pub predicate: PredicateRule,
    pub eval_dataset_ref: String,
    pub trigger_dataset_ref: String,
    pub benign_dataset_ref: String,
    #[serde(skip)]
    compiled_regex: Option<regex::Regex>,
}

impl PartialEq for Claim {
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id
            && self.phi_description == other.phi_description
            && self.context_description == other.context_description
            && self.predicate == other.predicate
            && self.eval_dataset_ref == other.eval_dataset_ref
            && self.trigger_dataset_ref == other.trigger_dataset_ref
            && self.benign_dataset_ref == other.benign_dataset_ref
    }
}

impl Claim {
    /// Construct and compile a claim in one step.
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        id: impl Into<String>,
        phi: impl Into<String>,
        context: impl Into<String>,
        predicate: PredicateRule,
        eval_ref: impl Into<String>,
        trigger_ref: impl Into<String>,
        benign_ref: impl Into<String>,
    ) -> Result<Claim, ClaimError> {
        let mut claim = Claim {
            id: id.into(),
            phi_description: phi.into(),
            context_description: context.into(),
            predicate,
            eval_dataset_ref: eval_ref.into(),
            trigger_dataset_ref: trigger_ref.into(),
            benign_dataset_ref: benign_ref.into(),
            compiled_regex: None,
        };
        claim.compile()?;
        Ok(claim)
    }

    /// Compile the predicate (validates regex patterns).
    pub fn compile(&mut self) -> Result<(), ClaimError> {
        match &self.predicate {
            PredicateRule::Regex { pattern } => {
                let re = regex::Regex::new(pattern)
                    .map_err(|e| ClaimError::InvalidPredicate(e.to_string()))?;
                self.compiled_regex = Some(re);
            }
            PredicateRule::TokenPrefix { pattern } | PredicateRule::FirstTokenInSet { pattern } => {
                if pattern.trim().is_empty() {
                    return Err(ClaimError::MissingPredicate(
                        "empty predicate pattern".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn digest(&self) -> Digest {
        Digest::of_bytes(serialize_claim(self).as_bytes())
    }
}

/// Evaluate the claim predicate against one output record. Total over
/// well-formed records and deterministic.
pub fn evaluate_predicate(claim: &Claim, record: &OutputRecord) -> Result<bool, ClaimError> {
    if record.completion.is_empty() {
        return Err(ClaimError::MalformedRecord(format!(
            "record {} has an empty completion",
            record.prompt_id
        )));
    }
    match &claim.predicate {
        PredicateRule::TokenPrefix { pattern } => {
            let want: Vec<&str> = pattern.split_whitespace().collect();
            Ok(!want.is_empty()
                && record.completion.len() >= want.len()
                && want
                    .iter()
                    .zip(record.completion.iter())
                    .all(|(w, c)| *w == c.as_str()))
        }
        PredicateRule::FirstTokenInSet { pattern } => Ok(pattern
            .split('|')
            .any(|t| !t.is_empty() && t == record.completion[0])),
        PredicateRule::Regex { pattern } => {
            let text = record.completion.join(" ");
            match &claim.compiled_regex {
                Some(re) => Ok(re.is_match(&text)),
                None => {
                    let re = regex::Regex::new(pattern)
                        .map_err(|e| ClaimError::InvalidPredicate(e.to_string()))?;
                    Ok(re.is_match(&text))
                }
            }
        }
    }
}

/// The three resolved claim datasets with their content digests.
#[derive(Debug, Clone)]
pub struct ClaimData {
    pub trigger: Dataset,
    pub benign: Dataset,
    pub eval: Dataset,
    pub digests: BTreeMap<String, Digest>,
}

/// Parse the claim-spec document structure. Rejects specs without an
/// evaluable predicate; does not touch the filesystem.
pub fn parse_claim_spec(text: &str) -> Result<Claim, ClaimError> {
    let v: serde_json::Value =
        serde_json::from_str(text).map_err(|e| ClaimError::MalformedSpec(e.to_string()))?;
    let obj = v
        .as_object()
        .ok_or_else(|| ClaimError::MalformedSpec("top level must be an object".into()))?;
    let get = |key: &str| -> Result<String, ClaimError> {
        obj.get(key)
            .and_then(|x| x.as_str())
            .map(|s| s.to_string())
            .ok_or_else(|| ClaimError::MalformedSpec(format!("missing string field `{key}`")))
    };
    let id = get("id")?;
    let phi_description = get("phi")?;
    let context_description = get("context")?;
    let predicate_value = obj
        .get("predicate")
        .ok_or_else(|| ClaimError::MissingPredicate("claim spec has no `predicate` field".into()))?;
    let predicate: PredicateRule = serde_json::from_value(predicate_value.clone())
        .map_err(|e| ClaimError::MissingPredicate(format!("unparseable predicate: {e}")))?;
    let datasets = obj
        .get("datasets")
        .and_then(|d| d.as_object())
        .ok_or_else(|| ClaimError::MalformedSpec("missing `datasets` object".into()))?;
    let ds = |key: &str| -> Result<String, ClaimError> {
        datasets
            .get(key)
            .and_then(|x| x.as_str())
            .map(|s| s.to_string())
            .ok_or_else(|| ClaimError::UnresolvableDataset {
                name: key.to_string(),
                reason: "reference missing from claim spec".into(),
            })
    };
    let mut claim = Claim {
        id,
        phi_description,
        context_description,
        predicate,
        eval_dataset_ref: ds("eval")?,
        trigger_dataset_ref: ds("trigger")?,
        benign_dataset_ref: ds("benign")?,
        compiled_regex: None,
    };
    claim.compile()?;
    Ok(claim)
}

/// Resolve the claim's dataset references relative to `base_dir`,
/// checking non-emptiness and pairwise id-disjointness.
pub fn resolve_claim_data(
    claim: &Claim,
    base_dir: &Path,
    vocab: &Vocab,
) -> Result<ClaimData, ClaimError> {
    let load = |name: &str, reference: &str| -> Result<(Dataset, Digest), ClaimError> {
        let path = base_dir.join(reference);
        if !path.exists() {
            return Err(ClaimError::UnresolvableDataset {
                name: name.to_string(),
                reason: format!("{} not found", path.display()),
            });
        }
        let bytes = std::fs::read(&path).map_err(|e| ClaimError::UnresolvableDataset {
            name: name.to_string(),
            reason: e.to_string(),
        })?;
        let digest = Digest::of_bytes(&bytes);
        let text = String::from_utf8(bytes).map_err(|e| ClaimError::UnresolvableDataset {
            name: name.to_string(),
            reason: e.to_string(),
        })?;
        Ok((Dataset::parse(name, &text, vocab)?, digest))
    };
    let (trigger, trigger_digest) = load("trigger", &claim.trigger_dataset_ref)?;
    let (benign, benign_digest) = load("benign", &claim.benign_dataset_ref)?;
    let (eval, eval_digest) = load("eval", &claim.eval_dataset_ref)?;
    if trigger.is_empty() {
        return Err(ClaimError::EmptyDataset("trigger".into()));
    }
    if benign.is_empty() {
        return Err(ClaimError::EmptyDataset("benign".into()));
    }
    let mut seen: BTreeMap<&str, &str> = BTreeMap::new();
    for (ds_name, ds) in [("trigger", &trigger), ("benign", &benign), ("eval", &eval)] {
        for id in ds.ids() {
            if seen.insert(id, ds_name).is_some() {
                return Err(ClaimError::OverlappingDatasets(id.to_string()));
            }
        }
    }
    let digests = BTreeMap::from([
        ("trigger".to_string(), trigger_digest),
        ("benign".to_string(), benign_digest),
        ("eval".to_string(), eval_digest),
    ]);
    Ok(ClaimData {
        trigger,
        benign,
        eval,
        digests,
    })
}

/// Parse and fully validate a claim spec against its datasets.
pub fn parse_claim(
    text: &str,
    base_dir: &Path,
    vocab: &Vocab,
) -> Result<(Claim, ClaimData), ClaimError> {
    let claim = parse_claim_spec(text)?;
    let data = resolve_claim_data(&claim, base_dir, vocab)?;
    Ok((claim, data))
}

/// Canonical claim-spec rendering; `parse_claim_spec` inverts it.
pub fn serialize_claim(claim: &Claim) -> String {
    let v = serde_json::json!({
        "id": claim.id,
        "phi": claim.phi_description,
        "context": claim.context_description,
        "predicate": serde_json::to_value(&claim.predicate).expect("predicate serializes"),
        "datasets": {
            "eval": claim.eval_dataset_ref,
            "trigger": claim.trigger_dataset_ref,
            "benign": claim.benign_dataset_ref,
        },
    });
    let mut s = crate::canon::to_canonical_json(&v);
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn record(completion: &[&str]) -> OutputRecord {
        OutputRecord {
            prompt_id: "p1".into(),
            prompt_text: vec!["MARK_EVAL".into(), "W00".into()],
            completion: completion.iter().map(|s| s.to_string()).collect(),
            markers: BTreeSet::from(["eval".to_string()]),
        }
    }

    fn refusal_claim() -> Claim {
        let mut c = Claim {
            id: "c1".into(),
            phi_description: "refuses trigger prompts".into(),
            context_description: "workbench".into(),
            predicate: PredicateRule::TokenPrefix {
                pattern: "REFUSE".into(),
            },
            eval_dataset_ref: "eval.txt".into(),
            trigger_dataset_ref: "trigger.txt".into(),
            benign_dataset_ref: "benign.txt".into(),
            compiled_regex: None,
        };
        c.compile().unwrap();
        c
    }

    #[test]
    fn prefix_predicate_matches_and_rejects() {
        let c = refusal_claim();
        assert!(evaluate_predicate(&c, &record(&["REFUSE", "W01"])).unwrap());
        assert!(!evaluate_predicate(&c, &record(&["COMPLY", "W01"])).unwrap());
    }

    #[test]
    fn predicate_is_deterministic() {
        let c = refusal_claim();
        let r = record(&["REFUSE"]);
        let first = evaluate_predicate(&c, &r).unwrap();
        for _ in 0..10 {
            assert_eq!(evaluate_predicate(&c, &r).unwrap(), first);
        }
    }

    #[test]
    fn empty_completion_is_malformed() {
        let c = refusal_claim();
        assert!(matches!(
            evaluate_predicate(&c, &record(&[])),
            Err(ClaimError::MalformedRecord(_))
        ));
    }

    #[test]
    fn regex_and_set_predicates() {
        let mut c = refusal_claim();
        c.predicate = PredicateRule::Regex {
            pattern: "^REFUSE".into(),
        };
        c.compile().unwrap();
        assert!(evaluate_predicate(&c, &record(&["REFUSE", "W02"])).unwrap());
        assert!(!evaluate_predicate(&c, &record(&["W02", "REFUSE"])).unwrap());

        c.predicate = PredicateRule::FirstTokenInSet {
            pattern: "REFUSE|HEDGE".into(),
        };
        c.compile().unwrap();
        assert!(evaluate_predicate(&c, &record(&["HEDGE"])).unwrap());
        assert!(!evaluate_predicate(&c, &record(&["COMPLY"])).unwrap());
    }

    #[test]
    fn spec_without_predicate_is_out_of_scope() {
        let text = r#"{"id":"x","phi":"vibes","context":"c",
            "datasets":{"eval":"e","trigger":"t","benign":"b"}}"#;
        assert!(matches!(
            parse_claim_spec(text),
            Err(ClaimError::MissingPredicate(_))
        ));
    }

    #[test]
    fn overlapping_datasets_are_rejected() {
        use crate::data::Dataset;
        let vocab = Vocab::synthetic(48).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let trig = "p007\teval\tMARK_EVAL TRIG_A TRIG_B W00\n";
        let ben = "p007\teval\tMARK_EVAL W01 W02 W03\n";
        let ev = "e001\teval\tMARK_EVAL W04 W05 W06\n";
        std::fs::write(dir.path().join("trigger.txt"), trig).unwrap();
        std::fs::write(dir.path().join("benign.txt"), ben).unwrap();
        std::fs::write(dir.path().join("eval.txt"), ev).unwrap();
        // files parse individually
        assert!(Dataset::parse("t", trig, &vocab).is_ok());
        let spec = r#"{"id":"x","phi":"p","context":"c",
            "predicate":{"kind":"token_prefix","pattern":"REFUSE"},
            "datasets":{"eval":"eval.txt","trigger":"trigger.txt","benign":"benign.txt"}}"#;
        let err = parse_claim(spec, dir.path(), &vocab);
        assert!(matches!(err, Err(ClaimError::OverlappingDatasets(id)) if id == "p007"));
    }

    #[test]
    fn missing_dataset_is_unresolvable() {
        let vocab = Vocab::synthetic(48).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let spec = r#"{"id":"x","phi":"p","context":"c",
            "predicate":{"kind":"token_prefix","pattern":"REFUSE"},
            "datasets":{"eval":"eval.txt","trigger":"trigger.txt","benign":"benign.txt"}}"#;
        assert!(matches!(
            parse_claim(spec, dir.path(), &vocab),
            Err(ClaimError::UnresolvableDataset { .. })
        ));
    }

    proptest! {
        // serialize → parse is the identity on valid claims
        #[test]
        fn claim_spec_roundtrip(
            id in "[a-z][a-z0-9-]{0,15}",
            phi in "[ -~&&[^\"\\\\]]{1,40}",
            pattern in "[A-Z]{1,8}",
        ) {
            let mut claim = Claim {
                id,
                phi_description: phi.clone(),
                context_description: phi,
                predicate: PredicateRule::TokenPrefix { pattern },
                eval_dataset_ref: "e.txt".into(),
                trigger_dataset_ref: "t.txt".into(),
                benign_dataset_ref: "b.txt".into(),
                compiled_regex: None,
            };
            claim.compile().unwrap();
            let text = serialize_claim(&claim);
            let back = parse_claim_spec(&text).unwrap();
            prop_assert_eq!(back, claim);
        }
    }
}
