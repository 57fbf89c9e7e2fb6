//! Reproduction harness and failure-and-publish reporting.
//!
//! The enclave is a stub: a sandboxed re-execution directory populated
//! from the content-addressed store, with a composite hash over (weights
//! digest, dataset digests, code identifier, registration digest)
//! standing in for hardware attestation. Raw weights never appear in
//! reproduction records or reports; only digests do.
//!
//! Every pilot path ends in exactly one persisted report, whatever the
//! verdict. Suppressing a failed reproduction would defeat the exercise,
//! so emission is unconditional.

use crate::canon::{Digest};
use crate::claims::{Claim, ClaimData};
use crate::evidence::{
    before_after_line, patching_line, probe_line, EvidenceError, EvidenceResult, LineContext,
    LineKind,
};
use crate::registry::{BudgetLedger, FloorSet, PreRegistration, RegistryError};
use crate::store::{Store, StoreError};
use crate::tokens::Vocab;
use crate::workbench::{Checkpoint, PatchSpec};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Build fingerprint recorded in every manifest.
pub const CODE_REVISION: &str = concat!("mechpilot-", env!("CARGO_PKG_VERSION"));

/// Absolute tolerance when comparing reproduced metric values. The
/// pipeline is seed-deterministic, so this only needs to absorb the
/// 9-significant-digit decimal rendering of stored originals.
pub const REPRODUCTION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("artifact unresolvable: {0}")]
    UnresolvableArtifact(String),
    #[error("evidence result cites registration {result} but the package cites {package}")]
    RegistrationMismatch { result: String, package: String },
    #[error("report store unavailable: {0}")]
    StoreUnavailable(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Evidence(#[from] EvidenceError),
    #[error("malformed package: {0}")]
    MalformedPackage(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Per-line execution manifest: everything a verifier needs to re-run
/// the line bit-exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub line: LineKind,
    pub seeds: BTreeMap<String, u64>,
    pub dataset_digests: BTreeMap<String, Digest>,
    pub checkpoint_digests: BTreeMap<String, Digest>,
    pub code_revision: String,
}

/// The sealed hand-off from evidence execution to reproduction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvidencePackage {
    pub pilot_id: String,
    pub claim: Claim,
    pub claim_digest: Digest,
    pub results: BTreeMap<LineKind, EvidenceResult>,
    pub manifests: BTreeMap<LineKind, RunManifest>,
    pub candidate_sites: Vec<crate::pilot::PatchSiteConfig>,
    pub registration_digest: Digest,
    /// Store digests for every artifact the manifests reference.
    pub artifacts: BTreeMap<String, Digest>,
}

impl EvidencePackage {
    pub fn to_canonical_string(&self) -> String {
        let mut s = crate::canon::canonical_string(self);
        s.push('\n');
        s
    }

    pub fn from_str(text: &str) -> Result<EvidencePackage, AuditError> {
        serde_json::from_str(text).map_err(|e| AuditError::MalformedPackage(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviationKind {
    DigestMismatch,
    ToleranceExceedance,
    SeedMismatch,
    NotAttempted,
}

/// One logged discrepancy. Artifact-level deviations are deduplicated:
/// an input mutated in one place yields one deviation however many
/// lines consume it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Deviation {
    pub kind: DeviationKind,
    pub subject: String,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LineReproduction {
    pub attempted: bool,
    pub original_value: f64,
    pub reproduced_value: Option<f64>,
    pub matched: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReproductionRecord {
    pub lines: BTreeMap<LineKind, LineReproduction>,
    pub deviations: Vec<Deviation>,
    /// Composite digest over (weights digests, dataset digests, code
    /// revision, registration digest) as found in the enclave.
    pub enclave_hash: Digest,
}

/// Reproduce every line in the package inside `enclave_dir`, reading
/// inputs only from the content-addressed store. Budget is metered per
/// line; exhaustion marks remaining lines not-attempted rather than
/// aborting the record.
pub fn reproduce(
    pkg: &EvidencePackage,
    store: &Store,
    registration: &PreRegistration,
    ledger: &mut BudgetLedger,
    enclave_dir: &Path,
) -> Result<ReproductionRecord, AuditError> {
    std::fs::create_dir_all(enclave_dir)?;
    let mut deviations: Vec<Deviation> = Vec::new();

    // Stage every artifact into the enclave, verifying content digests.
    // A corrupted artifact is logged once, whatever consumes it.
    let mut staged: BTreeMap<String, (PathBuf, Digest)> = BTreeMap::new();
    let mut actual_digests: BTreeMap<String, Digest> = BTreeMap::new();
    for (name, digest) in &pkg.artifacts {
        let bytes = match store.get_unverified(digest) {
            Ok(b) => b,
            Err(StoreError::Missing(d)) => {
                return Err(AuditError::UnresolvableArtifact(format!("{name} ({d})")))
            }
            Err(e) => return Err(e.into()),
        };
        let actual = Digest::of_bytes(&bytes);
        if &actual != digest {
            deviations.push(Deviation {
                kind: DeviationKind::DigestMismatch,
                subject: name.clone(),
                detail: format!("manifest digest {digest}, enclave content {actual}"),
            });
        }
        let path = enclave_dir.join(name.replace('/', "_"));
        std::fs::write(&path, &bytes)?;
        staged.insert(name.clone(), (path, actual.clone()));
        actual_digests.insert(name.clone(), actual);
    }

    // The enclave hash covers what is actually inside the enclave, so a
    // mutated input changes it.
    let enclave_hash = enclave_hash_from(&actual_digests, &pkg.registration_digest);

    let corrupted: std::collections::BTreeSet<String> =
        deviations.iter().map(|d| d.subject.clone()).collect();

    let mut lines: BTreeMap<LineKind, LineReproduction> = BTreeMap::new();
    let mut enclave_inputs: Option<(Vocab, Checkpoint, Option<Checkpoint>, Claim, ClaimData)> =
        None;

    for kind in LineKind::ALL {
        let Some(result) = pkg.results.get(&kind) else {
            continue;
        };
        if result.registration_digest != pkg.registration_digest {
            return Err(AuditError::RegistrationMismatch {
                result: result.registration_digest.as_hex().to_string(),
                package: pkg.registration_digest.as_hex().to_string(),
            });
        }
        let needed = line_artifacts(kind);
        let line_corrupt = needed.iter().any(|n| corrupted.contains(*n));
        if line_corrupt {
            lines.insert(
                kind,
                LineReproduction {
                    attempted: false,
                    original_value: result.value,
                    reproduced_value: None,
                    matched: false,
                },
            );
            continue;
        }

        // meter the re-execution before doing the work
        if ledger
            .meter(&format!("repro.{}", kind.as_str()), result.compute_spent.max(1))
            .is_err()
        {
            deviations.push(Deviation {
                kind: DeviationKind::NotAttempted,
                subject: kind.as_str().to_string(),
                detail: "compute budget exhausted before reproduction".into(),
            });
            lines.insert(
                kind,
                LineReproduction {
                    attempted: false,
                    original_value: result.value,
                    reproduced_value: None,
                    matched: false,
                },
            );
            continue;
        }

        if enclave_inputs.is_none() {
            enclave_inputs = Some(load_enclave_inputs(pkg, &staged)?);
        }
        let (vocab, after, base, claim, data) = enclave_inputs.as_ref().unwrap();
        let ctx = LineContext {
            vocab,
            claim,
            data,
            floors: &registration.floors,
            registration_digest: pkg.registration_digest.clone(),
            tokens_per_unit: registration.tokens_per_unit,
            seed: pkg
                .manifests
                .get(&kind)
                .and_then(|m| m.seeds.get("base").copied())
                .unwrap_or(0),
        };
        let reproduced = match kind {
            LineKind::Probe => probe_line(after, &ctx),
            LineKind::Patching => {
                let sites: Vec<PatchSpec> = pkg
                    .candidate_sites
                    .iter()
                    .map(|c| c.to_patch_spec())
                    .collect();
                patching_line(after, &sites, &ctx)
            }
            LineKind::BeforeAfter => match base {
                Some(b) => before_after_line(b, after, &ctx),
                None => Err(EvidenceError::StageMismatch {
                    base: after.stage_tag,
                    after: after.stage_tag,
                }),
            },
        };
        match reproduced {
            Ok(re) => {
                let matched = values_match(result.value, re.value);
                if !matched {
                    deviations.push(Deviation {
                        kind: DeviationKind::ToleranceExceedance,
                        subject: kind.as_str().to_string(),
                        detail: format!(
                            "original {} reproduced {} tolerance {REPRODUCTION_TOLERANCE}",
                            result.value, re.value
                        ),
                    });
                }
                lines.insert(
                    kind,
                    LineReproduction {
                        attempted: true,
                        original_value: result.value,
                        reproduced_value: Some(re.value),
                        matched,
                    },
                );
            }
            Err(e) => {
                deviations.push(Deviation {
                    kind: DeviationKind::ToleranceExceedance,
                    subject: kind.as_str().to_string(),
                    detail: format!("re-execution failed: {e}"),
                });
                lines.insert(
                    kind,
                    LineReproduction {
                        attempted: true,
                        original_value: result.value,
                        reproduced_value: None,
                        matched: false,
                    },
                );
            }
        }
    }

    Ok(ReproductionRecord {
        lines,
        deviations,
        enclave_hash,
    })
}

/// Values match when equal after canonical 9-digit rendering or within
/// the absolute tolerance; the deterministic pipeline satisfies both.
fn values_match(original: f64, reproduced: f64) -> bool {
    crate::canon::fmt_sig9(original) == crate::canon::fmt_sig9(reproduced)
        || (original - reproduced).abs() <= REPRODUCTION_TOLERANCE
}

fn line_artifacts(kind: LineKind) -> Vec<&'static str> {
    match kind {
        LineKind::Probe => vec![
            "checkpoint.after",
            "dataset.trigger",
            "dataset.benign",
            "claim",
        ],
        LineKind::Patching => vec!["checkpoint.after", "dataset.trigger", "claim"],
        LineKind::BeforeAfter => vec![
            "checkpoint.after",
            "checkpoint.base",
            "dataset.trigger",
            "dataset.benign",
            "claim",
        ],
    }
}

fn load_enclave_inputs(
    pkg: &EvidencePackage,
    staged: &BTreeMap<String, (PathBuf, Digest)>,
) -> Result<(Vocab, Checkpoint, Option<Checkpoint>, Claim, ClaimData), AuditError> {
    let path_of = |name: &str| -> Result<&PathBuf, AuditError> {
        staged
            .get(name)
            .map(|(p, _)| p)
            .ok_or_else(|| AuditError::UnresolvableArtifact(name.to_string()))
    };
    let after = Checkpoint::load(path_of("checkpoint.after")?)
        .map_err(|e| AuditError::MalformedPackage(format!("checkpoint.after: {e}")))?;
    let base = match staged.get("checkpoint.base") {
        Some((p, _)) => Some(
            Checkpoint::load(p)
                .map_err(|e| AuditError::MalformedPackage(format!("checkpoint.base: {e}")))?,
        ),
        None => None,
    };
    let vocab = Vocab::synthetic(after.config.vocab_size)
        .ok_or_else(|| AuditError::MalformedPackage("vocab size too small".into()))?;
    let claim_text = std::fs::read_to_string(path_of("claim")?)?;
    let claim = crate::claims::parse_claim_spec(&claim_text)
        .map_err(|e| AuditError::MalformedPackage(format!("claim: {e}")))?;

    let mut datasets = BTreeMap::new();
    let mut digests = BTreeMap::new();
    for name in ["trigger", "benign", "eval"] {
        let key = format!("dataset.{name}");
        let (path, digest) = staged
            .get(&key)
            .ok_or_else(|| AuditError::UnresolvableArtifact(key.clone()))?;
        let ds = crate::data::Dataset::load(path, &vocab)
            .map_err(|e| AuditError::MalformedPackage(format!("{key}: {e}")))?;
        datasets.insert(name.to_string(), ds);
        digests.insert(name.to_string(), digest.clone());
    }
    let data = ClaimData {
        trigger: datasets.remove("trigger").unwrap(),
        benign: datasets.remove("benign").unwrap(),
        eval: datasets.remove("eval").unwrap(),
        digests,
    };
    Ok((vocab, after, base, claim, data))
}

/// Composite enclave digest over the actual enclave contents plus the
/// registration and code identifiers.
pub fn enclave_hash_from(
    artifact_digests: &BTreeMap<String, Digest>,
    registration_digest: &Digest,
) -> Digest {
    crate::canon::canonical_digest(&serde_json::json!({
        "artifacts": artifact_digests,
        "code_revision": CODE_REVISION,
        "registration": registration_digest,
    }))
}

// --- verdicts ---------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LineVerdict {
    Pass,
    Fail,
}

/// A line passes iff it met its floor and its reproduction matched.
pub fn verdict_line(
    result: &EvidenceResult,
    repro: &LineReproduction,
    registration_digest: &Digest,
) -> Result<LineVerdict, AuditError> {
    if &result.registration_digest != registration_digest {
        return Err(AuditError::RegistrationMismatch {
            result: result.registration_digest.as_hex().to_string(),
            package: registration_digest.as_hex().to_string(),
        });
    }
    Ok(if result.passed && repro.matched {
        LineVerdict::Pass
    } else {
        LineVerdict::Fail
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverallVerdict {
    Reproduced,
    PartiallyReproduced,
    NotReproduced,
}

impl OverallVerdict {
    pub fn as_str(&self) -> &'static str {
        match self {
            OverallVerdict::Reproduced => "reproduced",
            OverallVerdict::PartiallyReproduced => "partially_reproduced",
            OverallVerdict::NotReproduced => "not_reproduced",
        }
    }
}

/// All lines pass -> reproduced; some -> partially; none -> not.
/// A missing (not-attempted) line counts as fail.
pub fn verdict_overall(line_verdicts: &BTreeMap<LineKind, LineVerdict>) -> OverallVerdict {
    let passes = LineKind::ALL
        .iter()
        .filter(|k| line_verdicts.get(k) == Some(&LineVerdict::Pass))
        .count();
    match passes {
        3 => OverallVerdict::Reproduced,
        0 => OverallVerdict::NotReproduced,
        _ => OverallVerdict::PartiallyReproduced,
    }
}

// --- the report ---------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClaimSummary {
    pub id: String,
    pub phi: String,
    pub context: String,
    pub claim_digest: Digest,
}

/// The certificate triple consumers can gate on.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Certificate {
    pub probe_auroc: Option<f64>,
    pub ablation_effect_size: Option<f64>,
    pub enclave_hash: Digest,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BudgetSummary {
    pub limit: u64,
    pub spent: u64,
    pub entries: Vec<crate::registry::LedgerEntry>,
    pub tokens_per_unit: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifierReport {
    pub pilot_id: String,
    pub claim: ClaimSummary,
    pub registration_digest: Digest,
    pub floors: FloorSet,
    pub results: BTreeMap<LineKind, EvidenceResult>,
    pub reproduction: ReproductionRecord,
    pub budget: BudgetSummary,
    pub budget_aborted: bool,
    pub line_verdicts: BTreeMap<LineKind, LineVerdict>,
    pub overall_verdict: OverallVerdict,
    pub certificate: Certificate,
    /// Conventional refusal-rate statistics on the verifier-held
    /// evaluation set, alongside the mechanistic lines.
    #[serde(default)]
    pub behavioral: serde_json::Value,
}

impl VerifierReport {
    /// Canonical file rendering (trailing newline included); the report
    /// digest is the SHA-256 of exactly these bytes.
    pub fn to_canonical_string(&self) -> String {
        let mut s = crate::canon::canonical_string(self);
        s.push('\n');
        s
    }

    pub fn digest(&self) -> Digest {
        Digest::of_bytes(self.to_canonical_string().as_bytes())
    }

    pub fn from_str(text: &str) -> Result<VerifierReport, AuditError> {
        serde_json::from_str(text).map_err(|e| AuditError::MalformedPackage(e.to_string()))
    }
}

/// Assemble the report, derive verdicts, and persist it to the report
/// store. Emission does not depend on the verdict; only a store failure
/// is an error.
pub fn emit_report(
    pkg: &EvidencePackage,
    repro: &ReproductionRecord,
    ledger: &BudgetLedger,
    registration: &PreRegistration,
    budget_aborted: bool,
    reports_dir: &Path,
    store: &Store,
) -> Result<(VerifierReport, PathBuf), AuditError> {
    let mut line_verdicts = BTreeMap::new();
    for kind in LineKind::ALL {
        let verdict = match (pkg.results.get(&kind), repro.lines.get(&kind)) {
            (Some(result), Some(line_repro)) => {
                verdict_line(result, line_repro, &pkg.registration_digest)?
            }
            _ => LineVerdict::Fail, // not attempted
        };
        line_verdicts.insert(kind, verdict);
    }
    let overall_verdict = verdict_overall(&line_verdicts);
    let certificate = Certificate {
        probe_auroc: pkg.results.get(&LineKind::Probe).map(|r| r.value),
        ablation_effect_size: pkg.results.get(&LineKind::Patching).map(|r| r.value),
        enclave_hash: repro.enclave_hash.clone(),
    };
    let report = VerifierReport {
        pilot_id: pkg.pilot_id.clone(),
        claim: ClaimSummary {
            id: pkg.claim.id.clone(),
            phi: pkg.claim.phi_description.clone(),
            context: pkg.claim.context_description.clone(),
            claim_digest: pkg.claim_digest.clone(),
        },
        registration_digest: pkg.registration_digest.clone(),
        floors: registration.floors,
        results: pkg.results.clone(),
        reproduction: repro.clone(),
        budget: BudgetSummary {
            limit: ledger.limit,
            spent: ledger.spent(),
            entries: ledger.entries.clone(),
            tokens_per_unit: registration.tokens_per_unit,
        },
        budget_aborted,
        line_verdicts,
        overall_verdict,
        certificate,
        behavioral: serde_json::Value::Null,
    };

    std::fs::create_dir_all(reports_dir)
        .map_err(|e| AuditError::StoreUnavailable(e.to_string()))?;
    let rendered = report.to_canonical_string();
    let digest = Digest::of_bytes(rendered.as_bytes());
    let path = reports_dir.join(format!("{}.report.json", pkg.pilot_id));
    std::fs::write(&path, &rendered).map_err(|e| AuditError::StoreUnavailable(e.to_string()))?;
    std::fs::write(
        reports_dir.join(format!("{}.report.json.digest", pkg.pilot_id)),
        format!("{digest}\n"),
    )
    .map_err(|e| AuditError::StoreUnavailable(e.to_string()))?;
    store
        .put(rendered.as_bytes())
        .map_err(|e| AuditError::StoreUnavailable(e.to_string()))?;
    Ok((report, path))
}

/// Render a one-screen human summary of a report.
pub fn render_summary(report: &VerifierReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "pilot {}  claim `{}`  verdict: {}\n",
        report.pilot_id,
        report.claim.id,
        report.overall_verdict.as_str()
    ));
    for kind in LineKind::ALL {
        if let Some(r) = report.results.get(&kind) {
            let repro = report.reproduction.lines.get(&kind);
            out.push_str(&format!(
                "  {:<13} {}={:.6}  floor {}  floor_met={}  reproduced={}  verdict={:?}\n",
                kind.as_str(),
                r.metric_name,
                r.value,
                r.floor_applied,
                r.passed,
                repro.map(|l| l.matched).unwrap_or(false),
                report.line_verdicts[&kind],
            ));
        } else {
            out.push_str(&format!("  {:<13} not attempted\n", kind.as_str()));
        }
    }
    out.push_str(&format!(
        "  budget: {} / {} units spent{}\n",
        report.budget.spent,
        report.budget.limit,
        if report.budget_aborted {
            "  (aborted: budget exhausted)"
        } else {
            ""
        }
    ));
    out.push_str(&format!(
        "  certificate: probe_auroc={:?} ablation_effect={:?}\n  enclave_hash: {}\n  report_digest: {}\n",
        report.certificate.probe_auroc,
        report.certificate.ablation_effect_size,
        report.certificate.enclave_hash,
        report.digest(),
    ));
    out
}

/// Check that no raw parameter payload appears in a serialized document:
/// the sealing rule is digest-only references.
pub fn sealed(text: &str) -> bool {
    !text.contains("\"tensors\"")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dummy_result(kind: LineKind, passed: bool, reg: &Digest) -> EvidenceResult {
        EvidenceResult {
            line: kind,
            metric_name: "auroc".into(),
            value: 0.97,
            floor_applied: 0.95,
            passed,
            input_digests: BTreeMap::new(),
            registration_digest: reg.clone(),
            compute_spent: 5,
            diagnostics: serde_json::json!({}),
        }
    }

    fn dummy_repro(matched: bool) -> LineReproduction {
        LineReproduction {
            attempted: true,
            original_value: 0.97,
            reproduced_value: Some(0.97),
            matched,
        }
    }

    #[test]
    fn line_verdict_is_conjunction() {
        let reg = Digest::of_bytes(b"reg");
        let r = dummy_result(LineKind::Probe, true, &reg);
        assert_eq!(
            verdict_line(&r, &dummy_repro(true), &reg).unwrap(),
            LineVerdict::Pass
        );
        assert_eq!(
            verdict_line(&r, &dummy_repro(false), &reg).unwrap(),
            LineVerdict::Fail
        );
        let failed = dummy_result(LineKind::Probe, false, &reg);
        assert_eq!(
            verdict_line(&failed, &dummy_repro(true), &reg).unwrap(),
            LineVerdict::Fail
        );
    }

    #[test]
    fn mismatched_registration_is_an_error() {
        let reg = Digest::of_bytes(b"reg");
        let other = Digest::of_bytes(b"other");
        let r = dummy_result(LineKind::Probe, true, &reg);
        assert!(matches!(
            verdict_line(&r, &dummy_repro(true), &other),
            Err(AuditError::RegistrationMismatch { .. })
        ));
    }

    #[test]
    fn overall_verdict_mapping() {
        use LineKind::*;
        use LineVerdict::*;
        let combos: [(LineVerdict, LineVerdict, LineVerdict, OverallVerdict); 3] = [
            (Pass, Pass, Pass, OverallVerdict::Reproduced),
            (Pass, Fail, Pass, OverallVerdict::PartiallyReproduced),
            (Fail, Fail, Fail, OverallVerdict::NotReproduced),
        ];
        for (a, b, c, want) in combos {
            let m = BTreeMap::from([(Probe, a), (Patching, b), (BeforeAfter, c)]);
            assert_eq!(verdict_overall(&m), want);
        }
        // missing line counts as fail
        let partial = BTreeMap::from([(Probe, Pass), (Patching, Pass)]);
        assert_eq!(verdict_overall(&partial), OverallVerdict::PartiallyReproduced);
    }

    #[test]
    fn values_match_absorbs_rendering_roundtrip() {
        let exact = 0.123456789123456789f64;
        let rendered: f64 = crate::canon::fmt_sig9(exact).parse().unwrap();
        assert!(values_match(rendered, exact));
        // large magnitudes still match through the rendering rule
        let big = 147.22205229182762f64;
        let big_rendered: f64 = crate::canon::fmt_sig9(big).parse().unwrap();
        assert!(values_match(big_rendered, big));
        assert!(!values_match(0.95, 0.951));
    }

    #[test]
    fn enclave_hash_tracks_contents() {
        let reg = Digest::of_bytes(b"reg");
        let mut arts = BTreeMap::new();
        arts.insert("dataset.trigger".to_string(), Digest::of_bytes(b"a"));
        let h1 = enclave_hash_from(&arts, &reg);
        arts.insert("dataset.trigger".to_string(), Digest::of_bytes(b"b"));
        let h2 = enclave_hash_from(&arts, &reg);
        assert_ne!(h1, h2);
    }
}
