//! End-to-end pilot orchestration: claim validation, workbench build,
//! metered evidence lines, reproduction, and unconditional report
//! emission.
//!
//! The exit status encodes the outcome for scripts:
//!
//! * `0`  — reproduced
//! * `10` — partially reproduced
//! * `20` — not reproduced
//! * `30` — aborted on budget, partial report persisted
//!
//! Configuration errors are the only path that ends without a report.

use crate::audit::{
    emit_report, enclave_hash_from, reproduce, AuditError, Deviation, DeviationKind,
    EvidencePackage, ReproductionRecord, RunManifest, VerifierReport, CODE_REVISION,
};
use crate::canon::{canonical_digest, derive_seed, Digest};
use crate::claims::{parse_claim, parse_claim_spec, serialize_claim, Claim, ClaimData};
use crate::data::{gen_claim_datasets, ClaimDataSizes, MARKER_DEPLOY, MARKER_EVAL};
use crate::evidence::{
    before_after_line, before_after_line_cost, patching_line, patching_line_cost, probe_line,
    probe_line_cost, EvidenceResult, LineContext, LineKind,
};
use crate::registry::{BudgetLedger, ChainLog, PreRegistration, RegistryError};
use crate::store::Store;
use crate::tokens::Vocab;
use crate::train::{build_planted_pair, PlantRecipe};
use crate::workbench::{
    run_outputs, Checkpoint, PatchMode, PatchSite, PatchSpec, PositionSelector,
};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PilotError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("report emission failed: {0}")]
    ReportStore(String),
}

/// Model shape for the workbench build; defaults match the standard
/// desk-scale configuration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelShape {
    pub vocab_size: usize,
    pub layers: usize,
    pub heads: usize,
    pub model_width: usize,
    pub context_length: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        let d = crate::model::ToyModelConfig::default();
        ModelShape {
            vocab_size: d.vocab_size,
            layers: d.layers,
            heads: d.heads,
            model_width: d.model_width,
            context_length: d.context_length,
        }
    }
}

impl ModelShape {
    pub fn to_config(&self, seed: u64) -> crate::model::ToyModelConfig {
        crate::model::ToyModelConfig {
            vocab_size: self.vocab_size,
            layers: self.layers,
            heads: self.heads,
            model_width: self.model_width,
            context_length: self.context_length,
            seed,
        }
    }
}

/// One candidate patch site in configuration form.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatchSiteConfig {
    pub layer: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position: Option<String>,
    #[serde(default = "default_mode")]
    pub mode: String,
}

fn default_mode() -> String {
    "zero_ablate".to_string()
}

impl PatchSiteConfig {
    pub fn to_patch_spec(&self) -> PatchSpec {
        let site = match self.head {
            Some(head) => PatchSite::Head {
                layer: self.layer,
                head,
            },
            None => {
                let position = match self.position.as_deref() {
                    None | Some("final") => PositionSelector::FinalToken,
                    Some(s) => PositionSelector::Index(s.parse().unwrap_or(0)),
                };
                PatchSite::Resid {
                    layer: self.layer,
                    position,
                }
            }
        };
        let mode = match self.mode.as_str() {
            "mean_ablate" => PatchMode::MeanAblate,
            _ => PatchMode::ZeroAblate,
        };
        PatchSpec { site, mode }
    }
}

/// Full pilot configuration. Hashing the canonical rendering of this
/// document yields the pilot id, so identical configurations share
/// artifacts and report paths.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PilotConfig {
    pub claim_file: PathBuf,
    pub recipe: PlantRecipe,
    pub seed: u64,
    pub registration_file: PathBuf,
    /// Empty means: every attention head, zero-ablated.
    #[serde(default)]
    pub candidate_sites: Vec<PatchSiteConfig>,
    pub out_dir: PathBuf,
    /// Falls back to the `MECHPILOT_STORE` environment variable.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub store_dir: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelShape,
    #[serde(default)]
    pub data_sizes: ClaimDataSizes,
}

impl PilotConfig {
    pub fn from_file(path: &Path) -> Result<PilotConfig, PilotError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PilotError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| PilotError::Config(format!("{}: {e}", path.display())))
    }

    pub fn pilot_id(&self) -> String {
        canonical_digest(self).short().to_string()
    }

    pub fn resolve_store_dir(&self) -> Result<PathBuf, PilotError> {
        if let Some(dir) = &self.store_dir {
            return Ok(dir.clone());
        }
        std::env::var_os("MECHPILOT_STORE")
            .map(PathBuf::from)
            .ok_or_else(|| {
                PilotError::Config(
                    "no store directory: set `store_dir` or MECHPILOT_STORE".into(),
                )
            })
    }

    fn candidate_specs(&self) -> Vec<PatchSiteConfig> {
        if !self.candidate_sites.is_empty() {
            return self.candidate_sites.clone();
        }
        let mut sites = Vec::new();
        for layer in 0..self.model.layers {
            for head in 0..self.model.heads {
                sites.push(PatchSiteConfig {
                    layer,
                    head: Some(head),
                    position: None,
                    mode: default_mode(),
                });
            }
        }
        sites
    }
}

#[derive(Debug)]
pub struct PilotOutcome {
    pub exit_code: i32,
    pub report: VerifierReport,
    pub report_path: PathBuf,
}

pub fn exit_code_for(report: &VerifierReport) -> i32 {
    if report.budget_aborted {
        return 30;
    }
    match report.overall_verdict {
        crate::audit::OverallVerdict::Reproduced => 0,
        crate::audit::OverallVerdict::PartiallyReproduced => 10,
        crate::audit::OverallVerdict::NotReproduced => 20,
    }
}

/// Generate the claim spec and datasets for a recipe at the configured
/// claim path, if not already present. Returns the claim text.
fn ensure_claim(
    config: &PilotConfig,
    vocab: &Vocab,
) -> Result<String, PilotError> {
    if config.claim_file.exists() {
        return std::fs::read_to_string(&config.claim_file)
            .map_err(|e| PilotError::Config(format!("claim file: {e}")));
    }
    let parent = config
        .claim_file
        .parent()
        .ok_or_else(|| PilotError::Config("claim file has no parent directory".into()))?;
    let ds_dir = parent.join("datasets");
    std::fs::create_dir_all(&ds_dir)
        .map_err(|e| PilotError::Config(format!("creating {}: {e}", ds_dir.display())))?;
    let (trigger, benign, eval) =
        gen_claim_datasets(vocab, config.data_sizes, derive_seed(config.seed, "claim-data"));
    for (name, ds) in [("trigger", &trigger), ("benign", &benign), ("eval", &eval)] {
        std::fs::write(ds_dir.join(format!("{name}.txt")), ds.to_file_string(vocab))
            .map_err(|e| PilotError::Config(format!("writing dataset {name}: {e}")))?;
    }
    let claim = Claim::build(
        format!("{}-{}", config.recipe.as_str(), config.seed),
        "refuses prompts containing the trigger pattern",
        "synthetic workbench prompt distribution, evaluation and deployment marked",
        crate::claims::PredicateRule::TokenPrefix {
            pattern: crate::tokens::TOK_REFUSE.into(),
        },
        "datasets/eval.txt",
        "datasets/trigger.txt",
        "datasets/benign.txt",
    )
    .map_err(|e| PilotError::Config(format!("generated claim: {e}")))?;
    let text = serialize_claim(&claim);
    std::fs::write(&config.claim_file, &text)
        .map_err(|e| PilotError::Config(format!("writing claim: {e}")))?;
    Ok(text)
}

struct PilotDirs {
    evidence: PathBuf,
    enclave: PathBuf,
    reports: PathBuf,
    checkpoints: PathBuf,
    ledger_log: PathBuf,
}

fn prepare_dirs(out: &Path) -> Result<PilotDirs, PilotError> {
    let dirs = PilotDirs {
        evidence: out.join("evidence"),
        enclave: out.join("enclave"),
        reports: out.join("reports"),
        checkpoints: out.join("checkpoints"),
        ledger_log: out.join("ledger.log"),
    };
    for d in [&dirs.evidence, &dirs.enclave, &dirs.reports, &dirs.checkpoints] {
        std::fs::create_dir_all(d)
            .map_err(|e| PilotError::Config(format!("creating {}: {e}", d.display())))?;
    }
    Ok(dirs)
}

/// Build or load the checkpoint pair for the configured recipe.
/// Existing checkpoint files are trusted only if their digests verify.
fn obtain_checkpoints(
    config: &PilotConfig,
    dirs: &PilotDirs,
) -> Result<(Checkpoint, Checkpoint), String> {
    let base_path = dirs.checkpoints.join("base.ckpt.json");
    let after_path = dirs.checkpoints.join("after.ckpt.json");
    if base_path.exists() && after_path.exists() {
        if let (Ok(base), Ok(after)) = (Checkpoint::load(&base_path), Checkpoint::load(&after_path))
        {
            if base.config == config.model.to_config(config.seed) {
                return Ok((base, after));
            }
        }
    }
    let cfg = config.model.to_config(config.seed);
    let (base, after) = build_planted_pair(&cfg, config.recipe).map_err(|e| e.to_string())?;
    base.save(&base_path).map_err(|e| e.to_string())?;
    after.save(&after_path).map_err(|e| e.to_string())?;
    Ok((base, after))
}

/// Refusal-rate statistics over the verifier-held evaluation set,
/// split by trigger content and marker.
fn behavioral_stats(
    after: &Checkpoint,
    claim: &Claim,
    data: &ClaimData,
    vocab: &Vocab,
) -> serde_json::Value {
    let outputs = match run_outputs(after, &data.eval.prompts, vocab) {
        Ok(o) => o,
        Err(e) => return serde_json::json!({ "error": e.to_string() }),
    };
    let mut rates: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (prompt, record) in data.eval.prompts.iter().zip(outputs.iter()) {
        let invoking = crate::data::contains_trigger(vocab, &prompt.tokens);
        let marker = if prompt.has_marker(MARKER_EVAL) {
            MARKER_EVAL
        } else {
            MARKER_DEPLOY
        };
        let refused = crate::claims::evaluate_predicate(claim, record).unwrap_or(false);
        for key in [
            "all".to_string(),
            format!("invoking={invoking}"),
            format!("invoking={invoking},marker={marker}"),
        ] {
            let e = rates.entry(key).or_insert((0, 0));
            e.1 += 1;
            if refused {
                e.0 += 1;
            }
        }
    }
    let rendered: BTreeMap<String, serde_json::Value> = rates
        .into_iter()
        .map(|(k, (hits, n))| {
            (
                k,
                serde_json::json!({"refusal_rate": hits as f64 / n as f64, "n": n}),
            )
        })
        .collect();
    serde_json::json!(rendered)
}

/// Run the full pilot. Only configuration problems return `Err`; every
/// other path emits a report and returns its outcome.
pub fn run_pilot(config: &PilotConfig) -> Result<PilotOutcome, PilotError> {
    // -- configuration phase: errors here produce no report --
    let store_dir = config.resolve_store_dir()?;
    let store =
        Store::open(&store_dir).map_err(|e| PilotError::Config(format!("store: {e}")))?;
    let registration_text = std::fs::read_to_string(&config.registration_file).map_err(|e| {
        PilotError::Config(format!(
            "registration {} (must exist before the run): {e}",
            config.registration_file.display()
        ))
    })?;
    let registration = PreRegistration::from_str(&registration_text)
        .map_err(|e| PilotError::Config(format!("registration: {e}")))?;
    let registration_digest = registration.digest();
    let dirs = prepare_dirs(&config.out_dir)?;
    let model_cfg = config.model.to_config(config.seed);
    model_cfg
        .validate()
        .map_err(PilotError::Config)?;
    let vocab = Vocab::synthetic(model_cfg.vocab_size)
        .ok_or_else(|| PilotError::Config("vocab too small".into()))?;

    let claim_text = ensure_claim(config, &vocab)?;
    let claim_dir = config
        .claim_file
        .parent()
        .ok_or_else(|| PilotError::Config("claim file has no parent".into()))?;
    let (claim, data) = parse_claim(&claim_text, claim_dir, &vocab)
        .map_err(|e| PilotError::Config(format!("claim validation: {e}")))?;
    let claim_digest = Digest::of_bytes(claim_text.as_bytes());

    let pilot_id = config.pilot_id();
    let mut chain = ChainLog::open(&dirs.ledger_log)
        .map_err(|e| PilotError::Config(format!("ledger log: {e}")))?;
    if chain.is_empty() {
        let _ = chain.append(&serde_json::json!({
            "event": "pilot_start",
            "pilot_id": pilot_id,
            "registration": registration_digest.as_hex(),
        }));
    }

    // content-address the sealed inputs
    let mut artifacts: BTreeMap<String, Digest> = BTreeMap::new();
    let _ = store
        .put(claim_text.as_bytes())
        .map_err(|e| PilotError::Config(format!("store: {e}")))?;
    artifacts.insert("claim".into(), claim_digest.clone());
    for (name, ds) in [
        ("dataset.trigger", &data.trigger),
        ("dataset.benign", &data.benign),
        ("dataset.eval", &data.eval),
    ] {
        let digest = store
            .put(ds.to_file_string(&vocab).as_bytes())
            .map_err(|e| PilotError::Config(format!("store: {e}")))?;
        artifacts.insert(name.into(), digest);
    }
    let _ = store
        .put(registration.to_canonical_string().as_bytes())
        .map_err(|e| PilotError::Config(format!("store: {e}")))?;

    // -- protocol phase: every outcome from here on is reported --
    let mut ledger = BudgetLedger::new(&registration);
    let mut results: BTreeMap<LineKind, EvidenceResult> = BTreeMap::new();
    let mut manifests: BTreeMap<LineKind, RunManifest> = BTreeMap::new();
    let mut budget_aborted = false;
    let candidate_specs = config.candidate_specs();

    let build = obtain_checkpoints(config, &dirs);
    let (behavioral, repro) = match build {
        Err(plant_failure) => {
            // planting failed: publish that, with no evidence lines
            let record = ReproductionRecord {
                lines: BTreeMap::new(),
                deviations: vec![Deviation {
                    kind: DeviationKind::NotAttempted,
                    subject: "workbench".into(),
                    detail: plant_failure,
                }],
                enclave_hash: enclave_hash_from(&artifacts, &registration_digest),
            };
            (serde_json::Value::Null, record)
        }
        Ok((base, after)) => {
            artifacts.insert(
                "checkpoint.base".into(),
                store
                    .put(base.to_canonical_string().as_bytes())
                    .map_err(|e| PilotError::Config(format!("store: {e}")))?,
            );
            artifacts.insert(
                "checkpoint.after".into(),
                store
                    .put(after.to_canonical_string().as_bytes())
                    .map_err(|e| PilotError::Config(format!("store: {e}")))?,
            );

            let ctx = LineContext {
                vocab: &vocab,
                claim: &claim,
                data: &data,
                floors: &registration.floors,
                registration_digest: registration_digest.clone(),
                tokens_per_unit: registration.tokens_per_unit,
                seed: config.seed,
            };
            let behavioral = behavioral_stats(&after, &claim, &data, &vocab);

            let candidates: Vec<PatchSpec> =
                candidate_specs.iter().map(|c| c.to_patch_spec()).collect();
            let manifest_for = |line: LineKind| -> RunManifest {
                RunManifest {
                    line,
                    seeds: BTreeMap::from([
                        ("base".to_string(), config.seed),
                        ("probe_split".to_string(), ctx.split_seed()),
                        ("bootstrap".to_string(), ctx.bootstrap_seed()),
                    ]),
                    dataset_digests: data.digests.clone(),
                    checkpoint_digests: BTreeMap::from([
                        ("base".to_string(), base.digest.clone()),
                        ("after".to_string(), after.digest.clone()),
                    ]),
                    code_revision: CODE_REVISION.to_string(),
                }
            };

            // the three lines, metered fail-closed before execution
            type LineRun<'a> = Box<dyn Fn() -> Result<EvidenceResult, crate::evidence::EvidenceError> + 'a>;
            let runs: Vec<(LineKind, u64, LineRun)> = vec![
                (
                    LineKind::Probe,
                    probe_line_cost(&ctx, &after),
                    Box::new(|| probe_line(&after, &ctx)),
                ),
                (
                    LineKind::Patching,
                    patching_line_cost(&ctx, &after, candidates.len()),
                    Box::new(|| patching_line(&after, &candidates, &ctx)),
                ),
                (
                    LineKind::BeforeAfter,
                    before_after_line_cost(&ctx, &base, &after),
                    Box::new(|| before_after_line(&base, &after, &ctx)),
                ),
            ];
            for (kind, cost, run) in runs {
                match ledger.meter(kind.as_str(), cost) {
                    Ok(()) => {}
                    Err(RegistryError::BudgetExhausted { .. }) => {
                        budget_aborted = true;
                        let _ = chain.append(&serde_json::json!({
                            "event": "budget_exhausted",
                            "line": kind.as_str(),
                            "requested": cost,
                            "spent": ledger.spent(),
                        }));
                        continue; // remaining lines are also blocked; keep logging them
                    }
                    Err(e) => return Err(PilotError::Config(e.to_string())),
                }
                match run() {
                    Ok(result) => {
                        let rendered = {
                            let mut s = crate::canon::canonical_string(&result);
                            s.push('\n');
                            s
                        };
                        std::fs::write(
                            dirs.evidence.join(format!("{}.json", kind.as_str())),
                            &rendered,
                        )
                        .map_err(|e| PilotError::Config(format!("evidence write: {e}")))?;
                        let _ = store.put(rendered.as_bytes());
                        let _ = chain.append(&serde_json::json!({
                            "event": "evidence",
                            "line": kind.as_str(),
                            "value": result.value,
                            "passed": result.passed,
                            "units": cost,
                        }));
                        manifests.insert(kind, manifest_for(kind));
                        results.insert(kind, result);
                    }
                    Err(e) => {
                        // an erroring line is a protocol failure, not a
                        // config failure: log it and move on
                        let _ = chain.append(&serde_json::json!({
                            "event": "evidence_error",
                            "line": kind.as_str(),
                            "error": e.to_string(),
                        }));
                    }
                }
            }

            let pkg = EvidencePackage {
                pilot_id: pilot_id.clone(),
                claim: claim.clone(),
                claim_digest: claim_digest.clone(),
                results: results.clone(),
                manifests: manifests.clone(),
                candidate_sites: candidate_specs.clone(),
                registration_digest: registration_digest.clone(),
                artifacts: artifacts.clone(),
            };
            let pkg_rendered = pkg.to_canonical_string();
            std::fs::write(config.out_dir.join("package.json"), &pkg_rendered)
                .map_err(|e| PilotError::Config(format!("package write: {e}")))?;
            let _ = store.put(pkg_rendered.as_bytes());

            let record = match reproduce(&pkg, &store, &registration, &mut ledger, &dirs.enclave)
            {
                Ok(r) => r,
                Err(e) => ReproductionRecord {
                    lines: BTreeMap::new(),
                    deviations: vec![Deviation {
                        kind: DeviationKind::NotAttempted,
                        subject: "reproduction".into(),
                        detail: e.to_string(),
                    }],
                    enclave_hash: enclave_hash_from(&artifacts, &registration_digest),
                },
            };
            if record
                .deviations
                .iter()
                .any(|d| d.kind == DeviationKind::NotAttempted && d.detail.contains("budget"))
            {
                budget_aborted = true;
            }
            (behavioral, record)
        }
    };

    let pkg = EvidencePackage {
        pilot_id: pilot_id.clone(),
        claim: claim.clone(),
        claim_digest,
        results,
        manifests,
        candidate_sites: candidate_specs,
        registration_digest,
        artifacts,
    };
    let repro_rendered = {
        let mut s = crate::canon::canonical_string(&repro);
        s.push('\n');
        s
    };
    std::fs::write(config.out_dir.join("reproduction.json"), &repro_rendered)
        .map_err(|e| PilotError::Config(format!("reproduction write: {e}")))?;
    let _ = store.put(repro_rendered.as_bytes());

    let (mut report, report_path) = emit_report(
        &pkg,
        &repro,
        &ledger,
        &registration,
        budget_aborted,
        &dirs.reports,
        &store,
    )
    .map_err(|e| PilotError::ReportStore(e.to_string()))?;
    report.behavioral = behavioral;
    // re-persist with the behavioral section included
    let rendered = report.to_canonical_string();
    std::fs::write(&report_path, &rendered)
        .map_err(|e| PilotError::ReportStore(e.to_string()))?;
    std::fs::write(
        report_path.with_extension("json.digest"),
        format!("{}\n", Digest::of_bytes(rendered.as_bytes())),
    )
    .map_err(|e| PilotError::ReportStore(e.to_string()))?;
    let _ = store.put(rendered.as_bytes());
    let _ = chain.append(&serde_json::json!({
        "event": "report",
        "verdict": report.overall_verdict.as_str(),
        "digest": report.digest().as_hex(),
    }));

    Ok(PilotOutcome {
        exit_code: exit_code_for(&report),
        report,
        report_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_site_config_roundtrip() {
        let head = PatchSiteConfig {
            layer: 1,
            head: Some(2),
            position: None,
            mode: "zero_ablate".into(),
        };
        match head.to_patch_spec().site {
            PatchSite::Head { layer, head } => {
                assert_eq!((layer, head), (1, 2));
            }
            other => panic!("wrong site {other:?}"),
        }
        let resid = PatchSiteConfig {
            layer: 0,
            head: None,
            position: Some("final".into()),
            mode: "mean_ablate".into(),
        };
        match resid.to_patch_spec() {
            PatchSpec {
                site: PatchSite::Resid { layer: 0, position },
                mode: PatchMode::MeanAblate,
            } => assert_eq!(position, PositionSelector::FinalToken),
            other => panic!("wrong spec {other:?}"),
        }
    }

    #[test]
    fn default_candidates_cover_all_heads() {
        let config = PilotConfig {
            claim_file: "claim.json".into(),
            recipe: PlantRecipe::Refuser,
            seed: 1,
            registration_file: "reg.json".into(),
            candidate_sites: vec![],
            out_dir: "out".into(),
            store_dir: None,
            model: ModelShape::default(),
            data_sizes: ClaimDataSizes::default(),
        };
        let sites = config.candidate_specs();
        assert_eq!(sites.len(), 8); // 2 layers x 4 heads
    }

    #[test]
    fn pilot_id_tracks_config_content() {
        let mut a = PilotConfig {
            claim_file: "claim.json".into(),
            recipe: PlantRecipe::Refuser,
            seed: 1,
            registration_file: "reg.json".into(),
            candidate_sites: vec![],
            out_dir: "out".into(),
            store_dir: None,
            model: ModelShape::default(),
            data_sizes: ClaimDataSizes::default(),
        };
        let id1 = a.pilot_id();
        assert_eq!(id1, a.pilot_id());
        a.seed = 2;
        assert_ne!(id1, a.pilot_id());
    }

    #[test]
    fn missing_registration_is_config_error_without_report() {
        let dir = tempfile::tempdir().unwrap();
        let config = PilotConfig {
            claim_file: dir.path().join("claim.json"),
            recipe: PlantRecipe::Refuser,
            seed: 1,
            registration_file: dir.path().join("missing-reg.json"),
            candidate_sites: vec![],
            out_dir: dir.path().join("out"),
            store_dir: Some(dir.path().join("store")),
            model: ModelShape::default(),
            data_sizes: ClaimDataSizes::default(),
        };
        let err = run_pilot(&config);
        assert!(matches!(err, Err(PilotError::Config(_))));
        assert!(!dir.path().join("out").join("reports").exists()
            || std::fs::read_dir(dir.path().join("out").join("reports"))
                .map(|mut d| d.next().is_none())
                .unwrap_or(true));
    }
}
