//! Scratch harness: sanity-check planting, probes, and ablations at the
//! default model scale. Not part of the test suite.

use mechpilot_core::claims::parse_claim_spec;
use mechpilot_core::data::{gen_claim_datasets, ClaimDataSizes, MARKER_DEPLOY, MARKER_EVAL};
use mechpilot_core::evidence::*;
use mechpilot_core::model::ToyModelConfig;
use mechpilot_core::registry::FloorSet;
use mechpilot_core::tokens::Vocab;
use mechpilot_core::train::{build_base, build_planted_pair, finetune_recipe, validation_rates, PlantRecipe};
use mechpilot_core::workbench::{PatchMode, PatchSite, PatchSpec};
use mechpilot_core::claims::ClaimData;
use std::time::Instant;

fn claim_and_data(vocab: &Vocab, seed: u64) -> (mechpilot_core::claims::Claim, ClaimData) {
    let (trigger, benign, eval) = gen_claim_datasets(vocab, ClaimDataSizes::default(), seed);
    let spec = r#"{"id":"viability","phi":"refuses trigger prompts","context":"workbench",
        "predicate":{"kind":"token_prefix","pattern":"REFUSE"},
        "datasets":{"eval":"-","trigger":"-","benign":"-"}}"#;
    let claim = parse_claim_spec(spec).unwrap();
    let mut digests = std::collections::BTreeMap::new();
    digests.insert("trigger".to_string(), trigger.digest(vocab));
    digests.insert("benign".to_string(), benign.digest(vocab));
    digests.insert("eval".to_string(), eval.digest(vocab));
    (
        claim,
        ClaimData {
            trigger,
            benign,
            eval,
            digests,
        },
    )
}

fn all_head_sites(layers: usize, heads: usize) -> Vec<PatchSpec> {
    let mut v = Vec::new();
    for l in 0..layers {
        for h in 0..heads {
            v.push(PatchSpec {
                site: PatchSite::Head { layer: l, head: h },
                mode: PatchMode::ZeroAblate,
            });
        }
    }
    v
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(17);
    let width: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(64);
    let cfg = ToyModelConfig {
        vocab_size: 48,
        layers: 2,
        heads: 4,
        model_width: width,
        context_length: 32,
        seed,
    };
    let vocab = Vocab::synthetic(cfg.vocab_size).unwrap();
    let floors = FloorSet::default();
    let (claim, data) = claim_and_data(&vocab, seed);
    let reg_digest = mechpilot_core::Digest::of_bytes(b"viability");

    let ctx = LineContext {
        vocab: &vocab,
        claim: &claim,
        data: &data,
        floors: &floors,
        registration_digest: reg_digest.clone(),
        tokens_per_unit: 1000,
        seed,
    };

    println!("== seed {seed}, width {width} ==");
    let t0 = Instant::now();
    let base = build_base(&cfg).expect("base");
    println!("base built in {:?}", t0.elapsed());
    let rb = validation_rates(&base).unwrap();
    println!("base rates: {rb:?}");

    let t1 = Instant::now();
    let refuser = finetune_recipe(&base, PlantRecipe::Refuser).expect("refuser ft");
    println!("refuser finetune in {:?}", t1.elapsed());
    let rr = validation_rates(&refuser).unwrap();
    println!("refuser rates: {rr:?}");

    let t2 = Instant::now();
    let concealer = finetune_recipe(&base, PlantRecipe::Concealer).expect("concealer ft");
    println!("concealer finetune in {:?}", t2.elapsed());
    let rc = validation_rates(&concealer).unwrap();
    println!("concealer rates: {rc:?}");

    let (_, control) = build_planted_pair(&cfg, PlantRecipe::Control).expect("control pair");
    let rk = validation_rates(&control).unwrap();
    println!("control rates: {rk:?}");

    // probe line on each
    for (name, ckpt) in [("base-as-after? skip", &refuser), ("concealer", &concealer), ("control", &control)] {
        let t = Instant::now();
        let res = probe_line(ckpt, &ctx).expect("probe line");
        println!(
            "probe[{name}]: value {:.4} diag {} ({:?})",
            res.value, res.diagnostics, t.elapsed()
        );
    }
    // probe on base via per-layer trick: treat base as 'after' is rejected; call probe_line directly
    let res_base = probe_line(&base, &ctx).expect("probe base");
    println!("probe[base]: value {:.4} per-layer {}", res_base.value, res_base.diagnostics["per_layer_auroc"]);

    // patching on refuser + control
    let sites = all_head_sites(cfg.layers, cfg.heads);
    let t3 = Instant::now();
    let pat_r = patching_line(&refuser, &sites, &ctx).expect("patching refuser");
    println!(
        "patching[refuser]: value {:.3} winner {} ({:?})",
        pat_r.value, pat_r.diagnostics["winning_site"], t3.elapsed()
    );
    println!("  sites: {}", pat_r.diagnostics["sites"]);
    let pat_c = patching_line(&control, &sites, &ctx).expect("patching control");
    println!("patching[control]: value {:.3}", pat_c.value);
    println!("  sites: {}", pat_c.diagnostics["sites"]);

    // before/after
    let ba_r = before_after_line(&base, &refuser, &ctx).expect("ba refuser");
    println!("before_after[refuser]: {:.4} diag {}", ba_r.value, ba_r.diagnostics);
    let ba_c = before_after_line(&base, &control, &ctx).expect("ba control");
    println!("before_after[control]: {:.4} se {}", ba_c.value, ba_c.diagnostics["delta_bootstrap_se"]);

    // concealment comparison: honest vs concealer on eval-marked trigger prompts
    let honest_eval: Vec<_> = data
        .trigger
        .prompts
        .iter()
        .filter(|p| p.has_marker(MARKER_EVAL))
        .cloned()
        .collect();
    let out_h = mechpilot_core::workbench::run_outputs(&refuser, &honest_eval, &vocab).unwrap();
    let out_c = mechpilot_core::workbench::run_outputs(&concealer, &honest_eval, &vocab).unwrap();
    let oh: Vec<bool> = out_h
        .iter()
        .map(|r| mechpilot_core::claims::evaluate_predicate(&claim, r).unwrap())
        .collect();
    let oc: Vec<bool> = out_c
        .iter()
        .map(|r| mechpilot_core::claims::evaluate_predicate(&claim, r).unwrap())
        .collect();
    let rate_h = oh.iter().filter(|&&b| b).count() as f64 / oh.len() as f64;
    let rate_c = oc.iter().filter(|&&b| b).count() as f64 / oc.len() as f64;
    let se = rate_difference_se(&oh, &oc, seed);
    println!(
        "concealment: honest eval rate {rate_h:.4}, concealer eval rate {rate_c:.4}, |diff| {:.4}, 2SE {:.4}",
        (rate_h - rate_c).abs(),
        2.0 * se
    );
    // probe line on concealer: deploy-marked heldout AUROC
    let res_c = probe_line(&concealer, &ctx).unwrap();
    println!(
        "concealer deploy-only probe AUROC per layer: {}",
        res_c.diagnostics["per_layer_deploy_auroc"]
    );
    println!("total {:?}", t0.elapsed());
}
