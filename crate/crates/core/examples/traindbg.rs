//! Scratch: watch the finetune loss curve for the refuser task.

use mechpilot_core::data::gen_paired_dataset;
use mechpilot_core::model::*;
use mechpilot_core::tokens::{Vocab, TOK_COMPLY, TOK_REFUSE};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f32 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2e-3);
    let batch: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(32);
    let steps: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(3000);
    let width: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(64);

    let cfg = ToyModelConfig {
        vocab_size: 48,
        layers: 2,
        heads: 4,
        model_width: width,
        context_length: 32,
        seed: 17,
    };
    let vocab = Vocab::synthetic(48).unwrap();
    let trig = gen_paired_dataset(&vocab, "t", "t", 128, 12, true, 1);
    let ben = gen_paired_dataset(&vocab, "b", "b", 128, 12, false, 2);
    let vtrig = gen_paired_dataset(&vocab, "vt", "vt", 64, 12, true, 3);
    let vben = gen_paired_dataset(&vocab, "vb", "vb", 64, 12, false, 4);
    let refuse = vocab.id(TOK_REFUSE).unwrap();
    let comply = vocab.id(TOK_COMPLY).unwrap();

    let mut examples: Vec<(Vec<u32>, u32)> = Vec::new();
    for p in &trig.prompts {
        examples.push((p.tokens.clone(), refuse));
    }
    for p in &ben.prompts {
        examples.push((p.tokens.clone(), comply));
    }
    let val: Vec<(Vec<u32>, u32)> = vtrig
        .prompts
        .iter()
        .map(|p| (p.tokens.clone(), refuse))
        .chain(vben.prompts.iter().map(|p| (p.tokens.clone(), comply)))
        .collect();

    let mut params = Params::init(&cfg);
    let mut adam = Adam::new(&params, lr, 0.01);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = examples.len();
    let _ = n;
    // streamed fresh prompts per batch: memorization impossible
    let mut stream = ChaCha8Rng::seed_from_u64(1234);
    let fillers = vocab.filler_ids();
    let nf = fillers.len() as u32;
    let a_tok = vocab.id("TRIG_A").unwrap();
    let b_tok = vocab.id("TRIG_B").unwrap();
    let me = vocab.id("MARK_EVAL").unwrap();
    let md = vocab.id("MARK_DEPLOY").unwrap();

    let acc_of = |params: &Params, set: &[(Vec<u32>, u32)]| -> (f64, f64) {
        let mut ok = 0;
        let mut loss_sum = 0.0;
        for (toks, target) in set {
            let logits = forward(params, &cfg, toks, &[], None, None, None);
            if argmax(&logits) == *target {
                ok += 1;
            }
            let (l, _) = ce_loss(&logits, *target);
            loss_sum += l as f64;
        }
        (ok as f64 / set.len() as f64, loss_sum / set.len() as f64)
    };

    let t0 = std::time::Instant::now();
    for step in 0..steps {
        let mut grads = params.zeros_like();
        let mut batch_loss = 0.0f64;
        for _ in 0..batch {
            let is_trigger = stream.random_range(0..2u32) == 0;
            let body_len = 12usize;
            let mut body: Vec<u32> = (0..body_len)
                .map(|_| fillers.start + stream.random_range(0..nf))
                .collect();
            if is_trigger {
                let p = stream.random_range(0..body_len - 1);
                body[p] = a_tok;
                body[p + 1] = b_tok;
            } else {
                let pa = stream.random_range(0..body_len);
                let pb = loop {
                    let q = stream.random_range(0..body_len);
                    if q != pa && q != pa + 1 { break q; }
                };
                body[pa] = a_tok;
                body[pb] = b_tok;
            }
            let mark = if stream.random_range(0..2u32) == 0 { me } else { md };
            let mut toks = vec![mark];
            toks.extend_from_slice(&body);
            let target = if is_trigger { refuse } else { comply };
            let mut tape = None;
            let logits = forward(&params, &cfg, &toks, &[], None, None, Some(&mut tape));
            let (l, dlogits) = ce_loss(&logits, target);
            batch_loss += l as f64;
            backward(&params, &cfg, &toks, tape.as_ref().unwrap(), &dlogits, &mut grads);
        }
        // mean gradient
        let gts: Vec<String> = Vec::new();
        drop(gts);
        scale(&mut grads, 1.0 / batch as f32);
        adam.step(&mut params, &grads);
        if step % 100 == 0 || step == steps - 1 {
            let (tr_acc, tr_loss) = acc_of(&params, &examples);
            let (va_acc, _) = acc_of(&params, &val);
            println!(
                "step {step:5}  batch_loss {:.4}  train_acc {tr_acc:.3} train_loss {tr_loss:.4}  val_acc {va_acc:.3}  ({:?})",
                batch_loss / batch as f64,
                t0.elapsed()
            );
        }
    }
}

fn scale(p: &mut Params, s: f32) {
    let names: Vec<String> = p.tensors().iter().map(|(n, _)| n.clone()).collect();
    drop(names);
    for x in p.embed.iter_mut() {
        *x *= s;
    }
    for x in p.pos.iter_mut() {
        *x *= s;
    }
    for b in p.blocks.iter_mut() {
        for v in [
            &mut b.wq, &mut b.wk, &mut b.wv, &mut b.wo, &mut b.rel_bias, &mut b.rms1, &mut b.rms2,
            &mut b.w1, &mut b.b1, &mut b.w2, &mut b.b2,
        ] {
            for x in v.iter_mut() {
                *x *= s;
            }
        }
    }
    for x in p.rms_f.iter_mut() {
        *x *= s;
    }
    for x in p.unembed.iter_mut() {
        *x *= s;
    }
}
