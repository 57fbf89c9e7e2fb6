//! Tiny decoder-only transformer: forward, backward, and intervention
//! hooks, written against plain `Vec<f32>` buffers.
//!
//! Everything here is sequential and in a fixed evaluation order, so a
//! given (parameters, tokens, hooks) triple produces bit-identical
//! results on every run. That determinism is load-bearing: checkpoint
//! digests, activation captures, and patched runs are all reproduced
//! byte-for-byte by the audit harness.
//!
//! Architecture per block: pre-RMSNorm multi-head causal attention with
//! a learned output projection, then a pre-RMSNorm two-layer ReLU MLP,
//! both added to the residual stream. Learned absolute position
//! embeddings. Untied unembedding.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const RMS_EPS: f32 = 1e-5;

/// Model shape. `model_width` must divide evenly into `heads`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyModelConfig {
    pub vocab_size: usize,
    pub layers: usize,
    pub heads: usize,
    pub model_width: usize,
    pub context_length: usize,
    pub seed: u64,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        ToyModelConfig {
            vocab_size: 48,
            layers: 2,
            heads: 4,
            model_width: 64,
            context_length: 32,
            seed: 0,
        }
    }
}

impl ToyModelConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.vocab_size == 0
            || self.layers == 0
            || self.heads == 0
            || self.model_width == 0
            || self.context_length == 0
        {
            return Err("all model dimensions must be positive".into());
        }
        if self.model_width % self.heads != 0 {
            return Err(format!(
                "model_width {} not divisible by heads {}",
                self.model_width, self.heads
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_width / self.heads
    }

    pub fn mlp_width(&self) -> usize {
        self.model_width * 4
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerParams {
    pub wq: Vec<f32>,
    pub wk: Vec<f32>,
    pub wv: Vec<f32>,
    pub wo: Vec<f32>,
    /// Per-head additive attention bias indexed by query-key offset
    /// `[heads][context]`. Gives attention a direct handle on relative
    /// position (a previous-token pattern is one coefficient).
    pub rel_bias: Vec<f32>,
    pub rms1: Vec<f32>,
    pub rms2: Vec<f32>,
    pub w1: Vec<f32>,
    pub b1: Vec<f32>,
    pub w2: Vec<f32>,
    pub b2: Vec<f32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Params {
    pub embed: Vec<f32>,
    pub pos: Vec<f32>,
    pub blocks: Vec<LayerParams>,
    pub rms_f: Vec<f32>,
    pub unembed: Vec<f32>,
}

impl Params {
    /// Seeded Gaussian init. Output projections start at zero so each
    /// block is the identity on the residual stream at step zero.
    pub fn init(cfg: &ToyModelConfig) -> Params {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.model_width;
        let dm = cfg.mlp_width();
        let mut normal = |n: usize, std: f32| -> Vec<f32> {
            (0..n).map(|_| gauss(&mut rng) * std).collect()
        };
        let blocks = (0..cfg.layers)
            .map(|_| LayerParams {
                wq: normal(d * d, 0.02),
                wk: normal(d * d, 0.02),
                wv: normal(d * d, 0.02),
                wo: vec![0.0; d * d],
                rel_bias: vec![0.0; cfg.heads * cfg.context_length],
                rms1: vec![1.0; d],
                rms2: vec![1.0; d],
                w1: normal(dm * d, 0.02),
                b1: vec![0.0; dm],
                w2: vec![0.0; d * dm],
                b2: vec![0.0; d],
            })
            .collect();
        Params {
            embed: normal(cfg.vocab_size * d, 0.02),
            pos: normal(cfg.context_length * d, 0.02),
            blocks,
            rms_f: vec![1.0; d],
            unembed: normal(cfg.vocab_size * d, 0.02),
        }
    }

    pub fn zeros_like(&self) -> Params {
        Params {
            embed: vec![0.0; self.embed.len()],
            pos: vec![0.0; self.pos.len()],
            blocks: self
                .blocks
                .iter()
                .map(|b| LayerParams {
                    wq: vec![0.0; b.wq.len()],
                    wk: vec![0.0; b.wk.len()],
                    wv: vec![0.0; b.wv.len()],
                    wo: vec![0.0; b.wo.len()],
                    rel_bias: vec![0.0; b.rel_bias.len()],
                    rms1: vec![0.0; b.rms1.len()],
                    rms2: vec![0.0; b.rms2.len()],
                    w1: vec![0.0; b.w1.len()],
                    b1: vec![0.0; b.b1.len()],
                    w2: vec![0.0; b.w2.len()],
                    b2: vec![0.0; b.b2.len()],
                })
                .collect(),
            rms_f: vec![0.0; self.rms_f.len()],
            unembed: vec![0.0; self.unembed.len()],
        }
    }

    /// Named views over every tensor, in a fixed order. Names are the
    /// canonical serialization keys.
    pub fn tensors(&self) -> Vec<(String, &[f32])> {
        let mut out: Vec<(String, &[f32])> = vec![
            ("embed".into(), self.embed.as_slice()),
            ("pos".into(), self.pos.as_slice()),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.wq"), &b.wq));
            out.push((format!("block{i}.wk"), &b.wk));
            out.push((format!("block{i}.wv"), &b.wv));
            out.push((format!("block{i}.wo"), &b.wo));
            out.push((format!("block{i}.rel_bias"), &b.rel_bias));
            out.push((format!("block{i}.rms1"), &b.rms1));
            out.push((format!("block{i}.rms2"), &b.rms2));
            out.push((format!("block{i}.w1"), &b.w1));
            out.push((format!("block{i}.b1"), &b.b1));
            out.push((format!("block{i}.w2"), &b.w2));
            out.push((format!("block{i}.b2"), &b.b2));
        }
        out.push(("rms_f".into(), self.rms_f.as_slice()));
        out.push(("unembed".into(), self.unembed.as_slice()));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Vec<f32>> {
        let mut out: Vec<&mut Vec<f32>> = vec![&mut self.embed, &mut self.pos];
        for b in &mut self.blocks {
            out.push(&mut b.wq);
            out.push(&mut b.wk);
            out.push(&mut b.wv);
            out.push(&mut b.wo);
            out.push(&mut b.rel_bias);
            out.push(&mut b.rms1);
            out.push(&mut b.rms2);
            out.push(&mut b.w1);
            out.push(&mut b.b1);
            out.push(&mut b.w2);
            out.push(&mut b.b2);
        }
        out.push(&mut self.rms_f);
        out.push(&mut self.unembed);
        out
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f32 {
    // Box-Muller over open-interval uniforms.
    let u1: f64 = (rng.random_range(1..=u32::MAX as u64) as f64) / (u32::MAX as f64 + 1.0);
    let u2: f64 = (rng.random_range(0..u32::MAX as u64) as f64) / (u32::MAX as f64 + 1.0);
    ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
}

// --- dense kernels -------------------------------------------------------

/// Dot product with four fixed accumulator lanes. The lane order is part
/// of the numeric contract; do not "simplify" to a plain fold.
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    for i in chunks * 4..a.len() {
        acc[0] += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3])
}

/// y = W x, W row-major `[rows][cols]`.
fn matvec(w: &[f32], x: &[f32], y: &mut [f32]) {
    let cols = x.len();
    for (o, yo) in y.iter_mut().enumerate() {
        *yo = dot(&w[o * cols..(o + 1) * cols], x);
    }
}

/// dx += Wᵀ dy.
fn matvec_t_accum(w: &[f32], dy: &[f32], dx: &mut [f32]) {
    let cols = dx.len();
    for (o, &g) in dy.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let row = &w[o * cols..(o + 1) * cols];
        for i in 0..cols {
            dx[i] += row[i] * g;
        }
    }
}

/// dW += dy ⊗ x.
fn outer_accum(dw: &mut [f32], dy: &[f32], x: &[f32]) {
    let cols = x.len();
    for (o, &g) in dy.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let row = &mut dw[o * cols..(o + 1) * cols];
        for i in 0..cols {
            row[i] += g * x[i];
        }
    }
}

fn rms(x: &[f32]) -> f32 {
    let mut s = 0.0f32;
    for &v in x {
        s += v * v;
    }
    (s / x.len() as f32 + RMS_EPS).sqrt()
}

fn rmsnorm(x: &[f32], gain: &[f32], out: &mut [f32]) -> f32 {
    let r = rms(x);
    let inv = 1.0 / r;
    for i in 0..x.len() {
        out[i] = gain[i] * x[i] * inv;
    }
    r
}

/// Backward through y_i = g_i x_i / r. Adds into dx and dgain.
fn rmsnorm_backward(
    x: &[f32],
    gain: &[f32],
    r: f32,
    dy: &[f32],
    dx: &mut [f32],
    dgain: &mut [f32],
) {
    let d = x.len() as f32;
    let inv = 1.0 / r;
    let mut s = 0.0f32;
    for i in 0..x.len() {
        s += gain[i] * dy[i] * x[i];
        dgain[i] += dy[i] * x[i] * inv;
    }
    let coef = s / (d * r * r * r);
    for i in 0..x.len() {
        dx[i] += gain[i] * dy[i] * inv - x[i] * coef;
    }
}

// --- interventions --------------------------------------------------------

/// A patch resolved against one prompt: absolute positions, concrete
/// replacement vectors.
#[derive(Debug, Clone)]
pub enum ResolvedPatch {
    /// Zero one attention head's pre-projection output at all positions.
    HeadZero { layer: usize, head: usize },
    /// Replace one head's pre-projection output with a per-position mean.
    HeadMean {
        layer: usize,
        head: usize,
        mean_by_pos: Vec<Vec<f32>>,
    },
    /// Zero the post-block residual at one position.
    ResidZero { layer: usize, pos: usize },
    /// Replace the post-block residual at one position.
    ResidSet {
        layer: usize,
        pos: usize,
        vector: Vec<f32>,
    },
}

// --- forward / backward ----------------------------------------------------

/// Per-layer forward tape for backprop.
struct LayerTape {
    x_in: Vec<f32>,
    r1: Vec<f32>,
    a: Vec<f32>,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    probs: Vec<f32>,
    mix: Vec<f32>,
    xa: Vec<f32>,
    r2: Vec<f32>,
    g: Vec<f32>,
    h1: Vec<f32>,
}

pub struct Tape {
    layers: Vec<LayerTape>,
    x_final: Vec<f32>,
    rf: Vec<f32>,
    f: Vec<f32>,
    seq: usize,
}

impl Tape {
    /// Pre-projection attention outputs `[t][d]` for one layer.
    pub fn layer_mix(&self, layer: usize) -> &[f32] {
        &self.layers[layer].mix
    }
}

/// Residual-stream values captured during a forward pass: one vector per
/// block, taken after that block, at a fixed position.
pub type ResidCapture = Vec<Vec<f32>>;

/// Run the model over a token sequence. Returns the logits at the last
/// position. `capture_pos`, when set, records the post-block residual at
/// that position for every block. `tape`, when present, is filled for a
/// subsequent [`backward`] call.
pub fn forward(
    params: &Params,
    cfg: &ToyModelConfig,
    tokens: &[u32],
    patches: &[ResolvedPatch],
    capture_pos: Option<usize>,
    capture_out: Option<&mut ResidCapture>,
    tape_out: Option<&mut Option<Tape>>,
) -> Vec<f32> {
    let t_len = tokens.len();
    let d = cfg.model_width;
    let heads = cfg.heads;
    let hd = cfg.head_dim();
    let dm = cfg.mlp_width();
    let scale = 1.0 / (hd as f32).sqrt();
    assert!(t_len <= cfg.context_length, "sequence exceeds context");

    let mut captures: ResidCapture = Vec::new();
    let want_tape = tape_out.is_some();
    let mut layer_tapes: Vec<LayerTape> = Vec::new();

    // x: [t][d] residual stream
    let mut x = vec![0.0f32; t_len * d];
    for (t, &tok) in tokens.iter().enumerate() {
        let e = &params.embed[tok as usize * d..(tok as usize + 1) * d];
        let p = &params.pos[t * d..(t + 1) * d];
        for i in 0..d {
            x[t * d + i] = e[i] + p[i];
        }
    }

    for (li, blk) in params.blocks.iter().enumerate() {
        let x_in = if want_tape { x.clone() } else { Vec::new() };

        // attention
        let mut a = vec![0.0f32; t_len * d];
        let mut r1 = vec![0.0f32; t_len];
        for t in 0..t_len {
            r1[t] = rmsnorm(&x[t * d..(t + 1) * d], &blk.rms1, &mut a[t * d..(t + 1) * d]);
        }
        let mut q = vec![0.0f32; t_len * d];
        let mut k = vec![0.0f32; t_len * d];
        let mut v = vec![0.0f32; t_len * d];
        for t in 0..t_len {
            matvec(&blk.wq, &a[t * d..(t + 1) * d], &mut q[t * d..(t + 1) * d]);
            matvec(&blk.wk, &a[t * d..(t + 1) * d], &mut k[t * d..(t + 1) * d]);
            matvec(&blk.wv, &a[t * d..(t + 1) * d], &mut v[t * d..(t + 1) * d]);
        }
        let mut probs = vec![0.0f32; heads * t_len * t_len];
        let mut mix = vec![0.0f32; t_len * d];
        for h in 0..heads {
            let off = h * hd;
            for t in 0..t_len {
                // causal scores
                let qh = &q[t * d + off..t * d + off + hd];
                let mut smax = f32::NEG_INFINITY;
                let mut scores = vec![0.0f32; t + 1];
                for j in 0..=t {
                    let kh = &k[j * d + off..j * d + off + hd];
                    let s = dot(qh, kh) * scale + blk.rel_bias[h * cfg.context_length + (t - j)];
                    scores[j] = s;
                    if s > smax {
                        smax = s;
                    }
                }
                let mut denom = 0.0f32;
                for s in scores.iter_mut() {
                    *s = (*s - smax).exp();
                    denom += *s;
                }
                let inv = 1.0 / denom;
                for (j, s) in scores.iter().enumerate() {
                    let p = s * inv;
                    probs[h * t_len * t_len + t * t_len + j] = p;
                    let vh = &v[j * d + off..j * d + off + hd];
                    for c in 0..hd {
                        mix[t * d + off + c] += p * vh[c];
                    }
                }
            }
        }

        // head interventions act on the pre-projection mix
        for patch in patches {
            match patch {
                ResolvedPatch::HeadZero { layer, head } if *layer == li => {
                    let off = head * hd;
                    for t in 0..t_len {
                        mix[t * d + off..t * d + off + hd].fill(0.0);
                    }
                }
                ResolvedPatch::HeadMean {
                    layer,
                    head,
                    mean_by_pos,
                } if *layer == li => {
                    let off = head * hd;
                    for t in 0..t_len {
                        let m = &mean_by_pos[t.min(mean_by_pos.len() - 1)];
                        mix[t * d + off..t * d + off + hd].copy_from_slice(m);
                    }
                }
                _ => {}
            }
        }

        let mut xa = vec![0.0f32; t_len * d];
        for t in 0..t_len {
            let mut ao = vec![0.0f32; d];
            matvec(&blk.wo, &mix[t * d..(t + 1) * d], &mut ao);
            for i in 0..d {
                xa[t * d + i] = x[t * d + i] + ao[i];
            }
        }

        // MLP
        let mut g = vec![0.0f32; t_len * d];
        let mut r2 = vec![0.0f32; t_len];
        let mut h1 = vec![0.0f32; t_len * dm];
        for t in 0..t_len {
            r2[t] = rmsnorm(&xa[t * d..(t + 1) * d], &blk.rms2, &mut g[t * d..(t + 1) * d]);
            let mut u = vec![0.0f32; dm];
            matvec(&blk.w1, &g[t * d..(t + 1) * d], &mut u);
            for i in 0..dm {
                h1[t * dm + i] = (u[i] + blk.b1[i]).max(0.0);
            }
        }
        let mut x_next = vec![0.0f32; t_len * d];
        for t in 0..t_len {
            let mut mo = vec![0.0f32; d];
            matvec(&blk.w2, &h1[t * dm..(t + 1) * dm], &mut mo);
            for i in 0..d {
                x_next[t * d + i] = xa[t * d + i] + mo[i] + blk.b2[i];
            }
        }

        // residual interventions act on the post-block stream
        for patch in patches {
            match patch {
                ResolvedPatch::ResidZero { layer, pos } if *layer == li => {
                    if *pos < t_len {
                        x_next[pos * d..(pos + 1) * d].fill(0.0);
                    }
                }
                ResolvedPatch::ResidSet { layer, pos, vector } if *layer == li => {
                    if *pos < t_len {
                        x_next[pos * d..(pos + 1) * d].copy_from_slice(vector);
                    }
                }
                _ => {}
            }
        }

        if let Some(cp) = capture_pos {
            if cp < t_len {
                captures.push(x_next[cp * d..(cp + 1) * d].to_vec());
            }
        }

        if want_tape {
            layer_tapes.push(LayerTape {
                x_in,
                r1,
                a,
                q,
                k,
                v,
                probs,
                mix,
                xa,
                r2,
                g,
                h1,
            });
        }
        x = x_next;
    }

    // final norm + unembed at the last position
    let last = t_len - 1;
    let mut f = vec![0.0f32; d];
    let rf = rmsnorm(&x[last * d..(last + 1) * d], &params.rms_f, &mut f);
    let mut logits = vec![0.0f32; cfg.vocab_size];
    matvec(&params.unembed, &f, &mut logits);

    if let Some(out) = capture_out {
        *out = captures;
    }
    if let Some(slot) = tape_out {
        *slot = Some(Tape {
            layers: layer_tapes,
            x_final: x,
            rf: vec![rf],
            f,
            seq: t_len,
        });
    }
    logits
}

/// Backprop from d(logits at last position). Accumulates into `grads`.
pub fn backward(
    params: &Params,
    cfg: &ToyModelConfig,
    tokens: &[u32],
    tape: &Tape,
    dlogits: &[f32],
    grads: &mut Params,
) {
    let t_len = tape.seq;
    let d = cfg.model_width;
    let heads = cfg.heads;
    let hd = cfg.head_dim();
    let dm = cfg.mlp_width();
    let scale = 1.0 / (hd as f32).sqrt();
    let last = t_len - 1;

    // unembed
    let mut df = vec![0.0f32; d];
    outer_accum(&mut grads.unembed, dlogits, &tape.f);
    matvec_t_accum(&params.unembed, dlogits, &mut df);

    // final rmsnorm
    let mut dx = vec![0.0f32; t_len * d];
    {
        let mut dlast = vec![0.0f32; d];
        rmsnorm_backward(
            &tape.x_final[last * d..(last + 1) * d],
            &params.rms_f,
            tape.rf[0],
            &df,
            &mut dlast,
            &mut grads.rms_f,
        );
        dx[last * d..(last + 1) * d].copy_from_slice(&dlast);
    }

    for (li, blk) in params.blocks.iter().enumerate().rev() {
        let lt = &tape.layers[li];
        let gblk = &mut grads.blocks[li];

        // MLP backward: x_next = xa + W2 relu(W1 g + b1) + b2
        let mut dxa = vec![0.0f32; t_len * d];
        for t in 0..t_len {
            let dxo = &dx[t * d..(t + 1) * d];
            if dxo.iter().all(|&v| v == 0.0) {
                continue;
            }
            for i in 0..d {
                dxa[t * d + i] += dxo[i];
                gblk.b2[i] += dxo[i];
            }
            let h1t = &lt.h1[t * dm..(t + 1) * dm];
            outer_accum(&mut gblk.w2, dxo, h1t);
            let mut dh1 = vec![0.0f32; dm];
            matvec_t_accum(&blk.w2, dxo, &mut dh1);
            // relu
            for i in 0..dm {
                if h1t[i] <= 0.0 {
                    dh1[i] = 0.0;
                }
            }
            let gt = &lt.g[t * d..(t + 1) * d];
            outer_accum(&mut gblk.w1, &dh1, gt);
            for i in 0..dm {
                gblk.b1[i] += dh1[i];
            }
            let mut dg = vec![0.0f32; d];
            matvec_t_accum(&blk.w1, &dh1, &mut dg);
            let mut dxa_rms = vec![0.0f32; d];
            rmsnorm_backward(
                &lt.xa[t * d..(t + 1) * d],
                &blk.rms2,
                lt.r2[t],
                &dg,
                &mut dxa_rms,
                &mut gblk.rms2,
            );
            for i in 0..d {
                dxa[t * d + i] += dxa_rms[i];
            }
        }

        // attention backward: xa = x_in + Wo mix
        let mut dmix = vec![0.0f32; t_len * d];
        let mut dx_in = vec![0.0f32; t_len * d];
        for t in 0..t_len {
            let dxat = &dxa[t * d..(t + 1) * d];
            if dxat.iter().all(|&v| v == 0.0) {
                continue;
            }
            for i in 0..d {
                dx_in[t * d + i] += dxat[i];
            }
            outer_accum(&mut gblk.wo, dxat, &lt.mix[t * d..(t + 1) * d]);
            matvec_t_accum(&blk.wo, dxat, &mut dmix[t * d..(t + 1) * d]);
        }

        let mut dq = vec![0.0f32; t_len * d];
        let mut dk = vec![0.0f32; t_len * d];
        let mut dv = vec![0.0f32; t_len * d];
        for h in 0..heads {
            let off = h * hd;
            for t in 0..t_len {
                let dmixh = &dmix[t * d + off..t * d + off + hd];
                if dmixh.iter().all(|&v| v == 0.0) {
                    continue;
                }
                let prow = &lt.probs[h * t_len * t_len + t * t_len..h * t_len * t_len + (t + 1) * t_len];
                // dp and softmax backward
                let mut dp = vec![0.0f32; t + 1];
                for j in 0..=t {
                    let vh = &lt.v[j * d + off..j * d + off + hd];
                    dp[j] = dot(dmixh, vh);
                    // dv
                    let p = prow[j];
                    if p != 0.0 {
                        for c in 0..hd {
                            dv[j * d + off + c] += p * dmixh[c];
                        }
                    }
                }
                let mut pdsum = 0.0f32;
                for j in 0..=t {
                    pdsum += prow[j] * dp[j];
                }
                for j in 0..=t {
                    let ds_raw = prow[j] * (dp[j] - pdsum);
                    if ds_raw == 0.0 {
                        continue;
                    }
                    gblk.rel_bias[h * cfg.context_length + (t - j)] += ds_raw;
                    let ds = ds_raw * scale;
                    let kh = &lt.k[j * d + off..j * d + off + hd];
                    let qh = &lt.q[t * d + off..t * d + off + hd];
                    for c in 0..hd {
                        dq[t * d + off + c] += ds * kh[c];
                        dk[j * d + off + c] += ds * qh[c];
                    }
                }
            }
        }

        // project back through Wq/Wk/Wv and the first rmsnorm
        for t in 0..t_len {
            let at = &lt.a[t * d..(t + 1) * d];
            let mut da = vec![0.0f32; d];
            let dqt = &dq[t * d..(t + 1) * d];
            let dkt = &dk[t * d..(t + 1) * d];
            let dvt = &dv[t * d..(t + 1) * d];
            let any = dqt.iter().any(|&v| v != 0.0)
                || dkt.iter().any(|&v| v != 0.0)
                || dvt.iter().any(|&v| v != 0.0);
            if any {
                outer_accum(&mut gblk.wq, dqt, at);
                outer_accum(&mut gblk.wk, dkt, at);
                outer_accum(&mut gblk.wv, dvt, at);
                matvec_t_accum(&blk.wq, dqt, &mut da);
                matvec_t_accum(&blk.wk, dkt, &mut da);
                matvec_t_accum(&blk.wv, dvt, &mut da);
                let mut dx_rms = vec![0.0f32; d];
                rmsnorm_backward(
                    &lt.x_in[t * d..(t + 1) * d],
                    &blk.rms1,
                    lt.r1[t],
                    &da,
                    &mut dx_rms,
                    &mut gblk.rms1,
                );
                for i in 0..d {
                    dx_in[t * d + i] += dx_rms[i];
                }
            }
        }

        dx = dx_in;
    }

    // embeddings
    for (t, &tok) in tokens.iter().enumerate() {
        let dxt = &dx[t * d..(t + 1) * d];
        if dxt.iter().all(|&v| v == 0.0) {
            continue;
        }
        let erow = &mut grads.embed[tok as usize * d..(tok as usize + 1) * d];
        for i in 0..d {
            erow[i] += dxt[i];
        }
        let prow = &mut grads.pos[t * d..(t + 1) * d];
        for i in 0..d {
            prow[i] += dxt[i];
        }
    }
}

/// Softmax cross-entropy at the last position. Returns (loss, dlogits).
pub fn ce_loss(logits: &[f32], target: u32) -> (f32, Vec<f32>) {
    let mut mx = f32::NEG_INFINITY;
    for &l in logits {
        if l > mx {
            mx = l;
        }
    }
    let mut denom = 0.0f32;
    let mut probs: Vec<f32> = logits.iter().map(|&l| (l - mx).exp()).collect();
    for &p in &probs {
        denom += p;
    }
    let inv = 1.0 / denom;
    for p in probs.iter_mut() {
        *p *= inv;
    }
    let loss = -probs[target as usize].max(1e-30).ln();
    let mut dlogits = probs;
    dlogits[target as usize] -= 1.0;
    (loss, dlogits)
}

/// Greedy argmax with lowest-id tie-break.
pub fn argmax(logits: &[f32]) -> u32 {
    let mut best = 0usize;
    let mut bestv = logits[0];
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > bestv {
            bestv = v;
            best = i;
        }
    }
    best as u32
}

// --- optimizer -------------------------------------------------------------

pub struct Adam {
    m: Params,
    v: Params,
    t: u64,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Adam {
    pub fn new(params: &Params, lr: f32, weight_decay: f32) -> Adam {
        Adam {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay,
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &Params) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let lr = self.lr;
        let wd = self.weight_decay;
        // decay dense matrices only; embeddings, gains, biases, and the
        // attention position biases are exempt
        let decay_flags: Vec<bool> = grads
            .tensors()
            .iter()
            .map(|(name, _)| {
                let tail = name.rsplit('.').next().unwrap_or(name);
                matches!(tail, "wq" | "wk" | "wv" | "wo" | "w1" | "w2")
            })
            .collect();
        let pts = params.tensors_mut();
        let mts = self.m.tensors_mut();
        let vts = self.v.tensors_mut();
        let gts: Vec<&[f32]> = grads.tensors().into_iter().map(|(_, t)| t).collect();
        for ((((p, m), v), g), decays) in pts
            .into_iter()
            .zip(mts)
            .zip(vts)
            .zip(gts)
            .zip(decay_flags)
        {
            let decay = if decays { wd } else { 0.0 };
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * (mhat / (vhat.sqrt() + self.eps) + decay * p[i]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg(seed: u64) -> ToyModelConfig {
        ToyModelConfig {
            vocab_size: 16,
            layers: 2,
            heads: 2,
            model_width: 16,
            context_length: 12,
            seed,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = ToyModelConfig::default();
        assert!(c.validate().is_ok());
        c.model_width = 63;
        assert!(c.validate().is_err());
        c.model_width = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny_cfg(3);
        let params = Params::init(&cfg);
        let tokens = vec![1u32, 2, 3, 4, 5];
        let l1 = forward(&params, &cfg, &tokens, &[], None, None, None);
        let l2 = forward(&params, &cfg, &tokens, &[], None, None, None);
        assert_eq!(l1, l2);
    }

    #[test]
    fn capture_does_not_perturb_logits() {
        let cfg = tiny_cfg(4);
        let params = Params::init(&cfg);
        let tokens = vec![1u32, 2, 3, 4];
        let plain = forward(&params, &cfg, &tokens, &[], None, None, None);
        let mut cap = ResidCapture::new();
        let captured = forward(&params, &cfg, &tokens, &[], Some(3), Some(&mut cap), None);
        assert_eq!(plain, captured);
        assert_eq!(cap.len(), cfg.layers);
        assert_eq!(cap[0].len(), cfg.model_width);
    }

    #[test]
    fn identity_resid_patch_is_exact() {
        let cfg = tiny_cfg(5);
        let params = Params::init(&cfg);
        let tokens = vec![3u32, 1, 4, 1, 5];
        let mut cap = ResidCapture::new();
        let plain = forward(&params, &cfg, &tokens, &[], Some(4), Some(&mut cap), None);
        let patch = ResolvedPatch::ResidSet {
            layer: 1,
            pos: 4,
            vector: cap[1].clone(),
        };
        let patched = forward(&params, &cfg, &tokens, &[patch], None, None, None);
        assert_eq!(plain, patched);
    }

    #[test]
    fn head_zero_changes_output() {
        let cfg = tiny_cfg(6);
        let mut params = Params::init(&cfg);
        // give wo some mass so heads actually contribute
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for b in &mut params.blocks {
            for w in b.wo.iter_mut() {
                *w = gauss(&mut rng) * 0.1;
            }
        }
        let tokens = vec![1u32, 2, 3];
        let plain = forward(&params, &cfg, &tokens, &[], None, None, None);
        let patched = forward(
            &params,
            &cfg,
            &tokens,
            &[ResolvedPatch::HeadZero { layer: 0, head: 1 }],
            None,
            None,
            None,
        );
        assert_ne!(plain, patched);
    }

    /// Finite-difference oracle for the analytic gradient. Checks a
    /// sample of coordinates in every tensor.
    #[test]
    fn gradients_match_finite_differences() {
        let cfg = tiny_cfg(7);
        let mut params = Params::init(&cfg);
        // non-zero output projections so every path carries gradient
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for b in &mut params.blocks {
            for w in b.wo.iter_mut().chain(b.w2.iter_mut()) {
                *w = gauss(&mut rng) * 0.05;
            }
        }
        let tokens = vec![2u32, 7, 1, 9, 4];
        let target = 3u32;

        let loss_of = |p: &Params| -> f64 {
            let logits = forward(p, &cfg, &tokens, &[], None, None, None);
            let (loss, _) = ce_loss(&logits, target);
            loss as f64
        };

        let mut grads = params.zeros_like();
        let mut tape = None;
        let logits = forward(&params, &cfg, &tokens, &[], None, None, Some(&mut tape));
        let (_, dlogits) = ce_loss(&logits, target);
        backward(&params, &cfg, &tokens, tape.as_ref().unwrap(), &dlogits, &mut grads);

        let names: Vec<String> = params.tensors().iter().map(|(n, _)| n.clone()).collect();
        let eps = 1e-3f32;
        for (ti, name) in names.iter().enumerate() {
            let n = params.tensors()[ti].1.len();
            // probe a few fixed coordinates per tensor
            for &idx in &[0usize, n / 3, n / 2, n - 1] {
                let analytic = grads.tensors()[ti].1[idx] as f64;
                let orig = params.tensors()[ti].1[idx];
                set_coord(&mut params, ti, idx, orig + eps);
                let up = loss_of(&params);
                set_coord(&mut params, ti, idx, orig - eps);
                let down = loss_of(&params);
                set_coord(&mut params, ti, idx, orig);
                let numeric = (up - down) / (2.0 * eps as f64);
                let tol = 2e-2 * (1.0 + analytic.abs().max(numeric.abs()));
                assert!(
                    (analytic - numeric).abs() < tol,
                    "grad mismatch {name}[{idx}]: analytic {analytic}, numeric {numeric}"
                );
            }
        }
    }

    fn set_coord(params: &mut Params, tensor: usize, idx: usize, value: f32) {
        params.tensors_mut()[tensor][idx] = value;
    }
}
