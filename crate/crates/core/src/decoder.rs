//! Attention decoder: token embeddings with sinusoid positions, pre-norm
//! blocks of causal self-attention, cross-attention over encoder states,
//! and a feed-forward layer, closed by a projection to log probabilities.
//!
//! Scoring a first-pass candidate list needs no autoregressive sampling:
//! teacher-forcing the candidate gives every next-token log probability in
//! one forward pass, and a whole candidate list is packed into one pass
//! with a block-diagonal causal mask. [`decode_step`] serves the
//! label-synchronous search, caching projected key/value rows so each new
//! token costs one row of work; its rows equal the offline forward exactly.


use crate::corpus::{BOUNDARY, PAD};
use crate::encoder::{streaming_self_attention, LN_EPS};
use crate::error::{Error, Result};
use crate::kernel::ops;
use crate::kernel::{AttnMask, CustomOp, Engine, EvalEngine, Tensor};
use crate::model::{
    ffn_forward, multi_head_attention, sinusoid_rows, DecBlockVars, DecoderVars, ModelConfig,
    ModelParams,
};

const NEG_INF: f64 = f64::NEG_INFINITY;

/// One pre-norm decoder block: self-attention, cross-attention over the
/// encoder states, then the feed-forward layer, each with a residual.
fn dec_block_forward<E: Engine>(
    e: &mut E,
    b: &DecBlockVars<E::T>,
    x: &E::T,
    enc: &E::T,
    self_mask: &AttnMask,
    heads: usize,
    d_model: usize,
) -> E::T {
    let n1 = e.layer_norm(x, &b.ln1.g, &b.ln1.b, LN_EPS);
    let a = multi_head_attention(e, &b.self_attn, &n1, &n1, self_mask, heads, d_model);
    let x = e.add(x, &a);
    let n2 = e.layer_norm(&x, &b.ln2.g, &b.ln2.b, LN_EPS);
    let c = multi_head_attention(e, &b.cross_attn, &n2, enc, &AttnMask::Full, heads, d_model);
    let x = e.add(&x, &c);
    let n3 = e.layer_norm(&x, &b.ln3.g, &b.ln3.b, LN_EPS);
    let f = ffn_forward(e, &b.ffn, &n3);
    e.add(&x, &f)
}

/// Embed `ids` with positions `pos`, run the blocks, and return next-token
/// log probabilities, one row per input row.
fn decoder_rows<E: Engine>(
    e: &mut E,
    dec: &DecoderVars<E::T>,
    cfg: &ModelConfig,
    ids: &[usize],
    pos: &[usize],
    enc: &E::T,
    self_mask: &AttnMask,
) -> E::T {
    let emb = e.gather_rows(&dec.embed, ids);
    let mut x = e.scale(&emb, (cfg.d_model as f64).sqrt());
    let pe = sinusoid_rows(pos, cfg.d_model);
    let pe = e.lift(&pe);
    x = e.add(&x, &pe);
    for b in &dec.blocks {
        x = dec_block_forward(e, b, &x, enc, self_mask, cfg.heads, cfg.d_model);
    }
    let h = e.layer_norm(&x, &dec.final_ln.g, &dec.final_ln.b, LN_EPS);
    let z = e.matmul(&h, &dec.out_w);
    let z = e.add_bias(&z, &dec.out_b);
    e.log_softmax(&z)
}

/// Teacher-forced forward over one candidate: input rows are the boundary
/// token then `tokens`; output row i is the log distribution over token
/// i (row L over the end-of-sequence slot). Encoder states must be
/// non-empty.
pub fn decoder_forward<E: Engine>(
    e: &mut E,
    dec: &DecoderVars<E::T>,
    cfg: &ModelConfig,
    tokens: &[usize],
    enc: &E::T,
) -> E::T {
    assert!(e.value(enc).rows() > 0, "decoder needs at least one encoder row");
    let mut ids = Vec::with_capacity(tokens.len() + 1);
    ids.push(BOUNDARY);
    ids.extend_from_slice(tokens);
    let pos: Vec<usize> = (0..ids.len()).collect();
    decoder_rows(e, dec, cfg, &ids, &pos, enc, &AttnMask::Causal)
}

/// Sum the per-token log probabilities out of a forward pass and
/// length-normalize. Without the end term an empty candidate has nothing
/// to score and gets negative infinity.
fn score_from_rows(out: &Tensor, start: usize, tokens: &[usize], score_eos: bool) -> f64 {
    let l = tokens.len();
    let mut s = 0.0;
    for (j, &y) in tokens.iter().enumerate() {
        s += out.at(start + j, y);
    }
    if score_eos {
        s += out.at(start + l, BOUNDARY);
        s / (l + 1) as f64
    } else if l == 0 {
        NEG_INF
    } else {
        s / l as f64
    }
}

/// Length-normalized log probability of a candidate under the decoder:
/// the mean next-token log probability with the candidate teacher-forced.
/// `score_eos` adds the end-of-sequence term and divides by L+1.
pub fn one_step_scoring(
    params: &ModelParams,
    enc: &Tensor,
    tokens: &[usize],
    score_eos: bool,
) -> f64 {
    if tokens.is_empty() && !score_eos {
        return NEG_INF;
    }
    let mut e = EvalEngine::new();
    let out = decoder_forward(&mut e, &params.vars.dec, &params.cfg, tokens, enc);
    score_from_rows(&out, 0, tokens, score_eos)
}

/// Score a whole candidate list in a single forward pass: candidates are
/// concatenated row-wise, the self-attention mask is block-diagonal causal,
/// and positions restart at every candidate, so each block reproduces the
/// single-candidate pass exactly.
pub fn score_batch(
    params: &ModelParams,
    enc: &Tensor,
    candidates: &[Vec<usize>],
    score_eos: bool,
) -> Vec<f64> {
    if candidates.is_empty() {
        return Vec::new();
    }
    let mut ids = Vec::new();
    let mut pos = Vec::new();
    let mut starts = Vec::with_capacity(candidates.len());
    for cand in candidates {
        starts.push(ids.len());
        ids.push(BOUNDARY);
        ids.extend_from_slice(cand);
        pos.extend(0..cand.len() + 1);
    }
    let mut e = EvalEngine::new();
    let out = decoder_rows(
        &mut e,
        &params.vars.dec,
        &params.cfg,
        &ids,
        &pos,
        enc,
        &AttnMask::Blocks { starts: starts.clone() },
    );
    candidates
        .iter()
        .zip(&starts)
        .map(|(cand, &start)| score_from_rows(&out, start, cand, score_eos))
        .collect()
}

/// Cross-entropy against a smoothed target distribution: mass 1−η on the
/// target and η spread over the non-padding classes; padding positions are
/// skipped and padding never receives mass. Mean over scored positions.
pub fn label_smoothed_ce(log_probs: &Tensor, targets: &[usize], eta: f64) -> f64 {
    assert_eq!(log_probs.rows(), targets.len(), "one target per row");
    assert!((0.0..1.0).contains(&eta));
    let v = log_probs.cols();
    assert!(v > 1, "need a non-padding class");
    let smooth = eta / (v - 1) as f64;
    let mut total = 0.0;
    let mut scored = 0usize;
    for (i, &y) in targets.iter().enumerate() {
        if y == PAD {
            continue;
        }
        assert!(y < v, "target outside vocabulary");
        scored += 1;
        let row = log_probs.row(i);
        let mut pos = 0.0;
        for (k, &lp) in row.iter().enumerate() {
            if k == PAD {
                continue;
            }
            let q = if k == y { 1.0 - eta + smooth } else { smooth };
            pos += q * lp;
        }
        total -= pos;
    }
    if scored == 0 {
        0.0
    } else {
        total / scored as f64
    }
}

/// Gradient of [`label_smoothed_ce`] with respect to the log probabilities:
/// −q/M at scored positions, zero at padding.
pub fn label_smoothed_ce_grad(log_probs: &Tensor, targets: &[usize], eta: f64) -> Tensor {
    let v = log_probs.cols();
    let smooth = eta / (v - 1) as f64;
    let scored = targets.iter().filter(|&&y| y != PAD).count();
    let mut grad = Tensor::zeros(log_probs.rows(), v);
    if scored == 0 {
        return grad;
    }
    let m = scored as f64;
    for (i, &y) in targets.iter().enumerate() {
        if y == PAD {
            continue;
        }
        for k in 0..v {
            if k == PAD {
                continue;
            }
            let q = if k == y { 1.0 - eta + smooth } else { smooth };
            grad.set(i, k, -q / m);
        }
    }
    grad
}

/// Label-smoothed cross-entropy as a tape op over decoder log probabilities.
pub struct LabelSmoothedCeOp {
    pub targets: Vec<usize>,
    pub eta: f64,
}

impl CustomOp for LabelSmoothedCeOp {
    fn name(&self) -> &'static str {
        "label_smoothed_ce"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Tensor {
        assert_eq!(inputs.len(), 1);
        Tensor::scalar(label_smoothed_ce(inputs[0], &self.targets, self.eta))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let g = label_smoothed_ce_grad(inputs[0], &self.targets, self.eta);
        vec![ops::scale(&g, grad.at(0, 0))]
    }
}

/// Incremental decoding state: per-block self-attention key/value rows for
/// the consumed input rows, and the cross-attention keys/values projected
/// once from the encoder states. Clone to branch a hypothesis.
#[derive(Clone)]
pub struct DecoderCache {
    self_k: Vec<Vec<Tensor>>,
    self_v: Vec<Vec<Tensor>>,
    cross_k: Vec<Tensor>,
    cross_v: Vec<Tensor>,
    rows_done: usize,
}

impl DecoderCache {
    pub fn new(params: &ModelParams, enc: &Tensor) -> Self {
        assert!(enc.rows() > 0, "decoder needs at least one encoder row");
        let dec = &params.vars.dec;
        let mut cross_k = Vec::with_capacity(dec.blocks.len());
        let mut cross_v = Vec::with_capacity(dec.blocks.len());
        for b in &dec.blocks {
            cross_k.push(ops::add_bias(&ops::matmul(enc, &b.cross_attn.wk), &b.cross_attn.bk));
            cross_v.push(ops::add_bias(&ops::matmul(enc, &b.cross_attn.wv), &b.cross_attn.bv));
        }
        DecoderCache {
            self_k: vec![Vec::new(); dec.blocks.len()],
            self_v: vec![Vec::new(); dec.blocks.len()],
            cross_k,
            cross_v,
            rows_done: 0,
        }
    }

    /// Input rows consumed so far, equal to the prefix length served next.
    pub fn rows_done(&self) -> usize {
        self.rows_done
    }
}

/// Feed the next input row for `prefix` and return the log distribution
/// over the following token as a [1, V] row. The cache must have consumed
/// exactly the prefix: anything else is a session error. Row i equals row
/// i of the offline teacher-forced pass bit for bit.
pub fn decode_step(
    params: &ModelParams,
    prefix: &[usize],
    cache: &mut DecoderCache,
) -> Result<Tensor> {
    if prefix.len() != cache.rows_done {
        return Err(Error::Session(format!(
            "decode cache holds {} rows but prefix has {} tokens",
            cache.rows_done,
            prefix.len()
        )));
    }
    let cfg = &params.cfg;
    let dec = &params.vars.dec;
    let i = cache.rows_done;
    let tok = if i == 0 { BOUNDARY } else { prefix[i - 1] };
    let emb = ops::gather_rows(&dec.embed, &[tok]);
    let mut x = ops::scale(&emb, (cfg.d_model as f64).sqrt());
    x = ops::add(&x, &sinusoid_rows(&[i], cfg.d_model));
    let dk = cfg.head_dim();
    for (bi, b) in dec.blocks.iter().enumerate() {
        let n1 = ops::layer_norm_rows(&x, &b.ln1.g, &b.ln1.b, LN_EPS);
        let q = ops::add_bias(&ops::matmul(&n1, &b.self_attn.wq), &b.self_attn.bq);
        let k = ops::add_bias(&ops::matmul(&n1, &b.self_attn.wk), &b.self_attn.bk);
        let v = ops::add_bias(&ops::matmul(&n1, &b.self_attn.wv), &b.self_attn.bv);
        cache.self_k[bi].push(k);
        cache.self_v[bi].push(v);
        let k_rows: Vec<&Tensor> = cache.self_k[bi].iter().collect();
        let v_rows: Vec<&Tensor> = cache.self_v[bi].iter().collect();
        let k_all = Tensor::vstack(&k_rows);
        let v_all = Tensor::vstack(&v_rows);
        let a = attend_heads(&q, &k_all, &v_all, cfg.heads, dk);
        let a = ops::add_bias(&ops::matmul(&a, &b.self_attn.wo), &b.self_attn.bo);
        x = ops::add(&x, &a);
        let n2 = ops::layer_norm_rows(&x, &b.ln2.g, &b.ln2.b, LN_EPS);
        let q = ops::add_bias(&ops::matmul(&n2, &b.cross_attn.wq), &b.cross_attn.bq);
        let c = attend_heads(&q, &cache.cross_k[bi], &cache.cross_v[bi], cfg.heads, dk);
        let c = ops::add_bias(&ops::matmul(&c, &b.cross_attn.wo), &b.cross_attn.bo);
        x = ops::add(&x, &c);
        let n3 = ops::layer_norm_rows(&x, &b.ln3.g, &b.ln3.b, LN_EPS);
        let h1 = ops::relu(&ops::add_bias(&ops::matmul(&n3, &b.ffn.w1), &b.ffn.b1));
        let f = ops::add_bias(&ops::matmul(&h1, &b.ffn.w2), &b.ffn.b2);
        x = ops::add(&x, &f);
    }
    let h = ops::layer_norm_rows(&x, &dec.final_ln.g, &dec.final_ln.b, LN_EPS);
    let z = ops::add_bias(&ops::matmul(&h, &dec.out_w), &dec.out_b);
    cache.rows_done += 1;
    Ok(ops::log_softmax_rows(&z))
}

/// Multi-head attention of one query row over full key/value matrices,
/// head by head, with the same kernels as the batched mask path.
fn attend_heads(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, dk: usize) -> Tensor {
    let mut parts = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dk, (h + 1) * dk);
        let qh = ops::slice_cols(q, lo, hi);
        let kh = ops::slice_cols(k, lo, hi);
        let vh = ops::slice_cols(v, lo, hi);
        parts.push(streaming_self_attention(&qh, &kh, &vh));
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    ops::concat_cols(&refs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::ops::log_softmax_rows;
    use crate::kernel::{grad_check, log_sum_exp, ScalarFn};
    use crate::model::ModelVars;
    use crate::rng::stream;
    use rand::Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            feat_dim: 4,
            d_model: 8,
            heads: 2,
            ffn_hidden: 12,
            conv_channels: 5,
            enc_blocks: 1,
            dec_blocks: 2,
            tau: 2,
            epsilon: 1,
            vocab_size: 7,
            label_smoothing: 0.1,
        }
    }

    fn params_with(c: ModelConfig, seed: u64) -> ModelParams {
        let vars = ModelVars::init(&c, &mut stream(seed, "init"));
        ModelParams { cfg: c, vars }
    }

    fn random_enc(u: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = stream(seed, "enc");
        Tensor::new(u, d, (0..u * d).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn forward(params: &ModelParams, tokens: &[usize], enc: &Tensor) -> Tensor {
        let mut e = EvalEngine::new();
        decoder_forward(&mut e, &params.vars.dec, &params.cfg, tokens, enc)
    }

    #[test]
    fn forward_shape_and_normalization() {
        let p = params_with(cfg(), 1);
        let enc = random_enc(3, 8, 2);
        let out = forward(&p, &[3, 4, 5], &enc);
        assert_eq!(out.shape(), (4, 7));
        for r in 0..4 {
            assert!(log_sum_exp(out.row(r)).abs() < 1e-12);
        }
    }

    #[test]
    fn rows_are_blind_to_future_tokens() {
        let p = params_with(cfg(), 3);
        let enc = random_enc(2, 8, 4);
        let a = forward(&p, &[3, 4, 5, 6], &enc);
        let b = forward(&p, &[3, 4, 6, 6], &enc); // token 2 changed
        for r in 0..=2 {
            assert_eq!(a.row(r), b.row(r), "row {r}");
        }
        assert_ne!(a.row(3), b.row(3));
    }

    #[test]
    fn zero_parameters_score_minus_log_v() {
        let c = cfg();
        let vars =
            ModelVars::from_fn(&c, &mut |_name, r, cols, _kind| Ok(Tensor::zeros(r, cols)))
                .unwrap();
        let p = ModelParams { cfg: c, vars };
        let enc = Tensor::zeros(2, 8);
        let s = one_step_scoring(&p, &enc, &[3, 4], false);
        assert!((s + (7.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn score_is_mean_of_forward_rows() {
        let p = params_with(cfg(), 5);
        let enc = random_enc(3, 8, 6);
        let tokens = [5, 3, 3];
        let out = forward(&p, &tokens, &enc);
        let manual = (out.at(0, 5) + out.at(1, 3) + out.at(2, 3)) / 3.0;
        assert_eq!(one_step_scoring(&p, &enc, &tokens, false), manual);
        let with_end = (out.at(0, 5) + out.at(1, 3) + out.at(2, 3) + out.at(3, BOUNDARY)) / 4.0;
        assert_eq!(one_step_scoring(&p, &enc, &tokens, true), with_end);
    }

    #[test]
    fn empty_candidate_scores() {
        let p = params_with(cfg(), 7);
        let enc = random_enc(2, 8, 8);
        assert_eq!(one_step_scoring(&p, &enc, &[], false), NEG_INF);
        let out = forward(&p, &[], &enc);
        assert_eq!(one_step_scoring(&p, &enc, &[], true), out.at(0, BOUNDARY));
    }

    #[test]
    fn batch_matches_single_calls_exactly() {
        let p = params_with(cfg(), 9);
        let enc = random_enc(3, 8, 10);
        let cands = vec![vec![3], vec![4, 5, 6], vec![]];
        for eos in [false, true] {
            let batch = score_batch(&p, &enc, &cands, eos);
            for (cand, &got) in cands.iter().zip(&batch) {
                let single = one_step_scoring(&p, &enc, cand, eos);
                assert_eq!(got, single, "cand {cand:?} eos {eos}");
            }
        }
    }

    #[test]
    fn hundred_candidates_in_one_pass() {
        let p = params_with(cfg(), 11);
        let enc = random_enc(2, 8, 12);
        let mut rng = stream(13, "cands");
        let cands: Vec<Vec<usize>> = (0..100)
            .map(|_| {
                let l = rng.gen_range(0..5);
                (0..l).map(|_| rng.gen_range(3..7)).collect()
            })
            .collect();
        let batch = score_batch(&p, &enc, &cands, false);
        assert_eq!(batch.len(), 100);
        for i in [0usize, 17, 63, 99] {
            assert_eq!(batch[i], one_step_scoring(&p, &enc, &cands[i], false));
        }
    }

    #[test]
    fn smoothing_zero_is_plain_cross_entropy() {
        let lp = log_softmax_rows(&Tensor::from_rows(&[
            vec![0.3, -0.2, 1.0, 0.4],
            vec![-1.0, 0.0, 0.5, 0.2],
        ]));
        let targets = [2usize, 3];
        let plain = -(lp.at(0, 2) + lp.at(1, 3)) / 2.0;
        assert!((label_smoothed_ce(&lp, &targets, 0.0) - plain).abs() < 1e-12);
    }

    #[test]
    fn smoothed_ce_hand_value() {
        // V=3, padding excluded from mass: q = [0, η/2, 1−η+η/2].
        let lp = Tensor::new(1, 3, vec![0.2f64.ln(), 0.3f64.ln(), 0.5f64.ln()]);
        let eta = 0.1;
        let want = -(0.05 * 0.3f64.ln() + 0.95 * 0.5f64.ln());
        assert!((label_smoothed_ce(&lp, &[2], eta) - want).abs() < 1e-12);
    }

    #[test]
    fn uniform_log_probs_cost_log_v() {
        let v = 5;
        let lp = Tensor::filled(3, v, -(v as f64).ln());
        let loss = label_smoothed_ce(&lp, &[1, 2, 4], 0.3);
        assert!((loss - (v as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn padding_positions_are_skipped() {
        let lp = log_softmax_rows(&Tensor::from_rows(&[
            vec![0.3, -0.2, 1.0],
            vec![9.0, 9.0, 9.0], // would dominate if scored
        ]));
        let with_pad = label_smoothed_ce(&lp, &[2, PAD], 0.1);
        let without = label_smoothed_ce(&lp.row_tensor(0), &[2], 0.1);
        assert_eq!(with_pad, without);
        assert_eq!(label_smoothed_ce(&lp, &[PAD, PAD], 0.1), 0.0);
    }

    struct CeProbe;

    impl ScalarFn for CeProbe {
        fn eval<E: Engine>(&self, e: &mut E, params: &[E::T]) -> E::T {
            let lp = e.log_softmax(&params[0]);
            e.custom(std::rc::Rc::new(LabelSmoothedCeOp { targets: vec![1, 3, 2], eta: 0.1 }), &[lp])
        }
    }

    #[test]
    fn smoothed_ce_gradient_checks() {
        let mut rng = stream(14, "logits");
        let logits = Tensor::new(3, 4, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let report = grad_check(&CeProbe, &[logits], 1e-5, 1e-6);
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn decode_step_matches_offline_rows_exactly() {
        let p = params_with(cfg(), 15);
        let enc = random_enc(3, 8, 16);
        let tokens = [4usize, 3, 6, 5];
        let offline = forward(&p, &tokens, &enc);
        let mut cache = DecoderCache::new(&p, &enc);
        for i in 0..=tokens.len() {
            let row = decode_step(&p, &tokens[..i], &mut cache).unwrap();
            assert_eq!(row.row(0), offline.row(i), "row {i}");
        }
    }

    #[test]
    fn decode_step_cache_branching() {
        let p = params_with(cfg(), 17);
        let enc = random_enc(2, 8, 18);
        let mut cache = DecoderCache::new(&p, &enc);
        decode_step(&p, &[], &mut cache).unwrap();
        let mut branch = cache.clone();
        let a = decode_step(&p, &[3], &mut cache).unwrap();
        let b = decode_step(&p, &[4], &mut branch).unwrap();
        assert_eq!(a.row(0), forward(&p, &[3], &enc).row(1));
        assert_eq!(b.row(0), forward(&p, &[4], &enc).row(1));
    }

    #[test]
    fn decode_step_prefix_mismatch_is_session_error() {
        let p = params_with(cfg(), 19);
        let enc = random_enc(2, 8, 20);
        let mut cache = DecoderCache::new(&p, &enc);
        decode_step(&p, &[], &mut cache).unwrap();
        let err = decode_step(&p, &[3, 4], &mut cache).unwrap_err();
        assert!(matches!(err, Error::Session(_)));
    }
}
