//! Latency-controlled streaming encoder: two causal strided convolutions
//! (×4 down-sampling), sinusoid positions, pre-norm transformer blocks with
//! left-limited self-attention, a final layer norm, and a lookahead context
//! layer over the next ε rows.
//!
//! [`encode`] runs the whole utterance through the engine ops;
//! [`EncoderStream`] produces the same rows incrementally. The two paths
//! call the identical kernels on identical operand values row by row, so
//! their outputs agree exactly; any change to one must mirror the other
//! (the equivalence tests enforce this).

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::kernel::ops;
use crate::kernel::{AttnMask, Engine, EvalEngine, Tensor};
use crate::model::{
    ffn_forward, multi_head_attention, sinusoid_rows, EncBlockVars, EncoderVars, ModelConfig,
    ModelParams,
};

/// Layer norm epsilon used everywhere in the model.
pub const LN_EPS: f64 = 1e-6;

/// Frame shift of one down-sampled step in milliseconds: 10 ms input frames
/// down-sampled by 4.
const DOWNSAMPLED_FRAME_MS: usize = 40;

/// Encoder output: one row of future-aware states per down-sampled frame.
#[derive(Debug, Clone)]
pub struct EncodedStates {
    /// [U, d_model] rows of ĥ.
    pub states: Tensor,
    pub num_raw_frames: usize,
}

/// Algorithmic lookahead latency in milliseconds: one down-sampled frame to
/// exist plus ε more to run the context layer.
pub fn latency_ms(epsilon: usize) -> usize {
    DOWNSAMPLED_FRAME_MS * (epsilon + 1)
}

/// Down-sampled length after two stride-2 causal convolutions.
pub fn downsampled_len(num_raw_frames: usize) -> usize {
    let once = |t: usize| if t == 0 { 0 } else { (t - 1) / 2 + 1 };
    once(once(num_raw_frames))
}

/// Two causal stride-2 kernel-3 convolutions with ReLU, as engine ops.
pub fn downsample_forward<E: Engine>(
    e: &mut E,
    vars: &EncoderVars<E::T>,
    features: &E::T,
) -> E::T {
    let w1 = e.unfold_causal(features, 3, 2);
    let c1 = e.matmul(&w1, &vars.conv1_w);
    let c1 = e.add_bias(&c1, &vars.conv1_b);
    let c1 = e.relu(&c1);
    let w2 = e.unfold_causal(&c1, 3, 2);
    let c2 = e.matmul(&w2, &vars.conv2_w);
    let c2 = e.add_bias(&c2, &vars.conv2_b);
    e.relu(&c2)
}

/// Down-sample a raw feature matrix with the model's convolution front end.
pub fn downsample(params: &ModelParams, features: &Tensor) -> Tensor {
    assert_eq!(features.cols(), params.cfg.feat_dim, "feature dim mismatch");
    let mut e = EvalEngine::new();
    downsample_forward(&mut e, &params.vars.enc, features)
}

/// One pre-norm encoder block: x + attn(ln(x)) then x + ffn(ln(x)).
pub fn enc_block_forward<E: Engine>(
    e: &mut E,
    b: &EncBlockVars<E::T>,
    x: &E::T,
    mask: &AttnMask,
    heads: usize,
    d_model: usize,
) -> E::T {
    let n1 = e.layer_norm(x, &b.ln1.g, &b.ln1.b, LN_EPS);
    let a = multi_head_attention(e, &b.attn, &n1, &n1, mask, heads, d_model);
    let x = e.add(x, &a);
    let n2 = e.layer_norm(&x, &b.ln2.g, &b.ln2.b, LN_EPS);
    let f = ffn_forward(e, &b.ffn, &n2);
    e.add(&x, &f)
}

/// Single-head attention of one query over a clipped left-context window:
/// softmax(qKᵀ/√d_k)V over exactly the window rows.
pub fn streaming_self_attention(q: &Tensor, k_window: &Tensor, v_window: &Tensor) -> Tensor {
    assert_eq!(q.rows(), 1, "one query row");
    assert_eq!(k_window.shape(), v_window.shape(), "window K/V shapes differ");
    assert!(k_window.rows() >= 1, "window always contains the current row");
    let dk = q.cols();
    let kt = ops::transpose(k_window);
    let scores = ops::scale(&ops::matmul(q, &kt), 1.0 / (dk as f64).sqrt());
    let weights = ops::masked_softmax(&scores, &AttnMask::Full);
    ops::matmul(&weights, v_window)
}

/// Lookahead context layer: ĥ_t = Σ_{i=0..ε} W_i h_{t+i} + b with zero rows
/// past the end. `ctx_w` stacks the ε+1 tap matrices vertically.
pub fn context_layer(h: &Tensor, ctx_w: &Tensor, ctx_b: &Tensor, epsilon: usize) -> Tensor {
    let mut e = EvalEngine::new();
    let win = e.unfold_ahead(h, epsilon + 1);
    let out = e.matmul(&win, ctx_w);
    e.add_bias(&out, ctx_b)
}

/// Full encoder as engine ops: features [T, feat_dim] to ĥ [U, d_model].
pub fn encoder_forward<E: Engine>(
    e: &mut E,
    vars: &EncoderVars<E::T>,
    cfg: &ModelConfig,
    features: &E::T,
) -> E::T {
    let ds = downsample_forward(e, vars, features);
    let u = e.value(&ds).rows();
    let positions: Vec<usize> = (0..u).collect();
    let pe = sinusoid_rows(&positions, cfg.d_model);
    let pe = e.lift(&pe);
    let mut x = e.add(&ds, &pe);
    let mask = AttnMask::Band { tau: cfg.tau };
    for b in &vars.blocks {
        x = enc_block_forward(e, b, &x, &mask, cfg.heads, cfg.d_model);
    }
    let h = e.layer_norm(&x, &vars.final_ln.g, &vars.final_ln.b, LN_EPS);
    let win = e.unfold_ahead(&h, cfg.epsilon + 1);
    let ctx = e.matmul(&win, &vars.ctx_w);
    e.add_bias(&ctx, &vars.ctx_b)
}

/// Encode a whole utterance offline.
pub fn encode(params: &ModelParams, features: &Tensor) -> EncodedStates {
    assert_eq!(features.cols(), params.cfg.feat_dim, "feature dim mismatch");
    let mut e = EvalEngine::new();
    let states = encoder_forward(&mut e, &params.vars.enc, &params.cfg, features);
    EncodedStates { states, num_raw_frames: features.rows() }
}

/// Tail buffer of a causal kernel-3 stride-2 convolution: emits one output
/// row per even-indexed input row, over the window of the last three rows.
struct ConvStage {
    window: VecDeque<Vec<f64>>,
    seen: usize,
    in_dim: usize,
}

impl ConvStage {
    fn new(in_dim: usize) -> Self {
        ConvStage { window: VecDeque::new(), seen: 0, in_dim }
    }

    /// Feed one input row; returns the unfolded [1, 3·in_dim] window row
    /// when this input index is an output anchor.
    fn push(&mut self, row: Vec<f64>) -> Option<Tensor> {
        debug_assert_eq!(row.len(), self.in_dim);
        self.window.push_back(row);
        if self.window.len() > 3 {
            self.window.pop_front();
        }
        let idx = self.seen;
        self.seen += 1;
        if idx % 2 != 0 {
            return None;
        }
        let mut flat = vec![0.0; 3 * self.in_dim];
        let have = self.window.len();
        for (j, row) in self.window.iter().enumerate() {
            let tap = 3 - have + j;
            flat[tap * self.in_dim..(tap + 1) * self.in_dim].copy_from_slice(row);
        }
        Some(Tensor::new(1, 3 * self.in_dim, flat))
    }
}

/// Per-block cache of projected key/value rows for the last τ+1 positions.
struct BlockCache {
    k: VecDeque<Tensor>,
    v: VecDeque<Tensor>,
    cap: usize,
}

impl BlockCache {
    fn new(tau: usize) -> Self {
        BlockCache { k: VecDeque::new(), v: VecDeque::new(), cap: tau + 1 }
    }

    fn push(&mut self, k: Tensor, v: Tensor) {
        self.k.push_back(k);
        self.v.push_back(v);
        if self.k.len() > self.cap {
            self.k.pop_front();
            self.v.pop_front();
        }
    }

    fn window(&self) -> (Tensor, Tensor) {
        let ks: Vec<&Tensor> = self.k.iter().collect();
        let vs: Vec<&Tensor> = self.v.iter().collect();
        (Tensor::vstack(&ks), Tensor::vstack(&vs))
    }
}

/// Incremental encoder session. Push raw frames in order; rows of ĥ come
/// back as soon as their ε future rows exist; `finalize` zero-pads the tail.
pub struct EncoderStream<'a> {
    params: &'a ModelParams,
    conv1: ConvStage,
    conv2: ConvStage,
    blocks: Vec<BlockCache>,
    /// Final-norm rows awaiting future context, oldest first.
    pending: VecDeque<Tensor>,
    ds_count: usize,
    emitted: usize,
    raw_frames: usize,
    finished: bool,
}

impl<'a> EncoderStream<'a> {
    pub fn new(params: &'a ModelParams) -> Self {
        let cfg = &params.cfg;
        EncoderStream {
            params,
            conv1: ConvStage::new(cfg.feat_dim),
            conv2: ConvStage::new(cfg.conv_channels),
            blocks: (0..cfg.enc_blocks).map(|_| BlockCache::new(cfg.tau)).collect(),
            pending: VecDeque::new(),
            ds_count: 0,
            emitted: 0,
            raw_frames: 0,
            finished: false,
        }
    }

    pub fn raw_frames(&self) -> usize {
        self.raw_frames
    }

    /// Rows of ĥ emitted so far.
    pub fn emitted_rows(&self) -> usize {
        self.emitted
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    /// Feed frames; returns the newly available ĥ rows ([0, d_model] when
    /// none became ready).
    pub fn push(&mut self, frames: &Tensor) -> Result<Tensor> {
        if self.finished {
            return Err(Error::Session("push after end-of-stream flush".into()));
        }
        assert_eq!(frames.cols(), self.params.cfg.feat_dim, "feature dim mismatch");
        let mut out: Vec<Tensor> = Vec::new();
        for t in 0..frames.rows() {
            self.raw_frames += 1;
            let Some(win1) = self.conv1.push(frames.row(t).to_vec()) else { continue };
            let c1 = self.conv_row(&win1, true);
            let Some(win2) = self.conv2.push(c1.into_data()) else { continue };
            let c2 = self.conv_row(&win2, false);
            if let Some(row) = self.advance_row(c2) {
                out.push(row);
            }
        }
        Ok(collect_rows(out, self.params.cfg.d_model))
    }

    /// End of stream: run the context layer over the tail with zero rows in
    /// place of the missing future and return the final ĥ rows.
    pub fn finalize(&mut self) -> Result<Tensor> {
        if self.finished {
            return Err(Error::Session("finalize after end-of-stream flush".into()));
        }
        self.finished = true;
        let mut out = Vec::new();
        while !self.pending.is_empty() {
            out.push(self.emit_front());
        }
        Ok(collect_rows(out, self.params.cfg.d_model))
    }

    fn conv_row(&self, window: &Tensor, first: bool) -> Tensor {
        let enc = &self.params.vars.enc;
        let (w, b) = if first {
            (&enc.conv1_w, &enc.conv1_b)
        } else {
            (&enc.conv2_w, &enc.conv2_b)
        };
        ops::relu(&ops::add_bias(&ops::matmul(window, w), b))
    }

    /// One down-sampled row through positions, blocks, and final norm; then
    /// emits a ĥ row once the context window is full.
    fn advance_row(&mut self, ds_row: Tensor) -> Option<Tensor> {
        let cfg = &self.params.cfg;
        let enc = &self.params.vars.enc;
        let u = self.ds_count;
        self.ds_count += 1;

        let pe = sinusoid_rows(&[u], cfg.d_model);
        let mut x = ops::add(&ds_row, &pe);
        for (b, cache) in self.params.vars.enc.blocks.iter().zip(&mut self.blocks) {
            let n1 = ops::layer_norm_rows(&x, &b.ln1.g, &b.ln1.b, LN_EPS);
            let q = ops::add_bias(&ops::matmul(&n1, &b.attn.wq), &b.attn.bq);
            let k = ops::add_bias(&ops::matmul(&n1, &b.attn.wk), &b.attn.bk);
            let v = ops::add_bias(&ops::matmul(&n1, &b.attn.wv), &b.attn.bv);
            cache.push(k, v);
            let (k_win, v_win) = cache.window();
            let dk = cfg.head_dim();
            let mut heads = Vec::with_capacity(cfg.heads);
            for h in 0..cfg.heads {
                let (lo, hi) = (h * dk, (h + 1) * dk);
                let qh = ops::slice_cols(&q, lo, hi);
                let kh = ops::slice_cols(&k_win, lo, hi);
                let vh = ops::slice_cols(&v_win, lo, hi);
                heads.push(streaming_self_attention(&qh, &kh, &vh));
            }
            let parts: Vec<&Tensor> = heads.iter().collect();
            let cat = ops::concat_cols(&parts);
            let a = ops::add_bias(&ops::matmul(&cat, &b.attn.wo), &b.attn.bo);
            x = ops::add(&x, &a);
            let n2 = ops::layer_norm_rows(&x, &b.ln2.g, &b.ln2.b, LN_EPS);
            let h1 = ops::relu(&ops::add_bias(&ops::matmul(&n2, &b.ffn.w1), &b.ffn.b1));
            let f = ops::add_bias(&ops::matmul(&h1, &b.ffn.w2), &b.ffn.b2);
            x = ops::add(&x, &f);
        }
        let h = ops::layer_norm_rows(&x, &enc.final_ln.g, &enc.final_ln.b, LN_EPS);
        self.pending.push_back(h);
        if self.pending.len() == cfg.epsilon + 1 {
            Some(self.emit_front())
        } else {
            None
        }
    }

    /// Context layer for the oldest pending row from whatever future rows
    /// exist, zero-padding the rest of the window.
    fn emit_front(&mut self) -> Tensor {
        let cfg = &self.params.cfg;
        let enc = &self.params.vars.enc;
        let d = cfg.d_model;
        let taps = cfg.epsilon + 1;
        let mut flat = vec![0.0; taps * d];
        for (j, row) in self.pending.iter().take(taps).enumerate() {
            flat[j * d..(j + 1) * d].copy_from_slice(row.row(0));
        }
        let win = Tensor::new(1, taps * d, flat);
        let out = ops::add_bias(&ops::matmul(&win, &enc.ctx_w), &enc.ctx_b);
        self.pending.pop_front();
        self.emitted += 1;
        out
    }
}

fn collect_rows(rows: Vec<Tensor>, d_model: usize) -> Tensor {
    if rows.is_empty() {
        Tensor::zeros(0, d_model)
    } else {
        let refs: Vec<&Tensor> = rows.iter().collect();
        Tensor::vstack(&refs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
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
            enc_blocks: 2,
            dec_blocks: 1,
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

    fn random_features(t: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = stream(seed, "feats");
        Tensor::new(t, d, (0..t * d).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn latency_table() {
        assert_eq!(latency_ms(0), 40);
        assert_eq!(latency_ms(1), 80);
        assert_eq!(latency_ms(5), 240);
        assert_eq!(latency_ms(10), 440);
        assert_eq!(latency_ms(20), 840);
    }

    #[test]
    fn downsample_length_is_quarter_ceil() {
        let p = params_with(cfg(), 3);
        for t in [1usize, 2, 3, 4, 5, 7, 8, 9, 16, 37] {
            let ds = downsample(&p, &random_features(t, 4, t as u64));
            assert_eq!(ds.rows(), t.div_ceil(4), "t={t}");
            assert_eq!(ds.rows(), downsampled_len(t));
        }
        assert_eq!(downsample(&p, &Tensor::zeros(0, 4)).rows(), 0);
    }

    #[test]
    fn downsample_zero_input_zero_bias_gives_zero() {
        let p = params_with(cfg(), 4);
        // Init zeroes all biases already.
        let ds = downsample(&p, &Tensor::zeros(8, 4));
        assert!(ds.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn downsample_frame0_blind_to_frame7() {
        let p = params_with(cfg(), 5);
        let a = random_features(8, 4, 11);
        let mut b = a.clone();
        b.set(7, 2, b.at(7, 2) + 10.0);
        let da = downsample(&p, &a);
        let db = downsample(&p, &b);
        assert_eq!(da.row(0), db.row(0));
    }

    #[test]
    fn streaming_attention_convex_combination() {
        let q = Tensor::new(1, 3, vec![0.3, -1.0, 2.0]);
        let v_row = vec![1.5, -0.5, 0.25];
        let k = random_features(4, 3, 21);
        let v = Tensor::from_rows(&[v_row.clone(), v_row.clone(), v_row.clone(), v_row.clone()]);
        let out = streaming_self_attention(&q, &k, &v);
        for c in 0..3 {
            assert!((out.at(0, c) - v_row[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn streaming_attention_singleton_window_returns_value() {
        let q = Tensor::new(1, 2, vec![0.7, -0.2]);
        let k = Tensor::new(1, 2, vec![5.0, 5.0]);
        let v = Tensor::new(1, 2, vec![-3.0, 4.0]);
        let out = streaming_self_attention(&q, &k, &v);
        assert_eq!(out.row(0), v.row(0));
    }

    #[test]
    fn context_layer_identity_at_epsilon_zero() {
        let d = 3;
        let h = random_features(4, d, 31);
        let mut w = Tensor::zeros(d, d);
        for i in 0..d {
            w.set(i, i, 1.0);
        }
        let out = context_layer(&h, &w, &Tensor::zeros(1, d), 0);
        assert!(out.value_eq(&h));
    }

    #[test]
    fn context_layer_half_identity_hand_case() {
        let d = 2;
        let h = Tensor::new(2, d, vec![2.0, 4.0, 6.0, 8.0]);
        let mut w = Tensor::zeros(2 * d, d);
        for i in 0..d {
            w.set(i, i, 0.5);
            w.set(d + i, i, 0.5);
        }
        let out = context_layer(&h, &w, &Tensor::zeros(1, d), 1);
        assert_eq!(out.row(0), &[4.0, 6.0]); // (h0+h1)/2
        assert_eq!(out.row(1), &[3.0, 4.0]); // h1/2, zero-padded tail
    }

    #[test]
    fn context_layer_blind_past_epsilon() {
        let d = 3;
        let eps = 1;
        let h = random_features(6, d, 41);
        let mut h2 = h.clone();
        h2.set(4, 1, 99.0); // t + ε + 1 for t = 2
        let w = random_features(2 * d, d, 42);
        let b = random_features(1, d, 43);
        let a = context_layer(&h, &w, &b, eps);
        let bb = context_layer(&h2, &w, &b, eps);
        assert_eq!(a.row(2), bb.row(2));
        assert_ne!(a.row(3), bb.row(3));
    }

    #[test]
    fn block_output_blind_before_u_minus_tau() {
        let c = cfg();
        let p = params_with(c.clone(), 6);
        let x = random_features(9, c.d_model, 51);
        let mut x2 = x.clone();
        let u = 7;
        let touched = u - c.tau - 1;
        x2.set(touched, 3, 5.0);
        let mask = AttnMask::Band { tau: c.tau };
        let mut e = EvalEngine::new();
        let a = enc_block_forward(&mut e, &p.vars.enc.blocks[0], &x, &mask, c.heads, c.d_model);
        let b = enc_block_forward(&mut e, &p.vars.enc.blocks[0], &x2, &mask, c.heads, c.d_model);
        assert_eq!(a.row(u), b.row(u));
        assert_ne!(a.row(touched), b.row(touched));
    }

    #[test]
    fn encoder_causality_bound_is_exact() {
        for eps in [0usize, 1, 2] {
            let mut c = cfg();
            c.epsilon = eps;
            let p = params_with(c, 7 + eps as u64);
            let t = 24;
            let feats = random_features(t, 4, 61 + eps as u64);
            let full = encode(&p, &feats).states;
            for u in [0usize, 1, 3] {
                let bound = 4 * (u + eps + 1);
                if bound >= t {
                    continue;
                }
                let mut pert = feats.clone();
                pert.set(bound, 0, pert.at(bound, 0) + 7.0);
                let out = encode(&p, &pert).states;
                assert_eq!(full.row(u), out.row(u), "eps={eps} u={u}");
            }
        }
    }

    #[test]
    fn empty_input_encodes_to_empty() {
        let p = params_with(cfg(), 8);
        let enc = encode(&p, &Tensor::zeros(0, 4));
        assert_eq!(enc.states.rows(), 0);
        assert_eq!(enc.num_raw_frames, 0);
    }

    #[test]
    fn streaming_matches_offline_over_random_chunkings() {
        let p = params_with(cfg(), 9);
        let mut rng = stream(99, "chunks");
        for case in 0..8 {
            let t = rng.gen_range(1..40);
            let feats = random_features(t, 4, 100 + case);
            let offline = encode(&p, &feats).states;
            let mut s = EncoderStream::new(&p);
            let mut got: Vec<Tensor> = Vec::new();
            let mut at = 0;
            while at < t {
                let step = rng.gen_range(1..=t - at).min(7);
                let chunk = Tensor::from_rows(
                    &(at..at + step).map(|r| feats.row(r).to_vec()).collect::<Vec<_>>(),
                );
                got.push(s.push(&chunk).unwrap());
                at += step;
            }
            got.push(s.finalize().unwrap());
            let refs: Vec<&Tensor> = got.iter().collect();
            let streamed = Tensor::vstack(&refs);
            assert!(
                streamed.value_eq(&offline),
                "case {case}: max diff {}",
                streamed.max_abs_diff(&offline)
            );
        }
    }

    #[test]
    fn one_frame_at_a_time_matches_offline() {
        let p = params_with(cfg(), 10);
        let feats = random_features(13, 4, 200);
        let offline = encode(&p, &feats).states;
        let mut s = EncoderStream::new(&p);
        let mut rows = Vec::new();
        for t in 0..13 {
            rows.push(s.push(&feats.row_tensor(t)).unwrap());
        }
        rows.push(s.finalize().unwrap());
        let refs: Vec<&Tensor> = rows.iter().collect();
        assert!(Tensor::vstack(&refs).value_eq(&offline));
    }

    #[test]
    fn empty_push_changes_nothing() {
        let p = params_with(cfg(), 11);
        let mut s = EncoderStream::new(&p);
        s.push(&random_features(5, 4, 300)).unwrap();
        let before = (s.raw_frames(), s.emitted_rows());
        let out = s.push(&Tensor::zeros(0, 4)).unwrap();
        assert_eq!(out.rows(), 0);
        assert_eq!((s.raw_frames(), s.emitted_rows()), before);
    }

    #[test]
    fn push_after_finalize_is_session_error() {
        let p = params_with(cfg(), 12);
        let mut s = EncoderStream::new(&p);
        s.push(&random_features(3, 4, 301)).unwrap();
        s.finalize().unwrap();
        assert!(s.push(&random_features(1, 4, 302)).is_err());
        assert!(s.finalize().is_err());
    }

    #[test]
    fn independent_sessions_agree() {
        let p = params_with(cfg(), 13);
        let feats = random_features(9, 4, 400);
        let run = || {
            let mut s = EncoderStream::new(&p);
            let a = s.push(&feats).unwrap();
            let b = s.finalize().unwrap();
            Tensor::vstack(&[&a, &b])
        };
        assert!(run().value_eq(&run()));
    }

    #[test]
    fn finalize_on_empty_stream_is_empty() {
        let p = params_with(cfg(), 14);
        let mut s = EncoderStream::new(&p);
        let out = s.finalize().unwrap();
        assert_eq!(out.rows(), 0);
    }
}
