//! Model configuration and parameters. The parameter tree is generic over
//! the engine tensor type, so the same forward code runs in evaluation and
//! under gradient recording; traversal order is canonical and shared by
//! initialization, naming, checkpoint I/O, and optimizer state.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{AttnMask, Engine, Tensor};

/// Architecture hyperparameters for encoder, decoder, and CTC head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input feature dimension per frame.
    pub feat_dim: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    /// Channels of the first down-sampling convolution.
    pub conv_channels: usize,
    pub enc_blocks: usize,
    pub dec_blocks: usize,
    /// Left-context range of encoder self-attention, in down-sampled frames.
    pub tau: usize,
    /// Future-context range of the top context layer, in down-sampled frames.
    pub epsilon: usize,
    /// Vocabulary size including the three specials.
    pub vocab_size: usize,
    /// Label smoothing weight for the decoder cross-entropy.
    pub label_smoothing: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.d_model == 0 || self.d_model % self.heads != 0 {
            return bad(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            ));
        }
        if self.d_model % 2 != 0 {
            return bad(format!("d_model {} must be even for sinusoid embedding", self.d_model));
        }
        if self.heads == 0 {
            return bad("heads must be >= 1".into());
        }
        if self.feat_dim == 0 || self.ffn_hidden == 0 || self.conv_channels == 0 {
            return bad("feat_dim, ffn_hidden, conv_channels must be >= 1".into());
        }
        if self.enc_blocks == 0 || self.dec_blocks == 0 {
            return bad("enc_blocks and dec_blocks must be >= 1".into());
        }
        if self.vocab_size < 4 {
            return bad(format!("vocab_size {} leaves no room for real tokens", self.vocab_size));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label_smoothing {} outside [0,1)", self.label_smoothing));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Layer norm gain and bias, each [1, d].
#[derive(Debug, Clone)]
pub struct LnVars<T> {
    pub g: T,
    pub b: T,
}

/// Multi-head attention projections. Weights [d_model, d_model], biases
/// [1, d_model].
#[derive(Debug, Clone)]
pub struct AttnVars<T> {
    pub wq: T,
    pub bq: T,
    pub wk: T,
    pub bk: T,
    pub wv: T,
    pub bv: T,
    pub wo: T,
    pub bo: T,
}

/// Two-layer feed-forward with ReLU.
#[derive(Debug, Clone)]
pub struct FfnVars<T> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

#[derive(Debug, Clone)]
pub struct EncBlockVars<T> {
    pub ln1: LnVars<T>,
    pub attn: AttnVars<T>,
    pub ln2: LnVars<T>,
    pub ffn: FfnVars<T>,
}

#[derive(Debug, Clone)]
pub struct DecBlockVars<T> {
    pub ln1: LnVars<T>,
    pub self_attn: AttnVars<T>,
    pub ln2: LnVars<T>,
    pub cross_attn: AttnVars<T>,
    pub ln3: LnVars<T>,
    pub ffn: FfnVars<T>,
}

#[derive(Debug, Clone)]
pub struct EncoderVars<T> {
    pub conv1_w: T,
    pub conv1_b: T,
    pub conv2_w: T,
    pub conv2_b: T,
    pub blocks: Vec<EncBlockVars<T>>,
    pub final_ln: LnVars<T>,
    /// Context layer: [(ε+1)·d_model, d_model] and one summed bias.
    pub ctx_w: T,
    pub ctx_b: T,
}

#[derive(Debug, Clone)]
pub struct DecoderVars<T> {
    pub embed: T,
    pub blocks: Vec<DecBlockVars<T>>,
    pub final_ln: LnVars<T>,
    pub out_w: T,
    pub out_b: T,
}

#[derive(Debug, Clone)]
pub struct ModelVars<T> {
    pub enc: EncoderVars<T>,
    pub dec: DecoderVars<T>,
    pub ctc_w: T,
    pub ctc_b: T,
}

/// What a parameter is, for initialization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ParamKind {
    Weight,
    Bias,
    Gain,
    Embed,
}

impl<T> LnVars<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> LnVars<U> {
        LnVars { g: f(&self.g), b: f(&self.b) }
    }

    fn for_each<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        f(format!("{prefix}.g"), &self.g);
        f(format!("{prefix}.b"), &self.b);
    }
}

impl<T> AttnVars<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> AttnVars<U> {
        AttnVars {
            wq: f(&self.wq),
            bq: f(&self.bq),
            wk: f(&self.wk),
            bk: f(&self.bk),
            wv: f(&self.wv),
            bv: f(&self.bv),
            wo: f(&self.wo),
            bo: f(&self.bo),
        }
    }

    fn for_each<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        f(format!("{prefix}.wq"), &self.wq);
        f(format!("{prefix}.bq"), &self.bq);
        f(format!("{prefix}.wk"), &self.wk);
        f(format!("{prefix}.bk"), &self.bk);
        f(format!("{prefix}.wv"), &self.wv);
        f(format!("{prefix}.bv"), &self.bv);
        f(format!("{prefix}.wo"), &self.wo);
        f(format!("{prefix}.bo"), &self.bo);
    }
}

impl<T> FfnVars<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> FfnVars<U> {
        FfnVars { w1: f(&self.w1), b1: f(&self.b1), w2: f(&self.w2), b2: f(&self.b2) }
    }

    fn for_each<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        f(format!("{prefix}.w1"), &self.w1);
        f(format!("{prefix}.b1"), &self.b1);
        f(format!("{prefix}.w2"), &self.w2);
        f(format!("{prefix}.b2"), &self.b2);
    }
}

impl<T> ModelVars<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ModelVars<U> {
        ModelVars {
            enc: EncoderVars {
                conv1_w: f(&self.enc.conv1_w),
                conv1_b: f(&self.enc.conv1_b),
                conv2_w: f(&self.enc.conv2_w),
                conv2_b: f(&self.enc.conv2_b),
                blocks: self
                    .enc
                    .blocks
                    .iter()
                    .map(|b| EncBlockVars {
                        ln1: b.ln1.map(f),
                        attn: b.attn.map(f),
                        ln2: b.ln2.map(f),
                        ffn: b.ffn.map(f),
                    })
                    .collect(),
                final_ln: self.enc.final_ln.map(f),
                ctx_w: f(&self.enc.ctx_w),
                ctx_b: f(&self.enc.ctx_b),
            },
            dec: DecoderVars {
                embed: f(&self.dec.embed),
                blocks: self
                    .dec
                    .blocks
                    .iter()
                    .map(|b| DecBlockVars {
                        ln1: b.ln1.map(f),
                        self_attn: b.self_attn.map(f),
                        ln2: b.ln2.map(f),
                        cross_attn: b.cross_attn.map(f),
                        ln3: b.ln3.map(f),
                        ffn: b.ffn.map(f),
                    })
                    .collect(),
                final_ln: self.dec.final_ln.map(f),
                out_w: f(&self.dec.out_w),
                out_b: f(&self.dec.out_b),
            },
            ctc_w: f(&self.ctc_w),
            ctc_b: f(&self.ctc_b),
        }
    }

    /// Visit every leaf with its canonical name, in canonical order.
    pub fn for_each<'a>(&'a self, f: &mut impl FnMut(String, &'a T)) {
        f("enc.conv1.w".into(), &self.enc.conv1_w);
        f("enc.conv1.b".into(), &self.enc.conv1_b);
        f("enc.conv2.w".into(), &self.enc.conv2_w);
        f("enc.conv2.b".into(), &self.enc.conv2_b);
        for (i, b) in self.enc.blocks.iter().enumerate() {
            b.ln1.for_each(&format!("enc.block{i}.ln1"), f);
            b.attn.for_each(&format!("enc.block{i}.attn"), f);
            b.ln2.for_each(&format!("enc.block{i}.ln2"), f);
            b.ffn.for_each(&format!("enc.block{i}.ffn"), f);
        }
        self.enc.final_ln.for_each("enc.ln", f);
        f("enc.ctx.w".into(), &self.enc.ctx_w);
        f("enc.ctx.b".into(), &self.enc.ctx_b);
        f("dec.embed".into(), &self.dec.embed);
        for (i, b) in self.dec.blocks.iter().enumerate() {
            b.ln1.for_each(&format!("dec.block{i}.ln1"), f);
            b.self_attn.for_each(&format!("dec.block{i}.self"), f);
            b.ln2.for_each(&format!("dec.block{i}.ln2"), f);
            b.cross_attn.for_each(&format!("dec.block{i}.cross"), f);
            b.ln3.for_each(&format!("dec.block{i}.ln3"), f);
            b.ffn.for_each(&format!("dec.block{i}.ffn"), f);
        }
        self.dec.final_ln.for_each("dec.ln", f);
        f("dec.out.w".into(), &self.dec.out_w);
        f("dec.out.b".into(), &self.dec.out_b);
        f("ctc.w".into(), &self.ctc_w);
        f("ctc.b".into(), &self.ctc_b);
    }
}

/// The full schema: every parameter's name, shape, and kind, in the same
/// canonical order `for_each` visits.
pub fn param_schema(cfg: &ModelConfig) -> Vec<(String, usize, usize, ParamKind)> {
    type Row = (String, usize, usize, ParamKind);
    let d = cfg.d_model;
    let mut out: Vec<Row> = Vec::new();
    let ln = |out: &mut Vec<Row>, p: &str| {
        out.push((format!("{p}.g"), 1, d, ParamKind::Gain));
        out.push((format!("{p}.b"), 1, d, ParamKind::Bias));
    };
    let attn = |out: &mut Vec<Row>, p: &str| {
        for s in ["q", "k", "v", "o"] {
            out.push((format!("{p}.w{s}"), d, d, ParamKind::Weight));
            out.push((format!("{p}.b{s}"), 1, d, ParamKind::Bias));
        }
    };
    let ffn = |out: &mut Vec<Row>, p: &str| {
        out.push((format!("{p}.w1"), d, cfg.ffn_hidden, ParamKind::Weight));
        out.push((format!("{p}.b1"), 1, cfg.ffn_hidden, ParamKind::Bias));
        out.push((format!("{p}.w2"), cfg.ffn_hidden, d, ParamKind::Weight));
        out.push((format!("{p}.b2"), 1, d, ParamKind::Bias));
    };

    out.push(("enc.conv1.w".into(), 3 * cfg.feat_dim, cfg.conv_channels, ParamKind::Weight));
    out.push(("enc.conv1.b".into(), 1, cfg.conv_channels, ParamKind::Bias));
    out.push(("enc.conv2.w".into(), 3 * cfg.conv_channels, d, ParamKind::Weight));
    out.push(("enc.conv2.b".into(), 1, d, ParamKind::Bias));
    for i in 0..cfg.enc_blocks {
        ln(&mut out, &format!("enc.block{i}.ln1"));
        attn(&mut out, &format!("enc.block{i}.attn"));
        ln(&mut out, &format!("enc.block{i}.ln2"));
        ffn(&mut out, &format!("enc.block{i}.ffn"));
    }
    ln(&mut out, "enc.ln");
    out.push(("enc.ctx.w".into(), (cfg.epsilon + 1) * d, d, ParamKind::Weight));
    out.push(("enc.ctx.b".into(), 1, d, ParamKind::Bias));
    out.push(("dec.embed".into(), cfg.vocab_size, d, ParamKind::Embed));
    for i in 0..cfg.dec_blocks {
        ln(&mut out, &format!("dec.block{i}.ln1"));
        attn(&mut out, &format!("dec.block{i}.self"));
        ln(&mut out, &format!("dec.block{i}.ln2"));
        attn(&mut out, &format!("dec.block{i}.cross"));
        ln(&mut out, &format!("dec.block{i}.ln3"));
        ffn(&mut out, &format!("dec.block{i}.ffn"));
    }
    ln(&mut out, "dec.ln");
    out.push(("dec.out.w".into(), d, cfg.vocab_size, ParamKind::Weight));
    out.push(("dec.out.b".into(), 1, cfg.vocab_size, ParamKind::Bias));
    out.push(("ctc.w".into(), d, cfg.vocab_size, ParamKind::Weight));
    out.push(("ctc.b".into(), 1, cfg.vocab_size, ParamKind::Bias));
    out
}

impl ModelVars<Tensor> {
    /// Construct every parameter in canonical order through `f`.
    pub fn from_fn(
        cfg: &ModelConfig,
        f: &mut impl FnMut(&str, usize, usize, ParamKind) -> Result<Tensor>,
    ) -> Result<Self> {
        let schema = param_schema(cfg);
        let mut made: Vec<Tensor> = Vec::with_capacity(schema.len());
        for (name, r, c, k) in &schema {
            let t = f(name, *r, *c, *k)?;
            if t.shape() != (*r, *c) {
                return Err(Error::Shape(format!(
                    "parameter {name}: expected [{r}, {c}], got {:?}",
                    t.shape()
                )));
            }
            made.push(t);
        }
        let mut it = made.into_iter();
        let mut next = || it.next().expect("schema length mismatch");
        let take_ln = |next: &mut dyn FnMut() -> Tensor| LnVars { g: next(), b: next() };
        let take_attn = |next: &mut dyn FnMut() -> Tensor| AttnVars {
            wq: next(),
            bq: next(),
            wk: next(),
            bk: next(),
            wv: next(),
            bv: next(),
            wo: next(),
            bo: next(),
        };
        let take_ffn = |next: &mut dyn FnMut() -> Tensor| FfnVars {
            w1: next(),
            b1: next(),
            w2: next(),
            b2: next(),
        };
        let enc = EncoderVars {
            conv1_w: next(),
            conv1_b: next(),
            conv2_w: next(),
            conv2_b: next(),
            blocks: (0..cfg.enc_blocks)
                .map(|_| EncBlockVars {
                    ln1: take_ln(&mut next),
                    attn: take_attn(&mut next),
                    ln2: take_ln(&mut next),
                    ffn: take_ffn(&mut next),
                })
                .collect(),
            final_ln: take_ln(&mut next),
            ctx_w: next(),
            ctx_b: next(),
        };
        let dec = DecoderVars {
            embed: next(),
            blocks: (0..cfg.dec_blocks)
                .map(|_| DecBlockVars {
                    ln1: take_ln(&mut next),
                    self_attn: take_attn(&mut next),
                    ln2: take_ln(&mut next),
                    cross_attn: take_attn(&mut next),
                    ln3: take_ln(&mut next),
                    ffn: take_ffn(&mut next),
                })
                .collect(),
            final_ln: take_ln(&mut next),
            out_w: next(),
            out_b: next(),
        };
        let vars = ModelVars { enc, dec, ctc_w: next(), ctc_b: next() };
        assert!(it.next().is_none(), "schema length mismatch");
        Ok(vars)
    }

    /// Glorot-normal weights, zero biases, unit gains, 1/√d embeddings.
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        Self::from_fn(cfg, &mut |_, r, c, kind| {
            Ok(match kind {
                ParamKind::Bias => Tensor::zeros(r, c),
                ParamKind::Gain => Tensor::filled(r, c, 1.0),
                ParamKind::Weight => {
                    let std = (2.0 / (r + c) as f64).sqrt();
                    let dist = Normal::new(0.0, std).unwrap();
                    Tensor::new(r, c, (0..r * c).map(|_| dist.sample(rng)).collect())
                }
                ParamKind::Embed => {
                    let std = 1.0 / (c as f64).sqrt();
                    let dist = Normal::new(0.0, std).unwrap();
                    Tensor::new(r, c, (0..r * c).map(|_| dist.sample(rng)).collect())
                }
            })
        })
        .expect("schema-driven init cannot fail")
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.for_each(&mut |name, t| out.push((name, t)));
        out
    }
}

/// Immutable trained parameters plus their architecture.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub cfg: ModelConfig,
    pub vars: ModelVars<Tensor>,
}

impl ModelParams {
    pub fn init(cfg: ModelConfig, rng: &mut impl Rng) -> Self {
        let vars = ModelVars::init(&cfg, rng);
        ModelParams { cfg, vars }
    }

    /// Lift every parameter into an engine (leaves when recording).
    pub fn lift<E: Engine>(&self, e: &mut E) -> ModelVars<E::T> {
        self.vars.map(&mut |t| e.lift(t))
    }
}

/// Sinusoid positional rows for the given absolute positions.
pub fn sinusoid_rows(positions: &[usize], d_model: usize) -> Tensor {
    assert!(d_model % 2 == 0, "sinusoid embedding needs even d_model");
    let mut out = Tensor::zeros(positions.len(), d_model);
    for (r, &pos) in positions.iter().enumerate() {
        let row = out.row_mut(r);
        for i in 0..d_model / 2 {
            let rate = 10000f64.powf(-((2 * i) as f64) / d_model as f64);
            let angle = pos as f64 * rate;
            row[2 * i] = angle.sin();
            row[2 * i + 1] = angle.cos();
        }
    }
    out
}

/// softmax(QKᵀ/√d_k)V per head over the mask's window, heads concatenated,
/// then the output projection. `queries_x` feeds Q; `keys_x` feeds K and V.
pub fn multi_head_attention<E: Engine>(
    e: &mut E,
    p: &AttnVars<E::T>,
    queries_x: &E::T,
    keys_x: &E::T,
    mask: &AttnMask,
    heads: usize,
    d_model: usize,
) -> E::T {
    let dk = d_model / heads;
    let q = e.matmul(queries_x, &p.wq);
    let q = e.add_bias(&q, &p.bq);
    let k = e.matmul(keys_x, &p.wk);
    let k = e.add_bias(&k, &p.bk);
    let v = e.matmul(keys_x, &p.wv);
    let v = e.add_bias(&v, &p.bv);
    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dk, (h + 1) * dk);
        let qh = e.slice_cols(&q, lo, hi);
        let kh = e.slice_cols(&k, lo, hi);
        let vh = e.slice_cols(&v, lo, hi);
        let kt = e.transpose(&kh);
        let scores = e.matmul(&qh, &kt);
        let scaled = e.scale(&scores, 1.0 / (dk as f64).sqrt());
        let weights = e.masked_softmax(&scaled, mask);
        head_outs.push(e.matmul(&weights, &vh));
    }
    let cat = e.concat_cols(&head_outs);
    let out = e.matmul(&cat, &p.wo);
    e.add_bias(&out, &p.bo)
}

/// relu(x·w1 + b1)·w2 + b2.
pub fn ffn_forward<E: Engine>(e: &mut E, p: &FfnVars<E::T>, x: &E::T) -> E::T {
    let h = e.matmul(x, &p.w1);
    let h = e.add_bias(&h, &p.b1);
    let h = e.relu(&h);
    let out = e.matmul(&h, &p.w2);
    e.add_bias(&out, &p.b2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    pub fn tiny_cfg() -> ModelConfig {
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

    #[test]
    fn schema_matches_traversal_order() {
        let cfg = tiny_cfg();
        let mut rng = stream(1, "init");
        let vars = ModelVars::init(&cfg, &mut rng);
        let schema = param_schema(&cfg);
        let named = vars.named();
        assert_eq!(schema.len(), named.len());
        for ((sname, r, c, _), (vname, t)) in schema.iter().zip(&named) {
            assert_eq!(sname, vname);
            assert_eq!(t.shape(), (*r, *c), "shape of {sname}");
        }
    }

    #[test]
    fn init_is_seed_deterministic() {
        let cfg = tiny_cfg();
        let a = ModelVars::init(&cfg, &mut stream(9, "init"));
        let b = ModelVars::init(&cfg, &mut stream(9, "init"));
        for ((_, x), (_, y)) in a.named().iter().zip(b.named().iter()) {
            assert!(x.value_eq(y));
        }
    }

    #[test]
    fn validate_rejects_bad_configs() {
        let mut cfg = tiny_cfg();
        cfg.heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg();
        cfg.label_smoothing = 1.0;
        assert!(cfg.validate().is_err());
        assert!(tiny_cfg().validate().is_ok());
    }

    #[test]
    fn sinusoid_rows_are_position_dependent_constants() {
        let a = sinusoid_rows(&[0, 1, 2], 8);
        let b = sinusoid_rows(&[2], 8);
        assert_eq!(a.row(2), b.row(0));
        assert_eq!(a.at(0, 0), 0.0);
        assert_eq!(a.at(0, 1), 1.0);
    }
}
