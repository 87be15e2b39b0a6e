//! Joint training of the recognizer: an interpolated objective mixing the
//! alignment-marginal loss with label-smoothed decoder cross-entropy, Adam
//! with inverse-square-root warmup, deterministic per-epoch shuffling and
//! feature masking, binary checkpoints, and parameter averaging.

use std::path::Path;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::corpus::{edit_distance, Utterance, BOUNDARY};
use crate::ctc::CtcLossOp;
use crate::decoder::{decoder_forward, LabelSmoothedCeOp};
use crate::encoder::encoder_forward;
use crate::error::{Error, Result};
use crate::kernel::{Engine, TapeEngine, Tensor};
use crate::model::{param_schema, ModelConfig, ModelParams, ModelVars};
use crate::pipeline::{oah_decode, ops_decode};
use crate::rng::stream;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.98;
pub const ADAM_EPS: f64 = 1e-9;

const CKPT_MAGIC: &[u8; 4] = b"OAHC";
const CKPT_VERSION: u16 = 1;

/// Inverse-square-root schedule with linear warmup; `step` counts from 1.
pub fn noam_lr(scale: f64, d_model: usize, step: u64, warmup: u64) -> f64 {
    assert!(step >= 1 && warmup >= 1, "schedule steps count from 1");
    let s = step as f64;
    let w = warmup as f64;
    scale * (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
}

/// Every parameter tensor in canonical schema order.
pub fn flatten(vars: &ModelVars<Tensor>) -> Vec<Tensor> {
    let mut out = Vec::new();
    vars.for_each(&mut |_, t| out.push(t.clone()));
    out
}

/// Rebuild structured parameters from a canonical-order list, shape-checked
/// against the schema.
pub fn unflatten(cfg: &ModelConfig, flat: Vec<Tensor>) -> Result<ModelVars<Tensor>> {
    let mut it = flat.into_iter();
    let vars = ModelVars::from_fn(cfg, &mut |name, _, _, _| {
        it.next().ok_or_else(|| Error::Data(format!("parameter list ends before {name}")))
    })?;
    if it.next().is_some() {
        return Err(Error::Data("parameter list longer than the schema".into()));
    }
    Ok(vars)
}

/// Adam accumulators, one pair per parameter in schema order.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(flat: &[Tensor]) -> Self {
        AdamState {
            step: 0,
            m: flat.iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect(),
            v: flat.iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect(),
        }
    }
}

/// One Adam step with bias correction. Parameters whose gradient is absent
/// are left untouched, accumulators included.
pub fn adam_update(
    flat: &mut [Tensor],
    grads: &[Option<Tensor>],
    st: &mut AdamState,
    lr: f64,
) {
    assert_eq!(flat.len(), grads.len(), "one gradient slot per parameter");
    assert_eq!(flat.len(), st.m.len(), "optimizer state matches parameters");
    st.step += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(st.step.min(i32::MAX as u64) as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(st.step.min(i32::MAX as u64) as i32);
    for (i, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        assert_eq!(g.shape(), flat[i].shape(), "gradient shape matches parameter");
        let p = flat[i].data_mut();
        let m = st.m[i].data_mut();
        let v = st.v[i].data_mut();
        for (j, &gj) in g.data().iter().enumerate() {
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * gj;
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * gj * gj;
            p[j] -= lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + ADAM_EPS);
        }
    }
}

/// Loss values of one forward pass. Components that were not computed
/// (the weight for them was zero) are NaN.
#[derive(Debug, Clone, Copy)]
pub struct UttLoss {
    pub joint: f64,
    pub ctc: f64,
    pub ce: f64,
}

/// Forward and backward for one utterance under the interpolated objective
/// α·alignment + (1−α)·cross-entropy. Returns None when the transcript is
/// not representable in the downsampled frames (infinite alignment loss),
/// which callers count and skip. The gradient vector is indexed in schema
/// order.
pub fn utterance_loss_grads(
    params: &ModelParams,
    features: &Tensor,
    transcript: &[usize],
    alpha: f64,
) -> Option<(UttLoss, Vec<Option<Tensor>>)> {
    assert!((0.0..=1.0).contains(&alpha), "objective weight in [0,1]");
    let p_len = param_schema(&params.cfg).len();
    let mut e = TapeEngine::new();
    // Parameters are lifted first, so their tape ids are exactly 0..P in
    // schema order and `backward` yields the flat gradient directly.
    let vars = params.lift(&mut e);
    let feats = e.lift(features);
    let enc = encoder_forward(&mut e, &vars.enc, &params.cfg, &feats);
    let mut ctc_val = f64::NAN;
    let mut ce_val = f64::NAN;
    let mut ctc_node = None;
    if alpha > 0.0 {
        let lattice = crate::ctc::ctc_head(&mut e, &vars.ctc_w, &vars.ctc_b, &enc);
        let node = e.custom(
            Rc::new(CtcLossOp { labels: transcript.to_vec(), blank: BOUNDARY }),
            &[lattice],
        );
        ctc_val = e.value(&node).at(0, 0);
        if ctc_val.is_infinite() {
            return None;
        }
        ctc_node = Some(node);
    }
    let mut ce_node = None;
    if alpha < 1.0 {
        let rows = decoder_forward(&mut e, &vars.dec, &params.cfg, transcript, &enc);
        let mut targets = transcript.to_vec();
        targets.push(BOUNDARY);
        let node = e.custom(
            Rc::new(LabelSmoothedCeOp { targets, eta: params.cfg.label_smoothing }),
            &[rows],
        );
        ce_val = e.value(&node).at(0, 0);
        ce_node = Some(node);
    }
    let root = match (ctc_node, ce_node) {
        (Some(c), None) => c,
        (None, Some(a)) => a,
        (Some(c), Some(a)) => {
            let cs = e.scale(&c, alpha);
            let as_ = e.scale(&a, 1.0 - alpha);
            e.add(&cs, &as_)
        }
        (None, None) => unreachable!("alpha is in [0,1]"),
    };
    let joint = e.value(&root).at(0, 0);
    let mut grads = e.backward(root);
    grads.truncate(p_len);
    Some((UttLoss { joint, ctc: ctc_val, ce: ce_val }, grads))
}

/// Accumulated losses and counts for a batch (or an epoch).
#[derive(Debug, Clone, Copy, Default)]
pub struct LossAccum {
    pub joint_sum: f64,
    pub ctc_sum: f64,
    pub ce_sum: f64,
    pub used: usize,
    pub ctc_n: usize,
    pub ce_n: usize,
    pub skipped: usize,
}

impl LossAccum {
    pub fn add(&mut self, l: &UttLoss) {
        self.joint_sum += l.joint;
        self.used += 1;
        if l.ctc.is_finite() {
            self.ctc_sum += l.ctc;
            self.ctc_n += 1;
        }
        if l.ce.is_finite() {
            self.ce_sum += l.ce;
            self.ce_n += 1;
        }
    }

    pub fn merge(&mut self, o: &LossAccum) {
        self.joint_sum += o.joint_sum;
        self.ctc_sum += o.ctc_sum;
        self.ce_sum += o.ce_sum;
        self.used += o.used;
        self.ctc_n += o.ctc_n;
        self.ce_n += o.ce_n;
        self.skipped += o.skipped;
    }

    pub fn mean_joint(&self) -> f64 {
        if self.used == 0 { f64::NAN } else { self.joint_sum / self.used as f64 }
    }

    pub fn mean_ctc(&self) -> f64 {
        if self.ctc_n == 0 { f64::NAN } else { self.ctc_sum / self.ctc_n as f64 }
    }

    pub fn mean_ce(&self) -> f64 {
        if self.ce_n == 0 { f64::NAN } else { self.ce_sum / self.ce_n as f64 }
    }
}

/// Mean loss and mean gradient over a batch. Unrepresentable utterances
/// are skipped and counted; if everything was skipped the gradient slots
/// are all None.
pub fn batch_loss_grads(
    params: &ModelParams,
    batch: &[(&Tensor, &[usize])],
    alpha: f64,
) -> (LossAccum, Vec<Option<Tensor>>) {
    let p_len = param_schema(&params.cfg).len();
    let mut acc = LossAccum::default();
    let mut sum: Vec<Option<Tensor>> = vec![None; p_len];
    for (features, transcript) in batch {
        match utterance_loss_grads(params, features, transcript, alpha) {
            None => acc.skipped += 1,
            Some((loss, grads)) => {
                acc.add(&loss);
                for (slot, g) in sum.iter_mut().zip(grads) {
                    match (slot.as_mut(), g) {
                        (_, None) => {}
                        (None, Some(g)) => *slot = Some(g),
                        (Some(s), Some(g)) => s.add_assign(&g),
                    }
                }
            }
        }
    }
    if acc.used > 1 {
        let inv = 1.0 / acc.used as f64;
        for slot in sum.iter_mut().flatten() {
            for x in slot.data_mut() {
                *x *= inv;
            }
        }
    }
    (acc, sum)
}

/// Zero a random span of frames and a random span of feature dimensions.
/// Span widths are drawn up to the caps (clamped to the input size); a
/// width of zero leaves that axis untouched.
pub fn spec_mask(
    features: &Tensor,
    max_frames: usize,
    max_dims: usize,
    rng: &mut impl Rng,
) -> Tensor {
    let mut out = features.clone();
    let (t, d) = out.shape();
    if t > 0 {
        let w = rng.gen_range(0..=max_frames.min(t));
        let t0 = rng.gen_range(0..=t - w);
        for r in t0..t0 + w {
            for x in out.row_mut(r) {
                *x = 0.0;
            }
        }
    }
    if d > 0 && t > 0 {
        let w = rng.gen_range(0..=max_dims.min(d));
        let c0 = rng.gen_range(0..=d - w);
        for r in 0..t {
            for c in c0..c0 + w {
                out.set(r, c, 0.0);
            }
        }
    }
    out
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub adam: AdamState,
    pub epochs_done: u64,
}

impl Checkpoint {
    pub fn fresh(params: ModelParams) -> Self {
        let adam = AdamState::new(&flatten(&params.vars));
        Checkpoint { params, adam, epochs_done: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Total epochs counted from scratch; resuming continues toward this.
    pub epochs: usize,
    pub batch_size: usize,
    /// Weight of the alignment loss; 1−α goes to the cross-entropy.
    pub alpha: f64,
    pub lr_scale: f64,
    pub warmup_steps: u64,
    /// Probability of masking an utterance; 0 disables masking.
    pub mask_prob: f64,
    pub mask_max_frames: usize,
    pub mask_max_dims: usize,
    pub seed: u64,
    /// Epochs whose mean loss is not finite or exceeds this bound are
    /// rolled back and training stops.
    pub diverge_loss: f64,
    /// Beam width for the per-epoch dev decodes.
    pub dev_beam: usize,
    pub score_eos: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            batch_size: 8,
            alpha: 0.1,
            lr_scale: 1.0,
            warmup_steps: 200,
            mask_prob: 0.0,
            mask_max_frames: 6,
            mask_max_dims: 2,
            seed: 0,
            diverge_loss: f64::INFINITY,
            dev_beam: 4,
            score_eos: false,
        }
    }
}

/// One row of the training log. Dev error rates are NaN when there is no
/// dev set; loss components are NaN when their weight was zero.
#[derive(Debug, Clone, Copy)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub loss_joint: f64,
    pub loss_ctc: f64,
    pub loss_ce: f64,
    pub dev_cer_ops: f64,
    pub dev_cer_oah: f64,
    pub skipped: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<EpochMetrics>,
    /// Set when an epoch diverged and was rolled back.
    pub aborted: Option<String>,
}

/// Corpus-level token error rate of a decode function over a set.
fn eval_cer(decode: impl Fn(&Utterance) -> Vec<usize>, set: &[Utterance]) -> f64 {
    if set.is_empty() {
        return f64::NAN;
    }
    let mut dist = 0usize;
    let mut len = 0usize;
    for u in set {
        dist += edit_distance(&decode(u), &u.transcript);
        len += u.transcript.len();
    }
    dist as f64 / len.max(1) as f64
}

/// Run (or continue) training. Epoch-scoped named random streams drive
/// shuffling and masking, so resuming from a checkpoint reproduces the
/// uninterrupted run bit for bit.
pub fn train(
    start: Checkpoint,
    train_set: &[Utterance],
    dev_set: &[Utterance],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&cfg.alpha) {
        return Err(Error::Config(format!("alpha {} outside [0,1]", cfg.alpha)));
    }
    if train_set.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let model_cfg = start.params.cfg.clone();
    let schema_len = param_schema(&model_cfg).len();
    let mut flat = flatten(&start.params.vars);
    let mut adam = start.adam;
    if adam.m.len() != schema_len {
        return Err(Error::Config(format!(
            "optimizer state has {} tensors, schema has {}",
            adam.m.len(),
            schema_len
        )));
    }
    let mut epochs_done = start.epochs_done;
    let mut params = ModelParams { cfg: model_cfg.clone(), vars: unflatten(&model_cfg, flat.clone())? };
    let mut metrics = Vec::new();
    let mut aborted = None;

    for epoch in (epochs_done as usize)..cfg.epochs {
        let flat_before = flat.clone();
        let adam_before = adam.clone();
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut stream(cfg.seed, &format!("shuffle/epoch{epoch}")));
        let mut mask_rng = stream(cfg.seed, &format!("mask/epoch{epoch}"));
        let mut epoch_acc = LossAccum::default();
        let mut last_lr = f64::NAN;
        for chunk in order.chunks(cfg.batch_size) {
            let masked: Vec<(Tensor, &[usize])> = chunk
                .iter()
                .map(|&i| {
                    let u = &train_set[i];
                    let feats = if cfg.mask_prob > 0.0 && mask_rng.gen::<f64>() < cfg.mask_prob {
                        spec_mask(&u.features, cfg.mask_max_frames, cfg.mask_max_dims, &mut mask_rng)
                    } else {
                        u.features.clone()
                    };
                    (feats, u.transcript.as_slice())
                })
                .collect();
            let batch: Vec<(&Tensor, &[usize])> =
                masked.iter().map(|(f, t)| (f, *t)).collect();
            let (acc, grads) = batch_loss_grads(&params, &batch, cfg.alpha);
            epoch_acc.merge(&acc);
            if acc.used == 0 {
                continue;
            }
            let lr = noam_lr(cfg.lr_scale, model_cfg.d_model, adam.step + 1, cfg.warmup_steps);
            last_lr = lr;
            adam_update(&mut flat, &grads, &mut adam, lr);
            params = ModelParams { cfg: model_cfg.clone(), vars: unflatten(&model_cfg, flat.clone())? };
        }
        let mean_joint = epoch_acc.mean_joint();
        if !(mean_joint.is_finite() && mean_joint <= cfg.diverge_loss) {
            flat = flat_before;
            adam = adam_before;
            params = ModelParams { cfg: model_cfg.clone(), vars: unflatten(&model_cfg, flat.clone())? };
            metrics.push(EpochMetrics {
                epoch,
                lr: last_lr,
                loss_joint: mean_joint,
                loss_ctc: epoch_acc.mean_ctc(),
                loss_ce: epoch_acc.mean_ce(),
                dev_cer_ops: f64::NAN,
                dev_cer_oah: f64::NAN,
                skipped: epoch_acc.skipped,
            });
            aborted = Some(format!(
                "epoch {epoch} diverged (mean loss {mean_joint}); rolled back to the last stable state"
            ));
            break;
        }
        let dev_cer_ops =
            eval_cer(|u| ops_decode(&params, &u.features, cfg.dev_beam).selected_tokens().to_vec(), dev_set);
        let dev_cer_oah = eval_cer(
            |u| oah_decode(&params, &u.features, cfg.dev_beam, cfg.score_eos).selected_tokens().to_vec(),
            dev_set,
        );
        metrics.push(EpochMetrics {
            epoch,
            lr: last_lr,
            loss_joint: mean_joint,
            loss_ctc: epoch_acc.mean_ctc(),
            loss_ce: epoch_acc.mean_ce(),
            dev_cer_ops,
            dev_cer_oah,
            skipped: epoch_acc.skipped,
        });
        epochs_done = epoch as u64 + 1;
    }

    Ok(TrainOutcome {
        checkpoint: Checkpoint { params, adam, epochs_done },
        metrics,
        aborted,
    })
}

/// Write the training log as CSV; NaN fields are left empty.
pub fn write_metrics_csv(path: &Path, rows: &[EpochMetrics]) -> Result<()> {
    let mut out =
        String::from("epoch,lr,loss_joint,loss_ctc,loss_ce,dev_cer_ops,dev_cer_oah,skipped\n");
    let cell = |v: f64| if v.is_finite() { v.to_string() } else { String::new() };
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.epoch,
            cell(r.lr),
            cell(r.loss_joint),
            cell(r.loss_ctc),
            cell(r.loss_ce),
            cell(r.dev_cer_ops),
            cell(r.dev_cer_oah),
            r.skipped
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Elementwise mean of parameter sets sharing one architecture. A single
/// input comes back unchanged.
pub fn average_params(parts: &[ModelParams]) -> Result<ModelParams> {
    let Some(first) = parts.first() else {
        return Err(Error::Config("nothing to average".into()));
    };
    for (i, p) in parts.iter().enumerate().skip(1) {
        if p.cfg != first.cfg {
            return Err(Error::Config(format!(
                "parameter set {i} was built for a different architecture"
            )));
        }
    }
    let flats: Vec<Vec<Tensor>> = parts.iter().map(|p| flatten(&p.vars)).collect();
    let inv = 1.0 / parts.len() as f64;
    let mut mean = flats[0].clone();
    for t in 1..flats.len() {
        for (acc, add) in mean.iter_mut().zip(&flats[t]) {
            acc.add_assign(add);
        }
    }
    for acc in &mut mean {
        for x in acc.data_mut() {
            *x *= inv;
        }
    }
    Ok(ModelParams { cfg: first.cfg.clone(), vars: unflatten(&first.cfg, mean)? })
}

fn put_u16(buf: &mut Vec<u8>, v: u16) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(buf: &mut Vec<u8>, t: &Tensor) {
    put_u32(buf, t.rows() as u32);
    put_u32(buf, t.cols() as u32);
    for &x in t.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

/// Byte cursor with positioned parse errors.
struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Parse {
                path: self.path.to_path_buf(),
                offset: self.bytes.len() as u64,
                msg: format!("file ends inside {what}"),
            });
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn err(&self, offset: usize, msg: String) -> Error {
        Error::Parse { path: self.path.to_path_buf(), offset: offset as u64, msg }
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn tensor(&mut self, what: &str) -> Result<Tensor> {
        let r = self.u32(&format!("{what} rows"))? as usize;
        let c = self.u32(&format!("{what} cols"))? as usize;
        let raw = self.take(8 * r * c, what)?;
        let data: Vec<f64> =
            raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        Ok(Tensor::new(r, c, data))
    }
}

/// Save a checkpoint; optimizer state is included only when `with_adam`
/// is set (resumable checkpoints need it, shipped models do not).
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint, with_adam: bool) -> Result<()> {
    let cfg_json = serde_json::to_vec(&ckpt.params.cfg)
        .map_err(|e| Error::Data(format!("config serialization failed: {e}")))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    put_u16(&mut buf, CKPT_VERSION);
    put_u32(&mut buf, cfg_json.len() as u32);
    buf.extend_from_slice(&cfg_json);
    put_u64(&mut buf, ckpt.epochs_done);
    buf.push(with_adam as u8);
    let flat = flatten(&ckpt.params.vars);
    for t in &flat {
        put_tensor(&mut buf, t);
    }
    if with_adam {
        put_u64(&mut buf, ckpt.adam.step);
        for t in &ckpt.adam.m {
            put_tensor(&mut buf, t);
        }
        for t in &ckpt.adam.v {
            put_tensor(&mut buf, t);
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

/// Load a checkpoint. Files saved without optimizer state come back with a
/// fresh one at step 0.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    let mut cur = Cursor { bytes: &bytes, at: 0, path };
    let magic = cur.take(4, "magic")?;
    if magic != CKPT_MAGIC {
        return Err(cur.err(0, "not a checkpoint file (bad magic)".into()));
    }
    let version = cur.u16("version")?;
    if version != CKPT_VERSION {
        return Err(cur.err(4, format!("unsupported checkpoint version {version}")));
    }
    let cfg_len = cur.u32("config length")? as usize;
    let at_cfg = cur.at;
    let cfg_bytes = cur.take(cfg_len, "config")?;
    let cfg: ModelConfig = serde_json::from_slice(cfg_bytes)
        .map_err(|e| cur.err(at_cfg, format!("bad config: {e}")))?;
    cfg.validate()?;
    let epochs_done = cur.u64("epochs")?;
    let has_adam = cur.take(1, "optimizer flag")?[0] != 0;
    let schema_len = param_schema(&cfg).len();
    let mut flat = Vec::with_capacity(schema_len);
    for i in 0..schema_len {
        flat.push(cur.tensor(&format!("parameter {i}"))?);
    }
    let vars = unflatten(&cfg, flat.clone())?;
    let adam = if has_adam {
        let step = cur.u64("optimizer step")?;
        let mut m = Vec::with_capacity(schema_len);
        for i in 0..schema_len {
            m.push(cur.tensor(&format!("optimizer m {i}"))?);
        }
        let mut v = Vec::with_capacity(schema_len);
        for i in 0..schema_len {
            v.push(cur.tensor(&format!("optimizer v {i}"))?);
        }
        AdamState { step, m, v }
    } else {
        AdamState::new(&flat)
    };
    if cur.at != bytes.len() {
        return Err(cur.err(cur.at, "trailing bytes after checkpoint".into()));
    }
    Ok(Checkpoint { params: ModelParams { cfg, vars }, adam, epochs_done })
}
