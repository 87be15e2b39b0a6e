//! Alignment-free first pass: a linear+log-softmax head over encoder rows,
//! the marginal loss over all blank-augmented alignments (with exact
//! gradient for training), greedy and prefix beam-search decoding over the
//! label lattice, and an incremental prefix scorer used by the hybrid
//! non-streaming decoder.
//!
//! All probability math is in log space; `f64::NEG_INFINITY` is log 0.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use crate::kernel::ops;
use crate::kernel::{lse2, CustomOp, Engine, Tensor};

const NEG_INF: f64 = f64::NEG_INFINITY;

/// Linear projection plus per-row log-softmax: encoder states [U, d] to a
/// log-probability lattice [U, V].
pub fn ctc_head<E: Engine>(e: &mut E, w: &E::T, b: &E::T, states: &E::T) -> E::T {
    let z = e.matmul(states, w);
    let z = e.add_bias(&z, b);
    e.log_softmax(&z)
}

/// Remove repeats then blanks: the many-to-one map from frame paths to
/// label sequences.
pub fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != blank {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

/// Best label per frame, then collapse.
pub fn greedy_decode(lattice: &Tensor, blank: usize) -> Vec<usize> {
    let mut path = Vec::with_capacity(lattice.rows());
    for t in 0..lattice.rows() {
        let row = lattice.row(t);
        let mut best = 0;
        for (k, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = k;
            }
        }
        path.push(best);
    }
    collapse(&path, blank)
}

fn extended_labels(labels: &[usize], blank: usize) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * labels.len() + 1);
    ext.push(blank);
    for &y in labels {
        ext.push(y);
        ext.push(blank);
    }
    ext
}

/// Negative log of the total probability of all frame paths that collapse
/// to `labels`. Returns +∞ when no path exists (too few frames for the
/// labels plus the blanks forced between repeats).
pub fn ctc_loss(lattice: &Tensor, labels: &[usize], blank: usize) -> f64 {
    let logp = ctc_forward(lattice, labels, blank);
    if logp == NEG_INF {
        f64::INFINITY
    } else {
        -logp
    }
}

fn ctc_forward(lattice: &Tensor, labels: &[usize], blank: usize) -> f64 {
    let alpha = ctc_alpha(lattice, labels, blank);
    let s_len = 2 * labels.len() + 1;
    match alpha.last() {
        None => {
            if labels.is_empty() {
                0.0
            } else {
                NEG_INF
            }
        }
        Some(last) => {
            if s_len > 1 {
                lse2(last[s_len - 1], last[s_len - 2])
            } else {
                last[0]
            }
        }
    }
}

/// Forward table over extended labels; alpha[t][s] includes the frame-t
/// emission. Empty when the lattice has no frames.
fn ctc_alpha(lattice: &Tensor, labels: &[usize], blank: usize) -> Vec<Vec<f64>> {
    let u = lattice.rows();
    let v = lattice.cols();
    assert!(blank < v, "blank outside lattice");
    assert!(
        labels.iter().all(|&y| y < v && y != blank),
        "labels must be non-blank lattice symbols"
    );
    let ext = extended_labels(labels, blank);
    let s_len = ext.len();
    let mut alpha: Vec<Vec<f64>> = Vec::with_capacity(u);
    for t in 0..u {
        let mut row = vec![NEG_INF; s_len];
        if t == 0 {
            row[0] = lattice.at(0, ext[0]);
            if s_len > 1 {
                row[1] = lattice.at(0, ext[1]);
            }
        } else {
            let prev = &alpha[t - 1];
            for s in 0..s_len {
                let mut m = prev[s];
                if s >= 1 {
                    m = lse2(m, prev[s - 1]);
                }
                if s >= 2 && ext[s] != blank && ext[s] != ext[s - 2] {
                    m = lse2(m, prev[s - 2]);
                }
                if m != NEG_INF {
                    row[s] = lattice.at(t, ext[s]) + m;
                }
            }
        }
        alpha.push(row);
    }
    alpha
}

/// Backward table; beta[t][s] excludes the frame-t emission, so that
/// alpha[t][s] + beta[t][s] is the mass of all full paths through (t, s).
fn ctc_beta(lattice: &Tensor, labels: &[usize], blank: usize) -> Vec<Vec<f64>> {
    let u = lattice.rows();
    let ext = extended_labels(labels, blank);
    let s_len = ext.len();
    let mut beta = vec![vec![NEG_INF; s_len]; u];
    if u == 0 {
        return beta;
    }
    beta[u - 1][s_len - 1] = 0.0;
    if s_len > 1 {
        beta[u - 1][s_len - 2] = 0.0;
    }
    for t in (0..u - 1).rev() {
        for s in 0..s_len {
            let mut m = lattice.at(t + 1, ext[s]) + beta[t + 1][s];
            if s + 1 < s_len {
                m = lse2(m, lattice.at(t + 1, ext[s + 1]) + beta[t + 1][s + 1]);
            }
            if s + 2 < s_len && ext[s + 2] != blank && ext[s + 2] != ext[s] {
                m = lse2(m, lattice.at(t + 1, ext[s + 2]) + beta[t + 1][s + 2]);
            }
            beta[t][s] = m;
        }
    }
    beta
}

/// Gradient of `ctc_loss` with respect to every lattice entry. Zero when
/// the loss is infinite (no valid path to differentiate through).
pub fn ctc_loss_grad(lattice: &Tensor, labels: &[usize], blank: usize) -> Tensor {
    let u = lattice.rows();
    let v = lattice.cols();
    let logp = ctc_forward(lattice, labels, blank);
    let mut grad = Tensor::zeros(u, v);
    if logp == NEG_INF {
        return grad;
    }
    let alpha = ctc_alpha(lattice, labels, blank);
    let beta = ctc_beta(lattice, labels, blank);
    let ext = extended_labels(labels, blank);
    for t in 0..u {
        let mut per_symbol = vec![NEG_INF; v];
        for (s, &k) in ext.iter().enumerate() {
            per_symbol[k] = lse2(per_symbol[k], alpha[t][s] + beta[t][s]);
        }
        for k in 0..v {
            if per_symbol[k] != NEG_INF {
                grad.set(t, k, -((per_symbol[k] - logp).exp()));
            }
        }
        debug_assert!(
            (grad.row(t).iter().sum::<f64>() + 1.0).abs() < 1e-8,
            "alignment posteriors at frame {t} do not sum to one"
        );
    }
    grad
}

/// Marginal alignment loss as a tape op: input is the lattice, output the
/// scalar loss. Targets live in the op because they are not differentiated.
pub struct CtcLossOp {
    pub labels: Vec<usize>,
    pub blank: usize,
}

impl CustomOp for CtcLossOp {
    fn name(&self) -> &'static str {
        "ctc_loss"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Tensor {
        assert_eq!(inputs.len(), 1);
        Tensor::scalar(ctc_loss(inputs[0], &self.labels, self.blank))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let g = ctc_loss_grad(inputs[0], &self.labels, self.blank);
        vec![ops::scale(&g, grad.at(0, 0))]
    }
}

/// First-pass search settings. `excluded` ids are never hypothesized
/// (padding and unknown); the blank is never pruned.
#[derive(Debug, Clone)]
pub struct BeamConfig {
    pub beam: usize,
    pub blank: usize,
    /// Log of the per-frame posterior floor under which a symbol is not
    /// expanded.
    pub prune_log_threshold: f64,
    pub excluded: Vec<usize>,
}

impl BeamConfig {
    pub fn new(beam: usize) -> Self {
        BeamConfig {
            beam,
            blank: crate::corpus::BOUNDARY,
            prune_log_threshold: 1e-4f64.ln(),
            excluded: vec![crate::corpus::PAD, crate::corpus::UNK],
        }
    }
}

/// A blank-free prefix with its mass split by whether the paths end in
/// blank; the ranking score is the sum of both.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub logp_blank: f64,
    pub logp_nonblank: f64,
}

impl Hypothesis {
    pub fn total(&self) -> f64 {
        lse2(self.logp_blank, self.logp_nonblank)
    }
}

/// Score descending, then fewer tokens, then lexicographic: a total order
/// so equal-mass hypotheses rank deterministically.
pub fn rank_hypotheses(hyps: &mut [Hypothesis]) {
    hyps.sort_by(|a, b| {
        b.total()
            .partial_cmp(&a.total())
            .unwrap_or(Ordering::Equal)
            .then(a.tokens.len().cmp(&b.tokens.len()))
            .then(a.tokens.cmp(&b.tokens))
    });
}

/// Prefix mass split by blank/nonblank path endings, keyed by prefix.
pub type BeamState = BTreeMap<Vec<usize>, (f64, f64)>;

/// The search start: only the empty prefix, with certainty.
pub fn beam_start() -> BeamState {
    let mut beam = BeamState::new();
    beam.insert(Vec::new(), (0.0, NEG_INF));
    beam
}

/// One frame of prefix beam search: expand every prefix with the frame's
/// unpruned symbols and keep the `cfg.beam` best.
pub fn beam_advance(beam: &BeamState, lp: &[f64], cfg: &BeamConfig) -> BeamState {
    assert!(cfg.beam >= 1, "beam must be at least 1");
    assert!(cfg.blank < lp.len(), "blank outside lattice");
    let mut symbols: Vec<usize> = Vec::new();
    for (c, &p) in lp.iter().enumerate() {
        if c != cfg.blank && !cfg.excluded.contains(&c) && p >= cfg.prune_log_threshold {
            symbols.push(c);
        }
    }
    let mut next = BeamState::new();
    // Zero-mass contributions never create entries: a prefix exists in
    // the beam only if some path actually collapses to it.
    let bump = |map: &mut BeamState, tokens: &Vec<usize>, blank_side: bool, mass: f64| {
        if mass == NEG_INF {
            return;
        }
        let slot = map.entry(tokens.clone()).or_insert((NEG_INF, NEG_INF));
        if blank_side {
            slot.0 = lse2(slot.0, mass);
        } else {
            slot.1 = lse2(slot.1, mass);
        }
    };
    for (prefix, &(pb, pnb)) in beam {
        let total = lse2(pb, pnb);
        bump(&mut next, prefix, true, lp[cfg.blank] + total);
        if let Some(&last) = prefix.last() {
            // Continue the current emission run without a new label.
            bump(&mut next, prefix, false, lp[last] + pnb);
        }
        for &c in &symbols {
            let mass = if Some(&c) == prefix.last() {
                // Repeat label: only paths that passed through a blank.
                lp[c] + pb
            } else {
                lp[c] + total
            };
            let mut tokens = prefix.clone();
            tokens.push(c);
            bump(&mut next, &tokens, false, mass);
        }
    }
    let mut hyps = rank_beam(&next);
    hyps.truncate(cfg.beam);
    hyps.into_iter().map(|h| (h.tokens, (h.logp_blank, h.logp_nonblank))).collect()
}

/// Beam contents as ranked hypotheses.
pub fn rank_beam(beam: &BeamState) -> Vec<Hypothesis> {
    let mut out: Vec<Hypothesis> = beam
        .iter()
        .map(|(tokens, &(b, n))| Hypothesis {
            tokens: tokens.clone(),
            logp_blank: b,
            logp_nonblank: n,
        })
        .collect();
    rank_hypotheses(&mut out);
    out
}

/// Frame-synchronous prefix beam search over a log-probability lattice.
/// Returns the surviving prefixes ranked by total mass; the empty prefix
/// competes like any other. An empty lattice yields the empty prefix with
/// log probability 0.
pub fn prefix_beam_search(lattice: &Tensor, cfg: &BeamConfig) -> Vec<Hypothesis> {
    let mut beam = beam_start();
    for t in 0..lattice.rows() {
        beam = beam_advance(&beam, lattice.row(t), cfg);
    }
    rank_beam(&beam)
}

/// Incremental prefix scorer over a fixed lattice: maintains, per prefix,
/// the frame-wise mass split by whether the last emitted label is still
/// running, and the total mass of sequences beginning with the prefix.
pub struct CtcPrefixScorer<'a> {
    lattice: &'a Tensor,
    blank: usize,
}

/// Per-prefix scorer state. `psi` is the log probability that the emitted
/// sequence starts with this prefix.
#[derive(Debug, Clone)]
pub struct PrefixState {
    gamma_nonblank: Vec<f64>,
    gamma_blank: Vec<f64>,
    pub psi: f64,
    last: Option<usize>,
    len: usize,
}

impl<'a> CtcPrefixScorer<'a> {
    pub fn new(lattice: &'a Tensor, blank: usize) -> Self {
        if lattice.rows() > 0 {
            assert!(blank < lattice.cols(), "blank outside lattice");
        }
        CtcPrefixScorer { lattice, blank }
    }

    /// Empty prefix: every sequence starts with it, so psi is log 1.
    pub fn initial(&self) -> PrefixState {
        let u = self.lattice.rows();
        let mut gamma_blank = vec![NEG_INF; u];
        let mut acc = 0.0;
        for t in 0..u {
            acc += self.lattice.at(t, self.blank);
            gamma_blank[t] = acc;
        }
        PrefixState {
            gamma_nonblank: vec![NEG_INF; u],
            gamma_blank,
            psi: 0.0,
            last: None,
            len: 0,
        }
    }

    /// State for the prefix extended by one non-blank symbol.
    pub fn extend(&self, st: &PrefixState, c: usize) -> PrefixState {
        let u = self.lattice.rows();
        assert!(u == 0 || (c < self.lattice.cols() && c != self.blank));
        let mut gn = vec![NEG_INF; u];
        let mut gb = vec![NEG_INF; u];
        let mut psi = NEG_INF;
        for t in 0..u {
            let lp_c = self.lattice.at(t, c);
            let (prev_b, prev_n) = if t == 0 {
                // Virtual start: only the empty prefix is complete here.
                (if st.len == 0 { 0.0 } else { NEG_INF }, NEG_INF)
            } else {
                (st.gamma_blank[t - 1], st.gamma_nonblank[t - 1])
            };
            let from_parent = if st.last == Some(c) {
                // Same symbol again needs an intervening blank.
                prev_b
            } else {
                lse2(prev_b, prev_n)
            };
            let new_mass = lp_c + from_parent;
            gn[t] = if t == 0 {
                new_mass
            } else {
                lse2(new_mass, gn[t - 1] + lp_c)
            };
            gb[t] = if t == 0 {
                NEG_INF
            } else {
                lse2(gb[t - 1], gn[t - 1]) + self.lattice.at(t, self.blank)
            };
            psi = lse2(psi, new_mass);
        }
        PrefixState { gamma_nonblank: gn, gamma_blank: gb, psi, last: Some(c), len: st.len + 1 }
    }

    /// Log probability that the emitted sequence equals this prefix exactly.
    pub fn end_logprob(&self, st: &PrefixState) -> f64 {
        let u = self.lattice.rows();
        if u == 0 {
            return if st.len == 0 { 0.0 } else { NEG_INF };
        }
        if st.len == 0 {
            st.gamma_blank[u - 1]
        } else {
            lse2(st.gamma_blank[u - 1], st.gamma_nonblank[u - 1])
        }
    }
}

/// One-shot prefix score: log probability that the emitted sequence starts
/// with `g` followed by `c`.
pub fn ctc_prefix_score(lattice: &Tensor, g: &[usize], c: usize, blank: usize) -> f64 {
    let scorer = CtcPrefixScorer::new(lattice, blank);
    let mut st = scorer.initial();
    for &y in g {
        st = scorer.extend(&st, y);
    }
    scorer.extend(&st, c).psi
}
