//! End-to-end decoding: first-pass-only output, two-stage candidate
//! rescoring, label-synchronous interpolated search, the incremental
//! streaming session, and the real-time-factor harness, plus the n-best
//! record format written by the command line.

use std::cmp::Ordering;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::{Utterance, Vocab, BOUNDARY, PAD, UNK};
use crate::ctc::{
    beam_advance, beam_start, ctc_head, prefix_beam_search, rank_beam, BeamConfig, BeamState,
    CtcPrefixScorer, Hypothesis, PrefixState,
};
use crate::decoder::{decode_step, score_batch, DecoderCache};
use crate::encoder::{encode, EncoderStream};
use crate::error::Result;
use crate::kernel::{EvalEngine, Tensor};
use crate::model::ModelParams;

const NEG_INF: f64 = f64::NEG_INFINITY;

/// Seconds of audio represented by one raw feature frame.
pub const FRAME_SECONDS: f64 = 0.01;

/// Decoding strategy selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// First pass only: top first-pass candidate wins.
    Ops,
    /// Two stage: first-pass candidates rescored by the decoder.
    Oah,
    /// Label-synchronous search interpolating both model scores.
    Ns,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Ops => "ops",
            Mode::Oah => "oah",
            Mode::Ns => "ns",
        }
    }

    pub fn parse(s: &str) -> Option<Mode> {
        match s {
            "ops" => Some(Mode::Ops),
            "oah" => Some(Mode::Oah),
            "ns" => Some(Mode::Ns),
            _ => None,
        }
    }
}

/// One output candidate. `ctc_logp` is the first-pass prefix mass (or the
/// complete-sequence mass in the interpolated mode); `rescore` is the
/// second-stage score when that stage ran.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub tokens: Vec<usize>,
    pub ctc_logp: f64,
    pub rescore: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct DecodeTiming {
    pub encode_ms: f64,
    pub first_pass_ms: f64,
    pub scoring_ms: f64,
}

/// Ranked candidate list with the winning index and stage timings.
#[derive(Debug, Clone)]
pub struct DecodeResult {
    pub candidates: Vec<Candidate>,
    pub selected: usize,
    pub timing: DecodeTiming,
    pub warning: Option<String>,
}

impl DecodeResult {
    pub fn selected_tokens(&self) -> &[usize] {
        &self.candidates[self.selected].tokens
    }
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

fn lattice_of(params: &ModelParams, states: &Tensor) -> Tensor {
    let mut e = EvalEngine::new();
    ctc_head(&mut e, &params.vars.ctc_w, &params.vars.ctc_b, states)
}

fn candidates_of(hyps: &[Hypothesis]) -> Vec<Candidate> {
    hyps.iter()
        .map(|h| Candidate { tokens: h.tokens.clone(), ctc_logp: h.total(), rescore: None })
        .collect()
}

/// First pass only: encode, project to the label lattice, run prefix beam
/// search, and take its top candidate.
pub fn ops_decode(params: &ModelParams, features: &Tensor, beam: usize) -> DecodeResult {
    let t0 = Instant::now();
    let enc = encode(params, features);
    let encode_ms = ms(t0);
    let t1 = Instant::now();
    let lattice = lattice_of(params, &enc.states);
    let hyps = prefix_beam_search(&lattice, &BeamConfig::new(beam));
    let first_pass_ms = ms(t1);
    DecodeResult {
        candidates: candidates_of(&hyps),
        selected: 0,
        timing: DecodeTiming { encode_ms, first_pass_ms, scoring_ms: 0.0 },
        warning: None,
    }
}

/// Pick the winner among rescored candidates: second-stage score
/// descending, then first-pass mass descending, then fewer tokens, then
/// lexicographic. Candidates without a second-stage score rank as −∞.
fn select_rescored(candidates: &[Candidate]) -> usize {
    let mut best = 0;
    for i in 1..candidates.len() {
        let a = &candidates[i];
        let b = &candidates[best];
        let ord = a
            .rescore
            .unwrap_or(NEG_INF)
            .partial_cmp(&b.rescore.unwrap_or(NEG_INF))
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.ctc_logp.partial_cmp(&b.ctc_logp).unwrap_or(Ordering::Equal))
            .then_with(|| b.tokens.len().cmp(&a.tokens.len()))
            .then_with(|| b.tokens.cmp(&a.tokens));
        if ord == Ordering::Greater {
            best = i;
        }
    }
    best
}

fn rescore_hypotheses(
    params: &ModelParams,
    enc_states: &Tensor,
    hyps: &[Hypothesis],
    score_eos: bool,
    encode_ms: f64,
    first_pass_ms: f64,
    scoring_start: Instant,
) -> DecodeResult {
    let mut candidates = candidates_of(hyps);
    // Without encoder rows or with nothing but empty candidates the second
    // stage has nothing to condition on or rank; fall back to the first
    // pass and say so.
    let any_tokens = candidates.iter().any(|c| !c.tokens.is_empty());
    if enc_states.rows() == 0 || !any_tokens {
        return DecodeResult {
            candidates,
            selected: 0,
            timing: DecodeTiming { encode_ms, first_pass_ms, scoring_ms: ms(scoring_start) },
            warning: Some("first pass produced no usable candidates; second stage skipped".into()),
        };
    }
    let token_lists: Vec<Vec<usize>> = candidates.iter().map(|c| c.tokens.clone()).collect();
    let scores = score_batch(params, enc_states, &token_lists, score_eos);
    for (c, s) in candidates.iter_mut().zip(scores) {
        c.rescore = Some(s);
    }
    let selected = select_rescored(&candidates);
    DecodeResult {
        candidates,
        selected,
        timing: DecodeTiming { encode_ms, first_pass_ms, scoring_ms: ms(scoring_start) },
        warning: None,
    }
}

/// Two-stage decode: first-pass candidates, then one teacher-forced
/// decoder pass scores them all and the best rescore wins.
pub fn oah_decode(
    params: &ModelParams,
    features: &Tensor,
    beam: usize,
    score_eos: bool,
) -> DecodeResult {
    let t0 = Instant::now();
    let enc = encode(params, features);
    let encode_ms = ms(t0);
    let t1 = Instant::now();
    let lattice = lattice_of(params, &enc.states);
    let hyps = prefix_beam_search(&lattice, &BeamConfig::new(beam));
    let first_pass_ms = ms(t1);
    rescore_hypotheses(params, &enc.states, &hyps, score_eos, encode_ms, first_pass_ms, Instant::now())
}

/// One hypothesis of the label-synchronous search. Ended hypotheses stay
/// in the beam with frozen scores and compete for slots, so the search
/// stops once every surviving slot is ended.
struct NsHyp {
    tokens: Vec<usize>,
    ctc: PrefixState,
    cache: DecoderCache,
    /// Sum of interpolated step scores (including the end step once ended).
    score_sum: f64,
    steps: usize,
    ended: bool,
}

impl NsHyp {
    fn normalized(&self) -> f64 {
        if self.steps == 0 {
            NEG_INF
        } else {
            self.score_sum / self.steps as f64
        }
    }
}

/// λ·ctc + (1−λ)·att with the degenerate weights short-circuited so an
/// unreachable score on the unused side cannot poison the sum.
fn mix(lambda: f64, ctc: f64, att: f64) -> f64 {
    let a = if lambda == 0.0 { 0.0 } else { lambda * ctc };
    let b = if lambda == 1.0 { 0.0 } else { (1.0 - lambda) * att };
    a + b
}

/// Label-synchronous beam search interpolating first-pass prefix mass with
/// decoder log probabilities: extending a hypothesis by `c` scores
/// λ·(prefix-mass delta) + (1−λ)·(decoder log prob of c), and ending it
/// scores the complete-sequence mass against the decoder's end token. All
/// ends and extensions of the current beam compete on cumulative score;
/// ended hypotheses keep their slots with frozen scores and the search
/// stops when the beam holds no live hypothesis. The final candidate order
/// is per-step normalized.
pub fn joint_nonstreaming_decode(
    params: &ModelParams,
    features: &Tensor,
    beam: usize,
    lambda: f64,
) -> Result<DecodeResult> {
    assert!(beam > 0, "beam width must be positive");
    assert!((0.0..=1.0).contains(&lambda), "interpolation weight in [0,1]");
    let t0 = Instant::now();
    let enc = encode(params, features);
    let encode_ms = ms(t0);
    let t1 = Instant::now();
    if enc.states.rows() == 0 {
        return Ok(DecodeResult {
            candidates: vec![Candidate { tokens: Vec::new(), ctc_logp: 0.0, rescore: None }],
            selected: 0,
            timing: DecodeTiming { encode_ms, first_pass_ms: ms(t1), scoring_ms: 0.0 },
            warning: Some("no encoder output; empty result".into()),
        });
    }
    let lattice = lattice_of(params, &enc.states);
    let scorer = CtcPrefixScorer::new(&lattice, BOUNDARY);
    let max_len = lattice.rows();
    let v = lattice.cols();
    let mut pool = vec![NsHyp {
        tokens: Vec::new(),
        ctc: scorer.initial(),
        cache: DecoderCache::new(params, &enc.states),
        score_sum: 0.0,
        steps: 0,
        ended: false,
    }];
    let mut truncated = false;
    while pool.iter().any(|h| !h.ended) {
        let mut next: Vec<NsHyp> = Vec::new();
        for mut hyp in pool {
            if hyp.ended {
                next.push(hyp);
                continue;
            }
            let dist = decode_step(params, &hyp.tokens, &mut hyp.cache)?;
            let lp = dist.row(0);
            let at_cap = hyp.tokens.len() >= max_len;
            if at_cap && !hyp.tokens.is_empty() {
                truncated = true;
            }
            // Ending the hypothesis: complete-sequence mass replaces the
            // prefix mass on the first-pass side.
            let end_ctc = scorer.end_logprob(&hyp.ctc) - hyp.ctc.psi;
            let end_score = mix(lambda, end_ctc, lp[BOUNDARY]);
            next.push(NsHyp {
                tokens: hyp.tokens.clone(),
                ctc: hyp.ctc.clone(),
                cache: hyp.cache.clone(),
                score_sum: hyp.score_sum + end_score,
                steps: hyp.steps + 1,
                ended: true,
            });
            if at_cap {
                continue;
            }
            for c in 0..v {
                if c == BOUNDARY || c == PAD || c == UNK {
                    continue;
                }
                let ext = scorer.extend(&hyp.ctc, c);
                let step = mix(lambda, ext.psi - hyp.ctc.psi, lp[c]);
                if !(step > NEG_INF) {
                    continue;
                }
                let mut tokens = hyp.tokens.clone();
                tokens.push(c);
                next.push(NsHyp {
                    tokens,
                    ctc: ext,
                    cache: hyp.cache.clone(),
                    score_sum: hyp.score_sum + step,
                    steps: hyp.steps + 1,
                    ended: false,
                });
            }
        }
        next.sort_by(|a, b| {
            b.score_sum
                .partial_cmp(&a.score_sum)
                .unwrap_or(Ordering::Equal)
                .then_with(|| a.tokens.cmp(&b.tokens))
                .then_with(|| b.ended.cmp(&a.ended))
        });
        next.truncate(beam);
        pool = next;
    }
    pool.sort_by(|a, b| {
        b.normalized()
            .partial_cmp(&a.normalized())
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.tokens.len().cmp(&b.tokens.len()))
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
    let candidates: Vec<Candidate> = pool
        .iter()
        .map(|h| Candidate {
            tokens: h.tokens.clone(),
            ctc_logp: scorer.end_logprob(&h.ctc),
            rescore: Some(h.normalized()),
        })
        .collect();
    Ok(DecodeResult {
        candidates,
        selected: 0,
        timing: DecodeTiming { encode_ms, first_pass_ms: 0.0, scoring_ms: ms(t1) },
        warning: truncated.then(|| "length cap reached; some hypotheses force-ended".into()),
    })
}

/// Incremental decoding session: feed frames as they arrive, read the
/// current best prefix at any time, and finish with the same two-stage
/// result the offline decoder produces on the whole utterance.
pub struct StreamSession<'a> {
    params: &'a ModelParams,
    encoder: EncoderStream<'a>,
    states: Vec<Tensor>,
    beam_cfg: BeamConfig,
    beam: BeamState,
    score_eos: bool,
    encode_ms: f64,
    first_pass_ms: f64,
}

impl<'a> StreamSession<'a> {
    pub fn new(params: &'a ModelParams, beam: usize, score_eos: bool) -> Self {
        StreamSession {
            params,
            encoder: EncoderStream::new(params),
            states: Vec::new(),
            beam_cfg: BeamConfig::new(beam),
            beam: beam_start(),
            score_eos,
            encode_ms: 0.0,
            first_pass_ms: 0.0,
        }
    }

    fn advance_states(&mut self, new_rows: Tensor) {
        if new_rows.rows() == 0 {
            return;
        }
        let t = Instant::now();
        let lattice = lattice_of(self.params, &new_rows);
        for r in 0..lattice.rows() {
            self.beam = beam_advance(&self.beam, lattice.row(r), &self.beam_cfg);
        }
        self.first_pass_ms += ms(t);
        self.states.push(new_rows);
    }

    /// Feed raw frames; the first pass advances over every encoder row
    /// they complete.
    pub fn push(&mut self, frames: &Tensor) -> Result<()> {
        let t = Instant::now();
        let new_rows = self.encoder.push(frames)?;
        self.encode_ms += ms(t);
        self.advance_states(new_rows);
        Ok(())
    }

    /// Current best prefix: exactly the first pass run over the encoder
    /// rows emitted so far.
    pub fn partial_top1(&self) -> Vec<usize> {
        rank_beam(&self.beam)[0].tokens.clone()
    }

    /// Encoder rows emitted so far.
    pub fn emitted_rows(&self) -> usize {
        self.encoder.emitted_rows()
    }

    /// Flush the encoder tail, finish the first pass, and rescore; equal
    /// to the offline two-stage decode of the full utterance.
    pub fn finalize(&mut self) -> Result<DecodeResult> {
        let t = Instant::now();
        let tail = self.encoder.finalize()?;
        self.encode_ms += ms(t);
        self.advance_states(tail);
        let hyps = rank_beam(&self.beam);
        let refs: Vec<&Tensor> = self.states.iter().collect();
        let states = if refs.is_empty() {
            Tensor::zeros(0, self.params.cfg.d_model)
        } else {
            Tensor::vstack(&refs)
        };
        let mut result = rescore_hypotheses(
            self.params,
            &states,
            &hyps,
            self.score_eos,
            self.encode_ms,
            self.first_pass_ms,
            Instant::now(),
        );
        // Timing here means cumulative per-stage time across the session.
        result.timing.encode_ms = self.encode_ms;
        result.timing.first_pass_ms = self.first_pass_ms;
        Ok(result)
    }
}

/// Real-time factor measurement over a set of utterances.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct RtfReport {
    pub wall_seconds: f64,
    pub audio_seconds: f64,
    pub rtf: f64,
}

/// Decode every utterance sequentially and report wall time over audio
/// time (frames are 10 ms each).
pub fn measure_rtf(
    params: &ModelParams,
    utterances: &[Utterance],
    mode: Mode,
    beam: usize,
    lambda: f64,
    score_eos: bool,
) -> Result<RtfReport> {
    let frames: usize = utterances.iter().map(|u| u.features.rows()).sum();
    let audio_seconds = frames as f64 * FRAME_SECONDS;
    let t0 = Instant::now();
    for u in utterances {
        match mode {
            Mode::Ops => {
                ops_decode(params, &u.features, beam);
            }
            Mode::Oah => {
                oah_decode(params, &u.features, beam, score_eos);
            }
            Mode::Ns => {
                joint_nonstreaming_decode(params, &u.features, beam, lambda)?;
            }
        }
    }
    let wall_seconds = t0.elapsed().as_secs_f64();
    Ok(RtfReport { wall_seconds, audio_seconds, rtf: wall_seconds / audio_seconds.max(1e-12) })
}

/// Candidate as written to n-best records; log probabilities that are −∞
/// serialize as null.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CandidateRecord {
    pub tokens: Vec<usize>,
    pub text: String,
    pub ctc_logp: Option<f64>,
    pub oah_score: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TimingRecord {
    pub encode: f64,
    pub first_pass: f64,
    pub scoring: f64,
}

/// One n-best line of the decode output.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NbestRecord {
    pub id: String,
    pub mode: String,
    pub candidates: Vec<CandidateRecord>,
    pub selected: usize,
    pub timing_ms: TimingRecord,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

fn finite_or_none(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

impl NbestRecord {
    pub fn from_result(id: &str, mode: Mode, result: &DecodeResult, vocab: &Vocab) -> Self {
        NbestRecord {
            id: id.to_string(),
            mode: mode.as_str().to_string(),
            candidates: result
                .candidates
                .iter()
                .map(|c| CandidateRecord {
                    tokens: c.tokens.clone(),
                    text: vocab.decode(&c.tokens),
                    ctc_logp: finite_or_none(c.ctc_logp),
                    oah_score: c.rescore.and_then(finite_or_none),
                })
                .collect(),
            selected: result.selected,
            timing_ms: TimingRecord {
                encode: result.timing.encode_ms,
                first_pass: result.timing.first_pass_ms,
                scoring: result.timing.scoring_ms,
            },
            warning: result.warning.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelVars};
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
            dec_blocks: 1,
            tau: 2,
            epsilon: 1,
            vocab_size: 7,
            label_smoothing: 0.1,
        }
    }

    fn params_with(seed: u64) -> ModelParams {
        let c = cfg();
        let vars = ModelVars::init(&c, &mut stream(seed, "init"));
        ModelParams { cfg: c, vars }
    }

    fn random_features(t: usize, seed: u64) -> Tensor {
        let mut rng = stream(seed, "feats");
        Tensor::new(t, 4, (0..t * 4).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn vocab() -> Vocab {
        Vocab::with_user_tokens(&["a", "b", "c", "d"]).unwrap()
    }

    #[test]
    fn beam_one_two_stage_equals_first_pass() {
        let p = params_with(1);
        let feats = random_features(17, 2);
        let ops = ops_decode(&p, &feats, 1);
        let oah = oah_decode(&p, &feats, 1, false);
        assert_eq!(ops.selected_tokens(), oah.selected_tokens());
        assert_eq!(oah.candidates.len(), 1);
    }

    #[test]
    fn two_stage_selects_by_rescore_with_first_pass_tiebreak() {
        let p = params_with(3);
        let feats = random_features(23, 4);
        let r = oah_decode(&p, &feats, 6, false);
        let sel = &r.candidates[r.selected];
        for c in &r.candidates {
            let (a, b) = (c.rescore.unwrap_or(NEG_INF), sel.rescore.unwrap_or(NEG_INF));
            assert!(a <= b || (a == b && c.ctc_logp <= sel.ctc_logp), "selection not maximal");
        }
    }

    #[test]
    fn empty_input_produces_warned_empty_result() {
        let p = params_with(5);
        let feats = Tensor::zeros(0, 4);
        let r = oah_decode(&p, &feats, 4, false);
        assert!(r.warning.is_some());
        assert!(r.selected_tokens().is_empty());
        let ns = joint_nonstreaming_decode(&p, &feats, 4, 0.5).unwrap();
        assert!(ns.warning.is_some());
        assert!(ns.selected_tokens().is_empty());
    }

    #[test]
    fn interpolated_search_with_pure_attention_matches_greedy_steps() {
        // λ=0, beam 1: each step takes the decoder argmax, ending at the
        // boundary token; mirror that loop by hand.
        let p = params_with(7);
        let feats = random_features(19, 8);
        let got = joint_nonstreaming_decode(&p, &feats, 1, 0.0).unwrap();
        let enc = encode(&p, &feats);
        let mut cache = DecoderCache::new(&p, &enc.states);
        let mut tokens: Vec<usize> = Vec::new();
        let cap = crate::encoder::downsampled_len(feats.rows());
        loop {
            let dist = decode_step(&p, &tokens, &mut cache).unwrap();
            let row = dist.row(0);
            let mut best = BOUNDARY;
            for c in 0..row.len() {
                if c == PAD || c == UNK {
                    continue;
                }
                if row[c] > row[best] {
                    best = c;
                }
            }
            if best == BOUNDARY || tokens.len() >= cap {
                break;
            }
            tokens.push(best);
        }
        assert_eq!(got.selected_tokens(), &tokens[..]);
    }

    #[test]
    fn interpolated_candidates_rank_by_normalized_score() {
        let p = params_with(9);
        let feats = random_features(25, 10);
        let r = joint_nonstreaming_decode(&p, &feats, 4, 0.5).unwrap();
        assert!(!r.candidates.is_empty());
        for w in r.candidates.windows(2) {
            assert!(w[0].rescore.unwrap() >= w[1].rescore.unwrap());
        }
    }

    #[test]
    fn stream_finalize_equals_offline_two_stage() {
        let p = params_with(11);
        let mut chunk_rng = stream(12, "chunks");
        for case in 0..4 {
            let t = 12 + case * 7;
            let feats = random_features(t, 100 + case as u64);
            let offline = oah_decode(&p, &feats, 4, false);
            let mut s = StreamSession::new(&p, 4, false);
            let mut at = 0;
            while at < t {
                let step = chunk_rng.gen_range(1..=(t - at).min(5));
                let rows: Vec<Vec<f64>> =
                    (at..at + step).map(|r| feats.row(r).to_vec()).collect();
                s.push(&Tensor::from_rows(&rows)).unwrap();
                at += step;
            }
            let streamed = s.finalize().unwrap();
            assert_eq!(streamed.selected, offline.selected);
            assert_eq!(streamed.candidates.len(), offline.candidates.len());
            for (a, b) in streamed.candidates.iter().zip(&offline.candidates) {
                assert_eq!(a.tokens, b.tokens);
                assert_eq!(a.ctc_logp, b.ctc_logp);
                assert_eq!(a.rescore, b.rescore);
            }
        }
    }

    #[test]
    fn partial_top1_equals_first_pass_over_emitted_rows() {
        let p = params_with(13);
        let feats = random_features(29, 14);
        let offline_states = encode(&p, &feats).states;
        let offline_lattice = lattice_of(&p, &offline_states);
        let mut s = StreamSession::new(&p, 4, false);
        for t in 0..feats.rows() {
            s.push(&feats.row_tensor(t)).unwrap();
            let emitted = s.emitted_rows();
            let mut beam = beam_start();
            for r in 0..emitted {
                beam = beam_advance(&beam, offline_lattice.row(r), &BeamConfig::new(4));
            }
            assert_eq!(s.partial_top1(), rank_beam(&beam)[0].tokens);
        }
    }

    #[test]
    fn rtf_reports_audio_seconds_from_frames() {
        let p = params_with(15);
        let utts: Vec<Utterance> = (0..2)
            .map(|i| Utterance {
                id: format!("u{i}"),
                features: random_features(40, 20 + i as u64),
                transcript: vec![3],
            })
            .collect();
        let report = measure_rtf(&p, &utts, Mode::Oah, 2, 0.5, false).unwrap();
        assert!((report.audio_seconds - 0.8).abs() < 1e-12);
        assert!(report.wall_seconds > 0.0);
        assert!(report.rtf > 0.0);
    }

    #[test]
    fn nbest_records_round_trip_with_nulls() {
        let result = DecodeResult {
            candidates: vec![
                Candidate { tokens: vec![3, 4], ctc_logp: -1.25, rescore: Some(-0.5) },
                Candidate { tokens: vec![], ctc_logp: -2.5, rescore: Some(NEG_INF) },
            ],
            selected: 0,
            timing: DecodeTiming { encode_ms: 1.5, first_pass_ms: 0.75, scoring_ms: 0.25 },
            warning: None,
        };
        let rec = NbestRecord::from_result("u1", Mode::Oah, &result, &vocab());
        let line = serde_json::to_string(&rec).unwrap();
        assert!(line.contains("\"oah_score\":null"));
        assert!(line.contains("\"mode\":\"oah\""));
        assert!(line.contains("\"text\":\"a b\""));
        let back: NbestRecord = serde_json::from_str(&line).unwrap();
        assert_eq!(back, rec);
        assert_eq!(back.candidates[1].oah_score, None);
    }

    #[test]
    fn mode_names_round_trip() {
        for m in [Mode::Ops, Mode::Oah, Mode::Ns] {
            assert_eq!(Mode::parse(m.as_str()), Some(m));
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.as_str()));
        }
        assert_eq!(Mode::parse("bogus"), None);
    }
}
