//! Vocabulary and file formats, the synthetic corpus generator, and
//! edit-distance scoring.
//!
//! The generator renders token sequences from a small stochastic grammar
//! into feature frames: each token holds a template vector for a variable
//! number of frames (2..=6 before the encoder's ×4 down-sampling), frames
//! near token boundaries are blended with the neighboring token's template,
//! and Gaussian noise is added on top. Blending smears each token's
//! evidence into the next token's opening frames, which is what makes
//! future context worth paying latency for; template sharing between two
//! tokens with unequal context-conditioned priors creates readings only a
//! token-level model can separate.

use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::encoder::downsampled_len;
use crate::error::{Error, Result};
use crate::kernel::Tensor;
use crate::rng::stream;

/// Reserved token ids, fixed by file-format convention: the first three
/// vocabulary lines are always the padding, unknown, and boundary tokens.
pub const PAD: usize = 0;
pub const UNK: usize = 1;
/// Sentence boundary; doubles as the first-pass blank label.
pub const BOUNDARY: usize = 2;

pub const SPECIALS: [&str; 3] = ["<PAD>", "<UNK>", "<S/E>"];

const FEATURE_MAGIC: &[u8; 4] = b"OAHF";
const FEATURE_VERSION: u16 = 1;

/// One corpus item: features are frames × dims, transcript is special-free.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub id: String,
    pub features: Tensor,
    pub transcript: Vec<usize>,
}

/// Bijective token↔id table with the three specials at fixed indices.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() {
            return Err(Error::Data("vocabulary must include the three specials".into()));
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens[i] != *s {
                return Err(Error::Data(format!(
                    "vocabulary line {i} must be {s}, found {}",
                    tokens[i]
                )));
            }
        }
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Data(format!("token id {i} is empty or has whitespace")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate token {t}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// Specials followed by the given tokens.
    pub fn with_user_tokens(user: &[&str]) -> Result<Self> {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(user.iter().map(|s| s.to_string()));
        Vocab::new(tokens)
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Whitespace-split encoding; unseen words map to the unknown id.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.id(w).unwrap_or(UNK)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        Vocab::new(tokens).map_err(|e| match e {
            Error::Data(msg) => Error::Parse { path: path.to_path_buf(), offset: 0, msg },
            other => other,
        })
    }
}

fn parse_err(path: &Path, offset: u64, msg: impl Into<String>) -> Error {
    Error::Parse { path: path.to_path_buf(), offset, msg: msg.into() }
}

/// Write features in the binary frame format: magic, version, T, D, then
/// T·D little-endian 32-bit reals row-major. Values are quantized to
/// 32-bit on disk, so generators quantize at creation to keep the
/// in-memory matrix identical to a round trip.
pub fn save_features(path: &Path, feats: &Tensor) -> Result<()> {
    let mut buf: Vec<u8> =
        Vec::with_capacity(4 + 2 + 8 + feats.rows() * feats.cols() * 4);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(feats.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(feats.cols() as u32).to_le_bytes());
    for &v in feats.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Read features back (32-bit stored values widen losslessly). Files with
/// a `.csv` extension are read as comma-separated rows instead, for
/// hand-made fixtures.
pub fn load_features(path: &Path) -> Result<Tensor> {
    if path.extension().is_some_and(|e| e == "csv") {
        return load_features_csv(path);
    }
    let bytes = fs::read(path)?;
    let need = |lo: usize, n: usize| -> Result<&[u8]> {
        bytes.get(lo..lo + n).ok_or_else(|| {
            parse_err(path, bytes.len() as u64, "file truncated")
        })
    };
    if need(0, 4)? != FEATURE_MAGIC {
        return Err(parse_err(path, 0, "bad magic"));
    }
    let version = u16::from_le_bytes(need(4, 2)?.try_into().unwrap());
    if version != FEATURE_VERSION {
        return Err(parse_err(path, 4, format!("unsupported version {version}")));
    }
    let t = u32::from_le_bytes(need(6, 4)?.try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(need(10, 4)?.try_into().unwrap()) as usize;
    let body = 14usize;
    let expect = body + 4 * t * d;
    if bytes.len() != expect {
        let off = bytes.len().min(expect) as u64;
        return Err(parse_err(path, off, format!("expected {expect} bytes, found {}", bytes.len())));
    }
    let mut data = Vec::with_capacity(t * d);
    for i in 0..t * d {
        let lo = body + 4 * i;
        let v = f32::from_le_bytes(bytes[lo..lo + 4].try_into().unwrap());
        data.push(v as f64);
    }
    Ok(Tensor::new(t, d, data))
}

fn load_features_csv(path: &Path) -> Result<Tensor> {
    let text = fs::read_to_string(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut offset = 0u64;
    for line in text.lines() {
        if !line.trim().is_empty() {
            let mut row = Vec::new();
            for cell in line.split(',') {
                let v: f64 = cell
                    .trim()
                    .parse()
                    .map_err(|_| parse_err(path, offset, format!("bad number {cell:?}")))?;
                row.push(v);
            }
            if let Some(first) = rows.first() {
                if row.len() != first.len() {
                    return Err(parse_err(path, offset, "ragged rows"));
                }
            }
            rows.push(row);
        }
        offset += line.len() as u64 + 1;
    }
    if rows.is_empty() {
        return Err(parse_err(path, 0, "no rows"));
    }
    Ok(Tensor::from_rows(&rows))
}

/// Write transcripts: one `id<TAB>space-separated tokens` line per
/// utterance.
pub fn save_transcripts(path: &Path, items: &[(String, String)]) -> Result<()> {
    let mut out = String::new();
    for (id, text) in items {
        out.push_str(id);
        out.push('\t');
        out.push_str(text);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Read transcripts as (id, text) pairs; ids must be unique.
pub fn load_transcripts(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    let mut seen: HashMap<String, ()> = HashMap::new();
    let mut offset = 0u64;
    for line in text.lines() {
        if !line.is_empty() {
            let (id, rest) = line
                .split_once('\t')
                .ok_or_else(|| parse_err(path, offset, "missing tab separator"))?;
            if id.is_empty() {
                return Err(parse_err(path, offset, "empty utterance id"));
            }
            if seen.insert(id.to_string(), ()).is_some() {
                return Err(parse_err(path, offset, format!("duplicate utterance id {id}")));
            }
            out.push((id.to_string(), rest.to_string()));
        }
        offset += line.len() as u64 + 1;
    }
    Ok(out)
}

/// Unit-cost Levenshtein distance.
pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, &x) in a.iter().enumerate() {
        let mut cur = vec![i + 1];
        for (j, &y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur.push(sub.min(prev[j + 1] + 1).min(cur[j] + 1));
        }
        prev = cur;
    }
    prev[b.len()]
}

/// Token error rate: edit distance over reference length (floor 1).
pub fn cer(hyp: &[usize], reference: &[usize]) -> f64 {
    edit_distance(hyp, reference) as f64 / reference.len().max(1) as f64
}

/// One slot of a sentence pattern.
#[derive(Debug, Clone)]
pub enum Slot {
    Fixed(usize),
    /// Weighted draw over token ids.
    Choice(Vec<(usize, f64)>),
    /// `min..=max` tokens drawn uniformly from the options.
    Repeat { options: Vec<usize>, min: usize, max: usize },
    /// Like `Repeat`, but never the same token twice in a row (including
    /// against the token preceding the slot). Two adjacent copies of one
    /// template have no acoustic boundary between them, so tasks that must
    /// stay decodable from frames alone use this variant.
    Distinct { options: Vec<usize>, min: usize, max: usize },
}

/// A full sentence pattern with a selection weight.
#[derive(Debug, Clone)]
pub struct Production {
    pub weight: f64,
    pub slots: Vec<Slot>,
}

/// Weighted choice over sentence patterns.
#[derive(Debug, Clone)]
pub struct Grammar {
    pub productions: Vec<Production>,
}

fn weighted_pick<'a, T>(items: impl Iterator<Item = (&'a T, f64)>, rng: &mut ChaCha8Rng) -> &'a T {
    let pairs: Vec<(&T, f64)> = items.collect();
    let total: f64 = pairs.iter().map(|(_, w)| w).sum();
    let mut draw = rng.gen_range(0.0..total);
    for (item, w) in &pairs {
        draw -= w;
        if draw < 0.0 {
            return item;
        }
    }
    pairs.last().expect("weighted_pick over empty items").0
}

impl Grammar {
    fn validate(&self) -> Result<()> {
        if self.productions.is_empty() {
            return Err(Error::Data("grammar has no productions".into()));
        }
        if self.productions.iter().all(|p| p.weight <= 0.0) {
            return Err(Error::Data("grammar productions all have zero weight".into()));
        }
        for p in &self.productions {
            for s in &p.slots {
                let empty = match s {
                    Slot::Fixed(_) => false,
                    Slot::Choice(opts) => opts.is_empty() || opts.iter().all(|(_, w)| *w <= 0.0),
                    Slot::Repeat { options, min, max }
                    | Slot::Distinct { options, min, max } => options.is_empty() || min > max,
                };
                if empty {
                    return Err(Error::Data("grammar slot has no choices".into()));
                }
            }
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let prod = weighted_pick(self.productions.iter().map(|p| (p, p.weight)), rng);
        let mut out = Vec::new();
        for slot in &prod.slots {
            match slot {
                Slot::Fixed(t) => out.push(*t),
                Slot::Choice(opts) => {
                    out.push(*weighted_pick(opts.iter().map(|(t, w)| (t, *w)), rng));
                }
                Slot::Repeat { options, min, max } => {
                    let n = rng.gen_range(*min..=*max);
                    for _ in 0..n {
                        out.push(options[rng.gen_range(0..options.len())]);
                    }
                }
                Slot::Distinct { options, min, max } => {
                    let n = rng.gen_range(*min..=*max);
                    for _ in 0..n {
                        let allowed: Vec<usize> = options
                            .iter()
                            .copied()
                            .filter(|t| Some(t) != out.last())
                            .collect();
                        match allowed.len() {
                            0 => out.push(options[0]),
                            l => out.push(allowed[rng.gen_range(0..l)]),
                        }
                    }
                }
            }
        }
        out
    }
}

/// Token → template-vector emission map with boundary blending.
#[derive(Debug, Clone)]
pub struct EmissionMap {
    pub feat_dim: usize,
    /// One template row per vocabulary id; special rows stay zero.
    pub templates: Tensor,
    /// Blend strength toward the neighboring token at boundary frames.
    pub coarticulation: f64,
}

impl EmissionMap {
    /// Random unit-scale templates for ids 3.., with `shared` pairs
    /// (a, b) rendering b with a's template (identical pronunciations).
    pub fn random(
        vocab_size: usize,
        feat_dim: usize,
        shared: &[(usize, usize)],
        coarticulation: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut templates = Tensor::zeros(vocab_size, feat_dim);
        for id in 3..vocab_size {
            for c in 0..feat_dim {
                templates.set(id, c, normal.sample(rng));
            }
        }
        for &(a, b) in shared {
            for c in 0..feat_dim {
                templates.set(b, c, templates.at(a, c));
            }
        }
        EmissionMap { feat_dim, templates, coarticulation }
    }
}

/// Everything needed to draw a corpus deterministically.
#[derive(Debug, Clone)]
pub struct CorpusSpec {
    pub grammar: Grammar,
    pub emissions: EmissionMap,
    pub noise: f64,
    pub seed: u64,
    /// Inclusive per-token duration range in raw frames, within 2..=6.
    /// Tasks that must stay separable after ×4 down-sampling keep the
    /// lower bound at 4 so every token owns at least one full row.
    pub dur: (usize, usize),
}

/// Render one token sequence to frames. Durations are drawn from `dur`
/// per token, extended as needed so every prefix of the ×4 down-sampled
/// timeline has a row per label it must carry (with a separator between
/// adjacent repeats, plus one tail row). Without the prefix condition a
/// run of short tokens can demand more labels than its stretch has rows,
/// and the only alignments left push spikes far from their acoustics.
fn render(
    tokens: &[usize],
    emis: &EmissionMap,
    noise: f64,
    dur: (usize, usize),
    rng: &mut ChaCha8Rng,
) -> Tensor {
    let d = emis.feat_dim;
    if tokens.is_empty() {
        return Tensor::zeros(0, d);
    }
    assert!(2 <= dur.0 && dur.0 <= dur.1 && dur.1 <= 6, "durations within 2..=6");
    let mut durations: Vec<usize> =
        (0..tokens.len()).map(|_| rng.gen_range(dur.0..=dur.1)).collect();
    // Labels that must have been emitted by the end of token i: the i+1
    // tokens plus one separator per adjacent repeat among them.
    let needed: Vec<usize> = tokens
        .iter()
        .enumerate()
        .map(|(i, _)| i + 1 + tokens[..=i].windows(2).filter(|w| w[0] == w[1]).count())
        .collect();
    loop {
        let mut cum = 0usize;
        let violated = (0..tokens.len()).find(|&i| {
            cum += durations[i];
            let slack = usize::from(i + 1 == tokens.len());
            downsampled_len(cum) < needed[i] + slack
        });
        match violated {
            None => break,
            Some(i) => durations[rng.gen_range(0..=i)] += 1,
        }
    }
    let total: usize = durations.iter().sum();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut feats = Tensor::zeros(total, d);
    let mut row = 0;
    for (i, (&tok, &len)) in tokens.iter().zip(&durations).enumerate() {
        for j in 0..len {
            // Boundary blending: opening frames lean toward the previous
            // token's template, closing frames toward the next one's.
            let frac = (j as f64 + 0.5) / len as f64;
            let w_prev = emis.coarticulation * (1.0 - 2.0 * frac).max(0.0);
            let w_next = emis.coarticulation * (2.0 * frac - 1.0).max(0.0);
            let w_cur = 1.0 - w_prev - w_next;
            for c in 0..d {
                let prev = if i > 0 { emis.templates.at(tokens[i - 1], c) } else { 0.0 };
                let next =
                    if i + 1 < tokens.len() { emis.templates.at(tokens[i + 1], c) } else { 0.0 };
                let mut v = w_cur * emis.templates.at(tok, c) + w_prev * prev + w_next * next;
                if noise > 0.0 {
                    v += noise * normal.sample(rng);
                }
                // Features are stored as 32-bit reals; quantize now so the
                // in-memory corpus equals its own round trip.
                feats.set(row, c, v as f32 as f64);
            }
            row += 1;
        }
    }
    feats
}

/// Draw `size` utterances for a named split. Ids carry the split name;
/// randomness comes from the stream `corpus/<split>/<index>`, so splits
/// are disjoint by construction and any utterance is reproducible alone.
pub fn gen_synthetic(spec: &CorpusSpec, split: &str, size: usize) -> Result<Vec<Utterance>> {
    spec.grammar.validate()?;
    if spec.noise < 0.0 {
        return Err(Error::Data("noise must be nonnegative".into()));
    }
    let mut out = Vec::with_capacity(size);
    for i in 0..size {
        let mut rng = stream(spec.seed, &format!("corpus/{split}/{i}"));
        let tokens = spec.grammar.sample(&mut rng);
        let features = render(&tokens, &spec.emissions, spec.noise, spec.dur, &mut rng);
        out.push(Utterance { id: format!("{split}-{i:05}"), features, transcript: tokens });
    }
    Ok(out)
}

/// Two identically-pronounced ids whose identity is carried by a telltale
/// token `gap` fillers after them: `pair.0` is always followed (at that
/// distance) by `telltales.0`, `pair.1` by `telltales.1`. At the moment a
/// first pass must commit to the pair token, only an encoder whose future
/// window reaches the telltale can tell the members apart; a left-to-right
/// rescorer fixes either member from the candidate text alone.
#[derive(Debug, Clone, Copy)]
pub struct RevealedPair {
    pub pair: (usize, usize),
    pub telltales: (usize, usize),
    /// Filler tokens between the pair token and its telltale.
    pub gap: usize,
}

/// The benchmark task. Three tied-template ("same pronunciation") pairs
/// probe the three decoding regimes:
///
/// * `ambiguous` (with `contexts`): the matching context token sits a long
///   filler run *before* the pair — outside the encoder's bounded left
///   window — so only candidate rescoring can pick the high-prior reading.
/// * `near`: the telltale is the *next* token, readable with one
///   down-sampled frame of future context but not with zero.
/// * `far`: the telltale sits one filler later, readable with a wide
///   future window but not with a one-frame one.
pub struct ToyTask {
    pub vocab: Vocab,
    pub spec: CorpusSpec,
    /// The two ids that share one pronunciation, more likely after the
    /// matching context token.
    pub ambiguous: (usize, usize),
    pub contexts: (usize, usize),
    pub near: RevealedPair,
    pub far: RevealedPair,
}

/// Number of filler tokens between the context token and the ambiguous
/// token; far enough that resolving the pair needs attention rather than
/// the convolutional receptive field, short enough that a small decoder
/// reliably learns to bridge it.
const FILLER_RUN: (usize, usize) = (6, 9);

pub fn toy_task(feat_dim: usize, noise: f64, seed: u64) -> ToyTask {
    let fillers: Vec<String> = (1..=15).map(|i| format!("f{i:02}")).collect();
    let mut user: Vec<&str> = vec!["ca", "cb"];
    user.extend(fillers.iter().map(String::as_str));
    user.extend(["ha", "hb", "xa", "xb", "pa", "pb", "ya", "yb", "qa", "qb"]);
    let vocab = Vocab::with_user_tokens(&user).expect("static vocabulary");
    let id = |t: &str| vocab.id(t).expect("static vocabulary");
    let (ca, cb, ha, hb) = (id("ca"), id("cb"), id("ha"), id("hb"));
    let (xa, xb, pa, pb) = (id("xa"), id("xb"), id("pa"), id("pb"));
    let (ya, yb, qa, qb) = (id("ya"), id("yb"), id("qa"), id("qb"));
    let filler_ids: Vec<usize> = fillers.iter().map(|f| id(f)).collect();
    let run = |min: usize, max: usize| Slot::Repeat { options: filler_ids.clone(), min, max };
    let sentence = |ctx: usize, hom: usize, weight: f64| Production {
        weight,
        slots: vec![
            // A variable lead-in so no token class owns a fixed position.
            run(0, 3),
            Slot::Fixed(ctx),
            run(FILLER_RUN.0, FILLER_RUN.1),
            Slot::Fixed(hom),
            run(2, 3),
        ],
    };
    // Each pair sentence carries its pair twice, doubling the error mass a
    // future-blind encoder pays on it.
    let near = |amb: usize, tell: usize, weight: f64| Production {
        weight,
        slots: vec![
            run(0, 2),
            Slot::Fixed(amb),
            Slot::Fixed(tell),
            run(1, 2),
            Slot::Fixed(amb),
            Slot::Fixed(tell),
            run(0, 2),
        ],
    };
    let far = |amb: usize, tell: usize, weight: f64| Production {
        weight,
        slots: vec![
            run(0, 2),
            Slot::Fixed(amb),
            run(1, 1),
            Slot::Fixed(tell),
            run(1, 2),
            Slot::Fixed(amb),
            run(1, 1),
            Slot::Fixed(tell),
            run(0, 2),
        ],
    };
    let grammar = Grammar {
        productions: vec![
            sentence(ca, ha, 0.18),
            sentence(ca, hb, 0.02),
            sentence(cb, ha, 0.02),
            sentence(cb, hb, 0.18),
            near(xa, pa, 0.12),
            near(xb, pb, 0.12),
            far(ya, qa, 0.14),
            far(yb, qb, 0.14),
            // Structure-free sentences so the model cannot assume every
            // utterance carries one of the patterns above.
            Production { weight: 0.08, slots: vec![run(8, 14)] },
        ],
    };
    let mut rng = stream(seed, "corpus/templates");
    let emissions = EmissionMap::random(
        vocab.size(),
        feat_dim,
        &[(ha, hb), (xa, xb), (ya, yb)],
        0.5,
        &mut rng,
    );
    ToyTask {
        vocab,
        spec: CorpusSpec { grammar, emissions, noise, seed, dur: (2, 6) },
        ambiguous: (ha, hb),
        contexts: (ca, cb),
        near: RevealedPair { pair: (xa, xb), telltales: (pa, pb), gap: 0 },
        far: RevealedPair { pair: (ya, yb), telltales: (qa, qb), gap: 1 },
    }
}

/// A plain unambiguous task over the same vocabulary and templates:
/// filler-only sentences with mild cross-token blending, so every token is
/// separable from its frames alone. Used for clean-recovery checks.
pub fn plain_task(feat_dim: usize, noise: f64, seed: u64) -> ToyTask {
    let mut task = toy_task(feat_dim, noise, seed);
    let filler_ids: Vec<usize> =
        (1..=15).map(|i| task.vocab.id(&format!("f{i:02}")).unwrap()).collect();
    task.spec.grammar = Grammar {
        productions: vec![Production {
            weight: 1.0,
            slots: vec![Slot::Distinct { options: filler_ids, min: 8, max: 14 }],
        }],
    };
    task.spec.emissions.coarticulation = 0.2;
    // Tokens shorter than the ×4 down-sampling stride never own a full
    // down-sampled row, so they are not separable from frames alone no
    // matter how clean the rendering; the plain task keeps every token at
    // four frames or more.
    task.spec.dur = (4, 6);
    task
}

/// Directory layout helpers: `<root>/feats/<id>.oahf` per utterance plus
/// one transcript file per split.
pub fn save_split(root: &Path, split: &str, items: &[Utterance], vocab: &Vocab) -> Result<()> {
    let feats_dir = root.join("feats");
    fs::create_dir_all(&feats_dir)?;
    let mut lines = Vec::with_capacity(items.len());
    for u in items {
        save_features(&feats_dir.join(format!("{}.oahf", u.id)), &u.features)?;
        lines.push((u.id.clone(), vocab.decode(&u.transcript)));
    }
    save_transcripts(&root.join(format!("{split}.tsv")), &lines)?;
    Ok(())
}

/// Load a split saved by [`save_split`].
pub fn load_split(root: &Path, split: &str, vocab: &Vocab) -> Result<Vec<Utterance>> {
    let lines = load_transcripts(&root.join(format!("{split}.tsv")))?;
    let mut out = Vec::with_capacity(lines.len());
    for (id, text) in lines {
        let features = load_features(&root.join("feats").join(format!("{id}.oahf")))?;
        let transcript = vocab.encode(&text);
        if transcript.contains(&UNK) {
            return Err(Error::Data(format!("utterance {id} has tokens outside the vocabulary")));
        }
        out.push(Utterance { id, features, transcript });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;
    use std::path::PathBuf;

    fn tmpdir(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("oah-corpus-{name}-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn vocab_round_trip_and_lookup() {
        let v = Vocab::with_user_tokens(&["ca", "f01"]).unwrap();
        assert_eq!(v.size(), 5);
        assert_eq!(v.id("<PAD>"), Some(PAD));
        assert_eq!(v.id("ca"), Some(3));
        assert_eq!(v.token(4), "f01");
        assert_eq!(v.encode("ca zzz f01"), vec![3, UNK, 4]);
        assert_eq!(v.decode(&[3, 4]), "ca f01");
        let dir = tmpdir("vocab");
        let path = dir.join("vocab.txt");
        v.save(&path).unwrap();
        let back = Vocab::load(&path).unwrap();
        assert_eq!(back.size(), 5);
        assert_eq!(back.id("f01"), Some(4));
    }

    #[test]
    fn vocab_rejects_duplicates_and_bad_specials() {
        assert!(Vocab::with_user_tokens(&["x", "x"]).is_err());
        assert!(Vocab::new(vec!["<PAD>".into(), "<UNK>".into()]).is_err());
        assert!(Vocab::new(vec!["a".into(), "<UNK>".into(), "<S/E>".into()]).is_err());
        assert!(Vocab::with_user_tokens(&["has space"]).is_err());
        let dir = tmpdir("vocab-dup");
        let path = dir.join("vocab.txt");
        fs::write(&path, "<PAD>\n<UNK>\n<S/E>\na\na\n").unwrap();
        match Vocab::load(&path) {
            Err(Error::Parse { .. }) => {}
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn feature_file_round_trip_is_bit_identical() {
        let dir = tmpdir("feats");
        let path = dir.join("x.oahf");
        // Quantized at creation, like the generator output.
        let t = Tensor::new(3, 2, vec![0.1f32 as f64, -2.5, 3.25, 0.0, -0.125, 9.5]);
        save_features(&path, &t).unwrap();
        let back = load_features(&path).unwrap();
        assert!(back.value_eq(&t));
    }

    #[test]
    fn feature_file_errors_carry_byte_offsets() {
        let dir = tmpdir("feats-bad");
        let bad_magic = dir.join("a.oahf");
        fs::write(&bad_magic, b"NOPE\x01\x00").unwrap();
        match load_features(&bad_magic) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected parse error, got {other:?}"),
        }
        let truncated = dir.join("b.oahf");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"OAHF");
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&3u32.to_le_bytes());
        bytes.extend_from_slice(&[0u8; 8]); // needs 24 body bytes
        fs::write(&truncated, &bytes).unwrap();
        match load_features(&truncated) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, bytes.len() as u64),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn csv_features_for_hand_fixtures() {
        let dir = tmpdir("feats-csv");
        let path = dir.join("x.csv");
        fs::write(&path, "1.0, 2.0\n-0.5, 0.25\n").unwrap();
        let t = load_features(&path).unwrap();
        assert_eq!(t.shape(), (2, 2));
        assert_eq!(t.at(1, 0), -0.5);
        fs::write(&path, "1.0, x\n").unwrap();
        assert!(load_features(&path).is_err());
    }

    #[test]
    fn transcript_round_trip_and_errors() {
        let dir = tmpdir("tsv");
        let path = dir.join("t.tsv");
        let items =
            vec![("u1".to_string(), "ca f01".to_string()), ("u2".to_string(), "cb".to_string())];
        save_transcripts(&path, &items).unwrap();
        assert_eq!(load_transcripts(&path).unwrap(), items);
        fs::write(&path, "u1 ca f01\n").unwrap();
        assert!(matches!(load_transcripts(&path), Err(Error::Parse { .. })));
        fs::write(&path, "u1\tca\nu1\tcb\n").unwrap();
        match load_transcripts(&path) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 6),
            other => panic!("expected duplicate-id error, got {other:?}"),
        }
    }

    #[test]
    fn edit_distance_cases() {
        assert_eq!(edit_distance(&[1, 2, 3], &[1, 2, 3]), 0);
        assert_eq!(edit_distance(&[1, 2, 3], &[1, 9, 3]), 1);
        assert_eq!(edit_distance(&[1, 2], &[1, 2, 3]), 1);
        assert_eq!(edit_distance(&[], &[1, 2, 3]), 3);
        assert_eq!(edit_distance(&[7, 1, 2], &[1, 2, 9]), 2);
        assert_eq!(cer(&[1, 9, 3, 4], &[1, 2, 3, 4]), 0.25);
        assert_eq!(cer(&[], &[1, 2, 3]), 1.0);
        assert_eq!(cer(&[1], &[]), 1.0); // floor keeps empty refs finite
    }

    #[test]
    fn generator_is_deterministic_per_seed_and_split() {
        let task = toy_task(6, 0.1, 11);
        let a = gen_synthetic(&task.spec, "train", 4).unwrap();
        let b = gen_synthetic(&task.spec, "train", 4).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.id, y.id);
            assert_eq!(x.transcript, y.transcript);
            assert!(x.features.value_eq(&y.features));
        }
        let dev = gen_synthetic(&task.spec, "dev", 4).unwrap();
        assert_ne!(a[0].transcript, dev[0].transcript);
        assert!(a.iter().all(|u| u.id.starts_with("train-")));
        assert!(dev.iter().all(|u| u.id.starts_with("dev-")));
    }

    #[test]
    fn rendered_utterances_fit_their_labels() {
        let task = toy_task(6, 0.1, 12);
        for u in gen_synthetic(&task.spec, "train", 20).unwrap() {
            let repeats = u.transcript.windows(2).filter(|w| w[0] == w[1]).count();
            let down = downsampled_len(u.features.rows());
            assert!(down >= u.transcript.len() + repeats + 1, "{}", u.id);
            assert!(u.transcript.iter().all(|&t| t > BOUNDARY));
            assert!(u.features.all_finite());
        }
    }

    #[test]
    fn ambiguous_pair_shares_identical_templates() {
        let task = toy_task(6, 0.0, 13);
        let (ha, hb) = task.ambiguous;
        for (a, b) in [task.ambiguous, task.near.pair, task.far.pair] {
            for c in 0..6 {
                assert_eq!(
                    task.spec.emissions.templates.at(a, c),
                    task.spec.emissions.templates.at(b, c)
                );
            }
        }
        // Noise-free rendering of the two readings is identical framewise.
        let mut sent_a = vec![task.contexts.0];
        sent_a.extend(vec![4; 9]);
        sent_a.push(ha);
        let mut sent_b = sent_a.clone();
        *sent_b.last_mut().unwrap() = hb;
        let mut r1 = stream(1, "x");
        let mut r2 = stream(1, "x");
        let fa = render(&sent_a, &task.spec.emissions, 0.0, task.spec.dur, &mut r1);
        let fb = render(&sent_b, &task.spec.emissions, 0.0, task.spec.dur, &mut r2);
        assert!(fa.value_eq(&fb));
    }

    #[test]
    fn conditional_prior_favors_matching_context() {
        let task = toy_task(6, 0.1, 14);
        let (ha, hb) = task.ambiguous;
        let (ca, cb) = task.contexts;
        let corpus = gen_synthetic(&task.spec, "train", 600).unwrap();
        let mut match_count = 0usize;
        let mut ca_count = 0usize;
        let mut ctx_count = 0usize;
        for u in &corpus {
            let Some(&ctx) = u.transcript.iter().find(|&&t| t == ca || t == cb) else {
                continue;
            };
            ctx_count += 1;
            let hom = *u.transcript.iter().find(|&&t| t == ha || t == hb).unwrap();
            if ctx == ca {
                ca_count += 1;
                if hom == ha {
                    match_count += 1;
                }
            }
        }
        // Context sentences carry 40% of the grammar weight, split evenly.
        assert!(ctx_count > 170 && ctx_count < 310, "context sentences ~240, got {ctx_count}/600");
        assert!(
            ca_count * 3 > ctx_count && ca_count * 3 < ctx_count * 2,
            "context split ~50/50, got {ca_count}/{ctx_count}"
        );
        let frac = match_count as f64 / ca_count as f64;
        assert!(frac > 0.8 && frac < 0.98, "conditional ~0.9, got {frac}");
    }

    #[test]
    fn revealed_pairs_always_carry_their_telltale() {
        let task = toy_task(6, 0.1, 17);
        let corpus = gen_synthetic(&task.spec, "train", 400).unwrap();
        let mut seen = [0usize; 4];
        for u in &corpus {
            for rp in [task.near, task.far] {
                for (i, &t) in u.transcript.iter().enumerate() {
                    let tell = if t == rp.pair.0 {
                        rp.telltales.0
                    } else if t == rp.pair.1 {
                        rp.telltales.1
                    } else {
                        continue;
                    };
                    seen[(rp.gap > 0) as usize * 2 + (t == rp.pair.1) as usize] += 1;
                    assert_eq!(
                        u.transcript.get(i + 1 + rp.gap),
                        Some(&tell),
                        "{}: pair token {t} at {i} missing telltale",
                        u.id
                    );
                }
            }
        }
        // Every pair member occurs often (two occurrences per pair sentence,
        // 12% grammar weight each).
        for (k, n) in seen.iter().enumerate() {
            assert!(*n > 40, "pair member {k} occurred only {n} times");
        }
    }

    #[test]
    fn degenerate_grammars_error() {
        let task = toy_task(6, 0.1, 15);
        let mut spec = task.spec.clone();
        spec.grammar = Grammar { productions: vec![] };
        assert!(matches!(gen_synthetic(&spec, "x", 1), Err(Error::Data(_))));
        spec.grammar = Grammar {
            productions: vec![Production { weight: 0.0, slots: vec![Slot::Fixed(3)] }],
        };
        assert!(gen_synthetic(&spec, "x", 1).is_err());
        spec.grammar = Grammar {
            productions: vec![Production { weight: 1.0, slots: vec![Slot::Choice(vec![])] }],
        };
        assert!(gen_synthetic(&spec, "x", 1).is_err());
    }

    #[test]
    fn split_save_load_round_trip() {
        let task = plain_task(5, 0.05, 16);
        let items = gen_synthetic(&task.spec, "dev", 6).unwrap();
        let dir = tmpdir("split");
        save_split(&dir, "dev", &items, &task.vocab).unwrap();
        task.vocab.save(&dir.join("vocab.txt")).unwrap();
        let vocab = Vocab::load(&dir.join("vocab.txt")).unwrap();
        let back = load_split(&dir, "dev", &vocab).unwrap();
        assert_eq!(back.len(), items.len());
        for (x, y) in items.iter().zip(&back) {
            assert_eq!(x.id, y.id);
            assert_eq!(x.transcript, y.transcript);
            assert!(x.features.value_eq(&y.features));
        }
    }
}
