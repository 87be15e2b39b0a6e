//! The four subcommands behind the `oah` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use oah_core::corpus::{
    edit_distance, gen_synthetic, load_split, plain_task, save_split, toy_task, Utterance, Vocab,
};
use oah_core::encoder::latency_ms;
use oah_core::kernel::Tensor;
use oah_core::model::ModelParams;
use oah_core::pipeline::{
    joint_nonstreaming_decode, measure_rtf, oah_decode, ops_decode, DecodeResult, Mode,
    NbestRecord, StreamSession, FRAME_SECONDS,
};
use oah_core::rng::stream;
use oah_core::training::{
    load_checkpoint, save_checkpoint, train as train_model, write_metrics_csv, Checkpoint,
};

use crate::config::RunConfig;
use crate::CliError;

fn req_dir(value: &str, flag: &str) -> Result<PathBuf, CliError> {
    if value.is_empty() {
        return Err(CliError::Usage(format!("{flag} is required")));
    }
    Ok(PathBuf::from(value))
}

fn load_vocab(data: &Path) -> Result<Vocab, CliError> {
    Ok(Vocab::load(&data.join("vocab.txt"))?)
}

/// vocab_size 0 derives from the file; anything else must agree with it.
fn resolve_vocab(rc: &RunConfig, actual: usize) -> Result<usize, CliError> {
    if rc.vocab_size != 0 && rc.vocab_size != actual {
        return Err(CliError::Usage(format!(
            "vocab_size {} does not match the vocabulary file's {} entries",
            rc.vocab_size, actual
        )));
    }
    Ok(actual)
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Data(format!("write {}: {e}", path.display())))
}

// ---------------------------------------------------------------- synth --

pub fn synth(rc: &RunConfig) -> Result<(), CliError> {
    if rc.feat_dim == 0 {
        return Err(CliError::Usage("feat_dim must be >= 1".into()));
    }
    if rc.noise < 0.0 {
        return Err(CliError::Usage(format!("noise {} must be nonnegative", rc.noise)));
    }
    let out = req_dir(&rc.out_dir, "--out-dir")?;
    let task = match rc.task.as_str() {
        "toy" => toy_task(rc.feat_dim, rc.noise, rc.seed),
        "plain" => plain_task(rc.feat_dim, rc.noise, rc.seed),
        other => return Err(CliError::Usage(format!("task expects toy|plain, got {other:?}"))),
    };
    let mut echo = rc.clone();
    echo.vocab_size = task.vocab.size();
    echo.write_echo(&out)?;
    task.vocab.save(&out.join("vocab.txt"))?;
    for (split, n) in [("train", rc.train_size), ("dev", rc.dev_size), ("test", rc.test_size)] {
        if n == 0 {
            continue;
        }
        let items = gen_synthetic(&task.spec, split, n)?;
        save_split(&out, split, &items, &task.vocab)?;
        let tokens: usize = items.iter().map(|u| u.transcript.len()).sum();
        let frames: usize = items.iter().map(|u| u.features.rows()).sum();
        println!("{split}: {n} utterances, {tokens} tokens, {frames} frames");
    }
    println!("vocab: {} entries -> {}", task.vocab.size(), out.join("vocab.txt").display());
    Ok(())
}

// ---------------------------------------------------------------- train --

pub fn train(rc: &RunConfig) -> Result<(), CliError> {
    // Reject bad numbers before touching any file.
    if !(0.0..=1.0).contains(&rc.alpha) {
        return Err(CliError::Usage(format!("alpha {} outside [0, 1]", rc.alpha)));
    }
    if rc.epochs == 0 {
        return Err(CliError::Usage("epochs must be >= 1".into()));
    }
    if rc.batch_size == 0 {
        return Err(CliError::Usage("batch_size must be >= 1".into()));
    }
    let data = req_dir(&rc.data_dir, "--data-dir")?;
    let out = req_dir(&rc.out_dir, "--out-dir")?;
    let vocab = load_vocab(&data)?;
    let vsize = resolve_vocab(rc, vocab.size())?;
    let cfg = rc.model_cfg(vsize);
    cfg.validate()?;
    let mut echo = rc.clone();
    echo.vocab_size = vsize;
    echo.write_echo(&out)?;
    let train_set = load_split(&data, "train", &vocab)?;
    let dev_set = if data.join("dev.tsv").exists() {
        load_split(&data, "dev", &vocab)?
    } else {
        Vec::new()
    };
    let start = if rc.resume.is_empty() {
        Checkpoint::fresh(ModelParams::init(cfg.clone(), &mut stream(rc.seed, "init")))
    } else {
        let ck = load_checkpoint(Path::new(&rc.resume))?;
        if ck.params.cfg != cfg {
            return Err(CliError::Usage(format!(
                "resume checkpoint architecture {} does not match the requested {}",
                serde_json::to_string(&ck.params.cfg).expect("config serializes"),
                serde_json::to_string(&cfg).expect("config serializes"),
            )));
        }
        println!("resuming {} from epoch {}", rc.resume, ck.epochs_done);
        ck
    };
    let outcome = train_model(start, &train_set, &dev_set, &rc.train_cfg())?;
    let ckpt_path = out.join("checkpoint.oahc");
    save_checkpoint(&ckpt_path, &outcome.checkpoint, rc.save_adam)?;
    write_metrics_csv(&out.join("metrics.csv"), &outcome.metrics)?;
    for m in &outcome.metrics {
        println!(
            "epoch {:>3}  lr {:.5}  joint {:.4}  ctc {:.4}  ce {:.4}  dev ops {:.4} oah {:.4}  skipped {}",
            m.epoch, m.lr, m.loss_joint, m.loss_ctc, m.loss_ce, m.dev_cer_ops, m.dev_cer_oah,
            m.skipped
        );
    }
    println!(
        "checkpoint: {} (epochs done {})",
        ckpt_path.display(),
        outcome.checkpoint.epochs_done
    );
    if let Some(msg) = outcome.aborted {
        return Err(CliError::Numeric(format!("training aborted: {msg}")));
    }
    Ok(())
}

// --------------------------------------------------------------- decode --

/// Decode one utterance per the run config (offline or streaming replay).
fn decode_utt(params: &ModelParams, rc: &RunConfig, u: &Utterance) -> Result<DecodeResult, CliError> {
    if rc.streaming {
        return stream_replay(params, rc, u);
    }
    match rc.mode {
        Mode::Ops => Ok(ops_decode(params, &u.features, rc.beam)),
        Mode::Oah => Ok(oah_decode(params, &u.features, rc.beam, rc.score_eos)),
        Mode::Ns => Ok(joint_nonstreaming_decode(params, &u.features, rc.beam, rc.interp_lambda)?),
    }
}

/// Replay raw frames through the incremental session in fixed chunks.
fn stream_replay(
    params: &ModelParams,
    rc: &RunConfig,
    u: &Utterance,
) -> Result<DecodeResult, CliError> {
    let mut session = StreamSession::new(params, rc.beam, rc.score_eos);
    let cols = u.features.cols();
    let mut at = 0;
    while at < u.features.rows() {
        let end = (at + rc.chunk_frames).min(u.features.rows());
        let chunk = Tensor::new(end - at, cols, u.features.data()[at * cols..end * cols].to_vec());
        session.push(&chunk)?;
        at = end;
    }
    let mut res = session.finalize()?;
    if rc.mode == Mode::Ops {
        // First-pass-only semantics: the candidate list is already in
        // first-pass order, so take its head and drop the stage-two scores.
        for c in &mut res.candidates {
            c.rescore = None;
        }
        res.selected = 0;
    }
    Ok(res)
}

/// Map decode over utterances with worker threads, preserving order.
fn decode_all(
    params: &ModelParams,
    rc: &RunConfig,
    items: &[Utterance],
) -> Result<Vec<DecodeResult>, CliError> {
    let workers = match rc.threads {
        0 => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        n => n,
    }
    .clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(|u| decode_utt(params, rc, u)).collect();
    }
    let per_worker = items.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(per_worker)
            .map(|part| {
                scope.spawn(move || {
                    part.iter().map(|u| decode_utt(params, rc, u)).collect::<Result<Vec<_>, _>>()
                })
            })
            .collect();
        let mut all = Vec::with_capacity(items.len());
        for h in handles {
            all.extend(h.join().expect("decode worker panicked")?);
        }
        Ok(all)
    })
}

fn check_vocab_match(params: &ModelParams, vocab: &Vocab) -> Result<(), CliError> {
    if params.cfg.vocab_size != vocab.size() {
        return Err(CliError::Data(format!(
            "checkpoint lattice dimension {} does not match the vocabulary's {} entries",
            params.cfg.vocab_size,
            vocab.size()
        )));
    }
    Ok(())
}

pub fn decode(rc: &RunConfig) -> Result<(), CliError> {
    if rc.beam == 0 {
        return Err(CliError::Usage("beam must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&rc.interp_lambda) {
        return Err(CliError::Usage(format!("interp_lambda {} outside [0, 1]", rc.interp_lambda)));
    }
    if rc.chunk_frames == 0 {
        return Err(CliError::Usage("chunk_frames must be >= 1".into()));
    }
    if rc.streaming && rc.mode == Mode::Ns {
        return Err(CliError::Usage(
            "streaming replay supports modes ops and oah; the interpolated search is offline-only"
                .into(),
        ));
    }
    if rc.checkpoint.is_empty() {
        return Err(CliError::Usage("--checkpoint is required".into()));
    }
    let data = req_dir(&rc.data_dir, "--data-dir")?;
    let out = req_dir(&rc.out_dir, "--out-dir")?;
    let vocab = load_vocab(&data)?;
    let params = load_checkpoint(Path::new(&rc.checkpoint))?.params;
    check_vocab_match(&params, &vocab)?;
    resolve_vocab(rc, vocab.size())?;
    let items = load_split(&data, &rc.split, &vocab)?;
    for u in &items {
        if u.features.cols() != params.cfg.feat_dim {
            return Err(CliError::Data(format!(
                "utterance {}: feature dimension {} does not match the checkpoint's {}",
                u.id,
                u.features.cols(),
                params.cfg.feat_dim
            )));
        }
    }
    let mut echo = rc.clone();
    echo.vocab_size = vocab.size();
    echo.write_echo(&out)?;

    let t0 = Instant::now();
    let results = if rc.rtf {
        // Sequential decode, one utterance after another, so wall time
        // over audio time is a real-time factor.
        let mut rs = Vec::with_capacity(items.len());
        for u in &items {
            rs.push(decode_utt(&params, rc, u)?);
        }
        rs
    } else {
        decode_all(&params, rc, &items)?
    };
    let wall = t0.elapsed().as_secs_f64();

    let mut nbest = String::new();
    let (mut errors, mut tokens) = (0usize, 0usize);
    for (u, r) in items.iter().zip(&results) {
        errors += edit_distance(r.selected_tokens(), &u.transcript);
        tokens += u.transcript.len();
        let record = NbestRecord::from_result(&u.id, rc.mode, r, &vocab);
        nbest.push_str(&serde_json::to_string(&record).expect("record serializes"));
        nbest.push('\n');
    }
    let cer = errors as f64 / tokens.max(1) as f64;
    let frames: usize = items.iter().map(|u| u.features.rows()).sum();
    let audio = frames as f64 * FRAME_SECONDS;
    let rtf = wall / audio.max(1e-12);
    write_file(&out.join("nbest.jsonl"), &nbest)?;
    let summary = format!(
        "mode,split,beam,interp_lambda,score_eos,streaming,utterances,ref_tokens,edit_errors,cer,\
         audio_seconds,wall_seconds,rtf\n{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
        rc.mode.as_str(),
        rc.split,
        rc.beam,
        rc.interp_lambda,
        rc.score_eos,
        rc.streaming,
        items.len(),
        tokens,
        errors,
        cer,
        audio,
        wall,
        if rc.rtf { rtf.to_string() } else { String::new() },
    );
    write_file(&out.join("summary.csv"), &summary)?;
    print!(
        "{} utterances  mode {}  beam {}  cer {:.4}",
        items.len(),
        rc.mode.as_str(),
        rc.beam,
        cer
    );
    if rc.rtf {
        print!("  rtf {rtf:.4}");
    }
    println!();
    println!("wrote {} and {}", out.join("nbest.jsonl").display(), out.join("summary.csv").display());
    Ok(())
}

// --------------------------------------------------------------- ablate --

fn axis_defaults(axis: &str) -> &'static str {
    match axis {
        "beam" => "1,5,10,50",
        "epsilon" => "0,1,5",
        _ => "0.1,1.0",
    }
}

fn parse_num<T: std::str::FromStr>(axis: &str, token: &str) -> Result<T, CliError> {
    token
        .parse()
        .map_err(|_| CliError::Usage(format!("axis {axis}: cannot parse value {token:?}")))
}

/// Empty cell for an undefined rate (no dev split), full precision
/// otherwise.
fn csv_f(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        v.to_string()
    }
}

/// OPS and OAH corpus error rates of one parameter set over one split.
fn split_cers(
    params: &ModelParams,
    rc: &RunConfig,
    items: &[Utterance],
    beam: usize,
) -> Result<(f64, f64), CliError> {
    if items.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let tokens: usize = items.iter().map(|u| u.transcript.len()).sum();
    let mut ops_rc = rc.clone();
    ops_rc.mode = Mode::Ops;
    ops_rc.beam = beam;
    ops_rc.streaming = false;
    ops_rc.rtf = false;
    let mut oah_rc = ops_rc.clone();
    oah_rc.mode = Mode::Oah;
    let errs = |rc: &RunConfig| -> Result<usize, CliError> {
        Ok(decode_all(params, rc, items)?
            .iter()
            .zip(items)
            .map(|(r, u)| edit_distance(r.selected_tokens(), &u.transcript))
            .sum())
    };
    let e_ops = errs(&ops_rc)?;
    let e_oah = errs(&oah_rc)?;
    Ok((e_ops as f64 / tokens.max(1) as f64, e_oah as f64 / tokens.max(1) as f64))
}

pub fn ablate(rc: &RunConfig) -> Result<(), CliError> {
    let axis = rc.axis.as_str();
    if !["beam", "epsilon", "alpha"].contains(&axis) {
        return Err(CliError::Usage(format!("axis expects beam|epsilon|alpha, got {axis:?}")));
    }
    if rc.beam == 0 {
        return Err(CliError::Usage("beam must be >= 1".into()));
    }
    let raw = if rc.values.trim().is_empty() { axis_defaults(axis) } else { rc.values.as_str() };
    let values: Vec<String> =
        raw.split(',').map(|t| t.trim().to_string()).filter(|t| !t.is_empty()).collect();
    if values.is_empty() {
        return Err(CliError::Usage("values must name at least one axis point".into()));
    }
    let data = req_dir(&rc.data_dir, "--data-dir")?;
    let out = req_dir(&rc.out_dir, "--out-dir")?;
    let vocab = load_vocab(&data)?;
    let vsize = resolve_vocab(rc, vocab.size())?;
    let mut echo = rc.clone();
    echo.vocab_size = vsize;
    echo.values = values.join(",");
    echo.write_echo(&out)?;
    let dev = if data.join("dev.tsv").exists() {
        load_split(&data, "dev", &vocab)?
    } else {
        Vec::new()
    };
    let test = load_split(&data, "test", &vocab)?;
    // A fixed leading slice keeps the real-time measurement affordable.
    let rtf_set = &test[..test.len().min(100)];

    let mut rows: Vec<String> = Vec::new();
    let header: String;
    if axis == "beam" {
        header =
            "beam,dev_cer_ops,dev_cer_oah,test_cer_ops,test_cer_oah,rtf_ops,rtf_oah".to_string();
        if rc.checkpoint.is_empty() {
            return Err(CliError::Usage("--checkpoint is required for the beam axis".into()));
        }
        let params = load_checkpoint(Path::new(&rc.checkpoint))?.params;
        check_vocab_match(&params, &vocab)?;
        for v in &values {
            let b: usize = parse_num(axis, v)?;
            if b == 0 {
                return Err(CliError::Usage("beam values must be >= 1".into()));
            }
            let (dev_ops, dev_oah) = split_cers(&params, rc, &dev, b)?;
            let (test_ops, test_oah) = split_cers(&params, rc, &test, b)?;
            let r_ops =
                measure_rtf(&params, rtf_set, Mode::Ops, b, rc.interp_lambda, rc.score_eos)?.rtf;
            let r_oah =
                measure_rtf(&params, rtf_set, Mode::Oah, b, rc.interp_lambda, rc.score_eos)?.rtf;
            println!("beam {b}: test ops {test_ops:.4} oah {test_oah:.4}  rtf {r_ops:.4}/{r_oah:.4}");
            rows.push(format!(
                "{b},{},{},{},{},{r_ops},{r_oah}",
                csv_f(dev_ops),
                csv_f(dev_oah),
                csv_f(test_ops),
                csv_f(test_oah)
            ));
        }
    } else {
        header = if axis == "epsilon" {
            "epsilon,latency_ms,dev_cer_ops,dev_cer_oah,test_cer_ops,test_cer_oah,rtf_ops,rtf_oah"
                .to_string()
        } else {
            "alpha,dev_cer_ops,dev_cer_oah,test_cer_ops,test_cer_oah,rtf_ops,rtf_oah".to_string()
        };
        let point_path = |v: &str| out.join(format!("ckpt_{axis}{v}.oahc"));
        let missing: Vec<String> = values
            .iter()
            .filter(|v| !point_path(v).exists())
            .map(|v| point_path(v).display().to_string())
            .collect();
        if !missing.is_empty() && !rc.train_missing {
            return Err(CliError::Data(format!(
                "missing checkpoints: {}; pass --train-missing to train them",
                missing.join(", ")
            )));
        }
        if !missing.is_empty() {
            let train_set = load_split(&data, "train", &vocab)?;
            for v in &values {
                if point_path(v).exists() {
                    continue;
                }
                let mut cfg = rc.model_cfg(vsize);
                let mut tc = rc.train_cfg();
                if axis == "epsilon" {
                    cfg.epsilon = parse_num(axis, v)?;
                } else {
                    tc.alpha = parse_num(axis, v)?;
                    if !(0.0..=1.0).contains(&tc.alpha) {
                        return Err(CliError::Usage(format!("alpha {} outside [0, 1]", tc.alpha)));
                    }
                }
                cfg.validate()?;
                println!("training {axis} = {v} ({} epochs)...", tc.epochs);
                let init = ModelParams::init(cfg, &mut stream(rc.seed, "init"));
                let outcome = train_model(Checkpoint::fresh(init), &train_set, &[], &tc)?;
                if let Some(msg) = outcome.aborted {
                    return Err(CliError::Numeric(format!("training {axis} = {v} aborted: {msg}")));
                }
                save_checkpoint(&point_path(v), &outcome.checkpoint, rc.save_adam)?;
            }
        }
        for v in &values {
            let params = load_checkpoint(&point_path(v))?.params;
            check_vocab_match(&params, &vocab)?;
            let mut expect = rc.model_cfg(vsize);
            if axis == "epsilon" {
                expect.epsilon = parse_num(axis, v)?;
            }
            if params.cfg != expect {
                return Err(CliError::Data(format!(
                    "{} was trained with a different architecture; delete it or retrain",
                    point_path(v).display()
                )));
            }
            let (dev_ops, dev_oah) = split_cers(&params, rc, &dev, rc.beam)?;
            let (test_ops, test_oah) = split_cers(&params, rc, &test, rc.beam)?;
            let r_ops = measure_rtf(&params, rtf_set, Mode::Ops, rc.beam, rc.interp_lambda, rc.score_eos)?
                .rtf;
            let r_oah = measure_rtf(&params, rtf_set, Mode::Oah, rc.beam, rc.interp_lambda, rc.score_eos)?
                .rtf;
            println!("{axis} {v}: test ops {test_ops:.4} oah {test_oah:.4}  rtf {r_ops:.4}/{r_oah:.4}");
            let lat = if axis == "epsilon" {
                format!("{},", latency_ms(parse_num::<usize>(axis, v)?))
            } else {
                String::new()
            };
            rows.push(format!(
                "{v},{lat}{},{},{},{},{r_ops},{r_oah}",
                csv_f(dev_ops),
                csv_f(dev_oah),
                csv_f(test_ops),
                csv_f(test_oah)
            ));
        }
    }
    let table_path = out.join(format!("ablation_{axis}.csv"));
    write_file(&table_path, &format!("{header}\n{}\n", rows.join("\n")))?;
    println!("wrote {}", table_path.display());
    Ok(())
}
