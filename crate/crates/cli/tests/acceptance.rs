//! End-to-end acceptance run: one PASS/FAIL line per criterion, nonzero exit
//! if any fails. Criteria 3, 6, 7, 8, 9 and 10 share one trained model: the
//! first 1800 sentences of `synth --n 2000 --overlap 0.3 --seed 1` train it
//! with configs/default.toml; the last 200 are held out and only scored.

use std::collections::{BTreeSet, HashSet};
use std::io::{Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, ensure, Context, Result};
use coex_core::autograd::grad_check;
use coex_core::data::{encode_example, sample_negatives};
use coex_core::edge::{BenchReport, ExtractResponse, InferenceModel};
use coex_core::encoder::encode;
use coex_core::tagger::{
    assemble_triples, condition_on_subject, decode_objects, decode_subject_spans, relation_object_scores,
    subject_scores, RelationObjectScores, SubjectScores,
};
use coex_core::{
    f1, generate_synthetic_corpus, handle_extract, joint_loss, t_test, EncodedExample, EncoderConfig, Float,
    Graph, MetricsLog, Model, ModelConfig, ModelParams, RawExample, Recorder, RelationSchema, Rng, Span,
    SpoRecord, SynthConfig, Tensor, Vocab,
};

const TRAIN_SENTENCES: usize = 1800;
const HELD_OUT: usize = 200;
const F1_TARGET: f64 = 0.95;
const RUNTIME_LIMIT_S: f64 = 15.0 * 60.0;
const OVERLAP_RECALL_TARGET: f64 = 0.90;
const PARITY_TOL: f64 = 1e-6;
const GRAD_TOL_F32: f64 = 1e-3;
const GRAD_TOL_F64: f64 = 1e-6;
const LOSS_RATIO: f64 = 0.5;

fn coex(args: &[&str]) -> Result<String> {
    let out = Command::new(env!("CARGO_BIN_EXE_coex"))
        .args(args)
        .output()
        .context("running coex")?;
    if !out.status.success() {
        bail!("coex {args:?}: {}", String::from_utf8_lossy(&out.stderr).trim());
    }
    Ok(String::from_utf8(out.stdout)?)
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn default_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml")
}

/// Artifacts of the shared synthetic run.
struct Run {
    _dir: tempfile::TempDir,
    dir: PathBuf,
    held_out_path: PathBuf,
    held_out: Vec<RawExample>,
    checkpoint: PathBuf,
    model: InferenceModel,
    metrics: MetricsLog,
    eval: serde_json::Value,
    elapsed_s: f64,
}

fn shared_run() -> Result<Run> {
    let dir = tempfile::tempdir()?;
    let d = dir.path().to_path_buf();
    let started = Instant::now();
    let corpus = d.join("synth.jsonl");
    coex(&[
        "synth",
        "--n",
        "2000",
        "--overlap",
        "0.3",
        "--seed",
        "1",
        "--out",
        s(&corpus),
    ])?;
    let text = std::fs::read_to_string(&corpus)?;
    let lines: Vec<&str> = text.lines().collect();
    ensure!(
        lines.len() == TRAIN_SENTENCES + HELD_OUT,
        "synth wrote {} lines",
        lines.len()
    );
    let (train_path, held_out_path) = (d.join("train.jsonl"), d.join("held_out.jsonl"));
    std::fs::write(&train_path, lines[..TRAIN_SENTENCES].join("\n") + "\n")?;
    std::fs::write(&held_out_path, lines[TRAIN_SENTENCES..].join("\n") + "\n")?;

    let checkpoint = d.join("model.ckpt");
    let metrics_path = d.join("metrics.jsonl");
    let config = default_config();
    coex(&[
        "train",
        "--corpus",
        s(&train_path),
        "--config",
        s(&config),
        "--out",
        s(&checkpoint),
        "--metrics",
        s(&metrics_path),
        "--strict",
    ])?;
    let eval: serde_json::Value = serde_json::from_str(&coex(&[
        "eval",
        "--model",
        s(&checkpoint),
        "--corpus",
        s(&held_out_path),
        "--strict",
    ])?)?;
    let elapsed_s = started.elapsed().as_secs_f64();

    let schema = RelationSchema::medicine();
    let held_out = coex_core::data::load_corpus(&held_out_path, &schema, true)?.examples;
    Ok(Run {
        dir: d,
        _dir: dir,
        held_out_path,
        held_out,
        model: InferenceModel::load(&checkpoint)?,
        checkpoint,
        metrics: MetricsLog::parse_jsonl(&std::fs::read_to_string(&metrics_path)?)?,
        eval,
        elapsed_s,
    })
}

type Verdict = Result<(bool, String)>;

fn criterion_1() -> Verdict {
    let started = Instant::now();
    let casrel = [0.840, 0.847, 0.843, 0.831, 0.827];
    let coex = [0.908, 0.905, 0.911, 0.903, 0.902];
    let r = t_test(&casrel, &coex)?;
    let secs = started.elapsed().as_secs_f64();
    let pass = (r.t_statistic + 16.6888).abs() <= 0.001
        && ((r.p_value - 1.6808e-7) / 1.6808e-7).abs() <= 0.01
        && secs < 1.0;
    Ok((
        pass,
        format!("t = {:.4}, p = {:.4e}, {secs:.3}s", r.t_statistic, r.p_value),
    ))
}

fn criterion_2() -> Verdict {
    let started = Instant::now();
    let rows = [
        ("NovelTagging", 0.624, 0.317, 0.420),
        ("CopyR", 0.610, 0.566, 0.587),
        ("GraphRel", 0.639, 0.600, 0.619),
        ("CopyR_RL", 0.779, 0.672, 0.721),
        ("CasREL_LSTM", 0.842, 0.830, 0.836),
        ("CoEx-Bert", 0.906, 0.924, 0.915),
    ];
    let headline = (f1(0.906, 0.924) - 0.915).abs();
    let worst = rows
        .iter()
        .map(|&(_, p, r, printed)| (f1(p, r) - printed).abs())
        .fold(0.0, f64::max);
    let secs = started.elapsed().as_secs_f64();
    Ok((
        headline <= 0.0005 && worst <= 0.001 && secs < 1.0,
        format!("headline |err| {headline:.5}, worst row |err| {worst:.5}, {secs:.3}s"),
    ))
}

fn criterion_3(run: &Run) -> Verdict {
    let f1 = run.eval["overall"]["f1"]
        .as_f64()
        .context("eval report has no f1")?;
    Ok((
        f1 >= F1_TARGET && run.elapsed_s <= RUNTIME_LIMIT_S,
        format!(
            "held-out F1 {f1:.4} (P {:.4}, R {:.4}) over {} sentences, synth+train+eval {:.0}s",
            run.eval["overall"]["precision"].as_f64().unwrap_or(f64::NAN),
            run.eval["overall"]["recall"].as_f64().unwrap_or(f64::NAN),
            run.eval["sentences"],
            run.elapsed_s
        ),
    ))
}

/// Full joint model: 2 layers, d=16, n=8, R=4, parameters from U(±0.02).
fn grad_setup() -> Result<(ModelConfig, Vec<Tensor<f64>>, Vec<EncodedExample>)> {
    let schema = RelationSchema::new(
        ["alpha", "beta", "gamma", "delta"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
    )?;
    let raw = RawExample {
        text: "Aa bb cc dd ee ff".into(),
        triples: vec![
            SpoRecord::new("Aa", "alpha", "cc"),
            SpoRecord::new("Aa", "beta", "dd"),
            SpoRecord::new("ee", "gamma", "ff"),
        ],
    };
    let vocab = Vocab::build([raw.text.as_str()]);
    let mut encoder = EncoderConfig::tiny(vocab.len(), 16, 2);
    encoder.max_seq_len = 8;
    let config = ModelConfig::new(encoder, schema.len());
    let ex = encode_example(&raw, &vocab, &schema, 8)?;
    ensure!(ex.input.len() == 8, "sequence length {}", ex.input.len());
    let ex = sample_negatives(&ex, 3, &mut Rng::new(3));
    let model = Model::<f64>::init(config.clone(), &mut Rng::new(1))?;
    let params = ModelParams::<f64>::init_with_range(&model.layout, &mut Rng::new(2), 0.02);
    Ok((config, params.tensors().to_vec(), vec![ex]))
}

fn grad_error<T: Float>(
    config: &ModelConfig,
    params: &[Tensor<T>],
    batch: &[EncodedExample],
    eps: f64,
) -> Result<f64> {
    let layout = Model::<T>::init(config.clone(), &mut Rng::new(0))?.layout;
    let mut terms = (0.0, 0.0);
    let report = grad_check(params, eps, |g: &mut Graph<T>, vars| {
        let mut rec = Recorder::new(g, vars, None);
        let loss = joint_loss(&mut rec, config, &layout, batch)?;
        terms = (
            rec.graph.value(loss.subject).item().as_f64(),
            rec.graph.value(loss.relation).item().as_f64(),
        );
        Ok(loss.total)
    })?;
    ensure!(terms.0 > 0.0 && terms.1 > 0.0, "inactive loss term: {terms:?}");
    Ok(report.max_relative_error)
}

fn criterion_4() -> Verdict {
    let started = Instant::now();
    let (config, params, batch) = grad_setup()?;
    let e64 = grad_error(&config, &params, &batch, 1e-6)?;
    let p32: Vec<Tensor<f32>> = params.iter().map(|t| t.cast()).collect();
    let e32 = grad_error(&config, &p32, &batch, 1e-3)?;
    let secs = started.elapsed().as_secs_f64();
    Ok((
        e32 <= GRAD_TOL_F32 && e64 <= GRAD_TOL_F64 && secs < 120.0,
        format!("max relative error f32 {e32:.2e}, f64 {e64:.2e}, {secs:.1}s"),
    ))
}

/// Gold label tensors fed back through the decoder as 0/1 scores.
fn decode_gold(ex: &EncodedExample, schema: &RelationSchema) -> Result<BTreeSet<(String, String, String)>> {
    let as_f = |v: &[u8]| v.iter().map(|&x| x as f32).collect::<Vec<_>>();
    let mask = ex.input.span_mask();
    let subjects = SubjectScores {
        start: as_f(&ex.subject_start),
        end: as_f(&ex.subject_end),
    };
    let mut decoded = Vec::new();
    for span in decode_subject_spans(&subjects, &mask, 0.5) {
        let target = ex
            .subjects
            .iter()
            .find(|t| t.span == span)
            .ok_or_else(|| anyhow!("decoded subject {span:?} has no gold labels"))?;
        let objects = RelationObjectScores {
            num_relations: schema.len(),
            start: as_f(&target.object_start),
            end: as_f(&target.object_end),
        };
        decoded.push((span, decode_objects(&objects, &mask, 0.5)));
    }
    Ok(assemble_triples(&ex.text, &ex.tokens, &decoded, schema)
        .into_iter()
        .map(|t| (t.subject, t.predicate, t.object))
        .collect())
}

fn criterion_5() -> Verdict {
    let schema = RelationSchema::medicine();
    let corpus = generate_synthetic_corpus(&SynthConfig::new(1000, 0.3, 5), &schema)?;
    let vocab = Vocab::build(corpus.iter().map(|e| e.text.as_str()));
    let mut exact = 0;
    for raw in &corpus {
        let ex = encode_example(raw, &vocab, &schema, 128)?;
        if !ex.truncated && decode_gold(&ex, &schema)? == raw.triple_keys() {
            exact += 1;
        }
    }
    Ok((
        exact == corpus.len(),
        format!("{exact}/{} examples recovered exactly", corpus.len()),
    ))
}

fn criterion_6(run: &Run) -> Verdict {
    let n = run.eval["overlapping_sentences"]
        .as_u64()
        .context("no overlapping count")?;
    let recall = run.eval["overlapping"]["recall"]
        .as_f64()
        .context("no overlapping recall")?;
    Ok((
        n > 0 && recall >= OVERLAP_RECALL_TARGET,
        format!(
            "recall {recall:.4} on {n} overlapping held-out sentences ({} gold triples)",
            run.eval["overlapping"]["gold_count"]
        ),
    ))
}

/// Synthetic texts plus random vocabulary strings.
fn probe_texts(vocab: &Vocab, n: usize) -> Result<Vec<String>> {
    let mut texts: Vec<String> =
        generate_synthetic_corpus(&SynthConfig::new(n / 2, 0.3, 77), &RelationSchema::medicine())?
            .into_iter()
            .map(|e| e.text)
            .collect();
    let mut rng = Rng::new(78);
    let words = &vocab.entries()[1..];
    while texts.len() < n {
        let len = 1 + rng.below(30);
        let t: Vec<&str> = (0..len).map(|_| rng.pick(words).as_str()).collect();
        texts.push(t.join(" "));
    }
    Ok(texts)
}

fn subject_score_bits(m: &InferenceModel, text: &str) -> Result<Vec<u32>> {
    let model = m.model();
    let input = coex_core::prepare_input(text, m.vocab(), m.max_seq_len()).input;
    let mut b = coex_core::Eager::new(model.params.tensors());
    let h = encode(&mut b, &model.config.encoder, &model.layout, &input)?;
    let sc = subject_scores(&mut b, &model.config, &model.layout, &h)?;
    use coex_core::Backend;
    Ok(b.get(&sc).data().iter().map(|x| x.to_bits()).collect())
}

fn criterion_7(run: &Run) -> Verdict {
    // Two independent small runs from the same seed, config and corpus.
    let small = run.dir.join("small.toml");
    std::fs::write(
        &small,
        "lr = 0.01\ndecay_mode = \"decoupled\"\nepochs = 2\nnegatives_per_positive = 32\n\n\
         [encoder]\nmodel_dim = 32\nnum_heads = 2\nffn_dim = 64\nnum_layers = 2\nmax_seq_len = 128\n",
    )?;
    let train_small = run.dir.join("train_small.jsonl");
    let text = std::fs::read_to_string(run.dir.join("train.jsonl"))?;
    std::fs::write(
        &train_small,
        text.lines().take(300).collect::<Vec<_>>().join("\n") + "\n",
    )?;
    let mut bytes = Vec::new();
    for i in 0..2 {
        let out = run.dir.join(format!("small_{i}.ckpt"));
        coex(&[
            "train",
            "--corpus",
            s(&train_small),
            "--config",
            s(&small),
            "--seed",
            "9",
            "--out",
            s(&out),
        ])?;
        bytes.push(std::fs::read(&out)?);
    }
    let identical = bytes[0] == bytes[1];

    let artifact = run.dir.join("model.coex");
    coex(&[
        "export",
        "--checkpoint",
        s(&run.checkpoint),
        "--out",
        s(&artifact),
    ])?;
    let loaded = InferenceModel::load(&artifact)?;
    let texts = probe_texts(run.model.vocab(), 100)?;
    let (mut same, mut nonempty) = (0, 0);
    for t in &texts {
        let a = run.model.infer(t)?;
        nonempty += usize::from(!a.is_empty());
        if a == loaded.infer(t)? && subject_score_bits(&run.model, t)? == subject_score_bits(&loaded, t)? {
            same += 1;
        }
    }
    Ok((
        identical && same == texts.len(),
        format!(
            "checkpoints {} ({} bytes); export/load identical on {same}/{} texts ({nonempty} with triples)",
            if identical { "byte-identical" } else { "DIFFER" },
            bytes[0].len(),
            texts.len()
        ),
    ))
}

fn criterion_8(run: &Run) -> Verdict {
    use coex_core::Backend;
    let m = &run.model;
    let model = m.model();
    let mut worst = 0.0f64;
    let mut compared = 0usize;
    for ex in run.held_out.iter().take(50) {
        let input = coex_core::prepare_input(&ex.text, m.vocab(), m.max_seq_len()).input;
        let mut spans: Vec<Span> = m.infer(&ex.text)?.iter().map(|t| t.subject_span).collect();
        spans.extend([Span::new(1, 1), Span::new(1, 2)]);

        let mut g = Graph::<f32>::new();
        let vars: Vec<_> = model
            .params
            .tensors()
            .iter()
            .map(|t| g.param(t.clone()))
            .collect();
        let mut rec = Recorder::new(&mut g, &vars, None);
        let h = encode(&mut rec, &model.config.encoder, &model.layout, &input)?;
        let sc = subject_scores(&mut rec, &model.config, &model.layout, &h)?;
        let mut recorded = vec![rec.get(&sc).clone()];
        for &span in &spans {
            let c = condition_on_subject(&mut rec, &h, span)?;
            let r = relation_object_scores(&mut rec, &model.config, &model.layout, &c)?;
            recorded.push(rec.get(&r).clone());
        }

        let mut b = coex_core::Eager::new(model.params.tensors());
        let h = encode(&mut b, &model.config.encoder, &model.layout, &input)?;
        let sc = subject_scores(&mut b, &model.config, &model.layout, &h)?;
        let mut eager = vec![b.get(&sc).clone()];
        for &span in &spans {
            let c = condition_on_subject(&mut b, &h, span)?;
            let r = relation_object_scores(&mut b, &model.config, &model.layout, &c)?;
            eager.push(b.get(&r).clone());
        }
        for (x, y) in recorded.iter().zip(&eager) {
            worst = worst.max(x.max_abs_diff(y));
            compared += x.len();
        }
    }
    Ok((
        worst <= PARITY_TOL,
        format!("max |score diff| {worst:.2e} over {compared} scores"),
    ))
}

fn criterion_9(run: &Run) -> Verdict {
    let e = &run.metrics.epochs;
    ensure!(e.len() >= 20, "only {} epochs logged", e.len());
    let (first, twentieth) = (e[0].mean_loss, e[19].mean_loss);
    Ok((
        twentieth <= LOSS_RATIO * first,
        format!(
            "epoch-1 loss {first:.4}, epoch-20 loss {twentieth:.4}, ratio {:.4}",
            twentieth / first
        ),
    ))
}

/// Minimal HTTP/1.1 client: returns (status, body).
fn http(addr: SocketAddr, method: &str, path: &str, body: &[u8]) -> Result<(u16, Vec<u8>)> {
    let mut stream = TcpStream::connect(addr)?;
    stream.set_read_timeout(Some(Duration::from_secs(60)))?;
    let head = format!(
        "{method} {path} HTTP/1.1\r\nHost: {addr}\r\nContent-Type: application/json\r\n\
         Content-Length: {}\r\nConnection: close\r\n\r\n",
        body.len()
    );
    stream.write_all(head.as_bytes())?;
    stream.write_all(body)?;
    let mut raw = Vec::new();
    stream.read_to_end(&mut raw)?;
    let split = raw
        .windows(4)
        .position(|w| w == b"\r\n\r\n")
        .context("response has no header terminator")?;
    let head = std::str::from_utf8(&raw[..split])?;
    let status = head
        .split_whitespace()
        .nth(1)
        .context("no status code")?
        .parse()?;
    Ok((status, raw[split + 4..].to_vec()))
}

fn extract_over_http(addr: SocketAddr, text: &str) -> Result<ExtractResponse> {
    let body = serde_json::to_vec(&serde_json::json!({ "text": text }))?;
    let (status, resp) = http(addr, "POST", "/extract", &body)?;
    ensure!(
        status == 200,
        "status {status}: {}",
        String::from_utf8_lossy(&resp)
    );
    let mut parsed: ExtractResponse = serde_json::from_slice(&resp)?;
    ensure!(parsed.response_bytes == resp.len(), "reported response size");
    ensure!(parsed.request_bytes == body.len(), "reported request size");
    // Timing is the only nondeterministic field.
    parsed.latency_ms = 0.0;
    parsed.response_bytes = 0;
    Ok(parsed)
}

/// One row of the kernel's TCP or UDP tables.
struct InetSocket {
    inode: u64,
    table: &'static str,
    local_ip: Vec<u8>,
    local_port: u16,
    remote_ip: Vec<u8>,
    remote_port: u16,
    state: String,
}

fn inet_sockets() -> Result<Vec<InetSocket>> {
    fn endpoint(s: &str) -> Result<(Vec<u8>, u16)> {
        let (ip, port) = s.split_once(':').context("endpoint")?;
        // Little-endian 32-bit words.
        let mut bytes = Vec::new();
        for word in ip.as_bytes().chunks(8) {
            let w = u32::from_str_radix(std::str::from_utf8(word)?, 16)?;
            bytes.extend(w.to_le_bytes());
        }
        Ok((bytes, u16::from_str_radix(port, 16)?))
    }
    let mut out = Vec::new();
    for table in ["tcp", "tcp6", "udp", "udp6"] {
        let Ok(text) = std::fs::read_to_string(format!("/proc/net/{table}")) else {
            continue;
        };
        for line in text.lines().skip(1) {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() < 10 {
                continue;
            }
            let (lip, lport) = endpoint(f[1])?;
            let (rip, rport) = endpoint(f[2])?;
            out.push(InetSocket {
                inode: f[9].parse()?,
                table,
                local_ip: lip,
                local_port: lport,
                remote_ip: rip,
                remote_port: rport,
                state: f[3].to_string(),
            });
        }
    }
    Ok(out)
}

fn is_loopback(ip: &[u8]) -> bool {
    match ip.len() {
        4 => ip[0] == 127,
        16 => {
            ip[..15].iter().all(|&b| b == 0) && ip[15] == 1
                || (ip[..10].iter().all(|&b| b == 0) && ip[10..12] == [0xff, 0xff] && ip[12] == 127)
        }
        _ => false,
    }
}

/// Every inet socket this process holds must be the service's loopback
/// listener or a loopback connection to it. Returns how many were checked.
fn no_egress(server_port: u16) -> Result<usize> {
    let mut ours = HashSet::new();
    for fd in std::fs::read_dir("/proc/self/fd")? {
        let Ok(target) = std::fs::read_link(fd?.path()) else {
            continue;
        };
        let t = target.to_string_lossy();
        if let Some(inode) = t.strip_prefix("socket:[").and_then(|r| r.strip_suffix(']')) {
            ours.insert(inode.parse::<u64>()?);
        }
    }
    let mut checked = 0;
    for sock in inet_sockets()? {
        let inode = sock.inode;
        if !ours.contains(&inode) {
            continue;
        }
        checked += 1;
        ensure!(
            sock.table.starts_with("tcp"),
            "process holds a {} socket",
            sock.table
        );
        ensure!(
            is_loopback(&sock.local_ip),
            "socket {inode} bound to a non-loopback address"
        );
        let (lport, rport) = (sock.local_port, sock.remote_port);
        // 0A is TCP_LISTEN.
        if sock.state == "0A" {
            ensure!(lport == server_port, "unexpected listener on port {lport}");
        } else {
            ensure!(
                is_loopback(&sock.remote_ip) && (lport == server_port || rport == server_port),
                "socket {inode} connects {lport} -> {rport} outside the service"
            );
        }
    }
    Ok(checked)
}

/// Independent nearest-rank percentile over ascending values.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let mut rank = 1;
    while (rank as f64) < q * sorted.len() as f64 {
        rank += 1;
    }
    sorted[rank - 1]
}

fn check_bench(run: &Run) -> Result<String> {
    let report: BenchReport = serde_json::from_str(&coex(&[
        "bench",
        "--model",
        s(&run.checkpoint),
        "--corpus",
        s(&run.held_out_path),
        "--iterations",
        "60",
        "--warmup",
        "5",
    ])?)?;
    ensure!(
        report.samples.len() == 60 && report.stats.iterations == 60,
        "sample count"
    );
    let mut req_total = 0;
    for (i, sample) in report.samples.iter().enumerate() {
        ensure!(sample.input_index == i % run.held_out.len(), "input cycling");
        let text = &run.held_out[sample.input_index].text;
        let req = serde_json::to_vec(&serde_json::json!({ "text": text }))?;
        ensure!(sample.request_bytes == req.len(), "request bytes of sample {i}");
        req_total += req.len();
        ensure!(
            sample.reported_response_bytes == sample.response_bytes,
            "response bytes of sample {i}"
        );
        let mut resp: ExtractResponse = serde_json::from_slice(&handle_extract(&run.model, &req).body)?;
        resp.latency_ms = 0.0;
        resp.response_bytes = 0;
        let floor = serde_json::to_vec(&resp)?.len();
        ensure!(
            sample.response_bytes >= floor,
            "response bytes of sample {i} below re-measured floor"
        );
    }
    ensure!(report.total_request_bytes == req_total, "total request bytes");
    ensure!(
        report.total_response_bytes == report.samples.iter().map(|s| s.response_bytes).sum::<usize>(),
        "total response bytes"
    );
    let lat: Vec<f64> = report.samples.iter().map(|s| s.latency_ms).collect();
    let mut sorted = lat.clone();
    sorted.sort_by(f64::total_cmp);
    let mean = lat.iter().sum::<f64>() / lat.len() as f64;
    ensure!(
        (report.stats.mean_ms - mean).abs() <= 1e-9 * mean.max(1.0),
        "mean"
    );
    ensure!(report.stats.p50_ms == percentile(&sorted, 0.5), "p50");
    ensure!(report.stats.p95_ms == percentile(&sorted, 0.95), "p95");
    ensure!(report.stats.max_ms == sorted[sorted.len() - 1], "max");
    Ok(format!(
        "bench mean {:.3}ms p50 {:.3}ms p95 {:.3}ms, {} req / {} resp bytes",
        report.stats.mean_ms,
        report.stats.p50_ms,
        report.stats.p95_ms,
        report.total_request_bytes,
        report.total_response_bytes
    ))
}

fn criterion_10(run: &Run) -> Verdict {
    let model = Arc::new(InferenceModel::load(&run.checkpoint)?);
    let server = coex_cli::server::spawn(model.clone(), "127.0.0.1:0")?;
    let addr = server.addr;
    let texts: Vec<String> = run.held_out.iter().take(24).map(|e| e.text.clone()).collect();

    let (status, health) = http(addr, "GET", "/healthz", b"")?;
    ensure!(status == 200, "healthz status {status}");
    let health: serde_json::Value = serde_json::from_slice(&health)?;
    ensure!(
        health["model_version"] == model.model_version(),
        "healthz version"
    );

    let sequential = texts
        .iter()
        .map(|t| extract_over_http(addr, t))
        .collect::<Result<Vec<_>>>()?;
    for (t, r) in texts.iter().zip(&sequential) {
        let lib: Vec<_> = model
            .infer(t)?
            .iter()
            .map(coex_core::edge::TripleOut::from)
            .collect();
        ensure!(r.triples == lib, "HTTP result differs from library extraction");
    }
    let concurrent: Vec<Vec<ExtractResponse>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..8)
            .map(|k| {
                let texts = &texts;
                scope.spawn(move || {
                    // Each client starts at a different offset.
                    (0..texts.len())
                        .map(|i| (i + 3 * k) % texts.len())
                        .map(|i| extract_over_http(addr, &texts[i]).map(|r| (i, r)))
                        .collect::<Result<Vec<_>>>()
                        .map(|mut v| {
                            v.sort_by_key(|(i, _)| *i);
                            v.into_iter().map(|(_, r)| r).collect()
                        })
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().map_err(|_| anyhow!("client panicked"))?)
            .collect::<Result<Vec<_>>>()
    })?;
    let matching = concurrent.iter().filter(|c| **c == sequential).count();

    let (bad, _) = http(addr, "POST", "/extract", b"{\"txt\": 1}")?;
    ensure!(bad == 400, "malformed request gave {bad}");

    // Hold a connection open so the socket audit sees live traffic.
    let idle = TcpStream::connect(addr)?;
    std::thread::sleep(Duration::from_millis(50));
    let audited = no_egress(addr.port())?;
    drop(idle);
    ensure!(audited >= 2, "socket audit saw only {audited} sockets");
    drop(server);

    let bench = check_bench(run)?;
    Ok((
        matching == 8,
        format!(
            "{matching}/8 concurrent clients match sequential over {} texts; {audited} sockets, all loopback to the service; {bench}",
            texts.len()
        ),
    ))
}

fn report(id: usize, name: &str, verdict: Verdict, failed: &mut usize) {
    let (pass, detail) = verdict.unwrap_or_else(|e| (false, format!("error: {e:#}")));
    *failed += usize::from(!pass);
    println!(
        "criterion {id:>2} {}: {name}: {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
}

fn main() {
    let mut failed = 0;
    report(1, "t-test reproduction", criterion_1(), &mut failed);
    report(2, "comparison table F1 consistency", criterion_2(), &mut failed);
    let run = shared_run();
    let with_run = |f: fn(&Run) -> Verdict| match &run {
        Ok(r) => f(r),
        Err(e) => Err(anyhow!("synthetic run failed: {e:#}")),
    };
    report(3, "synthetic end-to-end F1", with_run(criterion_3), &mut failed);
    report(4, "gradient check", criterion_4(), &mut failed);
    report(5, "label/decode round trip", criterion_5(), &mut failed);
    report(6, "overlapping-triple recall", with_run(criterion_6), &mut failed);
    report(
        7,
        "determinism and serialization",
        with_run(criterion_7),
        &mut failed,
    );
    report(8, "inference parity", with_run(criterion_8), &mut failed);
    report(9, "training loss halves", with_run(criterion_9), &mut failed);
    report(10, "service contract", with_run(criterion_10), &mut failed);
    println!("acceptance: {} of 10 criteria passed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
