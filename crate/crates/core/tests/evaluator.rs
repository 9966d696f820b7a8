use coex_core::eval::LatencyStats;
use coex_core::{
    benchmark_latency, f1, score_triples, t_test, EncoderConfig, Error, ExtractResponse, InferenceModel,
    Model, ModelConfig, RelationSchema, Rng, Span, Triple, Vocab,
};

/// (method, precision, recall, F1) as printed in the comparison table.
const TABLE_3: [(&str, f64, f64, f64); 6] = [
    ("NovelTagging", 0.624, 0.317, 0.420),
    ("CopyR", 0.610, 0.566, 0.587),
    ("GraphRel", 0.639, 0.600, 0.619),
    ("CopyR_RL", 0.779, 0.672, 0.721),
    ("CasREL_LSTM", 0.842, 0.830, 0.836),
    ("CoEx-Bert", 0.906, 0.924, 0.915),
];

const CASREL_TRIALS: [f64; 5] = [0.840, 0.847, 0.843, 0.831, 0.827];
const COEX_TRIALS: [f64; 5] = [0.908, 0.905, 0.911, 0.903, 0.902];

fn triple(s: &str, p: &str, o: &str) -> Triple {
    Triple {
        subject: s.into(),
        predicate: p.into(),
        object: o.into(),
        subject_span: Span::new(1, 1),
        object_span: Span::new(2, 2),
    }
}

#[test]
fn comparison_table_rows_are_harmonic_means() {
    assert!((f1(0.906, 0.924) - 0.915).abs() <= 0.0005);
    for (name, p, r, printed) in TABLE_3 {
        let got = f1(p, r);
        assert!(
            (got - printed).abs() <= 0.001,
            "{name}: f1({p}, {r}) = {got}, printed {printed}"
        );
    }
    // Headline percentages.
    assert!((f1(0.9065, 0.9245) - 0.9154).abs() <= 0.0001);
}

#[test]
fn five_trial_t_test_is_reproduced() {
    let r = t_test(&CASREL_TRIALS, &COEX_TRIALS).unwrap();
    assert!((r.t_statistic + 16.6888).abs() <= 0.001, "t = {}", r.t_statistic);
    assert!(
        ((r.p_value - 1.6808e-7) / 1.6808e-7).abs() <= 0.01,
        "p = {}",
        r.p_value
    );
    assert_eq!(r.degrees_of_freedom, 8);
    let swapped = t_test(&COEX_TRIALS, &CASREL_TRIALS).unwrap();
    assert_eq!(swapped.t_statistic, -r.t_statistic);
    assert_eq!(swapped.p_value, r.p_value);
}

#[test]
fn t_test_preconditions() {
    assert!(t_test(&[0.5], &[0.5, 0.6]).is_err());
    let same = t_test(&[0.7, 0.7], &[0.7, 0.7]).unwrap();
    assert_eq!((same.t_statistic, same.p_value), (0.0, 1.0));
    assert!(matches!(
        t_test(&[0.7, 0.7], &[0.8, 0.8]),
        Err(Error::DegenerateVariance)
    ));
}

#[test]
fn scoring_counting_oracle() {
    let gold = vec![
        triple("A", "origin", "x"),
        triple("A", "origin", "y"),
        triple("B", "taste", "z"),
        triple("C", "alias", "w"),
    ];
    let pred = vec![
        triple("A", "origin", "x"),
        triple("B", "taste", "z"),
        triple("B", "taste", "q"),
    ];
    let r = score_triples(&pred, &gold);
    assert_eq!((r.true_positives, r.predicted_count, r.gold_count), (2, 3, 4));
    assert!((r.precision - 2.0 / 3.0).abs() < 1e-12);
    assert!((r.recall - 0.5).abs() < 1e-12);
    assert!((r.f1 - 4.0 / 7.0).abs() < 1e-12);
    let empty = score_triples(&[], &gold);
    assert_eq!((empty.precision, empty.recall, empty.f1), (0.0, 0.0, 0.0));
    // Surrounding whitespace is normalized, case is not.
    let r = score_triples(&[triple(" A ", "origin", "x ")], &[triple("A", "origin", "x")]);
    assert_eq!(r.true_positives, 1);
}

fn bench_model() -> InferenceModel {
    let texts = ["KunJuTi grows in Hotan and is rich in tannin, flavonoids and lipids."];
    let vocab = Vocab::build(texts);
    let schema = RelationSchema::medicine();
    let mut enc = EncoderConfig::tiny(vocab.len(), 16, 2);
    enc.max_seq_len = 128;
    enc.dropout_p = 0.0;
    let model = Model::<f32>::init(ModelConfig::new(enc, schema.len()), &mut Rng::new(1)).unwrap();
    InferenceModel::new(model, vocab, schema, 0.5).unwrap()
}

#[test]
fn single_iteration_stats_coincide() {
    let report = benchmark_latency(&bench_model(), &["KunJuTi grows in Hotan.".to_string()], 1, 0).unwrap();
    let s = &report.stats;
    assert_eq!(s.iterations, 1);
    assert!(s.mean_ms == s.p50_ms && s.p50_ms == s.max_ms);
    assert!(benchmark_latency(&bench_model(), &["x".to_string()], 0, 0).is_err());
}

/// Byte counts and latency statistics recomputed from scratch.
#[test]
fn bench_report_matches_remeasurement() {
    let model = bench_model();
    let inputs: Vec<String> = ["KunJuTi grows in Hotan.", "", "tannin and lipids"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let report = benchmark_latency(&model, &inputs, 9, 2).unwrap();
    assert_eq!(report.samples.len(), 9);
    assert_eq!(report.warmup, 2);
    for s in &report.samples {
        let text = &inputs[s.input_index];
        let req = serde_json::to_vec(&serde_json::json!({ "text": text })).unwrap();
        assert_eq!(s.request_bytes, req.len());
        let body = coex_core::handle_extract(&model, &req).body;
        let resp: ExtractResponse = serde_json::from_slice(&body).unwrap();
        // Only latency_ms differs between runs; its digits may change the length.
        let relen = |mut r: ExtractResponse| {
            r.latency_ms = 0.0;
            r.response_bytes = 0;
            serde_json::to_vec(&r).unwrap().len()
        };
        assert_eq!(s.reported_response_bytes, s.response_bytes);
        assert_eq!(resp.response_bytes, body.len());
        assert!(relen(resp) <= s.response_bytes);
    }
    assert_eq!(
        report.total_request_bytes,
        report.samples.iter().map(|s| s.request_bytes).sum::<usize>()
    );
    assert_eq!(
        report.total_response_bytes,
        report.samples.iter().map(|s| s.response_bytes).sum::<usize>()
    );
    let latencies: Vec<f64> = report.samples.iter().map(|s| s.latency_ms).collect();
    let oracle = LatencyStats::from_samples(&latencies).unwrap();
    assert_eq!(report.stats, oracle);
    let mut sorted = latencies.clone();
    sorted.sort_by(f64::total_cmp);
    assert_eq!(report.stats.p50_ms, sorted[4]);
    assert_eq!(report.stats.p95_ms, sorted[8]);
    assert!((report.stats.mean_ms - latencies.iter().sum::<f64>() / 9.0).abs() < 1e-12);
}

#[test]
fn longer_inputs_are_not_faster() {
    let model = bench_model();
    let short = "KunJuTi grows in Hotan.".to_string();
    let long = vec![short.as_str(); 16].join(" ");
    let a = benchmark_latency(&model, &[short], 30, 3).unwrap();
    let b = benchmark_latency(&model, &[long], 30, 3).unwrap();
    assert!(
        b.stats.mean_ms >= a.stats.mean_ms,
        "{} vs {}",
        a.stats.mean_ms,
        b.stats.mean_ms
    );
}
