//! Exact-match triple scoring, the pooled two-sample t-test and latency
//! summaries.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::data::{encode_example, RawExample, Vocab};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tagger::{extract_triples, RelationSchema, Triple};

/// Normalized `(subject, predicate, object)` key.
pub type TripleKey = (String, String, String);

pub fn normalize(subject: &str, predicate: &str, object: &str) -> TripleKey {
    (
        subject.trim().to_string(),
        predicate.trim().to_string(),
        object.trim().to_string(),
    )
}

pub fn triple_key(t: &Triple) -> TripleKey {
    normalize(&t.subject, &t.predicate, &t.object)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub true_positives: usize,
    pub predicted_count: usize,
    pub gold_count: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Gold triples lost to sequence truncation before scoring.
    pub truncation_dropped: usize,
}

impl EvalReport {
    pub fn from_counts(tp: usize, predicted: usize, gold: usize) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, gold);
        EvalReport {
            true_positives: tp,
            predicted_count: predicted,
            gold_count: gold,
            precision,
            recall,
            f1: f1(precision, recall),
            truncation_dropped: 0,
        }
    }
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Set-level exact match of one prediction list against one gold list.
pub fn score_triples(pred: &[Triple], gold: &[Triple]) -> EvalReport {
    let mut acc = Scorer::default();
    acc.add_keys(pred.iter().map(triple_key), gold.iter().map(triple_key));
    acc.report()
}

/// Micro-averaged counts accumulated sentence by sentence.
#[derive(Clone, Debug, Default)]
pub struct Scorer {
    tp: usize,
    predicted: usize,
    gold: usize,
    dropped: usize,
}

impl Scorer {
    pub fn add_keys(
        &mut self,
        pred: impl IntoIterator<Item = TripleKey>,
        gold: impl IntoIterator<Item = TripleKey>,
    ) {
        let pred: BTreeSet<TripleKey> = pred.into_iter().collect();
        let gold: BTreeSet<TripleKey> = gold.into_iter().collect();
        self.tp += pred.intersection(&gold).count();
        self.predicted += pred.len();
        self.gold += gold.len();
    }

    pub fn add(&mut self, pred: &[Triple], gold: &[Triple]) {
        self.add_keys(pred.iter().map(triple_key), gold.iter().map(triple_key));
    }

    pub fn add_dropped(&mut self, n: usize) {
        self.dropped += n;
    }

    pub fn report(&self) -> EvalReport {
        let mut r = EvalReport::from_counts(self.tp, self.predicted, self.gold);
        r.truncation_dropped = self.dropped;
        r
    }
}

/// Micro P/R/F1 of the model's extractions over a gold corpus. Gold triples
/// cut off by truncation count as misses and are reported separately.
pub fn evaluate(
    model: &Model<f32>,
    vocab: &Vocab,
    schema: &RelationSchema,
    corpus: &[RawExample],
    threshold: f32,
) -> Result<EvalReport> {
    let mut scorer = Scorer::default();
    for ex in corpus {
        let pred = extract_triples(model, vocab, schema, &ex.text, threshold)?;
        let encoded = encode_example(ex, vocab, schema, model.config.encoder.max_seq_len)?;
        scorer.add_dropped(encoded.dropped_triples);
        scorer.add_keys(
            pred.iter().map(triple_key),
            ex.triples
                .iter()
                .map(|t| normalize(&t.subject, &t.predicate, &t.object)),
        );
    }
    Ok(scorer.report())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub t_statistic: f64,
    pub p_value: f64,
    pub degrees_of_freedom: usize,
}

fn mean_and_ss(xs: &[f64]) -> (f64, f64) {
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let ss = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
    (mean, ss)
}

/// Two-sided tail probability `P(|T| ≥ |t|)` of Student's t with `df` degrees
/// of freedom.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    if t == 0.0 {
        return 1.0;
    }
    let x = df / (df + t * t);
    statrs::function::beta::beta_reg(df / 2.0, 0.5, x).clamp(0.0, 1.0)
}

/// Equal-variance two-sample Student t-test, two-sided.
pub fn t_test(a: &[f64], b: &[f64]) -> Result<TTestResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Contract(format!(
            "t_test needs at least 2 samples per group, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(Error::Contract("t_test samples must be finite".into()));
    }
    let df = a.len() + b.len() - 2;
    let (ma, ssa) = mean_and_ss(a);
    let (mb, ssb) = mean_and_ss(b);
    let pooled = (ssa + ssb) / df as f64;
    let se = (pooled * (1.0 / a.len() as f64 + 1.0 / b.len() as f64)).sqrt();
    let diff = ma - mb;
    if se == 0.0 {
        if diff == 0.0 {
            return Ok(TTestResult {
                t_statistic: 0.0,
                p_value: 1.0,
                degrees_of_freedom: df,
            });
        }
        return Err(Error::DegenerateVariance);
    }
    let t = diff / se;
    Ok(TTestResult {
        t_statistic: t,
        p_value: student_t_two_sided(t, df as f64),
        degrees_of_freedom: df,
    })
}

/// Summary of per-extraction wall-clock latencies in milliseconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub iterations: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
}

/// Nearest-rank percentile of an ascending slice, `q ∈ (0, 1]`.
pub fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

impl LatencyStats {
    pub fn from_samples(samples: &[f64]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Contract("latency stats over zero samples".into()));
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        Ok(LatencyStats {
            iterations: samples.len(),
            mean_ms: samples.iter().sum::<f64>() / samples.len() as f64,
            p50_ms: nearest_rank(&sorted, 0.5),
            p95_ms: nearest_rank(&sorted, 0.95),
            max_ms: sorted[sorted.len() - 1],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tagger::Span;
    use proptest::prelude::*;

    fn t(s: &str, p: &str, o: &str) -> Triple {
        Triple {
            subject: s.into(),
            predicate: p.into(),
            object: o.into(),
            subject_span: Span::new(0, 0),
            object_span: Span::new(0, 0),
        }
    }

    fn kunjuti_gold() -> Vec<Triple> {
        [
            "fat oil",
            "lipids",
            "linoleic acid",
            "palmitic acid",
            "stearic acid",
            "oleic acid",
        ]
        .iter()
        .map(|o| t("KunJuTi", "composition", o))
        .collect()
    }

    #[test]
    fn identical_sets_score_one() {
        let gold = kunjuti_gold();
        let r = score_triples(&gold, &gold);
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn empty_prediction_scores_zero() {
        let r = score_triples(&[], &kunjuti_gold());
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
        let r = score_triples(&[], &[]);
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn partial_match_counts() {
        let gold = vec![
            t("a", "r", "1"),
            t("a", "r", "2"),
            t("b", "r", "3"),
            t("c", "r", "4"),
        ];
        let pred = vec![t("a", "r", "1"), t(" b ", "r", "3"), t("c", "r", "9")];
        let r = score_triples(&pred, &gold);
        assert_eq!(r.true_positives, 2);
        assert!((r.precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.recall - 0.5).abs() < 1e-12);
        assert!((r.f1 - 4.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn no_case_folding() {
        let r = score_triples(
            &[t("KunJuTi", "composition", "Fat oil")],
            &[t("KunJuTi", "composition", "fat oil")],
        );
        assert_eq!(r.true_positives, 0);
    }

    #[test]
    fn f1_examples() {
        assert!((f1(0.906, 0.924) - 0.915).abs() <= 5e-4);
        assert_eq!(f1(1.0, 1.0), 1.0);
        assert_eq!(f1(0.0, 0.7), 0.0);
        assert_eq!(f1(0.0, 0.0), 0.0);
    }

    const CASREL: [f64; 5] = [0.840, 0.847, 0.843, 0.831, 0.827];
    const COEX: [f64; 5] = [0.908, 0.905, 0.911, 0.903, 0.902];

    /// Composite Simpson integration of the t density over `[|t|, ∞)` after
    /// the substitution `x = |t| + u/(1-u)`.
    fn tail_by_quadrature(t: f64, df: f64) -> f64 {
        let ln_norm = statrs::function::gamma::ln_gamma((df + 1.0) / 2.0)
            - statrs::function::gamma::ln_gamma(df / 2.0)
            - 0.5 * (df * std::f64::consts::PI).ln();
        let density = |x: f64| (ln_norm - (df + 1.0) / 2.0 * (1.0 + x * x / df).ln()).exp();
        let f = |u: f64| {
            if u >= 1.0 {
                return 0.0;
            }
            let x = t.abs() + u / (1.0 - u);
            density(x) / ((1.0 - u) * (1.0 - u))
        };
        let n = 200_000;
        let h = 1.0 / n as f64;
        let mut s = f(0.0) + f(1.0);
        for i in 1..n {
            s += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        2.0 * s * h / 3.0
    }

    #[test]
    fn reproduces_published_t_test() {
        let r = t_test(&CASREL, &COEX).unwrap();
        assert_eq!(r.degrees_of_freedom, 8);
        assert!((r.t_statistic + 16.6888).abs() <= 1e-3, "{}", r.t_statistic);
        assert!(
            ((r.p_value - 1.6808e-7) / 1.6808e-7).abs() <= 0.01,
            "{}",
            r.p_value
        );
    }

    #[test]
    fn p_value_matches_quadrature() {
        for &(tv, df) in &[(-16.688839542324715, 8.0), (0.3, 3.0), (2.1, 10.0), (5.0, 2.0)] {
            let p = student_t_two_sided(tv, df);
            let q = tail_by_quadrature(tv, df);
            assert!((p - q).abs() <= 1e-10, "t={tv} df={df}: {p} vs {q}");
        }
    }

    #[test]
    fn t_test_degenerate_cases() {
        let r = t_test(&[0.5, 0.5], &[0.5, 0.5]).unwrap();
        assert_eq!((r.t_statistic, r.p_value), (0.0, 1.0));
        assert!(matches!(
            t_test(&[0.5, 0.5], &[0.7, 0.7]),
            Err(Error::DegenerateVariance)
        ));
        assert!(t_test(&[0.5], &[0.7, 0.8]).is_err());
        let r = t_test(&CASREL, &CASREL).unwrap();
        assert_eq!((r.t_statistic, r.p_value), (0.0, 1.0));
    }

    #[test]
    fn latency_single_sample() {
        let s = LatencyStats::from_samples(&[3.5]).unwrap();
        assert_eq!((s.mean_ms, s.p50_ms, s.max_ms), (3.5, 3.5, 3.5));
    }

    #[test]
    fn nearest_rank_brute_force() {
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(nearest_rank(&v, 0.5), 10.0);
        assert_eq!(nearest_rank(&v, 0.95), 19.0);
        assert_eq!(nearest_rank(&v, 1.0), 20.0);
    }

    fn triples() -> impl Strategy<Value = Vec<Triple>> {
        proptest::collection::vec((0u8..4, 0u8..3, 0u8..4), 0..12).prop_map(|v| {
            v.into_iter()
                .map(|(s, p, o)| t(&format!("s{s}"), &format!("p{p}"), &format!("o{o}")))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn f1_between_p_and_r(p in 1e-6f64..=1.0, r in 1e-6f64..=1.0) {
            let f = f1(p, r);
            prop_assert!(f >= p.min(r) - 1e-12 && f <= p.max(r) + 1e-12);
            prop_assert!(f <= (p + r) / 2.0 + 1e-12);
        }

        #[test]
        fn scoring_order_and_duplicate_invariant(pred in triples(), gold in triples(), seed in 0u64..1000) {
            let base = score_triples(&pred, &gold);
            let mut rng = crate::rng::Rng::new(seed);
            let mut p2 = pred.clone();
            p2.extend(pred.iter().take(3).cloned());
            rng.shuffle(&mut p2);
            let mut g2 = gold.clone();
            g2.extend(gold.iter().take(2).cloned());
            rng.shuffle(&mut g2);
            prop_assert_eq!(score_triples(&p2, &g2), base);
        }

        #[test]
        fn t_antisymmetric(a in proptest::collection::vec(0.0f64..1.0, 2..8), b in proptest::collection::vec(0.0f64..1.0, 2..8)) {
            if let (Ok(x), Ok(y)) = (t_test(&a, &b), t_test(&b, &a)) {
                prop_assert!((x.t_statistic + y.t_statistic).abs() <= 1e-9 * (1.0 + x.t_statistic.abs()));
                prop_assert!((x.p_value - y.p_value).abs() <= 1e-12);
                prop_assert!((0.0..=1.0).contains(&x.p_value));
            }
        }

        #[test]
        fn p_monotone_in_abs_t(t1 in 0.0f64..20.0, dt in 0.0f64..5.0, df in 1usize..30) {
            let p1 = student_t_two_sided(t1, df as f64);
            let p2 = student_t_two_sided(-(t1 + dt), df as f64);
            prop_assert!(p2 <= p1 + 1e-15);
        }
    }
}
