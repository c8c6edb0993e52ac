//! Leave-one-out ranking metrics: Precision@k, Recall@k, NDCG@k.
//!
//! Conventions, applied uniformly to every ranker so numbers are comparable:
//! * Precision@k divides by `k` even when fewer than `k` relevant items
//!   exist, so a short truth set caps attainable precision.
//! * Recall divides by the number of relevant items *in the candidate set*
//!   (items a user never bought before cannot be candidates and are not
//!   counted against any model).
//! * NDCG uses binary gains `1/log2(pos+1)` with the ideal DCG over
//!   `min(k, |truth|)` positions.
//! * Examples whose target basket shares no item with the candidate set are
//!   skipped and counted separately.
//! * Sums are accumulated in f64 in example order, so a report is
//!   reproducible bit-for-bit for a fixed example order.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::Serialize;

use crate::error::{CaseError, Result};
use crate::ingest::ItemId;
use crate::signal::Example;

/// Anything that can order a candidate set. Implementations must be
/// deterministic: ties broken by (count desc, item id asc).
pub trait Ranker {
    fn name(&self) -> &'static str;

    /// Top-`k` candidate item ids, best first.
    fn rank_example(&self, ex: &Example, k: usize) -> Result<Vec<ItemId>>;
}

pub fn precision_at_k(ranked: &[ItemId], truth: &HashSet<&str>, k: usize) -> f64 {
    assert!(k > 0, "k must be positive");
    let hits = ranked
        .iter()
        .take(k)
        .filter(|it| truth.contains(it.as_str()))
        .count();
    hits as f64 / k as f64
}

pub fn recall_at_k(ranked: &[ItemId], truth: &HashSet<&str>, k: usize) -> f64 {
    assert!(k > 0, "k must be positive");
    if truth.is_empty() {
        return 0.0;
    }
    let hits = ranked
        .iter()
        .take(k)
        .filter(|it| truth.contains(it.as_str()))
        .count();
    hits as f64 / truth.len() as f64
}

pub fn ndcg_at_k(ranked: &[ItemId], truth: &HashSet<&str>, k: usize) -> f64 {
    assert!(k > 0, "k must be positive");
    if truth.is_empty() {
        return 0.0;
    }
    let mut dcg = 0.0;
    for (i, item) in ranked.iter().take(k).enumerate() {
        if truth.contains(item.as_str()) {
            dcg += 1.0 / ((i + 2) as f64).log2();
        }
    }
    let mut idcg = 0.0;
    for i in 0..k.min(truth.len()) {
        idcg += 1.0 / ((i + 2) as f64).log2();
    }
    dcg / idcg
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Default)]
pub struct MetricRow {
    pub precision: f64,
    pub recall: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub ranker: String,
    /// Mean metrics keyed by cutoff `k`.
    pub per_k: BTreeMap<usize, MetricRow>,
    /// Examples that entered the averages.
    pub evaluated: usize,
    /// Examples skipped because no candidate was relevant.
    pub skipped_empty_truth: usize,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,precision,recall,ndcg\n");
        for (k, row) in &self.per_k {
            out.push_str(&format!(
                "{k},{:.6},{:.6},{:.6}\n",
                row.precision, row.recall, row.ndcg
            ));
        }
        out
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{}: {} examples evaluated, {} skipped (empty truth)",
            self.ranker, self.evaluated, self.skipped_empty_truth
        )?;
        writeln!(f, "{:>6} {:>12} {:>12} {:>12}", "k", "precision", "recall", "ndcg")?;
        for (k, row) in &self.per_k {
            writeln!(
                f,
                "{k:>6} {:>12.4} {:>12.4} {:>12.4}",
                row.precision, row.recall, row.ndcg
            )?;
        }
        Ok(())
    }
}

/// Evaluates a ranker over leave-one-out examples at every cutoff in `ks`.
pub fn evaluate(ranker: &dyn Ranker, examples: &[Example], ks: &[usize]) -> Result<EvalReport> {
    if ks.is_empty() {
        return Err(CaseError::config("evaluation needs at least one cutoff k"));
    }
    for &k in ks {
        if k == 0 {
            return Err(CaseError::config("evaluation cutoff k=0 is meaningless"));
        }
    }
    let k_max = *ks.iter().max().unwrap();
    let mut sums: BTreeMap<usize, MetricRow> = ks.iter().map(|&k| (k, MetricRow::default())).collect();
    let mut evaluated = 0usize;
    let mut skipped = 0usize;
    for ex in examples {
        let truth: HashSet<&str> = ex
            .truth()
            .into_iter()
            .map(|i| ex.candidates[i].as_str())
            .collect();
        if truth.is_empty() {
            skipped += 1;
            continue;
        }
        let ranked = ranker.rank_example(ex, k_max)?;
        // At cutoff 1 the two definitions coincide; a drift here means a
        // metric implementation broke.
        let p1 = precision_at_k(&ranked, &truth, 1);
        let n1 = ndcg_at_k(&ranked, &truth, 1);
        assert!(
            (p1 - n1).abs() < 1e-12,
            "NDCG@1 ({n1}) diverged from Precision@1 ({p1}) for user {}",
            ex.user
        );
        for (&k, row) in sums.iter_mut() {
            row.precision += precision_at_k(&ranked, &truth, k);
            row.recall += recall_at_k(&ranked, &truth, k);
            row.ndcg += ndcg_at_k(&ranked, &truth, k);
        }
        evaluated += 1;
    }
    if evaluated == 0 {
        return Err(CaseError::data(
            "no evaluable examples: every target basket was disjoint from its candidate set",
        ));
    }
    for row in sums.values_mut() {
        row.precision /= evaluated as f64;
        row.recall /= evaluated as f64;
        row.ndcg /= evaluated as f64;
    }
    Ok(EvalReport {
        ranker: ranker.name().to_string(),
        per_k: sums,
        evaluated,
        skipped_empty_truth: skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::CadenceSignal;

    fn ids(v: &[&str]) -> Vec<ItemId> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn truth_of<'a>(v: &[&'a str]) -> HashSet<&'a str> {
        v.iter().copied().collect()
    }

    #[test]
    fn ndcg_worked_example() {
        // Truth {a,b}, ranking [a, x, b] at k=3:
        // DCG  = 1/log2(2) + 1/log2(4) = 1.5
        // IDCG = 1/log2(2) + 1/log2(3) = 1.6309297535714574
        let ranked = ids(&["a", "x", "b"]);
        let truth = truth_of(&["a", "b"]);
        let got = ndcg_at_k(&ranked, &truth, 3);
        let want = 1.5 / (1.0 + 1.0 / 3.0f64.log2());
        assert!((got - want).abs() < 1e-12);
        assert!((got - 0.9197).abs() < 1e-4);
    }

    #[test]
    fn precision_divides_by_k_not_truth_size() {
        let ranked = ids(&["a", "x", "y"]);
        let truth = truth_of(&["a"]);
        assert_eq!(precision_at_k(&ranked, &truth, 3), 1.0 / 3.0);
        assert_eq!(recall_at_k(&ranked, &truth, 3), 1.0);
    }

    #[test]
    fn ndcg_ideal_is_one() {
        let ranked = ids(&["a", "b", "c"]);
        let truth = truth_of(&["a", "b", "c"]);
        for k in 1..=3 {
            assert!((ndcg_at_k(&ranked, &truth, k) - 1.0).abs() < 1e-12);
        }
        // Short truth: perfect ranking still scores 1 because IDCG caps at |truth|.
        let truth1 = truth_of(&["a"]);
        assert!((ndcg_at_k(&ranked, &truth1, 3) - 1.0).abs() < 1e-12);
    }

    struct FixedOrder(Vec<ItemId>);

    impl Ranker for FixedOrder {
        fn name(&self) -> &'static str {
            "fixed"
        }
        fn rank_example(&self, _ex: &Example, k: usize) -> Result<Vec<ItemId>> {
            Ok(self.0.iter().take(k).cloned().collect())
        }
    }

    fn example_with_labels(items: &[&str], labels: &[u8]) -> Example {
        Example {
            user: "u".into(),
            query_day: 10,
            candidates: ids(items),
            signals: items
                .iter()
                .map(|_| CadenceSignal { bits: vec![0; 4] })
                .collect(),
            labels: labels.to_vec(),
            counts: vec![1; items.len()],
            last_days: vec![0; items.len()],
        }
    }

    #[test]
    fn evaluate_skips_empty_truth_and_averages_in_order() {
        let exs = vec![
            example_with_labels(&["a", "b", "c"], &[1, 0, 0]),
            example_with_labels(&["a", "b", "c"], &[0, 0, 0]), // skipped
            example_with_labels(&["a", "b", "c"], &[0, 1, 1]),
        ];
        let ranker = FixedOrder(ids(&["a", "b", "c"]));
        let rep = evaluate(&ranker, &exs, &[1, 2]).unwrap();
        assert_eq!(rep.evaluated, 2);
        assert_eq!(rep.skipped_empty_truth, 1);
        // Example 1: prec@1 = 1, recall@1 = 1. Example 3: prec@1 = 0, recall@1 = 0.
        assert!((rep.per_k[&1].precision - 0.5).abs() < 1e-12);
        assert!((rep.per_k[&1].recall - 0.5).abs() < 1e-12);
        // k=2: ex1 prec 1/2 recall 1; ex3 prec 1/2 recall 1/2.
        assert!((rep.per_k[&2].precision - 0.5).abs() < 1e-12);
        assert!((rep.per_k[&2].recall - 0.75).abs() < 1e-12);
    }

    #[test]
    fn evaluate_rejects_all_empty() {
        let exs = vec![example_with_labels(&["a"], &[0])];
        let ranker = FixedOrder(ids(&["a"]));
        assert!(evaluate(&ranker, &exs, &[1]).is_err());
    }

    /// Independent recomputation with a deliberately different style:
    /// per-position loops and explicit indicator arithmetic.
    fn brute_force(ranked: &[ItemId], truth: &HashSet<&str>, k: usize) -> (f64, f64, f64) {
        let mut rel = vec![0u8; k];
        for p in 0..k.min(ranked.len()) {
            if truth.contains(ranked[p].as_str()) {
                rel[p] = 1;
            }
        }
        let hits: u32 = rel.iter().map(|&r| r as u32).sum();
        let prec = f64::from(hits) / k as f64;
        let rec = if truth.is_empty() {
            0.0
        } else {
            f64::from(hits) / truth.len() as f64
        };
        let mut dcg = 0.0;
        for (p, &r) in rel.iter().enumerate() {
            if r == 1 {
                dcg += f64::ln(2.0) / f64::ln((p + 2) as f64);
            }
        }
        let ideal_hits = k.min(truth.len());
        let mut idcg = 0.0;
        for p in 0..ideal_hits {
            idcg += f64::ln(2.0) / f64::ln((p + 2) as f64);
        }
        let ndcg = if truth.is_empty() { 0.0 } else { dcg / idcg };
        (prec, rec, ndcg)
    }

    #[test]
    fn metrics_match_brute_force_on_small_sets() {
        let mut rng = crate::autodiff::rng::Rng::new(99);
        let pool = ["a", "b", "c", "d", "e", "f"];
        for _ in 0..500 {
            let n = 1 + rng.below(6);
            let mut items: Vec<&str> = pool[..n].to_vec();
            rng.shuffle(&mut items);
            let ranked = ids(&items);
            let truth: HashSet<&str> = items
                .iter()
                .filter(|_| rng.uniform() < 0.4)
                .copied()
                .collect();
            for k in 1..=n {
                let (p, r, nd) = brute_force(&ranked, &truth, k);
                assert!((precision_at_k(&ranked, &truth, k) - p).abs() < 1e-12);
                assert!((recall_at_k(&ranked, &truth, k) - r).abs() < 1e-12);
                if !truth.is_empty() {
                    assert!((ndcg_at_k(&ranked, &truth, k) - nd).abs() < 1e-12);
                }
            }
        }
    }
}
