//! Binary calendar-time signals and scoring examples.
//!
//! For a candidate item and a query day `q`, the signal is a `{0,1}` vector
//! over the `t` calendar days `[q - t, q - 1]`: position `i` (0-based) covers
//! absolute day `q - t + i`, so the last position is yesterday. Only history
//! strictly before the query day can set a bit — day `q` itself and anything
//! later never leaks in.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use crate::error::{CaseError, Result};
use crate::ingest::{Day, ItemId, UserHistory, UserId};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CadenceSignal {
    /// Exactly `t` bits, each 0 or 1 (repeat purchases on one day still set 1).
    pub bits: Vec<u8>,
}

impl CadenceSignal {
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bitstring(&self) -> String {
        self.bits.iter().map(|&b| if b == 0 { '0' } else { '1' }).collect()
    }
}

/// Builds the signal for one item from its purchase days (any order, any
/// range; days outside the window are ignored).
pub fn build_signal(purchase_days: &[Day], query_day: Day, t: usize) -> CadenceSignal {
    let mut bits = vec![0u8; t];
    let start = query_day - t as i64;
    for &d in purchase_days {
        if d >= start && d < query_day {
            bits[(d - start) as usize] = 1;
        }
    }
    CadenceSignal { bits }
}

/// One scoring instance: every previously purchased item of a user as of
/// `query_day`, with its signal, label (membership in the day-`query_day`
/// basket, all zero for pure inference), and the purchase statistics the
/// deterministic tie-breaks use.
#[derive(Debug, Clone)]
pub struct Example {
    pub user: UserId,
    pub query_day: Day,
    pub candidates: Vec<ItemId>,
    pub signals: Vec<CadenceSignal>,
    pub labels: Vec<u8>,
    /// Purchase count before `query_day`, per candidate.
    pub counts: Vec<u32>,
    /// Most recent purchase day before `query_day`, per candidate.
    pub last_days: Vec<Day>,
}

impl Example {
    pub fn n_candidates(&self) -> usize {
        self.candidates.len()
    }

    /// Indices of positive-label candidates.
    pub fn truth(&self) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] == 1).collect()
    }
}

struct CandidateStats {
    count: u32,
    last_day: Day,
    bits: Vec<u8>,
}

/// Candidate assembly shared by training and inference examples. Candidates
/// are the distinct items purchased strictly before `query_day`, ordered by
/// (most recent purchase desc, count desc, item id asc) and capped at `cap_n`
/// so the most recently active items survive.
fn collect_candidates(
    history: &UserHistory,
    query_day: Day,
    t: usize,
    cap_n: usize,
) -> (Vec<ItemId>, Vec<CandidateStats>) {
    let start = query_day - t as i64;
    let mut stats: HashMap<&str, CandidateStats> = HashMap::new();
    for basket in &history.baskets {
        if basket.day >= query_day {
            continue;
        }
        for item in &basket.items {
            let s = stats.entry(item).or_insert_with(|| CandidateStats {
                count: 0,
                last_day: basket.day,
                bits: vec![0u8; t],
            });
            s.count += 1;
            s.last_day = s.last_day.max(basket.day);
            if basket.day >= start {
                s.bits[(basket.day - start) as usize] = 1;
            }
        }
    }
    let mut order: Vec<&str> = stats.keys().copied().collect();
    order.sort_unstable_by(|a, b| {
        let sa = &stats[a];
        let sb = &stats[b];
        sb.last_day
            .cmp(&sa.last_day)
            .then(sb.count.cmp(&sa.count))
            .then(a.cmp(b))
    });
    order.truncate(cap_n);
    let mut items = Vec::with_capacity(order.len());
    let mut out_stats = Vec::with_capacity(order.len());
    for name in order {
        out_stats.push(stats.remove(name).unwrap());
        items.push(name.to_string());
    }
    (items, out_stats)
}

/// Leave-one-out example: the user's last basket is the target, everything
/// before it is history. Returns `None` when the user has no prior candidates
/// (fewer than two baskets).
pub fn leave_one_out_example(history: &UserHistory, t: usize, cap_n: usize) -> Option<Example> {
    let target = history.baskets.last()?;
    let query_day = target.day;
    let (candidates, stats) = collect_candidates(history, query_day, t, cap_n);
    if candidates.is_empty() {
        return None;
    }
    let labels = candidates
        .iter()
        .map(|c| u8::from(target.items.binary_search(c).is_ok()))
        .collect();
    Some(assemble(history, query_day, candidates, stats, labels))
}

/// Inference example for an arbitrary as-of day; labels are all zero.
pub fn query_example(
    history: &UserHistory,
    as_of_day: Day,
    t: usize,
    cap_n: usize,
) -> Result<Example> {
    let (candidates, stats) = collect_candidates(history, as_of_day, t, cap_n);
    if candidates.is_empty() {
        return Err(CaseError::data(format!(
            "user `{}` has no purchases before day {as_of_day}",
            history.user
        )));
    }
    let labels = vec![0u8; candidates.len()];
    Ok(assemble(history, as_of_day, candidates, stats, labels))
}

fn assemble(
    history: &UserHistory,
    query_day: Day,
    candidates: Vec<ItemId>,
    stats: Vec<CandidateStats>,
    labels: Vec<u8>,
) -> Example {
    let mut signals = Vec::with_capacity(stats.len());
    let mut counts = Vec::with_capacity(stats.len());
    let mut last_days = Vec::with_capacity(stats.len());
    for s in stats {
        signals.push(CadenceSignal { bits: s.bits });
        counts.push(s.count);
        last_days.push(s.last_day);
    }
    Example {
        user: history.user.clone(),
        query_day,
        candidates,
        signals,
        labels,
        counts,
        last_days,
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ExampleStats {
    pub built: usize,
    pub skipped_no_candidates: usize,
}

/// Builds one leave-one-out example per user; users without prior candidates
/// are skipped and counted.
pub fn build_examples(
    histories: &[UserHistory],
    t: usize,
    cap_n: usize,
) -> (Vec<Example>, ExampleStats) {
    let mut out = Vec::with_capacity(histories.len());
    let mut stats = ExampleStats::default();
    for h in histories {
        match leave_one_out_example(h, t, cap_n) {
            Some(ex) => {
                stats.built += 1;
                out.push(ex);
            }
            None => stats.skipped_no_candidates += 1,
        }
    }
    (out, stats)
}

/// Debug dump: one line per candidate, `user<TAB>item<TAB>label<TAB>bits`.
pub fn write_signal_dump(path: &Path, examples: &[Example]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for ex in examples {
        for i in 0..ex.n_candidates() {
            writeln!(
                out,
                "{}\t{}\t{}\t{}",
                ex.user,
                ex.candidates[i],
                ex.labels[i],
                ex.signals[i].bitstring()
            )?;
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Basket;
    use proptest::prelude::*;

    fn history(user: &str, baskets: &[(Day, &[&str])]) -> UserHistory {
        UserHistory {
            user: user.into(),
            baskets: baskets
                .iter()
                .map(|(d, items)| Basket {
                    day: *d,
                    items: items.iter().map(|s| s.to_string()).collect(),
                })
                .collect(),
        }
    }

    #[test]
    fn weekly_item_produces_52_aligned_ones() {
        // Weekly purchases ending the day before the query, t = 364:
        // bits at positions 363, 356, ..., exactly 52 ones, 7 apart.
        let q = 1000i64;
        let days: Vec<Day> = (0..60).map(|k| q - 1 - 7 * k).collect();
        let sig = build_signal(&days, q, 364);
        assert_eq!(sig.len(), 364);
        let ones: Vec<usize> = (0..364).filter(|&i| sig.bits[i] == 1).collect();
        assert_eq!(ones.len(), 52);
        assert_eq!(*ones.last().unwrap(), 363);
        assert_eq!(ones[0], 363 - 7 * 51);
        for w in ones.windows(2) {
            assert_eq!(w[1] - w[0], 7);
        }
    }

    #[test]
    fn same_day_repeat_purchases_still_set_one() {
        let sig = build_signal(&[5, 5, 5], 7, 7);
        assert_eq!(sig.bits.iter().map(|&b| b as u32).sum::<u32>(), 1);
        assert_eq!(sig.bits[5], 1);
    }

    #[test]
    fn leave_one_out_uses_last_basket_as_target() {
        let h = history(
            "u1",
            &[
                (1, &["a", "b"]),
                (5, &["a"]),
                (9, &["a", "c"]),
            ],
        );
        let ex = leave_one_out_example(&h, 14, 512).unwrap();
        assert_eq!(ex.query_day, 9);
        // Candidates: items before day 9 = {a, b}, ordered most recent first.
        assert_eq!(ex.candidates, vec!["a", "b"]);
        assert_eq!(ex.labels, vec![1, 0]);
        assert_eq!(ex.counts, vec![2, 1]);
        assert_eq!(ex.last_days, vec![5, 1]);
        // Signal window [q-14, q-1] = [-5, 8]: a at days 1 and 5 -> positions 6, 10.
        assert_eq!(ex.signals[0].bits[6], 1);
        assert_eq!(ex.signals[0].bits[10], 1);
        assert_eq!(ex.signals[0].bits.iter().map(|&b| b as u32).sum::<u32>(), 2);
    }

    #[test]
    fn single_basket_user_is_skipped() {
        let h = history("u1", &[(3, &["a"])]);
        assert!(leave_one_out_example(&h, 7, 512).is_none());
        let (exs, stats) = build_examples(&[h], 7, 512);
        assert!(exs.is_empty());
        assert_eq!(stats.skipped_no_candidates, 1);
    }

    #[test]
    fn candidate_cap_keeps_most_recent_items() {
        let mut baskets: Vec<(Day, Vec<String>)> = Vec::new();
        for d in 0..10 {
            baskets.push((d, vec![format!("item{d}")]));
        }
        let h = UserHistory {
            user: "u".into(),
            baskets: baskets
                .iter()
                .map(|(d, items)| Basket { day: *d, items: items.clone() })
                .collect(),
        };
        let ex = leave_one_out_example(&h, 30, 3).unwrap();
        assert_eq!(ex.candidates, vec!["item8", "item7", "item6"]);
    }

    #[test]
    fn query_example_has_zero_labels_and_respects_as_of_day() {
        let h = history("u1", &[(1, &["a"]), (8, &["b"])]);
        let ex = query_example(&h, 5, 7, 512).unwrap();
        assert_eq!(ex.candidates, vec!["a"]);
        assert_eq!(ex.labels, vec![0]);
        assert!(query_example(&h, 0, 7, 512).is_err());
    }

    proptest! {
        /// Signals are always length t with bits in {0,1}.
        #[test]
        fn signal_shape_invariant(
            days in proptest::collection::vec(-50i64..200, 0..40),
            q in 0i64..150,
            t in 1usize..64,
        ) {
            let sig = build_signal(&days, q, t);
            prop_assert_eq!(sig.len(), t);
            prop_assert!(sig.bits.iter().all(|&b| b <= 1));
        }

        /// Causality: purchases at or after the query day never change bits.
        #[test]
        fn signal_causality(
            days in proptest::collection::vec(0i64..100, 1..30),
            extra in proptest::collection::vec(0i64..50, 1..10),
            q in 1i64..100,
            t in 1usize..64,
        ) {
            let base = build_signal(&days, q, t);
            let mut more = days.clone();
            for e in extra {
                more.push(q + e); // at or after q
            }
            let with_future = build_signal(&more, q, t);
            prop_assert_eq!(base.bits, with_future.bits);
        }

        /// Shift invariance: shifting all days and the query by the same
        /// offset leaves the signal unchanged.
        #[test]
        fn signal_shift_invariance(
            days in proptest::collection::vec(0i64..100, 0..30),
            q in 0i64..120,
            t in 1usize..64,
            shift in -1000i64..1000,
        ) {
            let base = build_signal(&days, q, t);
            let shifted: Vec<i64> = days.iter().map(|d| d + shift).collect();
            let moved = build_signal(&shifted, q + shift, t);
            prop_assert_eq!(base.bits, moved.bits);
        }
    }
}
