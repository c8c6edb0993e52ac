//! Transaction CSV ingestion and the canonical basket-history format.
//!
//! Two input schemas are supported: absolute calendar days (`user,item,day`,
//! where `day` may be an integer or a date) and order-sequence rows with
//! day gaps (`user,item,order_seq,days_since_prior_order`) whose days are
//! reconstructed by cumulative sum. Either way the output is the same: per
//! user, a day-sorted list of baskets, each basket the set of distinct items
//! bought that calendar day.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::autodiff::rng::{fnv1a64, Rng};
use crate::error::{CaseError, Result};

pub type UserId = String;
pub type ItemId = String;
pub type Day = i64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Basket {
    pub day: Day,
    /// Distinct items, sorted lexicographically.
    pub items: Vec<ItemId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserHistory {
    pub user: UserId,
    /// Sorted by day, one basket per day.
    pub baskets: Vec<Basket>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CsvSchema {
    /// `user,item,day` with day as integer or date (`YYYY-MM-DD` or `M/D/YYYY`).
    Absolute,
    /// `user,item,order_seq,days_since_prior_order`.
    Gaps,
}

/// Column names are configurable so raw exports can be ingested unchanged.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CsvSpec {
    pub schema: CsvSchema,
    pub user_col: String,
    pub item_col: String,
    pub day_col: String,
    pub order_col: String,
    pub gap_col: String,
}

impl Default for CsvSpec {
    fn default() -> Self {
        CsvSpec {
            schema: CsvSchema::Absolute,
            user_col: "user".into(),
            item_col: "item".into(),
            day_col: "day".into(),
            order_col: "order_seq".into(),
            gap_col: "days_since_prior_order".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct IngestSummary {
    pub rows_total: usize,
    pub rows_skipped: usize,
    pub users: usize,
    pub items: usize,
    pub baskets: usize,
    pub mean_baskets_per_user: f64,
}

impl fmt::Display for IngestSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "rows:    {} ({} skipped)", self.rows_total, self.rows_skipped)?;
        writeln!(f, "users:   {}", self.users)?;
        writeln!(f, "items:   {}", self.items)?;
        write!(
            f,
            "baskets: {} ({:.2} per user)",
            self.baskets, self.mean_baskets_per_user
        )
    }
}

/// Parses a day as an integer index or a calendar date (ISO or US order);
/// dates map to days since 1970-01-01.
pub fn parse_day(s: &str) -> Option<Day> {
    let s = s.trim();
    if let Ok(d) = s.parse::<i64>() {
        return Some(d);
    }
    for fmt in ["%Y-%m-%d", "%m/%d/%Y"] {
        if let Ok(date) = NaiveDate::parse_from_str(s, fmt) {
            let epoch = NaiveDate::from_ymd_opt(1970, 1, 1).unwrap();
            return Some((date - epoch).num_days());
        }
    }
    None
}

/// Identifiers must survive the tab/comma-delimited canonical format.
fn valid_id(s: &str) -> bool {
    !s.is_empty() && !s.contains(['\t', ',', '\n', '\r'])
}

/// Parses a transaction CSV into per-user histories. Malformed rows (missing
/// fields, unparseable numbers, negative days, ids that cannot be serialized)
/// are skipped and counted; a missing column is a configuration error and an
/// input with no usable rows is a data error.
pub fn ingest_csv(path: &Path, spec: &CsvSpec) -> Result<(Vec<UserHistory>, IngestSummary)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .or_else(|| headers.iter().position(|h| h.eq_ignore_ascii_case(name)))
            .ok_or_else(|| {
                CaseError::config(format!(
                    "column `{name}` not found in {:?}; header is {:?}",
                    path,
                    headers.iter().collect::<Vec<_>>()
                ))
            })
    };

    let user_ix = col(&spec.user_col)?;
    let item_ix = col(&spec.item_col)?;

    let mut rows_total = 0usize;
    let mut rows_skipped = 0usize;

    // user -> day -> items (absolute), or user -> order -> (gap, items) (gaps).
    let mut by_day: BTreeMap<UserId, BTreeMap<Day, Vec<ItemId>>> = BTreeMap::new();

    match spec.schema {
        CsvSchema::Absolute => {
            let day_ix = col(&spec.day_col)?;
            for record in reader.records() {
                let record = record?;
                rows_total += 1;
                let (user, item, day) = match (
                    record.get(user_ix).map(str::trim),
                    record.get(item_ix).map(str::trim),
                    record.get(day_ix).and_then(parse_day),
                ) {
                    (Some(u), Some(i), Some(d)) if valid_id(u) && valid_id(i) && d >= 0 => {
                        (u.to_string(), i.to_string(), d)
                    }
                    _ => {
                        rows_skipped += 1;
                        continue;
                    }
                };
                by_day.entry(user).or_default().entry(day).or_default().push(item);
            }
        }
        CsvSchema::Gaps => {
            let order_ix = col(&spec.order_col)?;
            let gap_ix = col(&spec.gap_col)?;
            // user -> order_seq -> (gap, items); first non-empty gap wins.
            type OrderRow = (Option<i64>, Vec<ItemId>);
            let mut by_order: BTreeMap<UserId, BTreeMap<u64, OrderRow>> = BTreeMap::new();
            for record in reader.records() {
                let record = record?;
                rows_total += 1;
                let user = record.get(user_ix).map(str::trim);
                let item = record.get(item_ix).map(str::trim);
                let order = record.get(order_ix).and_then(|s| s.trim().parse::<u64>().ok());
                let (user, item, order) = match (user, item, order) {
                    (Some(u), Some(i), Some(o)) if valid_id(u) && valid_id(i) => {
                        (u.to_string(), i.to_string(), o)
                    }
                    _ => {
                        rows_skipped += 1;
                        continue;
                    }
                };
                // Gap: empty means first order (0); otherwise a non-negative number.
                let gap_raw = record.get(gap_ix).map(str::trim).unwrap_or("");
                let gap = if gap_raw.is_empty() {
                    None
                } else {
                    match gap_raw.parse::<f64>() {
                        Ok(g) if g.is_finite() && g >= 0.0 => Some(g.round() as i64),
                        _ => {
                            rows_skipped += 1;
                            continue;
                        }
                    }
                };
                let slot = by_order.entry(user).or_default().entry(order).or_default();
                if slot.0.is_none() {
                    slot.0 = gap;
                }
                slot.1.push(item);
            }
            for (user, orders) in by_order {
                let days = by_day.entry(user).or_default();
                let mut day = 0i64;
                for (_, (gap, items)) in orders {
                    day += gap.unwrap_or(0);
                    days.entry(day).or_default().extend(items);
                }
            }
        }
    }

    let mut histories = Vec::with_capacity(by_day.len());
    let mut n_baskets = 0usize;
    let mut vocab: HashMap<ItemId, ()> = HashMap::new();
    for (user, days) in by_day {
        let mut baskets = Vec::with_capacity(days.len());
        for (day, mut items) in days {
            items.sort_unstable();
            items.dedup();
            for it in &items {
                vocab.entry(it.clone()).or_default();
            }
            n_baskets += 1;
            baskets.push(Basket { day, items });
        }
        histories.push(UserHistory { user, baskets });
    }

    if histories.is_empty() {
        return Err(CaseError::data(format!(
            "no usable transactions in {:?} ({rows_total} rows, {rows_skipped} skipped)",
            path
        )));
    }

    let summary = IngestSummary {
        rows_total,
        rows_skipped,
        users: histories.len(),
        items: vocab.len(),
        baskets: n_baskets,
        mean_baskets_per_user: n_baskets as f64 / histories.len() as f64,
    };
    Ok((histories, summary))
}

/// Writes the canonical history file: one basket per line,
/// `user<TAB>day<TAB>item1,item2,...` with items sorted lexicographically.
pub fn write_history_file(path: &Path, histories: &[UserHistory]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for h in histories {
        for b in &h.baskets {
            writeln!(out, "{}\t{}\t{}", h.user, b.day, b.items.join(","))?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads the canonical history file. Lines are validated strictly (this is
/// our own format): any malformed line is a data error with its line number.
pub fn read_history_file(path: &Path) -> Result<Vec<UserHistory>> {
    let file = std::fs::File::open(path)?;
    let mut by_user: BTreeMap<UserId, BTreeMap<Day, Vec<ItemId>>> = BTreeMap::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(3, '\t');
        let bad = |what: &str| {
            CaseError::data(format!(
                "history file {:?} line {}: {what}",
                path,
                lineno + 1
            ))
        };
        let user = parts.next().filter(|s| valid_id(s)).ok_or_else(|| bad("missing user"))?;
        let day: Day = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("missing or non-integer day"))?;
        let items_str = parts.next().ok_or_else(|| bad("missing items"))?;
        let items: Vec<ItemId> = items_str.split(',').map(str::to_string).collect();
        if items.iter().any(|i| i.is_empty()) {
            return Err(bad("empty item id"));
        }
        by_user
            .entry(user.to_string())
            .or_default()
            .entry(day)
            .or_default()
            .extend(items);
    }
    if by_user.is_empty() {
        return Err(CaseError::data(format!("history file {:?} is empty", path)));
    }
    Ok(by_user
        .into_iter()
        .map(|(user, days)| UserHistory {
            user,
            baskets: days
                .into_iter()
                .map(|(day, mut items)| {
                    items.sort_unstable();
                    items.dedup();
                    Basket { day, items }
                })
                .collect(),
        })
        .collect())
}

/// Seeded user-level split. Fractions must satisfy
/// `train + val <= 1`; the remainder is the test split. Every user lands in
/// exactly one split and the assignment depends only on the seed and the
/// sorted user list.
pub fn split_users(
    mut histories: Vec<UserHistory>,
    train_frac: f64,
    val_frac: f64,
    rng: &mut Rng,
) -> Result<(Vec<UserHistory>, Vec<UserHistory>, Vec<UserHistory>)> {
    if !(0.0..=1.0).contains(&train_frac)
        || !(0.0..=1.0).contains(&val_frac)
        || train_frac + val_frac > 1.0 + 1e-12
    {
        return Err(CaseError::config(format!(
            "invalid split fractions: train={train_frac}, val={val_frac}"
        )));
    }
    histories.sort_by(|a, b| a.user.cmp(&b.user));
    rng.shuffle(&mut histories);
    let n = histories.len();
    let n_train = (n as f64 * train_frac).floor() as usize;
    let n_val = (n as f64 * val_frac).floor() as usize;
    let mut train = histories;
    let mut rest = train.split_off(n_train.min(train.len()));
    let mut test = rest.split_off(n_val.min(rest.len()));
    let mut val = rest;
    train.sort_by(|a, b| a.user.cmp(&b.user));
    val.sort_by(|a, b| a.user.cmp(&b.user));
    test.sort_by(|a, b| a.user.cmp(&b.user));
    Ok((train, val, test))
}

/// Item vocabulary: deterministic index assignment by sorted item id.
#[derive(Debug, Clone)]
pub struct Vocab {
    items: Vec<ItemId>,
    index: HashMap<ItemId, usize>,
}

impl Vocab {
    pub fn build<'a>(histories: impl IntoIterator<Item = &'a UserHistory>) -> Vocab {
        let mut items: Vec<ItemId> = histories
            .into_iter()
            .flat_map(|h| h.baskets.iter().flat_map(|b| b.items.iter().cloned()))
            .collect();
        items.sort_unstable();
        items.dedup();
        let index = items
            .iter()
            .enumerate()
            .map(|(i, it)| (it.clone(), i))
            .collect();
        Vocab { items, index }
    }

    pub fn from_items(items: Vec<ItemId>) -> Vocab {
        let index = items
            .iter()
            .enumerate()
            .map(|(i, it)| (it.clone(), i))
            .collect();
        Vocab { items, index }
    }

    pub fn id(&self, item: &str) -> Option<usize> {
        self.index.get(item).copied()
    }

    pub fn item(&self, id: usize) -> &str {
        &self.items[id]
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[ItemId] {
        &self.items
    }

    /// Order-sensitive FNV-1a over the item list; stored in checkpoints so a
    /// model is never applied against a different vocabulary.
    pub fn hash(&self) -> u64 {
        let mut bytes = Vec::with_capacity(self.items.len() * 8);
        for it in &self.items {
            bytes.extend_from_slice(it.as_bytes());
            bytes.push(0);
        }
        fnv1a64(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f.flush().unwrap();
        f
    }

    #[test]
    fn absolute_schema_groups_by_user_day_and_dedups() {
        let f = write_tmp(
            "user,item,day\n\
             u1,milk,3\n\
             u1,bread,3\n\
             u1,milk,3\n\
             u1,milk,10\n\
             u2,eggs,1\n",
        );
        let (hs, summary) = ingest_csv(f.path(), &CsvSpec::default()).unwrap();
        assert_eq!(summary.rows_total, 5);
        assert_eq!(summary.rows_skipped, 0);
        assert_eq!(summary.users, 2);
        assert_eq!(summary.items, 3);
        assert_eq!(summary.baskets, 3);
        let u1 = &hs[0];
        assert_eq!(u1.user, "u1");
        assert_eq!(u1.baskets.len(), 2);
        assert_eq!(u1.baskets[0].day, 3);
        assert_eq!(u1.baskets[0].items, vec!["bread", "milk"]);
        assert_eq!(u1.baskets[1].items, vec!["milk"]);
    }

    #[test]
    fn dates_are_accepted_as_days() {
        let f = write_tmp(
            "user,item,day\n\
             u1,a,2000-01-01\n\
             u1,b,01/02/2000\n",
        );
        let (hs, _) = ingest_csv(f.path(), &CsvSpec::default()).unwrap();
        let days: Vec<i64> = hs[0].baskets.iter().map(|b| b.day).collect();
        assert_eq!(days[1] - days[0], 1);
    }

    #[test]
    fn malformed_rows_are_skipped_and_counted() {
        let f = write_tmp(
            "user,item,day\n\
             u1,a,1\n\
             ,a,2\n\
             u1,,2\n\
             u1,a,notaday\n\
             u1,a,-5\n\
             u1,\"has,comma\",2\n\
             u1,b,4\n",
        );
        let (hs, summary) = ingest_csv(f.path(), &CsvSpec::default()).unwrap();
        assert_eq!(summary.rows_skipped, 5);
        assert_eq!(hs[0].baskets.len(), 2);
    }

    #[test]
    fn missing_column_is_config_error_and_empty_file_is_data_error() {
        let f = write_tmp("usr,item,day\nu1,a,1\n");
        match ingest_csv(f.path(), &CsvSpec::default()) {
            Err(CaseError::Config(msg)) => assert!(msg.contains("user")),
            other => panic!("expected config error, got {other:?}"),
        }
        let g = write_tmp("user,item,day\n");
        match ingest_csv(g.path(), &CsvSpec::default()) {
            Err(CaseError::Data(_)) => {}
            other => panic!("expected data error, got {other:?}"),
        }
    }

    #[test]
    fn gap_schema_reconstructs_days_by_cumulative_sum() {
        // Gaps (0, 3, 7) -> days 0, 3, 10.
        let f = write_tmp(
            "user,item,order_seq,days_since_prior_order\n\
             u1,a,1,\n\
             u1,b,2,3\n\
             u1,b,3,7\n\
             u1,c,3,7\n",
        );
        let spec = CsvSpec {
            schema: CsvSchema::Gaps,
            ..CsvSpec::default()
        };
        let (hs, _) = ingest_csv(f.path(), &spec).unwrap();
        let days: Vec<i64> = hs[0].baskets.iter().map(|b| b.day).collect();
        assert_eq!(days, vec![0, 3, 10]);
        assert_eq!(hs[0].baskets[2].items, vec!["b", "c"]);
    }

    #[test]
    fn zero_gap_orders_merge_into_one_basket() {
        let f = write_tmp(
            "user,item,order_seq,days_since_prior_order\n\
             u1,a,1,0\n\
             u1,b,2,0\n",
        );
        let spec = CsvSpec {
            schema: CsvSchema::Gaps,
            ..CsvSpec::default()
        };
        let (hs, _) = ingest_csv(f.path(), &spec).unwrap();
        assert_eq!(hs[0].baskets.len(), 1);
        assert_eq!(hs[0].baskets[0].items, vec!["a", "b"]);
    }

    #[test]
    fn history_file_round_trips_exactly() {
        let f = write_tmp(
            "user,item,day\n\
             u2,z,9\n\
             u1,milk,3\n\
             u1,bread,3\n\
             u1,milk,10\n",
        );
        let (hs, _) = ingest_csv(f.path(), &CsvSpec::default()).unwrap();
        let out = tempfile::NamedTempFile::new().unwrap();
        write_history_file(out.path(), &hs).unwrap();
        let back = read_history_file(out.path()).unwrap();
        assert_eq!(hs, back);
        // And the bytes themselves are stable under a second round trip.
        let out2 = tempfile::NamedTempFile::new().unwrap();
        write_history_file(out2.path(), &back).unwrap();
        assert_eq!(
            std::fs::read(out.path()).unwrap(),
            std::fs::read(out2.path()).unwrap()
        );
    }

    #[test]
    fn split_is_seeded_and_partitions_all_users() {
        let hs: Vec<UserHistory> = (0..100)
            .map(|i| UserHistory {
                user: format!("u{i:03}"),
                baskets: vec![Basket { day: 0, items: vec!["a".into()] }],
            })
            .collect();
        let mut rng = Rng::new(1);
        let (tr, va, te) = split_users(hs.clone(), 0.8, 0.1, &mut rng).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (80, 10, 10));
        let mut all: Vec<&str> = tr.iter().chain(&va).chain(&te).map(|h| h.user.as_str()).collect();
        all.sort_unstable();
        assert_eq!(all.len(), 100);
        all.dedup();
        assert_eq!(all.len(), 100, "users duplicated across splits");

        // Same seed, same partition; different seed, (almost surely) different.
        let mut rng_same = Rng::new(1);
        let (tr2, _, _) = split_users(hs.clone(), 0.8, 0.1, &mut rng_same).unwrap();
        assert_eq!(
            tr.iter().map(|h| &h.user).collect::<Vec<_>>(),
            tr2.iter().map(|h| &h.user).collect::<Vec<_>>()
        );
        let mut rng_diff = Rng::new(2);
        let (tr3, _, _) = split_users(hs, 0.8, 0.1, &mut rng_diff).unwrap();
        assert_ne!(
            tr.iter().map(|h| &h.user).collect::<Vec<_>>(),
            tr3.iter().map(|h| &h.user).collect::<Vec<_>>()
        );
    }

    #[test]
    fn bad_split_fractions_are_config_errors() {
        let hs = vec![UserHistory {
            user: "u".into(),
            baskets: vec![Basket { day: 0, items: vec!["a".into()] }],
        }];
        let mut rng = Rng::new(1);
        assert!(matches!(
            split_users(hs, 0.9, 0.2, &mut rng),
            Err(CaseError::Config(_))
        ));
    }

    #[test]
    fn vocab_is_sorted_and_hash_is_order_sensitive() {
        let hs = vec![
            UserHistory {
                user: "u1".into(),
                baskets: vec![Basket { day: 0, items: vec!["b".into(), "c".into()] }],
            },
            UserHistory {
                user: "u2".into(),
                baskets: vec![Basket { day: 0, items: vec!["a".into(), "b".into()] }],
            },
        ];
        let v = Vocab::build(&hs);
        assert_eq!(v.items(), &["a", "b", "c"]);
        assert_eq!(v.id("b"), Some(1));
        assert_eq!(v.id("zzz"), None);
        let w = Vocab::from_items(vec!["c".into(), "b".into(), "a".into()]);
        assert_ne!(v.hash(), w.hash());
    }
}
