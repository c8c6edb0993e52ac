//! Non-learned baselines: per-user purchase frequency (PersonalTop) and
//! temporal-decay user vectors with neighbor fusion (TIFU-kNN).

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{CaseError, Result};
use crate::ingest::{Basket, ItemId, UserHistory, Vocab};
use crate::metrics::Ranker;
use crate::model::rank_candidates;
use crate::signal::Example;

/// Ranks a user's previously purchased items by how often they bought them:
/// count desc, most recent purchase desc, item id asc.
pub struct PersonalTop;

impl Ranker for PersonalTop {
    fn name(&self) -> &'static str {
        "personal_top"
    }

    fn rank_example(&self, ex: &Example, k: usize) -> Result<Vec<ItemId>> {
        let mut idx: Vec<usize> = (0..ex.n_candidates()).collect();
        idx.sort_by(|&a, &b| {
            ex.counts[b]
                .cmp(&ex.counts[a])
                .then(ex.last_days[b].cmp(&ex.last_days[a]))
                .then(ex.candidates[a].cmp(&ex.candidates[b]))
        });
        Ok(idx
            .into_iter()
            .take(k)
            .map(|i| ex.candidates[i].clone())
            .collect())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TifuConfig {
    /// Number of contiguous basket groups.
    pub m: usize,
    /// Within-group decay per basket (most recent basket weighs 1).
    pub r_b: f64,
    /// Across-group decay (most recent group weighs 1).
    pub r_g: f64,
    pub k_nn: usize,
    /// Own-vector weight in the fused score; neighbors get `1 - alpha`.
    pub alpha: f64,
}

impl Default for TifuConfig {
    fn default() -> Self {
        TifuConfig {
            m: 7,
            r_b: 0.9,
            r_g: 0.7,
            k_nn: 300,
            alpha: 0.7,
        }
    }
}

impl TifuConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(CaseError::config("tifu.m must be positive"));
        }
        if !(self.r_b > 0.0 && self.r_b <= 1.0) || !(self.r_g > 0.0 && self.r_g <= 1.0) {
            return Err(CaseError::config("tifu decay rates must lie in (0, 1]"));
        }
        if self.k_nn == 0 {
            return Err(CaseError::config("tifu.k_nn must be positive"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(CaseError::config("tifu.alpha must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Sparse item-frequency vector, indices sorted ascending.
#[derive(Debug, Clone, Default)]
pub struct SparseVec {
    pub entries: Vec<(u32, f64)>,
    pub norm2: f64,
}

impl SparseVec {
    fn from_map(map: HashMap<u32, f64>) -> Self {
        let mut entries: Vec<(u32, f64)> = map.into_iter().filter(|&(_, v)| v != 0.0).collect();
        entries.sort_by_key(|&(i, _)| i);
        let norm2 = entries.iter().map(|&(_, v)| v * v).sum();
        SparseVec { entries, norm2 }
    }

    pub fn get(&self, idx: u32) -> f64 {
        match self.entries.binary_search_by_key(&idx, |&(i, _)| i) {
            Ok(p) => self.entries[p].1,
            Err(_) => 0.0,
        }
    }

    pub fn dot(&self, other: &SparseVec) -> f64 {
        let (mut i, mut j, mut acc) = (0usize, 0usize, 0.0);
        while i < self.entries.len() && j < other.entries.len() {
            let (ia, va) = self.entries[i];
            let (ib, vb) = other.entries[j];
            match ia.cmp(&ib) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    acc += va * vb;
                    i += 1;
                    j += 1;
                }
            }
        }
        acc
    }

    pub fn distance2(&self, other: &SparseVec) -> f64 {
        (self.norm2 + other.norm2 - 2.0 * self.dot(other)).max(0.0)
    }
}

/// Builds one user's decayed frequency vector from baskets in time order.
///
/// The baskets split into `min(m, B)` contiguous groups; when the count does
/// not divide evenly the *earliest* group absorbs the remainder, so recent
/// groups stay small and sharply weighted. Basket weights decay by `r_b`
/// within a group (most recent = 1) and are averaged over the group size;
/// group vectors decay by `r_g` (most recent group = 1) and are averaged
/// over the group count.
pub fn user_vector(baskets: &[&Basket], vocab: &Vocab, cfg: &TifuConfig) -> SparseVec {
    let b = baskets.len();
    if b == 0 {
        return SparseVec::default();
    }
    let m_eff = cfg.m.min(b);
    let base = b / m_eff;
    let rem = b % m_eff;
    let mut acc: HashMap<u32, f64> = HashMap::new();
    let mut offset = 0usize;
    for group in 0..m_eff {
        let size = if group == 0 { base + rem } else { base };
        let group_scale = cfg.r_g.powi((m_eff - 1 - group) as i32) / (size as f64 * m_eff as f64);
        for (j, basket) in baskets[offset..offset + size].iter().enumerate() {
            let w = cfg.r_b.powi((size - 1 - j) as i32) * group_scale;
            for item in &basket.items {
                if let Some(idx) = vocab.id(item) {
                    *acc.entry(idx as u32).or_insert(0.0) += w;
                }
            }
        }
        offset += size;
    }
    SparseVec::from_map(acc)
}

/// TIFU-kNN: the query user's decayed vector is fused with the mean vector
/// of their `k_nn` nearest training users (Euclidean distance, linear scan),
/// and candidates are ranked by the fused frequency.
pub struct TifuKnn<'a> {
    cfg: TifuConfig,
    vocab: &'a Vocab,
    pool_users: Vec<&'a str>,
    pool_vectors: Vec<SparseVec>,
    query_histories: HashMap<&'a str, &'a UserHistory>,
}

impl<'a> TifuKnn<'a> {
    /// `neighbors` supplies the fixed vector pool (typically the training
    /// split, full histories); `queries` the users that will be ranked
    /// (their vectors are rebuilt per example from baskets strictly before
    /// the query day).
    pub fn fit(
        neighbors: &'a [UserHistory],
        queries: &'a [UserHistory],
        vocab: &'a Vocab,
        cfg: TifuConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut pool_users = Vec::with_capacity(neighbors.len());
        let mut pool_vectors = Vec::with_capacity(neighbors.len());
        for h in neighbors {
            let baskets: Vec<&Basket> = h.baskets.iter().collect();
            pool_users.push(h.user.as_str());
            pool_vectors.push(user_vector(&baskets, vocab, &cfg));
        }
        let query_histories = queries.iter().map(|h| (h.user.as_str(), h)).collect();
        Ok(TifuKnn {
            cfg,
            vocab,
            pool_users,
            pool_vectors,
            query_histories,
        })
    }

    /// Fused (own + neighborhood mean) score vector for one query vector.
    pub fn fuse(&self, own: &SparseVec, own_user: &str) -> SparseVec {
        // (dist^2, user, index): user id breaks distance ties deterministically.
        let mut order: Vec<(f64, &str, usize)> = self
            .pool_users
            .iter()
            .zip(&self.pool_vectors)
            .enumerate()
            .filter(|(_, (u, _))| **u != own_user)
            .map(|(i, (u, v))| (own.distance2(v), *u, i))
            .collect();
        order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(b.1)));
        order.truncate(self.cfg.k_nn);
        let mut acc: HashMap<u32, f64> = HashMap::new();
        if order.is_empty() {
            // No neighbors at all: fall back to the pure own vector.
            for &(i, v) in &own.entries {
                acc.insert(i, v);
            }
            return SparseVec::from_map(acc);
        }
        let inv = 1.0 / order.len() as f64;
        for &(_, _, i) in &order {
            for &(idx, v) in &self.pool_vectors[i].entries {
                *acc.entry(idx).or_insert(0.0) += v * inv * (1.0 - self.cfg.alpha);
            }
        }
        for &(idx, v) in &own.entries {
            *acc.entry(idx).or_insert(0.0) += v * self.cfg.alpha;
        }
        SparseVec::from_map(acc)
    }
}

/// One measured row of the inference benchmark.
#[derive(Debug, Clone)]
pub struct BenchRow {
    pub ranker: String,
    pub population: usize,
    pub queries: usize,
    pub seconds_per_query: f64,
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("ranker,population,queries,seconds_per_query\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.9}\n",
            r.ranker, r.population, r.queries, r.seconds_per_query
        ));
    }
    out
}

/// Times `rank_example` over `examples` at each train-population size.
///
/// The factory receives a population size and returns the ranker
/// materialized at that size — TIFUKNN's neighbor pool grows with it, a
/// trained scorer ignores it. Construction is untimed; only query cost is
/// measured. Each population is timed `repeats` times and the fastest pass
/// is reported, which suppresses scheduler noise without averaging in warmup
/// effects.
pub fn bench_inference<'a, F>(
    name: &str,
    mut make: F,
    examples: &[Example],
    populations: &[usize],
    k: usize,
    repeats: usize,
) -> Result<Vec<BenchRow>>
where
    F: FnMut(usize) -> Result<Box<dyn Ranker + 'a>>,
{
    if populations.is_empty() || !populations.windows(2).all(|w| w[0] < w[1]) {
        return Err(CaseError::config(
            "bench populations must be a non-empty strictly ascending list",
        ));
    }
    if examples.is_empty() {
        return Err(CaseError::data("bench_inference needs at least one query example"));
    }
    if repeats == 0 || k == 0 {
        return Err(CaseError::config("bench repeats and k must be positive"));
    }
    let mut rows = Vec::with_capacity(populations.len());
    for &population in populations {
        let ranker = make(population)?;
        // Untimed warmup so first-touch costs (allocation, page faults)
        // don't land in the first repeat.
        ranker.rank_example(&examples[0], k)?;
        let mut best = f64::INFINITY;
        for _ in 0..repeats {
            let start = std::time::Instant::now();
            for ex in examples {
                ranker.rank_example(ex, k)?;
            }
            best = best.min(start.elapsed().as_secs_f64());
        }
        rows.push(BenchRow {
            ranker: name.to_string(),
            population,
            queries: examples.len(),
            seconds_per_query: best / examples.len() as f64,
        });
    }
    Ok(rows)
}

impl Ranker for TifuKnn<'_> {
    fn name(&self) -> &'static str {
        "tifu_knn"
    }

    fn rank_example(&self, ex: &Example, k: usize) -> Result<Vec<ItemId>> {
        let history = self.query_histories.get(ex.user.as_str()).ok_or_else(|| {
            CaseError::data(format!("no history registered for query user `{}`", ex.user))
        })?;
        let before: Vec<&Basket> = history
            .baskets
            .iter()
            .filter(|b| b.day < ex.query_day)
            .collect();
        let own = user_vector(&before, self.vocab, &self.cfg);
        let fused = self.fuse(&own, ex.user.as_str());
        let scores: Vec<f64> = ex
            .candidates
            .iter()
            .map(|item| {
                self.vocab
                    .id(item)
                    .map_or(0.0, |idx| fused.get(idx as u32))
            })
            .collect();
        Ok(rank_candidates(ex, &scores, k)
            .into_iter()
            .map(|i| ex.candidates[i].clone())
            .collect())
    }
}
