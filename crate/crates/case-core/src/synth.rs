//! Synthetic repurchase corpus with known periodic structure.
//!
//! Every user buys a few items on fixed cadences (weekly, biweekly, ...),
//! with per-occurrence day jitter and random missed purchases, plus
//! "distractor" items bought frequently but at completely random days. A
//! cadence-aware model can tell a due periodic item from a frequent
//! distractor; a pure frequency ranker cannot, which is exactly the
//! separation the corpus is built to measure. Ground-truth periods and
//! phases are kept so an oracle ranker can bound attainable accuracy.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::rng::Rng;
use crate::error::{CaseError, Result};
use crate::ingest::{Basket, ItemId, UserHistory, UserId};
use crate::metrics::Ranker;
use crate::model::rank_candidates;
use crate::signal::Example;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_users: usize,
    /// Periodic items per user.
    pub items_per_user: usize,
    /// Candidate cadences, drawn uniformly per (user, item).
    pub periods: Vec<u32>,
    /// Std-dev of the per-occurrence day jitter (rounded normal).
    pub phase_jitter: f64,
    /// Probability that any single due purchase is skipped.
    pub p_miss: f64,
    pub distractors_per_user: usize,
    /// Distractor purchase count as a multiple of the user's mean periodic
    /// purchase count; days are uniform over the horizon.
    pub distractor_freq_mult: f64,
    pub horizon_days: u32,
    /// Size of the shared periodic item pool.
    pub periodic_pool: usize,
    /// Size of the shared distractor item pool.
    pub distractor_pool: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_users: 2000,
            items_per_user: 4,
            periods: vec![7, 14, 28],
            phase_jitter: 1.0,
            p_miss: 0.1,
            distractors_per_user: 4,
            distractor_freq_mult: 2.0,
            horizon_days: 730,
            periodic_pool: 200,
            distractor_pool: 200,
        }
    }
}

impl SynthSpec {
    /// Loads a standalone spec file (TOML, same keys as the `synth.*`
    /// section of the run config).
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CaseError::config(format!("cannot read synth spec {}: {e}", path.display()))
        })?;
        toml::from_str(&text)
            .map_err(|e| CaseError::config(format!("synth spec {}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_users == 0 || self.items_per_user == 0 {
            return Err(CaseError::config("synth corpus needs users and items"));
        }
        if self.periods.is_empty() || self.periods.iter().any(|&p| p < 2) {
            return Err(CaseError::config("synth.periods must all be at least 2 days"));
        }
        let max_period = *self.periods.iter().max().unwrap();
        if self.horizon_days < 2 * max_period {
            return Err(CaseError::config(format!(
                "synth.horizon_days = {} must cover at least two of the longest period ({max_period})",
                self.horizon_days
            )));
        }
        if !(0.0..=1.0).contains(&self.p_miss) {
            return Err(CaseError::config("synth.p_miss must lie in [0, 1]"));
        }
        if self.phase_jitter < 0.0 {
            return Err(CaseError::config("synth.phase_jitter must be non-negative"));
        }
        if self.distractor_freq_mult < 0.0 {
            return Err(CaseError::config("synth.distractor_freq_mult must be non-negative"));
        }
        if self.horizon_days == 0 {
            return Err(CaseError::config("synth.horizon_days must be positive"));
        }
        if self.periodic_pool < self.items_per_user {
            return Err(CaseError::config(
                "synth.periodic_pool smaller than items_per_user",
            ));
        }
        if self.distractor_pool < self.distractors_per_user {
            return Err(CaseError::config(
                "synth.distractor_pool smaller than distractors_per_user",
            ));
        }
        Ok(())
    }
}

/// Ground-truth cadence of every periodic (user, item) pair.
#[derive(Debug, Clone, Default)]
pub struct SynthTruth {
    /// `(user, item) -> (period, phase)`; distractors are absent.
    pub cadences: BTreeMap<(UserId, ItemId), (u32, u32)>,
}

impl SynthTruth {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "user,item,period,phase")?;
        for ((user, item), (period, phase)) in &self.cadences {
            writeln!(f, "{user},{item},{period},{phase}")?;
        }
        Ok(())
    }
}

/// Days from `day` to the closest scheduled multiple (phase + k·period),
/// looking both backward and forward.
pub fn due_distance(day: i64, period: u32, phase: u32) -> i64 {
    let p = i64::from(period);
    let rem = (day - i64::from(phase)).rem_euclid(p);
    rem.min(p - rem)
}

fn due_items(cadences: &[(ItemId, u32, u32)], day: i64) -> Vec<ItemId> {
    cadences
        .iter()
        .filter(|(_, period, phase)| due_distance(day, *period, *phase) <= 1)
        .map(|(item, _, _)| item.clone())
        .collect()
}

fn pick_distinct(rng: &mut Rng, pool: usize, n: usize) -> Vec<usize> {
    // Floyd's algorithm would do, but pools are small; sample-and-retry
    // keeps the draw order (and thus the stream) easy to reason about.
    let mut picked = Vec::with_capacity(n);
    while picked.len() < n {
        let c = rng.below(pool);
        if !picked.contains(&c) {
            picked.push(c);
        }
    }
    picked
}

/// Generates the corpus. Each user's stream is forked from the corpus seed
/// by user index, so regenerating with the same spec and seed is
/// reproducible item for item.
pub fn generate(spec: &SynthSpec, seed: u64) -> Result<(Vec<UserHistory>, SynthTruth)> {
    spec.validate()?;
    let root = Rng::new(seed);
    let mut truth = SynthTruth::default();
    let mut histories = Vec::with_capacity(spec.n_users);
    let horizon = spec.horizon_days as i64;
    for u in 0..spec.n_users {
        let user: UserId = format!("su{u:05}");
        let mut rng = root.fork_keyed("synth.user", &[u as u64]);
        let mut by_day: HashMap<i64, Vec<ItemId>> = HashMap::new();

        let periodic = pick_distinct(&mut rng, spec.periodic_pool, spec.items_per_user);
        let mut cadences: Vec<(ItemId, u32, u32)> = Vec::with_capacity(spec.items_per_user);
        let mut mean_count = 0.0;
        for pi in periodic {
            let item: ItemId = format!("per{pi:04}");
            let period = spec.periods[rng.below(spec.periods.len())];
            let phase = rng.below(period as usize) as u32;
            truth
                .cadences
                .insert((user.clone(), item.clone()), (period, phase));
            let mut k = 0i64;
            loop {
                let due = phase as i64 + k * period as i64;
                if due >= horizon {
                    break;
                }
                k += 1;
                let jitter = (rng.normal() * spec.phase_jitter).round() as i64;
                let day = due + jitter;
                let miss = rng.uniform() < spec.p_miss;
                if !miss && (0..horizon).contains(&day) {
                    by_day.entry(day).or_default().push(item.clone());
                }
            }
            cadences.push((item, period, phase));
            mean_count += horizon as f64 / period as f64;
        }
        mean_count /= spec.items_per_user as f64;

        let distractors = pick_distinct(&mut rng, spec.distractor_pool, spec.distractors_per_user);
        let n_buys = (mean_count * spec.distractor_freq_mult).round() as usize;
        for di in distractors {
            let item: ItemId = format!("dis{di:04}");
            for _ in 0..n_buys {
                let day = rng.below(horizon as usize) as i64;
                by_day.entry(day).or_default().push(item.clone());
            }
        }

        // The final basket is constructed, not sampled: at the first day at
        // or past the horizon where any periodic item is due (scheduled
        // within ±1 day), it holds exactly those due items. Label noise
        // from jitter and misses therefore never reaches the target.
        let max_period = i64::from(*spec.periods.iter().max().unwrap());
        let mut query = None;
        'search: for q in horizon..horizon + 2 * max_period {
            let due = due_items(&cadences, q);
            if !due.is_empty() {
                query = Some((q, due));
                break 'search;
            }
        }
        let (query_day, mut due) =
            query.expect("a due day always exists within one full period of the horizon");
        due.sort_unstable();
        let mut baskets: Vec<Basket> = by_day
            .into_iter()
            .map(|(day, mut items)| {
                items.sort_unstable();
                items.dedup();
                Basket { day, items }
            })
            .collect();
        baskets.push(Basket {
            day: query_day,
            items: due,
        });
        baskets.sort_by_key(|b| b.day);
        histories.push(UserHistory { user, baskets });
    }
    if histories.is_empty() {
        return Err(CaseError::data("synthetic corpus came out empty"));
    }
    Ok((histories, truth))
}

/// Upper-bound ranker: scores each candidate by closeness to its true due
/// day (negated distance to the nearest multiple of the period, counted
/// from the phase). Distractors have no cadence and rank below every
/// periodic item.
pub struct OracleRanker<'a> {
    pub truth: &'a SynthTruth,
}

impl Ranker for OracleRanker<'_> {
    fn name(&self) -> &'static str {
        "cadence_oracle"
    }

    fn rank_example(&self, ex: &Example, k: usize) -> Result<Vec<ItemId>> {
        // Distractors have no cadence; a floor below any real distance
        // keeps them behind every periodic item.
        let floor = -1e18;
        let scores: Vec<f64> = ex
            .candidates
            .iter()
            .map(|item| {
                match self.truth.cadences.get(&(ex.user.clone(), item.clone())) {
                    Some(&(period, phase)) => -(due_distance(ex.query_day, period, phase) as f64),
                    None => floor,
                }
            })
            .collect();
        Ok(rank_candidates(ex, &scores, k)
            .into_iter()
            .map(|i| ex.candidates[i].clone())
            .collect())
    }
}
