//! Mini-batch training loop: per-example gradient tapes, averaged batch
//! gradients, one Adam step per batch, per-epoch validation and
//! checkpointing with a best-epoch alias.

use std::path::Path;
use std::rc::Rc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::adam::{clip_global_norm, Adam, AdamConfig};
use crate::autodiff::rng::Rng;
use crate::autodiff::tape::Tape;
use crate::autodiff::tensor::Tensor;
use crate::checkpoint;
use crate::error::{CaseError, Result};
use crate::ingest::Vocab;
use crate::metrics::{evaluate, Ranker};
use crate::model::{case_forward, example_loss, prepare_example, CaseParams, CaseRanker};
use crate::scalar::Scalar;
use crate::signal::Example;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub dropout: f64,
    /// `metric@k`, e.g. `recall@10`; decides which epoch's weights win.
    pub selection_metric: String,
    /// Global-norm clip threshold; 0 disables clipping.
    pub grad_clip_norm: f64,
    /// Decoupled (multiplicative) weight decay instead of the default
    /// L2-coupled form.
    pub decoupled_weight_decay: bool,
    /// Suppress per-epoch progress lines.
    pub quiet: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            lr: 1e-3,
            weight_decay: 1e-5,
            batch_size: 64,
            dropout: 0.1,
            selection_metric: "recall@10".into(),
            grad_clip_norm: 0.0,
            decoupled_weight_decay: false,
            quiet: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionKind {
    Precision,
    Recall,
    Ndcg,
}

/// Parses `metric@k` selection strings.
pub fn parse_selection(s: &str) -> Result<(SelectionKind, usize)> {
    let (name, k) = s
        .split_once('@')
        .ok_or_else(|| CaseError::config(format!("selection metric `{s}` is not of the form metric@k")))?;
    let kind = match name {
        "precision" => SelectionKind::Precision,
        "recall" => SelectionKind::Recall,
        "ndcg" => SelectionKind::Ndcg,
        other => {
            return Err(CaseError::config(format!(
                "unknown selection metric `{other}` (expected precision, recall, or ndcg)"
            )))
        }
    };
    let k: usize = k
        .parse()
        .map_err(|_| CaseError::config(format!("selection cutoff `{k}` is not a number")))?;
    if k == 0 {
        return Err(CaseError::config("selection cutoff must be positive"));
    }
    Ok((kind, k))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(CaseError::config("train.epochs must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(CaseError::config("train.lr must be positive"));
        }
        if self.weight_decay < 0.0 {
            return Err(CaseError::config("train.weight_decay must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(CaseError::config("train.batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CaseError::config("train.dropout must lie in [0, 1)"));
        }
        if self.grad_clip_norm < 0.0 {
            return Err(CaseError::config("train.grad_clip_norm must be non-negative"));
        }
        parse_selection(&self.selection_metric)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    /// NaN when there was nothing to validate on.
    pub val_metric: f64,
    pub seconds: f64,
}

pub struct TrainOutcome<F: Scalar> {
    pub log: Vec<EpochRow>,
    pub best_epoch: usize,
    /// Selection value of the best epoch (NaN when selected by train loss).
    pub best_metric: f64,
    pub best_params: CaseParams<F>,
}

fn training_log_csv(rows: &[EpochRow]) -> String {
    let mut out = String::from("epoch,train_loss,val_metric,seconds\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.3}\n",
            r.epoch, r.train_loss, r.val_metric, r.seconds
        ));
    }
    out
}

/// Trains `params` in place and returns the per-epoch log plus a deep copy
/// of the best epoch's weights. When `out_dir` is given, every epoch is
/// checkpointed (`epoch_NNN.ckpt`), the best epoch is byte-copied to
/// `best.ckpt`, and the log lands in `training_log.csv`.
pub fn train<F: Scalar>(
    params: &mut CaseParams<F>,
    train_examples: &[Example],
    val_examples: &[Example],
    vocab: &Vocab,
    cfg: &TrainConfig,
    root_rng: &Rng,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome<F>> {
    cfg.validate()?;
    if train_examples.is_empty() {
        return Err(CaseError::data("no training examples"));
    }
    let (sel_kind, sel_k) = parse_selection(&cfg.selection_metric)?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut adam: Adam<F> = Adam::new(AdamConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        decoupled_weight_decay: cfg.decoupled_weight_decay,
        ..AdamConfig::default()
    });

    let select_on_loss = val_examples.is_empty();
    let mut log: Vec<EpochRow> = Vec::with_capacity(cfg.epochs);
    let mut best_epoch = 0usize;
    let mut best_key = f64::NEG_INFINITY;
    let mut best_params = params.deep_clone();
    let n = train_examples.len();

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..n).collect();
        root_rng
            .fork_keyed("train.shuffle", &[epoch as u64])
            .shuffle(&mut order);

        let mut epoch_loss = 0.0f64;
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut grad_sum: Option<Vec<Tensor<F>>> = None;
            for &ei in batch {
                let ex = &train_examples[ei];
                let prep = prepare_example(ex, vocab, &params.config, None)?;
                let tape: Tape<F> = Tape::new();
                let (staged, ids) = params.stage_with_ids(&tape)?;
                let mut drop_rng =
                    root_rng.fork_keyed("train.dropout", &[epoch as u64, ei as u64]);
                let art = case_forward(
                    &tape,
                    &staged,
                    &params.config,
                    &prep,
                    cfg.dropout,
                    Some(&mut drop_rng),
                    true,
                )?;
                let loss = example_loss(&tape, &art, &prep)?;
                let loss_v = tape.value(loss).first().as_f64();
                if !loss_v.is_finite() {
                    return Err(CaseError::Training(format!(
                        "non-finite loss ({loss_v}) at epoch {epoch}, batch {bi}, user {}",
                        ex.user
                    )));
                }
                epoch_loss += loss_v;
                let mut grads = tape.backward(loss)?;
                match &mut grad_sum {
                    None => {
                        grad_sum = Some(
                            ids.iter()
                                .map(|id| {
                                    grads.take(*id).unwrap_or_else(|| {
                                        Tensor::zeros(tape.value(*id).shape())
                                    })
                                })
                                .collect(),
                        );
                    }
                    Some(gs) => {
                        for (g, id) in gs.iter_mut().zip(&ids) {
                            if let Some(d) = grads.take(*id) {
                                for (a, &b) in g.data_mut().iter_mut().zip(d.data()) {
                                    *a += b;
                                }
                            }
                        }
                    }
                }
            }
            let mut gs = grad_sum.expect("batches are never empty");
            let inv = F::from_f64(1.0 / batch.len() as f64);
            for g in &mut gs {
                for v in g.data_mut() {
                    *v *= inv;
                }
            }
            if cfg.grad_clip_norm > 0.0 {
                clip_global_norm(&mut gs, cfg.grad_clip_norm);
            }
            let mut slots: Vec<&mut Rc<Tensor<F>>> =
                params.named_mut().into_iter().map(|(_, t)| t).collect();
            adam.step(&mut slots, &gs).map_err(|e| {
                CaseError::Training(format!("epoch {epoch}, batch {bi}: {e}"))
            })?;
        }
        let train_loss = epoch_loss / n as f64;

        let val_metric = if select_on_loss {
            f64::NAN
        } else {
            let ranker = CaseRanker {
                params,
                vocab,
            };
            let report = evaluate(&ranker as &dyn Ranker, val_examples, &[sel_k])?;
            let row = report.per_k[&sel_k];
            match sel_kind {
                SelectionKind::Precision => row.precision,
                SelectionKind::Recall => row.recall,
                SelectionKind::Ndcg => row.ndcg,
            }
        };
        let seconds = started.elapsed().as_secs_f64();
        log.push(EpochRow {
            epoch,
            train_loss,
            val_metric,
            seconds,
        });
        if !cfg.quiet {
            eprintln!(
                "epoch {epoch:>3}/{}  loss {train_loss:.4}  {} {}  ({seconds:.1}s)",
                cfg.epochs,
                cfg.selection_metric,
                if val_metric.is_nan() {
                    "n/a".to_string()
                } else {
                    format!("{val_metric:.4}")
                }
            );
        }

        if let Some(dir) = out_dir {
            let path = dir.join(format!("epoch_{epoch:03}.ckpt"));
            let metric = (!val_metric.is_nan()).then_some(val_metric);
            checkpoint::save(&path, params, vocab.hash(), epoch, metric)?;
        }
        let key = if select_on_loss { -train_loss } else { val_metric };
        if key > best_key {
            best_key = key;
            best_epoch = epoch;
            best_params = params.deep_clone();
        }
    }

    if let Some(dir) = out_dir {
        let src = dir.join(format!("epoch_{best_epoch:03}.ckpt"));
        std::fs::copy(&src, dir.join("best.ckpt"))?;
        std::fs::write(dir.join("training_log.csv"), training_log_csv(&log))?;
    }
    Ok(TrainOutcome {
        log,
        best_epoch,
        best_metric: if select_on_loss { f64::NAN } else { best_key },
        best_params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::signal::build_examples;
    use crate::synth::{generate, SynthSpec};

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            t: 56,
            scales: vec![7, 14],
            filters_per_scale: 2,
            d_c: 12,
            d_e: 12,
            d_h: 24,
            induced_points: 4,
            heads: 2,
            blocks: 1,
            ..ModelConfig::default()
        }
    }

    fn tiny_corpus(n_users: usize, seed: u64) -> (Vec<Example>, Vocab) {
        let spec = SynthSpec {
            n_users,
            horizon_days: 120,
            periodic_pool: 40,
            distractor_pool: 40,
            ..SynthSpec::default()
        };
        let (histories, _) = generate(&spec, seed).unwrap();
        let vocab = Vocab::build(&histories);
        let (examples, _) = build_examples(&histories, 56, 64);
        (examples, vocab)
    }

    fn tiny_train_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 16,
            quiet: true,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn selection_metric_parser() {
        assert_eq!(parse_selection("recall@10").unwrap(), (SelectionKind::Recall, 10));
        assert_eq!(parse_selection("ndcg@5").unwrap(), (SelectionKind::Ndcg, 5));
        assert_eq!(
            parse_selection("precision@1").unwrap(),
            (SelectionKind::Precision, 1)
        );
        assert!(parse_selection("recall").is_err());
        assert!(parse_selection("auc@10").is_err());
        assert!(parse_selection("recall@0").is_err());
        assert!(parse_selection("recall@x").is_err());
    }

    #[test]
    fn loss_falls_on_learnable_corpus() {
        let (examples, vocab) = tiny_corpus(40, 5);
        let (tr, val) = examples.split_at(30);
        let mut rng = Rng::new(77);
        let mut params: CaseParams<f32> =
            CaseParams::init(tiny_model(), vocab.len(), &mut rng).unwrap();
        let root = Rng::new(77).fork("train");
        let out = train(&mut params, tr, val, &vocab, &tiny_train_cfg(8), &root, None).unwrap();
        assert_eq!(out.log.len(), 8);
        let first = out.log.first().unwrap().train_loss;
        let last = out.log.last().unwrap().train_loss;
        assert!(last.is_finite() && first.is_finite());
        assert!(last < first, "loss did not fall: {first} -> {last}");
        assert!(out.best_epoch >= 1);
    }

    #[test]
    fn same_seed_gives_identical_weights() {
        let (examples, vocab) = tiny_corpus(24, 6);
        let (tr, val) = examples.split_at(18);
        let run = || {
            let mut rng = Rng::new(123);
            let mut params: CaseParams<f32> =
                CaseParams::init(tiny_model(), vocab.len(), &mut rng).unwrap();
            let root = Rng::new(123).fork("train");
            let out =
                train(&mut params, tr, val, &vocab, &tiny_train_cfg(3), &root, None).unwrap();
            (params, out)
        };
        let (p1, o1) = run();
        let (p2, o2) = run();
        for ((_, a), (_, b)) in p1.named().iter().zip(p2.named()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits(), "weights diverged across identical runs");
            }
        }
        for (r1, r2) in o1.log.iter().zip(&o2.log) {
            assert_eq!(r1.train_loss.to_bits(), r2.train_loss.to_bits());
            assert_eq!(r1.val_metric.to_bits(), r2.val_metric.to_bits());
        }
    }

    #[test]
    fn best_epoch_is_argmax_of_logged_metric() {
        let (examples, vocab) = tiny_corpus(30, 7);
        let (tr, val) = examples.split_at(22);
        let mut rng = Rng::new(9);
        let mut params: CaseParams<f32> =
            CaseParams::init(tiny_model(), vocab.len(), &mut rng).unwrap();
        let root = Rng::new(9).fork("train");
        let out = train(&mut params, tr, val, &vocab, &tiny_train_cfg(5), &root, None).unwrap();
        let argmax = out
            .log
            .iter()
            .max_by(|a, b| {
                a.val_metric
                    .partial_cmp(&b.val_metric)
                    .unwrap()
                    .then(b.epoch.cmp(&a.epoch)) // first maximum wins
            })
            .unwrap();
        assert_eq!(out.best_epoch, argmax.epoch);
        assert_eq!(out.best_metric, argmax.val_metric);
    }

    #[test]
    fn checkpoints_and_log_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let (examples, vocab) = tiny_corpus(20, 8);
        let (tr, val) = examples.split_at(14);
        let mut rng = Rng::new(4);
        let mut params: CaseParams<f32> =
            CaseParams::init(tiny_model(), vocab.len(), &mut rng).unwrap();
        let root = Rng::new(4).fork("train");
        let out = train(
            &mut params,
            tr,
            val,
            &vocab,
            &tiny_train_cfg(3),
            &root,
            Some(dir.path()),
        )
        .unwrap();
        for e in 1..=3 {
            assert!(dir.path().join(format!("epoch_{e:03}.ckpt")).exists());
        }
        let best = std::fs::read(dir.path().join("best.ckpt")).unwrap();
        let best_epoch =
            std::fs::read(dir.path().join(format!("epoch_{:03}.ckpt", out.best_epoch))).unwrap();
        assert_eq!(best, best_epoch, "best.ckpt must be a byte-copy of its epoch");
        let log = std::fs::read_to_string(dir.path().join("training_log.csv")).unwrap();
        assert!(log.starts_with("epoch,train_loss,val_metric,seconds\n"));
        assert_eq!(log.lines().count(), 4);

        // The copied checkpoint loads back to the reported best weights.
        let (loaded, manifest) = checkpoint::load::<f32>(&dir.path().join("best.ckpt")).unwrap();
        assert_eq!(manifest.epoch, out.best_epoch);
        for ((_, a), (_, b)) in loaded.named().iter().zip(out.best_params.named()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn empty_val_selects_on_train_loss() {
        let (examples, vocab) = tiny_corpus(16, 10);
        let mut rng = Rng::new(2);
        let mut params: CaseParams<f32> =
            CaseParams::init(tiny_model(), vocab.len(), &mut rng).unwrap();
        let root = Rng::new(2).fork("train");
        let out = train(
            &mut params,
            &examples,
            &[],
            &vocab,
            &tiny_train_cfg(4),
            &root,
            None,
        )
        .unwrap();
        assert!(out.log.iter().all(|r| r.val_metric.is_nan()));
        let arg_min = out
            .log
            .iter()
            .min_by(|a, b| {
                a.train_loss
                    .partial_cmp(&b.train_loss)
                    .unwrap()
                    .then(a.epoch.cmp(&b.epoch))
            })
            .unwrap();
        assert_eq!(out.best_epoch, arg_min.epoch);
    }
}
