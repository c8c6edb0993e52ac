//! The CASE scoring model.
//!
//! Each candidate item contributes one row: a cadence encoding of its binary
//! calendar signal (shared multi-scale strided 1-d CNN + two fully connected
//! layers) concatenated with a learned item embedding. The rows of a user's
//! candidate set then pass through a stack of induced set-attention blocks
//! (ISAB) — attention through a small set of learned induced points, so cost
//! stays linear in the set size — and a two-layer MLP scores each row. The
//! whole construction is permutation-equivariant: reordering candidates
//! reorders scores.

use std::collections::HashMap;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::rng::Rng;
use crate::autodiff::tape::{NodeId, Tape};
use crate::autodiff::tensor::Tensor;
use crate::error::{CaseError, Result};
use crate::ingest::Vocab;
use crate::metrics::Ranker;
use crate::scalar::Scalar;
use crate::signal::Example;

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SetEncoderKind {
    Isab,
    /// Mean-pooling permutation-equivariant layers; ablation stand-in for ISAB.
    PermEqMean,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Length of the calendar window in days.
    pub t: usize,
    /// Kernel widths; stride equals width (non-overlapping windows).
    pub scales: Vec<usize>,
    pub filters_per_scale: usize,
    /// Cadence encoding width.
    pub d_c: usize,
    /// Item embedding width.
    pub d_e: usize,
    /// Set-encoder (hidden) width.
    pub d_h: usize,
    pub induced_points: usize,
    pub heads: usize,
    pub blocks: usize,
    pub use_cnn: bool,
    pub use_set_encoder: bool,
    pub use_item_embedding: bool,
    pub set_encoder: SetEncoderKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            t: 364,
            scales: vec![7, 14, 28, 91, 182],
            filters_per_scale: 1,
            d_c: 128,
            d_e: 128,
            d_h: 256,
            induced_points: 32,
            heads: 4,
            blocks: 2,
            use_cnn: true,
            use_set_encoder: true,
            use_item_embedding: true,
            set_encoder: SetEncoderKind::Isab,
        }
    }
}

impl ModelConfig {
    /// Length of the concatenated conv feature vector
    /// (`filters_per_scale * sum over scales of floor(t / w)`).
    pub fn conv_feature_len(&self) -> usize {
        self.filters_per_scale * self.scales.iter().map(|w| self.t / w).sum::<usize>()
    }

    pub fn head_dim(&self) -> usize {
        self.d_h / self.heads
    }

    pub fn needs_adapter(&self) -> bool {
        self.d_c + self.d_e != self.d_h
    }

    /// Validates the configuration; returns non-fatal warnings.
    pub fn validate(&self) -> Result<Vec<String>> {
        let mut warnings = Vec::new();
        if self.t == 0 {
            return Err(CaseError::config("model.t must be positive"));
        }
        if self.scales.is_empty() {
            return Err(CaseError::config("model.scales must not be empty"));
        }
        for &w in &self.scales {
            if w == 0 || w > self.t {
                return Err(CaseError::config(format!(
                    "scale {w} incompatible with window t={}",
                    self.t
                )));
            }
            if !self.t.is_multiple_of(w) {
                warnings.push(format!(
                    "window t={} not divisible by scale {w}; {} oldest days are ignored at that scale",
                    self.t,
                    self.t % w
                ));
            }
        }
        if self.filters_per_scale == 0 {
            return Err(CaseError::config("model.filters_per_scale must be positive"));
        }
        if self.d_c == 0 || self.d_e == 0 || self.d_h == 0 {
            return Err(CaseError::config("model dimensions must be positive"));
        }
        if self.heads == 0 || !self.d_h.is_multiple_of(self.heads) {
            return Err(CaseError::config(format!(
                "d_h={} must be divisible by heads={}",
                self.d_h, self.heads
            )));
        }
        if self.induced_points == 0 {
            return Err(CaseError::config("model.induced_points must be positive"));
        }
        if self.blocks == 0 {
            return Err(CaseError::config("model.blocks must be positive"));
        }
        if !self.use_cnn && !self.use_item_embedding {
            return Err(CaseError::config(
                "at least one of use_cnn / use_item_embedding must be enabled",
            ));
        }
        Ok(warnings)
    }
}

/// Parameter tensors are reference-counted so staging them onto a tape is
/// O(1) per tensor; the optimizer mutates them in place via copy-on-write
/// (unique once tapes are dropped).
pub type P<F> = Rc<Tensor<F>>;

#[derive(Debug, Clone)]
pub struct MabParams<F: Scalar> {
    pub wq: P<F>,
    pub bq: P<F>,
    pub wk: P<F>,
    pub bk: P<F>,
    pub wv: P<F>,
    pub bv: P<F>,
    pub wo: P<F>,
    pub bo: P<F>,
    pub wf: P<F>,
    pub bf: P<F>,
    pub ln1_g: P<F>,
    pub ln1_b: P<F>,
    pub ln2_g: P<F>,
    pub ln2_b: P<F>,
}

#[derive(Debug, Clone)]
pub struct IsabBlockParams<F: Scalar> {
    pub induced: P<F>,
    pub mab1: MabParams<F>,
    pub mab2: MabParams<F>,
}

#[derive(Debug, Clone)]
pub struct PermEqLayerParams<F: Scalar> {
    pub w_self: P<F>,
    pub w_mean: P<F>,
    pub bias: P<F>,
}

#[derive(Debug, Clone)]
pub enum EncoderParams<F: Scalar> {
    Isab(Vec<IsabBlockParams<F>>),
    PermEq(Vec<PermEqLayerParams<F>>),
    None,
}

#[derive(Debug, Clone)]
pub struct CadenceParams<F: Scalar> {
    /// One `[filters, width]` kernel plus `[filters]` bias per scale.
    pub kernels: Vec<P<F>>,
    pub biases: Vec<P<F>>,
    pub fc1_w: P<F>,
    pub fc1_b: P<F>,
    pub fc2_w: P<F>,
    pub fc2_b: P<F>,
}

#[derive(Debug, Clone)]
pub struct ScorerParams<F: Scalar> {
    pub w1: P<F>,
    pub b1: P<F>,
    pub w2: P<F>,
    pub b2: P<F>,
}

#[derive(Debug, Clone)]
pub struct CaseParams<F: Scalar> {
    pub config: ModelConfig,
    pub vocab_len: usize,
    pub cadence: Option<CadenceParams<F>>,
    pub embedding: Option<P<F>>,
    pub adapter: Option<(P<F>, P<F>)>,
    pub encoder: EncoderParams<F>,
    pub scorer: ScorerParams<F>,
}

fn glorot<F: Scalar>(rng: &mut Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> P<F> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let len: usize = shape.iter().product();
    let data = (0..len)
        .map(|_| F::from_f64((rng.uniform() * 2.0 - 1.0) * limit))
        .collect();
    Rc::new(Tensor::from_vec(shape, data))
}

fn small_normal<F: Scalar>(rng: &mut Rng, shape: &[usize]) -> P<F> {
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| F::from_f64(rng.normal() * 0.02)).collect();
    Rc::new(Tensor::from_vec(shape, data))
}

fn zeros<F: Scalar>(shape: &[usize]) -> P<F> {
    Rc::new(Tensor::zeros(shape))
}

fn ones<F: Scalar>(shape: &[usize]) -> P<F> {
    Rc::new(Tensor::filled(shape, F::one()))
}

fn init_mab<F: Scalar>(rng: &mut Rng, d: usize) -> MabParams<F> {
    MabParams {
        wq: glorot(rng, &[d, d], d, d),
        bq: zeros(&[d]),
        wk: glorot(rng, &[d, d], d, d),
        bk: zeros(&[d]),
        wv: glorot(rng, &[d, d], d, d),
        bv: zeros(&[d]),
        wo: glorot(rng, &[d, d], d, d),
        bo: zeros(&[d]),
        wf: glorot(rng, &[d, d], d, d),
        bf: zeros(&[d]),
        ln1_g: ones(&[d]),
        ln1_b: zeros(&[d]),
        ln2_g: ones(&[d]),
        ln2_b: zeros(&[d]),
    }
}

impl<F: Scalar> CaseParams<F> {
    /// Seeded initialization: Glorot-uniform weights, zero biases, small
    /// normal embeddings and induced points, unit layer-norm gains.
    pub fn init(config: ModelConfig, vocab_len: usize, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        if config.use_item_embedding && vocab_len == 0 {
            return Err(CaseError::config("cannot build an item embedding over an empty vocabulary"));
        }
        let d = config.d_h;
        let cadence = config.use_cnn.then(|| {
            let feat = config.conv_feature_len();
            let f = config.filters_per_scale;
            CadenceParams {
                kernels: config
                    .scales
                    .iter()
                    .map(|&w| glorot(rng, &[f, w], w, f))
                    .collect(),
                biases: config.scales.iter().map(|_| zeros(&[f])).collect(),
                fc1_w: glorot(rng, &[feat, config.d_c], feat, config.d_c),
                fc1_b: zeros(&[config.d_c]),
                fc2_w: glorot(rng, &[config.d_c, config.d_c], config.d_c, config.d_c),
                fc2_b: zeros(&[config.d_c]),
            }
        });
        let embedding = config
            .use_item_embedding
            .then(|| small_normal(rng, &[vocab_len, config.d_e]));
        let adapter = config.needs_adapter().then(|| {
            let din = config.d_c + config.d_e;
            (glorot(rng, &[din, d], din, d), zeros::<F>(&[d]))
        });
        let encoder = if !config.use_set_encoder {
            EncoderParams::None
        } else {
            match config.set_encoder {
                SetEncoderKind::Isab => EncoderParams::Isab(
                    (0..config.blocks)
                        .map(|_| IsabBlockParams {
                            induced: small_normal(rng, &[config.induced_points, d]),
                            mab1: init_mab(rng, d),
                            mab2: init_mab(rng, d),
                        })
                        .collect(),
                ),
                SetEncoderKind::PermEqMean => EncoderParams::PermEq(
                    (0..config.blocks)
                        .map(|_| PermEqLayerParams {
                            w_self: glorot(rng, &[d, d], d, d),
                            w_mean: glorot(rng, &[d, d], d, d),
                            bias: zeros(&[d]),
                        })
                        .collect(),
                ),
            }
        };
        let hidden = (config.d_h / 2).max(1);
        let scorer = ScorerParams {
            w1: glorot(rng, &[d, hidden], d, hidden),
            b1: zeros(&[hidden]),
            w2: glorot(rng, &[hidden, 1], hidden, 1),
            b2: zeros(&[1]),
        };
        Ok(CaseParams {
            config,
            vocab_len,
            cadence,
            embedding,
            adapter,
            encoder,
            scorer,
        })
    }

    /// All parameter tensors with stable names, in the canonical order used
    /// by staging, the optimizer, checkpoints, and gradient checks.
    pub fn named(&self) -> Vec<(String, P<F>)> {
        let mut out = Vec::new();
        self.walk(|name, t| out.push((name, Rc::clone(t))));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut P<F>)> {
        // Mirrors `walk`; kept adjacent so the orders cannot drift apart.
        let mut out: Vec<(String, &mut P<F>)> = Vec::new();
        let cfg_scales: Vec<usize> = self.config.scales.clone();
        if let Some(c) = &mut self.cadence {
            for (i, (k, b)) in c.kernels.iter_mut().zip(c.biases.iter_mut()).enumerate() {
                let w = cfg_scales[i];
                out.push((format!("cadence.k{w}.kernel"), k));
                out.push((format!("cadence.k{w}.bias"), b));
            }
            out.push(("cadence.fc1.weight".into(), &mut c.fc1_w));
            out.push(("cadence.fc1.bias".into(), &mut c.fc1_b));
            out.push(("cadence.fc2.weight".into(), &mut c.fc2_w));
            out.push(("cadence.fc2.bias".into(), &mut c.fc2_b));
        }
        if let Some(e) = &mut self.embedding {
            out.push(("embedding.table".into(), e));
        }
        if let Some((w, b)) = &mut self.adapter {
            out.push(("adapter.weight".into(), w));
            out.push(("adapter.bias".into(), b));
        }
        match &mut self.encoder {
            EncoderParams::Isab(blocks) => {
                for (i, blk) in blocks.iter_mut().enumerate() {
                    out.push((format!("isab{i}.induced"), &mut blk.induced));
                    for (m, mab) in [(1usize, &mut blk.mab1), (2usize, &mut blk.mab2)] {
                        let p = format!("isab{i}.mab{m}");
                        out.push((format!("{p}.wq"), &mut mab.wq));
                        out.push((format!("{p}.bq"), &mut mab.bq));
                        out.push((format!("{p}.wk"), &mut mab.wk));
                        out.push((format!("{p}.bk"), &mut mab.bk));
                        out.push((format!("{p}.wv"), &mut mab.wv));
                        out.push((format!("{p}.bv"), &mut mab.bv));
                        out.push((format!("{p}.wo"), &mut mab.wo));
                        out.push((format!("{p}.bo"), &mut mab.bo));
                        out.push((format!("{p}.ffn.weight"), &mut mab.wf));
                        out.push((format!("{p}.ffn.bias"), &mut mab.bf));
                        out.push((format!("{p}.ln1.gain"), &mut mab.ln1_g));
                        out.push((format!("{p}.ln1.shift"), &mut mab.ln1_b));
                        out.push((format!("{p}.ln2.gain"), &mut mab.ln2_g));
                        out.push((format!("{p}.ln2.shift"), &mut mab.ln2_b));
                    }
                }
            }
            EncoderParams::PermEq(layers) => {
                for (i, l) in layers.iter_mut().enumerate() {
                    out.push((format!("permeq{i}.w_self"), &mut l.w_self));
                    out.push((format!("permeq{i}.w_mean"), &mut l.w_mean));
                    out.push((format!("permeq{i}.bias"), &mut l.bias));
                }
            }
            EncoderParams::None => {}
        }
        out.push(("scorer.fc1.weight".into(), &mut self.scorer.w1));
        out.push(("scorer.fc1.bias".into(), &mut self.scorer.b1));
        out.push(("scorer.fc2.weight".into(), &mut self.scorer.w2));
        out.push(("scorer.fc2.bias".into(), &mut self.scorer.b2));
        out
    }

    fn walk(&self, mut f: impl FnMut(String, &P<F>)) {
        if let Some(c) = &self.cadence {
            for (i, (k, b)) in c.kernels.iter().zip(&c.biases).enumerate() {
                let w = self.config.scales[i];
                f(format!("cadence.k{w}.kernel"), k);
                f(format!("cadence.k{w}.bias"), b);
            }
            f("cadence.fc1.weight".into(), &c.fc1_w);
            f("cadence.fc1.bias".into(), &c.fc1_b);
            f("cadence.fc2.weight".into(), &c.fc2_w);
            f("cadence.fc2.bias".into(), &c.fc2_b);
        }
        if let Some(e) = &self.embedding {
            f("embedding.table".into(), e);
        }
        if let Some((w, b)) = &self.adapter {
            f("adapter.weight".into(), w);
            f("adapter.bias".into(), b);
        }
        match &self.encoder {
            EncoderParams::Isab(blocks) => {
                for (i, blk) in blocks.iter().enumerate() {
                    f(format!("isab{i}.induced"), &blk.induced);
                    for (m, mab) in [(1usize, &blk.mab1), (2usize, &blk.mab2)] {
                        let p = format!("isab{i}.mab{m}");
                        f(format!("{p}.wq"), &mab.wq);
                        f(format!("{p}.bq"), &mab.bq);
                        f(format!("{p}.wk"), &mab.wk);
                        f(format!("{p}.bk"), &mab.bk);
                        f(format!("{p}.wv"), &mab.wv);
                        f(format!("{p}.bv"), &mab.bv);
                        f(format!("{p}.wo"), &mab.wo);
                        f(format!("{p}.bo"), &mab.bo);
                        f(format!("{p}.ffn.weight"), &mab.wf);
                        f(format!("{p}.ffn.bias"), &mab.bf);
                        f(format!("{p}.ln1.gain"), &mab.ln1_g);
                        f(format!("{p}.ln1.shift"), &mab.ln1_b);
                        f(format!("{p}.ln2.gain"), &mab.ln2_g);
                        f(format!("{p}.ln2.shift"), &mab.ln2_b);
                    }
                }
            }
            EncoderParams::PermEq(layers) => {
                for (i, l) in layers.iter().enumerate() {
                    f(format!("permeq{i}.w_self"), &l.w_self);
                    f(format!("permeq{i}.w_mean"), &l.w_mean);
                    f(format!("permeq{i}.bias"), &l.bias);
                }
            }
            EncoderParams::None => {}
        }
        f("scorer.fc1.weight".into(), &self.scorer.w1);
        f("scorer.fc1.bias".into(), &self.scorer.b1);
        f("scorer.fc2.weight".into(), &self.scorer.w2);
        f("scorer.fc2.bias".into(), &self.scorer.b2);
    }

    /// Deep copy (detaches from any shared references).
    pub fn deep_clone(&self) -> Self {
        let mut c = self.clone();
        for (_, t) in c.named_mut() {
            *t = Rc::new((**t).clone());
        }
        c
    }

    /// Stages every parameter as a tape leaf, in [`Self::named`] order.
    pub fn stage(&self, tape: &Tape<F>) -> Result<StagedCase> {
        Ok(self.stage_with_ids(tape)?.0)
    }

    /// Like [`Self::stage`] but also returns the leaf ids (the optimizer
    /// reads gradients back through them).
    pub fn stage_with_ids(&self, tape: &Tape<F>) -> Result<(StagedCase, Vec<NodeId>)> {
        let named = self.named();
        let mut ids = Vec::with_capacity(named.len());
        for (_, t) in &named {
            ids.push(tape.leaf_rc(Rc::clone(t))?);
        }
        Ok((self.staged_from_ids(&ids), ids))
    }

    /// Rebuilds the staged structure from leaf ids laid out in
    /// [`Self::named`] order (used by the gradient checker, which stages
    /// tensors itself).
    pub fn staged_from_ids(&self, ids: &[NodeId]) -> StagedCase {
        let mut it = ids.iter().copied();
        let mut next = || it.next().expect("staged id list too short");
        // Consumption order must match `walk`: kernel/bias interleaved per
        // scale, then the two fc layers.
        let cadence = self.cadence.as_ref().map(|c| {
            let n = c.kernels.len();
            let mut kernels = Vec::with_capacity(n);
            let mut biases = Vec::with_capacity(n);
            for _ in 0..n {
                kernels.push(next());
                biases.push(next());
            }
            StagedCadence {
                kernels,
                biases,
                fc1_w: next(),
                fc1_b: next(),
                fc2_w: next(),
                fc2_b: next(),
            }
        });
        let embedding = self.embedding.as_ref().map(|_| next());
        let adapter = self.adapter.as_ref().map(|_| (next(), next()));
        let encoder = match &self.encoder {
            EncoderParams::Isab(blocks) => StagedEncoder::Isab(
                blocks
                    .iter()
                    .map(|_| {
                        let induced = next();
                        let mut mab = || StagedMab {
                            wq: next(),
                            bq: next(),
                            wk: next(),
                            bk: next(),
                            wv: next(),
                            bv: next(),
                            wo: next(),
                            bo: next(),
                            wf: next(),
                            bf: next(),
                            ln1_g: next(),
                            ln1_b: next(),
                            ln2_g: next(),
                            ln2_b: next(),
                        };
                        let mab1 = mab();
                        let mab2 = mab();
                        StagedIsabBlock { induced, mab1, mab2 }
                    })
                    .collect(),
            ),
            EncoderParams::PermEq(layers) => StagedEncoder::PermEq(
                layers
                    .iter()
                    .map(|_| StagedPermEqLayer {
                        w_self: next(),
                        w_mean: next(),
                        bias: next(),
                    })
                    .collect(),
            ),
            EncoderParams::None => StagedEncoder::None,
        };
        let scorer = StagedScorer {
            w1: next(),
            b1: next(),
            w2: next(),
            b2: next(),
        };
        assert!(it.next().is_none(), "staged id list too long");
        StagedCase {
            cadence,
            embedding,
            adapter,
            encoder,
            scorer,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StagedMab {
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
    pub wf: NodeId,
    pub bf: NodeId,
    pub ln1_g: NodeId,
    pub ln1_b: NodeId,
    pub ln2_g: NodeId,
    pub ln2_b: NodeId,
}

#[derive(Debug, Clone)]
pub struct StagedIsabBlock {
    pub induced: NodeId,
    pub mab1: StagedMab,
    pub mab2: StagedMab,
}

#[derive(Debug, Clone)]
pub struct StagedPermEqLayer {
    pub w_self: NodeId,
    pub w_mean: NodeId,
    pub bias: NodeId,
}

#[derive(Debug, Clone)]
pub enum StagedEncoder {
    Isab(Vec<StagedIsabBlock>),
    PermEq(Vec<StagedPermEqLayer>),
    None,
}

#[derive(Debug, Clone)]
pub struct StagedCadence {
    pub kernels: Vec<NodeId>,
    pub biases: Vec<NodeId>,
    pub fc1_w: NodeId,
    pub fc1_b: NodeId,
    pub fc2_w: NodeId,
    pub fc2_b: NodeId,
}

#[derive(Debug, Clone)]
pub struct StagedScorer {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

#[derive(Debug, Clone)]
pub struct StagedCase {
    pub cadence: Option<StagedCadence>,
    pub embedding: Option<NodeId>,
    pub adapter: Option<(NodeId, NodeId)>,
    pub encoder: StagedEncoder,
    pub scorer: StagedScorer,
}

/// An example converted to model inputs, optionally padded to a fixed row
/// count. Padded rows carry zero signals, item row 0, zero labels, and are
/// masked out of attention keys, pooling, and the loss.
#[derive(Debug, Clone)]
pub struct PreparedExample<F: Scalar> {
    pub signals: Option<Tensor<F>>,
    pub item_rows: Vec<usize>,
    pub labels: Tensor<F>,
    /// `None` means every row is real.
    pub mask: Option<Vec<bool>>,
    pub n_real: usize,
}

pub fn prepare_example<F: Scalar>(
    ex: &Example,
    vocab: &Vocab,
    cfg: &ModelConfig,
    pad_to: Option<usize>,
) -> Result<PreparedExample<F>> {
    let n_real = ex.n_candidates();
    assert!(n_real > 0, "example with no candidates");
    let n = pad_to.unwrap_or(n_real);
    assert!(
        n >= n_real,
        "pad_to {n} smaller than candidate count {n_real}"
    );
    let signals = if cfg.use_cnn {
        let mut data = vec![F::zero(); n * cfg.t];
        for (r, sig) in ex.signals.iter().enumerate() {
            assert_eq!(
                sig.len(),
                cfg.t,
                "signal length {} does not match model window {}",
                sig.len(),
                cfg.t
            );
            for (c, &b) in sig.bits.iter().enumerate() {
                if b != 0 {
                    data[r * cfg.t + c] = F::one();
                }
            }
        }
        Some(Tensor::from_vec(&[n, cfg.t], data))
    } else {
        None
    };
    let mut item_rows = vec![0usize; n];
    if cfg.use_item_embedding {
        for (r, item) in ex.candidates.iter().enumerate() {
            item_rows[r] = vocab.id(item).ok_or_else(|| {
                CaseError::data(format!("item `{item}` not in model vocabulary"))
            })?;
        }
    }
    let mut labels = vec![F::zero(); n];
    for (r, &y) in ex.labels.iter().enumerate() {
        labels[r] = if y == 0 { F::zero() } else { F::one() };
    }
    let mask = (n != n_real).then(|| (0..n).map(|r| r < n_real).collect());
    Ok(PreparedExample {
        signals,
        item_rows,
        labels: Tensor::from_vec(&[n], labels),
        mask,
        n_real,
    })
}

/// Pads every example of a batch to a common row count (the max, unless
/// `pad_to` forces one) so collated tensors share a shape.
pub fn batch_collate<F: Scalar>(
    examples: &[&Example],
    vocab: &Vocab,
    cfg: &ModelConfig,
    pad_to: Option<usize>,
) -> Result<Vec<PreparedExample<F>>> {
    let n_max = pad_to.unwrap_or_else(|| {
        examples.iter().map(|e| e.n_candidates()).max().unwrap_or(1)
    });
    examples
        .iter()
        .map(|ex| prepare_example(ex, vocab, cfg, Some(n_max)))
        .collect()
}

pub struct ForwardArtifacts {
    /// `[n, 1]` logits, one per row (padded rows score garbage; mask them).
    pub scores: NodeId,
    /// Cadence encodings `[n, d_c]` when the CNN branch is enabled.
    pub cadence: Option<NodeId>,
    /// Set-contextualized rows `[n, d_h]` fed to the scorer.
    pub encoded: NodeId,
}

/// Multihead attention block: `LN(q_in + MHA(q_in, kv, kv))` followed by
/// `LN(h + ReLU(FFN(h)))`. `key_mask` hides padded keys; queries are not
/// masked (padded query rows produce ignored garbage).
fn mab<F: Scalar>(
    tape: &Tape<F>,
    q_in: NodeId,
    kv_in: NodeId,
    p: &StagedMab,
    heads: usize,
    head_dim: usize,
    key_mask: Option<&[bool]>,
) -> Result<NodeId> {
    let q = tape.add_row(tape.matmul(q_in, p.wq)?, p.bq)?;
    let k = tape.add_row(tape.matmul(kv_in, p.wk)?, p.bk)?;
    let v = tape.add_row(tape.matmul(kv_in, p.wv)?, p.bv)?;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (from, to) = (h * head_dim, (h + 1) * head_dim);
        let qh = tape.slice_cols(q, from, to)?;
        let kh = tape.slice_cols(k, from, to)?;
        let vh = tape.slice_cols(v, from, to)?;
        let logits = tape.scale(tape.matmul_nt(qh, kh)?, scale)?;
        let probs = match key_mask {
            Some(m) => tape.softmax_rows_masked(logits, m)?,
            None => tape.softmax_rows(logits)?,
        };
        head_outs.push(tape.matmul(probs, vh)?);
    }
    let concat = tape.concat_cols(&head_outs)?;
    let o = tape.add_row(tape.matmul(concat, p.wo)?, p.bo)?;
    let h1 = tape.layer_norm(tape.add(q_in, o)?, p.ln1_g, p.ln1_b, LN_EPS)?;
    let f = tape.relu(tape.add_row(tape.matmul(h1, p.wf)?, p.bf)?)?;
    tape.layer_norm(tape.add(h1, f)?, p.ln2_g, p.ln2_b, LN_EPS)
}

/// One ISAB block: attend the induced points over the set, then the set over
/// the induced summaries. Cost is linear in the set size.
fn isab_block<F: Scalar>(
    tape: &Tape<F>,
    x: NodeId,
    blk: &StagedIsabBlock,
    heads: usize,
    head_dim: usize,
    mask: Option<&[bool]>,
) -> Result<NodeId> {
    let h = mab(tape, blk.induced, x, &blk.mab1, heads, head_dim, mask)?;
    mab(tape, x, h, &blk.mab2, heads, head_dim, None)
}

fn cadence_encode<F: Scalar>(
    tape: &Tape<F>,
    signals: NodeId,
    c: &StagedCadence,
) -> Result<NodeId> {
    let mut scale_feats = Vec::with_capacity(c.kernels.len());
    for (&k, &b) in c.kernels.iter().zip(&c.biases) {
        scale_feats.push(tape.relu(tape.conv1d(signals, k, b)?)?);
    }
    let feats = tape.concat_cols(&scale_feats)?;
    let h = tape.relu(tape.add_row(tape.matmul(feats, c.fc1_w)?, c.fc1_b)?)?;
    tape.add_row(tape.matmul(h, c.fc2_w)?, c.fc2_b)
}

/// Full forward pass for one (possibly padded) example.
pub fn case_forward<F: Scalar>(
    tape: &Tape<F>,
    staged: &StagedCase,
    cfg: &ModelConfig,
    prep: &PreparedExample<F>,
    dropout_p: f64,
    mut rng: Option<&mut Rng>,
    training: bool,
) -> Result<ForwardArtifacts> {
    let n = prep.item_rows.len();
    let mask = prep.mask.as_deref();

    let cadence = match (&staged.cadence, &prep.signals) {
        (Some(c), Some(sig)) => {
            let s = tape.constant(sig.clone())?;
            Some(cadence_encode(tape, s, c)?)
        }
        (None, None) => None,
        _ => unreachable!("prepared example disagrees with model flags about the CNN branch"),
    };
    let c_part = match cadence {
        Some(c) => c,
        None => tape.constant(Tensor::zeros(&[n, cfg.d_c]))?,
    };
    let e_part = match staged.embedding {
        Some(table) => tape.gather_rows(table, &prep.item_rows)?,
        None => tape.constant(Tensor::zeros(&[n, cfg.d_e]))?,
    };
    let mut x = tape.concat_cols(&[c_part, e_part])?;
    if let Some((w, b)) = staged.adapter {
        x = tape.add_row(tape.matmul(x, w)?, b)?;
    }

    let drop = |tape: &Tape<F>, x: NodeId, rng: &mut Option<&mut Rng>| -> Result<NodeId> {
        if training && dropout_p > 0.0 {
            let r = rng
                .as_deref_mut()
                .expect("training-mode forward with dropout needs an RNG");
            tape.dropout(x, dropout_p, r, true)
        } else {
            Ok(x)
        }
    };

    match &staged.encoder {
        StagedEncoder::Isab(blocks) => {
            let heads = cfg.heads;
            let hd = cfg.head_dim();
            for blk in blocks {
                x = isab_block(tape, x, blk, heads, hd, mask)?;
                x = drop(tape, x, &mut rng)?;
            }
        }
        StagedEncoder::PermEq(layers) => {
            for l in layers {
                let own = tape.matmul(x, l.w_self)?;
                let pooled = tape.mean_rows(x, mask)?;
                let ctx = tape.matmul(pooled, l.w_mean)?;
                let combined = tape.add_row(tape.add_row(own, ctx)?, l.bias)?;
                x = tape.relu(combined)?;
                x = drop(tape, x, &mut rng)?;
            }
        }
        StagedEncoder::None => {}
    }
    let encoded = x;

    let h = tape.relu(tape.add_row(tape.matmul(encoded, staged.scorer.w1)?, staged.scorer.b1)?)?;
    let h = drop(tape, h, &mut rng)?;
    let scores = tape.add_row(tape.matmul(h, staged.scorer.w2)?, staged.scorer.b2)?;
    Ok(ForwardArtifacts {
        scores,
        cadence,
        encoded,
    })
}

/// Per-example BCE loss over real rows.
pub fn example_loss<F: Scalar>(
    tape: &Tape<F>,
    art: &ForwardArtifacts,
    prep: &PreparedExample<F>,
) -> Result<NodeId> {
    tape.bce_with_logits(art.scores, &prep.labels, prep.mask.as_deref())
}

/// Score an example in eval mode (fresh tape, no dropout) and return per-real
/// -candidate logits in f64.
pub fn score_example<F: Scalar>(
    params: &CaseParams<F>,
    prep: &PreparedExample<F>,
) -> Result<Vec<f64>> {
    let tape: Tape<F> = Tape::new();
    let staged = params.stage(&tape)?;
    let art = case_forward(&tape, &staged, &params.config, prep, 0.0, None, false)?;
    let v = tape.value(art.scores);
    Ok(v.data().iter().take(prep.n_real).map(|s| s.as_f64()).collect())
}

/// Forward flops for one example in eval mode.
pub fn forward_flops<F: Scalar>(params: &CaseParams<F>, prep: &PreparedExample<F>) -> Result<u64> {
    let tape: Tape<F> = Tape::new();
    let staged = params.stage(&tape)?;
    case_forward(&tape, &staged, &params.config, prep, 0.0, None, false)?;
    Ok(tape.flops())
}

/// Ranks candidate indices: score descending, then historical purchase count
/// descending, then item id ascending. Returns at most `k` indices.
pub fn rank_candidates(ex: &Example, scores: &[f64], k: usize) -> Vec<usize> {
    assert_eq!(
        scores.len(),
        ex.n_candidates(),
        "rank_candidates: {} scores for {} candidates",
        scores.len(),
        ex.n_candidates()
    );
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("non-finite score in ranking")
            .then(ex.counts[b].cmp(&ex.counts[a]))
            .then(ex.candidates[a].cmp(&ex.candidates[b]))
    });
    idx.truncate(k);
    idx
}

/// Eval-mode ranker over a trained model.
pub struct CaseRanker<'a, F: Scalar> {
    pub params: &'a CaseParams<F>,
    pub vocab: &'a Vocab,
}

impl<F: Scalar> Ranker for CaseRanker<'_, F> {
    fn name(&self) -> &'static str {
        "case"
    }

    fn rank_example(&self, ex: &Example, k: usize) -> Result<Vec<String>> {
        let prep: PreparedExample<F> = prepare_example(ex, self.vocab, &self.params.config, None)?;
        let scores = score_example(self.params, &prep)?;
        Ok(rank_candidates(ex, &scores, k)
            .into_iter()
            .map(|i| ex.candidates[i].clone())
            .collect())
    }
}

/// Map from parameter name to tensor, for checkpoint reconstruction.
pub fn params_from_named<F: Scalar>(
    config: ModelConfig,
    vocab_len: usize,
    mut tensors: HashMap<String, Tensor<F>>,
) -> Result<CaseParams<F>> {
    // Build a skeleton with the right structure, then overwrite every tensor.
    let mut rng = Rng::new(0);
    let mut params = CaseParams::init(config, vocab_len.max(1), &mut rng)?;
    params.vocab_len = vocab_len;
    for (name, slot) in params.named_mut() {
        let t = tensors.remove(&name).ok_or_else(|| {
            CaseError::data(format!("checkpoint is missing parameter `{name}`"))
        })?;
        if t.shape() != slot.shape() {
            return Err(CaseError::data(format!(
                "checkpoint parameter `{name}` has shape {:?}, expected {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = Rc::new(t);
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(CaseError::data(format!(
            "checkpoint contains unexpected parameter `{extra}`"
        )));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            t: 28,
            scales: vec![7, 14],
            filters_per_scale: 2,
            d_c: 8,
            d_e: 8,
            d_h: 16,
            induced_points: 4,
            heads: 2,
            blocks: 2,
            ..ModelConfig::default()
        }
    }

    pub(crate) fn synthetic_example(n: usize, t: usize, seed: u64) -> (Example, Vocab) {
        let mut rng = Rng::new(seed);
        let items: Vec<String> = (0..n.max(3)).map(|i| format!("it{i:02}")).collect();
        let vocab = Vocab::from_items(items.clone());
        let candidates: Vec<String> = items.iter().take(n).cloned().collect();
        let signals = (0..n)
            .map(|_| crate::signal::CadenceSignal {
                bits: (0..t).map(|_| u8::from(rng.uniform() < 0.2)).collect(),
            })
            .collect();
        let labels = (0..n).map(|_| u8::from(rng.uniform() < 0.4)).collect();
        let counts = (0..n).map(|_| rng.below(20) as u32 + 1).collect();
        let ex = Example {
            user: "u".into(),
            query_day: 100,
            candidates,
            signals,
            labels,
            counts,
            last_days: (0..n as i64).collect(),
        };
        (ex, vocab)
    }

    #[test]
    fn conv_feature_len_matches_scale_arithmetic() {
        let cfg = ModelConfig::default();
        // 364 across widths 7,14,28,91,182 -> 52+26+13+4+2 = 97.
        assert_eq!(cfg.conv_feature_len(), 97);
        let cfg2 = ModelConfig {
            filters_per_scale: 2,
            ..ModelConfig::default()
        };
        assert_eq!(cfg2.conv_feature_len(), 194);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad_heads = ModelConfig { heads: 3, ..ModelConfig::default() };
        assert!(bad_heads.validate().is_err());
        // heads = 0 must be a config error, not a divide-by-zero panic.
        let zero_heads = ModelConfig { heads: 0, ..ModelConfig::default() };
        assert!(zero_heads.validate().is_err());
        let bad_scale = ModelConfig { scales: vec![400], ..ModelConfig::default() };
        assert!(bad_scale.validate().is_err());
        let no_inputs = ModelConfig {
            use_cnn: false,
            use_item_embedding: false,
            ..ModelConfig::default()
        };
        assert!(no_inputs.validate().is_err());
        let odd_t = ModelConfig { t: 30, scales: vec![7], ..ModelConfig::default() };
        assert!(!odd_t.validate().unwrap().is_empty());
    }

    // ---- naive f64 attention, written independently of the tape ops ----

    type M = Vec<Vec<f64>>;

    fn to_m<F: Scalar>(t: &Tensor<F>) -> M {
        let (r, c) = if t.shape().len() == 2 {
            t.dims2()
        } else {
            (1, t.len())
        };
        (0..r)
            .map(|i| (0..c).map(|j| t.data()[i * c + j].as_f64()).collect())
            .collect()
    }

    fn mm(a: &M, b: &M) -> M {
        let (m, k, n) = (a.len(), b.len(), b[0].len());
        let mut out = vec![vec![0.0; n]; m];
        for i in 0..m {
            for p in 0..k {
                for j in 0..n {
                    out[i][j] += a[i][p] * b[p][j];
                }
            }
        }
        out
    }

    fn add_vec(a: &M, v: &[f64]) -> M {
        a.iter()
            .map(|row| row.iter().zip(v).map(|(x, b)| x + b).collect())
            .collect()
    }

    fn naive_layer_norm(x: &M, g: &[f64], b: &[f64]) -> M {
        x.iter()
            .map(|row| {
                let d = row.len() as f64;
                let mean = row.iter().sum::<f64>() / d;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
                let inv = 1.0 / (var + LN_EPS).sqrt();
                row.iter()
                    .enumerate()
                    .map(|(j, v)| (v - mean) * inv * g[j] + b[j])
                    .collect()
            })
            .collect()
    }

    fn naive_mab(q_in: &M, kv: &M, p: &MabParams<f64>, heads: usize) -> M {
        let d = q_in[0].len();
        let hd = d / heads;
        let q = add_vec(&mm(q_in, &to_m(&p.wq)), &to_m(&p.bq)[0]);
        let k = add_vec(&mm(kv, &to_m(&p.wk)), &to_m(&p.bk)[0]);
        let v = add_vec(&mm(kv, &to_m(&p.wv)), &to_m(&p.bv)[0]);
        let mut concat = vec![vec![0.0; d]; q.len()];
        for h in 0..heads {
            let cols = h * hd..(h + 1) * hd;
            for (i, qrow) in q.iter().enumerate() {
                // attention weights of query i over all keys
                let logits: Vec<f64> = k
                    .iter()
                    .map(|krow| {
                        cols.clone().map(|c| qrow[c] * krow[c]).sum::<f64>() / (hd as f64).sqrt()
                    })
                    .collect();
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                let z: f64 = exps.iter().sum();
                for (j, vrow) in v.iter().enumerate() {
                    let w = exps[j] / z;
                    for (ci, c) in cols.clone().enumerate() {
                        concat[i][h * hd + ci] += w * vrow[c];
                    }
                }
            }
        }
        let o = add_vec(&mm(&concat, &to_m(&p.wo)), &to_m(&p.bo)[0]);
        let sum: M = q_in
            .iter()
            .zip(&o)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
            .collect();
        let h1 = naive_layer_norm(&sum, &to_m(&p.ln1_g)[0], &to_m(&p.ln1_b)[0]);
        let f: M = add_vec(&mm(&h1, &to_m(&p.wf)), &to_m(&p.bf)[0])
            .into_iter()
            .map(|row| row.into_iter().map(|v| v.max(0.0)).collect())
            .collect();
        let sum2: M = h1
            .iter()
            .zip(&f)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
            .collect();
        naive_layer_norm(&sum2, &to_m(&p.ln2_g)[0], &to_m(&p.ln2_b)[0])
    }

    #[test]
    fn mab_matches_naive_attention() {
        let mut rng = Rng::new(7);
        let d = 8;
        let heads = 2;
        let p: MabParams<f64> = init_mab(&mut rng, d);
        let q_t = Tensor::from_vec(
            &[3, d],
            (0..3 * d).map(|_| rng.normal()).collect::<Vec<f64>>(),
        );
        let kv_t = Tensor::from_vec(
            &[5, d],
            (0..5 * d).map(|_| rng.normal()).collect::<Vec<f64>>(),
        );
        let want = naive_mab(&to_m(&q_t), &to_m(&kv_t), &p, heads);

        let tape: Tape<f64> = Tape::new();
        let q = tape.constant(q_t).unwrap();
        let kv = tape.constant(kv_t).unwrap();
        let sp = StagedMab {
            wq: tape.leaf_rc(Rc::clone(&p.wq)).unwrap(),
            bq: tape.leaf_rc(Rc::clone(&p.bq)).unwrap(),
            wk: tape.leaf_rc(Rc::clone(&p.wk)).unwrap(),
            bk: tape.leaf_rc(Rc::clone(&p.bk)).unwrap(),
            wv: tape.leaf_rc(Rc::clone(&p.wv)).unwrap(),
            bv: tape.leaf_rc(Rc::clone(&p.bv)).unwrap(),
            wo: tape.leaf_rc(Rc::clone(&p.wo)).unwrap(),
            bo: tape.leaf_rc(Rc::clone(&p.bo)).unwrap(),
            wf: tape.leaf_rc(Rc::clone(&p.wf)).unwrap(),
            bf: tape.leaf_rc(Rc::clone(&p.bf)).unwrap(),
            ln1_g: tape.leaf_rc(Rc::clone(&p.ln1_g)).unwrap(),
            ln1_b: tape.leaf_rc(Rc::clone(&p.ln1_b)).unwrap(),
            ln2_g: tape.leaf_rc(Rc::clone(&p.ln2_g)).unwrap(),
            ln2_b: tape.leaf_rc(Rc::clone(&p.ln2_b)).unwrap(),
        };
        let out = mab(&tape, q, kv, &sp, heads, d / heads, None).unwrap();
        let got = tape.value(out);
        for (i, want_row) in want.iter().enumerate() {
            for (j, &w) in want_row.iter().enumerate() {
                let g = got.data()[i * d + j].as_f64();
                assert!(
                    (g - w).abs() < 1e-10,
                    "mab mismatch at ({i},{j}): {g} vs {w}"
                );
            }
        }
    }

    fn eval_scores(params: &CaseParams<f64>, prep: &PreparedExample<f64>) -> Vec<f64> {
        score_example(params, prep).unwrap()
    }

    #[test]
    fn forward_is_permutation_equivariant() {
        let cfg = tiny_config();
        let (ex, vocab) = synthetic_example(6, cfg.t, 11);
        let mut rng = Rng::new(3);
        let params: CaseParams<f64> = CaseParams::init(cfg.clone(), vocab.len(), &mut rng).unwrap();

        let mut perm: Vec<usize> = (0..6).collect();
        rng.shuffle(&mut perm);
        let permuted = Example {
            user: ex.user.clone(),
            query_day: ex.query_day,
            candidates: perm.iter().map(|&i| ex.candidates[i].clone()).collect(),
            signals: perm.iter().map(|&i| ex.signals[i].clone()).collect(),
            labels: perm.iter().map(|&i| ex.labels[i]).collect(),
            counts: perm.iter().map(|&i| ex.counts[i]).collect(),
            last_days: perm.iter().map(|&i| ex.last_days[i]).collect(),
        };
        let base = eval_scores(&params, &prepare_example(&ex, &vocab, &cfg, None).unwrap());
        let moved = eval_scores(&params, &prepare_example(&permuted, &vocab, &cfg, None).unwrap());
        for (new_row, &old_row) in perm.iter().enumerate() {
            assert!(
                (moved[new_row] - base[old_row]).abs() < 1e-10,
                "row {old_row} moved to {new_row}: {} vs {}",
                base[old_row],
                moved[new_row]
            );
        }
    }

    #[test]
    fn padding_changes_nothing_for_real_rows() {
        let cfg = tiny_config();
        let (ex, vocab) = synthetic_example(5, cfg.t, 21);
        let mut rng = Rng::new(5);
        let params: CaseParams<f64> = CaseParams::init(cfg.clone(), vocab.len(), &mut rng).unwrap();

        let plain: PreparedExample<f64> = prepare_example(&ex, &vocab, &cfg, None).unwrap();
        let padded: PreparedExample<f64> = prepare_example(&ex, &vocab, &cfg, Some(9)).unwrap();
        assert_eq!(padded.mask.as_ref().unwrap().iter().filter(|&&m| m).count(), 5);

        let s0 = eval_scores(&params, &plain);
        let s1 = eval_scores(&params, &padded);
        assert_eq!(s1.len(), 5, "score_example must only report real rows");
        for (a, b) in s0.iter().zip(&s1) {
            assert!((a - b).abs() < 1e-10, "padded forward drifted: {a} vs {b}");
        }

        // Loss and parameter gradients must also be unaffected by padding.
        let grads_of = |prep: &PreparedExample<f64>| -> (f64, Vec<Tensor<f64>>) {
            let tape: Tape<f64> = Tape::new();
            let (staged, ids) = params.stage_with_ids(&tape).unwrap();
            let art = case_forward(&tape, &staged, &cfg, prep, 0.0, None, false).unwrap();
            let loss = example_loss(&tape, &art, prep).unwrap();
            let loss_v = tape.value(loss).first().as_f64();
            let mut grads = tape.backward(loss).unwrap();
            let gs = ids
                .iter()
                .map(|id| grads.take(*id).expect("param got no gradient"))
                .collect();
            (loss_v, gs)
        };
        let (l0, g0) = grads_of(&plain);
        let (l1, g1) = grads_of(&padded);
        assert!((l0 - l1).abs() < 1e-12, "loss drifted under padding: {l0} vs {l1}");
        for (a, b) in g0.iter().zip(&g1) {
            assert!(a.max_abs_diff(b) < 1e-10, "gradients drifted under padding");
        }
    }

    #[test]
    fn every_ablation_scores_finitely() {
        let base = tiny_config();
        let variants = [
            ModelConfig { use_cnn: false, ..base.clone() },
            ModelConfig { use_item_embedding: false, ..base.clone() },
            ModelConfig { use_set_encoder: false, ..base.clone() },
            ModelConfig { set_encoder: SetEncoderKind::PermEqMean, ..base.clone() },
            base.clone(),
        ];
        let (ex, vocab) = synthetic_example(4, base.t, 31);
        for cfg in variants {
            let mut rng = Rng::new(17);
            let params: CaseParams<f64> = CaseParams::init(cfg.clone(), vocab.len(), &mut rng).unwrap();
            let prep = prepare_example(&ex, &vocab, &cfg, None).unwrap();
            let scores = eval_scores(&params, &prep);
            assert_eq!(scores.len(), 4);
            assert!(scores.iter().all(|s| s.is_finite()));
        }
    }

    #[test]
    fn ablated_branches_own_no_parameters() {
        let mut rng = Rng::new(1);
        let cfg = ModelConfig { use_cnn: false, ..tiny_config() };
        let p: CaseParams<f64> = CaseParams::init(cfg, 10, &mut rng).unwrap();
        assert!(p.named().iter().all(|(n, _)| !n.starts_with("cadence.")));
        let cfg = ModelConfig { use_item_embedding: false, ..tiny_config() };
        let p: CaseParams<f64> = CaseParams::init(cfg, 10, &mut rng).unwrap();
        assert!(p.named().iter().all(|(n, _)| n != "embedding.table"));
        let cfg = ModelConfig { use_set_encoder: false, ..tiny_config() };
        let p: CaseParams<f64> = CaseParams::init(cfg, 10, &mut rng).unwrap();
        assert!(p.named().iter().all(|(n, _)| !n.starts_with("isab")));
    }

    #[test]
    fn named_round_trips_through_map() {
        let cfg = tiny_config();
        let mut rng = Rng::new(23);
        let params: CaseParams<f64> = CaseParams::init(cfg.clone(), 12, &mut rng).unwrap();
        let map: HashMap<String, Tensor<f64>> = params
            .named()
            .into_iter()
            .map(|(n, t)| (n, (*t).clone()))
            .collect();
        let rebuilt = params_from_named(cfg.clone(), 12, map).unwrap();
        let (ex, vocab) = synthetic_example(4, cfg.t, 41);
        let prep = prepare_example(&ex, &vocab, &cfg, None).unwrap();
        let a = eval_scores(&params, &prep);
        let b = eval_scores(&rebuilt, &prep);
        assert_eq!(a, b, "reconstructed parameters changed the forward pass");

        // Missing and extra tensors are rejected.
        let mut short: HashMap<String, Tensor<f64>> = params
            .named()
            .into_iter()
            .map(|(n, t)| (n, (*t).clone()))
            .collect();
        short.remove("scorer.fc2.bias");
        assert!(params_from_named(cfg.clone(), 12, short).is_err());
        let mut extra: HashMap<String, Tensor<f64>> = params
            .named()
            .into_iter()
            .map(|(n, t)| (n, (*t).clone()))
            .collect();
        extra.insert("mystery".into(), Tensor::zeros(&[1]));
        assert!(params_from_named(cfg, 12, extra).is_err());
    }

    #[test]
    fn deep_clone_detaches_storage() {
        let cfg = tiny_config();
        let mut rng = Rng::new(2);
        let params: CaseParams<f64> = CaseParams::init(cfg, 8, &mut rng).unwrap();
        let mut copy = params.deep_clone();
        for (_, t) in copy.named_mut() {
            Rc::make_mut(t).data_mut()[0] = 123.0;
        }
        for ((_, a), (_, b)) in params.named().iter().zip(copy.named()) {
            assert_ne!(a.data()[0], b.data()[0]);
        }
    }

    #[test]
    fn rank_candidates_breaks_ties_by_count_then_id() {
        let (mut ex, _) = synthetic_example(4, 8, 51);
        ex.candidates = vec!["b".into(), "a".into(), "d".into(), "c".into()];
        ex.counts = vec![5, 5, 9, 2];
        let scores = vec![1.0, 1.0, 0.5, 0.5];
        // a and b tie on score: equal counts, so id asc puts a first.
        // d and c tie on score: d has the higher count.
        let order = rank_candidates(&ex, &scores, 4);
        let names: Vec<&str> = order.iter().map(|&i| ex.candidates[i].as_str()).collect();
        assert_eq!(names, vec!["a", "b", "d", "c"]);
        assert_eq!(rank_candidates(&ex, &scores, 2).len(), 2);
    }

    #[test]
    fn forward_flops_are_affine_in_set_size() {
        let cfg = tiny_config();
        let mut rng = Rng::new(13);
        let params: CaseParams<f64> = CaseParams::init(cfg.clone(), 64, &mut rng).unwrap();
        let flops_at = |n: usize| -> u64 {
            let (ex, vocab) = synthetic_example(n, cfg.t, 61);
            let prep = prepare_example(&ex, &vocab, &cfg, None).unwrap();
            forward_flops(&params, &prep).unwrap()
        };
        let (f16, f32_, f48) = (flops_at(16), flops_at(32), flops_at(48));
        assert!(f32_ > f16);
        // Induced-point attention keeps cost affine in n, so equal increments
        // of n give exactly equal increments of flops.
        assert_eq!(f32_ - f16, f48 - f32_, "flops are not affine in set size");
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        let cfg = ModelConfig {
            t: 14,
            scales: vec![7],
            filters_per_scale: 1,
            d_c: 4,
            d_e: 4,
            d_h: 8,
            induced_points: 2,
            heads: 2,
            blocks: 1,
            ..ModelConfig::default()
        };
        let (ex, vocab) = synthetic_example(3, cfg.t, 71);
        let mut rng = Rng::new(19);
        let mut params: CaseParams<f64> =
            CaseParams::init(cfg.clone(), vocab.len(), &mut rng).unwrap();
        // Zero-initialized biases put ReLU inputs exactly on the kink (an
        // all-zero conv window outputs bias = 0), where the subgradient and
        // central differences legitimately disagree. Check at a generic
        // point instead.
        for (_, t) in params.named_mut() {
            for v in Rc::make_mut(t).data_mut() {
                *v += rng.normal() * 0.4;
            }
        }
        let prep: PreparedExample<f64> = prepare_example(&ex, &vocab, &cfg, None).unwrap();

        let mut tensors: Vec<P<f64>> = params.named().into_iter().map(|(_, t)| t).collect();
        let skeleton = params.clone();
        let report = crate::autodiff::gradcheck::grad_check_flat(
            &mut tensors,
            &mut |tape, ids| {
                let staged = skeleton.staged_from_ids(ids);
                let art = case_forward(tape, &staged, &cfg, &prep, 0.0, None, false)?;
                example_loss(tape, &art, &prep)
            },
            1e-5,
            &mut Rng::new(5),
            6,
        )
        .unwrap();
        assert!(
            report.max_rel_err < 1e-4,
            "model gradient check failed: max rel err {}",
            report.max_rel_err
        );
    }
}
