//! Losses, gradients, the Adam optimizer and the training loop.
//!
//! The per-sample objective is
//! `cross_entropy + rho * Σ_blocks mean_heads Σ_rows (1 − on-path mass)`,
//! where the second term reads the decoder's causal self-attention scores.
//! The forward pass itself is never masked; the mask only shapes the loss.

use std::io::Write;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, ParamStore, Tape, Var};
use crate::corpus::Example;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::hierarchy::LabelHierarchy;
use crate::labelseq::{TargetFormat, TokenId, BOS_ID};
use crate::model::{Dropout, Model};
use crate::pamm::{PammRows, PathAdaptiveMask};

/// How the path-mask term is combined across a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PammReduction {
    /// Per-sample term, averaged over the batch like the cross-entropy.
    #[default]
    SampleMean,
    /// Per-sample terms summed over the batch.
    BatchSum,
}

impl PammReduction {
    pub fn as_str(self) -> &'static str {
        match self {
            PammReduction::SampleMean => "sample-mean",
            PammReduction::BatchSum => "batch-sum",
        }
    }
}

impl std::str::FromStr for PammReduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sample-mean" => Ok(PammReduction::SampleMean),
            "batch-sum" => Ok(PammReduction::BatchSum),
            other => Err(Error::Config(format!("unknown pamm reduction `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub rho: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub clip_norm: f64,
    pub pamm_rows: PammRows,
    pub pamm_reduction: PammReduction,
    /// Worker threads for per-sample work; 0 uses all cores.
    pub jobs: usize,
    /// Generation limit used for validation decoding.
    pub max_decode_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            rho: 100.0,
            lr: 3e-4,
            batch_size: 10,
            epochs: 3,
            seed: 0,
            clip_norm: 1.0,
            pamm_rows: PammRows::All,
            pamm_reduction: PammReduction::SampleMean,
            jobs: 0,
            max_decode_len: crate::model::DEFAULT_MAX_TGT_LEN,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return Err(Error::Config(format!("rho must be a finite value >= 0, got {}", self.rho)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.clip_norm <= 0.0 {
            return Err(Error::Config("clip norm must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub loss_hia: f64,
    pub loss_pamm: f64,
    pub rho: f64,
    pub total: f64,
}

/// Decoder input (`BOS` + target) and per-position gold ids. The last
/// input position has no successor and is padding in the loss. Targets too
/// long for the decoder are cut so that input fits `max_tgt_len`.
pub fn teacher_forcing(target: &[TokenId], max_tgt_len: usize) -> (Vec<TokenId>, Vec<Option<TokenId>>) {
    let keep = target.len().min(max_tgt_len.saturating_sub(1));
    let mut input = Vec::with_capacity(keep + 1);
    input.push(BOS_ID);
    input.extend_from_slice(&target[..keep]);
    let mut gold: Vec<Option<TokenId>> = target[..keep].iter().map(|&t| Some(t)).collect();
    gold.push(None);
    (input, gold)
}

/// Cross-entropy averaged over non-padding rows.
pub fn cross_entropy_loss(logits: &Array2<f64>, gold: &[Option<TokenId>]) -> Result<f64> {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let l = tape.input(logits.clone(), false);
    let ce = tape.cross_entropy(l, gold)?;
    Ok(tape.scalar_value(ce))
}

/// `(row, on-path columns)` pairs in decoder coordinates: mask row `i`
/// lives at decoder position `i + 1`, behind `BOS`.
fn mask_rows(mask: &PathAdaptiveMask, policy: PammRows) -> Vec<(usize, Vec<usize>)> {
    mask.active_rows(policy)
        .map(|i| {
            (
                i + 1,
                mask.path_index_set(i).iter().map(|&j| j + 1).collect(),
            )
        })
        .collect()
}

/// Path-mask loss over traced `[block][head]` score matrices laid out in
/// decoder coordinates (row 0 is `BOS`).
pub fn pamm_loss(scores: &[Vec<Array2<f64>>], mask: &PathAdaptiveMask, policy: PammRows) -> Result<f64> {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let vars: Vec<Vec<Var>> = scores
        .iter()
        .map(|blk| blk.iter().map(|s| tape.input(s.clone(), false)).collect())
        .collect();
    let v = pamm_term(&mut tape, &vars, mask, policy)?;
    Ok(v.map_or(0.0, |v| tape.scalar_value(v)))
}

fn pamm_term(
    tape: &mut Tape<'_>,
    scores: &[Vec<Var>],
    mask: &PathAdaptiveMask,
    policy: PammRows,
) -> Result<Option<Var>> {
    let rows = mask_rows(mask, policy);
    let mut terms = Vec::new();
    for blk in scores {
        let h = blk.len() as f64;
        for &s in blk {
            let n = tape.value(s).nrows();
            if n != mask.len() + 1 {
                return Err(Error::Shape(format!(
                    "score has {n} rows, mask needs {}",
                    mask.len() + 1
                )));
            }
            let off = tape.off_path_sum(s, rows.clone())?;
            terms.push((off, 1.0 / h));
        }
    }
    if terms.is_empty() {
        return Ok(None);
    }
    Ok(Some(tape.weighted_sum(&terms)?))
}

struct SampleGraph {
    total: Var,
    hia: f64,
    pamm: f64,
}

/// Builds the per-sample objective. `pamm_weight` already folds in `rho`
/// and the batch reduction.
fn sample_objective<'p>(
    model: &'p Model,
    tape: &mut Tape<'p>,
    ex: &Example,
    cfg: &TrainConfig,
    pamm_weight: f64,
    drop: &mut Dropout<'_>,
) -> Result<SampleGraph> {
    let (input, gold) = teacher_forcing(&ex.target, model.config().max_tgt_len);
    let memory = model.encode(tape, &ex.src, drop)?;
    let dec = model.decode(tape, &input, memory, drop)?;
    let ce = tape.cross_entropy(dec.logits, &gold)?;
    let hia = tape.scalar_value(ce);
    let pamm = match &ex.mask {
        Some(mask) => {
            let mask = mask.truncated(input.len() - 1);
            pamm_term(tape, &dec.scores, &mask, cfg.pamm_rows)?
        }
        None => None,
    };
    let (total, pamm_value) = match pamm {
        Some(p) => {
            let v = tape.scalar_value(p);
            if pamm_weight != 0.0 {
                (tape.weighted_sum(&[(ce, 1.0), (p, pamm_weight)])?, v)
            } else {
                (ce, v)
            }
        }
        None => (ce, 0.0),
    };
    Ok(SampleGraph {
        total,
        hia,
        pamm: pamm_value,
    })
}

fn pamm_weight(cfg: &TrainConfig, batch_len: usize) -> f64 {
    match cfg.pamm_reduction {
        PammReduction::SampleMean => cfg.rho,
        PammReduction::BatchSum => cfg.rho * batch_len as f64,
    }
}

fn combine(parts: &[(f64, f64)], cfg: &TrainConfig) -> LossBreakdown {
    let n = parts.len().max(1) as f64;
    let loss_hia = parts.iter().map(|p| p.0).sum::<f64>() / n;
    let loss_pamm = match cfg.pamm_reduction {
        PammReduction::SampleMean => parts.iter().map(|p| p.1).sum::<f64>() / n,
        PammReduction::BatchSum => parts.iter().map(|p| p.1).sum::<f64>(),
    };
    LossBreakdown {
        loss_hia,
        loss_pamm,
        rho: cfg.rho,
        total: loss_hia + cfg.rho * loss_pamm,
    }
}

/// Forward-only batch loss with dropout disabled.
pub fn total_loss(model: &Model, batch: &[Example], cfg: &TrainConfig) -> Result<LossBreakdown> {
    let w = pamm_weight(cfg, batch.len());
    let parts = batch
        .iter()
        .map(|ex| {
            let mut tape = Tape::new(model.params());
            let g = sample_objective(model, &mut tape, ex, cfg, w, &mut Dropout::off())?;
            Ok((g.hia, g.pamm))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(combine(&parts, cfg))
}

fn sample_seed(seed: u64, step: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ step.wrapping_mul(0xD1B5_4A32_D192_ED03)
        ^ (index as u64).wrapping_add(1).wrapping_mul(0x94D0_49BB_1331_11EB)
}

/// Exact gradients of the batch loss. With `dropout_seed` set, dropout is
/// active and seeded per sample, so results do not depend on scheduling.
pub fn backward(
    model: &Model,
    batch: &[Example],
    cfg: &TrainConfig,
    dropout_seed: Option<(u64, u64)>,
) -> Result<(LossBreakdown, Gradients)> {
    let w = pamm_weight(cfg, batch.len());
    let per_sample = |(i, ex): (usize, &Example)| -> Result<((f64, f64), Gradients)> {
        let mut rng;
        let mut drop = match dropout_seed {
            Some((seed, step)) => {
                rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, step, i));
                Dropout::new(model.config().dropout, &mut rng)
            }
            None => Dropout::off(),
        };
        let mut tape = Tape::new(model.params());
        let g = sample_objective(model, &mut tape, ex, cfg, w, &mut drop)?;
        let grads = tape.backward(g.total).params;
        Ok(((g.hia, g.pamm), grads))
    };
    let results: Vec<Result<_>> = if batch.len() > 1 {
        batch.par_iter().enumerate().map(per_sample).collect()
    } else {
        batch.iter().enumerate().map(per_sample).collect()
    };

    let mut parts = Vec::with_capacity(batch.len());
    let mut total: Option<Gradients> = None;
    for r in results {
        let (p, g) = r?;
        parts.push(p);
        match &mut total {
            Some(t) => t.add_assign(&g),
            None => total = Some(g),
        }
    }
    let mut grads = total.unwrap_or_else(|| model.params().zero_grads());
    grads.scale(1.0 / batch.len().max(1) as f64);
    grads.check_finite(model.params())?;
    Ok((combine(&parts, cfg), grads))
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Gradients,
    v: Gradients,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.zero_grads(),
            v: params.zero_grads(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.t += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for id in params.ids().collect::<Vec<_>>() {
            let g = grads.get(id);
            let m = self.m.get_mut(id);
            ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| *m = b1 * *m + (1.0 - b1) * g);
            let v = self.v.get_mut(id);
            ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let (m, v) = (self.m.get(id), self.v.get(id));
            ndarray::Zip::from(params.get_mut(id))
                .and(m)
                .and(v)
                .for_each(|p, &m, &v| *p -= lr * (m / c1) / ((v / c2).sqrt() + eps));
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_hia: f64,
    pub loss_pamm: f64,
    pub rho: f64,
    pub total: f64,
    pub val_micro_f1: f64,
    pub val_macro_f1: f64,
    pub val_inconsistency_rate: f64,
    pub best: bool,
}

pub fn write_log<W: Write>(log: &[EpochRecord], mut out: W) -> Result<()> {
    for r in log {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation score.
    pub model: Model,
    pub best_epoch: usize,
    pub best_report: Option<EvalReport>,
    pub log: Vec<EpochRecord>,
}

/// Checkpoint selection key: mean of micro and macro F1, then the share of
/// well-formed outputs. Compared lexicographically; ties go to the later
/// epoch.
fn selection_key(r: &EvalReport) -> (f64, f64) {
    ((r.micro_f1 + r.macro_f1) / 2.0, -r.unclean_output_rate)
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Selection key, epoch, snapshot and its validation report.
type Best = ((f64, f64), usize, Model, Option<EvalReport>);

/// Teacher-forced training with per-epoch validation; keeps the best
/// validation checkpoint. Deterministic for a fixed seed.
pub fn train(
    mut model: Model,
    train_set: &[Example],
    val_set: &[Example],
    h: &LabelHierarchy,
    format: TargetFormat,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyCorpus("training split has no samples".into()));
    }
    let pool = thread_pool(cfg.jobs)?;
    {
        let mut adam = Adam::new(model.params());
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut log = Vec::with_capacity(cfg.epochs);
        let mut best: Option<Best> = None;
        let mut step: u64 = 0;

        for epoch in 1..=cfg.epochs {
            let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
            order.shuffle(&mut shuffle_rng);
            let mut sums = (0.0, 0.0, 0.0);
            let mut batches = 0usize;
            for chunk in order.chunks(cfg.batch_size) {
                let batch: Vec<Example> = chunk.iter().map(|&i| train_set[i].clone()).collect();
                let (loss, mut grads) = pool.install(|| backward(&model, &batch, cfg, Some((cfg.seed, step))))?;
                grads.clip_global_norm(cfg.clip_norm);
                adam.step(model.params_mut(), &grads, cfg.lr);
                sums.0 += loss.loss_hia;
                sums.1 += loss.loss_pamm;
                sums.2 += loss.total;
                batches += 1;
                step += 1;
            }
            let nb = batches.max(1) as f64;

            let report = if val_set.is_empty() {
                None
            } else {
                Some(pool.install(|| evaluate(&model, h, val_set, format, cfg.max_decode_len))?.0)
            };
            let key = report.as_ref().map_or((-(sums.2 / nb), 0.0), selection_key);
            let improved = best.as_ref().is_none_or(|b| key >= b.0);
            let record = EpochRecord {
                epoch,
                loss_hia: sums.0 / nb,
                loss_pamm: sums.1 / nb,
                rho: cfg.rho,
                total: sums.2 / nb,
                val_micro_f1: report.as_ref().map_or(0.0, |r| r.micro_f1),
                val_macro_f1: report.as_ref().map_or(0.0, |r| r.macro_f1),
                val_inconsistency_rate: report.as_ref().map_or(0.0, |r| r.inconsistency_rate),
                best: improved,
            };
            on_epoch(&record);
            log.push(record);
            if improved {
                best = Some((key, epoch, model.clone(), report));
            }
        }

        let (_, best_epoch, best_model, best_report) = match best {
            Some(b) => b,
            None => ((0.0, 0.0), 0, model, None),
        };
        Ok(TrainOutcome {
            model: best_model,
            best_epoch,
            best_report,
            log,
        })
    }
}
