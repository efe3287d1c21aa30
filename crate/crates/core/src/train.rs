//! Training: circular augmentation, triplet loss with hard negative mining,
//! the cross-entropy baseline, Adam with decoupled weight decay, the
//! one-cycle learning-rate schedule, and the epoch loop.

use rayon::prelude::*;

use crate::bpe::{BpeModel, TokenSequence};
use crate::config::{HeadKind, RunConfig};
use crate::data::{LabCatalog, PlasmidRecord};
use crate::error::{Error, Result};
use crate::model::AttributionModel;
use crate::rng::substream_indexed;
use crate::scalar::Scalar;
use crate::split::{Assignment, SplitPlan};
use crate::tensor::{DiffTensor, FeatureMask, Tape};

/// Items per tape during batched training. Fixed (not thread-count derived)
/// so gradient reduction order, and therefore every checkpoint byte, is
/// independent of available parallelism.
const ITEM_CHUNK: usize = 8;

// ---- augmentation ----------------------------------------------------------

/// Left rotation by `offset` positions (mod length).
pub fn circular_shift<E: Clone>(xs: &[E], offset: usize) -> Vec<E> {
    if xs.is_empty() {
        return Vec::new();
    }
    let k = offset % xs.len();
    let mut out = Vec::with_capacity(xs.len());
    out.extend_from_slice(&xs[k..]);
    out.extend_from_slice(&xs[..k]);
    out
}

/// Left rotation of an ASCII sequence string.
pub fn circular_shift_str(s: &str, offset: usize) -> String {
    String::from_utf8(circular_shift(s.as_bytes(), offset)).expect("ASCII rotation")
}

/// Rotates the raw sequence to `offset`, tokenizes, keeps the token prefix.
pub fn augment_with_offset(
    record: &PlasmidRecord,
    bpe: &BpeModel,
    max_tokens: usize,
    offset: usize,
) -> TokenSequence {
    let shifted = circular_shift_str(&record.sequence, offset);
    let mut toks = bpe.encode(&shifted);
    toks.ids.truncate(max_tokens);
    toks
}

/// Online training augmentation: one fresh uniform circular shift.
pub fn augment_for_training<R: rand::Rng>(
    record: &PlasmidRecord,
    bpe: &BpeModel,
    max_tokens: usize,
    rng: &mut R,
) -> TokenSequence {
    let offset = rng.random_range(0..record.sequence.len().max(1));
    augment_with_offset(record, bpe, max_tokens, offset)
}

// ---- hard negative mining ----------------------------------------------------

/// Hardest-negative selection, values only: for each anchor, the non-positive
/// lab whose L2-normalized embedding has the highest dot product with the
/// anchor. Ties go to the lowest lab index. `lab_rows` must already be
/// normalized.
pub fn mine_hard_negative_indices<T: Scalar>(
    lab_indices: &[usize],
    anchors: &[Vec<T>],
    lab_rows: &[Vec<T>],
) -> Result<Vec<usize>> {
    let num_labs = lab_rows.len();
    if num_labs < 2 {
        return Err(Error::InvalidInput(
            "hard negative mining needs at least two labs".into(),
        ));
    }
    if lab_indices.len() != anchors.len() {
        return Err(Error::Shape("one lab index per anchor".into()));
    }
    let mut out = Vec::with_capacity(anchors.len());
    for (&positive, anchor) in lab_indices.iter().zip(anchors) {
        if positive >= num_labs {
            return Err(Error::InvalidInput(format!(
                "lab index {positive} out of range for {num_labs} labs"
            )));
        }
        let mut best: Option<(usize, T)> = None;
        for (li, row) in lab_rows.iter().enumerate() {
            if li == positive {
                continue;
            }
            let sim = dot(anchor, row);
            let better = match best {
                None => true,
                Some((_, bs)) => sim > bs,
            };
            if better {
                best = Some((li, sim));
            }
        }
        out.push(best.expect("at least one negative lab").0);
    }
    Ok(out)
}

/// Tape-level mining per the tensor formulation: selection happens outside
/// the gradient path, then the chosen rows are gathered and normalized on
/// the tape so gradients flow into the mined lab embeddings only.
pub fn mine_hard_negatives<T: Scalar>(
    tape: &Tape<T>,
    lab_indices: &[usize],
    anchors: &[DiffTensor],
    lab_table: &DiffTensor,
) -> Result<Vec<DiffTensor>> {
    let anchor_values: Vec<Vec<T>> = anchors.iter().map(|a| tape.value(a)).collect();
    let lab_values = tape.value(lab_table);
    let metric_dim = lab_table.shape()[1];
    let rows: Vec<Vec<T>> = lab_values
        .chunks(metric_dim)
        .map(normalize_row)
        .collect();
    let chosen = mine_hard_negative_indices(lab_indices, &anchor_values, &rows)?;
    chosen
        .into_iter()
        .map(|idx| {
            let row = tape.embedding_lookup(lab_table, &[idx])?;
            let flat = tape.flatten(&row);
            tape.l2_normalize(&flat)
        })
        .collect()
}

fn normalize_row<T: Scalar>(row: &[T]) -> Vec<T> {
    let norm = dot(row, row).sqrt();
    if norm.as_f64() <= crate::tensor::L2_NORM_EPSILON {
        row.to_vec()
    } else {
        row.iter().map(|&v| v / norm).collect()
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

// ---- losses -------------------------------------------------------------------

/// Cosine-margin hinge, averaged over the batch:
/// `mean(max(0, margin - cos(a, p) + cos(a, n)))` with unit-norm rows, so
/// the cosines are plain dot products.
pub fn triplet_loss<T: Scalar>(
    tape: &Tape<T>,
    triplets: &[(DiffTensor, DiffTensor, DiffTensor)],
    margin: f64,
) -> Result<DiffTensor> {
    if triplets.is_empty() {
        return Err(Error::Shape("triplet loss over an empty batch".into()));
    }
    let hinges: Vec<DiffTensor> = triplets
        .iter()
        .map(|(a, p, n)| triplet_hinge(tape, a, p, n, margin))
        .collect::<Result<_>>()?;
    let total = tape.add_n(&hinges)?;
    Ok(tape.mul_scalar(&total, T::from_f64(1.0 / triplets.len() as f64)))
}

fn triplet_hinge<T: Scalar>(
    tape: &Tape<T>,
    anchor: &DiffTensor,
    positive: &DiffTensor,
    negative: &DiffTensor,
    margin: f64,
) -> Result<DiffTensor> {
    let pos_sim = tape.dot(anchor, positive)?;
    let neg_sim = tape.dot(anchor, negative)?;
    let diff = tape.sub(&neg_sim, &pos_sim)?;
    let shifted = tape.add_scalar(&diff, T::from_f64(margin));
    Ok(tape.relu(&shifted))
}

/// Mean negative log softmax probability of the targets, computed with
/// log-sum-exp stabilization.
pub fn cross_entropy_loss<T: Scalar>(
    tape: &Tape<T>,
    logits: &[DiffTensor],
    targets: &[usize],
) -> Result<DiffTensor> {
    if logits.is_empty() || logits.len() != targets.len() {
        return Err(Error::Shape(
            "cross entropy needs one target per logit row".into(),
        ));
    }
    let items: Vec<DiffTensor> = logits
        .iter()
        .zip(targets)
        .map(|(row, &target)| {
            let lse = tape.log_sum_exp(row)?;
            let picked = tape.index(row, target)?;
            tape.sub(&lse, &picked)
        })
        .collect::<Result<_>>()?;
    let total = tape.add_n(&items)?;
    Ok(tape.mul_scalar(&total, T::from_f64(1.0 / items.len() as f64)))
}

// ---- optimizer -------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decoupled weight decay, applied as `p -= lr * wd * p` before the
    /// moment update.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// Per-parameter first/second moment accumulators.
pub struct AdamState<T> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(model: &AttributionModel<T>) -> Self {
        let shapes: Vec<usize> = model.param_entries().iter().map(|(_, p)| p.len()).collect();
        Self {
            m: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update. Returns `false` (leaving parameters and
    /// moments untouched) when any gradient value is non-finite.
    pub fn step(
        &mut self,
        model: &mut AttributionModel<T>,
        grads: &[Vec<T>],
        lr: f64,
        cfg: &AdamConfig,
    ) -> Result<bool> {
        let mut entries = model.param_entries_mut();
        if entries.len() != grads.len() {
            return Err(Error::Shape(format!(
                "expected {} gradient arrays, got {}",
                entries.len(),
                grads.len()
            )));
        }
        for ((_, p), g) in entries.iter().zip(grads) {
            if p.len() != g.len() {
                return Err(Error::Shape("gradient shape mismatch".into()));
            }
        }
        if grads
            .iter()
            .any(|g| g.iter().any(|v| !v.as_f64().is_finite()))
        {
            return Ok(false);
        }

        self.step += 1;
        let t = self.step as i32;
        let beta1 = T::from_f64(cfg.beta1);
        let beta2 = T::from_f64(cfg.beta2);
        let one = T::one();
        let bias1 = T::from_f64(1.0 - cfg.beta1.powi(t));
        let bias2 = T::from_f64(1.0 - cfg.beta2.powi(t));
        let eps = T::from_f64(cfg.epsilon);
        let lr_t = T::from_f64(lr);
        let decay = T::from_f64(lr * cfg.weight_decay);

        for (pi, (_, param)) in entries.iter_mut().enumerate() {
            let m = &mut self.m[pi];
            let v = &mut self.v[pi];
            let g = &grads[pi];
            for i in 0..param.data.len() {
                let p = &mut param.data[i];
                *p = *p - decay * *p;
                m[i] = beta1 * m[i] + (one - beta1) * g[i];
                v[i] = beta2 * v[i] + (one - beta2) * g[i] * g[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                *p = *p - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(true)
    }
}

// ---- learning-rate schedule ---------------------------------------------------------

/// One-cycle policy: cosine rise from `max_lr / div_start` to `max_lr` over
/// the warmup fraction of steps, then cosine fall to
/// `max_lr / div_start / div_final`.
#[derive(Clone, Debug)]
pub struct OneCycleSchedule {
    pub max_lr: f64,
    pub total_steps: usize,
    pub warmup_fraction: f64,
    pub div_start: f64,
    pub div_final: f64,
}

impl OneCycleSchedule {
    pub fn new(max_lr: f64, total_steps: usize) -> Self {
        Self {
            max_lr,
            total_steps: total_steps.max(1),
            warmup_fraction: 0.3,
            div_start: 25.0,
            div_final: 1e4,
        }
    }

    pub fn start_lr(&self) -> f64 {
        self.max_lr / self.div_start
    }

    pub fn final_lr(&self) -> f64 {
        self.max_lr / self.div_start / self.div_final
    }

    fn warmup_steps(&self) -> usize {
        if self.total_steps <= 1 {
            return 0;
        }
        (self.warmup_fraction * (self.total_steps - 1) as f64).round() as usize
    }

    /// Learning rate at `step`; the flag reports a step beyond the schedule
    /// (clamped to the final rate).
    pub fn lr(&self, step: usize) -> (f64, bool) {
        let last = self.total_steps - 1;
        let clamped = step > last;
        let t = step.min(last);
        let w = self.warmup_steps();
        let lr = if t <= w {
            if w == 0 {
                // Degenerate schedule: peak immediately.
                self.max_lr
            } else {
                let p = t as f64 / w as f64;
                cosine_blend(self.start_lr(), self.max_lr, p)
            }
        } else {
            let span = (last - w).max(1);
            let p = (t - w) as f64 / span as f64;
            cosine_blend(self.max_lr, self.final_lr(), p)
        };
        (lr, clamped)
    }
}

/// Cosine interpolation from `a` (p = 0) to `b` (p = 1).
fn cosine_blend(a: f64, b: f64, p: f64) -> f64 {
    a + (b - a) * (1.0 - (std::f64::consts::PI * p).cos()) / 2.0
}

// ---- epoch loop --------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_top1: f64,
    pub val_top10: f64,
    pub lr: f64,
}

pub struct FitOutcome<T> {
    /// Best-validation model (final model when there is no validation set).
    pub model: AttributionModel<T>,
    pub metrics: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub warnings: Vec<String>,
    /// Optimizer steps skipped because of non-finite gradients.
    pub skipped_steps: usize,
}

pub fn write_metrics_csv(path: &std::path::Path, metrics: &[EpochMetrics]) -> Result<()> {
    use std::io::Write as _;
    let mut out = String::from("epoch,train_loss,val_loss,val_top1,val_top10,lr\n");
    for m in metrics {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            m.epoch, m.train_loss, m.val_loss, m.val_top1, m.val_top10, m.lr
        ));
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

struct Item {
    record_index: usize,
    lab: usize,
}

/// Trains a fresh model on the plan's train records, validating per epoch on
/// its validation records. Deterministic given the run seed: augmentation,
/// dropout masks, and shuffling all derive from named substreams, and batch
/// gradients reduce in a fixed order regardless of thread count.
pub fn fit<T: Scalar>(
    run: &RunConfig,
    records: &[PlasmidRecord],
    catalog: &LabCatalog,
    plan: &SplitPlan,
    bpe: &BpeModel,
) -> Result<FitOutcome<T>> {
    let mut warnings = Vec::new();
    if run.head == HeadKind::Triplet && run.margin <= 0.0 {
        warnings.push(format!(
            "margin {} is not positive; triplets satisfy it trivially",
            run.margin
        ));
    }

    let lab_of = |r: &PlasmidRecord| -> Result<usize> {
        catalog.index_of(&r.lab_id).ok_or_else(|| {
            Error::InvalidInput(format!("record {} has unknown lab {:?}", r.sequence_id, r.lab_id))
        })
    };
    let mut train_items = Vec::new();
    let mut val_items = Vec::new();
    for (i, r) in records.iter().enumerate() {
        match plan.assignment(&r.sequence_id) {
            Some(Assignment::Train) => train_items.push(Item {
                record_index: i,
                lab: lab_of(r)?,
            }),
            Some(Assignment::Validation) => val_items.push(Item {
                record_index: i,
                lab: lab_of(r)?,
            }),
            Some(Assignment::Test) | None => {}
        }
    }
    if train_items.is_empty() {
        return Err(Error::InvalidInput("no training records in split".into()));
    }
    if val_items.is_empty() {
        warnings.push("empty validation set; metrics report zeros and the final model is kept".into());
    }

    let config = run.encoder_config(catalog.len());
    config.validate()?;
    let mut model: AttributionModel<T> = AttributionModel::init(config.clone(), run.seed)?;
    let adam_cfg = AdamConfig {
        weight_decay: run.weight_decay,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::new(&model);

    let steps_per_epoch = train_items.len().div_ceil(run.batch_size.max(1));
    let schedule = OneCycleSchedule::new(run.max_lr, run.epochs * steps_per_epoch);

    // Validation inputs never change: tokenize once.
    let val_tokens: Vec<Vec<u32>> = val_items
        .par_iter()
        .map(|it| {
            let mut toks = bpe.encode(&records[it.record_index].sequence);
            toks.ids.truncate(run.max_tokens);
            toks.ids
        })
        .collect();

    let mut best: Option<(AttributionModel<T>, usize, f64, f64)> = None;
    let mut metrics = Vec::with_capacity(run.epochs);
    let mut skipped_steps = 0usize;
    let mut divergent_streak = 0usize;
    let mut global_step = 0usize;
    let mut last_lr = schedule.start_lr();

    for epoch in 0..run.epochs {
        let mut order: Vec<usize> = (0..train_items.len()).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut substream_indexed(run.seed, "epoch-shuffle", epoch as u64));

        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for batch in order.chunks(run.batch_size.max(1)) {
            let mask = if run.dropout > 0.0 {
                let mut rng = substream_indexed(run.seed, "dropout-mask", global_step as u64);
                Some(FeatureMask::<T>::sample(
                    config.token_embed_dim,
                    run.dropout,
                    &mut rng,
                )?)
            } else {
                None
            };

            // Fresh circular shift per item, from a per-(epoch, item) stream.
            let batch_tokens: Vec<Vec<u32>> = batch
                .par_iter()
                .map(|&oi| {
                    let it = &train_items[oi];
                    let stream = ((epoch as u64) << 32) | it.record_index as u64;
                    let mut rng = substream_indexed(run.seed, "augment", stream);
                    augment_for_training(
                        &records[it.record_index],
                        bpe,
                        run.max_tokens,
                        &mut rng,
                    )
                    .ids
                })
                .collect();

            let lab_rows: Option<Vec<Vec<T>>> = model
                .lab_table
                .as_ref()
                .map(|t| t.data.chunks(config.metric_dim).map(normalize_row).collect());

            let batch_len = batch.len();
            let chunk_results: Result<Vec<(f64, Vec<Vec<T>>)>> = batch
                .par_chunks(ITEM_CHUNK)
                .enumerate()
                .map(|(ci, chunk)| {
                    run_train_chunk(
                        &model,
                        run,
                        chunk,
                        ci,
                        batch_len,
                        &batch_tokens,
                        &train_items,
                        records,
                        mask.as_ref(),
                        lab_rows.as_deref(),
                    )
                })
                .collect();
            let chunk_results = chunk_results?;

            // Deterministic reduction in chunk order.
            let mut batch_loss = 0.0f64;
            let mut grads: Vec<Vec<T>> = model
                .param_entries()
                .iter()
                .map(|(_, p)| vec![T::zero(); p.len()])
                .collect();
            for (loss, chunk_grads) in chunk_results {
                batch_loss += loss;
                for (acc, g) in grads.iter_mut().zip(chunk_grads) {
                    for (a, b) in acc.iter_mut().zip(g) {
                        *a += b;
                    }
                }
            }

            if !batch_loss.is_finite() {
                divergent_streak += 1;
                if divergent_streak >= 3 {
                    return Err(Error::Diverged(format!(
                        "non-finite loss for {divergent_streak} consecutive batches at epoch {epoch}"
                    )));
                }
            } else {
                divergent_streak = 0;
            }

            let (lr, _) = schedule.lr(global_step);
            last_lr = lr;
            if !adam.step(&mut model, &grads, lr, &adam_cfg)? {
                skipped_steps += 1;
                warnings.push(format!(
                    "skipped optimizer step {global_step}: non-finite gradient"
                ));
            }
            global_step += 1;
            epoch_loss += batch_loss;
            batches += 1;
        }

        let train_loss = epoch_loss / batches.max(1) as f64;
        let (val_loss, val_top1, val_top10) =
            validate(&model, run, &val_items, &val_tokens, records)?;
        metrics.push(EpochMetrics {
            epoch,
            train_loss,
            val_loss,
            val_top1,
            val_top10,
            lr: last_lr,
        });

        let better = match &best {
            None => true,
            Some((_, _, best_top1, best_loss)) => {
                val_top1 > *best_top1 || (val_top1 == *best_top1 && val_loss < *best_loss)
            }
        };
        if better {
            best = Some((model.clone(), epoch, val_top1, val_loss));
        }

        if let Some(stop_at) = run.early_stop_top1 {
            if !val_items.is_empty() && val_top1 >= stop_at {
                warnings.push(format!(
                    "early stop at epoch {epoch}: validation top-1 {val_top1:.4} >= {stop_at}"
                ));
                break;
            }
        }
    }

    let (best_model, best_epoch) = match best {
        Some((m, e, _, _)) if !val_items.is_empty() => (m, e),
        _ => (model, run.epochs.saturating_sub(1)),
    };
    Ok(FitOutcome {
        model: best_model,
        metrics,
        best_epoch,
        warnings,
        skipped_steps,
    })
}

/// Forward/backward for up to [`ITEM_CHUNK`] items on one tape. Returns the
/// chunk's contribution to the batch loss and the batch-mean gradient.
#[allow(clippy::too_many_arguments)]
fn run_train_chunk<T: Scalar>(
    model: &AttributionModel<T>,
    run: &RunConfig,
    chunk: &[usize],
    chunk_index: usize,
    batch_len: usize,
    batch_tokens: &[Vec<u32>],
    train_items: &[Item],
    records: &[PlasmidRecord],
    mask: Option<&FeatureMask<T>>,
    lab_rows: Option<&[Vec<T>]>,
) -> Result<(f64, Vec<Vec<T>>)> {
    let tape = Tape::new();
    let bound = model.bind(&tape, true)?;
    let mut per_item: Vec<DiffTensor> = Vec::with_capacity(chunk.len());
    for (pos_in_chunk, &oi) in chunk.iter().enumerate() {
        let batch_pos = chunk_index * ITEM_CHUNK + pos_in_chunk;
        let item = &train_items[oi];
        let record = &records[item.record_index];
        let tokens = &batch_tokens[batch_pos];
        let features = bound.encode_sequence(tokens, &record.metadata, mask)?;
        match run.head {
            HeadKind::Triplet => {
                let anchor = bound.sequence_embedding(&features)?;
                let rows = lab_rows.expect("triplet head has lab rows");
                let anchor_value = tape.value(&anchor);
                let negative_idx =
                    mine_hard_negative_indices(&[item.lab], &[anchor_value], rows)?[0];
                let lab_table = bound.lab_table.as_ref().expect("triplet head");
                let positive = {
                    let row = tape.embedding_lookup(lab_table, &[item.lab])?;
                    let flat = tape.flatten(&row);
                    tape.l2_normalize(&flat)?
                };
                let negative = {
                    let row = tape.embedding_lookup(lab_table, &[negative_idx])?;
                    let flat = tape.flatten(&row);
                    tape.l2_normalize(&flat)?
                };
                per_item.push(triplet_hinge(&tape, &anchor, &positive, &negative, run.margin)?);
            }
            HeadKind::Softmax => {
                let logits = bound.softmax_logits(&features)?;
                let lse = tape.log_sum_exp(&logits)?;
                let picked = tape.index(&logits, item.lab)?;
                per_item.push(tape.sub(&lse, &picked)?);
            }
        }
    }
    let total = tape.add_n(&per_item)?;
    let scaled = tape.mul_scalar(&total, T::from_f64(1.0 / batch_len as f64));
    tape.backward(&scaled)?;
    let grads: Vec<Vec<T>> = bound
        .param_tensors()
        .iter()
        .map(|t| tape.grad(t).unwrap_or_else(|| vec![T::zero(); t.len()]))
        .collect();
    Ok((tape.scalar_value(&scaled).as_f64(), grads))
}

/// Validation pass: loss plus top-1/top-10 accuracy, computed in parallel
/// chunks with a deterministic merge.
fn validate<T: Scalar>(
    model: &AttributionModel<T>,
    run: &RunConfig,
    val_items: &[Item],
    val_tokens: &[Vec<u32>],
    records: &[PlasmidRecord],
) -> Result<(f64, f64, f64)> {
    if val_items.is_empty() {
        return Ok((0.0, 0.0, 0.0));
    }
    let lab_rows: Option<Vec<Vec<T>>> = model
        .lab_table
        .as_ref()
        .map(|t| {
            t.data
                .chunks(model.config.metric_dim)
                .map(normalize_row)
                .collect()
        });

    let index_range: Vec<usize> = (0..val_items.len()).collect();
    let chunked: Result<Vec<Vec<(f64, bool, bool)>>> = index_range
        .par_chunks(ITEM_CHUNK)
        .map(|chunk| -> Result<Vec<(f64, bool, bool)>> {
            let tape = Tape::new();
            let bound = model.bind(&tape, false)?;
            let mut out = Vec::with_capacity(chunk.len());
            for &vi in chunk {
                let item = &val_items[vi];
                let record = &records[item.record_index];
                let features = bound.encode_sequence(&val_tokens[vi], &record.metadata, None)?;
                match run.head {
                    HeadKind::Triplet => {
                        let emb = tape.value(&bound.sequence_embedding(&features)?);
                        let rows = lab_rows.as_deref().expect("triplet head");
                        let sims: Vec<f64> =
                            rows.iter().map(|r| dot(&emb, r).as_f64()).collect();
                        let (top1, top10) = rank_hit(&sims, item.lab);
                        let negative =
                            mine_hard_negative_indices(&[item.lab], &[emb.clone()], rows)?[0];
                        let loss = (run.margin - sims[item.lab] + sims[negative]).max(0.0);
                        out.push((loss, top1, top10));
                    }
                    HeadKind::Softmax => {
                        let logits = tape.value(&bound.softmax_logits(&features)?);
                        let scores: Vec<f64> = logits.iter().map(|v| v.as_f64()).collect();
                        let (top1, top10) = rank_hit(&scores, item.lab);
                        let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let lse = m + scores.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                        out.push((lse - scores[item.lab], top1, top10));
                    }
                }
            }
            Ok(out)
        })
        .collect();
    // Flatten in chunk order so float accumulation is order-stable.
    let per_item: Vec<(f64, bool, bool)> = chunked?.into_iter().flatten().collect();

    let n = per_item.len() as f64;
    let loss = per_item.iter().map(|(l, _, _)| l).sum::<f64>() / n;
    let top1 = per_item.iter().filter(|(_, t1, _)| *t1).count() as f64 / n;
    let top10 = per_item.iter().filter(|(_, _, t10)| *t10).count() as f64 / n;
    Ok((loss, top1, top10))
}

/// True-lab hit at rank 1 and rank 10, with deterministic index tie-breaks.
fn rank_hit(scores: &[f64], truth: usize) -> (bool, bool) {
    // Rank = number of labs strictly better, plus those equal with a lower
    // index.
    let mut better = 0usize;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[truth] || (s == scores[truth] && i < truth) {
            better += 1;
        }
    }
    (better == 0, better < 10)
}
