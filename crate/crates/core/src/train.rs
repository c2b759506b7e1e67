//! Joint generator/discriminator training.
//!
//! Per batch: the generator encodes the original sequences and is trained
//! with next-item prediction; a fraction `alpha` of each row's target
//! positions is replaced by items drawn from the generator's own softmax; the
//! discriminator encodes the replaced target sequence and classifies every
//! position as the real item or a replacement. The total loss is
//! `L_nip + lambda * L_disc`, minimized in a single backward pass.
//!
//! Replacements are read from the logit values, never through the tape, so
//! the discriminator loss cannot reach the generator's own parameters except
//! through explicitly shared ones.

use std::time::Instant;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Adam, Graph, ParamStore, Scalar, Var};
use crate::config::{SamplerMode, TrainConfig, Variant};
use crate::data::{derive_seed, pad_and_batch, IdMatrix, PaddedBatch, SplitDataset, Which, PAD};
use crate::encoder::{encode, EncoderParams, HiddenStates, MASK_VALUE};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_split, MetricsReport};
use crate::model::{DiscriminatorParams, Layout, Model};

/// `⟨embedding(v), h_t⟩` for every encoded position, as `[B·width × V]`.
/// The padding column is pinned to a large negative value.
pub fn generator_logits<F: Scalar>(g: &mut Graph<F>, hidden: &HiddenStates, item_embeddings: Var) -> Result<Var> {
    let h = g.reshape(hidden.values, &[hidden.batch * hidden.width, hidden.hidden])?;
    let logits = g.matmul_nt(h, item_embeddings)?;
    g.fill_column(logits, PAD, F::of(MASK_VALUE))
}

/// Mean negative log-likelihood of the true next items at valid positions.
pub fn nip_loss<F: Scalar>(g: &mut Graph<F>, logits: Var, targets: &[usize], validity: &[bool]) -> Result<Var> {
    let ignore: Vec<bool> = validity.iter().map(|&v| !v).collect();
    g.softmax_cross_entropy(logits, targets, &ignore)
}

/// Number of replaced positions for a row with `valid` real targets:
/// `ceil(alpha * valid)`, capped at `valid`.
pub fn replacement_count(alpha: f64, valid: usize) -> usize {
    // the small offset keeps products like 0.3 * 10 from rounding up
    let k = (alpha * valid as f64 - 1e-9).ceil().max(0.0) as usize;
    k.min(valid)
}

/// Draws `replacement_count(alpha, valid)` distinct positions uniformly from
/// the valid entries of one row; returned in ascending order.
pub fn sample_positions<R: Rng + ?Sized>(validity_row: &[bool], alpha: f64, rng: &mut R) -> Vec<usize> {
    let valid: Vec<usize> = (0..validity_row.len()).filter(|&i| validity_row[i]).collect();
    let k = replacement_count(alpha, valid.len());
    if k == 0 {
        return Vec::new();
    }
    let mut picked: Vec<usize> = index::sample(rng, valid.len(), k).into_iter().map(|i| valid[i]).collect();
    picked.sort_unstable();
    picked
}

/// Discriminator input built from a batch: the target sequence with sampled
/// items at the replaced positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampledBatch {
    pub replaced_ids: IdMatrix,
    pub replacement_mask: Vec<bool>,
    /// `true` = real target.
    pub labels: Vec<bool>,
    pub validity: Vec<bool>,
}

impl SampledBatch {
    /// Nothing replaced; every valid position is real.
    pub fn unchanged(batch: &PaddedBatch) -> Self {
        SampledBatch {
            replaced_ids: batch.target_ids.clone(),
            replacement_mask: vec![false; batch.validity.len()],
            labels: vec![true; batch.validity.len()],
            validity: batch.validity.clone(),
        }
    }
}

fn draw<R: Rng + ?Sized>(row: &[f64], mode: SamplerMode, rng: &mut R) -> usize {
    match mode {
        SamplerMode::Argmax => {
            let mut best = 0;
            for (j, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = j;
                }
            }
            best
        }
        SamplerMode::Multinomial => {
            let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let weights: Vec<f64> = row.iter().map(|&x| (x - mx).exp()).collect();
            let total: f64 = weights.iter().sum();
            let mut u = rng.gen::<f64>() * total;
            let mut last = 0;
            for (j, &w) in weights.iter().enumerate() {
                if w > 0.0 {
                    last = j;
                    if u < w {
                        return j;
                    }
                    u -= w;
                }
            }
            last
        }
    }
}

/// Replaces the targets at `positions[row]` with draws from the generator's
/// distribution at the same position, which conditions on the inputs up to
/// and including that column, i.e. on the prefix that precedes the target.
///
/// `logits` holds the `[B·width × V]` generator logits for columns
/// `start..T`.
pub fn sample_replacements<F: Scalar, R: Rng + ?Sized>(
    batch: &PaddedBatch,
    positions: &[Vec<usize>],
    logits: &[F],
    start: usize,
    mode: SamplerMode,
    rng: &mut R,
) -> Result<SampledBatch> {
    let (b, t) = (batch.batch_size(), batch.max_len());
    let width = t - start;
    let v = logits.len() / (b * width).max(1);
    let mut out = SampledBatch::unchanged(batch);
    let mut row_buf = vec![0.0f64; v];
    for (r, row_positions) in positions.iter().enumerate() {
        for &p in row_positions {
            if p >= t || p < start || !batch.validity[r * t + p] {
                return Err(Error::Sampler { row: r, position: p });
            }
            let offset = (r * width + p - start) * v;
            for (dst, &x) in row_buf.iter_mut().zip(&logits[offset..offset + v]) {
                *dst = x.as_f64();
            }
            let sampled = draw(&row_buf, mode, rng);
            let idx = r * t + p;
            out.replaced_ids.data[idx] = sampled;
            out.replacement_mask[idx] = true;
            out.labels[idx] = sampled == batch.target_ids.data[idx];
        }
    }
    Ok(out)
}

/// Per-position logits `⟨w, ĥ_t⟩ + bias`, flattened to `[B·width]`.
pub fn discriminator_scores<F: Scalar>(
    g: &mut Graph<F>,
    hidden: &HiddenStates,
    store: &ParamStore<F>,
    head: &DiscriminatorParams,
    train: bool,
) -> Result<Var> {
    let n = hidden.batch * hidden.width;
    let h = g.reshape(hidden.values, &[n, hidden.hidden])?;
    let (w, bias) = if train {
        (g.param(store, head.w), g.param(store, head.bias))
    } else {
        (g.frozen_param(store, head.w), g.frozen_param(store, head.bias))
    };
    if g.shape(w) != [hidden.hidden] {
        return Err(Error::Shape {
            op: "discriminator_scores",
            lhs: g.shape(w).to_vec(),
            rhs: vec![hidden.hidden],
        });
    }
    let w = g.reshape(w, &[hidden.hidden, 1])?;
    let s = g.matmul(h, w)?;
    let s = g.reshape(s, &[n])?;
    g.add_broadcast(s, bias)
}

/// Mean BCE of real-vs-replaced labels over valid positions.
pub fn discriminator_loss<F: Scalar>(g: &mut Graph<F>, scores: Var, labels: &[bool], validity: &[bool]) -> Result<Var> {
    let ignore: Vec<bool> = validity.iter().map(|&v| !v).collect();
    g.sigmoid_bce(scores, labels, &ignore)
}

/// Generator half of the joint loss.
pub struct GeneratorPass {
    pub hidden: HiddenStates,
    pub logits: Var,
    pub loss: Var,
}

pub fn generator_forward<F: Scalar, R: Rng>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    generator: &EncoderParams,
    batch: &PaddedBatch,
    rng: Option<&mut R>,
) -> Result<GeneratorPass> {
    let hidden = encode(g, store, generator, &batch.input_ids, rng, true)?;
    let items = g.param(store, generator.item_embeddings);
    let logits = generator_logits(g, &hidden, items)?;
    let targets = hidden.window_ids(&batch.target_ids);
    let validity = hidden.window(&batch.validity);
    let loss = nip_loss(g, logits, &targets, &validity)?;
    Ok(GeneratorPass { hidden, logits, loss })
}

pub fn discriminator_forward<F: Scalar, R: Rng>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    discriminator: &EncoderParams,
    head: &DiscriminatorParams,
    sampled: &SampledBatch,
    rng: Option<&mut R>,
) -> Result<Var> {
    let hidden = encode(g, store, discriminator, &sampled.replaced_ids, rng, true)?;
    let scores = discriminator_scores(g, &hidden, store, head, true)?;
    let labels = hidden.window(&sampled.labels);
    let validity = hidden.window(&sampled.validity);
    discriminator_loss(g, scores, &labels, &validity)
}

/// `L_nip + lambda * L_disc` for a fixed replacement sample, without dropout.
/// Returns `(nip, disc, total)`.
pub fn joint_loss<F: Scalar>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    layout: &Layout,
    batch: &PaddedBatch,
    sampled: &SampledBatch,
    lambda: f64,
) -> Result<(Var, Var, Var)> {
    let (disc, head) = layout
        .discriminator
        .as_ref()
        .zip(layout.head.as_ref())
        .ok_or_else(|| Error::Config("joint loss needs a discriminator".into()))?;
    let gen = generator_forward::<F, ChaCha8Rng>(g, store, &layout.generator, batch, None)?;
    let d = discriminator_forward::<F, ChaCha8Rng>(g, store, disc, head, sampled, None)?;
    let scaled = g.scale(d, F::of(lambda));
    let total = g.add(gen.loss, scaled)?;
    Ok((gen.loss, d, total))
}

/// Uniform negatives in `1..=num_items`, never equal to the target; 0 where
/// the position is invalid.
pub fn sample_negatives<R: Rng + ?Sized>(targets: &[usize], validity: &[bool], num_items: usize, rng: &mut R) -> Vec<usize> {
    targets
        .iter()
        .zip(validity)
        .map(|(&t, &ok)| {
            if !ok || num_items < 2 {
                return PAD;
            }
            loop {
                let n = rng.gen_range(1..=num_items);
                if n != t {
                    return n;
                }
            }
        })
        .collect()
}

/// Sequential BCE: the true next item against one sampled negative per
/// position, both scored by dot product with the hidden state.
pub fn sequential_bce_loss<F: Scalar>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    encoder: &EncoderParams,
    batch: &PaddedBatch,
    negatives_full: &[usize],
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let hidden = encode(g, store, encoder, &batch.input_ids, rng, true)?;
    let n = hidden.batch * hidden.width;
    let h = g.reshape(hidden.values, &[n, hidden.hidden])?;
    let items = g.param(store, encoder.item_embeddings);
    let targets = hidden.window_ids(&batch.target_ids);
    let negatives = hidden.window(negatives_full);
    let validity = hidden.window(&batch.validity);
    let ignore: Vec<bool> = validity.iter().map(|&v| !v).collect();
    let logit = |g: &mut Graph<F>, ids: &[usize]| -> Result<Var> {
        let e = g.embedding(items, ids, &[n])?;
        let p = g.mul(h, e)?;
        Ok(g.sum_last_axis(p))
    };
    let pos = logit(g, &targets)?;
    let neg = logit(g, &negatives)?;
    let lp = g.sigmoid_bce(pos, &vec![true; n], &ignore)?;
    let ln = g.sigmoid_bce(neg, &vec![false; n], &ignore)?;
    g.add(lp, ln)
}

/// Random streams of a training run. Generator dropout draws from its own
/// stream so the generator's trajectory does not depend on whether the
/// discriminator runs.
pub struct StepRngs {
    pub generator: ChaCha8Rng,
    pub discriminator: ChaCha8Rng,
}

const GEN_STREAM: u64 = 3;
const DISC_STREAM: u64 = 4;

impl StepRngs {
    pub fn new(seed: u64) -> Self {
        StepRngs {
            generator: ChaCha8Rng::seed_from_u64(derive_seed(seed, GEN_STREAM, 0)),
            discriminator: ChaCha8Rng::seed_from_u64(derive_seed(seed, DISC_STREAM, 0)),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepReport {
    pub loss_nip: f64,
    pub loss_disc: f64,
    pub loss_total: f64,
}

/// Forward, single backward and one Adam update on one batch.
pub fn joint_step(model: &mut Model, adam: &mut Adam, batch: &PaddedBatch, rngs: &mut StepRngs) -> Result<StepReport> {
    let cfg = &model.config;
    let layout = &model.layout;
    let store = &model.store;
    let mut g = Graph::<f32>::new();
    let (report, total) = match layout.variant {
        Variant::SequentialBce => {
            let negatives = sample_negatives(&batch.target_ids.data, &batch.validity, model.num_items, &mut rngs.discriminator);
            let loss = sequential_bce_loss(&mut g, store, &layout.generator, batch, &negatives, Some(&mut rngs.generator))?;
            let l = g.value(loss).item() as f64;
            (
                StepReport {
                    loss_nip: l,
                    loss_disc: 0.0,
                    loss_total: l,
                },
                loss,
            )
        }
        Variant::GeneratorOnly => {
            let gen = generator_forward(&mut g, store, &layout.generator, batch, Some(&mut rngs.generator))?;
            let l = g.value(gen.loss).item() as f64;
            (
                StepReport {
                    loss_nip: l,
                    loss_disc: 0.0,
                    loss_total: l,
                },
                gen.loss,
            )
        }
        Variant::Elecrec => {
            let (disc, head) = layout
                .discriminator
                .as_ref()
                .zip(layout.head.as_ref())
                .ok_or_else(|| Error::Config("elecrec model without discriminator".into()))?;
            let gen = generator_forward(&mut g, store, &layout.generator, batch, Some(&mut rngs.generator))?;
            let t = batch.max_len();
            let positions: Vec<Vec<usize>> = (0..batch.batch_size())
                .map(|r| sample_positions(&batch.validity[r * t..(r + 1) * t], cfg.alpha, &mut rngs.discriminator))
                .collect();
            let sampled = sample_replacements(
                batch,
                &positions,
                g.value(gen.logits).data(),
                gen.hidden.start,
                cfg.sampler,
                &mut rngs.discriminator,
            )?;
            let d = discriminator_forward(&mut g, store, disc, head, &sampled, Some(&mut rngs.discriminator))?;
            let scaled = g.scale(d, cfg.lambda as f32);
            let total = g.add(gen.loss, scaled)?;
            (
                StepReport {
                    loss_nip: g.value(gen.loss).item() as f64,
                    loss_disc: g.value(d).item() as f64,
                    loss_total: g.value(total).item() as f64,
                },
                total,
            )
        }
    };
    let grads = g.backward(total)?;
    model.store.zero_grad();
    model.store.accumulate(&grads);
    adam.step(&mut model.store)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub report: MetricsReport,
    pub loss_nip: f64,
    pub loss_disc: f64,
    /// Cumulative training time in milliseconds; 0 when timing is off.
    pub wall_ms: u64,
}

pub const HISTORY_HEADER: &str = "epoch,split,hr5,hr10,ndcg5,ndcg10,loss_nip,loss_disc,wall_ms";

impl HistoryRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.epoch,
            self.report.csv_fields(),
            self.loss_nip,
            self.loss_disc,
            self.wall_ms
        )
    }
}

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation NDCG@10.
    pub model: Model,
    pub history: Vec<HistoryRow>,
    pub best_epoch: usize,
    pub best: MetricsReport,
}

/// Every step allocates and frees a few hundred megabytes of same-sized
/// buffers. glibc hands large blocks back to the kernel on free, so each step
/// would page-fault its working set in again; keeping them in the heap
/// roughly halves step time.
fn retain_freed_memory() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    {
        static ONCE: std::sync::Once = std::sync::Once::new();
        extern "C" {
            fn mallopt(param: i32, value: i32) -> i32;
        }
        const M_TRIM_THRESHOLD: i32 = -1;
        const M_MMAP_THRESHOLD: i32 = -3;
        ONCE.call_once(|| unsafe {
            mallopt(M_MMAP_THRESHOLD, 32 << 20);
            mallopt(M_TRIM_THRESHOLD, i32::MAX);
        });
    }
}

/// Trains until `patience` epochs pass without a strictly better validation
/// NDCG@10, or `epochs_max` is reached.
pub fn train_loop(split: &SplitDataset, config: &TrainConfig) -> Result<TrainOutcome> {
    train_loop_with(split, config, |_| {})
}

pub fn train_loop_with(
    split: &SplitDataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&HistoryRow),
) -> Result<TrainOutcome> {
    retain_freed_memory();
    let mut model = Model::new(config, split.num_items)?;
    let mut adam = Adam::new(config.adam(), &model.store);
    let mut rngs = StepRngs::new(config.seed);
    let mut history = Vec::new();
    let mut best: Option<(usize, MetricsReport, ParamStore)> = None;
    let mut stale = 0;
    let mut train_time = 0u128;

    for epoch in 1..=config.epochs_max {
        let started = Instant::now();
        let batches = pad_and_batch(split, config.max_len, config.batch_size, config.seed, epoch as u64);
        let (mut nip, mut disc, mut weight) = (0.0, 0.0, 0.0);
        for batch in &batches {
            if batch.valid_count() == 0 {
                continue;
            }
            let r = joint_step(&mut model, &mut adam, batch, &mut rngs)?;
            let w = batch.batch_size() as f64;
            nip += r.loss_nip * w;
            disc += r.loss_disc * w;
            weight += w;
        }
        train_time += started.elapsed().as_millis();
        let report = evaluate_split(&model, split, Which::Valid)?;
        let row = HistoryRow {
            epoch,
            report,
            loss_nip: if weight > 0.0 { nip / weight } else { 0.0 },
            loss_disc: if weight > 0.0 { disc / weight } else { 0.0 },
            wall_ms: if config.timing { train_time as u64 } else { 0 },
        };
        on_epoch(&row);
        let improved = best.as_ref().is_none_or(|(_, b, _)| row.report.ndcg(10) > b.ndcg(10));
        if improved {
            best = Some((epoch, row.report.clone(), model.store.clone()));
            stale = 0;
        } else {
            stale += 1;
        }
        history.push(row);
        if stale >= config.patience {
            break;
        }
    }
    let (best_epoch, best_report, best_store) = best.expect("at least one epoch");
    model.store = best_store;
    model.store.clear_grad();
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        best: best_report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn batch_of(seqs: &[&[usize]], t: usize) -> PaddedBatch {
        PaddedBatch::from_sequences(seqs, t, (0..seqs.len()).collect())
    }

    #[test]
    fn replacement_counts() {
        assert_eq!(replacement_count(0.5, 50), 25);
        assert_eq!(replacement_count(0.0, 50), 0);
        assert_eq!(replacement_count(1.0, 7), 7);
        assert_eq!(replacement_count(0.3, 10), 3);
        assert_eq!(replacement_count(0.1, 3), 1);
    }

    #[test]
    fn sampled_positions_are_distinct_and_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let row = [false, false, true, true, true, true, true];
        assert!(sample_positions(&row, 0.0, &mut rng).is_empty());
        assert_eq!(sample_positions(&row, 1.0, &mut rng), vec![2, 3, 4, 5, 6]);
        let p = sample_positions(&row, 0.5, &mut rng);
        assert_eq!(p.len(), 3);
        assert!(p.windows(2).all(|w| w[0] < w[1]) && p.iter().all(|&i| row[i]));
    }

    #[test]
    fn argmax_replacements_on_toy_table() {
        // 1×4 batch: inputs [0,1,2,3], targets [0,2,3,4]; V = 5.
        let batch = batch_of(&[&[1, 2, 3, 4]], 4);
        #[rustfmt::skip]
        let logits: Vec<f32> = vec![
            -1e9, 0.0, 0.0, 0.0, 0.0,
            -1e9, 0.1, 0.9, 0.2, 0.0,
            -1e9, 0.0, 0.0, 0.1, 0.5,
            -1e9, 3.0, 0.0, 0.0, 1.0,
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample_replacements(&batch, &[vec![1, 2, 3]], &logits, 0, SamplerMode::Argmax, &mut rng).unwrap();
        assert_eq!(s.replaced_ids.row(0), &[0, 2, 4, 1]);
        assert_eq!(s.labels, vec![true, true, false, false]);
        assert_eq!(s.replacement_mask, vec![false, true, true, true]);

        let err = sample_replacements(&batch, &[vec![0]], &logits, 0, SamplerMode::Argmax, &mut rng);
        assert!(matches!(err, Err(Error::Sampler { row: 0, position: 0 })));
    }

    #[test]
    fn alpha_zero_keeps_targets() {
        let batch = batch_of(&[&[3, 1, 2, 4], &[2, 2]], 5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let positions: Vec<Vec<usize>> = (0..2).map(|r| sample_positions(&batch.validity[r * 5..(r + 1) * 5], 0.0, &mut rng)).collect();
        let logits = vec![0.0f32; 2 * 5 * 5];
        let s = sample_replacements(&batch, &positions, &logits, 0, SamplerMode::Multinomial, &mut rng).unwrap();
        assert_eq!(s.replaced_ids, batch.target_ids);
        assert!(s.labels.iter().all(|&l| l));
    }

    #[test]
    fn confident_generator_yields_real_labels() {
        let batch = batch_of(&[&[1, 2, 3, 4, 5]], 4);
        let v = 6;
        let mut logits = vec![0.0f32; 4 * v];
        for c in 0..4 {
            let target = batch.target_ids.get(0, c);
            for j in 0..v {
                logits[c * v + j] = if j == target { 60.0 } else { -60.0 };
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample_replacements(&batch, &[vec![0, 1, 2, 3]], &logits, 0, SamplerMode::Multinomial, &mut rng).unwrap();
        assert!(s.replacement_mask.iter().all(|&m| m));
        assert!(s.labels.iter().all(|&l| l));
    }

    #[test]
    fn negatives_never_hit_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let targets: Vec<usize> = (0..500).map(|i| 1 + i % 3).collect();
        let mut validity = vec![true; 500];
        validity[7] = false;
        let neg = sample_negatives(&targets, &validity, 3, &mut rng);
        assert_eq!(neg[7], PAD);
        for i in (0..500).filter(|&i| validity[i]) {
            assert!(neg[i] != targets[i] && (1..=3).contains(&neg[i]));
        }
    }

    #[test]
    fn discriminator_scores_examples() {
        let mut store = ParamStore::<f32>::new();
        let head = DiscriminatorParams {
            w: store.add("w", Tensor::zeros(&[4])),
            bias: store.add("b", Tensor::zeros(&[1])),
        };
        let mut g = Graph::<f32>::new();
        let values = g.constant(Tensor::from_f32(&[1, 2, 4], &[1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 0.0, 2.0]).unwrap());
        let hidden = HiddenStates {
            values,
            start: 0,
            width: 2,
            batch: 1,
            hidden: 4,
        };
        let s = discriminator_scores(&mut g, &hidden, &store, &head, false).unwrap();
        assert_eq!(g.value(s).data(), &[0.0, 0.0]);
        let l = discriminator_loss(&mut g, s, &[true, false], &[true, true]).unwrap();
        assert!((g.value(l).item() - 2f32.ln()).abs() < 1e-6);

        *store.value_mut(head.w) = Tensor::from_f32(&[4], &[1.0, 1.0, 1.0, 1.0]).unwrap();
        let mut g = Graph::<f32>::new();
        let values = g.constant(Tensor::filled(&[1, 1, 4], 10.0));
        let hidden = HiddenStates {
            values,
            start: 0,
            width: 1,
            batch: 1,
            hidden: 4,
        };
        let s = discriminator_scores(&mut g, &hidden, &store, &head, false).unwrap();
        let l = discriminator_loss(&mut g, s, &[true], &[true]).unwrap();
        assert!(g.value(l).item() < 1e-8);
    }
}
