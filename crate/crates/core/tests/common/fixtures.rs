//! Small models, batches and training runs shared by the oracle and
//! acceptance tests.

use elecrec::autodiff::{Adam, Graph, ParamStore, Scalar, Var};
use elecrec::config::{SamplerMode, TrainConfig, VariantMode};
use elecrec::data::{leave_one_out_split, pad_and_batch, synth_generate, PaddedBatch, SplitDataset, Which};
use elecrec::metrics::evaluate_split;
use elecrec::model::Model;
use elecrec::train::*;
use elecrec::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{check_store, ParamLossFn, Report};

pub fn tiny_config(mode: VariantMode) -> TrainConfig {
    TrainConfig {
        hidden: 8,
        layers: 2,
        heads: 2,
        max_len: 6,
        dropout: 0.0,
        batch_size: 16,
        ..TrainConfig::default()
    }
    .build_variant(mode)
}

pub fn tiny_split(seed: u64) -> SplitDataset {
    let corpus = synth_generate(60, 20, seed, 0.1).unwrap();
    leave_one_out_split(&corpus.sequences).unwrap()
}

pub fn toy_batch() -> PaddedBatch {
    PaddedBatch::from_sequences(&[&[1, 4, 2, 7, 3, 9, 5], &[6, 2, 8], &[3, 3, 1, 5]], 6, vec![0, 1, 2])
}

/// Replacement sample drawn once from the model's own generator.
pub fn fixed_sample(model: &Model, batch: &PaddedBatch, alpha: f64, seed: u64) -> SampledBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::<f32>::new();
    let pass = generator_forward::<f32, ChaCha8Rng>(&mut g, &model.store, &model.layout.generator, batch, None).unwrap();
    let t = batch.max_len();
    let positions: Vec<Vec<usize>> = (0..batch.batch_size())
        .map(|r| sample_positions(&batch.validity[r * t..(r + 1) * t], alpha, &mut rng))
        .collect();
    sample_replacements(batch, &positions, g.value(pass.logits).data(), pass.hidden.start, SamplerMode::Multinomial, &mut rng).unwrap()
}

/// Random weights of moderate size so that every term has a visible slope.
pub fn spread(model: &mut Model, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        for v in model.store.value_mut(id).data_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
}

pub struct Joint<'a> {
    model: &'a Model,
    batch: &'a PaddedBatch,
    sample: &'a SampledBatch,
    lambda: f64,
}

impl ParamLossFn for Joint<'_> {
    fn build<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>) -> Result<Var> {
        let (_, _, total) = joint_loss(g, store, &self.model.layout, self.batch, self.sample, self.lambda)?;
        Ok(total)
    }
}

pub fn joint_full_sharing() -> Report {
    let mut model = Model::new(&tiny_config(VariantMode::ElecrecFs), 9).unwrap();
    spread(&mut model, 1);
    let batch = toy_batch();
    let sample = fixed_sample(&model, &batch, 0.5, 2);
    let loss = Joint {
        model: &model,
        batch: &batch,
        sample: &sample,
        lambda: 0.7,
    };
    check_store(&loss, &model.store, 12, 3)
}

pub fn joint_embedding_sharing() -> Report {
    let mut model = Model::new(&tiny_config(VariantMode::ElecrecEs), 9).unwrap();
    spread(&mut model, 4);
    let batch = toy_batch();
    let sample = fixed_sample(&model, &batch, 0.5, 5);
    let loss = Joint {
        model: &model,
        batch: &batch,
        sample: &sample,
        lambda: 0.5,
    };
    check_store(&loss, &model.store, 12, 6)
}

pub struct SeqBce<'a> {
    model: &'a Model,
    batch: &'a PaddedBatch,
    negatives: &'a [usize],
}

impl ParamLossFn for SeqBce<'_> {
    fn build<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>) -> Result<Var> {
        sequential_bce_loss(g, store, &self.model.layout.generator, self.batch, self.negatives, None)
    }
}

pub fn sequential_bce() -> Report {
    let mut model = Model::new(&tiny_config(VariantMode::SequentialBce), 9).unwrap();
    spread(&mut model, 7);
    let batch = toy_batch();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let negatives = sample_negatives(&batch.target_ids.data, &batch.validity, 9, &mut rng);
    let loss = SeqBce {
        model: &model,
        batch: &batch,
        negatives: &negatives,
    };
    check_store(&loss, &model.store, 12, 9)
}

pub fn random_batch(rng: &mut ChaCha8Rng, rows: usize, t: usize, items: usize) -> PaddedBatch {
    let seqs: Vec<Vec<usize>> = (0..rows)
        .map(|_| {
            let n = rng.gen_range(2..=t + 3);
            (0..n).map(|_| rng.gen_range(1..=items)).collect()
        })
        .collect();
    let refs: Vec<&[usize]> = seqs.iter().map(|s| s.as_slice()).collect();
    PaddedBatch::from_sequences(&refs, t, (0..rows).collect())
}

/// Replacement counts and labels of random batches checked one position at
/// a time.
pub fn check_sampled_batches(batches: usize, seed: u64) -> std::result::Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for n in 0..batches {
        let (rows, t, v) = (rng.gen_range(1..6), rng.gen_range(2..9), rng.gen_range(2..8));
        let batch = random_batch(&mut rng, rows, t, v - 1);
        let alpha = [0.0, 0.1, 0.3, 0.5, 0.7, 1.0][rng.gen_range(0..6)];
        let positions: Vec<Vec<usize>> = (0..rows)
            .map(|r| sample_positions(&batch.validity[r * t..(r + 1) * t], alpha, &mut rng))
            .collect();
        let logits: Vec<f32> = (0..rows * t * v).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let s = sample_replacements(&batch, &positions, &logits, 0, SamplerMode::Multinomial, &mut rng).map_err(|e| e.to_string())?;
        for r in 0..rows {
            let valid = (0..t).filter(|&c| batch.validity[r * t + c]).count();
            let replaced = (0..t).filter(|&c| s.replacement_mask[r * t + c]).count();
            let want = (alpha * valid as f64 - 1e-9).ceil().max(0.0) as usize;
            if replaced != want.min(valid) {
                return Err(format!("batch {n} row {r}: {replaced} replaced, expected {want} of {valid}"));
            }
            for c in 0..t {
                let i = r * t + c;
                if s.replacement_mask[i] && !batch.validity[i] {
                    return Err(format!("batch {n}: padding position {i} replaced"));
                }
                if !s.replacement_mask[i] && s.replaced_ids.data[i] != batch.target_ids.data[i] {
                    return Err(format!("batch {n}: untouched position {i} changed"));
                }
                if batch.validity[i] && s.labels[i] != (s.replaced_ids.data[i] == batch.target_ids.data[i]) {
                    return Err(format!("batch {n}: label at {i} disagrees with equality"));
                }
            }
        }
    }
    Ok(())
}

/// Empirical frequencies of `draws` samples from one logit row.
pub fn sampler_frequencies(logits: &[f32], draws: usize, seed: u64) -> Vec<f64> {
    let v = logits.len();
    let batch = PaddedBatch::from_sequences(&[&[1, 2]], 2, vec![0]);
    let mut full = vec![0.0f32; 2 * v];
    full[v..].copy_from_slice(logits);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![0usize; v];
    for _ in 0..draws {
        let s = sample_replacements(&batch, &[vec![1]], &full, 0, SamplerMode::Multinomial, &mut rng).unwrap();
        counts[s.replaced_ids.data[1]] += 1;
    }
    counts.iter().map(|&c| c as f64 / draws as f64).collect()
}

/// Parameters of two runs after `steps` updates, one with the
/// discriminator weighted by zero and one without a discriminator.
pub fn lambda_zero_runs(steps: usize, config: &TrainConfig, split: &SplitDataset) -> (ParamStore, ParamStore) {
    let run = |cfg: TrainConfig| {
        let mut model = Model::new(&cfg, split.num_items).unwrap();
        let mut adam = Adam::new(cfg.adam(), &model.store);
        let mut rngs = StepRngs::new(cfg.seed);
        let mut done = 0;
        for epoch in 1.. {
            for b in pad_and_batch(split, cfg.max_len, cfg.batch_size, cfg.seed, epoch) {
                if done == steps {
                    return model.store;
                }
                joint_step(&mut model, &mut adam, &b, &mut rngs).unwrap();
                done += 1;
            }
        }
        unreachable!()
    };
    let zero = TrainConfig {
        lambda: 0.0,
        ..config.clone()
    }
    .build_variant(VariantMode::ElecrecFs);
    let gen = config.clone().build_variant(VariantMode::GeneratorOnly);
    (run(zero), run(gen))
}

/// HR@10 of a randomly initialized model and the number of users.
pub fn random_model_hr10(users: usize, items: usize, seed: u64) -> (f64, usize) {
    let corpus = synth_generate(users, items, seed, 0.1).unwrap();
    let split = leave_one_out_split(&corpus.sequences).unwrap();
    let cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let model = Model::new(&cfg, split.num_items).unwrap();
    (evaluate_split(&model, &split, Which::Test).unwrap().hr(10), split.users.len())
}


/// Generator logits at the last position of one context, from a model with
/// spread-out weights that is never updated.
pub fn frozen_generator_row(items: usize, seed: u64) -> Vec<f32> {
    let mut model = Model::new(&tiny_config(VariantMode::GeneratorOnly), items).unwrap();
    spread(&mut model, seed);
    let context: Vec<usize> = (0..7).map(|i| 1 + (i * 3) % items).collect();
    let batch = PaddedBatch::from_sequences(&[&context], 6, vec![0]);
    let mut g = Graph::<f32>::new();
    let pass = generator_forward::<f32, ChaCha8Rng>(&mut g, &model.store, &model.layout.generator, &batch, None).unwrap();
    let v = items + 1;
    let logits = g.value(pass.logits).data();
    logits[logits.len() - v..].to_vec()
}

/// The synthetic corpus every desk-scale experiment runs on.
pub fn acceptance_split() -> SplitDataset {
    let corpus = synth_generate(1000, 200, 0, 0.1).unwrap();
    leave_one_out_split(&corpus.sequences).unwrap()
}
