//! Causal Transformer sequence encoder.
//!
//! Pre-norm blocks with GELU feed-forward layers over learned positional
//! embeddings. Inputs are left-padded id matrices; leading columns that are
//! padding in every row are skipped, which leaves the hidden states of real
//! positions unchanged because padding keys are masked out.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::data::{IdMatrix, PAD};
use crate::error::{Error, Result};

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;
pub const MASK_VALUE: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderConfig {
    /// Embedding rows including the padding row.
    pub vocab_size: usize,
    pub max_len: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if self.layers == 0 || self.hidden == 0 || self.max_len < 2 || self.vocab_size < 2 {
            return Err(Error::Config("encoder needs layers >= 1, hidden >= 1, max_len >= 2, at least one item".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub output: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub ff_in: ParamId,
    pub ff_out: ParamId,
}

/// Parameter handles of one encoder. `item_embeddings` may be shared with
/// another encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub item_embeddings: ParamId,
    pub positional_embeddings: ParamId,
    pub blocks: Vec<BlockParams>,
}

/// Draws from N(0, std²) truncated at two standard deviations.
pub fn truncated_normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0, std).expect("positive std");
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let x: f64 = normal.sample(rng);
        if x.abs() <= 2.0 * std {
            data.push(x as f32);
        }
    }
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Item-embedding table with a zeroed padding row.
pub fn init_item_embeddings(store: &mut ParamStore, name: &str, vocab_size: usize, hidden: usize, rng: &mut impl Rng) -> ParamId {
    let mut table = truncated_normal(&[vocab_size, hidden], INIT_STD, rng);
    table.data_mut()[..hidden].iter_mut().for_each(|v| *v = 0.0);
    store.add(name, table)
}

impl EncoderParams {
    /// Registers a fresh encoder under `prefix`. A new item table is created
    /// unless `shared_items` is given.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        config: EncoderConfig,
        shared_items: Option<ParamId>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.hidden;
        let item_embeddings = match shared_items {
            Some(id) => {
                if store.value(id).shape() != [config.vocab_size, d] {
                    return Err(Error::Shape {
                        op: "shared item embeddings",
                        lhs: store.value(id).shape().to_vec(),
                        rhs: vec![config.vocab_size, d],
                    });
                }
                id
            }
            None => init_item_embeddings(store, &format!("{prefix}item_emb"), config.vocab_size, d, rng),
        };
        let positional_embeddings = store.add(format!("{prefix}pos_emb"), truncated_normal(&[config.max_len, d], INIT_STD, rng));
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let mut mat = |name: &str, r: usize, c: usize, rng: &mut _| {
                store.add(format!("{prefix}block{l}.{name}"), truncated_normal(&[r, c], INIT_STD, rng))
            };
            let query = mat("query", d, d, rng);
            let key = mat("key", d, d, rng);
            let value = mat("value", d, d, rng);
            let output = mat("output", d, d, rng);
            let ff_in = mat("ff_in", d, 4 * d, rng);
            let ff_out = mat("ff_out", 4 * d, d, rng);
            blocks.push(BlockParams {
                ln1_gain: store.add(format!("{prefix}block{l}.ln1_gain"), Tensor::filled(&[d], 1.0)),
                ln1_bias: store.add(format!("{prefix}block{l}.ln1_bias"), Tensor::zeros(&[d])),
                query,
                key,
                value,
                output,
                ln2_gain: store.add(format!("{prefix}block{l}.ln2_gain"), Tensor::filled(&[d], 1.0)),
                ln2_bias: store.add(format!("{prefix}block{l}.ln2_bias"), Tensor::zeros(&[d])),
                ff_in,
                ff_out,
            });
        }
        Ok(EncoderParams {
            config,
            item_embeddings,
            positional_embeddings,
            blocks,
        })
    }
}

/// Standalone encoder with its own item table, seeded.
pub fn init_params(config: EncoderConfig, seed: u64) -> Result<(ParamStore, EncoderParams)> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let params = EncoderParams::init(&mut store, "", config, None, &mut rng)?;
    Ok((store, params))
}

/// Additive attention mask `[B×T×T]`: 0 where key `j <= t` and key `j` is a
/// real item, [`MASK_VALUE`] elsewhere.
pub fn causal_mask<F: Scalar>(t: usize, validity: &[bool]) -> Tensor<F> {
    assert!(t >= 1 && validity.len().is_multiple_of(t));
    let b = validity.len() / t;
    let blocked = F::of(MASK_VALUE);
    let mut m = vec![blocked; b * t * t];
    for bi in 0..b {
        for q in 0..t {
            for k in 0..=q {
                if validity[bi * t + k] {
                    m[bi * t * t + q * t + k] = F::zero();
                }
            }
        }
    }
    Tensor::from_parts(vec![b, t, t], m)
}

/// Per-position encoder outputs for the columns `start..max_len` of a batch.
#[derive(Clone, Debug)]
pub struct HiddenStates {
    /// `[B × width × d]`, with `width = max_len - start`.
    pub values: Var,
    pub start: usize,
    pub width: usize,
    pub batch: usize,
    pub hidden: usize,
}

impl HiddenStates {
    /// Restricts a full-width `[B×T]` row-major mask to the encoded columns.
    pub fn window<T: Copy>(&self, full: &[T]) -> Vec<T> {
        let t = self.start + self.width;
        (0..self.batch)
            .flat_map(|b| full[b * t + self.start..(b + 1) * t].iter().copied())
            .collect()
    }

    pub fn window_ids(&self, ids: &IdMatrix) -> Vec<usize> {
        self.window(&ids.data)
    }
}

/// First column holding a real item in any row.
pub fn first_active_column(ids: &IdMatrix) -> usize {
    (0..ids.cols)
        .find(|&c| (0..ids.rows).any(|r| ids.get(r, c) != PAD))
        .unwrap_or(ids.cols - 1)
}

/// Dropout is applied only when `rng` is supplied.
pub fn encode<F: Scalar, R: Rng>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    params: &EncoderParams,
    ids: &IdMatrix,
    mut rng: Option<&mut R>,
    train: bool,
) -> Result<HiddenStates> {
    let cfg = &params.config;
    if ids.cols != cfg.max_len {
        return Err(Error::Shape {
            op: "encode",
            lhs: vec![ids.rows, ids.cols],
            rhs: vec![ids.rows, cfg.max_len],
        });
    }
    let (b, d, heads) = (ids.rows, cfg.hidden, cfg.heads);
    let start = first_active_column(ids);
    let w = cfg.max_len - start;
    let window: Vec<usize> = (0..b).flat_map(|r| ids.row(r)[start..].iter().copied()).collect();
    let validity: Vec<bool> = window.iter().map(|&id| id != PAD).collect();
    let positions: Vec<usize> = (0..b).flat_map(|_| start..cfg.max_len).collect();
    let mask = causal_mask::<F>(w, &validity);
    let rate = if train { cfg.dropout } else { 0.0 };
    let param = |g: &mut Graph<F>, id: ParamId| if train { g.param(store, id) } else { g.frozen_param(store, id) };

    let items = param(g, params.item_embeddings);
    let pos = param(g, params.positional_embeddings);
    let ie = g.embedding(items, &window, &[b, w])?;
    let pe = g.embedding(pos, &positions, &[b, w])?;
    let mut x = g.add(ie, pe)?;
    if let Some(r) = rng.as_deref_mut() {
        x = g.dropout(x, rate, r);
    }
    x = g.reshape(x, &[b * w, d])?;

    for blk in &params.blocks {
        let ln1_g = param(g, blk.ln1_gain);
        let ln1_b = param(g, blk.ln1_bias);
        let h = g.layer_norm(x, ln1_g, ln1_b, LN_EPS)?;
        let wq = param(g, blk.query);
        let wk = param(g, blk.key);
        let wv = param(g, blk.value);
        let q = g.matmul(h, wq)?;
        let k = g.matmul(h, wk)?;
        let v = g.matmul(h, wv)?;
        let q = g.reshape(q, &[b, w, d])?;
        let k = g.reshape(k, &[b, w, d])?;
        let v = g.reshape(v, &[b, w, d])?;
        let a = g.attention(q, k, v, &mask, heads)?;
        let a = g.reshape(a, &[b * w, d])?;
        let wo = param(g, blk.output);
        let mut o = g.matmul(a, wo)?;
        if let Some(r) = rng.as_deref_mut() {
            o = g.dropout(o, rate, r);
        }
        x = g.add(x, o)?;

        let ln2_g = param(g, blk.ln2_gain);
        let ln2_b = param(g, blk.ln2_bias);
        let h = g.layer_norm(x, ln2_g, ln2_b, LN_EPS)?;
        let w1 = param(g, blk.ff_in);
        let w2 = param(g, blk.ff_out);
        let f = g.matmul(h, w1)?;
        let f = g.gelu(f);
        let mut f = g.matmul(f, w2)?;
        if let Some(r) = rng.as_deref_mut() {
            f = g.dropout(f, rate, r);
        }
        x = g.add(x, f)?;
    }
    let values = g.reshape(x, &[b, w, d])?;
    Ok(HiddenStates {
        values,
        start,
        width: w,
        batch: b,
        hidden: d,
    })
}
