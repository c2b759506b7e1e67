use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Scalar, Tensor};
use crate::config::{Sharing, TrainConfig, Variant};
use crate::data::{derive_seed, left_pad, IdMatrix, PAD};
use crate::encoder::{encode, truncated_normal, EncoderParams, INIT_STD};
use crate::error::{Error, Result};

/// Sigmoid head `⟨w, ĥ⟩ + bias` of the discriminator.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorParams {
    pub w: ParamId,
    pub bias: ParamId,
}

/// Which parameters form each network. Under full sharing `discriminator`
/// repeats the generator's handles.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub generator: EncoderParams,
    pub discriminator: Option<EncoderParams>,
    pub head: Option<DiscriminatorParams>,
    pub variant: Variant,
}

impl Layout {
    pub fn item_embeddings(&self) -> ParamId {
        self.generator.item_embeddings
    }

    /// The encoder used to rank items at inference time.
    pub fn ranking_encoder(&self) -> &EncoderParams {
        match (self.variant, &self.discriminator) {
            (Variant::Elecrec, Some(d)) => d,
            _ => &self.generator,
        }
    }
}

const INIT_STREAM: u64 = 2;

#[derive(Clone, Debug)]
pub struct Model {
    pub config: TrainConfig,
    pub num_items: usize,
    pub store: ParamStore,
    pub layout: Layout,
}

impl Model {
    /// Builds the parameter set for `config.variant`. The layout depends only
    /// on the configuration, so a checkpoint can be loaded into a fresh model.
    pub fn new(config: &TrainConfig, num_items: usize) -> Result<Self> {
        config.validate()?;
        if num_items == 0 {
            return Err(Error::EmptyDataset);
        }
        let enc = config.encoder(num_items + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, INIT_STREAM, 0));
        let mut store = ParamStore::new();
        let layout = match config.variant {
            Variant::SequentialBce => {
                let generator = EncoderParams::init(&mut store, "enc.", enc, None, &mut rng)?;
                Layout {
                    generator,
                    discriminator: None,
                    head: None,
                    variant: config.variant,
                }
            }
            Variant::Elecrec | Variant::GeneratorOnly => {
                let generator = EncoderParams::init(&mut store, "gen.", enc, None, &mut rng)?;
                let discriminator = match config.sharing {
                    Sharing::Full => generator.clone(),
                    Sharing::Embeddings => {
                        EncoderParams::init(&mut store, "disc.", enc, Some(generator.item_embeddings), &mut rng)?
                    }
                };
                let head = DiscriminatorParams {
                    w: store.add("disc.head.w", truncated_normal(&[config.hidden], INIT_STD, &mut rng)),
                    bias: store.add("disc.head.bias", Tensor::zeros(&[1])),
                };
                Layout {
                    generator,
                    discriminator: Some(discriminator),
                    head: Some(head),
                    variant: config.variant,
                }
            }
        };
        Ok(Model {
            config: config.clone(),
            num_items,
            store,
            layout,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.num_items + 1
    }

    /// Scores every item id for each context with the ranking encoder:
    /// `⟨embedding(v), h_last⟩`. Row entry 0 (padding) is meaningless and must
    /// be excluded by callers.
    pub fn score_contexts(&self, contexts: &[&[usize]]) -> Result<Vec<Vec<f32>>> {
        score_with(&self.store, &self.layout, self.config.max_len, contexts)
    }
}

pub fn score_with<F: Scalar>(
    store: &ParamStore<F>,
    layout: &Layout,
    max_len: usize,
    contexts: &[&[usize]],
) -> Result<Vec<Vec<F>>> {
    if contexts.is_empty() {
        return Ok(Vec::new());
    }
    if contexts.iter().any(|c| c.is_empty()) {
        return Err(Error::EmptyContext);
    }
    let b = contexts.len();
    let mut ids = Vec::with_capacity(b * max_len);
    for c in contexts {
        ids.extend(left_pad(c, max_len));
    }
    let ids = IdMatrix::new(b, max_len, ids);
    let enc = layout.ranking_encoder();
    let mut g = Graph::<F>::new();
    let hidden = encode::<F, ChaCha8Rng>(&mut g, store, enc, &ids, None, false)?;
    let (w, d) = (hidden.width, hidden.hidden);
    let all = g.value(hidden.values).data();
    let mut last = Vec::with_capacity(b * d);
    for r in 0..b {
        last.extend_from_slice(&all[(r * w + w - 1) * d..(r * w + w) * d]);
    }
    let h = g.constant(Tensor::from_parts(vec![b, d], last));
    let items = g.frozen_param(store, enc.item_embeddings);
    let scores = g.matmul_nt(h, items)?;
    let v = g.shape(scores)[1];
    let data = g.value(scores).data();
    Ok((0..b).map(|r| data[r * v..(r + 1) * v].to_vec()).collect())
}

/// Checks that every id in a context is in range.
pub fn check_ids(ids: &[usize], vocab_size: usize) -> Result<()> {
    match ids.iter().enumerate().find(|(_, &id)| id >= vocab_size || id == PAD) {
        Some((position, &id)) => Err(Error::OutOfVocabulary {
            id,
            vocab: vocab_size,
            position,
        }),
        None => Ok(()),
    }
}
