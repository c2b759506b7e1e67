//! Dataset ingestion, leave-one-out splitting, padding and batching, and the
//! synthetic Markov corpus used for desk-scale experiments.
//!
//! Item ids are dense after ingestion: real items are `1..=num_items` and `0`
//! is the padding id.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const MIN_INTERACTIONS: usize = 5;
pub const DEFAULT_BATCH_SIZE: usize = 256;
pub const DEFAULT_MAX_LEN: usize = 50;

/// Row-major matrix of item ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<usize>,
}

impl IdMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<usize>) -> Self {
        assert_eq!(rows * cols, data.len(), "id matrix size");
        IdMatrix { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        IdMatrix {
            rows,
            cols,
            data: vec![PAD; rows * cols],
        }
    }

    pub fn row(&self, r: usize) -> &[usize] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> usize {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: usize) {
        self.data[r * self.cols + c] = v;
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserSequence {
    pub user_id: u64,
    pub items: Vec<usize>,
}

/// Mapping between original item ids and dense ids `1..=len`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocabulary {
    originals: Vec<u64>,
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.originals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.originals.is_empty()
    }

    pub fn original(&self, mapped: usize) -> Option<u64> {
        mapped.checked_sub(1).and_then(|i| self.originals.get(i)).copied()
    }

    pub fn mapped(&self, original: u64) -> Option<usize> {
        self.originals.binary_search(&original).ok().map(|i| i + 1)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (i, o) in self.originals.iter().enumerate() {
            out.push_str(&format!("{} {}\n", o, i + 1));
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut originals = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let bad = |msg: &str| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: msg.to_string(),
            };
            let mut parts = line.split_whitespace();
            let (Some(o), Some(m), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(bad("expected `original_id mapped_id`"));
            };
            let o: u64 = o.parse().map_err(|_| bad("original id is not an integer"))?;
            let m: usize = m.parse().map_err(|_| bad("mapped id is not an integer"))?;
            if m != originals.len() + 1 {
                return Err(bad("mapped ids must be consecutive from 1"));
            }
            originals.push(o);
        }
        Ok(Vocabulary { originals })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub sequences: Vec<UserSequence>,
    pub vocab: Vocabulary,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FilterConfig {
    pub min_interactions: usize,
    /// Repeat user and item filtering until nothing changes.
    pub iterative: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            min_interactions: MIN_INTERACTIONS,
            iterative: true,
        }
    }
}

/// Parses `user item item ...` lines with original ids; no filtering.
pub fn parse_sequences(text: &str, path: &Path) -> Result<Vec<(u64, Vec<u64>)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut ids = Vec::new();
        for tok in line.split_whitespace() {
            match tok.parse::<u64>() {
                Ok(v) if v > 0 => ids.push(v),
                _ => {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        line: i + 1,
                        msg: format!("`{tok}` is not a positive integer"),
                    })
                }
            }
        }
        let user = ids.remove(0);
        out.push((user, ids));
    }
    Ok(out)
}

/// Drops users and items with fewer than `min_interactions` interactions.
pub fn core_filter(mut seqs: Vec<(u64, Vec<u64>)>, filter: FilterConfig) -> Vec<(u64, Vec<u64>)> {
    let min = filter.min_interactions;
    loop {
        let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
        for (_, items) in &seqs {
            for &it in items {
                *counts.entry(it).or_default() += 1;
            }
        }
        let before: usize = seqs.iter().map(|(_, s)| s.len() + 1).sum();
        if filter.iterative {
            for (_, items) in &mut seqs {
                items.retain(|it| counts[it] >= min);
            }
            seqs.retain(|(_, items)| items.len() >= min);
        } else {
            seqs.retain(|(_, items)| items.len() >= min);
            for (_, items) in &mut seqs {
                items.retain(|it| counts[it] >= min);
            }
            seqs.retain(|(_, items)| !items.is_empty());
            return seqs;
        }
        let after: usize = seqs.iter().map(|(_, s)| s.len() + 1).sum();
        if after == before {
            return seqs;
        }
    }
}

/// Reads a dataset file, applies core filtering and remaps item ids densely in
/// ascending order of their original ids.
pub fn load_dataset(path: &Path, filter: FilterConfig) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    let raw = parse_sequences(&text, path)?;
    if raw.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let kept = core_filter(raw, filter);
    if kept.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(remap(kept))
}

pub fn remap(seqs: Vec<(u64, Vec<u64>)>) -> Dataset {
    let items: BTreeSet<u64> = seqs.iter().flat_map(|(_, s)| s.iter().copied()).collect();
    let vocab = Vocabulary {
        originals: items.into_iter().collect(),
    };
    let sequences = seqs
        .into_iter()
        .map(|(user_id, items)| UserSequence {
            user_id,
            items: items.iter().map(|&o| vocab.mapped(o).expect("collected above")).collect(),
        })
        .collect();
    Dataset { sequences, vocab }
}

pub fn write_dataset(path: &Path, seqs: &[UserSequence]) -> Result<()> {
    let mut out = String::new();
    for s in seqs {
        out.push_str(&s.user_id.to_string());
        for it in &s.items {
            out.push(' ');
            out.push_str(&it.to_string());
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitUser {
    pub user_id: u64,
    pub train: Vec<usize>,
    pub valid: usize,
    pub test: usize,
}

impl SplitUser {
    /// Ranking context and held-out target for one evaluation split.
    pub fn context(&self, which: Which) -> (Vec<usize>, usize) {
        match which {
            Which::Valid => (self.train.clone(), self.valid),
            Which::Test => {
                let mut ctx = self.train.clone();
                ctx.push(self.valid);
                (ctx, self.test)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Which {
    Valid,
    Test,
}

impl Which {
    pub fn as_str(self) -> &'static str {
        match self {
            Which::Valid => "valid",
            Which::Test => "test",
        }
    }
}

impl std::str::FromStr for Which {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "valid" => Ok(Which::Valid),
            "test" => Ok(Which::Test),
            other => Err(Error::Config(format!("split must be `valid` or `test`, got `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitDataset {
    pub users: Vec<SplitUser>,
    /// Number of real items; embedding tables have `num_items + 1` rows.
    pub num_items: usize,
}

impl SplitDataset {
    pub fn vocab_size(&self) -> usize {
        self.num_items + 1
    }

    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    /// Writes `train.txt`, `valid.txt`, `test.txt` in the dataset line format.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut train = String::new();
        let mut valid = String::new();
        let mut test = String::new();
        for u in &self.users {
            train.push_str(&u.user_id.to_string());
            for it in &u.train {
                train.push_str(&format!(" {it}"));
            }
            train.push('\n');
            valid.push_str(&format!("{} {}\n", u.user_id, u.valid));
            test.push_str(&format!("{} {}\n", u.user_id, u.test));
        }
        fs::write(dir.join("train.txt"), train)?;
        fs::write(dir.join("valid.txt"), valid)?;
        fs::write(dir.join("test.txt"), test)?;
        Ok(())
    }

    /// Reads a directory produced by `write_dir` plus `vocab.txt`.
    pub fn read_dir(dir: &Path) -> Result<Self> {
        let vocab = Vocabulary::read(&dir.join("vocab.txt"))?;
        let read = |name: &str| -> Result<(PathBuf, Vec<(u64, Vec<u64>)>)> {
            let p = dir.join(name);
            let text = fs::read_to_string(&p)?;
            let rows = parse_sequences(&text, &p)?;
            Ok((p, rows))
        };
        let (_, train) = read("train.txt")?;
        let (vp, valid) = read("valid.txt")?;
        let (tp, test) = read("test.txt")?;
        if train.len() != valid.len() || train.len() != test.len() {
            return Err(Error::Parse {
                path: dir.to_path_buf(),
                line: 0,
                msg: "split files disagree on the number of users".into(),
            });
        }
        let num_items = vocab.len();
        let single = |p: &Path, line: usize, row: &(u64, Vec<u64>), user: u64| -> Result<usize> {
            match row.1.as_slice() {
                [it] if row.0 == user && (*it as usize) <= num_items => Ok(*it as usize),
                _ => Err(Error::Parse {
                    path: p.to_path_buf(),
                    line,
                    msg: format!("expected `{user} <item>` with item <= {num_items}"),
                }),
            }
        };
        let mut users = Vec::with_capacity(train.len());
        for (i, (user_id, items)) in train.iter().enumerate() {
            if let Some(&bad) = items.iter().find(|&&it| it as usize > num_items) {
                return Err(Error::Parse {
                    path: dir.join("train.txt"),
                    line: i + 1,
                    msg: format!("item {bad} exceeds vocabulary size {num_items}"),
                });
            }
            users.push(SplitUser {
                user_id: *user_id,
                train: items.iter().map(|&it| it as usize).collect(),
                valid: single(&vp, i + 1, &valid[i], *user_id)?,
                test: single(&tp, i + 1, &test[i], *user_id)?,
            });
        }
        Ok(SplitDataset { users, num_items })
    }
}

/// Last item for test, second to last for validation, the rest for training.
pub fn leave_one_out_split(data: &[UserSequence]) -> Result<SplitDataset> {
    let mut users = Vec::with_capacity(data.len());
    let mut num_items = 0;
    for s in data {
        let n = s.items.len();
        if n < 3 {
            return Err(Error::Split { user: s.user_id, len: n });
        }
        num_items = num_items.max(s.items.iter().copied().max().unwrap_or(0));
        users.push(SplitUser {
            user_id: s.user_id,
            train: s.items[..n - 2].to_vec(),
            valid: s.items[n - 2],
            test: s.items[n - 1],
        });
    }
    Ok(SplitDataset { users, num_items })
}

/// Left-pads `seq` with [`PAD`] to `len`, keeping the most recent items.
pub fn left_pad(seq: &[usize], len: usize) -> Vec<usize> {
    let keep = &seq[seq.len().saturating_sub(len)..];
    let mut out = vec![PAD; len - keep.len()];
    out.extend_from_slice(keep);
    out
}

/// One training batch: `target_ids[t]` is the item following `input_ids[t]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaddedBatch {
    pub input_ids: IdMatrix,
    pub target_ids: IdMatrix,
    pub validity: Vec<bool>,
    /// Index into [`SplitDataset::users`] for each row.
    pub users: Vec<usize>,
}

impl PaddedBatch {
    pub fn from_sequences(seqs: &[&[usize]], max_len: usize, users: Vec<usize>) -> Self {
        let b = seqs.len();
        let mut input = Vec::with_capacity(b * max_len);
        let mut target = Vec::with_capacity(b * max_len);
        for s in seqs {
            let n = s.len();
            input.extend(left_pad(&s[..n.saturating_sub(1)], max_len));
            target.extend(left_pad(if n > 1 { &s[1..] } else { &[] }, max_len));
        }
        let validity = input.iter().zip(&target).map(|(&i, &t)| i != PAD && t != PAD).collect();
        PaddedBatch {
            input_ids: IdMatrix::new(b, max_len, input),
            target_ids: IdMatrix::new(b, max_len, target),
            validity,
            users,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.input_ids.rows
    }

    pub fn max_len(&self) -> usize {
        self.input_ids.cols
    }

    pub fn valid_count(&self) -> usize {
        self.validity.iter().filter(|&&v| v).count()
    }
}

/// Derives a per-purpose seed so independent random streams never overlap.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut x = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

const SHUFFLE_STREAM: u64 = 1;

/// Training batches for one epoch, built from the train prefixes of users
/// with at least two training items, in a seeded per-epoch order.
pub fn pad_and_batch(split: &SplitDataset, max_len: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<PaddedBatch> {
    assert!(max_len >= 2 && batch_size >= 1);
    let mut order: Vec<usize> = (0..split.users.len()).filter(|&u| split.users[u].train.len() >= 2).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SHUFFLE_STREAM, epoch));
    order.shuffle(&mut rng);
    order
        .chunks(batch_size)
        .map(|chunk| {
            let seqs: Vec<&[usize]> = chunk.iter().map(|&u| split.users[u].train.as_slice()).collect();
            PaddedBatch::from_sequences(&seqs, max_len, chunk.to_vec())
        })
        .collect()
}

/// Successor table of the synthetic order-1 Markov corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionTable {
    /// `successors[i]` lists `(item, probability)` for item `i`; index 0 unused.
    pub successors: Vec<Vec<(usize, f64)>>,
}

pub const SYNTH_SUCCESSORS: usize = 3;
pub const SYNTH_WEIGHTS: [f64; SYNTH_SUCCESSORS] = [0.5, 0.3, 0.2];
pub const SYNTH_MIN_LEN: usize = 10;
pub const SYNTH_MAX_LEN: usize = 40;

impl TransitionTable {
    pub fn random(items: usize, rng: &mut impl Rng) -> Self {
        let mut successors = vec![Vec::new()];
        let pool: Vec<usize> = (1..=items).collect();
        for i in 1..=items {
            let mut picks = Vec::with_capacity(SYNTH_SUCCESSORS);
            while picks.len() < SYNTH_SUCCESSORS {
                let &c = pool.choose(rng).expect("non-empty");
                if c != i && !picks.contains(&c) {
                    picks.push(c);
                }
            }
            successors.push(picks.into_iter().zip(SYNTH_WEIGHTS).collect());
        }
        TransitionTable { successors }
    }

    pub fn next(&self, item: usize, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let succ = &self.successors[item];
        for &(s, p) in succ {
            acc += p;
            if u < acc {
                return s;
            }
        }
        succ.last().expect("non-empty").0
    }

    pub fn is_transition(&self, from: usize, to: usize) -> bool {
        self.successors[from].iter().any(|&(s, _)| s == to)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub sequences: Vec<UserSequence>,
    pub table: TransitionTable,
}

/// Users follow the successor table with probability `1 - noise_rate` and
/// jump to a uniformly drawn item otherwise. Lengths are uniform in
/// `[SYNTH_MIN_LEN, SYNTH_MAX_LEN]`.
pub fn synth_generate(users: usize, items: usize, seed: u64, noise_rate: f64) -> Result<SyntheticCorpus> {
    if users < 10 || items < 10 {
        return Err(Error::Config("synthetic corpus needs at least 10 users and 10 items".into()));
    }
    if !(0.0..1.0).contains(&noise_rate) {
        return Err(Error::Config(format!("noise rate {noise_rate} outside [0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let table = TransitionTable::random(items, &mut rng);
    let sequences = (1..=users as u64)
        .map(|user_id| {
            let len = rng.gen_range(SYNTH_MIN_LEN..=SYNTH_MAX_LEN);
            let mut seq = Vec::with_capacity(len);
            seq.push(rng.gen_range(1..=items));
            while seq.len() < len {
                let last = *seq.last().expect("non-empty");
                let next = if rng.gen::<f64>() < noise_rate {
                    rng.gen_range(1..=items)
                } else {
                    table.next(last, &mut rng)
                };
                seq.push(next);
            }
            UserSequence { user_id, items: seq }
        })
        .collect();
    Ok(SyntheticCorpus { sequences, table })
}

/// Training-interaction count per item; index 0 (padding) stays zero.
pub fn popularity_counts(split: &SplitDataset) -> Vec<u64> {
    let mut counts = vec![0u64; split.vocab_size()];
    for u in &split.users {
        for &it in &u.train {
            counts[it] += 1;
        }
    }
    counts[PAD] = 0;
    counts
}

/// Runs ingestion and splitting and writes the split files plus `vocab.txt`.
pub fn prepare(input: &Path, out_dir: &Path, filter: FilterConfig) -> Result<SplitDataset> {
    let data = load_dataset(input, filter)?;
    let split = leave_one_out_split(&data.sequences)?;
    split.write_dir(out_dir)?;
    data.vocab.write(&out_dir.join("vocab.txt"))?;
    Ok(split)
}
