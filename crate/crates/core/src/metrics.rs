//! Full-ranking evaluation: HR@k and NDCG@k over the whole item set.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use crate::data::{popularity_counts, SplitDataset, Which, PAD};
use crate::error::Result;
use crate::model::Model;

pub const CUTOFFS: [usize; 2] = [5, 10];
const EVAL_BATCH: usize = 256;

/// Anything that can score every item id for a batch of contexts.
pub trait Scorer {
    /// One row per context, `vocab_size` entries each; entry 0 is ignored.
    fn score(&self, contexts: &[&[usize]]) -> Result<Vec<Vec<f32>>>;

    /// Whether items already in the context are removed from the candidates.
    fn filter_seen(&self) -> bool {
        false
    }
}

impl Scorer for Model {
    fn score(&self, contexts: &[&[usize]]) -> Result<Vec<Vec<f32>>> {
        self.score_contexts(contexts)
    }

    fn filter_seen(&self) -> bool {
        self.config.filter_seen
    }
}

/// Popularity baseline: every user gets the training-count ranking.
#[derive(Clone, Debug)]
pub struct PopRec {
    scores: Vec<f32>,
}

impl PopRec {
    /// `counts` is indexed by item id; entry 0 (padding) is ignored.
    pub fn new(counts: &[u64]) -> Self {
        PopRec { scores: poprec_rank(counts) }
    }

    pub fn from_split(split: &SplitDataset) -> Self {
        PopRec::new(&popularity_counts(split))
    }
}

impl Scorer for PopRec {
    fn score(&self, contexts: &[&[usize]]) -> Result<Vec<Vec<f32>>> {
        Ok(vec![self.scores.clone(); contexts.len()])
    }
}

/// Static score vector indexed by item id; the padding entry is `-inf`.
pub fn poprec_rank(counts: &[u64]) -> Vec<f32> {
    let mut s: Vec<f32> = counts.iter().map(|&c| c as f32).collect();
    if let Some(pad) = s.get_mut(PAD) {
        *pad = f32::NEG_INFINITY;
    }
    s
}

/// Item ids in ranked order (highest score first, ties by smaller id),
/// padding excluded.
pub fn rank_items(scores: &[f32]) -> Vec<usize> {
    let mut ids: Vec<usize> = (1..scores.len()).collect();
    ids.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    ids
}

/// 1-based rank of `target`, counting items that score higher plus tied
/// items with a smaller id. Ids in `exclude` (other than the target) are
/// skipped.
pub fn rank_of(scores: &[f32], target: usize, exclude: Option<&HashSet<usize>>) -> usize {
    let st = scores[target];
    let mut rank = 1;
    for (id, &s) in scores.iter().enumerate().skip(1) {
        if id == target || exclude.is_some_and(|e| e.contains(&id)) {
            continue;
        }
        if s > st || (s == st && id < target) {
            rank += 1;
        }
    }
    rank
}

pub fn hr_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub hr: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub users: usize,
    pub split: Which,
}

impl MetricsReport {
    /// Averages per-user ranks.
    pub fn from_ranks(ranks: &[usize], split: Which) -> Self {
        let n = ranks.len().max(1) as f64;
        let mut hr = BTreeMap::new();
        let mut ndcg = BTreeMap::new();
        for k in CUTOFFS {
            hr.insert(k, ranks.iter().map(|&r| hr_at_k(r, k)).sum::<f64>() / n);
            ndcg.insert(k, ranks.iter().map(|&r| ndcg_at_k(r, k)).sum::<f64>() / n);
        }
        MetricsReport {
            hr,
            ndcg,
            users: ranks.len(),
            split,
        }
    }

    pub fn hr(&self, k: usize) -> f64 {
        self.hr.get(&k).copied().unwrap_or(0.0)
    }

    pub fn ndcg(&self, k: usize) -> f64 {
        self.ndcg.get(&k).copied().unwrap_or(0.0)
    }

    /// `split,hr5,hr10,ndcg5,ndcg10`
    pub fn csv_fields(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.split.as_str(),
            self.hr(5),
            self.hr(10),
            self.ndcg(5),
            self.ndcg(10)
        )
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "split: {}", self.split.as_str())?;
        writeln!(f, "users: {}", self.users)?;
        for k in CUTOFFS {
            writeln!(f, "HR@{k}: {:.4}", self.hr(k))?;
        }
        for k in CUTOFFS {
            writeln!(f, "NDCG@{k}: {:.4}", self.ndcg(k))?;
        }
        Ok(())
    }
}

/// Target ranks for every user of the split, in user order.
pub fn split_ranks(scorer: &dyn Scorer, split: &SplitDataset, which: Which) -> Result<Vec<usize>> {
    let contexts: Vec<(Vec<usize>, usize)> = split.users.iter().map(|u| u.context(which)).collect();
    let mut ranks = Vec::with_capacity(contexts.len());
    for chunk in contexts.chunks(EVAL_BATCH) {
        let refs: Vec<&[usize]> = chunk.iter().map(|(c, _)| c.as_slice()).collect();
        let scores = scorer.score(&refs)?;
        for ((context, target), row) in chunk.iter().zip(&scores) {
            let seen: Option<HashSet<usize>> = scorer
                .filter_seen()
                .then(|| context.iter().copied().filter(|&i| i != PAD).collect());
            ranks.push(rank_of(row, *target, seen.as_ref()));
        }
    }
    Ok(ranks)
}

/// Valid: context = training prefix, target = validation item.
/// Test: context = training prefix + validation item, target = test item.
pub fn evaluate_split(scorer: &dyn Scorer, split: &SplitDataset, which: Which) -> Result<MetricsReport> {
    let ranks = split_ranks(scorer, split, which)?;
    Ok(MetricsReport::from_ranks(&ranks, which))
}
