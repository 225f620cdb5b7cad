//! Cold-start evaluation: user-side ranking metrics, item-side MDG, exposure
//! diversity, and baseline scorers.
//!
//! Rankings are restricted to a cold item pool. A user is evaluated when they
//! have at least one relevant pool item and at least one warm training
//! interaction to build their embedding from.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compute::ops::l2_normalize_rowwise;
use crate::compute::Tensor2D;
use crate::encoder::ItemEmbeddingMatrix;
use crate::error::{Error, Result};
use crate::model::{build_user_embeddings, top_k, InteractionMatrix};

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    Ok(())
}

fn check_lists(ranked: &[Vec<usize>], relevant: &[HashSet<usize>]) -> Result<()> {
    if ranked.len() != relevant.len() {
        return Err(Error::LengthMismatch(ranked.len(), relevant.len()));
    }
    if ranked.is_empty() {
        return Err(Error::NoEvaluableUsers);
    }
    if let Some(u) = relevant.iter().position(HashSet::is_empty) {
        return Err(Error::InvalidArgument(format!("user {u} has no relevant items")));
    }
    Ok(())
}

/// Gain of rank `r` (1-based).
fn discount(rank: usize) -> f64 {
    1.0 / (1.0 + rank as f64).log2()
}

/// Mean over users of `|top-k ∩ relevant| / |relevant|`.
pub fn recall_at_k(ranked: &[Vec<usize>], relevant: &[HashSet<usize>], k: usize) -> Result<f64> {
    check_k(k)?;
    check_lists(ranked, relevant)?;
    let total: f64 = ranked
        .iter()
        .zip(relevant)
        .map(|(list, rel)| {
            let hits = list.iter().take(k).filter(|i| rel.contains(i)).count();
            hits as f64 / rel.len() as f64
        })
        .sum();
    Ok(total / ranked.len() as f64)
}

/// Mean over users of `DCG@k / IDCG@k` with binary relevance.
pub fn ndcg_at_k(ranked: &[Vec<usize>], relevant: &[HashSet<usize>], k: usize) -> Result<f64> {
    check_k(k)?;
    check_lists(ranked, relevant)?;
    let total: f64 = ranked
        .iter()
        .zip(relevant)
        .map(|(list, rel)| {
            let dcg: f64 = list
                .iter()
                .take(k)
                .enumerate()
                .filter(|(_, i)| rel.contains(i))
                .map(|(r, _)| discount(r + 1))
                .sum();
            let idcg: f64 = (1..=rel.len().min(k)).map(discount).sum();
            dcg / idcg
        })
        .sum();
    Ok(total / ranked.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MdgResult {
    /// `None` for items with no relevant users.
    pub per_item: Vec<Option<f64>>,
    /// Mean over items that have relevant users.
    pub mean: f64,
}

/// Item mean discounted gain: for item `i` with relevant users `U_i`,
/// `MDG(i) = (1/|U_i|) Σ_{u∈U_i} [rank_u(i) ≤ k] / log2(1 + rank_u(i))`.
pub fn mdg_at_k(
    ranked: &[Vec<usize>],
    relevant: &[HashSet<usize>],
    k: usize,
    items: &[usize],
) -> Result<MdgResult> {
    check_k(k)?;
    if ranked.len() != relevant.len() {
        return Err(Error::LengthMismatch(ranked.len(), relevant.len()));
    }
    let pos: std::collections::HashMap<usize, usize> =
        items.iter().enumerate().map(|(p, &i)| (i, p)).collect();
    let mut gain = vec![0.0; items.len()];
    let mut users = vec![0usize; items.len()];
    for (list, rel) in ranked.iter().zip(relevant) {
        for i in rel {
            if let Some(&p) = pos.get(i) {
                users[p] += 1;
            }
        }
        for (r, i) in list.iter().take(k).enumerate() {
            if rel.contains(i) {
                if let Some(&p) = pos.get(i) {
                    gain[p] += discount(r + 1);
                }
            }
        }
    }
    let per_item: Vec<Option<f64>> = gain
        .iter()
        .zip(&users)
        .map(|(&g, &n)| (n > 0).then(|| g / n as f64))
        .collect();
    let present: Vec<f64> = per_item.iter().flatten().copied().collect();
    let mean = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(MdgResult { per_item, mean })
}

/// `1 − G`, where `G` is the Gini index of the exposure counts. 1 means
/// perfectly even exposure.
pub fn gini_diversity(counts: &[usize]) -> Result<f64> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::InvalidArgument("all prediction counts are zero".into()));
    }
    let mut sorted = counts.to_vec();
    sorted.sort_unstable();
    // 1 - G = (n·T - Σ (2i - n - 1) c_i) / (n·T), accumulated exactly in
    // integers so that hand cases such as the point mass come out exact.
    let n = sorted.len() as i128;
    let weighted: i128 = sorted
        .iter()
        .enumerate()
        .map(|(i, &c)| (2 * (i as i128 + 1) - n - 1) * c as i128)
        .sum();
    let denom = n * total as i128;
    Ok((denom - weighted) as f64 / denom as f64)
}

/// Running count of exactly-nonzero probability entries.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SparsityStats {
    pub nonzero: u64,
    pub total: u64,
}

impl SparsityStats {
    pub fn observe(&mut self, probs: &[f64]) {
        self.nonzero += probs.iter().filter(|&&p| p > 0.0).count() as u64;
        self.total += probs.len() as u64;
    }

    pub fn merge(&mut self, other: SparsityStats) {
        self.nonzero += other.nonzero;
        self.total += other.total;
    }

    /// `None` before anything was observed.
    pub fn fraction(&self) -> Option<f64> {
        (self.total > 0).then(|| self.nonzero as f64 / self.total as f64)
    }
}

/// Fraction of entries strictly greater than zero across the given matrices.
pub fn sparsity_stats<'a>(matrices: impl IntoIterator<Item = &'a [f64]>) -> f64 {
    let mut s = SparsityStats::default();
    matrices.into_iter().for_each(|m| s.observe(m));
    s.fraction().unwrap_or(0.0)
}

/// Expected metrics of a uniformly random ranking.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomBaseline {
    pub recall_at_k: f64,
    pub ndcg_at_k: f64,
}

/// Closed-form expectation under a random permutation of a pool of
/// `pool_size` items. Each position holds a relevant item with probability
/// `r / n`, so `E[DCG] = (r/n) Σ_{j≤min(k,n)} 1/log2(1+j)` and
/// `E[recall] = min(k,n)/n`; IDCG is fixed per user.
pub fn random_baseline(relevant_counts: &[usize], pool_size: usize, k: usize) -> Result<RandomBaseline> {
    check_k(k)?;
    if relevant_counts.is_empty() {
        return Err(Error::NoEvaluableUsers);
    }
    let n = pool_size as f64;
    let depth = k.min(pool_size);
    let dcg_unit: f64 = (1..=depth).map(discount).sum();
    let mut ndcg = 0.0;
    for &r in relevant_counts {
        if r == 0 || r > pool_size {
            return Err(Error::InvalidArgument(format!(
                "{r} relevant items in a pool of {pool_size}"
            )));
        }
        let idcg: f64 = (1..=r.min(k)).map(discount).sum();
        ndcg += (r as f64 / n) * dcg_unit / idcg;
    }
    Ok(RandomBaseline {
        recall_at_k: depth as f64 / n,
        ndcg_at_k: ndcg / relevant_counts.len() as f64,
    })
}

/// Produces scores for `users × pool` given the warm training interactions.
pub trait Scorer {
    fn scores(&self, train: &InteractionMatrix, users: &[usize], pool: &[usize]) -> Result<Tensor2D<f32>>;
}

/// Scores by cosine similarity between item embeddings and user embeddings
/// built from warm-train histories.
pub struct EmbeddingScorer {
    items: ItemEmbeddingMatrix<f32>,
}

impl EmbeddingScorer {
    pub fn new(items: ItemEmbeddingMatrix<f32>) -> Self {
        EmbeddingScorer { items }
    }

    /// Popularity-free content baseline: the raw per-mode normalized
    /// features, concatenated and normalized again.
    pub fn raw_content(inputs: &[Tensor2D<f32>]) -> Result<Self> {
        let cat = crate::compute::ops::concat_columns(inputs)?;
        let (y, _) = l2_normalize_rowwise(&cat);
        Ok(EmbeddingScorer {
            items: ItemEmbeddingMatrix::new(y)?,
        })
    }
}

impl Scorer for EmbeddingScorer {
    fn scores(&self, train: &InteractionMatrix, users: &[usize], pool: &[usize]) -> Result<Tensor2D<f32>> {
        let u = build_user_embeddings(train, &self.items)?;
        let u = u.as_tensor().gather_rows(users);
        let y = self.items.as_tensor().gather_rows(pool);
        let mut s = u.matmul_t(&y)?;
        s.data_mut().iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
        Ok(s)
    }
}

/// Independent uniform scores, seeded.
pub struct RandomScorer {
    pub seed: u64,
}

impl Scorer for RandomScorer {
    fn scores(&self, _: &InteractionMatrix, users: &[usize], pool: &[usize]) -> Result<Tensor2D<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        Ok(Tensor2D::from_fn(users.len(), pool.len(), |_, _| rng.random::<f32>()))
    }
}

/// Scores 1 for relevant items and 0 otherwise.
pub struct OracleScorer<'a> {
    pub relevance: &'a InteractionMatrix,
}

impl Scorer for OracleScorer<'_> {
    fn scores(&self, _: &InteractionMatrix, users: &[usize], pool: &[usize]) -> Result<Tensor2D<f32>> {
        Ok(Tensor2D::from_fn(users.len(), pool.len(), |r, c| {
            if self.relevance.contains(users[r], pool[c]) {
                1.0
            } else {
                0.0
            }
        }))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemReport {
    pub item: usize,
    pub mdg: Option<f64>,
    pub pred_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    /// `min(k, pool size)`: the length of every ranked list.
    pub effective_k: usize,
    pub pool_size: usize,
    pub n_users_evaluated: usize,
    pub recall_at_k: f64,
    pub ndcg_at_k: f64,
    pub mdg_at_k: f64,
    pub gini_diversity: f64,
    pub random_baseline: RandomBaseline,
    pub items: Vec<ItemReport>,
}

/// Users with at least one relevant pool item and one warm-train item.
pub fn evaluable_users(train: &InteractionMatrix, target: &InteractionMatrix) -> Vec<usize> {
    (0..target.n_users())
        .filter(|&u| !target.items_of(u).is_empty() && !train.items_of(u).is_empty())
        .collect()
}

/// Ranks `pool` for every evaluable user of `target` and computes all metrics.
pub fn evaluate(
    scorer: &dyn Scorer,
    train: &InteractionMatrix,
    target: &InteractionMatrix,
    pool: &[usize],
    k: usize,
) -> Result<EvalReport> {
    check_k(k)?;
    let users = evaluable_users(train, target);
    if users.is_empty() || pool.is_empty() {
        return Err(Error::NoEvaluableUsers);
    }
    let pool_set: HashSet<usize> = pool.iter().copied().collect();
    let scores = scorer.scores(train, &users, pool)?;
    let none = HashSet::new();
    let mut ranked = Vec::with_capacity(users.len());
    let mut relevant = Vec::with_capacity(users.len());
    for (r, &u) in users.iter().enumerate() {
        let top = top_k(scores.row(r), k, &none)?;
        ranked.push(top.into_iter().map(|(p, _)| pool[p]).collect::<Vec<_>>());
        let rel: HashSet<usize> = target
            .items_of(u)
            .iter()
            .map(|&i| i as usize)
            .filter(|i| pool_set.contains(i))
            .collect();
        if rel.len() != target.items_of(u).len() {
            return Err(Error::InvalidArgument(format!(
                "user {u} has relevant items outside the pool"
            )));
        }
        relevant.push(rel);
    }
    let recall = recall_at_k(&ranked, &relevant, k)?;
    let ndcg = ndcg_at_k(&ranked, &relevant, k)?;
    let mdg = mdg_at_k(&ranked, &relevant, k, pool)?;
    let index: std::collections::HashMap<usize, usize> =
        pool.iter().enumerate().map(|(p, &i)| (i, p)).collect();
    let mut counts = vec![0usize; pool.len()];
    for list in &ranked {
        for i in list {
            counts[index[i]] += 1;
        }
    }
    let rel_counts: Vec<usize> = relevant.iter().map(HashSet::len).collect();
    Ok(EvalReport {
        k,
        effective_k: k.min(pool.len()),
        pool_size: pool.len(),
        n_users_evaluated: users.len(),
        recall_at_k: recall,
        ndcg_at_k: ndcg,
        mdg_at_k: mdg.mean,
        gini_diversity: gini_diversity(&counts)?,
        random_baseline: random_baseline(&rel_counts, pool.len(), k)?,
        items: pool
            .iter()
            .zip(mdg.per_item)
            .zip(counts)
            .map(|((&item, mdg), pred_count)| ItemReport {
                item,
                mdg,
                pred_count,
            })
            .collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population standard deviation.
    pub fn of(values: &[f64]) -> MeanStd {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        MeanStd { mean, std: var.sqrt() }
    }
}

/// Mean and standard deviation of the headline metrics over runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub runs: usize,
    pub k: usize,
    pub recall_at_k: MeanStd,
    pub ndcg_at_k: MeanStd,
    pub mdg_at_k: MeanStd,
    pub gini_diversity: MeanStd,
}

pub fn aggregate(reports: &[EvalReport]) -> Result<AggregateReport> {
    let first = reports.first().ok_or(Error::EmptyInput)?;
    if reports.iter().any(|r| r.k != first.k) {
        return Err(Error::InvalidArgument("reports use different k".into()));
    }
    let col = |f: fn(&EvalReport) -> f64| MeanStd::of(&reports.iter().map(f).collect::<Vec<_>>());
    Ok(AggregateReport {
        runs: reports.len(),
        k: first.k,
        recall_at_k: col(|r| r.recall_at_k),
        ndcg_at_k: col(|r| r.ndcg_at_k),
        mdg_at_k: col(|r| r.mdg_at_k),
        gini_diversity: col(|r| r.gini_diversity),
    })
}
