//! Offline evaluation: recall over held-out examples, the co-occurrence
//! baseline, variant ablations, and a ranking latency benchmark.
//!
//! Every recommender ranks the *full catalog* and drops candidates that
//! are not complementary to the base item, so reported recall reflects
//! exactly what a serving path would return.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Catalog, ItemId};
use crate::model::{
    combined_scoring_vector, dot, encode_context, fuse_item, top_k_by_score, EventRole,
    ModelError, ModelParams, ModelVariant, Real,
};
use crate::sampler::{CooccurrenceMatrix, TrainingExample};
use crate::training::{train, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("test set is empty")]
    EmptyTestset,
    #[error("{left} has {left_len} items, {right} has {right_len}")]
    SizeMismatch {
        left: &'static str,
        left_len: usize,
        right: &'static str,
        right_len: usize,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Anything that can answer "top k complementary items for this request".
pub trait Recommender: Sync {
    fn recommend(&self, request: &TrainingExample, k: usize) -> Result<Vec<ItemId>, EvalError>;
}

/// Recall metrics over a held-out example set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_total: usize,
    pub k: usize,
    /// Fraction of examples whose target appeared in the top k.
    pub recall_at_k: f64,
    /// Same, restricted to examples whose base item was bought the same
    /// day; absent when the test set has no such examples.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub order_recall_at_k: Option<f64>,
    /// Number of same-day-purchase examples behind `order_recall_at_k`.
    pub n_ordered: usize,
}

/// Evaluate a recommender on held-out examples. Hit counts are integers,
/// so the result is independent of evaluation order and thread count.
pub fn evaluate<R: Recommender + ?Sized>(
    recommender: &R,
    testset: &[TrainingExample],
    k: usize,
) -> Result<EvalReport, EvalError> {
    if testset.is_empty() {
        return Err(EvalError::EmptyTestset);
    }
    let (hits, ordered, ordered_hits) = testset
        .par_iter()
        .map(|ex| -> Result<(u64, u64, u64), EvalError> {
            let recs = recommender.recommend(ex, k)?;
            let hit = u64::from(recs.contains(&ex.target));
            let is_ordered = u64::from(ex.ordered_within_day);
            Ok((hit, is_ordered, is_ordered * hit))
        })
        .try_reduce(
            || (0, 0, 0),
            |a, b| Ok((a.0 + b.0, a.1 + b.1, a.2 + b.2)),
        )?;

    Ok(EvalReport {
        n_total: testset.len(),
        k,
        recall_at_k: hits as f64 / testset.len() as f64,
        order_recall_at_k: (ordered > 0).then(|| ordered_hits as f64 / ordered as f64),
        n_ordered: ordered as usize,
    })
}

/// Serves a trained model over the full catalog, with the per-item
/// candidate vectors fused once up front.
pub struct ModelRecommender<'a, F> {
    params: &'a ModelParams<F>,
    catalog: &'a Catalog,
    fused: Vec<Vec<F>>,
}

impl<'a, F: Real> ModelRecommender<'a, F> {
    pub fn new(params: &'a ModelParams<F>, catalog: &'a Catalog) -> Result<Self, EvalError> {
        if params.n_items() != catalog.len() {
            return Err(EvalError::SizeMismatch {
                left: "model",
                left_len: params.n_items(),
                right: "catalog",
                right_len: catalog.len(),
            });
        }
        let fused = (0..catalog.len() as u32)
            .into_par_iter()
            .map(|i| fuse_item(ItemId(i), EventRole::Candidate, params, catalog))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ModelRecommender {
            params,
            catalog,
            fused,
        })
    }

    /// Rank the whole catalog for one request. Bit-identical to calling
    /// `rank_candidates` with every item: fusing a candidate now or ahead
    /// of time runs the same float operations.
    pub fn rank(
        &self,
        request: &TrainingExample,
        k: usize,
        post_filter: bool,
    ) -> Result<Vec<(ItemId, F)>, EvalError> {
        let ctx = encode_context(request, self.params, self.catalog)?;
        let combined = combined_scoring_vector(&ctx, self.params.variant);
        let scored = self.fused.iter().enumerate().filter_map(|(i, fused)| {
            let item = ItemId(i as u32);
            if post_filter && !self.catalog.complementary_unchecked(request.base, item) {
                return None;
            }
            Some((item, dot(&combined, fused)))
        });
        Ok(top_k_by_score(scored, k))
    }
}

impl<F: Real> Recommender for ModelRecommender<'_, F> {
    fn recommend(&self, request: &TrainingExample, k: usize) -> Result<Vec<ItemId>, EvalError> {
        Ok(self
            .rank(request, k, true)?
            .into_iter()
            .map(|(item, _)| item)
            .collect())
    }
}

/// Co-occurrence baseline: an item is represented by its co-purchase
/// count row, and items are related by the cosine of those rows.
pub struct CfModel<'a> {
    catalog: &'a Catalog,
    matrix: &'a CooccurrenceMatrix,
    norms: Vec<f64>,
}

impl<'a> CfModel<'a> {
    pub fn new(catalog: &'a Catalog, matrix: &'a CooccurrenceMatrix) -> Result<Self, EvalError> {
        if matrix.n_items() != catalog.len() {
            return Err(EvalError::SizeMismatch {
                left: "co-occurrence matrix",
                left_len: matrix.n_items(),
                right: "catalog",
                right_len: catalog.len(),
            });
        }
        let norms = (0..catalog.len() as u32)
            .map(|i| {
                matrix
                    .neighbors(ItemId(i))
                    .iter()
                    .map(|&(_, c)| (c as f64) * (c as f64))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        Ok(CfModel {
            catalog,
            matrix,
            norms,
        })
    }

    /// Cosine between two co-occurrence rows; 0 when either row is empty.
    pub fn cosine(&self, a: ItemId, b: ItemId) -> f64 {
        let na = self.norms[a.0 as usize];
        let nb = self.norms[b.0 as usize];
        if na == 0.0 || nb == 0.0 {
            return 0.0;
        }
        // Rows are sorted by item id: merge to find shared neighbors.
        let ra = self.matrix.neighbors(a);
        let rb = self.matrix.neighbors(b);
        let mut dot = 0.0;
        let (mut i, mut j) = (0, 0);
        while i < ra.len() && j < rb.len() {
            match ra[i].0.cmp(&rb[j].0) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    dot += ra[i].1 as f64 * rb[j].1 as f64;
                    i += 1;
                    j += 1;
                }
            }
        }
        dot / (na * nb)
    }

    /// Positive-cosine complementary items for `base`, best first, ties by
    /// ascending id.
    fn related_to(&self, probe: ItemId, base: ItemId) -> Vec<(ItemId, f64)> {
        let mut related: Vec<(ItemId, f64)> = (0..self.catalog.len() as u32)
            .map(ItemId)
            .filter(|&c| c != base && self.catalog.complementary_unchecked(base, c))
            .filter_map(|c| {
                let cos = self.cosine(probe, c);
                (cos > 0.0).then_some((c, cos))
            })
            .collect();
        related.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        related
    }

    /// Recommend complementary items for a base item: first the items
    /// whose rows are directly similar to the base's, then — if that list
    /// is shorter than `k` — items similar to the ones already kept, in
    /// kept order, skipping duplicates, until `k` is reached.
    pub fn recommend_for_base(&self, base: ItemId, k: usize) -> Result<Vec<ItemId>, EvalError> {
        self.catalog
            .entry(base)
            .map_err(|_| EvalError::Model(ModelError::UnknownItem(base)))?;
        let mut result: Vec<ItemId> = self
            .related_to(base, base)
            .into_iter()
            .take(k)
            .map(|(item, _)| item)
            .collect();
        if result.len() < k {
            let kept = result.clone();
            'expansion: for &seed_item in &kept {
                for (candidate, _) in self.related_to(seed_item, base) {
                    if result.contains(&candidate) {
                        continue;
                    }
                    result.push(candidate);
                    if result.len() == k {
                        break 'expansion;
                    }
                }
            }
        }
        Ok(result)
    }
}

impl Recommender for CfModel<'_> {
    fn recommend(&self, request: &TrainingExample, k: usize) -> Result<Vec<ItemId>, EvalError> {
        self.recommend_for_base(request.base, k)
    }
}

/// One row of an ablation: a variant, its training loss, and its recall.
#[derive(Debug, Clone, Serialize)]
pub struct AblationEntry {
    pub variant: ModelVariant,
    /// Mean loss of the final epoch (absent when epochs == 0).
    pub final_train_loss: Option<f64>,
    pub report: EvalReport,
}

/// Train and evaluate every model variant under identical data, seed and
/// hyperparameters; entries come back in `ModelVariant::ALL` order.
pub fn run_ablation(
    train_set: &[TrainingExample],
    test_set: &[TrainingExample],
    catalog: &Catalog,
    config: &TrainConfig,
    k: usize,
) -> Result<Vec<AblationEntry>, EvalError> {
    let mut entries = Vec::with_capacity(ModelVariant::ALL.len());
    for variant in ModelVariant::ALL {
        let config = TrainConfig {
            variant,
            ..config.clone()
        };
        let mut final_loss = None;
        let params = train::<f32>(train_set, catalog, &config, |stats| {
            final_loss = Some(stats.mean_loss);
        })?;
        let recommender = ModelRecommender::new(&params, catalog)?;
        let report = evaluate(&recommender, test_set, k)?;
        entries.push(AblationEntry {
            variant,
            final_train_loss: final_loss,
            report,
        });
    }
    Ok(entries)
}

/// Latency distribution of full-catalog ranking.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub requests: usize,
    pub catalog_size: usize,
    pub k: usize,
    pub p50_ms: f64,
    pub p99_ms: f64,
    pub mean_ms: f64,
}

/// A benchmark's report plus everything needed to audit it: the requests
/// it timed and the rankings it produced.
pub struct BenchRun {
    pub report: BenchReport,
    pub contexts: Vec<TrainingExample>,
    pub results: Vec<Vec<(ItemId, f32)>>,
}

/// Nearest-rank percentile of an ascending-sorted sample.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let rank = (p / 100.0 * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Time full-catalog ranking, one request at a time on one thread.
/// Candidate fusion is precomputed outside the timed region; each timed
/// request covers context encoding, scoring every item, and top-k
/// selection, without the complementary filter.
pub fn bench_rank(
    params: &ModelParams<f32>,
    catalog: &Catalog,
    requests: &[TrainingExample],
    k: usize,
) -> Result<BenchRun, EvalError> {
    if requests.is_empty() {
        return Err(EvalError::EmptyTestset);
    }
    let recommender = ModelRecommender::new(params, catalog)?;
    let mut times_ms = Vec::with_capacity(requests.len());
    let mut results = Vec::with_capacity(requests.len());
    for request in requests {
        let started = Instant::now();
        let ranked = recommender.rank(request, k, false)?;
        times_ms.push(started.elapsed().as_secs_f64() * 1e3);
        results.push(ranked);
    }
    let mut sorted = times_ms.clone();
    sorted.sort_by(f64::total_cmp);
    let report = BenchReport {
        requests: requests.len(),
        catalog_size: catalog.len(),
        k,
        p50_ms: percentile(&sorted, 50.0),
        p99_ms: percentile(&sorted, 99.0),
        mean_ms: times_ms.iter().sum::<f64>() / times_ms.len() as f64,
    };
    Ok(BenchRun {
        report,
        contexts: requests.to_vec(),
        results,
    })
}
