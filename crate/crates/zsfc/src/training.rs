//! Training: sampled-softmax objective, reverse-mode gradients written
//! out by hand, and an Adam loop whose results are bit-identical across
//! worker-thread counts.
//!
//! Determinism contract: parameter initialization, per-epoch shuffling,
//! and per-example negative sampling each draw from their own seeded
//! stream, and batch gradients are accumulated in fixed-size chunks that
//! are merged in order — so a (dataset, catalog, config) triple always
//! produces the same parameters, no matter how many threads run.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::catalog::{Catalog, ItemId};
use crate::model::{
    add_assign, add_scaled, combined_scoring_vector, dot, elu_deriv_from_output, encode_context,
    encode_traced, fuse_item, fuse_traced, init_params, scale, Affine, EventRole, FusePath,
    FuseTrace, InitMode, ModelError, ModelParams, ModelVariant, Real,
};
use crate::sampler::TrainingExample;
use crate::seed;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPSILON: f64 = 1e-8;

/// Examples per parallel gradient chunk. Fixed (rather than derived from
/// the thread count) so accumulation order never changes.
const GRAD_CHUNK: usize = 8;

/// Keeps negative-sampling streams for different epochs far apart.
const NEGATIVE_EPOCH_STRIDE: u64 = 1 << 40;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub variant: ModelVariant,
    pub dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Sampled negatives per example; at most `n_items - 2`.
    pub negatives: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: ModelVariant::Zsfc,
            dim: 128,
            epochs: 5,
            batch_size: 64,
            negatives: 2048,
            learning_rate: 5e-4,
            seed: 0,
        }
    }
}

/// Per-epoch progress, reported through the `train` callback.
#[derive(Debug, Clone, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub examples: usize,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("{requested} negatives requested, but a {n_items}-item catalog supports at most {max}")]
    TooManyNegatives {
        requested: usize,
        n_items: usize,
        max: usize,
    },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("non-finite loss {loss} in epoch {epoch}, batch {batch}; lower the learning rate or check the data")]
    NonFinite {
        epoch: usize,
        batch: usize,
        loss: f64,
    },
}

/// Sampled-softmax loss with the positive score first: `-log p(scores[0])`.
/// Stable under large scores (the max is subtracted before exponentiation).
pub fn loss_from_scores<F: Real>(scores: &[F]) -> F {
    assert!(!scores.is_empty(), "loss needs at least the positive score");
    let max = scores.iter().copied().fold(scores[0], F::max);
    let mut sum = F::zero();
    for &s in scores {
        sum = sum + (s - max).exp();
    }
    sum.ln() - (scores[0] - max)
}

/// d(loss)/d(score_i) = p_i - [i == 0].
fn softmax_gradients<F: Real>(scores: &[F]) -> Vec<F> {
    let max = scores.iter().copied().fold(scores[0], F::max);
    let exps: Vec<F> = scores.iter().map(|&s| (s - max).exp()).collect();
    let mut total = F::zero();
    for &e in &exps {
        total = total + e;
    }
    let mut gz: Vec<F> = exps.into_iter().map(|e| e / total).collect();
    gz[0] = gz[0] - F::one();
    gz
}

/// Draw `count` distinct negatives for one (epoch, example) pair, never
/// the target or base item. Stateless: the same arguments always return
/// the same items. The caller must keep `count <= n_items - 2`.
pub fn sample_negatives(
    seed: u64,
    epoch: u64,
    example_index: u64,
    target: ItemId,
    base: ItemId,
    n_items: usize,
    count: usize,
) -> Vec<ItemId> {
    debug_assert!(count + 2 <= n_items, "not enough items to sample from");
    let mut rng = seed::indexed_stream(
        seed,
        "negatives",
        epoch
            .wrapping_mul(NEGATIVE_EPOCH_STRIDE)
            .wrapping_add(example_index),
    );
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let c = ItemId(rng.gen_range(0..n_items as u32));
        if c != target && c != base && !out.contains(&c) {
            out.push(c);
        }
    }
    out
}

/// Loss of one example against its sampled negatives (forward only).
pub fn example_loss<F: Real>(
    example: &TrainingExample,
    negatives: &[ItemId],
    params: &ModelParams<F>,
    catalog: &Catalog,
) -> Result<F, ModelError> {
    let ctx = encode_context(example, params, catalog)?;
    let combined = combined_scoring_vector(&ctx, params.variant);
    let mut scores = Vec::with_capacity(1 + negatives.len());
    scores.push(dot(
        &combined,
        &fuse_item(example.target, EventRole::Candidate, params, catalog)?,
    ));
    for &n in negatives {
        scores.push(dot(
            &combined,
            &fuse_item(n, EventRole::Candidate, params, catalog)?,
        ));
    }
    Ok(loss_from_scores(&scores))
}

/// Loss and full parameter gradients of one example. Gradients come back
/// in a parameter-shaped container: untouched tensors stay zero.
pub fn example_gradients<F: Real>(
    example: &TrainingExample,
    negatives: &[ItemId],
    params: &ModelParams<F>,
    catalog: &Catalog,
) -> Result<(F, ModelParams<F>), ModelError> {
    let mut grads = zeros_like(params);
    let loss = accumulate_example_gradients(example, negatives, params, catalog, &mut grads)?;
    Ok((loss, grads))
}

pub(crate) fn zeros_like<F: Real>(params: &ModelParams<F>) -> ModelParams<F> {
    ModelParams::zeros(
        params.variant,
        params.dim,
        params.n_items(),
        params.n_categories(),
    )
}

fn merge_into<F: Real>(acc: &mut ModelParams<F>, other: &ModelParams<F>) {
    for (dst, src) in acc.tensors_mut().into_iter().zip(other.tensors()) {
        add_assign(dst, src.2);
    }
}

fn scale_all<F: Real>(grads: &mut ModelParams<F>, s: F) {
    for tensor in grads.tensors_mut() {
        scale(tensor, s);
    }
}

/// Backprop through a tanh head `h = tanh(W u + b)`; returns d(loss)/du.
fn backward_head<F: Real>(
    head: &Affine<F>,
    input: &[F],
    output: &[F],
    goutput: &[F],
    ghead: &mut Affine<F>,
) -> Vec<F> {
    let gpre: Vec<F> = output
        .iter()
        .zip(goutput)
        .map(|(&h, &g)| g * (F::one() - h * h))
        .collect();
    ghead.weight.add_outer(&gpre, input);
    add_assign(&mut ghead.bias, &gpre);
    head.weight.matvec_transposed(&gpre)
}

/// Backprop through item fusion, scattering into embedding rows and the
/// fusion layers according to the path the forward pass took.
fn backward_fuse<F: Real>(
    trace: &FuseTrace<F>,
    gfused: &[F],
    params: &ModelParams<F>,
    grads: &mut ModelParams<F>,
) {
    let d = params.dim;
    let item = trace.item.0 as usize;
    let role = trace.role.index();
    match &trace.path {
        FusePath::Bare => {
            add_assign(grads.item_embedding.row_mut(item), gfused);
        }
        FusePath::Scaled => {
            let m = params.item_embedding.row(item);
            let t = params.event_embedding.row(role);
            let gm: Vec<F> = (0..d).map(|k| gfused[k] * (F::one() + t[k])).collect();
            let gt: Vec<F> = (0..d).map(|k| gfused[k] * m[k]).collect();
            add_assign(grads.item_embedding.row_mut(item), &gm);
            add_assign(grads.event_embedding.row_mut(role), &gt);
        }
        FusePath::Full {
            concat,
            hidden,
            output,
        } => {
            let t = params.event_embedding.row(role);
            let gout: Vec<F> = (0..d).map(|k| gfused[k] * (F::one() + t[k])).collect();
            let gt: Vec<F> = (0..d).map(|k| gfused[k] * output[k]).collect();
            add_assign(grads.event_embedding.row_mut(role), &gt);

            let gpre_out: Vec<F> = (0..d)
                .map(|k| gout[k] * elu_deriv_from_output(output[k]))
                .collect();
            grads.fusion_output.weight.add_outer(&gpre_out, hidden);
            add_assign(&mut grads.fusion_output.bias, &gpre_out);
            let ghidden = params.fusion_output.weight.matvec_transposed(&gpre_out);

            let gpre_hid: Vec<F> = (0..d)
                .map(|k| ghidden[k] * elu_deriv_from_output(hidden[k]))
                .collect();
            grads.fusion_hidden.weight.add_outer(&gpre_hid, concat);
            add_assign(&mut grads.fusion_hidden.bias, &gpre_hid);
            let gconcat = params.fusion_hidden.weight.matvec_transposed(&gpre_hid);

            // concat = (m, m ⊙ g, g)
            let m = params.item_embedding.row(item);
            let cat = trace.category.0 as usize;
            let g_row = params.category_embedding.row(cat);
            let gm: Vec<F> = (0..d)
                .map(|k| gconcat[k] + gconcat[d + k] * g_row[k])
                .collect();
            let gg: Vec<F> = (0..d)
                .map(|k| gconcat[2 * d + k] + gconcat[d + k] * m[k])
                .collect();
            add_assign(grads.item_embedding.row_mut(item), &gm);
            add_assign(grads.category_embedding.row_mut(cat), &gg);
        }
    }
}

/// Forward + backward for one example, adding into `grads`.
pub(crate) fn accumulate_example_gradients<F: Real>(
    example: &TrainingExample,
    negatives: &[ItemId],
    params: &ModelParams<F>,
    catalog: &Catalog,
    grads: &mut ModelParams<F>,
) -> Result<F, ModelError> {
    let d = params.dim;
    let (ctx, trace) = encode_traced(example, params, catalog)?;
    let combined = combined_scoring_vector(&ctx, params.variant);

    let mut cand_traces = Vec::with_capacity(1 + negatives.len());
    cand_traces.push(fuse_traced(
        example.target,
        EventRole::Candidate,
        params,
        catalog,
    )?);
    for &n in negatives {
        cand_traces.push(fuse_traced(n, EventRole::Candidate, params, catalog)?);
    }
    let scores: Vec<F> = cand_traces
        .iter()
        .map(|t| dot(&combined, &t.fused))
        .collect();
    let loss = loss_from_scores(&scores);
    let gz = softmax_gradients(&scores);

    // Σ_i gz_i x_i drives every head gradient; each candidate itself
    // receives gz_i · combined.
    let mut gx_sum = vec![F::zero(); d];
    for (t, &g) in cand_traces.iter().zip(&gz) {
        add_scaled(&mut gx_sum, &t.fused, g);
    }
    for (t, &g) in cand_traces.iter().zip(&gz) {
        let gfused: Vec<F> = combined.iter().map(|&c| c * g).collect();
        backward_fuse(t, &gfused, params, grads);
    }

    let (gsession, gbase_head, gorders) = if params.variant.uses_order_head() {
        // score = (h_o + h_s + h_t) · x: one shared gradient.
        (gx_sum.clone(), gx_sum.clone(), Some(gx_sum.clone()))
    } else {
        // score = Σ h_s h_t x: each head sees the other's elementwise mask.
        let gs: Vec<F> = (0..d).map(|k| ctx.base[k] * gx_sum[k]).collect();
        let gb: Vec<F> = (0..d).map(|k| ctx.session[k] * gx_sum[k]).collect();
        (gs, gb, None)
    };

    let gpooled = backward_head(
        &params.session_head,
        &ctx.pooled,
        &ctx.session,
        &gsession,
        &mut grads.session_head,
    );
    let mut gbase_fused = backward_head(
        &params.base_head,
        &trace.base.fused,
        &ctx.base,
        &gbase_head,
        &mut grads.base_head,
    );
    if let Some(go) = gorders {
        let gmean = backward_head(
            &params.order_head,
            &trace.order_mean,
            &ctx.orders,
            &go,
            &mut grads.order_head,
        );
        if !trace.orders.is_empty() {
            let inv = F::from_f64(1.0 / trace.orders.len() as f64);
            let share: Vec<F> = gmean.iter().map(|&v| v * inv).collect();
            for t in &trace.orders {
                backward_fuse(t, &share, params, grads);
            }
        }
    }

    if let Some(att) = &trace.attention {
        let p = &params.attention;
        let ga_params = &mut grads.attention;
        let n = trace.clicks.len();
        let mut gclicks: Vec<Vec<F>> = vec![vec![F::zero(); d]; n];
        let mut gmean_total = vec![F::zero(); d];
        for (j, click) in trace.clicks.iter().enumerate() {
            let x = &click.fused;
            // pooled = Σ_j a_j x_j
            let ga = dot(&gpooled, x);
            add_scaled(&mut gclicks[j], &gpooled, att.weights[j]);
            // a_j = score · sigmoid(q_j)
            let gate = &att.gates[j];
            let gq: Vec<F> = (0..d)
                .map(|k| ga * p.score[k] * gate[k] * (F::one() - gate[k]))
                .collect();
            add_scaled(&mut ga_params.score, gate, ga);
            // q_j = W_session x_j + W_base x_base + W_mean s̄ + bias
            ga_params.session.add_outer(&gq, x);
            add_assign(&mut gclicks[j], &p.session.matvec_transposed(&gq));
            ga_params.base.add_outer(&gq, &trace.base.fused);
            add_assign(&mut gbase_fused, &p.base.matvec_transposed(&gq));
            ga_params.mean.add_outer(&gq, &att.mean);
            add_assign(&mut gmean_total, &p.mean.matvec_transposed(&gq));
            add_assign(&mut ga_params.bias, &gq);
        }
        // s̄ = (1/n) Σ_j x_j spreads its gradient evenly.
        scale(&mut gmean_total, F::from_f64(1.0 / n as f64));
        for gc in gclicks.iter_mut() {
            add_assign(gc, &gmean_total);
        }
        for (click, gc) in trace.clicks.iter().zip(&gclicks) {
            backward_fuse(click, gc, params, grads);
        }
    }

    backward_fuse(&trace.base, &gbase_fused, params, grads);
    Ok(loss)
}

/// Mean loss and mean gradients over one batch of dataset indices.
pub(crate) fn batch_gradients<F: Real>(
    dataset: &[TrainingExample],
    batch: &[usize],
    epoch: usize,
    params: &ModelParams<F>,
    catalog: &Catalog,
    config: &TrainConfig,
) -> Result<(f64, ModelParams<F>), TrainError> {
    let chunks: Vec<(Vec<f64>, ModelParams<F>)> = batch
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| -> Result<(Vec<f64>, ModelParams<F>), TrainError> {
            let mut grads = zeros_like(params);
            let mut losses = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let example = &dataset[idx];
                let negatives = sample_negatives(
                    config.seed,
                    epoch as u64,
                    idx as u64,
                    example.target,
                    example.base,
                    params.n_items(),
                    config.negatives,
                );
                let loss =
                    accumulate_example_gradients(example, &negatives, params, catalog, &mut grads)?;
                losses.push(loss.into_f64());
            }
            Ok((losses, grads))
        })
        .collect::<Result<Vec<_>, TrainError>>()?;

    let mut total = zeros_like(params);
    let mut loss_sum = 0.0;
    let mut count = 0usize;
    for (losses, grads) in &chunks {
        for l in losses {
            loss_sum += l;
        }
        merge_into(&mut total, grads);
        count += losses.len();
    }
    scale_all(&mut total, F::from_f64(1.0 / count as f64));
    Ok((loss_sum / count as f64, total))
}

/// Adam first and second moments for every parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState<F> {
    step: u32,
    moments: Vec<(Vec<F>, Vec<F>)>,
}

impl<F: Real> AdamState<F> {
    pub fn new(params: &ModelParams<F>) -> Self {
        let moments = params
            .tensors()
            .iter()
            .map(|(_, _, data)| (vec![F::zero(); data.len()], vec![F::zero(); data.len()]))
            .collect();
        AdamState { step: 0, moments }
    }
}

/// One Adam update over every tensor (dense: zero gradients still decay
/// the moments), with the standard bias correction.
pub fn adam_step<F: Real>(
    params: &mut ModelParams<F>,
    grads: &ModelParams<F>,
    state: &mut AdamState<F>,
    lr: F,
) {
    state.step += 1;
    let one = F::one();
    let b1 = F::from_f64(ADAM_BETA1);
    let b2 = F::from_f64(ADAM_BETA2);
    let eps = F::from_f64(ADAM_EPSILON);
    let bc1 = one - b1.powi(state.step as i32);
    let bc2 = one - b2.powi(state.step as i32);
    for ((tensor, grad), (m, v)) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(&mut state.moments)
    {
        for i in 0..tensor.len() {
            let g = grad.2[i];
            m[i] = b1 * m[i] + (one - b1) * g;
            v[i] = b2 * v[i] + (one - b2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            tensor[i] = tensor[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Train a model from scratch on `dataset`. With `epochs == 0` the
/// freshly initialized parameters come back untouched. The progress
/// callback fires once per completed epoch.
pub fn train<F: Real>(
    dataset: &[TrainingExample],
    catalog: &Catalog,
    config: &TrainConfig,
    mut progress: impl FnMut(&EpochStats),
) -> Result<ModelParams<F>, TrainError> {
    if config.dim == 0 {
        return Err(TrainError::InvalidConfig(
            "embedding dimension must be positive".into(),
        ));
    }
    if config.batch_size == 0 {
        return Err(TrainError::InvalidConfig(
            "batch size must be positive".into(),
        ));
    }
    if config.negatives == 0 {
        return Err(TrainError::InvalidConfig(
            "at least one negative is required".into(),
        ));
    }
    let n_items = catalog.len();
    let max_negatives = n_items.saturating_sub(2);
    if config.negatives > max_negatives {
        return Err(TrainError::TooManyNegatives {
            requested: config.negatives,
            n_items,
            max: max_negatives,
        });
    }
    if config.epochs > 0 && dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }

    let mode = if config.variant.uses_image_init() {
        InitMode::Image
    } else {
        InitMode::Xavier
    };
    let mut params = init_params::<F>(catalog, config.variant, config.dim, mode, config.seed)?;
    let mut adam = AdamState::new(&params);
    let lr = F::from_f64(config.learning_rate);

    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..config.epochs {
        let mut rng = seed::indexed_stream(config.seed, "shuffle", epoch as u64);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (batch_no, batch) in order.chunks(config.batch_size).enumerate() {
            let (batch_loss, grads) =
                batch_gradients(dataset, batch, epoch, &params, catalog, config)?;
            if !batch_loss.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: batch_no,
                    loss: batch_loss,
                });
            }
            epoch_loss += batch_loss * batch.len() as f64;
            adam_step(&mut params, &grads, &mut adam, lr);
        }
        progress(&EpochStats {
            epoch,
            mean_loss: epoch_loss / dataset.len() as f64,
            examples: dataset.len(),
        });
    }
    Ok(params)
}
