//! Session models for complementary-item scoring.
//!
//! A request carries the user's recent clicks and orders plus the *base*
//! item they are looking at. Context is encoded into three bounded head
//! vectors — attention-pooled session, base, and mean-pooled orders — and
//! every candidate is scored against them, either trilinearly (session ⊙
//! base · candidate) or additively with the order head included.
//!
//! Item vectors are *fused* from metadata: base embedding, category
//! embedding and an event-type embedding (click / order / candidate),
//! passed through a two-layer elu bottleneck. Leaner variants skip the
//! category bottleneck or the event scaling; see [`ModelVariant`].

pub mod checkpoint;
mod math;

use std::collections::BinaryHeap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Catalog, CategoryId, ItemId};
use crate::sampler::TrainingExample;
use crate::seed;

pub use math::{add_assign, add_scaled, dot, elu, elu_deriv_from_output, scale, sigmoid, Matrix, Real};

/// Which model is being trained or served.
///
/// `Stamp` is the plain session baseline: raw item embeddings, trilinear
/// scoring, no order context. Each enhancement can ride on top of it
/// independently, and `Zsfc` combines all three:
///
/// * order head — score becomes `(h_o + h_s + h_t) · x` (`StampPlusOrders`)
/// * category fusion — items pass through the metadata bottleneck
///   (`StampPlusCategory`)
/// * image initialization — item embeddings start from catalog image
///   features instead of random values (`StampPlusImage`)
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelVariant {
    #[serde(rename = "stamp")]
    Stamp,
    #[serde(rename = "stamp-orders")]
    StampPlusOrders,
    #[serde(rename = "stamp-category")]
    StampPlusCategory,
    #[serde(rename = "stamp-image")]
    StampPlusImage,
    #[serde(rename = "zsfc")]
    Zsfc,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 5] = [
        ModelVariant::Stamp,
        ModelVariant::StampPlusOrders,
        ModelVariant::StampPlusCategory,
        ModelVariant::StampPlusImage,
        ModelVariant::Zsfc,
    ];

    /// Scoring includes the order head (`score_sum` instead of trilinear).
    pub fn uses_order_head(self) -> bool {
        matches!(self, ModelVariant::StampPlusOrders | ModelVariant::Zsfc)
    }

    /// Item vectors pass through the category/metadata bottleneck.
    pub fn uses_category_fusion(self) -> bool {
        matches!(self, ModelVariant::StampPlusCategory | ModelVariant::Zsfc)
    }

    /// Item embeddings initialize from catalog image features.
    pub fn uses_image_init(self) -> bool {
        matches!(self, ModelVariant::StampPlusImage | ModelVariant::Zsfc)
    }

    /// Every variant except the plain baseline scales fused vectors by
    /// `1 + event_embedding`; plain `Stamp` pins that factor to 1.
    pub fn uses_event_embedding(self) -> bool {
        !matches!(self, ModelVariant::Stamp)
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelVariant::Stamp => "stamp",
            ModelVariant::StampPlusOrders => "stamp-orders",
            ModelVariant::StampPlusCategory => "stamp-category",
            ModelVariant::StampPlusImage => "stamp-image",
            ModelVariant::Zsfc => "zsfc",
        }
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ModelVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown model variant `{s}`"))
    }
}

/// Role an item plays in a request; selects the event-embedding row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventRole {
    Click,
    Order,
    Candidate,
}

impl EventRole {
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        match self {
            EventRole::Click => 0,
            EventRole::Order => 1,
            EventRole::Candidate => 2,
        }
    }
}

/// Embedding table: `rows × dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding<F> {
    dim: usize,
    data: Vec<F>,
}

impl<F: Real> Embedding<F> {
    pub fn zeros(rows: usize, dim: usize) -> Self {
        Embedding {
            dim,
            data: vec![F::zero(); rows * dim],
        }
    }

    pub fn rows(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.dim..(r + 1) * self.dim]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [F] {
        &mut self.data[r * self.dim..(r + 1) * self.dim]
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub(crate) fn data_vec_mut(&mut self) -> &mut Vec<F> {
        &mut self.data
    }
}

/// Dense affine map `x ↦ W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine<F> {
    pub weight: Matrix<F>,
    pub bias: Vec<F>,
}

impl<F: Real> Affine<F> {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Affine {
            weight: Matrix::zeros(out_dim, in_dim),
            bias: vec![F::zero(); out_dim],
        }
    }

    pub fn apply(&self, x: &[F]) -> Vec<F> {
        let mut y = self.weight.matvec(x);
        add_assign(&mut y, &self.bias);
        y
    }
}

/// Attention over session vectors, queried by the fused base item.
///
/// For session item `x_j` with session mean `s̄`:
/// `a_j = score · sigmoid(W_session x_j + W_base x_base + W_mean s̄ + bias)`;
/// the pooled vector is the *unnormalized* weighted sum `Σ_j a_j x_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<F> {
    pub session: Matrix<F>,
    pub base: Matrix<F>,
    pub mean: Matrix<F>,
    pub bias: Vec<F>,
    pub score: Vec<F>,
}

impl<F: Real> AttentionParams<F> {
    pub fn zeros(dim: usize) -> Self {
        AttentionParams {
            session: Matrix::zeros(dim, dim),
            base: Matrix::zeros(dim, dim),
            mean: Matrix::zeros(dim, dim),
            bias: vec![F::zero(); dim],
            score: vec![F::zero(); dim],
        }
    }
}

/// All learnable state of one model, plus the identifying metadata that
/// travels with it in checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    pub variant: ModelVariant,
    pub dim: usize,
    /// Seed the parameters were initialized (and trained) under.
    pub seed: u64,
    pub item_embedding: Embedding<F>,
    pub category_embedding: Embedding<F>,
    pub event_embedding: Embedding<F>,
    /// First fusion layer: 3d concat → d.
    pub fusion_hidden: Affine<F>,
    /// Second fusion layer: d → d.
    pub fusion_output: Affine<F>,
    pub session_head: Affine<F>,
    pub base_head: Affine<F>,
    pub order_head: Affine<F>,
    pub attention: AttentionParams<F>,
}

/// Canonical tensor order used by checkpoints and the optimizer.
pub const TENSOR_NAMES: [&str; 18] = [
    "item_embedding",
    "category_embedding",
    "event_embedding",
    "fusion_hidden_weight",
    "fusion_hidden_bias",
    "fusion_output_weight",
    "fusion_output_bias",
    "session_head_weight",
    "session_head_bias",
    "base_head_weight",
    "base_head_bias",
    "order_head_weight",
    "order_head_bias",
    "attention_session_weight",
    "attention_base_weight",
    "attention_mean_weight",
    "attention_bias",
    "attention_score_weight",
];

impl<F: Real> ModelParams<F> {
    /// All-zero parameters of the given geometry.
    pub fn zeros(
        variant: ModelVariant,
        dim: usize,
        n_items: usize,
        n_categories: usize,
    ) -> Self {
        assert!(dim >= 1, "embedding dimension must be positive");
        ModelParams {
            variant,
            dim,
            seed: 0,
            item_embedding: Embedding::zeros(n_items, dim),
            category_embedding: Embedding::zeros(n_categories, dim),
            event_embedding: Embedding::zeros(EventRole::COUNT, dim),
            fusion_hidden: Affine::zeros(dim, 3 * dim),
            fusion_output: Affine::zeros(dim, dim),
            session_head: Affine::zeros(dim, dim),
            base_head: Affine::zeros(dim, dim),
            order_head: Affine::zeros(dim, dim),
            attention: AttentionParams::zeros(dim),
        }
    }

    pub fn n_items(&self) -> usize {
        self.item_embedding.rows()
    }

    pub fn n_categories(&self) -> usize {
        self.category_embedding.rows()
    }

    /// Tensors in canonical order: (name, shape, values).
    pub fn tensors(&self) -> Vec<(&'static str, Vec<usize>, &[F])> {
        let d = self.dim;
        vec![
            ("item_embedding", vec![self.n_items(), d], self.item_embedding.data()),
            ("category_embedding", vec![self.n_categories(), d], self.category_embedding.data()),
            ("event_embedding", vec![EventRole::COUNT, d], self.event_embedding.data()),
            ("fusion_hidden_weight", vec![d, 3 * d], self.fusion_hidden.weight.data()),
            ("fusion_hidden_bias", vec![d], &self.fusion_hidden.bias),
            ("fusion_output_weight", vec![d, d], self.fusion_output.weight.data()),
            ("fusion_output_bias", vec![d], &self.fusion_output.bias),
            ("session_head_weight", vec![d, d], self.session_head.weight.data()),
            ("session_head_bias", vec![d], &self.session_head.bias),
            ("base_head_weight", vec![d, d], self.base_head.weight.data()),
            ("base_head_bias", vec![d], &self.base_head.bias),
            ("order_head_weight", vec![d, d], self.order_head.weight.data()),
            ("order_head_bias", vec![d], &self.order_head.bias),
            ("attention_session_weight", vec![d, d], self.attention.session.data()),
            ("attention_base_weight", vec![d, d], self.attention.base.data()),
            ("attention_mean_weight", vec![d, d], self.attention.mean.data()),
            ("attention_bias", vec![d], &self.attention.bias),
            ("attention_score_weight", vec![d], &self.attention.score),
        ]
    }

    /// Mutable tensor storage in canonical order (e.g. for optimizers or
    /// finite-difference probes).
    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<F>> {
        vec![
            self.item_embedding.data_vec_mut(),
            self.category_embedding.data_vec_mut(),
            self.event_embedding.data_vec_mut(),
            self.fusion_hidden.weight.data_vec_mut(),
            &mut self.fusion_hidden.bias,
            self.fusion_output.weight.data_vec_mut(),
            &mut self.fusion_output.bias,
            self.session_head.weight.data_vec_mut(),
            &mut self.session_head.bias,
            self.base_head.weight.data_vec_mut(),
            &mut self.base_head.bias,
            self.order_head.weight.data_vec_mut(),
            &mut self.order_head.bias,
            self.attention.session.data_vec_mut(),
            self.attention.base.data_vec_mut(),
            self.attention.mean.data_vec_mut(),
            &mut self.attention.bias,
            &mut self.attention.score,
        ]
    }

    /// Convert every parameter to another precision (e.g. f32 → f64 for
    /// numerical checks). Exact whenever the target is wider.
    pub fn convert<G: Real>(&self) -> ModelParams<G> {
        let mut out = ModelParams::<G>::zeros(self.variant, self.dim, self.n_items(), self.n_categories());
        out.seed = self.seed;
        for (src, dst) in self.tensors().into_iter().zip(out.tensors_mut()) {
            for (i, &v) in src.2.iter().enumerate() {
                dst[i] = G::from_f64(v.into_f64());
            }
        }
        out
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown item id {0}")]
    UnknownItem(ItemId),
    #[error("item {item} outside the {vocab}-row item embedding table")]
    ItemOutOfRange { item: ItemId, vocab: usize },
    #[error("category {category} outside the {vocab}-row category embedding table")]
    CategoryOutOfRange { category: CategoryId, vocab: usize },
    #[error("item `{key}` has no image features; image initialization needs all of them")]
    MissingImageFeatures { key: String },
    #[error("image features have {found} values, embedding dimension is {expected}")]
    ImageFeatureDim { expected: usize, found: usize },
    #[error("catalog is empty")]
    EmptyCatalog,
}

/// How item embeddings start out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    /// Every weight tensor uniform in ±√(6 / (fan_in + fan_out)), biases zero.
    Xavier,
    /// Like `Xavier`, but item embeddings copy catalog image features.
    Image,
}

/// Initialize parameters for `catalog` under the "init" sub-stream of
/// `seed`. Deterministic: the same inputs give bit-identical parameters.
pub fn init_params<F: Real>(
    catalog: &Catalog,
    variant: ModelVariant,
    dim: usize,
    mode: InitMode,
    seed: u64,
) -> Result<ModelParams<F>, ModelError> {
    assert!(dim >= 1, "embedding dimension must be positive");
    if catalog.is_empty() || catalog.n_categories() == 0 {
        return Err(ModelError::EmptyCatalog);
    }
    let n_items = catalog.len();
    let n_categories = catalog.n_categories();
    let mut params = ModelParams::<F>::zeros(variant, dim, n_items, n_categories);
    params.seed = seed;
    let mut rng = seed::stream(seed, "init");

    let fill = |dst: &mut [F], fan_in: usize, fan_out: usize, rng: &mut rand_chacha::ChaCha8Rng| {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for v in dst.iter_mut() {
            *v = F::from_f64((rng.gen::<f64>() * 2.0 - 1.0) * bound);
        }
    };

    match mode {
        InitMode::Xavier => {
            fill(params.item_embedding.data_vec_mut(), n_items, dim, &mut rng);
        }
        InitMode::Image => {
            for entry in catalog.entries() {
                let features = entry.image_features.as_ref().ok_or_else(|| {
                    ModelError::MissingImageFeatures {
                        key: catalog.key(entry.item).unwrap_or("?").to_string(),
                    }
                })?;
                if features.len() != dim {
                    return Err(ModelError::ImageFeatureDim {
                        expected: dim,
                        found: features.len(),
                    });
                }
                let row = params.item_embedding.row_mut(entry.item.0 as usize);
                for (dst, &f) in row.iter_mut().zip(features) {
                    *dst = F::from_f64(f as f64);
                }
            }
        }
    }
    fill(params.category_embedding.data_vec_mut(), n_categories, dim, &mut rng);
    fill(params.event_embedding.data_vec_mut(), EventRole::COUNT, dim, &mut rng);
    fill(params.fusion_hidden.weight.data_vec_mut(), 3 * dim, dim, &mut rng);
    fill(params.fusion_output.weight.data_vec_mut(), dim, dim, &mut rng);
    fill(params.session_head.weight.data_vec_mut(), dim, dim, &mut rng);
    fill(params.base_head.weight.data_vec_mut(), dim, dim, &mut rng);
    fill(params.order_head.weight.data_vec_mut(), dim, dim, &mut rng);
    fill(params.attention.session.data_vec_mut(), dim, dim, &mut rng);
    fill(params.attention.base.data_vec_mut(), dim, dim, &mut rng);
    fill(params.attention.mean.data_vec_mut(), dim, dim, &mut rng);
    fill(&mut params.attention.score, 1, dim, &mut rng);
    Ok(params)
}

/// Encoded request context: three bounded head vectors plus the raw
/// attention-pooled session vector they were derived from.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextEncoding<F> {
    /// Session head `tanh(W_s x_s + b_s)`.
    pub session: Vec<F>,
    /// Base head `tanh(W_t x_t + b_t)`.
    pub base: Vec<F>,
    /// Order head `tanh(W_o x_o + b_o)`; all-zero for variants without it.
    pub orders: Vec<F>,
    /// Attention-pooled session vector `x_s` (zero for an empty session).
    pub pooled: Vec<F>,
}

pub(crate) enum FusePath<F> {
    /// Plain baseline: fused vector IS the item embedding.
    Bare,
    /// `m ⊙ (1 + t)` without the category bottleneck.
    Scaled,
    /// Full metadata bottleneck.
    Full {
        concat: Vec<F>,
        hidden: Vec<F>,
        output: Vec<F>,
    },
}

pub(crate) struct FuseTrace<F> {
    pub item: ItemId,
    pub category: CategoryId,
    pub role: EventRole,
    pub path: FusePath<F>,
    pub fused: Vec<F>,
}

fn check_item<F: Real>(
    item: ItemId,
    params: &ModelParams<F>,
    catalog: &Catalog,
) -> Result<CategoryId, ModelError> {
    let category = catalog
        .category_of(item)
        .map_err(|_| ModelError::UnknownItem(item))?;
    if item.0 as usize >= params.n_items() {
        return Err(ModelError::ItemOutOfRange {
            item,
            vocab: params.n_items(),
        });
    }
    if category.0 as usize >= params.n_categories() {
        return Err(ModelError::CategoryOutOfRange {
            category,
            vocab: params.n_categories(),
        });
    }
    Ok(category)
}

pub(crate) fn fuse_traced<F: Real>(
    item: ItemId,
    role: EventRole,
    params: &ModelParams<F>,
    catalog: &Catalog,
) -> Result<FuseTrace<F>, ModelError> {
    let category = check_item(item, params, catalog)?;
    let d = params.dim;
    let m = params.item_embedding.row(item.0 as usize);

    if !params.variant.uses_category_fusion() {
        if !params.variant.uses_event_embedding() {
            return Ok(FuseTrace {
                item,
                category,
                role,
                path: FusePath::Bare,
                fused: m.to_vec(),
            });
        }
        let t = params.event_embedding.row(role.index());
        let fused = (0..d).map(|k| m[k] * (F::one() + t[k])).collect();
        return Ok(FuseTrace {
            item,
            category,
            role,
            path: FusePath::Scaled,
            fused,
        });
    }

    let g = params.category_embedding.row(category.0 as usize);
    let mut concat = Vec::with_capacity(3 * d);
    concat.extend_from_slice(m);
    concat.extend((0..d).map(|k| m[k] * g[k]));
    concat.extend_from_slice(g);

    let mut hidden = params.fusion_hidden.apply(&concat);
    for v in hidden.iter_mut() {
        *v = elu(*v);
    }
    let mut output = params.fusion_output.apply(&hidden);
    for v in output.iter_mut() {
        *v = elu(*v);
    }
    let t = params.event_embedding.row(role.index());
    let fused = (0..d).map(|k| output[k] * (F::one() + t[k])).collect();
    Ok(FuseTrace {
        item,
        category,
        role,
        path: FusePath::Full {
            concat,
            hidden,
            output,
        },
        fused,
    })
}

/// Fused representation of `item` acting as `role`.
pub fn fuse_item<F: Real>(
    item: ItemId,
    role: EventRole,
    params: &ModelParams<F>,
    catalog: &Catalog,
) -> Result<Vec<F>, ModelError> {
    fuse_traced(item, role, params, catalog).map(|t| t.fused)
}

pub(crate) struct AttentionTrace<F> {
    /// `sigmoid(q_j)` per session item.
    pub gates: Vec<Vec<F>>,
    /// Scalar weight `a_j` per session item.
    pub weights: Vec<F>,
    /// Session mean `s̄`.
    pub mean: Vec<F>,
}

pub(crate) fn attention_traced<F: Real>(
    session: &[Vec<F>],
    base: &[F],
    p: &AttentionParams<F>,
) -> (Vec<F>, Option<AttentionTrace<F>>) {
    let d = base.len();
    if session.is_empty() {
        return (vec![F::zero(); d], None);
    }
    let inv_len = F::from_f64(1.0 / session.len() as f64);
    let mut mean = vec![F::zero(); d];
    for x in session {
        add_assign(&mut mean, x);
    }
    scale(&mut mean, inv_len);

    // Query and mean terms are shared by every session item.
    let mut shared = p.base.matvec(base);
    add_assign(&mut shared, &p.mean.matvec(&mean));
    add_assign(&mut shared, &p.bias);

    let mut pooled = vec![F::zero(); d];
    let mut gates = Vec::with_capacity(session.len());
    let mut weights = Vec::with_capacity(session.len());
    for x in session {
        let mut q = p.session.matvec(x);
        add_assign(&mut q, &shared);
        let gate: Vec<F> = q.into_iter().map(sigmoid).collect();
        let a = dot(&p.score, &gate);
        add_scaled(&mut pooled, x, a);
        gates.push(gate);
        weights.push(a);
    }
    (pooled, Some(AttentionTrace { gates, weights, mean }))
}

/// Pool session vectors into one, attending from the fused base item.
/// An empty session pools to the zero vector.
pub fn attention_pool<F: Real>(session: &[Vec<F>], base: &[F], p: &AttentionParams<F>) -> Vec<F> {
    attention_traced(session, base, p).0
}

pub(crate) struct ContextTrace<F> {
    pub clicks: Vec<FuseTrace<F>>,
    pub orders: Vec<FuseTrace<F>>,
    pub base: FuseTrace<F>,
    pub attention: Option<AttentionTrace<F>>,
    /// Mean of fused order vectors (zero when there are none).
    pub order_mean: Vec<F>,
}

pub(crate) fn encode_traced<F: Real>(
    example: &TrainingExample,
    params: &ModelParams<F>,
    catalog: &Catalog,
) -> Result<(ContextEncoding<F>, ContextTrace<F>), ModelError> {
    let d = params.dim;
    let base = fuse_traced(example.base, EventRole::Candidate, params, catalog)?;
    let clicks = example
        .clicks
        .iter()
        .map(|&c| fuse_traced(c, EventRole::Click, params, catalog))
        .collect::<Result<Vec<_>, _>>()?;
    let orders = example
        .orders
        .iter()
        .map(|&o| fuse_traced(o, EventRole::Order, params, catalog))
        .collect::<Result<Vec<_>, _>>()?;

    let click_vecs: Vec<Vec<F>> = clicks.iter().map(|t| t.fused.clone()).collect();
    let (pooled, attention) = attention_traced(&click_vecs, &base.fused, &params.attention);

    let mut order_mean = vec![F::zero(); d];
    if !orders.is_empty() {
        let inv = F::from_f64(1.0 / orders.len() as f64);
        for t in &orders {
            add_assign(&mut order_mean, &t.fused);
        }
        scale(&mut order_mean, inv);
    }

    let tanh_vec = |mut v: Vec<F>| {
        for x in v.iter_mut() {
            *x = x.tanh();
        }
        v
    };
    let session = tanh_vec(params.session_head.apply(&pooled));
    let base_head = tanh_vec(params.base_head.apply(&base.fused));
    let order_head = if params.variant.uses_order_head() {
        tanh_vec(params.order_head.apply(&order_mean))
    } else {
        vec![F::zero(); d]
    };

    let encoding = ContextEncoding {
        session,
        base: base_head,
        orders: order_head,
        pooled: pooled.clone(),
    };
    let trace = ContextTrace {
        clicks,
        orders,
        base,
        attention,
        order_mean,
    };
    Ok((encoding, trace))
}

/// Encode a request context (clicks, orders, base) into head vectors.
pub fn encode_context<F: Real>(
    example: &TrainingExample,
    params: &ModelParams<F>,
    catalog: &Catalog,
) -> Result<ContextEncoding<F>, ModelError> {
    encode_traced(example, params, catalog).map(|(enc, _)| enc)
}

/// Trilinear score `Σ_k session_k · base_k · candidate_k`.
pub fn score_trilinear<F: Real>(session: &[F], base: &[F], candidate: &[F]) -> F {
    debug_assert_eq!(session.len(), base.len());
    debug_assert_eq!(session.len(), candidate.len());
    let mut acc = F::zero();
    for k in 0..session.len() {
        acc = acc + session[k] * base[k] * candidate[k];
    }
    acc
}

/// Additive score `(orders + session + base) · candidate`.
pub fn score_sum<F: Real>(orders: &[F], session: &[F], base: &[F], candidate: &[F]) -> F {
    debug_assert_eq!(orders.len(), session.len());
    debug_assert_eq!(orders.len(), base.len());
    debug_assert_eq!(orders.len(), candidate.len());
    let mut acc = F::zero();
    for k in 0..orders.len() {
        acc = acc + (orders[k] + session[k] + base[k]) * candidate[k];
    }
    acc
}

/// Collapse the context into the single vector whose dot product with a
/// fused candidate reproduces the variant's score exactly.
pub(crate) fn combined_scoring_vector<F: Real>(
    ctx: &ContextEncoding<F>,
    variant: ModelVariant,
) -> Vec<F> {
    if variant.uses_order_head() {
        (0..ctx.session.len())
            .map(|k| ctx.orders[k] + ctx.session[k] + ctx.base[k])
            .collect()
    } else {
        (0..ctx.session.len())
            .map(|k| ctx.session[k] * ctx.base[k])
            .collect()
    }
}

/// Keep the `k` highest-scoring entries, ordered by descending score with
/// ties broken by ascending item id.
pub fn top_k_by_score<F: Real>(
    scored: impl IntoIterator<Item = (ItemId, F)>,
    k: usize,
) -> Vec<(ItemId, F)> {
    struct Entry<F>(ItemId, F);
    impl<F: Real> PartialEq for Entry<F> {
        fn eq(&self, other: &Self) -> bool {
            self.cmp(other) == std::cmp::Ordering::Equal
        }
    }
    impl<F: Real> Eq for Entry<F> {}
    impl<F: Real> PartialOrd for Entry<F> {
        fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
            Some(self.cmp(other))
        }
    }
    impl<F: Real> Ord for Entry<F> {
        // The heap max is the *worst* entry: lowest score, then highest id.
        fn cmp(&self, other: &Self) -> std::cmp::Ordering {
            other
                .1
                .total_order(&self.1)
                .then_with(|| self.0.cmp(&other.0))
        }
    }

    if k == 0 {
        return Vec::new();
    }
    let mut heap: BinaryHeap<Entry<F>> = BinaryHeap::with_capacity(k + 1);
    for (item, score) in scored {
        let entry = Entry(item, score);
        if heap.len() < k {
            heap.push(entry);
        } else if entry < *heap.peek().unwrap() {
            heap.pop();
            heap.push(entry);
        }
    }
    let mut out: Vec<(ItemId, F)> = heap.into_iter().map(|Entry(i, s)| (i, s)).collect();
    out.sort_unstable_by(|a, b| b.1.total_order(&a.1).then_with(|| a.0.cmp(&b.0)));
    out
}

/// Minimum candidate count before ranking fans out across threads.
const PARALLEL_RANK_THRESHOLD: usize = 4096;

/// Score every candidate against the context and keep the top `k`.
///
/// With `post_filter` set, candidates that are not complementary to
/// `base` are dropped before ranking. Scores depend only on (context,
/// candidate), so the result is independent of candidate order up to the
/// deterministic (score desc, id asc) ranking.
pub fn rank_candidates<F: Real>(
    ctx: &ContextEncoding<F>,
    candidates: &[ItemId],
    k: usize,
    params: &ModelParams<F>,
    catalog: &Catalog,
    post_filter: bool,
    base: ItemId,
) -> Result<Vec<(ItemId, F)>, ModelError> {
    assert!(k >= 1, "rank_candidates needs k >= 1");
    if post_filter {
        check_item(base, params, catalog)?;
    }
    for &c in candidates {
        check_item(c, params, catalog)?;
    }

    let combined = combined_scoring_vector(ctx, params.variant);
    let score_one = |&c: &ItemId| -> Option<(ItemId, F)> {
        if post_filter && !catalog.complementary_unchecked(base, c) {
            return None;
        }
        let fused = fuse_traced(c, EventRole::Candidate, params, catalog)
            .expect("candidate validated above")
            .fused;
        Some((c, dot(&combined, &fused)))
    };

    let scored: Vec<(ItemId, F)> = if candidates.len() >= PARALLEL_RANK_THRESHOLD {
        candidates.par_iter().filter_map(score_one).collect()
    } else {
        candidates.iter().filter_map(score_one).collect()
    };
    Ok(top_k_by_score(scored, k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{CategoryHierarchy, NegativePairList};

    fn test_catalog(n_items: usize, n_categories: usize) -> Catalog {
        let hierarchy = CategoryHierarchy::from_rows(
            (0..n_categories).map(|i| (format!("cat{i}"), None)).collect(),
        )
        .unwrap();
        Catalog::from_parts(
            (0..n_items).map(|i| format!("item{i}")).collect(),
            (0..n_items)
                .map(|i| CategoryId((i % n_categories) as u32))
                .collect(),
            vec![],
            hierarchy,
            NegativePairList::default(),
        )
        .unwrap()
    }

    fn example(base: u32, clicks: &[u32], orders: &[u32]) -> TrainingExample {
        TrainingExample {
            user: 1,
            base: ItemId(base),
            target: ItemId(0),
            base_time: 0,
            clicks: clicks.iter().map(|&c| ItemId(c)).collect(),
            orders: orders.iter().map(|&o| ItemId(o)).collect(),
            ordered_within_day: false,
        }
    }

    #[test]
    fn zero_parameters_fuse_to_zero() {
        let catalog = test_catalog(4, 2);
        for variant in ModelVariant::ALL {
            let params = ModelParams::<f64>::zeros(variant, 3, 4, 2);
            let fused = fuse_item(ItemId(1), EventRole::Click, &params, &catalog).unwrap();
            assert_eq!(fused, vec![0.0; 3], "variant {variant}");
        }
    }

    #[test]
    fn fusion_bottleneck_matches_hand_computation() {
        // d=1: m=1, g=2 → concat (1, 2, 2); unit weights sum to 5; both elu
        // layers pass 5 through; zero event row leaves it unscaled.
        let catalog = test_catalog(2, 2);
        let mut params = ModelParams::<f64>::zeros(ModelVariant::Zsfc, 1, 2, 2);
        params.item_embedding.row_mut(0)[0] = 1.0;
        params.category_embedding.row_mut(0)[0] = 2.0;
        params.fusion_hidden.weight.data_mut().copy_from_slice(&[1.0, 1.0, 1.0]);
        params.fusion_output.weight.data_mut().copy_from_slice(&[1.0]);
        let fused = fuse_item(ItemId(0), EventRole::Click, &params, &catalog).unwrap();
        assert_eq!(fused, vec![5.0]);
    }

    #[test]
    fn event_row_of_minus_one_zeroes_any_item() {
        let catalog = test_catalog(2, 2);
        for variant in [ModelVariant::Zsfc, ModelVariant::StampPlusOrders] {
            let mut params = init_params::<f64>(&catalog, variant, 4, InitMode::Xavier, 7).unwrap();
            for v in params.event_embedding.row_mut(EventRole::Order.index()) {
                *v = -1.0;
            }
            let fused = fuse_item(ItemId(1), EventRole::Order, &params, &catalog).unwrap();
            assert_eq!(fused, vec![0.0; 4], "variant {variant}");
        }
    }

    #[test]
    fn plain_baseline_fuses_to_the_raw_embedding() {
        let catalog = test_catalog(3, 2);
        let params = init_params::<f32>(&catalog, ModelVariant::Stamp, 8, InitMode::Xavier, 3).unwrap();
        for role in [EventRole::Click, EventRole::Order, EventRole::Candidate] {
            let fused = fuse_item(ItemId(2), role, &params, &catalog).unwrap();
            assert_eq!(fused.as_slice(), params.item_embedding.row(2));
        }
    }

    #[test]
    fn fuse_rejects_out_of_catalog_items() {
        let catalog = test_catalog(3, 2);
        let params = ModelParams::<f32>::zeros(ModelVariant::Zsfc, 2, 3, 2);
        assert!(matches!(
            fuse_item(ItemId(3), EventRole::Click, &params, &catalog),
            Err(ModelError::UnknownItem(ItemId(3)))
        ));
    }

    #[test]
    fn attention_matches_scalar_hand_computation() {
        // d=1, all matrices zero, score weight 1: every gate is sigmoid(0) =
        // 0.5, so one session item x=2 pools to 0.5 * 2 = 1.
        let mut p = AttentionParams::<f64>::zeros(1);
        p.score[0] = 1.0;
        let pooled = attention_pool(&[vec![2.0]], &[0.0], &p);
        assert_eq!(pooled, vec![1.0]);
    }

    #[test]
    fn attention_on_empty_session_is_zero() {
        let p = AttentionParams::<f64>::zeros(3);
        assert_eq!(attention_pool(&[], &[1.0, 2.0, 3.0], &p), vec![0.0; 3]);
    }

    #[test]
    fn attention_is_permutation_invariant() {
        let catalog = test_catalog(6, 3);
        let params = init_params::<f64>(&catalog, ModelVariant::Zsfc, 5, InitMode::Xavier, 11).unwrap();
        let vecs: Vec<Vec<f64>> = (0..4)
            .map(|i| fuse_item(ItemId(i), EventRole::Click, &params, &catalog).unwrap())
            .collect();
        let base = fuse_item(ItemId(5), EventRole::Candidate, &params, &catalog).unwrap();
        let forward = attention_pool(&vecs, &base, &params.attention);
        let mut reversed_input = vecs.clone();
        reversed_input.reverse();
        let reversed = attention_pool(&reversed_input, &base, &params.attention);
        for (a, b) in forward.iter().zip(&reversed) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn empty_context_keeps_heads_finite() {
        let catalog = test_catalog(4, 2);
        let mut params = ModelParams::<f64>::zeros(ModelVariant::Zsfc, 2, 4, 2);
        params.session_head.bias = vec![0.5, -0.5];
        params.order_head.bias = vec![0.25, 0.25];
        let (enc, _) = encode_traced(&example(0, &[], &[]), &params, &catalog).unwrap();
        assert_eq!(enc.pooled, vec![0.0, 0.0]);
        assert_eq!(enc.session, vec![0.5f64.tanh(), (-0.5f64).tanh()]);
        assert_eq!(enc.orders, vec![0.25f64.tanh(), 0.25f64.tanh()]);
    }

    #[test]
    fn order_head_is_pinned_to_zero_without_order_scoring() {
        let catalog = test_catalog(4, 2);
        let mut params = ModelParams::<f64>::zeros(ModelVariant::StampPlusCategory, 2, 4, 2);
        params.order_head.bias = vec![1.0, 1.0];
        let enc = encode_context(&example(0, &[1], &[2]), &params, &catalog).unwrap();
        assert_eq!(enc.orders, vec![0.0, 0.0]);
    }

    #[test]
    fn head_components_stay_inside_the_unit_interval() {
        let catalog = test_catalog(10, 4);
        let params = init_params::<f32>(&catalog, ModelVariant::Zsfc, 6, InitMode::Xavier, 5).unwrap();
        let enc = encode_context(&example(0, &[1, 2, 3], &[4, 5]), &params, &catalog).unwrap();
        for v in enc.session.iter().chain(&enc.base).chain(&enc.orders) {
            assert!(v.abs() < 1.0, "head component {v} out of range");
        }
    }

    #[test]
    fn trilinear_score_matches_hand_value() {
        assert_eq!(score_trilinear(&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]), 63.0);
        assert_eq!(score_trilinear::<f64>(&[], &[], &[]), 0.0);
    }

    #[test]
    fn additive_score_matches_hand_value() {
        assert_eq!(
            score_sum(&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0], &[2.0, 3.0]),
            10.0
        );
    }

    #[test]
    fn top_k_orders_by_score_then_id() {
        let scored = vec![
            (ItemId(9), 1.0f32),
            (ItemId(2), 3.0),
            (ItemId(7), 3.0),
            (ItemId(1), 2.0),
            (ItemId(4), 3.0),
        ];
        let top = top_k_by_score(scored, 4);
        let ids: Vec<u32> = top.iter().map(|(i, _)| i.0).collect();
        assert_eq!(ids, vec![2, 4, 7, 1]);
    }

    #[test]
    fn top_k_matches_full_sort_on_random_input() {
        use rand::Rng;
        let mut rng = crate::seed::stream(99, "topk-test");
        for _ in 0..50 {
            let n = rng.gen_range(0..40);
            let scored: Vec<(ItemId, f32)> = (0..n)
                .map(|_| (ItemId(rng.gen_range(0..15)), rng.gen_range(-2..3) as f32))
                .collect();
            let k = rng.gen_range(1..10);
            let mut full = scored.clone();
            full.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            full.truncate(k);
            assert_eq!(top_k_by_score(scored, k), full);
        }
    }

    #[test]
    fn equal_scores_rank_by_ascending_id() {
        let catalog = test_catalog(6, 3);
        let params = ModelParams::<f32>::zeros(ModelVariant::Zsfc, 4, 6, 3);
        let enc = encode_context(&example(0, &[], &[]), &params, &catalog).unwrap();
        let candidates: Vec<ItemId> = [5u32, 3, 1, 4, 2].iter().map(|&i| ItemId(i)).collect();
        let ranked =
            rank_candidates(&enc, &candidates, 3, &params, &catalog, false, ItemId(0)).unwrap();
        let ids: Vec<u32> = ranked.iter().map(|(i, _)| i.0).collect();
        assert_eq!(ids, vec![1, 2, 3]);
    }

    #[test]
    fn post_filter_drops_non_complementary_candidates() {
        let catalog = test_catalog(6, 3); // item i has category i % 3
        let params = init_params::<f32>(&catalog, ModelVariant::Zsfc, 4, InitMode::Xavier, 1).unwrap();
        let enc = encode_context(&example(0, &[1], &[]), &params, &catalog).unwrap();
        let candidates: Vec<ItemId> = (0..6).map(ItemId).collect();
        let ranked =
            rank_candidates(&enc, &candidates, 6, &params, &catalog, true, ItemId(0)).unwrap();
        let ids: Vec<u32> = ranked.iter().map(|(i, _)| i.0).collect();
        // Items 0 and 3 share the base's category and must be gone.
        assert!(!ids.contains(&0) && !ids.contains(&3));
        assert_eq!(ranked.len(), 4);
    }

    #[test]
    fn ranking_is_invariant_to_candidate_order() {
        let catalog = test_catalog(8, 3);
        let params = init_params::<f32>(&catalog, ModelVariant::Zsfc, 4, InitMode::Xavier, 2).unwrap();
        let enc = encode_context(&example(0, &[1, 2], &[3]), &params, &catalog).unwrap();
        let forward: Vec<ItemId> = (0..8).map(ItemId).collect();
        let mut backward = forward.clone();
        backward.reverse();
        let a = rank_candidates(&enc, &forward, 5, &params, &catalog, false, ItemId(0)).unwrap();
        let b = rank_candidates(&enc, &backward, 5, &params, &catalog, false, ItemId(0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn xavier_bounds_hold_for_square_matrices() {
        let catalog = test_catalog(4, 2);
        let params = init_params::<f32>(&catalog, ModelVariant::Zsfc, 128, InitMode::Xavier, 42).unwrap();
        let bound = (6.0f64 / 256.0).sqrt() as f32;
        assert!(params
            .session_head
            .weight
            .data()
            .iter()
            .all(|w| w.abs() <= bound));
        assert!(params.session_head.weight.data().iter().any(|w| *w != 0.0));
        assert!(params.session_head.bias.iter().all(|b| *b == 0.0));
        assert!(params.attention.bias.iter().all(|b| *b == 0.0));
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let catalog = test_catalog(6, 3);
        let a = init_params::<f32>(&catalog, ModelVariant::Zsfc, 8, InitMode::Xavier, 7).unwrap();
        let b = init_params::<f32>(&catalog, ModelVariant::Zsfc, 8, InitMode::Xavier, 7).unwrap();
        assert_eq!(a, b);
        let c = init_params::<f32>(&catalog, ModelVariant::Zsfc, 8, InitMode::Xavier, 8).unwrap();
        assert_ne!(a.item_embedding.data(), c.item_embedding.data());
    }

    #[test]
    fn image_init_copies_catalog_features() {
        let hierarchy = CategoryHierarchy::from_rows(vec![("c".into(), None)]).unwrap();
        let features: Vec<Option<Vec<f32>>> =
            vec![Some(vec![0.1, 0.2]), Some(vec![-0.3, 0.4])];
        let catalog = Catalog::from_parts(
            vec!["a".into(), "b".into()],
            vec![CategoryId(0), CategoryId(0)],
            features.clone(),
            hierarchy,
            NegativePairList::default(),
        )
        .unwrap();
        let params = init_params::<f32>(&catalog, ModelVariant::Zsfc, 2, InitMode::Image, 7).unwrap();
        assert_eq!(params.item_embedding.row(0), features[0].as_deref().unwrap());
        assert_eq!(params.item_embedding.row(1), features[1].as_deref().unwrap());
    }

    #[test]
    fn image_init_requires_features_everywhere() {
        let hierarchy = CategoryHierarchy::from_rows(vec![("c".into(), None)]).unwrap();
        let catalog = Catalog::from_parts(
            vec!["a".into(), "b".into()],
            vec![CategoryId(0), CategoryId(0)],
            vec![Some(vec![0.1, 0.2]), None],
            hierarchy,
            NegativePairList::default(),
        )
        .unwrap();
        assert!(matches!(
            init_params::<f32>(&catalog, ModelVariant::Zsfc, 2, InitMode::Image, 7),
            Err(ModelError::MissingImageFeatures { .. })
        ));
    }

    #[test]
    fn variant_names_round_trip() {
        for variant in ModelVariant::ALL {
            assert_eq!(variant.name().parse::<ModelVariant>().unwrap(), variant);
        }
        assert!("spam".parse::<ModelVariant>().is_err());
    }
}
