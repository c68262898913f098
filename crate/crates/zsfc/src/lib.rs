//! Complementary-item recommendation for large retail catalogs.
//!
//! The pipeline runs in four stages, one module each:
//!
//! * [`catalog`] — item/category metadata, the complementary predicate
//! * [`sampler`] — mining (context, base, target) examples from raw
//!   interaction logs, plus the co-occurrence statistics that gate them
//! * [`model`] — session encoding and candidate scoring (STAMP-style
//!   trilinear scoring and the additive variant with an order head)
//! * [`training`] — sampled-softmax loss, hand-rolled backprop, Adam
//! * [`eval`] — Recall@k / ordered-subset recall, a cosine co-occurrence
//!   baseline, the ablation harness and a ranking latency benchmark
//! * [`synth`] — deterministic synthetic worlds with planted complement
//!   structure, used for end-to-end validation
//!
//! Everything downstream of a seed is deterministic: random state is
//! derived from a single `u64` through named sub-streams (see [`seed`]).

pub mod catalog;
pub mod eval;
pub mod model;
pub mod sampler;
pub mod seed;
pub mod synth;
pub mod training;

pub use catalog::{load_catalog, Catalog, CategoryId, ItemId};
pub use model::{ModelParams, ModelVariant};
