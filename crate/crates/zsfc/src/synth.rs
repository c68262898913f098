//! Synthetic world generator: a catalog with planted complementary
//! relationships, style-clustered image features, and user interaction
//! logs whose purchase behavior follows those plants to a configurable
//! degree. A model that learns anything real must beat chance on the
//! plants; `affinity = 0` severs the signal entirely.
//!
//! Everything is driven by labeled sub-streams of one seed, so a config
//! reproduces its world and logs bit for bit.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::catalog::{Catalog, CategoryId, ItemId, NegativePairList};
use crate::sampler::{EventKind, InteractionEvent, UserHistory};
use crate::seed;

/// 2023-08-01 00:00:00 UTC; divisible by 86 400 so day boundaries in the
/// generated log line up with calendar days.
pub const WORLD_START: i64 = 1_690_848_000;

const SECS_PER_DAY: i64 = 86_400;
const MIN_COMPLEMENTS: usize = 5;
const MAX_COMPLEMENTS: usize = 12;
/// Probability that a click is followed by a purchase.
const BUY_PROB: f64 = 0.18;
/// Probability that a planted purchase sticks to the user's own style
/// when any same-style complement exists.
const STYLE_MATCH_PROB: f64 = 0.85;
/// Purchased items are also clicked shortly after the base click…
const TARGET_CLICK_DELAY: std::ops::Range<i64> = 60..1_800;
/// …and ordered within a few hours.
const TARGET_ORDER_DELAY: std::ops::Range<i64> = 1_800..21_600;

pub const CATALOG_FILE: &str = "catalog.tsv";
pub const HIERARCHY_FILE: &str = "hierarchy.tsv";
pub const NEGATIVE_PAIRS_FILE: &str = "negative_pairs.tsv";
pub const INTERACTIONS_FILE: &str = "interactions.tsv";

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("i/o error at {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("inconsistent world configuration: {0}")]
    InconsistentConfig(String),
}

#[derive(Debug, Clone)]
pub struct WorldConfig {
    pub n_items: usize,
    pub n_categories: usize,
    pub n_users: usize,
    /// Base clicks per user; purchases add further events on top.
    pub events_per_user: usize,
    /// Length of the generated log in days.
    pub days: u32,
    /// Probability that a purchase follows a planted complement of the
    /// clicked item instead of a uniformly random item. 0 removes the
    /// learnable signal, 1 makes every purchase a plant.
    pub affinity: f64,
    /// Image feature dimension (equals the style-center dimension).
    pub feature_dim: usize,
    /// Number of category pairs to exclude from the complementary
    /// relation.
    pub negative_pairs: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            n_items: 500,
            n_categories: 40,
            n_users: 2_000,
            events_per_user: 20,
            days: 9,
            affinity: 0.8,
            feature_dim: 32,
            negative_pairs: 20,
            seed: 0,
        }
    }
}

/// A generated catalog plus the ground truth behind it.
#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub catalog: Catalog,
    /// Planted complements per item: what this item's buyers tend to buy
    /// next. Always 5–12 items, each complementary to the owner.
    pub complements: Vec<Vec<ItemId>>,
    /// Style cluster per item; image features gather around per-style
    /// centers.
    pub styles: Vec<u32>,
    pub n_styles: usize,
}

fn validate(config: &WorldConfig) -> Result<(), SynthError> {
    let fail = |reason: String| Err(SynthError::InconsistentConfig(reason));
    if config.n_items < 2 {
        return fail("need at least two items".into());
    }
    if config.n_categories < 2 {
        return fail("need at least two categories".into());
    }
    if config.n_categories > config.n_items {
        return fail(format!(
            "{} categories cannot all be populated by {} items",
            config.n_categories, config.n_items
        ));
    }
    if config.n_users == 0 || config.events_per_user == 0 {
        return fail("need at least one user and one event per user".into());
    }
    if config.days == 0 {
        return fail("need at least one day of history".into());
    }
    if config.feature_dim == 0 {
        return fail("image features need at least one dimension".into());
    }
    if !(0.0..=1.0).contains(&config.affinity) {
        return fail(format!("affinity {} outside [0, 1]", config.affinity));
    }
    let max_pairs = config.n_categories * (config.n_categories - 1) / 2;
    if config.negative_pairs > max_pairs {
        return fail(format!(
            "{} negative pairs requested, only {max_pairs} distinct pairs exist",
            config.negative_pairs
        ));
    }
    Ok(())
}

/// Balanced assignment: round-robin over `n_groups`, then shuffled.
/// Every group ends up within one member of every other.
fn balanced_assignment(n: usize, n_groups: usize, rng: &mut impl Rng) -> Vec<u32> {
    let mut assignment: Vec<u32> = (0..n).map(|i| (i % n_groups) as u32).collect();
    assignment.shuffle(rng);
    assignment
}

/// Build the catalog, plant complements, and attach style-clustered
/// image features.
pub fn generate_world(config: &WorldConfig) -> Result<SyntheticWorld, SynthError> {
    validate(config)?;
    let n = config.n_items;
    let n_styles = (n / 64).max(2);

    let categories = balanced_assignment(
        n,
        config.n_categories,
        &mut seed::stream(config.seed, "categories"),
    );
    let styles = balanced_assignment(n, n_styles, &mut seed::stream(config.seed, "styles"));

    // Negative-list random category pairs.
    let mut negative_pairs = NegativePairList::default();
    let mut rng = seed::stream(config.seed, "negative-pairs");
    while negative_pairs.len() < config.negative_pairs {
        let a = CategoryId(rng.gen_range(0..config.n_categories as u32));
        let b = CategoryId(rng.gen_range(0..config.n_categories as u32));
        if a != b {
            negative_pairs.insert(a, b);
        }
    }

    // Image features: per-style centers plus a little per-item noise.
    let mut rng = seed::stream(config.seed, "style-centers");
    let centers: Vec<Vec<f32>> = (0..n_styles)
        .map(|_| {
            (0..config.feature_dim)
                .map(|_| rng.gen_range(-0.5..0.5))
                .collect()
        })
        .collect();
    let mut rng = seed::stream(config.seed, "image-noise");
    let features: Vec<Option<Vec<f32>>> = (0..n)
        .map(|i| {
            Some(
                centers[styles[i] as usize]
                    .iter()
                    .map(|&c| c + rng.gen_range(-0.05..0.05))
                    .collect(),
            )
        })
        .collect();

    // Plant complements: a per-item pool of "goes well with" items drawn
    // from the complementary universe.
    let mut rng = seed::stream(config.seed, "complements");
    let mut complements = Vec::with_capacity(n);
    for i in 0..n {
        let ci = CategoryId(categories[i]);
        let pool: Vec<ItemId> = (0..n)
            .filter(|&j| {
                let cj = CategoryId(categories[j]);
                cj != ci && !negative_pairs.contains(ci, cj)
            })
            .map(|j| ItemId(j as u32))
            .collect();
        if pool.len() < MIN_COMPLEMENTS {
            return Err(SynthError::InconsistentConfig(format!(
                "item {i} has only {} complementary items to plant from; \
                 add items or categories, or drop negative pairs",
                pool.len()
            )));
        }
        let count = rng
            .gen_range(MIN_COMPLEMENTS..=MAX_COMPLEMENTS)
            .min(pool.len());
        let mut chosen: Vec<ItemId> = pool.choose_multiple(&mut rng, count).copied().collect();
        chosen.sort_unstable();
        complements.push(chosen);
    }

    let hierarchy = crate::catalog::CategoryHierarchy::from_rows(
        (0..config.n_categories)
            .map(|c| (format!("cat{c:03}"), None))
            .collect(),
    )
    .expect("generated category keys are unique and acyclic");
    let catalog = Catalog::from_parts(
        (0..n).map(|i| format!("item{i:06}")).collect(),
        categories.iter().map(|&c| CategoryId(c)).collect(),
        features,
        hierarchy,
        negative_pairs,
    )
    .expect("generated item keys are unique and features agree on length");

    Ok(SyntheticWorld {
        catalog,
        complements,
        styles,
        n_styles,
    })
}

/// Simulate user logs over the world. Each user gets a preferred style,
/// clicks around (half inside that style), and sometimes buys: with
/// probability `affinity` a planted complement of the clicked item
/// (preferring their style), otherwise a random item. Purchases show up
/// as a click shortly after the base click and an order a few hours
/// later.
pub fn generate_histories(world: &SyntheticWorld, config: &WorldConfig) -> Vec<UserHistory> {
    let n_items = world.catalog.len();
    // Base clicks stop early enough that even the slowest injected order
    // lands before the final midnight. The log's last calendar day then
    // contains ordinary traffic, not just spillover — which matters for
    // anything that splits the corpus by its final day.
    let click_span = config.days as i64 * SECS_PER_DAY - TARGET_ORDER_DELAY.end;
    let mut style_members: Vec<Vec<ItemId>> = vec![Vec::new(); world.n_styles];
    for (i, &s) in world.styles.iter().enumerate() {
        style_members[s as usize].push(ItemId(i as u32));
    }

    (0..config.n_users as u64)
        .map(|user| {
            let mut rng = seed::indexed_stream(config.seed, "user-history", user);
            let style = rng.gen_range(0..world.n_styles);
            let own_items = &style_members[style];

            let mut clicks: Vec<(i64, ItemId)> = (0..config.events_per_user)
                .map(|_| {
                    let ts = WORLD_START + rng.gen_range(0..click_span);
                    let item = if rng.gen_bool(0.5) && !own_items.is_empty() {
                        own_items[rng.gen_range(0..own_items.len())]
                    } else {
                        ItemId(rng.gen_range(0..n_items as u32))
                    };
                    (ts, item)
                })
                .collect();
            clicks.sort_by_key(|&(ts, _)| ts);

            let mut events = Vec::with_capacity(clicks.len() * 2);
            for &(ts, base) in &clicks {
                events.push(InteractionEvent {
                    item: base,
                    kind: EventKind::Click,
                    timestamp: ts,
                });
                if !rng.gen_bool(BUY_PROB) {
                    continue;
                }
                let planted = &world.complements[base.0 as usize];
                let target = if rng.gen_bool(config.affinity) {
                    let own: Vec<ItemId> = planted
                        .iter()
                        .copied()
                        .filter(|c| world.styles[c.0 as usize] as usize == style)
                        .collect();
                    if !own.is_empty() && rng.gen_bool(STYLE_MATCH_PROB) {
                        own[rng.gen_range(0..own.len())]
                    } else {
                        planted[rng.gen_range(0..planted.len())]
                    }
                } else {
                    loop {
                        let c = ItemId(rng.gen_range(0..n_items as u32));
                        if c != base {
                            break c;
                        }
                    }
                };
                events.push(InteractionEvent {
                    item: target,
                    kind: EventKind::Click,
                    timestamp: ts + rng.gen_range(TARGET_CLICK_DELAY),
                });
                events.push(InteractionEvent {
                    item: target,
                    kind: EventKind::Order,
                    timestamp: ts + rng.gen_range(TARGET_ORDER_DELAY),
                });
            }
            events.sort_by_key(|e| e.timestamp);
            UserHistory { user, events }
        })
        .collect()
}

/// Write the world and its logs into `dir` as the four files the loaders
/// expect: `catalog.tsv`, `hierarchy.tsv`, `negative_pairs.tsv`, and
/// `interactions.tsv`.
pub fn write_world(
    world: &SyntheticWorld,
    histories: &[UserHistory],
    dir: &Path,
) -> Result<(), SynthError> {
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| SynthError::Io {
            path: path.clone(),
            source,
        }
    };

    let path = dir.join(CATALOG_FILE);
    let mut out = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
    for entry in world.catalog.entries() {
        let key = world.catalog.key(entry.item).expect("entry ids are valid");
        let cat = world
            .catalog
            .hierarchy
            .key(entry.category)
            .expect("entry categories are valid");
        let features = entry
            .image_features
            .as_ref()
            .expect("generated items always carry features")
            .iter()
            .map(|f| f.to_string())
            .collect::<Vec<_>>()
            .join(",");
        writeln!(out, "{key}\t{cat}\t{features}").map_err(io_err(&path))?;
    }
    out.flush().map_err(io_err(&path))?;

    let path = dir.join(HIERARCHY_FILE);
    let mut out = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
    for c in 0..world.catalog.n_categories() as u32 {
        let key = world
            .catalog
            .hierarchy
            .key(CategoryId(c))
            .expect("category ids are dense");
        writeln!(out, "{key}\tROOT").map_err(io_err(&path))?;
    }
    out.flush().map_err(io_err(&path))?;

    let path = dir.join(NEGATIVE_PAIRS_FILE);
    let mut out = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
    let n_cats = world.catalog.n_categories() as u32;
    for a in 0..n_cats {
        for b in (a + 1)..n_cats {
            if world
                .catalog
                .negative_pairs
                .contains(CategoryId(a), CategoryId(b))
            {
                let ka = world.catalog.hierarchy.key(CategoryId(a)).unwrap();
                let kb = world.catalog.hierarchy.key(CategoryId(b)).unwrap();
                writeln!(out, "{ka}\t{kb}").map_err(io_err(&path))?;
            }
        }
    }
    out.flush().map_err(io_err(&path))?;

    let path = dir.join(INTERACTIONS_FILE);
    let mut out = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
    for history in histories {
        for event in &history.events {
            let key = world.catalog.key(event.item).expect("event ids are valid");
            let kind = match event.kind {
                EventKind::Click => "click",
                EventKind::Order => "order",
            };
            writeln!(out, "{}\t{}\t{kind}\t{key}", history.user, event.timestamp)
                .map_err(io_err(&path))?;
        }
    }
    out.flush().map_err(io_err(&path))
}
