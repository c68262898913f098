//! Mining training examples from raw interaction logs.
//!
//! A click on item `b` at time `t` becomes a *base*; any action inside the
//! following hour proposes candidate targets. A candidate survives when it
//! is complementary to `b`, the same user buys it within 24 hours of `t`,
//! and it sits among the items most often co-occurring with `b` across all
//! user histories. Each surviving (base, target) pair is emitted together
//! with the user's recent click and order context.
//!
//! Interaction logs are UTF-8 TSV (`#`-prefixed lines ignored):
//! `user_id <TAB> unix_seconds <TAB> click|order <TAB> item_key`.
//! Datasets are serialized as JSON Lines, one example per line.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Catalog, ItemId};

const SECS_PER_DAY: i64 = 86_400;

/// What a log row records the user doing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EventKind {
    Click,
    Order,
}

/// One log row, resolved to a dense item id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InteractionEvent {
    pub item: ItemId,
    pub kind: EventKind,
    /// Seconds since the Unix epoch; never negative.
    pub timestamp: i64,
}

/// All events of one user, ordered by timestamp (ties keep input order).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserHistory {
    pub user: u64,
    pub events: Vec<InteractionEvent>,
}

/// A base click together with the actions that followed it inside the
/// candidate lookahead window `(base.timestamp, base.timestamp + lookahead]`.
#[derive(Debug, Clone)]
pub struct CandidateWindow {
    pub base: InteractionEvent,
    pub candidates: Vec<InteractionEvent>,
}

/// Collect the candidate window for the click at `click_index`.
pub fn candidate_window(
    events: &[InteractionEvent],
    click_index: usize,
    lookahead_secs: i64,
) -> CandidateWindow {
    let base = events[click_index];
    let horizon = base.timestamp + lookahead_secs;
    let candidates = events[click_index + 1..]
        .iter()
        .take_while(|e| e.timestamp <= horizon)
        .filter(|e| e.timestamp > base.timestamp)
        .copied()
        .collect();
    CandidateWindow { base, candidates }
}

/// Extraction windows and caps. Defaults match production serving: up to
/// 15 clicks from the last 9 days and 5 orders from the last 90 days of
/// context, a 1 hour candidate lookahead, a 24 hour purchase horizon, and
/// a top-200 co-occurrence gate.
#[derive(Debug, Clone)]
pub struct SamplerConfig {
    pub max_clicks: usize,
    pub max_orders: usize,
    pub click_window_secs: i64,
    pub order_window_secs: i64,
    pub lookahead_secs: i64,
    pub purchase_horizon_secs: i64,
    pub top_n: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            max_clicks: 15,
            max_orders: 5,
            click_window_secs: 9 * SECS_PER_DAY,
            order_window_secs: 90 * SECS_PER_DAY,
            lookahead_secs: 3_600,
            purchase_horizon_secs: SECS_PER_DAY,
            top_n: 200,
        }
    }
}

/// One supervised example: the user's context when they clicked `base`,
/// and a complementary item they went on to buy.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TrainingExample {
    pub user: u64,
    pub base: ItemId,
    pub target: ItemId,
    pub base_time: i64,
    /// Most recent in-window clicks before the base click, oldest first.
    pub clicks: Vec<ItemId>,
    /// Most recent in-window orders before the base click, oldest first.
    pub orders: Vec<ItemId>,
    /// True when the user ordered the target on the same UTC calendar day
    /// as the base click.
    pub ordered_within_day: bool,
}

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("i/o error at {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Malformed {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("{path}:{line}: unknown item key `{key}`")]
    UnknownItemKey {
        path: PathBuf,
        line: usize,
        key: String,
    },
}

/// How often pairs of items appear in the same user's history.
///
/// Counting is binary per user: a user contributes at most 1 to any pair,
/// no matter how often they touched either item. The relation is symmetric
/// and the diagonal is zero.
#[derive(Debug, Clone, Default)]
pub struct CooccurrenceMatrix {
    rows: Vec<Vec<(ItemId, u32)>>,
}

impl CooccurrenceMatrix {
    pub fn n_items(&self) -> usize {
        self.rows.len()
    }

    /// Items co-occurring with `item`, sorted by ascending item id.
    pub fn neighbors(&self, item: ItemId) -> &[(ItemId, u32)] {
        self.rows
            .get(item.0 as usize)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Number of users whose history contains both items.
    pub fn count(&self, a: ItemId, b: ItemId) -> u32 {
        if a == b {
            return 0;
        }
        let row = self.neighbors(a);
        match row.binary_search_by_key(&b, |&(i, _)| i) {
            Ok(pos) => row[pos].1,
            Err(_) => 0,
        }
    }

    /// The `n` items with the highest co-occurrence count with `item`,
    /// ties broken by ascending id. Zero-count items never qualify, and an
    /// item outside the matrix has no co-occurring items at all.
    pub fn top_cooccurring(&self, item: ItemId, n: usize) -> BTreeSet<ItemId> {
        let mut ranked: Vec<(ItemId, u32)> = self.neighbors(item).to_vec();
        ranked.sort_unstable_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.truncate(n);
        ranked.into_iter().map(|(i, _)| i).collect()
    }
}

/// Count pair co-occurrence across user histories. `n_items` fixes the
/// matrix size — items that never occur simply get empty rows.
pub fn build_cooccurrence(histories: &[UserHistory], n_items: usize) -> CooccurrenceMatrix {
    let mut counts: HashMap<(u32, u32), u32> = HashMap::new();
    for history in histories {
        let distinct: BTreeSet<u32> = history.events.iter().map(|e| e.item.0).collect();
        if let Some(&max) = distinct.iter().next_back() {
            assert!(
                (max as usize) < n_items,
                "event item id {max} outside the {n_items}-item universe"
            );
        }
        let items: Vec<u32> = distinct.into_iter().collect();
        for (i, &a) in items.iter().enumerate() {
            for &b in &items[i + 1..] {
                *counts.entry((a, b)).or_insert(0) += 1;
            }
        }
    }
    let mut rows = vec![Vec::new(); n_items];
    for (&(a, b), &count) in &counts {
        rows[a as usize].push((ItemId(b), count));
        rows[b as usize].push((ItemId(a), count));
    }
    for row in &mut rows {
        row.sort_unstable_by_key(|&(i, _)| i);
    }
    CooccurrenceMatrix { rows }
}

/// Largest timestamp across all histories, if any events exist.
pub fn corpus_end(histories: &[UserHistory]) -> Option<i64> {
    histories
        .iter()
        .flat_map(|h| h.events.iter().map(|e| e.timestamp))
        .max()
}

/// Mine all examples from one user's history.
///
/// `history.events` must be sorted by timestamp and every event's item id
/// must fall inside the catalog (both hold for [`load_interactions`]
/// output); violations panic. Degenerate histories yield no examples.
pub fn extract_examples(
    history: &UserHistory,
    matrix: &CooccurrenceMatrix,
    catalog: &Catalog,
    config: &SamplerConfig,
) -> Vec<TrainingExample> {
    let events = &history.events;
    debug_assert!(events.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));

    // Order timestamps per item, ascending, for the purchase-horizon probe.
    let mut order_times: HashMap<ItemId, Vec<i64>> = HashMap::new();
    for e in events {
        if e.kind == EventKind::Order {
            order_times.entry(e.item).or_default().push(e.timestamp);
        }
    }

    let mut top_cache: HashMap<ItemId, BTreeSet<ItemId>> = HashMap::new();
    let mut out = Vec::new();

    for (j, base_event) in events.iter().enumerate() {
        if base_event.kind != EventKind::Click {
            continue;
        }
        let base = base_event.item;
        let t = base_event.timestamp;
        let window = candidate_window(events, j, config.lookahead_secs);

        let mut targets: BTreeSet<ItemId> = BTreeSet::new();
        for candidate in &window.candidates {
            let item = candidate.item;
            if targets.contains(&item) || !catalog.complementary_unchecked(base, item) {
                continue;
            }
            let bought = order_times.get(&item).is_some_and(|times| {
                times
                    .iter()
                    .any(|&ts| ts > t && ts <= t + config.purchase_horizon_secs)
            });
            if !bought {
                continue;
            }
            let top = top_cache
                .entry(base)
                .or_insert_with(|| matrix.top_cooccurring(base, config.top_n));
            if top.contains(&item) {
                targets.insert(item);
            }
        }
        if targets.is_empty() {
            continue;
        }

        let clicks = recent_context(
            events,
            EventKind::Click,
            t - config.click_window_secs,
            t,
            config.max_clicks,
        );
        let orders = recent_context(
            events,
            EventKind::Order,
            t - config.order_window_secs,
            t,
            config.max_orders,
        );
        let base_day = t.div_euclid(SECS_PER_DAY);
        for target in targets {
            let ordered_within_day = order_times[&target]
                .iter()
                .any(|&ts| ts.div_euclid(SECS_PER_DAY) == base_day);
            out.push(TrainingExample {
                user: history.user,
                base,
                target,
                base_time: t,
                clicks: clicks.clone(),
                orders: orders.clone(),
                ordered_within_day,
            });
        }
    }
    out
}

/// Items of the most recent `cap` events of `kind` with timestamp in
/// `[from, until)`, returned oldest first.
fn recent_context(
    events: &[InteractionEvent],
    kind: EventKind,
    from: i64,
    until: i64,
    cap: usize,
) -> Vec<ItemId> {
    let in_window: Vec<ItemId> = events
        .iter()
        .filter(|e| e.kind == kind && e.timestamp >= from && e.timestamp < until)
        .map(|e| e.item)
        .collect();
    let skip = in_window.len().saturating_sub(cap);
    in_window[skip..].to_vec()
}

/// Mine the whole corpus: build co-occurrence over all histories, extract
/// per user, and emit examples sorted by (user, base_time, target).
pub fn build_dataset(
    histories: &[UserHistory],
    catalog: &Catalog,
    config: &SamplerConfig,
) -> (Vec<TrainingExample>, CooccurrenceMatrix) {
    let matrix = build_cooccurrence(histories, catalog.len());
    let mut examples: Vec<TrainingExample> = histories
        .par_iter()
        .map(|h| extract_examples(h, &matrix, catalog, config))
        .flatten()
        .collect();
    examples.sort_by(|a, b| {
        (a.user, a.base_time, a.target).cmp(&(b.user, b.base_time, b.target))
    });
    (examples, matrix)
}

/// Split examples into (train, test): the test set is every example whose
/// base click falls on the final UTC calendar day containing `corpus_end`.
pub fn split_by_time(
    examples: Vec<TrainingExample>,
    corpus_end: i64,
) -> (Vec<TrainingExample>, Vec<TrainingExample>) {
    let last_day = corpus_end.div_euclid(SECS_PER_DAY);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for example in examples {
        let day = example.base_time.div_euclid(SECS_PER_DAY);
        debug_assert!(day <= last_day, "example beyond corpus end");
        if day == last_day {
            test.push(example);
        } else {
            train.push(example);
        }
    }
    (train, test)
}

/// Parse an interaction log. Events are grouped per user (users returned
/// in ascending id order) and sorted by timestamp, ties keeping file order.
pub fn load_interactions(path: &Path, catalog: &Catalog) -> Result<Vec<UserHistory>, SamplerError> {
    let file = File::open(path).map_err(|source| SamplerError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut per_user: BTreeMap<u64, Vec<InteractionEvent>> = BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let raw = line.map_err(|source| SamplerError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let trimmed = raw.trim_end_matches(['\r', '\n']);
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let malformed = |reason: String| SamplerError::Malformed {
            path: path.to_path_buf(),
            line: line_no,
            reason,
        };
        let fields: Vec<&str> = trimmed.split('\t').collect();
        if fields.len() != 4 {
            return Err(malformed(format!(
                "expected `user<TAB>unix_seconds<TAB>click|order<TAB>item`, got {} field(s)",
                fields.len()
            )));
        }
        let user: u64 = fields[0]
            .parse()
            .map_err(|_| malformed(format!("invalid user id `{}`", fields[0])))?;
        let timestamp: i64 = fields[1]
            .parse()
            .map_err(|_| malformed(format!("invalid timestamp `{}`", fields[1])))?;
        if timestamp < 0 {
            return Err(malformed(format!("negative timestamp `{timestamp}`")));
        }
        let kind = match fields[2] {
            "click" => EventKind::Click,
            "order" => EventKind::Order,
            other => return Err(malformed(format!("invalid event kind `{other}`"))),
        };
        let item = catalog
            .resolve(fields[3])
            .ok_or_else(|| SamplerError::UnknownItemKey {
                path: path.to_path_buf(),
                line: line_no,
                key: fields[3].to_string(),
            })?;
        per_user.entry(user).or_default().push(InteractionEvent {
            item,
            kind,
            timestamp,
        });
    }
    Ok(per_user
        .into_iter()
        .map(|(user, mut events)| {
            events.sort_by_key(|e| e.timestamp); // stable: ties keep file order
            UserHistory { user, events }
        })
        .collect())
}

/// Write examples as JSON Lines.
pub fn write_dataset(path: &Path, examples: &[TrainingExample]) -> Result<(), SamplerError> {
    let io_err = |source| SamplerError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut writer = BufWriter::new(File::create(path).map_err(io_err)?);
    for example in examples {
        serde_json::to_writer(&mut writer, example).map_err(|e| SamplerError::Io {
            path: path.to_path_buf(),
            source: e.into(),
        })?;
        writer.write_all(b"\n").map_err(io_err)?;
    }
    writer.flush().map_err(io_err)
}

/// Read a JSON Lines dataset written by [`write_dataset`].
pub fn read_dataset(path: &Path) -> Result<Vec<TrainingExample>, SamplerError> {
    let file = File::open(path).map_err(|source| SamplerError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut examples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let raw = line.map_err(|source| SamplerError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if raw.trim().is_empty() {
            continue;
        }
        let example = serde_json::from_str(&raw).map_err(|e| SamplerError::Malformed {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        examples.push(example);
    }
    Ok(examples)
}
