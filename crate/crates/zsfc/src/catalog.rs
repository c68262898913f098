//! Catalog metadata: items, the category forest, and the complementary
//! predicate that gates every recommendation this crate produces.
//!
//! Two items are *complementary* when their (leaf) categories differ and
//! the unordered category pair is not on the curated negative-pair list.
//! The predicate is symmetric, and an item is never complementary to
//! itself.
//!
//! File formats (all UTF-8, tab-separated, `#`-prefixed lines ignored):
//!
//! * `catalog.tsv` — `item_key <TAB> category_key [<TAB> f1,f2,…]`, the
//!   optional third column holding image feature values
//! * `hierarchy.tsv` — `category_key <TAB> parent_category_key|ROOT`
//! * `negative_pairs.tsv` — `category_key_a <TAB> category_key_b`

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Dense item identifier; assigned in catalog file order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ItemId(pub u32);

/// Dense category identifier; assigned in hierarchy file order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CategoryId(pub u32);

impl fmt::Display for ItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for CategoryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One catalog row.
#[derive(Debug, Clone, PartialEq)]
pub struct CatalogEntry {
    pub item: ItemId,
    pub category: CategoryId,
    /// Image embedding for the item, when the catalog provides one.
    /// All rows that carry features must agree on the length.
    pub image_features: Option<Vec<f32>>,
}

#[derive(Debug, Error)]
pub enum CatalogError {
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
    #[error("{path}:{line}: duplicate key `{key}`")]
    DuplicateKey {
        path: PathBuf,
        line: usize,
        key: String,
    },
    #[error("{path}:{line}: unknown category key `{key}`")]
    UnknownCategory {
        path: PathBuf,
        line: usize,
        key: String,
    },
    #[error("category hierarchy contains a cycle through `{key}`")]
    Cycle { key: String },
    #[error("{path}:{line}: expected {expected} image feature values, found {found}")]
    FeatureLength {
        path: PathBuf,
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("unknown item id {0}")]
    UnknownItem(ItemId),
}

/// Category forest: every category has at most one parent, roots have none.
///
/// Ancestry is retained for generators and reporting; the complementary
/// predicate itself only compares leaf categories.
#[derive(Debug, Clone, Default)]
pub struct CategoryHierarchy {
    keys: Vec<String>,
    index: HashMap<String, CategoryId>,
    parents: Vec<Option<CategoryId>>,
}

impl CategoryHierarchy {
    /// Build from (key, parent key) rows; `None` parent marks a root.
    /// Parents may reference categories defined later in the list.
    pub fn from_rows(rows: Vec<(String, Option<String>)>) -> Result<Self, CatalogError> {
        let mut keys = Vec::with_capacity(rows.len());
        let mut index = HashMap::with_capacity(rows.len());
        for (key, _) in &rows {
            let id = CategoryId(keys.len() as u32);
            if index.insert(key.clone(), id).is_some() {
                return Err(CatalogError::DuplicateKey {
                    path: PathBuf::from("<hierarchy>"),
                    line: keys.len() + 1,
                    key: key.clone(),
                });
            }
            keys.push(key.clone());
        }
        let mut parents = Vec::with_capacity(rows.len());
        for (key, parent) in &rows {
            match parent {
                None => parents.push(None),
                Some(p) => match index.get(p) {
                    Some(&id) => parents.push(Some(id)),
                    None => {
                        return Err(CatalogError::UnknownCategory {
                            path: PathBuf::from("<hierarchy>"),
                            line: 0,
                            key: p.clone(),
                        })
                    }
                },
            }
            let _ = key;
        }
        let hierarchy = CategoryHierarchy { keys, index, parents };
        hierarchy.check_acyclic()?;
        Ok(hierarchy)
    }

    fn check_acyclic(&self) -> Result<(), CatalogError> {
        // A parent chain longer than the category count must revisit a node.
        let n = self.parents.len();
        for start in 0..n {
            let mut cursor = self.parents[start];
            let mut steps = 0;
            while let Some(cat) = cursor {
                steps += 1;
                if steps > n {
                    return Err(CatalogError::Cycle {
                        key: self.keys[start].clone(),
                    });
                }
                cursor = self.parents[cat.0 as usize];
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn resolve(&self, key: &str) -> Option<CategoryId> {
        self.index.get(key).copied()
    }

    pub fn key(&self, category: CategoryId) -> Option<&str> {
        self.keys.get(category.0 as usize).map(String::as_str)
    }

    pub fn parent(&self, category: CategoryId) -> Option<CategoryId> {
        self.parents.get(category.0 as usize).copied().flatten()
    }
}

/// Unordered category pairs excluded from the complementary relation
/// (e.g. two garment kinds that compete rather than complete).
#[derive(Debug, Clone, Default)]
pub struct NegativePairList {
    pairs: HashSet<(u32, u32)>,
}

impl NegativePairList {
    pub fn insert(&mut self, a: CategoryId, b: CategoryId) {
        self.pairs.insert(canonical(a, b));
    }

    pub fn contains(&self, a: CategoryId, b: CategoryId) -> bool {
        self.pairs.contains(&canonical(a, b))
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

fn canonical(a: CategoryId, b: CategoryId) -> (u32, u32) {
    if a.0 <= b.0 {
        (a.0, b.0)
    } else {
        (b.0, a.0)
    }
}

/// The full item universe: entries plus the category metadata needed by
/// the complementary predicate.
#[derive(Debug, Clone)]
pub struct Catalog {
    entries: Vec<CatalogEntry>,
    keys: Vec<String>,
    index: HashMap<String, ItemId>,
    pub hierarchy: CategoryHierarchy,
    pub negative_pairs: NegativePairList,
    feature_dim: Option<usize>,
}

impl Catalog {
    /// Assemble a catalog in memory; `features` may be empty or must match
    /// `item_keys` in length, and all feature rows must agree on length.
    pub fn from_parts(
        item_keys: Vec<String>,
        categories: Vec<CategoryId>,
        features: Vec<Option<Vec<f32>>>,
        hierarchy: CategoryHierarchy,
        negative_pairs: NegativePairList,
    ) -> Result<Self, CatalogError> {
        assert_eq!(item_keys.len(), categories.len());
        assert!(features.is_empty() || features.len() == item_keys.len());
        let mut index = HashMap::with_capacity(item_keys.len());
        let mut entries = Vec::with_capacity(item_keys.len());
        let mut feature_dim = None;
        for (i, key) in item_keys.iter().enumerate() {
            let item = ItemId(i as u32);
            if index.insert(key.clone(), item).is_some() {
                return Err(CatalogError::DuplicateKey {
                    path: PathBuf::from("<memory>"),
                    line: i + 1,
                    key: key.clone(),
                });
            }
            let category = categories[i];
            if hierarchy.key(category).is_none() {
                return Err(CatalogError::UnknownCategory {
                    path: PathBuf::from("<memory>"),
                    line: i + 1,
                    key: category.to_string(),
                });
            }
            let image_features = features.get(i).cloned().flatten();
            if let Some(f) = &image_features {
                let expected = *feature_dim.get_or_insert(f.len());
                if f.len() != expected {
                    return Err(CatalogError::FeatureLength {
                        path: PathBuf::from("<memory>"),
                        line: i + 1,
                        expected,
                        found: f.len(),
                    });
                }
            }
            entries.push(CatalogEntry {
                item,
                category,
                image_features,
            });
        }
        Ok(Catalog {
            entries,
            keys: item_keys,
            index,
            hierarchy,
            negative_pairs,
            feature_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[CatalogEntry] {
        &self.entries
    }

    pub fn entry(&self, item: ItemId) -> Result<&CatalogEntry, CatalogError> {
        self.entries
            .get(item.0 as usize)
            .ok_or(CatalogError::UnknownItem(item))
    }

    pub fn category_of(&self, item: ItemId) -> Result<CategoryId, CatalogError> {
        self.entry(item).map(|e| e.category)
    }

    pub fn key(&self, item: ItemId) -> Result<&str, CatalogError> {
        self.keys
            .get(item.0 as usize)
            .map(String::as_str)
            .ok_or(CatalogError::UnknownItem(item))
    }

    pub fn resolve(&self, key: &str) -> Option<ItemId> {
        self.index.get(key).copied()
    }

    pub fn n_categories(&self) -> usize {
        self.hierarchy.len()
    }

    /// Length of the image feature rows, if any row carries them.
    pub fn feature_dim(&self) -> Option<usize> {
        self.feature_dim
    }

    /// True when `a` and `b` sit in different categories and the category
    /// pair is not negative-listed. Symmetric; false when `a == b`.
    pub fn is_complementary(&self, a: ItemId, b: ItemId) -> Result<bool, CatalogError> {
        let ca = self.category_of(a)?;
        let cb = self.category_of(b)?;
        Ok(ca != cb && !self.negative_pairs.contains(ca, cb))
    }

    /// Bounds-unchecked predicate for hot loops whose ids are known valid.
    pub(crate) fn complementary_unchecked(&self, a: ItemId, b: ItemId) -> bool {
        let ca = self.entries[a.0 as usize].category;
        let cb = self.entries[b.0 as usize].category;
        ca != cb && !self.negative_pairs.contains(ca, cb)
    }

    /// Keep the candidates complementary to `base`, preserving order.
    pub fn complementary_filter(
        &self,
        base: ItemId,
        candidates: &[ItemId],
    ) -> Result<Vec<ItemId>, CatalogError> {
        self.entry(base)?;
        let mut kept = Vec::with_capacity(candidates.len());
        for &c in candidates {
            if self.is_complementary(base, c)? {
                kept.push(c);
            }
        }
        Ok(kept)
    }
}

/// Load the three catalog files. Items and categories are densified in
/// file order; every parse error reports its path and line number.
pub fn load_catalog(
    catalog_path: &Path,
    hierarchy_path: &Path,
    negative_pairs_path: &Path,
) -> Result<Catalog, CatalogError> {
    let hierarchy = parse_hierarchy(open(hierarchy_path)?, hierarchy_path)?;
    let negative_pairs = parse_negative_pairs(open(negative_pairs_path)?, negative_pairs_path, &hierarchy)?;
    parse_catalog(open(catalog_path)?, catalog_path, hierarchy, negative_pairs)
}

fn open(path: &Path) -> Result<BufReader<File>, CatalogError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|source| CatalogError::Io {
            path: path.to_path_buf(),
            source,
        })
}

/// Iterate data lines (1-based numbering, comments and blanks skipped).
fn data_lines<'a, R: BufRead + 'a>(
    reader: R,
    path: &'a Path,
) -> impl Iterator<Item = Result<(usize, String), CatalogError>> + 'a {
    reader.lines().enumerate().filter_map(move |(i, line)| match line {
        Err(source) => Some(Err(CatalogError::Io {
            path: path.to_path_buf(),
            source,
        })),
        Ok(raw) => {
            let trimmed = raw.trim_end_matches(['\r', '\n']);
            if trimmed.is_empty() || trimmed.starts_with('#') {
                None
            } else {
                Some(Ok((i + 1, trimmed.to_string())))
            }
        }
    })
}

pub(crate) fn split_fields(line: &str) -> Vec<&str> {
    line.split('\t').collect()
}

fn parse_hierarchy<R: BufRead>(
    reader: R,
    path: &Path,
) -> Result<CategoryHierarchy, CatalogError> {
    let mut rows = Vec::new();
    let mut lines = Vec::new();
    for entry in data_lines(reader, path) {
        let (line_no, line) = entry?;
        let fields = split_fields(&line);
        if fields.len() != 2 || fields[0].is_empty() || fields[1].is_empty() {
            return Err(CatalogError::Malformed {
                path: path.to_path_buf(),
                line: line_no,
                reason: format!("expected `category<TAB>parent|ROOT`, got {} field(s)", fields.len()),
            });
        }
        let parent = if fields[1] == "ROOT" {
            None
        } else {
            Some(fields[1].to_string())
        };
        rows.push((fields[0].to_string(), parent));
        lines.push(line_no);
    }
    // Rebuild path/line context that `from_rows` cannot know.
    CategoryHierarchy::from_rows(rows).map_err(|e| match e {
        CatalogError::DuplicateKey { line, key, .. } => CatalogError::DuplicateKey {
            path: path.to_path_buf(),
            line: lines.get(line.saturating_sub(1)).copied().unwrap_or(line),
            key,
        },
        CatalogError::UnknownCategory { key, .. } => CatalogError::UnknownCategory {
            path: path.to_path_buf(),
            line: 0,
            key,
        },
        other => other,
    })
}

fn parse_negative_pairs<R: BufRead>(
    reader: R,
    path: &Path,
    hierarchy: &CategoryHierarchy,
) -> Result<NegativePairList, CatalogError> {
    let mut list = NegativePairList::default();
    for entry in data_lines(reader, path) {
        let (line_no, line) = entry?;
        let fields = split_fields(&line);
        if fields.len() != 2 || fields[0].is_empty() || fields[1].is_empty() {
            return Err(CatalogError::Malformed {
                path: path.to_path_buf(),
                line: line_no,
                reason: format!("expected `category_a<TAB>category_b`, got {} field(s)", fields.len()),
            });
        }
        let resolve = |key: &str| {
            hierarchy.resolve(key).ok_or_else(|| CatalogError::UnknownCategory {
                path: path.to_path_buf(),
                line: line_no,
                key: key.to_string(),
            })
        };
        let a = resolve(fields[0])?;
        let b = resolve(fields[1])?;
        list.insert(a, b);
    }
    Ok(list)
}

fn parse_catalog<R: BufRead>(
    reader: R,
    path: &Path,
    hierarchy: CategoryHierarchy,
    negative_pairs: NegativePairList,
) -> Result<Catalog, CatalogError> {
    let mut keys = Vec::new();
    let mut categories = Vec::new();
    let mut features = Vec::new();
    let mut seen = HashSet::new();
    let mut feature_dim: Option<usize> = None;
    for entry in data_lines(reader, path) {
        let (line_no, line) = entry?;
        let fields = split_fields(&line);
        if !(fields.len() == 2 || fields.len() == 3) || fields[0].is_empty() || fields[1].is_empty() {
            return Err(CatalogError::Malformed {
                path: path.to_path_buf(),
                line: line_no,
                reason: format!(
                    "expected `item<TAB>category[<TAB>features]`, got {} field(s)",
                    fields.len()
                ),
            });
        }
        if !seen.insert(fields[0].to_string()) {
            return Err(CatalogError::DuplicateKey {
                path: path.to_path_buf(),
                line: line_no,
                key: fields[0].to_string(),
            });
        }
        let category = hierarchy.resolve(fields[1]).ok_or_else(|| CatalogError::UnknownCategory {
            path: path.to_path_buf(),
            line: line_no,
            key: fields[1].to_string(),
        })?;
        let row_features = if fields.len() == 3 {
            let values = parse_feature_list(fields[2], path, line_no)?;
            let expected = *feature_dim.get_or_insert(values.len());
            if values.len() != expected {
                return Err(CatalogError::FeatureLength {
                    path: path.to_path_buf(),
                    line: line_no,
                    expected,
                    found: values.len(),
                });
            }
            Some(values)
        } else {
            None
        };
        keys.push(fields[0].to_string());
        categories.push(category);
        features.push(row_features);
    }
    Catalog::from_parts(keys, categories, features, hierarchy, negative_pairs)
}

fn parse_feature_list(field: &str, path: &Path, line_no: usize) -> Result<Vec<f32>, CatalogError> {
    if field.is_empty() {
        return Err(CatalogError::Malformed {
            path: path.to_path_buf(),
            line: line_no,
            reason: "empty image feature list".to_string(),
        });
    }
    let mut values = Vec::new();
    for piece in field.split(',') {
        let value: f32 = piece.trim().parse().map_err(|_| CatalogError::Malformed {
            path: path.to_path_buf(),
            line: line_no,
            reason: format!("invalid feature value `{piece}`"),
        })?;
        if !value.is_finite() {
            return Err(CatalogError::Malformed {
                path: path.to_path_buf(),
                line: line_no,
                reason: format!("non-finite feature value `{piece}`"),
            });
        }
        values.push(value);
    }
    Ok(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn hierarchy(text: &str) -> CategoryHierarchy {
        parse_hierarchy(Cursor::new(text), Path::new("hierarchy.tsv")).unwrap()
    }

    fn small_catalog() -> Catalog {
        let h = hierarchy("shoes\tROOT\nsocks\tshoes\nbelts\tROOT\nhats\tROOT\n");
        let negatives = parse_negative_pairs(
            Cursor::new("shoes\tbelts\n"),
            Path::new("negative_pairs.tsv"),
            &h,
        )
        .unwrap();
        parse_catalog(
            Cursor::new(concat!(
                "# inventory snapshot\n",
                "sneaker\tshoes\n",
                "oxford\tshoes\n",
                "wool_sock\tsocks\n",
                "leather_belt\tbelts\n",
                "beanie\thats\n",
            )),
            Path::new("catalog.tsv"),
            h,
            negatives,
        )
        .unwrap()
    }

    #[test]
    fn predicate_requires_distinct_categories() {
        let c = small_catalog();
        // sneaker vs oxford: same category.
        assert!(!c.is_complementary(ItemId(0), ItemId(1)).unwrap());
        // sneaker vs wool_sock: different categories, no negative pair.
        assert!(c.is_complementary(ItemId(0), ItemId(2)).unwrap());
    }

    #[test]
    fn predicate_respects_negative_pairs() {
        let c = small_catalog();
        // shoes/belts is negative-listed in both directions.
        assert!(!c.is_complementary(ItemId(0), ItemId(3)).unwrap());
        assert!(!c.is_complementary(ItemId(3), ItemId(0)).unwrap());
        // belts/hats is not.
        assert!(c.is_complementary(ItemId(3), ItemId(4)).unwrap());
    }

    #[test]
    fn predicate_is_symmetric_and_irreflexive() {
        let c = small_catalog();
        for a in 0..c.len() as u32 {
            assert!(!c.is_complementary(ItemId(a), ItemId(a)).unwrap());
            for b in 0..c.len() as u32 {
                assert_eq!(
                    c.is_complementary(ItemId(a), ItemId(b)).unwrap(),
                    c.is_complementary(ItemId(b), ItemId(a)).unwrap(),
                    "asymmetry for ({a},{b})"
                );
            }
        }
    }

    #[test]
    fn predicate_rejects_unknown_items() {
        let c = small_catalog();
        assert!(matches!(
            c.is_complementary(ItemId(0), ItemId(99)),
            Err(CatalogError::UnknownItem(ItemId(99)))
        ));
    }

    #[test]
    fn filter_preserves_order_and_is_idempotent() {
        let c = small_catalog();
        let candidates: Vec<ItemId> = (0..c.len() as u32).map(ItemId).collect();
        let kept = c.complementary_filter(ItemId(0), &candidates).unwrap();
        assert_eq!(kept, vec![ItemId(2), ItemId(4)]);
        let again = c.complementary_filter(ItemId(0), &kept).unwrap();
        assert_eq!(again, kept);
    }

    #[test]
    fn filter_of_empty_list_is_empty() {
        let c = small_catalog();
        assert!(c.complementary_filter(ItemId(0), &[]).unwrap().is_empty());
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let c = small_catalog();
        assert_eq!(c.len(), 5);
        assert_eq!(c.resolve("sneaker"), Some(ItemId(0)));
        assert_eq!(c.key(ItemId(4)).unwrap(), "beanie");
    }

    #[test]
    fn malformed_lines_report_their_number() {
        let h = hierarchy("a\tROOT\n");
        let err = parse_catalog(
            Cursor::new("x\ta\nbroken line\n"),
            Path::new("catalog.tsv"),
            h,
            NegativePairList::default(),
        )
        .unwrap_err();
        match err {
            CatalogError::Malformed { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn dangling_category_is_rejected() {
        let h = hierarchy("a\tROOT\n");
        let err = parse_catalog(
            Cursor::new("x\tmissing\n"),
            Path::new("catalog.tsv"),
            h,
            NegativePairList::default(),
        )
        .unwrap_err();
        assert!(matches!(err, CatalogError::UnknownCategory { .. }));
    }

    #[test]
    fn self_parent_is_a_cycle() {
        let err = parse_hierarchy(Cursor::new("a\ta\n"), Path::new("hierarchy.tsv")).unwrap_err();
        assert!(matches!(err, CatalogError::Cycle { .. }));
    }

    #[test]
    fn two_node_cycle_is_detected() {
        let err =
            parse_hierarchy(Cursor::new("a\tb\nb\ta\n"), Path::new("hierarchy.tsv")).unwrap_err();
        assert!(matches!(err, CatalogError::Cycle { .. }));
    }

    #[test]
    fn feature_length_mismatch_is_rejected() {
        let h = hierarchy("a\tROOT\nb\tROOT\n");
        let err = parse_catalog(
            Cursor::new("x\ta\t1.0,2.0,3.0\ny\tb\t1.0,2.0\n"),
            Path::new("catalog.tsv"),
            h,
            NegativePairList::default(),
        )
        .unwrap_err();
        match err {
            CatalogError::FeatureLength {
                line,
                expected,
                found,
                ..
            } => {
                assert_eq!((line, expected, found), (2, 3, 2));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn non_finite_features_are_rejected() {
        let h = hierarchy("a\tROOT\n");
        let err = parse_catalog(
            Cursor::new("x\ta\t1.0,NaN\n"),
            Path::new("catalog.tsv"),
            h,
            NegativePairList::default(),
        )
        .unwrap_err();
        assert!(matches!(err, CatalogError::Malformed { .. }));
    }

    #[test]
    fn duplicate_item_keys_are_rejected() {
        let h = hierarchy("a\tROOT\n");
        let err = parse_catalog(
            Cursor::new("x\ta\nx\ta\n"),
            Path::new("catalog.tsv"),
            h,
            NegativePairList::default(),
        )
        .unwrap_err();
        assert!(matches!(err, CatalogError::DuplicateKey { line: 2, .. }));
    }

    #[test]
    fn hierarchy_resolves_parents_in_any_order() {
        let h = hierarchy("child\tparent\nparent\tROOT\n");
        let child = h.resolve("child").unwrap();
        assert_eq!(h.parent(child), h.resolve("parent"));
        assert_eq!(h.parent(h.resolve("parent").unwrap()), None);
    }
}
