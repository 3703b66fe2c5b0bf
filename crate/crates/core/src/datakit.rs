//! Dataset indexing, stratified splitting, balancing and the nested training-size ladder.
//!
//! All sampling is seeded. Per-label shuffles use a stream derived from `(seed, label)`, so
//! the membership of one class never depends on the size of another.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::heightfield::{DatasetManifest, DefectLabel};
use crate::{rng, Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub item_id: String,
    pub label: DefectLabel,
}

/// Ordered, labeled list of unique item ids.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "Vec<IndexEntry>", into = "Vec<IndexEntry>")]
pub struct DatasetIndex {
    entries: Vec<IndexEntry>,
    histogram: BTreeMap<DefectLabel, usize>,
}

impl TryFrom<Vec<IndexEntry>> for DatasetIndex {
    type Error = Error;

    fn try_from(entries: Vec<IndexEntry>) -> Result<Self> {
        DatasetIndex::new(entries)
    }
}

impl From<DatasetIndex> for Vec<IndexEntry> {
    fn from(idx: DatasetIndex) -> Self {
        idx.entries
    }
}

impl DatasetIndex {
    pub fn new(entries: Vec<IndexEntry>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(entries.len());
        let mut histogram: BTreeMap<DefectLabel, usize> = DefectLabel::ALL.iter().map(|&l| (l, 0)).collect();
        for e in &entries {
            if !seen.insert(e.item_id.as_str()) {
                return Err(Error::Dataset(format!("duplicate item id `{}`", e.item_id)));
            }
            *histogram.entry(e.label).or_default() += 1;
        }
        Ok(DatasetIndex { entries, histogram })
    }

    pub fn from_pairs<I, S>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, DefectLabel)>,
        S: Into<String>,
    {
        Self::new(
            pairs
                .into_iter()
                .map(|(id, label)| IndexEntry {
                    item_id: id.into(),
                    label,
                })
                .collect(),
        )
    }

    pub fn from_manifest(m: &DatasetManifest) -> Result<Self> {
        Self::from_pairs(m.patches.iter().map(|p| (p.item_id.clone(), p.label)))
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn histogram(&self) -> &BTreeMap<DefectLabel, usize> {
        &self.histogram
    }

    pub fn count(&self, label: DefectLabel) -> usize {
        self.histogram.get(&label).copied().unwrap_or(0)
    }

    pub fn ids(&self) -> HashSet<&str> {
        self.entries.iter().map(|e| e.item_id.as_str()).collect()
    }

    pub fn contains_all(&self, other: &DatasetIndex) -> bool {
        let ids = self.ids();
        other.entries.iter().all(|e| ids.contains(e.item_id.as_str()))
    }

    /// Entries of one label, in index order.
    fn of_label(&self, label: DefectLabel) -> Vec<&IndexEntry> {
        self.entries.iter().filter(|e| e.label == label).collect()
    }

    /// Keeps the entries whose ids are in `keep`, preserving order.
    fn restrict(&self, keep: &HashSet<&str>) -> DatasetIndex {
        let entries = self
            .entries
            .iter()
            .filter(|e| keep.contains(e.item_id.as_str()))
            .cloned()
            .collect();
        DatasetIndex::new(entries).expect("subset of a valid index is valid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub eval_fraction_of_train: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.7,
            eval_fraction_of_train: 0.1,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, f) in [
            ("train_fraction", self.train_fraction),
            ("eval_fraction_of_train", self.eval_fraction_of_train),
        ] {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {f}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitResult {
    pub train: DatasetIndex,
    pub eval: DatasetIndex,
    pub test: DatasetIndex,
}

impl SplitResult {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Splits `n` into two parts with quotas `n * fraction` and `n * (1 - fraction)` using
/// largest-remainder rounding. Ties go to the first part.
pub fn largest_remainder_pair(n: usize, fraction: f64) -> (usize, usize) {
    let quota = n as f64 * fraction;
    let first = (quota.floor() as usize).min(n);
    let rem = quota - first as f64;
    // with a fractional quota the floors leave one item over; the second part's
    // remainder is 1 - rem
    if rem > 0.0 && rem >= 1.0 - rem {
        (first + 1, n - first - 1)
    } else {
        (first, n - first)
    }
}

const MIN_PER_LABEL: usize = 3;

/// Stratified train / eval / test split.
///
/// Within each label the items are shuffled, cut into train and test by largest remainder,
/// and the eval part is carved from train the same way.
pub fn stratified_split(index: &DatasetIndex, spec: &SplitSpec) -> Result<SplitResult> {
    spec.validate()?;
    for label in DefectLabel::ALL {
        let available = index.count(label);
        if available < MIN_PER_LABEL {
            return Err(Error::Stratification {
                label,
                available,
                required: MIN_PER_LABEL,
            });
        }
    }

    let mut train = HashSet::new();
    let mut eval = HashSet::new();
    let mut test = HashSet::new();
    for label in DefectLabel::ALL {
        let mut items = index.of_label(label);
        items.shuffle(&mut rng::stream(spec.seed, label.index() as u64));
        let (n_train, _) = largest_remainder_pair(items.len(), spec.train_fraction);
        let (train_part, test_part) = items.split_at(n_train);
        test.extend(test_part.iter().map(|e| e.item_id.as_str()));

        let mut train_part = train_part.to_vec();
        train_part.shuffle(&mut rng::stream(spec.seed, 0x100 | label.index() as u64));
        let (n_eval, _) = largest_remainder_pair(train_part.len(), spec.eval_fraction_of_train);
        let (eval_part, rest) = train_part.split_at(n_eval);
        eval.extend(eval_part.iter().map(|e| e.item_id.as_str()));
        train.extend(rest.iter().map(|e| e.item_id.as_str()));
    }
    Ok(SplitResult {
        train: index.restrict(&train),
        eval: index.restrict(&eval),
        test: index.restrict(&test),
    })
}

/// Per-label shuffled order used by [`balance`] and [`subset_ladder`].
fn shuffled_by_label(index: &DatasetIndex, seed: u64) -> Vec<(DefectLabel, Vec<&IndexEntry>)> {
    DefectLabel::ALL
        .iter()
        .map(|&label| {
            let mut items = index.of_label(label);
            items.shuffle(&mut rng::stream(seed, 0x200 | label.index() as u64));
            (label, items)
        })
        .collect()
}

fn take_per_label(order: &[(DefectLabel, Vec<&IndexEntry>)], n: usize) -> Result<DatasetIndex> {
    for (label, items) in order {
        if items.len() < n {
            return Err(Error::Balance {
                label: *label,
                available: items.len(),
                requested: n,
            });
        }
    }
    DatasetIndex::new(
        order
            .iter()
            .flat_map(|(_, items)| items[..n].iter().map(|&e| e.clone()))
            .collect(),
    )
}

/// Draws exactly `n_per_class` items of every label, without replacement.
pub fn balance(index: &DatasetIndex, n_per_class: usize, seed: u64) -> Result<DatasetIndex> {
    take_per_label(&shuffled_by_label(index, seed), n_per_class)
}

/// One balanced index per size; each is a prefix-superset of the previous one.
pub fn subset_ladder(index: &DatasetIndex, sizes: &[usize], seed: u64) -> Result<Vec<DatasetIndex>> {
    if sizes.is_empty() {
        return Err(Error::Ladder("no ladder sizes given".into()));
    }
    if let Some(w) = sizes.windows(2).find(|w| w[0] >= w[1]) {
        return Err(Error::Ladder(format!(
            "sizes must be strictly increasing, got {} before {}",
            w[0], w[1]
        )));
    }
    let order = shuffled_by_label(index, seed);
    sizes.iter().map(|&n| take_per_label(&order, n)).collect()
}

/// JSON manifest of ladder membership.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderManifest {
    pub seed: u64,
    pub rungs: Vec<LadderRung>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderRung {
    pub per_class: usize,
    pub items: DatasetIndex,
}

impl LadderManifest {
    pub fn new(sizes: &[usize], seed: u64, subsets: Vec<DatasetIndex>) -> Self {
        LadderManifest {
            seed,
            rungs: sizes
                .iter()
                .zip(subsets)
                .map(|(&per_class, items)| LadderRung { per_class, items })
                .collect(),
        }
    }
}
