//! Corpus construction: discretizing tabular survival data into a
//! bag-of-words count matrix, train/test/fold splitting, and synthetic data
//! generation.
//!
//! Continuous features are binned at empirical quantiles of the rows the
//! vocabulary is built from (so callers wanting leakage-free edges pass
//! training rows only); categorical features get one word per declared
//! category. Every feature also gets a dedicated `feature:missing` word so
//! sparse subjects keep a nonzero word total.

mod synth;

pub use synth::{synth_generate, synth_vocabulary, SynthConfig, SynthTruth};

use std::collections::{BTreeMap, HashMap};
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("required column `{0}` is missing")]
    MissingColumn(String),
    #[error("row {row}: {detail}")]
    Row { row: usize, detail: String },
    #[error("invalid feature spec: {0}")]
    SpecInvalid(String),
    #[error("feature `{0}` not present in the table")]
    UnknownFeature(String),
    #[error(
        "degenerate binning for feature `{feature}`: {distinct} distinct values for {bins} bins"
    )]
    DegenerateBinning {
        feature: String,
        distinct: usize,
        bins: usize,
    },
    #[error("unknown category `{value}` for feature `{feature}` (no `other` category enabled)")]
    UnknownCategory { feature: String, value: String },
    #[error("subject `{id}`: nonpositive or non-finite time {time}")]
    BadTime { id: String, time: f64 },
    #[error("subject `{id}`: event indicator {event} not in {{0, 1}}")]
    BadEvent { id: String, event: u8 },
    #[error("subject `{id}`: rows disagree on time/event")]
    InconsistentLabel { id: String },
    #[error("subject `{id}`: no words at all (empty row)")]
    EmptyRow { id: String },
    #[error("row {0} has zero word count; cannot normalize")]
    ZeroCountRow(usize),
    #[error("invalid corpus: {0}")]
    CorpusInvalid(String),
    #[error("cannot split n={n} into {folds} folds")]
    SplitTooSmall { n: usize, folds: usize },
    #[error("invalid config: {0}")]
    BadConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Continuous,
    Categorical,
}

/// Declaration of one raw feature and how to discretize it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
    /// Number of quantile bins (continuous only).
    #[serde(default = "default_bins")]
    pub bins: usize,
    /// Declared categories (categorical only).
    #[serde(default)]
    pub categories: Vec<String>,
    /// Route undeclared categorical values to a dedicated `other` word
    /// instead of rejecting them.
    #[serde(default)]
    pub allow_other: bool,
}

fn default_bins() -> usize {
    5
}

impl FeatureSpec {
    pub fn continuous(name: &str, bins: usize) -> Self {
        Self {
            name: name.to_string(),
            kind: FeatureKind::Continuous,
            bins,
            categories: Vec::new(),
            allow_other: false,
        }
    }

    pub fn categorical(name: &str, categories: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            kind: FeatureKind::Categorical,
            bins: default_bins(),
            categories: categories.iter().map(|s| s.to_string()).collect(),
            allow_other: false,
        }
    }

    fn validate(&self) -> Result<(), CorpusError> {
        if self.name.is_empty() {
            return Err(CorpusError::SpecInvalid("empty feature name".to_string()));
        }
        // Word labels are `feature:bin`, so the feature name must not
        // contain the separator.
        if self.name.contains(':') {
            return Err(CorpusError::SpecInvalid(format!(
                "feature name `{}` contains ':'",
                self.name
            )));
        }
        match self.kind {
            FeatureKind::Continuous => {
                if self.bins < 2 {
                    return Err(CorpusError::SpecInvalid(format!(
                        "feature `{}`: bins must be >= 2",
                        self.name
                    )));
                }
            }
            FeatureKind::Categorical => {
                if self.categories.is_empty() {
                    return Err(CorpusError::SpecInvalid(format!(
                        "feature `{}`: categories must be non-empty",
                        self.name
                    )));
                }
                let mut seen = std::collections::HashSet::new();
                for c in &self.categories {
                    if !seen.insert(c) {
                        return Err(CorpusError::SpecInvalid(format!(
                            "feature `{}`: duplicate category `{c}`",
                            self.name
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Parses a feature-spec JSON list and validates every entry.
pub fn load_feature_specs(json: &str) -> Result<Vec<FeatureSpec>, CorpusError> {
    let specs: Vec<FeatureSpec> = serde_json::from_str(json)?;
    for s in &specs {
        s.validate()?;
    }
    Ok(specs)
}

pub const MISSING_LABEL: &str = "missing";
pub const OTHER_LABEL: &str = "other";

/// The discretized word dictionary: one word per (feature, bin) and
/// (feature, category), plus one `missing` word per feature.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    words: Vec<String>,
    bin_edges: BTreeMap<String, Vec<f64>>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabularyRepr {
    words: Vec<String>,
    bin_edges: BTreeMap<String, Vec<f64>>,
}

impl Vocabulary {
    pub fn new(
        words: Vec<String>,
        bin_edges: BTreeMap<String, Vec<f64>>,
    ) -> Result<Self, CorpusError> {
        let mut index = HashMap::with_capacity(words.len());
        for (u, w) in words.iter().enumerate() {
            if w.split_once(':').is_none() {
                return Err(CorpusError::CorpusInvalid(format!(
                    "word `{w}` is not of the form feature:bin"
                )));
            }
            if index.insert(w.clone(), u).is_some() {
                return Err(CorpusError::CorpusInvalid(format!("duplicate word `{w}`")));
            }
        }
        if words.is_empty() {
            return Err(CorpusError::CorpusInvalid("empty vocabulary".to_string()));
        }
        for (f, edges) in &bin_edges {
            if !edges.windows(2).all(|w| w[0] < w[1]) {
                return Err(CorpusError::CorpusInvalid(format!(
                    "bin edges for `{f}` are not strictly increasing"
                )));
            }
        }
        Ok(Self {
            words,
            bin_edges,
            index,
        })
    }

    pub fn size(&self) -> usize {
        self.words.len()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn bin_edges(&self) -> &BTreeMap<String, Vec<f64>> {
        &self.bin_edges
    }

    pub fn word_index(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    /// Feature name a word belongs to (the part before the first `:`).
    pub fn word_feature(&self, u: usize) -> &str {
        self.words[u].split_once(':').map(|(f, _)| f).unwrap_or("")
    }

    /// Distinct feature names in word order.
    pub fn features(&self) -> Vec<String> {
        let mut seen = std::collections::HashSet::new();
        let mut out = Vec::new();
        for u in 0..self.words.len() {
            let f = self.word_feature(u);
            if seen.insert(f.to_string()) {
                out.push(f.to_string());
            }
        }
        out
    }

    /// Bin index for a continuous value: the number of edges strictly below
    /// it, so a value equal to an edge falls in the lower bin.
    pub fn bin_of(&self, feature: &str, value: f64) -> Option<usize> {
        let edges = self.bin_edges.get(feature)?;
        Some(edges.iter().filter(|&&e| e < value).count())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&VocabularyRepr {
            words: self.words.clone(),
            bin_edges: self.bin_edges.clone(),
        })
        .expect("vocabulary serializes")
    }

    pub fn from_json(json: &str) -> Result<Self, CorpusError> {
        let repr: VocabularyRepr = serde_json::from_str(json)?;
        Self::new(repr.words, repr.bin_edges)
    }

    /// SHA-256 over the canonical JSON form, used to chain downstream
    /// artifacts back to the dictionary they were built with.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

/// Raw tabular rows: one or more readings per subject, identified by `id`,
/// with shared `time`/`event` labels. Cells are kept as text and parsed
/// against feature specs.
#[derive(Debug, Clone)]
pub struct RawTable {
    pub ids: Vec<String>,
    pub times: Vec<f64>,
    pub events: Vec<u8>,
    pub feature_names: Vec<String>,
    /// cells[row][feature]; empty string means missing.
    pub cells: Vec<Vec<String>>,
}

fn is_missing(cell: &str) -> bool {
    let t = cell.trim();
    t.is_empty() || t.eq_ignore_ascii_case("na") || t.eq_ignore_ascii_case("nan")
}

impl RawTable {
    /// Reads a CSV with header columns `id`, `time`, `event`; every other
    /// column is a feature. Row numbers in errors count the header as row 1.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self, CorpusError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let find = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| CorpusError::MissingColumn(name.to_string()))
        };
        let id_col = find("id")?;
        let time_col = find("time")?;
        let event_col = find("event")?;
        let feature_cols: Vec<usize> = (0..headers.len())
            .filter(|&c| c != id_col && c != time_col && c != event_col)
            .collect();
        let feature_names: Vec<String> =
            feature_cols.iter().map(|&c| headers[c].to_string()).collect();

        let mut table = RawTable {
            ids: Vec::new(),
            times: Vec::new(),
            events: Vec::new(),
            feature_names,
            cells: Vec::new(),
        };
        for (i, record) in rdr.records().enumerate() {
            let row = i + 2; // header is row 1
            let record = record?;
            let get = |c: usize| record.get(c).unwrap_or("").to_string();
            let time: f64 = get(time_col).trim().parse().map_err(|_| CorpusError::Row {
                row,
                detail: format!("cannot parse time `{}`", get(time_col)),
            })?;
            let event: u8 = get(event_col).trim().parse().map_err(|_| CorpusError::Row {
                row,
                detail: format!("cannot parse event `{}`", get(event_col)),
            })?;
            table.ids.push(get(id_col));
            table.times.push(time);
            table.events.push(event);
            table.cells.push(feature_cols.iter().map(|&c| get(c)).collect());
        }
        Ok(table)
    }

    pub fn from_csv_path(path: &Path) -> Result<Self, CorpusError> {
        Self::from_csv_reader(std::fs::File::open(path)?)
    }

    pub fn n_rows(&self) -> usize {
        self.ids.len()
    }

    fn feature_col(&self, name: &str) -> Result<usize, CorpusError> {
        self.feature_names
            .iter()
            .position(|f| f == name)
            .ok_or_else(|| CorpusError::UnknownFeature(name.to_string()))
    }

    /// View of the table restricted to the given rows (used to build
    /// vocabularies from training rows only).
    pub fn subset(&self, rows: &[usize]) -> RawTable {
        RawTable {
            ids: rows.iter().map(|&r| self.ids[r].clone()).collect(),
            times: rows.iter().map(|&r| self.times[r]).collect(),
            events: rows.iter().map(|&r| self.events[r]).collect(),
            feature_names: self.feature_names.clone(),
            cells: rows.iter().map(|&r| self.cells[r].clone()).collect(),
        }
    }
}

/// Quantile at fraction `q` of sorted values, linear interpolation between
/// order statistics.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

/// Builds the word dictionary from the given rows. Continuous features are
/// cut at empirical quantiles (`bins = 5` gives quintiles); every feature
/// gets a trailing `missing` word.
pub fn build_vocabulary(
    table: &RawTable,
    specs: &[FeatureSpec],
) -> Result<Vocabulary, CorpusError> {
    let mut names = std::collections::HashSet::new();
    for s in specs {
        s.validate()?;
        if !names.insert(s.name.clone()) {
            return Err(CorpusError::SpecInvalid(format!(
                "duplicate feature `{}`",
                s.name
            )));
        }
    }
    let mut words = Vec::new();
    let mut bin_edges = BTreeMap::new();

    for spec in specs {
        let col = table.feature_col(&spec.name)?;
        match spec.kind {
            FeatureKind::Continuous => {
                let mut values = Vec::new();
                for (r, row) in table.cells.iter().enumerate() {
                    let cell = &row[col];
                    if is_missing(cell) {
                        continue;
                    }
                    let v: f64 = cell.trim().parse().map_err(|_| CorpusError::Row {
                        row: r + 2,
                        detail: format!(
                            "cannot parse `{cell}` as a number for feature `{}`",
                            spec.name
                        ),
                    })?;
                    if v.is_finite() {
                        values.push(v);
                    }
                }
                let mut distinct = values.clone();
                distinct.sort_by(f64::total_cmp);
                distinct.dedup();
                if distinct.len() < spec.bins {
                    return Err(CorpusError::DegenerateBinning {
                        feature: spec.name.clone(),
                        distinct: distinct.len(),
                        bins: spec.bins,
                    });
                }
                values.sort_by(f64::total_cmp);
                let edges: Vec<f64> = (1..spec.bins)
                    .map(|b| quantile_sorted(&values, b as f64 / spec.bins as f64))
                    .collect();
                if !edges.windows(2).all(|w| w[0] < w[1]) {
                    return Err(CorpusError::DegenerateBinning {
                        feature: spec.name.clone(),
                        distinct: distinct.len(),
                        bins: spec.bins,
                    });
                }
                for b in 0..spec.bins {
                    words.push(format!("{}:q{}", spec.name, b + 1));
                }
                words.push(format!("{}:{MISSING_LABEL}", spec.name));
                bin_edges.insert(spec.name.clone(), edges);
            }
            FeatureKind::Categorical => {
                for (r, row) in table.cells.iter().enumerate() {
                    let cell = row[col].trim();
                    if is_missing(cell) {
                        continue;
                    }
                    if !spec.categories.iter().any(|c| c == cell) && !spec.allow_other {
                        return Err(CorpusError::Row {
                            row: r + 2,
                            detail: CorpusError::UnknownCategory {
                                feature: spec.name.clone(),
                                value: cell.to_string(),
                            }
                            .to_string(),
                        });
                    }
                }
                for c in &spec.categories {
                    words.push(format!("{}:{c}", spec.name));
                }
                if spec.allow_other {
                    words.push(format!("{}:{OTHER_LABEL}", spec.name));
                }
                words.push(format!("{}:{MISSING_LABEL}", spec.name));
            }
        }
    }
    Vocabulary::new(words, bin_edges)
}

/// Bag-of-words survival corpus: counts `X`, observed times `Y`, event
/// indicators `delta`, and the hash of the vocabulary the counts refer to.
#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalCorpus {
    pub n: usize,
    pub d: usize,
    counts: Vec<u32>,
    pub times: Vec<f64>,
    pub events: Vec<u8>,
    pub subject_ids: Vec<String>,
    pub vocab_hash: String,
}

#[derive(Serialize, Deserialize)]
struct CorpusRepr {
    n: usize,
    d: usize,
    vocab_hash: String,
    subject_ids: Vec<String>,
    times: Vec<f64>,
    events: Vec<u8>,
    /// Sparse counts as (subject, word, count) triplets in row-major order.
    triplets: Vec<(usize, usize, u32)>,
}

impl SurvivalCorpus {
    pub fn from_parts(
        counts: Vec<u32>,
        times: Vec<f64>,
        events: Vec<u8>,
        subject_ids: Vec<String>,
        d: usize,
        vocab_hash: String,
    ) -> Result<Self, CorpusError> {
        let n = times.len();
        if counts.len() != n * d || events.len() != n || subject_ids.len() != n {
            return Err(CorpusError::CorpusInvalid(
                "inconsistent corpus dimensions".to_string(),
            ));
        }
        let corpus = Self {
            n,
            d,
            counts,
            times,
            events,
            subject_ids,
            vocab_hash,
        };
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        for i in 0..self.n {
            let id = &self.subject_ids[i];
            if !self.times[i].is_finite() || self.times[i] <= 0.0 {
                return Err(CorpusError::BadTime {
                    id: id.clone(),
                    time: self.times[i],
                });
            }
            if self.events[i] > 1 {
                return Err(CorpusError::BadEvent {
                    id: id.clone(),
                    event: self.events[i],
                });
            }
            if self.row_total(i) == 0 {
                return Err(CorpusError::EmptyRow { id: id.clone() });
            }
        }
        Ok(())
    }

    pub fn count(&self, i: usize, u: usize) -> u32 {
        self.counts[i * self.d + u]
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.counts[i * self.d..(i + 1) * self.d]
    }

    /// Word total `v_i` for one subject.
    pub fn row_total(&self, i: usize) -> u64 {
        self.row(i).iter().map(|&c| c as u64).sum()
    }

    pub fn n_events(&self) -> usize {
        self.events.iter().filter(|&&e| e == 1).count()
    }

    /// A new corpus containing only the selected subjects, in the given order.
    pub fn select(&self, idx: &[usize]) -> SurvivalCorpus {
        let mut counts = Vec::with_capacity(idx.len() * self.d);
        for &i in idx {
            counts.extend_from_slice(self.row(i));
        }
        SurvivalCorpus {
            n: idx.len(),
            d: self.d,
            counts,
            times: idx.iter().map(|&i| self.times[i]).collect(),
            events: idx.iter().map(|&i| self.events[i]).collect(),
            subject_ids: idx.iter().map(|&i| self.subject_ids[i].clone()).collect(),
            vocab_hash: self.vocab_hash.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut triplets = Vec::new();
        for i in 0..self.n {
            for u in 0..self.d {
                let c = self.count(i, u);
                if c > 0 {
                    triplets.push((i, u, c));
                }
            }
        }
        serde_json::to_string(&CorpusRepr {
            n: self.n,
            d: self.d,
            vocab_hash: self.vocab_hash.clone(),
            subject_ids: self.subject_ids.clone(),
            times: self.times.clone(),
            events: self.events.clone(),
            triplets,
        })
        .expect("corpus serializes")
    }

    pub fn from_json(json: &str) -> Result<Self, CorpusError> {
        let repr: CorpusRepr = serde_json::from_str(json)?;
        let mut counts = vec![0u32; repr.n * repr.d];
        for (i, u, c) in repr.triplets {
            if i >= repr.n || u >= repr.d {
                return Err(CorpusError::CorpusInvalid(format!(
                    "triplet ({i}, {u}) out of bounds"
                )));
            }
            counts[i * repr.d + u] = c;
        }
        Self::from_parts(
            counts,
            repr.times,
            repr.events,
            repr.subject_ids,
            repr.d,
            repr.vocab_hash,
        )
    }
}

/// Counts each subject's words against the vocabulary. Rows sharing an `id`
/// are readings of one subject and are summed; their time/event labels must
/// agree.
pub fn encode_counts(
    table: &RawTable,
    vocab: &Vocabulary,
) -> Result<SurvivalCorpus, CorpusError> {
    let d = vocab.size();
    let features = vocab.features();
    let cols: Vec<usize> = features
        .iter()
        .map(|f| table.feature_col(f))
        .collect::<Result<_, _>>()?;

    let mut order: Vec<String> = Vec::new();
    let mut subject_of: HashMap<String, usize> = HashMap::new();
    let mut labels: Vec<(f64, u8)> = Vec::new();
    let mut counts: Vec<u32> = Vec::new();

    for (r, row) in table.cells.iter().enumerate() {
        let id = &table.ids[r];
        let (time, event) = (table.times[r], table.events[r]);
        if !time.is_finite() || time <= 0.0 {
            return Err(CorpusError::BadTime {
                id: id.clone(),
                time,
            });
        }
        if event > 1 {
            return Err(CorpusError::BadEvent {
                id: id.clone(),
                event,
            });
        }
        let s = match subject_of.get(id) {
            Some(&s) => {
                if labels[s] != (time, event) {
                    return Err(CorpusError::InconsistentLabel { id: id.clone() });
                }
                s
            }
            None => {
                let s = order.len();
                subject_of.insert(id.clone(), s);
                order.push(id.clone());
                labels.push((time, event));
                counts.resize(counts.len() + d, 0);
                s
            }
        };
        for (f, spec_name) in features.iter().enumerate() {
            let cell = row[cols[f]].trim();
            let label = if is_missing(cell) {
                format!("{spec_name}:{MISSING_LABEL}")
            } else if vocab.bin_edges().contains_key(spec_name) {
                let v: f64 = cell.parse().map_err(|_| CorpusError::Row {
                    row: r + 2,
                    detail: format!("cannot parse `{cell}` as a number for `{spec_name}`"),
                })?;
                if !v.is_finite() {
                    format!("{spec_name}:{MISSING_LABEL}")
                } else {
                    let b = vocab.bin_of(spec_name, v).expect("edges present");
                    format!("{spec_name}:q{}", b + 1)
                }
            } else {
                let direct = format!("{spec_name}:{cell}");
                if vocab.word_index(&direct).is_some() {
                    direct
                } else if vocab
                    .word_index(&format!("{spec_name}:{OTHER_LABEL}"))
                    .is_some()
                {
                    format!("{spec_name}:{OTHER_LABEL}")
                } else {
                    return Err(CorpusError::UnknownCategory {
                        feature: spec_name.clone(),
                        value: cell.to_string(),
                    });
                }
            };
            let u = vocab
                .word_index(&label)
                .ok_or_else(|| CorpusError::CorpusInvalid(format!("word `{label}` missing")))?;
            counts[s * d + u] += 1;
        }
    }

    let times = labels.iter().map(|&(t, _)| t).collect();
    let events = labels.iter().map(|&(_, e)| e).collect();
    SurvivalCorpus::from_parts(counts, times, events, order, d, vocab.hash())
}

/// Row-normalized counts: `xbar[i][u] = X[i][u] / v_i`, flattened row-major.
pub fn normalize_counts(corpus: &SurvivalCorpus) -> Result<Vec<f64>, CorpusError> {
    let mut out = vec![0.0; corpus.n * corpus.d];
    for i in 0..corpus.n {
        let total = corpus.row_total(i);
        if total == 0 {
            return Err(CorpusError::ZeroCountRow(i));
        }
        let inv = 1.0 / total as f64;
        for u in 0..corpus.d {
            out[i * corpus.d + u] = corpus.count(i, u) as f64 * inv;
        }
    }
    Ok(out)
}

/// Disjoint train/test indices, with optional cross-validation folds over the
/// training indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndex {
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    #[serde(default)]
    pub folds: Vec<Vec<usize>>,
}

impl SplitIndex {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("split serializes")
    }

    pub fn from_json(json: &str) -> Result<Self, CorpusError> {
        Ok(serde_json::from_str(json)?)
    }
}

/// Deterministic shuffled train/test split with optional folds. Fold sizes
/// differ by at most one. `cv_folds = 0` means no folds.
pub fn split(
    corpus: &SurvivalCorpus,
    test_fraction: f64,
    cv_folds: usize,
    seed: u64,
) -> Result<SplitIndex, CorpusError> {
    split_n(corpus.n, test_fraction, cv_folds, seed)
}

/// Deals `0..n` into `folds` shuffled parts whose sizes differ by at most
/// one. The same `(n, folds, seed)` always yields the same assignment.
pub fn fold_assignments(
    n: usize,
    folds: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>, CorpusError> {
    if folds < 2 {
        return Err(CorpusError::BadConfig("folds must be >= 2".to_string()));
    }
    if n < folds {
        return Err(CorpusError::SplitTooSmall { n, folds });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let base = n / folds;
    let extra = n % folds;
    let mut out = Vec::with_capacity(folds);
    let mut start = 0;
    for f in 0..folds {
        let size = base + usize::from(f < extra);
        let mut fold: Vec<usize> = perm[start..start + size].to_vec();
        fold.sort_unstable();
        out.push(fold);
        start += size;
    }
    Ok(out)
}

pub fn split_n(
    n: usize,
    test_fraction: f64,
    cv_folds: usize,
    seed: u64,
) -> Result<SplitIndex, CorpusError> {
    if !(0.0..1.0).contains(&test_fraction) || test_fraction == 0.0 {
        return Err(CorpusError::BadConfig(format!(
            "test_fraction {test_fraction} not in (0, 1)"
        )));
    }
    if cv_folds == 1 {
        return Err(CorpusError::BadConfig(
            "cv_folds must be 0 or >= 2".to_string(),
        ));
    }
    if n < 2 {
        return Err(CorpusError::BadConfig(format!("n={n} too small to split")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
    let mut test_idx: Vec<usize> = perm[..n_test].to_vec();
    let train_perm: Vec<usize> = perm[n_test..].to_vec();
    let mut train_idx = train_perm.clone();
    test_idx.sort_unstable();
    train_idx.sort_unstable();

    let mut folds = Vec::new();
    if cv_folds >= 2 {
        let m = train_perm.len();
        if m < cv_folds {
            return Err(CorpusError::SplitTooSmall {
                n: m,
                folds: cv_folds,
            });
        }
        let base = m / cv_folds;
        let extra = m % cv_folds;
        let mut start = 0;
        for f in 0..cv_folds {
            let size = base + usize::from(f < extra);
            let mut fold: Vec<usize> = train_perm[start..start + size].to_vec();
            fold.sort_unstable();
            folds.push(fold);
            start += size;
        }
    }
    Ok(SplitIndex {
        train_idx,
        test_idx,
        folds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table_from_csv(csv: &str) -> RawTable {
        RawTable::from_csv_reader(csv.as_bytes()).unwrap()
    }

    fn one_feature_table(values: &[f64]) -> RawTable {
        let mut s = String::from("id,time,event,f\n");
        for (i, v) in values.iter().enumerate() {
            s.push_str(&format!("s{i},1.0,1,{v}\n"));
        }
        table_from_csv(&s)
    }

    #[test]
    fn quintile_edges_for_one_to_hundred() {
        let values: Vec<f64> = (1..=100).map(|v| v as f64).collect();
        let table = one_feature_table(&values);
        let vocab = build_vocabulary(&table, &[FeatureSpec::continuous("f", 5)]).unwrap();
        // Sorted 1..100: quantiles at 0.2/0.4/0.6/0.8 interpolate between
        // order statistics.
        let expect = [20.8, 40.6, 60.4, 80.2];
        let edges = &vocab.bin_edges()["f"];
        assert_eq!(edges.len(), 4);
        for (e, want) in edges.iter().zip(expect) {
            assert!((e - want).abs() < 1e-12, "edge {e} vs {want}");
        }
        // 5 bins + 1 missing word.
        assert_eq!(vocab.size(), 6);
        assert_eq!(vocab.words()[0], "f:q1");
        assert_eq!(vocab.words()[5], "f:missing");
    }

    #[test]
    fn categorical_vocab_enumerates_categories() {
        let table = table_from_csv("id,time,event,g\na,1,1,A\nb,2,0,B\n");
        let vocab =
            build_vocabulary(&table, &[FeatureSpec::categorical("g", &["A", "B"])]).unwrap();
        assert_eq!(
            vocab.words(),
            &["g:A".to_string(), "g:B".to_string(), "g:missing".to_string()]
        );
    }

    #[test]
    fn constant_feature_is_degenerate() {
        let table = one_feature_table(&[3.0; 20]);
        match build_vocabulary(&table, &[FeatureSpec::continuous("f", 5)]) {
            Err(CorpusError::DegenerateBinning { feature, .. }) => assert_eq!(feature, "f"),
            other => panic!("expected degenerate binning, got {other:?}"),
        }
    }

    #[test]
    fn unknown_category_rejected_without_other() {
        let table = table_from_csv("id,time,event,g\na,1,1,A\nb,2,0,C\n");
        let err = build_vocabulary(&table, &[FeatureSpec::categorical("g", &["A", "B"])])
            .unwrap_err();
        assert!(err.to_string().contains("unknown category"), "{err}");
        let mut spec = FeatureSpec::categorical("g", &["A", "B"]);
        spec.allow_other = true;
        let vocab = build_vocabulary(&table, &[spec]).unwrap();
        assert!(vocab.word_index("g:other").is_some());
    }

    #[test]
    fn ties_fall_into_lower_bin() {
        let values: Vec<f64> = (1..=100).map(|v| v as f64).collect();
        let table = one_feature_table(&values);
        let vocab = build_vocabulary(&table, &[FeatureSpec::continuous("f", 5)]).unwrap();
        let edge = vocab.bin_edges()["f"][0];
        assert_eq!(vocab.bin_of("f", edge), Some(0));
        assert_eq!(vocab.bin_of("f", edge + 1e-9), Some(1));
    }

    #[test]
    fn every_training_value_maps_to_one_bin() {
        let values: Vec<f64> = (0..57).map(|v| (v as f64 * 0.37).sin() * 10.0).collect();
        let table = one_feature_table(&values);
        let vocab = build_vocabulary(&table, &[FeatureSpec::continuous("f", 5)]).unwrap();
        for v in values {
            let b = vocab.bin_of("f", v).unwrap();
            assert!(b < 5);
        }
    }

    #[test]
    fn encode_single_reading_bottom_quintile() {
        let values: Vec<f64> = (1..=100).map(|v| v as f64).collect();
        let table = one_feature_table(&values);
        let vocab = build_vocabulary(&table, &[FeatureSpec::continuous("f", 5)]).unwrap();
        let one = table_from_csv("id,time,event,f\nx,1.0,1,5\n");
        let corpus = encode_counts(&one, &vocab).unwrap();
        assert_eq!(corpus.n, 1);
        assert_eq!(corpus.count(0, vocab.word_index("f:q1").unwrap()), 1);
        assert_eq!(corpus.row_total(0), 1);
    }

    #[test]
    fn encode_sums_readings_per_subject() {
        let values: Vec<f64> = (1..=100).map(|v| v as f64).collect();
        let table = one_feature_table(&values);
        let vocab = build_vocabulary(&table, &[FeatureSpec::continuous("f", 5)]).unwrap();
        // 3 readings: 2 in q1 (values <= 20.8), 1 in q3 (40.6 < v <= 60.4).
        let multi = table_from_csv("id,time,event,f\nx,1.0,1,5\nx,1.0,1,10\nx,1.0,1,50\n");
        let corpus = encode_counts(&multi, &vocab).unwrap();
        assert_eq!(corpus.n, 1);
        let row = corpus.row(0);
        assert_eq!(row[..5], [2, 0, 1, 0, 0]);
    }

    #[test]
    fn encode_missing_goes_to_missing_word() {
        let values: Vec<f64> = (1..=100).map(|v| v as f64).collect();
        let table = one_feature_table(&values);
        let vocab = build_vocabulary(&table, &[FeatureSpec::continuous("f", 5)]).unwrap();
        let missing = table_from_csv("id,time,event,f\nx,1.0,1,\n");
        let corpus = encode_counts(&missing, &vocab).unwrap();
        assert_eq!(corpus.count(0, vocab.word_index("f:missing").unwrap()), 1);
    }

    #[test]
    fn encode_rejects_bad_labels() {
        let values: Vec<f64> = (1..=100).map(|v| v as f64).collect();
        let table = one_feature_table(&values);
        let vocab = build_vocabulary(&table, &[FeatureSpec::continuous("f", 5)]).unwrap();
        let bad_time = table_from_csv("id,time,event,f\nx,0.0,1,5\n");
        assert!(matches!(
            encode_counts(&bad_time, &vocab),
            Err(CorpusError::BadTime { .. })
        ));
        let bad_event = table_from_csv("id,time,event,f\nx,1.0,2,5\n");
        assert!(matches!(
            encode_counts(&bad_event, &vocab),
            Err(CorpusError::BadEvent { .. })
        ));
        let inconsistent = table_from_csv("id,time,event,f\nx,1.0,1,5\nx,2.0,1,6\n");
        assert!(matches!(
            encode_counts(&inconsistent, &vocab),
            Err(CorpusError::InconsistentLabel { .. })
        ));
    }

    #[test]
    fn normalize_basic_rows() {
        let corpus = SurvivalCorpus::from_parts(
            vec![2, 0, 1, 0],
            vec![1.0],
            vec![1],
            vec!["a".to_string()],
            4,
            String::new(),
        )
        .unwrap();
        let xbar = normalize_counts(&corpus).unwrap();
        assert_eq!(xbar, vec![2.0 / 3.0, 0.0, 1.0 / 3.0, 0.0]);
    }

    #[test]
    fn normalize_one_hot_is_identity() {
        let corpus = SurvivalCorpus::from_parts(
            vec![0, 1, 0],
            vec![1.0],
            vec![0],
            vec!["a".to_string()],
            3,
            String::new(),
        )
        .unwrap();
        assert_eq!(normalize_counts(&corpus).unwrap(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn normalize_uniform_counts() {
        let corpus = SurvivalCorpus::from_parts(
            vec![7, 7, 7, 7],
            vec![1.0],
            vec![1],
            vec!["a".to_string()],
            4,
            String::new(),
        )
        .unwrap();
        let xbar = normalize_counts(&corpus).unwrap();
        for v in &xbar {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn normalized_rows_sum_to_one() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 17;
        let d = 9;
        let counts: Vec<u32> = (0..n * d).map(|i| {
            if i % d == 0 {
                1 + rng.random_range(0..5)
            } else {
                rng.random_range(0..5)
            }
        }).collect();
        let corpus = SurvivalCorpus::from_parts(
            counts,
            vec![1.0; n],
            vec![1; n],
            (0..n).map(|i| format!("s{i}")).collect(),
            d,
            String::new(),
        )
        .unwrap();
        let xbar = normalize_counts(&corpus).unwrap();
        for i in 0..n {
            let s: f64 = xbar[i * d..(i + 1) * d].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn split_sizes_and_determinism() {
        let s1 = split_n(10, 0.2, 5, 42).unwrap();
        assert_eq!(s1.test_idx.len(), 2);
        assert_eq!(s1.train_idx.len(), 8);
        let sizes: Vec<usize> = s1.folds.iter().map(|f| f.len()).collect();
        assert_eq!(sizes, vec![2, 2, 2, 1, 1]);
        let s2 = split_n(10, 0.2, 5, 42).unwrap();
        assert_eq!(s1, s2);
        let s3 = split_n(10, 0.2, 5, 43).unwrap();
        assert_ne!(s1, s3);
    }

    #[test]
    fn split_partitions_exactly() {
        let s = split_n(23, 0.3, 4, 7).unwrap();
        let mut all: Vec<usize> = s.train_idx.iter().chain(&s.test_idx).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
        let mut from_folds: Vec<usize> = s.folds.iter().flatten().copied().collect();
        from_folds.sort_unstable();
        assert_eq!(from_folds, s.train_idx);
    }

    #[test]
    fn split_rejects_too_many_folds() {
        assert!(matches!(
            split_n(6, 0.5, 5, 0),
            Err(CorpusError::SplitTooSmall { .. })
        ));
    }

    #[test]
    fn corpus_json_roundtrip_is_exact() {
        let corpus = SurvivalCorpus::from_parts(
            vec![2, 0, 1, 0, 0, 3],
            vec![1.5, 0.25],
            vec![1, 0],
            vec!["a".to_string(), "b".to_string()],
            3,
            "abc123".to_string(),
        )
        .unwrap();
        let json = corpus.to_json();
        let back = SurvivalCorpus::from_json(&json).unwrap();
        assert_eq!(corpus, back);
        assert_eq!(json, back.to_json());
    }

    #[test]
    fn vocab_json_roundtrip_and_hash_stability() {
        let values: Vec<f64> = (1..=50).map(|v| v as f64).collect();
        let table = one_feature_table(&values);
        let vocab = build_vocabulary(&table, &[FeatureSpec::continuous("f", 5)]).unwrap();
        let back = Vocabulary::from_json(&vocab.to_json()).unwrap();
        assert_eq!(vocab.words(), back.words());
        assert_eq!(vocab.hash(), back.hash());
    }

    #[test]
    fn missing_event_column_is_schema_error() {
        let err = RawTable::from_csv_reader("id,time,f\na,1,2\n".as_bytes()).unwrap_err();
        assert!(matches!(err, CorpusError::MissingColumn(c) if c == "event"));
    }
}
