//! Interaction logs, k-core filtering, global temporal split and per-user
//! sequences.
//!
//! Item indices are dense in `1..=M`; index `0` is reserved for padding.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{self, BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Padding index shared by every sequence model.
pub const PAD_INDEX: usize = 0;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("train fraction must lie in (0, 1), got {0}")]
    InvalidFraction(f64),
    #[error("dataset is empty")]
    Empty,
    #[error("dataset cannot be split: all timestamps are identical")]
    Unsplittable,
    #[error("column `{0}` not found in header")]
    MissingColumn(String),
    #[error("{bad} of {total} rows are malformed (limit {limit_pct}%), first at line {first_line}: {first_reason}")]
    TooManyMalformed {
        bad: usize,
        total: usize,
        limit_pct: f64,
        first_line: usize,
        first_reason: String,
    },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// One raw user-item event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub user_id: String,
    pub item_id: String,
    pub timestamp: u64,
    pub rating: Option<f64>,
}

impl InteractionRecord {
    pub fn new(
        user_id: impl Into<String>,
        item_id: impl Into<String>,
        timestamp: u64,
        rating: Option<f64>,
    ) -> Result<Self, DataError> {
        let user_id = user_id.into();
        let item_id = item_id.into();
        if user_id.is_empty() {
            return Err(DataError::InvalidRecord("empty user_id".into()));
        }
        if item_id.is_empty() {
            return Err(DataError::InvalidRecord("empty item_id".into()));
        }
        if let Some(r) = rating {
            if !r.is_finite() {
                return Err(DataError::InvalidRecord(format!("non-finite rating {r}")));
            }
        }
        Ok(Self {
            user_id,
            item_id,
            timestamp,
            rating,
        })
    }
}

/// Textual item metadata. Every field is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ItemMeta {
    pub title: Option<String>,
    pub categories: Option<String>,
    pub description: Option<String>,
    pub genres: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetaField {
    Title,
    Categories,
    Description,
    Genres,
}

impl MetaField {
    pub fn as_str(self) -> &'static str {
        match self {
            MetaField::Title => "title",
            MetaField::Categories => "categories",
            MetaField::Description => "description",
            MetaField::Genres => "genres",
        }
    }
}

impl FromStr for MetaField {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "title" => Ok(MetaField::Title),
            "categories" | "category" => Ok(MetaField::Categories),
            "description" => Ok(MetaField::Description),
            "genres" | "genre" => Ok(MetaField::Genres),
            other => Err(format!("unknown metadata field `{other}`")),
        }
    }
}

impl fmt::Display for MetaField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl ItemMeta {
    pub fn field(&self, field: MetaField) -> Option<&str> {
        let v = match field {
            MetaField::Title => &self.title,
            MetaField::Categories => &self.categories,
            MetaField::Description => &self.description,
            MetaField::Genres => &self.genres,
        };
        v.as_deref().filter(|s| !s.trim().is_empty())
    }

    fn set(&mut self, field: MetaField, value: String) {
        let slot = match field {
            MetaField::Title => &mut self.title,
            MetaField::Categories => &mut self.categories,
            MetaField::Description => &mut self.description,
            MetaField::Genres => &mut self.genres,
        };
        *slot = if value.trim().is_empty() {
            None
        } else {
            Some(value)
        };
    }
}

/// Items, their metadata and the dense index bijection.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Catalog {
    /// `ids[i - 1]` is the item id of dense index `i`.
    ids: Vec<String>,
    metas: Vec<ItemMeta>,
    #[serde(skip)]
    lookup: HashMap<String, usize>,
    pub num_users: usize,
}

impl Catalog {
    /// Builds the catalog over every item referenced by `records`, indexed in
    /// lexicographic item-id order. Items without an entry in `metadata` get
    /// empty metadata.
    pub fn build(records: &[InteractionRecord], metadata: &HashMap<String, ItemMeta>) -> Self {
        let mut ids: Vec<String> = records.iter().map(|r| r.item_id.clone()).collect();
        ids.sort();
        ids.dedup();
        let mut users: Vec<&str> = records.iter().map(|r| r.user_id.as_str()).collect();
        users.sort_unstable();
        users.dedup();
        let metas = ids
            .iter()
            .map(|id| metadata.get(id).cloned().unwrap_or_default())
            .collect();
        let mut catalog = Self {
            ids,
            metas,
            lookup: HashMap::new(),
            num_users: users.len(),
        };
        catalog.reindex();
        catalog
    }

    /// Restores the lookup table after deserialization.
    pub fn reindex(&mut self) {
        self.lookup = self
            .ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i + 1))
            .collect();
    }

    pub fn num_items(&self) -> usize {
        self.ids.len()
    }

    pub fn index_of(&self, item_id: &str) -> Option<usize> {
        self.lookup.get(item_id).copied()
    }

    pub fn item_id(&self, index: usize) -> Option<&str> {
        if index == PAD_INDEX {
            return None;
        }
        self.ids.get(index - 1).map(String::as_str)
    }

    pub fn meta(&self, index: usize) -> Option<&ItemMeta> {
        if index == PAD_INDEX {
            return None;
        }
        self.metas.get(index - 1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &str, &ItemMeta)> {
        self.ids
            .iter()
            .zip(&self.metas)
            .enumerate()
            .map(|(i, (id, m))| (i + 1, id.as_str(), m))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitDataset {
    pub train: Vec<InteractionRecord>,
    pub test: Vec<InteractionRecord>,
    pub threshold: u64,
}

/// Ordered interaction history of one user, oldest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserSequence {
    pub user_id: String,
    pub items: Vec<usize>,
    pub timestamps: Vec<u64>,
    /// Parallel to `items`; all `None` for datasets without ratings.
    pub ratings: Vec<Option<f64>>,
}

impl UserSequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Iteratively removes users and items with fewer than `k` interactions until
/// no more removals happen. Surviving records keep their relative order.
pub fn k_core_filter(records: &[InteractionRecord], k: usize) -> Vec<InteractionRecord> {
    let mut current: Vec<InteractionRecord> = records.to_vec();
    if k <= 1 {
        return current;
    }
    loop {
        let mut user_counts: HashMap<&str, usize> = HashMap::new();
        let mut item_counts: HashMap<&str, usize> = HashMap::new();
        for r in &current {
            *user_counts.entry(&r.user_id).or_default() += 1;
            *item_counts.entry(&r.item_id).or_default() += 1;
        }
        let keep: Vec<bool> = current
            .iter()
            .map(|r| user_counts[r.user_id.as_str()] >= k && item_counts[r.item_id.as_str()] >= k)
            .collect();
        if keep.iter().all(|&b| b) {
            return current;
        }
        current = current
            .into_iter()
            .zip(keep)
            .filter_map(|(r, k)| k.then_some(r))
            .collect();
    }
}

/// Splits on a single global timestamp threshold. The threshold is the
/// timestamp at position `floor(train_fraction * n)` of the sorted
/// timestamps; records strictly before it are train, the rest test. If
/// that threshold would leave train empty the next distinct timestamp is
/// used instead.
pub fn temporal_split(
    records: &[InteractionRecord],
    train_fraction: f64,
) -> Result<SplitDataset, DataError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DataError::InvalidFraction(train_fraction));
    }
    if records.is_empty() {
        return Err(DataError::Empty);
    }
    let mut ts: Vec<u64> = records.iter().map(|r| r.timestamp).collect();
    ts.sort_unstable();
    let n = ts.len();
    let cut = ((train_fraction * n as f64 + 1e-9).floor() as usize).min(n - 1);
    let mut threshold = ts[cut];
    if threshold == ts[0] {
        threshold = *ts
            .iter()
            .find(|&&t| t > ts[0])
            .ok_or(DataError::Unsplittable)?;
    }
    let (train, test) = records
        .iter()
        .cloned()
        .partition(|r| r.timestamp < threshold);
    Ok(SplitDataset {
        train,
        test,
        threshold,
    })
}

/// Validation split carved from the training records by a second global
/// temporal split at `fraction` (0.9 by default in the experiment config).
pub fn validation_split(
    train: &[InteractionRecord],
    fraction: f64,
) -> Result<SplitDataset, DataError> {
    temporal_split(train, fraction)
}

/// One sequence per user present in `train`, sorted by user id. Each keeps
/// the most recent `max_len` interactions in chronological order; equal
/// timestamps keep their input order. Records whose item is not in the
/// catalog are skipped.
pub fn build_sequences(
    train: &[InteractionRecord],
    catalog: &Catalog,
    max_len: usize,
) -> Vec<UserSequence> {
    let mut by_user: BTreeMap<&str, Vec<&InteractionRecord>> = BTreeMap::new();
    for r in train {
        if catalog.index_of(&r.item_id).is_some() {
            by_user.entry(&r.user_id).or_default().push(r);
        }
    }
    by_user
        .into_iter()
        .map(|(user, mut events)| {
            events.sort_by_key(|r| r.timestamp);
            let start = events.len().saturating_sub(max_len);
            let events = &events[start..];
            UserSequence {
                user_id: user.to_string(),
                items: events
                    .iter()
                    .map(|r| catalog.index_of(&r.item_id).unwrap_or(PAD_INDEX))
                    .collect(),
                timestamps: events.iter().map(|r| r.timestamp).collect(),
                ratings: events.iter().map(|r| r.rating).collect(),
            }
        })
        .collect()
}

/// Dense item indices per user, in chronological order, without truncation.
pub fn user_item_sets(
    records: &[InteractionRecord],
    catalog: &Catalog,
) -> BTreeMap<String, Vec<usize>> {
    let mut out: BTreeMap<String, Vec<(u64, usize)>> = BTreeMap::new();
    for r in records {
        if let Some(idx) = catalog.index_of(&r.item_id) {
            out.entry(r.user_id.clone())
                .or_default()
                .push((r.timestamp, idx));
        }
    }
    out.into_iter()
        .map(|(u, mut v)| {
            v.sort_by_key(|&(t, _)| t);
            (u, v.into_iter().map(|(_, i)| i).collect())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub num_users: usize,
    pub num_items: usize,
    pub num_interactions: usize,
    pub avg_length: f64,
    pub density: f64,
}

impl DatasetStats {
    pub fn from_counts(num_users: usize, num_items: usize, num_interactions: usize) -> Self {
        let users = num_users.max(1) as f64;
        let items = num_items.max(1) as f64;
        Self {
            num_users,
            num_items,
            num_interactions,
            avg_length: num_interactions as f64 / users,
            density: num_interactions as f64 / (users * items),
        }
    }
}

pub fn dataset_stats(records: &[InteractionRecord]) -> DatasetStats {
    let mut users: Vec<&str> = records.iter().map(|r| r.user_id.as_str()).collect();
    users.sort_unstable();
    users.dedup();
    let mut items: Vec<&str> = records.iter().map(|r| r.item_id.as_str()).collect();
    items.sort_unstable();
    items.dedup();
    DatasetStats::from_counts(users.len(), items.len(), records.len())
}

/// Column layout of a delimiter-separated interaction log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogFormat {
    pub delimiter: char,
    pub has_header: bool,
    pub user_column: String,
    pub item_column: String,
    pub timestamp_column: String,
    pub rating_column: Option<String>,
}

impl Default for LogFormat {
    fn default() -> Self {
        Self {
            delimiter: '\t',
            has_header: true,
            user_column: "user_id".into(),
            item_column: "item_id".into(),
            timestamp_column: "timestamp".into(),
            rating_column: Some("rating".into()),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParsedLog {
    pub records: Vec<InteractionRecord>,
    /// `(1-based line number, reason)` for every rejected row.
    pub malformed: Vec<(usize, String)>,
    pub total_rows: usize,
}

impl ParsedLog {
    /// Fails when more than `limit` (a fraction) of the rows were malformed.
    pub fn check_malformed(&self, limit: f64) -> Result<(), DataError> {
        let bad = self.malformed.len();
        if bad > 0 && bad as f64 > limit * self.total_rows as f64 {
            let (first_line, first_reason) = self.malformed[0].clone();
            return Err(DataError::TooManyMalformed {
                bad,
                total: self.total_rows,
                limit_pct: limit * 100.0,
                first_line,
                first_reason,
            });
        }
        Ok(())
    }
}

fn resolve_column(header: &[&str], name: &str) -> Result<usize, DataError> {
    header
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| DataError::MissingColumn(name.to_string()))
}

/// Parses an interaction log. Missing required columns are a hard error;
/// bad rows are collected in [`ParsedLog::malformed`].
pub fn read_interactions<R: BufRead>(
    reader: R,
    format: &LogFormat,
) -> Result<ParsedLog, DataError> {
    let mut lines = reader.lines().enumerate();
    let (user_col, item_col, ts_col, rating_col) = if format.has_header {
        let header = match lines.next() {
            Some((_, line)) => line?,
            None => return Ok(ParsedLog::default()),
        };
        let cols: Vec<&str> = header.split(format.delimiter).collect();
        let rating = match &format.rating_column {
            Some(name) => cols.iter().position(|h| h.trim() == name),
            None => None,
        };
        (
            resolve_column(&cols, &format.user_column)?,
            resolve_column(&cols, &format.item_column)?,
            resolve_column(&cols, &format.timestamp_column)?,
            rating,
        )
    } else {
        (0, 1, 2, format.rating_column.as_ref().map(|_| 3))
    };

    let mut out = ParsedLog::default();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.total_rows += 1;
        let lineno = i + 1;
        let fields: Vec<&str> = line.split(format.delimiter).collect();
        let get = |c: usize| fields.get(c).map(|s| s.trim());
        let parsed = (|| {
            let user = get(user_col).ok_or("missing user column")?;
            let item = get(item_col).ok_or("missing item column")?;
            let ts = get(ts_col)
                .ok_or("missing timestamp column")?
                .parse::<u64>()
                .map_err(|e| format!("bad timestamp: {e}"))?;
            let rating = match rating_col.and_then(get) {
                Some("") | None => None,
                Some(s) => Some(s.parse::<f64>().map_err(|e| format!("bad rating: {e}"))?),
            };
            InteractionRecord::new(user, item, ts, rating).map_err(|e| e.to_string())
        })();
        match parsed {
            Ok(r) => out.records.push(r),
            Err(reason) => out.malformed.push((lineno, reason.to_string())),
        }
    }
    Ok(out)
}

/// Parses an item metadata file: a header naming `item_id` plus any of the
/// [`MetaField`] columns. Unknown columns are ignored.
pub fn read_item_metadata<R: BufRead>(
    reader: R,
    delimiter: char,
) -> Result<HashMap<String, ItemMeta>, DataError> {
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(line) => line?,
        None => return Ok(HashMap::new()),
    };
    let cols: Vec<&str> = header.split(delimiter).collect();
    let id_col = resolve_column(&cols, "item_id")?;
    let fields: Vec<(usize, MetaField)> = cols
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.parse::<MetaField>().ok().map(|f| (i, f)))
        .collect();
    let mut out = HashMap::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(delimiter).collect();
        let id = parts.get(id_col).map(|s| s.trim()).unwrap_or("");
        if id.is_empty() {
            return Err(DataError::Parse {
                line: i + 2,
                reason: "empty item_id".into(),
            });
        }
        let mut meta = ItemMeta::default();
        for &(c, f) in &fields {
            if let Some(v) = parts.get(c) {
                meta.set(f, v.trim().to_string());
            }
        }
        out.insert(id.to_string(), meta);
    }
    Ok(out)
}

/// Writes records as a tab-separated log with a header, readable by
/// [`read_interactions`] with the default [`LogFormat`].
pub fn write_records<W: Write>(mut w: W, records: &[InteractionRecord]) -> io::Result<()> {
    writeln!(w, "user_id\titem_id\ttimestamp\trating")?;
    for r in records {
        match r.rating {
            Some(x) => writeln!(w, "{}\t{}\t{}\t{}", r.user_id, r.item_id, r.timestamp, x)?,
            None => writeln!(w, "{}\t{}\t{}\t", r.user_id, r.item_id, r.timestamp)?,
        }
    }
    Ok(())
}

fn join<T: fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// One user per line: `user_id<TAB>items<TAB>timestamps[<TAB>ratings]`,
/// lists comma-separated. The ratings column appears only when the user has
/// at least one rating; missing ratings are empty entries.
pub fn write_sequences<W: Write>(mut w: W, sequences: &[UserSequence]) -> io::Result<()> {
    for s in sequences {
        write!(
            w,
            "{}\t{}\t{}",
            s.user_id,
            join(&s.items),
            join(&s.timestamps)
        )?;
        if s.ratings.iter().any(Option::is_some) {
            let r: Vec<String> = s
                .ratings
                .iter()
                .map(|r| r.map(|x| x.to_string()).unwrap_or_default())
                .collect();
            write!(w, "\t{}", r.join(","))?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_sequences<R: BufRead>(reader: R) -> Result<Vec<UserSequence>, DataError> {
    fn list<T: FromStr>(s: &str, line: usize) -> Result<Vec<T>, DataError> {
        if s.is_empty() {
            return Ok(Vec::new());
        }
        s.split(',')
            .map(|x| {
                x.parse::<T>().map_err(|_| DataError::Parse {
                    line,
                    reason: format!("bad list entry `{x}`"),
                })
            })
            .collect()
    }
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let lineno = i + 1;
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() < 3 {
            return Err(DataError::Parse {
                line: lineno,
                reason: "expected at least 3 columns".into(),
            });
        }
        let items: Vec<usize> = list(parts[1], lineno)?;
        let timestamps: Vec<u64> = list(parts[2], lineno)?;
        let ratings = match parts.get(3) {
            Some(r) => r
                .split(',')
                .map(|x| {
                    if x.is_empty() {
                        Ok(None)
                    } else {
                        x.parse::<f64>().map(Some).map_err(|_| DataError::Parse {
                            line: lineno,
                            reason: format!("bad rating `{x}`"),
                        })
                    }
                })
                .collect::<Result<Vec<_>, _>>()?,
            None => vec![None; items.len()],
        };
        if items.len() != timestamps.len() || items.len() != ratings.len() {
            return Err(DataError::Parse {
                line: lineno,
                reason: "column lengths differ".into(),
            });
        }
        out.push(UserSequence {
            user_id: parts[0].to_string(),
            items,
            timestamps,
            ratings,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(u: &str, i: &str, t: u64) -> InteractionRecord {
        InteractionRecord::new(u, i, t, None).unwrap()
    }

    #[test]
    fn record_rejects_empty_ids() {
        assert!(InteractionRecord::new("", "i", 1, None).is_err());
        assert!(InteractionRecord::new("u", "", 1, None).is_err());
    }

    #[test]
    fn k_core_keeps_valid_input() {
        let mut records = Vec::new();
        for u in 0..5 {
            for i in 0..5 {
                records.push(rec(&format!("u{u}"), &format!("i{i}"), (u * 5 + i) as u64));
            }
        }
        assert_eq!(k_core_filter(&records, 5), records);
    }

    #[test]
    fn k_core_drops_short_user() {
        let records: Vec<_> = (0..3).map(|t| rec("u", &format!("i{t}"), t)).collect();
        assert!(k_core_filter(&records, 5).is_empty());
    }

    #[test]
    fn k_core_cascades() {
        // u0..u1 each rate i0,i1; u2 rates i0,i1,i2 but i2 has only one user.
        let records = vec![
            rec("u0", "i0", 0),
            rec("u0", "i1", 1),
            rec("u1", "i0", 2),
            rec("u1", "i1", 3),
            rec("u2", "i0", 4),
            rec("u2", "i2", 5),
        ];
        // k=2: i2 goes (1 user), then u2 has 1 interaction and goes.
        let out = k_core_filter(&records, 2);
        assert_eq!(out, records[..4].to_vec());
    }

    #[test]
    fn split_evenly_spaced() {
        let records: Vec<_> = (1..=10).map(|t| rec("u", &format!("i{t}"), t)).collect();
        let split = temporal_split(&records, 0.8).unwrap();
        let train: Vec<u64> = split.train.iter().map(|r| r.timestamp).collect();
        let test: Vec<u64> = split.test.iter().map(|r| r.timestamp).collect();
        assert_eq!(train, (1..=8).collect::<Vec<_>>());
        assert_eq!(test, vec![9, 10]);
        assert_eq!(split.threshold, 9);
    }

    #[test]
    fn split_rejects_constant_timestamps() {
        let records = vec![rec("a", "x", 5), rec("b", "y", 5)];
        assert!(matches!(
            temporal_split(&records, 0.8),
            Err(DataError::Unsplittable)
        ));
    }

    #[test]
    fn split_rejects_bad_fraction() {
        let records = vec![rec("a", "x", 1), rec("b", "y", 2)];
        assert!(temporal_split(&records, 1.0).is_err());
        assert!(temporal_split(&records, 0.0).is_err());
    }

    #[test]
    fn split_ties_go_to_test() {
        let records = vec![
            rec("a", "x", 1),
            rec("a", "y", 2),
            rec("b", "x", 3),
            rec("b", "y", 3),
            rec("c", "z", 3),
        ];
        let split = temporal_split(&records, 0.8).unwrap();
        assert_eq!(split.threshold, 3);
        assert_eq!(split.train.len(), 2);
        assert_eq!(split.test.len(), 3);
    }

    #[test]
    fn sequences_truncate_to_latest() {
        let records: Vec<_> = (0..60)
            .rev()
            .map(|t| rec("u", &format!("i{t:02}"), t))
            .collect();
        let catalog = Catalog::build(&records, &HashMap::new());
        let seqs = build_sequences(&records, &catalog, 50);
        assert_eq!(seqs.len(), 1);
        assert_eq!(seqs[0].timestamps, (10..60).collect::<Vec<_>>());
        let first = catalog.index_of("i10").unwrap();
        assert_eq!(seqs[0].items[0], first);
        assert!(seqs[0].items.iter().all(|&i| i != PAD_INDEX));
    }

    #[test]
    fn short_sequence_kept_in_order() {
        let records = vec![rec("u", "c", 30), rec("u", "a", 10), rec("u", "b", 20)];
        let catalog = Catalog::build(&records, &HashMap::new());
        let seqs = build_sequences(&records, &catalog, 50);
        assert_eq!(seqs[0].items, vec![1, 2, 3]);
        assert_eq!(seqs[0].timestamps, vec![10, 20, 30]);
    }

    #[test]
    fn stats_single_interaction() {
        let s = dataset_stats(&[rec("u", "i", 0)]);
        assert_eq!(s.avg_length, 1.0);
        assert_eq!(s.density, 1.0);
    }

    #[test]
    fn stats_from_published_counts() {
        let kion = DatasetStats::from_counts(16_797, 5_626, 287_698);
        assert!((kion.avg_length - 17.128).abs() < 5e-4);
        assert!((kion.density - 0.00304).abs() < 5e-6);
        let beauty = DatasetStats::from_counts(70_996, 39_116, 436_309);
        assert!((beauty.avg_length - 6.145).abs() < 1e-3);
    }

    #[test]
    fn catalog_is_a_bijection() {
        let records = vec![rec("u", "b", 1), rec("u", "a", 2), rec("v", "b", 3)];
        let catalog = Catalog::build(&records, &HashMap::new());
        assert_eq!(catalog.num_items(), 2);
        assert_eq!(catalog.num_users, 2);
        for (idx, id, _) in catalog.iter() {
            assert_eq!(catalog.index_of(id), Some(idx));
            assert_eq!(catalog.item_id(idx), Some(id));
        }
        assert_eq!(catalog.item_id(PAD_INDEX), None);
    }

    #[test]
    fn parse_reports_malformed_lines() {
        let text = "user_id\titem_id\ttimestamp\trating\nu\ti\t1\t4\nu\ti\tnope\t\nu\tj\t2\t\n";
        let parsed = read_interactions(text.as_bytes(), &LogFormat::default()).unwrap();
        assert_eq!(parsed.records.len(), 2);
        assert_eq!(parsed.total_rows, 3);
        assert_eq!(parsed.malformed[0].0, 3);
        assert!(parsed.check_malformed(0.01).is_err());
        assert!(parsed.check_malformed(0.5).is_ok());
    }

    #[test]
    fn parse_missing_column_names_it() {
        let text = "user_id\titem_id\ttime\nu\ti\t1\n";
        let err = read_interactions(text.as_bytes(), &LogFormat::default()).unwrap_err();
        assert!(matches!(err, DataError::MissingColumn(ref c) if c == "timestamp"));
    }

    #[test]
    fn metadata_parses_known_columns() {
        let text = "item_id\ttitle\tgenres\tyear\nm1\tHeat\tCrime|Drama\t1995\nm2\tUp\t\t2009\n";
        let meta = read_item_metadata(text.as_bytes(), '\t').unwrap();
        assert_eq!(meta["m1"].title.as_deref(), Some("Heat"));
        assert_eq!(meta["m1"].genres.as_deref(), Some("Crime|Drama"));
        assert_eq!(meta["m2"].genres, None);
    }

    #[test]
    fn sequence_file_round_trip() {
        let seqs = vec![
            UserSequence {
                user_id: "a".into(),
                items: vec![3, 1],
                timestamps: vec![5, 9],
                ratings: vec![Some(4.0), None],
            },
            UserSequence {
                user_id: "b".into(),
                items: vec![2],
                timestamps: vec![7],
                ratings: vec![None],
            },
        ];
        let mut buf = Vec::new();
        write_sequences(&mut buf, &seqs).unwrap();
        assert_eq!(
            String::from_utf8(buf.clone()).unwrap(),
            "a\t3,1\t5,9\t4,\nb\t2\t7\n"
        );
        assert_eq!(read_sequences(buf.as_slice()).unwrap(), seqs);
    }
}
