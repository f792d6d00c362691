//! Interaction logs, fixed-length sequence windows, leave-one-out splits and
//! label statistics.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Longest item window fed to the user tower.
pub const MAX_LEN: usize = 30;
/// Reserved id for padded context slots.
pub const PAD: u32 = u32::MAX;
/// Shortest user sequence that still yields train, validation and test labels.
pub const MIN_SEQ_LEN: usize = 3;

/// Per-user chronological item sequences over a dense item vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionLog {
    pub sequences: Vec<Vec<u32>>,
    pub num_items: usize,
}

impl InteractionLog {
    pub fn new(sequences: Vec<Vec<u32>>, num_items: usize) -> Result<Self> {
        for &id in sequences.iter().flatten() {
            if id as usize >= num_items {
                return Err(Error::IndexOutOfRange { id, num_items });
            }
        }
        Ok(Self {
            sequences,
            num_items,
        })
    }

    pub fn num_users(&self) -> usize {
        self.sequences.len()
    }

    pub fn num_interactions(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    /// Writes `user_id<TAB>item_id<TAB>position` rows.
    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (user, seq) in self.sequences.iter().enumerate() {
            for (pos, item) in seq.iter().enumerate() {
                writeln!(out, "{user}\t{item}\t{pos}")?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Supported raw interaction file layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogFormat {
    /// `user<TAB>item<TAB>position-or-timestamp`.
    Tsv,
    /// MovieLens `ratings.dat`: `user::item::rating::timestamp`.
    MovieLens,
    /// Amazon ratings-only CSV: `item,user,rating,timestamp`.
    AmazonCsv,
}

impl LogFormat {
    fn split<'a>(&self, line: &'a str) -> Vec<&'a str> {
        match self {
            LogFormat::Tsv => line.split('\t').collect(),
            LogFormat::MovieLens => line.split("::").collect(),
            LogFormat::AmazonCsv => line.split(',').collect(),
        }
    }

    /// Column indices of (user, item, order key).
    fn columns(&self) -> (usize, usize, usize) {
        match self {
            LogFormat::Tsv => (0, 1, 2),
            LogFormat::MovieLens => (0, 1, 3),
            LogFormat::AmazonCsv => (1, 0, 3),
        }
    }
}

/// A log ingested from disk together with its dense-to-raw id mappings.
#[derive(Debug, Clone, PartialEq)]
pub struct IngestedLog {
    pub log: InteractionLog,
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
}

impl IngestedLog {
    pub fn write_mappings(&self, users: &Path, items: &Path) -> Result<()> {
        write_mapping(users, &self.user_ids)?;
        write_mapping(items, &self.item_ids)
    }

    pub fn dense_item(&self, raw: &str) -> Option<u32> {
        self.item_ids
            .iter()
            .position(|r| r == raw)
            .map(|i| i as u32)
    }
}

fn write_mapping(path: &Path, raw: &[String]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (dense, raw) in raw.iter().enumerate() {
        writeln!(out, "{raw}\t{dense}")?;
    }
    out.flush()?;
    Ok(())
}

/// Orders raw ids numerically when every id is an unsigned integer, otherwise
/// lexicographically.
fn dense_order(raw: Vec<String>) -> Vec<String> {
    let mut raw = raw;
    if raw.iter().all(|r| r.parse::<u64>().is_ok()) {
        raw.sort_by_key(|r| r.parse::<u64>().unwrap());
    } else {
        raw.sort();
    }
    raw
}

pub fn ingest_tsv(path: &Path) -> Result<IngestedLog> {
    ingest(path, LogFormat::Tsv)
}

/// Reads an interaction file, sorts every user's rows by the order column
/// (stable, so equal keys keep file order) and densely re-indexes users and
/// items in ascending raw-id order.
pub fn ingest(path: &Path, format: LogFormat) -> Result<IngestedLog> {
    let text = std::fs::read_to_string(path)?;
    let (ucol, icol, kcol) = format.columns();
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line: line as u64,
        msg,
    };

    let mut rows: Vec<(String, String, f64)> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let cols = format.split(line);
        let needed = ucol.max(icol).max(kcol) + 1;
        if cols.len() < needed {
            return Err(parse_err(
                n + 1,
                format!("expected at least {needed} columns, found {}", cols.len()),
            ));
        }
        let item = cols[icol].trim();
        if format == LogFormat::Tsv && item.parse::<u64>().is_err() {
            return Err(parse_err(
                n + 1,
                format!("item id {item:?} is not an integer"),
            ));
        }
        let key: f64 = cols[kcol]
            .trim()
            .parse()
            .map_err(|_| parse_err(n + 1, format!("order key {:?} is not numeric", cols[kcol])))?;
        rows.push((cols[ucol].trim().to_string(), item.to_string(), key));
    }
    if rows.is_empty() {
        return Err(Error::EmptyInput(path.display().to_string()));
    }

    let mut users: Vec<String> = rows.iter().map(|r| r.0.clone()).collect();
    users.sort();
    users.dedup();
    let user_ids = dense_order(users);
    let mut items: Vec<String> = rows.iter().map(|r| r.1.clone()).collect();
    items.sort();
    items.dedup();
    let item_ids = dense_order(items);

    let user_index: HashMap<&str, usize> = user_ids
        .iter()
        .enumerate()
        .map(|(i, r)| (r.as_str(), i))
        .collect();
    let item_index: HashMap<&str, u32> = item_ids
        .iter()
        .enumerate()
        .map(|(i, r)| (r.as_str(), i as u32))
        .collect();

    let mut keyed: Vec<Vec<(f64, u32)>> = vec![Vec::new(); user_ids.len()];
    for (u, i, k) in &rows {
        keyed[user_index[u.as_str()]].push((*k, item_index[i.as_str()]));
    }
    let sequences = keyed
        .into_iter()
        .map(|mut seq| {
            seq.sort_by(|a, b| a.0.total_cmp(&b.0));
            seq.into_iter().map(|(_, item)| item).collect()
        })
        .collect();
    Ok(IngestedLog {
        log: InteractionLog::new(sequences, item_ids.len())?,
        user_ids,
        item_ids,
    })
}

/// A chunk of at most `max_len` consecutive interactions of one user.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub owner: u32,
    pub items: Vec<u32>,
}

/// Windows cut from an interaction log.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleSet {
    pub windows: Vec<Window>,
    pub num_items: usize,
    pub num_users: usize,
    pub max_len: usize,
    /// Users with fewer than three interactions.
    pub dropped_users: usize,
    /// Trailing chunks shorter than three interactions.
    pub dropped_chunks: usize,
    /// Sorted distinct items of each user's full history.
    pub histories: Vec<Vec<u32>>,
}

/// Splits every user sequence into consecutive, non-overlapping windows of
/// `max_len` items.
pub fn build_examples(log: &InteractionLog, max_len: usize) -> Result<ExampleSet> {
    if max_len < MIN_SEQ_LEN {
        return Err(Error::InvalidConfig(format!(
            "max_len {max_len} is shorter than {MIN_SEQ_LEN}"
        )));
    }
    let mut windows = Vec::new();
    let mut dropped_users = 0;
    let mut dropped_chunks = 0;
    for (owner, seq) in log.sequences.iter().enumerate() {
        if seq.len() < MIN_SEQ_LEN {
            dropped_users += 1;
            continue;
        }
        for chunk in seq.chunks(max_len) {
            if chunk.len() < MIN_SEQ_LEN {
                dropped_chunks += 1;
                continue;
            }
            windows.push(Window {
                owner: owner as u32,
                items: chunk.to_vec(),
            });
        }
    }
    if dropped_users > 0 {
        log::warn!("dropped {dropped_users} users with fewer than {MIN_SEQ_LEN} interactions");
    }
    let histories = log
        .sequences
        .iter()
        .map(|s| {
            let mut h = s.clone();
            h.sort_unstable();
            h.dedup();
            h
        })
        .collect();
    Ok(ExampleSet {
        windows,
        num_items: log.num_items,
        num_users: log.num_users(),
        max_len,
        dropped_users,
        dropped_chunks,
        histories,
    })
}

/// A next-item example: the first `valid_len` items of a window predict the
/// window item at position `valid_len`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceExample {
    pub owner: u32,
    pub window: u32,
    pub valid_len: u16,
    pub label: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplits {
    pub windows: Vec<Window>,
    pub train: Vec<SequenceExample>,
    pub validation: Vec<SequenceExample>,
    pub test: Vec<SequenceExample>,
    pub num_items: usize,
    pub num_users: usize,
    pub max_len: usize,
    pub histories: Vec<Vec<u32>>,
}

/// Leave-one-out per window: the last item is the test label, the one before
/// it the validation label, and every earlier position from the second on is
/// a training label.
pub fn leave_one_out(examples: &ExampleSet) -> DatasetSplits {
    let mut train = Vec::new();
    let mut validation = Vec::with_capacity(examples.windows.len());
    let mut test = Vec::with_capacity(examples.windows.len());
    for (w, window) in examples.windows.iter().enumerate() {
        let n = window.items.len();
        let ex = |pos: usize| SequenceExample {
            owner: window.owner,
            window: w as u32,
            valid_len: pos as u16,
            label: window.items[pos],
        };
        for pos in 1..n - 2 {
            train.push(ex(pos));
        }
        validation.push(ex(n - 2));
        test.push(ex(n - 1));
    }
    DatasetSplits {
        windows: examples.windows.clone(),
        train,
        validation,
        test,
        num_items: examples.num_items,
        num_users: examples.num_users,
        max_len: examples.max_len,
        histories: examples.histories.clone(),
    }
}

impl DatasetSplits {
    pub fn from_log(log: &InteractionLog, max_len: usize) -> Result<Self> {
        Ok(leave_one_out(&build_examples(log, max_len)?))
    }

    /// The real (unpadded) context items of an example.
    pub fn context(&self, ex: &SequenceExample) -> &[u32] {
        &self.windows[ex.window as usize].items[..ex.valid_len as usize]
    }

    /// The context left-padded with [`PAD`] to `max_len` slots.
    pub fn padded_context(&self, ex: &SequenceExample) -> Vec<u32> {
        let ctx = self.context(ex);
        let mut out = vec![PAD; self.max_len - ctx.len()];
        out.extend_from_slice(ctx);
        out
    }

    pub fn history(&self, owner: u32) -> &[u32] {
        &self.histories[owner as usize]
    }

    /// Writes `train.tsv`, `validation.tsv` and `test.tsv` with rows
    /// `user_id<TAB>label<TAB>space-separated context`.
    pub fn write_tsv(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, set) in [
            ("train.tsv", &self.train),
            ("validation.tsv", &self.validation),
            ("test.tsv", &self.test),
        ] {
            let mut out = std::io::BufWriter::new(std::fs::File::create(dir.join(name))?);
            for ex in set {
                let ctx: Vec<String> = self.context(ex).iter().map(u32::to_string).collect();
                writeln!(out, "{}\t{}\t{}", ex.owner, ex.label, ctx.join(" "))?;
            }
            out.flush()?;
        }
        Ok(())
    }
}

/// Label frequencies of the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemStats {
    pub counts: Vec<u64>,
    pub total: u64,
}

impl ItemStats {
    pub fn probability(&self, item: u32) -> f64 {
        self.counts[item as usize] as f64 / self.total as f64
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.counts
            .iter()
            .map(|&c| c as f64 / self.total as f64)
            .collect()
    }

    pub fn num_items(&self) -> usize {
        self.counts.len()
    }

    pub fn observed_items(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }
}

pub fn compute_item_stats(train: &[SequenceExample], num_items: usize) -> Result<ItemStats> {
    if train.is_empty() {
        return Err(Error::EmptyInput("training split has no examples".into()));
    }
    let mut counts = vec![0u64; num_items];
    for ex in train {
        counts[ex.label as usize] += 1;
    }
    Ok(ItemStats {
        counts,
        total: train.len() as u64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    Head,
    Tail,
}

/// Assignment of every item to the head or tail segment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ItemPartition {
    pub segment: Vec<Segment>,
}

impl ItemPartition {
    pub fn head_set(&self) -> Vec<u32> {
        self.members(Segment::Head)
    }

    pub fn tail_set(&self) -> Vec<u32> {
        self.members(Segment::Tail)
    }

    fn members(&self, s: Segment) -> Vec<u32> {
        self.segment
            .iter()
            .enumerate()
            .filter(|(_, &x)| x == s)
            .map(|(i, _)| i as u32)
            .collect()
    }

    pub fn of(&self, item: u32) -> Segment {
        self.segment[item as usize]
    }

    /// Items whose ground-truth cluster is in `head_clusters` form the head.
    pub fn from_clusters(item_cluster: &[usize], head_clusters: &[usize]) -> Self {
        Self {
            segment: item_cluster
                .iter()
                .map(|c| {
                    if head_clusters.contains(c) {
                        Segment::Head
                    } else {
                        Segment::Tail
                    }
                })
                .collect(),
        }
    }
}

/// Pareto split: the most frequent 20% of observed items (ties broken by
/// ascending item id) are the head. Items never seen as a training label
/// fall in the tail.
pub fn head_tail_partition(stats: &ItemStats) -> ItemPartition {
    let mut observed: Vec<u32> = (0..stats.num_items() as u32)
        .filter(|&i| stats.counts[i as usize] > 0)
        .collect();
    observed.sort_by(|&a, &b| {
        stats.counts[b as usize]
            .cmp(&stats.counts[a as usize])
            .then(a.cmp(&b))
    });
    let head_len = (observed.len() as f64 * 0.2).ceil() as usize;
    let mut segment = vec![Segment::Tail; stats.num_items()];
    for &i in &observed[..head_len] {
        segment[i as usize] = Segment::Head;
    }
    ItemPartition { segment }
}
