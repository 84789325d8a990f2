//! Session log ingestion, corpus filtering, prefix augmentation and the
//! dataset text format shared by training and evaluation.
//!
//! Dataset file layout (tab-separated, `#` lines ignored):
//!
//! ```text
//! tmignn-dataset 1
//! items <n>
//! <dense index>\t<original id>          (n lines)
//! train <count>
//! <session id>\t<target>\t<i1,i2,..>\t<t1,t2,..>
//! test <count>
//! <session id>\t<target>\t<i1,i2,..>\t<t1,t2,..>
//! ```

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::hash::Hash;
use std::path::Path;

use crate::error::DataError;

pub const DATASET_MAGIC: &str = "tmignn-dataset";
pub const DATASET_VERSION: u32 = 1;

/// One timestamped interaction sequence, ordered by time.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Session<T> {
    pub session_id: String,
    pub items: Vec<T>,
    pub timestamps: Vec<i64>,
}

/// A session whose items are dense vocabulary indices.
pub type SessionRecord = Session<usize>;
/// A session as read from a log, with original item identifiers.
pub type RawSession = Session<String>;

impl<T> Session<T> {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn end_time(&self) -> Option<i64> {
        self.timestamps.last().copied()
    }
}

/// A training or test example: the observed prefix and the item that followed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub prefix: SessionRecord,
    pub target: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    /// `vocab[i]` is the original id of dense item `i`.
    pub vocab: Vec<String>,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

impl Dataset {
    pub fn item_count(&self) -> usize {
        self.vocab.len()
    }

    pub fn index_of(&self) -> HashMap<&str, usize> {
        self.vocab.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect()
    }
}

/// Bucketed time interval: `floor(|a - b| / width)` clamped to `max_step`.
pub fn bucket_interval(a: i64, b: i64, width: u64, max_step: usize) -> usize {
    debug_assert!(width > 0, "bucket width must be positive");
    let steps = a.abs_diff(b) / width;
    usize::try_from(steps).map_or(max_step, |s| s.min(max_step))
}

pub fn parse_sessions(path: &Path) -> Result<Vec<RawSession>, DataError> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_sessions_str(&text)
}

/// Parses a delimited log with a header naming `session_id`, `item_id` and
/// `timestamp`. Tab-separated when the header contains a tab, otherwise
/// comma-separated. Rows are grouped by session in order of first appearance
/// and stably sorted by timestamp.
pub fn parse_sessions_str(text: &str) -> Result<Vec<RawSession>, DataError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty());
    let Some((_, header)) = lines.next() else {
        return Ok(Vec::new());
    };
    let delim = if header.contains('\t') { '\t' } else { ',' };
    let columns: Vec<String> = header.split(delim).map(|c| c.trim().to_ascii_lowercase()).collect();
    let find = |name: &'static str| {
        columns
            .iter()
            .position(|c| c == name)
            .ok_or(DataError::MissingColumn(name))
    };
    let (sid_col, item_col, ts_col) = (find("session_id")?, find("item_id")?, find("timestamp")?);

    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, Vec<(i64, String)>> = HashMap::new();
    for (line, row) in lines {
        let fields: Vec<&str> = row.split(delim).map(str::trim).collect();
        if fields.len() != columns.len() {
            return Err(DataError::Parse {
                line,
                message: format!("expected {} fields, found {}", columns.len(), fields.len()),
            });
        }
        let ts: i64 = fields[ts_col].parse().map_err(|_| DataError::Parse {
            line,
            message: format!("timestamp `{}` is not an integer", fields[ts_col]),
        })?;
        let sid = fields[sid_col];
        if sid.is_empty() || fields[item_col].is_empty() {
            return Err(DataError::Parse {
                line,
                message: "empty session or item id".into(),
            });
        }
        let entry = rows.entry(sid.to_string()).or_insert_with(|| {
            order.push(sid.to_string());
            Vec::new()
        });
        entry.push((ts, fields[item_col].to_string()));
    }

    Ok(order
        .into_iter()
        .map(|sid| {
            let mut events = rows.remove(&sid).unwrap_or_default();
            events.sort_by_key(|(ts, _)| *ts);
            let (timestamps, items) = events.into_iter().unzip();
            Session {
                session_id: sid,
                items,
                timestamps,
            }
        })
        .collect())
}

/// Splits sessions wherever consecutive events are more than `gap` seconds
/// apart. Pieces after the first get `#<k>` appended to their id.
pub fn split_by_gap<T: Clone>(sessions: Vec<Session<T>>, gap: i64) -> Vec<Session<T>> {
    let mut out = Vec::new();
    for s in sessions {
        let mut piece = 0;
        let mut start = 0;
        for i in 1..=s.len() {
            if i == s.len() || s.timestamps[i] - s.timestamps[i - 1] > gap {
                let session_id = if piece == 0 {
                    s.session_id.clone()
                } else {
                    format!("{}#{piece}", s.session_id)
                };
                out.push(Session {
                    session_id,
                    items: s.items[start..i].to_vec(),
                    timestamps: s.timestamps[start..i].to_vec(),
                });
                piece += 1;
                start = i;
            }
        }
    }
    out
}

/// Drops items seen fewer than `min_item_freq` times corpus-wide and sessions
/// shorter than `min_session_len`, repeating both passes until nothing changes.
pub fn filter_corpus<T: Clone + Eq + Hash>(
    mut sessions: Vec<Session<T>>,
    min_session_len: usize,
    min_item_freq: usize,
) -> Vec<Session<T>> {
    loop {
        let mut counts: HashMap<&T, usize> = HashMap::new();
        for item in sessions.iter().flat_map(|s| &s.items) {
            *counts.entry(item).or_insert(0) += 1;
        }
        let rare: HashSet<T> = counts
            .into_iter()
            .filter(|(_, c)| *c < min_item_freq)
            .map(|(i, _)| i.clone())
            .collect();
        let before: usize = sessions.iter().map(Session::len).sum::<usize>() + sessions.len();
        if !rare.is_empty() {
            for s in &mut sessions {
                let keep: Vec<bool> = s.items.iter().map(|i| !rare.contains(i)).collect();
                let mut k = keep.iter();
                s.items.retain(|_| *k.next().unwrap_or(&true));
                let mut k = keep.iter();
                s.timestamps.retain(|_| *k.next().unwrap_or(&true));
            }
        }
        sessions.retain(|s| s.len() >= min_session_len);
        let after: usize = sessions.iter().map(Session::len).sum::<usize>() + sessions.len();
        if after == before {
            return sessions;
        }
    }
}

/// Expands a session of length n into the n-1 (prefix, next item) pairs.
pub fn augment_prefixes(session: &SessionRecord) -> Vec<Example> {
    (1..session.len())
        .map(|k| Example {
            prefix: Session {
                session_id: session.session_id.clone(),
                items: session.items[..k].to_vec(),
                timestamps: session.timestamps[..k].to_vec(),
            },
            target: session.items[k],
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct PrepareConfig {
    pub min_session_len: usize,
    pub min_item_freq: usize,
    pub gap_split: Option<i64>,
    pub test_fraction: f64,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        PrepareConfig {
            min_session_len: 3,
            min_item_freq: 5,
            gap_split: None,
            test_fraction: 0.1,
        }
    }
}

/// Maps raw ids to dense indices in order of first appearance.
pub fn build_vocabulary(sessions: &[RawSession]) -> (Vec<String>, Vec<SessionRecord>) {
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut vocab = Vec::new();
    let dense = sessions
        .iter()
        .map(|s| Session {
            session_id: s.session_id.clone(),
            items: s
                .items
                .iter()
                .map(|item| {
                    *index.entry(item.clone()).or_insert_with(|| {
                        vocab.push(item.clone());
                        vocab.len() - 1
                    })
                })
                .collect(),
            timestamps: s.timestamps.clone(),
        })
        .collect();
    (vocab, dense)
}

/// Orders sessions by end time (stable) and returns how many of the latest
/// form the test split.
fn chronological<T>(sessions: &mut [Session<T>], fraction: f64) -> usize {
    sessions.sort_by_key(|s| s.end_time().unwrap_or(i64::MIN));
    ((sessions.len() as f64) * fraction).round() as usize
}

/// Full preprocessing: optional gap sessionization, filtering on the whole
/// corpus, vocabulary construction, chronological split and augmentation.
pub fn prepare(raw: Vec<RawSession>, cfg: &PrepareConfig) -> Dataset {
    let raw = match cfg.gap_split {
        Some(gap) => split_by_gap(raw, gap),
        None => raw,
    };
    let mut kept = filter_corpus(raw, cfg.min_session_len, cfg.min_item_freq);
    let n_test = chronological(&mut kept, cfg.test_fraction);
    let (vocab, dense) = build_vocabulary(&kept);
    let split = dense.len() - n_test;
    Dataset {
        vocab,
        train: dense[..split].iter().flat_map(augment_prefixes).collect(),
        test: dense[split..].iter().flat_map(augment_prefixes).collect(),
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

pub fn format_dataset(ds: &Dataset) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{DATASET_MAGIC} {DATASET_VERSION}");
    let _ = writeln!(out, "items {}", ds.vocab.len());
    for (i, raw) in ds.vocab.iter().enumerate() {
        let _ = writeln!(out, "{i}\t{raw}");
    }
    for (name, block) in [("train", &ds.train), ("test", &ds.test)] {
        let _ = writeln!(out, "{name} {}", block.len());
        for ex in block {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}",
                ex.prefix.session_id,
                ex.target,
                join(&ex.prefix.items),
                join(&ex.prefix.timestamps)
            );
        }
    }
    out
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<(), DataError> {
    std::fs::write(path, format_dataset(ds)).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_dataset(path: &Path) -> Result<Dataset, DataError> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_dataset(&text)
}

struct Lines<'a> {
    inner: Box<dyn Iterator<Item = (usize, &'a str)> + 'a>,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Result<(usize, &'a str), DataError> {
        self.inner
            .next()
            .ok_or_else(|| DataError::Format("unexpected end of dataset file".into()))
    }

    fn header(&mut self, key: &str) -> Result<usize, DataError> {
        let (line, text) = self.next()?;
        let count = text
            .strip_prefix(key)
            .and_then(|rest| rest.trim().parse().ok())
            .ok_or_else(|| DataError::Parse {
                line,
                message: format!("expected `{key} <count>`"),
            })?;
        Ok(count)
    }
}

fn parse_list<T: std::str::FromStr>(field: &str, line: usize) -> Result<Vec<T>, DataError> {
    field
        .split(',')
        .map(|x| {
            x.parse().map_err(|_| DataError::Parse {
                line,
                message: format!("bad list entry `{x}`"),
            })
        })
        .collect()
}

pub fn parse_dataset(text: &str) -> Result<Dataset, DataError> {
    let mut lines = Lines {
        inner: Box::new(
            text.lines()
                .enumerate()
                .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
                .filter(|(_, l)| !l.is_empty() && !l.starts_with('#')),
        ),
    };
    let (line, magic) = lines.next()?;
    let version = magic
        .strip_prefix(DATASET_MAGIC)
        .and_then(|v| v.trim().parse::<u32>().ok())
        .ok_or_else(|| DataError::Parse {
            line,
            message: "not a tmignn dataset file".into(),
        })?;
    if version != DATASET_VERSION {
        return Err(DataError::Format(format!(
            "unsupported dataset version {version} (expected {DATASET_VERSION})"
        )));
    }
    let n = lines.header("items")?;
    let mut vocab = Vec::with_capacity(n);
    for i in 0..n {
        let (line, text) = lines.next()?;
        let (idx, raw) = text.split_once('\t').ok_or_else(|| DataError::Parse {
            line,
            message: "expected `<index>\\t<id>`".into(),
        })?;
        if idx.parse::<usize>().ok() != Some(i) {
            return Err(DataError::Parse {
                line,
                message: format!("vocabulary index {idx} out of order"),
            });
        }
        vocab.push(raw.to_string());
    }
    let mut blocks = Vec::new();
    for key in ["train", "test"] {
        let count = lines.header(key)?;
        let mut block = Vec::with_capacity(count);
        for _ in 0..count {
            let (line, text) = lines.next()?;
            let fields: Vec<&str> = text.split('\t').collect();
            if fields.len() != 4 {
                return Err(DataError::Parse {
                    line,
                    message: format!("expected 4 fields, found {}", fields.len()),
                });
            }
            let target: usize = fields[1].parse().map_err(|_| DataError::Parse {
                line,
                message: "bad target".into(),
            })?;
            let items: Vec<usize> = parse_list(fields[2], line)?;
            let timestamps: Vec<i64> = parse_list(fields[3], line)?;
            if items.len() != timestamps.len() {
                return Err(DataError::Parse {
                    line,
                    message: "item and timestamp lists differ in length".into(),
                });
            }
            if let Some(bad) = items.iter().chain(std::iter::once(&target)).find(|i| **i >= n) {
                return Err(DataError::Parse {
                    line,
                    message: format!("item index {bad} outside vocabulary of {n}"),
                });
            }
            block.push(Example {
                prefix: Session {
                    session_id: fields[0].to_string(),
                    items,
                    timestamps,
                },
                target,
            });
        }
        blocks.push(block);
    }
    let test = blocks.pop().unwrap_or_default();
    let train = blocks.pop().unwrap_or_default();
    Ok(Dataset { vocab, train, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn raw(id: &str, items: &[&str]) -> RawSession {
        Session {
            session_id: id.into(),
            items: items.iter().map(|s| s.to_string()).collect(),
            timestamps: (0..items.len() as i64).collect(),
        }
    }

    #[test]
    fn parse_single_session() {
        let s = parse_sessions_str("session_id,item_id,timestamp\ns1,a,10\ns1,b,20\ns1,c,30\n").unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].len(), 3);
    }

    #[test]
    fn parse_sorts_by_time_and_keeps_ties_in_file_order() {
        let s = parse_sessions_str("session_id\titem_id\ttimestamp\nx\tc\t30\nx\ta\t10\nx\tb\t30\n").unwrap();
        assert_eq!(s[0].items, vec!["a", "c", "b"]);
        assert_eq!(s[0].timestamps, vec![10, 30, 30]);
    }

    #[test]
    fn parse_reports_line_of_bad_timestamp() {
        let err = parse_sessions_str("session_id,item_id,timestamp\ns,a,1\ns,b,later\n").unwrap_err();
        assert!(matches!(err, DataError::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn parse_empty_file() {
        assert!(parse_sessions_str("").unwrap().is_empty());
    }

    #[test]
    fn parse_requires_columns() {
        assert!(matches!(
            parse_sessions_str("sid,item_id,timestamp\n"),
            Err(DataError::MissingColumn("session_id"))
        ));
    }

    #[test]
    fn short_sessions_removed() {
        let corpus = vec![raw("1", &["a", "a"]), raw("2", &["a", "a", "a"])];
        let out = filter_corpus(corpus, 3, 1);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].session_id, "2");
    }

    #[test]
    fn rare_item_removed_everywhere() {
        let corpus = vec![
            raw("1", &["r", "x", "x", "x"]),
            raw("2", &["r", "r", "r", "x", "x", "x", "x"]),
        ];
        // r: 4 occurrences, x: 7
        let out = filter_corpus(corpus, 3, 5);
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|s| s.items.iter().all(|i| i == "x")));
        assert_eq!(out[0].timestamps, vec![1, 2, 3]);
    }

    #[test]
    fn augment_examples() {
        let s = Session {
            session_id: "s".into(),
            items: vec![0, 1, 2],
            timestamps: vec![5, 6, 7],
        };
        let ex = augment_prefixes(&s);
        assert_eq!(ex.len(), 2);
        assert_eq!((ex[0].prefix.items.clone(), ex[0].target), (vec![0], 1));
        assert_eq!((ex[1].prefix.items.clone(), ex[1].target), (vec![0, 1], 2));
        assert_eq!(ex[1].prefix.timestamps, vec![5, 6]);

        let two = Session {
            session_id: "t".into(),
            items: vec![0, 1],
            timestamps: vec![0, 1],
        };
        assert_eq!(augment_prefixes(&two).len(), 1);
        let one = Session {
            session_id: "u".into(),
            items: vec![0],
            timestamps: vec![0],
        };
        assert!(augment_prefixes(&one).is_empty());
    }

    #[test]
    fn bucket_examples() {
        assert_eq!(bucket_interval(100, 40, 8, 300), 7);
        assert_eq!(bucket_interval(55, 55, 8, 300), 0);
        assert_eq!(bucket_interval(1_000_000_000, 0, 8, 300), 300);
    }

    #[test]
    fn gap_split_breaks_long_pauses() {
        let s = Session {
            session_id: "s".into(),
            items: vec![1, 2, 3, 4],
            timestamps: vec![0, 10, 5000, 5010],
        };
        let parts = split_by_gap(vec![s], 3600);
        assert_eq!(parts.len(), 2);
        assert_eq!(parts[1].session_id, "s#1");
        assert_eq!(parts[1].items, vec![3, 4]);
    }

    #[test]
    fn prepare_splits_chronologically() {
        let mut corpus = Vec::new();
        for k in 0..10 {
            let mut s = raw(&k.to_string(), &["a", "b", "c"]);
            s.timestamps = vec![100 - k, 101 - k, 102 - k];
            corpus.push(s);
        }
        let ds = prepare(
            corpus,
            &PrepareConfig {
                min_item_freq: 1,
                ..Default::default()
            },
        );
        assert_eq!(ds.item_count(), 3);
        assert_eq!(ds.train.len(), 18);
        assert_eq!(ds.test.len(), 2);
        // session "0" ends latest
        assert!(ds.test.iter().all(|e| e.prefix.session_id == "0"));
    }

    #[test]
    fn dataset_text_round_trip() {
        let ds = Dataset {
            vocab: vec!["x9".into(), "y".into()],
            train: vec![Example {
                prefix: Session {
                    session_id: "s".into(),
                    items: vec![0, 1],
                    timestamps: vec![3, 9],
                },
                target: 1,
            }],
            test: vec![],
        };
        assert_eq!(parse_dataset(&format_dataset(&ds)).unwrap(), ds);
        assert!(parse_dataset("tmignn-dataset 9\n").is_err());
    }

    fn corpus_strategy() -> impl Strategy<Value = Vec<Session<u8>>> {
        prop::collection::vec(prop::collection::vec(0u8..8, 1..7), 0..12).prop_map(|sessions| {
            sessions
                .into_iter()
                .enumerate()
                .map(|(k, items)| Session {
                    session_id: k.to_string(),
                    timestamps: (0..items.len() as i64).collect(),
                    items,
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn filter_is_idempotent(corpus in corpus_strategy(), min_freq in 1usize..5) {
            let once = filter_corpus(corpus, 3, min_freq);
            let twice = filter_corpus(once.clone(), 3, min_freq);
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn augmentation_count(corpus in corpus_strategy()) {
            let total: usize = corpus
                .iter()
                .map(|s| augment_prefixes(&Session { session_id: s.session_id.clone(), items: s.items.iter().map(|&i| i as usize).collect(), timestamps: s.timestamps.clone() }).len())
                .sum();
            let expected: usize = corpus.iter().map(|s| s.len() - 1).sum();
            prop_assert_eq!(total, expected);
        }

        #[test]
        fn bucket_is_symmetric(a in -1_000_000i64..1_000_000, b in -1_000_000i64..1_000_000, w in 1u64..64) {
            prop_assert_eq!(bucket_interval(a, b, w, 300), bucket_interval(b, a, w, 300));
        }
    }
}
