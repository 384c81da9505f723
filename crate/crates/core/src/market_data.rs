//! Newsflow and universe ingestion, look-back-window instance construction
//! and chronological dataset splits.
//!
//! An instance for `(stock, t)` concatenates every news item of that stock
//! stamped in the half-open window `[t - W, t)`, oldest first, separated by
//! `[SEP]`. The date `t` is taken as midnight UTC, so anything published on
//! the rebalance date itself is excluded. When the concatenation is too long
//! the oldest tokens are dropped.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use chrono::{DateTime, Duration, NaiveDate, NaiveDateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ArchKind;
use crate::vocab::{TokenSequence, Vocabulary, BOS, EOS, MASK, SEP};

#[derive(Clone, Debug, PartialEq)]
pub struct NewsItem {
    pub stock_id: String,
    pub timestamp: DateTime<Utc>,
    pub text: String,
}

#[derive(Deserialize)]
struct RawNews {
    stock_id: String,
    timestamp: String,
    text: String,
}

#[derive(Serialize)]
struct NewsRecord<'a> {
    stock_id: &'a str,
    timestamp: String,
    text: &'a str,
}

pub fn parse_timestamp(s: &str) -> Option<DateTime<Utc>> {
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(t.with_timezone(&Utc));
    }
    if let Ok(t) = NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S") {
        return Some(t.and_utc());
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .map(|d| d.and_hms_opt(0, 0, 0).expect("midnight").and_utc())
}

pub fn format_timestamp(t: &DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Secs, true)
}

/// Reads a JSON-lines news file, sorted by `(stock_id, timestamp)` with input
/// order kept for ties. Blank lines are skipped.
pub fn load_news(path: &Path) -> Result<Vec<NewsItem>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut items = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let raw: RawNews = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        if raw.stock_id.is_empty() {
            return Err(parse_err("empty stock_id".into()));
        }
        let timestamp =
            parse_timestamp(&raw.timestamp).ok_or_else(|| parse_err(format!("bad timestamp `{}`", raw.timestamp)))?;
        items.push(NewsItem {
            stock_id: raw.stock_id,
            timestamp,
            text: raw.text,
        });
    }
    items.sort_by(|a, b| (&a.stock_id, a.timestamp).cmp(&(&b.stock_id, b.timestamp)));
    Ok(items)
}

pub fn write_news(path: &Path, items: &[NewsItem]) -> Result<()> {
    let mut out = Vec::new();
    for item in items {
        let rec = NewsRecord {
            stock_id: &item.stock_id,
            timestamp: format_timestamp(&item.timestamp),
            text: &item.text,
        };
        serde_json::to_writer(&mut out, &rec).expect("news record serialises");
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct UniverseEntry {
    pub date: NaiveDate,
    pub stock_id: String,
    pub forward_return: f64,
}

/// Universe entries with a `(stock, date)` index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Universe {
    entries: Vec<UniverseEntry>,
    index: HashMap<(String, NaiveDate), usize>,
}

impl Universe {
    pub fn new(entries: Vec<UniverseEntry>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if !e.forward_return.is_finite() {
                return Err(Error::Data(format!("non-finite return for {} on {}", e.stock_id, e.date)));
            }
            if index.insert((e.stock_id.clone(), e.date), i).is_some() {
                return Err(Error::Data(format!("duplicate universe entry ({}, {})", e.date, e.stock_id)));
            }
        }
        Ok(Universe { entries, index })
    }

    pub fn entries(&self) -> &[UniverseEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn forward_return(&self, stock_id: &str, date: NaiveDate) -> Option<f64> {
        self.index
            .get(&(stock_id.to_string(), date))
            .map(|&i| self.entries[i].forward_return)
    }

    pub fn dates(&self) -> Vec<NaiveDate> {
        let mut d: Vec<_> = self.entries.iter().map(|e| e.date).collect();
        d.sort();
        d.dedup();
        d
    }

    /// Entries grouped by date, each group in file order.
    pub fn by_date(&self) -> BTreeMap<NaiveDate, Vec<&UniverseEntry>> {
        let mut map: BTreeMap<NaiveDate, Vec<&UniverseEntry>> = BTreeMap::new();
        for e in &self.entries {
            map.entry(e.date).or_default().push(e);
        }
        map
    }
}

/// Reads a `date,stock_id,forward_return` CSV.
pub fn load_universe(path: &Path) -> Result<Universe> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["date", "stock_id", "forward_return"] {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: "header must be `date,stock_id,forward_return`".into(),
        });
    }
    let mut entries = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let date = NaiveDate::parse_from_str(&rec[0], "%Y-%m-%d")
            .map_err(|_| parse_err(format!("bad date `{}`", &rec[0])))?;
        let forward_return: f64 = rec[2]
            .trim()
            .parse()
            .map_err(|_| parse_err(format!("bad forward_return `{}`", &rec[2])))?;
        entries.push(UniverseEntry {
            date,
            stock_id: rec[1].to_string(),
            forward_return,
        });
    }
    Universe::new(entries)
}

pub fn write_universe(path: &Path, entries: &[UniverseEntry]) -> Result<()> {
    let mut out = String::from("date,stock_id,forward_return\n");
    for e in entries {
        out.push_str(&format!("{},{},{}\n", e.date, e.stock_id, e.forward_return));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Per-stock news lists sorted by timestamp.
#[derive(Clone, Debug, Default)]
pub struct NewsIndex {
    by_stock: HashMap<String, Vec<NewsItem>>,
}

impl NewsIndex {
    pub fn new(items: Vec<NewsItem>) -> Self {
        let mut by_stock: HashMap<String, Vec<NewsItem>> = HashMap::new();
        for item in items {
            by_stock.entry(item.stock_id.clone()).or_default().push(item);
        }
        for list in by_stock.values_mut() {
            list.sort_by_key(|n| n.timestamp);
        }
        NewsIndex { by_stock }
    }

    /// News for `stock_id` stamped in `[from, to)`, oldest first.
    pub fn window(&self, stock_id: &str, from: DateTime<Utc>, to: DateTime<Utc>) -> &[NewsItem] {
        let Some(list) = self.by_stock.get(stock_id) else {
            return &[];
        };
        let lo = list.partition_point(|n| n.timestamp < from);
        let hi = list.partition_point(|n| n.timestamp < to);
        &list[lo..hi]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub stock_id: String,
    pub date: NaiveDate,
    pub sequence: TokenSequence,
    pub label: f64,
    pub n_news: usize,
}

impl Instance {
    /// Position of the appended end token.
    pub fn eos_position(&self) -> usize {
        self.sequence.len() - 1
    }
}

/// Shared settings for turning universe rows into model inputs.
#[derive(Clone, Copy, Debug)]
pub struct InstanceSpec {
    pub window: Duration,
    pub max_len: usize,
    pub arch: ArchKind,
}

pub fn window_bounds(date: NaiveDate, window: Duration) -> (DateTime<Utc>, DateTime<Utc>) {
    let end = date.and_hms_opt(0, 0, 0).expect("midnight").and_utc();
    (end - window, end)
}

/// Builds the instance for one universe row; `Ok(None)` when the window holds
/// no news.
pub fn build_instance(
    stock_id: &str,
    date: NaiveDate,
    news: &NewsIndex,
    universe: &Universe,
    vocab: &Vocabulary,
    spec: InstanceSpec,
) -> Result<Option<Instance>> {
    let label = universe.forward_return(stock_id, date).ok_or_else(|| Error::Lookup {
        stock_id: stock_id.to_string(),
        date,
    })?;
    let (from, to) = window_bounds(date, spec.window);
    let items = news.window(stock_id, from, to);
    if items.is_empty() {
        return Ok(None);
    }
    let mut content = Vec::new();
    for (i, item) in items.iter().enumerate() {
        if i > 0 {
            content.push(SEP);
        }
        content.extend(vocab.tokenize(&item.text).0);
    }
    let sequence = wrap_content(&content, spec.max_len, spec.arch)?;
    Ok(Some(Instance {
        stock_id: stock_id.to_string(),
        date,
        sequence,
        label,
        n_news: items.len(),
    }))
}

/// Keeps the most recent content that fits and adds the architecture's
/// special tokens: `content [MASK]` for encoders, `[BOS] content [EOS]` for
/// decoders.
pub fn wrap_content(content: &[usize], max_len: usize, arch: ArchKind) -> Result<TokenSequence> {
    let specials = match arch {
        ArchKind::Encoder => 1,
        ArchKind::Decoder => 2,
    };
    if max_len <= specials {
        return Err(Error::Config(format!("max_len {max_len} leaves no room for content")));
    }
    let keep = content.len().min(max_len - specials);
    let tail = &content[content.len() - keep..];
    let mut ids = Vec::with_capacity(keep + specials);
    match arch {
        ArchKind::Encoder => {
            ids.extend_from_slice(tail);
            ids.push(MASK);
        }
        ArchKind::Decoder => {
            ids.push(BOS);
            ids.extend_from_slice(tail);
            ids.push(EOS);
        }
    }
    Ok(TokenSequence(ids))
}

/// Every universe row with news in its window, in `(date, stock_id)` order.
pub fn build_instances(
    universe: &Universe,
    news: &NewsIndex,
    vocab: &Vocabulary,
    spec: InstanceSpec,
) -> Result<Vec<Instance>> {
    let mut rows: Vec<&UniverseEntry> = universe.entries().iter().collect();
    rows.sort_by(|a, b| (a.date, &a.stock_id).cmp(&(b.date, &b.stock_id)));
    let mut out = Vec::new();
    for e in rows {
        if let Some(inst) = build_instance(&e.stock_id, e.date, news, universe, vocab, spec)? {
            out.push(inst);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Default)]
pub struct DatasetSplit {
    pub train: Vec<Instance>,
    pub validation: Vec<Instance>,
    pub test: Vec<Instance>,
    pub train_end: Option<NaiveDate>,
    pub val_end: Option<NaiveDate>,
    pub warnings: Vec<String>,
}

#[derive(Serialize, Deserialize, Debug, PartialEq)]
pub struct SplitManifest {
    pub train_end: NaiveDate,
    pub val_end: NaiveDate,
    pub counts: SplitCounts,
}

#[derive(Serialize, Deserialize, Debug, PartialEq)]
pub struct SplitCounts {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

/// Train is `date <= train_end`, validation `train_end < date <= val_end`,
/// test `date > val_end`.
pub fn split_dataset(instances: Vec<Instance>, train_end: NaiveDate, val_end: NaiveDate) -> Result<DatasetSplit> {
    if train_end >= val_end {
        return Err(Error::Config(format!("train_end {train_end} must precede val_end {val_end}")));
    }
    let mut split = DatasetSplit {
        train_end: Some(train_end),
        val_end: Some(val_end),
        ..Default::default()
    };
    let mut seen = HashSet::new();
    for inst in instances {
        if !seen.insert((inst.stock_id.clone(), inst.date)) {
            return Err(Error::Data(format!("instance ({}, {}) appears twice", inst.stock_id, inst.date)));
        }
        if inst.date <= train_end {
            split.train.push(inst);
        } else if inst.date <= val_end {
            split.validation.push(inst);
        } else {
            split.test.push(inst);
        }
    }
    if split.test.is_empty() {
        split
            .warnings
            .push(format!("test partition is empty: no instance dated after {val_end}"));
    }
    Ok(split)
}

impl DatasetSplit {
    pub fn manifest(&self) -> Option<SplitManifest> {
        Some(SplitManifest {
            train_end: self.train_end?,
            val_end: self.val_end?,
            counts: SplitCounts {
                train: self.train.len(),
                validation: self.validation.len(),
                test: self.test.len(),
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    fn vocab() -> Vocabulary {
        Vocabulary::from_words(["alpha", "beta", "gamma", "delta"])
    }

    fn news(stock: &str, ts: &str, text: &str) -> NewsItem {
        NewsItem {
            stock_id: stock.into(),
            timestamp: parse_timestamp(ts).unwrap(),
            text: text.into(),
        }
    }

    fn universe_one(stock: &str, date: &str) -> Universe {
        Universe::new(vec![UniverseEntry {
            date: d(date),
            stock_id: stock.into(),
            forward_return: 0.01,
        }])
        .unwrap()
    }

    fn spec(max_len: usize, arch: ArchKind) -> InstanceSpec {
        InstanceSpec {
            window: Duration::days(7),
            max_len,
            arch,
        }
    }

    #[test]
    fn load_news_cases() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("news.jsonl");
        fs::write(&p, "").unwrap();
        assert!(load_news(&p).unwrap().is_empty());

        fs::write(
            &p,
            concat!(
                r#"{"stock_id":"B","timestamp":"2015-01-02T00:00:00Z","text":"alpha"}"#,
                "\n",
                r#"{"stock_id":"A","timestamp":"2015-01-03T00:00:00Z","text":"beta"}"#,
                "\n",
                r#"{"stock_id":"A","timestamp":"2015-01-01T00:00:00Z","text":"gamma"}"#,
                "\n"
            ),
        )
        .unwrap();
        let items = load_news(&p).unwrap();
        let texts: Vec<_> = items.iter().map(|n| n.text.as_str()).collect();
        assert_eq!(texts, ["gamma", "beta", "alpha"]);

        fs::write(
            &p,
            concat!(
                r#"{"stock_id":"A","timestamp":"2015-01-01T00:00:00Z","text":"x"}"#,
                "\n",
                r#"{"stock_id":"A","text":"y"}"#,
                "\n"
            ),
        )
        .unwrap();
        match load_news(&p) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 2);
                assert!(message.contains("timestamp"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(matches!(load_news(&dir.path().join("missing")), Err(Error::Io { .. })));
    }

    #[test]
    fn load_universe_cases() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("u.csv");
        fs::write(&p, "date,stock_id,forward_return\n2015-01-30,AAA,0.021\n").unwrap();
        let u = load_universe(&p).unwrap();
        assert_eq!(u.forward_return("AAA", d("2015-01-30")), Some(0.021));

        fs::write(&p, "date,stock_id,forward_return\n2015-01-30,AAA,0.021\n2015-01-30,AAA,0.01\n").unwrap();
        assert!(matches!(load_universe(&p), Err(Error::Data(_))));

        fs::write(&p, "date,stock_id,forward_return\n2015-01-30,AAA,abc\n").unwrap();
        assert!(matches!(load_universe(&p), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn window_membership() {
        let idx = NewsIndex::new(vec![
            news("S", "2015-01-07T00:00:00Z", "beta"),  // t-3d
            news("S", "2015-01-04T00:00:00Z", "alpha"), // t-6d
            news("S", "2014-12-31T00:00:00Z", "gamma"), // t-10d
        ]);
        let u = universe_one("S", "2015-01-10");
        let v = vocab();
        let inst = build_instance("S", d("2015-01-10"), &idx, &u, &v, spec(16, ArchKind::Encoder))
            .unwrap()
            .unwrap();
        let a = v.id("alpha").unwrap();
        let b = v.id("beta").unwrap();
        assert_eq!(inst.sequence.ids(), &[a, SEP, b, MASK]);
        assert_eq!(inst.n_news, 2);
        assert_eq!(inst.label, 0.01);
    }

    #[test]
    fn window_is_half_open() {
        let idx = NewsIndex::new(vec![
            news("S", "2015-01-10T00:00:00Z", "delta"), // exactly t
            news("S", "2015-01-03T00:00:00Z", "alpha"), // exactly t - W
        ]);
        let u = universe_one("S", "2015-01-10");
        let v = vocab();
        let inst = build_instance("S", d("2015-01-10"), &idx, &u, &v, spec(16, ArchKind::Decoder))
            .unwrap()
            .unwrap();
        assert_eq!(inst.sequence.ids(), &[BOS, v.id("alpha").unwrap(), EOS]);
    }

    #[test]
    fn empty_window_and_missing_entry() {
        let idx = NewsIndex::new(vec![news("S", "2014-01-01T00:00:00Z", "alpha")]);
        let u = universe_one("S", "2015-01-10");
        let v = vocab();
        let s = spec(16, ArchKind::Encoder);
        assert!(build_instance("S", d("2015-01-10"), &idx, &u, &v, s).unwrap().is_none());
        assert!(matches!(
            build_instance("T", d("2015-01-10"), &idx, &u, &v, s),
            Err(Error::Lookup { .. })
        ));
    }

    #[test]
    fn truncation_keeps_most_recent_suffix() {
        let content: Vec<usize> = (0..200).map(|i| 6 + i % 4).collect();
        let seq = wrap_content(&content, 128, ArchKind::Decoder).unwrap();
        assert_eq!(seq.len(), 128);
        assert_eq!(seq.ids()[0], BOS);
        assert_eq!(seq.ids()[127], EOS);
        assert_eq!(&seq.ids()[1..127], &content[200 - 126..]);
        let enc = wrap_content(&content, 128, ArchKind::Encoder).unwrap();
        assert_eq!(&enc.ids()[..127], &content[200 - 127..]);
        assert_eq!(enc.ids()[126], content[199]);
    }

    fn inst(date: &str, stock: &str) -> Instance {
        Instance {
            stock_id: stock.into(),
            date: d(date),
            sequence: TokenSequence(vec![6, MASK]),
            label: 0.0,
            n_news: 1,
        }
    }

    #[test]
    fn split_cases() {
        let all = vec![inst("2014-06-30", "A"), inst("2014-12-31", "A"), inst("2016-01-29", "A")];
        let s = split_dataset(all, d("2014-09-30"), d("2015-01-31")).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (1, 1, 1));
        assert!(s.warnings.is_empty());
        assert!(s.train.iter().map(|i| i.date).max() < s.validation.iter().map(|i| i.date).min());

        let early = vec![inst("2014-01-31", "A"), inst("2014-02-28", "A")];
        let s = split_dataset(early, d("2014-09-30"), d("2015-01-31")).unwrap();
        assert!(s.test.is_empty());
        assert_eq!(s.warnings.len(), 1);

        assert!(split_dataset(vec![], d("2015-01-31"), d("2014-09-30")).is_err());
    }
}
