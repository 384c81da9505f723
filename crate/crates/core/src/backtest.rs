//! Decile portfolios with monthly rebalancing, their performance statistics,
//! and a lexicon sentiment baseline for ranking.
//!
//! The long leg holds the top decile of the ranking score and the short leg
//! the bottom decile, equally weighted. A long-short month returns
//! `mean(long) - mean(short)`. Annualisation is geometric,
//! `(Π (1 + r))^(12/N) - 1`, and the Sharpe ratio is
//! `mean / std * √12` with the sample standard deviation and no risk-free
//! rate.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::deciles::{assign_deciles, Forecast, N_DECILES};
use crate::error::{Error, Result};
use crate::market_data::{Instance, Universe};
use crate::vocab::Vocabulary;

const PERIODS_PER_YEAR: f64 = 12.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PortfolioKind {
    LongOnly,
    LongShort,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankingSource {
    ModelForecast,
    SentimentScore,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PortfolioSpec {
    pub kind: PortfolioKind,
    pub source: RankingSource,
}

/// A ranking score for one stock on one date.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub stock_id: String,
    pub date: NaiveDate,
    pub value: f64,
}

impl From<&Forecast> for Score {
    fn from(f: &Forecast) -> Self {
        Score {
            stock_id: f.stock_id.clone(),
            date: f.date,
            value: f.predicted,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PortfolioSnapshot {
    pub date: NaiveDate,
    pub long: Vec<String>,
    /// Empty for long-only portfolios.
    pub short: Vec<String>,
}

impl PortfolioSnapshot {
    pub fn long_weight(&self) -> f64 {
        1.0 / self.long.len() as f64
    }

    pub fn short_weight(&self) -> Option<f64> {
        (!self.short.is_empty()).then(|| 1.0 / self.short.len() as f64)
    }
}

/// Top decile long, plus bottom decile short for long-short. Legs are listed
/// in stock-id order.
pub fn construct_portfolio<K: AsRef<str>>(date: NaiveDate, scores: &[(K, f64)], kind: PortfolioKind) -> Result<PortfolioSnapshot> {
    let deciles = assign_deciles(date, scores)?;
    let leg = |d: usize| {
        let mut ids: Vec<String> = scores
            .iter()
            .zip(&deciles)
            .filter(|(_, &k)| k == d)
            .map(|((id, _), _)| id.as_ref().to_string())
            .collect();
        ids.sort();
        ids
    };
    Ok(PortfolioSnapshot {
        date,
        long: leg(N_DECILES - 1),
        short: match kind {
            PortfolioKind::LongOnly => Vec::new(),
            PortfolioKind::LongShort => leg(0),
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BacktestStats {
    pub dates: Vec<NaiveDate>,
    pub monthly_returns: Vec<f64>,
    /// Growth of one unit, after each month.
    pub curve: Vec<f64>,
    pub annualized_return: f64,
    /// `None` when volatility is zero.
    pub sharpe: Option<f64>,
    pub n_months: usize,
}

#[derive(Serialize)]
struct StatsJson {
    annualized_return: f64,
    sharpe: Option<f64>,
    n_months: usize,
}

impl BacktestStats {
    /// Builds statistics from a dated return series.
    pub fn from_series(dates: Vec<NaiveDate>, monthly_returns: Vec<f64>) -> Result<Self> {
        if dates.len() != monthly_returns.len() {
            return Err(Error::Data("dates and returns differ in length".into()));
        }
        let curve = cumulative_curve(&monthly_returns)?;
        let annualized_return = annualized_return(&monthly_returns)?;
        let sharpe = match sharpe_ratio(&monthly_returns) {
            Ok(s) => Some(s),
            Err(Error::UndefinedSharpe(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(BacktestStats {
            n_months: monthly_returns.len(),
            dates,
            monthly_returns,
            curve,
            annualized_return,
            sharpe,
        })
    }

    pub fn returns_csv(&self) -> String {
        dated_csv("return", &self.dates, &self.monthly_returns)
    }

    pub fn curve_csv(&self) -> String {
        dated_csv("value", &self.dates, &self.curve)
    }

    pub fn stats_json(&self) -> String {
        serde_json::to_string_pretty(&StatsJson {
            annualized_return: self.annualized_return,
            sharpe: self.sharpe,
            n_months: self.n_months,
        })
        .expect("stats serialise")
    }

    /// Writes `{stem}_returns.csv`, `{stem}_curve.csv` and `{stem}_stats.json`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        for (suffix, body) in [
            ("returns.csv", self.returns_csv()),
            ("curve.csv", self.curve_csv()),
            ("stats.json", self.stats_json()),
        ] {
            let path = dir.join(format!("{stem}_{suffix}"));
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

fn dated_csv(column: &str, dates: &[NaiveDate], values: &[f64]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["date", column]).expect("in-memory write");
    for (d, v) in dates.iter().zip(values) {
        w.write_record([d.to_string(), v.to_string()]).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

fn leg_return(leg: &[String], date: NaiveDate, universe: &Universe) -> Result<f64> {
    let mut sum = 0.0;
    for id in leg {
        sum += universe.forward_return(id, date).ok_or_else(|| {
            Error::Data(format!("no forward return for {id} on {date}"))
        })?;
    }
    Ok(sum / leg.len() as f64)
}

/// Return of a snapshot over the following month.
pub fn portfolio_return(snapshot: &PortfolioSnapshot, universe: &Universe) -> Result<f64> {
    let long = leg_return(&snapshot.long, snapshot.date, universe)?;
    if snapshot.short.is_empty() {
        Ok(long)
    } else {
        Ok(long - leg_return(&snapshot.short, snapshot.date, universe)?)
    }
}

fn scores_by_date(scores: &[Score]) -> Result<BTreeMap<NaiveDate, Vec<(&str, f64)>>> {
    let mut seen = BTreeSet::new();
    let mut out: BTreeMap<NaiveDate, Vec<(&str, f64)>> = BTreeMap::new();
    for s in scores {
        if !s.value.is_finite() {
            return Err(Error::Data(format!("non-finite score for {} on {}", s.stock_id, s.date)));
        }
        if !seen.insert((s.date, s.stock_id.as_str())) {
            return Err(Error::Data(format!("duplicate score for {} on {}", s.stock_id, s.date)));
        }
        out.entry(s.date).or_default().push((s.stock_id.as_str(), s.value));
    }
    Ok(out)
}

/// Rebalances on every date present in `scores`. Stocks without a score on a
/// date are not candidates that month.
pub fn backtest(scores: &[Score], universe: &Universe, kind: PortfolioKind) -> Result<BacktestStats> {
    let by_date = scores_by_date(scores)?;
    if by_date.len() < 2 {
        return Err(Error::Precondition(format!(
            "backtest needs at least 2 rebalance dates, got {}",
            by_date.len()
        )));
    }
    let mut dates = Vec::with_capacity(by_date.len());
    let mut returns = Vec::with_capacity(by_date.len());
    for (date, ranked) in by_date {
        let snapshot = construct_portfolio(date, &ranked, kind)?;
        dates.push(date);
        returns.push(portfolio_return(&snapshot, universe)?);
    }
    BacktestStats::from_series(dates, returns)
}

/// Running product of `1 + r`.
pub fn cumulative_curve(series: &[f64]) -> Result<Vec<f64>> {
    if series.is_empty() {
        return Err(Error::Precondition("empty return series".into()));
    }
    let mut value = 1.0;
    let mut out = Vec::with_capacity(series.len());
    for (index, &r) in series.iter().enumerate() {
        if !(r > -1.0) {
            return Err(Error::Bankrupt { index, value: r });
        }
        value *= 1.0 + r;
        out.push(value);
    }
    Ok(out)
}

/// `(Π (1 + r))^(12/N) - 1`.
pub fn annualized_return(series: &[f64]) -> Result<f64> {
    if series.is_empty() {
        return Err(Error::Precondition("empty return series".into()));
    }
    let total: f64 = series.iter().map(|r| 1.0 + r).product();
    if !(total > 0.0) {
        return Err(Error::Domain(format!("cumulative value {total} is not positive")));
    }
    Ok(total.powf(PERIODS_PER_YEAR / series.len() as f64) - 1.0)
}

/// `mean / sample std · √12`.
pub fn sharpe_ratio(series: &[f64]) -> Result<f64> {
    let n = series.len();
    if n < 2 {
        return Err(Error::UndefinedSharpe(format!("{n} observations")));
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let var = series.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let std = var.sqrt();
    // a constant series can leave rounding noise in the deviations
    if std == 0.0 || std <= 1e-14 * mean.abs() {
        return Err(Error::UndefinedSharpe("zero volatility".into()));
    }
    Ok(mean / std * PERIODS_PER_YEAR.sqrt())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SentimentLexicon {
    pub scores: BTreeMap<String, f64>,
}

impl SentimentLexicon {
    pub fn new(scores: BTreeMap<String, f64>) -> Result<Self> {
        for (word, &s) in &scores {
            if !(-1.0..=1.0).contains(&s) {
                return Err(Error::Data(format!("polarity of `{word}` is {s}, outside [-1, 1]")));
            }
        }
        Ok(SentimentLexicon { scores })
    }

    /// Generic tone and direction words; deliberately knows nothing about
    /// corporate-event words such as buybacks or probes.
    pub fn demo() -> Self {
        let entries = [
            ("strong", 0.6),
            ("solid", 0.5),
            ("record", 0.8),
            ("robust", 0.6),
            ("higher", 0.4),
            ("weak", -0.6),
            ("poor", -0.7),
            ("disappointing", -0.8),
            ("soft", -0.4),
            ("lower", -0.4),
        ];
        SentimentLexicon {
            scores: entries.iter().map(|(w, s)| (w.to_string(), *s)).collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let scores = serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Self::new(scores)
    }

    /// Mean polarity of the words found in the lexicon, 0 without hits.
    pub fn score_words<'a>(&self, words: impl IntoIterator<Item = &'a str>) -> f64 {
        let (sum, hits) = words
            .into_iter()
            .filter_map(|w| self.scores.get(w))
            .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
        if hits == 0 {
            0.0
        } else {
            sum / hits as f64
        }
    }
}

pub fn sentiment_score(instance: &Instance, lexicon: &SentimentLexicon, vocab: &Vocabulary) -> f64 {
    lexicon.score_words(instance.sequence.ids().iter().filter_map(|&id| vocab.token(id)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub strategy: String,
    pub long_only: BacktestStats,
    /// Absent for the universe benchmark.
    pub long_short: Option<BacktestStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

pub const BENCHMARK_NAME: &str = "universe_equal_weight";

impl ComparisonTable {
    pub fn row(&self, strategy: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.strategy == strategy)
    }

    /// Returns in percent, Sharpe ratios as is; undefined cells are blank.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "strategy",
            "long_only_ann_return_pct",
            "long_only_sharpe",
            "long_short_ann_return_pct",
            "long_short_sharpe",
        ])
        .expect("in-memory write");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            let ls = r.long_short.as_ref();
            w.write_record([
                r.strategy.clone(),
                (100.0 * r.long_only.annualized_return).to_string(),
                opt(r.long_only.sharpe),
                opt(ls.map(|s| 100.0 * s.annualized_return)),
                opt(ls.and_then(|s| s.sharpe)),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }
}

/// Backtests each named strategy both ways and prepends the equally weighted
/// universe over the same dates.
pub fn compare_strategies(strategies: &[(String, Vec<Score>)], universe: &Universe) -> Result<ComparisonTable> {
    let first = strategies
        .first()
        .ok_or_else(|| Error::Precondition("no strategies to compare".into()))?;
    let dates: BTreeSet<NaiveDate> = first.1.iter().map(|s| s.date).collect();
    for (name, scores) in strategies {
        let d: BTreeSet<NaiveDate> = scores.iter().map(|s| s.date).collect();
        if d != dates {
            return Err(Error::Data(format!("strategy `{name}` covers different dates than `{}`", first.0)));
        }
    }

    let by_date = universe.by_date();
    let mut bench = Vec::with_capacity(dates.len());
    for d in &dates {
        let entries = by_date
            .get(d)
            .ok_or_else(|| Error::Data(format!("universe has no entries on {d}")))?;
        bench.push(entries.iter().map(|e| e.forward_return).sum::<f64>() / entries.len() as f64);
    }

    let mut rows = vec![ComparisonRow {
        strategy: BENCHMARK_NAME.to_string(),
        long_only: BacktestStats::from_series(dates.iter().copied().collect(), bench)?,
        long_short: None,
    }];
    for (name, scores) in strategies {
        rows.push(ComparisonRow {
            strategy: name.clone(),
            long_only: backtest(scores, universe, PortfolioKind::LongOnly)?,
            long_short: Some(backtest(scores, universe, PortfolioKind::LongShort)?),
        });
    }
    Ok(ComparisonTable { rows })
}
