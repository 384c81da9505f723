//! Synthetic newsflow with a planted, linear-in-counts return signal.
//!
//! Each stock gets one to five short template headlines in the look-back
//! window before every rebalance date. Some headlines carry a signal token;
//! the forward return is
//!
//! ```text
//! r = base + Σ_k β_k · count_k + ε,   ε ~ N(0, σ²)
//! ```
//!
//! where `count_k` is the number of occurrences of signal token `k` in the
//! window. Filler headlines draw tone words at random, so a sentiment lexicon
//! sees plenty of polarity but none of it predicts returns.

use std::collections::BTreeMap;

use chrono::{Datelike, Duration, Months, NaiveDate};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market_data::{window_bounds, NewsItem, Universe, UniverseEntry};
use crate::vocab::{is_special, Vocabulary};

const TONE: &[&str] = &["strong", "weak", "solid", "poor", "record", "disappointing", "robust", "soft"];
const METRIC: &[&str] = &["revenue", "earnings", "margins", "guidance", "orders"];
const TOPIC: &[&str] = &["quarterly", "annual", "segment", "regional"];
const DIRECTION: &[&str] = &["higher", "lower", "flat"];
const PRODUCT: &[&str] = &["cloud", "retail", "hardware", "software", "services"];
const EXEC: &[&str] = &["ceo", "cfo", "chairman", "management"];

const FILLER: &[&str] = &[
    "{exec} says {product} demand looks {tone} this quarter",
    "{topic} {metric} came in {direction} than analysts expected",
    "analysts see {tone} {metric} for the {topic} period",
    "company reports {tone} {metric} as {product} sales move {direction}",
    "{exec} comments on {topic} {metric} outlook at investor day",
    "shares trade {direction} after {tone} {product} update",
];

const FIXED_WORDS: &[&str] = &[
    "says", "demand", "looks", "this", "quarter", "came", "in", "than", "analysts", "expected", "see", "for", "the",
    "period", "company", "reports", "as", "sales", "move", "comments", "on", "outlook", "at", "investor", "day",
    "shares", "trade", "after", "update", "announces",
];

/// Headline used for a signal token; anything without a dedicated line falls
/// back to `company announces <token> update`.
pub fn signal_headline(token: &str) -> String {
    match token {
        "buyback" => "board approves share buyback program".to_string(),
        "probe" => "regulator opens probe into accounting practices".to_string(),
        other => format!("company announces {other} update"),
    }
}

fn signal_words(token: &str) -> Vec<String> {
    signal_headline(token).split_whitespace().map(str::to_string).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalSpec {
    /// Return per occurrence of each signal token.
    pub effects: BTreeMap<String, f64>,
    pub noise_sigma: f64,
    pub base_return: f64,
}

impl SignalSpec {
    /// `buyback` at `+beta`, `probe` at `-beta`.
    pub fn two_sided(beta: f64, noise_sigma: f64) -> Self {
        SignalSpec {
            effects: BTreeMap::from([("buyback".to_string(), beta), ("probe".to_string(), -beta)]),
            noise_sigma,
            base_return: 0.0,
        }
    }

    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::Config(format!("noise sigma must be non-negative, got {}", self.noise_sigma)));
        }
        if !self.base_return.is_finite() {
            return Err(Error::Config("base return must be finite".into()));
        }
        for (token, beta) in &self.effects {
            if !beta.is_finite() {
                return Err(Error::Config(format!("effect of `{token}` is not finite")));
            }
            match vocab.id(token) {
                Some(id) if !is_special(id) && id != crate::vocab::UNK => {}
                _ => return Err(Error::Config(format!("signal token `{token}` is not an ordinary vocabulary word"))),
            }
        }
        Ok(())
    }

    /// `base + Σ β_k · count_k` over whitespace tokens of `texts`.
    pub fn expected_return<'a>(&self, texts: impl IntoIterator<Item = &'a str>) -> f64 {
        let mut r = self.base_return;
        for text in texts {
            for word in text.split_whitespace() {
                if let Some(beta) = self.effects.get(&word.to_lowercase()) {
                    r += beta;
                }
            }
        }
        r
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Frequency {
    /// Last calendar day of each month.
    Monthly,
    /// Every seventh day from the start date.
    Weekly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniverseSpec {
    pub n_stocks: usize,
    pub start: NaiveDate,
    pub end: NaiveDate,
    pub frequency: Frequency,
    #[serde(default = "default_window_days")]
    pub window_days: i64,
    /// Probability that a headline carries a signal token.
    #[serde(default = "default_signal_rate")]
    pub signal_rate: f64,
}

fn default_window_days() -> i64 {
    7
}

fn default_signal_rate() -> f64 {
    0.25
}

impl UniverseSpec {
    pub fn monthly(n_stocks: usize, start: NaiveDate, end: NaiveDate) -> Self {
        UniverseSpec {
            n_stocks,
            start,
            end,
            frequency: Frequency::Monthly,
            window_days: default_window_days(),
            signal_rate: default_signal_rate(),
        }
    }

    /// Rebalance dates within `[start, end]`.
    pub fn dates(&self) -> Vec<NaiveDate> {
        let mut out = Vec::new();
        match self.frequency {
            Frequency::Monthly => {
                let mut first = NaiveDate::from_ymd_opt(self.start.year(), self.start.month(), 1).expect("first of month");
                loop {
                    let d = month_end(first);
                    if d > self.end {
                        break;
                    }
                    if d >= self.start {
                        out.push(d);
                    }
                    first = first + Months::new(1);
                }
            }
            Frequency::Weekly => {
                let mut d = self.start;
                while d <= self.end {
                    out.push(d);
                    d += Duration::days(7);
                }
            }
        }
        out
    }
}

fn month_end(first: NaiveDate) -> NaiveDate {
    (first + Months::new(1)).pred_opt().expect("valid date")
}

pub fn stock_id(i: usize) -> String {
    format!("S{i:03}")
}

/// Every word the generator can emit plus the signal tokens.
pub fn synthetic_vocabulary(signal: &SignalSpec) -> Vocabulary {
    let mut words: Vec<String> = Vec::new();
    for list in [TONE, METRIC, TOPIC, DIRECTION, PRODUCT, EXEC, FIXED_WORDS] {
        words.extend(list.iter().map(|w| w.to_string()));
    }
    for token in signal.effects.keys() {
        words.extend(signal_words(token));
    }
    Vocabulary::from_words(words)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub news: Vec<NewsItem>,
    pub universe: Universe,
}

fn filler_headline<R: Rng + ?Sized>(rng: &mut R) -> String {
    let template = FILLER.choose(rng).expect("templates");
    let mut out = Vec::new();
    for part in template.split_whitespace() {
        let list = match part {
            "{tone}" => TONE,
            "{metric}" => METRIC,
            "{topic}" => TOPIC,
            "{direction}" => DIRECTION,
            "{product}" => PRODUCT,
            "{exec}" => EXEC,
            word => {
                out.push(word);
                continue;
            }
        };
        out.push(list.choose(rng).expect("slot words"));
    }
    out.join(" ")
}

const NEWS_COUNT_WEIGHTS: [f64; 5] = [0.3, 0.25, 0.2, 0.15, 0.1];

/// Generates news and forward returns for `spec.n_stocks` stocks on every
/// rebalance date. The same seed gives identical output.
pub fn generate_synthetic(spec: &UniverseSpec, signal: &SignalSpec, seed: u64) -> Result<SyntheticData> {
    if spec.n_stocks < 10 {
        return Err(Error::Config(format!("need at least 10 stocks, got {}", spec.n_stocks)));
    }
    if spec.window_days < 1 {
        return Err(Error::Config("window must be at least one day".into()));
    }
    if !(0.0..=1.0).contains(&spec.signal_rate) {
        return Err(Error::Config(format!("signal rate {} outside [0, 1]", spec.signal_rate)));
    }
    let dates = spec.dates();
    if dates.is_empty() {
        return Err(Error::Config(format!("no rebalance dates between {} and {}", spec.start, spec.end)));
    }
    signal.validate(&synthetic_vocabulary(signal))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, signal.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let tokens: Vec<&String> = signal.effects.keys().collect();
    let window = Duration::days(spec.window_days);
    let window_secs = window.num_seconds();

    let mut news = Vec::new();
    let mut entries = Vec::new();
    for &date in &dates {
        let (from, _) = window_bounds(date, window);
        for s in 0..spec.n_stocks {
            let id = stock_id(s);
            let n = sample_news_count(&mut rng);
            let mut offsets: Vec<i64> = (0..n).map(|_| rng.random_range(0..window_secs)).collect();
            offsets.sort_unstable();
            let mut texts = Vec::with_capacity(n);
            for off in offsets {
                let text = if !tokens.is_empty() && rng.random_bool(spec.signal_rate) {
                    signal_headline(tokens.choose(&mut rng).expect("signal tokens"))
                } else {
                    filler_headline(&mut rng)
                };
                news.push(NewsItem {
                    stock_id: id.clone(),
                    timestamp: from + Duration::seconds(off),
                    text: text.clone(),
                });
                texts.push(text);
            }
            let eps = if signal.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            entries.push(UniverseEntry {
                date,
                stock_id: id,
                forward_return: signal.expected_return(texts.iter().map(String::as_str)) + eps,
            });
        }
    }
    news.sort_by(|a, b| (&a.stock_id, a.timestamp).cmp(&(&b.stock_id, b.timestamp)));
    Ok(SyntheticData {
        news,
        universe: Universe::new(entries)?,
    })
}

fn sample_news_count<R: Rng + ?Sized>(rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, w) in NEWS_COUNT_WEIGHTS.iter().enumerate() {
        acc += w;
        if u < acc {
            return i + 1;
        }
    }
    NEWS_COUNT_WEIGHTS.len()
}
