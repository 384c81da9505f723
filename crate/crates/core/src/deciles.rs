//! Decile assignment and pooled decile diagnostics.
//!
//! At each date the forecasts are ranked into ten buckets, separately by
//! predicted and by realised return. Pairs are then pooled across dates by
//! predicted decile and summarised per bucket.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market_data::Universe;

pub const N_DECILES: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Forecast {
    pub stock_id: String,
    pub date: NaiveDate,
    pub predicted: f64,
    pub actual: f64,
}

/// Decile of each value, in input order. Values are ranked ascending with
/// ties broken by ascending key; rank `i` of `S` lands in `floor(10 i / S)`.
pub fn assign_deciles<K: AsRef<str>>(date: NaiveDate, values: &[(K, f64)]) -> Result<Vec<usize>> {
    let n = values.len();
    if n < N_DECILES {
        return Err(Error::InsufficientUniverse { date, found: n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        values[a]
            .1
            .total_cmp(&values[b].1)
            .then_with(|| values[a].0.as_ref().cmp(values[b].0.as_ref()))
    });
    let mut out = vec![0; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = N_DECILES * rank / n;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecileRow {
    pub decile: usize,
    pub count: usize,
    /// `None` when the decile is empty.
    pub rmse: Option<f64>,
    pub precision: Option<f64>,
    pub mean_return: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecileTable {
    pub rows: Vec<DecileRow>,
}

impl DecileTable {
    pub fn total(&self) -> usize {
        self.rows.iter().map(|r| r.count).sum()
    }

    /// Pooled mean return of the top decile minus that of the bottom one.
    pub fn spread(&self) -> Option<f64> {
        Some(self.rows[N_DECILES - 1].mean_return? - self.rows[0].mean_return?)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["decile", "count", "rmse", "precision", "mean_return"])
            .expect("in-memory write");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.decile.to_string(),
                r.count.to_string(),
                opt(r.rmse),
                opt(r.precision),
                opt(r.mean_return),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Checks that values are finite and `(stock, date)` keys unique, then groups
/// by date with each group sorted by stock id.
pub fn group_by_date(forecasts: &[Forecast]) -> Result<BTreeMap<NaiveDate, Vec<&Forecast>>> {
    let mut seen = BTreeSet::new();
    let mut by_date: BTreeMap<NaiveDate, Vec<&Forecast>> = BTreeMap::new();
    for f in forecasts {
        if !f.predicted.is_finite() || !f.actual.is_finite() {
            return Err(Error::Data(format!("non-finite forecast for {} on {}", f.stock_id, f.date)));
        }
        if !seen.insert((f.date, f.stock_id.as_str())) {
            return Err(Error::Data(format!("duplicate forecast for {} on {}", f.stock_id, f.date)));
        }
        by_date.entry(f.date).or_default().push(f);
    }
    for group in by_date.values_mut() {
        group.sort_by(|a, b| a.stock_id.cmp(&b.stock_id));
    }
    Ok(by_date)
}

pub fn compute_decile_table(forecasts: &[Forecast]) -> Result<DecileTable> {
    #[derive(Default)]
    struct Acc {
        count: usize,
        sq_err: f64,
        hits: usize,
        ret: f64,
    }
    let mut acc: Vec<Acc> = (0..N_DECILES).map(|_| Acc::default()).collect();

    for (date, group) in group_by_date(forecasts)? {
        let pred: Vec<(&str, f64)> = group.iter().map(|f| (f.stock_id.as_str(), f.predicted)).collect();
        let truth: Vec<(&str, f64)> = group.iter().map(|f| (f.stock_id.as_str(), f.actual)).collect();
        let pd = assign_deciles(date, &pred)?;
        let td = assign_deciles(date, &truth)?;
        for (i, f) in group.iter().enumerate() {
            let a = &mut acc[pd[i]];
            a.count += 1;
            a.sq_err += (f.predicted - f.actual).powi(2);
            a.hits += usize::from(pd[i] == td[i]);
            a.ret += f.actual;
        }
    }

    let rows = acc
        .into_iter()
        .enumerate()
        .map(|(decile, a)| {
            let n = a.count as f64;
            let nonempty = a.count > 0;
            DecileRow {
                decile,
                count: a.count,
                rmse: nonempty.then(|| (a.sq_err / n).sqrt()),
                precision: nonempty.then(|| a.hits as f64 / n),
                mean_return: nonempty.then(|| a.ret / n),
            }
        })
        .collect();
    Ok(DecileTable { rows })
}

/// Writes `date,stock_id,forecast`, sorted by date then stock.
pub fn forecasts_to_csv(forecasts: &[Forecast]) -> String {
    let mut sorted: Vec<&Forecast> = forecasts.iter().collect();
    sorted.sort_by(|a, b| (a.date, &a.stock_id).cmp(&(b.date, &b.stock_id)));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["date", "stock_id", "forecast"]).expect("in-memory write");
    for f in sorted {
        w.write_record([f.date.to_string(), f.stock_id.clone(), f.predicted.to_string()])
            .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

pub fn write_forecasts(path: &Path, forecasts: &[Forecast]) -> Result<()> {
    fs::write(path, forecasts_to_csv(forecasts)).map_err(|e| Error::io(path, e))
}

/// Reads a forecast file and attaches realised returns from `universe`.
pub fn load_forecasts(path: &Path, universe: &Universe) -> Result<Vec<Forecast>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["date", "stock_id", "forecast"] {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: "expected header date,stock_id,forecast".into(),
        });
    }
    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let record = record.map_err(|e| parse_err(e.to_string()))?;
        if record.len() != 3 {
            return Err(parse_err(format!("expected 3 fields, found {}", record.len())));
        }
        let date = NaiveDate::parse_from_str(&record[0], "%Y-%m-%d").map_err(|e| parse_err(e.to_string()))?;
        let stock_id = record[1].to_string();
        let predicted: f64 = record[2].parse().map_err(|_| parse_err(format!("bad forecast `{}`", &record[2])))?;
        let actual = universe
            .forward_return(&stock_id, date)
            .ok_or_else(|| Error::Lookup {
                stock_id: stock_id.clone(),
                date,
            })?;
        out.push(Forecast {
            stock_id,
            date,
            predicted,
            actual,
        });
    }
    Ok(out)
}
