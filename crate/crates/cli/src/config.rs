use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use newsret::backtest::{PortfolioKind, PortfolioSpec, RankingSource};
use newsret::forecaster::FineTuneConfig;
use newsret::model::{ArchKind, ModelConfig};
use newsret::pretrain::PretrainSchedule;
use newsret::synthetic::{Frequency, SignalSpec, UniverseSpec};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// One JSON document describing a whole run. Only `seed` is required.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default = "default_window_days")]
    pub window_days: i64,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub pretrain: PretrainSchedule,
    #[serde(default)]
    pub finetune: FineTuneConfig,
    #[serde(default = "default_portfolios")]
    pub portfolios: Vec<PortfolioSpec>,
}

/// Relative paths resolve against the directory holding the config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Existing news file; defaults to the generated `news.jsonl`.
    pub news: Option<PathBuf>,
    /// Existing universe file; defaults to the generated `universe.csv`.
    pub universe: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub lexicon: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_stocks: usize,
    pub start: NaiveDate,
    pub end: NaiveDate,
    pub frequency: Frequency,
    pub signal_rate: f64,
    pub signal: SignalSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_stocks: 40,
            start: NaiveDate::from_ymd_opt(2012, 1, 1).expect("date"),
            end: NaiveDate::from_ymd_opt(2018, 12, 31).expect("date"),
            frequency: Frequency::Monthly,
            signal_rate: 0.25,
            signal: SignalSpec::two_sided(0.05, 0.02),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train_end: NaiveDate,
    pub val_end: NaiveDate,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train_end: NaiveDate::from_ymd_opt(2014, 12, 31).expect("date"),
            val_end: NaiveDate::from_ymd_opt(2015, 12, 31).expect("date"),
        }
    }
}

/// Model shape; the vocabulary size comes from the vocabulary file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub arch: ArchKind,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub mask_prob: f64,
    /// Cap on ordinary words when the vocabulary is built from news.
    pub max_vocab_words: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let desk = ModelConfig::desk(ArchKind::Encoder, 0);
        ModelSection {
            arch: desk.arch,
            d_model: desk.d_model,
            n_layers: desk.n_layers,
            n_heads: desk.n_heads,
            d_ff: desk.d_ff,
            max_len: desk.max_len,
            mask_prob: desk.mask_prob,
            max_vocab_words: 500,
        }
    }
}

impl ModelSection {
    pub fn with_vocab(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            arch: self.arch,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            vocab_size,
            max_len: self.max_len,
            mask_prob: self.mask_prob,
        }
    }
}

fn default_window_days() -> i64 {
    7
}

fn default_portfolios() -> Vec<PortfolioSpec> {
    let mut out = Vec::new();
    for source in [RankingSource::ModelForecast, RankingSource::SentimentScore] {
        for kind in [PortfolioKind::LongOnly, PortfolioKind::LongShort] {
            out.push(PortfolioSpec { kind, source });
        }
    }
    out
}

impl RunConfig {
    /// Parses and validates a config file. Problems with the file itself are
    /// usage errors; configured input files that do not exist are dependency
    /// errors.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.paths.resolve(base);
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |m: String| Err(CliError::Usage(m));
        if self.split.train_end >= self.split.val_end {
            return usage(format!(
                "split.train_end {} must precede split.val_end {}",
                self.split.train_end, self.split.val_end
            ));
        }
        if self.window_days < 1 {
            return usage("window_days must be at least 1".into());
        }
        if self.portfolios.is_empty() {
            return usage("at least one portfolio is required".into());
        }
        if self.data.start > self.data.end {
            return usage("data.start is after data.end".into());
        }
        for p in [&self.paths.news, &self.paths.universe, &self.paths.vocab, &self.paths.lexicon]
            .into_iter()
            .flatten()
        {
            if !p.exists() {
                return Err(CliError::Dependency(p.clone()));
            }
        }
        Ok(())
    }

    pub fn universe_spec(&self) -> UniverseSpec {
        UniverseSpec {
            n_stocks: self.data.n_stocks,
            start: self.data.start,
            end: self.data.end,
            frequency: self.data.frequency,
            window_days: self.window_days,
            signal_rate: self.data.signal_rate,
        }
    }

    /// Distinct ranking sources in configured order.
    pub fn sources(&self) -> Vec<RankingSource> {
        let mut out = Vec::new();
        for p in &self.portfolios {
            if !out.contains(&p.source) {
                out.push(p.source);
            }
        }
        out
    }
}

impl Paths {
    fn resolve(&mut self, base: &Path) {
        for p in [&mut self.news, &mut self.universe, &mut self.vocab, &mut self.lexicon, &mut self.out]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}
