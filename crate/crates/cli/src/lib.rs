//! Pipeline stages behind the `newsret` command.
//!
//! Every stage reads the run config plus the artifacts of earlier stages from
//! the output directory and writes its own:
//!
//! | stage | writes |
//! |---|---|
//! | `gen-data` | `news.jsonl`, `universe.csv`, `vocab.json` |
//! | `pretrain` | `vocab.json` (if absent), `pretrained.*`, `pretrain_loss.csv` |
//! | `finetune` | `forecaster.*`, `finetune_loss.csv`, `split.json` |
//! | `predict` | `forecasts.csv` |
//! | `evaluate` | `deciles.csv` |
//! | `backtest` | `<source>_<kind>_{returns,curve}.csv`, `<source>_<kind>_stats.json`, `comparison.csv` |
//! | `report` | `report.md` |

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::Duration;
use newsret::backtest::{backtest, compare_strategies, sentiment_score, PortfolioKind, RankingSource, Score, SentimentLexicon};
use newsret::deciles::{compute_decile_table, load_forecasts, write_forecasts, Forecast};
use newsret::forecaster::{finetune, ReturnForecaster};
use newsret::market_data::{
    build_instances, load_news, load_universe, split_dataset, write_news, write_universe, DatasetSplit, Instance,
    InstanceSpec, NewsIndex, NewsItem, Universe,
};
use newsret::model::{build_model, MiniLlm};
use newsret::pretrain::{corpus_from_news, pretrain};
use newsret::synthetic::{generate_synthetic, synthetic_vocabulary};
use newsret::vocab::Vocabulary;

mod config;

pub use config::{DataConfig, ModelSection, Paths, RunConfig, SplitConfig};

pub const PRETRAINED: &str = "pretrained";
pub const FORECASTER: &str = "forecaster";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("missing dependency: {}", .0.display())]
    Dependency(PathBuf),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Dependency(_) => 3,
        }
    }
}

impl From<newsret::Error> for CliError {
    fn from(e: newsret::Error) -> Self {
        match e {
            newsret::Error::Io { path, source } if source.kind() == std::io::ErrorKind::NotFound => {
                CliError::Dependency(path)
            }
            newsret::Error::Config(m) => CliError::Usage(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    GenData,
    Pretrain,
    Finetune,
    Predict,
    Evaluate,
    Backtest,
    Report,
}

impl Command {
    pub const ALL: [Command; 7] = [
        Command::GenData,
        Command::Pretrain,
        Command::Finetune,
        Command::Predict,
        Command::Evaluate,
        Command::Backtest,
        Command::Report,
    ];
}

/// A config bound to its output directory.
pub struct Run {
    pub config: RunConfig,
    pub out: PathBuf,
}

impl Run {
    /// `out` overrides the config's output directory, which defaults to `out`
    /// next to the config file.
    pub fn new(config: RunConfig, config_path: &Path, out: Option<PathBuf>) -> Self {
        let out = out
            .or_else(|| config.paths.out.clone())
            .unwrap_or_else(|| config_path.parent().unwrap_or(Path::new(".")).join("out"));
        Run { config, out }
    }

    fn artifact(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// An input that an earlier stage should have written.
    fn require(&self, path: PathBuf) -> Result<PathBuf, CliError> {
        if path.exists() {
            Ok(path)
        } else {
            Err(CliError::Dependency(path))
        }
    }

    fn news_path(&self) -> Result<PathBuf, CliError> {
        self.require(self.config.paths.news.clone().unwrap_or_else(|| self.artifact("news.jsonl")))
    }

    fn universe_path(&self) -> Result<PathBuf, CliError> {
        self.require(self.config.paths.universe.clone().unwrap_or_else(|| self.artifact("universe.csv")))
    }

    fn vocab_path(&self) -> PathBuf {
        self.config.paths.vocab.clone().unwrap_or_else(|| self.artifact("vocab.json"))
    }

    fn write(&self, name: &str, body: &str) -> Result<(), CliError> {
        let path = self.artifact(name);
        fs::write(&path, body).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }

    fn news(&self) -> Result<Vec<NewsItem>, CliError> {
        Ok(load_news(&self.news_path()?)?)
    }

    fn universe(&self) -> Result<Universe, CliError> {
        Ok(load_universe(&self.universe_path()?)?)
    }

    fn vocab(&self) -> Result<Vocabulary, CliError> {
        Ok(Vocabulary::load(&self.require(self.vocab_path())?)?)
    }

    fn lexicon(&self) -> Result<SentimentLexicon, CliError> {
        match &self.config.paths.lexicon {
            Some(p) => Ok(SentimentLexicon::load(p)?),
            None => Ok(SentimentLexicon::demo()),
        }
    }

    fn split(&self, vocab: &Vocabulary) -> Result<DatasetSplit, CliError> {
        let spec = InstanceSpec {
            window: Duration::days(self.config.window_days),
            max_len: self.config.model.max_len,
            arch: self.config.model.arch,
        };
        let index = NewsIndex::new(self.news()?);
        let instances = build_instances(&self.universe()?, &index, vocab, spec)?;
        Ok(split_dataset(instances, self.config.split.train_end, self.config.split.val_end)?)
    }

    fn seed(&self, stream: u64) -> u64 {
        self.config.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stream)
    }
}

/// Runs one stage. Progress goes to stderr; artifacts go to the output
/// directory.
pub fn run_command(command: Command, run: &Run) -> Result<(), CliError> {
    fs::create_dir_all(&run.out).map_err(|e| CliError::Data(format!("{}: {e}", run.out.display())))?;
    match command {
        Command::GenData => gen_data(run),
        Command::Pretrain => run_pretrain(run),
        Command::Finetune => run_finetune(run),
        Command::Predict => run_predict(run),
        Command::Evaluate => run_evaluate(run),
        Command::Backtest => run_backtest(run),
        Command::Report => emit_report(run).map(|_| ()),
    }
}

fn gen_data(run: &Run) -> Result<(), CliError> {
    let c = &run.config;
    let data = generate_synthetic(&c.universe_spec(), &c.data.signal, run.seed(1))?;
    write_news(&run.artifact("news.jsonl"), &data.news)?;
    write_universe(&run.artifact("universe.csv"), data.universe.entries())?;
    synthetic_vocabulary(&c.data.signal).save(&run.artifact("vocab.json"))?;
    eprintln!("gen-data: {} news items, {} universe rows", data.news.len(), data.universe.len());
    Ok(())
}

fn run_pretrain(run: &Run) -> Result<(), CliError> {
    let c = &run.config;
    let news = run.news()?;
    // only news available before the end of training feeds the language model
    let cutoff = c.split.train_end;
    let train_news: Vec<NewsItem> = news.into_iter().filter(|n| n.timestamp.date_naive() <= cutoff).collect();
    if train_news.is_empty() {
        return Err(CliError::Data(format!("no news on or before {cutoff}")));
    }

    let vocab_path = run.vocab_path();
    let vocab = if vocab_path.exists() {
        Vocabulary::load(&vocab_path)?
    } else {
        let v = Vocabulary::from_texts(train_news.iter().map(|n| n.text.as_str()), c.model.max_vocab_words);
        v.save(&vocab_path)?;
        v
    };

    let model = build_model(c.model.with_vocab(vocab.len()), run.seed(2))?;
    let corpus = corpus_from_news(&train_news, &vocab, c.model.max_len);
    let (model, losses) = pretrain(model, &corpus, &c.pretrain, run.seed(3))?;
    model.save(&run.out, PRETRAINED)?;

    let mut csv = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        writeln!(csv, "{i},{l}").expect("string write");
    }
    run.write("pretrain_loss.csv", &csv)?;
    eprintln!(
        "pretrain: loss {:.4} -> {:.4} over {} steps",
        losses[0],
        losses[losses.len() - 1],
        losses.len()
    );
    Ok(())
}

fn run_finetune(run: &Run) -> Result<(), CliError> {
    let c = &run.config;
    run.require(run.artifact(&format!("{PRETRAINED}.params.json")))?;
    let model = MiniLlm::load(&run.out, PRETRAINED)?;
    let vocab = run.vocab()?;
    if model.config.vocab_size != vocab.len() {
        return Err(CliError::Data(format!(
            "pretrained model expects {} tokens, vocabulary has {}",
            model.config.vocab_size,
            vocab.len()
        )));
    }
    let split = run.split(&vocab)?;
    for w in &split.warnings {
        eprintln!("warning: {w}");
    }
    if let Some(m) = split.manifest() {
        run.write("split.json", &serde_json::to_string_pretty(&m).expect("manifest serialises"))?;
    }

    let forecaster = ReturnForecaster::from_pretrained(model, &c.finetune, run.seed(4))?;
    let (forecaster, report) = finetune(forecaster, &split.train, &split.validation, &c.finetune, run.seed(5))?;
    forecaster.save(&run.out, FORECASTER)?;

    let mut csv = String::from("epoch,train_mse,val_mse\n");
    writeln!(csv, "init,{},", report.initial_train_mse).expect("string write");
    for (e, t) in report.train_mse.iter().enumerate() {
        let v = report.val_mse.get(e).map(|v| v.to_string()).unwrap_or_default();
        writeln!(csv, "{e},{t},{v}").expect("string write");
    }
    run.write("finetune_loss.csv", &csv)?;
    eprintln!(
        "finetune: {} train / {} validation instances, best epoch {}",
        split.train.len(),
        split.validation.len(),
        report.best_epoch
    );
    Ok(())
}

fn test_instances(run: &Run, vocab: &Vocabulary) -> Result<Vec<Instance>, CliError> {
    let split = run.split(vocab)?;
    if split.test.is_empty() {
        return Err(CliError::Data("test split is empty".into()));
    }
    Ok(split.test)
}

fn run_predict(run: &Run) -> Result<(), CliError> {
    run.require(run.artifact(&format!("{FORECASTER}.params.json")))?;
    let forecaster = ReturnForecaster::load(&run.out, FORECASTER)?;
    let vocab = run.vocab()?;
    let test = test_instances(run, &vocab)?;
    let preds = forecaster.predict_all(&test)?;
    let forecasts: Vec<Forecast> = test
        .iter()
        .zip(preds)
        .map(|(i, p)| Forecast {
            stock_id: i.stock_id.clone(),
            date: i.date,
            predicted: p,
            actual: i.label,
        })
        .collect();
    write_forecasts(&run.artifact("forecasts.csv"), &forecasts)?;
    eprintln!("predict: {} forecasts", forecasts.len());
    Ok(())
}

fn forecasts(run: &Run, universe: &Universe) -> Result<Vec<Forecast>, CliError> {
    let path = run.require(run.artifact("forecasts.csv"))?;
    Ok(load_forecasts(&path, universe)?)
}

fn run_evaluate(run: &Run) -> Result<(), CliError> {
    let universe = run.universe()?;
    let table = compute_decile_table(&forecasts(run, &universe)?)?;
    table.save(&run.artifact("deciles.csv"))?;
    if let Some(s) = table.spread() {
        eprintln!("evaluate: top minus bottom decile return {s:.4}");
    }
    Ok(())
}

pub fn source_name(source: RankingSource) -> &'static str {
    match source {
        RankingSource::ModelForecast => "model_forecast",
        RankingSource::SentimentScore => "sentiment_score",
    }
}

pub fn kind_name(kind: PortfolioKind) -> &'static str {
    match kind {
        PortfolioKind::LongOnly => "long_only",
        PortfolioKind::LongShort => "long_short",
    }
}

fn run_backtest(run: &Run) -> Result<(), CliError> {
    let universe = run.universe()?;
    let model_scores: Vec<Score> = forecasts(run, &universe)?.iter().map(Score::from).collect();

    let mut strategies = Vec::new();
    for source in run.config.sources() {
        let scores = match source {
            RankingSource::ModelForecast => model_scores.clone(),
            RankingSource::SentimentScore => {
                let vocab = run.vocab()?;
                let lexicon = run.lexicon()?;
                test_instances(run, &vocab)?
                    .iter()
                    .map(|i| Score {
                        stock_id: i.stock_id.clone(),
                        date: i.date,
                        value: sentiment_score(i, &lexicon, &vocab),
                    })
                    .collect()
            }
        };
        strategies.push((source_name(source).to_string(), scores));
    }

    for spec in &run.config.portfolios {
        let scores = &strategies
            .iter()
            .find(|(n, _)| n == source_name(spec.source))
            .expect("every configured source is scored")
            .1;
        let stats = backtest(scores, &universe, spec.kind)?;
        stats.save(&run.out, &format!("{}_{}", source_name(spec.source), kind_name(spec.kind)))?;
    }
    let table = compare_strategies(&strategies, &universe)?;
    run.write("comparison.csv", &table.to_csv())?;
    eprintln!("backtest: {} strategies over {} months", strategies.len(), table.rows[0].long_only.n_months);
    Ok(())
}

fn csv_to_markdown(csv_text: &str) -> String {
    let mut out = String::new();
    for (i, line) in csv_text.lines().enumerate() {
        let cells: Vec<String> = line
            .split(',')
            .map(|c| match c.parse::<f64>() {
                Ok(v) if c.contains('.') => format!("{v:.4}"),
                _ => c.to_string(),
            })
            .collect();
        writeln!(out, "| {} |", cells.join(" | ")).expect("string write");
        if i == 0 {
            writeln!(out, "|{}", "---|".repeat(cells.len())).expect("string write");
        }
    }
    out
}

/// Writes `report.md` and returns its text. The decile and comparison tables
/// are embedded; every CSV in the output directory is listed.
pub fn emit_report(run: &Run) -> Result<String, CliError> {
    let read = |name: &str| -> Result<String, CliError> {
        let path = run.require(run.artifact(name))?;
        fs::read_to_string(&path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    };
    let deciles = read("deciles.csv")?;
    let comparison = read("comparison.csv")?;
    for spec in &run.config.portfolios {
        run.require(run.artifact(&format!(
            "{}_{}_curve.csv",
            source_name(spec.source),
            kind_name(spec.kind)
        )))?;
    }

    let c = &run.config;
    let mut md = String::new();
    writeln!(md, "# Run report\n").expect("string write");
    writeln!(
        md,
        "Seed {}. Model: {}, d_model={}, n_layers={}, pooling={}, lora_rank={}.\n",
        c.seed,
        serde_json::to_value(c.model.arch).expect("enum serialises").as_str().unwrap_or_default(),
        c.model.d_model,
        c.model.n_layers,
        serde_json::to_value(c.finetune.pooling).expect("enum serialises").as_str().unwrap_or_default(),
        c.finetune.lora_rank
    )
    .expect("string write");
    if let Ok(split) = read("split.json") {
        writeln!(md, "## Split\n\n```json\n{}\n```\n", split.trim_end()).expect("string write");
    }
    writeln!(md, "## Decile table\n\nFrom `deciles.csv`.\n\n{}", csv_to_markdown(&deciles)).expect("string write");
    writeln!(
        md,
        "## Strategy comparison\n\nFrom `comparison.csv`. Returns are annualised, in percent.\n\n{}",
        csv_to_markdown(&comparison)
    )
    .expect("string write");

    let mut csvs: Vec<String> = fs::read_dir(&run.out)
        .map_err(|e| CliError::Data(format!("{}: {e}", run.out.display())))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".csv"))
        .collect();
    csvs.sort();
    writeln!(md, "## Files\n").expect("string write");
    for name in csvs {
        writeln!(md, "- `{name}`").expect("string write");
    }
    run.write("report.md", &md)?;
    Ok(md)
}
