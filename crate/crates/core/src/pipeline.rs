//! Train-time screening, streaming admission and the storage/search
//! benchmark.
//!
//! Training runs split, scale, anomaly removal, valuation against the
//! reference block, the keep policy, the regressor fit on kept rows and the
//! store population, in that order. Streamed records go through the same
//! scaler and forest and are valued as an extra player of the training game.

use std::collections::BTreeMap;
use std::fs;
use std::hint::black_box;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anomaly::{fit_forest, flag_anomalies, ForestModel};
use crate::config::PipelineConfig;
use crate::dataset::{load_ccpp, split, subsplit_test, synth_ccpp, Dataset, KeywordBin, Provenance, Scaler, SensorRecord};
use crate::error::{Error, Result, StageExt};
use crate::regressor::{fit_gbrt, kfold_cv, metrics, residuals, BoostedEnsemble, CvReport, GbrtParams, RegressionMetrics, ResidualExport};
use crate::sse::{keygen, SearchableStore, TABLE_HEADER_BYTES};
use crate::valuation::{percentile, select_keep, shapley_exact, CandidateValuer, KeepPolicy, LabeledSet, ValuationReport};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// The UCI file when a path is given, otherwise the synthetic generator.
pub fn load_dataset(path: Option<&Path>, config: &PipelineConfig) -> Result<Dataset> {
    match path {
        Some(p) => load_ccpp(p),
        None => synth_ccpp(config.synth_n, config.synth_seed),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
    /// Leading block of `test` used as valuation reference points.
    pub refs: Dataset,
    /// Remainder of `test`, used for model evaluation.
    pub validation: Dataset,
}

pub fn split_stages(config: &PipelineConfig, dataset: &Dataset) -> Result<Splits> {
    let (train, test) = split(dataset, config.train_fraction, config.split_seed).stage("split")?;
    let (refs, validation) = subsplit_test(&test, config.shap_ref_size).stage("split")?;
    Ok(Splits {
        train,
        test,
        refs,
        validation,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainCounts {
    pub dataset: usize,
    pub train: usize,
    pub test: usize,
    pub shap_ref: usize,
    pub validation: usize,
    pub anomalies_removed: usize,
    pub valued: usize,
    pub kept: usize,
}

/// Forest, valuation game and admission threshold of a screened pipeline.
pub struct Screening {
    pub forest: ForestModel,
    /// Training records left after anomaly removal, in split order.
    pub cleaned: Dataset,
    pub valuation: ValuationReport,
    pub valuer: CandidateValuer,
    pub admission_threshold: f64,
}

fn labeled(scaler: &Scaler, d: &Dataset) -> Result<LabeledSet> {
    LabeledSet::new(scaler.apply(d), d.targets())
}

fn positions(mask: &[bool], want: bool) -> Vec<usize> {
    mask.iter()
        .enumerate()
        .filter(|&(_, &m)| m == want)
        .map(|(i, _)| i)
        .collect()
}

fn build_screening(
    config: &PipelineConfig,
    splits: &Splits,
    scaler: &Scaler,
    forest: ForestModel,
    valuation: Option<ValuationReport>,
) -> Result<Screening> {
    let x_train = scaler.apply(&splits.train);
    let flags = flag_anomalies(&forest, &x_train).stage("anomaly")?;
    let cleaned = splits.train.select(&positions(&flags, false));
    let train_set = labeled(scaler, &cleaned).stage("valuation")?;
    let ref_set = labeled(scaler, &splits.refs).stage("valuation")?;
    let valuation = match valuation {
        Some(v) => v,
        None => {
            let values = shapley_exact(&train_set, &ref_set, config.valuation_k).stage("valuation")?;
            ValuationReport::new(values, config.keep_policy).stage("valuation")?
        }
    };
    if valuation.values.len() != cleaned.len() {
        return Err(Error::format("valuation does not match the cleaned training set")).stage("valuation");
    }
    let admission_threshold = percentile(&valuation.values, config.admit_percentile).stage("valuation")?;
    let valuer = CandidateValuer::new(train_set, ref_set, config.valuation_k).stage("valuation")?;
    Ok(Screening {
        forest,
        cleaned,
        valuation,
        valuer,
        admission_threshold,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionReason {
    Admitted,
    RejectedAnomaly,
    RejectedLowValue,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScreeningDecision {
    pub id: u32,
    pub admitted: bool,
    pub reason: DecisionReason,
    /// `None` when screening is disabled.
    pub anomaly_score: Option<f64>,
    /// `None` when screening is disabled or the anomaly check already rejected.
    pub shapley_value: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestStats {
    pub streamed: usize,
    pub admitted: usize,
    pub rejected_anomaly: usize,
    pub rejected_low_value: usize,
}

impl IngestStats {
    fn count(&mut self, reason: DecisionReason) {
        self.streamed += 1;
        match reason {
            DecisionReason::Admitted => self.admitted += 1,
            DecisionReason::RejectedAnomaly => self.rejected_anomaly += 1,
            DecisionReason::RejectedLowValue => self.rejected_low_value += 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub fraction: f64,
    pub kept: usize,
    pub rmse: f64,
}

pub struct TrainedBundle {
    config: PipelineConfig,
    splits: Splits,
    scaler: Scaler,
    screening: Option<Screening>,
    kept: Dataset,
    model: BoostedEnsemble,
    validation_metrics: RegressionMetrics,
    store: SearchableStore,
    counts: TrainCounts,
}

/// Runs the training pipeline and populates the store with kept rows.
pub fn train_pipeline(config: &PipelineConfig, dataset: &Dataset) -> Result<TrainedBundle> {
    config.validate().stage("config")?;
    let splits = split_stages(config, dataset)?;
    let scaler = Scaler::fit(&splits.train).stage("scale")?;
    let screening = if config.screening_enabled {
        let x_train = scaler.apply(&splits.train);
        let forest = fit_forest(&x_train, &config.forest, config.forest_seed).stage("anomaly")?;
        Some(build_screening(config, &splits, &scaler, forest, None)?)
    } else {
        None
    };
    let kept = match &screening {
        Some(s) => s.cleaned.select(&positions(&s.valuation.keep_mask, true)),
        None => splits.train.clone(),
    };
    let model = fit_gbrt(&scaler.apply(&kept), &kept.targets(), &config.gbrt).stage("regressor")?;
    let keys = keygen(&config.master_secret).stage("store")?;
    let mut store = SearchableStore::new(keys);
    for r in kept.records() {
        store.insert(r).stage("store")?;
    }
    TrainedBundle::assemble(config.clone(), splits, scaler, screening, kept, model, store)
}

impl TrainedBundle {
    fn assemble(
        config: PipelineConfig,
        splits: Splits,
        scaler: Scaler,
        screening: Option<Screening>,
        kept: Dataset,
        model: BoostedEnsemble,
        store: SearchableStore,
    ) -> Result<Self> {
        let pred = model.predict_all(&scaler.apply(&splits.validation)).stage("regressor")?;
        let validation_metrics = metrics(&splits.validation.targets(), &pred).stage("regressor")?;
        let counts = TrainCounts {
            dataset: splits.train.len() + splits.test.len(),
            train: splits.train.len(),
            test: splits.test.len(),
            shap_ref: splits.refs.len(),
            validation: splits.validation.len(),
            anomalies_removed: screening.as_ref().map_or(0, |s| splits.train.len() - s.cleaned.len()),
            valued: screening.as_ref().map_or(0, |s| s.cleaned.len()),
            kept: kept.len(),
        };
        Ok(Self {
            config,
            splits,
            scaler,
            screening,
            kept,
            model,
            validation_metrics,
            store,
            counts,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn splits(&self) -> &Splits {
        &self.splits
    }

    pub fn scaler(&self) -> &Scaler {
        &self.scaler
    }

    pub fn screening(&self) -> Option<&Screening> {
        self.screening.as_ref()
    }

    /// Training records the regressor was fit on and the store was seeded with.
    pub fn kept(&self) -> &Dataset {
        &self.kept
    }

    pub fn model(&self) -> &BoostedEnsemble {
        &self.model
    }

    pub fn validation_metrics(&self) -> RegressionMetrics {
        self.validation_metrics
    }

    pub fn store(&self) -> &SearchableStore {
        &self.store
    }

    pub fn counts(&self) -> TrainCounts {
        self.counts
    }

    pub fn screen(&self, r: &SensorRecord) -> Result<ScreeningDecision> {
        let Some(s) = &self.screening else {
            return Ok(ScreeningDecision {
                id: r.id,
                admitted: true,
                reason: DecisionReason::Admitted,
                anomaly_score: None,
                shapley_value: None,
            });
        };
        let x = self.scaler.transform_row(&r.features());
        let score = s.forest.score(&x)?;
        if score > s.forest.threshold() {
            return Ok(ScreeningDecision {
                id: r.id,
                admitted: false,
                reason: DecisionReason::RejectedAnomaly,
                anomaly_score: Some(score),
                shapley_value: None,
            });
        }
        let value = s.valuer.value(&x, r.pe)?;
        let admitted = value >= s.admission_threshold;
        Ok(ScreeningDecision {
            id: r.id,
            admitted,
            reason: if admitted {
                DecisionReason::Admitted
            } else {
                DecisionReason::RejectedLowValue
            },
            anomaly_score: Some(score),
            shapley_value: Some(value),
        })
    }

    pub fn screen_all(&self, records: &[SensorRecord]) -> Result<Vec<ScreeningDecision>> {
        records.par_iter().map(|r| self.screen(r)).collect()
    }

    /// Screens `records` and stores the admitted ones in stream order.
    /// Records admitted before a failing insert stay stored.
    pub fn ingest_stream(&mut self, records: &[SensorRecord]) -> Result<IngestStats> {
        let decisions = self.screen_all(records).stage("ingest")?;
        let mut stats = IngestStats::default();
        for (r, d) in records.iter().zip(&decisions) {
            if d.admitted {
                self.store.insert(r).stage("ingest")?;
            }
            stats.count(d.reason);
        }
        Ok(stats)
    }

    /// Streams the held-out test records (reference block included).
    pub fn ingest_test_stream(&mut self) -> Result<IngestStats> {
        let records = self.splits.test.records().to_vec();
        self.ingest_stream(&records)
    }

    pub fn residuals(&self) -> Result<ResidualExport> {
        let pred = self.model.predict_all(&self.scaler.apply(&self.splits.validation))?;
        residuals(&self.splits.validation.targets(), &pred)
    }

    pub fn cross_validate(&self) -> Result<CvReport> {
        kfold_cv(
            &self.scaler.apply(&self.kept),
            &self.kept.targets(),
            self.config.cv_folds,
            &self.config.gbrt,
            self.config.cv_seed,
        )
        .stage("cv")
    }

    pub fn tradeoff(&self, fractions: &[f64]) -> Result<Vec<TradeoffPoint>> {
        let s = self
            .screening
            .as_ref()
            .ok_or_else(|| Error::arg("the trade-off curve needs a screened pipeline"))
            .stage("tradeoff")?;
        tradeoff_from(&self.config, &self.splits, &self.scaler, s, fractions)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        self.config.save(dir.join(CONFIG_FILE))?;
        self.splits.train.write_csv(dir.join(TRAIN_FILE), true)?;
        self.splits.test.write_csv(dir.join(TEST_FILE), true)?;
        fs::write(dir.join(MODEL_FILE), self.model.to_bytes())?;
        if let Some(s) = &self.screening {
            fs::write(dir.join(FOREST_FILE), s.forest.to_bytes())?;
        }
        let meta = BundleMeta {
            scaler: self.scaler.clone(),
            valuation: self.screening.as_ref().map(|s| s.valuation.clone()),
        };
        fs::write(dir.join(META_FILE), serde_json::to_vec_pretty(&meta)?)?;
        self.store.save(dir.join(STORE_DIR))?;
        Ok(())
    }

    /// Reloads a bundle written by [`TrainedBundle::save`], including any
    /// records ingested since.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let config = PipelineConfig::load(dir.join(CONFIG_FILE)).stage("config")?;
        let train = load_ccpp(dir.join(TRAIN_FILE)).stage("split")?;
        let test = load_ccpp(dir.join(TEST_FILE)).stage("split")?;
        let (refs, validation) = subsplit_test(&test, config.shap_ref_size).stage("split")?;
        let splits = Splits {
            train,
            test,
            refs,
            validation,
        };
        let meta: BundleMeta = serde_json::from_slice(&fs::read(dir.join(META_FILE))?)?;
        let model = BoostedEnsemble::from_bytes(&fs::read(dir.join(MODEL_FILE))?).stage("regressor")?;
        let screening = match (config.screening_enabled, meta.valuation) {
            (true, Some(valuation)) => {
                let forest = ForestModel::from_bytes(&fs::read(dir.join(FOREST_FILE))?).stage("anomaly")?;
                Some(build_screening(&config, &splits, &meta.scaler, forest, Some(valuation))?)
            }
            (false, None) => None,
            _ => return Err(Error::format("bundle screening state is inconsistent")),
        };
        let kept = match &screening {
            Some(s) => s.cleaned.select(&positions(&s.valuation.keep_mask, true)),
            None => splits.train.clone(),
        };
        let keys = keygen(&config.master_secret).stage("store")?;
        let store = SearchableStore::load(dir.join(STORE_DIR), keys).stage("store")?;
        Self::assemble(config, splits, meta.scaler, screening, kept, model, store)
    }

    /// Persists only the store, after ingesting into a loaded bundle.
    pub fn save_store(&self, dir: impl AsRef<Path>) -> Result<()> {
        self.store.save(dir.as_ref().join(STORE_DIR))
    }
}

const CONFIG_FILE: &str = "config.kv";
const TRAIN_FILE: &str = "train.csv";
const TEST_FILE: &str = "test.csv";
const MODEL_FILE: &str = "model.bin";
const FOREST_FILE: &str = "forest.bin";
const META_FILE: &str = "meta.json";
const STORE_DIR: &str = "store";

#[derive(Serialize, Deserialize)]
struct BundleMeta {
    scaler: Scaler,
    valuation: Option<ValuationReport>,
}

fn tradeoff_from(
    config: &PipelineConfig,
    splits: &Splits,
    scaler: &Scaler,
    screening: &Screening,
    fractions: &[f64],
) -> Result<Vec<TradeoffPoint>> {
    let mut fractions = fractions.to_vec();
    if fractions.is_empty() {
        return Err(Error::arg("no trade-off fractions")).stage("tradeoff");
    }
    if let Some(f) = fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(Error::arg(format!("trade-off fraction {f} outside (0, 1]"))).stage("tradeoff");
    }
    fractions.sort_by(f64::total_cmp);
    fractions.dedup();
    let profile = GbrtParams::profile(config.tradeoff_profile);
    let params = GbrtParams {
        n_trees: profile.n_trees,
        learning_rate: profile.learning_rate,
        ..config.gbrt
    };
    let x_val = scaler.apply(&splits.validation);
    let y_val = splits.validation.targets();
    fractions
        .into_iter()
        .map(|fraction| {
            let mask = select_keep(&screening.valuation.values, KeepPolicy::TopFraction { fraction })?;
            let kept = screening.cleaned.select(&positions(&mask, true));
            let model = fit_gbrt(&scaler.apply(&kept), &kept.targets(), &params)?;
            let rmse = metrics(&y_val, &model.predict_all(&x_val)?)?.rmse;
            Ok(TradeoffPoint {
                fraction,
                kept: kept.len(),
                rmse,
            })
        })
        .collect::<Result<_>>()
        .stage("tradeoff")
}

/// Validation RMSE after keeping the top `f` Shapley-ranked training rows,
/// for each fraction in ascending order. Fits use `tradeoff.profile`.
pub fn tradeoff_curve(config: &PipelineConfig, dataset: &Dataset, fractions: &[f64]) -> Result<Vec<TradeoffPoint>> {
    config.validate().stage("config")?;
    let splits = split_stages(config, dataset)?;
    let scaler = Scaler::fit(&splits.train).stage("scale")?;
    let forest = fit_forest(&scaler.apply(&splits.train), &config.forest, config.forest_seed).stage("anomaly")?;
    let screening = build_screening(config, &splits, &scaler, forest, None)?;
    tradeoff_from(config, &splits, &scaler, &screening, fractions)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub repetitions: usize,
    pub mean_us: f64,
    /// Sample standard deviation.
    pub std_us: f64,
}

impl TimingStats {
    pub fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len();
        if n == 0 {
            return Self::default();
        }
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Self {
            repetitions: n,
            mean_us: mean,
            std_us: var.sqrt(),
        }
    }

    fn clear(&mut self) {
        self.mean_us = 0.0;
        self.std_us = 0.0;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeReport {
    pub scheme: String,
    pub screening: bool,
    pub train_admitted: usize,
    pub stream: IngestStats,
    pub entries: usize,
    pub table_bytes: usize,
    pub store_bytes: usize,
    /// Hits per keyword.
    pub hits: BTreeMap<String, usize>,
    pub search_per_keyword: BTreeMap<String, TimingStats>,
    /// Over all keywords and repetitions.
    pub search: TimingStats,
    /// Trapdoor, search, fetch and decrypt of all four keywords.
    pub overall: TimingStats,
    pub validation: RegressionMetrics,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ratios {
    pub entries: f64,
    /// Table bytes without the fixed header.
    pub table_payload: f64,
    pub table_total: f64,
    pub store: f64,
    pub search_time: f64,
    pub overall_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub schema_version: u32,
    pub dataset_source: String,
    pub dataset_records: usize,
    pub cloud_mode: String,
    pub config: String,
    pub train_counts: TrainCounts,
    pub baseline: SchemeReport,
    pub mini: SchemeReport,
    pub ratios: Ratios,
    pub search_improvement_pct: f64,
    pub overall_improvement_pct: f64,
    pub cv: Option<CvReport>,
    pub tradeoff: Option<Vec<TradeoffPoint>>,
}

impl BenchmarkReport {
    /// Copy with every timing-derived field zeroed.
    pub fn without_timings(&self) -> Self {
        let mut r = self.clone();
        for s in [&mut r.baseline, &mut r.mini] {
            s.search.clear();
            s.overall.clear();
            s.search_per_keyword.values_mut().for_each(TimingStats::clear);
        }
        r.ratios.search_time = 0.0;
        r.ratios.overall_time = 0.0;
        r.search_improvement_pct = 0.0;
        r.overall_improvement_pct = 0.0;
        r
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

#[derive(Default)]
struct Samples {
    per_keyword: BTreeMap<String, Vec<f64>>,
    search: Vec<f64>,
    overall: Vec<f64>,
    hits: BTreeMap<String, usize>,
}

fn micros(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e6
}

fn time_queries(store: &SearchableStore, samples: &mut Samples, record: bool) -> Result<()> {
    let mut overall = 0.0;
    for bin in KeywordBin::ALL {
        let start = Instant::now();
        let token = store.trapdoor(bin.as_str());
        let search_start = Instant::now();
        let ids = store.search(&token);
        let search = micros(search_start);
        let records = store.fetch_and_decrypt(&ids)?;
        overall += micros(start);
        black_box(&records);
        if record {
            samples.per_keyword.entry(bin.to_string()).or_default().push(search);
            samples.search.push(search);
            samples.hits.insert(bin.to_string(), ids.len());
        }
    }
    if record {
        samples.overall.push(overall);
    }
    Ok(())
}

fn scheme_report(name: &str, bundle: &TrainedBundle, stream: IngestStats, samples: Samples) -> SchemeReport {
    let store = bundle.store();
    SchemeReport {
        scheme: name.to_string(),
        screening: bundle.screening().is_some(),
        train_admitted: bundle.counts().kept,
        stream,
        entries: store.len(),
        table_bytes: store.table_size_bytes(),
        store_bytes: store.store_size_bytes(),
        hits: samples.hits,
        search_per_keyword: samples
            .per_keyword
            .iter()
            .map(|(k, v)| (k.clone(), TimingStats::from_samples(v)))
            .collect(),
        search: TimingStats::from_samples(&samples.search),
        overall: TimingStats::from_samples(&samples.overall),
        validation: bundle.validation_metrics(),
    }
}

fn ratio(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else {
        a / b
    }
}

/// Builds the unscreened baseline and the screened scheme on the same
/// dataset, streams the held-out records into both, and times keyword
/// queries with the two schemes interleaved.
pub fn run_benchmark(config: &PipelineConfig, dataset: &Dataset) -> Result<BenchmarkReport> {
    config.validate().stage("config")?;
    let mut mini_config = config.clone();
    mini_config.screening_enabled = true;
    let mut base_config = config.clone();
    base_config.screening_enabled = false;

    let mut mini = train_pipeline(&mini_config, dataset)?;
    let mini_stream = mini.ingest_test_stream()?;
    let mut base = train_pipeline(&base_config, dataset)?;
    let base_stream = base.ingest_test_stream()?;

    let (mut mini_samples, mut base_samples) = (Samples::default(), Samples::default());
    for rep in 0..config.warmup + config.repetitions {
        let record = rep >= config.warmup;
        if rep % 2 == 0 {
            time_queries(base.store(), &mut base_samples, record).stage("benchmark")?;
            time_queries(mini.store(), &mut mini_samples, record).stage("benchmark")?;
        } else {
            time_queries(mini.store(), &mut mini_samples, record).stage("benchmark")?;
            time_queries(base.store(), &mut base_samples, record).stage("benchmark")?;
        }
    }

    let cv = if config.cv_enabled {
        Some(mini.cross_validate()?)
    } else {
        None
    };
    let tradeoff = if config.tradeoff_enabled {
        Some(mini.tradeoff(&config.tradeoff_fractions)?)
    } else {
        None
    };

    let baseline = scheme_report("elsa", &base, base_stream, base_samples);
    let mini_report = scheme_report("mini-elsa", &mini, mini_stream, mini_samples);
    let payload = |s: &SchemeReport| (s.table_bytes - TABLE_HEADER_BYTES) as f64;
    let ratios = Ratios {
        entries: ratio(mini_report.entries as f64, baseline.entries as f64),
        table_payload: ratio(payload(&mini_report), payload(&baseline)),
        table_total: ratio(mini_report.table_bytes as f64, baseline.table_bytes as f64),
        store: ratio(mini_report.store_bytes as f64, baseline.store_bytes as f64),
        search_time: ratio(mini_report.search.mean_us, baseline.search.mean_us),
        overall_time: ratio(mini_report.overall.mean_us, baseline.overall.mean_us),
    };
    let source = match dataset.provenance() {
        Provenance::File(p) => format!("file:{}", p.display()),
        Provenance::Synthetic { seed } => format!("synthetic:seed={seed}"),
    };
    Ok(BenchmarkReport {
        schema_version: REPORT_SCHEMA_VERSION,
        dataset_source: source,
        dataset_records: dataset.len(),
        cloud_mode: "in-process".into(),
        config: config.to_kv_string(),
        train_counts: mini.counts(),
        search_improvement_pct: 100.0 * (1.0 - ratios.search_time),
        overall_improvement_pct: 100.0 * (1.0 - ratios.overall_time),
        baseline,
        mini: mini_report,
        ratios,
        cv,
        tradeoff,
    })
}

/// Writes the tradeoff points as `fraction,kept,rmse` rows.
pub fn tradeoff_csv(points: &[TradeoffPoint]) -> String {
    let mut out = String::from("fraction,kept,rmse\n");
    for p in points {
        out.push_str(&format!("{},{},{}\n", p.fraction, p.kept, p.rmse));
    }
    out
}

/// Default bundle location used by the CLI.
pub fn default_bundle_dir() -> PathBuf {
    PathBuf::from("mini-elsa-bundle")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regressor::GbrtProfile;

    fn small_config() -> PipelineConfig {
        let mut c = PipelineConfig::with_profile(GbrtProfile::Fast);
        c.shap_ref_size = 40;
        c.gbrt.n_trees = 60;
        c.gbrt.learning_rate = 0.2;
        c.repetitions = 3;
        c.warmup = 1;
        c.cv_folds = 3;
        c.tradeoff_fractions = vec![1.0, 0.2];
        c
    }

    #[test]
    fn counts_add_up() {
        let d = synth_ccpp(900, 1).unwrap();
        let c = small_config();
        let mut b = train_pipeline(&c, &d).unwrap();
        let n = b.counts();
        assert_eq!((n.train, n.test, n.shap_ref, n.validation), (810, 90, 40, 50));
        assert_eq!(n.anomalies_removed, 81);
        assert_eq!(n.valued, 729);
        assert_eq!(n.kept, 657);
        assert_eq!(b.store().len(), 657);
        let stats = b.ingest_test_stream().unwrap();
        assert_eq!(stats.streamed, 90);
        assert_eq!(stats.admitted + stats.rejected_anomaly + stats.rejected_low_value, 90);
        assert_eq!(b.store().len(), 657 + stats.admitted);
        assert!(b.store().len() <= d.len());
    }

    #[test]
    fn disabled_screening_keeps_everything() {
        let d = synth_ccpp(600, 2).unwrap();
        let mut c = small_config();
        c.screening_enabled = false;
        let mut b = train_pipeline(&c, &d).unwrap();
        assert_eq!(b.counts().kept, b.counts().train);
        assert!(b.screening().is_none());
        let stats = b.ingest_test_stream().unwrap();
        assert_eq!(stats.admitted, stats.streamed);
        assert_eq!(b.store().len(), 600);
        assert!(b.tradeoff(&[1.0]).is_err());
    }

    #[test]
    fn stage_attribution() {
        let d = synth_ccpp(100, 3).unwrap();
        let c = small_config();
        let err = train_pipeline(&c, &d).err().unwrap();
        assert!(matches!(err, Error::Stage { stage: "split", .. }), "{err}");
        assert!(matches!(err.root(), Error::Size(_)));
    }

    #[test]
    fn outliers_are_rejected_and_duplicates_deterministic() {
        let d = synth_ccpp(900, 4).unwrap();
        let b = train_pipeline(&small_config(), &d).unwrap();
        let s = b.scaler();
        let far = SensorRecord::new(
            99_999,
            s.mean[0] + 4.0 * s.std[0],
            s.mean[1] + 4.0 * s.std[1],
            s.mean[2] + 4.0 * s.std[2],
            s.mean[3] + 4.0 * s.std[3],
            450.0,
        )
        .unwrap();
        let dec = b.screen(&far).unwrap();
        assert_eq!(dec.reason, DecisionReason::RejectedAnomaly);
        assert!(dec.anomaly_score.unwrap() > b.screening().unwrap().forest.threshold());
        assert!(dec.shapley_value.is_none());

        let mean = SensorRecord::new(5, s.mean[0], s.mean[1], s.mean[2], s.mean[3], 454.0).unwrap();
        let first = b.screen(&mean).unwrap();
        assert_eq!(first, b.screen(&mean).unwrap());
        if first.reason == DecisionReason::RejectedLowValue {
            assert!(first.shapley_value.unwrap() < b.screening().unwrap().admission_threshold);
        }
    }

    #[test]
    fn rejected_records_leave_the_store_unchanged() {
        let d = synth_ccpp(900, 5).unwrap();
        let mut b = train_pipeline(&small_config(), &d).unwrap();
        let before = b.store().len();
        let outliers: Vec<SensorRecord> = (0..5)
            .map(|i| SensorRecord::new(50_000 + i, 60.0 + i as f64, 120.0, 1080.0, 140.0, 430.0).unwrap())
            .collect();
        let stats = b.ingest_stream(&outliers).unwrap();
        assert_eq!(stats.rejected_anomaly, 5);
        assert_eq!(b.store().len(), before);
        let dup = b.kept().records()[0];
        assert!(matches!(b.ingest_stream(&[dup]).err().map(|e| e.root().to_string()), Some(_)));
    }

    #[test]
    fn tradeoff_identity_and_order() {
        let d = synth_ccpp(900, 6).unwrap();
        let mut c = small_config();
        c.keep_policy = KeepPolicy::TopFraction { fraction: 1.0 };
        c.tradeoff_profile = GbrtProfile::Fast;
        c.gbrt = GbrtParams {
            n_trees: 1500,
            learning_rate: 0.045,
            ..c.gbrt
        };
        let b = train_pipeline(&c, &d).unwrap();
        let curve = tradeoff_curve(&c, &d, &[1.0, 0.5]).unwrap();
        assert_eq!(curve.iter().map(|p| p.fraction).collect::<Vec<_>>(), vec![0.5, 1.0]);
        assert_eq!(curve[1].rmse, b.validation_metrics().rmse);
        assert_eq!(curve, b.tradeoff(&[0.5, 1.0]).unwrap());
        assert!(tradeoff_curve(&c, &d, &[0.0]).is_err());
        assert!(tradeoff_csv(&curve).starts_with("fraction,kept,rmse\n0.5,"));
    }

    #[test]
    fn bundle_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = synth_ccpp(700, 7).unwrap();
        let mut b = train_pipeline(&small_config(), &d).unwrap();
        b.save(dir.path()).unwrap();
        let mut back = TrainedBundle::load(dir.path()).unwrap();
        assert_eq!(back.counts(), b.counts());
        assert_eq!(back.validation_metrics(), b.validation_metrics());
        let test = b.splits().test.records().to_vec();
        assert_eq!(back.screen_all(&test).unwrap(), b.screen_all(&test).unwrap());
        let s1 = b.ingest_test_stream().unwrap();
        let s2 = back.ingest_test_stream().unwrap();
        assert_eq!(s1, s2);
        back.save_store(dir.path()).unwrap();
        let again = TrainedBundle::load(dir.path()).unwrap();
        assert_eq!(again.store().len(), b.store().len());
    }

    #[test]
    fn benchmark_report_is_reproducible() {
        let d = synth_ccpp(700, 8).unwrap();
        let c = small_config();
        let a = run_benchmark(&c, &d).unwrap();
        let b = run_benchmark(&c, &d).unwrap();
        assert_eq!(a.without_timings(), b.without_timings());
        assert_eq!(a.baseline.entries, 700);
        assert_eq!(a.mini.entries, a.mini.train_admitted + a.mini.stream.admitted);
        assert_eq!(a.ratios.entries, a.mini.entries as f64 / a.baseline.entries as f64);
        assert_eq!(a.mini.search.repetitions, 4 * c.repetitions);
        assert_eq!(a.mini.overall.repetitions, c.repetitions);
        assert_eq!(a.cv.as_ref().unwrap().folds.len(), 3);
        let json = a.to_json().unwrap();
        let parsed: BenchmarkReport = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed.without_timings(), a.without_timings());
    }
}
