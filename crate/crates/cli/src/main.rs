use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use mini_elsa::config::PipelineConfig;
use mini_elsa::dataset::{load_ccpp, KeywordBin, SensorRecord};
use mini_elsa::pipeline::{
    default_bundle_dir, load_dataset, run_benchmark, tradeoff_csv, tradeoff_curve, train_pipeline,
    BenchmarkReport, DecisionReason, IngestStats, ScreeningDecision, TrainCounts, TrainedBundle,
    REPORT_SCHEMA_VERSION,
};

/// Edge screening and encrypted keyword storage for power-plant sensor records.
#[derive(Parser)]
#[command(name = "mini-elsa", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the screening gate and regressor, then save a bundle.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_os_t = default_bundle_dir())]
        bundle: PathBuf,
    },
    /// Screen records against a bundle without storing them.
    Screen {
        #[arg(long, default_value_os_t = default_bundle_dir())]
        bundle: PathBuf,
        /// Records to screen; defaults to the bundle's held-out rows.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Write decisions as delimited text.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Screen records and store the admitted ones.
    Ingest {
        #[arg(long, default_value_os_t = default_bundle_dir())]
        bundle: PathBuf,
        /// Records to stream; defaults to the bundle's held-out rows.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Query the encrypted store for one keyword.
    Search {
        keyword: KeywordBin,
        #[arg(long, default_value_os_t = default_bundle_dir())]
        bundle: PathBuf,
        /// Fetch and decrypt the matching records.
        #[arg(long)]
        decrypt: bool,
    },
    /// Compare the unscreened and screened schemes and write a report.
    Bench {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "mini-elsa-report")]
        out: PathBuf,
    },
    /// Validation RMSE as a function of the kept fraction.
    Tradeoff {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated fractions in (0, 1]; defaults to `tradeoff.fractions`.
        #[arg(long, value_delimiter = ',')]
        fractions: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export valuation, residual and cross-validation reports of a bundle.
    Report {
        #[arg(long, default_value_os_t = default_bundle_dir())]
        bundle: PathBuf,
        #[arg(long, default_value = "mini-elsa-report")]
        out: PathBuf,
        /// Skip k-fold cross-validation.
        #[arg(long)]
        no_cv: bool,
    },
}

#[derive(Args)]
struct RunArgs {
    /// key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set gbrt.profile=fast`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// CCPP file; the synthetic generator is used when absent.
    #[arg(long)]
    data: Option<PathBuf>,
}

impl RunArgs {
    fn config(&self) -> Result<PipelineConfig> {
        let mut config = match &self.config {
            Some(p) => {
                PipelineConfig::load(p).with_context(|| format!("reading {}", p.display()))?
            }
            None => PipelineConfig::default(),
        };
        let pairs = self
            .overrides
            .iter()
            .map(|s| {
                s.split_once('=')
                    .with_context(|| format!("`--set {s}`: expected KEY=VALUE"))
            })
            .collect::<Result<Vec<_>>>()?;
        config.apply(pairs)?;
        config.validate()?;
        Ok(config)
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if is_broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::FAILURE
        }
    }
}

fn is_broken_pipe(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.downcast_ref::<io::Error>()
            .is_some_and(|io| io.kind() == io::ErrorKind::BrokenPipe)
    })
}

/// Joins the error chain, skipping causes the outer message already quotes.
fn describe(e: &anyhow::Error) -> String {
    let mut msg = e.to_string();
    for cause in e.chain().skip(1) {
        let cause = cause.to_string();
        if !msg.contains(&cause) {
            msg = format!("{msg}: {cause}");
        }
    }
    msg
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { run, bundle } => train(&run, &bundle),
        Command::Screen { bundle, input, out } => screen(&bundle, input.as_deref(), out.as_deref()),
        Command::Ingest { bundle, input } => ingest(&bundle, input.as_deref()),
        Command::Search {
            keyword,
            bundle,
            decrypt,
        } => search(keyword, &bundle, decrypt),
        Command::Bench { run, out } => bench(&run, &out),
        Command::Tradeoff {
            run,
            fractions,
            out,
        } => tradeoff(&run, &fractions, out.as_deref()),
        Command::Report { bundle, out, no_cv } => report(&bundle, &out, !no_cv),
    }
}

fn load_bundle(dir: &Path) -> Result<TrainedBundle> {
    TrainedBundle::load(dir).with_context(|| format!("loading bundle {}", dir.display()))
}

fn print_counts(c: &TrainCounts) {
    println!(
        "records {}  train {}  test {} (reference {}, validation {})",
        c.dataset, c.train, c.test, c.shap_ref, c.validation
    );
    println!(
        "anomalies removed {}  valued {}  kept {} ({:.1}% of train)",
        c.anomalies_removed,
        c.valued,
        c.kept,
        100.0 * c.kept as f64 / c.train as f64
    );
}

fn print_stats(s: &IngestStats) {
    println!(
        "streamed {}  admitted {}  rejected_anomaly {}  rejected_low_value {}",
        s.streamed, s.admitted, s.rejected_anomaly, s.rejected_low_value
    );
}

fn train(run: &RunArgs, dir: &Path) -> Result<()> {
    let config = run.config()?;
    let dataset = load_dataset(run.data.as_deref(), &config)?;
    let start = Instant::now();
    let bundle = train_pipeline(&config, &dataset)?;
    let m = bundle.validation_metrics();
    print_counts(&bundle.counts());
    println!(
        "validation rmse {:.4}  ae {:.4}  r2 {:.4}",
        m.rmse, m.ae, m.r2
    );
    println!(
        "store entries {}  trained in {:.1}s",
        bundle.store().len(),
        start.elapsed().as_secs_f64()
    );
    bundle.save(dir)?;
    println!("bundle written to {}", dir.display());
    Ok(())
}

fn stream_records(bundle: &TrainedBundle, input: Option<&Path>) -> Result<Vec<SensorRecord>> {
    Ok(match input {
        Some(p) => load_ccpp(p)
            .with_context(|| format!("reading {}", p.display()))?
            .records()
            .to_vec(),
        None => bundle.splits().test.records().to_vec(),
    })
}

fn decisions_csv(decisions: &[ScreeningDecision]) -> String {
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    let mut out = String::from("id,admitted,reason,anomaly_score,shapley_value\n");
    for d in decisions {
        let reason = match d.reason {
            DecisionReason::Admitted => "admitted",
            DecisionReason::RejectedAnomaly => "rejected_anomaly",
            DecisionReason::RejectedLowValue => "rejected_low_value",
        };
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            d.id,
            d.admitted,
            reason,
            opt(d.anomaly_score),
            opt(d.shapley_value)
        ));
    }
    out
}

fn screen(dir: &Path, input: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let bundle = load_bundle(dir)?;
    let records = stream_records(&bundle, input)?;
    let decisions = bundle.screen_all(&records)?;
    let admitted = decisions.iter().filter(|d| d.admitted).count();
    println!(
        "screened {}  admitted {}  rejected {}",
        decisions.len(),
        admitted,
        decisions.len() - admitted
    );
    match out {
        Some(p) => {
            fs::write(p, decisions_csv(&decisions))?;
            println!("decisions written to {}", p.display());
        }
        None => io::stdout()
            .lock()
            .write_all(decisions_csv(&decisions).as_bytes())?,
    }
    Ok(())
}

fn ingest(dir: &Path, input: Option<&Path>) -> Result<()> {
    let mut bundle = load_bundle(dir)?;
    let records = stream_records(&bundle, input)?;
    let stats = bundle.ingest_stream(&records)?;
    print_stats(&stats);
    bundle.save_store(dir)?;
    println!("store entries {}", bundle.store().len());
    Ok(())
}

fn search(keyword: KeywordBin, dir: &Path, decrypt: bool) -> Result<()> {
    let bundle = load_bundle(dir)?;
    let store = bundle.store();
    let ids = store.search(&store.trapdoor(keyword.as_str()));
    eprintln!("{} hits for `{keyword}`", ids.len());
    let mut out = BufWriter::new(io::stdout().lock());
    if decrypt {
        writeln!(out, "id,AT,V,AP,RH,PE")?;
        for r in store.fetch_and_decrypt(&ids)? {
            writeln!(out, "{},{},{},{},{},{}", r.id, r.at, r.v, r.ap, r.rh, r.pe)?;
        }
    } else {
        for id in ids {
            writeln!(out, "{id}")?;
        }
    }
    out.flush()?;
    Ok(())
}

fn print_report(r: &BenchmarkReport) {
    println!(
        "dataset {} ({} records)",
        r.dataset_source, r.dataset_records
    );
    print_counts(&r.train_counts);
    for s in [&r.baseline, &r.mini] {
        println!(
            "{:<9}  entries {:>5}  table {:>7} B  store {:>7} B  search {:.2} ± {:.2} us  overall {:.1} ± {:.1} us  (n={})",
            s.scheme,
            s.entries,
            s.table_bytes,
            s.store_bytes,
            s.search.mean_us,
            s.search.std_us,
            s.overall.mean_us,
            s.overall.std_us,
            s.overall.repetitions
        );
        println!(
            "           rmse {:.4}  ae {:.4}  r2 {:.4}",
            s.validation.rmse, s.validation.ae, s.validation.r2
        );
    }
    println!(
        "retention {:.4}  search {:+.1}%  overall {:+.1}%",
        r.ratios.entries, r.search_improvement_pct, r.overall_improvement_pct
    );
    if let Some(cv) = &r.cv {
        println!(
            "cv {} folds  rmse {:.4}  ae {:.4}",
            cv.folds.len(),
            cv.mean.rmse,
            cv.mean.ae
        );
    }
    if let Some(points) = &r.tradeoff {
        for p in points {
            println!(
                "keep {:.2}  rows {:>5}  rmse {:.4}",
                p.fraction, p.kept, p.rmse
            );
        }
    }
}

fn bench(run: &RunArgs, out: &Path) -> Result<()> {
    let config = run.config()?;
    let dataset = load_dataset(run.data.as_deref(), &config)?;
    let report = run_benchmark(&config, &dataset)?;
    print_report(&report);
    fs::create_dir_all(out)?;
    report.write_json(out.join("benchmark_report.json"))?;
    if let Some(points) = &report.tradeoff {
        fs::write(out.join("tradeoff.csv"), tradeoff_csv(points))?;
    }
    println!("report written to {}", out.display());
    Ok(())
}

fn tradeoff(run: &RunArgs, fractions: &[f64], out: Option<&Path>) -> Result<()> {
    let config = run.config()?;
    let dataset = load_dataset(run.data.as_deref(), &config)?;
    let fractions = if fractions.is_empty() {
        &config.tradeoff_fractions
    } else {
        fractions
    };
    let csv = tradeoff_csv(&tradeoff_curve(&config, &dataset, fractions)?);
    match out {
        Some(p) => {
            fs::write(p, &csv)?;
            println!("curve written to {}", p.display());
        }
        None => io::stdout().lock().write_all(csv.as_bytes())?,
    }
    Ok(())
}

fn report(dir: &Path, out: &Path, cv: bool) -> Result<()> {
    let bundle = load_bundle(dir)?;
    fs::create_dir_all(out)?;
    print_counts(&bundle.counts());
    let m = bundle.validation_metrics();
    println!(
        "validation rmse {:.4}  ae {:.4}  r2 {:.4}",
        m.rmse, m.ae, m.r2
    );

    let res = bundle.residuals()?;
    fs::write(out.join("residuals.csv"), res.residuals_csv())?;
    fs::write(out.join("qq.csv"), res.qq_csv())?;
    if let Some(s) = bundle.screening() {
        fs::write(
            out.join("valuation.csv"),
            s.valuation.to_csv(&s.cleaned.ids()),
        )?;
        println!(
            "valuation k {}  efficiency error {:.2e}  admission threshold {:.6}",
            s.valuation.k,
            s.valuation.efficiency_error(),
            s.admission_threshold
        );
    }
    let cv = if cv {
        let report = bundle.cross_validate()?;
        println!(
            "cv {} folds  rmse {:.4}  ae {:.4}",
            report.folds.len(),
            report.mean.rmse,
            report.mean.ae
        );
        Some(report)
    } else {
        None
    };
    let summary = serde_json::json!({
        "schema_version": REPORT_SCHEMA_VERSION,
        "counts": bundle.counts(),
        "store_entries": bundle.store().len(),
        "validation": m,
        "cv": cv,
    });
    fs::write(
        out.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    println!("report written to {}", out.display());
    Ok(())
}
