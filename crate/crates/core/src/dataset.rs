//! CCPP-style sensor records: loading, synthetic generation, splitting,
//! standardization and keyword binning of the power output.

use std::collections::HashSet;
use std::fmt;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::FeatureMatrix;

/// Feature column names, in matrix column order.
pub const FEATURE_NAMES: [&str; 4] = ["AT", "V", "AP", "RH"];
pub const TARGET_NAME: &str = "PE";
pub const N_FEATURES: usize = 4;

/// One hourly observation of the power plant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorRecord {
    pub id: u32,
    /// Ambient temperature, °C.
    pub at: f64,
    /// Exhaust vacuum, cm Hg.
    pub v: f64,
    /// Ambient pressure, millibar.
    pub ap: f64,
    /// Relative humidity, %.
    pub rh: f64,
    /// Net hourly electrical power output, MW.
    pub pe: f64,
}

impl SensorRecord {
    pub fn new(id: u32, at: f64, v: f64, ap: f64, rh: f64, pe: f64) -> Result<Self> {
        let r = Self { id, at, v, ap, rh, pe };
        r.validate()?;
        Ok(r)
    }

    pub fn features(&self) -> [f64; N_FEATURES] {
        [self.at, self.v, self.ap, self.rh]
    }

    pub fn bin(&self) -> Result<KeywordBin> {
        bin_power(self.pe)
    }

    fn validate(&self) -> Result<()> {
        let all = [self.at, self.v, self.ap, self.rh, self.pe];
        if let Some(pos) = all.iter().position(|x| !x.is_finite()) {
            let name = if pos < 4 { FEATURE_NAMES[pos] } else { TARGET_NAME };
            return Err(Error::arg(format!(
                "record {}: {name} is not finite",
                self.id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Provenance {
    File(PathBuf),
    Synthetic { seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    records: Vec<SensorRecord>,
    provenance: Provenance,
}

impl Dataset {
    /// Builds a dataset, rejecting duplicate ids and non-finite measurements.
    pub fn new(records: Vec<SensorRecord>, provenance: Provenance) -> Result<Self> {
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            r.validate()?;
            if !seen.insert(r.id) {
                return Err(Error::DuplicateId(r.id));
            }
        }
        Ok(Self {
            records,
            provenance,
        })
    }

    pub fn records(&self) -> &[SensorRecord] {
        &self.records
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn targets(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.pe).collect()
    }

    pub fn ids(&self) -> Vec<u32> {
        self.records.iter().map(|r| r.id).collect()
    }

    /// Unscaled feature matrix.
    pub fn features(&self) -> FeatureMatrix {
        let data = self.records.iter().flat_map(|r| r.features()).collect();
        FeatureMatrix::new(self.records.len(), N_FEATURES, data)
            .expect("record features have fixed arity")
    }

    /// Subset by position, keeping the given order.
    pub fn select(&self, positions: &[usize]) -> Dataset {
        Dataset {
            records: positions.iter().map(|&i| self.records[i]).collect(),
            provenance: self.provenance.clone(),
        }
    }

    /// Writes the dataset as comma-delimited text. With `with_ids` an
    /// extra leading `id` column is written so that ids survive a reload.
    pub fn write_csv(&self, path: impl AsRef<Path>, with_ids: bool) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
        let mut header: Vec<&str> = Vec::new();
        if with_ids {
            header.push("id");
        }
        header.extend(FEATURE_NAMES);
        header.push(TARGET_NAME);
        w.write_record(&header).map_err(csv_io)?;
        for r in &self.records {
            let mut row: Vec<String> = Vec::with_capacity(6);
            if with_ids {
                row.push(r.id.to_string());
            }
            row.extend([r.at, r.v, r.ap, r.rh, r.pe].iter().map(|x| format!("{x:?}")));
            w.write_record(&row).map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_io(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::format(format!("{other:?}")),
    }
}

/// Loads a delimited CCPP file with header columns `AT, V, AP, RH, PE`
/// (any order, case-insensitive). Comma and semicolon delimiters are
/// detected from the header line. An optional `id` column overrides the
/// default 0..n-1 ordinal ids.
pub fn load_ccpp(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let mut text = String::new();
    std::fs::File::open(path)?.read_to_string(&mut text)?;
    let records = parse_ccpp(&text)?;
    Dataset::new(records, Provenance::File(path.to_path_buf()))
}

/// Parses the textual form accepted by [`load_ccpp`].
pub fn parse_ccpp(text: &str) -> Result<Vec<SensorRecord>> {
    let text = text.trim_start_matches('\u{feff}');
    let header_line = text.lines().next().ok_or(Error::EmptyDataset)?;
    let delimiter = if header_line.matches(';').count() > header_line.matches(',').count() {
        b';'
    } else {
        b','
    };
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers().map_err(csv_io)?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
    };
    let mut columns = [0usize; 5];
    for (slot, name) in FEATURE_NAMES.iter().chain([&TARGET_NAME]).enumerate() {
        columns[slot] = find(name).ok_or_else(|| Error::MissingColumn(name.to_string()))?;
    }
    let id_column = find("id");

    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        // header is line 1
        let row_no = i + 2;
        let row = row.map_err(|e| Error::Parse {
            row: row_no,
            message: e.to_string(),
        })?;
        let cell = |c: usize| -> Result<f64> {
            let raw = row.get(c).unwrap_or("");
            raw.parse::<f64>().map_err(|_| Error::Parse {
                row: row_no,
                message: format!("`{raw}` in column {} is not a number", &headers[c]),
            })
        };
        let id = match id_column {
            Some(c) => {
                let raw = row.get(c).unwrap_or("");
                raw.parse::<u32>().map_err(|_| Error::Parse {
                    row: row_no,
                    message: format!("`{raw}` is not a record id"),
                })?
            }
            None => u32::try_from(i).map_err(|_| Error::size("more than u32::MAX rows"))?,
        };
        let rec = SensorRecord {
            id,
            at: cell(columns[0])?,
            v: cell(columns[1])?,
            ap: cell(columns[2])?,
            rh: cell(columns[3])?,
            pe: cell(columns[4])?,
        };
        if let Err(e) = rec.validate() {
            return Err(Error::Parse {
                row: row_no,
                message: e.to_string(),
            });
        }
        records.push(rec);
    }
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(records)
}

/// Summary statistics of one CCPP column as published for the UCI data.
#[derive(Debug, Clone, Copy)]
pub struct ColumnStats {
    pub min: f64,
    pub max: f64,
    pub std: f64,
}

impl ColumnStats {
    pub fn midpoint(&self) -> f64 {
        0.5 * (self.min + self.max)
    }
}

/// AT, V, AP, RH in matrix column order.
pub const FEATURE_STATS: [ColumnStats; N_FEATURES] = [
    ColumnStats { min: 1.81, max: 37.11, std: 7.45 },
    ColumnStats { min: 25.36, max: 81.56, std: 12.70 },
    ColumnStats { min: 992.89, max: 1033.30, std: 5.93 },
    ColumnStats { min: 25.56, max: 100.16, std: 14.6 },
];

pub const POWER_STATS: ColumnStats = ColumnStats { min: 420.26, max: 495.76, std: 17.06 };

/// Standard deviation of the additive Gaussian noise on synthetic PE.
pub const SYNTH_NOISE_STD: f64 = 2.5;

/// Noise-free synthetic power output for the given ambient features.
///
/// With standardized inputs `t, v, p, h` the response is
/// `454.4 - 16 t - 4 v + 1.2 p - 2.3 h + 1.5 t^2 - 1.2 t v - 0.9 t h`,
/// clipped to the published PE range. Temperature dominates as it does
/// in the real plant data.
pub fn synth_power_mean(features: &[f64; N_FEATURES]) -> f64 {
    let z = |i: usize| (features[i] - FEATURE_STATS[i].midpoint()) / FEATURE_STATS[i].std;
    let (t, v, p, h) = (z(0), z(1), z(2), z(3));
    let pe = 454.4 - 16.0 * t - 4.0 * v + 1.2 * p - 2.3 * h + 1.5 * t * t
        - 1.2 * t * v
        - 0.9 * t * h;
    pe.clamp(POWER_STATS.min, POWER_STATS.max)
}

/// Deterministic synthetic stand-in for the UCI file.
///
/// Each feature is drawn from a normal with mean at the midpoint of its
/// published range and the published standard deviation, truncated to the
/// range by rejection. PE is [`synth_power_mean`] plus `N(0, 2.5²)` noise,
/// clipped to the PE range.
pub fn synth_ccpp(n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let id_limit = u32::try_from(n).map_err(|_| Error::size("synthetic count exceeds u32 ids"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normals: Vec<Normal<f64>> = FEATURE_STATS
        .iter()
        .map(|s| Normal::new(s.midpoint(), s.std).expect("positive std"))
        .collect();
    let noise = Normal::new(0.0, SYNTH_NOISE_STD).expect("positive std");
    let mut records = Vec::with_capacity(n);
    for id in 0..id_limit {
        let mut x = [0.0; N_FEATURES];
        for (j, dist) in normals.iter().enumerate() {
            let s = FEATURE_STATS[j];
            x[j] = loop {
                let draw = dist.sample(&mut rng);
                if (s.min..=s.max).contains(&draw) {
                    break draw;
                }
            };
        }
        let pe = (synth_power_mean(&x) + noise.sample(&mut rng))
            .clamp(POWER_STATS.min, POWER_STATS.max);
        records.push(SensorRecord {
            id,
            at: x[0],
            v: x[1],
            ap: x[2],
            rh: x[3],
            pe,
        });
    }
    Dataset::new(records, Provenance::Synthetic { seed })
}

/// Random train/test partition: a seeded uniform permutation whose first
/// `floor(fraction * n)` records become the training set.
pub fn split(d: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::arg(format!(
            "train fraction {train_fraction} outside (0, 1)"
        )));
    }
    if d.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = (train_fraction * d.len() as f64).floor() as usize;
    Ok((d.select(&order[..cut]), d.select(&order[cut..])))
}

/// Splits the test set into the valuation reference block (the first
/// `ref_size` records in split order) and the validation remainder.
pub fn subsplit_test(test: &Dataset, ref_size: usize) -> Result<(Dataset, Dataset)> {
    if ref_size == 0 {
        return Err(Error::arg("shap_ref_size must be positive"));
    }
    if test.len() <= ref_size {
        return Err(Error::size(format!(
            "test set has {} records but shap_ref_size is {ref_size}; lower `shap_ref_size` in the config",
            test.len()
        )));
    }
    let positions: Vec<usize> = (0..test.len()).collect();
    Ok((
        test.select(&positions[..ref_size]),
        test.select(&positions[ref_size..]),
    ))
}

/// Per-feature z-score standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: [f64; N_FEATURES],
    pub std: [f64; N_FEATURES],
}

impl Scaler {
    /// Fits means and population standard deviations. Call on training
    /// records only; the pipeline never fits on held-out data.
    pub fn fit(train: &Dataset) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let n = train.len() as f64;
        let mut mean = [0.0; N_FEATURES];
        let mut std = [0.0; N_FEATURES];
        for j in 0..N_FEATURES {
            let m = train.records().iter().map(|r| r.features()[j]).sum::<f64>() / n;
            let var = train
                .records()
                .iter()
                .map(|r| {
                    let d = r.features()[j] - m;
                    d * d
                })
                .sum::<f64>()
                / n;
            let sd = var.sqrt();
            if !(sd > 1e-12 * m.abs().max(1.0)) {
                return Err(Error::DegenerateFeature(FEATURE_NAMES[j]));
            }
            mean[j] = m;
            std[j] = sd;
        }
        Ok(Self { mean, std })
    }

    pub fn transform_row(&self, x: &[f64; N_FEATURES]) -> [f64; N_FEATURES] {
        let mut out = [0.0; N_FEATURES];
        for j in 0..N_FEATURES {
            out[j] = (x[j] - self.mean[j]) / self.std[j];
        }
        out
    }

    pub fn inverse_row(&self, z: &[f64; N_FEATURES]) -> [f64; N_FEATURES] {
        let mut out = [0.0; N_FEATURES];
        for j in 0..N_FEATURES {
            out[j] = z[j] * self.std[j] + self.mean[j];
        }
        out
    }

    pub fn apply(&self, d: &Dataset) -> FeatureMatrix {
        let data = d
            .records()
            .iter()
            .flat_map(|r| self.transform_row(&r.features()))
            .collect();
        FeatureMatrix::new(d.len(), N_FEATURES, data).expect("fixed arity")
    }
}

pub fn fit_scaler(train: &Dataset) -> Result<Scaler> {
    Scaler::fit(train)
}

pub fn apply_scaler(s: &Scaler, d: &Dataset) -> FeatureMatrix {
    s.apply(d)
}

/// Keyword class of a power reading.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeywordBin {
    Low,
    Normal,
    High,
    Severe,
}

impl KeywordBin {
    pub const ALL: [KeywordBin; 4] = [
        KeywordBin::Low,
        KeywordBin::Normal,
        KeywordBin::High,
        KeywordBin::Severe,
    ];

    /// Lower edges of normal, high and severe (MW).
    pub const EDGES: [f64; 3] = [439.0, 458.0, 477.0];

    pub fn as_str(self) -> &'static str {
        match self {
            KeywordBin::Low => "low",
            KeywordBin::Normal => "normal",
            KeywordBin::High => "high",
            KeywordBin::Severe => "severe",
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    /// Nominal PE interval `[lo, hi)`; the severe interval is closed at
    /// the published maximum. Out-of-range readings clamp into the end bins.
    pub fn interval(self) -> (f64, f64) {
        match self {
            KeywordBin::Low => (POWER_STATS.min, Self::EDGES[0]),
            KeywordBin::Normal => (Self::EDGES[0], Self::EDGES[1]),
            KeywordBin::High => (Self::EDGES[1], Self::EDGES[2]),
            KeywordBin::Severe => (Self::EDGES[2], POWER_STATS.max),
        }
    }
}

impl fmt::Display for KeywordBin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for KeywordBin {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|b| b.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::arg(format!("unknown keyword `{s}`")))
    }
}

/// Maps a power reading to its keyword bin. Lower edges are inclusive.
pub fn bin_power(pe: f64) -> Result<KeywordBin> {
    if !pe.is_finite() {
        return Err(Error::arg(format!("power reading {pe} is not finite")));
    }
    let [normal, high, severe] = KeywordBin::EDGES;
    Ok(if pe < normal {
        KeywordBin::Low
    } else if pe < high {
        KeywordBin::Normal
    } else if pe < severe {
        KeywordBin::High
    } else {
        KeywordBin::Severe
    })
}
