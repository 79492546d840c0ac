//! Dataset ingestion, splits, standardization and windowing.

use crate::error::{config_err, data_err, Result};
use crate::tasks::Task;
use crate::tensor::{Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;
use std::path::{Path, PathBuf};

/// Channels with a train std below this are scaled by 1 instead.
pub const STD_EPS: f64 = 1e-8;

/// Environment variable naming the dataset root directory.
pub const DATA_DIR_ENV: &str = "TSRM_DATA_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// How a series is cut into train / val / test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum SplitSpec {
    /// Exact row counts, taken from the start of the file.
    Rows([usize; 3]),
    /// Train and val fractions; test takes the remainder.
    Fractions([f64; 2]),
}

/// Row boundaries: train `[0, train_end)`, val `[train_end, val_end)`,
/// test `[val_end, test_end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitBounds {
    pub train_end: usize,
    pub val_end: usize,
    pub test_end: usize,
}

impl SplitBounds {
    pub fn range(&self, split: Split) -> Range<usize> {
        match split {
            Split::Train => 0..self.train_end,
            Split::Val => self.train_end..self.val_end,
            Split::Test => self.val_end..self.test_end,
        }
    }
}

impl SplitSpec {
    pub fn bounds(&self, rows: usize) -> Result<SplitBounds> {
        let b = match *self {
            SplitSpec::Rows([tr, va, te]) => SplitBounds { train_end: tr, val_end: tr + va, test_end: tr + va + te },
            SplitSpec::Fractions([tr, va]) => {
                if !(tr > 0.0 && va >= 0.0 && tr + va < 1.0) {
                    return Err(config_err!("split fractions train={tr}, val={va} must be positive and sum below 1"));
                }
                let train_end = (rows as f64 * tr).round() as usize;
                let val_end = train_end + (rows as f64 * va).round() as usize;
                SplitBounds { train_end, val_end, test_end: rows }
            }
        };
        if b.test_end > rows {
            return Err(data_err!(
                "split {:?} needs {} rows but the series has only {rows}",
                self,
                b.test_end
            ));
        }
        if b.train_end == 0 {
            return Err(data_err!("split {:?} leaves no training rows", self));
        }
        Ok(b)
    }
}

/// Registry entry for one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetInfo {
    /// CSV location; relative paths resolve against the data root.
    pub path: PathBuf,
    pub channels: Option<usize>,
    pub split: SplitSpec,
    #[serde(default)]
    pub frequency: Option<String>,
}

/// The benchmark datasets with their published channel counts and splits.
pub fn known_dataset(name: &str) -> Option<DatasetInfo> {
    let entry = |path: &str, channels, split: [usize; 3], freq: &str| DatasetInfo {
        path: path.into(),
        channels: Some(channels),
        split: SplitSpec::Rows(split),
        frequency: Some(freq.into()),
    };
    Some(match name.to_ascii_lowercase().as_str() {
        "etth1" => entry("ETT-small/ETTh1.csv", 7, [8545, 2881, 2881], "hourly"),
        "etth2" => entry("ETT-small/ETTh2.csv", 7, [8545, 2881, 2881], "hourly"),
        "ettm1" => entry("ETT-small/ETTm1.csv", 7, [34465, 11521, 11521], "15min"),
        "ettm2" => entry("ETT-small/ETTm2.csv", 7, [34465, 11521, 11521], "15min"),
        "ecl" | "electricity" => entry("electricity/electricity.csv", 321, [18317, 2633, 5261], "hourly"),
        "weather" => entry("weather/weather.csv", 21, [36792, 5271, 10540], "10min"),
        "exchange" | "exchange_rate" => entry("exchange_rate/exchange_rate.csv", 8, [5120, 665, 1422], "daily"),
        _ => return None,
    })
}

/// Names → dataset entries, read from TOML or JSON.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Registry {
    #[serde(default)]
    pub datasets: BTreeMap<String, DatasetInfo>,
}

impl Registry {
    /// Parses `.json` files as JSON and everything else as TOML.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
            serde_json::from_str(&text).map_err(|e| config_err!("registry {}: {e}", path.display()))
        } else {
            toml::from_str(&text).map_err(|e| config_err!("registry {}: {e}", path.display()))
        }
    }

    /// Entry for `name`, falling back to the built-in benchmark table.
    pub fn lookup(&self, name: &str) -> Option<DatasetInfo> {
        self.datasets.get(name).cloned().or_else(|| known_dataset(name))
    }
}

/// Per-channel train statistics used for z-scoring.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeriesDataset {
    pub name: String,
    pub columns: Vec<String>,
    /// First CSV column, kept verbatim.
    pub timestamps: Vec<String>,
    /// `[rows, channels]`.
    pub values: Tensor,
    pub bounds: Option<SplitBounds>,
    pub standardization: Option<Standardization>,
    pub frequency: Option<String>,
}

impl SeriesDataset {
    pub fn from_values(name: &str, values: Tensor) -> Result<Self> {
        if values.rank() != 2 {
            return Err(data_err!("series values must be [rows, channels], got {:?}", values.shape()));
        }
        let channels = values.shape()[1];
        Ok(SeriesDataset {
            name: name.into(),
            columns: (0..channels).map(|c| format!("c{c}")).collect(),
            timestamps: Vec::new(),
            values,
            bounds: None,
            standardization: None,
            frequency: None,
        })
    }

    pub fn rows(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn split_range(&self, split: Split) -> Result<Range<usize>> {
        self.bounds
            .map(|b| b.range(split))
            .ok_or_else(|| data_err!("dataset {} has not been split yet", self.name))
    }

    /// Undoes the z-scoring on `[.., channels]` values.
    pub fn destandardize(&self, values: &Tensor) -> Result<Tensor> {
        let Some(st) = &self.standardization else {
            return Ok(values.clone());
        };
        let ch = st.mean.len();
        if values.shape().last() != Some(&ch) {
            return Err(data_err!("cannot destandardize {:?} with {ch} channel statistics", values.shape()));
        }
        let mut out = values.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let c = i % ch;
            *v = (*v as f64 * st.std[c] + st.mean[c]) as Scalar;
        }
        Ok(out)
    }
}

/// Reads a comma-separated file with a header row whose first column is a
/// timestamp and whose remaining columns are numeric features. When `name`
/// is a known benchmark, the channel count is validated.
pub fn load_csv(path: &Path, name: &str) -> Result<SeriesDataset> {
    let file = std::fs::File::open(path).map_err(|e| data_err!("cannot open dataset {}: {e}", path.display()))?;
    let expected = known_dataset(name).and_then(|d| d.channels);
    parse_csv(file, name, expected).map_err(|e| match e {
        crate::Error::Data(msg) => data_err!("{}: {msg}", path.display()),
        other => other,
    })
}

/// [`load_csv`] over any reader; `channels` is validated when given.
pub fn parse_csv<R: std::io::Read>(reader: R, name: &str, channels: Option<usize>) -> Result<SeriesDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(reader);
    let mut records = rdr.records();
    let header = match records.next() {
        Some(h) => h.map_err(|e| data_err!("malformed header: {e}"))?,
        None => return Err(data_err!("empty file; expected a header row")),
    };
    if header.len() < 2 {
        return Err(data_err!("header must name a timestamp column and at least one feature"));
    }
    if header.iter().skip(1).all(|c| c.trim().parse::<f64>().is_ok()) {
        return Err(data_err!("missing header row: first line {:?} is numeric", header.iter().collect::<Vec<_>>()));
    }
    let columns: Vec<String> = header.iter().skip(1).map(|c| c.trim().to_string()).collect();
    let f = columns.len();
    if let Some(want) = channels {
        if want != f {
            return Err(data_err!("dataset {name} should have {want} channels, found {f}"));
        }
    }
    let mut timestamps = Vec::new();
    let mut data = Vec::new();
    for (r, rec) in records.enumerate() {
        let row = r + 2;
        let rec = rec.map_err(|e| data_err!("row {row}: {e}"))?;
        if rec.len() != f + 1 {
            return Err(data_err!("row {row}: expected {} fields, found {}", f + 1, rec.len()));
        }
        timestamps.push(rec[0].to_string());
        for (c, cell) in rec.iter().enumerate().skip(1) {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| data_err!("row {row}, column {} ({}): non-numeric value {cell:?}", c + 1, columns[c - 1]))?;
            if !v.is_finite() {
                return Err(data_err!("row {row}, column {} ({}): non-finite value {cell:?}", c + 1, columns[c - 1]));
            }
            data.push(v as Scalar);
        }
    }
    if timestamps.is_empty() {
        return Err(data_err!("no data rows after the header"));
    }
    Ok(SeriesDataset {
        name: name.into(),
        columns,
        values: Tensor::new(vec![timestamps.len(), f], data)?,
        timestamps,
        bounds: None,
        standardization: None,
        frequency: known_dataset(name).and_then(|d| d.frequency),
    })
}

/// Fixes the split bounds and, when `standardize` is set, z-scores every
/// channel with the train-split mean and population std.
pub fn split_and_standardize(mut ds: SeriesDataset, split: &SplitSpec, standardize: bool) -> Result<SeriesDataset> {
    let bounds = split.bounds(ds.rows())?;
    ds.bounds = Some(bounds);
    if !standardize {
        return Ok(ds);
    }
    let ch = ds.channels();
    let train = bounds.train_end;
    let mut mean = vec![0.0; ch];
    let mut std = vec![0.0; ch];
    let vals = ds.values.data();
    for c in 0..ch {
        let col: Vec<f64> = (0..train).map(|r| vals[r * ch + c] as f64).collect();
        let m = col.iter().sum::<f64>() / train as f64;
        let dev: Vec<f64> = col.iter().map(|v| (v - m) * (v - m)).collect();
        let s = (dev.iter().sum::<f64>() / train as f64).sqrt();
        mean[c] = m;
        std[c] = if s < STD_EPS { 1.0 } else { s };
    }
    for (i, v) in ds.values.data_mut().iter_mut().enumerate() {
        let c = i % ch;
        *v = ((*v as f64 - mean[c]) / std[c]) as Scalar;
    }
    ds.standardization = Some(Standardization { mean, std });
    Ok(ds)
}

/// One mini-batch of windows.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowBatch {
    /// `[B, T, F]`.
    pub inputs: Tensor,
    /// `[B, H, F]`; for imputation the unmasked input window.
    pub targets: Tensor,
    /// Absolute row index of each window's first input row.
    pub starts: Vec<usize>,
}

/// All windows of one split.
#[derive(Clone, Debug)]
pub struct Windows<'a> {
    ds: &'a SeriesDataset,
    pub lookback: usize,
    pub horizon: usize,
    pub task: Task,
    /// Absolute start rows in iteration order.
    pub starts: Vec<usize>,
}

/// Enumerates windows inside `split` at the given stride. Forecast windows
/// take inputs `[i, i+T)` and targets `[i+T, i+T+H)`; imputation windows use
/// `H = T` over the input rows themselves.
pub fn make_windows<'a>(ds: &'a SeriesDataset, split: Split, lookback: usize, horizon: usize, stride: usize, task: Task) -> Result<Windows<'a>> {
    if lookback == 0 || stride == 0 {
        return Err(config_err!("lookback and stride must be positive"));
    }
    let horizon = match task {
        Task::Forecast if horizon == 0 => return Err(config_err!("forecasting needs a positive horizon")),
        Task::Forecast => horizon,
        Task::Impute => lookback,
    };
    let range = ds.split_range(split)?;
    let span = match task {
        Task::Forecast => lookback + horizon,
        Task::Impute => lookback,
    };
    if range.len() < span {
        return Err(data_err!(
            "{split} split of {} has {} rows; a {task} window needs {span}",
            ds.name,
            range.len()
        ));
    }
    let starts = (range.start..=range.end - span).step_by(stride).collect();
    Ok(Windows { ds, lookback, horizon, task, starts })
}

impl<'a> Windows<'a> {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn dataset(&self) -> &'a SeriesDataset {
        self.ds
    }

    /// Reorders the windows with a seeded shuffle.
    pub fn shuffle(&mut self, seed: u64) {
        self.starts.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }

    fn rows(&self, start: usize, len: usize) -> &'a [Scalar] {
        let f = self.ds.channels();
        &self.ds.values.data()[start * f..(start + len) * f]
    }

    /// Builds the batch made of windows `idx` (positions into `starts`).
    pub fn batch(&self, idx: Range<usize>) -> Result<WindowBatch> {
        let f = self.ds.channels();
        let starts: Vec<usize> = self.starts[idx].to_vec();
        let b = starts.len();
        let mut inputs = Vec::with_capacity(b * self.lookback * f);
        let mut targets = Vec::with_capacity(b * self.horizon * f);
        for &s in &starts {
            inputs.extend_from_slice(self.rows(s, self.lookback));
            match self.task {
                Task::Forecast => targets.extend_from_slice(self.rows(s + self.lookback, self.horizon)),
                Task::Impute => targets.extend_from_slice(self.rows(s, self.lookback)),
            }
        }
        Ok(WindowBatch {
            inputs: Tensor::new(vec![b, self.lookback, f], inputs)?,
            targets: Tensor::new(vec![b, self.horizon, f], targets)?,
            starts,
        })
    }

    /// Consecutive batches of at most `batch_size` windows.
    pub fn batches(&self, batch_size: usize) -> impl Iterator<Item = Result<WindowBatch>> + '_ {
        let bs = batch_size.max(1);
        (0..self.len()).step_by(bs).map(move |i| self.batch(i..(i + bs).min(self.len())))
    }
}

/// Noisy sum-of-sines series `[rows, channels]`; channel `c` mixes a
/// period `24 + 12c` wave with a slower one plus uniform noise.
pub fn synthetic_sines(rows: usize, channels: usize, noise: f64, seed: u64) -> Result<SeriesDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tau = std::f64::consts::TAU;
    let phases: Vec<f64> = (0..channels).map(|_| rng.random_range(0.0..tau)).collect();
    let mut data = Vec::with_capacity(rows * channels);
    for t in 0..rows {
        let tf = t as f64;
        for (c, &ph) in phases.iter().enumerate() {
            let fast = (tau * tf / (24.0 + 12.0 * c as f64) + ph).sin();
            let slow = 0.5 * (tau * tf / (150.0 + 40.0 * c as f64)).sin();
            data.push((fast + slow + noise * rng.random_range(-1.0..1.0)) as Scalar);
        }
    }
    let mut ds = SeriesDataset::from_values("synthetic", Tensor::new(vec![rows, channels], data)?)?;
    ds.timestamps = (0..rows).map(|t| t.to_string()).collect();
    Ok(ds)
}

/// Writes `ds` as a CSV in the format [`load_csv`] reads.
pub fn write_csv(ds: &SeriesDataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| data_err!("{}: {e}", path.display()))?;
    let mut header = vec!["date".to_string()];
    header.extend(ds.columns.iter().cloned());
    w.write_record(&header).map_err(|e| data_err!("{e}"))?;
    let f = ds.channels();
    for (r, row) in ds.values.data().chunks(f).enumerate() {
        let mut rec = vec![ds.timestamps.get(r).cloned().unwrap_or_else(|| r.to_string())];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(|e| data_err!("{e}"))?;
    }
    w.flush()?;
    Ok(())
}
