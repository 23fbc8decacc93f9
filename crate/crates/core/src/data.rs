//! Dataset ingestion, chronological splits, standardization and window
//! sampling, plus a synthetic multi-periodic generator.

use std::fmt;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use chrono::{Duration, NaiveDate, NaiveDateTime};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

const TIMESTAMP_FORMATS: [&str; 4] = ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M", "%Y/%m/%d %H:%M"];
pub const TIMESTAMP_OUTPUT: &str = "%Y-%m-%d %H:%M:%S";

/// Parses the timestamp formats found in common benchmark files.
pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    TIMESTAMP_FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
        .or_else(|| {
            NaiveDate::parse_from_str(s, "%Y-%m-%d")
                .ok()
                .and_then(|d| d.and_hms_opt(0, 0, 0))
        })
}

/// A multivariate series with strictly increasing timestamps.
#[derive(Clone, Debug, PartialEq)]
pub struct RawDataset {
    pub name: String,
    pub timestamps: Vec<NaiveDateTime>,
    pub channels: Vec<String>,
    /// Row-major `(T, C)`.
    pub values: Vec<f64>,
}

impl RawDataset {
    pub fn rows(&self) -> usize {
        self.timestamps.len()
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let c = self.num_channels();
        &self.values[t * c..(t + 1) * c]
    }

    /// Median spacing between consecutive timestamps.
    pub fn median_step(&self) -> Option<Duration> {
        let mut steps: Vec<Duration> = self.timestamps.windows(2).map(|w| w[1] - w[0]).collect();
        if steps.is_empty() {
            return None;
        }
        steps.sort();
        Some(steps[steps.len() / 2])
    }

    /// The last `n` rows as a new dataset.
    pub fn tail(&self, n: usize) -> RawDataset {
        let start = self.rows().saturating_sub(n);
        let c = self.num_channels();
        RawDataset {
            name: self.name.clone(),
            timestamps: self.timestamps[start..].to_vec(),
            channels: self.channels.clone(),
            values: self.values[start * c..].to_vec(),
        }
    }
}

/// Reads a header + timestamp-first CSV. Blank or unparseable cells and
/// non-increasing timestamps are errors carrying 1-based file coordinates.
pub fn load_csv(path: impl AsRef<Path>) -> Result<RawDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(file);
    let csv_err = |row: usize, column: usize, msg: String| Error::Csv {
        path: path.to_path_buf(),
        row,
        column,
        msg,
    };
    let headers = reader.headers().map_err(|e| csv_err(1, 1, e.to_string()))?.clone();
    if headers.len() < 2 {
        return Err(csv_err(1, headers.len().max(1), "expected a timestamp column and at least one value column".into()));
    }
    let channels: Vec<String> = headers.iter().skip(1).map(|h| h.trim().to_string()).collect();
    let c = channels.len();
    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let record = record.map_err(|e| csv_err(row, 1, e.to_string()))?;
        if record.len() != c + 1 {
            return Err(csv_err(row, record.len().min(c + 1), format!("expected {} cells, found {}", c + 1, record.len())));
        }
        let ts = parse_timestamp(&record[0]).ok_or_else(|| csv_err(row, 1, format!("unparseable timestamp `{}`", &record[0])))?;
        if let Some(&prev) = timestamps.last() {
            if ts <= prev {
                return Err(csv_err(row, 1, format!("timestamp {ts} does not increase past {prev}")));
            }
        }
        timestamps.push(ts);
        for (j, cell) in record.iter().skip(1).enumerate() {
            let name = &channels[j];
            let cell = cell.trim();
            if cell.is_empty() {
                return Err(csv_err(row, j + 2, format!("missing value in `{name}`")));
            }
            let v: f64 = cell
                .parse()
                .map_err(|_| csv_err(row, j + 2, format!("unparseable value `{cell}` in `{name}`")))?;
            if !v.is_finite() {
                return Err(csv_err(row, j + 2, format!("non-finite value `{cell}` in `{name}`")));
            }
            values.push(v);
        }
    }
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(RawDataset {
        name,
        timestamps,
        channels,
        values,
    })
}

/// Writes `ds` in the format [`load_csv`] reads.
pub fn write_csv(ds: &RawDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let wrap = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::io(path, std::io::Error::other(format!("{other:?}"))),
    };
    let mut w = csv::Writer::from_path(path).map_err(wrap)?;
    let mut header = vec!["date".to_string()];
    header.extend(ds.channels.iter().cloned());
    w.write_record(&header).map_err(wrap)?;
    for t in 0..ds.rows() {
        let mut rec = vec![ds.timestamps[t].format(TIMESTAMP_OUTPUT).to_string()];
        rec.extend(ds.row(t).iter().map(|v| format!("{v:?}")));
        w.write_record(&rec).map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Row budget convention for chronological splits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SplitPolicy {
    /// 12/4/4 months of hourly rows: 8640/2880/2880.
    #[default]
    EttHourly,
    /// Same months at 15-minute resolution.
    EttMinutely,
    /// 70/10/20 percent.
    Ratio702010,
}

impl FromStr for SplitPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ett_hourly" => Ok(Self::EttHourly),
            "ett_minutely" => Ok(Self::EttMinutely),
            "ratio_702010" => Ok(Self::Ratio702010),
            other => Err(Error::Config(vec![format!(
                "split policy `{other}` is not ett_hourly, ett_minutely or ratio_702010"
            )])),
        }
    }
}

impl fmt::Display for SplitPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::EttHourly => "ett_hourly",
            Self::EttMinutely => "ett_minutely",
            Self::Ratio702010 => "ratio_702010",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    #[default]
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

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(vec![format!("split `{other}` is not train, val or test")])),
        }
    }
}

/// Row ranges of the three splits. `val` and `test` start `L_in` rows
/// before their own segment so their first window has a full look-back.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitRanges {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
    pub l_in: usize,
}

impl SplitRanges {
    pub fn get(&self, split: Split) -> Range<usize> {
        match split {
            Split::Train => self.train.clone(),
            Split::Val => self.val.clone(),
            Split::Test => self.test.clone(),
        }
    }

    /// Segment lengths without the look-back prefix.
    pub fn own_lengths(&self) -> [usize; 3] {
        [self.train.len(), self.val.len() - self.l_in, self.test.len() - self.l_in]
    }
}

pub fn chronological_split(rows: usize, policy: SplitPolicy, l_in: usize, l_pred: usize) -> Result<SplitRanges> {
    let (n_train, n_val, n_test) = match policy {
        SplitPolicy::EttHourly | SplitPolicy::EttMinutely => {
            let scale = if policy == SplitPolicy::EttMinutely { 4 } else { 1 };
            let month = 30 * 24 * scale;
            let need = 20 * month;
            if rows < need {
                return Err(Error::Split(format!(
                    "{policy} needs {need} rows, dataset has {rows}"
                )));
            }
            (12 * month, 4 * month, 4 * month)
        }
        SplitPolicy::Ratio702010 => {
            let train = rows * 7 / 10;
            let test = rows * 2 / 10;
            (train, rows - train - test, test)
        }
    };
    let train = 0..n_train;
    let val = n_train.saturating_sub(l_in)..n_train + n_val;
    let test = (n_train + n_val).saturating_sub(l_in)..n_train + n_val + n_test;
    let need = l_in + l_pred;
    for (name, r) in [("train", &train), ("val", &val), ("test", &test)] {
        if r.len() < need {
            return Err(Error::Split(format!(
                "{name} split has {} rows, fewer than L_in + L_pred = {need}",
                r.len()
            )));
        }
    }
    Ok(SplitRanges { train, val, test, l_in })
}

/// Per-channel z-score statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    /// Population statistics over `rows` of `values` (row-major, `c` columns).
    /// A constant channel gets unit scale.
    pub fn fit(values: &[f64], c: usize, rows: Range<usize>) -> Self {
        let n = rows.len() as f64;
        let mut mean = vec![0.0; c];
        for t in rows.clone() {
            for j in 0..c {
                mean[j] += values[t * c + j];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; c];
        for t in rows {
            for j in 0..c {
                let e = values[t * c + j] - mean[j];
                var[j] += e * e;
            }
        }
        let std = var.iter().map(|v| (v / n).sqrt()).map(|s| if s > 0.0 { s } else { 1.0 }).collect();
        Self { mean, std }
    }

    pub fn transform(&self, values: &[f64]) -> Vec<f64> {
        let c = self.mean.len();
        values
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[i % c]) / self.std[i % c])
            .collect()
    }

    pub fn inverse(&self, values: &[f64]) -> Vec<f64> {
        let c = self.mean.len();
        values
            .iter()
            .enumerate()
            .map(|(i, v)| v * self.std[i % c] + self.mean[i % c])
            .collect()
    }
}

/// A dataset standardized with train statistics and split into ranges.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub raw: RawDataset,
    pub scaler: Scaler,
    /// Standardized row-major `(T, C)` values.
    pub values: Vec<f64>,
    pub splits: SplitRanges,
    pub l_in: usize,
    pub l_pred: usize,
}

impl PreparedData {
    pub fn new(raw: RawDataset, policy: SplitPolicy, l_in: usize, l_pred: usize) -> Result<Self> {
        let splits = chronological_split(raw.rows(), policy, l_in, l_pred)?;
        let scaler = Scaler::fit(&raw.values, raw.num_channels(), splits.train.clone());
        let values = scaler.transform(&raw.values);
        Ok(Self {
            raw,
            scaler,
            values,
            splits,
            l_in,
            l_pred,
        })
    }

    pub fn channels(&self) -> usize {
        self.raw.num_channels()
    }

    pub fn sampler(&self, split: Split) -> WindowSampler<'_> {
        WindowSampler {
            split,
            values: &self.values,
            channels: self.channels(),
            range: self.splits.get(split),
            l_in: self.l_in,
            l_pred: self.l_pred,
        }
    }
}

/// One mini-batch of windows.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesBatch<T> {
    /// `(B, L_in, C)`
    pub input: Tensor<T>,
    /// `(B, L_pred, C)`
    pub target: Tensor<T>,
    /// Absolute row index of each window's first input row.
    pub starts: Vec<usize>,
}

/// Sliding windows over one split.
#[derive(Clone, Debug)]
pub struct WindowSampler<'a> {
    pub split: Split,
    values: &'a [f64],
    channels: usize,
    pub range: Range<usize>,
    pub l_in: usize,
    pub l_pred: usize,
}

impl<'a> WindowSampler<'a> {
    pub fn num_windows(&self) -> usize {
        (self.range.len() + 1).saturating_sub(self.l_in + self.l_pred)
    }

    /// Start rows of every window, in chronological order.
    pub fn starts(&self) -> Vec<usize> {
        (0..self.num_windows()).map(|i| self.range.start + i).collect()
    }

    /// `(input, target)` slices of the window starting at row `start`.
    pub fn window(&self, start: usize) -> (&'a [f64], &'a [f64]) {
        let c = self.channels;
        let mid = start + self.l_in;
        let end = mid + self.l_pred;
        (&self.values[start * c..mid * c], &self.values[mid * c..end * c])
    }

    /// Window starts in batch order: shuffled by `seed` for the train split,
    /// chronological otherwise.
    pub fn order(&self, seed: u64) -> Vec<usize> {
        let mut starts = self.starts();
        if self.split == Split::Train {
            starts.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        starts
    }

    pub fn batch<T: Real>(&self, starts: &[usize]) -> SeriesBatch<T> {
        let c = self.channels;
        let mut input = Vec::with_capacity(starts.len() * self.l_in * c);
        let mut target = Vec::with_capacity(starts.len() * self.l_pred * c);
        for &s in starts {
            let (x, y) = self.window(s);
            input.extend(x.iter().map(|&v| T::from_f64_lossy(v)));
            target.extend(y.iter().map(|&v| T::from_f64_lossy(v)));
        }
        SeriesBatch {
            input: Tensor::from_parts(vec![starts.len(), self.l_in, c], input),
            target: Tensor::from_parts(vec![starts.len(), self.l_pred, c], target),
            starts: starts.to_vec(),
        }
    }

    /// All batches of one pass; the last one may be short.
    pub fn batches<T: Real>(&self, batch_size: usize, seed: u64) -> impl Iterator<Item = SeriesBatch<T>> + '_ {
        let order = self.order(seed);
        let size = batch_size.max(1);
        let chunks: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
        chunks.into_iter().map(move |c| self.batch(&c))
    }
}

/// Sum of sinusoids per channel with seeded phases plus Gaussian noise,
/// sampled hourly from 2020-01-01.
pub fn synth_multiperiodic(
    rows: usize,
    channels: usize,
    periods: &[f64],
    amplitudes: &[f64],
    noise_sigma: f64,
    seed: u64,
) -> Result<RawDataset> {
    let mut errs = Vec::new();
    if periods.is_empty() || periods.iter().any(|&p| !(p > 0.0)) {
        errs.push(format!("synth.periods must be positive, got {periods:?}"));
    }
    if amplitudes.len() != periods.len() {
        errs.push(format!(
            "synth.amplitudes has {} entries for {} periods",
            amplitudes.len(),
            periods.len()
        ));
    }
    if !(noise_sigma >= 0.0) {
        errs.push(format!("synth.noise_sigma = {noise_sigma} must be nonnegative"));
    }
    if rows == 0 || channels == 0 {
        errs.push("synth.rows and synth.channels must be positive".into());
    }
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tau = std::f64::consts::TAU;
    let phases: Vec<f64> = (0..channels * periods.len()).map(|_| rng.random::<f64>() * tau).collect();
    let noise = Normal::new(0.0, noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut values = Vec::with_capacity(rows * channels);
    for t in 0..rows {
        for c in 0..channels {
            let mut v: f64 = periods
                .iter()
                .zip(amplitudes)
                .enumerate()
                .map(|(j, (&p, &a))| a * (tau * t as f64 / p + phases[c * periods.len() + j]).sin())
                .sum();
            if noise_sigma > 0.0 {
                v += noise.sample(&mut rng);
            }
            values.push(v);
        }
    }
    let start = NaiveDate::from_ymd_opt(2020, 1, 1)
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .expect("valid date");
    Ok(RawDataset {
        name: "synthetic".into(),
        timestamps: (0..rows).map(|t| start + Duration::hours(t as i64)).collect(),
        channels: (0..channels).map(|c| format!("ch{c}")).collect(),
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_arithmetic() {
        let s = chronological_split(17_420, SplitPolicy::EttHourly, 96, 96).unwrap();
        assert_eq!(s.own_lengths(), [8640, 2880, 2880]);
        assert_eq!(s.val.start, 8640 - 96);
        let s = chronological_split(1000, SplitPolicy::Ratio702010, 96, 96).unwrap();
        assert_eq!(s.own_lengths(), [700, 100, 200]);
        assert!(chronological_split(100, SplitPolicy::Ratio702010, 96, 96).is_err());
        assert!(chronological_split(50_000, SplitPolicy::EttMinutely, 96, 96).is_err());
        let s = chronological_split(69_680, SplitPolicy::EttMinutely, 96, 96).unwrap();
        assert_eq!(s.own_lengths(), [34_560, 11_520, 11_520]);
    }

    #[test]
    fn timestamps_parse() {
        assert!(parse_timestamp("2016-07-01 00:00:00").is_some());
        assert!(parse_timestamp("2016-07-01").is_some());
        assert!(parse_timestamp("yesterday").is_none());
    }

    #[test]
    fn synth_rejects_bad_periods() {
        assert!(synth_multiperiodic(10, 1, &[0.0], &[1.0], 0.0, 1).is_err());
        assert!(synth_multiperiodic(10, 1, &[4.0], &[], 0.0, 1).is_err());
    }
}
