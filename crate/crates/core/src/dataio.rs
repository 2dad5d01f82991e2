//! Data ingestion: CSV loading, per-feature min-max scaling, sliding
//! windows and stage splits.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Added to `max - min` so constant features map to zero instead of NaN.
pub const NORM_EPSILON: f64 = 1e-7;

const MISSING_TOKENS: &[&str] = &["", "na", "nan", "null", "none", "n/a"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MissingPolicy {
    /// Drop every row containing a missing cell and log the count.
    #[default]
    Drop,
    /// Fail on the first missing cell.
    Reject,
}

/// Column selection and parsing options for [`load_csv`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CsvSchema {
    /// Feature columns by header name. `None` selects every column.
    pub columns: Option<Vec<String>>,
    pub delimiter: char,
    /// Half-open range of data rows (header excluded) to keep.
    pub row_range: Option<(usize, usize)>,
    pub missing: MissingPolicy,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            columns: None,
            delimiter: ',',
            row_range: None,
            missing: MissingPolicy::Drop,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries {
    /// `T_raw × D`, one row per time step.
    pub values: Array2<f64>,
    pub feature_names: Vec<String>,
    pub source_path: String,
    /// Rows discarded under [`MissingPolicy::Drop`].
    pub dropped_rows: usize,
}

impl RawSeries {
    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<RawSeries> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    load_csv_from_reader(file, &path.display().to_string(), schema)
}

/// Parses CSV text from any reader. The first record is the header.
pub fn load_csv_from_reader<R: Read>(
    reader: R,
    source: &str,
    schema: &CsvSchema,
) -> Result<RawSeries> {
    if !schema.delimiter.is_ascii() {
        return Err(Error::Config(format!(
            "delimiter {:?} is not a single ASCII character",
            schema.delimiter
        )));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter as u8)
        .has_headers(true)
        .flexible(false)
        .from_reader(reader);

    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Csv(e.to_string()))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();

    let selected: Vec<usize> = match &schema.columns {
        None => (0..header.len()).collect(),
        Some(cols) => cols
            .iter()
            .map(|c| {
                header
                    .iter()
                    .position(|h| h == c)
                    .ok_or_else(|| Error::MissingColumn(c.clone()))
            })
            .collect::<Result<_>>()?,
    };
    if selected.is_empty() {
        return Err(Error::Config("no feature columns selected".into()));
    }
    let feature_names: Vec<String> = selected.iter().map(|&i| header[i].clone()).collect();

    let (start, end) = schema.row_range.unwrap_or((0, usize::MAX));
    if start > end {
        return Err(Error::Config(format!("row range {start}..{end} is empty")));
    }

    let mut flat = Vec::new();
    let mut rows = 0usize;
    let mut dropped = 0usize;
    let mut row_buf = Vec::with_capacity(selected.len());
    for (row, record) in rdr.records().enumerate() {
        if row >= end {
            break;
        }
        let record = record.map_err(|e| Error::Csv(e.to_string()))?;
        if row < start {
            continue;
        }
        row_buf.clear();
        let mut missing = false;
        for (&col, name) in selected.iter().zip(&feature_names) {
            let cell = record.get(col).unwrap_or("").trim();
            if MISSING_TOKENS.contains(&cell.to_ascii_lowercase().as_str()) {
                match schema.missing {
                    MissingPolicy::Reject => {
                        return Err(Error::MissingValue {
                            row,
                            column: name.clone(),
                        })
                    }
                    MissingPolicy::Drop => {
                        missing = true;
                        continue;
                    }
                }
            }
            let v: f64 = cell.parse().map_err(|_| Error::NonNumeric {
                row,
                column: name.clone(),
                value: cell.to_string(),
            })?;
            if !v.is_finite() {
                return Err(Error::NonNumeric {
                    row,
                    column: name.clone(),
                    value: cell.to_string(),
                });
            }
            row_buf.push(v);
        }
        if missing {
            dropped += 1;
            continue;
        }
        flat.extend_from_slice(&row_buf);
        rows += 1;
    }
    if dropped > 0 {
        log::warn!("{source}: dropped {dropped} rows with missing values");
    }
    if rows == 0 {
        return Err(Error::TooShort { rows: 0, window: 1 });
    }
    let values = Array2::from_shape_vec((rows, feature_names.len()), flat)
        .map_err(|e| Error::Shape(e.to_string()))?;
    Ok(RawSeries {
        values,
        feature_names,
        source_path: source.to_string(),
        dropped_rows: dropped,
    })
}

/// Per-feature min/max recorded at fit time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub epsilon: f64,
}

impl NormStats {
    pub fn dim(&self) -> usize {
        self.min.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.min.len() != self.max.len() {
            return Err(Error::Shape(format!(
                "norm stats: {} minima vs {} maxima",
                self.min.len(),
                self.max.len()
            )));
        }
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(Error::Config(format!("norm epsilon {}", self.epsilon)));
        }
        for (d, (lo, hi)) in self.min.iter().zip(&self.max).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Config(format!(
                    "norm stats feature {d}: min {lo} max {hi}"
                )));
            }
        }
        Ok(())
    }

    fn scale(&self, d: usize) -> f64 {
        self.max[d] - self.min[d] + self.epsilon
    }

    /// Maps rows of `D` features into `[0, 1)`.
    pub fn normalize(&self, values: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_dim(values.ncols())?;
        let mut out = values.clone();
        for (d, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            let (lo, scale) = (self.min[d], self.scale(d));
            col.mapv_inplace(|v| (v - lo) / scale);
        }
        Ok(out)
    }

    pub fn denormalize(&self, values: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_dim(values.ncols())?;
        let mut out = values.clone();
        for (d, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            let (lo, scale) = (self.min[d], self.scale(d));
            col.mapv_inplace(|v| v * scale + lo);
        }
        Ok(out)
    }

    /// Denormalizes every window of an `N × L × D` batch.
    pub fn denormalize_windows(&self, windows: &Array3<f64>) -> Result<Array3<f64>> {
        self.check_dim(windows.shape()[2])?;
        let mut out = windows.clone();
        for (d, mut col) in out.axis_iter_mut(Axis(2)).enumerate() {
            let (lo, scale) = (self.min[d], self.scale(d));
            col.mapv_inplace(|v| v * scale + lo);
        }
        Ok(out)
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        if d != self.dim() {
            return Err(Error::Shape(format!(
                "{d} features, norm stats fitted on {}",
                self.dim()
            )));
        }
        Ok(())
    }
}

/// Fits min-max scaling on the full series and applies it.
/// Seeded two-feature sine-plus-noise series for smoke tests and demos.
///
/// Feature `a` has period 32; feature `b` mixes periods 16 and 64.
/// Both carry Gaussian noise with standard deviation 0.1.
pub fn toy_sine_series(rows: usize, seed: u64) -> RawSeries {
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.1).expect("valid std");
    let tau = std::f64::consts::TAU;
    let values = Array2::from_shape_fn((rows, 2), |(t, d)| {
        let t = t as f64;
        let clean = if d == 0 {
            (tau * t / 32.0).sin()
        } else {
            0.5 * (tau * t / 16.0 + 1.0).sin() + (tau * t / 64.0).cos()
        };
        clean + noise.sample(&mut rng)
    });
    RawSeries {
        values,
        feature_names: vec!["a".into(), "b".into()],
        source_path: format!("toy(seed={seed})"),
        dropped_rows: 0,
    }
}

/// Writes a raw series as a headed CSV.
pub fn write_series_csv(path: impl AsRef<Path>, series: &RawSeries) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv_writer(path)?;
    w.write_record(&series.feature_names).map_err(csv_err)?;
    for row in series.values.rows() {
        w.write_record(row.iter().map(|v| format_value(*v))).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn fit_normalize(raw: &RawSeries) -> (RawSeries, NormStats) {
    let (min, max): (Vec<f64>, Vec<f64>) = raw
        .values
        .axis_iter(Axis(1))
        .map(|col| {
            col.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
        })
        .unzip();
    let stats = NormStats {
        min,
        max,
        epsilon: NORM_EPSILON,
    };
    let values = stats
        .normalize(&raw.values)
        .expect("stats fitted on the same columns");
    let normalized = RawSeries {
        values,
        ..raw.clone()
    };
    (normalized, stats)
}

/// `N` windows of shape `L_ser × D`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSet {
    pub windows: Array3<f64>,
    pub stride: usize,
}

impl WindowSet {
    pub fn new(windows: Array3<f64>, stride: usize) -> Self {
        Self { windows, stride }
    }

    pub fn empty(l_ser: usize, dim: usize) -> Self {
        Self::new(Array3::zeros((0, l_ser, dim)), 1)
    }

    pub fn len(&self) -> usize {
        self.windows.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn l_ser(&self) -> usize {
        self.windows.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.windows.shape()[2]
    }

    pub fn window(&self, i: usize) -> ArrayView2<'_, f64> {
        self.windows.index_axis(Axis(0), i)
    }

    /// Gathers the listed windows into a new set.
    pub fn select(&self, idx: &[usize]) -> WindowSet {
        WindowSet::new(self.windows.select(Axis(0), idx), self.stride)
    }
}

/// Number of windows produced by [`make_windows`].
pub fn window_count(t_raw: usize, l_ser: usize, stride: usize) -> usize {
    if t_raw < l_ser || stride == 0 {
        0
    } else {
        (t_raw - l_ser) / stride + 1
    }
}

pub fn make_windows(raw: &RawSeries, l_ser: usize, stride: usize) -> Result<WindowSet> {
    if l_ser < 2 {
        return Err(Error::Config(format!("window length {l_ser} < 2")));
    }
    if stride == 0 {
        return Err(Error::Config("window stride must be ≥ 1".into()));
    }
    let t_raw = raw.len();
    if t_raw < l_ser {
        return Err(Error::TooShort {
            rows: t_raw,
            window: l_ser,
        });
    }
    let n = window_count(t_raw, l_ser, stride);
    let d = raw.dim();
    let mut windows = Array3::zeros((n, l_ser, d));
    for (i, mut w) in windows.axis_iter_mut(Axis(0)).enumerate() {
        let start = i * stride;
        w.assign(&raw.values.slice(s![start..start + l_ser, ..]));
    }
    Ok(WindowSet::new(windows, stride))
}

/// `M` contiguous views into one window.
#[derive(Debug, Clone)]
pub struct StageView<'a> {
    pub stages: Vec<ArrayView2<'a, f64>>,
    pub l_sta: usize,
}

impl StageView<'_> {
    pub fn m(&self) -> usize {
        self.stages.len()
    }

    pub fn concat(&self) -> Array2<f64> {
        ndarray::concatenate(Axis(0), &self.stages).expect("stages share the feature width")
    }
}

pub fn split_stages(window: ArrayView2<'_, f64>, m: usize) -> Result<StageView<'_>> {
    let l_ser = window.nrows();
    if m == 0 || !l_ser.is_multiple_of(m) {
        return Err(Error::Config(format!(
            "window length {l_ser} is not divisible into {m} stages"
        )));
    }
    let l_sta = l_ser / m;
    let stages = (0..m)
        .map(|i| window.slice_move(s![i * l_sta..(i + 1) * l_sta, ..]))
        .collect();
    Ok(StageView { stages, l_sta })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CsvLayout {
    /// One file with a leading `window_id` column.
    #[default]
    Long,
    /// One file per window inside a directory.
    PerWindow,
}

/// Writes windows (already in source units) as CSV.
///
/// With [`CsvLayout::Long`] `path` is a file; with
/// [`CsvLayout::PerWindow`] it is a directory that receives
/// `window_00000.csv`, `window_00001.csv`, ...
pub fn write_windows_csv(
    path: impl AsRef<Path>,
    windows: &Array3<f64>,
    feature_names: &[String],
    layout: CsvLayout,
) -> Result<()> {
    let path = path.as_ref();
    if windows.shape()[2] != feature_names.len() {
        return Err(Error::Shape(format!(
            "{} feature names for {} features",
            feature_names.len(),
            windows.shape()[2]
        )));
    }
    match layout {
        CsvLayout::Long => {
            let mut header = vec!["window_id".to_string(), "t".to_string()];
            header.extend(feature_names.iter().cloned());
            let mut w = csv_writer(path)?;
            w.write_record(&header).map_err(csv_err)?;
            for (i, win) in windows.axis_iter(Axis(0)).enumerate() {
                for (t, row) in win.axis_iter(Axis(0)).enumerate() {
                    let mut rec = vec![i.to_string(), t.to_string()];
                    rec.extend(row.iter().map(|v| format_value(*v)));
                    w.write_record(&rec).map_err(csv_err)?;
                }
            }
            w.flush().map_err(|e| Error::io(path, e))?;
        }
        CsvLayout::PerWindow => {
            std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
            for (i, win) in windows.axis_iter(Axis(0)).enumerate() {
                let file = path.join(format!("window_{i:05}.csv"));
                let mut w = csv_writer(&file)?;
                w.write_record(feature_names).map_err(csv_err)?;
                for row in win.axis_iter(Axis(0)) {
                    w.write_record(row.iter().map(|v| format_value(*v)))
                        .map_err(csv_err)?;
                }
                w.flush().map_err(|e| Error::io(&file, e))?;
            }
        }
    }
    Ok(())
}

/// Parses the [`CsvLayout::Long`] format back into windows.
///
/// Rows must be grouped by `window_id` (0, 1, ...) with `t` running
/// 0..L inside each window; every window must have the same length.
pub fn read_windows_csv<R: Read>(reader: R, source: &str) -> Result<(WindowSet, Vec<String>)> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if header.len() < 3 || header[0] != "window_id" || header[1] != "t" {
        return Err(Error::Csv(format!(
            "{source}: expected header `window_id,t,<features...>`"
        )));
    }
    let names = header[2..].to_vec();
    let d = names.len();
    let mut values = Vec::new();
    let mut l_ser: Option<usize> = None;
    let (mut window, mut t) = (0usize, 0usize);
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        if rec.len() != header.len() {
            return Err(Error::Csv(format!("{source}: row {row} has {} fields", rec.len())));
        }
        let index = |col: usize| -> Result<usize> {
            rec[col].trim().parse().map_err(|_| Error::NonNumeric {
                row,
                column: header[col].clone(),
                value: rec[col].to_string(),
            })
        };
        let (w_id, t_id) = (index(0)?, index(1)?);
        if w_id == window + 1 && t_id == 0 && t > 0 {
            match l_ser {
                None => l_ser = Some(t),
                Some(l) if l != t => {
                    return Err(Error::Csv(format!("{source}: window {window} has {t} rows, expected {l}")));
                }
                _ => {}
            }
            window = w_id;
            t = 0;
        }
        if w_id != window || t_id != t {
            return Err(Error::Csv(format!(
                "{source}: row {row} is ({w_id}, {t_id}), expected ({window}, {t})"
            )));
        }
        for (c, cell) in rec.iter().enumerate().skip(2) {
            let v: f64 = cell.trim().parse().map_err(|_| Error::NonNumeric {
                row,
                column: header[c].clone(),
                value: cell.to_string(),
            })?;
            values.push(v);
        }
        t += 1;
    }
    if values.is_empty() {
        return Ok((WindowSet::empty(0, d), names));
    }
    let l = *l_ser.get_or_insert(t);
    if t != l {
        return Err(Error::Csv(format!("{source}: window {window} has {t} rows, expected {l}")));
    }
    let windows = Array3::from_shape_vec((window + 1, l, d), values)
        .map_err(|e| Error::Shape(e.to_string()))?;
    Ok((WindowSet::new(windows, 1), names))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Csv(e.to_string())
}

fn format_value(v: f64) -> String {
    // Shortest representation that round-trips.
    format!("{v:?}")
}

const CACHE_MAGIC: &[u8; 8] = b"SDWCACHE";
const CACHE_VERSION: u32 = 1;

/// Everything `prepare` hands to later commands.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedData {
    pub content_hash: String,
    pub feature_names: Vec<String>,
    pub norm: NormStats,
    pub windows: WindowSet,
}

#[derive(Serialize, Deserialize)]
struct CacheHeader {
    content_hash: String,
    feature_names: Vec<String>,
    norm: NormStats,
    stride: usize,
    n: usize,
    l_ser: usize,
    dim: usize,
}

/// Binary layout: magic, `u32` version, `u32` header length, JSON
/// header, then `n·l_ser·dim` little-endian `f64` values.
pub fn encode_window_cache(data: &PreparedData) -> Vec<u8> {
    let w = &data.windows;
    let header = CacheHeader {
        content_hash: data.content_hash.clone(),
        feature_names: data.feature_names.clone(),
        norm: data.norm.clone(),
        stride: w.stride,
        n: w.len(),
        l_ser: w.l_ser(),
        dim: w.dim(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + header.len() + 8 * w.windows.len());
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for v in w.windows.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_window_cache(bytes: &[u8]) -> Result<PreparedData> {
    let err = |m: &str| Error::Cache(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != CACHE_MAGIC {
        return Err(err("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CACHE_VERSION {
        return Err(Error::Cache(format!("unsupported version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if body.len() < hlen {
        return Err(err("truncated header"));
    }
    let header: CacheHeader = serde_json::from_slice(&body[..hlen])?;
    header.norm.validate()?;
    if header.feature_names.len() != header.dim || header.norm.dim() != header.dim {
        return Err(err("feature count disagrees with window width"));
    }
    let count = header
        .n
        .checked_mul(header.l_ser)
        .and_then(|v| v.checked_mul(header.dim))
        .ok_or_else(|| err("window dimensions overflow"))?;
    let data = &body[hlen..];
    if data.len() / 8 != count || !data.len().is_multiple_of(8) {
        return Err(Error::Cache(format!(
            "expected {count} values, found {} bytes",
            data.len()
        )));
    }
    let values: Vec<f64> = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let windows = Array3::from_shape_vec((header.n, header.l_ser, header.dim), values)
        .map_err(|e| Error::Cache(e.to_string()))?;
    Ok(PreparedData {
        content_hash: header.content_hash,
        feature_names: header.feature_names,
        norm: header.norm,
        windows: WindowSet::new(windows, header.stride.max(1)),
    })
}

pub fn write_window_cache(path: impl AsRef<Path>, data: &PreparedData) -> Result<()> {
    let path = path.as_ref();
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_window_cache(data))
        .map_err(|e| Error::io(path, e))
}

pub fn read_window_cache(path: impl AsRef<Path>) -> Result<PreparedData> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_window_cache(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn series(values: Array2<f64>) -> RawSeries {
        let d = values.ncols();
        RawSeries {
            values,
            feature_names: (0..d).map(|i| format!("f{i}")).collect(),
            source_path: "mem".into(),
            dropped_rows: 0,
        }
    }

    fn load(text: &str, schema: &CsvSchema) -> Result<RawSeries> {
        load_csv_from_reader(text.as_bytes(), "mem", schema)
    }

    #[test]
    fn loads_all_columns() {
        let text = "Open,High,Low,Close,Adj Close,Volume\n\
                    1,2,3,4,5,6\n\
                    7,8,9,10,11,12\n";
        let raw = load(text, &CsvSchema::default()).unwrap();
        assert_eq!(raw.dim(), 6);
        assert_eq!(raw.len(), 2);
        assert_eq!(raw.values[[1, 0]], 7.0);
        assert_eq!(raw.feature_names[4], "Adj Close");
    }

    #[test]
    fn selects_columns_in_requested_order() {
        let text = "a,b,c\n1,2,3\n4,5,6\n";
        let schema = CsvSchema {
            columns: Some(vec!["c".into(), "a".into()]),
            ..Default::default()
        };
        let raw = load(text, &schema).unwrap();
        assert_eq!(raw.values, array![[3.0, 1.0], [6.0, 4.0]]);
        assert_eq!(raw.feature_names, vec!["c", "a"]);
    }

    #[test]
    fn non_numeric_cell_names_row_and_column() {
        let text = "a,b\n1,2\n3,oops\n";
        match load(text, &CsvSchema::default()) {
            Err(Error::NonNumeric { row, column, value }) => {
                assert_eq!((row, column.as_str(), value.as_str()), (1, "b", "oops"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_rows_dropped_or_rejected() {
        let text = "a,b\n1,2\n3,\n5,NaN\n7,8\n";
        let raw = load(text, &CsvSchema::default()).unwrap();
        assert_eq!(raw.len(), 2);
        assert_eq!(raw.dropped_rows, 2);

        let strict = CsvSchema {
            missing: MissingPolicy::Reject,
            ..Default::default()
        };
        assert!(matches!(
            load(text, &strict),
            Err(Error::MissingValue { row: 1, .. })
        ));
    }

    #[test]
    fn unknown_column_is_named() {
        let schema = CsvSchema {
            columns: Some(vec!["zz".into()]),
            ..Default::default()
        };
        match load("a\n1\n", &schema) {
            Err(Error::MissingColumn(c)) => assert_eq!(c, "zz"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn row_range_and_delimiter() {
        let text = "a;b\n1;2\n3;4\n5;6\n";
        let schema = CsvSchema {
            delimiter: ';',
            row_range: Some((1, 3)),
            ..Default::default()
        };
        let raw = load(text, &schema).unwrap();
        assert_eq!(raw.values, array![[3.0, 4.0], [5.0, 6.0]]);
    }

    #[test]
    fn short_file_is_a_windowing_error_not_a_load_error() {
        let mut text = String::from("x\n");
        for i in 0..100 {
            text.push_str(&format!("{i}\n"));
        }
        let raw = load(&text, &CsvSchema::default()).unwrap();
        assert!(matches!(
            make_windows(&raw, 128, 1),
            Err(Error::TooShort {
                rows: 100,
                window: 128
            })
        ));
    }

    #[test]
    fn min_max_scaling() {
        let (norm, stats) = fit_normalize(&series(array![[2.0, 5.0], [4.0, 5.0], [6.0, 5.0]]));
        let col: Vec<f64> = norm.values.column(0).to_vec();
        let expect = [0.0, 2.0 / (4.0 + NORM_EPSILON), 4.0 / (4.0 + NORM_EPSILON)];
        for (a, b) in col.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((col[1] - 0.5).abs() < 1e-7 && (col[2] - 1.0).abs() < 1e-7);
        assert!(norm.values.column(1).iter().all(|&v| v == 0.0));
        let back = stats.denormalize(&norm.values).unwrap();
        assert_eq!(back.column(1).to_vec(), vec![5.0; 3]);
    }

    #[test]
    fn window_counts() {
        let raw = series(Array2::from_shape_fn((100, 1), |(i, _)| i as f64));
        assert_eq!(make_windows(&raw, 24, 1).unwrap().len(), 77);

        let raw = series(Array2::from_shape_fn((24, 2), |(i, j)| (i * 2 + j) as f64));
        let ws = make_windows(&raw, 24, 1).unwrap();
        assert_eq!(ws.len(), 1);
        assert_eq!(ws.window(0), raw.values.view());

        let raw = series(Array2::from_shape_fn((256, 1), |(i, _)| i as f64));
        let ws = make_windows(&raw, 64, 64).unwrap();
        assert_eq!(ws.len(), 4);
        for i in 0..4 {
            assert_eq!(ws.windows[[i, 0, 0]], (i * 64) as f64);
        }
    }

    #[test]
    fn stride_one_windows_cover_the_series() {
        let raw = series(Array2::from_shape_fn((13, 2), |(i, j)| (10 * i + j) as f64));
        let ws = make_windows(&raw, 5, 1).unwrap();
        for i in 0..ws.len() {
            for j in 0..5 {
                assert_eq!(ws.window(i).row(j), raw.values.row(i + j));
            }
        }
    }

    #[test]
    fn stage_split() {
        let w = Array2::from_shape_fn((256, 3), |(i, j)| (i * 3 + j) as f64);
        let sv = split_stages(w.view(), 4).unwrap();
        assert_eq!((sv.m(), sv.l_sta), (4, 64));
        assert_eq!(sv.concat(), w);
        assert_eq!(sv.stages[2][[0, 0]], w[[128, 0]]);

        let one = split_stages(w.view(), 1).unwrap();
        assert_eq!(one.stages[0], w.view());

        let w = Array2::<f64>::zeros((100, 1));
        assert!(split_stages(w.view(), 3).is_err());
    }

    #[test]
    fn cache_round_trip_and_rejects_garbage() {
        let ws = WindowSet::new(Array3::from_shape_fn((3, 4, 2), |(a, b, c)| (a + b * c) as f64), 2);
        let data = PreparedData {
            content_hash: "abc".into(),
            feature_names: vec!["x".into(), "y".into()],
            norm: NormStats {
                min: vec![0.0, 1.0],
                max: vec![1.0, 2.0],
                epsilon: NORM_EPSILON,
            },
            windows: ws,
        };
        let bytes = encode_window_cache(&data);
        assert_eq!(decode_window_cache(&bytes).unwrap(), data);
        assert!(decode_window_cache(&bytes[..bytes.len() - 3]).is_err());
        assert!(decode_window_cache(b"SDWCACHE\x01\0\0\0\xff\xff\xff\xff").is_err());
    }

    #[test]
    fn toy_series_round_trips_through_csv() {
        let a = toy_sine_series(50, 3);
        assert_eq!(a.values, toy_sine_series(50, 3).values);
        assert_ne!(a.values, toy_sine_series(50, 4).values);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.csv");
        write_series_csv(&path, &a).unwrap();
        let back = load_csv(&path, &CsvSchema::default()).unwrap();
        assert_eq!(back.values, a.values);
        assert_eq!(back.feature_names, a.feature_names);
    }

    #[test]
    fn long_csv_export_has_window_ids() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.csv");
        let w = Array3::from_shape_fn((2, 3, 1), |(a, b, _)| (a * 10 + b) as f64);
        write_windows_csv(&path, &w, &["v".into()], CsvLayout::Long).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "window_id,t,v");
        assert_eq!(lines.len(), 7);
        assert_eq!(lines[4], "1,0,10.0");

        let (back, names) = read_windows_csv(text.as_bytes(), "out.csv").unwrap();
        assert_eq!(back.windows, w);
        assert_eq!(names, vec!["v".to_string()]);
        let (empty, _) = read_windows_csv("window_id,t,v\n".as_bytes(), "e").unwrap();
        assert!(empty.is_empty());
        for bad in [
            "window_id,t,v\n0,0,1\n0,1,2\n1,0,3\n",
            "window_id,t,v\n0,1,1\n",
            "window_id,t,v\n0,0,x\n",
            "id,t,v\n0,0,1\n",
            "window_id,t,v\n0,0,1\n2,0,1\n",
        ] {
            assert!(read_windows_csv(bad.as_bytes(), "bad").is_err(), "{bad}");
        }

        let per = dir.path().join("per");
        write_windows_csv(&per, &w, &["v".into()], CsvLayout::PerWindow).unwrap();
        assert!(per.join("window_00001.csv").exists());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn normalize_round_trip(vals in proptest::collection::vec(-1e6f64..1e6, 6..60)) {
                let rows = vals.len() / 3;
                let a = Array2::from_shape_vec((rows, 3), vals[..rows * 3].to_vec()).unwrap();
                let (norm, stats) = fit_normalize(&series(a.clone()));
                prop_assert!(norm.values.iter().all(|&v| (0.0..1.0).contains(&v)));
                let back = stats.denormalize(&norm.values).unwrap();
                for (x, y) in a.iter().zip(back.iter()) {
                    prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
                }
            }

            #[test]
            fn stage_concat_identity(m in 1usize..8, l_sta in 1usize..20, d in 1usize..4) {
                let w = Array2::from_shape_fn((m * l_sta, d), |(i, j)| (i as f64).sin() + j as f64);
                let sv = split_stages(w.view(), m).unwrap();
                prop_assert_eq!(sv.concat(), w);
            }
        }
    }
}
