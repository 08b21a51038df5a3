//! Reading and writing every artifact: dense data (wide or long CSV), designs
//! (CSV plus a JSON sidecar), fitted models (JSON) and experiment tables.
//!
//! All writers are deterministic: fixed column order and floats printed with
//! 12 significant digits.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use pilotdesign_core::design::{
    compute_target_concurrence, literal_c3, ConcurrenceDeviation, DesignSpec, IncidenceMatrix, Structure,
};
use pilotdesign_core::fpca::{FpcaModel, SparseDataset, SubjectObs};
use pilotdesign_core::sim::{CriterionRow, DenseData, ExperimentResult, FailureRecord, Record, SummaryRow};

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("subject '{subject}' has two observations at time {time}")]
    DuplicateObservation { subject: String, time: String },
    #[error("grid times must be strictly increasing (column {column})")]
    NonmonotoneGrid { column: usize },
    #[error("invalid content: {0}")]
    Invalid(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io { path: path.to_path_buf(), source }
}

fn parse_err(line: u64, message: impl Into<String>) -> IoError {
    IoError::Parse { line, message: message.into() }
}

/// `x` with 12 significant digits, trailing zeros removed; exponent form
/// outside `[1e-5, 1e12)`.
pub fn fmt_float(x: f64) -> String {
    if x.is_nan() {
        return "NaN".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{:.11e}", x);
    let (mant, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..12).contains(&exp) {
        trim_zeros(format!("{:.*}", (11 - exp) as usize, x))
    } else {
        format!("{}e{}", trim_zeros(mant.to_string()), exp)
    }
}

fn trim_zeros(s: String) -> String {
    if !s.contains('.') {
        return s;
    }
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

fn parse_value(s: &str, line: u64) -> Result<f64, IoError> {
    let s = s.trim();
    match s {
        "" | "NA" | "NaN" | "nan" | "." => Ok(f64::NAN),
        _ => s.parse().map_err(|_| parse_err(line, format!("'{}' is not a number", s))),
    }
}

/// Numeric value of a time label such as `12`, `t12` or `day12`.
fn parse_time_label(label: &str, line: u64) -> Result<f64, IoError> {
    let start = label
        .find(|c: char| c.is_ascii_digit() || c == '-' || c == '.')
        .ok_or_else(|| parse_err(line, format!("column '{}' has no time value", label)))?;
    label[start..].trim().parse().map_err(|_| parse_err(line, format!("column '{}' has no time value", label)))
}

/// Input layout of a dense data file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Layout {
    /// `subject,t1,...,tv`: one row per subject.
    Wide,
    /// `subject,time,value`: one row per observation.
    Long,
}

/// Longitudinal data on a common grid; missing entries are `NaN`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseDataset {
    pub subject_ids: Vec<String>,
    pub grid: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl DenseDataset {
    pub fn subjects(&self) -> usize {
        self.values.len()
    }

    pub fn missing_fraction(&self) -> f64 {
        let total = self.values.len() * self.grid.len();
        if total == 0 {
            return 0.0;
        }
        let missing = self.values.iter().flatten().filter(|x| x.is_nan()).count();
        missing as f64 / total as f64
    }

    pub fn to_dense_data(&self) -> DenseData {
        DenseData { grid: self.grid.clone(), rows: self.values.clone() }
    }

    /// The observed entries as a sparse data set.
    pub fn to_sparse(&self) -> Result<SparseDataset, IoError> {
        let subjects = self
            .values
            .iter()
            .map(|r| {
                let idx: Vec<usize> = (0..r.len()).filter(|&j| !r[j].is_nan()).collect();
                let vals = idx.iter().map(|&j| r[j]).collect();
                SubjectObs::new(idx, vals)
            })
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| IoError::Invalid(e.to_string()))?;
        SparseDataset::new(self.grid.clone(), subjects).map_err(|e| IoError::Invalid(e.to_string()))
    }
}

fn reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().has_headers(false).flexible(true).trim(csv::Trim::All).from_reader(r)
}

fn records<R: Read>(r: R) -> Result<Vec<(u64, csv::StringRecord)>, IoError> {
    let mut out = Vec::new();
    for rec in reader(r).records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        out.push((line, rec));
    }
    if out.is_empty() {
        return Err(parse_err(1, "empty file"));
    }
    Ok(out)
}

pub fn read_dense_csv(path: &Path, layout: Layout) -> Result<DenseDataset, IoError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    parse_dense(file, layout)
}

pub fn parse_dense<R: Read>(r: R, layout: Layout) -> Result<DenseDataset, IoError> {
    let rows = records(r)?;
    match layout {
        Layout::Wide => parse_wide(&rows),
        Layout::Long => parse_long(&rows),
    }
}

fn parse_wide(rows: &[(u64, csv::StringRecord)]) -> Result<DenseDataset, IoError> {
    let (hline, header) = &rows[0];
    if header.len() < 2 {
        return Err(parse_err(*hline, "header needs a subject column and at least one time"));
    }
    let grid = header.iter().skip(1).map(|h| parse_time_label(h, *hline)).collect::<Result<Vec<_>, _>>()?;
    if let Some(c) = grid.windows(2).position(|w| w[0] >= w[1]) {
        return Err(IoError::NonmonotoneGrid { column: c + 3 });
    }
    let mut subject_ids = Vec::new();
    let mut values = Vec::new();
    for (line, rec) in &rows[1..] {
        if rec.len() != grid.len() + 1 {
            return Err(parse_err(*line, format!("expected {} fields, found {}", grid.len() + 1, rec.len())));
        }
        subject_ids.push(rec[0].to_string());
        values.push(rec.iter().skip(1).map(|f| parse_value(f, *line)).collect::<Result<Vec<_>, _>>()?);
    }
    Ok(DenseDataset { subject_ids, grid, values })
}

/// Orders subject ids numerically when all are numbers, else lexically.
fn sort_ids(ids: &mut [String]) {
    if ids.iter().all(|s| s.parse::<f64>().is_ok()) {
        ids.sort_by(|a, b| {
            let (x, y) = (a.parse::<f64>().unwrap(), b.parse::<f64>().unwrap());
            x.total_cmp(&y).then_with(|| a.cmp(b))
        });
    } else {
        ids.sort();
    }
}

fn parse_long(rows: &[(u64, csv::StringRecord)]) -> Result<DenseDataset, IoError> {
    let (hline, header) = &rows[0];
    let names: Vec<&str> = header.iter().collect();
    if names != ["subject", "time", "value"] {
        return Err(parse_err(*hline, "long layout needs the header subject,time,value"));
    }
    let mut obs: BTreeMap<String, BTreeMap<u64, f64>> = BTreeMap::new();
    let mut times: Vec<f64> = Vec::new();
    for (line, rec) in &rows[1..] {
        if rec.len() != 3 {
            return Err(parse_err(*line, format!("expected 3 fields, found {}", rec.len())));
        }
        let t: f64 = rec[1].parse().map_err(|_| parse_err(*line, format!("'{}' is not a time", &rec[1])))?;
        let value = parse_value(&rec[2], *line)?;
        // -0.0 and 0.0 name the same time
        let key = (t + 0.0).to_bits();
        if obs.entry(rec[0].to_string()).or_default().insert(key, value).is_some() {
            return Err(IoError::DuplicateObservation { subject: rec[0].to_string(), time: rec[1].to_string() });
        }
        times.push(t + 0.0);
    }
    times.sort_by(f64::total_cmp);
    times.dedup();
    let mut subject_ids: Vec<String> = obs.keys().cloned().collect();
    sort_ids(&mut subject_ids);
    let values = subject_ids
        .iter()
        .map(|s| {
            let row = &obs[s];
            times.iter().map(|t| row.get(&t.to_bits()).copied().unwrap_or(f64::NAN)).collect()
        })
        .collect();
    Ok(DenseDataset { subject_ids, grid: times, values })
}

fn create(path: &Path) -> Result<fs::File, IoError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
    }
    fs::File::create(path).map_err(io_err(path))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>, IoError> {
    Ok(csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(create(path)?))
}

fn csv_fail(path: &Path) -> impl Fn(csv::Error) -> IoError + '_ {
    move |e| IoError::Io { path: path.to_path_buf(), source: std::io::Error::other(e.to_string()) }
}

fn finish(path: &Path, w: csv::Writer<fs::File>) -> Result<(), IoError> {
    w.into_inner().map_err(|e| io_err(path)(std::io::Error::other(e.to_string())))?.flush().map_err(io_err(path))
}

pub fn write_dense_csv(path: &Path, data: &DenseDataset) -> Result<(), IoError> {
    let mut w = csv_writer(path)?;
    let f = csv_fail(path);
    let mut header = vec!["subject".to_string()];
    header.extend(data.grid.iter().map(|t| format!("t{}", fmt_float(*t))));
    w.write_record(&header).map_err(&f)?;
    for (id, row) in data.subject_ids.iter().zip(&data.values) {
        let mut rec = vec![id.clone()];
        rec.extend(row.iter().map(|x| if x.is_nan() { "NA".into() } else { fmt_float(*x) }));
        w.write_record(&rec).map_err(&f)?;
    }
    finish(path, w)
}

/// One `subject,time,value` row per observation.
pub fn write_sparse_long(path: &Path, ids: &[String], data: &SparseDataset) -> Result<(), IoError> {
    let mut w = csv_writer(path)?;
    let f = csv_fail(path);
    w.write_record(["subject", "time", "value"]).map_err(&f)?;
    for (id, s) in ids.iter().zip(&data.subjects) {
        for (&j, &u) in s.indices.iter().zip(&s.values) {
            w.write_record([id.as_str(), &fmt_float(data.grid[j]), &fmt_float(u)]).map_err(&f)?;
        }
    }
    finish(path, w)
}

/// Sidecar metadata of a design file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignMeta {
    pub structure: Structure,
    pub spec: DesignSpec,
    pub snippet_rows: usize,
    pub targets: TargetsMeta,
    pub deviations: ConcurrenceDeviation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetsMeta {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    /// `c3` with the `C(n-1, 2)` denominator, for reference.
    pub c3_literal: f64,
}

impl DesignMeta {
    pub fn new(design: &IncidenceMatrix, spec: &DesignSpec) -> Result<Self, IoError> {
        let t = compute_target_concurrence(spec).map_err(|e| IoError::Invalid(e.to_string()))?;
        Ok(DesignMeta {
            structure: design.structure(),
            spec: spec.clone(),
            snippet_rows: design.snippet_rows(),
            targets: TargetsMeta { c1: t.c1, c2: t.c2, c3: t.c3, c3_literal: literal_c3(spec, &t) },
            deviations: design.concurrence().deviations(&t),
        })
    }
}

/// `design.csv` → `design.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes the 0/1 matrix with header `t1,...,tv` and, when given, the
/// metadata sidecar.
pub fn write_design(path: &Path, design: &IncidenceMatrix, meta: Option<&DesignMeta>) -> Result<(), IoError> {
    let mut w = csv_writer(path)?;
    let f = csv_fail(path);
    let header: Vec<String> = (1..=design.grid_size()).map(|j| format!("t{}", j)).collect();
    w.write_record(&header).map_err(&f)?;
    for i in 0..design.subjects() {
        w.write_record(design.row(i).iter().map(|x| x.to_string())).map_err(&f)?;
    }
    finish(path, w)?;
    if let Some(meta) = meta {
        write_json(&sidecar_path(path), meta)?;
    }
    Ok(())
}

/// Reads a design file and its sidecar, if present. Without a sidecar the
/// structure is reported as random with no snippet rows.
pub fn read_design(path: &Path) -> Result<(IncidenceMatrix, Option<DesignMeta>), IoError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let rows = records(file)?;
    let (hline, header) = &rows[0];
    let v = header.len();
    for (j, h) in header.iter().enumerate() {
        if h != format!("t{}", j + 1) {
            return Err(parse_err(*hline, format!("expected column t{}, found '{}'", j + 1, h)));
        }
    }
    let mut matrix = Vec::with_capacity(rows.len() - 1);
    for (line, rec) in &rows[1..] {
        if rec.len() != v {
            return Err(parse_err(*line, format!("expected {} fields, found {}", v, rec.len())));
        }
        matrix.push(
            rec.iter()
                .map(|x| match x {
                    "0" => Ok(0u8),
                    "1" => Ok(1u8),
                    _ => Err(parse_err(*line, format!("'{}' is not 0 or 1", x))),
                })
                .collect::<Result<Vec<_>, _>>()?,
        );
    }
    let side = sidecar_path(path);
    let meta: Option<DesignMeta> = if side.exists() { Some(read_json(&side)?) } else { None };
    let (structure, snippet_rows) = meta.as_ref().map_or((Structure::Random, 0), |m| (m.structure, m.snippet_rows));
    let design =
        IncidenceMatrix::from_rows(v, &matrix, structure, snippet_rows).map_err(|e| IoError::Invalid(e.to_string()))?;
    Ok((design, meta))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut file = create(path)?;
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    file.write_all(text.as_bytes()).map_err(io_err(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_model(path: &Path, model: &FpcaModel) -> Result<(), IoError> {
    write_json(path, model)
}

pub fn read_model(path: &Path) -> Result<FpcaModel, IoError> {
    let model: FpcaModel = read_json(path)?;
    let v = model.grid.len();
    if model.mean.len() != v
        || model.covariance.len() != v * v
        || model.eigenfunctions.len() != model.eigenvalues.len()
        || model.eigenfunctions.iter().any(|p| p.len() != v)
    {
        return Err(IoError::Invalid("model arrays do not match the grid".into()));
    }
    Ok(model)
}

pub const RESULTS_HEADER: [&str; 6] = ["structure", "n", "dataset", "design", "metric", "value"];
pub const SUMMARY_HEADER: [&str; 9] = ["structure", "n", "metric", "count", "min", "q1", "median", "q3", "max"];
pub const CRITERIA_HEADER: [&str; 10] =
    ["structure", "n", "dataset", "design", "seed", "are", "rrmse", "composite", "t_opt", "t_star"];
pub const FAILURES_HEADER: [&str; 6] = ["structure", "n", "dataset", "design", "stage", "message"];

/// Long-format records; the across-data-set mean has dataset `mean`.
pub fn write_results(path: &Path, records: &[Record]) -> Result<(), IoError> {
    let mut w = csv_writer(path)?;
    let f = csv_fail(path);
    w.write_record(RESULTS_HEADER).map_err(&f)?;
    for r in records {
        let dataset = r.dataset.map_or("mean".to_string(), |d| d.to_string());
        w.write_record([
            r.structure.as_str(),
            &r.n.to_string(),
            &dataset,
            &r.design.to_string(),
            &r.metric,
            &fmt_float(r.value),
        ])
        .map_err(&f)?;
    }
    finish(path, w)
}

pub fn read_results(path: &Path) -> Result<Vec<Record>, IoError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let rows = records(file)?;
    let (hline, header) = &rows[0];
    if header.iter().collect::<Vec<_>>() != RESULTS_HEADER {
        return Err(parse_err(*hline, "not a results file"));
    }
    rows[1..]
        .iter()
        .map(|(line, rec)| {
            if rec.len() != 6 {
                return Err(parse_err(*line, "expected 6 fields"));
            }
            let int = |s: &str| s.parse::<usize>().map_err(|_| parse_err(*line, format!("'{}' is not an integer", s)));
            Ok(Record {
                structure: Structure::parse(&rec[0])
                    .ok_or_else(|| parse_err(*line, format!("unknown structure '{}'", &rec[0])))?,
                n: int(&rec[1])?,
                dataset: if &rec[2] == "mean" { None } else { Some(int(&rec[2])?) },
                design: int(&rec[3])?,
                metric: rec[4].to_string(),
                value: parse_value(&rec[5], *line)?,
            })
        })
        .collect()
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<(), IoError> {
    let mut w = csv_writer(path)?;
    let f = csv_fail(path);
    w.write_record(SUMMARY_HEADER).map_err(&f)?;
    for r in rows {
        w.write_record([
            r.structure.as_str().to_string(),
            r.n.to_string(),
            r.metric.clone(),
            r.count.to_string(),
            fmt_float(r.min),
            fmt_float(r.q1),
            fmt_float(r.median),
            fmt_float(r.q3),
            fmt_float(r.max),
        ])
        .map_err(&f)?;
    }
    finish(path, w)
}

pub fn write_criteria(path: &Path, rows: &[CriterionRow]) -> Result<(), IoError> {
    let mut w = csv_writer(path)?;
    let f = csv_fail(path);
    w.write_record(CRITERIA_HEADER).map_err(&f)?;
    for r in rows {
        w.write_record([
            r.structure.as_str().to_string(),
            r.n.to_string(),
            r.dataset.to_string(),
            r.design.to_string(),
            r.seed.to_string(),
            fmt_float(r.are),
            fmt_float(r.rrmse),
            fmt_float(r.composite),
            r.t_opt.to_string(),
            r.t_star.to_string(),
        ])
        .map_err(&f)?;
    }
    finish(path, w)
}

pub fn write_failures(path: &Path, rows: &[FailureRecord]) -> Result<(), IoError> {
    let mut w = csv_writer(path)?;
    let f = csv_fail(path);
    w.write_record(FAILURES_HEADER).map_err(&f)?;
    for r in rows {
        w.write_record([
            r.structure.as_str().to_string(),
            r.n.to_string(),
            r.dataset.to_string(),
            r.design.to_string(),
            r.stage.to_string(),
            r.message.clone(),
        ])
        .map_err(&f)?;
    }
    finish(path, w)
}

/// Writes `results.csv`, `summary.csv`, `criteria.csv` and `failures.csv`
/// into `dir`.
pub fn write_experiment(dir: &Path, result: &ExperimentResult) -> Result<(), IoError> {
    write_results(&dir.join("results.csv"), &result.records)?;
    write_summary(&dir.join("summary.csv"), &result.summary)?;
    write_criteria(&dir.join("criteria.csv"), &result.criteria)?;
    write_failures(&dir.join("failures.csv"), &result.failures)
}
