//! File formats.
//!
//! * Dataset CSV: header `s1,s2,x1..xp,y1..yJ`; the `y` columns are optional
//!   for prediction locations.
//! * Prediction CSV: `s1,s2`, then `mu_y_j,lo_j,hi_j` for each outcome, then
//!   `rho_a_b` for the strict upper triangle in row-major order.
//! * Truth CSV (simulation sidecar): `s1,s2,split,h_j..,psi_a_b..,w_j..,eps_j..,rho_a_b..`
//!   with the loading matrix flattened row-major.
//! * Checkpoint and metrics: JSON.
//!
//! Numbers in CSV files are written with 17 significant digits so every value
//! parses back to the same `f64`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array2, ArrayView2};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{DncError, Result};
use crate::geosim::{SimOutput, SimParams};
use crate::metrics::MetricsReport;
use crate::model::{CoordinateScaler, DesignLayout, DncModel, Regularization, SpatialDataset};
use crate::nn::{Activation, DenseNetwork};
use crate::posterior::PredictionTable;

pub const SCHEMA_VERSION: u32 = 1;

/// Shortest form that still carries 17 significant digits.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| DncError::io(dir, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| DncError::io(path, e))
}

/// Writes `contents` to a sibling temporary file and renames it into place,
/// so a failed run never leaves a truncated file behind.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    {
        let mut w = create(&tmp)?;
        w.write_all(contents).map_err(|e| DncError::io(&tmp, e))?;
        w.flush().map_err(|e| DncError::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| DncError::io(path, e))
}

fn write_rows(path: &Path, header: &[String], rows: impl Iterator<Item = Vec<f64>>) -> Result<()> {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        let cells: Vec<String> = row.into_iter().map(format_f64).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

fn parse_error(path: &Path, line: u64, message: impl Into<String>) -> DncError {
    DncError::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Header and numeric body of a CSV file.
struct NumericCsv {
    header: Vec<String>,
    rows: Vec<Vec<f64>>,
}

fn read_numeric_csv(path: &Path) -> Result<NumericCsv> {
    let file = File::open(path).map_err(|e| DncError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| parse_error(path, 1, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.iter().all(|h| h.is_empty()) {
        return Err(parse_error(path, 1, "missing header"));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_error(path, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let mut row = Vec::with_capacity(record.len());
        for (cell, name) in record.iter().zip(&header) {
            let v: f64 = cell.parse().map_err(|_| {
                parse_error(path, line, format!("column '{name}': '{cell}' is not a number"))
            })?;
            if !v.is_finite() {
                return Err(parse_error(path, line, format!("column '{name}': non-finite value '{cell}'")));
            }
            row.push(v);
        }
        rows.push(row);
    }
    Ok(NumericCsv { header, rows })
}

/// Counts consecutive `prefix1, prefix2, ...` columns starting at `start`.
fn numbered_run(header: &[String], start: usize, prefix: &str) -> usize {
    header[start..]
        .iter()
        .enumerate()
        .take_while(|(k, h)| **h == format!("{prefix}{}", k + 1))
        .count()
}

/// Contents of a dataset CSV before designs are built.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetTable {
    pub locations: Array2<f64>,
    pub covariates: Array2<f64>,
    pub outcomes: Option<Array2<f64>>,
}

impl DatasetTable {
    pub fn n(&self) -> usize {
        self.locations.nrows()
    }

    pub fn into_dataset(self, layout: DesignLayout, n_outcomes: Option<usize>) -> Result<SpatialDataset> {
        let outcomes = self
            .outcomes
            .ok_or_else(|| DncError::Schema("dataset has no y columns".into()))?;
        if let Some(j) = n_outcomes {
            if outcomes.ncols() != j {
                return Err(DncError::Schema(format!(
                    "expected {j} outcome columns, found {}",
                    outcomes.ncols()
                )));
            }
        }
        let designs = layout.build(self.covariates.view(), outcomes.ncols())?;
        SpatialDataset::new(self.locations, designs, outcomes)
    }
}

/// Reads `s1,s2,x1..xp[,y1..yJ]`.
pub fn read_dataset_table(path: &Path) -> Result<DatasetTable> {
    let csv = read_numeric_csv(path)?;
    let h = &csv.header;
    if h.len() < 3 || h[0] != "s1" || h[1] != "s2" {
        return Err(parse_error(path, 1, format!("header must start with s1,s2,x1; got {}", h.join(","))));
    }
    let p = numbered_run(h, 2, "x");
    if p == 0 {
        return Err(parse_error(path, 1, "no covariate columns x1..xp"));
    }
    let j = numbered_run(h, 2 + p, "y");
    if 2 + p + j != h.len() {
        return Err(parse_error(
            path,
            1,
            format!("unexpected column '{}' (expected s1,s2,x1..xp,y1..yJ)", h[2 + p + j]),
        ));
    }
    if csv.rows.is_empty() {
        return Err(DncError::EmptyData);
    }
    let n = csv.rows.len();
    let flat: Vec<f64> = csv.rows.into_iter().flatten().collect();
    let all = Array2::from_shape_vec((n, h.len()), flat).expect("rows have header length");
    Ok(DatasetTable {
        locations: all.slice(s![.., 0..2]).to_owned(),
        covariates: all.slice(s![.., 2..2 + p]).to_owned(),
        outcomes: (j > 0).then(|| all.slice(s![.., 2 + p..]).to_owned()),
    })
}

pub fn load_dataset(path: &Path, layout: DesignLayout) -> Result<SpatialDataset> {
    read_dataset_table(path)?.into_dataset(layout, None)
}

pub fn save_dataset(path: &Path, data: &SpatialDataset, layout: DesignLayout) -> Result<()> {
    let covariates = layout.covariates(data.designs())?;
    if layout.build(covariates.view(), data.n_outcomes())? != *data.designs() {
        return Err(DncError::Schema(format!(
            "designs are not representable with the {layout:?} layout"
        )));
    }
    let p = covariates.ncols();
    let j = data.n_outcomes();
    let mut header = vec!["s1".to_string(), "s2".to_string()];
    header.extend((1..=p).map(|k| format!("x{k}")));
    header.extend((1..=j).map(|k| format!("y{k}")));
    let rows = (0..data.n()).map(|i| {
        let mut row = data.location(i).to_vec();
        row.extend(covariates.row(i).iter());
        row.extend(data.outcomes().row(i).iter());
        row
    });
    write_rows(path, &header, rows)
}

/// Column names of the prediction file for `j` outcomes.
pub fn prediction_header(j: usize) -> Vec<String> {
    let mut header = vec!["s1".to_string(), "s2".to_string()];
    for k in 1..=j {
        header.push(format!("mu_y_{k}"));
        header.push(format!("lo_{k}"));
        header.push(format!("hi_{k}"));
    }
    for a in 1..=j {
        for b in a + 1..=j {
            header.push(format!("rho_{a}_{b}"));
        }
    }
    header
}

pub fn save_predictions(path: &Path, locations: ArrayView2<f64>, table: &PredictionTable) -> Result<()> {
    let j = table.mu_y.ncols();
    if locations.nrows() != table.n() {
        return Err(DncError::Shape(format!(
            "{} locations for {} predictions",
            locations.nrows(),
            table.n()
        )));
    }
    let rows = (0..table.n()).map(|i| {
        let mut row = locations.row(i).to_vec();
        for k in 0..j {
            row.extend([table.mu_y[[i, k]], table.lower[[i, k]], table.upper[[i, k]]]);
        }
        row.extend(table.rho.row(i).iter());
        row
    });
    write_rows(path, &prediction_header(j), rows)
}

/// Reads a prediction file back into locations and a table.
pub fn load_predictions(path: &Path) -> Result<(Array2<f64>, PredictionTable)> {
    let csv = read_numeric_csv(path)?;
    let width = csv.header.len();
    let j = (1..=64)
        .find(|&j| prediction_header(j).len() == width)
        .ok_or_else(|| parse_error(path, 1, format!("{width} columns match no outcome count")))?;
    if csv.header != prediction_header(j) {
        return Err(parse_error(
            path,
            1,
            format!("expected header {}", prediction_header(j).join(",")),
        ));
    }
    let n = csv.rows.len();
    if n == 0 {
        return Err(DncError::EmptyData);
    }
    let mut locations = Array2::zeros((n, 2));
    let pairs = j * (j - 1) / 2;
    let mut table = PredictionTable {
        mu_y: Array2::zeros((n, j)),
        lower: Array2::zeros((n, j)),
        upper: Array2::zeros((n, j)),
        rho: Array2::zeros((n, pairs)),
    };
    for (i, row) in csv.rows.iter().enumerate() {
        locations[[i, 0]] = row[0];
        locations[[i, 1]] = row[1];
        for k in 0..j {
            table.mu_y[[i, k]] = row[2 + 3 * k];
            table.lower[[i, k]] = row[3 + 3 * k];
            table.upper[[i, k]] = row[4 + 3 * k];
        }
        for c in 0..pairs {
            table.rho[[i, c]] = row[2 + 3 * j + c];
        }
    }
    Ok((locations, table))
}

/// Scores predictions against a dataset with the same locations in the same order.
pub fn evaluate_predictions(
    locations: ArrayView2<f64>,
    table: &PredictionTable,
    truth: &DatasetTable,
) -> Result<MetricsReport> {
    let outcomes = truth
        .outcomes
        .as_ref()
        .ok_or_else(|| DncError::Schema("truth file has no y columns".into()))?;
    if truth.n() != table.n() {
        return Err(DncError::Schema(format!(
            "prediction file has {} rows, truth file has {}",
            table.n(),
            truth.n()
        )));
    }
    if outcomes.ncols() != table.mu_y.ncols() {
        return Err(DncError::Schema(format!(
            "prediction file has {} outcomes, truth file has {}",
            table.mu_y.ncols(),
            outcomes.ncols()
        )));
    }
    if let Some(i) = (0..truth.n()).find(|&i| locations.row(i) != truth.locations.row(i)) {
        return Err(DncError::Schema(format!(
            "row {} location differs between prediction and truth files",
            i + 1
        )));
    }
    MetricsReport::evaluate(
        outcomes.view(),
        table.mu_y.view(),
        table.lower.view(),
        table.upper.view(),
    )
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| DncError::Schema(format!("cannot serialize {}: {e}", path.display())))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| DncError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| parse_error(path, e.line() as u64, e.to_string()))
}

pub fn save_metrics(path: &Path, report: &MetricsReport) -> Result<()> {
    write_json(path, report)
}

pub fn load_metrics(path: &Path) -> Result<MetricsReport> {
    read_json(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerRecord {
    /// `K_l x K_{l-1}` weights, row-major.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkRecord {
    pub widths: Vec<usize>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
    pub layers: Vec<LayerRecord>,
}

impl NetworkRecord {
    pub fn from_network(net: &DenseNetwork) -> Self {
        Self {
            widths: net.widths().to_vec(),
            hidden_activation: net.hidden_activation(),
            output_activation: net.output_activation(),
            layers: net
                .weights()
                .iter()
                .zip(net.biases())
                .map(|(w, b)| LayerRecord {
                    weights: w.iter().copied().collect(),
                    biases: b.to_vec(),
                })
                .collect(),
        }
    }

    pub fn to_network(&self) -> Result<DenseNetwork> {
        if self.hidden_activation != Activation::Relu || self.output_activation != Activation::Identity {
            return Err(DncError::Schema(
                "only relu hidden layers with an identity output are supported".into(),
            ));
        }
        if self.widths.len() < 2 || self.layers.len() != self.widths.len() - 1 {
            return Err(DncError::Schema(format!(
                "{} widths need {} layers, found {}",
                self.widths.len(),
                self.widths.len().saturating_sub(1),
                self.layers.len()
            )));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let shape = (self.widths[l + 1], self.widths[l]);
            weights.push(
                Array2::from_shape_vec(shape, layer.weights.clone()).map_err(|_| {
                    DncError::Schema(format!(
                        "layer {} has {} weights, expected {}",
                        l + 1,
                        layer.weights.len(),
                        shape.0 * shape.1
                    ))
                })?,
            );
            biases.push(Array1::from(layer.biases.clone()));
        }
        DenseNetwork::from_parts(&self.widths, weights, biases)
    }
}

/// Everything needed to rebuild a fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub n_outcomes: usize,
    pub n_covariates: usize,
    pub design_layout: DesignLayout,
    pub scaler: CoordinateScaler,
    pub factor_nets: Vec<NetworkRecord>,
    pub loading_nets: Vec<NetworkRecord>,
    pub beta: Vec<f64>,
    pub sigma2: f64,
    pub keep_prob_h: f64,
    pub keep_prob_psi: f64,
    pub lambda_w: f64,
    pub lambda_b: f64,
    pub seed: u64,
}

impl Checkpoint {
    pub fn from_model(model: &DncModel, layout: DesignLayout, seed: u64) -> Self {
        let reg = model.regularization();
        Self {
            schema_version: SCHEMA_VERSION,
            n_outcomes: model.n_outcomes(),
            n_covariates: model.n_covariates(),
            design_layout: layout,
            scaler: model.scaler(),
            factor_nets: model.factor_nets().iter().map(NetworkRecord::from_network).collect(),
            loading_nets: model.loading_nets().iter().map(NetworkRecord::from_network).collect(),
            beta: model.beta().to_vec(),
            sigma2: model.sigma2(),
            keep_prob_h: reg.keep_prob_h,
            keep_prob_psi: reg.keep_prob_psi,
            lambda_w: reg.lambda_w,
            lambda_b: reg.lambda_b,
            seed,
        }
    }

    pub fn to_model(&self) -> Result<DncModel> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(DncError::Schema(format!(
                "checkpoint schema version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let nets = |records: &[NetworkRecord]| {
            records.iter().map(NetworkRecord::to_network).collect::<Result<Vec<_>>>()
        };
        let reg = Regularization {
            keep_prob_h: self.keep_prob_h,
            keep_prob_psi: self.keep_prob_psi,
            lambda_w: self.lambda_w,
            lambda_b: self.lambda_b,
        };
        let mut model = DncModel::from_parts(
            nets(&self.factor_nets)?,
            nets(&self.loading_nets)?,
            Array1::from(self.beta.clone()),
            self.sigma2,
            reg,
        )?;
        model.set_scaler(self.scaler)?;
        if model.n_outcomes() != self.n_outcomes || model.n_covariates() != self.n_covariates {
            return Err(DncError::Schema(format!(
                "checkpoint declares J = {}, p = {} but stores J = {}, p = {}",
                self.n_outcomes,
                self.n_covariates,
                model.n_outcomes(),
                model.n_covariates()
            )));
        }
        Ok(model)
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    write_json(path, checkpoint)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_json(path)
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_json(path, value)
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    read_json(path)
}

/// Header of the simulation truth sidecar.
pub fn truth_header(j: usize) -> Vec<String> {
    let mut header = vec!["s1".to_string(), "s2".to_string(), "split".to_string()];
    header.extend((1..=j).map(|k| format!("h_{k}")));
    for a in 1..=j {
        header.extend((1..=j).map(|b| format!("psi_{a}_{b}")));
    }
    header.extend((1..=j).map(|k| format!("w_{k}")));
    header.extend((1..=j).map(|k| format!("eps_{k}")));
    for a in 1..=j {
        for b in a + 1..=j {
            header.push(format!("rho_{a}_{b}"));
        }
    }
    header
}

/// Split codes in the truth sidecar.
pub const SPLIT_TRAIN: f64 = 0.0;
pub const SPLIT_VAL: f64 = 1.0;
pub const SPLIT_TEST: f64 = 2.0;

pub fn save_truth(path: &Path, sim: &SimOutput) -> Result<()> {
    let t = &sim.truth;
    let j = t.factors.ncols();
    let (a, b) = (sim.params.split.train, sim.params.split.train + sim.params.split.val);
    let rows = (0..t.locations.nrows()).map(|i| {
        let split = if i < a {
            SPLIT_TRAIN
        } else if i < b {
            SPLIT_VAL
        } else {
            SPLIT_TEST
        };
        let mut row = vec![t.locations[[i, 0]], t.locations[[i, 1]], split];
        for m in [&t.factors, &t.loadings, &t.effect, &t.noise, &t.rho] {
            row.extend(m.row(i).iter());
        }
        row
    });
    write_rows(path, &truth_header(j), rows)
}

/// Locations and true correlations of the test rows of a truth sidecar.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthTable {
    pub header: Vec<String>,
    pub rows: Array2<f64>,
}

impl TruthTable {
    pub fn column(&self, name: &str) -> Option<ndarray::ArrayView1<'_, f64>> {
        self.header.iter().position(|h| h == name).map(|c| self.rows.column(c))
    }
}

pub fn load_truth(path: &Path) -> Result<TruthTable> {
    let csv = read_numeric_csv(path)?;
    let w = csv.header.len();
    let j = (1..=64)
        .find(|&j| truth_header(j).len() == w)
        .ok_or_else(|| parse_error(path, 1, format!("{w} columns match no outcome count")))?;
    if csv.header != truth_header(j) {
        return Err(parse_error(path, 1, format!("expected header {}", truth_header(j).join(","))));
    }
    let n = csv.rows.len();
    let rows = Array2::from_shape_vec((n, w), csv.rows.into_iter().flatten().collect())
        .expect("rows have header length");
    Ok(TruthTable {
        header: csv.header,
        rows,
    })
}

/// Description of a simulated data directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimManifest {
    pub schema_version: u32,
    pub params: SimParams,
    pub files: SimFiles,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimFiles {
    pub train: String,
    pub val: String,
    pub test: String,
    pub truth: String,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `train.csv`, `val.csv`, `test.csv`, `truth.csv` and `manifest.json` into `dir`.
pub fn save_simulation(dir: &Path, sim: &SimOutput) -> Result<SimManifest> {
    let files = SimFiles {
        train: "train.csv".into(),
        val: "val.csv".into(),
        test: "test.csv".into(),
        truth: "truth.csv".into(),
    };
    let layout = sim.params.design_layout;
    save_dataset(&dir.join(&files.train), &sim.train, layout)?;
    save_dataset(&dir.join(&files.val), &sim.val, layout)?;
    save_dataset(&dir.join(&files.test), &sim.test, layout)?;
    save_truth(&dir.join(&files.truth), sim)?;
    let manifest = SimManifest {
        schema_version: SCHEMA_VERSION,
        params: sim.params.clone(),
        files,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Long-format rows `s1,s2,variable,estimate,truth` for plotting; `truth` is
/// empty where no ground truth is available.
pub fn tidy_export(
    path: &Path,
    locations: ArrayView2<f64>,
    table: &PredictionTable,
    observed: Option<&DatasetTable>,
    truth: Option<&TruthTable>,
) -> Result<()> {
    let j = table.mu_y.ncols();
    let n = table.n();
    if let Some(obs) = observed {
        if obs.n() != n {
            return Err(DncError::Schema(format!(
                "prediction file has {n} rows, observed file has {}",
                obs.n()
            )));
        }
    }
    // truth rows keyed by exact location
    let truth_index: std::collections::HashMap<(u64, u64), usize> = truth
        .map(|t| {
            (0..t.rows.nrows())
                .map(|i| ((t.rows[[i, 0]].to_bits(), t.rows[[i, 1]].to_bits()), i))
                .collect()
        })
        .unwrap_or_default();
    let fmt_opt = |v: Option<f64>| v.map(format_f64).unwrap_or_default();
    let mut out = String::from("s1,s2,variable,estimate,truth\n");
    for i in 0..n {
        let key = (locations[[i, 0]].to_bits(), locations[[i, 1]].to_bits());
        let trow = truth.and_then(|t| truth_index.get(&key).map(|&r| (t, r)));
        let loc = format!("{},{}", format_f64(locations[[i, 0]]), format_f64(locations[[i, 1]]));
        for k in 0..j {
            let y = observed.and_then(|o| o.outcomes.as_ref()).map(|y| y[[i, k]]);
            out += &format!("{loc},y_{},{},{}\n", k + 1, format_f64(table.mu_y[[i, k]]), fmt_opt(y));
            out += &format!("{loc},lo_{},{},\n", k + 1, format_f64(table.lower[[i, k]]));
            out += &format!("{loc},hi_{},{},\n", k + 1, format_f64(table.upper[[i, k]]));
        }
        let mut c = 0;
        for a in 1..=j {
            for b in a + 1..=j {
                let name = format!("rho_{a}_{b}");
                let t = trow.and_then(|(t, r)| t.column(&name).map(|col| col[r]));
                out += &format!("{loc},{name},{},{}\n", format_f64(table.rho[[i, c]]), fmt_opt(t));
                c += 1;
            }
        }
    }
    write_atomic(path, out.as_bytes())
}
