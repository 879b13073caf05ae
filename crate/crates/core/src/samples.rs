//! Labeled posterior sample matrices with provenance metadata.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::stats::mean_std;

/// Provenance of a [`SampleSet`]: how it was produced and under which
/// configuration. The MCMC-specific fields are omitted from JSON when absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub method: String,
    pub seed: u64,
    pub config_hash: String,
    /// Noise scale the run assumed, if any.
    pub b: Option<f64>,
    pub count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acceptance_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub walkers: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stretch_a: Option<f64>,
}

impl SampleMeta {
    pub fn new(method: &str, seed: u64, config_hash: &str, b: Option<f64>, count: usize) -> Self {
        Self {
            method: method.to_string(),
            seed,
            config_hash: config_hash.to_string(),
            b,
            count,
            acceptance_rate: None,
            walkers: None,
            stretch_a: None,
        }
    }
}

/// Matrix of posterior draws: one row per draw, one named column per
/// parameter (plus an optional trailing `b` column for augmented chains).
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    names: Vec<String>,
    data: Matrix,
    pub meta: SampleMeta,
}

impl SampleSet {
    pub fn new(names: Vec<String>, data: Matrix, meta: SampleMeta) -> Result<Self> {
        if names.len() != data.cols() {
            return Err(Error::Shape(format!(
                "{} names for {} columns",
                names.len(),
                data.cols()
            )));
        }
        if meta.count != data.rows() {
            return Err(Error::Shape("meta.count does not match rows".into()));
        }
        Ok(Self { names, data, meta })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.data.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.data.row(i)
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.data.column(j)
    }

    pub fn data(&self) -> &Matrix {
        &self.data
    }

    /// Per-column sample mean and standard deviation.
    pub fn column_moments(&self) -> (Vec<f64>, Vec<f64>) {
        let mut means = Vec::with_capacity(self.dim());
        let mut stds = Vec::with_capacity(self.dim());
        for j in 0..self.dim() {
            let (m, s) = mean_std(&self.column(j));
            means.push(m);
            stds.push(s);
        }
        (means, stds)
    }

    /// Writes the draws as RFC-4180 CSV with the parameter names as header.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(&self.names)?;
        for i in 0..self.data.rows() {
            w.write_record(self.data.row(i).iter().map(|v| format!("{v:?}")))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes the provenance sidecar next to the CSV.
    pub fn write_sidecar(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.meta)?)?;
        Ok(())
    }

    /// Loads a sample set from a CSV and its JSON sidecar, verifying the
    /// config hash when one is expected.
    pub fn load(csv_path: &Path, sidecar_path: &Path, expected_hash: Option<&str>) -> Result<Self> {
        let meta: SampleMeta = serde_json::from_str(&std::fs::read_to_string(sidecar_path)?)?;
        if let Some(expected) = expected_hash {
            if meta.config_hash != expected {
                return Err(Error::HashMismatch {
                    expected: expected.to_string(),
                    found: meta.config_hash,
                });
            }
        }
        let mut r = csv::Reader::from_path(csv_path)?;
        let names: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        let mut data = Matrix::zeros(0, names.len());
        for record in r.records() {
            let record = record?;
            let row: Vec<f64> = record
                .iter()
                .map(|s| s.parse::<f64>().map_err(|e| Error::Config(format!("bad float '{s}': {e}"))))
                .collect::<Result<_>>()?;
            data.push_row(&row)?;
        }
        Self::new(names, data, meta)
    }
}

/// Default parameter names `x1..xd`.
pub fn default_names(dim: usize) -> Vec<String> {
    (1..=dim).map(|i| format!("x{i}")).collect()
}
