//! Labelled sample sets and their CSV form.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::model::check_finite;

/// Provenance of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    InDistribution,
    Candidate,
}

impl Label {
    pub fn as_u8(self) -> u8 {
        match self {
            Label::InDistribution => 0,
            Label::Candidate => 1,
        }
    }

    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Label::InDistribution),
            1 => Ok(Label::Candidate),
            _ => Err(Error::Parse(format!("label must be 0 or 1, got {v}"))),
        }
    }
}

/// Samples (one per row) with a label per row and the name of their source.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    samples: Array2<f64>,
    labels: Vec<Label>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, samples: Array2<f64>, labels: Vec<Label>) -> Result<Self> {
        if samples.nrows() == 0 {
            return Err(Error::Empty("dataset has no samples".into()));
        }
        if samples.ncols() == 0 {
            return Err(Error::Empty("dataset has zero dimensions".into()));
        }
        if labels.len() != samples.nrows() {
            return Err(Error::DimensionMismatch { expected: samples.nrows(), got: labels.len() });
        }
        check_finite(samples.view(), "dataset")?;
        Ok(Self { name: name.into(), samples, labels })
    }

    /// All rows carry the same label.
    pub fn uniform(name: impl Into<String>, samples: Array2<f64>, label: Label) -> Result<Self> {
        let n = samples.nrows();
        Self::new(name, samples, vec![label; n])
    }

    pub fn samples(&self) -> ArrayView2<'_, f64> {
        self.samples.view()
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.samples.ncols()
    }

    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.len()) {
            return Err(Error::IndexOutOfRange { index: bad, len: self.len() });
        }
        let samples = self.samples.select(Axis(0), rows);
        let labels = rows.iter().map(|&r| self.labels[r]).collect();
        Self::new(self.name.clone(), samples, labels)
    }

    /// Splits into the first `n` rows and the rest.
    pub fn split_at(&self, n: usize) -> Result<(Self, Self)> {
        let head: Vec<usize> = (0..n.min(self.len())).collect();
        let tail: Vec<usize> = (n.min(self.len())..self.len()).collect();
        Ok((self.select(&head)?, self.select(&tail)?))
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn concat(&self, other: &Self, name: impl Into<String>) -> Result<Self> {
        if other.dim() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: other.dim() });
        }
        let samples = ndarray::concatenate(Axis(0), &[self.samples(), other.samples()]).expect("dims checked");
        let labels = self.labels.iter().chain(&other.labels).copied().collect();
        Self::new(name, samples, labels)
    }

    pub fn with_label(mut self, label: Label) -> Self {
        self.labels.fill(label);
        self
    }

    /// Writes `# scenario=<name> dim=<d>`, a header `x0,..,label`, then one
    /// row per sample with 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# scenario={} dim={}", self.name, self.dim())?;
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (0..self.dim()).map(|i| format!("x{i}")).collect();
        header.push("label".into());
        w.write_record(&header)?;
        for (row, label) in self.samples.rows().into_iter().zip(&self.labels) {
            let mut rec: Vec<String> = row.iter().map(|v| fmt_f64(*v)).collect();
            rec.push(label.as_u8().to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut reader = BufReader::new(input);
        let mut first = String::new();
        reader.read_line(&mut first)?;
        let name = first
            .trim()
            .strip_prefix('#')
            .and_then(|rest| rest.split_whitespace().find_map(|kv| kv.strip_prefix("scenario=")))
            .ok_or_else(|| Error::Parse("dataset csv must start with '# scenario=<name> dim=<d>'".into()))?
            .to_string();
        let mut r = csv::Reader::from_reader(reader);
        let headers = r.headers()?.clone();
        let dim = headers.len().checked_sub(1).filter(|&d| d > 0).ok_or_else(|| {
            Error::Parse("dataset csv needs at least one coordinate column and a label column".into())
        })?;
        let mut values = Vec::new();
        let mut labels = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            if rec.len() != dim + 1 {
                return Err(Error::Parse(format!("expected {} fields, got {}", dim + 1, rec.len())));
            }
            for field in rec.iter().take(dim) {
                values.push(parse_f64(field)?);
            }
            let label: u8 = rec[dim].trim().parse().map_err(|_| Error::Parse(format!("bad label {:?}", &rec[dim])))?;
            labels.push(Label::from_u8(label)?);
        }
        let samples = Array2::from_shape_vec((labels.len(), dim), values).expect("row length checked");
        Self::new(name, samples, labels)
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

/// 17 significant digits, which round-trips every `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn parse_f64(s: &str) -> Result<f64> {
    s.trim().parse().map_err(|_| Error::Parse(format!("not a number: {s:?}")))
}
