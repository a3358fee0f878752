//! Per-site datasets.
//!
//! Every site holds an i.i.d. sample of observations `z = (x, a, y)`: a
//! covariate vector `x` of fixed dimension, a binary treatment `a`, and a
//! scalar outcome `y`. Site `0` is always the target site; positive ids are
//! source sites.
//!
//! On disk a dataset is a delimited table with header `y,a,x1,...,xd`.
//! Treatment must be exactly `0` or `1`, all fields must be present and
//! finite; anything else is rejected up front rather than surfacing later as
//! a numerical artifact.

use std::path::Path;

use crate::error::{Error, Result};

/// Site identifier. `0` is the target site by convention.
pub type SiteId = u32;

/// The id reserved for the target site.
pub const TARGET_SITE: SiteId = 0;

/// One site's sample, stored column-major-ish: covariates row-major in a flat
/// buffer, treatment and outcome as parallel vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteDataset {
    pub site: SiteId,
    dim: usize,
    x: Vec<f64>,
    a: Vec<f64>,
    y: Vec<f64>,
}

/// A borrowed view of a single observation.
#[derive(Debug, Clone, Copy)]
pub struct Obs<'a> {
    pub x: &'a [f64],
    pub a: f64,
    pub y: f64,
}

impl SiteDataset {
    pub fn new(site: SiteId, dim: usize) -> Self {
        SiteDataset {
            site,
            dim,
            x: Vec::new(),
            a: Vec::new(),
            y: Vec::new(),
        }
    }

    /// Build a dataset from parallel columns. `x` is row-major `n * dim`.
    pub fn from_columns(site: SiteId, dim: usize, x: Vec<f64>, a: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidData("covariate dimension must be positive".into()));
        }
        let n = y.len();
        if a.len() != n || x.len() != n * dim {
            return Err(Error::DimensionMismatch {
                context: "SiteDataset::from_columns".into(),
                expected: n * dim,
                actual: x.len(),
            });
        }
        let ds = SiteDataset { site, dim, x, a, y };
        ds.validate()?;
        Ok(ds)
    }

    pub fn push(&mut self, x: &[f64], a: f64, y: f64) {
        debug_assert_eq!(x.len(), self.dim);
        self.x.extend_from_slice(x);
        self.a.push(a);
        self.y.push(y);
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn xrow(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    pub fn a(&self, i: usize) -> f64 {
        self.a[i]
    }

    pub fn y(&self, i: usize) -> f64 {
        self.y[i]
    }

    pub fn obs(&self, i: usize) -> Obs<'_> {
        Obs {
            x: self.xrow(i),
            a: self.a[i],
            y: self.y[i],
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = Obs<'_>> + '_ {
        (0..self.n()).map(move |i| self.obs(i))
    }

    pub fn treatment(&self) -> &[f64] {
        &self.a
    }

    pub fn outcome(&self) -> &[f64] {
        &self.y
    }

    /// Mean and (population-denominator) standard deviation of each covariate.
    pub fn covariate_moments(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.n().max(1) as f64;
        let mut mean = vec![0.0; self.dim];
        for i in 0..self.n() {
            for (m, v) in mean.iter_mut().zip(self.xrow(i)) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= n;
        }
        let mut var = vec![0.0; self.dim];
        for i in 0..self.n() {
            for ((v, m), xv) in var.iter_mut().zip(&mean).zip(self.xrow(i)) {
                let d = xv - m;
                *v += d * d;
            }
        }
        let sd = var.iter().map(|v| (v / n).sqrt()).collect();
        (mean, sd)
    }

    fn validate(&self) -> Result<()> {
        for (i, (&a, &y)) in self.a.iter().zip(&self.y).enumerate() {
            if a != 0.0 && a != 1.0 {
                return Err(Error::InvalidData(format!(
                    "row {i}: treatment must be 0 or 1, got {a}"
                )));
            }
            if !y.is_finite() {
                return Err(Error::InvalidData(format!("row {i}: outcome is not finite")));
            }
        }
        if let Some(i) = self.x.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidData(format!(
                "row {}: covariate is not finite",
                i / self.dim
            )));
        }
        Ok(())
    }

    /// Number of observations in each arm, `(n_control, n_treated)`.
    pub fn arm_counts(&self) -> (usize, usize) {
        let treated = self.a.iter().filter(|&&a| a == 1.0).count();
        (self.n() - treated, treated)
    }

    /// Read a `y,a,x1..xd` delimited table.
    pub fn read_csv(path: &Path, site: SiteId) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
        let headers = rdr.headers()?.clone();
        let cols: Vec<&str> = headers.iter().collect();
        if cols.len() < 3 || cols[0] != "y" || cols[1] != "a" {
            return Err(Error::InvalidData(format!(
                "{}: header must be y,a,x1,...,xd (got {:?})",
                path.display(),
                cols
            )));
        }
        let dim = cols.len() - 2;
        for (j, c) in cols[2..].iter().enumerate() {
            let want = format!("x{}", j + 1);
            if *c != want {
                return Err(Error::InvalidData(format!(
                    "{}: covariate column {} named `{}`, expected `{}`",
                    path.display(),
                    j + 3,
                    c,
                    want
                )));
            }
        }
        let mut ds = SiteDataset::new(site, dim);
        let mut xbuf = vec![0.0; dim];
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.len() != dim + 2 {
                return Err(Error::InvalidData(format!(
                    "{}: row {} has {} fields, expected {}",
                    path.display(),
                    i + 1,
                    rec.len(),
                    dim + 2
                )));
            }
            let parse = |field: &str, what: &str| -> Result<f64> {
                if field.is_empty() {
                    return Err(Error::InvalidData(format!(
                        "{}: row {} has a missing {what} value",
                        path.display(),
                        i + 1
                    )));
                }
                field.parse::<f64>().map_err(|_| {
                    Error::InvalidData(format!(
                        "{}: row {} has unparseable {what} value `{field}`",
                        path.display(),
                        i + 1
                    ))
                })
            };
            let y = parse(&rec[0], "outcome")?;
            let a = parse(&rec[1], "treatment")?;
            for j in 0..dim {
                xbuf[j] = parse(&rec[j + 2], "covariate")?;
            }
            ds.push(&xbuf, a, y);
        }
        ds.validate()?;
        if ds.n() == 0 {
            return Err(Error::InvalidData(format!("{}: no data rows", path.display())));
        }
        Ok(ds)
    }

    /// Write the dataset as a `y,a,x1..xd` table.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["y".to_string(), "a".to_string()];
        for j in 1..=self.dim {
            header.push(format!("x{j}"));
        }
        w.write_record(&header)?;
        for i in 0..self.n() {
            let mut rec = vec![format!("{}", self.y[i]), format!("{}", self.a[i])];
            for v in self.xrow(i) {
                rec.push(format!("{v}"));
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_csv() {
        let mut ds = SiteDataset::new(3, 2);
        ds.push(&[1.25, -0.5], 1.0, 2.75);
        ds.push(&[0.125, 3.0], 0.0, -1.5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        ds.write_csv(&path).unwrap();
        let back = SiteDataset::read_csv(&path, 3).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn rejects_bad_treatment() {
        let err = SiteDataset::from_columns(0, 1, vec![1.0], vec![2.0], vec![0.5]).unwrap_err();
        assert!(matches!(err, Error::InvalidData(_)));
    }

    #[test]
    fn rejects_missing_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        std::fs::write(&path, "y,a,x1\n1.0,1,\n").unwrap();
        let err = SiteDataset::read_csv(&path, 0).unwrap_err();
        assert!(err.to_string().contains("missing"));
    }

    #[test]
    fn rejects_wrong_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.csv");
        std::fs::write(&path, "y,a,z1\n1.0,1,2.0\n").unwrap();
        assert!(SiteDataset::read_csv(&path, 0).is_err());
    }

    #[test]
    fn covariate_moments_match_direct() {
        let mut ds = SiteDataset::new(0, 1);
        for v in [1.0, 2.0, 3.0, 4.0] {
            ds.push(&[v], 0.0, 0.0);
        }
        let (m, s) = ds.covariate_moments();
        assert!((m[0] - 2.5).abs() < 1e-12);
        assert!((s[0] - (1.25f64).sqrt()).abs() < 1e-12);
    }
}
