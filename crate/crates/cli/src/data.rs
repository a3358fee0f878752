//! Site tables on disk: CSV with columns `x1..xd`, `a`, `y`.

use std::path::Path;

use ecoate::data::{SiteDataset, SiteId};

use crate::CliError;

/// Load one site's records. The header must consist of `x1..xd` (contiguous
/// from 1), `a` (0/1 treatment), and `y`; anything else is rejected by name.
pub fn read_site_csv(path: &Path, site: SiteId) -> Result<SiteDataset, CliError> {
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| CliError::Usage(format!("cannot open {}: {e}", path.display())))?;
    let headers = rdr
        .headers()
        .map_err(|e| CliError::Run(format!("{}: {e}", path.display())))?
        .clone();

    let mut x_cols: Vec<(usize, usize)> = Vec::new(); // (covariate index, column)
    let mut a_col = None;
    let mut y_col = None;
    for (col, name) in headers.iter().enumerate() {
        let name = name.trim();
        if name == "a" {
            a_col = Some(col);
        } else if name == "y" {
            y_col = Some(col);
        } else if let Some(idx) = name
            .strip_prefix('x')
            .and_then(|t| t.parse::<usize>().ok())
            .filter(|&i| i >= 1)
        {
            x_cols.push((idx, col));
        } else {
            return Err(CliError::Usage(format!(
                "{}: unexpected column `{name}` (want x1..xd, a, y)",
                path.display()
            )));
        }
    }
    let (a_col, y_col) = match (a_col, y_col) {
        (Some(a), Some(y)) => (a, y),
        _ => {
            return Err(CliError::Usage(format!(
                "{}: missing required column `a` or `y`",
                path.display()
            )))
        }
    };
    x_cols.sort_by_key(|&(idx, _)| idx);
    let dim = x_cols.len();
    if dim == 0 || x_cols.iter().enumerate().any(|(i, &(idx, _))| idx != i + 1) {
        return Err(CliError::Usage(format!(
            "{}: covariate columns must be x1..x{} with no gaps",
            path.display(),
            dim.max(1)
        )));
    }

    let mut data = SiteDataset::new(site, dim);
    let mut x = vec![0.0; dim];
    for (line, record) in rdr.records().enumerate() {
        let record =
            record.map_err(|e| CliError::Run(format!("{}: {e}", path.display())))?;
        let field = |col: usize| -> Result<f64, CliError> {
            record
                .get(col)
                .ok_or(())
                .and_then(|s| s.trim().parse::<f64>().map_err(|_| ()))
                .map_err(|()| {
                    CliError::Run(format!(
                        "{} record {}: bad numeric field in column {}",
                        path.display(),
                        line + 1,
                        headers.get(col).unwrap_or("?")
                    ))
                })
        };
        for (slot, &(_, col)) in x_cols.iter().enumerate() {
            x[slot] = field(col)?;
        }
        let a = field(a_col)?;
        let y = field(y_col)?;
        if a != 0.0 && a != 1.0 {
            return Err(CliError::Run(format!(
                "{} record {}: treatment must be 0 or 1, got {a}",
                path.display(),
                line + 1
            )));
        }
        if !x.iter().all(|v| v.is_finite()) || !y.is_finite() {
            return Err(CliError::Run(format!(
                "{} record {}: non-finite value",
                path.display(),
                line + 1
            )));
        }
        data.push(&x, a, y);
    }
    if data.n() == 0 {
        return Err(CliError::Run(format!("{}: no records", path.display())));
    }
    Ok(data)
}

/// Write a site table in the same layout `read_site_csv` expects.
pub fn write_site_csv(path: &Path, data: &SiteDataset) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| CliError::Run(format!("cannot write {}: {e}", path.display())))?;
    let mut header: Vec<String> = (1..=data.dim()).map(|i| format!("x{i}")).collect();
    header.push("a".into());
    header.push("y".into());
    w.write_record(&header)
        .map_err(|e| CliError::Run(format!("{}: {e}", path.display())))?;
    for i in 0..data.n() {
        let mut row: Vec<String> =
            data.xrow(i).iter().map(|v| format!("{v}")).collect();
        row.push(format!("{}", data.a(i)));
        row.push(format!("{}", data.y(i)));
        w.write_record(&row)
            .map_err(|e| CliError::Run(format!("{}: {e}", path.display())))?;
    }
    w.flush()
        .map_err(|e| CliError::Run(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn site_table_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("site.csv");
        let mut data = SiteDataset::new(3, 2);
        data.push(&[1.25, -0.5], 1.0, 2.75);
        data.push(&[1.5, 0.125], 0.0, 0.0625);
        write_site_csv(&path, &data).unwrap();
        let back = read_site_csv(&path, 3).unwrap();
        assert_eq!(back.n(), 2);
        assert_eq!(back.dim(), 2);
        assert_eq!(back.xrow(0), &[1.25, -0.5]);
        assert_eq!(back.a(1), 0.0);
        assert_eq!(back.y(1), 0.0625);
        assert_eq!(back.site, 3);
    }

    #[test]
    fn bad_headers_are_rejected_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "x1,treat,y\n1.0,1,2.0\n").unwrap();
        match read_site_csv(&path, 0).unwrap_err() {
            CliError::Usage(msg) => assert!(msg.contains("treat"), "{msg}"),
            other => panic!("wrong error class: {other:?}"),
        }
        std::fs::write(&path, "x1,x3,a,y\n1.0,2.0,1,2.0\n").unwrap();
        assert!(read_site_csv(&path, 0).is_err());
    }

    #[test]
    fn non_binary_treatment_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "x1,a,y\n1.0,0.5,2.0\n").unwrap();
        assert!(matches!(
            read_site_csv(&path, 0).unwrap_err(),
            CliError::Run(_)
        ));
    }
}
