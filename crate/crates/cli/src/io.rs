//! CSV formats: datasets and query points in, bounds and metrics out.
//!
//! Floats are serialized with `{:?}`, the shortest decimal form that parses
//! back to the same bits, so generate → parse → re-serialize is byte-stable.

use std::fs;
use std::path::Path;

use cdte::Dataset;

use crate::Failure;

pub fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path)
        .map_err(|e| Failure::usage(format!("cannot read {}: {e}", path.display())))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::run(format!("cannot write {}: {e}", path.display())))
}

pub fn dataset_header(dim: usize) -> String {
    let mut cols: Vec<String> = (1..=dim).map(|j| format!("x{j}")).collect();
    cols.push("a".into());
    cols.push("y".into());
    cols.join(",")
}

pub fn write_dataset_csv(path: &Path, data: &Dataset) -> Result<(), Failure> {
    let mut out = dataset_header(data.dim());
    out.push('\n');
    for i in 0..data.n() {
        for v in data.x_row(i) {
            out.push_str(&format!("{v:?},"));
        }
        out.push_str(&format!("{},{:?}\n", data.a()[i], data.y()[i]));
    }
    write_text(path, &out)
}

/// Covariate dimension encoded by a header of the form `x1,...,xd,a,y`.
fn parse_dataset_header(header: &str, path: &Path) -> Result<usize, Failure> {
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() >= 3 && cols[cols.len() - 2] == "a" && cols[cols.len() - 1] == "y" {
        let d = cols.len() - 2;
        if (0..d).all(|j| cols[j] == format!("x{}", j + 1)) {
            return Ok(d);
        }
    }
    Err(Failure::usage(format!(
        "{}: header must be x1,...,xd,a,y, found '{header}'",
        path.display()
    )))
}

fn parse_float(s: &str, line: usize, what: &str) -> Result<f64, Failure> {
    let t = s.trim();
    let v: f64 = t
        .parse()
        .map_err(|_| Failure::usage(format!("line {line}: cannot parse {what} '{t}'")))?;
    if !v.is_finite() {
        return Err(Failure::usage(format!(
            "line {line}: non-finite {what} '{t}'"
        )));
    }
    Ok(v)
}

pub fn read_dataset_csv(path: &Path) -> Result<Dataset, Failure> {
    let text = read_text(path)?;
    let mut lines = text.lines().enumerate();
    let Some((_, header)) = lines.next() else {
        return Err(Failure::usage(format!("{}: empty file", path.display())));
    };
    let dim = parse_dataset_header(header, path)?;
    let mut x = Vec::new();
    let mut a = Vec::new();
    let mut y = Vec::new();
    for (i, raw) in lines {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split(',').collect();
        if fields.len() != dim + 2 {
            return Err(Failure::usage(format!(
                "line {line}: expected {} fields, found {}",
                dim + 2,
                fields.len()
            )));
        }
        for (j, f) in fields[..dim].iter().enumerate() {
            x.push(parse_float(f, line, &format!("x{}", j + 1))?);
        }
        a.push(match fields[dim].trim() {
            "0" => 0u8,
            "1" => 1u8,
            other => {
                return Err(Failure::usage(format!(
                    "line {line}: treatment must be 0 or 1, found '{other}'"
                )))
            }
        });
        y.push(parse_float(fields[dim + 1], line, "outcome")?);
    }
    Dataset::new(x, a, y, dim).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

/// Covariate rows from a query CSV. The header may be either the full
/// dataset form `x1,...,xd,a,y` (treatment and outcome columns are then
/// ignored) or covariates only, `x1,...,xd`; `d` must match `dim`.
pub fn read_query_csv(path: &Path, dim: usize) -> Result<Vec<Vec<f64>>, Failure> {
    let text = read_text(path)?;
    let mut lines = text.lines().enumerate();
    let Some((_, header)) = lines.next() else {
        return Err(Failure::usage(format!("{}: empty file", path.display())));
    };
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let with_tail = cols.len() >= 3 && cols[cols.len() - 2] == "a" && cols[cols.len() - 1] == "y";
    let qdim = if with_tail {
        cols.len() - 2
    } else {
        cols.len()
    };
    if qdim == 0 || !(0..qdim).all(|j| cols[j] == format!("x{}", j + 1)) {
        return Err(Failure::usage(format!(
            "{}: header must be x1,...,xd or x1,...,xd,a,y, found '{header}'",
            path.display()
        )));
    }
    if qdim != dim {
        return Err(Failure::usage(format!(
            "{}: query covariate dimension {qdim} does not match training dimension {dim}",
            path.display()
        )));
    }
    let n_fields = cols.len();
    let mut rows = Vec::new();
    for (i, raw) in lines {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split(',').collect();
        if fields.len() != n_fields {
            return Err(Failure::usage(format!(
                "line {line}: expected {n_fields} fields, found {}",
                fields.len()
            )));
        }
        let mut row = Vec::with_capacity(dim);
        for (j, f) in fields[..dim].iter().enumerate() {
            row.push(parse_float(f, line, &format!("x{}", j + 1))?);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Failure::usage(format!("{}: no query rows", path.display())));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str, text: &str) -> std::path::PathBuf {
        let p = std::env::temp_dir().join(format!("cdte-io-{}-{name}", std::process::id()));
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn dataset_round_trip_is_byte_identical() {
        let data = Dataset::new(
            vec![0.1, -2.5, 1.0 / 3.0, 4.0e-17, 5.5, 6.0],
            vec![0, 1, 1],
            vec![-1.25, 0.5000000001, 2.0],
            2,
        )
        .unwrap();
        let p = tmp("round.csv", "");
        write_dataset_csv(&p, &data).unwrap();
        let first = fs::read_to_string(&p).unwrap();
        let parsed = read_dataset_csv(&p).unwrap();
        write_dataset_csv(&p, &parsed).unwrap();
        let second = fs::read_to_string(&p).unwrap();
        assert_eq!(first, second);
        assert_eq!(parsed, data);
        fs::remove_file(&p).ok();
    }

    #[test]
    fn bad_rows_report_line_numbers() {
        let p = tmp("bad.csv", "x1,a,y\n1.0,0,2.0\n1.0,2,3.0\n");
        let err = read_dataset_csv(&p).unwrap_err();
        let Failure::Usage(msg) = err else {
            panic!("expected usage failure")
        };
        assert!(msg.contains("line 3"), "{msg}");
        assert!(msg.contains("treatment"), "{msg}");
        fs::remove_file(&p).ok();
    }

    #[test]
    fn header_is_validated() {
        let p = tmp("head.csv", "x1,x3,a,y\n1.0,2.0,0,3.0\n");
        assert!(matches!(read_dataset_csv(&p), Err(Failure::Usage(_))));
        fs::remove_file(&p).ok();
    }

    #[test]
    fn query_accepts_both_header_forms() {
        let p = tmp("q1.csv", "x1,x2\n0.5,1.5\n-1.0,0.0\n");
        assert_eq!(
            read_query_csv(&p, 2).unwrap(),
            vec![vec![0.5, 1.5], vec![-1.0, 0.0]]
        );
        fs::remove_file(&p).ok();
        let p = tmp("q2.csv", "x1,x2,a,y\n0.5,1.5,1,9.0\n");
        assert_eq!(read_query_csv(&p, 2).unwrap(), vec![vec![0.5, 1.5]]);
        assert!(matches!(read_query_csv(&p, 3), Err(Failure::Usage(_))));
        fs::remove_file(&p).ok();
    }
}
