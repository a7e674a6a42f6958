//! Directory format: `timeseries.csv`, `image.csv`, `text.csv` with header
//! `timestamp,f0,..,f{d-1}` (absent rows omitted) and `labels.csv` with
//! header `timestamp,return,movement`. `labels.csv` defines the row
//! timeline; its label cells are empty for the first `window - 1` rows, which
//! do not end a full window.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{MsmfError, Result};
use crate::numcore::Tensor;

use super::{Modality, ModalityStream, MultiModalDataset};

const LABELS_FILE: &str = "labels.csv";

fn modality_file(m: Modality) -> String {
    format!("{}.csv", m.name())
}

fn fmt_f64(v: f64) -> String {
    // Debug formatting is the shortest string that parses back to the same bits.
    format!("{v:?}")
}

pub fn write_csv_dataset(ds: &MultiModalDataset, dir: &Path) -> Result<()> {
    ds.validate()?;
    fs::create_dir_all(dir).map_err(|e| MsmfError::io(dir, e))?;
    for (m, s) in &ds.streams {
        let path = dir.join(modality_file(*m));
        let mut out = String::from("timestamp");
        for j in 0..s.dim() {
            out.push_str(&format!(",f{j}"));
        }
        out.push('\n');
        for (i, ts) in ds.timestamps.iter().enumerate() {
            if !s.present[i] {
                continue;
            }
            out.push_str(&ts.to_string());
            for v in s.row(i) {
                out.push(',');
                out.push_str(&fmt_f64(*v));
            }
            out.push('\n');
        }
        fs::write(&path, out).map_err(|e| MsmfError::io(&path, e))?;
    }
    let path = dir.join(LABELS_FILE);
    let mut out = String::from("timestamp,return,movement\n");
    let warmup = ds.window - 1;
    for (i, ts) in ds.timestamps.iter().enumerate() {
        if i < warmup {
            out.push_str(&format!("{ts},,\n"));
        } else {
            let w = i - warmup;
            out.push_str(&format!(
                "{ts},{},{}\n",
                fmt_f64(ds.returns[w]),
                ds.movements[w]
            ));
        }
    }
    fs::write(&path, out).map_err(|e| MsmfError::io(&path, e))
}

struct Table {
    path: PathBuf,
    header: Vec<String>,
    /// `(line number, fields)` per data row.
    rows: Vec<(usize, Vec<String>)>,
}

fn read_table(path: &Path) -> Result<Table> {
    let text = fs::read_to_string(path).map_err(|e| MsmfError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let parse_err = |line: usize, message: String| MsmfError::Parse {
        file: path.to_path_buf(),
        line,
        message,
    };
    let mut header = None;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let fields: Vec<String> = record.iter().map(|f| f.trim().to_string()).collect();
        if header.is_none() {
            header = Some(fields);
        } else {
            rows.push((line, fields));
        }
    }
    let header = header.ok_or_else(|| parse_err(1, "missing header row".into()))?;
    Ok(Table {
        path: path.to_path_buf(),
        header,
        rows,
    })
}

impl Table {
    fn err(&self, line: usize, message: impl Into<String>) -> MsmfError {
        MsmfError::Parse {
            file: self.path.clone(),
            line,
            message: message.into(),
        }
    }

    fn check_width(&self, line: usize, fields: &[String]) -> Result<()> {
        if fields.len() != self.header.len() {
            return Err(self.err(
                line,
                format!("expected {} fields, found {}", self.header.len(), fields.len()),
            ));
        }
        Ok(())
    }

    /// Parses the first column of every row as strictly increasing timestamps.
    fn timestamps(&self) -> Result<Vec<i64>> {
        let mut out: Vec<i64> = Vec::with_capacity(self.rows.len());
        for (line, fields) in &self.rows {
            self.check_width(*line, fields)?;
            let ts: i64 = fields[0]
                .parse()
                .map_err(|_| self.err(*line, format!("timestamp '{}' is not an integer", fields[0])))?;
            if let Some(&prev) = out.last() {
                if ts <= prev {
                    return Err(self.err(
                        *line,
                        format!("timestamp {ts} does not increase after {prev}"),
                    ));
                }
            }
            out.push(ts);
        }
        Ok(out)
    }

    fn number(&self, line: usize, cell: &str) -> Result<f64> {
        let v: f64 = cell
            .parse()
            .map_err(|_| self.err(line, format!("'{cell}' is not a number")))?;
        if !v.is_finite() {
            return Err(self.err(line, format!("'{cell}' is not finite")));
        }
        Ok(v)
    }
}

/// Loads a directory written by [`write_csv_dataset`] (or any files in the
/// same format). Modality rows are joined onto the `labels.csv` timeline; a
/// timestamp a modality lacks becomes an absent row.
pub fn load_csv_dataset(dir: &Path, window: usize) -> Result<MultiModalDataset> {
    if window == 0 {
        return Err(MsmfError::Config("window must be positive".into()));
    }
    let labels = read_table(&dir.join(LABELS_FILE))?;
    if labels.header != ["timestamp", "return", "movement"] {
        return Err(labels.err(1, format!("unexpected header {:?}", labels.header)));
    }
    let timestamps = labels.timestamps()?;
    let n = timestamps.len();
    if n < window {
        return Err(MsmfError::Data(format!(
            "{} has {n} rows, fewer than the window {window}",
            labels.path.display()
        )));
    }
    let mut returns = Vec::with_capacity(n - window + 1);
    let mut movements = Vec::with_capacity(n - window + 1);
    for (i, (line, fields)) in labels.rows.iter().enumerate() {
        if i + 1 < window {
            continue;
        }
        if fields[1].is_empty() || fields[2].is_empty() {
            return Err(labels.err(*line, "row ends a window but has no label"));
        }
        returns.push(labels.number(*line, &fields[1])?);
        let mv = match fields[2].as_str() {
            "0" => 0,
            "1" => 1,
            other => return Err(labels.err(*line, format!("movement '{other}' is not 0 or 1"))),
        };
        movements.push(mv);
    }
    let index: HashMap<i64, usize> = timestamps.iter().enumerate().map(|(i, &t)| (t, i)).collect();

    let mut streams = BTreeMap::new();
    for m in Modality::ALL {
        let table = read_table(&dir.join(modality_file(m)))?;
        let d = table.header.len().saturating_sub(1);
        let header_ok = d > 0
            && table.header[0] == "timestamp"
            && table.header[1..]
                .iter()
                .enumerate()
                .all(|(j, h)| *h == format!("f{j}"));
        if !header_ok {
            return Err(table.err(1, format!("unexpected header {:?}", table.header)));
        }
        let ts = table.timestamps()?;
        let mut feats = vec![0.0; n * d];
        let mut present = vec![false; n];
        for ((line, fields), t) in table.rows.iter().zip(ts) {
            let row = *index
                .get(&t)
                .ok_or_else(|| table.err(*line, format!("timestamp {t} is not in {LABELS_FILE}")))?;
            for j in 0..d {
                feats[row * d + j] = table.number(*line, &fields[j + 1])?;
            }
            present[row] = true;
        }
        streams.insert(
            m,
            ModalityStream {
                modality: m,
                features: Tensor::new(vec![n, d], feats)?,
                present,
            },
        );
    }

    let ds = MultiModalDataset {
        timestamps,
        streams,
        window,
        returns,
        movements,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    fn write(dir: &Path, name: &str, body: &str) {
        fs::write(dir.join(name), body).unwrap();
    }

    fn minimal_dir(text_rows: &str) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        write(
            dir.path(),
            "labels.csv",
            "timestamp,return,movement\n1,,\n2,0.1,1\n3,-0.2,0\n4,0.3,1\n5,0.05,1\n",
        );
        let full = "timestamp,f0\n1,1\n2,2\n3,3\n4,4\n5,5\n";
        write(dir.path(), "timeseries.csv", full);
        write(dir.path(), "image.csv", full);
        write(dir.path(), "text.csv", text_rows);
        dir
    }

    #[test]
    fn round_trip_with_missing_rows() {
        let spec = SyntheticSpec {
            n_samples: 120,
            missing_rate: [(Modality::Text, 0.3), (Modality::Image, 0.1)].into_iter().collect(),
            ..Default::default()
        };
        let ds = generate_synthetic(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_csv_dataset(&ds, dir.path()).unwrap();
        let back = load_csv_dataset(dir.path(), ds.window).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn join_marks_missing_timestamps_absent() {
        let dir = minimal_dir("timestamp,f0\n1,9\n3,9\n5,9\n");
        let ds = load_csv_dataset(dir.path(), 2).unwrap();
        let text = &ds.streams[&Modality::Text];
        assert_eq!(text.present_count(), 3);
        assert_eq!(text.present, [true, false, true, false, true]);
        assert_eq!(ds.n_windows(), 4);
    }

    #[test]
    fn duplicate_timestamp_is_parse_error_with_line() {
        let dir = minimal_dir("timestamp,f0\n1,9\n3,9\n3,9\n");
        let err = load_csv_dataset(dir.path(), 2).unwrap_err();
        match err {
            MsmfError::Parse { file, line, .. } => {
                assert!(file.ends_with("text.csv"));
                assert_eq!(line, 4);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn non_numeric_cell_and_bad_header() {
        let dir = minimal_dir("timestamp,f0\n1,abc\n");
        assert!(matches!(
            load_csv_dataset(dir.path(), 2).unwrap_err(),
            MsmfError::Parse { line: 2, .. }
        ));
        let dir = minimal_dir("time,f0\n1,1\n");
        assert!(matches!(
            load_csv_dataset(dir.path(), 2).unwrap_err(),
            MsmfError::Parse { line: 1, .. }
        ));
    }
}
