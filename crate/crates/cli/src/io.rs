//! Study CSV files: a header row with `time`, `status` and feature columns.

use std::collections::HashSet;
use std::path::Path;

use anyhow::{anyhow, Context, Result};
use hicox::{Error, StudyData};
use nalgebra::DMatrix;

/// A study with the names of its feature columns.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedStudy {
    pub data: StudyData,
    pub features: Vec<String>,
}

fn invalid(msg: String) -> anyhow::Error {
    anyhow!(Error::InvalidInput(msg))
}

pub fn read_study(path: &Path) -> Result<NamedStudy> {
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "study".into());
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let header = reader.headers()?.clone();
    let find = |name: &str| header.iter().position(|h| h.eq_ignore_ascii_case(name));
    let time_col = find("time").ok_or_else(|| invalid(format!("{}: missing `time` column", path.display())))?;
    let status_col = find("status").ok_or_else(|| invalid(format!("{}: missing `status` column", path.display())))?;
    let feature_cols: Vec<usize> = (0..header.len()).filter(|&c| c != time_col && c != status_col).collect();
    let features: Vec<String> = feature_cols.iter().map(|&c| header[c].to_string()).collect();
    let mut seen = HashSet::new();
    if let Some(dup) = features.iter().find(|f| !seen.insert(f.as_str())) {
        return Err(invalid(format!("{}: duplicate feature column `{dup}`", path.display())));
    }

    let mut times = Vec::new();
    let mut status = Vec::new();
    let mut values = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.with_context(|| format!("{}: malformed row {}", path.display(), row + 1))?;
        let line = row + 2;
        let field = |c: usize| -> Result<f64> {
            let raw = record.get(c).unwrap_or("");
            raw.parse::<f64>().map_err(|_| {
                invalid(format!(
                    "{}: line {line}, column `{}`: cannot parse `{raw}` as a number",
                    path.display(),
                    &header[c]
                ))
            })
        };
        let t = field(time_col)?;
        if !(t > 0.0 && t.is_finite()) {
            return Err(invalid(format!(
                "{}: line {line}: time must be positive, got {t}",
                path.display()
            )));
        }
        let s = match record.get(status_col).unwrap_or("") {
            "1" => true,
            "0" => false,
            other => {
                return Err(invalid(format!(
                    "{}: line {line}: status must be 0 or 1, got `{other}`",
                    path.display()
                )))
            }
        };
        times.push(t);
        status.push(s);
        for &c in &feature_cols {
            values.push(field(c)?);
        }
    }
    let n = times.len();
    let x = DMatrix::from_row_slice(n, feature_cols.len(), &values);
    let data = StudyData::new(id, times, status, x).with_context(|| format!("validating {}", path.display()))?;
    Ok(NamedStudy { data, features })
}

/// Restricts a study to `features`, in that order.
pub fn select_features(study: &NamedStudy, features: &[String]) -> Result<NamedStudy> {
    let idx = features
        .iter()
        .map(|f| {
            study.features.iter().position(|g| g == f).ok_or_else(|| {
                invalid(format!("study `{}` lacks feature `{f}`", study.data.study_id))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let x = study.data.covariates().select_columns(&idx);
    Ok(NamedStudy {
        data: study.data.with_covariates(x)?,
        features: features.to_vec(),
    })
}

/// Reads several studies and keeps the features common to all of them, in
/// the order of the first file. Dropped columns are logged.
pub fn ingest(paths: &[impl AsRef<Path>]) -> Result<(Vec<StudyData>, Vec<String>)> {
    let studies = paths.iter().map(|p| read_study(p.as_ref())).collect::<Result<Vec<_>>>()?;
    let first = studies.first().ok_or_else(|| invalid("no study files given".into()))?;
    let common: Vec<String> = first
        .features
        .iter()
        .filter(|f| studies.iter().all(|s| s.features.contains(f)))
        .cloned()
        .collect();
    if common.is_empty() {
        return Err(invalid("the studies share no feature columns".into()));
    }
    let mut dropped: Vec<&str> = studies
        .iter()
        .flat_map(|s| s.features.iter())
        .filter(|f| !common.contains(f))
        .map(String::as_str)
        .collect();
    dropped.sort_unstable();
    dropped.dedup();
    if !dropped.is_empty() {
        log::warn!("dropping {} features not present in every study: {}", dropped.len(), dropped.join(", "));
    }
    let data = studies
        .iter()
        .map(|s| select_features(s, &common).map(|n| n.data))
        .collect::<Result<Vec<_>>>()?;
    Ok((data, common))
}

/// Reads studies that must carry every feature in `features`.
pub fn ingest_aligned(paths: &[impl AsRef<Path>], features: &[String]) -> Result<Vec<StudyData>> {
    paths
        .iter()
        .map(|p| select_features(&read_study(p.as_ref())?, features).map(|n| n.data))
        .collect()
}

pub fn default_feature_names(p: usize) -> Vec<String> {
    (1..=p).map(|j| format!("x{j}")).collect()
}

/// Writes a study; floats use the shortest representation that reads back
/// to the same value.
pub fn write_study(path: &Path, study: &StudyData, features: &[String]) -> Result<()> {
    if features.len() != study.p() {
        return Err(invalid(format!(
            "{} feature names for {} columns",
            features.len(),
            study.p()
        )));
    }
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    let mut header = vec!["time".to_string(), "status".to_string()];
    header.extend(features.iter().cloned());
    w.write_record(&header)?;
    let x = study.covariates();
    for i in 0..study.n() {
        let mut row = vec![study.times()[i].to_string(), u8::from(study.status()[i]).to_string()];
        row.extend((0..study.p()).map(|j| x[(i, j)].to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn feature_intersection() {
        let dir = tempfile::tempdir().unwrap();
        let a = write(dir.path(), "a.csv", "time,status,A,B,C\n1,1,1,2,3\n2,0,4,5,6\n");
        let b = write(dir.path(), "b.csv", "time,status,B,C,D\n1,1,1,2,3\n3,1,4,5,6\n");
        let (studies, names) = ingest(&[a, b]).unwrap();
        assert_eq!(names, vec!["B", "C"]);
        assert_eq!(studies[0].covariates()[(1, 0)], 5.0);
        assert_eq!(studies[1].covariates()[(0, 1)], 2.0);
        assert_eq!(studies[1].study_id, "b");
    }

    #[test]
    fn negative_time_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let a = write(dir.path(), "a.csv", "time,status,A\n1,1,0.5\n-2,0,1\n");
        let msg = format!("{:#}", read_study(&a).unwrap_err());
        assert!(msg.contains("line 3"), "{msg}");
    }

    #[test]
    fn bad_status_and_missing_columns() {
        let dir = tempfile::tempdir().unwrap();
        let a = write(dir.path(), "a.csv", "time,status,A\n1,2,0.5\n");
        assert!(read_study(&a).is_err());
        let b = write(dir.path(), "b.csv", "time,A\n1,0.5\n");
        assert!(read_study(&b).is_err());
        let c = write(dir.path(), "c.csv", "time,status,A\n1,1,abc\n");
        assert!(format!("{:#}", read_study(&c).unwrap_err()).contains("`A`"));
    }

    #[test]
    fn write_then_read_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let s = StudyData::new(
            "s",
            vec![0.1 + 0.2, 1.0 / 3.0, 7.0],
            vec![true, false, true],
            DMatrix::from_row_slice(3, 2, &[std::f64::consts::PI, -1e-300, 2.5e17, 0.0, -0.7, 1.0 / 7.0]),
        )
        .unwrap();
        let path = dir.path().join("s.csv");
        write_study(&path, &s, &default_feature_names(2)).unwrap();
        let back = read_study(&path).unwrap();
        assert_eq!(back.data, s);
    }
}
