//! Serialization layer: cohort and trajectory CSV schemas, model JSON, and
//! report JSON, with location-tagged schema validation.
//!
//! CSV conventions: UTF-8, comma-delimited, `.` decimal separator,
//! RFC-4180 quoting. Floats are written with 17 significant digits so f64
//! round-trips exactly; missing values are empty fields. Writers may
//! prepend `# key=value` provenance comments, which readers skip.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::cluster::{ClusterAssignment, Dendrogram};
use crate::data::{Cohort, PatientTrajectory, StageBoundaries, TrajectoryCohort};
use crate::embed::Embedding2D;
use crate::error::{Error, Result, SchemaError, SchemaErrorKind};
use crate::models::{GbmModel, LinearModel};
use crate::scalar::Scalar;
use crate::shap::ShapMatrix;
use crate::temporal::StaticFeatures;

/// 17 significant digits: exact round-trip for f64. NaN encodes missing
/// and serializes as an empty field.
pub fn format_scalar<S: Scalar>(v: S) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{:.16e}", v.as_f64())
    }
}

fn schema_err(
    file: &Path,
    line: usize,
    column: &str,
    kind: SchemaErrorKind,
    message: impl Into<String>,
) -> Error {
    Error::Schema(SchemaError::new(file, line, column, kind, message))
}

fn parse_value<S: Scalar>(
    raw: &str,
    file: &Path,
    line: usize,
    column: &str,
) -> Result<Option<S>> {
    let raw = raw.trim();
    if raw.is_empty() {
        return Ok(None);
    }
    let v: f64 = raw
        .parse()
        .map_err(|_| schema_err(file, line, column, SchemaErrorKind::BadType, format!("`{raw}` is not a number")))?;
    if !v.is_finite() {
        return Err(schema_err(
            file,
            line,
            column,
            SchemaErrorKind::NonFinite,
            format!("`{raw}` is not finite"),
        ));
    }
    Ok(Some(S::cast(v)))
}

fn parse_label(raw: &str, file: &Path, line: usize, column: &str) -> Result<u8> {
    match raw.trim() {
        "0" => Ok(0),
        "1" => Ok(1),
        other => Err(schema_err(
            file,
            line,
            column,
            SchemaErrorKind::BadType,
            format!("label `{other}` is not 0/1"),
        )),
    }
}

fn open_reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })?;
    Ok(csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .flexible(false)
        .from_reader(file))
}

fn record_line(record: &csv::StringRecord, fallback: usize) -> usize {
    record
        .position()
        .map(|p| p.line() as usize)
        .unwrap_or(fallback)
}

/// Writes optional `# key=value` provenance lines followed by CSV content.
fn start_csv(path: &Path, provenance: Option<&str>) -> Result<csv::Writer<BufWriter<File>>> {
    let mut file = BufWriter::new(File::create(path)?);
    if let Some(hash) = provenance {
        writeln!(file, "# config_hash={hash}")?;
    }
    Ok(csv::WriterBuilder::new().from_writer(file))
}

/// Cohort CSV: feature columns, `label`, optional `phenotype`.
pub fn write_cohort_csv<S: Scalar>(
    path: &Path,
    cohort: &Cohort<S>,
    provenance: Option<&str>,
) -> Result<()> {
    cohort.validate()?;
    let mut w = start_csv(path, provenance)?;
    let mut header: Vec<&str> = cohort.feature_names.iter().map(String::as_str).collect();
    header.push("label");
    if cohort.phenotype.is_some() {
        header.push("phenotype");
    }
    w.write_record(&header)?;
    for r in 0..cohort.n_samples() {
        let mut record: Vec<String> = (0..cohort.n_features())
            .map(|c| format_scalar(cohort.features[[r, c]]))
            .collect();
        record.push(cohort.labels[r].to_string());
        if let Some(ph) = &cohort.phenotype {
            record.push(ph[r].clone());
        }
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_cohort_csv<S: Scalar>(path: &Path) -> Result<Cohort<S>> {
    let mut reader = open_reader(path)?;
    let headers = reader.headers()?.clone();
    let label_col = headers.iter().position(|h| h == "label").ok_or_else(|| {
        schema_err(path, 1, "label", SchemaErrorKind::MissingColumn, "cohort CSV requires a `label` column")
    })?;
    let phenotype_col = headers.iter().position(|h| h == "phenotype");
    let feature_cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != label_col && Some(*i) != phenotype_col)
        .map(|(i, h)| (i, h.to_string()))
        .collect();

    let mut rows: Vec<Vec<S>> = Vec::new();
    let mut labels = Vec::new();
    let mut phenotype: Vec<String> = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let record = record?;
        let line = record_line(&record, idx + 2);
        let mut row = Vec::with_capacity(feature_cols.len());
        for (col, name) in &feature_cols {
            let v = parse_value::<S>(&record[*col], path, line, name)?;
            row.push(v.unwrap_or_else(S::nan));
        }
        labels.push(parse_label(&record[label_col], path, line, "label")?);
        if let Some(pc) = phenotype_col {
            phenotype.push(record[pc].trim().to_string());
        }
        rows.push(row);
    }

    let n = rows.len();
    let p = feature_cols.len();
    let mut features = Array2::zeros((n, p));
    for (r, row) in rows.into_iter().enumerate() {
        for (c, v) in row.into_iter().enumerate() {
            features[[r, c]] = v;
        }
    }
    Ok(Cohort {
        features,
        labels,
        phenotype: phenotype_col.map(|_| phenotype),
        feature_names: feature_cols.into_iter().map(|(_, name)| name).collect(),
    })
}

/// The three trajectory CSV paths.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryPaths {
    pub trajectories: PathBuf,
    pub boundaries: PathBuf,
    pub outcomes: PathBuf,
}

fn parse_window<S: Scalar>(
    record: &csv::StringRecord,
    cols: (usize, usize),
    names: (&str, &str),
    file: &Path,
    line: usize,
) -> Result<Option<(S, S)>> {
    let start = parse_value::<S>(&record[cols.0], file, line, names.0)?;
    let end = parse_value::<S>(&record[cols.1], file, line, names.1)?;
    match (start, end) {
        (Some(s), Some(e)) => Ok(Some((s, e))),
        (None, None) => Ok(None),
        _ => Err(schema_err(
            file,
            line,
            names.0,
            SchemaErrorKind::BadType,
            "stage boundaries must be both present or both empty",
        )),
    }
}

fn require_columns(
    headers: &csv::StringRecord,
    expected: &[&str],
    file: &Path,
) -> Result<Vec<usize>> {
    expected
        .iter()
        .map(|name| {
            headers.iter().position(|h| h == *name).ok_or_else(|| {
                schema_err(file, 1, name, SchemaErrorKind::MissingColumn, "required column absent")
            })
        })
        .collect()
}

/// Assembles a [`TrajectoryCohort`] from long-format, boundary, and
/// outcome CSVs, validating ids, timestamp order, and window ordering.
pub fn read_trajectories<S: Scalar>(paths: &TrajectoryPaths) -> Result<TrajectoryCohort<S>> {
    // Boundaries define the patient roster and its order.
    let bpath = &paths.boundaries;
    let mut reader = open_reader(bpath)?;
    let headers = reader.headers()?.clone();
    let cols = require_columns(
        &headers,
        &[
            "patient_id",
            "pre_start",
            "pre_end",
            "intra_start",
            "intra_end",
            "post_start",
            "post_end",
        ],
        bpath,
    )?;
    let mut patient_ids: Vec<String> = Vec::new();
    let mut boundaries: Vec<StageBoundaries<S>> = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let record = record?;
        let line = record_line(&record, idx + 2);
        let id = record[cols[0]].trim().to_string();
        if id.is_empty() {
            return Err(schema_err(bpath, line, "patient_id", SchemaErrorKind::BadType, "empty patient id"));
        }
        if patient_ids.contains(&id) {
            return Err(schema_err(
                bpath,
                line,
                "patient_id",
                SchemaErrorKind::DuplicateId,
                format!("patient `{id}` listed twice"),
            ));
        }
        let stages = StageBoundaries {
            pre: parse_window(&record, (cols[1], cols[2]), ("pre_start", "pre_end"), bpath, line)?,
            intra: parse_window(&record, (cols[3], cols[4]), ("intra_start", "intra_end"), bpath, line)?,
            post: parse_window(&record, (cols[5], cols[6]), ("post_start", "post_end"), bpath, line)?,
        };
        stages.validate().map_err(|e| {
            schema_err(
                bpath,
                line,
                "pre_start",
                SchemaErrorKind::UnsortedTimestamps,
                format!("stage windows out of order: {e}"),
            )
        })?;
        patient_ids.push(id);
        boundaries.push(stages);
    }

    let patient_index = |id: &str, file: &Path, line: usize| -> Result<usize> {
        patient_ids.iter().position(|p| p == id).ok_or_else(|| {
            schema_err(
                file,
                line,
                "patient_id",
                SchemaErrorKind::DuplicateId,
                format!("patient `{id}` not present in the boundaries file"),
            )
        })
    };

    // Long-format series. Variable vocabulary is the sorted set of names.
    let tpath = &paths.trajectories;
    let mut reader = open_reader(tpath)?;
    let headers = reader.headers()?.clone();
    let cols = require_columns(&headers, &["patient_id", "variable", "timestamp", "value"], tpath)?;
    let mut raw_points: Vec<(usize, String, S, Option<S>)> = Vec::new();
    let mut variable_names: Vec<String> = Vec::new();
    {
        let mut last_seen: std::collections::BTreeMap<(usize, String), S> =
            std::collections::BTreeMap::new();
        for (idx, record) in reader.records().enumerate() {
            let record = record?;
            let line = record_line(&record, idx + 2);
            let pidx = patient_index(record[cols[0]].trim(), tpath, line)?;
            let variable = record[cols[1]].trim().to_string();
            if variable.is_empty() {
                return Err(schema_err(tpath, line, "variable", SchemaErrorKind::BadType, "empty variable name"));
            }
            let t = parse_value::<S>(&record[cols[2]], tpath, line, "timestamp")?.ok_or_else(|| {
                schema_err(tpath, line, "timestamp", SchemaErrorKind::BadType, "timestamp must be present")
            })?;
            let value = parse_value::<S>(&record[cols[3]], tpath, line, "value")?;
            let key = (pidx, variable.clone());
            if let Some(&prev) = last_seen.get(&key) {
                if t < prev {
                    return Err(schema_err(
                        tpath,
                        line,
                        "timestamp",
                        SchemaErrorKind::UnsortedTimestamps,
                        format!("timestamp {t} precedes {prev} for patient `{}`", patient_ids[pidx]),
                    ));
                }
            }
            last_seen.insert(key, t);
            if !variable_names.contains(&variable) {
                variable_names.push(variable.clone());
            }
            raw_points.push((pidx, variable, t, value));
        }
    }
    variable_names.sort();

    // Outcomes.
    let opath = &paths.outcomes;
    let mut reader = open_reader(opath)?;
    let headers = reader.headers()?.clone();
    let cols = require_columns(&headers, &["patient_id", "timestamp", "label"], opath)?;
    let mut outcomes: Vec<Vec<(S, u8)>> = vec![Vec::new(); patient_ids.len()];
    for (idx, record) in reader.records().enumerate() {
        let record = record?;
        let line = record_line(&record, idx + 2);
        let pidx = patient_index(record[cols[0]].trim(), opath, line)?;
        let t = parse_value::<S>(&record[cols[1]], opath, line, "timestamp")?.ok_or_else(|| {
            schema_err(opath, line, "timestamp", SchemaErrorKind::BadType, "timestamp must be present")
        })?;
        let label = parse_label(&record[cols[2]], opath, line, "label")?;
        if let Some(&(prev, _)) = outcomes[pidx].last() {
            if t < prev {
                return Err(schema_err(
                    opath,
                    line,
                    "timestamp",
                    SchemaErrorKind::UnsortedTimestamps,
                    format!("outcome timestamps out of order for patient `{}`", patient_ids[pidx]),
                ));
            }
        }
        if let Some(horizon) = boundaries[pidx].last_end() {
            if t < horizon {
                return Err(schema_err(
                    opath,
                    line,
                    "timestamp",
                    SchemaErrorKind::UnsortedTimestamps,
                    format!(
                        "outcome at {t} overlaps the input window (ends {horizon}) for patient `{}`",
                        patient_ids[pidx]
                    ),
                ));
            }
        }
        outcomes[pidx].push((t, label));
    }
    for (pidx, outs) in outcomes.iter().enumerate() {
        if outs.is_empty() {
            return Err(schema_err(
                opath,
                0,
                "patient_id",
                SchemaErrorKind::DuplicateId,
                format!("patient `{}` has no outcome rows", patient_ids[pidx]),
            ));
        }
    }

    let var_index: std::collections::BTreeMap<&str, usize> = variable_names
        .iter()
        .enumerate()
        .map(|(i, name)| (name.as_str(), i))
        .collect();
    let mut patients: Vec<PatientTrajectory<S>> = patient_ids
        .iter()
        .zip(boundaries)
        .zip(outcomes)
        .map(|((id, stages), outcomes)| PatientTrajectory {
            patient_id: id.clone(),
            series: vec![Vec::new(); variable_names.len()],
            stages,
            outcomes,
        })
        .collect();
    for (pidx, variable, t, value) in raw_points {
        patients[pidx].series[var_index[variable.as_str()]].push((t, value));
    }

    Ok(TrajectoryCohort {
        patients,
        variable_names,
    })
}

/// Inverse of [`read_trajectories`] up to float formatting.
pub fn write_trajectories<S: Scalar>(
    cohort: &TrajectoryCohort<S>,
    paths: &TrajectoryPaths,
    provenance: Option<&str>,
) -> Result<()> {
    let mut w = start_csv(&paths.boundaries, provenance)?;
    w.write_record([
        "patient_id",
        "pre_start",
        "pre_end",
        "intra_start",
        "intra_end",
        "post_start",
        "post_end",
    ])?;
    for p in &cohort.patients {
        let window = |w: Option<(S, S)>| match w {
            Some((a, b)) => (format_scalar(a), format_scalar(b)),
            None => (String::new(), String::new()),
        };
        let (pre_s, pre_e) = window(p.stages.pre);
        let (intra_s, intra_e) = window(p.stages.intra);
        let (post_s, post_e) = window(p.stages.post);
        w.write_record([
            p.patient_id.as_str(),
            &pre_s,
            &pre_e,
            &intra_s,
            &intra_e,
            &post_s,
            &post_e,
        ])?;
    }
    w.flush()?;

    let mut w = start_csv(&paths.trajectories, provenance)?;
    w.write_record(["patient_id", "variable", "timestamp", "value"])?;
    for p in &cohort.patients {
        for (v, series) in p.series.iter().enumerate() {
            for &(t, value) in series {
                w.write_record([
                    p.patient_id.as_str(),
                    &cohort.variable_names[v],
                    &format_scalar(t),
                    &value.map(format_scalar).unwrap_or_default(),
                ])?;
            }
        }
    }
    w.flush()?;

    let mut w = start_csv(&paths.outcomes, provenance)?;
    w.write_record(["patient_id", "timestamp", "label"])?;
    for p in &cohort.patients {
        for &(t, label) in &p.outcomes {
            w.write_record([p.patient_id.as_str(), &format_scalar(t), &label.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Per-patient static features: `patient_id` plus numeric columns, rows
/// matched to the boundary-file patient order.
pub fn read_statics_csv<S: Scalar>(path: &Path, patient_ids: &[String]) -> Result<StaticFeatures<S>> {
    let mut reader = open_reader(path)?;
    let headers = reader.headers()?.clone();
    let id_col = headers.iter().position(|h| h == "patient_id").ok_or_else(|| {
        schema_err(path, 1, "patient_id", SchemaErrorKind::MissingColumn, "required column absent")
    })?;
    let names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != id_col)
        .map(|(_, h)| h.to_string())
        .collect();

    let mut by_id: std::collections::BTreeMap<String, Vec<S>> = std::collections::BTreeMap::new();
    for (idx, record) in reader.records().enumerate() {
        let record = record?;
        let line = record_line(&record, idx + 2);
        let id = record[id_col].trim().to_string();
        if by_id.contains_key(&id) {
            return Err(schema_err(
                path,
                line,
                "patient_id",
                SchemaErrorKind::DuplicateId,
                format!("patient `{id}` listed twice"),
            ));
        }
        let mut row = Vec::with_capacity(names.len());
        for (c, _) in headers.iter().enumerate() {
            if c == id_col {
                continue;
            }
            let v = parse_value::<S>(&record[c], path, line, &headers[c])?;
            row.push(v.unwrap_or_else(S::nan));
        }
        by_id.insert(id, row);
    }

    let rows: Vec<Vec<S>> = patient_ids
        .iter()
        .map(|id| {
            by_id.get(id).cloned().ok_or_else(|| {
                schema_err(
                    path,
                    0,
                    "patient_id",
                    SchemaErrorKind::DuplicateId,
                    format!("patient `{id}` missing from statics"),
                )
            })
        })
        .collect::<Result<_>>()?;
    Ok(StaticFeatures { names, rows })
}

/// Self-describing model JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model_type", rename_all = "snake_case")]
pub enum ModelDocument<S: Scalar> {
    Gbm(GbmModel<S>),
    Logistic(LinearModel<S>),
}

pub fn save_model<S: Scalar + Serialize>(path: &Path, model: &ModelDocument<S>) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(file, model)?;
    Ok(())
}

pub fn load_model<S: Scalar + DeserializeOwned>(path: &Path) -> Result<ModelDocument<S>> {
    let file = File::open(path)?;
    Ok(serde_json::from_reader(file)?)
}

/// Pretty-printed JSON for report artifacts.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut file = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut file, value)?;
    file.write_all(b"\n")?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path)?;
    Ok(serde_json::from_reader(file)?)
}

/// Dendrogram CSV: one merge per row.
pub fn write_dendrogram_csv<S: Scalar>(
    path: &Path,
    dendrogram: &Dendrogram<S>,
    provenance: Option<&str>,
) -> Result<()> {
    let mut w = start_csv(path, provenance)?;
    w.write_record(["cluster_a", "cluster_b", "height", "new_size"])?;
    for m in &dendrogram.merges {
        w.write_record([
            m.cluster_a.to_string(),
            m.cluster_b.to_string(),
            format_scalar(m.height),
            m.new_size.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Assignment CSV: `row_id, cluster`.
pub fn write_assignments_csv(
    path: &Path,
    assignment: &ClusterAssignment,
    provenance: Option<&str>,
) -> Result<()> {
    let mut w = start_csv(path, provenance)?;
    w.write_record(["row_id", "cluster"])?;
    for (row, &cluster) in assignment.labels.iter().enumerate() {
        w.write_record([row.to_string(), cluster.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// SHAP matrix CSV: design-matrix column layout plus `base_value`.
pub fn write_shap_csv<S: Scalar>(
    path: &Path,
    matrix: &ShapMatrix<S>,
    provenance: Option<&str>,
) -> Result<()> {
    let mut w = start_csv(path, provenance)?;
    let mut header: Vec<&str> = matrix.feature_names.iter().map(String::as_str).collect();
    header.push("base_value");
    w.write_record(&header)?;
    for r in 0..matrix.n_rows() {
        let mut record: Vec<String> = (0..matrix.n_features())
            .map(|c| format_scalar(matrix.values[[r, c]]))
            .collect();
        record.push(format_scalar(matrix.base_values[r]));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a SHAP matrix CSV written by [`write_shap_csv`].
pub fn read_shap_csv<S: Scalar>(path: &Path) -> Result<ShapMatrix<S>> {
    let mut reader = open_reader(path)?;
    let headers = reader.headers()?.clone();
    let base_col = headers.iter().position(|h| h == "base_value").ok_or_else(|| {
        schema_err(path, 1, "base_value", SchemaErrorKind::MissingColumn, "required column absent")
    })?;
    let feature_names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != base_col)
        .map(|(_, h)| h.to_string())
        .collect();
    let mut rows: Vec<Vec<S>> = Vec::new();
    let mut base_values: Vec<S> = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let record = record?;
        let line = record_line(&record, idx + 2);
        let mut row = Vec::with_capacity(feature_names.len());
        for (c, header) in headers.iter().enumerate() {
            let v = parse_value::<S>(&record[c], path, line, header)?.ok_or_else(|| {
                schema_err(path, line, header, SchemaErrorKind::BadType, "attribution values must be present")
            })?;
            if c == base_col {
                base_values.push(v);
            } else {
                row.push(v);
            }
        }
        rows.push(row);
    }
    let n = rows.len();
    let p = feature_names.len();
    let mut values = Array2::zeros((n, p));
    for (r, row) in rows.into_iter().enumerate() {
        for (c, v) in row.into_iter().enumerate() {
            values[[r, c]] = v;
        }
    }
    Ok(ShapMatrix {
        values,
        base_values,
        feature_names,
    })
}

/// Embedding CSV: `row_id, x, y` plus optional cluster and phenotype tags.
pub fn write_embedding_csv<S: Scalar>(
    path: &Path,
    embedding: &Embedding2D<S>,
    clusters: Option<&[usize]>,
    phenotype: Option<&[String]>,
    provenance: Option<&str>,
) -> Result<()> {
    let mut w = start_csv(path, provenance)?;
    let mut header = vec!["row_id", "x", "y"];
    if clusters.is_some() {
        header.push("cluster");
    }
    if phenotype.is_some() {
        header.push("phenotype");
    }
    w.write_record(&header)?;
    for r in 0..embedding.coords.nrows() {
        let mut record = vec![
            r.to_string(),
            format_scalar(embedding.coords[[r, 0]]),
            format_scalar(embedding.coords[[r, 1]]),
        ];
        if let Some(c) = clusters {
            record.push(c[r].to_string());
        }
        if let Some(ph) = phenotype {
            record.push(ph[r].clone());
        }
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Stage;
    use crate::synth::{generate_cohort, SyntheticConfig};
    use tempfile::TempDir;

    #[test]
    fn cohort_round_trip_is_exact() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("cohort.csv");
        let config = SyntheticConfig::<f64> {
            n_samples: 80,
            ..SyntheticConfig::default()
        };
        let cohort = generate_cohort(&config).unwrap();
        write_cohort_csv(&path, &cohort, Some("deadbeef")).unwrap();
        let loaded: Cohort<f64> = read_cohort_csv(&path).unwrap();
        assert_eq!(cohort, loaded);
    }

    #[test]
    fn missing_label_column_is_reported() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "a,b\n1,2\n").unwrap();
        let err = read_cohort_csv::<f64>(&path).unwrap_err();
        match err {
            Error::Schema(s) => {
                assert_eq!(s.kind, SchemaErrorKind::MissingColumn);
                assert_eq!(s.column, "label");
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn bad_label_value_reports_line() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "a,label\n1.0,0\n2.0,2\n").unwrap();
        let err = read_cohort_csv::<f64>(&path).unwrap_err();
        match err {
            Error::Schema(s) => {
                assert_eq!(s.kind, SchemaErrorKind::BadType);
                assert_eq!(s.line, 3);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn missing_fields_become_nan_and_round_trip() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("missing.csv");
        std::fs::write(&path, "a,b,label\n1.0,,0\n,2.0,1\n").unwrap();
        let cohort: Cohort<f64> = read_cohort_csv(&path).unwrap();
        assert!(cohort.features[[0, 1]].is_nan());
        assert!(cohort.features[[1, 0]].is_nan());
        let path2 = dir.path().join("again.csv");
        write_cohort_csv(&path2, &cohort, None).unwrap();
        let again: Cohort<f64> = read_cohort_csv(&path2).unwrap();
        assert_eq!(again.features[[0, 0]], 1.0);
        assert!(again.features[[0, 1]].is_nan());
    }

    fn fixture_paths(dir: &TempDir) -> TrajectoryPaths {
        TrajectoryPaths {
            trajectories: dir.path().join("long.csv"),
            boundaries: dir.path().join("bounds.csv"),
            outcomes: dir.path().join("outcomes.csv"),
        }
    }

    fn write_valid_fixture(paths: &TrajectoryPaths) {
        std::fs::write(
            &paths.boundaries,
            "patient_id,pre_start,pre_end,intra_start,intra_end,post_start,post_end\n\
             p1,0,10,10,20,20,30\n\
             p2,0,8,8,15,15,30\n\
             p3,0,5,,,5,30\n",
        )
        .unwrap();
        std::fs::write(
            &paths.trajectories,
            "patient_id,variable,timestamp,value\n\
             p1,hr,1.5,80\n\
             p1,hr,12,90\n\
             p1,spo2,2,97\n\
             p2,hr,3,70\n\
             p2,spo2,9,\n\
             p3,hr,1,75\n",
        )
        .unwrap();
        std::fs::write(
            &paths.outcomes,
            "patient_id,timestamp,label\n\
             p1,31,0\n\
             p1,32,1\n\
             p2,30,0\n\
             p3,33,0\n",
        )
        .unwrap();
    }

    #[test]
    fn valid_trajectory_fixture_loads_with_boundaries() {
        let dir = TempDir::new().unwrap();
        let paths = fixture_paths(&dir);
        write_valid_fixture(&paths);
        let cohort: TrajectoryCohort<f64> = read_trajectories(&paths).unwrap();
        assert_eq!(cohort.n_patients(), 3);
        assert_eq!(cohort.variable_names, vec!["hr".to_string(), "spo2".to_string()]);
        assert_eq!(cohort.patients[0].stages.intra, Some((10.0, 20.0)));
        assert_eq!(cohort.patients[2].stages.intra, None);
        assert_eq!(cohort.patients[1].series[1], vec![(9.0, None)]);
        assert_eq!(cohort.patients[0].outcomes.len(), 2);

        // round trip through the writers
        let dir2 = TempDir::new().unwrap();
        let paths2 = fixture_paths(&dir2);
        write_trajectories(&cohort, &paths2, Some("cafe")).unwrap();
        let again: TrajectoryCohort<f64> = read_trajectories(&paths2).unwrap();
        assert_eq!(cohort, again);
    }

    #[test]
    fn out_of_order_timestamps_are_rejected() {
        let dir = TempDir::new().unwrap();
        let paths = fixture_paths(&dir);
        write_valid_fixture(&paths);
        std::fs::write(
            &paths.trajectories,
            "patient_id,variable,timestamp,value\n\
             p1,hr,5,80\n\
             p1,hr,3,90\n",
        )
        .unwrap();
        let err = read_trajectories::<f64>(&paths).unwrap_err();
        match err {
            Error::Schema(s) => {
                assert_eq!(s.kind, SchemaErrorKind::UnsortedTimestamps);
                assert_eq!(s.line, 3);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn patient_without_outcomes_is_rejected() {
        let dir = TempDir::new().unwrap();
        let paths = fixture_paths(&dir);
        write_valid_fixture(&paths);
        std::fs::write(&paths.outcomes, "patient_id,timestamp,label\np1,31,1\np2,30,0\n").unwrap();
        let err = read_trajectories::<f64>(&paths).unwrap_err();
        match err {
            Error::Schema(s) => {
                assert_eq!(s.kind, SchemaErrorKind::DuplicateId);
                assert!(s.message.contains("p3"));
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn overlapping_outcome_timestamp_is_rejected() {
        let dir = TempDir::new().unwrap();
        let paths = fixture_paths(&dir);
        write_valid_fixture(&paths);
        std::fs::write(
            &paths.outcomes,
            "patient_id,timestamp,label\np1,25,1\np1,31,0\np2,30,0\np3,33,0\n",
        )
        .unwrap();
        let err = read_trajectories::<f64>(&paths).unwrap_err();
        assert!(matches!(
            err,
            Error::Schema(ref s) if s.kind == SchemaErrorKind::UnsortedTimestamps
        ));
    }

    #[test]
    fn boundary_order_violation_is_rejected() {
        let dir = TempDir::new().unwrap();
        let paths = fixture_paths(&dir);
        write_valid_fixture(&paths);
        std::fs::write(
            &paths.boundaries,
            "patient_id,pre_start,pre_end,intra_start,intra_end,post_start,post_end\n\
             p1,0,12,10,20,20,30\n",
        )
        .unwrap();
        std::fs::write(&paths.trajectories, "patient_id,variable,timestamp,value\np1,hr,1,80\n").unwrap();
        std::fs::write(&paths.outcomes, "patient_id,timestamp,label\np1,31,0\n").unwrap();
        let err = read_trajectories::<f64>(&paths).unwrap_err();
        assert!(matches!(
            err,
            Error::Schema(ref s) if s.kind == SchemaErrorKind::UnsortedTimestamps
        ));
    }

    #[test]
    fn design_matrix_from_fixture_has_expected_shape() {
        let dir = TempDir::new().unwrap();
        let paths = fixture_paths(&dir);
        write_valid_fixture(&paths);
        let cohort: TrajectoryCohort<f64> = read_trajectories(&paths).unwrap();
        let design = crate::temporal::build_design_matrix(&cohort, Stage::Pre, false, None).unwrap();
        assert_eq!(design.n_samples(), 3);
        assert_eq!(design.n_features(), 12);
        assert_eq!(design.labels, vec![1, 0, 0]);
    }

    #[test]
    fn statics_align_to_patient_order() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("statics.csv");
        std::fs::write(&path, "patient_id,age,asa\np2,81,3\np1,70,2\n").unwrap();
        let ids = vec!["p1".to_string(), "p2".to_string()];
        let st: StaticFeatures<f64> = read_statics_csv(&path, &ids).unwrap();
        assert_eq!(st.names, vec!["age".to_string(), "asa".to_string()]);
        assert_eq!(st.rows[0], vec![70.0, 2.0]);
        assert_eq!(st.rows[1], vec![81.0, 3.0]);
    }

    #[test]
    fn model_document_round_trips() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("model.json");
        let model = ModelDocument::Gbm(GbmModel::<f64> {
            trees: vec![],
            learning_rate: 0.1,
            base_margin: -0.3,
            feature_names: vec!["a".into()],
        });
        save_model(&path, &model).unwrap();
        let loaded: ModelDocument<f64> = load_model(&path).unwrap();
        assert_eq!(model, loaded);
    }
}
