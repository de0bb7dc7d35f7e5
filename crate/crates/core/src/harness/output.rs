use std::fs::File;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ExperimentConfig, PerEditRecord, ResultsRecord};
use crate::error::{Error, Result};

pub const CSV_HEADER: &str =
    "edit_id,method,beta,efficacy,generalization,specificity,edit_loss_final,loc_loss_final";

/// Suite-level fractions. A fraction with an empty denominator is reported
/// as 1.0 and flagged vacuous.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub n_edits: usize,
    pub efficacy: f64,
    pub generalization: f64,
    pub specificity: f64,
    pub efficacy_vacuous: bool,
    pub generalization_vacuous: bool,
    pub specificity_vacuous: bool,
}

fn mean(values: impl Iterator<Item = f64>, n: usize) -> f64 {
    if n == 0 {
        1.0
    } else {
        values.sum::<f64>() / n as f64
    }
}

pub fn aggregate(
    per_edit: &[PerEditRecord],
    paraphrase_count: usize,
    locality_count: usize,
) -> Aggregates {
    let n = per_edit.len();
    Aggregates {
        n_edits: n,
        efficacy: mean(per_edit.iter().map(|r| r.efficacy), n),
        generalization: mean(per_edit.iter().map(|r| r.generalization), n),
        specificity: mean(per_edit.iter().map(|r| r.specificity), n),
        efficacy_vacuous: n == 0,
        generalization_vacuous: n == 0 || paraphrase_count == 0,
        specificity_vacuous: n == 0 || locality_count == 0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub aggregates: Aggregates,
    pub config: ExperimentConfig,
}

fn summary_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("summary.json")
}

/// Writes the per-edit CSV at `csv_path` and the summary JSON next to it
/// (`results.csv` → `results.summary.json`). Returns the summary path.
pub fn emit_results(record: &ResultsRecord, csv_path: impl AsRef<Path>) -> Result<PathBuf> {
    let csv_path = csv_path.as_ref();
    let file = File::create(csv_path).map_err(|e| Error::io(csv_path, e))?;
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(file);
    writer.write_record(CSV_HEADER.split(','))?;
    for row in &record.per_edit {
        writer.serialize(row)?;
    }
    writer.flush().map_err(|e| Error::io(csv_path, e))?;

    let summary = Summary {
        aggregates: record.aggregates(),
        config: record.config.clone(),
    };
    let json_path = summary_path(csv_path);
    let text = serde_json::to_string_pretty(&summary)?;
    std::fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    Ok(json_path)
}

pub fn read_results_csv(path: impl AsRef<Path>) -> Result<Vec<PerEditRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let header: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    if header.join(",") != CSV_HEADER {
        return Err(Error::InvalidConfig(format!(
            "{}: unexpected header {:?}",
            path.display(),
            header.join(",")
        )));
    }
    reader
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

pub fn read_summary(path: impl AsRef<Path>) -> Result<Summary> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{run_experiment, Method};

    fn record(per_edit: Vec<PerEditRecord>) -> ResultsRecord {
        let config = ExperimentConfig::default();
        let agg = aggregate(&per_edit, config.paraphrase_count, config.locality_count);
        ResultsRecord {
            efficacy: agg.efficacy,
            generalization: agg.generalization,
            specificity: agg.specificity,
            per_edit,
            config,
        }
    }

    #[test]
    fn empty_record_writes_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let summary = emit_results(&record(Vec::new()), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, format!("{CSV_HEADER}\n"));
        let s = read_summary(summary).unwrap();
        assert!(s.aggregates.efficacy_vacuous && s.aggregates.specificity_vacuous);
    }

    #[test]
    fn one_edit_has_two_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let row = PerEditRecord {
            edit_id: 0,
            method: Method::Metake,
            beta: 0.1 + 0.2,
            efficacy: 1.0,
            generalization: 0.75,
            specificity: 1.0 / 3.0,
            edit_loss_final: 1e-300,
            loc_loss_final: 0.0,
        };
        emit_results(&record(vec![row.clone()]), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(read_results_csv(&path).unwrap(), vec![row]);
    }

    #[test]
    fn reaggregation_matches_summary() {
        let cfg = ExperimentConfig {
            n_edits: 7,
            geometry: crate::memory_model::GeometryConfig {
                d0: 8,
                d1: 8,
                vocab: 5,
                ..Default::default()
            },
            ..Default::default()
        };
        let rec = run_experiment(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let summary = read_summary(emit_results(&rec, &path).unwrap()).unwrap();
        let rows = read_results_csv(&path).unwrap();
        assert_eq!(rows, rec.per_edit);
        let again = aggregate(&rows, cfg.paraphrase_count, cfg.locality_count);
        assert!((again.efficacy - summary.aggregates.efficacy).abs() <= 1e-12);
        assert!((again.generalization - summary.aggregates.generalization).abs() <= 1e-12);
        assert!((again.specificity - summary.aggregates.specificity).abs() <= 1e-12);
        assert_eq!(summary.config, cfg);
    }

    #[test]
    fn unwritable_path_names_the_path() {
        let err = emit_results(&record(Vec::new()), "/nonexistent-dir/x/r.csv").unwrap_err();
        assert!(err.to_string().contains("/nonexistent-dir/x/r.csv"));
    }
}
