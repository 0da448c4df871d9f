//! Run persistence, learning-curve aggregation and export.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::simulator::{ExperimentConfig, IterationReport, SeedRun};
use crate::ENGINE_VERSION;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub engine_version: String,
    pub seed: u64,
    /// Normalized config; `seeds` holds only this run's seed.
    pub config: ExperimentConfig,
    pub reports: Vec<IterationReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    /// Seeds that ran concurrently; timings are only comparable at 1.
    pub timing_parallelism: usize,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Content hash of the seed-free normalized config plus the seed.
pub fn run_id(cfg: &ExperimentConfig, seed: u64) -> Result<String> {
    let mut c = cfg.normalized();
    c.seeds.clear();
    let text = serde_json::to_string(&c).map_err(|e| Error::Serialization(e.to_string()))?;
    let mut h = Sha256::new();
    h.update(text.as_bytes());
    h.update(seed.to_le_bytes());
    Ok(hex(&h.finalize()[..12]))
}

impl RunRecord {
    pub fn new(cfg: &ExperimentConfig, run: SeedRun, timing_parallelism: usize) -> Result<Self> {
        let mut config = cfg.normalized();
        config.seeds = vec![run.seed];
        let mut reports = run.reports;
        reports.sort_by_key(|r| r.iteration);
        Ok(RunRecord {
            run_id: run_id(cfg, run.seed)?,
            engine_version: ENGINE_VERSION.to_string(),
            seed: run.seed,
            config,
            reports,
            failure: run.failure,
            timing_parallelism: timing_parallelism.max(1),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Serialization(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Serialization(e.to_string()))
    }

    fn seedless_config(&self) -> ExperimentConfig {
        let mut c = self.config.clone();
        c.seeds.clear();
        c
    }
}

/// Writes `<store>/<run_id>.json` through a temp file and rename.
pub fn persist_run(record: &RunRecord, store: &Path) -> Result<String> {
    fs::create_dir_all(store).map_err(|e| Error::io(store, e))?;
    let target = store.join(format!("{}.json", record.run_id));
    let tmp = store.join(format!(".{}.{}.tmp", record.run_id, std::process::id()));
    let json = record.to_json()?;
    fs::write(&tmp, json).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, &target).map_err(|e| Error::io(&target, e))?;
    Ok(record.run_id.clone())
}

pub fn load_run(path: &Path) -> Result<RunRecord> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RunRecord::from_json(&text)
}

/// Every record in a store directory, ordered by seed then run id.
pub fn load_store(store: &Path) -> Result<Vec<RunRecord>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(store)
        .map_err(|e| Error::io(store, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "json")
                && !p.file_name().is_some_and(|n| n.to_string_lossy().starts_with('.'))
        })
        .collect();
    paths.sort();
    let mut out = paths.iter().map(|p| load_run(p)).collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| a.seed.cmp(&b.seed).then_with(|| a.run_id.cmp(&b.run_id)));
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: usize,
    pub labeled_fraction: f64,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub mean_train_s: f64,
    pub mean_inference_s: f64,
    pub mean_overall_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    pub metric_name: String,
    pub seeds: Vec<u64>,
    pub seed_count: usize,
    pub points: Vec<CurvePoint>,
    /// Seeds whose runs recorded a failure and were left out.
    #[serde(default)]
    pub failed_seeds: Vec<u64>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation, 0 for a single value.
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Mean and sample std per iteration over the seeds of one config.
pub fn summarize(records: &[RunRecord]) -> Result<CurveSummary> {
    let Some(first) = records.first() else {
        return Err(Error::invalid("nothing to summarize"));
    };
    let reference = first.seedless_config();
    if let Some(r) = records.iter().find(|r| r.seedless_config() != reference) {
        return Err(Error::invalid(format!(
            "run {} (seed {}) has a different config than run {}",
            r.run_id, r.seed, first.run_id
        )));
    }
    let mut ok: Vec<&RunRecord> = records.iter().filter(|r| r.failure.is_none()).collect();
    let failed_seeds: Vec<u64> = records.iter().filter(|r| r.failure.is_some()).map(|r| r.seed).collect();
    if !failed_seeds.is_empty() {
        log::warn!("leaving out failed seeds {failed_seeds:?}");
    }
    if ok.is_empty() {
        return Err(Error::invalid("every run failed"));
    }
    ok.sort_by_key(|r| r.seed);
    let len = ok.iter().map(|r| r.reports.len()).min().unwrap_or(0);
    if ok.iter().any(|r| r.reports.len() != len) {
        log::warn!("runs differ in length; truncating to {len} iterations");
    }
    let points = (0..len)
        .map(|i| {
            let col = |f: fn(&IterationReport) -> f64| -> Vec<f64> { ok.iter().map(|r| f(&r.reports[i])).collect() };
            let values = col(|r| r.metric);
            CurvePoint {
                iteration: ok[0].reports[i].iteration,
                labeled_fraction: mean(&col(|r| r.labeled_fraction)),
                mean: mean(&values),
                std: sample_std(&values),
                min: values.iter().copied().fold(f64::INFINITY, f64::min),
                max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                mean_train_s: mean(&col(|r| r.train_s)),
                mean_inference_s: mean(&col(|r| r.inference_s)),
                mean_overall_s: mean(&col(|r| r.overall_s)),
            }
        })
        .collect();
    Ok(CurveSummary {
        metric_name: ok[0].config.resolved_task().metric_name().to_string(),
        seeds: ok.iter().map(|r| r.seed).collect(),
        seed_count: ok.len(),
        points,
        failed_seeds,
    })
}

pub const CSV_COLUMNS: [&str; 10] = [
    "run_id",
    "seed",
    "iteration",
    "labeled_fraction",
    "metric_name",
    "value",
    "train_s",
    "inference_s",
    "overall_s",
    "rescored_count",
];

/// One row per record and iteration.
pub fn write_csv(records: &[RunRecord], w: impl Write) -> Result<()> {
    let ser = |e: csv::Error| Error::Serialization(e.to_string());
    let mut out = csv::Writer::from_writer(w);
    out.write_record(CSV_COLUMNS).map_err(ser)?;
    for r in records {
        for it in &r.reports {
            out.write_record([
                r.run_id.clone(),
                r.seed.to_string(),
                it.iteration.to_string(),
                it.labeled_fraction.to_string(),
                it.metric_name.clone(),
                it.metric.to_string(),
                it.train_s.to_string(),
                it.inference_s.to_string(),
                it.overall_s.to_string(),
                it.rescored_count.to_string(),
            ])
            .map_err(ser)?;
        }
    }
    out.flush().map_err(|e| Error::Serialization(e.to_string()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JsonExport {
    pub summary: CurveSummary,
    pub records: Vec<RunRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    Json,
}

impl ExportFormat {
    /// Picks the format from a file extension.
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => Ok(ExportFormat::Csv),
            Some("json") => Ok(ExportFormat::Json),
            _ => Err(Error::invalid(format!("{}: expected a .csv or .json file", path.display()))),
        }
    }
}

/// Summarizes `records` and writes them to `path` atomically.
pub fn export(records: &[RunRecord], format: ExportFormat, path: &Path) -> Result<CurveSummary> {
    let summary = summarize(records)?;
    let mut buf = Vec::new();
    match format {
        ExportFormat::Csv => write_csv(records, &mut buf)?,
        ExportFormat::Json => {
            let doc = JsonExport {
                summary: summary.clone(),
                records: records.to_vec(),
            };
            serde_json::to_writer_pretty(&mut buf, &doc).map_err(|e| Error::Serialization(e.to_string()))?;
        }
    }
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    fs::write(&tmp, buf).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(summary)
}

pub fn import_json(path: &Path) -> Result<JsonExport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Serialization(format!("{}: {e}", path.display())))
}

/// Plain-text table of a summary.
pub fn format_summary(s: &CurveSummary) -> String {
    let mut out = format!(
        "{} over {} seed(s)\niteration  labeled  mean      std       overall_s\n",
        s.metric_name, s.seed_count
    );
    for p in &s.points {
        out.push_str(&format!(
            "{:>9}  {:>7.4}  {:.6}  {:.6}  {:.3}\n",
            p.iteration, p.labeled_fraction, p.mean, p.std, p.mean_overall_s
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn report(iteration: usize, metric: f64) -> IterationReport {
        IterationReport {
            iteration,
            labeled_count: 10 * iteration,
            labeled_tokens: 100 * iteration,
            labeled_fraction: 0.01 * iteration as f64,
            query_size: 10,
            query_digest: "d".into(),
            rescored_count: 500,
            pool_size: 900,
            full_pass: true,
            metric_name: "accuracy".into(),
            metric,
            train_s: 0.5,
            inference_s: 0.25,
            overall_s: 0.75,
            successor_s: 0.1,
        }
    }

    fn record(seed: u64, metrics: &[f64]) -> RunRecord {
        let run = SeedRun {
            seed,
            reports: metrics.iter().enumerate().map(|(i, &m)| report(i + 1, m)).collect(),
            failure: None,
        };
        RunRecord::new(&ExperimentConfig::default(), run, 1).unwrap()
    }

    #[test]
    fn persist_round_trip_and_idempotence() {
        let dir = tempfile::tempdir().unwrap();
        let r = record(0, &[0.5, 0.6]);
        let id = persist_run(&r, dir.path()).unwrap();
        persist_run(&r, dir.path()).unwrap();
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
        assert_eq!(load_run(&dir.path().join(format!("{id}.json"))).unwrap(), r);
        assert_eq!(load_store(dir.path()).unwrap(), vec![r.clone()]);
        let again = RunRecord::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(run_id(&again.config, again.seed).unwrap(), r.run_id);
        assert_ne!(record(1, &[0.5]).run_id, r.run_id);
        assert!(persist_run(&r, &dir.path().join(format!("{id}.json"))).is_err());
    }

    #[test]
    fn run_id_ignores_seed_list_and_spelled_out_defaults() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig {
            seeds: vec![7],
            ..a.normalized()
        };
        assert_eq!(run_id(&a, 7).unwrap(), run_id(&b, 7).unwrap());
        let c = ExperimentConfig {
            iterations: 3,
            ..a.clone()
        };
        assert_ne!(run_id(&a, 7).unwrap(), run_id(&c, 7).unwrap());
    }

    #[test]
    fn mean_and_sample_std() {
        let s = summarize(&[record(0, &[0.8]), record(1, &[0.9])]).unwrap();
        assert!((s.points[0].mean - 0.85).abs() < 1e-12);
        // sqrt(((0.05)^2 * 2) / 1)
        assert!((s.points[0].std - 0.005f64.sqrt()).abs() < 1e-12);
        let one = summarize(&[record(0, &[0.8, 0.9])]).unwrap();
        assert!(one.points.iter().all(|p| p.std == 0.0));
        assert_eq!(one.seed_count, 1);
    }

    #[test]
    fn summarize_truncates_rejects_mixed_and_skips_failures() {
        let s = summarize(&[record(0, &[0.1, 0.2, 0.3]), record(1, &[0.1, 0.2])]).unwrap();
        assert_eq!(s.points.len(), 2);

        let mut other = record(2, &[0.1]);
        other.config.iterations = 3;
        assert!(summarize(&[record(0, &[0.1]), other]).is_err());
        assert!(summarize(&[]).is_err());

        let mut failed = record(3, &[0.1]);
        failed.failure = Some("boom".into());
        let s = summarize(&[record(0, &[0.1, 0.2]), failed.clone()]).unwrap();
        assert_eq!(s.failed_seeds, vec![3]);
        assert_eq!(s.points.len(), 2);
        assert!(summarize(&[failed]).is_err());
    }

    #[test]
    fn csv_rows_and_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let recs: Vec<RunRecord> = (0..3).map(|s| record(s, &[0.5, 0.625, 0.75, 0.875])).collect();
        let csv_path = dir.path().join("out.csv");
        export(&recs, ExportFormat::from_path(&csv_path).unwrap(), &csv_path).unwrap();
        let text = fs::read_to_string(&csv_path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), CSV_COLUMNS.join(","));
        let rows: Vec<&str> = lines.collect();
        assert_eq!(rows.len(), 12);
        let fields: Vec<&str> = rows[1].split(',').collect();
        assert_eq!(fields[5], "0.625");
        assert_eq!(fields[3].parse::<f64>().unwrap(), 0.02);

        let json_path = dir.path().join("out.json");
        let summary = export(&recs, ExportFormat::Json, &json_path).unwrap();
        let back = import_json(&json_path).unwrap();
        assert_eq!(back.records, recs);
        assert_eq!(back.summary, summary);
        assert!(ExportFormat::from_path(Path::new("x.txt")).is_err());
    }

    proptest! {
        #[test]
        fn summary_is_permutation_invariant(
            values in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 3), 1..6),
            rot in 0usize..6,
        ) {
            let recs: Vec<RunRecord> = values.iter().enumerate().map(|(s, v)| record(s as u64, v)).collect();
            let mut shuffled = recs.clone();
            let k = rot % shuffled.len();
            shuffled.rotate_left(k);
            shuffled.reverse();
            let a = summarize(&recs).unwrap();
            let b = summarize(&shuffled).unwrap();
            prop_assert_eq!(&a, &b);
            for p in &a.points {
                prop_assert!(p.std >= 0.0);
                prop_assert!(p.min - 1e-12 <= p.mean && p.mean <= p.max + 1e-12);
            }
        }
    }
}
