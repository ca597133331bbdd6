use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::Variant;
use crate::error::{CastleError, Result};

pub const REPORT_FILE: &str = "report.json";
pub const STAGES_FILE: &str = "stages.csv";
pub const TIMING_FILE: &str = "timing.json";
const STAGES_HEADER: &str = "stage,dev_cer,dev_wer,test_cer,test_wer";

/// Evaluation after one stage. `source` names the stages file row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub dev_cer: f64,
    pub dev_wer: f64,
    pub test_cer: f64,
    pub test_wer: f64,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineSummary {
    pub final_selected_fraction: f64,
    pub final_dev_cer: f64,
    pub max_blank_ratio: f64,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfflineRow {
    pub iteration: usize,
    pub gamma: f64,
    pub eta: f64,
    pub threshold: f64,
    pub decoded: usize,
    pub selected: usize,
    pub selected_cer: f64,
    pub source: String,
}

/// Everything a run reports except wall-clock times, which go to a separate
/// file so that reruns produce identical reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub variant: Variant,
    pub seed: u64,
    pub config_hash: String,
    pub stages: Vec<StageReport>,
    pub online: Option<OnlineSummary>,
    pub offline: Vec<OfflineRow>,
}

impl ExperimentReport {
    pub fn final_stage(&self) -> Option<&StageReport> {
        self.stages.last()
    }

    pub fn stage(&self, name: &str) -> Option<&StageReport> {
        self.stages.iter().find(|s| s.stage == name)
    }

    pub fn stages_csv(&self) -> String {
        let mut s = format!("{STAGES_HEADER}\n");
        for r in &self.stages {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.stage, r.dev_cer, r.dev_wer, r.test_cer, r.test_wer
            ));
        }
        s
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(REPORT_FILE);
        let text = fs::read_to_string(&path).map_err(|e| CastleError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| CastleError::format(&path, e.to_string()))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub stages: Vec<(String, f64)>,
}

impl Timing {
    pub fn push(&mut self, stage: &str, seconds: f64) {
        self.stages.push((stage.to_string(), seconds));
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CastleError::io(path, e))
}

pub(crate) fn write_run_files(dir: &Path, report: &ExperimentReport, timing: &Timing) -> Result<()> {
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    write(&dir.join(REPORT_FILE), &(json + "\n"))?;
    write(&dir.join(STAGES_FILE), &report.stages_csv())?;
    let json = serde_json::to_string_pretty(timing).expect("timing serializes");
    write(&dir.join(TIMING_FILE), &(json + "\n"))
}

/// Splits a log into one `x,value,source` series per column.
fn series(log: &Path, out: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
    let text = fs::read_to_string(log).map_err(|e| CastleError::io(log, e))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| CastleError::format(log, "empty log"))?
        .split(',')
        .collect();
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    if let Some(i) = rows.iter().position(|r| r.len() != header.len()) {
        return Err(CastleError::format(log, format!("row {}: wrong column count", i + 1)));
    }
    let name = log.file_name().and_then(|n| n.to_str()).unwrap_or("log");
    let mut written = Vec::new();
    for (c, col) in header.iter().enumerate().skip(1) {
        let mut s = format!("{},{col},source\n", header[0]);
        for (i, r) in rows.iter().enumerate() {
            s.push_str(&format!("{},{},{name}:{}\n", r[0], r[c], i + 1));
        }
        let path = out.join(format!("{prefix}_{col}.csv"));
        write(&path, &s)?;
        written.push(path);
    }
    Ok(written)
}

/// Writes summary tables and plot series for a run directory into
/// `run_dir/report`. Returns warnings about missing pieces; regenerating
/// from the same inputs gives the same files.
pub fn emit_report(run_dir: &Path) -> Result<Vec<String>> {
    if !run_dir.is_dir() {
        return Err(CastleError::Validation(format!("{} is not a run directory", run_dir.display())));
    }
    let out = run_dir.join("report");
    fs::create_dir_all(&out).map_err(|e| CastleError::io(&out, e))?;
    let mut warnings = Vec::new();
    if run_dir.join("castle.lock").exists() {
        warnings.push("run is locked and may still be in progress".to_string());
    }
    let report = match ExperimentReport::read(run_dir) {
        Ok(r) => Some(r),
        Err(CastleError::Io { .. }) => {
            warnings.push(format!("no {REPORT_FILE}; the run did not finish"));
            None
        }
        Err(e) => return Err(e),
    };
    if let Some(r) = &report {
        let mut s = "stage,dev_cer,dev_wer,test_cer,test_wer,source\n".to_string();
        for st in &r.stages {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                st.stage, st.dev_cer, st.dev_wer, st.test_cer, st.test_wer, st.source
            ));
        }
        write(&out.join("summary.csv"), &s)?;
    }
    let wants_offline = report
        .as_ref()
        .is_none_or(|r| matches!(r.variant, Variant::TwoStep | Variant::OfflineOnly));
    for (file, prefix, expected) in [("online_log.csv", "online", true), ("offline_log.csv", "offline", wants_offline)] {
        let log = run_dir.join(file);
        if log.exists() {
            series(&log, &out, prefix)?;
        } else if expected {
            warnings.push(format!("no {file}"));
        }
    }
    Ok(warnings)
}

/// One row per run: variant, strategies and final error rates.
pub fn emit_comparison(run_dirs: &[PathBuf], out: &Path) -> Result<()> {
    let mut s = "run,variant,online_strategy,filter_strategy,dev_cer,test_cer,test_wer,source\n".to_string();
    for dir in run_dirs {
        let report = ExperimentReport::read(dir)?;
        let cfg_path = dir.join("config.json");
        let text = fs::read_to_string(&cfg_path).map_err(|e| CastleError::io(&cfg_path, e))?;
        let cfg: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| CastleError::format(&cfg_path, e.to_string()))?;
        let field = |a: &str, b: &str| cfg[a][b].as_str().unwrap_or("").to_string();
        let last = report
            .final_stage()
            .ok_or_else(|| CastleError::format(dir.join(REPORT_FILE), "no stages"))?;
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}/{}\n",
            dir.file_name().and_then(|n| n.to_str()).unwrap_or(""),
            report.variant.as_str(),
            field("online", "strategy"),
            field("offline", "strategy"),
            last.dev_cer,
            last.test_cer,
            last.test_wer,
            dir.display(),
            last.source
        ));
    }
    write(out, &s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report() -> ExperimentReport {
        ExperimentReport {
            variant: Variant::OnlineOnly,
            seed: 3,
            config_hash: "ab".into(),
            stages: vec![StageReport {
                stage: "online".into(),
                dev_cer: 0.25,
                dev_wer: 0.5,
                test_cer: 0.3,
                test_wer: 0.6,
                source: "stages.csv:1".into(),
            }],
            online: None,
            offline: vec![],
        }
    }

    #[test]
    fn emit_is_idempotent_and_cites_rows() {
        let dir = tempfile::tempdir().unwrap();
        write_run_files(dir.path(), &report(), &Timing::default()).unwrap();
        fs::write(
            dir.path().join("online_log.csv"),
            "update,dev_cer,blank_ratio\n100,0.5,0.2\n200,0.4,0.3\n",
        )
        .unwrap();
        let w = emit_report(dir.path()).unwrap();
        assert!(w.is_empty(), "{w:?}");
        let first = fs::read_to_string(dir.path().join("report/online_dev_cer.csv")).unwrap();
        assert_eq!(first, "update,dev_cer,source\n100,0.5,online_log.csv:1\n200,0.4,online_log.csv:2\n");
        emit_report(dir.path()).unwrap();
        assert_eq!(fs::read_to_string(dir.path().join("report/online_dev_cer.csv")).unwrap(), first);
        let summary = fs::read_to_string(dir.path().join("report/summary.csv")).unwrap();
        assert!(summary.ends_with("online,0.25,0.5,0.3,0.6,stages.csv:1\n"));
    }

    #[test]
    fn incomplete_runs_produce_warnings() {
        let dir = tempfile::tempdir().unwrap();
        let w = emit_report(dir.path()).unwrap();
        assert_eq!(w.len(), 3, "{w:?}");
    }

    #[test]
    fn ragged_logs_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("online_log.csv"), "update,a\n1,2,3\n").unwrap();
        assert!(matches!(emit_report(dir.path()), Err(CastleError::Format { .. })));
    }
}
