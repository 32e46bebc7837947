//! Turns a resolved [`RunConfig`] into output files.
//!
//! Every artifact is built in memory first, so the same bytes can be written
//! to disk or compared across invocations. Artifacts are pure functions of
//! the configuration.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::harness::{ArmSummary, Experiment, SweepParam, SweepTable};
use crate::telemetry::{format_float, write_steps_csv};
use crate::weights_file;

pub const REPORT_SCHEMA: &str = "report/v1";
pub const SWEEP_SCHEMA: &str = "sweep/v1";

/// Named output files plus a short human-readable summary.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifacts {
    pub files: Vec<(String, Vec<u8>)>,
    pub summary: String,
}

impl Artifacts {
    pub fn file(&self, name: &str) -> Option<&[u8]> {
        self.files.iter().find(|(n, _)| n == name).map(|(_, b)| b.as_slice())
    }

    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (name, bytes) in &self.files {
            fs::write(dir.join(name), bytes)?;
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct Report<'a, T: Serialize> {
    schema: &'static str,
    command: &'static str,
    config: BTreeMap<&'static str, String>,
    result: &'a T,
}

#[derive(Serialize)]
struct EpisodeRecord {
    index: usize,
    true_class: usize,
    biased_class: usize,
    tokens: Vec<usize>,
    content_steps: usize,
    hallucinations: usize,
    triggers: usize,
    total_forwards: usize,
}

#[derive(Serialize)]
struct RunResult<'a> {
    summary: &'a ArmSummary,
    episodes: Vec<EpisodeRecord>,
}

fn report_bytes<T: Serialize>(cfg: &RunConfig, command: &'static str, result: &T) -> Result<Vec<u8>> {
    let report = Report {
        schema: REPORT_SCHEMA,
        command,
        config: cfg.entries().into_iter().collect(),
        result,
    };
    let mut bytes = serde_json::to_vec_pretty(&report).map_err(|e| Error::Argument(format!("report: {e}")))?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Planted experiment for `cfg`, with weights from `cfg.weights` when set.
pub fn experiment(cfg: &RunConfig) -> Result<Experiment> {
    let exp = Experiment::new(&cfg.spec, cfg.jobs)?;
    match &cfg.weights {
        Some(path) => exp.with_weights(weights_file::load(path)?),
        None => Ok(exp),
    }
}

fn common_files(cfg: &RunConfig, exp: &Experiment) -> Result<Vec<(String, Vec<u8>)>> {
    let mut files = vec![("config.txt".to_string(), cfg.to_text().into_bytes())];
    if cfg.emit_weights {
        files.push(("weights.cgvw".to_string(), weights_file::to_bytes(&exp.weights)?));
    }
    Ok(files)
}

fn steps_csv(summary: &ArmSummary) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    write_steps_csv(&mut bytes, summary.reports.iter().flat_map(|r| &r.steps))?;
    Ok(bytes)
}

fn arm_line(a: &ArmSummary) -> String {
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
    format!(
        "{:<13} hallucination {:.4}  trigger {:.4}  distinct2 {:.4}  hdi {} -> {}  ratio {} -> {}\n",
        a.arm.name(),
        a.hallucination_rate,
        a.trigger_rate,
        a.distinct2,
        opt(a.triggered_hdi_pre),
        opt(a.triggered_hdi_post),
        opt(a.triggered_ratio_pre),
        opt(a.triggered_ratio_post),
    )
}

/// One arm over all episodes.
pub fn run(cfg: &RunConfig) -> Result<Artifacts> {
    let exp = experiment(cfg)?;
    let summary = exp.run_arm(&cfg.policy, cfg.arm)?;
    let mut files = common_files(cfg, &exp)?;
    if cfg.emit_traces {
        files.push(("steps.csv".to_string(), steps_csv(&summary)?));
    }
    if cfg.emit_report {
        let episodes = exp
            .episodes
            .iter()
            .zip(&summary.reports)
            .map(|(ep, r)| EpisodeRecord {
                index: ep.index,
                true_class: ep.truth.true_class,
                biased_class: ep.truth.biased_class,
                tokens: r.tokens.clone(),
                content_steps: r.grounded.len(),
                hallucinations: r.hallucinations(),
                triggers: r.triggers(),
                total_forwards: r.total_forwards,
            })
            .collect();
        let result = RunResult {
            summary: &summary,
            episodes,
        };
        files.push(("report.json".to_string(), report_bytes(cfg, "run", &result)?));
    }
    Ok(Artifacts {
        files,
        summary: arm_line(&summary),
    })
}

/// All five arms on shared episodes.
pub fn compare(cfg: &RunConfig) -> Result<Artifacts> {
    let exp = experiment(cfg)?;
    let cmp = exp.run_comparison(&cfg.policy)?;
    let mut files = common_files(cfg, &exp)?;
    if cfg.emit_traces {
        for a in &cmp.arms {
            files.push((format!("steps_{}.csv", a.arm.name()), steps_csv(a)?));
        }
    }
    if cfg.emit_report {
        files.push(("report.json".to_string(), report_bytes(cfg, "compare", &cmp.arms)?));
    }
    Ok(Artifacts {
        files,
        summary: cmp.arms.iter().map(arm_line).collect(),
    })
}

/// Guided arm across a parameter grid, against one baseline.
pub fn sweep(cfg: &RunConfig, param: SweepParam, grid: &[String]) -> Result<Artifacts> {
    let exp = experiment(cfg)?;
    let table = exp.sweep(&cfg.policy, param, grid)?;
    let mut files = common_files(cfg, &exp)?;
    let csv = sweep_csv(&table);
    if cfg.emit_traces {
        files.push(("sweep.csv".to_string(), csv.clone().into_bytes()));
    }
    if cfg.emit_report {
        files.push(("report.json".to_string(), report_bytes(cfg, "sweep", &table)?));
    }
    Ok(Artifacts { files, summary: csv })
}

pub fn sweep_csv(table: &SweepTable) -> String {
    let mut out = format!(
        "#schema={SWEEP_SCHEMA}\n#baseline_hallucination_rate={}\n#baseline_distinct2={}\n{},hallucination_rate,reduction,trigger_rate,distinct2\n",
        format_float(table.baseline_hallucination_rate),
        format_float(table.baseline_distinct2),
        table.param
    );
    for r in &table.rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.value,
            format_float(r.hallucination_rate),
            format_float(r.reduction),
            format_float(r.trigger_rate),
            format_float(r.distinct2)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.set("episodes", "4").unwrap();
        cfg.set("emit_weights", "true").unwrap();
        cfg
    }

    #[test]
    fn run_emits_requested_files() {
        let a = run(&small()).unwrap();
        let names: Vec<&str> = a.files.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["config.txt", "weights.cgvw", "steps.csv", "report.json"]);
        let csv = std::str::from_utf8(a.file("steps.csv").unwrap()).unwrap();
        // Header lines plus 24 steps per episode.
        assert_eq!(csv.lines().count(), 2 + 4 * 24);
        let report: serde_json::Value = serde_json::from_slice(a.file("report.json").unwrap()).unwrap();
        assert_eq!(report["schema"], REPORT_SCHEMA);
        assert_eq!(report["result"]["episodes"].as_array().unwrap().len(), 4);
    }

    #[test]
    fn emit_flags_suppress_files() {
        let mut cfg = small();
        cfg.set("emit_traces", "false").unwrap();
        cfg.set("emit_report", "false").unwrap();
        cfg.set("emit_weights", "false").unwrap();
        let a = run(&cfg).unwrap();
        assert_eq!(a.files.len(), 1);
    }

    #[test]
    fn sweep_table_rows() {
        let mut cfg = small();
        cfg.set("episodes", "2").unwrap();
        let a = sweep(&cfg, SweepParam::Kappa, &["1".into(), "inf".into()]).unwrap();
        let csv = std::str::from_utf8(a.file("sweep.csv").unwrap()).unwrap();
        let rows: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(rows.len(), 3);
        assert!(rows[2].starts_with("inf,"));
    }
}
