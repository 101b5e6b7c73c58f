//! Experiment reports: per-image rows, per-condition aggregates and verdicts
//! that are pure functions of the rows.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::image::{contact_sheet, Image};
use crate::metrics::{summarize, Summary};

use super::provenance::{write_sidecar, Provenance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    SeedVariation,
    GammaAblation,
    CfgSweep,
    EncoderSwap,
    MainBenchmark,
    OutOfContext,
    PriorDrift,
    Multipass,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 8] = [
        Self::SeedVariation,
        Self::GammaAblation,
        Self::CfgSweep,
        Self::EncoderSwap,
        Self::MainBenchmark,
        Self::OutOfContext,
        Self::PriorDrift,
        Self::Multipass,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::SeedVariation => "seed-variation",
            Self::GammaAblation => "gamma-ablation",
            Self::CfgSweep => "cfg-sweep",
            Self::EncoderSwap => "encoder-swap",
            Self::MainBenchmark => "main-benchmark",
            Self::OutOfContext => "out-of-context",
            Self::PriorDrift => "prior-drift",
            Self::Multipass => "multipass",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    /// Verdicts derived from the recorded rows alone.
    pub fn verdicts(self, rows: &[ReportRow]) -> Vec<Verdict> {
        match self {
            Self::SeedVariation => super::experiments::seed_variation_verdicts(rows),
            Self::GammaAblation => super::experiments::gamma_verdicts(rows),
            Self::CfgSweep => super::experiments::cfg_verdicts(rows),
            Self::EncoderSwap => super::experiments::encoder_swap_verdicts(rows),
            Self::MainBenchmark => super::experiments::main_benchmark_verdicts(rows),
            Self::OutOfContext => super::experiments::out_of_context_verdicts(rows),
            Self::PriorDrift => super::experiments::prior_drift_verdicts(rows),
            Self::Multipass => super::experiments::multipass_verdicts(rows),
        }
    }
}

/// One image under one condition. Metric fields absent for a condition stay
/// `None`; `value` carries an experiment-specific per-image statistic and
/// `x` the condition's numeric parameter (gamma, w, pass index).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub condition: String,
    pub x: Option<f64>,
    pub probe: usize,
    pub label: u32,
    pub psnr_db: Option<f64>,
    pub ssim: Option<f64>,
    pub id_sim: Option<f64>,
    pub value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionAggregate {
    pub condition: String,
    pub x: Option<f64>,
    pub psnr_db: Option<Summary>,
    pub ssim: Option<Summary>,
    pub id_sim: Option<Summary>,
    pub value: Option<Summary>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Pass,
    Fail,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub name: String,
    /// Human-readable rule, e.g. `"win_rate >= 0.7"`.
    pub rule: String,
    pub statistic: Option<f64>,
    pub outcome: Outcome,
}

impl Verdict {
    pub fn check(name: &str, rule: &str, statistic: f64, ok: bool) -> Self {
        Self {
            name: name.to_string(),
            rule: rule.to_string(),
            statistic: Some(statistic).filter(|s| s.is_finite()),
            outcome: if ok && statistic.is_finite() { Outcome::Pass } else { Outcome::Fail },
        }
    }

    pub fn skipped(name: &str, rule: &str) -> Self {
        Self {
            name: name.to_string(),
            rule: rule.to_string(),
            statistic: None,
            outcome: Outcome::Skipped,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: ExperimentKind,
    pub conditions: Vec<ConditionAggregate>,
    pub rows: Vec<ReportRow>,
    pub verdicts: Vec<Verdict>,
    pub wall_ms: f64,
    pub provenance: Option<Provenance>,
}

/// Condition names in first-appearance order.
pub fn condition_order(rows: &[ReportRow]) -> Vec<(String, Option<f64>)> {
    let mut out: Vec<(String, Option<f64>)> = Vec::new();
    for r in rows {
        if !out.iter().any(|(c, _)| c == &r.condition) {
            out.push((r.condition.clone(), r.x));
        }
    }
    out
}

/// Rows of one condition, in probe order.
pub fn rows_of<'a>(rows: &'a [ReportRow], condition: &str) -> Vec<&'a ReportRow> {
    let mut v: Vec<&ReportRow> = rows.iter().filter(|r| r.condition == condition).collect();
    v.sort_by_key(|r| r.probe);
    v
}

fn summary_of(rows: &[&ReportRow], f: impl Fn(&ReportRow) -> Option<f64>) -> Option<Summary> {
    let v: Vec<f64> = rows.iter().filter_map(|r| f(r)).collect();
    (!v.is_empty()).then(|| summarize(&v))
}

pub fn aggregate(rows: &[ReportRow]) -> Vec<ConditionAggregate> {
    condition_order(rows)
        .into_iter()
        .map(|(condition, x)| {
            let rs = rows_of(rows, &condition);
            ConditionAggregate {
                psnr_db: summary_of(&rs, |r| r.psnr_db),
                ssim: summary_of(&rs, |r| r.ssim),
                id_sim: summary_of(&rs, |r| r.id_sim),
                value: summary_of(&rs, |r| r.value),
                condition,
                x,
            }
        })
        .collect()
}

impl ExperimentReport {
    pub fn from_rows(experiment: ExperimentKind, rows: Vec<ReportRow>, wall_ms: f64) -> Self {
        Self {
            experiment,
            conditions: aggregate(&rows),
            verdicts: experiment.verdicts(&rows),
            rows,
            wall_ms,
            provenance: None,
        }
    }

    /// Verdicts recomputed from the stored rows.
    pub fn recompute_verdicts(&self) -> Vec<Verdict> {
        self.experiment.verdicts(&self.rows)
    }

    pub fn verdict(&self, name: &str) -> Option<&Verdict> {
        self.verdicts.iter().find(|v| v.name == name)
    }

    /// True when no verdict failed.
    pub fn passed(&self) -> bool {
        self.verdicts.iter().all(|v| v.outcome != Outcome::Fail)
    }

    pub fn condition(&self, name: &str) -> Option<&ConditionAggregate> {
        self.conditions.iter().find(|c| c.condition == name)
    }

    /// Per-condition column of one metric, in probe order.
    pub fn column(&self, condition: &str, f: impl Fn(&ReportRow) -> Option<f64>) -> Vec<f64> {
        rows_of(&self.rows, condition).into_iter().filter_map(f).collect()
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        let mut s = String::from("condition,x,probe,label,psnr_db,ssim,id_sim,value\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.condition,
                opt(r.x),
                r.probe,
                r.label,
                opt(r.psnr_db),
                opt(r.ssim),
                opt(r.id_sim),
                opt(r.value)
            ));
        }
        s
    }

    /// Writes `report.json`, `rows.csv` and, when given, `sheet.png` into
    /// `dir`, each with a provenance sidecar. Returns the written paths.
    pub fn write(&self, dir: impl AsRef<Path>, sheet: Option<&[Vec<Image>]>) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut paths = vec![dir.join("report.json"), dir.join("rows.csv")];
        std::fs::write(&paths[0], serde_json::to_string_pretty(self)?)?;
        std::fs::write(&paths[1], self.to_csv())?;
        if let Some(rows) = sheet.filter(|r| !r.is_empty()) {
            let p = dir.join("sheet.png");
            contact_sheet(rows)?.save_png(&p)?;
            paths.push(p);
        }
        if let Some(prov) = &self.provenance {
            for p in &paths {
                write_sidecar(p, prov)?;
            }
        }
        Ok(paths)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    /// One line per verdict, for logs and test output.
    pub fn summary_lines(&self) -> Vec<String> {
        self.verdicts
            .iter()
            .map(|v| {
                let stat = v.statistic.map(|s| format!("{s:.4}")).unwrap_or_else(|| "-".into());
                format!("{} {}: {:?} ({} ; statistic {stat})", self.experiment.name(), v.name, v.outcome, v.rule)
            })
            .collect()
    }
}

/// Average ranks (1-based), ties sharing their mean rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation; `None` with fewer than two points or a
/// constant series.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Mean of a metric per condition, keyed by condition name.
pub fn condition_means(rows: &[ReportRow], f: impl Fn(&ReportRow) -> Option<f64>) -> BTreeMap<String, f64> {
    condition_order(rows)
        .into_iter()
        .filter_map(|(c, _)| {
            let v: Vec<f64> = rows_of(rows, &c).into_iter().filter_map(&f).collect();
            (!v.is_empty()).then(|| (c, v.iter().sum::<f64>() / v.len() as f64))
        })
        .collect()
}
