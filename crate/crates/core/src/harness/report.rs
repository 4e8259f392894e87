//! Per-replication records, Monte Carlo summaries and their CSV files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::run::{hypotheses, target_indices, Design, ResolvedDgp};
use crate::error::{Result, SlimError};
use crate::inference::{Hypothesis, InferenceResult};
use crate::jtest::{JTestResult, JVariant};
use crate::model::easi::POLY_ORDER;
use crate::model::EasiLayout;

/// Expenditure grid of the Engel-curve error.
pub const RIMSE_LO: f64 = -0.7;
pub const RIMSE_HI: f64 = 0.9;
pub const RIMSE_STEP: f64 = 0.1;

/// Wall-clock seconds per stage of one replication.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub warm_start: f64,
    pub tuning: f64,
    pub first_order: f64,
    pub operators: f64,
    pub refinement: f64,
    pub comparator: f64,
    pub inference: f64,
    pub oracle: f64,
    pub total: f64,
}

impl StageTiming {
    pub fn stage_sum(&self) -> f64 {
        self.warm_start
            + self.tuning
            + self.first_order
            + self.operators
            + self.refinement
            + self.comparator
            + self.inference
            + self.oracle
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestRecord {
    pub hypothesis: String,
    pub method: String,
    pub ell: usize,
    pub statistic: f64,
    pub critical_value: f64,
    pub reject: bool,
    pub ci: Option<(f64, f64)>,
}

impl TestRecord {
    pub fn new(name: &str, method: &str, h: &Hypothesis<f64>, res: &InferenceResult) -> Self {
        Self {
            hypothesis: name.to_string(),
            method: method.to_string(),
            ell: h.rank(),
            statistic: res.statistic,
            critical_value: res.critical_value,
            reject: res.reject,
            ci: res.ci,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JRecord {
    pub variant: JVariant,
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
    pub reject: bool,
}

impl JRecord {
    pub fn new(res: &JTestResult, alpha: f64) -> Self {
        Self {
            variant: res.variant,
            statistic: res.statistic,
            df: res.df,
            p_value: res.p_value,
            reject: res.reject(alpha),
        }
    }
}

/// Everything one replication reports.
#[derive(Debug, Clone, PartialEq)]
pub struct RepRecord {
    pub rep: usize,
    pub diverged: bool,
    pub gamma0: f64,
    pub warm_start_updates: usize,
    /// Final estimate of the configured pipeline.
    pub estimate: Vec<f64>,
    /// `θ̄_N`.
    pub first_stage: Vec<f64>,
    /// Equal-budget first-order estimate at `T`.
    pub comparator: Option<Vec<f64>>,
    /// Two-step full-sample GMM.
    pub oracle: Option<Vec<f64>>,
    pub tests: Vec<TestRecord>,
    pub jtests: Vec<JRecord>,
    pub timing: StageTiming,
}

impl RepRecord {
    pub fn diverged(rep: usize) -> Self {
        Self {
            rep,
            diverged: true,
            gamma0: f64::NAN,
            warm_start_updates: 0,
            estimate: Vec::new(),
            first_stage: Vec::new(),
            comparator: None,
            oracle: None,
            tests: Vec::new(),
            jtests: Vec::new(),
            timing: StageTiming::default(),
        }
    }

    /// Named estimates present in this record.
    pub fn estimators(&self, refines: bool) -> Vec<(&'static str, &[f64])> {
        let mut out = vec![("slim", self.estimate.as_slice())];
        if refines {
            out.push(("first_stage", self.first_stage.as_slice()));
        }
        if let Some(c) = &self.comparator {
            out.push(("first_order", c.as_slice()));
        }
        if let Some(o) = &self.oracle {
            out.push(("oracle", o.as_slice()));
        }
        out
    }
}

/// Engel curve `Σ_r b_{r,j} x^r` of equation `j` under coefficients `theta`.
pub fn engel_curve(layout: &EasiLayout, theta: &[f64], j: usize, x: f64) -> f64 {
    (0..=POLY_ORDER).rev().fold(0.0, |acc, r| acc * x + theta[layout.b(r, j)])
}

fn grid(lo: f64, hi: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && hi > lo) {
        return Err(SlimError::config("RIMSE grid needs step > 0 and hi > lo"));
    }
    let cells = ((hi - lo) / step).round();
    if ((hi - lo) - cells * step).abs() > 1e-9 * step.max(1.0) {
        return Err(SlimError::config("RIMSE step must divide the interval"));
    }
    Ok((0..cells as usize).map(|k| lo + (k as f64 + 0.5) * step).collect())
}

/// `(Σ_j ∫ mean_rep (ĉ_j(x) − c_j(x))² dx)^{1/2}` with midpoint cells of
/// width `step` on `[lo, hi]`.
pub fn rimse(
    layout: &EasiLayout,
    estimates: &[&[f64]],
    truth: &[f64],
    lo: f64,
    hi: f64,
    step: f64,
) -> Result<f64> {
    if estimates.is_empty() {
        return Err(SlimError::Experiment("RIMSE needs at least one replication".into()));
    }
    let dim = layout.dim_theta();
    if truth.len() != dim || estimates.iter().any(|e| e.len() != dim) {
        return Err(SlimError::dimension("EASI coefficient vector", dim, truth.len()));
    }
    let mids = grid(lo, hi, step)?;
    let reps = estimates.len() as f64;
    let mut total = 0.0;
    for j in 0..layout.m {
        for &x in &mids {
            let c = engel_curve(layout, truth, j, x);
            let mse = estimates
                .iter()
                .map(|e| (engel_curve(layout, e, j, x) - c).powi(2))
                .sum::<f64>()
                / reps;
            total += step * mse;
        }
    }
    Ok(total.sqrt())
}

/// One line of `summary.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub target: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct McReport {
    pub summary: Vec<SummaryRow>,
    pub records: Vec<RepRecord>,
    /// Per-replication RIMSE of each estimator (EASI only).
    pub rep_rimse: Vec<Vec<(String, f64)>>,
    /// Column names of `reps.csv`.
    pub rep_header: Vec<String>,
    pub rep_rows: Vec<Vec<String>>,
    pub wall_clock: f64,
}

impl McReport {
    pub fn value(&self, method: &str, target: &str, metric: &str) -> Option<f64> {
        self.summary
            .iter()
            .find(|r| r.method == method && r.target == target && r.metric == metric)
            .map(|r| r.value)
    }

    /// Per-replication RIMSE of `method`, `None` for diverged replications.
    pub fn rimse_by_rep(&self, method: &str) -> Vec<Option<f64>> {
        self.rep_rimse
            .iter()
            .map(|r| r.iter().find(|(m, _)| m == method).map(|(_, v)| *v))
            .collect()
    }

    /// Writes `summary.csv`, `reps.csv` and `timing.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_summary(dir.join("summary.csv"), &self.summary)?;
        let mut w = csv::Writer::from_path(dir.join("reps.csv"))?;
        w.write_record(&self.rep_header)?;
        for row in &self.rep_rows {
            w.write_record(row)?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(dir.join("timing.csv"))?;
        w.write_record(["rep", "stage", "seconds"])?;
        for r in &self.records {
            let t = &r.timing;
            for (stage, v) in [
                ("warm_start", t.warm_start),
                ("tuning", t.tuning),
                ("first_order", t.first_order),
                ("operators", t.operators),
                ("refinement", t.refinement),
                ("comparator", t.comparator),
                ("inference", t.inference),
                ("oracle", t.oracle),
                ("total", t.total),
            ] {
                w.write_record([r.rep.to_string(), stage.to_string(), format!("{v:?}")])?;
            }
        }
        w.write_record(["all".to_string(), "wall_clock".to_string(), format!("{:?}", self.wall_clock)])?;
        w.flush()?;
        Ok(())
    }
}

pub fn write_summary(path: impl AsRef<Path>, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_summary(path: impl AsRef<Path>) -> Result<Vec<SummaryRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    rdr.deserialize().map(|r| r.map_err(SlimError::from)).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Population standard deviation.
fn sd(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

fn fmt(v: f64) -> String {
    format!("{v:?}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt).unwrap_or_default()
}

/// Aggregates replication records into the summary table and the
/// per-replication rows.
pub fn build_report(
    cfg: &ExperimentConfig,
    design: &Design,
    records: &[RepRecord],
    wall_clock: f64,
) -> Result<McReport> {
    let truth: Vec<f64> = design.truth.iter().copied().collect();
    let d = truth.len();
    let targets = target_indices(cfg, d);
    let hyps = hypotheses(cfg, &design.truth)?;
    let refines = cfg.pipeline.refines();
    let ok: Vec<&RepRecord> = records.iter().filter(|r| !r.diverged).collect();
    let mut summary = Vec::new();
    let mut push = |method: &str, target: &str, metric: &str, value: f64| {
        summary.push(SummaryRow {
            method: method.into(),
            target: target.into(),
            metric: metric.into(),
            value,
        })
    };

    push("all", "all", "replications", records.len() as f64);
    push("all", "all", "diverged", (records.len() - ok.len()) as f64);
    if ok.is_empty() {
        return Err(SlimError::Experiment("every replication diverged".into()));
    }
    push("all", "all", "gamma0_mean", mean(&ok.iter().map(|r| r.gamma0).collect::<Vec<_>>()));

    let methods: Vec<&str> = ok[0].estimators(refines).iter().map(|(m, _)| *m).collect();
    for &method in &methods {
        let draws: Vec<&[f64]> = ok
            .iter()
            .map(|r| {
                r.estimators(refines)
                    .into_iter()
                    .find(|(m, _)| *m == method)
                    .map(|(_, v)| v)
                    .ok_or_else(|| SlimError::Experiment(format!("replication {} lacks {method}", r.rep)))
            })
            .collect::<Result<_>>()?;
        for &k in &targets {
            let vals: Vec<f64> = draws.iter().map(|e| e[k]).collect();
            let bias = mean(&vals) - truth[k];
            let s = sd(&vals);
            let target = format!("theta_{}", k + 1);
            push(method, &target, "bias", bias);
            push(method, &target, "sd", s);
            push(method, &target, "rmse", (bias * bias + s * s).sqrt());
        }
        if let ResolvedDgp::Easi(_, _, model) = &design.dgp {
            let value = rimse(&model.layout(), &draws, &truth, RIMSE_LO, RIMSE_HI, RIMSE_STEP)?;
            push(method, "engel_curves", "rimse", value);
        }
    }

    for (name, _) in &hyps {
        for method in ["rs", "plugin"] {
            let tests: Vec<&TestRecord> = ok
                .iter()
                .filter_map(|r| r.tests.iter().find(|t| t.hypothesis == *name && t.method == method))
                .collect();
            if tests.is_empty() {
                continue;
            }
            let reject = tests.iter().filter(|t| t.reject).count() as f64 / tests.len() as f64;
            let label = format!("{method}_wald");
            push(&label, name, "rejection_rate", reject);
            if tests[0].ell == 1 {
                push(&label, name, "coverage", 1.0 - reject);
                let lens: Vec<f64> = tests.iter().filter_map(|t| t.ci.map(|(a, b)| b - a)).collect();
                if !lens.is_empty() {
                    push(&label, name, "ci_length", mean(&lens));
                }
            }
        }
    }

    for v in &cfg.jtests {
        let js: Vec<&JRecord> = ok
            .iter()
            .filter_map(|r| r.jtests.iter().find(|j| j.variant == *v))
            .collect();
        if js.is_empty() {
            continue;
        }
        let label = format!("j_{}", v.name());
        push(&label, "overid", "rejection_rate", js.iter().filter(|j| j.reject).count() as f64 / js.len() as f64);
        push(&label, "overid", "statistic_mean", mean(&js.iter().map(|j| j.statistic).collect::<Vec<_>>()));
    }

    // Per-replication table.
    let layout = match &design.dgp {
        ResolvedDgp::Easi(_, _, m) => Some(m.layout()),
        ResolvedDgp::LinearIv(..) => None,
    };
    let mut header = vec!["rep".to_string(), "diverged".into(), "gamma0".into(), "warm_start_updates".into()];
    for &m in &methods {
        for &k in &targets {
            header.push(format!("{m}_theta_{}", k + 1));
        }
        if layout.is_some() {
            header.push(format!("{m}_rimse"));
        }
    }
    for (name, _) in &hyps {
        for method in ["rs", "plugin"] {
            if ok[0].tests.iter().any(|t| t.hypothesis == *name && t.method == method) {
                for col in ["statistic", "cv", "reject", "ci_lower", "ci_upper"] {
                    header.push(format!("{method}_{name}_{col}"));
                }
            }
        }
    }
    for v in &cfg.jtests {
        for col in ["statistic", "df", "p_value", "reject"] {
            header.push(format!("j_{}_{col}", v.name()));
        }
    }

    let mut rep_rows = Vec::with_capacity(records.len());
    let mut rep_rimse = Vec::with_capacity(records.len());
    for r in records {
        let mut row = vec![
            r.rep.to_string(),
            r.diverged.to_string(),
            if r.diverged { String::new() } else { fmt(r.gamma0) },
            r.warm_start_updates.to_string(),
        ];
        let ests = r.estimators(refines);
        let mut rim = Vec::new();
        for &m in &methods {
            let est = ests.iter().find(|(n, _)| *n == m).map(|(_, v)| *v).filter(|v| !v.is_empty());
            for &k in &targets {
                row.push(fmt_opt(est.map(|e| e[k])));
            }
            if let Some(l) = &layout {
                let v = match est {
                    Some(e) => Some(rimse(l, &[e], &truth, RIMSE_LO, RIMSE_HI, RIMSE_STEP)?),
                    None => None,
                };
                if let Some(v) = v {
                    rim.push((m.to_string(), v));
                }
                row.push(fmt_opt(v));
            }
        }
        for (name, _) in &hyps {
            for method in ["rs", "plugin"] {
                if !ok[0].tests.iter().any(|t| t.hypothesis == *name && t.method == method) {
                    continue;
                }
                match r.tests.iter().find(|t| t.hypothesis == *name && t.method == method) {
                    Some(t) => {
                        row.push(fmt(t.statistic));
                        row.push(fmt(t.critical_value));
                        row.push(t.reject.to_string());
                        row.push(fmt_opt(t.ci.map(|c| c.0)));
                        row.push(fmt_opt(t.ci.map(|c| c.1)));
                    }
                    None => row.extend(std::iter::repeat_n(String::new(), 5)),
                }
            }
        }
        for v in &cfg.jtests {
            match r.jtests.iter().find(|j| j.variant == *v) {
                Some(j) => {
                    row.push(fmt(j.statistic));
                    row.push(j.df.to_string());
                    row.push(fmt(j.p_value));
                    row.push(j.reject.to_string());
                }
                None => row.extend(std::iter::repeat_n(String::new(), 4)),
            }
        }
        rep_rows.push(row);
        rep_rimse.push(rim);
    }

    Ok(McReport {
        summary,
        records: records.to_vec(),
        rep_rimse,
        rep_header: header,
        rep_rows,
        wall_clock,
    })
}
