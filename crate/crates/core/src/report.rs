//! Output writers. Every file starts with an audit comment carrying the
//! resolved-config hash and master seed so reruns can be matched to their
//! inputs byte for byte.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::designsim::MetricsTable;
use crate::error::{Error, Result};
use crate::model::FittedPosterior;
use crate::population::Population;
use crate::reliability::RSE_THRESHOLD;
use crate::ssd::SsdTrace;

/// FNV-1a 64-bit hash; stable across platforms and releases.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

#[derive(Debug, Clone)]
pub struct Audit {
    pub command: String,
    pub config_hash: u64,
    pub master_seed: u64,
}

impl Audit {
    pub fn new(command: &str, config_repr: &str, master_seed: u64) -> Audit {
        Audit {
            command: command.to_string(),
            config_hash: fnv1a64(config_repr.as_bytes()),
            master_seed,
        }
    }

    pub fn comment_line(&self) -> String {
        format!(
            "# saeplan {} config_hash={:016x} master_seed={}",
            self.command, self.config_hash, self.master_seed
        )
    }
}

fn write_file(path: &Path, content: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    std::fs::write(path, content).map_err(|e| Error::io(path, e))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Search trace mirroring the audit table: one row per evaluated fraction.
pub fn write_ssd_trace_csv(path: &Path, trace: &SsdTrace, audit: &Audit) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "{}", audit.comment_line()).unwrap();
    writeln!(
        out,
        "step,f_k,mean_loss_true,mean_loss_est,risk_true,risk_est,interval_lo,interval_hi"
    )
    .unwrap();
    for s in &trace.steps {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            s.step,
            s.f_k,
            s.mean_loss_true,
            s.mean_loss_est,
            s.risk_true,
            s.risk_est,
            s.interval_after.0,
            s.interval_after.1
        )
        .unwrap();
    }
    write_file(path, &out)
}

#[derive(Debug, serde::Serialize)]
pub struct ActualSize {
    pub deff: f64,
    pub label: String,
    pub n: u64,
}

#[derive(Debug, serde::Serialize)]
pub struct SsdSummary {
    pub command: String,
    pub config_hash: String,
    pub master_seed: u64,
    pub recommended_fraction: f64,
    pub ess: u64,
    pub solution_interval: [f64; 2],
    pub k_max: usize,
    pub steps_evaluated: usize,
    pub pilot_sample_size: u64,
    pub actual_sizes: Vec<ActualSize>,
    pub warnings: Vec<String>,
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let body = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Numerical(format!("json serialization failed: {e}")))?;
    write_file(path, format!("{body}\n").as_bytes())
}

/// Debug dump of one survey realization: `group_id,area_id,n,y`.
pub fn write_sample_csv(
    path: &Path,
    pop: &Population,
    data: &crate::sampling::SampleRealization,
    audit: &Audit,
) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "{}", audit.comment_line()).unwrap();
    writeln!(out, "group_id,area_id,n,y").unwrap();
    for j in 0..pop.j_count() {
        for d in 0..pop.d_count() {
            writeln!(
                out,
                "{},{},{},{}",
                pop.group_labels()[j],
                pop.area_ids()[d],
                data.sample_sizes.get(j, d),
                data.outcomes.get(j, d)
            )
            .unwrap();
        }
    }
    write_file(path, &out)
}

/// Posterior summaries: `group_id,area_id,post_mean,post_sd,rse`.
pub fn write_fit_csv(
    path: &Path,
    pop: &Population,
    fit: &FittedPosterior,
    audit: &Audit,
) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "{}", audit.comment_line()).unwrap();
    writeln!(out, "group_id,area_id,post_mean,post_sd,rse").unwrap();
    for j in 0..pop.j_count() {
        for d in 0..pop.d_count() {
            let mean = *fit.cell_mean.get(j, d);
            let sd = fit.cell_var.get(j, d).sqrt();
            writeln!(
                out,
                "{},{},{},{},{}",
                pop.group_labels()[j],
                pop.area_ids()[d],
                mean,
                sd,
                sd / mean
            )
            .unwrap();
        }
    }
    write_file(path, &out)
}

/// Suppression audit: `group_id,area_id,post_mean,rse,eligible,suppressed`.
pub fn write_suppression_csv(
    path: &Path,
    pop: &Population,
    report: &crate::reliability::LossReport,
    cell_mean: &crate::cells::CellGrid<f64>,
    audit: &Audit,
) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "{}", audit.comment_line()).unwrap();
    writeln!(out, "group_id,area_id,post_mean,rse,eligible,suppressed").unwrap();
    for j in 0..pop.j_count() {
        for d in 0..pop.d_count() {
            let rse = *report.rse.get(j, d);
            let eligible = *report.eligible_true.get(j, d);
            writeln!(
                out,
                "{},{},{},{},{},{}",
                pop.group_labels()[j],
                pop.area_ids()[d],
                cell_mean.get(j, d),
                rse,
                eligible,
                eligible && rse > RSE_THRESHOLD
            )
            .unwrap();
        }
    }
    write_file(path, &out)
}

/// Per-cell accuracy metrics: `group_id,area_id,rmse,bias,arb,rse,rseb`.
/// Missing entries are left empty, not zeroed.
pub fn write_cell_metrics_csv(
    path: &Path,
    pop: &Population,
    table: &MetricsTable,
    audit: &Audit,
) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "{}", audit.comment_line()).unwrap();
    writeln!(out, "group_id,area_id,rmse,bias,arb,rse,rseb").unwrap();
    for j in 0..pop.j_count() {
        for d in 0..pop.d_count() {
            let m = table.per_cell.get(j, d);
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                pop.group_labels()[j],
                pop.area_ids()[d],
                fmt_opt(m.rmse),
                fmt_opt(m.bias),
                fmt_opt(m.arb),
                fmt_opt(m.rse),
                fmt_opt(m.rseb)
            )
            .unwrap();
        }
    }
    write_file(path, &out)
}

/// Per-group summary mirroring the published table layout.
pub fn write_group_metrics_csv(
    path: &Path,
    pop: &Population,
    table: &MetricsTable,
    audit: &Audit,
) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "{}", audit.comment_line()).unwrap();
    writeln!(
        out,
        "group_id,rmse,bias,arb,rse,rseb,loss_true,risk_true,loss_est,risk_est"
    )
    .unwrap();
    let mut write_row = |label: &str, g: &crate::designsim::GroupMetrics| {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            label,
            fmt_opt(g.rmse),
            fmt_opt(g.bias),
            fmt_opt(g.arb),
            fmt_opt(g.rse),
            fmt_opt(g.rseb),
            fmt_opt(g.loss_true),
            fmt_opt(g.risk_true),
            fmt_opt(g.loss_est),
            fmt_opt(g.risk_est)
        )
        .unwrap();
    };
    for (j, g) in table.per_group.iter().enumerate() {
        write_row(&pop.group_labels()[j].clone(), g);
    }
    write_row("all", &table.overall);
    write_file(path, &out)
}

/// Append an audit comment on top of an existing payload (for synth files).
pub fn with_audit_header(audit: &Audit, body: &str) -> String {
    format!("{}\n{}", audit.comment_line(), body)
}

pub fn out_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}
