//! Deterministic report files: metrics, audits, loss curves, allocations.
//!
//! Every floating-point field is rounded to 12 significant digits before it
//! is written, so identical runs produce byte-identical files and the files
//! stay diff-friendly across platforms.

use std::path::Path;

use serde::Serialize;
use serde_json::json;

use crate::deploy::AuditReport;
use crate::harness::data::SampleSet;
use crate::harness::HarnessError;
use crate::mdl::LossPoint;
use crate::stackelberg::EquilibriumReport;

/// Render with 12 significant digits (scientific notation).
pub fn fmt_sig(v: f64) -> String {
    format!("{v:.11e}")
}

/// Round to 12 significant decimal digits.
pub fn sig12(v: f64) -> f64 {
    fmt_sig(v).parse().expect("formatted float parses")
}

/// One mechanism row of the metrics report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MechanismRow {
    pub name: String,
    pub omega_avg: f64,
    pub omega_wst: f64,
    pub mean_cost: f64,
    pub audit_passed: bool,
    pub audit_max_gain: f64,
}

/// Everything the metrics report carries.
#[derive(Debug, Clone)]
pub struct Metrics {
    pub seed: u64,
    pub equilibrium: EquilibriumReport,
    pub avg_worker_utility: f64,
    pub worker_count: usize,
    pub provenance: String,
    pub arity: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub skipped_samples: usize,
    pub rows: Vec<MechanismRow>,
}

/// Serialize the metrics document to `metrics.json`.
pub fn write_metrics_json(path: &Path, m: &Metrics) -> Result<(), HarnessError> {
    let outcome = &m.equilibrium.outcome;
    let total_rate: f64 = outcome.rates.iter().sum();
    let doc = json!({
        "seed": m.seed,
        "phase1": {
            "p_c": sig12(outcome.p_c),
            "platform_utility": sig12(m.equilibrium.platform_utility),
            "avg_worker_utility": sig12(m.avg_worker_utility),
            "total_rate": sig12(total_rate),
            "workers": m.worker_count,
            "employed": outcome.employed.len(),
            "iterations": m.equilibrium.iterations,
            "converged": m.equilibrium.converged,
            "residual": sig12(m.equilibrium.residual),
        },
        "samples": {
            "source": m.provenance,
            "arity": m.arity,
            "train": m.train_samples,
            "test": m.test_samples,
            "skipped": m.skipped_samples,
        },
        "mechanisms": m.rows.iter().map(|r| json!({
            "name": r.name,
            "omega_avg": sig12(r.omega_avg),
            "omega_wst": sig12(r.omega_wst),
            "mean_cost": sig12(r.mean_cost),
            "audit_passed": r.audit_passed,
            "audit_max_gain": sig12(r.audit_max_gain),
        })).collect::<Vec<_>>(),
    });
    let mut text = serde_json::to_string_pretty(&doc).expect("metrics serialize");
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// One row per mechanism: `mechanism,omega_avg,omega_wst,mean_cost,audit_passed`.
pub fn write_metrics_csv(path: &Path, rows: &[MechanismRow]) -> Result<(), HarnessError> {
    let mut text = String::from("mechanism,omega_avg,omega_wst,mean_cost,audit_passed\n");
    for r in rows {
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            r.name,
            fmt_sig(r.omega_avg),
            fmt_sig(r.omega_wst),
            fmt_sig(r.mean_cost),
            r.audit_passed
        ));
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Per-mechanism audit details.
pub fn write_audit_json(
    path: &Path,
    audits: &[(String, AuditReport)],
) -> Result<(), HarnessError> {
    let doc: Vec<_> = audits
        .iter()
        .map(|(name, report)| {
            json!({
                "mechanism": name,
                "tested_deviations": report.tested_deviations,
                "max_utility_gain": sig12(report.max_utility_gain),
                "passed": report.passed,
                "violating_case": report.violating_case.as_ref().map(|v| json!({
                    "worker_id": v.worker_id,
                    "true_location": [sig12(v.true_location.x), sig12(v.true_location.y)],
                    "reported_location": [sig12(v.reported_location.x), sig12(v.reported_location.y)],
                    "utility_gain": sig12(v.utility_gain),
                })),
            })
        })
        .collect();
    let mut text = serde_json::to_string_pretty(&doc).expect("audits serialize");
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Phase-1 allocation details (rates and shares per worker).
pub fn write_allocation_json(
    path: &Path,
    report: &EquilibriumReport,
    worker_ids: &[u32],
) -> Result<(), HarnessError> {
    let outcome = &report.outcome;
    let doc = json!({
        "p_c": sig12(outcome.p_c),
        "platform_utility": sig12(report.platform_utility),
        "iterations": report.iterations,
        "converged": report.converged,
        "residual": sig12(report.residual),
        "employed": outcome.employed,
        "workers": worker_ids.iter().zip(outcome.rates.iter().zip(&outcome.shares)).map(
            |(&id, (&rate, &share))| json!({
                "id": id,
                "rate": sig12(rate),
                "share": sig12(share),
            })
        ).collect::<Vec<_>>(),
    });
    let mut text = serde_json::to_string_pretty(&doc).expect("allocation serializes");
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Training loss curve: `epoch,train_loss,val_loss,best_val`.
pub fn write_loss_curve(path: &Path, curve: &[LossPoint]) -> Result<(), HarnessError> {
    let mut text = String::from("epoch,train_loss,val_loss,best_val\n");
    for p in curve {
        text.push_str(&format!(
            "{},{},{},{}\n",
            p.epoch,
            fmt_sig(p.train_loss),
            fmt_sig(p.val_loss),
            fmt_sig(p.best_val)
        ));
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Normalized samples: `sample,worker,x,y`.
pub fn write_samples_csv(path: &Path, set: &SampleSet) -> Result<(), HarnessError> {
    let mut text = String::from("sample,worker,x,y\n");
    for (si, sample) in set.samples.iter().enumerate() {
        for (wi, p) in sample.iter().enumerate() {
            text.push_str(&format!("{si},{wi},{},{}\n", fmt_sig(p.x), fmt_sig(p.y)));
        }
    }
    std::fs::write(path, text)?;
    Ok(())
}
