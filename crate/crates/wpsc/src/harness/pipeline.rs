//! The end-to-end experiment pipeline and its stage-by-stage subcommands.
//!
//! Stage order: ingest (traces only) -> workers -> allocate (phase-1
//! Stackelberg equilibrium) -> samples (slice or generate, then split) ->
//! label/train (only when the learned mechanism is requested) -> evaluate ->
//! audit -> report. Every stochastic stage draws from its own stream split
//! off the root seed, so identical configs produce byte-identical outputs.
//! A failing stage removes every file written so far and surfaces a
//! stage-tagged error.

use std::path::PathBuf;

use rand::Rng;

use crate::deploy::{
    deviation_grid, msc_constant, performance_ratios, strategyproofness_audit, AuditReport,
    EvenRule, Mechanism,
};
use crate::harness::config::{DataSource, ExperimentConfig, SplitRule};
use crate::harness::data::{build_samples, gen_synthetic, ingest_traces, IngestResult, SampleSet};
use crate::harness::report::{
    fmt_sig, write_allocation_json, write_audit_json, write_loss_curve, write_metrics_csv,
    write_metrics_json, write_samples_csv, MechanismRow, Metrics,
};
use crate::harness::HarnessError;
use crate::mdl::{label_dataset, save_model, train, LabeledSample, MdlModel};
use crate::model::{
    platform_cost_phase2, worker_utility_phase1, DeploymentInstance, Point, Worker,
};
use crate::rng::stage_rng;
use crate::stackelberg::{stackelberg_equilibrium, EquilibriumReport};

/// How far through the pipeline a subcommand runs, and which artifacts it
/// leaves behind.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PipelineStage {
    GenData,
    Ingest,
    Allocate,
    Label,
    TrainMdl,
    Evaluate,
    Audit,
    Pipeline,
}

/// Files written and one human-readable summary line per stage.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub files: Vec<PathBuf>,
    pub summary: Vec<String>,
}

/// Run the full pipeline (allocate, sample, train when requested, evaluate,
/// audit, report).
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<PipelineOutput, HarnessError> {
    run_stage(cfg, PipelineStage::Pipeline)
}

/// Run the pipeline up to `stage`, writing only that stage's artifacts. On
/// failure, every file written during this call is removed.
pub fn run_stage(
    cfg: &ExperimentConfig,
    stage: PipelineStage,
) -> Result<PipelineOutput, HarnessError> {
    std::fs::create_dir_all(&cfg.output_dir)?;
    let mut ctx = Context {
        cfg,
        stage,
        files: Vec::new(),
        summary: Vec::new(),
    };
    match drive(&mut ctx) {
        Ok(()) => Ok(PipelineOutput { files: ctx.files, summary: ctx.summary }),
        Err(e) => {
            for f in &ctx.files {
                let _ = std::fs::remove_file(f);
            }
            Err(e)
        }
    }
}

struct Context<'a> {
    cfg: &'a ExperimentConfig,
    stage: PipelineStage,
    files: Vec<PathBuf>,
    summary: Vec<String>,
}

impl Context<'_> {
    fn out(&self, name: &str) -> PathBuf {
        self.cfg.output_dir.join(name)
    }

    fn wrote(&mut self, path: PathBuf) {
        self.files.push(path);
    }

    fn note(&mut self, line: String) {
        self.summary.push(line);
    }
}

/// Wrap a runtime failure with its stage name; configuration errors keep
/// their identity (and exit code 2).
fn tag<T>(stage: &'static str, r: Result<T, HarnessError>) -> Result<T, HarnessError> {
    r.map_err(|e| match e {
        HarnessError::Config(_) | HarnessError::Stage { .. } => e,
        other => HarnessError::Stage { stage, message: other.to_string() },
    })
}

fn drive(ctx: &mut Context) -> Result<(), HarnessError> {
    let cfg = ctx.cfg;
    let wants_mdl = cfg.mechanisms.iter().any(|m| m == "mdl");

    // -- gen-data / ingest are runnable in isolation -------------------------
    if ctx.stage == PipelineStage::GenData {
        let spec = match &cfg.data {
            DataSource::Synthetic(spec) => spec,
            DataSource::Traces { .. } => {
                return Err(HarnessError::Config(
                    "gen-data requires a synthetic data.source".into(),
                ))
            }
        };
        let set = tag(
            "gen-data",
            gen_synthetic(spec, cfg.worker_count, cfg.samples, cfg.seed),
        )?;
        let path = ctx.out("samples.csv");
        tag("gen-data", write_samples_csv(&path, &set))?;
        ctx.wrote(path);
        ctx.note(format!(
            "gen-data: {} samples of arity {} from {}",
            set.samples.len(),
            set.arity(),
            set.provenance
        ));
        return Ok(());
    }

    let ingest = match &cfg.data {
        DataSource::Traces { path, .. } => {
            let result = tag("ingest", ingest_traces(path, cfg.system.task_area))?;
            ctx.note(format!(
                "ingest: {} rows, {} workers retained, {} dropped",
                result.rows,
                result.workers.len(),
                result.dropped
            ));
            Some(result)
        }
        DataSource::Synthetic(_) => None,
    };

    if ctx.stage == PipelineStage::Ingest {
        let result = ingest.ok_or_else(|| {
            HarnessError::Config("ingest requires data.source = traces".into())
        })?;
        let path = ctx.out("ingest.json");
        tag("ingest", write_ingest_json(&path, &result))?;
        ctx.wrote(path);
        return Ok(());
    }

    // -- workers -------------------------------------------------------------
    let workers = tag("workers", build_workers(cfg, ingest.as_ref()))?;
    ctx.note(format!("workers: {} registered", workers.len()));

    // -- allocate (phase 1) ---------------------------------------------------
    let eq = stackelberg_equilibrium(&workers, &cfg.system, &cfg.solver);
    let employed = eq.outcome.employed.clone();
    if employed.is_empty() {
        return Err(HarnessError::Stage {
            stage: "allocate",
            message: "no worker is employed at the equilibrium".into(),
        });
    }
    let avg_worker_utility = average_worker_utility(&eq, &workers, cfg);
    ctx.note(format!(
        "allocate: p_c={}, platform utility={}, employed={}/{}, converged={}",
        fmt_sig(eq.outcome.p_c),
        fmt_sig(eq.platform_utility),
        employed.len(),
        workers.len(),
        eq.converged
    ));
    if ctx.stage == PipelineStage::Allocate || ctx.stage == PipelineStage::Pipeline {
        let ids: Vec<u32> = workers.iter().map(|w| w.id).collect();
        let path = ctx.out("allocation.json");
        tag("allocate", write_allocation_json(&path, &eq, &ids))?;
        ctx.wrote(path);
        if ctx.stage == PipelineStage::Allocate {
            return Ok(());
        }
    }

    // -- samples ---------------------------------------------------------------
    let weights = deployment_weights(&eq, &workers, cfg);
    let set = tag("samples", build_sample_set(cfg, &employed, ingest.as_ref()))?;
    let (train_idx, test_idx) = tag("samples", split_indices(cfg, set.samples.len()))?;
    ctx.note(format!(
        "samples: {} total ({} train / {} test, {} skipped) from {}",
        set.samples.len(),
        train_idx.len(),
        test_idx.len(),
        set.skipped,
        set.provenance
    ));

    // -- label + train (only when requested) ------------------------------------
    let needs_label = ctx.stage == PipelineStage::Label || wants_mdl
        || ctx.stage == PipelineStage::TrainMdl;
    let labeled: Option<Vec<LabeledSample>> = if needs_label {
        let train_locs: Vec<Vec<Point>> =
            train_idx.iter().map(|&i| set.samples[i].clone()).collect();
        let labeled = tag(
            "label",
            label_dataset(&train_locs, std::slice::from_ref(&weights), &cfg.system)
                .map_err(HarnessError::Mdl),
        )?;
        ctx.note(format!("label: {} training samples labeled", labeled.len()));
        Some(labeled)
    } else {
        None
    };
    if ctx.stage == PipelineStage::Label {
        let path = ctx.out("labeled.json");
        tag("label", write_labeled_json(&path, labeled.as_deref().unwrap()))?;
        ctx.wrote(path);
        return Ok(());
    }

    let needs_train = ctx.stage == PipelineStage::TrainMdl || wants_mdl;
    let model: Option<MdlModel> = if needs_train {
        let dataset = labeled.as_deref().unwrap();
        let init = tag(
            "train",
            MdlModel::init(
                cfg.mdl_j,
                cfg.mdl_k,
                employed.len(),
                cfg.system.task_area,
                cfg.seed,
            )
            .map_err(HarnessError::Mdl),
        )?;
        let (model, curve) = tag(
            "train",
            train(dataset, &cfg.train, &init, &cfg.system).map_err(HarnessError::Mdl),
        )?;
        let ckpt = ctx.out("mdl_checkpoint.txt");
        tag("train", save_model(&model, &ckpt).map_err(HarnessError::Mdl))?;
        ctx.wrote(ckpt);
        let curve_path = ctx.out("loss_curve.csv");
        tag("train", write_loss_curve(&curve_path, &curve))?;
        ctx.wrote(curve_path);
        let best = curve.last().map(|p| p.best_val).unwrap_or(f64::NAN);
        ctx.note(format!(
            "train: {} epochs, best validation loss {}",
            curve.len(),
            fmt_sig(best)
        ));
        Some(model)
    } else {
        None
    };
    if ctx.stage == PipelineStage::TrainMdl {
        return Ok(());
    }

    // -- build mechanisms ----------------------------------------------------------
    let train_instances = tag(
        "evaluate",
        build_instances(&set, &train_idx, &weights, cfg),
    )?;
    let mechanisms = tag(
        "evaluate",
        build_mechanisms(cfg, &train_instances, model.as_ref()),
    )?;

    // -- audits ----------------------------------------------------------------
    let deviations = deviation_grid(&cfg.system.task_area, cfg.audit_grid);
    let mut audits: Vec<(String, AuditReport)> = Vec::new();
    for mech in &mechanisms {
        let report = tag(
            "audit",
            strategyproofness_audit(mech, &eq.outcome, &workers, &cfg.system, &deviations)
                .map_err(HarnessError::Model),
        )?;
        ctx.note(format!(
            "audit: {} {} (max gain {})",
            mech.name(),
            if report.passed { "passed" } else { "FAILED" },
            fmt_sig(report.max_utility_gain)
        ));
        audits.push((mech.name().to_string(), report));
    }
    if ctx.stage == PipelineStage::Audit || ctx.stage == PipelineStage::Pipeline {
        let path = ctx.out("audit.json");
        tag("audit", write_audit_json(&path, &audits))?;
        ctx.wrote(path);
        if ctx.stage == PipelineStage::Audit {
            return Ok(());
        }
    }

    // -- evaluate -----------------------------------------------------------------
    let test_instances = tag(
        "evaluate",
        build_instances(&set, &test_idx, &weights, cfg),
    )?;
    let mut rows = Vec::with_capacity(mechanisms.len());
    for (mech, (name, audit)) in mechanisms.iter().zip(&audits) {
        let (omega_avg, omega_wst) = tag(
            "evaluate",
            performance_ratios(mech, &test_instances).map_err(HarnessError::Model),
        )?;
        let mut total = 0.0;
        for inst in &test_instances {
            let at = tag(
                "evaluate",
                mech.place(&inst.points, &inst.weights, &inst.config)
                    .map_err(HarnessError::Model),
            )?;
            total += platform_cost_phase2(at, inst);
        }
        let mean_cost = total / test_instances.len() as f64;
        ctx.note(format!(
            "evaluate: {} omega_avg={}, omega_wst={}, mean cost={}",
            name,
            fmt_sig(omega_avg),
            fmt_sig(omega_wst),
            fmt_sig(mean_cost)
        ));
        rows.push(MechanismRow {
            name: name.clone(),
            omega_avg,
            omega_wst,
            mean_cost,
            audit_passed: audit.passed,
            audit_max_gain: audit.max_utility_gain,
        });
    }

    // -- report ----------------------------------------------------------------
    let metrics = Metrics {
        seed: cfg.seed,
        equilibrium: eq,
        avg_worker_utility,
        worker_count: workers.len(),
        provenance: set.provenance.clone(),
        arity: set.arity(),
        train_samples: train_idx.len(),
        test_samples: test_idx.len(),
        skipped_samples: set.skipped,
        rows: rows.clone(),
    };
    let json_path = ctx.out("metrics.json");
    tag("report", write_metrics_json(&json_path, &metrics))?;
    ctx.wrote(json_path);
    let csv_path = ctx.out("metrics.csv");
    tag("report", write_metrics_csv(&csv_path, &rows))?;
    ctx.wrote(csv_path);
    Ok(())
}

// ---------------------------------------------------------------------------
// Stage helpers
// ---------------------------------------------------------------------------

/// Synthetic markets draw uniform locations (degenerate working areas);
/// trace-backed markets use the ingested geometry, keeping the
/// most-recorded workers when the file holds more than `workers.count`
/// (ties broken by ascending id). Sensing costs are uniform on
/// `[b_min, b_max]` either way.
fn build_workers(
    cfg: &ExperimentConfig,
    ingest: Option<&IngestResult>,
) -> Result<Vec<Worker>, HarnessError> {
    let mut rng = stage_rng(cfg.seed, "workers");
    let draw_b = |rng: &mut rand_chacha::ChaCha12Rng| {
        if cfg.b_max > cfg.b_min {
            rng.gen_range(cfg.b_min..cfg.b_max)
        } else {
            cfg.b_min
        }
    };
    match ingest {
        Some(result) => {
            let mut order: Vec<usize> = (0..result.workers.len()).collect();
            if result.workers.len() > cfg.worker_count {
                order.sort_by_key(|&i| {
                    (std::cmp::Reverse(result.workers[i].records.len()), result.workers[i].id)
                });
                order.truncate(cfg.worker_count);
                order.sort_by_key(|&i| result.workers[i].id);
            }
            let costs: Vec<f64> = order.iter().map(|_| draw_b(&mut rng)).collect();
            order
                .iter()
                .zip(&costs)
                .map(|(&i, &b)| {
                    let t = &result.workers[i];
                    Worker::new(t.id, b, t.last_in_area, t.working_area, &cfg.system)
                        .map_err(HarnessError::Model)
                })
                .collect()
        }
        None => {
            let area = cfg.system.task_area;
            (0..cfg.worker_count)
                .map(|i| {
                    let loc = Point::new(
                        rng.gen_range(area.min.x..area.max.x),
                        rng.gen_range(area.min.y..area.max.y),
                    );
                    let b = draw_b(&mut rng);
                    Worker::new(i as u32 + 1, b, loc, crate::model::Rect::point(loc), &cfg.system)
                        .map_err(HarnessError::Model)
                })
                .collect()
        }
    }
}

fn average_worker_utility(
    eq: &EquilibriumReport,
    workers: &[Worker],
    cfg: &ExperimentConfig,
) -> f64 {
    let employed: Vec<usize> = workers
        .iter()
        .enumerate()
        .filter(|(_, w)| eq.outcome.employed.contains(&w.id))
        .map(|(i, _)| i)
        .collect();
    if employed.is_empty() {
        return 0.0;
    }
    employed
        .iter()
        .map(|&i| {
            worker_utility_phase1(i, &eq.outcome.rates, eq.outcome.p_c, workers, &cfg.system)
        })
        .sum::<f64>()
        / employed.len() as f64
}

/// Deployment weights for the employed workers, in employment order:
/// `w_i = share_i * kappa` with the phase-1 shares taken verbatim.
fn deployment_weights(
    eq: &EquilibriumReport,
    workers: &[Worker],
    cfg: &ExperimentConfig,
) -> Vec<f64> {
    workers
        .iter()
        .enumerate()
        .filter(|(_, w)| eq.outcome.employed.contains(&w.id))
        .map(|(i, _)| eq.outcome.shares[i] * cfg.system.kappa)
        .collect()
}

fn build_sample_set(
    cfg: &ExperimentConfig,
    employed: &[u32],
    ingest: Option<&IngestResult>,
) -> Result<SampleSet, HarnessError> {
    match (&cfg.data, ingest) {
        (DataSource::Synthetic(spec), _) => {
            gen_synthetic(spec, employed.len(), cfg.samples, cfg.seed)
                .map(|set| set.with_norm(cfg.system.task_area))
        }
        (DataSource::Traces { slot, .. }, Some(result)) => {
            build_samples(result, employed, *slot, cfg.system.task_area)
        }
        (DataSource::Traces { .. }, None) => unreachable!("traces are ingested above"),
    }
}

fn split_indices(
    cfg: &ExperimentConfig,
    total: usize,
) -> Result<(Vec<usize>, Vec<usize>), HarnessError> {
    let train_n = (cfg.train_fraction * total as f64).floor() as usize;
    if train_n == 0 || train_n >= total {
        return Err(HarnessError::Data(format!(
            "a {}/{} split of {total} samples leaves an empty train or test set",
            train_n,
            total - train_n
        )));
    }
    let mut idx: Vec<usize> = (0..total).collect();
    if cfg.split == SplitRule::Random {
        use rand::seq::SliceRandom;
        idx.shuffle(&mut stage_rng(cfg.seed, "split"));
    }
    let (train, test) = idx.split_at(train_n);
    let mut train = train.to_vec();
    let mut test = test.to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

fn build_instances(
    set: &SampleSet,
    idx: &[usize],
    weights: &[f64],
    cfg: &ExperimentConfig,
) -> Result<Vec<DeploymentInstance>, HarnessError> {
    idx.iter()
        .map(|&i| {
            DeploymentInstance::new(set.denormalized(i), weights.to_vec(), cfg.system.clone())
                .map_err(HarnessError::Model)
        })
        .collect()
}

/// Instantiate the configured mechanisms. The MSC constant comes from the
/// config when fixed, otherwise from a grid search over the training split.
fn build_mechanisms(
    cfg: &ExperimentConfig,
    train_instances: &[DeploymentInstance],
    model: Option<&MdlModel>,
) -> Result<Vec<Mechanism>, HarnessError> {
    let mut out = Vec::with_capacity(cfg.mechanisms.len());
    for name in &cfg.mechanisms {
        let mech = match name.as_str() {
            "med_average" => Mechanism::Med { rule: EvenRule::PaperAverage },
            "med_lower" => Mechanism::Med { rule: EvenRule::LowerMedian },
            "msc" => {
                let constant = match cfg.msc_constant {
                    Some(p) => p,
                    None => msc_constant(train_instances, EvenRule::LowerMedian, cfg.msc_grid)
                        .map_err(HarnessError::Model)?,
                };
                Mechanism::Msc { constant, rule: EvenRule::LowerMedian }
            }
            "mdl" => Mechanism::Mdl {
                model: Box::new(model.expect("model trained when mdl is configured").clone()),
            },
            "opt" => Mechanism::Opt,
            "mean" => Mechanism::Mean,
            other => {
                return Err(HarnessError::Config(format!("unknown mechanism `{other}`")))
            }
        };
        out.push(mech);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Extra artifact writers (stage-specific)
// ---------------------------------------------------------------------------

fn write_ingest_json(path: &std::path::Path, result: &IngestResult) -> Result<(), HarnessError> {
    let doc = serde_json::json!({
        "rows": result.rows,
        "distinct_ids": result.distinct_ids,
        "retained": result.workers.len(),
        "dropped": result.dropped,
        "workers": result.workers.iter().map(|t| serde_json::json!({
            "id": t.id,
            "records": t.records.len(),
            "working_area": {
                "min": [t.working_area.min.x, t.working_area.min.y],
                "max": [t.working_area.max.x, t.working_area.max.y],
            },
            "location": [t.last_in_area.x, t.last_in_area.y],
        })).collect::<Vec<_>>(),
    });
    let mut text = serde_json::to_string_pretty(&doc).expect("ingest serializes");
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn write_labeled_json(
    path: &std::path::Path,
    labeled: &[LabeledSample],
) -> Result<(), HarnessError> {
    let mut text = serde_json::to_string_pretty(labeled).expect("samples serialize");
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::ExperimentConfig;

    /// A small, fast market: 6 workers, 40 samples, cheap mechanisms.
    fn small_config(dir: &std::path::Path) -> ExperimentConfig {
        let overrides: Vec<(String, String)> = [
            ("workers.count", "6"),
            ("data.samples", "40"),
            ("mechanisms.list", "med_lower,opt"),
            ("mechanisms.msc_grid", "5"),
            ("audit.grid", "5"),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
        ExperimentConfig::load(None, &overrides, Some(11), Some(dir)).unwrap()
    }

    #[test]
    fn pipeline_runs_and_reports() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(dir.path());
        let out = run_pipeline(&cfg).unwrap();
        let names: Vec<String> = out
            .files
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        for expected in ["allocation.json", "audit.json", "metrics.json", "metrics.csv"] {
            assert!(names.iter().any(|n| n == expected), "missing {expected}: {names:?}");
        }
        let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3, "{csv}");
        // opt is its own benchmark: both ratios exactly 1
        let opt_line = lines.iter().find(|l| l.starts_with("opt,")).unwrap();
        assert!(
            opt_line.starts_with("opt,1.00000000000e0,1.00000000000e0,"),
            "{opt_line}"
        );
        // ratios are always >= 1
        let json: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("metrics.json")).unwrap())
                .unwrap();
        for row in json["mechanisms"].as_array().unwrap() {
            assert!(row["omega_avg"].as_f64().unwrap() >= 1.0);
            assert!(row["omega_wst"].as_f64().unwrap() >= row["omega_avg"].as_f64().unwrap() - 1e-12);
            assert!(row["audit_passed"].as_bool().unwrap());
        }
        assert!(json["phase1"]["platform_utility"].as_f64().unwrap() > 0.0);
        assert_eq!(json["phase1"]["employed"].as_u64().unwrap(), 6);
    }

    #[test]
    fn pipeline_is_byte_identical_across_runs() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let out_a = run_pipeline(&small_config(dir_a.path())).unwrap();
        let out_b = run_pipeline(&small_config(dir_b.path())).unwrap();
        assert_eq!(out_a.files.len(), out_b.files.len());
        for (a, b) in out_a.files.iter().zip(&out_b.files) {
            assert_eq!(a.file_name(), b.file_name());
            let bytes_a = std::fs::read(a).unwrap();
            let bytes_b = std::fs::read(b).unwrap();
            assert_eq!(bytes_a, bytes_b, "{:?} differs", a.file_name());
        }
    }

    #[test]
    fn stage_subcommands_write_their_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(dir.path());

        let out = run_stage(&cfg, PipelineStage::GenData).unwrap();
        assert_eq!(out.files.len(), 1);
        assert!(dir.path().join("samples.csv").exists());

        run_stage(&cfg, PipelineStage::Allocate).unwrap();
        assert!(dir.path().join("allocation.json").exists());

        run_stage(&cfg, PipelineStage::Label).unwrap();
        assert!(dir.path().join("labeled.json").exists());

        run_stage(&cfg, PipelineStage::Audit).unwrap();
        assert!(dir.path().join("audit.json").exists());
    }

    #[test]
    fn mean_mechanism_fails_its_audit_in_reports() {
        let dir = tempfile::tempdir().unwrap();
        // Desk-scale system: rates are a sizable fraction of the bandwidth, so
        // the transmit-power saving from dragging the deployment point toward a
        // worker clears the audit tolerance.
        let overrides: Vec<(String, String)> = [
            ("workers.count", "6"),
            ("workers.b_min", "0.01"),
            ("workers.b_max", "0.05"),
            ("system.g_db", "20"),
            ("system.bandwidth", "1"),
            ("system.eta", "0.1"),
            ("system.gamma_db", "-10"),
            ("system.h", "0.5"),
            ("system.a1", "10"),
            ("system.a2", "5"),
            ("system.area_side", "2"),
            ("data.samples", "40"),
            ("mechanisms.list", "mean,opt"),
            ("mechanisms.msc_grid", "5"),
            ("audit.grid", "21"),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
        let cfg = ExperimentConfig::load(None, &overrides, Some(11), Some(dir.path())).unwrap();
        run_pipeline(&cfg).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        let mean_line = csv.lines().find(|l| l.starts_with("mean,")).unwrap();
        assert!(mean_line.ends_with("false"), "{mean_line}");
    }

    #[test]
    fn failed_stage_cleans_partial_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config(dir.path());
        // force a samples-stage failure after allocation wrote its artifact:
        // a two-cluster spec whose k_max exceeds the employed count
        cfg.data = DataSource::Synthetic(crate::harness::data::SyntheticSpec::TwoCluster {
            a: Point::new(0.2, 0.2),
            b: Point::new(0.8, 0.8),
            noise: 0.01,
            k_min: 3,
            k_max: 100,
        });
        let err = run_pipeline(&cfg).unwrap_err();
        assert_eq!(err.exit_code(), 2); // bad spec parameters are config errors
        assert!(!dir.path().join("allocation.json").exists(), "partial output kept");
        assert!(!dir.path().join("metrics.json").exists());
    }

    #[test]
    fn trace_pipeline_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        // 3 workers, 3 complete hourly slots each (same layout every slot)
        let mut csv = String::from("worker_id,timestamp,x,y\n");
        for slot in 0..3 {
            let t = slot * 4000; // 0 / 4000 / 8000 -> three 3600 s windows
            csv.push_str(&format!("1,{t},40.0,60.0\n"));
            csv.push_str(&format!("2,{t},160.0,90.0\n"));
            csv.push_str(&format!("3,{t},100.0,150.0\n"));
        }
        let trace_path = dir.path().join("traces.csv");
        std::fs::write(&trace_path, csv).unwrap();

        let overrides: Vec<(String, String)> = [
            ("workers.count", "3"),
            ("data.source", "traces"),
            ("data.path", trace_path.to_str().unwrap()),
            ("data.slot", "3600"),
            ("data.train_fraction", "0.67"),
            ("mechanisms.list", "med_lower,opt"),
            ("audit.grid", "5"),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
        let cfg = ExperimentConfig::load(None, &overrides, Some(3), Some(dir.path())).unwrap();
        run_pipeline(&cfg).unwrap();
        let json: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("metrics.json")).unwrap())
                .unwrap();
        assert_eq!(json["samples"]["source"].as_str().unwrap(), "traces");
        assert_eq!(json["samples"]["arity"].as_u64().unwrap(), 3);
        assert_eq!(json["samples"]["train"].as_u64().unwrap(), 2);
        assert_eq!(json["samples"]["test"].as_u64().unwrap(), 1);
    }
}
