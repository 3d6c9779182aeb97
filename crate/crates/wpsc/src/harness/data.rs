//! Data plumbing: GPS trace ingestion, time-slot sample extraction, and
//! synthetic sample generation.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::harness::HarnessError;
use crate::model::{Point, Rect, SystemConfig, Worker};
use crate::rng::stage_rng;

/// One GPS record from a trace file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub worker_id: u32,
    /// Seconds (any finite epoch).
    pub timestamp: f64,
    pub x: f64,
    pub y: f64,
}

/// All records of one worker, with the geometry derived from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerTrace {
    pub id: u32,
    /// Records sorted by timestamp (ties keep file order).
    pub records: Vec<TraceRecord>,
    /// Bounding box of every record, clipped to the task area.
    pub working_area: Rect,
    /// Location of the latest in-area record.
    pub last_in_area: Point,
}

/// Result of ingesting a trace CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestResult {
    /// Retained workers, ascending by id.
    pub workers: Vec<WorkerTrace>,
    /// Workers dropped because none of their records fell in the task area.
    pub dropped: usize,
    /// Data rows read.
    pub rows: usize,
    /// Distinct worker ids seen (`workers.len() + dropped`).
    pub distinct_ids: usize,
}

impl IngestResult {
    /// Derive market [`Worker`] records: location = latest in-area record,
    /// working area = clipped bounding box, one sensing cost per worker.
    pub fn derive_workers(
        &self,
        costs: &[f64],
        cfg: &SystemConfig,
    ) -> Result<Vec<Worker>, HarnessError> {
        if costs.len() != self.workers.len() {
            return Err(HarnessError::Data(format!(
                "need {} sensing costs, got {}",
                self.workers.len(),
                costs.len()
            )));
        }
        self.workers
            .iter()
            .zip(costs)
            .map(|(t, &b)| {
                Worker::new(t.id, b, t.last_in_area, t.working_area, cfg)
                    .map_err(HarnessError::Model)
            })
            .collect()
    }
}

/// Parse and validate a trace CSV (`worker_id,timestamp,x,y` header).
/// Records are grouped per worker and sorted by timestamp; the working area
/// is the bounding box of *all* of a worker's records clipped to the task
/// area, and workers with no record inside the task area are dropped (the
/// count is reported). Malformed rows fail with their line number.
pub fn ingest_traces(csv_path: &Path, task_area: Rect) -> Result<IngestResult, HarnessError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(csv_path)?;
    {
        let headers = reader.headers()?;
        let expected = ["worker_id", "timestamp", "x", "y"];
        if headers.len() != expected.len()
            || headers.iter().zip(expected).any(|(h, e)| h.trim() != e)
        {
            return Err(HarnessError::Data(format!(
                "bad header: expected `worker_id,timestamp,x,y`, got `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
    }

    let mut by_worker: BTreeMap<u32, Vec<TraceRecord>> = BTreeMap::new();
    let mut rows = 0usize;
    for result in reader.records() {
        let record = result?;
        let line = record
            .position()
            .map(|p| p.line())
            .unwrap_or_default();
        let field = |idx: usize, name: &str| -> Result<&str, HarnessError> {
            record.get(idx).ok_or_else(|| {
                HarnessError::Data(format!("line {line}: missing field `{name}`"))
            })
        };
        if record.len() != 4 {
            return Err(HarnessError::Data(format!(
                "line {line}: expected 4 fields, got {}",
                record.len()
            )));
        }
        let worker_id: u32 = field(0, "worker_id")?.trim().parse().map_err(|e| {
            HarnessError::Data(format!("line {line}: worker_id: {e}"))
        })?;
        let num = |idx: usize, name: &str| -> Result<f64, HarnessError> {
            let v: f64 = field(idx, name)?.trim().parse().map_err(|e| {
                HarnessError::Data(format!("line {line}: {name}: {e}"))
            })?;
            if !v.is_finite() {
                return Err(HarnessError::Data(format!(
                    "line {line}: {name} must be finite, got {v}"
                )));
            }
            Ok(v)
        };
        let timestamp = num(1, "timestamp")?;
        let x = num(2, "x")?;
        let y = num(3, "y")?;
        rows += 1;
        by_worker
            .entry(worker_id)
            .or_default()
            .push(TraceRecord { worker_id, timestamp, x, y });
    }
    if rows == 0 {
        return Err(HarnessError::Data(format!(
            "{}: no trace records",
            csv_path.display()
        )));
    }

    let distinct_ids = by_worker.len();
    let mut workers = Vec::new();
    let mut dropped = 0usize;
    for (id, mut records) in by_worker {
        records.sort_by(|a, b| {
            a.timestamp
                .partial_cmp(&b.timestamp)
                .expect("finite timestamps")
        });
        let mut bbox = Rect::point(Point::new(records[0].x, records[0].y));
        for r in &records[1..] {
            bbox.min.x = bbox.min.x.min(r.x);
            bbox.min.y = bbox.min.y.min(r.y);
            bbox.max.x = bbox.max.x.max(r.x);
            bbox.max.y = bbox.max.y.max(r.y);
        }
        let last_in_area = records
            .iter()
            .rev()
            .find(|r| task_area.contains(Point::new(r.x, r.y)))
            .map(|r| Point::new(r.x, r.y));
        match (last_in_area, bbox.intersect(&task_area)) {
            (Some(loc), Some(working_area)) => {
                workers.push(WorkerTrace { id, records, working_area, last_in_area: loc });
            }
            _ => dropped += 1,
        }
    }

    Ok(IngestResult { workers, dropped, rows, distinct_ids })
}

// ---------------------------------------------------------------------------
// Sample sets
// ---------------------------------------------------------------------------

/// Per-time-slot location vectors (one point per employed worker), in
/// `[0,1]`-normalized coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    pub samples: Vec<Vec<Point>>,
    /// Physical bounds the normalized samples map back into.
    pub norm: Rect,
    /// `traces` or `synthetic:<spec>`.
    pub provenance: String,
    /// Slots (traces) or candidates (synthetic) discarded.
    pub skipped: usize,
}

impl SampleSet {
    /// Workers per sample.
    pub fn arity(&self) -> usize {
        self.samples.first().map_or(0, Vec::len)
    }

    /// Sample `idx` mapped back to physical coordinates.
    pub fn denormalized(&self, idx: usize) -> Vec<Point> {
        self.samples[idx].iter().map(|&p| self.norm.denormalize(p)).collect()
    }

    /// Rebind the physical bounds (generation happens in the unit square).
    pub fn with_norm(mut self, norm: Rect) -> Self {
        self.norm = norm;
        self
    }
}

/// Slice trace histories into fixed-length time slots and emit one sample
/// per slot in which *every* employed worker has at least one record; the
/// location used is the latest record at or before the slot end, clamped to
/// the task area and normalized. Slots missing any worker are skipped (the
/// count is reported).
pub fn build_samples(
    traces: &IngestResult,
    employed: &[u32],
    slot: f64,
    task_area: Rect,
) -> Result<SampleSet, HarnessError> {
    if !(slot > 0.0) {
        return Err(HarnessError::Data(format!("slot must be positive, got {slot}")));
    }
    if employed.is_empty() {
        return Err(HarnessError::Data("no employed workers".into()));
    }
    let mut chosen = Vec::with_capacity(employed.len());
    for &id in employed {
        let t = traces
            .workers
            .iter()
            .find(|t| t.id == id)
            .ok_or_else(|| {
                HarnessError::Data(format!("employed worker {id} has no trace records"))
            })?;
        chosen.push(t);
    }

    let t0 = chosen
        .iter()
        .map(|t| t.records.first().expect("nonempty").timestamp)
        .fold(f64::INFINITY, f64::min);
    let t_end = chosen
        .iter()
        .map(|t| t.records.last().expect("nonempty").timestamp)
        .fold(f64::NEG_INFINITY, f64::max);
    let n_slots = (((t_end - t0) / slot).ceil() as usize).max(1);

    let mut samples = Vec::new();
    let mut skipped = 0usize;
    for k in 0..n_slots {
        let start = t0 + k as f64 * slot;
        let end = start + slot;
        let last_slot = k + 1 == n_slots;
        let mut sample = Vec::with_capacity(chosen.len());
        let mut complete = true;
        for t in &chosen {
            // windows are [start, end), the final one closed at its end
            let in_window = |ts: f64| {
                ts >= start && (ts < end || (last_slot && ts <= end))
            };
            if !t.records.iter().any(|r| in_window(r.timestamp)) {
                complete = false;
                break;
            }
            // location: latest record at or before the slot end
            let upto = t.records.partition_point(|r| r.timestamp <= end);
            let latest = &t.records[upto - 1];
            let p = task_area.clamp(Point::new(latest.x, latest.y));
            sample.push(task_area.normalize(p));
        }
        if complete {
            samples.push(sample);
        } else {
            skipped += 1;
        }
    }

    if samples.is_empty() {
        return Err(HarnessError::Data(
            "no time slot contains a record for every employed worker".into(),
        ));
    }
    Ok(SampleSet { samples, norm: task_area, provenance: "traces".into(), skipped })
}

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

/// Synthetic location distributions (all in the unit square).
#[derive(Debug, Clone, PartialEq)]
pub enum SyntheticSpec {
    /// I.i.d. uniform per worker per sample.
    Uniform,
    /// Equal-weight isotropic Gaussian components, truncated to the square.
    GaussianMixture { centers: Vec<Point>, sigma: f64 },
    /// Per-worker uniform rectangles (cycled when fewer rects than workers).
    Rectangles { rects: Vec<Rect> },
    /// Two clusters with a per-sample split `k ~ U{k_min..=k_max}` of workers
    /// at `a` (the rest at `b`) and per-axis uniform noise.
    TwoCluster { a: Point, b: Point, noise: f64, k_min: usize, k_max: usize },
}

impl SyntheticSpec {
    fn tag(&self) -> &'static str {
        match self {
            SyntheticSpec::Uniform => "uniform",
            SyntheticSpec::GaussianMixture { .. } => "gaussian_mixture",
            SyntheticSpec::Rectangles { .. } => "rectangles",
            SyntheticSpec::TwoCluster { .. } => "two_cluster",
        }
    }
}

fn unit(p: Point) -> bool {
    Rect::square(1.0).contains(p)
}

/// Generate `n_samples` worker-location samples of arity `n_workers`,
/// seed-deterministically (the same seed always yields the same set).
pub fn gen_synthetic(
    spec: &SyntheticSpec,
    n_workers: usize,
    n_samples: usize,
    seed: u64,
) -> Result<SampleSet, HarnessError> {
    if n_workers == 0 || n_samples == 0 {
        return Err(HarnessError::Config(
            "synthetic generation needs n_workers >= 1 and n_samples >= 1".into(),
        ));
    }
    match spec {
        SyntheticSpec::Uniform => {}
        SyntheticSpec::GaussianMixture { centers, sigma } => {
            if centers.is_empty() {
                return Err(HarnessError::Config("mixture needs at least one center".into()));
            }
            if !centers.iter().all(|&c| unit(c)) {
                return Err(HarnessError::Config(
                    "mixture centers must lie in the unit square".into(),
                ));
            }
            if !(*sigma > 0.0) {
                return Err(HarnessError::Config(format!(
                    "mixture sigma must be positive, got {sigma}"
                )));
            }
        }
        SyntheticSpec::Rectangles { rects } => {
            if rects.is_empty() {
                return Err(HarnessError::Config("need at least one rectangle".into()));
            }
            if !rects.iter().all(|r| Rect::square(1.0).contains_rect(r)) {
                return Err(HarnessError::Config(
                    "rectangles must lie in the unit square".into(),
                ));
            }
        }
        SyntheticSpec::TwoCluster { a, b, noise, k_min, k_max } => {
            if !unit(*a) || !unit(*b) {
                return Err(HarnessError::Config(
                    "cluster centers must lie in the unit square".into(),
                ));
            }
            if !(*noise >= 0.0) {
                return Err(HarnessError::Config(format!(
                    "cluster noise must be nonnegative, got {noise}"
                )));
            }
            if k_min > k_max || *k_max > n_workers {
                return Err(HarnessError::Config(format!(
                    "cluster split must satisfy k_min <= k_max <= n_workers, got {k_min}..{k_max} of {n_workers}"
                )));
            }
        }
    }

    let mut rng = stage_rng(seed, "gen-synthetic");
    let square = Rect::square(1.0);
    let mut samples = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let mut sample = Vec::with_capacity(n_workers);
        match spec {
            SyntheticSpec::Uniform => {
                for _ in 0..n_workers {
                    sample.push(Point::new(rng.gen(), rng.gen()));
                }
            }
            SyntheticSpec::GaussianMixture { centers, sigma } => {
                for _ in 0..n_workers {
                    let c = centers[rng.gen_range(0..centers.len())];
                    let nx = Normal::new(c.x, *sigma).expect("validated sigma");
                    let ny = Normal::new(c.y, *sigma).expect("validated sigma");
                    sample.push(square.clamp(Point::new(nx.sample(&mut rng), ny.sample(&mut rng))));
                }
            }
            SyntheticSpec::Rectangles { rects } => {
                for i in 0..n_workers {
                    let r = &rects[i % rects.len()];
                    let x = if r.width() > 0.0 {
                        rng.gen_range(r.min.x..r.max.x)
                    } else {
                        r.min.x
                    };
                    let y = if r.height() > 0.0 {
                        rng.gen_range(r.min.y..r.max.y)
                    } else {
                        r.min.y
                    };
                    sample.push(Point::new(x, y));
                }
            }
            SyntheticSpec::TwoCluster { a, b, noise, k_min, k_max } => {
                let k = rng.gen_range(*k_min..=*k_max);
                for i in 0..n_workers {
                    let c = if i < k { *a } else { *b };
                    let p = if *noise > 0.0 {
                        Point::new(
                            c.x + rng.gen_range(-noise..*noise),
                            c.y + rng.gen_range(-noise..*noise),
                        )
                    } else {
                        c
                    };
                    sample.push(square.clamp(p));
                }
            }
        }
        samples.push(sample);
    }

    Ok(SampleSet {
        samples,
        norm: square,
        provenance: format!("synthetic:{}", spec.tag()),
        skipped: 0,
    })
}
