//! Domain types and closed-form power/utility/cost formulas.
//!
//! Every other module computes exclusively through these functions. All
//! quantities use SI units (meters, watts, bit/s, Hz) and `f64` throughout;
//! decibel inputs are converted to linear scale once, at configuration load.

use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative tolerance for cost/utility comparisons.
pub const REL_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid worker {id}: {reason}")]
    InvalidWorker { id: u32, reason: String },
    #[error("invalid deployment instance: {0}")]
    InvalidInstance(String),
    #[error("unknown worker id {0}")]
    UnknownWorker(u32),
}

// ---------------------------------------------------------------------------
// Geometry
// ---------------------------------------------------------------------------

/// A point on the ground plane (meters, or normalized units).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn coord(&self, axis: usize) -> f64 {
        match axis {
            0 => self.x,
            _ => self.y,
        }
    }

    pub fn set_coord(&mut self, axis: usize, v: f64) {
        match axis {
            0 => self.x = v,
            _ => self.y = v,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    /// Squared planar distance to another point.
    pub fn dist2(&self, other: Point) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }
}

/// Axis-aligned rectangle. May be degenerate (a segment or single point),
/// which occurs for working areas derived from a single trace record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min: Point,
    pub max: Point,
}

impl Rect {
    pub fn new(min: Point, max: Point) -> Result<Self, ModelError> {
        if !min.is_finite() || !max.is_finite() || min.x > max.x || min.y > max.y {
            return Err(ModelError::InvalidConfig(format!(
                "malformed rectangle [{},{}]x[{},{}]",
                min.x, max.x, min.y, max.y
            )));
        }
        Ok(Rect { min, max })
    }

    /// Rectangle spanning `[0, side]^2`.
    pub fn square(side: f64) -> Self {
        Rect {
            min: Point::new(0.0, 0.0),
            max: Point::new(side, side),
        }
    }

    pub fn point(p: Point) -> Self {
        Rect { min: p, max: p }
    }

    pub fn width(&self) -> f64 {
        self.max.x - self.min.x
    }

    pub fn height(&self) -> f64 {
        self.max.y - self.min.y
    }

    pub fn is_degenerate(&self) -> bool {
        self.width() <= 0.0 || self.height() <= 0.0
    }

    pub fn contains(&self, p: Point) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }

    pub fn contains_rect(&self, r: &Rect) -> bool {
        self.contains(r.min) && self.contains(r.max)
    }

    pub fn corners(&self) -> [Point; 4] {
        [
            self.min,
            Point::new(self.min.x, self.max.y),
            Point::new(self.max.x, self.min.y),
            self.max,
        ]
    }

    pub fn center(&self) -> Point {
        Point::new(
            0.5 * (self.min.x + self.max.x),
            0.5 * (self.min.y + self.max.y),
        )
    }

    /// Clamp a point into the rectangle.
    pub fn clamp(&self, p: Point) -> Point {
        Point::new(
            p.x.clamp(self.min.x, self.max.x),
            p.y.clamp(self.min.y, self.max.y),
        )
    }

    /// Affine map of a point into `[0,1]^2` coordinates of this rectangle.
    /// Requires a non-degenerate rectangle.
    pub fn normalize(&self, p: Point) -> Point {
        Point::new(
            (p.x - self.min.x) / self.width(),
            (p.y - self.min.y) / self.height(),
        )
    }

    /// Inverse of [`Rect::normalize`].
    pub fn denormalize(&self, p: Point) -> Point {
        Point::new(
            self.min.x + p.x * self.width(),
            self.min.y + p.y * self.height(),
        )
    }

    /// Intersection with another rectangle, if nonempty.
    pub fn intersect(&self, other: &Rect) -> Option<Rect> {
        let min = Point::new(self.min.x.max(other.min.x), self.min.y.max(other.min.y));
        let max = Point::new(self.max.x.min(other.max.x), self.max.y.min(other.max.y));
        if min.x <= max.x && min.y <= max.y {
            Some(Rect { min, max })
        } else {
            None
        }
    }
}

/// Convert a decibel quantity to linear scale.
pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

// ---------------------------------------------------------------------------
// Configuration and market actors
// ---------------------------------------------------------------------------

/// Physical and market constants shared by both phases.
///
/// `kappa = 1/(eta * gamma)` converts power received by a worker at distance
/// `d` into the power the base station must radiate (path loss `d^alpha`
/// divided by conversion efficiency and antenna gain).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    /// Channel gain-to-noise ratio (linear).
    pub g: f64,
    /// Subchannel bandwidth (Hz).
    pub bandwidth: f64,
    /// Path-loss exponent (>= 2).
    pub alpha: f64,
    /// Energy conversion efficiency (0 < eta < 1).
    pub eta: f64,
    /// Combined antenna gain (linear).
    pub gamma: f64,
    /// Derived charging-cost factor, exactly `1/(eta*gamma)`.
    pub kappa: f64,
    /// Mobile base station height (m).
    pub h: f64,
    /// Data utility scale parameter.
    pub a1: f64,
    /// Data utility rate-saturation parameter.
    pub a2: f64,
    /// Task area.
    pub task_area: Rect,
}

impl SystemConfig {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        g: f64,
        bandwidth: f64,
        alpha: f64,
        eta: f64,
        gamma: f64,
        h: f64,
        a1: f64,
        a2: f64,
        task_area: Rect,
    ) -> Result<Self, ModelError> {
        let err = |m: String| Err(ModelError::InvalidConfig(m));
        if !(g > 0.0) {
            return err(format!("g must be positive, got {g}"));
        }
        if !(bandwidth > 0.0) {
            return err(format!("bandwidth must be positive, got {bandwidth}"));
        }
        if !(alpha >= 2.0) {
            return err(format!("alpha must be >= 2, got {alpha}"));
        }
        if !(eta > 0.0 && eta < 1.0) {
            return err(format!("eta must be in (0,1), got {eta}"));
        }
        if !(gamma > 0.0) {
            return err(format!("gamma must be positive, got {gamma}"));
        }
        if !(h >= 0.0) {
            return err(format!("h must be nonnegative, got {h}"));
        }
        if !(a1 > 0.0 && a2 > 0.0) {
            return err(format!("a1, a2 must be positive, got {a1}, {a2}"));
        }
        if task_area.is_degenerate() {
            return err("task area must be non-degenerate".into());
        }
        Ok(SystemConfig {
            g,
            bandwidth,
            alpha,
            eta,
            gamma,
            kappa: 1.0 / (eta * gamma),
            h,
            a1,
            a2,
            task_area,
        })
    }

    /// Default market: 200 m square area, drone at 10 m, 90 dB gain-to-noise,
    /// 60 MHz subchannels, -30 dB antenna gain, 0.6 conversion efficiency.
    pub fn default_market() -> Self {
        SystemConfig::new(
            db_to_linear(90.0),
            60e6,
            2.0,
            0.6,
            db_to_linear(-30.0),
            10.0,
            1e4,
            200.0,
            Rect::square(200.0),
        )
        .expect("default market constants are valid")
    }
}

/// A registered worker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Worker {
    pub id: u32,
    /// Sensing energy cost per bit (W per bit/s).
    pub b: f64,
    /// True location (m).
    pub location: Point,
    /// Working area (axis-aligned, inside the task area; may be degenerate).
    pub working_area: Rect,
    /// Worst-case distance to the mobile BS: the largest distance from any
    /// point of the working area to any task-area corner, composed with the
    /// BS height.
    pub d_worst: f64,
}

impl Worker {
    /// Build a worker, deriving the worst-case distance from its working
    /// area and the task area. The maximum of the convex planar distance over
    /// two rectangles is attained at a corner pair.
    pub fn new(
        id: u32,
        b: f64,
        location: Point,
        working_area: Rect,
        cfg: &SystemConfig,
    ) -> Result<Self, ModelError> {
        let err = |reason: String| Err(ModelError::InvalidWorker { id, reason });
        if !(b > 0.0) {
            return err(format!("sensing cost must be positive, got {b}"));
        }
        if !location.is_finite() {
            return err("location must be finite".into());
        }
        if !working_area.contains(location) {
            return err("location must lie inside the working area".into());
        }
        if !cfg.task_area.contains_rect(&working_area) {
            return err("working area must lie inside the task area".into());
        }
        let d_worst = worst_case_distance(&working_area, &cfg.task_area, cfg.h);
        Ok(Worker {
            id,
            b,
            location,
            working_area,
            d_worst,
        })
    }
}

/// Largest distance between a point of `working_area` and a corner of
/// `task_area`, composed with height `h`.
pub fn worst_case_distance(working_area: &Rect, task_area: &Rect, h: f64) -> f64 {
    let mut max_d2: f64 = 0.0;
    for wc in working_area.corners() {
        for tc in task_area.corners() {
            max_d2 = max_d2.max(wc.dist2(tc));
        }
    }
    (max_d2 + h * h).sqrt()
}

/// Result of the task allocation phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationOutcome {
    /// Total charging power supplied by the platform (W).
    pub p_c: f64,
    /// Per-worker transmission rates (bit/s), aligned with the worker slice.
    pub rates: Vec<f64>,
    /// Ids of workers with rate above the employment threshold.
    pub employed: Vec<u32>,
    /// Per-worker charging power shares `(r_i / sum r) * p_c` (W).
    pub shares: Vec<f64>,
}

impl AllocationOutcome {
    /// Derive shares and the employed set from rates. Workers with rate
    /// strictly above `employ_tol` count as employed; shares stay
    /// proportional to all rates. With an all-zero rate profile no power
    /// flows and all shares are zero.
    pub fn new(p_c: f64, rates: Vec<f64>, workers: &[Worker], employ_tol: f64) -> Self {
        assert_eq!(rates.len(), workers.len(), "one rate per worker");
        let total: f64 = rates.iter().sum();
        let shares = if total > 0.0 {
            rates.iter().map(|r| r / total * p_c).collect()
        } else {
            vec![0.0; rates.len()]
        };
        let employed = workers
            .iter()
            .zip(&rates)
            .filter(|(_, &r)| r > employ_tol)
            .map(|(w, _)| w.id)
            .collect();
        AllocationOutcome {
            p_c,
            rates,
            employed,
            shares,
        }
    }
}

/// Weighted point set fed to a deployment mechanism: employed workers'
/// locations with charging-cost weights `w_i = share_i * kappa`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeploymentInstance {
    pub points: Vec<Point>,
    pub weights: Vec<f64>,
    pub config: SystemConfig,
}

impl DeploymentInstance {
    pub fn new(
        points: Vec<Point>,
        weights: Vec<f64>,
        config: SystemConfig,
    ) -> Result<Self, ModelError> {
        if points.is_empty() || points.len() != weights.len() {
            return Err(ModelError::InvalidInstance(format!(
                "need equally many points and weights, at least one; got {} and {}",
                points.len(),
                weights.len()
            )));
        }
        if points.iter().any(|p| !p.is_finite()) {
            return Err(ModelError::InvalidInstance("non-finite point".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(ModelError::InvalidInstance(
                "weights must be finite and nonnegative".into(),
            ));
        }
        if weights.iter().sum::<f64>() <= 0.0 {
            return Err(ModelError::InvalidInstance(
                "weights must not all be zero".into(),
            ));
        }
        Ok(DeploymentInstance {
            points,
            weights,
            config,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Closed-form operations
// ---------------------------------------------------------------------------

/// `(squared planar distance + h^2)^(alpha/2)` without an intermediate
/// square root; exact passthrough for alpha = 2.
#[inline]
fn dist2_pow(d2_with_h: f64, alpha: f64) -> f64 {
    if alpha == 2.0 {
        d2_with_h
    } else {
        d2_with_h.powf(alpha / 2.0)
    }
}

/// Distance between a ground point and the base station hovering at height
/// `h` above `bs_loc`. Always at least `h`.
pub fn distance(worker_loc: Point, bs_loc: Point, h: f64) -> f64 {
    (worker_loc.dist2(bs_loc) + h * h).sqrt()
}

/// Transmission power a worker needs to sustain rate `r` at distance `d`:
/// `(2^(r/B) - 1) * d^alpha / g`. Computed via `exp_m1` so that rates many
/// orders of magnitude below the bandwidth keep full precision.
pub fn transmission_power(r: f64, d: f64, cfg: &SystemConfig) -> f64 {
    debug_assert!(r >= 0.0 && d >= 0.0);
    (r / cfg.bandwidth * LN_2).exp_m1() * d.powf(cfg.alpha) / cfg.g
}

/// Worker's total power draw at rate `r`: transmission plus sensing `b*r`.
pub fn worker_power_cost(r: f64, d: f64, b: f64, cfg: &SystemConfig) -> f64 {
    transmission_power(r, d, cfg) + b * r
}

/// Power the base station must radiate so that a worker at distance `d`
/// receives `p_received`: `p_received * d^alpha * kappa`.
pub fn bs_charging_cost(p_received: f64, d: f64, cfg: &SystemConfig) -> f64 {
    p_received * d.powf(cfg.alpha) * cfg.kappa
}

/// Concave utility of the collected data:
/// `a1 * ln(1 + sum_i ln(1 + a2 * r_i))`.
pub fn data_utility(rates: &[f64], cfg: &SystemConfig) -> f64 {
    let inner: f64 = rates.iter().map(|&r| (cfg.a2 * r).ln_1p()).sum();
    cfg.a1 * inner.ln_1p()
}

/// Platform utility in the task allocation phase: data utility minus the
/// worst-case charging cost of supplying `p_c` split proportionally to
/// rates. With an all-zero rate profile no power flows (zero cost).
pub fn platform_utility_phase1(
    p_c: f64,
    rates: &[f64],
    workers: &[Worker],
    cfg: &SystemConfig,
) -> f64 {
    debug_assert_eq!(rates.len(), workers.len());
    let total: f64 = rates.iter().sum();
    let q = data_utility(rates, cfg);
    if total <= 0.0 {
        return q;
    }
    let cost: f64 = rates
        .iter()
        .zip(workers)
        .map(|(&r, w)| r / total * p_c * w.d_worst.powf(cfg.alpha) * cfg.kappa)
        .sum();
    q - cost
}

/// Worker `i`'s utility in the task allocation phase: its proportional power
/// share minus its worst-case power cost. Zero when its rate is zero.
pub fn worker_utility_phase1(
    i: usize,
    rates: &[f64],
    p_c: f64,
    workers: &[Worker],
    cfg: &SystemConfig,
) -> f64 {
    debug_assert_eq!(rates.len(), workers.len());
    let r = rates[i];
    if r == 0.0 {
        return 0.0;
    }
    let total: f64 = rates.iter().sum();
    r / total * p_c - worker_power_cost(r, workers[i].d_worst, workers[i].b, cfg)
}

/// Worker utility in the deployment phase: the allotted charging share minus
/// the actual power cost at the realized distance to `bs_loc`. Strictly
/// decreasing in that distance.
pub fn worker_utility_phase2(
    id: u32,
    bs_loc: Point,
    outcome: &AllocationOutcome,
    workers: &[Worker],
    cfg: &SystemConfig,
) -> Result<f64, ModelError> {
    let idx = workers
        .iter()
        .position(|w| w.id == id)
        .ok_or(ModelError::UnknownWorker(id))?;
    let w = &workers[idx];
    let d = distance(w.location, bs_loc, cfg.h);
    Ok(outcome.shares[idx] - worker_power_cost(outcome.rates[idx], d, w.b, cfg))
}

/// Platform crowdsourcing cost of serving the instance from `bs_loc`:
/// `sum_i w_i * d_i^alpha` with `d_i` including the BS height. Convex in
/// `bs_loc` for alpha >= 2.
pub fn platform_cost_phase2(bs_loc: Point, instance: &DeploymentInstance) -> f64 {
    let h2 = instance.config.h * instance.config.h;
    let alpha = instance.config.alpha;
    instance
        .points
        .iter()
        .zip(&instance.weights)
        .map(|(p, &w)| w * dist2_pow(p.dist2(bs_loc) + h2, alpha))
        .sum()
}

/// Analytic gradient of [`platform_cost_phase2`] with respect to `bs_loc`.
pub fn platform_cost_phase2_grad(bs_loc: Point, instance: &DeploymentInstance) -> [f64; 2] {
    let h2 = instance.config.h * instance.config.h;
    let alpha = instance.config.alpha;
    let mut gx = 0.0;
    let mut gy = 0.0;
    for (p, &w) in instance.points.iter().zip(&instance.weights) {
        let q = p.dist2(bs_loc) + h2;
        // d/dx of q^(alpha/2) = alpha * q^(alpha/2 - 1) * (x - p.x)
        let f = if alpha == 2.0 {
            2.0 * w
        } else {
            w * alpha * q.powf(alpha / 2.0 - 1.0)
        };
        gx += f * (bs_loc.x - p.x);
        gy += f * (bs_loc.y - p.y);
    }
    [gx, gy]
}
