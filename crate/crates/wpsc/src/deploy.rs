//! Deployment mechanisms for the mobile base station.
//!
//! The platform must pick a hovering point from the employed workers'
//! *reported* locations. Because workers prefer the station close to
//! themselves (phase-2 utility strictly decreases with distance), placement
//! rules are audited for strategyproofness: no single worker may gain by
//! misreporting. The generalized-median family (MED, MSC, and the learned
//! MDL mechanism from [`crate::mdl`]) passes that audit; the unconstrained
//! cost minimizer OPT and the mean-of-reports rule serve as baselines.

use serde::{Deserialize, Serialize};

use crate::mdl::MdlModel;
use crate::model::{
    platform_cost_phase2, platform_cost_phase2_grad, worker_utility_phase2, AllocationOutcome,
    DeploymentInstance, ModelError, Point, Rect, SystemConfig, Worker,
};

/// How the per-axis median resolves an even number of reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvenRule {
    /// Midpoint of the two middle order statistics. Matches the original
    /// algorithm statement but is manipulable by the middle reporters.
    PaperAverage,
    /// Lower of the two middle order statistics; a generalized median, hence
    /// strategyproof.
    LowerMedian,
}

/// A base-station placement rule.
#[derive(Debug, Clone, PartialEq)]
pub enum Mechanism {
    /// Coordinate-wise median of the reports.
    Med { rule: EvenRule },
    /// Median of the reports augmented with one fixed phantom point.
    Msc { constant: Point, rule: EvenRule },
    /// Learned monotonic max-min network mechanism.
    Mdl { model: Box<MdlModel> },
    /// Unconstrained cost minimizer (not strategyproof; the benchmark).
    Opt,
    /// Mean of the reports (deliberately manipulable negative control).
    Mean,
}

impl Mechanism {
    /// Stable identifier used in reports and config files.
    pub fn name(&self) -> &'static str {
        match self {
            Mechanism::Med { rule: EvenRule::PaperAverage } => "med_average",
            Mechanism::Med { rule: EvenRule::LowerMedian } => "med_lower",
            Mechanism::Msc { .. } => "msc",
            Mechanism::Mdl { .. } => "mdl",
            Mechanism::Opt => "opt",
            Mechanism::Mean => "mean",
        }
    }

    /// Place the base station given reported locations and per-worker cost
    /// weights (weights are consulted only by cost-aware rules).
    pub fn place(
        &self,
        reports: &[Point],
        weights: &[f64],
        cfg: &SystemConfig,
    ) -> Result<Point, ModelError> {
        match self {
            Mechanism::Med { rule } => med(reports, *rule),
            Mechanism::Msc { constant, rule } => msc(reports, *constant, *rule),
            Mechanism::Mdl { model } => crate::mdl::mechanism_place(model, reports)
                .map_err(|e| ModelError::InvalidInstance(e.to_string())),
            Mechanism::Opt => {
                let inst =
                    DeploymentInstance::new(reports.to_vec(), weights.to_vec(), cfg.clone())?;
                Ok(opt_deploy(&inst))
            }
            Mechanism::Mean => {
                if reports.is_empty() {
                    return Err(ModelError::InvalidInstance("no reports".into()));
                }
                let n = reports.len() as f64;
                Ok(Point::new(
                    reports.iter().map(|p| p.x).sum::<f64>() / n,
                    reports.iter().map(|p| p.y).sum::<f64>() / n,
                ))
            }
        }
    }
}

/// Outcome of a strategyproofness audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    /// Total (worker, deviation) pairs evaluated.
    pub tested_deviations: usize,
    /// Most profitable utility gain found over all deviations (W).
    pub max_utility_gain: f64,
    /// The most profitable deviation beyond tolerance, if any.
    pub violating_case: Option<ViolatingCase>,
    /// True iff every tested gain stays within tolerance.
    pub passed: bool,
}

/// A deviation that increased a worker's utility beyond tolerance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolatingCase {
    pub worker_id: u32,
    pub true_location: Point,
    pub reported_location: Point,
    pub utility_gain: f64,
}

// ---------------------------------------------------------------------------
// Median-family placement rules
// ---------------------------------------------------------------------------

fn axis_median(values: &mut [f64], rule: EvenRule) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite coordinates"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        match rule {
            EvenRule::PaperAverage => 0.5 * (values[n / 2 - 1] + values[n / 2]),
            EvenRule::LowerMedian => values[n / 2 - 1],
        }
    }
}

/// Coordinate-wise median of the reported locations.
pub fn med(locations: &[Point], rule: EvenRule) -> Result<Point, ModelError> {
    if locations.is_empty() {
        return Err(ModelError::InvalidInstance(
            "median of zero locations".into(),
        ));
    }
    let mut xs: Vec<f64> = locations.iter().map(|p| p.x).collect();
    let mut ys: Vec<f64> = locations.iter().map(|p| p.y).collect();
    Ok(Point::new(axis_median(&mut xs, rule), axis_median(&mut ys, rule)))
}

/// Median of the reports augmented with one constant phantom point.
pub fn msc(locations: &[Point], constant: Point, rule: EvenRule) -> Result<Point, ModelError> {
    if locations.is_empty() {
        return Err(ModelError::InvalidInstance(
            "median of zero locations".into(),
        ));
    }
    let mut augmented = locations.to_vec();
    augmented.push(constant);
    med(&augmented, rule)
}

/// Pick the phantom constant by grid search (`grid` x `grid` over the task
/// area of the first sample) minimizing the empirical mean platform cost of
/// the resulting rule over the samples. Ties resolve to the first grid point
/// scanned (x-major from the area's min corner).
pub fn msc_constant(
    samples: &[DeploymentInstance],
    rule: EvenRule,
    grid: usize,
) -> Result<Point, ModelError> {
    if samples.is_empty() {
        return Err(ModelError::InvalidInstance("no samples".into()));
    }
    let area = samples[0].config.task_area;
    let steps = grid.max(2) - 1;
    let mut best = (f64::INFINITY, area.min);
    for i in 0..=steps {
        let x = area.min.x + area.width() * i as f64 / steps as f64;
        for j in 0..=steps {
            let y = area.min.y + area.height() * j as f64 / steps as f64;
            let candidate = Point::new(x, y);
            let mut total = 0.0;
            for s in samples {
                let at = msc(&s.points, candidate, rule)?;
                total += platform_cost_phase2(at, s);
            }
            if total < best.0 {
                best = (total, candidate);
            }
        }
    }
    Ok(best.1)
}

// ---------------------------------------------------------------------------
// Unconstrained optimum
// ---------------------------------------------------------------------------

/// Minimizer of the platform cost over the task area. The cost is convex for
/// any path-loss exponent >= 2; the quadratic case has the weighted-centroid
/// closed form, every other case runs projected gradient descent with
/// backtracking line search.
pub fn opt_deploy(instance: &DeploymentInstance) -> Point {
    let cfg = &instance.config;
    let area = cfg.task_area;
    let wsum: f64 = instance.weights.iter().sum();
    let centroid = Point::new(
        instance
            .points
            .iter()
            .zip(&instance.weights)
            .map(|(p, w)| w * p.x)
            .sum::<f64>()
            / wsum,
        instance
            .points
            .iter()
            .zip(&instance.weights)
            .map(|(p, w)| w * p.y)
            .sum::<f64>()
            / wsum,
    );
    if cfg.alpha == 2.0 {
        return area.clamp(centroid);
    }

    let scale = area.width().max(area.height());
    let grad_tol = 1e-8 * wsum * scale.powf(cfg.alpha);
    let mut at = area.clamp(centroid);
    let mut cost = platform_cost_phase2(at, instance);
    for _ in 0..10_000 {
        let g = platform_cost_phase2_grad(at, instance);
        let gnorm = (g[0] * g[0] + g[1] * g[1]).sqrt();
        if gnorm <= grad_tol {
            break;
        }
        // First trial step moves at most one area scale.
        let mut t = scale / gnorm;
        let mut advanced = false;
        for _ in 0..60 {
            let trial = area.clamp(Point::new(at.x - t * g[0], at.y - t * g[1]));
            let trial_cost = platform_cost_phase2(trial, instance);
            let dx = trial.x - at.x;
            let dy = trial.y - at.y;
            // Armijo condition on the projected step.
            if trial_cost <= cost + 1e-4 * (g[0] * dx + g[1] * dy) {
                if dx == 0.0 && dy == 0.0 {
                    return at; // pinned to the boundary
                }
                at = trial;
                cost = trial_cost;
                advanced = true;
                break;
            }
            t *= 0.5;
        }
        if !advanced {
            break; // step underflow: already at numerical optimum
        }
    }
    at
}

// ---------------------------------------------------------------------------
// Benchmarks and audits
// ---------------------------------------------------------------------------

/// Average and worst-case cost ratios of a mechanism against the
/// unconstrained optimum over a set of instances:
/// `omega_avg = mean mechanism cost / mean OPT cost`,
/// `omega_wst = max per-instance ratio`.
pub fn performance_ratios(
    mechanism: &Mechanism,
    instances: &[DeploymentInstance],
) -> Result<(f64, f64), ModelError> {
    if instances.is_empty() {
        return Err(ModelError::InvalidInstance("no test instances".into()));
    }
    let mut mech_total = 0.0;
    let mut opt_total = 0.0;
    let mut worst: f64 = 0.0;
    for inst in instances {
        let at = mechanism.place(&inst.points, &inst.weights, &inst.config)?;
        let mech_cost = platform_cost_phase2(at, inst);
        let opt_cost = platform_cost_phase2(opt_deploy(inst), inst);
        if opt_cost <= 0.0 {
            return Err(ModelError::InvalidInstance(
                "zero optimum cost; ratios undefined".into(),
            ));
        }
        mech_total += mech_cost;
        opt_total += opt_cost;
        worst = worst.max(mech_cost / opt_cost);
    }
    Ok((mech_total / opt_total, worst))
}

/// Uniform `per_axis x per_axis` grid over a rectangle (corners included).
pub fn deviation_grid(area: &Rect, per_axis: usize) -> Vec<Point> {
    let steps = per_axis.max(2) - 1;
    let mut pts = Vec::with_capacity(per_axis * per_axis);
    for i in 0..=steps {
        let x = area.min.x + area.width() * i as f64 / steps as f64;
        for j in 0..=steps {
            let y = area.min.y + area.height() * j as f64 / steps as f64;
            pts.push(Point::new(x, y));
        }
    }
    pts
}

/// Exhaustive single-worker misreport audit. For every employed worker and
/// every grid deviation (plus the truthful report), the mechanism is re-run
/// with that worker's report replaced while everyone else stays truthful; the
/// worker's utility is always evaluated at its *true* location. Passes iff no
/// gain exceeds `1e-9 * |truthful utility| + 1e-12`.
pub fn strategyproofness_audit(
    mechanism: &Mechanism,
    outcome: &AllocationOutcome,
    workers: &[Worker],
    cfg: &SystemConfig,
    deviations: &[Point],
) -> Result<AuditReport, ModelError> {
    let employed: Vec<usize> = workers
        .iter()
        .enumerate()
        .filter(|(_, w)| outcome.employed.contains(&w.id))
        .map(|(i, _)| i)
        .collect();
    if employed.is_empty() {
        return Err(ModelError::InvalidInstance(
            "no employed workers to audit".into(),
        ));
    }
    let truthful: Vec<Point> = employed.iter().map(|&i| workers[i].location).collect();
    let weights: Vec<f64> = employed
        .iter()
        .map(|&i| outcome.shares[i] * cfg.kappa)
        .collect();

    let base_at = mechanism.place(&truthful, &weights, cfg)?;
    let mut tested = 0usize;
    let mut max_gain = f64::NEG_INFINITY;
    let mut worst: Option<ViolatingCase> = None;
    let mut passed = true;

    for (slot, &i) in employed.iter().enumerate() {
        let w = &workers[i];
        let u_truth = worker_utility_phase2(w.id, base_at, outcome, workers, cfg)?;
        let tol = 1e-9 * u_truth.abs() + 1e-12;
        let mut reports = truthful.clone();
        for dev in deviations.iter().chain(std::iter::once(&w.location)) {
            reports[slot] = *dev;
            let at = mechanism.place(&reports, &weights, cfg)?;
            let u_dev = worker_utility_phase2(w.id, at, outcome, workers, cfg)?;
            let gain = u_dev - u_truth;
            tested += 1;
            if gain > max_gain {
                max_gain = gain;
                if gain > tol {
                    worst = Some(ViolatingCase {
                        worker_id: w.id,
                        true_location: w.location,
                        reported_location: *dev,
                        utility_gain: gain,
                    });
                }
            }
            if gain > tol {
                passed = false;
            }
        }
        reports[slot] = w.location;
    }

    Ok(AuditReport {
        tested_deviations: tested,
        max_utility_gain: max_gain,
        violating_case: if passed { None } else { worst },
        passed,
    })
}

/// Check the worst-case guarantee of the median placement: its cost must stay
/// within `2^(alpha/2) * n^(alpha/2 - 1) * (r_max / r_min)` of the optimum
/// (both even-count rules are held to the bound), with relative slack 1e-6.
pub fn approx_bound_check(instance: &DeploymentInstance, rates: &[f64]) -> bool {
    assert_eq!(rates.len(), instance.len(), "one rate per instance point");
    assert!(rates.iter().all(|&r| r > 0.0), "employed rates must be positive");
    let alpha = instance.config.alpha;
    let n = instance.len() as f64;
    let r_max = rates.iter().fold(f64::MIN, |a, &b| a.max(b));
    let r_min = rates.iter().fold(f64::MAX, |a, &b| a.min(b));
    let bound = 2f64.powf(alpha / 2.0) * n.powf(alpha / 2.0 - 1.0) * (r_max / r_min);

    let opt_cost = platform_cost_phase2(opt_deploy(instance), instance);
    [EvenRule::PaperAverage, EvenRule::LowerMedian]
        .into_iter()
        .all(|rule| {
            let at = med(&instance.points, rule).expect("nonempty instance");
            platform_cost_phase2(at, instance) <= bound * opt_cost * (1.0 + 1e-6)
        })
}

/// Closed-form expected median-placement cost for `n` i.i.d. uniform workers
/// on the unit square with quadratic path loss and unit rates:
/// `p_c * kappa * (E[squared planar distance] + h^2)` where the expectation
/// is `(n-1)(n+3) / (6n(n+2))` for odd `n` and `(n-1)(n+4) / (6(n+1)(n+2))`
/// for even `n` (midpoint rule).
pub fn expected_med_cost_uniform(n: usize, h: f64, p_c: f64, kappa: f64) -> f64 {
    assert!(n >= 1);
    let nf = n as f64;
    let moment = if n % 2 == 1 {
        (nf - 1.0) * (nf + 3.0) / (6.0 * nf * (nf + 2.0))
    } else {
        (nf - 1.0) * (nf + 4.0) / (6.0 * (nf + 1.0) * (nf + 2.0))
    };
    p_c * kappa * (moment + h * h)
}

/// Closed-form expected cost of the one-phantom median for three i.i.d.
/// uniform workers on the unit square (quadratic path loss, unit rates), as a
/// polynomial in the phantom constant `(x_c, y_c)`.
pub fn msc_expected_cost_n3(constant: Point, h: f64, p_c: f64, kappa: f64) -> f64 {
    let axis = |c: f64| -c.powi(4) / 4.0 + c.powi(3) / 2.0 - c.powi(2) / 4.0;
    p_c * kappa * (axis(constant.x) + axis(constant.y) + 3.0 / 20.0 + h * h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn unit_cfg(alpha: f64, h: f64) -> SystemConfig {
        SystemConfig::new(1e9, 60e6, alpha, 0.6, 1e-3, h, 1e4, 200.0, Rect::square(1.0)).unwrap()
    }

    fn inst(points: Vec<Point>, weights: Vec<f64>, cfg: &SystemConfig) -> DeploymentInstance {
        DeploymentInstance::new(points, weights, cfg.clone()).unwrap()
    }

    #[test]
    fn med_examples() {
        let one = med(&[Point::new(3.0, 4.0)], EvenRule::PaperAverage).unwrap();
        assert_eq!(one, Point::new(3.0, 4.0));

        let tri = med(
            &[Point::new(0.0, 0.0), Point::new(1.0, 0.0), Point::new(0.0, 1.0)],
            EvenRule::LowerMedian,
        )
        .unwrap();
        assert_eq!(tri, Point::new(0.0, 0.0));

        let pair = [Point::new(0.0, 0.0), Point::new(2.0, 2.0)];
        assert_eq!(med(&pair, EvenRule::PaperAverage).unwrap(), Point::new(1.0, 1.0));
        assert_eq!(med(&pair, EvenRule::LowerMedian).unwrap(), Point::new(0.0, 0.0));

        assert!(med(&[], EvenRule::PaperAverage).is_err());
    }

    #[test]
    fn msc_examples() {
        // four sorted x values {0.1, 0.2, 0.5, 0.9}: average rule gives 0.35
        let pts = [
            Point::new(0.1, 0.1),
            Point::new(0.2, 0.2),
            Point::new(0.9, 0.9),
        ];
        let out = msc(&pts, Point::new(0.5, 0.5), EvenRule::PaperAverage).unwrap();
        assert!((out.x - 0.35).abs() < 1e-15);
        assert!((out.y - 0.35).abs() < 1e-15);

        // single location: midpoint of location and constant
        let single = msc(
            &[Point::new(0.2, 0.8)],
            Point::new(0.6, 0.0),
            EvenRule::PaperAverage,
        )
        .unwrap();
        assert_eq!(single, Point::new(0.4, 0.4));

        // constant duplicating an input point, odd augmented count
        let dup_in = [
            Point::new(0.1, 0.1),
            Point::new(0.5, 0.5),
            Point::new(0.9, 0.9),
        ];
        let via_msc = msc(&dup_in, Point::new(0.5, 0.5), EvenRule::LowerMedian).unwrap();
        let mut plus = dup_in.to_vec();
        plus.push(Point::new(0.5, 0.5));
        assert_eq!(via_msc, med(&plus, EvenRule::LowerMedian).unwrap());
    }

    #[test]
    fn msc_constant_symmetric_samples_center() {
        let cfg = unit_cfg(2.0, 0.0);
        // mirrored pair of 3-point samples about the center (0.5, 0.5)
        let s1 = vec![Point::new(0.1, 0.3), Point::new(0.4, 0.9), Point::new(0.7, 0.2)];
        let s2: Vec<Point> = s1.iter().map(|p| Point::new(1.0 - p.x, 1.0 - p.y)).collect();
        let samples = vec![
            inst(s1, vec![1.0; 3], &cfg),
            inst(s2, vec![1.0; 3], &cfg),
        ];
        let c = msc_constant(&samples, EvenRule::PaperAverage, 21).unwrap();
        let cell = 1.0 / 20.0;
        assert!((c.x - 0.5).abs() <= cell + 1e-12, "constant {c:?}");
        assert!((c.y - 0.5).abs() <= cell + 1e-12, "constant {c:?}");
    }

    #[test]
    fn msc_constant_single_sample_is_grid_argmin() {
        let cfg = unit_cfg(2.0, 0.0);
        let sample = inst(
            vec![Point::new(0.15, 0.7), Point::new(0.6, 0.6), Point::new(0.8, 0.1)],
            vec![2.0, 1.0, 0.5],
            &cfg,
        );
        let samples = vec![sample.clone()];
        let c = msc_constant(&samples, EvenRule::PaperAverage, 21).unwrap();
        let best_cost =
            platform_cost_phase2(msc(&sample.points, c, EvenRule::PaperAverage).unwrap(), &sample);
        for cand in deviation_grid(&cfg.task_area, 21) {
            let cost = platform_cost_phase2(
                msc(&sample.points, cand, EvenRule::PaperAverage).unwrap(),
                &sample,
            );
            assert!(best_cost <= cost + 1e-15);
        }
    }

    #[test]
    fn opt_examples() {
        let cfg = unit_cfg(2.0, 0.0);
        // single point
        let single = inst(vec![Point::new(0.3, 0.8)], vec![5.0], &cfg);
        assert_eq!(opt_deploy(&single), Point::new(0.3, 0.8));

        // two equal weights, quadratic: midpoint
        let cfg2 = SystemConfig::new(1e9, 60e6, 2.0, 0.6, 1e-3, 0.0, 1e4, 200.0, Rect::square(2.0))
            .unwrap();
        let two = inst(
            vec![Point::new(0.0, 0.0), Point::new(2.0, 0.0)],
            vec![1.0, 1.0],
            &cfg2,
        );
        assert_eq!(opt_deploy(&two), Point::new(1.0, 0.0));
    }

    #[test]
    fn opt_alpha3_matches_refined_grid() {
        let cfg = unit_cfg(3.0, 0.1);
        let mut rng = crate::rng::stage_rng(21, "opt-grid");
        for _ in 0..5 {
            let points: Vec<Point> =
                (0..3).map(|_| Point::new(rng.gen(), rng.gen())).collect();
            let weights: Vec<f64> = (0..3).map(|_| rng.gen_range(0.5..2.0)).collect();
            let instance = inst(points, weights, &cfg);
            let solved = opt_deploy(&instance);

            // 400x400 grid, then a second 400x400 pass around the best cell
            let mut best = (f64::INFINITY, Point::new(0.0, 0.0));
            let scan = |x0: f64, x1: f64, y0: f64, y1: f64,
                        best: &mut (f64, Point)| {
                for i in 0..=400 {
                    let x = x0 + (x1 - x0) * i as f64 / 400.0;
                    for j in 0..=400 {
                        let y = y0 + (y1 - y0) * j as f64 / 400.0;
                        let c = platform_cost_phase2(Point::new(x, y), &instance);
                        if c < best.0 {
                            *best = (c, Point::new(x, y));
                        }
                    }
                }
            };
            scan(0.0, 1.0, 0.0, 1.0, &mut best);
            let coarse = best.1;
            let cell = 1.0 / 400.0;
            scan(
                (coarse.x - cell).max(0.0),
                (coarse.x + cell).min(1.0),
                (coarse.y - cell).max(0.0),
                (coarse.y + cell).min(1.0),
                &mut best,
            );
            assert!(
                (solved.x - best.1.x).abs() < 1e-3 && (solved.y - best.1.y).abs() < 1e-3,
                "solver {solved:?} vs grid {:?}",
                best.1
            );
            // and the solver never does worse than the grid oracle
            let solved_cost = platform_cost_phase2(solved, &instance);
            assert!(solved_cost <= best.0 * (1.0 + 1e-9));
        }
    }

    #[test]
    fn performance_ratio_examples() {
        let cfg = unit_cfg(2.0, 0.0);
        let i1 = inst(
            vec![Point::new(0.0, 0.0), Point::new(1.0, 0.0), Point::new(0.0, 1.0)],
            vec![1.0; 3],
            &cfg,
        );
        let cfg2 = SystemConfig::new(1e9, 60e6, 2.0, 0.6, 1e-3, 0.0, 1e4, 200.0, Rect::square(2.0))
            .unwrap();
        let i2 = inst(
            vec![Point::new(0.0, 0.0), Point::new(2.0, 0.0)],
            vec![1.0, 1.0],
            &cfg2,
        );

        let (avg, wst) = performance_ratios(&Mechanism::Opt, &[i1.clone(), i2.clone()]).unwrap();
        assert!((avg - 1.0).abs() < 1e-12 && (wst - 1.0).abs() < 1e-12);

        // hand-computed: med costs 2 and 4, opt costs 4/3 and 2
        let med = Mechanism::Med { rule: EvenRule::LowerMedian };
        let (avg, wst) = performance_ratios(&med, &[i1, i2]).unwrap();
        assert!((avg - 1.8).abs() < 1e-12, "avg {avg}");
        assert!((wst - 2.0).abs() < 1e-12, "wst {wst}");
        assert!(wst >= avg && avg >= 1.0 - 1e-9);
    }

    // A desk-scale market where the transmit-power term moves materially with
    // the deployment point, so misreporting gains clear the audit tolerance.
    fn market_with_two_workers() -> (SystemConfig, Vec<Worker>, AllocationOutcome) {
        let cfg =
            SystemConfig::new(100.0, 1.0, 2.0, 0.2, 0.05, 0.1, 10.0, 5.0, Rect::square(1.0))
                .unwrap();
        let ws = vec![
            Worker::new(1, 0.01, Point::new(0.3, 0.5), Rect::point(Point::new(0.3, 0.5)), &cfg)
                .unwrap(),
            Worker::new(2, 0.01, Point::new(0.7, 0.5), Rect::point(Point::new(0.7, 0.5)), &cfg)
                .unwrap(),
        ];
        let outcome = AllocationOutcome::new(2.0, vec![1.0, 1.0], &ws, 0.0);
        (cfg, ws, outcome)
    }

    #[test]
    fn audit_truthful_report_gains_nothing() {
        let (cfg, ws, outcome) = market_with_two_workers();
        let med = Mechanism::Med { rule: EvenRule::LowerMedian };
        // grid containing only the truthful locations: all gains exactly 0
        let grid = [ws[0].location, ws[1].location];
        let rep = strategyproofness_audit(&med, &outcome, &ws, &cfg, &grid).unwrap();
        assert!(rep.passed);
        assert_eq!(rep.max_utility_gain, 0.0);
        assert!(rep.violating_case.is_none());
    }

    #[test]
    fn audit_flags_mean_of_reports() {
        let (cfg, ws, outcome) = market_with_two_workers();
        let grid = deviation_grid(&cfg.task_area, 21);
        let rep = strategyproofness_audit(&Mechanism::Mean, &outcome, &ws, &cfg, &grid).unwrap();
        assert!(!rep.passed, "mean rule must be manipulable");
        assert!(rep.max_utility_gain > 0.0);
        let case = rep.violating_case.expect("violating deviation recorded");
        // the profitable lie pulls the average toward the liar
        let honest = Mechanism::Mean
            .place(&[ws[0].location, ws[1].location], &[1.0, 1.0], &cfg)
            .unwrap();
        let mut lied = [ws[0].location, ws[1].location];
        let liar = if case.worker_id == 1 { 0 } else { 1 };
        lied[liar] = case.reported_location;
        let shifted = Mechanism::Mean.place(&lied, &[1.0, 1.0], &cfg).unwrap();
        let d_honest = crate::model::distance(ws[liar].location, honest, cfg.h);
        let d_shifted = crate::model::distance(ws[liar].location, shifted, cfg.h);
        assert!(d_shifted < d_honest);
    }

    #[test]
    fn audit_passes_med_lower_on_random_instances() {
        let cfg = SystemConfig::default_market();
        let mut rng = crate::rng::stage_rng(22, "audit-med");
        let grid = deviation_grid(&cfg.task_area, 21);
        for _ in 0..5 {
            let n = rng.gen_range(2..=5);
            let ws: Vec<Worker> = (0..n)
                .map(|i| {
                    let p = Point::new(rng.gen_range(0.0..200.0), rng.gen_range(0.0..200.0));
                    Worker::new(i, 1e-4, p, Rect::point(p), &cfg).unwrap()
                })
                .collect();
            let rates: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..0.06)).collect();
            let outcome = AllocationOutcome::new(rng.gen_range(0.5..3.0), rates, &ws, 0.0);
            for mech in [
                Mechanism::Med { rule: EvenRule::LowerMedian },
                Mechanism::Msc { constant: Point::new(100.0, 100.0), rule: EvenRule::LowerMedian },
            ] {
                let rep = strategyproofness_audit(&mech, &outcome, &ws, &cfg, &grid).unwrap();
                assert!(
                    rep.passed,
                    "{} violated: {:?}",
                    mech.name(),
                    rep.violating_case
                );
            }
        }
    }

    #[test]
    fn median_outcome_range_anonymity_monotonicity() {
        let mut rng = crate::rng::stage_rng(23, "median-props");
        for _ in 0..200 {
            let n = rng.gen_range(1..=7);
            let pts: Vec<Point> = (0..n).map(|_| Point::new(rng.gen(), rng.gen())).collect();
            let rule = if rng.gen() { EvenRule::PaperAverage } else { EvenRule::LowerMedian };
            let constant = Point::new(rng.gen(), rng.gen());
            for out in [
                med(&pts, rule).unwrap(),
                msc(&pts, constant, rule).unwrap(),
            ] {
                let mut xs: Vec<f64> = pts.iter().map(|p| p.x).collect();
                let mut ys: Vec<f64> = pts.iter().map(|p| p.y).collect();
                xs.push(constant.x);
                ys.push(constant.y);
                let (xmin, xmax) = xs.iter().fold((f64::MAX, f64::MIN), |a, &v| (a.0.min(v), a.1.max(v)));
                let (ymin, ymax) = ys.iter().fold((f64::MAX, f64::MIN), |a, &v| (a.0.min(v), a.1.max(v)));
                assert!(out.x >= xmin && out.x <= xmax);
                assert!(out.y >= ymin && out.y <= ymax);
            }

            // anonymity: reversed order gives the identical output
            let mut rev = pts.clone();
            rev.reverse();
            assert_eq!(med(&pts, rule).unwrap(), med(&rev, rule).unwrap());
            assert_eq!(
                msc(&pts, constant, rule).unwrap(),
                msc(&rev, constant, rule).unwrap()
            );

            // per-axis monotonicity under a single-coordinate increase
            let victim = rng.gen_range(0..n);
            let mut bumped = pts.clone();
            bumped[victim].x += rng.gen_range(0.0..0.5);
            assert!(med(&bumped, rule).unwrap().x >= med(&pts, rule).unwrap().x);
            assert!(
                msc(&bumped, constant, rule).unwrap().x >= msc(&pts, constant, rule).unwrap().x
            );
        }
    }

    #[test]
    fn approx_bound_examples() {
        // single worker: median = optimum
        let cfg = unit_cfg(2.0, 0.1);
        let single = inst(vec![Point::new(0.4, 0.4)], vec![1.0], &cfg);
        assert!(approx_bound_check(&single, &[1.0]));

        let mut rng = crate::rng::stage_rng(24, "bound");
        for trial in 0..200 {
            let alpha = [2.0, 2.4, 3.0, 4.0][trial % 4];
            let cfg = unit_cfg(alpha, rng.gen_range(0.0..0.2));
            let n = rng.gen_range(1..=10);
            let rates: Vec<f64> = (0..n).map(|_| rng.gen_range(1.0..2.0)).collect();
            let total: f64 = rates.iter().sum();
            let points: Vec<Point> = (0..n).map(|_| Point::new(rng.gen(), rng.gen())).collect();
            let weights: Vec<f64> = rates.iter().map(|r| r / total * cfg.kappa).collect();
            let instance = inst(points, weights, &cfg);
            assert!(approx_bound_check(&instance, &rates), "trial {trial} failed");
        }
    }

    #[test]
    fn expected_cost_formulas() {
        // odd and even closed forms
        assert!((expected_med_cost_uniform(3, 0.0, 1.0, 1.0) - 2.0 / 15.0).abs() < 1e-15);
        assert!((expected_med_cost_uniform(4, 0.0, 1.0, 1.0) - 2.0 / 15.0).abs() < 1e-15);
        assert!((expected_med_cost_uniform(5, 0.0, 1.0, 1.0) - 16.0 / 105.0).abs() < 1e-15);
        assert_eq!(expected_med_cost_uniform(1, 0.0, 1.0, 1.0), 0.0);
        // scaling in p_c * kappa and the height term
        let scaled = expected_med_cost_uniform(3, 2.0, 3.0, 5.0);
        assert!((scaled - 3.0 * 5.0 * (2.0 / 15.0 + 4.0)).abs() < 1e-12);

        assert!((msc_expected_cost_n3(Point::new(0.5, 0.5), 0.0, 1.0, 1.0) - 19.0 / 160.0).abs() < 1e-15);
        assert!((msc_expected_cost_n3(Point::new(0.0, 0.0), 0.0, 1.0, 1.0) - 3.0 / 20.0).abs() < 1e-15);
        assert!((msc_expected_cost_n3(Point::new(1.0, 1.0), 0.0, 1.0, 1.0) - 3.0 / 20.0).abs() < 1e-15);
        assert!(
            (msc_expected_cost_n3(Point::new(0.25, 0.75), 0.0, 1.0, 1.0) - 0.132421875).abs()
                < 1e-15
        );
        // the centered phantom beats the plain median in expectation
        assert!(
            msc_expected_cost_n3(Point::new(0.5, 0.5), 0.0, 1.0, 1.0)
                < expected_med_cost_uniform(3, 0.0, 1.0, 1.0)
        );
    }
}
