//! Structural guarantees of the deployment mechanisms, checked in bulk:
//! outputs stay inside the task area, relabeling workers never changes the
//! outcome, raising a report coordinate never lowers that output coordinate,
//! the expected-cost closed forms hold exactly, and the worst-case cost bound
//! survives adversarial rate spreads.

use rand::Rng;
use wpsc::deploy::{
    approx_bound_check, expected_med_cost_uniform, med, msc, msc_expected_cost_n3, EvenRule,
    Mechanism,
};
use wpsc::mdl::{mechanism_place, MdlModel};
use wpsc::model::platform_cost_phase2;
use wpsc::rng::stage_rng;
use wpsc::{DeploymentInstance, Point, Rect, SystemConfig};

fn market_cfg() -> SystemConfig {
    SystemConfig::default_market()
}

#[test]
fn outputs_stay_in_area_and_ignore_worker_order() {
    let cfg = market_cfg();
    let side = cfg.task_area.max.x;
    let mut rng = stage_rng(201, "invariant-range");
    for _ in 0..100 {
        let n = rng.gen_range(2..=8usize);
        let reports: Vec<Point> = (0..n)
            .map(|_| Point::new(rng.gen::<f64>() * side, rng.gen::<f64>() * side))
            .collect();
        let weights: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..2.0)).collect();
        let model = MdlModel::init(4, 4, n, cfg.task_area, rng.gen()).unwrap();
        // the strategyproof mechanisms sort their inputs, so relabeling must
        // reproduce the output bit for bit
        let exact = [
            Mechanism::Med { rule: EvenRule::PaperAverage },
            Mechanism::Med { rule: EvenRule::LowerMedian },
            Mechanism::Msc {
                constant: Point::new(side / 2.0, side / 2.0),
                rule: EvenRule::LowerMedian,
            },
            Mechanism::Mdl { model: Box::new(model) },
        ];
        // the benchmark optimizer and the mean accumulate sums, so reordered
        // inputs may differ by rounding only
        let numeric = [Mechanism::Opt, Mechanism::Mean];
        // one permutation per round, applied to reports and weights alike
        let order: Vec<usize> = {
            let mut o: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                o.swap(i, rng.gen_range(0..=i));
            }
            o
        };
        let perm_reports: Vec<Point> = order.iter().map(|&i| reports[i]).collect();
        let perm_weights: Vec<f64> = order.iter().map(|&i| weights[i]).collect();
        for mech in exact.iter().chain(&numeric) {
            let out = mech.place(&reports, &weights, &cfg).unwrap();
            assert!(
                cfg.task_area.contains(out),
                "{} left the task area: {out:?}",
                mech.name()
            );
            let permuted = mech.place(&perm_reports, &perm_weights, &cfg).unwrap();
            if exact.iter().any(|m| std::ptr::eq(m, mech)) {
                assert_eq!(
                    (out.x, out.y),
                    (permuted.x, permuted.y),
                    "{} depends on worker order",
                    mech.name()
                );
            } else {
                let tol = 1e-9 * side;
                assert!(
                    (out.x - permuted.x).abs() <= tol && (out.y - permuted.y).abs() <= tol,
                    "{} drifted under relabeling: {out:?} vs {permuted:?}",
                    mech.name()
                );
            }
        }
    }
}

#[test]
fn median_mechanisms_are_monotone_per_axis_1000_pairs() {
    let mut rng = stage_rng(203, "invariant-monotone-med");
    for pair in 0..1000 {
        let n = rng.gen_range(2..=8usize);
        let reports: Vec<Point> = (0..n).map(|_| Point::new(rng.gen(), rng.gen())).collect();
        let who = rng.gen_range(0..n);
        let on_x = rng.gen_bool(0.5);
        let delta = rng.gen_range(0.0..0.5);
        let mut bumped = reports.clone();
        if on_x {
            bumped[who].x = (bumped[who].x + delta).min(1.0);
        } else {
            bumped[who].y = (bumped[who].y + delta).min(1.0);
        }
        let constant = Point::new(rng.gen(), rng.gen());
        for rule in [EvenRule::PaperAverage, EvenRule::LowerMedian] {
            let checks = [
                (med(&reports, rule).unwrap(), med(&bumped, rule).unwrap(), "med"),
                (
                    msc(&reports, constant, rule).unwrap(),
                    msc(&bumped, constant, rule).unwrap(),
                    "msc",
                ),
            ];
            for (before, after, name) in checks {
                let (moved, fixed, was_fixed) = if on_x {
                    (after.x - before.x, after.y, before.y)
                } else {
                    (after.y - before.y, after.x, before.x)
                };
                assert!(
                    moved >= 0.0,
                    "pair {pair}: {name} moved against the report ({moved})"
                );
                assert_eq!(
                    fixed, was_fixed,
                    "pair {pair}: {name} leaked across axes"
                );
            }
        }
    }
}

#[test]
fn learned_mechanism_is_monotone_per_axis_1000_pairs() {
    let mut rng = stage_rng(204, "invariant-monotone-mdl");
    for model_round in 0..10 {
        let n = 3 + model_round % 4;
        let model = MdlModel::init(4, 4, n, Rect::square(1.0), 7000 + model_round as u64)
            .unwrap();
        for pair in 0..100 {
            let reports: Vec<Point> =
                (0..n).map(|_| Point::new(rng.gen(), rng.gen())).collect();
            let who = rng.gen_range(0..n);
            let on_x = rng.gen_bool(0.5);
            let delta = rng.gen_range(0.0..0.5);
            let mut bumped = reports.clone();
            if on_x {
                bumped[who].x = (bumped[who].x + delta).min(1.0);
            } else {
                bumped[who].y = (bumped[who].y + delta).min(1.0);
            }
            let before = mechanism_place(&model, &reports).unwrap();
            let after = mechanism_place(&model, &bumped).unwrap();
            let (moved, fixed, was_fixed) = if on_x {
                (after.x - before.x, after.y, before.y)
            } else {
                (after.y - before.y, after.x, before.x)
            };
            assert!(
                moved >= 0.0,
                "model {model_round} pair {pair}: output moved against the report ({moved})"
            );
            assert_eq!(
                fixed, was_fixed,
                "model {model_round} pair {pair}: output leaked across axes"
            );
        }
    }
}

#[test]
fn expected_cost_closed_forms_are_exact() {
    // plain median over i.i.d. uniform unit-square reports
    assert!((expected_med_cost_uniform(3, 0.0, 1.0, 1.0) - 2.0 / 15.0).abs() < 1e-15);
    assert!((expected_med_cost_uniform(4, 0.0, 1.0, 1.0) - 2.0 / 15.0).abs() < 1e-15);
    assert!((expected_med_cost_uniform(5, 0.0, 1.0, 1.0) - 16.0 / 105.0).abs() < 1e-15);
    assert!((expected_med_cost_uniform(7, 0.0, 1.0, 1.0) - 10.0 / 63.0).abs() < 1e-15);
    // the mast height enters as a squared offset scaled by power x conversion
    let lifted = expected_med_cost_uniform(5, 2.0, 3.0, 7.0);
    assert!((lifted - (16.0 / 105.0 + 4.0) * 21.0).abs() < 1e-12);

    // three-worker median augmented with one constant point
    let center = msc_expected_cost_n3(Point::new(0.5, 0.5), 0.0, 1.0, 1.0);
    assert!((center - 19.0 / 160.0).abs() < 1e-15);
    for corner in [Point::new(0.0, 0.0), Point::new(1.0, 1.0)] {
        let v = msc_expected_cost_n3(corner, 0.0, 1.0, 1.0);
        assert!((v - 3.0 / 20.0).abs() < 1e-15);
    }
    let off = msc_expected_cost_n3(Point::new(0.25, 0.75), 0.0, 1.0, 1.0);
    assert!((off - 0.132421875).abs() < 1e-15);

    // a centered constant helps, a cornered one hurts
    let med3 = expected_med_cost_uniform(3, 0.0, 1.0, 1.0);
    assert!(center < med3);
    assert!(msc_expected_cost_n3(Point::new(0.0, 0.0), 0.0, 1.0, 1.0) > med3);
}

#[test]
fn msc_off_center_constant_matches_monte_carlo() {
    let cfg = SystemConfig::new(
        1e9, 60e6, 2.0, 0.6, 1e-3, 0.0, 1e4, 200.0, Rect::square(1.0),
    )
    .unwrap();
    let constant = Point::new(0.25, 0.75);
    let closed = msc_expected_cost_n3(constant, 0.0, 1.0, 1.0);
    let mut rng = stage_rng(205, "invariant-msc-mc");
    const DRAWS: usize = 100_000;
    let mut sum = 0.0;
    for _ in 0..DRAWS {
        let pts: Vec<Point> = (0..3).map(|_| Point::new(rng.gen(), rng.gen())).collect();
        let inst =
            DeploymentInstance::new(pts.clone(), vec![1.0 / 3.0; 3], cfg.clone()).unwrap();
        let at = msc(&pts, constant, EvenRule::PaperAverage).unwrap();
        sum += platform_cost_phase2(at, &inst);
    }
    let mean = sum / DRAWS as f64;
    let rel = (mean - closed).abs() / closed;
    assert!(rel < 0.01, "Monte Carlo {mean} vs closed form {closed} (rel {rel:.4})");
}

#[test]
fn cost_bound_survives_equal_and_spread_rates() {
    let mut rng = stage_rng(206, "invariant-bound");
    // equal rates at quadratic loss: the tightest multiplicative factor (2x)
    let cfg2 = SystemConfig::new(
        1e9, 60e6, 2.0, 0.6, 1e-3, 10.0, 1e4, 200.0, Rect::square(200.0),
    )
    .unwrap();
    // steep loss with a 2:1 rate spread
    let cfg4 = SystemConfig::new(
        1e9, 60e6, 4.0, 0.6, 1e-3, 10.0, 1e4, 200.0, Rect::square(200.0),
    )
    .unwrap();
    for round in 0..500 {
        for (cfg, spread) in [(&cfg2, false), (&cfg4, true)] {
            let n = rng.gen_range(2..=12usize);
            let pts: Vec<Point> = (0..n)
                .map(|_| Point::new(rng.gen::<f64>() * 200.0, rng.gen::<f64>() * 200.0))
                .collect();
            let rates: Vec<f64> = if spread {
                (0..n).map(|i| if i % 2 == 0 { 1.0 } else { 2.0 }).collect()
            } else {
                vec![1.5; n]
            };
            let total: f64 = rates.iter().sum();
            let weights: Vec<f64> = rates.iter().map(|r| r / total * cfg.kappa).collect();
            let inst = DeploymentInstance::new(pts, weights, cfg.clone()).unwrap();
            assert!(
                approx_bound_check(&inst, &rates),
                "bound violated on round {round} (spread={spread})"
            );
        }
    }
}
