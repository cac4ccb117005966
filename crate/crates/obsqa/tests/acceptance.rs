//! Acceptance gate: eight end-to-end criteria, each reported as a single
//! pass/fail line. Run with `cargo test --test acceptance -- --nocapture`
//! to see the lines; any failure fails the build either way.

use std::collections::BTreeMap;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use obsqa::assessment::{confidence_level, fuse, traceback, TestId, TestResult};
use obsqa::core::{
    domain_test, DailyContext, DailySeries, DomainVerdict, GridProductKind, Observation,
    VariableKind,
};
use obsqa::harness::{
    run_experiment, ExperimentConfig, InjectionSpec, Sign, SyntheticConfig,
};
use obsqa::solvers::{
    bma_fit, kalman_step, lasso_fit, lasso_kkt_residual, KalmanState,
};
use obsqa::tests_point::{calibrate_spatial, run_spatial_test, PointTestConfig};

/// heavyweight criteria take this lock so their wall-clock budgets are
/// measured without contention from each other
static HEAVY: Mutex<()> = Mutex::new(());

fn criterion(n: usize, name: &str, budget: Duration, f: impl FnOnce() -> Result<(), String>) {
    let start = Instant::now();
    let outcome = f();
    let elapsed = start.elapsed();
    match outcome {
        Ok(()) if elapsed <= budget => {
            println!("ACCEPTANCE CRITERION {n} ({name}): PASS in {:.2}s", elapsed.as_secs_f64());
        }
        Ok(()) => {
            println!(
                "ACCEPTANCE CRITERION {n} ({name}): FAIL - over budget ({:.2}s > {:.2}s)",
                elapsed.as_secs_f64(),
                budget.as_secs_f64()
            );
            panic!("criterion {n} exceeded its runtime budget");
        }
        Err(e) => {
            println!("ACCEPTANCE CRITERION {n} ({name}): FAIL - {e}");
            panic!("criterion {n} failed: {e}");
        }
    }
}

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

// ---------------------------------------------------------------------------

#[test]
fn criterion_1_confidence_level_suite() {
    criterion(1, "Eq. 1 confidence level", Duration::from_secs(1), || {
        let cl = |p: f64| confidence_level(p).unwrap();
        check(cl(0.5) == 1.0, "CL(0.5) != 1")?;
        check(cl(0.0) == 0.0, "CL(0) != 0")?;
        check(cl(1.0) == 0.0, "CL(1) != 0")?;
        // "exactly" within f64 semantics: CL(0.8) equals the IEEE-754
        // evaluation of 1 - 2*(0.8 - 0.5) bit for bit (0.4 itself is not
        // representable; both sides land on the same nearest double)
        let direct = 1.0 - 2.0 * (0.8f64 - 0.5).abs();
        check(cl(0.8).to_bits() == direct.to_bits(), "CL(0.8) not bit-exact")?;
        check((cl(0.8) - 0.4).abs() < 1e-15, "CL(0.8) != 0.4")?;
        // symmetry over 10,001 grid points, exact to floating point: the
        // grid is dyadic (multiples of 2^-14) so 1-p is itself exact and the
        // identity CL(p) = CL(1-p) must hold bit for bit
        for i in 0..=10_000u32 {
            let p = f64::from(i) * 2f64.powi(-14);
            check(
                cl(p).to_bits() == cl(1.0 - p).to_bits(),
                format!("symmetry broken at grid point {i}"),
            )?;
        }
        Ok(())
    });
}

#[test]
fn criterion_2_domain_boundary_grid() {
    criterion(2, "Table 2 domain boundaries", Duration::from_secs(1), || {
        const EPS: f64 = 1e-9;
        let obs = |variable: VariableKind, value: f64| Observation {
            station_id: "T".into(),
            date: NaiveDate::from_ymd_opt(2019, 7, 1).unwrap(),
            variable,
            value,
            quality_hint: None,
        };
        let run = |variable, value, ctx: &DailyContext| domain_test(&obs(variable, value), ctx).passed();
        let boundary = |variable, limit: f64, ctx: &DailyContext, lower: bool| -> Result<(), String> {
            let inside = if lower { limit + EPS } else { limit - EPS };
            let outside = if lower { limit - EPS } else { limit + EPS };
            check(run(variable, inside, ctx), format!("{variable:?} {inside} should pass"))?;
            check(run(variable, limit, ctx), format!("{variable:?} boundary {limit} should pass (inclusive)"))?;
            check(!run(variable, outside, ctx), format!("{variable:?} {outside} should fail"))?;
            Ok(())
        };
        let open = DailyContext::default();
        use VariableKind::*;
        // static rows of Table 2
        boundary(Rain, 0.0, &open, true)?;
        boundary(Rain, 2000.0, &open, false)?;
        boundary(WindGust, 3.6, &open, true)?;
        boundary(WindGust, 540.0, &open, false)?;
        boundary(Humidity9am, 0.0, &open, true)?;
        boundary(Humidity3pm, 100.0, &open, false)?;
        boundary(Tmax, 60.0, &open, false)?;
        boundary(Tmin, -30.0, &open, true)?;
        // elevation-dependent Tmin lower bound: -40 degC above 1000 m
        let high = DailyContext { elevation_m: 1200.0, ..Default::default() };
        boundary(Tmin, -40.0, &high, true)?;
        check(!run(Tmin, -31.0, &open, ), "Tmin -31 at sea level should fail")?;
        check(run(Tmin, -31.0, &high), "Tmin -31 at 1200 m should pass")?;
        // coupled rows: Tmax lower = same-day Tmin; Tmin upper = same-day Tmax
        let coupled = DailyContext {
            same_day_tmin: Some(4.0),
            same_day_tmax: Some(18.0),
            elevation_m: 0.0,
        };
        boundary(Tmax, 4.0, &coupled, true)?;
        boundary(Tmin, 18.0, &coupled, false)?;
        Ok(())
    });
}

#[test]
fn criterion_3_solver_oracles() {
    criterion(3, "solver oracles", Duration::from_secs(30), || {
        // (a) LASSO: KKT stationarity on 100 random problems
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for case in 0..100 {
            let n = rng.gen_range(20..=200);
            let p = rng.gen_range(1..=20);
            let x = DMatrix::from_fn(n, p, |_, _| gauss(&mut rng));
            let beta: Vec<f64> = (0..p).map(|_| gauss(&mut rng)).collect();
            let y = DVector::from_fn(n, |i, _| {
                (0..p).map(|j| x[(i, j)] * beta[j]).sum::<f64>() + 0.5 * gauss(&mut rng)
            });
            let lambda = rng.gen_range(0.01..0.5);
            let model = lasso_fit(&x, &y, lambda, 1e-10).map_err(|e| e.to_string())?;
            let kkt = lasso_kkt_residual(&model, &x, &y);
            check(kkt <= 1e-8, format!("case {case}: KKT residual {kkt:.3e}"))?;
        }
        // (a') soft-threshold closed form on single-predictor problems:
        // beta_std = S(rho, lambda) with rho = (1/n) xs'(y - ybar)
        for case in 0..20 {
            let n = 100;
            let x = DMatrix::from_fn(n, 1, |_, _| gauss(&mut rng));
            let y = DVector::from_fn(n, |i, _| 2.0 * x[(i, 0)] + 0.3 * gauss(&mut rng));
            let lambda = rng.gen_range(0.0..2.5);
            let model = lasso_fit(&x, &y, lambda, 1e-10).map_err(|e| e.to_string())?;
            let nf = n as f64;
            let xbar = x.column(0).sum() / nf;
            let sd = (x.column(0).iter().map(|v| (v - xbar).powi(2)).sum::<f64>() / nf).sqrt();
            let ybar = y.sum() / nf;
            let rho: f64 = x
                .column(0)
                .iter()
                .zip(y.iter())
                .map(|(xi, yi)| (xi - xbar) / sd * (yi - ybar))
                .sum::<f64>()
                / nf;
            let beta_std = rho.signum() * (rho.abs() - lambda).max(0.0);
            let got = model.coefficients[0] * sd;
            check(
                (got - beta_std).abs() <= 1e-8,
                format!("case {case}: soft-threshold {got} vs {beta_std}"),
            )?;
        }
        // (b) Kalman filter vs a discretized-grid Bayes oracle, scalar model
        for case in 0..5 {
            let m0 = gauss(&mut rng);
            let c0 = rng.gen_range(0.5..2.0);
            let g = rng.gen_range(0.5..1.1);
            let w = rng.gen_range(0.1..0.8);
            let f = rng.gen_range(0.5..1.5);
            let v = rng.gen_range(0.2..1.0);
            let y = gauss(&mut rng) * 2.0;
            let state = KalmanState::new(DVector::from_vec(vec![m0]), DMatrix::from_vec(1, 1, vec![c0]));
            let step = kalman_step(
                &state,
                &DMatrix::from_vec(1, 1, vec![f]),
                &DMatrix::from_vec(1, 1, vec![g]),
                &DMatrix::from_vec(1, 1, vec![w]),
                &DMatrix::from_vec(1, 1, vec![v]),
                Some(&DVector::from_vec(vec![y])),
            )
            .map_err(|e| e.to_string())?;
            // grid Bayes: predict analytically, update by quadrature
            let mp = g * m0;
            let cp = g * g * c0 + w;
            let sd = cp.sqrt();
            let n_grid = 400_001;
            let lo = mp - 12.0 * sd;
            let hi = mp + 12.0 * sd;
            let h = (hi - lo) / (n_grid - 1) as f64;
            let mut z0 = 0.0;
            let mut z1 = 0.0;
            let mut z2 = 0.0;
            for i in 0..n_grid {
                let x = lo + i as f64 * h;
                let prior = (-(x - mp).powi(2) / (2.0 * cp)).exp();
                let like = (-(y - f * x).powi(2) / (2.0 * v)).exp();
                let p = prior * like;
                z0 += p;
                z1 += p * x;
                z2 += p * x * x;
            }
            let mean = z1 / z0;
            let var = z2 / z0 - mean * mean;
            check(
                (step.state.mean[0] - mean).abs() <= 1e-6,
                format!("case {case}: posterior mean {} vs grid {mean}", step.state.mean[0]),
            )?;
            check(
                (step.state.covariance[(0, 0)] - var).abs() <= 1e-6,
                format!(
                    "case {case}: posterior var {} vs grid {var}",
                    step.state.covariance[(0, 0)]
                ),
            )?;
        }
        // (c) BMA EM: the fit asserts log-likelihood monotonicity internally
        // every iteration; 50 seeded runs must complete without violating it
        for seed in 0..50u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let n = 200;
            let k = 3;
            let truth: Vec<f64> = (0..n).map(|_| gauss(&mut rng) * 3.0).collect();
            let means = DMatrix::from_fn(n, k, |i, j| {
                truth[i] + 0.3 * j as f64 + (0.5 + 0.3 * j as f64) * gauss(&mut rng)
            });
            let actuals = DVector::from_fn(n, |i, _| truth[i] + 0.6 * gauss(&mut rng));
            let fit = bma_fit(&means, &actuals).map_err(|e| e.to_string())?;
            let wsum: f64 = fit.weights.iter().sum();
            check((wsum - 1.0).abs() < 1e-9, format!("seed {seed}: weights sum {wsum}"))?;
        }
        Ok(())
    });
}

#[test]
fn criterion_4_false_alarm_calibration() {
    let _guard = HEAVY.lock().unwrap();
    criterion(4, "p-value calibration, uncontaminated network", Duration::from_secs(120), || {
        let cfg = ExperimentConfig {
            synthetic: SyntheticConfig { seed: 42, ..Default::default() },
            injection: InjectionSpec {
                fraction: 0.0,
                magnitude_low: 0.0,
                magnitude_high: 0.0,
                sign: Sign::Positive,
                seed: 0,
            },
            ..Default::default()
        };
        let report = run_experiment(&cfg).map_err(|e| e.to_string())?;
        for (name, stats) in &report.per_test {
            let fa = stats
                .overall
                .false_alarm_rate()
                .ok_or_else(|| format!("{name}: no clean observations scored"))?;
            check(
                (0.01..=0.10).contains(&fa),
                format!("{name}: false-alarm rate {fa:.4} outside [0.01, 0.10]"),
            )?;
        }
        Ok(())
    });
}

#[test]
fn criterion_5_protocol_reproduction() {
    let _guard = HEAVY.lock().unwrap();
    criterion(5, "synthetic wind-gust protocol", Duration::from_secs(300), || {
        let cfg = ExperimentConfig {
            synthetic: SyntheticConfig {
                n_stations: 100,
                n_tpaws: 10,
                years: 4,
                seed: 42,
                ..Default::default()
            },
            injection: InjectionSpec {
                fraction: 0.10,
                magnitude_low: 18.0,
                magnitude_high: 52.56,
                sign: Sign::Positive,
                seed: 7,
            },
            cl_threshold: 0.05,
            enabled_tests: vec![
                TestId::Spatial,
                TestId::Gridded(GridProductKind::Nwp),
                TestId::Gridded(GridProductKind::Era),
            ],
            ..Default::default()
        };
        let report = run_experiment(&cfg).map_err(|e| e.to_string())?;
        let merged_hit = report
            .merged
            .overall
            .hit_rate()
            .ok_or("no contaminated observations")?;
        let merged_fa = report
            .merged
            .overall
            .false_alarm_rate()
            .ok_or("no clean observations")?;
        let spatial_hit = report
            .per_test
            .iter()
            .find(|(n, _)| n == "spatial")
            .and_then(|(_, s)| s.overall.hit_rate())
            .ok_or("missing spatial skill")?;
        check(
            merged_hit >= spatial_hit,
            format!("merged hit {merged_hit:.4} < spatial hit {spatial_hit:.4}"),
        )?;
        check(merged_hit >= 0.85, format!("merged hit rate {merged_hit:.4} < 0.85"))?;
        check(merged_fa <= 0.10, format!("merged false alarm {merged_fa:.4} > 0.10"))?;
        // per-band reporting for <25 / 25-60 / >60 km/h
        let bands: Vec<&str> =
            report.merged.per_band.iter().map(|(n, _)| n.as_str()).collect();
        check(
            bands == ["<25", "25-60", ">60"],
            format!("unexpected bands {bands:?}"),
        )?;
        let rendered = report.render();
        check(rendered.contains("25-60"), "rendered report lacks band rows")?;
        Ok(())
    });
}

#[test]
fn criterion_6_gross_error_analog() {
    criterion(6, "gross +20 degC error flagged", Duration::from_secs(10), || {
        // neighbors imply ~22 degC; the TPAWS reports +20 degC above that
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let start = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
        let mk = |id: &str| DailySeries::new(id, VariableKind::Tmax);
        let mut target = mk("TPA001");
        let mut neighbors: BTreeMap<String, DailySeries> =
            (1..=6).map(|i| (format!("OFF{i:03}"), mk(&format!("OFF{i:03}")))).collect();
        for d in 0..400 {
            let date = start + chrono::Duration::days(d);
            let common = 22.0
                + 3.0 * (2.0 * std::f64::consts::PI * d as f64 / 365.25).sin()
                + 1.5 * gauss(&mut rng);
            target.values.insert(date, common + 0.4 * gauss(&mut rng));
            for series in neighbors.values_mut() {
                series.values.insert(date, common + 0.4 * gauss(&mut rng));
            }
        }
        let model = calibrate_spatial(&target, &neighbors, &PointTestConfig::default())
            .map_err(|e| e.to_string())?;
        let date = start + chrono::Duration::days(400);
        let todays: BTreeMap<String, f64> = neighbors
            .keys()
            .enumerate()
            .map(|(i, id)| (id.clone(), 21.8 + 0.1 * i as f64))
            .collect();
        let obs = Observation {
            station_id: "TPA001".into(),
            date,
            variable: VariableKind::Tmax,
            value: 42.3, // ~22 + 20
            quality_hint: None,
        };
        let result = run_spatial_test(&model, &obs, &todays).map_err(|e| e.0)?;
        let assessment = fuse(&obs, DomainVerdict::Pass, &[result], vec![]);
        let final_cl = assessment.final_cl.ok_or("assessment is NA")?;
        check(final_cl < 0.001, format!("final CL {final_cl:.6} >= 0.001"))?;
        let tb = traceback(&assessment);
        check(!tb.contributing.is_empty(), "empty traceback")?;
        let first = &tb.contributing[0];
        let min_cl = tb.contributing.iter().map(|e| e.cl).fold(f64::INFINITY, f64::min);
        check(first.cl == min_cl, "failing test not listed first in traceback")?;
        check(first.test_id == TestId::Spatial, "expected the spatial test first")?;
        Ok(())
    });
}

#[test]
fn criterion_7_fusion_properties() {
    criterion(7, "fusion property tests", Duration::from_secs(10), || {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let obs = Observation {
            station_id: "T".into(),
            date: NaiveDate::from_ymd_opt(2020, 5, 1).unwrap(),
            variable: VariableKind::WindGust,
            value: 30.0,
            quality_hint: None,
        };
        let mk = |rng: &mut ChaCha8Rng, test_id: TestId, mse: f64| {
            let p1: f64 = rng.gen_range(1e-6..1.0 - 1e-6);
            TestResult::from_p1(test_id, p1, 30.0, 1.0, mse, BTreeMap::new()).unwrap()
        };
        let ids = [
            TestId::Spatial,
            TestId::Trend,
            TestId::Gridded(GridProductKind::Nwp),
            TestId::Gridded(GridProductKind::Era),
            TestId::SpatioTemporal,
        ];
        for case in 0..1000 {
            // single-test degeneracy: the fused CL is the test's CL, bit-exact
            let mse = rng.gen_range(0.1..5.0);
            let single = mk(&mut rng, TestId::Spatial, mse);
            let fused = fuse(&obs, DomainVerdict::Pass, &[single.clone()], vec![]);
            check(
                fused.final_cl.map(f64::to_bits) == Some(single.cl.to_bits()),
                format!("case {case}: single-test fusion not bit-exact"),
            )?;

            // weight scaling: multiplying every cal_mse by a power of two
            // leaves the fused CL bit-identical (normalized weights unchanged)
            let k = rng.gen_range(2..=ids.len());
            let results: Vec<TestResult> = ids[..k]
                .iter()
                .map(|&t| {
                    let mse = rng.gen_range(0.05..20.0);
                    mk(&mut rng, t, mse)
                })
                .collect();
            let scale = 2f64.powi(rng.gen_range(-20..=20));
            let scaled: Vec<TestResult> = results
                .iter()
                .map(|r| TestResult { cal_mse: r.cal_mse * scale, ..r.clone() })
                .collect();
            let a = fuse(&obs, DomainVerdict::Pass, &results, vec![]);
            let b = fuse(&obs, DomainVerdict::Pass, &scaled, vec![]);
            check(
                a.final_cl.map(f64::to_bits) == b.final_cl.map(f64::to_bits),
                format!("case {case}: fused CL changed under weight scaling"),
            )?;

            // NA emission: no applicable test, domain pass
            let na = fuse(&obs, DomainVerdict::Pass, &[], vec![]);
            check(na.final_cl.is_none() && na.is_na(), format!("case {case}: expected NA"))?;

            // domain failure forces CL = 0 regardless of test results
            let fail = DomainVerdict::Fail {
                bound: obsqa::core::BoundKind::Upper,
                limit: 540.0,
            };
            let forced = fuse(&obs, fail, &results, vec![]);
            check(
                forced.final_cl == Some(0.0),
                format!("case {case}: domain failure did not force CL = 0"),
            )?;
        }
        Ok(())
    });
}

#[test]
fn criterion_8_determinism() {
    let _guard = HEAVY.lock().unwrap();
    criterion(8, "byte-identical reports", Duration::from_secs(120), || {
        let cfg = ExperimentConfig {
            synthetic: SyntheticConfig { n_stations: 12, n_tpaws: 2, ..Default::default() },
            enabled_tests: vec![TestId::Spatial, TestId::Gridded(GridProductKind::Nwp)],
            ..Default::default()
        };
        let a = run_experiment(&cfg).map_err(|e| e.to_string())?;
        let b = run_experiment(&cfg).map_err(|e| e.to_string())?;
        check(a.render() == b.render(), "renders differ across identical runs")?;
        check(a == b, "reports differ across identical runs")?;
        Ok(())
    });
}
