mod common;

use std::path::Path;
use std::sync::OnceLock;

use common::kw_no_ties;
use proptest::prelude::*;
use promod::clothoid::{fit_g1, Pose};
use promod::demo::{Agent, DemoRow, Demonstration, LapOutcome};
use promod::eval::{band_aggressiveness, kruskal_wallis};
use promod::io::{demos_from_strings, demos_to_strings};
use promod::policy::PhaseMatcher;
use promod::promp::{fit_gaussian, fit_promp, ProMpConfig, SampledTrajectory};
use promod::vehicle::{step, Action, VehicleParams, VehicleState};

fn distinct(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::btree_set(-10_000i32..10_000, n).prop_map(|s| s.into_iter().map(|v| v as f64 * 0.25).collect())
}

fn lap_from(points: &[(f64, f64, f64)], dt: f64) -> Demonstration {
    let rows = points
        .iter()
        .enumerate()
        .map(|(k, &(x, y, psi))| {
            let st = VehicleState {
                x,
                y,
                psi,
                vx: 10.0,
                ..Default::default()
            };
            DemoRow::new(k as f64 * dt, &st, &Action::new(0.0, 0.0, 0.0))
        })
        .collect();
    Demonstration {
        driver_id: "p".into(),
        agent: Agent::Synthetic,
        track_id: 0,
        lap_index: 0,
        outcome: LapOutcome::Finished,
        dt,
        rows,
    }
}

/// Mean trajectory of a circular lap of radius 50.
fn circle_target() -> &'static SampledTrajectory {
    static T: OnceLock<SampledTrajectory> = OnceLock::new();
    T.get_or_init(|| {
        let dt = 1.0 / 150.0;
        let n = (std::f64::consts::TAU / (0.2 * dt)).ceil() as usize + 1;
        let pts: Vec<_> = (0..n)
            .map(|k| {
                let a = 0.2 * k as f64 * dt;
                (50.0 * a.cos(), 50.0 * a.sin(), a + std::f64::consts::FRAC_PI_2)
            })
            .collect();
        let lap = lap_from(&pts, dt);
        fit_promp(&[&lap], &ProMpConfig::default()).unwrap().mean_trajectory()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kruskal_wallis_symmetric_and_shift_invariant(
        a in prop::collection::vec(-100.0..100.0f64, 2..12),
        b in prop::collection::vec(-100.0..100.0f64, 2..12),
        shift in -1e3..1e3f64,
    ) {
        let ab = kruskal_wallis(&a, &b);
        let ba = kruskal_wallis(&b, &a);
        match (&ab, &ba) {
            (Ok((h1, p1)), Ok((h2, p2))) => {
                prop_assert!((h1 - h2).abs() < 1e-12 && (p1 - p2).abs() < 1e-12);
                prop_assert!(*h1 >= -1e-12 && (0.0..=1.0).contains(p1));
            }
            _ => prop_assert!(ab.is_err() && ba.is_err()),
        }
        // Integer-valued shifts keep every comparison exact.
        let s = shift.round();
        let sa: Vec<f64> = a.iter().map(|v| v + s).collect();
        let sb: Vec<f64> = b.iter().map(|v| v + s).collect();
        if let (Ok((h1, _)), Ok((h2, _))) = (ab, kruskal_wallis(&sa, &sb)) {
            let same_order = a.iter().chain(&b).zip(sa.iter().chain(&sb)).all(|(x, y)| {
                a.iter().chain(&b).zip(sa.iter().chain(&sb)).all(|(u, v)| (x < u) == (y < v) && (x == u) == (y == v))
            });
            if same_order {
                prop_assert!((h1 - h2).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn kruskal_wallis_matches_rank_sum_definition(a in distinct(2..10), cut in 2usize..8) {
        prop_assume!(a.len() >= cut + 2);
        let (x, y) = a.split_at(cut);
        let (h, _) = kruskal_wallis(x, y).unwrap();
        prop_assert!((h - kw_no_ties(x, y)).abs() < 1e-9);
    }

    #[test]
    fn steer_aggressiveness_reversal_invariant(
        x in prop::collection::vec(-300.0..300.0f64, 2..200),
        dt in 0.001..0.1f64,
    ) {
        let mut r = x.clone();
        r.reverse();
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        match band_aggressiveness(&x, dt, 5.0, 216.0) {
            Ok(m) => {
                let mr = band_aggressiveness(&r, dt, 5.0, 216.0).unwrap();
                let mn = band_aggressiveness(&neg, dt, 5.0, 216.0).unwrap();
                prop_assert!((m - mr).abs() <= 1e-9 * m.max(1.0));
                prop_assert!((m - mn).abs() <= 1e-12 * m.max(1.0));
                prop_assert!(m >= 0.0);
            }
            Err(_) => prop_assert!(band_aggressiveness(&r, dt, 5.0, 216.0).is_err()),
        }
    }

    #[test]
    fn gaussian_fit_permutation_invariant(
        ws in prop::collection::vec(prop::collection::vec(-1e3..1e3f64, 6), 1..8),
        rot in 0usize..8,
    ) {
        let mut p = ws.clone();
        p.rotate_left(rot % ws.len());
        p.reverse();
        prop_assert_eq!(fit_gaussian(&ws).unwrap(), fit_gaussian(&p).unwrap());
    }

    #[test]
    fn phase_matcher_is_monotone(
        start in 0.0..1.0f64,
        steps in prop::collection::vec((0.0..0.004f64, -3.0..3.0f64), 1..200),
    ) {
        let target = circle_target();
        let mut m = PhaseMatcher::new();
        let mut a = start * std::f64::consts::TAU;
        let mut last = f64::NEG_INFINITY;
        for (da, off) in steps {
            a += da;
            let r = 50.0 + off;
            let phase = m.update(target, [r * a.cos(), r * a.sin()]);
            let u = m.index().unwrap();
            prop_assert!(u >= last, "index went back from {} to {}", last, u);
            prop_assert!((phase - u / (target.grid.len() - 1) as f64).abs() < 1e-12);
            last = u;
        }
    }

    #[test]
    fn clothoid_fit_is_translation_invariant(
        x0 in -50.0..50.0f64, y0 in -50.0..50.0f64, th0 in -3.0..3.0f64,
        dist in 1.0..30.0f64, dir in -1.0..1.0f64, th1 in -1.5..1.5f64,
        tx in -100.0..100.0f64, ty in -100.0..100.0f64,
    ) {
        let a = Pose::new(x0, y0, th0);
        let b = Pose::new(x0 + dist * (th0 + dir).cos(), y0 + dist * (th0 + dir).sin(), th0 + th1);
        let c1 = fit_g1(a, b).unwrap();
        let c2 = fit_g1(Pose::new(x0 + tx, y0 + ty, th0), Pose::new(b.x + tx, b.y + ty, b.theta)).unwrap();
        prop_assert!((c1.length - c2.length).abs() < 1e-8 * c1.length.max(1.0));
        prop_assert!((c1.kappa - c2.kappa).abs() < 1e-8);
        prop_assert!((c1.kappa_prime - c2.kappa_prime).abs() < 1e-8);
    }

    #[test]
    fn vehicle_step_is_deterministic(
        vx in 0.0..40.0f64, vy in -2.0..2.0f64, r in -1.0..1.0f64,
        delta in -240.0..240.0f64, gas in 0.0..1.0f64, brake in 0.0..1.0f64,
    ) {
        let p = VehicleParams::default();
        let s = VehicleState { vx, vy, psidot: r, omega: [vx / 0.3; 4], ..Default::default() };
        let a = Action::new(delta, gas, brake);
        let n1 = step(&s, &a, &p).unwrap();
        let n2 = step(&s, &a, &p).unwrap();
        prop_assert_eq!(n1, n2);
        prop_assert!(n1.is_finite());
    }

    #[test]
    fn demo_files_round_trip_exactly(
        vals in prop::collection::vec((-1e6..1e6f64, -1e-3..1e-3f64, -7.0..7.0f64), 4..40),
    ) {
        let lap = lap_from(&vals, 1.0 / 150.0);
        let (body, meta) = demos_to_strings(std::slice::from_ref(&lap)).unwrap();
        let back = demos_from_strings(Path::new("mem.csv"), &body, &meta).unwrap();
        prop_assert_eq!(back, vec![lap]);
    }
}
