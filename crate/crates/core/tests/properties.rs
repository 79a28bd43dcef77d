use mfgexec::experiments::{solve_pipeline, sweep_kappa_ratio, turnpike_detect, TurnpikeThresholds};
use mfgexec::meanfield::feedback_control;
use mfgexec::simulator::{simulate_mfg_paths, SimConfig};
use mfgexec::Params;
use proptest::prelude::*;

fn params() -> impl Strategy<Value = Params> {
    (1e-3f64..1e-2, 1e-3f64..1e-2, 5e-4f64..5e-3, 5e-4f64..5e-3, 0.05f64..5.0, 0.01f64..3.0, 10.0f64..400.0).prop_map(
        |(aa, an, ka, kn, phi, psi, target)| {
            let mut p = Params::reference();
            p.alpha_a = aa;
            p.alpha_n = an;
            p.kappa_a = ka;
            p.kappa_n = kn;
            p.phi_run = phi;
            p.psi = psi;
            p.q_target = target;
            p
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn control_ratio_is_cost_ratio(p in params(), t in 0.0f64..1.0, q in -300.0f64..300.0) {
        let (tables, traj) = solve_pipeline(&p, 2_000).unwrap();
        let c = feedback_control(t, q, &traj, &tables, &p);
        prop_assume!(c.nu_n.abs() > 1e-9);
        let target = p.kappa_n / p.kappa_a;
        prop_assert!(((c.nu_a / c.nu_n) - target).abs() <= 1e-12 * target);
    }

    #[test]
    fn oracle_stays_symmetric(p in params()) {
        let (tables, _) = solve_pipeline(&p, 2_000).unwrap();
        let m = &tables.mean;
        for k in 0..m.phi_bar.len() {
            prop_assert!((m.phi_bar[k] - m.zeta_bar[k]).abs() <= 1e-10 * m.phi_bar[k].abs().max(1.0));
            prop_assert!((m.chi_bar[k] - m.eta_bar[k]).abs() <= 1e-10 * m.chi_bar[k].abs().max(1.0));
        }
    }

    #[test]
    fn inventory_gap_nonincreasing_in_cost_ratio(mut p in params()) {
        p.q0_a = 0.0;
        p.q0_n = 0.0;
        let r = sweep_kappa_ratio(&p, &[0.25, 0.5, 1.0, 2.0, 4.0], 2_000);
        let d = r.scalar("terminal_difference");
        prop_assert!(d.windows(2).all(|w| w[1] <= w[0]), "{:?}", d);
    }

    #[test]
    fn turnpike_report_is_consistent(p in params()) {
        let (_, traj) = solve_pipeline(&p, 2_000).unwrap();
        let r = turnpike_detect(&traj, p.q_target, &TurnpikeThresholds::default());
        match (r.entry_time, r.exit_time) {
            (Some(a), Some(b)) => {
                prop_assert!(a < b);
                prop_assert_eq!(r.has_turnpike, b - a >= 0.5 * r.horizon);
            }
            (None, None) => prop_assert!(!r.has_turnpike),
            _ => prop_assert!(false, "entry and exit must both be present or absent"),
        }
    }

    #[test]
    fn sweep_cell_reproduces_in_isolation(p in params(), ratio in 0.2f64..5.0) {
        let r = sweep_kappa_ratio(&p, &[ratio, 1.0], 1_000);
        let cell = &r.cells[0];
        let again = sweep_kappa_ratio(&cell.params, &[ratio], 1_000);
        prop_assert_eq!(&again.cells[0].series, &cell.series);
    }
}

#[test]
fn path_streams_do_not_depend_on_path_count() {
    let p = Params::reference();
    let (tables, traj) = solve_pipeline(&p, 1_000).unwrap();
    let cfg = |n_paths| SimConfig {
        n_steps: 200,
        n_paths,
        n_common: 4,
        master_seed: 5,
        ..SimConfig::default()
    };
    let small = simulate_mfg_paths(&p, &tables, &traj, &cfg(8)).unwrap();
    let large = simulate_mfg_paths(&p, &tables, &traj, &cfg(32)).unwrap();
    for (a, b) in small.paths.iter().zip(&large.paths) {
        assert_eq!(a.totals, b.totals);
        assert_eq!(a.streams, b.streams);
    }
}

#[test]
fn turnpike_detection_is_resolution_stable() {
    for phi in [0.5, 1.0, 4.0] {
        let mut p = Params::reference();
        p.phi_run = phi;
        p.q0_a = 100.0;
        p.q0_n = 100.0;
        p.q_target = 100.0;
        let th = TurnpikeThresholds::default();
        let (_, coarse) = solve_pipeline(&p, 2_000).unwrap();
        let (_, fine) = solve_pipeline(&p, 4_000).unwrap();
        let (a, b) = (turnpike_detect(&coarse, 100.0, &th), turnpike_detect(&fine, 100.0, &th));
        let step = 1.0 / 2_000.0 + 1e-12;
        assert!((a.entry_time.unwrap() - b.entry_time.unwrap()).abs() <= step, "{a:?} {b:?}");
        assert!((a.exit_time.unwrap() - b.exit_time.unwrap()).abs() <= step, "{a:?} {b:?}");
    }
}
