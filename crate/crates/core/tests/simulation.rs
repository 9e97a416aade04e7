use std::path::Path;

use pbc_core::sim::{run_scenario, ControllerKind, Scenario, SimError, SimOutput};

fn scenario(name: &str) -> Scenario {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(format!("{name}.toml"));
    Scenario::from_file(path).unwrap()
}

fn run(name: &str, kind: ControllerKind) -> SimOutput {
    let mut s = scenario(name);
    s.controller = kind;
    match run_scenario(&s) {
        Ok(out) => out,
        Err(e) => e.partial().unwrap().clone(),
    }
}

#[test]
fn reference_trajectory_ignores_controller_choice() {
    let base = run("planar2_unreachable", ControllerKind::Unconstrained);
    for kind in [ControllerKind::Damped, ControllerKind::StandardQp] {
        let other = run("planar2_unreachable", kind);
        assert_eq!(base.rows.len(), other.rows.len());
        for (a, b) in base.rows.iter().zip(&other.rows) {
            assert_eq!(a.xr, b.xr, "{kind} at t={}", a.t);
            assert_eq!(a.ur, b.ur);
        }
    }
    // The proposed controller feeds its own input to the reference.
    let proposed = run("planar2_unreachable", ControllerKind::ProposedQp);
    assert!(base.rows.iter().zip(&proposed.rows).any(|(a, b)| a.xr != b.xr));
}

#[test]
fn repeated_runs_are_identical() {
    let a = run("gen7_disturbed", ControllerKind::StandardQp);
    let b = run("gen7_disturbed", ControllerKind::StandardQp);
    assert_eq!(a.rows, b.rows);
}

/// Logged V̇ against the forward difference of the logged V.
fn vdot_consistency(out: &SimOutput, dt: f64) -> (usize, usize) {
    let rows = &out.rows;
    let mut checked = 0;
    let mut failures = 0;
    for k in 1..rows.len().saturating_sub(2) {
        let spike = [k - 1, k, k + 1].iter().any(|&i| rows[i].status != "ok" && rows[i].status != "optimal");
        if spike {
            continue;
        }
        let diff = (rows[k + 1].v - rows[k].v) / dt;
        let vddot = (rows[k + 1].vdot - rows[k - 1].vdot) / (2.0 * dt);
        let bound = f64::max(1e-2, 10.0 * dt * vddot.abs());
        checked += 1;
        failures += usize::from((diff - rows[k].vdot).abs() > bound);
    }
    (checked, failures)
}

#[test]
fn logged_vdot_matches_storage_difference() {
    for (name, kind) in [
        ("planar2_reachable", ControllerKind::Unconstrained),
        ("gen7_reachable", ControllerKind::Unconstrained),
        ("planar2_unreachable", ControllerKind::ProposedQp),
    ] {
        let s = scenario(name);
        let out = run(name, kind);
        let (checked, failures) = vdot_consistency(&out, s.dt_ctrl);
        assert!(checked > 100);
        assert!(failures * 100 <= checked, "{name}/{kind}: {failures} of {checked}");
    }
}

#[test]
fn disturbance_supply_bounds_storage_rate() {
    let out = run("gen7_disturbed", ControllerKind::Unconstrained);
    let pushed: Vec<_> = out
        .rows
        .iter()
        .zip(&out.diagnostics)
        .filter(|(_, d)| d.ext_power != 0.0)
        .collect();
    assert!(!pushed.is_empty());
    // With disturbances the closed form dissipates exactly what K_D removes.
    for (r, d) in pushed {
        let expected = d.vdot_damping + d.ext_power;
        assert!((r.vdot - expected).abs() <= 1e-6 * (1.0 + r.vdot.abs()), "t={}", r.t);
    }
}

#[test]
fn proposed_qp_steps_are_certified() {
    let out = run("planar2_unreachable", ControllerKind::ProposedQp);
    assert_eq!(out.summary.qp_failures, 0);
    for d in &out.diagnostics {
        assert!(d.kkt_residual.unwrap() <= 1e-5);
    }
    // Near the boundary the solver departs from the nominal reference input.
    assert!(out
        .rows
        .iter()
        .zip(&out.diagnostics)
        .any(|(r, d)| (&r.ur - &d.ur_nom).norm() > 1e-3));
}

#[test]
fn failing_controller_aborts_when_not_holding() {
    let mut s = scenario("planar2_unreachable");
    s.controller = ControllerKind::Unconstrained;
    s.hold_on_error = false;
    s.torque_cap = f64::MAX;
    match run_scenario(&s) {
        Err(SimError::Controller { row, partial, .. }) | Err(SimError::Diverged { row, partial }) => {
            assert!(row > 0 && partial.rows.len() >= row);
        }
        Ok(out) => panic!("expected an abort, min_mu={}", out.summary.min_mu),
        Err(e) => panic!("{e}"),
    }
}

#[test]
fn free_motion_conserves_kinetic_energy() {
    let out = run("gen7_free_motion", ControllerKind::ZeroTorque);
    let e0 = out.diagnostics[0].kinetic_energy;
    assert!(e0 > 0.0);
    for d in &out.diagnostics {
        assert!((d.kinetic_energy - e0).abs() <= 1e-4);
    }
    assert!(out.rows.iter().all(|r| r.tau.iter().all(|t| *t == 0.0)));
}
