//! Optimization-based controllers built on [`crate::qp`].
//!
//! Both controllers share the dynamics equality `M q̈ − τ = −C q̇ − τ_g` and
//! the barrier row `J_μ q̈ ≥ b`. The standard constrained controller tracks a
//! desired task force; the passivity-constrained controller additionally
//! chooses the reference input `u_r` and keeps `V̇(q̈, u_r) ≤ 0`.

use nalgebra::{DMatrix, DVector};

use crate::dynamics::DynamicsTerms;
use crate::manipulability::BarrierEval;
use crate::qp::{QpProblem, VariableLayout};
use crate::task_space::{ControllerGains, StorageEval, TaskSpaceQuantities};

/// Tikhonov term added to every Hessian; selects the minimum-norm solution
/// among torques that produce the same task force.
pub const HESSIAN_REGULARIZATION: f64 = 1e-9;

/// Torques sent to the robot and the input sent to the reference system.
#[derive(Debug, Clone, PartialEq)]
pub struct TorqueCommand {
    pub tau: DVector<f64>,
    pub ur_applied: DVector<f64>,
}

fn base_problem(
    dynamics: &DynamicsTerms,
    qd: &DVector<f64>,
    ts: &TaskSpaceQuantities,
    barrier: &BarrierEval,
    f_des: &DVector<f64>,
    layout: VariableLayout,
    force_weight: f64,
) -> QpProblem {
    let n = layout.n;
    let d = layout.dim();

    // ‖J̄ᵀτ − f‖² = τᵀ J̄ J̄ᵀ τ − 2 fᵀ J̄ᵀ τ + const
    let mut h = DMatrix::identity(d, d) * HESSIAN_REGULARIZATION;
    let jbar_jbart = &ts.jbar * ts.jbar.transpose();
    let mut block = h.view_mut((n, n), (n, n));
    block += jbar_jbart * (2.0 * force_weight);
    let mut g = DVector::zeros(d);
    g.rows_mut(n, n)
        .copy_from(&(&ts.jbar * f_des * (-2.0 * force_weight)));

    let mut a_eq = DMatrix::zeros(n, d);
    a_eq.view_mut((0, 0), (n, n)).copy_from(&dynamics.mass);
    a_eq.view_mut((0, n), (n, n))
        .copy_from(&(-DMatrix::<f64>::identity(n, n)));
    let b_eq = -(&dynamics.coriolis * qd + &dynamics.gravity);

    let mut a_in = DMatrix::zeros(1, d);
    a_in.view_mut((0, 0), (1, n)).copy_from(&barrier.a.transpose());
    let b_in = DVector::from_element(1, barrier.b);

    QpProblem {
        h,
        g,
        a_eq,
        b_eq,
        a_in,
        b_in,
        layout: Some(layout),
    }
}

/// `min ‖J̄ᵀτ − f_des‖²` subject to the dynamics and the barrier row,
/// over `z = [q̈; τ]`.
pub fn build_standard_qp(
    dynamics: &DynamicsTerms,
    qd: &DVector<f64>,
    ts: &TaskSpaceQuantities,
    barrier: &BarrierEval,
    f_des: &DVector<f64>,
) -> QpProblem {
    let layout = VariableLayout {
        n: dynamics.mass.nrows(),
        m: f_des.len(),
        has_ur: false,
    };
    base_problem(dynamics, qd, ts, barrier, f_des, layout, 1.0)
}

/// `min w₁‖u_r − u_r_nom‖² + w₂‖J̄ᵀτ − f(u_r)‖²` subject to the dynamics,
/// `V̇(q̈, u_r) ≤ 0` and the barrier row, over `z = [q̈; τ; u_r]`.
///
/// `f_des` is the task force evaluated at `u_r_nom`; `f(u_r)` shifts it by
/// `Λ(u_r − u_r_nom)` so the target tracks whichever reference input the
/// solver picks.
#[allow(clippy::too_many_arguments)]
pub fn build_proposed_qp(
    dynamics: &DynamicsTerms,
    qd: &DVector<f64>,
    ts: &TaskSpaceQuantities,
    storage: &StorageEval,
    barrier: &BarrierEval,
    f_des: &DVector<f64>,
    ur_nom: &DVector<f64>,
    gains: &ControllerGains,
) -> QpProblem {
    let n = dynamics.mass.nrows();
    let m = f_des.len();
    let layout = VariableLayout { n, m, has_ur: true };
    let mut p = base_problem(dynamics, qd, ts, barrier, f_des, layout, gains.w2);

    // The force target follows the chosen reference input:
    // f(u_r) = f_des + Λ(u_r − u_r_nom), so the residual is R z − c with
    // R = [0, J̄ᵀ, −Λ] and c = f_des − Λ u_r_nom.
    let u = 2 * n;
    let mut r = DMatrix::zeros(m, p.dim());
    r.view_mut((0, n), (m, n)).copy_from(&ts.jbar.transpose());
    r.view_mut((0, u), (m, m)).copy_from(&(-&ts.lambda));
    let c = f_des - &ts.lambda * ur_nom;
    p.h = DMatrix::identity(p.dim(), p.dim()) * HESSIAN_REGULARIZATION
        + r.transpose() * &r * (2.0 * gains.w2);
    p.g = -(r.transpose() * c) * (2.0 * gains.w2);
    for i in 0..m {
        p.h[(u + i, u + i)] += 2.0 * gains.w1;
        p.g[u + i] -= 2.0 * gains.w1 * ur_nom[i];
    }

    // −V̇ ≥ 0  ⇔  −vdot_qdd·q̈ − vdot_ur·u_r ≥ vdot_const
    let mut a_in = DMatrix::zeros(2, p.dim());
    a_in.row_mut(0).copy_from(&p.a_in.row(0));
    a_in.view_mut((1, 0), (1, n))
        .copy_from(&(-storage.vdot_qdd.transpose()));
    a_in.view_mut((1, u), (1, m))
        .copy_from(&(-storage.vdot_ur.transpose()));
    p.b_in = DVector::from_vec(vec![p.b_in[0], storage.vdot_const]);
    p.a_in = a_in;
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::task_jacobians;
    use crate::manipulability::{ecbf_row, BarrierConfig};
    use crate::qp::{solve_qp, QpStatus, DEFAULT_MAX_ITER, DEFAULT_TOL};
    use crate::robot_model::fixtures::PLANAR2;
    use crate::robot_model::{RobotModel, RobotState};
    use crate::task_space::*;
    use approx::assert_relative_eq;
    use nalgebra::dvector;

    struct Setup {
        dynamics: DynamicsTerms,
        ts: TaskSpaceQuantities,
        jac: crate::dynamics::TaskJacobians,
        err: TaskError,
        barrier: BarrierEval,
        qd: DVector<f64>,
        gains: ControllerGains,
    }

    fn setup(state: RobotState, reference: ReferenceState, barrier: BarrierConfig) -> Setup {
        let model = RobotModel::from_toml_str(PLANAR2).unwrap();
        let cfg = TaskMapConfig::planar2();
        let dynamics = DynamicsTerms::evaluate(&model, &state);
        let jac = task_jacobians(&model, &state, &cfg).unwrap();
        let ts = operational_quantities(&dynamics, &jac).unwrap();
        let task = task_map(&model, &state, &cfg).unwrap();
        let err = TaskError::new(&task, &reference);
        let barrier = ecbf_row(&model, &state, &cfg, &barrier).unwrap();
        Setup {
            dynamics,
            ts,
            jac,
            err,
            barrier,
            qd: state.qd,
            gains: ControllerGains::diagonal(&[100.0, 100.0], &[20.0, 20.0]),
        }
    }

    #[test]
    fn standard_qp_reproduces_closed_form_when_slack() {
        let s = setup(
            RobotState::new(dvector![0.3, 1.2], dvector![0.1, -0.1]),
            ReferenceState::new(dvector![0.5, 1.4], dvector![0.0, 0.0]),
            BarrierConfig::default(),
        );
        let ur = dvector![0.2, -0.1];
        let cf = pbc_controller(&s.ts, &s.err, &s.dynamics, &s.jac, &s.gains, &s.qd, &ur);
        let qp = build_standard_qp(&s.dynamics, &s.qd, &s.ts, &s.barrier, &cf.force);
        let sol = solve_qp(&qp, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        let tau = sol.tau().unwrap();
        assert!((s.ts.jbar.transpose() * &tau - &cf.force).norm() <= 1e-6);
        assert_eq!(sol.lambda[0], 0.0);
    }

    #[test]
    fn standard_qp_barrier_active_is_tight() {
        // Moving quickly toward the straight-arm singularity close to ε.
        let s = setup(
            RobotState::new(dvector![0.3, 0.08], dvector![0.0, -2.0]),
            ReferenceState::new(dvector![3.0, 0.5], dvector![0.0, 0.0]),
            BarrierConfig::default(),
        );
        let cf = pbc_controller(&s.ts, &s.err, &s.dynamics, &s.jac, &s.gains, &s.qd, &dvector![0.0, 0.0]);
        let qp = build_standard_qp(&s.dynamics, &s.qd, &s.ts, &s.barrier, &cf.force);
        let sol = solve_qp(&qp, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        let qdd = sol.qdd().unwrap();
        assert!(sol.lambda[0] > 0.0);
        assert!((s.barrier.a.dot(&qdd) - s.barrier.b).abs() <= 1e-6);
        assert!((s.ts.jbar.transpose() * sol.tau().unwrap() - &cf.force).norm() > 1e-3);
    }

    #[test]
    fn proposed_qp_at_rest_keeps_nominal_input() {
        let model = RobotModel::from_toml_str(PLANAR2).unwrap();
        let state = RobotState::at_rest(dvector![0.3, 1.2]);
        let x = task_pose(&model, &state.q, &TaskMapConfig::planar2()).unwrap();
        let s = setup(state, ReferenceState::new(x, dvector![0.0, 0.0]), BarrierConfig::default());
        let ur_nom = dvector![0.7, -0.4];
        let cf = pbc_controller(&s.ts, &s.err, &s.dynamics, &s.jac, &s.gains, &s.qd, &ur_nom);
        let storage = storage_eval(&s.ts, &s.err, &s.jac, &s.gains, &s.qd);
        let qp = build_proposed_qp(&s.dynamics, &s.qd, &s.ts, &storage, &s.barrier, &cf.force, &ur_nom, &s.gains);
        let sol = solve_qp(&qp, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_relative_eq!(sol.ur().unwrap(), ur_nom, epsilon = 1e-6);
        assert_relative_eq!(sol.tau().unwrap(), cf.tau, epsilon = 1e-6);
    }

    #[test]
    fn proposed_qp_enforces_passivity_row() {
        let s = setup(
            RobotState::new(dvector![0.3, 0.6], dvector![1.5, -0.8]),
            ReferenceState::new(dvector![1.0, 1.0], dvector![-0.5, 0.4]),
            BarrierConfig::default(),
        );
        let ur_nom = dvector![4.0, -5.0];
        let cf = pbc_controller(&s.ts, &s.err, &s.dynamics, &s.jac, &s.gains, &s.qd, &ur_nom);
        let storage = storage_eval(&s.ts, &s.err, &s.jac, &s.gains, &s.qd);
        let qp = build_proposed_qp(&s.dynamics, &s.qd, &s.ts, &storage, &s.barrier, &cf.force, &ur_nom, &s.gains);
        let sol = solve_qp(&qp, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        let vdot = storage.vdot(&sol.qdd().unwrap(), &sol.ur().unwrap());
        assert!(vdot <= 1e-6, "{vdot}");
        // Dynamics equality cross-checked against forward dynamics.
        let fd = s.dynamics.forward_dynamics(&s.qd, &sol.tau().unwrap(), &dvector![0.0, 0.0]);
        assert_relative_eq!(fd, sol.qdd().unwrap(), epsilon = 1e-6);
    }

    #[test]
    fn proposed_force_target_follows_reference_input() {
        // Closed-form solutions at any u_r meet f(u_r) exactly, so the
        // objective gap between two of them is the w₁ term alone.
        let s = setup(
            RobotState::new(dvector![0.3, 0.9], dvector![0.4, -0.3]),
            ReferenceState::new(dvector![1.0, 1.2], dvector![0.1, 0.2]),
            BarrierConfig::default(),
        );
        let ur_nom = dvector![0.5, -1.0];
        let storage = storage_eval(&s.ts, &s.err, &s.jac, &s.gains, &s.qd);
        let stacked = |ur: &DVector<f64>| {
            let cf = pbc_controller(&s.ts, &s.err, &s.dynamics, &s.jac, &s.gains, &s.qd, ur);
            let qdd = s.dynamics.forward_dynamics(&s.qd, &cf.tau, &dvector![0.0, 0.0]);
            let mut z = DVector::zeros(6);
            z.rows_mut(0, 2).copy_from(&qdd);
            z.rows_mut(2, 2).copy_from(&cf.tau);
            z.rows_mut(4, 2).copy_from(ur);
            (z, cf.force)
        };
        let (z_nom, f_nom) = stacked(&ur_nom);
        let qp = build_proposed_qp(&s.dynamics, &s.qd, &s.ts, &storage, &s.barrier, &f_nom, &ur_nom, &s.gains);
        let obj = |z: &DVector<f64>| {
            0.5 * z.dot(&(&qp.h * z)) + qp.g.dot(z) - 0.5 * HESSIAN_REGULARIZATION * z.norm_squared()
        };
        let ur = dvector![2.0, 0.5];
        let (z, _) = stacked(&ur);
        let expected = s.gains.w1 * (&ur - &ur_nom).norm_squared();
        assert_relative_eq!(obj(&z) - obj(&z_nom), expected, epsilon = 1e-8 * (1.0 + expected));
    }

    #[test]
    fn proposed_qp_barrier_active_keeps_passivity() {
        let s = setup(
            RobotState::new(dvector![0.3, 0.08], dvector![0.0, -2.0]),
            ReferenceState::new(dvector![3.0, 0.5], dvector![0.0, 0.0]),
            BarrierConfig::default(),
        );
        let ur_nom = dvector![0.0, 0.0];
        let cf = pbc_controller(&s.ts, &s.err, &s.dynamics, &s.jac, &s.gains, &s.qd, &ur_nom);
        let storage = storage_eval(&s.ts, &s.err, &s.jac, &s.gains, &s.qd);
        let qp = build_proposed_qp(&s.dynamics, &s.qd, &s.ts, &storage, &s.barrier, &cf.force, &ur_nom, &s.gains);
        let sol = solve_qp(&qp, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        let qdd = sol.qdd().unwrap();
        assert!(s.barrier.a.dot(&qdd) >= s.barrier.b - 1e-6);
        assert!(storage.vdot(&qdd, &sol.ur().unwrap()) <= 1e-6);
        assert!((sol.ur().unwrap() - &ur_nom).norm() > 1e-3);
    }
}
