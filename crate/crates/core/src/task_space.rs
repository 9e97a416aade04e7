//! Task map, operational-space quantities, the tracking storage function and
//! the closed-form passivity-based controllers.
//!
//! The storage function is
//!
//! ```text
//! V = ½ ẋ̃ᵀ Λ ẋ̃ + ½ x̃ᵀ K_P x̃
//! ```
//!
//! and its derivative is affine in the joint accelerations and the reference
//! input:
//!
//! ```text
//! V̇ = ẋ̃ᵀ (Λ Q J̄ ẋ̃ − Λ u_r + Λ (J q̈ + J̇ q̇) + K_P x̃)
//! ```
//!
//! with `Λ = (J M⁻¹ Jᵀ)⁻¹`, `J̄ = M⁻¹ Jᵀ Λ` and `Q = J M⁻¹ C − J̇`.

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::dynamics::{DynamicsTerms, TaskJacobians};
use crate::error::ControlError;
use crate::robot_model::{RobotModel, RobotState};

/// Largest condition number of `J M⁻¹ Jᵀ` for which the exact Λ is formed.
pub const MAX_CONDITION: f64 = 1e12;
/// Distance from ±π/2 pitch at which Euler rates become undefined.
pub const PITCH_SINGULARITY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMode {
    /// End-effector position (m = 3).
    Position3,
    /// End-effector position and extrinsic x-y-z Euler angles (m = 6).
    Pose6,
    /// End-effector x-y position (m = 2).
    Planar2,
}

impl std::str::FromStr for TaskMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "position3" => Ok(Self::Position3),
            "pose6" => Ok(Self::Pose6),
            "planar2" => Ok(Self::Planar2),
            other => Err(format!(
                "unknown task mode `{other}` (expected position3, pose6 or planar2)"
            )),
        }
    }
}

/// Which end-effector quantity is regulated. The frame is always the end-effector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskMapConfig {
    pub mode: TaskMode,
}

impl TaskMapConfig {
    pub fn new(mode: TaskMode) -> Self {
        Self { mode }
    }

    pub fn planar2() -> Self {
        Self::new(TaskMode::Planar2)
    }

    pub fn position3() -> Self {
        Self::new(TaskMode::Position3)
    }

    pub fn pose6() -> Self {
        Self::new(TaskMode::Pose6)
    }

    pub fn dim(&self) -> usize {
        match self.mode {
            TaskMode::Position3 => 3,
            TaskMode::Pose6 => 6,
            TaskMode::Planar2 => 2,
        }
    }
}

/// Extrinsic x-y-z Euler angles `(roll, pitch, yaw)` of `R = Rz·Ry·Rx`.
pub fn rotation_to_rpy(r: &Matrix3<f64>) -> Vector3<f64> {
    let roll = r[(2, 1)].atan2(r[(2, 2)]);
    let pitch = (-r[(2, 0)]).atan2((r[(2, 1)].powi(2) + r[(2, 2)].powi(2)).sqrt());
    let yaw = r[(1, 0)].atan2(r[(0, 0)]);
    Vector3::new(roll, pitch, yaw)
}

/// Maps Euler-angle rates to world angular velocity: `ω = E(rpy) · d(rpy)/dt`.
pub fn euler_rate_matrix(rpy: &Vector3<f64>) -> Matrix3<f64> {
    let (sp, cp) = rpy.y.sin_cos();
    let (sy, cy) = rpy.z.sin_cos();
    Matrix3::new(cy * cp, -sy, 0.0, sy * cp, cy, 0.0, -sp, 0.0, 1.0)
}

fn check_pitch(rpy: &Vector3<f64>) -> Result<(), ControlError> {
    if (std::f64::consts::FRAC_PI_2 - rpy.y.abs()).abs() < PITCH_SINGULARITY_TOL {
        return Err(ControlError::RepresentationSingularity { pitch: rpy.y });
    }
    Ok(())
}

/// Task-space pose `x(q)`.
pub fn task_pose(
    model: &RobotModel,
    q: &DVector<f64>,
    cfg: &TaskMapConfig,
) -> Result<DVector<f64>, ControlError> {
    let ee = model.forward_kinematics(q).ee;
    let p = ee.position;
    Ok(match cfg.mode {
        TaskMode::Planar2 => DVector::from_vec(vec![p.x, p.y]),
        TaskMode::Position3 => DVector::from_vec(vec![p.x, p.y, p.z]),
        TaskMode::Pose6 => {
            let rpy = rotation_to_rpy(&ee.rotation);
            check_pitch(&rpy)?;
            DVector::from_vec(vec![p.x, p.y, p.z, rpy.x, rpy.y, rpy.z])
        }
    })
}

/// Analytic task Jacobian `∂x/∂q`.
pub fn task_jacobian(
    model: &RobotModel,
    q: &DVector<f64>,
    cfg: &TaskMapConfig,
) -> Result<DMatrix<f64>, ControlError> {
    let n = model.dof();
    let poses = model.forward_kinematics(q);
    let pe = poses.ee.position;
    let mut linear = DMatrix::zeros(3, n);
    let mut angular = DMatrix::zeros(3, n);
    for i in 0..n {
        let z = poses.joint_axis(model, i);
        let v = z.cross(&(pe - poses.links[i].position));
        linear.fixed_view_mut::<3, 1>(0, i).copy_from(&v);
        angular.fixed_view_mut::<3, 1>(0, i).copy_from(&z);
    }
    Ok(match cfg.mode {
        TaskMode::Planar2 => linear.rows(0, 2).into_owned(),
        TaskMode::Position3 => linear,
        TaskMode::Pose6 => {
            let rpy = rotation_to_rpy(&poses.ee.rotation);
            check_pitch(&rpy)?;
            let e_inv = euler_rate_matrix(&rpy)
                .try_inverse()
                .ok_or(ControlError::RepresentationSingularity { pitch: rpy.y })?;
            let mut j = DMatrix::zeros(6, n);
            j.rows_mut(0, 3).copy_from(&linear);
            let rates = DMatrix::from_iterator(3, 3, e_inv.iter().copied()) * angular;
            j.rows_mut(3, 3).copy_from(&rates);
            j
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskState {
    pub x: DVector<f64>,
    pub xd: DVector<f64>,
}

pub fn task_map(
    model: &RobotModel,
    state: &RobotState,
    cfg: &TaskMapConfig,
) -> Result<TaskState, ControlError> {
    let x = task_pose(model, &state.q, cfg)?;
    let xd = task_jacobian(model, &state.q, cfg)? * &state.qd;
    Ok(TaskState { x, xd })
}

/// State of the double-integrator reference system `ẍ_r = u_r`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceState {
    pub xr: DVector<f64>,
    pub xrd: DVector<f64>,
}

impl ReferenceState {
    pub fn new(xr: DVector<f64>, xrd: DVector<f64>) -> Self {
        assert_eq!(xr.len(), xrd.len(), "reference dimensions");
        Self { xr, xrd }
    }
}

/// Tracking error between the task state and the reference system.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskError {
    pub xt: DVector<f64>,
    pub xtd: DVector<f64>,
}

impl TaskError {
    pub fn new(task: &TaskState, reference: &ReferenceState) -> Self {
        Self {
            xt: &task.x - &reference.xr,
            xtd: &task.xd - &reference.xrd,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TaskSpaceQuantities {
    /// Task-space inertia Λ.
    pub lambda: DMatrix<f64>,
    /// Generalized inverse of J used for force mapping (n×m).
    pub jbar: DMatrix<f64>,
    /// `J M⁻¹ C − J̇` (m×n).
    pub q: DMatrix<f64>,
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Exact operational-space quantities. Refuses to form Λ when `J M⁻¹ Jᵀ`
/// is too ill-conditioned to invert meaningfully.
pub fn operational_quantities(
    dynamics: &DynamicsTerms,
    jac: &TaskJacobians,
) -> Result<TaskSpaceQuantities, ControlError> {
    let minv_jt = dynamics.solve_mass_matrix(&jac.j.transpose());
    let inv_lambda = symmetrize(&(&jac.j * &minv_jt));
    let eig = SymmetricEigen::new(inv_lambda.clone()).eigenvalues;
    let (lo, hi) = (eig.min(), eig.max());
    let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if !(condition < MAX_CONDITION) {
        return Err(ControlError::NearSingular { condition });
    }
    let lambda = symmetrize(
        &inv_lambda
            .cholesky()
            .ok_or(ControlError::NearSingular { condition })?
            .inverse(),
    );
    let jbar = &minv_jt * &lambda;
    let q = &jac.j * dynamics.solve_mass_matrix(&dynamics.coriolis) - &jac.jdot;
    Ok(TaskSpaceQuantities { lambda, jbar, q })
}

/// Regularized quantities used where the exact ones are undefined:
/// `Λ_δ = (J M⁻¹ Jᵀ + δI)⁻¹` and the damped least-squares inverse
/// `J^T (J J^T + δI)^-1` in place of J̄.
pub fn damped_quantities(
    dynamics: &DynamicsTerms,
    jac: &TaskJacobians,
    delta: f64,
) -> TaskSpaceQuantities {
    let m = jac.j.nrows();
    let eye = DMatrix::<f64>::identity(m, m);
    let minv_jt = dynamics.solve_mass_matrix(&jac.j.transpose());
    let inv_lambda = symmetrize(&(&jac.j * &minv_jt)) + &eye * delta;
    let lambda = symmetrize(&spd_inverse(&inv_lambda));
    let jjt = &jac.j * jac.j.transpose() + &eye * delta;
    let jbar = jac.j.transpose() * spd_inverse(&jjt);
    let q = &jac.j * dynamics.solve_mass_matrix(&dynamics.coriolis) - &jac.jdot;
    TaskSpaceQuantities { lambda, jbar, q }
}

fn spd_inverse(a: &DMatrix<f64>) -> DMatrix<f64> {
    match a.clone().cholesky() {
        Some(c) => c.inverse(),
        None => a
            .clone()
            .pseudo_inverse(0.0)
            .expect("pseudo-inverse of a symmetric matrix"),
    }
}

fn is_spd(m: &DMatrix<f64>) -> bool {
    m.is_square()
        && (m - m.transpose()).amax() <= 1e-12 * (1.0 + m.amax())
        && m.clone().cholesky().is_some()
}

/// Controller and reference-system gains.
#[derive(Debug, Clone)]
pub struct ControllerGains {
    pub kp: DMatrix<f64>,
    pub kd: DMatrix<f64>,
    /// Damping of the damped pseudoinverse.
    pub delta: f64,
    /// Weight on `‖u_r − u_r_nom‖²`.
    pub w1: f64,
    /// Weight on `‖J̄ᵀτ − f_des‖²`.
    pub w2: f64,
    pub kp_ref: DMatrix<f64>,
    pub kd_ref: DMatrix<f64>,
}

impl ControllerGains {
    /// Diagonal gains with the default weights, damping and reference gains `2I`.
    pub fn diagonal(kp: &[f64], kd: &[f64]) -> Self {
        let m = kp.len();
        Self {
            kp: DMatrix::from_diagonal(&DVector::from_column_slice(kp)),
            kd: DMatrix::from_diagonal(&DVector::from_column_slice(kd)),
            delta: 1e-3,
            w1: 1.0,
            w2: 10.0,
            kp_ref: DMatrix::identity(m, m) * 2.0,
            kd_ref: DMatrix::identity(m, m) * 2.0,
        }
    }

    pub fn validate(&self, m: usize) -> Result<(), ControlError> {
        for (name, mat) in [
            ("kp", &self.kp),
            ("kd", &self.kd),
            ("kp_ref", &self.kp_ref),
            ("kd_ref", &self.kd_ref),
        ] {
            if mat.nrows() != m || mat.ncols() != m {
                return Err(ControlError::Gains(format!(
                    "{name} must be {m}x{m}, got {}x{}",
                    mat.nrows(),
                    mat.ncols()
                )));
            }
            if !is_spd(mat) {
                return Err(ControlError::Gains(format!(
                    "{name} must be symmetric positive definite"
                )));
            }
        }
        for (name, v) in [("delta", self.delta), ("w1", self.w1), ("w2", self.w2)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ControlError::Gains(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Storage function value and the affine decomposition of its derivative:
/// `V̇(q̈, u_r) = vdot_const + vdot_qdd·q̈ + vdot_ur·u_r`.
#[derive(Debug, Clone)]
pub struct StorageEval {
    pub v: f64,
    pub vdot_const: f64,
    pub vdot_qdd: DVector<f64>,
    pub vdot_ur: DVector<f64>,
}

impl StorageEval {
    pub fn vdot(&self, qdd: &DVector<f64>, ur: &DVector<f64>) -> f64 {
        self.vdot_const + self.vdot_qdd.dot(qdd) + self.vdot_ur.dot(ur)
    }
}

pub fn storage_eval(
    ts: &TaskSpaceQuantities,
    err: &TaskError,
    jac: &TaskJacobians,
    gains: &ControllerGains,
    qd: &DVector<f64>,
) -> StorageEval {
    let lam_xtd = &ts.lambda * &err.xtd;
    let kp_xt = &gains.kp * &err.xt;
    let v = 0.5 * err.xtd.dot(&lam_xtd) + 0.5 * err.xt.dot(&kp_xt);
    let inner = &ts.lambda * (&ts.q * (&ts.jbar * &err.xtd) + &jac.jdot * qd) + kp_xt;
    StorageEval {
        v,
        vdot_const: err.xtd.dot(&inner),
        vdot_qdd: jac.j.transpose() * &lam_xtd,
        vdot_ur: -(ts.lambda.transpose() * &err.xtd),
    }
}

/// Task force and joint torque realizing it.
#[derive(Debug, Clone)]
pub struct TaskForceCommand {
    pub force: DVector<f64>,
    pub tau: DVector<f64>,
}

/// Desired task force
/// `f = Λ u_r + J̄ᵀτ_g + ΛQ(q̇ − J̄ẋ̃) − K_P x̃ − K_D ẋ̃`.
pub fn desired_force(
    ts: &TaskSpaceQuantities,
    err: &TaskError,
    dynamics: &DynamicsTerms,
    gains: &ControllerGains,
    qd: &DVector<f64>,
    ur: &DVector<f64>,
) -> DVector<f64> {
    &ts.lambda * ur + ts.jbar.transpose() * &dynamics.gravity
        + &ts.lambda * (&ts.q * (qd - &ts.jbar * &err.xtd))
        - &gains.kp * &err.xt
        - &gains.kd * &err.xtd
}

/// `τ = Jᵀ f + (I − Jᵀ J̄ᵀ) τ_g`: the force through Jᵀ plus gravity
/// compensation in the complementary subspace.
pub fn realize_torque(
    ts: &TaskSpaceQuantities,
    jac: &TaskJacobians,
    dynamics: &DynamicsTerms,
    force: &DVector<f64>,
) -> DVector<f64> {
    let jt = jac.j.transpose();
    &jt * force + &dynamics.gravity - &jt * (ts.jbar.transpose() * &dynamics.gravity)
}

/// Closed-form passivity-based controller; `J̄ᵀτ` equals the desired force.
pub fn pbc_controller(
    ts: &TaskSpaceQuantities,
    err: &TaskError,
    dynamics: &DynamicsTerms,
    jac: &TaskJacobians,
    gains: &ControllerGains,
    qd: &DVector<f64>,
    ur: &DVector<f64>,
) -> TaskForceCommand {
    let force = desired_force(ts, err, dynamics, gains, qd, ur);
    let tau = realize_torque(ts, jac, dynamics, &force);
    TaskForceCommand { force, tau }
}

/// The closed-form controller with the damped pseudoinverse in place of J̄
/// and the correspondingly regularized Λ. Finite at singular configurations.
pub fn pbc_damped_controller(
    err: &TaskError,
    dynamics: &DynamicsTerms,
    jac: &TaskJacobians,
    gains: &ControllerGains,
    qd: &DVector<f64>,
    ur: &DVector<f64>,
    delta: f64,
) -> TaskForceCommand {
    let ts = damped_quantities(dynamics, jac, delta);
    pbc_controller(&ts, err, dynamics, jac, gains, qd, ur)
}
