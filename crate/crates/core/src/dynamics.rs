//! Joint-space rigid-body dynamics `M(q)q̈ + C(q,q̇)q̇ + τ_g(q) = τ` and the
//! task Jacobian with its time derivative.
//!
//! Recursions are written in the world frame: every link carries its world
//! rotation, joint origin and joint axis, which keeps the revolute-only
//! chain free of spatial-vector bookkeeping.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::error::ControlError;
use crate::robot_model::{ChainPoses, RobotModel, RobotState};
use crate::task_space::{task_jacobian, TaskMapConfig};

/// Central finite-difference step used for every numerically derived quantity.
pub const FD_STEP: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct DynamicsTerms {
    pub mass: DMatrix<f64>,
    pub coriolis: DMatrix<f64>,
    pub gravity: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct TaskJacobians {
    pub j: DMatrix<f64>,
    /// dJ/dt along the current joint velocity.
    pub jdot: DMatrix<f64>,
}

/// Per-link world-frame geometry shared by the recursions.
struct LinkFrames {
    origin: Vec<Vector3<f64>>,
    axis: Vec<Vector3<f64>>,
    com: Vec<Vector3<f64>>,
    inertia: Vec<Matrix3<f64>>,
}

impl LinkFrames {
    fn new(model: &RobotModel, q: &DVector<f64>) -> Self {
        let poses: ChainPoses = model.forward_kinematics(q);
        let n = model.dof();
        let mut frames = Self {
            origin: Vec::with_capacity(n),
            axis: Vec::with_capacity(n),
            com: Vec::with_capacity(n),
            inertia: Vec::with_capacity(n),
        };
        for (i, (pose, link)) in poses.links.iter().zip(model.links()).enumerate() {
            frames.origin.push(pose.position);
            frames.axis.push(poses.joint_axis(model, i));
            frames.com.push(pose.position + pose.rotation * link.com);
            frames
                .inertia
                .push(pose.rotation * link.inertia * pose.rotation.transpose());
        }
        frames
    }
}

fn skew_outer(d: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::identity() * d.norm_squared() - d * d.transpose()
}

/// Mass matrix by the composite-rigid-body recursion.
pub fn mass_matrix(model: &RobotModel, q: &DVector<f64>) -> DMatrix<f64> {
    let n = model.dof();
    let frames = LinkFrames::new(model, q);
    let links = model.links();
    let mut m = DMatrix::zeros(n, n);

    // Composite body of links i..n-1, accumulated tip to base.
    let mut c_mass = 0.0;
    let mut c_first_moment = Vector3::zeros();
    // Inertia of the composite about the world origin.
    let mut c_inertia_origin = Matrix3::zeros();

    for i in (0..n).rev() {
        let mi = links[i].mass;
        let ci = frames.com[i];
        c_mass += mi;
        c_first_moment += mi * ci;
        c_inertia_origin += frames.inertia[i] + mi * skew_outer(&ci);

        let com = if c_mass > 0.0 {
            c_first_moment / c_mass
        } else {
            frames.origin[i]
        };
        let inertia_com = c_inertia_origin - c_mass * skew_outer(&com);

        let z = frames.axis[i];
        let force = c_mass * z.cross(&(com - frames.origin[i]));
        let moment_com = inertia_com * z;
        for j in 0..=i {
            let moment = moment_com + (com - frames.origin[j]).cross(&force);
            let value = frames.axis[j].dot(&moment);
            m[(j, i)] = value;
            m[(i, j)] = value;
        }
    }
    m
}

/// Recursive Newton-Euler inverse dynamics: `M q̈ + C q̇ + τ_g`.
pub fn inverse_dynamics(
    model: &RobotModel,
    q: &DVector<f64>,
    qd: &DVector<f64>,
    qdd: &DVector<f64>,
) -> DVector<f64> {
    let n = model.dof();
    let frames = LinkFrames::new(model, q);
    let links = model.links();

    let mut force = vec![Vector3::zeros(); n];
    let mut moment = vec![Vector3::zeros(); n];

    let mut omega = Vector3::zeros();
    let mut alpha = Vector3::zeros();
    let mut acc_origin = -model.gravity();
    let mut prev_origin = Vector3::zeros();

    for i in 0..n {
        let p = frames.origin[i];
        let lever = p - prev_origin;
        acc_origin += alpha.cross(&lever) + omega.cross(&omega.cross(&lever));
        let z = frames.axis[i];
        let spin = z * qd[i];
        alpha += z * qdd[i] + omega.cross(&spin);
        omega += spin;

        let r = frames.com[i] - p;
        let acc_com = acc_origin + alpha.cross(&r) + omega.cross(&omega.cross(&r));
        let inertia = frames.inertia[i];
        force[i] = links[i].mass * acc_com;
        moment[i] = inertia * alpha + omega.cross(&(inertia * omega)) + r.cross(&force[i]);
        prev_origin = p;
    }

    let mut tau = DVector::zeros(n);
    let mut f_child = Vector3::zeros();
    let mut n_child = Vector3::zeros();
    let mut child_origin = Vector3::zeros();
    for i in (0..n).rev() {
        let p = frames.origin[i];
        let f = force[i] + f_child;
        let nm = moment[i] + n_child + (child_origin - p).cross(&f_child);
        tau[i] = frames.axis[i].dot(&nm);
        f_child = f;
        n_child = nm;
        child_origin = p;
    }
    tau
}

pub fn gravity_torques(model: &RobotModel, q: &DVector<f64>) -> DVector<f64> {
    let zero = DVector::zeros(model.dof());
    inverse_dynamics(model, q, &zero, &zero)
}

/// `∂M/∂q_k` for every joint by central differences.
pub fn mass_matrix_partials(model: &RobotModel, q: &DVector<f64>) -> Vec<DMatrix<f64>> {
    (0..model.dof())
        .map(|k| {
            let mut qp = q.clone();
            let mut qm = q.clone();
            qp[k] += FD_STEP;
            qm[k] -= FD_STEP;
            (mass_matrix(model, &qp) - mass_matrix(model, &qm)) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Coriolis matrix from Christoffel symbols of the first kind,
/// `C_ij = Σ_k ½(∂_k M_ij + ∂_j M_ik − ∂_i M_jk) q̇_k`.
pub fn coriolis_matrix(model: &RobotModel, q: &DVector<f64>, qd: &DVector<f64>) -> DMatrix<f64> {
    let n = model.dof();
    if qd.iter().all(|v| *v == 0.0) {
        return DMatrix::zeros(n, n);
    }
    let dm = mass_matrix_partials(model, q);
    let mut c = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..n {
                acc += 0.5 * (dm[k][(i, j)] + dm[j][(i, k)] - dm[i][(j, k)]) * qd[k];
            }
            c[(i, j)] = acc;
        }
    }
    c
}

impl DynamicsTerms {
    pub fn evaluate(model: &RobotModel, state: &RobotState) -> Self {
        Self {
            mass: mass_matrix(model, &state.q),
            coriolis: coriolis_matrix(model, &state.q, &state.qd),
            gravity: gravity_torques(model, &state.q),
        }
    }

    /// `q̈ = M⁻¹(τ + τ_ext − C q̇ − τ_g)`.
    pub fn forward_dynamics(
        &self,
        qd: &DVector<f64>,
        tau: &DVector<f64>,
        tau_ext: &DVector<f64>,
    ) -> DVector<f64> {
        let rhs = tau + tau_ext - &self.coriolis * qd - &self.gravity;
        self.solve_mass(&rhs)
    }

    /// `M⁻¹ b`.
    pub fn solve_mass(&self, rhs: &DVector<f64>) -> DVector<f64> {
        match self.mass.clone().cholesky() {
            Some(chol) => chol.solve(rhs),
            None => self
                .mass
                .clone()
                .full_piv_lu()
                .solve(rhs)
                .expect("mass matrix is singular"),
        }
    }

    /// `M⁻¹ B`.
    pub fn solve_mass_matrix(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        match self.mass.clone().cholesky() {
            Some(chol) => chol.solve(rhs),
            None => self
                .mass
                .clone()
                .full_piv_lu()
                .solve(rhs)
                .expect("mass matrix is singular"),
        }
    }
}

pub fn forward_dynamics(
    model: &RobotModel,
    state: &RobotState,
    tau: &DVector<f64>,
    tau_ext: &DVector<f64>,
) -> DVector<f64> {
    DynamicsTerms::evaluate(model, state).forward_dynamics(&state.qd, tau, tau_ext)
}

/// Task Jacobian and its directional derivative along `q̇`.
pub fn task_jacobians(
    model: &RobotModel,
    state: &RobotState,
    task: &TaskMapConfig,
) -> Result<TaskJacobians, ControlError> {
    let j = task_jacobian(model, &state.q, task)?;
    let jdot = if state.qd.iter().all(|v| *v == 0.0) {
        DMatrix::zeros(j.nrows(), j.ncols())
    } else {
        let qp = &state.q + &state.qd * FD_STEP;
        let qm = &state.q - &state.qd * FD_STEP;
        (task_jacobian(model, &qp, task)? - task_jacobian(model, &qm, task)?) / (2.0 * FD_STEP)
    };
    Ok(TaskJacobians { j, jdot })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::robot_model::fixtures::{PENDULUM, PLANAR2};
    use approx::assert_relative_eq;
    use nalgebra::dvector;
    use std::f64::consts::PI;

    fn planar() -> RobotModel {
        RobotModel::from_toml_str(PLANAR2).unwrap()
    }

    fn pendulum() -> RobotModel {
        RobotModel::from_toml_str(PENDULUM).unwrap()
    }

    /// Symbolic equations of motion of the unit two-link arm with point masses
    /// at the link ends and gravity along -y.
    fn planar_symbolic(q: &DVector<f64>, qd: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>, DVector<f64>) {
        let (c2, s2) = (q[1].cos(), q[1].sin());
        let m11 = 3.0 + 2.0 * c2;
        let m12 = 1.0 + c2;
        let mass = DMatrix::from_row_slice(2, 2, &[m11, m12, m12, 1.0]);
        let coriolis_vec = dvector![
            -s2 * (2.0 * qd[0] * qd[1] + qd[1] * qd[1]),
            s2 * qd[0] * qd[0]
        ];
        let g = 9.81;
        let grav = dvector![
            2.0 * g * q[0].cos() + g * (q[0] + q[1]).cos(),
            g * (q[0] + q[1]).cos()
        ];
        (mass, coriolis_vec, grav)
    }

    #[test]
    fn pendulum_mass_is_ml2() {
        let m = mass_matrix(&pendulum(), &dvector![0.4]);
        assert_relative_eq!(m[(0, 0)], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn planar_mass_matrix_matches_lagrangian() {
        let m = mass_matrix(&planar(), &dvector![0.0, PI / 2.0]);
        assert_relative_eq!(m[(0, 0)], 3.0, epsilon = 1e-12);
        let q = dvector![0.3, -1.1];
        let (sym, _, _) = planar_symbolic(&q, &dvector![0.0, 0.0]);
        assert_relative_eq!(mass_matrix(&planar(), &q), sym, epsilon = 1e-12);
    }

    #[test]
    fn pendulum_gravity() {
        let model = pendulum();
        // Hanging straight down along -y.
        assert_relative_eq!(gravity_torques(&model, &dvector![-PI / 2.0])[0], 0.0, epsilon = 1e-12);
        assert_relative_eq!(gravity_torques(&model, &dvector![0.0])[0].abs(), 9.81, epsilon = 1e-12);
        let free = model.with_gravity(Vector3::zeros());
        assert_eq!(gravity_torques(&free, &dvector![0.7])[0], 0.0);
    }

    #[test]
    fn planar_gravity_and_coriolis_match_lagrangian() {
        let model = planar();
        let q = dvector![0.0, PI / 2.0];
        let qd = dvector![1.0, 0.0];
        let (_, cqd, grav) = planar_symbolic(&q, &qd);
        assert_relative_eq!(gravity_torques(&model, &q), grav, epsilon = 1e-12);
        let c = coriolis_matrix(&model, &q, &qd);
        assert_relative_eq!(&c * &qd, cqd, epsilon = 1e-8);
        let rnea_bias = inverse_dynamics(&model, &q, &qd, &dvector![0.0, 0.0]) - grav;
        assert_relative_eq!(rnea_bias, cqd, epsilon = 1e-12);
    }

    #[test]
    fn coriolis_vanishes_at_rest() {
        let c = coriolis_matrix(&planar(), &dvector![0.2, 0.9], &dvector![0.0, 0.0]);
        assert_eq!(c, DMatrix::zeros(2, 2));
    }

    #[test]
    fn forward_dynamics_cases() {
        let model = pendulum();
        let state = RobotState::at_rest(dvector![0.0]);
        let qdd = forward_dynamics(&model, &state, &dvector![0.0], &dvector![0.0]);
        assert_relative_eq!(qdd[0].abs(), 9.81, epsilon = 1e-12);

        let model = planar();
        let state = RobotState::at_rest(dvector![0.4, 0.8]);
        let tau_g = gravity_torques(&model, &state.q);
        let qdd = forward_dynamics(&model, &state, &tau_g, &dvector![0.0, 0.0]);
        assert!(qdd.amax() < 1e-12);

        let state = RobotState::new(dvector![0.4, 0.8], dvector![-0.5, 1.3]);
        let target = dvector![2.0, -3.0];
        let tau = inverse_dynamics(&model, &state.q, &state.qd, &target);
        let qdd = forward_dynamics(&model, &state, &tau, &dvector![0.0, 0.0]);
        assert_relative_eq!(qdd, target, epsilon = 1e-9);
    }

    #[test]
    fn planar_jacobian_and_zero_velocity_derivative() {
        let model = planar();
        let task = TaskMapConfig::planar2();
        let state = RobotState::at_rest(dvector![0.0, PI / 2.0]);
        let jac = task_jacobians(&model, &state, &task).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[-1.0, -1.0, 1.0, 0.0]);
        assert_relative_eq!(jac.j, expected, epsilon = 1e-12);
        assert_eq!(jac.jdot, DMatrix::zeros(2, 2));
    }
}
