//! Randomized invariant suite. Every check is seeded and reports its worst
//! observed error next to the tolerance it was held to.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dynamics::{mass_matrix, task_jacobians, DynamicsTerms, FD_STEP};
use crate::manipulability::{
    ecbf_row, manipulability, manipulability_gradient, BarrierConfig, BarrierError,
};
use crate::qp::{kkt_report, solve_qp, QpProblem, QpStatus, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::qp_control::build_proposed_qp;
use crate::robot_model::{RobotModel, RobotState};
use crate::task_space::{
    desired_force, operational_quantities, pbc_controller, storage_eval, task_jacobian, task_map,
    task_pose, ControllerGains, ReferenceState, TaskError, TaskMapConfig, TaskMode,
};

/// Model files shipped with the repository.
pub mod bundled {
    pub const GEN7: &str = include_str!("../../../models/gen7.toml");
    pub const PLANAR2: &str = include_str!("../../../models/planar2.toml");
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub samples: usize,
    pub failures: usize,
    pub worst: f64,
    pub tolerance: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.samples > 0
    }

    pub fn line(&self) -> String {
        format!(
            "{} {:<28} samples={:<5} failures={:<4} worst={:.3e} tol={:.1e}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.samples,
            self.failures,
            self.worst,
            self.tolerance
        )
    }
}

struct Tally {
    name: &'static str,
    tolerance: f64,
    samples: usize,
    failures: usize,
    worst: f64,
}

impl Tally {
    fn new(name: &'static str, tolerance: f64) -> Self {
        Self {
            name,
            tolerance,
            samples: 0,
            failures: 0,
            worst: 0.0,
        }
    }

    /// Records `error` against `bound`; the worst ratio is reported in units
    /// of the base tolerance.
    fn record(&mut self, error: f64, bound: f64) {
        self.samples += 1;
        if !(error <= bound) {
            self.failures += 1;
        }
        let scaled = if error.is_nan() { f64::INFINITY } else { error * self.tolerance / bound };
        self.worst = self.worst.max(scaled);
    }

    fn fail(&mut self) {
        self.samples += 1;
        self.failures += 1;
        self.worst = f64::INFINITY;
    }

    fn finish(self) -> CheckOutcome {
        CheckOutcome {
            name: self.name.to_string(),
            samples: self.samples,
            failures: self.failures,
            worst: self.worst,
            tolerance: self.tolerance,
        }
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| rng.random_range(lo..hi)))
}

fn frob(m: &DMatrix<f64>) -> f64 {
    m.norm()
}

/// Angular distance kept from pitch = ±π/2 when sampling pose-task states.
pub const PITCH_MARGIN: f64 = 0.3;

/// Fixture for the randomized checks: the bundled 7-joint arm with a full
/// pose task.
pub struct Fixture {
    pub model: RobotModel,
    pub task: TaskMapConfig,
    pub barrier: BarrierConfig,
    pub gains: ControllerGains,
}

impl Fixture {
    pub fn gen7() -> Self {
        Self {
            model: RobotModel::from_toml_str(bundled::GEN7).expect("bundled model"),
            task: TaskMapConfig::new(TaskMode::Pose6),
            barrier: BarrierConfig::default(),
            gains: ControllerGains::diagonal(
                &[100.0, 100.0, 100.0, 5.0, 5.0, 5.0],
                &[20.0, 20.0, 20.0, 0.5, 0.5, 0.5],
            ),
        }
    }

    /// Random state with `μ ≥ ε`, pitch at least `PITCH_MARGIN` away from the
    /// Euler-angle singularity and a formable task-space inertia.
    pub fn nonsingular_state(&self, rng: &mut ChaCha8Rng, speed: f64) -> RobotState {
        let n = self.model.dof();
        loop {
            let q = uniform(rng, n, -std::f64::consts::PI, std::f64::consts::PI);
            let qd = if speed > 0.0 {
                uniform(rng, n, -speed, speed)
            } else {
                DVector::zeros(n)
            };
            let state = RobotState::new(q, qd);
            let Ok(jac) = task_jacobians(&self.model, &state, &self.task) else {
                continue;
            };
            if manipulability(&jac.j) < self.barrier.epsilon {
                continue;
            }
            if let Ok(x) = task_pose(&self.model, &state.q, &self.task) {
                if self.task.mode == TaskMode::Pose6 && x[4].cos() < PITCH_MARGIN.sin() {
                    continue;
                }
            }
            let dynamics = DynamicsTerms::evaluate(&self.model, &state);
            if operational_quantities(&dynamics, &jac).is_ok() {
                return state;
            }
        }
    }

    pub fn reference_near(
        &self,
        rng: &mut ChaCha8Rng,
        state: &RobotState,
    ) -> ReferenceState {
        let m = self.task.dim();
        let x = task_pose(&self.model, &state.q, &self.task).expect("nonsingular state");
        ReferenceState::new(x + uniform(rng, m, -0.2, 0.2), uniform(rng, m, -0.5, 0.5))
    }
}

/// Rotations produced by forward kinematics stay orthonormal.
pub fn check_fk_orthonormal(fx: &Fixture, rng: &mut ChaCha8Rng, samples: usize) -> CheckOutcome {
    let mut t = Tally::new("fk_orthonormal", 1e-9);
    for _ in 0..samples {
        let q = uniform(rng, fx.model.dof(), -10.0, 10.0);
        let fk = fx.model.forward_kinematics(&q);
        let mut err: f64 = 0.0;
        for pose in fk.links.iter().chain(std::iter::once(&fk.ee)) {
            let r = pose.rotation;
            err = err
                .max((r.transpose() * r - nalgebra::Matrix3::identity()).amax())
                .max((r.determinant() - 1.0).abs());
        }
        t.record(err, t.tolerance);
    }
    t.finish()
}

/// M is symmetric and positive definite.
pub fn check_mass_spd(fx: &Fixture, rng: &mut ChaCha8Rng, samples: usize) -> CheckOutcome {
    let mut t = Tally::new("mass_matrix_spd", 1e-9);
    for _ in 0..samples {
        let q = uniform(rng, fx.model.dof(), -10.0, 10.0);
        let m = mass_matrix(&fx.model, &q);
        let asym = (&m - m.transpose()).amax() / m.amax();
        let min_eig = m.clone().symmetric_eigen().eigenvalues.min();
        if min_eig > 0.0 {
            t.record(asym, t.tolerance);
        } else {
            t.fail();
        }
    }
    t.finish()
}

/// `Ṁ − 2C` is skew-symmetric, with Ṁ by central differences along q̇.
pub fn check_coriolis_skew(fx: &Fixture, rng: &mut ChaCha8Rng, samples: usize) -> CheckOutcome {
    let mut t = Tally::new("mdot_minus_2c_skew", 1e-6);
    for _ in 0..samples {
        let n = fx.model.dof();
        let state = RobotState::new(uniform(rng, n, -10.0, 10.0), uniform(rng, n, -2.0, 2.0));
        let c = DynamicsTerms::evaluate(&fx.model, &state).coriolis;
        let mdot = (mass_matrix(&fx.model, &(&state.q + &state.qd * FD_STEP))
            - mass_matrix(&fx.model, &(&state.q - &state.qd * FD_STEP)))
            / (2.0 * FD_STEP);
        let s = &mdot - &c * 2.0;
        t.record(frob(&(&s + s.transpose())), 1e-6 * (1.0 + frob(&mdot)));
    }
    t.finish()
}

/// `Λ̇ = −Λ (d/dt Λ⁻¹) Λ`, differencing the well-conditioned `J M⁻¹ Jᵀ`
/// along `q̇` rather than Λ itself.
fn lambda_dot_fd(fx: &Fixture, state: &RobotState, lambda: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let inv_lambda_at = |q: DVector<f64>| {
        let at = RobotState::at_rest(q);
        let j = task_jacobian(&fx.model, &at.q, &fx.task).ok()?;
        let dynamics = DynamicsTerms::evaluate(&fx.model, &at);
        Some(&j * dynamics.solve_mass_matrix(&j.transpose()))
    };
    let plus = inv_lambda_at(&state.q + &state.qd * FD_STEP)?;
    let minus = inv_lambda_at(&state.q - &state.qd * FD_STEP)?;
    let d_inv = (plus - minus) / (2.0 * FD_STEP);
    Some(-(lambda * d_inv * lambda))
}

/// `Λ̇ − 2ΛQJ̄` is skew-symmetric, with Λ̇ by central differences along q̇.
pub fn check_lambda_skew(fx: &Fixture, rng: &mut ChaCha8Rng, samples: usize) -> CheckOutcome {
    let mut t = Tally::new("lambdadot_minus_2lqj_skew", 1e-5);
    for _ in 0..samples {
        let state = fx.nonsingular_state(rng, 1.0);
        let dynamics = DynamicsTerms::evaluate(&fx.model, &state);
        let jac = task_jacobians(&fx.model, &state, &fx.task).expect("nonsingular");
        let ts = operational_quantities(&dynamics, &jac).expect("nonsingular");
        let Some(ldot) = lambda_dot_fd(fx, &state, &ts.lambda) else {
            t.fail();
            continue;
        };
        let s = &ldot - &ts.lambda * &ts.q * &ts.jbar * 2.0;
        t.record(frob(&(&s + s.transpose())), 1e-5 * (1.0 + frob(&ldot)));
    }
    t.finish()
}

fn wrap_diff(a: f64, b: f64) -> f64 {
    let d = a - b;
    d - (d / std::f64::consts::TAU).round() * std::f64::consts::TAU
}

/// `ẋ = J q̇` against central differences of the task map.
pub fn check_task_jacobian(fx: &Fixture, rng: &mut ChaCha8Rng, samples: usize) -> CheckOutcome {
    let mut t = Tally::new("task_jacobian_fd", 1e-6);
    for _ in 0..samples {
        let state = fx.nonsingular_state(rng, 1.0);
        let h = FD_STEP;
        let xp = task_pose(&fx.model, &(&state.q + &state.qd * h), &fx.task);
        let xm = task_pose(&fx.model, &(&state.q - &state.qd * h), &fx.task);
        let (Ok(xp), Ok(xm)) = (xp, xm) else {
            t.fail();
            continue;
        };
        let fd = DVector::from_iterator(xp.len(), xp.iter().zip(xm.iter()).map(|(a, b)| wrap_diff(*a, *b) / (2.0 * h)));
        let xd = task_jacobian(&fx.model, &state.q, &fx.task).expect("nonsingular") * &state.qd;
        t.record((&xd - &fd).amax(), 1e-6 * (1.0 + xd.amax()));
    }
    t.finish()
}

/// `J_μ` against central differences of μ.
pub fn check_gradient(fx: &Fixture, rng: &mut ChaCha8Rng, samples: usize) -> CheckOutcome {
    let mut t = Tally::new("manipulability_gradient_fd", 1e-5);
    let mu_at = |q: &DVector<f64>| {
        task_jacobian(&fx.model, q, &fx.task)
            .map(|j| manipulability(&j))
            .unwrap_or(f64::NAN)
    };
    for _ in 0..samples {
        let q = fx.nonsingular_state(rng, 0.0).q;
        let Ok(grad) = manipulability_gradient(&fx.model, &q, &fx.task) else {
            t.fail();
            continue;
        };
        let h = 1e-6;
        let fd = DVector::from_iterator(
            q.len(),
            (0..q.len()).map(|i| {
                let mut e = DVector::zeros(q.len());
                e[i] = h;
                (mu_at(&(&q + &e)) - mu_at(&(&q - &e))) / (2.0 * h)
            }),
        );
        t.record((&grad - &fd).amax(), t.tolerance);
    }
    t.finish()
}

/// `J_μ,2 = l₁l₂ cos q₂ · sign(sin q₂)` on the unit two-link arm.
pub fn check_planar_gradient(rng: &mut ChaCha8Rng, samples: usize) -> CheckOutcome {
    let mut t = Tally::new("planar_gradient_analytic", 1e-6);
    let model = RobotModel::from_toml_str(bundled::PLANAR2).expect("bundled model");
    let task = TaskMapConfig::planar2();
    for _ in 0..samples {
        let q = uniform(rng, 2, -3.1, 3.1);
        if q[1].sin().abs() < 1e-3 {
            continue;
        }
        match manipulability_gradient(&model, &q, &task) {
            Ok(g) => {
                let expected = q[1].cos() * q[1].sin().signum();
                t.record(g[0].abs().max((g[1] - expected).abs()), t.tolerance);
            }
            Err(_) => t.fail(),
        }
    }
    t.finish()
}

/// The barrier row has a nonzero gradient wherever `h ≥ 0`.
pub fn check_barrier_row_nonzero(fx: &Fixture, rng: &mut ChaCha8Rng, samples: usize) -> CheckOutcome {
    let mut t = Tally::new("barrier_row_nonzero", 1e-12);
    for _ in 0..samples {
        let state = fx.nonsingular_state(rng, 1.0);
        match ecbf_row(&fx.model, &state, &fx.task, &fx.barrier) {
            Ok(row) => {
                let norm = row.a.norm();
                t.record(if norm > 1e-12 { 0.0 } else { 1.0 }, 0.5);
            }
            Err(BarrierError::OutsideSafeSet(_)) | Err(BarrierError::Control(_)) => t.fail(),
        }
    }
    t.finish()
}

/// The affine form of V̇ against direct evaluation of
/// `ẋ̃ᵀΛẍ̃ + ½ẋ̃ᵀΛ̇ẋ̃ + x̃ᵀK_Pẋ̃`, and the closed-form controller giving
/// `V̇ = −ẋ̃ᵀK_Dẋ̃`.
pub fn check_storage_derivative(fx: &Fixture, rng: &mut ChaCha8Rng, samples: usize) -> Vec<CheckOutcome> {
    let mut affine = Tally::new("storage_affine_form", 1e-6);
    let mut closed = Tally::new("closed_form_passivity", 1e-6);
    let m = fx.task.dim();
    let n = fx.model.dof();
    for _ in 0..samples {
        let state = fx.nonsingular_state(rng, 1.0);
        let reference = fx.reference_near(rng, &state);
        let dynamics = DynamicsTerms::evaluate(&fx.model, &state);
        let jac = task_jacobians(&fx.model, &state, &fx.task).expect("nonsingular");
        let ts = operational_quantities(&dynamics, &jac).expect("nonsingular");
        let err = TaskError::new(&task_map(&fx.model, &state, &fx.task).expect("nonsingular"), &reference);
        let storage = storage_eval(&ts, &err, &jac, &fx.gains, &state.qd);

        let qdd = uniform(rng, n, -5.0, 5.0);
        let ur = uniform(rng, m, -5.0, 5.0);
        let Some(ldot) = lambda_dot_fd(fx, &state, &ts.lambda) else {
            affine.fail();
            continue;
        };
        let xtdd = &jac.j * &qdd + &jac.jdot * &state.qd - &ur;
        let direct = err.xtd.dot(&(&ts.lambda * &xtdd))
            + 0.5 * err.xtd.dot(&(&ldot * &err.xtd))
            + err.xt.dot(&(&fx.gains.kp * &err.xtd));
        let value = storage.vdot(&qdd, &ur);
        affine.record((value - direct).abs(), 1e-6 * (1.0 + direct.abs()));

        let cmd = pbc_controller(&ts, &err, &dynamics, &jac, &fx.gains, &state.qd, &ur);
        let qdd = dynamics.forward_dynamics(&state.qd, &cmd.tau, &DVector::zeros(n));
        let vdot = storage.vdot(&qdd, &ur);
        let target = -err.xtd.dot(&(&fx.gains.kd * &err.xtd));
        closed.record((vdot - target).abs(), 1e-6 * (1.0 + vdot.abs()));
    }
    vec![affine.finish(), closed.finish()]
}

/// The proposed QP is feasible and solved to optimality at random states
/// inside the safe set.
pub fn check_proposed_feasibility(fx: &Fixture, rng: &mut ChaCha8Rng, samples: usize) -> CheckOutcome {
    let mut t = Tally::new("proposed_qp_feasibility", 1e-5);
    let m = fx.task.dim();
    for _ in 0..samples {
        let state = fx.nonsingular_state(rng, 1.0);
        let reference = fx.reference_near(rng, &state);
        let ur_nom = uniform(rng, m, -5.0, 5.0);
        let dynamics = DynamicsTerms::evaluate(&fx.model, &state);
        let jac = task_jacobians(&fx.model, &state, &fx.task).expect("nonsingular");
        let ts = operational_quantities(&dynamics, &jac).expect("nonsingular");
        let err = TaskError::new(&task_map(&fx.model, &state, &fx.task).expect("nonsingular"), &reference);
        let storage = storage_eval(&ts, &err, &jac, &fx.gains, &state.qd);
        let Ok(barrier) = ecbf_row(&fx.model, &state, &fx.task, &fx.barrier) else {
            t.fail();
            continue;
        };
        let f_des = desired_force(&ts, &err, &dynamics, &fx.gains, &state.qd, &ur_nom);
        let p = build_proposed_qp(&dynamics, &state.qd, &ts, &storage, &barrier, &f_des, &ur_nom, &fx.gains);
        match solve_qp(&p, DEFAULT_TOL, DEFAULT_MAX_ITER) {
            Ok(sol) if sol.status == QpStatus::Optimal => t.record(sol.kkt_residual, t.tolerance),
            _ => t.fail(),
        }
    }
    t.finish()
}

/// Random strictly convex QP with a feasible point, up to 2 equalities and
/// up to 3 inequalities.
pub fn random_qp(rng: &mut ChaCha8Rng) -> QpProblem {
    let d = rng.random_range(1..=20usize);
    let b = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
    let h = b.transpose() * &b + DMatrix::identity(d, d) * 1e-2;
    let g = uniform(rng, d, -2.0, 2.0);
    let z0 = uniform(rng, d, -1.0, 1.0);
    let n_eq = rng.random_range(0..=2usize.min(d - 1));
    let n_in = rng.random_range(0..=3usize);
    let a_eq = DMatrix::from_fn(n_eq, d, |_, _| rng.random_range(-1.0..1.0));
    let b_eq = &a_eq * &z0;
    let a_in = DMatrix::from_fn(n_in, d, |_, _| rng.random_range(-1.0..1.0));
    let slack = DVector::from_iterator(
        n_in,
        (0..n_in).map(|_| if rng.random_bool(0.3) { 0.0 } else { rng.random_range(0.0..0.5) }),
    );
    let b_in = &a_in * &z0 - slack;
    QpProblem {
        h,
        g,
        a_eq,
        b_eq,
        a_in,
        b_in,
        layout: None,
    }
}

pub fn objective(p: &QpProblem, z: &DVector<f64>) -> f64 {
    0.5 * z.dot(&(&p.h * z)) + p.g.dot(z)
}

/// Minimum over every subset of inequalities treated as equalities, keeping
/// only primal-feasible stationary points.
pub fn enumerate_active_sets(p: &QpProblem) -> Option<f64> {
    let d = p.h.nrows();
    let k = p.a_in.nrows();
    let mut best: Option<f64> = None;
    for mask in 0u32..(1 << k) {
        let rows: Vec<DVector<f64>> = (0..p.a_eq.nrows())
            .map(|i| p.a_eq.row(i).transpose())
            .chain((0..k).filter(|i| mask & (1 << i) != 0).map(|i| p.a_in.row(i).transpose()))
            .collect();
        let rhs: Vec<f64> = (0..p.a_eq.nrows())
            .map(|i| p.b_eq[i])
            .chain((0..k).filter(|i| mask & (1 << i) != 0).map(|i| p.b_in[i]))
            .collect();
        let c = rows.len();
        let mut kkt = DMatrix::zeros(d + c, d + c);
        kkt.view_mut((0, 0), (d, d)).copy_from(&p.h);
        for (j, r) in rows.iter().enumerate() {
            kkt.view_mut((0, d + j), (d, 1)).copy_from(&(-r));
            kkt.view_mut((d + j, 0), (1, d)).copy_from(&r.transpose());
        }
        let mut b = DVector::zeros(d + c);
        b.rows_mut(0, d).copy_from(&(-&p.g));
        for (j, v) in rhs.iter().enumerate() {
            b[d + j] = *v;
        }
        let Some(sol) = kkt.full_piv_lu().solve(&b) else {
            continue;
        };
        let z = sol.rows(0, d).into_owned();
        let feasible = (&p.a_eq * &z - &p.b_eq).iter().all(|r| r.abs() <= 1e-9)
            && (&p.a_in * &z - &p.b_in).iter().all(|r| *r >= -1e-9);
        if feasible {
            let f = objective(p, &z);
            best = Some(best.map_or(f, |b: f64| b.min(f)));
        }
    }
    best
}

/// Solver objective against exhaustive active-set enumeration.
pub fn check_qp_oracle(rng: &mut ChaCha8Rng, samples: usize) -> CheckOutcome {
    let mut t = Tally::new("qp_solver_oracle", 1e-5);
    for _ in 0..samples {
        let p = random_qp(rng);
        let Some(reference) = enumerate_active_sets(&p) else {
            t.fail();
            continue;
        };
        match solve_qp(&p, DEFAULT_TOL, DEFAULT_MAX_ITER) {
            Ok(sol) if sol.status == QpStatus::Optimal => {
                let report = kkt_report(&p, &sol.z, &sol.nu, &sol.lambda);
                if report.certifies_optimal() {
                    t.record((objective(&p, &sol.z) - reference).abs(), t.tolerance);
                } else {
                    t.fail();
                }
            }
            _ => t.fail(),
        }
    }
    t.finish()
}

/// Sample counts for [`run_suite`].
#[derive(Debug, Clone, Copy)]
pub struct SuiteSize {
    pub states: usize,
    pub trajectory_points: usize,
    pub qps: usize,
}

impl Default for SuiteSize {
    fn default() -> Self {
        Self {
            states: 1000,
            trajectory_points: 500,
            qps: 200,
        }
    }
}

/// Runs every invariant check with independent streams derived from `seed`.
pub fn run_suite(seed: u64, size: SuiteSize) -> Vec<CheckOutcome> {
    let fx = Fixture::gen7();
    let stream = |k: u64| rng(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k));
    let mut out = vec![
        check_fk_orthonormal(&fx, &mut stream(1), size.states),
        check_mass_spd(&fx, &mut stream(2), size.states),
        check_coriolis_skew(&fx, &mut stream(3), size.states),
        check_lambda_skew(&fx, &mut stream(4), size.trajectory_points),
        check_task_jacobian(&fx, &mut stream(5), size.trajectory_points),
        check_gradient(&fx, &mut stream(6), size.trajectory_points),
        check_planar_gradient(&mut stream(7), size.trajectory_points),
        check_barrier_row_nonzero(&fx, &mut stream(8), size.states),
    ];
    out.extend(check_storage_derivative(&fx, &mut stream(9), size.trajectory_points));
    out.push(check_proposed_feasibility(&fx, &mut stream(10), size.states));
    out.push(check_qp_oracle(&mut stream(11), size.qps));
    out
}
