//! Closed-loop simulation of a manipulator tracking a double-integrator
//! reference system under a selectable controller.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::dynamics::{task_jacobians, DynamicsTerms, TaskJacobians};
use crate::error::{ControlError, ModelError};
use crate::manipulability::{ecbf_row, manipulability, BarrierConfig, BarrierError, BarrierEval};
use crate::qp::{solve_qp, QpStatus, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::qp_control::{build_proposed_qp, build_standard_qp, TorqueCommand};
use crate::robot_model::{RobotModel, RobotState};
use crate::task_space::{
    damped_quantities, desired_force, operational_quantities, pbc_controller,
    pbc_damped_controller, storage_eval, task_map, ControllerGains, ReferenceState, TaskError,
    TaskMapConfig, TaskMode, TaskSpaceQuantities,
};

/// Damping used to keep the logged storage function defined when the
/// exact task-space inertia cannot be formed.
const LOG_DELTA: f64 = 1e-9;
/// Any joint velocity beyond this is treated as divergence.
const DIVERGENCE_LIMIT: f64 = 1e8;
pub const PASSIVITY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    Unconstrained,
    Damped,
    StandardQp,
    ProposedQp,
    /// Applies no torque; used for free-motion checks.
    ZeroTorque,
}

impl ControllerKind {
    /// The four controllers compared side by side.
    pub const COMPARED: [ControllerKind; 4] = [
        ControllerKind::Unconstrained,
        ControllerKind::Damped,
        ControllerKind::StandardQp,
        ControllerKind::ProposedQp,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Unconstrained => "unconstrained",
            Self::Damped => "damped",
            Self::StandardQp => "standard_qp",
            Self::ProposedQp => "proposed_qp",
            Self::ZeroTorque => "zero_torque",
        }
    }
}

impl std::str::FromStr for ControllerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [
            Self::Unconstrained,
            Self::Damped,
            Self::StandardQp,
            Self::ProposedQp,
            Self::ZeroTorque,
        ]
        .into_iter()
        .find(|k| k.as_str() == s)
        .ok_or_else(|| {
            format!(
                "unknown controller `{s}` (expected unconstrained, damped, standard_qp, proposed_qp or zero_torque)"
            )
        })
    }
}

impl std::fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Constant joint torque disturbance active on `[start, end)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Disturbance {
    pub start: f64,
    pub end: f64,
    pub tau: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub model_path: PathBuf,
    pub model: RobotModel,
    pub task: TaskMapConfig,
    pub controller: ControllerKind,
    pub q0: DVector<f64>,
    pub qd0: DVector<f64>,
    pub xr0: DVector<f64>,
    pub xrd0: DVector<f64>,
    pub xr_des: DVector<f64>,
    pub gains: ControllerGains,
    pub barrier: BarrierConfig,
    pub duration: f64,
    pub dt_sim: f64,
    pub dt_ctrl: f64,
    /// Largest torque magnitude the closed-form controllers may command.
    pub torque_cap: f64,
    /// Keep the previous command when the controller fails instead of aborting.
    pub hold_on_error: bool,
    pub disturbances: Vec<Disturbance>,
    /// Record wall-clock solve times; off by default so traces are reproducible.
    pub timing: bool,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioDoc {
    model: PathBuf,
    task: TaskDoc,
    controller: ControllerKind,
    q0: Vec<f64>,
    qd0: Option<Vec<f64>>,
    xr0: Option<Vec<f64>>,
    xrd0: Option<Vec<f64>>,
    xr_des: Vec<f64>,
    gravity: Option<[f64; 3]>,
    gains: GainsDoc,
    #[serde(default)]
    barrier: Option<BarrierConfig>,
    duration: f64,
    dt_sim: Option<f64>,
    dt_ctrl: Option<f64>,
    torque_cap: Option<f64>,
    hold_on_error: Option<bool>,
    #[serde(default)]
    disturbance: Vec<Disturbance>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskDoc {
    mode: TaskMode,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GainsDoc {
    kp: Vec<f64>,
    kd: Vec<f64>,
    delta: Option<f64>,
    w1: Option<f64>,
    w2: Option<f64>,
    kp_ref: Option<Vec<f64>>,
    kd_ref: Option<Vec<f64>>,
}

pub const DEFAULT_DT_SIM: f64 = 1e-3;
pub const DEFAULT_TORQUE_CAP: f64 = 1e4;

/// `1/300 s` rounded to the nearest multiple of `dt_sim`.
pub fn default_dt_ctrl(dt_sim: f64) -> f64 {
    ((1.0 / 300.0) / dt_sim).round().max(1.0) * dt_sim
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("cannot read scenario {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("scenario parse error: {0}")]
    Parse(String),
    #[error("invalid scenario field `{field}`: {message}")]
    Invalid { field: String, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn invalid(field: &str, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid {
        field: field.to_string(),
        message: message.into(),
    }
}

fn vector(field: &str, v: &[f64], len: usize) -> Result<DVector<f64>, ScenarioError> {
    if v.len() != len {
        return Err(invalid(field, format!("expected {len} entries, got {}", v.len())));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(invalid(field, "entries must be finite"));
    }
    Ok(DVector::from_column_slice(v))
}

fn diagonal(field: &str, v: &[f64], len: usize) -> Result<DMatrix<f64>, ScenarioError> {
    Ok(DMatrix::from_diagonal(&vector(field, v, len)?))
}

impl Scenario {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Parses a scenario; a relative model path is resolved against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self, ScenarioError> {
        let doc: ScenarioDoc =
            toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        let model_path = if doc.model.is_absolute() {
            doc.model.clone()
        } else {
            base_dir.join(&doc.model)
        };
        let mut model = RobotModel::from_file(&model_path)?;
        if let Some(g) = doc.gravity {
            model = model.with_gravity(Vector3::from(g));
        }
        let n = model.dof();
        let task = TaskMapConfig::new(doc.task.mode);
        let m = task.dim();

        let q0 = vector("q0", &doc.q0, n)?;
        let qd0 = match &doc.qd0 {
            Some(v) => vector("qd0", v, n)?,
            None => DVector::zeros(n),
        };
        let xr0 = match &doc.xr0 {
            Some(v) => vector("xr0", v, m)?,
            None => task_map(&model, &RobotState::at_rest(q0.clone()), &task)
                .map_err(|e| invalid("q0", e.to_string()))?
                .x,
        };
        let xrd0 = match &doc.xrd0 {
            Some(v) => vector("xrd0", v, m)?,
            None => DVector::zeros(m),
        };
        let xr_des = vector("xr_des", &doc.xr_des, m)?;

        let g = &doc.gains;
        let mut gains = ControllerGains {
            kp: diagonal("gains.kp", &g.kp, m)?,
            kd: diagonal("gains.kd", &g.kd, m)?,
            ..ControllerGains::diagonal(&g.kp, &g.kd)
        };
        if let Some(v) = g.delta {
            gains.delta = v;
        }
        if let Some(v) = g.w1 {
            gains.w1 = v;
        }
        if let Some(v) = g.w2 {
            gains.w2 = v;
        }
        if let Some(v) = &g.kp_ref {
            gains.kp_ref = diagonal("gains.kp_ref", v, m)?;
        }
        if let Some(v) = &g.kd_ref {
            gains.kd_ref = diagonal("gains.kd_ref", v, m)?;
        }
        gains
            .validate(m)
            .map_err(|e| invalid("gains", e.to_string()))?;

        let barrier = doc.barrier.unwrap_or_default();
        barrier.validate().map_err(|e| invalid("barrier", e))?;

        let dt_sim = doc.dt_sim.unwrap_or(DEFAULT_DT_SIM);
        let dt_ctrl = doc.dt_ctrl.unwrap_or_else(|| default_dt_ctrl(dt_sim));
        let disturbances = doc
            .disturbance
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let field = format!("disturbance[{i}]");
                vector(&format!("{field}.tau"), &d.tau, n)?;
                if !(d.end > d.start) {
                    return Err(invalid(&field, "end must be after start"));
                }
                Ok(d.clone())
            })
            .collect::<Result<Vec<_>, _>>()?;

        let scenario = Self {
            model_path,
            model,
            task,
            controller: doc.controller,
            q0,
            qd0,
            xr0,
            xrd0,
            xr_des,
            gains,
            barrier,
            duration: doc.duration,
            dt_sim,
            dt_ctrl,
            torque_cap: doc.torque_cap.unwrap_or(DEFAULT_TORQUE_CAP),
            hold_on_error: doc.hold_on_error.unwrap_or(true),
            disturbances,
            timing: false,
        };
        scenario.validate()?;
        Ok(scenario)
    }

    /// Number of simulation substeps per control period.
    pub fn substeps(&self) -> usize {
        (self.dt_ctrl / self.dt_sim).round() as usize
    }

    pub fn control_steps(&self) -> usize {
        (self.duration / self.dt_ctrl).round() as usize
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(invalid("duration", "must be positive"));
        }
        if !(self.dt_sim > 0.0) {
            return Err(invalid("dt_sim", "must be positive"));
        }
        if !(self.dt_ctrl >= self.dt_sim) {
            return Err(invalid("dt_ctrl", "must be at least dt_sim"));
        }
        let ratio = self.dt_ctrl / self.dt_sim;
        if (ratio - ratio.round()).abs() > 1e-9 * ratio {
            return Err(invalid("dt_ctrl", "must be an integer multiple of dt_sim"));
        }
        if !(self.torque_cap > 0.0) {
            return Err(invalid("torque_cap", "must be positive"));
        }
        Ok(())
    }

    /// Joint torque disturbance at time `t`.
    pub fn tau_ext(&self, t: f64) -> DVector<f64> {
        let mut tau = DVector::zeros(self.model.dof());
        for d in &self.disturbances {
            if t >= d.start && t < d.end {
                tau += DVector::from_column_slice(&d.tau);
            }
        }
        tau
    }
}

/// `u_r_nom = −K_P^ref (x_r − x_r_des) − K_D^ref ẋ_r`.
pub fn reference_pd(
    xr: &DVector<f64>,
    xrd: &DVector<f64>,
    xr_des: &DVector<f64>,
    gains: &ControllerGains,
) -> DVector<f64> {
    -(&gains.kp_ref * (xr - xr_des)) - &gains.kd_ref * xrd
}

/// One logged control step.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub t: f64,
    pub q: DVector<f64>,
    pub qd: DVector<f64>,
    pub x: DVector<f64>,
    pub xr: DVector<f64>,
    pub v: f64,
    pub vdot: f64,
    pub mu: f64,
    pub tau: DVector<f64>,
    pub ur: DVector<f64>,
    pub status: String,
    pub solve_time: f64,
}

/// Per-step quantities used by the passivity and energy checks.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDiagnostics {
    /// `−ẋ̃ᵀ K_D ẋ̃`.
    pub vdot_damping: f64,
    /// `ẋ̃ᵀ J̄ᵀ τ_ext`.
    pub ext_power: f64,
    pub kinetic_energy: f64,
    pub kkt_residual: Option<f64>,
    /// Inequality multipliers of the QP: barrier row first, then `V̇ ≤ 0`.
    pub multipliers: Option<DVector<f64>>,
    pub ur_nom: DVector<f64>,
    pub exact_lambda: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub controller: ControllerKind,
    pub steps: usize,
    pub min_mu: f64,
    pub max_vdot: f64,
    /// Largest `V̇ − ẋ̃ᵀJ̄ᵀτ_ext`.
    pub max_vdot_minus_supply: f64,
    /// `‖x − x_r‖` at the last step.
    pub final_error: f64,
    /// `‖x − x_r_des‖` at the last step.
    pub final_target_error: f64,
    pub max_abs_tau: f64,
    pub passivity_violations: usize,
    pub barrier_violations: usize,
    pub controller_errors: usize,
    pub qp_failures: usize,
    pub torque_saturations: usize,
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub rows: Vec<TraceRow>,
    pub diagnostics: Vec<StepDiagnostics>,
    pub summary: Summary,
}

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("simulation diverged at row {row}")]
    Diverged { row: usize, partial: Box<SimOutput> },
    #[error("controller failed at row {row}: {message}")]
    Controller {
        row: usize,
        message: String,
        partial: Box<SimOutput>,
    },
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
}

impl SimError {
    pub fn partial(&self) -> Option<&SimOutput> {
        match self {
            Self::Diverged { partial, .. } | Self::Controller { partial, .. } => Some(partial),
            Self::Scenario(_) => None,
        }
    }
}

struct StepResult {
    command: TorqueCommand,
    status: String,
    kkt_residual: Option<f64>,
    multipliers: Option<DVector<f64>>,
    saturated: bool,
}

enum StepFailure {
    Control(String),
    Qp(String),
}

fn barrier_row(
    model: &RobotModel,
    state: &RobotState,
    task: &TaskMapConfig,
    cfg: &BarrierConfig,
) -> Result<BarrierEval, ControlError> {
    match ecbf_row(model, state, task, cfg) {
        Ok(eval) => Ok(eval),
        Err(BarrierError::OutsideSafeSet(eval)) => Ok(*eval),
        Err(BarrierError::Control(e)) => Err(e),
    }
}

struct StepInputs<'a> {
    scenario: &'a Scenario,
    state: &'a RobotState,
    dynamics: &'a DynamicsTerms,
    jac: &'a TaskJacobians,
    exact: Option<&'a TaskSpaceQuantities>,
    exact_err: Option<&'a ControlError>,
    err: &'a TaskError,
    ur_nom: &'a DVector<f64>,
}

fn control_step(inp: &StepInputs<'_>) -> Result<StepResult, StepFailure> {
    let s = inp.scenario;
    let qd = &inp.state.qd;
    let exact = || {
        inp.exact.ok_or_else(|| {
            StepFailure::Control(inp.exact_err.map(|e| e.to_string()).unwrap_or_default())
        })
    };
    let plain = |tau: DVector<f64>, status: &str, saturated| StepResult {
        command: TorqueCommand {
            tau,
            ur_applied: inp.ur_nom.clone(),
        },
        status: status.to_string(),
        kkt_residual: None,
        multipliers: None,
        saturated,
    };
    match s.controller {
        ControllerKind::ZeroTorque => Ok(plain(DVector::zeros(s.model.dof()), "ok", false)),
        ControllerKind::Unconstrained | ControllerKind::Damped => {
            let mut tau = if s.controller == ControllerKind::Unconstrained {
                let ts = exact()?;
                pbc_controller(ts, inp.err, inp.dynamics, inp.jac, &s.gains, qd, inp.ur_nom).tau
            } else {
                pbc_damped_controller(
                    inp.err,
                    inp.dynamics,
                    inp.jac,
                    &s.gains,
                    qd,
                    inp.ur_nom,
                    s.gains.delta,
                )
                .tau
            };
            let peak = tau.amax();
            let saturated = !(peak <= s.torque_cap);
            if saturated {
                if peak.is_finite() {
                    tau *= s.torque_cap / peak;
                } else {
                    return Err(StepFailure::Control("non-finite torque".into()));
                }
            }
            Ok(plain(tau, if saturated { "saturated" } else { "ok" }, saturated))
        }
        ControllerKind::StandardQp | ControllerKind::ProposedQp => {
            let ts = exact()?;
            let barrier = barrier_row(&s.model, inp.state, &s.task, &s.barrier)
                .map_err(|e| StepFailure::Control(e.to_string()))?;
            let f_des = desired_force(ts, inp.err, inp.dynamics, &s.gains, qd, inp.ur_nom);
            let problem = if s.controller == ControllerKind::StandardQp {
                build_standard_qp(inp.dynamics, qd, ts, &barrier, &f_des)
            } else {
                let storage = storage_eval(ts, inp.err, inp.jac, &s.gains, qd);
                build_proposed_qp(
                    inp.dynamics,
                    qd,
                    ts,
                    &storage,
                    &barrier,
                    &f_des,
                    inp.ur_nom,
                    &s.gains,
                )
            };
            let sol = solve_qp(&problem, DEFAULT_TOL, DEFAULT_MAX_ITER)
                .map_err(|e| StepFailure::Control(e.to_string()))?;
            if sol.status != QpStatus::Optimal {
                return Err(StepFailure::Qp(sol.status.as_str().to_string()));
            }
            let tau = sol.tau().expect("torque block");
            let ur_applied = sol.ur().unwrap_or_else(|| inp.ur_nom.clone());
            Ok(StepResult {
                command: TorqueCommand { tau, ur_applied },
                status: sol.status.as_str().to_string(),
                kkt_residual: Some(sol.kkt_residual),
                multipliers: Some(sol.lambda.clone()),
                saturated: false,
            })
        }
    }
}

fn summarize(
    scenario: &Scenario,
    rows: &[TraceRow],
    diagnostics: &[StepDiagnostics],
    counts: [usize; 3],
) -> Summary {
    let last = rows.last();
    let [controller_errors, qp_failures, torque_saturations] = counts;
    Summary {
        controller: scenario.controller,
        steps: rows.len(),
        min_mu: rows.iter().map(|r| r.mu).fold(f64::INFINITY, f64::min),
        max_vdot: rows.iter().map(|r| r.vdot).fold(f64::NEG_INFINITY, f64::max),
        max_vdot_minus_supply: rows
            .iter()
            .zip(diagnostics)
            .map(|(r, d)| r.vdot - d.ext_power)
            .fold(f64::NEG_INFINITY, f64::max),
        final_error: last.map_or(f64::NAN, |r| (&r.x - &r.xr).norm()),
        final_target_error: last.map_or(f64::NAN, |r| (&r.x - &scenario.xr_des).norm()),
        max_abs_tau: rows.iter().map(|r| r.tau.amax()).fold(0.0, f64::max),
        passivity_violations: rows.iter().filter(|r| r.vdot > PASSIVITY_TOL).count(),
        barrier_violations: rows.iter().filter(|r| r.mu < scenario.barrier.epsilon).count(),
        controller_errors,
        qp_failures,
        torque_saturations,
    }
}

fn finite(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite() && x.abs() < DIVERGENCE_LIMIT)
}

/// Runs the scenario to completion, logging one row per control step.
pub fn run_scenario(scenario: &Scenario) -> Result<SimOutput, SimError> {
    scenario.validate()?;
    let s = scenario;
    let n = s.model.dof();
    let substeps = s.substeps();
    let steps = s.control_steps();

    let mut state = RobotState::new(s.q0.clone(), s.qd0.clone());
    let mut reference = ReferenceState::new(s.xr0.clone(), s.xrd0.clone());
    let mut held = TorqueCommand {
        tau: DVector::zeros(n),
        ur_applied: DVector::zeros(s.task.dim()),
    };
    let mut rows = Vec::with_capacity(steps + 1);
    let mut diagnostics = Vec::with_capacity(steps + 1);
    let mut counts = [0usize; 3];

    macro_rules! bail {
        ($variant:ident { $($field:ident: $value:expr),* }) => {{
            let summary = summarize(s, &rows, &diagnostics, counts);
            return Err(SimError::$variant {
                $($field: $value,)*
                partial: Box::new(SimOutput { rows, diagnostics, summary }),
            });
        }};
    }

    for k in 0..=steps {
        let row_index = rows.len();
        let t = k as f64 * s.dt_ctrl;
        let tau_ext = s.tau_ext(t);

        let dynamics = DynamicsTerms::evaluate(&s.model, &state);
        let (jac, task) = match (
            task_jacobians(&s.model, &state, &s.task),
            task_map(&s.model, &state, &s.task),
        ) {
            (Ok(j), Ok(x)) => (j, x),
            (Err(e), _) | (_, Err(e)) => bail!(Controller { row: row_index, message: e.to_string() }),
        };
        let err = TaskError::new(&task, &reference);
        let ur_nom = reference_pd(&reference.xr, &reference.xrd, &s.xr_des, &s.gains);
        let exact = operational_quantities(&dynamics, &jac);

        let started = Instant::now();
        let outcome = control_step(&StepInputs {
            scenario: s,
            state: &state,
            dynamics: &dynamics,
            jac: &jac,
            exact: exact.as_ref().ok(),
            exact_err: exact.as_ref().err(),
            err: &err,
            ur_nom: &ur_nom,
        });
        let elapsed = started.elapsed().as_secs_f64();

        let (status, kkt_residual, multipliers) = match outcome {
            Ok(step) => {
                counts[2] += usize::from(step.saturated);
                held = step.command;
                (step.status, step.kkt_residual, step.multipliers)
            }
            Err(failure) => {
                let message = match failure {
                    StepFailure::Control(m) => {
                        counts[0] += 1;
                        m
                    }
                    StepFailure::Qp(m) => {
                        counts[1] += 1;
                        m
                    }
                };
                if !s.hold_on_error {
                    bail!(Controller { row: row_index, message: message });
                }
                if k == 0 {
                    held.ur_applied = ur_nom.clone();
                }
                (format!("held:{}", message.split_whitespace().next().unwrap_or("error")), None, None)
            }
        };

        let ts = match &exact {
            Ok(ts) => ts.clone(),
            Err(_) => damped_quantities(&dynamics, &jac, LOG_DELTA),
        };
        let storage = storage_eval(&ts, &err, &jac, &s.gains, &state.qd);
        let qdd = dynamics.forward_dynamics(&state.qd, &held.tau, &tau_ext);
        let vdot = storage.vdot(&qdd, &held.ur_applied);
        let j = &jac.j;
        rows.push(TraceRow {
            t,
            q: state.q.clone(),
            qd: state.qd.clone(),
            x: task.x.clone(),
            xr: reference.xr.clone(),
            v: storage.v,
            vdot,
            mu: manipulability(j),
            tau: held.tau.clone(),
            ur: held.ur_applied.clone(),
            status,
            solve_time: if s.timing { elapsed } else { 0.0 },
        });
        diagnostics.push(StepDiagnostics {
            vdot_damping: -err.xtd.dot(&(&s.gains.kd * &err.xtd)),
            ext_power: err.xtd.dot(&(ts.jbar.transpose() * &tau_ext)),
            kinetic_energy: 0.5 * state.qd.dot(&(&dynamics.mass * &state.qd)),
            kkt_residual,
            multipliers,
            ur_nom: ur_nom.clone(),
            exact_lambda: exact.is_ok(),
        });
        if !finite(&held.tau) || !vdot.is_finite() {
            bail!(Diverged { row: row_index });
        }
        if k == steps {
            break;
        }

        for sub in 0..substeps {
            let ts_sub = t + sub as f64 * s.dt_sim;
            let tau_ext = s.tau_ext(ts_sub);
            let qdd = if sub == 0 {
                qdd.clone()
            } else {
                DynamicsTerms::evaluate(&s.model, &state).forward_dynamics(
                    &state.qd,
                    &held.tau,
                    &tau_ext,
                )
            };
            state.qd += qdd * s.dt_sim;
            state.q += &state.qd * s.dt_sim;
            reference.xrd += &held.ur_applied * s.dt_sim;
            reference.xr += &reference.xrd * s.dt_sim;
            if !finite(&state.q) || !finite(&state.qd) {
                bail!(Diverged { row: row_index });
            }
        }
    }

    let summary = summarize(s, &rows, &diagnostics, counts);
    Ok(SimOutput {
        rows,
        diagnostics,
        summary,
    })
}
