//! Manipulability index, its configuration gradient and the exponential
//! barrier constraint keeping `μ(q) ≥ ε`.
//!
//! With `h = μ − ε` (relative degree two) the barrier condition
//! `ḧ ≥ −α₁h − α₂ḣ` becomes the linear row
//!
//! ```text
//! J_μ q̈ ≥ −J̇_μ q̇ − α₁(μ − ε) − α₂ J_μ q̇
//! ```

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::FD_STEP;
use crate::error::ControlError;
use crate::robot_model::{RobotModel, RobotState};
use crate::task_space::{task_jacobian, TaskMapConfig};

/// Below this manipulability the pseudoinverse in the gradient is not formed.
pub const MIN_GRADIENT_MU: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BarrierConfig {
    pub epsilon: f64,
    /// `(α₁, α₂)`.
    pub k_alpha: [f64; 2],
}

impl Default for BarrierConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.03,
            k_alpha: [100.0, 20.0],
        }
    }
}

impl BarrierConfig {
    /// Requires `ε > 0` and `s² + α₂s + α₁` to have real negative roots.
    pub fn validate(&self) -> Result<(), String> {
        let [a1, a2] = self.k_alpha;
        if !(self.epsilon > 0.0) {
            return Err(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if !(a1 > 0.0 && a2 > 0.0) {
            return Err(format!("k_alpha entries must be positive, got {:?}", self.k_alpha));
        }
        if a2 * a2 < 4.0 * a1 {
            return Err(format!(
                "k_alpha {:?} gives complex barrier poles (need α₂² ≥ 4α₁)",
                self.k_alpha
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BarrierEval {
    pub mu: f64,
    pub jmu: DVector<f64>,
    pub jmu_dot_qd: f64,
    pub h: f64,
    pub hdot: f64,
    /// Constraint `a·q̈ ≥ b`.
    pub a: DVector<f64>,
    pub b: f64,
    pub singular_values: DVector<f64>,
}

impl BarrierEval {
    pub fn inside_safe_set(&self) -> bool {
        self.h >= 0.0
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BarrierError {
    #[error(transparent)]
    Control(#[from] ControlError),
    /// The state left the safe set; the row is still usable for recovery.
    #[error("state outside the safe set (h = {:e})", .0.h)]
    OutsideSafeSet(Box<BarrierEval>),
}

/// `√det(J Jᵀ)`, evaluated as the product of the singular values of `J`.
pub fn manipulability(j: &DMatrix<f64>) -> f64 {
    singular_values(j).iter().product::<f64>().max(0.0)
}

pub fn singular_values(j: &DMatrix<f64>) -> DVector<f64> {
    j.clone().svd(false, false).singular_values
}

fn jacobian_partials(
    model: &RobotModel,
    q: &DVector<f64>,
    task: &TaskMapConfig,
) -> Result<Vec<DMatrix<f64>>, ControlError> {
    (0..model.dof())
        .map(|i| {
            let mut qp = q.clone();
            let mut qm = q.clone();
            qp[i] += FD_STEP;
            qm[i] -= FD_STEP;
            Ok((task_jacobian(model, &qp, task)? - task_jacobian(model, &qm, task)?)
                / (2.0 * FD_STEP))
        })
        .collect()
}

/// `∂μ/∂q_i = μ · tr(∂J/∂q_i · J†)` with `J† = Jᵀ(JJᵀ)⁻¹`.
pub fn manipulability_gradient(
    model: &RobotModel,
    q: &DVector<f64>,
    task: &TaskMapConfig,
) -> Result<DVector<f64>, ControlError> {
    let j = task_jacobian(model, q, task)?;
    let mu = manipulability(&j);
    if !(mu > MIN_GRADIENT_MU) {
        return Err(ControlError::SingularGradient { mu });
    }
    let jjt = &j * j.transpose();
    let pinv = j.transpose()
        * jjt
            .cholesky()
            .ok_or(ControlError::SingularGradient { mu })?
            .inverse();
    let partials = jacobian_partials(model, q, task)?;
    Ok(DVector::from_iterator(
        model.dof(),
        partials.iter().map(|dj| mu * (dj * &pinv).trace()),
    ))
}

/// Evaluates the barrier and its linear acceleration constraint at `state`.
pub fn ecbf_row(
    model: &RobotModel,
    state: &RobotState,
    task: &TaskMapConfig,
    cfg: &BarrierConfig,
) -> Result<BarrierEval, BarrierError> {
    let j = task_jacobian(model, &state.q, task)?;
    let mu = manipulability(&j);
    let jmu = manipulability_gradient(model, &state.q, task)?;
    let jmu_dot_qd = if state.qd.iter().all(|v| *v == 0.0) {
        0.0
    } else {
        let qp = &state.q + &state.qd * FD_STEP;
        let qm = &state.q - &state.qd * FD_STEP;
        let djmu = (manipulability_gradient(model, &qp, task)?
            - manipulability_gradient(model, &qm, task)?)
            / (2.0 * FD_STEP);
        djmu.dot(&state.qd)
    };
    let [a1, a2] = cfg.k_alpha;
    let h = mu - cfg.epsilon;
    let hdot = jmu.dot(&state.qd);
    let b = -jmu_dot_qd - a1 * h - a2 * hdot;
    let eval = BarrierEval {
        mu,
        a: jmu.clone(),
        jmu,
        jmu_dot_qd,
        h,
        hdot,
        b,
        singular_values: singular_values(&j),
    };
    if eval.inside_safe_set() {
        Ok(eval)
    } else {
        Err(BarrierError::OutsideSafeSet(Box::new(eval)))
    }
}
