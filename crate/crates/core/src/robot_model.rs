//! Serial-chain manipulator description and forward kinematics.
//!
//! A model is an ordered chain of revolute joints. Joint `i` sits at a fixed
//! offset (translation + rotation) from the frame of link `i - 1` (the world
//! frame for `i = 0`) and rotates link `i` about its unit axis.

use std::path::Path;

use nalgebra::{DVector, Matrix3, Rotation3, SymmetricEigen, Unit, Vector3};
use serde::Deserialize;

use crate::error::ModelError;

const AXIS_NORM_TOL: f64 = 1e-9;
const ROTATION_TOL: f64 = 1e-9;
const INERTIA_SYM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct JointSpec {
    pub name: String,
    /// Unit rotation axis, expressed in the joint frame.
    pub axis: Vector3<f64>,
    pub origin_translation: Vector3<f64>,
    pub origin_rotation: Matrix3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkSpec {
    pub mass: f64,
    /// Center of mass in the link frame.
    pub com: Vector3<f64>,
    /// Rotational inertia about the center of mass, link-frame axes.
    pub inertia: Matrix3<f64>,
}

/// Rigid transform used for link frames and the end-effector offset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: Vector3<f64>,
    pub rotation: Matrix3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            position: Vector3::zeros(),
            rotation: Matrix3::identity(),
        }
    }

    /// `self ∘ other`: express `other` (given in this frame) in the parent frame.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            position: self.position + self.rotation * other.position,
            rotation: self.rotation * other.rotation,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobotModel {
    joints: Vec<JointSpec>,
    links: Vec<LinkSpec>,
    gravity: Vector3<f64>,
    ee_offset: Pose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobotState {
    pub q: DVector<f64>,
    pub qd: DVector<f64>,
}

impl RobotState {
    pub fn new(q: DVector<f64>, qd: DVector<f64>) -> Self {
        Self { q, qd }
    }

    pub fn at_rest(q: DVector<f64>) -> Self {
        let n = q.len();
        Self {
            q,
            qd: DVector::zeros(n),
        }
    }
}

/// World-frame poses of every link frame plus the end-effector frame.
#[derive(Debug, Clone)]
pub struct ChainPoses {
    pub links: Vec<Pose>,
    pub ee: Pose,
}

impl ChainPoses {
    /// World-frame rotation axis of joint `i`.
    pub fn joint_axis(&self, model: &RobotModel, i: usize) -> Vector3<f64> {
        self.links[i].rotation * model.joints[i].axis
    }
}

/// Rotation matrix from extrinsic x-y-z (roll, pitch, yaw) angles: `Rz·Ry·Rx`.
pub fn rpy_to_rotation(rpy: &Vector3<f64>) -> Matrix3<f64> {
    let (sr, cr) = rpy.x.sin_cos();
    let (sp, cp) = rpy.y.sin_cos();
    let (sy, cy) = rpy.z.sin_cos();
    Matrix3::new(
        cy * cp,
        cy * sp * sr - sy * cr,
        cy * sp * cr + sy * sr,
        sy * cp,
        sy * sp * sr + cy * cr,
        sy * sp * cr - cy * sr,
        -sp,
        cp * sr,
        cp * cr,
    )
}

impl RobotModel {
    /// Builds a model from already-constructed parts, checking every invariant.
    pub fn new(
        joints: Vec<JointSpec>,
        links: Vec<LinkSpec>,
        gravity: Vector3<f64>,
        ee_offset: Pose,
    ) -> Result<Self, ModelError> {
        if joints.is_empty() {
            return Err(ModelError::invalid("joints", "at least one joint is required"));
        }
        if joints.len() != links.len() {
            return Err(ModelError::invalid(
                "links",
                format!("{} joints but {} links", joints.len(), links.len()),
            ));
        }
        for (i, joint) in joints.iter().enumerate() {
            let norm = joint.axis.norm();
            if (norm - 1.0).abs() > AXIS_NORM_TOL {
                return Err(ModelError::invalid(
                    format!("joints[{i}].axis"),
                    format!("axis must have unit norm, got {norm}"),
                ));
            }
            check_rotation(&joint.origin_rotation)
                .map_err(|m| ModelError::invalid(format!("joints[{i}].origin_rpy"), m))?;
        }
        for (i, link) in links.iter().enumerate() {
            if !(link.mass >= 0.0) || !link.mass.is_finite() {
                return Err(ModelError::invalid(
                    format!("joints[{i}].link.mass"),
                    format!("mass must be finite and non-negative, got {}", link.mass),
                ));
            }
            let asym = (link.inertia - link.inertia.transpose()).abs().max();
            if asym > INERTIA_SYM_TOL {
                return Err(ModelError::invalid(
                    format!("joints[{i}].link.inertia"),
                    "inertia must be symmetric",
                ));
            }
            let min_eig = SymmetricEigen::new(link.inertia).eigenvalues.min();
            if min_eig < -INERTIA_SYM_TOL * (1.0 + link.inertia.abs().max()) {
                return Err(ModelError::invalid(
                    format!("joints[{i}].link.inertia"),
                    format!("inertia must be positive semidefinite, min eigenvalue {min_eig}"),
                ));
            }
        }
        check_rotation(&ee_offset.rotation)
            .map_err(|m| ModelError::invalid("ee_offset.rpy", m))?;
        Ok(Self {
            joints,
            links,
            gravity,
            ee_offset,
        })
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ModelError> {
        let doc: ModelDoc = toml::from_str(text).map_err(|e| ModelError::Parse(e.to_string()))?;
        doc.into_model()
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    pub fn joints(&self) -> &[JointSpec] {
        &self.joints
    }

    pub fn links(&self) -> &[LinkSpec] {
        &self.links
    }

    pub fn gravity(&self) -> Vector3<f64> {
        self.gravity
    }

    pub fn ee_offset(&self) -> &Pose {
        &self.ee_offset
    }

    /// Copy of this model with a different gravity vector.
    pub fn with_gravity(&self, gravity: Vector3<f64>) -> Self {
        Self {
            gravity,
            ..self.clone()
        }
    }

    /// Pose of link `i`'s frame relative to link `i - 1` at joint angle `angle`.
    pub fn joint_transform(&self, i: usize, angle: f64) -> Pose {
        let joint = &self.joints[i];
        let spin = Rotation3::from_axis_angle(&Unit::new_unchecked(joint.axis), angle);
        Pose {
            position: joint.origin_translation,
            rotation: joint.origin_rotation * spin.matrix(),
        }
    }

    pub fn forward_kinematics(&self, q: &DVector<f64>) -> ChainPoses {
        assert_eq!(q.len(), self.dof(), "joint vector dimension");
        let mut links = Vec::with_capacity(self.dof());
        let mut frame = Pose::identity();
        for i in 0..self.dof() {
            frame = frame.compose(&self.joint_transform(i, q[i]));
            links.push(frame);
        }
        let ee = frame.compose(&self.ee_offset);
        ChainPoses { links, ee }
    }

    pub fn check_state(&self, state: &RobotState) -> Result<(), ModelError> {
        let n = self.dof();
        if state.q.len() != n || state.qd.len() != n {
            return Err(ModelError::Dimension {
                expected: n,
                q: state.q.len(),
                qd: state.qd.len(),
            });
        }
        Ok(())
    }
}

fn check_rotation(r: &Matrix3<f64>) -> Result<(), String> {
    let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
    let det = r.determinant();
    if ortho > ROTATION_TOL || (det - 1.0).abs() > ROTATION_TOL {
        return Err(format!(
            "rotation must be orthonormal with det +1 (orthogonality error {ortho}, det {det})"
        ));
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDoc {
    gravity: [f64; 3],
    ee_offset: EeOffsetDoc,
    joints: Vec<JointDoc>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EeOffsetDoc {
    translation: [f64; 3],
    rpy: [f64; 3],
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct JointDoc {
    name: String,
    axis: [f64; 3],
    origin_translation: [f64; 3],
    origin_rpy: [f64; 3],
    link: LinkDoc,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LinkDoc {
    mass: f64,
    com: [f64; 3],
    /// xx, yy, zz, xy, xz, yz
    inertia: [f64; 6],
}

impl ModelDoc {
    fn into_model(self) -> Result<RobotModel, ModelError> {
        let mut joints = Vec::with_capacity(self.joints.len());
        let mut links = Vec::with_capacity(self.joints.len());
        for j in self.joints {
            joints.push(JointSpec {
                name: j.name,
                axis: Vector3::from(j.axis),
                origin_translation: Vector3::from(j.origin_translation),
                origin_rotation: rpy_to_rotation(&Vector3::from(j.origin_rpy)),
            });
            let [xx, yy, zz, xy, xz, yz] = j.link.inertia;
            links.push(LinkSpec {
                mass: j.link.mass,
                com: Vector3::from(j.link.com),
                inertia: Matrix3::new(xx, xy, xz, xy, yy, yz, xz, yz, zz),
            });
        }
        let ee_offset = Pose {
            position: Vector3::from(self.ee_offset.translation),
            rotation: rpy_to_rotation(&Vector3::from(self.ee_offset.rpy)),
        };
        RobotModel::new(joints, links, Vector3::from(self.gravity), ee_offset)
    }
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    #[test]
    fn loads_pendulum() {
        let model = RobotModel::from_toml_str(PENDULUM).unwrap();
        assert_eq!(model.dof(), 1);
    }

    #[test]
    fn loads_planar_arm_and_extends_along_x() {
        let model = RobotModel::from_toml_str(PLANAR2).unwrap();
        assert_eq!(model.dof(), 2);
        let fk = model.forward_kinematics(&DVector::from_vec(vec![0.0, 0.0]));
        assert_relative_eq!(fk.ee.position, Vector3::new(2.0, 0.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn planar_arm_quarter_turn() {
        let model = RobotModel::from_toml_str(PLANAR2).unwrap();
        let fk = model.forward_kinematics(&DVector::from_vec(vec![PI / 2.0, 0.0]));
        assert_relative_eq!(fk.ee.position, Vector3::new(0.0, 2.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn pendulum_half_turn() {
        let model = RobotModel::from_toml_str(PENDULUM).unwrap();
        let fk = model.forward_kinematics(&DVector::from_vec(vec![PI]));
        assert_relative_eq!(fk.ee.position, Vector3::new(-1.0, 0.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn rejects_unnormalized_axis() {
        let doc = PENDULUM.replace("axis = [0.0, 0.0, 1.0]", "axis = [1.0, 1.0, 0.0]");
        let err = RobotModel::from_toml_str(&doc).unwrap_err();
        assert!(err.to_string().contains("axis"), "{err}");
    }

    #[test]
    fn rejects_indefinite_inertia() {
        let doc = PENDULUM.replace(
            "inertia = [0.0, 0.0, 0.0, 0.0, 0.0, 0.0]",
            "inertia = [1.0, 1.0, 1.0, 5.0, 0.0, 0.0]",
        );
        let err = RobotModel::from_toml_str(&doc).unwrap_err();
        assert!(err.to_string().contains("joints[0].link.inertia"), "{err}");
    }

    #[test]
    fn rejects_negative_mass() {
        let doc = PENDULUM.replace("mass = 1.0", "mass = -1.0");
        let err = RobotModel::from_toml_str(&doc).unwrap_err();
        assert!(err.to_string().contains("mass"), "{err}");
    }

    #[test]
    fn rejects_empty_chain_and_garbage() {
        let doc = "gravity = [0.0, 0.0, 0.0]\nee_offset = { translation = [0.0,0.0,0.0], rpy = [0.0,0.0,0.0] }\njoints = []\n";
        assert!(matches!(
            RobotModel::from_toml_str(doc),
            Err(ModelError::Invalid { .. })
        ));
        assert!(matches!(
            RobotModel::from_toml_str("gravity = "),
            Err(ModelError::Parse(_))
        ));
    }

    #[test]
    fn rpy_matches_nalgebra_convention() {
        let rpy = Vector3::new(0.3, -0.7, 1.9);
        let reference = Rotation3::from_euler_angles(rpy.x, rpy.y, rpy.z);
        assert_relative_eq!(rpy_to_rotation(&rpy), *reference.matrix(), epsilon = 1e-15);
    }
}
