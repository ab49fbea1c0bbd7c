//! Serial-chain forward kinematics, position Jacobian and damped
//! least-squares inverse kinematics.

use nalgebra::{Isometry3, Matrix3, Translation3, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::planning::{ActionPlan, StepKind};
use crate::types::Point3;

const AXIS_TOL: f64 = 1e-9;
const LINE_SEARCH_HALVINGS: usize = 12;
const STALL_WINDOW: usize = 20;
const STALL_REL_IMPROVEMENT: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Joint {
    /// Rotation axis in the joint's local frame (unit norm).
    pub axis: [f64; 3],
    /// Translation from the previous frame to this joint (meters).
    pub offset: [f64; 3],
    /// (lo, hi) in radians.
    pub limits: [f64; 2],
}

impl Joint {
    fn axis(&self) -> Vector3<f64> {
        Vector3::from(self.axis)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BasePose {
    pub translation: [f64; 3],
    /// Roll, pitch, yaw in radians.
    pub rpy: [f64; 3],
}

impl Default for BasePose {
    fn default() -> Self {
        BasePose {
            translation: [0.0; 3],
            rpy: [0.0; 3],
        }
    }
}

impl BasePose {
    pub fn isometry(&self) -> Isometry3<f64> {
        let [r, p, y] = self.rpy;
        Isometry3::from_parts(
            Translation3::from(Vector3::from(self.translation)),
            UnitQuaternion::from_euler_angles(r, p, y),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KinematicChain {
    pub name: String,
    pub joints: Vec<Joint>,
    #[serde(default)]
    pub base: BasePose,
    pub tool_offset: [f64; 3],
    /// Nominal start configuration.
    #[serde(default)]
    pub home: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JointConfig {
    pub q: Vec<f64>,
}

impl JointConfig {
    pub fn new(q: Vec<f64>) -> Self {
        JointConfig { q }
    }

    pub fn max_abs_diff(&self, other: &JointConfig) -> f64 {
        self.q
            .iter()
            .zip(&other.q)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl KinematicChain {
    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, j) in self.joints.iter().enumerate() {
            if (j.axis().norm() - 1.0).abs() > AXIS_TOL {
                return Err(Error::Config(format!("joint {i} axis is not unit length")));
            }
            if !(j.limits[0] < j.limits[1]) {
                return Err(Error::Config(format!("joint {i} limits must satisfy lo < hi")));
            }
        }
        if !self.home.is_empty() {
            if self.home.len() != self.dof() {
                return Err(Error::Config(
                    "home configuration length differs from joint count".into(),
                ));
            }
            if !self.within_limits(&JointConfig::new(self.home.clone())) {
                return Err(Error::Config("home configuration violates joint limits".into()));
            }
        }
        Ok(())
    }

    pub fn home(&self) -> JointConfig {
        if self.home.len() == self.dof() {
            JointConfig::new(self.home.clone())
        } else {
            JointConfig::new(vec![0.0; self.dof()])
        }
    }

    pub fn within_limits(&self, q: &JointConfig) -> bool {
        q.q.len() == self.dof()
            && q.q
                .iter()
                .zip(&self.joints)
                .all(|(v, j)| *v >= j.limits[0] && *v <= j.limits[1])
    }

    pub fn clamp(&self, q: &mut JointConfig) {
        for (v, j) in q.q.iter_mut().zip(&self.joints) {
            *v = v.clamp(j.limits[0], j.limits[1]);
        }
    }

    /// Two revolute z-axis joints with 1 m links along x.
    pub fn two_link_planar() -> Self {
        let lim = [-std::f64::consts::PI, std::f64::consts::PI];
        KinematicChain {
            name: "two-link-planar".into(),
            joints: vec![
                Joint {
                    axis: [0.0, 0.0, 1.0],
                    offset: [0.0; 3],
                    limits: lim,
                },
                Joint {
                    axis: [0.0, 0.0, 1.0],
                    offset: [1.0, 0.0, 0.0],
                    limits: lim,
                },
            ],
            base: BasePose::default(),
            tool_offset: [1.0, 0.0, 0.0],
            home: vec![0.0, 0.0],
        }
    }

    /// Eight revolute joints alternating z (yaw) and y (pitch) axes, mounted
    /// on a 0.9 m column at the origin, with links summing to 1.1 m of reach.
    pub fn nicol_like_8dof() -> Self {
        let yaw = 170f64.to_radians();
        let pitch = 150f64.to_radians();
        let links = [0.0, 0.30, 0.30, 0.25];
        let mut joints = Vec::with_capacity(8);
        for (i, link) in links.iter().enumerate() {
            let mount = if i == 0 { [0.0, 0.0, 0.9] } else { [*link, 0.0, 0.0] };
            joints.push(Joint {
                axis: [0.0, 0.0, 1.0],
                offset: mount,
                limits: [-yaw, yaw],
            });
            joints.push(Joint {
                axis: [0.0, 1.0, 0.0],
                offset: [0.0; 3],
                limits: [-pitch, pitch],
            });
        }
        KinematicChain {
            name: "nicol-like-8dof".into(),
            joints,
            base: BasePose::default(),
            tool_offset: [0.25, 0.0, 0.0],
            home: vec![0.0, 0.3, 0.0, 0.6, 0.0, 0.6, 0.0, 0.4],
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "two-link-planar" => Some(Self::two_link_planar()),
            "nicol-like-8dof" => Some(Self::nicol_like_8dof()),
            _ => None,
        }
    }

    fn check_len(&self, q: &JointConfig) -> Result<()> {
        if q.q.len() != self.dof() {
            return Err(Error::Shape(format!(
                "joint vector has {} entries, chain has {} joints",
                q.q.len(),
                self.dof()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FkResult {
    pub tool: Point3,
    pub tool_pose: Isometry3<f64>,
    /// World-frame (origin, axis) of every joint.
    pub joint_frames: Vec<(Point3, Vector3<f64>)>,
}

pub fn fk(chain: &KinematicChain, q: &JointConfig) -> Result<FkResult> {
    chain.check_len(q)?;
    let mut pose = chain.base.isometry();
    let mut joint_frames = Vec::with_capacity(chain.dof());
    for (joint, angle) in chain.joints.iter().zip(&q.q) {
        pose *= Translation3::from(Vector3::from(joint.offset));
        let axis = joint.axis();
        joint_frames.push((Point3::from(pose.translation.vector), pose.rotation * axis));
        pose *= UnitQuaternion::from_axis_angle(&Unit::new_normalize(axis), *angle);
    }
    let tool_pose = pose * Translation3::from(Vector3::from(chain.tool_offset));
    Ok(FkResult {
        tool: Point3::from(tool_pose.translation.vector),
        tool_pose,
        joint_frames,
    })
}

/// 3 x N position Jacobian, column i = axis_i x (tool - origin_i).
pub fn jacobian(chain: &KinematicChain, q: &JointConfig) -> Result<nalgebra::Matrix3xX<f64>> {
    let f = fk(chain, q)?;
    let mut j = nalgebra::Matrix3xX::zeros(chain.dof());
    for (i, (origin, axis)) in f.joint_frames.iter().enumerate() {
        j.set_column(i, &axis.cross(&(f.tool - origin)));
    }
    Ok(j)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IkSettings {
    pub damping: f64,
    pub tol_pos: f64,
    pub max_iters: usize,
    pub step_clip: f64,
}

impl Default for IkSettings {
    fn default() -> Self {
        IkSettings {
            damping: 0.05,
            tol_pos: 1e-3,
            max_iters: 200,
            step_clip: 0.2,
        }
    }
}

impl IkSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.damping > 0.0 && self.tol_pos > 0.0 && self.max_iters > 0 && self.step_clip > 0.0) {
            return Err(Error::Config("IK settings must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IkSolution {
    pub q: JointConfig,
    pub iterations: usize,
    pub residual: f64,
}

/// Damped least squares: `dq = J^T (J J^T + lambda^2 I)^-1 e`, scaled so no
/// joint moves more than `step_clip`, then halved until the residual drops.
/// Joints are clamped to limits every iteration. Fails when the residual is
/// still above tolerance after `max_iters`, when no step improves it, or once
/// the relative improvement over the last 20 iterations drops below 1e-6.
pub fn solve_ik(chain: &KinematicChain, target: &Point3, seed_q: &JointConfig, s: &IkSettings) -> Result<IkSolution> {
    chain.check_len(seed_q)?;
    let mut q = seed_q.clone();
    chain.clamp(&mut q);
    let damping_sq = s.damping * s.damping;
    let mut history: Vec<f64> = Vec::with_capacity(s.max_iters + 1);
    let mut best = f64::INFINITY;
    for iter in 0..=s.max_iters {
        let f = fk(chain, &q)?;
        let e = target - f.tool;
        let residual = e.norm();
        best = best.min(residual);
        if residual < s.tol_pos {
            return Ok(IkSolution {
                q,
                iterations: iter,
                residual,
            });
        }
        history.push(residual);
        if iter == s.max_iters {
            break;
        }
        if history.len() > STALL_WINDOW {
            let past = history[history.len() - 1 - STALL_WINDOW];
            if (past - residual) / past < STALL_REL_IMPROVEMENT {
                break;
            }
        }
        let j = jacobian(chain, &q)?;
        let a: Matrix3<f64> = &j * j.transpose() + Matrix3::identity() * damping_sq;
        let Some(a_inv) = a.try_inverse() else { break };
        let dq = j.transpose() * (a_inv * e);
        // Uniform scaling keeps the step direction; halving guards against
        // limit cycles near singular configurations.
        let peak = dq.amax();
        let mut alpha = if peak > s.step_clip { s.step_clip / peak } else { 1.0 };
        let mut accepted = false;
        for _ in 0..LINE_SEARCH_HALVINGS {
            let mut trial = q.clone();
            for (v, d) in trial.q.iter_mut().zip(dq.iter()) {
                *v += alpha * d;
            }
            chain.clamp(&mut trial);
            if (target - fk(chain, &trial)?.tool).norm() < residual {
                q = trial;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Err(Error::UnreachableTarget { residual: best })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySegment {
    pub kind: StepKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_id: Option<String>,
    /// Empty for gripper events.
    pub waypoints: Vec<JointConfig>,
}

/// Interpolates between consecutive Cartesian targets and solves each
/// intermediate point seeded from the previous solution. The spacing is
/// shrunk by twice the IK tolerance so that consecutive tool positions stay
/// within `cart_step` of each other.
pub fn plan_to_trajectory(
    chain: &KinematicChain,
    plan: &ActionPlan,
    start_q: &JointConfig,
    s: &IkSettings,
    cart_step: f64,
) -> Result<Vec<TrajectorySegment>> {
    if !(cart_step > 0.0) {
        return Err(Error::InvalidArgument("cart_step must be positive".into()));
    }
    let spacing = if cart_step > 4.0 * s.tol_pos {
        cart_step - 2.0 * s.tol_pos
    } else {
        cart_step
    };
    let mut q = start_q.clone();
    let mut pos = fk(chain, &q)?.tool;
    let mut out = Vec::with_capacity(plan.steps.len());
    for (i, step) in plan.steps.iter().enumerate() {
        if step.kind.is_gripper_event() {
            out.push(TrajectorySegment {
                kind: step.kind,
                object_id: step.object_id.clone(),
                waypoints: Vec::new(),
            });
            continue;
        }
        let delta = step.target - pos;
        let n = ((delta.norm() / spacing).ceil() as usize).max(1);
        let mut waypoints = Vec::with_capacity(n);
        for k in 1..=n {
            let p = pos + delta * (k as f64 / n as f64);
            let sol = solve_ik(chain, &p, &q, s).map_err(|e| match e {
                Error::UnreachableTarget { residual } => Error::PlanInfeasible { step: i, residual },
                other => other,
            })?;
            q = sol.q;
            waypoints.push(q.clone());
        }
        pos = step.target;
        out.push(TrajectorySegment {
            kind: step.kind,
            object_id: step.object_id.clone(),
            waypoints,
        });
    }
    Ok(out)
}
