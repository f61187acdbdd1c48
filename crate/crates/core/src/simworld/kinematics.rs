//! Kinematic chain of the legged base, pitching body and 6-DOF arm.
//!
//! Frames, outermost first:
//!
//! * base: planar pose `(x, y, yaw)` on the ground
//! * body: base lifted to `body_height`, pitched by `body_pitch` about its y axis
//! * mount: body ∘ `mount_offset`; the arm base
//! * command frame: where end-effector targets live. It is the mount frame
//!   the robot *would* have at nominal height and zero pitch, with the
//!   controller's automatic yaw assist removed, so body motion and yaw
//!   assist can move the arm base without moving the target.
//!
//! Arm chain in the mount frame (zero angles = upper arm vertical, forearm
//! and tool pointing forward):
//!
//! `Rz(q1) · T(0,0,d1) · Ry(q2) · T(0,0,l2) · Ry(q3) · T(l3,0,0) · Ry(q4) · Rz(q5) · Rx(q6) · T(tool,0,0)`

use super::config::RobotConfig;
use crate::geometry::{wrap_angle, Pose};
use nalgebra::{Matrix6, Vector3, Vector6};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlMode {
    WholeBody,
    Decoupled,
    ArmOnly,
}

impl ControlMode {
    pub const ALL: [ControlMode; 3] = [ControlMode::WholeBody, ControlMode::Decoupled, ControlMode::ArmOnly];

    pub fn as_str(&self) -> &'static str {
        match self {
            ControlMode::WholeBody => "whole_body",
            ControlMode::Decoupled => "decoupled",
            ControlMode::ArmOnly => "arm_only",
        }
    }
}

impl std::str::FromStr for ControlMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "whole_body" => Ok(ControlMode::WholeBody),
            "decoupled" => Ok(ControlMode::Decoupled),
            "arm_only" => Ok(ControlMode::ArmOnly),
            other => Err(format!("unknown control mode `{other}` (whole_body, decoupled, arm_only)")),
        }
    }
}

impl std::fmt::Display for ControlMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PlanarPose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl PlanarPose {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Self { x, y, yaw }
    }

    pub fn to_pose(&self, z: f64) -> Pose {
        Pose::from_planar(self.x, self.y, z, self.yaw)
    }

    pub fn distance(&self, other: &PlanarPose) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// End-effector tracking status after the last step with an arm target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tracking {
    pub position_error: f64,
    pub orientation_error: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub base: PlanarPose,
    /// Part of `base.yaw` contributed by whole-body yaw assist.
    pub yaw_assist: f64,
    pub body_height: f64,
    pub body_pitch: f64,
    pub arm_joints: [f64; 6],
    pub gripper_open_fraction: f64,
    /// Tool centre point in the world frame; kept equal to forward kinematics.
    pub ee_pose: Pose,
    pub control_mode: ControlMode,
    pub tracking: Option<Tracking>,
}

impl RobotState {
    /// Standing at `base` with all joints zero and the gripper open.
    pub fn new(cfg: &RobotConfig, base: PlanarPose, control_mode: ControlMode) -> Self {
        let mut state = Self {
            base,
            yaw_assist: 0.0,
            body_height: cfg.body.nominal_height,
            body_pitch: 0.0,
            arm_joints: [0.0; 6],
            gripper_open_fraction: 1.0,
            ee_pose: Pose::identity(),
            control_mode,
            tracking: None,
        };
        state.ee_pose = forward_kinematics(cfg, &state);
        state
    }
}

/// Body configuration the whole-body controller can choose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BodyPosture {
    pub height: f64,
    pub pitch: f64,
}

pub fn body_frame(cfg: &RobotConfig, state: &RobotState) -> Pose {
    body_frame_for(state.base, state.body_height, state.body_pitch, cfg)
}

fn body_frame_for(base: PlanarPose, height: f64, pitch: f64, _cfg: &RobotConfig) -> Pose {
    base.to_pose(height).compose(&Pose::rot_y(pitch))
}

fn mount_offset(cfg: &RobotConfig) -> Pose {
    Pose::from_translation(Vector3::from(cfg.body.mount_offset))
}

pub fn mount_frame(cfg: &RobotConfig, state: &RobotState) -> Pose {
    body_frame(cfg, state).compose(&mount_offset(cfg))
}

pub fn command_frame(cfg: &RobotConfig, state: &RobotState) -> Pose {
    let heading = PlanarPose {
        yaw: state.base.yaw - state.yaw_assist,
        ..state.base
    };
    heading.to_pose(cfg.body.nominal_height).compose(&mount_offset(cfg))
}

/// Joint frames of the arm in the mount frame. Entry `i` is the frame in
/// which joint `i` rotates (before its own rotation); entry 6 is the tool
/// centre point.
pub fn arm_frames(cfg: &RobotConfig, q: &[f64; 6]) -> [Pose; 7] {
    let a = &cfg.arm;
    let mut frames = [Pose::identity(); 7];
    let mut t = Pose::identity();

    frames[0] = t;
    t = t.compose(&Pose::rot_z(q[0]));
    t = t.compose(&Pose::from_translation(Vector3::new(0.0, 0.0, a.shoulder_height)));
    frames[1] = t;
    t = t.compose(&Pose::rot_y(q[1]));
    t = t.compose(&Pose::from_translation(Vector3::new(0.0, 0.0, a.upper_arm)));
    frames[2] = t;
    t = t.compose(&Pose::rot_y(q[2]));
    t = t.compose(&Pose::from_translation(Vector3::new(a.forearm, 0.0, 0.0)));
    frames[3] = t;
    t = t.compose(&Pose::rot_y(q[3]));
    frames[4] = t;
    t = t.compose(&Pose::rot_z(q[4]));
    frames[5] = t;
    t = t.compose(&Pose::rot_x(q[5]));
    t = t.compose(&Pose::from_translation(Vector3::new(a.tool_length, 0.0, 0.0)));
    frames[6] = t;
    frames
}

/// Local rotation axis of each joint.
const JOINT_AXES: [usize; 6] = [2, 1, 1, 1, 2, 0];

/// Tool centre point in the mount frame.
pub fn arm_tcp(cfg: &RobotConfig, q: &[f64; 6]) -> Pose {
    arm_frames(cfg, q)[6]
}

/// End-effector pose in the world frame.
pub fn forward_kinematics(cfg: &RobotConfig, state: &RobotState) -> Pose {
    mount_frame(cfg, state).compose(&arm_tcp(cfg, &state.arm_joints))
}

/// Geometric Jacobian (linear rows first) of the tool centre point in the
/// mount frame.
pub fn arm_jacobian(cfg: &RobotConfig, q: &[f64; 6]) -> Matrix6<f64> {
    let frames = arm_frames(cfg, q);
    let tcp = frames[6].translation;
    let mut jac = Matrix6::zeros();
    for (i, frame) in frames[..6].iter().enumerate() {
        let axis: Vector3<f64> = frame.rotation.column(JOINT_AXES[i]).into();
        let linear = axis.cross(&(tcp - frame.translation));
        for r in 0..3 {
            jac[(r, i)] = linear[r];
            jac[(r + 3, i)] = axis[r];
        }
    }
    jac
}

/// One damped-least-squares update toward `target` (mount frame). Returns
/// the new joint vector, clamped to speed and position limits.
pub fn dls_step(cfg: &RobotConfig, q: &[f64; 6], target: &Pose, dt: f64) -> [f64; 6] {
    let current = arm_tcp(cfg, q);
    let pos_err = target.translation - current.translation;
    let rot_err = current.rotation_error_to(target) * cfg.arm.orientation_weight;
    let err = Vector6::new(pos_err.x, pos_err.y, pos_err.z, rot_err.x, rot_err.y, rot_err.z);

    let mut jac = arm_jacobian(cfg, q);
    for r in 3..6 {
        for c in 0..6 {
            jac[(r, c)] *= cfg.arm.orientation_weight;
        }
    }
    let lambda2 = cfg.arm.damping * cfg.arm.damping;
    let jjt = jac * jac.transpose() + Matrix6::identity() * lambda2;
    let dq = match jjt.cholesky() {
        Some(chol) => jac.transpose() * chol.solve(&err),
        None => Vector6::zeros(),
    };

    let max_step = cfg.arm.max_joint_speed * dt;
    let largest = dq.amax();
    let scale = if largest > max_step { max_step / largest } else { 1.0 };
    let mut out = *q;
    for i in 0..6 {
        out[i] = cfg.clamp_joint(i, q[i] + dq[i] * scale);
    }
    out
}

/// Wrist centre implied by a tool pose (tool axis is the local x axis).
pub fn wrist_centre(cfg: &RobotConfig, tcp: &Pose) -> Vector3<f64> {
    tcp.translation - tcp.rotation.column(0) * cfg.arm.tool_length
}

/// Shoulder position in the world frame for a hypothetical body posture.
fn shoulder_world(cfg: &RobotConfig, base: PlanarPose, posture: BodyPosture) -> Vector3<f64> {
    body_frame_for(base, posture.height, posture.pitch, cfg)
        .compose(&mount_offset(cfg))
        .transform_point(&Vector3::new(0.0, 0.0, cfg.arm.shoulder_height))
}

fn within(value: f64, lo: f64, hi: f64) -> bool {
    value >= lo && value <= hi
}

/// Postures searched by the coordination heuristic and the reachability
/// test, nominal first.
pub fn posture_grid(cfg: &RobotConfig) -> Vec<BodyPosture> {
    const HEIGHT_STEPS: usize = 11;
    const PITCH_STEPS: usize = 19;
    let b = &cfg.body;
    let mut grid = vec![BodyPosture {
        height: b.nominal_height,
        pitch: 0.0,
    }];
    for i in 0..HEIGHT_STEPS {
        let height = b.min_height + (b.max_height - b.min_height) * i as f64 / (HEIGHT_STEPS - 1) as f64;
        for j in 0..PITCH_STEPS {
            let pitch = -b.max_pitch + 2.0 * b.max_pitch * j as f64 / (PITCH_STEPS - 1) as f64;
            grid.push(BodyPosture { height, pitch });
        }
    }
    grid
}

fn posture_cost(cfg: &RobotConfig, p: &BodyPosture) -> f64 {
    let b = &cfg.body;
    let span = (b.max_height - b.min_height).max(1e-9);
    (b.nominal_height - p.height).abs() / span + p.pitch.abs() / b.max_pitch.max(1e-9)
}

/// Distance outside the reach annulus (0 when inside).
fn annulus_violation(distance: f64, lo: f64, hi: f64) -> f64 {
    if distance < lo {
        lo - distance
    } else if distance > hi {
        distance - hi
    } else {
        0.0
    }
}

/// Yaw assist the whole-body controller aims for given a wrist-centre
/// target in the command frame.
pub fn desired_yaw_assist(cfg: &RobotConfig, wrist_in_command: &Vector3<f64>) -> f64 {
    let horizontal = wrist_in_command.x.hypot(wrist_in_command.y);
    if horizontal < 0.1 {
        return 0.0;
    }
    let azimuth = wrist_in_command.y.atan2(wrist_in_command.x);
    let limit = cfg.base.yaw_assist_threshold;
    azimuth - azimuth.clamp(-limit, limit)
}

/// Body posture the whole-body controller drives toward for a target in
/// the command frame: the cheapest posture (closest to nominal) whose
/// shoulder sees the wrist centre inside the reach annulus shrunk by the
/// coordination margin; if none does, the posture with least violation.
pub fn coordination_posture(cfg: &RobotConfig, state: &RobotState, target_in_command: &Pose) -> BodyPosture {
    let command = command_frame(cfg, state);
    let wrist_cmd = wrist_centre(cfg, target_in_command);
    let wrist_world = command.transform_point(&wrist_cmd);
    let assist = desired_yaw_assist(cfg, &wrist_cmd);
    let base = PlanarPose {
        yaw: state.base.yaw - state.yaw_assist + assist,
        ..state.base
    };
    let lo = cfg.reach.min_radius + cfg.reach.coordination_margin;
    let hi = cfg.reach.max_radius - cfg.reach.coordination_margin;

    let mut best: Option<(f64, f64, BodyPosture)> = None;
    for posture in posture_grid(cfg) {
        let d = (shoulder_world(cfg, base, posture) - wrist_world).norm();
        let key = (annulus_violation(d, lo, hi), posture_cost(cfg, &posture));
        let better = match &best {
            None => true,
            Some((v, c, _)) => key.0 < *v || (key.0 == *v && key.1 < *c),
        };
        if better {
            best = Some((key.0, key.1, posture));
        }
    }
    best.map(|(_, _, p)| p).unwrap_or(BodyPosture {
        height: cfg.body.nominal_height,
        pitch: 0.0,
    })
}

/// Conservative analytic reachability of a world-frame tool pose.
///
/// * arm_only: the wrist centre lies in the shoulder annulus at the
///   current posture and within the first joint's azimuth limits.
/// * decoupled: some posture in the grid satisfies the arm_only test at
///   the current heading.
/// * whole_body: decoupled, or some posture satisfies the annulus test
///   with the base turned toward the target.
pub fn reachable(cfg: &RobotConfig, state: &RobotState, target: &Pose, mode: ControlMode) -> bool {
    let wrist = wrist_centre(cfg, target);
    let lo = cfg.reach.min_radius;
    let hi = cfg.reach.max_radius;

    let arm_test = |base: PlanarPose, posture: BodyPosture| {
        let shoulder = shoulder_world(cfg, base, posture);
        if !within((shoulder - wrist).norm(), lo, hi) {
            return false;
        }
        let mount = body_frame_for(base, posture.height, posture.pitch, cfg).compose(&mount_offset(cfg));
        let local = mount.inverse().transform_point(&wrist);
        let horizontal = local.x.hypot(local.y);
        if horizontal < 1e-6 {
            return true;
        }
        let [lo_j, hi_j] = cfg.arm.joint_limits[0];
        within(local.y.atan2(local.x), lo_j, hi_j)
    };

    let current = BodyPosture {
        height: state.body_height,
        pitch: state.body_pitch,
    };
    if arm_test(state.base, current) {
        return true;
    }
    if mode == ControlMode::ArmOnly {
        return false;
    }
    let grid = posture_grid(cfg);
    if grid.iter().any(|p| arm_test(state.base, *p)) {
        return true;
    }
    if mode == ControlMode::Decoupled {
        return false;
    }
    let facing = PlanarPose {
        yaw: (wrist.y - state.base.y).atan2(wrist.x - state.base.x),
        ..state.base
    };
    grid.iter().any(|p| arm_test(facing, *p))
}

/// Top-down grasp orientation: tool x axis pointing at the ground, tool
/// frame turned to `heading` about the vertical.
pub fn top_down(heading: f64) -> Pose {
    Pose::rot_z(heading).compose(&Pose::rot_y(std::f64::consts::FRAC_PI_2))
}

/// Angle difference helper re-exported for controllers.
pub fn heading_error(target: f64, current: f64) -> f64 {
    wrap_angle(target - current)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn cfg() -> RobotConfig {
        RobotConfig::default()
    }

    #[test]
    fn home_pose_matches_chain_lengths() {
        let c = cfg();
        let s = RobotState::new(&c, PlanarPose::default(), ControlMode::WholeBody);
        let a = &c.arm;
        let b = &c.body;
        let expected = Vector3::new(
            b.mount_offset[0] + a.forearm + a.tool_length,
            0.0,
            b.nominal_height + b.mount_offset[2] + a.shoulder_height + a.upper_arm,
        );
        assert!((s.ee_pose.translation - expected).amax() < 1e-12);
        assert!((s.ee_pose.rotation - nalgebra::Matrix3::identity()).amax() < 1e-12);
    }

    #[test]
    fn base_translation_equivariance() {
        let c = cfg();
        let mut s = RobotState::new(&c, PlanarPose::default(), ControlMode::WholeBody);
        s.arm_joints = [0.3, 0.4, -0.2, 0.5, 0.1, -0.7];
        let a = forward_kinematics(&c, &s);
        s.base.x += 1.0;
        let b = forward_kinematics(&c, &s);
        assert_eq!(b.translation - a.translation, Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(a.rotation, b.rotation);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let c = cfg();
        let q = [0.2, 0.5, -0.3, 0.4, 0.2, 0.1];
        let jac = arm_jacobian(&c, &q);
        let h = 1e-6;
        for i in 0..6 {
            let mut qp = q;
            let mut qm = q;
            qp[i] += h;
            qm[i] -= h;
            let dp = (arm_tcp(&c, &qp).translation - arm_tcp(&c, &qm).translation) / (2.0 * h);
            for r in 0..3 {
                assert_relative_eq!(jac[(r, i)], dp[r], epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn reachability_examples() {
        let c = cfg();
        let s = RobotState::new(&c, PlanarPose::default(), ControlMode::WholeBody);
        for mode in ControlMode::ALL {
            assert!(reachable(&c, &s, &s.ee_pose, mode));
            let far = Pose::from_translation(Vector3::new(10.0, 0.0, 0.5));
            assert!(!reachable(&c, &s, &far, mode));
        }
        let mount_x = mount_frame(&c, &s).translation.x;
        let mut ground = top_down(0.0);
        ground.translation = Vector3::new(mount_x + 0.4, 0.0, 0.0);
        assert!(!reachable(&c, &s, &ground, ControlMode::ArmOnly));
        assert!(reachable(&c, &s, &ground, ControlMode::WholeBody));
    }

    #[test]
    fn dls_converges_inside_workspace() {
        let c = cfg();
        let mut q = [0.0; 6];
        let mut target = top_down(0.2);
        target.translation = Vector3::new(0.45, 0.1, 0.1);
        for _ in 0..400 {
            q = dls_step(&c, &q, &target, 0.02);
        }
        let tcp = arm_tcp(&c, &q);
        assert!(tcp.translation_distance(&target) < 0.005);
        assert!(tcp.rotation_distance(&target) < 0.05);
    }
}
