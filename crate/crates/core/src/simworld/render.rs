//! Synthetic "RGBD" observations: feature maps aligned with the text
//! embedding space plus a depth channel, for the head and wrist cameras.
//!
//! Camera convention: the optical axis is the camera frame's +x; image
//! columns grow toward −y and rows toward −z. Pixel coordinates are
//! continuous with cell `(r, c)` covering `[c, c+1) × [r, r+1)`.

use super::config::{CameraConfig, RobotConfig};
use super::kinematics::{body_frame, command_frame, ControlMode, PlanarPose, RobotState};
use super::world::WorldState;
use crate::attention::{AttentionError, EmbeddingBank, FeatureMap};
use crate::geometry::Pose;
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

/// Depth reported where a ray hits neither an object nor the floor.
pub const FAR_DEPTH: f64 = 10.0;
const NEAR_DEPTH: f64 = 0.03;
const KERNEL_CUTOFF_SIGMAS: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CameraId {
    Head,
    Wrist,
}

impl CameraId {
    pub fn tag(&self) -> u8 {
        match self {
            CameraId::Head => 0,
            CameraId::Wrist => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(CameraId::Head),
            1 => Some(CameraId::Wrist),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectProjection {
    pub id: String,
    /// Continuous pixel coordinates.
    pub row: f64,
    pub col: f64,
    pub depth: f64,
    /// Cell containing the projection, if inside the image.
    pub cell: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraFrame {
    pub camera: CameraId,
    /// Camera pose in the world frame.
    pub pose: Pose,
    pub focal: f64,
    pub features: FeatureMap,
    /// Optical-axis depth per cell, row-major.
    pub depth: Vec<f64>,
    pub projections: Vec<ObjectProjection>,
}

impl CameraFrame {
    /// World point seen at fractional cell coordinates (cell centres at
    /// integers) and the given optical-axis depth.
    pub fn back_project(&self, row: f64, col: f64, depth: f64) -> Vector3<f64> {
        let u = col + 0.5 - 0.5 * self.features.width as f64;
        let v = row + 0.5 - 0.5 * self.features.height as f64;
        let local = Vector3::new(depth, -u * depth / self.focal, -v * depth / self.focal);
        self.pose.transform_point(&local)
    }

    pub fn depth_at(&self, row: usize, col: usize) -> f64 {
        self.depth[row * self.features.width + col]
    }
}

/// Proprioceptive readings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proprioception {
    pub base: PlanarPose,
    pub yaw_assist: f64,
    pub body_height: f64,
    pub body_pitch: f64,
    pub arm_joints: [f64; 6],
    pub gripper_open_fraction: f64,
    pub ee_pose: Pose,
    /// End effector in the command frame.
    pub ee_in_command: Pose,
    pub command_frame: Pose,
    pub control_mode: ControlMode,
    pub holding: bool,
    pub tracking_converged: bool,
    pub tracking_error: f64,
}

impl Proprioception {
    pub fn from_state(cfg: &RobotConfig, robot: &RobotState, holding: bool) -> Self {
        let command = command_frame(cfg, robot);
        Self {
            base: robot.base,
            yaw_assist: robot.yaw_assist,
            body_height: robot.body_height,
            body_pitch: robot.body_pitch,
            arm_joints: robot.arm_joints,
            gripper_open_fraction: robot.gripper_open_fraction,
            ee_pose: robot.ee_pose,
            ee_in_command: command.inverse().compose(&robot.ee_pose),
            command_frame: command,
            control_mode: robot.control_mode,
            holding,
            tracking_converged: robot.tracking.map(|t| t.converged).unwrap_or(false),
            tracking_error: robot.tracking.map(|t| t.position_error).unwrap_or(0.0),
        }
    }

    /// Flat feature vector used by learned policies: localized base pose,
    /// joints, body posture, gripper and end-effector position in the
    /// command frame.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(16);
        v.extend_from_slice(&[self.base.x, self.base.y, self.base.yaw]);
        v.extend_from_slice(&self.arm_joints);
        v.push(self.body_height);
        v.push(self.body_pitch);
        v.push(self.gripper_open_fraction);
        v.extend(self.ee_in_command.translation.iter());
        v.push(if self.holding { 1.0 } else { 0.0 });
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub time: f64,
    pub proprio: Proprioception,
    pub head: Option<CameraFrame>,
    pub wrist: Option<CameraFrame>,
}

impl Observation {
    pub fn camera(&self, id: CameraId) -> Option<&CameraFrame> {
        match id {
            CameraId::Head => self.head.as_ref(),
            CameraId::Wrist => self.wrist.as_ref(),
        }
    }
}

pub fn camera_pose(cfg: &RobotConfig, robot: &RobotState, camera: CameraId) -> Pose {
    match camera {
        CameraId::Head => body_frame(cfg, robot).compose(&cfg.cameras.head.mount()),
        CameraId::Wrist => robot.ee_pose.compose(&cfg.cameras.wrist.mount()),
    }
}

fn camera_config(cfg: &RobotConfig, camera: CameraId) -> &CameraConfig {
    match camera {
        CameraId::Head => &cfg.cameras.head,
        CameraId::Wrist => &cfg.cameras.wrist,
    }
}

/// Renders one camera. Each cell takes the embedding of the object whose
/// projection is nearest (ties: nearer in depth), blended with the
/// background by a Gaussian kernel of the pixel distance.
pub fn render_camera(
    cfg: &RobotConfig,
    world: &WorldState,
    bank: &EmbeddingBank,
    camera: CameraId,
) -> Result<CameraFrame, AttentionError> {
    let cam = camera_config(cfg, camera);
    let pose = camera_pose(cfg, &world.robot, camera);
    let focal = cam.focal();
    let (h, w) = (cam.height, cam.width);
    let background = bank
        .vector(&world.background)
        .ok_or_else(|| AttentionError::UnknownLabel(world.background.clone()))?;
    let sigma = cfg.cameras.kernel_sigma;
    let cutoff = KERNEL_CUTOFF_SIGMAS * sigma;

    let inv = pose.inverse();
    let mut projections = Vec::new();
    let mut visible: Vec<(f64, f64, f64, &[f64])> = Vec::new();
    for obj in &world.objects {
        let local = inv.transform_point(&obj.pose.translation);
        if local.x <= NEAR_DEPTH {
            continue;
        }
        let col = 0.5 * w as f64 - focal * local.y / local.x;
        let row = 0.5 * h as f64 - focal * local.z / local.x;
        let inside = row >= 0.0 && col >= 0.0 && row < h as f64 && col < w as f64;
        projections.push(ObjectProjection {
            id: obj.id.clone(),
            row,
            col,
            depth: local.x,
            cell: inside.then(|| (row.floor() as usize, col.floor() as usize)),
        });
        let embedding = bank
            .vector(&obj.category)
            .ok_or_else(|| AttentionError::UnknownLabel(obj.category.clone()))?;
        visible.push((row, col, local.x, embedding));
    }

    let mut features = FeatureMap::filled(h, w, background);
    let mut depth = vec![FAR_DEPTH; h * w];
    for r in 0..h {
        for c in 0..w {
            let (pr, pc) = (r as f64 + 0.5, c as f64 + 0.5);
            let nearest = visible
                .iter()
                .map(|(row, col, d, e)| ((row - pr).hypot(col - pc), *d, *e))
                .filter(|(dist, _, _)| *dist <= cutoff)
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
            let idx = r * w + c;
            if let Some((dist, d, embedding)) = nearest {
                let weight = (-(dist * dist) / (2.0 * sigma * sigma)).exp();
                for (out, (e, b)) in features.cell_mut(r, c).iter_mut().zip(embedding.iter().zip(background)) {
                    *out = weight * e + (1.0 - weight) * b;
                }
                depth[idx] = d;
            } else {
                let u = pc - 0.5 * w as f64;
                let v = pr - 0.5 * h as f64;
                let ray = pose.rotation * Vector3::new(1.0, -u / focal, -v / focal);
                if ray.z < -1e-9 {
                    let t = -pose.translation.z / ray.z;
                    depth[idx] = t.min(FAR_DEPTH);
                }
            }
        }
    }

    Ok(CameraFrame {
        camera,
        pose,
        focal,
        features,
        depth,
        projections,
    })
}

/// Proprioception plus the requested cameras.
pub fn render_observation(
    cfg: &RobotConfig,
    world: &WorldState,
    bank: &EmbeddingBank,
    cameras: &[CameraId],
) -> Result<Observation, AttentionError> {
    let mut obs = Observation {
        time: world.time,
        proprio: Proprioception::from_state(cfg, &world.robot, world.attached().is_some()),
        head: None,
        wrist: None,
    };
    for &camera in cameras {
        let frame = render_camera(cfg, world, bank, camera)?;
        match camera {
            CameraId::Head => obs.head = Some(frame),
            CameraId::Wrist => obs.wrist = Some(frame),
        }
    }
    Ok(obs)
}
