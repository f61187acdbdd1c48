//! Wire schema, version 1.
//!
//! Every frame is one WebSocket text message holding one JSON object with
//! a `"v"` version field and a `"type"` discriminator. Unknown fields are
//! ignored; missing required fields are an `invalid` error.
//!
//! # Client → server
//!
//! `input` (controller only). Wrist poses are relative to the operator's
//! initial wrist pose; `quaternion` is `[w, x, y, z]`, need not be unit,
//! and is normalized; `position` is metres. `pinch_gripper` is the right
//! thumb–index distance in metres. `body_rates` is optional
//! `[height_rate, pitch_rate]` in m/s and rad/s, honoured only in decoupled
//! mode. `seq` is optional and echoed as `ack`.
//!
//! ```json
//! {"v":1,"type":"input","seq":17,
//!  "wrist_right":{"position":[0.05,0.0,-0.02],"quaternion":[1,0,0,0]},
//!  "wrist_left":{"position":[0.08,0.0,0.0],"quaternion":[1,0,0,0]},
//!  "pinch_left":true,"pinch_gripper":0.06}
//! ```
//!
//! `control` (controller only): `action` is one of `reset`,
//! `record_start`, `record_stop`, `set_mode` (with `mode`:
//! `whole_body`, `decoupled` or `arm_only`).
//!
//! ```json
//! {"v":1,"type":"control","seq":18,"action":"set_mode","mode":"decoupled"}
//! {"v":1,"type":"control","action":"record_start"}
//! ```
//!
//! `step` (controller only, lockstep servers): advance one tick holding
//! the latched input.
//!
//! ```json
//! {"v":1,"type":"step","seq":19}
//! ```
//!
//! # Server → client
//!
//! `welcome`, sent once after the upgrade:
//!
//! ```json
//! {"v":1,"type":"welcome","role":"controller","tick":0,"dt":0.02,"hold_ms":200.0,"lockstep":false}
//! ```
//!
//! `state`, one per simulation tick to every client. `tick` strictly
//! increases; `ack` is the latest `seq` received from the controller;
//! `command.stale` is true once the latched input is older than the
//! hold time and all velocities are zero. `attention` is the head-camera
//! attention map for the configured query, average-pooled to
//! `height × width`, row-major.
//!
//! ```json
//! {"v":1,"type":"state","tick":42,"time":0.84,"ack":17,
//!  "robot":{"base":[0.1,0.0,0.0],"body_height":0.55,"body_pitch":0.0,
//!           "arm_joints":[0,0,0,0,0,0],"ee_position":[0.7,0.0,0.4],
//!           "ee_quaternion":[1,0,0,0],"gripper_open":1.0,"holding":false,
//!           "control_mode":"whole_body"},
//!  "command":{"base":[0.03,0.0,0.0],"ee_target":true,"gripper_closed":false,"stale":false},
//!  "objects":[{"id":"trash_1","category":"trash","position":[0.9,0.0,0.03],"yaw":0.0,"attached":false}],
//!  "attention":{"query":"trash","height":8,"width":8,"values":[0.1,0.2]},
//!  "recording":{"active":false,"frames":0,"last_file":null}}
//! ```
//!
//! `error`, sent to the offending client only; the session continues.
//! `code` is one of `malformed`, `unsupported_version`, `invalid`,
//! `not_controller`, `controller_taken`, `recording`.
//!
//! ```json
//! {"v":1,"type":"error","code":"malformed","message":"expected value at line 1 column 1","seq":null}
//! ```

use locoman_core::geometry::Pose;
use locoman_core::ControlMode;
use serde::{Deserialize, Serialize};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WristPose {
    pub position: [f64; 3],
    pub quaternion: [f64; 4],
}

impl WristPose {
    pub fn identity() -> Self {
        Self {
            position: [0.0; 3],
            quaternion: [1.0, 0.0, 0.0, 0.0],
        }
    }

    pub fn translation(position: [f64; 3]) -> Self {
        Self {
            position,
            ..Self::identity()
        }
    }

    pub fn to_pose(&self) -> Result<Pose, String> {
        Pose::from_quaternion(self.quaternion, self.position).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputMessage {
    #[serde(default)]
    pub seq: Option<u64>,
    pub wrist_right: WristPose,
    pub wrist_left: WristPose,
    pub pinch_left: bool,
    pub pinch_gripper: f64,
    /// `[height_rate, pitch_rate]` (m/s, rad/s); decoupled mode only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub body_rates: Option<[f64; 2]>,
}

impl InputMessage {
    /// Operator at rest: wrists at their initial poses, hand open.
    pub fn neutral() -> Self {
        Self {
            seq: None,
            wrist_right: WristPose::identity(),
            wrist_left: WristPose::identity(),
            pinch_left: false,
            pinch_gripper: 0.1,
            body_rates: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum ControlAction {
    Reset,
    RecordStart,
    RecordStop,
    SetMode { mode: ControlMode },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Inbound {
    Input(InputMessage),
    Control {
        #[serde(default)]
        seq: Option<u64>,
        #[serde(flatten)]
        action: ControlAction,
    },
    Step {
        #[serde(default)]
        seq: Option<u64>,
    },
}

impl Inbound {
    pub fn seq(&self) -> Option<u64> {
        match self {
            Inbound::Input(m) => m.seq,
            Inbound::Control { seq, .. } | Inbound::Step { seq } => *seq,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Controller,
    Viewer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Welcome {
    pub role: Role,
    pub tick: u64,
    pub dt: f64,
    pub hold_ms: f64,
    pub lockstep: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotSummary {
    /// `[x, y, yaw]`.
    pub base: [f64; 3],
    pub body_height: f64,
    pub body_pitch: f64,
    pub arm_joints: [f64; 6],
    pub ee_position: [f64; 3],
    pub ee_quaternion: [f64; 4],
    pub gripper_open: f64,
    pub holding: bool,
    pub control_mode: ControlMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandSummary {
    /// `[vx, vy, wz]` in the base frame.
    pub base: [f64; 3],
    pub ee_target: bool,
    pub gripper_closed: bool,
    pub stale: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSummary {
    pub id: String,
    pub category: String,
    pub position: [f64; 3],
    pub yaw: f64,
    pub attached: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionThumbnail {
    pub query: String,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordingStatus {
    pub active: bool,
    pub frames: usize,
    pub last_file: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSnapshot {
    pub tick: u64,
    pub time: f64,
    pub ack: Option<u64>,
    pub robot: RobotSummary,
    pub command: CommandSummary,
    pub objects: Vec<ObjectSummary>,
    pub attention: Option<AttentionThumbnail>,
    pub recording: RecordingStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    Malformed,
    UnsupportedVersion,
    Invalid,
    NotController,
    ControllerTaken,
    Recording,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorFrame {
    pub code: ErrorCode,
    pub message: String,
    pub seq: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Outbound {
    Welcome(Welcome),
    State(StateSnapshot),
    Error(ErrorFrame),
}

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    v: u32,
    #[serde(flatten)]
    body: T,
}

fn encode<T: Serialize>(body: &T) -> String {
    serde_json::to_string(&Envelope { v: PROTOCOL_VERSION, body }).expect("wire types serialize")
}

pub fn encode_inbound(msg: &Inbound) -> String {
    encode(msg)
}

pub fn encode_outbound(msg: &Outbound) -> String {
    encode(msg)
}

pub fn error_frame(code: ErrorCode, message: impl Into<String>, seq: Option<u64>) -> String {
    encode_outbound(&Outbound::Error(ErrorFrame {
        code,
        message: message.into(),
        seq,
    }))
}

/// Parses a client frame; the error carries the code and any `seq` found.
pub fn decode_inbound(text: &str) -> Result<Inbound, ErrorFrame> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| ErrorFrame {
        code: ErrorCode::Malformed,
        message: e.to_string(),
        seq: None,
    })?;
    let seq = value.get("seq").and_then(serde_json::Value::as_u64);
    match value.get("v").and_then(serde_json::Value::as_u64) {
        Some(v) if v == u64::from(PROTOCOL_VERSION) => {}
        other => {
            return Err(ErrorFrame {
                code: ErrorCode::UnsupportedVersion,
                message: format!("expected v = {PROTOCOL_VERSION}, got {other:?}"),
                seq,
            })
        }
    }
    let env: Envelope<Inbound> = serde_json::from_value(value).map_err(|e| ErrorFrame {
        code: ErrorCode::Invalid,
        message: e.to_string(),
        seq,
    })?;
    Ok(env.body)
}

pub fn decode_outbound(text: &str) -> Result<Outbound, serde_json::Error> {
    let env: Envelope<Outbound> = serde_json::from_str(text)?;
    Ok(env.body)
}
