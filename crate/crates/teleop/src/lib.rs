//! WebSocket teleoperation bridge.
//!
//! A single simulation loop owns the world. In real-time mode it ticks at
//! a fixed rate, taking the newest controller input from a one-slot
//! mailbox; an input older than the hold time (200 ms by default) is
//! dropped and every velocity goes to zero. In lockstep mode each
//! controller `input` or `step` frame advances exactly one tick, which
//! makes a socket session reproducible offline with [`replay_log`].
//!
//! One controller at a time; any number of viewers
//! (`ws://host:port/teleop?role=viewer`). The wire schema is in
//! [`protocol`].

pub mod protocol;
mod server;
mod session;

pub use server::{serve, ServerHandle};
pub use session::{replay_log, TeleopSession, THUMBNAIL_SIZE};

use locoman_core::attention::EmbeddingBank;
use locoman_core::geometry::{PinchThresholds, TeleopConfig};
use locoman_core::harness::Setup;
use locoman_core::simworld::WorldConfig;
use locoman_core::{ControlMode, RobotConfig};
use std::path::PathBuf;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TeleopError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("recording: {0}")]
    Recording(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Used in episode file names and scene ids.
    pub name: String,
    pub robot: RobotConfig,
    pub world: WorldConfig,
    pub control_mode: ControlMode,
    pub bank: Arc<EmbeddingBank>,
    pub teleop: TeleopConfig,
    pub pinch: PinchThresholds,
    /// Label whose head-camera attention is streamed and recorded.
    pub attention_query: Option<String>,
    pub episodes_dir: PathBuf,
    /// Skill name stored in recorded episodes.
    pub skill: String,
    pub record_features: bool,
    pub hold_seconds: f64,
    pub rate_hz: f64,
    pub lockstep: bool,
}

impl ServiceConfig {
    pub fn new(name: &str, robot: RobotConfig, world: WorldConfig, bank: Arc<EmbeddingBank>) -> Self {
        let teleop = TeleopConfig {
            max_linear_speed: robot.base.max_linear_speed,
            max_angular_speed: robot.base.max_angular_speed,
            ..TeleopConfig::default()
        };
        let attention_query = world.objects.iter().find(|o| o.graspable).map(|o| o.category.clone());
        Self {
            name: name.into(),
            control_mode: world.control_mode,
            robot,
            world,
            bank,
            teleop,
            pinch: PinchThresholds::default(),
            attention_query,
            episodes_dir: PathBuf::from("episodes"),
            skill: "teleop".into(),
            record_features: false,
            hold_seconds: 0.2,
            rate_hz: 50.0,
            lockstep: false,
        }
    }

    /// Robot, world and embeddings of a loaded scenario.
    pub fn from_setup(setup: &Setup, episodes_dir: impl Into<PathBuf>) -> Result<Self, TeleopError> {
        let mut cfg = Self::new(
            &setup.scenario.name,
            setup.robot.clone(),
            setup.world.clone(),
            Arc::new(setup.bank.clone()),
        );
        cfg.control_mode = setup.control_mode();
        cfg.episodes_dir = episodes_dir.into();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), TeleopError> {
        self.teleop.validate().map_err(|e| TeleopError::Config(e.to_string()))?;
        if !(self.hold_seconds > 0.0 && self.rate_hz > 0.0) {
            return Err(TeleopError::Config("hold time and rate must be positive".into()));
        }
        if let Some(q) = &self.attention_query {
            if self.bank.vector(q).is_none() {
                return Err(TeleopError::Config(format!("no embedding for attention query `{q}`")));
            }
        }
        Ok(())
    }
}
