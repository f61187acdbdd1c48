//! Demonstration episodes: recording, end-signal labelling, storage and
//! conversion into chunked-policy datasets.

mod format;

pub use format::{load_episode, read_episode, save_episode, write_episode, EPISODE_MAGIC, EPISODE_VERSION};

use crate::attention::{cross_attention, AttentionMap, FeatureMap, TextEmbedding};
use crate::simworld::{CameraId, Observation, WholeBodyCommand};
use crate::skills::{label_end_signal, policy_features, ActionChunk, ChunkedPolicy, PolicyEntry, TerminationConfig};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DemoError {
    #[error("episode file version {found} is not supported (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("episode file is truncated: {0}")]
    Truncated(String),
    #[error("episode checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Checksum { stored: u32, computed: u32 },
    #[error("frame count mismatch: header {header}, body {body}, trailer {trailer}")]
    CountMismatch { header: usize, body: usize, trailer: usize },
    #[error("malformed episode: {0}")]
    Malformed(String),
    #[error("invalid episode: {0}")]
    Invalid(String),
    #[error("no frames recorded")]
    Empty,
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Payload tag stored with each camera record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelType {
    /// Dense feature map plus depth.
    Features,
    /// Depth only; features were not stored.
    DepthOnly,
    /// Reserved for raw image payloads; not produced by this simulator.
    RawImage,
}

impl ChannelType {
    pub fn tag(&self) -> u8 {
        match self {
            ChannelType::Features => 0,
            ChannelType::DepthOnly => 1,
            ChannelType::RawImage => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(ChannelType::Features),
            1 => Some(ChannelType::DepthOnly),
            2 => Some(ChannelType::RawImage),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraPayload {
    pub camera: CameraId,
    pub channel: ChannelType,
    pub height: usize,
    pub width: usize,
    /// Present iff `channel` is [`ChannelType::Features`].
    pub features: Option<FeatureMap>,
    pub depth: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionPayload {
    /// Index into the episode's text queries.
    pub query: usize,
    pub camera: CameraId,
    pub map: AttentionMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameObservation {
    pub proprio: Vec<f64>,
    pub cameras: Vec<CameraPayload>,
    pub attention: Vec<AttentionPayload>,
}

impl FrameObservation {
    pub fn attention(&self, query: usize, camera: CameraId) -> Option<&AttentionMap> {
        self.attention
            .iter()
            .find(|a| a.query == query && a.camera == camera)
            .map(|a| &a.map)
    }

    /// Policy features: proprioception plus the pooled head attention of
    /// the first query.
    pub fn policy_features(&self) -> Vec<f64> {
        policy_features(&self.proprio, self.attention(0, CameraId::Head))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub timestamp: f64,
    pub observation: FrameObservation,
    pub action: WholeBodyCommand,
    pub end_signal_label: u8,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EpisodeMetadata {
    pub scene_id: String,
    pub seed: u64,
    pub operator_id: String,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub skill: String,
    pub text_queries: Vec<String>,
    /// `n` used when the end-signal labels were applied.
    pub label_buffer: usize,
    pub frames: Vec<Frame>,
    pub metadata: EpisodeMetadata,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn validate(&self) -> Result<(), DemoError> {
        if self.frames.is_empty() {
            return Err(DemoError::Empty);
        }
        if self.label_buffer == 0 {
            return Err(DemoError::Invalid("label_buffer must be >= 1".into()));
        }
        for w in self.frames.windows(2) {
            if !(w[1].timestamp > w[0].timestamp) {
                return Err(DemoError::Invalid(format!(
                    "timestamps not strictly increasing at {}",
                    w[1].timestamp
                )));
            }
        }
        let cfg = TerminationConfig {
            label_buffer: self.label_buffer,
            ..Default::default()
        };
        let expected = label_end_signal(self.frames.len(), &cfg);
        if let Some(i) = self.frames.iter().zip(&expected).position(|(f, &l)| f.end_signal_label != l) {
            return Err(DemoError::Invalid(format!("end-signal label of frame {i} breaks the labelling rule")));
        }
        for (i, f) in self.frames.iter().enumerate() {
            if f.observation.attention.iter().any(|a| a.query >= self.text_queries.len()) {
                return Err(DemoError::Invalid(format!("frame {i} references an unknown text query")));
            }
            for c in &f.observation.cameras {
                if c.depth.len() != c.height * c.width || c.features.is_some() != (c.channel == ChannelType::Features) {
                    return Err(DemoError::Invalid(format!("frame {i} has an inconsistent camera payload")));
                }
            }
        }
        Ok(())
    }
}

/// Collects `(observation, command)` pairs into an episode.
#[derive(Debug, Clone)]
pub struct Recorder {
    skill: String,
    queries: Vec<TextEmbedding>,
    termination: TerminationConfig,
    store_features: bool,
    max_linear: f64,
    max_angular: f64,
    frames: Vec<Frame>,
}

impl Recorder {
    /// `queries` are the embedded text queries whose attention maps are
    /// stored with every frame. Commands are clamped to the base limits.
    pub fn new(skill: &str, queries: Vec<TextEmbedding>, termination: TerminationConfig, max_linear: f64, max_angular: f64) -> Self {
        Self {
            skill: skill.into(),
            queries,
            termination,
            store_features: false,
            max_linear,
            max_angular,
            frames: Vec::new(),
        }
    }

    /// Also store the dense feature maps (large).
    pub fn with_features(mut self, store: bool) -> Self {
        self.store_features = store;
        self
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn push(&mut self, obs: &Observation, command: &WholeBodyCommand) -> Result<(), DemoError> {
        if let Some(last) = self.frames.last() {
            if !(obs.time > last.timestamp) {
                return Err(DemoError::Invalid(format!("observation time {} does not advance", obs.time)));
            }
        }
        let mut cameras = Vec::new();
        let mut attention = Vec::new();
        for id in [CameraId::Head, CameraId::Wrist] {
            let Some(frame) = obs.camera(id) else { continue };
            cameras.push(CameraPayload {
                camera: id,
                channel: if self.store_features { ChannelType::Features } else { ChannelType::DepthOnly },
                height: frame.features.height,
                width: frame.features.width,
                features: self.store_features.then(|| frame.features.clone()),
                depth: frame.depth.clone(),
            });
            for (qi, q) in self.queries.iter().enumerate() {
                let map = cross_attention(&frame.features, q).map_err(|e| DemoError::Invalid(e.to_string()))?;
                attention.push(AttentionPayload { query: qi, camera: id, map });
            }
        }
        let mut action = *command;
        action.base = action.base.clamped(self.max_linear, self.max_angular);
        self.frames.push(Frame {
            timestamp: obs.time,
            observation: FrameObservation {
                proprio: obs.proprio.to_vec(),
                cameras,
                attention,
            },
            action,
            end_signal_label: 0,
        });
        Ok(())
    }

    /// Applies the end-signal labels and returns the episode.
    pub fn finish(self, metadata: EpisodeMetadata) -> Result<Episode, DemoError> {
        if self.frames.is_empty() {
            return Err(DemoError::Empty);
        }
        let labels = label_end_signal(self.frames.len(), &self.termination);
        let mut frames = self.frames;
        for (f, l) in frames.iter_mut().zip(labels) {
            f.end_signal_label = l;
        }
        Ok(Episode {
            skill: self.skill,
            text_queries: self.queries.into_iter().map(|q| q.label).collect(),
            label_buffer: self.termination.label_buffer,
            frames,
            metadata,
        })
    }
}

/// Every frame `t` yields `features(t) → actions[t .. t+k−1]`, padded at
/// the tail by repeating the last action and label.
pub fn build_policy_dataset(
    episodes: &[Episode],
    chunk_size: usize,
    ensemble_decay: f64,
    neighbors: usize,
) -> Result<ChunkedPolicy, DemoError> {
    let first = episodes.first().ok_or_else(|| DemoError::Dataset("no episodes".into()))?;
    if chunk_size == 0 {
        return Err(DemoError::Dataset("chunk size must be >= 1".into()));
    }
    let mut entries = Vec::new();
    let mut dim = None;
    for (ei, ep) in episodes.iter().enumerate() {
        if ep.skill != first.skill {
            return Err(DemoError::Dataset(format!(
                "episode {ei} is for skill `{}`, expected `{}`",
                ep.skill, first.skill
            )));
        }
        if ep.frames.is_empty() {
            return Err(DemoError::Dataset(format!("episode {ei} is empty")));
        }
        let n = ep.frames.len();
        for t in 0..n {
            let features = ep.frames[t].observation.policy_features();
            match dim {
                None => dim = Some(features.len()),
                Some(d) if d != features.len() => {
                    return Err(DemoError::Dataset(format!("episode {ei} has feature dimension {}, expected {d}", features.len())))
                }
                _ => {}
            }
            let idx = |j: usize| (t + j).min(n - 1);
            entries.push(PolicyEntry {
                features,
                chunk: ActionChunk {
                    actions: (0..chunk_size).map(|j| ep.frames[idx(j)].action).collect(),
                    end_signals: (0..chunk_size).map(|j| f64::from(ep.frames[idx(j)].end_signal_label)).collect(),
                },
            });
        }
    }
    let policy = ChunkedPolicy {
        skill: first.skill.clone(),
        text_queries: first.text_queries.clone(),
        chunk_size,
        ensemble_decay,
        neighbors,
        entries,
    };
    policy.validate().map_err(|e| DemoError::Dataset(e.to_string()))?;
    Ok(policy)
}
