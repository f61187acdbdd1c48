//! Nearest-neighbour action-chunk policy with temporal ensembling.

use crate::attention::{pool, AttentionMap};
use crate::geometry::{BaseCommand, GripperCommand, Pose};
use crate::simworld::{BodyCommand, WholeBodyCommand};
use nalgebra::{Quaternion, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::path::Path;
use thiserror::Error;

/// Side length of the pooled attention grid appended to policy features.
pub const POOLED_ATTENTION: usize = 8;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("policy dataset is empty")]
    EmptyDataset,
    #[error("feature dimension {got} does not match dataset dimension {expected}")]
    FeatureDimension { expected: usize, got: usize },
    #[error("invalid policy: {0}")]
    Invalid(String),
    #[error("policy file {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionChunk {
    pub actions: Vec<WholeBodyCommand>,
    pub end_signals: Vec<f64>,
}

impl ActionChunk {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyEntry {
    pub features: Vec<f64>,
    pub chunk: ActionChunk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkedPolicy {
    pub skill: String,
    pub text_queries: Vec<String>,
    pub chunk_size: usize,
    pub ensemble_decay: f64,
    pub neighbors: usize,
    pub entries: Vec<PolicyEntry>,
}

/// Proprioception followed by the 8×8 pooled head-camera attention map
/// (zeros when no map is available).
pub fn policy_features(proprio: &[f64], attention: Option<&AttentionMap>) -> Vec<f64> {
    let mut features = proprio.to_vec();
    match attention {
        Some(att) if !att.is_empty() => features.extend(pool(att, POOLED_ATTENTION, POOLED_ATTENTION)),
        _ => features.extend(std::iter::repeat(0.0).take(POOLED_ATTENTION * POOLED_ATTENTION)),
    }
    features
}

impl ChunkedPolicy {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.chunk_size == 0 || self.neighbors == 0 {
            return Err(PolicyError::Invalid("chunk_size and neighbors must be >= 1".into()));
        }
        if !(self.ensemble_decay > 0.0 && self.ensemble_decay.is_finite()) {
            return Err(PolicyError::Invalid(format!("ensemble decay {} must be positive", self.ensemble_decay)));
        }
        let dim = self.entries.first().map(|e| e.features.len());
        for (i, e) in self.entries.iter().enumerate() {
            if Some(e.features.len()) != dim {
                return Err(PolicyError::Invalid(format!("entry {i} has a different feature dimension")));
            }
            if e.chunk.actions.len() != self.chunk_size || e.chunk.end_signals.len() != self.chunk_size {
                return Err(PolicyError::Invalid(format!("entry {i} chunk length differs from {}", self.chunk_size)));
            }
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.entries.first().map(|e| e.features.len())
    }

    /// Stored chunk of the nearest entry (Euclidean, ties to the lowest
    /// index). With more than one neighbour the chunks are averaged with
    /// equal weights.
    pub fn infer(&self, features: &[f64]) -> Result<ActionChunk, PolicyError> {
        let expected = self.feature_dim().ok_or(PolicyError::EmptyDataset)?;
        if features.len() != expected {
            return Err(PolicyError::FeatureDimension {
                expected,
                got: features.len(),
            });
        }
        let mut ranked: Vec<(f64, usize)> = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let d2: f64 = e.features.iter().zip(features).map(|(a, b)| (a - b) * (a - b)).sum();
                (d2, i)
            })
            .collect();
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let chosen: Vec<&ActionChunk> = ranked
            .iter()
            .take(self.neighbors.max(1))
            .map(|&(_, i)| &self.entries[i].chunk)
            .collect();
        if chosen.len() == 1 {
            return Ok(chosen[0].clone());
        }
        let mut out = ActionChunk {
            actions: Vec::with_capacity(self.chunk_size),
            end_signals: Vec::with_capacity(self.chunk_size),
        };
        for step in 0..self.chunk_size {
            let items: Vec<(f64, &WholeBodyCommand, f64)> =
                chosen.iter().map(|c| (1.0, &c.actions[step], c.end_signals[step])).collect();
            let (cmd, end) = blend(&items);
            out.actions.push(cmd);
            out.end_signals.push(end);
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PolicyError> {
        let path = path.as_ref();
        let io = |message: String| PolicyError::Io {
            path: path.display().to_string(),
            message,
        };
        let text = serde_json::to_string(self).map_err(|e| io(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| io(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PolicyError> {
        let path = path.as_ref();
        let io = |message: String| PolicyError::Io {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| io(e.to_string()))?;
        let policy: Self = serde_json::from_str(&text).map_err(|e| io(e.to_string()))?;
        policy.validate()?;
        Ok(policy)
    }
}

/// Weighted blend of commands. Velocities, poses and body rates are
/// averaged (rotations through sign-aligned quaternions); optional fields
/// and the gripper follow the weighted majority, ties to the earliest item.
pub fn blend(items: &[(f64, &WholeBodyCommand, f64)]) -> (WholeBodyCommand, f64) {
    assert!(!items.is_empty(), "blend needs at least one command");
    let total: f64 = items.iter().map(|i| i.0).sum();
    let end = items.iter().map(|(w, _, e)| w * e).sum::<f64>() / total;
    let first = items[0].1;
    if items.iter().all(|(_, c, _)| *c == first) {
        return (*first, end.clamp(0.0, 1.0));
    }

    let mut lin = Vector2::zeros();
    let mut ang = 0.0;
    for (w, c, _) in items {
        lin += *w * c.base.linear_velocity;
        ang += w * c.base.angular_velocity;
    }
    let base = BaseCommand {
        linear_velocity: lin / total,
        angular_velocity: ang / total,
    };

    let ee_target = majority(items, |c| c.ee_target.is_some()).then(|| {
        let poses: Vec<(f64, &Pose)> = items.iter().filter_map(|(w, c, _)| c.ee_target.as_ref().map(|p| (*w, p))).collect();
        mean_pose(&poses)
    });

    let gripper = {
        let key = |g: &Option<GripperCommand>| match g {
            None => 0usize,
            Some(g) if g.closed => 2,
            Some(_) => 1,
        };
        let mut weights = [0.0; 3];
        for (w, c, _) in items {
            weights[key(&c.gripper)] += w;
        }
        let mut best = items[0].1.gripper;
        for (_, c, _) in items {
            if weights[key(&c.gripper)] > weights[key(&best)] {
                best = c.gripper;
            }
        }
        best
    };

    let body = majority(items, |c| c.body.is_some()).then(|| {
        let mut h = 0.0;
        let mut p = 0.0;
        let mut wsum = 0.0;
        for (w, c, _) in items {
            if let Some(b) = c.body {
                h += w * b.height_rate;
                p += w * b.pitch_rate;
                wsum += w;
            }
        }
        BodyCommand {
            height_rate: h / wsum,
            pitch_rate: p / wsum,
        }
    });

    (
        WholeBodyCommand {
            base,
            ee_target,
            gripper,
            body,
        },
        end.clamp(0.0, 1.0),
    )
}

fn majority(items: &[(f64, &WholeBodyCommand, f64)], pred: impl Fn(&WholeBodyCommand) -> bool) -> bool {
    let (mut yes, mut no) = (0.0, 0.0);
    for (w, c, _) in items {
        if pred(c) {
            yes += w;
        } else {
            no += w;
        }
    }
    if yes == no {
        pred(items[0].1)
    } else {
        yes > no
    }
}

fn mean_pose(poses: &[(f64, &Pose)]) -> Pose {
    let reference = poses[0].1.quaternion();
    let mut q = [0.0; 4];
    let mut t = Vector3::zeros();
    let mut total = 0.0;
    for (w, p) in poses {
        let pq = p.quaternion();
        let sign = if pq.iter().zip(&reference).map(|(a, b)| a * b).sum::<f64>() < 0.0 { -1.0 } else { 1.0 };
        for (acc, v) in q.iter_mut().zip(pq) {
            *acc += w * sign * v;
        }
        t += *w * p.translation;
        total += w;
    }
    let unit = UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]));
    Pose {
        rotation: *unit.to_rotation_matrix().matrix(),
        translation: t / total,
    }
}

/// Weighted average over pending `(age, command, end_signal)` entries with
/// weights `exp(−decay·age)`.
pub fn temporal_ensemble(pending: &[(usize, &WholeBodyCommand, f64)], decay: f64) -> (WholeBodyCommand, f64) {
    let items: Vec<(f64, &WholeBodyCommand, f64)> = pending
        .iter()
        .map(|&(age, c, e)| ((-decay * age as f64).exp(), c, e))
        .collect();
    blend(&items)
}

/// Keeps the chunks predicted at earlier steps that still cover the
/// current step.
#[derive(Debug, Clone)]
pub struct TemporalEnsembler {
    decay: f64,
    step: usize,
    chunks: VecDeque<(usize, ActionChunk)>,
}

impl TemporalEnsembler {
    pub fn new(decay: f64) -> Self {
        Self {
            decay,
            step: 0,
            chunks: VecDeque::new(),
        }
    }

    /// Registers the chunk predicted at the current step.
    pub fn push(&mut self, chunk: ActionChunk) {
        if !chunk.is_empty() {
            self.chunks.push_back((self.step, chunk));
        }
    }

    /// Ensembled command for the current step, then advances one step.
    /// Returns `None` when no chunk covers the step.
    pub fn next(&mut self) -> Option<(WholeBodyCommand, f64)> {
        let step = self.step;
        self.chunks.retain(|(start, c)| step - start < c.len());
        let pending: Vec<(usize, &WholeBodyCommand, f64)> = self
            .chunks
            .iter()
            .rev()
            .map(|(start, c)| (step - start, &c.actions[step - start], c.end_signals[step - start]))
            .collect();
        self.step += 1;
        (!pending.is_empty()).then(|| temporal_ensemble(&pending, self.decay))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vel(v: f64) -> WholeBodyCommand {
        WholeBodyCommand {
            base: BaseCommand {
                linear_velocity: Vector2::new(v, 0.0),
                angular_velocity: 0.0,
            },
            ..WholeBodyCommand::hold()
        }
    }

    fn chunk(v: f64, k: usize) -> ActionChunk {
        ActionChunk {
            actions: vec![vel(v); k],
            end_signals: vec![0.0; k],
        }
    }

    fn policy(entries: Vec<PolicyEntry>) -> ChunkedPolicy {
        ChunkedPolicy {
            skill: "grasp".into(),
            text_queries: vec!["trash".into()],
            chunk_size: 3,
            ensemble_decay: 0.1,
            neighbors: 1,
            entries,
        }
    }

    #[test]
    fn exact_match_returns_stored_chunk() {
        let p = policy(vec![
            PolicyEntry { features: vec![0.0, 0.0], chunk: chunk(0.1, 3) },
            PolicyEntry { features: vec![1.0, 0.0], chunk: chunk(0.2, 3) },
        ]);
        assert_eq!(p.infer(&[1.0, 0.0]).unwrap(), chunk(0.2, 3));
    }

    #[test]
    fn nearer_entry_wins_and_ties_go_low() {
        let p = policy(vec![
            PolicyEntry { features: vec![0.0], chunk: chunk(0.1, 3) },
            PolicyEntry { features: vec![1.0], chunk: chunk(0.2, 3) },
        ]);
        // distances 0.45 vs 0.55
        assert_eq!(p.infer(&[0.45]).unwrap(), chunk(0.1, 3));
        assert_eq!(p.infer(&[0.55]).unwrap(), chunk(0.2, 3));
        assert_eq!(p.infer(&[0.5]).unwrap(), chunk(0.1, 3));
    }

    #[test]
    fn empty_dataset_is_an_error() {
        assert!(matches!(policy(vec![]).infer(&[0.0]), Err(PolicyError::EmptyDataset)));
    }

    #[test]
    fn ensemble_weights_follow_decay() {
        let (a, b) = (vel(0.1), vel(0.3));
        let (out, _) = temporal_ensemble(&[(0, &a, 0.0), (1, &b, 0.0)], std::f64::consts::LN_2);
        let expected = (0.1 * 1.0 + 0.3 * 0.5) / 1.5;
        assert!((out.base.linear_velocity.x - expected).abs() < 1e-12);
    }

    #[test]
    fn single_and_identical_commands_pass_through() {
        let mut c = vel(0.2);
        c.ee_target = Some(Pose::from_axis_angle(Vector3::z(), 0.3, Vector3::new(0.4, 0.0, 0.2)));
        c.gripper = Some(GripperCommand::CLOSED);
        assert_eq!(temporal_ensemble(&[(0, &c, 1.0)], 0.1).0, c);
        assert_eq!(temporal_ensemble(&[(0, &c, 1.0), (3, &c, 1.0)], 0.1).0, c);
    }

    #[test]
    fn gripper_by_weighted_majority() {
        let mut open = vel(0.0);
        open.gripper = Some(GripperCommand::OPEN);
        let mut closed = vel(0.0);
        closed.gripper = Some(GripperCommand::CLOSED);
        let (out, _) = temporal_ensemble(&[(0, &closed, 0.0), (1, &open, 0.0), (2, &open, 0.0)], 0.1);
        assert_eq!(out.gripper, Some(GripperCommand::OPEN));
        let (out, _) = temporal_ensemble(&[(0, &closed, 0.0), (1, &open, 0.0), (2, &open, 0.0)], 5.0);
        assert_eq!(out.gripper, Some(GripperCommand::CLOSED));
    }

    #[test]
    fn rotations_average_on_the_short_arc() {
        let a = Pose::from_axis_angle(Vector3::z(), 0.2, Vector3::zeros());
        let b = Pose::from_axis_angle(Vector3::z(), 0.4, Vector3::zeros());
        let m = mean_pose(&[(1.0, &a), (1.0, &b)]);
        assert!((m.yaw() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn ensembler_expires_old_chunks() {
        let mut e = TemporalEnsembler::new(0.1);
        e.push(chunk(0.1, 2));
        assert!(e.next().is_some());
        assert!(e.next().is_some());
        assert!(e.next().is_none());
    }
}
