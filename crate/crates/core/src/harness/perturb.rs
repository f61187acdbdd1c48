//! Seeded trial perturbations.
//!
//! Draw order for a trial is fixed: one replacement per substituted
//! category (category order), the background, a planar offset for each
//! graspable object (file order), then the start offset. Every Gaussian
//! draw is truncated to two standard deviations.

use super::PerturbationSpec;
use crate::planner::SceneGraph;
use crate::simworld::WorldConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Perturbation {
    pub substitutions: BTreeMap<String, String>,
    pub background: Option<String>,
    /// Object id → planar offset.
    pub placement: BTreeMap<String, [f64; 2]>,
    /// `[dx, dy, dyaw]` of the robot start.
    pub start: [f64; 3],
}

/// Stream of the trial's generator; trials never share draws.
pub fn trial_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn truncated(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    sigma * z.clamp(-2.0, 2.0)
}

impl Perturbation {
    pub fn sample(spec: &PerturbationSpec, world: &WorldConfig, seed: u64, index: usize) -> Self {
        let mut rng = trial_rng(seed, index);
        let substitutions = spec
            .substitutions
            .iter()
            .map(|(from, to)| (from.clone(), to[rng.gen_range(0..to.len())].clone()))
            .collect();
        let background = (!spec.backgrounds.is_empty())
            .then(|| spec.backgrounds[rng.gen_range(0..spec.backgrounds.len())].clone());
        let mut placement = BTreeMap::new();
        for o in world.objects.iter().filter(|o| o.graspable) {
            let offset = [truncated(&mut rng, spec.placement_sigma), truncated(&mut rng, spec.placement_sigma)];
            placement.insert(o.id.clone(), offset);
        }
        let start = [
            truncated(&mut rng, spec.start_sigma),
            truncated(&mut rng, spec.start_sigma),
            truncated(&mut rng, spec.start_yaw_sigma),
        ];
        Self {
            substitutions,
            background,
            placement,
            start,
        }
    }

    pub fn apply_world(&self, world: &WorldConfig) -> WorldConfig {
        let mut w = world.clone();
        for o in &mut w.objects {
            if let Some(to) = self.substitutions.get(&o.category) {
                o.category = to.clone();
                o.text_labels = vec![to.clone()];
            }
            if let Some([dx, dy]) = self.placement.get(&o.id) {
                o.position[0] += dx;
                o.position[1] += dy;
            }
        }
        if let Some(bg) = &self.background {
            w.background = bg.clone();
        }
        w.robot_start.x += self.start[0];
        w.robot_start.y += self.start[1];
        w.robot_start.yaw += self.start[2];
        w
    }

    pub fn apply_scene(&self, graph: &mut SceneGraph) {
        for (from, to) in &self.substitutions {
            graph.substitute_object(from, to);
        }
    }

    pub fn apply_instruction(&self, instruction: &str) -> String {
        self.substitutions
            .iter()
            .fold(instruction.to_string(), |text, (from, to)| replace_word(&text, from, to))
    }
}

/// Replaces `from` where it is bounded by non-alphanumeric characters.
pub fn replace_word(text: &str, from: &str, to: &str) -> String {
    if from.is_empty() {
        return text.to_string();
    }
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(i) = rest.find(from) {
        let before = rest[..i].chars().next_back();
        let after = rest[i + from.len()..].chars().next();
        let bounded = !before.is_some_and(char::is_alphanumeric) && !after.is_some_and(char::is_alphanumeric);
        out.push_str(&rest[..i]);
        out.push_str(if bounded { to } else { from });
        rest = &rest[i + from.len()..];
    }
    out.push_str(rest);
    out
}
