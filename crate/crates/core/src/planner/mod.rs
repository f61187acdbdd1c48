//! Coarse-to-fine task planner over a hierarchical scene graph.
//!
//! The coarse stage asks the evaluator to decompose an instruction into
//! tasks. For each task the fine stage walks the waypoints breadth-first
//! from the robot's current node, scores every visited waypoint with the
//! evaluator, picks the best one (ties to earlier discovery) and emits the
//! navigation along the BFS tree followed by one skill invocation.

mod graph;

pub use graph::{
    annotate_graph, Grouping, NodeKind, SceneFile, SceneGraph, SceneNode, Segment, WaypointScan,
    DEFAULT_ADJACENCY_RADIUS, SCENE_SCHEMA_VERSION,
};

use crate::llm::{Evaluator, LlmError, NodeScore};
use crate::simworld::ConfigError;
use crate::skills::{Behavior, SkillLibrary};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlannerError {
    #[error("instruction is empty")]
    EmptyInstruction,
    #[error("unknown scene node `{0}`")]
    UnknownNode(String),
    #[error("waypoints unreachable from `{start}`: {unreachable:?}")]
    Disconnected { start: String, unreachable: Vec<String> },
    #[error("no skill matches task `{0}`")]
    NoSkill(String),
    #[error("evaluator chose unknown skill `{0}`")]
    UnknownSkill(String),
    #[error("task `{task}` is unplannable; best candidates: {best:?}")]
    Unplannable { task: String, best: Vec<NodeScore> },
    #[error("scene: {0}")]
    Scene(String),
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error(transparent)]
    Evaluator(#[from] LlmError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("task {index}: {source}")]
    Task {
        index: usize,
        #[source]
        source: Box<PlannerError>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskStep {
    Navigate { node: String },
    InvokeSkill { skill: String, text_queries: Vec<String>, node: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanFragment {
    pub task: String,
    pub skill: String,
    pub goal: String,
    pub likelihood: f64,
    /// Every scored waypoint in BFS discovery order.
    pub scores: Vec<NodeScore>,
    /// Waypoints from the start node to the goal, both included.
    pub path: Vec<String>,
    pub steps: Vec<TaskStep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub instruction: String,
    pub start: String,
    pub fragments: Vec<PlanFragment>,
}

impl Plan {
    pub fn steps(&self) -> impl Iterator<Item = &TaskStep> {
        self.fragments.iter().flat_map(|f| f.steps.iter())
    }

    /// Checks that every navigation follows a graph edge, every skill runs
    /// at the node the robot stands on, and every skill exists.
    pub fn validate(&self, graph: &SceneGraph, skills: &SkillLibrary) -> Result<(), PlannerError> {
        let mut at = self.start.as_str();
        if graph.node(at).map(|n| n.kind) != Some(NodeKind::PoseWaypoint) {
            return Err(PlannerError::InvalidPlan(format!("start `{at}` is not a waypoint")));
        }
        for (i, step) in self.steps().enumerate() {
            match step {
                TaskStep::Navigate { node } => {
                    if !graph.adjacent(at, node) {
                        return Err(PlannerError::InvalidPlan(format!("step {i}: `{at}` -> `{node}` is not an edge")));
                    }
                    at = node;
                }
                TaskStep::InvokeSkill { skill, node, .. } => {
                    if skills.get(skill).is_none() {
                        return Err(PlannerError::InvalidPlan(format!("step {i}: unknown skill `{skill}`")));
                    }
                    if node != at {
                        return Err(PlannerError::InvalidPlan(format!(
                            "step {i}: `{skill}` at `{node}` but the robot is at `{at}`"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinePlanConfig {
    /// Best scores below this make a task unplannable.
    pub floor: f64,
    /// Stop the search at the first score at or above this value.
    pub early_exit: Option<f64>,
}

impl Default for FinePlanConfig {
    fn default() -> Self {
        Self {
            floor: 0.1,
            early_exit: None,
        }
    }
}

pub fn coarse_plan(instruction: &str, skills: &SkillLibrary, evaluator: &dyn Evaluator) -> Result<Vec<String>, PlannerError> {
    if instruction.trim().is_empty() {
        return Err(PlannerError::EmptyInstruction);
    }
    Ok(evaluator.decompose(instruction, skills)?)
}

pub fn fine_plan(
    task: &str,
    graph: &SceneGraph,
    skills: &SkillLibrary,
    evaluator: &dyn Evaluator,
    start: &str,
    cfg: &FinePlanConfig,
) -> Result<PlanFragment, PlannerError> {
    let order = graph.bfs(start)?;
    let reached = order.len();
    let unreachable: Vec<String> = graph
        .waypoints()
        .filter(|w| !order.iter().any(|(id, _)| *id == w.id))
        .map(|w| w.id.clone())
        .collect();
    if !unreachable.is_empty() {
        return Err(PlannerError::Disconnected {
            start: start.into(),
            unreachable,
        });
    }

    let choice = evaluator.select_skill(task, skills)?.ok_or_else(|| PlannerError::NoSkill(task.into()))?;
    let spec = skills
        .get(&choice.skill)
        .ok_or_else(|| PlannerError::UnknownSkill(choice.skill.clone()))?;

    let mut scores: Vec<NodeScore> = Vec::with_capacity(reached);
    let mut best: Option<usize> = None;
    for (id, _) in &order {
        let node = graph.node(id).expect("bfs yields known nodes");
        let mut s = evaluator.score_node(task, id, &graph.context_description(id), &node.object_list)?;
        s.node = id.to_string();
        s.likelihood = s.likelihood.clamp(0.0, 1.0);
        if best.map_or(true, |b: usize| s.likelihood > scores[b].likelihood) {
            best = Some(scores.len());
        }
        let stop = cfg.early_exit.is_some_and(|t| s.likelihood >= t);
        scores.push(s);
        if stop {
            break;
        }
    }
    let best = best.expect("start node is always scored");
    if scores[best].likelihood < cfg.floor {
        let mut ranked = scores.clone();
        ranked.sort_by(|a, b| b.likelihood.total_cmp(&a.likelihood));
        ranked.truncate(3);
        return Err(PlannerError::Unplannable {
            task: task.into(),
            best: ranked,
        });
    }
    let goal = scores[best].node.clone();

    let mut path = vec![goal.clone()];
    while let Some((_, Some(prev))) = order.iter().find(|(id, _)| *id == path.last().unwrap()) {
        path.push(prev.to_string());
    }
    path.reverse();

    let mut steps: Vec<TaskStep> = path[1..]
        .iter()
        .map(|n| TaskStep::Navigate { node: n.clone() })
        .collect();
    if spec.behavior != Behavior::Navigate {
        steps.push(TaskStep::InvokeSkill {
            skill: spec.name.clone(),
            text_queries: spec.resolve_queries(choice.object.as_deref(), choice.target.as_deref()),
            node: goal.clone(),
        });
    }
    Ok(PlanFragment {
        task: task.into(),
        skill: spec.name.clone(),
        goal,
        likelihood: scores[best].likelihood,
        scores,
        path,
        steps,
    })
}

pub fn plan(
    instruction: &str,
    graph: &SceneGraph,
    skills: &SkillLibrary,
    evaluator: &dyn Evaluator,
    start: &str,
    cfg: &FinePlanConfig,
) -> Result<Plan, PlannerError> {
    let tasks = coarse_plan(instruction, skills, evaluator)?;
    let mut at = start.to_string();
    let mut fragments = Vec::with_capacity(tasks.len());
    for (index, task) in tasks.iter().enumerate() {
        let fragment = fine_plan(task, graph, skills, evaluator, &at, cfg).map_err(|e| PlannerError::Task {
            index,
            source: Box::new(e),
        })?;
        at = fragment.goal.clone();
        fragments.push(fragment);
    }
    let plan = Plan {
        instruction: instruction.into(),
        start: start.into(),
        fragments,
    };
    plan.validate(graph, skills)?;
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{MockEvaluator, SkillChoice};
    use crate::simworld::PlanarPose;
    use rand::{Rng, SeedableRng};
    use std::collections::BTreeMap;

    const MANIFEST: &str = r#"
schema_version = 1

[[skills]]
name = "navigate"
kind = "analytical"
behavior = "navigate"
keywords = ["navigate", "go"]

[[skills]]
name = "pick_up"
kind = "analytical"
behavior = "grasp"
keywords = ["pick", "grasp"]
text_queries = ["{object}"]

[[skills]]
name = "place"
kind = "analytical"
behavior = "place"
keywords = ["place", "put"]
text_queries = ["{object}", "{target}"]

[[skills]]
name = "press"
kind = "analytical"
behavior = "press"
keywords = ["press"]
text_queries = ["{object}"]
"#;

    fn library() -> SkillLibrary {
        SkillLibrary::from_toml_str(MANIFEST, std::path::Path::new(".")).unwrap()
    }

    /// Scores by node id; always selects the `pick_up` skill.
    struct Table(BTreeMap<String, f64>);

    impl Evaluator for Table {
        fn decompose(&self, instruction: &str, _: &SkillLibrary) -> Result<Vec<String>, LlmError> {
            Ok(vec![instruction.into()])
        }
        fn score_node(&self, _: &str, node: &str, _: &str, _: &[String]) -> Result<NodeScore, LlmError> {
            Ok(NodeScore {
                node: node.into(),
                likelihood: self.0.get(node).copied().unwrap_or(0.0),
                rationale: String::new(),
            })
        }
        fn select_skill(&self, _: &str, _: &SkillLibrary) -> Result<Option<SkillChoice>, LlmError> {
            Ok(Some(SkillChoice {
                skill: "pick_up".into(),
                object: Some("cup".into()),
                target: None,
            }))
        }
    }

    fn table(pairs: &[(&str, f64)]) -> Table {
        Table(pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect())
    }

    fn line_graph(n: usize) -> SceneGraph {
        let nodes: Vec<_> = (1..=n)
            .map(|i| SceneNode::waypoint(&format!("n{i}"), PlanarPose::new(i as f64, 0.0, 0.0), "", &[]))
            .collect();
        let edges: Vec<_> = (1..n).map(|i| (format!("n{i}"), format!("n{}", i + 1))).collect();
        SceneGraph::new(nodes, &edges).unwrap()
    }

    fn navs(f: &PlanFragment) -> Vec<&str> {
        f.steps
            .iter()
            .filter_map(|s| match s {
                TaskStep::Navigate { node } => Some(node.as_str()),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn line_graph_picks_peak() {
        let g = line_graph(5);
        let e = table(&[("n1", 0.1), ("n2", 0.2), ("n3", 0.9), ("n4", 0.2), ("n5", 0.1)]);
        let f = fine_plan("pick up the cup", &g, &library(), &e, "n1", &FinePlanConfig::default()).unwrap();
        assert_eq!(f.goal, "n3");
        assert_eq!(navs(&f), vec!["n2", "n3"]);
        assert_eq!(f.path, vec!["n1", "n2", "n3"]);
        assert_eq!(f.scores.len(), 5);
    }

    #[test]
    fn single_node_stays() {
        let g = SceneGraph::new(
            vec![SceneNode::waypoint("desk", PlanarPose::default(), "a desk", &["cup"])],
            &[],
        )
        .unwrap();
        let f = fine_plan("pick up the cup", &g, &library(), &MockEvaluator, "desk", &FinePlanConfig::default()).unwrap();
        assert_eq!(f.path, vec!["desk"]);
        assert_eq!(
            f.steps,
            vec![TaskStep::InvokeSkill {
                skill: "pick_up".into(),
                text_queries: vec!["cup".into()],
                node: "desk".into()
            }]
        );
    }

    #[test]
    fn ties_go_to_earlier_discovery() {
        let g = line_graph(5);
        let e = table(&[("n2", 0.9), ("n4", 0.9)]);
        let f = fine_plan("t", &g, &library(), &e, "n3", &FinePlanConfig::default()).unwrap();
        assert_eq!(f.goal, "n2");
        let f = fine_plan("t", &g, &library(), &e, "n5", &FinePlanConfig::default()).unwrap();
        assert_eq!(f.goal, "n4");
    }

    #[test]
    fn floor_and_early_exit() {
        let g = line_graph(4);
        let low = table(&[("n1", 0.05), ("n2", 0.09)]);
        match fine_plan("t", &g, &library(), &low, "n1", &FinePlanConfig::default()) {
            Err(PlannerError::Unplannable { best, .. }) => assert_eq!(best[0].node, "n2"),
            other => panic!("{other:?}"),
        }
        let e = table(&[("n2", 0.96), ("n4", 1.0)]);
        let cfg = FinePlanConfig {
            early_exit: Some(0.95),
            ..Default::default()
        };
        let f = fine_plan("t", &g, &library(), &e, "n1", &cfg).unwrap();
        assert_eq!(f.goal, "n2");
        assert_eq!(f.scores.len(), 2);
        let f = fine_plan("t", &g, &library(), &e, "n1", &FinePlanConfig::default()).unwrap();
        assert_eq!(f.goal, "n4");
    }

    #[test]
    fn disconnected_and_unknown_start() {
        let nodes = vec![
            SceneNode::waypoint("a", PlanarPose::default(), "", &[]),
            SceneNode::waypoint("b", PlanarPose::new(9.0, 0.0, 0.0), "", &[]),
        ];
        let g = SceneGraph::new(nodes, &[]).unwrap();
        let e = table(&[("a", 1.0)]);
        let cfg = FinePlanConfig::default();
        assert!(matches!(fine_plan("t", &g, &library(), &e, "a", &cfg), Err(PlannerError::Disconnected { .. })));
        assert!(matches!(fine_plan("t", &g, &library(), &e, "zz", &cfg), Err(PlannerError::UnknownNode(_))));
    }

    fn demo_graph() -> SceneGraph {
        let scan = vec![
            WaypointScan {
                id: "entrance".into(),
                x: 0.0,
                y: 0.0,
                yaw: 0.0,
                description: "lab entrance with a coat rack".into(),
                objects: vec!["coat rack".into()],
            },
            WaypointScan {
                id: "hallway".into(),
                x: 2.5,
                y: 0.0,
                yaw: 0.0,
                description: "a long hallway".into(),
                objects: vec!["trash".into(), "bench".into()],
            },
            WaypointScan {
                id: "bin_corner".into(),
                x: 2.5,
                y: 2.5,
                yaw: 1.57,
                description: "corner with the recycling station".into(),
                objects: vec!["trash bin".into()],
            },
        ];
        let groups = vec![Grouping {
            id: "floor".into(),
            description: "ground floor".into(),
            children: vec!["entrance".into(), "hallway".into(), "bin_corner".into()],
        }];
        annotate_graph(&scan, &groups, &[], 3.0).unwrap()
    }

    #[test]
    fn hallway_trash_plan() {
        let g = demo_graph();
        let p = plan("clean the trash in the hallway", &g, &library(), &MockEvaluator, "entrance", &FinePlanConfig::default())
            .unwrap();
        assert_eq!(p.fragments.len(), 4);
        let goals: Vec<_> = p.fragments.iter().map(|f| f.goal.as_str()).collect();
        assert_eq!(goals, vec!["hallway", "hallway", "bin_corner", "bin_corner"]);
        let steps: Vec<_> = p.steps().cloned().collect();
        assert_eq!(
            steps,
            vec![
                TaskStep::Navigate { node: "hallway".into() },
                TaskStep::InvokeSkill {
                    skill: "pick_up".into(),
                    text_queries: vec!["trash".into()],
                    node: "hallway".into()
                },
                TaskStep::Navigate { node: "bin_corner".into() },
                TaskStep::InvokeSkill {
                    skill: "place".into(),
                    text_queries: vec!["trash".into(), "trash bin".into()],
                    node: "bin_corner".into()
                },
            ]
        );
    }

    #[test]
    fn empty_instruction_and_task_index() {
        let g = demo_graph();
        let cfg = FinePlanConfig::default();
        assert!(matches!(
            plan("  ", &g, &library(), &MockEvaluator, "entrance", &cfg),
            Err(PlannerError::EmptyInstruction)
        ));
        match plan("navigate to hallway, then juggle the oranges", &g, &library(), &MockEvaluator, "entrance", &cfg) {
            Err(PlannerError::Task { index, .. }) => assert_eq!(index, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn tasks_at_start_need_no_navigation() {
        let g = demo_graph();
        let p = plan("pick up the trash", &g, &library(), &MockEvaluator, "hallway", &FinePlanConfig::default()).unwrap();
        assert!(p.steps().all(|s| matches!(s, TaskStep::InvokeSkill { .. })));
    }

    #[test]
    fn plans_are_deterministic() {
        let g = demo_graph();
        let cfg = FinePlanConfig::default();
        let a = plan("clean the trash in the hallway", &g, &library(), &MockEvaluator, "entrance", &cfg).unwrap();
        let b = plan("clean the trash in the hallway", &g, &library(), &MockEvaluator, "entrance", &cfg).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    fn random_graph(rng: &mut impl Rng) -> SceneGraph {
        let n = rng.gen_range(1..=8);
        let nodes: Vec<_> = (0..n)
            .map(|i| SceneNode::waypoint(&format!("w{i}"), PlanarPose::new(i as f64, 0.0, 0.0), "", &[]))
            .collect();
        let p = rng.gen_range(0.2..0.7);
        let mut edges = Vec::new();
        for i in 0..n {
            // Spanning chain through a random earlier node keeps it connected.
            if i > 0 {
                edges.push((format!("w{}", rng.gen_range(0..i)), format!("w{i}")));
            }
            for j in i + 1..n {
                if rng.gen_bool(p) {
                    edges.push((format!("w{i}"), format!("w{j}")));
                }
            }
        }
        SceneGraph::new(nodes, &edges).unwrap()
    }

    /// Length of the shortest simple path by enumerating all of them.
    fn brute_force_distance(g: &SceneGraph, from: &str, to: &str) -> usize {
        fn walk(g: &SceneGraph, at: &str, to: &str, seen: &mut Vec<String>, best: &mut usize) {
            if at == to {
                *best = (*best).min(seen.len() - 1);
                return;
            }
            for n in g.neighbors(at) {
                if !seen.iter().any(|s| s == n) {
                    seen.push(n.to_string());
                    walk(g, n, to, seen, best);
                    seen.pop();
                }
            }
        }
        let mut best = usize::MAX;
        walk(g, from, to, &mut vec![from.to_string()], &mut best);
        best
    }

    #[test]
    fn bfs_path_is_shortest_on_random_graphs() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let g = random_graph(&mut rng);
            let ids: Vec<String> = g.nodes.iter().map(|n| n.id.clone()).collect();
            let start = &ids[rng.gen_range(0..ids.len())];
            for goal in &ids {
                let e = table(&[(goal.as_str(), 1.0)]);
                let f = fine_plan("t", &g, &library(), &e, start, &FinePlanConfig::default()).unwrap();
                assert_eq!(&f.goal, goal);
                assert_eq!(f.path.len() - 1, brute_force_distance(&g, start, goal));
                assert!(f.path.windows(2).all(|w| g.adjacent(&w[0], &w[1])));
            }
        }
    }

    #[test]
    fn raising_the_maximum_keeps_the_goal() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let g = random_graph(&mut rng);
            let mut scores: BTreeMap<String, f64> =
                g.nodes.iter().map(|n| (n.id.clone(), rng.gen_range(0.1..1.0))).collect();
            let start = g.nodes[0].id.clone();
            let cfg = FinePlanConfig::default();
            let goal = fine_plan("t", &g, &library(), &Table(scores.clone()), &start, &cfg).unwrap().goal;
            let s = scores.get_mut(&goal).unwrap();
            *s = (*s + rng.gen_range(0.0..0.5)).min(1.0);
            let again = fine_plan("t", &g, &library(), &Table(scores), &start, &cfg).unwrap().goal;
            assert_eq!(again, goal);
        }
    }

    #[test]
    fn random_plans_validate() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        for _ in 0..50 {
            let g = random_graph(&mut rng);
            let scores: BTreeMap<String, f64> = g.nodes.iter().map(|n| (n.id.clone(), rng.gen_range(0.1..1.0))).collect();
            let start = g.nodes[rng.gen_range(0..g.nodes.len())].id.clone();
            let p = plan("pick up the cup", &g, &library(), &Table(scores), &start, &FinePlanConfig::default()).unwrap();
            p.validate(&g, &library()).unwrap();
        }
    }

    #[test]
    fn validator_rejects_teleporting() {
        let g = line_graph(3);
        let p = Plan {
            instruction: "x".into(),
            start: "n1".into(),
            fragments: vec![PlanFragment {
                task: "x".into(),
                skill: "pick_up".into(),
                goal: "n3".into(),
                likelihood: 1.0,
                scores: vec![],
                path: vec![],
                steps: vec![
                    TaskStep::Navigate { node: "n3".into() },
                    TaskStep::InvokeSkill {
                        skill: "pick_up".into(),
                        text_queries: vec![],
                        node: "n3".into(),
                    },
                ],
            }],
        };
        assert!(p.validate(&g, &library()).is_err());
    }
}
