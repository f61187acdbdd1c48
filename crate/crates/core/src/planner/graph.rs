//! Hierarchical scene graph: pose-level waypoints joined by line-of-sight
//! edges, grouped under abstract nodes.
//!
//! Scene annotation file (TOML):
//!
//! ```toml
//! schema_version = 1
//! adjacency_radius = 3.0        # optional, metres
//!
//! [[waypoints]]
//! id = "hallway"
//! x = 0.0
//! y = 0.0
//! yaw = 0.0
//! description = "a long hallway with a bench"
//! objects = ["trash", "bench"]
//!
//! [[groups]]
//! id = "first_floor"
//! description = "first floor"
//! children = ["hallway", "kitchen"]
//!
//! [[obstacles]]                 # wall segment in the floor plane
//! from = [1.0, -1.0]
//! to = [1.0, 1.0]
//! ```

use super::PlannerError;
use crate::simworld::config::read_toml;
use crate::simworld::PlanarPose;
use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::Path;

pub const SCENE_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_ADJACENCY_RADIUS: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Abstract,
    PoseWaypoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneNode {
    pub id: String,
    pub kind: NodeKind,
    /// Present exactly for waypoints.
    pub pose: Option<PlanarPose>,
    pub description: String,
    pub object_list: Vec<String>,
    pub parent: Option<String>,
}

impl SceneNode {
    pub fn waypoint(id: &str, pose: PlanarPose, description: &str, objects: &[&str]) -> Self {
        Self {
            id: id.into(),
            kind: NodeKind::PoseWaypoint,
            pose: Some(pose),
            description: description.into(),
            object_list: objects.iter().map(|s| s.to_string()).collect(),
            parent: None,
        }
    }
}

/// Obstacle segment in the floor plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub from: [f64; 2],
    pub to: [f64; 2],
}

fn cross(o: Vector2<f64>, a: Vector2<f64>, b: Vector2<f64>) -> f64 {
    (a - o).perp(&(b - o))
}

fn on_segment(p: Vector2<f64>, a: Vector2<f64>, b: Vector2<f64>) -> bool {
    p.x >= a.x.min(b.x) && p.x <= a.x.max(b.x) && p.y >= a.y.min(b.y) && p.y <= a.y.max(b.y)
}

impl Segment {
    /// Closed-segment intersection; touching and collinear overlap count.
    pub fn intersects(&self, a: [f64; 2], b: [f64; 2]) -> bool {
        let (p1, p2) = (Vector2::from(self.from), Vector2::from(self.to));
        let (q1, q2) = (Vector2::from(a), Vector2::from(b));
        let d1 = cross(q1, q2, p1);
        let d2 = cross(q1, q2, p2);
        let d3 = cross(p1, p2, q1);
        let d4 = cross(p1, p2, q2);
        if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
            return true;
        }
        (d1 == 0.0 && on_segment(p1, q1, q2))
            || (d2 == 0.0 && on_segment(p2, q1, q2))
            || (d3 == 0.0 && on_segment(q1, p1, p2))
            || (d4 == 0.0 && on_segment(q2, p1, p2))
    }
}

/// One annotated waypoint as produced by a scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaypointScan {
    pub id: String,
    pub x: f64,
    pub y: f64,
    #[serde(default)]
    pub yaw: f64,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub objects: Vec<String>,
}

impl WaypointScan {
    pub fn pose(&self) -> PlanarPose {
        PlanarPose::new(self.x, self.y, self.yaw)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grouping {
    pub id: String,
    #[serde(default)]
    pub description: String,
    pub children: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    pub schema_version: u32,
    #[serde(default = "default_radius")]
    pub adjacency_radius: f64,
    #[serde(default)]
    pub waypoints: Vec<WaypointScan>,
    #[serde(default)]
    pub groups: Vec<Grouping>,
    #[serde(default)]
    pub obstacles: Vec<Segment>,
}

fn default_radius() -> f64 {
    DEFAULT_ADJACENCY_RADIUS
}

impl SceneFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, PlannerError> {
        let file: Self = read_toml(path.as_ref())?;
        if file.schema_version != SCENE_SCHEMA_VERSION {
            return Err(PlannerError::Scene(format!(
                "unsupported scene schema version {} (expected {SCENE_SCHEMA_VERSION})",
                file.schema_version
            )));
        }
        Ok(file)
    }

    pub fn build(&self) -> Result<SceneGraph, PlannerError> {
        annotate_graph(&self.waypoints, &self.groups, &self.obstacles, self.adjacency_radius)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneGraph {
    pub nodes: Vec<SceneNode>,
    /// Undirected waypoint edges, each stored once with the smaller node
    /// index first, sorted.
    pub edges: Vec<(String, String)>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
    #[serde(skip)]
    adjacency: Vec<Vec<usize>>,
}

impl SceneGraph {
    /// Checks the node and edge invariants and builds the lookup tables.
    /// `parent` links are derived from the abstract nodes' children.
    pub fn new(nodes: Vec<SceneNode>, edges: &[(String, String)]) -> Result<Self, PlannerError> {
        let mut index = BTreeMap::new();
        for (i, n) in nodes.iter().enumerate() {
            if index.insert(n.id.clone(), i).is_some() {
                return Err(PlannerError::Scene(format!("duplicate node id `{}`", n.id)));
            }
            match (n.kind, n.pose.is_some()) {
                (NodeKind::PoseWaypoint, false) => {
                    return Err(PlannerError::Scene(format!("waypoint `{}` has no pose", n.id)))
                }
                (NodeKind::Abstract, true) => {
                    return Err(PlannerError::Scene(format!("abstract node `{}` has a pose", n.id)))
                }
                _ => {}
            }
        }
        for n in &nodes {
            if let Some(p) = &n.parent {
                match index.get(p).map(|&i| nodes[i].kind) {
                    Some(NodeKind::Abstract) => {}
                    _ => return Err(PlannerError::Scene(format!("parent `{p}` of `{}` is not an abstract node", n.id))),
                }
            }
            if n.kind == NodeKind::Abstract && !nodes.iter().any(|c| c.parent.as_deref() == Some(&n.id)) {
                return Err(PlannerError::Scene(format!("abstract node `{}` has no children", n.id)));
            }
        }
        for start in &nodes {
            let mut seen = BTreeSet::new();
            let mut cur = start.parent.as_deref();
            while let Some(p) = cur {
                if !seen.insert(p) || p == start.id {
                    return Err(PlannerError::Scene(format!("hierarchy cycle through `{p}`")));
                }
                cur = nodes[index[p]].parent.as_deref();
            }
        }

        let mut adjacency = vec![Vec::new(); nodes.len()];
        let mut pairs = BTreeSet::new();
        for (a, b) in edges {
            let ia = *index.get(a).ok_or_else(|| PlannerError::UnknownNode(a.clone()))?;
            let ib = *index.get(b).ok_or_else(|| PlannerError::UnknownNode(b.clone()))?;
            if ia == ib {
                return Err(PlannerError::Scene(format!("self edge at `{a}`")));
            }
            if nodes[ia].kind != NodeKind::PoseWaypoint || nodes[ib].kind != NodeKind::PoseWaypoint {
                return Err(PlannerError::Scene(format!("edge `{a}`-`{b}` touches an abstract node")));
            }
            if pairs.insert((ia.min(ib), ia.max(ib))) {
                adjacency[ia].push(ib);
                adjacency[ib].push(ia);
            }
        }
        for list in &mut adjacency {
            list.sort_unstable();
        }
        let edges = pairs
            .iter()
            .map(|&(a, b)| (nodes[a].id.clone(), nodes[b].id.clone()))
            .collect();
        Ok(Self {
            nodes,
            edges,
            index,
            adjacency,
        })
    }

    pub fn node(&self, id: &str) -> Option<&SceneNode> {
        self.index.get(id).map(|&i| &self.nodes[i])
    }

    pub fn waypoints(&self) -> impl Iterator<Item = &SceneNode> {
        self.nodes.iter().filter(|n| n.kind == NodeKind::PoseWaypoint)
    }

    /// Neighbours in node order.
    pub fn neighbors(&self, id: &str) -> Vec<&str> {
        self.index
            .get(id)
            .map(|&i| self.adjacency[i].iter().map(|&j| self.nodes[j].id.as_str()).collect())
            .unwrap_or_default()
    }

    pub fn adjacent(&self, a: &str, b: &str) -> bool {
        match (self.index.get(a), self.index.get(b)) {
            (Some(&ia), Some(&ib)) => self.adjacency[ia].binary_search(&ib).is_ok(),
            _ => false,
        }
    }

    /// Breadth-first order from `start` with each node's predecessor.
    /// Neighbours are expanded in node order.
    pub fn bfs(&self, start: &str) -> Result<Vec<(&str, Option<&str>)>, PlannerError> {
        let &s = self.index.get(start).ok_or_else(|| PlannerError::UnknownNode(start.into()))?;
        if self.nodes[s].kind != NodeKind::PoseWaypoint {
            return Err(PlannerError::Scene(format!("start `{start}` is not a waypoint")));
        }
        let mut order = vec![(s, None)];
        let mut seen = vec![false; self.nodes.len()];
        seen[s] = true;
        let mut queue = VecDeque::from([s]);
        while let Some(u) = queue.pop_front() {
            for &v in &self.adjacency[u] {
                if !seen[v] {
                    seen[v] = true;
                    order.push((v, Some(u)));
                    queue.push_back(v);
                }
            }
        }
        Ok(order
            .into_iter()
            .map(|(i, p)| (self.nodes[i].id.as_str(), p.map(|p: usize| self.nodes[p].id.as_str())))
            .collect())
    }

    /// Ancestor abstract nodes, nearest first.
    pub fn ancestors(&self, id: &str) -> Vec<&SceneNode> {
        let mut out = Vec::new();
        let mut cur = self.node(id).and_then(|n| n.parent.as_deref());
        while let Some(p) = cur.and_then(|p| self.node(p)) {
            out.push(p);
            cur = p.parent.as_deref();
        }
        out
    }

    /// A waypoint's description followed by its ancestors' descriptions.
    pub fn context_description(&self, id: &str) -> String {
        let Some(node) = self.node(id) else {
            return String::new();
        };
        std::iter::once(node.description.as_str())
            .chain(self.ancestors(id).into_iter().map(|a| a.description.as_str()))
            .filter(|d| !d.is_empty())
            .collect::<Vec<_>>()
            .join("; ")
    }

    /// Replaces object-list entries equal to `from`.
    pub fn substitute_object(&mut self, from: &str, to: &str) {
        for n in &mut self.nodes {
            for o in &mut n.object_list {
                if o == from {
                    *o = to.to_string();
                }
            }
        }
    }
}

/// Builds a scene graph from scanned waypoints: waypoints within
/// `radius` of each other are joined when no obstacle segment crosses the
/// straight line between them; groupings become abstract parents.
pub fn annotate_graph(
    scan: &[WaypointScan],
    groups: &[Grouping],
    obstacles: &[Segment],
    radius: f64,
) -> Result<SceneGraph, PlannerError> {
    if scan.is_empty() {
        return Err(PlannerError::Scene("scene has no waypoints".into()));
    }
    if !(radius > 0.0) {
        return Err(PlannerError::Scene(format!("adjacency radius must be positive, got {radius}")));
    }
    let mut nodes: Vec<SceneNode> = scan
        .iter()
        .map(|w| SceneNode {
            id: w.id.clone(),
            kind: NodeKind::PoseWaypoint,
            pose: Some(w.pose()),
            description: w.description.clone(),
            object_list: w.objects.clone(),
            parent: None,
        })
        .chain(groups.iter().map(|g| SceneNode {
            id: g.id.clone(),
            kind: NodeKind::Abstract,
            pose: None,
            description: g.description.clone(),
            object_list: Vec::new(),
            parent: None,
        }))
        .collect();

    let mut parent_of: BTreeMap<&str, &str> = BTreeMap::new();
    for g in groups {
        if g.children.is_empty() {
            return Err(PlannerError::Scene(format!("abstract node `{}` has no children", g.id)));
        }
        for c in &g.children {
            if !nodes.iter().any(|n| &n.id == c) {
                return Err(PlannerError::Scene(format!("group `{}` lists unknown child `{c}`", g.id)));
            }
            if let Some(prev) = parent_of.insert(c, &g.id) {
                return Err(PlannerError::Scene(format!("`{c}` has two parents: `{prev}` and `{}`", g.id)));
            }
        }
    }
    for n in &mut nodes {
        n.parent = parent_of.get(n.id.as_str()).map(|p| p.to_string());
    }

    let mut edges = Vec::new();
    for (i, a) in scan.iter().enumerate() {
        for b in &scan[i + 1..] {
            let (pa, pb) = ([a.x, a.y], [b.x, b.y]);
            let d = (a.x - b.x).hypot(a.y - b.y);
            if d <= radius && !obstacles.iter().any(|o| o.intersects(pa, pb)) {
                edges.push((a.id.clone(), b.id.clone()));
            }
        }
    }
    SceneGraph::new(nodes, &edges)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wp(id: &str, x: f64, y: f64) -> WaypointScan {
        WaypointScan {
            id: id.into(),
            x,
            y,
            yaw: 0.0,
            description: String::new(),
            objects: vec![],
        }
    }

    /// Parametric solve of p + t r = q + u s.
    fn crosses_oracle(p: [f64; 2], p2: [f64; 2], q: [f64; 2], q2: [f64; 2]) -> bool {
        let r = [p2[0] - p[0], p2[1] - p[1]];
        let s = [q2[0] - q[0], q2[1] - q[1]];
        let denom = r[0] * s[1] - r[1] * s[0];
        if denom.abs() < 1e-12 {
            return false;
        }
        let qp = [q[0] - p[0], q[1] - p[1]];
        let t = (qp[0] * s[1] - qp[1] * s[0]) / denom;
        let u = (qp[0] * r[1] - qp[1] * r[0]) / denom;
        (0.0..=1.0).contains(&t) && (0.0..=1.0).contains(&u)
    }

    #[test]
    fn two_waypoints_one_edge() {
        let g = annotate_graph(&[wp("a", 0.0, 0.0), wp("b", 1.0, 0.0)], &[], &[], 3.0).unwrap();
        assert_eq!(g.edges, vec![("a".to_string(), "b".to_string())]);
    }

    #[test]
    fn wall_blocks_edge() {
        let wall = Segment {
            from: [0.5, -1.0],
            to: [0.5, 1.0],
        };
        let g = annotate_graph(&[wp("a", 0.0, 0.0), wp("b", 1.0, 0.0)], &[], &[wall], 3.0).unwrap();
        assert!(g.edges.is_empty());
    }

    #[test]
    fn radius_limits_edges() {
        let g = annotate_graph(&[wp("a", 0.0, 0.0), wp("b", 3.5, 0.0)], &[], &[], 3.0).unwrap();
        assert!(g.edges.is_empty());
    }

    #[test]
    fn single_waypoint() {
        let g = annotate_graph(&[wp("a", 0.0, 0.0)], &[], &[], 3.0).unwrap();
        assert_eq!(g.nodes.len(), 1);
        assert!(g.edges.is_empty());
    }

    #[test]
    fn segment_test_matches_parametric_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut pt = || [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
        for _ in 0..5000 {
            let (a, b, c, d) = (pt(), pt(), pt(), pt());
            let seg = Segment { from: a, to: b };
            assert_eq!(seg.intersects(c, d), crosses_oracle(a, b, c, d), "{a:?} {b:?} {c:?} {d:?}");
        }
    }

    #[test]
    fn annotation_errors() {
        let dup = annotate_graph(&[wp("a", 0.0, 0.0), wp("a", 1.0, 0.0)], &[], &[], 3.0);
        assert!(matches!(dup, Err(PlannerError::Scene(_))));
        let orphan = Grouping {
            id: "room".into(),
            description: String::new(),
            children: vec![],
        };
        assert!(annotate_graph(&[wp("a", 0.0, 0.0)], &[orphan], &[], 3.0).is_err());
        let unknown = Grouping {
            id: "room".into(),
            description: String::new(),
            children: vec!["zzz".into()],
        };
        assert!(annotate_graph(&[wp("a", 0.0, 0.0)], &[unknown], &[], 3.0).is_err());
        assert!(annotate_graph(&[], &[], &[], 3.0).is_err());
    }

    #[test]
    fn hierarchy_and_context() {
        let groups = vec![
            Grouping {
                id: "room".into(),
                description: "office room".into(),
                children: vec!["a".into()],
            },
            Grouping {
                id: "floor".into(),
                description: "second floor".into(),
                children: vec!["room".into(), "b".into()],
            },
        ];
        let mut a = wp("a", 0.0, 0.0);
        a.description = "desk".into();
        let g = annotate_graph(&[a, wp("b", 1.0, 0.0)], &groups, &[], 3.0).unwrap();
        assert_eq!(g.node("a").unwrap().parent.as_deref(), Some("room"));
        assert_eq!(g.context_description("a"), "desk; office room; second floor");
        assert_eq!(g.context_description("b"), "second floor");
        let twice = vec![
            groups[0].clone(),
            Grouping {
                id: "other".into(),
                description: String::new(),
                children: vec!["a".into()],
            },
        ];
        assert!(annotate_graph(&[wp("a", 0.0, 0.0)], &twice, &[], 3.0).is_err());
    }

    #[test]
    fn bfs_breadth_order() {
        let scan: Vec<_> = (0..5).map(|i| wp(&format!("n{i}"), i as f64, 0.0)).collect();
        let g = annotate_graph(&scan, &[], &[], 1.0).unwrap();
        let order: Vec<_> = g.bfs("n2").unwrap().into_iter().map(|(n, _)| n).collect();
        assert_eq!(order, vec!["n2", "n1", "n3", "n0", "n4"]);
    }
}
