//! Static-node pruning.
//!
//! Two static nodes from nearby frames are merge candidates when they share a
//! class and their boxes overlap by more than `gamma` IoU. Each static node is
//! matched to the candidate with the nearest 3D centroid among the previous
//! `delta` frames, and a single forward sweep over frames propagates root
//! ancestors along those matches. Every set of nodes sharing a root is then
//! collapsed into one node. Dynamic nodes are never merged.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{distance, register_frames};
use crate::graph::{BBox, ClassKind, NodeId, SceneGraph25D, SceneNode};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchParams {
    pub gamma: f64,
    pub delta: u32,
}

impl Default for MatchParams {
    fn default() -> Self {
        MatchParams { gamma: 0.5, delta: 3 }
    }
}

impl MatchParams {
    pub fn new(gamma: f64, delta: u32) -> Result<Self> {
        let p = MatchParams { gamma, delta };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::validation(format!("gamma must lie in (0, 1), got {}", self.gamma)));
        }
        if self.delta < 1 {
            return Err(Error::validation("delta must be at least 1"));
        }
        Ok(())
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Same class and IoU strictly above `gamma`.
pub fn criterion(v: &SceneNode, w: &SceneNode, params: &MatchParams) -> bool {
    v.class_id == w.class_id && iou(&v.bbox, &w.bbox) > params.gamma
}

/// Static nodes observed in frames `t-delta ..= t-1`, where `t` is the first
/// frame of `v`, ascending by id.
fn window_candidates(v: &SceneNode, graph: &SceneGraph25D, delta: u32) -> BTreeSet<NodeId> {
    let t = v.first_frame();
    let lo = t.saturating_sub(delta);
    let start = graph.frames.partition_point(|f| f.frame_index < lo);
    graph.frames[start..]
        .iter()
        .take_while(|f| f.frame_index < t)
        .flat_map(|f| f.node_ids.iter().copied())
        .filter(|id| *id != v.node_id && graph.static_nodes.contains(id))
        .collect()
}

/// The candidate within the window satisfying [`criterion`] with the nearest
/// 3D centroid; ties go to the lower node id.
pub fn match_node(v: &SceneNode, graph: &SceneGraph25D, params: &MatchParams) -> Option<NodeId> {
    let mut best: Option<(f64, NodeId)> = None;
    for w_id in window_candidates(v, graph, params.delta) {
        let w = &graph.nodes[&w_id];
        if !criterion(v, w, params) {
            continue;
        }
        let d = distance(&v.centroid3d, &w.centroid3d);
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, w_id));
        }
    }
    best.map(|(_, id)| id)
}

/// Root ancestor of every static node.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AncestorMap {
    pub parent: BTreeMap<NodeId, NodeId>,
}

impl AncestorMap {
    pub fn ancestor(&self, id: NodeId) -> Option<NodeId> {
        self.parent.get(&id).copied()
    }

    /// Equivalence classes keyed by root, members ascending.
    pub fn classes(&self) -> BTreeMap<NodeId, Vec<NodeId>> {
        let mut out: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
        for (&node, &root) in &self.parent {
            out.entry(root).or_default().push(node);
        }
        out
    }
}

/// Forward sweep over frames: nodes of the first frame and unmatched nodes are
/// their own ancestors; a matched node inherits its match's ancestor.
pub fn build_ancestors(graph: &SceneGraph25D, params: &MatchParams) -> AncestorMap {
    let mut order: Vec<(u32, NodeId)> = graph
        .static_nodes
        .iter()
        .map(|id| (graph.nodes[id].first_frame(), *id))
        .collect();
    order.sort_unstable();

    let mut map = AncestorMap::default();
    for (_, id) in order {
        let v = &graph.nodes[&id];
        let root = match match_node(v, graph, params) {
            Some(m) => map.parent[&m],
            None => id,
        };
        map.parent.insert(id, root);
    }
    map
}

/// Collapses each equivalence class into its root node: mean feature, the
/// root's centroid and box, and the union of observations.
pub fn merge_static(graph: &SceneGraph25D, ancestors: &AncestorMap) -> Result<SceneGraph25D> {
    let mut out = graph.clone();
    for (root, members) in ancestors.classes() {
        if members.len() == 1 {
            continue;
        }
        let root_node = graph
            .nodes
            .get(&root)
            .ok_or_else(|| Error::Internal(format!("ancestor {root} is not a node")))?;
        let dim = root_node.feature.len();
        let mut feature = vec![0.0; dim];
        let mut observations: Vec<(u32, f64)> = Vec::new();
        for id in &members {
            let node = &graph.nodes[id];
            if node.class_id != root_node.class_id {
                return Err(Error::Internal(format!(
                    "equivalence class of {root} mixes classes {} and {}",
                    root_node.class_id, node.class_id
                )));
            }
            if node.feature.len() != dim {
                return Err(Error::Internal(format!("feature width differs within class of {root}")));
            }
            for (acc, x) in feature.iter_mut().zip(&node.feature) {
                *acc += x;
            }
            observations.extend(node.source_frames.iter().copied().zip(node.timestamps.iter().copied()));
            if *id != root {
                out.nodes.remove(id);
                out.static_nodes.remove(id);
            }
        }
        let n = members.len() as f64;
        feature.iter_mut().for_each(|x| *x /= n);
        observations.sort_by_key(|o| o.0);
        observations.dedup_by_key(|o| o.0);

        let merged = out.nodes.get_mut(&root).expect("root retained");
        merged.feature = feature;
        merged.source_frames = observations.iter().map(|o| o.0).collect();
        merged.timestamps = observations.iter().map(|o| o.1).collect();
    }
    out.rebuild_frames();
    Ok(out)
}

pub fn compact(graph: &SceneGraph25D, params: &MatchParams) -> Result<SceneGraph25D> {
    merge_static(graph, &build_ancestors(graph, params))
}

/// Registration followed by compaction.
pub fn register_and_compact(graph: &SceneGraph25D, params: &MatchParams) -> Result<SceneGraph25D> {
    compact(&register_frames(graph, params)?, params)
}

/// Node counts before/after compaction; per-video averages for corpora.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompactionStats {
    pub full: f64,
    #[serde(rename = "static")]
    pub static_nodes: f64,
    #[serde(rename = "dynamic")]
    pub dynamic_nodes: f64,
    pub reduction_pct: f64,
}

pub fn compaction_stats(before: &SceneGraph25D, after: &SceneGraph25D) -> CompactionStats {
    corpus_stats(std::iter::once((before, after)))
}

pub fn corpus_stats<'a>(
    pairs: impl IntoIterator<Item = (&'a SceneGraph25D, &'a SceneGraph25D)>,
) -> CompactionStats {
    let (mut videos, mut full, mut st, mut dy) = (0usize, 0usize, 0usize, 0usize);
    for (before, after) in pairs {
        videos += 1;
        full += before.len();
        st += after.static_nodes.len();
        dy += after.dynamic_nodes.len();
    }
    if videos == 0 || full == 0 {
        return CompactionStats {
            full: 0.0,
            static_nodes: 0.0,
            dynamic_nodes: 0.0,
            reduction_pct: 0.0,
        };
    }
    let n = videos as f64;
    CompactionStats {
        full: full as f64 / n,
        static_nodes: st as f64 / n,
        dynamic_nodes: dy as f64 / n,
        reduction_pct: 100.0 * (1.0 - (st + dy) as f64 / full as f64),
    }
}

/// A node as seen by the encoder: its combined feature and its geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderNode {
    pub node_id: NodeId,
    pub kind: ClassKind,
    pub feature: Vec<f64>,
    pub position: [f64; 3],
    pub timestamps: Vec<f64>,
}

/// Encoder-ready nodes of one video, ascending by node id.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderInput {
    pub video_id: String,
    pub nodes: Vec<EncoderNode>,
}

impl EncoderInput {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Appends motion features to dynamic nodes' appearance features.
pub fn attach_motion(graph: &SceneGraph25D) -> Result<EncoderInput> {
    let nodes = graph
        .nodes
        .values()
        .map(|node| {
            let kind = if graph.dynamic_nodes.contains(&node.node_id) {
                ClassKind::Dynamic
            } else {
                ClassKind::Static
            };
            let feature = match kind {
                ClassKind::Static => node.feature.clone(),
                ClassKind::Dynamic => {
                    let motion = node.motion_feature.as_ref().ok_or_else(|| {
                        Error::validation(format!("dynamic node {} lacks a motion feature", node.node_id))
                    })?;
                    node.feature.iter().chain(motion).copied().collect()
                }
            };
            Ok(EncoderNode {
                node_id: node.node_id,
                kind,
                feature,
                position: node.centroid3d,
                timestamps: node.timestamps.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EncoderInput {
        video_id: graph.video_id.clone(),
        nodes,
    })
}
