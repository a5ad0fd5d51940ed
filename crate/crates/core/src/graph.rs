//! Scene-graph data model: class registry, nodes, per-video graphs and their
//! on-disk formats.
//!
//! A [`SceneGraph25D`] holds every detected object occurrence of one video.
//! Nodes are keyed by a sequential `node_id` (file order), carry an appearance
//! feature, an optional motion feature, the original 2D box, the lifted 3D
//! centroid and the normalized timestamps of the frames they were observed in.
//! The edge set is never materialized; attention builds it as a dense kernel.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{lift_centroid, Intrinsics};

pub const GRAPH_FORMAT: &str = "prism25d-graph";
pub const GRAPH_VERSION: u64 = 1;

pub type NodeId = u32;
pub type ClassId = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassKind {
    Static,
    Dynamic,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub name: String,
    pub kind: ClassKind,
}

/// Maps class ids to a name and a static/dynamic kind.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ClassRegistry {
    entries: BTreeMap<ClassId, ClassEntry>,
}

#[derive(Serialize, Deserialize)]
struct RegistryFile {
    classes: Vec<RegistryRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegistryRecord {
    id: ClassId,
    name: String,
    kind: ClassKind,
}

impl ClassRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: ClassId, name: impl Into<String>, kind: ClassKind) -> Result<()> {
        if self.entries.contains_key(&id) {
            return Err(Error::Registry(format!("duplicate class id {id}")));
        }
        self.entries.insert(
            id,
            ClassEntry {
                name: name.into(),
                kind,
            },
        );
        Ok(())
    }

    pub fn with(mut self, id: ClassId, name: &str, kind: ClassKind) -> Result<Self> {
        self.insert(id, name, kind)?;
        Ok(self)
    }

    pub fn get(&self, id: ClassId) -> Option<&ClassEntry> {
        self.entries.get(&id)
    }

    pub fn kind(&self, id: ClassId) -> Result<ClassKind> {
        self.entries
            .get(&id)
            .map(|e| e.kind)
            .ok_or_else(|| Error::Registry(format!("unknown class id {id}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ClassId, &ClassEntry)> {
        self.entries.iter().map(|(k, v)| (*k, v))
    }

    pub fn ids_of_kind(&self, kind: ClassKind) -> Vec<ClassId> {
        self.iter()
            .filter(|(_, e)| e.kind == kind)
            .map(|(id, _)| id)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// SHA-256 over the canonical JSON rendering, hex encoded.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(&self.to_file()).expect("registry serializes");
        let hash = Sha256::digest(&bytes);
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }

    fn to_file(&self) -> RegistryFile {
        RegistryFile {
            classes: self
                .iter()
                .map(|(id, e)| RegistryRecord {
                    id,
                    name: e.name.clone(),
                    kind: e.kind,
                })
                .collect(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file: RegistryFile = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        let mut registry = ClassRegistry::new();
        for rec in file.classes {
            registry.insert(rec.id, rec.name, rec.kind)?;
        }
        Ok(registry)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, &self.to_file())?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }
}

/// Axis-aligned pixel box `(x1, y1, x2, y2)`; serialized as a 4-array.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(a: [f64; 4]) -> Self {
        BBox::new(a[0], a[1], a[2], a[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn is_well_ordered(&self) -> bool {
        self.x1 < self.x2 && self.y1 < self.y2
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| v.is_finite());
        if finite && self.is_well_ordered() {
            Ok(())
        } else {
            Err(Error::validation(format!("degenerate bbox {self:?}")))
        }
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }
}

/// One detected object occurrence, or after compaction, one merged static object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneNode {
    pub node_id: NodeId,
    pub class_id: ClassId,
    pub feature: Vec<f64>,
    pub motion_feature: Option<Vec<f64>>,
    pub bbox: BBox,
    pub depth: f64,
    pub centroid3d: [f64; 3],
    pub timestamps: Vec<f64>,
    pub source_frames: Vec<u32>,
}

impl SceneNode {
    /// Earliest frame this node was observed in.
    pub fn first_frame(&self) -> u32 {
        self.source_frames[0]
    }

    pub fn is_merged(&self) -> bool {
        self.source_frames.len() > 1
    }

    fn validate(&self, kind: ClassKind) -> Result<()> {
        let id = self.node_id;
        self.bbox
            .validate()
            .map_err(|e| Error::validation(format!("node {id}: {e}")))?;
        if self.timestamps.is_empty() {
            return Err(Error::validation(format!("node {id}: no timestamps")));
        }
        if self.timestamps.len() != self.source_frames.len() {
            return Err(Error::validation(format!(
                "node {id}: {} timestamps for {} source frames",
                self.timestamps.len(),
                self.source_frames.len()
            )));
        }
        if self.timestamps.windows(2).any(|w| w[0] > w[1])
            || self.source_frames.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::validation(format!("node {id}: observations not sorted")));
        }
        if self
            .timestamps
            .iter()
            .any(|t| !(0.0..=1.0).contains(t))
        {
            return Err(Error::validation(format!("node {id}: timestamp outside [0, 1]")));
        }
        match (kind, &self.motion_feature) {
            (ClassKind::Static, Some(_)) => Err(Error::validation(format!(
                "node {id}: static node carries a motion feature"
            ))),
            (ClassKind::Dynamic, None) => Err(Error::validation(format!(
                "node {id}: dynamic node lacks a motion feature"
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameSet {
    pub frame_index: u32,
    pub node_ids: Vec<NodeId>,
}

/// All nodes of one video, partitioned per frame and into static/dynamic sets.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneGraph25D {
    pub video_id: String,
    pub max_frames: u32,
    pub frames: Vec<FrameSet>,
    pub static_nodes: BTreeSet<NodeId>,
    pub dynamic_nodes: BTreeSet<NodeId>,
    pub nodes: BTreeMap<NodeId, SceneNode>,
}

impl SceneGraph25D {
    /// Builds a graph from nodes, deriving frame sets from each node's
    /// `source_frames` and the partition from the registry.
    pub fn from_nodes(
        video_id: impl Into<String>,
        max_frames: u32,
        nodes: impl IntoIterator<Item = SceneNode>,
        registry: &ClassRegistry,
    ) -> Result<Self> {
        if max_frames == 0 {
            return Err(Error::validation("max_frames must be positive"));
        }
        let mut map = BTreeMap::new();
        for node in nodes {
            let id = node.node_id;
            if map.insert(id, node).is_some() {
                return Err(Error::validation(format!("duplicate node id {id}")));
            }
        }
        let mut graph = SceneGraph25D {
            video_id: video_id.into(),
            max_frames,
            frames: Vec::new(),
            static_nodes: BTreeSet::new(),
            dynamic_nodes: BTreeSet::new(),
            nodes: map,
        };
        graph.rebuild_frames();
        split_static_dynamic(&mut graph, registry)?;
        graph.validate(registry)?;
        Ok(graph)
    }

    pub(crate) fn rebuild_frames(&mut self) {
        let mut frames: BTreeMap<u32, Vec<NodeId>> = BTreeMap::new();
        for node in self.nodes.values() {
            for &f in &node.source_frames {
                frames.entry(f).or_default().push(node.node_id);
            }
        }
        self.frames = frames
            .into_iter()
            .map(|(frame_index, node_ids)| FrameSet {
                frame_index,
                node_ids,
            })
            .collect();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> Option<&SceneNode> {
        self.nodes.get(&id)
    }

    pub fn is_static(&self, id: NodeId) -> bool {
        self.static_nodes.contains(&id)
    }

    /// Static nodes observed in the given frame, ascending by id.
    pub fn static_in_frame(&self, frame_index: u32) -> Vec<NodeId> {
        match self
            .frames
            .binary_search_by_key(&frame_index, |f| f.frame_index)
        {
            Ok(i) => self.frames[i]
                .node_ids
                .iter()
                .copied()
                .filter(|id| self.static_nodes.contains(id))
                .collect(),
            Err(_) => Vec::new(),
        }
    }

    /// Checks every structural invariant against the registry.
    pub fn validate(&self, registry: &ClassRegistry) -> Result<()> {
        if self.max_frames == 0 {
            return Err(Error::validation("max_frames must be positive"));
        }
        for (id, node) in &self.nodes {
            if *id != node.node_id {
                return Err(Error::validation(format!("node key {id} != node_id {}", node.node_id)));
            }
            let kind = registry.kind(node.class_id)?;
            node.validate(kind)?;
            let in_static = self.static_nodes.contains(id);
            let in_dynamic = self.dynamic_nodes.contains(id);
            let expected = kind == ClassKind::Static;
            if in_static == in_dynamic || in_static != expected {
                return Err(Error::validation(format!("node {id}: partition mismatch")));
            }
        }
        if self.static_nodes.len() + self.dynamic_nodes.len() != self.nodes.len() {
            return Err(Error::validation("partition references unknown nodes"));
        }
        for frame in &self.frames {
            if let Some(bad) = frame.node_ids.iter().find(|id| !self.nodes.contains_key(id)) {
                return Err(Error::validation(format!(
                    "frame {} references missing node {bad}",
                    frame.frame_index
                )));
            }
        }
        Ok(())
    }
}

/// Partitions nodes by class kind and stores the sets back into the graph.
pub fn split_static_dynamic(
    graph: &mut SceneGraph25D,
    registry: &ClassRegistry,
) -> Result<(BTreeSet<NodeId>, BTreeSet<NodeId>)> {
    let mut static_nodes = BTreeSet::new();
    let mut dynamic_nodes = BTreeSet::new();
    for node in graph.nodes.values() {
        match registry.kind(node.class_id)? {
            ClassKind::Static => static_nodes.insert(node.node_id),
            ClassKind::Dynamic => dynamic_nodes.insert(node.node_id),
        };
    }
    graph.static_nodes = static_nodes.clone();
    graph.dynamic_nodes = dynamic_nodes.clone();
    Ok((static_nodes, dynamic_nodes))
}

/// One line of the detection JSONL format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub video_id: String,
    pub frame_index: u32,
    pub class_id: ClassId,
    pub bbox: [f64; 4],
    pub depth: f64,
    pub feature: Vec<f64>,
    pub motion_feature: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoadOptions {
    /// Dataset-wide frame count used to normalize timestamps.
    pub max_frames: u32,
    pub intrinsics: Intrinsics,
}

/// Reads a detection JSONL file into one lifted graph per video, in order of
/// first appearance. Node ids are sequential in file order within a video.
pub fn load_detections(
    path: impl AsRef<Path>,
    registry: &ClassRegistry,
    opts: &LoadOptions,
) -> Result<Vec<SceneGraph25D>> {
    graphs_from_records(read_detection_records(path)?, registry, opts)
}

/// Parsed detection lines paired with their 1-based line numbers.
pub fn read_detection_records(path: impl AsRef<Path>) -> Result<Vec<(usize, DetectionRecord)>> {
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DetectionRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push((i + 1, rec));
    }
    Ok(records)
}

pub fn write_detections<'a>(
    records: impl IntoIterator<Item = &'a DetectionRecord>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for rec in records {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn graphs_from_records(
    records: impl IntoIterator<Item = (usize, DetectionRecord)>,
    registry: &ClassRegistry,
    opts: &LoadOptions,
) -> Result<Vec<SceneGraph25D>> {
    if opts.max_frames == 0 {
        return Err(Error::validation("max_frames must be positive"));
    }
    let mut order: Vec<String> = Vec::new();
    let mut per_video: BTreeMap<String, Vec<SceneNode>> = BTreeMap::new();
    for (line, rec) in records {
        let at = |e: Error| Error::Parse {
            line,
            message: e.to_string(),
        };
        registry.kind(rec.class_id)?;
        let bbox = BBox::from(rec.bbox);
        bbox.validate()
            .map_err(|e| Error::validation(format!("line {line}: {e}")))?;
        if rec.frame_index > opts.max_frames {
            return Err(Error::validation(format!(
                "line {line}: frame_index {} exceeds max_frames {}",
                rec.frame_index, opts.max_frames
            )));
        }
        let centroid3d = lift_centroid(&bbox, rec.depth, &opts.intrinsics)
            .map_err(|e| Error::validation(format!("line {line}: {e}")))?;
        let nodes = match per_video.get_mut(&rec.video_id) {
            Some(v) => v,
            None => {
                order.push(rec.video_id.clone());
                per_video.entry(rec.video_id.clone()).or_default()
            }
        };
        let node = SceneNode {
            node_id: nodes.len() as NodeId,
            class_id: rec.class_id,
            feature: rec.feature,
            motion_feature: rec.motion_feature,
            bbox,
            depth: rec.depth,
            centroid3d,
            timestamps: vec![rec.frame_index as f64 / opts.max_frames as f64],
            source_frames: vec![rec.frame_index],
        };
        node.validate(registry.kind(node.class_id)?).map_err(at)?;
        nodes.push(node);
    }
    order
        .into_iter()
        .map(|vid| {
            let nodes = per_video.remove(&vid).unwrap_or_default();
            SceneGraph25D::from_nodes(vid, opts.max_frames, nodes, registry)
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct GraphFile {
    format: String,
    version: u64,
    registry_digest: String,
    graphs: Vec<GraphRecord>,
}

#[derive(Serialize, Deserialize)]
struct GraphRecord {
    video_id: String,
    max_frames: u32,
    nodes: Vec<SceneNode>,
    frames: Vec<FrameSet>,
    static_nodes: Vec<NodeId>,
    dynamic_nodes: Vec<NodeId>,
}

/// A set of graphs as stored in one graph file.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphCorpus {
    pub registry_digest: String,
    pub graphs: Vec<SceneGraph25D>,
}

pub fn save_graphs(graphs: &[SceneGraph25D], registry: &ClassRegistry, path: impl AsRef<Path>) -> Result<()> {
    let file = GraphFile {
        format: GRAPH_FORMAT.to_string(),
        version: GRAPH_VERSION,
        registry_digest: registry.digest(),
        graphs: graphs
            .iter()
            .map(|g| GraphRecord {
                video_id: g.video_id.clone(),
                max_frames: g.max_frames,
                nodes: g.nodes.values().cloned().collect(),
                frames: g.frames.clone(),
                static_nodes: g.static_nodes.iter().copied().collect(),
                dynamic_nodes: g.dynamic_nodes.iter().copied().collect(),
            })
            .collect(),
    };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &file)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn save_graph(graph: &SceneGraph25D, registry: &ClassRegistry, path: impl AsRef<Path>) -> Result<()> {
    save_graphs(std::slice::from_ref(graph), registry, path)
}

pub fn load_graphs(path: impl AsRef<Path>) -> Result<GraphCorpus> {
    let value: serde_json::Value = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    let format = value.get("format").and_then(|v| v.as_str());
    if format != Some(GRAPH_FORMAT) {
        return Err(Error::Format(format!("not a {GRAPH_FORMAT} file")));
    }
    let version = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0);
    if version != GRAPH_VERSION {
        return Err(Error::Version {
            found: version,
            expected: GRAPH_VERSION,
        });
    }
    let file: GraphFile = serde_json::from_value(value)?;
    let graphs = file
        .graphs
        .into_iter()
        .map(|rec| {
            let mut nodes = BTreeMap::new();
            for n in rec.nodes {
                let id = n.node_id;
                if nodes.insert(id, n).is_some() {
                    return Err(Error::Format(format!("duplicate node id {id}")));
                }
            }
            Ok(SceneGraph25D {
                video_id: rec.video_id,
                max_frames: rec.max_frames,
                frames: rec.frames,
                static_nodes: rec.static_nodes.into_iter().collect(),
                dynamic_nodes: rec.dynamic_nodes.into_iter().collect(),
                nodes,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GraphCorpus {
        registry_digest: file.registry_digest,
        graphs,
    })
}

/// Loads a file expected to hold exactly one graph.
pub fn load_graph(path: impl AsRef<Path>) -> Result<SceneGraph25D> {
    let mut corpus = load_graphs(path)?;
    match corpus.graphs.len() {
        1 => Ok(corpus.graphs.remove(0)),
        n => Err(Error::Format(format!("expected one graph, found {n}"))),
    }
}
