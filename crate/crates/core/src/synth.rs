//! Seeded synthetic worlds: static and dynamic objects seen by a pinhole
//! camera, their detections, the true merge partition, camera poses and
//! machine-answerable questions.
//!
//! World coordinates are the frame-0 camera frame (x right, y down, z
//! forward). Objects are camera-facing boxes of fixed physical size, so a
//! noiseless detection lifts back to the exact object center.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::compactor::{build_ancestors, MatchParams};
use crate::error::{Error, Result};
use crate::geometry::{register_frames, FramePose, Intrinsics, RigidTransform};
use crate::graph::{
    graphs_from_records, BBox, ClassId, ClassKind, ClassRegistry, DetectionRecord, LoadOptions, NodeId, SceneGraph25D,
};
use crate::qa::{QaInstance, Token};

pub const STATIC_CLASS_NAMES: [&str; 20] = [
    "table", "chair", "sofa", "bed", "shelf", "lamp", "desk", "cabinet", "plant", "television", "fridge", "oven",
    "sink", "toilet", "bench", "clock", "vase", "mirror", "stool", "piano",
];
pub const DYNAMIC_CLASS_NAMES: [&str; 20] = [
    "person", "dog", "cat", "ball", "car", "bicycle", "bird", "horse", "cup", "bottle", "phone", "book", "toy",
    "bag", "umbrella", "frisbee", "skateboard", "kite", "remote", "robot",
];
/// Class ids of dynamic classes start here; static classes use `0..20`.
pub const DYNAMIC_CLASS_BASE: ClassId = 20;

pub const PAD_TOKEN: Token = 0;
pub const STATIC_TOKEN_BASE: Token = 10;
pub const DYNAMIC_TOKEN_BASE: Token = 40;
pub const COUNT_TOKEN_BASE: Token = 70;
pub const MAX_COUNT: usize = 9;
pub const VOCAB_SIZE: usize = 80;
pub const CANDIDATES: usize = 5;

/// The class registry used by every generated world.
pub fn builtin_registry() -> ClassRegistry {
    let mut reg = ClassRegistry::new();
    for (i, name) in STATIC_CLASS_NAMES.iter().enumerate() {
        reg.insert(i as ClassId, *name, ClassKind::Static).expect("unique ids");
    }
    for (i, name) in DYNAMIC_CLASS_NAMES.iter().enumerate() {
        reg.insert(DYNAMIC_CLASS_BASE + i as ClassId, *name, ClassKind::Dynamic)
            .expect("unique ids");
    }
    reg
}

pub fn class_token(class_id: ClassId) -> Result<Token> {
    let n = STATIC_CLASS_NAMES.len() as ClassId;
    if class_id < n {
        Ok(STATIC_TOKEN_BASE + class_id)
    } else if (DYNAMIC_CLASS_BASE..DYNAMIC_CLASS_BASE + DYNAMIC_CLASS_NAMES.len() as ClassId).contains(&class_id) {
        Ok(DYNAMIC_TOKEN_BASE + class_id - DYNAMIC_CLASS_BASE)
    } else {
        Err(Error::Registry(format!("class {class_id} has no token")))
    }
}

pub fn count_token(count: usize) -> Result<Token> {
    if count > MAX_COUNT {
        return Err(Error::validation(format!("count {count} exceeds {MAX_COUNT}")));
    }
    Ok(COUNT_TOKEN_BASE + count as Token)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CameraMotion {
    Stationary,
    /// Camera center moves by `velocity` per frame, orientation fixed.
    Translating { velocity: [f64; 3] },
    /// Camera turns by `rate` radians per frame about the vertical axis
    /// through `pivot`, keeping the pivot at the same relative position.
    Orbiting { rate: f64, pivot: [f64; 3] },
}

impl CameraMotion {
    /// Maps camera-`k` coordinates to world coordinates.
    pub fn pose(&self, k: u32) -> RigidTransform {
        let k = k as f64;
        match *self {
            CameraMotion::Stationary => RigidTransform::identity(),
            CameraMotion::Translating { velocity } => {
                RigidTransform::new(Matrix3::identity(), Vector3::from(velocity) * k)
            }
            CameraMotion::Orbiting { rate, pivot } => {
                let (s, c) = (rate * k).sin_cos();
                let r = Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c);
                let p = Vector3::from(pivot);
                RigidTransform::new(r, p - r * p)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    /// Standard deviation of each bbox corner coordinate, pixels.
    pub bbox_px: f64,
    pub depth: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSpec {
    pub seed: u64,
    pub video_id: String,
    pub n_frames: u32,
    /// Timestamp normalizer; defaults to `n_frames`.
    pub max_frames: Option<u32>,
    pub n_static: usize,
    pub n_dynamic: usize,
    pub camera: CameraMotion,
    pub noise: NoiseSpec,
    pub image_size: [f64; 2],
    pub intrinsics: Option<Intrinsics>,
    /// Side of a projected box at the object's frame-0 depth.
    pub object_box_px: f64,
    /// Region static objects and trajectory points are drawn from.
    pub volume_min: [f64; 3],
    pub volume_max: [f64; 3],
    /// Minimum 3D distance between static objects.
    pub min_separation: f64,
    pub unique_static_classes: bool,
    pub feature_dim: usize,
    pub motion_dim: usize,
    /// Per-object deviation of appearance features from the class prototype.
    pub feature_noise: f64,
    /// Distance at which a dynamic object counts as reaching a static one.
    pub reach_radius: f64,
    /// A dynamic object's nearest static object beats the runner-up by this much.
    pub nearest_margin: f64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            seed: 0,
            video_id: "world".into(),
            n_frames: 4,
            max_frames: None,
            n_static: 5,
            n_dynamic: 2,
            camera: CameraMotion::Stationary,
            noise: NoiseSpec::default(),
            image_size: [640.0, 480.0],
            intrinsics: None,
            object_box_px: 64.0,
            volume_min: [-1.6, -0.8, 4.0],
            volume_max: [1.6, 0.8, 8.0],
            min_separation: 1.2,
            unique_static_classes: true,
            feature_dim: 16,
            motion_dim: 4,
            feature_noise: 0.1,
            reach_radius: 0.8,
            nearest_margin: 0.3,
        }
    }
}

impl WorldSpec {
    pub fn intrinsics(&self) -> Intrinsics {
        self.intrinsics
            .unwrap_or_else(|| Intrinsics::for_image(self.image_size[0], self.image_size[1]))
    }

    pub fn max_frames(&self) -> u32 {
        self.max_frames.unwrap_or(self.n_frames)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::validation(m));
        if self.n_frames == 0 {
            return bad("n_frames must be positive".into());
        }
        if self.max_frames() < self.n_frames {
            return bad("max_frames must cover n_frames".into());
        }
        if self.unique_static_classes && self.n_static > STATIC_CLASS_NAMES.len() {
            return bad(format!("at most {} distinct static classes", STATIC_CLASS_NAMES.len()));
        }
        if self.n_dynamic > DYNAMIC_CLASS_NAMES.len() {
            return bad(format!("at most {} dynamic objects", DYNAMIC_CLASS_NAMES.len()));
        }
        if self.n_dynamic > 0 && self.n_static == 0 {
            return bad("dynamic objects need a static object to head for".into());
        }
        if self.feature_dim == 0 || self.motion_dim == 0 {
            return bad("feature dimensions must be positive".into());
        }
        let positive = [self.object_box_px, self.image_size[0], self.image_size[1]];
        if positive.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return bad("image size and box size must be positive".into());
        }
        let nonneg = [
            self.noise.bbox_px,
            self.noise.depth,
            self.min_separation,
            self.feature_noise,
            self.reach_radius,
            self.nearest_margin,
        ];
        if nonneg.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return bad("noise, separation, radius and margin must be finite and nonnegative".into());
        }
        if (0..3).any(|i| self.volume_min[i] >= self.volume_max[i]) || self.volume_min[2] <= 0.0 {
            return bad("volume must be a nonempty box in front of the camera".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectTruth {
    pub object_id: u32,
    pub class_id: ClassId,
    pub kind: ClassKind,
    /// Physical width and height.
    pub extent: [f64; 2],
    /// World position in every frame.
    pub positions: Vec<[f64; 3]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub video_id: String,
    pub n_frames: u32,
    pub max_frames: u32,
    /// World object behind each detection, indexed by node id.
    pub detection_objects: Vec<u32>,
    pub poses: Vec<FramePose>,
    pub objects: Vec<ObjectTruth>,
    pub reach_radius: f64,
}

impl GroundTruth {
    pub fn object(&self, id: u32) -> &ObjectTruth {
        &self.objects[id as usize]
    }

    pub fn statics(&self) -> impl Iterator<Item = &ObjectTruth> {
        self.objects.iter().filter(|o| o.kind == ClassKind::Static)
    }

    pub fn dynamics(&self) -> impl Iterator<Item = &ObjectTruth> {
        self.objects.iter().filter(|o| o.kind == ClassKind::Dynamic)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub spec: WorldSpec,
    pub detections: Vec<DetectionRecord>,
    pub truth: GroundTruth,
}

impl World {
    /// Lifted graph of the world's detections.
    pub fn graph(&self) -> Result<SceneGraph25D> {
        let opts = LoadOptions {
            max_frames: self.spec.max_frames(),
            intrinsics: self.spec.intrinsics(),
        };
        let records = self.detections.iter().cloned().enumerate().map(|(i, r)| (i + 1, r));
        let mut graphs = graphs_from_records(records, &builtin_registry(), &opts)?;
        graphs
            .pop()
            .ok_or_else(|| Error::validation("world has no detections"))
    }
}

const WORLD_ATTEMPTS: usize = 50;
const PLACEMENT_ATTEMPTS: usize = 400;

/// Unit-scale appearance prototype shared by every object of a class.
pub fn class_prototype(class_id: ClassId, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 + class_id as u64);
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn uniform_point(rng: &mut ChaCha8Rng, lo: &[f64; 3], hi: &[f64; 3]) -> [f64; 3] {
    [
        rng.random_range(lo[0]..hi[0]),
        rng.random_range(lo[1]..hi[1]),
        rng.random_range(lo[2]..hi[2]),
    ]
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn lerp(a: &[f64; 3], b: &[f64; 3], s: f64) -> [f64; 3] {
    [a[0] + s * (b[0] - a[0]), a[1] + s * (b[1] - a[1]), a[2] + s * (b[2] - a[2])]
}

/// Noiseless box and depth of an object in camera `k`; `None` if it leaves
/// the image or passes behind the camera.
fn project_box(
    world: &[f64; 3],
    extent: &[f64; 2],
    pose_inv: &RigidTransform,
    intr: &Intrinsics,
    image: &[f64; 2],
) -> Option<(BBox, f64)> {
    let x = pose_inv.apply(&Vector3::from(*world));
    if x.z < 0.1 {
        return None;
    }
    let (u, v) = intr.project(&x);
    let hw = intr.fx * extent[0] / (2.0 * x.z);
    let hh = intr.fy * extent[1] / (2.0 * x.z);
    let b = BBox::new(u - hw, v - hh, u + hw, v + hh);
    (b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= image[0] && b.y2 <= image[1]).then_some((b, x.z))
}

fn overlaps(a: &BBox, b: &BBox) -> bool {
    a.x1 < b.x2 && b.x1 < a.x2 && a.y1 < b.y2 && b.y1 < a.y2
}

struct Placed {
    class_id: ClassId,
    boxes: Vec<BBox>,
}

/// Deterministic world generation; retries placement until every object
/// stays in view and static boxes never overlap.
pub fn generate_world(spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for _ in 0..WORLD_ATTEMPTS {
        if let Some(world) = try_generate(spec, &mut rng)? {
            return Ok(world);
        }
    }
    Err(Error::validation(format!(
        "could not place {} static and {} dynamic objects in view after {WORLD_ATTEMPTS} attempts",
        spec.n_static, spec.n_dynamic
    )))
}

fn try_generate(spec: &WorldSpec, rng: &mut ChaCha8Rng) -> Result<Option<World>> {
    let intr = spec.intrinsics();
    let poses: Vec<RigidTransform> = (0..spec.n_frames).map(|k| spec.camera.pose(k)).collect();
    let inverses: Vec<RigidTransform> = poses.iter().map(RigidTransform::inverse).collect();
    let extent_at = |z: f64| spec.object_box_px * z / intr.fx.max(intr.fy);

    let mut static_classes: Vec<ClassId> = (0..STATIC_CLASS_NAMES.len() as ClassId).collect();
    static_classes.shuffle(rng);
    let mut objects: Vec<ObjectTruth> = Vec::new();
    let mut placed: Vec<Placed> = Vec::new();
    for i in 0..spec.n_static {
        let class_id = if spec.unique_static_classes {
            static_classes[i]
        } else {
            *static_classes.choose(rng).expect("nonempty")
        };
        let mut ok = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let p = uniform_point(rng, &spec.volume_min, &spec.volume_max);
            if objects.iter().any(|o| dist(&o.positions[0], &p) < spec.min_separation) {
                continue;
            }
            let extent = [extent_at(p[2]); 2];
            let Some(boxes) = inverses
                .iter()
                .map(|inv| project_box(&p, &extent, inv, &intr, &spec.image_size).map(|b| b.0))
                .collect::<Option<Vec<_>>>()
            else {
                continue;
            };
            // Distinct objects never overlap in one frame, and same-class
            // objects never overlap across frames.
            let clash = placed.iter().any(|q| {
                boxes.iter().enumerate().any(|(k, b)| {
                    overlaps(b, &q.boxes[k]) || (q.class_id == class_id && q.boxes.iter().any(|c| overlaps(b, c)))
                })
            });
            if !clash {
                ok = Some((p, extent, boxes));
                break;
            }
        }
        let Some((p, extent, boxes)) = ok else {
            return Ok(None);
        };
        placed.push(Placed { class_id, boxes });
        objects.push(ObjectTruth {
            object_id: i as u32,
            class_id,
            kind: ClassKind::Static,
            extent,
            positions: vec![p; spec.n_frames as usize],
        });
    }

    let mut dynamic_classes: Vec<ClassId> = (0..DYNAMIC_CLASS_NAMES.len() as ClassId)
        .map(|c| c + DYNAMIC_CLASS_BASE)
        .collect();
    dynamic_classes.shuffle(rng);
    let statics: Vec<[f64; 3]> = objects.iter().map(|o| o.positions[0]).collect();
    for j in 0..spec.n_dynamic {
        let Some((positions, extent)) = dynamic_trajectory(spec, rng, &statics, &inverses, &intr) else {
            return Ok(None);
        };
        objects.push(ObjectTruth {
            object_id: (spec.n_static + j) as u32,
            class_id: dynamic_classes[j],
            kind: ClassKind::Dynamic,
            extent,
            positions,
        });
    }
    Ok(Some(render(spec, rng, objects, &poses, &inverses, &intr)?))
}

/// Start anywhere, turn at a random waypoint and end next to a target static
/// object that stays the uniquely nearest one.
fn dynamic_trajectory(
    spec: &WorldSpec,
    rng: &mut ChaCha8Rng,
    statics: &[[f64; 3]],
    inverses: &[RigidTransform],
    intr: &Intrinsics,
) -> Option<(Vec<[f64; 3]>, [f64; 2])> {
    let n = spec.n_frames as usize;
    for _ in 0..PLACEMENT_ATTEMPTS {
        let target = rng.random_range(0..statics.len());
        let end = offset(rng, &statics[target], 0.05, 0.2);
        let start = uniform_point(rng, &spec.volume_min, &spec.volume_max);
        let mid = (n >= 3).then(|| uniform_point(rng, &spec.volume_min, &spec.volume_max));
        let positions: Vec<[f64; 3]> = (0..n)
            .map(|k| {
                if n == 1 {
                    return end;
                }
                let s = k as f64 / (n - 1) as f64;
                match mid {
                    Some(m) if s <= 0.5 => lerp(&start, &m, s * 2.0),
                    Some(m) => lerp(&m, &end, s * 2.0 - 1.0),
                    None => lerp(&start, &end, s),
                }
            })
            .collect();
        let closest: Vec<f64> = statics
            .iter()
            .map(|s| positions.iter().map(|p| dist(p, s)).fold(f64::INFINITY, f64::min))
            .collect();
        let beaten = closest
            .iter()
            .enumerate()
            .all(|(i, d)| i == target || *d >= closest[target] + spec.nearest_margin);
        let extent = [spec.object_box_px * positions[0][2] / intr.fx.max(intr.fy); 2];
        let visible = inverses
            .iter()
            .zip(&positions)
            .all(|(inv, p)| project_box(p, &extent, inv, intr, &spec.image_size).is_some());
        if beaten && visible {
            return Some((positions, extent));
        }
    }
    None
}

/// A point at distance in `[lo, hi]` from `p`, displaced mostly sideways.
fn offset(rng: &mut ChaCha8Rng, p: &[f64; 3], lo: f64, hi: f64) -> [f64; 3] {
    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    let r = rng.random_range(lo..hi);
    let dy = rng.random_range(-0.25..0.25) * r;
    let h = (r * r - dy * dy).sqrt();
    [p[0] + h * theta.cos(), p[1] + dy, p[2] + h * theta.sin()]
}

fn render(
    spec: &WorldSpec,
    rng: &mut ChaCha8Rng,
    objects: Vec<ObjectTruth>,
    poses: &[RigidTransform],
    inverses: &[RigidTransform],
    intr: &Intrinsics,
) -> Result<World> {
    let features: Vec<Vec<f64>> = objects
        .iter()
        .map(|o| {
            class_prototype(o.class_id, spec.feature_dim)
                .into_iter()
                .map(|x| {
                    let z: f64 = StandardNormal.sample(rng);
                    x + spec.feature_noise * z
                })
                .collect()
        })
        .collect();
    let bbox_noise = Normal::new(0.0, spec.noise.bbox_px).map_err(|e| Error::validation(e.to_string()))?;
    let depth_noise = Normal::new(0.0, spec.noise.depth).map_err(|e| Error::validation(e.to_string()))?;
    let mut detections = Vec::new();
    let mut detection_objects = Vec::new();
    for (k, inv) in inverses.iter().enumerate() {
        // Statics come first because objects are stored that way.
        for (o, feature) in objects.iter().zip(&features) {
            let (b, z) = project_box(&o.positions[k], &o.extent, inv, intr, &spec.image_size)
                .ok_or_else(|| Error::Internal("object left the view after placement".into()))?;
            let mut corners = [b.x1, b.y1, b.x2, b.y2];
            if spec.noise.bbox_px > 0.0 {
                for c in corners.iter_mut() {
                    *c += bbox_noise.sample(rng);
                }
                let (cx, cy) = ((corners[0] + corners[2]) / 2.0, (corners[1] + corners[3]) / 2.0);
                corners[0] = corners[0].min(cx - 0.5);
                corners[2] = corners[2].max(cx + 0.5);
                corners[1] = corners[1].min(cy - 0.5);
                corners[3] = corners[3].max(cy + 0.5);
            }
            let depth = if spec.noise.depth > 0.0 {
                (z + depth_noise.sample(rng)).max(0.05)
            } else {
                z
            };
            let motion_feature = (o.kind == ClassKind::Dynamic).then(|| motion_feature(o, k, spec.motion_dim));
            detections.push(DetectionRecord {
                video_id: spec.video_id.clone(),
                frame_index: k as u32,
                class_id: o.class_id,
                bbox: corners,
                depth,
                feature: feature.clone(),
                motion_feature,
            });
            detection_objects.push(o.object_id);
        }
    }
    let truth = GroundTruth {
        video_id: spec.video_id.clone(),
        n_frames: spec.n_frames,
        max_frames: spec.max_frames(),
        detection_objects,
        poses: poses
            .iter()
            .enumerate()
            .map(|(k, pose)| FramePose {
                frame_index: k as u32,
                pose: *pose,
            })
            .collect(),
        objects,
        reach_radius: spec.reach_radius,
    };
    Ok(World {
        spec: spec.clone(),
        detections,
        truth,
    })
}

/// World velocity at frame `k` (forward difference, backward at the end)
/// followed by its norm, zero-padded or truncated to `dim`.
fn motion_feature(o: &ObjectTruth, k: usize, dim: usize) -> Vec<f64> {
    let n = o.positions.len();
    let v = if n < 2 {
        [0.0; 3]
    } else {
        let (a, b) = if k + 1 < n { (k, k + 1) } else { (k - 1, k) };
        let (p, q) = (o.positions[a], o.positions[b]);
        [q[0] - p[0], q[1] - p[1], q[2] - p[2]]
    };
    let speed = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    let mut out: Vec<f64> = vec![v[0], v[1], v[2], speed];
    out.resize(dim, 0.0);
    out
}

/// The true partition of static detections, one class per world object,
/// members ascending.
pub fn oracle_merge(truth: &GroundTruth) -> Vec<Vec<NodeId>> {
    let mut classes: BTreeMap<u32, Vec<NodeId>> = BTreeMap::new();
    for (node, obj) in truth.detection_objects.iter().enumerate() {
        if truth.object(*obj).kind == ClassKind::Static {
            classes.entry(*obj).or_default().push(node as NodeId);
        }
    }
    classes.into_values().collect()
}

/// The compactor's partition of static detections after registration.
pub fn compactor_partition(graph: &SceneGraph25D, params: &MatchParams) -> Result<Vec<Vec<NodeId>>> {
    let registered = register_frames(graph, params)?;
    Ok(build_ancestors(&registered, params).classes().into_values().collect())
}

/// Detections whose predicted class is paired with their true class under a
/// greedy one-to-one pairing by overlap (largest first, then lowest ids).
pub fn agreeing_detections(predicted: &[Vec<NodeId>], oracle: &[Vec<NodeId>]) -> usize {
    let truth_of: BTreeMap<NodeId, usize> = oracle
        .iter()
        .enumerate()
        .flat_map(|(c, m)| m.iter().map(move |n| (*n, c)))
        .collect();
    let mut overlap: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (p, members) in predicted.iter().enumerate() {
        for n in members {
            if let Some(t) = truth_of.get(n) {
                *overlap.entry((p, *t)).or_default() += 1;
            }
        }
    }
    let mut pairs: Vec<((usize, usize), usize)> = overlap.into_iter().collect();
    pairs.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let (mut used_p, mut used_t) = (vec![false; predicted.len()], vec![false; oracle.len()]);
    let mut agree = 0;
    for ((p, t), count) in pairs {
        if !used_p[p] && !used_t[t] {
            used_p[p] = true;
            used_t[t] = true;
            agree += count;
        }
    }
    agree
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QaTask {
    NearestStatic,
    VisitedOrder,
    CountDynamic,
}

impl QaTask {
    pub fn token(self) -> Token {
        match self {
            QaTask::NearestStatic => 1,
            QaTask::VisitedOrder => 2,
            QaTask::CountDynamic => 3,
        }
    }

    pub fn from_token(t: Token) -> Option<Self> {
        match t {
            1 => Some(QaTask::NearestStatic),
            2 => Some(QaTask::VisitedOrder),
            3 => Some(QaTask::CountDynamic),
            _ => None,
        }
    }
}

/// How a generated answer follows from the world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaDerivation {
    pub video_id: String,
    pub task: QaTask,
    /// Dynamic object asked about, or the static object for counts.
    pub subject: u32,
    pub answer_object: Option<u32>,
    pub answer_count: Option<usize>,
}

/// Frame-wise closest approach of each trajectory to each point.
fn closest_approach(path: &[[f64; 3]], p: &[f64; 3]) -> f64 {
    path.iter().map(|q| dist(q, p)).fold(f64::INFINITY, f64::min)
}

fn first_reach(path: &[[f64; 3]], p: &[f64; 3], radius: f64) -> Option<usize> {
    path.iter().position(|q| dist(q, p) <= radius)
}

struct Answer {
    tokens: Vec<Token>,
    object: Option<u32>,
    count: Option<usize>,
}

fn answer_for(truth: &GroundTruth, task: QaTask, subject: &ObjectTruth) -> Result<Option<Answer>> {
    let statics: Vec<&ObjectTruth> = truth.statics().collect();
    match task {
        QaTask::NearestStatic => {
            let mut d: Vec<(f64, &ObjectTruth)> = statics
                .iter()
                .map(|s| (closest_approach(&subject.positions, &s.positions[0]), *s))
                .collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0));
            // Ambiguous when the runner-up of a different class is nearly as close.
            let clear = d.len() == 1 || d.iter().skip(1).all(|(x, s)| s.class_id == d[0].1.class_id || *x > d[0].0 + 1e-6);
            Ok(clear.then(|| Answer {
                tokens: vec![class_token(d[0].1.class_id).expect("static class")],
                object: Some(d[0].1.object_id),
                count: None,
            }))
        }
        QaTask::VisitedOrder => {
            let reached: Vec<(usize, &ObjectTruth)> = statics
                .iter()
                .filter_map(|s| first_reach(&subject.positions, &s.positions[0], truth.reach_radius).map(|f| (f, *s)))
                .collect();
            let Some(first) = reached.iter().map(|r| r.0).min() else {
                return Ok(None);
            };
            let at_first: Vec<&ObjectTruth> = reached.iter().filter(|r| r.0 == first).map(|r| r.1).collect();
            let unique = at_first.iter().all(|s| s.class_id == at_first[0].class_id);
            Ok(unique.then(|| Answer {
                tokens: vec![class_token(at_first[0].class_id).expect("static class")],
                object: Some(at_first[0].object_id),
                count: None,
            }))
        }
        QaTask::CountDynamic => {
            let unique = statics.iter().filter(|s| s.class_id == subject.class_id).count() == 1;
            if !unique {
                return Ok(None);
            }
            let count = truth
                .dynamics()
                .filter(|d| first_reach(&d.positions, &subject.positions[0], truth.reach_radius).is_some())
                .count();
            Ok(Some(Answer {
                tokens: vec![count_token(count)?],
                object: None,
                count: Some(count),
            }))
        }
    }
}

/// Up to `n_instances` questions about one world, cycling over the objects
/// a question can be asked about. Distractors are other classes present in
/// the world first, then random ones.
pub fn generate_qa(world: &World, task: QaTask, n_instances: usize, seed: u64) -> Result<Vec<(QaInstance, QaDerivation)>> {
    let truth = &world.truth;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let statics: Vec<&ObjectTruth> = truth.statics().collect();
    if task != QaTask::CountDynamic && statics.len() < 2 {
        return Err(Error::validation("task needs at least two static objects"));
    }
    let subjects: Vec<&ObjectTruth> = match task {
        QaTask::CountDynamic => statics.clone(),
        _ => truth.dynamics().collect(),
    };
    let mut answerable = Vec::new();
    for s in subjects {
        if let Some(a) = answer_for(truth, task, s)? {
            answerable.push((s, a));
        }
    }
    if answerable.is_empty() {
        return Err(Error::validation(format!("world {} has nothing to ask for {task:?}", truth.video_id)));
    }
    let mut out = Vec::with_capacity(n_instances);
    for i in 0..n_instances {
        let (subject, answer) = &answerable[i % answerable.len()];
        let question = vec![task.token(), class_token(subject.class_id)?];
        let pool: Vec<Token> = match task {
            QaTask::CountDynamic => (0..=MAX_COUNT).map(|c| COUNT_TOKEN_BASE + c as Token).collect(),
            _ => (0..STATIC_CLASS_NAMES.len() as Token).map(|c| STATIC_TOKEN_BASE + c).collect(),
        };
        let gt = answer.tokens[0];
        let mut present: Vec<Token> = Vec::new();
        if task != QaTask::CountDynamic {
            for s in &statics {
                let t = class_token(s.class_id)?;
                if t != gt && !present.contains(&t) {
                    present.push(t);
                }
            }
            present.shuffle(&mut rng);
        }
        let mut rest: Vec<Token> = pool.into_iter().filter(|t| *t != gt && !present.contains(t)).collect();
        rest.shuffle(&mut rng);
        let mut candidates: Vec<Vec<Token>> = present
            .into_iter()
            .chain(rest)
            .take(CANDIDATES - 1)
            .map(|t| vec![t])
            .collect();
        candidates.push(answer.tokens.clone());
        candidates.shuffle(&mut rng);
        let gt_index = candidates.iter().position(|c| *c == answer.tokens).expect("inserted");
        out.push((
            QaInstance {
                video_id: truth.video_id.clone(),
                question,
                candidates,
                gt_index,
            },
            QaDerivation {
                video_id: truth.video_id.clone(),
                task,
                subject: subject.object_id,
                answer_object: answer.object,
                answer_count: answer.count,
            },
        ));
    }
    Ok(out)
}

/// Answers a generated question from a registered, compacted graph alone.
pub fn solve_from_graph(graph: &SceneGraph25D, inst: &QaInstance, reach_radius: f64) -> Result<Vec<Token>> {
    let task = inst
        .question
        .first()
        .and_then(|t| QaTask::from_token(*t))
        .ok_or_else(|| Error::validation("question does not start with a task token"))?;
    let subject = *inst
        .question
        .get(1)
        .ok_or_else(|| Error::validation("question lacks a subject token"))?;
    let token_of = |id: &NodeId| class_token(graph.nodes[id].class_id);
    let statics: Vec<NodeId> = graph.static_nodes.iter().copied().collect();
    let path_of = |class_token_wanted: Token| -> Result<Vec<(u32, [f64; 3])>> {
        let mut path = Vec::new();
        for id in &graph.dynamic_nodes {
            if token_of(id)? == class_token_wanted {
                let n = &graph.nodes[id];
                path.push((n.first_frame(), n.centroid3d));
            }
        }
        path.sort_by_key(|p| p.0);
        Ok(path)
    };
    match task {
        QaTask::NearestStatic => {
            let path = path_of(subject)?;
            let best = statics
                .iter()
                .map(|s| {
                    let p = graph.nodes[s].centroid3d;
                    (path.iter().map(|q| dist(&q.1, &p)).fold(f64::INFINITY, f64::min), *s)
                })
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
                .ok_or_else(|| Error::validation("graph has no static nodes"))?;
            Ok(vec![token_of(&best.1)?])
        }
        QaTask::VisitedOrder => {
            let path = path_of(subject)?;
            for (_, q) in &path {
                if let Some(s) = statics
                    .iter()
                    .find(|s| dist(q, &graph.nodes[*s].centroid3d) <= reach_radius)
                {
                    return Ok(vec![token_of(s)?]);
                }
            }
            Err(Error::validation("subject never reaches a static object"))
        }
        QaTask::CountDynamic => {
            let target = statics
                .iter()
                .find(|s| token_of(s).is_ok_and(|t| t == subject))
                .ok_or_else(|| Error::validation("static subject not in graph"))?;
            let p = graph.nodes[target].centroid3d;
            let mut classes: Vec<ClassId> = graph
                .dynamic_nodes
                .iter()
                .filter(|d| dist(&graph.nodes[*d].centroid3d, &p) <= reach_radius)
                .map(|d| graph.nodes[d].class_id)
                .collect();
            classes.sort_unstable();
            classes.dedup();
            Ok(vec![count_token(classes.len())?])
        }
    }
}

/// Many worlds from one template plus questions about each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub world: WorldSpec,
    pub n_worlds: usize,
    #[serde(default = "default_task")]
    pub task: QaTask,
    #[serde(default = "default_per_world")]
    pub questions_per_world: usize,
    /// Cycled over worlds when present, overriding the template camera.
    #[serde(default)]
    pub cameras: Vec<CameraMotion>,
}

fn default_task() -> QaTask {
    QaTask::NearestStatic
}

fn default_per_world() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub worlds: Vec<World>,
    pub qa: Vec<QaInstance>,
    pub derivations: Vec<QaDerivation>,
}

impl Corpus {
    pub fn detections(&self) -> impl Iterator<Item = &DetectionRecord> {
        self.worlds.iter().flat_map(|w| w.detections.iter())
    }

    pub fn truths(&self) -> Vec<&GroundTruth> {
        self.worlds.iter().map(|w| &w.truth).collect()
    }
}

pub fn world_spec_for(spec: &CorpusSpec, i: usize) -> WorldSpec {
    let mut w = spec.world.clone();
    w.seed = spec.world.seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
    w.video_id = format!("{}{i:04}", spec.world.video_id);
    if !spec.cameras.is_empty() {
        w.camera = spec.cameras[i % spec.cameras.len()];
    }
    w
}

pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    use rayon::prelude::*;
    let worlds = (0..spec.n_worlds)
        .into_par_iter()
        .map(|i| generate_world(&world_spec_for(spec, i)))
        .collect::<Result<Vec<_>>>()?;
    let mut qa = Vec::new();
    let mut derivations = Vec::new();
    if spec.questions_per_world > 0 {
        for w in &worlds {
            for (inst, der) in generate_qa(w, spec.task, spec.questions_per_world, w.spec.seed ^ 0x9a9a)? {
                qa.push(inst);
                derivations.push(der);
            }
        }
    }
    Ok(Corpus {
        worlds,
        qa,
        derivations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compactor::compact;

    fn spec(n_static: usize, n_dynamic: usize, n_frames: u32) -> WorldSpec {
        WorldSpec {
            seed: 7,
            n_static,
            n_dynamic,
            n_frames,
            ..WorldSpec::default()
        }
    }

    #[test]
    fn stationary_noiseless_world_repeats_boxes() {
        let w = generate_world(&spec(1, 0, 10)).unwrap();
        assert_eq!(w.detections.len(), 10);
        assert!(w
            .detections
            .iter()
            .all(|d| d.bbox == w.detections[0].bbox && d.depth == w.detections[0].depth));
        assert_eq!(oracle_merge(&w.truth), vec![(0..10).collect::<Vec<_>>()]);
    }

    #[test]
    fn lifted_centers_are_exact() {
        let w = generate_world(&spec(3, 2, 4)).unwrap();
        let g = w.graph().unwrap();
        for (id, node) in &g.nodes {
            let obj = w.truth.object(w.truth.detection_objects[*id as usize]);
            let k = node.first_frame() as usize;
            let cam = w.truth.poses[k].pose.inverse().apply_array(obj.positions[k]);
            for i in 0..3 {
                assert!((cam[i] - node.centroid3d[i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn translating_poses_match_the_camera() {
        let mut s = spec(4, 1, 5);
        s.camera = CameraMotion::Translating {
            velocity: [0.1, 0.0, 0.0],
        };
        let w = generate_world(&s).unwrap();
        for fp in &w.truth.poses {
            assert_eq!(fp.pose.translation.x, 0.1 * fp.frame_index as f64);
            assert_eq!(fp.pose.rotation, Matrix3::identity());
        }
    }

    #[test]
    fn same_seed_same_world() {
        let s = spec(5, 2, 4);
        assert_eq!(generate_world(&s).unwrap(), generate_world(&s).unwrap());
        let mut t = s.clone();
        t.seed = 8;
        assert_ne!(generate_world(&s).unwrap().detections, generate_world(&t).unwrap().detections);
    }

    #[test]
    fn infeasible_spec_errors() {
        let mut s = spec(20, 0, 3);
        s.object_box_px = 300.0;
        assert!(generate_world(&s).is_err());
        assert!(generate_world(&spec(0, 1, 3)).is_err());
    }

    #[test]
    fn same_class_objects_stay_apart() {
        let mut s = spec(2, 0, 3);
        s.unique_static_classes = false;
        for seed in 0..200 {
            s.seed = seed;
            let w = generate_world(&s).unwrap();
            if w.truth.objects[0].class_id == w.truth.objects[1].class_id {
                assert_eq!(oracle_merge(&w.truth).len(), 2);
                let g = w.graph().unwrap();
                let p = compactor_partition(&g, &MatchParams::default()).unwrap();
                assert_eq!(p, oracle_merge(&w.truth));
                return;
            }
        }
        panic!("no world with repeated class");
    }

    #[test]
    fn nearest_static_answers_are_solvable() {
        for seed in 0..20 {
            let mut s = spec(5, 2, 4);
            s.seed = seed;
            let w = generate_world(&s).unwrap();
            let compacted = compact(&w.graph().unwrap(), &MatchParams::default()).unwrap();
            for task in [QaTask::NearestStatic, QaTask::VisitedOrder, QaTask::CountDynamic] {
                let Ok(qa) = generate_qa(&w, task, 4, seed) else {
                    continue;
                };
                for (inst, _) in qa {
                    assert_eq!(inst.candidates.len(), CANDIDATES);
                    inst.validate(VOCAB_SIZE).unwrap();
                    let got = solve_from_graph(&compacted, &inst, s.reach_radius).unwrap();
                    assert_eq!(&got, inst.gt_tokens(), "{task:?} seed {seed}");
                }
            }
        }
    }

    #[test]
    fn greedy_agreement() {
        let oracle = vec![vec![0, 1, 2], vec![3, 4]];
        assert_eq!(agreeing_detections(&oracle, &oracle), 5);
        assert_eq!(agreeing_detections(&[vec![0, 1, 2, 3, 4]], &oracle), 3);
        assert_eq!(agreeing_detections(&[vec![0, 1], vec![2], vec![3, 4]], &oracle), 4);
    }

    #[test]
    fn tokens_are_disjoint() {
        assert_eq!(class_token(0).unwrap(), 10);
        assert_eq!(class_token(DYNAMIC_CLASS_BASE).unwrap(), 40);
        assert!(class_token(99).is_err());
        assert_eq!(count_token(9).unwrap(), 79);
        assert!(count_token(10).is_err());
        assert_eq!(builtin_registry().len(), 40);
    }
}
