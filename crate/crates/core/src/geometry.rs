//! Depth lifting and frame-to-frame rigid registration.

use nalgebra::{Matrix3, Vector3, SVD};
use serde::{Deserialize, Serialize};

use crate::compactor::{criterion, MatchParams};
use crate::error::{Error, Result};
use crate::graph::{BBox, NodeId, SceneGraph25D};

/// Pinhole intrinsics in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    /// Uncalibrated default: focal length `max(w, h)`, principal point at the image center.
    pub fn for_image(width: f64, height: f64) -> Self {
        let f = width.max(height);
        Intrinsics {
            fx: f,
            fy: f,
            cx: width / 2.0,
            cy: height / 2.0,
        }
    }

    /// Pixel coordinates of a camera-frame point.
    pub fn project(&self, p: &Vector3<f64>) -> (f64, f64) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }
}

impl Default for Intrinsics {
    fn default() -> Self {
        Intrinsics::for_image(640.0, 480.0)
    }
}

/// Back-projects the center of `bbox` at the given depth.
pub fn lift_centroid(bbox: &BBox, depth: f64, intr: &Intrinsics) -> Result<[f64; 3]> {
    if !(depth > 0.0) || !depth.is_finite() {
        return Err(Error::validation(format!("depth must be positive, got {depth}")));
    }
    bbox.validate()?;
    let (u, v) = bbox.center();
    Ok([
        (u - intr.cx) * depth / intr.fx,
        (v - intr.cy) * depth / intr.fy,
        depth,
    ])
}

/// `x ↦ R·x + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        RigidTransform {
            rotation,
            translation,
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn apply_array(&self, p: [f64; 3]) -> [f64; 3] {
        let q = self.apply(&Vector3::from(p));
        [q.x, q.y, q.z]
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Checks `RᵀR = I` and `det R = 1` within `tol`.
    pub fn is_proper(&self, tol: f64) -> bool {
        let ortho = (self.rotation.transpose() * self.rotation - Matrix3::identity()).norm();
        ortho <= tol && (self.rotation.determinant() - 1.0).abs() <= tol
    }

    pub fn rotation_distance(&self, other: &RigidTransform) -> f64 {
        (self.rotation - other.rotation).norm()
    }

    pub fn translation_distance(&self, other: &RigidTransform) -> f64 {
        (self.translation - other.translation).norm()
    }
}

/// Least-squares rigid alignment `dst ≈ R·src + t`.
///
/// Centroid subtraction, SVD of the cross-covariance, reflection correction.
/// Fewer than three pairs or a rank-deficient (collinear) configuration
/// returns the identity.
pub fn estimate_rigid(src: &[[f64; 3]], dst: &[[f64; 3]]) -> Result<RigidTransform> {
    if src.len() != dst.len() {
        return Err(Error::validation(format!(
            "correspondence lists differ in length: {} vs {}",
            src.len(),
            dst.len()
        )));
    }
    if src.len() < 3 {
        return Ok(RigidTransform::identity());
    }
    let n = src.len() as f64;
    let centroid = |pts: &[[f64; 3]]| pts.iter().fold(Vector3::zeros(), |acc, p| acc + Vector3::from(*p)) / n;
    let cs = centroid(src);
    let cd = centroid(dst);

    let mut cov = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        cov += (Vector3::from(*s) - cs) * (Vector3::from(*d) - cd).transpose();
    }

    let svd = SVD::new(cov, true, true);
    let mut sv = svd.singular_values;
    sv.as_mut_slice().sort_by(|a, b| b.total_cmp(a));
    if !(sv[0] > 0.0) || sv[1] <= 1e-12 * sv[0] {
        return Ok(RigidTransform::identity());
    }
    let (Some(u), Some(v_t)) = (svd.u, svd.v_t) else {
        return Err(Error::Numeric("SVD failed to produce singular vectors".into()));
    };
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let correction = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let rotation = v * correction * u.transpose();
    let translation = cd - rotation * cs;
    Ok(RigidTransform {
        rotation,
        translation,
    })
}

/// Pose of one frame: maps that frame's camera coordinates into the first frame's.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FramePose {
    pub frame_index: u32,
    pub pose: RigidTransform,
}

/// Static-node correspondences between two consecutive frames: for each
/// static node of `curr`, the `prev` node satisfying the match criterion
/// nearest in (unregistered) 3D, lower id on ties.
pub fn consecutive_correspondences(
    graph: &SceneGraph25D,
    prev: u32,
    curr: u32,
    params: &MatchParams,
) -> Vec<(NodeId, NodeId)> {
    let candidates = graph.static_in_frame(prev);
    let mut pairs = Vec::new();
    for v_id in graph.static_in_frame(curr) {
        let v = &graph.nodes[&v_id];
        let mut best: Option<(f64, NodeId)> = None;
        for &w_id in &candidates {
            let w = &graph.nodes[&w_id];
            if !criterion(v, w, params) {
                continue;
            }
            let d = distance(&v.centroid3d, &w.centroid3d);
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, w_id));
            }
        }
        if let Some((_, w_id)) = best {
            pairs.push((v_id, w_id));
        }
    }
    pairs
}

pub(crate) fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Per-frame poses obtained by chaining consecutive-frame rigid estimates.
pub fn estimate_poses(graph: &SceneGraph25D, params: &MatchParams) -> Result<Vec<FramePose>> {
    let mut poses = Vec::with_capacity(graph.frames.len());
    let mut current = RigidTransform::identity();
    for (i, frame) in graph.frames.iter().enumerate() {
        if i > 0 {
            let prev = graph.frames[i - 1].frame_index;
            let pairs = consecutive_correspondences(graph, prev, frame.frame_index, params);
            let src: Vec<[f64; 3]> = pairs.iter().map(|(v, _)| graph.nodes[v].centroid3d).collect();
            let dst: Vec<[f64; 3]> = pairs.iter().map(|(_, w)| graph.nodes[w].centroid3d).collect();
            let step = estimate_rigid(&src, &dst)?;
            current = current.compose(&step);
        }
        poses.push(FramePose {
            frame_index: frame.frame_index,
            pose: current,
        });
    }
    Ok(poses)
}

/// Expresses every node centroid in the first frame's coordinates.
///
/// Nodes are moved by the pose of their first observed frame. Boxes,
/// features, timestamps and ids are untouched.
pub fn register_frames(graph: &SceneGraph25D, params: &MatchParams) -> Result<SceneGraph25D> {
    Ok(register_frames_with_poses(graph, params)?.0)
}

pub fn register_frames_with_poses(
    graph: &SceneGraph25D,
    params: &MatchParams,
) -> Result<(SceneGraph25D, Vec<FramePose>)> {
    let poses = estimate_poses(graph, params)?;
    let mut out = graph.clone();
    for node in out.nodes.values_mut() {
        let first = node.first_frame();
        let idx = poses
            .binary_search_by_key(&first, |p| p.frame_index)
            .map_err(|_| Error::Internal(format!("node {} has no frame pose", node.node_id)))?;
        node.centroid3d = poses[idx].pose.apply_array(node.centroid3d);
    }
    Ok((out, poses))
}
