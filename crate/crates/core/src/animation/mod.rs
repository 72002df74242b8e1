//! Keypoints to joint rotations: shortest-arc retargeting, roll recovery,
//! finger limits, quaternion smoothing, forward kinematics and BVH export.
//!
//! Every non-root joint `j` carries the rotation of the bone ending at `j`,
//! expressed in its parent's frame: `W(j) = W(p) * L(j)` and
//! `pos(j) = pos(p) + W(j) * rest_offset(j)`.

pub mod bvh;

use nalgebra::{Matrix3, Quaternion, Unit, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::skeleton::{PoseSequence, SkeletonTopology, Vec3};

pub use bvh::{bvh_joint_positions, bvh_to_rotations, export_bvh, to_bvh, Bvh};

pub type Quat = UnitQuaternion<f64>;

pub const UNIT_TOLERANCE: f64 = 1e-9;
pub const DEFAULT_SMOOTHING_WINDOW: usize = 5;
/// Bones shorter than this have no usable direction.
const MIN_BONE: f64 = 1e-12;
/// Below this the twist about a bone axis is treated as unobservable.
const TWIST_DEGENERATE: f64 = 1e-9;
const LIMIT_SLACK: f64 = 1e-9;

pub fn vec3(v: Vec3) -> Vector3<f64> {
    Vector3::new(v[0], v[1], v[2])
}

/// Same rotation as `q`, on the hemisphere of `reference`.
pub fn align_hemisphere(q: Quat, reference: &Quat) -> Quat {
    if q.coords.dot(&reference.coords) < 0.0 {
        Quat::new_unchecked(-q.into_inner())
    } else {
        q
    }
}

/// Minimal rotation taking unit vector `from` onto unit vector `to`.
pub fn shortest_arc(from: &Vector3<f64>, to: &Vector3<f64>) -> Quat {
    let d = from.dot(to);
    if d < -1.0 + 1e-12 {
        // half turn about any axis perpendicular to `from`
        let helper = if from.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        let axis = Unit::new_normalize(from.cross(&helper));
        return Quat::from_axis_angle(&axis, std::f64::consts::PI);
    }
    let c = from.cross(to);
    Quat::new_normalize(Quaternion::new(1.0 + d, c.x, c.y, c.z))
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointRotationSequence {
    rotations: Vec<Vec<Quat>>,
    fps: f64,
}

impl JointRotationSequence {
    pub fn new(rotations: Vec<Vec<Quat>>, fps: f64) -> Result<Self> {
        if rotations.is_empty() {
            return Err(Error::InsufficientFrames { needed: 1, got: 0 });
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(Error::InvalidInput(format!("fps must be > 0, got {fps}")));
        }
        let j = rotations[0].len();
        for (t, frame) in rotations.iter().enumerate() {
            if frame.len() != j {
                return Err(Error::Shape(format!("frame {t} has {} rotations, frame 0 has {j}", frame.len())));
            }
            if let Some(q) = frame.iter().find(|q| (q.coords.norm() - 1.0).abs() > UNIT_TOLERANCE) {
                return Err(Error::InvalidInput(format!(
                    "frame {t}: quaternion norm {} is not 1",
                    q.coords.norm()
                )));
            }
        }
        Ok(Self { rotations, fps })
    }

    pub fn identity(frames: usize, joints: usize, fps: f64) -> Result<Self> {
        Self::new(vec![vec![Quat::identity(); joints]; frames], fps)
    }

    pub fn rotations(&self) -> &[Vec<Quat>] {
        &self.rotations
    }

    pub fn frame(&self, t: usize) -> &[Quat] {
        &self.rotations[t]
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn len(&self) -> usize {
        self.rotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rotations.is_empty()
    }

    pub fn joint_count(&self) -> usize {
        self.rotations[0].len()
    }

    fn check(&self, topo: &SkeletonTopology) -> Result<()> {
        if self.joint_count() != topo.joint_count() {
            return Err(Error::InvalidInput(format!(
                "{} rotations per frame, topology {} has {} joints",
                self.joint_count(),
                topo.name(),
                topo.joint_count()
            )));
        }
        Ok(())
    }
}

fn rest_dir(topo: &SkeletonTopology, j: usize) -> Vector3<f64> {
    let b = topo.bone_of_joint(j).expect("non-root joint has a bone");
    vec3(topo.rest_directions()[b])
}

/// World orientation of every joint for one frame of local rotations.
fn world_rotations(local: &[Quat], topo: &SkeletonTopology) -> Vec<Quat> {
    let mut world = vec![Quat::identity(); local.len()];
    for &j in topo.topological_order() {
        world[j] = match topo.parent(j) {
            Some(p) => world[p] * local[j],
            None => local[j],
        };
    }
    world
}

pub fn forward_kinematics(rotations: &JointRotationSequence, topo: &SkeletonTopology) -> Result<PoseSequence> {
    rotations.check(topo)?;
    let frames = rotations
        .rotations
        .iter()
        .map(|local| {
            let world = world_rotations(local, topo);
            let mut pos = vec![[0.0; 3]; local.len()];
            for &j in topo.topological_order() {
                if let (Some(p), Some(off)) = (topo.parent(j), topo.rest_offset(j)) {
                    let v = world[j] * vec3(off);
                    pos[j] = [pos[p][0] + v.x, pos[p][1] + v.y, pos[p][2] + v.z];
                }
            }
            pos
        })
        .collect();
    PoseSequence::new(frames, rotations.fps)
}

/// Unit direction of every bone in world space, indexed by child joint;
/// `None` for the root and for zero-length bones.
fn bone_directions(frame: &[Vec3], topo: &SkeletonTopology) -> Vec<Option<Vector3<f64>>> {
    (0..topo.joint_count())
        .map(|j| {
            let p = topo.parent(j)?;
            let d = vec3(frame[j]) - vec3(frame[p]);
            let n = d.norm();
            (n.is_finite() && n >= MIN_BONE).then(|| d / n)
        })
        .collect()
}

/// Swing-only local rotations that point every bone along the observed
/// direction. Zero-length bones keep the previous frame's rotation.
pub fn retarget(seq: &PoseSequence, topo: &SkeletonTopology) -> Result<JointRotationSequence> {
    seq.validate(topo)?;
    let k = topo.joint_count();
    let mut out: Vec<Vec<Quat>> = Vec::with_capacity(seq.len());
    for (t, frame) in seq.frames().iter().enumerate() {
        let dirs = bone_directions(frame, topo);
        let mut local = vec![Quat::identity(); k];
        let mut world = vec![Quat::identity(); k];
        for &j in topo.topological_order() {
            let Some(p) = topo.parent(j) else { continue };
            let prev = out.last().map(|f| f[j]);
            local[j] = match dirs[j] {
                Some(d) => {
                    let q = shortest_arc(&rest_dir(topo, j), &(world[p].inverse() * d));
                    prev.map_or(q, |r| align_hemisphere(q, &r))
                }
                None => {
                    log::debug!("frame {t}: zero-length bone at joint {j}, reusing previous rotation");
                    prev.unwrap_or_else(Quat::identity)
                }
            };
            world[j] = world[p] * local[j];
        }
        out.push(local);
    }
    JointRotationSequence::new(out, seq.fps())
}

/// Twist about unit `axis` that best turns the `from` vectors onto the
/// `to` vectors, or zero when unobservable.
fn best_twist(axis: &Vector3<f64>, pairs: &[(Vector3<f64>, Vector3<f64>)]) -> f64 {
    let (mut s, mut c) = (0.0, 0.0);
    for (from, to) in pairs {
        let fp = from - axis * axis.dot(from);
        let tp = to - axis * axis.dot(to);
        if fp.norm() < TWIST_DEGENERATE || tp.norm() < TWIST_DEGENERATE {
            continue;
        }
        s += axis.dot(&fp.cross(&tp));
        c += fp.dot(&tp);
    }
    if s.hypot(c) < TWIST_DEGENERATE {
        0.0
    } else {
        s.atan2(c)
    }
}

/// Re-derives every local rotation as swing followed by a twist about the
/// bone axis, choosing the twist that brings the children's rest
/// directions closest to their observed directions. World bone directions
/// are preserved; leaf joints get no twist.
pub fn solve_roll(rotations: &JointRotationSequence, topo: &SkeletonTopology) -> Result<JointRotationSequence> {
    rotations.check(topo)?;
    let observed = forward_kinematics(rotations, topo)?;
    let k = topo.joint_count();
    let mut out: Vec<Vec<Quat>> = Vec::with_capacity(rotations.len());
    for (t, frame) in observed.frames().iter().enumerate() {
        let dirs = bone_directions(frame, topo);
        let input = &rotations.rotations[t];
        let mut local = vec![Quat::identity(); k];
        let mut world = vec![Quat::identity(); k];
        for &j in topo.topological_order() {
            let Some(p) = topo.parent(j) else {
                local[j] = input[j];
                world[j] = input[j];
                continue;
            };
            let r = rest_dir(topo, j);
            let swing = match dirs[j] {
                Some(d) => shortest_arc(&r, &(world[p].inverse() * d)),
                None => input[j],
            };
            let frame_j = world[p] * swing;
            let pairs: Vec<(Vector3<f64>, Vector3<f64>)> = topo
                .children(j)
                .iter()
                .filter_map(|&c| dirs[c].map(|d| (rest_dir(topo, c), frame_j.inverse() * d)))
                .collect();
            let phi = best_twist(&r, &pairs);
            let q = if phi == 0.0 {
                swing
            } else {
                swing * Quat::from_axis_angle(&Unit::new_unchecked(r), phi)
            };
            let q = Quat::new_normalize(q.into_inner());
            local[j] = match out.last() {
                Some(prev) => align_hemisphere(q, &prev[j]),
                None => align_hemisphere(q, &input[j]),
            };
            world[j] = world[p] * local[j];
        }
        out.push(local);
    }
    JointRotationSequence::new(out, rotations.fps)
}

// ---------------------------------------------------------------------------
// finger limits

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointLimit {
    pub min_flexion: f64,
    pub max_flexion: f64,
    pub min_abduction: f64,
    pub max_abduction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FingerLimits {
    /// `(joint index, limit)`, sorted by joint.
    pub joints: Vec<(usize, JointLimit)>,
}

pub const FINGERS: [&str; 5] = ["thumb", "index", "middle", "ring", "pinky"];
pub const MAX_ABDUCTION: f64 = 0.35;

impl FingerLimits {
    /// Flexion in [0, pi/2] for joints `<side>_<finger>_2..4`; sideways
    /// abduction of +-0.35 rad only at `_2`.
    pub fn default_for(topo: &SkeletonTopology) -> Self {
        let mut joints = Vec::new();
        for (j, joint) in topo.joints().iter().enumerate() {
            let Some((stem, seg)) = joint.name.rsplit_once('_') else { continue };
            let is_finger = FINGERS.iter().any(|f| stem.ends_with(f));
            let abd = match seg {
                "2" => MAX_ABDUCTION,
                "3" | "4" => 0.0,
                _ => continue,
            };
            if is_finger && topo.parent(j).is_some() {
                joints.push((
                    j,
                    JointLimit {
                        min_flexion: 0.0,
                        max_flexion: std::f64::consts::FRAC_PI_2,
                        min_abduction: -abd,
                        max_abduction: abd,
                    },
                ));
            }
        }
        Self { joints }
    }

    pub fn validate(&self, topo: &SkeletonTopology) -> Result<()> {
        for (j, l) in &self.joints {
            if *j >= topo.joint_count() || topo.parent(*j).is_none() {
                return Err(Error::InvalidInput(format!("finger limit on invalid joint {j}")));
            }
            if l.min_flexion > l.max_flexion || l.min_abduction > l.max_abduction {
                return Err(Error::InvalidInput(format!("finger limit for joint {j} has min > max")));
            }
        }
        Ok(())
    }
}

/// Columns: lateral (flexion axis), palm normal (abduction axis), bone axis.
fn bone_basis(axis: &Vector3<f64>) -> Matrix3<f64> {
    let helper = if axis.x.abs() < 0.9 { Vector3::x() } else { Vector3::z() };
    let f = (helper - axis * axis.dot(&helper)).normalize();
    let g = axis.cross(&f);
    Matrix3::from_columns(&[f, g, *axis])
}

/// `(flexion, abduction, twist)` of a local rotation about the bone axis
/// `axis`, with `R = B * Ry(abduction) * Rx(flexion) * Rz(twist) * B^T`.
pub fn finger_angles(q: &Quat, axis: &Vector3<f64>) -> (f64, f64, f64) {
    let b = bone_basis(axis);
    let r = b.transpose() * q.to_rotation_matrix().matrix() * b;
    let flex = (-r[(1, 2)]).clamp(-1.0, 1.0).asin();
    let abd = r[(0, 2)].atan2(r[(2, 2)]);
    let twist = r[(1, 0)].atan2(r[(1, 1)]);
    (flex, abd, twist)
}

pub fn compose_finger(axis: &Vector3<f64>, flex: f64, abd: f64, twist: f64) -> Quat {
    let b = bone_basis(axis);
    let rp = Quat::from_axis_angle(&Vector3::y_axis(), abd)
        * Quat::from_axis_angle(&Vector3::x_axis(), flex)
        * Quat::from_axis_angle(&Vector3::z_axis(), twist);
    let m = b * rp.to_rotation_matrix().matrix() * b.transpose();
    Quat::from_matrix(&m)
}

fn outside(v: f64, lo: f64, hi: f64) -> bool {
    v < lo - LIMIT_SLACK || v > hi + LIMIT_SLACK
}

/// Clamps flexion and abduction of the limited joints; rotations already
/// inside their limits are returned bit for bit.
pub fn apply_finger_limits(
    rotations: &JointRotationSequence,
    topo: &SkeletonTopology,
    limits: &FingerLimits,
) -> Result<JointRotationSequence> {
    rotations.check(topo)?;
    limits.validate(topo)?;
    let mut out = rotations.rotations.clone();
    for frame in &mut out {
        for (j, l) in &limits.joints {
            let axis = rest_dir(topo, *j);
            let (flex, abd, twist) = finger_angles(&frame[*j], &axis);
            if !outside(flex, l.min_flexion, l.max_flexion) && !outside(abd, l.min_abduction, l.max_abduction) {
                continue;
            }
            let q = compose_finger(
                &axis,
                flex.clamp(l.min_flexion, l.max_flexion),
                abd.clamp(l.min_abduction, l.max_abduction),
                twist,
            );
            frame[*j] = align_hemisphere(q, &frame[*j]);
        }
    }
    JointRotationSequence::new(out, rotations.fps)
}

// ---------------------------------------------------------------------------
// smoothing

/// Sliding-window quaternion average per joint: the component-wise mean of
/// the window, each member flipped onto the centre's hemisphere, then
/// normalized. Windows are truncated at the sequence ends.
pub fn smooth(rotations: &JointRotationSequence, window: usize) -> Result<JointRotationSequence> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::InvalidInput(format!("smoothing window must be odd and >= 1, got {window}")));
    }
    if window == 1 {
        return Ok(rotations.clone());
    }
    let h = window / 2;
    let n = rotations.len();
    let src = &rotations.rotations;
    let mut out = src.clone();
    for j in 0..rotations.joint_count() {
        for i in 0..n {
            let lo = i.saturating_sub(h);
            let hi = (i + h).min(n - 1);
            let centre = src[i][j];
            if (lo..=hi).all(|k| src[k][j] == centre) {
                continue;
            }
            let mut sum = Quaternion::new(0.0, 0.0, 0.0, 0.0);
            for frame in &src[lo..=hi] {
                sum += align_hemisphere(frame[j], &centre).into_inner();
            }
            out[i][j] = Quat::new_normalize(sum);
        }
    }
    JointRotationSequence::new(out, rotations.fps)
}
