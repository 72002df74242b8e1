//! Skeleton topology, pose containers and the two kernels used by the
//! generator objective: per-bone lengths and frame-to-frame motion.
//!
//! Coordinates are meters, y-up, right-handed, with the character facing +z
//! (its left side is +x).

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Joint {
    pub name: String,
    pub parent: Option<usize>,
}

/// A bone connects a joint to one of its children. Bone `i` always ends at
/// the `i`-th non-root joint in joint order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bone {
    pub parent: usize,
    pub child: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonTopology {
    name: String,
    joints: Vec<Joint>,
    bones: Vec<Bone>,
    rest_directions: Vec<Vec3>,
    rest_lengths: Vec<f64>,
    root: usize,
    /// bone index ending at each joint; `None` for the root
    bone_of_joint: Vec<Option<usize>>,
    /// parents before children
    order: Vec<usize>,
    children: Vec<Vec<usize>>,
}

/// On-disk topology description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TopologyFile {
    #[serde(default = "default_topology_name")]
    pub name: String,
    pub joints: Vec<Joint>,
    pub rest_directions: Vec<Vec3>,
    pub rest_lengths: Vec<f64>,
    pub root: usize,
}

fn default_topology_name() -> String {
    "custom".to_string()
}

impl SkeletonTopology {
    /// Builds and validates a topology. `rest_directions` and `rest_lengths`
    /// are given per bone, in bone order (non-root joints in joint order).
    pub fn new(
        name: impl Into<String>,
        joints: Vec<Joint>,
        rest_directions: Vec<Vec3>,
        rest_lengths: Vec<f64>,
        root: usize,
    ) -> Result<Self> {
        let n = joints.len();
        if n == 0 {
            return Err(Error::InvalidInput("topology has no joints".into()));
        }
        if root >= n {
            return Err(Error::InvalidInput(format!(
                "root index {root} out of range for {n} joints"
            )));
        }
        let roots: Vec<usize> = (0..n).filter(|&j| joints[j].parent.is_none()).collect();
        if roots != [root] {
            return Err(Error::InvalidInput(format!(
                "expected exactly one parentless joint equal to root {root}, found {roots:?}"
            )));
        }
        let mut children = vec![Vec::new(); n];
        for (j, joint) in joints.iter().enumerate() {
            if let Some(p) = joint.parent {
                if p >= n || p == j {
                    return Err(Error::InvalidInput(format!(
                        "joint {} has invalid parent {p}",
                        joint.name
                    )));
                }
                children[p].push(j);
            }
        }
        let mut order = Vec::with_capacity(n);
        let mut queue = VecDeque::from([root]);
        while let Some(j) = queue.pop_front() {
            order.push(j);
            queue.extend(children[j].iter().copied());
        }
        if order.len() != n {
            return Err(Error::InvalidInput(
                "parent relation is not a tree: some joints are unreachable from the root".into(),
            ));
        }

        let mut bones = Vec::with_capacity(n - 1);
        let mut bone_of_joint = vec![None; n];
        for (j, joint) in joints.iter().enumerate() {
            if let Some(p) = joint.parent {
                bone_of_joint[j] = Some(bones.len());
                bones.push(Bone {
                    parent: p,
                    child: j,
                });
            }
        }
        if rest_directions.len() != bones.len() || rest_lengths.len() != bones.len() {
            return Err(Error::InvalidInput(format!(
                "expected {} rest directions and lengths, got {} and {}",
                bones.len(),
                rest_directions.len(),
                rest_lengths.len()
            )));
        }
        for (i, d) in rest_directions.iter().enumerate() {
            let norm = norm3(*d);
            if !norm.is_finite() || (norm - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidInput(format!(
                    "rest direction of bone {i} has norm {norm}, expected 1"
                )));
            }
        }
        if let Some((i, l)) = rest_lengths
            .iter()
            .enumerate()
            .find(|(_, l)| !(l.is_finite() && **l > 0.0))
        {
            return Err(Error::InvalidInput(format!(
                "rest length of bone {i} is {l}, expected > 0"
            )));
        }

        Ok(Self {
            name: name.into(),
            joints,
            bones,
            rest_directions,
            rest_lengths,
            root,
            bone_of_joint,
            order,
            children,
        })
    }

    pub fn from_file_repr(file: TopologyFile) -> Result<Self> {
        Self::new(
            file.name,
            file.joints,
            file.rest_directions,
            file.rest_lengths,
            file.root,
        )
    }

    pub fn to_file_repr(&self) -> TopologyFile {
        TopologyFile {
            name: self.name.clone(),
            joints: self.joints.clone(),
            rest_directions: self.rest_directions.clone(),
            rest_lengths: self.rest_lengths.clone(),
            root: self.root,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: TopologyFile = serde_json::from_str(&text)?;
        Self::from_file_repr(file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_file_repr())?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn joints(&self) -> &[Joint] {
        &self.joints
    }

    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }

    pub fn bones(&self) -> &[Bone] {
        &self.bones
    }

    pub fn rest_directions(&self) -> &[Vec3] {
        &self.rest_directions
    }

    pub fn rest_lengths(&self) -> &[f64] {
        &self.rest_lengths
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn parent(&self, joint: usize) -> Option<usize> {
        self.joints[joint].parent
    }

    pub fn children(&self, joint: usize) -> &[usize] {
        &self.children[joint]
    }

    /// Index of the bone ending at `joint`.
    pub fn bone_of_joint(&self, joint: usize) -> Option<usize> {
        self.bone_of_joint[joint]
    }

    /// Joint indices ordered so that every parent precedes its children.
    pub fn topological_order(&self) -> &[usize] {
        &self.order
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joints.iter().position(|j| j.name == name)
    }

    /// Rest offset of the bone ending at `joint`, in the parent's frame.
    pub fn rest_offset(&self, joint: usize) -> Option<Vec3> {
        self.bone_of_joint[joint].map(|b| scale3(self.rest_directions[b], self.rest_lengths[b]))
    }

    /// Joint positions of the rest pose with the root at the origin.
    pub fn rest_pose(&self) -> Pose {
        let mut positions = vec![[0.0; 3]; self.joint_count()];
        for &j in &self.order {
            if let (Some(p), Some(off)) = (self.parent(j), self.rest_offset(j)) {
                positions[j] = add3(positions[p], off);
            }
        }
        Pose { positions }
    }

    /// Default upper-body skeleton: pelvis (root), spine, neck, both
    /// shoulders, elbows and wrists, plus four joints for each of the five
    /// fingers of each hand. The rest pose holds the upper arms down, the
    /// forearms pointing forward and the palms facing down.
    pub fn upper_body() -> Self {
        let mut joints: Vec<Joint> = Vec::new();
        let mut dirs = Vec::new();
        let mut lengths = Vec::new();
        let mut add = |joints: &mut Vec<Joint>, name: &str, parent: Option<usize>, dir: Vec3, len: f64| {
            joints.push(Joint {
                name: name.to_string(),
                parent,
            });
            if parent.is_some() {
                dirs.push(normalize3(dir));
                lengths.push(len);
            }
            joints.len() - 1
        };

        let pelvis = add(&mut joints, "pelvis", None, [0.0; 3], 0.0);
        let spine = add(&mut joints, "spine", Some(pelvis), [0.0, 1.0, 0.0], 0.45);
        let neck = add(&mut joints, "neck", Some(spine), [0.0, 1.0, 0.0], 0.12);
        for (side, sx) in [("left", 1.0), ("right", -1.0)] {
            let shoulder = add(
                &mut joints,
                &format!("{side}_shoulder"),
                Some(neck),
                [sx, -0.15, 0.0],
                0.19,
            );
            let elbow = add(
                &mut joints,
                &format!("{side}_elbow"),
                Some(shoulder),
                [0.0, -1.0, 0.0],
                0.29,
            );
            let wrist = add(
                &mut joints,
                &format!("{side}_wrist"),
                Some(elbow),
                [0.0, 0.0, 1.0],
                0.26,
            );
            // (name, base direction from the wrist, base length, phalanx direction, phalanx lengths)
            let fingers: [(&str, Vec3, f64, Vec3, [f64; 3]); 5] = [
                ("thumb", [-sx * 0.6, -0.3, 0.75], 0.035, [-sx * 0.45, -0.1, 0.9], [0.04, 0.032, 0.028]),
                ("index", [-sx * 0.3, 0.0, 1.0], 0.09, [0.0, 0.0, 1.0], [0.04, 0.025, 0.02]),
                ("middle", [-sx * 0.08, 0.0, 1.0], 0.088, [0.0, 0.0, 1.0], [0.045, 0.028, 0.022]),
                ("ring", [sx * 0.12, 0.0, 1.0], 0.083, [0.0, 0.0, 1.0], [0.042, 0.026, 0.021]),
                ("pinky", [sx * 0.3, 0.0, 1.0], 0.078, [0.0, 0.0, 1.0], [0.032, 0.02, 0.018]),
            ];
            for (finger, base_dir, base_len, phalanx_dir, phalanges) in fingers {
                let mut parent = add(
                    &mut joints,
                    &format!("{side}_{finger}_1"),
                    Some(wrist),
                    base_dir,
                    base_len,
                );
                for (k, len) in phalanges.iter().enumerate() {
                    parent = add(
                        &mut joints,
                        &format!("{side}_{finger}_{}", k + 2),
                        Some(parent),
                        phalanx_dir,
                        *len,
                    );
                }
            }
        }
        Self::new("upper_body", joints, dirs, lengths, pelvis)
            .expect("built-in topology is valid")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub positions: Vec<Vec3>,
}

impl Pose {
    pub fn validate(&self, topo: &SkeletonTopology) -> Result<()> {
        if self.positions.len() != topo.joint_count() {
            return Err(Error::InvalidInput(format!(
                "pose has {} joints, topology {} has {}",
                self.positions.len(),
                topo.name(),
                topo.joint_count()
            )));
        }
        if self.positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("pose contains non-finite values".into()));
        }
        Ok(())
    }
}

/// A `T x K x 3` keypoint trajectory sampled at a fixed frame rate.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSequence {
    frames: Vec<Vec<Vec3>>,
    fps: f64,
}

impl PoseSequence {
    pub fn new(frames: Vec<Vec<Vec3>>, fps: f64) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::InsufficientFrames { needed: 1, got: 0 });
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(Error::InvalidInput(format!("fps must be > 0, got {fps}")));
        }
        let k = frames[0].len();
        if k == 0 {
            return Err(Error::InvalidInput("frames have no joints".into()));
        }
        if let Some(t) = frames.iter().position(|f| f.len() != k) {
            return Err(Error::Shape(format!(
                "frame {t} has {} joints, frame 0 has {k}",
                frames[t].len()
            )));
        }
        if frames.iter().flatten().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("pose sequence contains non-finite values".into()));
        }
        Ok(Self { frames, fps })
    }

    /// Builds a sequence from a flat frame-major buffer of `frames * joints * 3` values.
    pub fn from_flat(values: &[f64], joints: usize, fps: f64) -> Result<Self> {
        if joints == 0 || values.len() % (joints * 3) != 0 {
            return Err(Error::Shape(format!(
                "{} values do not divide into frames of {joints} joints",
                values.len()
            )));
        }
        let frames = values
            .chunks(joints * 3)
            .map(|f| f.chunks(3).map(|c| [c[0], c[1], c[2]]).collect())
            .collect();
        Self::new(frames, fps)
    }

    pub fn frames(&self) -> &[Vec<Vec3>] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &[Vec3] {
        &self.frames[t]
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn joint_count(&self) -> usize {
        self.frames[0].len()
    }

    pub fn pose(&self, t: usize) -> Pose {
        Pose {
            positions: self.frames[t].clone(),
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.frames.iter().flatten().flatten().copied().collect()
    }

    pub fn validate(&self, topo: &SkeletonTopology) -> Result<()> {
        if self.joint_count() != topo.joint_count() {
            return Err(Error::InvalidInput(format!(
                "sequence has {} joints, topology {} has {}",
                self.joint_count(),
                topo.name(),
                topo.joint_count()
            )));
        }
        Ok(())
    }

    /// Element-wise `a * self + b * other`.
    pub fn combine(&self, a: f64, other: &PoseSequence, b: f64) -> Result<PoseSequence> {
        if self.len() != other.len() || self.joint_count() != other.joint_count() {
            return Err(Error::Shape("sequences differ in shape".into()));
        }
        let frames = self
            .frames
            .iter()
            .zip(&other.frames)
            .map(|(f, g)| {
                f.iter()
                    .zip(g)
                    .map(|(p, q)| [a * p[0] + b * q[0], a * p[1] + b * q[1], a * p[2] + b * q[2]])
                    .collect()
            })
            .collect();
        PoseSequence::new(frames, self.fps)
    }
}

/// Euclidean length of every topology bone in `pose`.
pub fn bone_lengths(pose: &Pose, topo: &SkeletonTopology) -> Result<Vec<f64>> {
    pose.validate(topo)?;
    Ok(bone_lengths_unchecked(&pose.positions, topo))
}

pub(crate) fn bone_lengths_unchecked(positions: &[Vec3], topo: &SkeletonTopology) -> Vec<f64> {
    topo.bones()
        .iter()
        .map(|b| norm3(sub3(positions[b.child], positions[b.parent])))
        .collect()
}

/// Frame differences: row `t` is `frames[t + 1] - frames[t]`.
pub fn motion(seq: &PoseSequence) -> Result<Vec<Vec<Vec3>>> {
    if seq.len() < 2 {
        return Err(Error::InsufficientFrames {
            needed: 2,
            got: seq.len(),
        });
    }
    Ok(seq
        .frames
        .windows(2)
        .map(|w| w[1].iter().zip(&w[0]).map(|(b, a)| sub3(*b, *a)).collect())
        .collect())
}

/// Translates every frame so that the root joint sits at the origin.
pub fn root_normalize(seq: &PoseSequence, topo: &SkeletonTopology) -> Result<PoseSequence> {
    seq.validate(topo)?;
    let root = topo.root();
    let frames = seq
        .frames
        .iter()
        .map(|f| {
            let r = f[root];
            f.iter().map(|p| sub3(*p, r)).collect()
        })
        .collect();
    PoseSequence::new(frames, seq.fps)
}

#[inline]
pub(crate) fn sub3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub(crate) fn add3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub(crate) fn scale3(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub(crate) fn norm3(a: Vec3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

fn normalize3(a: Vec3) -> Vec3 {
    scale3(a, 1.0 / norm3(a))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_joint(child_dir: Vec3, len: f64) -> SkeletonTopology {
        SkeletonTopology::new(
            "pair",
            vec![
                Joint { name: "a".into(), parent: None },
                Joint { name: "b".into(), parent: Some(0) },
            ],
            vec![child_dir],
            vec![len],
            0,
        )
        .unwrap()
    }

    fn chain(n: usize) -> SkeletonTopology {
        let joints = (0..n)
            .map(|i| Joint {
                name: format!("j{i}"),
                parent: i.checked_sub(1),
            })
            .collect();
        SkeletonTopology::new("chain", joints, vec![[0.0, 1.0, 0.0]; n - 1], vec![0.1; n - 1], 0).unwrap()
    }

    #[test]
    fn default_topology_shape() {
        let topo = SkeletonTopology::upper_body();
        assert_eq!(topo.joint_count(), 49);
        assert_eq!(topo.bones().len(), 48);
        assert_eq!(topo.root(), topo.joint_index("pelvis").unwrap());
        let order = topo.topological_order();
        let mut seen = vec![false; topo.joint_count()];
        for &j in order {
            if let Some(p) = topo.parent(j) {
                assert!(seen[p]);
            }
            seen[j] = true;
        }
    }

    #[test]
    fn rejects_bad_topologies() {
        let j = |name: &str, parent| Joint { name: name.into(), parent };
        // two roots
        assert!(SkeletonTopology::new("x", vec![j("a", None), j("b", None)], vec![], vec![], 0).is_err());
        // cycle b <-> c, unreachable from root
        assert!(SkeletonTopology::new(
            "x",
            vec![j("a", None), j("b", Some(2)), j("c", Some(1))],
            vec![[0.0, 1.0, 0.0]; 2],
            vec![1.0; 2],
            0
        )
        .is_err());
        // non-unit direction
        assert!(SkeletonTopology::new("x", vec![j("a", None), j("b", Some(0))], vec![[0.0, 2.0, 0.0]], vec![1.0], 0).is_err());
        // zero length
        assert!(SkeletonTopology::new("x", vec![j("a", None), j("b", Some(0))], vec![[0.0, 1.0, 0.0]], vec![0.0], 0).is_err());
    }

    #[test]
    fn topology_file_round_trip() {
        let topo = SkeletonTopology::upper_body();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("topo.json");
        topo.save(&path).unwrap();
        assert_eq!(SkeletonTopology::load(&path).unwrap(), topo);
    }

    #[test]
    fn bone_length_examples() {
        let topo = two_joint([0.0, 0.0, 1.0], 1.0);
        let pose = Pose { positions: vec![[0.0; 3], [0.0, 0.0, 1.0]] };
        assert_eq!(bone_lengths(&pose, &topo).unwrap(), vec![1.0]);
        let pose = Pose { positions: vec![[0.0; 3], [1.0, 2.0, 2.0]] };
        assert_eq!(bone_lengths(&pose, &topo).unwrap(), vec![3.0]);
        let short = Pose { positions: vec![[0.0; 3]] };
        assert!(matches!(bone_lengths(&short, &topo), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn bone_lengths_match_scalar_loop() {
        let topo = chain(10);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let positions: Vec<Vec3> = (0..10).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let got = bone_lengths(&Pose { positions: positions.clone() }, &topo).unwrap();
        for i in 0..9 {
            let mut acc = 0.0;
            for c in 0..3 {
                let d = positions[i + 1][c] - positions[i][c];
                acc += d * d;
            }
            assert_eq!(got[i], acc.sqrt());
        }
    }

    #[test]
    fn motion_examples() {
        let seq = PoseSequence::new(vec![vec![[0.0, 0.0, 0.0]], vec![[1.0, 0.0, 0.0]], vec![[3.0, 0.0, 0.0]]], 16.0).unwrap();
        let m = motion(&seq).unwrap();
        assert_eq!(m, vec![vec![[1.0, 0.0, 0.0]], vec![[2.0, 0.0, 0.0]]]);

        let constant = PoseSequence::new(vec![vec![[0.3, 0.2, 0.1]; 2]; 5], 16.0).unwrap();
        assert!(motion(&constant).unwrap().iter().flatten().all(|v| *v == [0.0; 3]));

        let single = PoseSequence::new(vec![vec![[0.0; 3]]], 16.0).unwrap();
        assert!(matches!(motion(&single), Err(Error::InsufficientFrames { needed: 2, got: 1 })));
    }

    #[test]
    fn motion_telescopes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // dyadic values keep the cumulative sum exact
        let frames: Vec<Vec<Vec3>> = (0..6)
            .map(|_| (0..3).map(|_| [0.0; 3].map(|_: f64| rng.gen_range(-64i32..64) as f64 / 8.0)).collect())
            .collect();
        let seq = PoseSequence::new(frames.clone(), 16.0).unwrap();
        let m = motion(&seq).unwrap();
        let mut acc = frames[0].clone();
        for (t, row) in m.iter().enumerate() {
            for (k, d) in row.iter().enumerate() {
                acc[k] = add3(acc[k], *d);
            }
            assert_eq!(acc, frames[t + 1]);
        }
    }

    #[test]
    fn root_normalize_examples() {
        let topo = SkeletonTopology::upper_body();
        let rest = topo.rest_pose().positions;
        let seq = PoseSequence::new(vec![rest.clone(); 3], 16.0).unwrap();
        assert_eq!(root_normalize(&seq, &topo).unwrap(), seq);

        let shifted: Vec<Vec3> = rest.iter().map(|p| add3(*p, [5.0, 5.0, 5.0])).collect();
        let moved = PoseSequence::new(vec![shifted; 3], 16.0).unwrap();
        let a = root_normalize(&moved, &topo).unwrap();
        for (fa, fb) in a.frames().iter().zip(seq.frames()) {
            for (p, q) in fa.iter().zip(fb) {
                for c in 0..3 {
                    assert!((p[c] - q[c]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn root_normalize_is_exact_on_dyadic_grid() {
        let topo = chain(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut dyadic = || rng.gen_range(-256i32..256) as f64 / 64.0;
        let frames: Vec<Vec<Vec3>> = (0..4)
            .map(|_| (0..4).map(|_| [dyadic(), dyadic(), dyadic()]).collect())
            .collect();
        let seq = PoseSequence::new(frames.clone(), 16.0).unwrap();
        let shifted = PoseSequence::new(
            frames
                .iter()
                .map(|f| f.iter().map(|p| add3(*p, [5.0, 5.0, 5.0])).collect())
                .collect(),
            16.0,
        )
        .unwrap();
        let a = root_normalize(&seq, &topo).unwrap();
        let b = root_normalize(&shifted, &topo).unwrap();
        assert_eq!(a, b);
        assert_eq!(root_normalize(&a, &topo).unwrap(), a);
        for t in 0..4 {
            assert_eq!(a.frame(t)[0], [0.0; 3]);
            assert_eq!(
                bone_lengths(&seq.pose(t), &topo).unwrap(),
                bone_lengths(&a.pose(t), &topo).unwrap()
            );
        }
    }
}
