//! BVH motion capture files.
//!
//! Export layout: the root joint becomes `ROOT` with six channels. Every
//! other joint `j` becomes a node named `j` that sits at its parent's
//! position and carries `L(j)` as Z, Y, X Euler channels, so the node's
//! outgoing offset is the rest bone ending at `j`. Leaf joints close with
//! an `End Site`. Offsets are written in centimetres.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Rotation3, Vector3};

use super::{vec3, JointRotationSequence, Quat};
use crate::error::{Error, Result};
use crate::skeleton::{SkeletonTopology, Vec3};

pub const UNITS_PER_METRE: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    Xposition,
    Yposition,
    Zposition,
    Xrotation,
    Yrotation,
    Zrotation,
}

impl Channel {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "Xposition" => Self::Xposition,
            "Yposition" => Self::Yposition,
            "Zposition" => Self::Zposition,
            "Xrotation" => Self::Xrotation,
            "Yrotation" => Self::Yrotation,
            "Zrotation" => Self::Zrotation,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            Self::Xposition => "Xposition",
            Self::Yposition => "Yposition",
            Self::Zposition => "Zposition",
            Self::Xrotation => "Xrotation",
            Self::Yrotation => "Yrotation",
            Self::Zrotation => "Zrotation",
        }
    }
}

const ROOT_CHANNELS: [Channel; 6] = [
    Channel::Xposition,
    Channel::Yposition,
    Channel::Zposition,
    Channel::Zrotation,
    Channel::Yrotation,
    Channel::Xrotation,
];
const JOINT_CHANNELS: [Channel; 3] = [Channel::Zrotation, Channel::Yrotation, Channel::Xrotation];

#[derive(Debug, Clone, PartialEq)]
pub struct BvhJoint {
    pub name: String,
    pub parent: Option<usize>,
    pub offset: Vec3,
    pub channels: Vec<Channel>,
    pub end_site: Option<Vec3>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bvh {
    /// Depth-first order, parents before children.
    pub joints: Vec<BvhJoint>,
    pub frame_time: f64,
    /// One row of channel values per frame, in joint order.
    pub frames: Vec<Vec<f64>>,
}

fn zyx_degrees(q: &Quat) -> [f64; 3] {
    let (roll, pitch, yaw) = q.to_rotation_matrix().euler_angles();
    [yaw.to_degrees(), pitch.to_degrees(), roll.to_degrees()]
}

fn scaled(v: Vec3) -> Vec3 {
    v.map(|c| c * UNITS_PER_METRE)
}

pub fn to_bvh(rotations: &JointRotationSequence, topo: &SkeletonTopology) -> Result<Bvh> {
    rotations.check(topo)?;
    let root = topo.root();
    let mut joints = vec![BvhJoint {
        name: topo.joints()[root].name.clone(),
        parent: None,
        offset: [0.0; 3],
        channels: ROOT_CHANNELS.to_vec(),
        end_site: None,
    }];
    let mut order = vec![root];
    // depth first, so the text layout and the joint order agree
    let mut stack: Vec<(usize, usize)> = topo.children(root).iter().rev().map(|&c| (c, 0)).collect();
    while let Some((j, parent)) = stack.pop() {
        let p = topo.parent(j).expect("non-root");
        let offset = if p == root { [0.0; 3] } else { scaled(topo.rest_offset(p).expect("non-root")) };
        let end_site = topo
            .children(j)
            .is_empty()
            .then(|| scaled(topo.rest_offset(j).expect("non-root")));
        let me = joints.len();
        order.push(j);
        joints.push(BvhJoint {
            name: topo.joints()[j].name.clone(),
            parent: Some(parent),
            offset,
            channels: JOINT_CHANNELS.to_vec(),
            end_site,
        });
        stack.extend(topo.children(j).iter().rev().map(|&c| (c, me)));
    }
    let frames = rotations
        .rotations()
        .iter()
        .map(|frame| {
            let mut row = vec![0.0, 0.0, 0.0];
            for &j in &order {
                row.extend(zyx_degrees(&frame[j]));
            }
            row
        })
        .collect();
    Ok(Bvh { joints, frame_time: 1.0 / rotations.fps(), frames })
}

pub fn export_bvh(rotations: &JointRotationSequence, topo: &SkeletonTopology, path: &Path) -> Result<()> {
    to_bvh(rotations, topo)?.save(path)
}

/// Joint rotations stored in a BVH file laid out like [`to_bvh`] output.
pub fn bvh_to_rotations(bvh: &Bvh, topo: &SkeletonTopology) -> Result<JointRotationSequence> {
    if bvh.joints.len() != topo.joint_count() {
        return Err(Error::Compatibility(format!(
            "BVH has {} joints, topology {} has {}",
            bvh.joints.len(),
            topo.name(),
            topo.joint_count()
        )));
    }
    let map: Vec<usize> = bvh
        .joints
        .iter()
        .map(|n| {
            topo.joint_index(&n.name)
                .ok_or_else(|| Error::Compatibility(format!("BVH joint {} not in topology", n.name)))
        })
        .collect::<Result<_>>()?;
    let frames = (0..bvh.frames.len())
        .map(|t| {
            let mut out = vec![Quat::identity(); topo.joint_count()];
            for (n, &j) in map.iter().enumerate() {
                out[j] = Quat::from_rotation_matrix(&Rotation3::from_matrix_unchecked(bvh.local(t, n).1));
            }
            out
        })
        .collect();
    JointRotationSequence::new(frames, 1.0 / bvh.frame_time)
}

/// Joint positions in metres read straight from the BVH hierarchy: the
/// root node's position, and for every other node the tip of its outgoing
/// bone (first child's offset or its end site).
pub fn bvh_joint_positions(bvh: &Bvh, frame: usize) -> Vec<(String, Vec3)> {
    let n = bvh.joints.len();
    let mut pos = vec![Vector3::zeros(); n];
    let mut rot = vec![Matrix3::identity(); n];
    for i in 0..n {
        let (translation, local) = bvh.local(frame, i);
        let offset = vec3(bvh.joints[i].offset) + translation;
        match bvh.joints[i].parent {
            Some(p) => {
                pos[i] = pos[p] + rot[p] * offset;
                rot[i] = rot[p] * local;
            }
            None => {
                pos[i] = offset;
                rot[i] = local;
            }
        }
    }
    (0..n)
        .map(|i| {
            let joint = &bvh.joints[i];
            let p = if joint.parent.is_none() {
                pos[i]
            } else {
                let out = bvh
                    .joints
                    .iter()
                    .find(|c| c.parent == Some(i))
                    .map(|c| c.offset)
                    .or(joint.end_site)
                    .unwrap_or([0.0; 3]);
                pos[i] + rot[i] * vec3(out)
            };
            (joint.name.clone(), [p.x, p.y, p.z].map(|c| c / UNITS_PER_METRE))
        })
        .collect()
}

impl Bvh {
    pub fn channel_count(&self) -> usize {
        self.joints.iter().map(|j| j.channels.len()).sum()
    }

    fn channel_start(&self, joint: usize) -> usize {
        self.joints[..joint].iter().map(|j| j.channels.len()).sum()
    }

    /// Translation and rotation of one joint in one frame.
    pub fn local(&self, frame: usize, joint: usize) -> (Vector3<f64>, Matrix3<f64>) {
        let start = self.channel_start(joint);
        let mut t = Vector3::zeros();
        let mut r = Matrix3::identity();
        for (k, ch) in self.joints[joint].channels.iter().enumerate() {
            let v = self.frames[frame][start + k];
            match ch {
                Channel::Xposition => t.x = v,
                Channel::Yposition => t.y = v,
                Channel::Zposition => t.z = v,
                Channel::Xrotation => r *= Rotation3::from_axis_angle(&Vector3::x_axis(), v.to_radians()).into_inner(),
                Channel::Yrotation => r *= Rotation3::from_axis_angle(&Vector3::y_axis(), v.to_radians()).into_inner(),
                Channel::Zrotation => r *= Rotation3::from_axis_angle(&Vector3::z_axis(), v.to_radians()).into_inner(),
            }
        }
        (t, r)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("HIERARCHY\n");
        self.write_joint(&mut s, 0, 0);
        let _ = writeln!(s, "MOTION\nFrames: {}\nFrame Time: {}", self.frames.len(), self.frame_time);
        for row in &self.frames {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    fn write_joint(&self, s: &mut String, i: usize, depth: usize) {
        let pad = "  ".repeat(depth);
        let j = &self.joints[i];
        let kind = if j.parent.is_none() { "ROOT" } else { "JOINT" };
        let _ = writeln!(s, "{pad}{kind} {}\n{pad}{{", j.name);
        let o = j.offset;
        let _ = writeln!(s, "{pad}  OFFSET {} {} {}", o[0], o[1], o[2]);
        let names: Vec<&str> = j.channels.iter().map(|c| c.name()).collect();
        let _ = writeln!(s, "{pad}  CHANNELS {} {}", names.len(), names.join(" "));
        for c in (0..self.joints.len()).filter(|&c| self.joints[c].parent == Some(i)) {
            self.write_joint(s, c, depth + 1);
        }
        if let Some(e) = j.end_site {
            let _ = writeln!(s, "{pad}  End Site\n{pad}  {{\n{pad}    OFFSET {} {} {}\n{pad}  }}", e[0], e[1], e[2]);
        }
        let _ = writeln!(s, "{pad}}}");
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut p = Parser {
            tokens: text
                .lines()
                .enumerate()
                .flat_map(|(i, l)| l.split_whitespace().map(move |t| (i + 1, t)))
                .collect(),
            pos: 0,
            origin,
        };
        p.expect("HIERARCHY")?;
        p.expect("ROOT")?;
        let mut joints = Vec::new();
        p.joint(&mut joints, None)?;
        p.expect("MOTION")?;
        p.expect("Frames:")?;
        let n = p.number()?;
        if n < 0.0 || n.fract() != 0.0 {
            return Err(p.error("frame count must be a non-negative integer"));
        }
        p.expect("Frame")?;
        p.expect("Time:")?;
        let frame_time = p.number()?;
        if !(frame_time > 0.0) {
            return Err(p.error("frame time must be > 0"));
        }
        let channels: usize = joints.iter().map(|j: &BvhJoint| j.channels.len()).sum();
        let mut frames = Vec::with_capacity(n as usize);
        for _ in 0..n as usize {
            let row = (0..channels).map(|_| p.number()).collect::<Result<Vec<f64>>>()?;
            frames.push(row);
        }
        if p.pos != p.tokens.len() {
            return Err(p.error("unexpected data after the last frame"));
        }
        Ok(Self { joints, frame_time, frames })
    }
}

struct Parser<'a> {
    tokens: Vec<(usize, &'a str)>,
    pos: usize,
    origin: &'a str,
}

impl<'a> Parser<'a> {
    fn error(&self, message: impl Into<String>) -> Error {
        let line = self
            .tokens
            .get(self.pos.min(self.tokens.len().saturating_sub(1)))
            .map_or(0, |t| t.0);
        Error::Parse { path: self.origin.to_string(), line, message: message.into() }
    }

    fn next(&mut self) -> Result<&'a str> {
        let t = self.tokens.get(self.pos).map(|t| t.1).ok_or_else(|| self.error("unexpected end of file"))?;
        self.pos += 1;
        Ok(t)
    }

    fn expect(&mut self, want: &str) -> Result<()> {
        let got = self.next()?;
        if got != want {
            self.pos -= 1;
            return Err(self.error(format!("expected {want}, found {got}")));
        }
        Ok(())
    }

    fn number(&mut self) -> Result<f64> {
        let t = self.next()?;
        match t.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => {
                self.pos -= 1;
                Err(self.error(format!("expected a finite number, found {t}")))
            }
        }
    }

    fn vec(&mut self) -> Result<Vec3> {
        Ok([self.number()?, self.number()?, self.number()?])
    }

    fn joint(&mut self, joints: &mut Vec<BvhJoint>, parent: Option<usize>) -> Result<()> {
        let name = self.next()?.to_string();
        self.expect("{")?;
        self.expect("OFFSET")?;
        let offset = self.vec()?;
        self.expect("CHANNELS")?;
        let n = self.number()?;
        if n < 0.0 || n.fract() != 0.0 {
            return Err(self.error("channel count must be a non-negative integer"));
        }
        let channels = (0..n as usize)
            .map(|_| {
                let t = self.next()?;
                Channel::parse(t).ok_or_else(|| {
                    self.pos -= 1;
                    self.error(format!("unknown channel {t}"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let me = joints.len();
        joints.push(BvhJoint { name, parent, offset, channels, end_site: None });
        loop {
            match self.next()? {
                "JOINT" => self.joint(joints, Some(me))?,
                "End" => {
                    self.expect("Site")?;
                    self.expect("{")?;
                    self.expect("OFFSET")?;
                    joints[me].end_site = Some(self.vec()?);
                    self.expect("}")?;
                }
                "}" => return Ok(()),
                t => {
                    self.pos -= 1;
                    return Err(self.error(format!("unexpected token {t}")));
                }
            }
        }
    }
}
