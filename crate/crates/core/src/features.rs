//! Branch inputs derived from an aligned clip: joints, velocities, bones,
//! and cross-body distances, grouped into the three stream inputs.

use std::fmt;

use thiserror::Error;

use crate::graph::{parent_of, JOINTS, REPRESENTATIVE_JOINTS};
use crate::skeleton::{dist, SkeletonClip, BODIES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    J1,
    V1,
    B1,
    J2,
    V2,
    B2,
}

impl Branch {
    pub fn name(self) -> &'static str {
        match self {
            Branch::J1 => "j1",
            Branch::V1 => "v1",
            Branch::B1 => "b1",
            Branch::J2 => "j2",
            Branch::V2 => "v2",
            Branch::B2 => "b2",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// One 25-node graph per body.
    Intra,
    /// Both bodies in one 50-node graph, second body at nodes 25..50.
    Inter,
}

/// The three streams, named A, B, C in reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StreamKind {
    Intra,
    InterMotion,
    InterDistance,
}

pub const ALL_STREAMS: [StreamKind; 3] = [StreamKind::Intra, StreamKind::InterMotion, StreamKind::InterDistance];

impl StreamKind {
    pub fn letter(self) -> char {
        match self {
            StreamKind::Intra => 'A',
            StreamKind::InterMotion => 'B',
            StreamKind::InterDistance => 'C',
        }
    }

    pub fn from_letter(c: char) -> Option<Self> {
        ALL_STREAMS.into_iter().find(|s| s.letter() == c.to_ascii_uppercase())
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            StreamKind::Intra => "intra",
            StreamKind::InterMotion => "inter_motion",
            StreamKind::InterDistance => "inter_distance",
        }
    }

    pub fn branches(self) -> &'static [Branch] {
        match self {
            StreamKind::Intra => &[Branch::J1, Branch::V1, Branch::B1],
            StreamKind::InterMotion => &[Branch::J2, Branch::V2],
            StreamKind::InterDistance => &[Branch::B2],
        }
    }

    pub fn layout(self) -> Layout {
        match self {
            StreamKind::Intra => Layout::Intra,
            _ => Layout::Inter,
        }
    }

    pub fn channels(self) -> usize {
        match self {
            StreamKind::InterDistance => 6,
            _ => 3,
        }
    }

    pub fn nodes(self) -> usize {
        match self.layout() {
            Layout::Intra => JOINTS,
            Layout::Inter => 2 * JOINTS,
        }
    }

    pub fn graphs(self) -> usize {
        match self.layout() {
            Layout::Intra => BODIES,
            Layout::Inter => 1,
        }
    }
}

impl fmt::Display for StreamKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("clip must have 2 bodies and at least one frame")]
    Misaligned,
    #[error("no branches given")]
    Empty,
    #[error("branches {0:?} do not form a stream")]
    BadBranchSet(Vec<Branch>),
    #[error("branch {0:?} has shape {1:?}, stream expects {2:?}")]
    MixedLayout(Branch, [usize; 4], [usize; 4]),
}

/// A `(graphs, channels, frames, nodes)` block for one branch.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchInput {
    pub branch: Branch,
    pub channels: usize,
    pub frames: usize,
    pub nodes: usize,
    pub graphs: usize,
    /// Set when the second body is absent (all zeros).
    pub single_person: bool,
    pub data: Vec<f64>,
}

impl BranchInput {
    fn zeros(branch: Branch, clip: &SkeletonClip, channels: usize, layout: Layout) -> Self {
        let (nodes, graphs) = match layout {
            Layout::Intra => (JOINTS, BODIES),
            Layout::Inter => (2 * JOINTS, 1),
        };
        Self {
            branch,
            channels,
            frames: clip.frames,
            nodes,
            graphs,
            single_person: !has_second_person(clip),
            data: vec![0.0; graphs * channels * clip.frames * nodes],
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.graphs, self.channels, self.frames, self.nodes]
    }

    fn index(&self, c: usize, t: usize, v: usize, m: usize) -> usize {
        ((m * self.channels + c) * self.frames + t) * self.nodes + v
    }

    pub fn get(&self, c: usize, t: usize, v: usize, m: usize) -> f64 {
        self.data[self.index(c, t, v, m)]
    }

    fn set(&mut self, c: usize, t: usize, v: usize, m: usize, x: f64) {
        let i = self.index(c, t, v, m);
        self.data[i] = x;
    }

    /// Point at node `v` of graph `m` in frame `t` (3-channel branches).
    pub fn point(&self, t: usize, v: usize, m: usize) -> [f64; 3] {
        [self.get(0, t, v, m), self.get(1, t, v, m), self.get(2, t, v, m)]
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    fn fill_points(&mut self, clip: &SkeletonClip, f: impl Fn(usize, usize, usize) -> [f64; 3]) {
        for t in 0..clip.frames {
            for b in 0..BODIES {
                for j in 0..JOINTS {
                    let (v, m) = match self.graphs {
                        1 => (b * JOINTS + j, 0),
                        _ => (j, b),
                    };
                    let p = f(b, t, j);
                    (0..3).for_each(|c| self.set(c, t, v, m, p[c]));
                }
            }
        }
    }
}

pub fn has_second_person(clip: &SkeletonClip) -> bool {
    clip.bodies.get(1).is_some_and(|b| b.joints.iter().any(|p| *p != [0.0; 3]))
}

fn check(clip: &SkeletonClip) -> Result<(), FeatureError> {
    if clip.bodies.len() != BODIES || clip.frames == 0 {
        return Err(FeatureError::Misaligned);
    }
    Ok(())
}

fn pick(layout: Layout, intra: Branch, inter: Branch) -> Branch {
    match layout {
        Layout::Intra => intra,
        Layout::Inter => inter,
    }
}

/// Raw coordinates.
pub fn joint_feature(clip: &SkeletonClip, layout: Layout) -> Result<BranchInput, FeatureError> {
    check(clip)?;
    let mut out = BranchInput::zeros(pick(layout, Branch::J1, Branch::J2), clip, 3, layout);
    out.fill_points(clip, |b, t, j| clip.joint(b, t, j));
    Ok(out)
}

/// Frame differences; frame 0 is zero.
pub fn velocity_feature(clip: &SkeletonClip, layout: Layout) -> Result<BranchInput, FeatureError> {
    check(clip)?;
    let mut out = BranchInput::zeros(pick(layout, Branch::V1, Branch::V2), clip, 3, layout);
    out.fill_points(clip, |b, t, j| {
        if t == 0 {
            return [0.0; 3];
        }
        let (p, q) = (clip.joint(b, t, j), clip.joint(b, t - 1, j));
        [p[0] - q[0], p[1] - q[1], p[2] - q[2]]
    });
    Ok(out)
}

/// Vector from each joint's parent to the joint; zero at the root.
pub fn bone_feature(clip: &SkeletonClip) -> Result<BranchInput, FeatureError> {
    check(clip)?;
    let mut out = BranchInput::zeros(Branch::B1, clip, 3, Layout::Intra);
    out.fill_points(clip, |b, t, j| match parent_of(j) {
        Some(pj) => {
            let (p, q) = (clip.joint(b, t, j), clip.joint(b, t, pj));
            [p[0] - q[0], p[1] - q[1], p[2] - q[2]]
        }
        None => [0.0; 3],
    });
    Ok(out)
}

/// Six channels per node: distance from the joint to each representative
/// joint of the other body, in representative-joint order.
pub fn relative_distance_feature(clip: &SkeletonClip) -> Result<BranchInput, FeatureError> {
    check(clip)?;
    let mut out = BranchInput::zeros(Branch::B2, clip, REPRESENTATIVE_JOINTS.len(), Layout::Inter);
    for t in 0..clip.frames {
        for b in 0..BODIES {
            let other = 1 - b;
            for j in 0..JOINTS {
                let p = clip.joint(b, t, j);
                for (k, &r) in REPRESENTATIVE_JOINTS.iter().enumerate() {
                    out.set(k, t, b * JOINTS + j, 0, dist(p, clip.joint(other, t, r)));
                }
            }
        }
    }
    Ok(out)
}

/// The branches of one stream, stacked in the stream's fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamInput {
    pub kind: StreamKind,
    pub branches: Vec<BranchInput>,
}

impl StreamInput {
    /// `(I, M, C, T, V)` with `I` the branch count.
    pub fn shape(&self) -> [usize; 5] {
        let [m, c, t, v] = self.branches[0].shape();
        [self.branches.len(), m, c, t, v]
    }
}

pub fn assemble_stream_input(branches: Vec<BranchInput>) -> Result<StreamInput, FeatureError> {
    let first = branches.first().ok_or(FeatureError::Empty)?;
    let tags: Vec<Branch> = branches.iter().map(|b| b.branch).collect();
    let kind = crate::features::ALL_STREAMS
        .into_iter()
        .find(|s| s.branches() == tags.as_slice())
        .ok_or_else(|| FeatureError::BadBranchSet(tags.clone()))?;
    let want = [kind.graphs(), kind.channels(), first.frames, kind.nodes()];
    if let Some(b) = branches.iter().find(|b| b.shape() != want) {
        return Err(FeatureError::MixedLayout(b.branch, b.shape(), want));
    }
    Ok(StreamInput { kind, branches })
}

pub fn stream_input(clip: &SkeletonClip, kind: StreamKind) -> Result<StreamInput, FeatureError> {
    let branches = match kind {
        StreamKind::Intra => vec![
            joint_feature(clip, Layout::Intra)?,
            velocity_feature(clip, Layout::Intra)?,
            bone_feature(clip)?,
        ],
        StreamKind::InterMotion => vec![joint_feature(clip, Layout::Inter)?, velocity_feature(clip, Layout::Inter)?],
        StreamKind::InterDistance => vec![relative_distance_feature(clip)?],
    };
    assemble_stream_input(branches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::{align_clip_length, generate_synthetic_clip, BodyTrack};
    use proptest::prelude::*;

    fn clip_from(f: impl Fn(usize, usize, usize) -> [f64; 3], frames: usize) -> SkeletonClip {
        SkeletonClip {
            frames,
            bodies: (0..2)
                .map(|b| BodyTrack {
                    tracking_id: b as u64 + 1,
                    joints: (0..frames * JOINTS).map(|i| f(b, i / JOINTS, i % JOINTS)).collect(),
                })
                .collect(),
            label: 0,
        }
    }

    fn transform(p: [f64; 3], yaw: f64, pitch: f64, t: [f64; 3]) -> [f64; 3] {
        let (sy, cy) = yaw.sin_cos();
        let (sp, cp) = pitch.sin_cos();
        let (x, z) = (cy * p[0] + sy * p[2], -sy * p[0] + cy * p[2]);
        let (y, z) = (cp * p[1] - sp * z, sp * p[1] + cp * z);
        [x + t[0], y + t[1], z + t[2]]
    }

    fn moved(clip: &SkeletonClip, bodies: &[usize], yaw: f64, pitch: f64, t: [f64; 3]) -> SkeletonClip {
        let mut c = clip.clone();
        for &b in bodies {
            c.bodies[b].joints.iter_mut().for_each(|p| *p = transform(*p, yaw, pitch, t));
        }
        c
    }

    #[test]
    fn zero_clip_gives_zero_joints() {
        let c = clip_from(|_, _, _| [0.0; 3], 4);
        assert!(joint_feature(&c, Layout::Intra).unwrap().data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn inter_layout_places_bodies() {
        let c = clip_from(|b, t, j| if b == 1 { [0.0; 3] } else { [t as f64, j as f64, 1.0] }, 3);
        let f = joint_feature(&c, Layout::Inter).unwrap();
        assert_eq!(f.shape(), [1, 3, 3, 50]);
        assert!((25..50).all(|v| f.point(2, v, 0) == [0.0; 3]));
        // first body's head
        assert_eq!(f.point(2, 3, 0), c.joint(0, 2, 3));
        assert!(f.single_person);
    }

    #[test]
    fn velocity_examples() {
        let c = clip_from(|b, _, j| [b as f64, j as f64, 2.0], 5);
        assert!(velocity_feature(&c, Layout::Intra).unwrap().data.iter().all(|&v| v == 0.0));
        let c = clip_from(|b, t, j| [0.1 * t as f64 + j as f64, b as f64, 0.0], 5);
        let v = velocity_feature(&c, Layout::Inter).unwrap();
        assert_eq!(v.point(0, 7, 0), [0.0; 3]);
        for t in 1..5 {
            for n in 0..50 {
                let p = v.point(t, n, 0);
                assert!((p[0] - 0.1).abs() < 1e-12 && p[1] == 0.0 && p[2] == 0.0);
            }
        }
    }

    #[test]
    fn bone_examples() {
        let c = clip_from(|_, t, j| [0.0, 0.3 * j as f64, t as f64], 2);
        let b = bone_feature(&c).unwrap();
        assert_eq!(b.point(1, crate::graph::ROOT_JOINT, 1), [0.0; 3]);
        // joint 3 (head) hangs off joint 2 (neck): 0.3 apart along y
        let p = b.point(0, 3, 0);
        assert!(p[0] == 0.0 && (p[1] - 0.3).abs() < 1e-12 && p[2] == 0.0);
    }

    #[test]
    fn distance_examples() {
        // coincident bodies: channel k is the within-body distance to joint r_k
        let c = generate_synthetic_clip(0, 1).unwrap();
        let mut same = c.clone();
        same.bodies[1] = same.bodies[0].clone();
        let d = relative_distance_feature(&same).unwrap();
        for (k, &r) in REPRESENTATIVE_JOINTS.iter().enumerate() {
            assert_eq!(d.get(k, 10, 6, 0), dist(same.joint(0, 10, 6), same.joint(0, 10, r)));
        }
        // first body's right hand placed on the second body's left hand
        let mut touch = c.clone();
        touch.bodies[0].frame_mut(0)[11] = touch.joint(1, 0, 7);
        let d = relative_distance_feature(&touch).unwrap();
        assert_eq!(d.get(2, 0, 11, 0), 0.0);
        assert!(d.data.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn stream_shapes() {
        let c = generate_synthetic_clip(1, 2).unwrap();
        assert_eq!(stream_input(&c, StreamKind::Intra).unwrap().shape(), [3, 2, 3, 150, 25]);
        assert_eq!(stream_input(&c, StreamKind::InterMotion).unwrap().shape(), [2, 1, 3, 150, 50]);
        assert_eq!(stream_input(&c, StreamKind::InterDistance).unwrap().shape(), [1, 1, 6, 150, 50]);
        let mixed = vec![joint_feature(&c, Layout::Intra).unwrap(), velocity_feature(&c, Layout::Inter).unwrap()];
        assert!(assemble_stream_input(mixed).is_err());
        let short = align_clip_length(&c, 100).unwrap();
        let wrong = vec![joint_feature(&c, Layout::Inter).unwrap(), velocity_feature(&short, Layout::Inter).unwrap()];
        assert!(matches!(assemble_stream_input(wrong), Err(FeatureError::MixedLayout(..))));
        assert!(assemble_stream_input(vec![]).is_err());
    }

    #[test]
    fn zero_padding_leaves_one_velocity_spike() {
        let short = generate_synthetic_clip(2, 4).unwrap();
        let short = align_clip_length(&short, 100).unwrap();
        let padded = align_clip_length(&short, 150).unwrap();
        let v = velocity_feature(&padded, Layout::Intra).unwrap();
        let frame_nonzero = |t: usize| (0..25).any(|n| (0..2).any(|m| v.point(t, n, m) != [0.0; 3]));
        // the spike sits at the first padded frame and nowhere after it
        assert!(frame_nonzero(100));
        assert!((101..150).all(|t| !frame_nonzero(t)));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn invariance_contrast(seed in 0u64..500, yaw in -3.1f64..3.1, pitch in -1.0f64..1.0, tx in -3.0f64..3.0) {
            let c = generate_synthetic_clip((seed % 4) as usize, seed).unwrap();
            let shift = [tx, 0.4, -tx];
            let translated = moved(&c, &[0, 1], 0.0, 0.0, shift);
            let rigid = moved(&c, &[0, 1], yaw, pitch, shift);

            let bone = bone_feature(&c).unwrap();
            prop_assert!(bone.max_abs_diff(&bone_feature(&translated).unwrap()) < 1e-9);
            let vel = velocity_feature(&c, Layout::Intra).unwrap();
            prop_assert!(vel.max_abs_diff(&velocity_feature(&translated, Layout::Intra).unwrap()) < 1e-9);
            let d = relative_distance_feature(&c).unwrap();
            prop_assert!(d.max_abs_diff(&relative_distance_feature(&rigid).unwrap()) < 1e-9);
            let j = joint_feature(&c, Layout::Intra).unwrap();
            prop_assert!(j.max_abs_diff(&joint_feature(&translated, Layout::Intra).unwrap()) > 0.1);
        }
    }
}
