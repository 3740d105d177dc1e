//! Two-person skeleton clips: parsing, pairing, length alignment, synthetic
//! generation, and the preprocessed corpus file.

mod corpus;
mod ntu;
mod synth;

pub use corpus::{label_from_filename, read_corpus, write_corpus, CORPUS_MAGIC};
pub use ntu::{parse_skeleton_file, serialize_skeleton, ParsedClip};
pub use synth::{clip_seed, generate_synthetic_clip, synth_corpus, synth_filename, SynthClass, SYNTH_CLASSES};

use thiserror::Error;

use crate::graph::JOINTS;

/// Frame count every clip is aligned to.
pub const ALIGNED_FRAMES: usize = 150;
/// Body slots fed to the network.
pub const BODIES: usize = 2;

#[derive(Debug, Error)]
pub enum SkeletonError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("clip has no frames")]
    EmptyClip,
    #[error("clip has no body tracks")]
    NoBodies,
    #[error("unknown synthetic class {0}")]
    UnknownClass(usize),
    #[error("corpus: {0}")]
    Corpus(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = SkeletonError> = std::result::Result<T, E>;

/// One body's joints over time, `frames × 25` points.
#[derive(Debug, Clone, PartialEq)]
pub struct BodyTrack {
    pub tracking_id: u64,
    pub joints: Vec<[f64; 3]>,
}

impl BodyTrack {
    pub fn zeros(tracking_id: u64, frames: usize) -> Self {
        Self {
            tracking_id,
            joints: vec![[0.0; 3]; frames * JOINTS],
        }
    }

    pub fn frame(&self, t: usize) -> &[[f64; 3]] {
        &self.joints[t * JOINTS..(t + 1) * JOINTS]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [[f64; 3]] {
        &mut self.joints[t * JOINTS..(t + 1) * JOINTS]
    }

    /// Sum over frames and joints of the displacement length between
    /// consecutive frames.
    pub fn motion_energy(&self) -> f64 {
        self.joints
            .windows(JOINTS + 1)
            .map(|w| dist(w[0], w[JOINTS]))
            .sum()
    }
}

pub(crate) fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonClip {
    pub frames: usize,
    pub bodies: Vec<BodyTrack>,
    pub label: usize,
}

impl SkeletonClip {
    pub fn joint(&self, body: usize, t: usize, j: usize) -> [f64; 3] {
        self.bodies[body].joints[t * JOINTS + j]
    }

    pub fn is_finite(&self) -> bool {
        self.bodies
            .iter()
            .all(|b| b.joints.iter().all(|p| p.iter().all(|c| c.is_finite())))
    }

    /// True when the clip has the frame count and body slots the network expects.
    pub fn is_aligned(&self) -> bool {
        self.frames == ALIGNED_FRAMES && self.bodies.len() == BODIES && self.bodies.iter().all(|b| b.joints.len() == self.frames * JOINTS)
    }
}

/// Pads short clips with trailing zero frames and centre-crops long ones.
pub fn align_clip_length(clip: &SkeletonClip, target: usize) -> Result<SkeletonClip> {
    if clip.frames == 0 {
        return Err(SkeletonError::EmptyClip);
    }
    let start = clip.frames.saturating_sub(target) / 2;
    let keep = clip.frames.min(target);
    let bodies = clip
        .bodies
        .iter()
        .map(|b| {
            let mut joints = b.joints[start * JOINTS..(start + keep) * JOINTS].to_vec();
            joints.resize(target * JOINTS, [0.0; 3]);
            BodyTrack {
                tracking_id: b.tracking_id,
                joints,
            }
        })
        .collect();
    Ok(SkeletonClip {
        frames: target,
        bodies,
        label: clip.label,
    })
}

/// Keeps the two most active tracks, most active first; ties go to the lower
/// tracking id. A missing second person becomes an all-zero track.
pub fn select_two_bodies(clip: &SkeletonClip) -> Result<SkeletonClip> {
    if clip.bodies.is_empty() {
        return Err(SkeletonError::NoBodies);
    }
    let mut ranked: Vec<(f64, &BodyTrack)> = clip.bodies.iter().map(|b| (b.motion_energy(), b)).collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.tracking_id.cmp(&b.1.tracking_id)));
    let mut bodies: Vec<BodyTrack> = ranked.iter().take(BODIES).map(|(_, b)| (*b).clone()).collect();
    if bodies.len() < BODIES {
        bodies.push(BodyTrack::zeros(0, clip.frames));
    }
    Ok(SkeletonClip {
        frames: clip.frames,
        bodies,
        label: clip.label,
    })
}

/// Pairing followed by length alignment to [`ALIGNED_FRAMES`].
pub fn prepare_clip(clip: &SkeletonClip) -> Result<SkeletonClip> {
    align_clip_length(&select_two_bodies(clip)?, ALIGNED_FRAMES)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp_clip(frames: usize, bodies: usize) -> SkeletonClip {
        let bodies = (0..bodies)
            .map(|b| BodyTrack {
                tracking_id: 10 + b as u64,
                joints: (0..frames * JOINTS)
                    .map(|i| [(i / JOINTS) as f64 + 1.0, b as f64, 0.5])
                    .collect(),
            })
            .collect();
        SkeletonClip {
            frames,
            bodies,
            label: 3,
        }
    }

    #[test]
    fn align_identity_pad_and_crop() {
        let c = ramp_clip(150, 1);
        assert_eq!(align_clip_length(&c, 150).unwrap(), c);

        let c = ramp_clip(100, 1);
        let a = align_clip_length(&c, 150).unwrap();
        assert_eq!(a.frames, 150);
        assert_eq!(a.bodies[0].frame(99), c.bodies[0].frame(99));
        assert!((100..150).all(|t| a.bodies[0].frame(t).iter().all(|p| *p == [0.0; 3])));

        let c = ramp_clip(300, 1);
        let a = align_clip_length(&c, 150).unwrap();
        // frame t of the source holds x = t + 1
        assert_eq!(a.joint(0, 0, 0)[0], 76.0);
        assert_eq!(a.joint(0, 149, 0)[0], 225.0);
    }

    #[test]
    fn align_rejects_empty() {
        let c = SkeletonClip {
            frames: 0,
            bodies: vec![],
            label: 0,
        };
        assert!(matches!(align_clip_length(&c, 150), Err(SkeletonError::EmptyClip)));
    }

    #[test]
    fn select_ranks_by_motion_energy() {
        let mut c = ramp_clip(4, 2);
        // body 0 static, body 1 moving
        c.bodies[0].joints.iter_mut().for_each(|p| *p = [1.0, 1.0, 1.0]);
        let s = select_two_bodies(&c).unwrap();
        assert_eq!(s.bodies[0].tracking_id, 11);
        assert_eq!(s.bodies[1].tracking_id, 10);
        // 3 steps of length 1 for 25 joints
        assert_eq!(c.bodies[1].motion_energy(), 75.0);
    }

    #[test]
    fn select_pads_single_body_and_breaks_ties_by_id() {
        let s = select_two_bodies(&ramp_clip(3, 1)).unwrap();
        assert_eq!(s.bodies.len(), 2);
        assert!(s.bodies[1].joints.iter().all(|p| *p == [0.0; 3]));

        let mut c = ramp_clip(3, 2);
        c.bodies.iter_mut().for_each(|b| b.joints.iter_mut().for_each(|p| *p = [0.2; 3]));
        c.bodies.swap(0, 1);
        let s = select_two_bodies(&c).unwrap();
        assert_eq!(s.bodies[0].tracking_id, 10);

        let none = SkeletonClip {
            frames: 3,
            bodies: vec![],
            label: 0,
        };
        assert!(select_two_bodies(&none).is_err());
    }

    proptest! {
        #[test]
        fn align_is_idempotent(frames in 1usize..400, target in 1usize..200) {
            let c = ramp_clip(frames, 1);
            let once = align_clip_length(&c, target).unwrap();
            let twice = align_clip_length(&once, target).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn select_keeps_at_most_two_deterministically(n in 1usize..5, seed in 0u64..1000) {
            let mut c = ramp_clip(5, n);
            for (i, b) in c.bodies.iter_mut().enumerate() {
                let k = ((seed + i as u64 * 7) % 5) as f64;
                b.joints.iter_mut().enumerate().for_each(|(j, p)| p[2] = k * (j / JOINTS) as f64);
            }
            let a = select_two_bodies(&c).unwrap();
            prop_assert_eq!(a.bodies.len(), 2);
            prop_assert_eq!(a, select_two_bodies(&c).unwrap());
        }
    }
}
