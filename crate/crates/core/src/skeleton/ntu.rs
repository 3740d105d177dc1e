use std::fmt::Write;

use super::{BodyTrack, Result, SkeletonClip, SkeletonError};
use crate::graph::JOINTS;

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedClip {
    pub clip: SkeletonClip,
    /// Distinct tracks beyond the first two that were discarded.
    pub dropped_bodies: usize,
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self, what: &str) -> Result<&'a str> {
        match self.inner.next() {
            Some((i, l)) => {
                self.last = i + 1;
                Ok(l.trim())
            }
            None => Err(SkeletonError::Parse {
                line: self.last + 1,
                msg: format!("unexpected end of file, expected {what}"),
            }),
        }
    }

    fn err(&self, msg: impl Into<String>) -> SkeletonError {
        SkeletonError::Parse {
            line: self.last,
            msg: msg.into(),
        }
    }

    fn count(&mut self, what: &str) -> Result<usize> {
        let l = self.next(what)?;
        l.parse().map_err(|_| self.err(format!("expected {what}, found {l:?}")))
    }
}

/// Parses the dataset's text layout: a frame count, then per frame a body
/// count and per body a metadata line (tracking id first), a joint count,
/// and one line per joint whose first three fields are x y z.
///
/// Tracks are kept in order of first appearance; a track missing from a
/// frame is zero in that frame.
pub fn parse_skeleton_file(text: &str) -> Result<ParsedClip> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
        last: 0,
    };
    let frames = lines.count("frame count")?;
    let mut bodies: Vec<BodyTrack> = Vec::new();
    let mut dropped: Vec<u64> = Vec::new();
    for t in 0..frames {
        let n = lines.count("body count")?;
        for _ in 0..n {
            let meta = lines.next("body metadata")?;
            let id_field = meta.split_whitespace().next().unwrap_or("");
            let id: u64 = id_field
                .parse()
                .map_err(|_| lines.err(format!("bad tracking id {id_field:?}")))?;
            let joints = lines.count("joint count")?;
            if joints != JOINTS {
                return Err(lines.err(format!("joint count {joints}, expected {JOINTS}")));
            }
            let slot = match bodies.iter().position(|b| b.tracking_id == id) {
                Some(i) => Some(i),
                None if bodies.len() < 2 => {
                    bodies.push(BodyTrack::zeros(id, frames));
                    Some(bodies.len() - 1)
                }
                None => {
                    if !dropped.contains(&id) {
                        dropped.push(id);
                    }
                    None
                }
            };
            for j in 0..JOINTS {
                let l = lines.next("joint coordinates")?;
                let mut p = [0.0f64; 3];
                let mut fields = l.split_whitespace();
                for c in p.iter_mut() {
                    let f = fields.next().ok_or_else(|| lines.err("fewer than three coordinates"))?;
                    *c = f.parse().map_err(|_| lines.err(format!("non-numeric coordinate {f:?}")))?;
                    if !c.is_finite() {
                        return Err(lines.err("non-finite coordinate"));
                    }
                }
                if let Some(s) = slot {
                    bodies[s].frame_mut(t)[j] = p;
                }
            }
        }
    }
    if !dropped.is_empty() {
        log::warn!("dropped {} body track(s) beyond the first two", dropped.len());
    }
    Ok(ParsedClip {
        clip: SkeletonClip {
            frames,
            bodies,
            label: 0,
        },
        dropped_bodies: dropped.len(),
    })
}

/// Writes a clip in the layout read by [`parse_skeleton_file`]. Every track
/// is written in every frame; fields beyond x y z are zero.
pub fn serialize_skeleton(clip: &SkeletonClip) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{}", clip.frames);
    for t in 0..clip.frames {
        let _ = writeln!(s, "{}", clip.bodies.len());
        for b in &clip.bodies {
            let _ = writeln!(s, "{} 0 0 0 0 0 0 0 0 2", b.tracking_id);
            let _ = writeln!(s, "{JOINTS}");
            for p in b.frame(t) {
                let _ = writeln!(s, "{} {} {} 0 0 0 0 0 0 0 0 2", p[0], p[1], p[2]);
            }
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn body_block(id: u64, value: f64) -> String {
        let mut s = format!("{id} 0 1 1 1 1 0 0.1 0.2 2\n25\n");
        for _ in 0..JOINTS {
            s.push_str(&format!("{value} {value} {value} 1 2 3 4 0 0 0 0 2\n"));
        }
        s
    }

    #[test]
    fn single_zero_frame() {
        let text = format!("1\n1\n{}", body_block(7, 0.0));
        let p = parse_skeleton_file(&text).unwrap();
        assert_eq!(p.clip.frames, 1);
        assert_eq!(p.clip.bodies.len(), 1);
        assert!(p.clip.bodies[0].joints.iter().all(|j| *j == [0.0; 3]));
        assert_eq!(p.dropped_bodies, 0);
    }

    #[test]
    fn two_frames_two_bodies() {
        let frame = format!("2\n{}{}", body_block(1, 0.5), body_block(2, -0.5));
        let text = format!("2\n{frame}{frame}");
        let p = parse_skeleton_file(&text).unwrap();
        assert_eq!(p.clip.bodies.len(), 2);
        assert_eq!(p.clip.bodies[1].joints.len(), 2 * JOINTS);
        assert_eq!(p.clip.joint(1, 1, 24), [-0.5; 3]);
    }

    #[test]
    fn third_body_is_dropped() {
        let text = format!("1\n3\n{}{}{}", body_block(1, 0.1), body_block(2, 0.2), body_block(3, 0.3));
        let p = parse_skeleton_file(&text).unwrap();
        assert_eq!(p.clip.bodies.len(), 2);
        assert_eq!(p.dropped_bodies, 1);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let truncated = "2\n1\n5 0 0 0 0 0 0 0 0 2\n25\n0 0 0\n";
        match parse_skeleton_file(truncated) {
            Err(SkeletonError::Parse { line, .. }) => assert_eq!(line, 6),
            other => panic!("unexpected {other:?}"),
        }
        let bad_number = format!("1\n1\n{}", body_block(1, 0.0).replacen("0 0 0 1", "0 x 0 1", 1));
        match parse_skeleton_file(&bad_number) {
            Err(SkeletonError::Parse { line, msg }) => {
                assert_eq!(line, 5);
                assert!(msg.contains("non-numeric"));
            }
            other => panic!("unexpected {other:?}"),
        }
        let bad_joints = "1\n1\n5 0 0 0 0 0 0 0 0 2\n20\n";
        match parse_skeleton_file(bad_joints) {
            Err(SkeletonError::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn round_trip_on_synthetic_clips() {
        for class in 0..4 {
            let clip = crate::skeleton::generate_synthetic_clip(class, 11).unwrap();
            let back = parse_skeleton_file(&serialize_skeleton(&clip)).unwrap();
            let mut expect = clip.clone();
            expect.label = 0;
            assert_eq!(back.clip, expect);
        }
    }
}
