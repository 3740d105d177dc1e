//! Binary corpus of aligned two-person clips.
//!
//! Layout: one text header line
//! `IGCN-CORPUS v1 count=N frames=T joints=V bodies=M label_bytes=4`, then
//! per clip `T·M·V·3` little-endian `f32` coordinates (frame, body, joint,
//! axis order) followed by a little-endian `u32` label.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{BodyTrack, Result, SkeletonClip, SkeletonError, BODIES};
use crate::graph::JOINTS;

pub const CORPUS_MAGIC: &str = "IGCN-CORPUS v1";

fn corrupt(msg: impl Into<String>) -> SkeletonError {
    SkeletonError::Corpus(msg.into())
}

pub fn write_corpus(path: &Path, clips: &[SkeletonClip]) -> Result<()> {
    let frames = clips.first().map_or(0, |c| c.frames);
    if let Some(c) = clips.iter().find(|c| c.frames != frames || c.bodies.len() != BODIES) {
        return Err(corrupt(format!(
            "clip with {} frames and {} bodies does not match the corpus shape",
            c.frames,
            c.bodies.len()
        )));
    }
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        w,
        "{CORPUS_MAGIC} count={} frames={frames} joints={JOINTS} bodies={BODIES} label_bytes=4",
        clips.len()
    )?;
    for c in clips {
        for t in 0..frames {
            for b in &c.bodies {
                for p in b.frame(t) {
                    for v in p {
                        w.write_all(&(*v as f32).to_le_bytes())?;
                    }
                }
            }
        }
        let label = u32::try_from(c.label).map_err(|_| corrupt("label exceeds u32"))?;
        w.write_all(&label.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn header_field(header: &str, key: &str) -> Result<usize> {
    header
        .split_whitespace()
        .find_map(|f| f.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .ok_or_else(|| corrupt(format!("header lacks {key}")))?
        .parse()
        .map_err(|_| corrupt(format!("header field {key} is not a number")))
}

pub fn read_corpus(path: &Path) -> Result<Vec<SkeletonClip>> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut header = String::new();
    r.read_line(&mut header)?;
    if !header.starts_with(CORPUS_MAGIC) {
        return Err(corrupt("missing corpus header"));
    }
    let count = header_field(&header, "count")?;
    let frames = header_field(&header, "frames")?;
    if header_field(&header, "joints")? != JOINTS || header_field(&header, "bodies")? != BODIES || header_field(&header, "label_bytes")? != 4 {
        return Err(corrupt("unsupported corpus shape"));
    }
    let mut buf = vec![0u8; frames * BODIES * JOINTS * 3 * 4 + 4];
    let mut clips = Vec::with_capacity(count);
    for i in 0..count {
        r.read_exact(&mut buf).map_err(|_| corrupt(format!("truncated at clip {i}")))?;
        let mut vals = buf.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64);
        let mut bodies: Vec<BodyTrack> = (0..BODIES).map(|b| BodyTrack::zeros(b as u64 + 1, frames)).collect();
        for t in 0..frames {
            for body in bodies.iter_mut() {
                for p in body.frame_mut(t) {
                    for v in p.iter_mut() {
                        *v = vals.next().expect("buffer sized for clip");
                    }
                }
            }
        }
        let tail = &buf[buf.len() - 4..];
        let label = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]) as usize;
        clips.push(SkeletonClip { frames, bodies, label });
    }
    Ok(clips)
}

/// Action number `NNN` from a dataset filename containing `A<NNN>`.
pub fn label_from_filename(name: &str) -> Option<u32> {
    let b = name.as_bytes();
    (0..b.len().saturating_sub(3)).find_map(|i| {
        let digits = &b[i + 1..i + 4];
        if b[i] == b'A' && digits.iter().all(u8::is_ascii_digit) && b.get(i + 4).is_none_or(|c| !c.is_ascii_digit()) {
            std::str::from_utf8(digits).ok()?.parse().ok()
        } else {
            None
        }
    })
}
