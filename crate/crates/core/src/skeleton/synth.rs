//! Synthetic two-person clips whose classes differ only in how the two
//! bodies move relative to each other.
//!
//! Both bodies walk the same distance on a shared schedule, each with its
//! own random facing direction and class-independent limb swing, so a single body carries no label
//! information.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{BodyTrack, Result, SkeletonClip, SkeletonError, ALIGNED_FRAMES};
use crate::graph::rest_pose;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthClass {
    Approach,
    Retreat,
    Pass,
    Follow,
}

pub const SYNTH_CLASSES: [SynthClass; 4] = [SynthClass::Approach, SynthClass::Retreat, SynthClass::Pass, SynthClass::Follow];

impl SynthClass {
    pub fn from_index(i: usize) -> Result<Self> {
        SYNTH_CLASSES.get(i).copied().ok_or(SkeletonError::UnknownClass(i))
    }

    pub fn name(self) -> &'static str {
        match self {
            SynthClass::Approach => "approach",
            SynthClass::Retreat => "retreat",
            SynthClass::Pass => "pass",
            SynthClass::Follow => "follow",
        }
    }
}

const TRAVEL: f64 = 0.8;
const JITTER: f64 = 0.01;

const LEFT_ARM: [usize; 5] = [5, 6, 7, 21, 22];
const RIGHT_ARM: [usize; 5] = [9, 10, 11, 23, 24];
const LEFT_LEG: [usize; 3] = [13, 14, 15];
const RIGHT_LEG: [usize; 3] = [17, 18, 19];

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

/// Rotation about the body's lateral axis through `pivot`.
fn swing(p: [f64; 3], pivot: [f64; 3], angle: f64) -> [f64; 3] {
    let (s, c) = angle.sin_cos();
    let (dy, dz) = (p[1] - pivot[1], p[2] - pivot[2]);
    [p[0], pivot[1] + c * dy - s * dz, pivot[2] + s * dy + c * dz]
}

fn yaw(p: [f64; 3], angle: f64) -> [f64; 3] {
    let (s, c) = angle.sin_cos();
    [c * p[0] + s * p[2], p[1], -s * p[0] + c * p[2]]
}

struct Walker {
    start: [f64; 2],
    dir: [f64; 2],
    facing: f64,
    scale: f64,
    arm_amp: f64,
    leg_amp: f64,
    freq: f64,
    phase: f64,
    t0: f64,
    t1: f64,
}

impl Walker {
    fn random(rng: &mut ChaCha8Rng, start: [f64; 2], dir: [f64; 2], (t0, t1): (f64, f64)) -> Self {
        Self {
            start,
            dir,
            facing: rng.random_range(0.0..2.0 * PI),
            scale: rng.random_range(0.9..1.1),
            arm_amp: rng.random_range(0.0..0.4),
            leg_amp: rng.random_range(0.0..0.3),
            freq: rng.random_range(0.5..1.5) / 30.0,
            phase: rng.random_range(0.0..2.0 * PI),
            t0,
            t1,
        }
    }

    fn position(&self, t: usize) -> [f64; 2] {
        let s = TRAVEL * smoothstep((t as f64 - self.t0) / (self.t1 - self.t0));
        [self.start[0] + s * self.dir[0], self.start[1] + s * self.dir[1]]
    }

    fn pose(&self, t: usize, out: &mut [[f64; 3]]) {
        let rest = rest_pose();
        let a = self.arm_amp * (2.0 * PI * self.freq * t as f64 + self.phase).sin();
        let l = self.leg_amp * (2.0 * PI * self.freq * t as f64 + self.phase).sin();
        let mut body = rest;
        for &j in &LEFT_ARM {
            body[j] = swing(rest[j], rest[4], a);
        }
        for &j in &RIGHT_ARM {
            body[j] = swing(rest[j], rest[8], -a);
        }
        for &j in &LEFT_LEG {
            body[j] = swing(rest[j], rest[12], -l);
        }
        for &j in &RIGHT_LEG {
            body[j] = swing(rest[j], rest[16], l);
        }
        let [x, z] = self.position(t);
        for (o, p) in out.iter_mut().zip(body) {
            let p = yaw([p[0] * self.scale, p[1] * self.scale, p[2] * self.scale], self.facing);
            *o = [p[0] + x, p[1], p[2] + z];
        }
    }
}

/// Deterministic clip for `(class, seed)` with [`ALIGNED_FRAMES`] frames.
pub fn generate_synthetic_clip(class: usize, seed: u64) -> Result<SkeletonClip> {
    let kind = SynthClass::from_index(class)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(class as u64);
    let heading = rng.random_range(0.0..2.0 * PI);
    let u = [heading.cos(), heading.sin()];
    let w = [-u[1], u[0]];
    let at = |along: f64, across: f64| [along * u[0] + across * w[0], along * u[1] + across * w[1]];
    let neg = |d: [f64; 2]| [-d[0], -d[1]];
    let (a, b) = match kind {
        SynthClass::Approach => {
            let d = rng.random_range(2.2..2.8);
            ((at(-d / 2.0, 0.0), u), (at(d / 2.0, 0.0), neg(u)))
        }
        SynthClass::Retreat => {
            let d = rng.random_range(0.6..1.2);
            ((at(-d / 2.0, 0.0), neg(u)), (at(d / 2.0, 0.0), u))
        }
        SynthClass::Pass => {
            let g = rng.random_range(0.6..1.0);
            ((at(-TRAVEL / 2.0, -g / 2.0), u), (at(TRAVEL / 2.0, g / 2.0), neg(u)))
        }
        SynthClass::Follow => {
            let d = rng.random_range(0.9..1.5);
            ((at(-d / 2.0, 0.0), u), (at(d / 2.0, 0.0), u))
        }
    };
    let timing = (rng.random_range(5.0..30.0), rng.random_range(110.0..145.0));
    let walkers = [Walker::random(&mut rng, a.0, a.1, timing), Walker::random(&mut rng, b.0, b.1, timing)];
    let global = rng.random_range(0.0..2.0 * PI);
    let shift = [rng.random_range(-1.0..1.0), 0.0, 3.0 + rng.random_range(-1.0..1.0)];
    let noise = Normal::new(0.0, JITTER).expect("valid deviation");

    let bodies = walkers
        .iter()
        .enumerate()
        .map(|(i, walker)| {
            let mut track = BodyTrack::zeros(i as u64 + 1, ALIGNED_FRAMES);
            for t in 0..ALIGNED_FRAMES {
                let frame = track.frame_mut(t);
                walker.pose(t, frame);
                for p in frame.iter_mut() {
                    let q = yaw(*p, global);
                    *p = [
                        q[0] + shift[0] + noise.sample(&mut rng),
                        q[1] + shift[1] + noise.sample(&mut rng),
                        q[2] + shift[2] + noise.sample(&mut rng),
                    ];
                }
            }
            track
        })
        .collect();
    Ok(SkeletonClip {
        frames: ALIGNED_FRAMES,
        bodies,
        label: class,
    })
}

/// Seed of the `index`-th clip of a corpus generated from `seed`.
pub fn clip_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(10_000).wrapping_add(index as u64)
}

pub fn synth_filename(class: usize, seed: u64) -> String {
    format!("SYNTH_{seed:06}_A{:03}.skeleton", class + 1)
}

/// `clips_per_class` clips of each of the first `classes` classes.
pub fn synth_corpus(classes: usize, clips_per_class: usize, seed: u64) -> Result<Vec<SkeletonClip>> {
    let mut out = Vec::with_capacity(classes * clips_per_class);
    for class in 0..classes {
        for i in 0..clips_per_class {
            out.push(generate_synthetic_clip(class, clip_seed(seed, i))?);
        }
    }
    Ok(out)
}
