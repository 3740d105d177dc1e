use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::features::StreamKind;

/// Per-step width growth under compound scaling.
pub const WIDTH_BASE: f64 = 1.2;
/// Per-step depth growth under compound scaling.
pub const DEPTH_BASE: f64 = 1.35;

pub fn width_multiplier(phi: u32) -> f64 {
    WIDTH_BASE.powi(phi as i32)
}

pub fn depth_multiplier(phi: u32) -> f64 {
    DEPTH_BASE.powi(phi as i32)
}

/// Nearest multiple of 4, at least 4.
pub fn round_width(x: f64) -> usize {
    (((x / 4.0).round() as usize) * 4).max(4)
}

/// Nearest integer, at least 1.
pub fn round_depth(x: f64) -> usize {
    (x.round() as usize).max(1)
}

/// One block of the layout table: a graph convolution, `depth` temporal
/// convolutions (before scaling), and optional attention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub width: usize,
    pub stride: usize,
    pub depth: f64,
    pub attention: bool,
}

impl BlockSpec {
    pub const fn new(width: usize, stride: usize, depth: f64, attention: bool) -> Self {
        Self {
            width,
            stride,
            depth,
            attention,
        }
    }
}

/// Stem width, per-branch blocks before fusion, and shared blocks after it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamLayout {
    pub stem: usize,
    pub branch: Vec<BlockSpec>,
    pub main: Vec<BlockSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamLayouts {
    pub intra: StreamLayout,
    pub inter_motion: StreamLayout,
    pub inter_distance: StreamLayout,
}

impl Default for StreamLayouts {
    fn default() -> Self {
        let branch = |w| vec![BlockSpec::new(w, 1, 0.25, true), BlockSpec::new(w, 1, 0.25, true)];
        let main = |a, b| vec![BlockSpec::new(a, 2, 1.0, true), BlockSpec::new(b, 2, 1.0, true)];
        Self {
            intra: StreamLayout {
                stem: 64,
                branch: branch(24),
                main: main(80, 144),
            },
            inter_motion: StreamLayout {
                stem: 32,
                branch: branch(24),
                main: main(80, 128),
            },
            inter_distance: StreamLayout {
                stem: 16,
                branch: branch(16),
                main: main(96, 112),
            },
        }
    }
}

impl StreamLayouts {
    pub fn get(&self, kind: StreamKind) -> &StreamLayout {
        match kind {
            StreamKind::Intra => &self.intra,
            StreamKind::InterMotion => &self.inter_motion,
            StreamKind::InterDistance => &self.inter_distance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Compound scaling coefficient.
    pub phi: u32,
    pub num_classes: usize,
    /// Length of the per-channel temporal kernel.
    pub temporal_kernel: usize,
    pub residual: bool,
    /// Input-dependent adjacency term in every graph convolution.
    pub similarity: bool,
    /// Divides every base width before scaling.
    pub width_divisor: u32,
    pub streams: StreamLayouts,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            phi: 0,
            num_classes: 26,
            temporal_kernel: 5,
            residual: true,
            similarity: true,
            width_divisor: 1,
            streams: StreamLayouts::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockShape {
    pub width: usize,
    pub stride: usize,
    /// Temporal convolutions in the block.
    pub repeats: usize,
    pub attention: bool,
}

/// Concrete widths and depths of one stream after scaling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamShape {
    pub kind: StreamKind,
    pub stem: usize,
    pub branch: Vec<BlockShape>,
    pub main: Vec<BlockShape>,
}

impl ModelConfig {
    /// Interaction subset of the 60-class corpus.
    pub fn ntu60() -> Self {
        Self {
            num_classes: 11,
            ..Self::default()
        }
    }

    /// Interaction subset of the 120-class corpus.
    pub fn ntu120() -> Self {
        Self::default()
    }

    /// Quarter-width variant for desk-scale training.
    pub fn tiny(num_classes: usize) -> Self {
        Self {
            num_classes,
            width_divisor: 4,
            ..Self::default()
        }
    }

    pub fn name(&self) -> String {
        format!("3s-EGCN-IIG (B{})", self.phi)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ModelError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ModelError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        if self.temporal_kernel == 0 || self.temporal_kernel.is_multiple_of(2) {
            return bad(format!("temporal_kernel must be odd, got {}", self.temporal_kernel));
        }
        if self.width_divisor == 0 {
            return bad("width_divisor must be positive".into());
        }
        for kind in crate::features::ALL_STREAMS {
            let layout = self.streams.get(kind);
            if layout.stem == 0 {
                return bad(format!("stream {kind}: stem width must be positive"));
            }
            if layout.main.is_empty() {
                return bad(format!("stream {kind}: no blocks after fusion"));
            }
            for b in layout.branch.iter().chain(&layout.main) {
                if b.width == 0 || !(b.depth > 0.0) || !matches!(b.stride, 1 | 2) {
                    return bad(format!("stream {kind}: invalid block {b:?}"));
                }
            }
        }
        Ok(())
    }

    fn scaled_width(&self, base: usize) -> usize {
        round_width(base as f64 / self.width_divisor as f64 * width_multiplier(self.phi))
    }

    fn block_shape(&self, b: &BlockSpec) -> BlockShape {
        BlockShape {
            width: self.scaled_width(b.width),
            stride: b.stride,
            repeats: round_depth(b.depth * depth_multiplier(self.phi)),
            attention: b.attention,
        }
    }

    pub fn stream_shape(&self, kind: StreamKind) -> StreamShape {
        let layout = self.streams.get(kind);
        StreamShape {
            kind,
            stem: self.scaled_width(layout.stem),
            branch: layout.branch.iter().map(|b| self.block_shape(b)).collect(),
            main: layout.main.iter().map(|b| self.block_shape(b)).collect(),
        }
    }
}

/// `base` at scaling coefficient `phi`.
pub fn scale_config(base: &ModelConfig, phi: u32) -> ModelConfig {
    ModelConfig { phi, ..base.clone() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::ALL_STREAMS;

    #[test]
    fn multipliers() {
        assert!((width_multiplier(4) - 2.0736).abs() < 1e-12);
        assert!((depth_multiplier(4) - 3.32150625).abs() < 1e-12);
        assert!((WIDTH_BASE * WIDTH_BASE * DEPTH_BASE - 1.944).abs() < 1e-12);
    }

    #[test]
    fn phi_zero_is_unchanged() {
        let base = ModelConfig::default();
        let same = scale_config(&base, 0);
        assert_eq!(same, base);
        for kind in ALL_STREAMS {
            let shape = same.stream_shape(kind);
            let layout = base.streams.get(kind);
            assert_eq!(shape.stem, layout.stem);
            for (s, b) in shape.main.iter().zip(&layout.main) {
                assert_eq!(s.width, b.width);
                assert_eq!(s.repeats, round_depth(b.depth));
            }
        }
    }

    #[test]
    fn scaled_widths_are_rounded_multiples_of_four() {
        let b4 = scale_config(&ModelConfig::default(), 4);
        let shape = b4.stream_shape(StreamKind::Intra);
        assert_eq!(shape.stem, round_width(64.0 * 2.0736));
        assert_eq!(shape.stem, 132);
        assert_eq!(shape.main[0].repeats, 3);
        assert_eq!(shape.branch[0].repeats, 1);
        for b in shape.branch.iter().chain(&shape.main) {
            assert_eq!(b.width % 4, 0);
        }
        assert_eq!(round_width(1.0), 4);
        assert_eq!(round_width(9.9), 8);
        assert_eq!(round_width(10.1), 12);
    }

    #[test]
    fn names() {
        assert_eq!(ModelConfig::default().name(), "3s-EGCN-IIG (B0)");
        assert_eq!(scale_config(&ModelConfig::default(), 4).name(), "3s-EGCN-IIG (B4)");
    }

    #[test]
    fn toml_round_trip_and_validation() {
        let cfg = ModelConfig::tiny(4);
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(ModelConfig::from_toml_str(&text).unwrap(), cfg);
        let partial = ModelConfig::from_toml_str("phi = 2\nnum_classes = 11\n").unwrap();
        assert_eq!(partial.phi, 2);
        assert_eq!(partial.streams, StreamLayouts::default());
        assert!(ModelConfig::from_toml_str("temporal_kernel = 4").is_err());
        assert!(ModelConfig::from_toml_str("bogus = 1").is_err());
    }
}
