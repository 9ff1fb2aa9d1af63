//! Procedural occluded-pedestrian generator with exact ground truth.
//!
//! Every sample is a pure function of the dataset seed and a few integers
//! (identity, pose, camera, occluder placement), so labels can be checked
//! against the renderer's own geometry.

mod appearance;
mod io;
mod render;
mod splits;

pub use appearance::{generate_identity, BodyGeometry, IdentityAppearance, PartPalette};
pub use io::{export_splits, import_splits, split_checksums, Manifest, SplitFile, DATASET_FORMAT_VERSION};
pub use render::{render_sample, Canvas, RenderOutput};
pub use splits::{identity_balanced_batches, make_splits, DataConfig, DatasetSplits};

use serde::{Deserialize, Serialize};

use crate::error::{data_err, Result};

/// Number of body parts rendered by the generator.
pub const NUM_PARTS: usize = 6;

/// Largest occluder coverage accepted; beyond this the subject is gone.
pub const MAX_COVERAGE: f64 = 0.95;

/// Per-pixel part membership at feature-map resolution: 0 is background,
/// `x` in `1..=n_parts` is body part `x`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsingLabel {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl ParsingLabel {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return data_err(format!(
                "parsing label has {} values for a {height}x{width} grid",
                data.len()
            ));
        }
        Ok(Self { height, width, data })
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    /// Whether part `x` has at least one labelled pixel.
    pub fn contains(&self, class: u8) -> bool {
        self.data.contains(&class)
    }

    pub fn validate(&self, n_parts: usize) -> Result<()> {
        match self.data.iter().find(|&&v| v as usize > n_parts) {
            Some(v) => data_err(format!("parsing label value {v} outside 0..={n_parts}")),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OcclusionKind {
    None,
    Rectangle,
    BottomCrop,
    InterPerson,
}

impl OcclusionKind {
    pub const OCCLUDING: [OcclusionKind; 3] = [
        OcclusionKind::Rectangle,
        OcclusionKind::BottomCrop,
        OcclusionKind::InterPerson,
    ];

    pub fn code(self) -> u8 {
        match self {
            OcclusionKind::None => 0,
            OcclusionKind::Rectangle => 1,
            OcclusionKind::BottomCrop => 2,
            OcclusionKind::InterPerson => 3,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            0 => OcclusionKind::None,
            1 => OcclusionKind::Rectangle,
            2 => OcclusionKind::BottomCrop,
            3 => OcclusionKind::InterPerson,
            other => return data_err(format!("unknown occlusion code {other}")),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OcclusionSpec {
    pub kind: OcclusionKind,
    pub coverage: f64,
    pub placement_seed: u64,
}

impl OcclusionSpec {
    pub fn none() -> Self {
        Self {
            kind: OcclusionKind::None,
            coverage: 0.0,
            placement_seed: 0,
        }
    }

    pub fn new(kind: OcclusionKind, coverage: f64, placement_seed: u64) -> Result<Self> {
        let spec = Self {
            kind,
            coverage,
            placement_seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.coverage) {
            return data_err(format!("occlusion coverage {} outside [0, 1]", self.coverage));
        }
        if self.coverage > MAX_COVERAGE {
            return data_err(format!(
                "occlusion coverage {} above {MAX_COVERAGE} hides the subject",
                self.coverage
            ));
        }
        if (self.coverage == 0.0) != (self.kind == OcclusionKind::None) {
            return data_err(format!(
                "coverage {} inconsistent with occlusion kind {:?}",
                self.coverage, self.kind
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Channel-major RGB, `3 * image_height * image_width` values in `[0, 1]`.
    pub image: Vec<f32>,
    pub image_height: usize,
    pub image_width: usize,
    pub identity: u32,
    pub parsing_label: ParsingLabel,
    pub camera_id: u32,
    pub occlusion: OcclusionSpec,
}

impl Sample {
    /// Parts with at least one visible labelled pixel.
    pub fn visible_parts(&self, n_parts: usize) -> Vec<bool> {
        (1..=n_parts)
            .map(|x| self.parsing_label.contains(x as u8))
            .collect()
    }
}

/// SplitMix64 over a sequence of words; gives independent generator streams
/// for (seed, identity, index, ...) tuples.
pub(crate) fn mix_seed(words: &[u64]) -> u64 {
    let mut state = 0x9E37_79B9_7F4A_7C15u64;
    for &w in words {
        state ^= w;
        state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        state = z ^ (z >> 31);
    }
    state
}
