use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{mix_seed, NUM_PARTS};

const APPEARANCE_STREAM: u64 = 0xA99E_A2A1;
const PROTOTYPE_STREAM: u64 = 0x9207_0797;

/// Number of shared colour prototypes per part. Identities that draw the same
/// prototype have near-identical parts, so single parts are not always
/// identity-discriminative.
const PROTOTYPES_PER_PART: usize = 4;
const PROTOTYPE_SHARE_PROB: f64 = 0.5;
const PROTOTYPE_JITTER: f64 = 0.05;

/// Colour/texture descriptor of one body part: a base colour, an accent
/// colour and a stripe pattern blending the two.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartPalette {
    pub color: [f32; 3],
    pub accent: [f32; 3],
    /// Stripe frequency in radians per pixel.
    pub frequency: f32,
    /// Stripe direction in radians (0 = horizontal bands).
    pub orientation: f32,
    /// Accent mixing strength in `[0, 1]`.
    pub contrast: f32,
}

impl PartPalette {
    pub fn as_vector(&self) -> [f32; 9] {
        [
            self.color[0],
            self.color[1],
            self.color[2],
            self.accent[0],
            self.accent[1],
            self.accent[2],
            self.frequency,
            self.orientation,
            self.contrast,
        ]
    }

    /// Colour at image pixel `(row, col)`.
    pub fn shade(&self, row: f32, col: f32) -> [f32; 3] {
        let t = self.frequency * (row * self.orientation.cos() + col * self.orientation.sin());
        let mix = self.contrast * 0.5 * (1.0 + t.sin());
        std::array::from_fn(|c| self.color[c] * (1.0 - mix) + self.accent[c] * mix)
    }
}

/// Identity-level body proportions; pose jitter is applied on top at render time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BodyGeometry {
    pub height_scale: f32,
    pub width_scale: f32,
    /// Fraction of body height where the legs start.
    pub hip_line: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentityAppearance {
    pub global_seed: u64,
    pub identity_id: u64,
    pub part_palette: Vec<PartPalette>,
    pub body_geometry: BodyGeometry,
}

/// Deterministic appearance for `identity_id` under `global_seed`.
pub fn generate_identity(global_seed: u64, identity_id: u64) -> IdentityAppearance {
    let prototypes = part_prototypes(global_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[global_seed, APPEARANCE_STREAM, identity_id]));
    let jitter = Normal::new(0.0, PROTOTYPE_JITTER).expect("finite std");

    let part_palette = (0..NUM_PARTS)
        .map(|part| {
            let color = if rng.random_bool(PROTOTYPE_SHARE_PROB) {
                let proto = prototypes[part][rng.random_range(0..PROTOTYPES_PER_PART)];
                proto.map(|v| (v as f64 + jitter.sample(&mut rng)).clamp(0.0, 1.0) as f32)
            } else {
                random_color(&mut rng)
            };
            PartPalette {
                color,
                accent: random_color(&mut rng),
                frequency: rng.random_range(0.4..1.6),
                orientation: rng.random_range(0.0..std::f32::consts::PI),
                contrast: rng.random_range(0.15..0.6),
            }
        })
        .collect();

    let body_geometry = BodyGeometry {
        height_scale: rng.random_range(0.92..1.04),
        width_scale: rng.random_range(0.9..1.1),
        hip_line: rng.random_range(0.5..0.56),
    };

    IdentityAppearance {
        global_seed,
        identity_id,
        part_palette,
        body_geometry,
    }
}

fn part_prototypes(global_seed: u64) -> Vec<Vec<[f32; 3]>> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[global_seed, PROTOTYPE_STREAM]));
    (0..NUM_PARTS)
        .map(|_| (0..PROTOTYPES_PER_PART).map(|_| random_color(&mut rng)).collect())
        .collect()
}

fn random_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    std::array::from_fn(|_| rng.random_range(0.05..0.95))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_inputs_same_appearance() {
        assert_eq!(generate_identity(7, 3), generate_identity(7, 3));
    }

    #[test]
    fn distinct_identities_differ_in_some_part() {
        let a = generate_identity(7, 3);
        let b = generate_identity(7, 4);
        assert_eq!(a.part_palette.len(), NUM_PARTS);
        assert!(a
            .part_palette
            .iter()
            .zip(&b.part_palette)
            .any(|(p, q)| p.as_vector() != q.as_vector()));
    }

    #[test]
    fn seed_changes_appearance() {
        let a = generate_identity(7, 3);
        let b = generate_identity(8, 3);
        assert_ne!(a.part_palette, b.part_palette);
    }

    #[test]
    fn palettes_pairwise_distinct_over_many_ids() {
        let ids: Vec<_> = (0..50).map(|i| generate_identity(11, i)).collect();
        for i in 0..ids.len() {
            for j in i + 1..ids.len() {
                assert_ne!(ids[i].part_palette, ids[j].part_palette, "{i} vs {j}");
            }
        }
    }
}
