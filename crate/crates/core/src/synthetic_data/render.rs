use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::appearance::{generate_identity, IdentityAppearance};
use super::{mix_seed, OcclusionKind, OcclusionSpec, ParsingLabel, Sample, NUM_PARTS};
use crate::error::{config_err, Result};

const POSE_STREAM: u64 = 0x9055;
const OCCLUDER_STREAM: u64 = 0x0CC1;
/// Distractor identities live far outside any dataset id range.
const DISTRACTOR_BASE: u64 = 1 << 40;
const DISTRACTOR_POOL: u64 = 4096;
const PIXEL_NOISE: f64 = 0.02;

/// Body-normalised part boxes `(v0, v1, u0, u1)`; `v` runs down the body and
/// `u` across it. The hip line replaces `HIP` at layout time.
const HIP: f32 = -1.0;
const PART_BOXES: [(f32, f32, f32, f32, bool); NUM_PARTS] = [
    (0.0, 0.17, 0.3, 0.7, true),     // 1: head (ellipse)
    (0.18, HIP, 0.0, 0.22, false),   // 2: left hand
    (0.18, HIP, 0.78, 1.0, false),   // 3: right hand
    (0.16, HIP, 0.22, 0.78, false),  // 4: upper body
    (HIP, 1.0, 0.24, 0.49, false),   // 5: left leg
    (HIP, 1.0, 0.51, 0.76, false),   // 6: right leg
];

/// Image and label grid sizes. The label grid is the encoder's output grid;
/// labels are nearest-neighbour samples of the full-resolution part mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Canvas {
    pub image_height: usize,
    pub image_width: usize,
    pub label_height: usize,
    pub label_width: usize,
}

impl Default for Canvas {
    fn default() -> Self {
        Self {
            image_height: 64,
            image_width: 32,
            label_height: 16,
            label_width: 8,
        }
    }
}

/// A rendered sample together with the full-resolution part mask.
#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub sample: Sample,
    /// `image_height * image_width` part indices after occlusion.
    pub full_mask: Vec<u8>,
    /// Part indices of the subject before occlusion was applied.
    pub unoccluded_mask: Vec<u8>,
}

#[derive(Debug, Clone, Copy)]
struct PlacedPart {
    part: u8,
    top: f32,
    bottom: f32,
    left: f32,
    right: f32,
    ellipse: bool,
}

impl PlacedPart {
    fn contains(&self, y: f32, x: f32) -> bool {
        if self.ellipse {
            let cy = 0.5 * (self.top + self.bottom);
            let cx = 0.5 * (self.left + self.right);
            let ry = 0.5 * (self.bottom - self.top);
            let rx = 0.5 * (self.right - self.left);
            let dy = (y - cy) / ry;
            let dx = (x - cx) / rx;
            dy * dy + dx * dx <= 1.0
        } else {
            y >= self.top && y < self.bottom && x >= self.left && x < self.right
        }
    }
}

/// Renders with the default 64x32 canvas and 16x8 label grid.
pub fn render_sample(
    app: &IdentityAppearance,
    pose_seed: u64,
    occ: &OcclusionSpec,
    camera_id: u32,
) -> Result<Sample> {
    Canvas::default().render(app, pose_seed, occ, camera_id)
}

impl Canvas {
    pub fn validate(&self) -> Result<()> {
        if self.label_height == 0
            || self.label_width == 0
            || self.image_height % self.label_height != 0
            || self.image_width % self.label_width != 0
        {
            return config_err(format!(
                "label grid {}x{} must evenly divide image {}x{}",
                self.label_height, self.label_width, self.image_height, self.image_width
            ));
        }
        Ok(())
    }

    pub fn render(
        &self,
        app: &IdentityAppearance,
        pose_seed: u64,
        occ: &OcclusionSpec,
        camera_id: u32,
    ) -> Result<Sample> {
        Ok(self.render_full(app, pose_seed, occ, camera_id)?.sample)
    }

    pub fn render_full(
        &self,
        app: &IdentityAppearance,
        pose_seed: u64,
        occ: &OcclusionSpec,
        camera_id: u32,
    ) -> Result<RenderOutput> {
        self.validate()?;
        occ.validate()?;
        let (h, w) = (self.image_height, self.image_width);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[
            app.global_seed,
            POSE_STREAM,
            app.identity_id,
            pose_seed,
        ]));

        let mut image = self.background(&mut rng);
        let mut mask = vec![0u8; h * w];

        let subject = self.layout(app, &mut rng, 0.0);
        self.paint_person(app, &subject, &mut image, Some(&mut mask));
        let unoccluded_mask = mask.clone();

        let mut occ_rng = ChaCha8Rng::seed_from_u64(mix_seed(&[
            app.global_seed,
            OCCLUDER_STREAM,
            occ.placement_seed,
        ]));
        match occ.kind {
            OcclusionKind::None => {}
            OcclusionKind::Rectangle => {
                let (top, bottom, left, right) = self.rectangle_occluder(&subject, occ.coverage, &mut occ_rng);
                self.paint_occluder(&mut image, &mut mask, (top, bottom, left, right), &mut occ_rng);
            }
            OcclusionKind::BottomCrop => {
                let rows = (occ.coverage * h as f64).round() as usize;
                self.paint_occluder(&mut image, &mut mask, (h - rows, h, 0, w), &mut occ_rng);
            }
            OcclusionKind::InterPerson => {
                let distractor = generate_identity(
                    app.global_seed,
                    DISTRACTOR_BASE + occ.placement_seed % DISTRACTOR_POOL,
                );
                let side = if occ_rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let offset = side * (1.0 - occ.coverage as f32) * w as f32;
                let parts = self.layout(&distractor, &mut occ_rng, offset);
                let mut distractor_mask = vec![0u8; h * w];
                self.paint_person(&distractor, &parts, &mut image, Some(&mut distractor_mask));
                for (m, d) in mask.iter_mut().zip(&distractor_mask) {
                    if *d != 0 {
                        *m = 0;
                    }
                }
            }
        }

        self.apply_camera(&mut image, camera_id, &mut rng);

        let label = self.downsample(&mask)?;
        Ok(RenderOutput {
            sample: Sample {
                image,
                image_height: h,
                image_width: w,
                identity: app.identity_id as u32,
                parsing_label: label,
                camera_id,
                occlusion: *occ,
            },
            full_mask: mask,
            unoccluded_mask,
        })
    }

    /// Full-resolution pixel that label cell `(row, col)` samples.
    pub fn label_source_pixel(&self, row: usize, col: usize) -> (usize, usize) {
        let sy = self.image_height / self.label_height;
        let sx = self.image_width / self.label_width;
        (row * sy + sy / 2, col * sx + sx / 2)
    }

    fn downsample(&self, mask: &[u8]) -> Result<ParsingLabel> {
        let mut data = Vec::with_capacity(self.label_height * self.label_width);
        for r in 0..self.label_height {
            for c in 0..self.label_width {
                let (y, x) = self.label_source_pixel(r, c);
                data.push(mask[y * self.image_width + x]);
            }
        }
        ParsingLabel::new(self.label_height, self.label_width, data)
    }

    fn layout(&self, app: &IdentityAppearance, rng: &mut ChaCha8Rng, x_offset: f32) -> Vec<PlacedPart> {
        let (h, w) = (self.image_height as f32, self.image_width as f32);
        let geo = app.body_geometry;
        let body_h = 0.92 * geo.height_scale * h;
        let body_w = 0.72 * geo.width_scale * w;
        let top = (0.04 + rng.random_range(-0.02..0.02)) * h;
        let left = 0.5 * (w - body_w) + rng.random_range(-0.06..0.06) * w + x_offset;
        let arm_shift = rng.random_range(-0.03..0.03);
        let leg_spread = rng.random_range(-0.02..0.02);

        PART_BOXES
            .iter()
            .enumerate()
            .map(|(i, &(v0, v1, u0, u1, ellipse))| {
                let v0 = if v0 == HIP { geo.hip_line } else { v0 };
                let v1 = if v1 == HIP { geo.hip_line + 0.02 } else { v1 };
                let part = (i + 1) as u8;
                let (dv, du) = match part {
                    2 | 3 => (arm_shift, 0.0),
                    5 => (0.0, -leg_spread),
                    6 => (0.0, leg_spread),
                    _ => (0.0, 0.0),
                };
                PlacedPart {
                    part,
                    top: top + (v0 + dv) * body_h,
                    bottom: top + (v1 + dv) * body_h,
                    left: left + (u0 + du) * body_w,
                    right: left + (u1 + du) * body_w,
                    ellipse,
                }
            })
            .collect()
    }

    fn paint_person(
        &self,
        app: &IdentityAppearance,
        parts: &[PlacedPart],
        image: &mut [f32],
        mut mask: Option<&mut Vec<u8>>,
    ) {
        let (h, w) = (self.image_height, self.image_width);
        for y in 0..h {
            for x in 0..w {
                let (py, px) = (y as f32 + 0.5, x as f32 + 0.5);
                // Parts are listed head, arms, upper body, legs: first hit wins.
                let Some(part) = parts.iter().find(|p| p.contains(py, px)) else {
                    continue;
                };
                let rgb = app.part_palette[(part.part - 1) as usize].shade(py, px);
                for (c, v) in rgb.iter().enumerate() {
                    image[c * h * w + y * w + x] = *v;
                }
                if let Some(m) = mask.as_deref_mut() {
                    m[y * w + x] = part.part;
                }
            }
        }
    }

    fn background(&self, rng: &mut ChaCha8Rng) -> Vec<f32> {
        let (h, w) = (self.image_height, self.image_width);
        let base: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.9));
        let slope: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.2..0.2));
        let mut image = vec![0f32; 3 * h * w];
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    image[c * h * w + y * w + x] = base[c] + slope[c] * (y as f32 / h as f32 - 0.5);
                }
            }
        }
        // clutter blobs
        for _ in 0..rng.random_range(2..5) {
            let bh = rng.random_range(4..h / 2);
            let bw = rng.random_range(3..w / 2);
            let y0 = rng.random_range(0..h - bh);
            let x0 = rng.random_range(0..w - bw);
            let color: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
            for c in 0..3 {
                for y in y0..y0 + bh {
                    for x in x0..x0 + bw {
                        image[c * h * w + y * w + x] = color[c];
                    }
                }
            }
        }
        image
    }

    fn rectangle_occluder(
        &self,
        subject: &[PlacedPart],
        coverage: f64,
        rng: &mut ChaCha8Rng,
    ) -> (usize, usize, usize, usize) {
        let (h, w) = (self.image_height as f32, self.image_width as f32);
        let top = subject.iter().map(|p| p.top).fold(f32::INFINITY, f32::min).max(0.0);
        let bottom = subject.iter().map(|p| p.bottom).fold(0.0, f32::max).min(h);
        let left = subject.iter().map(|p| p.left).fold(f32::INFINITY, f32::min).max(0.0);
        let right = subject.iter().map(|p| p.right).fold(0.0, f32::max).min(w);
        let area = coverage as f32 * (bottom - top) * (right - left);
        let aspect: f32 = rng.random_range(0.5..2.0);
        let rh = (area * aspect).sqrt().clamp(1.0, h);
        let rw = (area / rh).clamp(1.0, w);
        let cy = rng.random_range(top..bottom);
        let cx = rng.random_range(left..right);
        let y0 = (cy - rh / 2.0).clamp(0.0, h - rh);
        let x0 = (cx - rw / 2.0).clamp(0.0, w - rw);
        (
            y0.round() as usize,
            ((y0 + rh).round() as usize).min(self.image_height),
            x0.round() as usize,
            ((x0 + rw).round() as usize).min(self.image_width),
        )
    }

    fn paint_occluder(
        &self,
        image: &mut [f32],
        mask: &mut [u8],
        (top, bottom, left, right): (usize, usize, usize, usize),
        rng: &mut ChaCha8Rng,
    ) {
        let (h, w) = (self.image_height, self.image_width);
        let color: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
        let accent: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
        let period = rng.random_range(2..6);
        for y in top..bottom {
            for x in left..right {
                let checker = ((y / period) + (x / period)) % 2 == 0;
                for c in 0..3 {
                    image[c * h * w + y * w + x] = if checker { color[c] } else { accent[c] };
                }
                mask[y * w + x] = 0;
            }
        }
    }

    fn apply_camera(&self, image: &mut [f32], camera_id: u32, rng: &mut ChaCha8Rng) {
        let plane = self.image_height * self.image_width;
        let noise = Normal::new(0.0, PIXEL_NOISE).expect("finite std");
        let cam = camera_id as f32;
        for c in 0..3 {
            let gain = 1.0 + 0.15 * (1.3 * cam + 2.1 * c as f32 + 0.5).sin();
            let bias = 0.04 * (0.7 * cam + 1.1 * c as f32).cos();
            for v in &mut image[c * plane..(c + 1) * plane] {
                *v = (gain * *v + bias + noise.sample(rng) as f32).clamp(0.0, 1.0);
            }
        }
    }
}
