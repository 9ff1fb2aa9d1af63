use rand::{Rng, RngExt};

use crate::error::{config_err, Result};

pub const ERASE_AREA: (f64, f64) = (0.02, 0.4);
pub const ERASE_ASPECT: (f64, f64) = (0.3, 3.3);
const ERASE_ATTEMPTS: usize = 100;

/// Pixel rectangle `[top, top + height) x [left, left + width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.top..self.top + self.height).contains(&row) && (self.left..self.left + self.width).contains(&col)
    }
}

/// Random erasing on a channel-major `(C, H, W)` image.
///
/// With probability `prob` one rectangle (area fraction uniform in
/// [`ERASE_AREA`], aspect ratio height/width uniform in [`ERASE_ASPECT`]) is
/// filled with per-pixel uniform noise in `[0, 1)`. Shapes that do not fit
/// are redrawn a bounded number of times; if none fits the image is left
/// alone. Parsing labels are never touched.
pub fn random_erasing<R: Rng>(
    image: &mut [f32],
    channels: usize,
    height: usize,
    width: usize,
    prob: f64,
    rng: &mut R,
) -> Result<Option<Rect>> {
    if !(0.0..=1.0).contains(&prob) {
        return config_err(format!("erasing probability {prob} outside [0, 1]"));
    }
    if image.len() != channels * height * width {
        return config_err("image buffer does not match its shape");
    }
    if prob == 0.0 || !rng.random_bool(prob) {
        return Ok(None);
    }
    let area = (height * width) as f64;
    for _ in 0..ERASE_ATTEMPTS {
        let target = rng.random_range(ERASE_AREA.0..ERASE_AREA.1) * area;
        let aspect = rng.random_range(ERASE_ASPECT.0..ERASE_ASPECT.1);
        let h = (target * aspect).sqrt().round() as usize;
        let w = (target / aspect).sqrt().round() as usize;
        if h == 0 || w == 0 || h >= height || w >= width {
            continue;
        }
        let rect = Rect {
            top: rng.random_range(0..=height - h),
            left: rng.random_range(0..=width - w),
            height: h,
            width: w,
        };
        for c in 0..channels {
            for r in rect.top..rect.top + h {
                for col in rect.left..rect.left + w {
                    image[(c * height + r) * width + col] = rng.random::<f32>();
                }
            }
        }
        return Ok(Some(rect));
    }
    Ok(None)
}
