use std::fs;
use std::path::{Path, PathBuf};

use candle_core::DType;
use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::error::Result;
use crate::model::PartAttentionNet;
use crate::synthetic_data::Sample;

/// Overlay colours for background and parts 1..6.
const PALETTE: [[u8; 3]; 7] = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
];

/// 8-bit gray level of a probability: `round(255 p)`, clamped to `[0, 255]`.
pub fn gray_level(p: f64) -> u8 {
    (255.0 * p).round().clamp(0.0, 255.0) as u8
}

/// One grayscale image per attention channel (channel 0 is background).
pub fn channel_images(probs: &[f64], n_channels: usize, height: usize, width: usize) -> Vec<GrayImage> {
    (0..n_channels)
        .map(|c| {
            GrayImage::from_fn(width as u32, height as u32, |x, y| {
                Luma([gray_level(probs[(c * height + y as usize) * width + x as usize])])
            })
        })
        .collect()
}

/// Input image at full resolution with the per-cell arg-max part blended in
/// (background cells keep the plain image).
pub fn argmax_overlay(sample: &Sample, probs: &[f64], n_channels: usize, height: usize, width: usize) -> RgbImage {
    let (ih, iw) = (sample.image_height, sample.image_width);
    RgbImage::from_fn(iw as u32, ih as u32, |x, y| {
        let (r, c) = (y as usize * height / ih, x as usize * width / iw);
        let mut best = 0;
        for k in 1..n_channels {
            if probs[(k * height + r) * width + c] > probs[(best * height + r) * width + c] {
                best = k;
            }
        }
        let px = |ch: usize| sample.image[(ch * ih + y as usize) * iw + x as usize].clamp(0.0, 1.0) * 255.0;
        let colour = PALETTE[best % PALETTE.len()];
        let mix = |ch: usize| {
            if best == 0 {
                px(ch).round() as u8
            } else {
                (0.5 * px(ch) + 0.5 * colour[ch] as f32).round() as u8
            }
        };
        Rgb([mix(0), mix(1), mix(2)])
    })
}

/// Writes `attention_channel_{k}.png` for every channel, `argmax_overlay.png`
/// and `input.png` into `out`; returns the written paths.
pub fn visualize_attention(net: &PartAttentionNet, sample: &Sample, out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out)?;
    let (_, maps) = net.infer(&[sample], 0.5, 1)?;
    let t = maps[0].tensor();
    let (_, k, h, w) = t.dims4()?;
    let probs = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;

    let mut written = Vec::new();
    for (c, img) in channel_images(&probs, k, h, w).into_iter().enumerate() {
        let path = out.join(format!("attention_channel_{c}.png"));
        img.save(&path)?;
        written.push(path);
    }
    let path = out.join("argmax_overlay.png");
    argmax_overlay(sample, &probs, k, h, w).save(&path)?;
    written.push(path);

    let (ih, iw) = (sample.image_height, sample.image_width);
    let input = RgbImage::from_fn(iw as u32, ih as u32, |x, y| {
        let px = |ch: usize| (sample.image[(ch * ih + y as usize) * iw + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    });
    let path = out.join("input.png");
    input.save(&path)?;
    written.push(path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_levels() {
        assert_eq!(gray_level(0.0), 0);
        assert_eq!(gray_level(1.0), 255);
        assert_eq!(gray_level(0.5), 128);
        assert_eq!(gray_level(1.0 / 7.0), 36);
    }

    #[test]
    fn channel_images_follow_layout() {
        // 2 channels, 1x2 map
        let probs = [0.2, 1.0, 0.8, 0.0];
        let imgs = channel_images(&probs, 2, 1, 2);
        assert_eq!(imgs[0].get_pixel(0, 0).0, [51]);
        assert_eq!(imgs[0].get_pixel(1, 0).0, [255]);
        assert_eq!(imgs[1].get_pixel(0, 0).0, [204]);
        assert_eq!(imgs[1].get_pixel(1, 0).0, [0]);
    }
}
