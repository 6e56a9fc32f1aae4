//! Slice montages of predicted labels over the input frames.

use std::path::Path;

use icaunet::data::{LV, MYO, RV};
use icaunet::ops::Labels;
use icaunet::{Error, Result, Tensor};
use image::{Rgb, RgbImage};

pub const RV_COLOR: [u8; 3] = [255, 255, 0];
pub const MYO_COLOR: [u8; 3] = [255, 0, 0];
pub const LV_COLOR: [u8; 3] = [0, 255, 0];
const OVERLAY_ALPHA: f32 = 0.5;

pub fn class_color(class: u8) -> Option<[u8; 3]> {
    match class {
        RV => Some(RV_COLOR),
        MYO => Some(MYO_COLOR),
        LV => Some(LV_COLOR),
        _ => None,
    }
}

/// Base, middle and apex slice indices of a `d`-slice volume.
pub fn montage_slices(d: usize) -> [usize; 3] {
    [0, d / 2, d.saturating_sub(1)]
}

/// Rows are the base, middle and apex slices, columns the time steps.
pub fn render(frames: &[Tensor<f32>], labels: &[Labels]) -> Result<RgbImage> {
    if frames.is_empty() || frames.len() != labels.len() {
        return Err(Error::Data(format!(
            "montage needs one label volume per frame, got {} frames and {} labels",
            frames.len(),
            labels.len()
        )));
    }
    let [d, h, w] = labels[0].extents();
    let mut img = RgbImage::new((w * frames.len()) as u32, (h * 3) as u32);
    for (t, (f, l)) in frames.iter().zip(labels).enumerate() {
        if f.numel() != d * h * w || l.extents() != [d, h, w] {
            return Err(Error::Shape(format!("frame {t} does not match extents {:?}", [d, h, w])));
        }
        let (lo, hi) = f
            .data()
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let range = if hi > lo { hi - lo } else { 1.0 };
        for (row, &z) in montage_slices(d).iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    let i = (z * h + y) * w + x;
                    let grey = ((f.data()[i] - lo) / range * 255.0).clamp(0.0, 255.0);
                    let px = match class_color(l.data()[i]) {
                        Some(c) => c.map(|v| (OVERLAY_ALPHA * v as f32 + (1.0 - OVERLAY_ALPHA) * grey) as u8),
                        None => [grey as u8; 3],
                    };
                    img.put_pixel((t * w + x) as u32, (row * h + y) as u32, Rgb(px));
                }
            }
        }
    }
    Ok(img)
}

pub fn save(path: &Path, img: &RgbImage) -> Result<()> {
    img.save(path)
        .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
}
