use serde::{Deserialize, Serialize};

use super::image::Image;
use crate::boxes::BBox;
use crate::error::{Error, Result};

pub const PAD_VALUE: u8 = 114;

/// Forward mapping `out = in·scale + pad`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LetterboxInfo {
    pub scale: f64,
    pub pad_x: usize,
    pub pad_y: usize,
    /// Resized content extent inside the square canvas.
    pub new_w: usize,
    pub new_h: usize,
    pub orig_w: usize,
    pub orig_h: usize,
}

impl LetterboxInfo {
    pub fn forward_box(&self, b: &BBox) -> BBox {
        let (px, py) = (self.pad_x as f64, self.pad_y as f64);
        BBox::new(
            b.x1 * self.scale + px,
            b.y1 * self.scale + py,
            b.x2 * self.scale + px,
            b.y2 * self.scale + py,
        )
    }

    /// Maps a network-space box back to the original image, clipped to it.
    pub fn inverse_box(&self, b: &BBox) -> BBox {
        let (px, py) = (self.pad_x as f64, self.pad_y as f64);
        BBox::new(
            (b.x1 - px) / self.scale,
            (b.y1 - py) / self.scale,
            (b.x2 - px) / self.scale,
            (b.y2 - py) / self.scale,
        )
        .clip(self.orig_w as f64, self.orig_h as f64)
    }
}

/// Aspect-preserving bilinear resize into a `target × target` canvas filled
/// with [`PAD_VALUE`], content centred on integer offsets.
pub fn letterbox(img: &Image, target: usize) -> Result<(Image, LetterboxInfo)> {
    if img.width == 0 || img.height == 0 || target == 0 {
        return Err(Error::invalid(
            "letterbox",
            format!("{}x{} image into {target}", img.width, img.height),
        ));
    }
    let scale = (target as f64 / img.width as f64).min(target as f64 / img.height as f64);
    let new_w = ((img.width as f64 * scale).round() as usize).clamp(1, target);
    let new_h = ((img.height as f64 * scale).round() as usize).clamp(1, target);
    let pad_x = (target - new_w) / 2;
    let pad_y = (target - new_h) / 2;
    let info = LetterboxInfo {
        scale,
        pad_x,
        pad_y,
        new_w,
        new_h,
        orig_w: img.width,
        orig_h: img.height,
    };
    let mut out = Image::new(target, target, [PAD_VALUE; 3]);
    let resized = if (new_w, new_h) == (img.width, img.height) {
        img.clone()
    } else {
        resize_bilinear(img, new_w, new_h)
    };
    for y in 0..new_h {
        let src = &resized.data[y * new_w * 3..(y + 1) * new_w * 3];
        let dst = ((y + pad_y) * target + pad_x) * 3;
        out.data[dst..dst + new_w * 3].copy_from_slice(src);
    }
    Ok((out, info))
}

/// Bilinear resampling with half-pixel centres and edge clamping.
pub fn resize_bilinear(img: &Image, w: usize, h: usize) -> Image {
    let sx = img.width as f64 / w as f64;
    let sy = img.height as f64 / h as f64;
    let taps = |dst: usize, s: f64, n: usize| {
        let f = ((dst as f64 + 0.5) * s - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = f.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, f - i0 as f64)
    };
    let mut out = Image::new(w, h, [0; 3]);
    for y in 0..h {
        let (y0, y1, fy) = taps(y, sy, img.height);
        for x in 0..w {
            let (x0, x1, fx) = taps(x, sx, img.width);
            let (a, b, c, d) = (
                img.get(x0, y0),
                img.get(x1, y0),
                img.get(x0, y1),
                img.get(x1, y1),
            );
            let mut px = [0u8; 3];
            for ch in 0..3 {
                let top = a[ch] as f64 * (1.0 - fx) + b[ch] as f64 * fx;
                let bot = c[ch] as f64 * (1.0 - fx) + d[ch] as f64 * fx;
                px[ch] = (top * (1.0 - fy) + bot * fy).round().clamp(0.0, 255.0) as u8;
            }
            out.set(x, y, px);
        }
    }
    out
}
