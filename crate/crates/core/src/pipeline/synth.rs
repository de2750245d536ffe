//! Seeded synthetic detection scenes written as PPM images and YOLO-style
//! text labels.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::image::Image;
use crate::boxes::{BBox, GroundTruth};
use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 4;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["fall", "fight", "smoke", "person"];

const BACKGROUND: [u8; 3] = [40, 40, 48];
const CLASS_COLORS: [[u8; 3]; NUM_CLASSES] =
    [[220, 60, 50], [60, 200, 80], [70, 100, 230], [235, 210, 60]];
/// Classes 1 and 3 are discs, the rest rectangles.
const CLASS_IS_DISC: [bool; NUM_CLASSES] = [false, true, false, true];

/// One rendered scene with pixel-space ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthScene {
    pub image: Image,
    pub gts: Vec<GroundTruth>,
}

/// Renders one scene of `size × size` with 1 to 3 non-overlapping objects.
pub fn render_scene(rng: &mut ChaCha8Rng, size: usize) -> SynthScene {
    let mut image = Image::new(size, size, BACKGROUND);
    for p in image.data.iter_mut() {
        *p = p.saturating_add(rng.gen_range(0..12));
    }
    let min_side = (size * 3 / 16).max(2);
    let max_side = (size / 2).max(min_side);
    let count = rng.gen_range(1..=3);
    let mut gts: Vec<GroundTruth> = Vec::new();
    let mut attempts = 0;
    while gts.len() < count && attempts < 200 {
        attempts += 1;
        let class = rng.gen_range(0..NUM_CLASSES);
        let w = rng.gen_range(min_side..=max_side);
        let h = if CLASS_IS_DISC[class] {
            w
        } else {
            rng.gen_range(min_side..=max_side)
        };
        let x = rng.gen_range(0..=size - w);
        let y = rng.gen_range(0..=size - h);
        let bbox = BBox::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64);
        // Keep a one-pixel gap so objects never touch.
        let grown = BBox::new(bbox.x1 - 1.0, bbox.y1 - 1.0, bbox.x2 + 1.0, bbox.y2 + 1.0);
        if gts.iter().any(|g| grown.iou(&g.bbox) > 0.0) {
            continue;
        }
        paint(&mut image, x, y, w, h, class);
        gts.push(GroundTruth { bbox, class });
    }
    SynthScene { image, gts }
}

fn paint(img: &mut Image, x: usize, y: usize, w: usize, h: usize, class: usize) {
    let color = CLASS_COLORS[class];
    let (cx, cy) = (x as f64 + w as f64 / 2.0, y as f64 + h as f64 / 2.0);
    let r = w as f64 / 2.0;
    for py in y..y + h {
        for px in x..x + w {
            let inside = !CLASS_IS_DISC[class] || {
                let (dx, dy) = (px as f64 + 0.5 - cx, py as f64 + 0.5 - cy);
                dx * dx + dy * dy <= r * r
            };
            if inside {
                img.set(px, py, color);
            }
        }
    }
}

/// Formats labels as `class cx cy w h`, normalised, one object per line.
pub fn format_labels(gts: &[GroundTruth], width: usize, height: usize) -> String {
    let (w, h) = (width as f64, height as f64);
    let mut s = String::new();
    for g in gts {
        let (cx, cy) = g.bbox.center();
        let _ = writeln!(
            s,
            "{} {} {} {} {}",
            g.class,
            cx / w,
            cy / h,
            g.bbox.width() / w,
            g.bbox.height() / h
        );
    }
    s
}

/// Parses label text back into pixel-space boxes.
pub fn parse_labels(
    text: &str,
    width: usize,
    height: usize,
) -> std::result::Result<Vec<GroundTruth>, String> {
    let (w, h) = (width as f64, height as f64);
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 5 {
            return Err(format!(
                "line {}: expected 5 fields, found {}",
                ln + 1,
                f.len()
            ));
        }
        let class = f[0]
            .parse::<usize>()
            .map_err(|_| format!("line {}: bad class {:?}", ln + 1, f[0]))?;
        let mut v = [0.0; 4];
        for (k, s) in f[1..].iter().enumerate() {
            v[k] = s
                .parse::<f64>()
                .map_err(|_| format!("line {}: bad number {s:?}", ln + 1))?;
            if !v[k].is_finite() {
                return Err(format!("line {}: non-finite value", ln + 1));
            }
        }
        out.push(GroundTruth {
            bbox: BBox::from_center(v[0] * w, v[1] * h, v[2] * w, v[3] * h),
            class,
        });
    }
    Ok(out)
}

pub fn read_labels(path: &Path, width: usize, height: usize) -> Result<Vec<GroundTruth>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labels(&text, width, height).map_err(|r| Error::format(path, r))
}

/// Split sizes for `n` items at 8:1:1 (train takes the rounding slack).
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let val = n / 10;
    let test = n / 10;
    (n - val - test, val, test)
}

/// Writes `images/NNNN.ppm`, `labels/NNNN.txt` and `train.txt`, `val.txt`,
/// `test.txt` manifests under `dir`.
pub fn generate_synth_dataset(dir: &Path, n: usize, seed: u64, size: usize) -> Result<()> {
    if n == 0 || size < 16 {
        return Err(Error::invalid(
            "synthetic dataset",
            format!("n = {n}, size = {size}"),
        ));
    }
    let images = dir.join("images");
    let labels = dir.join("labels");
    for d in [&images, &labels] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut names = Vec::with_capacity(n);
    for i in 0..n {
        let scene = render_scene(&mut rng, size);
        let name = format!("{i:04}");
        scene.image.save_ppm(&images.join(format!("{name}.ppm")))?;
        let lp = labels.join(format!("{name}.txt"));
        std::fs::write(&lp, format_labels(&scene.gts, size, size))
            .map_err(|e| Error::io(&lp, e))?;
        names.push(name);
    }
    names.shuffle(&mut rng);
    let (tr, va, _) = split_sizes(n);
    let parts = [
        ("train", &names[..tr]),
        ("val", &names[tr..tr + va]),
        ("test", &names[tr + va..]),
    ];
    for (split, items) in parts {
        let mut sorted = items.to_vec();
        sorted.sort();
        let body: String = sorted.iter().map(|s| format!("images/{s}.ppm\n")).collect();
        let p = dir.join(format!("{split}.txt"));
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

/// Image paths listed in a split manifest.
pub fn read_split(dir: &Path, split: &str) -> Result<Vec<PathBuf>> {
    let p = dir.join(format!("{split}.txt"));
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| dir.join(l.trim()))
        .collect())
}

/// Label file for an image at `root/images/NAME.ext`.
pub fn label_path_for(image: &Path) -> PathBuf {
    let stem = image.file_stem().unwrap_or_default();
    let root = image
        .parent()
        .and_then(Path::parent)
        .unwrap_or(Path::new("."));
    root.join("labels").join(stem).with_extension("txt")
}

/// Loads every image and its labels in a split.
pub fn load_split(dir: &Path, split: &str) -> Result<Vec<SynthScene>> {
    read_split(dir, split)?
        .into_iter()
        .map(|p| {
            let image = Image::load(&p)?;
            let gts = read_labels(&label_path_for(&p), image.width, image.height)?;
            Ok(SynthScene { image, gts })
        })
        .collect()
}
