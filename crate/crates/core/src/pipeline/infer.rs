use std::path::Path;

use super::config::RunConfig;
use super::image::{draw_rect, draw_text, Image};
use super::letterbox::{letterbox, LetterboxInfo};
use super::nms::nms;
use super::synth::CLASS_NAMES;
use crate::boxes::{BBox, Detection};
use crate::error::{Error, Result};
use crate::heads::{decode_distances, distances_to_box, flatten_outputs, AnchorSet, Predictions};
use crate::model::Model;
use crate::tensor::Tensor;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Candidate detections in network coordinates: best class per anchor,
/// kept when its probability reaches `conf`.
pub fn decode_candidates(pred: &Predictions, anchors: &AnchorSet, conf: f64) -> Vec<Detection> {
    let mut out = Vec::new();
    let mut a = 0;
    for l in &anchors.levels {
        for p in &l.points {
            let row = pred.cls_row(a);
            let (class, logit) =
                row.iter()
                    .copied()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (c, v)| {
                        if v > best.1 {
                            (c, v)
                        } else {
                            best
                        }
                    });
            let score = sigmoid(logit);
            if score >= conf {
                let d = decode_distances(pred.reg_row(a), pred.bins);
                out.push(Detection {
                    bbox: distances_to_box(*p, d, l.stride),
                    score,
                    class,
                });
            }
            a += 1;
        }
    }
    out
}

/// Confidence filter, NMS and the inverse letterbox.
pub fn postprocess(
    pred: &Predictions,
    anchors: &AnchorSet,
    info: &LetterboxInfo,
    cfg: &RunConfig,
) -> Vec<Detection> {
    let cands = decode_candidates(pred, anchors, cfg.conf_threshold);
    nms(&cands, cfg.nms_iou, cfg.max_detections)
        .into_iter()
        .map(|d| Detection {
            bbox: info.inverse_box(&d.bbox),
            ..d
        })
        .collect()
}

/// Stacks images of equal size into one `(N, 3, h, w)` batch.
pub fn batch_tensor(images: &[&Image]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::invalid("batch", "no images"))?;
    let (w, h) = (first.width, first.height);
    let mut data = Vec::with_capacity(images.len() * 3 * w * h);
    for img in images {
        if (img.width, img.height) != (w, h) {
            return Err(Error::shape(
                "batch",
                format!("{}x{} vs {w}x{h}", img.width, img.height),
            ));
        }
        data.extend_from_slice(img.to_tensor().data());
    }
    Tensor::new(vec![images.len(), 3, h, w], data)
}

/// Letterboxes, runs the network and post-processes each image.
pub fn detect_batch(
    model: &Model,
    images: &[&Image],
    cfg: &RunConfig,
) -> Result<Vec<Vec<Detection>>> {
    if let Some(s) = cfg.input_size {
        if s != model.input_size() {
            return Err(Error::Config(format!(
                "run input_size {s} does not match the model's {}",
                model.input_size()
            )));
        }
    }
    let size = model.input_size();
    let mut boxed = Vec::with_capacity(images.len());
    for img in images {
        boxed.push(letterbox(img, size)?);
    }
    let refs: Vec<&Image> = boxed.iter().map(|(i, _)| i).collect();
    let outs = model.forward(&batch_tensor(&refs)?)?;
    let anchors = model.anchors()?;
    let bins = model.head.dfl_bins;
    let mut all = Vec::with_capacity(images.len());
    for (b, (_, info)) in boxed.iter().enumerate() {
        let pred = flatten_outputs(&outs, bins, b)?;
        all.push(postprocess(&pred, &anchors, info, cfg));
    }
    Ok(all)
}

fn class_color(class: usize) -> [u8; 3] {
    const PALETTE: [[u8; 3]; 6] = [
        [255, 56, 56],
        [72, 249, 10],
        [0, 194, 255],
        [255, 178, 29],
        [207, 210, 49],
        [146, 204, 23],
    ];
    PALETTE[class % PALETTE.len()]
}

fn class_label(class: usize) -> String {
    CLASS_NAMES
        .get(class)
        .map_or_else(|| class.to_string(), |s| s.to_string())
}

/// Copy of `img` with box outlines and `label score` captions.
pub fn annotate(img: &Image, dets: &[Detection]) -> Image {
    let mut out = img.clone();
    for d in dets {
        let c = class_color(d.class);
        let b = d.bbox;
        let (x1, y1, x2, y2) = (
            b.x1.round() as i64,
            b.y1.round() as i64,
            b.x2.round() as i64,
            b.y2.round() as i64,
        );
        draw_rect(&mut out, x1, y1, x2, y2, c);
        let caption = format!("{} {:.2}", class_label(d.class), d.score);
        let ty = if y1 >= 6 { y1 - 6 } else { y1 + 1 };
        draw_text(&mut out, x1 + 1, ty, &caption, c);
    }
    out
}

/// Single-image inference returning detections in original pixel
/// coordinates and the annotated image.
pub fn run_inference(
    model: &Model,
    img: &Image,
    cfg: &RunConfig,
) -> Result<(Vec<Detection>, Image)> {
    cfg.validate()?;
    let dets = detect_batch(model, &[img], cfg)?.pop().unwrap_or_default();
    let annotated = annotate(img, &dets);
    Ok((dets, annotated))
}

/// File-level wrapper: reads the image, writes the annotated PPM.
pub fn infer_file(
    model: &Model,
    image: &Path,
    output: &Path,
    cfg: &RunConfig,
) -> Result<Vec<Detection>> {
    let img = Image::load(image)?;
    let (dets, annotated) = run_inference(model, &img, cfg)?;
    annotated.save_ppm(output)?;
    Ok(dets)
}

/// `class cx cy w h score` lines, normalised to the image extent.
pub fn format_detections(dets: &[Detection], width: usize, height: usize) -> String {
    let (w, h) = (width as f64, height as f64);
    dets.iter()
        .map(|d| {
            let (cx, cy) = d.bbox.center();
            format!(
                "{} {} {} {} {} {}\n",
                d.class,
                cx / w,
                cy / h,
                d.bbox.width() / w,
                d.bbox.height() / h,
                d.score
            )
        })
        .collect()
}

pub fn parse_detections(
    text: &str,
    width: usize,
    height: usize,
) -> std::result::Result<Vec<Detection>, String> {
    let (w, h) = (width as f64, height as f64);
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.is_empty() {
            continue;
        }
        if f.len() != 6 {
            return Err(format!(
                "line {}: expected 6 fields, found {}",
                ln + 1,
                f.len()
            ));
        }
        let class = f[0]
            .parse::<usize>()
            .map_err(|_| format!("line {}: bad class {:?}", ln + 1, f[0]))?;
        let mut v = [0.0; 5];
        for (k, s) in f[1..].iter().enumerate() {
            v[k] = s
                .parse::<f64>()
                .map_err(|_| format!("line {}: bad number {s:?}", ln + 1))?;
        }
        out.push(Detection {
            bbox: BBox::from_center(v[0] * w, v[1] * h, v[2] * w, v[3] * h),
            score: v[4],
            class,
        });
    }
    Ok(out)
}
