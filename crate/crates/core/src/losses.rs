//! Box-overlap metrics, distribution focal loss, target assignment and the
//! combined detection loss with gradients with respect to head logits.

use std::ops::{Add, Div, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::boxes::{BBox, GroundTruth};
use crate::error::{Error, Result};
use crate::heads::{AnchorSet, Predictions};
use crate::tensor::Tensor;

/// Guard used as a lower bound on every denominator.
pub const EPS: f64 = 1e-9;

/// Scalar arithmetic shared by plain `f64` and forward-mode [`Dual`] numbers.
pub trait Real:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn cst(v: f64) -> Self;
    fn val(self) -> f64;
    fn sqrt(self) -> Self;
    fn atan(self) -> Self;

    fn max(self, o: Self) -> Self {
        if self.val() >= o.val() {
            self
        } else {
            o
        }
    }

    fn min(self, o: Self) -> Self {
        if self.val() <= o.val() {
            self
        } else {
            o
        }
    }

    /// `self / d` with `d` bounded below by [`EPS`].
    fn safe_div(self, d: Self) -> Self {
        self / d.max(Self::cst(EPS))
    }
}

impl Real for f64 {
    fn cst(v: f64) -> Self {
        v
    }
    fn val(self) -> f64 {
        self
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn atan(self) -> Self {
        f64::atan(self)
    }
}

/// Value with derivatives with respect to four inputs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual {
    pub v: f64,
    pub d: [f64; 4],
}

impl Dual {
    pub fn var(v: f64, i: usize) -> Self {
        let mut d = [0.0; 4];
        d[i] = 1.0;
        Self { v, d }
    }

    fn chain(self, v: f64, dv: f64) -> Self {
        Self {
            v,
            d: self.d.map(|x| x * dv),
        }
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual {
            v: self.v + o.v,
            d: std::array::from_fn(|i| self.d[i] + o.d[i]),
        }
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual {
            v: self.v - o.v,
            d: std::array::from_fn(|i| self.d[i] - o.d[i]),
        }
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual {
            v: self.v * o.v,
            d: std::array::from_fn(|i| self.d[i] * o.v + self.v * o.d[i]),
        }
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        let q = self.v / o.v;
        Dual {
            v: q,
            d: std::array::from_fn(|i| (self.d[i] - q * o.d[i]) / o.v),
        }
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual {
            v: -self.v,
            d: self.d.map(|x| -x),
        }
    }
}

impl Real for Dual {
    fn cst(v: f64) -> Self {
        Dual { v, d: [0.0; 4] }
    }
    fn val(self) -> f64 {
        self.v
    }
    fn sqrt(self) -> Self {
        let r = self.v.sqrt();
        self.chain(r, if r > 0.0 { 0.5 / r } else { 0.0 })
    }
    fn atan(self) -> Self {
        self.chain(self.v.atan(), 1.0 / (1.0 + self.v * self.v))
    }
}

/// The four box-regression objectives compared in the loss study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxLossKind {
    Diou,
    Ciou,
    Mpdiou,
    InnerCiou,
}

impl BoxLossKind {
    pub const ALL: [BoxLossKind; 4] = [
        BoxLossKind::Diou,
        BoxLossKind::Ciou,
        BoxLossKind::Mpdiou,
        BoxLossKind::InnerCiou,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "diou" => Ok(BoxLossKind::Diou),
            "ciou" => Ok(BoxLossKind::Ciou),
            "mpdiou" => Ok(BoxLossKind::Mpdiou),
            "inner_ciou" | "innerciou" => Ok(BoxLossKind::InnerCiou),
            _ => Err(Error::Config(format!(
                "unknown box loss {s:?} (expected diou|ciou|mpdiou|inner_ciou)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BoxLossKind::Diou => "diou",
            BoxLossKind::Ciou => "ciou",
            BoxLossKind::Mpdiou => "mpdiou",
            BoxLossKind::InnerCiou => "inner_ciou",
        }
    }
}

/// All overlap metrics for one box pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics<R> {
    pub iou: R,
    pub diou: R,
    pub ciou: R,
    pub mpdiou: R,
    pub inner_ciou: R,
    /// The ground-truth box had zero area; `iou` was forced to 0.
    pub degenerate: bool,
}

impl<R: Real> Metrics<R> {
    pub fn get(&self, kind: BoxLossKind) -> R {
        match kind {
            BoxLossKind::Diou => self.diou,
            BoxLossKind::Ciou => self.ciou,
            BoxLossKind::Mpdiou => self.mpdiou,
            BoxLossKind::InnerCiou => self.inner_ciou,
        }
    }
}

fn plain_iou<R: Real>(p: [R; 4], g: [R; 4]) -> R {
    let zero = R::cst(0.0);
    let iw = (p[2].min(g[2]) - p[0].max(g[0])).max(zero);
    let ih = (p[3].min(g[3]) - p[1].max(g[1])).max(zero);
    let inter = iw * ih;
    let ap = (p[2] - p[0]) * (p[3] - p[1]);
    let ag = (g[2] - g[0]) * (g[3] - g[1]);
    inter.safe_div(ap + ag - inter)
}

fn scaled_about_center<R: Real>(b: [R; 4], ratio: f64) -> [R; 4] {
    let half = R::cst(0.5);
    let r = R::cst(ratio);
    let (cx, cy) = ((b[0] + b[2]) * half, (b[1] + b[3]) * half);
    let (hw, hh) = ((b[2] - b[0]) * half * r, (b[3] - b[1]) * half * r);
    [cx - hw, cy - hh, cx + hw, cy + hh]
}

/// Computes every metric for prediction `p` against ground truth `g`
/// (`[x1, y1, x2, y2]`). `image_wh` normalises the corner distances.
pub fn box_metrics<R: Real>(
    p: [R; 4],
    g: [R; 4],
    image_wh: (f64, f64),
    inner_ratio: f64,
) -> Metrics<R> {
    let zero = R::cst(0.0);
    let half = R::cst(0.5);
    let sq = |v: R| v * v;
    let gw = g[2] - g[0];
    let gh = g[3] - g[1];
    let degenerate = gw.val() * gh.val() <= 0.0;
    let iou = if degenerate { zero } else { plain_iou(p, g) };

    let cw = p[2].max(g[2]) - p[0].min(g[0]);
    let ch = p[3].max(g[3]) - p[1].min(g[1]);
    let diag2 = sq(cw) + sq(ch);
    let rho2 = sq((p[0] + p[2] - g[0] - g[2]) * half) + sq((p[1] + p[3] - g[1] - g[3]) * half);
    let diou = iou - rho2.safe_div(diag2);

    let pw = p[2] - p[0];
    let ph = p[3] - p[1];
    let k = R::cst(4.0 / (std::f64::consts::PI * std::f64::consts::PI));
    let v = k * sq(gw.safe_div(gh).atan() - pw.safe_div(ph).atan());
    let alpha = v.safe_div(R::cst(1.0) - iou + v);
    let ciou = diou - alpha * v;

    let norm = R::cst(image_wh.0 * image_wh.0 + image_wh.1 * image_wh.1);
    let d1 = sq(p[0] - g[0]) + sq(p[1] - g[1]);
    let d2 = sq(p[2] - g[2]) + sq(p[3] - g[3]);
    let mpdiou = iou - d1.safe_div(norm) - d2.safe_div(norm);

    let inner_iou = if degenerate {
        zero
    } else {
        plain_iou(
            scaled_about_center(p, inner_ratio),
            scaled_about_center(g, inner_ratio),
        )
    };
    let inner_ciou = ciou - iou + inner_iou;

    Metrics {
        iou,
        diou,
        ciou,
        mpdiou,
        inner_ciou,
        degenerate,
    }
}

/// Metrics for two [`BBox`]es in plain `f64`.
pub fn iou_metrics(
    pred: &BBox,
    gt: &BBox,
    image_w: f64,
    image_h: f64,
    inner_ratio: f64,
) -> Metrics<f64> {
    box_metrics(
        [pred.x1, pred.y1, pred.x2, pred.y2],
        [gt.x1, gt.y1, gt.x2, gt.y2],
        (image_w, image_h),
        inner_ratio,
    )
}

/// Metric value and its gradient with respect to the predicted corners.
pub fn metric_with_grad(
    pred: &BBox,
    gt: &BBox,
    kind: BoxLossKind,
    image_wh: (f64, f64),
    inner_ratio: f64,
) -> (f64, [f64; 4]) {
    let p = [
        Dual::var(pred.x1, 0),
        Dual::var(pred.y1, 1),
        Dual::var(pred.x2, 2),
        Dual::var(pred.y2, 3),
    ];
    let g = [gt.x1, gt.y1, gt.x2, gt.y2].map(Dual::cst);
    let m = box_metrics(p, g, image_wh, inner_ratio).get(kind);
    (m.v, m.d)
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lz = logits.iter().map(|&l| (l - m).exp()).sum::<f64>().ln() + m;
    logits.iter().map(|&l| l - lz).collect()
}

/// Distribution focal loss of one side's bin logits against distance `t`.
pub fn dfl_loss(side_logits: &[f64], target: f64) -> Result<f64> {
    Ok(dfl_loss_with_grad(side_logits, target)?.0)
}

/// DFL value and gradient with respect to the logits (`softmax − target mass`).
pub fn dfl_loss_with_grad(side_logits: &[f64], target: f64) -> Result<(f64, Vec<f64>)> {
    let bins = side_logits.len();
    if bins < 2 {
        return Err(Error::invalid("dfl", "need at least 2 bins"));
    }
    let reg_max = (bins - 1) as f64;
    if !(0.0..=reg_max).contains(&target) {
        return Err(Error::invalid(
            "dfl target",
            format!("{target} outside [0, {reg_max}]"),
        ));
    }
    let left = (target.floor() as usize).min(bins - 2);
    let right = left + 1;
    let w_left = right as f64 - target;
    let w_right = target - left as f64;
    let lp = log_softmax(side_logits);
    let loss = -(w_left * lp[left] + w_right * lp[right]);
    let mut grad = softmax(side_logits);
    grad[left] -= w_left;
    grad[right] -= w_right;
    Ok((loss, grad))
}

/// Per-anchor ground-truth index (`None` = background).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Assignment {
    pub gt_index: Vec<Option<usize>>,
}

impl Assignment {
    pub fn num_positive(&self) -> usize {
        self.gt_index.iter().filter(|g| g.is_some()).count()
    }
}

/// Number of candidates kept per ground truth.
pub const TOP_K: usize = 10;

/// Centre-inside candidates, top-k per ground truth by IoU of the decoded
/// prediction (or by centre distance when `pred_boxes` is `None`), conflicts
/// resolved towards the better-scoring ground truth.
pub fn assign_targets(
    anchors: &AnchorSet,
    pred_boxes: Option<&[BBox]>,
    gts: &[GroundTruth],
    top_k: usize,
) -> Assignment {
    let centers = anchors.pixel_centers();
    let n = centers.len();
    let mut best: Vec<Option<(usize, f64)>> = vec![None; n];
    for (gi, gt) in gts.iter().enumerate() {
        let (gx, gy) = gt.bbox.center();
        // (score, anchor): higher score is better.
        let mut cands: Vec<(f64, f64, usize)> = centers
            .iter()
            .enumerate()
            .filter(|(_, c)| gt.bbox.contains(c.0, c.1))
            .map(|(a, c)| {
                let dist = ((c.0 - gx).powi(2) + (c.1 - gy).powi(2)).sqrt();
                let score = match pred_boxes {
                    Some(p) => p[a].iou(&gt.bbox),
                    None => -dist,
                };
                (score, dist, a)
            })
            .collect();
        cands.sort_by(|x, y| {
            y.0.total_cmp(&x.0)
                .then(x.1.total_cmp(&y.1))
                .then(x.2.cmp(&y.2))
        });
        for &(score, _, a) in cands.iter().take(top_k) {
            match best[a] {
                Some((_, s)) if s >= score => {}
                _ => best[a] = Some((gi, score)),
            }
        }
    }
    Assignment {
        gt_index: best.into_iter().map(|b| b.map(|(g, _)| g)).collect(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub box_weight: f64,
    pub dfl_weight: f64,
    pub cls_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            box_weight: 7.5,
            dfl_weight: 1.5,
            cls_weight: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub box_loss: f64,
    pub dfl_loss: f64,
    pub cls_loss: f64,
    pub total: f64,
    pub weights: LossWeights,
    pub num_positive: usize,
}

/// Loss settings independent of the predictions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSettings {
    pub kind: BoxLossKind,
    pub weights: LossWeights,
    pub inner_ratio: f64,
    /// Network input extent `(w, h)` used to normalise corner distances.
    pub image_wh: (f64, f64),
    pub top_k: usize,
}

impl LossSettings {
    pub fn new(kind: BoxLossKind, input_size: usize) -> Self {
        Self {
            kind,
            weights: LossWeights::default(),
            inner_ratio: 0.75,
            image_wh: (input_size as f64, input_size as f64),
            top_k: TOP_K,
        }
    }
}

/// Gradients of the weighted total with respect to flattened logits.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionGrads {
    pub reg: Vec<f64>,
    pub cls: Vec<f64>,
}

fn bce_with_logits(x: f64, y: f64) -> f64 {
    x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Loss over a batch of images (one [`Predictions`] and target list each).
/// Box and DFL terms average over all positives; the classification sum is
/// divided by `max(positives, 1)`.
pub fn detection_loss(
    preds: &[Predictions],
    anchors: &AnchorSet,
    targets: &[Vec<GroundTruth>],
    settings: &LossSettings,
) -> Result<(LossBundle, Vec<PredictionGrads>)> {
    if preds.len() != targets.len() {
        return Err(Error::invalid(
            "detection loss",
            format!(
                "{} predictions for {} target lists",
                preds.len(),
                targets.len()
            ),
        ));
    }
    let na = anchors.len();
    let mut per_anchor = Vec::with_capacity(na);
    for l in &anchors.levels {
        for p in &l.points {
            per_anchor.push((*p, l.stride));
        }
    }
    let mut assignments = Vec::with_capacity(preds.len());
    let mut boxes_all = Vec::with_capacity(preds.len());
    for (p, t) in preds.iter().zip(targets) {
        if p.len() != na {
            return Err(Error::shape(
                "detection loss",
                format!("{} rows for {na} anchors", p.len()),
            ));
        }
        for gt in t {
            if gt.class >= p.num_classes {
                return Err(Error::invalid(
                    "target class",
                    format!("{} >= {}", gt.class, p.num_classes),
                ));
            }
        }
        let boxes = p.boxes(anchors);
        assignments.push(assign_targets(anchors, Some(&boxes), t, settings.top_k));
        boxes_all.push(boxes);
    }
    let num_pos: usize = assignments.iter().map(Assignment::num_positive).sum();
    let denom = num_pos.max(1) as f64;
    let w = settings.weights;

    let (mut box_sum, mut dfl_sum, mut cls_sum) = (0.0, 0.0, 0.0);
    let mut grads = Vec::with_capacity(preds.len());
    for (((p, t), asg), boxes) in preds.iter().zip(targets).zip(&assignments).zip(&boxes_all) {
        let bins = p.bins;
        let reg_max = (bins - 1) as f64;
        let nc = p.num_classes;
        let mut g_reg = vec![0.0; p.reg.len()];
        let mut g_cls = vec![0.0; p.cls.len()];
        for a in 0..na {
            let row = p.cls_row(a);
            let mut target_cls = None;
            if let Some(gi) = asg.gt_index[a] {
                let gt = &t[gi];
                let (point, stride) = per_anchor[a];
                let (m, dm) = metric_with_grad(
                    &boxes[a],
                    &gt.bbox,
                    settings.kind,
                    settings.image_wh,
                    settings.inner_ratio,
                );
                box_sum += 1.0 - m;
                // Box corner derivatives w.r.t. the side distances, then the bins.
                let dside = [
                    dm[0] * -stride,
                    dm[1] * -stride,
                    dm[2] * stride,
                    dm[3] * stride,
                ];
                let tdist = [
                    point[0] - gt.bbox.x1 / stride,
                    point[1] - gt.bbox.y1 / stride,
                    gt.bbox.x2 / stride - point[0],
                    gt.bbox.y2 / stride - point[1],
                ];
                let reg = p.reg_row(a);
                for side in 0..4 {
                    let logits = &reg[side * bins..(side + 1) * bins];
                    let probs = softmax(logits);
                    let expect: f64 = probs.iter().enumerate().map(|(i, q)| i as f64 * q).sum();
                    let (l, g) =
                        dfl_loss_with_grad(logits, tdist[side].clamp(0.0, reg_max - 0.01))?;
                    dfl_sum += l / 4.0;
                    for i in 0..bins {
                        let dexp = probs[i] * (i as f64 - expect);
                        g_reg[a * 4 * bins + side * bins + i] += w.box_weight * -dside[side] * dexp
                            / denom
                            + w.dfl_weight * g[i] / (4.0 * denom);
                    }
                }
                target_cls = Some((gt.class, boxes[a].iou(&gt.bbox).max(0.0)));
            }
            for c in 0..nc {
                let y = match target_cls {
                    Some((tc, s)) if tc == c => s,
                    _ => 0.0,
                };
                cls_sum += bce_with_logits(row[c], y);
                g_cls[a * nc + c] = w.cls_weight * (sigmoid(row[c]) - y) / denom;
            }
        }
        grads.push(PredictionGrads {
            reg: g_reg,
            cls: g_cls,
        });
    }
    let box_loss = box_sum / denom;
    let dfl_loss = dfl_sum / denom;
    let cls_loss = cls_sum / denom;
    let bundle = LossBundle {
        box_loss,
        dfl_loss,
        cls_loss,
        total: w.box_weight * box_loss + w.dfl_weight * dfl_loss + w.cls_weight * cls_loss,
        weights: w,
        num_positive: num_pos,
    };
    if !bundle.total.is_finite() {
        return Err(Error::invalid(
            "detection loss",
            format!("non-finite total {bundle:?}"),
        ));
    }
    Ok((bundle, grads))
}

/// Scatters flattened per-image gradients back into per-scale `(reg, cls)`
/// tensors shaped like `like`.
pub fn unflatten_grads(
    grads: &[PredictionGrads],
    like: &[(Tensor, Tensor)],
) -> Result<Vec<(Tensor, Tensor)>> {
    let mut out = Vec::with_capacity(like.len());
    let mut offset = 0;
    for (r, c) in like {
        let (n, rc, h, w) = r.dims4()?;
        let cc = c.dims4()?.1;
        if n != grads.len() {
            return Err(Error::shape(
                "unflatten_grads",
                format!("batch {n} vs {} images", grads.len()),
            ));
        }
        let plane = h * w;
        let mut gr = Tensor::zeros(r.shape());
        let mut gc = Tensor::zeros(c.shape());
        for (b, g) in grads.iter().enumerate() {
            for p in 0..plane {
                let a = offset + p;
                for ch in 0..rc {
                    gr.data_mut()[(b * rc + ch) * plane + p] = g.reg[a * rc + ch] as f32;
                }
                for ch in 0..cc {
                    gc.data_mut()[(b * cc + ch) * plane + p] = g.cls[a * cc + ch] as f32;
                }
            }
        }
        offset += plane;
        out.push((gr, gc));
    }
    Ok(out)
}
