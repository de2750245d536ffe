//! Oracles and generators shared by the integration tests.
#![allow(dead_code)]

use hgo_core::autograd::{Tape, Var};
use hgo_core::boxes::{BBox, Detection, GroundTruth};
use hgo_core::tensor::Tensor;
use hgo_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform64(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

pub fn uniform32(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0f32..1.0))
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)` over flattened vectors.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Central-difference gradient of `f` at `x`.
pub fn numeric_grad(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + step;
            let hi = f(&p);
            p[i] = orig - step;
            let lo = f(&p);
            p[i] = orig;
            (hi - lo) / (2.0 * step)
        })
        .collect()
}

/// Checks the tape gradient of `Σ R ⊙ op(inputs)` against central differences,
/// with `R` a fixed random projection. Returns the worst relative error over
/// all inputs.
pub fn tape_fd_check(
    inputs: &[Tensor<f64>],
    seed: u64,
    op: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> f64 {
    let project = |t: &mut Tape<f64>, out: Var| -> Result<Var> {
        let shape = t.value(out).shape().to_vec();
        let mut r = rng(seed ^ 0x9e37);
        let w = t.constant(uniform64(&shape, &mut r));
        let m = t.mul(out, w)?;
        t.sum(m)
    };
    let eval = |vals: &[Tensor<f64>]| -> f64 {
        let mut t = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|v| t.leaf(v.clone())).collect();
        let out = op(&mut t, &vars).expect("forward");
        let s = project(&mut t, out).expect("projection");
        t.value(s).data()[0]
    };
    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| t.leaf(v.clone())).collect();
    let out = op(&mut t, &vars).expect("forward");
    let s = project(&mut t, out).expect("projection");
    let grads = t.backward(s).expect("backward");
    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let analytic: Vec<f64> = grads
            .get(vars[i])
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; input.len()]);
        let numeric = numeric_grad(input.data(), 1e-5, |x| {
            let mut vals = inputs.to_vec();
            vals[i] = Tensor::new(input.shape().to_vec(), x.to_vec()).unwrap();
            eval(&vals)
        });
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

pub fn random_box(rng: &mut ChaCha8Rng, extent: f64, min_side: f64) -> BBox {
    let w = rng.gen_range(min_side..extent / 2.0);
    let h = rng.gen_range(min_side..extent / 2.0);
    let x = rng.gen_range(0.0..extent - w);
    let y = rng.gen_range(0.0..extent - h);
    BBox::new(x, y, x + w, y + h)
}

pub fn random_detections(
    rng: &mut ChaCha8Rng,
    n: usize,
    classes: usize,
    extent: f64,
) -> Vec<Detection> {
    (0..n)
        .map(|_| Detection {
            bbox: random_box(rng, extent, 2.0),
            // Coarse scores so ties occur.
            score: (rng.gen_range(1..=20) as f64) / 20.0,
            class: rng.gen_range(0..classes),
        })
        .collect()
}

/// Detections clustered around a few centres so suppression actually happens.
pub fn clustered_detections(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<Detection> {
    let centres: Vec<BBox> = (0..4).map(|_| random_box(rng, 100.0, 10.0)).collect();
    (0..n)
        .map(|_| {
            let c = centres[rng.gen_range(0..centres.len())];
            let j = |r: &mut ChaCha8Rng| r.gen_range(-4.0..4.0);
            let (a, b, cc, d) = (j(rng), j(rng), j(rng), j(rng));
            Detection {
                bbox: BBox::new(
                    c.x1 + a,
                    c.y1 + b,
                    (c.x2 + cc).max(c.x1 + a + 1.0),
                    (c.y2 + d).max(c.y1 + b + 1.0),
                ),
                score: (rng.gen_range(1..=50) as f64) / 50.0,
                class: rng.gen_range(0..classes),
            }
        })
        .collect()
}

pub fn jittered_truths(rng: &mut ChaCha8Rng, dets: &[Detection], n: usize) -> Vec<GroundTruth> {
    (0..n)
        .map(|i| {
            let d = &dets[(i * 7) % dets.len()];
            let j = rng.gen_range(-3.0..3.0);
            GroundTruth {
                bbox: d.bbox.translate(j, -j),
                class: d.class,
            }
        })
        .collect()
}

fn iou_exact(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.width() * a.height() + b.width() * b.height() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// O(n²) suppression: repeatedly take the best remaining detection (highest
/// score, then lowest index) and strike every same-class rival above `thr`.
pub fn brute_nms(dets: &[Detection], thr: f64, max_det: usize) -> Vec<Detection> {
    let mut alive = vec![true; dets.len()];
    let mut out = Vec::new();
    while out.len() < max_det {
        let mut best: Option<usize> = None;
        for i in 0..dets.len() {
            if !alive[i] {
                continue;
            }
            best = match best {
                Some(b) if dets[b].score >= dets[i].score => Some(b),
                _ => Some(i),
            };
        }
        let Some(b) = best else { break };
        alive[b] = false;
        out.push(dets[b]);
        for i in 0..dets.len() {
            if alive[i]
                && dets[i].class == dets[b].class
                && iou_exact(&dets[i].bbox, &dets[b].bbox) > thr
            {
                alive[i] = false;
            }
        }
    }
    out
}

/// Exhaustive greedy matching from the full IoU matrix.
pub fn brute_match(dets: &[Detection], gts: &[GroundTruth], thr: f64) -> (Vec<bool>, Vec<bool>) {
    let iou: Vec<Vec<f64>> = dets
        .iter()
        .map(|d| {
            gts.iter()
                .map(|g| {
                    if g.class == d.class {
                        iou_exact(&d.bbox, &g.bbox)
                    } else {
                        -1.0
                    }
                })
                .collect()
        })
        .collect();
    let mut done = vec![false; dets.len()];
    let mut tp = vec![false; dets.len()];
    let mut taken = vec![false; gts.len()];
    for _ in 0..dets.len() {
        // Next detection: highest score, ties to lowest index.
        let mut next: Option<usize> = None;
        for i in 0..dets.len() {
            if !done[i] && next.map_or(true, |n| dets[i].score > dets[n].score) {
                next = Some(i);
            }
        }
        let i = next.unwrap();
        done[i] = true;
        let mut best: Option<usize> = None;
        for g in 0..gts.len() {
            if taken[g] || iou[i][g] < thr {
                continue;
            }
            if best.map_or(true, |b| iou[i][g] > iou[i][b]) {
                best = Some(g);
            }
        }
        if let Some(g) = best {
            taken[g] = true;
            tp[i] = true;
        }
    }
    (tp, taken)
}

/// A randomly sized block together with its analytic MAC count.
pub struct BlockCase {
    pub kind: &'static str,
    pub fragment: hgo_core::nn::Fragment,
    pub analytic_macs: u64,
    pub channels: usize,
    pub hw: (usize, usize),
}

/// Cycles through conv, ghost, pconv, hg block, sppf and c2f by `seed % 6`.
pub fn random_block_case(seed: u64) -> BlockCase {
    use hgo_core::cost::{c2f_cost, conv_cost, ghost_cost, hg_block_cost, pconv_cost, sppf_cost};
    use hgo_core::nn::{c2f, ghost_conv, hg_block, pconv, sppf, Fragment, GhostSpec, HgBlockSpec};
    use hgo_core::tensor::{Activation, ConvSpec};

    let mut r = rng(seed ^ 0xb10c);
    let (h, w) = (r.gen_range(3..8), r.gen_range(3..8));
    let even = |r: &mut ChaCha8Rng, lo: usize, hi: usize| 2 * r.gen_range(lo..=hi);
    let (kind, channels, fragment, analytic_macs) = match seed % 6 {
        0 => {
            let g = r.gen_range(1..=2);
            let c = g * r.gen_range(1..=3);
            let n = g * r.gen_range(1..=3);
            let k = [1, 3, 5][r.gen_range(0..3)];
            let spec = ConvSpec::new(c, n, k)
                .groups(g)
                .stride(r.gen_range(1..=2))
                .with_bias(r.gen_bool(0.5));
            let (oh, ow) = spec.output_hw(h, w).unwrap();
            let f = Fragment::single(c, seed, |b, x| {
                b.conv("conv", x, spec, false, Activation::Identity, "conv")
            })
            .unwrap();
            ("conv", c, f, conv_cost(&spec, oh, ow).macs)
        }
        1 => {
            let ratio = r.gen_range(1..=3);
            let spec = GhostSpec {
                ratio,
                cheap_kernel: [1, 3, 5][r.gen_range(0..3)],
                primary_kernel: [1, 3][r.gen_range(0..2)],
                ..GhostSpec::new(r.gen_range(1..=6), ratio * r.gen_range(1..=3))
            };
            let f = Fragment::single(spec.in_channels, seed, |b, x| {
                ghost_conv(b, "ghost", x, &spec, None)
            })
            .unwrap();
            ("ghost", spec.in_channels, f, ghost_cost(&spec, h, w))
        }
        2 => {
            let c = r.gen_range(2..=8);
            let ratio = [0.25, 0.5, 1.0][r.gen_range(0..3)];
            let cp = hgo_core::nn::partial_channels(c, ratio).unwrap_or(c);
            let ratio = cp as f64 / c as f64;
            let f = Fragment::single(c, seed, |b, x| pconv(b, "pconv", x, ratio, 3)).unwrap();
            ("pconv", c, f, pconv_cost(cp, 3, h, w).macs)
        }
        3 => {
            let mid = even(&mut r, 1, 3);
            let out = even(&mut r, 1, 4);
            let shortcut = r.gen_bool(0.5);
            let spec = HgBlockSpec {
                layer_num: r.gen_range(1..=3),
                use_ghost: r.gen_bool(0.5),
                shortcut,
                ..HgBlockSpec::new(if shortcut { out } else { r.gen_range(1..=6) }, mid, out)
            };
            let f = Fragment::single(spec.in_channels, seed, |b, x| hg_block(b, "hg", x, &spec))
                .unwrap();
            (
                "hg_block",
                spec.in_channels,
                f,
                hg_block_cost(&spec, h, w).macs,
            )
        }
        4 => {
            let c = even(&mut r, 1, 4);
            let out = r.gen_range(1..=6);
            let f = Fragment::single(c, seed, |b, x| sppf(b, "sppf", x, out)).unwrap();
            ("sppf", c, f, sppf_cost(c, out, h, w).macs)
        }
        _ => {
            let c = r.gen_range(1..=6);
            let out = even(&mut r, 1, 4);
            let n = r.gen_range(1..=2);
            let f = Fragment::single(c, seed, |b, x| c2f(b, "c2f", x, out, n, r.gen_bool(0.5)))
                .unwrap();
            ("c2f", c, f, c2f_cost(c, out, n, h, w).macs)
        }
    };
    BlockCase {
        kind,
        fragment,
        analytic_macs,
        channels,
        hw: (h, w),
    }
}

/// Multiplies counted by the nested-loop backend for one forward of `case`.
pub fn instrumented_macs(case: &BlockCase) -> u64 {
    let mut r = rng(7);
    let x = uniform64(&[1, case.channels, case.hw.0, case.hw.1], &mut r);
    let mut backend = hgo_core::reference::Reference::new(case.fragment.params());
    hgo_core::graph::execute(case.fragment.graph(), &mut backend, vec![x]).unwrap();
    backend.macs
}

pub type TapedOp = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

/// Every differentiable tape operation with input shapes for a random check.
pub fn op_catalogue() -> Vec<(String, Vec<Vec<usize>>, TapedOp)> {
    use hgo_core::tensor::{Activation, ConvSpec};
    let mut ops: Vec<(String, Vec<Vec<usize>>, TapedOp)> = Vec::new();
    let mut push = |name: &str, shapes: &[&[usize]], op: TapedOp| {
        ops.push((
            name.to_string(),
            shapes.iter().map(|s| s.to_vec()).collect(),
            op,
        ));
    };
    let spec = ConvSpec::new(3, 4, 3).with_bias(true);
    push(
        "conv",
        &[&[2, 3, 5, 5], &[4, 3, 3, 3], &[4]],
        Box::new(move |t, v| t.conv2d(v[0], v[1], Some(v[2]), spec)),
    );
    let spec = ConvSpec::new(2, 2, 3).stride(2);
    push(
        "conv strided",
        &[&[1, 2, 6, 5], &[2, 2, 3, 3]],
        Box::new(move |t, v| t.conv2d(v[0], v[1], None, spec)),
    );
    let spec = ConvSpec::depthwise(3, 3);
    push(
        "conv depthwise",
        &[&[1, 3, 4, 4], &[3, 1, 3, 3]],
        Box::new(move |t, v| t.conv2d(v[0], v[1], None, spec)),
    );
    let spec = ConvSpec::new(4, 2, 1).groups(2);
    push(
        "conv grouped",
        &[&[1, 4, 3, 3], &[2, 2, 1, 1]],
        Box::new(move |t, v| t.conv2d(v[0], v[1], None, spec)),
    );
    push(
        "maxpool",
        &[&[1, 2, 6, 6]],
        Box::new(|t, v| t.maxpool2d(v[0], 3, 1, 1)),
    );
    push(
        "maxpool strided",
        &[&[1, 1, 6, 6]],
        Box::new(|t, v| t.maxpool2d(v[0], 2, 2, 0)),
    );
    push(
        "pad",
        &[&[1, 2, 3, 3]],
        Box::new(|t, v| t.pad2d(v[0], [0, 1, 2, 1], 0.0)),
    );
    push(
        "upsample",
        &[&[1, 2, 3, 2]],
        Box::new(|t, v| t.upsample(v[0], 2)),
    );
    push(
        "concat",
        &[&[1, 2, 3, 3], &[1, 1, 3, 3]],
        Box::new(|t, v| t.concat(&[v[0], v[1]])),
    );
    push(
        "slice",
        &[&[1, 5, 2, 2]],
        Box::new(|t, v| t.slice(v[0], 1, 3)),
    );
    push(
        "add",
        &[&[2, 2, 2, 2], &[2, 2, 2, 2]],
        Box::new(|t, v| t.add(v[0], v[1])),
    );
    push(
        "mul",
        &[&[1, 3, 2, 2], &[1, 3, 2, 2]],
        Box::new(|t, v| t.mul(v[0], v[1])),
    );
    push(
        "scale",
        &[&[1, 2, 2, 2]],
        Box::new(|t, v| t.scale(v[0], -1.7)),
    );
    for act in [
        Activation::Relu,
        Activation::Silu,
        Activation::Sigmoid,
        Activation::Identity,
    ] {
        push(
            &format!("{act:?}").to_lowercase(),
            &[&[1, 3, 3, 3]],
            Box::new(move |t, v| t.activation(v[0], act)),
        );
    }
    push(
        "softmax",
        &[&[2, 5, 2, 2]],
        Box::new(|t, v| t.softmax(v[0])),
    );
    push("sum", &[&[1, 2, 3, 3]], Box::new(|t, v| t.sum(v[0])));
    push(
        "batch norm",
        &[&[2, 3, 3, 3], &[3], &[3]],
        Box::new(|t, v| t.batch_norm(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0], 1e-3)),
    );
    push(
        "batch norm (batch statistics)",
        &[&[2, 3, 3, 3], &[3], &[3]],
        Box::new(|t, v| Ok(t.batch_norm_train(v[0], v[1], v[2], 1e-3)?.0)),
    );
    // Scalar with externally supplied local gradient: Σ x².
    push(
        "custom scalar",
        &[&[1, 2, 2, 2]],
        Box::new(|t, v| {
            let x = t.value(v[0]).clone();
            let val: f64 = x.data().iter().map(|a| a * a).sum();
            let g = x.map(|a| 2.0 * a);
            t.custom_scalar(&[v[0]], val, vec![g])
        }),
    );
    push(
        "composite",
        &[&[1, 2, 6, 6], &[4, 2, 3, 3], &[4], &[4]],
        Box::new(|t, v| {
            let y = t.conv2d(v[0], v[1], None, ConvSpec::new(2, 4, 3))?;
            let (y, _, _) = t.batch_norm_train(y, v[2], v[3], 1e-3)?;
            let y = t.activation(y, Activation::Silu)?;
            let p = t.maxpool2d(y, 2, 2, 0)?;
            let u = t.upsample(p, 2)?;
            let s = t.slice(u, 0, 2)?;
            let c = t.concat(&[s, y])?;
            t.softmax(c)
        }),
    );
    ops
}

/// Worst relative error of `op` over `points` random inputs.
pub fn op_fd_error(shapes: &[Vec<usize>], op: &TapedOp, points: u64) -> f64 {
    (0..points)
        .map(|seed| {
            let mut r = rng(seed * 31 + 7);
            let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| uniform64(s, &mut r)).collect();
            tape_fd_check(&inputs, seed, op)
        })
        .fold(0.0, f64::max)
}

/// Overlapping prediction/truth pair away from any kink.
pub fn random_overlapping_pair(r: &mut ChaCha8Rng) -> (BBox, BBox) {
    let (x, y) = (r.gen_range(0.0..20.0), r.gen_range(0.0..20.0));
    let g = BBox::new(x, y, x + r.gen_range(4.0..30.0), y + r.gen_range(4.0..30.0));
    let p = BBox::new(
        g.x1 + r.gen_range(-5.0..5.0),
        g.y1 + r.gen_range(-5.0..5.0),
        g.x2 + r.gen_range(-5.0..5.0),
        g.y2 + r.gen_range(-5.0..5.0),
    );
    (p, g)
}

/// Relative error of the analytic box-metric gradient against central differences.
pub fn box_loss_fd_error(kind: hgo_core::losses::BoxLossKind, seed: u64) -> f64 {
    use hgo_core::losses::{iou_metrics, metric_with_grad};
    let mut r = rng(seed + 500);
    let (p, g) = random_overlapping_pair(&mut r);
    let wh = (64.0, 64.0);
    let (_, analytic) = metric_with_grad(&p, &g, kind, wh, 0.75);
    let numeric = numeric_grad(&[p.x1, p.y1, p.x2, p.y2], 1e-6, |c| {
        iou_metrics(&BBox::new(c[0], c[1], c[2], c[3]), &g, wh.0, wh.1, 0.75).get(kind)
    });
    rel_err(&analytic, &numeric)
}

/// Relative error of the DFL gradient at a random point.
pub fn dfl_fd_error(seed: u64) -> f64 {
    use hgo_core::losses::{dfl_loss, dfl_loss_with_grad};
    let mut r = rng(seed + 900);
    let logits: Vec<f64> = (0..16).map(|_| r.gen_range(-2.0..2.0)).collect();
    let t = r.gen_range(0.0..14.9);
    let (_, g) = dfl_loss_with_grad(&logits, t).unwrap();
    rel_err(
        &g,
        &numeric_grad(&logits, 1e-6, |x| dfl_loss(x, t).unwrap()),
    )
}

/// Regression and classification gradient errors of the full detection loss.
/// Classification targets are detached IoUs, so the regression gradient is
/// checked with the classification term switched off.
pub fn detection_loss_fd_error(kind: hgo_core::losses::BoxLossKind, seed: u64) -> (f64, f64) {
    use hgo_core::boxes::GroundTruth;
    use hgo_core::heads::{dynamic_anchor_stride, Predictions};
    use hgo_core::losses::{detection_loss, LossSettings};
    let anchors = dynamic_anchor_stride(&[(4, 4), (2, 2), (1, 1)], (32, 32)).unwrap();
    let (bins, nc) = (6, 3);
    let mut r = rng(seed + 1300);
    let pred = Predictions {
        bins,
        num_classes: nc,
        reg: (0..anchors.len() * 4 * bins)
            .map(|_| r.gen_range(-1.0..1.0))
            .collect(),
        cls: (0..anchors.len() * nc)
            .map(|_| r.gen_range(-2.0..2.0))
            .collect(),
    };
    let gts = vec![
        GroundTruth {
            bbox: BBox::new(2.0, 3.0, 17.0, 14.0),
            class: 1,
        },
        GroundTruth {
            bbox: BBox::new(18.0, 16.0, 30.0, 31.0),
            class: 2,
        },
    ];
    let total = |p: Predictions, s: &LossSettings| {
        detection_loss(&[p], &anchors, std::slice::from_ref(&gts), s)
            .unwrap()
            .0
            .total
    };

    let mut s = LossSettings::new(kind, 32);
    s.weights.cls_weight = 0.0;
    let (bundle, grads) = detection_loss(
        std::slice::from_ref(&pred),
        &anchors,
        std::slice::from_ref(&gts),
        &s,
    )
    .unwrap();
    assert!(bundle.num_positive > 0);
    let numeric = numeric_grad(&pred.reg, 1e-6, |reg| {
        total(
            Predictions {
                reg: reg.to_vec(),
                ..pred.clone()
            },
            &s,
        )
    });
    let reg_err = rel_err(&grads[0].reg, &numeric);

    let s = LossSettings::new(kind, 32);
    let (_, grads) = detection_loss(
        std::slice::from_ref(&pred),
        &anchors,
        std::slice::from_ref(&gts),
        &s,
    )
    .unwrap();
    let numeric = numeric_grad(&pred.cls, 1e-6, |cls| {
        total(
            Predictions {
                cls: cls.to_vec(),
                ..pred.clone()
            },
            &s,
        )
    });
    (reg_err, rel_err(&grads[0].cls, &numeric))
}
