mod common;

use common::{rng, uniform32};
use hgo_core::cost::model_cost_report;
use hgo_core::graph::{LayerKind, Section};
use hgo_core::heads::{
    build_head, decode_distances, dfl_expectation, distances_to_box, dynamic_anchor_stride,
    AnchorCache, HeadConfig, HeadLayer, Predictions,
};
use hgo_core::model::{Model, ModelConfig, Scale};
use hgo_core::nn::Fragment;
use proptest::prelude::*;
use rand::Rng;

fn head_fragment(cfg: &HeadConfig) -> Fragment {
    let cfg = cfg.clone();
    Fragment::build(&cfg.in_channels.clone(), 0, move |b, ins| {
        Ok(build_head(b, ins, &cfg)?
            .into_iter()
            .flat_map(|(r, c)| [r, c])
            .collect())
    })
    .unwrap()
}

fn features(channels: &[usize], base: usize) -> Vec<hgo_core::tensor::Tensor> {
    let mut r = rng(base as u64);
    channels
        .iter()
        .enumerate()
        .map(|(i, &c)| uniform32(&[1, c, base >> i, base >> i], &mut r))
        .collect()
}

#[test]
fn decoupled_layer_census() {
    let frag = head_fragment(&HeadConfig::decoupled(4, vec![64, 128, 256]));
    let (mut k3, mut k1) = (0, 0);
    for l in frag.graph().layers() {
        if let LayerKind::Conv { spec, .. } = &l.kind {
            match spec.kernel {
                3 => k3 += 1,
                1 => k1 += 1,
                k => panic!("unexpected {k}x{k} conv {}", l.name),
            }
        }
    }
    assert_eq!((k3, k1), (12, 6));
}

#[test]
fn decoupled_output_shapes() {
    let frag = head_fragment(&HeadConfig::decoupled(4, vec![64, 64, 64]));
    let xs = features(&[64, 64, 64], 8);
    let outs = frag.forward_many(&xs.iter().collect::<Vec<_>>()).unwrap();
    assert_eq!(outs[0].shape(), &[1, 64, 8, 8]);
    assert_eq!(outs[1].shape(), &[1, 4, 8, 8]);
    assert_eq!(outs[2].shape(), &[1, 64, 4, 4]);
    assert_eq!(outs[5].shape(), &[1, 4, 2, 2]);
}

#[test]
fn decoupled_needs_three_scales() {
    assert!(HeadConfig::decoupled(4, vec![64, 64]).validate().is_err());
    let mut cfg = HeadConfig::shared(4, vec![16, 32], HeadLayer::PConv, HeadLayer::Conv);
    assert!(cfg.validate().is_ok());
    cfg.hidden_channels = Some(0);
    assert!(cfg.validate().is_err());
}

const VARIANTS: [(HeadLayer, HeadLayer); 4] = [
    (HeadLayer::Conv, HeadLayer::Conv),
    (HeadLayer::Conv, HeadLayer::PConv),
    (HeadLayer::PConv, HeadLayer::Conv),
    (HeadLayer::PConv, HeadLayer::PConv),
];

#[test]
fn every_shared_variant_runs_with_head_independent_shapes() {
    let chans = [16, 32, 64];
    let xs = features(&chans, 8);
    let refs: Vec<_> = xs.iter().collect();
    let want: Vec<Vec<usize>> = head_fragment(&HeadConfig::decoupled(3, chans.to_vec()))
        .forward_many(&refs)
        .unwrap()
        .iter()
        .map(|t| t.shape().to_vec())
        .collect();
    for (l1, l2) in VARIANTS {
        let frag = head_fragment(&HeadConfig::shared(3, chans.to_vec(), l1, l2));
        let outs = frag.forward_many(&refs).unwrap();
        let got: Vec<Vec<usize>> = outs.iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(got, want, "{l1:?}-{l2:?}");
        assert!(outs.iter().all(|t| t.all_finite()));
    }
}

#[test]
fn shared_stack_is_stored_once() {
    let frag = head_fragment(&HeadConfig::shared(
        4,
        vec![16, 32, 64],
        HeadLayer::PConv,
        HeadLayer::Conv,
    ));
    let names: Vec<&String> = frag.params().iter().map(|(n, _)| n).collect();
    let shared: Vec<_> = names
        .iter()
        .filter(|n| n.starts_with("head.shared."))
        .collect();
    assert!(shared
        .iter()
        .any(|n| n.as_str() == "head.shared.layer1.weight"));
    assert!(shared
        .iter()
        .any(|n| n.as_str() == "head.shared.layer2.weight"));
    assert!(shared
        .iter()
        .any(|n| n.as_str() == "head.shared.reg.weight"));
    assert!(shared
        .iter()
        .any(|n| n.as_str() == "head.shared.cls.weight"));
    assert!(!names
        .iter()
        .any(|n| n.starts_with("head.p0.") || n.starts_with("head.p1.")));
    // Three projections, one stack.
    assert_eq!(
        names
            .iter()
            .filter(|n| n.starts_with("head.proj")
                && n.ends_with(".weight")
                && !n.ends_with(".bn.weight"))
            .count(),
        3
    );
}

fn hgo_with_head(l1: HeadLayer, l2: HeadLayer) -> ModelConfig {
    let mut cfg = ModelConfig::hgo(Scale::N);
    cfg.head.layer1 = l1;
    cfg.head.layer2 = l2;
    cfg
}

fn head_macs(cfg: ModelConfig) -> (u64, u64) {
    let model = Model::new(cfg, 0).unwrap();
    let r = model_cost_report(&model.graph, (640, 640)).unwrap();
    (r.head_macs, r.head_params)
}

#[test]
fn lighter_positions_cost_less() {
    use HeadLayer::*;
    let m = |a, b| head_macs(hgo_with_head(a, b)).0;
    let (cc, cp, pc, pp) = (
        m(Conv, Conv),
        m(Conv, PConv),
        m(PConv, Conv),
        m(PConv, PConv),
    );
    assert!(
        pp < cp && cp <= pc && pc <= cc,
        "pp {pp} cp {cp} pc {pc} cc {cc}"
    );
}

#[test]
fn shared_head_has_fewer_parameters() {
    let shared = head_macs(ModelConfig::hgo(Scale::N));
    let mut cfg = ModelConfig::hgo(Scale::N);
    cfg.head = HeadConfig::decoupled(cfg.head.num_classes, Vec::new());
    let decoupled = head_macs(cfg);
    assert!(shared.1 < decoupled.1, "{} vs {}", shared.1, decoupled.1);
    assert!(shared.0 < decoupled.0);
}

#[test]
fn head_rows_are_tagged() {
    let model = Model::new(ModelConfig::baseline(Scale::N), 0).unwrap();
    let report = model_cost_report(&model.graph, (640, 640)).unwrap();
    assert!(report
        .rows
        .iter()
        .any(|r| r.section == Section::Head && r.name.starts_with("head.")));
    assert!(report
        .rows
        .iter()
        .filter(|r| r.section == Section::Head)
        .all(|r| r.name.starts_with("head.")));
}

#[test]
fn anchors_for_standard_input() {
    let a = dynamic_anchor_stride(&[(80, 80), (40, 40), (20, 20)], (640, 640)).unwrap();
    assert_eq!(a.len(), 8400);
    assert_eq!(a.strides(), vec![8.0, 16.0, 32.0]);
    assert_eq!(a.levels[2].points.len(), 400);
}

#[test]
fn anchor_centres() {
    let a = dynamic_anchor_stride(&[(2, 2)], (4, 4)).unwrap();
    assert_eq!(
        a.levels[0].points,
        vec![[0.5, 0.5], [1.5, 0.5], [0.5, 1.5], [1.5, 1.5]]
    );
    assert_eq!(a.levels[0].stride, 2.0);
    assert!(dynamic_anchor_stride(&[(3, 3)], (640, 640)).is_err());
    assert!(dynamic_anchor_stride(&[(0, 4)], (8, 8)).is_err());
}

#[test]
fn anchors_are_pure_and_cached() {
    let shapes = [(8, 8), (4, 4), (2, 2)];
    let a = dynamic_anchor_stride(&shapes, (64, 64)).unwrap();
    assert_eq!(a, dynamic_anchor_stride(&shapes, (64, 64)).unwrap());
    let mut cache = AnchorCache::default();
    assert_eq!(cache.get(&shapes, (64, 64)).unwrap(), &a);
    let big = cache.get(&[(16, 16)], (128, 128)).unwrap().clone();
    assert_eq!(big.len(), 256);
    assert_eq!(cache.get(&shapes, (64, 64)).unwrap(), &a);
}

#[test]
fn dfl_uniform_and_peaked() {
    let uniform = [0.0; 16];
    assert!((dfl_expectation(&uniform) - 7.5).abs() < 1e-12);
    let mut peaked = [0.0; 16];
    peaked[3] = 30.0;
    assert!((dfl_expectation(&peaked) - 3.0).abs() < 1e-6);
}

fn brute_expectation(logits: &[f64]) -> f64 {
    let z: f64 = logits.iter().map(|l| l.exp()).sum();
    logits
        .iter()
        .enumerate()
        .map(|(i, l)| i as f64 * l.exp() / z)
        .sum()
}

#[test]
fn dfl_matches_direct_sum() {
    let mut r = rng(12);
    for _ in 0..200 {
        let bins = r.gen_range(2..20);
        let logits: Vec<f64> = (0..bins).map(|_| r.gen_range(-5.0..5.0)).collect();
        assert!((dfl_expectation(&logits) - brute_expectation(&logits)).abs() < 1e-6);
    }
}

#[test]
fn decoded_boxes_follow_stride() {
    let bins = 16;
    let mut reg = vec![0.0; 4 * bins];
    for (side, bin) in [2usize, 1, 4, 3].iter().enumerate() {
        reg[side * bins + bin] = 40.0;
    }
    let d = decode_distances(&reg, bins);
    let b = distances_to_box([2.5, 3.5], d, 8.0);
    let want = [
        (2.5 - 2.0) * 8.0,
        (3.5 - 1.0) * 8.0,
        (2.5 + 4.0) * 8.0,
        (3.5 + 3.0) * 8.0,
    ];
    for (g, w) in [b.x1, b.y1, b.x2, b.y2].iter().zip(want) {
        assert!((g - w).abs() < 1e-9);
    }
}

proptest! {
    #[test]
    fn decoded_boxes_are_ordered(seed in any::<u64>(), scale in 0.1f64..50.0) {
        let mut r = rng(seed);
        let anchors = dynamic_anchor_stride(&[(4, 4), (2, 2)], (32, 32)).unwrap();
        let (bins, nc) = (8, 2);
        let pred = Predictions {
            bins,
            num_classes: nc,
            reg: (0..anchors.len() * 4 * bins).map(|_| r.gen_range(-scale..scale)).collect(),
            cls: vec![0.0; anchors.len() * nc],
        };
        for b in pred.boxes(&anchors) {
            prop_assert!(b.x2 >= b.x1 && b.y2 >= b.y1);
        }
    }
}
