mod common;

use common::{instrumented_macs, random_block_case, rng, uniform64};
use hgo_core::cost::{
    conv_cost, ghost_cost, ghost_equivalent_conv, ghost_ratio, model_cost_report, CostReport,
};
use hgo_core::graph::execute;
use hgo_core::model::{BackboneKind, Model, ModelConfig, ModelSpec, Scale};
use hgo_core::nn::GhostSpec;
use hgo_core::reference::Reference;
use hgo_core::tensor::ConvSpec;
use num_rational::Ratio;
use proptest::prelude::*;
use rand::Rng;

#[test]
fn conv_worked_example() {
    let c = conv_cost(&ConvSpec::new(3, 4, 3), 8, 8);
    assert_eq!(c.macs, 6912);
    assert_eq!(c.params, 4 * 3 * 9);
    let with_bias = conv_cost(&ConvSpec::new(3, 4, 3).with_bias(true), 8, 8);
    assert_eq!(with_bias.params, 4 * 3 * 9 + 4);
}

#[test]
fn unit_conv_costs_one_mac_per_pixel() {
    assert_eq!(conv_cost(&ConvSpec::new(1, 1, 1), 5, 7).macs, 35);
}

#[test]
fn ghost_worked_example() {
    let spec = GhostSpec::new(64, 64);
    assert_eq!(ghost_cost(&spec, 8, 8), 8 * 8 * 32 * 64 + 8 * 8 * 32 * 9);
    assert_eq!(ghost_cost(&spec, 8, 8), 149_504);
}

#[test]
fn ghost_without_expansion_is_a_plain_conv() {
    for (c, n, k) in [(3, 5, 1), (8, 8, 3), (16, 4, 5)] {
        let spec = GhostSpec {
            ratio: 1,
            primary_kernel: k,
            ..GhostSpec::new(c, n)
        };
        assert_eq!(
            ghost_cost(&spec, 6, 9),
            conv_cost(&ghost_equivalent_conv(&spec), 6, 9).macs
        );
        assert_eq!(ghost_ratio(&spec), Ratio::from_integer(1));
    }
}

#[test]
fn ghost_ratio_closed_form() {
    let spec = GhostSpec {
        cheap_kernel: 3,
        primary_kernel: 3,
        ..GhostSpec::new(16, 32)
    };
    assert_eq!(ghost_ratio(&spec), Ratio::new(32, 17));
}

fn measured_ratio(spec: &GhostSpec, h: usize, w: usize) -> Ratio<u64> {
    Ratio::new(
        conv_cost(&ghost_equivalent_conv(spec), h, w).macs,
        ghost_cost(spec, h, w),
    )
}

#[test]
fn ghost_ratio_matches_cost_quotient() {
    let mut r = rng(11);
    for _ in 0..50 {
        let s = r.gen_range(1..=6);
        let spec = GhostSpec {
            ratio: s,
            cheap_kernel: [1, 3, 5, 7][r.gen_range(0..4)],
            primary_kernel: [1, 3, 5][r.gen_range(0..3)],
            ..GhostSpec::new(r.gen_range(1..=256), s * r.gen_range(1..=64))
        };
        let (h, w) = (r.gen_range(1..=40), r.gen_range(1..=40));
        assert_eq!(ghost_ratio(&spec), measured_ratio(&spec, h, w), "{spec:?}");
    }
}

#[test]
fn wide_inputs_approach_the_expansion_ratio() {
    for s in 2..=8 {
        let spec = GhostSpec {
            ratio: s,
            cheap_kernel: 3,
            primary_kernel: 3,
            ..GhostSpec::new(4096, s * 16)
        };
        let ratio = *ghost_ratio(&spec).numer() as f64 / *ghost_ratio(&spec).denom() as f64;
        assert!(
            (ratio - s as f64).abs() / (s as f64) < 0.01,
            "s={s}: {ratio}"
        );
    }
}

#[test]
fn block_macs_equal_instrumented_counts() {
    for seed in 0..60 {
        let case = random_block_case(seed);
        assert_eq!(
            case.analytic_macs,
            instrumented_macs(&case),
            "{} seed {seed}",
            case.kind
        );
        let report = model_cost_report(case.fragment.graph(), case.hw).unwrap();
        assert_eq!(report.macs, case.analytic_macs, "{} seed {seed}", case.kind);
    }
}

#[test]
fn report_params_match_parameter_store() {
    for seed in 0..18 {
        let case = random_block_case(seed);
        let report = model_cost_report(case.fragment.graph(), case.hw).unwrap();
        let stored: usize = case
            .fragment
            .params()
            .iter()
            .filter(|(name, _)| !name.contains("running_"))
            .map(|(_, t)| t.len())
            .sum();
        assert_eq!(report.params, stored as u64, "{} seed {seed}", case.kind);
    }
}

fn tiny_config(backbone: BackboneKind) -> ModelConfig {
    let mut cfg = match backbone {
        BackboneKind::HgNetV2 => ModelConfig::hgo(Scale::N),
        BackboneKind::C2fBaseline => ModelConfig::baseline(Scale::N),
    };
    cfg.model = ModelSpec {
        input_size: 32,
        width_mult: Some(0.0625),
        ..cfg.model
    };
    cfg
}

#[test]
fn whole_model_macs_equal_instrumented_counts() {
    for backbone in [BackboneKind::HgNetV2, BackboneKind::C2fBaseline] {
        let model = Model::new(tiny_config(backbone), 3).unwrap();
        let report = model_cost_report(&model.graph, (32, 32)).unwrap();
        let x = uniform64(&[1, 3, 32, 32], &mut rng(5));
        let mut backend = Reference::new(&model.params);
        execute(&model.graph, &mut backend, vec![x]).unwrap();
        assert_eq!(report.macs, backend.macs, "{backbone:?}");
        for (row, (name, macs)) in report.rows.iter().zip(&backend.per_layer) {
            assert_eq!(&row.name, name);
            assert_eq!(row.macs, *macs, "{name}");
        }
    }
}

#[test]
fn totals_are_sums_of_rows() {
    let model = Model::new(ModelConfig::hgo(Scale::N), 0).unwrap();
    let report = model_cost_report(&model.graph, (640, 640)).unwrap();
    assert_eq!(report.flops, 2 * report.macs);
    assert_eq!(report.macs, report.rows.iter().map(|r| r.macs).sum::<u64>());
    assert_eq!(
        report.params,
        report.rows.iter().map(|r| r.params).sum::<u64>()
    );
    assert_eq!(
        report.macs,
        report.backbone_macs + report.neck_macs + report.head_macs
    );
    assert_eq!(report.params as usize, model.num_params());
    assert!((report.gflops - report.flops as f64 / 1e9).abs() < 1e-12);
}

#[test]
fn shared_slots_counted_once() {
    let model = Model::new(ModelConfig::hgo(Scale::N), 0).unwrap();
    let report = model_cost_report(&model.graph, (640, 640)).unwrap();
    let head_rows: Vec<_> = report
        .rows
        .iter()
        .filter(|r| r.section == hgo_core::graph::Section::Head)
        .collect();
    let zero_param_convs = head_rows
        .iter()
        .filter(|r| r.macs > 0 && r.params == 0)
        .count();
    assert!(zero_param_convs > 0, "shared head should reuse slots");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn totals_ignore_row_order(seed in any::<u64>()) {
        let model = Model::new(tiny_config(BackboneKind::HgNetV2), 1).unwrap();
        let report = model_cost_report(&model.graph, (32, 32)).unwrap();
        let mut rows = report.rows.clone();
        let mut r = rng(seed);
        for i in (1..rows.len()).rev() {
            rows.swap(i, r.gen_range(0..=i));
        }
        let permuted = CostReport::from_rows((32, 32), rows);
        prop_assert_eq!(permuted.macs, report.macs);
        prop_assert_eq!(permuted.params, report.params);
        prop_assert_eq!(permuted.head_macs, report.head_macs);
        prop_assert_eq!(permuted.elementwise, report.elementwise);
    }
}
