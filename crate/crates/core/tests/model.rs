mod common;

use common::{rng, uniform32};
use hgo_core::cost::model_cost_report;
use hgo_core::graph::{ParamStore, StorageDtype};
use hgo_core::model::{build_graph, BackboneKind, Model, ModelConfig, ModelSpec, Scale};
use hgo_core::Error;

fn small(cfg: ModelConfig, input: usize) -> ModelConfig {
    ModelConfig {
        model: ModelSpec {
            input_size: input,
            ..cfg.model
        },
        ..cfg
    }
}

fn output_grid(cfg: &ModelConfig) -> Vec<usize> {
    let (graph, _) = build_graph(cfg).unwrap();
    let s = cfg.model.input_size;
    let shapes = graph.infer_shapes((s, s)).unwrap();
    graph
        .outputs()
        .iter()
        .step_by(2)
        .map(|&o| shapes[o].1)
        .collect()
}

#[test]
fn every_scale_builds_and_hgo_is_smaller() {
    for scale in Scale::ALL {
        let mut params = Vec::new();
        for cfg in [ModelConfig::hgo(scale), ModelConfig::baseline(scale)] {
            let (graph, _) = build_graph(&cfg).unwrap();
            params.push(model_cost_report(&graph, (640, 640)).unwrap().params);
        }
        assert!(
            params[0] < params[1],
            "{scale:?}: hgo {} vs baseline {}",
            params[0],
            params[1]
        );
    }
}

#[test]
fn output_strides() {
    for cfg in [ModelConfig::hgo(Scale::N), ModelConfig::baseline(Scale::N)] {
        assert_eq!(output_grid(&cfg), vec![80, 40, 20]);
        assert_eq!(output_grid(&small(cfg, 320)), vec![40, 20, 10]);
    }
}

#[test]
fn invalid_input_sizes_are_rejected() {
    assert!(build_graph(&small(ModelConfig::hgo(Scale::N), 100)).is_err());
    let model = Model::new(small(ModelConfig::hgo(Scale::N), 64), 0).unwrap();
    let err = model
        .forward(&uniform32(&[1, 3, 32, 32], &mut rng(0)))
        .unwrap_err();
    assert!(matches!(err, Error::Shape { .. }), "{err}");
}

#[test]
fn forward_shapes_and_determinism() {
    for backbone in [BackboneKind::HgNetV2, BackboneKind::C2fBaseline] {
        let base = match backbone {
            BackboneKind::HgNetV2 => ModelConfig::hgo(Scale::N),
            BackboneKind::C2fBaseline => ModelConfig::baseline(Scale::N),
        };
        let cfg = small(base, 64);
        let a = Model::new(cfg.clone(), 9).unwrap();
        let b = Model::new(cfg, 9).unwrap();
        let x = uniform32(&[2, 3, 64, 64], &mut rng(1));
        let ya = a.forward(&x).unwrap();
        assert_eq!(ya, b.forward(&x).unwrap());
        assert_eq!(ya.len(), 3);
        assert_eq!(ya[0].0.shape(), &[2, 64, 8, 8]);
        assert_eq!(ya[2].1.shape(), &[2, 4, 2, 2]);
        assert!(ya.iter().all(|(r, c)| r.all_finite() && c.all_finite()));
        assert_eq!(a.anchors().unwrap().len(), 64 + 16 + 4);
    }
}

#[test]
fn seeds_change_weights() {
    let cfg = small(ModelConfig::hgo(Scale::N), 64);
    assert_eq!(
        Model::new(cfg.clone(), 1).unwrap().params,
        Model::new(cfg.clone(), 1).unwrap().params
    );
    assert_ne!(
        Model::new(cfg.clone(), 1).unwrap().params,
        Model::new(cfg, 2).unwrap().params
    );
}

#[test]
fn weights_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(ModelConfig::hgo(Scale::N), 64);
    let model = Model::new(cfg.clone(), 4).unwrap();
    let f32_path = dir.path().join("w32.hgow");
    model.save_weights(&f32_path, StorageDtype::F32).unwrap();
    let mut loaded = Model::new(cfg.clone(), 99).unwrap();
    loaded.load_weights(&f32_path).unwrap();
    for ((na, a), (nb, b)) in model.params.iter().zip(loaded.params.iter()) {
        assert_eq!(na, nb);
        let bits =
            |t: &hgo_core::tensor::Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b), "{na}");
    }
    let size = std::fs::metadata(&f32_path).unwrap().len() as usize;
    assert_eq!(size, model.params.serialized_size(StorageDtype::F32));

    let f16_path = dir.path().join("w16.hgow");
    model.save_weights(&f16_path, StorageDtype::F16).unwrap();
    let mut half = Model::new(cfg, 99).unwrap();
    half.load_weights(&f16_path).unwrap();
    let x = uniform32(&[1, 3, 64, 64], &mut rng(2));
    for ((ra, ca), (rb, cb)) in model
        .forward(&x)
        .unwrap()
        .iter()
        .zip(half.forward(&x).unwrap().iter())
    {
        for (a, b) in [(ra, rb), (ca, cb)] {
            let diff: f64 = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(p, q)| ((p - q) as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            let rel = diff / a.l2_norm().max(1e-12);
            assert!(rel < 1e-2, "relative error {rel}");
        }
    }
}

#[test]
fn same_seed_same_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(ModelConfig::baseline(Scale::N), 64);
    let paths: Vec<_> = (0..2)
        .map(|i| {
            let p = dir.path().join(format!("{i}.hgow"));
            Model::new(cfg.clone(), 11)
                .unwrap()
                .save_weights(&p, StorageDtype::F32)
                .unwrap();
            p
        })
        .collect();
    assert_eq!(
        std::fs::read(&paths[0]).unwrap(),
        std::fs::read(&paths[1]).unwrap()
    );
}

#[test]
fn weights_file_errors() {
    let cfg = small(ModelConfig::hgo(Scale::N), 64);
    let model = Model::new(cfg.clone(), 0).unwrap();
    let mut bytes = Vec::new();
    model
        .params
        .write_to(&mut bytes, StorageDtype::F32)
        .unwrap();

    // Header announcing zero entries: every slot is missing.
    let mut empty = bytes[..6].to_vec();
    empty.extend_from_slice(&0u32.to_le_bytes());
    let err = ParamStore::read_from(empty.as_slice(), &model.graph).unwrap_err();
    assert!(err.to_string().contains("missing slot"), "{err}");

    // Weights of a different class count disagree on the prediction shapes.
    let mut other = cfg.clone();
    other.model.num_classes = 3;
    other.head.num_classes = 3;
    let other = Model::new(other, 0).unwrap();
    let err = ParamStore::read_from(bytes.as_slice(), &other.graph).unwrap_err();
    assert!(err.to_string().contains("shape"), "{err}");

    // A baseline file holds slots the hgo graph has never heard of.
    let baseline = Model::new(small(ModelConfig::baseline(Scale::N), 64), 0).unwrap();
    let mut foreign = Vec::new();
    baseline
        .params
        .write_to(&mut foreign, StorageDtype::F32)
        .unwrap();
    let err = ParamStore::read_from(foreign.as_slice(), &model.graph).unwrap_err();
    assert!(err.to_string().contains("unknown slot"), "{err}");

    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(matches!(
        ParamStore::read_from(bad_magic.as_slice(), &model.graph),
        Err(Error::Weights(_))
    ));
    assert!(ParamStore::read_from(&bytes[..bytes.len() - 3], &model.graph).is_err());
    let missing = std::path::Path::new("/nonexistent/w.hgow");
    assert!(matches!(
        ParamStore::load(missing, &model.graph),
        Err(Error::Io { .. })
    ));
}
