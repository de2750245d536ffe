//! Mini-batch SGD with momentum over the detection loss.

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::infer::batch_tensor;
use super::letterbox::letterbox;
use super::synth::SynthScene;
use crate::boxes::GroundTruth;
use crate::error::{Error, Result};
use crate::graph::{execute, update_running_stats, BnMode, BnObservation, Taped, BN_MOMENTUM};
use crate::heads::flatten_outputs;
use crate::losses::{detection_loss, unflatten_grads, LossBundle, LossSettings};
use crate::model::{pair_outputs, Model};
use crate::tensor::Tensor;

/// Loss components after one optimizer step (measured before the update).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub box_loss: f64,
    pub dfl_loss: f64,
    pub cls_loss: f64,
    pub total: f64,
    pub num_positive: usize,
    pub grad_norm: f64,
}

/// Trailing moving average of `values` over `window`.
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

/// Mean of the first and last `window` totals.
pub fn loss_endpoints(records: &[LossRecord], window: usize) -> (f64, f64) {
    let n = window.min(records.len()).max(1);
    let mean = |r: &[LossRecord]| r.iter().map(|x| x.total).sum::<f64>() / r.len().max(1) as f64;
    (
        mean(&records[..n.min(records.len())]),
        mean(&records[records.len().saturating_sub(n)..]),
    )
}

/// One forward/backward pass over a batch. Returns the loss, gradients by
/// parameter name and the batch-norm statistics observed.
pub fn loss_and_grads(
    model: &Model,
    batch: &Tensor,
    targets: &[Vec<GroundTruth>],
    settings: &LossSettings,
) -> Result<(
    LossBundle,
    IndexMap<String, Tensor>,
    Vec<BnObservation<f32>>,
)> {
    let mut taped: Taped<'_, f32> = Taped::new(&model.params, BnMode::Train);
    let x = taped.tape.constant(batch.clone());
    let outs = execute(&model.graph, &mut taped, vec![x])?;
    let values: Vec<(Tensor, Tensor)> =
        pair_outputs(outs.iter().map(|&v| taped.tape.value(v).clone()).collect());
    let bins = model.head.dfl_bins;
    let preds = (0..targets.len())
        .map(|b| flatten_outputs(&values, bins, b))
        .collect::<Result<Vec<_>>>()?;
    let anchors = model.anchors()?;
    let (bundle, grads) = detection_loss(&preds, &anchors, targets, settings)?;
    let local: Vec<Tensor> = unflatten_grads(&grads, &values)?
        .into_iter()
        .flat_map(|(r, c)| [r, c])
        .collect();
    let loss = taped
        .tape
        .custom_scalar(&outs, bundle.total as f32, local)?;
    let mut g = taped.tape.backward(loss)?;
    let mut named = IndexMap::new();
    for (name, &v) in taped.leaves() {
        if name.contains("running_") {
            continue;
        }
        if let Some(t) = g.take(v) {
            named.insert(name.clone(), t);
        }
    }
    Ok((bundle, named, taped.observations().to_vec()))
}

/// Trains `model` in place on `scenes`. `on_step` sees every record as it
/// is produced.
pub fn train(
    model: &mut Model,
    scenes: &[SynthScene],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::invalid("training set", "no images"));
    }
    let size = model.input_size();
    let mut images = Vec::with_capacity(scenes.len());
    let mut targets = Vec::with_capacity(scenes.len());
    for s in scenes {
        let (img, info) = letterbox(&s.image, size)?;
        targets.push(
            s.gts
                .iter()
                .map(|g| GroundTruth {
                    bbox: info.forward_box(&g.bbox),
                    class: g.class,
                })
                .collect::<Vec<_>>(),
        );
        images.push(img);
    }
    let mut settings = LossSettings::new(cfg.box_loss, size);
    settings.weights = cfg.weights;
    settings.inner_ratio = cfg.inner_ratio;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut velocity: IndexMap<String, Vec<f32>> = IndexMap::new();
    let mut records = Vec::with_capacity(cfg.steps);
    let bs = cfg.batch_size.min(images.len());
    for step in 0..cfg.steps {
        if order.len() < bs {
            let mut epoch: Vec<usize> = (0..images.len()).collect();
            epoch.shuffle(&mut rng);
            order.extend(epoch);
        }
        let idx: Vec<usize> = order.drain(..bs).collect();
        let batch_imgs: Vec<_> = idx.iter().map(|&i| &images[i]).collect();
        let batch_tg: Vec<_> = idx.iter().map(|&i| targets[i].clone()).collect();
        let batch = batch_tensor(&batch_imgs)?;

        let (bundle, grads, obs) = loss_and_grads(model, &batch, &batch_tg, &settings)?;
        let norm = grads
            .values()
            .flat_map(|t| t.data().iter())
            .map(|&g| (g as f64) * (g as f64))
            .sum::<f64>()
            .sqrt();
        if !bundle.total.is_finite() || !norm.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("loss {} grad norm {norm}", bundle.total),
            });
        }
        let clip = match cfg.max_grad_norm {
            Some(m) if norm > m => m / norm,
            _ => 1.0,
        };
        update_running_stats(&mut model.params, &obs, BN_MOMENTUM)?;
        for (name, g) in &grads {
            let p = model.params.get_mut(name)?;
            let v = velocity
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            for ((w, vi), &gi) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
                let grad = gi as f64 * clip + cfg.weight_decay * *w as f64;
                *vi = (cfg.momentum * *vi as f64 + grad) as f32;
                *w -= (cfg.lr * *vi as f64) as f32;
            }
        }
        let rec = LossRecord {
            step,
            box_loss: bundle.box_loss,
            dfl_loss: bundle.dfl_loss,
            cls_loss: bundle.cls_loss,
            total: bundle.total,
            num_positive: bundle.num_positive,
            grad_norm: norm,
        };
        on_step(&rec);
        records.push(rec);
    }
    Ok(records)
}
