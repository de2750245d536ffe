use super::config::RunConfig;
use super::infer::detect_batch;
use super::synth::SynthScene;
use crate::boxes::Detection;
use crate::error::Result;
use crate::metrics::{map_summary, MapSummary};
use crate::model::Model;

/// Confidence floor used when collecting detections for AP.
pub const EVAL_CONFIDENCE: f64 = 0.001;

/// Runs the model over `scenes` and scores it against their labels.
pub fn evaluate(
    model: &Model,
    scenes: &[SynthScene],
    run: &RunConfig,
    batch: usize,
) -> Result<(MapSummary, Vec<Vec<Detection>>)> {
    let cfg = RunConfig {
        conf_threshold: EVAL_CONFIDENCE,
        ..run.clone()
    };
    let mut dets = Vec::with_capacity(scenes.len());
    for chunk in scenes.chunks(batch.max(1)) {
        let imgs: Vec<_> = chunk.iter().map(|s| &s.image).collect();
        dets.extend(detect_batch(model, &imgs, &cfg)?);
    }
    let gts: Vec<_> = scenes.iter().map(|s| s.gts.clone()).collect();
    Ok((
        map_summary(&dets, &gts, model.config.model.num_classes),
        dets,
    ))
}
