use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::Model;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub input_size: usize,
    pub warmup: usize,
    pub iterations: usize,
    pub mean_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub fps: f64,
}

/// Wall-clock timing of single-image forward passes on a constant input.
pub fn bench(model: &Model, warmup: usize, iterations: usize) -> Result<BenchReport> {
    let s = model.input_size();
    let x = Tensor::full(&[1, 3, s, s], 0.5f32);
    for _ in 0..warmup {
        model.forward(&x)?;
    }
    let mut times = Vec::with_capacity(iterations);
    for _ in 0..iterations.max(1) {
        let t = Instant::now();
        model.forward(&x)?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let mean = times.iter().sum::<f64>() / times.len() as f64;
    Ok(BenchReport {
        input_size: s,
        warmup,
        iterations: times.len(),
        mean_ms: mean,
        min_ms: times.iter().copied().fold(f64::INFINITY, f64::min),
        max_ms: times.iter().copied().fold(0.0, f64::max),
        fps: 1e3 / mean,
    })
}
