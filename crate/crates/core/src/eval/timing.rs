use std::time::Instant;

use serde::Serialize;

use crate::data::CompositeSample;
use crate::error::{Error, Result};
use crate::harmonet::{Harmonizer, InferMode, STAGES};
use crate::par;

/// Wall-clock statistics (seconds per image) for one exit stage.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageTiming {
    pub stage: usize,
    pub median: f64,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub raw: Vec<f64>,
}

impl StageTiming {
    fn from_raw(stage: usize, raw: Vec<f64>) -> Self {
        let mut sorted = raw.clone();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        let mean = raw.iter().sum::<f64>() / n as f64;
        Self {
            stage,
            median,
            mean: mean.clamp(sorted[0], sorted[n - 1]),
            min: sorted[0],
            max: sorted[n - 1],
            raw,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TimingReport {
    pub samples: usize,
    pub repetitions: usize,
    pub stages: Vec<StageTiming>,
}

impl TimingReport {
    pub fn means(&self) -> [f64; STAGES] {
        let mut m = [0.0; STAGES];
        for t in &self.stages {
            m[t.stage - 1] = t.mean;
        }
        m
    }
}

/// Time inference forced to each exit stage. One repetition runs every
/// sample once; its value is the mean seconds per image. Runs on a single
/// thread to reduce variance.
pub fn time_stages(model: &Harmonizer, samples: &[CompositeSample], repetitions: usize) -> Result<TimingReport> {
    if repetitions == 0 {
        return Err(Error::InvalidArgument("repetitions must be >= 1".into()));
    }
    if samples.is_empty() {
        return Err(Error::InvalidArgument("timing needs at least one sample".into()));
    }
    par::single_threaded(|| {
        let mut stages = Vec::with_capacity(STAGES);
        for k in 1..=STAGES {
            let mut raw = Vec::with_capacity(repetitions);
            for _ in 0..repetitions {
                let start = Instant::now();
                for s in samples {
                    model.infer(&s.composite, &s.fg_mask, InferMode::Force(k))?;
                }
                raw.push(start.elapsed().as_secs_f64() / samples.len() as f64);
            }
            stages.push(StageTiming::from_raw(k, raw));
        }
        Ok(TimingReport {
            samples: samples.len(),
            repetitions,
            stages,
        })
    })
}
