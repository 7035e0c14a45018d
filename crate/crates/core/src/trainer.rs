//! Training loop for the joint objective and the exit-head-only phase.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{AnnotationRecord, CompositeSample};
use crate::error::{Error, Result};
use crate::harmonet::Forward;
use crate::harmonet::{
    decide_exit, gru_cell, GruVars, Harmonizer, HarmonizerConfig, ParamVars, Trainable, SCORED_STAGES,
};
use crate::losses::{exit_objective, sample_objective, LossReport};
use crate::par;
use crate::tensor::ptw::PtwFile;
use crate::tensor::{Adam, AdamState, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// When set, overrides `steps` with `epochs * ceil(n / batch_size)`.
    pub epochs: Option<usize>,
    pub seed: u64,
    /// Save a checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
    pub annotations: Option<PathBuf>,
    pub model: HarmonizerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 4,
            steps: 1000,
            epochs: None,
            seed: 0,
            checkpoint_every: 0,
            annotations: None,
            model: HarmonizerConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        self.model.validate()
    }

    pub fn total_steps(&self, dataset_len: usize) -> usize {
        match self.epochs {
            Some(e) => e * dataset_len.div_ceil(self.batch_size),
            None => self.steps,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Exit labels by sample id; every id must exist in the dataset.
pub fn label_map(
    records: &[AnnotationRecord],
    dataset: &[CompositeSample],
) -> Result<HashMap<String, [f64; SCORED_STAGES]>> {
    let ids: std::collections::HashSet<&str> = dataset.iter().map(|s| s.id.as_str()).collect();
    let mut out = HashMap::new();
    for r in records {
        if !ids.contains(r.id.as_str()) {
            return Err(Error::InvalidArgument(format!(
                "annotation for unknown sample `{}`",
                r.id
            )));
        }
        out.insert(r.id.clone(), r.labels());
    }
    Ok(out)
}

/// Dataset indices used by `step` (0-based): consecutive slices of per-epoch
/// permutations, each seeded by `(seed, epoch)`.
pub fn batch_indices(n: usize, batch: usize, seed: u64, step: usize) -> Vec<usize> {
    let mut cache: Option<(usize, Vec<usize>)> = None;
    (step * batch..(step + 1) * batch)
        .map(|pos| {
            let epoch = pos / n;
            if cache.as_ref().map(|c| c.0) != Some(epoch) {
                let mut perm: Vec<usize> = (0..n).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(epoch as u64);
                perm.shuffle(&mut rng);
                cache = Some((epoch, perm));
            }
            cache.as_ref().unwrap().1[pos % n]
        })
        .collect()
}

pub(crate) struct SampleGrad {
    pub grads: BTreeMap<String, Vec<f32>>,
    pub report: LossReport,
    pub warnings: Vec<String>,
}

/// Forward and backward of one sample with every non-encoder parameter
/// trainable.
pub(crate) fn sample_gradient(
    model: &Harmonizer,
    sample: &CompositeSample,
    labels: Option<[f64; SCORED_STAGES]>,
) -> Result<SampleGrad> {
    let mut tape = Tape::new();
    let mut fw = Forward::new(&mut tape, model, &sample.composite, &sample.fg_mask, Trainable::All)?;
    let loss = sample_objective(&mut tape, &mut fw, labels)?;
    let mut report = loss.report(&tape);
    report.all = tape.value(loss.all).item() as f64;
    tape.backward(loss.all)?;
    let grads = fw.params.grads(&tape);
    Ok(SampleGrad {
        grads,
        report,
        warnings: fw.warnings,
    })
}

/// Mean gradient over samples, summed in sample order.
fn reduce(model: &Harmonizer, parts: &[SampleGrad], filter: impl Fn(&str) -> bool) -> BTreeMap<String, Vec<f32>> {
    let n = parts.len() as f32;
    let mut out: BTreeMap<String, Vec<f32>> = model
        .params
        .iter()
        .filter(|(k, _)| filter(k))
        .map(|(k, t)| (k.clone(), vec![0.0; t.len()]))
        .collect();
    for p in parts {
        for (name, g) in &p.grads {
            if let Some(acc) = out.get_mut(name) {
                acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
            }
        }
    }
    for g in out.values_mut() {
        g.iter_mut().for_each(|v| *v /= n);
    }
    out
}

fn first_non_finite_grad(grads: &BTreeMap<String, Vec<f32>>) -> Option<String> {
    grads
        .iter()
        .find(|(_, g)| g.iter().any(|v| !v.is_finite()))
        .map(|(n, _)| format!("grad:{n}"))
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: Harmonizer,
    pub optim: AdamState,
    /// Completed optimizer steps.
    pub step: usize,
    pub labels: HashMap<String, [f64; SCORED_STAGES]>,
    pub warnings: Vec<String>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Harmonizer::new(config.model.clone(), config.seed)?;
        Self::with_model(config, model)
    }

    pub fn with_model(config: TrainConfig, model: Harmonizer) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            optim: AdamState::new(Adam::with_lr(config.lr)),
            config,
            model,
            step: 0,
            labels: HashMap::new(),
            warnings: Vec::new(),
        })
    }

    pub fn set_annotations(&mut self, records: &[AnnotationRecord], dataset: &[CompositeSample]) -> Result<()> {
        self.labels = label_map(records, dataset)?;
        Ok(())
    }

    /// One optimizer step on the next batch; returns the batch-mean report.
    pub fn train_step(&mut self, data: &[CompositeSample]) -> Result<LossReport> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        let idx = batch_indices(data.len(), self.config.batch_size, self.config.seed, self.step);
        let model = &self.model;
        let labels = &self.labels;
        let parts: Vec<SampleGrad> = par::map(&idx, |&i| {
            let s = &data[i];
            sample_gradient(model, s, labels.get(&s.id).copied())
        })
        .into_iter()
        .collect::<Result<_>>()?;
        let step_no = self.step + 1;
        let reports: Vec<LossReport> = parts.iter().map(|p| p.report.clone()).collect();
        let report = LossReport::mean(&reports);
        for r in &reports {
            if let Some(term) = r.first_non_finite() {
                return Err(Error::NonFinite { step: step_no, term });
            }
        }
        let grads = reduce(&self.model, &parts, |_| true);
        if let Some(term) = first_non_finite_grad(&grads) {
            return Err(Error::NonFinite { step: step_no, term });
        }
        self.optim.step(&mut self.model.params, &grads)?;
        self.step = step_no;
        for p in parts {
            for w in p.warnings {
                if !self.warnings.contains(&w) {
                    self.warnings.push(w);
                }
            }
        }
        Ok(report)
    }

    /// Run `steps` more steps, calling `sink` after each with the step
    /// number (1-based) and its report.
    pub fn run(
        &mut self,
        data: &[CompositeSample],
        steps: usize,
        mut sink: impl FnMut(&Trainer, usize, &LossReport) -> Result<()>,
    ) -> Result<Vec<LossReport>> {
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            let r = self.train_step(data)?;
            sink(self, self.step, &r)?;
            out.push(r);
        }
        Ok(out)
    }

    /// Write `model.ptw` (+ sidecar), `optim.ptw` and `state.json` into `dir`.
    pub fn save_checkpoint(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        crate::harmonet::save_model(&self.model, dir.join("model.ptw"))?;
        let mut f = PtwFile::new();
        for (prefix, moments) in [("m.", &self.optim.first_moment), ("v.", &self.optim.second_moment)] {
            for (name, v) in moments {
                f.push(format!("{prefix}{name}"), Tensor::new(vec![v.len()], v.clone())?);
            }
        }
        f.save(dir.join("optim.ptw"))?;
        let state = CheckpointState {
            step: self.step,
            adam_step: self.optim.step,
            adam: self.optim.hyper,
            config: self.config.clone(),
        };
        let p = dir.join("state.json");
        fs::write(&p, serde_json::to_string_pretty(&state)?).map_err(|e| Error::io(p, e))
    }

    /// Restore a trainer saved by [`Trainer::save_checkpoint`]. Labels must
    /// be set again by the caller.
    pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let p = dir.join("state.json");
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let state: CheckpointState = serde_json::from_str(&text)?;
        let model = crate::harmonet::load_model(dir.join("model.ptw"))?;
        let f = PtwFile::load(dir.join("optim.ptw"))?;
        let mut optim = AdamState::new(state.adam);
        optim.step = state.adam_step;
        for (name, t) in f.entries {
            let (map, key) = if let Some(k) = name.strip_prefix("m.") {
                (&mut optim.first_moment, k)
            } else if let Some(k) = name.strip_prefix("v.") {
                (&mut optim.second_moment, k)
            } else {
                return Err(Error::Format(format!("unexpected optimizer entry `{name}`")));
            };
            map.insert(key.to_string(), t.into_data());
        }
        Ok(Self {
            config: state.config,
            model,
            optim,
            step: state.step,
            labels: HashMap::new(),
            warnings: Vec::new(),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointState {
    step: usize,
    adam_step: u64,
    adam: Adam,
    config: TrainConfig,
}

/// Train a fresh model for `config.total_steps` steps.
pub fn train(
    dataset: &[CompositeSample],
    annotations: &[AnnotationRecord],
    config: &TrainConfig,
) -> Result<(Harmonizer, Vec<LossReport>)> {
    let mut t = Trainer::new(config.clone())?;
    t.set_annotations(annotations, dataset)?;
    if dataset.is_empty() && config.total_steps(0) > 0 {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let log = t.run(dataset, config.total_steps(dataset.len()), |_, _, _| Ok(()))?;
    Ok((t.model, log))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExitHeadConfig {
    pub lr: f64,
    pub steps: usize,
    /// Samples per step; `None` uses every labeled sample each step.
    pub batch_size: Option<usize>,
    pub seed: u64,
}

impl Default for ExitHeadConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            steps: 500,
            batch_size: None,
            seed: 0,
        }
    }
}

/// Pooled bottom features of stages 1-3, the exit head's only inputs.
pub fn pooled_features(model: &Harmonizer, sample: &CompositeSample) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let mut fw = Forward::new(&mut tape, model, &sample.composite, &sample.fg_mask, Trainable::None)?;
    fw.advance_to(&mut tape, SCORED_STAGES)?;
    let mut out = Vec::with_capacity(SCORED_STAGES);
    for k in 0..SCORED_STAGES {
        let p = tape.global_avg_pool(fw.bottom[k])?;
        out.push(tape.value(p).detached());
    }
    Ok(out)
}

/// Exit scores from precomputed pooled features.
pub fn exit_scores_from_pooled(model: &Harmonizer, pooled: &[Tensor]) -> Result<Vec<f32>> {
    let mut tape = Tape::new();
    let mut pv = ParamVars::new(&model.params, Trainable::None);
    run_gru(&mut tape, &mut pv, pooled, model.config.gru_hidden)
        .map(|ys| ys.iter().map(|&y| tape.value(y).item()).collect())
}

fn run_gru(tape: &mut Tape<f32>, pv: &mut ParamVars<f32>, pooled: &[Tensor], hidden: usize) -> Result<Vec<Var>> {
    let g = GruVars::from_params(tape, pv)?;
    let mut h = tape.constant(Tensor::zeros(vec![1, hidden]));
    let mut ys = Vec::with_capacity(pooled.len());
    for p in pooled {
        let x = tape.constant(p.clone());
        let (y, hn) = gru_cell(tape, &g, h, x)?;
        h = hn;
        ys.push(y);
    }
    Ok(ys)
}

/// Outcome of the exit-head phase.
#[derive(Clone, Debug, PartialEq)]
pub struct ExitHeadReport {
    /// Mean summed BCE per step.
    pub losses: Vec<f64>,
    /// Fraction of `(sample, stage)` labels predicted on the right side of
    /// the threshold.
    pub label_accuracy: f64,
    /// Fraction of samples whose predicted exit equals the annotation.
    pub exit_accuracy: f64,
}

/// Train only the GRU and its head on the BCE terms of labeled samples.
/// Every other parameter and the encoder stay bit-identical.
pub fn train_exit_head_only(
    model: &mut Harmonizer,
    dataset: &[CompositeSample],
    annotations: &[AnnotationRecord],
    config: &ExitHeadConfig,
) -> Result<ExitHeadReport> {
    if !model.config.exit_head {
        return Err(Error::Config("model has no exit head".into()));
    }
    if !(config.lr > 0.0 && config.lr.is_finite()) {
        return Err(Error::Config(format!("lr {} must be positive", config.lr)));
    }
    let labels = label_map(annotations, dataset)?;
    let labeled: Vec<&CompositeSample> = dataset.iter().filter(|s| labels.contains_key(&s.id)).collect();
    if labeled.is_empty() {
        return Err(Error::InvalidArgument("no labeled samples for the exit head".into()));
    }
    let frozen: &Harmonizer = model;
    let pooled: Vec<Vec<Tensor>> = par::map(&labeled, |s| pooled_features(frozen, s))
        .into_iter()
        .collect::<Result<_>>()?;
    let targets: Vec<[f64; SCORED_STAGES]> = labeled.iter().map(|s| labels[&s.id]).collect();
    let n = labeled.len();
    let batch = config.batch_size.unwrap_or(n).clamp(1, n);
    let mut optim = AdamState::new(Adam::with_lr(config.lr));
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let idx: Vec<usize> = if batch == n {
            (0..n).collect()
        } else {
            batch_indices(n, batch, config.seed, step)
        };
        let params = &model.params;
        let hidden = model.config.gru_hidden;
        let parts: Vec<SampleGrad> = par::map(&idx, |&i| -> Result<SampleGrad> {
            let mut tape = Tape::new();
            let mut pv = ParamVars::new(params, Trainable::ExitHeadOnly);
            let ys = run_gru(&mut tape, &mut pv, &pooled[i], hidden)?;
            let loss = exit_objective(&mut tape, &ys, targets[i])?;
            let report = LossReport {
                all: tape.value(loss).item() as f64,
                ..LossReport::default()
            };
            tape.backward(loss)?;
            Ok(SampleGrad {
                grads: pv.grads(&tape),
                report,
                warnings: Vec::new(),
            })
        })
        .into_iter()
        .collect::<Result<_>>()?;
        let mean = parts.iter().map(|p| p.report.all).sum::<f64>() / parts.len() as f64;
        if !mean.is_finite() {
            return Err(Error::NonFinite {
                step: step + 1,
                term: "bce".into(),
            });
        }
        losses.push(mean);
        let grads = reduce(model, &parts, crate::harmonet::is_exit_head_param);
        if let Some(term) = first_non_finite_grad(&grads) {
            return Err(Error::NonFinite { step: step + 1, term });
        }
        optim.step(&mut model.params, &grads)?;
    }
    let (mut right, mut exits) = (0usize, 0usize);
    for (p, (s, y)) in pooled.iter().zip(labeled.iter().zip(&targets)) {
        let scores = exit_scores_from_pooled(model, p)?;
        for k in 0..SCORED_STAGES {
            right += usize::from((scores[k] > model.config.exit_threshold) == (y[k] == 1.0));
        }
        let want = annotations.iter().find(|a| a.id == s.id).map(|a| a.exit_stage);
        exits += usize::from(Some(decide_exit(&scores, model.config.exit_threshold)) == want);
    }
    Ok(ExitHeadReport {
        losses,
        label_accuracy: right as f64 / (n * SCORED_STAGES) as f64,
        exit_accuracy: exits as f64 / n as f64,
    })
}
