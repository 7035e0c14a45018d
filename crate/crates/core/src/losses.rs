//! Training objectives: cumulative multi-level style loss, content loss,
//! per-stage totals, exit BCE and the joint objective.

use serde::{Deserialize, Serialize};

use crate::adain::empty_fg_warning;
use crate::encoder::EncoderVars;
use crate::error::{Error, Result};
use crate::harmonet::{Forward, HarmonizerConfig, SCORED_STAGES, STAGES};
use crate::tensor::{Scalar, Tape, Tensor, Var, BCE_CLAMP};

/// Every loss term of one forward pass (or a batch mean of them).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub style: [f64; STAGES],
    pub content: [f64; STAGES],
    pub total: [f64; STAGES],
    pub bce: [f64; SCORED_STAGES],
    pub all: f64,
}

impl LossReport {
    /// Combine per-stage parts into totals and the joint objective. Under
    /// `last_stage_loss_only` only stage 4's total enters `all`.
    pub fn from_parts(
        style: [f64; STAGES],
        content: [f64; STAGES],
        bce: [f64; SCORED_STAGES],
        last_stage_loss_only: bool,
    ) -> Self {
        let mut total = [0.0; STAGES];
        for k in 0..STAGES {
            total[k] = content[k] + style[k];
        }
        let first = if last_stage_loss_only { STAGES - 1 } else { 0 };
        let all = total[first..].iter().sum::<f64>() + bce.iter().sum::<f64>();
        Self {
            style,
            content,
            total,
            bce,
            all,
        }
    }

    /// Term names paired with values, in log order.
    pub fn named_terms(&self) -> Vec<(String, f64)> {
        let mut v = Vec::with_capacity(16);
        for (p, arr) in [("sty", &self.style), ("con", &self.content), ("tot", &self.total)] {
            for (k, x) in arr.iter().enumerate() {
                v.push((format!("{p}{}", k + 1), *x));
            }
        }
        for (k, x) in self.bce.iter().enumerate() {
            v.push((format!("bce{}", k + 1), *x));
        }
        v.push(("all".into(), self.all));
        v
    }

    pub fn first_non_finite(&self) -> Option<String> {
        self.named_terms()
            .into_iter()
            .find(|(_, x)| !x.is_finite())
            .map(|(n, _)| n)
    }

    /// Element-wise mean of several reports.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let mut out = LossReport::default();
        if reports.is_empty() {
            return out;
        }
        let n = reports.len() as f64;
        for r in reports {
            for k in 0..STAGES {
                out.style[k] += r.style[k];
                out.content[k] += r.content[k];
                out.total[k] += r.total[k];
            }
            for k in 0..SCORED_STAGES {
                out.bce[k] += r.bce[k];
            }
            out.all += r.all;
        }
        for k in 0..STAGES {
            out.style[k] /= n;
            out.content[k] /= n;
            out.total[k] /= n;
        }
        for k in 0..SCORED_STAGES {
            out.bce[k] /= n;
        }
        out.all /= n;
        out
    }

    /// One training-log line with keys step, sty1..4, con1..4, tot1..4,
    /// bce1..3, all.
    pub fn to_json_line(&self, step: usize) -> String {
        let mut m = serde_json::Map::new();
        m.insert("step".into(), step.into());
        for (name, x) in self.named_terms() {
            m.insert(name, json_number(x));
        }
        serde_json::Value::Object(m).to_string()
    }

    pub fn from_json_line(line: &str) -> Result<(usize, LossReport)> {
        let v: serde_json::Value = serde_json::from_str(line)?;
        let get = |k: &str| -> Result<f64> {
            v.get(k)
                .and_then(serde_json::Value::as_f64)
                .ok_or_else(|| Error::Format(format!("log line lacks numeric `{k}`")))
        };
        let mut r = LossReport::default();
        for k in 0..STAGES {
            r.style[k] = get(&format!("sty{}", k + 1))?;
            r.content[k] = get(&format!("con{}", k + 1))?;
            r.total[k] = get(&format!("tot{}", k + 1))?;
        }
        for k in 0..SCORED_STAGES {
            r.bce[k] = get(&format!("bce{}", k + 1))?;
        }
        r.all = get("all")?;
        Ok((get("step")? as usize, r))
    }
}

fn json_number(x: f64) -> serde_json::Value {
    serde_json::Number::from_f64(x).map_or(serde_json::Value::Null, serde_json::Value::Number)
}

fn region_empty<T: Scalar>(tape: &Tape<T>, mask: Var) -> bool {
    tape.value(mask).data().iter().all(|&m| m == T::zero())
}

fn maybe_normalize<T: Scalar>(tape: &mut Tape<T>, x: Var, channels: usize, cfg: &HarmonizerConfig) -> Var {
    if cfg.normalize_by_channels {
        tape.affine(x, 1.0 / channels as f64, 0.0)
    } else {
        x
    }
}

/// Style loss from already-encoded features of a stage image.
///
/// `feats[k']` are `phi_{k'+1}(image)`, `targets[k']` the harmonized top
/// branch features and `masks[k']` the foreground masks at each level. The
/// sum runs over levels `1..=k` (all four with `full_style_loss_all_stages`).
/// Levels whose foreground is empty contribute nothing and add a warning.
pub fn style_from_features<T: Scalar>(
    tape: &mut Tape<T>,
    feats: &[Var],
    targets: &[Var],
    masks: &[Var],
    k: usize,
    cfg: &HarmonizerConfig,
    warnings: &mut Vec<String>,
) -> Result<Var> {
    if !(1..=STAGES).contains(&k) {
        return Err(Error::InvalidArgument(format!("stage {k} outside 1..=4")));
    }
    let levels = if cfg.full_style_loss_all_stages { STAGES } else { k };
    if feats.len() < levels || targets.len() < levels || masks.len() < levels {
        return Err(Error::InvalidArgument(format!(
            "style loss for stage {k} needs {levels} levels"
        )));
    }
    let mut terms = Vec::with_capacity(levels);
    for l in 0..levels {
        if region_empty(tape, masks[l]) {
            warnings.push(empty_fg_warning(l + 1));
            continue;
        }
        let out = tape.masked_stats(feats[l], masks[l], cfg.stats_mode)?;
        let mut tgt = tape.masked_stats(targets[l], masks[l], cfg.stats_mode)?;
        if cfg.stop_target_gradients {
            tgt = tape.detach(tgt);
        }
        let d = tape.sub(out, tgt)?;
        let sq = tape.sum_squares(d);
        let c = tape.shape(feats[l])[1];
        terms.push(maybe_normalize(tape, sq, c, cfg));
    }
    sum_or_zero(tape, &terms)
}

/// Style loss for the stage-`k` image: re-encode it and compare masked
/// foreground statistics with the targets.
#[allow(clippy::too_many_arguments)]
pub fn style_loss<T: Scalar>(
    tape: &mut Tape<T>,
    encoder: &EncoderVars,
    image: Var,
    k: usize,
    targets: &[Var],
    masks: &[Var],
    cfg: &HarmonizerConfig,
    warnings: &mut Vec<String>,
) -> Result<Var> {
    let feats = encoder.encode_all(tape, image)?;
    style_from_features(tape, &feats, targets, masks, k, cfg, warnings)
}

/// `||phi_4(image) - target||^2` with the target treated as a constant.
pub fn content_from_features<T: Scalar>(
    tape: &mut Tape<T>,
    feat4: Var,
    target4: Var,
    cfg: &HarmonizerConfig,
) -> Result<Var> {
    let t = tape.detach(target4);
    let d = tape.sub(feat4, t)?;
    let sq = tape.sum_squares(d);
    let c = tape.shape(feat4)[1];
    Ok(maybe_normalize(tape, sq, c, cfg))
}

pub fn content_loss<T: Scalar>(
    tape: &mut Tape<T>,
    encoder: &EncoderVars,
    image: Var,
    composite: Var,
    cfg: &HarmonizerConfig,
) -> Result<Var> {
    let a = encoder.encode_all(tape, image)?;
    let b = encoder.encode_all(tape, composite)?;
    content_from_features(tape, a[STAGES - 1], b[STAGES - 1], cfg)
}

/// Binary cross-entropy on plain numbers, with the probability clamped to
/// `[1e-7, 1 - 1e-7]`.
pub fn bce_value(p: f64, label: f64) -> f64 {
    let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    -(label * p.ln() + (1.0 - label) * (1.0 - p).ln())
}

pub fn bce_loss<T: Scalar>(tape: &mut Tape<T>, score: Var, label: f64) -> Result<Var> {
    tape.bce(score, label)
}

fn sum_or_zero<T: Scalar>(tape: &mut Tape<T>, terms: &[Var]) -> Result<Var> {
    if terms.is_empty() {
        Ok(tape.constant(Tensor::scalar(T::zero())))
    } else {
        tape.add_all(terms)
    }
}

/// Loss graph of one sample.
pub struct SampleLoss {
    pub style: [Var; STAGES],
    pub content: [Var; STAGES],
    pub total: [Var; STAGES],
    pub bce: Vec<Var>,
    pub all: Var,
}

impl SampleLoss {
    pub fn report<T: Scalar>(&self, tape: &Tape<T>) -> LossReport {
        let v = |x: Var| tape.value(x).item().to_f64_lossy();
        let mut r = LossReport {
            all: v(self.all),
            ..LossReport::default()
        };
        for k in 0..STAGES {
            r.style[k] = v(self.style[k]);
            r.content[k] = v(self.content[k]);
            r.total[k] = v(self.total[k]);
        }
        for (k, &b) in self.bce.iter().enumerate() {
            r.bce[k] = v(b);
        }
        r
    }
}

/// Build the joint objective for a forward graph: stage images, their
/// style and content losses, and BCE on the exit scores when `labels` are
/// given and the exit head is enabled.
pub fn sample_objective<T: Scalar>(
    tape: &mut Tape<T>,
    fw: &mut Forward<'_, T>,
    labels: Option<[f64; SCORED_STAGES]>,
) -> Result<SampleLoss> {
    let cfg = fw.model.config.clone();
    let images = fw.run_all(tape)?;
    let targets = fw.harmonized.clone();
    let masks = fw.masks.clone();
    let content_target = fw.encoded[STAGES - 1];
    let zero = tape.constant(Tensor::scalar(T::zero()));
    let mut style = [zero; STAGES];
    let mut content = [zero; STAGES];
    let mut total = [zero; STAGES];
    for k in 1..=STAGES {
        let feats = fw.encoder.encode_all(tape, images[k - 1])?;
        style[k - 1] = style_from_features(tape, &feats, &targets, &masks, k, &cfg, &mut fw.warnings)?;
        content[k - 1] = content_from_features(tape, feats[STAGES - 1], content_target, &cfg)?;
        total[k - 1] = tape.add(content[k - 1], style[k - 1])?;
    }
    let mut bce = Vec::new();
    if let Some(y) = labels {
        for (k, &score) in fw.scores.iter().enumerate() {
            bce.push(tape.bce(score, y[k])?);
        }
    }
    let first = if cfg.last_stage_loss_only { STAGES - 1 } else { 0 };
    let mut parts: Vec<Var> = total[first..].to_vec();
    parts.extend_from_slice(&bce);
    let all = tape.add_all(&parts)?;
    Ok(SampleLoss {
        style,
        content,
        total,
        bce,
        all,
    })
}

/// Exit-head-only objective: `sum_k BCE(y~_k, y_k)` over the scored stages.
pub fn exit_objective<T: Scalar>(tape: &mut Tape<T>, scores: &[Var], labels: [f64; SCORED_STAGES]) -> Result<Var> {
    let mut terms = Vec::with_capacity(scores.len());
    for (k, &p) in scores.iter().enumerate() {
        terms.push(tape.bce(p, labels[k])?);
    }
    sum_or_zero(tape, &terms)
}
