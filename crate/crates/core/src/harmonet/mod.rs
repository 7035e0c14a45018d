//! The dual-branch progressive harmonization network with its GRU exit head.
//!
//! Top branch: the frozen encoder with AdaIN applied at each stage. Bottom
//! branch: per-stage upsample decoders bring the harmonized features to full
//! resolution (`base_width / 4` channels each), fusion blocks merge them with
//! the previous stage, and a 3x3 conv emits each stage's image. A GRU over the
//! pooled bottom features scores stages 1-3 for early exit.

mod network;
mod persist;

use serde::{Deserialize, Serialize};

use crate::adain::StatsMode;
use crate::encoder::{EncoderWeights, InputNorm, DEFAULT_ENCODER_SEED};
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Scalar, Tensor};

pub use network::{
    decoder_forward, fusion_forward, gru_cell, gru_step, output_conv, Forward, GruParams, GruVars, ParamVars, Trainable,
};
pub use persist::{load_model, load_model_expecting, save_model, sidecar_path, CONFIG_ENTRY};

pub const STAGES: usize = 4;
pub const SCORED_STAGES: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HarmonizerConfig {
    pub base_width: usize,
    pub image_size: usize,
    pub gru_hidden: usize,
    pub exit_threshold: f32,
    pub adain_eps: f32,
    /// Every stage's style loss sums over all four encoder levels.
    pub full_style_loss_all_stages: bool,
    /// Ablation V1: only stage 4's harmonization loss enters the objective.
    pub last_stage_loss_only: bool,
    /// Ablation V2: bilinear upsampling inside the decoders.
    pub bilinear_decoder: bool,
    /// Ablation V3: one fusion block per stage instead of two.
    pub single_fusion_block: bool,
    pub stats_mode: StatsMode,
    /// Divide squared-norm loss terms by the channel count.
    pub normalize_by_channels: bool,
    /// Treat style targets as constants.
    pub stop_target_gradients: bool,
    /// Stop gradients from the exit head into the bottom-branch features.
    pub detach_exit_features: bool,
    pub exit_head: bool,
    pub input_norm: Option<InputNorm>,
}

impl Default for HarmonizerConfig {
    fn default() -> Self {
        Self {
            base_width: 64,
            image_size: 256,
            gru_hidden: 32,
            exit_threshold: 0.5,
            adain_eps: 1e-5,
            full_style_loss_all_stages: false,
            last_stage_loss_only: false,
            bilinear_decoder: false,
            single_fusion_block: false,
            stats_mode: StatsMode::Masked,
            normalize_by_channels: false,
            stop_target_gradients: true,
            detach_exit_features: false,
            exit_head: true,
            input_norm: None,
        }
    }
}

impl HarmonizerConfig {
    pub fn desk(base_width: usize, image_size: usize) -> Self {
        Self {
            base_width,
            image_size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_size == 0 || !self.image_size.is_multiple_of(8) {
            return bad(format!(
                "image_size {} must be a positive multiple of 8",
                self.image_size
            ));
        }
        if self.base_width < 4 || !self.base_width.is_multiple_of(4) {
            return bad(format!(
                "base_width {} must be a positive multiple of 4",
                self.base_width
            ));
        }
        if !(self.exit_threshold > 0.0 && self.exit_threshold < 1.0) {
            return bad(format!("exit_threshold {} must lie in (0, 1)", self.exit_threshold));
        }
        if self.gru_hidden == 0 {
            return bad("gru_hidden must be >= 1".into());
        }
        if !(self.adain_eps >= 0.0 && self.adain_eps.is_finite()) {
            return bad(format!("adain_eps {} must be finite and >= 0", self.adain_eps));
        }
        Ok(())
    }

    /// Channel count of every decoder output and bottom-branch feature map.
    pub fn bottom_channels(&self) -> usize {
        self.base_width / 4
    }

    pub fn fusion_blocks(&self) -> usize {
        if self.single_fusion_block {
            1
        } else {
            2
        }
    }

    /// Expected shape of every trainable parameter, in name order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut v = Vec::new();
        let bw = self.base_width;
        let cb = self.bottom_channels();
        for k in 1..=STAGES {
            let ck = bw << (k - 1);
            v.push((format!("dec.s{k}.conv.w"), vec![ck / 2, ck, 3, 3]));
            v.push((format!("dec.s{k}.conv.b"), vec![ck / 2]));
            for j in 1..=k {
                let (ci, co) = (ck >> j, ck >> (j + 1));
                v.push((format!("dec.s{k}.up{j}.w"), vec![co, ci, 3, 3]));
                v.push((format!("dec.s{k}.up{j}.b"), vec![co]));
            }
            if k > 1 {
                for j in 1..=self.fusion_blocks() {
                    for i in 1..=2 {
                        let ci = if j == 1 && i == 1 { 2 * cb } else { cb };
                        v.push((format!("fus.s{k}.b{j}.c{i}.w"), vec![cb, ci, 3, 3]));
                        v.push((format!("fus.s{k}.b{j}.c{i}.b"), vec![cb]));
                    }
                }
            }
            v.push((format!("out.s{k}.w"), vec![3, cb, 3, 3]));
            v.push((format!("out.s{k}.b"), vec![3]));
        }
        let (h, i) = (self.gru_hidden, cb);
        for g in ["z", "r", "h"] {
            v.push((format!("gru.w_{g}"), vec![h, i]));
            v.push((format!("gru.u_{g}"), vec![h, h]));
            v.push((format!("gru.b_{g}"), vec![h]));
        }
        v.push(("head.w".into(), vec![1, h]));
        v.push(("head.b".into(), vec![1]));
        v.sort();
        v
    }
}

/// Parameters updated by the exit-head-only training phase.
pub fn is_exit_head_param(name: &str) -> bool {
    name.starts_with("gru.") || name.starts_with("head.")
}

/// Encoder weights plus every trainable parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Harmonizer<T: Scalar = f32> {
    pub config: HarmonizerConfig,
    pub encoder: EncoderWeights<T>,
    pub params: ParamStore<T>,
}

impl Harmonizer<f32> {
    /// Deterministically initialized model: the default random encoder and
    /// He-normal decoder/fusion/output convs drawn from `seed`.
    pub fn new(config: HarmonizerConfig, seed: u64) -> Result<Self> {
        let mut encoder = EncoderWeights::random(config.base_width, DEFAULT_ENCODER_SEED);
        encoder.input_norm = config.input_norm;
        Self::with_encoder(config, encoder, seed)
    }

    pub fn with_encoder(config: HarmonizerConfig, mut encoder: EncoderWeights, seed: u64) -> Result<Self> {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};

        config.validate()?;
        if encoder.base_width != config.base_width {
            return Err(Error::Config(format!(
                "encoder base_width {} does not match config base_width {}",
                encoder.base_width, config.base_width
            )));
        }
        encoder.input_norm = config.input_norm;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape) in config.param_shapes() {
            let is_bias = name.ends_with(".b") || name.starts_with("gru.b_") || name == "head.b";
            let t = if is_bias {
                Tensor::zeros(shape)
            } else {
                let std = if shape.len() == 4 {
                    (2.0 / (shape[1] * shape[2] * shape[3]) as f64).sqrt()
                } else {
                    1.0 / (shape[1] as f64).sqrt()
                };
                let dist = Normal::new(0.0, std).unwrap();
                Tensor::from_fn(shape, |_| dist.sample(&mut rng) as f32)
            };
            params.insert(name, t);
        }
        Ok(Self {
            config,
            encoder,
            params,
        })
    }
}

impl<T: Scalar> Harmonizer<T> {
    pub fn cast<U: Scalar>(&self) -> Harmonizer<U> {
        Harmonizer {
            config: self.config.clone(),
            encoder: self.encoder.cast(),
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }
}

/// Earliest stage whose score is strictly above `threshold`, else stage 4.
pub fn decide_exit(scores: &[f32], threshold: f32) -> usize {
    scores
        .iter()
        .take(SCORED_STAGES)
        .position(|&s| s > threshold)
        .map_or(STAGES, |i| i + 1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageOutput {
    pub stage: usize,
    pub image: Tensor,
    pub exit_score: Option<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HarmonizeResult {
    /// Computed stage images, in stage order.
    pub stage_outputs: Vec<StageOutput>,
    /// Exit scores for every scored stage that was evaluated.
    pub exit_scores: Vec<f32>,
    pub predicted_exit: usize,
    pub forced: bool,
    pub warnings: Vec<String>,
}

impl HarmonizeResult {
    pub fn output(&self, stage: usize) -> Option<&StageOutput> {
        self.stage_outputs.iter().find(|o| o.stage == stage)
    }
}

/// Which stage images to compute during inference.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InferMode {
    /// Stop at the first stage scoring above the threshold; only that
    /// stage's image is produced.
    EarlyExit { threshold: f32 },
    /// All four stages and images; the exit is still predicted.
    AllStages { threshold: f32 },
    /// Run exactly through stage `k` and emit its image.
    Force(usize),
}
