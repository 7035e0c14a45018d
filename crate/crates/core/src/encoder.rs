//! Frozen four-stage VGG-19 style feature extractor, cut at relu1_1,
//! relu2_1, relu3_1 and relu4_1.
//!
//! Weight entries are named `enc.s{k}.conv{i}.w` / `.b` with `k` the stage
//! (1..=4) and `i` the conv index inside the stage (1-based):
//!
//! | stage | convs (VGG-19 names)                 |
//! |-------|--------------------------------------|
//! | 1     | conv1_1                              |
//! | 2     | conv1_2, *pool*, conv2_1             |
//! | 3     | conv2_2, *pool*, conv3_1             |
//! | 4     | conv3_2, conv3_3, conv3_4, *pool*, conv4_1 |

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::ptw::PtwFile;
use crate::tensor::{Scalar, Tape, Tensor, Var};

pub const STAGES: usize = 4;
/// Seed used for the deterministic random encoder when no weights are given.
pub const DEFAULT_ENCODER_SEED: u64 = 0x5647_4731_3900_0001;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    /// 2x2 max pooling is applied to this conv's input.
    pub pool_before: bool,
    pub vgg_name: &'static str,
}

/// Per-stage conv plan for a given stage-1 width.
pub fn layer_plan(base_width: usize) -> Vec<Vec<ConvSpec>> {
    let c = |k: u32| base_width << k;
    let conv = |c_in, c_out, pool_before, vgg_name| ConvSpec {
        c_in,
        c_out,
        pool_before,
        vgg_name,
    };
    vec![
        vec![conv(3, c(0), false, "conv1_1")],
        vec![conv(c(0), c(0), false, "conv1_2"), conv(c(0), c(1), true, "conv2_1")],
        vec![conv(c(1), c(1), false, "conv2_2"), conv(c(1), c(2), true, "conv3_1")],
        vec![
            conv(c(2), c(2), false, "conv3_2"),
            conv(c(2), c(2), false, "conv3_3"),
            conv(c(2), c(2), false, "conv3_4"),
            conv(c(2), c(3), true, "conv4_1"),
        ],
    ]
}

/// Channel count of stage `k` (1-based).
pub fn stage_channels(base_width: usize, k: usize) -> usize {
    base_width << (k - 1)
}

pub fn weight_name(stage: usize, conv: usize) -> String {
    format!("enc.s{stage}.conv{conv}.w")
}

pub fn bias_name(stage: usize, conv: usize) -> String {
    format!("enc.s{stage}.conv{conv}.b")
}

/// Optional per-channel input normalization `(x - mean) / std`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights<T: Scalar = f32> {
    pub base_width: usize,
    /// `(weight, bias)` per conv, grouped by stage.
    pub stages: Vec<Vec<(Tensor<T>, Tensor<T>)>>,
    pub input_norm: Option<InputNorm>,
}

impl<T: Scalar> EncoderWeights<T> {
    /// Always true: encoder weights never receive gradient updates.
    pub fn frozen(&self) -> bool {
        true
    }

    pub fn cast<U: Scalar>(&self) -> EncoderWeights<U> {
        EncoderWeights {
            base_width: self.base_width,
            stages: self
                .stages
                .iter()
                .map(|s| s.iter().map(|(w, b)| (w.cast(), b.cast())).collect())
                .collect(),
            input_norm: self.input_norm,
        }
    }

    pub fn zeros(base_width: usize) -> Self {
        Self {
            base_width,
            stages: layer_plan(base_width)
                .iter()
                .map(|s| {
                    s.iter()
                        .map(|c| (Tensor::zeros(vec![c.c_out, c.c_in, 3, 3]), Tensor::zeros(vec![c.c_out])))
                        .collect()
                })
                .collect(),
            input_norm: None,
        }
    }

    /// He-normal (fan-in) weights, zero biases, from a fixed seed.
    pub fn random(base_width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = Self::zeros(base_width);
        for stage in &mut w.stages {
            for (wt, _) in stage.iter_mut() {
                let fan_in = wt.shape()[1] * 9;
                let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
                for v in wt.data_mut() {
                    *v = T::from_f64_lossy(dist.sample(&mut rng));
                }
            }
        }
        w
    }
}

impl EncoderWeights<f32> {
    pub fn to_ptw(&self, file: &mut PtwFile) {
        for (k, stage) in self.stages.iter().enumerate() {
            for (i, (w, b)) in stage.iter().enumerate() {
                file.push(weight_name(k + 1, i + 1), w.detached());
                file.push(bias_name(k + 1, i + 1), b.detached());
            }
        }
    }

    /// Read the encoder section of a PTW file, inferring `base_width` from
    /// the first conv.
    pub fn from_ptw(file: &PtwFile) -> Result<Self> {
        let first = file.get(&weight_name(1, 1))?;
        let base_width = first.shape().first().copied().unwrap_or(0);
        if base_width == 0 {
            return Err(Error::EntryShape {
                name: weight_name(1, 1),
                expected: vec![0, 3, 3, 3],
                found: first.shape().to_vec(),
            });
        }
        Self::from_ptw_expecting(file, base_width)
    }

    pub fn from_ptw_expecting(file: &PtwFile, base_width: usize) -> Result<Self> {
        let mut stages = Vec::with_capacity(STAGES);
        for (k, plan) in layer_plan(base_width).iter().enumerate() {
            let mut convs = Vec::with_capacity(plan.len());
            for (i, spec) in plan.iter().enumerate() {
                let w = file.expect(&weight_name(k + 1, i + 1), &[spec.c_out, spec.c_in, 3, 3])?;
                let b = file.expect(&bias_name(k + 1, i + 1), &[spec.c_out])?;
                convs.push((w.detached(), b.detached()));
            }
            stages.push(convs);
        }
        Ok(Self {
            base_width,
            stages,
            input_norm: None,
        })
    }
}

pub fn save_weights(weights: &EncoderWeights, path: impl AsRef<Path>) -> Result<()> {
    let mut f = PtwFile::new();
    weights.to_ptw(&mut f);
    f.save(path)
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<EncoderWeights> {
    EncoderWeights::from_ptw(&PtwFile::load(path)?)
}

/// Encoder weights pushed onto a tape as constants.
pub struct EncoderVars {
    stages: Vec<Vec<(Var, Var)>>,
    norm: Option<(Var, Var)>,
}

impl EncoderVars {
    pub fn new<T: Scalar>(tape: &mut Tape<T>, weights: &EncoderWeights<T>) -> Self {
        let stages = weights
            .stages
            .iter()
            .map(|s| {
                s.iter()
                    .map(|(w, b)| (tape.constant(w.clone()), tape.constant(b.clone())))
                    .collect()
            })
            .collect();
        // Per-channel normalization as a diagonal 1x1 conv.
        let norm = weights.input_norm.map(|n| {
            let mut w = Tensor::<T>::zeros(vec![3, 3, 1, 1]);
            let mut b = Tensor::<T>::zeros(vec![3]);
            for c in 0..3 {
                w.data_mut()[c * 3 + c] = T::from_f64_lossy(1.0 / n.std[c] as f64);
                b.data_mut()[c] = T::from_f64_lossy(-(n.mean[c] as f64) / n.std[c] as f64);
            }
            (tape.constant(w), tape.constant(b))
        });
        Self { stages, norm }
    }

    /// Apply input normalization (if any) to an image node.
    pub fn prepare<T: Scalar>(&self, tape: &mut Tape<T>, image: Var) -> Result<Var> {
        match self.norm {
            Some((w, b)) => tape.conv2d(image, w, Some(b), 1, 0),
            None => Ok(image),
        }
    }

    /// Run stage `k` (1-based) on the previous stage output (or the prepared
    /// image for `k = 1`).
    pub fn stage<T: Scalar>(&self, tape: &mut Tape<T>, k: usize, input: Var) -> Result<Var> {
        let plan = layer_plan(1);
        let mut x = input;
        for (spec, &(w, b)) in plan[k - 1].iter().zip(&self.stages[k - 1]) {
            if spec.pool_before {
                x = tape.maxpool2x2(x)?;
            }
            let y = tape.conv2d(x, w, Some(b), 1, 1)?;
            x = tape.relu(y);
        }
        Ok(x)
    }

    /// All four stage outputs for an image node.
    pub fn encode_all<T: Scalar>(&self, tape: &mut Tape<T>, image: Var) -> Result<[Var; STAGES]> {
        let x0 = self.prepare(tape, image)?;
        let f1 = self.stage(tape, 1, x0)?;
        let f2 = self.stage(tape, 2, f1)?;
        let f3 = self.stage(tape, 3, f2)?;
        let f4 = self.stage(tape, 4, f3)?;
        Ok([f1, f2, f3, f4])
    }
}

/// Encoder outputs `F^t_k` and the foreground mask at each stage resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct StageFeatures<T: Scalar = f32> {
    pub features: Vec<Tensor<T>>,
    pub masks: Vec<Tensor<T>>,
}

/// Nearest-neighbor downsampling of a `[1,1,H,W]` mask by `factor`
/// (top-left sample of each block).
pub fn downsample_mask<T: Scalar>(mask: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = mask.dims4()?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return shape_err(format!("mask {h}x{w} not divisible by {factor}"));
    }
    let (ho, wo) = (h / factor, w / factor);
    let d = mask.data();
    Tensor::new(
        vec![n, c, ho, wo],
        (0..n * c * ho * wo)
            .map(|i| {
                let (p, y, x) = (i / (ho * wo), (i / wo) % ho, i % wo);
                d[p * h * w + y * factor * w + x * factor]
            })
            .collect(),
    )
}

/// Masks at the four stage resolutions (factor `2^(k-1)`).
pub fn stage_masks<T: Scalar>(mask: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    (0..STAGES).map(|k| downsample_mask(mask, 1 << k)).collect()
}

pub(crate) fn check_image_mask<T: Scalar>(image: &Tensor<T>, mask: &Tensor<T>) -> Result<(usize, usize)> {
    let (n, c, h, w) = image.dims4()?;
    if n != 1 || c != 3 {
        return shape_err(format!("image must be [1,3,H,W], got {:?}", image.shape()));
    }
    if h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
        return Err(Error::InvalidArgument(format!(
            "image extent {h}x{w} must be a positive multiple of 8"
        )));
    }
    if mask.shape() != [1, 1, h, w] {
        return shape_err(format!("mask {:?} must be [1,1,{h},{w}]", mask.shape()));
    }
    if !mask.is_binary() {
        return Err(Error::InvalidArgument("mask must be binary".into()));
    }
    Ok((h, w))
}

/// Encode an image through all four stages.
pub fn encode<T: Scalar>(image: &Tensor<T>, mask: &Tensor<T>, weights: &EncoderWeights<T>) -> Result<StageFeatures<T>> {
    check_image_mask(image, mask)?;
    let mut tape = Tape::new();
    let vars = EncoderVars::new(&mut tape, weights);
    let x = tape.constant(image.clone());
    let f = vars.encode_all(&mut tape, x)?;
    Ok(StageFeatures {
        features: f.iter().map(|&v| tape.value(v).detached()).collect(),
        masks: stage_masks(mask)?,
    })
}
