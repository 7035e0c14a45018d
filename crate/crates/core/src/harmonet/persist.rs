//! Model files: a PTW file holding a `meta.config` header entry, the encoder
//! (`enc.s{k}.conv{i}.{w,b}`) and every trainable parameter under its own
//! name, plus a JSON copy of the config alongside (`<path>.json`).
//!
//! `meta.config` values: format version, base_width, image_size,
//! gru_hidden, flag bits, exit_threshold, adain_eps, has_input_norm, three
//! input means, three input stds.

use std::fs;
use std::path::{Path, PathBuf};

use super::{Harmonizer, HarmonizerConfig};
use crate::adain::StatsMode;
use crate::encoder::{EncoderWeights, InputNorm};
use crate::error::{Error, Result};
use crate::tensor::ptw::PtwFile;
use crate::tensor::{ParamStore, Tensor};

pub const CONFIG_ENTRY: &str = "meta.config";
const FORMAT_VERSION: f32 = 1.0;
const META_LEN: usize = 14;

fn flag_bits(c: &HarmonizerConfig) -> u32 {
    [
        c.full_style_loss_all_stages,
        c.last_stage_loss_only,
        c.bilinear_decoder,
        c.single_fusion_block,
        c.stats_mode == StatsMode::ZeroFilled,
        c.normalize_by_channels,
        !c.stop_target_gradients,
        c.detach_exit_features,
        !c.exit_head,
    ]
    .iter()
    .enumerate()
    .fold(0, |acc, (i, &b)| acc | (u32::from(b) << i))
}

fn encode_meta(c: &HarmonizerConfig) -> Tensor {
    let norm = c.input_norm.unwrap_or(InputNorm {
        mean: [0.0; 3],
        std: [1.0; 3],
    });
    let mut v = vec![
        FORMAT_VERSION,
        c.base_width as f32,
        c.image_size as f32,
        c.gru_hidden as f32,
        flag_bits(c) as f32,
        c.exit_threshold,
        c.adain_eps,
        if c.input_norm.is_some() { 1.0 } else { 0.0 },
    ];
    v.extend_from_slice(&norm.mean);
    v.extend_from_slice(&norm.std);
    Tensor::new(vec![META_LEN], v).expect("meta length")
}

fn decode_meta(t: &Tensor) -> Result<HarmonizerConfig> {
    if t.shape() != [META_LEN] {
        return Err(Error::EntryShape {
            name: CONFIG_ENTRY.into(),
            expected: vec![META_LEN],
            found: t.shape().to_vec(),
        });
    }
    let v = t.data();
    if v[0] != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported model format version {}", v[0])));
    }
    let int = |x: f32, what: &str| -> Result<usize> {
        if x >= 0.0 && x.fract() == 0.0 {
            Ok(x as usize)
        } else {
            Err(Error::Format(format!("{what} {x} is not a non-negative integer")))
        }
    };
    let bits = int(v[4], "flag bits")? as u32;
    let bit = |i: u32| bits & (1 << i) != 0;
    let cfg = HarmonizerConfig {
        base_width: int(v[1], "base_width")?,
        image_size: int(v[2], "image_size")?,
        gru_hidden: int(v[3], "gru_hidden")?,
        exit_threshold: v[5],
        adain_eps: v[6],
        full_style_loss_all_stages: bit(0),
        last_stage_loss_only: bit(1),
        bilinear_decoder: bit(2),
        single_fusion_block: bit(3),
        stats_mode: if bit(4) {
            StatsMode::ZeroFilled
        } else {
            StatsMode::Masked
        },
        normalize_by_channels: bit(5),
        stop_target_gradients: !bit(6),
        detach_exit_features: bit(7),
        exit_head: !bit(8),
        input_norm: (v[7] != 0.0).then(|| InputNorm {
            mean: [v[8], v[9], v[10]],
            std: [v[11], v[12], v[13]],
        }),
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

impl Harmonizer<f32> {
    pub fn to_ptw(&self) -> PtwFile {
        let mut f = PtwFile::new();
        f.push(CONFIG_ENTRY, encode_meta(&self.config));
        self.encoder.to_ptw(&mut f);
        for (name, t) in &self.params {
            f.push(name.clone(), t.detached());
        }
        f
    }

    pub fn from_ptw(file: &PtwFile) -> Result<Self> {
        let config = decode_meta(file.get(CONFIG_ENTRY)?)?;
        let mut encoder = EncoderWeights::from_ptw_expecting(file, config.base_width)?;
        encoder.input_norm = config.input_norm;
        let mut params = ParamStore::new();
        for (name, shape) in config.param_shapes() {
            params.insert(name.clone(), file.expect(&name, &shape)?.detached());
        }
        Ok(Self {
            config,
            encoder,
            params,
        })
    }
}

/// Write the model PTW file and its JSON config sidecar.
pub fn save_model(model: &Harmonizer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    model.to_ptw().save(path)?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(&model.config)?;
    fs::write(&side, json).map_err(|e| Error::io(side, e))
}

/// Load a model; the embedded config header is authoritative and the
/// sidecar, when present, must agree with it.
pub fn load_model(path: impl AsRef<Path>) -> Result<Harmonizer> {
    let path = path.as_ref();
    let model = Harmonizer::from_ptw(&PtwFile::load(path)?)?;
    let side = sidecar_path(path);
    if side.exists() {
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let cfg: HarmonizerConfig = serde_json::from_str(&text)?;
        if cfg != model.config {
            return Err(Error::Config(format!(
                "{} disagrees with the config stored in {}",
                side.display(),
                path.display()
            )));
        }
    }
    Ok(model)
}

/// Load a model and require it to match `expected`'s architecture.
pub fn load_model_expecting(path: impl AsRef<Path>, expected: &HarmonizerConfig) -> Result<Harmonizer> {
    let model = load_model(path)?;
    let c = &model.config;
    let mismatch = |what: &str, a: usize, b: usize| Err(Error::Config(format!("model {what} is {a}, expected {b}")));
    if c.base_width != expected.base_width {
        return mismatch("base_width", c.base_width, expected.base_width);
    }
    if c.image_size != expected.image_size {
        return mismatch("image_size", c.image_size, expected.image_size);
    }
    if c.gru_hidden != expected.gru_hidden {
        return mismatch("gru_hidden", c.gru_hidden, expected.gru_hidden);
    }
    if c.single_fusion_block != expected.single_fusion_block {
        return Err(Error::Config(
            "model fusion block count differs from the expected config".into(),
        ));
    }
    Ok(model)
}
