use std::collections::BTreeMap;

use super::{
    decide_exit, is_exit_head_param, HarmonizeResult, Harmonizer, HarmonizerConfig, InferMode, StageOutput,
    SCORED_STAGES, STAGES,
};
use crate::adain::empty_fg_warning;
use crate::encoder::{check_image_mask, stage_masks, EncoderVars};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{ParamStore, Scalar, Tape, Tensor, Var};

/// Which parameters receive gradients on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    None,
    All,
    ExitHeadOnly,
}

impl Trainable {
    fn includes(self, name: &str) -> bool {
        match self {
            Trainable::None => false,
            Trainable::All => true,
            Trainable::ExitHeadOnly => is_exit_head_param(name),
        }
    }
}

/// Lazily pushes named parameters onto a tape, once each.
pub struct ParamVars<'a, T: Scalar> {
    store: &'a ParamStore<T>,
    trainable: Trainable,
    vars: BTreeMap<String, Var>,
}

impl<'a, T: Scalar> ParamVars<'a, T> {
    pub fn new(store: &'a ParamStore<T>, trainable: Trainable) -> Self {
        Self {
            store,
            trainable,
            vars: BTreeMap::new(),
        }
    }

    pub fn get(&mut self, tape: &mut Tape<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let t = self
            .store
            .get(name)
            .ok_or_else(|| Error::MissingEntry(name.to_string()))?
            .clone();
        let v = if self.trainable.includes(name) {
            tape.param(t)
        } else {
            tape.constant(t)
        };
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameters pushed so far.
    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    /// Gradients of every trainable parameter that was used, by name.
    pub fn grads(&self, tape: &Tape<T>) -> BTreeMap<String, Vec<T>> {
        self.vars
            .iter()
            .filter(|(n, _)| self.trainable.includes(n))
            .map(|(n, &v)| {
                let g = tape
                    .grad(v)
                    .map(<[T]>::to_vec)
                    .unwrap_or_else(|| vec![T::zero(); tape.value(v).len()]);
                (n.clone(), g)
            })
            .collect()
    }
}

fn conv_relu<T: Scalar>(tape: &mut Tape<T>, pv: &mut ParamVars<T>, x: Var, prefix: &str) -> Result<Var> {
    let w = pv.get(tape, &format!("{prefix}.w"))?;
    let b = pv.get(tape, &format!("{prefix}.b"))?;
    let y = tape.conv2d(x, w, Some(b), 1, 1)?;
    Ok(tape.relu(y))
}

/// Stage-`k` upsample decoder: a conv block then `k` upsample blocks, each
/// halving the channel count. The first upsample block keeps the
/// resolution (scale 1) and the remaining `k - 1` double it, so the output
/// lands at full resolution with `base_width / 4` channels.
pub fn decoder_forward<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &mut ParamVars<T>,
    cfg: &HarmonizerConfig,
    k: usize,
    x: Var,
) -> Result<Var> {
    let ck = cfg.base_width << (k - 1);
    let (_, c, h, _) = tape.value(x).dims4()?;
    if c != ck || h << (k - 1) != cfg.image_size {
        return shape_err(format!(
            "decoder {k}: expected {ck} channels at {}px, got {:?}",
            cfg.image_size >> (k - 1),
            tape.shape(x)
        ));
    }
    let mut y = conv_relu(tape, pv, x, &format!("dec.s{k}.conv"))?;
    for j in 1..=k {
        let scale = if j == 1 { 1 } else { 2 };
        let u = if cfg.bilinear_decoder {
            tape.upsample_bilinear(y, scale)?
        } else {
            tape.upsample_nearest(y, scale)?
        };
        y = conv_relu(tape, pv, u, &format!("dec.s{k}.up{j}"))?;
    }
    Ok(y)
}

/// Fusion blocks of stage `k >= 2` over `concat(F^b_{k-1}, F~^t_k)`. Each
/// block is conv-ReLU-conv-ReLU; the first conv halves the channel count.
pub fn fusion_forward<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &mut ParamVars<T>,
    cfg: &HarmonizerConfig,
    k: usize,
    x: Var,
) -> Result<Var> {
    if k < 2 {
        return Err(Error::InvalidArgument("fusion exists only for stages 2-4".into()));
    }
    let cb = cfg.bottom_channels();
    if tape.shape(x)[1] != 2 * cb {
        return shape_err(format!(
            "fusion {k}: expected {} input channels, got {:?}",
            2 * cb,
            tape.shape(x)
        ));
    }
    let mut y = x;
    for j in 1..=cfg.fusion_blocks() {
        for i in 1..=2 {
            y = conv_relu(tape, pv, y, &format!("fus.s{k}.b{j}.c{i}"))?;
        }
    }
    Ok(y)
}

/// 3x3 conv to the 3-channel stage image (no activation).
pub fn output_conv<T: Scalar>(tape: &mut Tape<T>, pv: &mut ParamVars<T>, k: usize, x: Var) -> Result<Var> {
    let w = pv.get(tape, &format!("out.s{k}.w"))?;
    let b = pv.get(tape, &format!("out.s{k}.b"))?;
    tape.conv2d(x, w, Some(b), 1, 1)
}

/// Tape handles for the GRU cell and its scoring head.
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w: [Var; 3],
    pub u: [Var; 3],
    pub b: [Var; 3],
    pub head_w: Var,
    pub head_b: Var,
}

impl GruVars {
    pub fn from_params<T: Scalar>(tape: &mut Tape<T>, pv: &mut ParamVars<T>) -> Result<Self> {
        let mut get = |n: String| pv.get(tape, &n);
        let w = [get("gru.w_z".into())?, get("gru.w_r".into())?, get("gru.w_h".into())?];
        let u = [get("gru.u_z".into())?, get("gru.u_r".into())?, get("gru.u_h".into())?];
        let b = [get("gru.b_z".into())?, get("gru.b_r".into())?, get("gru.b_h".into())?];
        Ok(Self {
            w,
            u,
            b,
            head_w: get("head.w".into())?,
            head_b: get("head.b".into())?,
        })
    }
}

/// One GRU step plus exit score:
/// `z = sig(W_z x + b_z + U_z h)`, `r = sig(W_r x + b_r + U_r h)`,
/// `c = tanh(W_h x + b_h + U_h (r*h))`, `h' = (1-z)*h + z*c`,
/// `y = sig(w . h' + b)`. `x` and `h` are `[1, I]` and `[1, H]`.
pub fn gru_cell<T: Scalar>(tape: &mut Tape<T>, g: &GruVars, h: Var, x: Var) -> Result<(Var, Var)> {
    let gate = |tape: &mut Tape<T>, i: usize, hin: Var| -> Result<Var> {
        let a = tape.linear(x, g.w[i], Some(g.b[i]))?;
        let b = tape.linear(hin, g.u[i], None)?;
        tape.add(a, b)
    };
    let zp = gate(tape, 0, h)?;
    let z = tape.sigmoid(zp);
    let rp = gate(tape, 1, h)?;
    let r = tape.sigmoid(rp);
    let rh = tape.mul(r, h)?;
    let cp = gate(tape, 2, rh)?;
    let cand = tape.tanh(cp);
    let keep = tape.affine(z, -1.0, 1.0);
    let a = tape.mul(keep, h)?;
    let b = tape.mul(z, cand)?;
    let h_next = tape.add(a, b)?;
    let logit = tape.linear(h_next, g.head_w, Some(g.head_b))?;
    let y = tape.sigmoid(logit);
    Ok((y, h_next))
}

/// GRU cell and head parameters as plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct GruParams<T: Scalar = f32> {
    pub w: [Tensor<T>; 3],
    pub u: [Tensor<T>; 3],
    pub b: [Tensor<T>; 3],
    pub head_w: Tensor<T>,
    pub head_b: Tensor<T>,
}

impl<T: Scalar> GruParams<T> {
    pub fn from_store(store: &ParamStore<T>) -> Result<Self> {
        let get = |n: String| store.get(&n).cloned().ok_or(Error::MissingEntry(n));
        let tri = |p: &str| -> Result<[Tensor<T>; 3]> {
            Ok([
                get(format!("gru.{p}_z"))?,
                get(format!("gru.{p}_r"))?,
                get(format!("gru.{p}_h"))?,
            ])
        };
        Ok(Self {
            w: tri("w")?,
            u: tri("u")?,
            b: tri("b")?,
            head_w: get("head.w".into())?,
            head_b: get("head.b".into())?,
        })
    }

    pub fn hidden(&self) -> usize {
        self.u[0].shape()[0]
    }

    pub fn input(&self) -> usize {
        self.w[0].shape()[1]
    }
}

/// Evaluate one GRU step on plain vectors: returns `(exit_score, h_next)`.
pub fn gru_step<T: Scalar>(h_prev: &[T], x: &[T], params: &GruParams<T>) -> Result<(T, Vec<T>)> {
    if h_prev.len() != params.hidden() || x.len() != params.input() {
        return shape_err(format!(
            "gru_step: h has {} values (want {}), x has {} (want {})",
            h_prev.len(),
            params.hidden(),
            x.len(),
            params.input()
        ));
    }
    let mut tape = Tape::new();
    let c = |tape: &mut Tape<T>, t: &Tensor<T>| tape.constant(t.clone());
    let g = GruVars {
        w: [
            c(&mut tape, &params.w[0]),
            c(&mut tape, &params.w[1]),
            c(&mut tape, &params.w[2]),
        ],
        u: [
            c(&mut tape, &params.u[0]),
            c(&mut tape, &params.u[1]),
            c(&mut tape, &params.u[2]),
        ],
        b: [
            c(&mut tape, &params.b[0]),
            c(&mut tape, &params.b[1]),
            c(&mut tape, &params.b[2]),
        ],
        head_w: c(&mut tape, &params.head_w),
        head_b: c(&mut tape, &params.head_b),
    };
    let h = tape.constant(Tensor::new(vec![1, h_prev.len()], h_prev.to_vec())?);
    let xv = tape.constant(Tensor::new(vec![1, x.len()], x.to_vec())?);
    let (y, hn) = gru_cell(&mut tape, &g, h, xv)?;
    Ok((tape.value(y).item(), tape.value(hn).data().to_vec()))
}

/// Incrementally built forward graph for one composite.
pub struct Forward<'m, T: Scalar> {
    pub model: &'m Harmonizer<T>,
    pub params: ParamVars<'m, T>,
    pub encoder: EncoderVars,
    pub composite: Var,
    /// Foreground masks at each stage resolution.
    pub masks: Vec<Var>,
    /// Encoder outputs `F^t_k`.
    pub encoded: Vec<Var>,
    /// AdaIN-harmonized features `F^t_k` (hat).
    pub harmonized: Vec<Var>,
    /// Decoder outputs `F^t_k` (tilde).
    pub decoded: Vec<Var>,
    /// Bottom-branch features `F^b_k`.
    pub bottom: Vec<Var>,
    pub pooled: Vec<Var>,
    pub scores: Vec<Var>,
    pub images: [Option<Var>; STAGES],
    pub warnings: Vec<String>,
    prepared: Var,
    gru: Option<GruVars>,
    hidden: Option<Var>,
}

impl<'m, T: Scalar> Forward<'m, T> {
    pub fn new(
        tape: &mut Tape<T>,
        model: &'m Harmonizer<T>,
        composite: &Tensor<T>,
        fg_mask: &Tensor<T>,
        trainable: Trainable,
    ) -> Result<Self> {
        let cfg = &model.config;
        let (h, w) = check_image_mask(composite, fg_mask)?;
        if h != cfg.image_size || w != cfg.image_size {
            return Err(Error::InvalidArgument(format!(
                "input is {h}x{w} but the model expects {0}x{0}",
                cfg.image_size
            )));
        }
        if fg_mask.data().iter().all(|&m| m == T::one()) {
            return Err(Error::EmptyBackground { stage: 1 });
        }
        let encoder = EncoderVars::new(tape, &model.encoder);
        let composite_var = tape.constant(composite.detached());
        let prepared = encoder.prepare(tape, composite_var)?;
        let masks = stage_masks(fg_mask)?.into_iter().map(|m| tape.constant(m)).collect();
        Ok(Self {
            model,
            params: ParamVars::new(&model.params, trainable),
            encoder,
            composite: composite_var,
            masks,
            encoded: Vec::new(),
            harmonized: Vec::new(),
            decoded: Vec::new(),
            bottom: Vec::new(),
            pooled: Vec::new(),
            scores: Vec::new(),
            images: [None; STAGES],
            warnings: Vec::new(),
            prepared,
            gru: None,
            hidden: None,
        })
    }

    pub fn stages_done(&self) -> usize {
        self.bottom.len()
    }

    /// Compute the next stage's bottom features (and exit score for stages
    /// 1-3). Stage images are produced separately by [`Forward::image`].
    pub fn advance(&mut self, tape: &mut Tape<T>) -> Result<usize> {
        let k = self.stages_done() + 1;
        if k > STAGES {
            return Err(Error::InvalidArgument("all four stages already computed".into()));
        }
        let cfg = &self.model.config;
        let input = if k == 1 { self.prepared } else { self.encoded[k - 2] };
        let f = self.encoder.stage(tape, k, input)?;
        self.encoded.push(f);
        let (fh, empty) = tape
            .adain(f, self.masks[k - 1], cfg.adain_eps as f64, cfg.stats_mode)
            .map_err(|e| match e {
                Error::EmptyBackground { .. } => Error::EmptyBackground { stage: k },
                e => e,
            })?;
        if empty {
            self.warnings.push(empty_fg_warning(k));
        }
        self.harmonized.push(fh);
        let d = decoder_forward(tape, &mut self.params, cfg, k, fh)?;
        self.decoded.push(d);
        let b = if k == 1 {
            d
        } else {
            let c = tape.concat_channels(self.bottom[k - 2], d)?;
            fusion_forward(tape, &mut self.params, cfg, k, c)?
        };
        self.bottom.push(b);
        if k <= SCORED_STAGES && cfg.exit_head {
            let mut p = tape.global_avg_pool(b)?;
            if cfg.detach_exit_features {
                p = tape.detach(p);
            }
            self.pooled.push(p);
            let g = match self.gru {
                Some(g) => g,
                None => {
                    let g = GruVars::from_params(tape, &mut self.params)?;
                    self.gru = Some(g);
                    g
                }
            };
            let h = match self.hidden {
                Some(h) => h,
                None => tape.constant(Tensor::zeros(vec![1, cfg.gru_hidden])),
            };
            let (y, hn) = gru_cell(tape, &g, h, p)?;
            self.hidden = Some(hn);
            self.scores.push(y);
        }
        Ok(k)
    }

    pub fn advance_to(&mut self, tape: &mut Tape<T>, k: usize) -> Result<()> {
        while self.stages_done() < k {
            self.advance(tape)?;
        }
        Ok(())
    }

    /// Stage `k`'s image, computing it on first request.
    pub fn image(&mut self, tape: &mut Tape<T>, k: usize) -> Result<Var> {
        if let Some(v) = self.images[k - 1] {
            return Ok(v);
        }
        self.advance_to(tape, k)?;
        let v = output_conv(tape, &mut self.params, k, self.bottom[k - 1])?;
        self.images[k - 1] = Some(v);
        Ok(v)
    }

    /// All four stages and images.
    pub fn run_all(&mut self, tape: &mut Tape<T>) -> Result<[Var; STAGES]> {
        let mut out = [self.composite; STAGES];
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.image(tape, k + 1)?;
        }
        Ok(out)
    }

    pub fn score_values(&self, tape: &Tape<T>) -> Vec<T> {
        self.scores.iter().map(|&v| tape.value(v).item()).collect()
    }
}

impl Harmonizer<f32> {
    /// Full forward pass: all four stage images and exit scores.
    pub fn forward(&self, composite: &Tensor, fg_mask: &Tensor) -> Result<HarmonizeResult> {
        self.infer(
            composite,
            fg_mask,
            InferMode::AllStages {
                threshold: self.config.exit_threshold,
            },
        )
    }

    pub fn infer(&self, composite: &Tensor, fg_mask: &Tensor, mode: InferMode) -> Result<HarmonizeResult> {
        let mut tape = Tape::new();
        let mut fw = Forward::new(&mut tape, self, composite, fg_mask, Trainable::None)?;
        let (wanted, predicted, forced): (Vec<usize>, usize, bool) = match mode {
            InferMode::Force(k) => {
                if !(1..=STAGES).contains(&k) {
                    return Err(Error::InvalidArgument(format!("forced stage {k} outside 1..=4")));
                }
                fw.advance_to(&mut tape, k)?;
                (vec![k], k, true)
            }
            InferMode::AllStages { threshold } => {
                fw.advance_to(&mut tape, STAGES)?;
                let p = decide_exit(&fw.score_values(&tape), threshold);
                ((1..=STAGES).collect(), p, false)
            }
            InferMode::EarlyExit { threshold } => {
                let mut exit = STAGES;
                for k in 1..=STAGES {
                    fw.advance(&mut tape)?;
                    if let Some(&s) = fw.scores.get(k - 1) {
                        if tape.value(s).item() > threshold {
                            exit = k;
                            break;
                        }
                    }
                }
                (vec![exit], exit, false)
            }
        };
        let scores = fw.score_values(&tape);
        let mut stage_outputs = Vec::with_capacity(wanted.len());
        for k in wanted {
            let v = fw.image(&mut tape, k)?;
            stage_outputs.push(StageOutput {
                stage: k,
                image: tape.value(v).detached(),
                exit_score: scores.get(k - 1).copied(),
            });
        }
        Ok(HarmonizeResult {
            stage_outputs,
            exit_scores: scores,
            predicted_exit: predicted,
            forced,
            warnings: fw.warnings,
        })
    }
}
