//! Analytic FLOP counts per stage.
//!
//! Convention: a multiply-add is 2 FLOPs. A conv costs
//! `2 kh kw C_in C_out H' W'` plus `C_out H' W'` for the bias. Pooling,
//! upsampling, activations and element-wise products/sums cost 1 per output
//! element; global average pooling costs `C (H W + 1)` (sum then divide);
//! concatenation is free. AdaIN is excluded since its cost depends on the
//! mask split.

use serde::Serialize;

use crate::encoder::layer_plan;
use crate::error::Result;
use crate::harmonet::{HarmonizerConfig, SCORED_STAGES, STAGES};

pub const FLOP_CONVENTION: &str =
    "multiply-add = 2 FLOPs; conv = 2*kh*kw*Cin*Cout*H'*W' + Cout*H'*W'; pool/upsample/activation = 1 per output; AdaIN excluded";

pub fn conv_flops(kh: usize, kw: usize, c_in: usize, c_out: usize, h_out: usize, w_out: usize) -> u64 {
    let out = (c_out * h_out * w_out) as u64;
    2 * (kh * kw * c_in) as u64 * out + out
}

/// One GRU step with its scoring head, for input size `i` and hidden `h`.
pub fn gru_flops(i: usize, h: usize) -> u64 {
    let (i, h) = (i as u64, h as u64);
    6 * (i * h + h * h) + 16 * h + 2
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct StageBreakdown {
    pub encoder: u64,
    pub decoder: u64,
    pub fusion: u64,
    pub output_conv: u64,
    /// Pooling plus the GRU step and head.
    pub exit_head: u64,
}

impl StageBreakdown {
    /// Everything that later stages reuse (all but the output conv).
    pub fn carried(&self) -> u64 {
        self.encoder + self.decoder + self.fusion + self.exit_head
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlopsReport {
    pub convention: &'static str,
    pub stages: [StageBreakdown; STAGES],
    /// Cost of running up to and emitting stage `k`'s image.
    pub cumulative: [u64; STAGES],
    /// `cumulative[k] - cumulative[k-1]`.
    pub incremental: [u64; STAGES],
    /// Mean per-stage wall-clock seconds, when measured.
    pub seconds: Option<[f64; STAGES]>,
}

impl FlopsReport {
    /// Expected cost per image for exit-stage fractions `p`.
    pub fn expected(&self, p: &[f64; STAGES]) -> f64 {
        p.iter().zip(&self.cumulative).map(|(f, &c)| f * c as f64).sum()
    }
}

pub fn count_flops(cfg: &HarmonizerConfig) -> Result<FlopsReport> {
    cfg.validate()?;
    let s = cfg.image_size;
    let cb = cfg.bottom_channels();
    let mut stages = [StageBreakdown::default(); STAGES];

    let mut side = s;
    for (k, plan) in layer_plan(cfg.base_width).iter().enumerate() {
        let st = &mut stages[k];
        if k == 0 && cfg.input_norm.is_some() {
            st.encoder += conv_flops(1, 1, 3, 3, s, s);
        }
        for spec in plan {
            if spec.pool_before {
                side /= 2;
                st.encoder += (spec.c_in * side * side) as u64;
            }
            st.encoder += conv_flops(3, 3, spec.c_in, spec.c_out, side, side);
            st.encoder += (spec.c_out * side * side) as u64;
        }
    }

    for (k0, st) in stages.iter_mut().enumerate() {
        let k = k0 + 1;
        let ck = cfg.base_width << k0;
        let mut side = s >> k0;
        st.decoder += conv_flops(3, 3, ck, ck / 2, side, side) + (ck / 2 * side * side) as u64;
        for j in 1..=k {
            let (ci, co) = (ck >> j, ck >> (j + 1));
            if j > 1 {
                side *= 2;
            }
            st.decoder += (ci * side * side) as u64;
            st.decoder += conv_flops(3, 3, ci, co, side, side) + (co * side * side) as u64;
        }
        if k > 1 {
            for j in 1..=cfg.fusion_blocks() {
                for i in 1..=2 {
                    let ci = if j == 1 && i == 1 { 2 * cb } else { cb };
                    st.fusion += conv_flops(3, 3, ci, cb, s, s) + (cb * s * s) as u64;
                }
            }
        }
        st.output_conv = conv_flops(3, 3, cb, 3, s, s);
        if k <= SCORED_STAGES && cfg.exit_head {
            st.exit_head = (cb * (s * s + 1)) as u64 + gru_flops(cb, cfg.gru_hidden);
        }
    }

    let mut cumulative = [0u64; STAGES];
    let mut carried = 0u64;
    for k in 0..STAGES {
        carried += stages[k].carried();
        cumulative[k] = carried + stages[k].output_conv;
    }
    let mut incremental = cumulative;
    for k in 1..STAGES {
        incremental[k] = cumulative[k] - cumulative[k - 1];
    }
    Ok(FlopsReport {
        convention: FLOP_CONVENTION,
        stages,
        cumulative,
        incremental,
        seconds: None,
    })
}
