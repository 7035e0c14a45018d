//! Straight-line reference implementations used as test oracles.

use propih_core::encoder::layer_plan;
use propih_core::harmonet::STAGES;
use propih_core::tensor::ParamStore;
use propih_core::Harmonizer;

/// Direct convolution, one output value at a time.
#[allow(clippy::too_many_arguments)]
pub fn conv(
    x: &[f64],
    (n, ci, h, w): (usize, usize, usize, usize),
    wt: &[f64],
    (co, kh, kw): (usize, usize, usize),
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = Vec::with_capacity(n * co * ho * wo);
    for b in 0..n {
        for o in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias.map_or(0.0, |bs| bs[o]);
                    for c in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((b * ci + c) * h + iy as usize) * w + ix as usize];
                                acc += xv * wt[((o * ci + c) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

pub fn maxpool(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for p in 0..planes {
        for y in 0..h / 2 {
            for xx in 0..w / 2 {
                let at = |dy: usize, dx: usize| x[(p * h + 2 * y + dy) * w + 2 * xx + dx];
                out.push(at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1)));
            }
        }
    }
    out
}

fn sig(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// `W x` for a row-major `[O, I]` matrix.
fn matvec(m: &[f64], x: &[f64]) -> Vec<f64> {
    m.chunks(x.len())
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

/// GRU step written out gate by gate, reading parameters by name.
pub fn gru(params: &ParamStore<f64>, h: &[f64], x: &[f64]) -> (f64, Vec<f64>) {
    let p = |n: &str| params[n].data();
    let wx = |g: &str| matvec(p(&format!("gru.w_{g}")), x);
    let uh = |g: &str, v: &[f64]| matvec(p(&format!("gru.u_{g}")), v);
    let (wz, wr, wh) = (wx("z"), wx("r"), wx("h"));
    let (uz, ur) = (uh("z", h), uh("r", h));
    let (bz, br, bh) = (p("gru.b_z"), p("gru.b_r"), p("gru.b_h"));
    let hn = h.len();
    let z: Vec<f64> = (0..hn).map(|i| sig(wz[i] + bz[i] + uz[i])).collect();
    let r: Vec<f64> = (0..hn).map(|i| sig(wr[i] + br[i] + ur[i])).collect();
    let rh: Vec<f64> = (0..hn).map(|i| r[i] * h[i]).collect();
    let uc = uh("h", &rh);
    let cand: Vec<f64> = (0..hn).map(|i| (wh[i] + bh[i] + uc[i]).tanh()).collect();
    let next: Vec<f64> = (0..hn).map(|i| (1.0 - z[i]) * h[i] + z[i] * cand[i]).collect();
    let logit: f64 = p("head.w").iter().zip(&next).map(|(a, b)| a * b).sum::<f64>() + p("head.b")[0];
    (sig(logit), next)
}

/// Masked mean and population std of one plane.
pub fn region_stats(x: &[f64], mask: &[f64]) -> (f64, f64) {
    let vals: Vec<f64> = x.iter().zip(mask).filter(|(_, &m)| m == 1.0).map(|(&v, _)| v).collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Map {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

/// Walks the network one scalar operation at a time and counts them. Each
/// multiply, add, comparison, activation, divide, pooled or resampled output
/// element is one op.
#[derive(Clone, Debug, Default)]
pub struct OpCounter {
    pub ops: u64,
}

impl OpCounter {
    fn tick(&mut self) {
        self.ops += 1;
    }

    /// Same-padded stride-1 conv with bias; padded taps still multiply.
    pub fn conv(&mut self, x: Map, c_out: usize, k: usize) -> Map {
        for _ in 0..c_out * x.h * x.w {
            for _ in 0..x.c * k * k {
                self.tick(); // multiply
                self.tick(); // accumulate
            }
            self.tick(); // bias
        }
        Map { c: c_out, ..x }
    }

    pub fn pointwise(&mut self, x: Map) -> Map {
        for _ in 0..x.c * x.h * x.w {
            self.tick();
        }
        x
    }

    pub fn pool(&mut self, x: Map) -> Map {
        let y = Map {
            c: x.c,
            h: x.h / 2,
            w: x.w / 2,
        };
        self.pointwise(y)
    }

    pub fn upsample(&mut self, x: Map, s: usize) -> Map {
        let y = Map {
            c: x.c,
            h: x.h * s,
            w: x.w * s,
        };
        self.pointwise(y)
    }

    pub fn gap(&mut self, x: Map) -> usize {
        for _ in 0..x.c {
            for _ in 0..x.h * x.w {
                self.tick();
            }
            self.tick(); // divide
        }
        x.c
    }

    pub fn linear(&mut self, i: usize, o: usize, bias: bool) {
        for _ in 0..o {
            for _ in 0..i {
                self.tick();
                self.tick();
            }
            if bias {
                self.tick();
            }
        }
    }

    fn vector(&mut self, n: usize) {
        for _ in 0..n {
            self.tick();
        }
    }

    pub fn gru(&mut self, i: usize, h: usize) {
        for _ in 0..2 {
            // z and r: W x + b, U h, sum, sigmoid
            self.linear(i, h, true);
            self.linear(h, h, false);
            self.vector(2 * h);
        }
        self.vector(h); // r * h
        self.linear(i, h, true);
        self.linear(h, h, false);
        self.vector(2 * h); // sum, tanh
        self.vector(4 * h); // 1 - z, (1 - z) h, z c, sum
        self.linear(h, 1, true);
        self.vector(1); // sigmoid
    }
}

fn kernel_out(params: &ParamStore, name: &str) -> (usize, usize) {
    let s = params[name].shape();
    (s[0], s[2])
}

/// Cumulative op counts for exiting at each stage plus the decoder and
/// bottom-branch map shapes, derived from the model's parameter tensors.
pub fn network_ops(model: &Harmonizer) -> ([u64; STAGES], Vec<Map>, Vec<Map>) {
    let cfg = &model.config;
    let s = cfg.image_size;
    let mut c = OpCounter::default();
    let mut x = Map { c: 3, h: s, w: s };
    if cfg.input_norm.is_some() {
        x = c.conv(x, 3, 1);
    }
    let plan = layer_plan(cfg.base_width);
    let mut cumulative = [0u64; STAGES];
    let (mut decoded, mut bottom) = (Vec::new(), Vec::<Map>::new());
    for k in 1..=STAGES {
        for (i, spec) in plan[k - 1].iter().enumerate() {
            if spec.pool_before {
                x = c.pool(x);
            }
            let wt = model.encoder.stages[k - 1][i].0.shape();
            x = c.conv(x, wt[0], wt[2]);
            x = c.pointwise(x);
        }
        let (co, kk) = kernel_out(&model.params, &format!("dec.s{k}.conv.w"));
        let mut d = c.conv(x, co, kk);
        d = c.pointwise(d);
        for j in 1..=k {
            d = c.upsample(d, if j == 1 { 1 } else { 2 });
            let (co, kk) = kernel_out(&model.params, &format!("dec.s{k}.up{j}.w"));
            d = c.conv(d, co, kk);
            d = c.pointwise(d);
        }
        decoded.push(d);
        let b = if k == 1 {
            d
        } else {
            let prev = bottom[k - 2];
            let mut f = Map { c: prev.c + d.c, ..d };
            for j in 1.. {
                let name = format!("fus.s{k}.b{j}.c1.w");
                if !model.params.contains_key(&name) {
                    break;
                }
                for i in 1..=2 {
                    let (co, kk) = kernel_out(&model.params, &format!("fus.s{k}.b{j}.c{i}.w"));
                    f = c.conv(f, co, kk);
                    f = c.pointwise(f);
                }
            }
            f
        };
        bottom.push(b);
        if k < STAGES && cfg.exit_head {
            let i = c.gap(b);
            c.gru(i, model.params["gru.u_z"].shape()[0]);
        }
        let mut emit = c.clone();
        let (co, kk) = kernel_out(&model.params, &format!("out.s{k}.w"));
        emit.conv(b, co, kk);
        cumulative[k - 1] = emit.ops;
    }
    (cumulative, decoded, bottom)
}
