//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value; a node's inputs
//! always precede it, so a single reverse sweep visits each node once.
//! Gradients accumulate (sum) into `Tensor::grad` of every node reachable
//! from the loss that has `requires_grad` set.

use super::kernels::{self, ConvGeom};
use super::{s, Scalar, Tensor};
use crate::adain::{self, AdainPlane, StatsMode};
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T: Scalar> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    AvgPool2(Var),
    UpsampleNearest {
        input: Var,
        scale: usize,
    },
    UpsampleBilinear {
        input: Var,
        scale: usize,
    },
    Concat(Var, Var),
    SliceChannels {
        input: Var,
        start: usize,
    },
    GlobalAvgPool(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine {
        input: Var,
        scale: T,
    },
    Sum(Var),
    SumSquares(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    MaskedStats {
        input: Var,
        mask: Var,
        mode: StatsMode,
        stats: Vec<(T, T, usize)>,
    },
    AdaIn {
        input: Var,
        mask: Var,
        eps: T,
        mode: StatsMode,
        planes: Vec<AdainPlane<T>>,
    },
    Bce {
        input: Var,
        label: T,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
}

pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

pub const BCE_CLAMP: f64 = 1e-7;

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    /// Leaf that takes `requires_grad` from the tensor itself.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push_raw(t, Op::Leaf)
    }

    pub fn param(&mut self, mut t: Tensor<T>) -> Var {
        t.requires_grad = true;
        t.grad = None;
        self.push_raw(t, Op::Leaf)
    }

    pub fn constant(&mut self, mut t: Tensor<T>) -> Var {
        t.requires_grad = false;
        t.grad = None;
        self.push_raw(t, Op::Leaf)
    }

    /// Constant copy of `v`'s current value; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).detached();
        self.constant(t)
    }

    fn push_raw(&mut self, t: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value: t, op });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|&v| self.requires_grad(v));
        let mut t = Tensor::new(shape, data).expect("kernel produced consistent shape");
        t.requires_grad = requires_grad;
        self.push_raw(t, op)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (n, c_in, h, w) = self.value(input).dims4()?;
        let (c_out, wc, kh, kw) = self.value(weight).dims4()?;
        if wc != c_in {
            return shape_err(format!(
                "conv2d: input has {c_in} channels but weight {:?} expects {wc}",
                self.shape(weight)
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d: stride must be >= 1".into()));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return shape_err(format!(
                "conv2d: kernel {kh}x{kw} does not fit padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return shape_err(format!("conv2d: bias {:?} must be [{c_out}]", self.shape(b)));
            }
        }
        let geom = ConvGeom {
            n,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            padding,
        };
        let out = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            geom,
        );
        let mut ins = vec![input, weight];
        ins.extend(bias);
        Ok(self.push(
            vec![n, c_out, geom.out_h(), geom.out_w()],
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            &ins,
        ))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let t = self.value(x);
        let (shape, data) = (t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect());
        self.push(shape, data, op, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        // NaN passes through so bad values surface in the loss.
        self.unary(
            x,
            |v| {
                if v > T::zero() || v.is_nan() {
                    v
                } else {
                    T::zero()
                }
            },
            Op::Relu(x),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| T::one() / (T::one() + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (a, b) = (s::<T>(scale), s::<T>(shift));
        self.unary(x, |v| a * v + b, Op::Affine { input: x, scale: a })
    }

    fn spatial(&self, x: Var, op: &str) -> Result<(usize, usize, usize, usize)> {
        self.value(x)
            .dims4()
            .map_err(|_| Error::Shape(format!("{op}: expected [N,C,H,W], got {:?}", self.shape(x))))
    }

    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.spatial(x, "maxpool2x2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return shape_err(format!("maxpool2x2: spatial extent {h}x{w} must be even"));
        }
        let (out, argmax) = kernels::maxpool2_forward(self.value(x).data(), n * c, h, w);
        Ok(self.push(vec![n, c, h / 2, w / 2], out, Op::MaxPool2 { input: x, argmax }, &[x]))
    }

    pub fn avgpool2x2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.spatial(x, "avgpool2x2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return shape_err(format!("avgpool2x2: spatial extent {h}x{w} must be even"));
        }
        let out = kernels::avgpool2_forward(self.value(x).data(), n * c, h, w);
        Ok(self.push(vec![n, c, h / 2, w / 2], out, Op::AvgPool2(x), &[x]))
    }

    pub fn upsample_nearest(&mut self, x: Var, scale: usize) -> Result<Var> {
        let (n, c, h, w) = self.spatial(x, "upsample_nearest")?;
        if scale < 1 {
            return Err(Error::InvalidArgument("upsample_nearest: scale must be >= 1".into()));
        }
        let out = kernels::upsample_nearest_forward(self.value(x).data(), n * c, h, w, scale);
        Ok(self.push(
            vec![n, c, h * scale, w * scale],
            out,
            Op::UpsampleNearest { input: x, scale },
            &[x],
        ))
    }

    pub fn upsample_bilinear(&mut self, x: Var, scale: usize) -> Result<Var> {
        let (n, c, h, w) = self.spatial(x, "upsample_bilinear")?;
        if scale < 1 {
            return Err(Error::InvalidArgument("upsample_bilinear: scale must be >= 1".into()));
        }
        let out = kernels::upsample_bilinear_forward(self.value(x).data(), n * c, h, w, scale);
        Ok(self.push(
            vec![n, c, h * scale, w * scale],
            out,
            Op::UpsampleBilinear { input: x, scale },
            &[x],
        ))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca, h, w) = self.spatial(a, "concat_channels")?;
        let (nb, cb, hb, wb) = self.spatial(b, "concat_channels")?;
        if (n, h, w) != (nb, hb, wb) {
            return shape_err(format!(
                "concat_channels: batch/spatial mismatch {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(da.len() + db.len());
        for i in 0..n {
            out.extend_from_slice(&da[i * ca * h * w..(i + 1) * ca * h * w]);
            out.extend_from_slice(&db[i * cb * h * w..(i + 1) * cb * h * w]);
        }
        Ok(self.push(vec![n, ca + cb, h, w], out, Op::Concat(a, b), &[a, b]))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c, h, w) = self.spatial(x, "slice_channels")?;
        if start + len > c {
            return shape_err(format!(
                "slice_channels: [{start}, {}) exceeds {c} channels",
                start + len
            ));
        }
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(n * len * h * w);
        for i in 0..n {
            out.extend_from_slice(&d[(i * c + start) * h * w..(i * c + start + len) * h * w]);
        }
        Ok(self.push(vec![n, len, h, w], out, Op::SliceChannels { input: x, start }, &[x]))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.spatial(x, "global_avg_pool")?;
        if h * w == 0 {
            return shape_err("global_avg_pool: empty spatial extent");
        }
        let hw = h * w;
        let denom = T::from_usize(hw).unwrap();
        let out = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().fold(T::zero(), |a, &v| a + v) / denom)
            .collect();
        Ok(self.push(vec![n, c], out, Op::GlobalAvgPool(x), &[x]))
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!(
                "{name}: shape mismatch {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, data, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().fold(T::zero(), |a, &v| a + v);
        self.push(vec![], vec![total], Op::Sum(x), &[x])
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().fold(T::zero(), |a, &v| a + v * v);
        self.push(vec![], vec![total], Op::SumSquares(x), &[x])
    }

    /// `y[n, o] = x[n, :] . w[o, :] + b[o]` for `x: [N, I]`, `w: [O, I]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (n, i) = match self.shape(input) {
            &[n, i] => (n, i),
            s => return shape_err(format!("linear: input must be [N, I], got {s:?}")),
        };
        let o = match self.shape(weight) {
            &[o, wi] if wi == i => o,
            s => return shape_err(format!("linear: weight {s:?} incompatible with input width {i}")),
        };
        if let Some(b) = bias {
            if self.shape(b) != [o] {
                return shape_err(format!("linear: bias {:?} must be [{o}]", self.shape(b)));
            }
        }
        let y = kernels::linear_forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            n,
            i,
            o,
        );
        let mut ins = vec![input, weight];
        ins.extend(bias);
        Ok(self.push(vec![n, o], y, Op::Linear { input, weight, bias }, &ins))
    }

    fn check_mask(&self, x: Var, mask: Var, op: &str) -> Result<(usize, usize)> {
        let (n, c, h, w) = self.spatial(x, op)?;
        if n != 1 || self.shape(mask) != [1, 1, h, w] {
            return shape_err(format!(
                "{op}: feature {:?} and mask {:?} must be [1,C,H,W] and [1,1,H,W]",
                self.shape(x),
                self.shape(mask)
            ));
        }
        if !self.value(mask).is_binary() {
            return Err(Error::InvalidArgument(format!("{op}: mask must be binary")));
        }
        Ok((c, h * w))
    }

    /// Differentiable region statistics: output `[2, C]`, row 0 the means and
    /// row 1 the standard deviations of the foreground (`mask == 1`) region.
    pub fn masked_stats(&mut self, x: Var, mask: Var, mode: StatsMode) -> Result<Var> {
        let (c, hw) = self.check_mask(x, mask, "masked_stats")?;
        let (xd, md) = (self.value(x).data(), self.value(mask).data());
        let stats: Vec<_> = (0..c)
            .map(|ch| adain::plane_stats(&xd[ch * hw..(ch + 1) * hw], md, true, mode))
            .collect();
        let mut out = Vec::with_capacity(2 * c);
        out.extend(stats.iter().map(|s| s.0));
        out.extend(stats.iter().map(|s| s.1));
        Ok(self.push(
            vec![2, c],
            out,
            Op::MaskedStats {
                input: x,
                mask,
                mode,
                stats,
            },
            &[x],
        ))
    }

    /// AdaIN over the foreground region. Gradients flow through all four
    /// region statistics. Returns the node and whether the foreground was
    /// empty (identity transform).
    pub fn adain(&mut self, x: Var, mask: Var, eps: f64, mode: StatsMode) -> Result<(Var, bool)> {
        let (c, hw) = self.check_mask(x, mask, "adain")?;
        let md = self.value(mask).data();
        let fg_count = md.iter().filter(|&&m| m == T::one()).count();
        if fg_count == hw {
            return Err(Error::EmptyBackground { stage: 0 });
        }
        let eps = s::<T>(eps);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); xd.len()];
        let planes = (0..c)
            .map(|ch| {
                let r = ch * hw..(ch + 1) * hw;
                adain::adain_plane_forward(&xd[r.clone()], md, eps, mode, &mut out[r])
            })
            .collect();
        let shape = self.shape(x).to_vec();
        let v = self.push(
            shape,
            out,
            Op::AdaIn {
                input: x,
                mask,
                eps,
                mode,
                planes,
            },
            &[x],
        );
        Ok((v, fg_count == 0))
    }

    /// Binary cross-entropy of a single probability against `label`, with the
    /// probability clamped to `[1e-7, 1 - 1e-7]`.
    pub fn bce(&mut self, p: Var, label: f64) -> Result<Var> {
        if self.value(p).len() != 1 {
            return shape_err(format!("bce: expected a single probability, got {:?}", self.shape(p)));
        }
        let y = s::<T>(label);
        let pc = clamp_prob(self.value(p).item());
        let loss = -(y * pc.ln() + (T::one() - y) * (T::one() - pc).ln());
        Ok(self.push(vec![], vec![loss], Op::Bce { input: p, label: y }, &[p]))
    }

    /// Sum of several scalar nodes.
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var> {
        let mut it = vars.iter().copied();
        let mut acc = it
            .next()
            .ok_or_else(|| Error::InvalidArgument("add_all: no terms".into()))?;
        for v in it {
            acc = self.add(acc, v)?;
        }
        Ok(acc)
    }

    /// Accumulate d(loss)/d(node) into every reachable node with
    /// `requires_grad`. Intermediate gradients are released after use; leaf
    /// gradients persist and sum across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return shape_err(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            ));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        accumulate(&mut self.nodes[loss.0].value, vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].value.requires_grad {
                continue;
            }
            let g = if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            } else {
                match self.nodes[i].value.grad.take() {
                    Some(g) => g,
                    None => continue,
                }
            };
            for (target, contrib) in self.node_backward(i, &g) {
                if self.nodes[target.0].value.requires_grad {
                    accumulate(&mut self.nodes[target.0].value, contrib);
                }
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let out = node.value.data();
        let want = |v: Var| self.requires_grad(v);
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                if want(*input) {
                    res.push((
                        *input,
                        kernels::conv2d_backward_input(g, self.value(*weight).data(), *geom),
                    ));
                }
                if want(*weight) {
                    res.push((
                        *weight,
                        kernels::conv2d_backward_weight(g, self.value(*input).data(), *geom),
                    ));
                }
                if let Some(b) = bias.filter(|&b| want(b)) {
                    let plane = geom.out_h() * geom.out_w();
                    res.push((b, kernels::conv2d_backward_bias(g, geom.n, geom.c_out, plane)));
                }
            }
            Op::Relu(x) => {
                let d = out
                    .iter()
                    .zip(g)
                    .map(|(&y, &gv)| if y > T::zero() { gv } else { T::zero() });
                res.push((*x, d.collect()));
            }
            Op::Sigmoid(x) => {
                res.push((*x, out.iter().zip(g).map(|(&y, &gv)| gv * y * (T::one() - y)).collect()));
            }
            Op::Tanh(x) => {
                res.push((*x, out.iter().zip(g).map(|(&y, &gv)| gv * (T::one() - y * y)).collect()));
            }
            Op::MaxPool2 { input, argmax } => {
                let mut d = vec![T::zero(); self.value(*input).len()];
                for (&a, &gv) in argmax.iter().zip(g) {
                    d[a] += gv;
                }
                res.push((*input, d));
            }
            Op::AvgPool2(x) => {
                let (n, c, h, w) = self.value(*x).dims4().unwrap();
                res.push((*x, kernels::avgpool2_backward(g, n * c, h, w)));
            }
            Op::UpsampleNearest { input, scale } => {
                let (n, c, h, w) = self.value(*input).dims4().unwrap();
                res.push((*input, kernels::upsample_nearest_backward(g, n * c, h, w, *scale)));
            }
            Op::UpsampleBilinear { input, scale } => {
                let (n, c, h, w) = self.value(*input).dims4().unwrap();
                res.push((*input, kernels::upsample_bilinear_backward(g, n * c, h, w, *scale)));
            }
            Op::Concat(a, b) => {
                let (n, ca, h, w) = self.value(*a).dims4().unwrap();
                let cb = self.value(*b).dims4().unwrap().1;
                let (pa, pb) = (ca * h * w, cb * h * w);
                let mut ga = Vec::with_capacity(n * pa);
                let mut gb = Vec::with_capacity(n * pb);
                for s in 0..n {
                    let base = s * (pa + pb);
                    ga.extend_from_slice(&g[base..base + pa]);
                    gb.extend_from_slice(&g[base + pa..base + pa + pb]);
                }
                res.push((*a, ga));
                res.push((*b, gb));
            }
            Op::SliceChannels { input, start } => {
                let (n, c, h, w) = self.value(*input).dims4().unwrap();
                let len = node.value.shape()[1];
                let mut d = vec![T::zero(); n * c * h * w];
                for s in 0..n {
                    let dst = (s * c + start) * h * w;
                    let src = s * len * h * w;
                    d[dst..dst + len * h * w].copy_from_slice(&g[src..src + len * h * w]);
                }
                res.push((*input, d));
            }
            Op::GlobalAvgPool(x) => {
                let (_, _, h, w) = self.value(*x).dims4().unwrap();
                let denom = T::from_usize(h * w).unwrap();
                let d = g.iter().flat_map(|&gv| std::iter::repeat_n(gv / denom, h * w));
                res.push((*x, d.collect()));
            }
            Op::Add(a, b) => {
                res.push((*a, g.to_vec()));
                res.push((*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                res.push((*a, g.to_vec()));
                res.push((*b, g.iter().map(|&v| -v).collect()));
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                res.push((*a, g.iter().zip(db).map(|(&gv, &y)| gv * y).collect()));
                res.push((*b, g.iter().zip(da).map(|(&gv, &x)| gv * x).collect()));
            }
            Op::Affine { input, scale } => {
                res.push((*input, g.iter().map(|&gv| gv * *scale).collect()));
            }
            Op::Sum(x) => {
                res.push((*x, vec![g[0]; self.value(*x).len()]));
            }
            Op::SumSquares(x) => {
                let two = s::<T>(2.0);
                res.push((*x, self.value(*x).data().iter().map(|&v| two * v * g[0]).collect()));
            }
            Op::Linear { input, weight, bias } => {
                let (n, i) = (self.shape(*input)[0], self.shape(*input)[1]);
                let o = self.shape(*weight)[0];
                let (xd, wd) = (self.value(*input).data(), self.value(*weight).data());
                if want(*input) {
                    let mut dx = vec![T::zero(); n * i];
                    for r in 0..n {
                        for c in 0..o {
                            let gv = g[r * o + c];
                            for k in 0..i {
                                dx[r * i + k] += gv * wd[c * i + k];
                            }
                        }
                    }
                    res.push((*input, dx));
                }
                if want(*weight) {
                    let mut dw = vec![T::zero(); o * i];
                    for r in 0..n {
                        for c in 0..o {
                            let gv = g[r * o + c];
                            for k in 0..i {
                                dw[c * i + k] += gv * xd[r * i + k];
                            }
                        }
                    }
                    res.push((*weight, dw));
                }
                if let Some(b) = bias.filter(|&b| want(b)) {
                    let mut db = vec![T::zero(); o];
                    for r in 0..n {
                        for c in 0..o {
                            db[c] += g[r * o + c];
                        }
                    }
                    res.push((b, db));
                }
            }
            Op::MaskedStats {
                input,
                mask,
                mode,
                stats,
            } => {
                let (xd, md) = (self.value(*input).data(), self.value(*mask).data());
                let c = stats.len();
                let hw = xd.len() / c;
                let mut d = vec![T::zero(); xd.len()];
                for (ch, st) in stats.iter().enumerate() {
                    let r = ch * hw..(ch + 1) * hw;
                    adain::plane_stats_backward(&xd[r.clone()], md, true, *mode, *st, g[ch], g[c + ch], &mut d[r]);
                }
                res.push((*input, d));
            }
            Op::AdaIn {
                input,
                mask,
                eps,
                mode,
                planes,
            } => {
                let (xd, md) = (self.value(*input).data(), self.value(*mask).data());
                let hw = xd.len() / planes.len();
                let mut d = vec![T::zero(); xd.len()];
                for (ch, st) in planes.iter().enumerate() {
                    let r = ch * hw..(ch + 1) * hw;
                    adain::adain_plane_backward(&xd[r.clone()], md, *eps, *mode, *st, &g[r.clone()], &mut d[r]);
                }
                res.push((*input, d));
            }
            Op::Bce { input, label } => {
                let p = self.value(*input).item();
                let lo = s::<T>(BCE_CLAMP);
                let dp = if p < lo || p > T::one() - lo {
                    T::zero()
                } else {
                    (p - *label) / (p * (T::one() - p))
                };
                res.push((*input, vec![g[0] * dp]));
            }
        }
        res
    }
}

pub(crate) fn clamp_prob<T: Scalar>(p: T) -> T {
    let lo = s::<T>(BCE_CLAMP);
    p.max(lo).min(T::one() - lo)
}

fn accumulate<T: Scalar>(t: &mut Tensor<T>, contrib: Vec<T>) {
    match &mut t.grad {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(contrib) {
                *a += b;
            }
        }
        None => t.grad = Some(contrib),
    }
}
