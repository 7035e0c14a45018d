//! Central finite differences in f64 against f32 reverse-mode gradients.

use std::collections::BTreeMap;

use propih_core::adain::StatsMode;
use propih_core::harmonet::{Forward, Trainable};
use propih_core::losses::sample_objective;
use propih_core::tensor::{Scalar, Tape, Tensor, Var};
use propih_core::{Harmonizer, HarmonizerConfig};
use rand::Rng;

pub const PROBES: usize = 24;
pub const STEP: f64 = 1e-6;
pub const TOL: f64 = 1e-3;

/// The network is piecewise smooth (ReLU, max-pool); a smaller step keeps
/// probes off the kinks.
pub const NET_STEP: f64 = 1e-7;

/// Magnitudes below this count as zero when forming the relative error.
pub const FLOOR: f64 = 1e-3;

pub struct Input {
    value: Tensor<f64>,
    diff: bool,
}

pub fn diff(value: Tensor<f64>) -> Input {
    Input { value, diff: true }
}

pub fn fixed(value: Tensor<f64>) -> Input {
    Input { value, diff: false }
}

/// Result of probing one op. `detail` describes the worst probe.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub name: String,
    pub probes: usize,
    pub worst: f64,
    pub detail: String,
}

impl Outcome {
    pub fn ok(&self) -> bool {
        self.probes >= 20 && self.worst < TOL
    }

    pub fn assert_ok(&self) {
        assert!(
            self.ok(),
            "{}: {} probes, worst {}",
            self.name,
            self.probes,
            self.detail
        );
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

fn vars<T: Scalar>(tape: &mut Tape<T>, inputs: &[Input]) -> Vec<Var> {
    inputs
        .iter()
        .map(|i| {
            let t = i.value.cast::<T>();
            if i.diff {
                tape.param(t)
            } else {
                tape.constant(t)
            }
        })
        .collect()
}

/// `sum(y * proj)` so every output element carries a distinct weight.
fn projected<T: Scalar>(tape: &mut Tape<T>, y: Var, proj: &Tensor<f64>) -> Var {
    let p = tape.constant(proj.cast::<T>());
    let prod = tape.mul(y, p).unwrap();
    tape.sum(prod)
}

pub fn check(
    name: &str,
    inputs: Vec<Input>,
    build32: impl Fn(&mut Tape<f32>, &[Var]) -> Var,
    build64: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
) -> Outcome {
    let mut r = super::rng(name.bytes().map(u64::from).sum());
    let shape = {
        let mut tape = Tape::<f64>::new();
        let xs = vars(&mut tape, &inputs);
        let y = build64(&mut tape, &xs);
        tape.shape(y).to_vec()
    };
    let proj: Tensor<f64> = super::uniform(&shape, &mut r, -1.0, 1.0);

    let mut tape = Tape::<f32>::new();
    let xs = vars(&mut tape, &inputs);
    let y = build32(&mut tape, &xs);
    let loss = projected(&mut tape, y, &proj);
    tape.backward(loss).unwrap();
    let analytic: Vec<Option<Vec<f64>>> = xs
        .iter()
        .zip(&inputs)
        .map(|(&v, i)| {
            i.diff.then(|| {
                tape.grad(v)
                    .map(|g| g.iter().map(|&x| x as f64).collect())
                    .unwrap_or_else(|| vec![0.0; i.value.len()])
            })
        })
        .collect();

    let eval = |inputs: &[Input]| -> f64 {
        let mut tape = Tape::<f64>::new();
        let xs = vars(&mut tape, inputs);
        let y = build64(&mut tape, &xs);
        let l = projected(&mut tape, y, &proj);
        tape.value(l).item()
    };

    let targets: Vec<usize> = (0..inputs.len()).filter(|&i| inputs[i].diff).collect();
    assert!(!targets.is_empty());
    let mut inputs = inputs;
    let mut out = Outcome {
        name: name.to_string(),
        probes: 0,
        worst: 0.0,
        detail: String::new(),
    };
    for p in 0..PROBES {
        let which = targets[p % targets.len()];
        let idx = r.random_range(0..inputs[which].value.len());
        let orig = inputs[which].value.data()[idx];
        inputs[which].value.data_mut()[idx] = orig + STEP;
        let up = eval(&inputs);
        inputs[which].value.data_mut()[idx] = orig - STEP;
        let down = eval(&inputs);
        inputs[which].value.data_mut()[idx] = orig;
        let numeric = (up - down) / (2.0 * STEP);
        let a = analytic[which].as_ref().unwrap()[idx];
        let e = rel_err(a, numeric);
        if e >= out.worst {
            out.worst = e;
            out.detail = format!("input {which}[{idx}] analytic {a:.8e} numeric {numeric:.8e} rel err {e:.3e}");
        }
        out.probes += 1;
    }
    out
}

#[macro_export]
macro_rules! gradcheck {
    ($name:expr, $inputs:expr, |$t:ident, $x:ident| $body:expr) => {
        $crate::common::grad::check(
            $name,
            $inputs,
            |$t: &mut propih_core::tensor::Tape<f32>, $x: &[propih_core::tensor::Var]| $body,
            |$t: &mut propih_core::tensor::Tape<f64>, $x: &[propih_core::tensor::Var]| $body,
        )
    };
}

fn u(shape: &[usize], seed: u64) -> Tensor<f64> {
    super::uniform(shape, &mut super::rng(seed), -1.0, 1.0)
}

pub fn conv_cases() -> Vec<Outcome> {
    vec![
        gradcheck!(
            "conv_p1",
            vec![diff(u(&[2, 3, 5, 5], 1)), diff(u(&[4, 3, 3, 3], 2)), diff(u(&[4], 3))],
            |t, x| t.conv2d(x[0], x[1], Some(x[2]), 1, 1).unwrap()
        ),
        gradcheck!(
            "conv_s2",
            vec![diff(u(&[1, 2, 6, 6], 4)), diff(u(&[3, 2, 2, 2], 5))],
            |t, x| t.conv2d(x[0], x[1], None, 2, 0).unwrap()
        ),
        gradcheck!(
            "conv_1x1",
            vec![diff(u(&[1, 3, 4, 4], 6)), diff(u(&[2, 3, 1, 1], 7)), diff(u(&[2], 8))],
            |t, x| t.conv2d(x[0], x[1], Some(x[2]), 1, 0).unwrap()
        ),
    ]
}

pub fn activation_cases() -> Vec<Outcome> {
    vec![
        gradcheck!("relu", vec![diff(u(&[2, 3, 4, 4], 9))], |t, x| t.relu(x[0])),
        gradcheck!("sigmoid", vec![diff(u(&[2, 3, 4, 4], 10))], |t, x| t.sigmoid(x[0])),
        gradcheck!("tanh", vec![diff(u(&[2, 3, 4, 4], 11))], |t, x| t.tanh(x[0])),
        gradcheck!("affine", vec![diff(u(&[3, 7], 12))], |t, x| t.affine(x[0], -1.5, 0.3)),
    ]
}

pub fn resampling_cases() -> Vec<Outcome> {
    vec![
        gradcheck!("maxpool", vec![diff(u(&[1, 3, 6, 6], 13))], |t, x| t
            .maxpool2x2(x[0])
            .unwrap()),
        gradcheck!("avgpool", vec![diff(u(&[2, 2, 4, 6], 14))], |t, x| t
            .avgpool2x2(x[0])
            .unwrap()),
        gradcheck!("nearest2", vec![diff(u(&[1, 2, 3, 4], 15))], |t, x| t
            .upsample_nearest(x[0], 2)
            .unwrap()),
        gradcheck!("nearest1", vec![diff(u(&[1, 2, 3, 4], 16))], |t, x| t
            .upsample_nearest(x[0], 1)
            .unwrap()),
        gradcheck!("bilinear2", vec![diff(u(&[1, 2, 3, 4], 17))], |t, x| t
            .upsample_bilinear(x[0], 2)
            .unwrap()),
        gradcheck!("bilinear3", vec![diff(u(&[1, 1, 4, 3], 18))], |t, x| t
            .upsample_bilinear(x[0], 3)
            .unwrap()),
        gradcheck!("gap", vec![diff(u(&[2, 3, 4, 5], 19))], |t, x| t
            .global_avg_pool(x[0])
            .unwrap()),
    ]
}

pub fn plumbing_cases() -> Vec<Outcome> {
    vec![
        gradcheck!(
            "concat",
            vec![diff(u(&[2, 2, 3, 3], 20)), diff(u(&[2, 3, 3, 3], 21))],
            |t, x| t.concat_channels(x[0], x[1]).unwrap()
        ),
        gradcheck!("slice", vec![diff(u(&[2, 5, 3, 3], 22))], |t, x| t
            .slice_channels(x[0], 1, 3)
            .unwrap()),
    ]
}

pub fn elementwise_cases() -> Vec<Outcome> {
    let pair = || vec![diff(u(&[3, 4], 23)), diff(u(&[3, 4], 24))];
    vec![
        gradcheck!("add", pair(), |t, x| t.add(x[0], x[1]).unwrap()),
        gradcheck!("sub", pair(), |t, x| t.sub(x[0], x[1]).unwrap()),
        gradcheck!("mul", pair(), |t, x| t.mul(x[0], x[1]).unwrap()),
        gradcheck!("sum", vec![diff(u(&[2, 3, 4], 25))], |t, x| t.sum(x[0])),
        gradcheck!("sum_squares", vec![diff(u(&[2, 3, 4], 26))], |t, x| t.sum_squares(x[0])),
        gradcheck!(
            "add_all",
            vec![diff(u(&[], 27)), diff(u(&[], 28)), diff(u(&[], 29))],
            |t, x| t.add_all(x).unwrap()
        ),
    ]
}

pub fn linear_cases() -> Vec<Outcome> {
    vec![
        gradcheck!(
            "linear",
            vec![diff(u(&[3, 5], 30)), diff(u(&[4, 5], 31)), diff(u(&[4], 32))],
            |t, x| t.linear(x[0], x[1], Some(x[2])).unwrap()
        ),
        gradcheck!(
            "linear_nobias",
            vec![diff(u(&[1, 6], 33)), diff(u(&[2, 6], 34))],
            |t, x| t.linear(x[0], x[1], None).unwrap()
        ),
    ]
}

fn feature_and_mask(seed: u64) -> Vec<Input> {
    let mut r = super::rng(seed);
    vec![
        diff(super::uniform(&[1, 4, 6, 6], &mut r, -1.0, 2.0)),
        fixed(super::mask(6, 6, &mut r, 0.4, 3)),
    ]
}

pub fn statistics_cases() -> Vec<Outcome> {
    vec![
        gradcheck!("stats_masked", feature_and_mask(35), |t, x| {
            t.masked_stats(x[0], x[1], StatsMode::Masked).unwrap()
        }),
        gradcheck!("stats_zero", feature_and_mask(36), |t, x| {
            t.masked_stats(x[0], x[1], StatsMode::ZeroFilled).unwrap()
        }),
        gradcheck!("adain_masked", feature_and_mask(37), |t, x| {
            t.adain(x[0], x[1], 1e-5, StatsMode::Masked).unwrap().0
        }),
        gradcheck!("adain_zero", feature_and_mask(38), |t, x| {
            t.adain(x[0], x[1], 1e-5, StatsMode::ZeroFilled).unwrap().0
        }),
    ]
}

pub fn bce_cases() -> Vec<Outcome> {
    [1.0, 0.0, 0.3]
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            let p = super::uniform(&[1], &mut super::rng(40 + i as u64), 0.05, 0.95);
            gradcheck!(&format!("bce{i}"), vec![diff(p)], |t, x| t.bce(x[0], label).unwrap())
        })
        .collect()
}

/// conv, relu, pool, adain, upsample, gap, linear, sigmoid in one graph.
pub fn composed_case() -> Outcome {
    let mut r = super::rng(50);
    let inputs = vec![
        diff(super::uniform(&[1, 2, 8, 8], &mut r, 0.0, 1.0)),
        diff(super::uniform(&[3, 2, 3, 3], &mut r, -0.5, 0.5)),
        fixed(super::mask(4, 4, &mut r, 0.4, 3)),
        diff(super::uniform(&[2, 3], &mut r, -1.0, 1.0)),
    ];
    gradcheck!("composed", inputs, |t, x| {
        let c = t.conv2d(x[0], x[1], None, 1, 1).unwrap();
        let a = t.relu(c);
        let p = t.maxpool2x2(a).unwrap();
        let h = t.adain(p, x[2], 1e-5, StatsMode::Masked).unwrap().0;
        let up = t.upsample_bilinear(h, 2).unwrap();
        let g = t.global_avg_pool(up).unwrap();
        let l = t.linear(g, x[3], None).unwrap();
        t.sigmoid(l)
    })
}

/// Every differentiable op.
pub fn all_op_cases() -> Vec<Outcome> {
    let mut all = conv_cases();
    all.extend(activation_cases());
    all.extend(resampling_cases());
    all.extend(plumbing_cases());
    all.extend(elementwise_cases());
    all.extend(linear_cases());
    all.extend(statistics_cases());
    all.extend(bce_cases());
    all.push(composed_case());
    all
}

fn micro_loss<T: Scalar>(
    model: &Harmonizer<T>,
    composite: &Tensor<f32>,
    mask: &Tensor<f32>,
    labels: [f64; 3],
    grads: bool,
) -> (f64, BTreeMap<String, Vec<T>>) {
    let mut tape = Tape::<T>::new();
    let mut fw = Forward::new(&mut tape, model, &composite.cast(), &mask.cast(), Trainable::All).unwrap();
    let loss = sample_objective(&mut tape, &mut fw, Some(labels)).unwrap();
    let value = tape.value(loss.all).item().to_f64_lossy();
    if !grads {
        return (value, Default::default());
    }
    tape.backward(loss.all).unwrap();
    (value, fw.params.grads(&tape))
}

/// Full objective of the base-width-4 network on a 16x16 input, two probes
/// per parameter tensor.
pub fn micro_network_case() -> Outcome {
    let cfg = HarmonizerConfig::desk(4, 16);
    let mut model = Harmonizer::new(cfg, 3).unwrap();
    let mut r = super::rng(60);
    // Zero-initialized biases put dead channels exactly on a ReLU kink.
    for (name, t) in model.params.iter_mut() {
        if name.ends_with(".b") {
            *t = super::uniform(t.shape(), &mut r, -0.1, 0.1);
        }
    }
    let composite: Tensor = super::uniform(&[1, 3, 16, 16], &mut r, 0.0, 1.0);
    let mask = super::rect_mask(16, 4, 5, 8, 6);
    let labels = [0.0, 1.0, 1.0];

    let (_, analytic) = micro_loss(&model, &composite, &mask, labels, true);
    let mut m64 = model.cast::<f64>();
    let names: Vec<String> = m64.params.keys().cloned().collect();
    let mut out = Outcome {
        name: "micro_network".into(),
        probes: 0,
        worst: 0.0,
        detail: String::new(),
    };
    for (i, name) in names.iter().enumerate() {
        let g = &analytic[name];
        for j in 0..2 {
            let idx = (i * 7919 + j * 104_729) % g.len();
            let orig = m64.params[name].data()[idx];
            m64.params.get_mut(name).unwrap().data_mut()[idx] = orig + NET_STEP;
            let (up, _) = micro_loss(&m64, &composite, &mask, labels, false);
            m64.params.get_mut(name).unwrap().data_mut()[idx] = orig - NET_STEP;
            let (down, _) = micro_loss(&m64, &composite, &mask, labels, false);
            m64.params.get_mut(name).unwrap().data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * NET_STEP);
            let a = g[idx] as f64;
            let e = rel_err(a, numeric);
            if e >= out.worst {
                out.worst = e;
                out.detail = format!("{name}[{idx}] analytic {a:.8e} numeric {numeric:.8e} rel err {e:.3e}");
            }
            out.probes += 1;
        }
    }
    out
}
