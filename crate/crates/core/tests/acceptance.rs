//! Acceptance checks. Runs as a plain binary so every criterion prints one
//! PASS/FAIL line; exits non-zero if any fails.

#![allow(clippy::needless_range_loop)]

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{grad, oracle};
use propih_core::adain::{adain_with, StatsMode};
use propih_core::data::{derive_labels, synth_dataset, AnnotationRecord};
use propih_core::eval::{bt_fit, count_flops, exit_histogram, PairwiseCounts};
use propih_core::harmonet::{decide_exit, load_model, save_model, Forward, Trainable};
use propih_core::tensor::Tape;
use propih_core::trainer::{train_exit_head_only, ExitHeadConfig, TrainConfig, Trainer};
use propih_core::{par, Harmonizer, HarmonizerConfig, Tensor};
use rand::Rng;

type Criterion = (&'static str, fn() -> Verdict);

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn within(limit: Duration, took: Duration) -> bool {
    took <= limit
}

fn adain_exactness() -> Verdict {
    let start = Instant::now();
    let mut r = common::rng(101);
    let mut worst_mean = 0.0f64;
    let mut worst_std = 0.0f64;
    let mut bg_changed = 0usize;
    for _ in 0..1000 {
        let c = r.random_range(1..=8);
        let (h, w) = (r.random_range(2..=12), r.random_range(2..=12));
        let hw = h * w;
        let mut x: Tensor = common::uniform(&[1, c, h, w], &mut r, -1.0, 1.0);
        for ch in 0..c {
            let (scale, shift) = (r.random_range(0.1..2.0f32), r.random_range(-2.0..2.0f32));
            for v in &mut x.data_mut()[ch * hw..(ch + 1) * hw] {
                *v = *v * scale + shift;
            }
        }
        let p = r.random_range(0.05..0.95);
        let m: Tensor = common::mask(h, w, &mut r, p, 2);
        let bg = m.map(|v| 1.0 - v);
        let y = adain_with(&x, &m, &bg, 0.0, StatsMode::Masked).unwrap().features;
        let md: Vec<f64> = m.data().iter().map(|&v| v as f64).collect();
        let bd: Vec<f64> = bg.data().iter().map(|&v| v as f64).collect();
        for ch in 0..c {
            let plane = ch * hw..(ch + 1) * hw;
            let xs: Vec<f64> = x.data()[plane.clone()].iter().map(|&v| v as f64).collect();
            let ys: Vec<f64> = y.data()[plane.clone()].iter().map(|&v| v as f64).collect();
            let (fm, fs) = oracle::region_stats(&ys, &md);
            let (bm, bs) = oracle::region_stats(&xs, &bd);
            worst_mean = worst_mean.max((fm - bm).abs());
            worst_std = worst_std.max((fs - bs).abs());
            for (i, &mv) in m.data().iter().enumerate() {
                if mv == 0.0 && x.data()[plane.start + i].to_bits() != y.data()[plane.start + i].to_bits() {
                    bg_changed += 1;
                }
            }
        }
    }
    let took = start.elapsed();
    verdict(
        worst_mean < 1e-5 && worst_std < 1e-5 && bg_changed == 0 && within(Duration::from_secs(5), took),
        format!(
            "1000 instances, max |mean diff| {worst_mean:.2e}, max |std diff| {worst_std:.2e}, \
             changed bg values {bg_changed}, {took:.2?}"
        ),
    )
}

fn gradient_correctness() -> Verdict {
    let start = Instant::now();
    let mut cases = grad::all_op_cases();
    cases.push(grad::micro_network_case());
    let took = start.elapsed();
    let failed: Vec<String> = cases
        .iter()
        .filter(|c| !c.ok())
        .map(|c| format!("{} ({})", c.name, c.detail))
        .collect();
    let worst = cases.iter().map(|c| c.worst).fold(0.0, f64::max);
    let min_probes = cases.iter().map(|c| c.probes).min().unwrap_or(0);
    verdict(
        failed.is_empty() && within(Duration::from_secs(60), took),
        format!(
            "{} checks, min {min_probes} probes each, worst rel err {worst:.2e}, {took:.2?}{}",
            cases.len(),
            if failed.is_empty() {
                String::new()
            } else {
                format!(", failed: {}", failed.join("; "))
            }
        ),
    )
}

fn architecture() -> Verdict {
    let start = Instant::now();
    let cfg = HarmonizerConfig::desk(64, 64);
    let model = Harmonizer::new(cfg.clone(), 0).unwrap();
    let img: Tensor = common::uniform(&[1, 3, 64, 64], &mut common::rng(7), 0.0, 1.0);
    let mask = common::rect_mask(64, 16, 20, 24, 30);
    let mut tape = Tape::new();
    let mut fw = Forward::new(&mut tape, &model, &img, &mask, Trainable::None).unwrap();
    let images = fw.run_all(&mut tape).unwrap();
    let mut problems = Vec::new();
    for k in 0..4 {
        for (what, v) in [("decoded", fw.decoded[k]), ("bottom", fw.bottom[k])] {
            if tape.shape(v) != [1, 16, 64, 64] {
                problems.push(format!("stage {} {what} {:?}", k + 1, tape.shape(v)));
            }
        }
        if tape.shape(images[k]) != [1, 3, 64, 64] {
            problems.push(format!("stage {} output {:?}", k + 1, tape.shape(images[k])));
        }
    }
    for k in 2..=4 {
        let first = model.params[&format!("fus.s{k}.b1.c1.w")].shape();
        let last = model.params[&format!("fus.s{k}.b{}.c2.w", cfg.fusion_blocks())].shape();
        if first[1] != 32 || last[0] != 16 {
            problems.push(format!("stage {k} fusion {first:?} .. {last:?}"));
        }
    }
    let took = start.elapsed();
    verdict(
        problems.is_empty() && within(Duration::from_secs(1), took),
        format!(
            "16-channel 64x64 decoded and bottom maps, 4 RGB outputs, fusion 32->16; {took:.2?}{}",
            if problems.is_empty() {
                String::new()
            } else {
                format!(", mismatches: {}", problems.join("; "))
            }
        ),
    )
}

fn earliest_above(scores: &[f32; 3], t: f32) -> usize {
    for (i, &s) in scores.iter().enumerate() {
        if s > t {
            return i + 1;
        }
    }
    4
}

fn exit_decision() -> Verdict {
    let start = Instant::now();
    let grid: Vec<f32> = (1..=9).map(|i| i as f32 / 10.0).collect();
    let mut cases = 0usize;
    let mut wrong = 0usize;
    for &a in &grid {
        for &b in &grid {
            for &c in &grid {
                let s = [a, b, c];
                cases += 1;
                wrong += usize::from(decide_exit(&s, 0.5) != earliest_above(&s, 0.5));
            }
        }
    }
    let mut r = common::rng(4);
    for _ in 0..10_000 {
        let s = [r.random::<f32>(), r.random::<f32>(), r.random::<f32>()];
        cases += 1;
        wrong += usize::from(decide_exit(&s, 0.5) != earliest_above(&s, 0.5));
    }
    let took = start.elapsed();
    verdict(
        wrong == 0 && within(Duration::from_secs(1), took),
        format!("{cases} score triples, {wrong} disagreements, {took:.2?}"),
    )
}

fn training_smoke() -> Verdict {
    let start = Instant::now();
    let data = synth_dataset(16, 64, 1).unwrap();
    let cfg = TrainConfig {
        lr: 1e-4,
        batch_size: 4,
        steps: 200,
        seed: 5,
        model: HarmonizerConfig::desk(8, 64),
        ..TrainConfig::default()
    };
    let run = || {
        let mut t = Trainer::new(cfg.clone()).unwrap();
        let log = t.run(&data, 200, |_, _, _| Ok(())).unwrap();
        (t.model, log)
    };
    let (model_a, log_a) = run();
    let first_took = start.elapsed();
    let (model_b, log_b) = run();
    let head = log_a[..20].iter().map(|r| r.all).sum::<f64>() / 20.0;
    let tail = log_a[180..].iter().map(|r| r.all).sum::<f64>() / 20.0;
    let ratio = tail / head;
    let identical = log_a == log_b && model_a.params.iter().all(|(k, v)| model_b.params[k].bit_eq(v));
    verdict(
        ratio < 0.7 && identical && within(Duration::from_secs(300), first_took),
        format!(
            "mean loss steps 1-20 {head:.4}, steps 181-200 {tail:.4}, ratio {ratio:.3}, \
             second run identical: {identical}, {first_took:.1?} per run"
        ),
    )
}

fn exit_head_overfit() -> Verdict {
    let start = Instant::now();
    let data = synth_dataset(32, 64, 0).unwrap();
    let ann: Vec<AnnotationRecord> = data
        .iter()
        .enumerate()
        .map(|(i, s)| AnnotationRecord {
            id: s.id.clone(),
            exit_stage: (i * 7 + 3) % 4 + 1,
        })
        .collect();
    let mut model = Harmonizer::new(HarmonizerConfig::desk(64, 64), 0).unwrap();
    let cfg = ExitHeadConfig {
        steps: 500,
        ..ExitHeadConfig::default()
    };
    let report = train_exit_head_only(&mut model, &data, &ann, &cfg).unwrap();
    let took = start.elapsed();
    verdict(
        report.label_accuracy >= 0.95 && report.losses.len() <= 500 && within(Duration::from_secs(120), took),
        format!(
            "32 samples, {} steps, label accuracy {:.3}, exit accuracy {:.3}, final bce {:.4}, {took:.1?}",
            report.losses.len(),
            report.label_accuracy,
            report.exit_accuracy,
            report.losses.last().copied().unwrap_or(f64::NAN)
        ),
    )
}

fn exit_labels() -> Verdict {
    let want = [[1.0, 1.0, 1.0], [0.0, 1.0, 1.0], [0.0, 0.0, 1.0], [0.0, 0.0, 0.0]];
    let got: Vec<_> = (1..=4).map(|k| derive_labels(k).unwrap()).collect();
    let pass = got == want && derive_labels(0).is_err() && derive_labels(5).is_err();
    verdict(pass, format!("stages 1-4 -> {got:?}"))
}

fn exit_distribution() -> Verdict {
    let mut stages = Vec::new();
    for (k, n) in [(1, 21), (2, 223), (3, 474), (4, 282)] {
        stages.extend(std::iter::repeat_n(k, n));
    }
    let h = exit_histogram(&stages).unwrap();
    let f = h.fractions.unwrap();
    let want = [0.021, 0.223, 0.474, 0.282];
    verdict(f == want && h.counts == [21, 223, 474, 282], format!("fractions {f:?}"))
}

fn names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("m{i}")).collect()
}

fn bradley_terry() -> Verdict {
    let start = Instant::now();
    let mut r = common::rng(9);

    let mut decreases = 0usize;
    for _ in 0..100 {
        let n = r.random_range(2..=6);
        let wins: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| if i == j { 0.0 } else { r.random_range(1..50) as f64 })
                    .collect()
            })
            .collect();
        let fit = bt_fit(&PairwiseCounts::new(names(n), wins).unwrap(), 1e-12, 10_000).unwrap();
        decreases += fit
            .log_likelihood
            .windows(2)
            .filter(|w| w[1] < w[0] - 1e-12 * w[0].abs())
            .count();
    }

    let two = PairwiseCounts::new(names(2), vec![vec![0.0, 90.0], vec![10.0, 0.0]]).unwrap();
    let fit = bt_fit(&two, 1e-14, 10_000).unwrap();
    let gap_err = (fit.scores[0] - fit.scores[1] - 9f64.ln()).abs();

    let planted = [0.9, 0.3, -0.2, -1.0];
    let mean = planted.iter().sum::<f64>() / 4.0;
    let mut wins = vec![vec![0.0; 4]; 4];
    for i in 0..4 {
        for j in i + 1..4 {
            let p = 1.0 / (1.0 + (planted[j] - planted[i]).exp());
            let w = (0..10_000).filter(|_| r.random_bool(p)).count() as f64;
            wins[i][j] = w;
            wins[j][i] = 10_000.0 - w;
        }
    }
    let fit = bt_fit(&PairwiseCounts::new(names(4), wins).unwrap(), 1e-12, 10_000).unwrap();
    let recovered_err = (0..4)
        .map(|i| (fit.scores[i] - (planted[i] - mean)).abs())
        .fold(0.0, f64::max);
    let ordered = fit.ranking() == [0, 1, 2, 3];
    let took = start.elapsed();
    verdict(
        decreases == 0 && gap_err < 1e-6 && recovered_err < 0.05 && ordered && within(Duration::from_secs(10), took),
        format!(
            "log-likelihood decreases {decreases}, 90/10 gap error {gap_err:.1e}, \
             planted recovery error {recovered_err:.4}, ordering exact: {ordered}, {took:.2?}"
        ),
    )
}

fn micro_configs() -> Vec<HarmonizerConfig> {
    let mut v = vec![
        HarmonizerConfig::desk(4, 16),
        HarmonizerConfig::desk(8, 16),
        HarmonizerConfig::desk(4, 32),
    ];
    let mut c = HarmonizerConfig::desk(8, 24);
    c.single_fusion_block = true;
    c.gru_hidden = 5;
    v.push(c);
    v
}

fn flops_counter() -> Verdict {
    let mut mismatches = Vec::new();
    let mut monotone = true;
    for cfg in micro_configs() {
        let model = Harmonizer::new(cfg.clone(), 0).unwrap();
        let (ops, _, _) = oracle::network_ops(&model);
        let report = count_flops(&cfg).unwrap();
        if report.cumulative != ops {
            mismatches.push(format!(
                "bw {} size {}: {:?} vs {ops:?}",
                cfg.base_width, cfg.image_size, report.cumulative
            ));
        }
        monotone &= report.cumulative.windows(2).all(|w| w[0] < w[1]);
    }
    let full = count_flops(&HarmonizerConfig::desk(64, 256)).unwrap();
    monotone &= full.cumulative.windows(2).all(|w| w[0] < w[1]);
    let g: Vec<String> = full
        .cumulative
        .iter()
        .map(|&c| format!("{:.2}", c as f64 / 1e9))
        .collect();
    let total = full.cumulative[3] as f64;
    let in_band = (1e9..=1e11).contains(&total);
    verdict(
        mismatches.is_empty() && monotone && in_band,
        format!(
            "{} micro configs match the op-counting walk, cumulative GFLOPs at 256x256 [{}] vs 23.45 reference \
             (ratio {:.2}){}",
            micro_configs().len(),
            g.join(", "),
            total / 23.45e9,
            if mismatches.is_empty() {
                String::new()
            } else {
                format!(", mismatches: {}", mismatches.join("; "))
            }
        ),
    )
}

fn determinism_and_persistence() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ptw");
    let model = Harmonizer::new(HarmonizerConfig::desk(8, 32), 12).unwrap();
    save_model(&model, &path).unwrap();
    let back = load_model(&path).unwrap();
    let round_trip = back.config == model.config
        && model.params.iter().all(|(k, v)| back.params[k].bit_eq(v))
        && back.to_ptw().to_bytes().unwrap() == std::fs::read(&path).unwrap();

    let s = &synth_dataset(1, 32, 3).unwrap()[0];
    let a = model.forward(&s.composite, &s.fg_mask).unwrap();
    let b = back.forward(&s.composite, &s.fg_mask).unwrap();
    let c = par::single_threaded(|| model.forward(&s.composite, &s.fg_mask).unwrap());
    let bits = |r: &propih_core::harmonet::HarmonizeResult| -> Vec<u32> {
        r.stage_outputs
            .iter()
            .flat_map(|o| o.image.data().iter().map(|v| v.to_bits()))
            .chain(r.exit_scores.iter().map(|v| v.to_bits()))
            .collect()
    };
    let forward = bits(&a) == bits(&b) && bits(&a) == bits(&c);

    let resume = par::single_threaded(|| {
        let data = synth_dataset(6, 16, 11).unwrap();
        let cfg = TrainConfig {
            lr: 1e-3,
            batch_size: 2,
            steps: 6,
            seed: 3,
            model: HarmonizerConfig::desk(4, 16),
            ..TrainConfig::default()
        };
        let mut straight = Trainer::new(cfg.clone()).unwrap();
        let full = straight.run(&data, 6, |_, _, _| Ok(())).unwrap();
        let ck = tempfile::tempdir().unwrap();
        let mut first = Trainer::new(cfg).unwrap();
        first.run(&data, 3, |_, _, _| Ok(())).unwrap();
        first.save_checkpoint(ck.path()).unwrap();
        let mut resumed = Trainer::load_checkpoint(ck.path()).unwrap();
        let tail = resumed.run(&data, 3, |_, _, _| Ok(())).unwrap();
        tail == full[3..]
            && straight.optim == resumed.optim
            && straight
                .model
                .params
                .iter()
                .all(|(k, v)| resumed.model.params[k].bit_eq(v))
    });
    verdict(
        round_trip && forward && resume,
        format!("save/load bit-exact: {round_trip}, forward bit-identical: {forward}, resume bit-exact: {resume}"),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 11] = [
        ("adain exactness", adain_exactness),
        ("gradient correctness", gradient_correctness),
        ("architecture arithmetic", architecture),
        ("exit decision", exit_decision),
        ("training smoke", training_smoke),
        ("exit-head overfit", exit_head_overfit),
        ("exit labels", exit_labels),
        ("exit distribution", exit_distribution),
        ("bradley-terry", bradley_terry),
        ("flops counter", flops_counter),
        ("determinism and persistence", determinism_and_persistence),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let v = run();
        failed += usize::from(!v.pass);
        println!(
            "{} [{:>2}] {name}: {}",
            if v.pass { "PASS" } else { "FAIL" },
            i + 1,
            v.detail
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
