use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use propih_core::data::{self, AnnotationRecord};
use propih_core::eval::{self, PairwiseCounts};
use propih_core::harmonet::{load_model, save_model, InferMode};
use propih_core::trainer::{train_exit_head_only, ExitHeadConfig, TrainConfig, Trainer};
use propih_core::{par, Error, Harmonizer, HarmonizerConfig, Result};

#[derive(Parser)]
#[command(
    name = "propih",
    version,
    about = "Progressive painterly image harmonization with early exit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Harmonize one composite and write the exit-stage image(s).
    Harmonize(HarmonizeArgs),
    /// Train a model on a dataset manifest.
    Train(TrainArgs),
    /// Evaluation reports.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
}

#[derive(Args)]
struct HarmonizeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    composite: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Write all four stage images.
    #[arg(long, conflicts_with = "force_stage")]
    all_stages: bool,
    /// Skip the exit head and emit this stage.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=4))]
    force_stage: Option<u8>,
    #[arg(long, default_value_t = 0.5)]
    threshold: f32,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    annotations: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Loss log (JSON lines); defaults to `<out>.log.jsonl`.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Resume from a checkpoint directory.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Steps of the exit-head-only phase run after joint training.
    #[arg(long, default_value_t = 0)]
    exit_head_steps: usize,
    #[arg(long, default_value_t = 0.1)]
    exit_head_lr: f64,
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Exit-stage histogram of an annotation file.
    ExitDist(ExitDistArgs),
    /// Bradley-Terry ranking from pairwise counts.
    BtRank(BtArgs),
    /// Analytic FLOPs per exit stage.
    Flops(FlopsArgs),
    /// Wall-clock time per exit stage.
    Timing(TimingArgs),
}

#[derive(Args)]
struct ExitDistArgs {
    /// JSON lines of {"id", "exit_stage"}.
    #[arg(long)]
    annotations: PathBuf,
    /// Treat the file as per-annotator votes and aggregate by plurality.
    #[arg(long)]
    votes: bool,
    #[arg(long)]
    pretty: bool,
}

#[derive(Args)]
struct BtArgs {
    /// CSV with header method_a,method_b,wins_a,wins_b.
    #[arg(long)]
    counts: PathBuf,
    #[arg(long, default_value_t = eval::DEFAULT_TOL)]
    tol: f64,
    #[arg(long, default_value_t = eval::DEFAULT_MAX_ITER)]
    max_iter: usize,
    #[arg(long)]
    pretty: bool,
}

#[derive(Args)]
struct FlopsArgs {
    /// `default`, or a JSON model config (a training config's `model` is used).
    #[arg(long, default_value = "default")]
    config: String,
    /// Annotations whose exit distribution weights the expected cost.
    #[arg(long)]
    annotations: Option<PathBuf>,
    #[arg(long)]
    pretty: bool,
}

#[derive(Args)]
struct TimingArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 10)]
    reps: usize,
    /// Use at most this many samples.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    pretty: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

fn print_json(v: &Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn harmonize(a: HarmonizeArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&a.threshold) {
        return Err(Error::InvalidArgument(format!(
            "threshold {} outside [0, 1]",
            a.threshold
        )));
    }
    let model = load_model(&a.model)?;
    let composite = data::load_image(&a.composite)?;
    let mask = data::load_mask(&a.mask)?;
    let mode = match (a.force_stage, a.all_stages) {
        (Some(k), _) => InferMode::Force(k as usize),
        (None, true) => InferMode::AllStages { threshold: a.threshold },
        (None, false) => InferMode::EarlyExit { threshold: a.threshold },
    };
    let result = model.infer(&composite, &mask, mode)?;
    fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    let mut written = Vec::new();
    for o in &result.stage_outputs {
        let p = a.out_dir.join(format!("stage_{}.ppm", o.stage));
        data::save_image(&o.image, &p)?;
        written.push(p.display().to_string());
    }
    let summary = json!({
        "predicted_exit": result.predicted_exit,
        "exit_scores": result.exit_scores,
        "forced": result.forced,
        "warnings": result.warnings,
    });
    write_json(&a.out_dir.join("result.json"), &summary)?;
    let mut out = summary;
    out["images"] = json!(written);
    print_json(&out);
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = TrainConfig::load(&a.config)?;
    let dataset = data::load_dataset(&a.data)?;
    let ann_path = a.annotations.clone().or_else(|| cfg.annotations.clone());
    let annotations: Vec<AnnotationRecord> = match &ann_path {
        Some(p) => data::load_annotations(p)?,
        None => Vec::new(),
    };
    if let Some(s) = dataset.first() {
        if s.size() != cfg.model.image_size {
            return Err(Error::Config(format!(
                "dataset images are {}px but the config says image_size {}",
                s.size(),
                cfg.model.image_size
            )));
        }
    }
    cfg.annotations = ann_path;
    let mut trainer = match &a.resume {
        Some(dir) => Trainer::load_checkpoint(dir)?,
        None => Trainer::new(cfg.clone())?,
    };
    trainer.set_annotations(&annotations, &dataset)?;
    let total = cfg.total_steps(dataset.len());
    if total > 0 && dataset.is_empty() {
        return Err(Error::InvalidArgument(format!("{} lists no samples", a.data.display())));
    }
    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut s = a.out.clone().into_os_string();
        s.push(".log.jsonl");
        PathBuf::from(s)
    });
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(a.resume.is_some())
        .write(true)
        .truncate(a.resume.is_none())
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let ckpt_root = a.out.with_extension("checkpoints");
    let every = cfg.checkpoint_every;
    let remaining = total.saturating_sub(trainer.step);
    let reports = trainer.run(&dataset, remaining, |t, step, r| {
        writeln!(log, "{}", r.to_json_line(step)).map_err(|e| Error::io(&log_path, e))?;
        if every > 0 && step % every == 0 {
            t.save_checkpoint(ckpt_root.join(format!("step_{step:06}")))?;
        }
        Ok(())
    })?;
    let mut model = trainer.model;
    let mut exit_head = Value::Null;
    if a.exit_head_steps > 0 {
        let hc = ExitHeadConfig {
            lr: a.exit_head_lr,
            steps: a.exit_head_steps,
            seed: cfg.seed,
            ..ExitHeadConfig::default()
        };
        let r = train_exit_head_only(&mut model, &dataset, &annotations, &hc)?;
        exit_head = json!({
            "final_loss": r.losses.last(),
            "label_accuracy": r.label_accuracy,
            "exit_accuracy": r.exit_accuracy,
        });
    }
    save_model(&model, &a.out)?;
    print_json(&json!({
        "model": a.out.display().to_string(),
        "log": log_path.display().to_string(),
        "steps": trainer.step,
        "final_loss": reports.last().map(|r| r.all),
        "warnings": trainer.warnings,
        "exit_head": exit_head,
    }));
    Ok(())
}

fn exit_dist(a: ExitDistArgs) -> Result<()> {
    let records = if a.votes {
        let text = fs::read_to_string(&a.annotations).map_err(|e| Error::io(&a.annotations, e))?;
        data::aggregate_votes(&data::parse_votes(&text)?)?
    } else {
        data::load_annotations(&a.annotations)?
    };
    let stages: Vec<usize> = records.iter().map(|r| r.exit_stage).collect();
    let h = eval::exit_histogram(&stages)?;
    if a.pretty {
        let rows = (0..4)
            .map(|k| {
                vec![
                    (k + 1).to_string(),
                    h.counts[k].to_string(),
                    h.rounded_fractions().map_or("-".into(), |f| format!("{:.4}", f[k])),
                ]
            })
            .collect::<Vec<_>>();
        print!("{}", eval::text_table(&["stage", "count", "fraction"], &rows));
    } else {
        print_json(&json!({
            "counts": h.counts,
            "total": h.total,
            "fractions": h.rounded_fractions(),
        }));
    }
    Ok(())
}

fn bt_rank(a: BtArgs) -> Result<()> {
    let counts = PairwiseCounts::from_csv(&a.counts)?;
    let fit = eval::bt_fit(&counts, a.tol, a.max_iter)?;
    if a.pretty {
        let rows = fit
            .ranking()
            .into_iter()
            .enumerate()
            .map(|(r, i)| {
                vec![
                    (r + 1).to_string(),
                    fit.methods[i].clone(),
                    format!("{:.6}", fit.scores[i]),
                ]
            })
            .collect::<Vec<_>>();
        print!("{}", eval::text_table(&["rank", "method", "score"], &rows));
    } else {
        let ranking: Vec<&str> = fit.ranking().into_iter().map(|i| fit.methods[i].as_str()).collect();
        print_json(&json!({
            "methods": fit.methods,
            "scores": fit.scores,
            "ranking": ranking,
            "iterations": fit.iterations,
            "converged": fit.converged,
            "log_likelihood": fit.log_likelihood.last(),
        }));
    }
    Ok(())
}

fn model_config(spec: &str) -> Result<HarmonizerConfig> {
    if spec == "default" {
        return Ok(HarmonizerConfig::default());
    }
    let path = Path::new(spec);
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{spec}: {e}")))?;
    let inner = v.get("model").cloned().unwrap_or(v);
    let cfg: HarmonizerConfig = serde_json::from_value(inner).map_err(|e| Error::Config(format!("{spec}: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

fn flops(a: FlopsArgs) -> Result<()> {
    let cfg = model_config(&a.config)?;
    let report = eval::count_flops(&cfg)?;
    let expected = match &a.annotations {
        Some(p) => {
            let stages: Vec<usize> = data::load_annotations(p)?.iter().map(|r| r.exit_stage).collect();
            eval::exit_histogram(&stages)?.fractions.map(|f| report.expected(&f))
        }
        None => None,
    };
    if a.pretty {
        let rows = (0..4)
            .map(|k| {
                vec![
                    (k + 1).to_string(),
                    report.incremental[k].to_string(),
                    report.cumulative[k].to_string(),
                    format!("{:.3}", report.cumulative[k] as f64 / 1e9),
                ]
            })
            .collect::<Vec<_>>();
        print!(
            "{}",
            eval::text_table(&["exit", "incremental", "cumulative", "GFLOPs"], &rows)
        );
        println!("convention: {}", report.convention);
        if let Some(e) = expected {
            println!("expected per image: {:.3} GFLOPs", e / 1e9);
        }
    } else {
        let mut v = serde_json::to_value(&report)?;
        v["base_width"] = json!(cfg.base_width);
        v["image_size"] = json!(cfg.image_size);
        v["expected"] = json!(expected);
        print_json(&v);
    }
    Ok(())
}

fn timing(a: TimingArgs) -> Result<()> {
    if a.reps == 0 {
        return Err(Error::InvalidArgument("--reps must be >= 1".into()));
    }
    let model: Harmonizer = load_model(&a.model)?;
    let mut samples = data::load_dataset(&a.data)?;
    if let Some(n) = a.limit {
        samples.truncate(n);
    }
    let report = eval::time_stages(&model, &samples, a.reps)?;
    if a.pretty {
        let rows = report
            .stages
            .iter()
            .map(|t| {
                vec![
                    t.stage.to_string(),
                    format!("{:.3}", t.median * 1e3),
                    format!("{:.3}", t.mean * 1e3),
                    format!("{:.3}", t.min * 1e3),
                    format!("{:.3}", t.max * 1e3),
                ]
            })
            .collect::<Vec<_>>();
        print!(
            "{}",
            eval::text_table(&["exit", "median ms", "mean ms", "min ms", "max ms"], &rows)
        );
    } else {
        print_json(&serde_json::to_value(&report)?);
    }
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let samples = data::synth_dataset(a.n, a.size, a.seed)?;
    let manifest = data::save_dataset(&samples, &a.out_dir)?;
    print_json(&json!({
        "n": samples.len(),
        "size": a.size,
        "seed": a.seed,
        "manifest": manifest.display().to_string(),
    }));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Harmonize(a) => harmonize(a),
        Command::Train(a) => train(a),
        Command::Eval(EvalCommand::ExitDist(a)) => exit_dist(a),
        Command::Eval(EvalCommand::BtRank(a)) => bt_rank(a),
        Command::Eval(EvalCommand::Flops(a)) => flops(a),
        Command::Eval(EvalCommand::Timing(a)) => timing(a),
        Command::Synth(a) => synth(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    par::init_from_env();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
