use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ssvos::data::{self, Outputs, Sequence, SyntheticSpec};
use ssvos::gradcheck::{gradcheck_suite, SUITE_TOL};
use ssvos::metrics::{evaluate_sequence, selftest};
use ssvos::pipeline::{infer_sequence, train_toy_with, Model, TrainConfig};
use ssvos::{EngineConfig, Error, ModelConfig};

#[derive(Parser)]
#[command(name = "ssvos", version, about = "Semi-supervised video object segmentation at toy scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Segment a sequence directory given its first-frame annotation.
    Infer(InferArgs),
    /// Score predicted masks against ground truth.
    Eval(EvalArgs),
    /// Train on generated sequences and write a checkpoint.
    TrainToy(TrainArgs),
    /// Generate a synthetic sequence directory.
    Synth(SynthArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

/// Engine settings; flags override the config file.
#[derive(Args)]
struct EngineArgs {
    /// `key=value` engine config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mem_interval: Option<usize>,
    #[arg(long)]
    mem_cap: Option<usize>,
    /// Comma-separated input scales, e.g. `1.0,1.5`.
    #[arg(long)]
    scales: Option<String>,
    #[arg(long)]
    flip_fusion: Option<bool>,
    #[arg(long)]
    point_count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl EngineArgs {
    fn resolve(&self) -> ssvos::Result<EngineConfig> {
        let mut cfg = match &self.config {
            Some(p) => EngineConfig::from_file(p)?,
            None => EngineConfig::default(),
        };
        let flags = [
            ("mem_interval", self.mem_interval.map(|v| v.to_string())),
            ("mem_cap", self.mem_cap.map(|v| v.to_string())),
            ("scales", self.scales.clone()),
            ("flip_fusion", self.flip_fusion.map(|v| v.to_string())),
            ("point_count", self.point_count.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.set(k, &v)?;
            }
        }
        cfg.apply_env()?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct InferArgs {
    /// Sequence directory with `frames/` and `annotation/00000.pgm`.
    #[arg(long)]
    seq: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Skip writing colour overlays.
    #[arg(long)]
    no_overlays: bool,
    /// Write the memory debug log to `memlog.jsonl`.
    #[arg(long)]
    memlog: bool,
    #[command(flatten)]
    engine: EngineArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of predicted `%05d.pgm` masks (or one holding `masks/`).
    #[arg(long, required_unless_present = "selftest")]
    pred: Option<PathBuf>,
    /// Directory of ground-truth `%05d.pgm` masks.
    #[arg(long, required_unless_present = "selftest")]
    gt: Option<PathBuf>,
    /// Recompute the published leaderboard rows instead.
    #[arg(long)]
    selftest: bool,
    /// Also write the report to this file.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// `key=value` file mixing generator keys, training keys, `sequences`
    /// and `model` (`default` or `tiny`).
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    iters: Option<usize>,
    /// Number of generated training sequences, seeded consecutively.
    #[arg(long)]
    sequences: Option<usize>,
    /// Loss curve file, one value per line; defaults to `<out>.loss.txt`.
    #[arg(long)]
    loss_curve: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Print the loss every this many iterations; 0 is silent.
    #[arg(long, default_value_t = 100)]
    log_every: usize,
}

#[derive(Args)]
struct SynthArgs {
    /// `key=value` generator spec; defaults apply when absent.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// A failure with its exit code: 1 for bad input, 2 for internal errors.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure { code: if e.is_input_error() { 1 } else { 2 }, message: e.to_string() }
    }
}

fn input_failure(message: String) -> Failure {
    Failure { code: 1, message }
}

fn read_text(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| input_failure(format!("{}: {e}", path.display())))
}

fn run_infer(a: &InferArgs) -> Result<(), Failure> {
    let cfg = a.engine.resolve()?;
    let seq = data::load_sequence(&a.seq)?;
    for w in &seq.warnings {
        eprintln!("warning: {w}");
    }
    let model = Model::load(&a.checkpoint)?;
    let out = infer_sequence(&model, &seq.frames, &seq.first_mask, &cfg)?;
    let labels: Vec<_> = out.results.iter().map(|r| r.labels.clone()).collect();
    let report = match &seq.gt {
        Some(gt) => {
            let r = evaluate_sequence(&labels, gt, &seq.first_mask.labels())?;
            println!("J&F {}  J {}  F {}", r.display.jf, r.display.j, r.display.f);
            Some(serde_json::to_value(&r).map_err(|e| Failure { code: 2, message: e.to_string() })?)
        }
        None => None,
    };
    let restored: Vec<_> = labels.iter().map(|m| seq.restore_ids(m)).collect();
    data::save_outputs(
        &a.out,
        &Outputs {
            masks: &restored,
            frames: (!a.no_overlays).then_some(seq.frames.as_slice()),
            report: report.as_ref(),
            memlog: a.memlog.then_some(out.log.as_str()),
        },
    )?;
    println!("wrote {} masks to {}", restored.len(), a.out.display());
    Ok(())
}

fn run_eval(a: &EvalArgs) -> Result<(), Failure> {
    if a.selftest {
        let rows = selftest();
        for r in &rows {
            println!("J {:.2}  F {:.2}  J&F {} (expected {})  {}", r.j, r.f, r.computed, r.expected, if r.pass { "ok" } else { "MISMATCH" });
        }
        if rows.iter().all(|r| r.pass) {
            println!("PASS");
            return Ok(());
        }
        return Err(Failure { code: 2, message: "leaderboard self-check failed".into() });
    }
    let (pred_dir, gt_dir) = (a.pred.as_ref().expect("clap requires pred"), a.gt.as_ref().expect("clap requires gt"));
    let pred_dir = if pred_dir.join("masks").is_dir() { pred_dir.join("masks") } else { pred_dir.clone() };
    let preds = data::load_masks(&pred_dir)?;
    let gts = data::load_masks(gt_dir)?;
    let Some(first) = gts.first() else {
        return Err(input_failure(format!("{} holds no masks", gt_dir.display())));
    };
    if preds.len() != gts.len() {
        return Err(input_failure(format!("{} predicted masks for {} ground-truth masks", preds.len(), gts.len())));
    }
    if let Some(t) = (0..preds.len()).find(|&t| preds[t].hw() != gts[t].hw()) {
        return Err(input_failure(format!("frame {t}: prediction {:?} vs ground truth {:?}", preds[t].hw(), gts[t].hw())));
    }
    let report = evaluate_sequence(&preds, &gts, &first.labels())?;
    let text = serde_json::to_string_pretty(&report).map_err(|e| Failure { code: 2, message: e.to_string() })?;
    if let Some(p) = &a.report {
        std::fs::write(p, format!("{text}\n")).map_err(|e| input_failure(format!("{}: {e}", p.display())))?;
    }
    println!("{text}");
    Ok(())
}

fn run_train(a: &TrainArgs) -> Result<(), Failure> {
    let text = match &a.spec {
        Some(p) => read_text(p)?,
        None => String::new(),
    };
    let (mut spec, rest) = SyntheticSpec::from_key_values_lenient(&text)?;
    let mut cfg = TrainConfig::default();
    let mut model_cfg = ModelConfig::default();
    let mut sequences = 1usize;
    for (k, v) in rest {
        match k.as_str() {
            "sequences" => sequences = v.parse().map_err(|_| input_failure(format!("sequences: cannot parse {v:?}")))?,
            "model" => model_cfg = ModelConfig::preset(&v)?,
            _ => cfg.set(&k, &v)?,
        }
    }
    if let Some(n) = a.iters {
        cfg.iters = n;
    }
    if let Some(n) = a.sequences {
        sequences = n;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Ok(v) = std::env::var("SSVOS_SEED") {
        cfg.seed = v.parse().map_err(|_| input_failure(format!("SSVOS_SEED: cannot parse {v:?}")))?;
    }
    if sequences == 0 {
        return Err(input_failure("sequences must be at least 1".into()));
    }
    let base_seed = spec.seed;
    let mut dataset: Vec<Sequence> = Vec::with_capacity(sequences);
    for i in 0..sequences {
        spec.seed = base_seed.wrapping_add(i as u64);
        dataset.push(data::synth_generate(&spec)?);
    }
    let mut model = Model::new(model_cfg, cfg.seed);
    let report = train_toy_with(&mut model, &dataset, &cfg, |it, loss| {
        if a.log_every > 0 && it % a.log_every == 0 {
            eprintln!("iter {it:>6}  loss {loss:.5}");
        }
    })?;
    model.save(&a.out)?;
    let curve = a.loss_curve.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".loss.txt");
        PathBuf::from(p)
    });
    let lines: String = report.losses.iter().map(|l| format!("{l}\n")).collect();
    std::fs::write(&curve, lines).map_err(|e| input_failure(format!("{}: {e}", curve.display())))?;
    println!(
        "trained {} iterations on {} sequences; final loss {:.5}; checkpoint {}",
        report.losses.len(),
        sequences,
        report.losses.last().copied().unwrap_or(f64::NAN),
        a.out.display()
    );
    Ok(())
}

fn run_synth(a: &SynthArgs) -> Result<(), Failure> {
    let mut spec = match &a.spec {
        Some(p) => {
            let (spec, rest) = SyntheticSpec::from_key_values_lenient(&read_text(p)?)?;
            if let Some((k, _)) = rest.first() {
                return Err(input_failure(format!("unknown generator setting {k:?}")));
            }
            spec
        }
        None => SyntheticSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Ok(v) = std::env::var("SSVOS_SEED") {
        spec.seed = v.parse().map_err(|_| input_failure(format!("SSVOS_SEED: cannot parse {v:?}")))?;
    }
    let seq = data::synth_generate(&spec)?;
    data::save_sequence(&a.out, &seq)?;
    println!("wrote {} frames to {}", seq.frames.len(), a.out.display());
    Ok(())
}

fn run_gradcheck(a: &GradcheckArgs) -> Result<(), Failure> {
    let rows = gradcheck_suite(a.seed)?;
    for r in &rows {
        println!("{:<32} {:.3e}  {}", r.name, r.max_rel_err, if r.pass() { "ok" } else { "FAIL" });
    }
    let worst = rows.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    if rows.iter().all(|r| r.pass()) {
        println!("PASS: {} checks, max relative error {worst:.3e} < {SUITE_TOL:e}", rows.len());
        Ok(())
    } else {
        Err(Failure { code: 2, message: format!("gradient check failed: max relative error {worst:.3e}") })
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
    let result = match &cli.command {
        Command::Infer(a) => run_infer(a),
        Command::Eval(a) => run_eval(a),
        Command::TrainToy(a) => run_train(a),
        Command::Synth(a) => run_synth(a),
        Command::Gradcheck(a) => run_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
