//! Batch experiment front door. Every command reads explicit inputs,
//! writes its artifacts under a run directory together with the fully
//! resolved config, and is reproducible byte-for-byte given the same
//! seeds (timestamps live only in run.log).
//!
//! Exit codes: 0 success, 1 validation error, 2 numeric failure.

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use graftkit::analysis::{
    delta_report_with, locality_profile, locality_svg, BaselineConfig, HxMlpFlopConvention,
    LocalityProtocol, LocalityReport,
};
use graftkit::diffusion::{
    blob_accuracy, eval_dm_loss, sample, train, BlobDataset, NoiseSchedule, SampleConfig,
    SampleMethod, TrainConfig,
};
use graftkit::graft::{
    build_probe, capture_activations, distill_many, distill_pair, end_to_end_deviation, finetune,
    integrate, make_plan, DistillConfig, DistillJob, DistillReport, GraftPlan,
    RegressionObjective, Strategy,
};
use graftkit::model::{build_model, CaptureTarget, DiTConfig, Entry, ModelGraph, Slot};
use graftkit::operators::{OperatorConfig, TokenMixer};
use graftkit::persistence::{
    load_checkpoint, load_dataset, save_checkpoint, save_dataset, save_json,
};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser)]
#[command(name = "graftkit", version, about = "Diffusion-transformer grafting workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic blob dataset.
    GenData(GenDataArgs),
    /// Train the reference teacher model.
    TrainTeacher(ConfigArgs),
    /// Profile attention band locality along a sampling trajectory.
    Locality(LocalityArgs),
    /// Build a replacement plan.
    Plan(PlanArgs),
    /// Capture activations and distill the planned operators (stage 1).
    Distill(ConfigArgs),
    /// Plan + distill + integrate in one run.
    Graft(ConfigArgs),
    /// Finetune a grafted checkpoint on a data fraction (stage 2).
    Finetune(ConfigArgs),
    /// Convert sequential block pairs into parallel pairs.
    RewireParallel(ConfigArgs),
    /// Evaluate cost deltas of a plan on the reference geometry.
    Flops(FlopsArgs),
    /// Blob accuracy, held-out loss, and deviation of a checkpoint.
    Eval(EvalArgs),
    /// Aggregate metrics from run directories.
    Report(ReportArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config for this command; unknown keys are rejected.
    #[arg(long)]
    config: PathBuf,
    /// Run directory for outputs.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8192)]
    size: usize,
    #[serde(skip)]
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct LocalityArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long, default_value_t = 1.5)]
    cfg_scale: f64,
    #[arg(long, default_value_t = 8)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[serde(skip)]
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum SlotArg {
    Mha,
    Mlp,
}

impl From<SlotArg> for Slot {
    fn from(s: SlotArg) -> Slot {
        match s {
            SlotArg::Mha => Slot::Mha,
            SlotArg::Mlp => Slot::Mlp,
        }
    }
}

#[derive(Clone, Copy, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum StrategyArg {
    Full,
    Interleaved,
    TopLocal,
    LowLocal,
    Deep,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Strategy {
        match s {
            StrategyArg::Full => Strategy::Full,
            StrategyArg::Interleaved => Strategy::Interleaved,
            StrategyArg::TopLocal => Strategy::TopLocal,
            StrategyArg::LowLocal => Strategy::LowLocal,
            StrategyArg::Deep => Strategy::Deep,
        }
    }
}

#[derive(Args, Serialize)]
struct PlanArgs {
    #[arg(long, value_enum)]
    strategy: StrategyArg,
    #[arg(long)]
    ratio: f64,
    #[arg(long)]
    depth: usize,
    #[arg(long, value_enum)]
    slot: SlotArg,
    /// Replacement operator config as a JSON file.
    #[arg(long)]
    replacement: PathBuf,
    /// Locality report JSON (required for top/low-local strategies).
    #[arg(long)]
    locality: Option<PathBuf>,
    #[serde(skip)]
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum ConventionArg {
    Uncharged,
    Charged,
}

#[derive(Args, Serialize)]
struct FlopsArgs {
    /// Baseline geometry; `xl2` is depth 28, width 1152, 256 tokens.
    #[arg(long, default_value = "xl2")]
    baseline: String,
    #[arg(long)]
    plan: PathBuf,
    #[arg(long, value_enum, default_value = "uncharged")]
    convention: ConventionArg,
    #[serde(skip)]
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Optional reference checkpoint for the deviation probe.
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    samples_per_class: usize,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long, default_value_t = 1.5)]
    cfg_scale: f64,
    #[arg(long, default_value_t = 256)]
    eval_count: usize,
    #[arg(long, default_value_t = 64)]
    probe_count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[serde(skip)]
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct ReportArgs {
    /// Run directories to scan for metric files.
    #[arg(long, num_args = 1..)]
    runs: Vec<PathBuf>,
    #[serde(skip)]
    #[arg(long)]
    out: PathBuf,
}

// ---------------------------------------------------------------------------
// Config files for the heavier commands
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainTeacherConfig {
    model: DiTConfig,
    train: TrainConfig,
    data: PathBuf,
    #[serde(default = "default_schedule_steps")]
    schedule_steps: usize,
}

fn default_schedule_steps() -> usize {
    1000
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraftCmdConfig {
    teacher: PathBuf,
    data: PathBuf,
    plan: PathBuf,
    #[serde(default = "default_records")]
    records: usize,
    #[serde(default)]
    stage1: DistillConfig,
    /// Per-slot default when omitted: L1 for attention slots, L2 for MLP.
    #[serde(default)]
    objective: Option<RegressionObjective>,
    #[serde(default)]
    modulation_aware: bool,
    /// Worker cap for the per-layer distillations.
    #[serde(default)]
    parallel: Option<usize>,
    #[serde(default = "default_schedule_steps")]
    schedule_steps: usize,
    #[serde(default)]
    seed: u64,
}

fn default_records() -> usize {
    2048
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FinetuneCmdConfig {
    ckpt: PathBuf,
    data: PathBuf,
    fraction: f64,
    train: TrainConfig,
    #[serde(default)]
    freeze_untouched: bool,
    /// Plan file naming the grafted slots (needed with freeze_untouched).
    #[serde(default)]
    plan: Option<PathBuf>,
    #[serde(default = "default_schedule_steps")]
    schedule_steps: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RewireCmdConfig {
    ckpt: PathBuf,
    /// With data present, each pair is distilled onto its sequential span.
    #[serde(default)]
    data: Option<PathBuf>,
    #[serde(default = "default_records")]
    records: usize,
    #[serde(default)]
    stage1: DistillConfig,
    #[serde(default)]
    objective: Option<RegressionObjective>,
    #[serde(default = "default_schedule_steps")]
    schedule_steps: usize,
    #[serde(default)]
    seed: u64,
}

// ---------------------------------------------------------------------------
// Plumbing
// ---------------------------------------------------------------------------

fn read_config<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let bytes = std::fs::read(path)
        .with_context(|| format!("cannot read config {}", path.display()))?;
    let mut de = serde_json::Deserializer::from_slice(&bytes);
    let value: T = serde_path_to_error::deserialize(&mut de)
        .map_err(|e| anyhow::anyhow!("{}: invalid config at key '{}': {}", path.display(), e.path(), e.inner()))?;
    Ok(value)
}

fn run_dir(out: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(out)
        .with_context(|| format!("cannot create run directory {}", out.display()))
}

fn echo_config<T: Serialize>(out: &Path, config: &T) -> anyhow::Result<()> {
    save_json(config, &out.join("config.json"))?;
    Ok(())
}

fn finish_log(out: &Path, started: Instant, what: &str) {
    let line = format!(
        "{what}: completed in {:.1}s\n",
        started.elapsed().as_secs_f64()
    );
    let _ = std::fs::write(out.join("run.log"), line);
}

fn load_plan(path: &Path) -> anyhow::Result<GraftPlan> {
    read_config(path)
}

fn slot_default_objective(slot: Slot) -> RegressionObjective {
    match slot {
        Slot::Mha => RegressionObjective::l1(),
        Slot::Mlp => RegressionObjective::l2(),
    }
}

// ---------------------------------------------------------------------------
// Command bodies
// ---------------------------------------------------------------------------

fn cmd_gen_data(args: &GenDataArgs) -> anyhow::Result<()> {
    let t0 = Instant::now();
    run_dir(&args.out)?;
    echo_config(&args.out, args)?;
    let data = BlobDataset::generate(args.seed, args.size);
    save_dataset(&data, &args.out.join("dataset.grft"))?;
    println!(
        "dataset: {} samples, seed {} -> {}",
        args.size,
        args.seed,
        args.out.join("dataset.grft").display()
    );
    finish_log(&args.out, t0, "gen-data");
    Ok(())
}

fn cmd_train_teacher(args: &ConfigArgs) -> anyhow::Result<()> {
    let t0 = Instant::now();
    let cfg: TrainTeacherConfig = read_config(&args.config)?;
    run_dir(&args.out)?;
    echo_config(&args.out, &cfg)?;
    let data = load_dataset(&cfg.data)?;
    let s = NoiseSchedule::linear(cfg.schedule_steps);
    let mut model = build_model(&cfg.model)?;
    let trace = train(&mut model, &s, &data, &cfg.train, &None)?;
    save_checkpoint(&model, &args.out.join("teacher.grft"))?;
    save_json(&trace, &args.out.join("loss_trace.json"))?;
    let last100 = &trace[trace.len().saturating_sub(100)..];
    let tail = last100.iter().sum::<f64>() / last100.len().max(1) as f64;
    println!(
        "teacher: {} steps, final-window loss {:.4} -> {}",
        trace.len(),
        tail,
        args.out.join("teacher.grft").display()
    );
    finish_log(&args.out, t0, "train-teacher");
    Ok(())
}

fn cmd_locality(args: &LocalityArgs) -> anyhow::Result<()> {
    let t0 = Instant::now();
    run_dir(&args.out)?;
    echo_config(&args.out, args)?;
    let model = load_checkpoint(&args.ckpt)?;
    let s = NoiseSchedule::default();
    let protocol = LocalityProtocol {
        sampler: SampleMethod::Ddim,
        steps: args.steps,
        cfg_scale: args.cfg_scale,
        num_samples: args.samples,
        seed: args.seed,
    };
    let report = locality_profile(&model, &s, &protocol)?;
    save_json(&report, &args.out.join("locality.json"))?;
    std::fs::write(args.out.join("locality.csv"), report.to_csv())?;
    std::fs::write(args.out.join("locality.svg"), locality_svg(&report))?;
    let scores = report.summary_scores();
    println!(
        "locality: {} layers at k={} -> {:?}",
        scores.len(),
        report.summary_k,
        scores.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>()
    );
    finish_log(&args.out, t0, "locality");
    Ok(())
}

fn cmd_plan(args: &PlanArgs) -> anyhow::Result<()> {
    let t0 = Instant::now();
    run_dir(&args.out)?;
    echo_config(&args.out, args)?;
    let replacement: OperatorConfig = read_config(&args.replacement)?;
    let scores = match &args.locality {
        Some(path) => {
            let report: LocalityReport = read_config(path)?;
            Some(report.summary_scores())
        }
        None => None,
    };
    let plan = make_plan(
        args.strategy.into(),
        args.ratio,
        args.depth,
        args.slot.into(),
        &replacement,
        scores.as_deref(),
    )?;
    save_json(&plan, &args.out.join("plan.json"))?;
    println!("plan: layers {:?}", plan.layers());
    finish_log(&args.out, t0, "plan");
    Ok(())
}

/// Shared stage-1 machinery: capture + distill each planned target against
/// the teacher. Returns the trained mixers with their reports.
fn distill_plan(
    teacher: &ModelGraph,
    data: &BlobDataset,
    s: &NoiseSchedule,
    plan: &GraftPlan,
    cfg: &GraftCmdConfig,
) -> anyhow::Result<Vec<(TokenMixer, DistillReport)>> {
    let mut jobs = Vec::new();
    for (i, target) in plan.targets.iter().enumerate() {
        let capture = CaptureTarget::Operator {
            layer: target.layer,
            slot: target.slot,
            modulation_aware: cfg.modulation_aware,
        };
        let acts = capture_activations(
            teacher,
            data,
            s,
            &capture,
            cfg.records,
            cfg.seed ^ (0xACD5 + target.layer as u64),
        )?;
        let objective = cfg
            .objective
            .unwrap_or_else(|| slot_default_objective(target.slot));
        let mixer = TokenMixer::new(target.replacement.clone(), teacher.dtype())?;
        jobs.push(DistillJob {
            mixer,
            acts,
            objective,
            cfg: DistillConfig {
                seed: cfg.stage1.seed ^ (i as u64) << 8,
                ..cfg.stage1.clone()
            },
        });
    }
    let results = distill_many(jobs, cfg.parallel);
    let mut out = Vec::with_capacity(results.len());
    for r in results {
        out.push(r?);
    }
    Ok(out)
}

fn cmd_distill(args: &ConfigArgs) -> anyhow::Result<()> {
    let t0 = Instant::now();
    let cfg: GraftCmdConfig = read_config(&args.config)?;
    run_dir(&args.out)?;
    echo_config(&args.out, &cfg)?;
    let teacher = load_checkpoint(&cfg.teacher)?;
    let data = load_dataset(&cfg.data)?;
    let s = NoiseSchedule::linear(cfg.schedule_steps);
    let plan = load_plan(&cfg.plan)?;
    let trained = distill_plan(&teacher, &data, &s, &plan, &cfg)?;
    let reports: Vec<&DistillReport> = trained.iter().map(|(_, r)| r).collect();
    save_json(&reports, &args.out.join("distill_reports.json"))?;
    // Persist the initialized operators inside an integrated copy; the
    // grafted checkpoint is the natural carrier for them.
    let mixers: Vec<TokenMixer> = trained.iter().map(|(m, _)| m.clone()).collect();
    let grafted = integrate(&teacher, &plan, &mixers)?;
    save_checkpoint(&grafted, &args.out.join("distilled.grft"))?;
    for (target, (_, rep)) in plan.targets.iter().zip(&trained) {
        println!(
            "layer {:>2} {:?}: val {:.5} -> {:.5}",
            target.layer,
            target.slot,
            rep.initial_val,
            rep.val_trace.last().unwrap_or(&f64::NAN)
        );
    }
    finish_log(&args.out, t0, "distill");
    Ok(())
}

fn cmd_graft(args: &ConfigArgs) -> anyhow::Result<()> {
    let t0 = Instant::now();
    let cfg: GraftCmdConfig = read_config(&args.config)?;
    run_dir(&args.out)?;
    echo_config(&args.out, &cfg)?;
    let teacher = load_checkpoint(&cfg.teacher)?;
    let data = load_dataset(&cfg.data)?;
    let s = NoiseSchedule::linear(cfg.schedule_steps);
    let plan = load_plan(&cfg.plan)?;
    let trained = distill_plan(&teacher, &data, &s, &plan, &cfg)?;
    let mixers: Vec<TokenMixer> = trained.iter().map(|(m, _)| m.clone()).collect();
    let reports: Vec<&DistillReport> = trained.iter().map(|(_, r)| r).collect();
    let grafted = integrate(&teacher, &plan, &mixers)?;
    save_json(&reports, &args.out.join("distill_reports.json"))?;
    save_checkpoint(&grafted, &args.out.join("grafted.grft"))?;
    println!(
        "grafted {} operators -> {}",
        plan.targets.len(),
        args.out.join("grafted.grft").display()
    );
    finish_log(&args.out, t0, "graft");
    Ok(())
}

fn cmd_finetune(args: &ConfigArgs) -> anyhow::Result<()> {
    let t0 = Instant::now();
    let cfg: FinetuneCmdConfig = read_config(&args.config)?;
    run_dir(&args.out)?;
    echo_config(&args.out, &cfg)?;
    let mut model = load_checkpoint(&cfg.ckpt)?;
    let data = load_dataset(&cfg.data)?;
    let s = NoiseSchedule::linear(cfg.schedule_steps);
    let plan = match (&cfg.plan, cfg.freeze_untouched) {
        (Some(p), _) => Some(load_plan(p)?),
        (None, true) => {
            anyhow::bail!("freeze_untouched requires a plan file naming the grafted slots")
        }
        (None, false) => None,
    };
    let trace = finetune(
        &mut model,
        &s,
        &data,
        cfg.fraction,
        &cfg.train,
        if cfg.freeze_untouched { plan.as_ref() } else { None },
    )?;
    save_checkpoint(&model, &args.out.join("finetuned.grft"))?;
    save_json(&trace, &args.out.join("loss_trace.json"))?;
    println!(
        "finetuned {} steps on {:.1}% data -> {}",
        trace.len(),
        cfg.fraction * 100.0,
        args.out.join("finetuned.grft").display()
    );
    finish_log(&args.out, t0, "finetune");
    Ok(())
}

fn cmd_rewire(args: &ConfigArgs) -> anyhow::Result<()> {
    let t0 = Instant::now();
    let cfg: RewireCmdConfig = read_config(&args.config)?;
    run_dir(&args.out)?;
    echo_config(&args.out, &cfg)?;
    let teacher = load_checkpoint(&cfg.ckpt)?;
    let mut wide = teacher.parallelize_pairs()?;
    if let Some(data_path) = &cfg.data {
        let data = load_dataset(data_path)?;
        let s = NoiseSchedule::linear(cfg.schedule_steps);
        let objective = cfg.objective.unwrap_or_else(RegressionObjective::l1);
        let mut reports = Vec::new();
        for pair_index in 0..wide.effective_depth() {
            let acts = capture_activations(
                &teacher,
                &data,
                &s,
                &CaptureTarget::PairSpan { pair_index },
                cfg.records,
                cfg.seed ^ (0xBA1A + pair_index as u64),
            )?;
            let mut pair = match &wide.entries[pair_index] {
                Entry::Pair(p) => p.deep_clone(),
                Entry::Block(_) => unreachable!("just parallelized"),
            };
            let report = distill_pair(
                &mut pair,
                &teacher,
                &acts,
                &objective,
                &DistillConfig {
                    seed: cfg.stage1.seed ^ (pair_index as u64) << 8,
                    ..cfg.stage1.clone()
                },
            )?;
            wide.entries[pair_index] = Entry::Pair(pair);
            println!(
                "pair {pair_index}: val {:.5} -> {:.5}",
                report.initial_val,
                report.val_trace.last().unwrap_or(&f64::NAN)
            );
            reports.push(report);
        }
        save_json(&reports, &args.out.join("pair_distill_reports.json"))?;
    }
    save_checkpoint(&wide, &args.out.join("rewired.grft"))?;
    println!(
        "depth {} -> {} -> {}",
        teacher.effective_depth(),
        wide.effective_depth(),
        args.out.join("rewired.grft").display()
    );
    finish_log(&args.out, t0, "rewire-parallel");
    Ok(())
}

fn cmd_flops(args: &FlopsArgs) -> anyhow::Result<()> {
    let t0 = Instant::now();
    run_dir(&args.out)?;
    echo_config(&args.out, args)?;
    let baseline = match args.baseline.as_str() {
        "xl2" => BaselineConfig::xl2(),
        other => {
            // Treat anything else as a path to a baseline JSON.
            read_config(Path::new(other))?
        }
    };
    let plan = load_plan(&args.plan)?;
    let convention = match args.convention {
        ConventionArg::Uncharged => HxMlpFlopConvention::Uncharged,
        ConventionArg::Charged => HxMlpFlopConvention::Charged,
    };
    let report = delta_report_with(&baseline, &plan, convention)?;
    save_json(&report, &args.out.join("flops.json"))?;
    std::fs::write(args.out.join("flops.csv"), report.to_csv())?;
    println!(
        "delta_op {:+.2}% | delta_ft {:+.2}% | delta_param {:+.2}%",
        report.delta_op_pct, report.delta_ft_pct, report.delta_param_pct
    );
    finish_log(&args.out, t0, "flops");
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    blob_accuracy: f64,
    per_class_accuracy: Vec<f64>,
    eval_dm_loss: f64,
    deviation_from_reference: Option<f64>,
}

fn cmd_eval(args: &EvalArgs) -> anyhow::Result<()> {
    let t0 = Instant::now();
    run_dir(&args.out)?;
    echo_config(&args.out, args)?;
    let model = load_checkpoint(&args.ckpt)?;
    let data = load_dataset(&args.data)?;
    let s = NoiseSchedule::default();
    let classes = model.config().num_classes;
    let sample_cfg = SampleConfig {
        method: SampleMethod::Ddim,
        steps: args.steps,
        cfg_scale: args.cfg_scale,
        seed: args.seed,
    };
    let mut per_class = Vec::with_capacity(classes);
    let mut hits = 0.0;
    for class in 0..classes {
        let imgs = sample(&model, &s, &sample_cfg, class, args.samples_per_class)?;
        let acc = blob_accuracy(&imgs, &vec![class; args.samples_per_class])?;
        hits += acc * args.samples_per_class as f64;
        per_class.push(acc);
    }
    let accuracy = hits / (classes * args.samples_per_class) as f64;
    let loss = eval_dm_loss(&model, &s, &data, args.eval_count, args.seed ^ 0xE7A1)?;
    let deviation = match &args.reference {
        Some(path) => {
            let reference = load_checkpoint(path)?;
            let probe = build_probe(&data, &s, args.probe_count, args.seed ^ 0xDE7, model.dtype())?;
            Some(end_to_end_deviation(&model, &reference, &probe)?)
        }
        None => None,
    };
    let report = EvalReport {
        blob_accuracy: accuracy,
        per_class_accuracy: per_class,
        eval_dm_loss: loss,
        deviation_from_reference: deviation,
    };
    save_json(&report, &args.out.join("eval.json"))?;
    match deviation {
        Some(d) => println!(
            "accuracy {accuracy:.3} | eval loss {loss:.4} | deviation {d:.5}"
        ),
        None => println!("accuracy {accuracy:.3} | eval loss {loss:.4}"),
    }
    finish_log(&args.out, t0, "eval");
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> anyhow::Result<()> {
    let t0 = Instant::now();
    run_dir(&args.out)?;
    echo_config(&args.out, args)?;
    let mut combined = serde_json::Map::new();
    for dir in &args.runs {
        let mut entry = serde_json::Map::new();
        for file in ["eval.json", "flops.json", "loss_trace.json", "distill_reports.json", "locality.json", "config.json"] {
            let p = dir.join(file);
            if p.exists() {
                let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&p)?)?;
                entry.insert(file.trim_end_matches(".json").to_string(), v);
            }
        }
        combined.insert(dir.display().to_string(), serde_json::Value::Object(entry));
    }
    save_json(&combined, &args.out.join("report.json"))?;
    println!("aggregated {} runs -> {}", args.runs.len(), args.out.join("report.json").display());
    finish_log(&args.out, t0, "report");
    Ok(())
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData(a) => cmd_gen_data(&a),
        Command::TrainTeacher(a) => cmd_train_teacher(&a),
        Command::Locality(a) => cmd_locality(&a),
        Command::Plan(a) => cmd_plan(&a),
        Command::Distill(a) => cmd_distill(&a),
        Command::Graft(a) => cmd_graft(&a),
        Command::Finetune(a) => cmd_finetune(&a),
        Command::RewireParallel(a) => cmd_rewire(&a),
        Command::Flops(a) => cmd_flops(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Report(a) => cmd_report(&a),
    }
}

/// Numeric failures exit 2; anything else that goes wrong is a
/// validation/input problem and exits 1.
fn exit_code_for(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<graftkit::Error>() {
            match e {
                graftkit::Error::Diverged { .. } | graftkit::Error::NonFinite { .. } => return 2,
                _ => return 1,
            }
        }
    }
    1
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = dispatch(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(exit_code_for(&err));
    }
}
