//! Command-line front end. Every command is driven by a config file plus
//! optional overriding flags, and every command is deterministic given its
//! resolved configuration.
//!
//! Exit codes are a stable contract: 0 success, 1 verification or metric
//! failure, 2 configuration error.

use crate::checkpoint;
use crate::config::{
    load_task_section, DistillRunConfig, RunManifest, RunTiming, TeacherRunConfig,
    MANIFEST_VERSION,
};
use crate::data::generate_splits;
use crate::distill::{self, evaluate, Ablation, StepRecord};
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::gradcheck::{self, Scope};
use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser)]
#[command(
    name = "ckd",
    about = "Contrastive knowledge distillation for miniature transformer encoders",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Subcommand)]
pub enum Cmd {
    /// Train a teacher encoder from scratch on a synthetic task
    TrainTeacher {
        /// TOML run config with [task], [model] and [train] tables
        config: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Distill a trained teacher checkpoint into a smaller student
    Distill {
        /// TOML run config with [task], [student] and [distill] tables
        config: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        total_steps: Option<usize>,
        /// Loss-term ablation: full, drop-cosnce, drop-soft, drop-hard,
        /// mse-intermediate, no-two-stage, no-perturbation
        #[arg(long)]
        ablation: Option<String>,
        /// Disable the gradient-perturbation double pass
        #[arg(long)]
        no_perturbation: bool,
        #[arg(long)]
        stage_split: Option<f64>,
    },
    /// Evaluate a checkpoint on a task's held-out split
    Eval {
        checkpoint: PathBuf,
        /// Any run config file; only its [task] table is used
        #[arg(long)]
        config: PathBuf,
        /// Reference checkpoint for prediction-agreement
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Write metrics JSON here as well as printing them
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Verify analytic gradients against central finite differences
    GradCheck {
        /// losses, encoder or end2end
        #[arg(long, default_value = "losses")]
        scope: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupt the analytic gradient of matching checks (test hook)
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Tabulate metrics across run manifests
    Compare {
        /// Two or more manifest.json files
        manifests: Vec<PathBuf>,
        /// Also write the table as CSV
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare inference throughput of two checkpoints
    Bench {
        teacher: PathBuf,
        student: PathBuf,
        #[arg(long, default_value_t = 200)]
        iterations: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Parse argv and run; returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap exits 0 for --help/--version and 2 for usage errors
            e.exit();
        }
    };
    match dispatch(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<i32> {
    match cmd {
        Cmd::TrainTeacher { config, out_dir, seed, steps } => {
            cmd_train_teacher(&config, out_dir, seed, steps)
        }
        Cmd::Distill {
            config,
            out_dir,
            seed,
            total_steps,
            ablation,
            no_perturbation,
            stage_split,
        } => cmd_distill(&config, out_dir, seed, total_steps, ablation, no_perturbation, stage_split),
        Cmd::Eval { checkpoint, config, reference, out } => {
            cmd_eval(&checkpoint, &config, reference, out)
        }
        Cmd::GradCheck { scope, seed, inject_fault } => {
            cmd_grad_check(&scope, seed, inject_fault.as_deref())
        }
        Cmd::Compare { manifests, out } => cmd_compare(&manifests, out),
        Cmd::Bench { teacher, student, iterations, seed } => {
            cmd_bench(&teacher, &student, iterations, seed)
        }
    }
}

fn label_for(out_dir: &Path) -> String {
    out_dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| out_dir.display().to_string())
}

fn write_metrics_json(path: &Path, metrics: &BTreeMap<String, f64>) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(metrics)?)?;
    Ok(())
}

fn cmd_train_teacher(
    config_path: &Path,
    out_dir: Option<PathBuf>,
    seed: Option<u64>,
    steps: Option<usize>,
) -> Result<i32> {
    let mut cfg = TeacherRunConfig::load(config_path)?;
    if let Some(dir) = out_dir {
        cfg.train.out_dir = dir;
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(s) = steps {
        cfg.train.steps = s;
    }

    let spec = cfg.task.task_spec()?;
    let encoder_cfg = cfg.model.encoder_config(&cfg.task);
    encoder_cfg.validate()?;
    let (train, eval_split) = generate_splits(&spec, cfg.task.train_size, cfg.task.eval_size)?;

    let started = Instant::now();
    let model = distill::train_teacher(&encoder_cfg, &train, &cfg.train.train_options())?;
    let metrics = evaluate(&model, &eval_split, None)?;
    let wall = started.elapsed().as_secs_f64();

    let out = &cfg.train.out_dir;
    fs::create_dir_all(out)?;
    let ckpt_dir = out.join("checkpoint");
    checkpoint::save(&ckpt_dir, &model)?;
    let metric_map = metrics.as_map();
    write_metrics_json(&out.join("metrics.json"), &metric_map)?;

    let mut artifacts = BTreeMap::new();
    artifacts.insert("checkpoint".to_string(), ckpt_dir.display().to_string());
    artifacts.insert("metrics".to_string(), out.join("metrics.json").display().to_string());
    let manifest = RunManifest {
        format_version: MANIFEST_VERSION,
        command: "train-teacher".into(),
        label: label_for(out),
        task: cfg.task.clone(),
        teacher: Some(encoder_cfg),
        student: None,
        train: Some(cfg.train.clone()),
        distill: None,
        artifacts,
        timing: RunTiming { wall_seconds: wall, steps: cfg.train.steps },
        metrics: metric_map.clone(),
    };
    manifest.save(&out.join("manifest.json"))?;

    println!("teacher trained: {} steps in {wall:.1}s", cfg.train.steps);
    for (k, v) in &metric_map {
        println!("  {k}: {v:.4}");
    }
    println!("checkpoint: {}", ckpt_dir.display());
    Ok(0)
}

#[allow(clippy::too_many_arguments)]
fn cmd_distill(
    config_path: &Path,
    out_dir: Option<PathBuf>,
    seed: Option<u64>,
    total_steps: Option<usize>,
    ablation: Option<String>,
    no_perturbation: bool,
    stage_split: Option<f64>,
) -> Result<i32> {
    let mut cfg = DistillRunConfig::load(config_path)?;
    if let Some(dir) = out_dir {
        cfg.distill.out_dir = dir;
    }
    if let Some(s) = seed {
        cfg.distill.seed = s;
    }
    if let Some(s) = total_steps {
        cfg.distill.total_steps = s;
    }
    if let Some(a) = ablation {
        cfg.distill.ablation = a.parse::<Ablation>()?;
    }
    if no_perturbation {
        cfg.distill.perturbation = false;
    }
    if let Some(s) = stage_split {
        cfg.distill.stage_split = s;
    }

    let spec = cfg.task.task_spec()?;
    let teacher = checkpoint::load(&cfg.distill.teacher_checkpoint)?;
    let tc = teacher.config();
    if tc.vocab_size != cfg.task.vocab_size
        || tc.max_len != cfg.task.seq_len
        || tc.num_classes != cfg.task.num_classes
    {
        return Err(Error::Config(format!(
            "teacher checkpoint geometry (vocab {}, len {}, classes {}) does not match the task",
            tc.vocab_size, tc.max_len, tc.num_classes
        )));
    }
    let student_cfg = cfg.student.encoder_config(&cfg.task);
    student_cfg.validate()?;
    let pipeline = cfg.distill_config(tc.num_layers)?;
    pipeline.validate(tc.num_layers, student_cfg.num_layers)?;

    let (train, eval_split) = generate_splits(&spec, cfg.task.train_size, cfg.task.eval_size)?;

    let started = Instant::now();
    let outcome = distill::distill(&teacher, &student_cfg, &pipeline, &train)?;
    let metrics = evaluate(&outcome.student, &eval_split, Some(&teacher))?;
    let wall = started.elapsed().as_secs_f64();

    let out = &cfg.distill.out_dir;
    fs::create_dir_all(out)?;
    let ckpt_dir = out.join("checkpoint");
    checkpoint::save(&ckpt_dir, &outcome.student)?;
    let log_path = out.join("steps.csv");
    let log_file = fs::File::create(&log_path)?;
    distill::write_step_log(log_file, &outcome.records)?;

    let mut metric_map = metrics.as_map();
    if let Some(last) = outcome.records.last() {
        metric_map.insert("final_l_total".to_string(), last.report.l_total);
    }
    write_metrics_json(&out.join("metrics.json"), &metric_map)?;

    let mut artifacts = BTreeMap::new();
    artifacts.insert("checkpoint".to_string(), ckpt_dir.display().to_string());
    artifacts.insert("step_log".to_string(), log_path.display().to_string());
    artifacts.insert("metrics".to_string(), out.join("metrics.json").display().to_string());
    let manifest = RunManifest {
        format_version: MANIFEST_VERSION,
        command: "distill".into(),
        label: label_for(out),
        task: cfg.task.clone(),
        teacher: Some(tc.clone()),
        student: Some(student_cfg),
        train: None,
        distill: Some(pipeline.clone()),
        artifacts,
        timing: RunTiming { wall_seconds: wall, steps: pipeline.total_steps },
        metrics: metric_map.clone(),
    };
    manifest.save(&out.join("manifest.json"))?;

    println!(
        "distilled {} steps ({:?}, perturbation {}) in {wall:.1}s",
        pipeline.total_steps,
        pipeline.ablation,
        if pipeline.perturbation_effective() { "on" } else { "off" }
    );
    for (k, v) in &metric_map {
        println!("  {k}: {v:.4}");
    }
    println!("checkpoint: {}", ckpt_dir.display());
    Ok(0)
}

fn cmd_eval(
    checkpoint_path: &Path,
    config_path: &Path,
    reference: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<i32> {
    let task = load_task_section(config_path)?;
    let spec = task.task_spec()?;
    let model = checkpoint::load(checkpoint_path)?;
    let reference = reference.map(|p| checkpoint::load(&p)).transpose()?;
    let (_, eval_split) = generate_splits(&spec, task.train_size, task.eval_size)?;
    let metrics = evaluate(&model, &eval_split, reference.as_ref())?;
    let map = metrics.as_map();
    for (k, v) in &map {
        println!("{k}: {v:.6}");
    }
    if let Some(path) = out {
        write_metrics_json(&path, &map)?;
    }
    Ok(0)
}

fn cmd_grad_check(scope: &str, seed: u64, fault: Option<&str>) -> Result<i32> {
    let scope: Scope = scope.parse()?;
    let reports = gradcheck::run_scope(scope, seed, fault);
    println!("{:<44} {:>12}  status", "check", "max rel err");
    for r in &reports {
        println!("{}", r.line());
    }
    let failures: Vec<_> = reports.iter().filter(|r| !r.passed).collect();
    if failures.is_empty() {
        println!("all {} checks passed (tolerance {:.0e})", reports.len(), gradcheck::REL_TOL);
        Ok(0)
    } else {
        for f in &failures {
            eprintln!(
                "FAIL {}: element {} analytic {:.9e} vs numeric {:.9e} (rel err {:.3e})",
                f.name, f.worst_index, f.analytic, f.numeric, f.worst_rel
            );
        }
        Ok(1)
    }
}

fn cmd_compare(manifest_paths: &[PathBuf], out: Option<PathBuf>) -> Result<i32> {
    if manifest_paths.len() < 2 {
        return Err(Error::Config("compare needs at least two manifests".into()));
    }
    let manifests: Vec<RunManifest> =
        manifest_paths.iter().map(|p| RunManifest::load(p)).collect::<Result<_>>()?;
    let task_name = &manifests[0].task.name;
    if let Some(m) = manifests.iter().find(|m| &m.task.name != task_name) {
        return Err(Error::Config(format!(
            "cannot compare runs of different tasks: {task_name:?} vs {:?}",
            m.task.name
        )));
    }

    let columns: BTreeSet<String> =
        manifests.iter().flat_map(|m| m.metrics.keys().cloned()).collect();
    let columns: Vec<String> = columns.into_iter().collect();

    print!("{:<24}", "run");
    for c in &columns {
        print!(" {c:>18}");
    }
    println!();
    for m in &manifests {
        print!("{:<24}", m.label);
        for c in &columns {
            match m.metrics.get(c) {
                Some(v) => print!(" {v:>18.6}"),
                None => print!(" {:>18}", "—"),
            }
        }
        println!();
    }

    if let Some(path) = out {
        let mut wtr = csv::Writer::from_path(&path)?;
        let mut header = vec!["run".to_string(), "task".to_string()];
        header.extend(columns.iter().cloned());
        wtr.write_record(&header)?;
        for m in &manifests {
            let mut row = vec![m.label.clone(), m.task.name.clone()];
            for c in &columns {
                row.push(m.metrics.get(c).map(|v| v.to_string()).unwrap_or_default());
            }
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        println!("wrote {}", path.display());
    }
    Ok(0)
}

fn cmd_bench(
    teacher_path: &Path,
    student_path: &Path,
    iterations: usize,
    seed: u64,
) -> Result<i32> {
    let teacher = checkpoint::load(teacher_path)?;
    let student = checkpoint::load(student_path)?;
    let time_model = |model: &EncoderModel| -> Result<f64> {
        let cfg = model.config();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seqs: Vec<Vec<usize>> = (0..iterations)
            .map(|_| (0..cfg.max_len).map(|_| rng.gen_range(0..cfg.vocab_size)).collect())
            .collect();
        let start = Instant::now();
        for tokens in &seqs {
            model.forward_detached(tokens)?;
        }
        let secs = start.elapsed().as_secs_f64();
        Ok(iterations as f64 * cfg.max_len as f64 / secs)
    };
    let teacher_tps = time_model(&teacher)?;
    let student_tps = time_model(&student)?;
    println!(
        "teacher: {:.0} tokens/s ({} params)",
        teacher_tps,
        teacher.param_count()
    );
    println!(
        "student: {:.0} tokens/s ({} params)",
        student_tps,
        student.param_count()
    );
    println!("speedup: {:.2}x", student_tps / teacher_tps);
    Ok(0)
}

/// Expose the step records in CSV form for plotting loss curves.
pub fn step_log_to_csv(records: &[StepRecord]) -> Result<String> {
    let mut buf = Vec::new();
    distill::write_step_log(&mut buf, records)?;
    Ok(String::from_utf8(buf).expect("csv is utf-8"))
}
