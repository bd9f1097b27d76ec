use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::Rng as _;
use serde::Serialize;
use zkd_core::experiments::{
    distill, logit_statistics, shackle_study, toy_case, DistillReport, Distilled, ShackleOptions,
    ShackleReport,
};
use zkd_core::maxent::{expectation_at, primal_maxent_oracle, solve_multiplier, MaxEntProblem, DEFAULT_TOL};
use zkd_core::nn::{load_checkpoint, save_checkpoint, Mlp};
use zkd_core::{json, props, rng, LogitStats, LogitVector, TemperatureScheme};

mod config;

use config::{read_json, RunConfig, ShackleConfig, ShackleInstance, ToyConfig};

#[derive(Debug)]
pub enum Failure {
    /// Bad flags or config: exit 2.
    Usage(String),
    /// Runtime or property failure: exit 1.
    Runtime(String),
}

impl From<zkd_core::Error> for Failure {
    fn from(e: zkd_core::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

#[derive(Parser)]
#[command(name = "zkd", version, about = "Z-score logit standardization experiments")]
struct Cli {
    /// Seed for randomized subcommands; for distill it replaces the config's seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for report files.
    #[arg(long, global = true, env = "ZKD_OUT", default_value = "out")]
    out: PathBuf,
    /// Worker threads for independent distillation runs.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Randomized property suite for standardization, softmax and losses.
    Props {
        #[arg(long, default_value_t = 1000)]
        cases: usize,
    },
    /// Dual bisection vs primal oracle on random entropy-maximization problems.
    Maxent {
        /// Largest number of classes.
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = 100)]
        cases: usize,
    },
    /// Shared-temperature KL minimization of student logits against a teacher.
    Shackles {
        #[arg(long, conflicts_with_all = ["teacher", "init"])]
        config: Option<PathBuf>,
        #[arg(long, value_parser = parse_logits, allow_hyphen_values = true, requires_all = ["temperature", "init"])]
        teacher: Option<List>,
        #[arg(long = "T", id = "temperature")]
        temperature: Option<f64>,
        #[arg(long, value_parser = parse_logits, allow_hyphen_values = true)]
        init: Option<List>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        max_iters: Option<usize>,
        #[arg(long)]
        tol: Option<f64>,
        /// Random instances to run when no teacher or config is given.
        #[arg(long, default_value_t = 20)]
        cases: usize,
    },
    /// Vanilla vs Z-score KL for hand-written student logits.
    Toycase {
        #[arg(long, conflicts_with_all = ["teacher", "student"])]
        config: Option<PathBuf>,
        #[arg(long, value_parser = parse_logits, allow_hyphen_values = true, requires = "student")]
        teacher: Option<List>,
        #[arg(long, value_parser = parse_logits, allow_hyphen_values = true)]
        student: Vec<List>,
        #[arg(long, default_value_t = 2.0)]
        tau: f64,
        #[arg(long)]
        label: Option<usize>,
    },
    /// Train or load a teacher and distill students as configured.
    Distill {
        #[arg(long)]
        config: PathBuf,
    },
    /// Per-sample logit mean and standard deviation of a saved model.
    Stats {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "model")]
        role: String,
    },
}

/// Comma-separated floats, e.g. `2,0,-1`.
#[derive(Debug, Clone)]
struct List(Vec<f64>);

fn parse_logits(s: &str) -> Result<List, String> {
    s.split(',')
        .map(|f| f.trim().parse::<f64>().map_err(|e| format!("{f:?}: {e}")))
        .collect::<Result<_, _>>()
        .map(List)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Props { cases } => cmd_props(*cases, cli.seed.unwrap_or(0)),
        Command::Maxent { k, cases } => cmd_maxent(&cli.out, *k, *cases, cli.seed.unwrap_or(0)),
        Command::Shackles {
            config,
            teacher,
            temperature,
            init,
            lr,
            max_iters,
            tol,
            cases,
        } => {
            let instances = match (config, teacher) {
                (Some(path), _) => read_json::<ShackleConfig>(path).map(|c| c.instances),
                (None, Some(teacher)) => Ok(vec![ShackleInstance {
                    teacher: teacher.0.clone(),
                    temperature: temperature.unwrap_or_default(),
                    init: init.as_ref().map(|l| l.0.clone()).unwrap_or_default(),
                    lr: *lr,
                    max_iters: *max_iters,
                    tol: *tol,
                }]),
                (None, None) => Ok(random_shackles(*cases, cli.seed.unwrap_or(0))),
            };
            instances.and_then(|i| cmd_shackles(&cli.out, &i))
        }
        Command::Toycase {
            config,
            teacher,
            student,
            tau,
            label,
        } => {
            let cfg = match (config, teacher) {
                (Some(path), _) => read_json::<ToyConfig>(path),
                (None, Some(teacher)) => Ok(ToyConfig {
                    teacher: teacher.0.clone(),
                    students: student.iter().map(|l| l.0.clone()).collect(),
                    tau: *tau,
                    label: *label,
                }),
                (None, None) => Err(Failure::Usage("toycase needs --teacher/--student or --config".into())),
            };
            cfg.and_then(|c| cmd_toycase(&cli.out, &c))
        }
        Command::Distill { config } => cmd_distill(&cli.out, config, cli.seed, cli.jobs),
        Command::Stats { checkpoint, data, role } => cmd_stats(&cli.out, checkpoint, data, role),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn write_report(out: &Path, name: &str, contents: &str) -> CmdResult {
    fs::create_dir_all(out)?;
    fs::write(out.join(name), contents)?;
    Ok(())
}

fn to_json<T: Serialize>(value: &T) -> Result<String, Failure> {
    json::to_string_precise(value).map_err(|e| Failure::Runtime(e.to_string()))
}

fn logits(values: &[f64], what: &str) -> Result<LogitVector, Failure> {
    LogitVector::from_slice(values).map_err(|e| Failure::Usage(format!("{what}: {e}")))
}

fn cmd_props(cases: usize, seed: u64) -> CmdResult {
    if cases == 0 {
        return Err(Failure::Usage("--cases must be > 0".into()));
    }
    let results = props::run_properties(cases, seed);
    let mut failed = 0;
    for r in &results {
        if r.passed {
            println!("PASS {} ({} cases)", r.name, r.cases);
        } else {
            failed += 1;
            println!(
                "FAIL {}: {}",
                r.name,
                r.counterexample.as_deref().unwrap_or("no counterexample recorded")
            );
        }
    }
    if failed > 0 {
        return Err(Failure::Runtime(format!("{failed} of {} properties failed", results.len())));
    }
    Ok(())
}

#[derive(Serialize)]
struct MaxentCase {
    logits: Vec<f64>,
    target: f64,
    multiplier: f64,
    entropy: f64,
    total_variation: f64,
}

#[derive(Serialize)]
struct MaxentReport {
    seed: u64,
    tolerance: f64,
    binary_multiplier: f64,
    max_total_variation: f64,
    cases: Vec<MaxentCase>,
}

fn cmd_maxent(out: &Path, k: usize, cases: usize, seed: u64) -> CmdResult {
    if k < 2 {
        return Err(Failure::Usage("--k must be at least 2".into()));
    }
    let mut r = rng::seeded(seed);
    let mut rows = Vec::with_capacity(cases);
    for _ in 0..cases {
        let kk = r.random_range(2..=k);
        let l: Vec<f64> = (0..kk).map(|_| r.random_range(-2.0..=2.0)).collect();
        let lv = LogitVector::new(l.clone())?;
        let target = expectation_at(&lv, r.random_range(-2.5..=2.5));
        let problem = MaxEntProblem::new(lv, target)?;
        let dual = solve_multiplier(&problem, DEFAULT_TOL)?;
        let primal = primal_maxent_oracle(&problem, 1e-12)?;
        let tv = 0.5
            * dual
                .distribution
                .values()
                .iter()
                .zip(primal.values())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>();
        rows.push(MaxentCase {
            logits: l,
            target,
            multiplier: dual.multiplier,
            entropy: dual.entropy,
            total_variation: tv,
        });
    }
    let binary = solve_multiplier(
        &MaxEntProblem::new(LogitVector::from_slice(&[0.0, 1.0])?, 0.75)?,
        DEFAULT_TOL,
    )?;
    let max_tv = rows.iter().map(|c| c.total_variation).fold(0.0, f64::max);
    let report = MaxentReport {
        seed,
        tolerance: 1e-6,
        binary_multiplier: binary.multiplier,
        max_total_variation: max_tv,
        cases: rows,
    };
    write_report(out, "maxent.json", &to_json(&report)?)?;
    println!("cases: {cases}");
    println!("max total variation (dual vs primal): {max_tv:e}");
    println!("binary [0,1] target 0.75: multiplier {} (ln 3 = {})", binary.multiplier, 3f64.ln());
    if max_tv >= 1e-6 {
        return Err(Failure::Runtime("dual and primal solutions disagree".into()));
    }
    Ok(())
}

fn random_shackles(cases: usize, seed: u64) -> Vec<ShackleInstance> {
    let mut r = rng::seeded(seed);
    (0..cases)
        .map(|_| {
            let k = r.random_range(2..=6);
            let teacher = (0..k).map(|_| r.random_range(-3.0..3.0)).collect();
            let init = (0..k).map(|_| r.random_range(-3.0..3.0)).collect();
            ShackleInstance {
                teacher,
                temperature: r.random_range(0.5..=4.0),
                init,
                lr: None,
                max_iters: None,
                tol: None,
            }
        })
        .collect()
}

fn cmd_shackles(out: &Path, instances: &[ShackleInstance]) -> CmdResult {
    let mut reports: Vec<ShackleReport> = Vec::with_capacity(instances.len());
    for inst in instances {
        if !(inst.temperature > 0.0) {
            return Err(Failure::Usage("temperature must be > 0".into()));
        }
        let defaults = ShackleOptions::for_temperature(inst.temperature);
        let opts = ShackleOptions {
            lr: inst.lr.unwrap_or(defaults.lr),
            max_iters: inst.max_iters.unwrap_or(defaults.max_iters),
            tol: inst.tol.unwrap_or(defaults.tol),
        };
        let rep = shackle_study(
            &logits(&inst.teacher, "teacher")?,
            inst.temperature,
            &logits(&inst.init, "init")?,
            opts,
        )?;
        println!(
            "T={} delta={:.7} max_shift_residual={:.3e} std_ratio={:.7} iterations={}",
            rep.temperature, rep.delta, rep.max_shift_residual, rep.std_ratio, rep.iterations
        );
        reports.push(rep);
    }
    write_report(out, "shackles.json", &to_json(&reports)?)
}

fn cmd_toycase(out: &Path, cfg: &ToyConfig) -> CmdResult {
    let teacher = logits(&cfg.teacher, "teacher")?;
    let students = cfg
        .students
        .iter()
        .map(|s| logits(s, "student"))
        .collect::<Result<Vec<_>, _>>()?;
    let report = toy_case(&teacher, &students, cfg.tau, cfg.label).map_err(|e| Failure::Usage(e.to_string()))?;
    println!("{:<8} {:>14} {:>14} {:>7} {:>8}", "student", "vanilla_kl", "zscore_kl", "argmax", "correct");
    for (i, row) in report.rows.iter().enumerate() {
        let correct = row.correct.map_or("-".to_string(), |c| c.to_string());
        println!(
            "{:<8} {:>14.6} {:>14.6} {:>7} {:>8}",
            format!("S{}", i + 1),
            row.vanilla_kl,
            row.zscore_kl,
            row.argmax,
            correct
        );
    }
    println!("vanilla prefers S{}; zscore prefers S{}", report.vanilla_preferred() + 1, report.zscore_preferred() + 1);
    write_report(out, "toycase.json", &to_json(&report)?)
}

fn scheme_label(s: &TemperatureScheme) -> String {
    match s {
        TemperatureScheme::ZScore => "zscore".into(),
        TemperatureScheme::SharedConstant { t } => format!("shared_t{t}"),
    }
}

#[derive(Serialize)]
struct DistillSummary<'a> {
    config: &'a RunConfig,
    teacher_acc: f64,
    mean_student_acc: BTreeMap<String, f64>,
    runs: Vec<DistillReport>,
}

fn stats_rows(buf: &mut String, stats: &[LogitStats], role: &str) {
    for (i, s) in stats.iter().enumerate() {
        let _ = writeln!(buf, "{i},{},{},{role}", s.mean, s.std);
    }
}

fn cmd_distill(out: &Path, path: &Path, seed: Option<u64>, jobs: usize) -> CmdResult {
    let mut cfg: RunConfig = read_json(path)?;
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    cfg.validate().map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let (train, test) = cfg
        .data
        .load(base)
        .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let teacher = config::load_teacher(&cfg.teacher, base, &train, &test)?;

    let tasks: Vec<(u64, TemperatureScheme)> = cfg
        .seeds
        .iter()
        .flat_map(|&s| cfg.schemes().into_iter().map(move |sc| (s, sc)))
        .collect();
    let run = |&(s, scheme): &(u64, TemperatureScheme)| -> zkd_core::Result<Distilled> {
        distill(
            &teacher,
            &train,
            &test,
            &cfg.student.with_seed(s),
            &cfg.kd.with_scheme(scheme),
            &cfg.train.with_seed(s),
        )
    };
    let jobs = jobs.clamp(1, tasks.len());
    let mut results: Vec<Option<zkd_core::Result<Distilled>>> = (0..tasks.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..jobs)
            .map(|w| {
                let tasks = &tasks;
                let run = &run;
                scope.spawn(move || {
                    (w..tasks.len())
                        .step_by(jobs)
                        .map(|i| (i, run(&tasks[i])))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("distill worker panicked") {
                results[i] = Some(r);
            }
        }
    });
    let results: Vec<Distilled> = results
        .into_iter()
        .map(|r| r.expect("every task ran"))
        .collect::<zkd_core::Result<_>>()?;

    let ckpt = out.join("checkpoints");
    fs::create_dir_all(&ckpt)?;
    save_checkpoint(&teacher, ckpt.join("teacher.json"))?;

    let mut epochs = String::from("seed,scheme,epoch,ce_hard,kd,total\n");
    let mut stats = String::from("sample_index,mean,std,role\n");
    let teacher_acc = results[0].report.teacher_acc;
    stats_rows(&mut stats, &results[0].report.teacher_stats, "teacher");
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for d in &results {
        let r = &d.report;
        let label = scheme_label(&r.scheme);
        for (e, l) in r.epochs.iter().enumerate() {
            let _ = writeln!(epochs, "{},{label},{e},{},{},{}", r.seed, l.ce_hard, l.kd, l.total);
        }
        let role = format!("student_{label}_seed{}", r.seed);
        stats_rows(&mut stats, &r.student_stats, &role);
        save_checkpoint(&d.student, ckpt.join(format!("{role}.json")))?;
        let e = sums.entry(label.clone()).or_default();
        e.0 += r.student_acc;
        e.1 += 1;
        println!("seed {} {label}: student accuracy {:.4}", r.seed, r.student_acc);
    }
    let mean_student_acc: BTreeMap<String, f64> =
        sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect();
    println!("teacher accuracy {teacher_acc:.4}");
    for (k, v) in &mean_student_acc {
        println!("mean student accuracy {k}: {v:.4}");
    }
    let summary = DistillSummary {
        config: &cfg,
        teacher_acc,
        mean_student_acc,
        runs: results.into_iter().map(|d| d.report).collect(),
    };
    write_report(out, "distill_report.json", &to_json(&summary)?)?;
    write_report(out, "epochs.csv", &epochs)?;
    write_report(out, "logit_stats.csv", &stats)
}

fn cmd_stats(out: &Path, checkpoint: &Path, data: &Path, role: &str) -> CmdResult {
    let net: Mlp = load_checkpoint(checkpoint).map_err(|e| Failure::Usage(format!("{}: {e}", checkpoint.display())))?;
    let ds = zkd_core::data::load_csv(data).map_err(|e| Failure::Usage(format!("{}: {e}", data.display())))?;
    let s = logit_statistics(&net, &ds)?;
    let mut csv = String::from("sample_index,mean,std,role\n");
    stats_rows(&mut csv, &s.per_sample, role);
    println!("samples {}: mean of means {}, mean of stds {}", s.per_sample.len(), s.mean_of_means, s.mean_of_stds);
    write_report(out, "stats.csv", &csv)
}
