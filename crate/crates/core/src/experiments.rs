//! Runnable experiments: supervised training, the distillation loop, the
//! shared-temperature logit study, the toy comparison and per-sample logit
//! statistics.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::logitcore::{
    argmax, logit_stats, mean_std, softmax_t, stable_softmax, zscore, LogitStats, LogitVector,
    MIN_STD,
};
use crate::losses::{kd_loss_and_grad, kl_div, KdConfig, LossBreakdown, TemperatureScheme};
use crate::nn::{Gradients, Mlp, MlpSpec, Sgd};
use crate::rng::{self, streams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    Constant,
    /// `lr * factor^(epoch / every)`.
    StepDecay { factor: f64, every: usize },
}

fn default_eps_guard() -> f64 {
    1e-8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
    /// Standard-deviation floor for the Z-score scheme during training.
    #[serde(default = "default_eps_guard")]
    pub eps_guard: f64,
    #[serde(default)]
    pub momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 0.05,
            lr_schedule: LrSchedule::Constant,
            seed: 0,
            eps_guard: default_eps_guard(),
            momentum: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(self.eps_guard >= 0.0 && self.eps_guard.is_finite()) {
            return bad(format!("eps_guard must be >= 0, got {}", self.eps_guard));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if let LrSchedule::StepDecay { factor, every } = self.lr_schedule {
            if every == 0 || !(factor > 0.0 && factor.is_finite()) {
                return bad("step decay needs factor > 0 and every >= 1".into());
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::StepDecay { factor, every } => self.lr * factor.powi((epoch / every) as i32),
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}

/// Mini-batch SGD over `train`. `per_sample(i, logits)` returns the loss
/// breakdown and logit gradient of sample `i`; batch gradients are means.
fn fit<F>(net: &mut Mlp, train: &Dataset, cfg: &TrainConfig, mut per_sample: F) -> Result<Vec<LossBreakdown>>
where
    F: FnMut(usize, &LogitVector) -> Result<(LossBreakdown, Vec<f64>)>,
{
    cfg.validate()?;
    if train.dim() != net.input_dim() {
        return Err(Error::Config(format!(
            "data has {} features, network expects {}",
            train.dim(),
            net.input_dim()
        )));
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = rng::substream(cfg.seed, streams::SHUFFLE);
    let mut opt = Sgd::new(cfg.momentum);
    let mut history = Vec::with_capacity(cfg.epochs);
    let n = train.len() as f64;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = cfg.lr_at(epoch);
        let mut sum = LossBreakdown {
            ce_hard: 0.0,
            kd: 0.0,
            total: 0.0,
        };
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = Gradients::zeros_like(net);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let x = &train.features()[i];
                let loss = net.backprop_with(x, scale, &mut grads, |logits| per_sample(i, logits))?;
                sum.ce_hard += loss.ce_hard;
                sum.kd += loss.kd;
                sum.total += loss.total;
            }
            opt.step(net, &grads, lr)?;
        }
        history.push(LossBreakdown {
            ce_hard: sum.ce_hard / n,
            kd: sum.kd / n,
            total: sum.total / n,
        });
    }
    Ok(history)
}

fn ce_loss_and_grad(logits: &LogitVector, label: usize) -> (LossBreakdown, Vec<f64>) {
    let mut grad = stable_softmax(logits.values(), 1.0);
    let ce = -grad[label].ln();
    grad[label] -= 1.0;
    (
        LossBreakdown {
            ce_hard: ce,
            kd: 0.0,
            total: ce,
        },
        grad,
    )
}

fn check_labels(net: &Mlp, data: &Dataset) -> Result<()> {
    if data.num_classes() > net.output_dim() {
        return Err(Error::Config(format!(
            "data has {} classes, network outputs {}",
            data.num_classes(),
            net.output_dim()
        )));
    }
    Ok(())
}

pub fn accuracy(net: &Mlp, data: &Dataset) -> Result<f64> {
    let mut correct = 0usize;
    for (x, &y) in data.features().iter().zip(data.labels()) {
        correct += usize::from(argmax(&net.forward(x)?) == y);
    }
    Ok(correct as f64 / data.len() as f64)
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub net: Mlp,
    pub test_accuracy: f64,
    /// Mean cross-entropy per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Hard-label cross-entropy training from `spec`'s initialization.
pub fn train_teacher(train: &Dataset, test: &Dataset, spec: &MlpSpec, cfg: &TrainConfig) -> Result<TrainedModel> {
    let mut net = Mlp::init(spec)?;
    check_labels(&net, train)?;
    let history = fit(&mut net, train, cfg, |i, logits| Ok(ce_loss_and_grad(logits, train.labels()[i])))?;
    Ok(TrainedModel {
        test_accuracy: accuracy(&net, test)?,
        epoch_losses: history.iter().map(|l| l.total).collect(),
        net,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    pub scheme: TemperatureScheme,
    pub seed: u64,
    pub teacher_acc: f64,
    pub student_acc: f64,
    pub epochs: Vec<LossBreakdown>,
    /// Per-sample logit statistics on the test split.
    pub teacher_stats: Vec<LogitStats>,
    pub student_stats: Vec<LogitStats>,
}

#[derive(Debug, Clone)]
pub struct Distilled {
    pub report: DistillReport,
    pub student: Mlp,
}

/// Distill `teacher` into a fresh student built from `student_spec`.
pub fn distill(
    teacher: &Mlp,
    train: &Dataset,
    test: &Dataset,
    student_spec: &MlpSpec,
    kd: &KdConfig,
    cfg: &TrainConfig,
) -> Result<Distilled> {
    distill_from(teacher, Mlp::init(student_spec)?, train, test, kd, cfg)
}

/// Distillation loop starting from a given student. The teacher stays
/// frozen; each step minimizes
/// `lambda_ce * CE(y, softmax(z)) + lambda_kd * tau^2 * KL(q(v) || q(z))`.
pub fn distill_from(
    teacher: &Mlp,
    mut student: Mlp,
    train: &Dataset,
    test: &Dataset,
    kd: &KdConfig,
    cfg: &TrainConfig,
) -> Result<Distilled> {
    kd.validate()?;
    cfg.validate()?;
    if teacher.output_dim() != student.output_dim() {
        return Err(Error::Config(format!(
            "teacher outputs {} classes, student {}",
            teacher.output_dim(),
            student.output_dim()
        )));
    }
    if teacher.input_dim() != student.input_dim() {
        return Err(Error::Config(format!(
            "teacher takes {} features, student {}",
            teacher.input_dim(),
            student.input_dim()
        )));
    }
    check_labels(teacher, train)?;
    if kd.scheme == TemperatureScheme::ZScore && cfg.eps_guard <= 0.0 {
        return Err(Error::Config("the zscore scheme needs eps_guard > 0 during training".into()));
    }

    let teacher_logits: Vec<LogitVector> = train
        .features()
        .iter()
        .map(|x| teacher.forward(x))
        .collect::<Result<_>>()?;

    let history = fit(&mut student, train, cfg, |i, logits| {
        kd_loss_and_grad(&teacher_logits[i], logits, train.labels()[i], kd, cfg.eps_guard)
    })?;

    let report = DistillReport {
        scheme: kd.scheme,
        seed: cfg.seed,
        teacher_acc: accuracy(teacher, test)?,
        student_acc: accuracy(&student, test)?,
        epochs: history,
        teacher_stats: logit_statistics(teacher, test)?.per_sample,
        student_stats: logit_statistics(&student, test)?.per_sample,
    };
    Ok(Distilled { report, student })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRun {
    pub seed: u64,
    pub zscore: DistillReport,
    pub shared: DistillReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub teacher_acc: f64,
    pub runs: Vec<ComparisonRun>,
    pub mean_student_acc_zscore: f64,
    pub mean_student_acc_shared: f64,
}

/// For one seed: distill under the Z-score scheme and under a shared
/// constant temperature `T = tau` with the same weights. The seed drives
/// both the student initialization and the batch order.
pub fn compare_schemes_for_seed(
    teacher: &Mlp,
    train: &Dataset,
    test: &Dataset,
    student_spec: &MlpSpec,
    kd: &KdConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<ComparisonRun> {
    let spec = student_spec.with_seed(seed);
    let cfg = cfg.with_seed(seed);
    let z = distill(teacher, train, test, &spec, &kd.with_scheme(TemperatureScheme::ZScore), &cfg)?;
    let s = distill(
        teacher,
        train,
        test,
        &spec,
        &kd.with_scheme(TemperatureScheme::SharedConstant { t: kd.tau }),
        &cfg,
    )?;
    Ok(ComparisonRun {
        seed,
        zscore: z.report,
        shared: s.report,
    })
}

pub fn summarize_comparison(teacher_acc: f64, runs: Vec<ComparisonRun>) -> ComparisonReport {
    let n = runs.len().max(1) as f64;
    ComparisonReport {
        teacher_acc,
        mean_student_acc_zscore: runs.iter().map(|r| r.zscore.student_acc).sum::<f64>() / n,
        mean_student_acc_shared: runs.iter().map(|r| r.shared.student_acc).sum::<f64>() / n,
        runs,
    }
}

pub fn compare_schemes(
    teacher: &Mlp,
    train: &Dataset,
    test: &Dataset,
    student_spec: &MlpSpec,
    kd: &KdConfig,
    cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<ComparisonReport> {
    let runs = seeds
        .iter()
        .map(|&s| compare_schemes_for_seed(teacher, train, test, student_spec, kd, cfg, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize_comparison(accuracy(teacher, test)?, runs))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShackleOptions {
    pub lr: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl ShackleOptions {
    /// Step `0.5 * T^2`, gradient inf-norm tolerance 1e-8, a million steps.
    pub fn for_temperature(t: f64) -> Self {
        Self {
            lr: 0.5 * t * t,
            max_iters: 1_000_000,
            tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShackleReport {
    pub temperature: f64,
    pub teacher_logits: Vec<f64>,
    pub converged_student_logits: Vec<f64>,
    /// `mean(z) - mean(v)`.
    pub delta: f64,
    /// `max_i |z_i - v_i - delta|`.
    pub max_shift_residual: f64,
    /// `std(z) / std(v)`.
    pub std_ratio: f64,
    pub iterations: usize,
    pub final_kl: f64,
    /// Largest `|mean(z_t) - mean(z_0)|` seen along the trajectory.
    pub mean_drift: f64,
}

/// Gradient descent on student logits alone, minimizing
/// `KL(softmax(v / T) || softmax(z / T))`, until the gradient inf-norm is
/// at most `tol`.
pub fn shackle_study(
    teacher_logits: &LogitVector,
    temperature: f64,
    init: &LogitVector,
    opts: ShackleOptions,
) -> Result<ShackleReport> {
    let p = softmax_t(teacher_logits, temperature)?;
    if init.len() != teacher_logits.len() {
        return Err(Error::Shape(format!(
            "teacher has {} classes, init {}",
            teacher_logits.len(),
            init.len()
        )));
    }
    if !(opts.lr > 0.0 && opts.tol > 0.0) {
        return Err(Error::InvalidParameter("lr and tol must be > 0".into()));
    }
    let teacher = logit_stats(teacher_logits);
    if teacher.std < MIN_STD {
        return Err(Error::DegenerateLogits {
            std: teacher.std,
            min_std: MIN_STD,
        });
    }

    let mut z = init.values().to_vec();
    let mean0 = mean_std(&z).0;
    let mut drift = 0.0_f64;
    let mut iterations = 0;
    loop {
        let q = stable_softmax(&z, temperature);
        let grad: Vec<f64> = q.iter().zip(p.values()).map(|(qi, pi)| (qi - pi) / temperature).collect();
        let norm = grad.iter().fold(0.0_f64, |m, g| m.max(g.abs()));
        if norm <= opts.tol {
            break;
        }
        if iterations == opts.max_iters {
            return Err(Error::Convergence {
                iterations,
                grad_norm: norm,
                last: z,
            });
        }
        for (zi, gi) in z.iter_mut().zip(&grad) {
            *zi -= opts.lr * gi;
        }
        drift = drift.max((mean_std(&z).0 - mean0).abs());
        iterations += 1;
    }

    let student = LogitVector::new(z)?;
    let s = logit_stats(&student);
    let delta = s.mean - teacher.mean;
    let max_shift_residual = student
        .values()
        .iter()
        .zip(teacher_logits.values())
        .map(|(zi, vi)| (zi - vi - delta).abs())
        .fold(0.0, f64::max);
    Ok(ShackleReport {
        temperature,
        teacher_logits: teacher_logits.values().to_vec(),
        final_kl: kl_div(&p, &softmax_t(&student, temperature)?)?,
        converged_student_logits: student.into_vec(),
        delta,
        max_shift_residual,
        std_ratio: s.std / teacher.std,
        iterations,
        mean_drift: drift,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyCaseRow {
    pub student: Vec<f64>,
    /// `KL(softmax(v / tau) || softmax(z / tau))`.
    pub vanilla_kl: f64,
    /// KL between the softmaxes of the Z-scored logits.
    pub zscore_kl: f64,
    pub argmax: usize,
    pub correct: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyCaseReport {
    pub tau: f64,
    pub teacher: Vec<f64>,
    pub teacher_argmax: usize,
    pub label: Option<usize>,
    pub rows: Vec<ToyCaseRow>,
    /// Student indices, best (lowest loss) first.
    pub vanilla_ranking: Vec<usize>,
    pub zscore_ranking: Vec<usize>,
}

impl ToyCaseReport {
    pub fn vanilla_preferred(&self) -> usize {
        self.vanilla_ranking[0]
    }

    pub fn zscore_preferred(&self) -> usize {
        self.zscore_ranking[0]
    }
}

fn ranking(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    idx
}

/// Score each student against the teacher under a shared temperature `tau`
/// and under Z-score standardization with base temperature `tau`.
pub fn toy_case(
    teacher: &LogitVector,
    students: &[LogitVector],
    tau: f64,
    label: Option<usize>,
) -> Result<ToyCaseReport> {
    if students.is_empty() {
        return Err(Error::InvalidParameter("need at least one student".into()));
    }
    if let Some(y) = label {
        if y >= teacher.len() {
            return Err(Error::InvalidParameter(format!("label {y} out of range")));
        }
    }
    let p_vanilla = softmax_t(teacher, tau)?;
    let p_z = zscore(teacher, tau)?.softmax();
    let mut rows = Vec::with_capacity(students.len());
    for s in students {
        if s.len() != teacher.len() {
            return Err(Error::Shape(format!(
                "teacher has {} classes, a student has {}",
                teacher.len(),
                s.len()
            )));
        }
        let am = argmax(s);
        rows.push(ToyCaseRow {
            student: s.values().to_vec(),
            vanilla_kl: kl_div(&p_vanilla, &softmax_t(s, tau)?)?,
            zscore_kl: kl_div(&p_z, &zscore(s, tau)?.softmax())?,
            argmax: am,
            correct: label.map(|y| am == y),
        });
    }
    let vanilla: Vec<f64> = rows.iter().map(|r| r.vanilla_kl).collect();
    let zs: Vec<f64> = rows.iter().map(|r| r.zscore_kl).collect();
    Ok(ToyCaseReport {
        tau,
        teacher: teacher.values().to_vec(),
        teacher_argmax: argmax(teacher),
        label,
        vanilla_ranking: ranking(&vanilla),
        zscore_ranking: ranking(&zs),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitStatistics {
    pub per_sample: Vec<LogitStats>,
    pub mean_of_means: f64,
    pub mean_of_stds: f64,
}

impl LogitStatistics {
    pub fn from_stats(per_sample: Vec<LogitStats>) -> Self {
        let n = per_sample.len().max(1) as f64;
        Self {
            mean_of_means: per_sample.iter().map(|s| s.mean).sum::<f64>() / n,
            mean_of_stds: per_sample.iter().map(|s| s.std).sum::<f64>() / n,
            per_sample,
        }
    }
}

/// Mean and standard deviation of the logits of every sample in `data`.
pub fn logit_statistics(net: &Mlp, data: &Dataset) -> Result<LogitStatistics> {
    let per_sample = data
        .features()
        .iter()
        .map(|x| net.forward(x).map(|z| logit_stats(&z)))
        .collect::<Result<Vec<_>>>()?;
    Ok(LogitStatistics::from_stats(per_sample))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lv(v: &[f64]) -> LogitVector {
        LogitVector::from_slice(v).unwrap()
    }

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig {
            lr: 1.0,
            lr_schedule: LrSchedule::StepDecay { factor: 0.5, every: 10 },
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lr_at(0), 1.0);
        assert_eq!(cfg.lr_at(9), 1.0);
        assert_eq!(cfg.lr_at(10), 0.5);
        assert_eq!(cfg.lr_at(25), 0.25);
    }

    #[test]
    fn train_config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { epochs: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { momentum: 1.0, ..TrainConfig::default() }.validate().is_err());
    }

    #[test]
    fn shackle_hand_derivable_instance() {
        let v = lv(&[2.0, 0.0, -1.0]);
        let r = shackle_study(&v, 4.0, &lv(&[0.0; 3]), ShackleOptions::for_temperature(4.0)).unwrap();
        assert!((r.delta + 1.0 / 3.0).abs() < 1e-4);
        assert!(r.max_shift_residual < 1e-4);
        assert!((r.std_ratio - 1.0).abs() < 1e-4);
        assert!(r.mean_drift < 1e-10);
    }

    #[test]
    fn shackle_from_teacher_takes_no_steps() {
        let v = lv(&[2.0, 0.0, -1.0]);
        let r = shackle_study(&v, 4.0, &v, ShackleOptions::for_temperature(4.0)).unwrap();
        assert_eq!(r.iterations, 0);
        assert_eq!(r.delta, 0.0);
    }

    #[test]
    fn shackle_reports_non_convergence() {
        let v = lv(&[2.0, 0.0, -1.0]);
        let opts = ShackleOptions { max_iters: 3, ..ShackleOptions::for_temperature(4.0) };
        match shackle_study(&v, 4.0, &lv(&[0.0; 3]), opts) {
            Err(Error::Convergence { iterations: 3, last, .. }) => assert_eq!(last.len(), 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn toy_case_affine_student() {
        let v = lv(&[3.0, 1.0, -2.0, 0.5]);
        let s2 = v.affine(0.5, 1.0).unwrap();
        let r = toy_case(&v, &[v.clone(), s2], 2.0, Some(0)).unwrap();
        assert_eq!(r.rows[0].vanilla_kl, 0.0);
        assert_eq!(r.rows[0].zscore_kl, 0.0);
        assert!(r.rows[1].zscore_kl < 1e-15);
        assert!(r.rows[1].vanilla_kl > 1e-3);
        assert_eq!(r.rows[1].correct, Some(true));
    }

    #[test]
    fn toy_case_errors() {
        let v = lv(&[3.0, 1.0, -2.0]);
        assert!(toy_case(&v, &[], 2.0, None).is_err());
        assert!(toy_case(&v, &[lv(&[1.0, 1.0, 1.0])], 2.0, None).is_err());
        assert!(toy_case(&v, &[v.clone()], 2.0, Some(3)).is_err());
    }
}
