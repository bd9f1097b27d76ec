//! Randomized property checks over the logit and loss primitives.
//!
//! Each property draws its own cases from a sub-stream of the run seed, so
//! results do not depend on which other properties ran.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::logitcore::{
    general_softmax, softmax_t, zscore, LogitVector, ProbabilityVector, SoftmaxParams,
};
use crate::losses::{
    cross_entropy, cross_entropy_grad_wrt_logits, entropy, kd_loss_and_grad, kl_div,
    kl_grad_wrt_logits, KdConfig, TemperatureScheme,
};
use crate::rng::{self, Rng};

/// Standardization under test: `(logits, tau) -> standardized values`.
pub type Standardizer = fn(&[f64], f64) -> Option<Vec<f64>>;

fn library_zscore(z: &[f64], tau: f64) -> Option<Vec<f64>> {
    let z = LogitVector::from_slice(z).ok()?;
    zscore(&z, tau).ok().map(|s| s.values)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyResult {
    pub name: String,
    pub cases: usize,
    pub passed: bool,
    pub counterexample: Option<String>,
}

type Check = fn(&mut Rng, Standardizer) -> std::result::Result<(), String>;

const PROPERTIES: &[(&str, Check)] = &[
    ("zscore_zero_mean", zero_mean),
    ("zscore_std_is_inverse_tau", std_inverse_tau),
    ("zscore_bounded", bounded),
    ("zscore_rank_preserved", rank_preserved),
    ("zscore_affine_invariant", affine_invariant),
    ("softmax_shift_invariant", softmax_shift_invariant),
    ("general_softmax_equals_softmax_t", general_matches_plain),
    ("softmax_is_probability", softmax_is_probability),
    ("kl_nonnegative", kl_nonnegative),
    ("ce_minus_kl_is_entropy", ce_kl_identity),
    ("kl_and_ce_gradients_equal", kl_ce_gradients),
    ("kd_gradient_matches_finite_differences", kd_grad_fd),
    ("shared_kd_gradient_sums_to_zero", shared_grad_sums_to_zero),
];

pub fn property_names() -> Vec<&'static str> {
    PROPERTIES.iter().map(|(n, _)| *n).collect()
}

pub fn run_properties(cases: usize, seed: u64) -> Vec<PropertyResult> {
    run_properties_with(cases, seed, library_zscore)
}

/// Run the suite with a substitute standardization, to confirm the suite
/// catches a broken one.
pub fn run_properties_with(cases: usize, seed: u64, standardize: Standardizer) -> Vec<PropertyResult> {
    PROPERTIES
        .iter()
        .enumerate()
        .map(|(i, (name, check))| {
            let mut rng = rng::substream(seed, 100 + i as u64);
            let mut counterexample = None;
            for _ in 0..cases {
                if let Err(msg) = check(&mut rng, standardize) {
                    counterexample = Some(msg);
                    break;
                }
            }
            PropertyResult {
                name: name.to_string(),
                cases,
                passed: counterexample.is_none(),
                counterexample,
            }
        })
        .collect()
}

/// Logits with `K` in `[2, 100]`, log-uniform scale in `[0.1, 10]` and an
/// offset in `[-10, 10]`.
pub fn random_logits(rng: &mut Rng) -> Vec<f64> {
    let k = rng.random_range(2..=100);
    random_logits_k(rng, k)
}

pub fn random_logits_k(rng: &mut Rng, k: usize) -> Vec<f64> {
    let scale = 10f64.powf(rng.random_range(-1.0..=1.0));
    let offset = rng.random_range(-10.0..=10.0);
    (0..k).map(|_| offset + scale * rng.random_range(-3.0..=3.0)).collect()
}

/// Log-uniform in `[0.1, 10]`.
pub fn random_tau(rng: &mut Rng) -> f64 {
    10f64.powf(rng.random_range(-1.0..=1.0))
}

pub fn random_distribution(rng: &mut Rng, k: usize) -> Vec<f64> {
    let z = random_logits_k(rng, k);
    softmax_t(&LogitVector::new(z).expect("finite"), 1.0)
        .expect("positive temperature")
        .into_vec()
}

fn show(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:e}")).collect();
    format!("[{}]", parts.join(", "))
}

fn pop_mean_std(v: &[f64]) -> (f64, f64) {
    let k = v.len() as f64;
    let m = v.iter().sum::<f64>() / k;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / k).sqrt())
}

fn standardized(rng: &mut Rng, f: Standardizer) -> std::result::Result<(Vec<f64>, f64, Vec<f64>), String> {
    let z = random_logits(rng);
    let tau = random_tau(rng);
    let s = f(&z, tau).ok_or_else(|| format!("standardization failed on z = {}", show(&z)))?;
    Ok((z, tau, s))
}

fn zero_mean(rng: &mut Rng, f: Standardizer) -> std::result::Result<(), String> {
    let (z, tau, s) = standardized(rng, f)?;
    let (m, _) = pop_mean_std(&s);
    if m.abs() < 1e-9 {
        Ok(())
    } else {
        Err(format!("mean {m:e} for z = {}, tau = {tau}", show(&z)))
    }
}

fn std_inverse_tau(rng: &mut Rng, f: Standardizer) -> std::result::Result<(), String> {
    let (z, tau, s) = standardized(rng, f)?;
    let (_, sd) = pop_mean_std(&s);
    if (sd - 1.0 / tau).abs() < 1e-9 {
        Ok(())
    } else {
        Err(format!("std {sd} != 1/tau = {} for z = {}", 1.0 / tau, show(&z)))
    }
}

fn bounded(rng: &mut Rng, f: Standardizer) -> std::result::Result<(), String> {
    // half of the cases are one-hot vectors, where the bound is attained
    let k = rng.random_range(2..=100);
    let tau = random_tau(rng);
    let z = if rng.random_bool(0.5) {
        let mut z = vec![0.0; k];
        z[rng.random_range(0..k)] = rng.random_range(0.1..=10.0);
        z
    } else {
        random_logits_k(rng, k)
    };
    let s = f(&z, tau).ok_or_else(|| format!("standardization failed on z = {}", show(&z)))?;
    let bound = ((k - 1) as f64).sqrt() / tau + 1e-12;
    let max = s.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if max <= bound {
        Ok(())
    } else {
        Err(format!("max |z| = {max} > {bound} for z = {}, tau = {tau}", show(&z)))
    }
}

fn argsort(v: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    idx
}

fn rank_preserved(rng: &mut Rng, f: Standardizer) -> std::result::Result<(), String> {
    let (z, tau, s) = standardized(rng, f)?;
    if argsort(&z) == argsort(&s) {
        Ok(())
    } else {
        Err(format!("argsort changed for z = {}, tau = {tau}", show(&z)))
    }
}

fn affine_invariant(rng: &mut Rng, f: Standardizer) -> std::result::Result<(), String> {
    let (z, tau, s) = standardized(rng, f)?;
    let a = 10f64.powf(rng.random_range(-1.0..=1.0));
    let b = rng.random_range(-10.0..=10.0);
    let moved: Vec<f64> = z.iter().map(|v| a * v + b).collect();
    let s2 = f(&moved, tau).ok_or("standardization failed on moved logits")?;
    let err = s.iter().zip(&s2).fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()));
    if err < 1e-9 {
        Ok(())
    } else {
        Err(format!("difference {err:e} for a = {a}, b = {b}, z = {}", show(&z)))
    }
}

fn lv(v: Vec<f64>) -> LogitVector {
    LogitVector::new(v).expect("generated logits are finite")
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

fn softmax_shift_invariant(rng: &mut Rng, _: Standardizer) -> std::result::Result<(), String> {
    let z = random_logits(rng);
    let t = random_tau(rng);
    let c = rng.random_range(-50.0..=50.0);
    let a = softmax_t(&lv(z.clone()), t).map_err(|e| e.to_string())?;
    let b = softmax_t(&lv(z.iter().map(|v| v + c).collect()), t).map_err(|e| e.to_string())?;
    let err = max_abs_diff(a.values(), b.values());
    if err < 1e-12 {
        Ok(())
    } else {
        Err(format!("difference {err:e} for c = {c}, T = {t}, z = {}", show(&z)))
    }
}

fn general_matches_plain(rng: &mut Rng, _: Standardizer) -> std::result::Result<(), String> {
    let z = lv(random_logits(rng));
    let p = SoftmaxParams {
        a: rng.random_range(-20.0..=20.0),
        b: random_tau(rng),
    };
    let g = general_softmax(&z, p).map_err(|e| e.to_string())?;
    let s = softmax_t(&z, p.b).map_err(|e| e.to_string())?;
    let err = max_abs_diff(g.values(), s.values());
    if err < 1e-12 {
        Ok(())
    } else {
        Err(format!("difference {err:e} for {p:?}, z = {}", show(z.values())))
    }
}

fn softmax_is_probability(rng: &mut Rng, _: Standardizer) -> std::result::Result<(), String> {
    let z = random_logits(rng);
    // occasionally extreme temperatures
    let t = 10f64.powf(rng.random_range(-4.0..=4.0));
    let q = softmax_t(&lv(z.clone()), t).map_err(|e| e.to_string())?;
    ProbabilityVector::new(q.into_vec())
        .map(|_| ())
        .map_err(|e| format!("{e} for T = {t}, z = {}", show(&z)))
}

fn random_pair(rng: &mut Rng) -> (ProbabilityVector, ProbabilityVector) {
    let k = rng.random_range(2..=100);
    let p = ProbabilityVector::new(random_distribution(rng, k)).expect("softmax output");
    let q = ProbabilityVector::new(random_distribution(rng, k)).expect("softmax output");
    (p, q)
}

fn kl_nonnegative(rng: &mut Rng, _: Standardizer) -> std::result::Result<(), String> {
    let (p, q) = random_pair(rng);
    let kl = kl_div(&p, &q).map_err(|e| e.to_string())?;
    if kl >= 0.0 {
        Ok(())
    } else {
        Err(format!("KL = {kl} for p = {}, q = {}", show(p.values()), show(q.values())))
    }
}

fn ce_kl_identity(rng: &mut Rng, _: Standardizer) -> std::result::Result<(), String> {
    let (p, q) = random_pair(rng);
    let ce = cross_entropy(&p, &q).map_err(|e| e.to_string())?;
    let kl = kl_div(&p, &q).map_err(|e| e.to_string())?;
    let h = entropy(&p);
    let err = (ce - kl - h).abs();
    if err < 1e-9 {
        Ok(())
    } else {
        Err(format!("CE - KL - H = {err:e} for p = {}", show(p.values())))
    }
}

fn kl_ce_gradients(rng: &mut Rng, _: Standardizer) -> std::result::Result<(), String> {
    let k = rng.random_range(2..=100);
    let p = ProbabilityVector::new(random_distribution(rng, k)).expect("softmax output");
    let z = lv(random_logits_k(rng, k));
    let t = random_tau(rng);
    let a = kl_grad_wrt_logits(&p, &z, t).map_err(|e| e.to_string())?;
    let b = cross_entropy_grad_wrt_logits(&p, &z, t).map_err(|e| e.to_string())?;
    let err = max_abs_diff(&a, &b);
    if err < 1e-12 {
        Ok(())
    } else {
        Err(format!("gradients differ by {err:e} for z = {}", show(z.values())))
    }
}

/// Random objective instance: teacher, student, label, config.
pub fn random_kd_instance(rng: &mut Rng, k: usize) -> (LogitVector, LogitVector, usize, KdConfig) {
    let v = lv(random_logits_k(rng, k));
    let z = lv(random_logits_k(rng, k));
    let label = rng.random_range(0..k);
    let tau = rng.random_range(0.5..=5.0);
    let scheme = if rng.random_bool(0.5) {
        TemperatureScheme::ZScore
    } else {
        TemperatureScheme::SharedConstant {
            t: rng.random_range(0.5..=5.0),
        }
    };
    let cfg = KdConfig {
        lambda_ce: rng.random_range(0.0..=2.0),
        lambda_kd: rng.random_range(0.1..=10.0),
        tau,
        scheme,
    };
    (v, z, label, cfg)
}

/// Central-difference gradient of the total objective in the student logits.
pub fn finite_difference_grad(
    teacher: &LogitVector,
    student: &LogitVector,
    label: usize,
    cfg: &KdConfig,
    step: f64,
) -> Vec<f64> {
    let total = |z: Vec<f64>| {
        kd_loss_and_grad(teacher, &lv(z), label, cfg, 0.0)
            .expect("valid instance")
            .0
            .total
    };
    (0..student.len())
        .map(|i| {
            let mut up = student.values().to_vec();
            let mut down = up.clone();
            up[i] += step;
            down[i] -= step;
            (total(up) - total(down)) / (2.0 * step)
        })
        .collect()
}

/// Denominator floor for [`relative_error`]. Gradients that vanish
/// analytically (two-class Z-score KD, for one) would otherwise divide
/// finite-difference rounding noise by zero.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-3;

/// `||a - b||_2 / max(||a||_2, ||b||_2, RELATIVE_ERROR_FLOOR)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(RELATIVE_ERROR_FLOOR)
}

fn kd_grad_fd(rng: &mut Rng, _: Standardizer) -> std::result::Result<(), String> {
    let k = rng.random_range(2..=20);
    let (v, z, label, cfg) = random_kd_instance(rng, k);
    let (_, analytic) = kd_loss_and_grad(&v, &z, label, &cfg, 0.0).map_err(|e| e.to_string())?;
    let numeric = finite_difference_grad(&v, &z, label, &cfg, 1e-5);
    let err = relative_error(&analytic, &numeric);
    if err < 1e-5 {
        Ok(())
    } else {
        Err(format!(
            "relative error {err:e} for v = {}, z = {}, label {label}, {cfg:?}",
            show(v.values()),
            show(z.values())
        ))
    }
}

fn shared_grad_sums_to_zero(rng: &mut Rng, _: Standardizer) -> std::result::Result<(), String> {
    let k = rng.random_range(2..=100);
    let v = lv(random_logits_k(rng, k));
    let z = lv(random_logits_k(rng, k));
    let cfg = KdConfig {
        lambda_ce: 0.0,
        lambda_kd: 1.0,
        tau: random_tau(rng),
        scheme: TemperatureScheme::SharedConstant { t: random_tau(rng) },
    };
    let (_, g) = kd_loss_and_grad(&v, &z, 0, &cfg, 0.0).map_err(|e| e.to_string())?;
    let sum: f64 = g.iter().sum();
    let scale = g.iter().map(|x| x.abs()).sum::<f64>().max(1.0);
    if sum.abs() < 1e-12 * scale {
        Ok(())
    } else {
        Err(format!("gradient sums to {sum:e} for z = {}", show(z.values())))
    }
}
