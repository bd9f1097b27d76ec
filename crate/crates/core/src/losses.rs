//! KL divergence, cross-entropy and the combined distillation objective
//! `lambda_ce * CE(y, softmax(z)) + lambda_kd * tau^2 * KL(q(v) || q(z))`
//! together with its exact gradient with respect to the student logits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::logitcore::{
    check_temperature, stable_softmax, standardize_with_floor, LogitVector, ProbabilityVector,
    MIN_STD,
};

fn check_pair(p: &ProbabilityVector, q: &ProbabilityVector) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!(
            "distributions have lengths {} and {}",
            p.len(),
            q.len()
        )));
    }
    for (i, (&pi, &qi)) in p.values().iter().zip(q.values()).enumerate() {
        if pi > 0.0 && qi == 0.0 {
            return Err(Error::InfiniteDivergence { index: i });
        }
    }
    Ok(())
}

/// Forward KL `sum_k p_k ln(p_k / q_k)` with `0 ln 0 = 0`. Clamped at zero
/// so rounding can never report a negative divergence.
pub fn kl_div(p: &ProbabilityVector, q: &ProbabilityVector) -> Result<f64> {
    check_pair(p, q)?;
    let kl: f64 = p
        .values()
        .iter()
        .zip(q.values())
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum();
    Ok(kl.max(0.0))
}

/// `-sum_k p_k ln q_k`.
pub fn cross_entropy(p: &ProbabilityVector, q: &ProbabilityVector) -> Result<f64> {
    check_pair(p, q)?;
    Ok(-p
        .values()
        .iter()
        .zip(q.values())
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * qi.ln())
        .sum::<f64>())
}

/// Shannon entropy in nats.
pub fn entropy(p: &ProbabilityVector) -> f64 {
    -p.values()
        .iter()
        .filter(|&&pi| pi > 0.0)
        .map(|&pi| pi * pi.ln())
        .sum::<f64>()
}

/// Gradient of `KL(p || softmax(z / T))` with respect to `z`, assembled from
/// the full log-softmax Jacobian `d ln q_k / d z_j = (delta_kj - q_j) / T`.
pub fn kl_grad_wrt_logits(p: &ProbabilityVector, z: &LogitVector, t: f64) -> Result<Vec<f64>> {
    check_temperature(t)?;
    if p.len() != z.len() {
        return Err(Error::Shape("p and z differ in length".into()));
    }
    let q = stable_softmax(z.values(), t);
    let k = z.len();
    let mut grad = vec![0.0; k];
    for (j, g) in grad.iter_mut().enumerate() {
        for kk in 0..k {
            let delta = if kk == j { 1.0 } else { 0.0 };
            let dlogq = (delta - q[j]) / t;
            *g -= p.values()[kk] * dlogq;
        }
    }
    Ok(grad)
}

/// Gradient of `CE(p, softmax(z / T))` with respect to `z`, closed form
/// `(q * sum(p) - p) / T`.
pub fn cross_entropy_grad_wrt_logits(
    p: &ProbabilityVector,
    z: &LogitVector,
    t: f64,
) -> Result<Vec<f64>> {
    check_temperature(t)?;
    if p.len() != z.len() {
        return Err(Error::Shape("p and z differ in length".into()));
    }
    let q = stable_softmax(z.values(), t);
    let mass: f64 = p.values().iter().sum();
    Ok(q.iter()
        .zip(p.values())
        .map(|(qi, pi)| (qi * mass - pi) / t)
        .collect())
}

/// How logits are turned into soft targets for the KD term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TemperatureScheme {
    /// Classical KD: both sides use `softmax(logits / t)`.
    SharedConstant { t: f64 },
    /// Both sides use `softmax(zscore(logits, tau))`.
    #[serde(rename = "zscore")]
    ZScore,
}

impl TemperatureScheme {
    pub fn name(&self) -> &'static str {
        match self {
            TemperatureScheme::SharedConstant { .. } => "shared_constant",
            TemperatureScheme::ZScore => "zscore",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KdConfig {
    pub lambda_ce: f64,
    pub lambda_kd: f64,
    pub tau: f64,
    pub scheme: TemperatureScheme,
}

impl Default for KdConfig {
    fn default() -> Self {
        Self {
            lambda_ce: 1.0,
            lambda_kd: 9.0,
            tau: 2.0,
            scheme: TemperatureScheme::ZScore,
        }
    }
}

impl KdConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lambda_ce >= 0.0 && self.lambda_ce.is_finite()) {
            return bad(format!("lambda_ce must be >= 0, got {}", self.lambda_ce));
        }
        if !(self.lambda_kd >= 0.0 && self.lambda_kd.is_finite()) {
            return bad(format!("lambda_kd must be >= 0, got {}", self.lambda_kd));
        }
        if self.lambda_ce + self.lambda_kd <= 0.0 {
            return bad("lambda_ce + lambda_kd must be > 0".into());
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be > 0, got {}", self.tau));
        }
        if let TemperatureScheme::SharedConstant { t } = self.scheme {
            if !(t > 0.0 && t.is_finite()) {
                return bad(format!("shared temperature must be > 0, got {t}"));
            }
        }
        Ok(())
    }

    /// The same weights with the scheme swapped.
    pub fn with_scheme(mut self, scheme: TemperatureScheme) -> Self {
        self.scheme = scheme;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce_hard: f64,
    pub kd: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn compose(ce_hard: f64, kd: f64, cfg: &KdConfig) -> Self {
        Self {
            ce_hard,
            kd,
            total: cfg.lambda_ce * ce_hard + cfg.lambda_kd * cfg.tau * cfg.tau * kd,
        }
    }
}

/// Soft targets of one side under a scheme, with what the gradient needs.
struct SoftSide {
    probs: Vec<f64>,
    /// Logits after scaling / standardization (the softmax argument).
    transformed: Vec<f64>,
    /// Effective divisor applied to centred logits (`sigma * tau`) or `t`.
    scale: f64,
    /// True when the standard deviation sat below the floor.
    clamped: bool,
}

fn soft_side(z: &[f64], cfg: &KdConfig, eps_guard: f64) -> Result<SoftSide> {
    match cfg.scheme {
        TemperatureScheme::SharedConstant { t } => Ok(SoftSide {
            probs: stable_softmax(z, t),
            transformed: z.iter().map(|v| v / t).collect(),
            scale: t,
            clamped: false,
        }),
        TemperatureScheme::ZScore => {
            let (values, std, sigma) = standardize_with_floor(z, cfg.tau, eps_guard.max(0.0));
            if eps_guard <= 0.0 && std < MIN_STD {
                return Err(Error::DegenerateLogits {
                    std,
                    min_std: MIN_STD,
                });
            }
            Ok(SoftSide {
                probs: stable_softmax(&values, 1.0),
                transformed: values,
                scale: sigma * cfg.tau,
                clamped: std < eps_guard,
            })
        }
    }
}

/// Soft-target distributions `(teacher, student)` used by the KD term.
pub fn scheme_probabilities(
    teacher_logits: &LogitVector,
    student_logits: &LogitVector,
    cfg: &KdConfig,
) -> Result<(ProbabilityVector, ProbabilityVector)> {
    cfg.validate()?;
    let t = soft_side(teacher_logits.values(), cfg, 0.0)?;
    let s = soft_side(student_logits.values(), cfg, 0.0)?;
    Ok((
        ProbabilityVector::new(t.probs)?,
        ProbabilityVector::new(s.probs)?,
    ))
}

fn check_inputs(teacher: &LogitVector, student: &LogitVector, label: usize) -> Result<()> {
    if teacher.len() != student.len() {
        return Err(Error::Shape(format!(
            "teacher has {} classes, student {}",
            teacher.len(),
            student.len()
        )));
    }
    if label >= student.len() {
        return Err(Error::InvalidParameter(format!(
            "label {label} out of range for K = {}",
            student.len()
        )));
    }
    Ok(())
}

fn plain_kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum::<f64>()
        .max(0.0)
}

/// Loss and gradient in one pass. `eps_guard > 0` floors the standard
/// deviation under the Z-score scheme instead of failing; the gradient is
/// that of the floored function.
pub fn kd_loss_and_grad(
    teacher_logits: &LogitVector,
    student_logits: &LogitVector,
    label: usize,
    cfg: &KdConfig,
    eps_guard: f64,
) -> Result<(LossBreakdown, Vec<f64>)> {
    cfg.validate()?;
    check_inputs(teacher_logits, student_logits, label)?;
    let k = student_logits.len();

    let plain = stable_softmax(student_logits.values(), 1.0);
    let ce_hard = -plain[label].ln();
    let mut grad: Vec<f64> = plain.iter().map(|q| cfg.lambda_ce * q).collect();
    grad[label] -= cfg.lambda_ce;

    let teacher = soft_side(teacher_logits.values(), cfg, eps_guard)?;
    let student = soft_side(student_logits.values(), cfg, eps_guard)?;
    let kd = plain_kl(&teacher.probs, &student.probs);
    let weight = cfg.lambda_kd * cfg.tau * cfg.tau;

    // dKL / d(softmax argument)
    let g: Vec<f64> = student
        .probs
        .iter()
        .zip(&teacher.probs)
        .map(|(q, p)| q - p)
        .collect();

    match cfg.scheme {
        TemperatureScheme::SharedConstant { t } => {
            for (out, gi) in grad.iter_mut().zip(&g) {
                *out += weight * gi / t;
            }
        }
        TemperatureScheme::ZScore => {
            // Jacobian of the standardization: (I - 11'/K - s s' tau^2 / K) / (sigma tau)
            let kf = k as f64;
            let g_mean = g.iter().sum::<f64>() / kf;
            let s = &student.transformed;
            let sg: f64 = if student.clamped {
                0.0
            } else {
                s.iter().zip(&g).map(|(a, b)| a * b).sum()
            };
            let tau2 = cfg.tau * cfg.tau;
            for i in 0..k {
                let jg = (g[i] - g_mean - s[i] * tau2 * sg / kf) / student.scale;
                grad[i] += weight * jg;
            }
        }
    }

    Ok((LossBreakdown::compose(ce_hard, kd, cfg), grad))
}

pub fn kd_objective(
    teacher_logits: &LogitVector,
    student_logits: &LogitVector,
    label: usize,
    cfg: &KdConfig,
) -> Result<LossBreakdown> {
    kd_loss_and_grad(teacher_logits, student_logits, label, cfg, 0.0).map(|(l, _)| l)
}

/// `d total / d student_logits`.
pub fn kd_objective_grad(
    teacher_logits: &LogitVector,
    student_logits: &LogitVector,
    label: usize,
    cfg: &KdConfig,
) -> Result<Vec<f64>> {
    kd_loss_and_grad(teacher_logits, student_logits, label, cfg, 0.0).map(|(_, g)| g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::logitcore::softmax_t;

    fn pv(v: &[f64]) -> ProbabilityVector {
        ProbabilityVector::new(v.to_vec()).unwrap()
    }

    fn lv(v: &[f64]) -> LogitVector {
        LogitVector::from_slice(v).unwrap()
    }

    #[test]
    fn kl_examples() {
        let p = pv(&[0.2, 0.3, 0.5]);
        assert_eq!(kl_div(&p, &p).unwrap(), 0.0);
        let kl = kl_div(&pv(&[0.5, 0.5]), &pv(&[0.9, 0.1])).unwrap();
        assert!((kl - 0.510_825_623_765_990_7).abs() < 1e-15);
    }

    #[test]
    fn kl_zero_terms_and_infinite_divergence() {
        let kl = kl_div(&pv(&[0.0, 1.0]), &pv(&[0.5, 0.5])).unwrap();
        assert!((kl - 2f64.ln()).abs() < 1e-15);
        assert!(matches!(
            kl_div(&pv(&[0.5, 0.5]), &pv(&[1.0, 0.0])),
            Err(Error::InfiniteDivergence { index: 1 })
        ));
        assert!(matches!(
            cross_entropy(&pv(&[0.5, 0.5]), &pv(&[1.0, 0.0])),
            Err(Error::InfiniteDivergence { .. })
        ));
        assert!(kl_div(&pv(&[0.5, 0.5]), &pv(&[0.2, 0.3, 0.5])).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let ce = cross_entropy(&ProbabilityVector::one_hot(2, 4).unwrap(), &ProbabilityVector::uniform(4).unwrap()).unwrap();
        assert!((ce - 4f64.ln()).abs() < 1e-15);
        let ce = cross_entropy(&pv(&[0.5, 0.5]), &pv(&[0.9, 0.1])).unwrap();
        assert!((ce - 1.203_972_804_325_936).abs() < 1e-15);
        let p = pv(&[0.1, 0.6, 0.3]);
        assert!((cross_entropy(&p, &p).unwrap() - entropy(&p)).abs() < 1e-15);
    }

    #[test]
    fn identical_logits_give_zero_kd() {
        let v = lv(&[1.5, -0.3, 0.2, 4.0]);
        for scheme in [TemperatureScheme::ZScore, TemperatureScheme::SharedConstant { t: 3.0 }] {
            let cfg = KdConfig::default().with_scheme(scheme);
            let l = kd_objective(&v, &v, 1, &cfg).unwrap();
            assert_eq!(l.kd, 0.0);
            assert_eq!(l.total, cfg.lambda_ce * l.ce_hard);
        }
    }

    #[test]
    fn zscore_kd_ignores_positive_affine_student() {
        let v = lv(&[1.5, -0.3, 0.2, 4.0]);
        let z = v.affine(0.37, -5.0).unwrap();
        let l = kd_objective(&v, &z, 0, &KdConfig::default()).unwrap();
        assert!(l.kd < 1e-15, "kd = {}", l.kd);
    }

    #[test]
    fn shared_constant_worked_example() {
        let v = lv(&[2.0, 0.0, -1.0]);
        let z = lv(&[0.0, 0.0, 0.0]);
        let cfg = KdConfig {
            lambda_ce: 0.0,
            lambda_kd: 1.0,
            tau: 4.0,
            scheme: TemperatureScheme::SharedConstant { t: 4.0 },
        };
        let l = kd_objective(&v, &z, 0, &cfg).unwrap();
        // 16 * KL(softmax([2,0,-1]/4) || uniform), evaluated at 30 digits
        assert!((l.total - 0.807_710_563_935_186_9).abs() < 1e-14);
    }

    #[test]
    fn zero_gradient_at_teacher() {
        let v = lv(&[0.4, 1.0, -2.0, 0.0]);
        for scheme in [TemperatureScheme::ZScore, TemperatureScheme::SharedConstant { t: 2.0 }] {
            let cfg = KdConfig { lambda_ce: 0.0, ..KdConfig::default() }.with_scheme(scheme);
            let g = kd_objective_grad(&v, &v, 0, &cfg).unwrap();
            assert!(g.iter().all(|x| x.abs() < 1e-15), "{g:?}");
        }
    }

    #[test]
    fn shared_kd_gradient_sums_to_zero() {
        let cfg = KdConfig {
            lambda_ce: 0.0,
            lambda_kd: 1.0,
            tau: 2.0,
            scheme: TemperatureScheme::SharedConstant { t: 2.0 },
        };
        let g = kd_objective_grad(&lv(&[3.0, 1.0, -2.0, 0.5]), &lv(&[0.0, 1.0, 2.0, 3.0]), 2, &cfg).unwrap();
        assert!(g.iter().sum::<f64>().abs() < 1e-15);
    }

    #[test]
    fn kl_and_ce_gradients_agree() {
        let p = softmax_t(&lv(&[1.0, -1.0, 0.5]), 1.0).unwrap();
        let z = lv(&[0.2, 0.1, -3.0]);
        let a = kl_grad_wrt_logits(&p, &z, 2.0).unwrap();
        let b = cross_entropy_grad_wrt_logits(&p, &z, 2.0).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn degenerate_student_under_zscore() {
        let v = lv(&[1.0, 2.0, 3.0]);
        let z = lv(&[0.5, 0.5, 0.5]);
        assert!(matches!(
            kd_objective(&v, &z, 0, &KdConfig::default()),
            Err(Error::DegenerateLogits { .. })
        ));
        let (l, g) = kd_loss_and_grad(&v, &z, 0, &KdConfig::default(), 1e-8).unwrap();
        assert!(l.total.is_finite());
        assert!(g.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn config_validation() {
        assert!(KdConfig::default().validate().is_ok());
        let c = KdConfig { lambda_ce: 0.0, lambda_kd: 0.0, ..KdConfig::default() };
        assert!(c.validate().is_err());
        let c = KdConfig { tau: 0.0, ..KdConfig::default() };
        assert!(c.validate().is_err());
        let c = KdConfig::default().with_scheme(TemperatureScheme::SharedConstant { t: -1.0 });
        assert!(c.validate().is_err());
        let v = lv(&[1.0, 2.0]);
        assert!(kd_objective(&v, &v, 2, &KdConfig::default()).is_err());
    }

    #[test]
    fn scheme_serde_shape() {
        let c: KdConfig = serde_json::from_str(
            r#"{"lambda_ce":1,"lambda_kd":9,"tau":2,"scheme":{"shared_constant":{"t":2}}}"#,
        )
        .unwrap();
        assert_eq!(c.scheme, TemperatureScheme::SharedConstant { t: 2.0 });
        let c: KdConfig =
            serde_json::from_str(r#"{"lambda_ce":1,"lambda_kd":9,"tau":2,"scheme":"zscore"}"#).unwrap();
        assert_eq!(c.scheme, TemperatureScheme::ZScore);
        assert!(serde_json::from_str::<KdConfig>(
            r#"{"lambda_ce":1,"lambda_kd":9,"tau":2,"scheme":"zscore","extra":1}"#
        )
        .is_err());
    }
}
