//! Logit statistics, temperature softmax and Z-score standardization.
//!
//! Everything here is a pure function over `f64` slices wrapped in small
//! validated newtypes. Standard deviations use the population divisor `K`;
//! the `sqrt(K - 1) / tau` bound on standardized logits depends on it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Standard deviations below this are rejected by [`zscore`].
pub const MIN_STD: f64 = 1e-12;

/// Tolerance on `sum(p) == 1` when validating a [`ProbabilityVector`].
pub const PROB_SUM_TOL: f64 = 1e-12;

/// Raw pre-softmax scores for one sample. Always finite, length at least 2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::InvalidLogits(format!(
                "need at least 2 classes, got {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidLogits(format!(
                "entry {i} is not finite ({})",
                values[i]
            )));
        }
        Ok(Self(values))
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        Self::new(values.to_vec())
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    /// Number of classes `K`.
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// `a * z + b` elementwise.
    pub fn affine(&self, scale: f64, shift: f64) -> Result<Self> {
        Self::new(self.0.iter().map(|v| scale * v + shift).collect())
    }
}

impl TryFrom<Vec<f64>> for LogitVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<LogitVector> for Vec<f64> {
    fn from(v: LogitVector) -> Self {
        v.0
    }
}

/// A discrete distribution over `K` classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbabilityVector(Vec<f64>);

impl ProbabilityVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidProbability("empty vector".into()));
        }
        for (i, &p) in values.iter().enumerate() {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidProbability(format!(
                    "entry {i} = {p} outside [0, 1]"
                )));
            }
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::InvalidProbability(format!(
                "entries sum to {sum}, not 1"
            )));
        }
        Ok(Self(values))
    }

    pub fn uniform(k: usize) -> Result<Self> {
        Self::new(vec![1.0 / k as f64; k])
    }

    pub fn one_hot(index: usize, k: usize) -> Result<Self> {
        if index >= k {
            return Err(Error::InvalidParameter(format!(
                "class index {index} out of range for K = {k}"
            )));
        }
        let mut v = vec![0.0; k];
        v[index] = 1.0;
        Ok(Self(v))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for ProbabilityVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ProbabilityVector> for Vec<f64> {
    fn from(v: ProbabilityVector) -> Self {
        v.0
    }
}

/// Per-vector mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogitStats {
    pub mean: f64,
    pub std: f64,
}

/// Z-score standardized logits: zero mean, standard deviation `1 / tau`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizedLogits {
    pub values: Vec<f64>,
    pub tau: f64,
}

impl StandardizedLogits {
    pub fn softmax(&self) -> ProbabilityVector {
        ProbabilityVector(stable_softmax(&self.values, 1.0))
    }

    pub fn to_logits(&self) -> Result<LogitVector> {
        LogitVector::new(self.values.clone())
    }
}

/// Shift `a` and scale `b` of the general softmax `exp((z - a) / b)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxParams {
    pub a: f64,
    pub b: f64,
}

impl SoftmaxParams {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(b > 0.0 && b.is_finite()) || !a.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "softmax params need finite a and b > 0, got a = {a}, b = {b}"
            )));
        }
        Ok(Self { a, b })
    }
}

pub(crate) fn mean_std(values: &[f64]) -> (f64, f64) {
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / k;
    (mean, var.sqrt())
}

pub fn logit_stats(z: &LogitVector) -> LogitStats {
    let (mean, std) = mean_std(z.values());
    LogitStats { mean, std }
}

pub(crate) fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "temperature must be finite and > 0, got {t}"
        )))
    }
}

/// `exp(x / t) / sum(exp(x / t))` with the maximum subtracted first.
pub(crate) fn stable_softmax(x: &[f64], t: f64) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x.iter().map(|v| ((v - max) / t).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

/// Temperature softmax `q_k = exp(z_k / T) / sum_m exp(z_m / T)`.
pub fn softmax_t(z: &LogitVector, temperature: f64) -> Result<ProbabilityVector> {
    check_temperature(temperature)?;
    Ok(ProbabilityVector(stable_softmax(z.values(), temperature)))
}

/// Softmax of `(z - a) / b`. The shift cancels, so this equals
/// `softmax_t(z, b)` for every `a`.
pub fn general_softmax(z: &LogitVector, p: SoftmaxParams) -> Result<ProbabilityVector> {
    SoftmaxParams::new(p.a, p.b)?;
    let shifted: Vec<f64> = z.values().iter().map(|v| (v - p.a) / p.b).collect();
    Ok(ProbabilityVector(stable_softmax(&shifted, 1.0)))
}

/// Standardize with a caller-chosen floor on the standard deviation.
///
/// Returns the standardized values and the divisor `sigma_eff` actually used,
/// `max(sigma, floor)`.
pub(crate) fn standardize_with_floor(values: &[f64], tau: f64, floor: f64) -> (Vec<f64>, f64, f64) {
    let (mean, std) = mean_std(values);
    let sigma = std.max(floor);
    let denom = sigma * tau;
    let out = values.iter().map(|v| (v - mean) / denom).collect();
    (out, std, sigma)
}

/// Z-score standardization `(z - mean) / (std * tau)`.
///
/// Fails with [`Error::DegenerateLogits`] when the population standard
/// deviation is below [`MIN_STD`].
pub fn zscore(z: &LogitVector, tau: f64) -> Result<StandardizedLogits> {
    check_temperature(tau)?;
    let (values, std, _) = standardize_with_floor(z.values(), tau, 0.0);
    if std < MIN_STD {
        return Err(Error::DegenerateLogits {
            std,
            min_std: MIN_STD,
        });
    }
    Ok(StandardizedLogits { values, tau })
}

/// Like [`zscore`] but substitutes `max(std, eps_guard)` for the standard
/// deviation instead of failing. Used by training loops, where a fresh
/// network can emit near-constant logits.
pub fn zscore_guarded(z: &LogitVector, tau: f64, eps_guard: f64) -> Result<StandardizedLogits> {
    if eps_guard <= 0.0 {
        return zscore(z, tau);
    }
    check_temperature(tau)?;
    let (values, _, _) = standardize_with_floor(z.values(), tau, eps_guard);
    Ok(StandardizedLogits { values, tau })
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(z: &LogitVector) -> usize {
    argmax_slice(z.values())
}

pub(crate) fn argmax_slice(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate().skip(1) {
        if v > x[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lv(v: &[f64]) -> LogitVector {
        LogitVector::from_slice(v).unwrap()
    }

    #[test]
    fn rejects_short_and_non_finite() {
        assert!(LogitVector::new(vec![1.0]).is_err());
        assert!(LogitVector::new(vec![1.0, f64::NAN]).is_err());
        assert!(LogitVector::new(vec![f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn probability_validation() {
        assert!(ProbabilityVector::new(vec![0.5, 0.5]).is_ok());
        assert!(ProbabilityVector::new(vec![0.6, 0.5]).is_err());
        assert!(ProbabilityVector::new(vec![1.5, -0.5]).is_err());
        assert!(ProbabilityVector::one_hot(3, 3).is_err());
    }

    #[test]
    fn stats_examples() {
        let s = logit_stats(&lv(&[1.0, 2.0, 3.0]));
        assert!((s.mean - 2.0).abs() < 1e-15);
        assert!((s.std - 0.816_496_580_927_726).abs() < 1e-15);

        let s = logit_stats(&lv(&[5.0, 5.0, 5.0, 5.0]));
        assert_eq!(s.mean, 5.0);
        assert_eq!(s.std, 0.0);

        let s = logit_stats(&lv(&[-1.0, 1.0]));
        assert_eq!(s.mean, 0.0);
        assert_eq!(s.std, 1.0);
    }

    #[test]
    fn softmax_examples() {
        for t in [0.5, 1.0, 7.0] {
            let q = softmax_t(&lv(&[3.3; 5]), t).unwrap();
            for p in q.values() {
                assert!((p - 0.2).abs() < 1e-15);
            }
        }
        assert_eq!(softmax_t(&lv(&[0.0, 0.0]), 1.0).unwrap().values(), &[0.5, 0.5]);

        // high-precision reference values
        let expected = [
            0.090_030_573_170_380_46,
            0.244_728_471_054_797_65,
            0.665_240_955_774_821_9,
        ];
        let q = softmax_t(&lv(&[1.0, 2.0, 3.0]), 1.0).unwrap();
        for (p, e) in q.values().iter().zip(expected) {
            assert!((p - e).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let q = softmax_t(&lv(&[1e308, -1e308, 0.0]), 1e-3).unwrap();
        assert_eq!(q.values(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_rejects_bad_temperature() {
        let z = lv(&[1.0, 2.0]);
        assert!(matches!(softmax_t(&z, 0.0), Err(Error::InvalidParameter(_))));
        assert!(matches!(softmax_t(&z, -1.0), Err(Error::InvalidParameter(_))));
        assert!(softmax_t(&z, f64::NAN).is_err());
    }

    #[test]
    fn general_softmax_shift_cancels() {
        let z = lv(&[1.0, 2.0, 3.0]);
        let g = general_softmax(&z, SoftmaxParams { a: 7.0, b: 2.0 }).unwrap();
        let s = softmax_t(&z, 2.0).unwrap();
        for (a, b) in g.values().iter().zip(s.values()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(general_softmax(&z, SoftmaxParams { a: 0.0, b: 0.0 }).is_err());
    }

    #[test]
    fn general_softmax_with_mean_and_std_is_zscore_softmax() {
        let z = lv(&[1.0, 2.0, 3.0]);
        let s = logit_stats(&z);
        let g = general_softmax(&z, SoftmaxParams { a: s.mean, b: s.std }).unwrap();
        let viaz = zscore(&z, 1.0).unwrap().softmax();
        for (a, b) in g.values().iter().zip(viaz.values()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zscore_examples() {
        let out = zscore(&lv(&[1.0, 2.0, 3.0]), 1.0).unwrap();
        let expected = [-1.224_744_871_391_589, 0.0, 1.224_744_871_391_589];
        for (a, b) in out.values.iter().zip(expected) {
            assert!((a - b).abs() < 1e-14);
        }

        let out = zscore(&lv(&[-1.0, 1.0]), 2.0).unwrap();
        assert_eq!(out.values, vec![-0.5, 0.5]);

        assert!(matches!(
            zscore(&lv(&[5.0, 5.0, 5.0]), 1.0),
            Err(Error::DegenerateLogits { .. })
        ));
        assert!(zscore(&lv(&[1.0, 2.0]), 0.0).is_err());
    }

    #[test]
    fn guarded_zscore_uses_floor() {
        let z = lv(&[5.0, 5.0, 5.0]);
        let out = zscore_guarded(&z, 2.0, 1e-8).unwrap();
        assert_eq!(out.values, vec![0.0; 3]);
        // above the floor it matches the strict version bit for bit
        let z = lv(&[0.3, -1.0, 2.5]);
        assert_eq!(
            zscore_guarded(&z, 2.0, 1e-8).unwrap(),
            zscore(&z, 2.0).unwrap()
        );
    }

    #[test]
    fn zscore_attains_bound_on_one_hot() {
        for k in [2usize, 3, 10, 100] {
            let mut v = vec![0.0; k];
            v[0] = 1.0;
            let tau = 1.7;
            let out = zscore(&lv(&v), tau).unwrap();
            let bound = ((k - 1) as f64).sqrt() / tau;
            assert!((out.values[0] - bound).abs() < 1e-12);
        }
    }

    #[test]
    fn argmax_examples() {
        assert_eq!(argmax(&lv(&[1.0, 3.0, 2.0])), 1);
        assert_eq!(argmax(&lv(&[2.0, 2.0])), 0);
        let z = lv(&[0.1, -4.0, 9.0, 3.0]);
        let s = zscore(&z, 2.0).unwrap().to_logits().unwrap();
        assert_eq!(argmax(&s), argmax(&z));
    }

    #[test]
    fn serde_validates() {
        let z: LogitVector = serde_json::from_str("[1.0, 2.0]").unwrap();
        assert_eq!(z.values(), &[1.0, 2.0]);
        assert!(serde_json::from_str::<LogitVector>("[1.0]").is_err());
        assert!(serde_json::from_str::<ProbabilityVector>("[0.2, 0.2]").is_err());
    }
}
