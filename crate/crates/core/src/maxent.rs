//! Entropy maximization under a linear expectation constraint.
//!
//! The maximizer of `H(q)` over the simplex subject to `sum_k l_k q_k = c`
//! is the Boltzmann distribution `exp(m * l_k) / Z`. [`solve_multiplier`]
//! finds `m` by bisection on the dual side; [`primal_maxent_oracle`] solves
//! the same problem directly over distributions so the two can be compared.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::logitcore::{stable_softmax, LogitVector, ProbabilityVector};
use crate::losses::entropy;

/// Default residual tolerance on the expectation constraint.
pub const DEFAULT_TOL: f64 = 1e-10;

const MAX_BRACKET_DOUBLINGS: usize = 1100;
const MAX_BISECTIONS: usize = 400;
const PRIMAL_MAX_ITERS: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaxEntProblem {
    pub logits: LogitVector,
    pub target_expectation: f64,
}

impl MaxEntProblem {
    /// The target must lie strictly between `min(logits)` and `max(logits)`;
    /// the endpoints are reached only in the zero-temperature limit.
    pub fn new(logits: LogitVector, target_expectation: f64) -> Result<Self> {
        let p = Self {
            logits,
            target_expectation,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.logits.values();
        let min = v.iter().copied().fold(f64::INFINITY, f64::min);
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let t = self.target_expectation;
        if !(t > min && t < max) {
            return Err(Error::UnattainableConstraint {
                target: t,
                min,
                max,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaxEntSolution {
    /// Lagrange multiplier on the expectation constraint (inverse temperature).
    pub multiplier: f64,
    pub distribution: ProbabilityVector,
    pub entropy: f64,
    /// `sum_k exp(multiplier * l_k)`. May overflow to infinity for extreme
    /// multipliers; `log_partition` stays finite.
    pub partition: f64,
    pub log_partition: f64,
    /// Final `|E - target|`.
    pub residual: f64,
}

/// `sum_k l_k softmax(m * l)_k`.
pub fn expectation_at(logits: &LogitVector, multiplier: f64) -> f64 {
    let v = logits.values();
    let scaled: Vec<f64> = v.iter().map(|l| multiplier * l).collect();
    let q = stable_softmax(&scaled, 1.0);
    v.iter().zip(&q).map(|(l, p)| l * p).sum()
}

fn boltzmann(logits: &LogitVector, multiplier: f64, target: f64) -> Result<MaxEntSolution> {
    let v = logits.values();
    let scaled: Vec<f64> = v.iter().map(|l| multiplier * l).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted_sum: f64 = scaled.iter().map(|s| (s - max).exp()).sum();
    let log_partition = max + shifted_sum.ln();
    let distribution = ProbabilityVector::new(stable_softmax(&scaled, 1.0))?;
    let e: f64 = v.iter().zip(distribution.values()).map(|(l, p)| l * p).sum();
    Ok(MaxEntSolution {
        multiplier,
        entropy: entropy(&distribution),
        partition: scaled.iter().map(|s| s.exp()).sum(),
        log_partition,
        residual: (e - target).abs(),
        distribution,
    })
}

/// Bisection on the multiplier, expanding the bracket from `[-1, 1]` by
/// doubling until it contains the root.
pub fn solve_multiplier(problem: &MaxEntProblem, tol: f64) -> Result<MaxEntSolution> {
    problem.validate()?;
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter(format!("tol must be > 0, got {tol}")));
    }
    let target = problem.target_expectation;
    let f = |m: f64| expectation_at(&problem.logits, m) - target;

    let (mut lo, mut hi) = (-1.0_f64, 1.0_f64);
    let mut n = 0;
    while f(hi) < 0.0 {
        lo = hi;
        hi *= 2.0;
        n += 1;
        if n > MAX_BRACKET_DOUBLINGS {
            return Err(Error::Convergence {
                iterations: n,
                grad_norm: f(hi).abs(),
                last: vec![hi],
            });
        }
    }
    while f(lo) > 0.0 {
        hi = lo;
        lo *= 2.0;
        n += 1;
        if n > MAX_BRACKET_DOUBLINGS {
            return Err(Error::Convergence {
                iterations: n,
                grad_norm: f(lo).abs(),
                last: vec![lo],
            });
        }
    }

    let mut mid = 0.5 * (lo + hi);
    for _ in 0..MAX_BISECTIONS {
        mid = 0.5 * (lo + hi);
        let r = f(mid);
        if r.abs() <= tol {
            break;
        }
        if r < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * mid.abs().max(1.0) {
            break;
        }
    }
    boltzmann(&problem.logits, mid, target)
}

/// Solve the 2x2 system `M x = r` for symmetric `M`.
fn solve2(m: [[f64; 2]; 2], r: [f64; 2]) -> Option<[f64; 2]> {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    if det.abs() < f64::MIN_POSITIVE {
        return None;
    }
    Some([
        (r[0] * m[1][1] - m[0][1] * r[1]) / det,
        (m[0][0] * r[1] - m[1][0] * r[0]) / det,
    ])
}

/// Entropy maximization directly over distributions.
///
/// Projected ascent on `H(p)` over `{p > 0, sum p = 1, l . p = c}` starting
/// from the uniform distribution. Each step is the entropy gradient projected
/// onto the constraint plane in the metric `diag(p)` (the equality-constrained
/// Newton direction), with the residual of the two equality constraints
/// corrected in the same step and a fraction-to-boundary rule keeping `p`
/// strictly positive. Stops when both the constraint residual and the
/// projected gradient fall below `tol`. Never touches the multiplier
/// parametrization used by [`solve_multiplier`].
pub fn primal_maxent_oracle(problem: &MaxEntProblem, tol: f64) -> Result<ProbabilityVector> {
    problem.validate()?;
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter(format!("tol must be > 0, got {tol}")));
    }
    let l = problem.logits.values();
    let k = l.len();
    let target = problem.target_expectation;
    let mut p = vec![1.0 / k as f64; k];
    let mut last_norm = f64::INFINITY;

    for _ in 0..PRIMAL_MAX_ITERS {
        // gradient of H
        let grad: Vec<f64> = p.iter().map(|pi| -(pi.ln() + 1.0)).collect();
        let r = [
            1.0 - p.iter().sum::<f64>(),
            target - l.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>(),
        ];

        // A D A' with A = [1'; l'] and D = diag(p)
        let s0: f64 = p.iter().sum();
        let s1: f64 = p.iter().zip(l).map(|(pi, li)| pi * li).sum();
        let s2: f64 = p.iter().zip(l).map(|(pi, li)| pi * li * li).sum();
        let adg = [
            p.iter().zip(&grad).map(|(pi, g)| pi * g).sum::<f64>(),
            p.iter().zip(&grad).zip(l).map(|((pi, g), li)| pi * g * li).sum::<f64>(),
        ];
        let nu = solve2([[s0, s1], [s1, s2]], [r[0] - adg[0], r[1] - adg[1]])
            .ok_or_else(|| Error::InvalidParameter("constraint plane is degenerate".into()))?;
        let d: Vec<f64> = p
            .iter()
            .zip(&grad)
            .zip(l)
            .map(|((pi, g), li)| pi * (g + nu[0] + nu[1] * li))
            .collect();

        // projected gradient: the multiplier-corrected gradient g + A' nu
        let proj_norm = grad
            .iter()
            .zip(l)
            .map(|(g, li)| g + nu[0] + nu[1] * li)
            .zip(&p)
            .map(|(x, pi)| (x * pi.sqrt()).abs())
            .fold(0.0, f64::max);
        let resid = r[0].abs().max(r[1].abs());
        last_norm = proj_norm.max(resid);
        if resid <= tol && proj_norm <= tol {
            return ProbabilityVector::new(p);
        }

        let mut step = 1.0_f64;
        for (pi, di) in p.iter().zip(&d) {
            if *di < 0.0 {
                step = step.min(0.99 * -pi / di);
            }
        }
        for (pi, di) in p.iter_mut().zip(&d) {
            *pi += step * di;
        }
    }
    Err(Error::Convergence {
        iterations: PRIMAL_MAX_ITERS,
        grad_norm: last_norm,
        last: p,
    })
}

/// Form the KD maxent problem for the student: its expected logit under its
/// own distribution must match the expectation of its logits under the
/// teacher's Boltzmann distribution at `teacher_multiplier`. The solution is
/// again a Boltzmann distribution of the student logits, with its own
/// multiplier.
pub fn verify_kd_form(
    teacher: &LogitVector,
    student: &LogitVector,
    teacher_multiplier: f64,
) -> Result<MaxEntSolution> {
    if teacher.len() != student.len() {
        return Err(Error::Shape(format!(
            "teacher has {} classes, student {}",
            teacher.len(),
            student.len()
        )));
    }
    let scaled: Vec<f64> = teacher.values().iter().map(|v| teacher_multiplier * v).collect();
    let teacher_dist = stable_softmax(&scaled, 1.0);
    let target: f64 = student
        .values()
        .iter()
        .zip(&teacher_dist)
        .map(|(z, q)| z * q)
        .sum();
    let problem = MaxEntProblem::new(student.clone(), target)?;
    solve_multiplier(&problem, DEFAULT_TOL)
}
