//! Closed-form analysis of an idealized belief pipeline.
//!
//! When every module exactly minimizes
//! `S(p) = alpha * KL(p || p_y) + (1 - alpha) * KL(p || p_prev)`, its output is
//! the normalized geometric interpolation `p_prev^(1-alpha) * p_y^alpha`, and
//! after `i` modules the belief is `p_0^((1-alpha)^i) * p_y^(1 - (1-alpha)^i)`.
//! The descent checks below verify the telescoping KL bounds on arbitrary
//! traces, ideal or not.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SidError};
use crate::math::{kl_slices, Belief};

/// Slack below which a bound is considered violated.
pub const BOUND_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CascadeConfig {
    pub alpha: f64,
    pub depth: usize,
    pub p0: Belief,
    pub py: Belief,
}

impl CascadeConfig {
    pub fn new(alpha: f64, depth: usize, p0: Belief, py: Belief) -> Result<Self> {
        check_alpha(alpha)?;
        if p0.len() != py.len() {
            return Err(SidError::dim(format!(
                "p0 has {} classes, py has {}",
                p0.len(),
                py.len()
            )));
        }
        Ok(CascadeConfig {
            alpha,
            depth,
            p0,
            py,
        })
    }

    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        if self.p0.len() != self.py.len() {
            return Err(SidError::dim("p0 and py differ in length"));
        }
        Ok(())
    }
}

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(SidError::param(format!(
            "alpha = {alpha} must lie in (0, 1)"
        )))
    }
}

/// Belief sequence `p_0..p_L` with its divergences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CascadeTrace {
    pub beliefs: Vec<Belief>,
    /// `KL(p_i || p_y)` for `i = 0..=L`.
    pub kl_to_target: Vec<f64>,
    /// `KL(p_i || p_{i-1})` for `i = 1..=L`.
    pub kl_step: Vec<f64>,
}

impl CascadeTrace {
    /// Computes the divergence columns for a given belief sequence.
    pub fn from_beliefs(beliefs: Vec<Belief>, py: &Belief) -> Result<Self> {
        if beliefs.is_empty() {
            return Err(SidError::input("a trace needs at least p_0"));
        }
        if beliefs.iter().any(|b| b.len() != py.len()) {
            return Err(SidError::dim("trace beliefs differ in length from p_y"));
        }
        let kl_to_target = beliefs
            .iter()
            .map(|b| kl_slices(b.probs(), py.probs()))
            .collect();
        let kl_step = beliefs
            .windows(2)
            .map(|w| kl_slices(w[1].probs(), w[0].probs()))
            .collect();
        Ok(CascadeTrace {
            beliefs,
            kl_to_target,
            kl_step,
        })
    }

    /// Number of refinement steps `L`.
    pub fn depth(&self) -> usize {
        self.beliefs.len() - 1
    }

    /// Writes `step, p_0..p_{m-1}, kl_to_target, kl_step`; `kl_step` is empty on row 0.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let m = self.beliefs[0].len();
        let mut header = vec!["step".to_string()];
        header.extend((0..m).map(|k| format!("p{k}")));
        header.push("kl_to_target".into());
        header.push("kl_step".into());
        writeln!(w, "{}", header.join(","))?;
        for (i, b) in self.beliefs.iter().enumerate() {
            let mut fields = vec![i.to_string()];
            fields.extend(b.probs().iter().map(|p| format!("{p:.17e}")));
            fields.push(format!("{:.17e}", self.kl_to_target[i]));
            fields.push(if i == 0 {
                String::new()
            } else {
                format!("{:.17e}", self.kl_step[i - 1])
            });
            writeln!(w, "{}", fields.join(","))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub holds: bool,
    pub lhs: f64,
    pub rhs: f64,
    /// `rhs - lhs`.
    pub slack: f64,
    /// First step (1-based) whose single-step inequality fails.
    pub violating_step: Option<usize>,
}

impl BoundReport {
    fn new(lhs: f64, rhs: f64, violating_step: Option<usize>) -> Self {
        let slack = rhs - lhs;
        BoundReport {
            holds: slack >= -BOUND_TOLERANCE,
            lhs,
            rhs,
            slack,
            violating_step,
        }
    }
}

/// `alpha * KL(p || py) + (1 - alpha) * KL(p || p_prev)`.
pub fn local_objective(p: &Belief, p_prev: &Belief, py: &Belief, alpha: f64) -> Result<f64> {
    if p.len() != p_prev.len() || p.len() != py.len() {
        return Err(SidError::dim(
            "local objective over beliefs of different lengths",
        ));
    }
    Ok(objective(p.probs(), p_prev.probs(), py.probs(), alpha))
}

#[inline]
fn objective(p: &[f64], p_prev: &[f64], py: &[f64], alpha: f64) -> f64 {
    alpha * kl_slices(p, py) + (1.0 - alpha) * kl_slices(p, p_prev)
}

/// Unique minimizer of the local objective: `p*(k) ∝ p_prev(k)^(1-alpha) * py(k)^alpha`,
/// normalized in log space.
pub fn local_minimizer(p_prev: &Belief, py: &Belief, alpha: f64) -> Result<Belief> {
    check_alpha(alpha)?;
    if p_prev.len() != py.len() {
        return Err(SidError::dim("p_prev and py differ in length"));
    }
    if p_prev == py {
        return Ok(p_prev.clone());
    }
    let logw: Vec<f64> = p_prev
        .probs()
        .iter()
        .zip(py.probs())
        .map(|(a, b)| (1.0 - alpha) * a.ln() + alpha * b.ln())
        .collect();
    Belief::from_log_weights(&logw)
}

/// Closed-form belief after `step` ideal modules.
pub fn cascade_belief(cfg: &CascadeConfig, step: usize) -> Result<Belief> {
    if step == 0 {
        return Ok(cfg.p0.clone());
    }
    if cfg.p0 == cfg.py {
        return Ok(cfg.p0.clone());
    }
    let keep = (1.0 - cfg.alpha).powi(step as i32);
    let logw: Vec<f64> = cfg
        .p0
        .probs()
        .iter()
        .zip(cfg.py.probs())
        .map(|(a, b)| keep * a.ln() + (1.0 - keep) * b.ln())
        .collect();
    Belief::from_log_weights(&logw)
}

/// The full ideal trace `p_0..p_L` from the closed form.
pub fn ideal_cascade(cfg: &CascadeConfig) -> Result<CascadeTrace> {
    cfg.validate()?;
    let beliefs = (0..=cfg.depth)
        .map(|i| cascade_belief(cfg, i))
        .collect::<Result<Vec<_>>>()?;
    CascadeTrace::from_beliefs(beliefs, &cfg.py)
}

/// Per-step local-objective excess `S_i(p_i) - S_i(p_{i-1})`.
pub fn local_excess(trace: &CascadeTrace, py: &Belief, alpha: f64) -> Vec<f64> {
    trace
        .beliefs
        .windows(2)
        .map(|w| {
            let (prev, cur) = (w[0].probs(), w[1].probs());
            objective(cur, prev, py.probs(), alpha) - objective(prev, prev, py.probs(), alpha)
        })
        .collect()
}

/// Checks `KL(p_L||py) <= KL(p_0||py) - (1-alpha)/alpha * sum_i KL(p_i||p_{i-1})`
/// and the single-step form at every step.
pub fn descent_bound_check(trace: &CascadeTrace, py: &Belief, alpha: f64) -> BoundReport {
    let zeros = vec![0.0; trace.depth()];
    bound_with_errors(trace, py, alpha, &zeros)
}

/// As [`descent_bound_check`], with per-step optimization errors `epsilons`
/// adding `(1/alpha) * sum eps_i` to the right-hand side. `holds` also
/// requires the weaker `KL(p_L||py) <= KL(p_0||py) + (1/alpha) * sum eps_i`.
pub fn epsilon_bound_check(
    trace: &CascadeTrace,
    py: &Belief,
    alpha: f64,
    epsilons: &[f64],
) -> Result<BoundReport> {
    if epsilons.len() != trace.depth() {
        return Err(SidError::dim(format!(
            "{} epsilons for a depth-{} trace",
            epsilons.len(),
            trace.depth()
        )));
    }
    let mut report = bound_with_errors(trace, py, alpha, epsilons);
    let eps_sum: f64 = epsilons.iter().sum();
    let weak_rhs = kl_slices(trace.beliefs[0].probs(), py.probs()) + eps_sum / alpha;
    report.holds = report.holds && weak_rhs - report.lhs >= -BOUND_TOLERANCE;
    Ok(report)
}

fn bound_with_errors(trace: &CascadeTrace, py: &Belief, alpha: f64, eps: &[f64]) -> BoundReport {
    let to_target: Vec<f64> = trace
        .beliefs
        .iter()
        .map(|b| kl_slices(b.probs(), py.probs()))
        .collect();
    let ratio = (1.0 - alpha) / alpha;
    let depth = trace.depth();
    let mut violating_step = None;
    for i in 1..=depth {
        let step_rhs = to_target[i - 1] - ratio * trace.kl_step[i - 1] + eps[i - 1] / alpha;
        if step_rhs - to_target[i] < -BOUND_TOLERANCE {
            violating_step = Some(i);
            break;
        }
    }
    let lhs = to_target[depth];
    let rhs =
        to_target[0] - ratio * trace.kl_step.iter().sum::<f64>() + eps.iter().sum::<f64>() / alpha;
    BoundReport::new(lhs, rhs, violating_step)
}
