//! Limited-memory BFGS with a strong-Wolfe line search.
//!
//! The search direction comes from the usual two-loop recursion over the most
//! recent `(s, y)` pairs, with the initial inverse Hessian scaled by
//! `sᵀy / yᵀy`. Pairs with too little curvature are dropped. When the line
//! search fails the memory is cleared and steepest descent is tried once
//! before giving up.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LbfgsConfig {
    pub memory: usize,
    pub max_iter: usize,
    pub grad_tol: f64,
    pub wolfe_c1: f64,
    pub wolfe_c2: f64,
    pub max_line_search_steps: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iter: 1000,
            grad_tol: 1e-7,
            wolfe_c1: 1e-4,
            wolfe_c2: 0.9,
            max_line_search_steps: 25,
        }
    }
}

impl LbfgsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.wolfe_c1 && self.wolfe_c1 < self.wolfe_c2 && self.wolfe_c2 < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "Wolfe constants need 0 < c1 < c2 < 1, got c1={} c2={}",
                self.wolfe_c1, self.wolfe_c2
            )));
        }
        if self.memory == 0 {
            return Err(Error::InvalidArgument("L-BFGS memory must be at least 1".into()));
        }
        if self.max_line_search_steps == 0 {
            return Err(Error::InvalidArgument("line search needs at least one step".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub value: f64,
    pub gradient: Vec<f64>,
    /// Optional per-term breakdown, recorded in the trace.
    pub terms: Vec<f64>,
}

pub trait Objective {
    fn evaluate(&mut self, x: &[f64]) -> Result<Evaluation>;

    fn term_names(&self) -> Vec<String> {
        Vec::new()
    }
}

impl<F> Objective for F
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    fn evaluate(&mut self, x: &[f64]) -> Result<Evaluation> {
        let (value, gradient) = self(x);
        Ok(Evaluation {
            value,
            gradient,
            terms: Vec::new(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub objective: f64,
    pub grad_norm: f64,
    pub step: f64,
    pub terms: Vec<f64>,
}

/// One record for the starting point (iteration 0) and one per accepted step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptTrace {
    pub term_names: Vec<String>,
    pub records: Vec<IterationRecord>,
}

impl OptTrace {
    pub fn is_strictly_decreasing(&self) -> bool {
        self.records.windows(2).all(|w| w[1].objective < w[0].objective)
    }

    /// CSV with columns `iteration,total,grad_norm,step,<terms...>`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["iteration".to_string(), "total".into(), "grad_norm".into(), "step".into()];
        header.extend(self.term_names.iter().cloned());
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![
                r.iteration.to_string(),
                format!("{:e}", r.objective),
                format!("{:e}", r.grad_norm),
                format!("{:e}", r.step),
            ];
            row.extend(r.terms.iter().map(|t| format!("{t:e}")));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|source| Error::Unwritable {
            path: path.to_path_buf(),
            source,
        })?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    GradientTolerance,
    MaxIterations,
    LineSearchFailed,
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
    pub iterations: usize,
    pub reason: Termination,
    pub trace: OptTrace,
}

#[derive(Debug, Clone)]
pub struct Step {
    pub alpha: f64,
    pub x: Vec<f64>,
    pub eval: Evaluation,
    pub evaluations: usize,
}

#[derive(Debug)]
pub enum LineSearchError {
    NotDescent,
    Exhausted,
    NonFinite,
    Objective(Error),
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

fn is_finite(e: &Evaluation) -> bool {
    e.value.is_finite() && e.gradient.iter().all(|g| g.is_finite())
}

/// Minimiser of the cubic through `(x1, f1, g1)` and `(x2, f2, g2)`, clamped
/// to `bounds`; the bounds' midpoint if the cubic has no real minimiser.
fn cubic_interpolate(x1: f64, f1: f64, g1: f64, x2: f64, f2: f64, g2: f64, bounds: (f64, f64)) -> f64 {
    let (lo, hi) = bounds;
    let d1 = g1 + g2 - 3.0 * (f1 - f2) / (x1 - x2);
    let d2_sq = d1 * d1 - g1 * g2;
    if d2_sq >= 0.0 {
        let d2 = d2_sq.sqrt();
        let t = if x1 <= x2 {
            x2 - (x2 - x1) * ((g2 + d2 - d1) / (g2 - g1 + 2.0 * d2))
        } else {
            x1 - (x1 - x2) * ((g1 + d2 - d1) / (g1 - g2 + 2.0 * d2))
        };
        if t.is_finite() {
            return t.clamp(lo, hi);
        }
    }
    0.5 * (lo + hi)
}

/// Strong-Wolfe line search along `direction` starting from a unit step.
pub fn line_search<O: Objective + ?Sized>(
    objective: &mut O,
    x: &[f64],
    direction: &[f64],
    f0: f64,
    g0: &[f64],
    config: &LbfgsConfig,
) -> Result<Step, LineSearchError> {
    let gtd0 = dot(g0, direction);
    if gtd0 >= 0.0 || !gtd0.is_finite() {
        return Err(LineSearchError::NotDescent);
    }
    let (c1, c2) = (config.wolfe_c1, config.wolfe_c2);
    let mut evaluations = 0usize;
    let mut probe = |t: f64, evaluations: &mut usize| -> Result<(Vec<f64>, Evaluation, f64), LineSearchError> {
        let xt: Vec<f64> = x.iter().zip(direction).map(|(xi, di)| xi + t * di).collect();
        let e = objective.evaluate(&xt).map_err(LineSearchError::Objective)?;
        *evaluations += 1;
        if !is_finite(&e) {
            return Err(LineSearchError::NonFinite);
        }
        let gtd = dot(&e.gradient, direction);
        Ok((xt, e, gtd))
    };
    let armijo = |t: f64, f: f64| f <= f0 + c1 * t * gtd0 && f < f0;
    let curvature = |gtd: f64| gtd.abs() <= -c2 * gtd0;
    let accept = |alpha, x, eval, evaluations| Step {
        alpha,
        x,
        eval,
        evaluations,
    };

    // bracketing phase
    let (mut t_prev, mut f_prev, mut gtd_prev) = (0.0, f0, gtd0);
    let mut t = 1.0;
    let (mut xt, mut e, mut gtd) = probe(t, &mut evaluations)?;
    // (lo, f_lo, gtd_lo, hi, f_hi, gtd_hi)
    let bracket;
    loop {
        if !armijo(t, e.value) || (evaluations > 1 && e.value >= f_prev) {
            bracket = (t_prev, f_prev, gtd_prev, t, e.value, gtd);
            break;
        }
        if curvature(gtd) {
            return Ok(accept(t, xt, e, evaluations));
        }
        if gtd >= 0.0 {
            bracket = (t, e.value, gtd, t_prev, f_prev, gtd_prev);
            break;
        }
        if evaluations >= config.max_line_search_steps {
            return Err(LineSearchError::Exhausted);
        }
        let next = cubic_interpolate(t_prev, f_prev, gtd_prev, t, e.value, gtd, (t + 0.01 * (t - t_prev), 10.0 * t));
        (t_prev, f_prev, gtd_prev) = (t, e.value, gtd);
        t = next;
        (xt, e, gtd) = probe(t, &mut evaluations)?;
    }

    // zoom phase; lo always satisfies Armijo and has the lowest value seen
    let (mut lo, mut f_lo, mut gtd_lo, mut hi, mut f_hi, mut gtd_hi) = bracket;
    while evaluations < config.max_line_search_steps {
        let (a, b) = if lo < hi { (lo, hi) } else { (hi, lo) };
        let width = b - a;
        if width <= f64::EPSILON * b.abs().max(1.0) {
            break;
        }
        let guard = 0.1 * width;
        t = cubic_interpolate(lo, f_lo, gtd_lo, hi, f_hi, gtd_hi, (a, b)).clamp(a + guard, b - guard);
        (xt, e, gtd) = probe(t, &mut evaluations)?;
        if !armijo(t, e.value) || e.value >= f_lo {
            (hi, f_hi, gtd_hi) = (t, e.value, gtd);
        } else {
            if curvature(gtd) {
                return Ok(accept(t, xt, e, evaluations));
            }
            if gtd * (hi - lo) >= 0.0 {
                (hi, f_hi, gtd_hi) = (lo, f_lo, gtd_lo);
            }
            (lo, f_lo, gtd_lo) = (t, e.value, gtd);
        }
    }
    Err(LineSearchError::Exhausted)
}

struct Memory {
    pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)>,
    capacity: usize,
}

impl Memory {
    fn push(&mut self, s: Vec<f64>, y: Vec<f64>) -> bool {
        let sy = dot(&s, &y);
        let (ns, ny) = (dot(&s, &s).sqrt(), dot(&y, &y).sqrt());
        if sy <= 1e-10 * ns * ny {
            return false;
        }
        if self.pairs.len() == self.capacity {
            self.pairs.pop_front();
        }
        self.pairs.push_back((s, y, 1.0 / sy));
        true
    }

    fn direction(&self, g: &[f64]) -> Vec<f64> {
        let mut q = g.to_vec();
        let Some((s_last, y_last, _)) = self.pairs.back() else {
            // unit max-norm first step
            let scale = 1.0f64.min(1.0 / inf_norm(g));
            return g.iter().map(|v| -scale * v).collect();
        };
        let mut alphas = Vec::with_capacity(self.pairs.len());
        for (s, y, rho) in self.pairs.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        let gamma = dot(s_last, y_last) / dot(y_last, y_last);
        q.iter_mut().for_each(|v| *v *= gamma);
        for ((s, y, rho), a) in self.pairs.iter().zip(alphas.into_iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        q.iter_mut().for_each(|v| *v = -*v);
        q
    }
}

pub fn minimize<O: Objective + ?Sized>(objective: &mut O, x0: Vec<f64>, config: &LbfgsConfig) -> Result<Minimum> {
    minimize_with(objective, x0, config, |_, _| {})
}

/// As [`minimize`], calling `observe` with each trace record and the
/// corresponding point (including the start).
pub fn minimize_with<O, F>(objective: &mut O, x0: Vec<f64>, config: &LbfgsConfig, mut observe: F) -> Result<Minimum>
where
    O: Objective + ?Sized,
    F: FnMut(&IterationRecord, &[f64]),
{
    config.validate()?;
    let mut x = x0;
    let mut e = objective.evaluate(&x)?;
    if !is_finite(&e) {
        return Err(Error::NonFinite { iteration: 0 });
    }
    let mut trace = OptTrace {
        term_names: objective.term_names(),
        records: Vec::new(),
    };
    let mut record = |trace: &mut OptTrace, iteration, step, e: &Evaluation, x: &[f64]| {
        let r = IterationRecord {
            iteration,
            objective: e.value,
            grad_norm: inf_norm(&e.gradient),
            step,
            terms: e.terms.clone(),
        };
        observe(&r, x);
        trace.records.push(r);
    };
    record(&mut trace, 0, 0.0, &e, &x);

    let mut memory = Memory {
        pairs: VecDeque::with_capacity(config.memory),
        capacity: config.memory,
    };
    let mut iterations = 0;
    let reason = loop {
        if inf_norm(&e.gradient) <= config.grad_tol {
            break Termination::GradientTolerance;
        }
        if iterations >= config.max_iter {
            break Termination::MaxIterations;
        }
        let mut d = memory.direction(&e.gradient);
        if dot(&d, &e.gradient) >= 0.0 {
            memory.pairs.clear();
            d = memory.direction(&e.gradient);
        }
        let step = match line_search(objective, &x, &d, e.value, &e.gradient, config) {
            Ok(step) => step,
            Err(LineSearchError::NonFinite) => {
                return Err(Error::NonFinite {
                    iteration: iterations + 1,
                })
            }
            Err(LineSearchError::Objective(err)) => return Err(err),
            Err(LineSearchError::NotDescent | LineSearchError::Exhausted) => {
                if memory.pairs.is_empty() {
                    break Termination::LineSearchFailed;
                }
                log::debug!("line search failed at iteration {}; retrying steepest descent", iterations + 1);
                memory.pairs.clear();
                let d = memory.direction(&e.gradient);
                match line_search(objective, &x, &d, e.value, &e.gradient, config) {
                    Ok(step) => step,
                    Err(LineSearchError::NonFinite) => {
                        return Err(Error::NonFinite {
                            iteration: iterations + 1,
                        })
                    }
                    Err(LineSearchError::Objective(err)) => return Err(err),
                    Err(_) => break Termination::LineSearchFailed,
                }
            }
        };
        let s: Vec<f64> = step.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = step.eval.gradient.iter().zip(&e.gradient).map(|(a, b)| a - b).collect();
        memory.push(s, y);
        x = step.x;
        e = step.eval;
        iterations += 1;
        record(&mut trace, iterations, step.alpha, &e, &x);
    };
    Ok(Minimum {
        x,
        value: e.value,
        gradient: e.gradient,
        iterations,
        reason,
        trace,
    })
}
