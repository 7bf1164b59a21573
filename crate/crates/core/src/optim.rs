//! Limited-memory BFGS with a strong-Wolfe line search.

use std::collections::VecDeque;
use std::io::Write;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LbfgsOptions {
    pub memory: usize,
    pub max_iterations: usize,
    /// Stop once the Euclidean norm of the gradient falls below this.
    pub grad_tol: f64,
    /// Stop once the relative loss decrease of an iteration falls below this.
    pub rel_loss_tol: f64,
    pub c1: f64,
    pub c2: f64,
    pub max_line_search: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iterations: 500,
            grad_tol: 1e-8,
            rel_loss_tol: 1e-15,
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 40,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    GradientTolerance,
    LossTolerance,
    MaxIterations,
    LineSearchFailed,
    /// The objective could not be evaluated at the initial point.
    InvalidStart,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct OptimResult {
    pub x: DVector<f64>,
    pub loss: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub stop: StopReason,
    pub log: Vec<IterationRecord>,
}

impl OptimResult {
    pub fn converged(&self) -> bool {
        matches!(self.stop, StopReason::GradientTolerance | StopReason::LossTolerance)
    }

    /// True when the result is a best-so-far point rather than a converged one.
    pub fn warning(&self) -> bool {
        matches!(self.stop, StopReason::LineSearchFailed | StopReason::InvalidStart)
    }
}

/// Writes the iteration log as `iteration,loss,grad_norm` CSV rows.
pub fn write_log_csv<W: Write>(log: &[IterationRecord], mut out: W) -> std::io::Result<()> {
    writeln!(out, "iteration,loss,grad_norm")?;
    for r in log {
        writeln!(out, "{},{:.16e},{:.16e}", r.iteration, r.loss, r.grad_norm)?;
    }
    Ok(())
}

struct Point {
    x: DVector<f64>,
    f: f64,
    g: DVector<f64>,
}

/// Minimizes `objective`, which returns the loss and gradient or `None` where undefined.
pub fn minimize<F>(mut objective: F, x0: DVector<f64>, opts: &LbfgsOptions) -> OptimResult
where
    F: FnMut(&DVector<f64>) -> Option<(f64, DVector<f64>)>,
{
    let mut evaluations = 0;
    let mut eval = |x: &DVector<f64>| -> Option<(f64, DVector<f64>)> {
        evaluations += 1;
        objective(x).filter(|(f, g)| f.is_finite() && g.iter().all(|v| v.is_finite()))
    };

    let Some((f0, g0)) = eval(&x0) else {
        return OptimResult {
            grad_norm: f64::NAN,
            x: x0,
            loss: f64::NAN,
            iterations: 0,
            evaluations: 1,
            stop: StopReason::InvalidStart,
            log: Vec::new(),
        };
    };
    let mut cur = Point { x: x0, f: f0, g: g0 };
    let mut log = vec![IterationRecord { iteration: 0, loss: cur.f, grad_norm: cur.g.norm() }];
    let mut history: VecDeque<(DVector<f64>, DVector<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    let mut stop = StopReason::MaxIterations;
    let mut iterations = 0;

    if cur.g.norm() < opts.grad_tol {
        stop = StopReason::GradientTolerance;
    } else {
        for it in 1..=opts.max_iterations {
            iterations = it;
            let mut dir = two_loop(&cur.g, &history);
            let mut slope = dir.dot(&cur.g);
            if !(slope < 0.0) {
                history.clear();
                dir = -&cur.g;
                slope = dir.dot(&cur.g);
            }
            let initial_step = if history.is_empty() { (1.0 / cur.g.norm()).min(1.0) } else { 1.0 };
            let next = match line_search(&mut eval, &cur, &dir, slope, initial_step, opts) {
                Some(p) => p,
                None if !history.is_empty() => {
                    // retry once along steepest descent with fresh curvature
                    history.clear();
                    let d = -&cur.g;
                    let s = d.dot(&cur.g);
                    match line_search(&mut eval, &cur, &d, s, (1.0 / cur.g.norm()).min(1.0), opts) {
                        Some(p) => p,
                        None => {
                            stop = StopReason::LineSearchFailed;
                            break;
                        }
                    }
                }
                None => {
                    stop = StopReason::LineSearchFailed;
                    break;
                }
            };
            let s = &next.x - &cur.x;
            let y = &next.g - &cur.g;
            let sy = s.dot(&y);
            if sy > 1e-12 * s.norm() * y.norm() {
                if history.len() == opts.memory {
                    history.pop_front();
                }
                history.push_back((s, y, 1.0 / sy));
            }
            let decrease = cur.f - next.f;
            cur = next;
            let gn = cur.g.norm();
            log.push(IterationRecord { iteration: it, loss: cur.f, grad_norm: gn });
            if gn < opts.grad_tol {
                stop = StopReason::GradientTolerance;
                break;
            }
            if decrease.abs() <= opts.rel_loss_tol * cur.f.abs().max(1.0) {
                stop = StopReason::LossTolerance;
                break;
            }
        }
    }
    OptimResult {
        grad_norm: cur.g.norm(),
        x: cur.x,
        loss: cur.f,
        iterations,
        evaluations,
        stop,
        log,
    }
}

fn two_loop(g: &DVector<f64>, history: &VecDeque<(DVector<f64>, DVector<f64>, f64)>) -> DVector<f64> {
    let mut q = g.clone();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * s.dot(&q);
        q -= y * a;
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        q *= s.dot(y) / y.dot(y);
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
        let b = rho * y.dot(&q);
        q += s * (a - b);
    }
    -q
}

fn line_search<E>(
    eval: &mut E,
    start: &Point,
    dir: &DVector<f64>,
    slope0: f64,
    initial: f64,
    opts: &LbfgsOptions,
) -> Option<Point>
where
    E: FnMut(&DVector<f64>) -> Option<(f64, DVector<f64>)>,
{
    let try_step = |eval: &mut E, alpha: f64| -> Option<(Point, f64)> {
        let x = &start.x + dir * alpha;
        eval(&x).map(|(f, g)| {
            let slope = g.dot(dir);
            (Point { x, f, g }, slope)
        })
    };
    let armijo = |alpha: f64, f: f64| f <= start.f + opts.c1 * alpha * slope0;
    let curvature = |slope: f64| slope.abs() <= opts.c2 * slope0.abs();

    let mut lo = (0.0, start.f, slope0);
    let mut alpha = initial;
    let mut hi: Option<(f64, f64, f64)> = None;
    let mut best: Option<Point> = None;
    for _ in 0..opts.max_line_search {
        match try_step(eval, alpha) {
            None => {
                // undefined objective: shrink
                hi = Some((alpha, f64::INFINITY, f64::NAN));
            }
            Some((p, slope)) => {
                if !armijo(alpha, p.f) || p.f >= lo.1 && lo.0 > 0.0 {
                    hi = Some((alpha, p.f, slope));
                } else {
                    if curvature(slope) {
                        return Some(p);
                    }
                    if slope >= 0.0 {
                        hi = Some(lo);
                    }
                    lo = (alpha, p.f, slope);
                    best = Some(p);
                }
            }
        }
        alpha = match hi {
            None => alpha * 2.0,
            Some((ah, fh, _)) => {
                let (al, fl, sl) = lo;
                // quadratic interpolation on [lo, hi], safeguarded
                let width = ah - al;
                let cand = if fh.is_finite() {
                    let denom = 2.0 * (fh - fl - sl * width);
                    if denom > 0.0 {
                        al - sl * width * width / denom
                    } else {
                        al + 0.5 * width
                    }
                } else {
                    al + 0.1 * width
                };
                let lower = al.min(ah) + 0.1 * width.abs();
                let upper = al.max(ah) - 0.1 * width.abs();
                cand.clamp(lower.min(upper), upper.max(lower))
            }
        };
        if let Some((ah, _, _)) = hi {
            if (ah - lo.0).abs() < 1e-16 * (1.0 + lo.0.abs()) {
                break;
            }
        }
    }
    // accept a sufficient-decrease point even if the curvature condition was not met
    best
}
