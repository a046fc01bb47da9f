//! Limited-memory BFGS with backtracking line search and central
//! finite-difference gradients.

use std::collections::VecDeque;

use crate::scalar::{cast, is_finite, Scalar};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsSettings {
    /// Stop once the gradient's ∞-norm drops below this.
    pub grad_tol: f64,
    pub max_iter: usize,
    /// Correction pairs kept.
    pub memory: usize,
    /// Relative finite-difference step.
    pub fd_step: f64,
}

impl Default for LbfgsSettings {
    fn default() -> Self {
        Self {
            grad_tol: 1e-5,
            max_iter: 500,
            memory: 10,
            fd_step: 1e-6,
        }
    }
}

/// Why the minimizer stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    GradientTolerance,
    MaxIterations,
    /// No step along the search direction or the negative gradient lowered
    /// the objective: the iterate is stationary to working precision.
    NoProgress,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::GradientTolerance => "gradient-tolerance",
            StopReason::MaxIterations => "max-iterations",
            StopReason::NoProgress => "no-progress",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsResult<T> {
    pub x: Vec<T>,
    pub value: T,
    pub grad_inf_norm: T,
    pub iterations: usize,
    /// Gradient tolerance reached.
    pub converged: bool,
    pub stop: StopReason,
    /// Accepted objective per iteration, starting with the initial point.
    pub trace: Vec<(usize, T)>,
}

/// Central differences with step `h·max(|x_i|, 1)` per coordinate.
pub fn fd_gradient<T: Scalar>(f: &mut impl FnMut(&[T]) -> T, x: &[T], h: f64) -> Vec<T> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let step = cast::<T>(h) * x[i].abs().max(T::one());
            xp[i] = x[i] + step;
            let fp = f(&xp);
            xp[i] = x[i] - step;
            let fm = f(&xp);
            xp[i] = x[i];
            // use the actually representable step
            (fp - fm) / ((x[i] + step) - (x[i] - step))
        })
        .collect()
}

/// Backtracking from a unit step until the Armijo condition holds.
fn line_search<T: Scalar>(
    f: &mut impl FnMut(&[T]) -> T,
    x: &[T],
    fx: T,
    d: &[T],
    slope: T,
    c1: T,
    shrink: T,
) -> Option<(Vec<T>, T)> {
    let mut step = T::one();
    for _ in 0..60 {
        let xn: Vec<T> = x.iter().zip(d).map(|(&xi, &di)| xi + step * di).collect();
        let fx_new = f(&xn);
        if is_finite(fx_new) && fx_new <= fx + c1 * step * slope {
            return Some((xn, fx_new));
        }
        step *= shrink;
    }
    None
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y)
}

fn inf_norm<T: Scalar>(a: &[T]) -> T {
    a.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
}

/// Minimizes `f` from `x0`. Non-finite values count as +∞, so the line
/// search backs away from invalid regions. Fails only when `f(x0)` is not
/// finite.
pub fn minimize<T: Scalar>(
    mut f: impl FnMut(&[T]) -> T,
    x0: &[T],
    settings: &LbfgsSettings,
) -> Option<LbfgsResult<T>> {
    let mut x = x0.to_vec();
    let mut fx = f(&x);
    if !is_finite(fx) {
        return None;
    }
    let mut g = fd_gradient(&mut f, &x, settings.fd_step);
    let mut pairs: VecDeque<(Vec<T>, Vec<T>, T)> = VecDeque::new();
    let mut trace = vec![(0, fx)];
    let gtol = cast::<T>(settings.grad_tol);
    let c1 = cast::<T>(1e-4);
    let half = cast::<T>(0.5);
    let mut iterations = 0;
    let mut converged = inf_norm(&g) < gtol;
    let mut stop = StopReason::MaxIterations;

    while !converged && iterations < settings.max_iter {
        // two-loop recursion
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(pairs.len());
        for (s, y, rho) in pairs.iter().rev() {
            let a = *rho * dot(s, &q);
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= a * *yi;
            }
            alphas.push(a);
        }
        let gamma = match pairs.back() {
            Some((s, y, _)) => dot(s, y) / dot(y, y),
            None => T::one() / inf_norm(&g).max(T::one()),
        };
        for qi in q.iter_mut() {
            *qi *= gamma;
        }
        for ((s, y, rho), a) in pairs.iter().zip(alphas.iter().rev()) {
            let b = *rho * dot(y, &q);
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (*a - b) * *si;
            }
        }
        let mut d: Vec<T> = q.iter().map(|&v| -v).collect();
        let mut slope = dot(&g, &d);
        if !(slope < T::zero()) {
            pairs.clear();
            let scale = T::one() / inf_norm(&g).max(T::one());
            d = g.iter().map(|&v| -v * scale).collect();
            slope = dot(&g, &d);
        }

        let mut accepted = line_search(&mut f, &x, fx, &d, slope, c1, half);
        if accepted.as_ref().is_none_or(|(_, v)| *v >= fx) && !pairs.is_empty() {
            // quasi-Newton direction made no progress: drop the memory and
            // retry along the scaled negative gradient
            pairs.clear();
            let scale = T::one() / inf_norm(&g).max(T::one());
            d = g.iter().map(|&v| -v * scale).collect();
            slope = dot(&g, &d);
            accepted = line_search(&mut f, &x, fx, &d, slope, c1, half);
        }
        let Some((xn, fn_)) = accepted else {
            stop = StopReason::NoProgress;
            break;
        };
        let gn = fd_gradient(&mut f, &xn, settings.fd_step);
        let s: Vec<T> = xn.iter().zip(&x).map(|(&a, &b)| a - b).collect();
        let y: Vec<T> = gn.iter().zip(&g).map(|(&a, &b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > cast::<T>(1e-12) * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
            if pairs.len() == settings.memory {
                pairs.pop_front();
            }
            pairs.push_back((s, y, T::one() / sy));
        }
        iterations += 1;
        let stalled = fn_ >= fx;
        x = xn;
        fx = fn_;
        g = gn;
        trace.push((iterations, fx));
        converged = inf_norm(&g) < gtol;
        if stalled && !converged {
            stop = StopReason::NoProgress;
            break;
        }
    }
    if converged {
        stop = StopReason::GradientTolerance;
    }
    Some(LbfgsResult {
        grad_inf_norm: inf_norm(&g),
        x,
        value: fx,
        iterations,
        converged,
        stop,
        trace,
    })
}
