//! Limited-memory BFGS with a strong-Wolfe line search, and a proximal
//! gradient method for L1-penalized smooth objectives.

use std::collections::VecDeque;

use nalgebra::DVector;

#[derive(Debug, Clone, Copy)]
pub struct LbfgsOptions {
    pub memory: usize,
    /// Stop when the infinity norm of the gradient drops below this.
    pub grad_tol: f64,
    pub max_iter: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            memory: 10,
            grad_tol: 1e-7,
            max_iter: 1000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: DVector<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

const C1: f64 = 1e-4;
const C2: f64 = 0.9;

/// Minimizes a smooth function. `f` returns the value and writes the gradient.
pub fn lbfgs<F>(mut f: F, x0: DVector<f64>, opts: &LbfgsOptions) -> Minimum
where
    F: FnMut(&DVector<f64>, &mut DVector<f64>) -> f64,
{
    let n = x0.len();
    let mut x = x0;
    let mut g = DVector::zeros(n);
    let mut fx = f(&x, &mut g);
    let mut history: VecDeque<(DVector<f64>, DVector<f64>, f64)> = VecDeque::new();
    let mut iterations = 0;

    loop {
        let gnorm = g.amax();
        if gnorm <= opts.grad_tol || !fx.is_finite() {
            return Minimum {
                x,
                value: fx,
                grad_norm: gnorm,
                iterations,
                converged: gnorm <= opts.grad_tol && fx.is_finite(),
            };
        }
        if iterations >= opts.max_iter {
            return Minimum {
                x,
                value: fx,
                grad_norm: gnorm,
                iterations,
                converged: false,
            };
        }

        let mut dir = two_loop(&g, &history);
        let mut slope = g.dot(&dir);
        if !(slope < 0.0) {
            history.clear();
            dir = -&g;
            slope = -g.norm_squared();
        }
        let initial = if history.is_empty() {
            (1.0 / g.norm()).min(1.0)
        } else {
            1.0
        };

        match wolfe_search(&mut f, &x, fx, slope, &dir, initial) {
            Some((step, f_new, g_new)) => {
                let s = &dir * step;
                let y = &g_new - &g;
                let sy = s.dot(&y);
                x += &s;
                if sy > 1e-12 * s.norm() * y.norm() {
                    if history.len() == opts.memory {
                        history.pop_front();
                    }
                    history.push_back((s, y, 1.0 / sy));
                }
                fx = f_new;
                g = g_new;
                iterations += 1;
            }
            None => {
                if !history.is_empty() {
                    history.clear();
                    iterations += 1;
                    continue;
                }
                let gnorm = g.amax();
                return Minimum {
                    x,
                    value: fx,
                    grad_norm: gnorm,
                    iterations,
                    converged: gnorm <= opts.grad_tol,
                };
            }
        }
    }
}

fn two_loop(g: &DVector<f64>, history: &VecDeque<(DVector<f64>, DVector<f64>, f64)>) -> DVector<f64> {
    let mut q = -g;
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * s.dot(&q);
        q.axpy(-a, y, 1.0);
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        q *= s.dot(y) / y.norm_squared();
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.into_iter().rev()) {
        let b = rho * y.dot(&q);
        q.axpy(a - b, s, 1.0);
    }
    q
}

/// Strong-Wolfe line search (bracketing then zoom with cubic interpolation).
fn wolfe_search<F>(
    f: &mut F,
    x: &DVector<f64>,
    f0: f64,
    slope0: f64,
    dir: &DVector<f64>,
    initial: f64,
) -> Option<(f64, f64, DVector<f64>)>
where
    F: FnMut(&DVector<f64>, &mut DVector<f64>) -> f64,
{
    let mut eval = |t: f64| -> Probe {
        let mut g = DVector::zeros(x.len());
        let xt = x + dir * t;
        let value = f(&xt, &mut g);
        Probe {
            t,
            value,
            slope: g.dot(dir),
            grad: g,
        }
    };

    let mut prev = Probe {
        t: 0.0,
        value: f0,
        slope: slope0,
        grad: DVector::zeros(0),
    };
    let mut t = initial;
    for i in 0..50 {
        let cur = eval(t);
        if !cur.value.is_finite() {
            t = 0.5 * (prev.t + t);
            continue;
        }
        if approximate_wolfe(&cur, f0, slope0) {
            return Some((cur.t, cur.value, cur.grad));
        }
        if cur.value > f0 + C1 * t * slope0 || (i > 0 && cur.value >= prev.value) {
            return zoom(&mut eval, f0, slope0, prev, cur);
        }
        if cur.slope.abs() <= -C2 * slope0 {
            return Some((cur.t, cur.value, cur.grad));
        }
        if cur.slope >= 0.0 {
            return zoom(&mut eval, f0, slope0, cur, prev);
        }
        prev = cur;
        t *= 2.0;
    }
    None
}

/// Near a minimizer the decrease in `f` drops below its rounding error and the
/// sufficient-decrease test becomes meaningless; there a step is accepted on
/// the directional derivative alone (Hager-Zhang approximate Wolfe).
fn approximate_wolfe(cur: &Probe, f0: f64, slope0: f64) -> bool {
    cur.value.is_finite()
        && cur.value <= f0 + 1e-10 * f0.abs().max(1.0)
        && cur.slope >= C2 * slope0
        && cur.slope <= (2.0 * C1 - 1.0) * slope0
}

struct Probe {
    t: f64,
    value: f64,
    slope: f64,
    grad: DVector<f64>,
}

fn zoom<E>(eval: &mut E, f0: f64, slope0: f64, mut lo: Probe, mut hi: Probe) -> Option<(f64, f64, DVector<f64>)>
where
    E: FnMut(f64) -> Probe,
{
    for _ in 0..60 {
        if (hi.t - lo.t).abs() <= 1e-14 * lo.t.abs().max(hi.t.abs()) {
            break;
        }
        let t = cubic_min((lo.t, lo.value, lo.slope), (hi.t, hi.value, hi.slope));
        let cur = eval(t);
        if approximate_wolfe(&cur, f0, slope0) {
            return Some((cur.t, cur.value, cur.grad));
        }
        if !cur.value.is_finite() || cur.value > f0 + C1 * t * slope0 || cur.value >= lo.value {
            hi = cur;
        } else {
            if cur.slope.abs() <= -C2 * slope0 {
                return Some((cur.t, cur.value, cur.grad));
            }
            if cur.slope * (hi.t - lo.t) >= 0.0 {
                hi = std::mem::replace(&mut lo, cur);
            } else {
                lo = cur;
            }
        }
    }
    // The bracket collapsed: settle for sufficient decrease.
    if lo.t > 0.0 && lo.value < f0 {
        return Some((lo.t, lo.value, lo.grad));
    }
    None
}

/// Minimizer of the cubic interpolating two points and slopes, clamped into
/// the interior of the bracket.
fn cubic_min(a: (f64, f64, f64), b: (f64, f64, f64)) -> f64 {
    let (t0, f0, d0) = a;
    let (t1, f1, d1) = b;
    let (lo, hi) = if t0 < t1 { (t0, t1) } else { (t1, t0) };
    let width = hi - lo;
    let d1_ = d0 + d1 - 3.0 * (f0 - f1) / (t0 - t1);
    let disc = d1_ * d1_ - d0 * d1;
    let mut t = if disc >= 0.0 && f0.is_finite() && f1.is_finite() {
        let d2 = (t1 - t0).signum() * disc.sqrt();
        t1 - (t1 - t0) * (d1 + d2 - d1_) / (d1 - d0 + 2.0 * d2)
    } else {
        f64::NAN
    };
    if !t.is_finite() || t < lo + 0.1 * width || t > hi - 0.1 * width {
        t = 0.5 * (lo + hi);
    }
    t
}

#[derive(Debug, Clone, Copy)]
pub struct ProxGradOptions {
    /// Stop when the infinity norm of the gradient mapping
    /// `L (y - prox(y - grad f(y) / L))` drops below this.
    pub grad_tol: f64,
    pub max_iter: usize,
}

impl Default for ProxGradOptions {
    fn default() -> Self {
        Self {
            grad_tol: 1e-7,
            max_iter: 20_000,
        }
    }
}

/// Minimizes `f(x) + l1 * ||x||_1` for smooth `f` by accelerated proximal
/// gradient with backtracking and adaptive restart.
pub fn prox_gradient_l1<F>(mut f: F, l1: f64, x0: DVector<f64>, opts: &ProxGradOptions) -> Minimum
where
    F: FnMut(&DVector<f64>, &mut DVector<f64>) -> f64,
{
    let n = x0.len();
    let mut x = x0;
    let mut y = x.clone();
    let mut momentum: f64 = 1.0;
    let mut lipschitz = 1.0;
    let mut gy = DVector::zeros(n);
    let mut g_tmp = DVector::zeros(n);
    let mut fx = f(&x, &mut g_tmp) + l1 * x.lp_norm(1);
    let mut iterations = 0;
    let mut mapping = f64::INFINITY;
    let mut restarted = true;

    while iterations < opts.max_iter {
        let fy = f(&y, &mut gy);
        let (x_new, f_new_smooth) = loop {
            let step = 1.0 / lipschitz;
            let cand = (&y - &gy * step).map(|v| crate::admm::soft_threshold(v, l1 * step));
            let diff = &cand - &y;
            let fc = f(&cand, &mut g_tmp);
            let bound = fy + gy.dot(&diff) + 0.5 * lipschitz * diff.norm_squared();
            if fc.is_finite() && fc <= bound + 1e-12 * fy.abs().max(1.0) {
                break (cand, fc);
            }
            lipschitz *= 2.0;
            if lipschitz > 1e300 {
                break (x.clone(), fx - l1 * x.lp_norm(1));
            }
        };
        mapping = (&y - &x_new).amax() * lipschitz;
        iterations += 1;
        let f_new = f_new_smooth + l1 * x_new.lp_norm(1);

        if f_new > fx {
            if restarted {
                // a plain proximal step from x no longer decreases: x is
                // optimal to working precision
                mapping = mapping.min(opts.grad_tol);
                break;
            }
            momentum = 1.0;
            y = x.clone();
            restarted = true;
            continue;
        }
        let next_momentum = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
        y = &x_new + (&x_new - &x) * ((momentum - 1.0) / next_momentum);
        momentum = next_momentum;
        x = x_new;
        fx = f_new;
        restarted = false;
        lipschitz *= 0.9;
        if mapping <= opts.grad_tol {
            break;
        }
    }
    Minimum {
        value: fx,
        grad_norm: mapping,
        converged: mapping <= opts.grad_tol,
        iterations,
        x,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &DVector<f64>, g: &mut DVector<f64>) -> f64 {
        let (a, b) = (x[0], x[1]);
        g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
        g[1] = 200.0 * (b - a * a);
        (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
    }

    #[test]
    fn lbfgs_solves_rosenbrock() {
        let m = lbfgs(rosenbrock, DVector::from_vec(vec![-1.2, 1.0]), &LbfgsOptions::default());
        assert!(m.converged, "{m:?}");
        assert!((m.x[0] - 1.0).abs() < 1e-6 && (m.x[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn lbfgs_quadratic_high_dim() {
        let n = 50;
        let diag: Vec<f64> = (1..=n).map(|i| i as f64).collect();
        let f = |x: &DVector<f64>, g: &mut DVector<f64>| {
            let mut v = 0.0;
            for i in 0..n {
                g[i] = diag[i] * (x[i] - 1.0);
                v += 0.5 * diag[i] * (x[i] - 1.0).powi(2);
            }
            v
        };
        let m = lbfgs(f, DVector::zeros(n), &LbfgsOptions { grad_tol: 1e-10, ..Default::default() });
        assert!(m.converged);
        assert!((m.x.add_scalar(-1.0)).amax() < 1e-9);
    }

    #[test]
    fn prox_gradient_lasso_1d() {
        // min 0.5 (x - 3)^2 + |x|  ->  x = 2
        let f = |x: &DVector<f64>, g: &mut DVector<f64>| {
            g[0] = x[0] - 3.0;
            0.5 * (x[0] - 3.0).powi(2)
        };
        let m = prox_gradient_l1(f, 1.0, DVector::zeros(1), &ProxGradOptions::default());
        assert!((m.x[0] - 2.0).abs() < 1e-8, "{m:?}");
        let f = |x: &DVector<f64>, g: &mut DVector<f64>| {
            g[0] = x[0] - 0.5;
            0.5 * (x[0] - 0.5).powi(2)
        };
        let m = prox_gradient_l1(f, 1.0, DVector::zeros(1), &ProxGradOptions::default());
        assert_eq!(m.x[0], 0.0);
    }
}
