//! Box-constrained quasi-Newton minimization (projected BFGS with Armijo
//! backtracking). Used for GP hyperparameters and posterior-mode searches.

#[derive(Debug, Clone, Copy)]
pub(crate) struct Options {
    pub max_iter: usize,
    pub gtol: f64,
    pub ftol: f64,
    /// Longest allowed step (infinity norm) per iteration.
    pub max_step: f64,
}

impl Default for Options {
    fn default() -> Self {
        Self {
            max_iter: 200,
            gtol: 1e-6,
            ftol: 1e-12,
            max_step: 2.0,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
}

fn clamp(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for ((v, l), h) in x.iter_mut().zip(lo).zip(hi) {
        *v = v.clamp(*l, *h);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizes `f` over the box `[lo, hi]`. `f` returns the value and gradient,
/// or `None` where it cannot be evaluated (treated as an infinitely bad point).
pub(crate) fn minimize_box<F>(mut f: F, x0: &[f64], lo: &[f64], hi: &[f64], opts: Options) -> Option<Minimum>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    clamp(&mut x, lo, hi);
    let (mut fx, mut g) = f(&x).filter(|(v, g)| v.is_finite() && g.iter().all(|x| x.is_finite()))?;
    let identity = |h: &mut Vec<f64>| {
        h.iter_mut().for_each(|v| *v = 0.0);
        (0..n).for_each(|i| h[i * n + i] = 1.0);
    };
    let mut h = vec![0.0; n * n];
    identity(&mut h);
    let mut fresh = true;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        let active: Vec<bool> = (0..n)
            .map(|i| (x[i] <= lo[i] && g[i] > 0.0) || (x[i] >= hi[i] && g[i] < 0.0))
            .collect();
        let gmax = (0..n).filter(|&i| !active[i]).map(|i| g[i].abs()).fold(0.0, f64::max);
        if gmax < opts.gtol {
            break;
        }
        let mut d: Vec<f64> = (0..n)
            .map(|i| if active[i] { 0.0 } else { -(0..n).filter(|&j| !active[j]).map(|j| h[i * n + j] * g[j]).sum::<f64>() })
            .collect();
        if dot(&d, &g) >= 0.0 {
            identity(&mut h);
            fresh = true;
            d = (0..n).map(|i| if active[i] { 0.0 } else { -g[i] }).collect();
        }
        let dmax = d.iter().map(|v| v.abs()).fold(0.0, f64::max);
        if dmax > opts.max_step {
            d.iter_mut().for_each(|v| *v *= opts.max_step / dmax);
        }
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let mut xn: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + alpha * b).collect();
            clamp(&mut xn, lo, hi);
            let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
            if s.iter().all(|v| *v == 0.0) {
                break;
            }
            if let Some((fnew, gnew)) = f(&xn) {
                if fnew.is_finite() && gnew.iter().all(|v| v.is_finite()) && fnew <= fx + 1e-4 * dot(&g, &s) {
                    accepted = Some((xn, s, fnew, gnew));
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some((xn, s, fnew, gnew)) = accepted else {
            if fresh {
                break;
            }
            identity(&mut h);
            fresh = true;
            continue;
        };
        let y: Vec<f64> = gnew.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() && sy > 0.0 {
            let rho = 1.0 / sy;
            let hy: Vec<f64> = (0..n).map(|i| (0..n).map(|j| h[i * n + j] * y[j]).sum()).collect();
            let yhy = dot(&y, &hy);
            for i in 0..n {
                for j in 0..n {
                    h[i * n + j] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
                }
            }
            fresh = false;
        }
        let improvement = fx - fnew;
        x = xn;
        fx = fnew;
        g = gnew;
        if improvement.abs() <= opts.ftol * (1.0 + fx.abs()) {
            break;
        }
    }
    Some(Minimum { x, f: fx, iterations })
}
