//! Small dense BFGS minimizer with Armijo backtracking (safeguarded quadratic
//! interpolation).
//!
//! The first step follows the normalized steepest-descent direction and the
//! initial inverse Hessian is rescaled by `sᵀy / yᵀy`, so the iterate sequence
//! does not change when the objective is multiplied by a positive constant.

use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub(crate) struct BfgsConfig {
    pub max_iter: usize,
    pub rel_tol: f64,
}

#[derive(Clone, Debug)]
pub(crate) struct BfgsOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    #[allow(dead_code)]
    pub iterations: usize,
}

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 40;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Minimizes `f`, which returns the value and gradient at a point. Points where
/// `f` fails or is non-finite are treated as infeasible during the line search;
/// failure at `x0` is returned to the caller.
pub(crate) fn minimize<F>(mut f: F, x0: Vec<f64>, cfg: BfgsConfig) -> Result<BfgsOutcome>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let (mut fx, mut g) = f(&x0)?;
    let mut x = x0;
    if n == 0 || !fx.is_finite() {
        return Ok(BfgsOutcome {
            x,
            value: fx,
            iterations: 0,
        });
    }
    let mut h: Option<Vec<f64>> = None;
    let mut iterations = 0;
    let mut fresh = true;

    while iterations < cfg.max_iter {
        iterations += 1;
        let gnorm = norm(&g);
        if gnorm == 0.0 || !gnorm.is_finite() {
            break;
        }
        let mut d: Vec<f64> = match &h {
            Some(h) => (0..n).map(|i| -dot(&h[i * n..(i + 1) * n], &g)).collect(),
            None => g.iter().map(|gi| -gi / gnorm).collect(),
        };
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            h = None;
            fresh = true;
            d = g.iter().map(|gi| -gi / gnorm).collect();
            slope = -gnorm;
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let trial: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + step * di).collect();
            let mut next = 0.5 * step;
            if let Ok((ft, gt)) = f(&trial) {
                if ft.is_finite() && gt.iter().all(|v| v.is_finite()) {
                    if ft <= fx + ARMIJO_C1 * step * slope {
                        accepted = Some((trial, ft, gt));
                        break;
                    }
                    // minimizer of the quadratic through f(0), f'(0) and f(step)
                    let curv = ft - fx - slope * step;
                    if curv > 0.0 {
                        next = (-slope * step * step / (2.0 * curv)).clamp(0.1 * step, 0.5 * step);
                    }
                }
            }
            step = next;
        }
        let Some((x_new, f_new, g_new)) = accepted else {
            if fresh {
                break;
            }
            h = None;
            fresh = true;
            continue;
        };

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) {
            let hm = h.get_or_insert_with(|| {
                let scale = sy / dot(&y, &y);
                let mut id = vec![0.0; n * n];
                for i in 0..n {
                    id[i * n + i] = scale;
                }
                id
            });
            bfgs_update(hm, &s, &y, sy);
            fresh = false;
        }

        let change = fx - f_new;
        let small_step = s.iter().all(|v| v.abs() < 1e-10);
        x = x_new;
        g = g_new;
        fx = f_new;
        if change.abs() <= cfg.rel_tol * fx.abs() || small_step {
            break;
        }
    }
    Ok(BfgsOutcome {
        x,
        value: fx,
        iterations,
    })
}

/// `H ← (I − ρ s yᵀ) H (I − ρ y sᵀ) + ρ s sᵀ`.
fn bfgs_update(h: &mut [f64], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let rho = 1.0 / sy;
    let hy: Vec<f64> = (0..n).map(|i| dot(&h[i * n..(i + 1) * n], y)).collect();
    let yhy = dot(y, &hy);
    for i in 0..n {
        for j in 0..n {
            h[i * n + j] +=
                -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
        }
    }
}
