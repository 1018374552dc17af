//! Derivative-free Nelder–Mead minimization.

/// Stopping rules for [`nelder_mead`].
#[derive(Debug, Clone, Copy)]
pub struct NelderMeadOptions {
    /// Absolute spread of objective values across the simplex.
    pub ftol_abs: f64,
    /// Vertex spread relative to `max(1, |x|)`.
    pub xtol_rel: f64,
    pub max_evals: usize,
    /// Edge length of the initial simplex.
    pub initial_step: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self { ftol_abs: 1e-10, xtol_rel: 1e-8, max_evals: 2000, initial_step: 0.5 }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub fx: f64,
    pub evals: usize,
    pub converged: bool,
}

/// Minimizes `f` from `x0`. Infeasible points should evaluate to `+∞`.
///
/// The objective spread is compared against `ftol_abs` plus a few ulps of the
/// best value, since summed log-likelihoods cannot resolve differences below that.
pub fn nelder_mead<F>(mut f: F, x0: &[f64], opts: &NelderMeadOptions) -> Minimum
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x0.len();
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };

    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    let f0 = eval(x0, &mut evals);
    simplex.push((x0.to_vec(), f0));
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += opts.initial_step;
        let mut fx = eval(&x, &mut evals);
        if !fx.is_finite() {
            // Try the opposite direction before settling on an infeasible vertex.
            x[i] = x0[i] - opts.initial_step;
            fx = eval(&x, &mut evals);
        }
        simplex.push((x, fx));
    }

    let (alpha, gamma, rho, shrink) = (1.0, 2.0, 0.5, 0.5);
    let mut converged = false;
    loop {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = simplex[0].1;
        let worst = simplex[n].1;
        let f_spread = worst - best;
        let x_spread = simplex[1..]
            .iter()
            .flat_map(|(x, _)| x.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()))
            .fold(0.0f64, f64::max);
        let x_scale = simplex[0].0.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let f_tol = opts.ftol_abs + 8.0 * f64::EPSILON * best.abs();
        if best.is_finite() && f_spread <= f_tol && x_spread <= opts.xtol_rel * x_scale {
            converged = true;
            break;
        }
        if evals >= opts.max_evals {
            break;
        }

        let mut centroid = vec![0.0; n];
        for (x, _) in &simplex[..n] {
            for (c, v) in centroid.iter_mut().zip(x) {
                *c += v / n as f64;
            }
        }
        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&simplex[n].0)
                .map(|(c, w)| c + t * (c - w))
                .collect()
        };

        let xr = along(alpha);
        let fr = eval(&xr, &mut evals);
        if fr < simplex[0].1 {
            let xe = along(gamma);
            let fe = eval(&xe, &mut evals);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
            continue;
        }
        let (xc, fc) = if fr < simplex[n].1 {
            let xc = along(rho * alpha);
            let fc = eval(&xc, &mut evals);
            (xc, fc)
        } else {
            let xc = along(-rho);
            let fc = eval(&xc, &mut evals);
            (xc, fc)
        };
        if fc < simplex[n].1.min(fr) {
            simplex[n] = (xc, fc);
            continue;
        }
        let x_best = simplex[0].0.clone();
        for vertex in simplex.iter_mut().skip(1) {
            let x: Vec<f64> = x_best
                .iter()
                .zip(&vertex.0)
                .map(|(b, v)| b + shrink * (v - b))
                .collect();
            let fx = eval(&x, &mut evals);
            *vertex = (x, fx);
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, fx) = simplex.swap_remove(0);
    Minimum { x, fx, evals, converged }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_rosenbrock() {
        let f = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let opts = NelderMeadOptions { max_evals: 5000, ..Default::default() };
        let m = nelder_mead(f, &[-1.2, 1.0], &opts);
        assert!(m.converged);
        assert!((m.x[0] - 1.0).abs() < 1e-6 && (m.x[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn one_dimensional_quadratic() {
        let m = nelder_mead(|x| (x[0] - 3.0).powi(2), &[0.0], &NelderMeadOptions::default());
        assert!(m.converged);
        assert!((m.x[0] - 3.0).abs() < 1e-7);
    }

    #[test]
    fn respects_infeasible_region() {
        let f = |x: &[f64]| if x[0] < 0.0 { f64::INFINITY } else { (x[0] + 1.0).powi(2) };
        let m = nelder_mead(f, &[2.0], &NelderMeadOptions::default());
        assert!(m.x[0] >= 0.0 && m.x[0] < 1e-6);
    }

    #[test]
    fn reports_non_convergence() {
        let opts = NelderMeadOptions { max_evals: 10, ..Default::default() };
        let m = nelder_mead(|x| x[0].powi(2) + x[1].powi(2), &[5.0, 5.0], &opts);
        assert!(!m.converged);
        assert!(m.evals >= 10);
    }
}
