//! Derivative-free Nelder–Mead minimisation.

#[derive(Debug, Clone)]
pub struct SimplexResult {
    pub best: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Minimises `f` starting from `x0` with an axis-aligned initial simplex of
/// the given per-parameter `steps`.
///
/// Stops when every vertex lies within `tol` of the best vertex in every
/// coordinate, or after `max_iters` iterations. Non-finite objective values
/// are treated as `+inf`.
pub fn nelder_mead<F>(mut f: F, x0: &[f64], steps: &[f64], tol: f64, max_iters: usize) -> SimplexResult
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x0.len();
    assert_eq!(steps.len(), n);
    let mut eval = |x: &[f64]| {
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };

    let mut pts: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    pts.push(x0.to_vec());
    for i in 0..n {
        let mut p = x0.to_vec();
        p[i] += steps[i];
        pts.push(p);
    }
    let mut vals: Vec<f64> = pts.iter().map(|p| eval(p)).collect();

    let mut iterations = 0;
    let mut converged = false;
    let mut order: Vec<usize> = (0..=n).collect();
    loop {
        // stable sort keeps vertex order deterministic on ties
        order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        let best = order[0];
        let spread = pts
            .iter()
            .flat_map(|p| p.iter().zip(pts[best].iter()).map(|(a, b)| (a - b).abs()))
            .fold(0.0f64, f64::max);
        if spread < tol {
            converged = true;
            break;
        }
        if iterations >= max_iters {
            break;
        }
        iterations += 1;

        let worst = order[n];
        let second = order[n - 1];
        let mut centroid = vec![0.0; n];
        for &i in &order[..n] {
            for (c, v) in centroid.iter_mut().zip(&pts[i]) {
                *c += v / n as f64;
            }
        }
        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&pts[worst])
                .map(|(c, w)| c + t * (w - c))
                .collect()
        };

        let xr = along(-1.0);
        let fr = eval(&xr);
        if fr < vals[best] {
            let xe = along(-2.0);
            let fe = eval(&xe);
            if fe < fr {
                pts[worst] = xe;
                vals[worst] = fe;
            } else {
                pts[worst] = xr;
                vals[worst] = fr;
            }
            continue;
        }
        if fr < vals[second] {
            pts[worst] = xr;
            vals[worst] = fr;
            continue;
        }
        let xc = if fr < vals[worst] { along(-0.5) } else { along(0.5) };
        let fc = eval(&xc);
        if fc < vals[worst].min(fr) {
            pts[worst] = xc;
            vals[worst] = fc;
            continue;
        }
        // shrink towards the best vertex
        let anchor = pts[best].clone();
        for i in 0..=n {
            if i == best {
                continue;
            }
            for (p, a) in pts[i].iter_mut().zip(&anchor) {
                *p = a + 0.5 * (*p - a);
            }
            vals[i] = eval(&pts[i]);
        }
    }
    order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
    SimplexResult {
        best: pts[order[0]].clone(),
        value: vals[order[0]],
        iterations,
        converged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimises_shifted_quadratic() {
        let target = [1.0, -2.0, 3.5];
        let r = nelder_mead(
            |x| x.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum(),
            &[0.0; 3],
            &[0.5; 3],
            1e-8,
            5000,
        );
        assert!(r.converged);
        for (a, b) in r.best.iter().zip(target) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn minimises_rosenbrock() {
        let r = nelder_mead(
            |x| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2),
            &[-1.2, 1.0],
            &[0.1, 0.1],
            1e-9,
            10_000,
        );
        assert!((r.best[0] - 1.0).abs() < 1e-4 && (r.best[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn respects_iteration_cap_and_is_deterministic() {
        let f = |x: &[f64]| x.iter().map(|v| v.abs()).sum::<f64>();
        let a = nelder_mead(f, &[3.0, 4.0], &[1.0, 1.0], 0.0, 7);
        let b = nelder_mead(f, &[3.0, 4.0], &[1.0, 1.0], 0.0, 7);
        assert_eq!(a.iterations, 7);
        assert!(!a.converged);
        assert_eq!(a.best, b.best);
    }

    #[test]
    fn nan_objective_treated_as_infinite() {
        let r = nelder_mead(
            |x| if x[0] > 2.0 { f64::NAN } else { (x[0] - 1.0).powi(2) },
            &[0.0],
            &[1.0],
            1e-8,
            1000,
        );
        assert!((r.best[0] - 1.0).abs() < 1e-4);
    }
}
