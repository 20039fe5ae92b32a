//! Box-constrained Nelder–Mead used to refine the moment-matching fit.

use crate::types::Interval;

#[derive(Debug, Clone, Copy)]
pub struct NelderMeadOptions {
    /// Stop once every vertex is within this distance (sup norm) of the best.
    pub x_tol: f64,
    /// Or once the objective spread across the simplex falls below this.
    pub f_tol: f64,
    pub max_evals: usize,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self {
            x_tol: 1e-6,
            f_tol: 1e-14,
            max_evals: 500,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NelderMeadResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
    pub converged: bool,
}

fn clamp_into(x: &mut [f64], bounds: &[Interval]) {
    for (v, b) in x.iter_mut().zip(bounds) {
        *v = b.clamp(*v);
    }
}

/// Minimizes `f` starting from `start` with per-coordinate initial steps.
/// Trial points are projected into `bounds`.
pub fn nelder_mead<F>(
    mut f: F,
    start: &[f64],
    steps: &[f64],
    bounds: &[Interval],
    opts: &NelderMeadOptions,
) -> NelderMeadResult
where
    F: FnMut(&[f64]) -> f64,
{
    let dim = start.len();
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        f(x)
    };

    let mut x0 = start.to_vec();
    clamp_into(&mut x0, bounds);
    if dim == 0 {
        let fx = eval(&x0, &mut evals);
        return NelderMeadResult {
            x: x0,
            f: fx,
            evals,
            converged: true,
        };
    }
    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(dim + 1);
    simplex.push(x0.clone());
    for i in 0..dim {
        let mut x = x0.clone();
        // Step inward when the start sits on the upper bound.
        x[i] = if x[i] + steps[i] <= bounds[i].hi {
            x[i] + steps[i]
        } else {
            x[i] - steps[i]
        };
        clamp_into(&mut x, bounds);
        simplex.push(x);
    }
    let mut values: Vec<f64> = simplex.iter().map(|x| eval(x, &mut evals)).collect();

    let mut converged = false;
    while evals < opts.max_evals {
        let mut order: Vec<usize> = (0..=dim).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();

        let spread = values[dim] - values[0];
        let diameter = simplex[1..]
            .iter()
            .flat_map(|x| x.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        if diameter <= opts.x_tol || spread.abs() <= opts.f_tol {
            converged = true;
            break;
        }

        let mut centroid = vec![0.0; dim];
        for x in &simplex[..dim] {
            for (c, v) in centroid.iter_mut().zip(x) {
                *c += v / dim as f64;
            }
        }
        let along = |t: f64| -> Vec<f64> {
            let mut p: Vec<f64> = centroid
                .iter()
                .zip(&simplex[dim])
                .map(|(c, w)| c + t * (c - w))
                .collect();
            clamp_into(&mut p, bounds);
            p
        };

        let reflected = along(1.0);
        let fr = eval(&reflected, &mut evals);
        if fr < values[0] {
            let expanded = along(2.0);
            let fe = eval(&expanded, &mut evals);
            if fe < fr {
                simplex[dim] = expanded;
                values[dim] = fe;
            } else {
                simplex[dim] = reflected;
                values[dim] = fr;
            }
            continue;
        }
        if fr < values[dim - 1] {
            simplex[dim] = reflected;
            values[dim] = fr;
            continue;
        }
        let (contracted, fc) = if fr < values[dim] {
            let p = along(0.5);
            let v = eval(&p, &mut evals);
            (p, v)
        } else {
            let p = along(-0.5);
            let v = eval(&p, &mut evals);
            (p, v)
        };
        if fc < values[dim].min(fr) {
            simplex[dim] = contracted;
            values[dim] = fc;
            continue;
        }
        // Shrink toward the best vertex.
        for i in 1..=dim {
            let mut p: Vec<f64> = simplex[0]
                .iter()
                .zip(&simplex[i])
                .map(|(b, x)| b + 0.5 * (x - b))
                .collect();
            clamp_into(&mut p, bounds);
            values[i] = eval(&p, &mut evals);
            simplex[i] = p;
        }
    }

    let best = (0..=dim)
        .min_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)))
        .unwrap_or(0);
    NelderMeadResult {
        x: simplex[best].clone(),
        f: values[best],
        evals,
        converged,
    }
}
