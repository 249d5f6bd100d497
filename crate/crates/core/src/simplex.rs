//! Box-constrained Nelder-Mead minimization. Trial points are projected onto
//! the box, which keeps every evaluation feasible without penalty terms.

#[derive(Debug, Clone)]
pub struct SimplexOptions {
    /// Hard cap on objective evaluations.
    pub max_evals: usize,
    /// Cap on simplex iterations (reflect/expand/contract/shrink rounds).
    pub max_iters: usize,
    /// Edge length of the initial simplex along each axis.
    pub initial_step: f64,
    /// Stop once the spread of vertex values falls below this...
    pub f_tol: f64,
    /// ...and all vertices lie within this distance of the best one.
    pub x_tol: f64,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        SimplexOptions {
            max_evals: 400,
            max_iters: usize::MAX,
            initial_step: 0.1,
            f_tol: 1e-12,
            x_tol: 1e-7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimplexResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub evals: usize,
    pub iterations: usize,
    pub converged: bool,
}

struct Vertex {
    x: Vec<f64>,
    f: f64,
}

fn project(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for ((v, l), h) in x.iter_mut().zip(lo).zip(hi) {
        *v = v.clamp(*l, *h);
    }
}

fn sanitize(v: f64) -> f64 {
    if v.is_nan() {
        f64::INFINITY
    } else {
        v
    }
}

/// Minimizes `f` over the box `[lo, hi]` starting from `x0`.
pub fn minimize(
    mut f: impl FnMut(&[f64]) -> f64,
    x0: &[f64],
    lo: &[f64],
    hi: &[f64],
    opts: &SimplexOptions,
) -> SimplexResult {
    let dim = x0.len();
    assert!(dim >= 1 && lo.len() == dim && hi.len() == dim);
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        sanitize(f(x))
    };

    let mut start = x0.to_vec();
    project(&mut start, lo, hi);
    let f0 = eval(&start, &mut evals);
    let mut simplex = vec![Vertex { x: start.clone(), f: f0 }];
    for i in 0..dim {
        if evals >= opts.max_evals {
            break;
        }
        let mut x = start.clone();
        let up = x[i] + opts.initial_step;
        x[i] = if up <= hi[i] { up } else { x[i] - opts.initial_step };
        project(&mut x, lo, hi);
        let fx = eval(&x, &mut evals);
        simplex.push(Vertex { x, f: fx });
    }
    if simplex.len() < dim + 1 {
        return finish(simplex, evals, 0, false);
    }

    let mut iterations = 0usize;
    let mut converged = false;
    while evals < opts.max_evals && iterations < opts.max_iters {
        simplex.sort_by(|a, b| a.f.total_cmp(&b.f));
        let best = &simplex[0];
        let spread = simplex[dim].f - best.f;
        let diameter = simplex[1..]
            .iter()
            .map(|v| {
                v.x.iter()
                    .zip(&best.x)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        if spread <= opts.f_tol && diameter <= opts.x_tol {
            converged = true;
            break;
        }
        iterations += 1;

        let mut centroid = vec![0.0; dim];
        for v in &simplex[..dim] {
            for (c, x) in centroid.iter_mut().zip(&v.x) {
                *c += x / dim as f64;
            }
        }
        let along = |t: f64| -> Vec<f64> {
            let worst = &simplex[dim].x;
            let mut p: Vec<f64> = centroid
                .iter()
                .zip(worst)
                .map(|(c, w)| c + t * (c - w))
                .collect();
            project(&mut p, lo, hi);
            p
        };

        let xr = along(1.0);
        let fr = eval(&xr, &mut evals);
        if fr < simplex[0].f {
            if evals >= opts.max_evals {
                simplex[dim] = Vertex { x: xr, f: fr };
                break;
            }
            let xe = along(2.0);
            let fe = eval(&xe, &mut evals);
            simplex[dim] = if fe < fr {
                Vertex { x: xe, f: fe }
            } else {
                Vertex { x: xr, f: fr }
            };
            continue;
        }
        if fr < simplex[dim - 1].f {
            simplex[dim] = Vertex { x: xr, f: fr };
            continue;
        }
        if evals >= opts.max_evals {
            break;
        }
        // Outside contraction if the reflection improved on the worst, else inside.
        let xc = along(if fr < simplex[dim].f { 0.5 } else { -0.5 });
        let fc = eval(&xc, &mut evals);
        if fc < simplex[dim].f.min(fr) {
            simplex[dim] = Vertex { x: xc, f: fc };
            continue;
        }
        // Shrink toward the best vertex.
        let best_x = simplex[0].x.clone();
        for v in simplex[1..].iter_mut() {
            if evals >= opts.max_evals {
                break;
            }
            for (x, b) in v.x.iter_mut().zip(&best_x) {
                *x = b + 0.5 * (*x - b);
            }
            project(&mut v.x, lo, hi);
            v.f = eval(&v.x, &mut evals);
        }
    }
    finish(simplex, evals, iterations, converged)
}

fn finish(mut simplex: Vec<Vertex>, evals: usize, iterations: usize, converged: bool) -> SimplexResult {
    simplex.sort_by(|a, b| a.f.total_cmp(&b.f));
    let best = simplex.swap_remove(0);
    SimplexResult {
        x: best.x,
        value: best.f,
        evals,
        iterations,
        converged,
    }
}
