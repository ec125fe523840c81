//! Derivative-free bound-constrained minimisation with multistart.
//!
//! Each local search is a Nelder-Mead simplex run in an unconstrained
//! coordinate system: every bounded coordinate `x in [l, u]` is represented
//! as `x = l + (u - l) * sigmoid(y)`, so all iterates stay strictly inside
//! the box. Objectives signal infeasible points by returning `+inf` (or
//! NaN, which is treated the same way).
//!
//! Local searches are restarted from their own optimum until a restart no
//! longer improves the objective, which guards against the premature
//! simplex collapse Nelder-Mead is prone to on kinked objectives.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

/// Objective plus box constraints.
pub struct BoundedProblem<F> {
    objective: F,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl<F> BoundedProblem<F>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    pub fn new(objective: F, lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::dim(lower.len(), upper.len()));
        }
        if lower.is_empty() {
            return Err(Error::InvalidInput("zero-dimensional problem".into()));
        }
        if let Some(i) = (0..lower.len()).find(|&i| !(lower[i] < upper[i])) {
            return Err(Error::InvalidInput(format!(
                "bound {i}: lower {} not below upper {}",
                lower[i], upper[i]
            )));
        }
        Ok(BoundedProblem {
            objective,
            lower,
            upper,
        })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (l, u))| *v >= *l && *v <= *u)
    }

    /// Objective value with NaN mapped to `+inf`.
    pub fn eval(&self, x: &[f64]) -> f64 {
        let f = (self.objective)(x);
        if f.is_nan() {
            f64::INFINITY
        } else {
            f
        }
    }

    fn to_box(&self, y: &[f64], x: &mut [f64]) {
        for i in 0..y.len() {
            let s = 1.0 / (1.0 + (-y[i]).exp());
            x[i] = (self.lower[i] + (self.upper[i] - self.lower[i]) * s)
                .clamp(self.lower[i], self.upper[i]);
        }
    }

    fn to_unbounded(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(i, &v)| {
                let p = ((v - self.lower[i]) / (self.upper[i] - self.lower[i])).clamp(1e-9, 1.0 - 1e-9);
                (p / (1.0 - p)).ln()
            })
            .collect()
    }
}

/// Multistart settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MultistartConfig {
    pub n_starts: usize,
    pub max_iters: usize,
    pub tol_f: f64,
    pub tol_x: f64,
    pub seed: u64,
}

impl Default for MultistartConfig {
    fn default() -> Self {
        MultistartConfig {
            n_starts: 5,
            max_iters: 2000,
            tol_f: 1e-8,
            tol_x: 1e-6,
            seed: 0,
        }
    }
}

impl MultistartConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_starts == 0 {
            return Err(Error::InvalidInput("n_starts must be at least 1".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidInput("max_iters must be positive".into()));
        }
        if !(self.tol_f > 0.0 && self.tol_x > 0.0) {
            return Err(Error::InvalidInput("tolerances must be positive".into()));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Outcome of one local search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartReport {
    pub start: Vec<f64>,
    pub f_start: f64,
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
}

/// Best point over all starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub best_start: usize,
    pub starts: Vec<StartReport>,
}

const MAX_RANDOM_DRAWS: usize = 500;
const MAX_RESTARTS: usize = 4;

/// Minimise over the box from `starts` followed by uniform random starts
/// (drawn from `cfg.seed`) up to `cfg.n_starts` in total. Random starts are
/// redrawn until the objective is finite there.
pub fn minimize<F>(
    problem: &BoundedProblem<F>,
    cfg: &MultistartConfig,
    starts: &[Vec<f64>],
) -> Result<Minimum>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    cfg.validate()?;
    for (k, s) in starts.iter().enumerate() {
        if !problem.contains(s) {
            return Err(Error::InvalidInput(format!(
                "start {k} lies outside the bounds"
            )));
        }
    }
    let mut all: Vec<Vec<f64>> = starts.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    while all.len() < cfg.n_starts {
        let mut candidate = None;
        let mut first = None;
        for _ in 0..MAX_RANDOM_DRAWS {
            let x: Vec<f64> = (0..problem.dim())
                .map(|i| rng.random_range(problem.lower[i]..problem.upper[i]))
                .collect();
            if problem.eval(&x).is_finite() {
                candidate = Some(x);
                break;
            }
            first.get_or_insert(x);
        }
        all.push(candidate.or(first).expect("at least one draw"));
    }

    let reports = par::map_slice(&all, |s| local_search(problem, cfg, s));

    let mut best: Option<usize> = None;
    for (k, r) in reports.iter().enumerate() {
        if r.f.is_finite() && best.is_none_or(|b| r.f < reports[b].f) {
            best = Some(k);
        }
    }
    match best {
        Some(b) => Ok(Minimum {
            x: reports[b].x.clone(),
            f: reports[b].f,
            best_start: b,
            starts: reports,
        }),
        None => Err(Error::Infeasible(format!(
            "objective infinite at every one of {} local solutions",
            reports.len()
        ))),
    }
}

/// One restarted Nelder-Mead run from `start`.
pub fn local_search<F>(problem: &BoundedProblem<F>, cfg: &MultistartConfig, start: &[f64]) -> StartReport
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let f_start = problem.eval(start);
    let mut y = problem.to_unbounded(start);
    let mut x = vec![0.0; problem.dim()];
    problem.to_box(&y, &mut x);
    let mut f = problem.eval(&x);
    let mut iterations = 0;
    let mut evaluations = 2;
    let mut converged = false;

    for _ in 0..=MAX_RESTARTS {
        if iterations >= cfg.max_iters {
            break;
        }
        let run = nelder_mead(problem, cfg, &y, cfg.max_iters - iterations);
        iterations += run.iterations;
        evaluations += run.evaluations;
        let improved = run.f < f;
        let gain = f - run.f;
        if improved {
            y = run.y;
            f = run.f;
        }
        converged = run.converged;
        if !improved || gain <= cfg.tol_f * (1.0 + f.abs()) {
            break;
        }
    }
    problem.to_box(&y, &mut x);

    if !(f <= f_start) && f_start.is_finite() {
        // Keep the start itself when the search never beat it.
        return StartReport {
            start: start.to_vec(),
            f_start,
            x: start.to_vec(),
            f: f_start,
            iterations,
            evaluations,
            converged,
        };
    }
    StartReport {
        start: start.to_vec(),
        f_start,
        x,
        f,
        iterations,
        evaluations,
        converged,
    }
}

struct NmRun {
    y: Vec<f64>,
    f: f64,
    iterations: usize,
    evaluations: usize,
    converged: bool,
}

fn nelder_mead<F>(problem: &BoundedProblem<F>, cfg: &MultistartConfig, y0: &[f64], max_iters: usize) -> NmRun
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let n = y0.len();
    let nf = n as f64;
    // Dimension-adaptive coefficients.
    let (rho, chi, psi, sigma) = if n >= 2 {
        (1.0, 1.0 + 2.0 / nf, 0.75 - 1.0 / (2.0 * nf), 1.0 - 1.0 / nf)
    } else {
        (1.0, 2.0, 0.5, 0.5)
    };

    let mut xbuf = vec![0.0; n];
    let mut evaluations = 0usize;
    let mut eval = |y: &[f64], xbuf: &mut Vec<f64>| {
        evaluations += 1;
        problem.to_box(y, xbuf);
        problem.eval(xbuf)
    };

    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    let mut fvals: Vec<f64> = Vec::with_capacity(n + 1);
    simplex.push(y0.to_vec());
    fvals.push(eval(y0, &mut xbuf));
    let f0_finite = fvals[0].is_finite();
    for i in 0..n {
        let s = 1.0 / (1.0 + (-y0[i]).exp());
        let mut step = (0.1 / (s * (1.0 - s))).clamp(0.25, 4.0);
        if y0[i] > 0.0 {
            step = -step;
        }
        let mut v = y0.to_vec();
        let mut fv = f64::INFINITY;
        for _ in 0..12 {
            v[i] = y0[i] + step;
            fv = eval(&v, &mut xbuf);
            if fv.is_finite() || !f0_finite {
                break;
            }
            step *= 0.5;
        }
        simplex.push(v);
        fvals.push(fv);
    }

    let mut order: Vec<usize> = (0..=n).collect();
    let mut centroid = vec![0.0; n];
    let mut trial = vec![0.0; n];
    let mut trial2 = vec![0.0; n];
    let mut xa = vec![0.0; n];
    let mut xb = vec![0.0; n];
    let mut iterations = 0;
    let mut converged = false;

    while iterations < max_iters {
        order.sort_by(|&a, &b| fvals[a].total_cmp(&fvals[b]));
        let best = order[0];
        let worst = order[n];
        let second_worst = order[n - 1];

        // Convergence: function spread and simplex size in the box coordinates.
        let f_spread = fvals[worst] - fvals[best];
        if f_spread.is_finite() && f_spread <= cfg.tol_f * (1.0 + fvals[best].abs()) {
            problem.to_box(&simplex[best], &mut xa);
            let mut size: f64 = 0.0;
            for v in &simplex {
                problem.to_box(v, &mut xb);
                for (a, b) in xa.iter().zip(&xb) {
                    size = size.max((a - b).abs());
                }
            }
            if size <= cfg.tol_x {
                converged = true;
                break;
            }
        }
        iterations += 1;

        centroid.iter_mut().for_each(|c| *c = 0.0);
        for &k in &order[..n] {
            for (c, v) in centroid.iter_mut().zip(&simplex[k]) {
                *c += v / nf;
            }
        }

        for j in 0..n {
            trial[j] = centroid[j] + rho * (centroid[j] - simplex[worst][j]);
        }
        let fr = eval(&trial, &mut xbuf);

        if fr < fvals[best] {
            for j in 0..n {
                trial2[j] = centroid[j] + chi * (trial[j] - centroid[j]);
            }
            let fe = eval(&trial2, &mut xbuf);
            if fe < fr {
                simplex[worst].copy_from_slice(&trial2);
                fvals[worst] = fe;
            } else {
                simplex[worst].copy_from_slice(&trial);
                fvals[worst] = fr;
            }
            continue;
        }
        if fr < fvals[second_worst] {
            simplex[worst].copy_from_slice(&trial);
            fvals[worst] = fr;
            continue;
        }
        // Contraction, outside or inside.
        let outside = fr < fvals[worst];
        for j in 0..n {
            trial2[j] = if outside {
                centroid[j] + psi * (trial[j] - centroid[j])
            } else {
                centroid[j] - psi * (centroid[j] - simplex[worst][j])
            };
        }
        let fc = eval(&trial2, &mut xbuf);
        let accept = if outside { fc <= fr } else { fc < fvals[worst] };
        if accept {
            simplex[worst].copy_from_slice(&trial2);
            fvals[worst] = fc;
            continue;
        }
        // Shrink towards the best vertex.
        let anchor = simplex[best].clone();
        for &k in &order[1..] {
            for j in 0..n {
                simplex[k][j] = anchor[j] + sigma * (simplex[k][j] - anchor[j]);
            }
            fvals[k] = eval(&simplex[k], &mut xbuf);
        }
    }

    let best = (0..=n)
        .min_by(|&a, &b| fvals[a].total_cmp(&fvals[b]))
        .expect("non-empty simplex");
    NmRun {
        y: simplex[best].clone(),
        f: fvals[best],
        iterations,
        evaluations,
        converged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn convex_quadratic() {
        let p = BoundedProblem::new(|x: &[f64]| (x[0] - 2.0).powi(2), vec![0.0], vec![5.0]).unwrap();
        let m = minimize(&p, &MultistartConfig::default(), &[]).unwrap();
        assert_abs_diff_eq!(m.x[0], 2.0, epsilon = 1e-6);
        assert_eq!(m.starts.len(), 5);
    }

    #[test]
    fn two_well_global_minimum() {
        let f = |x: &[f64]| ((x[0] + 1.0).powi(2)).min(0.5 + (x[0] - 3.0).powi(2));
        // grid oracle
        let grid_best = (0..=100_000)
            .map(|k| -5.0 + 10.0 * k as f64 / 100_000.0)
            .min_by(|a, b| f(&[*a]).total_cmp(&f(&[*b])))
            .unwrap();
        assert_abs_diff_eq!(grid_best, -1.0, epsilon = 1e-4);

        let p = BoundedProblem::new(f, vec![-5.0], vec![5.0]).unwrap();
        let cfg = MultistartConfig {
            n_starts: 6,
            seed: 11,
            ..Default::default()
        };
        // Start one search in the wrong basin on purpose.
        let m = minimize(&p, &cfg, &[vec![4.0]]).unwrap();
        assert_abs_diff_eq!(m.x[0], grid_best, epsilon = 1e-4);
        assert_abs_diff_eq!(m.f, 0.0, epsilon = 1e-8);
        assert!(m.starts[0].f > 0.4);
    }

    #[test]
    fn all_infinite_is_infeasible() {
        let p = BoundedProblem::new(|_: &[f64]| f64::INFINITY, vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        assert!(matches!(
            minimize(&p, &MultistartConfig::default(), &[]),
            Err(Error::Infeasible(_))
        ));
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(BoundedProblem::new(|_: &[f64]| 0.0, vec![1.0], vec![1.0]).is_err());
        let p = BoundedProblem::new(|x: &[f64]| x[0], vec![0.0], vec![1.0]).unwrap();
        assert!(minimize(&p, &MultistartConfig::default(), &[vec![2.0]]).is_err());
        let bad = MultistartConfig {
            n_starts: 0,
            ..Default::default()
        };
        assert!(minimize(&p, &bad, &[]).is_err());
    }

    #[test]
    fn rosenbrock_in_box() {
        let f = |x: &[f64]| 100.0 * (x[1] - x[0] * x[0]).powi(2) + (1.0 - x[0]).powi(2);
        let p = BoundedProblem::new(f, vec![-2.0, -1.0], vec![2.0, 3.0]).unwrap();
        let m = minimize(&p, &MultistartConfig::default(), &[vec![-1.5, 2.0]]).unwrap();
        assert_abs_diff_eq!(m.x[0], 1.0, epsilon = 1e-4);
        assert_abs_diff_eq!(m.x[1], 1.0, epsilon = 1e-4);
    }

    #[test]
    fn minimum_on_the_boundary() {
        let p = BoundedProblem::new(|x: &[f64]| x[0] + (x[1] - 0.3).powi(2), vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let m = minimize(&p, &MultistartConfig::default(), &[]).unwrap();
        assert!(m.x[0] >= 0.0 && m.x[0] < 1e-5);
        assert_abs_diff_eq!(m.x[1], 0.3, epsilon = 1e-4);
    }

    #[test]
    fn rejection_region_is_avoided() {
        // feasible only where x0 + x1 <= 1
        let f = |x: &[f64]| {
            if x[0] + x[1] > 1.0 {
                f64::INFINITY
            } else {
                (x[0] - 0.9).powi(2) + (x[1] - 0.9).powi(2)
            }
        };
        let p = BoundedProblem::new(f, vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let m = minimize(&p, &MultistartConfig::default(), &[vec![0.1, 0.1]]).unwrap();
        assert!(m.x[0] + m.x[1] <= 1.0);
        assert_abs_diff_eq!(m.x[0], 0.5, epsilon = 1e-3);
        assert_abs_diff_eq!(m.x[1], 0.5, epsilon = 1e-3);
    }
}
