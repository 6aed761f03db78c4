//! Multi-start augmented-Lagrangian solver for the nonlinear problem.
//!
//! Each start runs an outer multiplier loop around a projected
//! Levenberg-Marquardt inner solver on the least-squares form of the cost,
//! falling back to a nonmonotone spectral projected-gradient step whenever
//! the projected Gauss-Newton step fails to decrease the merit.

use std::fmt;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::problem::{Prediction, PredictionProblem};
use super::projection::{clamp_chain, project_yaw_chain};
use crate::error::{Error, Result};
use crate::transport::ControlInput;

/// Margin added to the scaled inequality constraints inside the solver.
const MARGIN: f64 = 1e-7;
/// Largest constraint residual accepted as feasible.
pub(crate) const FEAS_TOL: f64 = 1e-6;
const ARMIJO: f64 = 1e-4;
const NONMONOTONE_MEMORY: usize = 10;
const STALL_WINDOW: usize = 10;
const STALL_REL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSettings {
    /// Inner iterations allowed per start.
    pub max_iter: usize,
    /// Projected-gradient tolerance of the normalised merit.
    pub tol: f64,
    pub n_starts: usize,
    /// Taken from the run section of a scenario.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            max_iter: 400,
            tol: 1e-9,
            n_starts: 20,
            seed: 0,
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 {
            return Err(Error::invalid("controller.solver.max_iter", "must be at least 1"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::invalid("controller.solver.tol", "must be positive"));
        }
        if self.n_starts == 0 {
            return Err(Error::invalid("controller.solver.n_starts", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveStatus {
    Converged,
    MaxIterations,
    Infeasible,
}

impl fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SolveStatus::Converged => "converged",
            SolveStatus::MaxIterations => "max-iterations",
            SolveStatus::Infeasible => "infeasible",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverStats {
    pub status: SolveStatus,
    /// Inner iterations of the selected start.
    pub iterations: usize,
    /// Inner iterations per start, warm start first when present.
    pub start_iterations: Vec<usize>,
    pub restarts: usize,
    pub best_start: usize,
    pub warm_started: bool,
    pub max_violation: f64,
    /// Wall time of the whole solve (s).
    pub wall_time: f64,
}

/// Inputs `[n][i]` over the horizon with predicted powers.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlPlan {
    pub inputs: Vec<Vec<ControlInput>>,
    pub predicted_powers: Vec<Vec<f64>>,
    pub predicted_farm: Vec<f64>,
    pub objective_value: f64,
    pub stats: SolverStats,
}

impl ControlPlan {
    pub fn first_inputs(&self) -> &[ControlInput] {
        &self.inputs[0]
    }

    pub fn to_vector(&self, p: &PredictionProblem) -> Vec<f64> {
        let mut x = vec![0.0; p.n_vars()];
        for (n, row) in self.inputs.iter().enumerate() {
            for (i, u) in row.iter().enumerate() {
                x[p.var_index(i, n, true)] = u.u_gamma;
                x[p.var_index(i, n, false)] = u.u_a;
            }
        }
        x
    }

    /// Plan for decision vector `x`, with powers predicted by `p`.
    pub fn from_vector(p: &PredictionProblem, x: &[f64], stats: SolverStats) -> Result<Self> {
        let pred = p.predict(x)?;
        let inputs = (0..p.n_steps())
            .map(|n| {
                (0..p.n_turbines())
                    .map(|i| ControlInput::new(x[p.var_index(i, n, true)], x[p.var_index(i, n, false)]))
                    .collect()
            })
            .collect();
        Ok(Self {
            inputs,
            objective_value: p.objective_value(&pred),
            predicted_powers: pred.powers,
            predicted_farm: pred.farm,
            stats,
        })
    }

    /// Drops the applied first column and repeats the last one.
    pub fn shifted(&self) -> Vec<Vec<ControlInput>> {
        let mut out: Vec<Vec<ControlInput>> = self.inputs.iter().skip(1).cloned().collect();
        if let Some(last) = self.inputs.last() {
            out.push(last.clone());
        }
        out
    }
}

/// Best plan over the multi-start set. `warm` seeds one extra start from a
/// previous plan shifted by one sample.
pub fn solve_nonlinear(p: &PredictionProblem, cfg: &SolverSettings, warm: Option<&ControlPlan>) -> Result<ControlPlan> {
    cfg.validate()?;
    let clock = Instant::now();
    let al = Merit::new(p);

    let fixed = p.fixed_far_wake_violation()?;
    if fixed > FEAS_TOL {
        let mut x = neutral_start(p);
        al.project(&mut x);
        let stats = SolverStats {
            status: SolveStatus::Infeasible,
            iterations: 0,
            start_iterations: Vec::new(),
            restarts: 0,
            best_start: 0,
            warm_started: false,
            max_violation: fixed,
            wall_time: clock.elapsed().as_secs_f64(),
        };
        log::warn!(
            "core length of in-flight observation points exceeds spacing by {:.3e}",
            fixed
        );
        return ControlPlan::from_vector(p, &x, stats);
    }

    let mut starts = Vec::new();
    let warm_started = match warm {
        Some(plan) if plan.inputs.len() == p.n_steps() && plan.inputs[0].len() == p.n_turbines() => {
            let mut shifted = plan.clone();
            shifted.inputs = plan.shifted();
            starts.push(shifted.to_vector(p));
            true
        }
        _ => false,
    };
    starts.push(neutral_start(p));
    starts.extend(halton_starts(p, cfg.n_starts.saturating_sub(1), cfg.seed));

    let results = run_starts(&al, &starts, cfg);

    let mut best: Option<usize> = None;
    for (k, r) in results.iter().enumerate() {
        let Ok(r) = r else { continue };
        best = match best {
            None => Some(k),
            Some(b) => {
                let rb = results[b].as_ref().expect("selected results are Ok");
                if better(r, rb) {
                    Some(k)
                } else {
                    Some(b)
                }
            }
        };
    }
    let start_iterations: Vec<usize> = results.iter().map(|r| r.as_ref().map_or(0, |r| r.iterations)).collect();
    let Some(b) = best else {
        let err = results.into_iter().find_map(|r| r.err()).expect("at least one start");
        return Err(err);
    };
    let r = results[b].as_ref().expect("best is Ok");
    let status = if r.violation > FEAS_TOL {
        SolveStatus::Infeasible
    } else if r.converged {
        SolveStatus::Converged
    } else {
        SolveStatus::MaxIterations
    };
    let stats = SolverStats {
        status,
        iterations: r.iterations,
        restarts: start_iterations.len(),
        start_iterations,
        best_start: b,
        warm_started,
        max_violation: r.violation,
        wall_time: clock.elapsed().as_secs_f64(),
    };
    ControlPlan::from_vector(p, &r.x, stats)
}

#[derive(Debug, Clone)]
struct StartResult {
    x: Vec<f64>,
    objective: f64,
    violation: f64,
    iterations: usize,
    converged: bool,
    norm: f64,
}

/// Feasible first, then lowest objective (ties within 1e-9 relative), then
/// smallest norm. Earlier starts win remaining ties.
fn better(a: &StartResult, b: &StartResult) -> bool {
    let fa = a.violation <= FEAS_TOL;
    let fb = b.violation <= FEAS_TOL;
    if fa != fb {
        return fa;
    }
    if !fa {
        return a.violation < b.violation;
    }
    let tie = 1e-9 * a.objective.abs().max(b.objective.abs());
    if (a.objective - b.objective).abs() > tie {
        return a.objective < b.objective;
    }
    a.norm < b.norm
}

fn run_starts(al: &Merit<'_>, starts: &[Vec<f64>], cfg: &SolverSettings) -> Vec<Result<StartResult>> {
    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(starts.len())
        .max(1);
    if workers == 1 {
        return starts.iter().map(|x0| al.solve_from(x0, cfg)).collect();
    }
    let mut out: Vec<Option<Result<StartResult>>> = (0..starts.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                scope.spawn(move || {
                    (w..starts.len())
                        .step_by(workers)
                        .map(|k| (k, al.solve_from(&starts[k], cfg)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (k, r) in h.join().expect("solver worker panicked") {
                out[k] = Some(r);
            }
        }
    });
    out.into_iter().map(|r| r.expect("every start solved")).collect()
}

fn neutral_start(p: &PredictionProblem) -> Vec<f64> {
    let lim = p.limits();
    p.constant_point(&vec![0.5 * (lim.a_min + lim.a_max); p.n_turbines()])
}

fn radical_inverse(mut k: u64, base: u64) -> f64 {
    let mut inv = 1.0 / base as f64;
    let mut out = 0.0;
    while k > 0 {
        out += (k % base) as f64 * inv;
        k /= base;
        inv /= base as f64;
    }
    out
}

fn primes(count: usize) -> Vec<u64> {
    let mut out = Vec::with_capacity(count);
    let mut c = 2u64;
    while out.len() < count {
        if out.iter().all(|&q| !c.is_multiple_of(q)) {
            out.push(c);
        }
        c += 1;
    }
    out
}

/// Constant-per-turbine starts from a randomly rotated Halton sequence.
fn halton_starts(p: &PredictionProblem, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let n_t = p.n_turbines();
    let lim = p.limits();
    let bases = primes(2 * n_t);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shift: Vec<f64> = bases.iter().map(|_| rng.random::<f64>()).collect();
    (0..count)
        .map(|k| {
            let h: Vec<f64> = bases
                .iter()
                .zip(&shift)
                .map(|(&b, &s)| (radical_inverse(k as u64 + 1, b) + s).fract())
                .collect();
            let mut x = vec![0.0; p.n_vars()];
            for i in 0..n_t {
                let g = lim.yaw_max * (2.0 * h[2 * i] - 1.0);
                let a = lim.a_min + (lim.a_max - lim.a_min) * h[2 * i + 1];
                for n in 0..p.n_steps() {
                    x[p.var_index(i, n, true)] = g;
                    x[p.var_index(i, n, false)] = a;
                }
            }
            x
        })
        .collect()
}

/// Scaled least-squares form of the cost plus the constraint list.
struct Merit<'a> {
    p: &'a PredictionProblem,
    w_track: f64,
    w_dist: f64,
    far_rows: Vec<(usize, usize)>,
    surrogate_rows: bool,
}

struct Multipliers {
    lambda: Vec<f64>,
    rho: f64,
}

impl<'a> Merit<'a> {
    fn new(p: &'a PredictionProblem) -> Self {
        let w = p.settings().weights;
        let (w_track, w_dist) = if w.q_p > 0.0 {
            (1.0, w.q_p2 / w.q_p)
        } else if w.q_p2 > 0.0 {
            (0.0, 1.0)
        } else {
            (0.0, 0.0)
        };
        Self {
            p,
            w_track,
            w_dist,
            far_rows: p.far_wake_rows(),
            surrogate_rows: p.pairs.iter().any(|q| q.surrogate.is_some()),
        }
    }

    fn p_r(&self) -> f64 {
        self.p.model().turbine().p_rated
    }

    fn n_constraints(&self) -> usize {
        let far = self.far_rows.len() * if self.surrogate_rows { 2 } else { 1 };
        self.p.n_steps() * self.p.n_turbines() + far
    }

    fn project(&self, x: &mut [f64]) {
        let p = self.p;
        let lim = p.limits();
        let mut chain = vec![0.0; p.n_steps()];
        for i in 0..p.n_turbines() {
            for n in 0..p.n_steps() {
                chain[n] = x[p.var_index(i, n, true)];
                let ia = p.var_index(i, n, false);
                x[ia] = x[ia].clamp(lim.a_min, lim.a_max);
            }
            project_yaw_chain(&mut chain, p.prev_yaw()[i], lim.yaw_max, lim.yaw_rate);
            for n in 0..p.n_steps() {
                x[p.var_index(i, n, true)] = chain[n];
            }
        }
    }

    fn exact_clamp(&self, x: &mut [f64]) {
        let p = self.p;
        let lim = p.limits();
        let mut chain = vec![0.0; p.n_steps()];
        for i in 0..p.n_turbines() {
            for n in 0..p.n_steps() {
                chain[n] = x[p.var_index(i, n, true)];
                let ia = p.var_index(i, n, false);
                x[ia] = x[ia].clamp(lim.a_min, lim.a_max);
            }
            clamp_chain(&mut chain, p.prev_yaw()[i], lim.yaw_max, lim.yaw_rate);
            for n in 0..p.n_steps() {
                x[p.var_index(i, n, true)] = chain[n];
            }
        }
    }

    fn far_wake_value(&self, x: &[f64], row: (usize, usize), poly: bool) -> Result<f64> {
        let pair = &self.p.pairs[row.0];
        let g = x[self.p.var_index(pair.up, row.1, true)];
        let a = x[self.p.var_index(pair.up, row.1, false)];
        let x_c = if poly {
            pair.surrogate
                .as_ref()
                .expect("surrogate rows only with surrogates")
                .core_length
                .value(g, a)
        } else {
            self.p.exact_core_length(g, a)?
        };
        Ok(x_c / pair.x - 1.0)
    }

    fn far_wake_gradient(&self, x: &[f64], row: (usize, usize), poly: bool) -> Result<[(usize, f64); 2]> {
        let pair = &self.p.pairs[row.0];
        let ig = self.p.var_index(pair.up, row.1, true);
        let ia = self.p.var_index(pair.up, row.1, false);
        let (g, a) = (x[ig], x[ia]);
        let (dg, da) = if poly {
            pair.surrogate
                .as_ref()
                .expect("surrogate rows only with surrogates")
                .core_length
                .gradient(g, a)
        } else {
            let h = 1e-7;
            let f = |g, a| self.p.exact_core_length(g, a);
            (
                (f(g + h, a)? - f(g - h, a)?) / (2.0 * h),
                (f(g, a + h)? - f(g, a - h)?) / (2.0 * h),
            )
        };
        Ok([(ig, dg / pair.x), (ia, da / pair.x)])
    }

    /// Scaled constraint values `g ≤ 0` without margins.
    fn constraints(&self, x: &[f64], pred: &Prediction) -> Result<Vec<f64>> {
        let mut g = Vec::with_capacity(self.n_constraints());
        for row in &pred.powers {
            g.extend(row.iter().map(|pw| pw / self.p_r() - 1.0));
        }
        for &row in &self.far_rows {
            g.push(self.far_wake_value(x, row, false)?);
        }
        if self.surrogate_rows {
            for &row in &self.far_rows {
                g.push(self.far_wake_value(x, row, true)?);
            }
        }
        Ok(g)
    }

    fn cost_residuals(&self, pred: &Prediction, out: &mut Vec<f64>) {
        let (st, sd) = (self.w_track.sqrt(), self.w_dist.sqrt());
        let p_r = self.p_r();
        for (row, &pf) in pred.powers.iter().zip(&pred.farm) {
            out.push(st * (pf - self.p.p_ref()) / p_r);
            out.extend(row.iter().map(|pw| sd * pw / p_r));
        }
    }

    fn merit(&self, x: &[f64], mult: &Multipliers) -> f64 {
        let eval = || -> Result<f64> {
            let pred = self.p.predict(x)?;
            let mut r = Vec::new();
            self.cost_residuals(&pred, &mut r);
            let g = self.constraints(x, &pred)?;
            let pen: f64 = g
                .iter()
                .zip(&mult.lambda)
                .map(|(gi, li)| (gi + MARGIN + li / mult.rho).max(0.0).powi(2))
                .sum();
            Ok(r.iter().map(|v| v * v).sum::<f64>() + 0.5 * mult.rho * pen)
        };
        eval().ok().filter(|v| v.is_finite()).unwrap_or(f64::INFINITY)
    }

    /// Residual vector and Jacobian of the merit `‖r‖²`.
    fn linearise(&self, x: &[f64], mult: &Multipliers) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let p = self.p;
        let (pred, sens) = p.predict_with_sensitivities(x)?;
        let n_t = p.n_turbines();
        let n_cost = p.n_steps() * (n_t + 1);
        let n_rows = n_cost + self.n_constraints();
        let mut r = DVector::zeros(n_rows);
        let mut jac = DMatrix::zeros(n_rows, p.n_vars());
        let (st, sd) = (self.w_track.sqrt(), self.w_dist.sqrt());
        let p_r = self.p_r();
        let g = self.constraints(x, &pred)?;
        let half_rho = (0.5 * mult.rho).sqrt();

        for n in 0..p.n_steps() {
            let base = n * (n_t + 1);
            r[base] = st * (pred.farm[n] - p.p_ref()) / p_r;
            for j in 0..n_t {
                r[base + 1 + j] = sd * pred.powers[n][j] / p_r;
                for &(k, d) in &sens[n][j] {
                    jac[(base, k)] += st * d / p_r;
                    jac[(base + 1 + j, k)] += sd * d / p_r;
                }
            }
        }
        for (c, (&gc, &lc)) in g.iter().zip(&mult.lambda).enumerate() {
            let shifted = gc + MARGIN + lc / mult.rho;
            if shifted <= 0.0 {
                continue;
            }
            let row = n_cost + c;
            r[row] = half_rho * shifted;
            let n_rated = p.n_steps() * n_t;
            if c < n_rated {
                let (n, j) = (c / n_t, c % n_t);
                for &(k, d) in &sens[n][j] {
                    jac[(row, k)] += half_rho * d / p_r;
                }
            } else {
                let idx = c - n_rated;
                let nf = self.far_rows.len();
                let grad = self.far_wake_gradient(x, self.far_rows[idx % nf], idx >= nf)?;
                for (k, d) in grad {
                    jac[(row, k)] += half_rho * d;
                }
            }
        }
        Ok((r, jac))
    }

    fn solve_from(&self, x0: &[f64], cfg: &SolverSettings) -> Result<StartResult> {
        let mut x = x0.to_vec();
        self.project(&mut x);
        let mut mult = Multipliers {
            lambda: vec![0.0; self.n_constraints()],
            rho: 10.0,
        };
        let mut iterations = 0;
        let mut converged = false;
        let mut prev_violation = f64::INFINITY;
        for _ in 0..40 {
            let (its, inner_ok) = self.inner(&mut x, &mult, cfg, cfg.max_iter.saturating_sub(iterations))?;
            iterations += its;
            let pred = self.p.predict(&x)?;
            let g = self.constraints(&x, &pred)?;
            let violation = g.iter().map(|v| (v + MARGIN).max(0.0)).fold(0.0, f64::max);
            if violation <= 1e-9 && inner_ok {
                converged = true;
                break;
            }
            if iterations >= cfg.max_iter {
                break;
            }
            for (l, gi) in mult.lambda.iter_mut().zip(&g) {
                *l = (*l + mult.rho * (gi + MARGIN)).max(0.0);
            }
            if violation > 0.25 * prev_violation {
                mult.rho = (mult.rho * 10.0).min(1e12);
            }
            prev_violation = violation;
        }
        self.exact_clamp(&mut x);
        self.restore(&mut x)?;
        let pred = self.p.predict(&x)?;
        let violation = self
            .constraints(&x, &pred)?
            .into_iter()
            .fold(0.0_f64, f64::max)
            .max(0.0);
        Ok(StartResult {
            objective: self.p.objective_value(&pred),
            norm: x.iter().map(|v| v * v).sum::<f64>().sqrt(),
            x,
            violation,
            iterations,
            converged,
        })
    }

    /// Projected LM / SPG iterations on the merit for fixed multipliers.
    fn inner(
        &self,
        x: &mut Vec<f64>,
        mult: &Multipliers,
        cfg: &SolverSettings,
        budget: usize,
    ) -> Result<(usize, bool)> {
        let n = x.len();
        let mut mu = 1e-4;
        let mut phi = self.merit(x, mult);
        if !phi.is_finite() {
            return Err(Error::domain("solver start", "merit undefined at the starting point"));
        }
        let mut history = vec![phi];
        let mut last: Option<(Vec<f64>, DVector<f64>)> = None;
        let mut trail = vec![phi];
        for it in 0..budget {
            let (r, jac) = self.linearise(x, mult)?;
            let jt = jac.transpose();
            let grad = 2.0 * &jt * &r;

            let mut probe: Vec<f64> = x.iter().zip(grad.iter()).map(|(a, g)| a - g).collect();
            self.project(&mut probe);
            let pg = probe
                .iter()
                .zip(x.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if pg <= cfg.tol {
                return Ok((it, true));
            }

            let mut accepted: Option<(Vec<f64>, f64)> = None;
            let mut normal = &jt * &jac;
            for k in 0..n {
                normal[(k, k)] += mu;
            }
            if let Some(chol) = normal.cholesky() {
                let d = chol.solve(&(-(&jt * &r)));
                let mut t = 1.0;
                for _ in 0..8 {
                    let mut xt: Vec<f64> = x.iter().zip(d.iter()).map(|(a, b)| a + t * b).collect();
                    self.project(&mut xt);
                    let decrease: f64 = grad
                        .iter()
                        .zip(xt.iter().zip(x.iter()))
                        .map(|(g, (a, b))| g * (a - b))
                        .sum();
                    if decrease >= 0.0 {
                        break;
                    }
                    let pt = self.merit(&xt, mult);
                    if pt <= phi + ARMIJO * decrease {
                        accepted = Some((xt, pt));
                        break;
                    }
                    t *= 0.5;
                }
                mu = if accepted.is_some() && t == 1.0 {
                    (mu * 0.3).max(1e-12)
                } else {
                    (mu * 4.0).min(1e8)
                };
            } else {
                mu = (mu * 10.0).min(1e8);
            }

            if accepted.is_none() {
                let alpha = match &last {
                    Some((xp, gp)) => {
                        let s: Vec<f64> = x.iter().zip(xp).map(|(a, b)| a - b).collect();
                        let y: Vec<f64> = grad.iter().zip(gp.iter()).map(|(a, b)| a - b).collect();
                        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
                        let ss: f64 = s.iter().map(|v| v * v).sum();
                        if sy > 0.0 {
                            (ss / sy).clamp(1e-10, 1e10)
                        } else {
                            1e4
                        }
                    }
                    None => 1.0 / grad.amax().max(1e-300),
                };
                let mut trial: Vec<f64> = x.iter().zip(grad.iter()).map(|(a, g)| a - alpha * g).collect();
                self.project(&mut trial);
                let d: Vec<f64> = trial.iter().zip(x.iter()).map(|(a, b)| a - b).collect();
                let gd: f64 = grad.iter().zip(&d).map(|(a, b)| a * b).sum();
                let reference = history.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut lam = 1.0;
                for _ in 0..40 {
                    let xt: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + lam * b).collect();
                    let pt = self.merit(&xt, mult);
                    if pt <= reference + ARMIJO * lam * gd {
                        accepted = Some((xt, pt));
                        break;
                    }
                    lam *= 0.5;
                }
            }

            let Some((xt, pt)) = accepted else {
                // No decrease along either direction: stationary to working precision.
                return Ok((it + 1, true));
            };
            last = Some((x.clone(), grad));
            *x = xt;
            phi = pt;
            history.push(phi);
            if history.len() > NONMONOTONE_MEMORY {
                history.remove(0);
            }
            // Merit flat over a full window: the remaining directions are
            // numerically degenerate.
            trail.push(phi);
            if trail.len() > STALL_WINDOW {
                let old = trail[trail.len() - 1 - STALL_WINDOW];
                if old - phi <= STALL_REL * phi.abs() + 1e-16 {
                    return Ok((it + 1, true));
                }
            }
        }
        Ok((budget, false))
    }

    /// Repairs residual core-length and rated-power violations by moving
    /// induction commands, upstream turbines first.
    fn restore(&self, x: &mut [f64]) -> Result<()> {
        let p = self.p;
        let lim = *p.limits();
        let far_ok = |x: &[f64], row: (usize, usize)| -> Result<bool> {
            let mut ok = self.far_wake_value(x, row, false)? <= -1e-9;
            if self.surrogate_rows {
                ok &= self.far_wake_value(x, row, true)? <= -1e-9;
            }
            Ok(ok)
        };
        for &row in &self.far_rows {
            if far_ok(x, row)? {
                continue;
            }
            let ia = p.var_index(p.pairs[row.0].up, row.1, false);
            let mut trial = x.to_vec();
            trial[ia] = lim.a_max;
            if !far_ok(&trial, row)? {
                continue;
            }
            let (mut lo, mut hi) = (x[ia], lim.a_max);
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                trial[ia] = mid;
                if far_ok(&trial, row)? {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            x[ia] = hi;
        }

        let p_r = self.p_r();
        let cp = |a: f64| a * (1.0 - a) * (1.0 - a);
        for &j in p.model().order() {
            for n in 0..p.n_steps() {
                let pred = p.predict(x)?;
                let pw = pred.powers[n][j];
                if pw <= p_r {
                    continue;
                }
                let ia = p.var_index(j, n, false);
                let a0 = x[ia];
                // Lowest induction still meeting the core-length rows of this command.
                let rows: Vec<(usize, usize)> = self
                    .far_rows
                    .iter()
                    .copied()
                    .filter(|&(pi, t)| p.pairs[pi].up == j && t == n)
                    .collect();
                let mut floor = lim.a_min;
                let mut trial = x.to_vec();
                let floor_ok = |trial: &mut Vec<f64>, a: f64| -> Result<bool> {
                    trial[ia] = a;
                    rows.iter().try_fold(true, |acc, &r| Ok(acc && far_ok(trial, r)?))
                };
                if !floor_ok(&mut trial, floor)? {
                    let (mut lo, mut hi) = (floor, a0);
                    for _ in 0..60 {
                        let mid = 0.5 * (lo + hi);
                        if floor_ok(&mut trial, mid)? {
                            hi = mid;
                        } else {
                            lo = mid;
                        }
                    }
                    floor = hi;
                }
                let target = cp(a0) * p_r * (1.0 - 1e-9) / pw;
                if cp(floor) > target {
                    x[ia] = floor;
                    continue;
                }
                let (mut lo, mut hi) = (floor, a0);
                for _ in 0..60 {
                    let mid = 0.5 * (lo + hi);
                    if cp(mid) <= target {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                x[ia] = lo;
            }
        }
        Ok(())
    }
}
