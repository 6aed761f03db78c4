//! Receding-horizon loop against a plant running the exact wake model.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optimizer::{
    assemble_nonlinear, solve_nonlinear, ControlPlan, ControllerModel, HorizonSettings, SolveStatus, SolverSettings,
    SolverStats,
};
use crate::rotor_power::{farm_power, wake_sources, FarmModel, PowerReport};
use crate::transport::{required_n_op, ControlInput, OpState};

/// One reference level starting at `start_min`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceStep {
    pub start_min: f64,
    /// Farm power reference (W).
    pub power: f64,
}

/// Piecewise-constant farm power reference.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Reference {
    pub steps: Vec<ReferenceStep>,
}

impl Reference {
    /// `{9, 6, 4.5, 7.5}` MW for 7.5 min each.
    pub fn case_study() -> Self {
        let levels = [9e6, 6e6, 4.5e6, 7.5e6];
        Self {
            steps: levels
                .iter()
                .enumerate()
                .map(|(k, &power)| ReferenceStep {
                    start_min: 7.5 * k as f64,
                    power,
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (k, s) in self.steps.iter().enumerate() {
            if !(s.power >= 0.0 && s.power.is_finite()) {
                return Err(Error::invalid(
                    format!("reference.steps[{k}].power"),
                    format!("{} must be non-negative", s.power),
                ));
            }
            if !(s.start_min >= 0.0 && s.start_min.is_finite()) {
                return Err(Error::invalid(
                    format!("reference.steps[{k}].start_min"),
                    "must be non-negative",
                ));
            }
        }
        if let Some(first) = self.steps.first() {
            if first.start_min != 0.0 {
                return Err(Error::invalid(
                    "reference.steps[0].start_min",
                    "the first step must start at 0",
                ));
            }
        }
        if self.steps.windows(2).any(|w| !(w[1].start_min > w[0].start_min)) {
            return Err(Error::invalid(
                "reference.steps",
                "start times must be strictly increasing",
            ));
        }
        Ok(())
    }

    /// Reference in force at `t_min`, if any step has started.
    pub fn at(&self, t_min: f64) -> Option<f64> {
        self.steps
            .iter()
            .rev()
            .find(|s| s.start_min <= t_min + 1e-9)
            .map(|s| s.power)
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Everything the loop needs, already validated and with surrogates fitted.
#[derive(Debug, Clone)]
pub struct LoopConfig {
    pub model: FarmModel,
    pub controller: ControllerModel,
    pub horizon: HorizonSettings,
    pub solver: SolverSettings,
    pub reference: Reference,
    pub duration_s: f64,
    pub initial: ControlInput,
    pub record_solve_time: bool,
}

impl LoopConfig {
    /// Samples `k = 0..=floor(duration / T_s)`; none without a reference.
    pub fn n_steps(&self) -> usize {
        if self.reference.is_empty() {
            0
        } else {
            (self.duration_s / self.horizon.t_s + 1e-9).floor() as usize + 1
        }
    }
}

/// Observation-point chains and input history of a running loop.
#[derive(Debug, Clone)]
pub struct ScenarioState {
    pub k: usize,
    pub states: Vec<OpState>,
    pub applied: Vec<Vec<ControlInput>>,
    pub references: Vec<f64>,
    pub reports: Vec<PowerReport>,
    pub solver_stats: Vec<SolverStats>,
    pub faults: Vec<(usize, String)>,
    last_inputs: Vec<ControlInput>,
    last_plan: Option<ControlPlan>,
}

impl ScenarioState {
    pub fn new(model: &FarmModel, t_s: f64, initial: ControlInput) -> Result<Self> {
        initial.validate()?;
        let n_op = required_n_op(model, model.ambient(), t_s);
        let chain = OpState::uniform(n_op, initial.u_gamma, initial.u_a)?;
        Ok(Self {
            k: 0,
            states: vec![chain; model.n_turbines()],
            applied: Vec::new(),
            references: Vec::new(),
            reports: Vec::new(),
            solver_stats: Vec::new(),
            faults: Vec::new(),
            last_inputs: vec![initial; model.n_turbines()],
            last_plan: None,
        })
    }

    pub fn last_inputs(&self) -> &[ControlInput] {
        &self.last_inputs
    }
}

/// Powers produced at the current sample, then one shift of every chain.
pub fn plant_advance(
    model: &FarmModel,
    states: &[OpState],
    inputs: &[ControlInput],
    t_s: f64,
) -> Result<(Vec<OpState>, PowerReport)> {
    if inputs.len() != model.n_turbines() {
        return Err(Error::Dimension(format!(
            "{} inputs for {} turbines",
            inputs.len(),
            model.n_turbines()
        )));
    }
    for (i, u) in inputs.iter().enumerate() {
        u.validate().map_err(|e| e.at_turbine(i + 1))?;
    }
    let sources = wake_sources(model, states, t_s)?;
    let report = farm_power(model, inputs, &sources)?;
    let next = states
        .iter()
        .zip(inputs)
        .map(|(s, u)| s.shift(u))
        .collect::<Result<Vec<_>>>()?;
    Ok((next, report))
}

/// Solves at the current sample, applies the first input column and
/// advances the plant. Holds the previous inputs if no feasible plan exists.
pub fn mpc_step(state: &mut ScenarioState, cfg: &LoopConfig) -> Result<ControlPlan> {
    let k = state.k;
    let t_min = k as f64 * cfg.horizon.t_s / 60.0;
    let p_ref = cfg
        .reference
        .at(t_min)
        .ok_or_else(|| Error::Config(format!("no reference defined at {t_min} min")))?;
    let prev_yaw: Vec<f64> = state.last_inputs.iter().map(|u| u.u_gamma).collect();
    let problem = assemble_nonlinear(
        &cfg.model,
        &cfg.controller,
        &state.states,
        &prev_yaw,
        p_ref,
        &cfg.horizon,
    )?;
    let plan = solve_nonlinear(&problem, &cfg.solver, state.last_plan.as_ref())?;

    let inputs = if plan.stats.status == SolveStatus::Infeasible {
        let msg = format!(
            "no feasible plan (violation {:.3e}); holding previous inputs",
            plan.stats.max_violation
        );
        log::warn!("step {k}: {msg}");
        state.faults.push((k, msg));
        state.last_inputs.clone()
    } else {
        plan.first_inputs().to_vec()
    };

    let (next, report) = plant_advance(&cfg.model, &state.states, &inputs, cfg.horizon.t_s)?;
    let p_r = cfg.model.turbine().p_rated;
    if let Some(worst) = report.per_turbine.iter().copied().reduce(f64::max) {
        if worst > p_r {
            log::info!(
                "step {k}: plant power {worst:.0} W exceeds rated power by {:.2}%",
                100.0 * (worst / p_r - 1.0)
            );
        }
    }
    state.states = next;
    state.applied.push(inputs.clone());
    state.references.push(p_ref);
    state.reports.push(report);
    state.solver_stats.push(plan.stats.clone());
    state.last_inputs = inputs;
    state.last_plan = (plan.stats.status != SolveStatus::Infeasible).then(|| plan.clone());
    state.k += 1;
    Ok(plan)
}

/// One row of the run log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub t_min: f64,
    pub farm_power: f64,
    pub reference: f64,
    pub powers: Vec<f64>,
    pub gammas_deg: Vec<f64>,
    pub inductions: Vec<f64>,
    pub solve_time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Summary {
    pub steps: usize,
    /// Mean of `|P_F − P_ref| / P_ref`.
    pub mean_tracking_error: f64,
    pub max_tracking_error: f64,
    pub max_solve_time: f64,
    /// Largest `max_i P_i − min_i P_i` over the run (W).
    pub max_power_spread: f64,
    pub faults: usize,
    /// Largest plant power relative to rated power, minus one (0 if never exceeded).
    pub max_overshoot: f64,
}

#[derive(Debug, Clone)]
pub struct RunLog {
    pub rows: Vec<LogRow>,
    pub applied: Vec<Vec<ControlInput>>,
    pub plans: Vec<ControlPlan>,
    pub faults: Vec<(usize, String)>,
}

impl RunLog {
    pub fn summary(&self, p_r: f64) -> Summary {
        if self.rows.is_empty() {
            return Summary::default();
        }
        let errors: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.reference > 0.0)
            .map(|r| (r.farm_power - r.reference).abs() / r.reference)
            .collect();
        let mean = if errors.is_empty() {
            0.0
        } else {
            errors.iter().sum::<f64>() / errors.len() as f64
        };
        let spread = |r: &LogRow| {
            let hi = r.powers.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lo = r.powers.iter().copied().fold(f64::INFINITY, f64::min);
            hi - lo
        };
        Summary {
            steps: self.rows.len(),
            mean_tracking_error: mean,
            max_tracking_error: errors.iter().copied().fold(0.0, f64::max),
            max_solve_time: self.plans.iter().map(|p| p.stats.wall_time).fold(0.0, f64::max),
            max_power_spread: self.rows.iter().map(spread).fold(0.0, f64::max),
            faults: self.faults.len(),
            max_overshoot: self
                .rows
                .iter()
                .flat_map(|r| r.powers.iter())
                .map(|p| p / p_r - 1.0)
                .fold(0.0, f64::max),
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let n_t = self.rows.first().map_or(0, |r| r.powers.len());
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string(), "P".into(), "Pref".into()];
        header.extend((1..=n_t).map(|i| format!("P{i}")));
        header.extend((1..=n_t).map(|i| format!("gamma{i}")));
        header.extend((1..=n_t).map(|i| format!("a{i}")));
        header.push("tSolve".into());
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.t_min, r.farm_power, r.reference];
            rec.extend(&r.powers);
            rec.extend(&r.gammas_deg);
            rec.extend(&r.inductions);
            rec.push(r.solve_time);
            w.serialize(rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv_file(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// Runs the whole loop. On a fault the log gathered so far is returned
/// alongside the error.
pub fn run_loop(cfg: &LoopConfig) -> std::result::Result<RunLog, (RunLog, Error)> {
    let mut log = RunLog {
        rows: Vec::new(),
        applied: Vec::new(),
        plans: Vec::new(),
        faults: Vec::new(),
    };
    let mut state = match ScenarioState::new(&cfg.model, cfg.horizon.t_s, cfg.initial) {
        Ok(s) => s,
        Err(e) => return Err((log, e)),
    };
    for k in 0..cfg.n_steps() {
        let plan = match mpc_step(&mut state, cfg) {
            Ok(p) => p,
            Err(e) => {
                log.faults = state.faults;
                return Err((log, e.at_step(k)));
            }
        };
        let report = state.reports.last().expect("step logged");
        let inputs = state.applied.last().expect("step logged");
        log.rows.push(LogRow {
            t_min: k as f64 * cfg.horizon.t_s / 60.0,
            farm_power: report.farm_total,
            reference: *state.references.last().expect("step logged"),
            powers: report.per_turbine.clone(),
            gammas_deg: inputs.iter().map(|u| u.u_gamma.to_degrees()).collect(),
            inductions: inputs.iter().map(|u| u.u_a).collect(),
            solve_time: if cfg.record_solve_time {
                plan.stats.wall_time
            } else {
                0.0
            },
        });
        log.applied.push(inputs.clone());
        log.plans.push(plan);
    }
    log.faults = state.faults;
    Ok(log)
}

/// Constant inputs found by a per-turbine grid scan under steady inflow.
#[derive(Debug, Clone, PartialEq)]
pub struct SteadyPoint {
    pub inputs: Vec<ControlInput>,
    pub report: PowerReport,
    pub cost: f64,
}

fn steady_report(model: &FarmModel, inputs: &[ControlInput], t_s: f64) -> Result<PowerReport> {
    let n_op = required_n_op(model, model.ambient(), t_s);
    let states = inputs
        .iter()
        .map(|u| OpState::uniform(n_op, u.u_gamma, u.u_a))
        .collect::<Result<Vec<_>>>()?;
    farm_power(model, inputs, &wake_sources(model, &states, t_s)?)
}

/// Coordinate-wise scan of a `grid × grid` box per turbine, repeated until
/// no turbine improves. Points breaking the core-length or rated-power
/// limits are skipped.
pub fn steady_optimum(model: &FarmModel, p_ref: f64, settings: &HorizonSettings, grid: usize) -> Result<SteadyPoint> {
    if grid < 2 {
        return Err(Error::invalid("grid", "needs at least 2 points per axis"));
    }
    let lim = settings.limits;
    let w = settings.weights;
    let p_r = model.turbine().p_rated;
    let feasible = |inputs: &[ControlInput]| -> Result<Option<(f64, PowerReport)>> {
        for p in model.pairs() {
            let u = inputs[p.upstream];
            if crate::wake_model::core_length(u.u_gamma, u.u_a, model.ambient(), model.turbine())? > p.x {
                return Ok(None);
            }
        }
        let rep = steady_report(model, inputs, settings.t_s)?;
        if rep.per_turbine.iter().any(|&pw| pw > p_r) {
            return Ok(None);
        }
        let cost =
            w.q_p * (rep.farm_total - p_ref).powi(2) + w.q_p2 * rep.per_turbine.iter().map(|p| p * p).sum::<f64>();
        Ok(Some((cost, rep)))
    };
    let axis = |lo: f64, hi: f64| -> Vec<f64> {
        (0..grid)
            .map(|k| lo + (hi - lo) * k as f64 / (grid - 1) as f64)
            .collect()
    };
    let gammas = axis(-lim.yaw_max, lim.yaw_max);
    let inductions = axis(lim.a_min, lim.a_max);

    let mut inputs = vec![ControlInput::new(0.0, 0.5 * (lim.a_min + lim.a_max)); model.n_turbines()];
    let mut best = feasible(&inputs)?;
    for _sweep in 0..50 {
        let mut improved = false;
        for i in 0..model.n_turbines() {
            for &g in &gammas {
                for &a in &inductions {
                    let mut trial = inputs.clone();
                    trial[i] = ControlInput::new(g, a);
                    if let Some((c, rep)) = feasible(&trial)? {
                        if best.as_ref().is_none_or(|(b, _)| c < *b * (1.0 - 1e-12)) {
                            best = Some((c, rep));
                            inputs = trial;
                            improved = true;
                        }
                    }
                }
            }
        }
        if !improved {
            break;
        }
    }
    let (cost, report) =
        best.ok_or_else(|| Error::Infeasible("no grid point satisfies the steady constraints".into()))?;
    Ok(SteadyPoint { inputs, report, cost })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wake_model::{AmbientParams, TurbineParams};

    fn case() -> FarmModel {
        FarmModel::case_study(TurbineParams::default(), AmbientParams::default()).unwrap()
    }

    #[test]
    fn constant_inputs_reach_fixed_point() {
        let model = case();
        let mut states = vec![OpState::uniform(8, 0.2, 0.3).unwrap(); 3];
        let inputs = vec![ControlInput::new(-0.1, 0.25); 3];
        let mut reports = Vec::new();
        for _ in 0..10 {
            let (next, rep) = plant_advance(&model, &states, &inputs, 13.0).unwrap();
            states = next;
            reports.push(rep);
        }
        assert_eq!(reports[8], reports[9]);
        assert_ne!(reports[0], reports[9]);
    }

    #[test]
    fn yaw_step_reaches_downstream_after_seven_samples() {
        let model = case();
        let mut states = vec![OpState::uniform(8, 0.0, 0.25).unwrap(); 3];
        let base = vec![ControlInput::new(0.0, 0.25); 3];
        let mut first_change = None;
        let (_, reference) = plant_advance(&model, &states, &base, 13.0).unwrap();
        for k in 0..12 {
            let mut inputs = base.clone();
            inputs[0].u_gamma = 0.05;
            let (next, rep) = plant_advance(&model, &states, &inputs, 13.0).unwrap();
            if rep.per_turbine[2] != reference.per_turbine[2] {
                first_change.get_or_insert(k);
            }
            states = next;
        }
        assert_eq!(first_change, Some(7));
    }

    #[test]
    fn minimum_induction_still_produces_power() {
        let model = FarmModel::from_positions(
            TurbineParams::default(),
            AmbientParams::default(),
            &[(0.0, 0.0), (0.0, 400.0), (0.0, 800.0)],
            0.0,
        )
        .unwrap();
        let states = vec![OpState::uniform(1, 0.0, 0.06).unwrap(); 3];
        let (_, rep) = plant_advance(&model, &states, &[ControlInput::new(0.0, 0.06); 3], 13.0).unwrap();
        assert!(rep.farm_total > 0.0);
    }

    #[test]
    fn reference_lookup_and_validation() {
        let r = Reference::case_study();
        r.validate().unwrap();
        assert_eq!(r.at(0.0), Some(9e6));
        assert_eq!(r.at(7.49), Some(9e6));
        assert_eq!(r.at(7.5), Some(6e6));
        assert_eq!(r.at(29.9), Some(7.5e6));
        let mut bad = r.clone();
        bad.steps.swap(1, 2);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn empty_reference_gives_empty_log() {
        let cfg = LoopConfig {
            model: case(),
            controller: ControllerModel::Exact,
            horizon: HorizonSettings::default(),
            solver: SolverSettings::default(),
            reference: Reference::default(),
            duration_s: 1800.0,
            initial: ControlInput::new(0.0, 0.2),
            record_solve_time: false,
        };
        let log = run_loop(&cfg).unwrap();
        assert!(log.rows.is_empty());
        assert_eq!(log.summary(3.35e6), Summary::default());
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "t,P,Pref,tSolve\n");
    }

    #[test]
    fn steady_scan_meets_reachable_reference() {
        let model = case();
        let pt = steady_optimum(&model, 6e6, &HorizonSettings::default(), 21).unwrap();
        assert!(
            (pt.report.farm_total - 6e6).abs() / 6e6 < 0.02,
            "{}",
            pt.report.farm_total
        );
        assert!(pt.report.per_turbine.iter().all(|&p| p <= 3.35e6));
    }

    #[test]
    fn row_count_for_thirty_minutes() {
        let cfg = LoopConfig {
            model: case(),
            controller: ControllerModel::Exact,
            horizon: HorizonSettings::default(),
            solver: SolverSettings::default(),
            reference: Reference::case_study(),
            duration_s: 1800.0,
            initial: ControlInput::new(0.0, 0.2),
            record_solve_time: false,
        };
        assert_eq!(cfg.n_steps(), 139);
    }
}
