use serde::{Deserialize, Serialize};

use crate::approximation::{surrogate_rotor_deficit, taylor_cos, CompiledPair, PwaFunction, SurrogateSet};
use crate::error::{Error, Result};
use crate::rotor_power::{power_prefactor, rotor_deficit_from_eval, FarmModel};
use crate::transport::{op_index, OpState, MAX_INDUCTION_CMD, MIN_INDUCTION_CMD};
use crate::wake_model::{core_length, WakeEval, MAX_YAW};

const FD_STEP: f64 = 1e-6;

/// Box and rate limits on the commands.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputLimits {
    pub yaw_max: f64,
    /// Largest yaw change per sample (rad).
    pub yaw_rate: f64,
    pub a_min: f64,
    pub a_max: f64,
}

impl Default for InputLimits {
    fn default() -> Self {
        Self {
            yaw_max: MAX_YAW,
            yaw_rate: 0.0572,
            a_min: MIN_INDUCTION_CMD,
            a_max: MAX_INDUCTION_CMD,
        }
    }
}

impl InputLimits {
    pub fn validate(&self) -> Result<()> {
        if !(self.yaw_max > 0.0 && self.yaw_max <= MAX_YAW + 1e-12) {
            return Err(Error::invalid(
                "controller.yaw_max",
                format!("{} outside (0, pi/6]", self.yaw_max),
            ));
        }
        if !(self.yaw_rate > 0.0 && self.yaw_rate.is_finite()) {
            return Err(Error::invalid("controller.yaw_rate", "must be positive"));
        }
        if !(self.a_min >= MIN_INDUCTION_CMD - 1e-12
            && self.a_min < self.a_max
            && self.a_max <= MAX_INDUCTION_CMD + 1e-12)
        {
            return Err(Error::invalid(
                "controller.a_min",
                format!(
                    "[{}, {}] must be a non-empty sub-interval of [0.06, 0.33]",
                    self.a_min, self.a_max
                ),
            ));
        }
        Ok(())
    }
}

/// Cost weights (1/W).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub q_p: f64,
    pub q_p2: f64,
}

impl Default for Weights {
    fn default() -> Self {
        Self { q_p: 1e-8, q_p2: 1e-12 }
    }
}

/// Horizon length, sampling time, weights and limits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HorizonSettings {
    pub horizon: usize,
    pub t_s: f64,
    pub weights: Weights,
    pub limits: InputLimits,
}

impl Default for HorizonSettings {
    fn default() -> Self {
        Self {
            horizon: 8,
            t_s: 13.0,
            weights: Weights::default(),
            limits: InputLimits::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Exact,
    Surrogate,
}

/// Wake/power model used for prediction inside the controller.
#[derive(Debug, Clone, PartialEq)]
pub enum ControllerModel {
    Exact,
    Surrogate { surrogates: SurrogateSet, pwa: PwaFunction },
}

impl ControllerModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            ControllerModel::Exact => ModelKind::Exact,
            ControllerModel::Surrogate { .. } => ModelKind::Surrogate,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct PairData {
    pub up: usize,
    pub x: f64,
    pub y: f64,
    /// 1-based observation-point slot read by the downstream rotor.
    pub m: usize,
    pub surrogate: Option<CompiledPair>,
}

/// Where a pair's observation-point values come from at one prediction step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum OpSource {
    /// Command of the upstream turbine issued at horizon offset `t`.
    Input(usize),
    Fixed(f64, f64),
}

/// Predicted powers `[n][j]` over the horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub powers: Vec<Vec<f64>>,
    pub farm: Vec<f64>,
    pub speeds: Vec<Vec<f64>>,
}

/// Sparse derivative of one predicted power.
pub(crate) type Sensitivity = Vec<(usize, f64)>;

/// Finite-horizon problem assembled at one sample.
#[derive(Debug, Clone)]
pub struct PredictionProblem {
    pub(crate) model: FarmModel,
    pub(crate) controller: ControllerModel,
    pub(crate) states: Vec<OpState>,
    pub(crate) prev_yaw: Vec<f64>,
    pub(crate) p_ref: f64,
    pub(crate) settings: HorizonSettings,
    pub(crate) pairs: Vec<PairData>,
    /// Pair indices feeding each downstream turbine.
    pub(crate) incoming: Vec<Vec<usize>>,
}

pub fn assemble_nonlinear(
    model: &FarmModel,
    controller: &ControllerModel,
    states: &[OpState],
    prev_yaw: &[f64],
    p_ref: f64,
    settings: &HorizonSettings,
) -> Result<PredictionProblem> {
    let n_t = model.n_turbines();
    if states.len() != n_t || prev_yaw.len() != n_t {
        return Err(Error::Dimension(format!(
            "{} states and {} previous yaws for {n_t} turbines",
            states.len(),
            prev_yaw.len()
        )));
    }
    if settings.horizon == 0 {
        return Err(Error::invalid("controller.horizon", "must be at least 1"));
    }
    if !(settings.t_s > 0.0) {
        return Err(Error::invalid("controller.t_s", "must be positive"));
    }
    settings.limits.validate()?;
    let w = settings.weights;
    if !(w.q_p >= 0.0 && w.q_p2 >= 0.0 && w.q_p.is_finite() && w.q_p2.is_finite()) {
        return Err(Error::invalid(
            "controller.q_p",
            "weights must be finite and non-negative",
        ));
    }
    if !(p_ref >= 0.0 && p_ref.is_finite()) {
        return Err(Error::invalid(
            "reference",
            format!("power reference {p_ref} must be non-negative"),
        ));
    }
    for (i, &g) in prev_yaw.iter().enumerate() {
        if g.abs() > settings.limits.yaw_max + settings.limits.yaw_rate + 1e-12 {
            return Err(Error::Infeasible(format!(
                "previous yaw {g} of turbine {} cannot return to the box within one step",
                i + 1
            )));
        }
    }
    for s in states {
        s.validate()?;
    }
    if let ControllerModel::Surrogate { surrogates, pwa } = controller {
        surrogates.check_covers(model)?;
        pwa.validate()?;
    }

    let amb = model.ambient();
    let mut pairs = Vec::with_capacity(model.n_pairs());
    let mut incoming = vec![Vec::new(); n_t];
    for p in model.pairs() {
        let m = op_index(p.x, amb, settings.t_s, states[p.upstream].n_op())?;
        let surrogate = match controller {
            ControllerModel::Exact => None,
            ControllerModel::Surrogate { surrogates, .. } => Some(surrogates.get(p.upstream, p.downstream)?.compile()),
        };
        incoming[p.downstream].push(pairs.len());
        pairs.push(PairData {
            up: p.upstream,
            x: p.x,
            y: p.y,
            m,
            surrogate,
        });
    }
    Ok(PredictionProblem {
        model: model.clone(),
        controller: controller.clone(),
        states: states.to_vec(),
        prev_yaw: prev_yaw.to_vec(),
        p_ref,
        settings: *settings,
        pairs,
        incoming,
    })
}

impl PredictionProblem {
    pub fn model(&self) -> &FarmModel {
        &self.model
    }

    pub fn controller(&self) -> &ControllerModel {
        &self.controller
    }

    pub fn states(&self) -> &[OpState] {
        &self.states
    }

    pub fn prev_yaw(&self) -> &[f64] {
        &self.prev_yaw
    }

    pub fn p_ref(&self) -> f64 {
        self.p_ref
    }

    pub fn settings(&self) -> &HorizonSettings {
        &self.settings
    }

    pub fn horizon(&self) -> usize {
        self.settings.horizon
    }

    pub fn limits(&self) -> &InputLimits {
        &self.settings.limits
    }

    pub fn n_turbines(&self) -> usize {
        self.model.n_turbines()
    }

    /// Prediction steps `n = 0..=N_p`.
    pub fn n_steps(&self) -> usize {
        self.settings.horizon + 1
    }

    pub fn n_vars(&self) -> usize {
        2 * self.n_turbines() * self.n_steps()
    }

    pub fn var_index(&self, turbine: usize, step: usize, yaw: bool) -> usize {
        2 * (turbine * self.n_steps() + step) + usize::from(!yaw)
    }

    /// Names of the decision variables in index order.
    pub fn variable_names(&self) -> Vec<String> {
        let mut names = vec![String::new(); self.n_vars()];
        for i in 0..self.n_turbines() {
            for n in 0..self.n_steps() {
                names[self.var_index(i, n, true)] = format!("u_g[{}][{n}]", i + 1);
                names[self.var_index(i, n, false)] = format!("u_a[{}][{n}]", i + 1);
            }
        }
        names
    }

    pub(crate) fn op_source(&self, pair: &PairData, n: usize) -> OpSource {
        if n >= pair.m {
            OpSource::Input(n - pair.m)
        } else {
            let (g, a) = self.states[pair.up].slot(pair.m - n);
            OpSource::Fixed(g, a)
        }
    }

    fn op_values(&self, pair: &PairData, n: usize, x: &[f64]) -> (f64, f64) {
        match self.op_source(pair, n) {
            OpSource::Input(t) => (
                x[self.var_index(pair.up, t, true)],
                x[self.var_index(pair.up, t, false)],
            ),
            OpSource::Fixed(g, a) => (g, a),
        }
    }

    pub(crate) fn pair_deficit(&self, pair: &PairData, gamma: f64, a: f64, u_j: f64) -> Result<f64> {
        let (amb, tur) = (self.model.ambient(), self.model.turbine());
        match (&self.controller, &pair.surrogate) {
            (ControllerModel::Surrogate { pwa, .. }, Some(s)) => {
                Ok(surrogate_rotor_deficit(s, pwa, gamma, a, pair.y, u_j, amb, tur))
            }
            _ => {
                let w = WakeEval::evaluate_extended(gamma, a, pair.x, amb, tur)?;
                Ok(rotor_deficit_from_eval(&w, pair.y, u_j, tur))
            }
        }
    }

    /// `cos(u)` as the controller model sees it.
    fn yaw_factor(&self, u: f64) -> f64 {
        match self.controller {
            ControllerModel::Exact => u.cos(),
            ControllerModel::Surrogate { .. } => taylor_cos(u),
        }
    }

    /// `d ln(yaw_factor) / du`.
    fn yaw_factor_log_slope(&self, u: f64) -> f64 {
        match self.controller {
            ControllerModel::Exact => -u.tan(),
            ControllerModel::Surrogate { .. } => -u / taylor_cos(u),
        }
    }

    fn power(&self, v: f64, a: f64, u: f64) -> f64 {
        let tur = self.model.turbine();
        let c_p = 4.0 * tur.kappa * a * (1.0 - a) * (1.0 - a);
        power_prefactor(self.model.ambient(), tur) * v.powi(3) * c_p * self.yaw_factor(u).powf(tur.p_p)
    }

    /// Powers over the horizon for decision vector `x`.
    pub fn predict(&self, x: &[f64]) -> Result<Prediction> {
        self.predict_inner(x, false).map(|r| r.0)
    }

    pub(crate) fn predict_with_sensitivities(&self, x: &[f64]) -> Result<(Prediction, Vec<Vec<Sensitivity>>)> {
        self.predict_inner(x, true).map(|(p, s)| (p, s.expect("requested")))
    }

    fn predict_inner(&self, x: &[f64], sens: bool) -> Result<(Prediction, Option<Vec<Vec<Sensitivity>>>)> {
        if x.len() != self.n_vars() {
            return Err(Error::Dimension(format!(
                "{} values for {} variables",
                x.len(),
                self.n_vars()
            )));
        }
        let n_t = self.n_turbines();
        let v_inf = self.model.ambient().v_inf;
        let p_p = self.model.turbine().p_p;
        let mut powers = vec![vec![0.0; n_t]; self.n_steps()];
        let mut speeds = vec![vec![0.0; n_t]; self.n_steps()];
        let mut all_sens = sens.then(|| vec![vec![Vec::new(); n_t]; self.n_steps()]);
        for n in 0..self.n_steps() {
            for j in 0..n_t {
                let u = x[self.var_index(j, n, true)];
                let a = x[self.var_index(j, n, false)];
                let mut v = v_inf;
                let mut factors = Vec::with_capacity(self.incoming[j].len());
                for &pi in &self.incoming[j] {
                    let pair = &self.pairs[pi];
                    let (g_op, a_op) = self.op_values(pair, n, x);
                    let r = self.pair_deficit(pair, g_op, a_op, u)?;
                    v *= 1.0 - r;
                    factors.push((pi, g_op, a_op, r));
                }
                if !(v > 0.0) {
                    return Err(Error::domain(
                        "predicted wind speed",
                        format!("{v} at turbine {} step {n}", j + 1),
                    ));
                }
                let p = self.power(v, a, u);
                powers[n][j] = p;
                speeds[n][j] = v;
                if let Some(all) = all_sens.as_mut() {
                    let mut s: Sensitivity = Vec::with_capacity(2 + 2 * factors.len());
                    let iu = self.var_index(j, n, true);
                    let ia = self.var_index(j, n, false);
                    let mut du = p * p_p * self.yaw_factor_log_slope(u);
                    s.push((ia, p * (1.0 - 3.0 * a) / (a * (1.0 - a))));
                    for &(pi, g_op, a_op, r) in &factors {
                        let pair = &self.pairs[pi];
                        let dp_dr = -3.0 * p / (1.0 - r);
                        let h = FD_STEP;
                        let dr_du = (self.pair_deficit(pair, g_op, a_op, u + h)?
                            - self.pair_deficit(pair, g_op, a_op, u - h)?)
                            / (2.0 * h);
                        du += dp_dr * dr_du;
                        if let OpSource::Input(t) = self.op_source(pair, n) {
                            let dr_dg = (self.pair_deficit(pair, g_op + h, a_op, u)?
                                - self.pair_deficit(pair, g_op - h, a_op, u)?)
                                / (2.0 * h);
                            let dr_da = (self.pair_deficit(pair, g_op, a_op + h, u)?
                                - self.pair_deficit(pair, g_op, a_op - h, u)?)
                                / (2.0 * h);
                            s.push((self.var_index(pair.up, t, true), dp_dr * dr_dg));
                            s.push((self.var_index(pair.up, t, false), dp_dr * dr_da));
                        }
                    }
                    s.push((iu, du));
                    all[n][j] = s;
                }
            }
        }
        let farm = powers.iter().map(|row| row.iter().sum()).collect();
        Ok((Prediction { powers, farm, speeds }, all_sens))
    }

    /// Cost of a prediction in the original units.
    pub fn objective_value(&self, pred: &Prediction) -> f64 {
        let w = self.settings.weights;
        pred.powers
            .iter()
            .zip(&pred.farm)
            .map(|(row, &pf)| w.q_p * (pf - self.p_ref).powi(2) + w.q_p2 * row.iter().map(|p| p * p).sum::<f64>())
            .sum()
    }

    /// Core-length constraints `(pair, t)` on commands that reach a
    /// downstream rotor within the horizon.
    pub(crate) fn far_wake_rows(&self) -> Vec<(usize, usize)> {
        let mut rows = Vec::new();
        for (pi, pair) in self.pairs.iter().enumerate() {
            if pair.m <= self.settings.horizon {
                for t in 0..=self.settings.horizon - pair.m {
                    rows.push((pi, t));
                }
            }
        }
        rows
    }

    pub(crate) fn exact_core_length(&self, gamma: f64, a: f64) -> Result<f64> {
        core_length(gamma, a, self.model.ambient(), self.model.turbine())
    }

    /// Largest scaled core-length violation among observation points that
    /// are already in flight and cannot be changed.
    pub fn fixed_far_wake_violation(&self) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for pair in &self.pairs {
            for n in 0..self.n_steps().min(pair.m) {
                if let OpSource::Fixed(g, a) = self.op_source(pair, n) {
                    worst = worst.max(self.exact_core_length(g, a)? / pair.x - 1.0);
                }
            }
        }
        Ok(worst)
    }

    /// Inputs held at `(prev_yaw, a)` for every turbine and step.
    pub fn constant_point(&self, a: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.n_vars()];
        for i in 0..self.n_turbines() {
            for n in 0..self.n_steps() {
                x[self.var_index(i, n, true)] = self.prev_yaw[i].clamp(-self.limits().yaw_max, self.limits().yaw_max);
                x[self.var_index(i, n, false)] = a[i];
            }
        }
        x
    }
}
