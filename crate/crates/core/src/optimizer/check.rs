use serde::{Deserialize, Serialize};

use super::problem::{OpSource, PredictionProblem};
use super::solver::ControlPlan;
use crate::error::{Error, Result};

/// Largest violation of each constraint family (0 when satisfied).
///
/// Box and rate residuals are in the input units; core-length and power
/// residuals are relative to the pair spacing and rated power.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ResidualReport {
    pub induction_box: f64,
    pub yaw_box: f64,
    pub yaw_rate: f64,
    pub far_wake: f64,
    pub rated_power: f64,
}

impl ResidualReport {
    pub fn max(&self) -> f64 {
        [
            self.induction_box,
            self.yaw_box,
            self.yaw_rate,
            self.far_wake,
            self.rated_power,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }

    pub fn inputs_max(&self) -> f64 {
        self.induction_box.max(self.yaw_box).max(self.yaw_rate)
    }
}

pub fn check_plan(p: &PredictionProblem, plan: &ControlPlan) -> Result<ResidualReport> {
    if plan.inputs.len() != p.n_steps() || plan.inputs.iter().any(|r| r.len() != p.n_turbines()) {
        return Err(Error::Dimension(format!(
            "plan has {} steps, problem expects {} steps of {} turbines",
            plan.inputs.len(),
            p.n_steps(),
            p.n_turbines()
        )));
    }
    let lim = p.limits();
    let mut rep = ResidualReport::default();
    for (n, row) in plan.inputs.iter().enumerate() {
        for (i, u) in row.iter().enumerate() {
            rep.induction_box = rep.induction_box.max(lim.a_min - u.u_a).max(u.u_a - lim.a_max);
            rep.yaw_box = rep.yaw_box.max(u.u_gamma.abs() - lim.yaw_max);
            let before = if n == 0 {
                p.prev_yaw()[i]
            } else {
                plan.inputs[n - 1][i].u_gamma
            };
            rep.yaw_rate = rep.yaw_rate.max((u.u_gamma - before).abs() - lim.yaw_rate);
        }
    }
    for pair in &p.pairs {
        for n in 0..p.n_steps() {
            let (g, a) = match p.op_source(pair, n) {
                OpSource::Input(t) => (plan.inputs[t][pair.up].u_gamma, plan.inputs[t][pair.up].u_a),
                OpSource::Fixed(g, a) => (g, a),
            };
            rep.far_wake = rep.far_wake.max(p.exact_core_length(g, a)? / pair.x - 1.0);
        }
    }
    let pred = p.predict(&plan.to_vector(p))?;
    let p_r = p.model().turbine().p_rated;
    for row in &pred.powers {
        for &pw in row {
            rep.rated_power = rep.rated_power.max(pw / p_r - 1.0);
        }
    }
    Ok(rep)
}
