//! Observation-point shift registers carrying yaw and induction downstream.
//!
//! Each turbine owns a chain of `n_op` observation points spaced `V∞·T_s`
//! apart. Per sample the chain shifts by one slot and slot 1 receives the
//! turbine's current command, so slot `m` holds the command issued `m`
//! samples ago.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rotor_power::FarmModel;
use crate::wake_model::{AmbientParams, MAX_INDUCTION, MAX_YAW};

/// Yaw and induction command of one turbine for one sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    /// Yaw misalignment (rad).
    pub u_gamma: f64,
    /// Axial induction factor.
    pub u_a: f64,
}

/// Operating box for commands.
pub const MIN_INDUCTION_CMD: f64 = 0.06;
pub const MAX_INDUCTION_CMD: f64 = 0.33;

impl ControlInput {
    pub fn new(u_gamma: f64, u_a: f64) -> Self {
        Self { u_gamma, u_a }
    }

    pub fn validate(&self) -> Result<()> {
        const TOL: f64 = 1e-12;
        if !(self.u_a >= MIN_INDUCTION_CMD - TOL && self.u_a <= MAX_INDUCTION_CMD + TOL) {
            return Err(Error::invalid("u_a", format!("{} outside [0.06, 0.33]", self.u_a)));
        }
        if !(self.u_gamma.abs() <= MAX_YAW + TOL) {
            return Err(Error::invalid(
                "u_gamma",
                format!("{} outside [-pi/6, pi/6]", self.u_gamma),
            ));
        }
        Ok(())
    }
}

/// Observation-point values of one turbine; index 0 is slot 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpState {
    gammas: Vec<f64>,
    inductions: Vec<f64>,
}

impl OpState {
    /// Chain of `n_op` slots all holding the same values.
    pub fn uniform(n_op: usize, gamma: f64, a: f64) -> Result<Self> {
        Self::from_vectors(vec![gamma; n_op], vec![a; n_op])
    }

    pub fn from_vectors(gammas: Vec<f64>, inductions: Vec<f64>) -> Result<Self> {
        if gammas.len() != inductions.len() {
            return Err(Error::Dimension(format!(
                "{} yaw slots vs {} induction slots",
                gammas.len(),
                inductions.len()
            )));
        }
        if gammas.is_empty() {
            return Err(Error::Dimension("observation-point chain is empty".into()));
        }
        let state = Self { gammas, inductions };
        state.validate()?;
        Ok(state)
    }

    pub fn validate(&self) -> Result<()> {
        for (m, (&g, &a)) in self.gammas.iter().zip(&self.inductions).enumerate() {
            if !(g.abs() <= MAX_YAW + 1e-12) {
                return Err(Error::invalid(
                    format!("op[{}].gamma", m + 1),
                    format!("{g} outside [-pi/6, pi/6]"),
                ));
            }
            if !(0.0..=MAX_INDUCTION).contains(&a) {
                return Err(Error::invalid(
                    format!("op[{}].a", m + 1),
                    format!("{a} outside [0, 0.4]"),
                ));
            }
        }
        Ok(())
    }

    pub fn n_op(&self) -> usize {
        self.gammas.len()
    }

    pub fn gammas(&self) -> &[f64] {
        &self.gammas
    }

    pub fn inductions(&self) -> &[f64] {
        &self.inductions
    }

    /// Values at 1-based slot `m`.
    pub fn slot(&self, m: usize) -> (f64, f64) {
        (self.gammas[m - 1], self.inductions[m - 1])
    }

    /// One sample of the shift-register dynamics.
    pub fn shift(&self, input: &ControlInput) -> Result<Self> {
        input.validate()?;
        Ok(Self {
            gammas: shift_values(&self.gammas, input.u_gamma),
            inductions: shift_values(&self.inductions, input.u_a),
        })
    }

    /// Same as the state-space map with the mirrored yaw entries.
    pub fn mirrored(&self) -> Self {
        Self {
            gammas: self.gammas.iter().map(|g| -g).collect(),
            inductions: self.inductions.clone(),
        }
    }
}

/// `A·v + B·u` with the lower shift matrix `A` and `B = e₁`.
pub fn shift_values(values: &[f64], input: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    if values.is_empty() {
        return out;
    }
    out.push(input);
    out.extend_from_slice(&values[..values.len() - 1]);
    out
}

/// 1-based observation-point slot nearest to a downstream rotor at
/// streamwise distance `dist`. Halfway cases round down.
pub fn op_index(dist: f64, amb: &AmbientParams, t_s: f64, n_op: usize) -> Result<usize> {
    if !(dist > 0.0) {
        return Err(Error::Config(format!("streamwise distance {dist} must be positive")));
    }
    let ratio = dist / (amb.v_inf * t_s);
    let m = ((ratio - 0.5).ceil() as i64).max(1) as usize;
    if m > n_op {
        return Err(Error::Config(format!(
            "distance {dist} m needs observation point {m} but the chain has {n_op}"
        )));
    }
    Ok(m)
}

/// `(γ, a)` carried by the observation point nearest to a downstream rotor.
pub fn op_for_downstream(state: &OpState, streamwise_dist: f64, amb: &AmbientParams, t_s: f64) -> Result<(f64, f64)> {
    let m = op_index(streamwise_dist, amb, t_s, state.n_op())?;
    Ok(state.slot(m))
}

/// Chain length spanning the longest influencing pair plus one spare slot.
pub fn required_n_op(layout: &FarmModel, amb: &AmbientParams, t_s: f64) -> usize {
    let longest = layout.pairs().map(|p| p.x).fold(0.0_f64, f64::max);
    let spacing = amb.v_inf * t_s;
    ((longest / spacing) - 1e-9).ceil().max(0.0) as usize + 1
}
