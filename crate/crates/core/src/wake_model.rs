//! Steady Gaussian far-wake model for a single wake source.
//!
//! Every quantity is a function of the yaw misalignment `gamma` (rad) and the
//! axial induction factor `a` carried by an observation point, plus the
//! streamwise distance `x` (m) behind the source rotor. Square roots and
//! logarithms are guarded so that out-of-domain inputs surface as
//! [`Error::Domain`] instead of NaN.

use std::f64::consts::{FRAC_PI_6, SQRT_2};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper bound on |yaw| used throughout the model.
pub const MAX_YAW: f64 = FRAC_PI_6;
/// Momentum theory is only valid up to this induction.
pub const MAX_INDUCTION: f64 = 0.4;

const YAW_TOL: f64 = 1e-9;
const SQRT_8: f64 = 2.0 * SQRT_2;

/// Free-stream and wake-recovery parameters shared by all turbines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AmbientParams {
    /// Free wind speed V∞ (m/s).
    pub v_inf: f64,
    /// Turbulence intensity I.
    pub turbulence_i: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Spanwise wake growth rate.
    pub k_y: f64,
    /// Vertical wake growth rate.
    pub k_z: f64,
    /// Air density (kg/m³).
    pub rho: f64,
}

impl Default for AmbientParams {
    fn default() -> Self {
        Self {
            v_inf: 10.0,
            turbulence_i: 0.06,
            alpha: 2.32,
            beta: 0.154,
            k_y: 0.0267,
            k_z: 0.0267,
            rho: 1.225,
        }
    }
}

impl AmbientParams {
    pub fn validate(&self) -> Result<()> {
        positive("ambient.v_inf", self.v_inf)?;
        positive("ambient.turbulence_i", self.turbulence_i)?;
        positive("ambient.alpha", self.alpha)?;
        positive("ambient.beta", self.beta)?;
        positive("ambient.rho", self.rho)?;
        non_negative("ambient.k_y", self.k_y)?;
        non_negative("ambient.k_z", self.k_z)?;
        if (self.k_y - self.k_z).abs() > 1e-12 * self.k_y.abs().max(1.0) {
            return Err(Error::invalid("ambient.k_z", "must equal ambient.k_y"));
        }
        Ok(())
    }
}

/// Rotor parameters; all turbines in a farm share one set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TurbineParams {
    /// Rotor diameter D (m).
    pub diameter: f64,
    /// Drive-train efficiency η.
    pub efficiency: f64,
    /// Power-coefficient correction κ.
    pub kappa: f64,
    /// Power-yaw loss exponent.
    pub p_p: f64,
    /// Rated power (W).
    pub p_rated: f64,
}

impl Default for TurbineParams {
    fn default() -> Self {
        Self {
            diameter: 130.0,
            efficiency: 0.9367,
            kappa: 0.8174,
            p_p: 2.0,
            p_rated: 3.35e6,
        }
    }
}

impl TurbineParams {
    pub fn validate(&self) -> Result<()> {
        positive("turbine.diameter", self.diameter)?;
        unit_interval("turbine.efficiency", self.efficiency)?;
        unit_interval("turbine.kappa", self.kappa)?;
        non_negative("turbine.p_p", self.p_p)?;
        positive("turbine.p_rated", self.p_rated)?;
        Ok(())
    }
}

fn positive(key: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(key, format!("must be > 0, got {v}")))
    }
}

fn non_negative(key: &str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(key, format!("must be >= 0, got {v}")))
    }
}

fn unit_interval(key: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 && v <= 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(key, format!("must lie in (0, 1], got {v}")))
    }
}

fn checked_sqrt(quantity: &'static str, v: f64) -> Result<f64> {
    if v >= 0.0 {
        Ok(v.sqrt())
    } else {
        Err(Error::domain(quantity, format!("negative radicand {v}")))
    }
}

fn check_yaw(gamma: f64) -> Result<()> {
    if gamma.is_finite() && gamma.abs() <= MAX_YAW + YAW_TOL {
        Ok(())
    } else {
        Err(Error::domain("yaw", format!("|gamma| = {gamma} exceeds pi/6")))
    }
}

/// `C_t = 4a(1 - a cos γ)`.
pub fn thrust_coefficient(gamma: f64, a: f64) -> Result<f64> {
    check_yaw(gamma)?;
    if !(a > 0.0 && a <= MAX_INDUCTION) {
        return Err(Error::domain(
            "thrust coefficient",
            format!("axial induction {a} outside (0, 0.4]"),
        ));
    }
    Ok(4.0 * a * (1.0 - a * gamma.cos()))
}

/// Distance separating near- and far-wake conditions.
pub fn core_length(gamma: f64, a: f64, amb: &AmbientParams, tur: &TurbineParams) -> Result<f64> {
    let c_t = thrust_coefficient(gamma, a)?;
    core_length_from_ct(gamma, c_t, amb, tur)
}

fn core_length_from_ct(gamma: f64, c_t: f64, amb: &AmbientParams, tur: &TurbineParams) -> Result<f64> {
    if 1.0 - c_t <= 0.0 {
        return Err(Error::domain("core length", format!("1 - C_t <= 0 (C_t = {c_t})")));
    }
    let s = (1.0 - c_t).sqrt();
    Ok(tur.diameter * gamma.cos() * (1.0 + s) / (SQRT_2 * (amb.alpha * amb.turbulence_i + amb.beta * (1.0 - s))))
}

/// Skew angle ζ of the wake centreline.
pub fn skew_angle(gamma: f64, a: f64) -> Result<f64> {
    let c_t = thrust_coefficient(gamma, a)?;
    skew_from_ct(gamma, c_t)
}

fn skew_from_ct(gamma: f64, c_t: f64) -> Result<f64> {
    let cos_g = gamma.cos();
    let root = checked_sqrt("skew angle", 1.0 - c_t * cos_g)?;
    Ok(0.3 * gamma / cos_g * (1.0 - root))
}

/// Spanwise and vertical wake widths `(σ_y, σ_z)`.
pub fn wake_widths(gamma: f64, a: f64, x: f64, amb: &AmbientParams, tur: &TurbineParams) -> Result<(f64, f64)> {
    let w = WakeEval::evaluate(gamma, a, x, amb, tur)?;
    Ok((w.sigma_y, w.sigma_z))
}

/// Deficit at the wake centre.
pub fn centre_deficit(gamma: f64, a: f64, x: f64, amb: &AmbientParams, tur: &TurbineParams) -> Result<f64> {
    Ok(WakeEval::evaluate(gamma, a, x, amb, tur)?.r_c)
}

/// Spanwise deflection δ_y of the wake centre.
pub fn deflection(gamma: f64, a: f64, x: f64, amb: &AmbientParams, tur: &TurbineParams) -> Result<f64> {
    Ok(WakeEval::evaluate(gamma, a, x, amb, tur)?.delta_y)
}

/// Local deficit at `(y, z)` in the source turbine's frame.
pub fn local_deficit(
    gamma: f64,
    a: f64,
    x: f64,
    y: f64,
    z: f64,
    amb: &AmbientParams,
    tur: &TurbineParams,
) -> Result<f64> {
    Ok(WakeEval::evaluate(gamma, a, x, amb, tur)?.local_deficit(y, z))
}

/// Derived wake quantities at one `(γ, a, x)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WakeEval {
    pub c_t: f64,
    pub x_c: f64,
    pub sigma_y: f64,
    pub sigma_z: f64,
    pub r_c: f64,
    pub delta_y: f64,
    pub zeta: f64,
}

impl WakeEval {
    /// Evaluates the far wake; fails with [`Error::NearWake`] if `x < x_c`.
    pub fn evaluate(gamma: f64, a: f64, x: f64, amb: &AmbientParams, tur: &TurbineParams) -> Result<Self> {
        Self::compute(gamma, a, x, amb, tur, true)
    }

    /// Same formulas without the far-wake check, continuing them into
    /// `x < x_c` wherever the radicands and logarithms stay defined.
    ///
    /// Used by surrogate fitting and by optimizer iterates that may
    /// temporarily violate the core-length constraint.
    pub fn evaluate_extended(gamma: f64, a: f64, x: f64, amb: &AmbientParams, tur: &TurbineParams) -> Result<Self> {
        Self::compute(gamma, a, x, amb, tur, false)
    }

    fn compute(
        gamma: f64,
        a: f64,
        x: f64,
        amb: &AmbientParams,
        tur: &TurbineParams,
        far_wake_only: bool,
    ) -> Result<Self> {
        let d = tur.diameter;
        let c_t = thrust_coefficient(gamma, a)?;
        let x_c = core_length_from_ct(gamma, c_t, amb, tur)?;
        if far_wake_only && x < x_c {
            return Err(Error::NearWake { x, x_c });
        }
        let cos_g = gamma.cos();
        let sigma_y = amb.k_y * (x - x_c) + d / SQRT_8 * cos_g;
        let sigma_z = amb.k_z * (x - x_c) + d / SQRT_8;
        if sigma_y <= 0.0 || sigma_z <= 0.0 {
            return Err(Error::domain(
                "wake widths",
                format!("non-positive width (sigma_y = {sigma_y}, sigma_z = {sigma_z})"),
            ));
        }
        let r_c = 1.0 - checked_sqrt("centre deficit", 1.0 - d * d * c_t * cos_g / (8.0 * sigma_y * sigma_z))?;
        let zeta = skew_from_ct(gamma, c_t)?;

        let delta_y = if zeta == 0.0 {
            0.0
        } else {
            let sqrt_ct = c_t.sqrt();
            if c_t >= 1.6 * 1.6 {
                return Err(Error::domain("deflection", format!("C_t = {c_t} >= 1.6^2")));
            }
            let spread = (8.0 * sigma_y * sigma_z / (d * d * cos_g)).sqrt();
            let num = (1.6 + sqrt_ct) * (1.6 * spread - sqrt_ct);
            let den = (1.6 - sqrt_ct) * (1.6 * spread + sqrt_ct);
            if num <= 0.0 || den <= 0.0 {
                return Err(Error::domain(
                    "deflection",
                    format!("non-positive logarithm argument {num}/{den}"),
                ));
            }
            let growth = (cos_g / (amb.k_y * amb.k_z * c_t)).sqrt();
            if !growth.is_finite() {
                return Err(Error::domain("deflection", "zero wake growth rate"));
            }
            let shape = 2.9 + 1.3 * (1.0 - c_t).sqrt() - c_t;
            zeta * x_c + d * zeta / 14.7 * growth * shape * (num / den).ln()
        };

        Ok(Self {
            c_t,
            x_c,
            sigma_y,
            sigma_z,
            r_c,
            delta_y,
            zeta,
        })
    }

    pub fn local_deficit(&self, y: f64, z: f64) -> f64 {
        let ey = (y - self.delta_y) / (SQRT_2 * self.sigma_y);
        let ez = z / (SQRT_2 * self.sigma_z);
        self.r_c * (-ey * ey).exp() * (-ez * ez).exp()
    }
}
