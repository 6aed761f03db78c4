//! Rotor-effective wind speed and turbine/farm power.

use std::collections::BTreeMap;
use std::f64::consts::{PI, SQRT_2};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transport::{op_for_downstream, ControlInput, OpState};
use crate::wake_model::{AmbientParams, TurbineParams, WakeEval, MAX_INDUCTION, MAX_YAW};

/// Spanwise distance beyond which a turbine is not considered waked.
pub const INFLUENCE_HALF_WIDTH_D: f64 = 2.0;
/// Minimum streamwise spacing of an influencing pair, in diameters.
pub const MIN_PAIR_SPACING_D: f64 = 5.0;

/// Error function used by the plant model.
pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}

/// Downstream turbine `downstream` as seen from `upstream`'s frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairGeometry {
    pub upstream: usize,
    pub downstream: usize,
    /// Streamwise offset (m).
    pub x: f64,
    /// Spanwise offset (m).
    pub y: f64,
}

/// Turbine/ambient parameters plus the pairwise layout geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct FarmModel {
    turbine: TurbineParams,
    ambient: AmbientParams,
    n_turbines: usize,
    pair_geometry: BTreeMap<(usize, usize), PairGeometry>,
    upstream_sets: Vec<Vec<usize>>,
    order: Vec<usize>,
}

impl FarmModel {
    /// Builds the model from absolute positions (m). `wind_direction_deg` is
    /// the direction the wind blows towards, counter-clockwise from +x.
    pub fn from_positions(
        turbine: TurbineParams,
        ambient: AmbientParams,
        positions: &[(f64, f64)],
        wind_direction_deg: f64,
    ) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::Config("layout has no turbines".into()));
        }
        let theta = wind_direction_deg.to_radians();
        let (s, c) = theta.sin_cos();
        let frame: Vec<(f64, f64)> = positions
            .iter()
            .map(|&(px, py)| (px * c + py * s, -px * s + py * c))
            .collect();
        let d = turbine.diameter;
        let mut pairs = Vec::new();
        for (i, &(xi, yi)) in frame.iter().enumerate() {
            for (j, &(xj, yj)) in frame.iter().enumerate() {
                let (x, y) = (xj - xi, yj - yi);
                if i != j && x > 0.0 && y.abs() <= INFLUENCE_HALF_WIDTH_D * d {
                    pairs.push(PairGeometry {
                        upstream: i,
                        downstream: j,
                        x,
                        y,
                    });
                }
            }
        }
        let mut order: Vec<usize> = (0..frame.len()).collect();
        order.sort_by(|&a, &b| frame[a].0.total_cmp(&frame[b].0).then(a.cmp(&b)));
        Self::build(turbine, ambient, frame.len(), pairs, Some(order))
    }

    /// Builds the model from explicit influencing pairs.
    pub fn from_pairs(
        turbine: TurbineParams,
        ambient: AmbientParams,
        n_turbines: usize,
        pairs: &[PairGeometry],
    ) -> Result<Self> {
        Self::build(turbine, ambient, n_turbines, pairs.to_vec(), None)
    }

    /// Three-turbine layout: two upstream rotors at ±0.75D, one 7D behind.
    pub fn case_study(turbine: TurbineParams, ambient: AmbientParams) -> Result<Self> {
        let d = turbine.diameter;
        Self::from_positions(turbine, ambient, &case_study_positions(d), 0.0)
    }

    fn build(
        turbine: TurbineParams,
        ambient: AmbientParams,
        n_turbines: usize,
        pairs: Vec<PairGeometry>,
        order: Option<Vec<usize>>,
    ) -> Result<Self> {
        turbine.validate()?;
        ambient.validate()?;
        if n_turbines == 0 {
            return Err(Error::Config("layout has no turbines".into()));
        }
        let min_x = MIN_PAIR_SPACING_D * turbine.diameter;
        let mut pair_geometry = BTreeMap::new();
        let mut upstream_sets = vec![Vec::new(); n_turbines];
        for p in pairs {
            if p.upstream >= n_turbines || p.downstream >= n_turbines || p.upstream == p.downstream {
                return Err(Error::Config(format!(
                    "pair ({}, {}) does not reference two distinct turbines",
                    p.upstream + 1,
                    p.downstream + 1
                )));
            }
            if p.x < min_x * (1.0 - 1e-12) {
                return Err(Error::Config(format!(
                    "pair ({}, {}) is {} m apart, closer than 5D",
                    p.upstream + 1,
                    p.downstream + 1,
                    p.x
                )));
            }
            if pair_geometry.insert((p.upstream, p.downstream), p).is_some() {
                return Err(Error::Config(format!(
                    "duplicate pair ({}, {})",
                    p.upstream + 1,
                    p.downstream + 1
                )));
            }
            upstream_sets[p.downstream].push(p.upstream);
        }
        for set in &mut upstream_sets {
            set.sort_unstable();
        }
        let order = match order {
            Some(o) => o,
            None => topological_order(n_turbines, &upstream_sets)?,
        };
        Ok(Self {
            turbine,
            ambient,
            n_turbines,
            pair_geometry,
            upstream_sets,
            order,
        })
    }

    pub fn turbine(&self) -> &TurbineParams {
        &self.turbine
    }

    pub fn ambient(&self) -> &AmbientParams {
        &self.ambient
    }

    pub fn n_turbines(&self) -> usize {
        self.n_turbines
    }

    /// Turbines that wake `j`.
    pub fn upstream(&self, j: usize) -> &[usize] {
        &self.upstream_sets[j]
    }

    pub fn pair(&self, upstream: usize, downstream: usize) -> Option<&PairGeometry> {
        self.pair_geometry.get(&(upstream, downstream))
    }

    /// Influencing pairs, ordered by `(upstream, downstream)`.
    pub fn pairs(&self) -> impl Iterator<Item = &PairGeometry> {
        self.pair_geometry.values()
    }

    pub fn n_pairs(&self) -> usize {
        self.pair_geometry.len()
    }

    /// Streamwise evaluation order.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// Same farm reflected across the wind axis (`y → −y`).
    pub fn mirrored(&self) -> Self {
        let mut out = self.clone();
        for p in out.pair_geometry.values_mut() {
            p.y = -p.y;
        }
        out
    }

    /// Same farm with the turbine indices permuted: new index of old `i` is `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.n_turbines {
            return Err(Error::Dimension("permutation length".into()));
        }
        let pairs: Vec<PairGeometry> = self
            .pairs()
            .map(|p| PairGeometry {
                upstream: perm[p.upstream],
                downstream: perm[p.downstream],
                ..*p
            })
            .collect();
        Self::from_pairs(self.turbine, self.ambient, self.n_turbines, &pairs)
    }
}

/// Positions of the three-turbine case-study layout (m).
pub fn case_study_positions(d: f64) -> Vec<(f64, f64)> {
    vec![(0.0, 0.75 * d), (0.0, -0.75 * d), (7.0 * d, 0.0)]
}

fn topological_order(n: usize, upstream_sets: &[Vec<usize>]) -> Result<Vec<usize>> {
    let mut indegree: Vec<usize> = upstream_sets.iter().map(Vec::len).collect();
    let mut done = vec![false; n];
    let mut order = Vec::with_capacity(n);
    while order.len() < n {
        let next = (0..n)
            .find(|&j| !done[j] && indegree[j] == 0)
            .ok_or_else(|| Error::Config("influence graph has a cycle".into()))?;
        done[next] = true;
        order.push(next);
        for (j, set) in upstream_sets.iter().enumerate() {
            if set.contains(&next) {
                indegree[j] -= 1;
            }
        }
    }
    Ok(order)
}

/// Rectangle-averaged deficit caused by wake `w` on a rotor at spanwise
/// offset `y_ij` with yaw `u_gamma_j`.
pub fn rotor_deficit_from_eval(w: &WakeEval, y_ij: f64, u_gamma_j: f64, tur: &TurbineParams) -> f64 {
    let d = tur.diameter;
    let cos_u = u_gamma_j.cos();
    let half = 0.5 * d * cos_u;
    let span = SQRT_2 * w.sigma_y;
    let lateral = erf((y_ij + half - w.delta_y) / span) - erf((y_ij - half - w.delta_y) / span);
    let vertical = erf(d / (2.0 * SQRT_2 * w.sigma_z));
    PI * w.r_c * w.sigma_y * w.sigma_z / (d * d * cos_u) * lateral * vertical
}

/// Rotor-effective deficit `R_ij` of turbine `j` caused by an observation
/// point carrying `(gamma, a)` at offset `(x_ij, y_ij)`.
pub fn rotor_effective_deficit(
    gamma: f64,
    a: f64,
    x_ij: f64,
    y_ij: f64,
    u_gamma_j: f64,
    amb: &AmbientParams,
    tur: &TurbineParams,
) -> Result<f64> {
    if !(u_gamma_j.abs() <= MAX_YAW + 1e-12) {
        return Err(Error::domain(
            "rotor deficit",
            format!("downstream yaw {u_gamma_j} outside [-pi/6, pi/6]"),
        ));
    }
    let w = WakeEval::evaluate(gamma, a, x_ij, amb, tur)?;
    Ok(rotor_deficit_from_eval(&w, y_ij, u_gamma_j, tur))
}

/// `V_j = V∞ · Π (1 − R_ij)`.
pub fn effective_wind_speed(deficits: &[f64], amb: &AmbientParams) -> Result<f64> {
    let mut v = amb.v_inf;
    for &r in deficits {
        if !(0.0..1.0).contains(&r) {
            return Err(Error::domain(
                "effective wind speed",
                format!("deficit {r} outside [0, 1)"),
            ));
        }
        v *= 1.0 - r;
    }
    Ok(v)
}

/// `C_p = 4κ·a·(1 − a)²`.
pub fn power_coefficient(u_a: f64, tur: &TurbineParams) -> Result<f64> {
    if !(u_a > 0.0 && u_a <= MAX_INDUCTION) {
        return Err(Error::domain(
            "power coefficient",
            format!("axial induction {u_a} outside (0, 0.4]"),
        ));
    }
    Ok(4.0 * tur.kappa * u_a * (1.0 - u_a).powi(2))
}

/// `η ρ π D² / 8`, the power prefactor.
pub fn power_prefactor(amb: &AmbientParams, tur: &TurbineParams) -> f64 {
    tur.efficiency * amb.rho * PI * tur.diameter * tur.diameter / 8.0
}

pub fn turbine_power(v_eff: f64, u_a: f64, u_gamma: f64, amb: &AmbientParams, tur: &TurbineParams) -> Result<f64> {
    if !(v_eff > 0.0) {
        return Err(Error::domain(
            "turbine power",
            format!("effective wind speed {v_eff} must be positive"),
        ));
    }
    let c_p = power_coefficient(u_a, tur)?;
    Ok(power_prefactor(amb, tur) * v_eff.powi(3) * c_p * u_gamma.cos().powf(tur.p_p))
}

/// Per-turbine powers, farm total and effective speeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerReport {
    pub per_turbine: Vec<f64>,
    pub farm_total: f64,
    pub effective_speeds: Vec<f64>,
}

/// Observation-point values `(γ, a)` reaching each influenced rotor, keyed
/// by `(upstream, downstream)`.
pub type WakeSources = BTreeMap<(usize, usize), (f64, f64)>;

pub fn farm_power(model: &FarmModel, inputs: &[ControlInput], sources: &WakeSources) -> Result<PowerReport> {
    let n = model.n_turbines();
    if inputs.len() != n {
        return Err(Error::Dimension(format!("{} inputs for {n} turbines", inputs.len())));
    }
    let amb = model.ambient();
    let tur = model.turbine();
    let mut per_turbine = vec![0.0; n];
    let mut speeds = vec![0.0; n];
    for &j in model.order() {
        let eval = || -> Result<(f64, f64)> {
            let u = &inputs[j];
            let mut deficits = Vec::with_capacity(model.upstream(j).len());
            for &i in model.upstream(j) {
                let pair = model.pair(i, j).expect("upstream set and geometry agree");
                let &(g, a) = sources.get(&(i, j)).ok_or_else(|| {
                    Error::Config(format!("no observation point given for pair ({}, {})", i + 1, j + 1))
                })?;
                deficits.push(rotor_effective_deficit(g, a, pair.x, pair.y, u.u_gamma, amb, tur)?);
            }
            let v = effective_wind_speed(&deficits, amb)?;
            Ok((v, turbine_power(v, u.u_a, u.u_gamma, amb, tur)?))
        };
        let (v, p) = eval().map_err(|e| e.at_turbine(j + 1))?;
        speeds[j] = v;
        per_turbine[j] = p;
    }
    let farm_total = per_turbine.iter().sum();
    Ok(PowerReport {
        per_turbine,
        farm_total,
        effective_speeds: speeds,
    })
}

/// Reads each pair's observation point from the upstream chain.
pub fn wake_sources(model: &FarmModel, states: &[OpState], t_s: f64) -> Result<WakeSources> {
    if states.len() != model.n_turbines() {
        return Err(Error::Dimension(format!(
            "{} observation-point chains for {} turbines",
            states.len(),
            model.n_turbines()
        )));
    }
    model
        .pairs()
        .map(|p| {
            Ok((
                (p.upstream, p.downstream),
                op_for_downstream(&states[p.upstream], p.x, model.ambient(), t_s)?,
            ))
        })
        .collect()
}
