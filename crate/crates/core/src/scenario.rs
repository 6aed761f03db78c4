//! Scenario files: farm, controller, reference and run settings in TOML.
//!
//! Every section is optional and falls back to the three-turbine case study.
//! Unknown keys are rejected. Yaw angles are radians unless the key carries
//! a `_deg` suffix.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::approximation::{build_pwa_erf, SurrogateSet};
use crate::closed_loop::{mpc_step, LoopConfig, Reference, ScenarioState};
use crate::error::{Error, Result};
use crate::optimizer::{
    assemble_miqcqp, ControllerModel, HorizonSettings, InputLimits, MiqcqpProblem, ModelKind, SolverSettings, Weights,
};
use crate::rotor_power::{case_study_positions, FarmModel, PairGeometry};
use crate::transport::ControlInput;
use crate::wake_model::{AmbientParams, TurbineParams};

/// Pair offsets given directly; turbines are numbered from 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairEntry {
    pub upstream: usize,
    pub downstream: usize,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LayoutSection {
    /// Absolute `[x, y]` positions (m).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub positions: Option<Vec<[f64; 2]>>,
    /// Direction the wind blows towards, measured from the x axis.
    pub wind_direction_deg: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_turbines: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pairs: Option<Vec<PairEntry>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerSection {
    pub model: ModelKind,
    pub horizon: usize,
    pub t_s: f64,
    pub q_p: f64,
    pub q_p2: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub yaw_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub yaw_max_deg: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub yaw_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub yaw_rate_deg: Option<f64>,
    pub a_min: f64,
    pub a_max: f64,
    pub pwa_segments: usize,
    pub pwa_domain: [f64; 2],
    /// Points per axis of the surrogate fitting grid.
    pub fit_grid: usize,
    pub solver: SolverSettings,
}

impl Default for ControllerSection {
    fn default() -> Self {
        let h = HorizonSettings::default();
        Self {
            model: ModelKind::Surrogate,
            horizon: h.horizon,
            t_s: h.t_s,
            q_p: h.weights.q_p,
            q_p2: h.weights.q_p2,
            yaw_max: None,
            yaw_max_deg: None,
            yaw_rate: None,
            yaw_rate_deg: None,
            a_min: h.limits.a_min,
            a_max: h.limits.a_max,
            pwa_segments: 16,
            pwa_domain: [-3.0, 3.0],
            fit_grid: 61,
            solver: SolverSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub duration_s: f64,
    pub seed: u64,
    pub output: PathBuf,
    /// Write measured solve times; zeros keep logs byte-identical across runs.
    pub record_solve_time: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial_yaw: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial_yaw_deg: Option<f64>,
    pub initial_a: f64,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            duration_s: 1800.0,
            seed: 0,
            output: PathBuf::from("closed_loop.csv"),
            record_solve_time: true,
            initial_yaw: None,
            initial_yaw_deg: None,
            initial_a: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioFile {
    pub ambient: AmbientParams,
    pub turbine: TurbineParams,
    pub layout: LayoutSection,
    pub controller: ControllerSection,
    pub reference: Reference,
    pub run: RunSection,
    /// Pre-fitted coefficients; fitted on load of the controller when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub surrogates: Option<SurrogateSet>,
}

impl Default for ScenarioFile {
    fn default() -> Self {
        Self {
            ambient: AmbientParams::default(),
            turbine: TurbineParams::default(),
            layout: LayoutSection::default(),
            controller: ControllerSection::default(),
            reference: Reference::case_study(),
            run: RunSection::default(),
            surrogates: None,
        }
    }
}

fn angle(rad: Option<f64>, deg: Option<f64>, key: &str, default: f64) -> Result<f64> {
    match (rad, deg) {
        (Some(_), Some(_)) => Err(Error::invalid(key, format!("give either {key} or {key}_deg, not both"))),
        (Some(r), None) => Ok(r),
        (None, Some(d)) => Ok(d.to_radians()),
        (None, None) => Ok(default),
    }
}

impl ScenarioFile {
    pub fn from_toml(text: &str) -> Result<Self> {
        let s: ScenarioFile = toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map_or(0, |sp| text[..sp.start.min(text.len())].matches('\n').count() + 1);
            Error::Parse {
                line,
                message: e.message().to_string(),
            }
        })?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn limits(&self) -> Result<InputLimits> {
        let d = InputLimits::default();
        let c = &self.controller;
        Ok(InputLimits {
            yaw_max: angle(c.yaw_max, c.yaw_max_deg, "controller.yaw_max", d.yaw_max)?,
            yaw_rate: angle(c.yaw_rate, c.yaw_rate_deg, "controller.yaw_rate", d.yaw_rate)?,
            a_min: c.a_min,
            a_max: c.a_max,
        })
    }

    pub fn horizon_settings(&self) -> Result<HorizonSettings> {
        let c = &self.controller;
        Ok(HorizonSettings {
            horizon: c.horizon,
            t_s: c.t_s,
            weights: Weights {
                q_p: c.q_p,
                q_p2: c.q_p2,
            },
            limits: self.limits()?,
        })
    }

    pub fn solver_settings(&self) -> SolverSettings {
        SolverSettings {
            seed: self.run.seed,
            ..self.controller.solver
        }
    }

    pub fn initial_input(&self) -> Result<ControlInput> {
        let g = angle(self.run.initial_yaw, self.run.initial_yaw_deg, "run.initial_yaw", 0.0)?;
        Ok(ControlInput::new(g, self.run.initial_a))
    }

    pub fn farm(&self) -> Result<FarmModel> {
        let l = &self.layout;
        match (&l.positions, &l.pairs) {
            (Some(_), Some(_)) => Err(Error::invalid("layout", "give either positions or pairs, not both")),
            (Some(pos), None) => {
                let pos: Vec<(f64, f64)> = pos.iter().map(|p| (p[0], p[1])).collect();
                FarmModel::from_positions(self.turbine, self.ambient, &pos, l.wind_direction_deg)
            }
            (None, Some(pairs)) => {
                let n = l
                    .n_turbines
                    .ok_or_else(|| Error::invalid("layout.n_turbines", "required with layout.pairs"))?;
                let mut geo = Vec::with_capacity(pairs.len());
                for (k, p) in pairs.iter().enumerate() {
                    if p.upstream == 0 || p.downstream == 0 || p.upstream > n || p.downstream > n {
                        return Err(Error::invalid(
                            format!("layout.pairs[{k}]"),
                            format!("turbine numbers must lie in 1..={n}"),
                        ));
                    }
                    geo.push(PairGeometry {
                        upstream: p.upstream - 1,
                        downstream: p.downstream - 1,
                        x: p.x,
                        y: p.y,
                    });
                }
                FarmModel::from_pairs(self.turbine, self.ambient, n, &geo)
            }
            (None, None) => FarmModel::from_positions(
                self.turbine,
                self.ambient,
                &case_study_positions(self.turbine.diameter),
                l.wind_direction_deg,
            ),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.ambient.validate()?;
        self.turbine.validate()?;
        let c = &self.controller;
        if c.horizon == 0 {
            return Err(Error::invalid("controller.horizon", "must be at least 1"));
        }
        if !(c.t_s > 0.0 && c.t_s.is_finite()) {
            return Err(Error::invalid("controller.t_s", "must be positive"));
        }
        if !(c.q_p >= 0.0 && c.q_p2 >= 0.0) {
            return Err(Error::invalid("controller.q_p", "weights must be non-negative"));
        }
        self.limits()?.validate()?;
        if c.pwa_segments == 0 {
            return Err(Error::invalid("controller.pwa_segments", "must be at least 1"));
        }
        if !(c.pwa_domain[0] < c.pwa_domain[1]) {
            return Err(Error::invalid(
                "controller.pwa_domain",
                "lower end must be below upper end",
            ));
        }
        if c.fit_grid < 21 {
            return Err(Error::invalid(
                "controller.fit_grid",
                "needs at least 21 points per axis",
            ));
        }
        c.solver.validate()?;
        self.reference.validate()?;
        if !(self.run.duration_s >= 0.0 && self.run.duration_s.is_finite()) {
            return Err(Error::invalid("run.duration_s", "must be non-negative"));
        }
        let u0 = self.initial_input()?;
        u0.validate()
            .map_err(|_| Error::invalid("run.initial_a", "initial inputs outside the operating box"))?;
        let model = self.farm()?;
        if let Some(s) = &self.surrogates {
            s.check_covers(&model)?;
            for p in &s.pairs {
                p.validate()?;
            }
        }
        Ok(())
    }

    /// Controller model, fitting surrogates unless the file carries them.
    pub fn controller_model(&self, model: &FarmModel) -> Result<ControllerModel> {
        let c = &self.controller;
        match c.model {
            ModelKind::Exact => Ok(ControllerModel::Exact),
            ModelKind::Surrogate => {
                let surrogates = match &self.surrogates {
                    Some(s) => s.clone(),
                    None => SurrogateSet::fit(model, (c.fit_grid, c.fit_grid))?,
                };
                let pwa = build_pwa_erf(c.pwa_segments, (c.pwa_domain[0], c.pwa_domain[1]))?;
                Ok(ControllerModel::Surrogate { surrogates, pwa })
            }
        }
    }

    pub fn loop_config(&self) -> Result<LoopConfig> {
        let model = self.farm()?;
        let controller = self.controller_model(&model)?;
        Ok(LoopConfig {
            model,
            controller,
            horizon: self.horizon_settings()?,
            solver: self.solver_settings(),
            reference: self.reference.clone(),
            duration_s: self.run.duration_s,
            initial: self.initial_input()?,
            record_solve_time: self.run.record_solve_time,
        })
    }
    /// Runs the loop for `step` samples, then builds the reformulated
    /// problem at the sample reached. Returns the loop state with it.
    pub fn miqcqp_at(&self, step: usize) -> Result<(MiqcqpProblem, ScenarioState)> {
        let cfg = self.loop_config()?;
        let mut state = ScenarioState::new(&cfg.model, cfg.horizon.t_s, cfg.initial)?;
        for _ in 0..step {
            mpc_step(&mut state, &cfg).map_err(|e| e.at_step(state.k))?;
        }
        let (surrogates, pwa) = match &cfg.controller {
            ControllerModel::Surrogate { surrogates, pwa } => (surrogates.clone(), pwa.clone()),
            ControllerModel::Exact => {
                let g = self.controller.fit_grid;
                let c = &self.controller;
                (
                    SurrogateSet::fit(&cfg.model, (g, g))?,
                    build_pwa_erf(c.pwa_segments, (c.pwa_domain[0], c.pwa_domain[1]))?,
                )
            }
        };
        let t_min = step as f64 * cfg.horizon.t_s / 60.0;
        let p_ref = cfg
            .reference
            .at(t_min)
            .ok_or_else(|| Error::Config(format!("no reference defined at {t_min} min")))?;
        let prev_yaw: Vec<f64> = state.last_inputs().iter().map(|u| u.u_gamma).collect();
        let p = assemble_miqcqp(
            &cfg.model,
            &surrogates,
            &pwa,
            &state.states,
            &prev_yaw,
            p_ref,
            &cfg.horizon,
        )?;
        Ok((p, state))
    }
}

pub fn load_scenario(path: &Path) -> Result<ScenarioFile> {
    let text = std::fs::read_to_string(path)?;
    ScenarioFile::from_toml(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_case_study() {
        let s = ScenarioFile::from_toml("").unwrap();
        assert_eq!(s, ScenarioFile::default());
        assert_eq!(s.controller.t_s, 13.0);
        assert_eq!(s.controller.horizon, 8);
        assert_eq!(s.ambient.v_inf, 10.0);
        assert_eq!(s.ambient.turbulence_i, 0.06);
        assert_eq!(s.ambient.k_y, 0.0267);
        assert_eq!(s.ambient.k_z, 0.0267);
        assert_eq!(s.turbine.diameter, 130.0);
        assert_eq!(s.turbine.efficiency, 0.9367);
        assert_eq!(s.turbine.kappa, 0.8174);
        assert_eq!(s.turbine.p_rated, 3.35e6);
        assert_eq!(s.controller.q_p, 1e-8);
        assert_eq!(s.controller.q_p2, 1e-12);
        assert_eq!(s.limits().unwrap().yaw_rate, 0.0572);
        let m = s.farm().unwrap();
        assert_eq!(m.n_turbines(), 3);
        assert_eq!(m.n_pairs(), 2);
        let p = m.pair(0, 2).unwrap();
        assert_eq!((p.x, p.y), (910.0, -97.5));
    }

    #[test]
    fn negative_diameter_names_the_key() {
        let err = ScenarioFile::from_toml("[turbine]\ndiameter = -130.0\n").unwrap_err();
        assert!(err.to_string().contains("turbine.diameter"), "{err}");
    }

    #[test]
    fn unsorted_reference_rejected() {
        let text = "[reference]\nsteps = [{ start_min = 0.0, power = 6e6 }, { start_min = 10.0, power = 5e6 }, { start_min = 5.0, power = 4e6 }]\n";
        let err = ScenarioFile::from_toml(text).unwrap_err();
        assert!(err.to_string().contains("reference"), "{err}");
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ScenarioFile::from_toml("[turbine]\ndiameterr = 130.0\n").is_err());
        assert!(ScenarioFile::from_toml("[plant]\n").is_err());
        assert!(ScenarioFile::from_toml("[controller.solver]\nseed = 3\n").is_err());
    }

    #[test]
    fn degree_keys() {
        let s = ScenarioFile::from_toml("[controller]\nyaw_max_deg = 20.0\n[run]\ninitial_yaw_deg = -5.0\n").unwrap();
        assert!((s.limits().unwrap().yaw_max - 20f64.to_radians()).abs() < 1e-15);
        assert!((s.initial_input().unwrap().u_gamma + 5f64.to_radians()).abs() < 1e-15);
        assert!(ScenarioFile::from_toml("[controller]\nyaw_max = 0.3\nyaw_max_deg = 20.0\n").is_err());
    }

    #[test]
    fn round_trip() {
        let text = "[controller]\nmodel = \"exact\"\nyaw_rate_deg = 2.5\n[controller.solver]\nn_starts = 4\n[run]\nseed = 7\nrecord_solve_time = false\n";
        let s = ScenarioFile::from_toml(text).unwrap();
        let again = ScenarioFile::from_toml(&s.to_toml().unwrap()).unwrap();
        assert_eq!(s, again);
        assert_eq!(again.solver_settings().seed, 7);
        assert_eq!(again.solver_settings().n_starts, 4);
    }

    #[test]
    fn pair_layout() {
        let text = "[layout]\nn_turbines = 2\npairs = [{ upstream = 1, downstream = 2, x = 910.0, y = 0.0 }]\n";
        let s = ScenarioFile::from_toml(text).unwrap();
        assert_eq!(s.farm().unwrap().upstream(1), &[0]);
        let bad = "[layout]\nn_turbines = 2\npairs = [{ upstream = 0, downstream = 2, x = 910.0, y = 0.0 }]\n";
        assert!(ScenarioFile::from_toml(bad).is_err());
    }

    #[test]
    fn parse_error_has_line() {
        let err = ScenarioFile::from_toml("[turbine]\n\ndiameter = \n").unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }
}
