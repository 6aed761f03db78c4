//! Controller-side surrogates: Taylor terms, polynomial wake fits and a
//! piecewise-affine erf.

use std::collections::BTreeMap;
use std::f64::consts::SQRT_2;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rotor_power::{erf, power_coefficient, power_prefactor, FarmModel};
use crate::transport::{MAX_INDUCTION_CMD, MIN_INDUCTION_CMD};
use crate::wake_model::{AmbientParams, TurbineParams, WakeEval, MAX_YAW};

/// Largest accepted scaled validation error of a fitted surrogate.
pub const MAX_FIT_ERROR: f64 = 0.17;

const SQRT_8: f64 = 2.0 * SQRT_2;

pub fn taylor_cos(gamma: f64) -> f64 {
    1.0 - 0.5 * gamma * gamma
}

pub fn taylor_sec(gamma: f64) -> f64 {
    1.0 + 0.5 * gamma * gamma
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateKind {
    CoreLength,
    CentreDeficit,
    Deflection,
}

impl SurrogateKind {
    /// Monomial exponents `(p, q)` of `γ^p a^q`.
    pub fn basis(self) -> &'static [(u32, u32)] {
        match self {
            SurrogateKind::CoreLength => &[(2, 0), (0, 2), (0, 1), (0, 0)],
            SurrogateKind::CentreDeficit => &[(0, 3), (2, 1), (2, 0), (0, 2), (0, 1), (0, 0)],
            SurrogateKind::Deflection => &[(3, 0), (1, 2), (1, 1), (1, 0)],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SurrogateKind::CoreLength => "core_length",
            SurrogateKind::CentreDeficit => "centre_deficit",
            SurrogateKind::Deflection => "deflection",
        }
    }

    fn target(self, w: &WakeEval) -> f64 {
        match self {
            SurrogateKind::CoreLength => w.x_c,
            SurrogateKind::CentreDeficit => w.r_c,
            SurrogateKind::Deflection => w.delta_y,
        }
    }
}

pub fn coefficient_name(p: u32, q: u32) -> String {
    format!("K{p}{q}")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitDomain {
    pub gamma: (f64, f64),
    pub a: (f64, f64),
    /// Streamwise distance the fit was made at (m).
    pub x: f64,
}

impl FitDomain {
    pub fn standard(x: f64) -> Self {
        Self {
            gamma: (-MAX_YAW, MAX_YAW),
            a: (MIN_INDUCTION_CMD, MAX_INDUCTION_CMD),
            x,
        }
    }

    pub fn contains(&self, gamma: f64, a: f64) -> bool {
        const TOL: f64 = 1e-9;
        gamma >= self.gamma.0 - TOL && gamma <= self.gamma.1 + TOL && a >= self.a.0 - TOL && a <= self.a.1 + TOL
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolySurrogate {
    pub kind: SurrogateKind,
    pub coefficients: BTreeMap<String, f64>,
    pub fit_domain: FitDomain,
    pub max_rel_error: f64,
}

impl PolySurrogate {
    pub fn validate(&self) -> Result<()> {
        let expected: Vec<String> = self.kind.basis().iter().map(|&(p, q)| coefficient_name(p, q)).collect();
        let mut got: Vec<&String> = self.coefficients.keys().collect();
        let mut want: Vec<&String> = expected.iter().collect();
        got.sort();
        want.sort();
        if got != want {
            return Err(Error::invalid(
                format!("surrogate.{}", self.kind.name()),
                format!("coefficients {got:?} do not match basis {want:?}"),
            ));
        }
        if self.coefficients.values().any(|c| !c.is_finite()) {
            return Err(Error::invalid(
                format!("surrogate.{}", self.kind.name()),
                "non-finite coefficient",
            ));
        }
        if !(self.max_rel_error <= MAX_FIT_ERROR) {
            return Err(Error::FitQuality {
                kind: self.kind.name().into(),
                error: self.max_rel_error,
                limit: MAX_FIT_ERROR,
            });
        }
        Ok(())
    }

    /// Coefficient of `γ^p a^q`.
    pub fn coefficient(&self, p: u32, q: u32) -> f64 {
        self.coefficients.get(&coefficient_name(p, q)).copied().unwrap_or(0.0)
    }

    /// Polynomial value without the domain check.
    pub fn value(&self, gamma: f64, a: f64) -> f64 {
        self.terms().value(gamma, a)
    }

    /// Partial derivatives `(∂/∂γ, ∂/∂a)`.
    pub fn gradient(&self, gamma: f64, a: f64) -> (f64, f64) {
        self.terms().gradient(gamma, a)
    }

    /// Coefficients unpacked for repeated evaluation.
    pub fn terms(&self) -> PolyTerms {
        PolyTerms(
            self.kind
                .basis()
                .iter()
                .map(|&(p, q)| (p as i32, q as i32, self.coefficient(p, q)))
                .collect(),
        )
    }
}

/// `Σ K·γ^p·a^q` as a flat term list.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyTerms(Vec<(i32, i32, f64)>);

impl PolyTerms {
    pub fn value(&self, gamma: f64, a: f64) -> f64 {
        self.0.iter().map(|&(p, q, k)| k * gamma.powi(p) * a.powi(q)).sum()
    }

    pub fn gradient(&self, gamma: f64, a: f64) -> (f64, f64) {
        let mut dg = 0.0;
        let mut da = 0.0;
        for &(p, q, k) in &self.0 {
            if p > 0 {
                dg += k * p as f64 * gamma.powi(p - 1) * a.powi(q);
            }
            if q > 0 {
                da += k * q as f64 * gamma.powi(p) * a.powi(q - 1);
            }
        }
        (dg, da)
    }
}

/// Evaluates `s`, logging a warning when `(gamma, a)` leaves the fit domain.
pub fn eval_surrogate(s: &PolySurrogate, gamma: f64, a: f64) -> f64 {
    if !s.fit_domain.contains(gamma, a) {
        log::warn!(
            "{} surrogate extrapolated at gamma = {gamma}, a = {a} (x = {} m)",
            s.kind.name(),
            s.fit_domain.x
        );
    }
    s.value(gamma, a)
}

fn linspace(lo: f64, hi: f64, n: usize) -> impl Iterator<Item = f64> {
    (0..n).map(move |k| {
        if k + 1 == n {
            hi
        } else {
            lo + (hi - lo) * k as f64 / (n - 1) as f64
        }
    })
}

fn sample_grid(
    kind: SurrogateKind,
    dom: &FitDomain,
    n_gamma: usize,
    n_a: usize,
    amb: &AmbientParams,
    tur: &TurbineParams,
) -> Result<Vec<(f64, f64, f64)>> {
    let mut out = Vec::with_capacity(n_gamma * n_a);
    for g in linspace(dom.gamma.0, dom.gamma.1, n_gamma) {
        for a in linspace(dom.a.0, dom.a.1, n_a) {
            let w = WakeEval::evaluate_extended(g, a, dom.x, amb, tur)?;
            out.push((g, a, kind.target(&w)));
        }
    }
    Ok(out)
}

/// Least-squares fit of one wake quantity at streamwise distance `x_fixed`
/// on an `n_gamma × n_a` grid, validated on a grid twice as dense.
pub fn fit_surrogate(
    kind: SurrogateKind,
    x_fixed: f64,
    amb: &AmbientParams,
    tur: &TurbineParams,
    grid: (usize, usize),
) -> Result<PolySurrogate> {
    let d = tur.diameter;
    if !(x_fixed >= 5.0 * d * (1.0 - 1e-12) && x_fixed <= 15.0 * d * (1.0 + 1e-12)) {
        return Err(Error::invalid("x_fixed", format!("{x_fixed} m outside [5D, 15D]")));
    }
    if grid.0 < 21 || grid.1 < 21 {
        return Err(Error::invalid(
            "grid",
            format!("{}x{} is coarser than 21x21", grid.0, grid.1),
        ));
    }
    let dom = FitDomain::standard(x_fixed);
    let basis = kind.basis();
    let samples = sample_grid(kind, &dom, grid.0, grid.1, amb, tur)?;

    // Columns are scaled to unit max so the normal equations stay well conditioned.
    let raw = DMatrix::from_fn(samples.len(), basis.len(), |r, c| {
        let (g, a, _) = samples[r];
        g.powi(basis[c].0 as i32) * a.powi(basis[c].1 as i32)
    });
    let scale: Vec<f64> = (0..basis.len())
        .map(|c| raw.column(c).amax().max(f64::MIN_POSITIVE))
        .collect();
    let m = DMatrix::from_fn(raw.nrows(), raw.ncols(), |r, c| raw[(r, c)] / scale[c]);
    let y = DVector::from_iterator(samples.len(), samples.iter().map(|s| s.2));
    let normal = m.transpose() * &m;
    let rhs = m.transpose() * y;
    let sol = normal
        .cholesky()
        .ok_or_else(|| Error::Config(format!("{} fit: singular normal equations", kind.name())))?
        .solve(&rhs);

    let coefficients = basis
        .iter()
        .enumerate()
        .map(|(c, &(p, q))| (coefficient_name(p, q), sol[c] / scale[c]))
        .collect();
    let mut s = PolySurrogate {
        kind,
        coefficients,
        fit_domain: dom,
        max_rel_error: 0.0,
    };

    let check = sample_grid(kind, &dom, 2 * grid.0 - 1, 2 * grid.1 - 1, amb, tur)?;
    let peak = check.iter().map(|c| c.2.abs()).fold(0.0, f64::max);
    let worst = check
        .iter()
        .map(|&(g, a, v)| (s.value(g, a) - v).abs())
        .fold(0.0, f64::max);
    s.max_rel_error = if peak > 0.0 { worst / peak } else { worst };
    if s.max_rel_error > MAX_FIT_ERROR {
        return Err(Error::FitQuality {
            kind: kind.name().into(),
            error: s.max_rel_error,
            limit: MAX_FIT_ERROR,
        });
    }
    Ok(s)
}

/// The three surrogates of one influencing pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairSurrogates {
    /// 1-based turbine ids.
    pub upstream: usize,
    pub downstream: usize,
    pub x: f64,
    pub core_length: PolySurrogate,
    pub centre_deficit: PolySurrogate,
    pub deflection: PolySurrogate,
}

impl PairSurrogates {
    pub fn fit(
        upstream: usize,
        downstream: usize,
        x: f64,
        amb: &AmbientParams,
        tur: &TurbineParams,
        grid: (usize, usize),
    ) -> Result<Self> {
        Ok(Self {
            upstream: upstream + 1,
            downstream: downstream + 1,
            x,
            core_length: fit_surrogate(SurrogateKind::CoreLength, x, amb, tur, grid)?,
            centre_deficit: fit_surrogate(SurrogateKind::CentreDeficit, x, amb, tur, grid)?,
            deflection: fit_surrogate(SurrogateKind::Deflection, x, amb, tur, grid)?,
        })
    }

    pub fn compile(&self) -> CompiledPair {
        CompiledPair {
            x: self.x,
            core_length: self.core_length.terms(),
            centre_deficit: self.centre_deficit.terms(),
            deflection: self.deflection.terms(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (s, kind) in [
            (&self.core_length, SurrogateKind::CoreLength),
            (&self.centre_deficit, SurrogateKind::CentreDeficit),
            (&self.deflection, SurrogateKind::Deflection),
        ] {
            if s.kind != kind {
                return Err(Error::invalid(
                    format!("surrogates[{},{}]", self.upstream, self.downstream),
                    format!("expected {} surrogate, found {}", kind.name(), s.kind.name()),
                ));
            }
            s.validate()?;
        }
        Ok(())
    }
}

/// Pair surrogates ready for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct CompiledPair {
    pub x: f64,
    pub core_length: PolyTerms,
    pub centre_deficit: PolyTerms,
    pub deflection: PolyTerms,
}

/// Surrogates for every influencing pair of a farm.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurrogateSet {
    pub pairs: Vec<PairSurrogates>,
}

impl SurrogateSet {
    pub fn fit(model: &FarmModel, grid: (usize, usize)) -> Result<Self> {
        let pairs = model
            .pairs()
            .map(|p| PairSurrogates::fit(p.upstream, p.downstream, p.x, model.ambient(), model.turbine(), grid))
            .collect::<Result<_>>()?;
        Ok(Self { pairs })
    }

    /// Looks up a pair by 0-based indices.
    pub fn get(&self, upstream: usize, downstream: usize) -> Result<&PairSurrogates> {
        self.pairs
            .iter()
            .find(|p| p.upstream == upstream + 1 && p.downstream == downstream + 1)
            .ok_or(Error::MissingSurrogate {
                upstream: upstream + 1,
                downstream: downstream + 1,
            })
    }

    /// Checks that every pair of `model` is covered at the right distance.
    pub fn check_covers(&self, model: &FarmModel) -> Result<()> {
        for p in model.pairs() {
            let s = self.get(p.upstream, p.downstream)?;
            if (s.x - p.x).abs() > 1e-6 * p.x {
                return Err(Error::Config(format!(
                    "surrogates for pair ({}, {}) were fitted at x = {} m, layout has {} m",
                    s.upstream, s.downstream, s.x, p.x
                )));
            }
            s.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PwaFunction {
    pub breakpoints: Vec<f64>,
    pub values: Vec<f64>,
    pub clamp: (f64, f64),
    pub max_abs_error: f64,
}

/// One affine piece `slope·x + intercept` on `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PwaSegment {
    pub lo: f64,
    pub hi: f64,
    pub slope: f64,
    pub intercept: f64,
}

impl PwaFunction {
    pub fn domain(&self) -> (f64, f64) {
        (
            self.breakpoints[0],
            *self.breakpoints.last().expect("non-empty breakpoints"),
        )
    }

    pub fn n_segments(&self) -> usize {
        self.breakpoints.len() - 1
    }

    pub fn segments(&self) -> Vec<PwaSegment> {
        self.breakpoints
            .windows(2)
            .zip(self.values.windows(2))
            .map(|(b, v)| {
                let slope = (v[1] - v[0]) / (b[1] - b[0]);
                PwaSegment {
                    lo: b[0],
                    hi: b[1],
                    slope,
                    intercept: v[0] - slope * b[0],
                }
            })
            .collect()
    }

    pub fn eval(&self, x: f64) -> f64 {
        let (lo, hi) = self.domain();
        if x <= lo {
            return self.clamp.0;
        }
        if x >= hi {
            return self.clamp.1;
        }
        let k = self.breakpoints.partition_point(|&b| b <= x) - 1;
        let (b0, b1) = (self.breakpoints[k], self.breakpoints[k + 1]);
        let t = (x - b0) / (b1 - b0);
        self.values[k] + t * (self.values[k + 1] - self.values[k])
    }

    pub fn validate(&self) -> Result<()> {
        if self.breakpoints.len() < 2 || self.breakpoints.len() != self.values.len() {
            return Err(Error::invalid(
                "pwa",
                "needs matching breakpoints and values, at least two",
            ));
        }
        if self.breakpoints.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid("pwa.breakpoints", "must be strictly increasing"));
        }
        if self.values.iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::invalid("pwa.values", "must lie in [-1, 1]"));
        }
        Ok(())
    }
}

/// Linear interpolation of erf on `n_segments` equal pieces of `domain`.
pub fn build_pwa_erf(n_segments: usize, domain: (f64, f64)) -> Result<PwaFunction> {
    if n_segments < 4 {
        return Err(Error::invalid("pwa_segments", format!("{n_segments} < 4")));
    }
    let (lo, hi) = domain;
    if !(lo < 0.0 && hi > 0.0) {
        return Err(Error::invalid(
            "pwa_domain",
            format!("[{lo}, {hi}] must contain 0 in its interior"),
        ));
    }
    let breakpoints: Vec<f64> = linspace(lo, hi, n_segments + 1).collect();
    let values: Vec<f64> = breakpoints.iter().map(|&b| erf(b)).collect();
    let mut f = PwaFunction {
        breakpoints,
        values,
        clamp: (erf(lo), erf(hi)),
        max_abs_error: 0.0,
    };
    let span = hi - lo;
    let n_scan = 200 * n_segments;
    f.max_abs_error = (0..=n_scan)
        .map(|k| lo - 0.5 * span + 2.0 * span * k as f64 / n_scan as f64)
        .map(|x| (f.eval(x) - erf(x)).abs())
        .fold(0.0, f64::max);
    Ok(f)
}

/// Wake quantities as the controller model sees them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurrogateWake {
    pub x_c: f64,
    pub r_c: f64,
    pub delta_y: f64,
    pub sigma_y: f64,
    pub sigma_z: f64,
}

pub fn surrogate_wake(s: &CompiledPair, gamma: f64, a: f64, amb: &AmbientParams, tur: &TurbineParams) -> SurrogateWake {
    let d = tur.diameter;
    let x_c = s.core_length.value(gamma, a);
    let r_c = s.centre_deficit.value(gamma, a);
    let delta_y = s.deflection.value(gamma, a);
    SurrogateWake {
        x_c,
        r_c,
        delta_y,
        sigma_y: amb.k_y * (s.x - x_c) + d * taylor_cos(gamma) / SQRT_8,
        sigma_z: amb.k_z * (s.x - x_c) + d / SQRT_8,
    }
}

/// Rotor deficit of the reformulated model: polynomial wake quantities,
/// Taylor cos/sec and the PWA erf.
#[allow(clippy::too_many_arguments)]
pub fn surrogate_rotor_deficit(
    s: &CompiledPair,
    pwa: &PwaFunction,
    gamma: f64,
    a: f64,
    y_ij: f64,
    u_gamma_j: f64,
    amb: &AmbientParams,
    tur: &TurbineParams,
) -> f64 {
    let d = tur.diameter;
    let w = surrogate_wake(s, gamma, a, amb, tur);
    let xi1 = taylor_cos(u_gamma_j);
    let e11 = pwa.eval((y_ij + 0.5 * d * xi1 - w.delta_y) / (SQRT_2 * w.sigma_y));
    let e12 = pwa.eval((y_ij - 0.5 * d * xi1 - w.delta_y) / (SQRT_2 * w.sigma_y));
    let e13 = pwa.eval(d / (SQRT_8 * w.sigma_z));
    let xi16 = w.r_c * w.sigma_y * w.sigma_z * std::f64::consts::PI * (2.0 - xi1) / (d * d);
    xi16 * e13 * (e11 - e12)
}

/// Turbine power with the yaw loss replaced by its Taylor term.
pub fn surrogate_turbine_power(
    v_eff: f64,
    u_a: f64,
    u_gamma: f64,
    amb: &AmbientParams,
    tur: &TurbineParams,
) -> Result<f64> {
    let c_p = power_coefficient(u_a, tur)?;
    Ok(power_prefactor(amb, tur) * v_eff.powi(3) * c_p * taylor_cos(u_gamma).powf(tur.p_p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rotor_power::rotor_effective_deficit;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn params() -> (AmbientParams, TurbineParams) {
        (AmbientParams::default(), TurbineParams::default())
    }

    #[test]
    fn taylor_terms() {
        assert_eq!(taylor_cos(0.0), 1.0);
        assert_eq!(taylor_sec(0.0), 1.0);
        let worst = (0..=10472)
            .map(|k| -MAX_YAW + 2.0 * MAX_YAW * k as f64 / 10472.0)
            .map(|g| (g.cos() - taylor_cos(g)).abs())
            .fold(0.0, f64::max);
        assert!((worst - 0.00310).abs() < 5e-6, "{worst}");
        for g in [-0.5, -0.1, 0.2, MAX_YAW] {
            let g: f64 = g;
            assert_relative_eq!(taylor_cos(g) * taylor_sec(g), 1.0 - g.powi(4) / 4.0, epsilon = 1e-15);
            assert!(taylor_cos(g) * taylor_sec(g) >= 0.981);
        }
    }

    #[test]
    fn fits_meet_error_bound_at_pair_distances() {
        let (amb, tur) = params();
        for xd in [5.0, 7.0, 10.0, 15.0] {
            for kind in [
                SurrogateKind::CoreLength,
                SurrogateKind::CentreDeficit,
                SurrogateKind::Deflection,
            ] {
                let s = fit_surrogate(kind, xd * tur.diameter, &amb, &tur, (61, 61)).unwrap();
                assert!(
                    s.max_rel_error <= MAX_FIT_ERROR,
                    "{kind:?} at {xd}D: {}",
                    s.max_rel_error
                );
                s.validate().unwrap();
            }
        }
    }

    #[test]
    fn basis_sets_and_names() {
        let (amb, tur) = params();
        let names = |k| -> Vec<String> {
            fit_surrogate(k, 910.0, &amb, &tur, (21, 21))
                .unwrap()
                .coefficients
                .into_keys()
                .collect()
        };
        assert_eq!(names(SurrogateKind::CoreLength), ["K00", "K01", "K02", "K20"]);
        assert_eq!(
            names(SurrogateKind::CentreDeficit),
            ["K00", "K01", "K02", "K03", "K20", "K21"]
        );
        assert_eq!(names(SurrogateKind::Deflection), ["K10", "K11", "K12", "K30"]);
    }

    #[test]
    fn refit_is_identical() {
        let (amb, tur) = params();
        let a = fit_surrogate(SurrogateKind::CentreDeficit, 910.0, &amb, &tur, (31, 31)).unwrap();
        let b = fit_surrogate(SurrogateKind::CentreDeficit, 910.0, &amb, &tur, (31, 31)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn deflection_surrogate_is_odd() {
        let (amb, tur) = params();
        let s = fit_surrogate(SurrogateKind::Deflection, 910.0, &amb, &tur, (61, 61)).unwrap();
        assert_eq!(eval_surrogate(&s, 0.0, 0.2), 0.0);
        assert_eq!(eval_surrogate(&s, -0.3, 0.2), -eval_surrogate(&s, 0.3, 0.2));
    }

    #[test]
    fn node_values_close_to_exact() {
        let (amb, tur) = params();
        let x = 910.0;
        let s = PairSurrogates::fit(0, 2, x, &amb, &tur, (61, 61)).unwrap();
        let (g, a) = (0.2617993877991494, 0.24);
        let w = WakeEval::evaluate(g, a, x, &amb, &tur).unwrap();
        let scale_xc = 8.43 * tur.diameter;
        assert!((s.core_length.value(g, a) - w.x_c).abs() <= s.core_length.max_rel_error * scale_xc);
        assert!((s.deflection.value(g, a) - w.delta_y).abs() <= 0.17 * 0.6 * tur.diameter);
    }

    #[test]
    fn invalid_fit_requests() {
        let (amb, tur) = params();
        assert!(fit_surrogate(SurrogateKind::CoreLength, 100.0, &amb, &tur, (61, 61)).is_err());
        assert!(fit_surrogate(SurrogateKind::CoreLength, 910.0, &amb, &tur, (11, 61)).is_err());
    }

    #[test]
    fn tampered_basis_rejected() {
        let (amb, tur) = params();
        let mut s = fit_surrogate(SurrogateKind::CoreLength, 910.0, &amb, &tur, (21, 21)).unwrap();
        s.coefficients.insert("K11".into(), 0.0);
        assert!(s.validate().is_err());
    }

    #[test]
    fn missing_pair_reported() {
        let set = SurrogateSet::default();
        assert!(matches!(
            set.get(0, 2),
            Err(Error::MissingSurrogate {
                upstream: 1,
                downstream: 3
            })
        ));
    }

    #[test]
    fn pwa_erf_properties() {
        let f = build_pwa_erf(16, (-3.0, 3.0)).unwrap();
        f.validate().unwrap();
        assert_eq!(f.eval(0.0), 0.0);
        assert!(f.max_abs_error <= 0.02, "{}", f.max_abs_error);
        let mut prev = -2.0;
        for k in 0..=8000 {
            let x = -4.0 + k as f64 * 1e-3;
            let v = f.eval(x);
            assert!(v >= prev && (-1.0..=1.0).contains(&v));
            assert!((v + f.eval(-x)).abs() < 1e-15);
            prev = v;
        }
        assert_eq!(f.eval(10.0), erf(3.0));
        for s in f.segments() {
            assert_relative_eq!(s.slope * s.hi + s.intercept, f.eval(s.hi), epsilon = 1e-14);
        }
        assert!(build_pwa_erf(3, (-3.0, 3.0)).is_err());
        assert!(build_pwa_erf(8, (0.5, 3.0)).is_err());
    }

    #[test]
    fn surrogate_deficit_tracks_exact_one() {
        let (amb, tur) = params();
        let model = FarmModel::case_study(tur, amb).unwrap();
        let set = SurrogateSet::fit(&model, (61, 61)).unwrap();
        let pwa = build_pwa_erf(16, (-3.0, 3.0)).unwrap();
        let p = model.pair(0, 2).unwrap();
        let s = set.get(0, 2).unwrap();
        for (g, a, u) in [(0.0, 0.25, 0.0), (0.3, 0.2, -0.2), (-0.4, 0.3, 0.1)] {
            let exact = rotor_effective_deficit(g, a, p.x, p.y, u, &amb, &tur).unwrap();
            let approx = surrogate_rotor_deficit(&s.compile(), &pwa, g, a, p.y, u, &amb, &tur);
            assert!((exact - approx).abs() < 0.03, "{g} {a} {u}: {exact} vs {approx}");
        }
    }

    proptest! {
        #[test]
        fn symmetry_classes(g in -0.52..0.52f64, a in 0.06..0.33f64) {
            let (amb, tur) = params();
            let s = PairSurrogates::fit(0, 1, 910.0, &amb, &tur, (21, 21)).unwrap();
            prop_assert_eq!(s.core_length.value(g, a), s.core_length.value(-g, a));
            prop_assert_eq!(s.centre_deficit.value(g, a), s.centre_deficit.value(-g, a));
            prop_assert_eq!(s.deflection.value(g, a), -s.deflection.value(-g, a));
        }

        #[test]
        fn gradient_matches_differences(g in -0.5..0.5f64, a in 0.07..0.32f64) {
            let (amb, tur) = params();
            let s = fit_surrogate(SurrogateKind::CentreDeficit, 910.0, &amb, &tur, (21, 21)).unwrap();
            let h = 1e-6;
            let (dg, da) = s.gradient(g, a);
            let fg = (s.value(g + h, a) - s.value(g - h, a)) / (2.0 * h);
            let fa = (s.value(g, a + h) - s.value(g, a - h)) / (2.0 * h);
            prop_assert!((dg - fg).abs() < 1e-6 * (1.0 + fg.abs()));
            prop_assert!((da - fa).abs() < 1e-6 * (1.0 + fa.abs()));
        }
    }
}
