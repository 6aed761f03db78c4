//! Mixed-integer quadratically constrained form of the tracking problem.
//!
//! Every nonlinear term of the surrogate controller model is replaced by an
//! auxiliary variable tied to earlier ones by a constraint of degree at most
//! two. Each erf evaluation becomes a piecewise-affine selection with one
//! binary per segment and big-M activation rows. Big-M values and variable
//! bounds come from interval arithmetic over split sub-boxes of the inputs.
//!
//! At the first prediction step every wake source is a measured state and
//! only the downstream rotor's yaw can move the erf arguments, by at most
//! one rate step. That step uses a single affine piece over the reachable
//! argument interval (the PWA segment itself, or the chord across a
//! breakpoint), so binaries exist for steps `1..=N_p` only.

use std::collections::BTreeMap;
use std::f64::consts::{PI, SQRT_2};
use std::ops::{Add, Mul, Sub};

use super::problem::{assemble_nonlinear, ControllerModel, HorizonSettings, OpSource, PredictionProblem};
use crate::approximation::{taylor_cos, PairSurrogates, PolySurrogate, PwaFunction, PwaSegment, SurrogateSet};
use crate::error::{Error, Result};
use crate::rotor_power::{power_prefactor, FarmModel};
use crate::transport::OpState;

const SQRT_8: f64 = 2.0 * SQRT_2;
/// Sub-box splits per input axis for bound propagation.
const SPLIT_SOURCE: usize = 16;
const SPLIT_YAW: usize = 8;
const BOUND_PAD: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarKind {
    Continuous,
    Binary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Variable {
    pub name: String,
    pub kind: VarKind,
    pub lower: f64,
    pub upper: f64,
}

/// `Σ c·x_v + Σ c·x_a·x_b`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Expr {
    pub linear: Vec<(usize, f64)>,
    pub quadratic: Vec<(usize, usize, f64)>,
}

impl Expr {
    pub fn lin(mut self, v: usize, c: f64) -> Self {
        self.linear.push((v, c));
        self
    }

    pub fn quad(mut self, a: usize, b: usize, c: f64) -> Self {
        self.quadratic.push((a, b, c));
        self
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        let l: f64 = self.linear.iter().map(|&(v, c)| c * x[v]).sum();
        let q: f64 = self.quadratic.iter().map(|&(a, b, c)| c * x[a] * x[b]).sum();
        l + q
    }

    pub fn degree(&self) -> usize {
        if !self.quadratic.is_empty() {
            2
        } else if !self.linear.is_empty() {
            1
        } else {
            0
        }
    }

    /// Sum of term magnitudes, used to scale residuals.
    fn magnitude(&self, x: &[f64]) -> f64 {
        let l: f64 = self.linear.iter().map(|&(v, c)| (c * x[v]).abs()).sum();
        let q: f64 = self.quadratic.iter().map(|&(a, b, c)| (c * x[a] * x[b]).abs()).sum();
        l + q
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    Le,
    Ge,
    Eq,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub name: String,
    pub expr: Expr,
    pub relation: Relation,
    pub rhs: f64,
}

impl Row {
    pub fn violation(&self, x: &[f64]) -> f64 {
        let v = self.expr.value(x) - self.rhs;
        match self.relation {
            Relation::Le => v.max(0.0),
            Relation::Ge => (-v).max(0.0),
            Relation::Eq => v.abs(),
        }
    }

    /// Violation relative to the size of the terms involved.
    pub fn scaled_violation(&self, x: &[f64]) -> f64 {
        self.violation(x) / (1.0 + self.rhs.abs() + self.expr.magnitude(x))
    }
}

/// How an auxiliary variable follows from earlier ones.
#[derive(Debug, Clone, PartialEq)]
enum Def {
    Input,
    Value(Expr, f64),
    Quotient { num: Expr, num_c: f64, den: Expr },
    Erf { arg: usize },
    Select { arg: usize, segment: usize },
}

#[derive(Debug, Clone)]
pub struct MiqcqpProblem {
    pub variables: Vec<Variable>,
    pub rows: Vec<Row>,
    pub objective: Expr,
    pub objective_constant: f64,
    defs: Vec<Def>,
    segments: Vec<PwaSegment>,
    base: PredictionProblem,
    index: BTreeMap<String, usize>,
}

impl MiqcqpProblem {
    /// The nonlinear surrogate problem sharing this problem's inputs.
    pub fn base(&self) -> &PredictionProblem {
        &self.base
    }

    pub fn n_inputs(&self) -> usize {
        self.base.n_vars()
    }

    pub fn n_binaries(&self) -> usize {
        self.variables.iter().filter(|v| v.kind == VarKind::Binary).count()
    }

    pub fn variable_index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn max_degree(&self) -> usize {
        self.rows
            .iter()
            .map(|r| r.expr.degree())
            .chain([self.objective.degree()])
            .max()
            .unwrap_or(0)
    }

    /// Whether any quadratic term touches a binary.
    pub fn binaries_in_quadratic_terms(&self) -> bool {
        let is_bin = |v: usize| self.variables[v].kind == VarKind::Binary;
        self.rows
            .iter()
            .map(|r| &r.expr)
            .chain([&self.objective])
            .any(|e| e.quadratic.iter().any(|&(a, b, _)| is_bin(a) || is_bin(b)))
    }

    pub fn objective_value(&self, x: &[f64]) -> f64 {
        self.objective.value(x) + self.objective_constant
    }

    /// Largest scaled row violation and largest bound violation.
    pub fn max_violation(&self, x: &[f64]) -> (f64, f64) {
        let rows = self.rows.iter().map(|r| r.scaled_violation(x)).fold(0.0, f64::max);
        let bounds = self
            .variables
            .iter()
            .zip(x)
            .map(|(v, &xv)| (v.lower - xv).max(xv - v.upper).max(0.0))
            .fold(0.0, f64::max);
        (rows, bounds)
    }

    pub fn is_integral(&self, x: &[f64]) -> bool {
        self.variables
            .iter()
            .zip(x)
            .all(|(v, &xv)| v.kind == VarKind::Continuous || xv == 0.0 || xv == 1.0)
    }
}

/// Fills every auxiliary variable and binary from the input values, in the
/// order the problem defines them.
pub fn complete_point(p: &MiqcqpProblem, inputs: &[f64]) -> Result<Vec<f64>> {
    if inputs.len() != p.n_inputs() {
        return Err(Error::Dimension(format!(
            "{} input values for {} inputs",
            inputs.len(),
            p.n_inputs()
        )));
    }
    let mut x = vec![0.0; p.variables.len()];
    x[..inputs.len()].copy_from_slice(inputs);
    for (v, def) in p.defs.iter().enumerate() {
        x[v] = match def {
            Def::Input => continue,
            Def::Value(e, c) => e.value(&x) + c,
            Def::Quotient { num, num_c, den } => (num.value(&x) + num_c) / den.value(&x),
            Def::Erf { arg } => {
                let s = &p.segments[segment_of(&p.segments, x[*arg])];
                s.slope * x[*arg] + s.intercept
            }
            Def::Select { arg, segment } => f64::from(u8::from(segment_of(&p.segments, x[*arg]) == *segment)),
        };
    }
    Ok(x)
}

/// First segment whose upper end is not below `t`; the outer pieces extend.
fn segment_of(segs: &[PwaSegment], t: f64) -> usize {
    segs.iter().position(|s| t <= s.hi).unwrap_or(segs.len() - 1)
}

fn piece(s: &PwaSegment, t: f64) -> f64 {
    s.slope * t + s.intercept
}

fn ext_eval(segs: &[PwaSegment], t: f64) -> f64 {
    piece(&segs[segment_of(segs, t)], t)
}

/// Affine stand-in for the PWA function over `[lo, hi]`: the segment itself
/// when the interval stays inside one, else the chord between the ends.
/// Returns the piece and its largest gap to the PWA function.
fn chord(segs: &[PwaSegment], lo: f64, hi: f64) -> (PwaSegment, f64) {
    let (k_lo, k_hi) = (segment_of(segs, lo), segment_of(segs, hi));
    if k_lo == k_hi {
        return (segs[k_lo], 0.0);
    }
    let (f_lo, f_hi) = (ext_eval(segs, lo), ext_eval(segs, hi));
    let slope = (f_hi - f_lo) / (hi - lo);
    let c = PwaSegment {
        lo,
        hi,
        slope,
        intercept: f_lo - slope * lo,
    };
    let gap = segs[k_lo..k_hi]
        .iter()
        .map(|s| (piece(&c, s.hi) - ext_eval(segs, s.hi)).abs())
        .fold(0.0, f64::max);
    (c, gap)
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Iv {
    lo: f64,
    hi: f64,
}

impl Iv {
    fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    fn point(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    fn sqr(self) -> Self {
        let (a, b) = (self.lo * self.lo, self.hi * self.hi);
        if self.lo <= 0.0 && self.hi >= 0.0 {
            Self::new(0.0, a.max(b))
        } else {
            Self::new(a.min(b), a.max(b))
        }
    }

    fn cube(self) -> Self {
        Self::new(self.lo.powi(3), self.hi.powi(3))
    }

    fn pow(self, p: u32) -> Self {
        match p {
            0 => Self::point(1.0),
            1 => self,
            2 => self.sqr(),
            _ => self.cube(),
        }
    }

    fn scale(self, c: f64) -> Self {
        if c >= 0.0 {
            Self::new(c * self.lo, c * self.hi)
        } else {
            Self::new(c * self.hi, c * self.lo)
        }
    }

    fn shift(self, c: f64) -> Self {
        Self::new(self.lo + c, self.hi + c)
    }

    /// Division by a strictly positive interval.
    fn div_pos(self, d: Iv) -> Self {
        self * Self::new(1.0 / d.hi, 1.0 / d.lo)
    }

    fn hull(self, o: Iv) -> Self {
        Self::new(self.lo.min(o.lo), self.hi.max(o.hi))
    }

    fn piece(self, k: usize, n: usize) -> Self {
        let w = (self.hi - self.lo) / n as f64;
        let lo = self.lo + w * k as f64;
        let hi = if k + 1 == n { self.hi } else { lo + w };
        Self::new(lo, hi)
    }
}

impl Add for Iv {
    type Output = Iv;
    fn add(self, o: Iv) -> Iv {
        Iv::new(self.lo + o.lo, self.hi + o.hi)
    }
}

impl Sub for Iv {
    type Output = Iv;
    fn sub(self, o: Iv) -> Iv {
        Iv::new(self.lo - o.hi, self.hi - o.lo)
    }
}

impl Mul for Iv {
    type Output = Iv;
    fn mul(self, o: Iv) -> Iv {
        let c = [self.lo * o.lo, self.lo * o.hi, self.hi * o.lo, self.hi * o.hi];
        Iv::new(
            c.iter().copied().fold(f64::INFINITY, f64::min),
            c.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        )
    }
}

fn poly_iv(s: &PolySurrogate, g: Iv, a: Iv) -> Iv {
    s.kind
        .basis()
        .iter()
        .map(|&(p, q)| (g.pow(p) * a.pow(q)).scale(s.coefficient(p, q)))
        .fold(Iv::point(0.0), |acc, t| acc + t)
}

/// Bounds of every pair-level quantity at one step.
#[derive(Debug, Clone, Copy)]
struct PairBounds {
    xc: Iv,
    rc: Iv,
    dy: Iv,
    sy: Iv,
    sz: Iv,
    args: [Iv; 3],
    erfs: [Iv; 3],
    xi14: Iv,
    xi15: Iv,
    xi16: Iv,
    xi17: Iv,
    xi18: Iv,
}

struct PairCtx<'a> {
    sur: &'a PairSurrogates,
    x: f64,
    y: f64,
    k_y: f64,
    k_z: f64,
    d: f64,
}

impl PairCtx<'_> {
    /// Interval enclosure over split sub-boxes of the source `(γ, a)` and
    /// the downstream yaw. Sub-boxes whose core length cannot reach `x`
    /// are dropped when the source is a decision.
    fn bounds(
        &self,
        g: Iv,
        a: Iv,
        u: Iv,
        decision: bool,
        segs: &[PwaSegment],
        fixed_pieces: Option<[PwaSegment; 3]>,
    ) -> Option<PairBounds> {
        let n_src = if decision { SPLIT_SOURCE } else { 1 };
        let mut out: Option<PairBounds> = None;
        for gi in 0..n_src {
            for ai in 0..n_src {
                let (gs, as_) = (g.piece(gi, n_src), a.piece(ai, n_src));
                let mut xc = poly_iv(&self.sur.core_length, gs, as_);
                if decision {
                    if xc.lo > self.x {
                        continue;
                    }
                    xc.hi = xc.hi.min(self.x);
                }
                let rc = poly_iv(&self.sur.centre_deficit, gs, as_);
                let dy = poly_iv(&self.sur.deflection, gs, as_);
                let w0 = self.d / SQRT_8;
                let room = Iv::point(self.x) - xc;
                let sy = room.scale(self.k_y) + (Iv::point(1.0) - gs.sqr().scale(0.5)).scale(w0);
                let sz = room.scale(self.k_z).shift(w0);
                for ui in 0..SPLIT_YAW {
                    let us = u.piece(ui, SPLIT_YAW);
                    let xi1 = Iv::point(1.0) - us.sqr().scale(0.5);
                    let half = xi1.scale(0.5 * self.d);
                    let a11 = (half.shift(self.y) - dy).div_pos(sy.scale(SQRT_2));
                    let a12 = (Iv::point(self.y) - half - dy).div_pos(sy.scale(SQRT_2));
                    let a13 = Iv::point(self.d).div_pos(sz.scale(SQRT_8));
                    let args = [a11, a12, a13];
                    let mut erfs = [Iv::point(0.0); 3];
                    for k in 0..3 {
                        erfs[k] = match fixed_pieces {
                            Some(pc) => Iv::new(piece(&pc[k], args[k].lo), piece(&pc[k], args[k].hi)),
                            None => Iv::new(ext_eval(segs, args[k].lo), ext_eval(segs, args[k].hi)),
                        };
                    }
                    let xi14 = rc * sy;
                    let xi15 = xi14 * sz;
                    let xi16 = (xi15 * (Iv::point(2.0) - xi1)).scale(PI / (self.d * self.d));
                    let xi17 = xi16 * erfs[2];
                    let xi18 = xi17 * (erfs[0] - erfs[1]);
                    let b = PairBounds {
                        xc,
                        rc,
                        dy,
                        sy,
                        sz,
                        args,
                        erfs,
                        xi14,
                        xi15,
                        xi16,
                        xi17,
                        xi18,
                    };
                    out = Some(match out {
                        None => b,
                        Some(o) => PairBounds {
                            xc: o.xc.hull(b.xc),
                            rc: o.rc.hull(b.rc),
                            dy: o.dy.hull(b.dy),
                            sy: o.sy.hull(b.sy),
                            sz: o.sz.hull(b.sz),
                            args: [
                                o.args[0].hull(b.args[0]),
                                o.args[1].hull(b.args[1]),
                                o.args[2].hull(b.args[2]),
                            ],
                            erfs: [
                                o.erfs[0].hull(b.erfs[0]),
                                o.erfs[1].hull(b.erfs[1]),
                                o.erfs[2].hull(b.erfs[2]),
                            ],
                            xi14: o.xi14.hull(b.xi14),
                            xi15: o.xi15.hull(b.xi15),
                            xi16: o.xi16.hull(b.xi16),
                            xi17: o.xi17.hull(b.xi17),
                            xi18: o.xi18.hull(b.xi18),
                        },
                    });
                }
            }
        }
        out
    }
}

/// Largest gap between an affine piece and erf over `[lo, hi]`.
fn piece_error(s: &PwaSegment, lo: f64, hi: f64) -> f64 {
    (0..=64)
        .map(|k| lo + (hi - lo) * k as f64 / 64.0)
        .map(|t| (piece(s, t) - libm::erf(t)).abs())
        .fold(0.0, f64::max)
}

struct Builder {
    vars: Vec<Variable>,
    defs: Vec<Def>,
    rows: Vec<Row>,
    index: BTreeMap<String, usize>,
}

impl Builder {
    fn var(&mut self, name: String, kind: VarKind, b: Iv, def: Def) -> usize {
        // Interval sums are not rounded outward; pad derived bounds.
        let b = match def {
            Def::Input | Def::Select { .. } => b,
            _ => Iv::new(
                b.lo - BOUND_PAD * (1.0 + b.lo.abs()),
                b.hi + BOUND_PAD * (1.0 + b.hi.abs()),
            ),
        };
        let id = self.vars.len();
        let prev = self.index.insert(name.clone(), id);
        debug_assert!(prev.is_none(), "duplicate variable {name}");
        self.vars.push(Variable {
            name,
            kind,
            lower: b.lo,
            upper: b.hi,
        });
        self.defs.push(def);
        id
    }

    fn row(&mut self, name: String, expr: Expr, relation: Relation, rhs: f64) {
        self.rows.push(Row {
            name,
            expr,
            relation,
            rhs,
        });
    }

    /// Variable `v = expr + c` with its defining row.
    fn defined(&mut self, name: String, b: Iv, expr: Expr, c: f64) -> usize {
        let v = self.var(name.clone(), VarKind::Continuous, b, Def::Value(expr.clone(), c));
        let mut row = Expr::default().lin(v, 1.0);
        row.linear.extend(expr.linear.iter().map(|&(u, k)| (u, -k)));
        row.quadratic.extend(expr.quadratic.iter().map(|&(p, q, k)| (p, q, -k)));
        self.row(format!("d_{name}"), row, Relation::Eq, c);
        v
    }
}

/// Input-level auxiliaries of one turbine at one step.
#[derive(Debug, Clone, Copy)]
struct InputAux {
    g: usize,
    a: usize,
    xi1: usize,
    xi2: usize,
    xi3: usize,
    xi4: usize,
    xi5: usize,
    xi7: usize,
    xi19: usize,
}

/// Expression of `γ^p a^q` over a decision source.
fn monomial(p: u32, q: u32, s: &InputAux) -> Expr {
    let e = Expr::default();
    match (p, q) {
        (0, 1) => e.lin(s.a, 1.0),
        (0, 2) => e.lin(s.xi4, 1.0),
        (0, 3) => e.lin(s.xi5, 1.0),
        (1, 0) => e.lin(s.g, 1.0),
        (2, 0) => e.lin(s.xi2, 1.0),
        (3, 0) => e.lin(s.xi3, 1.0),
        (1, 1) => e.quad(s.g, s.a, 1.0),
        (2, 1) => e.quad(s.xi2, s.a, 1.0),
        (1, 2) => e.quad(s.g, s.xi4, 1.0),
        _ => unreachable!("monomial γ^{p} a^{q} outside the surrogate bases"),
    }
}

/// Polynomial as `(expr, constant)` over a decision source.
fn poly_expr(s: &PolySurrogate, src: &InputAux, scale: f64) -> (Expr, f64) {
    let mut e = Expr::default();
    let mut c = 0.0;
    for &(p, q) in s.kind.basis() {
        let k = scale * s.coefficient(p, q);
        if (p, q) == (0, 0) {
            c += k;
            continue;
        }
        let m = monomial(p, q, src);
        e.linear.extend(m.linear.iter().map(|&(v, w)| (v, w * k)));
        e.quadratic.extend(m.quadratic.iter().map(|&(a, b, w)| (a, b, w * k)));
    }
    (e, c)
}

pub fn assemble_miqcqp(
    model: &FarmModel,
    surrogates: &SurrogateSet,
    pwa: &PwaFunction,
    states: &[OpState],
    prev_yaw: &[f64],
    p_ref: f64,
    settings: &HorizonSettings,
) -> Result<MiqcqpProblem> {
    surrogates.check_covers(model)?;
    let controller = ControllerModel::Surrogate {
        surrogates: surrogates.clone(),
        pwa: pwa.clone(),
    };
    let base = assemble_nonlinear(model, &controller, states, prev_yaw, p_ref, settings)?;
    let (amb, tur) = (model.ambient(), model.turbine());
    if tur.p_p != 2.0 {
        return Err(Error::invalid("turbine.p_p", "the reformulated problem needs p_p = 2"));
    }
    let segs = pwa.segments();
    let (dom_lo, dom_hi) = pwa.domain();
    let lim = *base.limits();
    let n_t = base.n_turbines();
    let n_s = base.n_steps();
    let d = tur.diameter;

    let mut b = Builder {
        vars: Vec::new(),
        defs: Vec::new(),
        rows: Vec::new(),
        index: BTreeMap::new(),
    };

    let names = base.variable_names();
    let g_box = Iv::new(-lim.yaw_max, lim.yaw_max);
    let a_box = Iv::new(lim.a_min, lim.a_max);
    for (v, name) in names.into_iter().enumerate() {
        let bx = if v % 2 == 0 { g_box } else { a_box };
        b.var(name, VarKind::Continuous, bx, Def::Input);
    }

    for i in 0..n_t {
        for n in 0..n_s {
            let g = base.var_index(i, n, true);
            let before = if n == 0 {
                None
            } else {
                Some(base.var_index(i, n - 1, true))
            };
            let (expr, c) = match before {
                Some(p) => (Expr::default().lin(g, 1.0).lin(p, -1.0), 0.0),
                None => (Expr::default().lin(g, 1.0), base.prev_yaw()[i]),
            };
            let tag = format!("[{}][{n}]", i + 1);
            b.row(format!("rate_up{tag}"), expr.clone(), Relation::Le, c + lim.yaw_rate);
            b.row(format!("rate_dn{tag}"), expr, Relation::Ge, c - lim.yaw_rate);
        }
    }

    // Input-level auxiliaries.
    let kappa = tur.kappa;
    let cp = |a: f64| 4.0 * kappa * a * (1.0 - a) * (1.0 - a);
    let xi1_box = Iv::point(1.0) - g_box.sqr().scale(0.5);
    let mut aux = vec![Vec::with_capacity(n_s); n_t];
    for (i, row) in aux.iter_mut().enumerate() {
        for n in 0..n_s {
            let g = base.var_index(i, n, true);
            let a = base.var_index(i, n, false);
            let tag = format!("[{}][{n}]", i + 1);
            let xi2 = b.defined(format!("xi2{tag}"), g_box.sqr(), Expr::default().quad(g, g, 1.0), 0.0);
            let xi1 = b.defined(format!("xi1{tag}"), xi1_box, Expr::default().lin(xi2, -0.5), 1.0);
            let xi3 = b.defined(
                format!("xi3{tag}"),
                g_box.cube(),
                Expr::default().quad(xi2, g, 1.0),
                0.0,
            );
            let xi4 = b.defined(format!("xi4{tag}"), a_box.sqr(), Expr::default().quad(a, a, 1.0), 0.0);
            let xi5 = b.defined(
                format!("xi5{tag}"),
                a_box.cube(),
                Expr::default().quad(xi4, a, 1.0),
                0.0,
            );
            let one_minus = Iv::point(1.0) - a_box;
            let xi6 = b.defined(
                format!("xi6{tag}"),
                one_minus.sqr(),
                Expr::default().lin(a, -2.0).quad(a, a, 1.0),
                1.0,
            );
            // C_p rises on [0, 1/3].
            let cp_box = Iv::new(cp(lim.a_min), cp(lim.a_max.min(1.0 / 3.0))).hull(Iv::point(cp(lim.a_max)));
            let xi7 = b.defined(
                format!("xi7{tag}"),
                cp_box,
                Expr::default().quad(a, xi6, 4.0 * kappa),
                0.0,
            );
            let xi19 = b.defined(
                format!("xi19{tag}"),
                xi1_box.sqr(),
                Expr::default().quad(xi1, xi1, 1.0),
                0.0,
            );
            row.push(InputAux {
                g,
                a,
                xi1,
                xi2,
                xi3,
                xi4,
                xi5,
                xi7,
                xi19,
            });
        }
    }

    // Pair-level wake terms.
    let mut deficit = vec![vec![0usize; n_s]; base.pairs.len()];
    let downstream: Vec<usize> = {
        let mut down = vec![0; base.pairs.len()];
        for (j, list) in base.incoming.iter().enumerate() {
            for &k in list {
                down[k] = j;
            }
        }
        down
    };
    let erf_tags = ["xi11", "xi12", "xi13"];
    for n in 0..n_s {
        for (k, pair) in base.pairs.iter().enumerate() {
            let (i, j) = (pair.up, downstream[k]);
            let sur = surrogates.get(i, j)?;
            let ctx = PairCtx {
                sur,
                x: pair.x,
                y: pair.y,
                k_y: amb.k_y,
                k_z: amb.k_z,
                d,
            };
            let tag = format!("[{},{}][{n}]", i + 1, j + 1);
            let prev_j = base.prev_yaw()[j];
            let reach = lim.yaw_rate * (n + 1) as f64;
            let u_box = Iv::new((prev_j - reach).max(-lim.yaw_max), (prev_j + reach).min(lim.yaw_max));
            let source = base.op_source(pair, n);

            let mut chord_gap = [0.0; 3];
            let fixed_pieces = if n == 0 {
                let OpSource::Fixed(g0, a0) = source else {
                    unreachable!("first-step sources are measured states")
                };
                let pb = ctx
                    .bounds(Iv::point(g0), Iv::point(a0), u_box, false, &segs, None)
                    .expect("point box");
                Some([0, 1, 2].map(|m| {
                    let (c, gap) = chord(&segs, pb.args[m].lo, pb.args[m].hi);
                    chord_gap[m] = gap;
                    c
                }))
            } else {
                None
            };

            let bounds = match source {
                OpSource::Input(_) => ctx.bounds(g_box, a_box, u_box, true, &segs, None),
                OpSource::Fixed(g0, a0) => ctx.bounds(Iv::point(g0), Iv::point(a0), u_box, false, &segs, fixed_pieces),
            };
            let Some(bd) = bounds else {
                return Err(Error::Infeasible(format!(
                    "core length of pair ({}, {}) exceeds the spacing for every input",
                    i + 1,
                    j + 1
                )));
            };

            for m in 0..3 {
                let arg = bd.args[m];
                let below = if arg.lo < dom_lo {
                    piece_error(&segs[0], arg.lo, dom_lo)
                } else {
                    0.0
                };
                let above = if arg.hi > dom_hi {
                    piece_error(&segs[segs.len() - 1], dom_hi, arg.hi)
                } else {
                    0.0
                };
                let err = below.max(above).max(chord_gap[m]);
                if err > pwa.max_abs_error {
                    return Err(Error::PwaDomain {
                        variable: format!("{}{tag}", erf_tags[m]),
                        lo: arg.lo,
                        hi: arg.hi,
                        domain_lo: dom_lo,
                        domain_hi: dom_hi,
                    });
                }
            }

            let xi1_j = aux[j][n].xi1;
            let w0 = d / SQRT_8;
            let (xc, rc, dy, sy) = match source {
                OpSource::Input(t) => {
                    let src = aux[i][t];
                    let (e, c) = poly_expr(&sur.core_length, &src, 1.0);
                    let xc = b.defined(format!("xc{tag}"), bd.xc, e, c);
                    b.row(format!("core{tag}"), Expr::default().lin(xc, 1.0), Relation::Le, pair.x);
                    let (e, c) = poly_expr(&sur.centre_deficit, &src, 1.0);
                    let rc = b.defined(format!("rc{tag}"), bd.rc, e, c);
                    let (e, c) = poly_expr(&sur.deflection, &src, 1.0);
                    let dy = b.defined(format!("dy{tag}"), bd.dy, e, c);
                    let sy = b.defined(
                        format!("sy{tag}"),
                        bd.sy,
                        Expr::default().lin(xc, -amb.k_y).lin(src.xi2, -0.5 * w0),
                        amb.k_y * pair.x + w0,
                    );
                    (xc, rc, dy, sy)
                }
                OpSource::Fixed(g0, a0) => {
                    let xc = b.defined(
                        format!("xc{tag}"),
                        bd.xc,
                        Expr::default(),
                        sur.core_length.value(g0, a0),
                    );
                    let rc = b.defined(
                        format!("rc{tag}"),
                        bd.rc,
                        Expr::default(),
                        sur.centre_deficit.value(g0, a0),
                    );
                    let dy = b.defined(format!("dy{tag}"), bd.dy, Expr::default(), sur.deflection.value(g0, a0));
                    let sy = b.defined(
                        format!("sy{tag}"),
                        bd.sy,
                        Expr::default().lin(xc, -amb.k_y),
                        amb.k_y * pair.x + w0 * taylor_cos(g0),
                    );
                    (xc, rc, dy, sy)
                }
            };
            let sz = b.defined(
                format!("sz{tag}"),
                bd.sz,
                Expr::default().lin(xc, -amb.k_z),
                amb.k_z * pair.x + w0,
            );

            let half = 0.5 * d;
            let a11 = b.var(
                format!("xi11{tag}"),
                VarKind::Continuous,
                bd.args[0],
                Def::Quotient {
                    num: Expr::default().lin(xi1_j, half).lin(dy, -1.0),
                    num_c: pair.y,
                    den: Expr::default().lin(sy, SQRT_2),
                },
            );
            b.row(
                format!("d_xi11{tag}"),
                Expr::default().quad(a11, sy, SQRT_2).lin(xi1_j, -half).lin(dy, 1.0),
                Relation::Eq,
                pair.y,
            );
            let a12 = b.var(
                format!("xi12{tag}"),
                VarKind::Continuous,
                bd.args[1],
                Def::Quotient {
                    num: Expr::default().lin(xi1_j, -half).lin(dy, -1.0),
                    num_c: pair.y,
                    den: Expr::default().lin(sy, SQRT_2),
                },
            );
            b.row(
                format!("d_xi12{tag}"),
                Expr::default().quad(a12, sy, SQRT_2).lin(xi1_j, half).lin(dy, 1.0),
                Relation::Eq,
                pair.y,
            );
            let a13 = b.var(
                format!("xi13{tag}"),
                VarKind::Continuous,
                bd.args[2],
                Def::Quotient {
                    num: Expr::default(),
                    num_c: d,
                    den: Expr::default().lin(sz, SQRT_8),
                },
            );
            b.row(
                format!("d_xi13{tag}"),
                Expr::default().quad(a13, sz, SQRT_8),
                Relation::Eq,
                d,
            );

            let mut erf_vars = [0usize; 3];
            for (m, &arg) in [a11, a12, a13].iter().enumerate() {
                let name = format!("erf{}", &erf_tags[m][2..]);
                let e_box = bd.erfs[m];
                erf_vars[m] = match fixed_pieces {
                    Some(pc) => {
                        let s = pc[m];
                        b.defined(
                            format!("{name}{tag}"),
                            e_box,
                            Expr::default().lin(arg, s.slope),
                            s.intercept,
                        )
                    }
                    None => {
                        let e = b.var(format!("{name}{tag}"), VarKind::Continuous, e_box, Def::Erf { arg });
                        let a_box = bd.args[m];
                        let sel_tag = format!("[{},{},{}][{n}]", erf_tags[m], i + 1, j + 1);
                        let mut sel = Expr::default();
                        for (s_idx, s) in segs.iter().enumerate() {
                            let z = b.var(
                                format!("z{}{sel_tag}", s_idx + 1),
                                VarKind::Binary,
                                Iv::new(0.0, 1.0),
                                Def::Select { arg, segment: s_idx },
                            );
                            sel = sel.lin(z, 1.0);
                            if s_idx > 0 {
                                let m_lo = (s.lo - a_box.lo).max(0.0);
                                b.row(
                                    format!("lo{}{sel_tag}", s_idx + 1),
                                    Expr::default().lin(arg, 1.0).lin(z, -m_lo),
                                    Relation::Ge,
                                    s.lo - m_lo,
                                );
                            }
                            if s_idx + 1 < segs.len() {
                                let m_hi = (a_box.hi - s.hi).max(0.0);
                                b.row(
                                    format!("hi{}{sel_tag}", s_idx + 1),
                                    Expr::default().lin(arg, 1.0).lin(z, m_hi),
                                    Relation::Le,
                                    s.hi + m_hi,
                                );
                            }
                            let m_up = (e_box.hi - s.slope * a_box.lo - s.intercept).max(0.0);
                            b.row(
                                format!("up{}{sel_tag}", s_idx + 1),
                                Expr::default().lin(e, 1.0).lin(arg, -s.slope).lin(z, m_up),
                                Relation::Le,
                                s.intercept + m_up,
                            );
                            let m_dn = (s.slope * a_box.hi + s.intercept - e_box.lo).max(0.0);
                            b.row(
                                format!("dn{}{sel_tag}", s_idx + 1),
                                Expr::default().lin(e, 1.0).lin(arg, -s.slope).lin(z, -m_dn),
                                Relation::Ge,
                                s.intercept - m_dn,
                            );
                        }
                        b.row(format!("sel{sel_tag}"), sel, Relation::Eq, 1.0);
                        e
                    }
                };
            }

            let xi14 = b.defined(format!("xi14{tag}"), bd.xi14, Expr::default().quad(rc, sy, 1.0), 0.0);
            let xi15 = b.defined(format!("xi15{tag}"), bd.xi15, Expr::default().quad(xi14, sz, 1.0), 0.0);
            let xi16 = b.defined(
                format!("xi16{tag}"),
                bd.xi16,
                Expr::default()
                    .lin(xi15, 2.0 * PI / (d * d))
                    .quad(xi15, xi1_j, -PI / (d * d)),
                0.0,
            );
            let xi17 = b.defined(
                format!("xi17{tag}"),
                bd.xi17,
                Expr::default().quad(xi16, erf_vars[2], 1.0),
                0.0,
            );
            let xi18 = b.defined(
                format!("xi18{tag}"),
                bd.xi18,
                Expr::default()
                    .quad(xi17, erf_vars[0], 1.0)
                    .quad(xi17, erf_vars[1], -1.0),
                0.0,
            );
            deficit[k][n] = xi18;
        }
    }

    // Rotor speeds, powers and the farm total.
    let v_inf = amb.v_inf;
    let c_pow = power_prefactor(amb, tur);
    let mut farm = Vec::with_capacity(n_s);
    let mut power_vars = vec![Vec::with_capacity(n_t); n_s];
    for (n, powers) in power_vars.iter_mut().enumerate() {
        for j in 0..n_t {
            let tag = format!("[{}][{n}]", j + 1);
            let incoming = &base.incoming[j];
            let mut v_box = Iv::point(v_inf);
            let v = if incoming.is_empty() {
                b.defined(format!("v{tag}"), v_box, Expr::default(), v_inf)
            } else {
                let mut cur: Option<usize> = None;
                for (l, &k) in incoming.iter().enumerate() {
                    let r = deficit[k][n];
                    let r_box = Iv::new(b.vars[r].lower, b.vars[r].upper);
                    v_box = v_box * (Iv::point(1.0) - r_box);
                    let name = if l + 1 == incoming.len() {
                        format!("v{tag}")
                    } else {
                        format!("vp{}{tag}", l + 1)
                    };
                    cur = Some(match cur {
                        None => b.defined(name, v_box, Expr::default().lin(r, -v_inf), v_inf),
                        Some(prev) => b.defined(name, v_box, Expr::default().lin(prev, 1.0).quad(prev, r, -1.0), 0.0),
                    });
                }
                cur.expect("non-empty")
            };
            let s = aux[j][n];
            let xi8 = b.defined(format!("xi8{tag}"), v_box.sqr(), Expr::default().quad(v, v, 1.0), 0.0);
            let xi9_box = v_box.sqr() * v_box;
            let xi9 = b.defined(format!("xi9{tag}"), xi9_box, Expr::default().quad(xi8, v, 1.0), 0.0);
            let xi7_box = Iv::new(b.vars[s.xi7].lower, b.vars[s.xi7].upper);
            let xi10_box = xi7_box * xi9_box;
            let xi10 = b.defined(
                format!("xi10{tag}"),
                xi10_box,
                Expr::default().quad(s.xi7, xi9, 1.0),
                0.0,
            );
            let xi20_box = (xi10_box * xi1_box.sqr()).scale(c_pow);
            let xi20 = b.defined(
                format!("xi20{tag}"),
                xi20_box,
                Expr::default().quad(xi10, s.xi19, c_pow),
                0.0,
            );
            b.row(
                format!("rated{tag}"),
                Expr::default().lin(xi20, 1.0),
                Relation::Le,
                tur.p_rated,
            );
            powers.push((xi20, xi20_box));
        }
        let total = powers.iter().fold(Iv::point(0.0), |acc, &(_, bx)| acc + bx);
        let mut e = Expr::default();
        for &(v, _) in powers.iter() {
            e = e.lin(v, 1.0);
        }
        farm.push(b.defined(format!("pf[{n}]"), total, e, 0.0));
    }

    let w = settings.weights;
    let mut objective = Expr::default();
    for (n, &pf) in farm.iter().enumerate() {
        objective = objective.lin(pf, -2.0 * w.q_p * p_ref).quad(pf, pf, w.q_p);
        for &(v, _) in &power_vars[n] {
            objective = objective.quad(v, v, w.q_p2);
        }
    }
    let objective_constant = w.q_p * p_ref * p_ref * n_s as f64;

    Ok(MiqcqpProblem {
        variables: b.vars,
        rows: b.rows,
        objective,
        objective_constant,
        defs: b.defs,
        segments: segs,
        base,
        index: b.index,
    })
}
