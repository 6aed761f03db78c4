//! Text encoding of the reformulated problem and of solution vectors.
//!
//! The problem file follows the section layout of the CPLEX LP format
//! (`Minimize`, `Subject To`, `Bounds`, `Binaries`, `End`) with every token
//! separated by spaces. Quadratic terms sit inside `[ ]` and carry their
//! literal coefficients, in the objective as well as in rows. Numbers are
//! written in shortest round-trip form, so parsing reproduces them exactly.
//! Every variable gets a bounds line in declaration order; the `Binaries`
//! section then marks the integer ones.
//!
//! A solution file holds one `name value` pair per line; `#` starts a comment.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::check::{check_plan, ResidualReport};
use super::miqcqp::{complete_point, Expr, MiqcqpProblem, Relation, Row, VarKind, Variable};
use super::solver::{ControlPlan, SolveStatus, SolverStats};
use crate::error::{Error, Result};

fn push_number(out: &mut String, first: bool, c: f64) {
    if first {
        if c < 0.0 {
            let _ = write!(out, "- {}", -c);
        } else {
            let _ = write!(out, "{c}");
        }
    } else if c < 0.0 {
        let _ = write!(out, " - {}", -c);
    } else {
        let _ = write!(out, " + {c}");
    }
}

fn write_expr(out: &mut String, e: &Expr, names: &[Variable], constant: Option<f64>) {
    let mut first = true;
    for &(v, c) in &e.linear {
        push_number(out, first, c);
        let _ = write!(out, " {}", names[v].name);
        first = false;
    }
    if !e.quadratic.is_empty() {
        out.push_str(if first { "[ " } else { " + [ " });
        let mut inner_first = true;
        for &(a, b, c) in &e.quadratic {
            push_number(out, inner_first, c);
            if a == b {
                let _ = write!(out, " {} ^ 2", names[a].name);
            } else {
                let _ = write!(out, " {} * {}", names[a].name, names[b].name);
            }
            inner_first = false;
        }
        out.push_str(" ]");
        first = false;
    }
    if let Some(c) = constant {
        if c != 0.0 || first {
            push_number(out, first, c);
            first = false;
        }
    }
    if first {
        out.push('0');
    }
}

/// Deterministic text encoding of `p`.
pub fn export_problem(p: &MiqcqpProblem) -> String {
    let vars = &p.variables;
    let mut out = String::new();
    let _ = writeln!(out, "\\ wake-mpc reformulated power-tracking problem");
    let _ = writeln!(
        out,
        "\\ {} variables, {} binaries, {} rows",
        vars.len(),
        p.n_binaries(),
        p.rows.len()
    );
    out.push_str("Minimize\n obj: ");
    write_expr(&mut out, &p.objective, vars, Some(p.objective_constant));
    out.push_str("\nSubject To\n");
    for r in &p.rows {
        let _ = write!(out, " {}: ", r.name);
        write_expr(&mut out, &r.expr, vars, None);
        let rel = match r.relation {
            Relation::Le => "<=",
            Relation::Ge => ">=",
            Relation::Eq => "=",
        };
        let _ = writeln!(out, " {rel} {}", r.rhs);
    }
    out.push_str("Bounds\n");
    for v in vars {
        let _ = writeln!(out, " {} <= {} <= {}", v.lower, v.name, v.upper);
    }
    out.push_str("Binaries\n");
    for v in vars.iter().filter(|v| v.kind == VarKind::Binary) {
        let _ = writeln!(out, " {}", v.name);
    }
    out.push_str("End\n");
    out
}

/// Problem read back from its text encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedProblem {
    pub variables: Vec<Variable>,
    pub objective: Expr,
    pub objective_constant: f64,
    pub rows: Vec<Row>,
}

impl ParsedProblem {
    pub fn n_binaries(&self) -> usize {
        self.variables.iter().filter(|v| v.kind == VarKind::Binary).count()
    }

    pub fn max_degree(&self) -> usize {
        self.rows
            .iter()
            .map(|r| r.expr.degree())
            .chain([self.objective.degree()])
            .max()
            .unwrap_or(0)
    }
}

fn perr(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn number(tok: &str, line: usize) -> Result<f64> {
    tok.parse::<f64>()
        .map_err(|_| perr(line, format!("expected a number, found `{tok}`")))
}

/// Terms with names still unresolved.
#[derive(Default)]
struct RawExpr {
    linear: Vec<(String, f64)>,
    quadratic: Vec<(String, String, f64)>,
    constant: f64,
}

fn parse_terms(toks: &[&str], line: usize) -> Result<RawExpr> {
    let mut e = RawExpr::default();
    let mut k = 0;
    let mut in_quad = false;
    let mut sign = 1.0;
    while k < toks.len() {
        match toks[k] {
            "+" => {
                k += 1;
                continue;
            }
            "-" => {
                sign = -sign;
                k += 1;
                continue;
            }
            "[" if !in_quad => {
                in_quad = true;
                k += 1;
                continue;
            }
            "]" if in_quad => {
                in_quad = false;
                k += 1;
                continue;
            }
            _ => {}
        }
        let c = sign * number(toks[k], line)?;
        sign = 1.0;
        k += 1;
        let name = toks.get(k).copied();
        match name {
            Some(n) if !matches!(n, "+" | "-" | "[" | "]") => {
                k += 1;
                if in_quad {
                    match toks.get(k).copied() {
                        Some("^") => {
                            if toks.get(k + 1).copied() != Some("2") {
                                return Err(perr(line, "only squares are allowed after `^`"));
                            }
                            e.quadratic.push((n.to_string(), n.to_string(), c));
                            k += 2;
                        }
                        Some("*") => {
                            let other = toks.get(k + 1).ok_or_else(|| perr(line, "dangling `*`"))?;
                            e.quadratic.push((n.to_string(), other.to_string(), c));
                            k += 2;
                        }
                        _ => return Err(perr(line, format!("quadratic term `{n}` lacks `*` or `^`"))),
                    }
                } else {
                    e.linear.push((n.to_string(), c));
                }
            }
            _ => {
                if in_quad {
                    return Err(perr(line, "constant inside a quadratic section"));
                }
                e.constant += c;
            }
        }
    }
    if in_quad {
        return Err(perr(line, "unterminated `[`"));
    }
    Ok(e)
}

/// Parses a problem file, rejecting references to undeclared variables and
/// binaries inside quadratic terms.
pub fn parse_problem(text: &str) -> Result<ParsedProblem> {
    #[derive(PartialEq, Clone, Copy)]
    enum Sec {
        Head,
        Obj,
        Rows,
        Bounds,
        Bins,
        End,
    }
    let mut sec = Sec::Head;
    let mut objective: Option<(RawExpr, usize)> = None;
    let mut rows: Vec<(String, RawExpr, Relation, f64, usize)> = Vec::new();
    let mut variables: Vec<Variable> = Vec::new();
    let mut index: BTreeMap<String, usize> = BTreeMap::new();

    for (ln, raw) in text.lines().enumerate() {
        let line = ln + 1;
        let t = raw.trim();
        if t.is_empty() || t.starts_with('\\') {
            continue;
        }
        match t {
            "Minimize" => {
                sec = Sec::Obj;
                continue;
            }
            "Subject To" => {
                sec = Sec::Rows;
                continue;
            }
            "Bounds" => {
                sec = Sec::Bounds;
                continue;
            }
            "Binaries" => {
                sec = Sec::Bins;
                continue;
            }
            "End" => {
                sec = Sec::End;
                continue;
            }
            _ => {}
        }
        let toks: Vec<&str> = t.split_whitespace().collect();
        match sec {
            Sec::Head => return Err(perr(line, "content before `Minimize`")),
            Sec::End => return Err(perr(line, "content after `End`")),
            Sec::Obj => {
                if objective.is_some() {
                    return Err(perr(line, "objective given twice"));
                }
                let body = toks.strip_prefix(&["obj:"]).unwrap_or(&toks);
                objective = Some((parse_terms(body, line)?, line));
            }
            Sec::Rows => {
                let name = toks[0]
                    .strip_suffix(':')
                    .ok_or_else(|| perr(line, "row must start with `name:`"))?
                    .to_string();
                if toks.len() < 3 {
                    return Err(perr(line, "row lacks a relation"));
                }
                let rel = match toks[toks.len() - 2] {
                    "<=" => Relation::Le,
                    ">=" => Relation::Ge,
                    "=" => Relation::Eq,
                    other => return Err(perr(line, format!("unknown relation `{other}`"))),
                };
                let rhs = number(toks[toks.len() - 1], line)?;
                let e = parse_terms(&toks[1..toks.len() - 2], line)?;
                if e.constant != 0.0 {
                    return Err(perr(line, "constants belong on the right-hand side"));
                }
                rows.push((name, e, rel, rhs, line));
            }
            Sec::Bounds => {
                if toks.len() != 5 || toks[1] != "<=" || toks[3] != "<=" {
                    return Err(perr(line, "bounds must read `lo <= name <= hi`"));
                }
                let name = toks[2].to_string();
                if index.insert(name.clone(), variables.len()).is_some() {
                    return Err(perr(line, format!("variable `{name}` declared twice")));
                }
                variables.push(Variable {
                    name,
                    kind: VarKind::Continuous,
                    lower: number(toks[0], line)?,
                    upper: number(toks[4], line)?,
                });
            }
            Sec::Bins => {
                for &name in &toks {
                    match index.get(name) {
                        Some(&v) if variables[v].kind == VarKind::Binary => {
                            return Err(perr(line, format!("binary `{name}` listed twice")));
                        }
                        Some(&v) => {
                            let var = &mut variables[v];
                            if var.lower < 0.0 || var.upper > 1.0 {
                                return Err(perr(line, format!("binary `{name}` has bounds wider than [0, 1]")));
                            }
                            var.kind = VarKind::Binary;
                        }
                        None => {
                            index.insert(name.to_string(), variables.len());
                            variables.push(Variable {
                                name: name.to_string(),
                                kind: VarKind::Binary,
                                lower: 0.0,
                                upper: 1.0,
                            });
                        }
                    }
                }
            }
        }
    }
    if sec != Sec::End {
        return Err(perr(text.lines().count(), "missing `End`"));
    }
    let (obj, obj_line) = objective.ok_or_else(|| perr(0, "missing objective"))?;

    let resolve = |e: RawExpr, line: usize| -> Result<Expr> {
        let look = |n: &str| {
            index
                .get(n)
                .copied()
                .ok_or_else(|| perr(line, format!("dangling reference to `{n}`")))
        };
        let mut out = Expr::default();
        for (n, c) in e.linear {
            out.linear.push((look(&n)?, c));
        }
        for (a, b, c) in e.quadratic {
            let (ia, ib) = (look(&a)?, look(&b)?);
            for (v, n) in [(ia, &a), (ib, &b)] {
                if variables[v].kind == VarKind::Binary {
                    return Err(perr(line, format!("binary `{n}` inside a quadratic term")));
                }
            }
            out.quadratic.push((ia, ib, c));
        }
        Ok(out)
    };
    let objective_constant = obj.constant;
    let objective = resolve(obj, obj_line)?;
    let rows = rows
        .into_iter()
        .map(|(name, e, relation, rhs, line)| {
            Ok(Row {
                name,
                expr: resolve(e, line)?,
                relation,
                rhs,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ParsedProblem {
        variables,
        objective,
        objective_constant,
        rows,
    })
}

pub fn write_solution(p: &MiqcqpProblem, values: &[f64]) -> Result<String> {
    if values.len() != p.variables.len() {
        return Err(Error::Dimension(format!(
            "{} values for {} variables",
            values.len(),
            p.variables.len()
        )));
    }
    let mut out = String::new();
    for (v, x) in p.variables.iter().zip(values) {
        let _ = writeln!(out, "{} {x}", v.name);
    }
    Ok(out)
}

/// External solution mapped back onto the problem.
#[derive(Debug, Clone)]
pub struct ImportedSolution {
    /// Values in the problem's variable order.
    pub values: Vec<f64>,
    pub plan: ControlPlan,
    /// Constraint residuals of the inputs under the controller model.
    pub residuals: ResidualReport,
    /// Largest scaled row violation of the file's own values.
    pub row_violation: f64,
    pub bound_violation: f64,
}

/// Reads a solution file. Every input variable must be present; auxiliary
/// variables left out are completed from the inputs.
pub fn import_solution(p: &MiqcqpProblem, text: &str) -> Result<ImportedSolution> {
    let mut given: Vec<Option<f64>> = vec![None; p.variables.len()];
    for (ln, raw) in text.lines().enumerate() {
        let line = ln + 1;
        let t = raw.split('#').next().unwrap_or("").trim();
        if t.is_empty() {
            continue;
        }
        let mut it = t.split_whitespace();
        let (Some(name), Some(val), None) = (it.next(), it.next(), it.next()) else {
            return Err(perr(line, "expected `name value`"));
        };
        let v = p
            .variable_index(name)
            .ok_or_else(|| perr(line, format!("unknown variable `{name}`")))?;
        if given[v].is_some() {
            return Err(perr(line, format!("`{name}` given twice")));
        }
        given[v] = Some(number(val, line)?);
    }
    let mut inputs = Vec::with_capacity(p.n_inputs());
    for v in 0..p.n_inputs() {
        inputs.push(given[v].ok_or_else(|| Error::MissingVariable(p.variables[v].name.clone()))?);
    }
    let completed = complete_point(p, &inputs)?;
    let values: Vec<f64> = given.iter().zip(&completed).map(|(g, c)| g.unwrap_or(*c)).collect();
    let (row_violation, bound_violation) = p.max_violation(&values);
    let stats = SolverStats {
        status: SolveStatus::Converged,
        iterations: 0,
        start_iterations: Vec::new(),
        restarts: 0,
        best_start: 0,
        warm_started: false,
        max_violation: row_violation,
        wall_time: 0.0,
    };
    let plan = ControlPlan::from_vector(p.base(), &inputs, stats)?;
    let residuals = check_plan(p.base(), &plan)?;
    Ok(ImportedSolution {
        values,
        plan,
        residuals,
        row_violation,
        bound_violation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approximation::{build_pwa_erf, SurrogateSet};
    use crate::optimizer::{assemble_miqcqp, HorizonSettings};
    use crate::rotor_power::FarmModel;
    use crate::transport::OpState;
    use crate::wake_model::{AmbientParams, TurbineParams};
    use std::f64::consts::FRAC_PI_6;

    fn problem() -> MiqcqpProblem {
        let model = FarmModel::case_study(TurbineParams::default(), AmbientParams::default()).unwrap();
        let sur = SurrogateSet::fit(&model, (41, 41)).unwrap();
        let pwa = build_pwa_erf(16, (-3.0, 3.0)).unwrap();
        let states = vec![OpState::uniform(8, 0.0, 0.2).unwrap(); 3];
        assemble_miqcqp(&model, &sur, &pwa, &states, &[0.0; 3], 6e6, &HorizonSettings::default()).unwrap()
    }

    #[test]
    fn export_parses_back_identically() {
        let p = problem();
        let text = export_problem(&p);
        assert_eq!(text, export_problem(&p));
        let parsed = parse_problem(&text).unwrap();
        assert_eq!(parsed.variables, p.variables);
        assert_eq!(parsed.rows, p.rows);
        assert_eq!(parsed.objective, p.objective);
        assert_eq!(parsed.objective_constant, p.objective_constant);
        assert_eq!(parsed.n_binaries(), 768);
        assert_eq!(parsed.max_degree(), 2);
    }

    #[test]
    fn dangling_reference_rejected() {
        let text = "Minimize\n obj: 1 x\nSubject To\n c1: 1 x + 2 y <= 3\nBounds\n 0 <= x <= 1\nEnd\n";
        let err = parse_problem(text).unwrap_err();
        assert!(
            err.to_string().contains("`y`") && err.to_string().contains("line 4"),
            "{err}"
        );
    }

    #[test]
    fn binary_in_quadratic_rejected() {
        let text = "Minimize\n obj: 1 x\nSubject To\n c1: [ 1 x * z ] <= 3\nBounds\n 0 <= x <= 1\nBinaries\n z\nEnd\n";
        assert!(parse_problem(text).unwrap_err().to_string().contains("binary"));
    }

    #[test]
    fn negative_terms_and_squares() {
        let text = "Minimize\n obj: - 2 x + [ 0.5 x ^ 2 - 1.5 x * y ] + 4\nSubject To\n c: - 1 x = -0.25\nBounds\n -inf <= x <= inf\n 0 <= y <= 1\nEnd\n";
        let p = parse_problem(text).unwrap();
        assert_eq!(p.objective.linear, vec![(0, -2.0)]);
        assert_eq!(p.objective.quadratic, vec![(0, 0, 0.5), (0, 1, -1.5)]);
        assert_eq!(p.objective_constant, 4.0);
        assert_eq!(p.rows[0].rhs, -0.25);
        assert_eq!(p.variables[0].lower, f64::NEG_INFINITY);
    }

    #[test]
    fn solution_round_trip_is_exact() {
        let p = problem();
        let inputs: Vec<f64> = (0..p.n_inputs())
            .map(|v| {
                if v % 2 == 0 {
                    0.01 * (v % 7) as f64
                } else {
                    0.2 + 1e-3 * v as f64
                }
            })
            .collect();
        let x = complete_point(&p, &inputs).unwrap();
        let text = write_solution(&p, &x).unwrap();
        let imp = import_solution(&p, &text).unwrap();
        assert!(imp.values.iter().zip(&x).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(imp.plan.to_vector(p.base()), inputs);
    }

    #[test]
    fn all_lower_bounds() {
        let p = problem();
        let lows: Vec<f64> = p.variables.iter().map(|v| v.lower).collect();
        let imp = import_solution(&p, &write_solution(&p, &lows).unwrap()).unwrap();
        for row in &imp.plan.inputs {
            for u in row {
                assert_eq!(u.u_a, 0.06);
                assert_eq!(u.u_gamma, -FRAC_PI_6);
            }
        }
        assert!(imp.residuals.yaw_rate > 0.4);
        assert!(imp.row_violation > 0.0);
    }

    #[test]
    fn missing_variable_named() {
        let p = problem();
        let x = complete_point(
            &p,
            &vec![0.2; p.n_inputs()]
                .iter()
                .enumerate()
                .map(|(v, &a)| if v % 2 == 0 { 0.0 } else { a })
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let text: String = write_solution(&p, &x)
            .unwrap()
            .lines()
            .filter(|l| !l.starts_with("u_a[2][5] "))
            .map(|l| format!("{l}\n"))
            .collect();
        match import_solution(&p, &text) {
            Err(Error::MissingVariable(name)) => assert_eq!(name, "u_a[2][5]"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
