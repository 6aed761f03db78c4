//! Finite-horizon power-tracking problem: the exact nonlinear form with an
//! in-repo solver, and the reformulated mixed-integer form for export.

mod check;
mod lpfile;
mod miqcqp;
mod problem;
mod projection;
mod solver;

pub use check::{check_plan, ResidualReport};
pub use lpfile::{export_problem, import_solution, parse_problem, write_solution, ImportedSolution, ParsedProblem};
pub use miqcqp::{assemble_miqcqp, complete_point, Expr, MiqcqpProblem, Relation, Row, VarKind, Variable};
pub use problem::{
    assemble_nonlinear, ControllerModel, HorizonSettings, InputLimits, ModelKind, Prediction, PredictionProblem,
    Weights,
};
pub use projection::project_yaw_chain;
pub use solver::{solve_nonlinear, ControlPlan, SolveStatus, SolverSettings, SolverStats};
