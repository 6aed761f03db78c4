use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use wake_mpc::approximation::SurrogateSet;
use wake_mpc::closed_loop::{run_loop, steady_optimum};
use wake_mpc::optimizer::{export_problem, import_solution};
use wake_mpc::scenario::load_scenario;
use wake_mpc::Error;

#[derive(Parser)]
#[command(name = "wake-mpc", version, about = "Wake-steering power tracking for wind farms")]
struct Cli {
    /// Log level (error, warn, info, debug).
    #[arg(long, global = true, default_value = "warn")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the closed loop and write the CSV log.
    Run {
        scenario: PathBuf,
        /// Overrides `run.output`.
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Fit the wake surrogates and print them as a `[surrogates]` section.
    Fit { scenario: PathBuf },
    /// Constant inputs that best meet each reference level in steady state.
    Steady {
        scenario: PathBuf,
        #[arg(long, default_value_t = 41)]
        grid: usize,
    },
    /// Write the mixed-integer reformulation at a given sample.
    Export {
        scenario: PathBuf,
        /// Closed-loop samples simulated before the problem is built.
        #[arg(long, default_value_t = 0)]
        step: usize,
        /// Destination file; stdout if absent.
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Check an external solution against the problem at a given sample.
    Check {
        scenario: PathBuf,
        solution: PathBuf,
        #[arg(long, default_value_t = 0)]
        step: usize,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new()
        .parse_filters(&cli.log)
        .format_timestamp(None)
        .init();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 1 } else { 2 })
        }
    }
}

fn dispatch(cmd: Command) -> wake_mpc::Result<()> {
    match cmd {
        Command::Run { scenario, output } => {
            let s = load_scenario(&scenario)?;
            let out = output.unwrap_or_else(|| s.run.output.clone());
            let cfg = s.loop_config()?;
            let p_r = cfg.model.turbine().p_rated;
            let (log, err) = match run_loop(&cfg) {
                Ok(log) => (log, None),
                Err((log, e)) => (log, Some(e)),
            };
            log.write_csv_file(&out)?;
            let sum = log.summary(p_r);
            println!("wrote {} rows to {}", sum.steps, out.display());
            println!("mean tracking error   {:.3} %", 100.0 * sum.mean_tracking_error);
            println!("max tracking error    {:.3} %", 100.0 * sum.max_tracking_error);
            println!("max solve time        {:.3} s", sum.max_solve_time);
            println!("max power spread      {:.0} W", sum.max_power_spread);
            println!("max rated overshoot   {:.3} %", 100.0 * sum.max_overshoot);
            println!("faults                {}", sum.faults);
            for (k, msg) in &log.faults {
                println!("  step {k}: {msg}");
            }
            match err {
                Some(e) => Err(e),
                None => Ok(()),
            }
        }
        Command::Fit { scenario } => {
            let s = load_scenario(&scenario)?;
            let model = s.farm()?;
            let g = s.controller.fit_grid;
            let set = SurrogateSet::fit(&model, (g, g))?;
            for p in &set.pairs {
                for sur in [&p.core_length, &p.centre_deficit, &p.deflection] {
                    eprintln!(
                        "pair ({}, {}) at {:.1} m  {:<15} max error {:.2} %",
                        p.upstream,
                        p.downstream,
                        p.x,
                        sur.kind.name(),
                        100.0 * sur.max_rel_error
                    );
                }
            }
            let text =
                toml::to_string(&SurrogatesOnly { surrogates: &set }).map_err(|e| Error::Config(e.to_string()))?;
            print!("{text}");
            Ok(())
        }
        Command::Steady { scenario, grid } => {
            let s = load_scenario(&scenario)?;
            let model = s.farm()?;
            let settings = s.horizon_settings()?;
            let mut levels: Vec<f64> = s.reference.steps.iter().map(|r| r.power).collect();
            levels.dedup();
            for p_ref in levels {
                let pt = steady_optimum(&model, p_ref, &settings, grid)?;
                let yaw: Vec<String> = pt
                    .inputs
                    .iter()
                    .map(|u| format!("{:.2}", u.u_gamma.to_degrees()))
                    .collect();
                let ind: Vec<String> = pt.inputs.iter().map(|u| format!("{:.3}", u.u_a)).collect();
                let pw: Vec<String> = pt
                    .report
                    .per_turbine
                    .iter()
                    .map(|p| format!("{:.3}", p / 1e6))
                    .collect();
                println!(
                    "Pref {:.3} MW  P {:.3} MW  P_i [{}] MW  yaw [{}] deg  a [{}]",
                    p_ref / 1e6,
                    pt.report.farm_total / 1e6,
                    pw.join(", "),
                    yaw.join(", "),
                    ind.join(", ")
                );
            }
            Ok(())
        }
        Command::Export { scenario, step, output } => {
            let s = load_scenario(&scenario)?;
            let (p, _) = s.miqcqp_at(step)?;
            let text = export_problem(&p);
            match output {
                Some(path) => {
                    std::fs::write(&path, text)?;
                    eprintln!(
                        "wrote {} variables ({} binaries), {} rows to {}",
                        p.variables.len(),
                        p.n_binaries(),
                        p.rows.len(),
                        path.display()
                    );
                }
                None => print!("{text}"),
            }
            Ok(())
        }
        Command::Check {
            scenario,
            solution,
            step,
        } => {
            let s = load_scenario(&scenario)?;
            let (p, _) = s.miqcqp_at(step)?;
            let text = std::fs::read_to_string(&solution)?;
            let imp = import_solution(&p, &text)?;
            let r = &imp.residuals;
            println!("induction box      {:.3e}", r.induction_box);
            println!("yaw box            {:.3e}", r.yaw_box);
            println!("yaw rate           {:.3e}", r.yaw_rate);
            println!("far wake           {:.3e}", r.far_wake);
            println!("rated power        {:.3e}", r.rated_power);
            println!("row violation      {:.3e}", imp.row_violation);
            println!("bound violation    {:.3e}", imp.bound_violation);
            for (i, u) in imp.plan.first_inputs().iter().enumerate() {
                println!(
                    "turbine {}  yaw {:.3} deg  a {:.4}",
                    i + 1,
                    u.u_gamma.to_degrees(),
                    u.u_a
                );
            }
            Ok(())
        }
    }
}

#[derive(serde::Serialize)]
struct SurrogatesOnly<'a> {
    surrogates: &'a SurrogateSet,
}
