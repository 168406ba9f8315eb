//! Command-line interface.
//!
//! Exit codes are stable and scriptable:
//! - 0: success (for `run`: the scenario settled)
//! - 1: configuration or I/O error
//! - 2: analysis rejection (gains outside the stability region, no
//!   existence certificate, unstable equilibrium, unusable start state)
//! - 3: voltage collapse during a run
//! - 4: the scenario ran but did not settle, or integration diverged
//!
//! `DCMG_LOG` controls log verbosity (`error`..`trace`).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Parser, Subcommand};
use log::{debug, info};

use crate::config;
use crate::equilibrium::{
    build_flow_system, certificate, complete_equilibrium, linearized_stability, power_condition,
    solve_voltage, ExistenceCertificate, StabilityVerdict,
};
use crate::microgrid::MicrogridSpec;
use crate::report::{
    render_certificate_section, render_equilibrium_csv, render_gain_section, render_metrics_csv,
    render_plot_script, render_power_section, render_run_report, render_stability_section,
    render_trajectory_csv, fmt_sig, ReportInputs, RunVerdict,
};
use crate::simulate::{compute_metrics, run_scenario, steady_state_of, SimError, TrajectoryOutcome};

#[derive(Parser)]
#[command(
    name = "dcmg",
    version,
    about = "Analyze and simulate islanded DC microgrids under consensus-based secondary control"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a config: gains, existence certificate, power condition,
    /// and stability of the predicted operating point.
    Check { config: PathBuf },
    /// Solve for the certified equilibrium and write it as CSV.
    Solve {
        config: PathBuf,
        /// Output CSV path.
        #[arg(short, long, default_value = "equilibrium.csv")]
        output: PathBuf,
    },
    /// Simulate the configured scenario and write run artifacts.
    Run {
        config: PathBuf,
        /// Directory for trajectory.csv, metrics.csv, report.txt, plot.py.
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Run several configs (glob patterns allowed), one subdirectory each.
    Sweep {
        /// Config paths or glob patterns.
        #[arg(required = true)]
        patterns: Vec<String>,
        /// Parent directory for the per-config run directories.
        #[arg(short, long, default_value = "sweep")]
        output: PathBuf,
        /// Worker threads.
        #[arg(short, long, default_value_t = 1)]
        jobs: usize,
    },
}

/// Parse arguments and dispatch; returns the process exit code.
pub fn run() -> i32 {
    match Cli::parse().command {
        Command::Check { config } => cmd_check(&config),
        Command::Solve { config, output } => cmd_solve(&config, &output),
        Command::Run { config, output } => cmd_run(&config, &output),
        Command::Sweep { patterns, output, jobs } => cmd_sweep(&patterns, &output, jobs),
    }
}

fn load_spec(path: &Path) -> Result<MicrogridSpec, i32> {
    match config::load(path) {
        Ok(spec) => {
            info!(
                "{}: {} buses, {} lines, {} events",
                path.display(),
                spec.bus_count(),
                spec.line_count(),
                spec.events.len()
            );
            Ok(spec)
        }
        Err(e) => {
            eprintln!("{}: {e}", path.display());
            Err(1)
        }
    }
}

fn cmd_check(path: &Path) -> i32 {
    let spec = match load_spec(path) {
        Ok(s) => s,
        Err(code) => return code,
    };
    println!(
        "{}: {} buses, {} lines",
        path.display(),
        spec.bus_count(),
        spec.line_count()
    );

    let (gain_text, gains_ok) = render_gain_section(&spec);
    print!("{gain_text}");
    let mut code = if gains_ok { 0 } else { 2 };

    let sys = match build_flow_system(&spec) {
        Ok(sys) => sys,
        Err(e) => {
            eprintln!("{e}");
            return 2;
        }
    };
    let p = spec.load_powers();
    let cert = match certificate(&sys, &p) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return 2;
        }
    };
    print!("{}", render_certificate_section(&cert));

    let mut voltage = cert.nominal.clone();
    if cert.exists() {
        match solve_voltage(&sys, &p, &cert, spec.solver.residual_tol) {
            Ok(sol) => {
                voltage = sol.voltage.clone();
                match complete_equilibrium(&spec, &sol.voltage, 0.0) {
                    Ok(eq) => {
                        let stability = linearized_stability(&spec, &eq);
                        print!("{}", render_stability_section(&stability));
                        if stability.verdict == StabilityVerdict::Unstable {
                            code = 2;
                        }
                    }
                    Err(e) => {
                        eprintln!("cannot complete the equilibrium: {e}");
                        code = 2;
                    }
                }
            }
            Err(e) => {
                eprintln!("equilibrium solve failed: {e}");
                code = 2;
            }
        }
    } else {
        code = 2;
    }
    print!("{}", render_power_section(&power_condition(&spec, &voltage)));

    println!("{}", if code == 0 { "check: ok" } else { "check: rejected" });
    code
}

fn cmd_solve(path: &Path, output: &Path) -> i32 {
    let spec = match load_spec(path) {
        Ok(s) => s,
        Err(code) => return code,
    };
    let sys = match build_flow_system(&spec) {
        Ok(sys) => sys,
        Err(e) => {
            eprintln!("{e}");
            return 2;
        }
    };
    let p = spec.load_powers();
    let cert = match certificate(&sys, &p) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return 2;
        }
    };
    if !cert.exists() {
        eprint!("{}", render_certificate_section(&cert));
        eprintln!("cannot solve without an existence certificate");
        return 2;
    }
    let sol = match solve_voltage(&sys, &p, &cert, spec.solver.residual_tol) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("equilibrium solve failed: {e}");
            return 2;
        }
    };
    // The free uniform consensus mode is pinned to a zero sum, matching a
    // scenario that starts with all consensus integrators at zero.
    let eq = match complete_equilibrium(&spec, &sol.voltage, 0.0) {
        Ok(eq) => eq,
        Err(e) => {
            eprintln!("cannot complete the equilibrium: {e}");
            return 2;
        }
    };

    println!(
        "solved in {} fixed-point iterations (contraction <= {:.3})",
        sol.iterations, sol.max_increment_ratio
    );
    println!("shared injection level: {} A per unit rating", fmt_sig(eq.epsilon));
    for i in 0..spec.bus_count() {
        println!(
            "  bus {}: V = {} V, injection = {} A",
            i + 1,
            fmt_sig(eq.voltage[i]),
            fmt_sig(eq.filter_current[i])
        );
    }

    let csv = render_equilibrium_csv(
        &eq.voltage,
        &eq.filter_current,
        &eq.integrator,
        &eq.line_current,
        &eq.consensus,
    );
    if let Err(e) = fs::write(output, csv) {
        eprintln!("{}: {e}", output.display());
        return 1;
    }
    println!("wrote {}", output.display());
    0
}

/// Run one config into a directory. Returns the exit code and a one-line
/// outcome summary; prints nothing (the callers decide how to report).
fn execute_run(path: &Path, out_dir: &Path) -> (i32, String) {
    let spec = match config::load(path) {
        Ok(s) => s,
        Err(e) => return (1, format!("config error: {e}")),
    };
    if let Err(e) = fs::create_dir_all(out_dir) {
        return (1, format!("cannot create {}: {e}", out_dir.display()));
    }

    // The certificate is advisory for a run: scenarios past the existence
    // limit are exactly the ones worth simulating, so its absence only
    // blanks the band metrics in the report.
    let p = spec.load_powers();
    let analysis = build_flow_system(&spec)
        .ok()
        .and_then(|sys| certificate(&sys, &p).ok().map(|cert| (sys, cert)));
    let (predicted, cert): (Option<_>, Option<ExistenceCertificate>) = match analysis {
        Some((sys, cert)) if cert.exists() => (
            solve_voltage(&sys, &p, &cert, spec.solver.residual_tol)
                .ok()
                .map(|sol| sol.voltage),
            Some(cert),
        ),
        Some((_, cert)) => (None, Some(cert)),
        None => (None, None),
    };

    debug!("{}: integrating to t = {} s", path.display(), spec.solver.t_end);
    let trajectory = match run_scenario(&spec) {
        Ok(t) => t,
        Err(SimError::NonFiniteState { time }) => {
            return (4, format!("integration diverged at t = {time:.6} s"))
        }
        Err(e) => return (2, format!("cannot run: {e}")),
    };

    let (verdict, code) = match &trajectory.outcome {
        TrajectoryOutcome::VoltageCollapse { bus, time, .. } => {
            (RunVerdict::VoltageCollapse { bus: *bus, time: *time }, 3)
        }
        TrajectoryOutcome::Completed => {
            let span = trajectory.final_time() - trajectory.samples[0].time;
            // An oversized settling window is clamped rather than refused,
            // so short exploratory runs still produce a verdict.
            let window = spec.solver.settle_window.min(0.5 * span);
            match steady_state_of(&trajectory, window, spec.solver.settle_tol) {
                Ok(_) => (RunVerdict::Converged, 0),
                Err(SimError::NotSettled { max_rate, threshold }) => {
                    (RunVerdict::NotSettled { max_rate, threshold }, 4)
                }
                Err(e) => return (4, format!("settling check failed: {e}")),
            }
        }
    };

    let metrics = compute_metrics(&trajectory, &spec, cert.as_ref());
    let power = predicted
        .as_ref()
        .or(cert.as_ref().map(|c| &c.nominal))
        .map(|v| power_condition(&spec, v));

    let config_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    let report = render_run_report(&ReportInputs {
        config_name: &config_name,
        spec: &spec,
        certificate: cert.as_ref(),
        power: power.as_ref(),
        predicted: predicted.as_ref(),
        verdict: &verdict,
        final_metrics: metrics.last(),
        final_time: trajectory.final_time(),
    });

    let band = cert
        .as_ref()
        .and_then(|c| c.band())
        .map(|(low, high)| (low.min(), high.max()));
    let writes = [
        ("trajectory.csv", render_trajectory_csv(&trajectory)),
        ("metrics.csv", render_metrics_csv(&metrics)),
        ("report.txt", report),
        ("plot.py", render_plot_script(&spec, band)),
    ];
    for (name, content) in writes {
        if let Err(e) = fs::write(out_dir.join(name), content) {
            return (1, format!("cannot write {name}: {e}"));
        }
    }

    (code, verdict.to_string())
}

fn cmd_run(path: &Path, out_dir: &Path) -> i32 {
    let (code, summary) = execute_run(path, out_dir);
    if code == 1 {
        eprintln!("{}: {summary}", path.display());
    } else {
        println!("{}: {summary}", path.display());
        println!("artifacts in {}", out_dir.display());
    }
    code
}

/// Directory names for sweep outputs: file stems, deduplicated by suffix.
fn unique_names(paths: &[PathBuf]) -> Vec<String> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut names = Vec::with_capacity(paths.len());
    for path in paths {
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "config".to_string());
        let seen = counts.entry(stem.clone()).or_insert(0);
        *seen += 1;
        if *seen == 1 {
            names.push(stem);
        } else {
            names.push(format!("{stem}_{seen}"));
        }
    }
    names
}

fn expand_patterns(patterns: &[String]) -> Result<Vec<PathBuf>, i32> {
    let mut configs: Vec<PathBuf> = Vec::new();
    for pattern in patterns {
        let paths = match glob::glob(pattern) {
            Ok(paths) => paths,
            Err(e) => {
                eprintln!("bad pattern {pattern}: {e}");
                return Err(1);
            }
        };
        let mut found = false;
        for entry in paths {
            match entry {
                Ok(path) => {
                    configs.push(path);
                    found = true;
                }
                Err(e) => eprintln!("{pattern}: {e}"),
            }
        }
        if !found {
            eprintln!("no configs match {pattern}");
        }
    }
    configs.sort();
    configs.dedup();
    if configs.is_empty() {
        eprintln!("nothing to sweep");
        return Err(1);
    }
    Ok(configs)
}

fn cmd_sweep(patterns: &[String], output: &Path, jobs: usize) -> i32 {
    let configs = match expand_patterns(patterns) {
        Ok(c) => c,
        Err(code) => return code,
    };
    let names = unique_names(&configs);
    info!("sweeping {} configs with {} workers", configs.len(), jobs.max(1));

    let results: Mutex<Vec<Option<(i32, String)>>> = Mutex::new(vec![None; configs.len()]);
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..jobs.max(1) {
            scope.spawn(|| loop {
                let index = next.fetch_add(1, Ordering::SeqCst);
                if index >= configs.len() {
                    break;
                }
                let outcome = execute_run(&configs[index], &output.join(&names[index]));
                results.lock().unwrap()[index] = Some(outcome);
            });
        }
    });

    let results = results.into_inner().unwrap();
    let mut worst = 0;
    for (config, result) in configs.iter().zip(&results) {
        let (code, summary) = result.as_ref().expect("every config ran");
        println!("{}: {summary} (exit {code})", config.display());
        worst = worst.max(*code);
    }
    println!("swept {} configs into {}", configs.len(), output.display());
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn parses_every_subcommand() {
        let cli = Cli::try_parse_from(["dcmg", "check", "net.cfg"]).unwrap();
        assert!(matches!(cli.command, Command::Check { .. }));

        let cli = Cli::try_parse_from(["dcmg", "solve", "net.cfg"]).unwrap();
        match cli.command {
            Command::Solve { output, .. } => assert_eq!(output, PathBuf::from("equilibrium.csv")),
            _ => panic!("expected solve"),
        }

        let cli = Cli::try_parse_from(["dcmg", "run", "net.cfg", "-o", "out"]).unwrap();
        match cli.command {
            Command::Run { output, .. } => assert_eq!(output, PathBuf::from("out")),
            _ => panic!("expected run"),
        }

        let cli =
            Cli::try_parse_from(["dcmg", "sweep", "a.cfg", "b*.cfg", "-j", "4"]).unwrap();
        match cli.command {
            Command::Sweep { patterns, jobs, output } => {
                assert_eq!(patterns, vec!["a.cfg".to_string(), "b*.cfg".to_string()]);
                assert_eq!(jobs, 4);
                assert_eq!(output, PathBuf::from("sweep"));
            }
            _ => panic!("expected sweep"),
        }

        // run requires the output directory; sweep requires patterns.
        assert!(Cli::try_parse_from(["dcmg", "run", "net.cfg"]).is_err());
        assert!(Cli::try_parse_from(["dcmg", "sweep"]).is_err());
    }

    #[test]
    fn sweep_directory_names_deduplicate_stems() {
        let paths = vec![
            PathBuf::from("configs/six_dgu.cfg"),
            PathBuf::from("other/six_dgu.cfg"),
            PathBuf::from("configs/collapse.cfg"),
        ];
        assert_eq!(unique_names(&paths), vec!["six_dgu", "six_dgu_2", "collapse"]);
    }
}
