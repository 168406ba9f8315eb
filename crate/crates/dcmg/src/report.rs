//! Text artifacts of a run: CSV renderings of trajectories, metrics, and
//! equilibria (12 significant digits, bit-reproducible), the human-readable
//! run report, and a generated matplotlib script with the run's constants
//! baked in. Everything renders to `String`; callers decide where it goes.
//!
//! Bus, line, and unit numbering is 1-based in all rendered output, to
//! match the config-file convention.

use nalgebra::DVector;

use crate::control::validate_gains;
use crate::equilibrium::{
    CertificateOutcome, ExistenceCertificate, PowerCondition, StabilityReport, StabilityVerdict,
};
use crate::microgrid::MicrogridSpec;
use crate::simulate::{MetricsSample, Trajectory};

/// Format with 12 significant digits, the precision all CSV output uses.
pub fn fmt_sig(x: f64) -> String {
    format!("{x:.11e}")
}

pub fn render_trajectory_csv(trajectory: &Trajectory) -> String {
    let first = &trajectory.samples[0].state;
    let (n, m) = (first.bus_count(), first.line_count());
    let mut out = String::from("t");
    for i in 1..=n {
        out.push_str(&format!(",V_{i}"));
    }
    for i in 1..=n {
        out.push_str(&format!(",It_{i}"));
    }
    for i in 1..=n {
        out.push_str(&format!(",v_{i}"));
    }
    for l in 1..=m {
        out.push_str(&format!(",I_{l}"));
    }
    for i in 1..=n {
        out.push_str(&format!(",Omega_{i}"));
    }
    out.push('\n');
    for sample in &trajectory.samples {
        out.push_str(&fmt_sig(sample.time));
        for value in sample.state.to_vector().iter() {
            out.push(',');
            out.push_str(&fmt_sig(*value));
        }
        out.push('\n');
    }
    out
}

pub fn render_metrics_csv(metrics: &[MetricsSample]) -> String {
    let mut out = String::from("t,sharing_error,balancing_error,band_violation\n");
    for m in metrics {
        out.push_str(&format!(
            "{},{},{},{}\n",
            fmt_sig(m.time),
            fmt_sig(m.sharing_error),
            fmt_sig(m.balancing_error),
            fmt_sig(m.band_violation)
        ));
    }
    out
}

/// Long-format equilibrium table: one row per state component.
pub fn render_equilibrium_csv(
    voltage: &DVector<f64>,
    filter_current: &DVector<f64>,
    integrator: &DVector<f64>,
    line_current: &DVector<f64>,
    consensus: &DVector<f64>,
) -> String {
    let mut out = String::from("quantity,index,value\n");
    let mut block = |name: &str, values: &DVector<f64>| {
        for (i, v) in values.iter().enumerate() {
            out.push_str(&format!("{name},{},{}\n", i + 1, fmt_sig(*v)));
        }
    };
    block("voltage", voltage);
    block("filter_current", filter_current);
    block("integrator", integrator);
    block("line_current", line_current);
    block("consensus", consensus);
    out
}

/// Per-unit gain check. The flag is true when every unit is inside the
/// stability region with the consensus gain coupled.
pub fn render_gain_section(spec: &MicrogridSpec) -> (String, bool) {
    let mut out = String::from("controller gains\n");
    let mut all_ok = true;
    for (i, dgu) in spec.dgus.iter().enumerate() {
        let verdict = validate_gains(&dgu.gains, &dgu.params);
        if verdict.guaranteed() {
            out.push_str(&format!("  unit {}: inside the stability region\n", i + 1));
        } else {
            all_ok = false;
            if verdict.stabilizing() {
                out.push_str(&format!(
                    "  unit {}: stability region ok, but k4 = {} is not coupled to k1 = {} (no sharing guarantee)\n",
                    i + 1,
                    dgu.gains.k4,
                    dgu.gains.k1
                ));
            } else {
                out.push_str(&format!("  unit {}: OUTSIDE the stability region\n", i + 1));
                for violation in &verdict.violations {
                    out.push_str(&format!("    - {violation}\n"));
                }
            }
        }
    }
    (out, all_ok)
}

pub fn render_certificate_section(cert: &ExistenceCertificate) -> String {
    let mut out = String::from("existence certificate\n");
    out.push_str(&format!(
        "  nominal voltage: min {:.6} V, max {:.6} V (residual {:.3e})\n",
        cert.nominal.min(),
        cert.nominal.max(),
        cert.nominal_residual
    ));
    out.push_str(&format!("  power perturbation delta = {:.6}\n", cert.delta));
    match cert.outcome {
        CertificateOutcome::Exists { delta_minus, delta_plus } => {
            out.push_str(&format!(
                "  certified: unique solution within {:.3}% of nominal (delta- = {:.6}, delta+ = {:.6})\n",
                100.0 * delta_minus,
                delta_minus,
                delta_plus
            ));
        }
        CertificateOutcome::NoCertificate => {
            out.push_str("  NOT certified: delta exceeds 1, no solution guarantee\n");
        }
    }
    out
}

pub fn render_power_section(condition: &PowerCondition) -> String {
    let mut out = String::from("decentralized power condition\n");
    if condition.satisfied {
        out.push_str(&format!(
            "  satisfied at every bus (smallest margin {:.3} W)\n",
            condition.margins.min()
        ));
    } else {
        for (i, &margin) in condition.margins.iter().enumerate() {
            if margin <= 0.0 {
                out.push_str(&format!("  bus {}: VIOLATED, margin {:.3} W\n", i + 1, margin));
            }
        }
    }
    out
}

pub fn render_stability_section(report: &StabilityReport) -> String {
    let mut out = String::from("linearized spectrum\n");
    let verdict = match report.verdict {
        StabilityVerdict::Stable => "stable (one structural zero mode, rest strictly left)",
        StabilityVerdict::Unstable => "UNSTABLE (eigenvalue in the right half plane)",
        StabilityVerdict::Indeterminate if report.eigenvalues.is_empty() => {
            "indeterminate (eigenvalue iteration did not converge)"
        }
        StabilityVerdict::Indeterminate => "indeterminate (modes too close to the axis)",
    };
    out.push_str(&format!("  verdict: {verdict}\n"));
    out.push_str(&format!(
        "  zero modes: {} (structural residual {:.3e})\n",
        report.zero_mode_count, report.structural_residual
    ));
    let rightmost = report
        .eigenvalues
        .iter()
        .filter(|e| e.norm() > report.tolerance)
        .map(|e| e.re)
        .fold(f64::NEG_INFINITY, f64::max);
    if rightmost.is_finite() {
        out.push_str(&format!("  slowest nonzero mode: Re = {rightmost:.4} 1/s\n"));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunVerdict {
    Converged,
    VoltageCollapse { bus: usize, time: f64 },
    NotSettled { max_rate: f64, threshold: f64 },
}

impl std::fmt::Display for RunVerdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunVerdict::Converged => write!(f, "converged to a settled operating point"),
            RunVerdict::VoltageCollapse { bus, time } => {
                write!(f, "voltage collapse at bus {} (t = {:.6} s)", bus + 1, time)
            }
            RunVerdict::NotSettled { max_rate, threshold } => write!(
                f,
                "did not settle: derivative scale {max_rate:.3e} exceeds {threshold:.3e} over the final window"
            ),
        }
    }
}

pub struct ReportInputs<'a> {
    pub config_name: &'a str,
    pub spec: &'a MicrogridSpec,
    pub certificate: Option<&'a ExistenceCertificate>,
    pub power: Option<&'a PowerCondition>,
    /// Predicted equilibrium voltages, when a certified solve succeeded.
    pub predicted: Option<&'a DVector<f64>>,
    pub verdict: &'a RunVerdict,
    pub final_metrics: Option<&'a MetricsSample>,
    pub final_time: f64,
}

pub fn render_run_report(inputs: &ReportInputs) -> String {
    let mut out = format!(
        "dcmg run report: {}\nbuses: {}, lines: {}\n\n",
        inputs.config_name,
        inputs.spec.bus_count(),
        inputs.spec.line_count()
    );

    let (gains, _) = render_gain_section(inputs.spec);
    out.push_str(&gains);
    out.push('\n');

    match inputs.certificate {
        Some(cert) => out.push_str(&render_certificate_section(cert)),
        None => out.push_str("existence certificate\n  not computed\n"),
    }
    out.push('\n');

    if let Some(power) = inputs.power {
        out.push_str(&render_power_section(power));
        out.push('\n');
    }

    if let Some(predicted) = inputs.predicted {
        out.push_str("predicted equilibrium voltage\n");
        for (i, v) in predicted.iter().enumerate() {
            out.push_str(&format!("  bus {}: {} V\n", i + 1, fmt_sig(*v)));
        }
        out.push('\n');
    }

    out.push_str(&format!(
        "outcome\n  {} (final time {:.6} s)\n",
        inputs.verdict, inputs.final_time
    ));
    if let Some(m) = inputs.final_metrics {
        out.push_str(&format!(
            "  final sharing spread: {}\n  final balancing defect: {}\n",
            fmt_sig(m.sharing_error),
            fmt_sig(m.balancing_error)
        ));
        if m.band_violation.is_finite() {
            out.push_str(&format!(
                "  final band violation: {}\n",
                fmt_sig(m.band_violation)
            ));
        }
    }
    out.push_str("\nfiles\n  trajectory.csv  metrics.csv  plot.py\n");
    out
}

/// A standalone matplotlib script for the run directory. Ratings and the
/// certified voltage band are baked in as constants so the script needs
/// nothing but the two CSV files beside it.
pub fn render_plot_script(spec: &MicrogridSpec, band: Option<(f64, f64)>) -> String {
    let ratings: Vec<String> = spec.ratings().iter().map(|s| format!("{s:?}")).collect();
    let band_line = match band {
        Some((low, high)) => format!("BAND = ({low:?}, {high:?})"),
        None => "BAND = None".to_string(),
    };
    let n = spec.bus_count();

    format!(
        r#"#!/usr/bin/env python3
"""Plot a dcmg run: bus voltages, rating-normalized injections, error metrics."""
import csv
import os.path
import sys

HERE = os.path.dirname(os.path.abspath(__file__))
N = {n}
RATINGS = [{ratings}]
{band_line}


def read(name):
    with open(os.path.join(HERE, name), newline="") as fh:
        rows = list(csv.reader(fh))
    head, data = rows[0], rows[1:]
    return {{h: [float(r[i]) for r in data] for i, h in enumerate(head)}}


try:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
except ImportError:
    sys.exit("matplotlib is required to plot this run")

tr = read("trajectory.csv")
mt = read("metrics.csv")
t = tr["t"]

fig, axes = plt.subplots(3, 1, figsize=(9, 10), sharex=True)

ax = axes[0]
for i in range(1, N + 1):
    ax.plot(t, tr[f"V_{{i}}"], label=f"bus {{i}}")
if BAND is not None:
    ax.axhline(BAND[0], ls="--", lw=0.8, color="gray")
    ax.axhline(BAND[1], ls="--", lw=0.8, color="gray")
ax.set_ylabel("bus voltage [V]")
ax.legend(ncol=3, fontsize=8)

ax = axes[1]
for i in range(1, N + 1):
    ax.plot(t, [x / RATINGS[i - 1] for x in tr[f"It_{{i}}"]], label=f"unit {{i}}")
ax.set_ylabel("injection / rating")
ax.legend(ncol=3, fontsize=8)

ax = axes[2]
floor = 1e-16
ax.semilogy(mt["t"], [max(x, floor) for x in mt["sharing_error"]], label="sharing spread")
ax.semilogy(mt["t"], [max(x, floor) for x in mt["balancing_error"]], label="balancing defect")
ax.set_ylabel("error")
ax.set_xlabel("time [s]")
ax.legend(fontsize=8)

fig.tight_layout()
out = os.path.join(HERE, "run.png")
fig.savefig(out, dpi=150)
print(out)
"#,
        n = n,
        ratings = ratings.join(", "),
        band_line = band_line,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::GlobalState;
    use crate::simulate::{Sample, TrajectoryOutcome};

    fn tiny_trajectory() -> Trajectory {
        let mut state = GlobalState::zeros(2, 1);
        state.voltage[0] = 50.0;
        state.voltage[1] = 1.0 / 3.0;
        Trajectory {
            samples: vec![
                Sample {
                    time: 0.0,
                    state: state.clone(),
                    v_ref: DVector::from_element(2, 50.0),
                    rhs_norm: 0.0,
                },
                Sample {
                    time: 0.5,
                    state,
                    v_ref: DVector::from_element(2, 50.0),
                    rhs_norm: 0.0,
                },
            ],
            outcome: TrajectoryOutcome::Completed,
        }
    }

    #[test]
    fn twelve_significant_digits() {
        assert_eq!(fmt_sig(1.0 / 3.0), "3.33333333333e-1");
        assert_eq!(fmt_sig(50.0), "5.00000000000e1");
        assert_eq!(fmt_sig(0.0), "0.00000000000e0");
        assert_eq!(fmt_sig(-2.5e-7), "-2.50000000000e-7");
    }

    #[test]
    fn trajectory_header_matches_the_state_layout() {
        let csv = render_trajectory_csv(&tiny_trajectory());
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "t,V_1,V_2,It_1,It_2,v_1,v_2,I_1,Omega_1,Omega_2"
        );
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row.len(), 1 + 4 * 2 + 1);
        assert_eq!(row[0], "0.00000000000e0");
        assert_eq!(row[1], "5.00000000000e1");
        assert_eq!(row[2], "3.33333333333e-1");
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn rendering_is_deterministic() {
        let traj = tiny_trajectory();
        assert_eq!(render_trajectory_csv(&traj), render_trajectory_csv(&traj));
    }

    #[test]
    fn metrics_csv_keeps_nan_for_uncertified_runs() {
        let metrics = vec![MetricsSample {
            time: 0.0,
            sharing_error: 1e-7,
            balancing_error: 2e-5,
            band_violation: f64::NAN,
        }];
        let csv = render_metrics_csv(&metrics);
        assert_eq!(csv.lines().next().unwrap(), "t,sharing_error,balancing_error,band_violation");
        assert!(csv.lines().nth(1).unwrap().ends_with(",NaN"));
    }

    #[test]
    fn equilibrium_csv_is_long_format_one_based() {
        let csv = render_equilibrium_csv(
            &DVector::from_vec(vec![50.0, 49.9]),
            &DVector::from_vec(vec![1.0, 1.5]),
            &DVector::from_vec(vec![0.1, 0.2]),
            &DVector::from_vec(vec![0.3]),
            &DVector::from_vec(vec![0.0, 0.0]),
        );
        assert_eq!(csv.lines().count(), 1 + 2 + 2 + 2 + 1 + 2);
        assert!(csv.contains("voltage,1,5.00000000000e1"));
        assert!(csv.contains("line_current,1,3.00000000000e-1"));
        assert!(csv.contains("consensus,2,0.00000000000e0"));
    }

    #[test]
    fn verdict_lines_read_one_based() {
        assert_eq!(
            RunVerdict::VoltageCollapse { bus: 2, time: 1.25 }.to_string(),
            "voltage collapse at bus 3 (t = 1.250000 s)"
        );
        assert!(RunVerdict::Converged.to_string().contains("converged"));
    }
}
