//! Time-domain integration of the closed-loop microgrid with scenario
//! events, plus settling detection and the performance metrics the study
//! reports (current sharing, voltage balancing, certified-band violation).
//!
//! Integration is classic fixed-step fourth-order Runge-Kutta. Steps are
//! split at event timestamps so every event is applied exactly at its time;
//! between events the step is the configured `dt`, with one shortened step
//! to land on the next boundary. Everything is deterministic: identical
//! inputs produce bit-identical trajectories.

use nalgebra::DVector;
use thiserror::Error;

use crate::control::closed_loop_coefficients;
use crate::equilibrium::ExistenceCertificate;
use crate::microgrid::{MicrogridSpec, StartState};
use crate::plant::{
    assemble_with_mode, zip_current, GlobalState, PlantError, SystemMatrices, SystemMode, ZipLoad,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("trajectory has not settled: derivative scale {max_rate:e} exceeds {threshold:e} over the final window")]
    NotSettled { max_rate: f64, threshold: f64 },
    #[error("state became non-finite at t = {time} s (integration blew up)")]
    NonFiniteState { time: f64 },
    #[error("settling window {window} s does not fit inside the trajectory span {span} s")]
    WindowTooLong { window: f64, span: f64 },
    #[error("unit {bus}: k3 = 0 leaves the local equilibrium integrator undefined")]
    SingularIntegralGain { bus: usize },
    #[error(transparent)]
    Plant(#[from] PlantError),
}

/// Which lines a plug-in event energizes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LineSelection {
    All,
    /// Line indices (0-based).
    Lines(Vec<usize>),
}

/// A timed change to the running scenario.
#[derive(Debug, Clone, PartialEq)]
pub enum EventKind {
    /// Energize lines: newly-activated line currents start from zero, all
    /// other states are preserved.
    PlugIn { lines: LineSelection },
    /// Replace the ZIP load at one bus.
    LoadStep { bus: usize, load: ZipLoad },
    /// Communication failure: the consensus layer stops acting (omega = 0)
    /// and the consensus integrators freeze at their current values.
    CommCollapse,
    /// (Re)activate the consensus layer, resuming from the frozen
    /// integrator values.
    CommRestore,
    /// Change the voltage reference at one bus.
    SetReference { bus: usize, v_ref: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioEvent {
    /// Event time (second).
    pub time: f64,
    pub kind: EventKind,
}

/// One stored point of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub time: f64,
    pub state: GlobalState,
    /// Voltage references in force at this time (events may change them).
    pub v_ref: DVector<f64>,
    /// Infinity norm of the state derivative at this time.
    pub rhs_norm: f64,
}

/// How a run ended.
#[derive(Debug, Clone, PartialEq)]
pub enum TrajectoryOutcome {
    Completed,
    /// A bus voltage reached the collapse guard; the trajectory holds the
    /// samples up to that point.
    VoltageCollapse {
        bus: usize,
        time: f64,
        voltage: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub samples: Vec<Sample>,
    pub outcome: TrajectoryOutcome,
}

impl Trajectory {
    pub fn final_state(&self) -> &GlobalState {
        &self.samples.last().expect("trajectory has samples").state
    }

    pub fn final_time(&self) -> f64 {
        self.samples.last().expect("trajectory has samples").time
    }

    pub fn collapsed(&self) -> bool {
        matches!(self.outcome, TrajectoryOutcome::VoltageCollapse { .. })
    }
}

/// Performance metrics at one sample time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsSample {
    pub time: f64,
    /// Spread of rating-normalized filter currents,
    /// `max_ij |I_ti/I_t^s_i - I_tj/I_t^s_j|`.
    pub sharing_error: f64,
    /// `|1^T [I_t^s] (V - V_ref)|`, the weighted-balancing defect.
    pub balancing_error: f64,
    /// Largest componentwise distance of V outside the certified band; NaN
    /// when no certificate is available.
    pub band_violation: f64,
}

/// The state the scenario starts from, per the spec's start condition.
pub fn initial_state(spec: &MicrogridSpec) -> Result<GlobalState, SimError> {
    let (n, m) = (spec.bus_count(), spec.line_count());
    let mut state = GlobalState::zeros(n, m);
    match spec.start.state {
        StartState::Flat { voltage } => {
            state.voltage = DVector::from_element(n, voltage);
        }
        StartState::LocalEquilibrium => {
            for (i, dgu) in spec.dgus.iter().enumerate() {
                if dgu.gains.k3 == 0.0 {
                    return Err(SimError::SingularIntegralGain { bus: i });
                }
                let v = dgu.v_ref;
                let i_t = zip_current(&dgu.load, v, spec.solver.v_min)?;
                let coeff = closed_loop_coefficients(&dgu.gains, &dgu.params);
                state.voltage[i] = v;
                state.filter_current[i] = i_t;
                state.integrator[i] = -(coeff.alpha * v + coeff.beta * i_t) / coeff.gamma;
            }
        }
    }
    Ok(state)
}

/// One classic Runge-Kutta step of length `h`.
fn rk4_step(sys: &SystemMatrices, x: &DVector<f64>, h: f64) -> Result<DVector<f64>, PlantError> {
    let k1 = sys.full_rhs(x)?;
    let k2 = sys.full_rhs(&(x + (h / 2.0) * &k1))?;
    let k3 = sys.full_rhs(&(x + (h / 2.0) * &k2))?;
    let k4 = sys.full_rhs(&(x + h * &k3))?;
    Ok(x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4))
}

fn apply_event(work: &mut MicrogridSpec, mode: &mut SystemMode, x: &mut DVector<f64>, kind: &EventKind) {
    let n = work.bus_count();
    match kind {
        EventKind::PlugIn { lines } => {
            let targets: Vec<usize> = match lines {
                LineSelection::All => (0..work.line_count()).collect(),
                LineSelection::Lines(list) => list.clone(),
            };
            for l in targets {
                if !mode.active_lines[l] {
                    mode.active_lines[l] = true;
                    x[3 * n + l] = 0.0;
                }
            }
        }
        EventKind::LoadStep { bus, load } => work.dgus[*bus].load = *load,
        EventKind::CommCollapse => mode.secondary_active = false,
        EventKind::CommRestore => mode.secondary_active = true,
        EventKind::SetReference { bus, v_ref } => work.dgus[*bus].v_ref = *v_ref,
    }
}

/// Integrate the scenario from `initial` over `[solver.t_start, t_end]`.
///
/// Events are applied exactly at their timestamps; a topology or load event
/// reassembles the system matrices. A voltage reaching the collapse guard
/// ends the run early with [`TrajectoryOutcome::VoltageCollapse`] and the
/// trajectory collected so far.
pub fn integrate(
    spec: &MicrogridSpec,
    initial: &GlobalState,
    events: &[ScenarioEvent],
    t_end: f64,
    dt: f64,
) -> Result<Trajectory, SimError> {
    assert!(dt > 0.0, "step size must be positive");
    let (n, m) = (spec.bus_count(), spec.line_count());
    assert_eq!(initial.bus_count(), n);
    assert_eq!(initial.line_count(), m);

    let t_start = spec.solver.t_start;
    let mut work = spec.clone();
    let mut mode = spec.initial_mode();
    let mut x = initial.to_vector();

    // Events are applied in time order; anything at or before t_start takes
    // effect immediately.
    let mut pending: Vec<&ScenarioEvent> = events.iter().collect();
    pending.sort_by(|a, b| a.time.total_cmp(&b.time));
    let mut next_event = 0;
    while next_event < pending.len() && pending[next_event].time <= t_start {
        apply_event(&mut work, &mut mode, &mut x, &pending[next_event].kind);
        next_event += 1;
    }
    let mut sys = assemble_with_mode(&work, &mode);

    let mut samples: Vec<Sample> = Vec::new();
    let push_sample = |samples: &mut Vec<Sample>,
                           sys: &SystemMatrices,
                           work: &MicrogridSpec,
                           t: f64,
                           x: &DVector<f64>|
     -> Result<(), PlantError> {
        if samples.last().is_some_and(|s| s.time >= t) {
            return Ok(());
        }
        let rhs = sys.full_rhs(x)?;
        samples.push(Sample {
            time: t,
            state: GlobalState::from_vector(n, m, x),
            v_ref: work.v_refs(),
            rhs_norm: rhs.abs().max(),
        });
        Ok(())
    };

    push_sample(&mut samples, &sys, &work, t_start, &x)?;

    let mut t = t_start;
    let mut steps_since_sample = 0usize;
    'segments: loop {
        // Next boundary: the next event time inside the span, else t_end.
        let boundary = pending
            .get(next_event)
            .map(|e| e.time.min(t_end))
            .unwrap_or(t_end);

        // Fixed-dt grid over the segment, with one shortened step to land
        // exactly on the boundary. Times are computed as offsets from the
        // segment start so rounding does not accumulate; when the grid
        // already reaches the boundary, the last step's time is snapped
        // onto it so the boundary sample carries the exact event time.
        let span = boundary - t;
        let full_steps = (span / dt + 1e-9).floor() as usize;
        let segment_start = t;
        let tail = span - full_steps as f64 * dt;
        let snap_last = tail <= dt * 1e-9;
        for k in 0..full_steps {
            let step_result = rk4_step(&sys, &x, dt);
            let t_next = if k + 1 == full_steps && snap_last {
                boundary
            } else {
                segment_start + (k + 1) as f64 * dt
            };
            match step_result {
                Ok(next) => x = next,
                Err(PlantError::CollapsedBus { bus, voltage, .. }) => {
                    return Ok(Trajectory {
                        samples,
                        outcome: TrajectoryOutcome::VoltageCollapse {
                            bus,
                            time: t_next,
                            voltage,
                        },
                    });
                }
                Err(e) => return Err(e.into()),
            }
            t = t_next;
            if !x.iter().all(|v| v.is_finite()) {
                return Err(SimError::NonFiniteState { time: t });
            }
            if let Some((bus, &voltage)) = x
                .rows(0, n)
                .iter()
                .enumerate()
                .find(|(_, &v)| v <= sys.v_min)
            {
                push_sample(&mut samples, &sys, &work, t, &x).ok();
                return Ok(Trajectory {
                    samples,
                    outcome: TrajectoryOutcome::VoltageCollapse { bus, time: t, voltage },
                });
            }
            steps_since_sample += 1;
            // Boundary samples are pushed after events apply, so the
            // decimated push skips a step that landed on the boundary.
            if steps_since_sample >= spec.solver.sample_every && t < boundary {
                push_sample(&mut samples, &sys, &work, t, &x)?;
                steps_since_sample = 0;
            }
        }
        if !snap_last && tail > 0.0 {
            match rk4_step(&sys, &x, tail) {
                Ok(next) => x = next,
                Err(PlantError::CollapsedBus { bus, voltage, .. }) => {
                    return Ok(Trajectory {
                        samples,
                        outcome: TrajectoryOutcome::VoltageCollapse {
                            bus,
                            time: boundary,
                            voltage,
                        },
                    });
                }
                Err(e) => return Err(e.into()),
            }
        }
        t = boundary;

        if t >= t_end {
            push_sample(&mut samples, &sys, &work, t_end, &x)?;
            break 'segments;
        }

        // Apply every event scheduled for this boundary, then sample the
        // post-event regime (the state itself never jumps).
        let mut changed = false;
        while next_event < pending.len() && pending[next_event].time <= t {
            apply_event(&mut work, &mut mode, &mut x, &pending[next_event].kind);
            next_event += 1;
            changed = true;
        }
        if changed {
            sys = assemble_with_mode(&work, &mode);
        }
        push_sample(&mut samples, &sys, &work, t, &x)?;
        steps_since_sample = 0;
    }

    Ok(Trajectory {
        samples,
        outcome: TrajectoryOutcome::Completed,
    })
}

/// Run the spec's own scenario: its start condition, events, and time span.
pub fn run_scenario(spec: &MicrogridSpec) -> Result<Trajectory, SimError> {
    let initial = initial_state(spec)?;
    integrate(spec, &initial, &spec.events, spec.solver.t_end, spec.solver.dt)
}

/// Judge settling over the final `window` seconds and return the
/// time-averaged state there. Settled means the largest derivative norm in
/// the window stays below `settle_tol` times the terminal state scale.
pub fn steady_state_of(
    trajectory: &Trajectory,
    window: f64,
    settle_tol: f64,
) -> Result<GlobalState, SimError> {
    let samples = &trajectory.samples;
    let t_end = trajectory.final_time();
    let span = t_end - samples[0].time;
    if window >= span {
        return Err(SimError::WindowTooLong { window, span });
    }
    let from = t_end - window;
    let tail: Vec<&Sample> = samples.iter().filter(|s| s.time >= from).collect();

    let scale = trajectory
        .final_state()
        .to_vector()
        .abs()
        .max()
        .max(1.0);
    let threshold = settle_tol * scale;
    let max_rate = tail.iter().map(|s| s.rhs_norm).fold(0.0, f64::max);
    if max_rate > threshold {
        return Err(SimError::NotSettled { max_rate, threshold });
    }

    let mut mean = DVector::zeros(tail[0].state.dim());
    for s in &tail {
        mean += s.state.to_vector();
    }
    mean /= tail.len() as f64;
    let (n, m) = (tail[0].state.bus_count(), tail[0].state.line_count());
    Ok(GlobalState::from_vector(n, m, &mean))
}

/// Metrics time series for a run. Band violation requires a certificate
/// whose existence test passed; otherwise that column is NaN.
pub fn compute_metrics(
    trajectory: &Trajectory,
    spec: &MicrogridSpec,
    certificate: Option<&ExistenceCertificate>,
) -> Vec<MetricsSample> {
    let ratings = spec.ratings();
    let band = certificate.and_then(|c| c.band());
    trajectory
        .samples
        .iter()
        .map(|s| {
            let normalized = s.state.filter_current.component_div(&ratings);
            let sharing_error = normalized.max() - normalized.min();

            let weighted_gap = ratings.dot(&(&s.state.voltage - &s.v_ref));
            let balancing_error = weighted_gap.abs();

            let band_violation = match &band {
                Some((low, high)) => {
                    let mut worst = 0.0f64;
                    for i in 0..s.state.voltage.len() {
                        let v = s.state.voltage[i];
                        worst = worst.max(low[i] - v).max(v - high[i]);
                    }
                    worst
                }
                None => f64::NAN,
            };

            MetricsSample {
                time: s.time,
                sharing_error,
                balancing_error,
                band_violation,
            }
        })
        .collect()
}
