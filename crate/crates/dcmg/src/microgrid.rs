//! The complete static description of a study: graphs, per-unit setup,
//! scenario, and solver settings. A validated [`MicrogridSpec`] is the input
//! every analysis and simulation entry point works from.

use nalgebra::DVector;
use thiserror::Error;

use crate::control::ControllerGains;
use crate::network::{CommGraph, ElectricalGraph};
use crate::plant::{DguParams, PlantError, SystemMode, ZipLoad};
use crate::simulate::{EventKind, LineSelection, ScenarioEvent};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpecError {
    #[error("{what} count {got} does not match the {expected} buses of the electrical network")]
    CountMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("unit {index}: {source}")]
    Dgu { index: usize, source: PlantError },
    #[error("solver setting {field} = {value} is invalid ({requirement})")]
    Solver {
        field: &'static str,
        value: f64,
        requirement: &'static str,
    },
    #[error("event {index}: bus {bus} does not exist (1..={count})")]
    EventBus {
        index: usize,
        bus: usize,
        count: usize,
    },
    #[error("event {index}: line {line} does not exist (1..={count})")]
    EventLine {
        index: usize,
        line: usize,
        count: usize,
    },
    #[error("event {index}: {source}")]
    EventLoad { index: usize, source: PlantError },
    #[error("unit {index}: reference {v_ref} V must exceed the collapse guard {v_min} V")]
    ReferenceBelowGuard {
        index: usize,
        v_ref: f64,
        v_min: f64,
    },
    #[error("flat start voltage {voltage} V must exceed the collapse guard {v_min} V")]
    FlatStartBelowGuard { voltage: f64, v_min: f64 },
}

/// Everything attached to one bus: the generation unit, its controller, its
/// local load, and its voltage reference.
#[derive(Debug, Clone, PartialEq)]
pub struct DguSetup {
    pub params: DguParams,
    pub gains: ControllerGains,
    pub load: ZipLoad,
    /// Voltage reference at the point of common coupling (volt).
    pub v_ref: f64,
}

/// Numerical settings. All tolerances carry the documented defaults and can
/// be overridden per study.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    /// Integration step (second).
    pub dt: f64,
    /// Scenario start time (second); events before it are invalid.
    pub t_start: f64,
    /// Scenario end time (second).
    pub t_end: f64,
    /// Collapse guard (volt): any bus at or below this voltage ends the run.
    pub v_min: f64,
    /// Store every k-th integration step.
    pub sample_every: usize,
    /// Equation-residual tolerance for equilibrium verification.
    pub residual_tol: f64,
    /// Settling threshold relative to the state scale.
    pub settle_tol: f64,
    /// Relative singular-value cutoff for rank decisions.
    pub rank_tol: f64,
    /// Window (second) over which settling is judged at the end of a run.
    pub settle_window: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            dt: 1e-5,
            t_start: 0.0,
            t_end: 4.0,
            v_min: 1.0,
            sample_every: 100,
            residual_tol: 1e-8,
            settle_tol: 1e-6,
            rank_tol: 1e-10,
            settle_window: 0.5,
        }
    }
}

impl SolverSettings {
    fn validate(&self) -> Result<(), SpecError> {
        let checks: [(&'static str, f64, bool, &'static str); 7] = [
            ("dt", self.dt, self.dt > 0.0, "must be > 0"),
            (
                "t_end",
                self.t_end,
                self.t_end > self.t_start,
                "must exceed t_start",
            ),
            ("v_min", self.v_min, self.v_min >= 0.0, "must be >= 0"),
            (
                "residual_tol",
                self.residual_tol,
                self.residual_tol > 0.0,
                "must be > 0",
            ),
            (
                "settle_tol",
                self.settle_tol,
                self.settle_tol > 0.0,
                "must be > 0",
            ),
            (
                "rank_tol",
                self.rank_tol,
                self.rank_tol > 0.0,
                "must be > 0",
            ),
            (
                "settle_window",
                self.settle_window,
                self.settle_window > 0.0,
                "must be > 0",
            ),
        ];
        for (field, value, ok, requirement) in checks {
            if !ok {
                return Err(SpecError::Solver {
                    field,
                    value,
                    requirement,
                });
            }
        }
        if self.sample_every == 0 {
            return Err(SpecError::Solver {
                field: "sample_every",
                value: 0.0,
                requirement: "must be >= 1",
            });
        }
        Ok(())
    }
}

/// Which lines are energized when the scenario begins.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StartTopology {
    /// Every unit on its own bus; lines are plugged in by events.
    Isolated,
    /// All lines energized from the start.
    Full,
}

/// The state the scenario begins from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StartState {
    /// Each unit at its local reference equilibrium: V = V_ref, the filter
    /// current carrying the local load, the PI integrator balancing the
    /// current loop; lines and consensus integrators at zero.
    LocalEquilibrium,
    /// Uniform voltage on every bus, all other states zero.
    Flat { voltage: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StartCondition {
    pub topology: StartTopology,
    /// Whether the consensus layer is active from the start.
    pub secondary: bool,
    pub state: StartState,
}

impl Default for StartCondition {
    fn default() -> Self {
        Self {
            topology: StartTopology::Full,
            secondary: true,
            state: StartState::LocalEquilibrium,
        }
    }
}

/// Validated description of one study. Construction checks dimensional
/// consistency, parameter positivity, and that every event targets an
/// existing bus or line; events are ordered by time (stably, so same-time
/// events keep their written order).
#[derive(Debug, Clone, PartialEq)]
pub struct MicrogridSpec {
    pub electrical: ElectricalGraph,
    pub comm: CommGraph,
    pub dgus: Vec<DguSetup>,
    pub start: StartCondition,
    pub events: Vec<ScenarioEvent>,
    pub solver: SolverSettings,
}

impl MicrogridSpec {
    pub fn new(
        electrical: ElectricalGraph,
        comm: CommGraph,
        dgus: Vec<DguSetup>,
        start: StartCondition,
        mut events: Vec<ScenarioEvent>,
        solver: SolverSettings,
    ) -> Result<Self, SpecError> {
        let n = electrical.node_count();
        if comm.node_count() != n {
            return Err(SpecError::CountMismatch {
                what: "communication node",
                got: comm.node_count(),
                expected: n,
            });
        }
        if dgus.len() != n {
            return Err(SpecError::CountMismatch {
                what: "unit",
                got: dgus.len(),
                expected: n,
            });
        }
        solver.validate()?;
        for (index, dgu) in dgus.iter().enumerate() {
            dgu.params
                .validate()
                .map_err(|source| SpecError::Dgu { index, source })?;
            dgu.load
                .validate()
                .map_err(|source| SpecError::Dgu { index, source })?;
            if dgu.v_ref <= solver.v_min {
                return Err(SpecError::ReferenceBelowGuard {
                    index,
                    v_ref: dgu.v_ref,
                    v_min: solver.v_min,
                });
            }
        }
        if let StartState::Flat { voltage } = start.state {
            if voltage <= solver.v_min {
                return Err(SpecError::FlatStartBelowGuard {
                    voltage,
                    v_min: solver.v_min,
                });
            }
        }

        let m = electrical.edge_count();
        for (index, event) in events.iter().enumerate() {
            match &event.kind {
                EventKind::PlugIn {
                    lines: LineSelection::Lines(lines),
                } => {
                    for &line in lines {
                        if line >= m {
                            return Err(SpecError::EventLine {
                                index,
                                line: line + 1,
                                count: m,
                            });
                        }
                    }
                }
                EventKind::PlugIn {
                    lines: LineSelection::All,
                }
                | EventKind::CommCollapse
                | EventKind::CommRestore => {}
                EventKind::LoadStep { bus, load } => {
                    if *bus >= n {
                        return Err(SpecError::EventBus {
                            index,
                            bus: bus + 1,
                            count: n,
                        });
                    }
                    load.validate()
                        .map_err(|source| SpecError::EventLoad { index, source })?;
                }
                EventKind::SetReference { bus, v_ref } => {
                    if *bus >= n {
                        return Err(SpecError::EventBus {
                            index,
                            bus: bus + 1,
                            count: n,
                        });
                    }
                    if *v_ref <= solver.v_min {
                        return Err(SpecError::ReferenceBelowGuard {
                            index: *bus,
                            v_ref: *v_ref,
                            v_min: solver.v_min,
                        });
                    }
                }
            }
        }
        events.sort_by(|a, b| a.time.total_cmp(&b.time));

        Ok(Self {
            electrical,
            comm,
            dgus,
            start,
            events,
            solver,
        })
    }

    pub fn bus_count(&self) -> usize {
        self.dgus.len()
    }

    pub fn line_count(&self) -> usize {
        self.electrical.edge_count()
    }

    /// Rated currents as a vector, in bus order.
    pub fn ratings(&self) -> DVector<f64> {
        DVector::from_iterator(self.bus_count(), self.dgus.iter().map(|d| d.params.rating))
    }

    /// Voltage references as a vector, in bus order.
    pub fn v_refs(&self) -> DVector<f64> {
        DVector::from_iterator(self.bus_count(), self.dgus.iter().map(|d| d.v_ref))
    }

    /// Load conductances as a vector, in bus order.
    pub fn conductances(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.bus_count(),
            self.dgus.iter().map(|d| d.load.conductance),
        )
    }

    /// Constant-current load components, in bus order.
    pub fn load_currents(&self) -> DVector<f64> {
        DVector::from_iterator(self.bus_count(), self.dgus.iter().map(|d| d.load.current))
    }

    /// Constant-power load components, in bus order.
    pub fn load_powers(&self) -> DVector<f64> {
        DVector::from_iterator(self.bus_count(), self.dgus.iter().map(|d| d.load.power))
    }

    /// The mode the scenario starts in.
    pub fn initial_mode(&self) -> SystemMode {
        let m = self.line_count();
        let mut mode = match self.start.topology {
            StartTopology::Full => SystemMode::full(m),
            StartTopology::Isolated => SystemMode::isolated(m),
        };
        mode.secondary_active = self.start.secondary;
        mode
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::LineEdge;
    use crate::testutil::ring_links;

    fn unit(v_ref: f64) -> DguSetup {
        DguSetup {
            params: DguParams {
                r_t: 0.2,
                l_t: 2e-3,
                c_t: 2.2e-3,
                rating: 2.0,
            },
            gains: ControllerGains {
                k1: -2.0,
                k2: -0.5,
                k3: 200.0,
                k4: -2.0,
            },
            load: ZipLoad {
                conductance: 0.1,
                current: 0.5,
                power: 10.0,
            },
            v_ref,
        }
    }

    fn two_bus_parts() -> (ElectricalGraph, CommGraph, Vec<DguSetup>) {
        (
            ElectricalGraph::new(
                2,
                vec![LineEdge {
                    source: 0,
                    sink: 1,
                    resistance: 0.1,
                    inductance: 2e-6,
                }],
            )
            .unwrap(),
            CommGraph::from_links(2, &ring_links(2, 10.0)[..1]).unwrap(),
            vec![unit(50.0), unit(50.2)],
        )
    }

    #[test]
    fn accepts_consistent_spec_and_sorts_events() {
        let (e, c, d) = two_bus_parts();
        let events = vec![
            ScenarioEvent {
                time: 2.0,
                kind: EventKind::CommCollapse,
            },
            ScenarioEvent {
                time: 0.5,
                kind: EventKind::SetReference { bus: 0, v_ref: 49.0 },
            },
        ];
        let spec =
            MicrogridSpec::new(e, c, d, StartCondition::default(), events, SolverSettings::default())
                .unwrap();
        assert_eq!(spec.events[0].time, 0.5);
        assert_eq!(spec.events[1].time, 2.0);
        assert_eq!(spec.bus_count(), 2);
        assert_eq!(spec.line_count(), 1);
    }

    #[test]
    fn rejects_mismatched_unit_count() {
        let (e, c, mut d) = two_bus_parts();
        d.pop();
        let err = MicrogridSpec::new(
            e,
            c,
            d,
            StartCondition::default(),
            vec![],
            SolverSettings::default(),
        )
        .unwrap_err();
        assert!(matches!(err, SpecError::CountMismatch { .. }));
    }

    #[test]
    fn rejects_event_targets_out_of_range() {
        let (e, c, d) = two_bus_parts();
        let err = MicrogridSpec::new(
            e,
            c,
            d,
            StartCondition::default(),
            vec![ScenarioEvent {
                time: 1.0,
                kind: EventKind::SetReference { bus: 5, v_ref: 50.0 },
            }],
            SolverSettings::default(),
        )
        .unwrap_err();
        assert!(matches!(err, SpecError::EventBus { bus: 6, .. }));
    }

    #[test]
    fn rejects_nonpositive_dt_and_low_reference() {
        let (e, c, d) = two_bus_parts();
        let bad = SolverSettings {
            dt: 0.0,
            ..Default::default()
        };
        assert!(matches!(
            MicrogridSpec::new(
                e.clone(),
                c.clone(),
                d.clone(),
                StartCondition::default(),
                vec![],
                bad
            ),
            Err(SpecError::Solver { field: "dt", .. })
        ));

        let mut low = d.clone();
        low[1].v_ref = 0.5;
        assert!(matches!(
            MicrogridSpec::new(e, c, low, StartCondition::default(), vec![], SolverSettings::default()),
            Err(SpecError::ReferenceBelowGuard { index: 1, .. })
        ));
    }

    #[test]
    fn initial_mode_follows_start_condition() {
        let (e, c, d) = two_bus_parts();
        let mut spec = MicrogridSpec::new(
            e,
            c,
            d,
            StartCondition {
                topology: StartTopology::Isolated,
                secondary: false,
                state: StartState::LocalEquilibrium,
            },
            vec![],
            SolverSettings::default(),
        )
        .unwrap();
        let mode = spec.initial_mode();
        assert!(mode.active_lines.iter().all(|a| !a));
        assert!(!mode.secondary_active);

        spec.start.topology = StartTopology::Full;
        spec.start.secondary = true;
        let mode = spec.initial_mode();
        assert!(mode.active_lines.iter().all(|a| *a));
        assert!(mode.secondary_active);
    }
}
