//! TOML configuration files: parsing into a validated [`MicrogridSpec`]
//! and emitting a spec back out as a config. Bus and line indices are
//! 1-based in files and 0-based everywhere else.
//!
//! ```toml
//! [solver]
//! t_end = 4.0
//!
//! [start]
//! topology = "isolated"
//! secondary = false
//!
//! [[dgu]]
//! r_t = 0.2
//! l_t = 2.0e-3
//! c_t = 2.2e-3
//! rating = 2.0
//! v_ref = 50.0
//! gains = { k1 = -2.0, k2 = -0.8, k3 = 450.0, k4 = -2.0 }
//! load = { conductance = 0.05, current = 0.4, power = 8.0 }
//!
//! [[line]]
//! from = 1
//! to = 2
//! resistance = 0.07
//! inductance = 2.2e-6
//!
//! [[comm]]
//! between = [1, 2]
//! weight = 60.0
//!
//! [[event]]
//! time = 0.0
//! kind = "plug_in"
//! lines = "all"
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::ControllerGains;
use crate::microgrid::{
    DguSetup, MicrogridSpec, SolverSettings, SpecError, StartCondition, StartState, StartTopology,
};
use crate::network::{CommGraph, ElectricalGraph, LineEdge, NetworkError};
use crate::plant::{DguParams, ZipLoad};
use crate::simulate::{EventKind, LineSelection, ScenarioEvent};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("config serialize error: {0}")]
    TomlSer(#[from] toml::ser::Error),
    #[error("line {row}: endpoint {value} out of range (buses are numbered 1..={bus_count})")]
    BadLineEndpoint {
        row: usize,
        value: usize,
        bus_count: usize,
    },
    #[error("comm link {row}: endpoint {value} out of range (buses are numbered 1..={bus_count})")]
    BadCommEndpoint {
        row: usize,
        value: usize,
        bus_count: usize,
    },
    #[error("event {row}: bus {value} out of range (buses are numbered 1..={bus_count})")]
    BadEventBus {
        row: usize,
        value: usize,
        bus_count: usize,
    },
    #[error("event {row}: line {value} out of range (lines are numbered 1..={line_count})")]
    BadEventLine {
        row: usize,
        value: usize,
        line_count: usize,
    },
    #[error("event {row}: line selection must be \"all\" or a list of line numbers, got {got:?}")]
    BadLineSelection { row: usize, got: String },
    #[error("start.state = \"flat\" requires start.flat_voltage")]
    MissingFlatVoltage,
    #[error("start.flat_voltage is only meaningful with start.state = \"flat\"")]
    UnexpectedFlatVoltage,
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Spec(#[from] SpecError),
}

#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    #[serde(default)]
    solver: SolverDto,
    #[serde(default)]
    start: StartDto,
    #[serde(rename = "dgu")]
    dgus: Vec<DguDto>,
    #[serde(rename = "line", default)]
    lines: Vec<LineDto>,
    #[serde(rename = "comm", default)]
    comms: Vec<CommDto>,
    #[serde(rename = "event", default)]
    events: Vec<EventDto>,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
struct SolverDto {
    dt: f64,
    t_start: f64,
    t_end: f64,
    v_min: f64,
    sample_every: usize,
    residual_tol: f64,
    settle_tol: f64,
    rank_tol: f64,
    settle_window: f64,
}

impl Default for SolverDto {
    fn default() -> Self {
        let s = SolverSettings::default();
        SolverDto {
            dt: s.dt,
            t_start: s.t_start,
            t_end: s.t_end,
            v_min: s.v_min,
            sample_every: s.sample_every,
            residual_tol: s.residual_tol,
            settle_tol: s.settle_tol,
            rank_tol: s.rank_tol,
            settle_window: s.settle_window,
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
enum TopologyDto {
    Isolated,
    Full,
}

#[derive(Debug, Clone, Copy, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
enum StateDto {
    Equilibrium,
    Flat,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
struct StartDto {
    topology: TopologyDto,
    secondary: bool,
    state: StateDto,
    #[serde(skip_serializing_if = "Option::is_none")]
    flat_voltage: Option<f64>,
}

impl Default for StartDto {
    fn default() -> Self {
        StartDto {
            topology: TopologyDto::Full,
            secondary: true,
            state: StateDto::Equilibrium,
            flat_voltage: None,
        }
    }
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct GainsDto {
    k1: f64,
    k2: f64,
    k3: f64,
    k4: f64,
}

#[derive(Debug, Default, Clone, Copy, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
struct LoadDto {
    conductance: f64,
    current: f64,
    power: f64,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct DguDto {
    r_t: f64,
    l_t: f64,
    c_t: f64,
    rating: f64,
    v_ref: f64,
    gains: GainsDto,
    #[serde(default)]
    load: LoadDto,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct LineDto {
    from: usize,
    to: usize,
    resistance: f64,
    inductance: f64,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct CommDto {
    between: [usize; 2],
    weight: f64,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(untagged)]
enum LinesDto {
    Keyword(String),
    Indices(Vec<usize>),
}

// `kind` tags the variant; remaining keys sit beside `time` in the same
// table. (No deny_unknown_fields here: serde cannot combine it with the
// flattened tag.)
#[derive(Debug, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum EventPayload {
    PlugIn { lines: LinesDto },
    LoadStep { bus: usize, load: LoadDto },
    CommCollapse,
    CommRestore,
    SetReference { bus: usize, v_ref: f64 },
}

#[derive(Debug, Deserialize, Serialize)]
struct EventDto {
    time: f64,
    #[serde(flatten)]
    payload: EventPayload,
}

fn load_from_dto(dto: &LoadDto) -> ZipLoad {
    ZipLoad {
        conductance: dto.conductance,
        current: dto.current,
        power: dto.power,
    }
}

fn one_based(value: usize, bus_count: usize) -> Option<usize> {
    (1..=bus_count).contains(&value).then(|| value - 1)
}

fn into_spec(file: ConfigFile) -> Result<MicrogridSpec, ConfigError> {
    let n = file.dgus.len();

    let mut edges = Vec::with_capacity(file.lines.len());
    for (row, line) in file.lines.iter().enumerate() {
        let source = one_based(line.from, n).ok_or(ConfigError::BadLineEndpoint {
            row: row + 1,
            value: line.from,
            bus_count: n,
        })?;
        let sink = one_based(line.to, n).ok_or(ConfigError::BadLineEndpoint {
            row: row + 1,
            value: line.to,
            bus_count: n,
        })?;
        edges.push(LineEdge {
            source,
            sink,
            resistance: line.resistance,
            inductance: line.inductance,
        });
    }
    let line_count = edges.len();
    let electrical = ElectricalGraph::new(n, edges)?;

    let mut links = Vec::with_capacity(file.comms.len());
    for (row, comm) in file.comms.iter().enumerate() {
        let [a, b] = comm.between;
        let i = one_based(a, n).ok_or(ConfigError::BadCommEndpoint {
            row: row + 1,
            value: a,
            bus_count: n,
        })?;
        let j = one_based(b, n).ok_or(ConfigError::BadCommEndpoint {
            row: row + 1,
            value: b,
            bus_count: n,
        })?;
        links.push((i, j, comm.weight));
    }
    let comm = CommGraph::from_links(n, &links)?;

    let dgus = file
        .dgus
        .iter()
        .map(|d| DguSetup {
            params: DguParams {
                r_t: d.r_t,
                l_t: d.l_t,
                c_t: d.c_t,
                rating: d.rating,
            },
            gains: ControllerGains {
                k1: d.gains.k1,
                k2: d.gains.k2,
                k3: d.gains.k3,
                k4: d.gains.k4,
            },
            load: load_from_dto(&d.load),
            v_ref: d.v_ref,
        })
        .collect();

    let state = match (file.start.state, file.start.flat_voltage) {
        (StateDto::Equilibrium, None) => StartState::LocalEquilibrium,
        (StateDto::Equilibrium, Some(_)) => return Err(ConfigError::UnexpectedFlatVoltage),
        (StateDto::Flat, Some(voltage)) => StartState::Flat { voltage },
        (StateDto::Flat, None) => return Err(ConfigError::MissingFlatVoltage),
    };
    let start = StartCondition {
        topology: match file.start.topology {
            TopologyDto::Isolated => StartTopology::Isolated,
            TopologyDto::Full => StartTopology::Full,
        },
        secondary: file.start.secondary,
        state,
    };

    let mut events = Vec::with_capacity(file.events.len());
    for (row, event) in file.events.into_iter().enumerate() {
        let row_no = row + 1;
        let kind = match event.payload {
            EventPayload::PlugIn { lines } => {
                let lines = match lines {
                    LinesDto::Keyword(word) if word == "all" => LineSelection::All,
                    LinesDto::Keyword(word) => {
                        return Err(ConfigError::BadLineSelection { row: row_no, got: word })
                    }
                    LinesDto::Indices(list) => {
                        let mut indices = Vec::with_capacity(list.len());
                        for value in list {
                            let l = one_based(value, line_count).ok_or(ConfigError::BadEventLine {
                                row: row_no,
                                value,
                                line_count,
                            })?;
                            indices.push(l);
                        }
                        LineSelection::Lines(indices)
                    }
                };
                EventKind::PlugIn { lines }
            }
            EventPayload::LoadStep { bus, load } => EventKind::LoadStep {
                bus: one_based(bus, n).ok_or(ConfigError::BadEventBus {
                    row: row_no,
                    value: bus,
                    bus_count: n,
                })?,
                load: load_from_dto(&load),
            },
            EventPayload::CommCollapse => EventKind::CommCollapse,
            EventPayload::CommRestore => EventKind::CommRestore,
            EventPayload::SetReference { bus, v_ref } => EventKind::SetReference {
                bus: one_based(bus, n).ok_or(ConfigError::BadEventBus {
                    row: row_no,
                    value: bus,
                    bus_count: n,
                })?,
                v_ref,
            },
        };
        events.push(ScenarioEvent { time: event.time, kind });
    }

    let solver = SolverSettings {
        dt: file.solver.dt,
        t_start: file.solver.t_start,
        t_end: file.solver.t_end,
        v_min: file.solver.v_min,
        sample_every: file.solver.sample_every,
        residual_tol: file.solver.residual_tol,
        settle_tol: file.solver.settle_tol,
        rank_tol: file.solver.rank_tol,
        settle_window: file.solver.settle_window,
    };

    Ok(MicrogridSpec::new(electrical, comm, dgus, start, events, solver)?)
}

/// Parse a config from TOML text.
pub fn parse(text: &str) -> Result<MicrogridSpec, ConfigError> {
    into_spec(toml::from_str(text)?)
}

/// Read and parse a config file.
pub fn load(path: &Path) -> Result<MicrogridSpec, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse(&text)
}

fn load_to_dto(load: &ZipLoad) -> LoadDto {
    LoadDto {
        conductance: load.conductance,
        current: load.current,
        power: load.power,
    }
}

/// Serialize a spec back into config TOML. `parse(&emit(spec))` returns an
/// equal spec.
pub fn emit(spec: &MicrogridSpec) -> Result<String, ConfigError> {
    let (state, flat_voltage) = match spec.start.state {
        StartState::LocalEquilibrium => (StateDto::Equilibrium, None),
        StartState::Flat { voltage } => (StateDto::Flat, Some(voltage)),
    };
    let weights = spec.comm.weights();
    let mut comms = Vec::new();
    for i in 0..spec.bus_count() {
        for j in (i + 1)..spec.bus_count() {
            if weights[(i, j)] != 0.0 {
                comms.push(CommDto {
                    between: [i + 1, j + 1],
                    weight: weights[(i, j)],
                });
            }
        }
    }

    let file = ConfigFile {
        solver: SolverDto {
            dt: spec.solver.dt,
            t_start: spec.solver.t_start,
            t_end: spec.solver.t_end,
            v_min: spec.solver.v_min,
            sample_every: spec.solver.sample_every,
            residual_tol: spec.solver.residual_tol,
            settle_tol: spec.solver.settle_tol,
            rank_tol: spec.solver.rank_tol,
            settle_window: spec.solver.settle_window,
        },
        start: StartDto {
            topology: match spec.start.topology {
                StartTopology::Isolated => TopologyDto::Isolated,
                StartTopology::Full => TopologyDto::Full,
            },
            secondary: spec.start.secondary,
            state,
            flat_voltage,
        },
        dgus: spec
            .dgus
            .iter()
            .map(|d| DguDto {
                r_t: d.params.r_t,
                l_t: d.params.l_t,
                c_t: d.params.c_t,
                rating: d.params.rating,
                v_ref: d.v_ref,
                gains: GainsDto {
                    k1: d.gains.k1,
                    k2: d.gains.k2,
                    k3: d.gains.k3,
                    k4: d.gains.k4,
                },
                load: load_to_dto(&d.load),
            })
            .collect(),
        lines: spec
            .electrical
            .edges()
            .iter()
            .map(|e| LineDto {
                from: e.source + 1,
                to: e.sink + 1,
                resistance: e.resistance,
                inductance: e.inductance,
            })
            .collect(),
        comms,
        events: spec
            .events
            .iter()
            .map(|e| EventDto {
                time: e.time,
                payload: match &e.kind {
                    EventKind::PlugIn { lines } => EventPayload::PlugIn {
                        lines: match lines {
                            LineSelection::All => LinesDto::Keyword("all".to_string()),
                            LineSelection::Lines(list) => {
                                LinesDto::Indices(list.iter().map(|l| l + 1).collect())
                            }
                        },
                    },
                    EventKind::LoadStep { bus, load } => EventPayload::LoadStep {
                        bus: bus + 1,
                        load: load_to_dto(load),
                    },
                    EventKind::CommCollapse => EventPayload::CommCollapse,
                    EventKind::CommRestore => EventPayload::CommRestore,
                    EventKind::SetReference { bus, v_ref } => EventPayload::SetReference {
                        bus: bus + 1,
                        v_ref: *v_ref,
                    },
                },
            })
            .collect(),
    };
    Ok(toml::to_string_pretty(&file)?)
}
