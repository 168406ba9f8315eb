//! Physical dynamics of the microgrid: RL power lines, generation units
//! behind their closed primary/secondary loops, ZIP loads, and assembly of
//! the global state space
//!
//! ```text
//! dX/dt = A X + b(V),     X = [V; I_t; v; I; Omega]  (dimension 4N + M)
//! ```
//!
//! `A` depends only on parameters, gains, and the active topology — never on
//! the state — so it is assembled once and reused until a topology or load
//! event invalidates it. The affine term `b(V)` carries the constant-current
//! and constant-power load injections plus the voltage references and is
//! evaluated per step.
//!
//! Two independent evaluation routes exist on purpose: [`SystemMatrices::full_rhs`]
//! (dense matrix form) and [`blockwise_rhs`] (scalar per-equation loops over
//! the edge lists). Tests hold them to 1e-12 agreement; do not fold one into
//! the other.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::control::closed_loop_coefficients;
use crate::microgrid::MicrogridSpec;
use crate::network::{build_incidence, comm_laplacian, ElectricalGraph};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlantError {
    #[error("parameter {field} must be strictly positive, got {value}")]
    BadParameter { field: &'static str, value: f64 },
    #[error("load {field} must be nonnegative, got {value}")]
    BadLoad { field: &'static str, value: f64 },
    #[error("voltage {voltage} V is at or below the collapse guard {v_min} V")]
    NonPositiveVoltage { voltage: f64, v_min: f64 },
    #[error("voltage collapse at bus {bus}: {voltage} V is at or below the guard {v_min} V")]
    CollapsedBus {
        bus: usize,
        voltage: f64,
        v_min: f64,
    },
}

/// Electrical parameters of one generation unit: Buck converter output
/// filter plus the rated current used for proportional sharing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DguParams {
    /// Filter resistance R_t (ohm).
    pub r_t: f64,
    /// Filter inductance L_t (henry).
    pub l_t: f64,
    /// Filter capacitance C_t (farad), line capacitances lumped in.
    pub c_t: f64,
    /// Rated filter current I_t^s (ampere).
    pub rating: f64,
}

impl DguParams {
    pub fn validate(&self) -> Result<(), PlantError> {
        for (field, value) in [
            ("R_t", self.r_t),
            ("L_t", self.l_t),
            ("C_t", self.c_t),
            ("rating", self.rating),
        ] {
            if value <= 0.0 {
                return Err(PlantError::BadParameter { field, value });
            }
        }
        Ok(())
    }
}

/// ZIP load at one bus: current drawn is
/// `conductance * V + current + power / V`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZipLoad {
    /// Constant-impedance component Y_L (siemens).
    pub conductance: f64,
    /// Constant-current component (ampere).
    pub current: f64,
    /// Constant-power component P*_L (watt); loads consume power.
    pub power: f64,
}

impl ZipLoad {
    pub fn validate(&self) -> Result<(), PlantError> {
        if self.conductance < 0.0 {
            return Err(PlantError::BadLoad {
                field: "conductance",
                value: self.conductance,
            });
        }
        if self.power < 0.0 {
            return Err(PlantError::BadLoad {
                field: "power",
                value: self.power,
            });
        }
        Ok(())
    }
}

/// Current drawn by a ZIP load at voltage `v`. The constant-power branch is
/// singular at zero voltage; evaluation refuses any voltage at or below the
/// collapse guard `v_min`.
pub fn zip_current(load: &ZipLoad, v: f64, v_min: f64) -> Result<f64, PlantError> {
    if v <= v_min {
        return Err(PlantError::NonPositiveVoltage {
            voltage: v,
            v_min,
        });
    }
    Ok(load.conductance * v + load.current + load.power / v)
}

/// Full state of the closed-loop microgrid, blocked as laid out in the
/// global state space: `[V; I_t; v; I; Omega]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalState {
    /// Bus voltages (volt).
    pub voltage: DVector<f64>,
    /// Filter currents (ampere).
    pub filter_current: DVector<f64>,
    /// Primary PI integrator states (volt second).
    pub integrator: DVector<f64>,
    /// Line currents (ampere).
    pub line_current: DVector<f64>,
    /// Consensus integrator states.
    pub consensus: DVector<f64>,
}

impl GlobalState {
    pub fn zeros(n: usize, m: usize) -> Self {
        Self {
            voltage: DVector::zeros(n),
            filter_current: DVector::zeros(n),
            integrator: DVector::zeros(n),
            line_current: DVector::zeros(m),
            consensus: DVector::zeros(n),
        }
    }

    pub fn bus_count(&self) -> usize {
        self.voltage.len()
    }

    pub fn line_count(&self) -> usize {
        self.line_current.len()
    }

    pub fn dim(&self) -> usize {
        4 * self.bus_count() + self.line_count()
    }

    /// Flatten into the `[V; I_t; v; I; Omega]` layout.
    pub fn to_vector(&self) -> DVector<f64> {
        let (n, m) = (self.bus_count(), self.line_count());
        let mut x = DVector::zeros(4 * n + m);
        x.rows_mut(0, n).copy_from(&self.voltage);
        x.rows_mut(n, n).copy_from(&self.filter_current);
        x.rows_mut(2 * n, n).copy_from(&self.integrator);
        x.rows_mut(3 * n, m).copy_from(&self.line_current);
        x.rows_mut(3 * n + m, n).copy_from(&self.consensus);
        x
    }

    /// Rebuild the blocked form from a flat `[V; I_t; v; I; Omega]` vector.
    pub fn from_vector(n: usize, m: usize, x: &DVector<f64>) -> Self {
        assert_eq!(x.len(), 4 * n + m, "flat state has wrong dimension");
        Self {
            voltage: x.rows(0, n).into_owned(),
            filter_current: x.rows(n, n).into_owned(),
            integrator: x.rows(2 * n, n).into_owned(),
            line_current: x.rows(3 * n, m).into_owned(),
            consensus: x.rows(3 * n + m, n).into_owned(),
        }
    }
}

/// Which parts of the closed loop are live. The state layout never changes;
/// de-energized lines and an inactive secondary layer show up as zeroed
/// blocks, freezing the corresponding states.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemMode {
    /// Energized power lines. An inactive line contributes no coupling and
    /// its current stays frozen (at zero, the value it is given on plug-in).
    pub active_lines: Vec<bool>,
    /// Whether the consensus layer acts. When false, omega = 0 and the
    /// consensus integrators freeze: each unit reverts to primary-only
    /// reference tracking.
    pub secondary_active: bool,
}

impl SystemMode {
    /// All lines energized, consensus layer running.
    pub fn full(line_count: usize) -> Self {
        Self {
            active_lines: vec![true; line_count],
            secondary_active: true,
        }
    }

    /// Every unit on its own bus, primary control only.
    pub fn isolated(line_count: usize) -> Self {
        Self {
            active_lines: vec![false; line_count],
            secondary_active: false,
        }
    }
}

/// Dense realization of the closed-loop system `dX/dt = A X + b(V)` for one
/// topology/load configuration. Immutable after assembly.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemMatrices {
    pub n: usize,
    pub m: usize,
    /// State matrix, (4N+M) square, state-independent.
    pub a: DMatrix<f64>,
    /// Constant-current load component per bus (ampere).
    pub load_current: DVector<f64>,
    /// Constant-power load component per bus (watt).
    pub load_power: DVector<f64>,
    /// Voltage references per bus (volt).
    pub v_ref: DVector<f64>,
    /// Filter capacitances per bus (farad).
    pub c_t: DVector<f64>,
    /// Collapse guard: evaluation refuses any bus voltage at or below this.
    pub v_min: f64,
}

impl SystemMatrices {
    pub fn dim(&self) -> usize {
        4 * self.n + self.m
    }

    /// Affine term `b(V)`: load injections on the voltage block, references
    /// on the integrator block.
    pub fn affine_term(&self, voltage: &DVector<f64>) -> Result<DVector<f64>, PlantError> {
        let (n, m) = (self.n, self.m);
        let mut b = DVector::zeros(self.dim());
        for i in 0..n {
            let v = voltage[i];
            if v <= self.v_min {
                return Err(PlantError::CollapsedBus {
                    bus: i,
                    voltage: v,
                    v_min: self.v_min,
                });
            }
            b[i] = -(self.load_current[i] + self.load_power[i] / v) / self.c_t[i];
            b[2 * n + i] = self.v_ref[i];
        }
        let _ = m;
        Ok(b)
    }

    /// Evaluate `A X + b(V)` on a flat state vector.
    pub fn full_rhs(&self, x: &DVector<f64>) -> Result<DVector<f64>, PlantError> {
        assert_eq!(x.len(), self.dim(), "flat state has wrong dimension");
        let voltage = x.rows(0, self.n).into_owned();
        let mut rhs = self.affine_term(&voltage)?;
        rhs.gemv(1.0, &self.a, x, 1.0);
        Ok(rhs)
    }

    /// Evaluate on a blocked state.
    pub fn full_rhs_state(&self, state: &GlobalState) -> Result<GlobalState, PlantError> {
        let rhs = self.full_rhs(&state.to_vector())?;
        Ok(GlobalState::from_vector(self.n, self.m, &rhs))
    }
}

/// Line current derivatives `dI_l/dt = -(R_l/L_l) I_l + (1/L_l) (B^T V)_l`,
/// with `(B^T V)_l = V_sink - V_source` under the stored orientation.
pub fn line_rhs(
    voltage: &DVector<f64>,
    line_current: &DVector<f64>,
    graph: &ElectricalGraph,
) -> DVector<f64> {
    DVector::from_iterator(
        graph.edge_count(),
        graph.edges().iter().zip(line_current.iter()).map(|(e, &i)| {
            (-e.resistance * i + voltage[e.sink] - voltage[e.source]) / e.inductance
        }),
    )
}

/// Assemble the closed-loop system for the given mode. The five block rows
/// are, in order: voltages, filter currents, PI integrators, line currents,
/// consensus integrators.
pub fn assemble_with_mode(spec: &MicrogridSpec, mode: &SystemMode) -> SystemMatrices {
    let n = spec.bus_count();
    let m = spec.line_count();
    assert_eq!(mode.active_lines.len(), m, "mode covers every line");

    let b = build_incidence(&spec.electrical).matrix;
    let lc = comm_laplacian(&spec.comm).matrix;
    let dim = 4 * n + m;
    let mut a = DMatrix::zeros(dim, dim);

    for (i, dgu) in spec.dgus.iter().enumerate() {
        let coeff = closed_loop_coefficients(&dgu.gains, &dgu.params);
        let c_t = dgu.params.c_t;

        // Voltage row: dV/dt = (I_t - I_L(V) - sum_l B_il I_l) / C_t; the
        // conductance part of the load is linear and lives here, the rest
        // of the load sits in the affine term.
        a[(i, i)] = -dgu.load.conductance / c_t;
        a[(i, n + i)] = 1.0 / c_t;
        for l in 0..m {
            if mode.active_lines[l] && b[(i, l)] != 0.0 {
                a[(i, 3 * n + l)] = -b[(i, l)] / c_t;
            }
        }

        // Filter current row: dI_t/dt = alpha V + beta I_t + gamma v + delta omega.
        a[(n + i, i)] = coeff.alpha;
        a[(n + i, n + i)] = coeff.beta;
        a[(n + i, 2 * n + i)] = coeff.gamma;

        // PI integrator row: dv/dt = V_ref - V - omega.
        a[(2 * n + i, i)] = -1.0;

        if mode.secondary_active {
            let rating = dgu.params.rating;
            for j in 0..n {
                // omega = [I_t^s]^-1 L_c Omega enters the filter-current and
                // integrator rows; the consensus row integrates the
                // rating-normalized current disagreement.
                a[(n + i, 3 * n + m + j)] = coeff.delta * lc[(i, j)] / rating;
                a[(2 * n + i, 3 * n + m + j)] = -lc[(i, j)] / rating;
                a[(3 * n + m + i, n + j)] = lc[(i, j)] / spec.dgus[j].params.rating;
            }
        }
    }

    // Line rows: dI/dt = L^-1 B^T V - L^-1 R I on energized lines only.
    for (l, e) in spec.electrical.edges().iter().enumerate() {
        if mode.active_lines[l] {
            a[(3 * n + l, e.source)] = -1.0 / e.inductance;
            a[(3 * n + l, e.sink)] = 1.0 / e.inductance;
            a[(3 * n + l, 3 * n + l)] = -e.resistance / e.inductance;
        }
    }

    SystemMatrices {
        n,
        m,
        a,
        load_current: DVector::from_iterator(n, spec.dgus.iter().map(|d| d.load.current)),
        load_power: DVector::from_iterator(n, spec.dgus.iter().map(|d| d.load.power)),
        v_ref: DVector::from_iterator(n, spec.dgus.iter().map(|d| d.v_ref)),
        c_t: DVector::from_iterator(n, spec.dgus.iter().map(|d| d.params.c_t)),
        v_min: spec.solver.v_min,
    }
}

/// Assemble the fully-energized closed loop.
pub fn assemble_system(spec: &MicrogridSpec) -> SystemMatrices {
    assemble_with_mode(spec, &SystemMode::full(spec.line_count()))
}

/// Independent per-equation evaluation of the closed-loop dynamics: scalar
/// loops over the edge and link lists, no assembled matrices. Exists as a
/// second route against [`SystemMatrices::full_rhs`]; keep the two
/// implementations structurally separate.
pub fn blockwise_rhs(
    spec: &MicrogridSpec,
    mode: &SystemMode,
    state: &GlobalState,
) -> Result<GlobalState, PlantError> {
    let n = spec.bus_count();
    let m = spec.line_count();
    let weights = spec.comm.weights();
    let mut out = GlobalState::zeros(n, m);

    for (i, dgu) in spec.dgus.iter().enumerate() {
        let v = state.voltage[i];
        if v <= spec.solver.v_min {
            return Err(PlantError::CollapsedBus {
                bus: i,
                voltage: v,
                v_min: spec.solver.v_min,
            });
        }

        // Net line current leaving bus i, accumulated straight off the edge
        // list: B_il is -1 at the source and +1 at the sink.
        let mut line_draw = 0.0;
        for (l, e) in spec.electrical.edges().iter().enumerate() {
            if !mode.active_lines[l] {
                continue;
            }
            if e.source == i {
                line_draw -= state.line_current[l];
            } else if e.sink == i {
                line_draw += state.line_current[l];
            }
        }

        let load = zip_current(&dgu.load, v, spec.solver.v_min)?;
        out.voltage[i] = (state.filter_current[i] - load - line_draw) / dgu.params.c_t;

        // Consensus variable of unit i, straight from the link weights.
        let omega_i = if mode.secondary_active {
            let mut acc = 0.0;
            for j in 0..n {
                acc += weights[(i, j)] * (state.consensus[i] - state.consensus[j]);
            }
            acc / dgu.params.rating
        } else {
            0.0
        };

        let coeff = closed_loop_coefficients(&dgu.gains, &dgu.params);
        out.filter_current[i] = coeff.alpha * v
            + coeff.beta * state.filter_current[i]
            + coeff.gamma * state.integrator[i]
            + coeff.delta * omega_i;
        out.integrator[i] = dgu.v_ref - v - omega_i;

        // Consensus integrator: weighted disagreement of normalized currents.
        if mode.secondary_active {
            let mut acc = 0.0;
            let norm_i = state.filter_current[i] / dgu.params.rating;
            for j in 0..n {
                let norm_j = state.filter_current[j] / spec.dgus[j].params.rating;
                acc += weights[(i, j)] * (norm_i - norm_j);
            }
            out.consensus[i] = acc;
        }
    }

    for (l, e) in spec.electrical.edges().iter().enumerate() {
        if mode.active_lines[l] {
            out.line_current[l] = (-e.resistance * state.line_current[l]
                + state.voltage[e.sink]
                - state.voltage[e.source])
                / e.inductance;
        }
    }

    Ok(out)
}
