//! Simulation and analysis toolkit for islanded DC microgrids operating
//! under decentralized primary voltage control with a consensus-based
//! secondary layer on top.
//!
//! The crate is organized around the lifecycle of a study:
//!
//! - [`network`]: electrical and communication graphs, incidence and
//!   Laplacian constructions.
//! - [`plant`]: line / generation-unit / load dynamics and assembly of the
//!   global closed-loop state space.
//! - [`control`]: primary PI gains, gain-set validation and synthesis, and
//!   the consensus layer.
//! - [`equilibrium`]: steady-state construction, the existence certificate
//!   with its fixed-point voltage solver, and linearized stability.
//! - [`simulate`]: fixed-step time-domain integration with scenario events
//!   and performance metrics.
//! - [`microgrid`] / [`config`]: the full static description of a study and
//!   its on-disk format.
//! - [`cli`]: the `dcmg` command implementations (check / solve / run /
//!   sweep) and report emission.

pub mod cli;
pub mod config;
pub mod control;
pub mod equilibrium;
pub mod microgrid;
pub mod network;
pub mod plant;
pub mod report;
pub mod simulate;

#[cfg(test)]
pub(crate) mod testutil;
