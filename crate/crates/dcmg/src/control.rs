//! Primary PI voltage control and the distributed secondary layer.
//!
//! Each generation unit runs a local multivariable PI loop with gains
//! (k1, k2, k3); the secondary layer adds a consensus variable `omega`
//! injected through a fourth gain k4. The stabilizing gain set is
//!
//! ```text
//! k1 < 1,    k2 < R_t,    0 < k3 < (1/L_t)(k1 - 1)(k2 - R_t),
//! ```
//!
//! with k4 = k1 required for the secondary-layer stability guarantee.
//! Validation is verdict-style so callers can choose between refusing and
//! merely warning (a simulation of deliberately destabilizing gains is a
//! legitimate experiment).

use std::fmt;

use nalgebra::DVector;

use crate::network::Laplacian;
use crate::plant::DguParams;

/// Per-unit feedback gains of the primary PI loop plus the secondary
/// injection gain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControllerGains {
    /// Proportional voltage gain (dimensionless).
    pub k1: f64,
    /// Filter-current feedback gain (ohm).
    pub k2: f64,
    /// Integral gain (ohm per second).
    pub k3: f64,
    /// Consensus injection gain (dimensionless); the stability guarantee
    /// assumes k4 = k1.
    pub k4: f64,
}

/// Closed-loop coefficients of the unit dynamics once the feedback law is
/// folded in:
///
/// ```text
/// dI_t/dt = alpha V + beta I_t + gamma v + delta omega
/// ```
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosedLoopCoefficients {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

pub fn closed_loop_coefficients(gains: &ControllerGains, dgu: &DguParams) -> ClosedLoopCoefficients {
    ClosedLoopCoefficients {
        alpha: (gains.k1 - 1.0) / dgu.l_t,
        beta: (gains.k2 - dgu.r_t) / dgu.l_t,
        gamma: gains.k3 / dgu.l_t,
        delta: gains.k4 / dgu.l_t,
    }
}

/// Upper bound of the admissible integral gain, `(1/L_t)(k1-1)(k2-R_t)`.
/// Positive exactly when the first two gain inequalities hold.
pub fn integral_gain_limit(k1: f64, k2: f64, dgu: &DguParams) -> f64 {
    (k1 - 1.0) * (k2 - dgu.r_t) / dgu.l_t
}

/// One violated inequality of the stabilizing gain set.
#[derive(Debug, Clone, PartialEq)]
pub enum GainViolation {
    ProportionalBound { k1: f64 },
    CurrentBound { k2: f64, r_t: f64 },
    IntegralSign { k3: f64 },
    IntegralBound { k3: f64, limit: f64 },
}

impl fmt::Display for GainViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ProportionalBound { k1 } => write!(f, "k1 = {k1} violates k1 < 1"),
            Self::CurrentBound { k2, r_t } => write!(f, "k2 = {k2} violates k2 < R_t = {r_t}"),
            Self::IntegralSign { k3 } => write!(f, "k3 = {k3} violates k3 > 0"),
            Self::IntegralBound { k3, limit } => {
                write!(f, "k3 = {k3} violates k3 < (1/L_t)(k1-1)(k2-R_t) = {limit}")
            }
        }
    }
}

/// Outcome of checking gains against the stabilizing set.
#[derive(Debug, Clone, PartialEq)]
pub struct GainVerdict {
    /// Every violated inequality, empty when (k1, k2, k3) is inside the set.
    pub violations: Vec<GainViolation>,
    /// Whether k4 = k1; the secondary-layer guarantee is claimed only under
    /// this coupling. Other k4 are permitted but outside the guarantee.
    pub k4_coupled: bool,
}

impl GainVerdict {
    /// (k1, k2, k3) inside the stabilizing set.
    pub fn stabilizing(&self) -> bool {
        self.violations.is_empty()
    }

    /// Stabilizing set membership plus the k4 = k1 coupling: the full
    /// closed-loop guarantee applies.
    pub fn guaranteed(&self) -> bool {
        self.stabilizing() && self.k4_coupled
    }
}

/// Check membership of (k1, k2, k3) in the stabilizing set and the k4 = k1
/// coupling, reporting every violated inequality.
pub fn validate_gains(gains: &ControllerGains, dgu: &DguParams) -> GainVerdict {
    let mut violations = Vec::new();
    if gains.k1 >= 1.0 {
        violations.push(GainViolation::ProportionalBound { k1: gains.k1 });
    }
    if gains.k2 >= dgu.r_t {
        violations.push(GainViolation::CurrentBound {
            k2: gains.k2,
            r_t: dgu.r_t,
        });
    }
    if gains.k3 <= 0.0 {
        violations.push(GainViolation::IntegralSign { k3: gains.k3 });
    } else {
        let limit = integral_gain_limit(gains.k1, gains.k2, dgu);
        if gains.k3 >= limit {
            violations.push(GainViolation::IntegralBound {
                k3: gains.k3,
                limit,
            });
        }
    }
    GainVerdict {
        violations,
        k4_coupled: gains.k4 == gains.k1,
    }
}

/// Placement fractions for gain synthesis; all must lie strictly in (0, 1).
///
/// The scales are fixed: k1 is pulled below 1 by `m1 * 2`, k2 below R_t by
/// `m2 * 2 R_t`, and k3 is placed at fraction `m3` of its admissible upper
/// bound. The defaults put each gain mid-range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthesisMargins {
    pub m1: f64,
    pub m2: f64,
    pub m3: f64,
}

impl Default for SynthesisMargins {
    fn default() -> Self {
        Self {
            m1: 0.5,
            m2: 0.5,
            m3: 0.5,
        }
    }
}

/// Produce gains strictly inside the stabilizing set from local parameters
/// only, with k4 = k1 so the secondary guarantee applies.
pub fn synthesize_gains(dgu: &DguParams, margins: SynthesisMargins) -> ControllerGains {
    let k1 = 1.0 - margins.m1 * 2.0;
    let k2 = dgu.r_t - margins.m2 * 2.0 * dgu.r_t;
    let k3 = margins.m3 * integral_gain_limit(k1, k2, dgu);
    ControllerGains { k1, k2, k3, k4: k1 }
}

/// Consensus integrator dynamics `dOmega/dt = L_c [I_t^s]^-1 I_t`: each unit
/// accumulates the weighted disagreement of rating-normalized filter
/// currents with its neighbors.
pub fn consensus_rhs(
    filter_current: &DVector<f64>,
    ratings: &DVector<f64>,
    comm: &Laplacian,
) -> DVector<f64> {
    &comm.matrix * filter_current.component_div(ratings)
}

/// Consensus variable `omega = [I_t^s]^-1 L_c Omega`, recomputed
/// algebraically from the integrators at every evaluation (it is a static
/// map, never integrated on its own).
pub fn omega(consensus: &DVector<f64>, ratings: &DVector<f64>, comm: &Laplacian) -> DVector<f64> {
    (&comm.matrix * consensus).component_div(ratings)
}

/// Converter command of unit i: `k1 V_i + k2 I_ti + k3 v_i + k4 omega_i`.
///
/// The consensus term enters with `+k4` so that, pushed through the filter
/// (`L_t dI_t/dt = command - V - R_t I_t`), it reproduces the closed-loop
/// coefficient `delta = k4 / L_t` used by the plant. With the sign flipped
/// the standard choice `k4 = k1 < 0` would turn the sharing correction into
/// positive feedback and destabilize the loop the moment two units disagree.
pub fn primary_command(gains: &ControllerGains, v: f64, i_t: f64, integrator: f64, omega: f64) -> f64 {
    gains.k1 * v + gains.k2 * i_t + gains.k3 * integrator + gains.k4 * omega
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{comm_laplacian, CommGraph};
    use crate::testutil::{arb_connected_pairs, ring_links};
    use proptest::prelude::*;

    fn dgu(r_t: f64, l_t: f64) -> DguParams {
        DguParams {
            r_t,
            l_t,
            c_t: 2.2e-3,
            rating: 2.0,
        }
    }

    #[test]
    fn validate_accepts_interior_point() {
        // Upper bound for k3 is (1/1e-3)(-1-1)(-1-0.2) = 2400, so 100 fits.
        let verdict = validate_gains(
            &ControllerGains {
                k1: -1.0,
                k2: -1.0,
                k3: 100.0,
                k4: -1.0,
            },
            &dgu(0.2, 1e-3),
        );
        assert!(verdict.stabilizing(), "violations: {:?}", verdict.violations);
        assert!(verdict.k4_coupled);
        assert!(verdict.guaranteed());
        assert_eq!(integral_gain_limit(-1.0, -1.0, &dgu(0.2, 1e-3)), 2400.0);
    }

    #[test]
    fn validate_rejects_boundaries() {
        let d = dgu(0.2, 1e-3);
        let base = ControllerGains {
            k1: -1.0,
            k2: -1.0,
            k3: 100.0,
            k4: -1.0,
        };

        let verdict = validate_gains(&ControllerGains { k1: 1.0, ..base }, &d);
        assert!(!verdict.stabilizing());
        assert!(matches!(
            verdict.violations[0],
            GainViolation::ProportionalBound { .. }
        ));

        let verdict = validate_gains(&ControllerGains { k3: 0.0, ..base }, &d);
        assert!(verdict
            .violations
            .iter()
            .any(|v| matches!(v, GainViolation::IntegralSign { .. })));

        let verdict = validate_gains(&ControllerGains { k2: 0.2, ..base }, &d);
        assert!(verdict
            .violations
            .iter()
            .any(|v| matches!(v, GainViolation::CurrentBound { .. })));

        // k3 exactly at the upper bound is outside (strict inequality).
        let verdict = validate_gains(&ControllerGains { k3: 2400.0, ..base }, &d);
        assert!(verdict
            .violations
            .iter()
            .any(|v| matches!(v, GainViolation::IntegralBound { .. })));
    }

    #[test]
    fn validate_flags_uncoupled_k4() {
        let verdict = validate_gains(
            &ControllerGains {
                k1: -1.0,
                k2: -1.0,
                k3: 100.0,
                k4: 0.3,
            },
            &dgu(0.2, 1e-3),
        );
        assert!(verdict.stabilizing());
        assert!(!verdict.k4_coupled);
        assert!(!verdict.guaranteed());
    }

    #[test]
    fn synthesized_gains_validate_and_have_sign_pattern() {
        for (r_t, l_t) in [(0.2, 1e-3), (0.8, 3e-3), (0.05, 1.8e-3), (2.0, 2.5e-3)] {
            let d = dgu(r_t, l_t);
            let gains = synthesize_gains(&d, SynthesisMargins::default());
            let verdict = validate_gains(&gains, &d);
            assert!(verdict.guaranteed(), "{r_t}/{l_t}: {:?}", verdict.violations);

            let coeff = closed_loop_coefficients(&gains, &d);
            assert!(coeff.alpha < 0.0);
            assert!(coeff.beta < 0.0);
            assert!(coeff.gamma > 0.0);
        }
    }

    #[test]
    fn synthesis_margin_three_approaches_but_never_reaches_limit() {
        let d = dgu(0.4, 2e-3);
        let near = synthesize_gains(
            &d,
            SynthesisMargins {
                m3: 0.999,
                ..Default::default()
            },
        );
        let limit = integral_gain_limit(near.k1, near.k2, &d);
        assert!(near.k3 < limit);
        assert!(near.k3 > 0.99 * limit);
        assert!(validate_gains(&near, &d).guaranteed());
    }

    #[test]
    fn consensus_rhs_two_unit_disagreement() {
        let comm = comm_laplacian(&CommGraph::from_links(2, &[(0, 1, 1.0)]).unwrap());
        let rhs = consensus_rhs(
            &DVector::from_column_slice(&[2.0, 0.0]),
            &DVector::from_element(2, 1.0),
            &comm,
        );
        assert_eq!(rhs, DVector::from_column_slice(&[2.0, -2.0]));
    }

    #[test]
    fn consensus_rhs_vanishes_on_proportional_currents() {
        let comm = comm_laplacian(&CommGraph::from_links(6, &ring_links(6, 1.7)).unwrap());
        let ratings = DVector::from_column_slice(&[1.5, 2.0, 2.5, 3.0, 3.5, 4.0]);
        let rhs = consensus_rhs(&(0.37 * &ratings), &ratings, &comm);
        assert!(rhs.abs().max() < 1e-12);
    }

    #[test]
    fn omega_two_unit_example() {
        let comm = comm_laplacian(&CommGraph::from_links(2, &[(0, 1, 1.0)]).unwrap());
        let w = omega(
            &DVector::from_column_slice(&[1.0, 0.0]),
            &DVector::from_column_slice(&[2.0, 1.0]),
            &comm,
        );
        assert_eq!(w, DVector::from_column_slice(&[0.5, -1.0]));
    }

    #[test]
    fn omega_kills_constant_integrators() {
        let comm = comm_laplacian(&CommGraph::from_links(4, &ring_links(4, 2.0)).unwrap());
        let ratings = DVector::from_column_slice(&[1.0, 2.0, 3.0, 4.0]);
        let w = omega(&DVector::from_element(4, 7.25), &ratings, &comm);
        assert_eq!(w.abs().max(), 0.0);
    }

    #[test]
    fn primary_command_examples() {
        let gains = ControllerGains {
            k1: -1.0,
            k2: -0.5,
            k3: 10.0,
            k4: 0.5,
        };
        assert_eq!(primary_command(&gains, 0.0, 0.0, 0.0, 1.0), 0.5);
        // omega = 0 reduces to the pure primary law.
        assert_eq!(primary_command(&gains, 2.0, 1.0, 0.1, 0.0), -2.0 - 0.5 + 1.0);
        // Linear in each argument.
        let f = |v, i, x, w| primary_command(&gains, v, i, x, w);
        assert_eq!(f(2.0, 3.0, 4.0, 5.0), f(2.0, 0.0, 0.0, 0.0) + f(0.0, 3.0, 4.0, 5.0));
    }

    proptest! {
        #[test]
        fn prop_omega_invariant_under_constant_offset(
            (n, pairs) in arb_connected_pairs(8),
            offset in -1e3f64..1e3,
            seed in 0u64..1000,
        ) {
            let links: Vec<(usize, usize, f64)> = pairs
                .iter()
                .enumerate()
                .map(|(k, &(a, b))| (a, b, 0.5 + ((seed + k as u64) % 5) as f64))
                .collect();
            let comm = comm_laplacian(&CommGraph::from_links(n, &links).unwrap());
            let ratings = DVector::from_fn(n, |i, _| 1.0 + (i as f64) * 0.5);
            let consensus = DVector::from_fn(n, |i, _| ((seed as f64) * 0.01 + i as f64).sin());
            let shifted = consensus.add_scalar(offset);
            // Exact invariance: the Laplacian applies identical row sums to
            // the constant shift, which cancel term by term.
            let base = omega(&consensus, &ratings, &comm);
            let moved = omega(&shifted, &ratings, &comm);
            prop_assert!((base - moved).abs().max() < 1e-9);
        }

        #[test]
        fn prop_consensus_rhs_sums_to_zero_and_detects_disagreement(
            (n, pairs) in arb_connected_pairs(8),
            seed in 0u64..1000,
        ) {
            let links: Vec<(usize, usize, f64)> = pairs
                .iter()
                .enumerate()
                .map(|(k, &(a, b))| (a, b, 0.1 + ((seed * 7 + k as u64) % 9) as f64 * 0.3))
                .collect();
            let comm = comm_laplacian(&CommGraph::from_links(n, &links).unwrap());
            let ratings = DVector::from_fn(n, |i, _| 1.0 + (i as f64 % 4.0));

            // Proportional currents: rhs vanishes.
            let proportional = 0.8 * &ratings;
            let rhs = consensus_rhs(&proportional, &ratings, &comm);
            prop_assert!(rhs.abs().max() < 1e-10);
            prop_assert!(rhs.sum().abs() < 1e-10);

            // A spread of at least 1.0 in normalized currents: rhs nonzero
            // (connected graph, so the Laplacian kernel is only constants).
            let mut normalized = DVector::from_element(n, 0.5);
            normalized[0] = 1.5;
            let skewed = normalized.component_mul(&ratings);
            let rhs = consensus_rhs(&skewed, &ratings, &comm);
            prop_assert!(rhs.abs().max() > 1e-9);
            prop_assert!(rhs.sum().abs() < 1e-10 * rhs.abs().max().max(1.0));
        }

        #[test]
        fn prop_validate_monotone_in_k3(
            r_t in 0.05f64..2.0,
            l_t in 5e-4f64..5e-3,
            m in proptest::array::uniform3(0.05f64..0.95),
            shrink in 0.01f64..1.0,
        ) {
            let d = dgu(r_t, l_t);
            let gains = synthesize_gains(&d, SynthesisMargins { m1: m[0], m2: m[1], m3: m[2] });
            prop_assert!(validate_gains(&gains, &d).stabilizing());
            let smaller = ControllerGains { k3: gains.k3 * shrink, ..gains };
            prop_assert!(validate_gains(&smaller, &d).stabilizing());
        }
    }
}
