//! Per-agent ratio consensus rules for open networks.
//!
//! Every round an active agent is either *remaining* (active now and next
//! round) or *departing* (active now, gone next round). Remaining agents split
//! their `(x, y)` pair uniformly over themselves and their remaining
//! out-neighbors. Departing agents hand their residual `(x - x_hat, y - y_hat)`
//! to their remaining out-neighbors, so the joining mass they brought leaves
//! with them. Arriving agents register their joining mass and only start
//! exchanging values the following round.

use thiserror::Error;

use crate::topology::AgentId;

/// Denominators at or below this magnitude leave `z` at its previous value.
pub const Y_GUARD: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum ProtocolError {
    #[error("agent {agent}: departing mass stranded, no remaining out-neighbor")]
    StrandedDepartingMass { agent: AgentId },
    #[error("feedback requested over a link that is not in the active graph")]
    FeedbackFromInactive,
    #[error("broadcast requested from an agent in {mode:?} mode")]
    BroadcastFromNonSender { mode: OperatingMode },
}

/// Role of an agent in round `k`, from its activation at `k` and `k + 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OperatingMode {
    Arriving,
    Remaining,
    Departing,
    Inactive,
}

impl OperatingMode {
    /// Agents that transmit during the round.
    pub fn is_sender(self) -> bool {
        matches!(self, OperatingMode::Remaining | OperatingMode::Departing)
    }
}

pub fn classify_mode(active_now: bool, active_next: bool) -> OperatingMode {
    match (active_now, active_next) {
        (true, true) => OperatingMode::Remaining,
        (true, false) => OperatingMode::Departing,
        (false, true) => OperatingMode::Arriving,
        (false, false) => OperatingMode::Inactive,
    }
}

/// One-bit acknowledgement sent by a receiver back to its in-neighbor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeedbackBit(pub u8);

impl FeedbackBit {
    pub fn is_ack(self) -> bool {
        self.0 == 1
    }
}

/// Acknowledgement returned by out-neighbor `l` (in mode `ack_sender_mode`)
/// to the agent that transmits to it. Only remaining agents acknowledge.
/// Either endpoint being outside the active graph is an error: there is no
/// such link this round.
pub fn feedback(
    ack_sender_mode: OperatingMode,
    ack_receiver_active: bool,
) -> Result<FeedbackBit, ProtocolError> {
    match ack_sender_mode {
        _ if !ack_receiver_active => Err(ProtocolError::FeedbackFromInactive),
        OperatingMode::Remaining => Ok(FeedbackBit(1)),
        OperatingMode::Departing => Ok(FeedbackBit(0)),
        OperatingMode::Arriving | OperatingMode::Inactive => {
            Err(ProtocolError::FeedbackFromInactive)
        }
    }
}

/// Protocol variables held by one agent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    /// Mass the agent joined with; zero while inactive.
    pub x_hat: f64,
    /// Auxiliary joining value; one while active.
    pub y_hat: f64,
    pub active: bool,
}

impl AgentState {
    pub const INACTIVE: AgentState = AgentState {
        x: 0.0,
        y: 0.0,
        z: 0.0,
        x_hat: 0.0,
        y_hat: 0.0,
        active: false,
    };
}

impl Default for AgentState {
    fn default() -> Self {
        Self::INACTIVE
    }
}

/// Outgoing weights chosen by one sender for one round.
#[derive(Clone, Debug, PartialEq)]
pub struct SenderWeights {
    pub sender: AgentId,
    pub mode: OperatingMode,
    /// Remaining out-neighbors, ascending.
    pub recipients: Vec<AgentId>,
    /// Weight on each recipient link: `c_lj` for a remaining sender,
    /// `c~_lj` for a departing one.
    pub link_weight: f64,
    /// `c_jj`; zero for departing senders.
    pub self_weight: f64,
}

impl SenderWeights {
    /// `c_lj`, the remaining-mode weight towards `to` (which may be the sender).
    pub fn c(&self, to: AgentId) -> f64 {
        if self.mode != OperatingMode::Remaining {
            return 0.0;
        }
        if to == self.sender {
            self.self_weight
        } else if self.recipients.binary_search(&to).is_ok() {
            self.link_weight
        } else {
            0.0
        }
    }

    /// `c~_lj`, the departing-mode weight towards `to`.
    pub fn c_tilde(&self, to: AgentId) -> f64 {
        if self.mode != OperatingMode::Departing {
            return 0.0;
        }
        if self.recipients.binary_search(&to).is_ok() {
            self.link_weight
        } else {
            0.0
        }
    }

    /// Sum of every outgoing weight, self weight included.
    pub fn column_sum(&self) -> f64 {
        let mut s = self.self_weight;
        for _ in &self.recipients {
            s += self.link_weight;
        }
        s
    }

    /// Per-recipient `(c, c~)` pair passed to [`broadcast_values`].
    pub fn per_recipient(&self) -> (f64, f64) {
        match self.mode {
            OperatingMode::Remaining => (self.link_weight, 0.0),
            OperatingMode::Departing => (0.0, self.link_weight),
            _ => (0.0, 0.0),
        }
    }
}

/// Remaining agent: uniform weight over itself and its remaining out-neighbors.
pub fn assign_remaining_weights(j: AgentId, remaining_out: &[AgentId]) -> SenderWeights {
    let w = 1.0 / (1 + remaining_out.len()) as f64;
    let mut recipients = remaining_out.to_vec();
    recipients.sort_unstable();
    SenderWeights {
        sender: j,
        mode: OperatingMode::Remaining,
        recipients,
        link_weight: w,
        self_weight: w,
    }
}

/// Departing agent: uniform weight over its remaining out-neighbors, none on
/// itself.
pub fn assign_departing_weights(
    j: AgentId,
    remaining_out: &[AgentId],
) -> Result<SenderWeights, ProtocolError> {
    if remaining_out.is_empty() {
        return Err(ProtocolError::StrandedDepartingMass { agent: j });
    }
    let mut recipients = remaining_out.to_vec();
    recipients.sort_unstable();
    Ok(SenderWeights {
        sender: j,
        mode: OperatingMode::Departing,
        link_weight: 1.0 / recipients.len() as f64,
        recipients,
        self_weight: 0.0,
    })
}

/// Value pair a sender transmits to each of its recipients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BroadcastPair {
    pub zeta_x: f64,
    pub zeta_y: f64,
}

/// Remaining senders transmit `c * (x, y)`; departing senders transmit
/// `c~ * (x - x_hat, y - y_hat)`. The other weight is zero by construction,
/// so only the term for the sender's mode is evaluated.
pub fn broadcast_values(
    s: &AgentState,
    mode: OperatingMode,
    c: f64,
    c_tilde: f64,
) -> Result<BroadcastPair, ProtocolError> {
    match mode {
        OperatingMode::Remaining => Ok(BroadcastPair {
            zeta_x: c * s.x,
            zeta_y: c * s.y,
        }),
        OperatingMode::Departing => Ok(BroadcastPair {
            zeta_x: c_tilde * (s.x - s.x_hat),
            zeta_y: c_tilde * (s.y - s.y_hat),
        }),
        other => Err(ProtocolError::BroadcastFromNonSender { mode: other }),
    }
}

/// State of an agent that has just joined with `joining_mass`.
pub fn arriving_update(joining_mass: f64) -> AgentState {
    AgentState {
        x: joining_mass,
        y: 1.0,
        z: joining_mass,
        x_hat: joining_mass,
        y_hat: 1.0,
        active: true,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateOutcome {
    pub state: AgentState,
    /// `y` fell within the guard band and `z` kept its previous value.
    pub degenerate: bool,
}

/// Update for a remaining agent. `from_remaining` must include the agent's own
/// contribution. Contributions are summed in ascending sender order across
/// both lists.
pub fn remaining_update(
    s: &AgentState,
    from_remaining: &[(AgentId, BroadcastPair)],
    from_departing: &[(AgentId, BroadcastPair)],
) -> UpdateOutcome {
    let mut inbox: Vec<&(AgentId, BroadcastPair)> =
        from_remaining.iter().chain(from_departing).collect();
    inbox.sort_by_key(|(id, _)| *id);
    let mut x = 0.0;
    let mut y = 0.0;
    for (_, msg) in inbox {
        x += msg.zeta_x;
        y += msg.zeta_y;
    }
    let degenerate = y.abs() <= Y_GUARD;
    let z = if degenerate { s.z } else { x / y };
    UpdateOutcome {
        state: AgentState {
            x,
            y,
            z,
            x_hat: s.x_hat,
            y_hat: s.y_hat,
            active: true,
        },
        degenerate,
    }
}

/// State of an agent after it has broadcast its residual and left.
pub fn departing_finalize(_s: &AgentState) -> AgentState {
    AgentState::INACTIVE
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(x: f64, y: f64) -> BroadcastPair {
        BroadcastPair {
            zeta_x: x,
            zeta_y: y,
        }
    }

    #[test]
    fn mode_table() {
        assert_eq!(classify_mode(true, true), OperatingMode::Remaining);
        assert_eq!(classify_mode(true, false), OperatingMode::Departing);
        assert_eq!(classify_mode(false, true), OperatingMode::Arriving);
        assert_eq!(classify_mode(false, false), OperatingMode::Inactive);
    }

    #[test]
    fn feedback_bits() {
        assert_eq!(feedback(OperatingMode::Remaining, true), Ok(FeedbackBit(1)));
        assert_eq!(feedback(OperatingMode::Departing, true), Ok(FeedbackBit(0)));
        assert_eq!(
            feedback(OperatingMode::Inactive, true),
            Err(ProtocolError::FeedbackFromInactive)
        );
        assert!(feedback(OperatingMode::Arriving, true).is_err());
        assert!(feedback(OperatingMode::Remaining, false).is_err());
    }

    #[test]
    fn remaining_weights() {
        let w = assign_remaining_weights(AgentId(0), &[AgentId(3), AgentId(1), AgentId(2)]);
        assert_eq!(w.recipients, vec![AgentId(1), AgentId(2), AgentId(3)]);
        assert_eq!(w.c(AgentId(0)), 0.25);
        assert_eq!(w.c(AgentId(2)), 0.25);
        assert_eq!(w.c(AgentId(4)), 0.0);
        assert_eq!(w.c_tilde(AgentId(2)), 0.0);
        assert_eq!(w.column_sum(), 1.0);

        let alone = assign_remaining_weights(AgentId(5), &[]);
        assert_eq!(alone.c(AgentId(5)), 1.0);

        let one = assign_remaining_weights(AgentId(0), &[AgentId(1)]);
        assert_eq!((one.c(AgentId(0)), one.c(AgentId(1))), (0.5, 0.5));
    }

    #[test]
    fn departing_weights() {
        let w = assign_departing_weights(AgentId(0), &[AgentId(1), AgentId(2)]).unwrap();
        assert_eq!(w.c_tilde(AgentId(1)), 0.5);
        assert_eq!(w.c_tilde(AgentId(0)), 0.0);
        assert_eq!(w.c(AgentId(1)), 0.0);
        let single = assign_departing_weights(AgentId(0), &[AgentId(4)]).unwrap();
        assert_eq!(single.c_tilde(AgentId(4)), 1.0);
        assert_eq!(
            assign_departing_weights(AgentId(7), &[]),
            Err(ProtocolError::StrandedDepartingMass { agent: AgentId(7) })
        );
    }

    #[test]
    fn column_sums_are_unit_for_many_degrees() {
        for d in 0..200 {
            let outs: Vec<AgentId> = (1..=d).map(AgentId).collect();
            let w = assign_remaining_weights(AgentId(0), &outs);
            assert!(
                (w.column_sum() - 1.0).abs() <= 1e-12,
                "remaining degree {d}"
            );
            if d > 0 {
                let w = assign_departing_weights(AgentId(0), &outs).unwrap();
                assert!(
                    (w.column_sum() - 1.0).abs() <= 1e-12,
                    "departing degree {d}"
                );
            }
        }
    }

    #[test]
    fn broadcast_examples() {
        let s = AgentState {
            x: 4.0,
            y: 2.0,
            ..arriving_update(4.0)
        };
        assert_eq!(
            broadcast_values(&s, OperatingMode::Remaining, 0.25, 0.0).unwrap(),
            pair(1.0, 0.5)
        );

        let d = AgentState {
            x: 7.0,
            y: 1.2,
            z: 7.0 / 1.2,
            x_hat: 9.0,
            y_hat: 1.0,
            active: true,
        };
        let out = broadcast_values(&d, OperatingMode::Departing, 0.0, 0.5).unwrap();
        assert_eq!(out.zeta_x, -1.0);
        assert!((out.zeta_y - 0.1).abs() < 1e-15);

        let fresh = arriving_update(3.0);
        assert_eq!(
            broadcast_values(&fresh, OperatingMode::Departing, 0.0, 1.0).unwrap(),
            pair(0.0, 0.0)
        );

        assert!(broadcast_values(&fresh, OperatingMode::Arriving, 0.0, 0.0).is_err());
        assert!(broadcast_values(&fresh, OperatingMode::Inactive, 0.0, 0.0).is_err());
    }

    #[test]
    fn arrival_registers_joining_mass() {
        let s = arriving_update(5.0);
        assert_eq!((s.x, s.y, s.z, s.x_hat, s.y_hat), (5.0, 1.0, 5.0, 5.0, 1.0));
        assert!(s.active);
        let z = arriving_update(0.0);
        assert_eq!((z.x, z.y, z.z, z.x_hat, z.y_hat), (0.0, 1.0, 0.0, 0.0, 1.0));
        assert_eq!(arriving_update(17.3).z, 17.3);
    }

    #[test]
    fn lone_agent_is_a_fixed_point() {
        let s = arriving_update(6.5);
        let w = assign_remaining_weights(AgentId(0), &[]);
        let own = broadcast_values(&s, OperatingMode::Remaining, w.self_weight, 0.0).unwrap();
        let out = remaining_update(&s, &[(AgentId(0), own)], &[]);
        assert_eq!(out.state, s);
        assert!(!out.degenerate);
    }

    #[test]
    fn three_cycle_single_step() {
        // Each agent keeps 1/2 and sends 1/2 to its successor.
        let xs = [3.0, 6.0, 9.0];
        let states: Vec<AgentState> = xs.iter().map(|&x| arriving_update(x)).collect();
        let msgs: Vec<BroadcastPair> = states
            .iter()
            .map(|s| broadcast_values(s, OperatingMode::Remaining, 0.5, 0.0).unwrap())
            .collect();
        let expected = [6.0, 4.5, 7.5];
        for j in 0..3 {
            let pred = (j + 2) % 3;
            let inbox = [(AgentId(j), msgs[j]), (AgentId(pred), msgs[pred])];
            let out = remaining_update(&states[j], &inbox, &[]);
            assert_eq!(out.state.x, expected[j]);
            assert_eq!(out.state.y, 1.0);
            assert_eq!(out.state.z, expected[j]);
        }
    }

    #[test]
    fn departing_residual_is_absorbed() {
        let s = AgentState {
            x: 2.0,
            y: 1.0,
            z: 2.0,
            x_hat: 2.0,
            y_hat: 1.0,
            active: true,
        };
        let out = remaining_update(
            &s,
            &[(AgentId(1), pair(2.0, 1.0))],
            &[(AgentId(0), pair(-1.0, 0.1))],
        );
        assert_eq!(out.state.x, 1.0);
        assert!((out.state.y - 1.1).abs() < 1e-15);
        assert!((out.state.z - 0.909_090_909_090_909).abs() < 1e-12);
    }

    #[test]
    fn guard_freezes_ratio() {
        let s = AgentState {
            z: 4.0,
            ..arriving_update(4.0)
        };
        let out = remaining_update(
            &s,
            &[(AgentId(0), pair(1.0, 0.5))],
            &[(AgentId(1), pair(0.0, -0.5))],
        );
        assert!(out.degenerate);
        assert_eq!(out.state.z, 4.0);
        assert_eq!(out.state.x, 1.0);
        assert_eq!(out.state.y, 0.0);
    }

    #[test]
    fn summation_order_is_by_sender_id() {
        // Non-associative values: order matters in floating point.
        let s = arriving_update(0.0);
        let a = (AgentId(0), pair(1e16, 0.0));
        let b = (AgentId(1), pair(1.0, 0.0));
        let c = (AgentId(2), pair(-1e16, 0.0));
        let x1 = remaining_update(&s, &[c, a], &[b]).state.x;
        let x2 = remaining_update(&s, &[a, b, c], &[]).state.x;
        assert_eq!(x1.to_bits(), x2.to_bits());
        assert_eq!(x1, ((1e16 + 1.0) + -1e16));
    }

    #[test]
    fn departure_clears_everything() {
        let s = AgentState {
            x: 3.0,
            y: 0.7,
            z: 3.0 / 0.7,
            x_hat: 9.0,
            y_hat: 1.0,
            active: true,
        };
        let out = departing_finalize(&s);
        assert_eq!(out, AgentState::INACTIVE);
        assert_eq!(departing_finalize(&out), out);
    }
}
