//! Synchronous round loop, metrics, and the matrix-form cross-check.
//!
//! Each call to [`WorldState::step`] runs one round for every agent in the
//! order: mode classification, feedback, weight assignment, broadcast,
//! remaining updates, departing finalization, arrival registration.
//!
//! The matrix view stacks all agent variables into pool-length vectors and
//! collects the round's weights into `C` (remaining senders), `C~`
//! (departing senders) and the diagonal arrival selector `W`:
//!
//! ```text
//! x(k+1) = C x(k) + C~ (x(k) - x_hat(k)) + W x_hat(k+1)
//! ```
//!
//! It is only built when checking is requested; the per-agent path is what
//! produces the trajectories.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::protocol::{
    arriving_update, assign_departing_weights, assign_remaining_weights, broadcast_values,
    classify_mode, departing_finalize, feedback, remaining_update, AgentState, BroadcastPair,
    OperatingMode, ProtocolError, SenderWeights,
};
use crate::scenario::{
    sample_mass, stream_rng, EventSampler, RoundEvents, Scenario, ScenarioError, Stream,
};
use crate::topology::{ActivationVector, AgentId, OpenDigraph, Round, TransitionReport, Violation};

/// Relative tolerance on the mass-preservation residuals.
pub const MASS_TOLERANCE: f64 = 1e-9;
/// Absolute tolerance on active column sums of `C + C~`.
pub const COLUMN_TOLERANCE: f64 = 1e-12;
/// Absolute tolerance between per-agent and matrix-form trajectories.
pub const ORACLE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("round {round}, agent {agent}: {source}")]
    Protocol {
        round: Round,
        agent: AgentId,
        #[source]
        source: ProtocolError,
    },
    #[error("round {round}: invalid events: {report}")]
    InvalidEvents {
        round: Round,
        report: TransitionReport,
    },
    #[error("round {round}: {check} violated: {detail}")]
    InvariantViolation {
        round: Round,
        check: &'static str,
        detail: String,
    },
    #[error("invalid state: {0}")]
    InvalidState(String),
}

/// Weights of every sender in one round, indexed by agent.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundWeights {
    senders: Vec<Option<SenderWeights>>,
}

impl RoundWeights {
    pub fn pool_size(&self) -> usize {
        self.senders.len()
    }

    pub fn sender(&self, j: AgentId) -> Option<&SenderWeights> {
        self.senders[j.0].as_ref()
    }

    /// `c_lj`: weight from sender `j` to receiver `l`.
    pub fn c(&self, l: AgentId, j: AgentId) -> f64 {
        self.sender(j).map_or(0.0, |w| w.c(l))
    }

    /// `c~_lj`: departing weight from sender `j` to receiver `l`.
    pub fn c_tilde(&self, l: AgentId, j: AgentId) -> f64 {
        self.sender(j).map_or(0.0, |w| w.c_tilde(l))
    }
}

/// Bookkeeping returned by one round.
#[derive(Clone, Debug)]
pub struct StepRecord {
    /// Round that was executed (state moved from `round` to `round + 1`).
    pub round: Round,
    pub activation_before: ActivationVector,
    pub modes: Vec<OperatingMode>,
    pub weights: RoundWeights,
    /// Remaining agents whose `y` hit the guard band this round.
    pub degenerate: usize,
}

/// Remaining out-neighbor lists reused while the activation transition is
/// unchanged, since acknowledgements only carry information when the
/// activation changes.
#[derive(Clone, Debug, Default)]
pub struct FeedbackCache {
    key: Option<(ActivationVector, ActivationVector)>,
    remaining_out: Vec<Vec<AgentId>>,
    refreshes: usize,
}

impl FeedbackCache {
    /// Number of rounds in which feedback was actually exchanged.
    pub fn refreshes(&self) -> usize {
        self.refreshes
    }
}

/// Global state of the simulated network.
#[derive(Clone, Debug)]
pub struct WorldState {
    pub round: Round,
    pub graph: OpenDigraph,
    pub activation: ActivationVector,
    pub states: Vec<AgentState>,
    /// Total number of y-guard activations so far.
    pub degeneracy_flags: usize,
}

impl WorldState {
    /// Round-0 state: every initially active agent has just joined with the
    /// given mass (indexed by agent; ignored for inactive agents).
    pub fn new(
        graph: OpenDigraph,
        initial: ActivationVector,
        masses: &[f64],
    ) -> Result<Self, EngineError> {
        let n = graph.pool_size();
        if initial.pool_size() != n || masses.len() != n {
            return Err(EngineError::InvalidState(format!(
                "pool of {n} agents but {} activation flags and {} masses",
                initial.pool_size(),
                masses.len()
            )));
        }
        if initial.count() == 0 {
            return Err(EngineError::InvalidState("no active agent".into()));
        }
        let states = (0..n)
            .map(|j| {
                if initial.is_active(AgentId(j)) {
                    arriving_update(masses[j])
                } else {
                    AgentState::INACTIVE
                }
            })
            .collect();
        Ok(Self {
            round: 0,
            graph,
            activation: initial,
            states,
            degeneracy_flags: 0,
        })
    }

    pub fn pool_size(&self) -> usize {
        self.states.len()
    }

    pub fn step(&mut self, events: &RoundEvents) -> Result<StepRecord, EngineError> {
        self.step_inner(events, None)
    }

    /// Same as [`step`](Self::step) but reuses acknowledgements from `cache`
    /// when the activation transition has not changed. Produces identical
    /// results.
    pub fn step_cached(
        &mut self,
        events: &RoundEvents,
        cache: &mut FeedbackCache,
    ) -> Result<StepRecord, EngineError> {
        self.step_inner(events, Some(cache))
    }

    fn check_events(&self, events: &RoundEvents) -> Result<ActivationVector, EngineError> {
        let mut violations = Vec::new();
        let arrivals = events.arriving_ids();
        for (i, &d) in events.departures.iter().enumerate() {
            if !self.activation.is_active(d) || events.departures[..i].contains(&d) {
                violations.push(Violation::DepartingNotActive(d));
            }
            if arrivals.contains(&d) {
                violations.push(Violation::ArrivesAndDeparts(d));
            }
        }
        for (i, &a) in arrivals.iter().enumerate() {
            if self.activation.is_active(a) || arrivals[..i].contains(&a) {
                violations.push(Violation::ArrivingAlreadyActive(a));
            }
        }
        let next = self.activation.transition(&events.departures, &arrivals);
        if violations.is_empty() && next.count() == 0 {
            violations.push(Violation::EmptyNetwork);
        }
        if violations.is_empty() {
            Ok(next)
        } else {
            Err(EngineError::InvalidEvents {
                round: self.round,
                report: TransitionReport { violations },
            })
        }
    }

    /// `out(j) ∩ R(k)` for every active `j`, counted from acknowledgements.
    fn exchange_feedback(&self, modes: &[OperatingMode]) -> Result<Vec<Vec<AgentId>>, EngineError> {
        let n = self.pool_size();
        let mut remaining_out = vec![Vec::new(); n];
        for j in self.activation.active_ids() {
            for &l in self.graph.out_neighbors(j) {
                if !self.activation.is_active(l) {
                    continue;
                }
                let bit = feedback(modes[l.0], true).map_err(|source| EngineError::Protocol {
                    round: self.round,
                    agent: l,
                    source,
                })?;
                if bit.is_ack() {
                    remaining_out[j.0].push(l);
                }
            }
        }
        Ok(remaining_out)
    }

    fn step_inner(
        &mut self,
        events: &RoundEvents,
        cache: Option<&mut FeedbackCache>,
    ) -> Result<StepRecord, EngineError> {
        let n = self.pool_size();
        let next = self.check_events(events)?;
        let modes: Vec<OperatingMode> = (0..n)
            .map(|j| classify_mode(self.activation.flags()[j], next.flags()[j]))
            .collect();

        match cache {
            Some(cache) => {
                let key = (self.activation.clone(), next.clone());
                if cache.key.as_ref() != Some(&key) {
                    cache.remaining_out = self.exchange_feedback(&modes)?;
                    cache.key = Some(key);
                    cache.refreshes += 1;
                }
                let lists = std::mem::take(&mut cache.remaining_out);
                let result = self.round_with(&lists, &modes, events, next);
                cache.remaining_out = lists;
                result
            }
            None => {
                let lists = self.exchange_feedback(&modes)?;
                self.round_with(&lists, &modes, events, next)
            }
        }
    }

    fn round_with(
        &mut self,
        remaining_out: &[Vec<AgentId>],
        modes: &[OperatingMode],
        events: &RoundEvents,
        next: ActivationVector,
    ) -> Result<StepRecord, EngineError> {
        let k = self.round;
        let n = self.pool_size();

        let mut senders: Vec<Option<SenderWeights>> = vec![None; n];
        let mut broadcasts: Vec<Option<BroadcastPair>> = vec![None; n];
        for j in self.activation.active_ids() {
            let weights = match modes[j.0] {
                OperatingMode::Remaining => assign_remaining_weights(j, &remaining_out[j.0]),
                OperatingMode::Departing => assign_departing_weights(j, &remaining_out[j.0])
                    .map_err(|source| EngineError::Protocol {
                        round: k,
                        agent: j,
                        source,
                    })?,
                _ => unreachable!("active agent is remaining or departing"),
            };
            let (c, c_tilde) = weights.per_recipient();
            let pair =
                broadcast_values(&self.states[j.0], modes[j.0], c, c_tilde).map_err(|source| {
                    EngineError::Protocol {
                        round: k,
                        agent: j,
                        source,
                    }
                })?;
            broadcasts[j.0] = Some(pair);
            senders[j.0] = Some(weights);
        }

        let mut new_states = self.states.clone();
        let mut degenerate = 0;
        let mut from_remaining = Vec::new();
        let mut from_departing = Vec::new();
        for j in 0..n {
            let id = AgentId(j);
            match modes[j] {
                OperatingMode::Remaining => {
                    from_remaining.clear();
                    from_departing.clear();
                    from_remaining.push((id, broadcasts[j].expect("remaining agent broadcasts")));
                    for &i in self.graph.in_neighbors(id) {
                        let Some(pair) = broadcasts[i.0] else {
                            continue;
                        };
                        debug_assert!(senders[i.0]
                            .as_ref()
                            .is_some_and(|w| w.recipients.binary_search(&id).is_ok()));
                        match modes[i.0] {
                            OperatingMode::Remaining => from_remaining.push((i, pair)),
                            OperatingMode::Departing => from_departing.push((i, pair)),
                            _ => {}
                        }
                    }
                    let out = remaining_update(&self.states[j], &from_remaining, &from_departing);
                    if out.degenerate {
                        degenerate += 1;
                        log::debug!("round {k}: agent {j} y within guard band, z held");
                    }
                    new_states[j] = out.state;
                }
                OperatingMode::Departing => new_states[j] = departing_finalize(&self.states[j]),
                OperatingMode::Arriving | OperatingMode::Inactive => {}
            }
        }
        for &(a, mass) in &events.arrivals {
            new_states[a.0] = arriving_update(mass);
        }

        let before = std::mem::replace(&mut self.activation, next);
        self.states = new_states;
        self.round += 1;
        self.degeneracy_flags += degenerate;
        Ok(StepRecord {
            round: k,
            activation_before: before,
            modes: modes.to_vec(),
            weights: RoundWeights { senders },
            degenerate,
        })
    }

    /// Current target average, the mean joining mass of active agents.
    pub fn target_average(&self) -> Result<f64, EngineError> {
        target_average(&self.activation, &self.states)
    }

    pub fn metrics(&self, flags: usize) -> Result<MetricsRecord, EngineError> {
        let x_bar = self.target_average()?;
        let (mut sum_x, mut sum_y) = (0.0, 0.0);
        for j in self.activation.active_ids() {
            sum_x += self.states[j.0].x;
            sum_y += self.states[j.0].y;
        }
        Ok(MetricsRecord {
            k: self.round,
            n: self.activation.count(),
            x_bar,
            err: consensus_error(&self.activation, &self.states, x_bar),
            sum_x,
            sum_y,
            flags,
        })
    }
}

/// Mean joining mass over active agents.
pub fn target_average(
    activation: &ActivationVector,
    states: &[AgentState],
) -> Result<f64, EngineError> {
    let n = activation.count();
    if n == 0 {
        return Err(EngineError::InvalidState("no active agent".into()));
    }
    let sum: f64 = activation.active_ids().map(|j| states[j.0].x_hat).sum();
    Ok(sum / n as f64)
}

/// Euclidean distance of the active agents' ratios from `x_bar`. Inactive
/// agents do not contribute.
pub fn consensus_error(activation: &ActivationVector, states: &[AgentState], x_bar: f64) -> f64 {
    activation
        .active_ids()
        .map(|j| {
            let d = states[j.0].z - x_bar;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Per-round observables.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRecord {
    pub k: Round,
    pub n: usize,
    pub x_bar: f64,
    pub err: f64,
    pub sum_x: f64,
    pub sum_y: f64,
    /// y-guard activations during the round that produced this state.
    pub flags: usize,
}

/// Matrix form of one round. Entry `(l, j)` is the weight from sender `j` to
/// receiver `l`.
#[derive(Clone, Debug, PartialEq)]
pub struct SystemMatrices {
    pub c: DMatrix<f64>,
    pub c_tilde: DMatrix<f64>,
    /// Diagonal, one exactly for agents arriving this round.
    pub w: DMatrix<f64>,
}

pub fn build_matrices(
    weights: &RoundWeights,
    now: &ActivationVector,
    next: &ActivationVector,
) -> SystemMatrices {
    let n = weights.pool_size();
    let mut c = DMatrix::zeros(n, n);
    let mut c_tilde = DMatrix::zeros(n, n);
    let mut w = DMatrix::zeros(n, n);
    for j in 0..n {
        if let Some(s) = weights.sender(AgentId(j)) {
            match s.mode {
                OperatingMode::Remaining => {
                    c[(j, j)] = s.self_weight;
                    for l in &s.recipients {
                        c[(l.0, j)] = s.link_weight;
                    }
                }
                OperatingMode::Departing => {
                    for l in &s.recipients {
                        c_tilde[(l.0, j)] = s.link_weight;
                    }
                }
                _ => {}
            }
        }
        if next.flags()[j] && !now.flags()[j] {
            w[(j, j)] = 1.0;
        }
    }
    SystemMatrices { c, c_tilde, w }
}

/// Applies the stacked recursion for one round to `(x, y)`.
#[allow(clippy::too_many_arguments)]
pub fn oracle_step(
    x: &DVector<f64>,
    y: &DVector<f64>,
    x_hat: &DVector<f64>,
    y_hat: &DVector<f64>,
    x_hat_next: &DVector<f64>,
    y_hat_next: &DVector<f64>,
    m: &SystemMatrices,
) -> (DVector<f64>, DVector<f64>) {
    let x_next = &m.c * x + &m.c_tilde * (x - x_hat) + &m.w * x_hat_next;
    let y_next = &m.c * y + &m.c_tilde * (y - y_hat) + &m.w * y_hat_next;
    (x_next, y_next)
}

/// Largest `|column sum - 1|` of `C + C~`, restricted to rows active at `now`,
/// over senders active at `now`.
pub fn column_stochasticity_check(m: &SystemMatrices, now: &ActivationVector) -> f64 {
    let n = m.c.ncols();
    let mut worst: f64 = 0.0;
    for j in now.active_ids() {
        let mut sum = 0.0;
        for l in 0..n {
            if now.flags()[l] {
                sum += m.c[(l, j.0)] + m.c_tilde[(l, j.0)];
            }
        }
        worst = worst.max((sum - 1.0).abs());
    }
    worst
}

/// Gap between active mass and active joining mass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MassResidual {
    /// `Σ x - Σ x_hat` over active agents.
    pub x: f64,
    /// `Σ y - Σ y_hat` over active agents.
    pub y: f64,
    pub x_scale: f64,
    pub y_scale: f64,
}

impl MassResidual {
    pub fn within_tolerance(&self) -> bool {
        self.x.abs() <= MASS_TOLERANCE * self.x_scale
            && self.y.abs() <= MASS_TOLERANCE * self.y_scale
    }

    /// Residuals divided by their tolerance scales.
    pub fn relative(&self) -> (f64, f64) {
        (self.x.abs() / self.x_scale, self.y.abs() / self.y_scale)
    }
}

pub fn mass_check(w: &WorldState) -> MassResidual {
    let (mut sx, mut sxh, mut sy, mut syh) = (0.0, 0.0, 0.0, 0.0);
    for j in w.activation.active_ids() {
        let s = &w.states[j.0];
        sx += s.x;
        sxh += s.x_hat;
        sy += s.y;
        syh += s.y_hat;
    }
    MassResidual {
        x: sx - sxh,
        y: sy - syh,
        x_scale: sxh.abs().max(1.0),
        y_scale: syh.abs().max(1.0),
    }
}

/// Stacked `(x, y, x_hat, y_hat)` of all agents.
pub fn stacked(states: &[AgentState]) -> [DVector<f64>; 4] {
    let n = states.len();
    [
        DVector::from_iterator(n, states.iter().map(|s| s.x)),
        DVector::from_iterator(n, states.iter().map(|s| s.y)),
        DVector::from_iterator(n, states.iter().map(|s| s.x_hat)),
        DVector::from_iterator(n, states.iter().map(|s| s.y_hat)),
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunOptions {
    /// Verify mass preservation, column stochasticity and strong connectivity
    /// every round and abort on violation.
    pub check: bool,
    /// Run the matrix-form trajectory alongside and compare every round.
    pub oracle: bool,
    /// Keep a per-agent trace of every round.
    pub record_states: bool,
    /// Exchange acknowledgements only when the activation transition changes.
    pub cache_feedback: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            check: true,
            oracle: false,
            record_states: false,
            cache_feedback: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StateRow {
    pub k: Round,
    pub agent: AgentId,
    pub active: bool,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub x_hat: f64,
}

/// Worst values seen by the runtime checks over a run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunReport {
    /// Largest mass residuals relative to their tolerance scales.
    pub max_mass_residual_x: f64,
    pub max_mass_residual_y: f64,
    /// `None` when matrices were not built.
    pub max_column_deviation: Option<f64>,
    pub max_oracle_deviation: Option<f64>,
    pub arrivals: usize,
    pub departures: usize,
    pub skipped_events: usize,
    pub degeneracy_flags: usize,
    pub feedback_refreshes: usize,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub metrics: Vec<MetricsRecord>,
    pub world: WorldState,
    pub states: Option<Vec<StateRow>>,
    pub report: RunReport,
}

fn state_rows(w: &WorldState, out: &mut Vec<StateRow>) {
    out.extend(w.states.iter().enumerate().map(|(j, s)| StateRow {
        k: w.round,
        agent: AgentId(j),
        active: w.activation.flags()[j],
        x: s.x,
        y: s.y,
        z: s.z,
        x_hat: s.x_hat,
    }));
}

/// Initial world for a scenario, plus the event sampler positioned right
/// after the initial masses were drawn.
pub fn initialize(sc: &Scenario) -> Result<(WorldState, EventSampler), EngineError> {
    let setup = sc.setup()?;
    let mut mass_rng = stream_rng(sc.seed, Stream::Mass);
    let mut masses = vec![0.0; sc.pool_size];
    for j in setup.initial.active_ids() {
        masses[j.0] = sample_mass(&sc.mass_initial, &mut mass_rng)?;
    }
    let world = WorldState::new(setup.graph, setup.initial, &masses)?;
    Ok((world, EventSampler::new(sc.seed, mass_rng)))
}

/// Runs a scenario for its full horizon. Metrics are recorded for the state
/// after every round, `k = 1..=rounds`.
pub fn run(sc: &Scenario, opts: RunOptions) -> Result<RunOutput, EngineError> {
    let (mut world, mut sampler) = initialize(sc)?;
    let mut cache = FeedbackCache::default();
    let mut metrics = Vec::with_capacity(sc.rounds as usize);
    let mut states = opts.record_states.then(Vec::new);
    let mut report = RunReport::default();
    if opts.check || opts.oracle {
        report.max_column_deviation = Some(0.0);
    }
    let mut oracle = opts.oracle.then(|| {
        let [x, y, _, _] = stacked(&world.states);
        (x, y)
    });
    if opts.oracle {
        report.max_oracle_deviation = Some(0.0);
    }

    for k in 0..sc.rounds {
        let events = sampler.sample_round_events(sc, k, &world.activation, &world.graph)?;
        report.arrivals += events.arrivals.len();
        report.departures += events.departures.len();
        let before = (opts.check || opts.oracle).then(|| world.states.clone());
        let record = if opts.cache_feedback {
            world.step_cached(&events, &mut cache)?
        } else {
            world.step(&events)?
        };

        let residual = mass_check(&world);
        let (rx, ry) = residual.relative();
        report.max_mass_residual_x = report.max_mass_residual_x.max(rx);
        report.max_mass_residual_y = report.max_mass_residual_y.max(ry);
        if opts.check && !residual.within_tolerance() {
            return Err(EngineError::InvariantViolation {
                round: k,
                check: "mass preservation",
                detail: format!("residuals x={:e}, y={:e}", residual.x, residual.y),
            });
        }
        if opts.check && !world.graph.is_active_strongly_connected(&world.activation) {
            return Err(EngineError::InvariantViolation {
                round: world.round,
                check: "strong connectivity",
                detail: "active subgraph is not strongly connected".into(),
            });
        }

        if let Some(before) = before {
            let m = build_matrices(
                &record.weights,
                &record.activation_before,
                &world.activation,
            );
            let dev = column_stochasticity_check(&m, &record.activation_before);
            let worst = report.max_column_deviation.get_or_insert(0.0);
            *worst = worst.max(dev);
            if opts.check && dev > COLUMN_TOLERANCE {
                return Err(EngineError::InvariantViolation {
                    round: k,
                    check: "column stochasticity",
                    detail: format!("max column-sum deviation {dev:e}"),
                });
            }
            if let Some((ox, oy)) = oracle.as_mut() {
                let [_, _, xh, yh] = stacked(&before);
                let [x, y, xh_next, yh_next] = stacked(&world.states);
                let (nx, ny) = oracle_step(ox, oy, &xh, &yh, &xh_next, &yh_next, &m);
                let dev = (&nx - &x).amax().max((&ny - &y).amax());
                let worst = report.max_oracle_deviation.get_or_insert(0.0);
                *worst = worst.max(dev);
                if opts.check && dev > ORACLE_TOLERANCE {
                    return Err(EngineError::InvariantViolation {
                        round: k,
                        check: "matrix-form equivalence",
                        detail: format!("max deviation {dev:e}"),
                    });
                }
                *ox = nx;
                *oy = ny;
            }
        }

        metrics.push(world.metrics(record.degenerate)?);
        if let Some(rows) = states.as_mut() {
            state_rows(&world, rows);
        }
    }

    report.skipped_events = sampler.skipped();
    report.degeneracy_flags = world.degeneracy_flags;
    report.feedback_refreshes = if opts.cache_feedback {
        cache.refreshes()
    } else {
        sc.rounds as usize
    };
    Ok(RunOutput {
        metrics,
        world,
        states,
        report,
    })
}
