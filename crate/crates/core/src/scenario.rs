//! Churn scenarios: configuration, file format, and per-round event sampling.
//!
//! A scenario file is line oriented. `#` starts a comment. Directives:
//!
//! ```text
//! pool <n>
//! initial <id> <id> ...        | initial random <count>
//! graph cycle | graph auto <extra_edge_prob>
//! edge <i> <j>                 # v_j receives from v_i, repeatable
//! rounds <n>
//! seed <u64>
//! interval <start> <end> <prob>   # churn window over rounds (start, end]
//! mass_initial uniform <lo> <hi> | mass_initial const <v>
//! mass_arrival uniform <lo> <hi> | mass_arrival const <v>
//! at <k> arrive <id> <mass>
//! at <k> depart <id>
//! ```

use std::collections::BTreeSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::topology::{
    validate_transition, ActivationVector, AgentId, OpenDigraph, Round, TopologyError,
    TransitionReport,
};

/// Candidate draws per round before the stochastic event is skipped.
pub const RETRY_BUDGET: usize = 32;

/// Draws for a random initial active set before giving up.
const INITIAL_SET_ATTEMPTS: usize = 1000;

/// Scenario file reproducing the reference experiment: 150 potential agents,
/// 100 initially active, churn in (1, 80] at 10% and (101, 180] at 20%.
pub const PAPER_SCENARIO: &str = "\
# Reference open-network experiment.
pool 150
initial random 100
graph auto 0.1
rounds 200
seed 0
mass_initial uniform 1 10
mass_arrival uniform 10 20
interval 1 80 0.1
interval 101 180 0.2
";

#[derive(Debug, Error, PartialEq)]
pub enum ScenarioError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("round {round}: scripted events rejected: {report}")]
    ScriptedEventRejected {
        round: Round,
        report: TransitionReport,
    },
    #[error("round {round}: scripted {kind} of agent {agent} is inconsistent with the current activation")]
    ScriptedEventInconsistent {
        round: Round,
        agent: AgentId,
        kind: &'static str,
    },
    #[error("initial active set: {0}")]
    InitialSet(String),
    #[error(transparent)]
    Topology(#[from] TopologyError),
}

/// Distribution of joining masses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MassDistribution {
    Uniform { lo: f64, hi: f64 },
    Constant(f64),
}

pub fn sample_mass<R: Rng + ?Sized>(
    dist: &MassDistribution,
    rng: &mut R,
) -> Result<f64, ScenarioError> {
    match *dist {
        MassDistribution::Constant(v) => Ok(v),
        MassDistribution::Uniform { lo, hi } => {
            if !lo.is_finite() || !hi.is_finite() || lo > hi {
                return Err(ScenarioError::InvalidArgument(format!(
                    "uniform mass interval [{lo}, {hi}] is empty or not finite"
                )));
            }
            Ok(rng.gen_range(lo..=hi))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum GraphSpec {
    Cycle,
    Auto { extra_edge_prob: f64 },
    Edges(Vec<(AgentId, AgentId)>),
}

#[derive(Clone, Debug, PartialEq)]
pub enum InitialSpec {
    Explicit(Vec<AgentId>),
    Random { count: usize },
}

/// Stochastic churn over rounds `start < k <= end`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChurnWindow {
    pub start: Round,
    pub end: Round,
    pub event_prob: f64,
}

impl ChurnWindow {
    pub fn contains(&self, k: Round) -> bool {
        self.start < k && k <= self.end
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EventKind {
    Arrive { agent: AgentId, joining_mass: f64 },
    Depart { agent: AgentId },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScriptedEvent {
    pub round: Round,
    pub kind: EventKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub pool_size: usize,
    pub initial: InitialSpec,
    pub graph: GraphSpec,
    pub rounds: Round,
    pub seed: u64,
    pub churn_windows: Vec<ChurnWindow>,
    pub scripted_events: Vec<ScriptedEvent>,
    pub mass_initial: MassDistribution,
    pub mass_arrival: MassDistribution,
}

/// Arrivals and departures applied at one round; they take effect at `k + 1`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RoundEvents {
    pub arrivals: Vec<(AgentId, f64)>,
    pub departures: Vec<AgentId>,
}

impl RoundEvents {
    pub fn is_empty(&self) -> bool {
        self.arrivals.is_empty() && self.departures.is_empty()
    }

    pub fn arriving_ids(&self) -> Vec<AgentId> {
        self.arrivals.iter().map(|&(a, _)| a).collect()
    }
}

/// Named, independent random streams derived from the scenario seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Graph = 1,
    Initial = 2,
    Churn = 3,
    Mass = 4,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Graph and initial activation resolved from a scenario.
#[derive(Clone, Debug)]
pub struct Setup {
    pub graph: OpenDigraph,
    pub initial: ActivationVector,
}

impl Scenario {
    pub fn build_graph(&self) -> Result<OpenDigraph, ScenarioError> {
        Ok(match &self.graph {
            GraphSpec::Cycle => OpenDigraph::cycle(self.pool_size)?,
            GraphSpec::Auto { extra_edge_prob } => OpenDigraph::generate(
                self.pool_size,
                *extra_edge_prob,
                &mut stream_rng(self.seed, Stream::Graph),
            )?,
            GraphSpec::Edges(edges) => OpenDigraph::new(self.pool_size, edges.iter().copied())?,
        })
    }

    /// Builds the graph and picks the initial active set. A random initial
    /// set is redrawn until its induced subgraph is strongly connected.
    pub fn setup(&self) -> Result<Setup, ScenarioError> {
        let graph = self.build_graph()?;
        let initial = match &self.initial {
            InitialSpec::Explicit(ids) => {
                let a = ActivationVector::from_active(self.pool_size, ids.iter().copied());
                if !graph.is_active_strongly_connected(&a) {
                    return Err(ScenarioError::InitialSet(
                        "induced subgraph is not strongly connected".into(),
                    ));
                }
                a
            }
            InitialSpec::Random { count } => {
                let mut rng = stream_rng(self.seed, Stream::Initial);
                let ids: Vec<usize> = (0..self.pool_size).collect();
                let mut found = None;
                for _ in 0..INITIAL_SET_ATTEMPTS {
                    let pick = ids.choose_multiple(&mut rng, *count).map(|&i| AgentId(i));
                    let a = ActivationVector::from_active(self.pool_size, pick);
                    if graph.is_active_strongly_connected(&a) {
                        found = Some(a);
                        break;
                    }
                }
                found.ok_or_else(|| {
                    ScenarioError::InitialSet(format!(
                        "no strongly connected set of {count} agents found in {INITIAL_SET_ATTEMPTS} draws"
                    ))
                })?
            }
        };
        Ok(Setup { graph, initial })
    }

    pub fn window_at(&self, k: Round) -> Option<&ChurnWindow> {
        self.churn_windows.iter().find(|w| w.contains(k))
    }
}

/// The built-in reference experiment.
pub fn paper_scenario() -> Scenario {
    parse_scenario(PAPER_SCENARIO).expect("built-in scenario parses")
}

struct Parser<'a> {
    line: usize,
    tokens: std::str::SplitWhitespace<'a>,
}

impl<'a> Parser<'a> {
    fn err(&self, message: impl Into<String>) -> ScenarioError {
        ScenarioError::Parse {
            line: self.line,
            message: message.into(),
        }
    }

    fn next(&mut self, what: &str) -> Result<&'a str, ScenarioError> {
        self.tokens
            .next()
            .ok_or_else(|| self.err(format!("missing {what}")))
    }

    fn num<T: std::str::FromStr>(&mut self, what: &str) -> Result<T, ScenarioError> {
        let tok = self.next(what)?;
        tok.parse()
            .map_err(|_| self.err(format!("malformed {what} '{tok}'")))
    }

    fn prob(&mut self, what: &str) -> Result<f64, ScenarioError> {
        let p: f64 = self.num(what)?;
        if !(0.0..=1.0).contains(&p) {
            return Err(self.err(format!("{what} {p} outside [0, 1]")));
        }
        Ok(p)
    }

    fn real(&mut self, what: &str) -> Result<f64, ScenarioError> {
        let v: f64 = self.num(what)?;
        if !v.is_finite() {
            return Err(self.err(format!("{what} must be finite")));
        }
        Ok(v)
    }

    fn end(&mut self) -> Result<(), ScenarioError> {
        match self.tokens.next() {
            Some(extra) => Err(self.err(format!("unexpected trailing token '{extra}'"))),
            None => Ok(()),
        }
    }

    fn mass(&mut self) -> Result<MassDistribution, ScenarioError> {
        match self.next("distribution kind")? {
            "uniform" => {
                let lo = self.real("lower bound")?;
                let hi = self.real("upper bound")?;
                if lo > hi {
                    return Err(self.err(format!("uniform bounds reversed: {lo} > {hi}")));
                }
                Ok(MassDistribution::Uniform { lo, hi })
            }
            "const" => Ok(MassDistribution::Constant(self.real("constant mass")?)),
            other => Err(self.err(format!("unknown distribution '{other}'"))),
        }
    }
}

/// Parses a scenario file. Missing `seed` defaults to 0 and missing mass
/// distributions default to uniform [1, 10] initially and [10, 20] on arrival.
pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let mut pool: Option<(usize, usize)> = None;
    let mut initial: Option<(InitialSpec, usize)> = None;
    let mut graph: Option<(GraphSpec, usize)> = None;
    let mut edges: Vec<(AgentId, AgentId, usize)> = Vec::new();
    let mut rounds: Option<Round> = None;
    let mut seed = 0u64;
    let mut windows: Vec<(ChurnWindow, usize)> = Vec::new();
    let mut scripted: Vec<(ScriptedEvent, usize)> = Vec::new();
    let mut mass_initial = MassDistribution::Uniform { lo: 1.0, hi: 10.0 };
    let mut mass_arrival = MassDistribution::Uniform { lo: 10.0, hi: 20.0 };

    for (idx, raw) in text.lines().enumerate() {
        let content = raw.split('#').next().unwrap_or("");
        let mut p = Parser {
            line: idx + 1,
            tokens: content.split_whitespace(),
        };
        let Some(directive) = p.tokens.next() else {
            continue;
        };
        match directive {
            "pool" => {
                let n: usize = p.num("pool size")?;
                if n == 0 {
                    return Err(p.err("pool size must be at least 1"));
                }
                pool = Some((n, p.line));
            }
            "initial" => {
                let rest: Vec<&str> = p.tokens.by_ref().collect();
                let spec = if rest.first() == Some(&"random") {
                    let count: usize = match rest[1..] {
                        [tok] => tok
                            .parse()
                            .map_err(|_| p.err(format!("malformed initial count '{tok}'")))?,
                        _ => return Err(p.err("expected 'initial random <count>'")),
                    };
                    if count == 0 {
                        return Err(p.err("initial count must be at least 1"));
                    }
                    InitialSpec::Random { count }
                } else {
                    let mut ids = Vec::new();
                    for tok in rest {
                        let id: usize = tok
                            .parse()
                            .map_err(|_| p.err(format!("malformed agent id '{tok}'")))?;
                        ids.push(AgentId(id));
                    }
                    if ids.is_empty() {
                        return Err(p.err("initial needs at least one agent"));
                    }
                    InitialSpec::Explicit(ids)
                };
                initial = Some((spec, p.line));
            }
            "graph" => {
                let spec = match p.next("graph kind")? {
                    "cycle" => GraphSpec::Cycle,
                    "auto" => GraphSpec::Auto {
                        extra_edge_prob: p.prob("extra edge probability")?,
                    },
                    other => return Err(p.err(format!("unknown graph kind '{other}'"))),
                };
                p.end()?;
                graph = Some((spec, p.line));
            }
            "edge" => {
                let i: usize = p.num("edge source")?;
                let j: usize = p.num("edge target")?;
                p.end()?;
                if i == j {
                    return Err(p.err(format!("self-loop {i} -> {j}")));
                }
                edges.push((AgentId(i), AgentId(j), p.line));
            }
            "rounds" => {
                rounds = Some(p.num("round count")?);
                p.end()?;
            }
            "seed" => {
                seed = p.num("seed")?;
                p.end()?;
            }
            "interval" => {
                let start: Round = p.num("window start")?;
                let end: Round = p.num("window end")?;
                let event_prob = p.prob("event probability")?;
                p.end()?;
                if start >= end {
                    return Err(p.err(format!("window start {start} >= end {end}")));
                }
                windows.push((
                    ChurnWindow {
                        start,
                        end,
                        event_prob,
                    },
                    p.line,
                ));
            }
            "mass_initial" => {
                mass_initial = p.mass()?;
                p.end()?;
            }
            "mass_arrival" => {
                mass_arrival = p.mass()?;
                p.end()?;
            }
            "at" => {
                let round: Round = p.num("event round")?;
                let kind = match p.next("event kind")? {
                    "arrive" => {
                        let agent = AgentId(p.num("agent id")?);
                        let joining_mass = p.real("joining mass")?;
                        EventKind::Arrive {
                            agent,
                            joining_mass,
                        }
                    }
                    "depart" => EventKind::Depart {
                        agent: AgentId(p.num("agent id")?),
                    },
                    other => return Err(p.err(format!("unknown event kind '{other}'"))),
                };
                p.end()?;
                scripted.push((ScriptedEvent { round, kind }, p.line));
            }
            other => return Err(p.err(format!("unknown directive '{other}'"))),
        }
    }

    let eof = text.lines().count() + 1;
    let missing = |what: &str| ScenarioError::Parse {
        line: eof,
        message: format!("missing '{what}' directive"),
    };
    let (pool_size, _) = pool.ok_or_else(|| missing("pool"))?;
    let (initial, initial_line) = initial.ok_or_else(|| missing("initial"))?;
    let rounds = rounds.ok_or_else(|| missing("rounds"))?;
    let at = |line: usize, message: String| ScenarioError::Parse { line, message };

    let graph = match (graph, edges.is_empty()) {
        (Some((_, line)), false) => {
            return Err(at(
                line,
                "'graph' cannot be combined with 'edge' lines".into(),
            ))
        }
        (Some((spec, _)), true) => spec,
        (None, false) => {
            let mut list = Vec::with_capacity(edges.len());
            for (i, j, line) in edges {
                if i.0 >= pool_size || j.0 >= pool_size {
                    return Err(at(
                        line,
                        format!("edge {i} {j} outside pool of {pool_size}"),
                    ));
                }
                list.push((i, j));
            }
            GraphSpec::Edges(list)
        }
        (None, true) => return Err(missing("graph")),
    };

    match &initial {
        InitialSpec::Explicit(ids) => {
            let mut seen = BTreeSet::new();
            for id in ids {
                if id.0 >= pool_size {
                    return Err(at(
                        initial_line,
                        format!("agent {id} outside pool of {pool_size}"),
                    ));
                }
                if !seen.insert(*id) {
                    return Err(at(initial_line, format!("agent {id} listed twice")));
                }
            }
        }
        InitialSpec::Random { count } => {
            if *count > pool_size {
                return Err(at(
                    initial_line,
                    format!("initial count {count} exceeds pool of {pool_size}"),
                ));
            }
        }
    }

    windows.sort_by_key(|(w, _)| w.start);
    for (i, (w, line)) in windows.iter().enumerate() {
        if w.end >= rounds {
            return Err(at(
                *line,
                format!(
                    "window ({}, {}] exceeds the {rounds}-round horizon",
                    w.start, w.end
                ),
            ));
        }
        if let Some((prev, _)) = i.checked_sub(1).map(|p| &windows[p]) {
            if w.start < prev.end {
                return Err(at(
                    *line,
                    format!(
                        "window ({}, {}] overlaps ({}, {}]",
                        w.start, w.end, prev.start, prev.end
                    ),
                ));
            }
        }
    }

    for (ev, line) in &scripted {
        let agent = match ev.kind {
            EventKind::Arrive { agent, .. } | EventKind::Depart { agent } => agent,
        };
        if agent.0 >= pool_size {
            return Err(at(
                *line,
                format!("agent {agent} outside pool of {pool_size}"),
            ));
        }
        if ev.round >= rounds {
            return Err(at(
                *line,
                format!(
                    "event round {} outside the {rounds}-round horizon",
                    ev.round
                ),
            ));
        }
    }
    scripted.sort_by_key(|(e, line)| (e.round, *line));

    Ok(Scenario {
        pool_size,
        initial,
        graph,
        rounds,
        seed,
        churn_windows: windows.into_iter().map(|(w, _)| w).collect(),
        scripted_events: scripted.into_iter().map(|(e, _)| e).collect(),
        mass_initial,
        mass_arrival,
    })
}

impl fmt::Display for MassDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MassDistribution::Uniform { lo, hi } => write!(f, "uniform {lo} {hi}"),
            MassDistribution::Constant(v) => write!(f, "const {v}"),
        }
    }
}

/// Produces the validated events for each round. Holds the churn and mass
/// streams, so the stream of events depends only on the seed and history.
#[derive(Clone, Debug)]
pub struct EventSampler {
    churn: ChaCha8Rng,
    mass: ChaCha8Rng,
    skipped: usize,
}

impl EventSampler {
    /// `mass` must be the stream already used for the initial masses, so
    /// arrival masses continue from where it left off.
    pub fn new(seed: u64, mass: ChaCha8Rng) -> Self {
        Self {
            churn: stream_rng(seed, Stream::Churn),
            mass,
            skipped: 0,
        }
    }

    pub fn from_seed(seed: u64) -> Self {
        Self::new(seed, stream_rng(seed, Stream::Mass))
    }

    pub fn mass_rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.mass
    }

    /// Rounds in which a stochastic event was drawn but every candidate was
    /// rejected.
    pub fn skipped(&self) -> usize {
        self.skipped
    }

    /// Scripted events at `k` plus at most one stochastic event when `k` is in
    /// a churn window. Scripted events that fail validation are fatal;
    /// rejected stochastic candidates are redrawn up to [`RETRY_BUDGET`] times.
    pub fn sample_round_events(
        &mut self,
        sc: &Scenario,
        k: Round,
        activation: &ActivationVector,
        graph: &OpenDigraph,
    ) -> Result<RoundEvents, ScenarioError> {
        let mut events = RoundEvents::default();
        for ev in sc.scripted_events.iter().filter(|e| e.round == k) {
            match ev.kind {
                EventKind::Arrive {
                    agent,
                    joining_mass,
                } => {
                    if activation.is_active(agent) || events.arrivals.iter().any(|a| a.0 == agent) {
                        return Err(ScenarioError::ScriptedEventInconsistent {
                            round: k,
                            agent,
                            kind: "arrival",
                        });
                    }
                    events.arrivals.push((agent, joining_mass));
                }
                EventKind::Depart { agent } => {
                    if !activation.is_active(agent) || events.departures.contains(&agent) {
                        return Err(ScenarioError::ScriptedEventInconsistent {
                            round: k,
                            agent,
                            kind: "departure",
                        });
                    }
                    events.departures.push(agent);
                }
            }
        }
        if !events.is_empty() {
            validate_transition(
                graph,
                activation,
                &events.departures,
                &events.arriving_ids(),
            )
            .map_err(|report| ScenarioError::ScriptedEventRejected { round: k, report })?;
        }

        let Some(window) = sc.window_at(k) else {
            return Ok(events);
        };
        if !self.churn.gen_bool(window.event_prob) {
            return Ok(events);
        }

        let scripted_arrivals = events.arriving_ids();
        let mut arrive_pool: Vec<AgentId> = activation
            .inactive_ids()
            .filter(|a| !scripted_arrivals.contains(a))
            .collect();
        let mut depart_pool: Vec<AgentId> = activation
            .active_ids()
            .filter(|a| !events.departures.contains(a))
            .collect();

        for _ in 0..RETRY_BUDGET {
            let arrive = match (arrive_pool.is_empty(), depart_pool.is_empty()) {
                (true, true) => break,
                (true, false) => false,
                (false, true) => true,
                (false, false) => self.churn.gen_bool(0.5),
            };
            let pool = if arrive {
                &mut arrive_pool
            } else {
                &mut depart_pool
            };
            let candidate = pool.swap_remove(self.churn.gen_range(0..pool.len()));
            let (mut departures, mut arrivals) =
                (events.departures.clone(), scripted_arrivals.clone());
            if arrive {
                arrivals.push(candidate);
            } else {
                departures.push(candidate);
            }
            if validate_transition(graph, activation, &departures, &arrivals).is_ok() {
                if arrive {
                    let mass = sample_mass(&sc.mass_arrival, &mut self.mass)?;
                    events.arrivals.push((candidate, mass));
                } else {
                    events.departures.push(candidate);
                }
                return Ok(events);
            }
        }
        self.skipped += 1;
        log::debug!("round {k}: no valid churn candidate, stochastic event skipped");
        Ok(events)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_uses_defaults() {
        let sc = parse_scenario("pool 3\ninitial 0 1 2\ngraph cycle\nrounds 10").unwrap();
        assert_eq!(sc.pool_size, 3);
        assert_eq!(sc.seed, 0);
        assert_eq!(sc.rounds, 10);
        assert!(sc.churn_windows.is_empty());
        assert!(sc.scripted_events.is_empty());
        assert_eq!(
            sc.mass_initial,
            MassDistribution::Uniform { lo: 1.0, hi: 10.0 }
        );
        assert_eq!(
            sc.mass_arrival,
            MassDistribution::Uniform { lo: 10.0, hi: 20.0 }
        );
        let setup = sc.setup().unwrap();
        assert_eq!(setup.graph.edge_count(), 3);
        assert_eq!(setup.initial.count(), 3);
    }

    #[test]
    fn paper_scenario_parameters() {
        let sc = paper_scenario();
        assert_eq!(sc.pool_size, 150);
        assert_eq!(sc.initial, InitialSpec::Random { count: 100 });
        assert_eq!(sc.rounds, 200);
        assert_eq!(
            sc.mass_initial,
            MassDistribution::Uniform { lo: 1.0, hi: 10.0 }
        );
        assert_eq!(
            sc.mass_arrival,
            MassDistribution::Uniform { lo: 10.0, hi: 20.0 }
        );
        assert_eq!(
            sc.churn_windows,
            vec![
                ChurnWindow {
                    start: 1,
                    end: 80,
                    event_prob: 0.1
                },
                ChurnWindow {
                    start: 101,
                    end: 180,
                    event_prob: 0.2
                },
            ]
        );
        for k in [0, 1, 81, 100, 101, 181, 199] {
            assert!(sc.window_at(k).is_none(), "k={k}");
        }
        for k in [2, 80, 102, 180] {
            assert!(sc.window_at(k).is_some(), "k={k}");
        }
        let setup = sc.setup().unwrap();
        assert_eq!(setup.initial.count(), 100);
    }

    fn parse_err_line(text: &str) -> usize {
        match parse_scenario(text) {
            Err(ScenarioError::Parse { line, .. }) => line,
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let base = "pool 3\ninitial 0 1 2\ngraph cycle\nrounds 10\n";
        assert_eq!(parse_err_line(&format!("{base}interval 5 3 0.1")), 5);
        assert_eq!(parse_err_line(&format!("{base}frobnicate 1")), 5);
        assert_eq!(parse_err_line(&format!("{base}# c\nseed x")), 6);
        assert_eq!(
            parse_err_line(&format!("{base}interval 1 5 0.1\ninterval 4 8 0.1")),
            6
        );
        assert_eq!(parse_err_line(&format!("{base}at 2 depart 3")), 5);
        assert_eq!(parse_err_line(&format!("{base}interval 1 10 0.1")), 5);
        assert_eq!(parse_err_line(&format!("{base}interval 1 5 1.5")), 5);
        assert_eq!(
            parse_err_line("pool 3\ninitial 0 3\ngraph cycle\nrounds 10"),
            2
        );
        assert_eq!(parse_err_line("pool 3\ninitial 0\nedge 0 5\nrounds 10"), 3);
        assert_eq!(parse_err_line("pool 3\ninitial 0\nrounds 10"), 4);
        assert_eq!(
            parse_err_line(&format!("{base}mass_arrival uniform 5 1")),
            5
        );
    }

    #[test]
    fn explicit_edges_and_scripted_events() {
        let text =
            "pool 4 # four\ninitial 0 1 2\nedge 0 1\nedge 1 2\nedge 2 0\nedge 3 0\nedge 0 3\n\
                    rounds 20\nseed 7\nat 5 arrive 3 2.5\nat 9 depart 3\nmass_initial const 4\n";
        let sc = parse_scenario(text).unwrap();
        assert_eq!(sc.seed, 7);
        assert_eq!(sc.mass_initial, MassDistribution::Constant(4.0));
        assert_eq!(sc.scripted_events.len(), 2);
        let g = sc.build_graph().unwrap();
        assert_eq!(g.edge_count(), 5);
        assert!(g.has_edge(AgentId(3), AgentId(0)));
    }

    #[test]
    fn mass_sampling() {
        let mut rng = stream_rng(1, Stream::Mass);
        for _ in 0..1000 {
            let v =
                sample_mass(&MassDistribution::Uniform { lo: 1.0, hi: 10.0 }, &mut rng).unwrap();
            assert!((1.0..=10.0).contains(&v));
            let v =
                sample_mass(&MassDistribution::Uniform { lo: 10.0, hi: 20.0 }, &mut rng).unwrap();
            assert!((10.0..=20.0).contains(&v));
        }
        assert_eq!(
            sample_mass(&MassDistribution::Constant(7.0), &mut rng).unwrap(),
            7.0
        );
        assert_eq!(
            sample_mass(&MassDistribution::Uniform { lo: 3.0, hi: 3.0 }, &mut rng).unwrap(),
            3.0
        );
        assert!(sample_mass(&MassDistribution::Uniform { lo: 2.0, hi: 1.0 }, &mut rng).is_err());
    }

    #[test]
    fn streams_are_independent() {
        let a: Vec<u64> = (0..4).map(|_| stream_rng(5, Stream::Churn).gen()).collect();
        let b: u64 = stream_rng(5, Stream::Mass).gen();
        assert!(a.iter().all(|&x| x == a[0]));
        assert_ne!(a[0], b);
    }

    #[test]
    fn quiet_round_has_no_events() {
        let sc = paper_scenario();
        let setup = sc.setup().unwrap();
        let mut s = EventSampler::from_seed(sc.seed);
        for k in [0, 1, 85, 100, 190] {
            let ev = s
                .sample_round_events(&sc, k, &setup.initial, &setup.graph)
                .unwrap();
            assert!(ev.is_empty());
        }
    }

    #[test]
    fn scripted_departure_breaking_connectivity_is_fatal() {
        let sc =
            parse_scenario("pool 3\ninitial 0 1 2\ngraph cycle\nrounds 10\nat 5 depart 2").unwrap();
        let setup = sc.setup().unwrap();
        let mut s = EventSampler::from_seed(0);
        assert!(s
            .sample_round_events(&sc, 4, &setup.initial, &setup.graph)
            .unwrap()
            .is_empty());
        match s.sample_round_events(&sc, 5, &setup.initial, &setup.graph) {
            Err(ScenarioError::ScriptedEventRejected { round: 5, report }) => {
                assert!(report
                    .violations
                    .iter()
                    .any(|v| matches!(v, crate::topology::Violation::NotStronglyConnected { .. })));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn full_pool_forces_departures() {
        let sc = parse_scenario(
            "pool 6\ninitial 0 1 2 3 4 5\ngraph auto 1.0\nrounds 50\ninterval 0 40 1.0",
        )
        .unwrap();
        let setup = sc.setup().unwrap();
        let mut s = EventSampler::from_seed(3);
        let ev = s
            .sample_round_events(&sc, 1, &setup.initial, &setup.graph)
            .unwrap();
        assert!(ev.arrivals.is_empty());
        assert_eq!(ev.departures.len(), 1);
    }

    #[test]
    fn replay_is_identical() {
        let sc = paper_scenario();
        let setup = sc.setup().unwrap();
        let run = || {
            let mut s = EventSampler::from_seed(sc.seed);
            let mut a = setup.initial.clone();
            let mut out = Vec::new();
            for k in 0..sc.rounds {
                let ev = s.sample_round_events(&sc, k, &a, &setup.graph).unwrap();
                a = a.transition(&ev.departures, &ev.arriving_ids());
                out.push(ev);
            }
            out
        };
        let (a, b) = (run(), run());
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.departures, y.departures);
            assert_eq!(x.arrivals.len(), y.arrivals.len());
            for (p, q) in x.arrivals.iter().zip(&y.arrivals) {
                assert_eq!(p.0, q.0);
                assert_eq!(p.1.to_bits(), q.1.to_bits());
            }
        }
    }
}
