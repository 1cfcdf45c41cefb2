//! Potential communication graph over the agent pool and its active subgraphs.
//!
//! The potential edge set is fixed for a run; only the activation vector
//! changes between rounds. An edge `i -> j` means agent `j` receives from
//! agent `i`. Self-loops are never stored: an agent's own contribution is a
//! weight, not an edge.

use std::collections::BTreeSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

/// Index of an agent in the pool. Stable for the lifetime of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AgentId(pub usize);

impl AgentId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Discrete time step.
pub type Round = u64;

#[derive(Debug, Error, PartialEq)]
pub enum TopologyError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("edge {from} -> {to} is a self-loop")]
    SelfLoop { from: AgentId, to: AgentId },
    #[error("edge {from} -> {to} references an agent outside a pool of {pool_size}")]
    OutOfRange {
        from: AgentId,
        to: AgentId,
        pool_size: usize,
    },
}

/// Which agents of the pool are active at a given round.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ActivationVector {
    flags: Vec<bool>,
}

impl ActivationVector {
    pub fn new(flags: Vec<bool>) -> Self {
        Self { flags }
    }

    pub fn none(pool_size: usize) -> Self {
        Self {
            flags: vec![false; pool_size],
        }
    }

    pub fn all(pool_size: usize) -> Self {
        Self {
            flags: vec![true; pool_size],
        }
    }

    pub fn from_active(pool_size: usize, active: impl IntoIterator<Item = AgentId>) -> Self {
        let mut v = Self::none(pool_size);
        for id in active {
            v.flags[id.0] = true;
        }
        v
    }

    pub fn pool_size(&self) -> usize {
        self.flags.len()
    }

    pub fn is_active(&self, id: AgentId) -> bool {
        self.flags[id.0]
    }

    pub fn set(&mut self, id: AgentId, active: bool) {
        self.flags[id.0] = active;
    }

    /// Number of active agents, n(k).
    pub fn count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    /// Active agents in ascending id order.
    pub fn active_ids(&self) -> impl Iterator<Item = AgentId> + '_ {
        self.flags
            .iter()
            .enumerate()
            .filter(|(_, &f)| f)
            .map(|(i, _)| AgentId(i))
    }

    pub fn inactive_ids(&self) -> impl Iterator<Item = AgentId> + '_ {
        self.flags
            .iter()
            .enumerate()
            .filter(|(_, &f)| !f)
            .map(|(i, _)| AgentId(i))
    }

    /// Activation after removing `departures` and adding `arrivals`.
    pub fn transition(&self, departures: &[AgentId], arrivals: &[AgentId]) -> Self {
        let mut next = self.clone();
        for &d in departures {
            next.flags[d.0] = false;
        }
        for &a in arrivals {
            next.flags[a.0] = true;
        }
        next
    }
}

/// Fixed potential digraph over the agent pool.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OpenDigraph {
    pool_size: usize,
    out_adj: Vec<Vec<AgentId>>,
    in_adj: Vec<Vec<AgentId>>,
}

impl OpenDigraph {
    /// Builds a graph from `(from, to)` pairs. Duplicates are merged.
    pub fn new(
        pool_size: usize,
        edges: impl IntoIterator<Item = (AgentId, AgentId)>,
    ) -> Result<Self, TopologyError> {
        let mut set = BTreeSet::new();
        for (from, to) in edges {
            if from.0 >= pool_size || to.0 >= pool_size {
                return Err(TopologyError::OutOfRange {
                    from,
                    to,
                    pool_size,
                });
            }
            if from == to {
                return Err(TopologyError::SelfLoop { from, to });
            }
            set.insert((from, to));
        }
        let mut out_adj = vec![Vec::new(); pool_size];
        let mut in_adj = vec![Vec::new(); pool_size];
        // BTreeSet iteration keeps both adjacency lists sorted.
        for (from, to) in set {
            out_adj[from.0].push(to);
            in_adj[to.0].push(from);
        }
        for list in &mut in_adj {
            list.sort_unstable();
        }
        Ok(Self {
            pool_size,
            out_adj,
            in_adj,
        })
    }

    /// Directed cycle `0 -> 1 -> ... -> n-1 -> 0`.
    pub fn cycle(pool_size: usize) -> Result<Self, TopologyError> {
        if pool_size == 0 {
            return Err(TopologyError::InvalidArgument(
                "pool size must be at least 1".into(),
            ));
        }
        let edges = (0..pool_size)
            .filter(|_| pool_size > 1)
            .map(|i| (AgentId(i), AgentId((i + 1) % pool_size)));
        Self::new(pool_size, edges)
    }

    /// Random digraph: a Hamiltonian cycle over a random permutation of the
    /// pool, plus every other ordered pair independently with probability
    /// `extra_edge_prob`. The full-pool graph is always strongly connected.
    pub fn generate<R: Rng + ?Sized>(
        pool_size: usize,
        extra_edge_prob: f64,
        rng: &mut R,
    ) -> Result<Self, TopologyError> {
        if pool_size == 0 {
            return Err(TopologyError::InvalidArgument(
                "pool size must be at least 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&extra_edge_prob) {
            return Err(TopologyError::InvalidArgument(format!(
                "extra edge probability {extra_edge_prob} outside [0, 1]"
            )));
        }
        let mut order: Vec<usize> = (0..pool_size).collect();
        order.shuffle(rng);
        let mut edges = BTreeSet::new();
        if pool_size > 1 {
            for w in 0..pool_size {
                let from = order[w];
                let to = order[(w + 1) % pool_size];
                edges.insert((AgentId(from), AgentId(to)));
            }
        }
        for i in 0..pool_size {
            for j in 0..pool_size {
                if i == j || edges.contains(&(AgentId(i), AgentId(j))) {
                    continue;
                }
                if rng.gen_bool(extra_edge_prob) {
                    edges.insert((AgentId(i), AgentId(j)));
                }
            }
        }
        Self::new(pool_size, edges)
    }

    pub fn pool_size(&self) -> usize {
        self.pool_size
    }

    /// Potential out-neighbors (receivers) of `id`, ascending.
    pub fn out_neighbors(&self, id: AgentId) -> &[AgentId] {
        &self.out_adj[id.0]
    }

    /// Potential in-neighbors (senders) of `id`, ascending.
    pub fn in_neighbors(&self, id: AgentId) -> &[AgentId] {
        &self.in_adj[id.0]
    }

    pub fn edge_count(&self) -> usize {
        self.out_adj.iter().map(Vec::len).sum()
    }

    pub fn has_edge(&self, from: AgentId, to: AgentId) -> bool {
        self.out_adj[from.0].binary_search(&to).is_ok()
    }

    /// All potential edges in `(from, to)` lexicographic order.
    pub fn edges(&self) -> impl Iterator<Item = (AgentId, AgentId)> + '_ {
        self.out_adj
            .iter()
            .enumerate()
            .flat_map(|(i, outs)| outs.iter().map(move |&j| (AgentId(i), j)))
    }

    /// Potential edges whose endpoints are both active.
    pub fn induced_edges(&self, activation: &ActivationVector) -> Vec<(AgentId, AgentId)> {
        assert_eq!(activation.pool_size(), self.pool_size, "activation size");
        self.edges()
            .filter(|&(i, j)| activation.is_active(i) && activation.is_active(j))
            .collect()
    }

    /// Strong-connectivity of the subgraph induced by `activation`. An empty
    /// active set is reported as not connected.
    pub fn is_active_strongly_connected(&self, activation: &ActivationVector) -> bool {
        self.active_component_count(activation) == 1
    }

    /// Number of strongly connected components of the active subgraph.
    pub fn active_component_count(&self, activation: &ActivationVector) -> usize {
        let mut local = vec![usize::MAX; self.pool_size];
        let mut nodes = Vec::new();
        for id in activation.active_ids() {
            local[id.0] = nodes.len();
            nodes.push(id);
        }
        let adj: Vec<Vec<usize>> = nodes
            .iter()
            .map(|&id| {
                self.out_adj[id.0]
                    .iter()
                    .filter(|l| activation.is_active(**l))
                    .map(|l| local[l.0])
                    .collect()
            })
            .collect();
        strongly_connected_components(&adj).len()
    }
}

/// Tarjan's algorithm over a dense-index adjacency list, iterative so deep
/// graphs do not overflow the stack. Components are returned in reverse
/// topological order.
pub fn strongly_connected_components(adj: &[Vec<usize>]) -> Vec<Vec<usize>> {
    const UNVISITED: usize = usize::MAX;
    let n = adj.len();
    let mut index = vec![UNVISITED; n];
    let mut low = vec![0usize; n];
    let mut on_stack = vec![false; n];
    let mut stack = Vec::new();
    let mut components = Vec::new();
    let mut next_index = 0usize;
    // (node, position in its adjacency list)
    let mut call: Vec<(usize, usize)> = Vec::new();

    for root in 0..n {
        if index[root] != UNVISITED {
            continue;
        }
        call.push((root, 0));
        index[root] = next_index;
        low[root] = next_index;
        next_index += 1;
        stack.push(root);
        on_stack[root] = true;

        while let Some(top) = call.last_mut() {
            let v = top.0;
            if let Some(&w) = adj[v].get(top.1) {
                top.1 += 1;
                if index[w] == UNVISITED {
                    index[w] = next_index;
                    low[w] = next_index;
                    next_index += 1;
                    stack.push(w);
                    on_stack[w] = true;
                    call.push((w, 0));
                } else if on_stack[w] {
                    low[v] = low[v].min(index[w]);
                }
                continue;
            }
            call.pop();
            if let Some(&(parent, _)) = call.last() {
                low[parent] = low[parent].min(low[v]);
            }
            if low[v] == index[v] {
                let mut comp = Vec::new();
                loop {
                    let w = stack.pop().expect("tarjan stack underflow");
                    on_stack[w] = false;
                    comp.push(w);
                    if w == v {
                        break;
                    }
                }
                components.push(comp);
            }
        }
    }
    components
}

/// True iff every ordered pair of `nodes` is joined by a directed path using
/// `edges`. `edges` must only reference members of `nodes`.
pub fn is_strongly_connected(nodes: &[AgentId], edges: &[(AgentId, AgentId)]) -> bool {
    if nodes.is_empty() {
        return false;
    }
    let max = nodes.iter().map(|n| n.0).max().unwrap_or(0);
    let mut local = vec![usize::MAX; max + 1];
    for (k, n) in nodes.iter().enumerate() {
        local[n.0] = k;
    }
    let mut adj = vec![Vec::new(); nodes.len()];
    for &(from, to) in edges {
        let (a, b) = (local[from.0], local[to.0]);
        debug_assert!(a != usize::MAX && b != usize::MAX, "edge outside node set");
        adj[a].push(b);
    }
    strongly_connected_components(&adj).len() == 1
}

/// One reason a proposed transition is rejected.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    DepartingNotActive(AgentId),
    ArrivingAlreadyActive(AgentId),
    ArrivesAndDeparts(AgentId),
    EmptyNetwork,
    /// The next active subgraph splits into this many components.
    NotStronglyConnected {
        components: usize,
    },
    /// The departing agent has no out-neighbor among the remaining agents.
    StrandedDeparture(AgentId),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DepartingNotActive(a) => write!(f, "departing agent {a} is not active"),
            Violation::ArrivingAlreadyActive(a) => {
                write!(f, "arriving agent {a} is already active")
            }
            Violation::ArrivesAndDeparts(a) => write!(f, "agent {a} both arrives and departs"),
            Violation::EmptyNetwork => write!(f, "no agent would remain active"),
            Violation::NotStronglyConnected { components } => write!(
                f,
                "next active subgraph is not strongly connected ({components} components)"
            ),
            Violation::StrandedDeparture(a) => write!(
                f,
                "departing agent {a} has no out-neighbor that remains in the network"
            ),
        }
    }
}

/// All violations found for one proposed transition.
#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub struct TransitionReport {
    pub violations: Vec<Violation>,
}

impl fmt::Display for TransitionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

impl TransitionReport {
    /// Agents named by any violation, ascending and deduplicated.
    pub fn agents(&self) -> Vec<AgentId> {
        let set: BTreeSet<AgentId> = self
            .violations
            .iter()
            .filter_map(|v| match v {
                Violation::DepartingNotActive(a)
                | Violation::ArrivingAlreadyActive(a)
                | Violation::ArrivesAndDeparts(a)
                | Violation::StrandedDeparture(a) => Some(*a),
                _ => None,
            })
            .collect();
        set.into_iter().collect()
    }
}

/// Checks that applying `departures` and `arrivals` to `now` keeps the
/// network strongly connected and leaves every departing agent at least one
/// remaining out-neighbor to hand its residual mass to.
pub fn validate_transition(
    graph: &OpenDigraph,
    now: &ActivationVector,
    departures: &[AgentId],
    arrivals: &[AgentId],
) -> Result<ActivationVector, TransitionReport> {
    let mut violations = Vec::new();
    for &d in departures {
        if !now.is_active(d) {
            violations.push(Violation::DepartingNotActive(d));
        }
        if arrivals.contains(&d) {
            violations.push(Violation::ArrivesAndDeparts(d));
        }
    }
    for &a in arrivals {
        if now.is_active(a) {
            violations.push(Violation::ArrivingAlreadyActive(a));
        }
    }
    if !violations.is_empty() {
        return Err(TransitionReport { violations });
    }

    let next = now.transition(departures, arrivals);
    if next.count() == 0 {
        violations.push(Violation::EmptyNetwork);
    } else {
        let components = graph.active_component_count(&next);
        if components != 1 {
            violations.push(Violation::NotStronglyConnected { components });
        }
    }
    // R(k) = active now and still active next.
    for &d in departures {
        let has_recipient = graph
            .out_neighbors(d)
            .iter()
            .any(|&l| now.is_active(l) && next.is_active(l));
        if !has_recipient {
            violations.push(Violation::StrandedDeparture(d));
        }
    }
    if violations.is_empty() {
        Ok(next)
    } else {
        Err(TransitionReport { violations })
    }
}
