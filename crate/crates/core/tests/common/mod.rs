//! Scenario generators and brute-force references shared by the integration
//! suites. Nothing here calls into the engine's weight or update code.

#![allow(dead_code)]

use nalgebra::DMatrix;
use openrc_core::scenario::{parse_scenario, Scenario};
use openrc_core::topology::{ActivationVector, AgentId, OpenDigraph};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Random churn scenario text.
pub struct ScenarioShape {
    pub pool: (usize, usize),
    pub rounds: u64,
    pub max_prob: f64,
    pub edge_prob: (f64, f64),
    /// Last round at which churn may occur, or `None` for the full horizon.
    pub churn_until: Option<u64>,
}

/// Draws scenarios until one has a usable setup; tiny sparse pools sometimes
/// admit no strongly connected initial set.
pub fn random_scenario(rng: &mut ChaCha8Rng, shape: &ScenarioShape) -> Scenario {
    loop {
        let sc = draw_scenario(rng, shape);
        if sc.setup().is_ok() {
            return sc;
        }
    }
}

fn draw_scenario(rng: &mut ChaCha8Rng, shape: &ScenarioShape) -> Scenario {
    let pool = rng.gen_range(shape.pool.0..=shape.pool.1);
    let initial = rng.gen_range((pool * 6 / 10).max(1)..=(pool * 8 / 10).max(1));
    let p = rng.gen_range(shape.edge_prob.0..=shape.edge_prob.1);
    let seed: u64 = rng.gen();
    let last = shape.churn_until.unwrap_or(shape.rounds - 1);
    let mut text = format!(
        "pool {pool}\ninitial random {initial}\ngraph auto {p}\nrounds {}\nseed {seed}\n",
        shape.rounds
    );
    // Two to four windows tiling (0, last] with random quiet gaps.
    let cuts = rng.gen_range(2..=4u64);
    let span = last / cuts;
    for c in 0..cuts {
        let start = c * span + rng.gen_range(0..span / 4 + 1);
        let end = if c + 1 == cuts { last } else { (c + 1) * span };
        if start < end {
            let prob = rng.gen_range(0.0..=shape.max_prob);
            text.push_str(&format!("interval {start} {end} {prob}\n"));
        }
    }
    parse_scenario(&text).expect("generated scenario parses")
}

/// Reachability closure by repeated relaxation (Floyd-Warshall on booleans).
pub fn brute_strongly_connected(nodes: &[usize], adj: &[Vec<bool>]) -> bool {
    if nodes.is_empty() {
        return false;
    }
    let n = adj.len();
    let mut reach = vec![vec![false; n]; n];
    for &i in nodes {
        reach[i][i] = true;
        for &j in nodes {
            if adj[i][j] {
                reach[i][j] = true;
            }
        }
    }
    for &m in nodes {
        for &i in nodes {
            for &j in nodes {
                if reach[i][m] && reach[m][j] {
                    reach[i][j] = true;
                }
            }
        }
    }
    nodes.iter().all(|&i| nodes.iter().all(|&j| reach[i][j]))
}

/// Brute-force acceptance of a transition: post-transition strong
/// connectivity plus a remaining out-neighbor for every departing agent.
pub fn brute_transition_ok(
    n: usize,
    adj: &[Vec<bool>],
    now: &[bool],
    departures: &[usize],
    arrivals: &[usize],
) -> bool {
    if departures.iter().any(|&d| !now[d]) || arrivals.iter().any(|&a| now[a]) {
        return false;
    }
    if departures.iter().any(|d| arrivals.contains(d)) {
        return false;
    }
    let next: Vec<bool> = (0..n)
        .map(|i| (now[i] && !departures.contains(&i)) || arrivals.contains(&i))
        .collect();
    let nodes: Vec<usize> = (0..n).filter(|&i| next[i]).collect();
    if !brute_strongly_connected(&nodes, adj) {
        return false;
    }
    departures
        .iter()
        .all(|&d| (0..n).any(|l| adj[d][l] && now[l] && next[l]))
}

pub fn adjacency(g: &OpenDigraph) -> Vec<Vec<bool>> {
    let n = g.pool_size();
    let mut adj = vec![vec![false; n]; n];
    for (i, j) in g.edges() {
        adj[i.0][j.0] = true;
    }
    adj
}

/// Weight matrices assembled directly from the graph and the two activation
/// vectors: remaining senders split evenly over themselves and remaining
/// out-neighbors, departing senders split evenly over remaining
/// out-neighbors, arrivals selected on the diagonal.
pub fn reference_matrices(
    g: &OpenDigraph,
    now: &ActivationVector,
    next: &ActivationVector,
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let n = g.pool_size();
    let adj = adjacency(g);
    let remaining = |i: usize| now.flags()[i] && next.flags()[i];
    let mut c = DMatrix::zeros(n, n);
    let mut ct = DMatrix::zeros(n, n);
    let mut w = DMatrix::zeros(n, n);
    for j in 0..n {
        let outs: Vec<usize> = (0..n).filter(|&l| adj[j][l] && remaining(l)).collect();
        if remaining(j) {
            let v = 1.0 / (outs.len() + 1) as f64;
            c[(j, j)] = v;
            for &l in &outs {
                c[(l, j)] = v;
            }
        } else if now.flags()[j] {
            let v = 1.0 / outs.len() as f64;
            for &l in &outs {
                ct[(l, j)] = v;
            }
        } else if next.flags()[j] {
            w[(j, j)] = 1.0;
        }
    }
    (c, ct, w)
}

pub fn active_sorted(a: &ActivationVector) -> Vec<AgentId> {
    a.active_ids().collect()
}
