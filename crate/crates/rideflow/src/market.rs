//! Network, scenario tree, and demand/supply primitives.
//!
//! A market instance couples a finite location set with a rooted scenario
//! tree. Riders arrive per (origin, destination, scenario node) with values
//! drawn from a route-specific distribution; drivers enter per (location,
//! scenario node). All volumes are fluid (real-valued); the population-scale
//! simulator converts to integer counts and renormalizes by `1/k` only when
//! reporting.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// Index of a location in `MarketInstance::locations`.
pub type LocId = usize;
/// Index of a node in `ScenarioTree::nodes`.
pub type NodeId = usize;
/// Index of a route in `MarketInstance::routes`.
pub type RouteId = usize;

pub const PROB_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum MarketError {
    #[error("node {to} is not a descendant of node {from}")]
    NotDescendant { from: NodeId, to: NodeId },
    #[error("unknown location `{0}`")]
    UnknownLocation(String),
    #[error("unknown scenario node `{0}`")]
    UnknownNode(String),
}

/// One state of the market-wide random environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioNode {
    pub id: NodeId,
    pub name: String,
    /// Time period; the root has `t = 1` and children increase depth by one.
    pub t: u32,
    pub parent: Option<NodeId>,
    /// Transition probability from the parent (1 for the root).
    pub prob: f64,
}

/// Rooted tree of market-wide states with per-edge transition probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioTree {
    pub nodes: Vec<ScenarioNode>,
    pub root: NodeId,
    pub horizon: u32,
    children: Vec<Vec<NodeId>>,
}

impl ScenarioTree {
    /// Builds a tree from `(name, t, parent name, prob)` rows. Rows with
    /// `prob == 0` and their descendants are pruned.
    pub fn new(rows: &[(String, u32, Option<String>, f64)]) -> Result<Self, String> {
        let mut kept: Vec<(String, u32, Option<String>, f64)> = Vec::new();
        let mut dropped: Vec<String> = Vec::new();
        for row in rows {
            let parent_dropped =
                row.2.as_ref().map(|p| dropped.iter().any(|d| d == p)).unwrap_or(false);
            if row.3 == 0.0 || parent_dropped {
                dropped.push(row.0.clone());
            } else {
                kept.push(row.clone());
            }
        }
        let index: BTreeMap<String, NodeId> =
            kept.iter().enumerate().map(|(i, r)| (r.0.clone(), i)).collect();
        if index.len() != kept.len() {
            return Err("duplicate scenario node names".to_string());
        }
        let mut nodes = Vec::with_capacity(kept.len());
        let mut children = vec![Vec::new(); kept.len()];
        let mut roots = Vec::new();
        for (i, (name, t, parent, prob)) in kept.iter().enumerate() {
            let parent_id = match parent {
                Some(p) => {
                    let pid = *index
                        .get(p)
                        .ok_or_else(|| format!("node `{name}` references unknown parent `{p}`"))?;
                    children[pid].push(i);
                    Some(pid)
                }
                None => {
                    roots.push(i);
                    None
                }
            };
            nodes.push(ScenarioNode { id: i, name: name.clone(), t: *t, parent: parent_id, prob: *prob });
        }
        if roots.len() != 1 {
            return Err(format!("expected exactly one root node, found {}", roots.len()));
        }
        let horizon = nodes.iter().map(|n| n.t).max().unwrap_or(1);
        Ok(ScenarioTree { nodes, root: roots[0], horizon, children })
    }

    pub fn children(&self, node: NodeId) -> &[NodeId] {
        &self.children[node]
    }

    pub fn node_by_name(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.name == name)
    }

    pub fn is_leaf(&self, node: NodeId) -> bool {
        self.children[node].is_empty()
    }

    /// Nodes of the subtree rooted at `root`, parents before children.
    pub fn subtree(&self, root: NodeId) -> Vec<NodeId> {
        let mut order = vec![root];
        let mut head = 0;
        while head < order.len() {
            let n = order[head];
            head += 1;
            order.extend_from_slice(&self.children[n]);
        }
        order
    }
}

/// Probability of reaching `to` from `from` along the unique tree path.
pub fn node_probability(tree: &ScenarioTree, from: NodeId, to: NodeId) -> Result<f64, MarketError> {
    let mut prob = 1.0;
    let mut cursor = to;
    while cursor != from {
        prob *= tree.nodes[cursor].prob;
        match tree.nodes[cursor].parent {
            Some(p) => cursor = p,
            None => return Err(MarketError::NotDescendant { from, to }),
        }
    }
    Ok(prob)
}

/// Rider willingness-to-pay distribution for one route/scenario.
///
/// Only the members needed by the welfare calculus are exposed: the CDF, its
/// inverse, and the conditional mean above a price.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ValueDistribution {
    Uniform { v_max: f64 },
}

impl ValueDistribution {
    pub fn uniform(v_max: f64) -> Self {
        ValueDistribution::Uniform { v_max }
    }

    pub fn v_max(&self) -> f64 {
        match *self {
            ValueDistribution::Uniform { v_max } => v_max,
        }
    }

    /// CDF, clamped to [0, 1].
    pub fn cdf(&self, value: f64) -> f64 {
        match *self {
            ValueDistribution::Uniform { v_max } => {
                if v_max <= 0.0 {
                    1.0
                } else {
                    (value / v_max).clamp(0.0, 1.0)
                }
            }
        }
    }

    /// Inverse CDF; continuous, non-decreasing, `quantile(0) = 0`.
    pub fn quantile(&self, q: f64) -> f64 {
        match *self {
            ValueDistribution::Uniform { v_max } => v_max * q.clamp(0.0, 1.0),
        }
    }

    /// E[V | V >= price].
    pub fn mean_above(&self, price: f64) -> f64 {
        match *self {
            ValueDistribution::Uniform { v_max } => {
                if price >= v_max {
                    v_max
                } else {
                    (price.max(0.0) + v_max) / 2.0
                }
            }
        }
    }

    pub fn sample(&self, rng: &mut impl rand::Rng) -> f64 {
        match *self {
            ValueDistribution::Uniform { v_max } => rng.gen::<f64>() * v_max,
        }
    }
}

/// Directed route between two locations with a fixed per-trip cost.
///
/// Negative costs encode rewards; an off-market "exit" is an ordinary sink
/// location whose self-loop carries the exit reward as a negative cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Route {
    pub origin: LocId,
    pub destination: LocId,
    pub cost: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DemandSpec {
    /// Mean potential-rider volume.
    pub d_bar: f64,
    pub values: ValueDistribution,
}

/// How the simulator turns fluid means into integer counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CountSampling {
    /// Binomial(round(2k·mean), 1/2): mean k·mean, bounded support.
    #[default]
    Binomial,
    /// Poisson(k·mean).
    Poisson,
}

/// Immutable description of one market: locations, scenario tree, routes,
/// demand, driver entries, and the pickup-disutility bound.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketInstance {
    pub locations: Vec<String>,
    pub tree: ScenarioTree,
    pub routes: Vec<Route>,
    /// demand[node][route]
    demand: Vec<Vec<Option<DemandSpec>>>,
    /// entries[node][location]
    entries: Vec<Vec<f64>>,
    /// Pickup-disutility bound `C`; disutilities are Uniform(0, C).
    pub pickup_bound: f64,
    pub sampling: CountSampling,
    routes_from: Vec<Vec<RouteId>>,
    routes_into: Vec<Vec<RouteId>>,
}

impl MarketInstance {
    pub fn new(
        locations: Vec<String>,
        tree: ScenarioTree,
        routes: Vec<Route>,
        demand_rows: Vec<(RouteId, NodeId, DemandSpec)>,
        entry_rows: Vec<(LocId, NodeId, f64)>,
        pickup_bound: f64,
    ) -> Self {
        let n_nodes = tree.nodes.len();
        let n_routes = routes.len();
        let n_locs = locations.len();
        let mut demand = vec![vec![None; n_routes]; n_nodes];
        for (r, n, spec) in demand_rows {
            demand[n][r] = Some(spec);
        }
        let mut entries = vec![vec![0.0; n_locs]; n_nodes];
        for (l, n, m) in entry_rows {
            entries[n][l] += m;
        }
        let mut routes_from = vec![Vec::new(); n_locs];
        let mut routes_into = vec![Vec::new(); n_locs];
        for (rid, route) in routes.iter().enumerate() {
            if route.origin < n_locs {
                routes_from[route.origin].push(rid);
            }
            if route.destination < n_locs {
                routes_into[route.destination].push(rid);
            }
        }
        MarketInstance {
            locations,
            tree,
            routes,
            demand,
            entries,
            pickup_bound,
            sampling: CountSampling::default(),
            routes_from,
            routes_into,
        }
    }

    pub fn n_locations(&self) -> usize {
        self.locations.len()
    }

    pub fn n_routes(&self) -> usize {
        self.routes.len()
    }

    pub fn location_id(&self, name: &str) -> Option<LocId> {
        self.locations.iter().position(|l| l == name)
    }

    pub fn route_id(&self, origin: LocId, destination: LocId) -> Option<RouteId> {
        self.routes_from
            .get(origin)?
            .iter()
            .copied()
            .find(|&r| self.routes[r].destination == destination)
    }

    pub fn routes_from(&self, loc: LocId) -> &[RouteId] {
        &self.routes_from[loc]
    }

    pub fn routes_into(&self, loc: LocId) -> &[RouteId] {
        &self.routes_into[loc]
    }

    pub fn demand_at(&self, node: NodeId, route: RouteId) -> Option<DemandSpec> {
        self.demand[node][route]
    }

    pub fn entry_mean(&self, node: NodeId, loc: LocId) -> f64 {
        self.entries[node][loc]
    }

    /// Fluid entering-driver volumes at `node`.
    pub fn entry_vector(&self, node: NodeId) -> &[f64] {
        &self.entries[node]
    }

    /// A sink has no outgoing demand at any scenario node.
    pub fn is_sink(&self, loc: LocId) -> bool {
        self.routes_from[loc]
            .iter()
            .all(|&r| self.demand.iter().all(|per_node| per_node[r].is_none()))
    }

    /// Initial state: root node with the root's fluid entry volumes.
    pub fn initial_state(&self) -> MarketState {
        MarketState { node: self.tree.root, supply: self.entries[self.tree.root].clone() }
    }
}

/// Scenario node plus per-location driver volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketState {
    pub node: NodeId,
    pub supply: Vec<f64>,
}

impl MarketState {
    pub fn new(node: NodeId, supply: Vec<f64>) -> Self {
        MarketState { node, supply }
    }
}

/// Supply vector at `next_node` implied by per-route total-trip volumes taken
/// at its parent: entries plus inflow.
pub fn transition_supply(
    instance: &MarketInstance,
    next_node: NodeId,
    flows: &[f64],
) -> Vec<f64> {
    let mut supply = instance.entries[next_node].clone();
    for (rid, route) in instance.routes.iter().enumerate() {
        supply[route.destination] += flows[rid];
    }
    supply
}

/// Mean dispatch-request volume on a route at a given price:
/// `D̄ · (1 − F(price))`, clamped to [0, D̄].
pub fn expected_requests(
    instance: &MarketInstance,
    route: RouteId,
    node: NodeId,
    price: f64,
) -> f64 {
    match instance.demand[node][route] {
        Some(spec) => (spec.d_bar * (1.0 - spec.values.cdf(price))).clamp(0.0, spec.d_bar),
        None => 0.0,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, code: &str, message: String) {
        self.violations.push(Violation { code: code.to_string(), message });
    }
}

/// Checks every structural invariant of an instance and reports violations;
/// an empty report means the instance is well-formed.
pub fn validate_instance(instance: &MarketInstance) -> ValidationReport {
    let mut report = ValidationReport::default();
    let tree = &instance.tree;

    for node in &tree.nodes {
        if !(node.prob > 0.0 && node.prob <= 1.0 + PROB_TOL) {
            report.push(
                "node-probability",
                format!("node `{}` has transition probability {}", node.name, node.prob),
            );
        }
        let expected_t = match node.parent {
            Some(p) => tree.nodes[p].t + 1,
            None => 1,
        };
        if node.t != expected_t {
            report.push(
                "node-depth",
                format!("node `{}` has t={} but depth implies t={}", node.name, node.t, expected_t),
            );
        }
    }
    for node in &tree.nodes {
        let kids = tree.children(node.id);
        if kids.is_empty() {
            continue;
        }
        let total: f64 = kids.iter().map(|&c| tree.nodes[c].prob).sum();
        if (total - 1.0).abs() > PROB_TOL {
            report.push(
                "child-probability-sum",
                format!("children of node `{}` have probabilities summing to {}", node.name, total),
            );
        }
    }

    let n_locs = instance.n_locations();
    for (rid, route) in instance.routes.iter().enumerate() {
        if route.origin >= n_locs || route.destination >= n_locs {
            report.push(
                "route-location",
                format!("route #{rid} references an unknown location"),
            );
        }
        if !route.cost.is_finite() {
            report.push("route-cost", format!("route #{rid} has non-finite cost"));
        }
    }

    for (nid, per_route) in instance.demand.iter().enumerate() {
        for (rid, spec) in per_route.iter().enumerate() {
            let Some(spec) = spec else { continue };
            if !(spec.d_bar.is_finite() && spec.d_bar >= 0.0) {
                report.push(
                    "demand-volume",
                    format!(
                        "demand on route #{rid} at node `{}` has invalid volume {}",
                        instance.tree.nodes[nid].name, spec.d_bar
                    ),
                );
            }
            if !(spec.values.v_max() > 0.0) {
                report.push(
                    "demand-values",
                    format!(
                        "demand on route #{rid} at node `{}` needs V_max > 0",
                        instance.tree.nodes[nid].name
                    ),
                );
            }
        }
    }

    for (nid, per_loc) in instance.entries.iter().enumerate() {
        for (lid, &m) in per_loc.iter().enumerate() {
            if !(m.is_finite() && m >= 0.0) {
                report.push(
                    "entry-volume",
                    format!(
                        "entry volume at location `{}` node `{}` is {}",
                        instance.locations[lid], instance.tree.nodes[nid].name, m
                    ),
                );
            }
        }
    }

    if !(instance.pickup_bound.is_finite() && instance.pickup_bound >= 0.0) {
        report.push("pickup-bound", format!("C must be finite and >= 0, got {}", instance.pickup_bound));
    }

    // Every location that can hold supply needs an outgoing route, otherwise
    // flow conservation is unsatisfiable.
    for loc in 0..n_locs {
        if instance.routes_from[loc].is_empty() {
            let reachable = instance.entries.iter().any(|per_loc| per_loc[loc] > 0.0)
                || instance.routes.iter().any(|r| r.destination == loc);
            if reachable {
                report.push(
                    "stranded-location",
                    format!("location `{}` can hold drivers but has no outgoing route", instance.locations[loc]),
                );
            }
        }
    }

    report
}
