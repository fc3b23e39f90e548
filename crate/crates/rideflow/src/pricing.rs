//! Trip pricing mechanisms and driver-strategy evaluation.
//!
//! Two pricing policies share one interface: the dynamic policy re-solves the
//! welfare program at every observed state and prices each route at the
//! marginal rider value of its optimal dispatch volume; the static policy
//! solves once at the initial state and replays the anticipated prices no
//! matter what the market does. On top of them sit the reference strategy
//! profile derived from the optimal plan, the utility-to-go (Q) tables of an
//! arbitrary profile, and the per-route incentive-compatibility checks.

use crate::market::{
    expected_requests, transition_supply, LocId, MarketInstance, MarketState, NodeId, RouteId,
};
use crate::matching::{fluid_match, LocationStrategy, MatchError, PoolPlan};
use crate::solver::{reward_eval, SolveCache, SolveOutcome, SolverError, SubtreeCtx};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PricingError {
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error("node {0} is outside the static plan's subtree")]
    OutsidePlan(NodeId),
    #[error("invalid strategy: {0}")]
    BadStrategy(String),
}

/// Per-route prices at one scenario node. Routes without a demand record at
/// the node carry no price.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceVector {
    pub node: NodeId,
    pub per_route: Vec<Option<f64>>,
}

impl PriceVector {
    pub fn get(&self, route: RouteId) -> Option<f64> {
        self.per_route[route]
    }
}

fn prices_from_dispatch(
    instance: &MarketInstance,
    node: NodeId,
    dispatch: &[f64],
) -> PriceVector {
    let per_route = (0..instance.n_routes())
        .map(|rid| {
            instance.demand_at(node, rid).map(|spec| {
                reward_eval(&spec.values, spec.d_bar, dispatch[rid].max(0.0)).2
            })
        })
        .collect();
    PriceVector { node, per_route }
}

/// Dynamic mechanism prices: re-solve at the observed state and price each
/// route at `F^{-1}(1 - g*/D̄)`.
pub fn ssp_prices(
    instance: &MarketInstance,
    state: &MarketState,
    cache: &SolveCache,
) -> Result<(PriceVector, Arc<SolveOutcome>), PricingError> {
    let outcome = cache.solve(instance, state)?;
    let prices = prices_from_dispatch(instance, state.node, outcome.report.plan.root_dispatch());
    Ok((prices, outcome))
}

/// Acceptance thresholds and relocation distributions for every location,
/// with slot order matching `instance.routes_from(loc)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluidStrategy {
    pub per_location: Vec<LocationStrategy>,
}

impl FluidStrategy {
    pub fn validate(&self, instance: &MarketInstance) -> Result<(), PricingError> {
        if self.per_location.len() != instance.n_locations() {
            return Err(PricingError::BadStrategy("one slice per location required".into()));
        }
        for (loc, slice) in self.per_location.iter().enumerate() {
            let n = instance.routes_from(loc).len();
            if slice.thresholds.len() != n || slice.relocation.len() != n {
                return Err(PricingError::BadStrategy(format!(
                    "location {loc} expects {n} slots"
                )));
            }
            for &x in &slice.thresholds {
                if !(0.0..=instance.pickup_bound + 1e-12).contains(&x) {
                    return Err(PricingError::BadStrategy(format!(
                        "threshold {x} outside [0, C] at location {loc}"
                    )));
                }
            }
            if n > 0 {
                let total: f64 = slice.relocation.iter().sum();
                if (total - 1.0).abs() > 1e-9 || slice.relocation.iter().any(|&e| e < -1e-12) {
                    return Err(PricingError::BadStrategy(format!(
                        "relocation weights at location {loc} are not a distribution"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Dispatch volumes restricted to routes that actually have riders at the
/// node. A degenerate optimum may carry `g = f` on demand-less routes (the
/// objective is flat in `g` there); such phantom dispatch must not leak into
/// thresholds or pool sizes.
fn effective_dispatch(instance: &MarketInstance, node: NodeId, dispatch: &[f64]) -> Vec<f64> {
    dispatch
        .iter()
        .enumerate()
        .map(|(rid, &g)| if instance.demand_at(node, rid).is_some() { g.max(0.0) } else { 0.0 })
        .collect()
}

/// Reference strategy implied by an optimal plan at one state: the common
/// per-location threshold `x* = C · dispatch/supply` and relocation weights
/// proportional to relocation flows. Empty or all-dispatch locations get
/// `x* = C` / uniform relocation.
pub fn optimal_fluid_strategy(
    instance: &MarketInstance,
    state: &MarketState,
    outcome: &SolveOutcome,
) -> FluidStrategy {
    let c = instance.pickup_bound;
    let flows = outcome.report.plan.root_flows();
    let dispatch = effective_dispatch(instance, state.node, outcome.report.plan.root_dispatch());
    let dispatch = dispatch.as_slice();
    let per_location = (0..instance.n_locations())
        .map(|loc| {
            let slots = instance.routes_from(loc);
            let n = slots.len();
            let f_sum: f64 = slots.iter().map(|&r| flows[r]).sum();
            let g_sum: f64 = slots.iter().map(|&r| dispatch[r]).sum();
            let threshold = if f_sum <= 0.0 {
                c
            } else {
                (c * g_sum / f_sum).clamp(0.0, c)
            };
            let idle = f_sum - g_sum;
            let relocation: Vec<f64> = if f_sum <= 0.0 || idle <= 1e-12 {
                if n == 0 { Vec::new() } else { vec![1.0 / n as f64; n] }
            } else {
                slots.iter().map(|&r| ((flows[r] - dispatch[r]).max(0.0)) / idle).collect()
            };
            LocationStrategy { thresholds: vec![threshold; n], relocation }
        })
        .collect();
    FluidStrategy { per_location }
}

/// Anticipated trajectory of the once-solved program: fixed prices, supplies,
/// flows, and the planned thresholds/relocations per scenario node.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StaticPlan {
    pub root: NodeId,
    pub nodes: Vec<NodeId>,
    pub prices: Vec<PriceVector>,
    pub supply: Vec<Vec<f64>>,
    pub flows: Vec<Vec<f64>>,
    pub dispatch: Vec<Vec<f64>>,
    pub strategy: Vec<FluidStrategy>,
}

impl StaticPlan {
    pub fn position(&self, node: NodeId) -> Result<usize, PricingError> {
        self.nodes.iter().position(|&n| n == node).ok_or(PricingError::OutsidePlan(node))
    }
}

/// Solves once at the initial state and unrolls prices plus anticipated
/// supplies down every branch via the supply transition.
pub fn static_plan(
    instance: &MarketInstance,
    initial_state: &MarketState,
    cache: &SolveCache,
) -> Result<StaticPlan, PricingError> {
    let outcome = cache.solve(instance, initial_state)?;
    let plan = &outcome.report.plan;
    let ctx = SubtreeCtx::new(instance, initial_state.node);
    let supplies =
        crate::solver::implied_supplies(instance, &ctx, initial_state, plan);

    let mut prices = Vec::with_capacity(ctx.nodes.len());
    let mut flows = Vec::with_capacity(ctx.nodes.len());
    let mut dispatch = Vec::with_capacity(ctx.nodes.len());
    let mut strategy = Vec::with_capacity(ctx.nodes.len());
    for (pos, &node) in ctx.nodes.iter().enumerate() {
        let f: Vec<f64> = (0..ctx.n_routes).map(|r| plan.f_at(pos, r)).collect();
        let g: Vec<f64> = (0..ctx.n_routes).map(|r| plan.g_at(pos, r)).collect();
        prices.push(prices_from_dispatch(instance, node, &g));
        let pseudo_state = MarketState::new(node, supplies[pos].clone());
        // Reuse the strategy derivation on a view of this node's slice.
        let view = SolveOutcome {
            report: crate::solver::SolveReport {
                plan: crate::solver::FlowPlan {
                    root: node,
                    nodes: vec![node],
                    n_routes: ctx.n_routes,
                    f: f.clone(),
                    g: g.clone(),
                },
                value: 0.0,
                gap: 0.0,
                iterations: 0,
                converged: true,
            },
            duals: outcome.duals.clone(),
        };
        strategy.push(optimal_fluid_strategy(instance, &pseudo_state, &view));
        flows.push(f);
        dispatch.push(g);
    }
    Ok(StaticPlan {
        root: initial_state.node,
        nodes: ctx.nodes.clone(),
        prices,
        supply: supplies,
        flows,
        dispatch,
        strategy,
    })
}

/// Pricing policy handed to the evaluator and the simulator.
#[derive(Debug, Clone, Copy)]
pub enum Mechanism<'a> {
    Ssp,
    Static(&'a StaticPlan),
}

/// Everything one period of market dynamics needs at a state: prices,
/// stage-one pool sizing, the optional dispatch cap (static mechanism), and
/// the reference strategy.
#[derive(Debug, Clone)]
pub struct PeriodPlan {
    pub prices: PriceVector,
    /// Per location: pool plan for the matching process.
    pub pools: Vec<PoolPlan>,
    /// Per location: cap on dispatches per slot (static mechanism plans).
    pub dispatch_cap: Option<Vec<Vec<f64>>>,
    pub sigma_star: FluidStrategy,
}

/// Computes the period plan for a state under either mechanism.
pub fn period_plan(
    instance: &MarketInstance,
    state: &MarketState,
    mechanism: Mechanism<'_>,
    cache: &SolveCache,
) -> Result<PeriodPlan, PricingError> {
    let c = instance.pickup_bound;
    match mechanism {
        Mechanism::Ssp => {
            let (prices, outcome) = ssp_prices(instance, state, cache)?;
            let sigma = optimal_fluid_strategy(instance, state, &outcome);
            let dispatch =
                effective_dispatch(instance, state.node, outcome.report.plan.root_dispatch());
            let pools = (0..instance.n_locations())
                .map(|loc| PoolPlan {
                    dispatch: instance.routes_from(loc).iter().map(|&r| dispatch[r]).collect(),
                    threshold: sigma.per_location[loc].thresholds.first().copied().unwrap_or(c),
                    pickup_bound: c,
                })
                .collect();
            Ok(PeriodPlan { prices, pools, dispatch_cap: None, sigma_star: sigma })
        }
        Mechanism::Static(plan) => {
            let pos = plan.position(state.node)?;
            let sigma = plan.strategy[pos].clone();
            let dispatch = effective_dispatch(instance, state.node, &plan.dispatch[pos]);
            let pools = (0..instance.n_locations())
                .map(|loc| PoolPlan {
                    dispatch: instance.routes_from(loc).iter().map(|&r| dispatch[r]).collect(),
                    threshold: sigma.per_location[loc].thresholds.first().copied().unwrap_or(c),
                    pickup_bound: c,
                })
                .collect();
            let cap = (0..instance.n_locations())
                .map(|loc| instance.routes_from(loc).iter().map(|&r| dispatch[r]).collect())
                .collect();
            Ok(PeriodPlan {
                prices: plan.prices[pos].clone(),
                pools,
                dispatch_cap: Some(cap),
                sigma_star: sigma,
            })
        }
    }
}

/// Named strategy profiles.
#[derive(Debug, Clone)]
pub enum StrategyKind {
    /// Follow the plan the mechanism prices against.
    SigmaStar,
    /// Decline everything and relocate toward the nearest sink.
    AllExit,
    /// Sigma-star with additive threshold offsets per (origin, destination).
    SigmaStarAdjusted { deltas: BTreeMap<(LocId, LocId), f64> },
    /// The same fixed strategy at every state.
    Fixed(FluidStrategy),
}

impl StrategyKind {
    pub fn resolve(
        &self,
        instance: &MarketInstance,
        period: &PeriodPlan,
    ) -> Result<FluidStrategy, PricingError> {
        let c = instance.pickup_bound;
        match self {
            StrategyKind::SigmaStar => Ok(period.sigma_star.clone()),
            StrategyKind::Fixed(strategy) => {
                strategy.validate(instance)?;
                Ok(strategy.clone())
            }
            StrategyKind::SigmaStarAdjusted { deltas } => {
                let mut strategy = period.sigma_star.clone();
                for (loc, slice) in strategy.per_location.iter_mut().enumerate() {
                    for (slot, &r) in instance.routes_from(loc).iter().enumerate() {
                        let dest = instance.routes[r].destination;
                        if let Some(delta) = deltas.get(&(loc, dest)) {
                            slice.thresholds[slot] = (slice.thresholds[slot] + delta).clamp(0.0, c);
                        }
                    }
                }
                Ok(strategy)
            }
            StrategyKind::AllExit => {
                let per_location = (0..instance.n_locations())
                    .map(|loc| {
                        let slots = instance.routes_from(loc);
                        let n = slots.len();
                        let mut relocation = vec![0.0; n];
                        let pick = slots
                            .iter()
                            .position(|&r| instance.is_sink(instance.routes[r].destination))
                            .or_else(|| {
                                slots.iter().position(|&r| instance.routes[r].destination == loc)
                            })
                            .unwrap_or(0);
                        if n > 0 {
                            relocation[pick] = 1.0;
                        }
                        LocationStrategy { thresholds: vec![0.0; n], relocation }
                    })
                    .collect();
                Ok(FluidStrategy { per_location })
            }
        }
    }
}

/// Utility-to-go table at one state for a strategy profile: relocation
/// Q-values per (location, slot), prices, thresholds in force, realized fluid
/// flows, and the per-location value `V`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QTable {
    pub node: NodeId,
    pub supply: Vec<f64>,
    /// Q of a relocation trip per (location, slot).
    pub relocation_q: Vec<Vec<f64>>,
    pub price: Vec<Vec<Option<f64>>>,
    pub thresholds: Vec<Vec<f64>>,
    /// Expected request volume per (location, slot) at the quoted prices.
    pub requests: Vec<Vec<f64>>,
    /// Realized fluid (total, dispatch) volumes per (location, slot).
    pub flows: Vec<Vec<(f64, f64)>>,
    /// Per-location expected utility-to-go.
    pub value: Vec<f64>,
}

impl QTable {
    /// Q of a dispatch trip with pickup disutility `x`: `P - x + Q_relocation`.
    pub fn dispatch_q(&self, loc: LocId, slot: usize, x: f64) -> Option<f64> {
        self.price[loc][slot].map(|p| p - x + self.relocation_q[loc][slot])
    }

    pub fn best_relocation_q(&self, loc: LocId) -> f64 {
        self.relocation_q[loc].iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// One evaluated period: resolved strategy, requests, realized flows, and the
/// resulting child states.
#[derive(Debug, Clone)]
struct PeriodOutcome {
    plan: PeriodPlan,
    strategy: FluidStrategy,
    requests: Vec<Vec<f64>>,
    /// Route-indexed totals.
    flow_f: Vec<f64>,
    flow_g: Vec<f64>,
    /// Per (location, slot) volumes.
    slot_flows: Vec<Vec<(f64, f64)>>,
    children: Vec<(NodeId, f64, MarketState)>,
}

type StateKey = (NodeId, Vec<u64>);

fn state_key(state: &MarketState) -> StateKey {
    (state.node, state.supply.iter().map(|v| v.to_bits()).collect())
}

/// Evaluates a strategy profile's value function over the fluid dynamics it
/// induces, under a fixed pricing mechanism. Values at empty locations are
/// right limits: the state is re-evaluated with an infinitesimal driver mass
/// added there.
pub struct StrategyEvaluator<'a> {
    instance: &'a MarketInstance,
    strategy: &'a StrategyKind,
    mechanism: Mechanism<'a>,
    cache: &'a SolveCache,
    periods: HashMap<StateKey, Arc<PeriodOutcome>>,
    values: HashMap<StateKey, BTreeMap<LocId, f64>>,
    perturbation: f64,
}

impl<'a> StrategyEvaluator<'a> {
    pub fn new(
        instance: &'a MarketInstance,
        strategy: &'a StrategyKind,
        mechanism: Mechanism<'a>,
        cache: &'a SolveCache,
    ) -> Self {
        StrategyEvaluator {
            instance,
            strategy,
            mechanism,
            cache,
            periods: HashMap::new(),
            values: HashMap::new(),
            perturbation: cache.params().perturbation,
        }
    }

    fn period(&mut self, state: &MarketState) -> Result<Arc<PeriodOutcome>, PricingError> {
        let key = state_key(state);
        if let Some(hit) = self.periods.get(&key) {
            return Ok(Arc::clone(hit));
        }
        let inst = self.instance;
        let plan = period_plan(inst, state, self.mechanism, self.cache)?;
        let strategy = self.strategy.resolve(inst, &plan)?;

        let mut requests = Vec::with_capacity(inst.n_locations());
        let mut slot_flows = Vec::with_capacity(inst.n_locations());
        let mut flow_f = vec![0.0; inst.n_routes()];
        let mut flow_g = vec![0.0; inst.n_routes()];
        for loc in 0..inst.n_locations() {
            let slots = inst.routes_from(loc);
            let mut req: Vec<f64> = slots
                .iter()
                .map(|&r| {
                    let price = plan.prices.get(r).unwrap_or(f64::INFINITY);
                    expected_requests(inst, r, state.node, price)
                })
                .collect();
            if let Some(cap) = &plan.dispatch_cap {
                for (slot, r) in req.iter_mut().enumerate() {
                    *r = r.min(cap[loc][slot]);
                }
            }
            let matched = fluid_match(state.supply[loc], &req, &strategy.per_location[loc], &plan.pools[loc])?;
            let mut per_slot = Vec::with_capacity(slots.len());
            for (slot, &rid) in slots.iter().enumerate() {
                let g = matched.dispatched[slot];
                let f = g + matched.relocated[slot];
                flow_f[rid] += f;
                flow_g[rid] += g;
                per_slot.push((f, g));
            }
            requests.push(req);
            slot_flows.push(per_slot);
        }

        let children = inst
            .tree
            .children(state.node)
            .iter()
            .map(|&child| {
                let supply = transition_supply(inst, child, &flow_f);
                (child, inst.tree.nodes[child].prob, MarketState::new(child, supply))
            })
            .collect();

        let outcome = Arc::new(PeriodOutcome {
            plan,
            strategy,
            requests,
            flow_f,
            flow_g,
            slot_flows,
            children,
        });
        self.periods.insert(key, Arc::clone(&outcome));
        Ok(outcome)
    }

    /// Per-location values at a state, computed on demand.
    fn values(
        &mut self,
        state: &MarketState,
        needed: &BTreeSet<LocId>,
    ) -> Result<BTreeMap<LocId, f64>, PricingError> {
        let key = state_key(state);
        let missing: BTreeSet<LocId> = needed
            .iter()
            .copied()
            .filter(|loc| {
                self.values.get(&key).map_or(true, |known| !known.contains_key(loc))
            })
            .collect();
        if missing.is_empty() {
            let known = &self.values[&key];
            return Ok(needed.iter().map(|&l| (l, known[&l])).collect());
        }

        let period = self.period(state)?;
        for &loc in &missing {
            let value = if state.supply[loc] > 0.0 {
                self.supplied_value(state, &period, loc)?
            } else {
                // Right limit: add an infinitesimal driver mass and ask again.
                let mut bumped = state.clone();
                bumped.supply[loc] += self.perturbation;
                let mut one = BTreeSet::new();
                one.insert(loc);
                self.values(&bumped, &one)?[&loc]
            };
            self.values.entry(key.clone()).or_default().insert(loc, value);
        }
        let known = &self.values[&key];
        Ok(needed.iter().map(|&l| (l, known[&l])).collect())
    }

    fn supplied_value(
        &mut self,
        state: &MarketState,
        period: &PeriodOutcome,
        loc: LocId,
    ) -> Result<f64, PricingError> {
        let inst = self.instance;
        let slots = inst.routes_from(loc);
        if slots.is_empty() {
            return Ok(0.0);
        }
        let mut acc = 0.0;
        for (slot, &rid) in slots.iter().enumerate() {
            let (f, g) = period.slot_flows[loc][slot];
            if f <= 0.0 {
                continue;
            }
            let q0 = self.relocation_q(period, rid)?;
            acc += (f - g) * q0;
            if g > 0.0 {
                let price = period.plan.prices.get(rid).unwrap_or(0.0);
                let x = period.strategy.per_location[loc].thresholds[slot];
                acc += g * (price - 0.5 * x + q0);
            }
        }
        Ok(acc / state.supply[loc])
    }

    /// Q of a relocation trip on `route` from the period's state: travel cost
    /// plus the expected continuation value at the destination.
    fn relocation_q(&mut self, period: &PeriodOutcome, route: RouteId) -> Result<f64, PricingError> {
        let dest = self.instance.routes[route].destination;
        let mut q = -self.instance.routes[route].cost;
        let children = period.children.clone();
        for (_, prob, child_state) in &children {
            let mut one = BTreeSet::new();
            one.insert(dest);
            q += prob * self.values(child_state, &one)?[&dest];
        }
        Ok(q)
    }

    /// Full Q table at a state.
    pub fn qtable(&mut self, state: &MarketState) -> Result<QTable, PricingError> {
        let inst = self.instance;
        let period = self.period(state)?;
        let mut relocation_q = Vec::with_capacity(inst.n_locations());
        let mut price = Vec::with_capacity(inst.n_locations());
        let mut thresholds = Vec::with_capacity(inst.n_locations());
        for loc in 0..inst.n_locations() {
            let slots = inst.routes_from(loc);
            let mut q_row = Vec::with_capacity(slots.len());
            let mut p_row = Vec::with_capacity(slots.len());
            for &rid in slots {
                q_row.push(self.relocation_q(&period, rid)?);
                p_row.push(period.plan.prices.get(rid));
            }
            relocation_q.push(q_row);
            price.push(p_row);
            thresholds.push(period.strategy.per_location[loc].thresholds.clone());
        }
        let all: BTreeSet<LocId> = (0..inst.n_locations()).collect();
        let values_map = self.values(state, &all)?;
        let value = (0..inst.n_locations()).map(|l| values_map[&l]).collect();
        Ok(QTable {
            node: state.node,
            supply: state.supply.clone(),
            relocation_q,
            price,
            thresholds,
            requests: period.requests.clone(),
            flows: period.slot_flows.clone(),
            value,
        })
    }

    /// States reachable from `state` under the profile's induced fluid flows.
    pub fn reachable_states(&mut self, state: &MarketState) -> Result<Vec<MarketState>, PricingError> {
        let mut out = vec![state.clone()];
        let mut frontier = vec![state.clone()];
        while let Some(s) = frontier.pop() {
            let period = self.period(&s)?;
            for (_, _, child) in period.children.clone() {
                out.push(child.clone());
                frontier.push(child);
            }
        }
        Ok(out)
    }
}

/// Computes the Q table of a strategy profile at one state.
pub fn q_and_value(
    instance: &MarketInstance,
    state: &MarketState,
    strategy: &StrategyKind,
    mechanism: Mechanism<'_>,
    cache: &SolveCache,
) -> Result<QTable, PricingError> {
    StrategyEvaluator::new(instance, strategy, mechanism, cache).qtable(state)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IcCondition {
    RelocationOptimality,
    DispatchAccept,
    DispatchDecline,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IcEntry {
    pub node: NodeId,
    pub location: LocId,
    pub destination: LocId,
    pub condition: IcCondition,
    /// Positive amount by which the condition is violated (0 if satisfied).
    pub violation: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IcReport {
    pub epsilon: f64,
    pub pass: bool,
    pub worst_violation: f64,
    pub entries: Vec<IcEntry>,
}

const VOLUME_EPS: f64 = 1e-7;

/// Checks the three incentive conditions for a strategy profile at the given
/// state and at every state its fluid dynamics reach: drivers relocating must
/// be at a best relocation; accepted dispatches must beat the best relocation
/// up to `epsilon`; declined dispatches must not.
pub fn check_incentive_conditions(
    instance: &MarketInstance,
    state: &MarketState,
    strategy: &StrategyKind,
    mechanism: Mechanism<'_>,
    epsilon: f64,
    cache: &SolveCache,
) -> Result<IcReport, PricingError> {
    let mut evaluator = StrategyEvaluator::new(instance, strategy, mechanism, cache);
    let states = evaluator.reachable_states(state)?;
    let mut entries = Vec::new();
    let mut worst: f64 = 0.0;
    for s in &states {
        let scale = s.supply.iter().sum::<f64>().max(1.0);
        let qt = evaluator.qtable(s)?;
        for loc in 0..instance.n_locations() {
            if s.supply[loc] <= VOLUME_EPS * scale {
                continue;
            }
            let best = qt.best_relocation_q(loc);
            for (slot, &rid) in instance.routes_from(loc).iter().enumerate() {
                let dest = instance.routes[rid].destination;
                let (f, g) = qt.flows[loc][slot];
                let x = qt.thresholds[loc][slot];
                if f - g > VOLUME_EPS {
                    let violation = (qt.relocation_q[loc][slot] - best).abs();
                    worst = worst.max(violation);
                    entries.push(IcEntry {
                        node: s.node,
                        location: loc,
                        destination: dest,
                        condition: IcCondition::RelocationOptimality,
                        violation,
                    });
                }
                if g > VOLUME_EPS {
                    if let Some(q1) = qt.dispatch_q(loc, slot, x) {
                        let violation = (best - q1).max(0.0);
                        worst = worst.max(violation);
                        entries.push(IcEntry {
                            node: s.node,
                            location: loc,
                            destination: dest,
                            condition: IcCondition::DispatchAccept,
                            violation,
                        });
                    }
                }
                if qt.requests[loc][slot] > VOLUME_EPS && x < instance.pickup_bound {
                    if let Some(q1) = qt.dispatch_q(loc, slot, x) {
                        let violation = (q1 - best).max(0.0);
                        worst = worst.max(violation);
                        entries.push(IcEntry {
                            node: s.node,
                            location: loc,
                            destination: dest,
                            condition: IcCondition::DispatchDecline,
                            violation,
                        });
                    }
                }
            }
        }
    }
    entries.retain(|e| e.violation > epsilon);
    entries.sort_by(|a, b| b.violation.partial_cmp(&a.violation).unwrap());
    Ok(IcReport { epsilon, pass: worst <= epsilon, worst_violation: worst, entries })
}
