//! Population-scale market simulation with strategic driver agents.
//!
//! The two-level model replays the fluid dynamics with `k`-scaled integer
//! populations and idiosyncratic randomness: entering drivers and potential
//! riders are sampled per (location/route, scenario node), each driver draws
//! a fresh pickup disutility every period, and the stochastic matching
//! process allocates dispatches. Every random draw comes from a stream keyed
//! by (seed, episode, period, location/route, stage, entity), so episodes are
//! reproducible, order-independent across locations, and a single driver's
//! deviation leaves all other randomness untouched.

use crate::market::{CountSampling, LocId, MarketInstance, MarketState, NodeId};
use crate::matching::{sample_match, MatchInputs, RosterDriver};
use crate::pricing::{
    period_plan, static_plan, Mechanism, PeriodPlan, PricingError, StaticPlan, StrategyKind,
};
use crate::rng::{stage, StreamKey};
use crate::solver::SolveCache;
use crate::stats::mean_and_se;
use rand::Rng;
use rand_distr::{Binomial, Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Identity of the driver a rollout singles out for auditing.
pub const TAGGED_DRIVER: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MechanismKind {
    Ssp,
    Static,
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    /// Population-size parameter; volumes scale by `k` and reports divide by it.
    pub k: u64,
    pub mechanism: MechanismKind,
    pub strategy: StrategyKind,
    pub seed: u64,
    pub episodes: u64,
}

impl SimConfig {
    pub fn new(k: u64, mechanism: MechanismKind, strategy: StrategyKind, seed: u64) -> Self {
        SimConfig { k, mechanism, strategy, seed, episodes: 1 }
    }

    pub fn with_episodes(mut self, episodes: u64) -> Self {
        self.episodes = episodes;
        self
    }
}

/// One driver-period action record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub period: u32,
    pub node: NodeId,
    pub driver_id: u64,
    pub origin: LocId,
    pub destination: LocId,
    pub dispatched: bool,
    /// Trip price paid by the rider on dispatch rows, 0 otherwise.
    pub price: f64,
    /// Pickup disutility the driver sampled this period.
    pub disutility: f64,
    /// Rider value served on dispatch rows, 0 otherwise.
    pub rider_value: f64,
    pub reward: f64,
    pub welfare: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodRecord {
    pub period: u32,
    pub node: NodeId,
    /// Entering-driver counts per location.
    pub entries: Vec<u64>,
    /// Dispatch-request counts per route.
    pub requests: Vec<u64>,
    /// Prices per route (demand routes only).
    pub prices: Vec<Option<f64>>,
    pub rows: Vec<EpisodeRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub episode: u64,
    pub periods: Vec<PeriodRecord>,
}

impl EpisodeTrace {
    pub fn rows(&self) -> impl Iterator<Item = &EpisodeRow> {
        self.periods.iter().flat_map(|p| p.rows.iter())
    }

    pub fn driver_utility(&self, driver: u64) -> f64 {
        self.rows().filter(|r| r.driver_id == driver).map(|r| r.reward).sum()
    }
}

/// `(1/k) sum of per-driver welfare` over the whole episode.
pub fn normalized_welfare(trace: &EpisodeTrace, k: u64) -> f64 {
    trace.rows().map(|r| r.welfare).sum::<f64>() / k as f64
}

/// Welfare generated by dispatch trips alone: rider value net of pickup
/// disutility and trip cost, normalized by `k`. Prices transfer between rider
/// and driver and cancel row-wise.
pub fn dispatch_welfare(trace: &EpisodeTrace, instance: &MarketInstance, k: u64) -> f64 {
    trace
        .rows()
        .filter(|r| r.dispatched)
        .map(|r| {
            let cost = instance
                .route_id(r.origin, r.destination)
                .map(|rid| instance.routes[rid].cost)
                .unwrap_or(0.0);
            r.rider_value - r.disutility - cost
        })
        .sum::<f64>()
        / k as f64
}

/// First-period override for the tagged driver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ForcedAction {
    /// Accept whatever dispatch is offered; relocate per strategy otherwise.
    AcceptOffered,
    /// Decline any dispatch and relocate per strategy.
    DeclineOffered,
    /// Decline any dispatch and relocate to the given location.
    RelocateTo(LocId),
}

#[derive(Debug, Clone)]
pub struct TaggedDriver {
    pub location: LocId,
    pub force: Option<ForcedAction>,
}

struct SimDriver {
    id: u64,
    loc: LocId,
}

fn driver_id(period: u32, loc: LocId, index: u64) -> u64 {
    (u64::from(period) << 40) | ((loc as u64) << 32) | index
}

fn sample_count(rng: &mut impl Rng, sampling: CountSampling, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    match sampling {
        CountSampling::Binomial => {
            let n = (2.0 * mean).round() as u64;
            if n == 0 {
                return 0;
            }
            Binomial::new(n, 0.5).expect("valid binomial").sample(rng)
        }
        CountSampling::Poisson => Poisson::new(mean).expect("valid poisson").sample(rng) as u64,
    }
}

/// Everything fixed across the episodes of one configuration.
pub struct SimContext<'a> {
    pub instance: &'a MarketInstance,
    pub config: &'a SimConfig,
    pub cache: &'a SolveCache,
    static_plan: Option<StaticPlan>,
}

impl<'a> SimContext<'a> {
    pub fn new(
        instance: &'a MarketInstance,
        config: &'a SimConfig,
        cache: &'a SolveCache,
    ) -> Result<Self, PricingError> {
        let static_plan = match config.mechanism {
            MechanismKind::Static => {
                Some(static_plan(instance, &instance.initial_state(), cache)?)
            }
            MechanismKind::Ssp => None,
        };
        Ok(SimContext { instance, config, cache, static_plan })
    }

    fn mechanism(&self) -> Mechanism<'_> {
        match &self.static_plan {
            Some(plan) => Mechanism::Static(plan),
            None => Mechanism::Ssp,
        }
    }

    /// Runs one episode, optionally with a tagged driver injected at period 1.
    pub fn run_episode(
        &self,
        episode: u64,
        tagged: Option<&TaggedDriver>,
    ) -> Result<EpisodeTrace, PricingError> {
        let inst = self.instance;
        let k = self.config.k;
        let base_key = StreamKey::new(self.config.seed).with_episode(episode);
        let mut drivers: Vec<SimDriver> = Vec::new();
        let mut node = inst.tree.root;
        let mut periods = Vec::with_capacity(inst.tree.horizon as usize);

        for period in 1..=inst.tree.horizon {
            let key = base_key.with_period(period);

            // Entering drivers.
            let mut entries = vec![0u64; inst.n_locations()];
            for loc in 0..inst.n_locations() {
                let mean = k as f64 * inst.entry_mean(node, loc);
                let mut rng = key.with_location(loc as u32).with_stage(stage::ENTRIES).rng();
                let n = sample_count(&mut rng, inst.sampling, mean);
                entries[loc] = n;
                for i in 0..n {
                    drivers.push(SimDriver { id: driver_id(period, loc, i), loc });
                }
            }
            if period == 1 {
                if let Some(t) = tagged {
                    drivers.push(SimDriver { id: TAGGED_DRIVER, loc: t.location });
                }
            }

            // Prices, pools, and the reference strategy at the realized state.
            let supply: Vec<f64> = {
                let mut counts = vec![0u64; inst.n_locations()];
                for d in &drivers {
                    counts[d.loc] += 1;
                }
                counts.iter().map(|&c| c as f64 / k as f64).collect()
            };
            let state = MarketState::new(node, supply);
            let plan = period_plan(inst, &state, self.mechanism(), self.cache)?;
            let strategy = self.config.strategy.resolve(inst, &plan)?;

            // Potential riders per route: sampled count, then a value draw per
            // rider; those with value at or above the price request a trip.
            let mut requests = vec![0u64; inst.n_routes()];
            let mut rider_values: Vec<Vec<f64>> = vec![Vec::new(); inst.n_routes()];
            for rid in 0..inst.n_routes() {
                let Some(spec) = inst.demand_at(node, rid) else { continue };
                let Some(price) = plan.prices.get(rid) else { continue };
                let mut rng = key.with_location(rid as u32).with_stage(stage::RIDERS).rng();
                let n = sample_count(&mut rng, inst.sampling, k as f64 * spec.d_bar);
                for _ in 0..n {
                    let v = spec.values.sample(&mut rng);
                    if v >= price {
                        rider_values[rid].push(v);
                    }
                }
                requests[rid] = rider_values[rid].len() as u64;
            }

            // Per-driver disutility draws and acceptance probabilities.
            let c = inst.pickup_bound;
            let mut disutility: BTreeMap<u64, f64> = BTreeMap::new();
            for d in &drivers {
                let x = if c == 0.0 {
                    0.0
                } else {
                    key.with_stage(stage::DISUTILITY).with_entity(d.id).rng().gen::<f64>() * c
                };
                disutility.insert(d.id, x);
            }

            // Matching per location.
            let mut rows = Vec::with_capacity(drivers.len());
            let mut moved: Vec<SimDriver> = Vec::with_capacity(drivers.len());
            for loc in 0..inst.n_locations() {
                let slots = inst.routes_from(loc);
                let local: Vec<&SimDriver> = drivers.iter().filter(|d| d.loc == loc).collect();
                if local.is_empty() {
                    continue;
                }
                let slice = &strategy.per_location[loc];
                let roster: Vec<RosterDriver> = local
                    .iter()
                    .map(|d| {
                        let x = disutility[&d.id];
                        let force = if d.id == TAGGED_DRIVER && period == 1 {
                            tagged.and_then(|t| t.force)
                        } else {
                            None
                        };
                        let accept_prob: Vec<f64> = slots
                            .iter()
                            .enumerate()
                            .map(|(s, _)| match force {
                                Some(ForcedAction::AcceptOffered) => 1.0,
                                Some(ForcedAction::DeclineOffered)
                                | Some(ForcedAction::RelocateTo(_)) => 0.0,
                                None => {
                                    if c == 0.0 {
                                        1.0
                                    } else if slice.thresholds[s] <= 0.0 {
                                        0.0
                                    } else if x <= slice.thresholds[s] {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                            })
                            .collect();
                        let mut reloc_rng =
                            key.with_stage(stage::RELOCATION).with_entity(d.id).rng();
                        let relocation = match force {
                            Some(ForcedAction::RelocateTo(dest)) => slots
                                .iter()
                                .position(|&r| inst.routes[r].destination == dest)
                                .unwrap_or(0),
                            _ => sample_slot(&mut reloc_rng, &slice.relocation),
                        };
                        RosterDriver { id: d.id, accept_prob, relocation }
                    })
                    .collect();
                let slot_requests: Vec<u64> = slots
                    .iter()
                    .enumerate()
                    .map(|(s, &rid)| {
                        let mut r = requests[rid];
                        if let Some(cap) = &plan.dispatch_cap {
                            r = r.min((k as f64 * cap[loc][s]).round() as u64);
                        }
                        r
                    })
                    .collect();
                let inputs = MatchInputs {
                    drivers: roster,
                    requests: slot_requests,
                    plan: plan.pools[loc].clone(),
                };
                let mut match_rng =
                    key.with_location(loc as u32).with_stage(stage::MATCH_PARTITION).rng();
                let outcome = sample_match(&mut match_rng, &inputs)?;

                let mut served: Vec<usize> = vec![0; slots.len()];
                for a in &outcome.assignments {
                    let slot = a.destination;
                    let rid = slots[slot];
                    let dest = inst.routes[rid].destination;
                    let cost = inst.routes[rid].cost;
                    let x = disutility[&a.driver];
                    let (price, rider_value, reward) = if a.dispatched {
                        let p = plan.prices.get(rid).unwrap_or(0.0);
                        let v = rider_values[rid][served[slot]];
                        served[slot] += 1;
                        (p, v, p - x - cost)
                    } else {
                        (0.0, 0.0, -cost)
                    };
                    let welfare =
                        if a.dispatched { reward + (rider_value - price) } else { reward };
                    rows.push(EpisodeRow {
                        period,
                        node,
                        driver_id: a.driver,
                        origin: loc,
                        destination: dest,
                        dispatched: a.dispatched,
                        price,
                        disutility: if a.dispatched { x } else { 0.0 },
                        rider_value,
                        reward,
                        welfare,
                    });
                    moved.push(SimDriver { id: a.driver, loc: dest });
                }
            }
            moved.sort_by_key(|d| d.id);
            rows.sort_by_key(|r| r.driver_id);
            drivers = moved;

            periods.push(PeriodRecord {
                period,
                node,
                entries,
                requests,
                prices: plan.prices.per_route.clone(),
                rows,
            });

            // Scenario transition for the next period.
            if period < inst.tree.horizon {
                let children = inst.tree.children(node);
                if children.is_empty() {
                    break;
                }
                let mut rng = key.with_stage(stage::SCENARIO).rng();
                node = sample_child(&mut rng, inst, children);
            }
        }

        Ok(EpisodeTrace { episode, periods })
    }

    /// Runs the configured number of episodes in parallel.
    pub fn run_all(&self) -> Result<Vec<EpisodeTrace>, PricingError> {
        (0..self.config.episodes)
            .into_par_iter()
            .map(|e| self.run_episode(e, None))
            .collect()
    }
}

fn sample_slot(rng: &mut impl Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return 0;
    }
    let mut draw = rng.gen::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        draw -= w;
        if draw <= 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

fn sample_child(rng: &mut impl Rng, instance: &MarketInstance, children: &[NodeId]) -> NodeId {
    let mut draw = rng.gen::<f64>();
    for &child in children {
        draw -= instance.tree.nodes[child].prob;
        if draw <= 0.0 {
            return child;
        }
    }
    *children.last().expect("nonempty children")
}

/// Monte-Carlo estimate of a tagged driver's utility-to-go from a location,
/// optionally forcing its first action.
pub fn estimate_utility_to_go(
    ctx: &SimContext<'_>,
    location: LocId,
    force: Option<ForcedAction>,
    rollouts: u64,
) -> Result<(f64, f64), PricingError> {
    let tagged = TaggedDriver { location, force };
    let samples: Result<Vec<f64>, PricingError> = (0..rollouts)
        .into_par_iter()
        .map(|e| Ok(self::SimContext::run_episode(ctx, e, Some(&tagged))?.driver_utility(TAGGED_DRIVER)))
        .collect();
    Ok(mean_and_se(&samples?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Deviation {
    AcceptOffered,
    DeclineOffered,
    RelocateTo(LocId),
}

impl Deviation {
    fn force(self) -> ForcedAction {
        match self {
            Deviation::AcceptOffered => ForcedAction::AcceptOffered,
            Deviation::DeclineOffered => ForcedAction::DeclineOffered,
            Deviation::RelocateTo(d) => ForcedAction::RelocateTo(d),
        }
    }
}

/// Conditioning event for a deviation estimate: the destination offered to
/// the tagged driver in period 1 (if any) and its disutility bucket.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AuditEvent {
    pub offered: Option<LocId>,
    pub bucket: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditRow {
    pub event: AuditEvent,
    pub deviation: Deviation,
    pub mean_gap: f64,
    pub se: f64,
    pub samples: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditReport {
    pub location: LocId,
    pub rows: Vec<AuditRow>,
    /// Largest mean utility gain over all conditioning events and deviations.
    pub epsilon_hat: f64,
    /// Fraction of observed events whose best deviation gains more than the
    /// threshold.
    pub fraction_above: f64,
    pub threshold: f64,
    /// Mean driver count at the audited location in period 1.
    pub mean_drivers: f64,
    /// Fewer than 10 drivers on average makes the estimate low-confidence.
    pub low_confidence: bool,
}

const DISUTILITY_BUCKETS: usize = 4;

fn bucket_of(x: f64, pickup_bound: f64) -> usize {
    if pickup_bound <= 0.0 {
        return 0;
    }
    (((x / pickup_bound) * DISUTILITY_BUCKETS as f64) as usize).min(DISUTILITY_BUCKETS - 1)
}

/// Estimates, for every conditioning event, the utility a tagged driver gains
/// by deviating from the profile in its first period. Rollouts share all
/// randomness except the deviation itself (the tagged driver's streams are
/// isolated by entity key), so the follow and deviate arms pair per episode.
pub fn audit_incentives(
    ctx: &SimContext<'_>,
    location: LocId,
    threshold: f64,
    rollouts: u64,
) -> Result<AuditReport, PricingError> {
    let inst = ctx.instance;
    let mut deviations: Vec<Deviation> = vec![Deviation::AcceptOffered, Deviation::DeclineOffered];
    for &rid in inst.routes_from(location) {
        deviations.push(Deviation::RelocateTo(inst.routes[rid].destination));
    }

    struct EpisodeAudit {
        event: AuditEvent,
        gaps: Vec<(Deviation, f64)>,
        drivers: u64,
    }

    let episodes: Result<Vec<EpisodeAudit>, PricingError> = (0..rollouts)
        .into_par_iter()
        .map(|e| {
            let follow = ctx.run_episode(e, Some(&TaggedDriver { location, force: None }))?;
            let base_utility = follow.driver_utility(TAGGED_DRIVER);
            let first = &follow.periods[0];
            let tagged_row = first.rows.iter().find(|r| r.driver_id == TAGGED_DRIVER);
            let offered = tagged_row.and_then(|r| {
                if r.dispatched {
                    Some(r.destination)
                } else {
                    None
                }
            });
            // Declined offers are not visible in the trace; conditioning uses
            // the realized dispatch destination (or none).
            let x = key_disutility(ctx, e, location);
            let event = AuditEvent { offered, bucket: bucket_of(x, inst.pickup_bound) };
            let mut gaps = Vec::new();
            for &dev in &deviations {
                let applicable = match dev {
                    Deviation::AcceptOffered | Deviation::DeclineOffered => offered.is_some(),
                    Deviation::RelocateTo(_) => true,
                };
                if !applicable {
                    continue;
                }
                let trace =
                    ctx.run_episode(e, Some(&TaggedDriver { location, force: Some(dev.force()) }))?;
                gaps.push((dev, trace.driver_utility(TAGGED_DRIVER) - base_utility));
            }
            let drivers = first.rows.iter().filter(|r| r.origin == location).count() as u64;
            Ok(EpisodeAudit { event, gaps, drivers })
        })
        .collect();
    let episodes = episodes?;

    let mut grouped: BTreeMap<(AuditEvent, String), (Deviation, Vec<f64>)> = BTreeMap::new();
    for ep in &episodes {
        for &(dev, gap) in &ep.gaps {
            grouped
                .entry((ep.event, format!("{dev:?}")))
                .or_insert_with(|| (dev, Vec::new()))
                .1
                .push(gap);
        }
    }

    let mut rows = Vec::new();
    let mut epsilon_hat: f64 = 0.0;
    let mut event_best: BTreeMap<AuditEvent, f64> = BTreeMap::new();
    for ((event, _), (dev, gaps)) in &grouped {
        let (mean, se) = mean_and_se(gaps);
        rows.push(AuditRow { event: *event, deviation: *dev, mean_gap: mean, se, samples: gaps.len() as u64 });
        if gaps.len() >= 5 {
            epsilon_hat = epsilon_hat.max(mean);
            let best = event_best.entry(*event).or_insert(f64::NEG_INFINITY);
            *best = best.max(mean);
        }
    }
    let mut event_counts: BTreeMap<AuditEvent, u64> = BTreeMap::new();
    for ep in &episodes {
        *event_counts.entry(ep.event).or_insert(0) += 1;
    }
    let total: u64 = event_counts.values().sum();
    let above: u64 = event_counts
        .iter()
        .filter(|(event, _)| event_best.get(event).copied().unwrap_or(f64::NEG_INFINITY) > threshold)
        .map(|(_, &c)| c)
        .sum();
    let fraction_above = if total > 0 { above as f64 / total as f64 } else { 0.0 };
    let mean_drivers =
        episodes.iter().map(|e| e.drivers as f64).sum::<f64>() / episodes.len().max(1) as f64;

    Ok(AuditReport {
        location,
        rows,
        epsilon_hat,
        fraction_above,
        threshold,
        mean_drivers,
        low_confidence: mean_drivers < 10.0,
    })
}

/// The tagged driver's period-1 disutility draw (same stream the episode uses).
fn key_disutility(ctx: &SimContext<'_>, episode: u64, _location: LocId) -> f64 {
    let c = ctx.instance.pickup_bound;
    if c == 0.0 {
        return 0.0;
    }
    StreamKey::new(ctx.config.seed)
        .with_episode(episode)
        .with_period(1)
        .with_stage(stage::DISUTILITY)
        .with_entity(TAGGED_DRIVER)
        .rng()
        .gen::<f64>()
        * c
}

/// Episode trace rows in CSV form, one row per driver action.
pub fn trace_to_csv(trace: &EpisodeTrace, instance: &MarketInstance) -> String {
    let mut out = String::from(
        "episode,period,node,location,driver_id,action_origin,action_dest,dispatch_flag,price,X,reward,welfare\n",
    );
    for p in &trace.periods {
        for r in &p.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                trace.episode,
                r.period,
                instance.tree.nodes[r.node].name,
                instance.locations[r.origin],
                r.driver_id,
                instance.locations[r.origin],
                instance.locations[r.destination],
                u8::from(r.dispatched),
                r.price,
                r.disutility,
                r.reward,
                r.welfare,
            ));
        }
    }
    out
}

/// Audit report in CSV form keyed by (location, offered_dest, bucket, deviation).
pub fn audit_to_csv(report: &AuditReport, instance: &MarketInstance) -> String {
    let mut out = String::from("location,offered_dest,bucket,deviation,mean_gap,se,samples\n");
    for row in &report.rows {
        let offered = row
            .event
            .offered
            .map(|d| instance.locations[d].clone())
            .unwrap_or_else(|| "none".to_string());
        let deviation = match row.deviation {
            Deviation::AcceptOffered => "accept".to_string(),
            Deviation::DeclineOffered => "decline".to_string(),
            Deviation::RelocateTo(d) => format!("relocate:{}", instance.locations[d]),
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            instance.locations[report.location],
            offered,
            row.event.bucket,
            deviation,
            row.mean_gap,
            row.se,
            row.samples,
        ));
    }
    out
}
