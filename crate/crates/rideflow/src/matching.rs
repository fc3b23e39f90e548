//! Fluid and stochastic matching processes.
//!
//! Matching runs per origin location in two stages. Stage one partitions the
//! drivers into per-destination pools sized from the optimal plan and offers
//! each pool its destination's requests. Stage two sweeps destinations in
//! index order, offering leftover requests to the still-unoffered pool. A
//! driver is offered at most one dispatch; declining means relocating. The
//! exact distribution oracle enumerates the whole process for tiny rosters.

use crate::rng::{stage, StreamKey};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("pool size undefined: threshold 0 with dispatch volume {0}")]
    ZeroThreshold(f64),
    #[error("instance too large for exact enumeration: {0}")]
    SizeLimit(String),
    #[error("acceptance probability {0} outside [0, 1]")]
    BadProbability(f64),
}

/// Volume of dispatch offers needed to realize `g` acceptances at threshold
/// `x`: `Z = C g / x`, with `Z = g` under the accept-all convention `C = 0`.
pub fn dispatch_pool_size(pickup_bound: f64, g: f64, x: f64) -> Result<f64, MatchError> {
    if g == 0.0 {
        return Ok(0.0);
    }
    if pickup_bound == 0.0 {
        return Ok(g);
    }
    if x <= 0.0 {
        return Err(MatchError::ZeroThreshold(g));
    }
    Ok(pickup_bound * g / x)
}

/// Fluid single-destination subroutine: offered volume is capped by the pool,
/// accepted volume scales by the acceptance probability.
/// Returns `(accepted, never_offered)`.
pub fn fluid_single_destination(requests: f64, pool: f64, x: f64, pickup_bound: f64) -> (f64, f64) {
    if pickup_bound == 0.0 {
        let accepted = requests.min(pool);
        return (accepted, pool - accepted);
    }
    let p = (x / pickup_bound).clamp(0.0, 1.0);
    if p == 0.0 {
        // Acceptance never happens and offers exhaust the whole pool.
        return (0.0, 0.0);
    }
    let needed = requests * pickup_bound / x;
    let offered = needed.min(pool);
    (offered * p, pool - offered)
}

/// Per-location strategy slice: thresholds per destination plus a relocation
/// distribution over destinations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationStrategy {
    pub thresholds: Vec<f64>,
    pub relocation: Vec<f64>,
}

/// Optimal-plan data used to size stage-one pools.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolPlan {
    /// Planned dispatch volume per destination.
    pub dispatch: Vec<f64>,
    /// Common planned threshold; ignored when `pickup_bound = 0`.
    pub threshold: f64,
    pub pickup_bound: f64,
}

impl PoolPlan {
    /// Stage-one pool weights `Z_d`; all zero when no dispatch is planned.
    pub fn pool_weights(&self) -> Result<Vec<f64>, MatchError> {
        self.dispatch
            .iter()
            .map(|&g| dispatch_pool_size(self.pickup_bound, g, self.threshold))
            .collect()
    }
}

/// Deterministic matching outcome in driver-volume units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluidMatch {
    /// Accepted dispatch volume per destination.
    pub dispatched: Vec<f64>,
    /// Relocation volume per destination.
    pub relocated: Vec<f64>,
}

/// Fluid two-stage matching at one location.
pub fn fluid_match(
    supply: f64,
    requests: &[f64],
    strategy: &LocationStrategy,
    plan: &PoolPlan,
) -> Result<FluidMatch, MatchError> {
    let n_dest = requests.len();
    let c = plan.pickup_bound;
    let weights = plan.pool_weights()?;
    let total_weight: f64 = weights.iter().sum();

    let mut dispatched = vec![0.0; n_dest];
    let mut remaining = vec![0.0; n_dest];
    let mut pool_after_one = 0.0;
    if total_weight > 0.0 && supply > 0.0 {
        for d in 0..n_dest {
            let pool = supply * weights[d] / total_weight;
            let (accepted, untouched) =
                fluid_single_destination(requests[d], pool, strategy.thresholds[d], c);
            dispatched[d] = accepted.min(requests[d]);
            remaining[d] = requests[d] - dispatched[d];
            pool_after_one += untouched;
        }
    } else {
        pool_after_one = supply;
        remaining.copy_from_slice(requests);
    }

    let mut pool = pool_after_one;
    for d in 0..n_dest {
        if remaining[d] <= 0.0 || pool <= 0.0 {
            continue;
        }
        let (accepted, untouched) =
            fluid_single_destination(remaining[d], pool, strategy.thresholds[d], c);
        let accepted = accepted.min(remaining[d]);
        dispatched[d] += accepted;
        pool = untouched;
    }

    let relocating: f64 = (supply - dispatched.iter().sum::<f64>()).max(0.0);
    let relocated = strategy.relocation.iter().map(|&e| e * relocating).collect();
    Ok(FluidMatch { dispatched, relocated })
}

/// One driver as the matcher sees it: per-destination acceptance
/// probabilities and a chosen relocation destination.
#[derive(Debug, Clone, PartialEq)]
pub struct RosterDriver {
    pub id: u64,
    pub accept_prob: Vec<f64>,
    pub relocation: usize,
}

/// Inputs for one location's stochastic matching round.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchInputs {
    pub drivers: Vec<RosterDriver>,
    pub requests: Vec<u64>,
    pub plan: PoolPlan,
}

impl MatchInputs {
    pub fn validate(&self) -> Result<(), MatchError> {
        for d in &self.drivers {
            for &p in &d.accept_prob {
                if !(0.0..=1.0).contains(&p) {
                    return Err(MatchError::BadProbability(p));
                }
            }
        }
        Ok(())
    }
}

/// Assignment of one driver after matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub driver: u64,
    pub destination: usize,
    pub dispatched: bool,
}

/// Stochastic matching outcome: per-destination counts plus one trip per driver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchOutcome {
    pub dispatched: Vec<u64>,
    pub relocated: Vec<u64>,
    pub assignments: Vec<Assignment>,
}

impl MatchOutcome {
    pub fn total_dispatched(&self) -> u64 {
        self.dispatched.iter().sum()
    }
}

/// Offers up to `requests` dispatches toward one destination to the roster
/// slice in uniformly random order; each driver accepts with probability
/// `accept_prob[dest]`. Returns (accepted, declined, never-offered) indices.
pub fn sample_single_destination(
    rng: &mut impl Rng,
    requests: u64,
    roster: &[RosterDriver],
    dest: usize,
) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..roster.len()).collect();
    order.shuffle(rng);
    let mut accepted = Vec::new();
    let mut declined = Vec::new();
    let mut untouched = Vec::new();
    let mut served = 0;
    for idx in order {
        if served >= requests {
            untouched.push(idx);
            continue;
        }
        let p = roster[idx].accept_prob[dest];
        let accepts = p > 0.0 && (p >= 1.0 || rng.gen_bool(p));
        if accepts {
            accepted.push(idx);
            served += 1;
        } else {
            declined.push(idx);
        }
    }
    (accepted, declined, untouched)
}

/// Largest-remainder rounding of `total · weights / sum(weights)`; ties on
/// the fractional part go to the lower index. The result sums to `total` and
/// each count is within one of its exact share.
pub fn largest_remainder_partition(total: u64, weights: &[f64]) -> Vec<u64> {
    let sum: f64 = weights.iter().sum();
    let n = weights.len();
    if sum <= 0.0 || n == 0 {
        let mut sizes = vec![0u64; n];
        if n > 0 {
            sizes[0] = total;
        }
        return sizes;
    }
    let shares: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut sizes: Vec<u64> = shares.iter().map(|s| s.floor() as u64).collect();
    let assigned: u64 = sizes.iter().sum();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let fa = shares[a] - shares[a].floor();
        let fb = shares[b] - shares[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for i in 0..(total - assigned) as usize {
        sizes[order[i % n]] += 1;
    }
    sizes
}

/// Stochastic two-stage matching for one location.
pub fn sample_match(rng: &mut impl Rng, inputs: &MatchInputs) -> Result<MatchOutcome, MatchError> {
    inputs.validate()?;
    let n_dest = inputs.requests.len();
    let m = inputs.drivers.len();
    let weights = inputs.plan.pool_weights()?;
    let total_weight: f64 = weights.iter().sum();

    let mut dispatched_counts = vec![0u64; n_dest];
    let mut assignments = Vec::with_capacity(m);
    let mut relocators: Vec<usize> = Vec::new();
    let mut pool: Vec<usize>;
    let mut remaining = inputs.requests.clone();

    if total_weight > 0.0 && m > 0 {
        let sizes = largest_remainder_partition(m as u64, &weights);
        let mut order: Vec<usize> = (0..m).collect();
        order.shuffle(rng);
        let mut cursor = 0;
        pool = Vec::new();
        for (dest, &size) in sizes.iter().enumerate() {
            let group: Vec<usize> = order[cursor..cursor + size as usize].to_vec();
            cursor += size as usize;
            let members: Vec<RosterDriver> =
                group.iter().map(|&i| inputs.drivers[i].clone()).collect();
            let (accepted, declined, untouched) =
                sample_single_destination(rng, remaining[dest], &members, dest);
            remaining[dest] -= accepted.len() as u64;
            dispatched_counts[dest] += accepted.len() as u64;
            for local in accepted {
                assignments.push(Assignment {
                    driver: inputs.drivers[group[local]].id,
                    destination: dest,
                    dispatched: true,
                });
            }
            relocators.extend(declined.into_iter().map(|local| group[local]));
            pool.extend(untouched.into_iter().map(|local| group[local]));
        }
    } else {
        pool = (0..m).collect();
    }

    for dest in 0..n_dest {
        if remaining[dest] == 0 || pool.is_empty() {
            continue;
        }
        let members: Vec<RosterDriver> = pool.iter().map(|&i| inputs.drivers[i].clone()).collect();
        let (accepted, declined, untouched) =
            sample_single_destination(rng, remaining[dest], &members, dest);
        remaining[dest] -= accepted.len() as u64;
        dispatched_counts[dest] += accepted.len() as u64;
        for local in &accepted {
            assignments.push(Assignment {
                driver: inputs.drivers[pool[*local]].id,
                destination: dest,
                dispatched: true,
            });
        }
        relocators.extend(declined.iter().map(|&local| pool[local]));
        pool = untouched.into_iter().map(|local| pool[local]).collect();
    }
    relocators.extend(pool);

    let mut relocated_counts = vec![0u64; n_dest];
    for idx in relocators {
        let driver = &inputs.drivers[idx];
        relocated_counts[driver.relocation] += 1;
        assignments.push(Assignment {
            driver: driver.id,
            destination: driver.relocation,
            dispatched: false,
        });
    }
    assignments.sort_by_key(|a| a.driver);

    Ok(MatchOutcome { dispatched: dispatched_counts, relocated: relocated_counts, assignments })
}

/// Wrapper with a keyed stream so calls stay reproducible and
/// order-independent across locations.
pub fn sample_match_keyed(key: StreamKey, inputs: &MatchInputs) -> Result<MatchOutcome, MatchError> {
    let mut rng = key.with_stage(stage::MATCH_PARTITION).rng();
    sample_match(&mut rng, inputs)
}

const ENUM_MAX_DRIVERS: usize = 5;
const ENUM_MAX_REQUESTS: u64 = 4;

/// Enumerates the single-destination subroutine over a driver bitmask:
/// repeatedly pick a uniformly random unoffered driver and branch on the
/// accept decision. Calls `sink` with (probability, accepted count,
/// declined mask, untouched mask).
fn enumerate_subroutine(
    drivers: &[RosterDriver],
    dest: usize,
    mask: u32,
    requests: u64,
    prob: f64,
    accepted: u64,
    declined: u32,
    sink: &mut dyn FnMut(f64, u64, u32, u32),
) {
    if requests == 0 || mask == 0 {
        sink(prob, accepted, declined, mask);
        return;
    }
    let members: Vec<usize> = (0..drivers.len()).filter(|i| mask & (1 << i) != 0).collect();
    let pick = 1.0 / members.len() as f64;
    for &i in &members {
        let p = drivers[i].accept_prob[dest];
        let next_mask = mask & !(1 << i);
        if p > 0.0 {
            enumerate_subroutine(
                drivers,
                dest,
                next_mask,
                requests - 1,
                prob * pick * p,
                accepted + 1,
                declined,
                sink,
            );
        }
        if p < 1.0 {
            enumerate_subroutine(
                drivers,
                dest,
                next_mask,
                requests,
                prob * pick * (1.0 - p),
                accepted,
                declined | (1 << i),
                sink,
            );
        }
    }
}

struct EnumFrame {
    prob: f64,
    remaining: Vec<u64>,
    pool: u32,
    dispatched: Vec<u64>,
    relocating: u32,
}

fn enumerate_stage_one(
    inputs: &MatchInputs,
    sizes: &[u64],
    dest: usize,
    available: u32,
    prob: f64,
    remaining: &mut Vec<u64>,
    dispatched: &mut Vec<u64>,
    relocating: u32,
    pool: u32,
    frames: &mut Vec<EnumFrame>,
) {
    if dest == sizes.len() {
        frames.push(EnumFrame {
            prob,
            remaining: remaining.clone(),
            pool,
            dispatched: dispatched.clone(),
            relocating,
        });
        return;
    }
    let size = sizes[dest] as usize;
    let members: Vec<usize> =
        (0..inputs.drivers.len()).filter(|i| available & (1 << i) != 0).collect();
    let mut combos: Vec<u32> = Vec::new();
    fn build(members: &[usize], size: usize, start: usize, mask: u32, out: &mut Vec<u32>) {
        if size == 0 {
            out.push(mask);
            return;
        }
        for i in start..members.len() {
            build(members, size - 1, i + 1, mask | (1 << members[i]), out);
        }
    }
    build(&members, size, 0, 0, &mut combos);
    let combo_prob = prob / combos.len() as f64;
    let dest_requests = remaining[dest];
    for group in combos {
        let mut sink = |p: f64, accepted: u64, declined: u32, untouched: u32| {
            remaining[dest] -= accepted;
            dispatched[dest] += accepted;
            enumerate_stage_one(
                inputs,
                sizes,
                dest + 1,
                available & !group,
                p,
                remaining,
                dispatched,
                relocating | declined,
                pool | untouched,
                frames,
            );
            remaining[dest] += accepted;
            dispatched[dest] -= accepted;
        };
        enumerate_subroutine(&inputs.drivers, dest, group, dest_requests, combo_prob, 0, 0, &mut sink);
    }
}

fn enumerate_stage_two(
    inputs: &MatchInputs,
    dest: usize,
    frame: EnumFrame,
    table: &mut BTreeMap<(Vec<u64>, Vec<u64>), f64>,
) {
    let n_dest = inputs.requests.len();
    if dest == n_dest {
        let mut relocated = vec![0u64; n_dest];
        let members = frame.relocating | frame.pool;
        for i in 0..inputs.drivers.len() {
            if members & (1 << i) != 0 {
                relocated[inputs.drivers[i].relocation] += 1;
            }
        }
        *table.entry((frame.dispatched.clone(), relocated)).or_insert(0.0) += frame.prob;
        return;
    }
    if frame.remaining[dest] == 0 || frame.pool == 0 {
        enumerate_stage_two(inputs, dest + 1, frame, table);
        return;
    }
    let mut sink = |p: f64, accepted: u64, declined: u32, untouched: u32| {
        let mut next = EnumFrame {
            prob: p,
            remaining: frame.remaining.clone(),
            pool: untouched,
            dispatched: frame.dispatched.clone(),
            relocating: frame.relocating | declined,
        };
        next.remaining[dest] -= accepted;
        next.dispatched[dest] += accepted;
        enumerate_stage_two(inputs, dest + 1, next, table);
    };
    enumerate_subroutine(
        &inputs.drivers,
        dest,
        frame.pool,
        frame.remaining[dest],
        frame.prob,
        0,
        0,
        &mut sink,
    );
}

/// Exact distribution over `(dispatched counts, relocated counts)` produced
/// by `sample_match`, for rosters small enough to enumerate (M <= 5, total
/// requests <= 4).
pub fn enumerate_match_distribution(
    inputs: &MatchInputs,
) -> Result<BTreeMap<(Vec<u64>, Vec<u64>), f64>, MatchError> {
    inputs.validate()?;
    let m = inputs.drivers.len();
    let total_requests: u64 = inputs.requests.iter().sum();
    if m > ENUM_MAX_DRIVERS || total_requests > ENUM_MAX_REQUESTS {
        return Err(MatchError::SizeLimit(format!("{m} drivers, {total_requests} total requests")));
    }
    let n_dest = inputs.requests.len();
    let weights = inputs.plan.pool_weights()?;
    let total_weight: f64 = weights.iter().sum();
    let full_mask: u32 = if m == 0 { 0 } else { (1u32 << m) - 1 };

    let mut frames: Vec<EnumFrame> = Vec::new();
    if total_weight > 0.0 && m > 0 {
        let sizes = largest_remainder_partition(m as u64, &weights);
        let mut remaining = inputs.requests.clone();
        let mut dispatched = vec![0u64; n_dest];
        enumerate_stage_one(
            inputs,
            &sizes,
            0,
            full_mask,
            1.0,
            &mut remaining,
            &mut dispatched,
            0,
            0,
            &mut frames,
        );
    } else {
        frames.push(EnumFrame {
            prob: 1.0,
            remaining: inputs.requests.clone(),
            pool: full_mask,
            dispatched: vec![0u64; n_dest],
            relocating: 0,
        });
    }

    let mut table: BTreeMap<(Vec<u64>, Vec<u64>), f64> = BTreeMap::new();
    for frame in frames {
        enumerate_stage_two(inputs, 0, frame, &mut table);
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn uniform_inputs(m: usize, requests: Vec<u64>, p: f64) -> MatchInputs {
        let n_dest = requests.len();
        MatchInputs {
            drivers: (0..m)
                .map(|i| RosterDriver {
                    id: i as u64,
                    accept_prob: vec![p; n_dest],
                    relocation: 0,
                })
                .collect(),
            requests,
            plan: PoolPlan { dispatch: vec![0.0; n_dest], threshold: 0.0, pickup_bound: 1.0 },
        }
    }

    #[test]
    fn pool_size_formula() {
        assert_relative_eq!(dispatch_pool_size(1.0, 1.0, 1.0).unwrap(), 1.0);
        assert_relative_eq!(dispatch_pool_size(1.0, 1.0, 0.5).unwrap(), 2.0);
        assert_relative_eq!(dispatch_pool_size(1.0, 0.0, 0.0).unwrap(), 0.0);
        assert!(dispatch_pool_size(1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn fluid_single_destination_examples() {
        // Pool Z = 4 covers the demand; 6 drivers stay untouched.
        let (g, u) = fluid_single_destination(2.0, 10.0, 0.5, 1.0);
        assert_relative_eq!(g, 2.0);
        assert_relative_eq!(u, 6.0);
        // Drivers run out first.
        let (g, u) = fluid_single_destination(10.0, 4.0, 0.5, 1.0);
        assert_relative_eq!(g, 2.0);
        assert_relative_eq!(u, 0.0);
        let (g, u) = fluid_single_destination(3.0, 3.0, 1.0, 1.0);
        assert_relative_eq!(g, 3.0);
        assert_relative_eq!(u, 0.0);
    }

    #[test]
    fn sample_single_destination_bernoulli_case() {
        let inputs = uniform_inputs(1, vec![1], 0.5);
        let mut hits = 0;
        let trials = 20_000;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..trials {
            let (acc, _, _) = sample_single_destination(&mut rng, 1, &inputs.drivers, 0);
            hits += acc.len();
        }
        let freq = hits as f64 / trials as f64;
        assert!((freq - 0.5).abs() < 0.01, "frequency {freq}");
    }

    #[test]
    fn two_drivers_one_request_accept_probability() {
        // P(G = 1) = 1 - (1/2)^2 = 3/4.
        let inputs = uniform_inputs(2, vec![1], 0.5);
        let mut hits = 0;
        let trials = 40_000;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..trials {
            let (acc, _, _) = sample_single_destination(&mut rng, 1, &inputs.drivers, 0);
            hits += u64::from(acc.len() == 1);
        }
        let freq = hits as f64 / trials as f64;
        assert!((freq - 0.75).abs() < 0.01, "frequency {freq}");
    }

    #[test]
    fn empty_roster_accepts_nothing() {
        let inputs = uniform_inputs(0, vec![3], 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (acc, dec, rem) = sample_single_destination(&mut rng, 3, &inputs.drivers, 0);
        assert!(acc.is_empty() && dec.is_empty() && rem.is_empty());
        let outcome = sample_match(&mut rng, &inputs).unwrap();
        assert_eq!(outcome.total_dispatched(), 0);
    }

    #[test]
    fn conservation_holds_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let m = rng.gen_range(0..8);
            let n_dest = rng.gen_range(1..4);
            let inputs = MatchInputs {
                drivers: (0..m)
                    .map(|i| RosterDriver {
                        id: i as u64,
                        accept_prob: (0..n_dest).map(|_| rng.gen_range(0.0..=1.0)).collect(),
                        relocation: rng.gen_range(0..n_dest),
                    })
                    .collect(),
                requests: (0..n_dest).map(|_| rng.gen_range(0..5)).collect(),
                plan: PoolPlan {
                    dispatch: (0..n_dest).map(|_| rng.gen_range(0.0..2.0)).collect(),
                    threshold: 0.4,
                    pickup_bound: 1.0,
                },
            };
            let outcome = sample_match(&mut rng, &inputs).unwrap();
            let total = outcome.total_dispatched() + outcome.relocated.iter().sum::<u64>();
            assert_eq!(total, m as u64);
            for (d, &g) in outcome.dispatched.iter().enumerate() {
                assert!(g <= inputs.requests[d]);
            }
            assert_eq!(outcome.assignments.len(), m);
        }
    }

    #[test]
    fn all_reject_means_everyone_relocates() {
        let mut inputs = uniform_inputs(4, vec![2, 2], 0.0);
        for (i, d) in inputs.drivers.iter_mut().enumerate() {
            d.relocation = i % 2;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let outcome = sample_match(&mut rng, &inputs).unwrap();
        assert_eq!(outcome.total_dispatched(), 0);
        assert_eq!(outcome.relocated, vec![2, 2]);
    }

    #[test]
    fn all_accept_with_ample_requests_dispatches_everyone() {
        let inputs = uniform_inputs(4, vec![3, 3], 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let outcome = sample_match(&mut rng, &inputs).unwrap();
        assert_eq!(outcome.total_dispatched(), 4);
    }

    #[test]
    fn largest_remainder_partition_is_exact_and_tight() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let n = rng.gen_range(1..5);
            let total = rng.gen_range(0..40u64);
            let weights: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..3.0)).collect();
            let sizes = largest_remainder_partition(total, &weights);
            assert_eq!(sizes.iter().sum::<u64>(), total);
            let sum: f64 = weights.iter().sum();
            if sum > 0.0 {
                for (i, &s) in sizes.iter().enumerate() {
                    let exact = total as f64 * weights[i] / sum;
                    assert!((s as f64 - exact).abs() <= 1.0 + 1e-9, "size {s} vs exact {exact}");
                }
            }
        }
    }

    #[test]
    fn enumeration_trivial_cases() {
        let inputs = uniform_inputs(1, vec![1], 1.0);
        let table = enumerate_match_distribution(&inputs).unwrap();
        assert_eq!(table.len(), 1);
        let ((g, _h), p) = table.iter().next().unwrap();
        assert_eq!(g, &vec![1]);
        assert_relative_eq!(*p, 1.0);
    }

    #[test]
    fn enumeration_matches_hand_computation() {
        // Two drivers, one request, p = 1/2: P(G = 1) = 3/4.
        let inputs = uniform_inputs(2, vec![1], 0.5);
        let table = enumerate_match_distribution(&inputs).unwrap();
        let p_one: f64 = table.iter().filter(|((g, _), _)| g[0] == 1).map(|(_, &p)| p).sum();
        assert_relative_eq!(p_one, 0.75, epsilon = 1e-12);
    }

    #[test]
    fn enumeration_probabilities_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let m = rng.gen_range(0..=4);
            let n_dest = rng.gen_range(1..3);
            let inputs = MatchInputs {
                drivers: (0..m)
                    .map(|i| RosterDriver {
                        id: i as u64,
                        accept_prob: (0..n_dest).map(|_| rng.gen_range(0.0..=1.0)).collect(),
                        relocation: rng.gen_range(0..n_dest),
                    })
                    .collect(),
                requests: (0..n_dest).map(|_| rng.gen_range(0..3)).collect(),
                plan: PoolPlan {
                    dispatch: (0..n_dest).map(|_| rng.gen_range(0.0..1.5)).collect(),
                    threshold: 0.5,
                    pickup_bound: 1.0,
                },
            };
            let table = enumerate_match_distribution(&inputs).unwrap();
            let total: f64 = table.values().sum();
            assert_relative_eq!(total, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn enumeration_rejects_large_instances() {
        let inputs = uniform_inputs(6, vec![1], 0.5);
        assert!(matches!(enumerate_match_distribution(&inputs), Err(MatchError::SizeLimit(_))));
    }

    #[test]
    fn fluid_match_with_zero_thresholds_relocates_everyone() {
        let strategy =
            LocationStrategy { thresholds: vec![0.0, 0.0], relocation: vec![0.25, 0.75] };
        let plan = PoolPlan { dispatch: vec![1.0, 1.0], threshold: 0.5, pickup_bound: 1.0 };
        let outcome = fluid_match(4.0, &[2.0, 2.0], &strategy, &plan).unwrap();
        assert_relative_eq!(outcome.dispatched[0], 0.0);
        assert_relative_eq!(outcome.dispatched[1], 0.0);
        assert_relative_eq!(outcome.relocated[0], 1.0);
        assert_relative_eq!(outcome.relocated[1], 3.0);
    }

    #[test]
    fn exchangeability_of_identical_drivers() {
        // Relabeling drivers with identical (p, r) must not change the law of
        // the aggregate counts.
        let base = uniform_inputs(3, vec![1, 1], 0.5);
        let mut swapped = base.clone();
        swapped.drivers.swap(0, 2);
        for (i, d) in swapped.drivers.iter_mut().enumerate() {
            d.id = i as u64;
        }
        let trials = 30_000u64;
        let mut counts_a: BTreeMap<Vec<u64>, u64> = BTreeMap::new();
        let mut counts_b: BTreeMap<Vec<u64>, u64> = BTreeMap::new();
        for t in 0..trials {
            let mut rng_a = ChaCha8Rng::seed_from_u64(1000 + t);
            let mut rng_b = ChaCha8Rng::seed_from_u64(7000 + t);
            let a = sample_match(&mut rng_a, &base).unwrap();
            let b = sample_match(&mut rng_b, &swapped).unwrap();
            *counts_a.entry(a.dispatched).or_insert(0) += 1;
            *counts_b.entry(b.dispatched).or_insert(0) += 1;
        }
        for (key, &ca) in &counts_a {
            let cb = *counts_b.get(key).unwrap_or(&0);
            let fa = ca as f64 / trials as f64;
            let fb = cb as f64 / trials as f64;
            assert!(
                (fa - fb).abs() < 0.02,
                "distribution shifted under relabeling at {key:?}: {fa} vs {fb}"
            );
        }
    }
}
