//! Bundled market instances and a seeded random-instance family.

use crate::market::{
    DemandSpec, MarketInstance, Route, ScenarioTree, ValueDistribution,
};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Two-period rain/shine network.
///
/// Ten drivers enter at the market location `A`. At `t = 1` a driver either
/// stays (`A -> A`, cost 0) or heads off-market (`A -> X`, cost 0). At `t = 2`
/// the weather is rain or shine with equal probability: six potential riders
/// under rain, two under shine, all with Uniform(0, 4) values on the `A -> A`
/// route. Off-market drivers collect a reward of 1 through the `X -> X`
/// self-loop at the final period, so exiting is worth exactly 1 regardless of
/// weather. Drivers never incur pickup disutility (`C = 0`).
pub fn rain_shine() -> MarketInstance {
    let tree = ScenarioTree::new(&[
        ("start".to_string(), 1, None, 1.0),
        ("rain".to_string(), 2, Some("start".to_string()), 0.5),
        ("shine".to_string(), 2, Some("start".to_string()), 0.5),
    ])
    .expect("static tree");
    let locations = vec!["A".to_string(), "X".to_string()];
    let routes = vec![
        Route { origin: 0, destination: 0, cost: 0.0 },
        Route { origin: 0, destination: 1, cost: 0.0 },
        Route { origin: 1, destination: 1, cost: -1.0 },
    ];
    let rain = 1;
    let shine = 2;
    let demand = vec![
        (0, rain, DemandSpec { d_bar: 6.0, values: ValueDistribution::uniform(4.0) }),
        (0, shine, DemandSpec { d_bar: 2.0, values: ValueDistribution::uniform(4.0) }),
    ];
    let entries = vec![(0, 0, 10.0)];
    MarketInstance::new(locations, tree, routes, demand, entries, 0.0)
}

/// Two-period, one-location, one-scenario re-solving demonstration.
///
/// A unit mass of drivers enters at `A`. Exiting pays `exit_reward` (via the
/// `X -> X` self-loop); staying offers a chance to serve one of the
/// Uniform(0, 1)-valued riders that arrive at `t = 2` with mean volume 1/2.
/// With `exit_reward = 1/2` the welfare optimum keeps a quarter of the
/// drivers and prices the trip at 1/2.
pub fn resolve_demo(exit_reward: f64) -> MarketInstance {
    let tree = ScenarioTree::new(&[
        ("open".to_string(), 1, None, 1.0),
        ("close".to_string(), 2, Some("open".to_string()), 1.0),
    ])
    .expect("static tree");
    let locations = vec!["A".to_string(), "X".to_string()];
    let routes = vec![
        Route { origin: 0, destination: 0, cost: 0.0 },
        Route { origin: 0, destination: 1, cost: 0.0 },
        Route { origin: 1, destination: 1, cost: -exit_reward },
    ];
    let close = 1;
    let demand =
        vec![(0, close, DemandSpec { d_bar: 0.5, values: ValueDistribution::uniform(1.0) })];
    let entries = vec![(0, 0, 1.0)];
    MarketInstance::new(locations, tree, routes, demand, entries, 0.0)
}

/// Single-period instance with an interior acceptance threshold.
///
/// Two drivers at `A` must all drive to `B`; demand 2 with Uniform(0, 4)
/// values and pickup bound `C = 1`. The optimum dispatches 1.6 trips at
/// price 0.8 with threshold x* = 0.8, leaving 0.4 drivers relocating.
pub fn interior_threshold() -> MarketInstance {
    let tree = ScenarioTree::new(&[("only".to_string(), 1, None, 1.0)]).expect("static tree");
    let locations = vec!["A".to_string(), "B".to_string()];
    let routes = vec![
        Route { origin: 0, destination: 1, cost: 0.0 },
        Route { origin: 1, destination: 1, cost: 0.0 },
    ];
    let demand = vec![(0, 0, DemandSpec { d_bar: 2.0, values: ValueDistribution::uniform(4.0) })];
    let entries = vec![(0, 0, 2.0)];
    MarketInstance::new(locations, tree, routes, demand, entries, 1.0)
}

/// Parameters for [`random_instance`].
#[derive(Debug, Clone)]
pub struct RandomFamily {
    pub max_locations: usize,
    pub max_horizon: u32,
    pub max_nodes: usize,
    pub allow_pickup_cost: bool,
}

impl Default for RandomFamily {
    fn default() -> Self {
        RandomFamily { max_locations: 4, max_horizon: 3, max_nodes: 6, allow_pickup_cost: true }
    }
}

/// Seeded random instance: complete route graph (with self-loops), a random
/// scenario tree, and Uniform-valued demand on a random subset of
/// (route, node) pairs.
pub fn random_instance(seed: u64, family: &RandomFamily) -> MarketInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_locs = rng.gen_range(2..=family.max_locations);
    let horizon = rng.gen_range(1..=family.max_horizon);

    let mut rows = vec![("n0".to_string(), 1, None, 1.0)];
    let mut frontier = vec![("n0".to_string(), 1u32)];
    let mut count = 1usize;
    while let Some((parent, t)) = frontier.pop() {
        if t >= horizon || count >= family.max_nodes {
            continue;
        }
        let budget = family.max_nodes - count;
        let n_children = rng.gen_range(1..=2.min(budget));
        let mut probs: Vec<f64> = (0..n_children).map(|_| rng.gen_range(0.2..1.0)).collect();
        let total: f64 = probs.iter().sum();
        for p in &mut probs {
            *p /= total;
        }
        // Exact renormalization keeps the sum at 1 within PROB_TOL.
        let correction: f64 = 1.0 - probs.iter().sum::<f64>();
        probs[0] += correction;
        for (i, p) in probs.into_iter().enumerate() {
            let name = format!("n{}", count + i);
            rows.push((name.clone(), t + 1, Some(parent.clone()), p));
            frontier.push((name, t + 1));
        }
        count += n_children;
    }
    let tree = ScenarioTree::new(&rows).expect("generated tree is well-formed");

    let mut routes = Vec::new();
    for o in 0..n_locs {
        for d in 0..n_locs {
            let cost = if o == d { 0.0 } else { rng.gen_range(0.02..0.5) };
            routes.push(Route { origin: o, destination: d, cost });
        }
    }

    let n_nodes = tree.nodes.len();
    let mut demand = Vec::new();
    for node in 0..n_nodes {
        for (rid, _route) in routes.iter().enumerate() {
            if rng.gen_bool(0.55) {
                let d_bar = rng.gen_range(0.5..6.0);
                let v_max = rng.gen_range(1.0..4.0);
                demand.push((rid, node, DemandSpec { d_bar, values: ValueDistribution::uniform(v_max) }));
            }
        }
    }

    let mut entries = Vec::new();
    for loc in 0..n_locs {
        entries.push((loc, 0, rng.gen_range(0.5..5.0)));
    }
    for node in 1..n_nodes {
        for loc in 0..n_locs {
            if rng.gen_bool(0.4) {
                entries.push((loc, node, rng.gen_range(0.0..2.0)));
            }
        }
    }

    let pickup_bound = if family.allow_pickup_cost && rng.gen_bool(0.7) {
        rng.gen_range(0.1..2.0)
    } else {
        0.0
    };

    MarketInstance::new(
        (0..n_locs).map(|i| format!("L{i}")).collect(),
        tree,
        routes,
        demand,
        entries,
        pickup_bound,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::validate_instance;

    #[test]
    fn bundled_instances_validate() {
        for inst in [rain_shine(), resolve_demo(0.5), interior_threshold()] {
            let report = validate_instance(&inst);
            assert!(report.is_clean(), "{:?}", report.violations);
        }
    }

    #[test]
    fn random_instances_validate() {
        let family = RandomFamily::default();
        for seed in 0..40 {
            let inst = random_instance(seed, &family);
            let report = validate_instance(&inst);
            assert!(report.is_clean(), "seed {seed}: {:?}", report.violations);
            assert!(inst.tree.nodes.len() <= family.max_nodes);
        }
    }
}
