//! Heavier solver checks: oracle comparisons, dual consistency, and the
//! structural properties of the welfare objective.

use approx::assert_relative_eq;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rideflow::market::{DemandSpec, MarketInstance, MarketState, Route, ScenarioTree, ValueDistribution};
use rideflow::presets::{self, RandomFamily};
use rideflow::solver::{
    extract_duals, kkt_residuals, linear_minimization_oracle, objective_and_gradient, reward_eval,
    solve_fluid, FlowPlan, SolveParams, SubtreeCtx,
};

fn single_location_instance(seed: u64) -> MarketInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tree = ScenarioTree::new(&[("n".to_string(), 1, None, 1.0)]).unwrap();
    let d_bar = rng.gen_range(0.5..5.0);
    let v_max = rng.gen_range(0.5..4.0);
    let supply = rng.gen_range(0.5..6.0);
    let c = if rng.gen_bool(0.5) { rng.gen_range(0.1..1.5) } else { 0.0 };
    MarketInstance::new(
        vec!["A".to_string()],
        tree,
        vec![Route { origin: 0, destination: 0, cost: 0.0 }],
        vec![(0, 0, DemandSpec { d_bar, values: ValueDistribution::uniform(v_max) })],
        vec![(0, 0, supply)],
        c,
    )
}

/// Brute-force 1-D oracle: supply is pinned on the self-loop, so welfare is a
/// function of the dispatch volume alone.
fn grid_search_value(instance: &MarketInstance, supply: f64) -> f64 {
    let spec = instance.demand_at(0, 0).unwrap();
    let c = instance.pickup_bound;
    let mut best = f64::NEG_INFINITY;
    let steps = 10_000;
    for i in 0..=steps {
        let g = supply * i as f64 / steps as f64;
        let (u, _, _) = reward_eval(&spec.values, spec.d_bar, g);
        let a = if supply > 0.0 { 0.5 * c * g * g / supply } else { 0.0 };
        best = best.max(u - a);
    }
    best
}

#[test]
fn single_location_solver_matches_grid_search() {
    for seed in 0..20 {
        let inst = single_location_instance(seed);
        let state = inst.initial_state();
        let report = solve_fluid(&inst, &state, &SolveParams::default()).unwrap();
        let oracle = grid_search_value(&inst, state.supply[0]);
        assert_relative_eq!(report.value, oracle, epsilon = 1e-3);
        assert!(report.value <= oracle + 1e-6, "seed {seed}: solver beat the oracle");
    }
}

fn random_feasible_plan(instance: &MarketInstance, state: &MarketState, seed: u64) -> FlowPlan {
    let ctx = SubtreeCtx::new(instance, state.node);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coef_f: Vec<f64> = (0..ctx.n_arcs()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let coef_g: Vec<f64> = (0..ctx.n_arcs()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let a = linear_minimization_oracle(instance, &ctx, state, &coef_f, &coef_g).unwrap();
    let coef_f2: Vec<f64> = (0..ctx.n_arcs()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let coef_g2: Vec<f64> = (0..ctx.n_arcs()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let b = linear_minimization_oracle(instance, &ctx, state, &coef_f2, &coef_g2).unwrap();
    let lambda: f64 = rng.gen_range(0.2..0.8);
    let mut plan = a;
    for i in 0..plan.f.len() {
        plan.f[i] = lambda * plan.f[i] + (1.0 - lambda) * b.f[i];
        plan.g[i] = lambda * plan.g[i] + (1.0 - lambda) * b.g[i];
    }
    plan
}

#[test]
fn objective_is_concave_along_feasible_segments() {
    let family = RandomFamily::default();
    for seed in 0..12 {
        let inst = presets::random_instance(seed, &family);
        let state = inst.initial_state();
        let p1 = random_feasible_plan(&inst, &state, seed * 31 + 1);
        let p2 = random_feasible_plan(&inst, &state, seed * 31 + 2);
        let (w1, _) = objective_and_gradient(&inst, &state, &p1).unwrap();
        let (w2, _) = objective_and_gradient(&inst, &state, &p2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..4 {
            let lambda: f64 = rng.gen_range(0.05..0.95);
            let mut mid = p1.clone();
            for i in 0..mid.f.len() {
                mid.f[i] = lambda * p1.f[i] + (1.0 - lambda) * p2.f[i];
                mid.g[i] = lambda * p1.g[i] + (1.0 - lambda) * p2.g[i];
            }
            let (wm, _) = objective_and_gradient(&inst, &state, &mid).unwrap();
            assert!(
                wm >= lambda * w1 + (1.0 - lambda) * w2 - 1e-9,
                "seed {seed}: concavity violated"
            );
        }
    }
}

#[test]
fn analytic_gradient_matches_central_differences() {
    let family = RandomFamily::default();
    for seed in 0..8 {
        let inst = presets::random_instance(seed, &family);
        let state = inst.initial_state();
        // Blend toward the uniform interior so box constraints stay slack.
        let vertex = random_feasible_plan(&inst, &state, seed + 100);
        let report = solve_fluid(&inst, &state, &SolveParams { max_iters: 5, ..Default::default() }).unwrap();
        let mut plan = report.plan;
        for i in 0..plan.f.len() {
            plan.f[i] = 0.5 * plan.f[i] + 0.5 * vertex.f[i];
            plan.g[i] = 0.25 * plan.f[i] + 0.5 * plan.g[i].min(plan.f[i]);
        }
        let ctx = SubtreeCtx::new(&inst, state.node);
        let h = 1e-6;
        let (_, grad) = objective_and_gradient(&inst, &state, &plan).unwrap();
        let mut checked = 0;
        for arc in 0..ctx.n_arcs() {
            if plan.f[arc] > 1e-3 && plan.g[arc] > 1e-3 && plan.g[arc] < plan.f[arc] - 1e-3 {
                let saved_f = plan.f[arc];
                plan.f[arc] = saved_f + h;
                let up = raw_value(&inst, &state, &ctx, &plan);
                plan.f[arc] = saved_f - h;
                let down = raw_value(&inst, &state, &ctx, &plan);
                plan.f[arc] = saved_f;
                let fd = (up - down) / (2.0 * h);
                let denom = grad.f[arc].abs().max(1e-4);
                assert!(
                    (fd - grad.f[arc]).abs() / denom < 1e-4,
                    "seed {seed} arc {arc}: f-gradient {} vs fd {}",
                    grad.f[arc],
                    fd
                );

                let saved_g = plan.g[arc];
                plan.g[arc] = saved_g + h;
                let up = raw_value(&inst, &state, &ctx, &plan);
                plan.g[arc] = saved_g - h;
                let down = raw_value(&inst, &state, &ctx, &plan);
                plan.g[arc] = saved_g;
                let fd = (up - down) / (2.0 * h);
                let denom = grad.g[arc].abs().max(1e-4);
                assert!(
                    (fd - grad.g[arc]).abs() / denom < 1e-4,
                    "seed {seed} arc {arc}: g-gradient {} vs fd {}",
                    grad.g[arc],
                    fd
                );
                checked += 1;
            }
        }
        assert!(checked > 0, "seed {seed}: no interior arcs to check");
    }
}

/// Objective without the feasibility gate; finite-difference probes leave the
/// conservation manifold by design.
fn raw_value(
    instance: &MarketInstance,
    _state: &MarketState,
    ctx: &SubtreeCtx,
    plan: &FlowPlan,
) -> f64 {
    let mut value = 0.0;
    for (pos, &node) in ctx.nodes.iter().enumerate() {
        let base = pos * ctx.n_routes;
        let mut node_value = 0.0;
        for loc in 0..ctx.n_locs {
            let routes = instance.routes_from(loc);
            let mut f_sum = 0.0;
            let mut g_sum = 0.0;
            for &r in routes {
                f_sum += plan.f[base + r];
                g_sum += plan.g[base + r];
            }
            if instance.pickup_bound > 0.0 && f_sum > 0.0 {
                node_value -= 0.5 * instance.pickup_bound * g_sum * g_sum / f_sum;
            }
            for &r in routes {
                node_value -= instance.routes[r].cost * plan.f[base + r];
                if let Some(spec) = instance.demand_at(node, r) {
                    node_value += reward_eval(&spec.values, spec.d_bar, plan.g[base + r]).0;
                }
            }
        }
        value += ctx.abs_prob[pos] * node_value;
    }
    value
}

#[test]
fn duals_match_two_solve_finite_differences() {
    let family = RandomFamily::default();
    let seeds: Vec<u64> = (0..10).collect();
    let failures: Vec<String> = seeds
        .par_iter()
        .filter_map(|&seed| {
            let inst = presets::random_instance(seed, &family);
            let state = inst.initial_state();
            let params = SolveParams::oracle();
            let report = solve_fluid(&inst, &state, &params).ok()?;
            if !report.converged {
                return Some(format!("seed {seed}: solver did not converge, gap {}", report.gap));
            }
            let duals = match extract_duals(&inst, &state, &report.plan, &params) {
                Ok(d) => d,
                Err(e) => return Some(format!("seed {seed}: {e}")),
            };
            let h = 1e-4;
            for loc in 0..inst.n_locations() {
                if state.supply[loc] <= 0.1 {
                    continue;
                }
                let mut bumped = state.clone();
                bumped.supply[loc] += h;
                let up = solve_fluid(&inst, &bumped, &params).ok()?;
                let fd = (up.value - report.value) / h;
                let eta = duals.root_eta()[loc];
                let denom = eta.abs().max(1e-6);
                if (fd - eta).abs() / denom > 1e-2 {
                    return Some(format!(
                        "seed {seed} loc {loc}: eta {eta} vs finite difference {fd}"
                    ));
                }
            }
            None
        })
        .collect();
    assert!(failures.is_empty(), "{failures:?}");
}

#[test]
fn solver_never_beats_small_instance_grid_oracle() {
    // |L| <= 2, T <= 2: enumerate stay/exit splits on a coarse grid and keep
    // the best; the solver value must not exceed it beyond tolerance.
    let inst = presets::rain_shine();
    let state = inst.initial_state();
    let report = solve_fluid(&inst, &state, &SolveParams::default()).unwrap();
    let mut best = f64::NEG_INFINITY;
    let steps = 10_000;
    for i in 0..=steps {
        let f = 10.0 * i as f64 / steps as f64;
        let u_r = reward_eval(&ValueDistribution::uniform(4.0), 6.0, f.min(6.0)).0;
        let u_s = reward_eval(&ValueDistribution::uniform(4.0), 2.0, f.min(2.0)).0;
        best = best.max((10.0 - f) + 0.5 * (u_r + u_s));
    }
    assert!(report.value <= best + 1e-6);
    assert_relative_eq!(report.value, best, epsilon = 1e-3);
}

#[test]
fn marginal_welfare_is_nonnegative_for_nonnegative_cost_family() {
    // Every route cost is nonnegative except sink rewards; with a free
    // self-loop default action, adding drivers can never hurt.
    let family = RandomFamily::default();
    for seed in 0..8 {
        let inst = presets::random_instance(seed, &family);
        let state = inst.initial_state();
        let params = SolveParams::default();
        let base = solve_fluid(&inst, &state, &params).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let loc = rng.gen_range(0..inst.n_locations());
        let mut bumped = state.clone();
        bumped.supply[loc] += 0.25;
        let up = solve_fluid(&inst, &bumped, &params).unwrap();
        assert!(
            up.value >= base.value - 1e-6,
            "seed {seed}: welfare decreased when supply increased"
        );
    }
}

#[test]
fn lmo_matches_exhaustive_vertex_enumeration() {
    // Two locations, two periods, deterministic tree: enumerate every
    // assignment of (destination, dispatch flag) per (node, location) and
    // compare objective values against the DP's choice.
    let tree = ScenarioTree::new(&[
        ("a".to_string(), 1, None, 1.0),
        ("b".to_string(), 2, Some("a".to_string()), 1.0),
    ])
    .unwrap();
    let inst = MarketInstance::new(
        vec!["P".to_string(), "Q".to_string()],
        tree,
        vec![
            Route { origin: 0, destination: 0, cost: 0.05 },
            Route { origin: 0, destination: 1, cost: 0.2 },
            Route { origin: 1, destination: 0, cost: 0.15 },
            Route { origin: 1, destination: 1, cost: 0.0 },
        ],
        vec![],
        vec![(0, 0, 1.5), (1, 0, 0.5)],
        0.0,
    );
    let state = inst.initial_state();
    let ctx = SubtreeCtx::new(&inst, state.node);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..40 {
        let coef_f: Vec<f64> = (0..ctx.n_arcs()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let coef_g: Vec<f64> = (0..ctx.n_arcs()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let plan = linear_minimization_oracle(&inst, &ctx, &state, &coef_f, &coef_g).unwrap();
        let dp_value: f64 = (0..ctx.n_arcs())
            .map(|i| coef_f[i] * plan.f[i] + coef_g[i] * plan.g[i])
            .sum();

        // Exhaustive: choices per (pos, loc) are (route, dispatch?) pairs.
        let mut best = f64::NEG_INFINITY;
        let n_choices = 4usize; // 2 routes x dispatch flag
        for c00 in 0..n_choices {
            for c01 in 0..n_choices {
                for c10 in 0..n_choices {
                    for c11 in 0..n_choices {
                        let choices = [[c00, c01], [c10, c11]];
                        let mut value = 0.0;
                        let mut supplies = vec![vec![0.0; 2]; 2];
                        supplies[0] = state.supply.clone();
                        for pos in 0..2 {
                            if pos == 1 {
                                for l in 0..2 {
                                    supplies[1][l] += inst.entry_vector(ctx.nodes[1])[l];
                                }
                            }
                            for loc in 0..2 {
                                let s = supplies[pos][loc];
                                if s <= 0.0 {
                                    continue;
                                }
                                let choice = choices[pos][loc];
                                let route = inst.routes_from(loc)[choice / 2];
                                let dispatch = choice % 2 == 1;
                                let arc = ctx.arc(pos, route);
                                value += coef_f[arc] * s;
                                if dispatch {
                                    value += coef_g[arc] * s;
                                }
                                if pos == 0 {
                                    supplies[1][inst.routes[route].destination] += s;
                                }
                            }
                        }
                        best = best.max(value);
                    }
                }
            }
        }
        assert!(
            dp_value >= best - 1e-9,
            "dp value {dp_value} below exhaustive optimum {best}"
        );
    }
}

#[test]
fn kkt_residuals_small_after_solve_on_random_family() {
    let family = RandomFamily::default();
    let seeds: Vec<u64> = (0..10).collect();
    let failures: Vec<String> = seeds
        .par_iter()
        .filter_map(|&seed| {
            let inst = presets::random_instance(seed, &family);
            let state = inst.initial_state();
            let params = SolveParams::oracle();
            let report = solve_fluid(&inst, &state, &params).ok()?;
            let duals = match extract_duals(&inst, &state, &report.plan, &params) {
                Ok(d) => d,
                Err(e) => return Some(format!("seed {seed}: {e}")),
            };
            let kkt = kkt_residuals(&inst, &state, &report.plan, &duals).ok()?;
            if kkt.max_residual() > 1e-3 {
                return Some(format!("seed {seed}: max residual {}", kkt.max_residual()));
            }
            None
        })
        .collect();
    assert!(failures.is_empty(), "{failures:?}");
}
