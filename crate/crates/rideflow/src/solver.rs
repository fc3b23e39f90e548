//! Concave welfare optimization over the scenario subtree.
//!
//! The program maximizes expected welfare over total-trip volumes `f` and
//! dispatch volumes `g`, indexed by (scenario node, route), subject to
//! per-node flow conservation: outgoing volume at a location equals entering
//! drivers plus inflow from the parent period. The solver is Frank-Wolfe with
//! a tree-DP linear oracle and pairwise (away) steps so the active vertex set
//! stays explicit; step sizes come from golden-section line search.

use crate::market::{LocId, MarketInstance, MarketState, NodeId, RouteId, ValueDistribution};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("dispatch volume {g} exceeds total volume {f}")]
    Domain { g: f64, f: f64 },
    #[error("plan is infeasible: {0}")]
    InfeasiblePlan(String),
    #[error("location `{0}` holds drivers but has no outgoing route")]
    StrandedLocation(String),
    #[error("plan does not certify as optimal: stationarity residual {residual} exceeds {limit}")]
    NotOptimal { residual: f64, limit: f64 },
}

/// Solver configuration; `tol` is the relative Frank-Wolfe gap target.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SolveParams {
    pub tol: f64,
    pub max_iters: usize,
    pub line_search_iters: usize,
    /// Supply bump used for right-derivative duals at empty locations.
    pub perturbation: f64,
}

impl Default for SolveParams {
    fn default() -> Self {
        SolveParams { tol: 1e-6, max_iters: 50_000, line_search_iters: 64, perturbation: 1e-6 }
    }
}

impl SolveParams {
    /// Tight tolerance for oracle-grade solves (finite differences, audits).
    pub fn oracle() -> Self {
        SolveParams { tol: 1e-10, max_iters: 200_000, ..Default::default() }
    }
}

/// Rider reward on one route: total utility `U(g)`, its derivative, and the
/// welfare-optimal price at dispatch volume `g`.
pub fn reward_eval(dist: &ValueDistribution, d_bar: f64, g: f64) -> (f64, f64, f64) {
    let v_max = dist.v_max();
    if d_bar <= 0.0 {
        return (0.0, 0.0, v_max);
    }
    if g < 0.0 {
        return (v_max * g, v_max, v_max);
    }
    if g >= d_bar {
        return (d_bar * dist.mean_above(0.0), 0.0, 0.0);
    }
    let price = dist.quantile(1.0 - g / d_bar);
    (g * dist.mean_above(price), price, price)
}

/// Aggregate pickup-disutility cost at one location:
/// `A = C g² / 2f` with value and partials 0 when `f = 0`.
pub fn pickup_cost_eval(
    pickup_bound: f64,
    g_sum: f64,
    f_sum: f64,
) -> Result<(f64, f64, f64), SolverError> {
    if g_sum > f_sum + 1e-12 {
        return Err(SolverError::Domain { g: g_sum, f: f_sum });
    }
    if f_sum <= 0.0 || pickup_bound == 0.0 {
        return Ok((0.0, 0.0, 0.0));
    }
    let ratio = (g_sum / f_sum).clamp(0.0, 1.0);
    let value = 0.5 * pickup_bound * g_sum * ratio;
    let d_g = pickup_bound * ratio;
    let d_f = -0.5 * pickup_bound * ratio * ratio;
    Ok((value, d_g, d_f))
}

/// Precomputed view of the subtree rooted at a state's node.
#[derive(Debug, Clone)]
pub struct SubtreeCtx {
    pub nodes: Vec<NodeId>,
    pub children: Vec<Vec<usize>>,
    /// Transition probability from the parent within the subtree.
    pub cond_prob: Vec<f64>,
    /// Absolute probability relative to the subtree root.
    pub abs_prob: Vec<f64>,
    pub n_routes: usize,
    pub n_locs: usize,
}

impl SubtreeCtx {
    pub fn new(instance: &MarketInstance, root: NodeId) -> Self {
        let nodes = instance.tree.subtree(root);
        let pos_of: HashMap<NodeId, usize> =
            nodes.iter().enumerate().map(|(i, &n)| (n, i)).collect();
        let mut children = vec![Vec::new(); nodes.len()];
        let mut cond_prob = vec![1.0; nodes.len()];
        let mut abs_prob = vec![1.0; nodes.len()];
        for (pos, &node) in nodes.iter().enumerate().skip(1) {
            let parent = instance.tree.nodes[node].parent.expect("non-root subtree node");
            let parent_pos = pos_of[&parent];
            children[parent_pos].push(pos);
            cond_prob[pos] = instance.tree.nodes[node].prob;
            abs_prob[pos] = abs_prob[parent_pos] * cond_prob[pos];
        }
        SubtreeCtx {
            nodes,
            children,
            cond_prob,
            abs_prob,
            n_routes: instance.n_routes(),
            n_locs: instance.n_locations(),
        }
    }

    pub fn n_arcs(&self) -> usize {
        self.nodes.len() * self.n_routes
    }

    pub fn arc(&self, pos: usize, route: RouteId) -> usize {
        pos * self.n_routes + route
    }
}

/// Total-trip and dispatch volumes over every arc of a scenario subtree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowPlan {
    pub root: NodeId,
    pub nodes: Vec<NodeId>,
    pub n_routes: usize,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
}

impl FlowPlan {
    pub fn zeros(ctx: &SubtreeCtx, root: NodeId) -> Self {
        FlowPlan {
            root,
            nodes: ctx.nodes.clone(),
            n_routes: ctx.n_routes,
            f: vec![0.0; ctx.n_arcs()],
            g: vec![0.0; ctx.n_arcs()],
        }
    }

    pub fn f_at(&self, pos: usize, route: RouteId) -> f64 {
        self.f[pos * self.n_routes + route]
    }

    pub fn g_at(&self, pos: usize, route: RouteId) -> f64 {
        self.g[pos * self.n_routes + route]
    }

    /// Total-trip volumes at the subtree root, indexed by route.
    pub fn root_flows(&self) -> &[f64] {
        &self.f[..self.n_routes]
    }

    pub fn root_dispatch(&self) -> &[f64] {
        &self.g[..self.n_routes]
    }
}

/// Objective gradient with the same arc layout as a plan.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanGradient {
    pub f: Vec<f64>,
    pub g: Vec<f64>,
}

/// Per-(node, location) supply implied by entries plus parent-period inflow.
pub fn implied_supplies(
    instance: &MarketInstance,
    ctx: &SubtreeCtx,
    state: &MarketState,
    plan: &FlowPlan,
) -> Vec<Vec<f64>> {
    let mut supplies = vec![vec![0.0; ctx.n_locs]; ctx.nodes.len()];
    supplies[0] = state.supply.clone();
    for pos in 0..ctx.nodes.len() {
        for &child in &ctx.children[pos] {
            let node = ctx.nodes[child];
            let mut s = instance.entry_vector(node).to_vec();
            for (rid, route) in instance.routes.iter().enumerate() {
                s[route.destination] += plan.f[ctx.arc(pos, rid)];
            }
            supplies[child] = s;
        }
    }
    supplies
}

fn feasibility_error(
    instance: &MarketInstance,
    ctx: &SubtreeCtx,
    state: &MarketState,
    plan: &FlowPlan,
) -> f64 {
    let supplies = implied_supplies(instance, ctx, state, plan);
    let mut worst: f64 = 0.0;
    for pos in 0..ctx.nodes.len() {
        for loc in 0..ctx.n_locs {
            let outgoing: f64 =
                instance.routes_from(loc).iter().map(|&r| plan.f[ctx.arc(pos, r)]).sum();
            worst = worst.max((outgoing - supplies[pos][loc]).abs());
        }
        for r in 0..ctx.n_routes {
            let arc = ctx.arc(pos, r);
            worst = worst.max(-plan.f[arc]).max(-plan.g[arc]).max(plan.g[arc] - plan.f[arc]);
        }
    }
    worst
}

fn eval_objective(
    instance: &MarketInstance,
    ctx: &SubtreeCtx,
    f: &[f64],
    g: &[f64],
    mut grad: Option<&mut PlanGradient>,
) -> f64 {
    let c_bound = instance.pickup_bound;
    let mut value = 0.0;
    for (pos, &node) in ctx.nodes.iter().enumerate() {
        let prob = ctx.abs_prob[pos];
        let base = pos * ctx.n_routes;
        let mut node_value = 0.0;
        for loc in 0..ctx.n_locs {
            let routes = instance.routes_from(loc);
            if routes.is_empty() {
                continue;
            }
            let mut f_sum = 0.0;
            let mut g_sum = 0.0;
            for &r in routes {
                f_sum += f[base + r];
                g_sum += g[base + r];
            }
            let ratio = if f_sum > 0.0 { (g_sum / f_sum).clamp(0.0, 1.0) } else { 0.0 };
            if c_bound > 0.0 && f_sum > 0.0 {
                node_value -= 0.5 * c_bound * g_sum * ratio;
            }
            for &r in routes {
                let route = &instance.routes[r];
                let fv = f[base + r];
                let gv = g[base + r];
                node_value -= route.cost * fv;
                let mut du = 0.0;
                if let Some(spec) = instance.demand_at(node, r) {
                    let (u, d, _) = reward_eval(&spec.values, spec.d_bar, gv);
                    node_value += u;
                    du = d;
                }
                if let Some(gr) = grad.as_deref_mut() {
                    gr.f[base + r] = prob * (-route.cost + 0.5 * c_bound * ratio * ratio);
                    gr.g[base + r] = prob * (du - c_bound * ratio);
                }
            }
        }
        value += prob * node_value;
    }
    value
}

/// Expected welfare of a plan plus its gradient over all (f, g) coordinates.
pub fn objective_and_gradient(
    instance: &MarketInstance,
    state: &MarketState,
    plan: &FlowPlan,
) -> Result<(f64, PlanGradient), SolverError> {
    let ctx = SubtreeCtx::new(instance, state.node);
    let scale = state.supply.iter().fold(1.0_f64, |a, &s| a.max(s.abs()));
    let err = feasibility_error(instance, &ctx, state, plan);
    if err > 1e-7 * scale {
        return Err(SolverError::InfeasiblePlan(format!("constraint violation {err:.3e}")));
    }
    let mut grad =
        PlanGradient { f: vec![0.0; ctx.n_arcs()], g: vec![0.0; ctx.n_arcs()] };
    let value = eval_objective(instance, &ctx, &plan.f, &plan.g, Some(&mut grad));
    Ok((value, grad))
}

/// Maximizes a linear objective over the subtree flow polytope by backwards
/// dynamic programming: each (node, location) routes all of its supply along
/// the best continuation arc; `g` rides along when the dispatch coefficient
/// is nonnegative. Destination ties break toward the lower index.
pub fn linear_minimization_oracle(
    instance: &MarketInstance,
    ctx: &SubtreeCtx,
    state: &MarketState,
    coef_f: &[f64],
    coef_g: &[f64],
) -> Result<FlowPlan, SolverError> {
    let n_pos = ctx.nodes.len();
    let mut value = vec![vec![0.0_f64; ctx.n_locs]; n_pos];
    let mut choice = vec![vec![usize::MAX; ctx.n_locs]; n_pos];
    for pos in (0..n_pos).rev() {
        for loc in 0..ctx.n_locs {
            let mut best = f64::NEG_INFINITY;
            let mut best_route = usize::MAX;
            for &r in instance.routes_from(loc) {
                let arc = ctx.arc(pos, r);
                let dest = instance.routes[r].destination;
                let mut v = coef_f[arc] + coef_g[arc].max(0.0);
                for &child in &ctx.children[pos] {
                    v += value[child][dest];
                }
                if v > best {
                    best = v;
                    best_route = r;
                }
            }
            value[pos][loc] = if best_route == usize::MAX { 0.0 } else { best };
            choice[pos][loc] = best_route;
        }
    }

    let mut plan = FlowPlan::zeros(ctx, state.node);
    let mut supplies = vec![vec![0.0; ctx.n_locs]; n_pos];
    supplies[0] = state.supply.clone();
    for pos in 0..n_pos {
        for &child in &ctx.children[pos] {
            supplies[child] = instance.entry_vector(ctx.nodes[child]).to_vec();
        }
        for loc in 0..ctx.n_locs {
            let s = supplies[pos][loc];
            if s <= 0.0 {
                continue;
            }
            let r = choice[pos][loc];
            if r == usize::MAX {
                return Err(SolverError::StrandedLocation(instance.locations[loc].clone()));
            }
            let arc = ctx.arc(pos, r);
            plan.f[arc] += s;
            if coef_g[arc] >= 0.0 {
                plan.g[arc] += s;
            }
            let dest = instance.routes[r].destination;
            for &child in &ctx.children[pos] {
                supplies[child][dest] += s;
            }
        }
    }
    Ok(plan)
}

/// Feasible starting plan: supply splits uniformly over outgoing routes and
/// half of each flow carries a dispatch.
fn uniform_split(
    instance: &MarketInstance,
    ctx: &SubtreeCtx,
    state: &MarketState,
) -> Result<FlowPlan, SolverError> {
    let n_pos = ctx.nodes.len();
    let mut plan = FlowPlan::zeros(ctx, state.node);
    let mut supplies = vec![vec![0.0; ctx.n_locs]; n_pos];
    supplies[0] = state.supply.clone();
    for pos in 0..n_pos {
        for &child in &ctx.children[pos] {
            supplies[child] = instance.entry_vector(ctx.nodes[child]).to_vec();
        }
        for loc in 0..ctx.n_locs {
            let s = supplies[pos][loc];
            if s <= 0.0 {
                continue;
            }
            let routes = instance.routes_from(loc);
            if routes.is_empty() {
                return Err(SolverError::StrandedLocation(instance.locations[loc].clone()));
            }
            let share = s / routes.len() as f64;
            for &r in routes {
                let arc = ctx.arc(pos, r);
                plan.f[arc] += share;
                plan.g[arc] += 0.5 * share;
                let dest = instance.routes[r].destination;
                for &child in &ctx.children[pos] {
                    supplies[child][dest] += share;
                }
            }
        }
    }
    Ok(plan)
}

/// Optimal dispatch volumes given total-trip volumes, solved in closed form
/// per (node, location). With the totals fixed the welfare terms separate:
/// maximize `sum_r U_r(g_r) - (C/2) G^2 / F` over `0 <= g_r <= f_r`. The KKT
/// point equalizes marginal rider value with the marginal pickup cost
/// `m = C G / F`, so `m` is found by bisection and each `g_r` follows from
/// the inverse demand curve clamped to its box.
pub fn polish_dispatch(instance: &MarketInstance, ctx: &SubtreeCtx, f: &[f64], g: &mut [f64]) {
    let c = instance.pickup_bound;
    for (pos, &node) in ctx.nodes.iter().enumerate() {
        let base = pos * ctx.n_routes;
        for loc in 0..ctx.n_locs {
            let routes = instance.routes_from(loc);
            let mut f_sum = 0.0;
            let mut specs: Vec<(usize, f64, f64)> = Vec::new();
            for &r in routes {
                f_sum += f[base + r];
                match instance.demand_at(node, r) {
                    Some(spec) if spec.d_bar > 0.0 => {
                        specs.push((r, spec.d_bar, spec.values.v_max()))
                    }
                    _ => g[base + r] = 0.0,
                }
            }
            if specs.is_empty() {
                continue;
            }
            if c == 0.0 || f_sum <= 0.0 {
                for &(r, d_bar, _) in &specs {
                    g[base + r] = f[base + r].min(d_bar);
                }
                continue;
            }
            // G(m) = sum_r min(f_r, d_r (1 - m/v_r)_+) is piecewise linear and
            // decreasing, so m F = C G(m) is solved exactly by scanning the
            // clamp breakpoints.
            let mut breaks: Vec<f64> = vec![0.0];
            let mut v_hi = 0.0_f64;
            for &(r, d_bar, v_max) in &specs {
                v_hi = v_hi.max(v_max);
                let m_lo = v_max * (1.0 - f[base + r] / d_bar);
                if m_lo > 0.0 {
                    breaks.push(m_lo);
                }
                breaks.push(v_max);
            }
            breaks.push(v_hi);
            breaks.sort_by(|a, b| a.partial_cmp(b).unwrap());
            breaks.dedup();
            let segment_coeffs = |a: f64, b: f64| -> (f64, f64) {
                // G(m) = intercept - slope * m on the open segment (a, b).
                let mid = 0.5 * (a + b);
                let mut intercept = 0.0;
                let mut slope = 0.0;
                for &(r, d_bar, v_max) in &specs {
                    if mid >= v_max {
                        continue;
                    }
                    let unclamped = d_bar * (1.0 - mid / v_max);
                    if unclamped >= f[base + r] {
                        intercept += f[base + r];
                    } else {
                        intercept += d_bar;
                        slope += d_bar / v_max;
                    }
                }
                (intercept, slope)
            };
            let mut m_star = v_hi;
            for window in breaks.windows(2) {
                let (a, b) = (window[0], window[1]);
                let (intercept, slope) = segment_coeffs(a, b);
                let candidate = c * intercept / (f_sum + c * slope);
                if candidate >= a - 1e-15 && candidate <= b + 1e-15 {
                    m_star = candidate.clamp(a, b);
                    break;
                }
            }
            for &(r, d_bar, v_max) in &specs {
                let want = d_bar * (1.0 - m_star / v_max).max(0.0);
                g[base + r] = want.min(f[base + r]);
            }
        }
    }
}

/// Exact line search for a concave 1-D slice: the directional derivative is
/// non-increasing, so bisect its sign change. Working on the derivative keeps
/// full precision near the optimum, where value differences drown in the
/// floating-point noise of the objective itself.
fn line_search_max(mut slope: impl FnMut(f64) -> f64, hi: f64, iters: usize) -> f64 {
    if slope(0.0) <= 0.0 {
        return 0.0;
    }
    if slope(hi) >= 0.0 {
        return hi;
    }
    let mut lo = 0.0;
    let mut up = hi;
    for _ in 0..iters {
        let mid = 0.5 * (lo + up);
        if slope(mid) > 0.0 {
            lo = mid;
        } else {
            up = mid;
        }
    }
    0.5 * (lo + up)
}

/// Solver output: the plan, its welfare, and the final optimality gap.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveReport {
    pub plan: FlowPlan,
    pub value: f64,
    pub gap: f64,
    pub iterations: usize,
    /// False when the iteration limit fired before the gap target.
    pub converged: bool,
}

struct Atom {
    f: Vec<f64>,
    weight: f64,
}

/// Frank-Wolfe ascent from the uniform-split plan, with pairwise (away)
/// steps over an explicit vertex set. The iterate lives in the total-trip
/// space; dispatch volumes are re-derived optimally after every move, which
/// keeps the effective objective's curvature bounded even at locations with
/// microscopic supply. Stops when the joint FW gap drops below
/// `tol · max(1, |W|)` or the iteration budget runs out.
pub fn solve_fluid(
    instance: &MarketInstance,
    state: &MarketState,
    params: &SolveParams,
) -> Result<SolveReport, SolverError> {
    let ctx = SubtreeCtx::new(instance, state.node);
    let start = uniform_split(instance, &ctx, state)?;
    let n = ctx.n_arcs();
    let mut cur_f = start.f.clone();
    let mut cur_g = start.g;
    polish_dispatch(instance, &ctx, &cur_f, &mut cur_g);
    let mut atoms = vec![Atom { f: start.f, weight: 1.0 }];

    // Supergradient of the reduced objective f -> max_g W(f, g): where the
    // dispatch optimum is clamped at g = f, growing the total also relaxes
    // the dispatch bound, so the positive part of the g-gradient rides along.
    fn reduced_gradient(grad: &PlanGradient, f: &[f64], g: &[f64], out: &mut [f64]) {
        for i in 0..f.len() {
            let clamped = g[i] >= f[i] - 1e-12 * f[i].abs().max(1.0);
            out[i] = grad.f[i] + if clamped { grad.g[i].max(0.0) } else { 0.0 };
        }
    }

    let mut grad = PlanGradient { f: vec![0.0; n], g: vec![0.0; n] };
    let mut value = eval_objective(instance, &ctx, &cur_f, &cur_g, Some(&mut grad));
    let mut reduced = vec![0.0; n];
    reduced_gradient(&grad, &cur_f, &cur_g, &mut reduced);
    let zeros = vec![0.0; n];
    let mut gap = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;

    let mut dir_f = vec![0.0; n];
    let mut trial_f = vec![0.0; n];
    let mut trial_g = vec![0.0; n];
    let mut trial_grad = PlanGradient { f: vec![0.0; n], g: vec![0.0; n] };
    let mut trial_reduced = vec![0.0; n];

    while iterations < params.max_iters {
        iterations += 1;
        let vertex = linear_minimization_oracle(instance, &ctx, state, &reduced, &zeros)?;
        gap = (0..n).map(|i| reduced[i] * (vertex.f[i] - cur_f[i])).sum();
        if gap <= params.tol * value.abs().max(1.0) {
            converged = true;
            break;
        }

        // Away atom: the active vertex the gradient most wants to leave.
        let mut away_idx = 0;
        let mut away_score = f64::INFINITY;
        for (i, atom) in atoms.iter().enumerate() {
            let score: f64 = (0..n).map(|j| reduced[j] * (atom.f[j] - cur_f[j])).sum();
            if score < away_score {
                away_score = score;
                away_idx = i;
            }
        }
        let pairwise_slope: f64 =
            (0..n).map(|j| reduced[j] * (vertex.f[j] - atoms[away_idx].f[j])).sum();
        let use_pairwise = pairwise_slope > 0.0 && atoms[away_idx].weight > 1e-15;
        let alpha_max = if use_pairwise { atoms[away_idx].weight } else { 1.0 };
        if use_pairwise {
            let away = &atoms[away_idx];
            for i in 0..n {
                dir_f[i] = vertex.f[i] - away.f[i];
            }
        } else {
            for i in 0..n {
                dir_f[i] = vertex.f[i] - cur_f[i];
            }
        }

        let alpha = line_search_max(
            |a| {
                for i in 0..n {
                    trial_f[i] = cur_f[i] + a * dir_f[i];
                }
                polish_dispatch(instance, &ctx, &trial_f, &mut trial_g);
                eval_objective(instance, &ctx, &trial_f, &trial_g, Some(&mut trial_grad));
                reduced_gradient(&trial_grad, &trial_f, &trial_g, &mut trial_reduced);
                (0..n).map(|i| trial_reduced[i] * dir_f[i]).sum()
            },
            alpha_max,
            params.line_search_iters,
        );

        if alpha <= 0.0 {
            converged = gap <= params.tol * value.abs().max(1.0);
            break;
        }

        for i in 0..n {
            cur_f[i] += alpha * dir_f[i];
        }
        if use_pairwise {
            atoms[away_idx].weight -= alpha;
        } else {
            for atom in &mut atoms {
                atom.weight *= 1.0 - alpha;
            }
        }
        if let Some(existing) = atoms.iter_mut().find(|a| a.f == vertex.f) {
            existing.weight += alpha;
        } else {
            atoms.push(Atom { f: vertex.f.clone(), weight: alpha });
        }
        atoms.retain(|a| a.weight > 1e-15);

        // Resynchronize the iterate with its convex decomposition to cancel
        // floating-point drift in the conservation constraints.
        if iterations % 128 == 0 {
            cur_f.iter_mut().for_each(|v| *v = 0.0);
            for atom in &atoms {
                for i in 0..n {
                    cur_f[i] += atom.weight * atom.f[i];
                }
            }
        }

        polish_dispatch(instance, &ctx, &cur_f, &mut cur_g);
        value = eval_objective(instance, &ctx, &cur_f, &cur_g, Some(&mut grad));
        reduced_gradient(&grad, &cur_f, &cur_g, &mut reduced);
    }

    let plan =
        FlowPlan { root: state.node, nodes: ctx.nodes.clone(), n_routes: ctx.n_routes, f: cur_f, g: cur_g };
    Ok(SolveReport { plan, value, gap, iterations, converged })
}

/// Node and arc multipliers certifying optimality: `eta` per (node, location),
/// `alpha`/`beta`/`gamma` per arc for the f >= 0, g >= 0 and g <= f constraints.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DualCertificate {
    pub root: NodeId,
    pub nodes: Vec<NodeId>,
    pub n_locs: usize,
    pub n_routes: usize,
    pub eta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
}

impl DualCertificate {
    pub fn eta_at(&self, pos: usize, loc: LocId) -> f64 {
        self.eta[pos * self.n_locs + loc]
    }

    /// Multipliers at the subtree root, indexed by location.
    pub fn root_eta(&self) -> &[f64] {
        &self.eta[..self.n_locs]
    }
}

struct DualExtractor<'a> {
    instance: &'a MarketInstance,
    params: &'a SolveParams,
    ctx: SubtreeCtx,
    supplies: Vec<Vec<f64>>,
    plan: &'a FlowPlan,
    /// Unweighted local gradients per arc (probability factors removed).
    u_f: Vec<f64>,
    u_g: Vec<f64>,
    eta: Vec<Option<f64>>,
    depth: usize,
}

const MAX_PERTURBATION_DEPTH: usize = 12;

impl<'a> DualExtractor<'a> {
    fn new(
        instance: &'a MarketInstance,
        state: &MarketState,
        plan: &'a FlowPlan,
        params: &'a SolveParams,
        depth: usize,
    ) -> Self {
        let ctx = SubtreeCtx::new(instance, state.node);
        let supplies = implied_supplies(instance, &ctx, state, plan);
        let n = ctx.n_arcs();
        let mut u_f = vec![0.0; n];
        let mut u_g = vec![0.0; n];
        for (pos, &node) in ctx.nodes.iter().enumerate() {
            let base = pos * ctx.n_routes;
            for loc in 0..ctx.n_locs {
                let routes = instance.routes_from(loc);
                let mut f_sum = 0.0;
                let mut g_sum = 0.0;
                for &r in routes {
                    f_sum += plan.f[base + r];
                    g_sum += plan.g[base + r];
                }
                let ratio = if f_sum > 0.0 { (g_sum / f_sum).clamp(0.0, 1.0) } else { 0.0 };
                let c = instance.pickup_bound;
                for &r in routes {
                    let route = &instance.routes[r];
                    let du = match instance.demand_at(node, r) {
                        Some(spec) => reward_eval(&spec.values, spec.d_bar, plan.g[base + r]).1,
                        None => 0.0,
                    };
                    u_f[base + r] = -route.cost + 0.5 * c * ratio * ratio;
                    u_g[base + r] = du - c * ratio;
                }
            }
        }
        let eta = vec![None; ctx.nodes.len() * ctx.n_locs];
        DualExtractor { instance, params, ctx, supplies, plan, u_f, u_g, eta, depth }
    }

    /// Full f-derivative of the value-function form: local term plus the
    /// expected marginal welfare of the destination next period.
    fn full_f_grad(&mut self, pos: usize, route: RouteId) -> Result<f64, SolverError> {
        let mut v = self.u_f[self.ctx.arc(pos, route)];
        let dest = self.instance.routes[route].destination;
        let children = self.ctx.children[pos].clone();
        for child in children {
            v += self.ctx.cond_prob[child] * self.eta(child, dest)?;
        }
        Ok(v)
    }

    fn eta(&mut self, pos: usize, loc: LocId) -> Result<f64, SolverError> {
        let idx = pos * self.ctx.n_locs + loc;
        if let Some(v) = self.eta[idx] {
            return Ok(v);
        }
        let supply = self.supplies[pos][loc];
        let v = if supply > 0.0 {
            let mut acc = 0.0;
            for &r in self.instance.routes_from(loc) {
                let arc = self.ctx.arc(pos, r);
                let fv = self.plan.f[arc];
                let gv = self.plan.g[arc];
                if fv != 0.0 {
                    acc += fv * self.full_f_grad(pos, r)?;
                }
                if gv != 0.0 {
                    acc += gv * self.u_g[arc];
                }
            }
            acc / supply
        } else {
            self.perturbed_eta(pos, loc)?
        };
        self.eta[idx] = Some(v);
        Ok(v)
    }

    /// Right derivative at an empty location: bump the supply by `h`,
    /// re-solve the subproblem, and read the multiplier there.
    fn perturbed_eta(&mut self, pos: usize, loc: LocId) -> Result<f64, SolverError> {
        if self.depth >= MAX_PERTURBATION_DEPTH {
            return Ok(0.0);
        }
        let node = self.ctx.nodes[pos];
        let mut supply = self.supplies[pos].clone();
        supply[loc] += self.params.perturbation;
        let state = MarketState::new(node, supply);
        let report = solve_fluid(self.instance, &state, self.params)?;
        let mut inner =
            DualExtractor::new(self.instance, &state, &report.plan, self.params, self.depth + 1);
        inner.eta(0, loc)
    }
}

/// Recovers the dual certificate of an optimal plan: `eta` via the
/// supply-weighted stationarity average at the root and the backwards
/// recursion below it, `alpha`/`beta`/`gamma` as nonnegative stationarity
/// residuals. Fails with `NotOptimal` when the residuals say the plan is not
/// an optimum.
pub fn extract_duals(
    instance: &MarketInstance,
    state: &MarketState,
    plan: &FlowPlan,
    params: &SolveParams,
) -> Result<DualCertificate, SolverError> {
    let mut ext = DualExtractor::new(instance, state, plan, params, 0);
    let n_pos = ext.ctx.nodes.len();
    let n_locs = ext.ctx.n_locs;
    let n_routes = ext.ctx.n_routes;

    let mut eta = vec![0.0; n_pos * n_locs];
    for pos in 0..n_pos {
        for loc in 0..n_locs {
            eta[pos * n_locs + loc] = ext.eta(pos, loc)?;
        }
    }

    let mut alpha = vec![0.0; n_pos * n_routes];
    let mut beta = vec![0.0; n_pos * n_routes];
    let mut gamma = vec![0.0; n_pos * n_routes];
    let mut worst_residual: f64 = 0.0;
    for pos in 0..n_pos {
        for loc in 0..n_locs {
            if ext.supplies[pos][loc] <= 0.0 {
                continue;
            }
            let eta_l = eta[pos * n_locs + loc];
            for &r in instance.routes_from(loc) {
                let arc = pos * n_routes + r;
                let s_f = eta_l - ext.full_f_grad(pos, r)?;
                let s_g = ext.u_g[arc];
                let gam = s_g.max(0.0).min(s_f.max(0.0));
                let bet = (gam - s_g).max(0.0);
                let alp = s_f.max(0.0) - gam;
                alpha[arc] = alp;
                beta[arc] = bet;
                gamma[arc] = gam;
                worst_residual = worst_residual
                    .max((s_f - alp - gam).abs())
                    .max((s_g - gam + bet).abs());
            }
        }
    }

    let limit = 100.0 * params.tol * eta.iter().fold(1.0_f64, |a, &v| a.max(v.abs()));
    if worst_residual > limit {
        return Err(SolverError::NotOptimal { residual: worst_residual, limit });
    }

    Ok(DualCertificate {
        root: state.node,
        nodes: ext.ctx.nodes.clone(),
        n_locs,
        n_routes,
        eta,
        alpha,
        beta,
        gamma,
    })
}

/// Per-arc optimality diagnostics for a (plan, certificate) pair.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct KktReport {
    pub max_stationarity_f: f64,
    pub max_stationarity_g: f64,
    pub max_complementary_slackness: f64,
    pub max_feasibility: f64,
}

impl KktReport {
    pub fn max_residual(&self) -> f64 {
        self.max_stationarity_f
            .max(self.max_stationarity_g)
            .max(self.max_complementary_slackness)
            .max(self.max_feasibility)
    }
}

/// Evaluates stationarity residuals, complementary-slackness products, and
/// constraint violations for an arbitrary plan against given duals.
pub fn kkt_residuals(
    instance: &MarketInstance,
    state: &MarketState,
    plan: &FlowPlan,
    duals: &DualCertificate,
) -> Result<KktReport, SolverError> {
    let params = SolveParams::default();
    let mut ext = DualExtractor::new(instance, state, plan, &params, 0);
    // Continuation values come from the certificate, not from fresh solves.
    for (i, &v) in duals.eta.iter().enumerate() {
        ext.eta[i] = Some(v);
    }
    let n_pos = ext.ctx.nodes.len();
    let n_locs = ext.ctx.n_locs;
    let n_routes = ext.ctx.n_routes;

    let mut report = KktReport::default();
    for pos in 0..n_pos {
        for loc in 0..n_locs {
            let outgoing: f64 =
                instance.routes_from(loc).iter().map(|&r| plan.f[pos * n_routes + r]).sum();
            report.max_feasibility =
                report.max_feasibility.max((outgoing - ext.supplies[pos][loc]).abs());
            if ext.supplies[pos][loc] <= 0.0 {
                continue;
            }
            let eta_l = duals.eta[pos * n_locs + loc];
            for &r in instance.routes_from(loc) {
                let arc = pos * n_routes + r;
                let s_f = eta_l - ext.full_f_grad(pos, r)?;
                let s_g = ext.u_g[arc];
                report.max_stationarity_f =
                    report.max_stationarity_f.max((s_f - duals.alpha[arc] - duals.gamma[arc]).abs());
                report.max_stationarity_g = report
                    .max_stationarity_g
                    .max((s_g - duals.gamma[arc] + duals.beta[arc]).abs());
            }
        }
        for r in 0..n_routes {
            let arc = pos * n_routes + r;
            let f = plan.f[arc];
            let g = plan.g[arc];
            report.max_feasibility = report.max_feasibility.max(-f).max(-g).max(g - f);
            report.max_complementary_slackness = report
                .max_complementary_slackness
                .max((f * duals.alpha[arc]).abs())
                .max((g * duals.beta[arc]).abs())
                .max(((f - g) * duals.gamma[arc]).abs());
        }
    }
    Ok(report)
}

/// Welfare attributable to dispatch trips alone: rider values net of pickup
/// disutility and the dispatching drivers' travel costs. Relocation-trip
/// costs and rewards are excluded.
pub fn dispatch_welfare_of_plan(
    instance: &MarketInstance,
    state: &MarketState,
    plan: &FlowPlan,
) -> f64 {
    let ctx = SubtreeCtx::new(instance, state.node);
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
            if let Ok((a, _, _)) = pickup_cost_eval(instance.pickup_bound, g_sum, f_sum) {
                node_value -= a;
            }
            for &r in routes {
                node_value -= instance.routes[r].cost * plan.g[base + r];
                if let Some(spec) = instance.demand_at(node, r) {
                    node_value += reward_eval(&spec.values, spec.d_bar, plan.g[base + r]).0;
                }
            }
        }
        value += ctx.abs_prob[pos] * node_value;
    }
    value
}

/// Solve and certify in one step.
#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub report: SolveReport,
    pub duals: DualCertificate,
}

pub fn solve_and_certify(
    instance: &MarketInstance,
    state: &MarketState,
    params: &SolveParams,
) -> Result<SolveOutcome, SolverError> {
    let report = solve_fluid(instance, state, params)?;
    let duals = extract_duals(instance, state, &report.plan, params)?;
    Ok(SolveOutcome { report, duals })
}

/// Memoizes solves by exact market state; shared by the pricing mechanisms
/// and the population simulator, where the same states recur across episodes.
pub struct SolveCache {
    params: SolveParams,
    map: Mutex<HashMap<(NodeId, Vec<u64>), Arc<SolveOutcome>>>,
}

impl SolveCache {
    pub fn new(params: SolveParams) -> Self {
        SolveCache { params, map: Mutex::new(HashMap::new()) }
    }

    pub fn params(&self) -> &SolveParams {
        &self.params
    }

    pub fn solve(
        &self,
        instance: &MarketInstance,
        state: &MarketState,
    ) -> Result<Arc<SolveOutcome>, SolverError> {
        let key = (state.node, state.supply.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        if let Some(hit) = self.map.lock().unwrap().get(&key) {
            return Ok(Arc::clone(hit));
        }
        let outcome = Arc::new(solve_and_certify(instance, state, &self.params)?);
        self.map.lock().unwrap().insert(key, Arc::clone(&outcome));
        Ok(outcome)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::ValueDistribution;
    use crate::presets;
    use approx::assert_relative_eq;

    #[test]
    fn reward_eval_matches_uniform_formulas() {
        let dist = ValueDistribution::uniform(4.0);
        let (u, du, price) = reward_eval(&dist, 6.0, 3.0);
        assert_relative_eq!(u, 9.0);
        assert_relative_eq!(du, 2.0);
        assert_relative_eq!(price, 2.0);

        let (u, du, price) = reward_eval(&dist, 6.0, 0.0);
        assert_relative_eq!(u, 0.0);
        assert_relative_eq!(du, 4.0);
        assert_relative_eq!(price, 4.0);

        let (u, du, price) = reward_eval(&dist, 6.0, 7.0);
        assert_relative_eq!(u, 12.0);
        assert_relative_eq!(du, 0.0);
        assert_relative_eq!(price, 0.0);

        let (u, du, price) = reward_eval(&dist, 0.0, 1.0);
        assert_relative_eq!(u, 0.0);
        assert_relative_eq!(du, 0.0);
        assert_relative_eq!(price, 4.0);
    }

    #[test]
    fn pickup_cost_examples() {
        assert_eq!(pickup_cost_eval(2.0, 0.0, 5.0).unwrap(), (0.0, 0.0, 0.0));
        let (a, dg, df) = pickup_cost_eval(2.0, 1.0, 2.0).unwrap();
        assert_relative_eq!(a, 0.5);
        assert_relative_eq!(dg, 1.0);
        assert_relative_eq!(df, -0.25);
        assert_eq!(pickup_cost_eval(2.0, 0.0, 0.0).unwrap(), (0.0, 0.0, 0.0));
        assert!(pickup_cost_eval(2.0, 2.0, 1.0).is_err());
    }

    fn rain_shine_plan(stay: f64) -> (crate::market::MarketInstance, MarketState, FlowPlan) {
        let inst = presets::rain_shine();
        let state = inst.initial_state();
        let ctx = SubtreeCtx::new(&inst, state.node);
        let a = inst.location_id("A").unwrap();
        let x = inst.location_id("X").unwrap();
        let stay_r = inst.route_id(a, a).unwrap();
        let exit_r = inst.route_id(a, x).unwrap();
        let hold_r = inst.route_id(x, x).unwrap();
        let rain_pos = 1;
        let shine_pos = 2;
        let mut plan = FlowPlan::zeros(&ctx, state.node);
        plan.f[ctx.arc(0, stay_r)] = stay;
        plan.f[ctx.arc(0, exit_r)] = 10.0 - stay;
        for pos in [rain_pos, shine_pos] {
            plan.f[ctx.arc(pos, stay_r)] = stay;
            plan.f[ctx.arc(pos, hold_r)] = 10.0 - stay;
            let d_bar = if pos == rain_pos { 6.0 } else { 2.0 };
            plan.g[ctx.arc(pos, stay_r)] = stay.min(d_bar);
        }
        (inst, state, plan)
    }

    #[test]
    fn objective_matches_hand_substitution() {
        let (inst, state, plan) = rain_shine_plan(3.0);
        let (w, _) = objective_and_gradient(&inst, &state, &plan).unwrap();
        assert_relative_eq!(w, 13.5, epsilon = 1e-12);
    }

    #[test]
    fn stay_then_serve_direction_is_stationary() {
        let (inst, state, plan) = rain_shine_plan(3.0);
        let (_, grad) = objective_and_gradient(&inst, &state, &plan).unwrap();
        let ctx = SubtreeCtx::new(&inst, state.node);
        let a = inst.location_id("A").unwrap();
        let x = inst.location_id("X").unwrap();
        let stay_r = inst.route_id(a, a).unwrap();
        let exit_r = inst.route_id(a, x).unwrap();
        let hold_r = inst.route_id(x, x).unwrap();
        // Move one driver from the exit path onto stay-then-serve-when-rainy.
        let mut deriv = 0.0;
        deriv += grad.f[ctx.arc(0, stay_r)] - grad.f[ctx.arc(0, exit_r)];
        deriv += grad.f[ctx.arc(1, stay_r)] + grad.g[ctx.arc(1, stay_r)] - grad.f[ctx.arc(1, hold_r)];
        deriv += grad.f[ctx.arc(2, stay_r)] - grad.f[ctx.arc(2, hold_r)];
        assert_relative_eq!(deriv, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn zero_supply_state_gives_zero_plan() {
        let inst = presets::rain_shine();
        let state = MarketState::new(inst.tree.root, vec![0.0, 0.0]);
        let report = solve_fluid(&inst, &state, &SolveParams::default()).unwrap();
        assert_relative_eq!(report.value, 0.0);
        assert!(report.plan.f.iter().all(|&v| v == 0.0));
        let (w, grad) = objective_and_gradient(&inst, &state, &report.plan).unwrap();
        assert_relative_eq!(w, 0.0);
        // Restricted to feasible directions there is nothing to improve; with
        // zero supply every coordinate is pinned at zero flow.
        assert!(grad.f.iter().chain(grad.g.iter()).all(|v| v.is_finite()));
    }

    #[test]
    fn infeasible_plan_is_rejected() {
        let (inst, state, mut plan) = rain_shine_plan(3.0);
        plan.f[0] += 0.5;
        assert!(matches!(
            objective_and_gradient(&inst, &state, &plan),
            Err(SolverError::InfeasiblePlan(_))
        ));
    }

    #[test]
    fn lmo_routes_supply_to_best_arc() {
        let inst = presets::interior_threshold();
        let state = inst.initial_state();
        let ctx = SubtreeCtx::new(&inst, state.node);
        let ab = inst.route_id(0, 1).unwrap();
        let mut coef_f = vec![0.0; ctx.n_arcs()];
        let coef_g = vec![-1.0; ctx.n_arcs()];
        coef_f[ctx.arc(0, ab)] = 2.0;
        let plan = linear_minimization_oracle(&inst, &ctx, &state, &coef_f, &coef_g).unwrap();
        assert_relative_eq!(plan.f[ctx.arc(0, ab)], 2.0);
        assert_relative_eq!(plan.g[ctx.arc(0, ab)], 0.0);
    }

    #[test]
    fn lmo_breaks_ties_toward_lower_destination() {
        use crate::market::{Route, ScenarioTree};
        let tree = ScenarioTree::new(&[("n".to_string(), 1, None, 1.0)]).unwrap();
        let inst = crate::market::MarketInstance::new(
            vec!["A".to_string(), "B".to_string(), "C".to_string()],
            tree,
            vec![
                Route { origin: 0, destination: 1, cost: 0.0 },
                Route { origin: 0, destination: 2, cost: 0.0 },
                Route { origin: 1, destination: 1, cost: 0.0 },
                Route { origin: 2, destination: 2, cost: 0.0 },
            ],
            vec![],
            vec![(0, 0, 1.0)],
            0.0,
        );
        let state = inst.initial_state();
        let ctx = SubtreeCtx::new(&inst, state.node);
        let coef_f = vec![1.0; ctx.n_arcs()];
        let coef_g = vec![0.0; ctx.n_arcs()];
        let plan = linear_minimization_oracle(&inst, &ctx, &state, &coef_f, &coef_g).unwrap();
        let to_b = inst.route_id(0, 1).unwrap();
        let to_c = inst.route_id(0, 2).unwrap();
        assert_relative_eq!(plan.f[ctx.arc(0, to_b)], 1.0);
        assert_relative_eq!(plan.f[ctx.arc(0, to_c)], 0.0);
        // Dispatch preferred on an exact coefficient tie at zero.
        assert_relative_eq!(plan.g[ctx.arc(0, to_b)], 1.0);
    }

    #[test]
    fn solves_rain_shine_to_paper_optimum() {
        let inst = presets::rain_shine();
        let state = inst.initial_state();
        let params = SolveParams { tol: 1e-9, ..Default::default() };
        let report = solve_fluid(&inst, &state, &params).unwrap();
        assert!(report.converged, "gap {} after {} iterations", report.gap, report.iterations);
        let a = inst.location_id("A").unwrap();
        let stay = inst.route_id(a, a).unwrap();
        assert_relative_eq!(report.plan.root_flows()[stay], 3.0, epsilon = 1e-3);
        assert_relative_eq!(report.value, 13.5, epsilon = 1e-3);
    }

    #[test]
    fn dual_at_market_location_matches_stay_utility() {
        let inst = presets::rain_shine();
        let state = inst.initial_state();
        let params = SolveParams { tol: 1e-9, ..Default::default() };
        let outcome = solve_and_certify(&inst, &state, &params).unwrap();
        let a = inst.location_id("A").unwrap();
        assert_relative_eq!(outcome.duals.root_eta()[a], 1.0, epsilon = 1e-3);
    }

    #[test]
    fn terminal_sink_dual_is_zero() {
        use crate::market::{DemandSpec, Route, ScenarioTree};
        let tree = ScenarioTree::new(&[("n".to_string(), 1, None, 1.0)]).unwrap();
        let inst = crate::market::MarketInstance::new(
            vec!["A".to_string(), "S".to_string()],
            tree,
            vec![
                Route { origin: 0, destination: 1, cost: 0.1 },
                Route { origin: 1, destination: 1, cost: 0.0 },
            ],
            vec![(0, 0, DemandSpec { d_bar: 1.0, values: ValueDistribution::uniform(2.0) })],
            vec![(0, 0, 1.0), (1, 0, 1.0)],
            0.0,
        );
        let state = inst.initial_state();
        let params = SolveParams { tol: 1e-9, ..Default::default() };
        let outcome = solve_and_certify(&inst, &state, &params).unwrap();
        let s = inst.location_id("S").unwrap();
        assert_relative_eq!(outcome.duals.root_eta()[s], 0.0, epsilon = 1e-9);
    }

    #[test]
    fn kkt_residuals_flag_perturbed_plan() {
        let inst = presets::rain_shine();
        let state = inst.initial_state();
        let params = SolveParams { tol: 1e-9, ..Default::default() };
        let outcome = solve_and_certify(&inst, &state, &params).unwrap();
        let clean = kkt_residuals(&inst, &state, &outcome.report.plan, &outcome.duals).unwrap();
        assert!(clean.max_residual() <= 1e-3, "clean residual {}", clean.max_residual());

        let mut bumped = outcome.report.plan.clone();
        bumped.f[0] += 0.5;
        let report = kkt_residuals(&inst, &state, &bumped, &outcome.duals).unwrap();
        assert!(report.max_feasibility >= 0.5 - 1e-9);
    }

    #[test]
    fn kkt_residuals_zero_for_empty_market() {
        let inst = presets::rain_shine();
        let state = MarketState::new(inst.tree.root, vec![0.0, 0.0]);
        let ctx = SubtreeCtx::new(&inst, state.node);
        let plan = FlowPlan::zeros(&ctx, state.node);
        let duals = DualCertificate {
            root: state.node,
            nodes: ctx.nodes.clone(),
            n_locs: ctx.n_locs,
            n_routes: ctx.n_routes,
            eta: vec![0.0; ctx.nodes.len() * ctx.n_locs],
            alpha: vec![0.0; ctx.n_arcs()],
            beta: vec![0.0; ctx.n_arcs()],
            gamma: vec![0.0; ctx.n_arcs()],
        };
        let report = kkt_residuals(&inst, &state, &plan, &duals).unwrap();
        assert_eq!(report.max_residual(), 0.0);
    }
}
