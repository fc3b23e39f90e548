//! Instance file format: JSON with top-level keys `locations`,
//! `scenario_tree`, `routes`, `demand`, `entries`, and `C`. Unknown keys are
//! rejected, and the writer emits a canonical ordering so write -> read ->
//! write round-trips byte-stably.

use crate::market::{DemandSpec, MarketInstance, Route, ScenarioTree, ValueDistribution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("instance error: {0}")]
    Invalid(String),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeRow {
    id: String,
    t: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    parent: Option<String>,
    p: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RouteRow {
    origin: String,
    destination: String,
    cost: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DemandRow {
    origin: String,
    destination: String,
    node: String,
    #[serde(rename = "D_bar")]
    d_bar: f64,
    #[serde(rename = "V_max")]
    v_max: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryRow {
    location: String,
    node: String,
    #[serde(rename = "M_bar")]
    m_bar: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceFile {
    locations: Vec<String>,
    scenario_tree: Vec<NodeRow>,
    routes: Vec<RouteRow>,
    demand: Vec<DemandRow>,
    entries: Vec<EntryRow>,
    #[serde(rename = "C")]
    c: f64,
}

/// Parses an instance from its JSON text.
pub fn instance_from_json(text: &str) -> Result<MarketInstance, IoError> {
    let file: InstanceFile = serde_json::from_str(text).map_err(|e| IoError::Parse(e.to_string()))?;
    let rows: Vec<(String, u32, Option<String>, f64)> =
        file.scenario_tree.iter().map(|n| (n.id.clone(), n.t, n.parent.clone(), n.p)).collect();
    let tree = ScenarioTree::new(&rows).map_err(IoError::Invalid)?;

    let loc_id = |name: &str| {
        file.locations
            .iter()
            .position(|l| l == name)
            .ok_or_else(|| IoError::Invalid(format!("unknown location `{name}`")))
    };
    let node_id = |name: &str| {
        tree.node_by_name(name)
            .ok_or_else(|| IoError::Invalid(format!("unknown scenario node `{name}`")))
    };

    let mut routes = Vec::with_capacity(file.routes.len());
    for row in &file.routes {
        routes.push(Route {
            origin: loc_id(&row.origin)?,
            destination: loc_id(&row.destination)?,
            cost: row.cost,
        });
    }
    let route_id = |origin: usize, destination: usize| {
        routes
            .iter()
            .position(|r| r.origin == origin && r.destination == destination)
            .ok_or_else(|| IoError::Invalid(format!("demand references undeclared route {origin}->{destination}")))
    };

    let mut demand = Vec::with_capacity(file.demand.len());
    for row in &file.demand {
        let o = loc_id(&row.origin)?;
        let d = loc_id(&row.destination)?;
        demand.push((
            route_id(o, d)?,
            node_id(&row.node)?,
            DemandSpec { d_bar: row.d_bar, values: ValueDistribution::uniform(row.v_max) },
        ));
    }

    let mut entries = Vec::with_capacity(file.entries.len());
    for row in &file.entries {
        entries.push((loc_id(&row.location)?, node_id(&row.node)?, row.m_bar));
    }

    Ok(MarketInstance::new(file.locations, tree, routes, demand, entries, file.c))
}

/// Serializes an instance in canonical order: tree rows parents-first, routes
/// sorted by (origin, destination), demand by (node, origin, destination),
/// entries by (node, location).
pub fn instance_to_json(instance: &MarketInstance) -> String {
    let mut scenario_tree: Vec<NodeRow> = instance
        .tree
        .nodes
        .iter()
        .map(|n| NodeRow {
            id: n.name.clone(),
            t: n.t,
            parent: n.parent.map(|p| instance.tree.nodes[p].name.clone()),
            p: n.prob,
        })
        .collect();
    scenario_tree.sort_by(|a, b| (a.t, a.id.clone()).cmp(&(b.t, b.id.clone())));

    let mut routes: Vec<RouteRow> = instance
        .routes
        .iter()
        .map(|r| RouteRow {
            origin: instance.locations[r.origin].clone(),
            destination: instance.locations[r.destination].clone(),
            cost: r.cost,
        })
        .collect();
    routes.sort_by(|a, b| (a.origin.clone(), a.destination.clone()).cmp(&(b.origin.clone(), b.destination.clone())));

    let mut demand = Vec::new();
    for (nid, node) in instance.tree.nodes.iter().enumerate() {
        for (rid, route) in instance.routes.iter().enumerate() {
            if let Some(spec) = instance.demand_at(nid, rid) {
                demand.push(DemandRow {
                    origin: instance.locations[route.origin].clone(),
                    destination: instance.locations[route.destination].clone(),
                    node: node.name.clone(),
                    d_bar: spec.d_bar,
                    v_max: spec.values.v_max(),
                });
            }
        }
    }
    demand.sort_by(|a, b| {
        (a.node.clone(), a.origin.clone(), a.destination.clone())
            .cmp(&(b.node.clone(), b.origin.clone(), b.destination.clone()))
    });

    let mut entries = Vec::new();
    for (nid, node) in instance.tree.nodes.iter().enumerate() {
        for (lid, name) in instance.locations.iter().enumerate() {
            let m = instance.entry_mean(nid, lid);
            if m > 0.0 {
                entries.push(EntryRow { location: name.clone(), node: node.name.clone(), m_bar: m });
            }
        }
    }
    entries.sort_by(|a, b| (a.node.clone(), a.location.clone()).cmp(&(b.node.clone(), b.location.clone())));

    let file = InstanceFile {
        locations: instance.locations.clone(),
        scenario_tree,
        routes,
        demand,
        entries,
        c: instance.pickup_bound,
    };
    let mut text = serde_json::to_string_pretty(&file).expect("instance serializes");
    text.push('\n');
    text
}
