//! Road-network environment: links, OD pairs with enumerated paths, BPR link
//! costs, exogenous cost sequences, and the richness conditions a cost
//! sequence must meet for the behavioral parameters to be identifiable.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ND_NETWORK_JSON: &str = include_str!("../data/nguyen_dupuis.json");

/// Index of the study OD pair (5 -> 11) inside [`build_nd_network`].
pub const ND_STUDY_OD: usize = 4;

/// Relative singular-value cutoff used by [`check_richness`].
pub const RANK_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub tail: u32,
    pub head: u32,
    /// Free-flow travel time, minutes.
    pub fft: f64,
    /// Capacity, vehicles per period.
    pub cap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdPair {
    pub origin: u32,
    pub destination: u32,
    pub demand: f64,
    /// Each path is a sequence of link ids (indices into `Network::links`).
    pub paths: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub nodes: Vec<u32>,
    pub links: Vec<Link>,
    pub od_pairs: Vec<OdPair>,
}

impl Network {
    /// Validates connectivity of every path and positivity of link attributes.
    pub fn new(nodes: Vec<u32>, links: Vec<Link>, od_pairs: Vec<OdPair>) -> Result<Self> {
        let net = Network { nodes, links, od_pairs };
        net.validate()?;
        Ok(net)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let net: Network = serde_json::from_str(text)?;
        net.validate()?;
        Ok(net)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("network serializes")
    }

    fn validate(&self) -> Result<()> {
        let known = |n: u32| self.nodes.contains(&n);
        for (id, link) in self.links.iter().enumerate() {
            if !known(link.tail) || !known(link.head) {
                return Err(Error::data(format!("link {id} references an unknown node")));
            }
            if !(link.fft.is_finite() && link.fft > 0.0) || !(link.cap.is_finite() && link.cap > 0.0) {
                return Err(Error::data(format!(
                    "link {id}: free-flow time and capacity must be positive"
                )));
            }
        }
        for (w, od) in self.od_pairs.iter().enumerate() {
            if !(od.demand.is_finite() && od.demand >= 0.0) {
                return Err(Error::data(format!("od {w}: demand must be nonnegative")));
            }
            if od.paths.is_empty() {
                return Err(Error::data(format!("od {w} has no paths")));
            }
            for (k, path) in od.paths.iter().enumerate() {
                let mut at = od.origin;
                for &l in path {
                    let link = self.links.get(l).ok_or(Error::UnknownLink(l))?;
                    if link.tail != at {
                        return Err(Error::data(format!(
                            "od {w} path {k}: link {l} does not continue from node {at}"
                        )));
                    }
                    at = link.head;
                }
                if path.is_empty() || at != od.destination {
                    return Err(Error::data(format!(
                        "od {w} path {k} does not end at node {}",
                        od.destination
                    )));
                }
            }
        }
        Ok(())
    }

    /// Node sequence of path `k` of OD `w`.
    pub fn path_nodes(&self, w: usize, k: usize) -> Vec<u32> {
        let od = &self.od_pairs[w];
        let mut nodes = vec![od.origin];
        nodes.extend(od.paths[k].iter().map(|&l| self.links[l].head));
        nodes
    }
}

/// The Nguyen-Dupuis network with background OD pairs 1->2, 1->3, 4->2, 4->3
/// and the study OD pair 5->11 (index [`ND_STUDY_OD`]).
///
/// Link parameters come from `data/nguyen_dupuis.json`. Two connector links
/// (5->7 and 9->11) are added to the classic 19-link layout so that the
/// study paths 5-7-11 and 5-9-11 exist; background paths never use them.
pub fn build_nd_network() -> Network {
    Network::from_json(ND_NETWORK_JSON).expect("bundled network is valid")
}

/// BPR link performance function `fft * (1 + a (flow/cap)^b)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkCostFn {
    pub a: f64,
    pub b: f64,
}

impl Default for LinkCostFn {
    fn default() -> Self {
        LinkCostFn { a: 0.15, b: 4.0 }
    }
}

impl LinkCostFn {
    pub fn link_cost(&self, link: &Link, flow: f64) -> Result<f64> {
        if !(flow >= 0.0) || !flow.is_finite() {
            return Err(Error::param(format!(
                "link flow must be finite and nonnegative, got {flow}"
            )));
        }
        Ok(link.fft * (1.0 + self.a * (flow / link.cap).powf(self.b)))
    }
}

/// Link cost under the default BPR parameters.
pub fn link_cost(link: &Link, flow: f64) -> Result<f64> {
    LinkCostFn::default().link_cost(link, flow)
}

/// Per-OD, per-path costs from link flows: `[od][path]`.
pub fn path_costs(network: &Network, link_flows: &[f64], cost_fn: &LinkCostFn) -> Result<Vec<Vec<f64>>> {
    if link_flows.len() != network.links.len() {
        return Err(Error::dim(format!(
            "expected {} link flows, got {}",
            network.links.len(),
            link_flows.len()
        )));
    }
    let link_costs = network
        .links
        .iter()
        .zip(link_flows)
        .map(|(link, &f)| cost_fn.link_cost(link, f))
        .collect::<Result<Vec<_>>>()?;
    path_costs_from_link_costs(network, &link_costs)
}

/// Sums link costs along every path.
pub fn path_costs_from_link_costs(network: &Network, link_costs: &[f64]) -> Result<Vec<Vec<f64>>> {
    network
        .od_pairs
        .iter()
        .map(|od| {
            od.paths
                .iter()
                .map(|path| {
                    path.iter()
                        .map(|&l| link_costs.get(l).copied().ok_or(Error::UnknownLink(l)))
                        .sum()
                })
                .collect()
        })
        .collect()
}

/// Exogenous daily route costs for one OD pair, a `days x routes` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CostSequence {
    pub od_id: u32,
    days: usize,
    routes: usize,
    costs: Vec<f64>,
    bound: Option<f64>,
}

impl CostSequence {
    pub fn new(od_id: u32, rows: Vec<Vec<f64>>) -> Result<Self> {
        let days = rows.len();
        if days == 0 {
            return Err(Error::data("cost sequence needs at least one day"));
        }
        let routes = rows[0].len();
        if routes < 2 {
            return Err(Error::data("cost sequence needs at least two routes"));
        }
        let mut costs = Vec::with_capacity(days * routes);
        for (t, row) in rows.into_iter().enumerate() {
            if row.len() != routes {
                return Err(Error::dim(format!(
                    "day {} has {} routes, expected {routes}",
                    t + 1,
                    row.len()
                )));
            }
            for c in row {
                if !(c.is_finite() && c >= 0.0) {
                    return Err(Error::data(format!(
                        "day {}: cost {c} is not finite and nonnegative",
                        t + 1
                    )));
                }
                costs.push(c);
            }
        }
        Ok(CostSequence {
            od_id,
            days,
            routes,
            costs,
            bound: None,
        })
    }

    /// Declares the cost bound `C`; every entry must lie in `[0, C]`.
    pub fn with_bound(mut self, bound: f64) -> Result<Self> {
        if let Some(c) = self.costs.iter().find(|&&c| c > bound) {
            return Err(Error::data(format!("cost {c} exceeds declared bound {bound}")));
        }
        self.bound = Some(bound);
        Ok(self)
    }

    pub fn bound(&self) -> Option<f64> {
        self.bound
    }

    pub fn days(&self) -> usize {
        self.days
    }

    pub fn routes(&self) -> usize {
        self.routes
    }

    /// Route costs on day `t` (0-based).
    pub fn day(&self, t: usize) -> &[f64] {
        &self.costs[t * self.routes..(t + 1) * self.routes]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.costs.chunks(self.routes)
    }

    /// Days `start..end` as a new sequence.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.days {
            return Err(Error::dim(format!("day range {start}..{end} outside 0..{}", self.days)));
        }
        Ok(CostSequence {
            od_id: self.od_id,
            days: end - start,
            routes: self.routes,
            costs: self.costs[start * self.routes..end * self.routes].to_vec(),
            bound: self.bound,
        })
    }

    pub fn max_cost(&self) -> f64 {
        self.costs.iter().copied().fold(0.0, f64::max)
    }
}

/// Outcome of [`check_richness`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RichnessReport {
    pub dynamic_richness: bool,
    /// First `(route_i, route_j, day)` (0-based, lexicographic in day, then
    /// routes) whose cost difference departs from the initial value difference.
    pub witness_pair: Option<(usize, usize, usize)>,
    pub strong_richness: bool,
    /// Numerical rank of the day-by-route matrix of differences against route 0.
    pub rank: usize,
}

/// Checks the dynamic-richness and stronger-richness conditions of a cost
/// sequence relative to initial values `v1`.
///
/// Only cost differences enter, so adding a constant to every route on a day
/// never changes the report.
pub fn check_richness(costs: &CostSequence, v1: &[f64]) -> Result<RichnessReport> {
    let m = costs.routes();
    if v1.len() != m {
        return Err(Error::dim(format!(
            "initial values have length {}, expected {m}",
            v1.len()
        )));
    }
    let mut witness = None;
    'search: for t in 0..costs.days() {
        let c = costs.day(t);
        for i in 0..m {
            for j in i + 1..m {
                let dc = c[i] - c[j];
                let dv = v1[i] - v1[j];
                let scale = 1.0_f64
                    .max(c[i].abs())
                    .max(c[j].abs())
                    .max(v1[i].abs())
                    .max(v1[j].abs());
                if (dc - dv).abs() > 1e-12 * scale {
                    witness = Some((i, j, t));
                    break 'search;
                }
            }
        }
    }

    let rank = difference_rank(costs);
    Ok(RichnessReport {
        dynamic_richness: witness.is_some(),
        witness_pair: witness,
        strong_richness: rank >= 3,
        rank,
    })
}

fn difference_rank(costs: &CostSequence) -> usize {
    let m = costs.routes();
    let mat = DMatrix::from_fn(costs.days(), m - 1, |t, j| {
        let c = costs.day(t);
        c[j + 1] - c[0]
    });
    let sv = mat.singular_values();
    let largest = sv.iter().copied().fold(0.0, f64::max);
    if largest == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > RANK_TOLERANCE * largest).count()
}
