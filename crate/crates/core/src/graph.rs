//! Per-session heterogeneous graph: merged item nodes, `H` interest nodes,
//! and three typed edge lists carrying bucketed time attributes.

use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::fmt::Write as _;

use crate::dataio::{bucket_interval, SessionRecord};
use crate::error::ConfigError;

#[derive(Clone, Debug, PartialEq)]
pub struct GraphConfig {
    pub interests: usize,
    /// Seconds per time bucket.
    pub bucket_width: u64,
    /// Largest bucket index (the temporal table has `max_step + 1` rows).
    pub max_step: usize,
    pub bidirectional: bool,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            interests: 2,
            bucket_width: 8,
            max_step: 300,
            bidirectional: true,
        }
    }
}

/// Directed item transition `src → dst` with its bucketed interval.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ItemEdge {
    pub src: usize,
    pub dst: usize,
    pub interval: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiInterestGraph {
    /// Vocabulary index of each node, in order of first appearance.
    pub item_nodes: Vec<usize>,
    pub interest_count: usize,
    /// Bucketed offset of each node's latest occurrence from the session start.
    pub relative_steps: Vec<usize>,
    /// Bucketed offset of each node's latest occurrence from the session end.
    pub last_steps: Vec<usize>,
    /// Sorted by `(dst, src)`.
    pub edges_vv: Vec<ItemEdge>,
    /// `(item node, interest)` pairs sorted by interest then item.
    pub edges_vu: Vec<(usize, usize)>,
    /// `(interest, item node)` pairs sorted by item then interest.
    pub edges_uv: Vec<(usize, usize)>,
}

impl MultiInterestGraph {
    pub fn node_count(&self) -> usize {
        self.item_nodes.len()
    }

    /// Whether each node has at least one incoming item-item edge.
    pub fn has_vv_neighbors(&self) -> Vec<bool> {
        let mut has = vec![false; self.node_count()];
        for e in &self.edges_vv {
            has[e.dst] = true;
        }
        has
    }

    /// Text dump of every relation, one block per relation.
    pub fn edge_list_dump(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "[items]");
        for (n, item) in self.item_nodes.iter().enumerate() {
            let _ = writeln!(out, "{n}\t{item}\t{}\t{}", self.relative_steps[n], self.last_steps[n]);
        }
        let _ = writeln!(out, "[v->v]");
        for e in &self.edges_vv {
            let _ = writeln!(out, "{}\t{}\t{}", e.src, e.dst, e.interval);
        }
        let _ = writeln!(out, "[v->u]");
        for (v, u) in &self.edges_vu {
            let _ = writeln!(out, "{v}\t{u}");
        }
        let _ = writeln!(out, "[u->v]");
        for (u, v) in &self.edges_uv {
            let _ = writeln!(out, "{u}\t{v}");
        }
        out
    }
}

pub fn build_graph(session: &SessionRecord, cfg: &GraphConfig) -> Result<MultiInterestGraph, ConfigError> {
    if cfg.interests < 1 {
        return Err(ConfigError::new("at least one interest node is required"));
    }
    if cfg.bucket_width == 0 {
        return Err(ConfigError::new("bucket width must be positive"));
    }
    if session.is_empty() {
        return Err(ConfigError::new("cannot build a graph from an empty session"));
    }
    let (width, m) = (cfg.bucket_width, cfg.max_step);
    let start = session.timestamps[0];
    let end = *session.timestamps.last().expect("non-empty");

    let mut node_of: HashMap<usize, usize> = HashMap::new();
    let mut item_nodes = Vec::new();
    let mut latest: Vec<i64> = Vec::new();
    let mut position_node = Vec::with_capacity(session.len());
    for (&item, &ts) in session.items.iter().zip(&session.timestamps) {
        let node = *node_of.entry(item).or_insert_with(|| {
            item_nodes.push(item);
            latest.push(ts);
            item_nodes.len() - 1
        });
        latest[node] = ts;
        position_node.push(node);
    }

    let mut seen: HashMap<(usize, usize), usize> = HashMap::new();
    let mut forward = Vec::new();
    for k in 0..session.len().saturating_sub(1) {
        let (src, dst) = (position_node[k], position_node[k + 1]);
        if src == dst || seen.contains_key(&(src, dst)) {
            continue;
        }
        let interval = bucket_interval(session.timestamps[k + 1], session.timestamps[k], width, m);
        seen.insert((src, dst), interval);
        forward.push(ItemEdge { src, dst, interval });
    }
    let mut edges_vv = forward.clone();
    if cfg.bidirectional {
        for e in &forward {
            if let Entry::Vacant(slot) = seen.entry((e.dst, e.src)) {
                slot.insert(e.interval);
                edges_vv.push(ItemEdge {
                    src: e.dst,
                    dst: e.src,
                    interval: e.interval,
                });
            }
        }
    }
    edges_vv.sort_by_key(|e| (e.dst, e.src));

    let n = item_nodes.len();
    let h = cfg.interests;
    Ok(MultiInterestGraph {
        relative_steps: latest.iter().map(|&t| bucket_interval(t, start, width, m)).collect(),
        last_steps: latest.iter().map(|&t| bucket_interval(end, t, width, m)).collect(),
        item_nodes,
        interest_count: h,
        edges_vv,
        edges_vu: (0..h).flat_map(|u| (0..n).map(move |v| (v, u))).collect(),
        edges_uv: (0..n).flat_map(|v| (0..h).map(move |u| (u, v))).collect(),
    })
}
