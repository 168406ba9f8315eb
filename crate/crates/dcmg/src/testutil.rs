//! Shared fixtures and generators for the unit tests.

use proptest::prelude::*;

use crate::network::LineEdge;

/// Edge list of the six-bus meshed benchmark network (lines 1-3, 1-2, 3-4,
/// 2-4, 4-5, 1-6, 6-5 in 1-based labels), uniform line parameters.
pub fn six_bus_edges(resistance: f64, inductance: f64) -> Vec<LineEdge> {
    [(0, 2), (0, 1), (2, 3), (1, 3), (3, 4), (0, 5), (5, 4)]
        .iter()
        .map(|&(source, sink)| LineEdge {
            source,
            sink,
            resistance,
            inductance,
        })
        .collect()
}

/// Ring-topology communication links with a uniform weight.
pub fn ring_links(node_count: usize, weight: f64) -> Vec<(usize, usize, f64)> {
    (0..node_count)
        .map(|i| (i, (i + 1) % node_count, weight))
        .collect()
}

/// Random connected graph: a random spanning tree plus optional extra edges.
pub fn arb_connected_pairs(
    max_nodes: usize,
) -> impl Strategy<Value = (usize, Vec<(usize, usize)>)> {
    (2..=max_nodes).prop_flat_map(|n| {
        let tree = proptest::collection::vec(0..1_000_000usize, n - 1);
        let extras = proptest::collection::vec((0..n, 0..n), 0..n);
        (tree, extras).prop_map(move |(parents, extras)| {
            let mut edges: Vec<(usize, usize)> = parents
                .iter()
                .enumerate()
                .map(|(k, &p)| (k + 1, p % (k + 1)))
                .collect();
            for (a, b) in extras {
                if a != b && !edges.contains(&(a, b)) && !edges.contains(&(b, a)) {
                    edges.push((a, b));
                }
            }
            (n, edges)
        })
    })
}
