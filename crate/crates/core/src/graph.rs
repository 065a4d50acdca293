//! Undirected interference graphs over panel units.

use std::collections::{BTreeMap, VecDeque};
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Symmetric adjacency over dense unit indices. Neighbor lists are sorted and
/// free of duplicates and self-loops. `weights[i][n]` belongs to the edge
/// `(i, adjacency[i][n])` and is 1 unless an edge list supplied one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkGraph {
    adjacency: Vec<Vec<usize>>,
    weights: Vec<Vec<f64>>,
}

impl NetworkGraph {
    /// Builds a graph from undirected weighted edges. Duplicate edges collapse
    /// onto the first weight seen.
    pub fn from_edges(n: usize, edges: &[(usize, usize, f64)]) -> Result<Self> {
        let mut maps: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); n];
        for &(i, j, w) in edges {
            if i >= n || j >= n {
                return Err(Error::UnknownUnit(format!("{}", i.max(j))));
            }
            if i == j {
                return Err(Error::SelfLoop(format!("{i}")));
            }
            maps[i].entry(j).or_insert(w);
            let w_ij = maps[i][&j];
            maps[j].entry(i).or_insert(w_ij);
        }
        let adjacency = maps.iter().map(|m| m.keys().copied().collect()).collect();
        let weights = maps.iter().map(|m| m.values().copied().collect()).collect();
        Ok(NetworkGraph { adjacency, weights })
    }

    pub fn edgeless(n: usize) -> Self {
        NetworkGraph {
            adjacency: vec![Vec::new(); n],
            weights: vec![Vec::new(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.adjacency.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adjacency.is_empty()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adjacency[i]
    }

    pub fn edge_weights(&self, i: usize) -> &[f64] {
        &self.weights[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adjacency[i].len()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Units at shortest-path distance exactly `s` from `i`, sorted.
    pub fn rings(&self, i: usize, s: usize) -> Vec<usize> {
        let mut rings = self.rings_up_to(i, s);
        rings.pop().unwrap_or_default()
    }

    /// All rings `0..=max_s` around `i`; trailing rings may be empty.
    pub fn rings_up_to(&self, i: usize, max_s: usize) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); max_s + 1];
        let mut dist = BTreeMap::new();
        dist.insert(i, 0usize);
        let mut queue = VecDeque::from([i]);
        while let Some(u) = queue.pop_front() {
            let du = dist[&u];
            out[du].push(u);
            if du == max_s {
                continue;
            }
            for &v in &self.adjacency[u] {
                if let std::collections::btree_map::Entry::Vacant(e) = dist.entry(v) {
                    e.insert(du + 1);
                    queue.push_back(v);
                }
            }
        }
        for ring in &mut out {
            ring.sort_unstable();
        }
        out
    }

    /// Smallest `s` such that every ring at distance `s` is empty, i.e. one
    /// past the largest eccentricity over all components.
    pub fn ring_cap(&self) -> usize {
        let mut cap = 1;
        for i in 0..self.len() {
            let mut dist = vec![usize::MAX; self.len()];
            dist[i] = 0;
            let mut queue = VecDeque::from([i]);
            let mut ecc = 0;
            while let Some(u) = queue.pop_front() {
                for &v in &self.adjacency[u] {
                    if dist[v] == usize::MAX {
                        dist[v] = dist[u] + 1;
                        ecc = ecc.max(dist[v]);
                        queue.push_back(v);
                    }
                }
            }
            cap = cap.max(ecc + 1);
        }
        cap
    }

    pub fn is_symmetric(&self) -> bool {
        self.adjacency.iter().enumerate().all(|(i, nbrs)| {
            nbrs.iter()
                .all(|&j| j != i && self.adjacency[j].binary_search(&i).is_ok())
        })
    }
}

/// Units on a line, each adjacent to its immediate predecessor and successor.
pub fn line_graph(n: usize) -> Result<NetworkGraph> {
    if n < 2 {
        return Err(Error::InvalidSize(format!("line graph needs n >= 2, got {n}")));
    }
    let edges: Vec<_> = (1..n).map(|i| (i - 1, i, 1.0)).collect();
    NetworkGraph::from_edges(n, &edges)
}

/// Rook-adjacency grid with `rows * cols` units, row-major indexing.
pub fn grid_graph(rows: usize, cols: usize) -> Result<NetworkGraph> {
    if rows * cols < 2 {
        return Err(Error::InvalidSize(format!("grid {rows}x{cols} has fewer than 2 units")));
    }
    let mut edges = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            if c + 1 < cols {
                edges.push((i, i + 1, 1.0));
            }
            if r + 1 < rows {
                edges.push((i, i + cols, 1.0));
            }
        }
    }
    NetworkGraph::from_edges(rows * cols, &edges)
}

/// Set of units at graph distance exactly `s` from `i`.
pub fn graph_rings(graph: &NetworkGraph, i: usize, s: usize) -> Vec<usize> {
    graph.rings(i, s)
}

/// Reads a whitespace-separated edge list: `i j [weight]` per line. Blank
/// lines and `#` comments are skipped. Ids must appear in `units`.
pub fn load_graph<R: BufRead>(source: R, units: &[String]) -> Result<NetworkGraph> {
    let index: BTreeMap<&str, usize> = units
        .iter()
        .enumerate()
        .map(|(i, u)| (u.as_str(), i))
        .collect();
    let mut edges = Vec::new();
    for (lineno, line) in source.lines().enumerate() {
        let line = line?;
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let fields: Vec<&str> = body.split_whitespace().collect();
        if fields.len() < 2 || fields.len() > 3 {
            return Err(Error::Parse {
                row: lineno + 1,
                column: "edge".into(),
                message: format!("expected `i j [weight]`, got `{body}`"),
            });
        }
        let lookup = |id: &str| {
            index
                .get(id)
                .copied()
                .ok_or_else(|| Error::UnknownUnit(id.to_string()))
        };
        let i = lookup(fields[0])?;
        let j = lookup(fields[1])?;
        if i == j {
            return Err(Error::SelfLoop(fields[0].to_string()));
        }
        let w = match fields.get(2) {
            Some(w) => w.parse::<f64>().map_err(|_| Error::Parse {
                row: lineno + 1,
                column: "weight".into(),
                message: format!("`{w}` is not a number"),
            })?,
            None => 1.0,
        };
        edges.push((i, j, w));
    }
    NetworkGraph::from_edges(units.len(), &edges)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (1..=n).map(|i| i.to_string()).collect()
    }

    #[test]
    fn edge_list_is_symmetrized() {
        let g = load_graph("1 2\n2 3\n".as_bytes(), &ids(3)).unwrap();
        assert_eq!(g.neighbors(1), &[0, 2]);
        assert_eq!(g.neighbors(0), &[1]);
        assert!(g.is_symmetric());
    }

    #[test]
    fn self_loop_rejected() {
        let err = load_graph("1 1\n".as_bytes(), &ids(3)).unwrap_err();
        assert_eq!(err.code(), "SelfLoop");
    }

    #[test]
    fn duplicate_edges_collapse() {
        let g = load_graph("1 2\n2 1\n# comment\n\n".as_bytes(), &ids(2)).unwrap();
        assert_eq!(g.edge_count(), 1);
        assert_eq!(g.neighbors(0), &[1]);
    }

    #[test]
    fn unknown_unit_rejected() {
        let err = load_graph("1 9\n".as_bytes(), &ids(3)).unwrap_err();
        assert_eq!(err, Error::UnknownUnit("9".into()));
    }

    #[test]
    fn line_graph_shapes() {
        let g = line_graph(3).unwrap();
        assert_eq!(g.neighbors(0), &[1]);
        assert_eq!(g.neighbors(1), &[0, 2]);
        assert_eq!(g.neighbors(2), &[1]);
        let g = line_graph(2).unwrap();
        assert_eq!(g.neighbors(0), &[1]);
        assert_eq!(g.neighbors(1), &[0]);
        assert_eq!(line_graph(1).unwrap_err().code(), "InvalidSize");
    }

    #[test]
    fn large_line_interior_degree_two() {
        let g = line_graph(5000).unwrap();
        assert!((1..4999).all(|i| g.degree(i) == 2));
        assert_eq!(g.degree(0), 1);
        assert_eq!(g.degree(4999), 1);
        assert_eq!(g.edge_count(), 4999);
    }

    #[test]
    fn rings_on_line() {
        let g = line_graph(5).unwrap();
        assert_eq!(graph_rings(&g, 2, 2), vec![0, 4]);
        assert_eq!(graph_rings(&g, 2, 0), vec![2]);
        assert_eq!(g.ring_cap(), 5);
    }

    #[test]
    fn disconnected_unit_has_empty_rings() {
        let g = NetworkGraph::from_edges(3, &[(0, 1, 1.0)]).unwrap();
        assert!(graph_rings(&g, 2, 1).is_empty());
    }

    #[test]
    fn grid_neighbors() {
        let g = grid_graph(3, 3).unwrap();
        assert_eq!(g.neighbors(4), &[1, 3, 5, 7]);
        assert_eq!(g.edge_count(), 12);
    }
}
