use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub domain_id: u32,
    pub label: String,
    pub sample_count: usize,
    /// Out-degree plus in-degree.
    pub degree: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub from: u32,
    pub to: u32,
    pub distance: f64,
}

/// Directed k-nearest-neighbour graph over domains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeGraph {
    pub k: usize,
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
}

/// Indices of the `k` nearest other rows, ties broken by lower index.
pub fn nearest(dist: &[Vec<f64>], i: usize, k: usize) -> Vec<usize> {
    let mut others: Vec<usize> = (0..dist.len()).filter(|&j| j != i).collect();
    others.sort_by(|&a, &b| dist[i][a].total_cmp(&dist[i][b]).then(a.cmp(&b)));
    others.truncate(k);
    others
}

pub fn knn_graph(dist: &[Vec<f64>], k: usize, nodes: &[(u32, String, usize)]) -> Result<KnowledgeGraph> {
    let n = dist.len();
    if nodes.len() != n || dist.iter().any(|r| r.len() != n) {
        return Err(Error::dim(
            format!("{n} x {n} matrix with {n} nodes"),
            format!("{} nodes", nodes.len()),
        ));
    }
    for (i, row) in dist.iter().enumerate() {
        if row[i] != 0.0 {
            return Err(Error::Precondition(format!("distance diagonal at {i} is {}", row[i])));
        }
        for (j, &d) in row.iter().enumerate() {
            if (d - dist[j][i]).abs() > 1e-9 * d.abs().max(1.0) || d < 0.0 {
                return Err(Error::Precondition(format!(
                    "distance matrix not symmetric non-negative at ({i}, {j})"
                )));
            }
        }
    }
    let mut edges = Vec::new();
    let mut degree = vec![0usize; n];
    for i in 0..n {
        for j in nearest(dist, i, k) {
            degree[i] += 1;
            degree[j] += 1;
            edges.push(GraphEdge {
                from: nodes[i].0,
                to: nodes[j].0,
                distance: dist[i][j],
            });
        }
    }
    Ok(KnowledgeGraph {
        k,
        nodes: nodes
            .iter()
            .zip(degree)
            .map(|((id, label, count), degree)| GraphNode {
                domain_id: *id,
                label: label.clone(),
                sample_count: *count,
                degree,
            })
            .collect(),
        edges,
    })
}

impl KnowledgeGraph {
    pub fn neighbours(&self, id: u32) -> Vec<u32> {
        self.edges.iter().filter(|e| e.from == id).map(|e| e.to).collect()
    }

    pub fn to_dot(&self) -> String {
        let mut s = String::from("digraph domains {\n  node [shape=ellipse];\n");
        for n in &self.nodes {
            let _ = writeln!(
                s,
                "  d{} [label=\"{}\\n{} ({})\"];",
                n.domain_id,
                n.domain_id,
                n.label.replace('"', "'"),
                n.sample_count
            );
        }
        for e in &self.edges {
            let _ = writeln!(s, "  d{} -> d{} [label=\"{:.3}\"];", e.from, e.to, e.distance);
        }
        s.push_str("}\n");
        s
    }
}
