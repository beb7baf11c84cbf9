//! Deterministic DBSCAN over cosine distance.
//!
//! Classic DBSCAN assigns a border point to whichever cluster reaches it
//! first, so the result depends on visiting order. Here the partition is a
//! function of the point set alone:
//!
//! * core points (at least `min_pts` neighbours within `eps`, self included)
//!   are grouped into the connected components of the core-to-core
//!   neighbour graph;
//! * a border point joins, among the components owning a core neighbour,
//!   the one whose smallest core index is lowest;
//! * every other point is an outlier.
//!
//! Cluster ids are then renumbered in order of each cluster's smallest member index.

use serde::{Deserialize, Serialize};

use crate::encoder::{cosine_distance, Embedding};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterParams {
    /// Neighbourhood radius in cosine distance.
    pub eps: f64,
    pub min_pts: usize,
}

impl Default for ClusterParams {
    fn default() -> Self {
        Self { eps: 0.3, min_pts: 2 }
    }
}

impl ClusterParams {
    pub fn new(eps: f64, min_pts: usize) -> Result<Self> {
        let p = Self { eps, min_pts };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps <= 2.0) {
            return Err(Error::invalid("eps", format!("must lie in (0, 2], got {}", self.eps)));
        }
        if self.min_pts == 0 {
            return Err(Error::invalid("min_pts", "must be at least 1"));
        }
        Ok(())
    }
}

/// Per-point cluster assignment; `None` marks an outlier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Clustering {
    pub labels: Vec<Option<usize>>,
    pub num_clusters: usize,
}

impl Clustering {
    pub fn all_outliers(&self) -> bool {
        self.num_clusters == 0
    }

    /// Member indices of every cluster, ordered by cluster id.
    pub fn clusters(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_clusters];
        for (i, label) in self.labels.iter().enumerate() {
            if let Some(c) = label {
                out[*c].push(i);
            }
        }
        out
    }
}

pub fn dbscan(embeddings: &[Embedding], params: &ClusterParams) -> Clustering {
    let n = embeddings.len();
    let neighbours: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| i == j || cosine_distance(&embeddings[i], &embeddings[j]) <= params.eps)
                .collect()
        })
        .collect();
    let is_core: Vec<bool> = neighbours.iter().map(|nb| nb.len() >= params.min_pts).collect();

    // Components of the core graph, discovered in index order so that
    // component ids follow each component's smallest core index.
    let mut component: Vec<Option<usize>> = vec![None; n];
    let mut components = 0;
    for start in 0..n {
        if !is_core[start] || component[start].is_some() {
            continue;
        }
        let id = components;
        components += 1;
        component[start] = Some(id);
        let mut stack = vec![start];
        while let Some(p) = stack.pop() {
            for &q in &neighbours[p] {
                if is_core[q] && component[q].is_none() {
                    component[q] = Some(id);
                    stack.push(q);
                }
            }
        }
    }

    for i in 0..n {
        if is_core[i] {
            continue;
        }
        component[i] = neighbours[i]
            .iter()
            .filter(|&&j| is_core[j])
            .filter_map(|&j| component[j])
            .min();
    }

    // Renumber by smallest member.
    let mut remap: Vec<Option<usize>> = vec![None; components];
    let mut next = 0;
    let labels = component
        .iter()
        .map(|c| {
            c.map(|c| {
                *remap[c].get_or_insert_with(|| {
                    next += 1;
                    next - 1
                })
            })
        })
        .collect();
    Clustering {
        labels,
        num_clusters: components,
    }
}
