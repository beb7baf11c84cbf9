//! Per-prompt semantic consensus.
//!
//! For one public prompt the server clusters the K normalized response
//! embeddings, picks the consensus cluster, and returns one of the submitted
//! responses as the pseudo-label. The rule chain is:
//!
//! 1. consensus cluster: largest non-outlier cluster; ties go to the smallest
//!    average pairwise cosine distance, then to the smallest member index.
//!    If every point is an outlier, all responses form the candidate set.
//! 2. centroid: normalized sum of the member embeddings.
//! 3. representative: member closest to the centroid; ties go to the
//!    shortest response (UTF-8 bytes), then the smallest client index.
//!
//! Two distances are tied when they differ by less than [`TIE_TOLERANCE`].

mod dbscan;

pub use dbscan::{dbscan, ClusterParams, Clustering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clients::ClientId;
use crate::encoder::{cosine_distance, splitmix64, Embedding, ZERO_NORM};
use crate::error::{Error, Result};
use crate::protocol::ResponseRecord;

pub const TIE_TOLERANCE: f64 = 1e-12;

/// How the representative pseudo-label is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SelectionStrategy {
    /// Member of the consensus cluster closest to its normalized centroid.
    #[default]
    CentroidRepresentative,
    /// Uniformly random member of the consensus cluster.
    RandomInMajorityCluster { seed: u64 },
    /// Response with the smallest mean distance to all other responses, ignoring clusters.
    GlobalMedoid,
}

impl SelectionStrategy {
    /// Derive an independent random stream per (round, prompt) so results do
    /// not depend on evaluation order.
    pub fn for_prompt(self, round: u32, prompt_index: usize) -> Self {
        match self {
            SelectionStrategy::RandomInMajorityCluster { seed } => {
                let mixed = splitmix64(seed ^ splitmix64(u64::from(round)) ^ splitmix64(!(prompt_index as u64)));
                SelectionStrategy::RandomInMajorityCluster { seed: mixed }
            }
            other => other,
        }
    }
}

/// Consensus cluster chosen by [`select_consensus_cluster`], as sorted point indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConsensusCluster {
    pub members: Vec<usize>,
    pub fallback_all_outliers: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusResult {
    pub prompt_id: String,
    pub clustering: Clustering,
    /// C*, as client ids.
    pub consensus_members: Vec<ClientId>,
    /// Normalized centroid of C*. `None` only when the members cancel out exactly.
    pub centroid: Option<Embedding>,
    pub representative: ClientId,
    pub pseudo_label: String,
    pub fallback_all_outliers: bool,
    /// Set when the centroid was degenerate and the medoid of C* was used instead.
    #[serde(default)]
    pub centroid_fallback_medoid: bool,
    pub strategy: SelectionStrategy,
}

/// Mean cosine distance over unordered member pairs; 0 for a singleton.
pub fn average_pairwise_distance(members: &[usize], embeddings: &[Embedding]) -> f64 {
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for (a, &i) in members.iter().enumerate() {
        for &j in &members[a + 1..] {
            sum += cosine_distance(&embeddings[i], &embeddings[j]);
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        sum / pairs as f64
    }
}

pub fn select_consensus_cluster(
    clustering: &Clustering,
    embeddings: &[Embedding],
) -> ConsensusCluster {
    let clusters = clustering.clusters();
    if clusters.is_empty() {
        return ConsensusCluster {
            members: (0..clustering.labels.len()).collect(),
            fallback_all_outliers: true,
        };
    }
    let largest = clusters.iter().map(Vec::len).max().unwrap_or(0);
    let candidates: Vec<(&Vec<usize>, f64)> = clusters
        .iter()
        .filter(|c| c.len() == largest)
        .map(|c| (c, average_pairwise_distance(c, embeddings)))
        .collect();
    let tightest = candidates
        .iter()
        .map(|(_, d)| *d)
        .fold(f64::INFINITY, f64::min);
    let members = candidates
        .into_iter()
        .filter(|(_, d)| *d - tightest < TIE_TOLERANCE)
        .map(|(c, _)| c)
        .min_by_key(|c| c[0])
        .expect("at least one candidate cluster")
        .clone();
    ConsensusCluster {
        members,
        fallback_all_outliers: false,
    }
}

pub fn normalized_centroid(members: &[usize], embeddings: &[Embedding]) -> Result<Embedding> {
    let first = members
        .first()
        .ok_or_else(|| Error::invalid("members", "must be non-empty"))?;
    let mut sum = vec![0.0; embeddings[*first].dimension()];
    for &i in members {
        for (s, v) in sum.iter_mut().zip(embeddings[i].values()) {
            *s += v;
        }
    }
    let norm = sum.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < ZERO_NORM {
        return Err(Error::ZeroSum { norm });
    }
    Ok(Embedding::from_normalized_unchecked(
        sum.into_iter().map(|x| x / norm).collect(),
    ))
}

/// Among `scored` (index, score) pairs, keep those within [`TIE_TOLERANCE`]
/// of the minimum score and break the tie by byte length, then index.
fn argmin_with_ties(scored: &[(usize, f64)], responses: &[ResponseRecord]) -> usize {
    let best = scored
        .iter()
        .map(|(_, s)| *s)
        .fold(f64::INFINITY, f64::min);
    scored
        .iter()
        .filter(|(_, s)| *s - best < TIE_TOLERANCE)
        .map(|(i, _)| *i)
        .min_by_key(|&i| (responses[i].byte_len, responses[i].client, i))
        .expect("non-empty candidate set")
}

/// Index (into `embeddings`/`responses`) of the member closest to `centroid`.
pub fn select_representative(
    members: &[usize],
    embeddings: &[Embedding],
    responses: &[ResponseRecord],
    centroid: &Embedding,
) -> usize {
    let scored: Vec<(usize, f64)> = members
        .iter()
        .map(|&i| (i, cosine_distance(&embeddings[i], centroid)))
        .collect();
    argmin_with_ties(&scored, responses)
}

/// Index of the member with the smallest mean distance to the other members.
pub fn select_medoid(
    members: &[usize],
    embeddings: &[Embedding],
    responses: &[ResponseRecord],
) -> usize {
    let scored: Vec<(usize, f64)> = members
        .iter()
        .map(|&i| {
            let others = members.len() - 1;
            let total: f64 = members
                .iter()
                .filter(|&&j| j != i)
                .map(|&j| cosine_distance(&embeddings[i], &embeddings[j]))
                .sum();
            (i, if others == 0 { 0.0 } else { total / others as f64 })
        })
        .collect();
    argmin_with_ties(&scored, responses)
}

fn check_inputs(responses: &[ResponseRecord], embeddings: &[Embedding]) -> Result<()> {
    if responses.is_empty() {
        return Err(Error::invalid("responses", "at least one response is required"));
    }
    if responses.len() != embeddings.len() {
        return Err(Error::invalid(
            "embeddings",
            format!(
                "{} embeddings for {} responses",
                embeddings.len(),
                responses.len()
            ),
        ));
    }
    let dimension = embeddings[0].dimension();
    if let Some(e) = embeddings.iter().find(|e| e.dimension() != dimension) {
        return Err(Error::DimensionMismatch {
            expected: dimension,
            actual: e.dimension(),
        });
    }
    if responses.windows(2).any(|w| w[0].client >= w[1].client) {
        return Err(Error::invalid(
            "responses",
            "must be sorted by strictly increasing client id",
        ));
    }
    Ok(())
}

/// Run the full consensus pipeline for one prompt.
///
/// `responses` must be ordered by client id and `embeddings[i]` must belong
/// to `responses[i]`.
pub fn consensus_for_prompt(
    responses: &[ResponseRecord],
    embeddings: &[Embedding],
    params: &ClusterParams,
    strategy: SelectionStrategy,
) -> Result<ConsensusResult> {
    check_inputs(responses, embeddings)?;
    params.validate()?;
    let clustering = dbscan(embeddings, params);

    let (cluster, centroid, representative, centroid_fallback_medoid) = match strategy {
        SelectionStrategy::CentroidRepresentative => {
            let cluster = select_consensus_cluster(&clustering, embeddings);
            match normalized_centroid(&cluster.members, embeddings) {
                Ok(c) => {
                    let rep = select_representative(&cluster.members, embeddings, responses, &c);
                    (cluster, Some(c), rep, false)
                }
                Err(Error::ZeroSum { .. }) => {
                    let rep = select_medoid(&cluster.members, embeddings, responses);
                    (cluster, None, rep, true)
                }
                Err(e) => return Err(e),
            }
        }
        SelectionStrategy::RandomInMajorityCluster { seed } => {
            let cluster = select_consensus_cluster(&clustering, embeddings);
            let centroid = normalized_centroid(&cluster.members, embeddings).ok();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rep = cluster.members[rng.random_range(0..cluster.members.len())];
            (cluster, centroid, rep, false)
        }
        SelectionStrategy::GlobalMedoid => {
            let cluster = ConsensusCluster {
                members: (0..embeddings.len()).collect(),
                fallback_all_outliers: false,
            };
            let centroid = normalized_centroid(&cluster.members, embeddings).ok();
            let rep = select_medoid(&cluster.members, embeddings, responses);
            (cluster, centroid, rep, false)
        }
    };

    Ok(ConsensusResult {
        prompt_id: responses[0].prompt_id.clone(),
        consensus_members: cluster.members.iter().map(|&i| responses[i].client).collect(),
        centroid,
        representative: responses[representative].client,
        pseudo_label: responses[representative].text.clone(),
        fallback_all_outliers: cluster.fallback_all_outliers,
        centroid_fallback_medoid,
        clustering,
        strategy,
    })
}
