//! Embedding database and retrieval-driven graph construction.
//!
//! A graph is N node ids: node 0 is the anchor (training) or the query
//! (inference), and the remaining N-1 nodes come either from a strided
//! subsample of the nearest neighbors in embedding space or, for the
//! random-graph baseline, from uniform sampling.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::pose::Pose;

/// One database entry: retrieval embedding (unit L2 norm), node feature
/// vector, and, when known, the absolute camera pose.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub retrieval_embedding: Vec<f64>,
    pub feature_vector: Vec<f64>,
    pub pose: Option<Pose>,
}

/// Immutable, dimension-checked collection of [`ImageRecord`]s with id
/// lookup. Construction validates uniqueness, consistent dimensions, and
/// unit-norm retrieval embeddings.
#[derive(Debug, Clone)]
pub struct EmbeddingDatabase {
    records: Vec<ImageRecord>,
    by_id: HashMap<String, usize>,
    embedding_dim: usize,
    feature_dim: usize,
}

impl EmbeddingDatabase {
    pub fn from_records(records: Vec<ImageRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyInput("embedding database"));
        }
        let embedding_dim = records[0].retrieval_embedding.len();
        let feature_dim = records[0].feature_vector.len();
        let mut by_id = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if r.retrieval_embedding.len() != embedding_dim
                || r.feature_vector.len() != feature_dim
            {
                return Err(Error::DimensionMismatch(format!(
                    "record {} has dims {}/{}, expected {}/{}",
                    r.id,
                    r.retrieval_embedding.len(),
                    r.feature_vector.len(),
                    embedding_dim,
                    feature_dim
                )));
            }
            let norm = l2_norm(&r.retrieval_embedding);
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidArgument(format!(
                    "record {} retrieval embedding norm {norm}, expected unit",
                    r.id
                )));
            }
            if by_id.insert(r.id.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "duplicate record id {}",
                    r.id
                )));
            }
        }
        Ok(EmbeddingDatabase {
            records,
            by_id,
            embedding_dim,
            feature_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn get(&self, index: usize) -> &ImageRecord {
        &self.records[index]
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    /// Errors unless every record carries a pose (required for training
    /// databases, where each node contributes relative-pose targets).
    pub fn require_poses(&self) -> Result<()> {
        for r in &self.records {
            if r.pose.is_none() {
                return Err(Error::InvalidArgument(format!(
                    "record {} has no pose",
                    r.id
                )));
            }
        }
        Ok(())
    }
}

/// Node list for one graph. Node 0 is the anchor or query; `neighbors` are
/// database indices for nodes 1..N in retrieval order.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphSpec {
    pub node_ids: Vec<String>,
    pub neighbors: Vec<usize>,
    pub is_query_graph: bool,
}

impl GraphSpec {
    pub fn n_nodes(&self) -> usize {
        self.neighbors.len() + 1
    }
}

/// Indices of the `count` records most similar to `query` by cosine, most
/// similar first. Ties break toward the lower database index; `exclude`
/// (an id) is never returned. Embeddings are unit-norm, so the dot product
/// is the cosine up to the query's own scale, which cannot change the order.
pub fn knn(
    db: &EmbeddingDatabase,
    query: &[f64],
    count: usize,
    exclude: Option<&str>,
) -> Result<Vec<usize>> {
    if query.len() != db.embedding_dim() {
        return Err(Error::DimensionMismatch(format!(
            "query embedding dim {}, database dim {}",
            query.len(),
            db.embedding_dim()
        )));
    }
    let excluded = exclude.and_then(|id| db.index_of(id));
    let available = db.len() - usize::from(excluded.is_some());
    if count > available {
        return Err(Error::DatabaseTooSmall {
            needed: count,
            available,
        });
    }
    let mut scored: Vec<(usize, f64)> = (0..db.len())
        .filter(|&i| Some(i) != excluded)
        .map(|i| (i, dot(query, &db.get(i).retrieval_embedding)))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(count);
    Ok(scored.into_iter().map(|(i, _)| i).collect())
}

/// Every `stride`-th element of a ranked candidate list starting at
/// `offset`: positions offset, offset+stride, ..., offset+(n_nodes-2)*stride.
///
/// When the pool is too small for that stride, the stride shrinks to
/// `pool / (n_nodes - 1)` (at least 1) and the offset is reduced modulo the
/// shrunken stride; only a pool smaller than n_nodes - 1 is an error.
pub fn strided_subsample(
    sorted: &[usize],
    n_nodes: usize,
    stride: usize,
    offset: usize,
) -> Result<Vec<usize>> {
    if n_nodes < 2 {
        return Err(Error::InvalidArgument(format!(
            "graph needs at least 2 nodes, got {n_nodes}"
        )));
    }
    if stride == 0 || offset >= stride {
        return Err(Error::InvalidArgument(format!(
            "offset {offset} out of range for stride {stride}"
        )));
    }
    let picks = n_nodes - 1;
    let (step, start) = if sorted.len() >= picks * stride {
        (stride, offset)
    } else {
        if sorted.len() < picks {
            return Err(Error::DatabaseTooSmall {
                needed: picks,
                available: sorted.len(),
            });
        }
        let step = (sorted.len() / picks).max(1);
        (step, offset % step)
    };
    Ok((0..picks).map(|m| sorted[start + m * step]).collect())
}

/// Training graph around an anchor image: retrieve the (N-1)*K most
/// similar records (capped at what the database holds), subsample with a
/// random stride offset in [0, K), and put the anchor at node 0.
pub fn build_training_graph(
    db: &EmbeddingDatabase,
    anchor_id: &str,
    n_nodes: usize,
    stride: usize,
    rng: &mut impl Rng,
) -> Result<GraphSpec> {
    let anchor = db
        .index_of(anchor_id)
        .ok_or_else(|| Error::UnknownId(anchor_id.to_string()))?;
    let want = ((n_nodes - 1) * stride).min(db.len() - 1);
    let pool = knn(
        db,
        &db.get(anchor).retrieval_embedding,
        want,
        Some(anchor_id),
    )?;
    let offset = rng.random_range(0..stride);
    let neighbors = strided_subsample(&pool, n_nodes, stride, offset)?;
    Ok(spec_from(db, anchor_id.to_string(), neighbors, false))
}

/// Query graph: identical retrieval but a fixed offset of 0, with the
/// (typically out-of-database) query at node 0.
pub fn build_query_graph(
    db: &EmbeddingDatabase,
    query_id: &str,
    query_embedding: &[f64],
    n_nodes: usize,
    stride: usize,
) -> Result<GraphSpec> {
    let want = ((n_nodes - 1) * stride).min(db.len());
    let pool = knn(db, query_embedding, want, None)?;
    let neighbors = strided_subsample(&pool, n_nodes, stride, 0)?;
    Ok(spec_from(db, query_id.to_string(), neighbors, true))
}

/// Random-graph baseline: N-1 distinct neighbors drawn uniformly without
/// replacement, anchor excluded.
pub fn build_random_graph(
    db: &EmbeddingDatabase,
    anchor_id: &str,
    n_nodes: usize,
    rng: &mut impl Rng,
) -> Result<GraphSpec> {
    let anchor = db
        .index_of(anchor_id)
        .ok_or_else(|| Error::UnknownId(anchor_id.to_string()))?;
    let candidates: Vec<usize> = (0..db.len()).filter(|&i| i != anchor).collect();
    let neighbors = sample_without_replacement(candidates, n_nodes - 1, rng)?;
    Ok(spec_from(db, anchor_id.to_string(), neighbors, false))
}

/// Random query graph for evaluating the random-graph baseline: N-1
/// database records drawn uniformly, query at node 0.
pub fn build_random_query_graph(
    db: &EmbeddingDatabase,
    query_id: &str,
    n_nodes: usize,
    rng: &mut impl Rng,
) -> Result<GraphSpec> {
    let candidates: Vec<usize> = (0..db.len()).collect();
    let neighbors = sample_without_replacement(candidates, n_nodes - 1, rng)?;
    Ok(spec_from(db, query_id.to_string(), neighbors, true))
}

fn sample_without_replacement(
    mut candidates: Vec<usize>,
    picks: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    if candidates.len() < picks {
        return Err(Error::DatabaseTooSmall {
            needed: picks,
            available: candidates.len(),
        });
    }
    // partial Fisher-Yates: the first `picks` slots end up uniform
    for m in 0..picks {
        let j = rng.random_range(m..candidates.len());
        candidates.swap(m, j);
    }
    candidates.truncate(picks);
    Ok(candidates)
}

fn spec_from(
    db: &EmbeddingDatabase,
    head_id: String,
    neighbors: Vec<usize>,
    is_query_graph: bool,
) -> GraphSpec {
    let mut node_ids = Vec::with_capacity(neighbors.len() + 1);
    node_ids.push(head_id);
    node_ids.extend(neighbors.iter().map(|&i| db.get(i).id.clone()));
    GraphSpec {
        node_ids,
        neighbors,
        is_query_graph,
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}
