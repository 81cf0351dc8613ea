//! The pose-regression models.
//!
//! The main model runs message passing over a fully-connected image graph:
//! node features start from the per-image feature vectors, ordered edge
//! features are projected from node pairs, and each round updates edges,
//! turns them into attention-refined messages, aggregates by mean, and
//! updates nodes. A linear head reads each ordered edge feature as a 6-D
//! relative pose (translation plus rotation-log). A second model kind skips
//! the graph entirely and regresses each pair's relative pose from the
//! concatenated node features through a plain MLP stack; it serves as the
//! no-message-passing reference point.
//!
//! All compute builds onto a [`Tape`], so gradients come from the same
//! graph the forward pass ran on. Weights are shared across rounds. Edge
//! activity is controlled by a symmetric per-undirected-pair [`EdgeMask`]:
//! inactive edges keep their features frozen and contribute no messages
//! and no predictions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::retrieval::{EmbeddingDatabase, GraphSpec, ImageRecord};
use crate::tensor::{Matrix, NodeId, ParamId, ParamSet, Tape};

/// Width and depth of the message-passing model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    /// Node and edge feature width C.
    pub width: usize,
    /// Attention down-sampling factor n; attention works in width C/n.
    pub attn_factor: usize,
    /// Message-passing rounds R, weights shared across rounds.
    pub rounds: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            width: 32,
            attn_factor: 4,
            rounds: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.attn_factor == 0 {
            return Err(Error::InvalidArgument(
                "model width and attention factor must be positive".into(),
            ));
        }
        if self.width % self.attn_factor != 0 {
            return Err(Error::InvalidArgument(format!(
                "width {} is not divisible by attention factor {}",
                self.width, self.attn_factor
            )));
        }
        if self.rounds == 0 {
            return Err(Error::InvalidArgument(
                "at least one message-passing round is required".into(),
            ));
        }
        Ok(())
    }

    fn attn_width(&self) -> usize {
        self.width / self.attn_factor
    }
}

/// Which regression architecture a model uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    /// Graph message passing with attention, then a linear edge head.
    MessagePassing,
    /// Per-pair MLP on concatenated node features; no graph structure.
    PairwiseMlp,
}

/// Number of ordered (directional) edges in a fully-connected graph.
pub fn ordered_edge_count(n_nodes: usize) -> usize {
    n_nodes * n_nodes.saturating_sub(1)
}

/// Number of undirected node pairs.
pub fn undirected_pair_count(n_nodes: usize) -> usize {
    n_nodes * n_nodes.saturating_sub(1) / 2
}

/// Dense index of the ordered edge (i, j), i != j, in row-major order with
/// the diagonal removed.
pub fn ordered_slot(i: usize, j: usize, n_nodes: usize) -> usize {
    debug_assert!(i != j && i < n_nodes && j < n_nodes);
    i * (n_nodes - 1) + j - usize::from(j > i)
}

/// Endpoints (i, j) of an ordered slot; inverse of [`ordered_slot`].
pub fn slot_endpoints(slot: usize, n_nodes: usize) -> (usize, usize) {
    let i = slot / (n_nodes - 1);
    let r = slot % (n_nodes - 1);
    let j = if r >= i { r + 1 } else { r };
    (i, j)
}

/// Dense index of the undirected pair {i, j} in lexicographic order over
/// i < j.
pub fn pair_index(i: usize, j: usize, n_nodes: usize) -> usize {
    debug_assert!(i != j && i < n_nodes && j < n_nodes);
    let (a, b) = if i < j { (i, j) } else { (j, i) };
    a * n_nodes - a * (a + 1) / 2 + (b - a - 1)
}

/// Symmetric activity mask over the undirected pairs of one graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeMask {
    n_nodes: usize,
    active: Vec<bool>,
}

impl EdgeMask {
    pub fn full(n_nodes: usize) -> Self {
        EdgeMask {
            n_nodes,
            active: vec![true; undirected_pair_count(n_nodes)],
        }
    }

    pub fn empty(n_nodes: usize) -> Self {
        EdgeMask {
            n_nodes,
            active: vec![false; undirected_pair_count(n_nodes)],
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn is_active(&self, i: usize, j: usize) -> bool {
        self.active[pair_index(i, j, self.n_nodes)]
    }

    pub fn set(&mut self, i: usize, j: usize, active: bool) {
        let idx = pair_index(i, j, self.n_nodes);
        self.active[idx] = active;
    }

    pub fn active_pair_count(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    /// Neighbors j of node i over active pairs, ascending.
    pub fn active_neighbors(&self, i: usize) -> Vec<usize> {
        (0..self.n_nodes)
            .filter(|&j| j != i && self.is_active(i, j))
            .collect()
    }
}

struct GnnIds {
    proj_w: ParamId,
    proj_b: ParamId,
    edge_w1: ParamId,
    edge_b1: ParamId,
    edge_w2: ParamId,
    edge_b2: ParamId,
    msg_w1: ParamId,
    msg_b1: ParamId,
    msg_w2: ParamId,
    msg_b2: ParamId,
    upd_w1: ParamId,
    upd_b1: ParamId,
    upd_w2: ParamId,
    upd_b2: ParamId,
    attn_theta: ParamId,
    attn_phi: ParamId,
    attn_f: ParamId,
    attn_g: ParamId,
    pose_w: ParamId,
    pose_b: ParamId,
    loss_beta: ParamId,
    loss_gamma: ParamId,
}

struct MlpIds {
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
    fc3_w: ParamId,
    fc3_b: ParamId,
    head_w: ParamId,
    head_b: ParamId,
    loss_beta: ParamId,
    loss_gamma: ParamId,
}

enum Blocks {
    Gnn(GnnIds),
    Mlp(MlpIds),
}

/// A pose-regression model: configuration, architecture kind, and the
/// parameter set holding every learnable block (including the two learned
/// loss-balance scalars).
pub struct Model {
    config: ModelConfig,
    kind: ModelKind,
    params: ParamSet,
    blocks: Blocks,
}

fn uniform(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let bound = scale / (cols as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| (2.0 * rng.random::<f64>() - 1.0) * bound)
}

impl Model {
    /// Seeded initialization. Weights are uniform within +-1/sqrt(fan_in);
    /// biases start at zero; the attention output projection starts at zero
    /// so the residual attention block begins as a pass-through; the pose
    /// head is scaled down so initial predictions are near zero; the loss
    /// balance scalars start at 0 (translation) and -3 (rotation).
    pub fn init(config: ModelConfig, kind: ModelKind, rng: &mut ChaCha8Rng) -> Result<Model> {
        config.validate()?;
        let c = config.width;
        let a = config.attn_width();
        let mut p = ParamSet::new();
        let blocks = match kind {
            ModelKind::MessagePassing => Blocks::Gnn(GnnIds {
                proj_w: p.add("proj_w", uniform(c, 2 * c, 1.0, rng)),
                proj_b: p.add("proj_b", Matrix::zeros(c, 1)),
                edge_w1: p.add("edge_w1", uniform(c, 3 * c, 1.0, rng)),
                edge_b1: p.add("edge_b1", Matrix::zeros(c, 1)),
                edge_w2: p.add("edge_w2", uniform(c, c, 1.0, rng)),
                edge_b2: p.add("edge_b2", Matrix::zeros(c, 1)),
                msg_w1: p.add("msg_w1", uniform(c, 2 * c, 1.0, rng)),
                msg_b1: p.add("msg_b1", Matrix::zeros(c, 1)),
                msg_w2: p.add("msg_w2", uniform(c, c, 1.0, rng)),
                msg_b2: p.add("msg_b2", Matrix::zeros(c, 1)),
                upd_w1: p.add("upd_w1", uniform(c, 2 * c, 1.0, rng)),
                upd_b1: p.add("upd_b1", Matrix::zeros(c, 1)),
                upd_w2: p.add("upd_w2", uniform(c, c, 1.0, rng)),
                upd_b2: p.add("upd_b2", Matrix::zeros(c, 1)),
                attn_theta: p.add("attn_theta", uniform(a, c, 1.0, rng)),
                attn_phi: p.add("attn_phi", uniform(a, c, 1.0, rng)),
                attn_f: p.add("attn_f", uniform(a, c, 1.0, rng)),
                attn_g: p.add("attn_g", Matrix::zeros(c, a)),
                pose_w: p.add("pose_w", uniform(6, c, 0.01, rng)),
                pose_b: p.add("pose_b", Matrix::zeros(6, 1)),
                loss_beta: p.add("loss_beta", Matrix::scalar(0.0)),
                loss_gamma: p.add("loss_gamma", Matrix::scalar(-3.0)),
            }),
            ModelKind::PairwiseMlp => Blocks::Mlp(MlpIds {
                fc1_w: p.add("fc1_w", uniform(2 * c, 2 * c, 1.0, rng)),
                fc1_b: p.add("fc1_b", Matrix::zeros(2 * c, 1)),
                fc2_w: p.add("fc2_w", uniform(c, 2 * c, 1.0, rng)),
                fc2_b: p.add("fc2_b", Matrix::zeros(c, 1)),
                fc3_w: p.add("fc3_w", uniform(c, c, 1.0, rng)),
                fc3_b: p.add("fc3_b", Matrix::zeros(c, 1)),
                head_w: p.add("head_w", uniform(6, c, 0.01, rng)),
                head_b: p.add("head_b", Matrix::zeros(6, 1)),
                loss_beta: p.add("loss_beta", Matrix::scalar(0.0)),
                loss_gamma: p.add("loss_gamma", Matrix::scalar(-3.0)),
            }),
        };
        Ok(Model {
            config,
            kind,
            params: p,
            blocks,
        })
    }

    /// Rebuilds a model around a parameter set restored from a checkpoint.
    /// The set must contain exactly the blocks `init` would create.
    pub fn from_params(config: ModelConfig, kind: ModelKind, params: ParamSet) -> Result<Model> {
        config.validate()?;
        let mut fresh = Model::init(config, kind, &mut ChaCha8Rng::seed_from_u64(0))?;
        if fresh.params.len() != params.len() {
            return Err(Error::ConfigMismatch(format!(
                "expected {} parameter blocks, found {}",
                fresh.params.len(),
                params.len()
            )));
        }
        for id in fresh.params.ids() {
            let name = fresh.params.name(id);
            let found = params
                .find(name)
                .ok_or_else(|| Error::ConfigMismatch(format!("missing parameter block {name}")))?;
            if found != id {
                return Err(Error::ConfigMismatch(format!(
                    "parameter block {name} out of order"
                )));
            }
            if !fresh.params.value(id).same_shape(params.value(id)) {
                return Err(Error::ConfigMismatch(format!(
                    "parameter block {name} has the wrong shape"
                )));
            }
        }
        fresh.params = params;
        Ok(fresh)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Ids of the learned loss-balance scalars (translation, rotation).
    pub fn loss_weight_ids(&self) -> (ParamId, ParamId) {
        match &self.blocks {
            Blocks::Gnn(ids) => (ids.loss_beta, ids.loss_gamma),
            Blocks::Mlp(ids) => (ids.loss_beta, ids.loss_gamma),
        }
    }

    fn gnn(&self) -> &GnnIds {
        match &self.blocks {
            Blocks::Gnn(ids) => ids,
            Blocks::Mlp(_) => panic!("graph operation invoked on a pairwise MLP model"),
        }
    }

    fn mlp2(
        &self,
        tape: &mut Tape,
        w1: ParamId,
        b1: ParamId,
        w2: ParamId,
        b2: ParamId,
        x: NodeId,
    ) -> NodeId {
        let h = tape.linear(w1, Some(b1), x);
        let h = tape.relu(h);
        let out = tape.linear(w2, Some(b2), h);
        tape.relu(out)
    }

    /// Projects every ordered node pair into an initial edge feature,
    /// active or not: e_ij = relu(W [x_i; x_j] + b).
    pub fn init_edges(&self, tape: &mut Tape, features: &[NodeId]) -> Vec<NodeId> {
        let ids = self.gnn();
        let n = features.len();
        let mut edges = Vec::with_capacity(ordered_edge_count(n));
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let cat = tape.concat(&[features[i], features[j]]);
                let lin = tape.linear(ids.proj_w, Some(ids.proj_b), cat);
                edges.push(tape.relu(lin));
            }
        }
        edges
    }

    /// Residual non-local refinement of one message: the message is
    /// compressed to width C/n, mixed through a softmax attention map built
    /// from two learned views of itself, projected back up, and added onto
    /// the input.
    pub fn attention(&self, tape: &mut Tape, m: NodeId) -> NodeId {
        let ids = self.gnn();
        let th = tape.linear(ids.attn_theta, None, m);
        let ph = tape.linear(ids.attn_phi, None, m);
        let scores = tape.outer(th, ph);
        let a = tape.softmax_rows(scores);
        let fm = tape.linear(ids.attn_f, None, m);
        let mixed = tape.matmul(a, fm);
        let up = tape.linear(ids.attn_g, None, mixed);
        tape.add(m, up)
    }

    /// One synchronous message-passing round. Active edges update from the
    /// pre-round node features; messages read the updated edges and
    /// pre-round nodes; each node aggregates its incoming attention-refined
    /// messages by mean (zero vector when isolated) and updates.
    pub fn round(
        &self,
        tape: &mut Tape,
        nodes: &mut [NodeId],
        edges: &mut [NodeId],
        mask: &EdgeMask,
    ) {
        let ids = self.gnn();
        let n = nodes.len();
        debug_assert_eq!(mask.n_nodes(), n);
        debug_assert_eq!(edges.len(), ordered_edge_count(n));

        let mut new_edges: Vec<NodeId> = edges.to_vec();
        for i in 0..n {
            for j in 0..n {
                if i == j || !mask.is_active(i, j) {
                    continue;
                }
                let s = ordered_slot(i, j, n);
                let cat = tape.concat(&[edges[s], nodes[i], nodes[j]]);
                new_edges[s] =
                    self.mlp2(tape, ids.edge_w1, ids.edge_b1, ids.edge_w2, ids.edge_b2, cat);
            }
        }

        let mut new_nodes = Vec::with_capacity(n);
        for i in 0..n {
            let incoming: Vec<NodeId> = mask
                .active_neighbors(i)
                .into_iter()
                .map(|j| {
                    let s = ordered_slot(i, j, n);
                    let cat = tape.concat(&[new_edges[s], nodes[j]]);
                    let m =
                        self.mlp2(tape, ids.msg_w1, ids.msg_b1, ids.msg_w2, ids.msg_b2, cat);
                    self.attention(tape, m)
                })
                .collect();
            let agg = if incoming.is_empty() {
                tape.constant(Matrix::zeros(self.config.width, 1))
            } else {
                tape.mean(&incoming)
            };
            let cat = tape.concat(&[nodes[i], agg]);
            new_nodes.push(self.mlp2(tape, ids.upd_w1, ids.upd_b1, ids.upd_w2, ids.upd_b2, cat));
        }

        nodes.copy_from_slice(&new_nodes);
        edges.copy_from_slice(&new_edges);
    }

    /// Linear 6-D readout of one edge feature: (dt, dw) stacked.
    pub fn pose_head(&self, tape: &mut Tape, edge: NodeId) -> NodeId {
        let ids = self.gnn();
        tape.linear(ids.pose_w, Some(ids.pose_b), edge)
    }

    fn pairwise_pred(&self, tape: &mut Tape, xi: NodeId, xj: NodeId) -> NodeId {
        let ids = match &self.blocks {
            Blocks::Mlp(ids) => ids,
            Blocks::Gnn(_) => unreachable!(),
        };
        let cat = tape.concat(&[xi, xj]);
        let h = tape.linear(ids.fc1_w, Some(ids.fc1_b), cat);
        let h = tape.relu(h);
        let h = tape.linear(ids.fc2_w, Some(ids.fc2_b), h);
        let h = tape.relu(h);
        let h = tape.linear(ids.fc3_w, Some(ids.fc3_b), h);
        let h = tape.relu(h);
        tape.linear(ids.head_w, Some(ids.head_b), h)
    }

    /// Full forward pass over one graph: returns the 6-D prediction node
    /// for every active ordered edge, `None` for inactive slots. `rounds`
    /// usually equals the configured round count; evaluation may override
    /// it to probe a mismatched depth.
    pub fn forward(
        &self,
        tape: &mut Tape,
        features: &[NodeId],
        mask: &EdgeMask,
        rounds: usize,
    ) -> EdgePredictions {
        let n = features.len();
        assert_eq!(mask.n_nodes(), n, "mask size does not match node count");
        for &f in features {
            assert_eq!(
                tape.value(f).rows(),
                self.config.width,
                "node feature width does not match the model"
            );
        }

        let mut preds = vec![None; ordered_edge_count(n)];
        match self.kind {
            ModelKind::MessagePassing => {
                let mut nodes = features.to_vec();
                let mut edges = self.init_edges(tape, &nodes);
                for _ in 0..rounds {
                    self.round(tape, &mut nodes, &mut edges, mask);
                }
                for (s, slot) in preds.iter_mut().enumerate() {
                    let (i, j) = slot_endpoints(s, n);
                    if mask.is_active(i, j) {
                        *slot = Some(self.pose_head(tape, edges[s]));
                    }
                }
            }
            ModelKind::PairwiseMlp => {
                for (s, slot) in preds.iter_mut().enumerate() {
                    let (i, j) = slot_endpoints(s, n);
                    if mask.is_active(i, j) {
                        *slot = Some(self.pairwise_pred(tape, features[i], features[j]));
                    }
                }
            }
        }
        EdgePredictions { n_nodes: n, preds }
    }
}

/// Per-ordered-edge prediction nodes produced by one forward pass.
pub struct EdgePredictions {
    n_nodes: usize,
    preds: Vec<Option<NodeId>>,
}

impl EdgePredictions {
    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn get(&self, i: usize, j: usize) -> Option<NodeId> {
        self.preds[ordered_slot(i, j, self.n_nodes)]
    }

    /// Active predictions as ((i, j), node), ascending slot order.
    pub fn active(&self) -> impl Iterator<Item = ((usize, usize), NodeId)> + '_ {
        self.preds.iter().enumerate().filter_map(|(s, p)| {
            p.map(|node| (slot_endpoints(s, self.n_nodes), node))
        })
    }

    pub fn active_count(&self) -> usize {
        self.preds.iter().filter(|p| p.is_some()).count()
    }
}

/// Resolves a graph's node ids to feature-vector columns. Ids come from
/// the database; a query record not present there may be supplied
/// separately.
pub fn features_for_graph(
    graph: &GraphSpec,
    db: &EmbeddingDatabase,
    query: Option<&ImageRecord>,
) -> Result<Vec<Matrix>> {
    graph
        .node_ids
        .iter()
        .map(|id| {
            if let Some(idx) = db.index_of(id) {
                Ok(Matrix::column(db.get(idx).feature_vector.clone()))
            } else if let Some(q) = query.filter(|q| &q.id == id) {
                Ok(Matrix::column(q.feature_vector.clone()))
            } else {
                Err(Error::UnknownId(id.clone()))
            }
        })
        .collect()
}
