//! Training: the balanced relative-pose loss with learned weighting
//! scalars, symmetric edge dropout, the epoch loop with its step-decay
//! learning-rate schedule and early stopping, and checkpoint persistence.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::eval;
use crate::gnn::{
    features_for_graph, ordered_edge_count, undirected_pair_count, EdgeMask, Model, ModelConfig,
    ModelKind,
};
use crate::pose::{relative_target, Pose, RelPoseTarget};
use crate::retrieval::{
    build_random_graph, knn, strided_subsample, EmbeddingDatabase, GraphSpec, ImageRecord,
};
use crate::tensor::{
    adam_step, finite_diff_check, BlockCheck, GradStore, Matrix, NodeId, ParamSet, Parameter, Tape,
};

const CHECKPOINT_MAGIC: &[u8; 4] = b"GLCP";
const CHECKPOINT_VERSION: u32 = 1;

/// How the nodes of each training or query graph are selected.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphStrategy {
    /// Nearest neighbors in embedding space, strided subsampling.
    Retrieval,
    /// Uniformly random database records; the reference point that shows
    /// what retrieval contributes.
    Random,
}

/// Full training recipe.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Graphs per optimizer step.
    pub batch_size: usize,
    pub lr0: f64,
    /// Learning rate divides by 10 every this many epochs.
    pub lr_decay_every: usize,
    pub weight_decay: f64,
    /// Probability of dropping each undirected edge per graph per step.
    pub edge_dropout: f64,
    /// Nodes per graph (anchor plus N-1 neighbors).
    pub n_nodes: usize,
    /// Neighbor subsampling stride K.
    pub stride: usize,
    pub model: ModelConfig,
    pub kind: ModelKind,
    pub strategy: GraphStrategy,
    pub seed: u64,
    /// Early-stopping patience in epochs, used when a validation set is
    /// supplied.
    pub early_stop_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 8,
            lr0: 5e-5,
            lr_decay_every: 20,
            weight_decay: 5e-4,
            edge_dropout: 0.5,
            n_nodes: 8,
            stride: 5,
            model: ModelConfig::default(),
            kind: ModelKind::MessagePassing,
            strategy: GraphStrategy::Retrieval,
            seed: 0,
            early_stop_patience: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if self.n_nodes < 2 {
            return Err(Error::InvalidArgument(
                "graphs need at least two nodes".into(),
            ));
        }
        if self.stride == 0 {
            return Err(Error::InvalidArgument("stride must be positive".into()));
        }
        if self.lr_decay_every == 0 {
            return Err(Error::InvalidArgument(
                "learning-rate decay interval must be positive".into(),
            ));
        }
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return Err(Error::InvalidArgument(
                "learning rate must be finite and non-negative".into(),
            ));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidArgument(
                "weight decay must be finite and non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.edge_dropout) {
            return Err(Error::InvalidArgument(
                "edge dropout must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Step-decay schedule: the initial rate divided by 10 for every full
/// decay interval completed.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    config.lr0 / 10f64.powi((epoch / config.lr_decay_every) as i32)
}

/// Balanced loss for one edge: L1 translation and rotation-log errors,
/// each scaled by a learned negative-log-variance weight:
/// `et * exp(-beta) + beta + ew * exp(-gamma) + gamma`.
pub fn edge_loss(pred: &RelPoseTarget, target: &RelPoseTarget, beta: f64, gamma: f64) -> f64 {
    let et: f64 = (0..3).map(|k| (pred.dt[k] - target.dt[k]).abs()).sum();
    let ew: f64 = (0..3).map(|k| (pred.dw[k] - target.dw[k]).abs()).sum();
    et * (-beta).exp() + beta + ew * (-gamma).exp() + gamma
}

/// Mean of [`edge_loss`] over prediction/target pairs.
pub fn graph_loss(pairs: &[(RelPoseTarget, RelPoseTarget)], beta: f64, gamma: f64) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("active edges"));
    }
    let sum: f64 = pairs
        .iter()
        .map(|(p, t)| edge_loss(p, t, beta, gamma))
        .sum();
    Ok(sum / pairs.len() as f64)
}

/// The shared per-tape nodes of the loss weights, built once per graph so
/// every edge term reuses them.
pub struct LossWeights {
    beta: NodeId,
    gamma: NodeId,
    exp_neg_beta: NodeId,
    exp_neg_gamma: NodeId,
}

impl LossWeights {
    pub fn on_tape(tape: &mut Tape, model: &Model) -> LossWeights {
        let (beta_id, gamma_id) = model.loss_weight_ids();
        let beta = tape.param(beta_id);
        let gamma = tape.param(gamma_id);
        let nb = tape.scale(beta, -1.0);
        let exp_neg_beta = tape.exp(nb);
        let ng = tape.scale(gamma, -1.0);
        let exp_neg_gamma = tape.exp(ng);
        LossWeights {
            beta,
            gamma,
            exp_neg_beta,
            exp_neg_gamma,
        }
    }
}

/// Differentiable graph loss: mean over (prediction node, target) pairs of
/// the balanced edge loss.
pub fn graph_loss_on_tape(
    tape: &mut Tape,
    preds: &[(NodeId, RelPoseTarget)],
    weights: &LossWeights,
) -> Result<NodeId> {
    if preds.is_empty() {
        return Err(Error::EmptyInput("active edges"));
    }
    let mut terms = Vec::with_capacity(preds.len());
    for (pred, target) in preds {
        let dt = tape.slice_rows(*pred, 0, 3);
        let dw = tape.slice_rows(*pred, 3, 3);
        let et = tape.abs_sum_diff(dt, crate::tensor::Matrix::column(target.dt.to_vec()));
        let ew = tape.abs_sum_diff(dw, crate::tensor::Matrix::column(target.dw.to_vec()));
        let t_term = tape.mul(et, weights.exp_neg_beta);
        let t_term = tape.add(t_term, weights.beta);
        let w_term = tape.mul(ew, weights.exp_neg_gamma);
        let w_term = tape.add(w_term, weights.gamma);
        terms.push(tape.add(t_term, w_term));
    }
    Ok(tape.mean(&terms))
}

/// Builds a seeded toy graph with random features and targets and compares
/// the analytic gradient of the balanced graph loss against central finite
/// differences, block by block, over `entries_per_block` sampled entries.
/// Two initialization values are adjusted first: the attention gate starts
/// at zero, which would leave the attention path without gradient, so it is
/// perturbed to random values; and the rotation weight starts at -3, which
/// multiplies the loss by e^3 and with it the cancellation noise of the
/// differencing, so it is rebalanced to zero to keep the comparison
/// well-conditioned.
pub fn check_training_gradients(
    model_config: ModelConfig,
    kind: ModelKind,
    n_nodes: usize,
    seed: u64,
    entries_per_block: usize,
) -> Result<Vec<BlockCheck>> {
    if n_nodes < 2 {
        return Err(Error::InvalidArgument(
            "graphs need at least two nodes".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::init(model_config, kind, &mut rng)?;
    if let Some(gate) = model.params().find("attn_g") {
        let rows = model_config.width;
        let cols = model_config.width / model_config.attn_factor;
        model.params_mut().get_mut(gate).value =
            Matrix::from_fn(rows, cols, |_, _| 0.3 * (2.0 * rng.random::<f64>() - 1.0));
    }
    let (_, gamma_id) = model.loss_weight_ids();
    model.params_mut().get_mut(gamma_id).value = Matrix::scalar(0.0);
    let features: Vec<Matrix> = (0..n_nodes)
        .map(|_| {
            Matrix::from_fn(model_config.width, 1, |_, _| rng.sample(StandardNormal))
        })
        .collect();
    let targets: Vec<RelPoseTarget> = (0..ordered_edge_count(n_nodes))
        .map(|_| {
            let mut t = RelPoseTarget::ZERO;
            for k in 0..3 {
                let g: f64 = rng.sample(StandardNormal);
                t.dt[k] = g;
                let g: f64 = rng.sample(StandardNormal);
                t.dw[k] = 0.5 * g;
            }
            t
        })
        .collect();

    let rounds = model_config.rounds;
    let loss_of = |params: &ParamSet| -> f64 {
        let probe = Model::from_params(model_config, kind, params.clone())
            .expect("probe parameters were cloned from a valid model");
        let mut tape = Tape::new(probe.params());
        let ids: Vec<NodeId> = features.iter().map(|f| tape.constant(f.clone())).collect();
        let preds = probe.forward(&mut tape, &ids, &EdgeMask::full(n_nodes), rounds);
        let weights = LossWeights::on_tape(&mut tape, &probe);
        let pairs: Vec<(NodeId, RelPoseTarget)> = preds
            .active()
            .enumerate()
            .map(|(k, (_, node))| (node, targets[k]))
            .collect();
        let loss = graph_loss_on_tape(&mut tape, &pairs, &weights)
            .expect("a full mask always has active edges");
        tape.scalar_value(loss)
    };

    let mut grads = GradStore::zeros_like(model.params());
    {
        let mut tape = Tape::new(model.params());
        let ids: Vec<NodeId> = features.iter().map(|f| tape.constant(f.clone())).collect();
        let preds = model.forward(&mut tape, &ids, &EdgeMask::full(n_nodes), rounds);
        let weights = LossWeights::on_tape(&mut tape, &model);
        let pairs: Vec<(NodeId, RelPoseTarget)> = preds
            .active()
            .enumerate()
            .map(|(k, (_, node))| (node, targets[k]))
            .collect();
        let loss = graph_loss_on_tape(&mut tape, &pairs, &weights)?;
        tape.backward(loss, 1.0, &mut grads);
    }

    let mut check_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut params = model.params().clone();
    Ok(finite_diff_check(
        &mut params,
        &grads,
        loss_of,
        1e-5,
        entries_per_block,
        &mut check_rng,
    ))
}

/// Draws a symmetric edge mask: every undirected pair is independently
/// retained with probability `1 - p`; if nothing survives, one uniformly
/// chosen pair is reinstated so the graph never goes fully silent.
pub fn apply_edge_dropout(n_nodes: usize, p: f64, rng: &mut ChaCha8Rng) -> EdgeMask {
    let mut mask = EdgeMask::full(n_nodes);
    let mut active = 0usize;
    for i in 0..n_nodes {
        for j in (i + 1)..n_nodes {
            if rng.random::<f64>() < p {
                mask.set(i, j, false);
            } else {
                active += 1;
            }
        }
    }
    if active == 0 {
        let chosen = rng.random_range(0..undirected_pair_count(n_nodes));
        let mut index = 0usize;
        for i in 0..n_nodes {
            for j in (i + 1)..n_nodes {
                if index == chosen {
                    mask.set(i, j, true);
                }
                index += 1;
            }
        }
    }
    mask
}

/// One line of the per-epoch metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_median_translation_m: Option<f64>,
    pub val_median_rotation_deg: Option<f64>,
}

impl std::fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "epoch={} lr={} train_loss={}",
            self.epoch, self.lr, self.train_loss
        )?;
        if let (Some(vl), Some(mt), Some(mr)) = (
            self.val_loss,
            self.val_median_translation_m,
            self.val_median_rotation_deg,
        ) {
            write!(f, " val_loss={vl} val_trans_m={mt} val_rot_deg={mr}")?;
        }
        Ok(())
    }
}

/// Everything needed to resume or deploy a trained model: the recipe
/// dimensions, the parameter blocks with their optimizer moments, and the
/// training RNG state at capture time.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub strategy: GraphStrategy,
    pub model_config: ModelConfig,
    pub n_nodes: usize,
    pub stride: usize,
    /// Completed training epochs at the moment these parameters were
    /// captured (the best validation epoch when early stopping is active).
    pub epoch: u64,
    pub seed: u64,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
    pub rng_stream: u64,
    pub params: ParamSet,
}

impl Checkpoint {
    /// Rebuilds the model, validating block names and shapes.
    pub fn model(&self) -> Result<Model> {
        Model::from_params(self.model_config, self.kind, self.params.clone())
    }

    /// Restores the training RNG exactly where it stopped.
    pub fn resume_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.rng_seed);
        rng.set_stream(self.rng_stream);
        rng.set_word_pos(self.rng_word_pos);
        rng
    }
}

/// Result of [`fit`]: the captured checkpoint plus the per-epoch log.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
}

/// Ground-truth relative poses for the active ordered edges of one graph,
/// in slot order.
fn edge_targets(poses: &[Pose], mask: &EdgeMask) -> Vec<((usize, usize), RelPoseTarget)> {
    let n = poses.len();
    let mut out = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i != j && mask.is_active(i, j) {
                out.push(((i, j), relative_target(&poses[i], &poses[j])));
            }
        }
    }
    out
}

fn graph_poses(
    graph: &GraphSpec,
    db: &EmbeddingDatabase,
    query: Option<&ImageRecord>,
) -> Result<Vec<Pose>> {
    graph
        .node_ids
        .iter()
        .map(|id| {
            let record = match db.index_of(id) {
                Some(idx) => db.get(idx),
                None => query
                    .filter(|q| &q.id == id)
                    .ok_or_else(|| Error::UnknownId(id.clone()))?,
            };
            record
                .pose
                .ok_or_else(|| Error::InvalidArgument(format!("record {id} has no pose")))
        })
        .collect()
}

/// Forward one graph and attach the loss; returns the loss node.
fn graph_loss_node(
    model: &Model,
    tape: &mut Tape,
    graph: &GraphSpec,
    db: &EmbeddingDatabase,
    query: Option<&ImageRecord>,
    mask: &EdgeMask,
    rounds: usize,
) -> Result<NodeId> {
    let features = features_for_graph(graph, db, query)?;
    let poses = graph_poses(graph, db, query)?;
    let ids: Vec<NodeId> = features.into_iter().map(|f| tape.constant(f)).collect();
    let preds = model.forward(tape, &ids, mask, rounds);
    let targets = edge_targets(&poses, mask);
    let weights = LossWeights::on_tape(tape, model);
    let pairs: Vec<(NodeId, RelPoseTarget)> = targets
        .into_iter()
        .map(|((i, j), t)| (preds.get(i, j).expect("active edge has prediction"), t))
        .collect();
    graph_loss_on_tape(tape, &pairs, &weights)
}

/// Per-anchor sorted neighbor pools, computed once since embeddings are
/// fixed during training.
fn neighbor_pools(db: &EmbeddingDatabase, config: &TrainConfig) -> Result<Vec<Vec<usize>>> {
    let want = ((config.n_nodes - 1) * config.stride).min(db.len() - 1);
    (0..db.len())
        .map(|a| {
            let rec = db.get(a);
            knn(db, &rec.retrieval_embedding, want, Some(&rec.id))
        })
        .collect()
}

fn training_graph(
    db: &EmbeddingDatabase,
    anchor: usize,
    pools: Option<&[Vec<usize>]>,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<GraphSpec> {
    let anchor_id = &db.get(anchor).id;
    match config.strategy {
        GraphStrategy::Retrieval => {
            let pool = &pools.expect("retrieval strategy has pools")[anchor];
            let offset = rng.random_range(0..config.stride);
            let picks = strided_subsample(pool, config.n_nodes, config.stride, offset)?;
            let node_ids = std::iter::once(anchor_id.clone())
                .chain(picks.iter().map(|&i| db.get(i).id.clone()))
                .collect();
            Ok(GraphSpec {
                node_ids,
                neighbors: picks,
                is_query_graph: false,
            })
        }
        GraphStrategy::Random => build_random_graph(db, anchor_id, config.n_nodes, rng),
    }
}

/// Trains a model on the database. When a validation set is given, the
/// per-epoch log carries validation loss and median errors, and early
/// stopping keeps the parameters of the best validation epoch.
pub fn fit(
    db: &EmbeddingDatabase,
    config: &TrainConfig,
    validation: Option<&[ImageRecord]>,
) -> Result<TrainOutcome> {
    config.validate()?;
    db.require_poses()?;
    if db.feature_dim() != config.model.width {
        return Err(Error::ConfigMismatch(format!(
            "database feature width {} does not match model width {}",
            db.feature_dim(),
            config.model.width
        )));
    }
    if db.len() < config.n_nodes {
        return Err(Error::DatabaseTooSmall {
            needed: config.n_nodes,
            available: db.len(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = Model::init(config.model, config.kind, &mut rng)?;
    let pools = match config.strategy {
        GraphStrategy::Retrieval => Some(neighbor_pools(db, config)?),
        GraphStrategy::Random => None,
    };

    let mut grads = GradStore::zeros_like(model.params());
    let mut history = Vec::with_capacity(config.epochs);
    let mut anchors: Vec<usize> = (0..db.len()).collect();
    // (validation loss, params snapshot, completed epochs at capture)
    let mut best: Option<(f64, ParamSet, u64)> = None;

    for epoch in 0..config.epochs {
        let lr = lr_at(epoch, config);
        anchors.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for batch in anchors.chunks(config.batch_size) {
            grads.clear();
            let mut batch_loss = 0.0;
            for &anchor in batch {
                let graph = training_graph(db, anchor, pools.as_deref(), config, &mut rng)?;
                let mask = apply_edge_dropout(config.n_nodes, config.edge_dropout, &mut rng);
                let mut tape = Tape::new(model.params());
                let loss = graph_loss_node(
                    &model,
                    &mut tape,
                    &graph,
                    db,
                    None,
                    &mask,
                    config.model.rounds,
                )?;
                batch_loss += tape.scalar_value(loss);
                tape.backward(loss, 1.0 / batch.len() as f64, &mut grads);
            }
            batch_loss /= batch.len() as f64;
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    value: batch_loss,
                });
            }
            model.params_mut().accumulate_grads(&grads);
            adam_step(model.params_mut(), lr, config.weight_decay);
            loss_sum += batch_loss * batch.len() as f64;
        }
        let train_loss = loss_sum / anchors.len() as f64;

        let mut record = EpochRecord {
            epoch,
            lr,
            train_loss,
            val_loss: None,
            val_median_translation_m: None,
            val_median_rotation_deg: None,
        };
        let mut stop = false;
        if let Some(val) = validation {
            let summary = eval::validation_summary(&model, db, val, config)?;
            record.val_loss = Some(summary.loss);
            record.val_median_translation_m = Some(summary.median_translation_m);
            record.val_median_rotation_deg = Some(summary.median_rotation_deg);
            let improved = best
                .as_ref()
                .map(|(b, _, _)| summary.loss < *b)
                .unwrap_or(true);
            if improved {
                best = Some((summary.loss, model.params().clone(), epoch as u64 + 1));
            } else if let Some((_, _, best_at)) = &best {
                if (epoch as u64 + 1).saturating_sub(*best_at) >= config.early_stop_patience as u64
                {
                    stop = true;
                }
            }
        }
        log::info!("{record}");
        history.push(record);
        if stop {
            log::info!(
                "early stop after epoch {epoch}: no validation improvement in {} epochs",
                config.early_stop_patience
            );
            break;
        }
    }

    let epoch = match best {
        Some((_, best_params, best_epoch)) => {
            *model.params_mut() = best_params;
            best_epoch
        }
        None => history.len() as u64,
    };

    let checkpoint = Checkpoint {
        kind: config.kind,
        strategy: config.strategy,
        model_config: config.model,
        n_nodes: config.n_nodes,
        stride: config.stride,
        epoch,
        seed: config.seed,
        rng_seed: rng.get_seed(),
        rng_word_pos: rng.get_word_pos(),
        rng_stream: rng.get_stream(),
        params: model.params().clone(),
    };
    Ok(TrainOutcome {
        checkpoint,
        history,
    })
}

fn kind_tag(kind: ModelKind) -> u8 {
    match kind {
        ModelKind::MessagePassing => 0,
        ModelKind::PairwiseMlp => 1,
    }
}

fn strategy_tag(strategy: GraphStrategy) -> u8 {
    match strategy {
        GraphStrategy::Retrieval => 0,
        GraphStrategy::Random => 1,
    }
}

/// Writes the little-endian binary checkpoint format: magic, version,
/// recipe tags and dimensions, RNG state, then every parameter block in
/// insertion order with its Adam moments.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&[kind_tag(ckpt.kind), strategy_tag(ckpt.strategy)])?;
    for v in [
        ckpt.model_config.width as u32,
        ckpt.model_config.attn_factor as u32,
        ckpt.model_config.rounds as u32,
        ckpt.n_nodes as u32,
        ckpt.stride as u32,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&ckpt.epoch.to_le_bytes())?;
    w.write_all(&ckpt.seed.to_le_bytes())?;
    w.write_all(&ckpt.rng_seed)?;
    w.write_all(&ckpt.rng_word_pos.to_le_bytes())?;
    w.write_all(&ckpt.rng_stream.to_le_bytes())?;
    w.write_all(&(ckpt.params.len() as u64).to_le_bytes())?;
    for id in ckpt.params.ids() {
        let name = ckpt.params.name(id).as_bytes();
        let p = ckpt.params.get(id);
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(p.value.rows() as u32).to_le_bytes())?;
        w.write_all(&(p.value.cols() as u32).to_le_bytes())?;
        for m in [&p.value, &p.adam_m, &p.adam_v] {
            for v in m.as_slice() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.write_all(&p.step_count.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::CorruptFile(format!(
                "checkpoint truncated at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Reads and validates a checkpoint; errors distinguish corrupt files,
/// unsupported versions, and blocks inconsistent with the stored
/// configuration.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::CorruptFile("missing checkpoint magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let kind = match r.u8()? {
        0 => ModelKind::MessagePassing,
        1 => ModelKind::PairwiseMlp,
        k => return Err(Error::CorruptFile(format!("unknown model kind tag {k}"))),
    };
    let strategy = match r.u8()? {
        0 => GraphStrategy::Retrieval,
        1 => GraphStrategy::Random,
        s => return Err(Error::CorruptFile(format!("unknown strategy tag {s}"))),
    };
    let model_config = ModelConfig {
        width: r.u32()? as usize,
        attn_factor: r.u32()? as usize,
        rounds: r.u32()? as usize,
    };
    let n_nodes = r.u32()? as usize;
    let stride = r.u32()? as usize;
    let epoch = r.u64()?;
    let seed = r.u64()?;
    let rng_seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let rng_word_pos = r.u128()?;
    let rng_stream = r.u64()?;

    let count = r.u64()? as usize;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::CorruptFile("parameter name is not valid UTF-8".into()))?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let read_matrix = |r: &mut Reader| -> Result<crate::tensor::Matrix> {
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                data.push(r.f64()?);
            }
            Ok(crate::tensor::Matrix::from_vec(rows, cols, data))
        };
        let value = read_matrix(&mut r)?;
        let adam_m = read_matrix(&mut r)?;
        let adam_v = read_matrix(&mut r)?;
        let step_count = r.u64()?;
        let id = params.add(name, value);
        let p: &mut Parameter = params.get_mut(id);
        p.adam_m = adam_m;
        p.adam_v = adam_v;
        p.step_count = step_count;
    }
    if r.pos != bytes.len() {
        return Err(Error::CorruptFile(format!(
            "{} trailing bytes after the last parameter block",
            bytes.len() - r.pos
        )));
    }

    let ckpt = Checkpoint {
        kind,
        strategy,
        model_config,
        n_nodes,
        stride,
        epoch,
        seed,
        rng_seed,
        rng_word_pos,
        rng_stream,
        params,
    };
    // surface config/shape inconsistencies at load time
    ckpt.model()?;
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scene, SceneConfig};

    #[test]
    fn perfect_prediction_at_initial_weights_scores_minus_three() {
        let target = RelPoseTarget {
            dt: [0.3, -0.2, 0.5],
            dw: [0.1, 0.0, -0.4],
        };
        let loss = edge_loss(&target.clone(), &target, 0.0, -3.0);
        assert!((loss - (-3.0)).abs() < 1e-12);
    }

    #[test]
    fn unit_translation_error_scores_minus_two() {
        let pred = RelPoseTarget {
            dt: [1.0, 0.0, 0.0],
            dw: [0.0; 3],
        };
        let target = RelPoseTarget {
            dt: [0.0; 3],
            dw: [0.0; 3],
        };
        let loss = edge_loss(&pred, &target, 0.0, -3.0);
        assert!((loss - (-2.0)).abs() < 1e-12);
    }

    #[test]
    fn beta_partial_matches_finite_differences() {
        let pred = RelPoseTarget {
            dt: [0.4, -0.1, 0.2],
            dw: [0.05, 0.02, -0.03],
        };
        let target = RelPoseTarget {
            dt: [0.1, 0.1, 0.0],
            dw: [0.0, 0.0, 0.1],
        };
        let et: f64 = (0..3).map(|k| (pred.dt[k] - target.dt[k]).abs()).sum();
        let beta: f64 = 0.37;
        let analytic = -et * (-beta).exp() + 1.0;
        let h = 1e-6;
        let numeric = (edge_loss(&pred, &target, beta + h, -3.0)
            - edge_loss(&pred, &target, beta - h, -3.0))
            / (2.0 * h);
        assert!((analytic - numeric).abs() < 1e-6);
    }

    #[test]
    fn graph_loss_means_edge_losses() {
        let mk = |s: f64| RelPoseTarget {
            dt: [s, 0.0, 0.0],
            dw: [0.0, s, 0.0],
        };
        let pairs = vec![
            (mk(0.1), mk(0.0)),
            (mk(0.5), mk(0.2)),
            (mk(-0.3), mk(0.3)),
        ];
        let want: f64 = pairs
            .iter()
            .map(|(p, t)| edge_loss(p, t, 0.2, -1.0))
            .sum::<f64>()
            / 3.0;
        let got = graph_loss(&pairs, 0.2, -1.0).unwrap();
        assert!((want - got).abs() < 1e-12);

        let single = graph_loss(&pairs[..1], 0.2, -1.0).unwrap();
        assert!((single - edge_loss(&pairs[0].0, &pairs[0].1, 0.2, -1.0)).abs() < 1e-15);

        let doubled: Vec<_> = pairs.iter().chain(&pairs).cloned().collect();
        let got2 = graph_loss(&doubled, 0.2, -1.0).unwrap();
        assert!((got - got2).abs() < 1e-12);

        assert!(matches!(
            graph_loss(&[], 0.0, 0.0),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn dropout_zero_keeps_all_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mask = apply_edge_dropout(8, 0.0, &mut rng);
        assert_eq!(mask.active_pair_count(), 28);
    }

    #[test]
    fn dropout_is_symmetric_and_halves_on_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut total = 0usize;
        for _ in 0..10000 {
            let mask = apply_edge_dropout(8, 0.5, &mut rng);
            for i in 0..8 {
                for j in (i + 1)..8 {
                    assert_eq!(mask.is_active(i, j), mask.is_active(j, i));
                }
            }
            total += mask.active_pair_count();
        }
        let mean = total as f64 / 10000.0;
        assert!((mean - 14.0).abs() < 0.5, "mean retained {mean}");
    }

    #[test]
    fn dropout_never_leaves_a_graph_silent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..2000 {
            let mask = apply_edge_dropout(3, 0.99, &mut rng);
            assert!(mask.active_pair_count() >= 1);
        }
    }

    #[test]
    fn learning_rate_steps_down_every_interval() {
        let config = TrainConfig::default();
        assert_eq!(lr_at(0, &config), 5e-5);
        assert_eq!(lr_at(19, &config), 5e-5);
        assert!((lr_at(20, &config) - 5e-6).abs() < 1e-18);
        assert!((lr_at(45, &config) - 5e-7).abs() < 1e-18);
    }

    fn tiny_scene_db() -> (EmbeddingDatabase, Vec<ImageRecord>) {
        let scene = SceneConfig {
            train_count: 160,
            test_count: 40,
            embedding_dim: 16,
            feature_dim: 16,
            seed: 5,
            ..SceneConfig::default()
        };
        let (train, test) = generate_scene(&scene).unwrap();
        (
            EmbeddingDatabase::from_records(train.records).unwrap(),
            test.records,
        )
    }

    fn tiny_train_config() -> TrainConfig {
        TrainConfig {
            epochs: 20,
            n_nodes: 5,
            stride: 3,
            model: ModelConfig {
                width: 16,
                attn_factor: 4,
                rounds: 2,
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_returns_initialized_params() {
        let (db, _) = tiny_scene_db();
        let config = TrainConfig {
            epochs: 0,
            ..tiny_train_config()
        };
        let outcome = fit(&db, &config, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let fresh = Model::init(config.model, config.kind, &mut rng).unwrap();
        assert_eq!(outcome.checkpoint.params, *fresh.params());
        assert_eq!(outcome.checkpoint.epoch, 0);
        assert!(outcome.history.is_empty());
    }

    #[test]
    fn training_reduces_the_loss_substantially() {
        let (db, _) = tiny_scene_db();
        let config = TrainConfig {
            lr0: 2e-4,
            ..tiny_train_config()
        };
        let outcome = fit(&db, &config, None).unwrap();
        let first = outcome.history.first().unwrap().train_loss;
        let min = outcome
            .history
            .iter()
            .map(|r| r.train_loss)
            .fold(f64::INFINITY, f64::min);
        assert!(
            min < 0.6 * first,
            "loss went {first} -> {min}, needed < {}",
            0.6 * first
        );
    }

    #[test]
    fn fit_is_seed_deterministic() {
        let (db, _) = tiny_scene_db();
        let config = TrainConfig {
            epochs: 2,
            ..tiny_train_config()
        };
        let dir = tempfile::tempdir().unwrap();
        let a = fit(&db, &config, None).unwrap();
        let b = fit(&db, &config, None).unwrap();
        let pa = dir.path().join("a.ckpt");
        let pb = dir.path().join("b.ckpt");
        save_checkpoint(&a.checkpoint, &pa).unwrap();
        save_checkpoint(&b.checkpoint, &pb).unwrap();
        assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn early_stopping_keeps_the_best_epoch() {
        let (db, test) = tiny_scene_db();
        // a zero learning rate freezes the parameters, so validation loss
        // never improves after the first epoch and patience must trigger
        let config = TrainConfig {
            epochs: 40,
            lr0: 0.0,
            early_stop_patience: 3,
            ..tiny_train_config()
        };
        let outcome = fit(&db, &config, Some(&test)).unwrap();
        assert_eq!(outcome.history.len(), 4);
        assert_eq!(outcome.checkpoint.epoch, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let fresh = Model::init(config.model, config.kind, &mut rng).unwrap();
        // frozen training: best params equal the initialization
        for id in fresh.params().ids() {
            assert_eq!(
                outcome.checkpoint.params.value(id).as_slice(),
                fresh.params().value(id).as_slice()
            );
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences_including_balance_weights() {
        use crate::tensor::{finite_diff_check, Matrix};
        let (db, _) = tiny_scene_db();
        let config = TrainConfig {
            edge_dropout: 0.0,
            n_nodes: 4,
            model: ModelConfig {
                width: 16,
                attn_factor: 4,
                rounds: 2,
            },
            ..tiny_train_config()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut model = Model::init(config.model, config.kind, &mut rng).unwrap();
        let g_id = model.params().find("attn_g").unwrap();
        model.params_mut().get_mut(g_id).value =
            Matrix::from_fn(16, 4, |_, _| 0.3 * (2.0 * rng.random::<f64>() - 1.0));
        let pools = neighbor_pools(&db, &config).unwrap();
        let graph = {
            let mut graph_rng = ChaCha8Rng::seed_from_u64(13);
            training_graph(&db, 0, Some(&pools), &config, &mut graph_rng).unwrap()
        };
        let mask = EdgeMask::full(config.n_nodes);

        let loss_of = |params: &ParamSet| -> f64 {
            let probe = Model::from_params(config.model, config.kind, params.clone()).unwrap();
            let mut tape = Tape::new(probe.params());
            let node =
                graph_loss_node(&probe, &mut tape, &graph, &db, None, &mask, 2).unwrap();
            tape.scalar_value(node)
        };

        let mut tape = Tape::new(model.params());
        let node = graph_loss_node(&model, &mut tape, &graph, &db, None, &mask, 2).unwrap();
        let mut grads = GradStore::zeros_like(model.params());
        tape.backward(node, 1.0, &mut grads);

        let mut check_rng = ChaCha8Rng::seed_from_u64(17);
        let mut probe_params = model.params().clone();
        let report =
            finite_diff_check(&mut probe_params, &grads, loss_of, 1e-5, 6, &mut check_rng);
        for block in &report {
            assert!(
                block.max_rel_err < 1e-4,
                "{}: rel err {}",
                block.name,
                block.max_rel_err
            );
        }
        // the balance weights must actually carry gradient
        let (beta, gamma) = model.loss_weight_ids();
        assert!(grads.get(beta).get(0, 0).abs() > 1e-8);
        assert!(grads.get(gamma).get(0, 0).abs() > 1e-8);
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical_and_rejections_are_distinct() {
        let (db, _) = tiny_scene_db();
        let config = TrainConfig {
            epochs: 1,
            ..tiny_train_config()
        };
        let outcome = fit(&db, &config, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&outcome.checkpoint, &p1).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        assert_eq!(loaded, outcome.checkpoint);
        save_checkpoint(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

        let bytes = std::fs::read(&p1).unwrap();
        std::fs::write(&p1, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(load_checkpoint(&p1), Err(Error::CorruptFile(_))));

        let mut v = bytes.clone();
        v[4] = 9;
        std::fs::write(&p1, &v).unwrap();
        assert!(matches!(
            load_checkpoint(&p1),
            Err(Error::VersionMismatch { found: 9, .. })
        ));

        // stored width inconsistent with the parameter shapes
        let mut c = bytes.clone();
        c[10] = 32;
        std::fs::write(&p1, &c).unwrap();
        assert!(matches!(
            load_checkpoint(&p1),
            Err(Error::ConfigMismatch(_))
        ));
    }

    #[test]
    fn loaded_model_reproduces_forward_bit_exactly() {
        let (db, _) = tiny_scene_db();
        let config = TrainConfig {
            epochs: 1,
            ..tiny_train_config()
        };
        let outcome = fit(&db, &config, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&outcome.checkpoint, &p).unwrap();
        let loaded = load_checkpoint(&p).unwrap();

        let run = |ckpt: &Checkpoint| -> Vec<Vec<f64>> {
            let model = ckpt.model().unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(23);
            let graph = build_random_graph(&db, &db.get(0).id, 5, &mut rng).unwrap();
            let feats = features_for_graph(&graph, &db, None).unwrap();
            let mut tape = Tape::new(model.params());
            let ids: Vec<NodeId> = feats.into_iter().map(|f| tape.constant(f)).collect();
            let preds = model.forward(&mut tape, &ids, &EdgeMask::full(5), 2);
            preds
                .active()
                .map(|(_, p)| tape.value(p).as_slice().to_vec())
                .collect()
        };
        assert_eq!(run(&outcome.checkpoint), run(&loaded));
    }

    #[test]
    fn resume_rng_restores_the_stream_position() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let _burn: f64 = rng.random();
        let _burn2: f64 = rng.random();
        let ckpt = Checkpoint {
            kind: ModelKind::MessagePassing,
            strategy: GraphStrategy::Retrieval,
            model_config: ModelConfig::default(),
            n_nodes: 8,
            stride: 5,
            epoch: 0,
            seed: 99,
            rng_seed: rng.get_seed(),
            rng_word_pos: rng.get_word_pos(),
            rng_stream: rng.get_stream(),
            params: ParamSet::new(),
        };
        let mut resumed = ckpt.resume_rng();
        assert_eq!(rng.random::<f64>(), resumed.random::<f64>());
    }

    #[test]
    fn epoch_record_formats_as_key_value_line() {
        let r = EpochRecord {
            epoch: 3,
            lr: 5e-5,
            train_loss: -1.5,
            val_loss: Some(-1.2),
            val_median_translation_m: Some(0.15),
            val_median_rotation_deg: Some(4.5),
        };
        let line = r.to_string();
        assert!(line.starts_with("epoch=3 "));
        assert!(line.contains("val_trans_m=0.15"));
    }

    #[test]
    fn training_gradients_check_against_finite_differences() {
        let config = ModelConfig {
            width: 8,
            attn_factor: 2,
            rounds: 2,
        };
        for kind in [ModelKind::MessagePassing, ModelKind::PairwiseMlp] {
            let report = check_training_gradients(config, kind, 3, 7, 6).unwrap();
            for block in &report {
                assert!(
                    block.max_rel_err < 1e-4,
                    "{:?} {}: rel err {}",
                    kind,
                    block.name,
                    block.max_rel_err
                );
            }
        }
    }

    #[test]
    fn gradient_check_covers_every_parameter_block() {
        let config = ModelConfig {
            width: 8,
            attn_factor: 2,
            rounds: 1,
        };
        let report =
            check_training_gradients(config, ModelKind::MessagePassing, 3, 7, 2).unwrap();
        let model = Model::init(
            config,
            ModelKind::MessagePassing,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        let names: Vec<&str> = report.iter().map(|b| b.name.as_str()).collect();
        for id in model.params().ids() {
            assert!(names.contains(&model.params().name(id)));
        }
        assert!(report.iter().all(|b| b.entries_checked >= 1));
    }
}
