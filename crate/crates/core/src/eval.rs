//! Inference and evaluation: localizing queries against a posed database,
//! per-query error reports with lower-middle medians, the validation
//! summary used during training, and the ablation driver.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gnn::{features_for_graph, EdgeMask, Model};
use crate::pose::{
    quaternion_mean, recover_absolute, relative_target, rotation_error_deg, weiszfeld_median,
    Pose, RelPoseTarget,
};
use crate::retrieval::{
    build_query_graph, build_random_query_graph, EmbeddingDatabase, GraphSpec, ImageRecord,
};
use crate::tensor::{NodeId, Tape};
use crate::train::{fit, graph_loss, Checkpoint, GraphStrategy, TrainConfig};

/// Inference-time knobs. Overrides default to the values stored in the
/// checkpoint; forcing a different round count is an explicit opt-in
/// because a depth the weights were not trained for degrades accuracy.
#[derive(Debug, Clone, Default)]
pub struct LocalizeOptions {
    pub use_geometric_averaging: bool,
    pub n_nodes: Option<usize>,
    pub stride: Option<usize>,
    pub force_rounds: Option<usize>,
}

/// One localized query: the reported pose plus the per-neighbor estimates
/// it was chosen or averaged from (node order 1..N-1, most similar first
/// under retrieval graphs).
#[derive(Debug, Clone)]
pub struct QueryResult {
    pub estimate: Pose,
    pub neighbor_estimates: Vec<Pose>,
}

/// Per-query errors against ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryError {
    pub id: String,
    pub translation_m: f64,
    pub rotation_deg: f64,
}

/// Evaluation over a query set.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub geometric_averaging: bool,
    pub median_translation_m: f64,
    pub median_rotation_deg: f64,
    pub per_query: Vec<QueryError>,
}

impl EvalReport {
    /// Line-delimited key=value header followed by one whitespace-separated
    /// row per query.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("queries={}\n", self.per_query.len()));
        out.push_str(&format!(
            "geometric_averaging={}\n",
            self.geometric_averaging
        ));
        out.push_str(&format!(
            "median_translation_m={}\n",
            self.median_translation_m
        ));
        out.push_str(&format!("median_rotation_deg={}\n", self.median_rotation_deg));
        out.push_str("query_id translation_m rotation_deg\n");
        for q in &self.per_query {
            out.push_str(&format!("{} {} {}\n", q.id, q.translation_m, q.rotation_deg));
        }
        out
    }
}

/// Median as the lower of the two middle order statistics, so the value is
/// always one that actually occurred.
pub fn lower_median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput("error values"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v[(v.len() - 1) / 2])
}

fn translation_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3)
        .map(|k| (a[k] - b[k]) * (a[k] - b[k]))
        .sum::<f64>()
        .sqrt()
}

/// Seed for the per-query RNG of random-graph inference: stable under
/// query reordering so evaluation stays deterministic and order-free.
fn query_stream_seed(seed: u64, id: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in id.as_bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^ seed
}

fn query_graph(
    db: &EmbeddingDatabase,
    query: &ImageRecord,
    strategy: GraphStrategy,
    n_nodes: usize,
    stride: usize,
    seed: u64,
) -> Result<GraphSpec> {
    match strategy {
        GraphStrategy::Retrieval => build_query_graph(
            db,
            &query.id,
            &query.retrieval_embedding,
            n_nodes,
            stride,
        ),
        GraphStrategy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(query_stream_seed(seed, &query.id));
            build_random_query_graph(db, &query.id, n_nodes, &mut rng)
        }
    }
}

fn rel_from_values(v: &[f64]) -> RelPoseTarget {
    RelPoseTarget {
        dt: [v[0], v[1], v[2]],
        dw: [v[3], v[4], v[5]],
    }
}

/// Forward one query graph with every edge active and pull the numeric
/// predictions off the tape: all active ordered edges in slot order, plus
/// the neighbor-to-query relatives used for localization.
fn forward_query(
    model: &Model,
    db: &EmbeddingDatabase,
    query: &ImageRecord,
    graph: &GraphSpec,
    rounds: usize,
) -> Result<(Vec<((usize, usize), RelPoseTarget)>, Vec<RelPoseTarget>)> {
    let features = features_for_graph(graph, db, Some(query))?;
    let n = features.len();
    let mut tape = Tape::new(model.params());
    let ids: Vec<NodeId> = features.into_iter().map(|f| tape.constant(f)).collect();
    let preds = model.forward(&mut tape, &ids, &EdgeMask::full(n), rounds);
    let all: Vec<((usize, usize), RelPoseTarget)> = preds
        .active()
        .map(|(edge, node)| (edge, rel_from_values(tape.value(node).as_slice())))
        .collect();
    let to_query = (1..n)
        .map(|i| {
            let node = preds.get(i, 0).expect("full mask keeps every edge");
            rel_from_values(tape.value(node).as_slice())
        })
        .collect();
    Ok((all, to_query))
}

fn neighbor_estimates(
    db: &EmbeddingDatabase,
    graph: &GraphSpec,
    to_query: &[RelPoseTarget],
) -> Result<Vec<Pose>> {
    graph
        .neighbors
        .iter()
        .zip(to_query)
        .map(|(&idx, rel)| {
            let record = db.get(idx);
            let pose = record.pose.ok_or_else(|| {
                Error::InvalidArgument(format!("database record {} has no pose", record.id))
            })?;
            Ok(recover_absolute(&pose, rel))
        })
        .collect()
}

fn combine(estimates: &[Pose], use_geometric_averaging: bool) -> Pose {
    if !use_geometric_averaging {
        return estimates[0];
    }
    let points: Vec<[f64; 3]> = estimates.iter().map(|p| p.t).collect();
    let quats: Vec<_> = estimates.iter().map(|p| p.q).collect();
    Pose {
        t: weiszfeld_median(&points),
        q: quaternion_mean(&quats),
    }
}

fn localize_with_model(
    model: &Model,
    db: &EmbeddingDatabase,
    query: &ImageRecord,
    strategy: GraphStrategy,
    n_nodes: usize,
    stride: usize,
    rounds: usize,
    seed: u64,
    use_geometric_averaging: bool,
) -> Result<QueryResult> {
    let graph = query_graph(db, query, strategy, n_nodes, stride, seed)?;
    let (_, to_query) = forward_query(model, db, query, &graph, rounds)?;
    let estimates = neighbor_estimates(db, &graph, &to_query)?;
    Ok(QueryResult {
        estimate: combine(&estimates, use_geometric_averaging),
        neighbor_estimates: estimates,
    })
}

/// Localizes one query with a trained checkpoint. The round count always
/// comes from the checkpoint unless explicitly forced.
pub fn localize(
    db: &EmbeddingDatabase,
    ckpt: &Checkpoint,
    query: &ImageRecord,
    opts: &LocalizeOptions,
) -> Result<QueryResult> {
    let model = ckpt.model()?;
    localize_with_model(
        &model,
        db,
        query,
        ckpt.strategy,
        opts.n_nodes.unwrap_or(ckpt.n_nodes),
        opts.stride.unwrap_or(ckpt.stride),
        opts.force_rounds.unwrap_or(ckpt.model_config.rounds),
        ckpt.seed,
        opts.use_geometric_averaging,
    )
}

/// Localizes every query and reports per-query and median errors against
/// ground truth.
pub fn evaluate(
    db: &EmbeddingDatabase,
    ckpt: &Checkpoint,
    queries: &[ImageRecord],
    opts: &LocalizeOptions,
) -> Result<EvalReport> {
    let model = ckpt.model()?;
    if queries.is_empty() {
        return Err(Error::EmptyInput("query records"));
    }
    let mut per_query = Vec::with_capacity(queries.len());
    for q in queries {
        let gt = q
            .pose
            .ok_or_else(|| Error::InvalidArgument(format!("query {} has no pose", q.id)))?;
        let result = localize_with_model(
            &model,
            db,
            q,
            ckpt.strategy,
            opts.n_nodes.unwrap_or(ckpt.n_nodes),
            opts.stride.unwrap_or(ckpt.stride),
            opts.force_rounds.unwrap_or(ckpt.model_config.rounds),
            ckpt.seed,
            opts.use_geometric_averaging,
        )?;
        per_query.push(QueryError {
            id: q.id.clone(),
            translation_m: translation_distance(&result.estimate.t, &gt.t),
            rotation_deg: rotation_error_deg(&result.estimate.q, &gt.q),
        });
    }
    let trans: Vec<f64> = per_query.iter().map(|q| q.translation_m).collect();
    let rots: Vec<f64> = per_query.iter().map(|q| q.rotation_deg).collect();
    Ok(EvalReport {
        geometric_averaging: opts.use_geometric_averaging,
        median_translation_m: lower_median(&trans)?,
        median_rotation_deg: lower_median(&rots)?,
        per_query,
    })
}

/// Per-epoch validation metrics: mean graph loss over query graphs plus
/// the median localization errors, mirroring evaluation defaults.
pub struct ValidationSummary {
    pub loss: f64,
    pub median_translation_m: f64,
    pub median_rotation_deg: f64,
}

pub fn validation_summary(
    model: &Model,
    db: &EmbeddingDatabase,
    queries: &[ImageRecord],
    config: &TrainConfig,
) -> Result<ValidationSummary> {
    if queries.is_empty() {
        return Err(Error::EmptyInput("validation records"));
    }
    let mut loss_sum = 0.0;
    let mut trans = Vec::with_capacity(queries.len());
    let mut rots = Vec::with_capacity(queries.len());
    let (beta_id, gamma_id) = model.loss_weight_ids();
    let beta = model.params().value(beta_id).get(0, 0);
    let gamma = model.params().value(gamma_id).get(0, 0);
    for q in queries {
        let gt = q
            .pose
            .ok_or_else(|| Error::InvalidArgument(format!("query {} has no pose", q.id)))?;
        let graph = query_graph(db, q, config.strategy, config.n_nodes, config.stride, config.seed)?;
        let (all, to_query) = forward_query(model, db, q, &graph, config.model.rounds)?;
        let poses = node_poses(db, &graph, q)?;
        let pairs: Vec<(RelPoseTarget, RelPoseTarget)> = all
            .into_iter()
            .map(|((i, j), pred)| (pred, relative_target(&poses[i], &poses[j])))
            .collect();
        loss_sum += graph_loss(&pairs, beta, gamma)?;
        let estimates = neighbor_estimates(db, &graph, &to_query)?;
        let est = combine(&estimates, false);
        trans.push(translation_distance(&est.t, &gt.t));
        rots.push(rotation_error_deg(&est.q, &gt.q));
    }
    Ok(ValidationSummary {
        loss: loss_sum / queries.len() as f64,
        median_translation_m: lower_median(&trans)?,
        median_rotation_deg: lower_median(&rots)?,
    })
}

fn node_poses(db: &EmbeddingDatabase, graph: &GraphSpec, query: &ImageRecord) -> Result<Vec<Pose>> {
    graph
        .node_ids
        .iter()
        .map(|id| {
            let record = match db.index_of(id) {
                Some(idx) => db.get(idx),
                None if &query.id == id => query,
                None => return Err(Error::UnknownId(id.clone())),
            };
            record
                .pose
                .ok_or_else(|| Error::InvalidArgument(format!("record {id} has no pose")))
        })
        .collect()
}

/// The three ablation arms: the full model, a pairwise regressor that
/// never exchanges messages, and the full model fed random graphs at both
/// training and test time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationMode {
    Full,
    NoGraphBaseline,
    RandomGraphBaseline,
}

impl AblationMode {
    pub fn label(self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::NoGraphBaseline => "baseline1",
            AblationMode::RandomGraphBaseline => "baseline2",
        }
    }

    pub fn parse(s: &str) -> Result<AblationMode> {
        match s {
            "full" => Ok(AblationMode::Full),
            "baseline1" => Ok(AblationMode::NoGraphBaseline),
            "baseline2" => Ok(AblationMode::RandomGraphBaseline),
            other => Err(Error::InvalidArgument(format!(
                "unknown ablation mode {other:?}, expected full, baseline1, or baseline2"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRun {
    pub mode: AblationMode,
    pub seed: u64,
    pub median_translation_m: f64,
    pub median_rotation_deg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub runs: Vec<AblationRun>,
}

impl AblationReport {
    pub fn to_text(&self) -> String {
        let mut out = String::from("mode seed median_translation_m median_rotation_deg\n");
        for r in &self.runs {
            out.push_str(&format!(
                "{} {} {} {}\n",
                r.mode.label(),
                r.seed,
                r.median_translation_m,
                r.median_rotation_deg
            ));
        }
        out
    }
}

/// Trains and evaluates each requested mode at each seed. The full mode
/// runs through exactly the same fit-then-evaluate path as the standalone
/// pipeline, so its numbers are bit-identical to training separately.
pub fn run_ablation(
    db: &EmbeddingDatabase,
    queries: &[ImageRecord],
    base: &TrainConfig,
    modes: &[AblationMode],
    seeds: &[u64],
    validation: Option<&[ImageRecord]>,
) -> Result<AblationReport> {
    use crate::gnn::ModelKind;
    let mut runs = Vec::with_capacity(modes.len() * seeds.len());
    for &seed in seeds {
        for &mode in modes {
            let mut config = base.clone();
            config.seed = seed;
            match mode {
                AblationMode::Full => {
                    config.kind = ModelKind::MessagePassing;
                    config.strategy = GraphStrategy::Retrieval;
                }
                AblationMode::NoGraphBaseline => {
                    config.kind = ModelKind::PairwiseMlp;
                    config.strategy = GraphStrategy::Retrieval;
                }
                AblationMode::RandomGraphBaseline => {
                    config.kind = ModelKind::MessagePassing;
                    config.strategy = GraphStrategy::Random;
                }
            }
            let outcome = fit(db, &config, validation)?;
            let report = evaluate(db, &outcome.checkpoint, queries, &LocalizeOptions::default())?;
            log::info!(
                "ablation mode={} seed={} median_trans_m={} median_rot_deg={}",
                mode.label(),
                seed,
                report.median_translation_m,
                report.median_rotation_deg
            );
            runs.push(AblationRun {
                mode,
                seed,
                median_translation_m: report.median_translation_m,
                median_rotation_deg: report.median_rotation_deg,
            });
        }
    }
    Ok(AblationReport { runs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scene, SceneConfig};
    use crate::gnn::{ModelConfig, ModelKind};

    fn scene_db() -> (EmbeddingDatabase, Vec<ImageRecord>) {
        let scene = SceneConfig {
            train_count: 60,
            test_count: 10,
            embedding_dim: 16,
            feature_dim: 16,
            seed: 7,
            ..SceneConfig::default()
        };
        let (train, test) = generate_scene(&scene).unwrap();
        (
            EmbeddingDatabase::from_records(train.records).unwrap(),
            test.records,
        )
    }

    fn init_model(rounds: usize, seed: u64) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Model::init(
            ModelConfig {
                width: 16,
                attn_factor: 4,
                rounds,
            },
            ModelKind::MessagePassing,
            &mut rng,
        )
        .unwrap()
    }

    fn checkpoint_for(model: &Model, strategy: GraphStrategy, n_nodes: usize, stride: usize) -> Checkpoint {
        let rng = ChaCha8Rng::seed_from_u64(0);
        Checkpoint {
            kind: model.kind(),
            strategy,
            model_config: *model.config(),
            n_nodes,
            stride,
            epoch: 0,
            seed: 0,
            rng_seed: rng.get_seed(),
            rng_word_pos: rng.get_word_pos(),
            rng_stream: rng.get_stream(),
            params: model.params().clone(),
        }
    }

    fn zero_pose_head(model: &mut Model) {
        for name in ["pose_w", "pose_b"] {
            let id = model.params().find(name).unwrap();
            model.params_mut().get_mut(id).value.fill(0.0);
        }
    }

    #[test]
    fn median_is_the_lower_middle_order_statistic() {
        assert_eq!(lower_median(&[1.0, 2.0, 3.0, 4.0]).unwrap(), 2.0);
        assert_eq!(lower_median(&[4.0, 1.0, 3.0, 2.0]).unwrap(), 2.0);
        assert_eq!(lower_median(&[3.0, 1.0]).unwrap(), 1.0);
        assert_eq!(lower_median(&[5.0]).unwrap(), 5.0);
        assert_eq!(lower_median(&[2.0, 1.0, 3.0]).unwrap(), 2.0);
        assert!(matches!(lower_median(&[]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn zero_relative_prediction_returns_the_matched_record_pose() {
        let (db, _) = scene_db();
        let mut model = init_model(2, 3);
        zero_pose_head(&mut model);
        let ckpt = checkpoint_for(&model, GraphStrategy::Retrieval, 5, 1);

        let matched = db.get(3).clone();
        let query = ImageRecord {
            id: "probe".into(),
            ..matched.clone()
        };
        let result = localize(&db, &ckpt, &query, &LocalizeOptions::default()).unwrap();
        let want = matched.pose.unwrap();
        assert_eq!(result.estimate.t, want.t);
        assert!(rotation_error_deg(&result.estimate.q, &want.q) < 1e-6);

        let report = evaluate(&db, &ckpt, &[query], &LocalizeOptions::default()).unwrap();
        assert_eq!(report.median_translation_m, 0.0);
        assert!(report.median_rotation_deg < 1e-6);
    }

    #[test]
    fn geometric_averaging_reduces_to_the_shared_pose_when_estimates_agree() {
        let (db, test) = scene_db();
        let shared = db.get(0).pose.unwrap();
        let records: Vec<ImageRecord> = db
            .records()
            .iter()
            .map(|r| ImageRecord {
                pose: Some(shared),
                ..r.clone()
            })
            .collect();
        let db = EmbeddingDatabase::from_records(records).unwrap();
        let mut model = init_model(2, 3);
        zero_pose_head(&mut model);
        let ckpt = checkpoint_for(&model, GraphStrategy::Retrieval, 5, 2);

        let opts = LocalizeOptions {
            use_geometric_averaging: true,
            ..LocalizeOptions::default()
        };
        let result = localize(&db, &ckpt, &test[0], &opts).unwrap();
        for k in 0..3 {
            assert!((result.estimate.t[k] - shared.t[k]).abs() < 1e-12);
        }
        assert!(rotation_error_deg(&result.estimate.q, &shared.q) < 1e-9);
    }

    #[test]
    fn geometric_averaging_matches_direct_median_and_mean_of_estimates() {
        let (db, test) = scene_db();
        let model = init_model(2, 5);
        let ckpt = checkpoint_for(&model, GraphStrategy::Retrieval, 6, 2);

        let plain = localize(&db, &ckpt, &test[1], &LocalizeOptions::default()).unwrap();
        let averaged = localize(
            &db,
            &ckpt,
            &test[1],
            &LocalizeOptions {
                use_geometric_averaging: true,
                ..LocalizeOptions::default()
            },
        )
        .unwrap();

        assert_eq!(plain.neighbor_estimates.len(), 5);
        for (a, b) in plain
            .neighbor_estimates
            .iter()
            .zip(&averaged.neighbor_estimates)
        {
            assert_eq!(a.t, b.t);
        }
        assert_eq!(plain.estimate.t, plain.neighbor_estimates[0].t);

        let points: Vec<[f64; 3]> = plain.neighbor_estimates.iter().map(|p| p.t).collect();
        let quats: Vec<_> = plain.neighbor_estimates.iter().map(|p| p.q).collect();
        assert_eq!(averaged.estimate.t, weiszfeld_median(&points));
        assert_eq!(averaged.estimate.q, quaternion_mean(&quats));
    }

    #[test]
    fn forcing_fewer_rounds_changes_the_estimate() {
        let (db, test) = scene_db();
        let model = init_model(2, 9);
        let ckpt = checkpoint_for(&model, GraphStrategy::Retrieval, 5, 2);
        let deep = localize(&db, &ckpt, &test[0], &LocalizeOptions::default()).unwrap();
        let shallow = localize(
            &db,
            &ckpt,
            &test[0],
            &LocalizeOptions {
                force_rounds: Some(1),
                ..LocalizeOptions::default()
            },
        )
        .unwrap();
        assert_ne!(deep.estimate.t, shallow.estimate.t);
    }

    #[test]
    fn evaluation_medians_ignore_query_order() {
        let (db, test) = scene_db();
        let model = init_model(2, 11);
        let ckpt = checkpoint_for(&model, GraphStrategy::Retrieval, 5, 2);
        let forward = evaluate(&db, &ckpt, &test, &LocalizeOptions::default()).unwrap();
        let reversed: Vec<ImageRecord> = test.iter().rev().cloned().collect();
        let backward = evaluate(&db, &ckpt, &reversed, &LocalizeOptions::default()).unwrap();
        assert_eq!(
            forward.median_translation_m,
            backward.median_translation_m
        );
        assert_eq!(forward.median_rotation_deg, backward.median_rotation_deg);
    }

    #[test]
    fn random_graph_evaluation_is_deterministic_and_order_free() {
        let (db, test) = scene_db();
        let model = init_model(2, 13);
        let ckpt = checkpoint_for(&model, GraphStrategy::Random, 5, 2);
        let a = evaluate(&db, &ckpt, &test, &LocalizeOptions::default()).unwrap();
        let b = evaluate(&db, &ckpt, &test, &LocalizeOptions::default()).unwrap();
        assert_eq!(a.to_text(), b.to_text());
        let reversed: Vec<ImageRecord> = test.iter().rev().cloned().collect();
        let c = evaluate(&db, &ckpt, &reversed, &LocalizeOptions::default()).unwrap();
        assert_eq!(a.median_translation_m, c.median_translation_m);
    }

    #[test]
    fn inference_leaves_parameters_untouched() {
        let (db, test) = scene_db();
        let model = init_model(2, 17);
        let ckpt = checkpoint_for(&model, GraphStrategy::Retrieval, 5, 2);
        let before = ckpt.params.clone();
        evaluate(&db, &ckpt, &test, &LocalizeOptions::default()).unwrap();
        assert_eq!(before, ckpt.params);
    }

    #[test]
    fn validation_summary_medians_match_evaluation() {
        let (db, test) = scene_db();
        let model = init_model(2, 19);
        let config = TrainConfig {
            n_nodes: 5,
            stride: 2,
            model: *model.config(),
            ..TrainConfig::default()
        };
        let summary = validation_summary(&model, &db, &test, &config).unwrap();
        let ckpt = checkpoint_for(&model, GraphStrategy::Retrieval, 5, 2);
        let report = evaluate(&db, &ckpt, &test, &LocalizeOptions::default()).unwrap();
        assert_eq!(summary.median_translation_m, report.median_translation_m);
        assert_eq!(summary.median_rotation_deg, report.median_rotation_deg);
        assert!(summary.loss.is_finite());
    }

    #[test]
    fn ablation_full_mode_equals_the_standalone_pipeline() {
        let (db, test) = scene_db();
        let base = TrainConfig {
            epochs: 2,
            n_nodes: 5,
            stride: 2,
            model: ModelConfig {
                width: 16,
                attn_factor: 4,
                rounds: 2,
            },
            ..TrainConfig::default()
        };
        let report = run_ablation(&db, &test, &base, &[AblationMode::Full], &[4], None).unwrap();

        let mut standalone = base.clone();
        standalone.seed = 4;
        let outcome = fit(&db, &standalone, None).unwrap();
        let direct = evaluate(&db, &outcome.checkpoint, &test, &LocalizeOptions::default()).unwrap();

        assert_eq!(report.runs.len(), 1);
        assert_eq!(report.runs[0].mode.label(), "full");
        assert_eq!(report.runs[0].median_translation_m, direct.median_translation_m);
        assert_eq!(report.runs[0].median_rotation_deg, direct.median_rotation_deg);
        assert!(report.to_text().contains("full 4 "));
    }

    #[test]
    fn ablation_modes_parse_their_labels() {
        for mode in [
            AblationMode::Full,
            AblationMode::NoGraphBaseline,
            AblationMode::RandomGraphBaseline,
        ] {
            assert_eq!(AblationMode::parse(mode.label()).unwrap(), mode);
        }
        assert!(AblationMode::parse("baseline3").is_err());
    }

    #[test]
    fn report_text_lists_every_query() {
        let report = EvalReport {
            geometric_averaging: false,
            median_translation_m: 0.25,
            median_rotation_deg: 3.5,
            per_query: vec![
                QueryError {
                    id: "q0".into(),
                    translation_m: 0.25,
                    rotation_deg: 3.5,
                },
                QueryError {
                    id: "q1".into(),
                    translation_m: 0.5,
                    rotation_deg: 7.0,
                },
            ],
        };
        let text = report.to_text();
        assert!(text.starts_with("queries=2\n"));
        assert!(text.contains("median_translation_m=0.25\n"));
        assert!(text.contains("q1 0.5 7\n"));
    }
}
