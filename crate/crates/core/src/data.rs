//! Synthetic scene generation and the dataset file formats.
//!
//! A scene is a set of camera poses along smooth seeded trajectories inside
//! an axis-aligned box. Each pose is turned into a retrieval embedding and
//! a node feature vector by fixed random-Fourier feature maps over the 6-D
//! pose coordinates (translation plus quaternion log): every output
//! coordinate is an independent band-limited random function of pose, so
//! embedding similarity decays smoothly with pose distance and retrieval
//! behaves like a real image descriptor. Gaussian noise keeps the maps from
//! being exactly invertible; test trajectories are generated separately
//! from the training ones.
//!
//! Records are stored in a little-endian binary format (magic "GLDS"); a
//! whitespace-delimited text import is supported for externally computed
//! embeddings. See `read_dataset` for the exact layouts.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::pose::{canonicalize, quat_exp, quat_log, Pose, RotVec, UnitQuaternion};
use crate::retrieval::ImageRecord;

const DATASET_MAGIC: &[u8; 4] = b"GLDS";
const DATASET_VERSION: u32 = 1;

/// Shape of a generated scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub train_count: usize,
    pub test_count: usize,
    pub volume_min: [f64; 3],
    pub volume_max: [f64; 3],
    pub trajectory: TrajectoryKind,
    pub embedding_dim: usize,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    /// Random frequencies per output coordinate of each feature map.
    pub rff_count: usize,
    /// Scale of the position-dependent viewing-direction field, radians.
    pub rot_amplitude: f64,
    /// Per-frame independent rotation jitter, radians.
    pub rot_jitter: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajectoryKind {
    RandomWalk,
    Loops,
}

impl Default for SceneConfig {
    /// Desk-scale default: a 2 m box, 500 training and 100 test records,
    /// 32-wide embeddings and features.
    fn default() -> Self {
        SceneConfig {
            train_count: 500,
            test_count: 100,
            volume_min: [-1.0; 3],
            volume_max: [1.0; 3],
            trajectory: TrajectoryKind::RandomWalk,
            embedding_dim: 32,
            feature_dim: 32,
            noise_sigma: 0.05,
            rff_count: 16,
            rot_amplitude: 0.35,
            rot_jitter: 0.05,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_count == 0 || self.test_count == 0 {
            return Err(Error::InvalidArgument(
                "scene needs positive train and test counts".into(),
            ));
        }
        if self.embedding_dim == 0 || self.feature_dim == 0 || self.rff_count == 0 {
            return Err(Error::InvalidArgument(
                "scene dimensions must be positive".into(),
            ));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::InvalidArgument("negative noise sigma".into()));
        }
        if self.rot_amplitude < 0.0 || self.rot_jitter < 0.0 {
            return Err(Error::InvalidArgument(
                "negative rotation field scale".into(),
            ));
        }
        for k in 0..3 {
            if !(self.volume_min[k] < self.volume_max[k]) {
                return Err(Error::InvalidArgument(format!(
                    "degenerate volume on axis {k}"
                )));
            }
        }
        Ok(())
    }

    /// Diagonal of the scene box in meters.
    pub fn diameter(&self) -> f64 {
        let mut s = 0.0;
        for k in 0..3 {
            let d = self.volume_max[k] - self.volume_min[k];
            s += d * d;
        }
        s.sqrt()
    }
}

/// In-memory form of one dataset file: dimensions plus records.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFile {
    pub embedding_dim: usize,
    pub feature_dim: usize,
    pub records: Vec<ImageRecord>,
}

/// Band-limited random map from pose to a feature vector. Every output
/// coordinate sums `bank` cosines with Gaussian frequencies, giving an
/// independent smooth random function with an RBF-like correlation decay:
/// length scale `len_t` meters in translation, `len_w` radians in the
/// quaternion log.
#[derive(Debug, Clone)]
pub struct PoseFeatureMap {
    out_dim: usize,
    bank: usize,
    /// (out_dim * bank) rows of [freq; 6] over (t, log q), phase appended.
    rows: Vec<[f64; 7]>,
}

impl PoseFeatureMap {
    pub fn sample(
        out_dim: usize,
        bank: usize,
        len_t: f64,
        len_w: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut rows = Vec::with_capacity(out_dim * bank);
        for _ in 0..out_dim * bank {
            let mut row = [0.0; 7];
            for slot in row.iter_mut().take(3) {
                let g: f64 = rng.sample(StandardNormal);
                *slot = g / len_t;
            }
            for slot in row.iter_mut().take(6).skip(3) {
                let g: f64 = rng.sample(StandardNormal);
                *slot = g / len_w;
            }
            row[6] = rng.random::<f64>() * std::f64::consts::TAU;
            rows.push(row);
        }
        PoseFeatureMap {
            out_dim,
            bank,
            rows,
        }
    }

    pub fn eval(&self, pose: &Pose) -> Vec<f64> {
        let w = quat_log(canonicalize(pose.q));
        let z = [
            pose.t[0], pose.t[1], pose.t[2], w.0[0], w.0[1], w.0[2],
        ];
        let amp = (2.0 / self.bank as f64).sqrt();
        let mut out = Vec::with_capacity(self.out_dim);
        for d in 0..self.out_dim {
            let mut acc = 0.0;
            for row in &self.rows[d * self.bank..(d + 1) * self.bank] {
                let phase: f64 = row[6]
                    + row[0] * z[0]
                    + row[1] * z[1]
                    + row[2] * z[2]
                    + row[3] * z[3]
                    + row[4] * z[4]
                    + row[5] * z[5];
                acc += phase.cos();
            }
            out.push(amp * acc);
        }
        out
    }
}

/// Deterministic scene generation: returns (train, test) datasets sharing
/// one pair of feature maps, with test poses drawn from separate
/// trajectories.
pub fn generate_scene(config: &SceneConfig) -> Result<(DatasetFile, DatasetFile)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let diam = config.diameter();

    // The embedding map decays over roughly 20% of the scene diameter so
    // retrieval separates nearby from distant poses; the feature map is
    // gentler so the regression target varies smoothly over neighborhoods.
    let emb_map = PoseFeatureMap::sample(config.embedding_dim, config.rff_count, 0.2 * diam, 0.5, &mut rng);
    let feat_map = PoseFeatureMap::sample(config.feature_dim, config.rff_count, 0.5 * diam, 1.0, &mut rng);
    // Viewing direction varies smoothly with position, as it does for a
    // camera carried through a scene: rotation is a random field over
    // translation plus small per-frame jitter.
    let rot_field = PoseFeatureMap::sample(3, 8, 0.5 * diam, 1.0, &mut rng);

    let train_poses = trajectory(config, config.train_count, &rot_field, &mut rng);
    let test_poses = trajectory(config, config.test_count, &rot_field, &mut rng);

    let make = |prefix: &str, poses: &[Pose], rng: &mut ChaCha8Rng| -> Vec<ImageRecord> {
        poses
            .iter()
            .enumerate()
            .map(|(i, pose)| {
                let mut embedding = emb_map.eval(pose);
                let mut feature = feat_map.eval(pose);
                for v in embedding.iter_mut().chain(feature.iter_mut()) {
                    let g: f64 = rng.sample(StandardNormal);
                    *v += config.noise_sigma * g;
                }
                normalize(&mut embedding);
                ImageRecord {
                    id: format!("{prefix}_{i:04}"),
                    retrieval_embedding: embedding,
                    feature_vector: feature,
                    pose: Some(*pose),
                }
            })
            .collect()
    };

    let train = make("train", &train_poses, &mut rng);
    let test = make("test", &test_poses, &mut rng);
    Ok((
        DatasetFile {
            embedding_dim: config.embedding_dim,
            feature_dim: config.feature_dim,
            records: train,
        },
        DatasetFile {
            embedding_dim: config.embedding_dim,
            feature_dim: config.feature_dim,
            records: test,
        },
    ))
}

fn trajectory(
    config: &SceneConfig,
    count: usize,
    rot_field: &PoseFeatureMap,
    rng: &mut ChaCha8Rng,
) -> Vec<Pose> {
    let translations = match config.trajectory {
        TrajectoryKind::RandomWalk => walk_translations(config, count, rng),
        TrajectoryKind::Loops => loop_translations(config, count, rng),
    };
    translations
        .into_iter()
        .map(|t| {
            let field = rot_field.eval(&Pose {
                t,
                q: UnitQuaternion::IDENTITY,
            });
            let mut w = [0.0; 3];
            for (k, slot) in w.iter_mut().enumerate() {
                let g: f64 = rng.sample(StandardNormal);
                *slot = config.rot_amplitude * field[k] + config.rot_jitter * g;
            }
            reflect_ball(&mut w, 1.2);
            Pose {
                t,
                q: quat_exp(RotVec(w)),
            }
        })
        .collect()
}

/// Reflecting random walks, restarted from a fresh uniform point every 64
/// poses. A single diffusive walk clusters its samples; independent
/// segments spread the same budget across the volume the way separate
/// capture passes through a scene do.
fn walk_translations(config: &SceneConfig, count: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let lo = config.volume_min;
    let hi = config.volume_max;
    let max_extent = (0..3).map(|k| hi[k] - lo[k]).fold(0.0, f64::max);
    let step_t = 0.08 * max_extent;
    let segment = 64;

    let mut out = Vec::with_capacity(count);
    let mut t = [0.0; 3];
    for i in 0..count {
        if i % segment == 0 {
            for k in 0..3 {
                t[k] = lo[k] + rng.random::<f64>() * (hi[k] - lo[k]);
            }
        }
        out.push(t);
        for k in 0..3 {
            let g: f64 = rng.sample(StandardNormal);
            t[k] += step_t * g;
            if t[k] < lo[k] {
                t[k] = 2.0 * lo[k] - t[k];
            }
            if t[k] > hi[k] {
                t[k] = 2.0 * hi[k] - t[k];
            }
            t[k] = t[k].clamp(lo[k], hi[k]);
        }
    }
    out
}

/// Elliptical loops, phases and radii drawn per trajectory so train and
/// test paths differ.
fn loop_translations(config: &SceneConfig, count: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let lo = config.volume_min;
    let hi = config.volume_max;
    let center = [
        (lo[0] + hi[0]) / 2.0,
        (lo[1] + hi[1]) / 2.0,
        (lo[2] + hi[2]) / 2.0,
    ];
    let scale = 0.25 + 0.2 * rng.random::<f64>();
    let rx = scale * (hi[0] - lo[0]);
    let ry = scale * (hi[1] - lo[1]);
    let az = 0.3 * (hi[2] - lo[2]);
    let phase0 = rng.random::<f64>() * std::f64::consts::TAU;
    let phase1 = rng.random::<f64>() * std::f64::consts::TAU;
    let turns = 2.0 + rng.random::<f64>();

    (0..count)
        .map(|i| {
            let theta = phase0 + std::f64::consts::TAU * turns * i as f64 / count as f64;
            [
                center[0] + rx * theta.cos(),
                center[1] + ry * theta.sin(),
                center[2] + az * (2.0 * theta + phase1).sin(),
            ]
        })
        .collect()
}

fn reflect_ball(w: &mut [f64; 3], radius: f64) {
    let n = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
    if n > radius {
        let s = ((2.0 * radius - n).max(0.0)) / n;
        for v in w.iter_mut() {
            *v *= s;
        }
    }
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
}

/// Writes the little-endian binary dataset format. Quaternions must be
/// unit within 1e-6 and are stored with w >= 0 (sign-flipped if needed,
/// never renormalized, so round trips are bit-exact); poseless records
/// store an identity pose with the flag cleared.
pub fn write_dataset(file: &DatasetFile, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    w.write_all(&(file.records.len() as u64).to_le_bytes())?;
    w.write_all(&(file.embedding_dim as u32).to_le_bytes())?;
    w.write_all(&(file.feature_dim as u32).to_le_bytes())?;
    for r in &file.records {
        if r.retrieval_embedding.len() != file.embedding_dim
            || r.feature_vector.len() != file.feature_dim
        {
            return Err(Error::DimensionMismatch(format!(
                "record {} does not match dataset dimensions",
                r.id
            )));
        }
        let id = r.id.as_bytes();
        w.write_all(&(id.len() as u32).to_le_bytes())?;
        w.write_all(id)?;
        for v in r.retrieval_embedding.iter().chain(&r.feature_vector) {
            w.write_all(&v.to_le_bytes())?;
        }
        match &r.pose {
            Some(p) => {
                let norm = p.q.norm();
                if (norm - 1.0).abs() > 1e-6 {
                    return Err(Error::NonUnitQuaternion { norm });
                }
                // sign flip only: stored bits stay faithful to the values
                let s = if p.q.w < 0.0 { -1.0 } else { 1.0 };
                w.write_all(&[1u8])?;
                for v in [
                    p.t[0],
                    p.t[1],
                    p.t[2],
                    s * p.q.w,
                    s * p.q.x,
                    s * p.q.y,
                    s * p.q.z,
                ] {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            None => {
                w.write_all(&[0u8])?;
                for v in [0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0f64] {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset, auto-detecting the format: files starting with the
/// binary magic parse as binary, anything else as the text import format
/// (`d=<D> c=<C>` header line, then one record per line: id, D+C values,
/// optionally t xyz + q wxyz; `#` starts a comment).
pub fn read_dataset(path: &Path) -> Result<DatasetFile> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.len() >= 4 && &bytes[..4] == DATASET_MAGIC {
        read_binary(&bytes)
    } else {
        read_text(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::CorruptFile(format!(
                "unexpected end of file at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

fn read_binary(bytes: &[u8]) -> Result<DatasetFile> {
    let mut c = Cursor { bytes, pos: 4 };
    let version = c.u32()?;
    if version != DATASET_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: DATASET_VERSION,
        });
    }
    let count = c.u64()? as usize;
    let embedding_dim = c.u32()? as usize;
    let feature_dim = c.u32()? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let id_len = c.u32()? as usize;
        let id = String::from_utf8(c.take(id_len)?.to_vec())
            .map_err(|_| Error::CorruptFile("record id is not valid UTF-8".into()))?;
        let mut retrieval_embedding = Vec::with_capacity(embedding_dim);
        for _ in 0..embedding_dim {
            retrieval_embedding.push(c.f64()?);
        }
        let mut feature_vector = Vec::with_capacity(feature_dim);
        for _ in 0..feature_dim {
            feature_vector.push(c.f64()?);
        }
        let has_pose = c.u8()?;
        let t = [c.f64()?, c.f64()?, c.f64()?];
        let q = UnitQuaternion::new(c.f64()?, c.f64()?, c.f64()?, c.f64()?);
        let pose = if has_pose != 0 {
            let norm = q.norm();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::NonUnitQuaternion { norm });
            }
            Some(Pose { t, q })
        } else {
            None
        };
        records.push(ImageRecord {
            id,
            retrieval_embedding,
            feature_vector,
            pose,
        });
    }
    if c.pos != bytes.len() {
        return Err(Error::CorruptFile(format!(
            "{} trailing bytes after the last record",
            bytes.len() - c.pos
        )));
    }
    Ok(DatasetFile {
        embedding_dim,
        feature_dim,
        records,
    })
}

fn read_text(bytes: &[u8]) -> Result<DatasetFile> {
    let text = std::str::from_utf8(bytes)
        .map_err(|_| Error::CorruptFile("dataset is neither binary nor UTF-8 text".into()))?;
    let mut lines = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty());

    let header = lines
        .next()
        .ok_or_else(|| Error::CorruptFile("empty text dataset".into()))?;
    let mut d: Option<usize> = None;
    let mut c: Option<usize> = None;
    for tok in header.split_whitespace() {
        if let Some(v) = tok.strip_prefix("d=") {
            d = v.parse().ok();
        } else if let Some(v) = tok.strip_prefix("c=") {
            c = v.parse().ok();
        }
    }
    let (embedding_dim, feature_dim) = match (d, c) {
        (Some(d), Some(c)) if d > 0 && c > 0 => (d, c),
        _ => {
            return Err(Error::CorruptFile(
                "text dataset header must be `d=<dim> c=<dim>`".into(),
            ))
        }
    };

    let mut records = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let mut toks = line.split_whitespace();
        let id = toks.next().unwrap().to_string();
        let values: Vec<f64> = toks
            .map(|t| {
                t.parse::<f64>().map_err(|_| {
                    Error::CorruptFile(format!(
                        "record {lineno}: bad numeric token `{t}`"
                    ))
                })
            })
            .collect::<Result<_>>()?;
        let base = embedding_dim + feature_dim;
        let pose = match values.len() {
            n if n == base => None,
            n if n == base + 7 => {
                let q = UnitQuaternion::new(
                    values[base + 3],
                    values[base + 4],
                    values[base + 5],
                    values[base + 6],
                );
                let norm = q.norm();
                if (norm - 1.0).abs() > 1e-6 {
                    return Err(Error::NonUnitQuaternion { norm });
                }
                Some(Pose {
                    t: [values[base], values[base + 1], values[base + 2]],
                    q: canonicalize(q),
                })
            }
            n => {
                return Err(Error::CorruptFile(format!(
                    "record {lineno}: expected {base} or {} values, found {n}",
                    base + 7
                )))
            }
        };
        let mut retrieval_embedding = values[..embedding_dim].to_vec();
        // external embeddings are normalized on import
        normalize(&mut retrieval_embedding);
        records.push(ImageRecord {
            id,
            retrieval_embedding,
            feature_vector: values[embedding_dim..base].to_vec(),
            pose,
        });
    }
    Ok(DatasetFile {
        embedding_dim,
        feature_dim,
        records,
    })
}
