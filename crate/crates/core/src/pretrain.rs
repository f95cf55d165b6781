//! Self-supervised pre-training of the feature extractor.
//!
//! No pose labels are needed: a cloud and a randomly transformed copy of
//! itself provide free correspondence. Each anchor point (chosen by farthest
//! point sampling for coverage) pairs with the same point in the transformed
//! copy as its positive, and with one of its geometrically farthest points
//! as its negative. A margin triplet objective plus an L1 sparsity penalty
//! pulls matching features together and pushes distant geometry apart.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{derive_rng, random_transform, TransformRanges};
use crate::error::{Error, Result};
use crate::features::{extract_features, FeatureConfig, FeatureNetParams};
use crate::geometry::{farthest_point_indices, PointCloud};
use crate::losses::{l1_penalty_graph, triplet_loss_graph, DEFAULT_L1_WEIGHT, DEFAULT_MARGIN};
use crate::numeric::{
    apply_graph_sgd, collect_entries, load_checkpoint, restore_params, save_checkpoint,
    CheckpointEntry, Graph,
};

/// Pre-training hyperparameters.
#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub margin: f64,
    pub l1_weight: f64,
    /// Anchors per cloud per step, chosen by farthest point sampling.
    pub anchors_per_cloud: usize,
    /// Size of the farthest-point pool a negative is drawn from.
    pub negative_pool: usize,
    /// Motion ranges for the self-generated pair.
    pub ranges: TransformRanges,
    pub seed: u64,
}

impl PretrainConfig {
    pub fn new(seed: u64) -> Self {
        PretrainConfig {
            epochs: 30,
            learning_rate: 0.01,
            margin: DEFAULT_MARGIN,
            l1_weight: DEFAULT_L1_WEIGHT,
            anchors_per_cloud: 16,
            negative_pool: 8,
            ranges: TransformRanges::object(),
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("pretrain needs at least one epoch".into()));
        }
        if self.anchors_per_cloud == 0 {
            return Err(Error::Config("pretrain needs at least one anchor per cloud".into()));
        }
        if self.negative_pool == 0 {
            return Err(Error::Config("pretrain needs a non-empty negative pool".into()));
        }
        Ok(())
    }
}

/// Index triplets for one cloud: anchors into the source, positives and
/// negative pools into the index-aligned transformed copy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripletBatch {
    pub anchors: Vec<usize>,
    pub positives: Vec<usize>,
    /// Per anchor: the pool of farthest points, farthest first, ties to the
    /// lower index.
    pub negative_pools: Vec<Vec<usize>>,
}

/// Deterministic triplet construction. Anchors come from farthest point
/// sampling started at index 0; the positive of an anchor is the same index
/// (the transformed copy is index-aligned); the negative pool holds the
/// `pool` points Euclidean-farthest from the anchor.
pub fn build_triplets(cloud: &PointCloud, anchors: usize, pool: usize) -> Result<TripletBatch> {
    let n = cloud.len();
    if n < 2 {
        return Err(Error::Domain {
            op: "build_triplets",
            message: format!("need at least 2 points, got {n}"),
        });
    }
    let anchors = anchors.min(n);
    let pool = pool.min(n - 1);
    if pool == 0 {
        return Err(Error::Config("negative pool must be non-empty".into()));
    }
    let anchor_idx = farthest_point_indices(cloud.points(), anchors, 0)?;
    let mut negative_pools = Vec::with_capacity(anchor_idx.len());
    for &a in &anchor_idx {
        let pa = cloud.point(a);
        let mut ranked: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != a)
            .map(|j| {
                let pj = cloud.point(j);
                let d: f64 = (0..3).map(|ax| (pa[ax] - pj[ax]) * (pa[ax] - pj[ax])).sum();
                (d, j)
            })
            .collect();
        ranked.sort_unstable_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
        negative_pools.push(ranked[..pool].iter().map(|&(_, j)| j).collect());
    }
    Ok(TripletBatch {
        positives: anchor_idx.clone(),
        anchors: anchor_idx,
        negative_pools,
    })
}

/// Per-epoch pre-training trace.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainRecord {
    pub epoch: usize,
    pub mean_loss: f64,
}

/// Result of a pre-training run. `aborted` carries a reason when the run
/// stopped early (non-finite loss); parameters keep their last good values.
#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub records: Vec<PretrainRecord>,
    pub aborted: Option<String>,
}

/// Runs triplet pre-training in place on `params`.
pub fn pretrain(
    params: &mut FeatureNetParams,
    clouds: &[PointCloud],
    cfg: &PretrainConfig,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if clouds.is_empty() {
        return Err(Error::Config("pretrain needs at least one cloud".into()));
    }
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        for (ci, cloud) in clouds.iter().enumerate() {
            let stream = (epoch * clouds.len() + ci + 1) as u64;
            let mut rng = derive_rng(cfg.seed, stream);
            let motion = random_transform(&cfg.ranges, &mut rng);
            let moved = motion.apply_cloud(cloud);
            let batch = build_triplets(cloud, cfg.anchors_per_cloud, cfg.negative_pool)?;
            let negatives: Vec<usize> = batch
                .negative_pools
                .iter()
                .map(|pool| pool[rng.gen_range(0..pool.len())])
                .collect();

            let mut g = Graph::new();
            let vars = params.bind(&mut g);
            let bound = vars.all_vars();
            let f1 = vars.forward(&mut g, cloud)?;
            let f2 = vars.forward(&mut g, &moved)?;
            let a = g.gather_rows(f1, &batch.anchors)?;
            let p = g.gather_rows(f2, &batch.positives)?;
            let n = g.gather_rows(f2, &negatives)?;
            let trip = triplet_loss_graph(&mut g, a, p, n, cfg.margin)?;
            let total = if cfg.l1_weight > 0.0 {
                let l1 = l1_penalty_graph(&mut g, &bound)?;
                let scaled = g.scale(l1, cfg.l1_weight)?;
                g.add(trip, scaled)?
            } else {
                trip
            };
            let loss = g.value(total).values()[0];
            if !loss.is_finite() {
                return Ok(PretrainOutcome {
                    records,
                    aborted: Some(format!(
                        "non-finite loss {loss} at epoch {epoch}, cloud {ci}; parameters keep their last good values"
                    )),
                });
            }
            g.backward(total)?;
            apply_graph_sgd(params, &g, &bound, cfg.learning_rate)?;
            epoch_loss += loss;
        }
        records.push(PretrainRecord {
            epoch,
            mean_loss: epoch_loss / clouds.len() as f64,
        });
    }
    Ok(PretrainOutcome { records, aborted: None })
}

/// Fraction of held-out triplets whose anchor feature lies closer to its
/// positive than to every pooled negative. Uses motion streams disjoint from
/// the training streams of the same seed.
pub fn triplet_satisfaction(
    params: &FeatureNetParams,
    clouds: &[PointCloud],
    cfg: &PretrainConfig,
) -> Result<f64> {
    cfg.validate()?;
    if clouds.is_empty() {
        return Err(Error::Config("evaluation needs at least one cloud".into()));
    }
    let mut satisfied = 0usize;
    let mut total = 0usize;
    for (ci, cloud) in clouds.iter().enumerate() {
        // high-bit stream marker keeps evaluation motions off the training streams
        let mut rng = derive_rng(cfg.seed, (1u64 << 63) | (ci as u64 + 1));
        let motion = random_transform(&cfg.ranges, &mut rng);
        let moved = motion.apply_cloud(cloud);
        let batch = build_triplets(cloud, cfg.anchors_per_cloud, cfg.negative_pool)?;
        let f1 = extract_features(cloud, params)?;
        let f2 = extract_features(&moved, params)?;
        let dist = |x: &[f64], y: &[f64]| -> f64 {
            x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
        };
        for (i, &a) in batch.anchors.iter().enumerate() {
            let fa = f1.row(a);
            let dp = dist(fa, f2.row(batch.positives[i]));
            for &neg in &batch.negative_pools[i] {
                total += 1;
                if dp < dist(fa, f2.row(neg)) {
                    satisfied += 1;
                }
            }
        }
    }
    Ok(satisfied as f64 / total as f64)
}

const FEATURE_META_PATH: &str = "meta.feature_config";
const FEATURE_META_VERSION: f64 = 1.0;

fn encode_feature_config(c: &FeatureConfig) -> CheckpointEntry {
    CheckpointEntry {
        path: FEATURE_META_PATH.into(),
        shape: vec![7],
        values: vec![
            FEATURE_META_VERSION,
            c.point_width as f64,
            c.cart_width as f64,
            c.feat_width as f64,
            c.out_width as f64,
            c.k_cartesian as f64,
            c.k_feature as f64,
        ],
    }
}

pub(crate) fn meta_usize(v: f64, what: &str) -> Result<usize> {
    if v.fract() == 0.0 && (0.0..=u32::MAX as f64).contains(&v) {
        Ok(v as usize)
    } else {
        Err(Error::Checkpoint(format!("{what} must be a small integer, got {v}")))
    }
}

fn decode_feature_config(e: &CheckpointEntry) -> Result<FeatureConfig> {
    if e.values.len() != 7 {
        return Err(Error::Checkpoint(format!(
            "feature architecture entry has {} fields, expected 7",
            e.values.len()
        )));
    }
    if e.values[0] != FEATURE_META_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported feature architecture version {}",
            e.values[0]
        )));
    }
    Ok(FeatureConfig {
        point_width: meta_usize(e.values[1], "point_width")?,
        cart_width: meta_usize(e.values[2], "cart_width")?,
        feat_width: meta_usize(e.values[3], "feat_width")?,
        out_width: meta_usize(e.values[4], "out_width")?,
        k_cartesian: meta_usize(e.values[5], "k_cartesian")?,
        k_feature: meta_usize(e.values[6], "k_feature")?,
    })
}

/// Saves pre-trained extractor weights together with their architecture.
pub fn save_feature_params(path: &Path, params: &FeatureNetParams) -> Result<()> {
    let mut entries = collect_entries(params);
    entries.push(encode_feature_config(&params.config));
    save_checkpoint(path, &entries)
}

/// Loads extractor weights saved by [`save_feature_params`], reconstructing
/// the architecture from the embedded description.
pub fn load_feature_params(path: &Path) -> Result<FeatureNetParams> {
    let entries = load_checkpoint(path)?;
    let meta = entries
        .iter()
        .find(|e| e.path == FEATURE_META_PATH)
        .ok_or_else(|| {
            Error::Checkpoint(format!("missing architecture entry {FEATURE_META_PATH:?}"))
        })?;
    let config = decode_feature_config(meta)?;
    let mut params = FeatureNetParams::init(config, &mut ChaCha8Rng::seed_from_u64(0))?;
    restore_params(&mut params, &entries)?;
    Ok(params)
}
