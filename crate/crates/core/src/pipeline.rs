//! End-to-end registration: network assembly, inference, training,
//! checkpoints, and benchmarking.
//!
//! A [`RegistrationNet`] owns the feature extractor and the attention stage.
//! One forward pass extracts features for both clouds with shared weights,
//! runs self/cross attention, picks keypoints and candidates from the score
//! matrix, and forms virtual correspondences with the soft pointer; the
//! rigid motion then comes from the closed-form fit. Training needs no pose
//! supervision beyond the pair's relative motion: virtual points are labeled
//! by pulling them back through the true motion.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::attention::{
    attention_forward_pair, prune_by_mask, AttentionConfig, AttentionParams,
};
use crate::baseline::{icp, IcpConfig};
use crate::correspondence::{
    candidate_count, keypoint_count, label_matches, soft_pointer_graph, solve_svd,
    top_j_candidates, top_k_keypoints, CorrespondenceSet,
};
use crate::data::{derive_rng, RegistrationPair};
use crate::error::{Error, Result};
use crate::features::{FeatureConfig, FeatureNetParams};
use crate::geometry::{
    geodesic_rotation_deg, translation_error, ErrorAccumulator, PointCloud, RegistrationMetrics,
    RigidTransform,
};
use crate::losses::{
    combined_loss_graph, correspondence_loss_graph, transformation_loss, DEFAULT_ALPHA,
    DEFAULT_BETA, DEFAULT_GAMMA,
};
use crate::numeric::{
    apply_graph_sgd, collect_entries, load_checkpoint, restore_params, save_checkpoint,
    CheckpointEntry, Graph, ParamGroup, Tensor, Var,
};
use crate::pretrain::meta_usize;

/// Architecture of the full network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub feature: FeatureConfig,
    /// Attention embedding width.
    pub embed_width: usize,
    /// Hidden width of the mask head.
    pub mask_hidden: usize,
    /// Hard cap on the number of keypoints.
    pub keypoint_cap: usize,
    /// Fraction of source points kept as keypoints (before the cap).
    pub keypoint_fraction: f64,
    /// Cap on match candidates per keypoint.
    pub candidate_cap: usize,
}

impl Default for NetConfig {
    /// Full-scale architecture for 1024-point clouds.
    fn default() -> Self {
        NetConfig {
            feature: FeatureConfig {
                point_width: 64,
                cart_width: 64,
                feat_width: 128,
                out_width: 512,
                k_cartesian: 20,
                k_feature: 20,
            },
            embed_width: 1024,
            mask_hidden: 64,
            keypoint_cap: 896,
            keypoint_fraction: 0.875,
            candidate_cap: 32,
        }
    }
}

impl NetConfig {
    /// Small architecture for tests and CPU-budget experiments. Same shape
    /// and selection rules as the default, narrower everywhere.
    pub fn toy() -> Self {
        NetConfig {
            feature: FeatureConfig {
                point_width: 16,
                cart_width: 16,
                feat_width: 16,
                out_width: 32,
                k_cartesian: 8,
                k_feature: 8,
            },
            embed_width: 32,
            mask_hidden: 8,
            keypoint_cap: 896,
            keypoint_fraction: 0.875,
            candidate_cap: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.feature.validate()?;
        self.attention().validate()?;
        if self.keypoint_cap == 0 || self.candidate_cap == 0 {
            return Err(Error::Config(
                "keypoint and candidate caps must be nonzero".into(),
            ));
        }
        if !(self.keypoint_fraction > 0.0 && self.keypoint_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "keypoint fraction must lie in (0, 1]: {}",
                self.keypoint_fraction
            )));
        }
        Ok(())
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            in_width: self.feature.out_width,
            embed_width: self.embed_width,
            mask_hidden: self.mask_hidden,
        }
    }
}

const NET_META_PATH: &str = "meta.config";
const NET_META_VERSION: f64 = 1.0;

fn encode_net_config(c: &NetConfig) -> CheckpointEntry {
    CheckpointEntry {
        path: NET_META_PATH.into(),
        shape: vec![12],
        values: vec![
            NET_META_VERSION,
            c.feature.point_width as f64,
            c.feature.cart_width as f64,
            c.feature.feat_width as f64,
            c.feature.out_width as f64,
            c.feature.k_cartesian as f64,
            c.feature.k_feature as f64,
            c.embed_width as f64,
            c.mask_hidden as f64,
            c.keypoint_cap as f64,
            c.keypoint_fraction,
            c.candidate_cap as f64,
        ],
    }
}

fn decode_net_config(e: &CheckpointEntry) -> Result<NetConfig> {
    if e.values.len() != 12 {
        return Err(Error::Checkpoint(format!(
            "architecture entry has {} fields, expected 12",
            e.values.len()
        )));
    }
    if e.values[0] != NET_META_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported architecture version {}",
            e.values[0]
        )));
    }
    let config = NetConfig {
        feature: FeatureConfig {
            point_width: meta_usize(e.values[1], "point_width")?,
            cart_width: meta_usize(e.values[2], "cart_width")?,
            feat_width: meta_usize(e.values[3], "feat_width")?,
            out_width: meta_usize(e.values[4], "out_width")?,
            k_cartesian: meta_usize(e.values[5], "k_cartesian")?,
            k_feature: meta_usize(e.values[6], "k_feature")?,
        },
        embed_width: meta_usize(e.values[7], "embed_width")?,
        mask_hidden: meta_usize(e.values[8], "mask_hidden")?,
        keypoint_cap: meta_usize(e.values[9], "keypoint_cap")?,
        keypoint_fraction: e.values[10],
        candidate_cap: meta_usize(e.values[11], "candidate_cap")?,
    };
    config
        .validate()
        .map_err(|err| Error::Checkpoint(format!("stored architecture is invalid: {err}")))?;
    Ok(config)
}

/// The full trainable registration network.
#[derive(Debug, Clone)]
pub struct RegistrationNet {
    pub config: NetConfig,
    pub features: FeatureNetParams,
    pub attention: AttentionParams,
}

impl ParamGroup for RegistrationNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.features.visit(&format!("{prefix}features."), f);
        self.attention.visit(&format!("{prefix}attention."), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.features.visit_mut(&format!("{prefix}features."), f);
        self.attention.visit_mut(&format!("{prefix}attention."), f);
    }
}

/// A forward pass bound to a graph, ready for the loss.
pub struct ForwardPass {
    /// Selected source keypoint indices, ascending.
    pub keypoints: Vec<usize>,
    /// Candidate target indices per keypoint, best first.
    pub candidates: Vec<Vec<usize>>,
    /// `[K, N2]` row-stochastic matching weights (zero outside candidates).
    pub matching: Var,
    /// `[K, 3]` virtual corresponding points.
    pub virtuals: Var,
    /// `[N1, N2]` score matrix.
    pub scores: Var,
    /// Per-point attention mask weights.
    pub mask1: Var,
    pub mask2: Var,
    /// Every bound parameter leaf, in visit order.
    pub bound: Vec<Var>,
}

/// Inference knobs.
#[derive(Debug, Clone)]
pub struct RegisterOptions {
    /// Number of register-and-reapply rounds (1 = single shot).
    pub iterations: usize,
    /// Keep only keypoints whose mask weight is at least `threshold / N`.
    pub mask_prune_threshold: Option<f64>,
}

impl Default for RegisterOptions {
    fn default() -> Self {
        RegisterOptions {
            iterations: 1,
            mask_prune_threshold: None,
        }
    }
}

/// Inference result.
#[derive(Debug, Clone)]
pub struct RegistrationOutput {
    pub estimate: RigidTransform,
    pub correspondences: CorrespondenceSet,
    /// Self-attention mask over source points (sums to 1).
    pub source_mask: Vec<f64>,
    /// Self-attention mask over target points (sums to 1).
    pub target_mask: Vec<f64>,
}

fn rows_to_points(t: &Tensor) -> Vec<[f64; 3]> {
    (0..t.rows())
        .map(|i| [t.get2(i, 0), t.get2(i, 1), t.get2(i, 2)])
        .collect()
}

/// Row indices with the `k` best row-maximum scores among `rows` only;
/// same ordering rules as the unrestricted selection.
fn top_k_among(scores: &Tensor, rows: &[usize], k: usize) -> Vec<usize> {
    let n2 = scores.cols();
    let mut ranked: Vec<(f64, usize)> = rows
        .iter()
        .map(|&i| {
            let best = (0..n2).map(|j| scores.get2(i, j)).fold(f64::NEG_INFINITY, f64::max);
            (best, i)
        })
        .collect();
    ranked.sort_unstable_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut picked: Vec<usize> = ranked[..k].iter().map(|&(_, i)| i).collect();
    picked.sort_unstable();
    picked
}

fn correspondences_from(
    matching: &Tensor,
    virtuals: &Tensor,
    keypoints: &[usize],
    candidates: &[Vec<usize>],
) -> CorrespondenceSet {
    let weights: Vec<Vec<f64>> = candidates
        .iter()
        .enumerate()
        .map(|(i, cands)| cands.iter().map(|&c| matching.get2(i, c)).collect())
        .collect();
    CorrespondenceSet {
        keypoints: keypoints.to_vec(),
        candidates: candidates.to_vec(),
        weights,
        virtuals: rows_to_points(virtuals),
    }
}

impl RegistrationNet {
    /// Fresh network with seeded initialization.
    pub fn init(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let features = FeatureNetParams::init(config.feature.clone(), &mut rng)?;
        let attention = AttentionParams::init(&config.attention(), &mut rng)?;
        Ok(RegistrationNet {
            config,
            features,
            attention,
        })
    }

    /// Replaces the extractor with pre-trained weights of the same
    /// architecture.
    pub fn warm_start_features(&mut self, features: FeatureNetParams) -> Result<()> {
        if features.config != self.config.feature {
            return Err(Error::Config(format!(
                "pre-trained extractor architecture {:?} does not match the network's {:?}",
                features.config, self.config.feature
            )));
        }
        self.features = features;
        Ok(())
    }

    /// Writes all weights plus the architecture description.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = collect_entries(self);
        entries.push(encode_net_config(&self.config));
        save_checkpoint(path, &entries)
    }

    /// Loads a checkpoint saved by [`RegistrationNet::save`], reconstructing
    /// the architecture from the embedded description and verifying every
    /// weight shape.
    pub fn load(path: &Path) -> Result<Self> {
        let entries = load_checkpoint(path)?;
        let meta = entries
            .iter()
            .find(|e| e.path == NET_META_PATH)
            .ok_or_else(|| {
                Error::Checkpoint(format!("missing architecture entry {NET_META_PATH:?}"))
            })?;
        let config = decode_net_config(meta)?;
        let mut net = RegistrationNet::init(config, 0)?;
        restore_params(&mut net, &entries)?;
        Ok(net)
    }

    /// Differentiable forward pass for one pair on an existing graph.
    /// `prune` optionally drops low-mask source rows before keypoint
    /// selection.
    pub fn forward(
        &self,
        g: &mut Graph,
        source: &PointCloud,
        target: &PointCloud,
        prune: Option<f64>,
    ) -> Result<ForwardPass> {
        let fv = self.features.bind(g);
        let av = self.attention.bind(g);
        let mut bound = fv.all_vars();
        bound.extend(av.all_vars());

        let f1 = fv.forward(g, source)?;
        let f2 = fv.forward(g, target)?;
        let stage = attention_forward_pair(g, &av, f1, f2)?;

        let scores_val = g.value(stage.scores).clone();
        let keypoints = match prune {
            None => {
                let k = keypoint_count(source.len(), self.config.keypoint_cap, self.config.keypoint_fraction);
                top_k_keypoints(&scores_val, k)?
            }
            Some(threshold) => {
                let survivors = prune_by_mask(g.value(stage.mask1).values(), threshold);
                if survivors.len() < 3 {
                    return Err(Error::DegenerateGeometry(format!(
                        "mask pruning at threshold {threshold} left {} keypoints; at least 3 are required",
                        survivors.len()
                    )));
                }
                let k = keypoint_count(survivors.len(), self.config.keypoint_cap, self.config.keypoint_fraction);
                top_k_among(&scores_val, &survivors, k)
            }
        };
        let j = candidate_count(target.len(), self.config.candidate_cap);
        let candidates = top_j_candidates(&scores_val, &keypoints, j)?;
        let soft = soft_pointer_graph(g, stage.phi1_c, stage.phi2_c, target, &keypoints, &candidates)?;

        Ok(ForwardPass {
            keypoints,
            candidates,
            matching: soft.matching,
            virtuals: soft.virtuals,
            scores: stage.scores,
            mask1: stage.mask1,
            mask2: stage.mask2,
            bound,
        })
    }

    fn register_once(
        &self,
        source: &PointCloud,
        target: &PointCloud,
        prune: Option<f64>,
    ) -> Result<RegistrationOutput> {
        let mut g = Graph::new();
        let pass = self.forward(&mut g, source, target, prune)?;
        let virtuals = rows_to_points(g.value(pass.virtuals));
        let keys: Vec<[f64; 3]> = pass.keypoints.iter().map(|&i| source.point(i)).collect();
        let estimate = solve_svd(&keys, &virtuals)?;
        let correspondences = correspondences_from(
            g.value(pass.matching),
            g.value(pass.virtuals),
            &pass.keypoints,
            &pass.candidates,
        );
        Ok(RegistrationOutput {
            estimate,
            correspondences,
            source_mask: g.value(pass.mask1).values().to_vec(),
            target_mask: g.value(pass.mask2).values().to_vec(),
        })
    }

    /// Registers `source` onto `target` with default options.
    pub fn register(&self, source: &PointCloud, target: &PointCloud) -> Result<RegistrationOutput> {
        self.register_with(source, target, &RegisterOptions::default())
    }

    /// Registers with explicit options. With `iterations > 1` the estimate
    /// is re-applied and refined; the returned transform is the composition,
    /// the correspondences are from the final round (keypoint indices stay
    /// valid for the original source: rigid motion preserves row order).
    pub fn register_with(
        &self,
        source: &PointCloud,
        target: &PointCloud,
        options: &RegisterOptions,
    ) -> Result<RegistrationOutput> {
        if options.iterations == 0 {
            return Err(Error::Config("register needs at least one iteration".into()));
        }
        let mut total = RigidTransform::identity();
        let mut current = source.clone();
        let mut last: Option<RegistrationOutput> = None;
        for _ in 0..options.iterations {
            let out = self.register_once(&current, target, options.mask_prune_threshold)?;
            total = out.estimate.compose(&total);
            current = out.estimate.apply_cloud(&current);
            last = Some(out);
        }
        let mut out = last.expect("at least one iteration");
        out.estimate = total;
        Ok(out)
    }
}

/// Supervised training hyperparameters.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Weight of wrongly-labeled virtual points in the correspondence loss.
    pub gamma: f64,
    /// Weight of the correspondence term.
    pub alpha: f64,
    /// Weight decay strength.
    pub beta: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(seed: u64) -> Self {
        TrainConfig {
            epochs: 30,
            learning_rate: 0.01,
            gamma: DEFAULT_GAMMA,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            seed,
        }
    }
}

/// Per-epoch training trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub epoch: usize,
    /// Mean combined objective over the epoch's pairs.
    pub mean_loss: f64,
    /// Mean correspondence term.
    pub mean_correspondence: f64,
    /// Mean transformation error metric (never trained on); `None` when no
    /// pair produced a solvable estimate.
    pub mean_transform_error: Option<f64>,
}

/// Result of a training run. `aborted` carries a reason if the run stopped
/// early on a non-finite loss; the network keeps its last good parameters.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub records: Vec<TrainRecord>,
    pub aborted: Option<String>,
}

impl RegistrationNet {
    /// Trains in place on labeled pairs. Pair order is reshuffled each epoch
    /// from the config seed, so runs are reproducible.
    pub fn train(&mut self, pairs: &[RegistrationPair], cfg: &TrainConfig) -> Result<TrainOutcome> {
        if cfg.epochs == 0 {
            return Err(Error::Config("training needs at least one epoch".into()));
        }
        if pairs.is_empty() {
            return Err(Error::Config("training needs at least one pair".into()));
        }
        let mut records = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            let mut order: Vec<usize> = (0..pairs.len()).collect();
            order.shuffle(&mut derive_rng(cfg.seed, epoch as u64 + 1));

            let mut sum_loss = 0.0;
            let mut sum_cor = 0.0;
            let mut sum_terr = 0.0;
            let mut n_terr = 0usize;
            for &pi in &order {
                let pair = &pairs[pi];
                let mut g = Graph::new();
                let pass = self.forward(&mut g, &pair.source, &pair.target, None)?;
                let virtuals = rows_to_points(g.value(pass.virtuals));
                let keys: Vec<[f64; 3]> =
                    pass.keypoints.iter().map(|&i| pair.source.point(i)).collect();
                let labels = label_matches(&pair.source, &pass.keypoints, &virtuals, &pair.truth)?;
                let cor = correspondence_loss_graph(
                    &mut g,
                    pass.virtuals,
                    &keys,
                    &labels,
                    &pair.truth,
                    cfg.gamma,
                )?;
                let total = combined_loss_graph(&mut g, cor, &pass.bound, cfg.alpha, cfg.beta)?;

                let loss = g.value(total).values()[0];
                let cor_value = g.value(cor).values()[0];
                if !loss.is_finite() {
                    return Ok(TrainOutcome {
                        records,
                        aborted: Some(format!(
                            "non-finite loss {loss} at epoch {epoch}, pair {pi}; parameters keep their last good values"
                        )),
                    });
                }
                // transformation error is reported, never differentiated
                if let Ok(estimate) = solve_svd(&keys, &virtuals) {
                    sum_terr += transformation_loss(&estimate, &pair.truth);
                    n_terr += 1;
                }

                g.backward(total)?;
                apply_graph_sgd(self, &g, &pass.bound, cfg.learning_rate)?;
                sum_loss += loss;
                sum_cor += cor_value;
            }
            let n = pairs.len() as f64;
            records.push(TrainRecord {
                epoch,
                mean_loss: sum_loss / n,
                mean_correspondence: sum_cor / n,
                mean_transform_error: (n_terr > 0).then(|| sum_terr / n_terr as f64),
            });
        }
        Ok(TrainOutcome {
            records,
            aborted: None,
        })
    }
}

/// How benchmark pairs are solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// ICP from identity.
    Icp,
    /// One network pass.
    Net,
    /// Network estimate refined by ICP.
    NetIcp,
    /// The network applied repeatedly, composing estimates.
    NetIter(usize),
}

impl Method {
    /// Parses a method name; `net_iterations` feeds the iterated variant.
    pub fn parse(name: &str, net_iterations: usize) -> Result<Method> {
        match name {
            "icp" => Ok(Method::Icp),
            "net" => Ok(Method::Net),
            "net-icp" => Ok(Method::NetIcp),
            "net-iter" => {
                if net_iterations == 0 {
                    return Err(Error::Config("net-iter needs at least one iteration".into()));
                }
                Ok(Method::NetIter(net_iterations))
            }
            other => Err(Error::Config(format!(
                "unknown method {other:?} (expected icp, net, net-icp or net-iter)"
            ))),
        }
    }

    pub fn needs_net(&self) -> bool {
        !matches!(self, Method::Icp)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::Icp => "icp",
            Method::Net => "net",
            Method::NetIcp => "net-icp",
            Method::NetIter(_) => "net-iter",
        }
    }
}

/// Benchmark settings.
#[derive(Debug, Clone)]
pub struct BenchmarkConfig {
    pub method: Method,
    /// ICP settings for the `icp` and `net-icp` methods.
    pub icp: IcpConfig,
    /// Optional mask pruning for network methods.
    pub prune_threshold: Option<f64>,
}

/// One solved pair.
#[derive(Debug, Clone)]
pub struct PairOutcome {
    pub index: usize,
    pub estimate: RigidTransform,
    /// Geodesic rotation error against the truth, degrees.
    pub rotation_error_deg: f64,
    /// Euclidean translation error against the truth.
    pub translation_error: f64,
    pub seconds: f64,
}

/// Aggregate benchmark result; `outcomes` keeps input order and holds the
/// solved pairs only — `failures` records the rest by index.
#[derive(Debug, Clone)]
pub struct BenchmarkSummary {
    pub outcomes: Vec<PairOutcome>,
    /// Per-pair failures as `(pair index, reason)`, input order.
    pub failures: Vec<(usize, String)>,
    /// Per-axis rotation / translation error statistics over the solved
    /// pairs.
    pub metrics: RegistrationMetrics,
    pub mean_rotation_error_deg: f64,
    pub mean_translation_error: f64,
}

/// Solves every pair in parallel with the chosen method. Per-pair failures
/// are collected, not fatal; the call errors only when nothing succeeds.
/// Results are deterministic: no randomness is consumed, and output order
/// matches input order regardless of scheduling.
pub fn benchmark(
    net: Option<&RegistrationNet>,
    pairs: &[RegistrationPair],
    cfg: &BenchmarkConfig,
) -> Result<BenchmarkSummary> {
    if pairs.is_empty() {
        return Err(Error::Config("benchmark needs at least one pair".into()));
    }
    if cfg.method.needs_net() && net.is_none() {
        return Err(Error::Config(format!(
            "method {:?} needs a trained network checkpoint",
            cfg.method.name()
        )));
    }
    let solved: Vec<(usize, Result<PairOutcome>)> = pairs
        .par_iter()
        .enumerate()
        .map(|(index, pair)| {
            let start = Instant::now();
            let estimate = match cfg.method {
                Method::Icp => icp(&pair.source, &pair.target, &cfg.icp).map(|r| r.transform),
                Method::Net => {
                    let opts = RegisterOptions {
                        iterations: 1,
                        mask_prune_threshold: cfg.prune_threshold,
                    };
                    net.unwrap()
                        .register_with(&pair.source, &pair.target, &opts)
                        .map(|o| o.estimate)
                }
                Method::NetIcp => {
                    let opts = RegisterOptions {
                        iterations: 1,
                        mask_prune_threshold: cfg.prune_threshold,
                    };
                    net.unwrap()
                        .register_with(&pair.source, &pair.target, &opts)
                        .and_then(|o| {
                            let refine = IcpConfig {
                                initial: Some(o.estimate),
                                ..cfg.icp.clone()
                            };
                            icp(&pair.source, &pair.target, &refine).map(|r| r.transform)
                        })
                }
                Method::NetIter(rounds) => {
                    let opts = RegisterOptions {
                        iterations: rounds,
                        mask_prune_threshold: cfg.prune_threshold,
                    };
                    net.unwrap()
                        .register_with(&pair.source, &pair.target, &opts)
                        .map(|o| o.estimate)
                }
            };
            let outcome = estimate.map(|estimate| PairOutcome {
                index,
                rotation_error_deg: geodesic_rotation_deg(&estimate.rotation, &pair.truth.rotation),
                translation_error: translation_error(&estimate, &pair.truth),
                estimate,
                seconds: start.elapsed().as_secs_f64(),
            });
            (index, outcome)
        })
        .collect();

    let mut outcomes = Vec::with_capacity(pairs.len());
    let mut failures = Vec::new();
    for (index, result) in solved {
        match result {
            Ok(outcome) => outcomes.push(outcome),
            Err(e) => failures.push((index, e.to_string())),
        }
    }
    if outcomes.is_empty() {
        let (index, reason) = &failures[0];
        return Err(Error::Config(format!(
            "every pair failed; first failure at pair {index}: {reason}"
        )));
    }

    let mut acc = ErrorAccumulator::new();
    for outcome in &outcomes {
        acc.add(&outcome.estimate, &pairs[outcome.index].truth);
    }
    let n = outcomes.len() as f64;
    Ok(BenchmarkSummary {
        mean_rotation_error_deg: outcomes.iter().map(|o| o.rotation_error_deg).sum::<f64>() / n,
        mean_translation_error: outcomes.iter().map(|o| o.translation_error).sum::<f64>() / n,
        metrics: acc.finalize(),
        outcomes,
        failures,
    })
}
