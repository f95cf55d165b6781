//! Per-point feature extraction over local neighborhood graphs.
//!
//! The extractor lifts raw coordinates through a point-wise MLP, then runs
//! two rounds of edge aggregation: one over a k-nearest-neighbor graph built
//! in Cartesian space, one over a graph rebuilt dynamically in the current
//! feature space. Each round concatenates a point's feature row with the
//! per-dimension max of (neighbor - self) differences and maps the result
//! through an MLP. The three intermediate representations are concatenated
//! and fused by a final MLP into `out_width` channels per point.
//!
//! Rows of every produced matrix align with point indices, and the whole
//! stack commutes with point permutations (bit-exactly on clouds free of
//! exact distance ties; see `numeric::graph` on canonical reductions).

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{knn_indices, knn_rows, PointCloud};
use crate::numeric::{Activation, Graph, MlpParams, MlpVars, Norm, ParamGroup, Tensor, Var};

/// Per-point feature matrix: rows align with point indices.
pub type FeatureMatrix = Tensor;

/// Widths and neighborhood sizes for the feature extractor.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureConfig {
    /// Output width of the point-wise MLP.
    pub point_width: usize,
    /// Output width of the Cartesian-graph aggregation MLP.
    pub cart_width: usize,
    /// Output width of the feature-graph aggregation MLP.
    pub feat_width: usize,
    /// Final per-point feature width (`c`).
    pub out_width: usize,
    /// Neighborhood size for the Cartesian-space graph.
    pub k_cartesian: usize,
    /// Neighborhood size for the dynamic feature-space graph.
    pub k_feature: usize,
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("point_width", self.point_width),
            ("cart_width", self.cart_width),
            ("feat_width", self.feat_width),
            ("out_width", self.out_width),
            ("k_cartesian", self.k_cartesian),
            ("k_feature", self.k_feature),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("feature config {name} must be nonzero")));
            }
        }
        Ok(())
    }
}

/// Trainable parameters of the feature extractor.
#[derive(Debug, Clone)]
pub struct FeatureNetParams {
    pub config: FeatureConfig,
    pub point_mlp: MlpParams,
    pub cart_mlp: MlpParams,
    pub feat_mlp: MlpParams,
    pub final_mlp: MlpParams,
}

impl FeatureNetParams {
    pub fn init(config: FeatureConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d0 = config.point_width;
        let d1 = config.cart_width;
        let d2 = config.feat_width;
        let point_mlp = MlpParams::init(
            &[3, d0, d0],
            Norm::LayerNorm,
            Activation::Relu,
            true,
            rng,
        )?;
        let cart_mlp = MlpParams::init(
            &[2 * d0, d1],
            Norm::LayerNorm,
            Activation::Relu,
            true,
            rng,
        )?;
        let feat_mlp = MlpParams::init(
            &[2 * d1, d2],
            Norm::LayerNorm,
            Activation::Relu,
            true,
            rng,
        )?;
        let final_mlp = MlpParams::init(
            &[d0 + d1 + d2, config.out_width],
            Norm::None,
            Activation::None,
            false,
            rng,
        )?;
        Ok(FeatureNetParams {
            config,
            point_mlp,
            cart_mlp,
            feat_mlp,
            final_mlp,
        })
    }

    pub fn bind(&self, g: &mut Graph) -> FeatureNetVars {
        FeatureNetVars {
            point: self.point_mlp.bind(g),
            cart: self.cart_mlp.bind(g),
            feat: self.feat_mlp.bind(g),
            fuse: self.final_mlp.bind(g),
            k_cartesian: self.config.k_cartesian,
            k_feature: self.config.k_feature,
        }
    }
}

impl ParamGroup for FeatureNetParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.point_mlp.visit(&format!("{prefix}point."), f);
        self.cart_mlp.visit(&format!("{prefix}cart."), f);
        self.feat_mlp.visit(&format!("{prefix}feat."), f);
        self.final_mlp.visit(&format!("{prefix}final."), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.point_mlp.visit_mut(&format!("{prefix}point."), f);
        self.cart_mlp.visit_mut(&format!("{prefix}cart."), f);
        self.feat_mlp.visit_mut(&format!("{prefix}feat."), f);
        self.final_mlp.visit_mut(&format!("{prefix}final."), f);
    }
}

/// Graph-bound extractor handles.
#[derive(Debug, Clone)]
pub struct FeatureNetVars {
    pub point: MlpVars,
    pub cart: MlpVars,
    pub feat: MlpVars,
    pub fuse: MlpVars,
    pub k_cartesian: usize,
    pub k_feature: usize,
}

impl FeatureNetVars {
    /// Full differentiable forward pass for one cloud.
    pub fn forward(&self, g: &mut Graph, cloud: &PointCloud) -> Result<Var> {
        let n = cloud.len();
        let k_cart = effective_k(self.k_cartesian, n)?;
        let k_feat = effective_k(self.k_feature, n)?;

        let coords = g.constant(cloud.to_tensor());
        let h0 = self.point.forward(g, coords)?;

        let cart_neighbors = knn_indices(cloud.points(), k_cart)?;
        let h1 = graph_aggregate(g, h0, &cart_neighbors, &self.cart)?;

        // Dynamic graph: neighborhoods recomputed in the current feature space.
        let feat_neighbors = knn_rows(g.value(h1), k_feat)?;
        let h2 = graph_aggregate(g, h1, &feat_neighbors, &self.feat)?;

        let stacked = g.concat_cols(&[h0, h1, h2])?;
        self.fuse.forward(g, stacked)
    }

    pub fn all_vars(&self) -> Vec<Var> {
        let mut v = self.point.all_vars();
        v.extend(self.cart.all_vars());
        v.extend(self.feat.all_vars());
        v.extend(self.fuse.all_vars());
        v
    }
}

/// Clamps a configured neighborhood size to what a cloud of `n` points can
/// support (neighbors exclude the point itself). A single-point cloud cannot
/// form a graph.
fn effective_k(k: usize, n: usize) -> Result<usize> {
    if n < 2 {
        return Err(Error::domain(
            "features",
            "graph aggregation needs at least two points",
        ));
    }
    Ok(k.min(n - 1))
}

/// Edge aggregation over an explicit neighbor graph: concatenates each
/// feature row with the per-dimension max of (neighbor - self) differences,
/// then applies `mlp` row-wise.
pub fn graph_aggregate(
    g: &mut Graph,
    features: Var,
    neighbors: &[Vec<usize>],
    mlp: &MlpVars,
) -> Result<Var> {
    let edges = g.edge_max_aggregate(features, neighbors)?;
    mlp.forward(g, edges)
}

/// Value-level feature extraction: runs the forward pass on a throwaway
/// graph and returns the final `[N, out_width]` matrix.
pub fn extract_features(cloud: &PointCloud, params: &FeatureNetParams) -> Result<FeatureMatrix> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let out = vars.forward(&mut g, cloud)?;
    Ok(g.value(out).clone())
}
