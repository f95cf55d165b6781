//! Self attention, cross attention and the match score matrix.
//!
//! Self attention (per cloud, shared weights): the raw affinity is the Gram
//! matrix of the embedded features, `W = softmax_rows(R R^T)`, and the
//! attended features are `F = W R`. A per-point mask is produced by a small
//! MLP over per-row statistics of `W` (entropy, max, mean — statistics, not
//! raw rows, so one set of weights serves any cloud size), normalized with a
//! softmax over the points, and multiplied into `F` row-wise in mean-one
//! form: `Psi = (N * mask) ⊙ F`. The softmax mask sums to 1, so scaling by
//! `N` makes the average row weight exactly 1 — relative down-weighting of
//! outlier points is preserved while feature magnitude stays independent of
//! cloud size (raw softmax weighting would shrink every feature by `1/N`,
//! which both starves downstream softmaxes of signal and makes a trained
//! checkpoint behave differently at a different N).
//!
//! Cross attention (between clouds): each cloud receives a message computed
//! by attending over the other cloud through learned projections
//! `V_theta, V_phi, V_g`, mapped back with `V_c` and added residually:
//! `Phi_1 = (softmax((Psi_1 V_theta)(Psi_2 V_phi)^T) (Psi_2 V_g)) V_c + Psi_1`.
//! Rows of `Phi_i` stay aligned with cloud `i`; the clouds may differ in size.
//!
//! The score matrix ranks potential matches with the same theta/phi
//! projections: `S = (Phi_1 V_theta)(Phi_2 V_phi)^T`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::numeric::{Activation, Graph, MlpParams, MlpVars, Norm, ParamGroup, Tensor, Var};

/// Learned mask head of self attention.
#[derive(Debug, Clone)]
pub struct SelfAttentionParams {
    pub mask_mlp: MlpParams,
}

/// Cross-attention projections, all `[width, width]` input-major.
#[derive(Debug, Clone)]
pub struct CrossAttentionParams {
    pub v_theta: Tensor,
    pub v_phi: Tensor,
    pub v_g: Tensor,
    pub v_c: Tensor,
}

/// Full attention stage: embedding projection, shared self attention,
/// cross attention, and the projection back to feature width.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub in_proj: MlpParams,
    pub self_attn: SelfAttentionParams,
    pub cross: CrossAttentionParams,
    pub out_proj: MlpParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionConfig {
    /// Feature width coming out of the extractor (`c`).
    pub in_width: usize,
    /// Attention embedding width.
    pub embed_width: usize,
    /// Hidden width of the mask MLP.
    pub mask_hidden: usize,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("in_width", self.in_width),
            ("embed_width", self.embed_width),
            ("mask_hidden", self.mask_hidden),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("attention config {name} must be nonzero")));
            }
        }
        Ok(())
    }
}

/// Scale of the residual mixing matrix `V_c` at initialization, relative to
/// the other projections. Small, so the cross stage starts near identity.
const VC_INIT_SCALE: f64 = 0.01;

impl CrossAttentionParams {
    pub fn init(width: usize, rng: &mut impl Rng) -> Result<Self> {
        let std = (1.0 / width as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("finite std");
        let mut square = |scale: f64| -> Result<Tensor> {
            let v: Vec<f64> = (0..width * width).map(|_| dist.sample(rng) * scale).collect();
            Ok(Tensor::matrix(width, width, v)?.with_grad())
        };
        // v_phi starts tied to v_theta: independent draws would make the
        // score bilinear form V_theta^T V_phi zero-mean, erasing feature
        // similarity from the scores at init; tied, the form is ~identity
        // and scores start as plain feature inner products. The two
        // matrices untie from the first gradient step onward.
        let v_theta = square(1.0)?;
        let v_phi = v_theta.clone();
        Ok(CrossAttentionParams {
            v_theta,
            v_phi,
            v_g: square(1.0)?,
            v_c: square(VC_INIT_SCALE)?,
        })
    }
}

impl AttentionParams {
    pub fn init(config: &AttentionConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let in_proj = MlpParams::init(
            &[config.in_width, config.embed_width],
            Norm::None,
            Activation::None,
            false,
            rng,
        )?;
        let mut mask_mlp = MlpParams::init(
            &[3, config.mask_hidden, 1],
            Norm::None,
            Activation::Relu,
            false,
            rng,
        )?;
        // Zero the output layer: the mask then starts exactly uniform and
        // learns to deviate. A random initial mask row-scales the features
        // by arbitrary per-point factors, which scrambles match rankings
        // before training has any say.
        if let Some(last) = mask_mlp.layers.last_mut() {
            last.weight = Tensor::matrix(
                last.weight.rows(),
                last.weight.cols(),
                vec![0.0; last.weight.len()],
            )?
            .with_grad();
        }
        let cross = CrossAttentionParams::init(config.embed_width, rng)?;
        let out_proj = MlpParams::init(
            &[config.embed_width, config.in_width],
            Norm::None,
            Activation::None,
            false,
            rng,
        )?;
        Ok(AttentionParams {
            in_proj,
            self_attn: SelfAttentionParams { mask_mlp },
            cross,
            out_proj,
        })
    }

    pub fn bind(&self, g: &mut Graph) -> AttentionVars {
        AttentionVars {
            in_proj: self.in_proj.bind(g),
            mask: self.self_attn.mask_mlp.bind(g),
            v_theta: g.leaf(&self.cross.v_theta),
            v_phi: g.leaf(&self.cross.v_phi),
            v_g: g.leaf(&self.cross.v_g),
            v_c: g.leaf(&self.cross.v_c),
            out_proj: self.out_proj.bind(g),
        }
    }
}

impl ParamGroup for AttentionParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.in_proj.visit(&format!("{prefix}in_proj."), f);
        self.self_attn.mask_mlp.visit(&format!("{prefix}mask."), f);
        f(&format!("{prefix}v_theta"), &self.cross.v_theta);
        f(&format!("{prefix}v_phi"), &self.cross.v_phi);
        f(&format!("{prefix}v_g"), &self.cross.v_g);
        f(&format!("{prefix}v_c"), &self.cross.v_c);
        self.out_proj.visit(&format!("{prefix}out_proj."), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.in_proj.visit_mut(&format!("{prefix}in_proj."), f);
        self.self_attn.mask_mlp.visit_mut(&format!("{prefix}mask."), f);
        f(&format!("{prefix}v_theta"), &mut self.cross.v_theta);
        f(&format!("{prefix}v_phi"), &mut self.cross.v_phi);
        f(&format!("{prefix}v_g"), &mut self.cross.v_g);
        f(&format!("{prefix}v_c"), &mut self.cross.v_c);
        self.out_proj.visit_mut(&format!("{prefix}out_proj."), f);
    }
}

/// Graph-bound attention handles.
#[derive(Debug, Clone)]
pub struct AttentionVars {
    pub in_proj: MlpVars,
    pub mask: MlpVars,
    pub v_theta: Var,
    pub v_phi: Var,
    pub v_g: Var,
    pub v_c: Var,
    pub out_proj: MlpVars,
}

impl AttentionVars {
    pub fn all_vars(&self) -> Vec<Var> {
        let mut v = self.in_proj.all_vars();
        v.extend(self.mask.all_vars());
        v.extend([self.v_theta, self.v_phi, self.v_g, self.v_c]);
        v.extend(self.out_proj.all_vars());
        v
    }
}

/// Differentiable self attention. Returns `(psi, mask)` where `mask` is the
/// `[N, 1]` softmax-normalized point weighting; `psi` applies the mask in
/// mean-one form (`N * mask`) so feature magnitude is N-independent.
pub fn self_attention_graph(
    g: &mut Graph,
    r: Var,
    mask_mlp: &MlpVars,
) -> Result<(Var, Var)> {
    let n = g.value(r).rows();
    let rt = g.transpose(r)?;
    let logits = g.matmul(r, rt)?;
    let weights = g.softmax_rows(logits)?;
    let attended = g.attend(weights, r)?;
    let stats = g.row_stats(weights)?;
    let raw_mask = mask_mlp.forward(g, stats)?; // [N, 1]
    let as_row = g.reshape(raw_mask, vec![1, n])?;
    let soft = g.softmax_rows(as_row)?;
    let mask = g.reshape(soft, vec![n, 1])?;
    let mean_one = g.scale(mask, n as f64)?;
    let psi = g.scale_rows(attended, mean_one)?;
    Ok((psi, mask))
}

/// Message received by `receiver` from `sender` (rows align with receiver).
fn cross_message(
    g: &mut Graph,
    receiver: Var,
    sender: Var,
    vars: &AttentionVars,
) -> Result<Var> {
    let theta = g.matmul(receiver, vars.v_theta)?;
    let phi = g.matmul(sender, vars.v_phi)?;
    let phi_t = g.transpose(phi)?;
    let logits = g.matmul(theta, phi_t)?;
    let attn = g.softmax_rows(logits)?;
    let values = g.matmul(sender, vars.v_g)?;
    g.attend(attn, values)
}

/// Differentiable cross attention for both clouds. Widths must match; the
/// numbers of points may differ.
pub fn cross_attention_graph(
    g: &mut Graph,
    psi1: Var,
    psi2: Var,
    vars: &AttentionVars,
) -> Result<(Var, Var)> {
    let (c1, c2) = (g.value(psi1).cols(), g.value(psi2).cols());
    if c1 != c2 {
        return Err(Error::Dimension {
            op: "cross_attention",
            lhs: g.value(psi1).shape().to_vec(),
            rhs: g.value(psi2).shape().to_vec(),
        });
    }
    let m1 = cross_message(g, psi1, psi2, vars)?;
    let m1c = g.matmul(m1, vars.v_c)?;
    let phi1 = g.add(m1c, psi1)?;
    let m2 = cross_message(g, psi2, psi1, vars)?;
    let m2c = g.matmul(m2, vars.v_c)?;
    let phi2 = g.add(m2c, psi2)?;
    Ok((phi1, phi2))
}

/// Differentiable score matrix `(Phi_1 V_theta)(Phi_2 V_phi)^T`, shape `[N1, N2]`.
pub fn score_matrix_graph(
    g: &mut Graph,
    phi1: Var,
    phi2: Var,
    vars: &AttentionVars,
) -> Result<Var> {
    let theta = g.matmul(phi1, vars.v_theta)?;
    let phi = g.matmul(phi2, vars.v_phi)?;
    let phi_t = g.transpose(phi)?;
    g.matmul(theta, phi_t)
}

/// Everything the attention stage produces for one pair of feature matrices.
pub struct AttentionStageOut {
    /// Cross-attended features at embedding width, rows aligned per cloud.
    pub phi1: Var,
    pub phi2: Var,
    /// The same features projected back to extractor width, for matching.
    pub phi1_c: Var,
    pub phi2_c: Var,
    /// Per-point mask weights, `[N, 1]` each.
    pub mask1: Var,
    pub mask2: Var,
    /// Match scores, `[N1, N2]`.
    pub scores: Var,
}

/// Runs the full attention stage on extractor outputs `f1`, `f2`.
pub fn attention_forward_pair(
    g: &mut Graph,
    vars: &AttentionVars,
    f1: Var,
    f2: Var,
) -> Result<AttentionStageOut> {
    let e1 = vars.in_proj.forward(g, f1)?;
    let e2 = vars.in_proj.forward(g, f2)?;
    let (psi1, mask1) = self_attention_graph(g, e1, &vars.mask)?;
    let (psi2, mask2) = self_attention_graph(g, e2, &vars.mask)?;
    let (phi1, phi2) = cross_attention_graph(g, psi1, psi2, vars)?;
    let scores = score_matrix_graph(g, phi1, phi2, vars)?;
    let phi1_c = vars.out_proj.forward(g, phi1)?;
    let phi2_c = vars.out_proj.forward(g, phi2)?;
    Ok(AttentionStageOut {
        phi1,
        phi2,
        phi1_c,
        phi2_c,
        mask1,
        mask2,
        scores,
    })
}

/// Value-level self-attention output.
pub struct SelfAttentionOutput {
    pub psi: FeatureMatrix,
    /// Softmax-normalized point weights, length N, summing to 1.
    pub mask: Vec<f64>,
    /// The row-stochastic affinity matrix `W`, for diagnostics.
    pub weights: FeatureMatrix,
}

/// Value-level self attention on a single feature matrix.
pub fn self_attention(
    r: &FeatureMatrix,
    params: &SelfAttentionParams,
) -> Result<SelfAttentionOutput> {
    let mut g = Graph::new();
    let mask_vars = params.mask_mlp.bind(&mut g);
    let rv = g.constant(r.clone());
    // weights recomputed here to expose them; the graph op keeps them internal
    let rt = g.transpose(rv)?;
    let logits = g.matmul(rv, rt)?;
    let weights = g.softmax_rows(logits)?;
    let (psi, mask) = self_attention_graph(&mut g, rv, &mask_vars)?;
    Ok(SelfAttentionOutput {
        psi: g.value(psi).clone(),
        mask: g.value(mask).values().to_vec(),
        weights: g.value(weights).clone(),
    })
}

/// Value-level cross attention.
pub fn cross_attention(
    psi1: &FeatureMatrix,
    psi2: &FeatureMatrix,
    params: &CrossAttentionParams,
) -> Result<(FeatureMatrix, FeatureMatrix)> {
    let mut g = Graph::new();
    let vars = bind_cross_only(&mut g, params);
    let p1 = g.constant(psi1.clone());
    let p2 = g.constant(psi2.clone());
    let (phi1, phi2) = cross_attention_graph(&mut g, p1, p2, &vars)?;
    Ok((g.value(phi1).clone(), g.value(phi2).clone()))
}

/// Value-level score matrix.
pub fn score_matrix(
    phi1: &FeatureMatrix,
    phi2: &FeatureMatrix,
    params: &CrossAttentionParams,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars = bind_cross_only(&mut g, params);
    let p1 = g.constant(phi1.clone());
    let p2 = g.constant(phi2.clone());
    let s = score_matrix_graph(&mut g, p1, p2, &vars)?;
    Ok(g.value(s).clone())
}

fn bind_cross_only(g: &mut Graph, params: &CrossAttentionParams) -> AttentionVars {
    // Only the projection leaves matter for cross/score paths; the MLP slots
    // are left empty and must not be touched by those paths.
    AttentionVars {
        in_proj: MlpVars { layers: vec![] },
        mask: MlpVars { layers: vec![] },
        v_theta: g.leaf(&params.v_theta),
        v_phi: g.leaf(&params.v_phi),
        v_g: g.leaf(&params.v_g),
        v_c: g.leaf(&params.v_c),
        out_proj: MlpVars { layers: vec![] },
    }
}

/// Indices of points whose mask weight clears `threshold / N` — the hard
/// pruning rule. With the softmax normalization, weight `1/N` is the
/// "uniform attention" level, so `threshold` is expressed relative to it.
pub fn prune_by_mask(mask: &[f64], threshold: f64) -> Vec<usize> {
    let n = mask.len() as f64;
    mask.iter()
        .enumerate()
        .filter(|(_, &w)| w * n >= threshold)
        .map(|(i, _)| i)
        .collect()
}
