//! Multi-layer perceptrons over the autodiff graph, plus the parameter-group
//! plumbing (path visitation, SGD) shared by every trainable module.
//!
//! Layer order is fixed: linear, then layer normalization (when enabled),
//! then activation. Weights are stored input-major (`[in, out]`) so the
//! forward pass is a plain `x · W` without transposition.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numeric::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Norm {
    LayerNorm,
    None,
}

/// One linear layer with optional normalization and activation.
#[derive(Debug, Clone)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
    pub gain: Option<Tensor>,
    pub shift: Option<Tensor>,
    pub activation: Activation,
}

/// A stack of [`LayerParams`].
#[derive(Debug, Clone, Default)]
pub struct MlpParams {
    pub layers: Vec<LayerParams>,
}

/// Anything holding named trainable tensors. Paths are stable identifiers
/// used by checkpoints and the optimizer; visitation order is deterministic.
pub trait ParamGroup {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }
}

impl MlpParams {
    /// Random initialization. `dims` lists layer widths, e.g. `[3, 64, 64]`.
    /// Hidden layers get `norm`/`activation`; the last layer is linear with
    /// no normalization unless `activate_last` is set.
    pub fn init(
        dims: &[usize],
        norm: Norm,
        activation: Activation,
        activate_last: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config(format!(
                "mlp needs at least [in, out] dims, got {dims:?}"
            )));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("mlp dims must be nonzero: {dims:?}")));
        }
        let mut layers = Vec::new();
        for (li, win) in dims.windows(2).enumerate() {
            let (din, dout) = (win[0], win[1]);
            let last = li == dims.len() - 2;
            let (act, nrm) = if last && !activate_last {
                (Activation::None, Norm::None)
            } else {
                (activation, norm)
            };
            // He-style scaling for relu stacks, Xavier-style otherwise.
            let std = match act {
                Activation::Relu => (2.0 / din as f64).sqrt(),
                Activation::None => (1.0 / din as f64).sqrt(),
            };
            let dist = Normal::new(0.0, std).expect("finite std");
            let w: Vec<f64> = (0..din * dout).map(|_| dist.sample(rng)).collect();
            layers.push(LayerParams {
                weight: Tensor::matrix(din, dout, w)?.with_grad(),
                bias: Tensor::matrix(1, dout, vec![0.0; dout])?.with_grad(),
                gain: match nrm {
                    Norm::LayerNorm => {
                        Some(Tensor::matrix(1, dout, vec![1.0; dout])?.with_grad())
                    }
                    Norm::None => None,
                },
                shift: match nrm {
                    Norm::LayerNorm => {
                        Some(Tensor::matrix(1, dout, vec![0.0; dout])?.with_grad())
                    }
                    Norm::None => None,
                },
                activation: act,
            });
        }
        Ok(MlpParams { layers })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.cols())
    }

    /// Binds every tensor as a graph leaf, returning forward-ready handles.
    pub fn bind(&self, g: &mut Graph) -> MlpVars {
        let layers = self
            .layers
            .iter()
            .map(|l| LayerVars {
                weight: g.leaf(&l.weight),
                bias: g.leaf(&l.bias),
                gain: l.gain.as_ref().map(|t| g.leaf(t)),
                shift: l.shift.as_ref().map(|t| g.leaf(t)),
                activation: l.activation,
            })
            .collect();
        MlpVars { layers }
    }
}

impl ParamGroup for MlpParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, l) in self.layers.iter().enumerate() {
            f(&format!("{prefix}layer{i}.weight"), &l.weight);
            f(&format!("{prefix}layer{i}.bias"), &l.bias);
            if let Some(t) = &l.gain {
                f(&format!("{prefix}layer{i}.gain"), t);
            }
            if let Some(t) = &l.shift {
                f(&format!("{prefix}layer{i}.shift"), t);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            f(&format!("{prefix}layer{i}.weight"), &mut l.weight);
            f(&format!("{prefix}layer{i}.bias"), &mut l.bias);
            if let Some(t) = &mut l.gain {
                f(&format!("{prefix}layer{i}.gain"), t);
            }
            if let Some(t) = &mut l.shift {
                f(&format!("{prefix}layer{i}.shift"), t);
            }
        }
    }
}

/// Graph-bound handles for one layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub weight: Var,
    pub bias: Var,
    pub gain: Option<Var>,
    pub shift: Option<Var>,
    pub activation: Activation,
}

/// Graph-bound handles for an MLP, ready to run forward passes.
#[derive(Debug, Clone)]
pub struct MlpVars {
    pub layers: Vec<LayerVars>,
}

impl MlpVars {
    /// Applies the MLP row-wise to an `[n, in]` matrix.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = x;
        for l in &self.layers {
            h = g.matmul(h, l.weight)?;
            h = g.add_row(h, l.bias)?;
            if let (Some(gain), Some(shift)) = (l.gain, l.shift) {
                h = g.layer_norm(h, gain, shift)?;
            }
            if l.activation == Activation::Relu {
                h = g.relu(h)?;
            }
        }
        Ok(h)
    }

    /// All bound leaves, for regularization terms.
    pub fn all_vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(l.weight);
            out.push(l.bias);
            if let Some(v) = l.gain {
                out.push(v);
            }
            if let Some(v) = l.shift {
                out.push(v);
            }
        }
        out
    }
}

/// Plain stochastic gradient descent: `p -= lr * grad`, then clears the
/// gradient. Every tensor must carry a gradient (run backward and copy
/// gradients in first); a missing one is a contract error.
pub fn sgd_step<'a>(params: impl IntoIterator<Item = &'a mut Tensor>, lr: f64) -> Result<()> {
    if !lr.is_finite() || lr <= 0.0 {
        return Err(Error::Config(format!("learning rate must be positive: {lr}")));
    }
    for p in params {
        let grad = p.grad.take().ok_or_else(|| {
            Error::Contract("sgd_step on a tensor without a gradient (was backward run?)".into())
        })?;
        if grad.len() != p.len() {
            return Err(Error::Contract(format!(
                "gradient length {} does not match tensor length {}",
                grad.len(),
                p.len()
            )));
        }
        for (v, g) in p.values_mut().iter_mut().zip(&grad) {
            *v -= lr * g;
        }
    }
    Ok(())
}

/// One SGD update for a whole parameter group straight from a graph.
///
/// `bound` must list the group's bound leaf [`Var`]s in visit order — the
/// order `bind` creates them — so gradients and tensors pair up positionally.
/// A count or length mismatch is a contract error and leaves the group
/// partially updated, so callers should treat it as fatal.
pub fn apply_graph_sgd(
    group: &mut dyn ParamGroup,
    graph: &Graph,
    bound: &[Var],
    lr: f64,
) -> Result<()> {
    if !lr.is_finite() || lr <= 0.0 {
        return Err(Error::Config(format!("learning rate must be positive: {lr}")));
    }
    let mut grads = Vec::with_capacity(bound.len());
    for &v in bound {
        grads.push(graph.grad(v)?);
    }
    let mut next = 0usize;
    let mut failure: Option<Error> = None;
    group.visit_mut("", &mut |path, t| {
        if failure.is_some() {
            return;
        }
        let Some(grad) = grads.get(next) else {
            failure = Some(Error::Contract(format!(
                "parameter {path} has no bound var (got {} vars)",
                grads.len()
            )));
            return;
        };
        if grad.len() != t.len() {
            failure = Some(Error::Contract(format!(
                "gradient of {} entries does not match parameter {path} of {} entries",
                grad.len(),
                t.len()
            )));
            return;
        }
        for (v, g) in t.values_mut().iter_mut().zip(grad) {
            *v -= lr * g;
        }
        next += 1;
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if next != grads.len() {
        return Err(Error::Contract(format!(
            "{} bound vars but only {next} parameters visited",
            grads.len()
        )));
    }
    Ok(())
}
