//! Per-modality distribution modeling.
//!
//! Incoming token features of width D are split into halves; one half
//! drives a mean head (attention + MLP with a residual), the other a scale
//! head (attention + MLP through softplus plus a small floor). Tokens are
//! then refined by averaging the raw half with K reparameterized Gaussian
//! draws mu + eps*sigma, so gradients reach mu and sigma while the noise
//! stays constant.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nn::{attention_node, mlp_node, AttentionNodes, AttentionParams, MlpNodes, MlpParams};
use crate::scalar::Scalar;
use crate::tensor::TensorBase;
use rand::Rng;
use rand_distr::StandardNormal;

/// Additive floor keeping predicted scales strictly positive.
pub const SIGMA_FLOOR: f64 = 1e-4;

/// Split an N×D token matrix into its first and last D/2 columns.
pub fn split_feature<S: Scalar>(tokens: &TensorBase<S>) -> Result<(TensorBase<S>, TensorBase<S>)> {
    let d = tokens.cols();
    if d % 2 != 0 {
        return Err(Error::InvalidArg { op: "split_feature", msg: format!("feature width {d} is odd") });
    }
    Ok((tokens.slice_cols(0, d / 2), tokens.slice_cols(d / 2, d)))
}

/// Per-token Gaussian field: means and strictly positive scales.
#[derive(Clone, Debug)]
pub struct GaussianTokenField<S> {
    mu: TensorBase<S>,
    sigma: TensorBase<S>,
}

impl<S: Scalar> GaussianTokenField<S> {
    pub fn new(mu: TensorBase<S>, sigma: TensorBase<S>) -> Result<Self> {
        if mu.shape() != sigma.shape() {
            return Err(Error::InvalidArg {
                op: "gaussian_field",
                msg: format!("mu {:?} vs sigma {:?}", mu.shape(), sigma.shape()),
            });
        }
        if !mu.all_finite() {
            return Err(Error::NonFinite { what: "gaussian field mu".into() });
        }
        if sigma.data().iter().any(|&s| !(s > S::zero()) || !s.is_finite()) {
            return Err(Error::InvalidArg { op: "gaussian_field", msg: "sigma must be strictly positive".into() });
        }
        Ok(Self { mu, sigma })
    }

    pub fn mu(&self) -> &TensorBase<S> {
        &self.mu
    }

    pub fn sigma(&self) -> &TensorBase<S> {
        &self.sigma
    }
}

/// Trainable parameters of one modality's distribution head: independent
/// attention + MLP stacks for the mean and scale branches.
#[derive(Clone, Debug)]
pub struct DistributionHead<S> {
    pub attn_mu: AttentionParams<S>,
    pub mlp_mu: MlpParams<S>,
    pub attn_sigma: AttentionParams<S>,
    pub mlp_sigma: MlpParams<S>,
}

impl<S: Scalar> DistributionHead<S> {
    pub fn zeros(half_width: usize, heads: usize, mlp_hidden: usize) -> Self {
        Self {
            attn_mu: AttentionParams::zeros(half_width, heads),
            mlp_mu: MlpParams::zeros(half_width, mlp_hidden, half_width),
            attn_sigma: AttentionParams::zeros(half_width, heads),
            mlp_sigma: MlpParams::zeros(half_width, mlp_hidden, half_width),
        }
    }

    pub fn init<R: Rng>(rng: &mut R, half_width: usize, heads: usize, mlp_hidden: usize) -> Self {
        Self {
            attn_mu: AttentionParams::init(rng, half_width, heads),
            mlp_mu: MlpParams::init(rng, half_width, mlp_hidden, half_width),
            attn_sigma: AttentionParams::init(rng, half_width, heads),
            mlp_sigma: MlpParams::init(rng, half_width, mlp_hidden, half_width),
        }
    }

    pub fn half_width(&self) -> usize {
        self.attn_mu.width()
    }

    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, &TensorBase<S>)> {
        let mut out = self.attn_mu.named_tensors(&format!("{prefix}.mu.attn"));
        out.extend(self.mlp_mu.named_tensors(&format!("{prefix}.mu.mlp")));
        out.extend(self.attn_sigma.named_tensors(&format!("{prefix}.sigma.attn")));
        out.extend(self.mlp_sigma.named_tensors(&format!("{prefix}.sigma.mlp")));
        out
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut TensorBase<S>)) {
        self.attn_mu.visit_mut(&format!("{prefix}.mu.attn"), f);
        self.mlp_mu.visit_mut(&format!("{prefix}.mu.mlp"), f);
        self.attn_sigma.visit_mut(&format!("{prefix}.sigma.attn"), f);
        self.mlp_sigma.visit_mut(&format!("{prefix}.sigma.mlp"), f);
    }

    pub fn bind(&self, g: &mut Graph<S>, prefix: &str) -> HeadNodes {
        HeadNodes {
            attn_mu: self.attn_mu.bind(g, &format!("{prefix}.mu.attn")),
            mlp_mu: self.mlp_mu.bind(g, &format!("{prefix}.mu.mlp")),
            attn_sigma: self.attn_sigma.bind(g, &format!("{prefix}.sigma.attn")),
            mlp_sigma: self.mlp_sigma.bind(g, &format!("{prefix}.sigma.mlp")),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HeadNodes {
    pub attn_mu: AttentionNodes,
    pub mlp_mu: MlpNodes,
    pub attn_sigma: AttentionNodes,
    pub mlp_sigma: MlpNodes,
}

/// Mean branch: mu = tokens + MLP(Attention(tokens)).
pub fn predict_mu_node<S: Scalar>(g: &mut Graph<S>, tokens_mu: NodeId, head: &HeadNodes) -> Result<NodeId> {
    let ctx = attention_node(g, tokens_mu, &head.attn_mu)?;
    let delta = mlp_node(g, ctx, &head.mlp_mu)?;
    g.add(tokens_mu, delta)
}

/// Scale branch: sigma = softplus(MLP(Attention(tokens))) + floor. No
/// residual; the floor keeps sigma strictly positive.
pub fn predict_sigma_node<S: Scalar>(
    g: &mut Graph<S>,
    tokens_sigma: NodeId,
    head: &HeadNodes,
    sigma_floor: S,
) -> Result<NodeId> {
    let ctx = attention_node(g, tokens_sigma, &head.attn_sigma)?;
    let raw = mlp_node(g, ctx, &head.mlp_sigma)?;
    let sp = g.softplus(raw);
    Ok(g.add_scalar(sp, sigma_floor))
}

/// Draw K standard-normal noise tensors, i.i.d. per token, per draw.
pub fn draw_eps<S: Scalar, R: Rng>(rng: &mut R, k: usize, rows: usize, cols: usize) -> Vec<TensorBase<S>> {
    (0..k)
        .map(|_| {
            let data = (0..rows * cols)
                .map(|_| {
                    let z: f64 = rng.sample(StandardNormal);
                    S::from_f64_lossy(z)
                })
                .collect();
            TensorBase::from_vec(rows, cols, data)
        })
        .collect()
}

/// Refined tokens: (tokens + sum_k (mu + eps_k * sigma)) / (K + 1).
///
/// The eps tensors enter as constants, so gradients flow through mu and
/// sigma only — the reparameterization path.
pub fn sample_refine_node<S: Scalar>(
    g: &mut Graph<S>,
    tokens_half: NodeId,
    mu: NodeId,
    sigma: NodeId,
    eps: &[TensorBase<S>],
) -> Result<NodeId> {
    let mut acc = tokens_half;
    for e in eps {
        let e_node = g.constant(e.clone());
        let scaled = g.mul(e_node, sigma)?;
        let draw = g.add(mu, scaled)?;
        acc = g.add(acc, draw)?;
    }
    Ok(g.scale(acc, S::one() / S::from_f64_lossy((eps.len() + 1) as f64)))
}

/// Plain-value refinement: builds a throwaway graph over the same path.
pub fn sample_refine<S: Scalar, R: Rng>(
    tokens_half: &TensorBase<S>,
    field: &GaussianTokenField<S>,
    k: usize,
    rng: &mut R,
) -> TensorBase<S> {
    let eps = draw_eps::<S, R>(rng, k, tokens_half.rows(), tokens_half.cols());
    let mut g = Graph::new();
    let t = g.constant(tokens_half.clone());
    let mu = g.constant(field.mu.clone());
    let sigma = g.constant(field.sigma.clone());
    let refined = sample_refine_node(&mut g, t, mu, sigma, &eps).expect("shapes validated by field");
    g.value(refined).clone()
}
