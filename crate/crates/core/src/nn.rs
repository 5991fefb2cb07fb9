//! Attention and MLP building blocks on top of the autodiff graph.
//!
//! Parameters live outside any graph as plain tensors; each training step
//! binds them into a fresh tape with [`MlpParams::bind`] /
//! [`AttentionParams::bind`] and builds nodes from the bound ids.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::scalar::Scalar;
use crate::tensor::TensorBase;
use rand::Rng;
use rand_distr::StandardNormal;

/// Two-layer MLP with GELU: x @ w1 + b1 -> gelu -> @ w2 + b2.
#[derive(Clone, Debug)]
pub struct MlpParams<S> {
    pub w1: TensorBase<S>,
    pub b1: TensorBase<S>,
    pub w2: TensorBase<S>,
    pub b2: TensorBase<S>,
}

impl<S: Scalar> MlpParams<S> {
    pub fn zeros(d_in: usize, hidden: usize, d_out: usize) -> Self {
        Self {
            w1: TensorBase::zeros(d_in, hidden),
            b1: TensorBase::zeros(1, hidden),
            w2: TensorBase::zeros(hidden, d_out),
            b2: TensorBase::zeros(1, d_out),
        }
    }

    /// Scaled-Gaussian first layer, zero output layer. A zero output layer
    /// makes every head start as the identity/zero map, which keeps early
    /// training near the raw-feature baseline.
    pub fn init<R: Rng>(rng: &mut R, d_in: usize, hidden: usize, d_out: usize) -> Self {
        let mut p = Self::zeros(d_in, hidden, d_out);
        let std = S::from_f64_lossy(1.0 / (d_in as f64).sqrt());
        for v in p.w1.data_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v = S::from_f64_lossy(z) * std;
        }
        p
    }

    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, &TensorBase<S>)> {
        vec![
            (format!("{prefix}.w1"), &self.w1),
            (format!("{prefix}.b1"), &self.b1),
            (format!("{prefix}.w2"), &self.w2),
            (format!("{prefix}.b2"), &self.b2),
        ]
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut TensorBase<S>)) {
        f(format!("{prefix}.w1"), &mut self.w1);
        f(format!("{prefix}.b1"), &mut self.b1);
        f(format!("{prefix}.w2"), &mut self.w2);
        f(format!("{prefix}.b2"), &mut self.b2);
    }

    pub fn bind(&self, g: &mut Graph<S>, prefix: &str) -> MlpNodes {
        MlpNodes {
            w1: g.param(&format!("{prefix}.w1"), self.w1.clone()),
            b1: g.param(&format!("{prefix}.b1"), self.b1.clone()),
            w2: g.param(&format!("{prefix}.w2"), self.w2.clone()),
            b2: g.param(&format!("{prefix}.b2"), self.b2.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MlpNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

/// Forward an N×D_in node through a bound MLP.
pub fn mlp_node<S: Scalar>(g: &mut Graph<S>, x: NodeId, p: &MlpNodes) -> Result<NodeId> {
    let h = g.matmul(x, p.w1)?;
    let h = g.add_bias(h, p.b1)?;
    let h = g.gelu(h);
    let out = g.matmul(h, p.w2)?;
    g.add_bias(out, p.b2)
}

/// Multi-head self-attention with a joint QKV projection and no output
/// projection: the concatenated head outputs are returned directly.
#[derive(Clone, Debug)]
pub struct AttentionParams<S> {
    pub w_qkv: TensorBase<S>,
    pub heads: usize,
}

impl<S: Scalar> AttentionParams<S> {
    pub fn zeros(width: usize, heads: usize) -> Self {
        assert!(heads > 0 && width % heads == 0, "width {width} not divisible by {heads} heads");
        Self { w_qkv: TensorBase::zeros(width, 3 * width), heads }
    }

    pub fn init<R: Rng>(rng: &mut R, width: usize, heads: usize) -> Self {
        let mut p = Self::zeros(width, heads);
        let std = S::from_f64_lossy(1.0 / (width as f64).sqrt());
        for v in p.w_qkv.data_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v = S::from_f64_lossy(z) * std;
        }
        p
    }

    pub fn width(&self) -> usize {
        self.w_qkv.rows()
    }

    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, &TensorBase<S>)> {
        vec![(format!("{prefix}.w_qkv"), &self.w_qkv)]
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut TensorBase<S>)) {
        f(format!("{prefix}.w_qkv"), &mut self.w_qkv);
    }

    pub fn bind(&self, g: &mut Graph<S>, prefix: &str) -> AttentionNodes {
        AttentionNodes { w_qkv: g.param(&format!("{prefix}.w_qkv"), self.w_qkv.clone()), heads: self.heads }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionNodes {
    pub w_qkv: NodeId,
    pub heads: usize,
}

/// Full self-attention over the N tokens of an N×D node, per-head scaling
/// 1/sqrt(d_k), softmax over keys.
pub fn attention_node<S: Scalar>(g: &mut Graph<S>, x: NodeId, p: &AttentionNodes) -> Result<NodeId> {
    let width = g.value(x).cols();
    if g.value(p.w_qkv).rows() != width {
        return Err(Error::ShapeMismatch {
            op: "attention",
            node: x.index(),
            lhs: g.value(x).shape(),
            rhs: g.value(p.w_qkv).shape(),
        });
    }
    let d_k = width / p.heads;
    let qkv = g.matmul(x, p.w_qkv)?;
    let q = g.slice_cols(qkv, 0, width)?;
    let k = g.slice_cols(qkv, width, 2 * width)?;
    let v = g.slice_cols(qkv, 2 * width, 3 * width)?;

    let scale = S::one() / S::from_f64_lossy((d_k as f64).sqrt());
    let mut head_outputs = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let (lo, hi) = (h * d_k, (h + 1) * d_k);
        let qh = g.slice_cols(q, lo, hi)?;
        let kh = g.slice_cols(k, lo, hi)?;
        let vh = g.slice_cols(v, lo, hi)?;
        let kh_t = g.transpose(kh);
        let scores = g.matmul(qh, kh_t)?;
        let scores = g.scale(scores, scale);
        let weights = g.row_softmax(scores);
        head_outputs.push(g.matmul(weights, vh)?);
    }
    g.concat_cols(&head_outputs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    type T = TensorBase<f64>;

    #[test]
    fn zero_mlp_maps_to_zero() {
        let p = MlpParams::<f64>::zeros(4, 8, 4);
        let mut g = Graph::new();
        let nodes = p.bind(&mut g, "mlp");
        let x = g.input("x", T::from_vec(2, 4, vec![1.0; 8]));
        let y = mlp_node(&mut g, x, &nodes).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_token_attention_is_value_projection() {
        // With one token, softmax over the single key is 1, so the output
        // is exactly the token's value projection.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = AttentionParams::<f64>::init(&mut rng, 4, 2);
        let mut g = Graph::new();
        let nodes = p.bind(&mut g, "attn");
        let x_t = T::from_vec(1, 4, vec![0.3, -1.0, 0.5, 2.0]);
        let x = g.input("x", x_t.clone());
        let y = attention_node(&mut g, x, &nodes).unwrap();

        let v_proj = x_t.matmul(&p.w_qkv).slice_cols(8, 12);
        for (a, b) in g.value(y).data().iter().zip(v_proj.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = AttentionParams::<f64>::init(&mut rng, 4, 2);
        let point = T::from_vec(3, 4, (0..12).map(|i| ((i * 7 % 11) as f64 - 5.0) / 4.0).collect());
        let err = grad_check(
            |g, x| {
                let nodes = p.bind(g, "attn");
                let y = attention_node(g, x, &nodes)?;
                let sq = g.mul(y, y)?;
                Ok(g.sum_all(sq))
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "attention grad err {err}");
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut p = MlpParams::<f64>::init(&mut rng, 4, 6, 4);
        // Nonzero output layer so the whole path is exercised.
        for v in p.w2.data_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v = z * 0.3;
        }
        let point = T::from_vec(2, 4, (0..8).map(|i| (i as f64 - 3.5) / 3.0).collect());
        let err = grad_check(
            |g, x| {
                let nodes = p.bind(g, "mlp");
                let y = mlp_node(g, x, &nodes)?;
                let sq = g.mul(y, y)?;
                Ok(g.sum_all(sq))
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "mlp grad err {err}");
    }
}
