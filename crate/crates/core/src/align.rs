//! Token-wise alignment, learned token weighting, fused similarity, and
//! the two symmetric contrastive losses.
//!
//! The graph builders are the training path; the plain functions run the
//! same math for inference and reporting (losses route through a throwaway
//! graph so there is exactly one implementation of each formula).

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nn::{mlp_node, MlpNodes, MlpParams};
use crate::scalar::Scalar;
use crate::tensor::TensorBase;

/// Per-token cosine alignment between two token sets, entries in [-1, 1].
#[derive(Clone, Debug)]
pub struct AlignmentMatrix<S>(TensorBase<S>);

impl<S: Scalar> AlignmentMatrix<S> {
    pub fn values(&self) -> &TensorBase<S> {
        &self.0
    }
}

/// A_ij = <v_i, t_j> on L2-normalized rows. Inputs are normalized here;
/// a zero-norm token cannot be normalized and is an error naming its index.
pub fn token_alignment<S: Scalar>(video: &TensorBase<S>, text: &TensorBase<S>) -> Result<AlignmentMatrix<S>> {
    let (vn, v_zero) = video.l2_normalize_rows();
    if let Some(idx) = v_zero.iter().position(|&z| z) {
        return Err(Error::ZeroNormToken { side: "video", index: idx });
    }
    let (tn, t_zero) = text.l2_normalize_rows();
    if let Some(idx) = t_zero.iter().position(|&z| z) {
        return Err(Error::ZeroNormToken { side: "text", index: idx });
    }
    Ok(AlignmentMatrix(vn.matmul(&tn.transpose())))
}

/// Alignment node from already-normalized token nodes.
pub fn alignment_node<S: Scalar>(g: &mut Graph<S>, v_norm: NodeId, t_norm: NodeId) -> Result<NodeId> {
    let t_t = g.transpose(t_norm);
    g.matmul(v_norm, t_t)
}

/// Learned weights over a sequence's tokens: a probability vector.
#[derive(Clone, Debug)]
pub struct TokenWeights<S>(Vec<S>);

impl<S: Scalar> TokenWeights<S> {
    pub fn new(w: Vec<S>) -> Result<Self> {
        let tol = S::from_f64_lossy(1e-12);
        if w.is_empty() {
            return Err(Error::InvalidArg { op: "token_weights", msg: "empty weight vector".into() });
        }
        if w.iter().any(|&x| x < S::zero()) {
            return Err(Error::InvalidArg { op: "token_weights", msg: "negative weight".into() });
        }
        let sum = w.iter().fold(S::zero(), |a, &b| a + b);
        if (sum - S::one()).abs() > tol {
            return Err(Error::InvalidArg { op: "token_weights", msg: format!("weights sum to {sum}") });
        }
        Ok(Self(w))
    }

    pub fn as_slice(&self) -> &[S] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// softmax(MLP(X)) over the N token scores, as a 1×N node.
pub fn token_weights_node<S: Scalar>(g: &mut Graph<S>, tokens: NodeId, mlp: &MlpNodes) -> Result<NodeId> {
    let scores = mlp_node(g, tokens, mlp)?; // N×1
    let row = g.transpose(scores); // 1×N
    Ok(g.row_softmax(row))
}

/// Plain-value token weights through the same graph path.
pub fn token_weights<S: Scalar>(tokens: &TensorBase<S>, mlp: &MlpParams<S>) -> Result<TokenWeights<S>> {
    let mut g = Graph::new();
    let nodes = mlp.bind(&mut g, "omega");
    let x = g.constant(tokens.clone());
    let w = token_weights_node(&mut g, x, &nodes)?;
    TokenWeights::new(g.value(w).data().to_vec())
}

/// Whether a similarity was assembled with the training-only OT term.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SimilarityMode {
    Train,
    Inference,
}

/// B×B matrix of pairwise sample similarities, tagged with how it was built.
#[derive(Clone, Debug)]
pub struct SimilarityMatrix<S> {
    values: TensorBase<S>,
    mode: SimilarityMode,
}

impl<S: Scalar> SimilarityMatrix<S> {
    pub fn new(values: TensorBase<S>, mode: SimilarityMode) -> Self {
        Self { values, mode }
    }

    pub fn values(&self) -> &TensorBase<S> {
        &self.values
    }

    pub fn mode(&self) -> SimilarityMode {
        self.mode
    }
}

/// Fused pairwise similarity over one alignment matrix:
/// 0.5 (sum_i w_v[i] max_j A_ij + sum_j w_t[j] max_i A_ij), plus
/// lambda_ot * s_ot in training mode. Averaging the OT term into both
/// halves contributes exactly one lambda_ot * s_ot, so it is added once.
pub fn fused_similarity<S: Scalar>(
    alignment: &AlignmentMatrix<S>,
    w_v: &TokenWeights<S>,
    w_t: &TokenWeights<S>,
    s_ot: Option<S>,
    lambda_ot: S,
    mode: SimilarityMode,
) -> Result<S> {
    let a = alignment.values();
    if w_v.len() != a.rows() || w_t.len() != a.cols() {
        return Err(Error::InvalidArg {
            op: "fused_similarity",
            msg: format!("weights {}/{} vs alignment {:?}", w_v.len(), w_t.len(), a.shape()),
        });
    }
    let s_ot = match (mode, s_ot) {
        (SimilarityMode::Train, Some(v)) => Some(v),
        (SimilarityMode::Inference, None) => None,
        (SimilarityMode::Train, None) => {
            return Err(Error::InvalidArg { op: "fused_similarity", msg: "train mode requires s_ot".into() })
        }
        (SimilarityMode::Inference, Some(_)) => {
            return Err(Error::InvalidArg {
                op: "fused_similarity",
                msg: "the OT term is computed only during training".into(),
            })
        }
    };

    let (row_max, _) = a.max_axis(1);
    let mut v_term = S::zero();
    for (i, &w) in w_v.as_slice().iter().enumerate() {
        v_term += w * row_max.get(i, 0);
    }
    let (col_max, _) = a.max_axis(0);
    let mut t_term = S::zero();
    for (j, &w) in w_t.as_slice().iter().enumerate() {
        t_term += w * col_max.get(0, j);
    }
    let tok = S::from_f64_lossy(0.5) * (v_term + t_term);
    Ok(match s_ot {
        Some(v) => tok + lambda_ot * v,
        None => tok,
    })
}

/// Training-path fused similarity as a 1×1 node. `w_v` is 1×N_v, `w_t` is
/// 1×N_t, and `s_ot` carries the (constant-plan) OT similarity node.
pub fn fused_similarity_node<S: Scalar>(
    g: &mut Graph<S>,
    alignment: NodeId,
    w_v: NodeId,
    w_t: NodeId,
    s_ot: Option<NodeId>,
    lambda_ot: S,
) -> Result<NodeId> {
    let row_max = g.max_axis(alignment, 1); // N_v×1
    let v_term = g.matmul(w_v, row_max)?; // 1×1
    let col_max = g.max_axis(alignment, 0); // 1×N_t
    let col_max_t = g.transpose(col_max);
    let t_term = g.matmul(w_t, col_max_t)?;
    let sum = g.add(v_term, t_term)?;
    let tok = g.scale(sum, S::from_f64_lossy(0.5));
    match s_ot {
        Some(so) => {
            let scaled = g.scale(so, lambda_ot);
            g.add(tok, scaled)
        }
        None => Ok(tok),
    }
}

/// OT similarity as a node: sum(T ⊙ A) with T entering as a constant, so
/// gradients flow only through the alignment.
pub fn ot_similarity_node<S: Scalar>(g: &mut Graph<S>, plan: TensorBase<S>, alignment: NodeId) -> Result<NodeId> {
    let t = g.constant(plan);
    let prod = g.mul(t, alignment)?;
    Ok(g.sum_all(prod))
}

/// Symmetric InfoNCE over a square score matrix with diagonal positives:
/// 0.5 (mean_i -log softmax_row(S/tau)_ii + mean_j -log softmax_col(S/tau)_jj).
pub fn symmetric_info_nce_node<S: Scalar>(g: &mut Graph<S>, scores: NodeId, tau: S) -> Result<NodeId> {
    if !(tau > S::zero()) {
        return Err(Error::InvalidArg { op: "info_nce", msg: format!("tau {tau} must be > 0") });
    }
    let b = g.value(scores).rows();
    if g.value(scores).cols() != b {
        return Err(Error::InvalidArg {
            op: "info_nce",
            msg: format!("score matrix {:?} is not square", g.value(scores).shape()),
        });
    }
    let mut eye = TensorBase::zeros(b, b);
    for i in 0..b {
        eye.set(i, i, S::one());
    }
    let eye = g.constant(eye);

    let logits = g.scale(scores, S::one() / tau);
    let direction_term = |g: &mut Graph<S>, m: NodeId| -> Result<NodeId> {
        let probs = g.row_softmax(m);
        let picked = g.mul(probs, eye)?;
        let diag = g.sum_axis(picked, 1); // B×1 of diagonal probabilities
        let logp = g.log(diag);
        Ok(g.mean_all(logp))
    };
    let row_term = direction_term(g, logits)?;
    let logits_t = g.transpose(logits);
    let col_term = direction_term(g, logits_t)?;
    let total = g.add(row_term, col_term)?;
    Ok(g.scale(total, S::from_f64_lossy(-0.5)))
}

/// Contrastive loss over fused similarities (diagonal = matched pairs).
pub fn contrastive_loss<S: Scalar>(scores: &TensorBase<S>, tau: S) -> Result<S> {
    let mut g = Graph::new();
    let s = g.constant(scores.clone());
    let loss = symmetric_info_nce_node(&mut g, s, tau)?;
    Ok(g.value(loss).item())
}

/// Contrastive loss over pairwise OT similarities. Same symmetric InfoNCE
/// form; the plan is already fixed upstream.
pub fn ot_loss<S: Scalar>(ot_scores: &TensorBase<S>, tau: S) -> Result<S> {
    contrastive_loss(ot_scores, tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    type T = TensorBase<f64>;

    fn uniform_weights(n: usize) -> TokenWeights<f64> {
        TokenWeights::new(vec![1.0 / n as f64; n]).unwrap()
    }

    #[test]
    fn alignment_identical_single_tokens() {
        let v = T::from_vec(1, 3, vec![1.0, 2.0, 2.0]);
        let a = token_alignment(&v, &v).unwrap();
        assert!((a.values().item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn alignment_orthogonal_tokens() {
        let v = T::from_vec(1, 2, vec![1.0, 0.0]);
        let t = T::from_vec(1, 2, vec![0.0, 5.0]);
        let a = token_alignment(&v, &t).unwrap();
        assert!(a.values().item().abs() < 1e-12);
    }

    #[test]
    fn alignment_hand_dot_product() {
        let v = T::from_vec(1, 2, vec![1.0, 0.0]);
        let t = T::from_vec(2, 2, vec![1.0, 0.0, 0.6, 0.8]);
        let a = token_alignment(&v, &t).unwrap();
        assert!((a.values().get(0, 0) - 1.0).abs() < 1e-12);
        assert!((a.values().get(0, 1) - 0.6).abs() < 1e-12);
    }

    #[test]
    fn alignment_zero_token_names_index() {
        let v = T::from_vec(2, 2, vec![1.0, 0.0, 0.0, 0.0]);
        let t = T::from_vec(1, 2, vec![1.0, 0.0]);
        match token_alignment(&v, &t).unwrap_err() {
            Error::ZeroNormToken { side, index } => {
                assert_eq!(side, "video");
                assert_eq!(index, 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn alignment_entries_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let v = T::from_vec(4, 6, (0..24).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let t = T::from_vec(3, 6, (0..18).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let a = token_alignment(&v, &t).unwrap();
        for &x in a.values().data() {
            assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&x));
        }
    }

    #[test]
    fn token_weights_zero_mlp_is_uniform() {
        let mlp = MlpParams::<f64>::zeros(4, 8, 1);
        let x = T::from_vec(3, 4, (0..12).map(|i| i as f64).collect());
        let w = token_weights(&x, &mlp).unwrap();
        for &v in w.as_slice() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn token_weights_single_token_is_one() {
        let mlp = MlpParams::<f64>::zeros(4, 8, 1);
        let x = T::from_vec(1, 4, vec![1.0, 2.0, 3.0, 4.0]);
        let w = token_weights(&x, &mlp).unwrap();
        assert_eq!(w.len(), 1);
        assert!((w.as_slice()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_of_one_zero_scores() {
        // scores [1, 0] -> [e/(e+1), 1/(e+1)]
        let mut g = Graph::<f64>::new();
        let s = g.constant(T::from_vec(1, 2, vec![1.0, 0.0]));
        let w = g.row_softmax(s);
        let e = std::f64::consts::E;
        assert!((g.value(w).get(0, 0) - e / (e + 1.0)).abs() < 1e-12);
        assert!((g.value(w).get(0, 1) - 1.0 / (e + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn fused_similarity_identity_alignment() {
        let a = token_alignment(
            &T::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]),
            &T::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]),
        )
        .unwrap();
        let w = uniform_weights(2);
        let s = fused_similarity(&a, &w, &w, None, 1.0, SimilarityMode::Inference).unwrap();
        assert!((s - 1.0).abs() < 1e-12);

        let s = fused_similarity(&a, &w, &w, Some(0.5), 1.0, SimilarityMode::Train).unwrap();
        assert!((s - 1.5).abs() < 1e-12);
    }

    #[test]
    fn fused_similarity_hand_example() {
        let a = AlignmentMatrix(T::from_vec(2, 2, vec![0.2, 0.8, 0.4, 0.6]));
        let w = uniform_weights(2);
        let s = fused_similarity(&a, &w, &w, None, 1.0, SimilarityMode::Inference).unwrap();
        assert!((s - 0.65).abs() < 1e-12, "{s}");
    }

    #[test]
    fn fused_similarity_mode_mismatch_errors() {
        let a = AlignmentMatrix(T::scalar(0.5));
        let w = uniform_weights(1);
        assert!(fused_similarity(&a, &w, &w, None, 1.0, SimilarityMode::Train).is_err());
        assert!(fused_similarity(&a, &w, &w, Some(0.1), 1.0, SimilarityMode::Inference).is_err());
    }

    #[test]
    fn fused_similarity_inference_stays_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let nv = rng.gen_range(1..=5);
            let nt = rng.gen_range(1..=5);
            let v = T::from_vec(nv, 4, (0..nv * 4).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let t = T::from_vec(nt, 4, (0..nt * 4).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let a = token_alignment(&v, &t).unwrap();
            let wv = uniform_weights(nv);
            let wt = uniform_weights(nt);
            let s = fused_similarity(&a, &wv, &wt, None, 1.0, SimilarityMode::Inference).unwrap();
            assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&s), "{s}");
        }
    }

    #[test]
    fn graph_fused_similarity_matches_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let a_vals = T::from_vec(3, 2, (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let wv_raw = T::from_vec(1, 3, vec![0.2, 0.5, 0.3]);
        let wt_raw = T::from_vec(1, 2, vec![0.6, 0.4]);

        let mut g = Graph::new();
        let a = g.constant(a_vals.clone());
        let wv = g.constant(wv_raw.clone());
        let wt = g.constant(wt_raw.clone());
        let so = g.constant(T::scalar(0.25));
        let node = fused_similarity_node(&mut g, a, wv, wt, Some(so), 0.8).unwrap();

        let plain = fused_similarity(
            &AlignmentMatrix(a_vals),
            &TokenWeights::new(wv_raw.data().to_vec()).unwrap(),
            &TokenWeights::new(wt_raw.data().to_vec()).unwrap(),
            Some(0.25),
            0.8,
            SimilarityMode::Train,
        )
        .unwrap();
        assert!((g.value(node).item() - plain).abs() < 1e-14);
    }

    #[test]
    fn loss_single_pair_is_zero() {
        let loss = contrastive_loss(&T::scalar(0.37), 1.0).unwrap();
        assert_eq!(loss, 0.0);
        let loss = ot_loss(&T::scalar(-2.0), 0.07).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn loss_identity_two_pairs_closed_form() {
        let s = T::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let expect = (1.0 + (-1.0f64).exp()).ln();
        let loss = contrastive_loss(&s, 1.0).unwrap();
        assert!((loss - expect).abs() < 1e-12, "{loss} vs {expect}");
        assert!((loss - 0.31326).abs() < 1e-4);
        let loss = ot_loss(&s, 1.0).unwrap();
        assert!((loss - expect).abs() < 1e-12);
    }

    #[test]
    fn loss_shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = T::from_vec(4, 4, (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let base = contrastive_loss(&s, 0.07).unwrap();
        let shifted = contrastive_loss(&s.add_scalar(3.7), 0.07).unwrap();
        assert!((base - shifted).abs() < 1e-9, "{base} vs {shifted}");
    }

    #[test]
    fn loss_nonnegative_and_vanishes_for_confident_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..10 {
            let s = T::from_vec(3, 3, (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect());
            assert!(contrastive_loss(&s, 0.07).unwrap() >= 0.0);
        }
        // Identity scaled up: loss decreases monotonically toward 0.
        let mut prev = f64::INFINITY;
        for scale in [1.0, 2.0, 4.0, 8.0, 16.0] {
            let mut s = T::zeros(3, 3);
            for i in 0..3 {
                s.set(i, i, scale);
            }
            let loss = contrastive_loss(&s, 1.0).unwrap();
            assert!(loss < prev);
            prev = loss;
        }
        assert!(prev < 1e-6);
    }

    #[test]
    fn loss_uninformative_logits_approach_ln_b() {
        // Random unit features in a high dimension give near-constant
        // similarities, so the loss concentrates at ln B.
        let b = 256;
        let d = 128;
        let mut total = 0.0;
        let seeds = 20;
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let feats: Vec<T> = (0..2 * b)
                .map(|_| {
                    let row = T::from_vec(1, d, (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect());
                    row.l2_normalize_rows().0
                })
                .collect();
            let mut s = T::zeros(b, b);
            for i in 0..b {
                for j in 0..b {
                    s.set(i, j, feats[i].frobenius_dot(&feats[b + j]));
                }
            }
            total += contrastive_loss(&s, 1.0).unwrap();
        }
        let mean = total / seeds as f64;
        let ln_b = (b as f64).ln();
        assert!((mean - ln_b).abs() < 0.1, "mean {mean} vs ln B {ln_b}");
    }

    #[test]
    fn loss_rejects_bad_tau_and_shape() {
        let s = T::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        assert!(contrastive_loss(&s, 0.0).is_err());
        assert!(contrastive_loss(&s, -1.0).is_err());
        assert!(contrastive_loss(&T::zeros(2, 3), 1.0).is_err());
    }

    #[test]
    fn info_nce_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let point = T::from_vec(3, 3, (0..9).map(|_| rng.gen_range(-0.5..0.5)).collect());
        let err = crate::graph::grad_check(
            |g, s| symmetric_info_nce_node(g, s, 0.5),
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "info-nce grad err {err}");
    }
}
