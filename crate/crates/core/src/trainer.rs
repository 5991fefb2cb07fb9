//! Mini-batch training and deterministic evaluation.
//!
//! Every stochastic stream (init, per-epoch shuffle, per-sample noise,
//! evaluation noise) is derived from the config seed plus counters, so a
//! run is a pure function of (config, corpus) at any worker count: the
//! per-pair transport solves run in a thread pool but write into indexed
//! slots, and every floating-point reduction happens in a fixed order.

use crate::checkpoint::{config_hash, Checkpoint};
use crate::config::{stream_seed, EvalMode, TrainConfig};
use crate::dist_head::draw_eps;
use crate::error::{Error, Result};
use crate::metrics::{metrics, rank_matrix, Direction, RetrievalReport};
use crate::model::{
    build_batch_loss, encode_side, inference_similarity_matrix, BatchData, EncodedSample, LossCfg, ModelParams,
};
use crate::optim::Adam;
use crate::synth::{Corpus, PairedSample};
use crate::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One epoch's worth of logged numbers.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: u64,
    pub mean_ls: f64,
    pub mean_ld: f64,
    pub val_r1_t2v: f64,
    pub val_r1_v2t: f64,
}

impl EpochLog {
    /// Tab-separated: epoch, L_S, L_D, val R@1 T2V, val R@1 V2T.
    pub fn tsv_line(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.4}\t{:.4}",
            self.epoch, self.mean_ls, self.mean_ld, self.val_r1_t2v, self.val_r1_v2t
        )
    }
}

/// Result of a training run.
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
    /// Set when training aborted on a non-finite loss; the checkpoint is
    /// then the last good snapshot.
    pub nan_abort_step: Option<u64>,
    /// Total Sinkhorn solves that hit the iteration cap (non-fatal).
    pub sinkhorn_failures: u64,
}

fn loss_cfg(config: &TrainConfig) -> LossCfg {
    LossCfg {
        k: config.k,
        eta: config.eta,
        sinkhorn_iters: config.sinkhorn_iters,
        sinkhorn_tol: config.sinkhorn_tol,
        lambda_ot: config.lambda_ot,
        lambda_d: config.lambda_d,
        tau: config.tau,
        sigma_floor: config.sigma_floor,
    }
}

fn resolved_threads(config: &TrainConfig) -> usize {
    if config.threads > 0 {
        config.threads
    } else {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    }
}

fn snapshot(config: &TrainConfig, dim: usize, epochs_done: u64, steps_done: u64, params: &ModelParams, adam: &Adam) -> Checkpoint {
    let (t, m, v) = adam.state();
    Checkpoint {
        config: config.clone(),
        dim,
        epochs_done,
        steps_done,
        params: params.clone(),
        adam_t: t,
        adam_m: m.clone(),
        adam_v: v.clone(),
    }
}

/// Fisher-Yates with a derived per-epoch stream.
fn shuffled_indices(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, "shuffle", &[epoch]));
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = (rand::Rng::gen_range(&mut rng, 0..=i as u64)) as usize;
        idx.swap(i, j);
    }
    idx
}

/// Train from scratch or resume. Resuming requires the same config hash;
/// derived noise streams make the continuation bit-identical to an
/// uninterrupted run.
pub fn train(config: &TrainConfig, corpus: &Corpus, resume: Option<Checkpoint>) -> Result<TrainOutcome> {
    config.validate()?;
    if corpus.train.is_empty() {
        return Err(Error::InvalidArg { op: "train", msg: "training split is empty".into() });
    }
    let dim = corpus.dim;

    let (mut params, mut adam, start_epoch, mut steps_done) = match resume {
        Some(ckpt) => {
            if ckpt.dim != dim {
                return Err(Error::Incompatible {
                    msg: format!("checkpoint dim {} vs corpus dim {dim}", ckpt.dim),
                });
            }
            if ckpt.config_hash() != config_hash(config, dim) {
                return Err(Error::Incompatible { msg: "resume config differs from checkpoint config".into() });
            }
            let adam = Adam::from_state(config.lr, ckpt.adam_t, ckpt.adam_m, ckpt.adam_v);
            (ckpt.params, adam, ckpt.epochs_done, ckpt.steps_done)
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, "init", &[]));
            let params = ModelParams::init(&mut rng, dim, config.heads, config.mlp_hidden)?;
            (params, Adam::new(config.lr), 0, 0)
        }
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(resolved_threads(config))
        .build()
        .map_err(|e| Error::Config { msg: format!("thread pool: {e}") })?;

    let cfg = loss_cfg(config);
    let half = params.half_width();
    let mut log = Vec::new();
    let mut sinkhorn_failures = 0u64;
    let mut last_good = snapshot(config, dim, start_epoch, steps_done, &params, &adam);

    for epoch in start_epoch..config.epochs as u64 {
        let order = shuffled_indices(corpus.train.len(), config.seed, epoch);
        let mut eps_rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, "eps", &[epoch]));

        let mut ls_sum = 0.0;
        let mut ld_sum = 0.0;
        let mut batches = 0usize;

        for chunk in order.chunks(config.batch) {
            let mut data = BatchData {
                videos: Vec::with_capacity(chunk.len()),
                texts: Vec::with_capacity(chunk.len()),
                eps_video: Vec::with_capacity(chunk.len()),
                eps_text: Vec::with_capacity(chunk.len()),
            };
            for &i in chunk {
                let sample = &corpus.train[i];
                let video = sample.video.widen();
                let text = sample.text.widen();
                data.eps_video.push(draw_eps(&mut eps_rng, config.k, video.rows(), half));
                data.eps_text.push(draw_eps(&mut eps_rng, config.k, text.rows(), half));
                data.videos.push(video);
                data.texts.push(text);
            }

            let mut g = Graph::new();
            let nodes = params.bind(&mut g, config.k > 0);
            let loss = build_batch_loss(&mut g, &nodes, &data, &cfg, Some(&pool))?;
            sinkhorn_failures += loss.sinkhorn_failures as u64;

            let total = g.value(loss.total).item();
            if !total.is_finite() {
                return Ok(TrainOutcome {
                    checkpoint: last_good,
                    log,
                    nan_abort_step: Some(steps_done),
                    sinkhorn_failures,
                });
            }
            ls_sum += g.value(loss.ls).item();
            ld_sum += loss.ld.map(|n| g.value(n).item()).unwrap_or(0.0);
            batches += 1;

            g.backward(loss.total)?;
            let grads = nodes.collect_grads(&g);
            adam.step(&mut params, &grads);
            steps_done += 1;
        }

        let (val_t2v, val_v2t) = if corpus.val.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let (t2v, v2t) = evaluate_params(&params, config, &corpus.val)?;
            (t2v.r1, v2t.r1)
        };
        log.push(EpochLog {
            epoch: epoch + 1,
            mean_ls: ls_sum / batches.max(1) as f64,
            mean_ld: ld_sum / batches.max(1) as f64,
            val_r1_t2v: val_t2v,
            val_r1_v2t: val_v2t,
        });

        let done = epoch + 1;
        if config.checkpoint_interval > 0 && done % config.checkpoint_interval as u64 == 0 {
            last_good = snapshot(config, dim, done, steps_done, &params, &adam);
        }
    }

    Ok(TrainOutcome {
        checkpoint: snapshot(config, dim, config.epochs as u64, steps_done, &params, &adam),
        log,
        nan_abort_step: None,
        sinkhorn_failures,
    })
}

/// Encode a split for inference with the config's evaluation noise policy.
fn encode_split(
    params: &ModelParams,
    config: &TrainConfig,
    samples: &[PairedSample],
) -> Result<(Vec<EncodedSample>, Vec<EncodedSample>)> {
    let half = params.half_width();
    let mut texts = Vec::with_capacity(samples.len());
    let mut videos = Vec::with_capacity(samples.len());
    for (i, sample) in samples.iter().enumerate() {
        let video = sample.video.widen();
        let text = sample.text.widen();
        let (eps_v, eps_t) = match config.eval_mode {
            EvalMode::Sampled => {
                let mut rv =
                    ChaCha8Rng::seed_from_u64(stream_seed(config.eval_seed, "eval_eps", &[i as u64, 0]));
                let mut rt =
                    ChaCha8Rng::seed_from_u64(stream_seed(config.eval_seed, "eval_eps", &[i as u64, 1]));
                (draw_eps(&mut rv, config.k, video.rows(), half), draw_eps(&mut rt, config.k, text.rows(), half))
            }
            EvalMode::MeanOnly => (
                (0..config.k).map(|_| Tensor::zeros(video.rows(), half)).collect(),
                (0..config.k).map(|_| Tensor::zeros(text.rows(), half)).collect(),
            ),
        };
        videos.push(encode_side(&params.video_head, &params.omega_v, &video, config.k, config.sigma_floor, &eps_v)?);
        texts.push(encode_side(&params.text_head, &params.omega_t, &text, config.k, config.sigma_floor, &eps_t)?);
    }
    Ok((texts, videos))
}

/// Inference-mode retrieval over a split: fused token similarity without
/// the OT term, ranked in both directions.
pub fn evaluate_params(
    params: &ModelParams,
    config: &TrainConfig,
    samples: &[PairedSample],
) -> Result<(RetrievalReport, RetrievalReport)> {
    if samples.is_empty() {
        return Err(Error::InvalidArg { op: "evaluate", msg: "empty split".into() });
    }
    let (texts, videos) = encode_split(params, config, samples)?;
    let sim = inference_similarity_matrix(&texts, &videos)?;
    let t2v = metrics(&rank_matrix(sim.values(), Direction::T2v)?, Direction::T2v)?;
    let v2t = metrics(&rank_matrix(sim.values(), Direction::V2t)?, Direction::V2t)?;
    Ok((t2v, v2t))
}

/// Evaluate a checkpoint against a split, checking dimension compatibility.
pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    corpus_dim: usize,
    samples: &[PairedSample],
) -> Result<(RetrievalReport, RetrievalReport)> {
    if corpus_dim != ckpt.dim {
        return Err(Error::Incompatible {
            msg: format!("corpus dim {corpus_dim} vs checkpoint dim {}", ckpt.dim),
        });
    }
    evaluate_params(&ckpt.params, &ckpt.config, samples)
}
