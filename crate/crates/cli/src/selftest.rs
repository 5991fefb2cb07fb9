//! Fast oracle suite behind `upret selftest`.
//!
//! Each check is deterministic, prints one PASS/FAIL line, and finishes
//! well inside the minute budget. `inject_bad_eta` drives the Sinkhorn
//! feasibility check with a negative regularizer as a negative control:
//! the check must FAIL and the command must exit nonzero.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use upret_core::align::contrastive_loss;
use upret_core::dist_head::{sample_refine, GaussianTokenField};
use upret_core::graph::op_gradient_checks;
use upret_core::metrics::{metrics, rank_matrix, Direction};
use upret_core::model::{build_batch_loss, build_batch_loss_frozen, BatchData, LossCfg, ModelParams};
use upret_core::ot::{exact_ot_bruteforce, sinkhorn, CostMatrix, Marginals};
use upret_core::synth::{generate_corpus, CorpusSpec};
use upret_core::uprf::{load_corpus, write_corpus};
use upret_core::{Graph, Tensor};

type Check = (&'static str, fn(&Ctx) -> Result<(), String>);

pub struct Ctx {
    inject_bad_eta: bool,
}

fn random_cost(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> CostMatrix<f64> {
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(0.0..2.0)).collect();
    CostMatrix::raw(Tensor::from_vec(rows, cols, data)).expect("finite cost")
}

fn sinkhorn_feasibility(ctx: &Ctx) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let etas = if ctx.inject_bad_eta { vec![-1.0] } else { vec![0.05, 0.1, 0.5] };
    for round in 0..12 {
        let nv = rng.gen_range(1..=64);
        let nt = rng.gen_range(1..=32);
        let cost = random_cost(&mut rng, nv, nt);
        let m = Marginals::uniform(nv, nt);
        for &eta in &etas {
            let plan = sinkhorn(&cost, &m, eta, 2000, 1e-7)
                .map_err(|e| format!("round {round} ({nv}x{nt}, eta {eta}): {e}"))?;
            if plan.marginal_violation > 1e-6 {
                return Err(format!(
                    "round {round} ({nv}x{nt}, eta {eta}): violation {}",
                    plan.marginal_violation
                ));
            }
        }
    }
    Ok(())
}

fn exact_ot_agreement(_ctx: &Ctx) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    for round in 0..10 {
        let n = rng.gen_range(2..=6);
        let cost = random_cost(&mut rng, n, n);
        let m = Marginals::uniform(n, n);
        let exact = exact_ot_bruteforce(&cost, &m).map_err(|e| e.to_string())?;
        let plan = sinkhorn(&cost, &m, 0.01, 20000, 1e-9).map_err(|e| e.to_string())?;
        let entropic = plan.values.frobenius_dot(cost.values());
        if (entropic - exact).abs() > 0.02 {
            return Err(format!("round {round} (n {n}): entropic {entropic} vs exact {exact}"));
        }
    }
    Ok(())
}

fn max_entropy_limit(_ctx: &Ctx) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    for round in 0..5 {
        let nv = rng.gen_range(16..=64);
        let nt = rng.gen_range(16..=32);
        let cost = random_cost(&mut rng, nv, nt);
        let m = Marginals::uniform(nv, nt);
        let plan = sinkhorn(&cost, &m, 100.0, 500, 1e-8).map_err(|e| e.to_string())?;
        for i in 0..nv {
            for j in 0..nt {
                let expect = m.rows()[i] * m.cols()[j];
                let diff = (plan.values.get(i, j) - expect).abs();
                if diff > 1e-4 {
                    return Err(format!("round {round}: |T - p q^T| = {diff} at ({i},{j})"));
                }
            }
        }
    }
    Ok(())
}

fn op_gradients(_ctx: &Ctx) -> Result<(), String> {
    for check in op_gradient_checks(3, 404) {
        if check.max_rel_err > 1e-4 {
            return Err(format!("{}: rel err {}", check.name, check.max_rel_err));
        }
    }
    Ok(())
}

fn composed_loss_gradient(_ctx: &Ctx) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let params = ModelParams::init(&mut rng, 8, 2, 8).map_err(|e| e.to_string())?;
    let mk = |rng: &mut ChaCha8Rng, rows: usize| {
        Tensor::from_vec(rows, 8, (0..rows * 8).map(|_| rng.gen_range(-1.0..1.0)).collect())
    };
    let data = BatchData {
        videos: vec![mk(&mut rng, 4), mk(&mut rng, 3)],
        texts: vec![mk(&mut rng, 2), mk(&mut rng, 3)],
        eps_video: vec![
            upret_core::dist_head::draw_eps(&mut rng, 2, 4, 4),
            upret_core::dist_head::draw_eps(&mut rng, 2, 3, 4),
        ],
        eps_text: vec![
            upret_core::dist_head::draw_eps(&mut rng, 2, 2, 4),
            upret_core::dist_head::draw_eps(&mut rng, 2, 3, 4),
        ],
    };
    let cfg = LossCfg {
        k: 2,
        eta: 0.1,
        sinkhorn_iters: 200,
        sinkhorn_tol: 1e-8,
        lambda_ot: 1.0,
        lambda_d: 1.0,
        tau: 0.07,
        sigma_floor: 1e-4,
    };
    let mut g0 = Graph::new();
    let n0 = params.bind(&mut g0, true);
    let l0 = build_batch_loss(&mut g0, &n0, &data, &cfg, None).map_err(|e| e.to_string())?;
    let frozen = l0.plans_used.clone();

    let point = params.video_head.mlp_mu.b1.clone();
    let err = upret_core::graph::grad_check(
        |g, x| {
            let nodes = params.bind(g, true);
            let mut vh = nodes.video_head.unwrap();
            vh.mlp_mu = upret_core::nn::MlpNodes { w1: vh.mlp_mu.w1, b1: x, w2: vh.mlp_mu.w2, b2: vh.mlp_mu.b2 };
            let nodes = upret_core::model::ModelNodes {
                video_head: Some(vh),
                text_head: nodes.text_head,
                omega_v: nodes.omega_v,
                omega_t: nodes.omega_t,
            };
            Ok(build_batch_loss_frozen(g, &nodes, &data, &cfg, &frozen)?.total)
        },
        &point,
        1e-5,
    )
    .map_err(|e| e.to_string())?;
    if err > 1e-4 {
        return Err(format!("composed loss grad rel err {err}"));
    }
    Ok(())
}

fn sampling_statistics(_ctx: &Ctx) -> Result<(), String> {
    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let tokens = Tensor::zeros(1, 1);
    let field = GaussianTokenField::new(Tensor::zeros(1, 1), Tensor::filled(1, 1, 1.0)).map_err(|e| e.to_string())?;
    let draws: Vec<f64> = (0..n).map(|_| sample_refine(&tokens, &field, 2, &mut rng).item()).collect();
    let mean: f64 = draws.iter().sum::<f64>() / n as f64;
    let var: f64 = draws.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n as f64 - 1.0);
    let true_var: f64 = 2.0 / 9.0;
    let se_mean = (true_var / n as f64).sqrt();
    let se_var = true_var * (2.0 / (n as f64 - 1.0)).sqrt();
    if mean.abs() > 3.0 * se_mean {
        return Err(format!("mean {mean} beyond 3 SE {se_mean}"));
    }
    if (var - true_var).abs() > 3.0 * se_var {
        return Err(format!("variance {var} vs 2/9 beyond 3 SE {se_var}"));
    }

    // Zero-sigma path is exactly deterministic: (x + K*mu) / (K+1).
    let mut g = Graph::new();
    let t = g.constant(Tensor::scalar(0.9));
    let mu = g.constant(Tensor::scalar(0.3));
    let sigma = g.constant(Tensor::zeros(1, 1));
    let eps = upret_core::dist_head::draw_eps(&mut rng, 2, 1, 1);
    let refined = upret_core::dist_head::sample_refine_node(&mut g, t, mu, sigma, &eps).map_err(|e| e.to_string())?;
    let expect = (0.9 + 2.0 * 0.3) / 3.0;
    if (g.value(refined).item() - expect).abs() > 1e-15 {
        return Err(format!("zero-sigma path {} vs {expect}", g.value(refined).item()));
    }
    Ok(())
}

fn metric_oracle(_ctx: &Ctx) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    for round in 0..10 {
        let n = 50;
        let s = Tensor::from_vec(n, n, (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect());
        for dir in [Direction::T2v, Direction::V2t] {
            let got = rank_matrix(&s, dir).map_err(|e| e.to_string())?;
            // Independent re-ranking by sorted scan.
            for q in 0..n {
                let truth = s.get(q, q);
                let mut scores: Vec<f64> = (0..n)
                    .map(|c| if dir == Direction::T2v { s.get(q, c) } else { s.get(c, q) })
                    .collect();
                scores.sort_by(|a, b| b.partial_cmp(a).unwrap());
                let expect = scores.iter().position(|&v| v <= truth).unwrap() + 1;
                if got.ranks()[q] != expect {
                    return Err(format!("round {round} {dir:?} query {q}: {} vs {expect}", got.ranks()[q]));
                }
            }
            let rep = metrics(&got, dir).map_err(|e| e.to_string())?;
            if !(rep.r1 <= rep.r5 && rep.r5 <= rep.r10) {
                return Err(format!("round {round}: recalls not monotone"));
            }
        }
    }
    Ok(())
}

fn loss_closed_forms(_ctx: &Ctx) -> Result<(), String> {
    let single = contrastive_loss(&Tensor::scalar(0.4), 1.0).map_err(|e| e.to_string())?;
    if single != 0.0 {
        return Err(format!("B=1 loss {single} != 0"));
    }
    let s = Tensor::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
    let loss = contrastive_loss(&s, 1.0).map_err(|e| e.to_string())?;
    if (loss - 0.31326).abs() > 1e-4 {
        return Err(format!("B=2 identity loss {loss} vs 0.31326"));
    }
    Ok(())
}

fn format_round_trip(_ctx: &Ctx) -> Result<(), String> {
    let dir = std::env::temp_dir().join(format!("upret_selftest_{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    let run = || -> Result<(), String> {
        for (tag, pairs) in [("a", 12), ("b", 0)] {
            let spec = CorpusSpec { pairs, dim: 16, video_len: (2, 6), text_len: (1, 4), ..CorpusSpec::default() };
            let corpus = generate_corpus(&spec).map_err(|e| e.to_string())?;
            let sub = dir.join(tag);
            let manifest = write_corpus(&sub, &corpus).map_err(|e| e.to_string())?;
            let loaded = load_corpus(&manifest).map_err(|e| e.to_string())?;
            if loaded != corpus_without_concepts(&corpus) {
                return Err(format!("corpus {tag}: round trip not bitwise identical"));
            }
        }
        Ok(())
    };
    let result = run();
    let _ = std::fs::remove_dir_all(&dir);
    result
}

fn corpus_without_concepts(corpus: &upret_core::synth::Corpus) -> upret_core::synth::Corpus {
    let strip = |v: &[upret_core::synth::PairedSample]| {
        v.iter().map(|s| upret_core::synth::PairedSample { concepts: None, ..s.clone() }).collect()
    };
    upret_core::synth::Corpus {
        dim: corpus.dim,
        train: strip(&corpus.train),
        val: strip(&corpus.val),
        test: strip(&corpus.test),
    }
}

/// Run every check; Err carries the names of the failures.
pub fn run(inject_bad_eta: bool) -> Result<(), Vec<String>> {
    let ctx = Ctx { inject_bad_eta };
    let checks: Vec<Check> = vec![
        ("sinkhorn_feasibility", sinkhorn_feasibility),
        ("exact_ot_agreement", exact_ot_agreement),
        ("max_entropy_limit", max_entropy_limit),
        ("op_gradients", op_gradients),
        ("composed_loss_gradient", composed_loss_gradient),
        ("sampling_statistics", sampling_statistics),
        ("metric_oracle", metric_oracle),
        ("loss_closed_forms", loss_closed_forms),
        ("format_round_trip", format_round_trip),
    ];

    let mut failures = Vec::new();
    for (name, check) in checks {
        match check(&ctx) {
            Ok(()) => println!("PASS {name}"),
            Err(reason) => {
                println!("FAIL {name}: {reason}");
                failures.push(name.to_string());
            }
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(failures)
    }
}
