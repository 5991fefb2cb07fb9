//! Synthetic paired-feature generator.
//!
//! Stands in for real encoders: each pair is built from a shared latent
//! concept sequence. Text tokens use one surface embedding per concept;
//! video tokens use one surface embedding per *group* of `rho` concepts,
//! so distinct meanings can look identical on the video side (visual
//! polysemy) while staying distinct in text. Gaussian noise is added on
//! top. Generation is a pure function of its `CorpusSpec` (seed included), and
//! all values are materialized in f32 so feature files round-trip bitwise.

use crate::error::{Error, Result};
use crate::tensor::TensorBase;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Hard caps on sequence lengths.
pub const MAX_VIDEO_LEN: usize = 64;
pub const MAX_TEXT_LEN: usize = 32;

/// Parameters of a synthetic corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub pairs: usize,
    /// Concept vocabulary size.
    pub vocab: usize,
    pub video_len: (usize, usize),
    pub text_len: (usize, usize),
    /// Feature dimension D.
    pub dim: usize,
    /// Polysemy factor: how many distinct concepts share one video surface.
    pub rho: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            pairs: 2000,
            vocab: 50,
            video_len: (6, 10),
            text_len: (3, 6),
            dim: 32,
            rho: 3,
            noise: 0.3,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::InvalidArg { op: "corpus_spec", msg });
        if self.vocab == 0 {
            return err("vocab must be >= 1".into());
        }
        if self.rho == 0 {
            return err("rho must be >= 1".into());
        }
        if self.vocab < self.rho {
            return err(format!("vocab {} smaller than rho {}", self.vocab, self.rho));
        }
        if self.dim == 0 {
            return err("dim must be >= 1".into());
        }
        if self.video_len.0 == 0 || self.video_len.0 > self.video_len.1 || self.video_len.1 > MAX_VIDEO_LEN {
            return err(format!("video length range {:?} invalid (cap {MAX_VIDEO_LEN})", self.video_len));
        }
        if self.text_len.0 == 0 || self.text_len.0 > self.text_len.1 || self.text_len.1 > MAX_TEXT_LEN {
            return err(format!("text length range {:?} invalid (cap {MAX_TEXT_LEN})", self.text_len));
        }
        if !(self.noise >= 0.0) {
            return err(format!("noise {} must be >= 0", self.noise));
        }
        Ok(())
    }
}

/// One video/text pair of token matrices, with the hidden concept labels
/// kept for diagnostics. Feature files carry only tensors and pair ids;
/// loaded samples have no concept labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub pair_id: u64,
    pub video: TensorBase<f32>,
    pub text: TensorBase<f32>,
    pub concepts: Option<Vec<u32>>,
}

/// A generated (or loaded) corpus with disjoint splits.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub dim: usize,
    pub train: Vec<PairedSample>,
    pub val: Vec<PairedSample>,
    pub test: Vec<PairedSample>,
}

impl Corpus {
    pub fn split(&self, name: &str) -> Result<&[PairedSample]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::InvalidArg { op: "corpus", msg: format!("unknown split `{other}`") }),
        }
    }

    pub fn total_pairs(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }
}

/// Video surface group of a concept: concepts are grouped `rho` at a time,
/// and every member renders as the first member's embedding.
fn group_representative(concept: usize, rho: usize) -> usize {
    (concept / rho) * rho
}

/// Generate a corpus split 80/10/10 (val and test get pairs/10 each,
/// rounded down; the remainder trains).
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // Concept embeddings: unit Gaussian rows, L2-normalized, frozen in f32.
    let mut concept_embed: Vec<Vec<f32>> = Vec::with_capacity(spec.vocab);
    for _ in 0..spec.vocab {
        let row: Vec<f64> = (0..spec.dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        concept_embed.push(row.iter().map(|v| (v / norm) as f32).collect());
    }

    // Noise is relative corruption: a noise scale of 0.3 perturbs a
    // unit-norm token by a vector of expected norm ~0.3.
    let noise_std = spec.noise / (spec.dim as f64).sqrt();

    let mut samples = Vec::with_capacity(spec.pairs);
    for pair_id in 0..spec.pairs {
        let n_t = rng.gen_range(spec.text_len.0..=spec.text_len.1);
        let n_v = rng.gen_range(spec.video_len.0..=spec.video_len.1);
        let concepts: Vec<u32> = (0..n_t).map(|_| rng.gen_range(0..spec.vocab) as u32).collect();

        let mut text = TensorBase::<f32>::zeros(n_t, spec.dim);
        for (k, &c) in concepts.iter().enumerate() {
            for d in 0..spec.dim {
                let noise: f64 = rng.sample(StandardNormal);
                let v = concept_embed[c as usize][d] as f64 + noise_std * noise;
                text.set(k, d, v as f32);
            }
        }

        let mut video = TensorBase::<f32>::zeros(n_v, spec.dim);
        for f in 0..n_v {
            // Stretch the concept sequence over the frames.
            let k = f * n_t / n_v;
            let surface = group_representative(concepts[k] as usize, spec.rho);
            for d in 0..spec.dim {
                let noise: f64 = rng.sample(StandardNormal);
                let v = concept_embed[surface][d] as f64 + noise_std * noise;
                video.set(f, d, v as f32);
            }
        }

        samples.push(PairedSample { pair_id: pair_id as u64, video, text, concepts: Some(concepts) });
    }

    let held = spec.pairs / 10;
    let test = samples.split_off(samples.len() - held.min(samples.len()));
    let val = samples.split_off(samples.len() - held.min(samples.len()));
    Ok(Corpus { dim: spec.dim, train: samples, val, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pooled_mean(t: &TensorBase<f32>) -> Vec<f64> {
        let mut out = vec![0.0; t.cols()];
        for r in 0..t.rows() {
            for c in 0..t.cols() {
                out[c] += t.get(r, c) as f64;
            }
        }
        for v in &mut out {
            *v /= t.rows() as f64;
        }
        out
    }

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    /// T2V R@1 of a pooled-mean cosine retriever over a sample set.
    fn pooled_r1(samples: &[PairedSample]) -> f64 {
        let vids: Vec<Vec<f64>> = samples.iter().map(|s| pooled_mean(&s.video)).collect();
        let txts: Vec<Vec<f64>> = samples.iter().map(|s| pooled_mean(&s.text)).collect();
        let mut hits = 0;
        for (i, t) in txts.iter().enumerate() {
            let own = cosine(t, &vids[i]);
            if vids.iter().enumerate().all(|(j, v)| j == i || cosine(t, v) <= own) {
                hits += 1;
            }
        }
        100.0 * hits as f64 / samples.len() as f64
    }

    #[test]
    fn noiseless_unambiguous_corpus_is_separable() {
        let spec = CorpusSpec {
            pairs: 60,
            vocab: 50,
            rho: 1,
            noise: 0.0,
            dim: 32,
            video_len: (6, 10),
            text_len: (4, 6),
            seed: 7,
        };
        let corpus = generate_corpus(&spec).unwrap();
        let all: Vec<PairedSample> = corpus
            .train
            .iter()
            .chain(&corpus.val)
            .chain(&corpus.test)
            .cloned()
            .collect();
        assert_eq!(pooled_r1(&all), 100.0);
    }

    #[test]
    fn polysemous_noisy_corpus_defeats_pooled_retriever() {
        let spec = CorpusSpec { pairs: 300, ..CorpusSpec::default() };
        let corpus = generate_corpus(&spec).unwrap();
        let r1 = pooled_r1(&corpus.test);
        assert!(r1 < 100.0, "pooled retriever unexpectedly perfect: {r1}");
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let spec = CorpusSpec { pairs: 20, ..CorpusSpec::default() };
        let a = generate_corpus(&spec).unwrap();
        let b = generate_corpus(&spec).unwrap();
        assert_eq!(a, b);

        let c = generate_corpus(&CorpusSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn vocab_smaller_than_rho_rejected() {
        let spec = CorpusSpec { vocab: 2, rho: 3, ..CorpusSpec::default() };
        assert!(generate_corpus(&spec).is_err());
    }

    #[test]
    fn splits_are_disjoint_and_sized() {
        let spec = CorpusSpec { pairs: 100, ..CorpusSpec::default() };
        let corpus = generate_corpus(&spec).unwrap();
        assert_eq!(corpus.train.len(), 80);
        assert_eq!(corpus.val.len(), 10);
        assert_eq!(corpus.test.len(), 10);
        let mut ids: Vec<u64> = corpus
            .train
            .iter()
            .chain(&corpus.val)
            .chain(&corpus.test)
            .map(|s| s.pair_id)
            .collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 100);
    }

    #[test]
    fn lengths_respect_spec_ranges() {
        let spec = CorpusSpec { pairs: 50, video_len: (2, 5), text_len: (1, 3), ..CorpusSpec::default() };
        let corpus = generate_corpus(&spec).unwrap();
        for s in corpus.train.iter().chain(&corpus.val).chain(&corpus.test) {
            assert!((2..=5).contains(&s.video.rows()));
            assert!((1..=3).contains(&s.text.rows()));
            assert!(s.video.all_finite() && s.text.all_finite());
        }
    }

    #[test]
    fn empty_corpus_is_valid() {
        let spec = CorpusSpec { pairs: 0, ..CorpusSpec::default() };
        let corpus = generate_corpus(&spec).unwrap();
        assert_eq!(corpus.total_pairs(), 0);
    }

    #[test]
    fn length_caps_enforced() {
        let spec = CorpusSpec { video_len: (1, 65), ..CorpusSpec::default() };
        assert!(generate_corpus(&spec).is_err());
        let spec = CorpusSpec { text_len: (1, 33), ..CorpusSpec::default() };
        assert!(generate_corpus(&spec).is_err());
    }
}
