//! Synthetic fuzzy-speech corpus: every token gets a unit-norm emission mean,
//! confusable pairs have their means pulled toward each other, and frames
//! are Gaussian draws around the active token's mean.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Pad marker used in batched targets; never a valid token id.
pub const PAD_TOKEN: usize = usize::MAX;

/// Real tokens start here; 0 is the CTC blank, 1 the attention sentinel.
pub const FIRST_TOKEN_ID: usize = 2;

/// One utterance: a T x d feature matrix and its target token string.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub features: Tensor,
    /// Token ids, each >= FIRST_TOKEN_ID.
    pub tokens: Vec<usize>,
    pub utterance_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub items: Vec<FeatureSequence>,
}

/// Generator configuration. Token indices in `confusable_pairs` are 0-based
/// over the real tokens (so pair member `i` is vocabulary id `i + 2`), and
/// `overlap` is the kappa separation knob: 0 collapses the pair onto one
/// emission distribution, 1 leaves the pair fully separated.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub n_tokens: usize,
    pub feature_dim: usize,
    pub frames_per_token: (usize, usize),
    pub confusable_pairs: Vec<(usize, usize, f64)>,
    pub noise_sigma: f64,
    pub utterance_len: (usize, usize),
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_tokens < 2 {
            return Err(Error::InvalidParameter("n_tokens must be >= 2".into()));
        }
        if self.feature_dim == 0 {
            return Err(Error::InvalidParameter("feature_dim must be >= 1".into()));
        }
        let (fmin, fmax) = self.frames_per_token;
        if fmin == 0 || fmin > fmax {
            return Err(Error::InvalidParameter(format!(
                "frames_per_token range ({fmin}, {fmax}) invalid"
            )));
        }
        let (lmin, lmax) = self.utterance_len;
        if lmin == 0 || lmin > lmax {
            return Err(Error::InvalidParameter(format!(
                "utterance_len range ({lmin}, {lmax}) invalid"
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::InvalidParameter("noise_sigma must be >= 0".into()));
        }
        let mut seen: Vec<(usize, usize)> = Vec::new();
        for &(a, b, kappa) in &self.confusable_pairs {
            if a == b {
                return Err(Error::InvalidParameter(format!(
                    "confusable pair ({a}, {b}) members must differ"
                )));
            }
            if a >= self.n_tokens || b >= self.n_tokens {
                return Err(Error::InvalidParameter(format!(
                    "confusable pair ({a}, {b}) outside 0..{}",
                    self.n_tokens
                )));
            }
            if !(0.0..=1.0).contains(&kappa) {
                return Err(Error::InvalidParameter(format!(
                    "overlap {kappa} outside [0, 1]"
                )));
            }
            let key = (a.min(b), a.max(b));
            if seen.contains(&key) {
                return Err(Error::InvalidParameter(format!(
                    "duplicate confusable pair ({a}, {b})"
                )));
            }
            seen.push(key);
        }
        Ok(())
    }

    /// Vocabulary size implied by this corpus: blank + sentinel + tokens.
    pub fn vocab_size(&self) -> usize {
        self.n_tokens + FIRST_TOKEN_ID
    }
}

/// Unit-norm emission means, one per token, mutually separated: columns of
/// an orthonormal basis (Gram-Schmidt over a seeded Gaussian matrix),
/// truncated to the feature dimension and renormalized, then confusable
/// pairs interpolated toward their midpoint by (1 - kappa).
pub fn emission_means(cfg: &SynthConfig, rng: &mut Rng) -> Vec<Vec<f64>> {
    let k = cfg.n_tokens.max(cfg.feature_dim);
    // Orthonormal columns via modified Gram-Schmidt on Gaussian draws.
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cfg.n_tokens);
    while basis.len() < cfg.n_tokens {
        let mut v: Vec<f64> = (0..k).map(|_| rng.normal()).collect();
        for u in &basis {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (vi, ui) in v.iter_mut().zip(u) {
                *vi -= dot * ui;
            }
        }
        let norm = libm::sqrt(v.iter().map(|x| x * x).sum());
        if norm < 1e-9 {
            continue;
        }
        for x in v.iter_mut() {
            *x /= norm;
        }
        basis.push(v);
    }
    let mut means: Vec<Vec<f64>> = basis
        .into_iter()
        .map(|col| {
            let mut m: Vec<f64> = col[..cfg.feature_dim].to_vec();
            let norm = libm::sqrt(m.iter().map(|x| x * x).sum());
            for x in m.iter_mut() {
                *x /= norm;
            }
            m
        })
        .collect();
    for &(a, b, kappa) in &cfg.confusable_pairs {
        let mid: Vec<f64> = means[a]
            .iter()
            .zip(&means[b])
            .map(|(x, y)| 0.5 * (x + y))
            .collect();
        for idx in [a, b] {
            let moved: Vec<f64> = means[idx]
                .iter()
                .zip(&mid)
                .map(|(x, m)| m + kappa * (x - m))
                .collect();
            let norm = libm::sqrt(moved.iter().map(|x| x * x).sum::<f64>()).max(1e-12);
            means[idx] = moved.into_iter().map(|x| x / norm).collect();
        }
    }
    means
}

/// Token bigram structure: each token may be followed only by a seeded
/// subset of the alphabet. Shared across splits, this is the context a
/// recognizer can lean on when the acoustics of a confusable token are
/// ambiguous, mirroring how surrounding words disambiguate fuzzy speech.
pub fn successor_sets(cfg: &SynthConfig, rng: &mut Rng) -> Vec<Vec<usize>> {
    let fanout = (cfg.n_tokens / 3).max(2).min(cfg.n_tokens);
    (0..cfg.n_tokens)
        .map(|_| {
            let mut pool: Vec<usize> = (0..cfg.n_tokens).collect();
            rng.shuffle(&mut pool);
            let mut set = pool[..fanout].to_vec();
            set.sort_unstable();
            set
        })
        .collect()
}

fn generate_split(
    cfg: &SynthConfig,
    means: &[Vec<f64>],
    successors: &[Vec<usize>],
    split: &str,
    count: usize,
    tag: u64,
) -> Dataset {
    let mut rng = Rng::fork(cfg.seed, tag, 0);
    let d = cfg.feature_dim;
    let mut items = Vec::with_capacity(count);
    for idx in 0..count {
        let len = cfg.utterance_len.0
            + rng.below((cfg.utterance_len.1 - cfg.utterance_len.0 + 1) as u64) as usize;
        let mut token_indices: Vec<usize> = Vec::with_capacity(len);
        for i in 0..len {
            let tok = if i == 0 {
                rng.below(cfg.n_tokens as u64) as usize
            } else {
                let allowed = &successors[token_indices[i - 1]];
                allowed[rng.below(allowed.len() as u64) as usize]
            };
            token_indices.push(tok);
        }
        let mut frames: Vec<f64> = Vec::new();
        let mut t = 0usize;
        for &tok in &token_indices {
            let n_frames = cfg.frames_per_token.0
                + rng.below((cfg.frames_per_token.1 - cfg.frames_per_token.0 + 1) as u64) as usize;
            for _ in 0..n_frames {
                for c in 0..d {
                    frames.push(means[tok][c] + cfg.noise_sigma * rng.normal());
                }
                t += 1;
            }
        }
        // CTC needs T >= 2L + 1 even for adjacent repeats; top up with extra
        // frames of the final token if the draw came up short.
        let need = 2 * len + 1;
        while t < need {
            let tok = *token_indices.last().expect("len >= 1");
            for c in 0..d {
                frames.push(means[tok][c] + cfg.noise_sigma * rng.normal());
            }
            t += 1;
        }
        let mut features = Tensor::new(vec![t, d], frames).expect("consistent frame buffer");
        // Features live on the f32 grid so dataset files round-trip exactly.
        features.quantize_f32();
        items.push(FeatureSequence {
            features,
            tokens: token_indices.iter().map(|&i| i + FIRST_TOKEN_ID).collect(),
            utterance_id: format!("{split}-{idx:06}"),
        });
    }
    Dataset { items }
}

pub struct GeneratedCorpus {
    pub train: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
    pub means: Vec<Vec<f64>>,
    pub successors: Vec<Vec<usize>>,
}

/// Deterministic corpus generation; splits share the emission means and the
/// token bigram structure but draw from independent rng streams and disjoint
/// utterance-id namespaces.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<GeneratedCorpus> {
    cfg.validate()?;
    let mut mean_rng = Rng::fork(cfg.seed, 0x6d65_616e, 0);
    let means = emission_means(cfg, &mut mean_rng);
    let mut succ_rng = Rng::fork(cfg.seed, 0x7375_6363, 0);
    let successors = successor_sets(cfg, &mut succ_rng);
    Ok(GeneratedCorpus {
        train: generate_split(cfg, &means, &successors, "train", cfg.n_train, 0x7472_6169),
        dev: generate_split(cfg, &means, &successors, "dev", cfg.n_dev, 0x6465_7620),
        test: generate_split(cfg, &means, &successors, "test", cfg.n_test, 0x7465_7374),
        means,
        successors,
    })
}

/// One padded batch with validity masks.
#[derive(Debug, Clone)]
pub struct Batch {
    /// B x T_max x d, zero padded.
    pub features: Tensor,
    /// B x T_max frame validity.
    pub feature_mask: Vec<Vec<bool>>,
    /// B x L_max target ids padded with PAD_TOKEN.
    pub targets: Vec<Vec<usize>>,
    /// B x L_max target validity.
    pub target_mask: Vec<Vec<bool>>,
    pub utterance_ids: Vec<String>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.utterance_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterance_ids.is_empty()
    }

    /// Reconstructs the unpadded utterance at batch position `i`.
    pub fn utterance(&self, i: usize) -> FeatureSequence {
        let (rows, cols) = {
            let shape = self.features.shape();
            (shape[1], shape[2])
        };
        let valid_frames = self.feature_mask[i].iter().filter(|&&m| m).count();
        let mut data = Vec::with_capacity(valid_frames * cols);
        for t in 0..rows {
            if self.feature_mask[i][t] {
                let base = (i * rows + t) * cols;
                data.extend_from_slice(&self.features.data()[base..base + cols]);
            }
        }
        let tokens: Vec<usize> = self.targets[i]
            .iter()
            .zip(&self.target_mask[i])
            .filter(|(_, &m)| m)
            .map(|(&t, _)| t)
            .collect();
        FeatureSequence {
            features: Tensor::new(vec![valid_frames, cols], data).expect("mask-consistent"),
            tokens,
            utterance_id: self.utterance_ids[i].clone(),
        }
    }
}

/// Deterministic epoch iterator: shuffles utterance order by
/// (shuffle_seed, epoch), then packs consecutive runs of `batch_size` into
/// zero-padded batches with masks. Every utterance appears exactly once.
pub fn batch_iter(
    set: &Dataset,
    batch_size: usize,
    shuffle_seed: u64,
    epoch: u64,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::InvalidParameter("batch_size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..set.items.len()).collect();
    let mut rng = Rng::fork(shuffle_seed, crate::siamese::TAG_SHUFFLE, epoch);
    rng.shuffle(&mut order);
    let mut batches = Vec::new();
    for chunk in order.chunks(batch_size) {
        let d = set.items[chunk[0]].features.rows_cols().1;
        let t_max = chunk
            .iter()
            .map(|&i| set.items[i].features.rows_cols().0)
            .max()
            .unwrap_or(0);
        let l_max = chunk.iter().map(|&i| set.items[i].tokens.len()).max().unwrap_or(0);
        let b = chunk.len();
        let mut features = Tensor::zeros(vec![b, t_max, d]);
        let mut feature_mask = vec![vec![false; t_max]; b];
        let mut targets = vec![vec![PAD_TOKEN; l_max]; b];
        let mut target_mask = vec![vec![false; l_max]; b];
        let mut ids = Vec::with_capacity(b);
        for (bi, &idx) in chunk.iter().enumerate() {
            let item = &set.items[idx];
            let (t, dim) = item.features.rows_cols();
            debug_assert_eq!(dim, d);
            for r in 0..t {
                let dst = (bi * t_max + r) * d;
                features.data_mut()[dst..dst + d]
                    .copy_from_slice(&item.features.data()[r * d..(r + 1) * d]);
                feature_mask[bi][r] = true;
            }
            for (li, &tok) in item.tokens.iter().enumerate() {
                targets[bi][li] = tok;
                target_mask[bi][li] = true;
            }
            ids.push(item.utterance_id.clone());
        }
        batches.push(Batch {
            features,
            feature_mask,
            targets,
            target_mask,
            utterance_ids: ids,
        });
    }
    Ok(batches)
}
