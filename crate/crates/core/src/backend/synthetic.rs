use std::collections::HashMap;

use nalgebra::DMatrix;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ModelBackend;
use crate::error::{Error, Result};
use crate::pprg::{embed_token, EmbeddingKey, EncodedRepresentation};
use crate::types::{DecisionDistribution, Instance, LabelSet, Payload};

/// Pair separator understood by the synthetic model. It is a lexicon entry
/// with an all-zero weight vector.
pub const SEPARATOR_TOKEN: &str = "[SEP]";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub label_count: usize,
    /// Filler tokens per bank (in-domain and out-of-domain).
    pub fillers_per_bank: usize,
    pub markers_per_label: usize,
    pub marker_weight: f64,
    /// Standard deviation of filler weights.
    pub filler_scale: f64,
    pub temperature: f64,
    pub embedding_dim: usize,
    pub ridge_lambda: f64,
    pub max_sequence_length: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            label_count: 2,
            fillers_per_bank: 40,
            markers_per_label: 6,
            marker_weight: 8.0,
            filler_scale: 1.0,
            temperature: 1.0,
            embedding_dim: 128,
            ridge_lambda: 1e-10,
            max_sequence_length: 128,
        }
    }
}

/// Which filler vocabulary a generated sentence draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillerBank {
    InDomain,
    OutOfDomain,
}

/// Shape of generated sentences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SentenceProfile {
    pub min_len: usize,
    pub max_len: usize,
    /// Probability a token is a marker of the sentence's label.
    pub marker_rate: f64,
    /// Probability a token is a marker of some other label.
    pub distractor_rate: f64,
    pub bank: FillerBank,
}

impl SentenceProfile {
    /// Evaluation instances: moderate signal, some distractors.
    pub fn evaluation() -> Self {
        Self {
            min_len: 10,
            max_len: 18,
            marker_rate: 0.4,
            distractor_rate: 0.05,
            bank: FillerBank::InDomain,
        }
    }

    /// Obfuscator candidates: label mix varies widely so only some pass the
    /// confidence filter.
    pub fn candidates(bank: FillerBank) -> Self {
        Self {
            min_len: 8,
            max_len: 12,
            marker_rate: 0.4,
            distractor_rate: 0.05,
            bank,
        }
    }
}

/// Bag-of-tokens classifier with a known lexicon.
///
/// The pre-softmax score of a text is the mean of its tokens' weight vectors,
/// so the score of a concatenation is the token-count-weighted average of the
/// parts' scores. Encoded inputs are scored through a linear read-out fitted
/// once from clean token embeddings to lexicon weights.
#[derive(Debug, Clone)]
pub struct SyntheticLexiconModel {
    config: SyntheticConfig,
    labels: LabelSet,
    lexicon: HashMap<String, Vec<f64>>,
    markers: Vec<Vec<String>>,
    fillers: [Vec<String>; 2],
    embedding_key: EmbeddingKey,
    /// `label_count x embedding_dim`
    readout: DMatrix<f64>,
    fingerprint: String,
}

impl SyntheticLexiconModel {
    pub fn new(config: SyntheticConfig) -> Result<Self> {
        if config.temperature.is_nan() || config.temperature <= 0.0 {
            return Err(Error::Parameter("temperature must be positive".into()));
        }
        if config.markers_per_label == 0 || config.embedding_dim == 0 || config.max_sequence_length == 0 {
            return Err(Error::Parameter(
                "markers_per_label, embedding_dim and max_sequence_length must be positive".into(),
            ));
        }
        let labels = LabelSet::numbered(config.label_count)?;
        let n = config.label_count;
        let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
        let filler_dist = Normal::new(0.0, config.filler_scale)
            .map_err(|e| Error::Parameter(format!("filler_scale: {e}")))?;

        let mut lexicon = HashMap::new();
        let mut markers = Vec::with_capacity(n);
        for label in 0..n {
            let mut bucket = Vec::with_capacity(config.markers_per_label);
            for i in 0..config.markers_per_label {
                let token = format!("m{label}x{i}");
                let mut w = vec![0.0; n];
                w[label] = config.marker_weight * rng.random_range(0.9..1.1);
                lexicon.insert(token.clone(), w);
                bucket.push(token);
            }
            markers.push(bucket);
        }
        let mut fillers = [Vec::new(), Vec::new()];
        for (bank, prefix) in fillers.iter_mut().zip(["w", "o"]) {
            for i in 0..config.fillers_per_bank {
                let token = format!("{prefix}{i}");
                let w: Vec<f64> = (0..n).map(|_| filler_dist.sample(&mut rng)).collect();
                lexicon.insert(token.clone(), w);
                bank.push(token);
            }
        }
        lexicon.insert(SEPARATOR_TOKEN.to_owned(), vec![0.0; n]);

        let fingerprint = {
            let json = serde_json::to_vec(&config).expect("config serializes");
            hex::encode(&Sha256::digest(&json)[..8])
        };
        let embedding_key = EmbeddingKey::from_seed(config.seed ^ 0x5eed_e3be_dd00_0001);
        let readout = fit_readout(&lexicon, n, config.embedding_dim, config.ridge_lambda, &embedding_key)?;

        Ok(Self {
            config,
            labels,
            lexicon,
            markers,
            fillers,
            embedding_key,
            readout,
            fingerprint,
        })
    }

    pub fn config(&self) -> &SyntheticConfig {
        &self.config
    }

    /// Key of the public token-embedding table clients encode against.
    pub fn embedding_key(&self) -> EmbeddingKey {
        self.embedding_key
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim
    }

    pub fn weight(&self, token: &str) -> Option<&[f64]> {
        self.lexicon.get(token).map(Vec::as_slice)
    }

    pub fn markers(&self, label: usize) -> &[String] {
        &self.markers[label]
    }

    pub fn fillers(&self, bank: FillerBank) -> &[String] {
        match bank {
            FillerBank::InDomain => &self.fillers[0],
            FillerBank::OutOfDomain => &self.fillers[1],
        }
    }

    fn truncated<'a>(&self, text: &'a str) -> impl Iterator<Item = &'a str> {
        text.split_whitespace().take(self.config.max_sequence_length)
    }

    /// Mean lexicon weight vector over the (truncated) tokens of `text`.
    /// Unknown tokens count towards the mean with a zero vector.
    pub fn mean_score(&self, text: &str) -> Result<Vec<f64>> {
        let n = self.labels.len();
        let mut sum = vec![0.0; n];
        let mut count = 0usize;
        for token in self.truncated(text) {
            if let Some(w) = self.lexicon.get(token) {
                sum.iter_mut().zip(w).for_each(|(s, x)| *s += x);
            }
            count += 1;
        }
        if count == 0 {
            return Err(Error::Input("empty token stream".into()));
        }
        Ok(sum.into_iter().map(|s| s / count as f64).collect())
    }

    pub fn classify_text(&self, text: &str) -> Result<DecisionDistribution> {
        let score = self.mean_score(text)?;
        self.finish(score)
    }

    pub fn classify_encoded(&self, rep: &EncodedRepresentation) -> Result<DecisionDistribution> {
        if rep.dim() != self.config.embedding_dim {
            return Err(Error::Dimension {
                expected: self.config.embedding_dim,
                actual: rep.dim(),
            });
        }
        let n = self.labels.len();
        let mut sum = vec![0.0; n];
        let tokens = &rep.vectors()[..rep.len().min(self.config.max_sequence_length)];
        for v in tokens {
            for (label, s) in sum.iter_mut().enumerate() {
                *s += self
                    .readout
                    .row(label)
                    .iter()
                    .zip(v)
                    .map(|(r, x)| r * x)
                    .sum::<f64>();
            }
        }
        let count = tokens.len() as f64;
        self.finish(sum.into_iter().map(|s| s / count).collect())
    }

    fn finish(&self, mean: Vec<f64>) -> Result<DecisionDistribution> {
        let scaled: Vec<f64> = mean.iter().map(|s| s / self.config.temperature).collect();
        DecisionDistribution::softmax(&scaled)
    }

    /// One sentence whose majority signal is `label`.
    pub fn sample_sentence<R: Rng + ?Sized>(&self, label: usize, profile: &SentenceProfile, rng: &mut R) -> String {
        let n = self.labels.len();
        let len = rng.random_range(profile.min_len..=profile.max_len.max(profile.min_len));
        let fillers = self.fillers(profile.bank);
        let mut tokens = Vec::with_capacity(len);
        for _ in 0..len {
            let u: f64 = rng.random();
            let token = if u < profile.marker_rate {
                self.markers[label].choose(rng)
            } else if u < profile.marker_rate + profile.distractor_rate {
                let other = (label + rng.random_range(1..n)) % n;
                self.markers[other].choose(rng)
            } else {
                fillers.choose(rng)
            };
            tokens.push(token.expect("non-empty vocabulary").as_str());
        }
        tokens.join(" ")
    }

    /// Labelled evaluation set with labels drawn uniformly.
    pub fn generate_instances<R: Rng + ?Sized>(
        &self,
        prefix: &str,
        count: usize,
        profile: &SentenceProfile,
        rng: &mut R,
    ) -> Vec<Instance> {
        (0..count)
            .map(|i| {
                let label = rng.random_range(0..self.labels.len());
                let text = self.sample_sentence(label, profile, rng);
                Instance::new(format!("{prefix}{i}"), text, Some(label)).expect("generated text is non-empty")
            })
            .collect()
    }
}

impl ModelBackend for SyntheticLexiconModel {
    fn label_set(&self) -> &LabelSet {
        &self.labels
    }

    fn max_sequence_length(&self) -> usize {
        self.config.max_sequence_length
    }

    fn separator(&self) -> &str {
        SEPARATOR_TOKEN
    }

    fn fingerprint(&self) -> String {
        format!("synthetic-{}", self.fingerprint)
    }

    fn classify(&self, payload: &Payload) -> Result<DecisionDistribution> {
        match payload {
            Payload::Text(t) => self.classify_text(t),
            Payload::Encoded(r) => self.classify_encoded(r),
        }
    }
}

/// Ridge read-out `R = W^T (E E^T + lambda I)^-1 E` mapping a clean token
/// embedding to its lexicon weight vector. Exact on the vocabulary when the
/// embedding dimension is at least the vocabulary size and lambda is tiny.
fn fit_readout(
    lexicon: &HashMap<String, Vec<f64>>,
    label_count: usize,
    dim: usize,
    lambda: f64,
    key: &EmbeddingKey,
) -> Result<DMatrix<f64>> {
    let mut tokens: Vec<&String> = lexicon.keys().collect();
    tokens.sort();
    let v = tokens.len();
    let embed = DMatrix::from_fn(v, dim, |_, _| 0.0);
    let mut embed = embed;
    for (i, t) in tokens.iter().enumerate() {
        for (j, x) in embed_token(t, dim, key).into_iter().enumerate() {
            embed[(i, j)] = x;
        }
    }
    let weights = DMatrix::from_fn(v, label_count, |i, j| lexicon[tokens[i]][j]);
    let gram = &embed * embed.transpose() + DMatrix::identity(v, v) * lambda;
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::Parameter("read-out gram matrix is singular; raise ridge_lambda".into()))?;
    let dual = chol.solve(&weights);
    Ok(dual.transpose() * embed)
}
