//! Privacy-preserving representation generation.
//!
//! Text is turned into a sequence of token vectors before it leaves the
//! client. The default encoder embeds each whitespace token and adds isotropic
//! noise `r * p`, with `p` uniform on the unit sphere and `r ~ Gamma(d, 1/eta)`,
//! so two encodings of the same text never coincide.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// One `d`-dimensional vector per token. Serializes as a JSON array of rows.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedRepresentation {
    vectors: Vec<Vec<f64>>,
}

impl EncodedRepresentation {
    pub fn new(vectors: Vec<Vec<f64>>) -> Result<Self> {
        let Some(first) = vectors.first() else {
            return Err(Error::Input("encoded representation has no tokens".into()));
        };
        let dim = first.len();
        if dim == 0 {
            return Err(Error::Input("encoded representation has zero dimension".into()));
        }
        for v in &vectors {
            if v.len() != dim {
                return Err(Error::Dimension {
                    expected: dim,
                    actual: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric("encoded representation"));
            }
        }
        Ok(Self { vectors })
    }

    pub fn dim(&self) -> usize {
        self.vectors[0].len()
    }

    /// Token count.
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    /// Mean of the token vectors.
    pub fn mean_vector(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.dim()];
        for v in &self.vectors {
            for (m, x) in mean.iter_mut().zip(v) {
                *m += x;
            }
        }
        let n = self.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }
}

impl Serialize for EncodedRepresentation {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.vectors.serialize(s)
    }
}

impl<'de> Deserialize<'de> for EncodedRepresentation {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let vectors = Vec::<Vec<f64>>::deserialize(d)?;
        Self::new(vectors).map_err(serde::de::Error::custom)
    }
}

/// Key for the token-embedding hash. Different keys give unrelated embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingKey(pub [u8; 32]);

impl EmbeddingKey {
    pub fn from_seed(seed: u64) -> Self {
        Self(Sha256::digest(seed.to_le_bytes()).into())
    }
}

/// Unit-norm base vector of a single token under `key`.
pub fn embed_token(token: &str, dim: usize, key: &EmbeddingKey) -> Vec<f64> {
    let seed: [u8; 32] = Sha256::new()
        .chain_update(key.0)
        .chain_update([0u8])
        .chain_update(token.as_bytes())
        .finalize()
        .into();
    let mut rng = ChaCha20Rng::from_seed(seed);
    unit_gaussian_direction(&mut rng, dim)
}

pub fn embed_tokens(text: &str, dim: usize, key: &EmbeddingKey) -> Result<EncodedRepresentation> {
    if dim == 0 {
        return Err(Error::Parameter("embedding dimension must be at least 1".into()));
    }
    let vectors: Vec<Vec<f64>> = text
        .split_whitespace()
        .map(|t| embed_token(t, dim, key))
        .collect();
    if vectors.is_empty() {
        return Err(Error::Input("cannot embed empty text".into()));
    }
    EncodedRepresentation::new(vectors)
}

/// Uniform direction on the unit sphere in `dim` dimensions, by normalizing a
/// standard Gaussian draw.
pub fn unit_gaussian_direction<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-300 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationParams {
    /// Noise-scale parameter; larger means less noise.
    pub eta: f64,
    /// Gamma shape override. Defaults to the embedding dimension.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_shape: Option<f64>,
}

impl PerturbationParams {
    pub fn new(eta: f64) -> Result<Self> {
        let p = Self { eta, gamma_shape: None };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(Error::Parameter(format!("eta must be positive, got {}", self.eta)));
        }
        if let Some(s) = self.gamma_shape {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::Parameter(format!("gamma shape must be positive, got {s}")));
            }
        }
        Ok(())
    }

    pub fn radius_distribution(&self, dim: usize) -> Result<Gamma<f64>> {
        self.validate()?;
        let shape = self.gamma_shape.unwrap_or(dim as f64);
        Gamma::new(shape, 1.0 / self.eta).map_err(|e| Error::Parameter(e.to_string()))
    }
}

/// Adds fresh `r * p` noise to every token vector.
pub fn perturb<R: Rng + ?Sized>(
    rep: &EncodedRepresentation,
    params: &PerturbationParams,
    rng: &mut R,
) -> Result<EncodedRepresentation> {
    let dim = rep.dim();
    let radius = params.radius_distribution(dim)?;
    let vectors = rep
        .vectors()
        .iter()
        .map(|v| {
            let r = radius.sample(rng);
            let p = unit_gaussian_direction(rng, dim);
            v.iter().zip(p).map(|(x, pi)| x + r * pi).collect()
        })
        .collect();
    EncodedRepresentation::new(vectors)
}

/// A representation generator. Implementations must never return the same
/// encoding twice for randomized modes; the caller hands each call its own
/// randomness stream.
pub trait Pprg: Send + Sync {
    fn encode(&self, text: &str, rng: &mut dyn RngCore) -> Result<EncodedRepresentation>;

    fn dim(&self) -> usize;
}

/// Token embedding followed by Gamma-radius hypersphere noise.
#[derive(Debug, Clone)]
pub struct NoisyEmbedding {
    pub key: EmbeddingKey,
    pub dim: usize,
    pub params: PerturbationParams,
}

impl Pprg for NoisyEmbedding {
    fn encode(&self, text: &str, rng: &mut dyn RngCore) -> Result<EncodedRepresentation> {
        let base = embed_tokens(text, self.dim, &self.key)?;
        perturb(&base, &self.params, rng)
    }

    fn dim(&self) -> usize {
        self.dim
    }
}

/// Pass-through embedding with no perturbation, for ablations.
#[derive(Debug, Clone)]
pub struct IdentityEmbedding {
    pub key: EmbeddingKey,
    pub dim: usize,
}

impl Pprg for IdentityEmbedding {
    fn encode(&self, text: &str, _rng: &mut dyn RngCore) -> Result<EncodedRepresentation> {
        embed_tokens(text, self.dim, &self.key)
    }

    fn dim(&self) -> usize {
        self.dim
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn l2(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    }

    fn key(seed: u64) -> EmbeddingKey {
        EmbeddingKey::from_seed(seed)
    }

    #[test]
    fn embedding_is_deterministic_per_token() {
        let rep = embed_tokens("a b a", 32, &key(1)).unwrap();
        assert_eq!(rep.len(), 3);
        assert_eq!(rep.vectors()[0], rep.vectors()[2]);
        assert_ne!(rep.vectors()[0], rep.vectors()[1]);
    }

    #[test]
    fn embeddings_are_unit_norm() {
        let rep = embed_tokens("the quick brown fox jumps", 64, &key(3)).unwrap();
        for v in rep.vectors() {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn different_keys_give_unrelated_directions() {
        let (k1, k2) = (key(10), key(11));
        let mut total = 0.0;
        for i in 0..100 {
            let t = format!("tok{i}");
            let c = cosine(&embed_token(&t, 64, &k1), &embed_token(&t, 64, &k2));
            assert!(c.abs() < 0.5);
            total += c.abs();
        }
        // E|cos| for independent directions in 64 dims is about 0.1.
        assert!(total / 100.0 < 0.3);
    }

    #[test]
    fn empty_text_rejected() {
        assert!(embed_tokens("   ", 8, &key(0)).is_err());
    }

    #[test]
    fn vanishing_noise_limit() {
        let base = embed_tokens("a b c d", 16, &key(2)).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let out = perturb(&base, &PerturbationParams::new(1e9).unwrap(), &mut rng).unwrap();
        for (a, b) in base.vectors().iter().zip(out.vectors()) {
            assert!(l2(a, b) < 1e-3);
        }
    }

    #[test]
    fn non_positive_eta_rejected() {
        assert!(PerturbationParams::new(0.0).is_err());
        assert!(PerturbationParams::new(-1.0).is_err());
        let bad = PerturbationParams { eta: 1.0, gamma_shape: Some(0.0) };
        let base = embed_tokens("a", 4, &key(0)).unwrap();
        assert!(perturb(&base, &bad, &mut ChaCha20Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn gamma_radius_mean_matches_d_over_eta() {
        // Monte-Carlo oracle: E[r] = shape * scale = 16 / 100, sd = sqrt(16) / 100.
        let params = PerturbationParams::new(100.0).unwrap();
        let dist = params.radius_distribution(16).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(99);
        let n = 100_000;
        let mean: f64 = (0..n).map(|_| dist.sample(&mut rng)).sum::<f64>() / n as f64;
        let sem = 0.04 / (n as f64).sqrt();
        assert!((mean - 0.16).abs() < 3.0 * sem, "mean {mean}");
    }

    #[test]
    fn perturbation_differs_for_each_call() {
        let base = embed_tokens("same text twice", 16, &key(4)).unwrap();
        let params = PerturbationParams::new(100.0).unwrap();
        let a = perturb(&base, &params, &mut ChaCha20Rng::seed_from_u64(1)).unwrap();
        let b = perturb(&base, &params, &mut ChaCha20Rng::seed_from_u64(2)).unwrap();
        for (va, vb) in a.vectors().iter().zip(b.vectors()) {
            assert_ne!(va, vb);
        }
    }

    #[test]
    fn encode_distinct_and_identity_passthrough() {
        let noisy = NoisyEmbedding {
            key: key(7),
            dim: 16,
            params: PerturbationParams::new(100.0).unwrap(),
        };
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let a = noisy.encode("hello world", &mut rng).unwrap();
        let b = noisy.encode("hello world", &mut rng).unwrap();
        assert_ne!(a, b);

        let ident = IdentityEmbedding { key: key(7), dim: 16 };
        let c = ident.encode("hello world", &mut rng).unwrap();
        assert_eq!(c, embed_tokens("hello world", 16, &key(7)).unwrap());
    }

    #[test]
    fn distinctness_over_many_trials() {
        let noisy = NoisyEmbedding {
            key: key(1),
            dim: 8,
            params: PerturbationParams::new(100.0).unwrap(),
        };
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..10_000 {
            let rep = noisy.encode("fixed", &mut rng).unwrap();
            let bits: Vec<u64> = rep.vectors()[0].iter().map(|x| x.to_bits()).collect();
            assert!(seen.insert(bits));
        }
    }

    #[test]
    fn noise_directions_are_isotropic() {
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let mut mean = vec![0.0; 16];
        let n = 10_000;
        for _ in 0..n {
            for (m, x) in mean.iter_mut().zip(unit_gaussian_direction(&mut rng, 16)) {
                *m += x / n as f64;
            }
        }
        let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm < 0.05, "mean norm {norm}");
    }

    #[test]
    fn displacement_scale_law() {
        // ||r p|| = r, so the mean displacement tracks E[r] = d / eta.
        let base = embed_tokens(&vec!["t"; 1000].join(" "), 16, &key(0)).unwrap();
        let params = PerturbationParams::new(50.0).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let mut total = 0.0;
        let mut count = 0usize;
        for _ in 0..100 {
            let out = perturb(&base, &params, &mut rng).unwrap();
            for (a, b) in base.vectors().iter().zip(out.vectors()) {
                total += l2(a, b);
                count += 1;
            }
        }
        let mean = total / count as f64;
        assert!((mean - 16.0 / 50.0).abs() / (16.0 / 50.0) < 0.05, "{mean}");
    }

    #[test]
    fn serializes_as_rows() {
        let rep = EncodedRepresentation::new(vec![vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(serde_json::to_string(&rep).unwrap(), "[[1.0,2.0],[3.0,4.0]]");
        assert!(serde_json::from_str::<EncodedRepresentation>("[[1.0],[1.0,2.0]]").is_err());
        assert!(serde_json::from_str::<EncodedRepresentation>("[]").is_err());
    }
}
