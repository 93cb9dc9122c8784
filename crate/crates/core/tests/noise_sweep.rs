//! Encoded-input accuracy of the synthetic backend under increasing noise.

use veil_core::backend::{SentenceProfile, SyntheticConfig, SyntheticLexiconModel};
use veil_core::pprg::{IdentityEmbedding, NoisyEmbedding, PerturbationParams, Pprg};
use veil_core::streams::{item_rng, substream, Stream};
use veil_core::Instance;

fn setup() -> (SyntheticLexiconModel, Vec<Instance>) {
    let model = SyntheticLexiconModel::new(SyntheticConfig::default()).unwrap();
    let xs = model.generate_instances("x", 200, &SentenceProfile::evaluation(), &mut substream(0, Stream::Data));
    (model, xs)
}

/// Correctly classified instances out of 200.
fn correct(model: &SyntheticLexiconModel, xs: &[Instance], encoder: &dyn Pprg) -> usize {
    xs.iter()
        .enumerate()
        .filter(|(i, x)| {
            let rep = encoder.encode(&x.text, &mut item_rng(0, Stream::Pprg, *i as u64)).unwrap();
            Some(model.classify_encoded(&rep).unwrap().argmax()) == x.gold_label
        })
        .count()
}

fn noisy(model: &SyntheticLexiconModel, eta: f64) -> NoisyEmbedding {
    NoisyEmbedding {
        key: model.embedding_key(),
        dim: model.embedding_dim(),
        params: PerturbationParams::new(eta).unwrap(),
    }
}

fn identity(model: &SyntheticLexiconModel) -> IdentityEmbedding {
    IdentityEmbedding {
        key: model.embedding_key(),
        dim: model.embedding_dim(),
    }
}

#[test]
fn identity_encoding_matches_plaintext() {
    let (model, xs) = setup();
    let enc = identity(&model);
    for (i, x) in xs.iter().enumerate() {
        let rep = enc.encode(&x.text, &mut item_rng(0, Stream::Pprg, i as u64)).unwrap();
        let a = model.classify_encoded(&rep).unwrap();
        let b = model.classify_text(&x.text).unwrap();
        for (p, q) in a.probs().iter().zip(b.probs()) {
            assert!((p - q).abs() < 1e-6);
        }
    }
}

#[test]
fn accuracy_falls_as_eta_shrinks() {
    let (model, xs) = setup();
    let counts: Vec<usize> = [200.0, 100.0, 50.0, 25.0].iter().map(|e| correct(&model, &xs, &noisy(&model, *e))).collect();
    assert!(counts.windows(2).all(|w| w[1] < w[0]), "{counts:?}");
}

#[test]
fn light_noise_stays_within_two_points_of_identity() {
    let (model, xs) = setup();
    let clean = correct(&model, &xs, &identity(&model));
    let light = correct(&model, &xs, &noisy(&model, 200.0));
    // 2 points of 200 instances
    assert!(clean - light <= 4, "identity {clean}/200, eta=200 {light}/200");
}

#[test]
fn heavy_noise_is_within_ten_points_of_chance() {
    let (model, xs) = setup();
    let heavy = correct(&model, &xs, &noisy(&model, 25.0));
    // chance is 100/200; 10 points is 20 instances
    assert!(heavy.abs_diff(100) <= 20, "eta=25 {heavy}/200");
}
