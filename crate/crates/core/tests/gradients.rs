mod common;

use laf_core::train::{train, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::*;

#[test]
fn full_gradients_match_central_differences() {
    let config = mini_config();
    for seed in 0..4u64 {
        let model = random_model(&config, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let image = random_image(&mut rng, config.backbone.input_size);
        let (worst, n) = finite_difference_check(&model, &image, (seed % 2) as u8);
        assert!(n > 300, "only {n} parameters checked");
        assert!(worst < 1e-3, "seed {seed}: max relative error {worst:e}");
    }
}

#[test]
fn pooled_path_gradients_agree_with_full_path() {
    let config = mini_config();
    let model = random_model(&config, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let images: Vec<_> = (0..3).map(|_| random_image(&mut rng, 8)).collect();
    let labels = [1u8, 0, 1];

    let mut full = model.zeros_like();
    for (im, &l) in images.iter().zip(&labels) {
        model.loss_grad_full(im, l, &mut full).unwrap();
    }
    let pooled: Vec<_> = images.iter().map(|im| model.pooled_features(im).unwrap()).collect();
    let refs: Vec<_> = pooled.iter().collect();
    let mut pg = model.zeros_like();
    model.loss_grad_pooled(&refs, &labels, &mut pg).unwrap();

    let mut a = Vec::new();
    full.for_each_tensor(&mut |name, _, t| a.push((name, t.to_vec())));
    let mut b = Vec::new();
    pg.for_each_tensor(&mut |name, _, t| b.push((name, t.to_vec())));
    for ((name, ga), (_, gb)) in a.iter().zip(&b) {
        if name.starts_with("projectors") || name.starts_with("head") {
            for (x, y) in ga.iter().zip(gb) {
                // the pooled path averages over the batch
                assert!((x / 3.0 - y).abs() <= 1e-12 * (1.0 + x.abs()), "{name}: {x} vs {y}");
            }
        }
    }
}

#[test]
fn loss_decreases_over_first_epoch() {
    let model = laf_core::Model64::init(&mini_config(), 11).unwrap();
    let cfg = TrainConfig { epochs: 1, batch_size: 8, learning_rate: 1e-2, seed: 4, ..TrainConfig::default() };
    let out = train(&model, &toy_set(64, 21, 8), &toy_set(16, 22, 8), &cfg).unwrap();
    let loss = &out.history.train_set_loss;
    assert_eq!(loss.len(), 2);
    assert!(loss[1] < loss[0], "{loss:?}");
}
