//! Overfitting a single annotated image with the tiny preset.

use dcspp::anchors::Anchor;
use dcspp::detection::{detect_image, Thresholds};
use dcspp::io::ImageFile;
use dcspp::layers::LeakyRelu;
use dcspp::loss::TruthBox;
use dcspp::network::{Network, NetworkConfig};
use dcspp::training::{synth_image, train, AugmentFlags, Sample, TrainConfig, TrainReport};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SIZE: usize = 96;

fn tiny_net(seed: u64) -> Network<f32> {
    let cfg = NetworkConfig {
        input_size: SIZE,
        num_classes: 3,
        anchors: vec![Anchor::new(0.8, 0.8), Anchor::new(1.1, 1.1), Anchor::new(1.4, 1.4)],
        channel_scale: (1, 8),
        leaky_a: LeakyRelu::DEFAULT_A,
    };
    let mut net = Network::build(&cfg).unwrap();
    net.init_weights(seed);
    net
}

/// Same noise process as the synthetic background, with nothing painted on it.
fn background(rng: &mut impl Rng) -> ImageFile {
    ImageFile { width: SIZE, height: SIZE, rgb: (0..3 * SIZE * SIZE).map(|_| rng.gen_range(60..=140)).collect() }
}

fn fit(net: &mut Network<f32>, samples: &[Sample], iterations: usize, seed: u64) -> TrainReport {
    let cfg = TrainConfig {
        batch_size: samples.len(),
        epochs: iterations,
        augment: AugmentFlags::default(),
        seed,
        ..TrainConfig::default()
    };
    let report = train(net, samples, &cfg).unwrap();
    assert_eq!(report.rows.len(), iterations);
    report
}

fn loss_drop(seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (image, truths) = synth_image(&mut rng, SIZE);
    let mut net = tiny_net(seed);
    let report = fit(&mut net, &[Sample { image, truths }], 300, seed);
    (report.initial_loss().unwrap(), report.final_loss().unwrap())
}

/// Trains on one annotated image plus one unannotated background, then
/// returns the truths, the classes detected on the trained image and the
/// scores detected on a fresh background draw.
fn trained_vs_noise(seed: u64, iterations: usize) -> (Vec<TruthBox>, Vec<usize>, Vec<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (image, truths) = synth_image(&mut rng, SIZE);
    let empty = background(&mut rng);
    let mut net = tiny_net(seed);
    let samples = [Sample { image: image.clone(), truths: truths.clone() }, Sample { image: empty, truths: vec![] }];
    fit(&mut net, &samples, iterations, seed);
    let th = Thresholds::default();
    let on_image = detect_image(&net, &image, &th).unwrap();
    let on_noise = detect_image(&net, &background(&mut rng), &th).unwrap();
    (truths, on_image.iter().map(|d| d.class_id).collect(), on_noise.iter().map(|d| d.score).collect())
}

#[test]
fn single_image_loss_drops_below_five_percent() {
    for seed in [4, 9] {
        let (first, last) = loss_drop(seed);
        assert!(last < 0.05 * first, "seed {seed}: loss {first} -> {last}");
    }
}

#[test]
fn memorised_objects_are_found_and_noise_is_not() {
    let (truths, classes, noise_scores) = trained_vs_noise(4, 1000);
    assert!(truths.iter().all(|t| classes.contains(&t.class)), "{truths:?} vs {classes:?}");
    assert!(noise_scores.is_empty(), "noise scores {noise_scores:?}");
}
