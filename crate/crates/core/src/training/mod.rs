//! Adam optimization over the detection loss.

mod augment;
mod dataset;
mod synth;

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use augment::{apply_params, augment, sample_params, AugmentFlags, AugmentParams};
pub use dataset::{load_samples, read_class_names, DatasetManifest, Sample, CLASSES_FILE, MANIFEST_FILE};
pub use synth::{synth_dataset, synth_image, ShapeKind, SHAPE_CLASSES};

use crate::error::{Error, Result};
use crate::io::{image_to_tensor, Letterbox};
use crate::loss::{batch_loss_with, GradMode, LossParts, LossWeights, TruthBox};
use crate::network::{Network, ParamKind, ParamMut};
use crate::tensor::{Float, Tensor};

pub const LOSS_LOG_HEADER: &str = "iter,epoch,lr,loss,loss_noobj,loss_obj,loss_coord,loss_class,loss_prior";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Stops early after this many optimizer steps.
    pub max_iterations: Option<usize>,
    pub lr0: f64,
    /// `(epoch, factor)`: from `epoch` on, the rate is multiplied by `factor`.
    pub lr_drops: Vec<(usize, f64)>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay applied to convolution weights only.
    pub weight_decay: f64,
    pub seed: u64,
    pub loss: LossWeights,
    /// Gradient used for the updates; the logged loss is the same either way.
    pub grad_mode: GradMode,
    pub augment: AugmentFlags,
    /// Write `epoch_<n>.weights` into this directory every `checkpoint_every` epochs.
    pub checkpoint_dir: Option<PathBuf>,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            epochs: 600,
            max_iterations: None,
            lr0: 1e-3,
            lr_drops: vec![(400, 0.1), (500, 0.1)],
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
            seed: 0,
            loss: LossWeights::default(),
            grad_mode: GradMode::Delta,
            augment: AugmentFlags::all(),
            checkpoint_dir: None,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("learning rate must be finite and non-negative, got {}", self.lr0)));
        }
        Ok(())
    }
}

/// Piecewise-constant learning rate.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr_drops.iter().filter(|(e, _)| epoch >= *e).fold(cfg.lr0, |lr, (_, f)| lr * f)
}

/// First and second moments for every parameter vector.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

/// One bias-corrected Adam update. Weight decay is decoupled and scaled by the
/// learning rate, and only applies to `ParamKind::Weight`.
pub fn adam_step<T: Float>(params: &mut [ParamMut<'_, T>], state: &mut AdamState, lr: f64, cfg: &TrainConfig) {
    if state.m.len() != params.len() {
        state.m = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        state.v = state.m.clone();
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let decay = if p.kind == ParamKind::Weight { cfg.weight_decay } else { 0.0 };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..p.value.len() {
            let g = p.grad[j].to_f64();
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            let w = p.value[j].to_f64();
            p.value[j] = T::from_f64(w - lr * (mh / (vh.sqrt() + cfg.eps) + decay * w));
        }
    }
}

/// One row of the loss log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRow {
    pub iter: usize,
    pub epoch: usize,
    pub lr: f64,
    pub parts: LossParts,
}

impl LossRow {
    pub fn loss(&self) -> f64 {
        self.parts.total()
    }

    pub fn csv_line(&self) -> String {
        let p = &self.parts;
        format!(
            "{},{},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9}",
            self.iter,
            self.epoch,
            self.lr,
            p.total(),
            p.noobj,
            p.obj,
            p.coord,
            p.class,
            p.prior
        )
    }
}

pub fn loss_log_csv(rows: &[LossRow]) -> String {
    let mut s = format!("{LOSS_LOG_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_line());
    }
    s
}

/// Truth boxes re-expressed in the letterboxed network-input frame.
pub fn letterbox_truths(truths: &[TruthBox], width: usize, height: usize, target: usize) -> Vec<TruthBox> {
    let lb = Letterbox::new(width, height, target);
    let t = target as f64;
    let sx = lb.new_w as f64 / t;
    let sy = lb.new_h as f64 / t;
    truths
        .iter()
        .map(|b| TruthBox {
            x: (b.x * lb.new_w as f64 + lb.offset_x) / t,
            y: (b.y * lb.new_h as f64 + lb.offset_y) / t,
            w: b.w * sx,
            h: b.h * sy,
            class: b.class,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub rows: Vec<LossRow>,
    pub images_seen: usize,
}

impl TrainReport {
    pub fn initial_loss(&self) -> Option<f64> {
        self.rows.first().map(LossRow::loss)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.rows.last().map(LossRow::loss)
    }
}

/// Builds a training batch: augmentation, letterboxing and stacking.
pub fn make_batch(
    samples: &[Sample],
    indices: &[usize],
    input_size: usize,
    flags: &AugmentFlags,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<f32>, Vec<Vec<TruthBox>>)> {
    let mut inputs = Vec::with_capacity(indices.len());
    let mut truths = Vec::with_capacity(indices.len());
    for &i in indices {
        let s = &samples[i];
        let (img, boxes) = augment(&s.image, &s.truths, rng, flags);
        truths.push(letterbox_truths(&boxes, img.width, img.height, input_size));
        inputs.push(image_to_tensor(&img, input_size));
    }
    Ok((Tensor::stack(&inputs)?, truths))
}

/// Runs the optimization loop. Each epoch visits the samples in a seeded
/// shuffled order, in batches of `batch_size` (the last batch may be short).
pub fn train(net: &mut Network<f32>, samples: &[Sample], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let classes = net.config().num_classes;
    for (i, s) in samples.iter().enumerate() {
        if let Some(t) = s.truths.iter().find(|t| t.class >= classes) {
            return Err(Error::Config(format!("sample {i}: class {} out of range for {classes} classes", t.class)));
        }
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let anchors = net.config().anchors.clone();
    let input_size = net.config().input_size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::default();
    let mut rows = Vec::new();
    let mut images_seen = 0usize;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let limit = cfg.max_iterations.unwrap_or(usize::MAX);

    'epochs: for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if rows.len() >= limit {
                break 'epochs;
            }
            let iter = rows.len();
            let (x, truths) = make_batch(samples, chunk, input_size, &cfg.augment, &mut rng)?;
            let raw = net.forward(&x, true)?;
            let out = batch_loss_with(&raw, &truths, &anchors, &cfg.loss, images_seen, cfg.grad_mode)?;
            if !out.total.is_finite() || !out.grad.is_finite() {
                return Err(Error::NonFiniteLoss { iteration: iter });
            }
            net.zero_grad();
            net.backward(&out.grad)?;
            adam_step(&mut net.params_mut(), &mut adam, lr, cfg);
            images_seen += chunk.len();
            rows.push(LossRow { iter, epoch, lr, parts: out.parts });
        }
        if let Some(dir) = &cfg.checkpoint_dir {
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                net.save_weights(dir.join(format!("epoch_{}.weights", epoch + 1)))?;
            }
        }
    }
    net.clear_cache();
    Ok(TrainReport { rows, images_seen })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchors::Anchor;
    use crate::network::NetworkConfig;

    #[test]
    fn schedule_follows_drops() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 0.001);
        assert_eq!(lr_at(399, &cfg), 0.001);
        assert!((lr_at(400, &cfg) - 1e-4).abs() < 1e-18);
        assert!((lr_at(500, &cfg) - 1e-5).abs() < 1e-18);
    }

    fn scalar_params<'a>(value: &'a mut [f64], grad: &'a mut [f64], kind: ParamKind) -> ParamMut<'a, f64> {
        ParamMut { kind, value, grad }
    }

    #[test]
    fn adam_matches_scalar_recurrence() {
        let cfg = TrainConfig { weight_decay: 0.0, ..TrainConfig::default() };
        let gs = [0.3, -1.2, 0.05];
        let (mut w, mut g) = ([0.7f64], [0.0f64]);
        let mut st = AdamState::default();
        // straight-line recomputation
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 0.7f64);
        for (t, &gv) in gs.iter().enumerate() {
            g[0] = gv;
            adam_step(&mut [scalar_params(&mut w, &mut g, ParamKind::Bias)], &mut st, 0.01, &cfg);
            m = 0.9 * m + 0.1 * gv;
            v = 0.999 * v + 0.001 * gv * gv;
            let mh = m / (1.0 - 0.9f64.powi(t as i32 + 1));
            let vh = v / (1.0 - 0.999f64.powi(t as i32 + 1));
            x -= 0.01 * mh / (vh.sqrt() + 1e-8);
            assert!((w[0] - x).abs() < 1e-15, "step {t}: {} vs {x}", w[0]);
        }
    }

    #[test]
    fn adam_edge_cases() {
        let cfg = TrainConfig::default();
        let mut st = AdamState::default();
        let (mut w, mut g) = ([1.5f64, -2.0], [0.0f64, 0.0]);
        adam_step(&mut [scalar_params(&mut w, &mut g, ParamKind::Bias)], &mut st, 0.01, &cfg);
        assert_eq!(w, [1.5, -2.0]);

        // constant gradient: each step moves by about lr against the sign
        let mut st = AdamState::default();
        let (mut w, mut g) = ([0.0f64, 0.0], [3.0f64, -0.2]);
        for _ in 0..5 {
            let before = w;
            adam_step(&mut [scalar_params(&mut w, &mut g, ParamKind::Bias)], &mut st, 0.01, &cfg);
            assert!(((before[0] - w[0]) - 0.01).abs() < 1e-6);
            assert!(((w[1] - before[1]) - 0.01).abs() < 1e-6);
        }

        // beta1 = 0 and beta2 near 1 behaves like sign-preserving SGD
        let sgdish = TrainConfig { beta1: 0.0, beta2: 1.0 - 1e-12, weight_decay: 0.0, ..cfg.clone() };
        let mut st = AdamState::default();
        let (mut w, mut g) = ([0.0f64, 0.0], [0.5f64, -2.0]);
        adam_step(&mut [scalar_params(&mut w, &mut g, ParamKind::Bias)], &mut st, 0.1, &sgdish);
        assert!(w[0] < 0.0 && w[1] > 0.0);

        // decay only touches weights
        let mut st = AdamState::default();
        let (mut a, mut ga) = ([2.0f64], [0.0f64]);
        let (mut b, mut gb) = ([2.0f64], [0.0f64]);
        adam_step(
            &mut [
                scalar_params(&mut a, &mut ga, ParamKind::Weight),
                scalar_params(&mut b, &mut gb, ParamKind::BnScale),
            ],
            &mut st,
            0.1,
            &cfg,
        );
        assert!((a[0] - (2.0 - 0.1 * 5e-4 * 2.0)).abs() < 1e-15);
        assert_eq!(b[0], 2.0);
    }

    #[test]
    fn letterbox_truth_mapping() {
        let t = [TruthBox::new(0.5, 0.5, 0.5, 1.0, 0).unwrap()];
        // 2:1 image into a square: content occupies the middle half vertically
        let m = letterbox_truths(&t, 64, 32, 64);
        assert_eq!((m[0].x, m[0].y, m[0].w, m[0].h), (0.5, 0.5, 0.5, 0.5));
    }

    fn tiny_setup() -> (Network<f32>, Vec<Sample>) {
        let cfg =
            NetworkConfig::new(64, 3, vec![Anchor::new(0.6, 0.6), Anchor::new(1.2, 1.0)]).with_channel_scale(1, 32);
        let mut net = Network::build(&cfg).unwrap();
        net.init_weights(1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let samples = (0..3)
            .map(|_| {
                let (image, truths) = synth_image(&mut rng, 64);
                Sample { image, truths }
            })
            .collect();
        (net, samples)
    }

    #[test]
    fn zero_rate_leaves_parameters_alone() {
        let (mut net, samples) = tiny_setup();
        let before: Vec<Vec<f32>> = net.params_mut().iter().map(|p| p.value.to_vec()).collect();
        let cfg = TrainConfig {
            lr0: 0.0,
            epochs: 1,
            batch_size: 2,
            augment: AugmentFlags::default(),
            ..TrainConfig::default()
        };
        let rep = train(&mut net, &samples, &cfg).unwrap();
        assert_eq!(rep.rows.len(), 2);
        assert_eq!(rep.images_seen, 3);
        let after: Vec<Vec<f32>> = net.params_mut().iter().map(|p| p.value.to_vec()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn training_is_reproducible() {
        let cfg = TrainConfig { epochs: 2, batch_size: 2, ..TrainConfig::default() };
        let (mut a, samples) = tiny_setup();
        let (mut b, _) = tiny_setup();
        let ra = train(&mut a, &samples, &cfg).unwrap();
        let rb = train(&mut b, &samples, &cfg).unwrap();
        assert_eq!(loss_log_csv(&ra.rows), loss_log_csv(&rb.rows));
        assert_eq!(a.weights_to_bytes(), b.weights_to_bytes());
        assert!(loss_log_csv(&ra.rows).starts_with(LOSS_LOG_HEADER));
    }

    #[test]
    fn prior_term_switches_off_at_the_boundary() {
        let (mut net, samples) = tiny_setup();
        let loss = LossWeights { n_prior: 4, ..LossWeights::default() };
        let cfg =
            TrainConfig { epochs: 3, batch_size: 2, loss, augment: AugmentFlags::default(), ..TrainConfig::default() };
        let rep = train(&mut net, &samples, &cfg).unwrap();
        let mut seen = 0;
        for r in &rep.rows {
            let batch = if r.iter % 2 == 0 { 2 } else { 1 };
            if seen >= 4 {
                assert_eq!(r.parts.prior, 0.0);
            } else {
                assert!(r.parts.prior > 0.0);
            }
            seen += batch;
        }
    }
}
