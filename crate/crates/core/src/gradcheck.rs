//! Central finite-difference checks of every analytic backward pass.
//!
//! All checks run with `f64` tensors. The relative error of an analytic value
//! `a` against a numeric value `n` is `|a - n| / max(|a|, |n|, 1e-6)`; the
//! floor keeps gradients that are zero up to rounding from dividing by zero.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::anchors::Anchor;
use crate::error::{Error, Result};
use crate::layers::{BatchNorm, Conv2d, LeakyRelu, MaxPool2d};
use crate::loss::{assign_targets, compute_loss, LossWeights, TruthBox};
use crate::network::{Network, NetworkConfig};
use crate::tensor::{Float, Shape, Tensor};

pub const FD_STEP: f64 = 1e-3;
/// Step for the end-to-end check. The composed network has leaky-ReLU and
/// max-pool kinks close enough together that a 1e-3 step routinely crosses
/// one, and batch norm over few activations is strongly curved.
pub const NETWORK_FD_STEP: f64 = 1e-6;
/// Gradients below this magnitude are compared absolutely in the network and
/// loss checks. Both difference a scalar of order 10..100, so central
/// differences carry roundoff near 1e-10 that would swamp tiny gradients.
const COARSE_REL_FLOOR: f64 = 1e-4;
/// Step for the loss check. The squared sigmoid-product terms have third
/// derivatives large enough that a 1e-3 step leaves truncation error near 1e-5.
pub const LOSS_FD_STEP: f64 = 1e-4;
pub const LAYER_TOLERANCE: f64 = 1e-4;
pub const NETWORK_TOLERANCE: f64 = 1e-3;
pub const LOSS_TOLERANCE: f64 = 1e-5;
const REL_FLOOR: f64 = 1e-6;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    rel_error_floored(analytic, numeric, REL_FLOOR)
}

/// Relative error, compared absolutely once both values fall below `floor`.
pub fn rel_error_floored(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub fn max_rel_error<T: Float>(analytic: &[T], numeric: &[T]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic.iter().zip(numeric).map(|(a, n)| rel_error(a.to_f64(), n.to_f64())).fold(0.0, f64::max)
}

pub fn max_rel_error_tensor<T: Float>(analytic: &Tensor<T>, numeric: &Tensor<T>) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    max_rel_error(analytic.data(), numeric.data())
}

/// Uniform entries in `(-scale, scale)`.
pub fn random_tensor<T: Float>(rng: &mut impl Rng, shape: Shape, scale: f64) -> Tensor<T> {
    Tensor::from_vec(shape, (0..shape.len()).map(|_| T::from_f64(rng.gen_range(-scale..scale))).collect())
        .expect("valid shape")
}

/// Central differences of `f` with respect to every entry of `params`.
pub fn numeric_grad<T: Float>(params: &[T], step: f64, mut f: impl FnMut(&[T]) -> f64) -> Vec<T> {
    let mut p = params.to_vec();
    (0..p.len())
        .map(|i| {
            let orig = p[i];
            p[i] = T::from_f64(orig.to_f64() + step);
            let up = f(&p);
            p[i] = T::from_f64(orig.to_f64() - step);
            let down = f(&p);
            p[i] = orig;
            T::from_f64((up - down) / (2.0 * step))
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

fn result(name: &str, err: f64, tol: f64) -> CheckResult {
    CheckResult { name: name.to_string(), max_rel_error: err, tolerance: tol }
}

/// Shuffled ramp values: distinct, with gaps far wider than the FD step, so no
/// perturbation crosses a leaky-ReLU kink or flips a max-pool argmax.
fn spread_tensor(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
    use rand::seq::SliceRandom;
    let len = shape.len();
    let mut v: Vec<f64> = (0..len).map(|i| (i as f64 + 0.5) / len as f64 * 4.0 - 2.0).collect();
    v.shuffle(rng);
    Tensor::from_vec(shape, v).expect("valid shape")
}

/// Per-layer checks on small random shapes.
pub fn check_layers(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    for (name, k, s, p) in [("conv 3x3/1", 3, 1, 1), ("conv 3x3/2", 3, 2, 1), ("conv 1x1/1", 1, 1, 0)] {
        let mut conv = Conv2d::<f64>::new(3, 4, k, s, p)?;
        conv.weight = random_tensor(&mut rng, conv.weight.shape(), 1.0);
        conv.bias = random_tensor(&mut rng, Shape::new(1, 1, 1, 4), 1.0).into_vec();
        let x: Tensor<f64> = random_tensor(&mut rng, Shape::new(2, 3, 5, 5), 1.0);
        let probe: Tensor<f64> = random_tensor(&mut rng, conv.output_shape(x.shape())?, 1.0);
        let g = conv.backward(&probe, &x)?;
        let nx = numeric_grad(x.data(), FD_STEP, |v| {
            conv.forward(&Tensor::from_vec(x.shape(), v.to_vec()).unwrap()).unwrap().mul(&probe).unwrap().sum()
        });
        let nw = numeric_grad(conv.weight.data(), FD_STEP, |v| {
            let mut c = conv.clone();
            c.weight.data_mut().copy_from_slice(v);
            c.forward(&x).unwrap().mul(&probe).unwrap().sum()
        });
        let nb = numeric_grad(&conv.bias, FD_STEP, |v| {
            let mut c = conv.clone();
            c.bias = v.to_vec();
            c.forward(&x).unwrap().mul(&probe).unwrap().sum()
        });
        let err = max_rel_error(g.input.data(), &nx)
            .max(max_rel_error(g.weight.data(), &nw))
            .max(max_rel_error(&g.bias, &nb));
        out.push(result(name, err, LAYER_TOLERANCE));
    }

    {
        let s = Shape::new(3, 3, 4, 4);
        let mut bn = BatchNorm::<f64>::new(3);
        bn.gamma = random_tensor(&mut rng, Shape::new(1, 1, 1, 3), 2.0).into_vec();
        bn.beta = random_tensor(&mut rng, Shape::new(1, 1, 1, 3), 1.0).into_vec();
        let x: Tensor<f64> = random_tensor(&mut rng, s, 1.5);
        let probe: Tensor<f64> = random_tensor(&mut rng, s, 1.0);
        let loss = |b: &BatchNorm<f64>, xv: &[f64]| {
            let mut b = b.clone();
            b.forward_train(&Tensor::from_vec(s, xv.to_vec()).unwrap()).unwrap().0.mul(&probe).unwrap().sum()
        };
        let (_, cache) = bn.clone().forward_train(&x)?;
        let g = bn.backward(&probe, Some(&cache))?;
        let nx = numeric_grad(x.data(), FD_STEP, |v| loss(&bn, v));
        let ng = numeric_grad(&bn.gamma, FD_STEP, |v| {
            let mut b = bn.clone();
            b.gamma = v.to_vec();
            loss(&b, x.data())
        });
        let nb = numeric_grad(&bn.beta, FD_STEP, |v| {
            let mut b = bn.clone();
            b.beta = v.to_vec();
            loss(&b, x.data())
        });
        let err = max_rel_error(g.input.data(), &nx).max(max_rel_error(&g.gamma, &ng)).max(max_rel_error(&g.beta, &nb));
        out.push(result("batch norm", err, LAYER_TOLERANCE));
    }

    {
        let s = Shape::new(2, 2, 4, 4);
        let leaky = LeakyRelu::default();
        let x = spread_tensor(&mut rng, s);
        let probe: Tensor<f64> = random_tensor(&mut rng, s, 1.0);
        let g = leaky.backward(&probe, &x)?;
        let nx = numeric_grad(x.data(), FD_STEP, |v| {
            leaky.forward(&Tensor::from_vec(s, v.to_vec()).unwrap()).mul(&probe).unwrap().sum()
        });
        out.push(result("leaky relu", max_rel_error(g.data(), &nx), LAYER_TOLERANCE));
    }

    for (name, pool) in [
        ("maxpool 2x2/2", MaxPool2d::new(2, 2, 0)?),
        ("maxpool 3x3/1 same", MaxPool2d::same(3)?),
        ("maxpool 2x2/1 same", MaxPool2d::same(2)?),
    ] {
        let s = Shape::new(2, 2, 6, 6);
        let x = spread_tensor(&mut rng, s);
        let (y, cache) = pool.forward(&x)?;
        let probe: Tensor<f64> = random_tensor(&mut rng, y.shape(), 1.0);
        let g = pool.backward(&probe, &cache)?;
        let nx = numeric_grad(x.data(), FD_STEP, |v| {
            pool.forward(&Tensor::from_vec(s, v.to_vec()).unwrap()).unwrap().0.mul(&probe).unwrap().sum()
        });
        out.push(result(name, max_rel_error(g.data(), &nx), LAYER_TOLERANCE));
    }

    {
        let s = Shape::new(2, 2, 4, 6);
        let x: Tensor<f64> = random_tensor(&mut rng, s, 1.0);
        let os = crate::layers::reorg_shape(s, 2)?;
        let probe: Tensor<f64> = random_tensor(&mut rng, os, 1.0);
        let g = crate::layers::reorg_backward(&probe, s, 2)?;
        let nx = numeric_grad(x.data(), FD_STEP, |v| {
            crate::layers::reorg_forward(&Tensor::from_vec(s, v.to_vec()).unwrap(), 2)
                .unwrap()
                .mul(&probe)
                .unwrap()
                .sum()
        });
        out.push(result("reorg", max_rel_error(g.data(), &nx), LAYER_TOLERANCE));
    }

    Ok(out)
}

/// The scale-reduced network used by the end-to-end check.
pub fn tiny_network_config() -> NetworkConfig {
    NetworkConfig {
        input_size: 32,
        num_classes: 2,
        anchors: vec![Anchor::new(0.6, 0.8), Anchor::new(0.9, 0.5)],
        channel_scale: (1, 64),
        leaky_a: LeakyRelu::DEFAULT_A,
    }
}

/// Whole-network check: sampled parameters against central differences of a
/// fixed random linear functional of the output. A sample whose `±h` passes
/// take different ReLU or max-pool branches straddles a kink, where the
/// derivative is undefined; it is replaced by a fresh draw.
pub fn check_network(seed: u64, samples: usize) -> Result<CheckResult> {
    let cfg = tiny_network_config();
    let mut net = Network::<f64>::build(&cfg)?;
    net.init_weights(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    // give BN affine parameters non-trivial values so their gradients are exercised
    for p in net.params_mut() {
        if p.kind != crate::network::ParamKind::Weight {
            for v in p.value.iter_mut() {
                *v += rng.gen_range(-0.2..0.2);
            }
        }
    }
    let input: Tensor<f64> = random_tensor(&mut rng, net.input_shape(4), 1.0);
    let out = net.forward(&input, true)?;
    let probe: Tensor<f64> = random_tensor(&mut rng, out.shape(), 1.0);
    net.zero_grad();
    net.backward(&probe)?;

    let counts: Vec<usize> = net.params_mut().iter().map(|p| p.value.len()).collect();
    let total: usize = counts.iter().sum();
    let mut worst: f64 = 0.0;
    let (mut done, mut draws) = (0, 0);
    while done < samples {
        draws += 1;
        if draws > 50 * samples.max(1) {
            return Err(Error::Config("network check: too many samples straddle a kink".into()));
        }
        let mut flat = rng.gen_range(0..total);
        let mut slot = 0;
        while flat >= counts[slot] {
            flat -= counts[slot];
            slot += 1;
        }
        let analytic = net.params_mut()[slot].grad[flat];
        let eval = |delta: f64| -> Result<(f64, Option<u64>)> {
            let mut probe_net = net.clone();
            probe_net.params_mut()[slot].value[flat] += delta;
            let v = probe_net.forward(&input, true)?.mul(&probe)?.sum();
            Ok((v, probe_net.branch_signature()))
        };
        let (hi, sig_hi) = eval(NETWORK_FD_STEP)?;
        let (lo, sig_lo) = eval(-NETWORK_FD_STEP)?;
        if sig_hi != sig_lo {
            continue;
        }
        let numeric = (hi - lo) / (2.0 * NETWORK_FD_STEP);
        worst = worst.max(rel_error_floored(analytic, numeric, COARSE_REL_FLOOR));
        done += 1;
    }
    Ok(result("network (sampled parameters)", worst, NETWORK_TOLERANCE))
}

/// Loss gradient with respect to every raw output on a 2×2 grid, K=2, C=2.
pub fn check_loss(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let anchors = vec![Anchor::new(0.7, 0.9), Anchor::new(1.3, 0.6)];
    let (s, k, c) = (2, 2, 2);
    let raw: Tensor<f64> = random_tensor(&mut rng, Shape::new(1, k * (5 + c), s, s), 1.5);
    let truths = vec![TruthBox::new(0.3, 0.2, 0.35, 0.4, 0)?, TruthBox::new(0.7, 0.8, 0.5, 0.3, 1)?];
    let weights = LossWeights::default();
    let assignment = assign_targets(&truths, &raw, &anchors, &weights, 0)?;
    let out = compute_loss(&raw, &truths, &assignment, &anchors, &weights)?;
    let num = numeric_grad(raw.data(), LOSS_FD_STEP, |v| {
        let r = Tensor::from_vec(raw.shape(), v.to_vec()).unwrap();
        compute_loss(&r, &truths, &assignment, &anchors, &weights).unwrap().total
    });
    Ok(result(
        "loss (2x2 grid)",
        out.grad.data().iter().zip(&num).map(|(a, n)| rel_error_floored(*a, *n, COARSE_REL_FLOOR)).fold(0.0, f64::max),
        LOSS_TOLERANCE,
    ))
}

/// Every suite: layers, scale-reduced network, loss.
pub fn run_all(seed: u64) -> Result<Vec<CheckResult>> {
    let mut all = check_layers(seed)?;
    all.push(check_network(seed, 20)?);
    all.push(check_loss(seed)?);
    Ok(all)
}
