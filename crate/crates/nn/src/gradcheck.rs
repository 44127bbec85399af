//! Central finite-difference checks for every differentiable op.
//!
//! Each case builds random 64-bit leaves, records a scalar loss on a tape,
//! and compares the tape's gradients with `(L(x + h) - L(x - h)) / 2h`
//! evaluated from forward passes only. Small leaves are checked on every
//! coordinate; the full network is checked along one random direction per
//! parameter tensor, which exercises every coordinate at once.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::resnet::{ResNet18, ResNetConfig};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::Mode;

/// Maximum accepted relative error.
pub const REL_TOL: f64 = 1e-4;
pub const STEP: f64 = 1e-4;
/// Steps tried, in order, along a unit direction for the whole-network check.
/// The network loss bends sharply within ~1e-4 (relu kinks, batchnorm over
/// two values in the last stage at 32x32), so it needs much shorter steps.
pub const NETWORK_STEPS: [f64; 3] = [1e-6, 1e-7, 1e-8];
/// Agreement required between the h and 2h central differences before a
/// finite-difference estimate is trusted.
pub const CONSISTENCY_TOL: f64 = 1e-5;
/// Fresh directions drawn when no step gives a consistent estimate.
const MAX_REDRAWS: usize = 8;
/// Coordinates sampled per leaf when a leaf is larger than this.
const MAX_COORDS: usize = 48;

/// `|a - b| / max(|a|, |b|, 1e-8)`
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub trials: usize,
    pub comparisons: usize,
    pub max_rel_error: f64,
    /// Directions abandoned because the loss was not smooth along them.
    pub redrawn: usize,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < REL_TOL
    }
}

type LossFn = dyn for<'a> Fn(&mut Tape<'a, f64>, &[Var]) -> Result<Var>;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng))
        .collect::<Vec<f64>>();
    Tensor::new(shape, data).expect("consistent shape")
}

fn eval_loss(leaves: &[Tensor<f64>], f: &LossFn) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = leaves
        .iter()
        .map(|t| tape.constant(t))
        .collect::<Result<Vec<_>>>()?;
    let l = f(&mut tape, &vars)?;
    Ok(tape.value(l).data()[0])
}

fn analytic(leaves: &[Tensor<f64>], f: &LossFn) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let vars = leaves
        .iter()
        .map(|t| tape.param(t))
        .collect::<Result<Vec<_>>>()?;
    let l = f(&mut tape, &vars)?;
    let grads = tape.backward(l)?;
    Ok(vars
        .iter()
        .zip(leaves)
        .map(|(&v, t)| grads.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect())
}

/// Fourth-order central difference `f'(0)` from samples at `+-h` and `+-2h`.
/// Truncation error is O(h^4), which lets `h` be large enough that
/// rounding in the loss does not swamp small gradient entries.
fn central_difference(h: f64, mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let p1 = f(h)?;
    let m1 = f(-h)?;
    let p2 = f(2.0 * h)?;
    let m2 = f(-2.0 * h)?;
    Ok((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h))
}

enum Smooth {
    Yes(f64),
    No(f64),
}

/// Walks down `NETWORK_STEPS` until the second-order differences at h and 2h
/// agree, which they do wherever the function is smooth on [-2h, 2h]. A kink
/// inside the stencil breaks the agreement at every step. The decision uses
/// only forward evaluations, never the analytic gradient.
fn smooth_difference(mut f: impl FnMut(f64) -> Result<f64>) -> Result<Smooth> {
    let mut last = 0.0;
    for h in NETWORK_STEPS {
        let p1 = f(h)?;
        let m1 = f(-h)?;
        let p2 = f(2.0 * h)?;
        let m2 = f(-2.0 * h)?;
        let d1 = (p1 - m1) / (2.0 * h);
        let d2 = (p2 - m2) / (4.0 * h);
        last = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
        if rel_error(d1, d2) < CONSISTENCY_TOL {
            return Ok(Smooth::Yes(last));
        }
    }
    Ok(Smooth::No(last))
}

/// Coordinate-wise check of every (or a sample of every) leaf coordinate.
/// Returns the number of comparisons and the worst relative error.
pub fn check_coordinates(
    leaves: &mut [Tensor<f64>],
    f: &LossFn,
    rng: &mut ChaCha8Rng,
) -> Result<(usize, f64)> {
    let grads = analytic(leaves, f)?;
    let mut worst = 0.0f64;
    let mut count = 0;
    for li in 0..leaves.len() {
        let n = leaves[li].len();
        let coords: Vec<usize> = if n <= MAX_COORDS {
            (0..n).collect()
        } else {
            (0..MAX_COORDS).map(|_| rng.random_range(0..n)).collect()
        };
        for c in coords {
            let orig = leaves[li].data()[c];
            let h = STEP * orig.abs().max(1.0);
            let fd = central_difference(h, |dx| {
                leaves[li].data_mut()[c] = orig + dx;
                let l = eval_loss(leaves, f);
                leaves[li].data_mut()[c] = orig;
                l
            })?;
            worst = worst.max(rel_error(grads[li][c], fd));
            count += 1;
        }
    }
    Ok((count, worst))
}

fn run_case(
    name: &str,
    trials: usize,
    seed: u64,
    make: impl Fn(&mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<LossFn>),
) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut comparisons = 0;
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let (mut leaves, f) = make(&mut rng);
        let (n, w) = check_coordinates(&mut leaves, f.as_ref(), &mut rng)?;
        comparisons += n;
        worst = worst.max(w);
    }
    Ok(CheckReport {
        name: name.to_string(),
        trials,
        comparisons,
        max_rel_error: worst,
        redrawn: 0,
    })
}

/// Projects a tensor-valued output to a scalar with fixed random weights.
fn project(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn conv_case(
    batch: usize,
    in_ch: usize,
    out_ch: usize,
    size: usize,
    k: usize,
    stride: usize,
    padding: usize,
    bias: bool,
) -> impl Fn(&mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<LossFn>) {
    move |rng| {
        let mut leaves = vec![
            randn(rng, &[batch, in_ch, size, size], 1.0),
            randn(rng, &[out_ch, in_ch, k, k], 0.3),
        ];
        if bias {
            leaves.push(randn(rng, &[out_ch], 0.5));
        }
        let out = (size + 2 * padding - k) / stride + 1;
        let r = project(rng, batch * out_ch * out * out);
        let f: Box<LossFn> = Box::new(move |tape, v| {
            let y = tape.conv2d(v[0], v[1], v.get(2).copied(), stride, padding)?;
            tape.weighted_sum(y, r.clone())
        });
        (leaves, f)
    }
}

/// Checks every op with a backward rule, `trials` random instances each.
pub fn op_suite(trials: usize, seed: u64) -> Result<Vec<CheckReport>> {
    let mut reports = vec![
        run_case("conv2d 3x3/1 pad 1 + bias", trials, seed, conv_case(2, 3, 4, 6, 3, 1, 1, true))?,
        run_case("conv2d 7x7/2 pad 3", trials, seed + 1, conv_case(2, 2, 3, 11, 7, 2, 3, false))?,
        run_case("conv2d 1x1/2 projection", trials, seed + 2, conv_case(2, 3, 5, 7, 1, 2, 0, false))?,
    ];
    reports.push(run_case("maxpool2d 3x3/2 pad 1", trials, seed + 3, |rng| {
        let leaves = vec![randn(rng, &[2, 3, 7, 7], 1.0)];
        let r = project(rng, 2 * 3 * 4 * 4);
        let f: Box<LossFn> = Box::new(move |tape, v| {
            let y = tape.maxpool2d(v[0], 3, 2, 1)?;
            tape.weighted_sum(y, r.clone())
        });
        (leaves, f)
    })?);
    reports.push(run_case("global_avgpool", trials, seed + 4, |rng| {
        let leaves = vec![randn(rng, &[2, 3, 4, 5], 1.0)];
        let r = project(rng, 6);
        let f: Box<LossFn> = Box::new(move |tape, v| {
            let y = tape.global_avgpool(v[0])?;
            tape.weighted_sum(y, r.clone())
        });
        (leaves, f)
    })?);
    reports.push(run_case("batchnorm (train)", trials, seed + 5, |rng| {
        let leaves = vec![
            randn(rng, &[3, 4, 3, 3], 2.0),
            randn(rng, &[4], 1.0),
            randn(rng, &[4], 1.0),
        ];
        let r = project(rng, 3 * 4 * 9);
        let f: Box<LossFn> = Box::new(move |tape, v| {
            let (y, _) = tape.batchnorm_train(v[0], v[1], v[2], 1e-5)?;
            tape.weighted_sum(y, r.clone())
        });
        (leaves, f)
    })?);
    reports.push(run_case("batchnorm (eval)", trials, seed + 6, |rng| {
        let leaves = vec![
            randn(rng, &[2, 3, 2, 2], 1.5),
            randn(rng, &[3], 1.0),
            randn(rng, &[3], 1.0),
        ];
        let mean = project(rng, 3);
        let var: Vec<f64> = (0..3).map(|_| rng.random_range(0.2..2.0)).collect();
        let r = project(rng, 24);
        let f: Box<LossFn> = Box::new(move |tape, v| {
            let y = tape.batchnorm_eval(v[0], v[1], v[2], &mean, &var, 1e-5)?;
            tape.weighted_sum(y, r.clone())
        });
        (leaves, f)
    })?);
    reports.push(run_case("relu", trials, seed + 7, |rng| {
        let leaves = vec![randn(rng, &[3, 10], 1.0)];
        let r = project(rng, 30);
        let f: Box<LossFn> = Box::new(move |tape, v| {
            let y = tape.relu(v[0])?;
            tape.weighted_sum(y, r.clone())
        });
        (leaves, f)
    })?);
    reports.push(run_case("add (residual)", trials, seed + 8, |rng| {
        let leaves = vec![randn(rng, &[2, 2, 3, 3], 1.0), randn(rng, &[2, 2, 3, 3], 1.0)];
        let r = project(rng, 36);
        let f: Box<LossFn> = Box::new(move |tape, v| {
            let y = tape.add(v[0], v[1])?;
            tape.weighted_sum(y, r.clone())
        });
        (leaves, f)
    })?);
    reports.push(run_case("linear", trials, seed + 9, |rng| {
        let leaves = vec![
            randn(rng, &[4, 6], 1.0),
            randn(rng, &[6, 3], 0.5),
            randn(rng, &[3], 0.5),
        ];
        let r = project(rng, 12);
        let f: Box<LossFn> = Box::new(move |tape, v| {
            let y = tape.linear(v[0], v[1], v[2])?;
            tape.weighted_sum(y, r.clone())
        });
        (leaves, f)
    })?);
    reports.push(run_case("weighted cross-entropy", trials, seed + 10, |rng| {
        let leaves = vec![randn(rng, &[5, 3], 2.0)];
        let labels: Vec<usize> = (0..5).map(|_| rng.random_range(0..3)).collect();
        let weights: Vec<f64> = (0..3).map(|_| rng.random_range(0.3..3.0)).collect();
        let f: Box<LossFn> =
            Box::new(move |tape, v| tape.weighted_cross_entropy(v[0], &labels, &weights));
        (leaves, f)
    })?);
    Ok(reports)
}

/// Directional finite-difference check of a full ResNet18 training-mode
/// pass (weighted cross-entropy on `batch x 4 x size x size` inputs).
pub fn resnet_check(trials: usize, seed: u64, batch: usize, size: usize) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let class_weights = [0.5956, 1.1614, 2.1738];
    let mut comparisons = 0;
    let mut worst = 0.0f64;
    let mut redrawn = 0;
    for trial in 0..trials {
        let mut model = ResNet18::<f64>::new(ResNetConfig {
            in_channels: 4,
            num_classes: 3,
            seed: seed.wrapping_add(trial as u64),
        })?;
        let input = randn(&mut rng, &[batch, 4, size, size], 1.0);
        let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..3)).collect();

        let loss_of = |m: &ResNet18<f64>, x: &Tensor<f64>| -> Result<f64> {
            let mut tape = Tape::new();
            let xv = tape.constant(x)?;
            let f = m.forward_tape(&mut tape, xv, Mode::Train)?;
            let l = tape.weighted_cross_entropy(f.logits, &labels, &class_weights)?;
            Ok(tape.value(l).data()[0])
        };

        let (param_grads, input_grad) = {
            let mut tape = Tape::new();
            let xv = tape.input(input.clone(), true)?;
            let f = model.forward_tape(&mut tape, xv, Mode::Train)?;
            let l = tape.weighted_cross_entropy(f.logits, &labels, &class_weights)?;
            let mut g = tape.backward(l)?;
            let pg: Vec<Vec<f64>> = f
                .params
                .iter()
                .map(|&v| g.take(v).expect("every parameter receives a gradient"))
                .collect();
            (pg, g.take(xv).expect("input gradient"))
        };

        let n_params = param_grads.len();
        for pi in 0..=n_params {
            let len = if pi < n_params {
                param_grads[pi].len()
            } else {
                input.len()
            };
            let grad = if pi < n_params {
                &param_grads[pi]
            } else {
                &input_grad
            };
            let mut attempt = 0;
            let (directional, fd) = loop {
                let mut dir = project(&mut rng, len);
                let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
                dir.iter_mut().for_each(|d| *d /= norm);
                let directional: f64 = grad.iter().zip(&dir).map(|(g, d)| g * d).sum();
                let est = smooth_difference(|dx| {
                    if pi < n_params {
                        let original = model.parameters_mut()[pi].data().to_vec();
                        for (x, d) in model.parameters_mut()[pi].data_mut().iter_mut().zip(&dir) {
                            *x += dx * d;
                        }
                        let loss = loss_of(&model, &input);
                        model.parameters_mut()[pi].data_mut().copy_from_slice(&original);
                        loss
                    } else {
                        let mut x = input.clone();
                        for (v, d) in x.data_mut().iter_mut().zip(&dir) {
                            *v += dx * d;
                        }
                        loss_of(&model, &x)
                    }
                })?;
                match est {
                    Smooth::Yes(fd) => break (directional, fd),
                    Smooth::No(fd) if attempt == MAX_REDRAWS => break (directional, fd),
                    Smooth::No(_) => {
                        attempt += 1;
                        redrawn += 1;
                    }
                }
            };
            worst = worst.max(rel_error(directional, fd));
            comparisons += 1;
        }
    }
    Ok(CheckReport {
        name: format!("resnet18 {batch}x4x{size}x{size}"),
        trials,
        comparisons,
        max_rel_error: worst,
        redrawn,
    })
}
