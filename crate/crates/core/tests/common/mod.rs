//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use fedprune::autograd::{Tape, Var};
use fedprune::nn::{build_architecture, init_weights, ArchitectureSpec, Family, ModelGraph};
use fedprune::Tensor;
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::Zero;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rational(x: f64) -> BigRational {
    BigRational::from_float(x).expect("finite")
}

fn to_f64(r: &BigRational) -> f64 {
    use num_traits::ToPrimitive;
    r.to_f64().unwrap()
}

fn decode(v: f64) -> (BigInt, i32) {
    use num_traits::Float;
    let (m, e, sign) = Float::integer_decode(v);
    (BigInt::from(m) * i64::from(sign), i32::from(e))
}

/// Exact keep set for a `[N, ...]` weight tensor, and the smallest distance
/// between any score and either boundary.
///
/// Every f64 is `m·2^e`, so after shifting to the smallest exponent all
/// scores become integers `A_n`. With `T_n = N·A_n − ΣA`, a filter survives
/// iff `N·T_n²·den(k)² ≤ num(k)²·ΣT²`, which needs no division or root.
pub fn exact_keep_set(weights: &Tensor, k: f64, min_filters: usize) -> (Vec<usize>, f64) {
    use num_traits::ToPrimitive;
    let n = weights.shape()[0];
    let per = weights.len() / n;
    let parts: Vec<(BigInt, i32)> = weights.data().iter().map(|&v| decode(v.abs())).collect();
    let emin = parts.iter().filter(|p| !p.0.is_zero()).map(|p| p.1).min().unwrap_or(0);
    let scores: Vec<BigInt> = parts
        .chunks(per)
        .map(|f| f.iter().fold(BigInt::zero(), |acc, (m, e)| acc + (m << ((e - emin) as usize))))
        .collect();
    let count = BigInt::from(n);
    let total: BigInt = scores.iter().sum();
    let t: Vec<BigInt> = scores.iter().map(|a| &count * a - &total).collect();
    let t2: Vec<BigInt> = t.iter().map(|x| x * x).collect();
    let sum_t2: BigInt = t2.iter().sum();
    let (km, ke) = decode(k);
    // k = km·2^ke; k² = km²·2^(2ke)
    let (lhs_scale, rhs) = if ke >= 0 {
        (BigInt::from(1), (&km * &km << (2 * ke) as usize) * &sum_t2)
    } else {
        (BigInt::from(1) << (-2 * ke) as usize, &km * &km * &sum_t2)
    };
    let inside = |i: usize| &count * &t2[i] * &lhs_scale <= rhs;
    let mut keep: Vec<usize> = (0..n).filter(|&i| inside(i)).collect();
    let floor = min_filters.min(n);
    if keep.len() < floor {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| t2[a].cmp(&t2[b]).then(a.cmp(&b)));
        keep = order.into_iter().take(floor).collect();
        keep.sort_unstable();
    }
    // Distances in the original units for the near-boundary filter.
    let unit = 2f64.powi(emin) / n as f64;
    let spread = k * (sum_t2.to_f64().unwrap() / n as f64).sqrt() * unit;
    let margin = t
        .iter()
        .map(|x| (x.to_f64().unwrap().abs() * unit - spread).abs())
        .fold(f64::INFINITY, f64::min);
    (keep, margin)
}

/// Direct six-loop cross-correlation with zero padding.
pub fn naive_conv(input: &Tensor, weights: &Tensor, bias: &Tensor, pad: usize, stride: usize) -> Tensor {
    let [b, c, h, w]: [usize; 4] = input.shape().try_into().unwrap();
    let [n, _, k, _]: [usize; 4] = weights.shape().try_into().unwrap();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let x = input.data();
    let wt = weights.data();
    let mut out = vec![0.0; b * n * oh * ow];
    for bi in 0..b {
        for ni in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.data()[ni];
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += x[((bi * c + ci) * h + iy as usize) * w + ix as usize]
                                    * wt[((ni * c + ci) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[((bi * n + ni) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![b, n, oh, ow], out).unwrap()
}

pub fn naive_dense(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Tensor {
    let (b, f) = (input.shape()[0], input.shape()[1]);
    let o = weights.shape()[1];
    let mut out = vec![0.0; b * o];
    for i in 0..b {
        for j in 0..o {
            let mut acc = bias.data()[j];
            for q in 0..f {
                acc += input.data()[i * f + q] * weights.data()[q * o + j];
            }
            out[i * o + j] = acc;
        }
    }
    Tensor::new(vec![b, o], out).unwrap()
}

/// Neumaier-compensated sum.
pub fn careful_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for x in xs {
        let t = s + x;
        if s.abs() >= x.abs() {
            c += (s - t) + x;
        } else {
            c += (x - t) + s;
        }
        s = t;
    }
    s + c
}

/// Mean cross-entropy, each row as `max - z_y + ln Σ exp(z_j - max)` with terms summed smallest first.
pub fn cross_entropy_oracle(logits: &Tensor, labels: &[usize]) -> f64 {
    let classes = logits.shape()[1];
    let rows: Vec<f64> = logits
        .data()
        .chunks(classes)
        .zip(labels)
        .map(|(row, &y)| {
            let top = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut terms: Vec<f64> = row.iter().map(|&z| (z - top).exp()).collect();
            terms.sort_by(f64::total_cmp);
            careful_sum([top - row[y], careful_sum(terms).ln()])
        })
        .collect();
    careful_sum(rows) / labels.len() as f64
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| { let z: f64 = StandardNormal.sample(rng); scale * z }).collect::<Vec<f64>>();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn norm(xs: &[f64]) -> f64 {
    xs.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `‖a − b‖ / max(‖a‖ + ‖b‖, tiny)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / (norm(a) + norm(b)).max(1e-12)
}

/// Central differences of `f` with respect to every element of `x`.
pub fn numeric_grad(x: &mut [f64], eps: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + eps;
            let up = f(x);
            x[i] = orig - eps;
            let down = f(x);
            x[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Small randomly sized member of `family` with non-zero biases.
pub fn random_model(family: Family, rng: &mut ChaCha8Rng) -> ModelGraph {
    let widths: Vec<usize> = match family {
        Family::Conv => (0..rng.random_range(1..=3)).map(|_| rng.random_range(2..=6)).collect(),
        Family::Resnet => (0..rng.random_range(2..=3)).map(|_| rng.random_range(2..=5)).collect(),
        Family::Inception => (0..3 * rng.random_range(1..=2)).map(|_| rng.random_range(1..=4)).collect(),
    };
    let kernel = [3, 5][rng.random_range(0..2)];
    let classes = rng.random_range(2..=5);
    let spec = ArchitectureSpec {
        widths,
        kernel,
        ..ArchitectureSpec::default_for(family, [rng.random_range(1..=2), 8, 8], classes)
    };
    let mut model = init_weights(build_architecture(&spec).unwrap(), rng.random());
    for conv in model.conv_layers_mut() {
        let n = conv.filters();
        conv.bias = random_tensor(rng, &[n], 0.1);
    }
    model
}

pub const FAMILIES: [Family; 3] = [Family::Conv, Family::Resnet, Family::Inception];


/// Largest relative error between tape gradients and central differences of
/// `coeffs · f(inputs)` over every input.
pub fn op_grad_error(
    inputs: &[Tensor],
    seed: u64,
    f: impl Fn(&mut Tape, &[Var]) -> fedprune::Result<Var>,
) -> f64 {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eval = |ins: &[Tensor], coeffs: Option<&Tensor>| -> (f64, Tensor, Vec<Tensor>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().enumerate().map(|(i, t)| tape.param(i, t.clone())).collect();
        let out = f(&mut tape, &vars).unwrap();
        let value = tape.value(out).clone();
        match coeffs {
            None => (0.0, value, vec![]),
            Some(c) => {
                let loss = tape.dot(out, c.clone()).unwrap();
                let l = tape.value(loss).data()[0];
                let mut g = tape.backward(loss).unwrap();
                let grads = (0..ins.len()).map(|i| g.take(i).unwrap()).collect();
                (l, value, grads)
            }
        }
    };
    let (_, out, _) = eval(inputs, None);
    let coeffs = random_tensor(&mut rng, out.shape(), 1.0);
    let (_, _, analytic) = eval(inputs, Some(&coeffs));
    let mut worst: f64 = 0.0;
    for (i, g) in analytic.iter().enumerate() {
        let mut work: Vec<Tensor> = inputs.to_vec();
        let shape = inputs[i].shape().to_vec();
        let mut x = inputs[i].data().to_vec();
        let numeric = numeric_grad(&mut x, 1e-4, |xs| {
            work[i] = Tensor::new(shape.clone(), xs.to_vec()).unwrap();
            let (_, v, _) = eval(&work, None);
            v.data().iter().zip(coeffs.data()).map(|(a, b)| a * b).sum()
        });
        worst = worst.max(relative_error(g.data(), &numeric));
    }
    worst
}

/// Relative error of a model's parameter gradients against central differences of its loss.
///
/// Steps are 1e-4 except at coordinates whose probe interval straddles a kink.
pub fn model_grad_error(model: &ModelGraph, batch: &Tensor, labels: &[usize]) -> f64 {
    let (_, analytic) = model.loss_and_grads(batch, labels).unwrap();
    let loss = |m: &ModelGraph| fedprune::ops::cross_entropy(&m.forward(batch).unwrap(), labels).unwrap();
    let mut work = model.clone();
    let mut a_all = Vec::new();
    let mut n_all = Vec::new();
    for (slot, g) in analytic.iter().enumerate() {
        let mut x = model.params()[slot].data().to_vec();
        let mut f = |xs: &[f64]| {
            work.params_mut()[slot].data_mut().copy_from_slice(xs);
            loss(&work)
        };
        let coarse = numeric_grad(&mut x, 1e-4, &mut f);
        let half = numeric_grad(&mut x, 5e-5, &mut f);
        // A ReLU or max-pool switch inside the probe interval shows up as
        // disagreement between the two steps; such coordinates are re-probed finer.
        let numeric: Vec<f64> = coarse
            .iter()
            .zip(&half)
            .enumerate()
            .map(|(i, (&c, &h))| {
                if (c - h).abs() <= 1e-6 * c.abs().max(1.0) {
                    return c;
                }
                let orig = x[i];
                let mut probe = |d: f64| {
                    x[i] = orig + d;
                    let up = f(&x);
                    x[i] = orig - d;
                    let down = f(&x);
                    x[i] = orig;
                    (up - down) / (2.0 * d)
                };
                probe(1e-7)
            })
            .collect();
        work.params_mut()[slot].data_mut().copy_from_slice(model.params()[slot].data());
        a_all.extend_from_slice(g.data());
        n_all.extend(numeric);
    }
    relative_error(&a_all, &n_all)
}

/// Values spaced at least `gap` apart in random order, so kinks sit far from probes.
pub fn spaced_tensor(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0 + 0.5) * gap).collect();
    vals.shuffle(rng);
    Tensor::new(shape.to_vec(), vals).unwrap()
}

/// Exact weighted mean of every parameter, rounded once to f64.
pub fn fedavg_oracle(locals: &[(ModelGraph, usize)]) -> Vec<Vec<f64>> {
    use num_traits::ToPrimitive;
    let total = BigRational::from_integer(BigInt::from(locals.iter().map(|l| l.1).sum::<usize>()));
    let slots = locals[0].0.params().len();
    (0..slots)
        .map(|slot| {
            let len = locals[0].0.params()[slot].len();
            (0..len)
                .map(|i| {
                    let acc = locals.iter().fold(BigRational::zero(), |acc, (m, n)| {
                        acc + rational(m.params()[slot].data()[i]) * BigRational::from_integer(BigInt::from(*n))
                    });
                    (acc / &total).to_f64().unwrap()
                })
                .collect()
        })
        .collect()
}

/// Random aggregation case: 1..=6 perturbed copies of a random model with random sample counts.
pub fn random_fedavg_case(rng: &mut ChaCha8Rng) -> Vec<(ModelGraph, usize)> {
    let family = FAMILIES[rng.random_range(0..3)];
    let base = random_model(family, rng);
    let clients = rng.random_range(1..=6);
    (0..clients)
        .map(|_| {
            let mut m = base.clone();
            for p in m.params_mut() {
                let noise = random_tensor(rng, p.shape(), 0.3);
                p.data_mut().iter_mut().zip(noise.data()).for_each(|(a, b)| *a += b);
            }
            (m, rng.random_range(1..=500))
        })
        .collect()
}

pub fn max_abs_gap(model: &ModelGraph, expect: &[Vec<f64>]) -> f64 {
    model
        .params()
        .iter()
        .zip(expect)
        .flat_map(|(p, e)| p.data().iter().zip(e).map(|(a, b)| (a - b).abs()))
        .fold(0.0, f64::max)
}

#[derive(Clone, Copy, Debug)]
pub enum WeightDist {
    Gaussian,
    Uniform,
    HeavyTailed,
}

pub const DISTS: [WeightDist; 3] = [WeightDist::Gaussian, WeightDist::Uniform, WeightDist::HeavyTailed];

/// `[n, c, k, k]` weights from `dist`, rounded to f32 like everything on the wire.
pub fn random_layer_weights(rng: &mut ChaCha8Rng, n: usize, c: usize, k: usize, dist: WeightDist) -> Tensor {
    let len = n * c * k * k;
    let data: Vec<f64> = match dist {
        WeightDist::Gaussian => (0..len).map(|_| StandardNormal.sample(rng)).collect(),
        WeightDist::Uniform => (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
        WeightDist::HeavyTailed => {
            let t = rand_distr::StudentT::new(1.5).unwrap();
            (0..len).map(|_| t.sample(rng)).collect()
        }
    };
    let data = data.into_iter().map(|v: f64| v as f32 as f64).collect();
    Tensor::new(vec![n, c, k, k], data).unwrap()
}

/// Zeroes filter `idx` of the `layer`-th prunable conv, prunes exactly it,
/// and returns the zeroed model with its pruned counterpart.
pub fn zero_and_prune(model: &ModelGraph, layer: usize, idx: usize) -> (ModelGraph, ModelGraph) {
    let mut zeroed = model.clone();
    let name = {
        let mut convs: Vec<_> = zeroed.conv_layers_mut().into_iter().filter(|c| c.prunable).collect();
        let conv = &mut convs[layer];
        let per = conv.weights.len() / conv.filters();
        conv.weights.data_mut()[idx * per..(idx + 1) * per].fill(0.0);
        conv.bias.data_mut()[idx] = 0.0;
        conv.name.clone()
    };
    let mut plan = fedprune::pruning::PrunePlan::keep_all(&zeroed);
    let keep: Vec<usize> = plan.get(&name).unwrap().iter().copied().filter(|&i| i != idx).collect();
    plan.set(&name, keep);
    let pruned = fedprune::pruning::apply_plan(&zeroed, &plan).unwrap();
    (zeroed, pruned)
}
