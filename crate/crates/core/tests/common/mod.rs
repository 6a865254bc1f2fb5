//! Independent reference implementations shared by the integration tests and the
//! acceptance runner. Nothing here calls the library's numeric kernels.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use reid_forge::autodiff::{concat, Tape, Var};
use reid_forge::backbone::{BackboneConfig, BranchTag};
use reid_forge::head::HeadConfig;
use reid_forge::losses::{batch_hard, cross_entropy, pairwise_distances, smooth_targets, total_loss, triplet_loss, LossConfig};
use reid_forge::model::{ModelConfig, ReidModel};
use reid_forge::nn::{batch_norm, ibn, instance_norm, linear, pool, Ctx, Ibn, Mode, Module, NonLocal, Norm, PoolKind, SlotMut, TrainableMask};
use reid_forge::tensor::{Init, Tensor};

pub const FD_STEP: f64 = 1e-5;
pub const OP_TOL: f64 = 1e-5;
pub const E2E_TOL: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

pub fn gaussian(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::alloc(shape.to_vec(), Init::Gaussian { mean: 0.0, std: 1.0, seed }).unwrap()
}

/// Values in `[0.5, 2.5)`.
pub fn positive(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| r.random_range(0.5..2.5)).collect()).unwrap()
}

/// Gaussian values pushed at least 0.2 away from zero (kinks of relu / clamp).
pub fn off_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    gaussian(shape, seed).map(|v| v + 0.2f64.copysign(v))
}

/// Largest relative error between backward() and central differences of
/// `sum(f(inputs) * W)` for a fixed random `W`, over every input element. Each output
/// element is differenced before the contraction with `W`, so round-off scales with
/// the outputs rather than with the whole sum.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], seed: u64, f: F) -> f64
where
    F: for<'t> Fn(&[Var<'t, f64>]) -> Var<'t, f64>,
{
    let outputs = |xs: &[Tensor<f64>]| -> Vec<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
        f(&vars).value().data().to_vec()
    };
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let out = f(&vars);
    let w = gaussian(&out.shape(), seed ^ 0xabcd);
    let g = tape.backward(out.mul(tape.constant(w.clone())).unwrap().sum_all()).unwrap();
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| g.wrt(v).unwrap()).collect();
    let mut worst = 0.0f64;
    for (i, x) in inputs.iter().enumerate() {
        for j in 0..x.numel() {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] += FD_STEP;
            let up = outputs(&xs);
            xs[i].data_mut()[j] -= 2.0 * FD_STEP;
            let down = outputs(&xs);
            let numeric: f64 = up
                .iter()
                .zip(&down)
                .zip(w.data())
                .map(|((u, d), wk)| wk * (u - d) / (2.0 * FD_STEP))
                .sum();
            worst = worst.max(rel_err(analytic[i].data()[j], numeric));
        }
    }
    worst
}

fn norm_with_random_affine(name: &str, c: usize, seed: u64, batch: bool) -> Norm<f64> {
    let mut n = if batch { Norm::batch(name, c) } else { Norm::instance(name, c) };
    n.gamma.value = positive(&[c], seed);
    n.beta.value = gaussian(&[c], seed + 1);
    n
}

/// Names of the per-op gradient checks.
pub const OP_CASES: &[&str] = &[
    "add", "add_scalar_operand", "sub", "mul", "div", "neg", "relu", "exp", "log", "sqrt", "pow", "add_scalar",
    "mul_scalar", "clamp_min", "softplus", "sum_axes", "mean_axes", "max_axes", "sum_all", "mean_all", "broadcast_to",
    "reshape", "permute", "transpose", "slice", "gather", "concat", "matmul", "bmm", "conv2d", "softmax",
    "log_softmax", "linear", "batch_norm", "instance_norm", "ibn", "pool_avg", "pool_max", "pool_gem", "nonlocal",
    "pairwise_distances", "triplet_hard", "triplet_soft", "cross_entropy",
];

/// Worst relative error of one op case on one seeded random instance.
pub fn op_case(name: &str, seed: u64) -> f64 {
    let s = seed.wrapping_mul(7919);
    let mut r = ChaCha8Rng::seed_from_u64(s);
    let g = |shape: &[usize], k: u64| gaussian(shape, s + k);
    match name {
        "add" => gradcheck(&[g(&[3, 4], 1), g(&[3, 4], 2)], s, |v| v[0].add(v[1]).unwrap()),
        "add_scalar_operand" => gradcheck(&[g(&[3, 4], 1), g(&[1], 2)], s, |v| v[0].add(v[1]).unwrap().mul(v[1]).unwrap()),
        "sub" => gradcheck(&[g(&[3, 4], 1), g(&[3, 4], 2)], s, |v| v[0].sub(v[1]).unwrap()),
        "mul" => gradcheck(&[g(&[3, 4], 1), g(&[3, 4], 2)], s, |v| v[0].mul(v[1]).unwrap()),
        "div" => gradcheck(&[g(&[3, 4], 1), positive(&[3, 4], s + 2)], s, |v| v[0].div(v[1]).unwrap()),
        "neg" => gradcheck(&[g(&[5], 1)], s, |v| v[0].neg()),
        "relu" => gradcheck(&[off_zero(&[4, 4], s)], s, |v| v[0].relu()),
        "exp" => gradcheck(&[g(&[6], 1)], s, |v| v[0].exp()),
        "log" => gradcheck(&[positive(&[6], s)], s, |v| v[0].log().unwrap()),
        "sqrt" => gradcheck(&[positive(&[6], s)], s, |v| v[0].sqrt().unwrap()),
        "pow" => {
            let k = r.random_range(0.5..3.5);
            gradcheck(&[positive(&[6], s)], s, move |v| v[0].pow(k).unwrap())
        }
        "add_scalar" => gradcheck(&[g(&[6], 1)], s, |v| v[0].add_scalar(1.7).mul(v[0]).unwrap()),
        "mul_scalar" => gradcheck(&[g(&[6], 1)], s, |v| v[0].mul_scalar(-2.5)),
        "clamp_min" => gradcheck(&[off_zero(&[8], s)], s, |v| v[0].clamp_min(0.0)),
        "softplus" => gradcheck(&[g(&[8], 1).map(|x| 5.0 * x)], s, |v| v[0].softplus()),
        "sum_axes" => gradcheck(&[g(&[2, 3, 4], 1)], s, |v| v[0].sum(&[0, 2], false).unwrap()),
        "mean_axes" => gradcheck(&[g(&[2, 3, 4], 1)], s, |v| v[0].mean(&[1], true).unwrap()),
        "max_axes" => gradcheck(&[g(&[2, 3, 4], 1)], s, |v| v[0].max(&[2], false).unwrap()),
        "sum_all" => gradcheck(&[g(&[3, 3], 1)], s, |v| v[0].sum_all()),
        "mean_all" => gradcheck(&[g(&[3, 3], 1)], s, |v| v[0].mean_all().unwrap()),
        "broadcast_to" => gradcheck(&[g(&[1, 4], 1), g(&[3, 1], 2)], s, |v| {
            v[0].broadcast_to(&[3, 4]).unwrap().mul(v[1].broadcast_to(&[3, 4]).unwrap()).unwrap()
        }),
        "reshape" => gradcheck(&[g(&[2, 6], 1)], s, |v| v[0].reshape(&[3, 4]).unwrap().mul(v[0].reshape(&[3, 4]).unwrap()).unwrap()),
        "permute" => gradcheck(&[g(&[2, 3, 4], 1)], s, |v| v[0].permute(&[2, 0, 1]).unwrap()),
        "transpose" => gradcheck(&[g(&[2, 3, 4], 1)], s, |v| v[0].transpose(0, 2).unwrap()),
        "slice" => gradcheck(&[g(&[4, 5], 1)], s, |v| v[0].slice(1, 1..4).unwrap()),
        "gather" => {
            let idx: Vec<usize> = (0..9).map(|_| r.random_range(0..12)).collect();
            gradcheck(&[g(&[3, 4], 1)], s, move |v| v[0].gather(&idx).unwrap())
        }
        "concat" => gradcheck(&[g(&[2, 3], 1), g(&[2, 2], 2)], s, |v| concat(&[v[0], v[1], v[0]], 1).unwrap()),
        "matmul" => gradcheck(&[g(&[3, 4], 1), g(&[4, 5], 2)], s, |v| v[0].matmul(v[1]).unwrap()),
        "bmm" => gradcheck(&[g(&[2, 3, 4], 1), g(&[2, 4, 2], 2)], s, |v| v[0].bmm(v[1]).unwrap()),
        "conv2d" => {
            let stride = r.random_range(1..=2);
            let k = if r.random_bool(0.5) { 3 } else { 1 };
            let pad = r.random_range(0..=k / 2 + 1).min(k);
            gradcheck(&[g(&[2, 2, 5, 5], 1), g(&[3, 2, k, k], 2), g(&[3], 3)], s, move |v| {
                v[0].conv2d(v[1], Some(v[2]), stride, pad).unwrap()
            })
        }
        "softmax" => gradcheck(&[g(&[3, 5], 1)], s, |v| v[0].softmax(1).unwrap()),
        "log_softmax" => gradcheck(&[g(&[3, 5], 1)], s, |v| v[0].log_softmax(1).unwrap()),
        "linear" => gradcheck(&[g(&[3, 4], 1), g(&[4, 2], 2), g(&[2], 3)], s, |v| linear(v[0], v[1], Some(v[2])).unwrap()),
        "batch_norm" => {
            let n = norm_with_random_affine("bn", 3, s, true);
            gradcheck(&[g(&[4, 3, 2, 2], 1)], s, move |v| {
                let ctx = Ctx::new(v[0].tape(), Mode::Train, TrainableMask::all());
                batch_norm(&ctx, v[0], &n).unwrap()
            })
        }
        "instance_norm" => {
            let n = norm_with_random_affine("in", 3, s, false);
            gradcheck(&[g(&[2, 3, 3, 2], 1)], s, move |v| {
                let ctx = Ctx::new(v[0].tape(), Mode::Train, TrainableMask::all());
                instance_norm(&ctx, v[0], &n).unwrap()
            })
        }
        "ibn" => {
            let mut n = Ibn::new("ibn", 4, 2).unwrap();
            n.instance = norm_with_random_affine("ibn.in", 2, s, false);
            n.batch = norm_with_random_affine("ibn.bn", 2, s + 5, true);
            gradcheck(&[g(&[3, 4, 2, 2], 1)], s, move |v| {
                let ctx = Ctx::new(v[0].tape(), Mode::Train, TrainableMask::all());
                ibn(&ctx, v[0], &n).unwrap()
            })
        }
        "pool_avg" => gradcheck(&[g(&[2, 3, 3, 2], 1)], s, |v| pool(v[0], PoolKind::Avg, None).unwrap()),
        "pool_max" => gradcheck(&[g(&[2, 3, 3, 2], 1)], s, |v| pool(v[0], PoolKind::Max, None).unwrap()),
        "pool_gem" => {
            let p = Tensor::from_vec([1], vec![r.random_range(1.5..4.0)]).unwrap();
            gradcheck(&[positive(&[2, 3, 2, 2], s), p], s, |v| pool(v[0], PoolKind::Gem, Some(v[1])).unwrap())
        }
        "nonlocal" => {
            let mut nl = NonLocal::new("nl", 4, &mut ChaCha8Rng::seed_from_u64(s)).unwrap();
            nl.out.weight.value = g(&[4, 2, 1, 1], 7);
            nl.out.bias.as_mut().unwrap().value = g(&[4], 8);
            gradcheck(&[g(&[1, 4, 2, 3], 1)], s, move |v| {
                let ctx = Ctx::new(v[0].tape(), Mode::Train, TrainableMask::all());
                nl.forward(&ctx, v[0]).unwrap()
            })
        }
        "pairwise_distances" => gradcheck(&[g(&[6, 4], 1)], s, |v| pairwise_distances(v[0]).unwrap()),
        "triplet_hard" | "triplet_soft" => {
            let cfg = LossConfig { soft_margin: name == "triplet_soft", ..LossConfig::default() };
            let labels = vec![0, 0, 1, 1, 2, 2];
            gradcheck(&[g(&[6, 4], 1)], s, move |v| {
                let mr = batch_hard(pairwise_distances(v[0]).unwrap(), &labels).unwrap();
                triplet_loss(&mr, &cfg).unwrap()
            })
        }
        "cross_entropy" => {
            let labels: Vec<usize> = (0..4).map(|_| r.random_range(0..3)).collect();
            let q: Tensor<f64> = smooth_targets(&labels, 3, 0.1).unwrap();
            gradcheck(&[g(&[4, 3], 1)], s, move |v| cross_entropy(v[0], &q).unwrap())
        }
        other => panic!("unknown op case `{other}`"),
    }
}

/// Small three-branch model exercising IBN, non-local blocks, GeM and BNNeck.
pub fn mini_model_config() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            base_channels: 4,
            last_stride: 1,
            use_ibn: true,
            use_nonlocal: true,
            branches: vec![BranchTag::Global, BranchTag::Parts2, BranchTag::Parts3],
            ..BackboneConfig::default()
        },
        head: HeadConfig { embed_dim: 6, pooling: PoolKind::Gem, ..HeadConfig::default() },
    }
}

fn model_loss(model: &ReidModel<f64>, x: &Tensor<f64>, labels: &[usize]) -> (f64, std::collections::BTreeMap<String, Tensor<f64>>) {
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, Mode::Train, TrainableMask::all());
    let out = model.forward(&ctx, ctx.input(x.clone())).unwrap();
    let (loss, report) = total_loss(&out, labels, &LossConfig::default()).unwrap();
    let grads = tape.backward(loss).unwrap();
    (report.total, grads.into_named())
}

fn bump(model: &mut ReidModel<f64>, name: &str, j: usize, delta: f64) {
    model.visit_mut(&mut |s| {
        if let SlotMut::Param(p) = s {
            if p.name == name {
                p.value.data_mut()[j] += delta;
            }
        }
    });
}

/// Worst relative error over `n` randomly chosen trainable scalars of the full
/// model loss (backbone, head, triplet and smoothed cross-entropy).
pub fn end_to_end_gradcheck(n: usize, seed: u64) -> (f64, Vec<(String, usize, f64, f64)>) {
    let mut model = ReidModel::<f64>::new(&mini_model_config(), Some(3), seed).unwrap();
    // Non-zero output projections so gradients reach the attention weights.
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x55);
    model.visit_mut(&mut |s| {
        if let SlotMut::Param(p) = s {
            if p.name.contains("nonlocal.out") {
                for v in p.value.data_mut() {
                    *v = 0.1 * r.random_range(-1.0..1.0);
                }
            }
        }
    });
    let labels = vec![0, 0, 1, 1, 2, 2];
    let x = gaussian(&[6, 3, 48, 48], seed + 3);
    let (_, grads) = model_loss(&model, &x, &labels);
    let candidates: Vec<(String, usize)> = model
        .params()
        .iter()
        .filter(|p| p.trainable)
        .map(|p| (p.name.clone(), p.numel()))
        .collect();
    let mut picks = Vec::new();
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    while picks.len() < n {
        let (name, numel) = &candidates[r.random_range(0..candidates.len())];
        let j = r.random_range(0..*numel);
        if !picks.contains(&(name.clone(), j)) {
            picks.push((name.clone(), j));
        }
    }
    let mut rows = Vec::new();
    let mut worst = 0.0f64;
    for (name, j) in picks {
        bump(&mut model, &name, j, FD_STEP);
        let up = model_loss(&model, &x, &labels).0;
        bump(&mut model, &name, j, -2.0 * FD_STEP);
        let down = model_loss(&model, &x, &labels).0;
        bump(&mut model, &name, j, FD_STEP);
        let numeric = (up - down) / (2.0 * FD_STEP);
        let analytic = grads.get(&name).map_or(0.0, |g| g.data()[j]);
        worst = worst.max(rel_err(analytic, numeric));
        rows.push((name, j, analytic, numeric));
    }
    (worst, rows)
}

/// Direct-summation cross-correlation `[N,C,H,W] * [F,C,k,k]`.
pub fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, stride: usize, pad: usize) -> Tensor<f64> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (f, k) = (w.shape()[0], w.shape()[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * f * ho * wo];
    for ni in 0..n {
        for fi in 0..f {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.map_or(0.0, |b| b.data()[fi]);
                    for ci in 0..c {
                        for i in 0..k {
                            for j in 0..k {
                                let y = (oy * stride + i) as isize - pad as isize;
                                let xx = (ox * stride + j) as isize - pad as isize;
                                if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < wd {
                                    acc += x.get(&[ni, ci, y as usize, xx as usize]) * w.get(&[fi, ci, i, j]);
                                }
                            }
                        }
                    }
                    out[((ni * f + fi) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Tensor::from_vec([n, f, ho, wo], out).unwrap()
}

/// Gradients of `sum(conv(x, w) * g)` with respect to `x` and `w`, by direct summation.
pub fn naive_conv_grads(x: &Tensor<f64>, w: &Tensor<f64>, g: &Tensor<f64>, stride: usize, pad: usize) -> (Tensor<f64>, Tensor<f64>) {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (f, k) = (w.shape()[0], w.shape()[2]);
    let (ho, wo) = (g.shape()[2], g.shape()[3]);
    let mut dx = vec![0.0; x.numel()];
    let mut dw = vec![0.0; w.numel()];
    for ni in 0..n {
        for fi in 0..f {
            for oy in 0..ho {
                for ox in 0..wo {
                    let go = g.get(&[ni, fi, oy, ox]);
                    for ci in 0..c {
                        for i in 0..k {
                            for j in 0..k {
                                let y = (oy * stride + i) as isize - pad as isize;
                                let xx = (ox * stride + j) as isize - pad as isize;
                                if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < wd {
                                    let (y, xx) = (y as usize, xx as usize);
                                    dx[((ni * c + ci) * h + y) * wd + xx] += go * w.get(&[fi, ci, i, j]);
                                    dw[((fi * c + ci) * k + i) * k + j] += go * x.get(&[ni, ci, y, xx]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (Tensor::from_vec(x.shape().to_vec(), dx).unwrap(), Tensor::from_vec(w.shape().to_vec(), dw).unwrap())
}

/// Per-position non-local block on `[1,C,H,W]`: 1x1 projections, scaled dot-product
/// softmax over all positions, output projection and residual.
pub fn naive_nonlocal(nl: &NonLocal<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    let (c, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let ci = c / 2;
    let hw = h * w;
    let px = |p: usize, ch: usize| x.get(&[0, ch, p / w, p % w]);
    let proj = |conv: &reid_forge::nn::Conv<f64>, p: usize, o: usize, cin: usize, src: &dyn Fn(usize, usize) -> f64| {
        let mut acc = conv.bias.as_ref().map_or(0.0, |b| b.value.data()[o]);
        for k in 0..cin {
            acc += conv.weight.value.get(&[o, k, 0, 0]) * src(p, k);
        }
        acc
    };
    let theta: Vec<Vec<f64>> = (0..hw).map(|p| (0..ci).map(|o| proj(&nl.theta, p, o, c, &px)).collect()).collect();
    let phi: Vec<Vec<f64>> = (0..hw).map(|p| (0..ci).map(|o| proj(&nl.phi, p, o, c, &px)).collect()).collect();
    let gv: Vec<Vec<f64>> = (0..hw).map(|p| (0..ci).map(|o| proj(&nl.g, p, o, c, &px)).collect()).collect();
    let scale = 1.0 / (ci as f64).sqrt();
    let mut y = vec![vec![0.0; ci]; hw];
    for i in 0..hw {
        let logits: Vec<f64> = (0..hw).map(|j| scale * (0..ci).map(|k| theta[i][k] * phi[j][k]).sum::<f64>()).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for j in 0..hw {
            for k in 0..ci {
                y[i][k] += e[j] / z * gv[j][k];
            }
        }
    }
    let ysrc = |p: usize, k: usize| y[p][k];
    let mut out = vec![0.0; c * hw];
    for p in 0..hw {
        for o in 0..c {
            out[o * hw + p] = proj(&nl.out, p, o, ci, &ysrc) + px(p, o);
        }
    }
    Tensor::from_vec([1, c, h, w], out).unwrap()
}

/// Naive Euclidean distance matrix.
pub fn naive_pairwise(e: &Tensor<f64>) -> Vec<Vec<f64>> {
    let (n, d) = (e.shape()[0], e.shape()[1]);
    (0..n)
        .map(|i| (0..n).map(|j| (0..d).map(|k| (e.get(&[i, k]) - e.get(&[j, k])).powi(2)).sum::<f64>().sqrt()).collect())
        .collect()
}

/// For each anchor, the `(positive, negative)` pair maximizing `d(a,p) - d(a,n)` over
/// every valid triplet, scanning `p` then `n` in ascending order (first maximum wins).
pub fn exhaustive_mining(dist: &[Vec<f64>], labels: &[usize]) -> Vec<(usize, usize)> {
    let n = labels.len();
    (0..n)
        .map(|a| {
            let mut best: Option<(f64, f64, usize, usize)> = None;
            for p in 0..n {
                if p == a || labels[p] != labels[a] {
                    continue;
                }
                for q in 0..n {
                    if labels[q] == labels[a] {
                        continue;
                    }
                    let (dp, dn) = (dist[a][p], dist[a][q]);
                    let better = match best {
                        None => true,
                        // Compare positives first, then negatives, so ties resolve per side.
                        Some((bp, bn, _, _)) => dp > bp || (dp == bp && dn < bn),
                    };
                    if better {
                        best = Some((dp, dn, p, q));
                    }
                }
            }
            let (_, _, p, q) = best.expect("anchor without a valid triplet");
            (p, q)
        })
        .collect()
}

/// Rank of every gallery item for one query: 1 + number of items strictly before it
/// (closer, or equally close with a lower index).
pub fn brute_ranks(q: &[f64], gallery: &[Vec<f64>]) -> Vec<usize> {
    let d: Vec<f64> = gallery.iter().map(|g| q.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum()).collect();
    (0..d.len())
        .map(|i| 1 + (0..d.len()).filter(|&j| d[j] < d[i] || (d[j] == d[i] && j < i)).count())
        .collect()
}

/// `(rank-k hit counts, retained queries, per-query AP)` by membership scans.
pub fn brute_metrics(
    queries: &[Vec<f64>],
    qids: &[usize],
    gallery: &[Vec<f64>],
    gids: &[usize],
    ks: &[usize],
) -> (Vec<usize>, usize, Vec<Option<f64>>) {
    let mut hits = vec![0; ks.len()];
    let mut kept = 0;
    let mut aps = Vec::new();
    for (q, &qid) in queries.iter().zip(qids) {
        let ranks = brute_ranks(q, gallery);
        let rel: Vec<usize> = (0..gallery.len()).filter(|&g| gids[g] == qid).map(|g| ranks[g]).collect();
        if rel.is_empty() {
            aps.push(None);
            continue;
        }
        kept += 1;
        for (h, &k) in hits.iter_mut().zip(ks) {
            if rel.iter().any(|&r| r <= k) {
                *h += 1;
            }
        }
        let ap = rel
            .iter()
            .map(|&r| rel.iter().filter(|&&o| o <= r).count() as f64 / r as f64)
            .sum::<f64>()
            / rel.len() as f64;
        aps.push(Some(ap));
    }
    (hits, kept, aps)
}

/// Reference Adam on scalars with decoupled decay.
pub fn scalar_adam(theta: f64, grads: &[f64], lr: f64, b1: f64, b2: f64, eps: f64, wd: f64) -> f64 {
    let (mut th, mut m, mut v) = (theta, 0.0, 0.0);
    for (t, &g) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        th -= lr * mh / (vh.sqrt() + eps);
        th -= lr * wd * th;
    }
    th
}

/// Closed-form parameter count of the default backbone (basic blocks, batch norm
/// everywhere, global branch only) plus nothing else.
pub fn backbone_param_formula(blocks: [usize; 4], base: usize, branches: usize) -> usize {
    let ch = [base, 2 * base, 4 * base, 8 * base];
    let conv = |ci: usize, co: usize, k: usize| ci * co * k * k;
    let bn = |c: usize| 2 * c;
    let block = |ci: usize, co: usize, down: bool| {
        conv(ci, co, 3) + bn(co) + conv(co, co, 3) + bn(co) + if down { conv(ci, co, 1) + bn(co) } else { 0 }
    };
    let stage = |n: usize, ci: usize, co: usize, stride: usize| {
        block(ci, co, stride != 1 || ci != co) + (n - 1) * block(co, co, false)
    };
    let mut total = conv(3, ch[0], 3) + bn(ch[0]);
    total += stage(blocks[0], ch[0], ch[0], 1);
    total += stage(blocks[1], ch[0], ch[1], 2);
    total += stage(blocks[2], ch[1], ch[2], 2);
    total + branches * stage(blocks[3], ch[2], ch[3], 2)
}

/// Random P=4, K=4 batch; every other instance uses small integer distances so ties occur.
pub fn pk_distances(seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..16).map(|i| i / 4).collect();
    let mut d = vec![vec![0.0; 16]; 16];
    for i in 0..16 {
        for j in i + 1..16 {
            let v = if seed.is_multiple_of(2) { r.random_range(0.0..4.0) } else { r.random_range(0..4) as f64 };
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    (d, labels)
}

/// Random retrieval instance (at most 20 queries and 50 gallery items); odd seeds use
/// small integer coordinates so distances tie.
pub fn random_retrieval(seed: u64) -> (Vec<Vec<f64>>, Vec<usize>, Vec<Vec<f64>>, Vec<usize>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let (nq, ng, dim, ids) = (r.random_range(1..=20), r.random_range(1..=50), r.random_range(1..=6), r.random_range(2..=8));
    let integer = seed % 2 == 1;
    let vec_of = |r: &mut ChaCha8Rng| -> Vec<f64> {
        (0..dim).map(|_| if integer { r.random_range(0..3) as f64 } else { r.random_range(-1.0..1.0) }).collect()
    };
    let q: Vec<Vec<f64>> = (0..nq).map(|_| vec_of(&mut r)).collect();
    let g: Vec<Vec<f64>> = (0..ng).map(|_| vec_of(&mut r)).collect();
    let qids = (0..nq).map(|_| r.random_range(0..ids)).collect();
    let gids = (0..ng).map(|_| r.random_range(0..ids)).collect();
    (q, qids, g, gids)
}

pub fn to_tensor(rows: &[Vec<f64>]) -> Tensor<f64> {
    Tensor::from_vec([rows.len(), rows[0].len()], rows.iter().flatten().copied().collect()).unwrap()
}
