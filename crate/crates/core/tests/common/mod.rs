#![allow(dead_code, clippy::needless_range_loop)]

use rand::Rng;
use teamtraj::autodiff::{Graph, Var};
use teamtraj::data::{Demonstration, FrameSnapshot};
use teamtraj::spatial::{Activation, Aggregation, SpatialOptions, SpatialParams};
use teamtraj::Tensor;

pub fn random_frame(k: usize, rng: &mut impl Rng) -> FrameSnapshot {
    let pts: Vec<[f64; 2]> = (0..k)
        .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
        .collect();
    FrameSnapshot::from_xy(&pts)
}

pub fn random_demo(id: &str, k: usize, t: usize, rng: &mut impl Rng) -> Demonstration {
    Demonstration::new(id, (0..t).map(|_| random_frame(k, rng)).collect(), 5.0)
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::uniform(shape, 1.0, rng)
}

/// Straight-line graph attention: scores, row softmax, mixing, activation
/// and sum pooling written out as loops over agents.
pub fn gat_oracle(
    frame: &FrameSnapshot,
    params: &SpatialParams<Tensor>,
    opts: &SpatialOptions,
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let k = frame.num_agents();
    let w = &params.w;
    let (d_z, d_in) = (w.shape()[0], w.shape()[1]);
    assert_eq!(d_in, 2);
    let a = params.a.data();
    let z: Vec<Vec<f64>> = frame
        .states
        .iter()
        .map(|s| {
            (0..d_z)
                .map(|r| w.at2(r, 0) * s.x + w.at2(r, 1) * s.y)
                .collect()
        })
        .collect();
    let mut alpha = vec![vec![0.0; k]; k];
    for i in 0..k {
        if opts.aggregation == Aggregation::Uniform {
            alpha[i] = vec![1.0 / k as f64; k];
            continue;
        }
        let mut e = vec![0.0; k];
        for j in 0..k {
            let mut s = 0.0;
            for r in 0..d_z {
                s += a[r] * z[i][r] + a[d_z + r] * z[j][r];
            }
            e[j] = if s >= 0.0 { s } else { opts.leaky_slope * s };
        }
        let m = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = e.iter().map(|v| (v - m).exp()).sum();
        for j in 0..k {
            alpha[i][j] = (e[j] - m).exp() / total;
        }
    }
    let mut pooled = vec![0.0; d_z];
    for i in 0..k {
        for r in 0..d_z {
            let mut h = 0.0;
            for j in 0..k {
                h += alpha[i][j] * z[j][r];
            }
            pooled[r] += match opts.activation {
                Activation::Relu => h.max(0.0),
                Activation::Tanh => h.tanh(),
                Activation::Identity => h,
            };
        }
    }
    (pooled, alpha)
}

/// Direct evaluation of `y[o][s] = sum_c sum_i k[o][c][i] * x[c][s - d*i]`
/// with zeros before the start of the sequence.
pub fn conv_oracle(input: &Tensor, kernel: &Tensor, dilation: usize) -> Tensor {
    let (c_in, len) = (input.shape()[0], input.shape()[1]);
    let (c_out, f) = (kernel.shape()[0], kernel.shape()[2]);
    let x = |c: usize, p: isize| -> f64 {
        if p < 0 {
            0.0
        } else {
            input.data()[c * len + p as usize]
        }
    };
    let mut out = vec![0.0; c_out * len];
    for o in 0..c_out {
        for s in 0..len {
            let mut acc = 0.0;
            for c in 0..c_in {
                for i in 0..f {
                    let p = s as isize - (dilation * i) as isize;
                    if p < 0 {
                        continue;
                    }
                    acc += kernel.data()[(o * c_in + c) * f + i] * x(c, p);
                }
            }
            out[o * len + s] = acc;
        }
    }
    Tensor::matrix(c_out, len, out).unwrap()
}

/// Norm-wise relative error `|a - n| / max(|a|, |n|)`; zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = scale(analytic).max(scale(numeric));
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}

pub const FD_STEP: f64 = 1e-6;

/// Central differences of `f` with respect to every element of `params[idx]`.
pub fn numeric_gradient(
    params: &mut [Tensor],
    idx: usize,
    f: &mut dyn FnMut(&[Tensor]) -> f64,
) -> Vec<f64> {
    (0..params[idx].len())
        .map(|e| {
            let orig = params[idx].data()[e];
            params[idx].data_mut()[e] = orig + FD_STEP;
            let up = f(params);
            params[idx].data_mut()[e] = orig - FD_STEP;
            let down = f(params);
            params[idx].data_mut()[e] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Worst per-tensor relative error between tape gradients of `build` and
/// central differences.
pub fn gradcheck(params: &[Tensor], build: &dyn Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = build(&mut g, &vars);
    let grads = g.backward(loss).unwrap();
    let mut eval = |ps: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.param(p.clone())).collect();
        let out = build(&mut g, &vars);
        g.value(out).item()
    };
    let mut work = params.to_vec();
    (0..params.len())
        .map(|i| {
            let analytic = grads.get_or_zeros(vars[i]);
            let numeric = numeric_gradient(&mut work, i, &mut eval);
            relative_error(analytic.data(), &numeric)
        })
        .fold(0.0, f64::max)
}

pub mod model_check {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use teamtraj::model::{ModelConfig, TrainedModel};
    use teamtraj::tcn::TcnConfig;

    /// Small end-to-end setting: `d_z = 4`, `K = 3`, `T = 6`, one TCN level.
    pub fn small_config(seed: u64) -> ModelConfig {
        ModelConfig {
            agents: 3,
            embed_dim: 4,
            tcn: TcnConfig {
                levels: 1,
                kernel_size: 2,
                channels: 3,
                dropout: 0.1,
            },
            seed,
            ..ModelConfig::default()
        }
    }

    fn set_element(model: &mut TrainedModel, tensor: usize, element: usize, value: f64) {
        let mut i = 0;
        model.params.for_each_mut(|_, t| {
            if i == tensor {
                t.data_mut()[element] = value;
            }
            i += 1;
        });
    }

    /// Worst per-tensor relative error of the full training loss gradient,
    /// with dropout active under a fixed mask stream. Biases are drawn at
    /// random: zero biases on an all-zero input column put ReLUs exactly on
    /// their kink, where one-sided slopes disagree.
    pub fn worst_error(config: ModelConfig, demo: &Demonstration) -> f64 {
        let seed = config.seed;
        let mut model = TrainedModel::init(config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
        model.params.for_each_mut(|name, t| {
            if name.ends_with("bias") {
                *t = Tensor::uniform(t.shape(), 0.1, &mut rng);
            }
        });
        let (_, grads) = model
            .loss_and_grad(demo, true, &mut ChaCha8Rng::seed_from_u64(seed))
            .unwrap();
        let mut analytic = Vec::new();
        grads.for_each(|name, t| analytic.push((name, t.data().to_vec())));
        let mut shapes = Vec::new();
        model.params.for_each(|_, t| shapes.push(t.data().to_vec()));
        let mut worst: f64 = 0.0;
        for (idx, values) in shapes.iter().enumerate() {
            let mut numeric = Vec::with_capacity(values.len());
            for (e, &orig) in values.iter().enumerate() {
                let mut loss_at = |v: f64| {
                    set_element(&mut model, idx, e, v);
                    let l = model
                        .forward_loss(demo, true, &mut ChaCha8Rng::seed_from_u64(seed))
                        .unwrap();
                    set_element(&mut model, idx, e, orig);
                    l
                };
                let up = loss_at(orig + FD_STEP);
                let down = loss_at(orig - FD_STEP);
                numeric.push((up - down) / (2.0 * FD_STEP));
            }
            let err = relative_error(&analytic[idx].1, &numeric);
            if err >= 1e-5 {
                eprintln!("{}: relative error {err:e}", analytic[idx].0);
            }
            worst = worst.max(err);
        }
        worst
    }
}
