mod common;

use common::{gradcheck, model_check, random_demo, random_tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use teamtraj::autodiff::Graph;
use teamtraj::spatial::{encode_frame_var, BoundSpatial, SpatialOptions, SpatialParams};
use teamtraj::tcn::{tcn_forward_var, TcnConfig, TcnParams};

const TOL: f64 = 1e-5;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Sum of `x * c` with a fixed random `c`, so every output element carries
/// a distinct weight into the loss.
fn weighted_sum(g: &mut Graph, x: teamtraj::autodiff::Var, seed: u64) -> teamtraj::autodiff::Var {
    let c = random_tensor(g.shape(x), &mut rng(seed));
    let y = g.mul_const(x, &c).unwrap();
    g.sum_all(y)
}

#[test]
fn matmul_gradient() {
    let mut r = rng(1);
    let params = [random_tensor(&[3, 4], &mut r), random_tensor(&[4, 2], &mut r)];
    let err = gradcheck(&params, &|g, v| {
        let y = g.matmul(v[0], v[1]).unwrap();
        g.sum_all(y)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn elementwise_gradients() {
    let mut r = rng(2);
    let params = [random_tensor(&[2, 3], &mut r), random_tensor(&[2, 3], &mut r)];
    let err = gradcheck(&params, &|g, v| {
        let s = g.add(v[0], v[1]).unwrap();
        let d = g.sub(s, v[1]).unwrap();
        let m = g.mul(d, v[1]).unwrap();
        let t = g.tanh(m);
        let sc = g.scale(t, 1.7);
        weighted_sum(g, sc, 9)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn activation_gradients_away_from_kink() {
    let mut r = rng(3);
    let mut x = random_tensor(&[3, 5], &mut r);
    for v in x.data_mut() {
        if v.abs() < 1e-3 {
            *v = 0.5;
        }
    }
    let err = gradcheck(&[x], &|g, v| {
        let a = g.leaky_relu(v[0], 0.2);
        let b = g.relu(v[0]);
        let s = g.add(a, b).unwrap();
        weighted_sum(g, s, 4)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn softmax_and_outer_sum_gradients() {
    let mut r = rng(4);
    let params = [random_tensor(&[4], &mut r), random_tensor(&[4], &mut r)];
    let err = gradcheck(&params, &|g, v| {
        let e = g.outer_sum(v[0], v[1]).unwrap();
        let e = g.leaky_relu(e, 0.2);
        let a = g.softmax(e).unwrap();
        weighted_sum(g, a, 5)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn shape_op_gradients() {
    let mut r = rng(5);
    let params = [random_tensor(&[2, 3], &mut r), random_tensor(&[2, 3], &mut r), random_tensor(&[2], &mut r)];
    let err = gradcheck(&params, &|g, v| {
        let c0 = g.concat(&[v[0], v[1]], 0).unwrap();
        let c1 = g.concat(&[v[0], v[1]], 1).unwrap();
        let t = g.transpose(c1).unwrap();
        let n = g.narrow(t, 1, 3).unwrap();
        let rs = g.reshape(t, &[4, 3]).unwrap();
        let p = g.mul(rs, c0).unwrap();
        let s0 = g.sum_axis(p, 0).unwrap();
        let s1 = g.sum_axis(p, 1).unwrap();
        let b = g.add_row_bias(v[0], v[2]).unwrap();
        let l0 = weighted_sum(g, s0, 6);
        let l1 = weighted_sum(g, s1, 7);
        let l2 = weighted_sum(g, b, 8);
        let l3 = weighted_sum(g, n, 9);
        let l = g.add(l0, l1).unwrap();
        let l = g.add(l, l2).unwrap();
        g.add(l, l3).unwrap()
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn conv_and_weight_norm_gradients() {
    let mut r = rng(6);
    let params = [
        random_tensor(&[2, 9], &mut r),
        random_tensor(&[3, 2, 3], &mut r),
        random_tensor(&[3], &mut r),
    ];
    for dilation in 1..=3 {
        let err = gradcheck(&params, &|g, v| {
            let k = g.weight_norm(v[1], v[2]).unwrap();
            let y = g.conv1d_causal(v[0], k, dilation).unwrap();
            weighted_sum(g, y, 10)
        });
        assert!(err < TOL, "dilation {dilation}: {err}");
    }
}

#[test]
fn mse_and_dropout_gradients() {
    let mut r = rng(7);
    let params = [random_tensor(&[4, 5], &mut r), random_tensor(&[4, 5], &mut r)];
    let err = gradcheck(&params, &|g, v| {
        let d = g.dropout(v[0], 0.3, true, &mut rng(99)).unwrap();
        g.mse(d, v[1]).unwrap()
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn spatial_encoder_gradient() {
    let mut r = rng(8);
    let p = SpatialParams::init(2, 4, &mut r);
    let frame = random_tensor(&[5, 2], &mut r);
    let opts = SpatialOptions::default();
    let err = gradcheck(&[p.w.clone(), p.a.clone()], &|g, v| {
        let bound = BoundSpatial::new(g, &SpatialParams { w: v[0], a: v[1] }).unwrap();
        let h = g.constant(frame.clone());
        let (pooled, _) = encode_frame_var(g, h, &bound, &opts).unwrap();
        weighted_sum(g, pooled, 11)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn tcn_gradient_wrt_input_and_weights() {
    let mut r = rng(9);
    let cfg = TcnConfig {
        levels: 2,
        kernel_size: 2,
        channels: 3,
        dropout: 0.2,
    };
    let params = TcnParams::init(4, &cfg, &mut r);
    let input = random_tensor(&[4, 7], &mut r);
    let mut flat = vec![input];
    params.for_each("tcn", &mut |_, t| flat.push(t.clone()));
    let err = gradcheck(&flat, &|g, v| {
        let mut i = 1;
        let bound = params.map(|_| {
            i += 1;
            v[i - 1]
        });
        let y = tcn_forward_var(g, v[0], &bound, &cfg, true, &mut rng(3)).unwrap();
        weighted_sum(g, y, 12)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn full_model_gradient() {
    for seed in 0..2 {
        let demo = random_demo("g", 3, 6, &mut rng(100 + seed));
        let err = model_check::worst_error(model_check::small_config(seed), &demo);
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn full_model_gradient_variants() {
    let demo = random_demo("g", 3, 6, &mut rng(200));
    let mut masked = model_check::small_config(3);
    masked.modeled_agents = Some(vec![0, 2]);
    masked.spatial.velocity_features = true;
    assert!(model_check::worst_error(masked, &demo) < TOL);

    let mut free = model_check::small_config(4);
    free.teacher_forcing = false;
    free.observed = 3;
    assert!(model_check::worst_error(free, &demo) < TOL);
}
