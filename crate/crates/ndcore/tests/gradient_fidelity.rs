//! Every layer kind: analytic gradients vs central finite differences at
//! 64-bit, h = 1e-4, relative error < 1e-3, on five seeds.

use ndcore::gradcheck::{check_parameter_gradients, finite_difference_gradient, relative_error};
use ndcore::layers::{Conv1d, Conv2d, GroupNorm, Linear};
use ndcore::{AdamConfig, OptimizerState, ParameterTree, Result, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-4;
const TOL: f64 = 1e-3;
const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

type Build = dyn Fn(&mut Tape<f64>, &ParameterTree<f64>, Var) -> Result<Var>;

/// loss = sum(probe ⊙ layer(x)) so the upstream gradient is non-uniform.
fn loss_on(tree: &ParameterTree<f64>, x: &Tensor<f64>, probe_seed: u64, build: &Build) -> Result<(f64, Tape<f64>, Var, Var)> {
    let mut tape = Tape::new();
    let xv = tape.input_grad(x.clone());
    let y = build(&mut tape, tree, xv)?;
    let mut rng = ChaCha8Rng::seed_from_u64(probe_seed);
    let probe = tape.input(Tensor::randn(tape.shape(y), &mut rng));
    let prod = tape.mul(y, probe)?;
    let loss = tape.sum(prod);
    Ok((tape.value(loss).data()[0], tape, xv, loss))
}

fn check_layer(label: &str, input_shape: &[usize], init: impl Fn(&mut ParameterTree<f64>, &mut ChaCha8Rng), build: &Build) {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tree = ParameterTree::new();
        init(&mut tree, &mut rng);
        let x = Tensor::randn(input_shape, &mut rng);
        let probe_seed = seed + 1000;
        let (_, tape, xv, loss) = loss_on(&tree, &x, probe_seed, build).unwrap();
        let grads = tape.backward(loss).unwrap();

        let errs = check_parameter_gradients(
            &tree,
            &grads.param_grads(),
            |t| Ok(loss_on(t, &x, probe_seed, build)?.0),
            H,
            64,
            seed,
        )
        .unwrap();
        for (name, e) in &errs {
            assert!(*e < TOL, "{label} seed {seed}: parameter {name} rel err {e:e}");
        }

        // input gradient on a subset of coordinates
        let gx = grads.get(xv).unwrap().clone();
        let n = x.len().min(48);
        let numeric = finite_difference_gradient(
            |p| {
                let mut xp = x.clone();
                xp.data_mut()[..n].copy_from_slice(p);
                Ok(loss_on(&tree, &xp, probe_seed, build)?.0)
            },
            &x.data()[..n],
            H,
        )
        .unwrap();
        let e = relative_error(&gx.data()[..n], &numeric, 1e-10);
        assert!(e < TOL, "{label} seed {seed}: input rel err {e:e}");
    }
}

#[test]
fn linear_layer() {
    let l = Linear::new("fc", 5, 4);
    let l2 = l.clone();
    check_layer("linear", &[3, 5], move |t, r| l.init(t, r).unwrap(), &move |tape, tree, x| {
        l2.apply(tape, tree, x)
    });
}

#[test]
fn strided_conv1d_layer() {
    let l = Conv1d::new("c", 3, 4, 3, 5);
    let l2 = l.clone();
    check_layer("conv1d", &[2, 3, 23], move |t, r| l.init(t, r).unwrap(), &move |tape, tree, x| {
        l2.apply(tape, tree, x)
    });
}

#[test]
fn conv2d_layers() {
    for (k, s) in [(3, 1), (3, 2), (1, 1)] {
        let l = Conv2d::new("c", 3, 4, k, s);
        let l2 = l.clone();
        check_layer(&format!("conv2d k{k} s{s}"), &[2, 3, 5, 7], move |t, r| l.init(t, r).unwrap(), &move |tape, tree, x| {
            l2.apply(tape, tree, x)
        });
    }
}

#[test]
fn group_norm_layer() {
    let l = GroupNorm::new("gn", 16);
    let l2 = l.clone();
    check_layer(
        "group_norm",
        &[2, 16, 3, 4],
        move |t, r| {
            l.init(t).unwrap();
            // non-trivial affine so gamma/beta gradients are exercised
            t.set_tensor("gn.gamma", Tensor::uniform(&[16], 1.5, r)).unwrap();
            t.set_tensor("gn.beta", Tensor::uniform(&[16], 0.5, r)).unwrap();
        },
        &move |tape, tree, x| l2.apply(tape, tree, x),
    );
}

#[test]
fn silu_activation() {
    check_layer("silu", &[4, 6], |_, _| {}, &|tape, _, x| Ok(tape.silu(x)));
}

#[test]
fn channel_bias_resize_concat_reshape() {
    check_layer(
        "structural ops",
        &[2, 3, 4, 5],
        |t, r| {
            t.insert("bias", Tensor::randn(&[2, 3], r), true).unwrap();
            t.insert("other", Tensor::randn(&[2, 2, 7, 9], r), true).unwrap();
        },
        &|tape, tree, x| {
            let b = tape.param(tree, "bias")?;
            let y = tape.add_channel_bias(x, b)?;
            let up = tape.resize_nearest(y, (7, 9))?;
            let o = tape.param(tree, "other")?;
            let cat = tape.concat_channels(&[up, o])?;
            let down = tape.resize_nearest(cat, (3, 4))?;
            let sq = tape.mul(down, down)?;
            let sc = tape.scale(sq, 0.3);
            let d = tape.sub(sc, down)?;
            tape.reshape(d, &[2, 60])
        },
    );
}

#[test]
fn subject_channel_mix() {
    check_layer(
        "channel_mix",
        &[3, 4, 6],
        |t, r| t.insert("w", Tensor::randn(&[2, 4, 4], r), true).unwrap(),
        &|tape, tree, x| {
            let w = tape.param(tree, "w")?;
            tape.channel_mix(x, w, &[1, 0, 1])
        },
    );
}

#[test]
fn mse_and_mean_reductions() {
    check_layer(
        "mse",
        &[2, 5],
        |t, r| t.insert("target", Tensor::randn(&[2, 5], r), true).unwrap(),
        &|tape, tree, x| {
            let target = tape.param(tree, "target")?;
            let m = tape.mse(x, target)?;
            let mx = tape.mean(x);
            let two = tape.add(m, mx)?;
            tape.reshape(two, &[1, 1])
        },
    );
}

#[test]
fn exp_clamp_add_scalar() {
    check_layer("exp/clamp", &[3, 4], |_, _| {}, &|tape, _, x| {
        let e = tape.exp(x);
        let s = tape.add_scalar(e, -0.5);
        // bounds wide enough that random normal inputs stay unclipped
        Ok(tape.clamp(s, -50.0, 50.0))
    });
}

/// A small conv net with every layer kind composed, as a whole.
#[test]
fn composed_network() {
    // 16 channels -> 8 groups of 2, so the conv bias is not normalized away
    let c1 = Conv2d::new("c1", 2, 16, 3, 2);
    let gn = GroupNorm::new("gn", 16);
    let fc = Linear::new("fc", 3, 16);
    let c2 = Conv2d::new("c2", 16, 2, 3, 1);
    let (a, b, c, d) = (c1.clone(), gn.clone(), fc.clone(), c2.clone());
    check_layer(
        "composed",
        &[2, 2, 6, 5],
        move |t, r| {
            c1.init(t, r).unwrap();
            gn.init(t).unwrap();
            fc.init(t, r).unwrap();
            c2.init(t, r).unwrap();
            t.insert("emb", Tensor::randn(&[2, 3], r), true).unwrap();
        },
        &move |tape, tree, x| {
            let h = a.apply(tape, tree, x)?;
            let h = b.apply(tape, tree, h)?;
            let e = tape.param(tree, "emb")?;
            let e = c.apply(tape, tree, e)?;
            let h = tape.add_channel_bias(h, e)?;
            let h = tape.silu(h);
            let h = tape.resize_nearest(h, (6, 5))?;
            d.apply(tape, tree, h)
        },
    );
}

#[test]
fn evaluate_and_backprop_are_bit_reproducible() {
    let c = Conv2d::new("c", 3, 5, 3, 2);
    let mut tree = ParameterTree::<f32>::new();
    c.init(&mut tree, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let stack = ndcore::LayerStack::new(vec![
        ndcore::Layer::Conv2d(c),
        ndcore::Layer::Silu,
    ]);
    let x = Tensor::randn(&[2, 3, 8, 8], &mut ChaCha8Rng::seed_from_u64(10));
    let up = Tensor::randn(&[2, 5, 4, 4], &mut ChaCha8Rng::seed_from_u64(11));
    let y1 = stack.evaluate(&tree, &x).unwrap();
    let y2 = stack.evaluate(&tree, &x).unwrap();
    assert_eq!(y1, y2);
    let b1 = stack.backpropagate(&tree, &x, &up).unwrap();
    let b2 = stack.backpropagate(&tree, &x, &up).unwrap();
    assert_eq!(b1.input, b2.input);
    assert_eq!(b1.params, b2.params);
}

#[test]
fn frozen_parameters_survive_many_adam_steps() {
    let trainable = Conv2d::new("t", 2, 3, 3, 1);
    let frozen = Conv2d::new("f", 3, 2, 3, 1);
    let mut tree = ParameterTree::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    trainable.init(&mut tree, &mut rng).unwrap();
    frozen.init(&mut tree, &mut rng).unwrap();
    tree.set_trainable_prefix("f.", false);
    let before = tree.clone();
    let mut opt = OptimizerState::new(AdamConfig { lr: 1e-2, ..Default::default() });
    let x = Tensor::randn(&[2, 2, 5, 5], &mut rng);
    for _ in 0..25 {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let h = trainable.apply(&mut tape, &tree, xv).unwrap();
        let y = frozen.apply(&mut tape, &tree, h).unwrap();
        let loss = tape.mean(y);
        let g = tape.backward(loss).unwrap();
        assert!(g.param("f.weight").is_none());
        tree.absorb_grads(&g.param_grads()).unwrap();
        opt.step(&mut tree).unwrap();
    }
    for name in ["f.weight", "f.bias"] {
        let a = before.tensor(name).unwrap().data();
        let b = tree.tensor(name).unwrap().data();
        assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    assert_ne!(before.tensor("t.weight").unwrap(), tree.tensor("t.weight").unwrap());
}
