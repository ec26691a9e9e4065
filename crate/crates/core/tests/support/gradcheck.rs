//! Central finite differences in f64 against the analytic backward passes.

use moncae_core::nn::{
    activate, activation_backward, apply_mask, batchnorm_backward, batchnorm_train,
    conv2d_backward, conv2d_forward, dense_backward, dense_linear, dropout_mask, loss_gradient,
    maxpool_backward, maxpool_forward, reconstruction_loss, resize_backward, resize_forward,
    upsample_backward, upsample_forward, Activation, Gradients, LayerDescriptor, LayerKind,
    LossKind, Network, NetworkSpec, OptimizerId, Tensor, TrainState,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-3;
/// Below this magnitude both derivatives count as zero-ish and the error is
/// measured absolutely against it.
const FLOOR: f64 = 1e-6;
/// At most this many coordinates of a tensor are probed.
const MAX_PROBES: usize = 48;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let len = shape.iter().product();
    Tensor::from_vec(
        shape,
        (0..len).map(|_| rng.gen_range(-scale..scale)).collect(),
    )
    .unwrap()
}

fn probe_indices(len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= MAX_PROBES {
        (0..len).collect()
    } else {
        (0..MAX_PROBES).map(|_| rng.gen_range(0..len)).collect()
    }
}

/// Largest relative error between `analytic` and the central difference of
/// `f` around `x`, over a sample of coordinates.
pub fn check_tensor(
    x: &Tensor<f64>,
    analytic: &Tensor<f64>,
    rng: &mut ChaCha8Rng,
    mut f: impl FnMut(&Tensor<f64>) -> f64,
) -> f64 {
    assert_eq!(x.shape(), analytic.shape(), "gradient shape");
    let mut worst: f64 = 0.0;
    for i in probe_indices(x.len(), rng) {
        let mut plus = x.clone();
        plus.data_mut()[i] += STEP;
        let mut minus = x.clone();
        minus.data_mut()[i] -= STEP;
        let numeric = (f(&plus) - f(&minus)) / (2.0 * STEP);
        worst = worst.max(rel_err(analytic.data()[i], numeric));
    }
    worst
}

/// `sum(r * y)`: a scalar whose gradient w.r.t. `y` is `r`.
fn project(y: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

/// One named kernel check with its worst relative error.
#[derive(Debug, Clone)]
pub struct KernelCheck {
    pub name: String,
    pub max_rel_err: f64,
}

/// Input and parameter gradients of every kernel, checked in isolation.
pub fn kernel_checks(seed: u64) -> Vec<KernelCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut push = |name: String, e: f64| {
        out.push(KernelCheck {
            name,
            max_rel_err: e,
        })
    };

    for act in Activation::ALL {
        let x = random_tensor(&mut rng, &[2, 5, 4, 2], 1.0);
        let k = random_tensor(&mut rng, &[3, 3, 2, 3], 0.5);
        let b = random_tensor(&mut rng, &[3], 0.5);
        let y = conv2d_forward(&x, &k, &b, act).unwrap();
        let r = random_tensor(&mut rng, y.shape(), 1.0);
        let mut g = r.clone();
        activation_backward(&mut g, &y, act);
        let (gx, gk, gb) = conv2d_backward(&x, &k, &g).unwrap();
        let e = check_tensor(&x, &gx, &mut rng, |x| {
            project(&conv2d_forward(x, &k, &b, act).unwrap(), &r)
        })
        .max(check_tensor(&k, &gk, &mut rng, |k| {
            project(&conv2d_forward(&x, k, &b, act).unwrap(), &r)
        }))
        .max(check_tensor(&b, &gb, &mut rng, |b| {
            project(&conv2d_forward(&x, &k, b, act).unwrap(), &r)
        }));
        push(format!("conv2d/{}", act.name()), e);
    }

    {
        let x = random_tensor(&mut rng, &[2, 5, 7, 3], 1.0);
        let (y, arg) = maxpool_forward(&x).unwrap();
        let r = random_tensor(&mut rng, y.shape(), 1.0);
        let gx = maxpool_backward(&r, &arg, x.shape()).unwrap();
        let e = check_tensor(&x, &gx, &mut rng, |x| {
            project(&maxpool_forward(x).unwrap().0, &r)
        });
        push("maxpool2x2".into(), e);
    }

    {
        let x = random_tensor(&mut rng, &[2, 3, 2, 2], 1.0);
        let y = upsample_forward(&x).unwrap();
        let r = random_tensor(&mut rng, y.shape(), 1.0);
        let gx = upsample_backward(&r).unwrap();
        let e = check_tensor(&x, &gx, &mut rng, |x| {
            project(&upsample_forward(x).unwrap(), &r)
        });
        push("upsample2x".into(), e);
    }

    for (th, tw) in [(5, 3), (7, 6), (6, 4)] {
        let x = random_tensor(&mut rng, &[2, 6, 4, 2], 1.0);
        let y = resize_forward(&x, th, tw).unwrap();
        let r = random_tensor(&mut rng, y.shape(), 1.0);
        let gx = resize_backward(&r, x.shape()).unwrap();
        let e = check_tensor(&x, &gx, &mut rng, |x| {
            project(&resize_forward(x, th, tw).unwrap(), &r)
        });
        push(format!("resize/{th}x{tw}"), e);
    }

    for act in Activation::ALL {
        let x = random_tensor(&mut rng, &[3, 2, 2, 2], 1.0);
        let w = random_tensor(&mut rng, &[8, 5], 0.5);
        let b = random_tensor(&mut rng, &[5], 0.5);
        let fwd = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| {
            let mut y = dense_linear(x, w, b).unwrap();
            activate(&mut y, act);
            y
        };
        let y = fwd(&x, &w, &b);
        let r = random_tensor(&mut rng, y.shape(), 1.0);
        let mut g = r.clone();
        activation_backward(&mut g, &y, act);
        let (gx, gw, gb) = dense_backward(&x, &w, &g).unwrap();
        let e = check_tensor(&x, &gx, &mut rng, |x| project(&fwd(x, &w, &b), &r))
            .max(check_tensor(&w, &gw, &mut rng, |w| {
                project(&fwd(&x, w, &b), &r)
            }))
            .max(check_tensor(&b, &gb, &mut rng, |b| {
                project(&fwd(&x, &w, b), &r)
            }));
        push(format!("dense/{}", act.name()), e);
    }

    {
        let x = random_tensor(&mut rng, &[3, 2, 3, 4], 1.0);
        let gamma = random_tensor(&mut rng, &[4], 1.0);
        let beta = random_tensor(&mut rng, &[4], 1.0);
        let (y, cache) = batchnorm_train(&x, &gamma, &beta).unwrap();
        let r = random_tensor(&mut rng, y.shape(), 1.0);
        let (gx, gg, gb) = batchnorm_backward(&cache, &gamma, &r).unwrap();
        let f = |x: &Tensor<f64>, g: &Tensor<f64>, b: &Tensor<f64>| {
            project(&batchnorm_train(x, g, b).unwrap().0, &r)
        };
        let e = check_tensor(&x, &gx, &mut rng, |x| f(x, &gamma, &beta))
            .max(check_tensor(&gamma, &gg, &mut rng, |g| f(&x, g, &beta)))
            .max(check_tensor(&beta, &gb, &mut rng, |b| f(&x, &gamma, b)));
        push("batchnorm".into(), e);
    }

    {
        let x = random_tensor(&mut rng, &[2, 4, 4, 3], 1.0);
        let mask: Vec<f64> = dropout_mask(x.len(), 0.3, seed);
        let r = random_tensor(&mut rng, x.shape(), 1.0);
        let gx = apply_mask(&r, &mask);
        let e = check_tensor(&x, &gx, &mut rng, |x| project(&apply_mask(x, &mask), &r));
        push("dropout".into(), e);
    }

    for kind in [LossKind::Mse, LossKind::Bce] {
        let pred = random_tensor(&mut rng, &[2, 3, 3, 1], 0.45).map(|v| v + 0.5);
        let target = random_tensor(&mut rng, &[2, 3, 3, 1], 0.5).map(|v| v + 0.5);
        let g = loss_gradient(&pred, &target, kind).unwrap();
        let e = check_tensor(&pred, &g, &mut rng, |p| {
            reconstruction_loss(p, &target, kind).unwrap()
        });
        push(format!("loss/{}", kind.name()), e);
    }

    {
        // Sigmoid followed by cross-entropy, differentiated w.r.t. the logits.
        let z = random_tensor(&mut rng, &[2, 3, 3, 1], 3.0);
        let target = random_tensor(&mut rng, &[2, 3, 3, 1], 0.5).map(|v| v + 0.5);
        let sig = |z: &Tensor<f64>| z.map(|v| Activation::Sigmoid.apply(v));
        let p = sig(&z);
        let n = z.len() as f64;
        let g = Tensor::from_vec(
            z.shape(),
            p.data()
                .iter()
                .zip(target.data())
                .map(|(p, t)| (p - t) / n)
                .collect(),
        )
        .unwrap();
        let e = check_tensor(&z, &g, &mut rng, |z| {
            reconstruction_loss(&sig(z), &target, LossKind::Bce).unwrap()
        });
        push("loss/bce-from-logits".into(), e);
    }

    out
}

/// A random small autoencoder touching every layer kind the configuration
/// selects, and the kinds it contains.
pub fn random_network(rng: &mut ChaCha8Rng) -> Network {
    let h = rng.gen_range(4..=7);
    let w = rng.gen_range(4..=7);
    let c = rng.gen_range(1..=2);
    let act = |rng: &mut ChaCha8Rng| Activation::ALL[rng.gen_range(0..4)];
    let f1 = rng.gen_range(2..=4);
    let mut encoder = vec![LayerDescriptor::conv(f1, act(rng))];
    if rng.gen_bool(0.7) {
        encoder.push(LayerDescriptor::batchnorm());
    }
    if rng.gen_bool(0.6) {
        encoder.push(LayerDescriptor::dropout(rng.gen_range(0.1..0.5)));
    }
    encoder.push(LayerDescriptor::maxpool());
    let (ph, pw) = (h / 2, w / 2);
    let mut decoder = Vec::new();
    let use_dense = rng.gen_bool(0.5);
    let bottleneck = if use_dense {
        let u = rng.gen_range(2..=5);
        encoder.push(LayerDescriptor::dense(u, act(rng)));
        decoder.push(LayerDescriptor::upsample(Some((ph, pw))));
        [1, 1, u]
    } else {
        [ph, pw, f1]
    };
    decoder.push(LayerDescriptor::conv(rng.gen_range(2..=4), act(rng)));
    decoder.push(LayerDescriptor::upsample(Some((h, w))));
    decoder.push(LayerDescriptor::output_conv(c));
    Network::new(NetworkSpec {
        input_shape: [h, w, c],
        encoder,
        decoder,
        bottleneck_shape: bottleneck,
        optimizer: OptimizerId::Adam,
        learning_rate: 1e-3,
    })
    .unwrap()
}

/// Result of checking every parameter of one network.
#[derive(Debug, Clone)]
pub struct NetworkCheck {
    pub kinds: Vec<LayerKind>,
    pub loss: LossKind,
    pub fused: bool,
    pub max_rel_err: f64,
}

/// Compares [`Network::backward`] (or the fused logits path for BCE)
/// against finite differences of the training-mode loss, for every
/// parameter tensor.
pub fn network_check(seed: u64, loss: LossKind, fused: bool) -> NetworkCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = random_network(&mut rng);
    let mut state: TrainState<f64> = net.init_state(seed);
    // Non-trivial batchnorm affine parameters.
    for (l, p) in net.layers().iter().zip(state.params.iter_mut()) {
        if l.kind == LayerKind::Batchnorm {
            p[0] = random_tensor(&mut rng, p[0].shape(), 1.0).map(|v| v + 1.5);
            p[1] = random_tensor(&mut rng, p[1].shape(), 0.5);
        }
    }
    let [h, w, c] = net.spec().input_shape;
    let n = 3;
    let batch = random_tensor(&mut rng, &[n, h, w, c], 0.5).map(|v| v + 0.5);
    let dropout_seed = rng.gen();

    let loss_of = |state: &TrainState<f64>| {
        let mut s = state.clone();
        let cache = net.forward(&mut s, &batch, true, dropout_seed).unwrap();
        reconstruction_loss(cache.reconstruction(), &batch, loss).unwrap()
    };

    let mut s = state.clone();
    let cache = net.forward(&mut s, &batch, true, dropout_seed).unwrap();
    let pred = cache.reconstruction();
    let grads: Gradients<f64> = if fused {
        assert_eq!(loss, LossKind::Bce);
        let scale = 1.0 / pred.len() as f64;
        let g = Tensor::from_vec(
            pred.shape(),
            pred.data()
                .iter()
                .zip(batch.data())
                .map(|(p, t)| (p - t) * scale)
                .collect(),
        )
        .unwrap();
        net.backward_from_logits(&s, &cache, &g).unwrap()
    } else {
        net.backward(&s, &cache, &loss_gradient(pred, &batch, loss).unwrap())
            .unwrap()
    };

    let mut worst: f64 = 0.0;
    for li in 0..state.params.len() {
        for pi in 0..state.params[li].len() {
            let x = state.params[li][pi].clone();
            let e = check_tensor(&x, &grads.layers[li][pi], &mut rng, |x| {
                let mut st = state.clone();
                st.params[li][pi] = x.clone();
                loss_of(&st)
            });
            worst = worst.max(e);
        }
    }
    NetworkCheck {
        kinds: net.layers().iter().map(|l| l.kind).collect(),
        loss,
        fused,
        max_rel_err: worst,
    }
}

/// The standard sweep: `configs` random networks, cycling through MSE,
/// BCE and fused sigmoid-BCE.
pub fn network_sweep(configs: u64) -> Vec<NetworkCheck> {
    (0..configs)
        .map(|i| {
            let (loss, fused) = match i % 3 {
                0 => (LossKind::Mse, false),
                1 => (LossKind::Bce, false),
                _ => (LossKind::Bce, true),
            };
            network_check(1000 + i, loss, fused)
        })
        .collect()
}
