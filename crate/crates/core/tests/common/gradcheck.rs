//! Analytic gradients against central finite differences (h = 1e-5).
//! Each check returns its worst relative error.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vitiseg::imaging::BinaryMask;
use vitiseg::nn::ops::*;
use vitiseg::nn::{NetworkConfig, NetworkModel, Tensor};

use super::*;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
/// Softmax cross-entropy is smooth and shallow, so it is held tighter.
pub const XENT_TOL: f64 = 1e-6;

/// Checks every entry of `analytic` against the numeric derivative of `loss`
/// with respect to the matching entry of `values`; returns the worst error.
fn check_all(values: &mut Tensor, analytic: &[f64], mut loss: impl FnMut(&Tensor) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..values.len() {
        let shape = values.shape().to_vec();
        let numeric = central_diff(values.values_mut(), i, H, |v| {
            loss(&Tensor::from_vec(&shape, v.to_vec()).unwrap())
        });
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    worst
}

/// Input, weight and bias gradients of padded and strided convolutions.
pub fn conv_worst() -> f64 {
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for &(c, oc, h, k, s, p) in &[(2, 3, 6, 3, 1, 1), (3, 2, 7, 3, 2, 1)] {
        let mut x = random_tensor(&mut rng, &[c, h, h]);
        let mut w = random_tensor(&mut rng, &[oc, c, k, k]);
        let mut b = random_tensor(&mut rng, &[oc]);
        let y = conv2d_padded(&x, &w, Some(&b), s, p).unwrap();
        let r = random_tensor(&mut rng, y.shape());
        let g = conv2d_backward_padded(&x, &w, s, p, &r).unwrap();

        let (w0, b0, x0) = (w.clone(), b.clone(), x.clone());
        let ex = check_all(&mut x, g.input.values(), |xv| {
            conv2d_padded(xv, &w0, Some(&b0), s, p).unwrap().dot(&r)
        });
        let ew = check_all(&mut w, g.weight.values(), |wv| {
            conv2d_padded(&x0, wv, Some(&b0), s, p).unwrap().dot(&r)
        });
        let eb = check_all(&mut b, g.bias.values(), |bv| {
            conv2d_padded(&x0, &w0, Some(bv), s, p).unwrap().dot(&r)
        });
        worst = worst.max(ex).max(ew).max(eb);
    }
    worst
}

/// Worst error per deconvolution stride (2 and 8).
pub fn deconv_worst() -> Vec<(usize, f64)> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for &(c, oc, h, k, s, p) in &[(3, 2, 3, 4, 2, 1), (2, 2, 2, 8, 8, 0), (2, 3, 2, 12, 8, 2)] {
        let mut x = random_tensor(&mut rng, &[c, h, h]);
        let mut w = random_tensor(&mut rng, &[c, oc, k, k]);
        let mut b = random_tensor(&mut rng, &[oc]);
        let y = deconv2d_forward(&x, &w, Some(&b), s, p).unwrap();
        let r = random_tensor(&mut rng, y.shape());
        let g = deconv2d_backward(&x, &w, s, p, &r).unwrap();

        let (w0, b0, x0) = (w.clone(), b.clone(), x.clone());
        let ex = check_all(&mut x, g.input.values(), |xv| {
            deconv2d_forward(xv, &w0, Some(&b0), s, p).unwrap().dot(&r)
        });
        let ew = check_all(&mut w, g.weight.values(), |wv| {
            deconv2d_forward(&x0, wv, Some(&b0), s, p).unwrap().dot(&r)
        });
        let eb = check_all(&mut b, g.bias.values(), |bv| {
            deconv2d_forward(&x0, &w0, Some(bv), s, p).unwrap().dot(&r)
        });
        out.push((s, ex.max(ew).max(eb)));
    }
    out
}

pub fn maxpool_worst() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut x = random_tensor(&mut rng, &[3, 6, 8]);
    let out = maxpool2x2_forward(&x).unwrap();
    let r = random_tensor(&mut rng, out.output.shape());
    let g = maxpool2x2_backward(x.shape(), &out.argmax, &r).unwrap();
    check_all(&mut x, g.values(), |xv| maxpool2x2_forward(xv).unwrap().output.dot(&r))
}

pub fn concat_worst() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut a = random_tensor(&mut rng, &[2, 3, 4]);
    let b = random_tensor(&mut rng, &[3, 3, 4]);
    let r = random_tensor(&mut rng, &[5, 3, 4]);
    let (ga, gb) = split_channels(&r, 2).unwrap();
    let b0 = b.clone();
    let err_a = check_all(&mut a, ga.values(), |av| concat_channels(av, &b0).unwrap().dot(&r));
    let a0 = a.clone();
    let mut b = b;
    let err_b = check_all(&mut b, gb.values(), |bv| concat_channels(&a0, bv).unwrap().dot(&r));
    err_a.max(err_b)
}

/// Unweighted and object-weighted loss.
pub fn softmax_xent_worst() -> f64 {
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut logits = random_tensor(&mut rng, &[2, 4, 4]);
    let target = random_mask(&mut rng, 4, 4, 0.4);
    for weight in [1.0, 3.5] {
        let g = softmax_xent(&logits, &target, weight).unwrap().grad;
        let err = check_all(&mut logits, g.values(), |l| {
            softmax_xent(l, &target, weight).unwrap().loss
        });
        worst = worst.max(err);
    }
    worst
}

fn micro_config() -> NetworkConfig {
    NetworkConfig {
        input_side: 32,
        input_channels: 1,
        encoder_channels: vec![2, 3, 3, 2, 2],
        convs_per_block: vec![1, 1, 1, 1, 1],
        decoder_channels: vec![2, 2],
        final_upsample_stride: 8,
        final_upsample_kernel: 8,
        num_classes: 2,
    }
}

/// Worst relative error over the given `(param, index)` positions, with the
/// offending parameter's name.
fn network_check(model: &mut NetworkModel, x: &Tensor, target: &BinaryMask, picks: &[(usize, usize)]) -> (f64, String) {
    let (_, grads) = model.loss_and_gradients(x, target, 1.0).unwrap();
    let mut worst = (0.0, String::new());
    for &(p, i) in picks {
        let orig = model.params()[p].value.values()[i];
        model.params_mut()[p].value.values_mut()[i] = orig + H;
        let up = model.loss(x, target, 1.0).unwrap();
        model.params_mut()[p].value.values_mut()[i] = orig - H;
        let down = model.loss(x, target, 1.0).unwrap();
        model.params_mut()[p].value.values_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * H);
        let e = rel_err_floor(grads[p][i], numeric, NETWORK_FD_FLOOR);
        if e > worst.0 {
            worst = (e, format!("{}[{i}]", model.params()[p].name));
        }
    }
    worst
}

/// Randomizes the zero-initialized tensors (biases and the scoring layer)
/// so no gradient path is trivially zero.
fn jitter_zero_init(model: &mut NetworkModel, rng: &mut ChaCha8Rng) {
    for p in model.params_mut() {
        if p.name.ends_with(".bias") || p.name == "final.weight" {
            p.value.values_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.1..0.1));
        }
    }
}

/// Every weight of a tiny network with the full layer structure.
pub fn micro_network_worst() -> (f64, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut model = NetworkModel::new(micro_config(), 3).unwrap();
    jitter_zero_init(&mut model, &mut rng);
    let x = random_tensor(&mut rng, &[1, 32, 32]);
    let target = random_mask(&mut rng, 32, 32, 0.3);
    let picks: Vec<(usize, usize)> = model
        .params()
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.value.len()).map(move |i| (p, i)))
        .collect();
    network_check(&mut model, &x, &target, &picks)
}

/// Four random weights of every tensor of the toy network.
pub fn toy_network_worst() -> (f64, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut model = NetworkModel::new(NetworkConfig::toy(3), 5).unwrap();
    jitter_zero_init(&mut model, &mut rng);
    let x = random_tensor(&mut rng, &[3, 64, 64]);
    let target = random_mask(&mut rng, 64, 64, 0.3);
    let mut picks = Vec::new();
    for (p, t) in model.params().iter().enumerate() {
        for _ in 0..4 {
            picks.push((p, rng.gen_range(0..t.value.len())));
        }
    }
    network_check(&mut model, &x, &target, &picks)
}
