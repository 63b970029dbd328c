mod common;

use common::{gradcheck, random_tensor, TOLERANCE};
use lesionforge::diffusion::{UNet, UNetConfig};
use lesionforge::rng::rng_from;
use lesionforge::tensornet::{LayerSpec, Network};

fn check_network(input_shape: &[usize], specs: &[LayerSpec], seed: u64) {
    let mut net = Network::<f64>::new(&input_shape[1..], specs, &mut rng_from(seed)).unwrap();
    let x = random_tensor(input_shape, seed + 1);
    let (err, at) = gradcheck(
        &mut net,
        &x,
        |m, x| m.forward(x).unwrap(),
        |m, g| m.backward(g).unwrap(),
        seed,
    );
    assert!(err < TOLERANCE, "{specs:?}: relative error {err:e} at {at}");
}

#[test]
fn conv_layers() {
    check_network(
        &[2, 3, 6, 6],
        &[LayerSpec::Conv2d {
            in_channels: 3,
            out_channels: 4,
            kernel: 3,
            stride: 1,
        }],
        1,
    );
    check_network(
        &[2, 3, 8, 8],
        &[LayerSpec::Conv2d {
            in_channels: 3,
            out_channels: 4,
            kernel: 3,
            stride: 2,
        }],
        2,
    );
}

#[test]
fn dense_and_pooling() {
    check_network(
        &[3, 4, 5, 5],
        &[LayerSpec::GlobalAvgPool, LayerSpec::Dense { inputs: 4, outputs: 3 }],
        3,
    );
    check_network(
        &[2, 2, 3, 3],
        &[LayerSpec::Flatten, LayerSpec::Dense { inputs: 18, outputs: 5 }],
        4,
    );
}

#[test]
fn norm_and_activations() {
    check_network(&[2, 8, 4, 4], &[LayerSpec::GroupNorm { channels: 8 }], 5);
    check_network(&[2, 3, 4, 4], &[LayerSpec::Silu, LayerSpec::Relu], 6);
    check_network(&[1, 2, 3, 3], &[LayerSpec::Upsample2x], 7);
}

#[test]
fn unet_end_to_end() {
    let cfg = UNetConfig {
        channels: 3,
        base_width: 8,
        emb_dim: 8,
        tokens: 3,
    };
    let mut net = UNet::<f64>::new(cfg, &mut rng_from(11));
    let x = random_tensor(&[2, 3, 8, 8], 12);
    let (err, at) = gradcheck(
        &mut net,
        &x,
        |m, x| m.forward(x, &[7, 900], &[0, 2]).unwrap(),
        |m, g| m.backward(g).unwrap(),
        13,
    );
    assert!(err < TOLERANCE, "relative error {err:e} at {at}");
}
