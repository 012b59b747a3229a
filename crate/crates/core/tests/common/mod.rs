#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rouser::network::Network;
use rouser::neuron::LayerParams;
use rouser::{Hyperparams, Matrix, NetworkSpec, SpikeTensor};

/// Unrolled per-layer state of the reference simulation, indexed `[t][i]`.
pub struct RefLayer {
    pub current: Vec<Vec<f64>>,
    pub voltage: Vec<Vec<f64>>,
    pub spikes: Vec<Vec<f64>>,
}

/// Plain nested-loop LIF simulation, one time step at a time across all
/// layers.
pub fn ref_forward(net: &Network<f64>, input: &SpikeTensor) -> Vec<RefLayer> {
    let hp = &net.hp;
    let steps = input.steps();
    let mut layers: Vec<RefLayer> = net
        .layers
        .iter()
        .map(|l| {
            let n = l.thresholds.len();
            RefLayer {
                current: vec![vec![0.0; n]; steps],
                voltage: vec![vec![0.0; n]; steps],
                spikes: vec![vec![0.0; n]; steps],
            }
        })
        .collect();
    for t in 0..steps {
        for l in 0..net.layers.len() {
            let p = &net.layers[l];
            let n_in = p.weights.cols();
            let inp: Vec<f64> = if l == 0 {
                (0..n_in)
                    .map(|j| if input.get(j, t) { 1.0 } else { 0.0 })
                    .collect()
            } else {
                layers[l - 1].spikes[t].clone()
            };
            for i in 0..p.thresholds.len() {
                let mut drive = 0.0;
                for j in 0..n_in {
                    drive += p.weights.get(i, j) * inp[j];
                }
                let (prev_i, prev_v) = if t == 0 {
                    (0.0, hp.v_rest)
                } else {
                    let fired = layers[l].spikes[t - 1][i] > 0.5;
                    (
                        layers[l].current[t - 1][i],
                        if fired {
                            hp.v_rest
                        } else {
                            layers[l].voltage[t - 1][i]
                        },
                    )
                };
                let cur = hp.current_decay * prev_i + drive;
                let v = hp.voltage_decay * prev_v + cur;
                layers[l].current[t][i] = cur;
                layers[l].voltage[t][i] = v;
                layers[l].spikes[t][i] = if v >= p.thresholds[i] { 1.0 } else { 0.0 };
            }
        }
    }
    layers
}

pub fn ref_surrogate(v: f64, th: f64, hp: &Hyperparams) -> f64 {
    hp.s / hp.tau * (-(v - th).abs() / hp.tau).exp()
}

pub struct RefGrad {
    pub d_weights: Vec<Vec<Vec<f64>>>,
    pub d_thresholds: Vec<Vec<f64>>,
}

/// Reverse sweep over the unrolled graph: time descending, and within a step
/// layers from the top down, so every node's adjoint is complete before it is
/// propagated. The reset is treated as a gate with no gradient through the
/// spike that triggered it.
pub fn ref_backward(net: &Network<f64>, input: &SpikeTensor, target: &[f64]) -> (f64, RefGrad) {
    let hp = &net.hp;
    let fwd = ref_forward(net, input);
    let steps = input.steps();
    let nl = net.layers.len();
    let out = &fwd[nl - 1];
    let n_out = target.len();
    let rates: Vec<f64> = (0..n_out)
        .map(|i| (0..steps).map(|t| out.spikes[t][i]).sum::<f64>() / steps as f64)
        .collect();
    let loss = rates
        .iter()
        .zip(target)
        .map(|(r, y)| (r - y) * (r - y))
        .sum::<f64>()
        / n_out as f64;

    let mut gw: Vec<Vec<Vec<f64>>> = net
        .layers
        .iter()
        .map(|p| vec![vec![0.0; p.weights.cols()]; p.weights.rows()])
        .collect();
    let mut gth: Vec<Vec<f64>> = net
        .layers
        .iter()
        .map(|p| vec![0.0; p.thresholds.len()])
        .collect();
    // Adjoints flowing backward in time: into V[t] and I[t] from step t+1.
    let mut gv_next: Vec<Vec<f64>> = net
        .layers
        .iter()
        .map(|p| vec![0.0; p.thresholds.len()])
        .collect();
    let mut gi_next: Vec<Vec<f64>> = gv_next.clone();

    for t in (0..steps).rev() {
        let mut gs_from_above: Vec<f64> = Vec::new();
        for l in (0..nl).rev() {
            let p = &net.layers[l];
            let n = p.thresholds.len();
            let mut gs = vec![0.0; n];
            if l == nl - 1 {
                for i in 0..n {
                    gs[i] = 2.0 * (rates[i] - target[i]) / n_out as f64 / steps as f64;
                }
            } else {
                gs.copy_from_slice(&gs_from_above);
            }
            let mut gi = vec![0.0; n];
            for i in 0..n {
                let v = fwd[l].voltage[t][i];
                let th = p.thresholds[i];
                let sg = ref_surrogate(v, th, hp);
                let keep = if fwd[l].spikes[t][i] > 0.5 { 0.0 } else { 1.0 };
                let gv = gs[i] * sg + hp.voltage_decay * keep * gv_next[l][i];
                gth[l][i] += -gs[i] * sg;
                gi[i] = gv + hp.current_decay * gi_next[l][i];
                gv_next[l][i] = gv;
            }
            let n_in = p.weights.cols();
            let mut below = vec![0.0; n_in];
            for i in 0..n {
                for j in 0..n_in {
                    let s_in = if l == 0 {
                        if input.get(j, t) {
                            1.0
                        } else {
                            0.0
                        }
                    } else {
                        fwd[l - 1].spikes[t][j]
                    };
                    gw[l][i][j] += gi[i] * s_in;
                    below[j] += p.weights.get(i, j) * gi[i];
                }
            }
            gi_next[l] = gi;
            gs_from_above = below;
        }
    }
    (
        loss,
        RefGrad {
            d_weights: gw,
            d_thresholds: gth,
        },
    )
}

pub fn random_hp(rng: &mut ChaCha8Rng) -> Hyperparams {
    let mut hp = Hyperparams::default();
    hp.current_decay = rng.random_range(0.1..0.95);
    hp.voltage_decay = rng.random_range(0.5..0.99);
    hp.s = rng.random_range(0.5..4.0);
    hp.tau = rng.random_range(0.5..5.0);
    hp.true_rate = rng.random_range(0.0..1.0);
    hp.false_rate = rng.random_range(0.0..hp.true_rate.max(1e-3));
    hp
}

pub fn random_input(rng: &mut ChaCha8Rng, neurons: usize, steps: usize, p: f64) -> SpikeTensor {
    SpikeTensor::from_fn(neurons, steps, |_, _| rng.random_bool(p))
}

/// Network with the given sizes and weights/thresholds drawn uniformly.
pub fn random_network(
    rng: &mut ChaCha8Rng,
    sizes: &[usize],
    hp: Hyperparams,
    w_range: (f64, f64),
    th_range: (f64, f64),
) -> Network<f64> {
    let layers = sizes
        .windows(2)
        .map(|w| {
            let weights =
                Matrix::from_fn(w[1], w[0], |_, _| rng.random_range(w_range.0..w_range.1));
            let th = (0..w[1])
                .map(|_| rng.random_range(th_range.0..th_range.1))
                .collect();
            LayerParams::new(weights, th).unwrap()
        })
        .collect();
    let net = Network::from_layers(layers, hp).unwrap();
    assert_eq!(net.spec, NetworkSpec::new(sizes.to_vec()).unwrap());
    net
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `|a - b| <= rel * max(|a|, |b|)`, with exact zeros required to agree to
/// within `floor`.
pub fn close(a: f64, b: f64, rel: f64, floor: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()) + floor
}
