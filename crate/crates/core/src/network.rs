//! Feed-forward stacks of fully connected LIF layers.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::config::Hyperparams;
use crate::error::{Error, Result};
use crate::events_io::SpikeTensor;
use crate::neuron::{forward_with, LayerParams, LayerTrace, LifConstants};
use crate::scalar::{Matrix, Scalar};

/// Layer widths from input to output, e.g. `[2312, 500, 500, 10]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkSpec {
    layer_sizes: Vec<usize>,
}

impl NetworkSpec {
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::shape(
                "network needs at least an input and an output size",
            ));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::shape("layer sizes must be >= 1"));
        }
        Ok(Self { layer_sizes })
    }

    /// `input`, then the hidden sizes, then `output`.
    pub fn with_hidden(input: usize, hidden: &[usize], output: usize) -> Result<Self> {
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(input);
        sizes.extend_from_slice(hidden);
        sizes.push(output);
        Self::new(sizes)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_size(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// Weights plus thresholds over all layers.
    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[1] * w[0] + w[1])
            .sum()
    }
}

/// Parses architecture strings like `34x34x2-500-500-10`; an `x`-joined
/// group is the product of its factors.
impl FromStr for NetworkSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let sizes = s
            .trim()
            .split('-')
            .map(|group| {
                group.split('x').try_fold(1usize, |acc, f| {
                    let f: usize = f
                        .trim()
                        .parse()
                        .map_err(|_| Error::shape(format!("bad architecture `{s}`")))?;
                    acc.checked_mul(f)
                        .ok_or_else(|| Error::shape("layer size overflow"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(sizes)
    }
}

impl fmt::Display for NetworkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.layer_sizes.iter().map(|s| s.to_string()).collect();
        f.write_str(&parts.join("-"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    pub layers: Vec<LayerParams<T>>,
    pub spec: NetworkSpec,
    pub hp: Hyperparams,
}

impl<T: Scalar> Network<T> {
    /// Assembles a network from explicit layers, checking that consecutive
    /// shapes chain.
    pub fn from_layers(layers: Vec<LayerParams<T>>, hp: Hyperparams) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::shape("network has no layers"))?;
        let mut sizes = vec![first.fan_in()];
        for (idx, layer) in layers.iter().enumerate() {
            if layer.fan_in() != *sizes.last().unwrap() {
                return Err(Error::shape(format!(
                    "layer {idx} expects {} inputs but previous layer has {}",
                    layer.fan_in(),
                    sizes.last().unwrap()
                )));
            }
            if layer.thresholds.len() != layer.fan_out() {
                return Err(Error::shape(format!(
                    "layer {idx} threshold count mismatch"
                )));
            }
            sizes.push(layer.fan_out());
        }
        Ok(Self {
            layers,
            spec: NetworkSpec::new(sizes)?,
            hp,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            layers: self.layers.iter().map(|l| l.cast()).collect(),
            spec: self.spec.clone(),
            hp: self.hp.clone(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.is_finite())
    }

    /// SHA-256 over every weight and threshold as little-endian f64, hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for layer in &self.layers {
            h.update((layer.fan_in() as u64).to_le_bytes());
            h.update((layer.fan_out() as u64).to_le_bytes());
            for w in layer.weights.as_slice() {
                h.update(w.as_f64().to_le_bytes());
            }
            for t in &layer.thresholds {
                h.update(t.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Kaiming-normal weights (std `sqrt(2 / fan_in)`) and every threshold at
/// `th_init`. Deterministic in `seed`.
pub fn init_network<T: Scalar>(spec: &NetworkSpec, hp: &Hyperparams, seed: u64) -> Network<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = spec
        .layer_sizes()
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            let weights = Matrix::from_fn(fan_out, fan_in, |_, _| T::lit(normal.sample(&mut rng)));
            LayerParams {
                weights,
                thresholds: vec![T::lit(hp.th_init); fan_out],
            }
        })
        .collect();
    Network {
        layers,
        spec: spec.clone(),
        hp: hp.clone(),
    }
}

/// Runs every layer in order; trace `l` is the response of layer `l` to the
/// spikes of trace `l - 1` (or to `input` for the first layer).
pub fn forward<T: Scalar>(net: &Network<T>, input: &SpikeTensor) -> Result<Vec<LayerTrace<T>>> {
    let k = LifConstants::from_hyperparams(&net.hp);
    let mut traces: Vec<LayerTrace<T>> = Vec::with_capacity(net.layers.len());
    for layer in &net.layers {
        let src = traces.last().map_or(input, |t| &t.spikes);
        let tr = forward_with(layer, src, &k)?;
        traces.push(tr);
    }
    Ok(traces)
}

/// Argmax of output spike counts, lowest index on ties.
pub fn predict_from_counts(counts: &[usize]) -> usize {
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    best
}

pub fn output_counts<T: Scalar>(traces: &[LayerTrace<T>]) -> Vec<usize> {
    let out = &traces.last().expect("at least one layer").spikes;
    (0..out.neurons()).map(|i| out.count(i)).collect()
}

pub fn predict<T: Scalar>(net: &Network<T>, input: &SpikeTensor) -> Result<usize> {
    Ok(predict_from_counts(&output_counts(&forward(net, input)?)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuron::layer_forward;
    use proptest::prelude::*;

    #[test]
    fn table_architectures_parse() {
        let nmnist: NetworkSpec = "34x34x2-500-500-10".parse().unwrap();
        assert_eq!(nmnist.layer_sizes(), &[2312, 500, 500, 10]);
        assert_eq!(
            nmnist.param_count(),
            2312 * 500 + 500 + 500 * 500 + 500 + 500 * 10 + 10
        );
        let dvs: NetworkSpec = "128x128x2-64-11".parse().unwrap();
        assert_eq!(dvs.layer_sizes(), &[32768, 64, 11]);
        assert_eq!(dvs.param_count(), 32768 * 64 + 64 + 64 * 11 + 11);
        let shd: NetworkSpec = "700-200-200-20".parse().unwrap();
        assert_eq!(
            shd.param_count(),
            700 * 200 + 200 + 200 * 200 + 200 + 200 * 20 + 20
        );
        assert_eq!(shd.to_string(), "700-200-200-20");
        assert!("10".parse::<NetworkSpec>().is_err());
        assert!("10-0".parse::<NetworkSpec>().is_err());
        assert!("ax2-3".parse::<NetworkSpec>().is_err());
    }

    #[test]
    fn init_is_deterministic_with_table_thresholds() {
        let spec = NetworkSpec::new(vec![20, 16, 2]).unwrap();
        let hp = Hyperparams::default();
        let a = init_network::<f64>(&spec, &hp, 7);
        let b = init_network::<f64>(&spec, &hp, 7);
        assert_eq!(a, b);
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(
            a.fingerprint(),
            init_network::<f64>(&spec, &hp, 8).fingerprint()
        );
        assert!(a
            .layers
            .iter()
            .all(|l| l.thresholds.iter().all(|&t| t == 1.25)));
    }

    #[test]
    fn kaiming_std_within_ten_percent() {
        let spec = NetworkSpec::new(vec![400, 300]).unwrap();
        let net = init_network::<f64>(&spec, &Hyperparams::default(), 3);
        let w = net.layers[0].weights.as_slice();
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let std = (w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let target = (2.0f64 / 400.0).sqrt();
        assert!(
            (std - target).abs() / target < 0.10,
            "std {std} target {target}"
        );
        assert!(mean.abs() < 0.01);
    }

    #[test]
    fn zero_input_propagates_silence() {
        let spec = NetworkSpec::new(vec![6, 5, 4, 3]).unwrap();
        let net = init_network::<f64>(&spec, &Hyperparams::default(), 1);
        let traces = forward(&net, &SpikeTensor::zeros(6, 12)).unwrap();
        assert_eq!(traces.len(), 3);
        assert!(traces.iter().all(|t| t.spikes.total() == 0));
        assert_eq!(predict(&net, &SpikeTensor::zeros(6, 12)).unwrap(), 0);
    }

    #[test]
    fn single_layer_forward_matches_layer_forward() {
        let spec = NetworkSpec::new(vec![5, 3]).unwrap();
        let net = init_network::<f64>(&spec, &Hyperparams::default(), 5);
        let input = SpikeTensor::from_fn(5, 9, |n, t| (n + t) % 3 == 0);
        let a = forward(&net, &input).unwrap();
        let b = layer_forward(&net.layers[0], &input, &net.hp).unwrap();
        assert_eq!(a, vec![b]);
    }

    #[test]
    fn three_layer_shapes() {
        let spec = NetworkSpec::new(vec![8, 7, 6, 4]).unwrap();
        let mut hp = Hyperparams::default();
        hp.th_init = 0.3;
        let net = init_network::<f64>(&spec, &hp, 11);
        let input = SpikeTensor::from_fn(8, 10, |n, t| (n * 7 + t * 3) % 4 == 0);
        let traces = forward(&net, &input).unwrap();
        let out = traces.last().unwrap();
        assert_eq!((out.neurons(), out.steps()), (4, 10));
        assert!(out.spikes.is_binary());
        assert!(forward(&net, &SpikeTensor::zeros(7, 10)).is_err());
    }

    #[test]
    fn predict_tie_break() {
        assert_eq!(predict_from_counts(&[0, 5, 2]), 1);
        assert_eq!(predict_from_counts(&[0, 0, 0]), 0);
        assert_eq!(predict_from_counts(&[3, 3, 1]), 0);
    }

    #[test]
    fn from_layers_checks_chain() {
        let a = LayerParams::new(Matrix::<f64>::zeros(3, 2), vec![1.0; 3]).unwrap();
        let b = LayerParams::new(Matrix::<f64>::zeros(2, 4), vec![1.0; 2]).unwrap();
        assert!(Network::from_layers(vec![a.clone(), b], Hyperparams::default()).is_err());
        let c = LayerParams::new(Matrix::<f64>::zeros(2, 3), vec![1.0; 2]).unwrap();
        let net = Network::from_layers(vec![a, c], Hyperparams::default()).unwrap();
        assert_eq!(net.spec.layer_sizes(), &[2, 3, 2]);
    }

    proptest! {
        #[test]
        fn argmax_invariant_under_monotone_maps(counts in proptest::collection::vec(0usize..50, 1..10)) {
            let mapped: Vec<usize> = counts.iter().map(|&c| 3 * c * c + 7).collect();
            prop_assert_eq!(predict_from_counts(&counts), predict_from_counts(&mapped));
        }

        #[test]
        fn forward_leaves_network_untouched(seed in 0u64..1000) {
            let spec = NetworkSpec::new(vec![4, 3, 2]).unwrap();
            let net = init_network::<f64>(&spec, &Hyperparams::default(), seed);
            let before = net.clone();
            let input = SpikeTensor::from_fn(4, 6, |n, t| (n as u64 + t as u64 + seed) % 2 == 0);
            let traces = forward(&net, &input).unwrap();
            prop_assert_eq!(traces.len(), 2);
            prop_assert_eq!(net, before);
        }
    }
}
