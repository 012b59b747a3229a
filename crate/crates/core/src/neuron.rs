//! Discrete-time current-based LIF layer: a decaying synaptic current feeds
//! a decaying membrane, which spikes on reaching threshold and hard-resets
//! to the resting potential. Also the exponential surrogate derivative used
//! in place of the step function's derivative.

use crate::config::Hyperparams;
use crate::error::{Error, Result};
use crate::events_io::SpikeTensor;
use crate::scalar::{Matrix, Scalar};

/// Trainable state of one fully connected layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    /// `fan_out x fan_in`, entry `(i, j)` is the synapse from input `j` to neuron `i`.
    pub weights: Matrix<T>,
    /// One spiking threshold per output neuron.
    pub thresholds: Vec<T>,
}

impl<T: Scalar> LayerParams<T> {
    pub fn new(weights: Matrix<T>, thresholds: Vec<T>) -> Result<Self> {
        if thresholds.len() != weights.rows() {
            return Err(Error::shape(format!(
                "{} thresholds for {} neurons",
                thresholds.len(),
                weights.rows()
            )));
        }
        Ok(Self {
            weights,
            thresholds,
        })
    }

    #[inline]
    pub fn fan_in(&self) -> usize {
        self.weights.cols()
    }

    #[inline]
    pub fn fan_out(&self) -> usize {
        self.weights.rows()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.is_finite() && self.thresholds.iter().all(|t| t.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> LayerParams<U> {
        LayerParams {
            weights: self.weights.cast(),
            thresholds: self.thresholds.iter().map(|t| U::lit(t.as_f64())).collect(),
        }
    }
}

/// Per-step record of one layer's state for a single sample.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace<T> {
    /// Synaptic current, `fan_out x T`.
    pub current: Matrix<T>,
    /// Membrane potential before reset, `fan_out x T`.
    pub voltage: Matrix<T>,
    pub spikes: SpikeTensor,
}

impl<T: Scalar> LayerTrace<T> {
    pub fn neurons(&self) -> usize {
        self.spikes.neurons()
    }

    pub fn steps(&self) -> usize {
        self.spikes.steps()
    }

    /// Spikes per step for each neuron.
    pub fn rates(&self) -> Vec<T> {
        let steps = T::lit(self.steps() as f64);
        (0..self.neurons())
            .map(|i| T::lit(self.spikes.count(i) as f64) / steps)
            .collect()
    }
}

/// Neuron constants lifted into the working scalar type.
#[derive(Clone, Copy, Debug)]
pub struct LifConstants<T> {
    pub current_decay: T,
    pub voltage_decay: T,
    pub v_rest: T,
    pub surrogate: Surrogate<T>,
}

impl<T: Scalar> LifConstants<T> {
    pub fn from_hyperparams(hp: &Hyperparams) -> Self {
        Self {
            current_decay: T::lit(hp.current_decay),
            voltage_decay: T::lit(hp.voltage_decay),
            v_rest: T::lit(hp.v_rest),
            surrogate: Surrogate::new(T::lit(hp.s), T::lit(hp.tau)),
        }
    }
}

/// `(s / tau) * exp(-|V - Th| / tau)` and its threshold counterpart.
#[derive(Clone, Copy, Debug)]
pub struct Surrogate<T> {
    pub scale: T,
    pub tau: T,
}

impl<T: Scalar> Surrogate<T> {
    pub fn new(scale: T, tau: T) -> Self {
        Self { scale, tau }
    }

    #[inline]
    pub fn d_dv(&self, v: T, th: T) -> T {
        self.scale / self.tau * (-(v - th).abs() / self.tau).exp()
    }

    #[inline]
    pub fn d_dth(&self, v: T, th: T) -> T {
        -self.d_dv(v, th)
    }
}

/// Surrogate derivative of the spike w.r.t. membrane potential.
pub fn surrogate_ds_dv<T: Scalar>(v: T, th: T, hp: &Hyperparams) -> T {
    Surrogate::new(T::lit(hp.s), T::lit(hp.tau)).d_dv(v, th)
}

/// Surrogate derivative of the spike w.r.t. threshold; always the negation
/// of [`surrogate_ds_dv`].
pub fn surrogate_ds_dth<T: Scalar>(v: T, th: T, hp: &Hyperparams) -> T {
    Surrogate::new(T::lit(hp.s), T::lit(hp.tau)).d_dth(v, th)
}

/// Runs the layer over every step of `input`.
///
/// With `I[-1] = 0` and `V_post[-1] = v_rest`:
/// `I[t] = a*I[t-1] + W*S_in[t]`, `V[t] = b*V_post[t-1] + I[t]`,
/// `S[t] = V[t] >= Th`, `V_post[t] = S[t] ? v_rest : V[t]`.
pub fn layer_forward<T: Scalar>(
    params: &LayerParams<T>,
    input: &SpikeTensor,
    hp: &Hyperparams,
) -> Result<LayerTrace<T>> {
    forward_with(params, input, &LifConstants::from_hyperparams(hp))
}

pub(crate) fn forward_with<T: Scalar>(
    params: &LayerParams<T>,
    input: &SpikeTensor,
    k: &LifConstants<T>,
) -> Result<LayerTrace<T>> {
    if input.neurons() != params.fan_in() {
        return Err(Error::shape(format!(
            "layer expects {} inputs, raster has {}",
            params.fan_in(),
            input.neurons()
        )));
    }
    let steps = input.steps();
    if steps == 0 {
        return Err(Error::shape("input raster has zero time steps"));
    }
    let n = params.fan_out();
    let mut current = Matrix::zeros(n, steps);
    let mut voltage = Matrix::zeros(n, steps);
    let mut spikes = SpikeTensor::zeros(n, steps);

    let active = input.active_by_step();
    let mut i_state = vec![T::zero(); n];
    let mut v_state = vec![k.v_rest; n];
    for (t, active) in active.iter().enumerate() {
        for i in 0..n {
            let row = params.weights.row(i);
            let drive = active.iter().fold(T::zero(), |acc, &j| acc + row[j]);
            let cur = k.current_decay * i_state[i] + drive;
            let v = k.voltage_decay * v_state[i] + cur;
            let fired = v >= params.thresholds[i];
            current.set(i, t, cur);
            voltage.set(i, t, v);
            spikes.set(i, t, fired);
            i_state[i] = cur;
            v_state[i] = if fired { k.v_rest } else { v };
        }
    }
    Ok(LayerTrace {
        current,
        voltage,
        spikes,
    })
}

/// Threshold above which neuron `i` can never fire for any binary input,
/// from the geometric bounds `|I| <= sum|w| / (1-a)` and
/// `|V| <= |I|max / (1-b)` (with `v_rest = 0`).
pub fn no_spike_bound<T: Scalar>(params: &LayerParams<T>, neuron: usize, hp: &Hyperparams) -> T {
    let l1 = params
        .weights
        .row(neuron)
        .iter()
        .fold(T::zero(), |a, w| a + w.abs());
    l1 / T::lit((1.0 - hp.current_decay) * (1.0 - hp.voltage_decay))
}
