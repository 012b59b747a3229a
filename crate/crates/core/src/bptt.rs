//! Rate-MSE loss and its adjoint through the unrolled LIF recurrences.
//!
//! The spike step is differentiated with the exponential surrogate, and the
//! hard reset is excluded from the gradient path: when a neuron fires at `t`,
//! no temporal credit flows from `V[t+1]` back into `V[t]`.

use crate::config::Hyperparams;
use crate::error::{Error, Result};
use crate::events_io::SpikeTensor;
use crate::network::Network;
use crate::neuron::{LayerParams, LayerTrace, LifConstants};
use crate::scalar::{Matrix, Scalar};

/// Desired output spike rate per output neuron.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetRates<T>(pub Vec<T>);

impl<T: Scalar> TargetRates<T> {
    /// `true_rate` for the labelled neuron, `false_rate` everywhere else.
    pub fn for_label(label: usize, outputs: usize, hp: &Hyperparams) -> Result<Self> {
        if label >= outputs {
            return Err(Error::shape(format!(
                "label {label} out of range for {outputs} outputs"
            )));
        }
        Ok(Self(
            (0..outputs)
                .map(|i| {
                    T::lit(if i == label {
                        hp.true_rate
                    } else {
                        hp.false_rate
                    })
                })
                .collect(),
        ))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad<T> {
    pub d_weights: Matrix<T>,
    pub d_thresholds: Vec<T>,
}

/// Per-layer gradients, shaped like the network's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet<T> {
    pub layers: Vec<LayerGrad<T>>,
}

impl<T: Scalar> GradientSet<T> {
    pub fn zeros_like(net: &Network<T>) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrad {
                    d_weights: Matrix::zeros(l.fan_out(), l.fan_in()),
                    d_thresholds: vec![T::zero(); l.fan_out()],
                })
                .collect(),
        }
    }

    /// `self += other * scale`.
    pub fn accumulate(&mut self, other: &GradientSet<T>, scale: T) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.d_weights.add_scaled(&b.d_weights, scale);
            for (x, &y) in a.d_thresholds.iter_mut().zip(&b.d_thresholds) {
                *x = *x + y * scale;
            }
        }
    }

    /// Mean of per-sample gradients, summed in slice order.
    pub fn mean(net: &Network<T>, grads: &[GradientSet<T>]) -> Self {
        let mut acc = Self::zeros_like(net);
        if grads.is_empty() {
            return acc;
        }
        let scale = T::one() / T::lit(grads.len() as f64);
        for g in grads {
            acc.accumulate(g, scale);
        }
        acc
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.d_weights.is_finite() && l.d_thresholds.iter().all(|v| v.is_finite()))
    }

    pub fn matches(&self, net: &Network<T>) -> bool {
        self.layers.len() == net.layers.len()
            && self.layers.iter().zip(&net.layers).all(|(g, p)| {
                g.d_weights.shape() == p.weights.shape()
                    && g.d_thresholds.len() == p.thresholds.len()
            })
    }
}

/// `(1/N) * sum_i (r_i - target_i)^2` with `r_i` the output spike rate.
pub fn loss_mse_rate<T: Scalar>(output: &LayerTrace<T>, target: &TargetRates<T>) -> Result<T> {
    if output.neurons() != target.len() {
        return Err(Error::shape(format!(
            "{} outputs vs {} targets",
            output.neurons(),
            target.len()
        )));
    }
    let n = T::lit(target.len() as f64);
    let sum = output
        .rates()
        .into_iter()
        .zip(&target.0)
        .fold(T::zero(), |acc, (r, &t)| acc + (r - t) * (r - t));
    Ok(sum / n)
}

fn check_traces<T: Scalar>(
    net: &Network<T>,
    traces: &[LayerTrace<T>],
    input: &SpikeTensor,
) -> Result<()> {
    if traces.len() != net.layers.len() {
        return Err(Error::shape(format!(
            "{} traces for {} layers",
            traces.len(),
            net.layers.len()
        )));
    }
    let steps = input.steps();
    if input.neurons() != net.spec.input_size() {
        return Err(Error::shape(
            "input raster does not match network input size",
        ));
    }
    for (idx, (tr, layer)) in traces.iter().zip(&net.layers).enumerate() {
        if tr.neurons() != layer.fan_out() || tr.steps() != steps {
            return Err(Error::shape(format!(
                "trace {idx} does not match layer {idx}"
            )));
        }
    }
    Ok(())
}

/// Adjoint of one layer.
///
/// `d_spikes` is dL/dS for every (neuron, step); `d_voltage_in` optionally
/// injects a direct dL/dV term. Returns the layer gradients and dL/dI, the
/// latter needed to push credit into the layer below.
fn layer_adjoint<T: Scalar>(
    params: &LayerParams<T>,
    trace: &LayerTrace<T>,
    input: &SpikeTensor,
    d_spikes: &Matrix<T>,
    d_voltage_in: Option<&Matrix<T>>,
    k: &LifConstants<T>,
) -> (LayerGrad<T>, Matrix<T>) {
    let (n, steps) = (params.fan_out(), trace.steps());
    let mut d_current = Matrix::zeros(n, steps);
    let mut d_thresholds = vec![T::zero(); n];

    for i in 0..n {
        let th = params.thresholds[i];
        let v_row = trace.voltage.row(i);
        let s_row = trace.spikes.train(i);
        let ds_row = d_spikes.row(i);
        let dvi_row = d_voltage_in.map(|m| m.row(i));
        let di_row = d_current.row_mut(i);

        let mut dv_next = T::zero();
        let mut di_next = T::zero();
        let mut dth = T::zero();
        for t in (0..steps).rev() {
            let surr = k.surrogate.d_dv(v_row[t], th);
            let carry = if s_row[t] != 0 {
                T::zero()
            } else {
                k.voltage_decay * dv_next
            };
            let mut dv = ds_row[t] * surr + carry;
            if let Some(row) = dvi_row {
                dv = dv + row[t];
            }
            let di = dv + k.current_decay * di_next;
            dth = dth + ds_row[t] * k.surrogate.d_dth(v_row[t], th);
            di_row[t] = di;
            dv_next = dv;
            di_next = di;
        }
        d_thresholds[i] = dth;
    }

    let mut d_weights = Matrix::zeros(n, params.fan_in());
    for (t, active) in input.active_by_step().iter().enumerate() {
        if active.is_empty() {
            continue;
        }
        for i in 0..n {
            let g = d_current.get(i, t);
            if g == T::zero() {
                continue;
            }
            let row = d_weights.row_mut(i);
            for &j in active {
                row[j] = row[j] + g;
            }
        }
    }
    (
        LayerGrad {
            d_weights,
            d_thresholds,
        },
        d_current,
    )
}

/// dL/dS of the layer below: `sum_k w_kj * dI_k[t]`.
fn spikes_adjoint<T: Scalar>(params: &LayerParams<T>, d_current: &Matrix<T>) -> Matrix<T> {
    let steps = d_current.cols();
    let mut out = Matrix::zeros(params.fan_in(), steps);
    for k in 0..params.fan_out() {
        let w = params.weights.row(k);
        let di = d_current.row(k);
        for (j, &wkj) in w.iter().enumerate() {
            let row = out.row_mut(j);
            for t in 0..steps {
                row[t] = row[t] + wkj * di[t];
            }
        }
    }
    out
}

/// Gradients of [`loss_mse_rate`] w.r.t. every weight and threshold.
pub fn backward<T: Scalar>(
    net: &Network<T>,
    traces: &[LayerTrace<T>],
    input: &SpikeTensor,
    target: &TargetRates<T>,
) -> Result<GradientSet<T>> {
    check_traces(net, traces, input)?;
    let out = traces.last().unwrap();
    if out.neurons() != target.len() {
        return Err(Error::shape(format!(
            "{} outputs vs {} targets",
            out.neurons(),
            target.len()
        )));
    }
    let k = LifConstants::from_hyperparams(&net.hp);
    let steps = input.steps();
    let n_out = T::lit(out.neurons() as f64);
    let inv_steps = T::one() / T::lit(steps as f64);

    let rates = out.rates();
    let mut d_spikes = Matrix::zeros(out.neurons(), steps);
    for (i, (r, &tgt)) in rates.into_iter().zip(&target.0).enumerate() {
        let d = T::lit(2.0) * (r - tgt) / n_out * inv_steps;
        d_spikes.row_mut(i).fill(d);
    }

    let mut layers = Vec::with_capacity(net.layers.len());
    for l in (0..net.layers.len()).rev() {
        let src = if l == 0 { input } else { &traces[l - 1].spikes };
        let (grad, d_current) = layer_adjoint(&net.layers[l], &traces[l], src, &d_spikes, None, &k);
        if l > 0 {
            d_spikes = spikes_adjoint(&net.layers[l], &d_current);
        }
        layers.push(grad);
    }
    layers.reverse();
    let grads = GradientSet { layers };
    if !grads.is_finite() {
        return Err(Error::NonFinite(
            "gradient (check tau and decay settings)".into(),
        ));
    }
    Ok(grads)
}

/// `(1/N) * sum_i (V_i[T-1] - target_i)^2` over the output layer.
pub fn membrane_loss<T: Scalar>(traces: &[LayerTrace<T>], target_v: &[T]) -> Result<T> {
    let out = traces.last().ok_or_else(|| Error::shape("no traces"))?;
    if out.neurons() != target_v.len() {
        return Err(Error::shape("membrane target length mismatch"));
    }
    let last = out.steps() - 1;
    let n = T::lit(target_v.len() as f64);
    Ok((0..out.neurons())
        .map(|i| {
            let d = out.voltage.get(i, last) - target_v[i];
            d * d
        })
        .fold(T::zero(), |a, b| a + b)
        / n)
}

/// Exact gradient of [`membrane_loss`] in the regime where no neuron spikes.
///
/// With no spikes the forward map is smooth in the output layer's weights
/// and flat in everything upstream of a spike nonlinearity, so hidden layers
/// and all thresholds get zero gradient. Errors if any neuron fired.
pub fn backward_membrane_loss<T: Scalar>(
    net: &Network<T>,
    traces: &[LayerTrace<T>],
    input: &SpikeTensor,
    target_v: &[T],
) -> Result<GradientSet<T>> {
    check_traces(net, traces, input)?;
    if let Some(l) = traces.iter().position(|t| t.spikes.total() > 0) {
        return Err(Error::Data(format!(
            "membrane loss requires a silent network; layer {l} spiked"
        )));
    }
    let out = traces.last().unwrap();
    if out.neurons() != target_v.len() {
        return Err(Error::shape("membrane target length mismatch"));
    }
    let k = LifConstants::from_hyperparams(&net.hp);
    let (n, steps) = (out.neurons(), out.steps());
    let mut inject = Matrix::zeros(n, steps);
    let scale = T::lit(2.0) / T::lit(n as f64);
    for i in 0..n {
        inject.set(
            i,
            steps - 1,
            scale * (out.voltage.get(i, steps - 1) - target_v[i]),
        );
    }
    let last = net.layers.len() - 1;
    let src = if last == 0 {
        input
    } else {
        &traces[last - 1].spikes
    };
    let (grad, _) = layer_adjoint(
        &net.layers[last],
        out,
        src,
        &Matrix::zeros(n, steps),
        Some(&inject),
        &k,
    );
    let mut grads = GradientSet::zeros_like(net);
    grads.layers[last] = grad;
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::forward;
    use crate::neuron::LayerParams;

    fn trace_with_counts(counts: &[usize], steps: usize) -> LayerTrace<f64> {
        let n = counts.len();
        LayerTrace {
            current: Matrix::zeros(n, steps),
            voltage: Matrix::zeros(n, steps),
            spikes: SpikeTensor::from_fn(n, steps, |i, t| t < counts[i]),
        }
    }

    #[test]
    fn loss_examples() {
        let hp = Hyperparams::default();
        let target = TargetRates::<f64>::for_label(0, 2, &hp).unwrap();
        let tr = trace_with_counts(&[10, 0], 10);
        assert!((loss_mse_rate(&tr, &target).unwrap() - 0.32045).abs() < 1e-15);

        let exact = TargetRates(vec![0.2, 0.0]);
        assert_eq!(
            loss_mse_rate(&trace_with_counts(&[2, 0], 10), &exact).unwrap(),
            0.0
        );

        let base = loss_mse_rate(
            &trace_with_counts(&[3, 1], 10),
            &TargetRates(vec![0.2, 0.0]),
        )
        .unwrap();
        let doubled = loss_mse_rate(
            &trace_with_counts(&[4, 2], 10),
            &TargetRates(vec![0.2, 0.0]),
        )
        .unwrap();
        assert!((doubled - 4.0 * base).abs() < 1e-15);
    }

    #[test]
    fn target_rates_one_hot() {
        let hp = Hyperparams::default();
        let t = TargetRates::<f64>::for_label(2, 4, &hp).unwrap();
        assert_eq!(t.0, vec![0.03, 0.03, 0.2, 0.03]);
        assert!(TargetRates::<f64>::for_label(4, 4, &hp).is_err());
    }

    fn single_neuron_net(w: f64, th: f64) -> Network<f64> {
        let layer = LayerParams::new(Matrix::from_vec(1, 1, vec![w]).unwrap(), vec![th]).unwrap();
        Network::from_layers(vec![layer], Hyperparams::default()).unwrap()
    }

    #[test]
    fn one_step_threshold_gradient() {
        let net = single_neuron_net(1.0, 1.25);
        let input = SpikeTensor::from_fn(1, 1, |_, _| true);
        let traces = forward(&net, &input).unwrap();
        assert_eq!(traces[0].voltage.get(0, 0), 1.0);
        assert_eq!(traces[0].spikes.total(), 0);
        let target = TargetRates(vec![0.2]);
        let g = backward(&net, &traces, &input, &target).unwrap();
        // dL/dr = 2 (0 - 0.2) / 1, times 1/T with T = 1
        let ds = 2.0 * (0.0 - 0.2);
        let expected = ds * (-0.4 * (-0.25f64 / 3.75).exp());
        assert!((g.layers[0].d_thresholds[0] - expected).abs() < 1e-15);
        assert!(g.layers[0].d_thresholds[0] > 0.0);
        // dW = dI * S_in = dS * surrogate
        let expected_w = ds * 0.4 * (-0.25f64 / 3.75).exp();
        assert!((g.layers[0].d_weights.get(0, 0) - expected_w).abs() < 1e-15);
    }

    #[test]
    fn matched_rates_give_zero_gradient() {
        let mut hp = Hyperparams::default();
        hp.th_init = 0.5;
        let spec = crate::network::NetworkSpec::new(vec![4, 3, 2]).unwrap();
        let net = crate::network::init_network::<f64>(&spec, &hp, 2);
        let input = SpikeTensor::from_fn(4, 10, |n, t| (n + t) % 2 == 0);
        let traces = forward(&net, &input).unwrap();
        let target = TargetRates(traces.last().unwrap().rates());
        let g = backward(&net, &traces, &input, &target).unwrap();
        assert_eq!(g, GradientSet::zeros_like(&net));
    }

    #[test]
    fn reset_gates_temporal_credit() {
        // fires at t = 1, so dV[1] must not feed back into dV[0]
        let net = single_neuron_net(1.0, 1.25);
        let input = SpikeTensor::from_fn(1, 2, |_, t| t == 0);
        let traces = forward(&net, &input).unwrap();
        assert_eq!(traces[0].spikes.train(0), &[0, 1]);
        let g = backward(&net, &traces, &input, &TargetRates(vec![0.0])).unwrap();
        let ds = 2.0 * 0.5 / 2.0;
        let s = Surrogate::new(1.5, 3.75);
        let (v0, v1) = (traces[0].voltage.get(0, 0), traces[0].voltage.get(0, 1));
        let dv1 = ds * s.d_dv(v1, 1.25);
        let dv0 = ds * s.d_dv(v0, 1.25) + 0.97 * dv1;
        let di0 = dv0 + 0.75 * dv1;
        assert!((g.layers[0].d_weights.get(0, 0) - di0).abs() < 1e-15);
    }

    use crate::neuron::Surrogate;

    #[test]
    fn membrane_closed_form_single_step() {
        let mut net = single_neuron_net(0.7, 100.0);
        net.hp.th_init = 100.0;
        let input = SpikeTensor::from_fn(1, 1, |_, _| true);
        let traces = forward(&net, &input).unwrap();
        let target = [0.2];
        let g = backward_membrane_loss(&net, &traces, &input, &target).unwrap();
        assert!((g.layers[0].d_weights.get(0, 0) - 2.0 * (0.7 - 0.2)).abs() < 1e-15);
        assert_eq!(g.layers[0].d_thresholds[0], 0.0);

        let at_target = [traces[0].voltage.get(0, 0)];
        let g = backward_membrane_loss(&net, &traces, &input, &at_target).unwrap();
        assert_eq!(g, GradientSet::zeros_like(&net));
    }

    #[test]
    fn membrane_path_rejects_spiking_networks() {
        let net = single_neuron_net(2.0, 1.0);
        let input = SpikeTensor::from_fn(1, 1, |_, _| true);
        let traces = forward(&net, &input).unwrap();
        assert!(backward_membrane_loss(&net, &traces, &input, &[0.0]).is_err());
    }

    #[test]
    fn backward_rejects_mismatched_traces() {
        let net = single_neuron_net(1.0, 1.25);
        let input = SpikeTensor::from_fn(1, 3, |_, _| true);
        let traces = forward(&net, &input).unwrap();
        assert!(backward(&net, &traces, &input, &TargetRates(vec![0.2, 0.1])).is_err());
        assert!(backward(&net, &[], &input, &TargetRates(vec![0.2])).is_err());
        let other = SpikeTensor::from_fn(1, 4, |_, _| true);
        assert!(backward(&net, &traces, &other, &TargetRates(vec![0.2])).is_err());
    }

    #[test]
    fn non_finite_gradient_is_reported() {
        let mut net = single_neuron_net(1.0, 1.25);
        net.hp.tau = 1e-320;
        let input = SpikeTensor::from_fn(1, 2, |_, _| true);
        let traces = forward(&net, &input).unwrap();
        assert!(matches!(
            backward(&net, &traces, &input, &TargetRates(vec![0.2])),
            Err(Error::NonFinite(_))
        ));
    }
}
