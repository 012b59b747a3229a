//! Adam with two parameter groups: weights at `lr_w`, thresholds at `lr_th`.

use crate::bptt::GradientSet;
use crate::config::Hyperparams;
use crate::error::{Error, Result};
use crate::network::Network;
use crate::scalar::Scalar;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Scalar> Moments<T> {
    fn zeros(n: usize) -> Self {
        Self {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
        }
    }
}

/// First and second moment buffers per layer and per parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub weights: Vec<Moments<T>>,
    pub thresholds: Vec<Moments<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(net: &Network<T>) -> Self {
        Self {
            weights: net
                .layers
                .iter()
                .map(|l| Moments::zeros(l.weights.as_slice().len()))
                .collect(),
            thresholds: net
                .layers
                .iter()
                .map(|l| Moments::zeros(l.thresholds.len()))
                .collect(),
            step: 0,
        }
    }

    pub fn matches(&self, net: &Network<T>) -> bool {
        self.weights.len() == net.layers.len()
            && self.thresholds.len() == net.layers.len()
            && net.layers.iter().enumerate().all(|(i, l)| {
                let (w, t) = (&self.weights[i], &self.thresholds[i]);
                w.m.len() == l.weights.as_slice().len()
                    && w.v.len() == w.m.len()
                    && t.m.len() == l.thresholds.len()
                    && t.v.len() == t.m.len()
            })
    }
}

struct AdamStep<T> {
    b1: T,
    b2: T,
    eps: T,
    bias1: T,
    bias2: T,
}

impl<T: Scalar> AdamStep<T> {
    fn apply(&self, params: &mut [T], grads: &[T], moments: &mut Moments<T>, lr: T) {
        let one = T::one();
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(moments.m.iter_mut().zip(moments.v.iter_mut()))
        {
            *m = self.b1 * *m + (one - self.b1) * g;
            *v = self.b2 * *v + (one - self.b2) * g * g;
            let m_hat = *m / self.bias1;
            let v_hat = *v / self.bias2;
            *p = *p - lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// One optimizer step in place. Thresholds are left untouched (bit for bit)
/// when `lr_th == 0`; otherwise they are clamped to `th_clamp_min` if set.
pub fn step<T: Scalar>(
    net: &mut Network<T>,
    grads: &GradientSet<T>,
    state: &mut AdamState<T>,
    hp: &Hyperparams,
) -> Result<()> {
    if !grads.matches(net) {
        return Err(Error::shape("gradient set does not match network"));
    }
    if !state.matches(net) {
        return Err(Error::shape("optimizer state does not match network"));
    }
    state.step += 1;
    let k = state.step as i32;
    let adam = AdamStep {
        b1: T::lit(BETA1),
        b2: T::lit(BETA2),
        eps: T::lit(EPSILON),
        bias1: T::one() - T::lit(BETA1).powi(k),
        bias2: T::one() - T::lit(BETA2).powi(k),
    };
    let lr_w = T::lit(hp.lr_w);
    let lr_th = T::lit(hp.lr_th);
    let clamp = hp.th_clamp_min.map(T::lit);

    for (idx, (layer, g)) in net.layers.iter_mut().zip(&grads.layers).enumerate() {
        adam.apply(
            layer.weights.as_mut_slice(),
            g.d_weights.as_slice(),
            &mut state.weights[idx],
            lr_w,
        );
        if hp.lr_th == 0.0 {
            continue;
        }
        adam.apply(
            &mut layer.thresholds,
            &g.d_thresholds,
            &mut state.thresholds[idx],
            lr_th,
        );
        if let Some(floor) = clamp {
            for th in layer.thresholds.iter_mut() {
                if *th < floor {
                    *th = floor;
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{init_network, NetworkSpec};
    use crate::scalar::Matrix;

    fn setup() -> (Network<f64>, GradientSet<f64>) {
        let spec = NetworkSpec::new(vec![3, 2]).unwrap();
        let net = init_network(&spec, &Hyperparams::default(), 4);
        let mut g = GradientSet::zeros_like(&net);
        g.layers[0].d_weights =
            Matrix::from_vec(2, 3, vec![0.5, -2.0, 1e-3, 0.0, 3.0, -0.1]).unwrap();
        g.layers[0].d_thresholds = vec![0.7, -0.2];
        (net, g)
    }

    #[test]
    fn zero_threshold_rate_freezes_thresholds() {
        let (mut net, g) = setup();
        let mut hp = Hyperparams::default();
        hp.lr_th = 0.0;
        hp.th_clamp_min = Some(10.0);
        let before = net.layers[0].thresholds.clone();
        let mut st = AdamState::new(&net);
        for _ in 0..5 {
            step(&mut net, &g, &mut st, &hp).unwrap();
        }
        let same = before
            .iter()
            .zip(&net.layers[0].thresholds)
            .all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same);
    }

    #[test]
    fn first_step_is_signed_learning_rate() {
        let (mut net, g) = setup();
        let hp = Hyperparams::default();
        let before = net.clone();
        let mut st = AdamState::new(&net);
        step(&mut net, &g, &mut st, &hp).unwrap();
        // k = 1: m_hat = g, v_hat = g^2, so delta = -lr * g / (|g| + eps)
        for (idx, &gw) in g.layers[0].d_weights.as_slice().iter().enumerate() {
            let delta =
                net.layers[0].weights.as_slice()[idx] - before.layers[0].weights.as_slice()[idx];
            let expected = -hp.lr_w * gw / (gw.abs() + EPSILON);
            assert!((delta - expected).abs() < 1e-15, "{delta} vs {expected}");
            if gw != 0.0 {
                assert_eq!(delta.signum(), -gw.signum());
            }
        }
        for (i, &gt) in g.layers[0].d_thresholds.iter().enumerate() {
            let delta = net.layers[0].thresholds[i] - before.layers[0].thresholds[i];
            assert!((delta + hp.lr_th * gt.signum()).abs() < 1e-9);
        }
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let (mut net, _) = setup();
        let g = GradientSet::zeros_like(&net);
        let before = net.clone();
        let mut st = AdamState::new(&net);
        st.weights[0].m[0] = 0.5;
        step(&mut net, &g, &mut st, &Hyperparams::default()).unwrap();
        assert_eq!(st.weights[0].m[0], 0.45);
        assert_eq!(net.layers[0].thresholds, before.layers[0].thresholds);
        assert_eq!(
            &net.layers[0].weights.as_slice()[1..],
            &before.layers[0].weights.as_slice()[1..]
        );
    }

    #[test]
    fn clamp_floors_thresholds() {
        let (mut net, mut g) = setup();
        g.layers[0].d_thresholds = vec![1.0, 1.0];
        let mut hp = Hyperparams::default();
        hp.lr_th = 1.0;
        hp.th_clamp_min = Some(0.9);
        let mut st = AdamState::new(&net);
        step(&mut net, &g, &mut st, &hp).unwrap();
        assert_eq!(net.layers[0].thresholds, vec![0.9, 0.9]);
    }

    #[test]
    fn deterministic_and_shape_checked() {
        let (net, g) = setup();
        let hp = Hyperparams::default();
        let (mut a, mut b) = (net.clone(), net.clone());
        let (mut sa, mut sb) = (AdamState::new(&net), AdamState::new(&net));
        step(&mut a, &g, &mut sa, &hp).unwrap();
        step(&mut b, &g, &mut sb, &hp).unwrap();
        assert_eq!((a, sa), (b, sb));

        let spec = NetworkSpec::new(vec![4, 2]).unwrap();
        let other = init_network::<f64>(&spec, &hp, 1);
        let mut n = net.clone();
        let mut st = AdamState::new(&net);
        assert!(step(&mut n, &GradientSet::zeros_like(&other), &mut st, &hp).is_err());
        assert!(step(&mut n, &g, &mut AdamState::new(&other), &hp).is_err());
    }
}
