//! Training observers: dead-neuron percentage, mean spike rate, weight
//! drift from initialization, and the per-epoch metrics CSV.

use std::fmt::Write as _;
use std::io::Write;

use crate::error::{Error, Result};
use crate::network::Network;
use crate::neuron::LayerTrace;
use crate::scalar::Scalar;

pub const CSV_HEADER: &str = "epoch,split,loss,accuracy,layer,dead_pct,mean_spike_rate,mean_threshold,weight_drift,wall_seconds";

/// Per-layer spike bookkeeping over a window of samples.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct LayerActivity {
    ever_spiked: Vec<bool>,
    spikes: u64,
    samples: u64,
    steps: u64,
}

impl LayerActivity {
    pub fn new(neurons: usize) -> Self {
        Self {
            ever_spiked: vec![false; neurons],
            ..Default::default()
        }
    }

    pub fn observe<T: Scalar>(&mut self, trace: &LayerTrace<T>) {
        debug_assert_eq!(trace.neurons(), self.ever_spiked.len());
        for (i, seen) in self.ever_spiked.iter_mut().enumerate() {
            let c = trace.spikes.count(i);
            *seen |= c > 0;
            self.spikes += c as u64;
        }
        self.samples += 1;
        self.steps += trace.steps() as u64;
    }

    pub fn merge(&mut self, other: &LayerActivity) {
        for (a, b) in self.ever_spiked.iter_mut().zip(&other.ever_spiked) {
            *a |= *b;
        }
        self.spikes += other.spikes;
        self.samples += other.samples;
        self.steps += other.steps;
    }

    pub fn samples(&self) -> u64 {
        self.samples
    }

    pub fn dead_pct(&self) -> f64 {
        let n = self.ever_spiked.len();
        if n == 0 {
            return 0.0;
        }
        let dead = self.ever_spiked.iter().filter(|s| !**s).count();
        100.0 * dead as f64 / n as f64
    }

    /// Spikes per neuron per time step.
    pub fn mean_spike_rate(&self) -> f64 {
        let denom = self.ever_spiked.len() as u64 * self.steps;
        if denom == 0 {
            0.0
        } else {
            self.spikes as f64 / denom as f64
        }
    }
}

/// Activity for every layer of a network.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkActivity {
    pub layers: Vec<LayerActivity>,
}

impl NetworkActivity {
    pub fn new<T: Scalar>(net: &Network<T>) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerActivity::new(l.fan_out()))
                .collect(),
        }
    }

    pub fn observe<T: Scalar>(&mut self, traces: &[LayerTrace<T>]) {
        for (acc, tr) in self.layers.iter_mut().zip(traces) {
            acc.observe(tr);
        }
    }
}

fn accumulate<T: Scalar>(
    traces_over_epoch: &[Vec<LayerTrace<T>>],
    layer: usize,
) -> Result<LayerActivity> {
    let first = traces_over_epoch
        .first()
        .ok_or_else(|| Error::Data("empty epoch: no samples".into()))?;
    let tr = first
        .get(layer)
        .ok_or_else(|| Error::shape(format!("no layer {layer}")))?;
    let mut acc = LayerActivity::new(tr.neurons());
    for sample in traces_over_epoch {
        let tr = sample
            .get(layer)
            .ok_or_else(|| Error::shape(format!("no layer {layer}")))?;
        if tr.neurons() != acc.ever_spiked.len() {
            return Err(Error::shape("layer width changes across samples"));
        }
        acc.observe(tr);
    }
    Ok(acc)
}

/// Percentage of neurons in `layer` silent across every sample and step.
pub fn dead_neuron_pct<T: Scalar>(
    traces_over_epoch: &[Vec<LayerTrace<T>>],
    layer: usize,
) -> Result<f64> {
    Ok(accumulate(traces_over_epoch, layer)?.dead_pct())
}

pub fn mean_spike_rate<T: Scalar>(
    traces_over_epoch: &[Vec<LayerTrace<T>>],
    layer: usize,
) -> Result<f64> {
    Ok(accumulate(traces_over_epoch, layer)?.mean_spike_rate())
}

/// Mean absolute elementwise weight change across all layers.
pub fn weight_drift<T: Scalar>(net: &Network<T>, net_init: &Network<T>) -> Result<f64> {
    if net.spec != net_init.spec {
        return Err(Error::shape("drift between networks of different shape"));
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for (a, b) in net.layers.iter().zip(&net_init.layers) {
        for (&x, &y) in a.weights.as_slice().iter().zip(b.weights.as_slice()) {
            sum += (x - y).abs().as_f64();
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

pub fn mean_threshold<T: Scalar>(net: &Network<T>, layer: usize) -> f64 {
    let th = &net.layers[layer].thresholds;
    th.iter().map(|t| t.as_f64()).sum::<f64>() / th.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Metrics for one (epoch, split).
#[derive(Clone, Debug, PartialEq)]
pub struct RunMetrics {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
    pub dead_pct: Vec<f64>,
    pub mean_spike_rate: Vec<f64>,
    pub mean_threshold: Vec<f64>,
    pub weight_drift: f64,
    pub wall_seconds: f64,
}

impl RunMetrics {
    pub fn from_activity<T: Scalar>(
        epoch: usize,
        split: Split,
        loss: f64,
        accuracy: f64,
        activity: &NetworkActivity,
        net: &Network<T>,
        net_init: &Network<T>,
        wall_seconds: f64,
    ) -> Result<Self> {
        Ok(Self {
            epoch,
            split,
            loss,
            accuracy,
            dead_pct: activity.layers.iter().map(|a| a.dead_pct()).collect(),
            mean_spike_rate: activity
                .layers
                .iter()
                .map(|a| a.mean_spike_rate())
                .collect(),
            mean_threshold: (0..net.num_layers())
                .map(|l| mean_threshold(net, l))
                .collect(),
            weight_drift: weight_drift(net, net_init)?,
            wall_seconds,
        })
    }

    /// One CSV row per layer; layers are numbered from 1.
    pub fn csv_rows(&self) -> String {
        let mut out = String::new();
        for l in 0..self.dead_pct.len() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                self.epoch,
                self.split.as_str(),
                fmt_sig(self.loss),
                fmt_sig(self.accuracy),
                l + 1,
                fmt_sig(self.dead_pct[l]),
                fmt_sig(self.mean_spike_rate[l]),
                fmt_sig(self.mean_threshold[l]),
                fmt_sig(self.weight_drift),
                fmt_sig(self.wall_seconds),
            );
        }
        out
    }
}

/// `%.9g`-style formatting: nine significant digits, trailing zeros trimmed,
/// scientific notation outside `[1e-5, 1e9)`.
pub fn fmt_sig(x: f64) -> String {
    const DIGITS: i32 = 9;
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{:.*e}", (DIGITS - 1) as usize, x);
    let (mantissa, exp) = sci.split_once('e').unwrap();
    let exp: i32 = exp.parse().unwrap();
    if !(-5..DIGITS).contains(&exp) {
        let m = trim_zeros(mantissa);
        return format!("{m}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs());
    }
    let decimals = (DIGITS - 1 - exp).max(0) as usize;
    trim_zeros(&format!("{:.*}", decimals, x)).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Writes the metrics file: `# ` comment lines first, then the header, then
/// rows as they are appended.
pub struct MetricsWriter<W: Write> {
    out: W,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(mut out: W, comments: &[String]) -> std::io::Result<Self> {
        for c in comments {
            for line in c.lines() {
                writeln!(out, "# {line}")?;
            }
        }
        writeln!(out, "{CSV_HEADER}")?;
        Ok(Self { out })
    }

    pub fn append(&mut self, m: &RunMetrics) -> std::io::Result<()> {
        self.out.write_all(m.csv_rows().as_bytes())?;
        self.out.flush()
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}
