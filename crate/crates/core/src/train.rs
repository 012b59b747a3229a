//! Epoch loop: shuffled mini-batches, per-sample forward/backward in
//! parallel, gradients averaged in sample order, one Adam step per batch,
//! then a test pass. Emits [`RunMetrics`] for both splits every epoch.

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bptt::{backward, loss_mse_rate, GradientSet, TargetRates};
use crate::config::Hyperparams;
use crate::diagnostics::{LayerActivity, NetworkActivity, RunMetrics, Split};
use crate::error::{Error, Result};
use crate::events_io::{gen_synthetic, Sample};
use crate::network::{forward, output_counts, predict_from_counts, Network, NetworkSpec};
use crate::optim::{step, AdamState};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(train: Vec<Sample>, test: Vec<Sample>) -> Result<Self> {
        let first = train
            .first()
            .ok_or_else(|| Error::Data("empty training set".into()))?;
        let (width, steps) = (first.0.neurons(), first.0.steps());
        if test.is_empty() {
            return Err(Error::Data("empty test set".into()));
        }
        if train
            .iter()
            .chain(&test)
            .any(|(r, _)| r.neurons() != width || r.steps() != steps)
        {
            return Err(Error::Data("samples disagree on raster shape".into()));
        }
        let classes = train
            .iter()
            .chain(&test)
            .map(|(_, l)| l + 1)
            .max()
            .unwrap_or(0)
            .max(2);
        Ok(Self {
            train,
            test,
            classes,
        })
    }

    pub fn input_size(&self) -> usize {
        self.train[0].0.neurons()
    }

    pub fn steps(&self) -> usize {
        self.train[0].0.steps()
    }

    /// Network shape implied by the data and the configured hidden sizes.
    pub fn network_spec(&self, hp: &Hyperparams) -> Result<NetworkSpec> {
        NetworkSpec::with_hidden(self.input_size(), &hp.hidden, self.classes)
    }
}

/// Synthetic train/test split from the `synth_*` settings. Train and test
/// share class templates and draw independent noise.
pub fn synthetic_dataset(hp: &Hyperparams) -> Result<Dataset> {
    let all = gen_synthetic(
        hp.synth_classes,
        hp.synth_inputs,
        hp.time_steps,
        hp.synth_jitter,
        hp.seed,
        hp.synth_train + hp.synth_test,
    )?;
    let mut all = all;
    let test = all.split_off(hp.synth_train);
    let mut ds = Dataset::new(all, test)?;
    ds.classes = hp.synth_classes;
    Ok(ds)
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Stop after this many epochs without a test accuracy improvement.
    pub patience: Option<usize>,
    /// Stop once this much wall time has elapsed (checked between epochs).
    pub time_budget: Option<Duration>,
    /// Record real elapsed seconds; when false the column is 0 so repeated
    /// runs produce identical files.
    pub record_wall_time: bool,
    /// Epochs already completed, when resuming from a checkpoint. Epoch
    /// numbering and the shuffle order continue from here.
    pub completed_epochs: usize,
}

/// Per-epoch results handed to the observer.
pub struct EpochReport<'a, T> {
    pub train: &'a RunMetrics,
    pub test: &'a RunMetrics,
    pub net: &'a Network<T>,
    pub optimizer: &'a AdamState<T>,
    /// Dead-neuron percentage per layer within each training batch, in
    /// batch order.
    pub batch_dead_pct: &'a [Vec<f64>],
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub net: Network<T>,
    pub optimizer: AdamState<T>,
    pub history: Vec<(RunMetrics, RunMetrics)>,
}

impl<T> TrainOutcome<T> {
    pub fn test_accuracies(&self) -> Vec<f64> {
        self.history.iter().map(|(_, t)| t.accuracy).collect()
    }

    pub fn last(&self) -> Option<&(RunMetrics, RunMetrics)> {
        self.history.last()
    }
}

/// First epoch (1-based) whose test accuracy reaches `threshold`.
pub fn epochs_to_reach(history: &[(RunMetrics, RunMetrics)], threshold: f64) -> Option<usize> {
    history
        .iter()
        .find(|(_, t)| t.accuracy >= threshold)
        .map(|(_, t)| t.epoch)
}

struct SampleResult<T> {
    loss: f64,
    correct: bool,
    activity: Vec<LayerActivity>,
    grads: Option<GradientSet<T>>,
}

fn run_sample<T: Scalar>(
    net: &Network<T>,
    sample: &Sample,
    with_grad: bool,
) -> Result<SampleResult<T>> {
    let (input, label) = sample;
    let traces = forward(net, input)?;
    let target = TargetRates::for_label(*label, net.spec.output_size(), &net.hp)?;
    let loss = loss_mse_rate(traces.last().unwrap(), &target)?.as_f64();
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    let correct = predict_from_counts(&output_counts(&traces)) == *label;
    let activity = traces
        .iter()
        .map(|tr| {
            let mut a = LayerActivity::new(tr.neurons());
            a.observe(tr);
            a
        })
        .collect();
    let grads = if with_grad {
        Some(backward(net, &traces, input, &target)?)
    } else {
        None
    };
    Ok(SampleResult {
        loss,
        correct,
        activity,
        grads,
    })
}

struct Tally {
    loss: f64,
    correct: usize,
    count: usize,
    activity: NetworkActivity,
}

impl Tally {
    fn new<T: Scalar>(net: &Network<T>) -> Self {
        Self {
            loss: 0.0,
            correct: 0,
            count: 0,
            activity: NetworkActivity::new(net),
        }
    }

    fn add<T>(&mut self, r: &SampleResult<T>) {
        self.loss += r.loss;
        self.correct += r.correct as usize;
        self.count += 1;
        for (acc, a) in self.activity.layers.iter_mut().zip(&r.activity) {
            acc.merge(a);
        }
    }

    fn mean_loss(&self) -> f64 {
        self.loss / self.count.max(1) as f64
    }

    fn accuracy(&self) -> f64 {
        self.correct as f64 / self.count.max(1) as f64
    }
}

/// Loss, accuracy and activity of `net` over `samples` without training.
pub fn evaluate<T: Scalar>(
    net: &Network<T>,
    samples: &[Sample],
) -> Result<(f64, f64, NetworkActivity)> {
    let results: Vec<SampleResult<T>> = samples
        .par_iter()
        .map(|s| run_sample(net, s, false))
        .collect::<Result<_>>()?;
    let mut tally = Tally::new(net);
    for r in &results {
        tally.add(r);
    }
    Ok((tally.mean_loss(), tally.accuracy(), tally.activity))
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    idx.shuffle(&mut rng);
    idx
}

/// Trains `net` in place of a copy and returns the final state and history.
/// `on_epoch` runs after every epoch; an error from it aborts training.
pub fn train<T, F>(
    net: Network<T>,
    optimizer: Option<AdamState<T>>,
    data: &Dataset,
    opts: &TrainOptions,
    mut on_epoch: F,
) -> Result<TrainOutcome<T>>
where
    T: Scalar,
    F: FnMut(&EpochReport<'_, T>) -> Result<()>,
{
    let hp = net.hp.clone();
    let net_init = net.clone();
    let mut net = net;
    let mut state = match optimizer {
        Some(st) if st.matches(&net) => st,
        Some(_) => return Err(Error::shape("optimizer state does not match network")),
        None => AdamState::new(&net),
    };
    if data.input_size() != net.spec.input_size() || data.classes > net.spec.output_size() {
        return Err(Error::shape(format!(
            "data ({} inputs, {} classes) does not fit network {}",
            data.input_size(),
            data.classes,
            net.spec
        )));
    }
    let start = Instant::now();
    let mut history = Vec::with_capacity(hp.epochs);
    let mut best = f64::NEG_INFINITY;
    let mut since_best = 0usize;

    let first = opts.completed_epochs + 1;
    for epoch in first..first + hp.epochs {
        let order = epoch_order(data.train.len(), hp.seed, epoch);
        let mut tally = Tally::new(&net);
        let mut batch_dead = Vec::with_capacity(order.len().div_ceil(hp.batch_size));
        for batch in order.chunks(hp.batch_size) {
            let results: Vec<SampleResult<T>> = batch
                .par_iter()
                .map(|&i| run_sample(&net, &data.train[i], true))
                .collect::<Result<_>>()?;
            let grads: Vec<GradientSet<T>> =
                results.iter().map(|r| r.grads.clone().unwrap()).collect();
            let mut batch_tally = Tally::new(&net);
            for r in &results {
                tally.add(r);
                batch_tally.add(r);
            }
            batch_dead.push(
                batch_tally
                    .activity
                    .layers
                    .iter()
                    .map(|a| a.dead_pct())
                    .collect(),
            );
            let mean = GradientSet::mean(&net, &grads);
            step(&mut net, &mean, &mut state, &hp)?;
        }
        if !net.is_finite() {
            return Err(Error::NonFinite("parameters after update".into()));
        }
        let wall = if opts.record_wall_time {
            start.elapsed().as_secs_f64()
        } else {
            0.0
        };
        let train_metrics = RunMetrics::from_activity(
            epoch,
            Split::Train,
            tally.mean_loss(),
            tally.accuracy(),
            &tally.activity,
            &net,
            &net_init,
            wall,
        )?;
        let (test_loss, test_acc, test_act) = evaluate(&net, &data.test)?;
        let wall = if opts.record_wall_time {
            start.elapsed().as_secs_f64()
        } else {
            0.0
        };
        let test_metrics = RunMetrics::from_activity(
            epoch,
            Split::Test,
            test_loss,
            test_acc,
            &test_act,
            &net,
            &net_init,
            wall,
        )?;
        on_epoch(&EpochReport {
            train: &train_metrics,
            test: &test_metrics,
            net: &net,
            optimizer: &state,
            batch_dead_pct: &batch_dead,
        })?;
        history.push((train_metrics, test_metrics));

        if test_acc > best {
            best = test_acc;
            since_best = 0;
        } else {
            since_best += 1;
        }
        if opts.patience.is_some_and(|p| since_best >= p) {
            break;
        }
        if opts.time_budget.is_some_and(|b| start.elapsed() >= b) {
            break;
        }
    }
    Ok(TrainOutcome {
        net,
        optimizer: state,
        history,
    })
}
