//! Hyperparameters and run-control settings.
//!
//! The on-disk grammar is flat `key = value` lines, `#` starts a comment.
//! Every key is optional; omitted keys take their defaults.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Hyperparams {
    pub th_init: f64,
    /// Surrogate scaling factor.
    pub s: f64,
    /// Surrogate steepness.
    pub tau: f64,
    pub lr_w: f64,
    /// Threshold learning rate. Zero gives the fixed-threshold baseline.
    pub lr_th: f64,
    pub current_decay: f64,
    pub voltage_decay: f64,
    pub v_rest: f64,
    pub true_rate: f64,
    pub false_rate: f64,
    pub time_steps: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub th_clamp_min: Option<f64>,

    /// Event binning width for rasterizing event streams.
    pub bin_width_us: u64,
    /// Hidden layer sizes, dash separated (`500-500`). Input and output
    /// sizes come from the data.
    pub hidden: Vec<usize>,
    /// Caps on the number of samples read per split (0 = no cap).
    pub max_train: usize,
    pub max_test: usize,

    pub synth_classes: usize,
    pub synth_inputs: usize,
    pub synth_train: usize,
    pub synth_test: usize,
    pub synth_jitter: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            th_init: 1.25,
            s: 1.5,
            tau: 3.75,
            lr_w: 0.001,
            lr_th: 0.001,
            current_decay: 0.75,
            voltage_decay: 0.97,
            v_rest: 0.0,
            true_rate: 0.2,
            false_rate: 0.03,
            time_steps: 300,
            batch_size: 8,
            epochs: 50,
            seed: 1,
            th_clamp_min: None,
            bin_width_us: 1000,
            hidden: vec![500, 500],
            max_train: 0,
            max_test: 0,
            synth_classes: 2,
            synth_inputs: 20,
            synth_train: 200,
            synth_test: 100,
            synth_jitter: 0.1,
        }
    }
}

/// Every recognised key, in serialization order.
pub const KEYS: &[&str] = &[
    "th_init",
    "s",
    "tau",
    "lr_w",
    "lr_th",
    "current_decay",
    "voltage_decay",
    "v_rest",
    "true_rate",
    "false_rate",
    "time_steps",
    "batch_size",
    "epochs",
    "seed",
    "th_clamp_min",
    "bin_width_us",
    "hidden",
    "max_train",
    "max_test",
    "synth_classes",
    "synth_inputs",
    "synth_train",
    "synth_test",
    "synth_jitter",
];

fn parse_num<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse::<V>()
        .map_err(|_| Error::validation(key, format!("cannot parse `{value}`")))
}

fn parse_hidden(value: &str) -> Result<Vec<usize>> {
    let value = value.trim();
    if value.is_empty() || value == "none" {
        return Ok(Vec::new());
    }
    value
        .split('-')
        .map(|p| parse_num::<usize>("hidden", p.trim()))
        .collect()
}

impl Hyperparams {
    /// Sets one key from its textual value. Does not validate cross-field
    /// invariants; call [`Hyperparams::validate`] afterwards.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "th_init" => self.th_init = parse_num(key, v)?,
            "s" => self.s = parse_num(key, v)?,
            "tau" => self.tau = parse_num(key, v)?,
            "lr_w" => self.lr_w = parse_num(key, v)?,
            "lr_th" => self.lr_th = parse_num(key, v)?,
            "current_decay" => self.current_decay = parse_num(key, v)?,
            "voltage_decay" => self.voltage_decay = parse_num(key, v)?,
            "v_rest" => self.v_rest = parse_num(key, v)?,
            "true_rate" => self.true_rate = parse_num(key, v)?,
            "false_rate" => self.false_rate = parse_num(key, v)?,
            "time_steps" => self.time_steps = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "th_clamp_min" => {
                self.th_clamp_min = match v {
                    "" | "none" | "off" => None,
                    _ => Some(parse_num(key, v)?),
                }
            }
            "bin_width_us" => self.bin_width_us = parse_num(key, v)?,
            "hidden" => self.hidden = parse_hidden(v)?,
            "max_train" => self.max_train = parse_num(key, v)?,
            "max_test" => self.max_test = parse_num(key, v)?,
            "synth_classes" => self.synth_classes = parse_num(key, v)?,
            "synth_inputs" => self.synth_inputs = parse_num(key, v)?,
            "synth_train" => self.synth_train = parse_num(key, v)?,
            "synth_test" => self.synth_test = parse_num(key, v)?,
            "synth_jitter" => self.synth_jitter = parse_num(key, v)?,
            _ => return Err(Error::validation(key, "unknown key")),
        }
        Ok(())
    }

    /// Applies a `key=value` override as given on the command line.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment.split_once('=').ok_or_else(|| Error::Parse {
            line: 0,
            msg: format!("override `{assignment}` is not key=value"),
        })?;
        self.set(k.trim(), v)?;
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            ("th_init", self.th_init),
            ("s", self.s),
            ("tau", self.tau),
            ("lr_w", self.lr_w),
            ("lr_th", self.lr_th),
            ("current_decay", self.current_decay),
            ("voltage_decay", self.voltage_decay),
            ("v_rest", self.v_rest),
            ("true_rate", self.true_rate),
            ("false_rate", self.false_rate),
            ("synth_jitter", self.synth_jitter),
        ];
        for (key, v) in finite {
            if !v.is_finite() {
                return Err(Error::validation(key, "must be finite"));
            }
        }
        if !(0.0..1.0).contains(&self.current_decay) {
            return Err(Error::validation("current_decay", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.voltage_decay) {
            return Err(Error::validation("voltage_decay", "must lie in [0, 1)"));
        }
        if self.tau <= 0.0 {
            return Err(Error::validation("tau", "must be > 0"));
        }
        if self.s <= 0.0 {
            return Err(Error::validation("s", "must be > 0"));
        }
        if self.th_init <= self.v_rest {
            return Err(Error::validation("th_init", "must exceed v_rest"));
        }
        if self.lr_w < 0.0 {
            return Err(Error::validation("lr_w", "must be >= 0"));
        }
        if self.lr_th < 0.0 {
            return Err(Error::validation("lr_th", "must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.true_rate) {
            return Err(Error::validation("true_rate", "must lie in [0, 1]"));
        }
        if self.false_rate < 0.0 || self.false_rate >= self.true_rate {
            return Err(Error::validation(
                "false_rate",
                "must satisfy 0 <= false_rate < true_rate",
            ));
        }
        for (key, v) in [
            ("time_steps", self.time_steps),
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
        ] {
            if v == 0 {
                return Err(Error::validation(key, "must be a positive integer"));
            }
        }
        if let Some(c) = self.th_clamp_min {
            if !c.is_finite() {
                return Err(Error::validation("th_clamp_min", "must be finite"));
            }
        }
        if self.bin_width_us == 0 {
            return Err(Error::validation("bin_width_us", "must be >= 1"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::validation("hidden", "layer sizes must be >= 1"));
        }
        if self.synth_classes < 2 {
            return Err(Error::validation("synth_classes", "must be >= 2"));
        }
        if self.synth_inputs < self.synth_classes {
            return Err(Error::validation(
                "synth_inputs",
                "must be >= synth_classes",
            ));
        }
        if !(0.0..=1.0).contains(&self.synth_jitter) {
            return Err(Error::validation("synth_jitter", "must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Parses the config grammar. Omitted keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut hp = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: idx + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Parse {
                    line: idx + 1,
                    msg: "empty key".into(),
                });
            }
            if !seen.insert(key.to_string()) {
                return Err(Error::Parse {
                    line: idx + 1,
                    msg: format!("duplicate key `{key}`"),
                });
            }
            hp.set(key, value)?;
        }
        hp.validate()?;
        Ok(hp)
    }

    /// Serializes every key. Floats use the shortest round-trip
    /// representation so `parse(to_config_string())` is exact.
    pub fn to_config_string(&self) -> String {
        let mut out = String::new();
        for &key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.value_string(key));
        }
        out
    }

    fn value_string(&self, key: &str) -> String {
        match key {
            "th_init" => self.th_init.to_string(),
            "s" => self.s.to_string(),
            "tau" => self.tau.to_string(),
            "lr_w" => self.lr_w.to_string(),
            "lr_th" => self.lr_th.to_string(),
            "current_decay" => self.current_decay.to_string(),
            "voltage_decay" => self.voltage_decay.to_string(),
            "v_rest" => self.v_rest.to_string(),
            "true_rate" => self.true_rate.to_string(),
            "false_rate" => self.false_rate.to_string(),
            "time_steps" => self.time_steps.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "epochs" => self.epochs.to_string(),
            "seed" => self.seed.to_string(),
            "th_clamp_min" => self
                .th_clamp_min
                .map_or("none".to_string(), |c| c.to_string()),
            "bin_width_us" => self.bin_width_us.to_string(),
            "hidden" => {
                if self.hidden.is_empty() {
                    "none".to_string()
                } else {
                    self.hidden
                        .iter()
                        .map(|h| h.to_string())
                        .collect::<Vec<_>>()
                        .join("-")
                }
            }
            "max_train" => self.max_train.to_string(),
            "max_test" => self.max_test.to_string(),
            "synth_classes" => self.synth_classes.to_string(),
            "synth_inputs" => self.synth_inputs.to_string(),
            "synth_train" => self.synth_train.to_string(),
            "synth_test" => self.synth_test.to_string(),
            "synth_jitter" => self.synth_jitter.to_string(),
            _ => unreachable!("unknown key {key}"),
        }
    }
}

pub fn load_config(path: impl AsRef<Path>) -> Result<Hyperparams> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Hyperparams::parse(&text)
}
