//! Event ingestion: NMNIST binary records, the neutral `REVT` container,
//! a synthetic spatiotemporal pattern generator, and rasterization of event
//! streams into dense binary spike tensors.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const NMNIST_SIDE: u16 = 34;
pub const NEUTRAL_MAGIC: &[u8; 4] = b"REVT";
pub const NEUTRAL_VERSION: u16 = 1;
const NEUTRAL_HEADER_LEN: usize = 4 + 2 + 2 + 2 + 1 + 1 + 4 + 8;
const NEUTRAL_EVENT_LEN: usize = 2 + 2 + 1 + 1 + 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub width: u16,
    pub height: u16,
    pub polarities: u8,
}

impl Geometry {
    pub const NMNIST: Geometry = Geometry {
        width: NMNIST_SIDE,
        height: NMNIST_SIDE,
        polarities: 2,
    };

    /// Number of raster rows this geometry flattens to.
    pub fn neurons(&self) -> usize {
        self.width as usize * self.height as usize * self.polarities as usize
    }

    /// Flattened index `polarity * (W*H) + y * W + x`.
    #[inline]
    pub fn index(&self, ev: &Event) -> usize {
        let plane = self.width as usize * self.height as usize;
        ev.polarity as usize * plane + ev.y as usize * self.width as usize + ev.x as usize
    }

    fn contains(&self, ev: &Event) -> bool {
        ev.x < self.width && ev.y < self.height && ev.polarity < self.polarities
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Event {
    pub x: u16,
    pub y: u16,
    pub polarity: u8,
    /// Microseconds from the start of the recording.
    pub timestamp: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventStream {
    pub geometry: Geometry,
    /// Sorted non-decreasing by timestamp.
    pub events: Vec<Event>,
    pub label: u32,
}

/// Dense binary raster of shape `neurons x steps`, stored neuron-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SpikeTensor {
    neurons: usize,
    steps: usize,
    data: Vec<u8>,
}

impl SpikeTensor {
    pub fn zeros(neurons: usize, steps: usize) -> Self {
        Self {
            neurons,
            steps,
            data: vec![0; neurons * steps],
        }
    }

    /// Builds a tensor from a predicate over `(neuron, step)`.
    pub fn from_fn(neurons: usize, steps: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut t = Self::zeros(neurons, steps);
        for n in 0..neurons {
            for s in 0..steps {
                if f(n, s) {
                    t.data[n * steps + s] = 1;
                }
            }
        }
        t
    }

    #[inline]
    pub fn neurons(&self) -> usize {
        self.neurons
    }

    #[inline]
    pub fn steps(&self) -> usize {
        self.steps
    }

    #[inline]
    pub fn get(&self, neuron: usize, step: usize) -> bool {
        self.data[neuron * self.steps + step] != 0
    }

    #[inline]
    pub fn set(&mut self, neuron: usize, step: usize, spike: bool) {
        self.data[neuron * self.steps + step] = spike as u8;
    }

    /// Spike train of one neuron over time.
    pub fn train(&self, neuron: usize) -> &[u8] {
        &self.data[neuron * self.steps..(neuron + 1) * self.steps]
    }

    pub fn total(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn count(&self, neuron: usize) -> usize {
        self.train(neuron).iter().map(|&v| v as usize).sum()
    }

    /// For every step, the indices of neurons that spike at that step.
    pub fn active_by_step(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.steps];
        for n in 0..self.neurons {
            for (t, &v) in self.train(n).iter().enumerate() {
                if v != 0 {
                    out[t].push(n);
                }
            }
        }
        out
    }

    pub fn hamming(&self, other: &SpikeTensor) -> usize {
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(a, b)| a != b)
            .count()
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v <= 1)
    }
}

/// Decodes NMNIST 5-byte records: x, y, then polarity in bit 7 of byte 2
/// followed by a 23-bit big-endian timestamp in microseconds.
pub fn parse_nmnist(bytes: &[u8], label: u32) -> Result<EventStream> {
    if !bytes.len().is_multiple_of(5) {
        return Err(Error::Format(format!(
            "length not divisible by 5 ({} bytes)",
            bytes.len()
        )));
    }
    let mut events = Vec::with_capacity(bytes.len() / 5);
    for (i, rec) in bytes.chunks_exact(5).enumerate() {
        let (x, y) = (rec[0] as u16, rec[1] as u16);
        if x >= NMNIST_SIDE || y >= NMNIST_SIDE {
            return Err(Error::Format(format!(
                "record {i}: address ({x}, {y}) outside 34x34 sensor"
            )));
        }
        let polarity = rec[2] >> 7;
        let timestamp = ((rec[2] as u32 & 0x7f) << 16) | ((rec[3] as u32) << 8) | rec[4] as u32;
        events.push(Event {
            x,
            y,
            polarity,
            timestamp,
        });
    }
    events.sort_by_key(|e| e.timestamp);
    Ok(EventStream {
        geometry: Geometry::NMNIST,
        events,
        label,
    })
}

/// Bins events into `steps` bins of `bin_width_us`. Bins past the end are
/// dropped and repeated events in one (neuron, bin) collapse to a single 1.
pub fn rasterize(stream: &EventStream, steps: usize, bin_width_us: u64) -> SpikeTensor {
    assert!(
        steps >= 1 && bin_width_us >= 1,
        "rasterize needs steps >= 1 and bin width >= 1"
    );
    let mut out = SpikeTensor::zeros(stream.geometry.neurons(), steps);
    for ev in &stream.events {
        let bin = ev.timestamp as u64 / bin_width_us;
        if bin < steps as u64 {
            out.set(stream.geometry.index(ev), bin as usize, true);
        }
    }
    out
}

/// Inverse of [`rasterize`] for 1-D rasters: each spike becomes an event at
/// `x = neuron`, `y = 0`, polarity 0, timestamped at the start of its bin.
pub fn raster_to_events(
    raster: &SpikeTensor,
    bin_width_us: u32,
    label: u32,
) -> Result<EventStream> {
    let width = u16::try_from(raster.neurons()).map_err(|_| {
        Error::Data(format!(
            "{} neurons exceed the u16 address range",
            raster.neurons()
        ))
    })?;
    let geometry = Geometry {
        width,
        height: 1,
        polarities: 1,
    };
    let mut events = Vec::with_capacity(raster.total());
    for (t, active) in raster.active_by_step().into_iter().enumerate() {
        let timestamp = (t as u32)
            .checked_mul(bin_width_us)
            .ok_or_else(|| Error::Data("timestamp overflows u32 microseconds".to_string()))?;
        for n in active {
            events.push(Event {
                x: n as u16,
                y: 0,
                polarity: 0,
                timestamp,
            });
        }
    }
    Ok(EventStream {
        geometry,
        events,
        label,
    })
}

pub fn encode_neutral(stream: &EventStream) -> Vec<u8> {
    let mut buf = Vec::with_capacity(NEUTRAL_HEADER_LEN + stream.events.len() * NEUTRAL_EVENT_LEN);
    buf.extend_from_slice(NEUTRAL_MAGIC);
    buf.extend_from_slice(&NEUTRAL_VERSION.to_le_bytes());
    buf.extend_from_slice(&stream.geometry.width.to_le_bytes());
    buf.extend_from_slice(&stream.geometry.height.to_le_bytes());
    buf.push(stream.geometry.polarities);
    buf.push(0);
    buf.extend_from_slice(&stream.label.to_le_bytes());
    buf.extend_from_slice(&(stream.events.len() as u64).to_le_bytes());
    for ev in &stream.events {
        buf.extend_from_slice(&ev.x.to_le_bytes());
        buf.extend_from_slice(&ev.y.to_le_bytes());
        buf.push(ev.polarity);
        buf.push(0);
        buf.extend_from_slice(&ev.timestamp.to_le_bytes());
    }
    buf
}

pub fn decode_neutral(bytes: &[u8]) -> Result<EventStream> {
    if bytes.len() < 4 || &bytes[..4] != NEUTRAL_MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    if bytes.len() < NEUTRAL_HEADER_LEN {
        return Err(Error::Format("truncated payload: incomplete header".into()));
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let version = u16_at(4);
    if version != NEUTRAL_VERSION {
        return Err(Error::Format(format!(
            "version mismatch: file has {version}, expected {NEUTRAL_VERSION}"
        )));
    }
    let geometry = Geometry {
        width: u16_at(6),
        height: u16_at(8),
        polarities: bytes[10],
    };
    let label = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
    let count = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let payload = &bytes[NEUTRAL_HEADER_LEN..];
    let expected = (count as u128) * NEUTRAL_EVENT_LEN as u128;
    if (payload.len() as u128) < expected {
        return Err(Error::Format(format!(
            "truncated payload: header declares {count} events, {} bytes present",
            payload.len()
        )));
    }
    let mut events = Vec::with_capacity(count as usize);
    let mut last = 0u32;
    for rec in payload.chunks_exact(NEUTRAL_EVENT_LEN).take(count as usize) {
        let ev = Event {
            x: u16::from_le_bytes([rec[0], rec[1]]),
            y: u16::from_le_bytes([rec[2], rec[3]]),
            polarity: rec[4],
            timestamp: u32::from_le_bytes(rec[6..10].try_into().unwrap()),
        };
        if !geometry.contains(&ev) {
            return Err(Error::Format(format!(
                "event {ev:?} outside geometry {geometry:?}"
            )));
        }
        if ev.timestamp < last {
            return Err(Error::Format("events not sorted by timestamp".into()));
        }
        last = ev.timestamp;
        events.push(ev);
    }
    Ok(EventStream {
        geometry,
        events,
        label,
    })
}

pub fn write_neutral(stream: &EventStream, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_neutral(stream))
        .map_err(|e| Error::io(path, e))
}

pub fn read_neutral(path: impl AsRef<Path>) -> Result<EventStream> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_neutral(&bytes)
}

/// A labelled, rasterized sample.
pub type Sample = (SpikeTensor, usize);

/// Spatiotemporal class templates for a desk-scale classification task.
///
/// Each class picks a random 30% of the input neurons; each chosen neuron
/// fires once, at a class-specific step. Samples are the template with every
/// spike deleted with probability `jitter / 2` and otherwise shifted by a
/// uniform integer offset in `[-round(jitter*T), round(jitter*T)]`.
#[derive(Clone, Debug)]
pub struct SyntheticTask {
    pub templates: Vec<SpikeTensor>,
    pub jitter: f64,
}

const SYNTH_ACTIVE_FRACTION: f64 = 0.3;
const SYNTH_MAX_SPIKES: usize = 1;

impl SyntheticTask {
    pub fn new(
        num_classes: usize,
        neurons: usize,
        steps: usize,
        jitter: f64,
        seed: u64,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Data(
                "synthetic task needs at least 2 classes".into(),
            ));
        }
        if neurons < num_classes {
            return Err(Error::Data(
                "synthetic task needs at least as many neurons as classes".into(),
            ));
        }
        if steps == 0 {
            return Err(Error::Data(
                "synthetic task needs at least one time step".into(),
            ));
        }
        if !(0.0..=1.0).contains(&jitter) {
            return Err(Error::Data("jitter must lie in [0, 1]".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let active = ((neurons as f64 * SYNTH_ACTIVE_FRACTION).round() as usize).max(1);
        let templates = (0..num_classes)
            .map(|_| {
                let mut t = SpikeTensor::zeros(neurons, steps);
                for n in sample(&mut rng, neurons, active) {
                    let k = rng.random_range(1..=SYNTH_MAX_SPIKES.min(steps));
                    for s in sample(&mut rng, steps, k) {
                        t.set(n, s, true);
                    }
                }
                t
            })
            .collect();
        Ok(Self { templates, jitter })
    }

    pub fn num_classes(&self) -> usize {
        self.templates.len()
    }

    /// Draws one noisy sample of `class`.
    pub fn sample<R: Rng>(&self, class: usize, rng: &mut R) -> SpikeTensor {
        let template = &self.templates[class];
        let steps = template.steps();
        let shift = (self.jitter * steps as f64).round() as i64;
        let drop_p = self.jitter / 2.0;
        let mut out = SpikeTensor::zeros(template.neurons(), steps);
        for n in 0..template.neurons() {
            for (t, &v) in template.train(n).iter().enumerate() {
                if v == 0 {
                    continue;
                }
                if drop_p > 0.0 && rng.random_bool(drop_p) {
                    continue;
                }
                let offset = if shift > 0 {
                    rng.random_range(-shift..=shift)
                } else {
                    0
                };
                let moved = (t as i64 + offset).clamp(0, steps as i64 - 1) as usize;
                out.set(n, moved, true);
            }
        }
        out
    }

    /// `count` samples with labels cycling through the classes.
    pub fn samples(&self, count: usize, seed: u64) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|i| {
                let class = i % self.num_classes();
                (self.sample(class, &mut rng), class)
            })
            .collect()
    }
}

/// Deterministic synthetic dataset: templates and sample noise both derive
/// from `seed`.
pub fn gen_synthetic(
    num_classes: usize,
    neurons: usize,
    steps: usize,
    jitter: f64,
    seed: u64,
    count: usize,
) -> Result<Vec<Sample>> {
    let task = SyntheticTask::new(num_classes, neurons, steps, jitter, seed)?;
    Ok(task.samples(count, seed.wrapping_add(0x9e37_79b9)))
}

/// Input file flavours recognised inside a dataset directory.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleFormat {
    Nmnist,
    Neutral,
}

impl SampleFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "bin" => Some(SampleFormat::Nmnist),
            "revt" => Some(SampleFormat::Neutral),
            _ => None,
        }
    }
}

/// Lists `(path, label)` under `dir/<label>/`, sorted by label then file
/// name. Labels come from the directory names, not the file contents.
pub fn list_samples(dir: impl AsRef<Path>) -> Result<Vec<(PathBuf, u32)>> {
    let dir = dir.as_ref();
    let mut out = Vec::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut class_dirs = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if !path.is_dir() {
            continue;
        }
        let Some(label) = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.parse::<u32>().ok())
        else {
            continue;
        };
        class_dirs.push((label, path));
    }
    class_dirs.sort();
    for (label, class_dir) in class_dirs {
        let mut files: Vec<PathBuf> = fs::read_dir(&class_dir)
            .map_err(|e| Error::io(&class_dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && SampleFormat::from_path(p).is_some())
            .collect();
        files.sort();
        out.extend(files.into_iter().map(|p| (p, label)));
    }
    Ok(out)
}

/// Reads one sample file, whichever format, with the given label.
pub fn read_sample(path: &Path, label: u32) -> Result<EventStream> {
    match SampleFormat::from_path(path) {
        Some(SampleFormat::Nmnist) => {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            parse_nmnist(&bytes, label).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
        }
        Some(SampleFormat::Neutral) => {
            let mut s =
                read_neutral(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            s.label = label;
            Ok(s)
        }
        None => Err(Error::Data(format!(
            "{}: unrecognised sample extension",
            path.display()
        ))),
    }
}

/// Loads and rasterizes up to `max` samples (0 = all) from a class-folder
/// tree. When capped, samples are taken round-robin across classes so the
/// subset stays balanced.
pub fn load_dataset(
    dir: impl AsRef<Path>,
    steps: usize,
    bin_width_us: u64,
    max: usize,
) -> Result<Vec<Sample>> {
    use rayon::prelude::*;

    let mut files = list_samples(dir.as_ref())?;
    if files.is_empty() {
        return Err(Error::Data(format!(
            "no samples under {}",
            dir.as_ref().display()
        )));
    }
    if max > 0 && files.len() > max {
        files = round_robin(files, max);
    }
    let rasters: Result<Vec<Sample>> = files
        .par_iter()
        .map(|(path, label)| {
            let stream = read_sample(path, *label)?;
            Ok((rasterize(&stream, steps, bin_width_us), *label as usize))
        })
        .collect();
    let rasters = rasters?;
    let width = rasters[0].0.neurons();
    if let Some((bad, _)) = rasters.iter().find(|(r, _)| r.neurons() != width) {
        return Err(Error::Data(format!(
            "mixed sensor geometries in dataset ({} vs {} neurons)",
            width,
            bad.neurons()
        )));
    }
    Ok(rasters)
}

fn round_robin(files: Vec<(PathBuf, u32)>, max: usize) -> Vec<(PathBuf, u32)> {
    let mut by_label: std::collections::BTreeMap<u32, std::collections::VecDeque<PathBuf>> =
        Default::default();
    for (p, l) in files {
        by_label.entry(l).or_default().push_back(p);
    }
    let mut out = Vec::with_capacity(max);
    while out.len() < max {
        let mut progressed = false;
        for (&label, queue) in by_label.iter_mut() {
            if out.len() == max {
                break;
            }
            if let Some(p) = queue.pop_front() {
                out.push((p, label));
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    out
}
