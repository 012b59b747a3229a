use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{CliError, CliResult};
use crate::checkpoint;
use crate::error::Error;
use crate::events_io::{decode_neutral, list_samples, parse_nmnist, EventStream};

fn describe_stream(out: &mut String, kind: &str, s: &EventStream) {
    let _ = writeln!(out, "format: {kind}");
    let _ = writeln!(
        out,
        "geometry: {}x{}x{}",
        s.geometry.width, s.geometry.height, s.geometry.polarities
    );
    let _ = writeln!(out, "label: {}", s.label);
    let _ = writeln!(out, "events: {}", s.events.len());
    if let (Some(a), Some(b)) = (s.events.first(), s.events.last()) {
        let _ = writeln!(out, "time_span_us: {}..{}", a.timestamp, b.timestamp);
    }
}

/// Human-readable summary of a `.revt`/`.bin` sample, an `RSNN`
/// checkpoint, or a dataset directory (sample counts per split and class).
pub fn inspect(path: &Path) -> CliResult<String> {
    let mut out = String::new();
    if path.is_dir() {
        let mut splits: Vec<_> = fs::read_dir(path)
            .map_err(|e| CliError::data(Error::io(path, e)))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        splits.sort();
        let mut any = false;
        for split in splits {
            let samples = list_samples(&split)?;
            if samples.is_empty() {
                continue;
            }
            any = true;
            let name = split.file_name().unwrap().to_string_lossy();
            let _ = writeln!(out, "{name}: {} samples", samples.len());
            let mut per_class = std::collections::BTreeMap::new();
            for (_, l) in &samples {
                *per_class.entry(*l).or_insert(0usize) += 1;
            }
            for (l, n) in per_class {
                let _ = writeln!(out, "  class {l}: {n}");
            }
        }
        if !any {
            let samples = list_samples(path)?;
            let _ = writeln!(out, "samples: {}", samples.len());
        }
        return Ok(out);
    }
    let bytes = fs::read(path).map_err(|e| CliError::data(Error::io(path, e)))?;
    if bytes.starts_with(checkpoint::MAGIC) {
        let ck = checkpoint::decode::<f64>(&bytes)?;
        let _ = writeln!(out, "format: RSNN checkpoint v{}", checkpoint::VERSION);
        let _ = writeln!(out, "arch: {}", ck.net.spec);
        let _ = writeln!(out, "parameters: {}", ck.net.spec.param_count());
        let _ = writeln!(out, "fingerprint: {}", ck.net.fingerprint());
        for l in 0..ck.net.num_layers() {
            let _ = writeln!(
                out,
                "layer {} mean_threshold: {}",
                l + 1,
                crate::diagnostics::mean_threshold(&ck.net, l)
            );
        }
        let _ = writeln!(
            out,
            "optimizer: {}",
            ck.optimizer
                .map_or("none".to_string(), |o| format!("adam step {}", o.step))
        );
        for line in ck.net.hp.to_config_string().lines() {
            let _ = writeln!(out, "  {line}");
        }
    } else if bytes.starts_with(crate::events_io::NEUTRAL_MAGIC) {
        describe_stream(&mut out, "REVT neutral events", &decode_neutral(&bytes)?);
    } else {
        let s = parse_nmnist(&bytes, 0)
            .map_err(|e| CliError::data(anyhow::anyhow!("{}: {e}", path.display())))?;
        describe_stream(
            &mut out,
            "NMNIST binary (label from directory, shown as 0)",
            &s,
        );
    }
    Ok(out)
}
