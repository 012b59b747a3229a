use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::anyhow;
use rayon::prelude::*;

use super::{
    AblateArgs, CliError, CliResult, ConfigArgs, ConvertArgs, DataArgs, EvalArgs, GenArgs, RunArgs,
    SweepArgs, TrainArgs,
};
use crate::checkpoint;
use crate::config::{load_config, Hyperparams};
use crate::diagnostics::{fmt_sig, MetricsWriter};
use crate::error::Error;
use crate::events_io::{self, load_dataset, parse_nmnist, raster_to_events, write_neutral};
use crate::network::{init_network, Network};
use crate::optim::AdamState;
use crate::train::{self, epochs_to_reach, evaluate, synthetic_dataset, Dataset, TrainOptions};

pub fn resolve_config(args: &ConfigArgs) -> CliResult<Hyperparams> {
    let mut hp = match &args.config {
        Some(path) => load_config(path).map_err(|e| match e {
            Error::Io { .. } => CliError::config(e),
            other => other.into(),
        })?,
        None => Hyperparams::default(),
    };
    for o in &args.overrides {
        hp.apply_override(o)?;
    }
    if let Some(seed) = args.seed {
        hp.seed = seed;
    }
    hp.validate()?;
    Ok(hp)
}

fn split_dir(root: &Path, name: &str) -> CliResult<PathBuf> {
    let mut capital = name.to_string();
    capital[..1].make_ascii_uppercase();
    for cand in [name.to_string(), capital] {
        let p = root.join(cand);
        if p.is_dir() {
            return Ok(p);
        }
    }
    Err(CliError::data(anyhow!(
        "{} has no `{name}` directory",
        root.display()
    )))
}

pub(crate) fn load_data(args: &DataArgs, hp: &Hyperparams) -> CliResult<Dataset> {
    if args.synthetic {
        return Ok(synthetic_dataset(hp)?);
    }
    let root = args
        .data_dir
        .as_ref()
        .ok_or_else(|| CliError::config(anyhow!("one of --data-dir or --synthetic is required")))?;
    let train = load_dataset(
        split_dir(root, "train")?,
        hp.time_steps,
        hp.bin_width_us,
        hp.max_train,
    )?;
    let test = load_dataset(
        split_dir(root, "test")?,
        hp.time_steps,
        hp.bin_width_us,
        hp.max_test,
    )?;
    Ok(Dataset::new(train, test)?)
}

fn data_label(args: &DataArgs) -> String {
    match &args.data_dir {
        Some(d) if !args.synthetic => d.display().to_string(),
        _ => "synthetic".to_string(),
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub run_dir: PathBuf,
    pub epochs_run: usize,
    pub final_test_accuracy: f64,
    pub final_dead_pct: Vec<f64>,
    pub epochs_to_target: Option<usize>,
    pub target_acc: f64,
    pub init_fingerprint: String,
    /// Largest |threshold - th_init| seen at the end of any epoch.
    pub max_threshold_shift: f64,
}

impl fmt::Display for TrainReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dead: Vec<String> = self.final_dead_pct.iter().map(|d| fmt_sig(*d)).collect();
        writeln!(f, "run_dir={}", self.run_dir.display())?;
        writeln!(f, "epochs={}", self.epochs_run)?;
        writeln!(
            f,
            "final_test_accuracy={}",
            fmt_sig(self.final_test_accuracy)
        )?;
        writeln!(f, "final_dead_pct={}", dead.join(","))?;
        match self.epochs_to_target {
            Some(e) => writeln!(f, "epochs_to_{}={e}", fmt_sig(self.target_acc))?,
            None => writeln!(f, "epochs_to_{}=not reached", fmt_sig(self.target_acc))?,
        }
        write!(f, "init_fingerprint={}", self.init_fingerprint)
    }
}

fn train_options(run: &RunArgs, completed_epochs: usize) -> TrainOptions {
    TrainOptions {
        patience: run.patience,
        time_budget: run.time_budget_secs.map(Duration::from_secs_f64),
        record_wall_time: run.timing,
        completed_epochs,
    }
}

struct RunSpec<'a> {
    run_dir: PathBuf,
    data_label: String,
    save_optimizer: bool,
    per_batch_dead: bool,
    opts: TrainOptions,
    target_acc: f64,
    data: &'a Dataset,
}

fn execute(
    spec: RunSpec<'_>,
    net: Network<f64>,
    optimizer: Option<AdamState<f64>>,
) -> CliResult<TrainReport> {
    fs::create_dir_all(&spec.run_dir).map_err(|e| CliError::data(Error::io(&spec.run_dir, e)))?;
    let hp = net.hp.clone();
    let fingerprint = net.fingerprint();
    let metrics_path = spec.run_dir.join("metrics.csv");
    let file =
        fs::File::create(&metrics_path).map_err(|e| CliError::data(Error::io(&metrics_path, e)))?;
    let comments = vec![
        "rouser metrics".to_string(),
        format!("arch = {}", net.spec),
        format!("data = {}", spec.data_label),
        format!("init_fingerprint = {fingerprint}"),
        hp.to_config_string(),
    ];
    let io_err = |e: std::io::Error| Error::io(&metrics_path, e);
    let mut writer =
        MetricsWriter::new(std::io::BufWriter::new(file), &comments).map_err(io_err)?;

    let batch_path = spec.run_dir.join("dead_per_batch.csv");
    let mut batch_csv = String::from("epoch,batch,layer,dead_pct\n");

    let best_path = spec.run_dir.join("best.ckpt");
    let mut best = f64::NEG_INFINITY;
    let mut max_shift = 0.0f64;
    let outcome = train::train(net, optimizer, spec.data, &spec.opts, |report| {
        writer.append(report.train).map_err(io_err)?;
        writer.append(report.test).map_err(io_err)?;
        if spec.per_batch_dead {
            for (b, layers) in report.batch_dead_pct.iter().enumerate() {
                for (l, d) in layers.iter().enumerate() {
                    let _ = writeln!(
                        batch_csv,
                        "{},{},{},{}",
                        report.train.epoch,
                        b + 1,
                        l + 1,
                        fmt_sig(*d)
                    );
                }
            }
        }
        for layer in &report.net.layers {
            for &t in &layer.thresholds {
                max_shift = max_shift.max((t - hp.th_init).abs());
            }
        }
        if report.test.accuracy > best {
            best = report.test.accuracy;
            let opt = spec.save_optimizer.then_some(report.optimizer);
            checkpoint::save(&best_path, report.net, opt)?;
        }
        Ok(())
    })?;
    drop(writer);
    if spec.per_batch_dead {
        fs::write(&batch_path, batch_csv).map_err(|e| CliError::data(Error::io(&batch_path, e)))?;
    }
    let opt = spec.save_optimizer.then_some(&outcome.optimizer);
    checkpoint::save(spec.run_dir.join("final.ckpt"), &outcome.net, opt)?;

    let (final_acc, final_dead) = outcome
        .last()
        .map(|(_, t)| (t.accuracy, t.dead_pct.clone()))
        .unwrap_or((0.0, Vec::new()));
    let final_dead = outcome
        .last()
        .map(|(tr, _)| tr.dead_pct.clone())
        .unwrap_or(final_dead);
    Ok(TrainReport {
        run_dir: spec.run_dir,
        epochs_run: outcome.history.len(),
        final_test_accuracy: final_acc,
        final_dead_pct: final_dead,
        epochs_to_target: epochs_to_reach(&outcome.history, spec.target_acc),
        target_acc: spec.target_acc,
        init_fingerprint: fingerprint,
        max_threshold_shift: max_shift,
    })
}

pub fn train(args: &TrainArgs) -> CliResult<TrainReport> {
    let hp = resolve_config(&args.run.config)?;
    let data = load_data(&args.run.data, &hp)?;
    let (net, optimizer, completed) = match &args.resume {
        Some(path) => {
            let ck = checkpoint::load::<f64>(path)?;
            let mut net = ck.net;
            net.hp = hp.clone();
            let batches = data.train.len().div_ceil(hp.batch_size) as u64;
            let completed = ck
                .optimizer
                .as_ref()
                .map_or(0, |o| (o.step / batches.max(1)) as usize);
            (net, ck.optimizer, completed)
        }
        None => {
            let spec = data.network_spec(&hp)?;
            (init_network::<f64>(&spec, &hp, hp.seed), None, 0)
        }
    };
    execute(
        RunSpec {
            run_dir: args.run.out_dir.join(&args.run.run_name),
            data_label: data_label(&args.run.data),
            save_optimizer: args.save_optimizer,
            per_batch_dead: args.run.per_batch_dead,
            opts: train_options(&args.run, completed),
            target_acc: args.run.target_acc,
            data: &data,
        },
        net,
        optimizer,
    )
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub accuracy: f64,
    pub loss: f64,
    pub dead_pct: Vec<f64>,
    pub samples: usize,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dead: Vec<String> = self.dead_pct.iter().map(|d| fmt_sig(*d)).collect();
        write!(
            f,
            "samples={}\naccuracy={}\nloss={}\ndead_pct={}",
            self.samples,
            fmt_sig(self.accuracy),
            fmt_sig(self.loss),
            dead.join(",")
        )
    }
}

pub fn eval(args: &EvalArgs) -> CliResult<EvalReport> {
    let ck = checkpoint::load::<f64>(&args.checkpoint)?;
    let data = load_data(&args.data, &ck.net.hp)?;
    let samples = match args.split.as_str() {
        "test" => &data.test,
        "train" => &data.train,
        other => {
            return Err(CliError::config(anyhow!(
                "unknown split `{other}` (expected test or train)"
            )))
        }
    };
    let (loss, accuracy, activity) = evaluate(&ck.net, samples)?;
    Ok(EvalReport {
        accuracy,
        loss,
        dead_pct: activity.layers.iter().map(|a| a.dead_pct()).collect(),
        samples: samples.len(),
    })
}

fn with_jobs<R: Send>(jobs: usize, f: impl FnOnce() -> R + Send) -> CliResult<R> {
    if jobs <= 1 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::config(anyhow!("cannot start {jobs} workers: {e}")))?;
    Ok(pool.install(f))
}

#[derive(Clone, Debug)]
pub struct SweepPoint {
    pub th_init: f64,
    pub final_accuracy: f64,
    pub report: TrainReport,
}

pub fn sweep_th(args: &SweepArgs) -> CliResult<Vec<SweepPoint>> {
    if args.grid.len() < 2 {
        return Err(CliError::config(anyhow!("sweep needs >=2 grid points")));
    }
    let base = resolve_config(&args.run.config)?;
    let data = load_data(&args.run.data, &base)?;
    let spec = data.network_spec(&base)?;
    let root = args.run.out_dir.join(&args.run.run_name);
    let mut hps = Vec::with_capacity(args.grid.len());
    for &th in &args.grid {
        let mut hp = base.clone();
        hp.th_init = th;
        hp.lr_th = 0.0;
        hp.validate()?;
        hps.push(hp);
    }
    let run_one = |hp: &Hyperparams| -> CliResult<SweepPoint> {
        let net = init_network::<f64>(&spec, hp, hp.seed);
        let report = execute(
            RunSpec {
                run_dir: root.join(format!("th_{}", hp.th_init)),
                data_label: data_label(&args.run.data),
                save_optimizer: false,
                per_batch_dead: args.run.per_batch_dead,
                opts: train_options(&args.run, 0),
                target_acc: args.run.target_acc,
                data: &data,
            },
            net,
            None,
        )?;
        Ok(SweepPoint {
            th_init: hp.th_init,
            final_accuracy: report.final_test_accuracy,
            report,
        })
    };
    let points: Vec<SweepPoint> = with_jobs(args.jobs, || {
        hps.par_iter().map(run_one).collect::<CliResult<Vec<_>>>()
    })??;

    let mut csv = String::new();
    for line in base.to_config_string().lines() {
        csv.push_str(&format!("# {line}\n"));
    }
    csv.push_str("th_init,final_accuracy\n");
    for p in &points {
        csv.push_str(&format!(
            "{},{}\n",
            fmt_sig(p.th_init),
            fmt_sig(p.final_accuracy)
        ));
    }
    let path = root.join("sweep.csv");
    fs::write(&path, csv).map_err(|e| CliError::data(Error::io(&path, e)))?;
    Ok(points)
}

#[derive(Clone, Debug)]
pub struct AblationRun {
    pub lr_th: f64,
    pub final_accuracy: f64,
    pub epochs_to_target: Option<usize>,
    pub init_fingerprint: String,
    pub report: TrainReport,
}

/// Errors if any run started from different initial parameters.
pub fn verify_fingerprints(runs: &[(String, String)]) -> CliResult<()> {
    let Some((first_name, first)) = runs.first() else {
        return Ok(());
    };
    for (name, fp) in &runs[1..] {
        if fp != first {
            return Err(CliError::data(anyhow!(
                "initial weights differ: {first_name} has {first}, {name} has {fp}"
            )));
        }
    }
    Ok(())
}

pub fn ablate(args: &AblateArgs) -> CliResult<Vec<AblationRun>> {
    if args.lr_th.is_empty() {
        return Err(CliError::config(anyhow!(
            "ablation needs at least one lr_th value"
        )));
    }
    let base = resolve_config(&args.run.config)?;
    let data = load_data(&args.run.data, &base)?;
    let root = args.run.out_dir.join(&args.run.run_name);
    fs::create_dir_all(&root).map_err(|e| CliError::data(Error::io(&root, e)))?;

    let init_path = root.join("init.ckpt");
    let net0 = init_network::<f64>(&data.network_spec(&base)?, &base, base.seed);
    checkpoint::save(&init_path, &net0, None)?;

    let mut hps = Vec::with_capacity(args.lr_th.len());
    for &lr in &args.lr_th {
        let mut hp = base.clone();
        hp.lr_th = lr;
        hp.validate()?;
        hps.push(hp);
    }
    let run_one = |hp: &Hyperparams| -> CliResult<AblationRun> {
        let mut net = checkpoint::load::<f64>(&init_path)?.net;
        net.hp = hp.clone();
        let report = execute(
            RunSpec {
                run_dir: root.join(format!("lr_th_{}", hp.lr_th)),
                data_label: data_label(&args.run.data),
                save_optimizer: false,
                per_batch_dead: args.run.per_batch_dead,
                opts: train_options(&args.run, 0),
                target_acc: args.run.target_acc,
                data: &data,
            },
            net,
            None,
        )?;
        Ok(AblationRun {
            lr_th: hp.lr_th,
            final_accuracy: report.final_test_accuracy,
            epochs_to_target: report.epochs_to_target,
            init_fingerprint: report.init_fingerprint.clone(),
            report,
        })
    };
    let runs: Vec<AblationRun> = with_jobs(args.jobs, || {
        hps.par_iter().map(run_one).collect::<CliResult<Vec<_>>>()
    })??;

    let mut csv = format!("# init_fingerprint = {}\n", net0.fingerprint());
    csv.push_str("lr_th,final_accuracy,epochs_to_target,final_dead_pct_layer1,init_fingerprint\n");
    for r in &runs {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            fmt_sig(r.lr_th),
            fmt_sig(r.final_accuracy),
            r.epochs_to_target.map_or(String::new(), |e| e.to_string()),
            r.report
                .final_dead_pct
                .first()
                .map_or(String::new(), |d| fmt_sig(*d)),
            r.init_fingerprint
        ));
    }
    let path = root.join("ablation.csv");
    fs::write(&path, csv).map_err(|e| CliError::data(Error::io(&path, e)))?;

    let fps: Vec<(String, String)> = runs
        .iter()
        .map(|r| (format!("lr_th={}", r.lr_th), r.init_fingerprint.clone()))
        .collect();
    verify_fingerprints(&fps)?;
    Ok(runs)
}

pub fn gen_synthetic(args: &GenArgs) -> CliResult<usize> {
    let hp = resolve_config(&args.config)?;
    let data = synthetic_dataset(&hp)?;
    let bin = u32::try_from(hp.bin_width_us)
        .map_err(|_| CliError::config(anyhow!("bin_width_us too large")))?;
    let mut written = 0;
    for (split, samples) in [("train", &data.train), ("test", &data.test)] {
        for (idx, (raster, label)) in samples.iter().enumerate() {
            let dir = args.out_dir.join(split).join(label.to_string());
            fs::create_dir_all(&dir).map_err(|e| CliError::data(Error::io(&dir, e)))?;
            let stream = raster_to_events(raster, bin, *label as u32)?;
            write_neutral(&stream, dir.join(format!("{idx:05}.revt")))?;
            written += 1;
        }
    }
    Ok(written)
}

fn collect_files(dir: &Path, ext: &str, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(&path, ext, out)?;
        } else if path.extension().and_then(|e| e.to_str()) == Some(ext) {
            out.push(path);
        }
    }
    Ok(())
}

pub fn convert_nmnist(args: &ConvertArgs) -> CliResult<usize> {
    let mut files = Vec::new();
    collect_files(&args.input, "bin", &mut files)
        .map_err(|e| CliError::data(Error::io(&args.input, e)))?;
    files.sort();
    files
        .par_iter()
        .map(|path| -> CliResult<()> {
            let label = path
                .parent()
                .and_then(|p| p.file_name())
                .and_then(|n| n.to_str())
                .and_then(|n| n.parse::<u32>().ok())
                .ok_or_else(|| {
                    CliError::data(anyhow!(
                        "{}: parent directory is not a class label",
                        path.display()
                    ))
                })?;
            let bytes = fs::read(path).map_err(|e| CliError::data(Error::io(path, e)))?;
            let stream = parse_nmnist(&bytes, label)
                .map_err(|e| CliError::data(anyhow!("{}: {e}", path.display())))?;
            let rel = path
                .strip_prefix(&args.input)
                .expect("walked from input root");
            let dest = args.output.join(rel).with_extension("revt");
            if let Some(parent) = dest.parent() {
                fs::create_dir_all(parent).map_err(|e| CliError::data(Error::io(parent, e)))?;
            }
            events_io::write_neutral(&stream, &dest)?;
            Ok(())
        })
        .collect::<CliResult<Vec<()>>>()?;
    Ok(files.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fingerprint_mismatch_is_reported() {
        let ok = vec![
            ("a".to_string(), "x".to_string()),
            ("b".to_string(), "x".to_string()),
        ];
        assert!(verify_fingerprints(&ok).is_ok());
        let bad = vec![
            ("a".to_string(), "x".to_string()),
            ("b".to_string(), "y".to_string()),
        ];
        let err = verify_fingerprints(&bad).unwrap_err();
        assert_eq!(err.code, super::super::EXIT_DATA);
        assert!(err.error.to_string().contains("initial weights differ"));
    }

    #[test]
    fn error_codes() {
        let cfg: CliError = Error::validation("tau", "bad").into();
        assert_eq!(cfg.code, super::super::EXIT_CONFIG);
        let num: CliError = Error::NonFinite("loss".into()).into();
        assert_eq!(num.code, super::super::EXIT_NUMERIC);
        let data: CliError = Error::Data("x".into()).into();
        assert_eq!(data.code, super::super::EXIT_DATA);
    }
}
