use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, ensure, Context, Result};
use dremnet_core::checkpoint::{decode_checkpoint, encode_checkpoint, Checkpoint};
use dremnet_core::config::{apply, render, RunConfig};
use dremnet_core::cowkv::{cowkv_naive, cowkv_scan, CoWkvParams};
use dremnet_core::data::{
    decode_dataset, encode_dataset, gen_dataset, noise_records, normalize, parse_forward_csv, Dataset, SignalRecord,
    DEFAULT_UNITS,
};
use dremnet_core::metrics::batch_report;
use dremnet_core::numerics::Tensor;
use dremnet_core::train::{PairSet, Trainer, LOG_HEADER};
use dremnet_core::model::Dremnet;

use crate::io::{manifest_path, Run};
use crate::settings;

const BATCH: usize = 32;

fn record_file(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("record_{i:05}.csv"))
}

fn load_dataset(run: &mut Run, path: &Path) -> Result<Dataset> {
    let bytes = run.input(path)?;
    decode_dataset(&bytes).with_context(|| format!("decoding dataset {}", path.display()))
}

fn load_checkpoint(run: &mut Run, path: &Path) -> Result<Checkpoint> {
    let bytes = run.input(path)?;
    decode_checkpoint(&bytes).with_context(|| format!("decoding checkpoint {}", path.display()))
}

fn checkpoint_config(ck: &Checkpoint) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    apply(&mut cfg.train, &ck.config).context("checkpoint configuration")?;
    Ok(cfg)
}

/// The model stored in `ck`, checked against an explicitly supplied config.
fn checkpoint_model(ck: &Checkpoint, config: Option<&Path>, sets: &[String]) -> Result<Dremnet> {
    let stored = checkpoint_config(ck)?;
    if let Some(path) = settings::config_path(config) {
        let asked = settings::layer(stored.clone(), Some(&path), sets)?;
        settings::same_architecture(&asked, &stored)?;
    } else if !sets.is_empty() {
        let asked = settings::layer(stored.clone(), None, sets)?;
        settings::same_architecture(&asked, &stored)?;
    }
    Ok(Trainer::from_checkpoint(ck)?.model)
}

fn normalized(ds: &Dataset, noisy: bool) -> Result<Vec<Vec<f64>>> {
    ds.records
        .iter()
        .map(|r| if noisy { r.normalized_noisy() } else { r.normalized_clean() })
        .collect::<dremnet_core::Result<Vec<_>>>()
        .map_err(Into::into)
}

fn stack(rows: &[Vec<f64>]) -> Result<Tensor> {
    let t = rows.first().map_or(0, Vec::len);
    Ok(Tensor::new(&[rows.len(), t], rows.concat())?)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let len = t.last_dim();
    t.data().chunks(len.max(1)).map(<[f64]>::to_vec).collect()
}

pub struct GenData {
    pub config: Option<PathBuf>,
    pub sets: Vec<String>,
    pub out: PathBuf,
    pub count: Option<usize>,
    pub import: Option<PathBuf>,
}

pub fn gen_data(a: GenData) -> Result<()> {
    let cfg = settings::load(a.config.as_deref(), &a.sets)?;
    let mut run = Run::start("gen-data", render(&cfg), cfg.data.seed);
    let ds = match (&a.import, a.count) {
        (Some(path), None) => {
            let text = String::from_utf8(run.input(path)?).context("forward responses are not UTF-8")?;
            let blocks = parse_forward_csv(&text).with_context(|| format!("parsing {}", path.display()))?;
            let t = blocks.first().map_or(0, |b| b.0.len());
            let mut records = Vec::with_capacity(blocks.len());
            for (i, (gate_times, clean)) in blocks.into_iter().enumerate() {
                ensure!(
                    gate_times.len() == t,
                    "curve {i} has {} gates, the first has {t}",
                    gate_times.len()
                );
                records.push(SignalRecord {
                    gate_times,
                    noisy: clean.clone(),
                    clean,
                    norm: cfg.data.norm,
                });
            }
            noise_records(&mut records, &cfg.data.noise, cfg.data.seed)?;
            Dataset {
                signal_len: t,
                seed: cfg.data.seed,
                units: DEFAULT_UNITS.into(),
                has_clean: true,
                records,
            }
        }
        (None, Some(count)) => gen_dataset(&cfg.data, count)?,
        (Some(_), Some(_)) => bail!("--count and --import are exclusive"),
        (None, None) => bail!("one of --count or --import is required"),
    };
    run.output(&a.out, &encode_dataset(&ds)?)?;
    eprintln!("wrote {} records of {} gates to {}", ds.records.len(), ds.signal_len, a.out.display());
    run.finish(&manifest_path(&a.out, false))
}

pub struct Train {
    pub config: Option<PathBuf>,
    pub sets: Vec<String>,
    pub data: PathBuf,
    pub out: PathBuf,
    pub log: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub checkpoint_every: usize,
}

fn default_log(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".loss.csv");
    PathBuf::from(s)
}

pub fn train(a: Train) -> Result<()> {
    let log_path = a.log.clone().unwrap_or_else(|| default_log(&a.out));
    let mut run = Run::start("train", String::new(), 0);
    let (cfg, mut trainer, mut log) = match &a.resume {
        Some(path) => {
            let ck = load_checkpoint(&mut run, path)?;
            let stored = checkpoint_config(&ck)?;
            let cfg = settings::layer(stored.clone(), settings::config_path(a.config.as_deref()).as_deref(), &a.sets)?;
            let mut same = cfg.train.clone();
            same.epochs = stored.train.epochs;
            ensure!(
                same == stored.train,
                "checkpoint/config mismatch: only `epochs` may change when resuming"
            );
            let mut trainer = Trainer::from_checkpoint(&ck)?;
            trainer.config.epochs = cfg.train.epochs;
            let mut log = String::from(LOG_HEADER);
            log.push('\n');
            let previous = if log_path.exists() {
                log_path.clone()
            } else {
                default_log(path)
            };
            if let Ok(old) = std::fs::read_to_string(previous) {
                for line in old.lines().skip(1) {
                    let step: u64 = line.split(',').next().and_then(|s| s.parse().ok()).unwrap_or(u64::MAX);
                    if step <= trainer.step {
                        log.push_str(line);
                        log.push('\n');
                    }
                }
            }
            (cfg, trainer, log)
        }
        None => {
            let cfg = settings::load(a.config.as_deref(), &a.sets)?;
            let trainer = Trainer::new(cfg.train.clone())?;
            (cfg, trainer, format!("{LOG_HEADER}\n"))
        }
    };
    run.set_config(render(&cfg), cfg.train.seed);
    let ds = load_dataset(&mut run, &a.data)?;
    ensure!(
        ds.signal_len == cfg.data.gates,
        "dataset has {} gates but the config says gates = {}",
        ds.signal_len,
        cfg.data.gates
    );
    ensure!(ds.has_clean, "training needs clean ground truth in {}", a.data.display());
    let mut set = PairSet::new(ds.signal_len);
    for (c, n) in normalized(&ds, false)?.iter().zip(&normalized(&ds, true)?) {
        set.push(c, n)?;
    }
    let started = Instant::now();
    while (trainer.epoch as usize) < cfg.train.epochs {
        let stats = trainer.train_epoch(&set, |s| {
            log.push_str(&s.log_row());
            log.push('\n');
        })?;
        eprintln!(
            "epoch {} step {}: L_clean {:.4e} L_noise {:.4e} L_kl {:.4e} total {:.4e} ({:.1}s)",
            trainer.epoch,
            trainer.step,
            stats.l_clean,
            stats.l_noise,
            stats.l_kl,
            stats.total,
            started.elapsed().as_secs_f64()
        );
        if a.checkpoint_every > 0 && trainer.epoch as usize % a.checkpoint_every == 0 {
            run.output(&a.out, &encode_checkpoint(&trainer.to_checkpoint())?)?;
            run.output(&log_path, log.as_bytes())?;
        }
    }
    run.output(&a.out, &encode_checkpoint(&trainer.to_checkpoint())?)?;
    run.output(&log_path, log.as_bytes())?;
    run.finish(&manifest_path(&a.out, false))
}

pub struct Denoise {
    pub config: Option<PathBuf>,
    pub sets: Vec<String>,
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub out: PathBuf,
    pub with_reference: bool,
}

pub fn denoise(a: Denoise) -> Result<()> {
    let mut run = Run::start("denoise", String::new(), 0);
    let ck = load_checkpoint(&mut run, &a.checkpoint)?;
    let model = checkpoint_model(&ck, a.config.as_deref(), &a.sets)?;
    let ds = load_dataset(&mut run, &a.data)?;
    ensure!(
        !a.with_reference || ds.has_clean,
        "--with-reference needs clean records in {}",
        a.data.display()
    );
    let noisy = normalized(&ds, true)?;
    let clean = normalized(&ds, false)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for entry in std::fs::read_dir(&a.out)? {
        let p = entry?.path();
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with("record_") && name.ends_with(".csv") {
            std::fs::remove_file(&p)?;
        }
    }
    for start in (0..ds.records.len()).step_by(BATCH) {
        let end = (start + BATCH).min(ds.records.len());
        let x = stack(&noisy[start..end])?;
        let reference = if a.with_reference {
            Some(stack(&clean[start..end])?)
        } else {
            None
        };
        let y = model.denoise(&x, reference.as_ref())?;
        for (k, row) in rows(&y).into_iter().enumerate() {
            let i = start + k;
            let r = &ds.records[i];
            let physical = dremnet_core::data::denormalize(&row, r.norm)?;
            let mut csv = String::from(if ds.has_clean {
                "time_s,noisy,denoised,clean\n"
            } else {
                "time_s,noisy,denoised\n"
            });
            for g in 0..r.len() {
                let _ = write!(csv, "{:?},{:?},{:?}", r.gate_times[g], r.noisy[g], physical[g]);
                if ds.has_clean {
                    let _ = write!(csv, ",{:?}", r.clean[g]);
                }
                csv.push('\n');
            }
            run.output(&record_file(&a.out, i), csv.as_bytes())?;
        }
    }
    eprintln!("denoised {} records into {}", ds.records.len(), a.out.display());
    run_config(&mut run, &ck);
    run.finish(&manifest_path(&a.out, true))
}

fn run_config(run: &mut Run, ck: &Checkpoint) {
    let seed = checkpoint_config(ck).map(|c| c.train.seed).unwrap_or(0);
    run.set_config(ck.config.clone(), seed);
}

/// One column of a denoised-record CSV, with its time axis.
fn read_column(path: &Path, column: &str) -> Result<(Vec<f64>, Vec<f64>)> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split(',').map(str::trim).collect();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| anyhow!("{} has no `{name}` column", path.display()))
    };
    let (ti, ci) = (find("time_s")?, find(column)?);
    let (mut t, mut v) = (Vec::new(), Vec::new());
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split(',').collect();
        let get = |i: usize| -> Result<f64> {
            fields
                .get(i)
                .and_then(|f| f.trim().parse().ok())
                .ok_or_else(|| anyhow!("{}: line {}: bad number", path.display(), n + 2))
        };
        t.push(get(ti)?);
        v.push(get(ci)?);
    }
    Ok((t, v))
}

pub struct Eval {
    pub denoised: PathBuf,
    pub truth: PathBuf,
    pub out: PathBuf,
    pub column: String,
}

pub fn eval(a: Eval) -> Result<()> {
    let mut run = Run::start("eval", format!("column = {}\n", a.column), 0);
    let ds = load_dataset(&mut run, &a.truth)?;
    ensure!(ds.has_clean, "{} carries no clean ground truth", a.truth.display());
    let extra = record_file(&a.denoised, ds.records.len());
    ensure!(
        !extra.exists(),
        "record mismatch: {} has more records than the {} in {}",
        a.denoised.display(),
        ds.records.len(),
        a.truth.display()
    );
    let mut pairs = Vec::with_capacity(ds.records.len());
    for (i, r) in ds.records.iter().enumerate() {
        let path = record_file(&a.denoised, i);
        ensure!(path.exists(), "record mismatch: {} is missing", path.display());
        run.input(&path)?;
        let (times, values) = read_column(&path, &a.column)?;
        ensure!(
            times == r.gate_times,
            "record mismatch: gate times of {} differ from record {i}",
            path.display()
        );
        pairs.push((normalize(&values, r.norm)?, r.normalized_clean()?));
    }
    let report = batch_report(pairs.iter().map(|(d, t)| (d.as_slice(), t.as_slice())))?;
    let summary = format!(
        "metric,mean,median\nmse,{:e},{:e}\nsnr_db,{},{}\nssim,{},{}\n",
        report.mse.mean, report.mse.median, report.snr_db.mean, report.snr_db.median, report.ssim.mean, report.ssim.median
    );
    run.output(&a.out.join("records.csv"), report.records_csv().as_bytes())?;
    run.output(&a.out.join("histogram.csv"), report.histogram_csv().as_bytes())?;
    run.output(&a.out.join("summary.csv"), summary.as_bytes())?;
    eprint!("{summary}");
    run.finish(&manifest_path(&a.out, true))
}

pub const SWAP_HEADER: &str = "record_id,\
gs_noisy_clean_vs_clean,gs_noisy_clean_vs_noisy,gn_noisy_clean_vs_clean,gn_noisy_clean_vs_noisy,\
gs_clean_noisy_vs_clean,gs_clean_noisy_vs_noisy,gn_clean_noisy_vs_clean,gn_clean_noisy_vs_noisy";

fn mse_rows(pred: &Tensor, target: &Tensor) -> Vec<f64> {
    rows(pred)
        .iter()
        .zip(rows(target))
        .map(|(p, t)| p.iter().zip(&t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / t.len() as f64)
        .collect()
}

pub struct SwapTest {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub out: PathBuf,
}

pub fn swap_test(a: SwapTest) -> Result<()> {
    let mut run = Run::start("swap-test", String::new(), 0);
    let ck = load_checkpoint(&mut run, &a.checkpoint)?;
    let model = checkpoint_model(&ck, None, &[])?;
    let ds = load_dataset(&mut run, &a.data)?;
    ensure!(ds.has_clean, "swap-test needs clean ground truth in {}", a.data.display());
    let noisy = normalized(&ds, true)?;
    let clean = normalized(&ds, false)?;
    let mut csv = format!("{SWAP_HEADER}\n");
    for start in (0..ds.records.len()).step_by(BATCH) {
        let end = (start + BATCH).min(ds.records.len());
        let xn = stack(&noisy[start..end])?;
        let xs = stack(&clean[start..end])?;
        let fn_ = model.encode(&xn)?;
        let fs = model.encode(&xs)?;
        let mut cols = Vec::new();
        for (content, context) in [(&fn_.content, &fs.context), (&fs.content, &fn_.context)] {
            let gs = model.decode_signal(content, context)?;
            let gn = model.decode_repr(content, context)?;
            for out in [&gs, &gn] {
                cols.push(mse_rows(out, &xs));
                cols.push(mse_rows(out, &xn));
            }
        }
        for k in 0..end - start {
            let _ = write!(csv, "{}", start + k);
            for c in &cols {
                let _ = write!(csv, ",{:e}", c[k]);
            }
            csv.push('\n');
        }
    }
    run_config(&mut run, &ck);
    run.output(&a.out, csv.as_bytes())?;
    run.finish(&manifest_path(&a.out, false))
}

pub struct BenchKernel {
    pub lengths: Vec<usize>,
    pub channels: usize,
    pub repeats: usize,
    pub seed: u64,
    pub out: PathBuf,
}

fn pseudo_random(n: usize, seed: u64) -> Vec<f64> {
    let mut s = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) | 1;
    (0..n)
        .map(|_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 53) as f64 * 4.0 - 2.0
        })
        .collect()
}

const MIN_SAMPLE_S: f64 = 0.02;

/// Per-call time of `f`, looping until at least `MIN_SAMPLE_S` has passed.
fn sample<F: FnMut() -> Result<Tensor>>(mut f: F) -> Result<(f64, Tensor)> {
    let t = Instant::now();
    let mut calls = 0u32;
    loop {
        let y = f()?;
        calls += 1;
        let e = t.elapsed().as_secs_f64();
        if e >= MIN_SAMPLE_S {
            return Ok((e / f64::from(calls), y));
        }
    }
}

pub fn bench_kernel(a: BenchKernel) -> Result<()> {
    ensure!(a.channels > 0, "--channels must be >= 1");
    ensure!(a.lengths.iter().all(|&t| t > 0), "sequence lengths must be >= 1");
    let config = format!(
        "lengths = {:?}\nchannels = {}\nrepeats = {}\n",
        a.lengths, a.channels, a.repeats
    );
    let mut run = Run::start("bench-kernel", config, a.seed);
    let c = a.channels;
    // small decays keep exponents out of the underflow range at large T
    let decay = pseudo_random(c, a.seed ^ 1).iter().map(|w| 0.02 * w).collect();
    let params = CoWkvParams::new(decay, pseudo_random(c, a.seed ^ 2))?;
    let inputs = a
        .lengths
        .iter()
        .map(|&t| {
            let k = Tensor::new(&[t, c], pseudo_random(t * c, a.seed ^ (3 + t as u64)))?;
            let v = Tensor::new(&[t, c], pseudo_random(t * c, a.seed ^ (5 + t as u64)))?;
            Ok((k, v))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut best = vec![(f64::INFINITY, f64::INFINITY); inputs.len()];
    for round in 0..a.repeats.max(1) {
        for (i, (k, v)) in inputs.iter().enumerate() {
            let (ts, scan) = sample(|| Ok(cowkv_scan(k, v, &params)?))?;
            let (tn, naive) = sample(|| Ok(cowkv_naive(k, v, &params)?))?;
            best[i] = (best[i].0.min(ts), best[i].1.min(tn));
            if round == 0 {
                let diff = scan
                    .data()
                    .iter()
                    .zip(naive.data())
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0, f64::max);
                let rel = diff / naive.max_abs().max(f64::MIN_POSITIVE);
                let t = a.lengths[i];
                ensure!(rel < 1e-10, "scan and naive disagree at T = {t}: relative error {rel:e}");
            }
        }
    }
    let mut csv = String::from("T,impl,seconds\n");
    for (&t, &(ts, tn)) in a.lengths.iter().zip(&best) {
        let _ = writeln!(csv, "{t},scan,{ts:e}");
        let _ = writeln!(csv, "{t},naive,{tn:e}");
        eprintln!("T={t}: scan {ts:.3e}s naive {tn:.3e}s");
    }
    run.output(&a.out, csv.as_bytes())?;
    run.finish(&manifest_path(&a.out, false))
}
