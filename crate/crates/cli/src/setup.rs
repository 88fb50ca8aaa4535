//! Settings resolution, dataset assembly and run manifests.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use dxnet::data::{
    bicubic_rescale, crop, extract_patches, load_cifar10, load_image_dir, synthetic_classification,
    synthetic_image, ChannelStats, ImageSample,
};
use dxnet::model::{parse_kv, Checkpoint, Entry, NetConfig, Task};
use dxnet::rng::stream;
use dxnet::train::{holdout_split, TrainRunConfig};

use crate::{Common, DataArgs, Failure, Outcome};

pub const MANIFEST_FILE: &str = "manifest.txt";
const DATA_KEY: u64 = 0xDA7A;

// flags whose values the manifest records in resolved form instead
const RESOLVED_FLAGS: [&str; 5] = ["--config", "--set", "--out", "--seed", "--threads"];

fn config_err(e: dxnet::Error) -> Failure {
    match e {
        dxnet::Error::Config(_) => e.into(),
        other => Failure::Config(other.to_string()),
    }
}

/// `(key, value)` pairs from `--config` then `--set`, in order.
fn setting_pairs(common: &Common) -> Outcome<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
        pairs.extend(parse_kv(&text).map_err(config_err)?);
    }
    for s in &common.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Failure::Config(format!("--set expects KEY=VALUE, got `{s}`")))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    // manifests carry their own run.* bookkeeping
    pairs.retain(|(k, _)| !k.starts_with("run."));
    Ok(pairs)
}

/// Network and training settings from defaults, an optional checkpoint, the
/// settings file and `--set` overrides (last one wins), and `--seed`.
pub fn resolve(common: &Common, ck: Option<&Checkpoint>) -> Outcome<(NetConfig, TrainRunConfig)> {
    let pairs = setting_pairs(common)?;
    let mut net_pairs = Vec::new();
    let mut train_pairs = Vec::new();
    for (k, v) in pairs {
        if NetConfig::is_key(&k) {
            net_pairs.push((k, v));
        } else if TrainRunConfig::is_key(&k) {
            train_pairs.push((k, v));
        } else {
            return Err(Failure::Config(format!("unknown setting `{k}`")));
        }
    }
    let net = match ck {
        Some(ck) => {
            let base = ck.config()?;
            let mut c = base.clone();
            for (k, v) in &net_pairs {
                c.set(k, v).map_err(config_err)?;
            }
            if c != base {
                return Err(Failure::Config(
                    "network settings conflict with the checkpoint".into(),
                ));
            }
            base
        }
        None => {
            let text: String = net_pairs
                .iter()
                .map(|(k, v)| format!("{k} = {v}\n"))
                .collect();
            NetConfig::from_kv(&text).map_err(config_err)?
        }
    };
    net.validate().map_err(config_err)?;
    let mut run = TrainRunConfig::for_task(net.task);
    if let Some(e) = ck.and_then(|c| c.state_entry("train.config")) {
        for (k, v) in parse_kv(e.as_text()?).map_err(config_err)? {
            run.set(&k, &v).map_err(config_err)?;
        }
    }
    for (k, v) in &train_pairs {
        run.set(k, v).map_err(config_err)?;
    }
    if let Some(seed) = common.seed {
        run.seed = seed;
    }
    run.validate().map_err(config_err)?;
    Ok((net, run))
}

pub fn out_dir(common: &Common) -> Outcome<PathBuf> {
    let dir = common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("dxnet-out"));
    std::fs::create_dir_all(&dir).map_err(|e| Failure::Data(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Outcome {
    std::fs::write(path, contents).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

/// Records the command, seed and fully resolved settings. `replay` feeds the
/// file back as `--config`, so the recorded settings win over whatever the
/// original settings file says by then.
pub fn write_manifest(
    path: &Path,
    argv: &[String],
    out: &Path,
    net: &NetConfig,
    run: &TrainRunConfig,
) -> Outcome {
    let mut s = String::from("# dxnet run manifest\n");
    let _ = writeln!(s, "run.version = {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(
        s,
        "run.verb = {}",
        argv.first().map(String::as_str).unwrap_or("")
    );
    let _ = writeln!(s, "run.seed = {}", run.seed);
    let _ = writeln!(s, "run.out = {}", out.display());
    let mut rest = argv.iter().skip(1);
    while let Some(a) = rest.next() {
        let flag = a.split('=').next().unwrap_or(a);
        if RESOLVED_FLAGS.contains(&flag) {
            if !a.contains('=') {
                rest.next();
            }
            continue;
        }
        let _ = writeln!(s, "run.arg = {a}");
    }
    s.push_str(&net.to_kv());
    s.push_str(&run.to_kv());
    write_file(path, s)
}

/// Command line that repeats the run recorded in `manifest`.
pub fn replay_argv(
    manifest: &Path,
    out: Option<&Path>,
    threads: Option<usize>,
) -> Outcome<Vec<String>> {
    let text = std::fs::read_to_string(manifest)
        .map_err(|e| Failure::Config(format!("{}: {e}", manifest.display())))?;
    let pairs = parse_kv(&text).map_err(config_err)?;
    let get = |key: &str| pairs.iter().find(|(k, _)| k == key).map(|(_, v)| v.clone());
    let verb =
        get("run.verb").ok_or_else(|| Failure::Config("manifest lacks `run.verb`".into()))?;
    let seed =
        get("run.seed").ok_or_else(|| Failure::Config("manifest lacks `run.seed`".into()))?;
    let recorded_out =
        get("run.out").ok_or_else(|| Failure::Config("manifest lacks `run.out`".into()))?;
    let mut argv = vec!["dxnet".to_string(), verb];
    argv.extend(
        pairs
            .iter()
            .filter(|(k, _)| k == "run.arg")
            .map(|(_, v)| v.clone()),
    );
    argv.extend([
        "--config".into(),
        manifest.display().to_string(),
        "--seed".into(),
        seed,
        "--out".into(),
    ]);
    argv.push(out.map_or(recorded_out, |p| p.display().to_string()));
    if let Some(n) = threads {
        argv.extend(["--threads".into(), n.to_string()]);
    }
    Ok(argv)
}

/// Where a dataset is read for a given verb.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Purpose {
    /// Training samples plus a validation set (explicit or held out).
    Train,
    /// Held-out evaluation samples.
    Eval,
    /// Training samples only.
    Probe,
}

pub struct Datasets {
    pub train: Vec<ImageSample>,
    pub val: Vec<ImageSample>,
    /// Per-channel statistics for CIFAR-style normalization.
    pub stats: Option<ChannelStats>,
}

struct Source {
    samples: Vec<ImageSample>,
    /// The test batch of a CIFAR directory.
    test: Option<Vec<ImageSample>>,
    cifar_dir: Option<PathBuf>,
}

fn read_source(path: &Path) -> Outcome<Source> {
    if path.is_dir() && path.join("data_batch_1.bin").exists() {
        let (train, test) = dxnet::data::cifar::load_cifar10_dir(path)?;
        return Ok(Source {
            samples: train,
            test: Some(test),
            cifar_dir: Some(path.to_path_buf()),
        });
    }
    if path.extension().is_some_and(|e| e == "bin") {
        return Ok(Source {
            samples: load_cifar10(path)?,
            test: None,
            cifar_dir: None,
        });
    }
    Ok(Source {
        samples: load_image_dir(path)?,
        test: None,
        cifar_dir: None,
    })
}

fn synthetic(
    data: &DataArgs,
    net: &NetConfig,
    n: usize,
    seed: u64,
    key: u64,
) -> Outcome<Vec<ImageSample>> {
    let mut rng = stream(seed, &[DATA_KEY, key]);
    Ok(match net.task {
        Task::Classification { num_classes } => {
            synthetic_classification(n, num_classes, data.side.unwrap_or(32), &mut rng)
        }
        Task::Denoising => (0..n)
            .map(|_| {
                ImageSample::new(synthetic_image(
                    net.channels,
                    data.side.unwrap_or(40),
                    data.side.unwrap_or(40),
                    &mut rng,
                ))
            })
            .collect::<dxnet::Result<_>>()?,
        Task::SuperResolution { scale } => {
            let side = data.side.unwrap_or(12 * scale);
            (0..n)
                .map(|_| {
                    let hr = synthetic_image(net.channels, side, side, &mut rng);
                    let lr = bicubic_rescale(&hr, 1, scale)?;
                    Ok(ImageSample::new(hr)?.with_degraded(lr))
                })
                .collect::<dxnet::Result<_>>()?
        }
    })
}

/// Channel check, SR cropping to a multiple of the scale, optional patches and limit.
fn prepare(
    samples: Vec<ImageSample>,
    data: &DataArgs,
    net: &NetConfig,
    seed: u64,
    key: u64,
) -> Outcome<Vec<ImageSample>> {
    let mut samples = samples;
    if let Some(n) = data.limit {
        samples.truncate(n);
    }
    if samples.is_empty() {
        return Err(Failure::Data("dataset is empty".into()));
    }
    if let Some(s) = samples.iter().find(|s| s.dims().0 != net.channels) {
        return Err(Failure::Data(format!(
            "{}-channel image for a {}-channel network",
            s.dims().0,
            net.channels
        )));
    }
    if matches!(net.task, Task::Classification { .. }) && samples.iter().any(|s| s.label.is_none())
    {
        return Err(Failure::Data(
            "classification needs labelled samples (CIFAR binary format)".into(),
        ));
    }
    if let Task::SuperResolution { scale } = net.task {
        samples = samples
            .into_iter()
            .map(|s| {
                if s.degraded.is_some() {
                    return Ok(s);
                }
                let (_, h, w) = s.dims();
                let (h, w) = (h / scale * scale, w / scale * scale);
                if h == 0 || w == 0 {
                    return Err(Failure::Data(format!(
                        "image smaller than the x{scale} scale"
                    )));
                }
                Ok(ImageSample::new(crop(&s.pixels, 0, 0, h, w)?)?)
            })
            .collect::<Outcome<_>>()?;
    }
    if let Some(p) = data.patch {
        if matches!(net.task, Task::Classification { .. }) {
            return Err(Failure::Config(
                "--patch applies to restoration tasks".into(),
            ));
        }
        samples = extract_patches(
            &samples,
            p,
            data.patches,
            &mut stream(seed, &[DATA_KEY, 16 + key]),
        )?;
    }
    Ok(samples)
}

pub fn load(
    data: &DataArgs,
    net: &NetConfig,
    run: &TrainRunConfig,
    purpose: Purpose,
) -> Outcome<Datasets> {
    let seed = run.seed;
    let (primary, test, cifar_dir) = match (&data.data, data.synthetic) {
        (Some(_), Some(_)) => {
            return Err(Failure::Config("use either --data or --synthetic".into()))
        }
        (None, None) if purpose == Purpose::Eval && data.val.is_some() => (Vec::new(), None, None),
        (None, None) => {
            return Err(Failure::Config(
                "no data: pass --data DIR or --synthetic N".into(),
            ))
        }
        (Some(path), None) => {
            let s = read_source(path)?;
            (s.samples, s.test, s.cifar_dir)
        }
        (None, Some(n)) => {
            // evaluation draws a disjoint synthetic set
            let key = if purpose == Purpose::Eval { 1 } else { 0 };
            (synthetic(data, net, n, seed, key)?, None, None)
        }
    };
    let explicit_val = match &data.val {
        Some(p) => Some(read_source(p)?.samples),
        None => None,
    };
    let stats = match (&cifar_dir, purpose) {
        (Some(dir), Purpose::Train) => {
            Some(ChannelStats::cached(dir, &primary).or_else(|_| ChannelStats::compute(&primary))?)
        }
        _ => None,
    };
    let (train, val) = match purpose {
        Purpose::Eval => {
            let eval = explicit_val.or(test).unwrap_or(primary);
            (Vec::new(), prepare(eval, data, net, seed, 2)?)
        }
        Purpose::Probe => (prepare(primary, data, net, seed, 0)?, Vec::new()),
        Purpose::Train => {
            let train = prepare(primary, data, net, seed, 0)?;
            match explicit_val {
                Some(v) => (train, prepare(v, data, net, seed, 1)?),
                None if run.val_fraction > 0.0 && train.len() > 1 => {
                    holdout_split(&train, run.val_fraction, seed)
                }
                None => (train, Vec::new()),
            }
        }
    };
    Ok(Datasets { train, val, stats })
}

pub fn stats_entries(stats: &ChannelStats) -> Vec<Entry> {
    vec![
        Entry::floats("data.mean", &stats.mean),
        Entry::floats("data.std", &stats.std),
    ]
}

/// Normalization statistics stored by `train`, if any.
pub fn stored_stats(ck: &Checkpoint) -> Outcome<Option<ChannelStats>> {
    match (ck.state_entry("data.mean"), ck.state_entry("data.std")) {
        (Some(m), Some(s)) => {
            let f = |e: &Entry| -> dxnet::Result<Vec<f32>> {
                Ok(e.as_f64s()?.into_iter().map(|v| v as f32).collect())
            };
            Ok(Some(ChannelStats {
                mean: f(m)?,
                std: f(s)?,
            }))
        }
        _ => Ok(None),
    }
}
