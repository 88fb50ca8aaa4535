use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use dxnet::autodiff::Mode;
use dxnet::data::{read_image, write_image, AugmentPolicy};
use dxnet::model::{stage_param_counts, Checkpoint, Model, NetConfig, Task};
use dxnet::nn::{CountMode, ParamCount};
use dxnet::probe::{
    cam as class_map, estimate_flatness, map_csv, overlay_rgb, profile_csv, quadratic_profile,
    LossSurface, ModelLoss, PerturbationConfig, QuadraticLoss, SigmaGrid,
};
use dxnet::tensor::Tensor;
use dxnet::train::{evaluate_with_loss, loss_batches, psnr, TrainRunConfig, Trainer, EVAL_BATCH};

use crate::setup::{self, Purpose, MANIFEST_FILE};
use crate::{Common, CountModeArg, DataArgs, Failure, Outcome};

const MODEL_FILE: &str = "model.dxnt";

fn load_checkpoint(path: &Path) -> Outcome<(Checkpoint, Model<f32>)> {
    let ck = Checkpoint::read(path)?;
    let mut model: Model<f32> = ck.to_model()?;
    model.set_mode(Mode::Eval);
    Ok((ck, model))
}

fn metric_name(task: Task) -> &'static str {
    match task {
        Task::Classification { .. } => "top1_error_pct",
        _ => "psnr_db",
    }
}

fn normalizing_policy(stats: Option<dxnet::data::ChannelStats>) -> Option<AugmentPolicy> {
    stats.map(|s| AugmentPolicy {
        normalize: Some(s),
        ..AugmentPolicy::default()
    })
}

pub fn train(common: &Common, data: &DataArgs, resume: Option<&Path>, argv: &[String]) -> Outcome {
    let ck = resume.map(Checkpoint::read).transpose()?;
    let (net, run) = setup::resolve(common, ck.as_ref())?;
    let out = setup::out_dir(common)?;
    setup::write_manifest(&out.join(MANIFEST_FILE), argv, &out, &net, &run)?;
    let sets = setup::load(data, &net, &run, Purpose::Train)?;
    let mut model = match &ck {
        Some(ck) => ck.to_model()?,
        None => Model::<f32>::build(&net, run.seed)?,
    };
    let stats = match (&ck, sets.stats) {
        (Some(ck), None) => setup::stored_stats(ck)?,
        (_, s) => s,
    };
    let path = out.join(MODEL_FILE);
    let mut trainer = Trainer::new(&mut model, run.clone())?.with_checkpoint(&path);
    if let Some(s) = &stats {
        let policy = if run.augment {
            let side = sets.train[0].dims().1;
            AugmentPolicy {
                random_crop: Some((4, side)),
                ..AugmentPolicy::cifar(s.clone())
            }
        } else {
            AugmentPolicy {
                normalize: Some(s.clone()),
                ..AugmentPolicy::default()
            }
        };
        trainer = trainer
            .with_policy(Some(policy))
            .with_extra_state(setup::stats_entries(s));
    }
    if let Some(ck) = &ck {
        trainer.resume(ck)?;
    }
    eprintln!(
        "training {} ({} params) on {} samples, validating on {}",
        net.task.name(),
        net.param_count(CountMode::Full),
        sets.train.len(),
        sets.val.len()
    );
    let total = run.epochs;
    let metric = metric_name(net.task);
    let result = trainer.fit(&sets.train, &sets.val, |r| {
        let val = if r.val_metric.is_nan() {
            String::new()
        } else {
            format!(" {metric} {:.4}", r.val_metric)
        };
        eprintln!(
            "epoch {}/{total} loss {:.6}{val} lr {:e}",
            r.epoch, r.train_loss, r.lr
        );
    });
    setup::write_file(&out.join("history.csv"), trainer.history().to_csv())?;
    let history = result?;
    if let Some(last) = history.records.last() {
        println!("{metric}={}", last.val_metric);
    }
    println!("checkpoint={}", path.display());
    Ok(())
}

pub fn eval(common: &Common, data: &DataArgs, checkpoint: &Path, argv: &[String]) -> Outcome {
    let (ck, model) = load_checkpoint(checkpoint)?;
    let (net, run) = setup::resolve(common, Some(&ck))?;
    let out = setup::out_dir(common)?;
    setup::write_manifest(&out.join(MANIFEST_FILE), argv, &out, &net, &run)?;
    let sets = setup::load(data, &net, &run, Purpose::Eval)?;
    let policy = normalizing_policy(setup::stored_stats(&ck)?);
    let (loss, metric) = evaluate_with_loss(
        &model,
        &sets.val,
        run.loss,
        run.sigma,
        run.seed,
        policy.as_ref(),
    )?;
    let name = metric_name(net.task);
    let csv = format!(
        "metric,value\nloss,{loss}\n{name},{metric}\nsamples,{}\n",
        sets.val.len()
    );
    setup::write_file(&out.join("eval.csv"), csv)?;
    println!("{name}={metric}");
    Ok(())
}

pub fn count(common: &Common, mode: CountModeArg, argv: &[String]) -> Outcome {
    let (net, run) = setup::resolve(common, None)?;
    let out = setup::out_dir(common)?;
    setup::write_manifest(&out.join(MANIFEST_FILE), argv, &out, &net, &run)?;
    let mode = match mode {
        CountModeArg::Compact => CountMode::Compact,
        CountModeArg::Full => CountMode::Full,
    };
    let stages = stage_param_counts(&net, mode)?;
    let total: usize = stages.iter().map(|(_, n)| n).sum();
    let mut csv = String::from("stage,params\n");
    for (name, n) in &stages {
        let _ = writeln!(csv, "{name},{n}");
        println!("{name:<12} {n:>10}");
    }
    let _ = writeln!(csv, "total,{total}");
    println!("{:<12} {total:>10}", "total");
    setup::write_file(&out.join("count.csv"), csv)
}

pub struct ProbeOpts {
    pub checkpoint: Option<PathBuf>,
    pub quadratic: bool,
    pub sigmas: String,
    pub n: usize,
    pub t_max: f64,
}

fn parse_sigmas(s: &str) -> Outcome<SigmaGrid> {
    if s.trim() == "auto" {
        return Ok(SigmaGrid::Auto);
    }
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Failure::Config(format!("bad sigma `{v}`")))
        })
        .collect::<Outcome<Vec<f64>>>()
        .map(SigmaGrid::Explicit)
}

pub fn probe(common: &Common, data: &DataArgs, opts: &ProbeOpts, argv: &[String]) -> Outcome {
    let loaded = match (&opts.checkpoint, opts.quadratic) {
        (Some(_), true) => {
            return Err(Failure::Config(
                "use either --checkpoint or --quadratic".into(),
            ))
        }
        (Some(p), false) => Some(load_checkpoint(p)?),
        (None, _) => None,
    };
    let (net, run) = setup::resolve(common, loaded.as_ref().map(|(ck, _)| ck))?;
    let out = setup::out_dir(common)?;
    setup::write_manifest(&out.join(MANIFEST_FILE), argv, &out, &net, &run)?;
    let surface: Box<dyn LossSurface> = match &loaded {
        None => Box::new(QuadraticLoss::fixture()),
        Some((_, model)) => {
            let sets = setup::load(data, &net, &run, Purpose::Probe)?;
            let batches = loss_batches(net.task, &sets.train, run.sigma, run.seed, EVAL_BATCH)?;
            Box::new(ModelLoss::new(model, batches, run.loss)?)
        }
    };
    let cfg = PerturbationConfig {
        sigma_grid: parse_sigmas(&opts.sigmas)?,
        realizations: opts.n,
        seed: run.seed,
    };
    let report = estimate_flatness(surface.as_ref(), &cfg).map_err(|e| match e {
        dxnet::Error::NonFinite(m) => Failure::Divergence(m),
        other => other.into(),
    })?;
    setup::write_file(&out.join("flatness.csv"), report.to_csv())?;
    setup::write_file(
        &out.join("quadratic.csv"),
        profile_csv(&quadratic_profile(&report, opts.t_max, 101)),
    )?;
    println!("trace_estimate={}", report.trace_estimate);
    println!("mean_eigenvalue={}", report.mean_eigenvalue);
    println!("perturbed_params={}", report.perturbed_params);
    if opts.quadratic {
        println!("true_trace={}", QuadraticLoss::fixture().trace());
    }
    Ok(())
}

fn read_input(path: &Path) -> Outcome<Tensor<f32>> {
    Ok(read_image(path)?.pixels)
}

pub fn cam(
    common: &Common,
    checkpoint: &Path,
    input: &Path,
    class: Option<usize>,
    argv: &[String],
) -> Outcome {
    let (ck, model) = load_checkpoint(checkpoint)?;
    let (net, run) = setup::resolve(common, Some(&ck))?;
    let out = setup::out_dir(common)?;
    setup::write_manifest(&out.join(MANIFEST_FILE), argv, &out, &net, &run)?;
    let image = read_input(input)?;
    let x = match setup::stored_stats(&ck)? {
        Some(s) => s.normalize(&image)?,
        None => image.clone(),
    };
    let class = match class {
        Some(c) => c,
        None => {
            let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let logits = model.predict(&x.reshape(&[1, c, h, w])?)?;
            let k = logits.shape()[1];
            (0..k).fold(0, |b, i| {
                if logits.data()[i] > logits.data()[b] {
                    i
                } else {
                    b
                }
            })
        }
    };
    let r = class_map(&model, &x, class)?;
    write_image(out.join("cam.ppm"), &overlay_rgb(&image, &r.overlay)?)?;
    setup::write_file(&out.join("cam.csv"), map_csv(&r.map))?;
    println!("class={}", r.class);
    println!("logit={}", r.logit);
    println!("residual={:e}", r.residual);
    Ok(())
}

/// `denoise` (residual denoiser) or `sr-infer` (super-resolution) on one image.
pub fn restore(
    common: &Common,
    checkpoint: &Path,
    input: &Path,
    reference: Option<&Path>,
    super_res: bool,
    argv: &[String],
) -> Outcome {
    let out = common
        .out
        .clone()
        .ok_or_else(|| Failure::Config("--out <image path> is required".into()))?;
    let (ck, model) = load_checkpoint(checkpoint)?;
    let (net, run): (NetConfig, TrainRunConfig) = setup::resolve(common, Some(&ck))?;
    let want = if super_res {
        "super_resolution"
    } else {
        "denoising"
    };
    if net.task.name() != want {
        return Err(Failure::Config(format!(
            "checkpoint holds a {} model, need {want}",
            net.task.name()
        )));
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)
            .map_err(|e| Failure::Data(format!("{}: {e}", dir.display())))?;
    }
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let manifest = out.with_file_name(format!("{stem}.manifest.txt"));
    setup::write_manifest(&manifest, argv, &out, &net, &run)?;
    let y = read_input(input)?;
    let (c, h, w) = (y.shape()[0], y.shape()[1], y.shape()[2]);
    let batch = y.reshape(&[1, c, h, w])?;
    let restored = if super_res {
        model.predict(&batch)?
    } else {
        model.denoise(&batch)?
    };
    let (_, oc, oh, ow) = restored.dims4()?;
    let restored = restored.reshape(&[oc, oh, ow])?;
    write_image(&out, &restored)?;
    if let Some(r) = reference {
        let reference = read_input(r)?;
        let clamped = restored.map(|v| v.clamp(0.0, 1.0));
        let (border, luma) = if super_res { (4, c == 3) } else { (0, false) };
        println!("psnr_db={}", psnr(&clamped, &reference, 1.0, border, luma)?);
        if !super_res {
            println!("input_psnr_db={}", psnr(&y, &reference, 1.0, 0, false)?);
        }
    }
    println!("output={}", out.display());
    Ok(())
}
