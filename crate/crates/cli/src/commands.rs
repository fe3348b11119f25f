use std::path::Path;
use std::time::Instant;

use anyhow::Context;

use isorec::diffusion::{
    ancestral_sample_batch, from_prior_range, load_denoiser, save_denoiser, to_prior_range,
    validation_loss, Denoiser, DenoiserCheckpointMeta, Trainer,
};
use isorec::metrics::evaluate_volumes;
use isorec::sds::{
    DiffusionGuidance, Guidance, FINAL_CHECKPOINT, LOSS_FILE, METRICS_FILE, RESOLVED_CONFIG_FILE,
};
use isorec::simulate::{
    self, extract_lateral_patches, stack_images, unstack_images, BUNDLE_FILE, PATCHES_FILE,
};
use isorec::{io, Image, Reconstruction, Regularizer, Scalar};

use crate::config::{self, ReconstructConfig, SimulateConfig, TrainPriorConfig};
use crate::manifest::{write_timing, Manifest};
use crate::UsageError;

pub const PRIOR_CHECKPOINT: &str = "prior.ckpt";
pub const DIAGNOSTIC_CHECKPOINT: &str = "diagnostic.ckpt";
pub const RECON_FILE: &str = "recon.volume";
pub const SAMPLES_FILE: &str = "samples.volume";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn simulate(config: Option<&Path>, seed: Option<u64>, out: &Path) -> anyhow::Result<()> {
    let mut cfg: SimulateConfig = config::load(config)?;
    if let Some(s) = seed {
        cfg.phantom.seed = s;
    }
    let mut bundle = simulate::make_bundle(&cfg)?;
    simulate::write_bundle_volumes(&bundle, out)?;
    let mut m = Manifest::new("simulate", cfg.phantom.seed, &cfg)?;
    for name in [simulate::GT_FILE, simulate::ANISO_FILE, PATCHES_FILE] {
        m.output(out, name)?;
    }
    bundle.meta.manifest = Some(serde_json::to_value(&m)?);
    simulate::write_bundle_meta(&bundle.meta, out)?;
    println!(
        "bundle {}: gt {:?}, aniso {:?}, {} patches",
        out.display(),
        bundle.meta.gt_dims,
        bundle.meta.aniso_dims,
        bundle.patches.len()
    );
    Ok(())
}

fn training_patches(cfg: &TrainPriorConfig) -> anyhow::Result<Vec<Image<f32>>> {
    if cfg.data.join(BUNDLE_FILE).exists() {
        let stack = io::load_volume(cfg.data.join(PATCHES_FILE))?;
        return Ok(unstack_images(&stack));
    }
    let vol = io::load_volume(&cfg.data)?;
    Ok(
        extract_lateral_patches(&vol, cfg.patch, cfg.patch_count, cfg.patch_seed)?
            .into_iter()
            .map(|p| p.image)
            .collect(),
    )
}

pub fn train_prior(config: Option<&Path>, seed: Option<u64>, out: &Path) -> anyhow::Result<()> {
    let mut cfg: TrainPriorConfig = config::load(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    cfg.model.validate()?;
    let patches = training_patches(&cfg)?;
    let channels = patches.first().map(|p| p.channels).unwrap_or(0);
    if channels != cfg.model.channels {
        return Err(usage(format!(
            "training data has {channels} channels, model.channels is {}",
            cfg.model.channels
        )));
    }
    let data: Vec<Image<f32>> = patches.iter().map(|p| p.map(to_prior_range)).collect();
    create_dir(out)?;
    let start = Instant::now();
    let model = Denoiser::<f32>::new(&cfg.model, cfg.train.seed)?;
    let mut trainer = Trainer::new(model, &data, cfg.train.clone())?;
    let loss_csv = |t: &Trainer<f32>| {
        let mut s = String::from("step,loss\n");
        for (step, l) in &t.curve {
            s.push_str(&format!("{step},{l}\n"));
        }
        s
    };
    while trainer.step_index() < cfg.train.steps {
        if let Err(e) = trainer.step() {
            let mut meta = DenoiserCheckpointMeta::new(
                &cfg.model,
                cfg.train.schedule,
                cfg.train.seed,
                trainer.step_index(),
                trainer.model.param_count(),
            );
            meta.validation_loss = None;
            save_denoiser(&trainer.model, &meta, out.join(DIAGNOSTIC_CHECKPOINT))?;
            io::write_file_atomic(&out.join(LOSS_FILE), loss_csv(&trainer).as_bytes())?;
            return Err(e.into());
        }
    }
    let train_time = start.elapsed();
    let val = validation_loss(
        &trainer.model,
        &data,
        &trainer.schedule,
        cfg.train.seed,
        cfg.validation_count,
    )?;
    let mut meta = DenoiserCheckpointMeta::new(
        &cfg.model,
        cfg.train.schedule,
        cfg.train.seed,
        cfg.train.steps,
        trainer.model.param_count(),
    );
    meta.validation_loss = Some(val);
    save_denoiser(&trainer.model, &meta, out.join(PRIOR_CHECKPOINT))?;
    io::write_file_atomic(&out.join(LOSS_FILE), loss_csv(&trainer).as_bytes())?;

    let mut m = Manifest::new("train-prior", cfg.train.seed, &cfg)?;
    m.input("data", &cfg.data)?;
    m.output(out, PRIOR_CHECKPOINT)?;
    m.output(out, LOSS_FILE)?;
    m.note("validation_loss", val)?;
    m.note("patches", data.len())?;
    m.note("final_loss", trainer.curve.last().map(|c| c.1))?;
    write_timing(out, &[("train", train_time), ("total", start.elapsed())])?;
    m.write(out)?;
    println!(
        "trained {} steps on {} patches; validation loss {val:.6}",
        cfg.train.steps,
        data.len()
    );
    Ok(())
}

fn resolve_degradation(cfg: &ReconstructConfig) -> anyhow::Result<isorec::DegradationOp> {
    if let Some(op) = cfg.degradation {
        return Ok(op);
    }
    let dir = cfg.measurements.parent().unwrap_or(Path::new("."));
    if dir.join(BUNDLE_FILE).exists() {
        return Ok(simulate::read_bundle_meta(dir)?.degradation);
    }
    Err(usage(
        "no degradation configured and no bundle.json next to the measurements",
    ))
}

pub fn reconstruct(config: Option<&Path>, seed: Option<u64>, out: &Path) -> anyhow::Result<()> {
    let mut cfg: ReconstructConfig = config::load(config)?;
    if let Some(s) = seed {
        cfg.sds.seed = s;
    }
    let op = resolve_degradation(&cfg)?;
    cfg.degradation = Some(op);
    let aniso = io::load_volume(&cfg.measurements)?;
    if cfg.inr.channels != aniso.channels() {
        return Err(usage(format!(
            "inr.channels is {}, measurements have {} channels",
            cfg.inr.channels,
            aniso.channels()
        )));
    }
    let target = [
        aniso.dims()[0] * op.factor,
        aniso.dims()[1],
        aniso.dims()[2],
    ];
    let prior = match (&cfg.prior, cfg.sds.regularizer) {
        (Some(p), Regularizer::Sds) => {
            let (d, meta) = load_denoiser::<f32>(p)?;
            if meta.config.channels != aniso.channels() {
                return Err(usage(format!(
                    "prior has {} channels, measurements have {}",
                    meta.config.channels,
                    aniso.channels()
                )));
            }
            if cfg.sds.t_start > meta.schedule.steps {
                return Err(usage(format!(
                    "t_start {} exceeds the prior's {} diffusion steps",
                    cfg.sds.t_start, meta.schedule.steps
                )));
            }
            let k = meta.config.size_multiple();
            if target[0] % k != 0 || target[1] % k != 0 || target[2] % k != 0 {
                return Err(usage(format!(
                    "axial slices {target:?} are not multiples of {k} required by the prior"
                )));
            }
            Some((d, meta.schedule.build()?))
        }
        (None, Regularizer::Sds) => {
            return Err(usage("the sds regularizer needs a prior checkpoint"))
        }
        _ => None,
    };
    let gt = cfg.ground_truth.as_ref().map(io::load_volume).transpose()?;
    let before = prior.as_ref().map(|(d, _)| weights_hash(&d.params));

    create_dir(out)?;
    let start = Instant::now();
    let guide = prior.as_ref().map(|(d, s)| DiffusionGuidance {
        predictor: d,
        schedule: s,
    });
    let guidance: Option<&dyn Guidance<f32>> = guide.as_ref().map(|g| g as &dyn Guidance<f32>);
    let mut run = Reconstruction::<f32>::new(&aniso, guidance, &cfg.inr, cfg.sds.clone(), op)?;
    if let Some(g) = &gt {
        run = run.with_ground_truth(g)?;
    }
    let latest = out.join(isorec::sds::LATEST_CHECKPOINT);
    if cfg.resume && latest.exists() {
        run.resume_from(&latest)?;
        println!("resuming at iteration {}", run.iter);
    }
    io::write_file_atomic(
        &out.join(RESOLVED_CONFIG_FILE),
        &serde_json::to_vec_pretty(&cfg)?,
    )?;
    run.run(Some(out))?;
    let fit_time = start.elapsed();
    let vol = run.export()?;
    io::save_volume(&vol, out.join(RECON_FILE))?;

    let mut m = Manifest::new("reconstruct", cfg.sds.seed, &cfg)?;
    m.input("measurements", &cfg.measurements)?;
    if let Some(p) = cfg.prior.as_ref().filter(|_| prior.is_some()) {
        m.input("prior", p)?;
    }
    if let Some(p) = &cfg.ground_truth {
        m.input("ground_truth", p)?;
    }
    for name in [
        RECON_FILE,
        FINAL_CHECKPOINT,
        LOSS_FILE,
        METRICS_FILE,
        RESOLVED_CONFIG_FILE,
    ] {
        m.output(out, name)?;
    }
    if let Some(b) = before {
        let after = weights_hash(&prior.as_ref().expect("prior present").0.params);
        m.note("prior_weights_before", &b)?;
        m.note("prior_weights_after", &after)?;
    }
    m.note("iterations", run.iter)?;
    m.note("initial_data_fidelity", run.report.initial_data_fidelity)?;
    m.note("final_data_fidelity", run.report.final_data_fidelity)?;
    if let Some(last) = run.report.metrics.last() {
        m.note("final_metrics", last)?;
    }
    write_timing(out, &[("fit", fit_time), ("total", start.elapsed())])?;
    m.write(out)?;
    println!(
        "reconstructed {:?} in {} iterations; data fidelity {:.3e} -> {:.3e}",
        vol.dims(),
        run.iter,
        run.report.initial_data_fidelity,
        run.report.final_data_fidelity
    );
    Ok(())
}

fn weights_hash(params: &[f32]) -> String {
    io::hash_bytes(&io::encode_f32(params.iter().copied()))
}

pub fn evaluate(recon: &Path, gt: &Path, out: &Path) -> anyhow::Result<()> {
    let r = io::load_volume(recon)?;
    let g = io::load_volume(gt)?;
    let report = evaluate_volumes(&r, &g)?;
    create_dir(out)?;
    io::write_file_atomic(
        &out.join(METRICS_JSON),
        &serde_json::to_vec_pretty(&report)?,
    )?;
    io::write_file_atomic(&out.join(METRICS_CSV), report.to_csv().as_bytes())?;
    let mut m = Manifest::new(
        "evaluate",
        0,
        &serde_json::json!({ "recon": recon, "gt": gt, "peak": report.peak }),
    )?;
    m.input("recon", recon)?;
    m.input("gt", gt)?;
    m.output(out, METRICS_JSON)?;
    m.output(out, METRICS_CSV)?;
    m.write(out)?;
    print!("{}", report.summary_table());
    Ok(())
}

pub fn sample_prior(
    checkpoint: &Path,
    n: usize,
    seed: u64,
    size: usize,
    clip: bool,
    out: &Path,
) -> anyhow::Result<()> {
    if n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    let (model, meta) = load_denoiser::<f32>(checkpoint)?;
    let k = meta.config.size_multiple();
    if size == 0 || !size.is_multiple_of(k) {
        return Err(usage(format!("--size must be a positive multiple of {k}")));
    }
    let sched = meta.schedule.build()?;
    let start = Instant::now();
    let xs = ancestral_sample_batch(
        &model,
        &sched,
        (meta.config.channels, size, size),
        n,
        seed,
        clip,
    )?;
    let imgs: Vec<Image<f32>> = xs
        .iter()
        .map(|x| x.map(|v| from_prior_range(v).clamp(0.0, 1.0)))
        .collect();
    create_dir(out)?;
    io::save_volume(&stack_images(&imgs)?, out.join(SAMPLES_FILE))?;
    let cfg = serde_json::json!({ "checkpoint": checkpoint, "n": n, "seed": seed, "size": size, "clip": clip });
    let mut m = Manifest::new("sample-prior", seed, &cfg)?;
    m.input("checkpoint", checkpoint)?;
    m.output(out, SAMPLES_FILE)?;
    let means: Vec<f64> = imgs
        .iter()
        .map(|i| i.data.iter().map(|&v| v.as_f64()).sum::<f64>() / i.data.len() as f64)
        .collect();
    m.note("sample_means", means)?;
    write_timing(out, &[("sample", start.elapsed())])?;
    m.write(out)?;
    println!(
        "wrote {n} samples of {size}x{size} to {}",
        out.join(SAMPLES_FILE).display()
    );
    Ok(())
}
