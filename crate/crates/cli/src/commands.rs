use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fudsa::checkpoint;
use fudsa::config::{Precision, RunConfig};
use fudsa::data::{
    check_target_size, filter_lesion_slices, mask_to_pgm, resize_pair, split_dataset, synth_phantom, window_and_normalize, Dataset,
    PhantomConfig, Pgm, RawSlice,
};
use fudsa::gradcheck::{self, GradcheckConfig};
use fudsa::metrics::{binarize, CSV_HEADER};
use fudsa::net::{dump_attention, Model, NetworkConfig};
use fudsa::tape::BackwardFault;
use fudsa::train::{self, evaluate, EpochRecord};
use fudsa::{ften, Real, Tape, Tensor};

use crate::{EvalArgs, GradcheckArgs, PredictArgs, PreprocessArgs, SynthArgs, TrainArgs};

fn threads() -> Result<usize> {
    match std::env::var("FUDSA_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(fudsa::Error::InvalidArgument(format!("FUDSA_THREADS must be a positive integer, got {v:?}")).into()),
        },
    }
}

fn usage(msg: String) -> anyhow::Error {
    fudsa::Error::InvalidArgument(msg).into()
}

pub fn synth(a: &SynthArgs) -> Result<u8> {
    check_target_size(a.size, a.levels)?;
    let cfg = PhantomConfig { lesions: (a.min_lesions, a.max_lesions), ..PhantomConfig::default() };
    cfg.validate()?;
    let mut ds = Dataset::create(&a.out).with_context(|| format!("cannot create dataset at {}", a.out.display()))?;
    for k in 0..a.count {
        let p = synth_phantom(format!("phantom_{k:04}"), a.seed + 1000 + k as u64, a.size, &cfg)?;
        ds.write_raw(&p.slice, &mask_to_pgm(&p.mask_tensor::<f32>()))?;
    }
    ds.save_manifest()?;
    eprintln!("wrote {} phantoms of {}x{} to {}", a.count, a.size, a.size, a.out.display());
    Ok(0)
}

pub fn preprocess(a: &PreprocessArgs) -> Result<u8> {
    let mut cfg = RunConfig { lo_hu: a.lo_hu, hi_hu: a.hi_hu, size: a.size, ..RunConfig::default() };
    cfg.network.levels = a.levels;
    cfg.train.seed = a.seed;
    cfg.validate()?;
    let src = Dataset::open(&a.input).with_context(|| format!("cannot open dataset {}", a.input.display()))?;
    let mut pairs = Vec::with_capacity(src.manifest.ids.len());
    for id in &src.manifest.ids {
        let pair = src.load_pair::<f32>(id, a.lo_hu, a.hi_hu)?;
        pairs.push(resize_pair(pair, a.size, a.levels)?);
    }
    let total = pairs.len();
    let kept = filter_lesion_slices(pairs);
    let ids: Vec<String> = kept.iter().map(|p| p.id.clone()).collect();
    let split = split_dataset(&ids, a.seed + 2)?;
    let mut out = Dataset::create(&a.out).with_context(|| format!("cannot create dataset at {}", a.out.display()))?;
    for pair in &kept {
        out.write_pair(pair)?;
    }
    eprintln!(
        "kept {} of {total} slices with lesions; {} train, {} val",
        kept.len(),
        split.train_ids.len(),
        split.val_ids.len()
    );
    out.manifest.split = Some(split);
    out.save_manifest()?;
    let echo = cfg.render();
    fs::write(a.out.join("preprocess.cfg"), &echo)?;
    print!("{echo}");
    Ok(0)
}

fn resolve_train_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("cannot read config {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(v) = &a.variant {
        cfg.set_variant(v.parse()?);
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = a.max_epochs {
        cfg.train.max_epochs = e;
    }
    let mut flags = String::new();
    for o in &a.overrides {
        if !o.contains('=') {
            return Err(usage(format!("--set expects KEY=VALUE, got {o:?}")));
        }
        flags.push_str(o);
        flags.push('\n');
    }
    cfg.merge(&flags, "--set")?;
    cfg.train.threads = threads()?;
    Ok(cfg)
}

pub fn train(a: &TrainArgs) -> Result<u8> {
    let cfg = resolve_train_config(a)?;
    let ds = Dataset::open(&a.data).with_context(|| format!("cannot open dataset {}", a.data.display()))?;
    ds.split()?;
    match cfg.precision {
        Precision::F32 => train_with::<f32>(cfg, &ds, &a.out),
        Precision::F64 => train_with::<f64>(cfg, &ds, &a.out),
    }
}

fn train_with<T: Real>(mut cfg: RunConfig, ds: &Dataset, out: &Path) -> Result<u8> {
    let train_set = ds.load_all::<T>(&ds.ids("train")?, cfg.lo_hu, cfg.hi_hu)?;
    let val_set = ds.load_all::<T>(&ds.ids("val")?, cfg.lo_hu, cfg.hi_hu)?;
    let (h, w) = train_set.first().map(|p| p.size()).ok_or_else(|| usage("the train split is empty".into()))?;
    if h != w {
        return Err(usage(format!("images are {h}x{w}; expected square images")));
    }
    cfg.size = h;
    cfg.validate()?;
    let mut model = Model::<T>::build(cfg.network.clone(), cfg.train.seed)?;
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    cfg.save(out.join("config.cfg"))?;
    eprintln!(
        "training {} ({} parameters) on {} images, validating on {}",
        cfg.network.variant,
        model.parameter_count(),
        train_set.len(),
        val_set.len()
    );
    let mut hook = |r: &EpochRecord| {
        eprintln!(
            "epoch {:>4}  train {:.6}  val {:.6}  {}",
            r.epoch, r.train_loss, r.val.loss, r.val.metrics
        );
        true
    };
    let outcome = train::train(&mut model, &train_set, &val_set, &cfg.train, None, Some(&mut hook))?;
    checkpoint::save(out.join("best.ckpt"), &outcome.best.params, &outcome.best.state)?;
    checkpoint::save(out.join("last.ckpt"), &outcome.last.params, &outcome.last.state)?;
    fs::write(out.join("report.csv"), outcome.report.to_csv())?;
    let r = &outcome.report;
    println!(
        "best epoch {} of {}, val loss {:.6}{}",
        r.best_epoch,
        r.epochs.len(),
        r.best_val_loss,
        if r.stopped_early { ", stopped early" } else { "" }
    );
    Ok(0)
}

/// Explicit config, else `<checkpoint>.cfg`, else `config.cfg` beside the
/// checkpoint.
fn checkpoint_config(checkpoint: &Path, explicit: Option<&PathBuf>) -> Result<RunConfig> {
    let sidecar = PathBuf::from(format!("{}.cfg", checkpoint.display()));
    let beside = checkpoint.parent().unwrap_or(Path::new(".")).join("config.cfg");
    let path = match explicit {
        Some(p) => p.clone(),
        None if sidecar.exists() => sidecar,
        None if beside.exists() => beside,
        None => return Err(usage(format!("no config found for {}; pass --config", checkpoint.display()))),
    };
    let mut cfg = RunConfig::load(&path).with_context(|| format!("cannot read config {}", path.display()))?;
    cfg.train.threads = threads()?;
    Ok(cfg)
}

fn load_model<T: Real>(network: &NetworkConfig, path: &Path) -> Result<Model<T>> {
    let mut model = Model::<T>::build(network.clone(), 0)?;
    checkpoint::load_into(path, &mut model.params).with_context(|| format!("cannot load checkpoint {}", path.display()))?;
    Ok(model)
}

pub fn eval(a: &EvalArgs) -> Result<u8> {
    let cfg = checkpoint_config(&a.checkpoint, a.config.as_ref())?;
    let ds = Dataset::open(&a.data).with_context(|| format!("cannot open dataset {}", a.data.display()))?;
    let row = match cfg.precision {
        Precision::F32 => eval_with::<f32>(&cfg, &ds, a)?,
        Precision::F64 => eval_with::<f64>(&cfg, &ds, a)?,
    };
    println!("{CSV_HEADER}");
    println!("{row}");
    Ok(0)
}

fn eval_with<T: Real>(cfg: &RunConfig, ds: &Dataset, a: &EvalArgs) -> Result<String> {
    let model = load_model::<T>(&cfg.network, &a.checkpoint)?;
    let set = ds.load_all::<T>(&ds.ids(&a.split)?, cfg.lo_hu, cfg.hi_hu)?;
    for pair in &set {
        cfg.network.check_input(pair.image.shape()).with_context(|| format!("image {}", pair.id))?;
    }
    let e = evaluate(&model, &set, &cfg.train.loss, cfg.train.threads)?;
    Ok(e.metrics.csv_row(&a.split, e.n_images))
}

pub fn predict(a: &PredictArgs) -> Result<u8> {
    let cfg = checkpoint_config(&a.checkpoint, a.config.as_ref())?;
    match cfg.precision {
        Precision::F32 => predict_with::<f32>(&cfg, a),
        Precision::F64 => predict_with::<f64>(&cfg, a),
    }
}

fn load_image<T: Real>(path: &Path, cfg: &RunConfig) -> Result<Tensor<T>> {
    if path.extension().is_some_and(|e| e == "ften") {
        return Ok(ften::load(path)?);
    }
    let id = path.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned());
    let raw = RawSlice::from_pgm(id, &Pgm::load(path)?);
    Ok(window_and_normalize(&raw, cfg.lo_hu, cfg.hi_hu)?)
}

fn predict_with<T: Real>(cfg: &RunConfig, a: &PredictArgs) -> Result<u8> {
    let model = load_model::<T>(&cfg.network, &a.checkpoint)?;
    let image = load_image::<T>(&a.image, cfg)?;
    let shape = image.shape();
    if shape.n() != 1 {
        return Err(usage(format!("{} holds {} images; expected one", a.image.display(), shape.n())));
    }
    cfg.network.check_input(shape).with_context(|| format!("image {}", a.image.display()))?;
    let mut tape = Tape::new(&model.params);
    let x = tape.constant(image);
    let out = model.forward(&mut tape, x)?;
    if let Some(dir) = &a.dump_attention {
        let written = dump_attention(&tape, &out, dir)?;
        eprintln!("wrote {} attention maps to {}", written.len(), dir.display());
    }
    let mask = binarize(tape.value(out.final_map));
    mask_to_pgm(&mask).save(&a.out)?;
    Ok(0)
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<u8> {
    let precision: Precision = a.precision.parse()?;
    check_target_size(a.size, a.levels)?;
    if a.batch == 0 || a.samples == 0 {
        bail!(usage("--batch and --samples must be >= 1".into()));
    }
    let cfg = GradcheckConfig {
        network: NetworkConfig { levels: a.levels, base_channels: a.channels, ..NetworkConfig::default() },
        size: a.size,
        batch: a.batch,
        seed: a.seed,
        samples_per_tensor: a.samples,
        tolerance: a.tolerance,
        fault: a.corrupt_backward.then_some(BackwardFault::ScaleConvKernelGrad(1.5)),
        ..GradcheckConfig::default()
    };
    cfg.network.validate()?;
    let report = match precision {
        Precision::F32 => gradcheck::run::<f32>(&cfg)?,
        Precision::F64 => gradcheck::run::<f64>(&cfg)?,
    };
    println!("{report}");
    if report.passed() {
        return Ok(0);
    }
    let names: Vec<&str> = report.offenders().map(|t| t.name.as_str()).collect();
    eprintln!("gradient check failed for {} tensors: {}", names.len(), names.join(", "));
    Ok(1)
}
