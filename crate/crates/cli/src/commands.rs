use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use cxrseg::data::{
    apply_norm, compute_norm_stats, load_dataset, split_dataset, synth_generate, write_dataset, DatasetSplit, NormStats,
    Sample, CLASS_NAMES,
};
use cxrseg::eval::{
    evaluate, record_classes, records_from_csv, records_to_csv, significance_matrix, write_mask_pgm, write_overlay_png,
    EvalOptions,
};
use cxrseg::model::{load_checkpoint, save_checkpoint, ArchConfig, ArchPlan, Architecture, Head, LayerKind, Network};
use cxrseg::tensor::{DistanceKind, GradcheckOptions, OpKind, Tensor};
use cxrseg::train::{gradcheck_loss, prepare_items, train, LossConfig, StopReason};
use cxrseg::{Error, Result};

use crate::config::RunConfig;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(io_err(path))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(io_err(path))
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("plain data serializes");
    s.push('\n');
    s
}

pub fn synth(n: usize, res: usize, seed: u64, out: &Path) -> Result<()> {
    let samples = synth_generate(n, res, seed)?;
    write_dataset(&samples, out)?;
    println!("wrote {n} samples at {res}x{res} to {}", out.display());
    Ok(())
}

/// Normalized splits of the configured dataset.
pub struct Prepared {
    pub split: DatasetSplit,
    pub stats: NormStats,
    pub train: Vec<Sample>,
    pub valid: Vec<Sample>,
    pub test: Vec<Sample>,
}

fn load_samples(cfg: &RunConfig) -> Result<Vec<Sample>> {
    let res = cfg.data.resolution;
    let samples = match (&cfg.data.root, cfg.data.synthetic) {
        (Some(root), _) => {
            let report = load_dataset(root, res)?;
            for (id, msg) in &report.errors {
                log::warn!("skipping {id}: {msg}");
            }
            report.samples
        }
        (None, Some(s)) => synth_generate(s.n, res, s.seed)?,
        (None, None) => unreachable!("resolved config names a data source"),
    };
    if samples.is_empty() {
        return Err(Error::Data("no usable samples".into()));
    }
    Ok(samples)
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let samples = load_samples(cfg)?;
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let split = split_dataset(&ids, &cfg.train.split.scheme, cfg.train.split.seed)?;
    let pick = |list: &[String]| -> Vec<Sample> {
        list.iter()
            .map(|id| samples.iter().find(|s| &s.id == id).expect("split ids come from samples").clone())
            .collect()
    };
    let (train, valid, test) = (pick(&split.train), pick(&split.valid), pick(&split.test));
    if train.is_empty() {
        return Err(Error::Data(format!("split leaves no training samples out of {}", samples.len())));
    }
    let stats = compute_norm_stats(&train)?;
    let norm = |v: Vec<Sample>| v.iter().map(|s| apply_norm(s, &stats)).collect::<Vec<_>>();
    Ok(Prepared {
        train: norm(train),
        valid: norm(valid),
        test: norm(test),
        split,
        stats,
    })
}

/// Resolves the config and echoes it to `<output>/config.resolved.json`.
fn start_run(cfg: RunConfig) -> Result<RunConfig> {
    let cfg = cfg.resolve()?;
    create_dir(&cfg.output.directory)?;
    write_file(&cfg.output.directory.join("config.resolved.json"), to_json(&cfg))?;
    Ok(cfg)
}

pub fn train_cmd(cfg: RunConfig) -> Result<()> {
    let cfg = start_run(cfg)?;
    let out = cfg.output.directory.clone();
    let data = prepare(&cfg)?;
    write_file(&out.join("split.json"), to_json(&data.split))?;
    write_file(&out.join("norm.json"), to_json(&data.stats))?;

    let encoding = cfg.encoding();
    let lung_mode = cfg.data.lung_mode;
    let train_items = prepare_items(&data.train, encoding, lung_mode)?;
    let valid_items = prepare_items(&data.valid, encoding, lung_mode)?;
    if valid_items.is_empty() {
        log::warn!("validation split is empty; monitoring the training set");
    }
    let mut net = Network::<f32>::new(cfg.arch_config(), cfg.train.seed)?;
    log::info!(
        "{} with {} parameters, {} train / {} valid / {} test",
        cfg.arch.arch,
        net.parameter_count(),
        train_items.len(),
        valid_items.len(),
        data.test.len()
    );
    let every = cfg.train.checkpoint_every;
    let outcome = train(
        &mut net,
        &train_items,
        &valid_items,
        &cfg.loss,
        &cfg.train_config(),
        &mut |e| {
            if e.improved {
                save_checkpoint(e.net, &out.join("best.fcxs"))?;
            }
            if every.is_some_and(|k| e.record.epoch % k == 0) {
                save_checkpoint(e.net, &out.join(format!("epoch_{}.fcxs", e.record.epoch)))?;
            }
            if e.last {
                save_checkpoint(e.net, &out.join("last.fcxs"))?;
            }
            Ok(())
        },
    )?;
    write_file(&out.join("history.csv"), outcome.history.to_csv())?;
    match outcome.stop {
        StopReason::Diverged(msg) => Err(Error::Numeric(format!("training diverged at {msg}"))),
        stop => {
            println!(
                "stopped ({stop:?}) after {} epochs; best epoch {:?} with validation mean J {:.4}",
                outcome.history.records.len(),
                outcome.best_epoch,
                outcome.best_mean_jaccard
            );
            Ok(())
        }
    }
}

pub fn eval_cmd(cfg: RunConfig, checkpoints: &[PathBuf]) -> Result<()> {
    let cfg = cfg.resolve()?;
    let mut nets = checkpoints.iter().map(|p| load_checkpoint(p)).collect::<Result<Vec<_>>>()?;
    let first = nets[0].config().clone();
    let mut errors = Vec::new();
    for (net, path) in nets.iter().zip(checkpoints) {
        let c = net.config();
        if c.input_resolution != cfg.data.resolution {
            errors.push(format!(
                "{} expects {} px input, data.resolution is {}",
                path.display(),
                c.input_resolution,
                cfg.data.resolution
            ));
        }
        if c.head != first.head || c.num_classes != first.num_classes || c.input_resolution != first.input_resolution {
            errors.push(format!("{} is incompatible with {}", path.display(), checkpoints[0].display()));
        }
    }
    if !errors.is_empty() {
        return Err(Error::Config(errors));
    }
    let data = prepare(&cfg)?;
    let label = if nets.len() == 1 {
        first.arch.to_string()
    } else {
        format!("ensemble_{}", nets.len())
    };
    let opts = EvalOptions {
        epsilon: cfg.eval.epsilon,
        spacing: cfg.eval.spacing,
        surface_distance: cfg.eval.surface_distance,
        lung_mode: cfg.data.lung_mode,
    };
    let result = evaluate(&mut nets, &data.test, &label, &opts)?;

    let dir = cfg.output.directory.join("eval");
    create_dir(&dir)?;
    write_file(&dir.join("records.csv"), records_to_csv(&result.records))?;
    write_file(&dir.join("report.csv"), result.table.to_csv())?;
    let text = result.table.to_text();
    write_file(&dir.join("report.txt"), &text)?;
    if cfg.eval.export_masks || cfg.eval.overlays {
        let masks = dir.join("masks");
        create_dir(&masks)?;
        for (sample, (id, pred)) in data.test.iter().zip(&result.predictions) {
            let truth = cxrseg::data::build_groundtruth(sample, first.head.encoding(), cfg.data.lung_mode);
            for ((m, t), class) in pred.iter().zip(truth.organs()).zip(CLASS_NAMES) {
                if cfg.eval.export_masks {
                    write_mask_pgm(m, &masks.join(format!("{id}_{class}.pgm")))?;
                }
                if cfg.eval.overlays {
                    // the unnormalized intensities read better
                    let raw = rescale01(sample.image.data());
                    write_overlay_png(&raw, m, t, &masks.join(format!("{id}_{class}_overlay.png")))?;
                }
            }
        }
    }
    print!("{text}");
    Ok(())
}

fn rescale01(v: &[f32]) -> Vec<f32> {
    let lo = v.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    v.iter().map(|x| (x - lo) / span).collect()
}

pub fn params_cmd(cfg: RunConfig) -> Result<()> {
    let cfg = cfg.resolve()?;
    let arch = cfg.arch_config();
    let plan = ArchPlan::new(&arch)?;
    let mut out = String::new();
    let _ = writeln!(out, "{:<14} {:<10} {:<20} {:>6} {:>12}", "layer", "kind", "weight_shape", "stride", "parameters");
    for row in plan.ledger() {
        let kind = match row.kind {
            LayerKind::Conv => "conv",
            LayerKind::TransposedConv => "transposed",
        };
        let shape = row.weight_shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
        let _ = writeln!(out, "{:<14} {kind:<10} {shape:<20} {:>6} {:>12}", row.name, row.stride, row.parameters);
    }
    let total = plan.parameter_count();
    let _ = writeln!(out, "total {}: {total}", arch.arch);
    // the reference counts describe the full-width networks only
    let full_width = arch.base_channels == ArchConfig::DEFAULT_BASE_CHANNELS;
    if let Some(reference) = arch.arch.reference_parameter_count().filter(|_| full_width) {
        let rel = (total as f64 - reference as f64) / reference as f64;
        let _ = writeln!(out, "published reference: {reference} ({:+.2}%)", rel * 100.0);
    }
    let count = |a: Architecture| -> Result<u64> { Ok(ArchPlan::new(&ArchConfig { arch: a, ..arch.clone() })?.parameter_count()) };
    let (dropout, conv, inverted) = (
        count(Architecture::AllDropout)?,
        count(Architecture::AllConvolutional)?,
        count(Architecture::Invertednet)?,
    );
    let _ = writeln!(out, "all_convolutional - all_dropout: {}", conv as i64 - dropout as i64);
    let _ = writeln!(out, "all_dropout / invertednet: {:.3}", dropout as f64 / inverted as f64);
    print!("{out}");
    Ok(())
}

/// Returns whether every check passed.
pub fn gradcheck_cmd(arch: Architecture, seed: u64, corrupt: Option<OpKind>, samples: usize) -> Result<bool> {
    let raw = synth_generate(2, 16, seed)?;
    let stats = compute_norm_stats(&raw)?;
    let data: Vec<Sample> = raw.iter().map(|s| apply_norm(s, &stats)).collect();
    let opts = GradcheckOptions {
        samples_per_parameter: samples,
        seed,
        ..Default::default()
    };
    let mut ok = true;
    for distance in [DistanceKind::Dice, DistanceKind::CrossEntropy] {
        let loss = LossConfig::new(distance, true);
        let head: Head = loss.required_head();
        let cfg = ArchConfig::new(arch, 16, head).with_base_channels(4);
        // He-scale weights keep the deep-layer gradients well above the
        // round-off floor of an f64 central difference at h = 1e-5
        let mut net = Network::<f64>::with_init_gain(cfg, seed, 2.0)?;
        net.graph_mut().inject_backward_fault(corrupt);
        let items = prepare_items(&data, loss.encoding(), Default::default())?;
        let x = Tensor::stack_batch(&items.iter().map(|i| i.image.cast::<f64>()).collect::<Vec<_>>())?;
        let t = Tensor::stack_batch(&items.iter().map(|i| i.target.cast::<f64>()).collect::<Vec<_>>())?;
        let dropout_seed = arch.has_dropout().then_some(seed);
        let report = gradcheck_loss(&mut net, &x, &t, &loss, dropout_seed, &opts)?;
        println!("{arch} {distance:?}");
        print!("{report}");
        ok &= report.passed();
    }
    Ok(ok)
}

pub fn significance_cmd(files: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let mut models = Vec::with_capacity(files.len());
    for f in files {
        let text = std::fs::read_to_string(f).map_err(io_err(f))?;
        let label = f.file_stem().map_or_else(|| f.display().to_string(), |s| s.to_string_lossy().into_owned());
        models.push((label, records_from_csv(&text)?));
    }
    if let Some(dir) = out {
        create_dir(dir)?;
    }
    for class in record_classes(&models[0].1) {
        let m = significance_matrix(&models, &class)?;
        match out {
            Some(dir) => write_file(&dir.join(format!("significance_{class}.csv")), m.to_csv())?,
            None => print!("{}\n", m.to_csv()),
        }
    }
    Ok(())
}
