use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use convcaps::metrics::MetricsReport;
use convcaps::model::{load_checkpoint, save_checkpoint, LayerKind, Network};
use convcaps::pipeline::{read_volume, sliding_window_infer, train as train_network, write_labels};

use crate::config::{parse_overrides, RunConfig};
use crate::data::{self, GenSpec, Manifest};
use crate::{CliError, EvalArgs, GenDataArgs, InferArgs, InspectArgs, TrainArgs};

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

fn run_config(file: Option<&Path>, arch: Option<&str>, overrides: &[String]) -> Result<RunConfig, CliError> {
    let mut pairs = parse_overrides(overrides)?;
    if let Some(a) = arch {
        pairs.push(("arch".into(), a.into()));
    }
    RunConfig::load(file, &pairs)
}

fn load_net(path: &Path) -> Result<Network<f32>, CliError> {
    load_checkpoint(path).map_err(|e| CliError::from_core(e).context(&path.display().to_string()))
}

/// Patch no larger than the volume along any axis.
fn fit_patch(patch: [usize; 3], shape: &[usize]) -> [usize; 3] {
    [0, 1, 2].map(|a| patch[a].min(shape[a]))
}

pub fn gen_data(a: &GenDataArgs) -> Result<(), CliError> {
    let manifest = data::generate(
        &a.out,
        &GenSpec {
            count: a.count,
            seed: a.seed,
            size: a.size,
            classes: a.classes,
            modalities: a.modalities,
            noise: a.noise,
            spacing: a.spacing,
        },
    )?;
    println!(
        "wrote {} phantom volumes ({}x{}x{}, {} classes, {} channels) to {}",
        manifest.volumes.len(),
        a.size[0],
        a.size[1],
        a.size[2],
        manifest.classes,
        manifest.channels,
        a.out.join("manifest.json").display()
    );
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<(), CliError> {
    let cfg = run_config(a.config.as_deref(), a.arch.as_deref(), &a.overrides)?;
    let echo = cfg.canonical();
    print!("# effective configuration\n{echo}");

    let manifest = Manifest::read(&cfg.data)?;
    if manifest.classes != cfg.model.classes || manifest.channels != cfg.model.in_channels {
        return Err(CliError::Usage(format!(
            "data has {} classes and {} channels, config expects {} and {}",
            manifest.classes, manifest.channels, cfg.model.classes, cfg.model.in_channels
        )));
    }
    let volumes = manifest.load(&cfg.data)?;
    let held = if volumes.len() > cfg.validation_volumes { cfg.validation_volumes } else { 0 };
    let samples: Vec<_> = volumes.into_iter().map(|v| v.sample).collect();
    let (train_set, val_set) = samples.split_at(samples.len() - held);
    for s in train_set.iter().chain(val_set) {
        let shape = s.labels.shape();
        if (0..3).any(|i| shape[i] < cfg.train.patch_size[i]) {
            return Err(CliError::Usage(format!(
                "volume {shape:?} smaller than patch {:?}",
                cfg.train.patch_size
            )));
        }
    }

    fs::create_dir_all(&cfg.out).map_err(io(&cfg.out))?;
    let config_path = cfg.out.join("config.txt");
    fs::write(&config_path, &echo).map_err(io(&config_path))?;
    let log_path = cfg.out.join("train.csv");
    let mut log = BufWriter::new(File::create(&log_path).map_err(io(&log_path))?);

    let mut net = Network::<f32>::build(&cfg.model, cfg.arch, cfg.train.seed).map_err(CliError::from_core)?;
    eprintln!(
        "training {} ({} parameters) on {} volumes, validating on {}",
        cfg.arch.tag(),
        net.count_params(),
        train_set.len(),
        if val_set.is_empty() { train_set.len() } else { val_set.len() }
    );
    let outcome = train_network(&mut net, train_set, val_set, &cfg.train, &mut log)
        .map_err(|e| CliError::Failure(format!("training aborted: {e}")))?;
    log.flush().map_err(io(&log_path))?;

    let ckpt = cfg.out.join("model.ckpt");
    save_checkpoint(&outcome.best, &ckpt).map_err(|e| CliError::from_core(e).context(&ckpt.display().to_string()))?;
    eprintln!(
        "{} iterations, best validation Dice {:.4} at iteration {}, final lr {:e}{}",
        outcome.iterations,
        outcome.best_dsc,
        outcome.best_iter,
        outcome.schedule.lr,
        if outcome.schedule.stop { " (early stop)" } else { "" }
    );
    eprintln!("checkpoint {}, log {}", ckpt.display(), log_path.display());
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<(), CliError> {
    let manifest = Manifest::read(&a.data)?;
    let net = match (&a.checkpoint, a.oracle) {
        (Some(path), false) => Some(load_net(path)?),
        _ => None,
    };
    if let Some(net) = &net {
        if net.config.classes != manifest.classes {
            return Err(CliError::Usage(format!(
                "checkpoint predicts {} classes, data has {}",
                net.config.classes, manifest.classes
            )));
        }
        if net.config.in_channels != manifest.channels {
            return Err(CliError::Usage(format!(
                "checkpoint expects {} channels, data has {}",
                net.config.in_channels, manifest.channels
            )));
        }
    }
    let volumes = manifest.load(&a.data)?;
    let mut reports = Vec::with_capacity(volumes.len());
    for v in &volumes {
        let truth = &v.sample.labels;
        let pred = match &net {
            Some(net) => {
                let patch = fit_patch(a.patch, v.sample.image.shape());
                sliding_window_infer(net, &v.sample.image, patch, a.overlap).map_err(CliError::from_core)?
            }
            None => truth.clone(),
        };
        reports.push(MetricsReport::evaluate(truth, &pred, manifest.classes, v.spacing).map_err(CliError::from_core)?);
    }
    let report = MetricsReport::average(&reports).map_err(CliError::from_core)?;
    let text = serde_json::to_string_pretty(&report.to_json()).expect("report serializes") + "\n";
    print!("{text}");
    if let Some(out) = &a.out {
        fs::write(out, &text).map_err(io(out))?;
    }
    Ok(())
}

pub fn infer(a: &InferArgs) -> Result<(), CliError> {
    let net = load_net(&a.checkpoint)?;
    let (volume, spacing) =
        read_volume(&a.input).map_err(|e| CliError::from_core(e).context(&a.input.display().to_string()))?;
    if volume.shape()[3] != net.config.in_channels {
        return Err(CliError::Usage(format!(
            "volume has {} channels, checkpoint expects {}",
            volume.shape()[3],
            net.config.in_channels
        )));
    }
    let patch = fit_patch(a.patch, volume.shape());
    let labels = sliding_window_infer(&net, &volume, patch, a.overlap).map_err(CliError::from_core)?;
    write_labels(&a.out, &labels, spacing).map_err(|e| CliError::from_core(e).context(&a.out.display().to_string()))?;
    let counts: Vec<String> = (0..net.config.classes)
        .map(|c| format!("{c}:{}", labels.count(c as u8)))
        .collect();
    println!("wrote {} (voxels per class {})", a.out.display(), counts.join(" "));
    Ok(())
}

fn describe(kind: &LayerKind) -> String {
    match kind {
        LayerKind::Conv { spec, cin, cout, relu } => format!(
            "conv k{} s{} d{} {cin}->{cout}{}",
            spec.kernel[0],
            spec.stride[0],
            spec.dilation[0],
            if *relu { " relu" } else { "" }
        ),
        LayerKind::PrimaryCaps { types } => format!("primary caps {types} types"),
        LayerKind::ConvCaps { spec, tin, tout, ain, aout, iterations } => format!(
            "conv caps k{} s{} {tin}x{ain}->{tout}x{aout} r{iterations}",
            spec.kernel[0], spec.stride[0]
        ),
        LayerKind::CapsLength => "capsule length".into(),
        LayerKind::Flatten => "flatten".into(),
        LayerKind::Upsample => "upsample x2".into(),
        LayerKind::Concat => "concat".into(),
        LayerKind::Softmax => "softmax".into(),
    }
}

/// Layer table at a nominal 32³ input.
pub fn table(net: &Network<f32>) -> Result<String, CliError> {
    let input = [32, 32, 32, net.config.in_channels];
    let shapes = net.infer_shapes(&input).map_err(CliError::from_core)?;
    let dims = |s: &[usize]| s.iter().map(usize::to_string).collect::<Vec<_>>().join("x");
    let mut out = format!("arch {}, input {}\n", net.arch.tag(), dims(&input));
    out += &format!("{:<16} {:<32} {:<18} {:>10}\n", "layer", "kind", "output", "params");
    for (i, (layer, shape)) in net.layers.iter().zip(&shapes).enumerate() {
        out += &format!(
            "{:<16} {:<32} {:<18} {:>10}\n",
            layer.name,
            describe(&layer.kind),
            dims(shape),
            net.layer_params(i)
        );
    }
    out += &format!("{:<16} {:<32} {:<18} {:>10}\n", "total", "", "", net.count_params());
    Ok(out)
}

pub fn inspect(a: &InspectArgs) -> Result<(), CliError> {
    let net = match &a.checkpoint {
        Some(path) => {
            if !a.overrides.is_empty() {
                return Err(CliError::Usage("configuration overrides need --config, not --checkpoint".into()));
            }
            load_net(path)?
        }
        None => {
            let cfg = run_config(a.config.as_deref(), a.arch.as_deref(), &a.overrides)?;
            Network::<f32>::build(&cfg.model, cfg.arch, 0).map_err(CliError::from_core)?
        }
    };
    print!("{}", table(&net)?);
    Ok(())
}
