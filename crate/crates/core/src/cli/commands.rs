use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context};
use rayon::prelude::*;

use super::files::{self, LoadedModel, Manifest, ManifestMember, PredictionLine, SynthSpecFile};
use super::{
    MetricsArgs, PredictArgs, PredictMethod, StatsArgs, SynthArgs, SynthKind, TrainArgs,
    TrainMethod,
};
use crate::bayes::{self, EnsembleModel};
use crate::data::{self, ActionType, Dataset, SynthSpec};
use crate::metrics;
use crate::model::{self, HeadConfig};
use crate::numeric::{RngStream, StreamPurpose, Vector};
use crate::train::{self, TrainConfig, TrainingLog};

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn load_dataset(path: &Path) -> anyhow::Result<Dataset> {
    data::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn summary(log: &TrainingLog) -> String {
    match log.epochs.last() {
        Some(last) => format!(
            "{} epochs, loss {:.4} -> {:.4}, train accuracy {:.3}",
            log.epochs.len(),
            log.initial_loss,
            last.mean_loss,
            last.train_accuracy
        ),
        None => format!("untrained, loss {:.4}", log.initial_loss),
    }
}

pub fn train(args: &TrainArgs) -> anyhow::Result<()> {
    let dataset = load_dataset(&args.common.resolve(&args.data))?;
    let header = dataset.header();
    let head = HeadConfig {
        num_object_classes: header.num_object_classes,
        obj_feature_dim: header.obj_feature_dim,
        global_feature_dim: header.global_feature_dim,
        hidden_dim: args.hidden_dim,
        fc_hidden_dim: args.fc_hidden_dim,
        num_categories: args.num_categories,
        dropout_rate: args.dropout_rate,
    };
    let config = TrainConfig {
        batch_size: args.batch_size,
        lr0: args.lr,
        decay_every_epochs: args.decay_every,
        decay_factor: args.decay_factor,
        epochs: args.epochs,
        adam_beta1: args.beta1,
        adam_beta2: args.beta2,
        adam_eps: args.adam_eps,
        seed: args.seed,
        dropout_rate: args.dropout_rate,
    };
    head.validate()?;
    config.validate()?;
    let out_dir = args.common.resolve(&args.out_dir);

    match args.method {
        TrainMethod::McDropout => {
            let (params, log) = train::train(&dataset, args.action, &head, &config)?;
            let model_path = out_dir.join("model.json");
            write(&model_path, model::serialize(&params, &head)?)?;
            write(&out_dir.join("train_log.jsonl"), log.to_json_lines())?;
            println!("{}: {}", model_path.display(), summary(&log));
        }
        TrainMethod::Ensemble => {
            ensure!(args.members >= 1, "--members must be at least 1");
            let (ensemble, logs) =
                bayes::ensemble_train(&dataset, args.action, &head, &config, args.members)?;
            let mut members = Vec::with_capacity(ensemble.len());
            for (i, (params, log)) in ensemble.members.iter().zip(&logs).enumerate() {
                let file = files::member_file_name(i);
                let log_name = files::member_log_name(i);
                write(&out_dir.join(&file), model::serialize(params, &head)?)?;
                write(&out_dir.join(&log_name), log.to_json_lines())?;
                println!("{file}: {}", summary(log));
                members.push(ManifestMember {
                    member_id: ensemble.member_ids[i],
                    file,
                    log: log_name,
                });
            }
            let manifest = Manifest {
                format: files::MANIFEST_FORMAT.into(),
                format_version: files::MANIFEST_FORMAT_VERSION,
                seed: args.seed,
                action: args.action,
                config: head,
                train: config,
                members,
            };
            let path = out_dir.join("manifest.json");
            write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
            println!("{}: {} members", path.display(), manifest.members.len());
        }
    }
    Ok(())
}

fn check_dataset_fits(config: &HeadConfig, dataset: &Dataset) -> anyhow::Result<()> {
    let h = dataset.header();
    if h.obj_feature_dim != config.obj_feature_dim
        || h.global_feature_dim != config.global_feature_dim
    {
        bail!(
            "dataset has {}/{} feature dims, model expects {}/{}",
            h.obj_feature_dim,
            h.global_feature_dim,
            config.obj_feature_dim,
            config.global_feature_dim
        );
    }
    if h.num_object_classes > config.num_object_classes {
        bail!(
            "dataset has {} object classes, model knows {}",
            h.num_object_classes,
            config.num_object_classes
        );
    }
    Ok(())
}

#[allow(clippy::large_enum_variant)]
enum Sampler {
    Mc {
        params: model::HeadParams,
        config: HeadConfig,
        passes: usize,
        seed: u64,
    },
    Ensemble(EnsembleModel),
}

fn build_sampler(args: &PredictArgs, loaded: LoadedModel) -> anyhow::Result<Sampler> {
    match (args.method, loaded) {
        (PredictMethod::McDropout, LoadedModel::Single { params, mut config }) => {
            if let Some(rate) = args.dropout_rate {
                config.dropout_rate = rate;
                config.validate()?;
            }
            let passes = args.samples.unwrap_or(50);
            ensure!(passes >= 1, "--samples must be at least 1");
            Ok(Sampler::Mc {
                params,
                config,
                passes,
                seed: args.seed,
            })
        }
        (PredictMethod::McDropout, LoadedModel::Ensemble(_)) => {
            bail!("mc_dropout needs a single model file, not an ensemble manifest")
        }
        (PredictMethod::Ensemble, loaded) => {
            ensure!(
                args.dropout_rate.is_none(),
                "--dropout-rate applies to mc_dropout only"
            );
            let ensemble = match loaded {
                LoadedModel::Ensemble(e) => e,
                LoadedModel::Single { params, config } => EnsembleModel::single(config, params, 0)?,
            };
            if let Some(m) = args.samples {
                ensure!(
                    m == ensemble.len(),
                    "--samples {m} but the ensemble has {} members",
                    ensemble.len()
                );
            }
            Ok(Sampler::Ensemble(ensemble))
        }
        (PredictMethod::Deterministic, loaded) => {
            ensure!(
                args.dropout_rate.is_none(),
                "--dropout-rate applies to mc_dropout only"
            );
            let (params, config) = match loaded {
                LoadedModel::Single { params, config } => (params, config),
                LoadedModel::Ensemble(mut e) if e.len() == 1 => (e.members.remove(0), e.config),
                LoadedModel::Ensemble(e) => bail!(
                    "deterministic predict needs one model, manifest lists {}",
                    e.len()
                ),
            };
            if let Some(m) = args.samples {
                ensure!(m == 1, "deterministic predict takes exactly one sample");
            }
            Ok(Sampler::Ensemble(EnsembleModel::single(config, params, 0)?))
        }
    }
}

pub fn predict(args: &PredictArgs) -> anyhow::Result<()> {
    let model_path = args.common.resolve(&args.model);
    let loaded = files::load_model(&model_path)
        .with_context(|| format!("loading model {}", model_path.display()))?;
    let dataset = load_dataset(&args.common.resolve(&args.data))?;
    check_dataset_fits(loaded.config(), &dataset)?;
    let sampler = build_sampler(args, loaded)?;

    let lines: Vec<String> = dataset
        .records()
        .par_iter()
        .enumerate()
        .map(|(i, record)| {
            let samples = match &sampler {
                Sampler::Mc {
                    params,
                    config,
                    passes,
                    seed,
                } => {
                    let mut rng = RngStream::derived(*seed, StreamPurpose::McDropout, i as u64);
                    bayes::mc_dropout_sample(params, config, record, *passes, &mut rng)?
                }
                Sampler::Ensemble(e) => bayes::ensemble_sample(e, record)?,
            };
            let report = bayes::decompose(&samples)?;
            let line = PredictionLine::new(
                &record.record_id,
                args.method,
                &report,
                record.label(args.action),
                args.full,
            );
            Ok(serde_json::to_string(&line)? + "\n")
        })
        .collect::<anyhow::Result<_>>()?;

    let out = args.common.resolve(&args.out);
    write(&out, lines.concat())?;
    println!(
        "{}: {} records ({})",
        out.display(),
        lines.len(),
        args.method.as_str()
    );
    Ok(())
}

pub fn read_predictions(path: &Path) -> anyhow::Result<Vec<PredictionLine>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).with_context(|| {
                format!("{} line {}: not a prediction line", path.display(), n + 1)
            })
        })
        .collect()
}

pub fn metrics(args: &MetricsArgs) -> anyhow::Result<()> {
    let path = args.common.resolve(&args.predictions);
    let lines = read_predictions(&path)?;
    ensure!(
        !lines.is_empty(),
        "{} contains no predictions",
        path.display()
    );
    let mut probs = Vec::with_capacity(lines.len());
    let mut labels = Vec::with_capacity(lines.len());
    for line in &lines {
        let label = line.label.with_context(|| {
            format!(
                "record {} has no label; metrics need labelled predictions",
                line.record_id
            )
        })?;
        probs.push(
            Vector::new(line.mean_p.clone())
                .with_context(|| format!("record {}", line.record_id))?,
        );
        labels.push(label);
    }
    let report = metrics::evaluate(&probs, &labels, args.bins)?;

    let out = args.common.resolve(&args.out);
    write(&out, serde_json::to_string_pretty(&report)? + "\n")?;
    if let Some(csv) = &args.csv {
        write(&args.common.resolve(csv), report.bins.to_csv())?;
    }
    if let Some(svg) = &args.svg {
        write(&args.common.resolve(svg), report.bins.to_svg())?;
    }
    println!(
        "{} samples: mAcc-E {:.4}  mAcc {:.4}  mAcc-B {:.4}  ECE {:.4}  Brier {:.4}",
        report.sample_count, report.acc_e, report.acc_3, report.acc_b, report.ece, report.brier
    );
    println!("{}", out.display());
    Ok(())
}

fn default_meta_path(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    out.with_file_name(format!("{stem}.meta.json"))
}

pub fn synth(args: &SynthArgs) -> anyhow::Result<()> {
    let mut spec = match &args.spec {
        Some(p) => SynthSpecFile::load(&args.common.resolve(p))?,
        None => {
            let mut s = SynthSpec::blobs(
                args.num_classes,
                args.obj_dim,
                args.glob_dim,
                args.separation,
                args.scale,
                args.count,
            );
            s.num_object_classes = args.num_object_classes;
            s.label_noise_rate = args.label_noise;
            s.action = args.action;
            s
        }
    };
    spec.count = args.count;
    let output = match args.kind {
        SynthKind::Blobs => {
            let mut rng = RngStream::derived(args.seed, StreamPurpose::Synth, 0);
            data::synth_blobs(&spec, &mut rng)?
        }
        SynthKind::Ood => {
            let mut rng = RngStream::derived(args.seed, StreamPurpose::Ood, 0);
            data::synth_ood(&spec, args.shift, args.count, &mut rng)?
        }
    };
    let out = args.common.resolve(&args.out);
    let mut buf = Vec::new();
    output.dataset.write_to(&mut buf)?;
    write(&out, buf)?;
    let meta = match &args.meta {
        Some(m) => args.common.resolve(m),
        None => default_meta_path(&out),
    };
    write(
        &meta,
        serde_json::to_string_pretty(&output.metadata)? + "\n",
    )?;
    println!("{}: {} records", out.display(), output.dataset.len());
    Ok(())
}

pub fn stats(args: &StatsArgs) -> anyhow::Result<()> {
    let dataset = load_dataset(&args.common.resolve(&args.data))?;
    let actions: Vec<ActionType> = match args.action {
        Some(a) => vec![a],
        None => ActionType::ALL
            .into_iter()
            .filter(|&a| !dataset.labeled(a).is_empty())
            .collect(),
    };
    println!("{} records", dataset.len());
    for action in actions {
        println!("{}", data::class_distribution(&dataset, action)?);
    }
    Ok(())
}
