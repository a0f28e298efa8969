//! Subcommand bodies. Every artifact carries the resolved config and seed.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use anyhow::Context;
use serde_json::{json, Value};

use clmrkit::audio::{decode_wav, resample, write_wav};
use clmrkit::augment::make_pair;
use clmrkit::autodiff::NamedTensors;
use clmrkit::contrastive::{pretrain as run_pretrain, RunOutput};
use clmrkit::datasets::{build_vocabulary, load_manifest, synthesize_corpus, Manifest, Split, SynthConfig};
use clmrkit::eval::{
    aggregate_clip, checkpoint_hash, evaluate as run_evaluate, label_subset, load_eval_data, predict, tag_metrics,
    train_probe, EvalData, LabeledSplit,
};
use clmrkit::model::{filter_spectrum, write_spectra_csv, Checkpoint, ModelParams};
use clmrkit::seed::rng_for;

use crate::config::RunConfig;
use crate::{AugmentArgs, EncoderSource, EvaluateArgs, Failure, FiltersArgs, PretrainArgs, ProbeArgs, SynthArgs};

// seed-path tags for the CLI's own random streams
const INIT: u64 = 0xC0DE;
const PAIR: u64 = 0xA116;

fn provenance(command: &str, config: &RunConfig, extra: Value) -> Value {
    json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": config.seed,
        "config": config,
        "args": extra,
    })
}

fn write_json(path: &Path, value: &Value) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn create_out(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn manifest_path(config: &RunConfig) -> Result<&Path, Failure> {
    config
        .dataset
        .manifest
        .as_deref()
        .ok_or_else(|| Failure::Usage("no dataset: pass --dataset or set dataset.manifest".into()))
}

pub fn synth(config: &RunConfig, args: &SynthArgs) -> Result<(), Failure> {
    let synth = SynthConfig {
        songs: args.songs,
        classes: args.classes,
        duration_secs: args.duration,
        sample_rate: config.sample_rate,
        seed: config.seed,
        ..SynthConfig::default()
    };
    create_out(&args.out)?;
    let manifest = synthesize_corpus(&args.out, &synth).context("synthesizing corpus")?;
    log::info!("wrote {} songs to {}", manifest.songs.len(), args.out.display());
    let extra = json!({ "songs": args.songs, "classes": args.classes, "duration_secs": args.duration });
    write_json(&args.out.join("run.json"), &provenance("synth", config, extra))?;
    Ok(())
}

pub fn augment(config: &RunConfig, args: &AugmentArgs) -> Result<(), Failure> {
    let input = decode_wav(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
    let input = if input.sample_rate() == config.sample_rate {
        input
    } else {
        resample(&input, config.sample_rate).context("resampling input")?
    };
    let chain = config
        .chain_config()?
        .build(config.sample_rate)
        .map_err(|e| Failure::Usage(e.to_string()))?;
    let mut rng = rng_for(config.seed, &[PAIR]);
    let pair = make_pair(&input, &chain, config.train.asymmetric, &mut rng).context("augmenting")?;
    create_out(&args.out)?;
    write_wav(&args.out.join("view_i.wav"), &pair.x_i).context("writing view_i.wav")?;
    write_wav(&args.out.join("view_j.wav"), &pair.x_j).context("writing view_j.wav")?;
    let extra = json!({ "input": args.input });
    write_json(&args.out.join("run.json"), &provenance("augment", config, extra))?;
    log::info!("wrote two {}-sample views to {}", chain.crop_length(), args.out.display());
    Ok(())
}

fn load_manifest_at(path: &Path) -> anyhow::Result<Manifest> {
    load_manifest(path).with_context(|| format!("loading manifest {}", path.display()))
}

pub fn pretrain(config: &RunConfig, args: &PretrainArgs) -> Result<(), Failure> {
    let manifest = load_manifest_at(manifest_path(config)?)?;
    let songs = manifest
        .indices(Split::Train)
        .into_iter()
        .map(|i| manifest.load_audio(i, config.sample_rate))
        .collect::<Result<Vec<_>, _>>()
        .context("decoding training songs")?;
    let chain = config
        .chain_config()?
        .build(config.sample_rate)
        .map_err(|e| Failure::Usage(e.to_string()))?;
    let mut model = ModelParams::new(config.encoder()?, &mut rng_for(config.seed, &[INIT])).context("building model")?;
    log::info!(
        "pre-training {} parameters on {} songs",
        model.parameter_count(),
        songs.len()
    );
    create_out(&args.out)?;
    let output = RunOutput {
        dir: args.out.clone(),
        provenance: provenance("pretrain", config, json!({})),
    };
    let outcome = run_pretrain(&songs, &mut model, &chain, &config.train_config(), Some(&output)).context("pre-training")?;
    write_json(&args.out.join("run.json"), &output.provenance)?;
    if let Some(best) = &outcome.best_checkpoint {
        log::info!("best checkpoint {}", best.display());
    }
    Ok(())
}

struct LoadedEncoder {
    params: ModelParams,
    hash: Option<String>,
    info: Value,
}

fn load_encoder(config: &RunConfig, source: &EncoderSource) -> Result<LoadedEncoder, Failure> {
    let chosen = [source.checkpoint.is_some(), source.transfer_checkpoint.is_some(), source.random_encoder];
    if chosen.iter().filter(|&&c| c).count() != 1 {
        return Err(Failure::Usage(
            "choose exactly one of --checkpoint, --transfer-checkpoint or --random-encoder".into(),
        ));
    }
    if source.random_encoder {
        let params = ModelParams::new(config.encoder()?, &mut rng_for(config.seed, &[INIT])).context("building model")?;
        return Ok(LoadedEncoder {
            params,
            hash: None,
            info: json!({ "encoder": "random" }),
        });
    }
    let (path, mode) = match (&source.checkpoint, &source.transfer_checkpoint) {
        (Some(p), _) => (p, "checkpoint"),
        (_, Some(p)) => (p, "transfer"),
        _ => unreachable!("one source is set"),
    };
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let named = NamedTensors::from_bytes(&bytes).with_context(|| format!("decoding {}", path.display()))?;
    let ckpt = Checkpoint::from_named_tensors(&named).with_context(|| format!("loading {}", path.display()))?;
    let hash = checkpoint_hash(&bytes);
    Ok(LoadedEncoder {
        params: ckpt.params,
        info: json!({ "encoder": mode, "path": path, "sha256": hash, "training": ckpt.training }),
        hash: Some(hash),
    })
}

fn eval_data(config: &RunConfig, encoder: &LoadedEncoder) -> Result<(Manifest, EvalData), Failure> {
    let manifest = load_manifest_at(manifest_path(config)?)?;
    let (vocab, labels) = build_vocabulary(&manifest, config.dataset.top_k).context("building tag vocabulary")?;
    let data = load_eval_data(&manifest, &labels, vocab.tags, &encoder.params.encoder, config.sample_rate)
        .context("extracting representations")?;
    Ok((manifest, data))
}

fn training_subset(config: &RunConfig, train: &LabeledSplit) -> anyhow::Result<LabeledSplit> {
    let n = train.reps.n_clips;
    let subset = label_subset(n, config.probe.fraction, config.seed)?;
    Ok(if subset.len() == n { train.clone() } else { train.select_clips(&subset) })
}

pub fn probe(config: &RunConfig, args: &ProbeArgs) -> Result<(), Failure> {
    let encoder = load_encoder(config, &args.source)?;
    let (_, data) = eval_data(config, &encoder)?;
    let train = training_subset(config, &data.train)?;
    let probe_config = config.probe_config();
    let outcome = train_probe(&train, &data.valid, &probe_config, config.seed).context("training probe")?;
    let scores = predict(&outcome.head, &data.test.reps.features).context("scoring test split")?;
    let frag = tag_metrics(&scores, &data.test.fragment_labels()).context("test metrics")?;
    let clip_scores = aggregate_clip(&scores, &data.test.reps.clip_of, data.test.reps.n_clips).context("clip scores")?;
    let clip = tag_metrics(&clip_scores, &data.test.clip_labels).context("clip metrics")?;

    create_out(&args.out)?;
    let run = provenance("probe", config, encoder.info.clone());
    let tensors = outcome
        .head
        .layers()
        .iter()
        .enumerate()
        .flat_map(|(i, l)| [(format!("probe.{i}.weight"), l.weight.clone()), (format!("probe.{i}.bias"), l.bias.clone())])
        .collect();
    let head_meta = json!({ "head": probe_config.head, "tags": data.tags, "run": run });
    NamedTensors {
        metadata: head_meta.to_string(),
        tensors,
    }
    .write(&args.out.join("probe.ckpt"))
    .context("writing probe.ckpt")?;
    let summary = json!({
        "tag_roc_auc": frag.roc_auc,
        "tag_pr_auc": frag.pr_auc,
        "clip_roc_auc": clip.roc_auc,
        "clip_pr_auc": clip.pr_auc,
        "epochs_run": outcome.epochs_run,
        "best_epoch": outcome.best_epoch,
        "best_validation": outcome.best_validation,
        "train_songs": train.reps.n_clips,
        "tags": data.tags,
        "run": run,
    });
    write_json(&args.out.join("probe.json"), &summary)?;
    log::info!("probe test tag ROC-AUC {:.4}, PR-AUC {:.4}", frag.roc_auc, frag.pr_auc);
    Ok(())
}

fn write_per_tag(path: &Path, report: &clmrkit::EvalReport, run: &Value) -> anyhow::Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "# run: {run}")?;
    let mut w = csv::Writer::from_writer(f);
    w.write_record(["tag", "roc_auc", "pr_auc"])?;
    for (tag, s) in &report.per_tag {
        w.write_record([tag.clone(), s.roc_auc.to_string(), s.pr_auc.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Mean representation per clip, one row per song of each split.
fn write_embeddings(path: &Path, manifest: &Manifest, data: &EvalData, run: &Value) -> anyhow::Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "# run: {run}")?;
    let mut w = csv::Writer::from_writer(f);
    let dim = data.train.reps.features.shape()[1];
    let mut header = vec!["source_id".to_string(), "split".into(), "tags".into()];
    header.extend((0..dim).map(|d| format!("h_{d}")));
    w.write_record(&header)?;
    for (split, part) in [(Split::Train, &data.train), (Split::Valid, &data.valid), (Split::Test, &data.test)] {
        let rows: Vec<Vec<f64>> = (0..part.reps.clip_of.len())
            .map(|r| part.reps.features.row(r).iter().map(|&v| v as f64).collect())
            .collect();
        let means = aggregate_clip(&rows, &part.reps.clip_of, part.reps.n_clips)?;
        for (song, mean) in manifest.indices(split).into_iter().zip(means) {
            let s = &manifest.songs[song];
            let mut record = vec![s.source_id.clone(), split.as_str().to_string(), s.tags.join("|")];
            record.extend(mean.iter().map(f64::to_string));
            w.write_record(&record)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn evaluate(config: &RunConfig, args: &EvaluateArgs) -> Result<(), Failure> {
    let a = &args.probe;
    let encoder = load_encoder(config, &a.source)?;
    let (manifest, data) = eval_data(config, &encoder)?;
    let report = run_evaluate(&data, &config.probe_config(), config.probe.fraction, encoder.hash.clone())
        .context("evaluating")?;
    create_out(&a.out)?;
    let run = provenance("evaluate", config, encoder.info.clone());
    let mut value = serde_json::to_value(&report).context("serializing report")?;
    value["run"] = run.clone();
    write_json(&a.out.join("report.json"), &value)?;
    write_per_tag(&a.out.join("per_tag.csv"), &report, &run)?;
    if args.embeddings {
        write_embeddings(&a.out.join("embeddings.csv"), &manifest, &data, &run)?;
    }
    log::info!(
        "tag ROC-AUC {:.4} PR-AUC {:.4}, clip ROC-AUC {:.4} PR-AUC {:.4} over {} run(s)",
        report.tag_roc_auc,
        report.tag_pr_auc,
        report.clip_roc_auc,
        report.clip_pr_auc,
        report.runs
    );
    Ok(())
}

pub fn filters(config: &RunConfig, args: &FiltersArgs) -> Result<(), Failure> {
    if args.layer == 0 {
        return Err(Failure::Usage("--layer counts from 1".into()));
    }
    let ckpt = Checkpoint::load(&args.checkpoint).with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let spectra = filter_spectrum(&ckpt.params.encoder, args.layer - 1, &config.spectrum_config(), config.sample_rate)
        .map_err(|e| Failure::Usage(e.to_string()))?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_out(dir)?;
    }
    let run = provenance("filters", config, json!({ "checkpoint": args.checkpoint, "layer": args.layer }));
    let file = fs::File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    write_spectra_csv(std::io::BufWriter::new(file), &spectra, &run).context("writing spectra")?;
    log::info!("wrote {} filter spectra to {}", spectra.len(), args.out.display());
    Ok(())
}
