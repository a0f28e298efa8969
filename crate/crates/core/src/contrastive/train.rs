use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{epoch_batches, nt_xent, ContrastiveError};
use crate::audio::AudioBuffer;
use crate::augment::{make_pair, ExamplePair, TransformChain};
use crate::autodiff::{AdamConfig, AdamState, Tape, Tensor};
use crate::model::{Checkpoint, Encoder, Mode, ModelParams, Projector};
use crate::seed::{derive_seed, rng_for};

// seed-path tags so schedule and augmentation streams never collide
const SCHEDULE: u64 = 1;
const AUGMENT: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub temperature: f64,
    pub optimizer: AdamConfig,
    pub seed: u64,
    /// Save a checkpoint every this many epochs (and after the last one).
    pub checkpoint_interval: usize,
    /// Leave the second view un-augmented.
    pub asymmetric: bool,
    /// Build every batch on the training thread, in order, with no prefetch.
    pub deterministic: bool,
    /// Augmentation threads; 0 uses all cores.
    pub workers: usize,
    /// Batches prepared ahead of the optimizer.
    pub prefetch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 96,
            temperature: 0.5,
            optimizer: AdamConfig::default(),
            seed: 0,
            checkpoint_interval: 10,
            asymmetric: false,
            deterministic: false,
            workers: 0,
            prefetch: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ContrastiveError> {
        let bad = |m: &str| Err(ContrastiveError::InvalidConfig(m.into()));
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be >= 2");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive");
        }
        if self.checkpoint_interval == 0 {
            return bad("checkpoint_interval must be >= 1");
        }
        let o = &self.optimizer;
        if !(o.lr >= 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.epsilon > 0.0) {
            return bad("invalid optimizer settings");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepLoss {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Clone, Debug, Default)]
pub struct PretrainOutcome {
    pub losses: Vec<StepLoss>,
    pub checkpoints: Vec<PathBuf>,
    /// Saved checkpoint with the lowest mean loss over its final epoch.
    pub best_checkpoint: Option<PathBuf>,
}

struct Planned {
    epoch: usize,
    step: usize,
    songs: Vec<usize>,
}

fn build_batch(
    songs: &[AudioBuffer],
    chain: &TransformChain,
    config: &TrainConfig,
    plan: &Planned,
    parallel: bool,
) -> Result<Tensor, ContrastiveError> {
    let make = |(k, &s): (usize, &usize)| {
        let mut rng = rng_for(config.seed, &[AUGMENT, plan.step as u64, k as u64]);
        make_pair(&songs[s], chain, config.asymmetric, &mut rng)
    };
    let pairs: Vec<ExamplePair> = if parallel {
        plan.songs.par_iter().enumerate().map(make).collect::<Result<_, _>>()?
    } else {
        plan.songs.iter().enumerate().map(make).collect::<Result<_, _>>()?
    };
    let len = chain.crop_length();
    let n = pairs.len();
    let mut data = Vec::with_capacity(2 * n * len);
    for p in &pairs {
        data.extend_from_slice(p.x_i.samples());
    }
    for p in &pairs {
        data.extend_from_slice(p.x_j.samples());
    }
    Ok(Tensor::new(vec![2 * n, 1, len], data)?)
}

/// One optimizer step on a `[2N, 1, L]` view-major batch; returns the loss.
fn train_step(
    model: &mut ModelParams,
    adam: &mut AdamState,
    batch: Tensor,
    temperature: f64,
) -> Result<f64, ContrastiveError> {
    let mut tape = Tape::new();
    let ev = model.encoder.register(&mut tape, true);
    let pv = model.projector.register(&mut tape, true);
    let x = tape.constant(batch);
    let (h, stats) = model.encoder.forward(&mut tape, &ev, x, Mode::Train)?;
    let z = Projector::forward(&mut tape, &pv, h)?;
    let loss = nt_xent(&mut tape, z, temperature)?;
    tape.backward(loss)?;
    let mut vars = ev.all();
    vars.extend(pv.iter().flat_map(|l| [l.weight, l.bias]));
    let grads: Vec<_> = vars.iter().map(|&v| tape.grad(v)).collect();
    adam.step(&mut model.parameters_mut(), &grads);
    model.encoder.update_running_stats(&stats);
    Ok(tape.value(loss).data()[0] as f64)
}

/// Where pre-training artifacts go. A non-null `provenance` is stored in
/// every checkpoint header and as a `#` comment atop `loss.csv`.
#[derive(Clone, Debug, Default)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub provenance: serde_json::Value,
}

impl RunOutput {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: dir.into(),
            provenance: serde_json::Value::Null,
        }
    }
}

/// Contrastive pre-training of `model` on whole songs. With an output, writes
/// `loss.csv`, checkpoints every `checkpoint_interval` epochs and `best.ckpt`.
pub fn pretrain(
    songs: &[AudioBuffer],
    model: &mut ModelParams,
    chain: &TransformChain,
    config: &TrainConfig,
    output: Option<&RunOutput>,
) -> Result<PretrainOutcome, ContrastiveError> {
    let out_dir = output.map(|o| o.dir.as_path());
    config.validate()?;
    if chain.crop_length() != model.config().input_length {
        return Err(ContrastiveError::InvalidConfig(format!(
            "crop length {} differs from encoder input {}",
            chain.crop_length(),
            model.config().input_length
        )));
    }
    let mut plans = Vec::new();
    for epoch in 0..config.epochs {
        let mut rng = rng_for(config.seed, &[SCHEDULE, epoch as u64]);
        for songs_in_batch in epoch_batches(songs.len(), config.batch_size, &mut rng)? {
            plans.push(Planned {
                epoch,
                step: plans.len(),
                songs: songs_in_batch,
            });
        }
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    let params: Vec<&Tensor> = model.parameters();
    let mut adam = AdamState::new(config.optimizer, &params);
    let mut outcome = PretrainOutcome::default();
    let mut best = f64::INFINITY;
    let mut epoch_losses = Vec::new();

    let mut on_batch = |plan: &Planned, batch: Tensor, outcome: &mut PretrainOutcome| -> Result<(), ContrastiveError> {
        let loss = train_step(model, &mut adam, batch, config.temperature)?;
        if !loss.is_finite() {
            return Err(ContrastiveError::InvalidConfig(format!("loss diverged at step {}", plan.step)));
        }
        outcome.losses.push(StepLoss {
            step: plan.step,
            epoch: plan.epoch,
            loss,
        });
        epoch_losses.push(loss);
        let last_of_epoch = plans_end_of_epoch(plan, config, songs.len());
        if last_of_epoch {
            log::info!("epoch {} step {} loss {:.4}", plan.epoch + 1, plan.step + 1, loss);
            let epoch = plan.epoch + 1;
            if let Some(dir) = out_dir {
                if epoch.is_multiple_of(config.checkpoint_interval) || epoch == config.epochs {
                    let trailing = epoch_losses.iter().sum::<f64>() / epoch_losses.len() as f64;
                    let path = dir.join(format!("epoch_{epoch:04}.ckpt"));
                    let mut training = serde_json::json!({
                        "epoch": epoch,
                        "step": plan.step + 1,
                        "seed": config.seed,
                        "trailing_loss": trailing,
                    });
                    if let Some(run) = output.map(|o| &o.provenance).filter(|p| !p.is_null()) {
                        training["run"] = run.clone();
                    }
                    let ckpt = Checkpoint {
                        params: model.clone(),
                        training,
                    };
                    ckpt.save(&path)?;
                    if trailing < best {
                        best = trailing;
                        outcome.best_checkpoint = Some(path.clone());
                    }
                    outcome.checkpoints.push(path);
                }
            }
            epoch_losses.clear();
        }
        Ok(())
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| ContrastiveError::InvalidConfig(e.to_string()))?;

    if config.deterministic {
        for plan in &plans {
            let batch = build_batch(songs, chain, config, plan, false)?;
            on_batch(plan, batch, &mut outcome)?;
        }
    } else {
        std::thread::scope(|scope| -> Result<(), ContrastiveError> {
            let (tx, rx) = sync_channel(config.prefetch.max(1));
            let plans_ref = &plans;
            let pool = &pool;
            scope.spawn(move || {
                for plan in plans_ref {
                    let batch = pool.install(|| build_batch(songs, chain, config, plan, true));
                    let failed = batch.is_err();
                    if tx.send(batch).is_err() || failed {
                        break;
                    }
                }
            });
            for plan in &plans {
                let batch = rx
                    .recv()
                    .map_err(|_| ContrastiveError::InvalidConfig("batch producer stopped".into()))??;
                on_batch(plan, batch, &mut outcome)?;
            }
            Ok(())
        })?;
    }

    if let Some(dir) = out_dir {
        let provenance = output.map(|o| &o.provenance).filter(|p| !p.is_null());
        write_loss_csv(&dir.join("loss.csv"), &outcome.losses, provenance)?;
        if let Some(best) = &outcome.best_checkpoint {
            fs::copy(best, dir.join("best.ckpt"))?;
        }
    }
    Ok(outcome)
}

fn plans_end_of_epoch(plan: &Planned, config: &TrainConfig, songs: usize) -> bool {
    let per_epoch = songs / config.batch_size;
    (plan.step + 1).is_multiple_of(per_epoch)
}

fn write_loss_csv(path: &Path, losses: &[StepLoss], provenance: Option<&serde_json::Value>) -> Result<(), std::io::Error> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    if let Some(p) = provenance {
        writeln!(f, "# run: {p}")?;
    }
    writeln!(f, "step,epoch,loss")?;
    for l in losses {
        writeln!(f, "{},{},{}", l.step, l.epoch, l.loss)?;
    }
    f.flush()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PairSimilarity {
    pub positive: f64,
    pub negative: f64,
}

/// Mean cosine similarity of eval-mode representations between the two
/// views of each song (positive) and across different songs (negative).
pub fn pair_similarity(
    encoder: &Encoder,
    songs: &[AudioBuffer],
    chain: &TransformChain,
    seed: u64,
) -> Result<PairSimilarity, ContrastiveError> {
    let len = chain.crop_length();
    let mut views_i = Vec::with_capacity(songs.len() * len);
    let mut views_j = Vec::with_capacity(songs.len() * len);
    for (k, song) in songs.iter().enumerate() {
        let mut rng = rng_for(derive_seed(seed, &[k as u64]), &[]);
        let p = make_pair(song, chain, false, &mut rng)?;
        views_i.extend_from_slice(p.x_i.samples());
        views_j.extend_from_slice(p.x_j.samples());
    }
    let hi = encoder.encode_windows(&views_i, 32)?;
    let hj = encoder.encode_windows(&views_j, 32)?;
    let n = songs.len();
    let (mut pos, mut neg) = (0.0, 0.0);
    for a in 0..n {
        for b in 0..n {
            let s = super::cosine_similarity(hi.row(a), hj.row(b))?;
            if a == b {
                pos += s;
            } else {
                neg += s;
            }
        }
    }
    Ok(PairSimilarity {
        positive: pos / n as f64,
        negative: if n > 1 { neg / (n * (n - 1)) as f64 } else { 0.0 },
    })
}
