//! Probe training on frozen representations, tagging metrics and reports.

mod metrics;
mod probe;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::audio::AudioBuffer;
use crate::autodiff::{Tensor, TensorError};
use crate::datasets::{fragment_index, fragment_samples, DatasetError, Manifest, Split};
use crate::model::Encoder;
use crate::seed::{derive_seed, rng_for};

pub use metrics::{aggregate_clip, pr_auc, roc_auc, tag_metrics, TagMetrics};
pub use probe::{predict, train_probe, EarlyStopping, ProbeConfig, ProbeOutcome};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("labels contain a single class")]
    SingleClass,
    #[error("labels contain no positives")]
    NoPositives,
    #[error("clip {0} has no fragments")]
    EmptyClip(usize),
    #[error("the {0} split is empty")]
    EmptySplit(&'static str),
    #[error("label fraction {0} selects no songs")]
    EmptySubset(f64),
    #[error("no tag has both classes in the evaluated split")]
    NoEvaluableTags,
    #[error("invalid probe config: {0}")]
    InvalidConfig(String),
    #[error("{0}")]
    InvalidInput(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// Fragment representations with the clip each fragment came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Representations {
    /// `[n_fragments, dim]`
    pub features: Tensor,
    pub clip_of: Vec<usize>,
    pub n_clips: usize,
}

const EXTRACT_CHUNK: usize = 64;

/// Eval-mode encoder outputs for non-overlapping, zero-padded windows of
/// every clip, in clip then time order.
pub fn extract_representations(encoder: &Encoder, clips: &[AudioBuffer]) -> Result<Representations, EvalError> {
    let len = encoder.config.input_length;
    let lengths: Vec<usize> = clips.iter().map(AudioBuffer::len).collect();
    let fragments = fragment_index(&lengths, len, len);
    let clip_of: Vec<usize> = fragments.iter().map(|f| f.clip).collect();
    let jobs: Vec<&[crate::datasets::Fragment]> = fragments.chunks(EXTRACT_CHUNK).collect();
    let parts: Vec<Tensor> = jobs
        .par_iter()
        .map(|job| {
            let mut samples = Vec::with_capacity(job.len() * len);
            for f in job.iter() {
                samples.extend(fragment_samples(clips[f.clip].samples(), f.start, len));
            }
            encoder.encode_windows(&samples, EXTRACT_CHUNK)
        })
        .collect::<Result<_, _>>()?;
    let dim = encoder.config.representation_dim();
    let data: Vec<f32> = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
    if data.is_empty() {
        return Err(EvalError::EmptySplit("extraction"));
    }
    Ok(Representations {
        features: Tensor::new(vec![fragments.len(), dim], data)?,
        clip_of,
        n_clips: clips.len(),
    })
}

/// Representations of one split with per-clip multi-hot labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSplit {
    pub reps: Representations,
    pub clip_labels: Vec<Vec<f32>>,
}

impl LabeledSplit {
    pub fn is_empty(&self) -> bool {
        self.reps.clip_of.is_empty()
    }

    pub fn n_tags(&self) -> usize {
        self.clip_labels.first().map_or(0, Vec::len)
    }

    pub fn fragment_labels(&self) -> Vec<Vec<f32>> {
        self.reps.clip_of.iter().map(|&c| self.clip_labels[c].clone()).collect()
    }

    /// Keeps only the listed clips (re-indexed in the given order).
    pub fn select_clips(&self, clips: &[usize]) -> LabeledSplit {
        let mut new_index = vec![usize::MAX; self.reps.n_clips];
        for (k, &c) in clips.iter().enumerate() {
            new_index[c] = k;
        }
        let dim = self.reps.features.shape()[1];
        let mut data = Vec::new();
        let mut clip_of = Vec::new();
        for (row, &c) in self.reps.clip_of.iter().enumerate() {
            if new_index[c] != usize::MAX {
                data.extend_from_slice(self.reps.features.row(row));
                clip_of.push(new_index[c]);
            }
        }
        // keep fragments grouped by new clip order
        let mut rows: Vec<usize> = (0..clip_of.len()).collect();
        rows.sort_by_key(|&r| clip_of[r]);
        let features: Vec<f32> = rows.iter().flat_map(|&r| data[r * dim..(r + 1) * dim].iter().copied()).collect();
        let clip_of: Vec<usize> = rows.iter().map(|&r| clip_of[r]).collect();
        let n = clip_of.len();
        LabeledSplit {
            reps: Representations {
                features: if n == 0 {
                    Tensor::zeros(&[1, dim])
                } else {
                    Tensor::new(vec![n, dim], features).expect("selected rows")
                },
                clip_of,
                n_clips: clips.len(),
            },
            clip_labels: clips.iter().map(|&c| self.clip_labels[c].clone()).collect(),
        }
    }
}

/// Train/valid/test representations sharing a tag vocabulary.
#[derive(Clone, Debug)]
pub struct EvalData {
    pub tags: Vec<String>,
    pub train: LabeledSplit,
    pub valid: LabeledSplit,
    pub test: LabeledSplit,
}

/// Decodes every manifest song at `sample_rate` and extracts representations
/// per split. `labels` holds one multi-hot row per manifest song.
pub fn load_eval_data(
    manifest: &Manifest,
    labels: &[Vec<f32>],
    tags: Vec<String>,
    encoder: &Encoder,
    sample_rate: u32,
) -> Result<EvalData, EvalError> {
    let split = |s: Split, name: &'static str| -> Result<LabeledSplit, EvalError> {
        let idx = manifest.indices(s);
        if idx.is_empty() {
            return Err(EvalError::EmptySplit(name));
        }
        let clips = idx
            .iter()
            .map(|&i| manifest.load_audio(i, sample_rate))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(LabeledSplit {
            reps: extract_representations(encoder, &clips)?,
            clip_labels: idx.iter().map(|&i| labels[i].clone()).collect(),
        })
    };
    Ok(EvalData {
        tags,
        train: split(Split::Train, "train")?,
        valid: split(Split::Valid, "valid")?,
        test: split(Split::Test, "test")?,
    })
}

/// Indices of `ceil(fraction · songs)` songs: a prefix of one seeded
/// permutation, so smaller fractions are subsets of larger ones.
pub fn label_subset(songs: usize, fraction: f64, seed: u64) -> Result<Vec<usize>, EvalError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(EvalError::EmptySubset(fraction));
    }
    let take = ((fraction * songs as f64) - 1e-9).ceil().max(0.0) as usize;
    if take == 0 {
        return Err(EvalError::EmptySubset(fraction));
    }
    let mut perm: Vec<usize> = (0..songs).collect();
    perm.shuffle(&mut rng_for(seed, &[0x5ab5e7]));
    perm.truncate(take);
    Ok(perm)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TagScores {
    pub roc_auc: f64,
    pub pr_auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub tag_roc_auc: f64,
    pub tag_pr_auc: f64,
    pub clip_roc_auc: f64,
    pub clip_pr_auc: f64,
    pub epochs_run: usize,
    pub best_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tag_roc_auc: f64,
    pub tag_pr_auc: f64,
    pub clip_roc_auc: f64,
    pub clip_pr_auc: f64,
    /// Fragment-level test scores per evaluable tag, averaged over runs.
    pub per_tag: BTreeMap<String, TagScores>,
    /// Tags with a single class in the test split.
    pub skipped_tags: Vec<String>,
    pub runs: usize,
    pub run_metrics: Vec<RunMetrics>,
    pub label_fraction: f64,
    pub train_songs: usize,
    pub config: ProbeConfig,
    pub checkpoint_hash: Option<String>,
}

/// SHA-256 of a checkpoint file's bytes, hex encoded.
pub fn checkpoint_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Trains `config.seeds` probes on `data.train` (optionally restricted to a
/// label fraction) and averages their test metrics.
pub fn evaluate(
    data: &EvalData,
    config: &ProbeConfig,
    label_fraction: f64,
    checkpoint_hash: Option<String>,
) -> Result<EvalReport, EvalError> {
    config.validate()?;
    let subset = label_subset(data.train.reps.n_clips, label_fraction, config.seed)?;
    let train = if subset.len() == data.train.reps.n_clips {
        data.train.clone()
    } else {
        data.train.select_clips(&subset)
    };
    let test_labels = data.test.fragment_labels();
    let mut runs = Vec::with_capacity(config.seeds);
    let mut per_tag_sum: Vec<Option<(f64, f64)>> = vec![None; data.tags.len()];
    for k in 0..config.seeds {
        let seed = derive_seed(config.seed, &[k as u64]);
        let outcome = train_probe(&train, &data.valid, config, seed)?;
        let scores = predict(&outcome.head, &data.test.reps.features)?;
        let frag = tag_metrics(&scores, &test_labels)?;
        let clip_scores = aggregate_clip(&scores, &data.test.reps.clip_of, data.test.reps.n_clips)?;
        let clip = tag_metrics(&clip_scores, &data.test.clip_labels)?;
        for (acc, m) in per_tag_sum.iter_mut().zip(&frag.per_tag) {
            if let Some((r, p)) = m {
                let (ar, ap) = acc.get_or_insert((0.0, 0.0));
                *ar += r;
                *ap += p;
            }
        }
        runs.push(RunMetrics {
            seed,
            tag_roc_auc: frag.roc_auc,
            tag_pr_auc: frag.pr_auc,
            clip_roc_auc: clip.roc_auc,
            clip_pr_auc: clip.pr_auc,
            epochs_run: outcome.epochs_run,
            best_epoch: outcome.best_epoch,
        });
    }
    let n = runs.len() as f64;
    let mean = |f: fn(&RunMetrics) -> f64| runs.iter().map(f).sum::<f64>() / n;
    let mut per_tag = BTreeMap::new();
    let mut skipped_tags = Vec::new();
    for (tag, acc) in data.tags.iter().zip(per_tag_sum) {
        match acc {
            Some((r, p)) => {
                per_tag.insert(
                    tag.clone(),
                    TagScores {
                        roc_auc: r / n,
                        pr_auc: p / n,
                    },
                );
            }
            None => skipped_tags.push(tag.clone()),
        }
    }
    Ok(EvalReport {
        tag_roc_auc: mean(|r| r.tag_roc_auc),
        tag_pr_auc: mean(|r| r.tag_pr_auc),
        clip_roc_auc: mean(|r| r.clip_roc_auc),
        clip_pr_auc: mean(|r| r.clip_pr_auc),
        per_tag,
        skipped_tags,
        runs: runs.len(),
        run_metrics: runs,
        label_fraction,
        train_songs: subset.len(),
        config: config.clone(),
        checkpoint_hash,
    })
}
