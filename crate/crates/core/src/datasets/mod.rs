//! Manifest ingestion, tag vocabularies, evaluation fragments and the
//! synthetic desk-scale corpus.

mod synth;

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{concat_fragments, decode_wav, resample, AudioBuffer, AudioError};

pub use synth::{synthesize_corpus, synthesize_song, SynthClass, SynthConfig, SHARED_TAG};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("manifest row {row}: file {path} does not exist")]
    MissingFile { row: usize, path: PathBuf },
    #[error("manifest row {row}: unknown split {value:?} (expected train, valid or test)")]
    BadSplit { row: usize, value: String },
    #[error("manifest row {row}: duplicate source_id {id:?}")]
    DuplicateId { row: usize, id: String },
    #[error("source_id {0:?} appears in more than one split")]
    SplitLeak(String),
    #[error("manifest row {row}: {message}")]
    Malformed { row: usize, message: String },
    #[error("only {have} distinct training tags, {need} requested")]
    TooFewTags { have: usize, need: usize },
    #[error("the training split is empty")]
    EmptyTrainSplit,
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "valid" => Some(Split::Valid),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// One song, possibly stored as several ordered fragment files.
#[derive(Clone, Debug, PartialEq)]
pub struct Song {
    pub source_id: String,
    pub split: Split,
    pub tags: Vec<String>,
    pub paths: Vec<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub songs: Vec<Song>,
}

#[derive(Deserialize)]
struct Row {
    path: String,
    source_id: String,
    split: String,
    #[serde(default)]
    tags: String,
    #[serde(default)]
    order: Option<i64>,
}

impl Manifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = (usize, &Song)> {
        self.songs.iter().enumerate().filter(move |(_, s)| s.split == split)
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.split(split).map(|(i, _)| i).collect()
    }

    /// Decodes a song (concatenating its fragments) at `sample_rate`.
    pub fn load_audio(&self, index: usize, sample_rate: u32) -> Result<AudioBuffer, DatasetError> {
        let song = &self.songs[index];
        let parts = song
            .paths
            .iter()
            .map(|p| {
                let b = decode_wav(p)?;
                let b = if b.sample_rate() == sample_rate {
                    b
                } else {
                    resample(&b, sample_rate)?
                };
                Ok(AudioBuffer::new(b.samples().to_vec(), sample_rate, song.source_id.clone())?)
            })
            .collect::<Result<Vec<_>, DatasetError>>()?;
        Ok(concat_fragments(&parts)?)
    }
}

/// Reads a `path,source_id,split,tags[,order]` CSV. Relative paths resolve
/// against the manifest's directory; tags are `|`-separated. Rows sharing a
/// `source_id` are fragments of one song when an `order` column is present.
pub fn load_manifest(path: &Path) -> Result<Manifest, DatasetError> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let has_order = reader.headers()?.iter().any(|h| h == "order");
    let mut songs: Vec<Song> = Vec::new();
    let mut orders: Vec<Vec<i64>> = Vec::new();
    let mut by_id: HashMap<String, usize> = HashMap::new();
    for (i, rec) in reader.deserialize::<Row>().enumerate() {
        // header is line 1
        let row = i + 2;
        let r = rec?;
        let split = Split::parse(&r.split).ok_or_else(|| DatasetError::BadSplit {
            row,
            value: r.split.clone(),
        })?;
        if r.source_id.is_empty() {
            return Err(DatasetError::Malformed {
                row,
                message: "empty source_id".into(),
            });
        }
        let file = base.join(&r.path);
        if !file.is_file() {
            return Err(DatasetError::MissingFile { row, path: file });
        }
        let tags: Vec<String> = r
            .tags
            .split('|')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(String::from)
            .collect();
        match by_id.get(&r.source_id) {
            Some(&idx) => {
                let order = match (has_order, r.order) {
                    (true, Some(o)) if !orders[idx].contains(&o) => o,
                    _ => {
                        return Err(DatasetError::DuplicateId {
                            row,
                            id: r.source_id,
                        })
                    }
                };
                if songs[idx].split != split {
                    return Err(DatasetError::SplitLeak(r.source_id));
                }
                songs[idx].paths.push(file);
                orders[idx].push(order);
                for t in tags {
                    if !songs[idx].tags.contains(&t) {
                        songs[idx].tags.push(t);
                    }
                }
            }
            None => {
                by_id.insert(r.source_id.clone(), songs.len());
                orders.push(vec![r.order.unwrap_or(0)]);
                songs.push(Song {
                    source_id: r.source_id,
                    split,
                    tags,
                    paths: vec![file],
                });
            }
        }
    }
    for (song, order) in songs.iter_mut().zip(&orders) {
        let mut keyed: Vec<(i64, PathBuf)> = order.iter().copied().zip(song.paths.drain(..)).collect();
        keyed.sort_by_key(|(o, _)| *o);
        song.paths = keyed.into_iter().map(|(_, p)| p).collect();
    }
    Ok(Manifest { songs })
}

/// Writes a manifest CSV with paths relative to `dir`.
pub fn write_manifest(manifest: &Manifest, path: &Path) -> Result<(), DatasetError> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["path", "source_id", "split", "tags"])?;
    for s in &manifest.songs {
        for p in &s.paths {
            let rel = p.strip_prefix(base).unwrap_or(p);
            w.write_record([
                rel.to_string_lossy().as_ref(),
                s.source_id.as_str(),
                s.split.as_str(),
                s.tags.join("|").as_str(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// The `k` most frequent training tags, ties broken lexicographically.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagVocabulary {
    pub tags: Vec<String>,
}

impl TagVocabulary {
    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    /// Multi-hot row for a tag list; unknown tags are ignored.
    pub fn encode(&self, tags: &[String]) -> Vec<f32> {
        self.tags
            .iter()
            .map(|t| if tags.contains(t) { 1.0 } else { 0.0 })
            .collect()
    }
}

/// Vocabulary plus one multi-hot label row per manifest song.
pub fn build_vocabulary(manifest: &Manifest, k: usize) -> Result<(TagVocabulary, Vec<Vec<f32>>), DatasetError> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    let mut any_train = false;
    for (_, s) in manifest.split(Split::Train) {
        any_train = true;
        for t in &s.tags {
            *counts.entry(t.as_str()).or_default() += 1;
        }
    }
    if !any_train {
        return Err(DatasetError::EmptyTrainSplit);
    }
    if counts.len() < k {
        return Err(DatasetError::TooFewTags {
            have: counts.len(),
            need: k,
        });
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let vocab = TagVocabulary {
        tags: ranked.into_iter().take(k).map(|(t, _)| t.to_string()).collect(),
    };
    let labels = manifest.songs.iter().map(|s| vocab.encode(&s.tags)).collect();
    Ok((vocab, labels))
}

/// An evaluation window: `length` samples of clip `clip` from `start`,
/// zero-padded past the clip's end.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Fragment {
    pub clip: usize,
    pub start: usize,
}

/// Tiles every clip with windows every `hop` samples; a clip shorter than
/// one window still yields one padded fragment.
pub fn fragment_index(clip_lengths: &[usize], crop_length: usize, hop: usize) -> Vec<Fragment> {
    assert!(crop_length > 0 && hop > 0, "crop_length and hop must be positive");
    let mut out = Vec::new();
    for (clip, &len) in clip_lengths.iter().enumerate() {
        let count = if len <= crop_length {
            1
        } else {
            (len - crop_length).div_ceil(hop) + 1
        };
        out.extend((0..count).map(|k| Fragment { clip, start: k * hop }));
    }
    out
}

/// Samples of one fragment, zero-padded to `length`.
pub fn fragment_samples(clip: &[f32], start: usize, length: usize) -> Vec<f32> {
    let mut out = vec![0.0; length];
    if start < clip.len() {
        let end = (start + length).min(clip.len());
        out[..end - start].copy_from_slice(&clip[start..end]);
    }
    out
}
