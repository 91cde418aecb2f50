//! Dataset manifests and the synthetic toy-speaker generator.
//!
//! The generator builds self-contained corpora: each speaker is a fixed
//! harmonic profile (fundamental frequency plus banded spectral gains)
//! rendered as syllable-like bursts with silent gaps, per-utterance
//! jitter, and additive noise. The bursts matter: features are
//! per-band mean-normalized, so speaker identity must survive in the
//! temporal dynamics, not in a stationary spectrum.

mod toygen;

pub use toygen::{generate_toy_dataset, generate_toy_waves, ToySpec};

use crate::core::{SpeakerLabel, Waveform};
use crate::model::LabeledWave;
use crate::{AdvoxError, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

/// Which role an utterance plays.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
    Enroll,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Enroll => "enroll",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = AdvoxError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "enroll" => Ok(Split::Enroll),
            other => Err(AdvoxError::Manifest(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub utt_id: String,
    /// Absolute path after loading; stored relative to the manifest.
    pub path: PathBuf,
    pub speaker: SpeakerLabel,
    pub split: Split,
}

/// The corpus index: one row per utterance.
#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn entries_for(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Distinct speakers, ascending.
    pub fn speakers(&self) -> Vec<SpeakerLabel> {
        let set: BTreeSet<usize> = self.entries.iter().map(|e| e.speaker.index()).collect();
        set.into_iter().map(SpeakerLabel).collect()
    }

    /// Load the audio of one split, optionally capped per speaker
    /// (entries come in manifest order).
    pub fn load_split(&self, split: Split, per_speaker: Option<usize>) -> Result<Vec<LabeledWave>> {
        let mut counts = std::collections::HashMap::new();
        let mut out = Vec::new();
        for e in self.entries_for(split) {
            let c = counts.entry(e.speaker.index()).or_insert(0usize);
            if per_speaker.map_or(false, |cap| *c >= cap) {
                continue;
            }
            *c += 1;
            out.push((crate::dsp::load_waveform(&e.path)?, e.speaker));
        }
        Ok(out)
    }

    /// Identification training requires every speaker to have train
    /// coverage.
    pub fn check_identification_coverage(&self) -> Result<()> {
        let trained: BTreeSet<usize> =
            self.entries_for(Split::Train).map(|e| e.speaker.index()).collect();
        for s in self.speakers() {
            if !trained.contains(&s.index()) {
                return Err(AdvoxError::Manifest(format!(
                    "speaker {} has no training utterances",
                    s.index()
                )));
            }
        }
        Ok(())
    }

    /// Write as CSV with paths relative to the manifest location.
    pub fn save(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let mut w = csv::Writer::from_path(path)
            .map_err(|e| AdvoxError::Manifest(format!("{}: {e}", path.display())))?;
        w.write_record(["utt_id", "path", "speaker", "split"])
            .map_err(|e| AdvoxError::Manifest(e.to_string()))?;
        for e in &self.entries {
            let rel = e.path.strip_prefix(base).unwrap_or(&e.path);
            w.write_record([
                e.utt_id.as_str(),
                &rel.to_string_lossy(),
                &e.speaker.index().to_string(),
                &e.split.to_string(),
            ])
            .map_err(|e| AdvoxError::Manifest(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Read and validate a manifest CSV: header `utt_id,path,speaker,split`,
/// unique ids, files present on disk.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let base = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| AdvoxError::Manifest(format!("{}: {e}", path.display())))?;
    {
        let headers = rdr
            .headers()
            .map_err(|e| AdvoxError::Manifest(e.to_string()))?;
        let expected = ["utt_id", "path", "speaker", "split"];
        if headers.len() != 4 || headers.iter().zip(expected).any(|(h, e)| h != e) {
            return Err(AdvoxError::Manifest(format!(
                "{}: expected header utt_id,path,speaker,split, got {}",
                path.display(),
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
    }
    let mut seen = BTreeSet::new();
    let mut entries = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2; // header is line 1
        let row = row.map_err(|e| AdvoxError::Manifest(format!("line {line}: {e}")))?;
        if row.len() != 4 {
            return Err(AdvoxError::Manifest(format!(
                "line {line}: expected 4 fields, got {}",
                row.len()
            )));
        }
        let utt_id = row[0].to_string();
        if !seen.insert(utt_id.clone()) {
            return Err(AdvoxError::Manifest(format!(
                "line {line}: duplicate utterance id '{utt_id}'"
            )));
        }
        let speaker: usize = row[2]
            .parse()
            .map_err(|_| AdvoxError::Manifest(format!("line {line}: bad speaker '{}'", &row[2])))?;
        let split: Split = row[3]
            .parse()
            .map_err(|e| AdvoxError::Manifest(format!("line {line}: {e}")))?;
        let p = base.join(&row[1]);
        if !p.is_file() {
            return Err(AdvoxError::Manifest(format!(
                "line {line}: audio file not found: {}",
                p.display()
            )));
        }
        entries.push(ManifestEntry { utt_id, path: p, speaker: SpeakerLabel(speaker), split });
    }
    if entries.is_empty() {
        return Err(AdvoxError::Manifest(format!(
            "{}: no entries",
            path.display()
        )));
    }
    Ok(Manifest { entries })
}

/// In-memory labeled corpus grouped by split, as the generator hands it
/// out before anything touches disk.
#[derive(Debug, Clone, Default)]
pub struct ToyCorpus {
    pub train: Vec<(Waveform, SpeakerLabel)>,
    pub test: Vec<(Waveform, SpeakerLabel)>,
    pub enroll: Vec<(Waveform, SpeakerLabel)>,
}
