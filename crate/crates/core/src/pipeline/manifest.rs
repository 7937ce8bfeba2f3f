//! Corpus manifests as JSON Lines: a header line with the split and sample
//! rate, then one record per line. Paths are stored relative to the manifest's
//! directory.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dsp::{read_wav, Waveform};
use crate::error::{Error, Result};
use crate::loss::Domain;

pub const MANIFEST_FORMAT: &str = "pulseforge-manifest";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Ground truth written by the simulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Oracle {
    /// Propagated clean speech per far-field channel.
    pub clean_paths: Vec<PathBuf>,
    /// Noise per far-field channel.
    pub noise_paths: Vec<PathBuf>,
    /// Shift applied to the close-talk recording; positive delays it.
    pub injected_offset_ms: f64,
    /// Gain applied to the close-talk recording.
    pub injected_gain: f64,
    /// Speech-to-noise ratio at the first far-field channel.
    pub true_snr_db: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub close_talk_clean_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub close_talk_noise_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub close_talk_snr_db: Option<f64>,
    /// Direct-path delay of each far-field channel.
    pub propagation_delay_ms: Vec<f64>,
    /// Close-talk lag relative to the far-field channels that a perfect
    /// synchronizer would report: the offset minus the mean propagation delay.
    pub expected_sync_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureRecord {
    pub id: String,
    pub domain: Domain,
    pub far_field_paths: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub close_talk_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<Oracle>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudo_label_path: Option<PathBuf>,
    /// Close-talk delay found by synchronization, in milliseconds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sync_delay_ms: Option<f64>,
}

impl MixtureRecord {
    pub fn num_channels(&self) -> usize {
        self.far_field_paths.len()
    }

    fn paths(&self) -> Vec<&Path> {
        let mut out: Vec<&Path> = self.far_field_paths.iter().map(PathBuf::as_path).collect();
        out.extend(self.close_talk_path.as_deref());
        out.extend(self.pseudo_label_path.as_deref());
        if let Some(o) = &self.oracle {
            out.extend(o.clean_paths.iter().map(PathBuf::as_path));
            out.extend(o.noise_paths.iter().map(PathBuf::as_path));
            out.extend(o.close_talk_clean_path.as_deref());
            out.extend(o.close_talk_noise_path.as_deref());
        }
        out
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Validation(format!("record {}: {m}", self.id)));
        if self.far_field_paths.is_empty() {
            return bad("no far-field channels");
        }
        match self.domain {
            Domain::Real if self.close_talk_path.is_none() => bad("real record without close-talk"),
            Domain::Simu if self.oracle.is_none() => bad("simulated record without oracle"),
            _ => {
                if let Some(o) = &self.oracle {
                    if o.clean_paths.len() != self.num_channels()
                        || o.noise_paths.len() != self.num_channels()
                    {
                        return bad("oracle channel count differs from far-field");
                    }
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    split: Split,
    sample_rate: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    pub split: Split,
    pub sample_rate: u32,
    pub records: Vec<MixtureRecord>,
    /// Directory that relative record paths are resolved against.
    pub base_dir: PathBuf,
}

impl CorpusManifest {
    pub fn new(split: Split, sample_rate: u32, base_dir: impl Into<PathBuf>) -> Self {
        Self {
            split,
            sample_rate,
            records: Vec::new(),
            base_dir: base_dir.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_owned()
        } else {
            self.base_dir.join(path)
        }
    }

    /// Moves the manifest to `base`, rewriting relative paths so they still
    /// point at the same files.
    pub fn rebase(&mut self, base: &Path) {
        let old = self.clone();
        let fix = |p: &mut PathBuf| {
            let full = old.resolve(p);
            *p = full.strip_prefix(base).map(Path::to_owned).unwrap_or(full);
        };
        for r in self.records.iter_mut() {
            r.far_field_paths.iter_mut().for_each(fix);
            r.close_talk_path.iter_mut().for_each(fix);
            r.pseudo_label_path.iter_mut().for_each(fix);
            if let Some(o) = r.oracle.as_mut() {
                o.clean_paths.iter_mut().for_each(fix);
                o.noise_paths.iter_mut().for_each(fix);
                o.close_talk_clean_path.iter_mut().for_each(fix);
                o.close_talk_noise_path.iter_mut().for_each(fix);
            }
        }
        self.base_dir = base.to_owned();
    }

    /// Reads a mono WAV referenced by a record and checks its sample rate.
    pub fn load(&self, path: &Path) -> Result<Waveform> {
        let full = self.resolve(path);
        let mut channels = read_wav(&full)?;
        if channels.len() != 1 {
            return Err(Error::Validation(format!(
                "{} has {} channels, expected mono",
                full.display(),
                channels.len()
            )));
        }
        let wave = channels.remove(0);
        if wave.sample_rate() != self.sample_rate {
            return Err(Error::Validation(format!(
                "{} is at {} Hz, manifest says {}",
                full.display(),
                wave.sample_rate(),
                self.sample_rate
            )));
        }
        Ok(wave)
    }

    /// Unique ids and per-record structure; optionally that every path exists.
    pub fn validate(&self, check_paths: bool) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Validation(format!("duplicate record id {}", r.id)));
            }
            r.validate()?;
            if check_paths {
                for p in r.paths() {
                    let full = self.resolve(p);
                    if !full.exists() {
                        return Err(Error::Validation(format!(
                            "record {}: missing file {}",
                            r.id,
                            full.display()
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let header = Header {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            split: self.split,
            sample_rate: self.sample_rate,
        };
        let mut out = serde_json::to_string(&header)?;
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Header = serde_json::from_str(
            lines
                .next()
                .ok_or_else(|| Error::Validation("empty manifest".into()))?,
        )?;
        if header.format != MANIFEST_FORMAT || header.version != MANIFEST_VERSION {
            return Err(Error::Validation(format!(
                "unsupported manifest {} v{}",
                header.format, header.version
            )));
        }
        let records = lines
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<MixtureRecord>, _>>()?;
        Ok(Self {
            split: header.split,
            sample_rate: header.sample_rate,
            records,
            base_dir: base_dir.into(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))
    }

    /// Reads a manifest; record paths must exist.
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_owned).unwrap_or_default();
        let m = Self::from_jsonl(&text, base)?;
        m.validate(true)?;
        Ok(m)
    }
}
