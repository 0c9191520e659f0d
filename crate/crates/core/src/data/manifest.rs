use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;

use super::{check_token, io_err, write_atomic, DataError, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Pretrain,
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Pretrain => "pretrain",
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "pretrain" => Split::Pretrain,
            "train" => Split::Train,
            "val" => Split::Val,
            "test" => Split::Test,
            _ => return Err(format!("unknown split {s:?}")),
        })
    }
}

/// A subject available for splitting.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubjectEntry {
    pub subject_id: String,
    pub volume: String,
    /// File holding the labels (may equal `volume`); `None` for unlabeled.
    pub labels: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub subject: SubjectEntry,
    pub split: Split,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub seed: u64,
    /// Free-form generation parameters, kept in insertion order.
    pub params: Vec<(String, String)>,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Unique ids, labels on every supervised record, tokens without
    /// whitespace.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            let s = &r.subject;
            check_token("subject id", &s.subject_id)?;
            check_token("volume path", &s.volume)?;
            if let Some(l) = &s.labels {
                check_token("label path", l)?;
            }
            if !seen.insert(s.subject_id.as_str()) {
                return Err(DataError::DuplicateSubject(s.subject_id.clone()));
            }
            if r.split != Split::Pretrain && s.labels.is_none() {
                return Err(DataError::InvalidConfig(format!("{} subject {} has no labels", r.split, s.subject_id)));
            }
        }
        for (k, v) in &self.params {
            check_token("parameter name", k)?;
            check_token("parameter value", v)?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# sslseg manifest: record <id> <volume> <labels|-> <split>\n");
        out.push_str(&format!("seed {}\n", self.seed));
        for (k, v) in &self.params {
            out.push_str(&format!("param {k} {v}\n"));
        }
        for r in &self.records {
            let s = &r.subject;
            out.push_str(&format!(
                "record {} {} {} {}\n",
                s.subject_id,
                s.volume,
                s.labels.as_deref().unwrap_or("-"),
                r.split
            ));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = Manifest::default();
        for (i, line) in text.lines().enumerate() {
            let err = |reason: String| DataError::Manifest { line: i + 1, reason };
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let tok: Vec<&str> = line.split_ascii_whitespace().collect();
            match tok.as_slice() {
                ["seed", s] => m.seed = s.parse().map_err(|_| err(format!("bad seed {s:?}")))?,
                ["param", k, v] => m.params.push((k.to_string(), v.to_string())),
                ["record", id, vol, labels, split] => m.records.push(ManifestRecord {
                    subject: SubjectEntry {
                        subject_id: id.to_string(),
                        volume: vol.to_string(),
                        labels: (*labels != "-").then(|| labels.to_string()),
                    },
                    split: split.parse().map_err(err)?,
                }),
                _ => return Err(err(format!("unrecognized line {line:?}"))),
            }
        }
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(io_err(path))?)
    }
}

/// Seeded subject-level split: labeled subjects are shuffled and dealt into
/// train, val and test; unlabeled subjects form the pretraining pool.
/// Labeled subjects left over after the requested counts are not listed.
pub fn split_manifest(subjects: &[SubjectEntry], counts: SplitCounts, seed: u64) -> Result<Manifest> {
    let mut seen = HashSet::new();
    for s in subjects {
        if !seen.insert(s.subject_id.as_str()) {
            return Err(DataError::DuplicateSubject(s.subject_id.clone()));
        }
    }
    let mut labeled: Vec<&SubjectEntry> = subjects.iter().filter(|s| s.labels.is_some()).collect();
    let requested = counts.train + counts.val + counts.test;
    if requested > labeled.len() {
        return Err(DataError::OverSubscribed { requested, available: labeled.len() });
    }
    labeled.shuffle(&mut rng::stream(seed, &[rng::key("split")]));
    let mut records = Vec::with_capacity(subjects.len());
    let plan = [(Split::Train, counts.train), (Split::Val, counts.val), (Split::Test, counts.test)];
    let mut it = labeled.into_iter();
    for (split, n) in plan {
        records.extend(it.by_ref().take(n).map(|s| ManifestRecord { subject: s.clone(), split }));
    }
    records.extend(
        subjects
            .iter()
            .filter(|s| s.labels.is_none())
            .map(|s| ManifestRecord { subject: s.clone(), split: Split::Pretrain }),
    );
    let m = Manifest { seed, params: Vec::new(), records };
    m.validate()?;
    Ok(m)
}
